"""Randomised properties checked with hypothesis."""
import numpy as np
from hypothesis import given, settings, strategies as st

from sdnet import data, ops, train
from sdnet.tensor import Tensor

masks = st.integers(1, 40).flatmap(
    lambda n: st.tuples(st.lists(st.integers(0, 1), min_size=n, max_size=n),
                        st.lists(st.integers(0, 1), min_size=n, max_size=n)))


@given(masks)
def test_jaccard_dice_identity(pair):
    a, b = (np.array(m) for m in pair)
    d, j = train.dice_score(a, b, exact=True), train.jaccard_score(a, b, exact=True)
    assert j == d / (2 - d)
    assert 0 <= j <= d <= 1


@given(masks)
def test_dice_is_symmetric(pair):
    a, b = (np.array(m) for m in pair)
    assert train.dice_score(a, b, exact=True) == train.dice_score(b, a, exact=True)


@settings(max_examples=30, deadline=None)
@given(st.integers(1, 40), st.floats(0.05, 0.9), st.integers(0, 10 ** 6))
def test_split_is_a_partition(n, train_frac, seed):
    rest = (1 - train_frac) / 2
    ds = data.gen_stripe_task(n, 16, 16, seed=0)
    spec = data.SplitSpec(train_frac, rest, 1 - train_frac - rest)
    try:
        parts = data.split(ds, spec, seed)
    except data.ConfigError:
        return
    ids = [s.group_id for p in parts for s in p]
    assert sorted(ids) == sorted(s.group_id for s in ds) and len(set(ids)) == n


@given(st.integers(0, 500), st.lists(st.floats(0, 1), min_size=1, max_size=5))
def test_largest_remainder_sums(n, weights):
    total = sum(weights)
    if total == 0:
        return
    counts = data.largest_remainder(n, [w / total for w in weights])
    assert sum(counts) == n
    assert all(abs(c - n * w / total) < 1 + 1e-9 for c, w in zip(counts, weights))


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 2 ** 32 - 1), st.floats(-3, 3))
def test_conv2d_is_linear(seed, alpha):
    rng = np.random.default_rng(seed)
    x, y = rng.standard_normal((2, 1, 2, 5, 4))
    k = Tensor(rng.standard_normal((3, 2, 3, 3)))
    lhs = ops.conv2d(Tensor(alpha * x + y), k).data
    rhs = alpha * ops.conv2d(Tensor(x), k).data + ops.conv2d(Tensor(y), k).data
    np.testing.assert_allclose(lhs, rhs, atol=1e-9)


@given(st.lists(st.floats(0, 1, allow_nan=False), min_size=1, max_size=30), st.integers(1, 10))
def test_early_stop_best_is_argmax_like(history, patience):
    stop, best = train.early_stop(history, patience)
    assert 0 <= best < len(history)
    assert history[best] >= max(history) - 1e-6 * len(history)
    assert stop == (len(history) - 1 - best >= patience)


@given(st.lists(st.integers(-3000, 3000), min_size=1, max_size=20))
def test_clip_rescale_in_unit_interval(xs):
    out = data.clip_rescale(xs, -1000, 1000)
    assert out.min() >= 0 and out.max() <= 1
