"""Acceptance criteria, one test per criterion.

Each test prints a ``criterion N: PASS|FAIL`` line; the lines are repeated in
the pytest terminal summary.  Criteria 5 and 10 train real models and take
several minutes each on one CPU core.
"""
import json
import re
import time
from fractions import Fraction

import numpy as np
import pytest

from acceptance_log import verdict
from oracles import dice_jaccard_counts, sweep_oracle
from sdnet import analysis, arch, checkpoint, cli, kernels, ops, sdn, train
from sdnet.config import load_config, shipped_config_path
from sdnet.sdn import Direction, DirectionParams, SdnLayerConfig
from sdnet.tensor import GradTape, ParamStore, Tensor

KERNELS = ("Kz", "Kr", "Kc", "Lz", "Lr", "Lc")
GATE_BIASES = ("bz", "br", "bc")


def _dir_params(rng, cs, scale=0.5):
    arrays = {n: (scale * rng.standard_normal((cs, cs, 3))).astype(np.float32) for n in KERNELS}
    arrays.update({n: rng.standard_normal(cs).astype(np.float32) for n in GATE_BIASES})
    return arrays, DirectionParams(**{n: Tensor(v) for n, v in arrays.items()})


def _step_slice(a, d, t, H, W):
    if d is Direction.LR:
        return a[..., t]
    if d is Direction.RL:
        return a[..., W - 1 - t]
    if d is Direction.UD:
        return a[..., t, :]
    return a[..., H - 1 - t, :]


def _plain(**kw):
    spec = dict(family="plain", depth=1, base_width=4, convs_per_block=0)
    spec.update(kw)
    return arch.ArchitectureSpec(**spec)


# ---------------------------------------------------------------- 1


def test_criterion_01_gradient_suite():
    required = {"affine_pointwise", "conv2d", "conv1d_axis", "batchnorm", "activations", "soft_dice",
                "cross_entropy", "sdn_layer", "sweep_LR", "sweep_UD", "sweep_RL", "sweep_DU", "network"}
    start = time.perf_counter()
    worst, failures, seen = 0.0, [], set()
    for seed in range(5):
        for scope in ("ops", "sdn", "network"):
            for name, rep in cli.gradcheck_suite(scope, seed).items():
                seen.add(name)
                worst = max(worst, rep.max_rel_error)
                if not (rep.passed and rep.max_rel_error <= 1e-4):
                    failures.append((seed, name, rep.max_rel_error))
    elapsed = time.perf_counter() - start
    ok = not failures and required <= seen and elapsed < 120
    verdict(1, ok, f"{len(seen)} checks x 5 seeds, worst rel err {worst:.2e}, {elapsed:.0f}s")
    assert required <= seen, required - seen
    assert not failures, failures
    assert elapsed < 120


# ---------------------------------------------------------------- 2


def test_criterion_02_sweep_matches_scalar_oracle():
    rng = np.random.default_rng(2024)
    worst, cases = 0.0, 0
    before = kernels.backend()
    try:
        for be in kernels.available():
            kernels.set_backend(be)
            for d in Direction:
                for _ in range(6):
                    cs = int(rng.integers(1, 5))
                    H, W = (int(v) for v in rng.integers(3, 7, size=2))
                    arrays, p = _dir_params(rng, cs)
                    u = rng.standard_normal((cs, H, W)).astype(np.float32)
                    got = sdn.sweep(Tensor(u), d, p).data
                    ref = np.array(sweep_oracle(u.astype(np.float64).tolist(), d.value,
                                                {k: v.astype(np.float64).tolist() for k, v in arrays.items()}))
                    worst = max(worst, float(np.abs(got - ref).max()))
                    cases += 1
    finally:
        kernels.set_backend(before)
    verdict(2, worst <= 1e-5, f"{cases} cases over {kernels.available()}, max abs err {worst:.1e}")
    assert worst <= 1e-5


# ---------------------------------------------------------------- 3


def test_criterion_03_receptive_field_dichotomy():
    start = time.perf_counter()
    n, H = 4, 24
    bound = analysis.conv_stack_rf(n)
    conv_ok = True
    for seed in range(3):
        net = arch.build(_plain(convs_per_block=n), seed=seed)
        i, j = 12, 12
        rep = analysis.probe_receptive_field(net, (1, H, H), (i, j), seed=seed)
        box = np.zeros((H, H), dtype=bool)
        box[i - n:i + n + 1, j - n:j + n + 1] = True
        conv_ok &= max(rep.extent) <= bound == 9 and not (rep.footprint & ~box).any()

    cfg = SdnLayerConfig(state_size=4, directions=("LR", "UD"))
    full = 0
    for seed in range(10):
        net = arch.build(_plain(sd_scales=(0,), sdn_config=cfg), seed=seed)
        rep = analysis.probe_receptive_field(net, (1, 16, 16), (15, 15), seed=seed)
        full += rep.full_width and rep.full_height
    elapsed = time.perf_counter() - start
    ok = conv_ok and full >= 9 and elapsed < 60
    verdict(3, ok, f"conv stack within {bound}x{bound}: {conv_ok}; SD full coverage {full}/10; {elapsed:.1f}s")
    assert conv_ok and full >= 9 and elapsed < 60


# ---------------------------------------------------------------- 4


def test_criterion_04_causality():
    rng = np.random.default_rng(4)
    H, W = 5, 6
    violations, checked = 0, 0
    before = kernels.backend()
    try:
        for be in kernels.available():
            kernels.set_backend(be)
            for d in Direction:
                _, p = _dir_params(rng, 3)
                T = W if d in (Direction.LR, Direction.RL) else H
                for t in range(T):
                    u = Tensor(rng.standard_normal((2, 3, H, W)).astype(np.float32), requires_grad=True)
                    with GradTape() as tape:
                        y = sdn.sweep(u, d, p)
                        sel = np.zeros(y.shape, dtype=np.float32)
                        _step_slice(sel, d, t, H, W)[...] = rng.standard_normal(_step_slice(sel, d, t, H, W).shape)
                        loss = ops.sum(ops.mul(y, Tensor(sel)))
                    tape.backward(loss)
                    g = tape.grad(u)
                    for later in range(t + 1, T):
                        violations += int(np.count_nonzero(_step_slice(g, d, later, H, W)))
                    checked += 1
    finally:
        kernels.set_backend(before)
    verdict(4, violations == 0, f"{checked} probes, {violations} nonzero gradients ahead of the sweep")
    assert violations == 0


# ---------------------------------------------------------------- 5


@pytest.mark.slow
def test_criterion_05_stripe_efficacy():
    sd_cfg = load_config(shipped_config_path("stripe_sdunet"))
    ctl_cfg = load_config(shipped_config_path("stripe_control"))
    assert sd_cfg.data == ctl_cfg.data
    splits = sd_cfg.data.load()
    assert [len(s) for s in splits] == [200, 50, 50]
    assert analysis.conv_stack_rf(ctl_cfg.arch.convs_per_block) < 33
    assert sd_cfg.arch.sd_scales == (sd_cfg.arch.depth - 1,)

    start = time.perf_counter()
    sd_rep, _ = train.run_experiment(sd_cfg.arch, sd_cfg.data, sd_cfg.train)
    ctl_rep, _ = train.run_experiment(ctl_cfg.arch, ctl_cfg.data, ctl_cfg.train)
    elapsed = time.perf_counter() - start

    wins = 0
    for a, b in zip(sd_rep.per_run, ctl_rep.per_run):
        assert a["seed"] == b["seed"]
        wins += a["dice"] >= 0.90 and b["dice"] <= a["dice"] - 0.15
    pairs = ", ".join(f"{a['dice']:.3f}/{b['dice']:.3f}" for a, b in zip(sd_rep.per_run, ctl_rep.per_run))
    ok = wins >= 4 and elapsed < 1800
    verdict(5, ok, f"{wins}/5 seeds (SD/control Dice {pairs}), {elapsed / 60:.1f} min")
    assert wins >= 4
    assert elapsed < 1800


# ---------------------------------------------------------------- 6


def test_criterion_06_metric_identities():
    rng = np.random.default_rng(6)
    bad = 0
    for _ in range(1000):
        n = int(rng.integers(1, 200))
        a, b = rng.integers(0, 2, n), rng.integers(0, 2, n)
        d = train.dice_score(a, b, exact=True)
        j = train.jaccard_score(a, b, exact=True)
        od, oj = dice_jaccard_counts(a.tolist(), b.tolist())
        bad += not (j == d / (2 - d) and (d, j) == (od, oj))
    m = np.array([1, 1, 0, 0])
    examples = (
        train.dice_score(m, m) == 1.0 and train.jaccard_score(m, m) == 1.0
        and train.dice_score(m, 1 - m) == 0.0 and train.jaccard_score(m, 1 - m) == 0.0
        and train.dice_score([1, 1, 0], [0, 1, 1]) == 0.5
        and train.jaccard_score([1, 1, 0], [0, 1, 1], exact=True) == Fraction(1, 3)
    )
    verdict(6, bad == 0 and examples, f"identity violations {bad}/1000, worked examples {examples}")
    assert bad == 0 and examples


# ---------------------------------------------------------------- 7


def test_criterion_07_degenerate_sd_layers():
    sd_cfg = SdnLayerConfig(state_size=3, directions=("LR", "UD"), residual=True)
    exact = True
    for family in ("unet", "unetpp"):
        base = arch.ArchitectureSpec(family=family, depth=3, base_width=4)
        plain, sd = arch.build(base, seed=0), arch.build(arch.with_sd(base, (1, 2), 1, sd_cfg), seed=1)
        for name, t in plain.params.items():
            sd.params.set(name, t.data)
        for name in sd.params.names():
            if name.endswith(("W_out", "b_out")):
                sd.params.set(name, np.zeros_like(sd.params[name].data))
        x = np.random.default_rng(7).uniform(size=(2, 1, 8, 8)).astype(np.float32)
        for mode in ("train", "eval"):
            exact &= sd.forward(x, mode).data.tobytes() == plain.forward(x, mode).data.tobytes()

    rng = np.random.default_rng(70)
    closed_err = open_err = 0.0
    for d in Direction:
        _, p = _dir_params(rng, 3)
        for n in ("Kz", "Lz"):
            getattr(p, n).data[:] = 0
        u = Tensor(rng.standard_normal((3, 5, 6)).astype(np.float32))
        p.bz.data[:] = -20
        closed_err = max(closed_err, float(np.abs(sdn.sweep(u, d, p).data).max()))
        p.bz.data[:] = 20
        p.Kc.data[:] = 0
        p.Lc.data[:] = 0
        want = np.tanh(p.bc.data)[:, None, None]
        open_err = max(open_err, float(np.abs(sdn.sweep(u, d, p).data - want).max()))
    ok = exact and closed_err <= 1e-6 and open_err <= 1e-4
    verdict(7, ok, f"bit-exact baseline {exact}; closed gate {closed_err:.1e}, open gate {open_err:.1e}")
    assert exact and closed_err <= 1e-6 and open_err <= 1e-4


# ---------------------------------------------------------------- 8


def test_criterion_08_accounting():
    conv_params = analysis.count_params(arch.build(_plain(head_kernel=3, out_classes=4)))
    store = ParamStore()
    one_dir = SdnLayerConfig(state_size=3, directions=("LR",), kernel_width=3)
    sdn.init_sdn_params(store, "sd", 2, one_dir, np.random.default_rng(0))
    sd_params = analysis.count_params(store)
    conv_macs = analysis.count_macs(_plain(head_kernel=3, out_classes=1), (1, 8, 8))
    aff_macs = analysis.affine_macs(8, 8, 2, 3)
    sd_macs = analysis.sdn_macs(8, 8, 2, one_dir)
    closed = (conv_params, sd_params, conv_macs, aff_macs, sd_macs) == (
        4 * 1 * 9 + 4, 6 + 3 + 6 * 27 + 9 + 6 + 2, 8 * 8 * 9, 8 * 8 * 2 * 3, 2 * 384 + 6 * 64 * 9 * 3)

    ordering = True
    for task, c in (("nuclei", 3), ("polyps", 3), ("liver", 1)):
        for base, sd in (("unet", "sdu_net"), ("unetpp", "sdnu_net")):
            b, s = arch.presets(base, task), arch.presets(sd, task)
            shape = (c, 64, 64)
            ordering &= analysis.count_params(arch.build(s)) > analysis.count_params(arch.build(b))
            ordering &= analysis.count_macs(s, shape) > analysis.count_macs(b, shape)
    verdict(8, closed and ordering, f"closed forms {closed} (40/188/576/384/11136); SD variants larger {ordering}")
    assert closed and ordering


# ---------------------------------------------------------------- 9


def test_criterion_09_reproducibility_and_persistence(tmp_path):
    spec = arch.ArchitectureSpec(family="unet", depth=2, base_width=4, sd_scales=(1,),
                                 sdn_config=SdnLayerConfig(state_size=4))
    data_spec = train.DataSpec(task="stripe", n=30, height=16, width=16)
    cfg = train.TrainConfig(learning_rate=1e-3, batch_size=8, max_epochs=3, patience=2, seed=11, runs=5)
    first, runs = train.run_experiment(spec, data_spec, cfg)
    second, _ = train.run_experiment(spec, data_spec, cfg)
    identical = first.to_json().encode() == second.to_json().encode()

    net = arch.build(spec, seed=0)
    net.params.load_state_dict(runs[0].state)
    x = data_spec.load()[2].images()
    ref = net.forward(x, mode="eval").data
    checkpoint.save(tmp_path / "best.sdnt", net.params.state_dict())
    restored = arch.build(spec, seed=123)
    restored.params.load_state_dict(checkpoint.load(tmp_path / "best.sdnt"))
    round_trip = restored.forward(x, mode="eval").data.tobytes() == ref.tobytes()

    table = first.to_table("SDU-Net")
    cell = r"\d+\.\d{2}±\d+\.\d{2}"
    fmt = first.to_dict()["runs"] == 5 and re.search(rf"SDU-Net\s+{cell}\s+{cell}", table) is not None
    ok = identical and round_trip and fmt
    verdict(9, ok, f"byte-identical report {identical}; checkpoint round trip {round_trip}; mean±sd table {fmt}")
    assert identical and round_trip and fmt


# ---------------------------------------------------------------- 10

ABLATION_CONFIG = {
    "arch": {"family": "unet", "depth": 2, "base_width": 8, "sd_scales": [1],
             "sdn_config": {"state_size": 8, "directions": ["LR", "UD"], "kernel_width": 3, "residual": True}},
    "train": {"learning_rate": 0.001, "batch_size": 8, "max_epochs": 100, "patience": 15, "seed": 0, "runs": 5},
    "data": {"task": "stripe", "n": 150, "height": 32, "width": 32},
}


@pytest.mark.slow
def test_criterion_10_direction_ablation(tmp_path):
    cfg_path = tmp_path / "ablate.json"
    cfg_path.write_text(json.dumps(ABLATION_CONFIG))
    out = tmp_path / "ablate"
    start = time.perf_counter()
    code = cli.main(["ablate", "--config", str(cfg_path), "--axis", "directions", "--values", "1,2,4",
                     "--out", str(out)])
    elapsed = time.perf_counter() - start
    assert code == 0
    summary = json.loads((out / "summary.json").read_text())
    assert summary["values"] == ["1", "2", "4"]
    per = {v: json.loads((out / f"directions={v}" / "metrics.json").read_text())["per_run"] for v in ("1", "2", "4")}
    assert all(len(p) == 5 for p in per.values())
    ups = sum(b["dice"] >= a["dice"] for a, b in zip(per["1"], per["2"]))
    pairs = ", ".join(f"{a['dice']:.4f}->{b['dice']:.4f}" for a, b in zip(per["1"], per["2"]))
    verdict(10, ups >= 3, f"1->2 directions non-decreasing on {ups}/5 seeds ({pairs}), {elapsed / 60:.1f} min")
    assert ups >= 3
