import numpy as np
import pytest

from sdnet import _sweep_py, kernels
from sdnet.errors import ConfigError


def _inputs(rng, T=5, C=3, N=2, L=4, k=3, dtype=np.float64):
    f = lambda *s: (0.5 * rng.standard_normal(s)).astype(dtype)  # noqa: E731
    return f(T, 2 * C, N, L), f(T, C, N, L), f(2 * C, C * k), f(C, C * k), k


def test_python_backend_always_available():
    assert "python" in kernels.available()


def test_unknown_backend_rejected():
    with pytest.raises(ConfigError):
        kernels.set_backend("gpu")


@pytest.mark.skipif("native" not in kernels.available(), reason="compiled kernel not built")
@pytest.mark.parametrize("dtype,tol", [(np.float64, 1e-12), (np.float32, 2e-6)])
@pytest.mark.parametrize("k", [1, 3, 5])
def test_native_matches_python(dtype, tol, k):
    native = kernels._BACKENDS["native"]
    rng = np.random.default_rng(k)
    pre_zr, pre_c, Kzr, Kc, k = _inputs(rng, k=k, dtype=dtype)
    outs_n = native.forward(pre_zr, pre_c, Kzr, Kc, k)
    outs_p = _sweep_py.forward(pre_zr, pre_c, Kzr, Kc, k)
    for a, b in zip(outs_n, outs_p):
        assert a.dtype == dtype
        np.testing.assert_allclose(a, b, atol=tol)
    h, zr, c = outs_p
    gh = rng.standard_normal(h.shape).astype(dtype)
    grads_n = native.backward(gh, h, zr, c, Kzr, Kc, k)
    grads_p = _sweep_py.backward(gh, h, zr, c, Kzr, Kc, k)
    for a, b in zip(grads_n, grads_p):
        np.testing.assert_allclose(a, b, atol=10 * tol, rtol=10 * tol)


def test_kernel_output_shapes():
    rng = np.random.default_rng(0)
    pre_zr, pre_c, Kzr, Kc, k = _inputs(rng)
    h, zr, c = _sweep_py.forward(pre_zr, pre_c, Kzr, Kc, k)
    assert h.shape == pre_c.shape and zr.shape == pre_zr.shape and c.shape == pre_c.shape
    d_zr, d_c, dKzr, dKc = _sweep_py.backward(np.ones_like(h), h, zr, c, Kzr, Kc, k)
    assert d_zr.shape == pre_zr.shape and dKzr.shape == Kzr.shape and dKc.shape == Kc.shape
