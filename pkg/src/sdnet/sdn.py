"""Spatial dependency (SD) layers.

An SD layer projects each pixel into a state space (``project_in``), runs one
or more directional gated recurrences over the feature map (``correction``)
and projects back to the input channel count (``project_out``).

Each directional sweep is a GRU whose state is a whole column (for LR/RL) or
row (for UD/DU).  State-to-state and input-to-state transitions are width-k
1-D convolutions across the sweep axis::

    r_x = sigmoid(K_r * h_{x-1} + L_r * u_x + b_r)
    z_x = sigmoid(K_z * h_{x-1} + L_z * u_x + b_z)
    c_x = tanh(K_c * (r_x . h_{x-1}) + L_c * u_x + b_c)
    h_x = (1 - z_x) . h_{x-1} + z_x . c_x

with ``h_{-1} = 0``.  The input terms ``L * u`` do not depend on the
recurrence, so they are computed for every step at once; only the state
terms go through the step kernel in :mod:`sdnet.kernels`.
"""
from __future__ import annotations

import enum
from dataclasses import dataclass, field

import numpy as np

from . import kernels, ops
from .errors import ConfigError, ShapeError
from .ops import _conv1d_raw
from .tensor import ParamStore, Tensor, record


class Direction(str, enum.Enum):
    LR = "LR"  # left to right
    RL = "RL"
    UD = "UD"  # top to bottom
    DU = "DU"

    @classmethod
    def parse(cls, value) -> "Direction":
        if isinstance(value, Direction):
            return value
        try:
            return cls(str(value).upper())
        except ValueError:
            raise ConfigError(f"unknown direction {value!r}; expected one of LR, RL, UD, DU") from None


@dataclass(frozen=True)
class SdnLayerConfig:
    state_size: int = 150
    directions: tuple[Direction, ...] = (Direction.LR, Direction.UD)
    kernel_width: int = 3
    residual: bool = False

    def __post_init__(self):
        dirs = tuple(Direction.parse(d) for d in self.directions)
        object.__setattr__(self, "directions", dirs)
        if not dirs:
            raise ConfigError("SD layer needs at least one direction")
        if len(set(dirs)) != len(dirs):
            raise ConfigError(f"duplicate direction in {[d.value for d in dirs]}")
        if int(self.state_size) < 1:
            raise ConfigError(f"state_size must be >= 1, got {self.state_size}")
        if int(self.kernel_width) < 1 or int(self.kernel_width) % 2 == 0:
            raise ConfigError(f"kernel_width must be a positive odd integer, got {self.kernel_width}")

    def to_dict(self) -> dict:
        return {
            "state_size": self.state_size,
            "directions": [d.value for d in self.directions],
            "kernel_width": self.kernel_width,
            "residual": self.residual,
        }


GATE_NAMES = ("Kz", "Kr", "Kc", "Lz", "Lr", "Lc", "bz", "br", "bc")


@dataclass
class DirectionParams:
    Kz: Tensor
    Kr: Tensor
    Kc: Tensor
    Lz: Tensor
    Lr: Tensor
    Lc: Tensor
    bz: Tensor
    br: Tensor
    bc: Tensor

    def tensors(self) -> tuple[Tensor, ...]:
        return tuple(getattr(self, n) for n in GATE_NAMES)


@dataclass
class SdnLayerParams:
    W_in: Tensor
    b_in: Tensor
    directions: list[DirectionParams] = field(default_factory=list)
    W_out: Tensor | None = None
    b_out: Tensor | None = None


def _uniform(rng: np.random.Generator, shape, fan_in: int) -> np.ndarray:
    s = 1.0 / np.sqrt(fan_in)
    return rng.uniform(-s, s, size=shape).astype(np.float32)


def init_sdn_params(store: ParamStore, prefix: str, in_channels: int,
                    config: SdnLayerConfig, rng: np.random.Generator) -> SdnLayerParams:
    """Create the parameters of one SD layer under ``prefix`` in ``store``."""
    cs, k = config.state_size, config.kernel_width
    W_in = store.add(f"{prefix}.W_in", _uniform(rng, (in_channels, cs), in_channels))
    b_in = store.add(f"{prefix}.b_in", _uniform(rng, (cs,), in_channels))
    dirs = []
    for i, _ in enumerate(config.directions):
        p = f"{prefix}.dir{i}"
        kern = {n: store.add(f"{p}.{n}", _uniform(rng, (cs, cs, k), cs * k))
                for n in ("Kz", "Kr", "Kc", "Lz", "Lr", "Lc")}
        # Update gate starts open so the layer is not a no-op at init.
        bz = store.add(f"{p}.bz", np.ones(cs, dtype=np.float32))
        br = store.add(f"{p}.br", np.zeros(cs, dtype=np.float32))
        bc = store.add(f"{p}.bc", np.zeros(cs, dtype=np.float32))
        dirs.append(DirectionParams(bz=bz, br=br, bc=bc, **kern))
    W_out = store.add(f"{prefix}.W_out", _uniform(rng, (cs, in_channels), cs))
    b_out = store.add(f"{prefix}.b_out", _uniform(rng, (in_channels,), cs))
    return SdnLayerParams(W_in, b_in, dirs, W_out, b_out)


def sdn_params_from_store(store: ParamStore, prefix: str, config: SdnLayerConfig) -> SdnLayerParams:
    dirs = [DirectionParams(**{n: store[f"{prefix}.dir{i}.{n}"] for n in GATE_NAMES})
            for i in range(len(config.directions))]
    return SdnLayerParams(store[f"{prefix}.W_in"], store[f"{prefix}.b_in"], dirs,
                          store[f"{prefix}.W_out"], store[f"{prefix}.b_out"])


# ---------------------------------------------------------------- layout


def _to_canonical(a: np.ndarray, d: Direction) -> np.ndarray:
    """``[N, C, H, W]`` -> ``[T, C, N, L]`` with steps ordered along ``d``."""
    if d is Direction.RL:
        a = a[..., ::-1]
    elif d is Direction.DU:
        a = a[:, :, ::-1, :]
    if d in (Direction.LR, Direction.RL):
        return np.ascontiguousarray(a.transpose(3, 1, 0, 2))
    return np.ascontiguousarray(a.transpose(2, 1, 0, 3))


def _from_canonical(a: np.ndarray, d: Direction) -> np.ndarray:
    if d in (Direction.LR, Direction.RL):
        out = a.transpose(2, 1, 3, 0)
    else:
        out = a.transpose(2, 1, 0, 3)
    if d is Direction.RL:
        out = out[..., ::-1]
    elif d is Direction.DU:
        out = out[:, :, ::-1, :]
    return np.ascontiguousarray(out)


# ---------------------------------------------------------------- stages


def project_in(x: Tensor, params: SdnLayerParams) -> Tensor:
    return ops.affine_pointwise(x, params.W_in, params.b_in)


def project_out(h: Tensor, params: SdnLayerParams) -> Tensor:
    return ops.affine_pointwise(h, params.W_out, params.b_out)


def sweep(u: Tensor, d: Direction, p: DirectionParams) -> Tensor:
    """One directional gated recurrence over ``u`` (``[C,H,W]`` or ``[N,C,H,W]``)."""
    d = Direction.parse(d)
    cs, _, k = p.Kz.shape
    if u.ndim not in (3, 4) or u.shape[-3] != cs:
        raise ShapeError(f"sweep: input {u.shape} does not match state size {cs}")
    squeeze = u.ndim == 3
    ub = u.data[None] if squeeze else u.data
    dtype = ub.dtype
    pad = (k - 1) // 2

    uc = _to_canonical(ub, d)  # T,C,N,L
    T, _, N, L = uc.shape
    # Input-to-state terms for all steps: batch over (T, N).
    seq = np.ascontiguousarray(uc.transpose(0, 2, 1, 3)).reshape(T * N, cs, L)
    Lcat = np.concatenate([p.Lz.data, p.Lr.data, p.Lc.data], axis=0).astype(dtype, copy=False)
    bcat = np.concatenate([p.bz.data, p.br.data, p.bc.data]).astype(dtype, copy=False)
    pre, cols = _conv1d_raw(seq, Lcat, pad)
    pre += bcat[:, None]
    pre = pre.reshape(T, N, 3 * cs, L).transpose(0, 2, 1, 3)
    pre_zr = np.ascontiguousarray(pre[:, :2 * cs])
    pre_c = np.ascontiguousarray(pre[:, 2 * cs:])
    Kzr = np.concatenate([p.Kz.data, p.Kr.data], axis=0).reshape(2 * cs, cs * k).astype(dtype, copy=False)
    Kc = p.Kc.data.reshape(cs, cs * k).astype(dtype, copy=False)

    kern = kernels.sweep_kernel()
    h, zr, c = kern.forward(pre_zr, pre_c, Kzr, Kc, k)
    out = _from_canonical(h, d)
    if squeeze:
        out = out[0]

    def backward(g, needs):
        gb = g[None] if squeeze else g
        gh = _to_canonical(np.asarray(gb, dtype=dtype), d)
        d_pre_zr, d_pre_c, dKzr, dKc = kern.backward(gh, h, zr, c, Kzr, Kc, k)
        d_pre = np.concatenate([d_pre_zr, d_pre_c], axis=1)  # T,3C,N,L
        g2 = np.ascontiguousarray(d_pre.transpose(1, 0, 2, 3)).reshape(3 * cs, T * N * L)
        grads = [None] * 10
        if needs[0]:
            gseq = np.ascontiguousarray(d_pre.transpose(0, 2, 1, 3)).reshape(T * N, 3 * cs, L)
            flipped = np.ascontiguousarray(Lcat[:, :, ::-1].transpose(1, 0, 2))
            du, _ = _conv1d_raw(gseq, flipped, k - 1 - pad)
            du = du.reshape(T, N, cs, L).transpose(0, 2, 1, 3)
            du = _from_canonical(du, d)
            grads[0] = du[0] if squeeze else du
        dKzr = dKzr.reshape(2 * cs, cs, k)
        grads[1], grads[2] = dKzr[:cs], dKzr[cs:]
        grads[3] = dKc.reshape(cs, cs, k)
        if any(needs[4:7]):
            dL = (g2 @ cols.T).reshape(3 * cs, cs, k)
            grads[4], grads[5], grads[6] = dL[:cs], dL[cs:2 * cs], dL[2 * cs:]
        db = g2.sum(axis=1)
        grads[7], grads[8], grads[9] = db[:cs], db[cs:2 * cs], db[2 * cs:]
        return grads

    return record(out, (u, *p.tensors()), f"sweep_{d.value}", backward)


def correction(u: Tensor, config: SdnLayerConfig, params: SdnLayerParams) -> Tensor:
    """Apply the configured sweeps one after another, each with its own parameters."""
    if len(params.directions) != len(config.directions):
        raise ConfigError(
            f"config has {len(config.directions)} directions, params have {len(params.directions)}")
    for d, p in zip(config.directions, params.directions):
        u = sweep(u, d, p)
    return u


def sdn_forward(x: Tensor, config: SdnLayerConfig, params: SdnLayerParams) -> Tensor:
    y = project_out(correction(project_in(x, params), config, params), params)
    if config.residual:
        y = ops.add(y, x)
    return y
