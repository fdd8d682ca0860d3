"""Receptive-field probing, parameter/MAC accounting and gradient checking."""
from __future__ import annotations

import json
from dataclasses import dataclass, field
from typing import Callable, Mapping

import numpy as np

from . import ops
from .arch import CONV_KERNEL, ArchitectureSpec, Network, block_plan
from .errors import ContractError, ShapeError
from .sdn import SdnLayerConfig
from .tensor import GradTape, ParamStore, Tensor

RF_THRESHOLD = 1e-12
# Gradients below this are indistinguishable from finite-difference roundoff
# (about eps * |f| / h = 1e-13 at h = 1e-3), so they do not set the error scale.
GRAD_FLOOR = 1e-7


# ---------------------------------------------------------------- gradient check


@dataclass
class GradCheckReport:
    tolerance: float
    per_tensor: dict[str, float] = field(default_factory=dict)
    checked: int = 0
    skipped: int = 0

    @property
    def max_rel_error(self) -> float:
        return max(self.per_tensor.values(), default=0.0)

    @property
    def passed(self) -> bool:
        return self.max_rel_error <= self.tolerance

    def to_dict(self) -> dict:
        return {
            "passed": self.passed,
            "max_rel_error": self.max_rel_error,
            "tolerance": self.tolerance,
            "checked": self.checked,
            "skipped": self.skipped,
            "per_tensor": dict(self.per_tensor),
        }


def grad_check(
    fn: Callable[..., Tensor],
    params: Mapping[str, np.ndarray],
    tolerance: float = 1e-4,
    h: float = 1e-3,
    max_coords: int = 200,
    seed: int = 0,
) -> GradCheckReport:
    """Compare tape gradients of ``fn(**tensors)`` with central differences.

    Everything runs in float64.  At most ``max_coords`` coordinates are
    sampled per tensor.  The error of a tensor is
    ``max|analytic - numeric| / max(max|numeric|, max|analytic|, GRAD_FLOOR)`` over
    its sampled coordinates.  Probes whose +h and -h evaluations take
    different ReLU/max-pool branches are skipped and counted.
    """
    rng = np.random.default_rng(seed)
    arrays = {k: np.array(v, dtype=np.float64) for k, v in params.items()}

    tensors = {k: Tensor(v, requires_grad=True, dtype=np.float64) for k, v in arrays.items()}
    with GradTape() as tape:
        out = fn(**tensors)
    if out.data.size != 1:
        raise ContractError(f"grad_check: fn must return a scalar, got shape {out.shape}")
    tape.backward(out)
    analytic = {k: tape.grad(t) for k, t in tensors.items()}

    def evaluate(name: str, flat_index: int, delta: float) -> tuple[float, list]:
        local = {k: v for k, v in arrays.items()}
        arr = arrays[name].copy()
        arr.reshape(-1)[flat_index] += delta
        local[name] = arr
        with ops.branch_log() as log:
            val = fn(**{k: Tensor(v, dtype=np.float64) for k, v in local.items()}).data.item()
        return val, log

    report = GradCheckReport(tolerance=tolerance)
    for name, arr in arrays.items():
        size = arr.size
        idx = np.arange(size) if size <= max_coords else rng.choice(size, max_coords, replace=False)
        a_vals, n_vals = [], []
        for i in idx:
            fp, log_p = evaluate(name, int(i), h)
            fm, log_m = evaluate(name, int(i), -h)
            if log_p != log_m:
                report.skipped += 1
                continue
            n_vals.append((fp - fm) / (2 * h))
            a_vals.append(analytic[name].reshape(-1)[i])
        report.checked += len(a_vals)
        if not a_vals:
            continue
        a, n = np.array(a_vals), np.array(n_vals)
        scale = max(np.abs(n).max(), np.abs(a).max(), GRAD_FLOOR)
        report.per_tensor[name] = float(np.abs(a - n).max() / scale)
    return report


# ---------------------------------------------------------------- receptive field


@dataclass
class ReceptiveFieldReport:
    probe_pixel: tuple[int, int]
    footprint: np.ndarray  # [H, W] bool
    threshold: float = RF_THRESHOLD

    @property
    def bbox(self) -> tuple[tuple[int, int], tuple[int, int]] | None:
        """Inclusive ``((row_min, row_max), (col_min, col_max))``; None if empty."""
        rows = np.flatnonzero(self.footprint.any(axis=1))
        cols = np.flatnonzero(self.footprint.any(axis=0))
        if rows.size == 0:
            return None
        return (int(rows[0]), int(rows[-1])), (int(cols[0]), int(cols[-1]))

    @property
    def extent(self) -> tuple[int, int]:
        """Bounding-box ``(height, width)`` in pixels."""
        b = self.bbox
        if b is None:
            return 0, 0
        (r0, r1), (c0, c1) = b
        return r1 - r0 + 1, c1 - c0 + 1

    @property
    def full_width(self) -> bool:
        return self.extent[1] == self.footprint.shape[1]

    @property
    def full_height(self) -> bool:
        return self.extent[0] == self.footprint.shape[0]

    def to_dict(self) -> dict:
        b = self.bbox
        return {
            "probe_pixel": list(self.probe_pixel),
            "shape": list(self.footprint.shape),
            "threshold": self.threshold,
            "footprint_size": int(self.footprint.sum()),
            "bbox": None if b is None else {"rows": list(b[0]), "cols": list(b[1])},
            "extent": list(self.extent),
            "full_width": self.full_width,
            "full_height": self.full_height,
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2) + "\n"

    def heat_mask(self) -> np.ndarray:
        """Footprint as 8-bit image (255 inside, 0 outside), probe pixel marked 128."""
        img = np.where(self.footprint, 255, 0).astype(np.uint8)
        img[self.probe_pixel] = 128
        return img


def probe_receptive_field(net, input_shape, probe_pixel, seed: int = 0,
                          threshold: float = RF_THRESHOLD) -> ReceptiveFieldReport:
    """Empirical receptive field of output pixel ``probe_pixel`` (class 0).

    ``net`` is a :class:`Network` (run in eval mode so batch statistics do
    not couple pixels) or any callable mapping ``[1,C,H,W]`` to
    ``[1,K,H,W]``.  The input is uniform noise drawn from ``seed``; the
    footprint is where ``|d out / d in|`` summed over channels exceeds
    ``threshold``.
    """
    shape = tuple(int(v) for v in input_shape)
    if len(shape) == 4:
        if shape[0] != 1:
            raise ShapeError(f"probe input must have batch size 1, got {shape}")
        shape = shape[1:]
    if len(shape) != 3:
        raise ShapeError(f"input_shape must be (C,H,W), got {input_shape}")
    _, H, W = shape
    i, j = (int(v) for v in probe_pixel)
    if not (0 <= i < H and 0 <= j < W):
        raise ShapeError(f"probe pixel {(i, j)} outside {H}x{W} input")
    rng = np.random.default_rng(seed)
    x = Tensor(rng.uniform(0.0, 1.0, size=(1,) + shape), requires_grad=True)
    fn = (lambda t: net.forward(t, mode="eval")) if isinstance(net, Network) else net
    with GradTape() as tape:
        out = fn(x)
        if out.ndim != 4 or out.shape[2:] != (H, W):
            raise ShapeError(f"probe needs a same-size [1,K,H,W] output, got {out.shape}")
        picked = ops.sum(ops.mul(out, _unit(out.shape, i, j, out.dtype)))
    tape.backward(picked)
    g = np.abs(tape.grad(x)[0]).sum(axis=0)
    return ReceptiveFieldReport((i, j), g > threshold, threshold)


def _unit(shape, i, j, dtype) -> np.ndarray:
    e = np.zeros(shape, dtype=dtype)
    e[0, 0, i, j] = 1
    return e


def conv_stack_rf(n_layers: int, k: int = CONV_KERNEL) -> int:
    """Side of the receptive field of ``n_layers`` stride-1 ``k x k`` convs."""
    return n_layers * (k - 1) + 1


# ---------------------------------------------------------------- accounting


def count_params(obj) -> int:
    """Number of trainable scalars (BN running statistics are not counted)."""
    store = obj.params if isinstance(obj, Network) else obj
    if not isinstance(store, ParamStore):
        raise ContractError(f"count_params needs a Network or ParamStore, got {type(obj).__name__}")
    return int(sum(t.data.size for _, t in store.trainable_items()))


def conv2d_macs(h: int, w: int, c_in: int, c_out: int, k: int) -> int:
    return h * w * c_out * c_in * k * k


def affine_macs(h: int, w: int, c_in: int, c_out: int) -> int:
    return h * w * c_in * c_out


def sweep_macs(h: int, w: int, state_size: int, k: int) -> int:
    """One direction: per step, three state and three input width-k convs."""
    return 6 * h * w * state_size * state_size * k


def sdn_macs(h: int, w: int, in_channels: int, config: SdnLayerConfig) -> int:
    cs = config.state_size
    return (2 * affine_macs(h, w, in_channels, cs)
            + len(config.directions) * sweep_macs(h, w, cs, config.kernel_width))


def count_macs(net, input_shape) -> int:
    """Analytic multiply-accumulates of one forward pass on a single image.

    Counted: convolutions, pointwise affine maps and sweep convolutions.
    Batch norm, activations, pooling, upsampling, bias adds and gate
    arithmetic are free.
    """
    spec: ArchitectureSpec = net.spec if isinstance(net, Network) else net
    shape = tuple(int(v) for v in input_shape)
    H, W = shape[-2:]
    k = CONV_KERNEL
    total = 0
    for b in block_plan(spec):
        h, w = H >> b.scale, W >> b.scale
        cin = b.in_channels
        for _ in range(spec.convs_per_block):
            total += conv2d_macs(h, w, cin, b.out_channels, k)
            cin = b.out_channels
        if spec.residual_blocks and b.in_channels != b.out_channels:
            total += conv2d_macs(h, w, b.in_channels, b.out_channels, 1)
        total += b.sd_layers * sdn_macs(h, w, b.out_channels, spec.sdn_config)
    head_in = block_plan(spec)[-1].out_channels if spec.family == "plain" else spec.width(0)
    total += conv2d_macs(H, W, head_in, spec.out_classes, spec.head_kernel)
    return int(total)
