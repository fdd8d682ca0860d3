"""U-Net, U-Net++ and their spatially dependent variants (SDU-Net, SDNU-Net).

A network is described declaratively by an :class:`ArchitectureSpec` and
materialised by :func:`build`.  Every block is ``convs_per_block`` times
``conv3x3 -> [BN] -> ReLU``; blocks at a scale listed in ``sd_scales`` are
followed by ``sd_layers_per_block`` SD layers.

U-Net blocks are named ``enc{i}`` / ``dec{i}`` (the bottleneck is
``enc{D-1}``); U-Net++ nodes are named ``x{i}_{j}`` for scale ``i`` and
nesting column ``j``.  The ``plain`` family is a single full-resolution
block (``body``) with no pooling, used as a conv-only control and for
layer-level accounting.
"""
from __future__ import annotations

from dataclasses import dataclass, field, replace
from typing import Mapping

import numpy as np

from . import ops
from .errors import ConfigError, ShapeError
from .sdn import Direction, SdnLayerConfig, init_sdn_params, sdn_forward, sdn_params_from_store
from .tensor import ParamStore, Tensor

CONV_KERNEL = 3
FAMILIES = ("unet", "unetpp", "plain")


@dataclass(frozen=True)
class ArchitectureSpec:
    family: str = "unet"
    depth: int = 4
    base_width: int = 32
    width_multiplier: int = 2
    convs_per_block: int = 2
    sd_scales: tuple[int, ...] = ()
    sd_layers_per_block: int = 1
    sdn_config: SdnLayerConfig = field(default_factory=SdnLayerConfig)
    in_channels: int = 1
    out_classes: int = 2
    batchnorm: bool = True
    residual_blocks: bool = False
    input_size: tuple[int, int] | None = None
    head_kernel: int = 1

    def __post_init__(self):
        if self.family not in FAMILIES:
            raise ConfigError(f"family must be one of {FAMILIES}, got {self.family!r}")
        if self.family == "plain":
            if self.depth != 1:
                raise ConfigError(f"plain family has a single scale; depth must be 1, got {self.depth}")
        elif self.depth < 2:
            raise ConfigError(f"depth must be >= 2, got {self.depth}")
        for name in ("base_width", "width_multiplier", "in_channels", "out_classes"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be >= 1, got {getattr(self, name)}")
        if self.convs_per_block < (0 if self.family == "plain" else 1):
            raise ConfigError(f"convs_per_block too small: {self.convs_per_block}")
        if self.head_kernel < 1 or self.head_kernel % 2 == 0:
            raise ConfigError(f"head_kernel must be a positive odd integer, got {self.head_kernel}")
        if self.sd_layers_per_block < 0:
            raise ConfigError("sd_layers_per_block must be >= 0")
        scales = tuple(sorted(set(int(s) for s in self.sd_scales)))
        bad = [s for s in scales if not 0 <= s < self.depth]
        if bad:
            raise ConfigError(f"sd_scales {bad} outside 0..{self.depth - 1}")
        object.__setattr__(self, "sd_scales", scales)
        if isinstance(self.sdn_config, dict):
            object.__setattr__(self, "sdn_config", SdnLayerConfig(**self.sdn_config))
        if self.input_size is not None:
            object.__setattr__(self, "input_size", tuple(int(v) for v in self.input_size))
            check_input_size(self, *self.input_size)

    def width(self, scale: int) -> int:
        return int(self.base_width * self.width_multiplier ** scale)

    @property
    def has_sd(self) -> bool:
        return bool(self.sd_scales) and self.sd_layers_per_block > 0

    def to_dict(self) -> dict:
        return {
            "family": self.family,
            "depth": self.depth,
            "base_width": self.base_width,
            "width_multiplier": self.width_multiplier,
            "convs_per_block": self.convs_per_block,
            "sd_scales": list(self.sd_scales),
            "sd_layers_per_block": self.sd_layers_per_block,
            "sdn_config": self.sdn_config.to_dict(),
            "in_channels": self.in_channels,
            "out_classes": self.out_classes,
            "batchnorm": self.batchnorm,
            "residual_blocks": self.residual_blocks,
            "input_size": list(self.input_size) if self.input_size else None,
            "head_kernel": self.head_kernel,
        }

    @classmethod
    def from_dict(cls, d: Mapping) -> "ArchitectureSpec":
        d = dict(d)
        unknown = set(d) - set(cls.__dataclass_fields__)
        if unknown:
            raise ConfigError(f"unknown architecture keys: {sorted(unknown)}")
        if "sdn_config" in d and isinstance(d["sdn_config"], Mapping):
            sub = dict(d["sdn_config"])
            unknown = set(sub) - set(SdnLayerConfig.__dataclass_fields__)
            if unknown:
                raise ConfigError(f"unknown sdn_config keys: {sorted(unknown)}")
            if "directions" in sub:
                sub["directions"] = tuple(sub["directions"])
            d["sdn_config"] = SdnLayerConfig(**sub)
        if "sd_scales" in d:
            d["sd_scales"] = tuple(d["sd_scales"])
        if d.get("input_size") is not None:
            d["input_size"] = tuple(d["input_size"])
        try:
            return cls(**d)
        except TypeError as exc:
            raise ConfigError(str(exc)) from None


def check_input_size(spec: ArchitectureSpec, h: int, w: int) -> None:
    f = 2 ** (spec.depth - 1)
    if h % f or w % f:
        raise ConfigError(f"input {h}x{w} not divisible by 2^(depth-1) = {f}")


@dataclass(frozen=True)
class Block:
    name: str
    scale: int
    in_channels: int
    out_channels: int
    sd_layers: int


def block_plan(spec: ArchitectureSpec) -> list[Block]:
    """Blocks in execution order with their channel counts."""
    D, w = spec.depth, spec.width
    sd = lambda i: spec.sd_layers_per_block if i in spec.sd_scales else 0  # noqa: E731
    blocks = []
    if spec.family == "plain":
        out = w(0) if spec.convs_per_block else spec.in_channels
        blocks.append(Block("body", 0, spec.in_channels, out, sd(0)))
    elif spec.family == "unet":
        for i in range(D):
            cin = spec.in_channels if i == 0 else w(i - 1)
            blocks.append(Block(f"enc{i}", i, cin, w(i), sd(i)))
        for i in range(D - 2, -1, -1):
            blocks.append(Block(f"dec{i}", i, w(i) + w(i + 1), w(i), sd(i)))
    else:
        for i in range(D):
            cin = spec.in_channels if i == 0 else w(i - 1)
            blocks.append(Block(f"x{i}_0", i, cin, w(i), sd(i)))
        # Column-major order: every input of x{i}_{j} exists before it runs.
        for j in range(1, D):
            for i in range(D - j - 1, -1, -1):
                blocks.append(Block(f"x{i}_{j}", i, j * w(i) + w(i + 1), w(i), sd(i)))
    return blocks


class Network:
    """A built network: spec, parameters and the block plan."""

    def __init__(self, spec: ArchitectureSpec, params: ParamStore, blocks: list[Block]):
        self.spec = spec
        self.params = params
        self.blocks = blocks
        self._by_name = {b.name: b for b in blocks}

    def num_sd_layers(self) -> int:
        return sum(b.sd_layers for b in self.blocks)

    def forward(self, x, mode: str = "train", params: Mapping[str, Tensor] | None = None) -> Tensor:
        """Logits ``[N, out_classes, H, W]`` for input ``[N, in_channels, H, W]``.

        ``params`` optionally overrides stored tensors by name (used by the
        gradient checker to run the network in float64).
        """
        if mode not in ("train", "eval"):
            raise ConfigError(f"mode must be 'train' or 'eval', got {mode!r}")
        x = x if isinstance(x, Tensor) else Tensor(x)
        if x.ndim != 4 or x.shape[1] != self.spec.in_channels:
            raise ShapeError(f"expected input [N,{self.spec.in_channels},H,W], got {x.shape}")
        check_input_size(self.spec, *x.shape[2:])
        get = _getter(self.params, params)
        D = self.spec.depth
        run = lambda name, inp: self._block(self._by_name[name], inp, mode, get)  # noqa: E731

        if self.spec.family == "plain":
            h = run("body", x)
        elif self.spec.family == "unet":
            skips = []
            h = x
            for i in range(D):
                h = run(f"enc{i}", h if i == 0 else ops.maxpool2(h))
                skips.append(h)
            for i in range(D - 2, -1, -1):
                h = run(f"dec{i}", ops.concat_channels([skips[i], ops.upsample_nearest2(h)]))
        else:
            nodes: dict[tuple[int, int], Tensor] = {}
            for i in range(D):
                nodes[i, 0] = run(f"x{i}_0", x if i == 0 else ops.maxpool2(nodes[i - 1, 0]))
            for j in range(1, D):
                for i in range(D - j - 1, -1, -1):
                    inp = [nodes[i, m] for m in range(j)] + [ops.upsample_nearest2(nodes[i + 1, j - 1])]
                    nodes[i, j] = run(f"x{i}_{j}", ops.concat_channels(inp))
            h = nodes[0, D - 1]
        return ops.conv2d(h, get("head.weight"), get("head.bias"))

    __call__ = forward

    def _block(self, block: Block, x: Tensor, mode: str, get) -> Tensor:
        spec = self.spec
        h = x
        for c in range(spec.convs_per_block):
            p = f"{block.name}.conv{c}"
            h = ops.conv2d(h, get(f"{p}.weight"), get(f"{p}.bias"))
            if spec.batchnorm:
                b = f"{block.name}.bn{c}"
                state = ops.BatchNormState(self.params[f"{b}.running_mean"], self.params[f"{b}.running_var"])
                h = ops.batchnorm(h, get(f"{b}.gamma"), get(f"{b}.beta"), state, mode)
            h = ops.relu(h)
        if spec.residual_blocks:
            if block.in_channels == block.out_channels:
                h = ops.add(h, x)
            else:
                h = ops.add(h, ops.conv2d(x, get(f"{block.name}.proj.weight"), get(f"{block.name}.proj.bias")))
        for s in range(block.sd_layers):
            prefix = f"{block.name}.sdn{s}"
            p = sdn_params_from_store(_Lookup(get), prefix, spec.sdn_config)
            h = sdn_forward(h, spec.sdn_config, p)
        return h


class _Lookup:
    def __init__(self, get):
        self._get = get

    def __getitem__(self, name: str) -> Tensor:
        return self._get(name)


def _getter(store: ParamStore, override: Mapping[str, Tensor] | None):
    if not override:
        return store.__getitem__

    def get(name: str) -> Tensor:
        t = override.get(name)
        return store[name] if t is None else t

    return get


def _he_uniform(rng, shape, fan_in):
    s = np.sqrt(6.0 / fan_in)
    return rng.uniform(-s, s, size=shape).astype(np.float32)


def build(spec: ArchitectureSpec, seed: int = 0) -> Network:
    """Allocate and initialise all parameters for ``spec``."""
    if spec.input_size is not None:
        check_input_size(spec, *spec.input_size)
    rng = np.random.default_rng(seed)
    store = ParamStore()
    blocks = block_plan(spec)
    k = CONV_KERNEL
    for b in blocks:
        cin = b.in_channels
        for c in range(spec.convs_per_block):
            p = f"{b.name}.conv{c}"
            store.add(f"{p}.weight", _he_uniform(rng, (b.out_channels, cin, k, k), cin * k * k))
            store.add(f"{p}.bias", np.zeros(b.out_channels, dtype=np.float32))
            if spec.batchnorm:
                bn = f"{b.name}.bn{c}"
                store.add(f"{bn}.gamma", np.ones(b.out_channels, dtype=np.float32))
                store.add(f"{bn}.beta", np.zeros(b.out_channels, dtype=np.float32))
                store.add(f"{bn}.running_mean", np.zeros(b.out_channels, dtype=np.float32), trainable=False)
                store.add(f"{bn}.running_var", np.ones(b.out_channels, dtype=np.float32), trainable=False)
            cin = b.out_channels
        if spec.residual_blocks and b.in_channels != b.out_channels:
            store.add(f"{b.name}.proj.weight",
                      _he_uniform(rng, (b.out_channels, b.in_channels, 1, 1), b.in_channels))
            store.add(f"{b.name}.proj.bias", np.zeros(b.out_channels, dtype=np.float32))
        for s in range(b.sd_layers):
            init_sdn_params(store, f"{b.name}.sdn{s}", b.out_channels, spec.sdn_config, rng)
    w0 = blocks[-1].out_channels if spec.family == "plain" else spec.width(0)
    hk = spec.head_kernel
    s = 1.0 / np.sqrt(w0 * hk * hk)
    store.add("head.weight", rng.uniform(-s, s, size=(spec.out_classes, w0, hk, hk)).astype(np.float32))
    store.add("head.bias", np.zeros(spec.out_classes, dtype=np.float32))
    return Network(spec, store, blocks)


def forward(net: Network, x, mode: str = "train") -> Tensor:
    return net.forward(x, mode)


# ---------------------------------------------------------------- presets

# Per-task settings of the published SDU-Net/SDNU-Net configurations.
TASKS = {
    "nuclei": {"learning_rate": 1e-3, "residual": False, "sd_layers": 2, "batch_size": 20,
               "input_size": (96, 96), "base_width": 16},
    "polyps": {"learning_rate": 1e-4, "residual": True, "sd_layers": 1, "batch_size": 20,
               "input_size": (144, 192), "base_width": 32},
    "liver": {"learning_rate": 1e-4, "residual": True, "sd_layers": 1, "batch_size": 16,
              "input_size": (128, 128), "base_width": 32},
}
PRESETS = ("unet", "unetpp", "sdu_net", "sdnu_net")


def presets(name: str, task: str = "polyps", depth: int = 4) -> ArchitectureSpec:
    """Full-scale architecture for ``name`` on one of the three published tasks.

    SD variants get 150 state channels, kernel width 3, sweeps [LR, UD] and
    SD layers on the two deepest scales.  Channel widths are not published;
    ``base_width`` is a local choice.
    """
    if name not in PRESETS:
        raise ConfigError(f"unknown preset {name!r}; expected one of {PRESETS}")
    if task not in TASKS:
        raise ConfigError(f"unknown task {task!r}; expected one of {sorted(TASKS)}")
    t = TASKS[task]
    sd = name in ("sdu_net", "sdnu_net")
    return ArchitectureSpec(
        family="unetpp" if name in ("unetpp", "sdnu_net") else "unet",
        depth=depth,
        base_width=t["base_width"],
        convs_per_block=2,
        sd_scales=(depth - 2, depth - 1) if sd else (),
        sd_layers_per_block=t["sd_layers"] if sd else 0,
        sdn_config=SdnLayerConfig(
            state_size=150,
            directions=(Direction.LR, Direction.UD),
            kernel_width=3,
            residual=t["residual"],
        ),
        in_channels=1 if task == "liver" else 3,
        out_classes=2,
        batchnorm=True,
        input_size=t["input_size"],
    )


def with_sd(spec: ArchitectureSpec, scales, layers: int = 1, config: SdnLayerConfig | None = None) -> ArchitectureSpec:
    """Copy of ``spec`` with SD layers at ``scales``."""
    return replace(spec, sd_scales=tuple(scales), sd_layers_per_block=layers,
                   sdn_config=config or spec.sdn_config)
