"""``sdnet`` command-line interface.

Exit codes: 0 success, 2 configuration error, 3 data error, 4 numeric
failure (non-finite loss or a failed gradient check).  Every command parses
and validates all of its inputs before it creates any file.
"""
from __future__ import annotations

import argparse
import csv
import json
import sys
from dataclasses import replace
from pathlib import Path
from typing import Sequence

import numpy as np

from . import analysis, arch, checkpoint, data, kernels, ops, sdn, train
from .config import RunConfig, load_config
from .errors import ConfigError, ContractError, DataError, NumericError, ShapeError
from .tensor import ParamStore, Tensor

EXIT_OK, EXIT_CONFIG, EXIT_DATA, EXIT_NUMERIC = 0, 2, 3, 4
ABLATION_AXES = ("scales", "directions", "channels", "direction_set")
DIRECTION_ORDER = (sdn.Direction.LR, sdn.Direction.UD, sdn.Direction.RL, sdn.Direction.DU)
SEED_STRIDE = 1000
OVERLAY = {"background": 0, "false_positive": 64, "false_negative": 128, "correct": 255}


# ---------------------------------------------------------------- helpers


def _parse_pixel(text: str) -> tuple[int, int]:
    try:
        i, j = (int(v) for v in text.split(","))
    except ValueError:
        raise ConfigError(f"--pixel expects I,J, got {text!r}") from None
    return i, j


def _parse_size(text: str) -> tuple[int, int]:
    try:
        h, w = (int(v) for v in text.split(","))
    except ValueError:
        raise ConfigError(f"--size expects H,W, got {text!r}") from None
    return h, w


def _with_overrides(cfg: RunConfig, seed: int | None, runs: int | None) -> RunConfig:
    t = cfg.train
    if seed is not None:
        t = replace(t, seed=seed)
    if runs is not None:
        t = replace(t, runs=runs)
    return replace(cfg, train=t)


def _write_json(path: Path, obj) -> None:
    path.write_text(json.dumps(obj, indent=2) + "\n")


def _write_history(path: Path, history: Sequence[train.EpochRecord]) -> None:
    with path.open("w", newline="") as f:
        w = csv.writer(f)
        w.writerow(["epoch", "train_loss", "val_dice", "val_jaccard"])
        for h in history:
            w.writerow([h.epoch, repr(h.train_loss), repr(h.val_dice), repr(h.val_jaccard)])


def _prepare_out(path: str | None) -> Path | None:
    if path is None:
        return None
    out = Path(path)
    if out.exists() and not out.is_dir():
        raise ConfigError(f"--out {out} exists and is not a directory")
    return out


def _check_data(cfg: RunConfig) -> None:
    if cfg.data.manifest is not None and not Path(cfg.data.manifest).is_file():
        raise DataError(f"manifest {cfg.data.manifest} not found")


def _load_net(cfg: RunConfig, ckpt: str | None) -> arch.Network:
    net = arch.build(cfg.arch, seed=cfg.train.seed)
    if ckpt is not None:
        state = checkpoint.load(ckpt)
        try:
            net.params.load_state_dict(state)
        except (KeyError, ShapeError) as exc:
            raise ConfigError(f"checkpoint does not match the architecture: {exc}") from None
    return net


def _config_for_checkpoint(args) -> RunConfig:
    if args.config:
        return load_config(args.config)
    if args.checkpoint:
        sibling = Path(args.checkpoint).parent / "config.json"
        if sibling.is_file():
            return load_config(sibling)
    raise ConfigError("need --config (or a checkpoint with a config.json next to it)")


def _save_run(run_dir: Path, cfg: RunConfig, result: train.RunResult) -> None:
    run_dir.mkdir(parents=True, exist_ok=True)
    run_cfg = _with_overrides(cfg, result.seed, 1)
    _write_json(run_dir / "config.json", run_cfg.to_dict())
    _write_history(run_dir / "history.csv", result.history)
    checkpoint.save(run_dir / "best.sdnt", result.state)


# ---------------------------------------------------------------- commands


def cmd_train(args) -> int:
    cfg = _with_overrides(load_config(args.config), args.seed, args.runs)
    _check_data(cfg)
    out = _prepare_out(args.out or "runs/train")
    report, results = train.run_experiment(cfg.arch, cfg.data, cfg.train)
    out.mkdir(parents=True, exist_ok=True)
    _write_json(out / "config.json", cfg.to_dict())
    for i, r in enumerate(results):
        _save_run(out / f"run{i}", cfg, r)
    (out / "metrics.json").write_text(report.to_json())
    (out / "table.txt").write_text(report.to_table(cfg.arch.family))
    sys.stdout.write(report.to_table(cfg.arch.family))
    return EXIT_OK


def _overlay(pred: np.ndarray, gt: np.ndarray) -> np.ndarray:
    p, g = pred > 0, gt > 0
    img = np.zeros(pred.shape, dtype=np.uint8)
    img[p & ~g] = OVERLAY["false_positive"]
    img[~p & g] = OVERLAY["false_negative"]
    img[p & g] = OVERLAY["correct"]
    return img


def cmd_eval(args) -> int:
    cfg = _config_for_checkpoint(args)
    if args.checkpoint is None:
        raise ConfigError("eval needs --checkpoint")
    if args.manifest:
        ds = data.load_manifest(args.manifest, cfg.data.num_classes)
    else:
        data_spec = cfg.data if args.task is None else replace(cfg.data, task=args.task, manifest=None)
        _check_data(replace(cfg, data=data_spec))
        ds = data_spec.load()[2]
    if len(ds) == 0:
        raise DataError("nothing to evaluate")
    net = _load_net(cfg, args.checkpoint)
    out = _prepare_out(args.out)
    preds = train.predict(net, ds.images(), cfg.train.batch_size)
    scores = [train.image_scores(p, s.mask, ds.num_classes) for p, s in zip(preds, ds.samples)]
    report = train.MetricReport([{"seed": cfg.train.seed, "images": len(ds),
                                  "dice": float(np.mean([d for d, _ in scores])),
                                  "jaccard": float(np.mean([j for _, j in scores]))}])
    if out is not None:
        (out / "pred").mkdir(parents=True, exist_ok=True)
        (out / "overlay").mkdir(parents=True, exist_ok=True)
        for i, (p, s) in enumerate(zip(preds, ds.samples)):
            data.save_pgm(out / "pred" / f"{i:05d}.pgm", data.mask_to_pgm(p, ds.num_classes))
            data.save_pgm(out / "overlay" / f"{i:05d}.pgm", _overlay(p, s.mask))
        (out / "metrics.json").write_text(report.to_json())
    sys.stdout.write(report.to_json())
    return EXIT_OK


def cmd_probe_rf(args) -> int:
    cfg = _config_for_checkpoint(args)
    shape = cfg.input_shape()
    i, j = _parse_pixel(args.pixel) if args.pixel else (shape[1] // 2, shape[2] // 2)
    if not (0 <= i < shape[1] and 0 <= j < shape[2]):
        raise ConfigError(f"--pixel {i},{j} outside {shape[1]}x{shape[2]} input")
    out = _prepare_out(args.out)
    net = _load_net(cfg, args.checkpoint)
    rep = analysis.probe_receptive_field(net, shape, (i, j), seed=args.seed or 0)
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
        (out / "receptive_field.json").write_text(rep.to_json())
        data.save_pgm(out / "footprint.pgm", rep.heat_mask())
    sys.stdout.write(rep.to_json())
    return EXIT_OK


def cmd_count(args) -> int:
    cfg = load_config(args.config)
    shape = cfg.input_shape()
    arch.check_input_size(cfg.arch, *shape[1:])
    net = arch.build(cfg.arch, seed=0)
    result = {"params": analysis.count_params(net), "macs": analysis.count_macs(net, shape),
              "input_shape": list(shape)}
    sys.stdout.write(json.dumps(result, indent=2) + "\n")
    return EXIT_OK


def gradcheck_suite(scope: str, seed: int = 0) -> dict[str, analysis.GradCheckReport]:
    """Finite-difference checks for one scope: ``ops``, ``sdn`` or ``network``."""
    rng = np.random.default_rng(seed)
    r = lambda *s: rng.standard_normal(s)  # noqa: E731
    checks = {}
    if scope == "ops":
        w1, w2, w3, w4 = (Tensor(r(*s)) for s in ((2, 3, 4, 4), (2, 3, 5, 5), (2, 3, 6), (2, 3, 3, 3)))
        checks["affine_pointwise"] = (
            lambda x, W, b: ops.sum(ops.mul(ops.affine_pointwise(x, W, b), w1)),
            {"x": r(2, 2, 4, 4), "W": r(2, 3), "b": r(3)})
        checks["conv2d"] = (
            lambda x, K, b: ops.sum(ops.mul(ops.conv2d(x, K, b), w2)),
            {"x": r(2, 2, 5, 5), "K": r(3, 2, 3, 3), "b": r(3)})
        checks["conv1d_axis"] = (
            lambda x, K, b: ops.sum(ops.mul(ops.conv1d_axis(x, K, b), w3)),
            {"x": r(2, 2, 6), "K": r(3, 2, 3), "b": r(3)})
        bn_state = ops.BatchNormState(Tensor(np.zeros(3)), Tensor(np.ones(3)))
        checks["batchnorm"] = (
            lambda x, g, b: ops.sum(ops.mul(ops.batchnorm(x, g, b, bn_state, "train"), w4)),
            {"x": r(2, 3, 3, 3), "g": r(3), "b": r(3)})
        w = r(2, 3, 4)
        checks["activations"] = (
            lambda x: ops.sum(ops.mul(ops.tanh(ops.sigmoid(ops.relu(x))), Tensor(w))),
            {"x": r(2, 3, 4)})
        labels = rng.integers(0, 3, size=(2, 4, 4))
        checks["soft_dice"] = (lambda z: train.soft_dice_loss(z, train.one_hot(labels, 3)), {"z": r(2, 3, 4, 4)})
        checks["cross_entropy"] = (lambda z: train.cross_entropy_loss(z, labels), {"z": r(2, 3, 4, 4)})
    elif scope == "sdn":
        cfg = sdn.SdnLayerConfig(state_size=3, directions=("LR", "UD"), kernel_width=3, residual=True)
        store = ParamStore()
        sdn.init_sdn_params(store, "sd", 2, cfg, rng)
        w = r(2, 2, 4, 5)

        def layer(x, **p):
            ps = sdn.sdn_params_from_store(p, "sd", cfg)
            return ops.sum(ops.mul(sdn.sdn_forward(x, cfg, ps), Tensor(w)))

        checks["sdn_layer"] = (layer, {"x": r(2, 2, 4, 5), **{n: t.data for n, t in store.items()}})
        for d in sdn.Direction:
            wd = r(3, 4, 5)
            checks[f"sweep_{d.value}"] = (
                lambda u, Kz, Kr, Kc, Lz, Lr, Lc, bz, br, bc, d=d, wd=wd: ops.sum(ops.mul(
                    sdn.sweep(u, d, sdn.DirectionParams(Kz, Kr, Kc, Lz, Lr, Lc, bz, br, bc)), Tensor(wd))),
                {"u": r(3, 4, 5), **{n: 0.5 * r(3, 3, 3) for n in ("Kz", "Kr", "Kc", "Lz", "Lr", "Lc")},
                 **{n: r(3) for n in ("bz", "br", "bc")}})
    elif scope == "network":
        spec = arch.ArchitectureSpec(
            family="unet", depth=2, base_width=2, sd_scales=(1,),
            sdn_config=sdn.SdnLayerConfig(state_size=2, directions=("LR", "UD"), residual=True))
        net = arch.build(spec, seed=seed)
        x = rng.uniform(size=(2, 1, 4, 4))
        labels = rng.integers(0, 2, size=(2, 4, 4))

        def loss(**override):
            return train.combined_loss(net.forward(Tensor(x, dtype=np.float64), "train", override), labels)

        checks["network"] = (loss, {n: t.data for n, t in net.params.trainable_items()})
    else:
        raise ConfigError(f"unknown gradcheck scope {scope!r}; expected ops, sdn or network")
    return {name: analysis.grad_check(fn, params, seed=seed) for name, (fn, params) in checks.items()}


def cmd_gradcheck(args) -> int:
    scopes = ("ops", "sdn", "network") if args.scope == "all" else (args.scope,)
    results = {}
    for s in scopes:
        for name, rep in gradcheck_suite(s, args.seed or 0).items():
            results[name] = rep
    ok = all(r.passed for r in results.values())
    summary = {"passed": ok, "backend": kernels.backend(),
               "checks": {k: {"passed": r.passed, "max_rel_error": r.max_rel_error,
                              "checked": r.checked, "skipped": r.skipped} for k, r in results.items()}}
    sys.stdout.write(json.dumps(summary, indent=2) + "\n")
    return EXIT_OK if ok else EXIT_NUMERIC


def ablation_grid(spec: arch.ArchitectureSpec, axis: str, values: Sequence[str]) -> list[tuple[str, arch.ArchitectureSpec]]:
    """Architecture variants for each value of an ablation axis."""
    if axis not in ABLATION_AXES:
        raise ConfigError(f"unknown ablation axis {axis!r}; expected one of {ABLATION_AXES}")
    if not values:
        raise ConfigError("--values must list at least one value")
    cfg = spec.sdn_config
    layers = max(spec.sd_layers_per_block, 1)
    grid = []
    for v in values:
        v = v.strip()
        try:
            if axis == "scales":
                n = int(v)
                if not 0 <= n <= spec.depth:
                    raise ConfigError(f"scales value {n} outside 0..{spec.depth}")
                scales = tuple(range(spec.depth - n, spec.depth))
                variant = replace(spec, sd_scales=scales, sd_layers_per_block=layers if n else 0)
            elif axis == "directions":
                n = int(v)
                if n not in (1, 2, 3, 4):
                    raise ConfigError(f"directions value must be 1..4, got {n}")
                variant = replace(spec, sdn_config=replace(cfg, directions=DIRECTION_ORDER[:n]))
            elif axis == "channels":
                variant = replace(spec, sdn_config=replace(cfg, state_size=int(v)))
            else:
                dirs = tuple(sdn.Direction.parse(d) for d in v.split("+"))
                variant = replace(spec, sdn_config=replace(cfg, directions=dirs))
        except ValueError as exc:
            if isinstance(exc, ConfigError):
                raise
            raise ConfigError(f"bad value {v!r} for axis {axis}") from None
        grid.append((v, variant))
    return grid


def run_ablation(cfg: RunConfig, axis: str, values: Sequence[str]) -> dict[str, train.MetricReport]:
    """One experiment per grid point ``i`` with base seed ``seed + 1000 * i``."""
    reports = {}
    for i, (v, spec) in enumerate(ablation_grid(cfg.arch, axis, values)):
        tc = replace(cfg.train, seed=cfg.train.seed + SEED_STRIDE * i)
        reports[v], _ = train.run_experiment(spec, cfg.data, tc)
    return reports


def cmd_ablate(args) -> int:
    cfg = _with_overrides(load_config(args.config), args.seed, args.runs)
    _check_data(cfg)
    if not args.axis or args.values is None:
        raise ConfigError("ablate needs --axis and --values")
    values = [v for v in args.values.split(",") if v.strip()]
    ablation_grid(cfg.arch, args.axis, values)  # validate before running anything
    out = _prepare_out(args.out or "runs/ablate")
    reports = run_ablation(cfg, args.axis, values)
    out.mkdir(parents=True, exist_ok=True)
    for v, rep in reports.items():
        d = out / f"{args.axis}={v}"
        d.mkdir(exist_ok=True)
        (d / "metrics.json").write_text(rep.to_json())
    labels = {f"{args.axis}={v}": rep for v, rep in reports.items()}
    table = train.format_table(labels)
    (out / "summary.txt").write_text(table)
    _write_json(out / "summary.json", {"axis": args.axis, "values": values,
                                       "dice_mean": [r.dice_mean for r in reports.values()],
                                       "jaccard_mean": [r.jaccard_mean for r in reports.values()]})
    sys.stdout.write(table)
    return EXIT_OK


def cmd_synth(args) -> int:
    if args.n is None or args.n < 1:
        raise ConfigError("synth needs --n >= 1")
    if args.out is None:
        raise ConfigError("synth needs --out")
    h, w = _parse_size(args.size) if args.size else (64, 64)
    ds = data.generate(args.task, args.n, h, w, args.seed or 0)
    manifest = data.write_dataset(ds, _prepare_out(args.out))
    sys.stdout.write(f"{manifest}\n")
    return EXIT_OK


# ---------------------------------------------------------------- entry point


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="sdnet", description="Spatial dependency networks for segmentation.")
    p.add_argument("--backend", choices=("auto", "native", "python"), help="sweep kernel backend")
    sub = p.add_subparsers(dest="command", required=True)

    def add(name, fn, help_):
        sp = sub.add_parser(name, help=help_)
        sp.set_defaults(func=fn)
        return sp

    sp = add("train", cmd_train, "train and evaluate over several seeds")
    sp.add_argument("--config", required=True)
    sp.add_argument("--out")
    sp.add_argument("--seed", type=int)
    sp.add_argument("--runs", type=int)

    sp = add("eval", cmd_eval, "score a checkpoint")
    sp.add_argument("--checkpoint", required=True)
    sp.add_argument("--config")
    sp.add_argument("--manifest")
    sp.add_argument("--task", choices=sorted(data.TASKS))
    sp.add_argument("--out")

    sp = add("probe-rf", cmd_probe_rf, "empirical receptive field of one output pixel")
    sp.add_argument("--config")
    sp.add_argument("--checkpoint")
    sp.add_argument("--pixel")
    sp.add_argument("--seed", type=int)
    sp.add_argument("--out")

    sp = add("count", cmd_count, "parameter and MAC counts")
    sp.add_argument("--config", required=True)

    sp = add("gradcheck", cmd_gradcheck, "finite-difference gradient checks")
    sp.add_argument("--scope", choices=("ops", "sdn", "network", "all"), default="all")
    sp.add_argument("--seed", type=int)

    sp = add("ablate", cmd_ablate, "scan one hyperparameter axis")
    sp.add_argument("--config", required=True)
    sp.add_argument("--axis", choices=ABLATION_AXES, required=True)
    sp.add_argument("--values", required=True)
    sp.add_argument("--out")
    sp.add_argument("--seed", type=int)
    sp.add_argument("--runs", type=int)

    sp = add("synth", cmd_synth, "write a synthetic dataset as PGM files plus a manifest")
    sp.add_argument("--task", choices=sorted(data.TASKS), default="stripe")
    sp.add_argument("--n", type=int, default=100)
    sp.add_argument("--size", help="H,W (default 64,64)")
    sp.add_argument("--out", required=True)
    sp.add_argument("--seed", type=int)
    return p


def main(argv: Sequence[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        if args.backend:
            kernels.set_backend(args.backend)
        return args.func(args)
    except ConfigError as exc:
        print(f"sdnet: config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except DataError as exc:
        print(f"sdnet: data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except NumericError as exc:
        print(f"sdnet: numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (ShapeError, ContractError) as exc:
        print(f"sdnet: invalid input: {exc}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
