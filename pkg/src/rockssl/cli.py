"""Command-line entry point: ``rockssl <command> [flags]``.

Every command writes ``run_config.json`` (the fully resolved flags) and
``metrics.jsonl`` into ``--out-dir``. Passing ``--config run_config.json``
replays a run; flags given explicitly on the command line win over the file.

Exit codes: 0 success, 1 failed check / diverged run / bad data, 2 usage error.
All randomness derives from ``--seed``: it seeds model initialization and
training order directly, and sampling/masking/splitting through tagged
sub-streams of the same seed.
"""
from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

import numpy as np

from . import voxel
from .checkpoint import load_checkpoint, save_checkpoint
from .errors import (
    CorruptCheckpoint,
    FileSizeMismatch,
    NonFiniteLoss,
    RockSSLError,
)
from .model import ArchConfig, build_model, model_grad_check
from .sampler import MaskSpec, build_ssl_dataset, build_supervised_dataset
from .training import (
    Metrics,
    SearchSpace,
    TrainConfig,
    compare_initializations,
    evaluate_ssl,
    evaluate_supervised,
    finetune,
    pretrain,
    random_search,
)

log = logging.getLogger("rockssl")


class UsageError(Exception):
    pass


# argument parsing

def _common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out-dir", default=".")
    p.add_argument("--config", default=None, help="JSON file of flag values (e.g. a run_config.json)")
    p.add_argument("--metrics", default=None, help="extra copy of metrics.jsonl")


def _train_flags(p: argparse.ArgumentParser, lr: float, epochs: int = 30) -> None:
    p.add_argument("--arch", default="default", help="'default' or an ArchConfig JSON file")
    p.add_argument("--lr", type=float, default=lr)
    p.add_argument("--batch-size", type=int, default=128)
    p.add_argument("--epochs", type=int, default=epochs)
    p.add_argument("--optimizer", choices=["adam", "sgd"], default="adam")
    p.add_argument("--record-time", action="store_true", help="keep wall_time in metrics.jsonl")


def _mask_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--mask-rate", type=float, default=0.2)
    p.add_argument("--mask-mode", choices=["voxel", "patch"], default="voxel")
    p.add_argument("--mask-value", type=float, default=0.5)
    p.add_argument("--loss-scope", choices=["masked_only", "all"], default="masked_only")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="rockssl", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", metavar="command")

    p = sub.add_parser("synth", help="generate a labelled synthetic volume")
    p.add_argument("--dims", type=int, nargs="+", default=[32])
    p.add_argument("--porosity", type=float, default=0.25)
    p.add_argument("--corr-len", type=float, default=2.0)
    p.add_argument("--kozeny", type=float, default=5.0)
    p.add_argument("--out", default="volume", help="output prefix; writes PREFIX.raw and PREFIX.json")
    _common(p)

    p = sub.add_parser("ingest", help="validate a raw volume and its sidecar")
    p.add_argument("--raw", default=None)
    p.add_argument("--dims", type=int, nargs="+", default=None)
    p.add_argument("--encoding", choices=["u8_binary", "u8_grayscale"], default=None)
    p.add_argument("--invert", action="store_true")
    _common(p)

    p = sub.add_parser("pretrain", help="masked self-supervised pretraining")
    p.add_argument("--volumes", nargs="+", default=[])
    p.add_argument("--per-volume", type=int, default=1000)
    p.add_argument("--split", default="0.5")
    p.add_argument("--invert", action="store_true")
    p.add_argument("--out-ckpt", default=None)
    _mask_flags(p)
    _train_flags(p, lr=1e-3)
    _common(p)

    p = sub.add_parser("finetune", help="supervised porosity/permeability regression")
    p.add_argument("--cores", nargs="+", default=[])
    p.add_argument("--per-core", type=int, default=1000)
    p.add_argument("--split", default="first:6")
    p.add_argument("--init", default="random", help="'random' or 'ckpt:PATH'")
    p.add_argument("--invert", action="store_true")
    p.add_argument("--out-ckpt", default=None)
    _train_flags(p, lr=1e-5)
    _common(p)

    p = sub.add_parser("eval", help="metrics of a checkpoint on labelled cores")
    p.add_argument("--ckpt", default=None)
    p.add_argument("--cores", nargs="+", default=[])
    p.add_argument("--per-core", type=int, default=1000)
    p.add_argument("--split", default="first:6")
    p.add_argument("--invert", action="store_true")
    p.add_argument("--mask-rate", type=float, default=0.2)
    p.add_argument("--mask-mode", choices=["voxel", "patch"], default="voxel")
    p.add_argument("--mask-value", type=float, default=0.5)
    _common(p)

    p = sub.add_parser("compare", help="random vs pretrained initialization, one row each")
    p.add_argument("--ckpt", default=None, help="pretrained SSL checkpoint")
    p.add_argument("--cores", nargs="+", default=[])
    p.add_argument("--per-core", type=int, default=1000)
    p.add_argument("--split", default="first:6")
    p.add_argument("--invert", action="store_true")
    p.add_argument("--out", default=None, help="table JSON (default OUT_DIR/comparison.json)")
    _train_flags(p, lr=1e-5)
    _common(p)

    p = sub.add_parser("gradcheck", help="finite-difference check of the full model")
    p.add_argument("--arch", default="default")
    p.add_argument("--tol", type=float, default=1e-4)
    p.add_argument("--inputs", type=int, default=10)
    p.add_argument("--coords", type=int, default=200)
    p.add_argument("--eps", type=float, default=1e-5)
    p.add_argument("--heads", nargs="+", choices=["ssl_restore", "regress2"],
                   default=["ssl_restore", "regress2"])
    _common(p)

    p = sub.add_parser("search", help="random hyperparameter search with k-fold CV")
    p.add_argument("--budget", type=int, default=10)
    p.add_argument("--space", default=None, help="SearchSpace JSON file")
    p.add_argument("--cv", type=int, default=5, help="folds; 1 means a single 80/20 holdout")
    p.add_argument("--volumes", nargs="+", default=[])
    p.add_argument("--per-volume", type=int, default=200)
    p.add_argument("--synth-dims", type=int, default=32,
                   help="edge of the synthetic volume used when no --volumes are given")
    p.add_argument("--invert", action="store_true")
    p.add_argument("--exhaustive", action="store_true", help="walk the grid instead of sampling")
    p.add_argument("--workers", type=int, default=1)
    p.add_argument("--dry-run", action="store_true", help="sample configurations without training")
    p.add_argument("--out", default=None, help="trial log (default OUT_DIR/trials.json)")
    _mask_flags(p)
    _train_flags(p, lr=1e-3, epochs=3)
    _common(p)
    return parser


_NOT_REPLAYED = {"config", "command", "verbose"}


def parse(argv) -> argparse.Namespace:
    parser = build_parser()
    args = parser.parse_args(argv)
    if args.command is None:
        parser.print_usage(sys.stderr)
        raise SystemExit(2)
    if args.config:
        try:
            loaded = json.loads(Path(args.config).read_text())
        except (OSError, ValueError) as exc:
            parser.error(f"--config: cannot read {args.config}: {exc}")
        flags = loaded.get("args", loaded)
        if loaded.get("command", args.command) != args.command:
            parser.error(f"--config was written by '{loaded['command']}', not '{args.command}'")
        subparser = parser._subparsers._group_actions[0].choices[args.command]
        known = {a.dest for a in subparser._actions}
        unknown = set(flags) - known
        if unknown:
            parser.error(f"--config has unknown keys: {sorted(unknown)}")
        subparser.set_defaults(**{k: v for k, v in flags.items() if k not in _NOT_REPLAYED})
        args = parser.parse_args(argv)
    return args


# helpers

def _arch(value) -> ArchConfig:
    if isinstance(value, dict):
        return ArchConfig.from_dict(value)
    if value in (None, "default"):
        return ArchConfig()
    try:
        return ArchConfig.from_dict(json.loads(Path(value).read_text()))
    except (OSError, ValueError, TypeError) as exc:
        raise UsageError(f"--arch: cannot load {value}: {exc}") from exc


def _train_config(args, loss_scope="masked_only") -> TrainConfig:
    return TrainConfig(lr=args.lr, batch_size=args.batch_size, epochs=args.epochs,
                       optimizer=args.optimizer, seed=args.seed, loss_scope=loss_scope)


def _split(value):
    try:
        return float(value)
    except (TypeError, ValueError):
        return value


def _load_all(paths, invert: bool, need_labels: bool = False):
    if not paths:
        raise UsageError("no input volumes given")
    records = [voxel.load_volume(p, invert=invert) for p in paths]
    if need_labels:
        missing = [str(p) for p, r in zip(paths, records) if r.labels is None]
        if missing:
            raise UsageError(f"no labels in sidecar for: {', '.join(missing)}")
    return records


def _write_outputs(args, out_dir: Path, metrics: Metrics, extra_config: dict | None = None,
                   with_time: bool = False) -> None:
    out_dir.mkdir(parents=True, exist_ok=True)
    cfg = {k: v for k, v in vars(args).items() if k not in _NOT_REPLAYED}
    if extra_config:
        cfg.update(extra_config)
    run_config = {"command": args.command, "args": cfg}
    (out_dir / "run_config.json").write_text(json.dumps(run_config, indent=2, sort_keys=True) + "\n")
    text = metrics.to_jsonl(with_time=with_time)
    (out_dir / "metrics.jsonl").write_text(text)
    if args.metrics:
        Path(args.metrics).parent.mkdir(parents=True, exist_ok=True)
        Path(args.metrics).write_text(text)


def _rel(path: Path, out: Path) -> str:
    """Paths inside the output directory are logged relative to it, so reruns
    into different directories produce identical metrics."""
    try:
        return str(path.resolve().relative_to(out.resolve()))
    except ValueError:
        return str(path)


def _print(obj) -> None:
    print(json.dumps(obj, indent=2, sort_keys=True))


# commands

def cmd_synth(args, out: Path) -> int:
    spec = voxel.SynthSpec(dims=voxel._as_dims(args.dims), correlation_length=args.corr_len,
                           target_porosity=args.porosity, seed=args.seed,
                           kozeny_constant=args.kozeny)
    volume, labels = voxel.generate_synthetic(spec)
    prefix = Path(args.out)
    raw, side = voxel.save_volume(prefix, volume, labels, spec)
    summary = {"raw": str(raw), "sidecar": str(side), "dims": list(volume.dims),
               "porosity": labels.porosity, "permeability_mD": labels.permeability,
               "specific_surface": voxel.specific_surface(volume)}
    _write_outputs(args, out, Metrics(summary=summary))
    _print(summary)
    return 0


def cmd_ingest(args, out: Path) -> int:
    if not args.raw:
        raise UsageError("ingest needs --raw")
    rec = voxel.load_volume(args.raw, dims=args.dims, encoding=args.encoding, invert=args.invert)
    vol = rec.volume
    summary = {"raw": str(args.raw), "dims": list(vol.dims), "kind": vol.kind,
               "mean_value": float(vol.data.mean()), "checks": {}}
    ok = True
    if vol.kind == "binary":
        summary["porosity"] = voxel.porosity(vol)
        summary["specific_surface"] = voxel.specific_surface(vol)
    if "dims" in rec.meta:
        good = list(rec.meta["dims"]) == list(vol.dims)
        summary["checks"]["sidecar_dims"] = good
        ok &= good
    if rec.labels is not None and vol.kind == "binary":
        good = abs(rec.labels.porosity - summary["porosity"]) <= 1e-9
        summary["checks"]["sidecar_porosity"] = good
        summary["labels"] = {"porosity": rec.labels.porosity,
                             "permeability_mD": rec.labels.permeability}
        ok &= good
    summary["ok"] = bool(ok)
    _write_outputs(args, out, Metrics(summary=summary))
    _print(summary)
    return 0 if ok else 1


def cmd_pretrain(args, out: Path) -> int:
    arch = _arch(args.arch)
    records = _load_all(args.volumes, args.invert)
    spec = MaskSpec(args.mask_rate, args.mask_mode, args.mask_value, args.seed)
    train, test = build_ssl_dataset([r.volume for r in records], args.per_volume, spec,
                                    _split(args.split), args.seed, edge=arch.edge)
    config = _train_config(args, args.loss_scope)
    model = build_model(arch, args.seed)
    try:
        model, metrics = pretrain(model, train, test, config)
    except NonFiniteLoss as exc:
        _write_outputs(args, out, exc.metrics or Metrics(), {"arch": arch.to_dict()})
        log.error("training diverged in epoch %d", exc.epoch)
        return 1
    ckpt = Path(args.out_ckpt) if args.out_ckpt else out / "pretrained.geoc"
    ckpt.parent.mkdir(parents=True, exist_ok=True)
    save_checkpoint(model, ckpt)
    metrics.summary["checkpoint"] = _rel(ckpt, out)
    _write_outputs(args, out, metrics, {"arch": arch.to_dict()}, args.record_time)
    _print(metrics.summary)
    return 0


def _init_arg(value):
    if value == "random":
        return "random"
    if isinstance(value, str) and value.startswith("ckpt:"):
        return load_checkpoint(value[len("ckpt:"):])
    raise UsageError(f"--init must be 'random' or 'ckpt:PATH', got {value!r}")


def _supervised_data(args, edge: int):
    records = _load_all(args.cores, args.invert, need_labels=True)
    return build_supervised_dataset([(r.volume, r.labels) for r in records], args.per_core,
                                    _split(args.split), args.seed, edge=edge)


def cmd_finetune(args, out: Path) -> int:
    init = _init_arg(args.init)
    arch = init.config if not isinstance(init, str) else _arch(args.arch)
    train, test = _supervised_data(args, arch.edge)
    config = _train_config(args)
    try:
        model, metrics = finetune(train, test, config, init=init, arch=arch)
    except NonFiniteLoss as exc:
        _write_outputs(args, out, exc.metrics or Metrics(), {"arch": arch.to_dict()})
        log.error("training diverged in epoch %d", exc.epoch)
        return 1
    ckpt = Path(args.out_ckpt) if args.out_ckpt else out / "finetuned.geoc"
    ckpt.parent.mkdir(parents=True, exist_ok=True)
    save_checkpoint(model, ckpt)
    metrics.summary["checkpoint"] = _rel(ckpt, out)
    _write_outputs(args, out, metrics, {"arch": arch.to_dict()}, args.record_time)
    _print(metrics.summary)
    return 0


def cmd_eval(args, out: Path) -> int:
    if not args.ckpt:
        raise UsageError("eval needs --ckpt")
    model = load_checkpoint(args.ckpt)
    summary = {}
    if model.config.head == "regress2":
        train, test = _supervised_data(args, model.config.edge)
        evaluate = evaluate_supervised
    else:
        records = _load_all(args.cores, args.invert)
        spec = MaskSpec(args.mask_rate, args.mask_mode, args.mask_value, args.seed)
        train, test = build_ssl_dataset([r.volume for r in records], args.per_core, spec,
                                        _split(args.split), args.seed, edge=model.config.edge)
        evaluate = evaluate_ssl
    for name, data in (("train", train), ("test", test)):
        if len(data):
            for k, v in evaluate(model, data).items():
                summary[f"{name}_{k}"] = v
    _write_outputs(args, out, Metrics(summary=summary))
    _print(summary)
    return 0


def cmd_compare(args, out: Path) -> int:
    if not args.ckpt:
        raise UsageError("compare needs --ckpt (a pretrained SSL checkpoint)")
    pretrained = load_checkpoint(args.ckpt)
    train, test = _supervised_data(args, pretrained.config.edge)
    try:
        rows = compare_initializations(train, test, pretrained, _train_config(args))
    except NonFiniteLoss as exc:
        log.error("training diverged in epoch %d", exc.epoch)
        return 1
    path = Path(args.out) if args.out else out / "comparison.json"
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(rows, indent=2, sort_keys=True) + "\n")
    metrics = Metrics(records=[{"epoch": args.epochs, "split": "table", **r} for r in rows],
                      summary={"table": _rel(path, out)})
    _write_outputs(args, out, metrics)
    _print(rows)
    return 0


def cmd_gradcheck(args, out: Path) -> int:
    arch = _arch(args.arch)
    summary = {"tol": args.tol}
    worst = 0.0
    for head in args.heads:
        cfg = ArchConfig.from_dict({**arch.to_dict(), "head": head})
        err = model_grad_check(cfg, seed=args.seed, n_inputs=args.inputs, fd_epsilon=args.eps,
                               coords_per_tensor=args.coords)
        summary[head] = err
        worst = max(worst, err)
        print(f"{head}: max relative error {err:.3e}")
    summary["max_rel_error"] = worst
    summary["passed"] = worst <= args.tol
    _write_outputs(args, out, Metrics(summary=summary))
    print(f"max relative error {worst:.3e} (tol {args.tol:g}): {'PASS' if summary['passed'] else 'FAIL'}")
    return 0 if summary["passed"] else 1


def cmd_search(args, out: Path) -> int:
    space = SearchSpace()
    if args.space:
        try:
            space = SearchSpace.from_dict(json.loads(Path(args.space).read_text()))
        except (OSError, ValueError, TypeError) as exc:
            raise UsageError(f"--space: cannot load {args.space}: {exc}") from exc
    arch = _arch(args.arch)
    if args.volumes:
        volumes = [r.volume for r in _load_all(args.volumes, args.invert)]
    else:
        spec = voxel.SynthSpec(dims=(args.synth_dims,) * 3, seed=args.seed)
        volumes = [voxel.generate_synthetic(spec)[0]]
    mask = MaskSpec(args.mask_rate, args.mask_mode, args.mask_value, args.seed)
    data, _ = build_ssl_dataset(volumes, args.per_volume, mask, split=1.0, seed=args.seed,
                                edge=arch.edge)
    trials = random_search(space, args.budget, data, arch, _train_config(args, args.loss_scope),
                           seed=args.seed, cv=args.cv, exhaustive=args.exhaustive,
                           workers=args.workers, dry_run=args.dry_run)
    path = Path(args.out) if args.out else out / "trials.json"
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(trials, indent=2, sort_keys=True) + "\n")
    best = trials[0]
    metrics = Metrics(records=[{"epoch": args.epochs, "split": "trial", "trial": t["trial"],
                                "mean_rmse": t["mean_rmse"], "status": t["status"]} for t in trials],
                      summary={"best_trial": best["trial"], "best_mean_rmse": best["mean_rmse"],
                               "trials": _rel(path, out), "space": space.to_dict()})
    _write_outputs(args, out, metrics, {"arch": arch.to_dict()})
    _print(metrics.summary)
    return 0


COMMANDS = {
    "synth": cmd_synth,
    "ingest": cmd_ingest,
    "pretrain": cmd_pretrain,
    "finetune": cmd_finetune,
    "eval": cmd_eval,
    "compare": cmd_compare,
    "gradcheck": cmd_gradcheck,
    "search": cmd_search,
}


def run(argv=None) -> int:
    try:
        args = parse(argv)
    except SystemExit as exc:  # argparse usage errors
        return int(exc.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    out = Path(args.out_dir)
    try:
        return COMMANDS[args.command](args, out)
    except UsageError as exc:
        print(f"rockssl {args.command}: {exc}", file=sys.stderr)
        build_parser().print_usage(sys.stderr)
        return 2
    except (OSError, FileSizeMismatch, CorruptCheckpoint) as exc:
        print(f"rockssl {args.command}: {exc}", file=sys.stderr)
        return 1
    except RockSSLError as exc:
        print(f"rockssl {args.command}: {exc}", file=sys.stderr)
        return 2


def main() -> None:
    sys.exit(run())


if __name__ == "__main__":
    main()
