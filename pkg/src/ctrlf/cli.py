"""Command-line entry point: ``train``, ``eval``, ``analyze`` and ``gradcheck``.

Run options come from defaults, then an optional ``--config`` key=value file,
then explicit flags (flags win).  Exit codes: 0 success, 1 gradcheck breach,
2 configuration/data errors, 3 non-finite training loss.
"""

from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path

from .checkpoint import load_checkpoint, read_config_text
from .config import RunConfig, parse_kv
from .costs import count_costs, patch_sweep, sweep_csv
from .data import DataError, ImageFolderData, scan_dataset
from .model import PRESETS, build_model
from .nn import ConfigError
from .tensor import ShapeError

EXIT_OK, EXIT_GRADCHECK, EXIT_CONFIG, EXIT_NONFINITE = 0, 1, 2, 3

log = logging.getLogger("ctrlf")


def _run_flags(p: argparse.ArgumentParser) -> None:
    s = argparse.SUPPRESS  # unset flags must not override --config values
    p.add_argument("--config", default=None, help="key=value run configuration file")
    p.add_argument("--variant", choices=sorted(PRESETS), default=s)
    p.add_argument("--fusion", choices=("akf", "ckf"), default=s)
    p.add_argument("--data", default=s, help="image-folder dataset root")
    p.add_argument("--resolution", type=int, default=s)
    p.add_argument("--patch-large", type=int, default=s)
    p.add_argument("--patch-small", type=int, default=s)
    p.add_argument("--num-classes", type=int, default=s)
    p.add_argument("--epochs", type=int, default=s)
    p.add_argument("--seed", type=int, default=s)
    p.add_argument("--deterministic", action="store_true", default=s)
    p.add_argument("--out", default=s)
    p.add_argument("--dropout", type=float, default=s, help="CKF dropout rate")
    p.add_argument("--alpha", type=float, default=s, help="AKF sharpening factor")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="ctrlf", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    tr = sub.add_parser("train", help="train a model on an image-folder dataset")
    _run_flags(tr)
    tr.add_argument("--batch-size", type=int, default=argparse.SUPPRESS)
    tr.add_argument("--lr", type=float, default=argparse.SUPPRESS)
    tr.add_argument("--min-lr", type=float, default=argparse.SUPPRESS)
    tr.add_argument("--weight-decay", type=float, default=argparse.SUPPRESS)
    tr.add_argument("--warmup-epochs", type=int, default=argparse.SUPPRESS)
    tr.add_argument("--train-ratio", type=float, default=argparse.SUPPRESS)
    tr.add_argument("--no-augment", dest="augment", action="store_false", default=argparse.SUPPRESS)
    tr.add_argument("--resume", default=None, help="checkpoint directory to continue from")

    ev = sub.add_parser("eval", help="top-1 accuracy of a checkpoint (fused and per branch)")
    _run_flags(ev)
    ev.add_argument("--checkpoint", required=True)
    ev.add_argument("--split", choices=("train", "test"), default="test")

    an = sub.add_parser("analyze", help="parameter/FLOP report and patch-size sweep")
    _run_flags(an)
    an.add_argument("--sweep", default=None, metavar="CSV", help="write the patch-size grid to this file")

    gc = sub.add_parser("gradcheck", help="finite-difference gradient checks in float64")
    gc.add_argument("--fragments", nargs="*", default=None)
    gc.add_argument("--samples", type=int, default=50)
    gc.add_argument("--tolerance", type=float, default=1e-4)
    gc.add_argument("--seed", type=int, default=0)
    return parser


_NON_CONFIG = {"command", "verbose", "config", "resume", "checkpoint", "split", "sweep"}


def resolve_config(ns: argparse.Namespace, base: RunConfig | None = None) -> RunConfig:
    cfg = base or RunConfig()
    if getattr(ns, "config", None):
        path = Path(ns.config)
        if not path.is_file():
            raise ConfigError(f"config file {path} does not exist")
        cfg = cfg.merged(parse_kv(path.read_text(encoding="utf-8")))
    flags = {k: v for k, v in vars(ns).items() if k not in _NON_CONFIG}
    return cfg.merged(flags)


def _dataset(cfg: RunConfig, resolution: int, cache=None):
    if not cfg.data:
        raise ConfigError("no dataset given: pass --data PATH")
    root = Path(cfg.data)
    if not root.is_dir():
        raise ConfigError(f"dataset directory {root} does not exist")
    return scan_dataset(root, cfg.train_ratio, cfg.seed, resolution, cache_dir=cache)


def cmd_train(ns) -> int:
    from .data import Augment
    from .training import NonFiniteError, train

    cfg = resolve_config(ns)
    out = Path(cfg.out)
    probe = cfg.variant_config(cfg.num_classes or 1)
    manifest = _dataset(cfg, probe.resolution, cache=out / "manifest")
    if cfg.num_classes and cfg.num_classes != manifest.num_classes:
        raise ConfigError(f"num_classes={cfg.num_classes} but {cfg.data} has {manifest.num_classes} classes")
    cfg = cfg.merged({"num_classes": manifest.num_classes, "resolution": probe.resolution})
    vcfg = cfg.variant_config()
    out.mkdir(parents=True, exist_ok=True)
    cfg.save(out / "config.txt")
    aug = Augment(max_rotation=cfg.max_rotation)
    model = build_model(vcfg, seed=cfg.seed)
    log.info("training %s/%s: %d params, %d train / %d test images", vcfg.name, vcfg.fusion,
             model.num_parameters(), len(manifest.train), len(manifest.test))
    try:
        result = train(model, ImageFolderData(manifest, "train", aug), ImageFolderData(manifest, "test"),
                       cfg.train_config(), out, cfg.to_text(), resume=ns.resume,
                       on_epoch=lambda r: print(f"epoch {r['epoch']}: loss {r['train_loss']:.4f} "
                                                f"train {r['train_acc']:.4f} test {r['test_acc']:.4f}"))
    except NonFiniteError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_NONFINITE
    print(f"best checkpoint: {result.best_checkpoint}")
    return EXIT_OK


def cmd_eval(ns) -> int:
    from .training import evaluate

    ckpt = Path(ns.checkpoint)
    if not (ckpt / "tensors.txt").is_file():
        raise ConfigError(f"checkpoint {ckpt} not found")
    saved = read_config_text(ckpt)
    cfg = resolve_config(ns, RunConfig.from_text(saved) if saved.strip() else None)
    vcfg = cfg.variant_config()
    model = build_model(vcfg, seed=cfg.seed)
    try:
        load_checkpoint(ckpt, model)
    except (KeyError, ShapeError) as exc:
        raise ConfigError(f"checkpoint {ckpt} does not match the configured model: {exc}") from None
    manifest = _dataset(cfg, vcfg.resolution)
    if manifest.num_classes != vcfg.num_classes:
        raise ConfigError(f"checkpoint has {vcfg.num_classes} classes, dataset has {manifest.num_classes}")
    acc = evaluate(model, ImageFolderData(manifest, ns.split))
    print(f"fused={acc['fused']:.4f} cnn={acc['cnn']:.4f} mfca={acc['mfca']:.4f}")
    return EXIT_OK


def cmd_analyze(ns) -> int:
    cfg = resolve_config(ns)
    vcfg = cfg.variant_config(cfg.num_classes or 102)
    report = count_costs(vcfg)
    print(f"{vcfg.name} + {vcfg.fusion.upper()} at {vcfg.resolution}x{vcfg.resolution}, "
          f"patches (large={vcfg.mfca.large.patch_size}, small={vcfg.mfca.small.patch_size})")
    print(report.table())
    if ns.sweep:
        rows = patch_sweep(vcfg)
        Path(ns.sweep).write_text(sweep_csv(rows), encoding="utf-8", newline="\n")
        print(f"wrote {sum(r[2] is not None for r in rows)} sweep rows to {ns.sweep}")
    return EXIT_OK


def cmd_gradcheck(ns) -> int:
    from .gradcheck import FRAGMENTS, suite

    names = ns.fragments or list(FRAGMENTS)
    unknown = [n for n in names if n not in FRAGMENTS]
    if unknown:
        raise ConfigError(f"unknown fragments {unknown}; choose from {sorted(FRAGMENTS)}")
    reports = suite(names, ns.samples, ns.tolerance, ns.seed)
    for r in reports:
        print(r.summary())
    return EXIT_OK if all(r.passed for r in reports) else EXIT_GRADCHECK


COMMANDS = {"train": cmd_train, "eval": cmd_eval, "analyze": cmd_analyze, "gradcheck": cmd_gradcheck}


def main(argv=None) -> int:
    ns = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if ns.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        return COMMANDS[ns.command](ns)
    except (ConfigError, DataError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
