"""Command-line front end.

Every command accepts ``--config FILE`` (plain ``key=value`` lines, ``#``
comments), ``--seed`` and ``--out``.  Flags override file values, and the
resolved configuration is written next to every artifact as
``config.txt`` as well as embedded in CSV headers and checkpoint metadata.

Exit codes: 0 success, 2 invalid configuration or input, 3 I/O failure,
4 numerical failure (divergence or a failed gradient check).
"""

from __future__ import annotations

import argparse
import logging
import sys
from dataclasses import fields
from pathlib import Path

from . import classifier, container, evaluation, gradcheck
from . import model as modellib
from .data import Dataset, DatasetError, load_dataset, load_image_dir, reference_subset, save_dataset, synth_shapes
from .tensor import NonFiniteError, ShapeError
from .trainer import TrainConfig, TrainingDiverged, pretrain_reference, train, write_log

EXIT_OK = 0
EXIT_VALIDATION = 2
EXIT_IO = 3
EXIT_NUMERICAL = 4

logger = logging.getLogger("doclearn")


class ConfigError(ValueError):
    pass


# ---------------------------------------------------------------------------
# configuration


def read_config(path) -> dict[str, str]:
    out = {}
    for lineno, raw in enumerate(Path(path).read_text().splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{path}:{lineno}: expected key=value, got {raw!r}")
        key, value = (s.strip() for s in line.split("=", 1))
        out[key.replace("-", "_")] = value
    return out


def write_config(path, cfg: dict) -> None:
    Path(path).write_text("".join(f"{k}={_fmt(v)}\n" for k, v in sorted(cfg.items())))


def _fmt(v) -> str:
    if isinstance(v, (list, tuple)):
        return ",".join(str(x) for x in v)
    return "" if v is None else str(v)


def _coerce(key: str, value, kind):
    if value is None or not isinstance(value, str):
        return value
    try:
        if kind is bool:
            if value.lower() in ("1", "true", "yes", "on"):
                return True
            if value.lower() in ("0", "false", "no", "off"):
                return False
            raise ValueError(value)
        if kind is list:
            return [s for s in (p.strip() for p in value.split(",")) if s]
        return kind(value)
    except ValueError:
        raise ConfigError(f"{key}: cannot parse {value!r} as {kind.__name__}") from None


# key -> (type, default, help); flags are derived as --key-with-dashes
COMMON = {
    "seed": (int, 0, "master random seed"),
    "out": (str, None, "output directory (default ./out; gradcheck writes nothing unless given)"),
}
TRAIN_KEYS = {
    "lam": (float, 0.1, "compactness weight lambda"),
    "learning_rate": (float, 5e-5, "SGD learning rate"),
    "weight_decay": (float, 5e-4, "L2 weight decay"),
    "iterations": (int, 700, "number of training iterations"),
    "batch_size_target": (int, 32, "target batch size"),
    "batch_size_reference": (int, 32, "reference batch size"),
    "variant": (str, "two-branch", "two-branch or memeff"),
    "memeff_weighting": (str, "match-joint", "match-joint or paper-average"),
    "objective": (str, "composite", "composite or compactness-only"),
    "loss_tap": (str, "features", "features or logits"),
}
DATA_KEYS = {
    "image_size": (int, 28, "side length images are resized to (image directories only)"),
    "channels": (int, 1, "1 for grayscale, 3 for RGB (image directories only)"),
}
MODEL_KEYS = {
    "feature_dim": (int, 64, "feature width k"),
    "hidden": (int, 128, "width of the hidden fully connected layer"),
}

COMMANDS = {
    "synth": {
        "classes": (int, 10, "number of shape classes"),
        "per_class": (int, 100, "images per class"),
        "image_size": (int, 28, "image side length"),
        "noise": (float, 0.1, "pixel noise standard deviation"),
        "jitter": (float, 0.0, "geometric jitter"),
        "select": (list, None, "comma-separated subset of class names to keep"),
    },
    "pretrain": {
        "reference": (str, None, "reference dataset (container file or image directory)"),
        "exclude": (list, None, "comma-separated classes removed from the reference"),
        "epochs": (int, 5, "pretraining epochs"),
        "pretrain_lr": (float, 0.05, "pretraining learning rate"),
        "batch_size": (int, 32, "pretraining batch size"),
        "weight_decay": (float, 5e-4, "L2 weight decay"),
        **MODEL_KEYS,
        **DATA_KEYS,
    },
    "train": {
        "checkpoint": (str, None, "W_0 checkpoint"),
        "target": (str, None, "target dataset"),
        "target_class": (str, None, "keep only this class of the target dataset"),
        "reference": (str, None, "reference dataset"),
        "exclude": (list, None, "comma-separated classes removed from the reference"),
        "reference_fraction": (float, 1.0, "fraction of the reference set to use"),
        **TRAIN_KEYS,
        **DATA_KEYS,
    },
    "templates": {
        "checkpoint": (str, None, "trained checkpoint"),
        "target": (str, None, "target training dataset"),
        "target_class": (str, None, "keep only this class of the target dataset"),
        "count": (int, classifier.DEFAULT_TEMPLATE_COUNT, "number of templates"),
        "normalize": (bool, False, "L2-normalize features before matching"),
        **DATA_KEYS,
    },
    "score": {
        "checkpoint": (str, None, "trained checkpoint"),
        "templates": (str, None, "template file"),
        "images": (str, None, "dataset to score"),
        "neighbors": (int, 1, "average over this many nearest templates"),
        "threshold": (float, None, "optional decision threshold delta"),
        **DATA_KEYS,
    },
    "evaluate": {
        "dataset": (str, None, "dataset whose classes are evaluated one at a time"),
        "reference": (str, None, "reference dataset"),
        "classes": (list, None, "comma-separated classes to evaluate (default all)"),
        "modes": (list, ["doc"], "comma-separated of doc, baseline, descriptive-only, compactness-only"),
        "template_count": (int, classifier.DEFAULT_TEMPLATE_COUNT, "templates per class"),
        "train_fraction": (float, 0.5, "fraction of each class used for training"),
        "reference_fraction": (float, 1.0, "fraction of the reference set to use"),
        "pretrain_epochs": (int, 5, "pretraining epochs for W_0"),
        "pretrain_lr": (float, 0.05, "pretraining learning rate"),
        "neighbors": (int, 1, "average over this many nearest templates"),
        "repeats": (int, 1, "protocol repetitions"),
        **MODEL_KEYS,
        **TRAIN_KEYS,
        **DATA_KEYS,
    },
    "gradcheck": {
        "tolerance": (float, 1e-6, "maximum relative error for backbone gradients"),
        "quick": (bool, False, "fewer trials and narrower layers"),
        "perturb": (float, 0.0, "test hook: scale analytic gradients by 1+perturb"),
    },
}

REQUIRED = {
    "pretrain": ("reference",),
    "train": ("checkpoint", "target", "reference"),
    "templates": ("checkpoint", "target"),
    "score": ("checkpoint", "templates", "images"),
    "evaluate": ("dataset", "reference"),
}

FLAG_ALIASES = {"lam": ["--lambda"]}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="doclearn", description="Deep one-class feature learning")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)
    for name, keys in COMMANDS.items():
        p = sub.add_parser(name)
        p.add_argument("--config", help="key=value configuration file")
        for key, (kind, default, text) in {**COMMON, **keys}.items():
            flags = [f"--{key.replace('_', '-')}"] + FLAG_ALIASES.get(key, [])
            # None marks "not given" so file values survive
            extra = {"nargs": "?", "const": "true"} if kind is bool else {}
            p.add_argument(*flags, dest=key, default=None, help=f"{text} (default {_fmt(default) or 'none'})", **extra)
    return parser


def resolve(command: str, args: argparse.Namespace) -> dict:
    """Defaults, then the config file, then explicit flags."""
    spec = {**COMMON, **COMMANDS[command]}
    cfg = {k: d for k, (_, d, _) in spec.items()}
    given = {}
    if args.config:
        given.update(read_config(args.config))
    given.update({k: getattr(args, k) for k in spec if getattr(args, k, None) is not None})
    unknown = sorted(set(given) - set(spec))
    if unknown:
        raise ConfigError(f"unknown configuration keys for {command}: {', '.join(unknown)}")
    for key, value in given.items():
        cfg[key] = _coerce(key, value, spec[key][0])
    for key in REQUIRED.get(command, ()):
        if not cfg.get(key):
            raise ConfigError(f"missing required setting '{key}' (flag --{key.replace('_', '-')})")
    if cfg.get("variant") == "memeff":
        cfg["variant"] = "memory-efficient"
    cfg["command"] = command
    return cfg


def train_config(cfg: dict, seed: int | None = None) -> TrainConfig:
    names = {f.name for f in fields(TrainConfig)}
    return TrainConfig(**{k: v for k, v in cfg.items() if k in names and k != "seed"}, seed=cfg["seed"] if seed is None else seed)


def load_data(path: str, cfg: dict, field_name: str) -> Dataset:
    p = Path(path)
    if not p.exists():
        raise FileNotFoundError(f"{field_name}: {path} does not exist")
    if p.is_dir():
        return load_image_dir(p, (cfg.get("image_size", 28),) * 2, cfg.get("channels", 1))
    return load_dataset(p)


def _without(ds: Dataset, names) -> Dataset:
    if not names:
        return ds
    missing = [n for n in names if n not in ds.class_names]
    if missing:
        raise DatasetError(f"cannot exclude unknown classes {missing}")
    return ds.select_classes([n for n in ds.class_names if n not in names])


def _only(ds: Dataset, name) -> Dataset:
    if name is None:
        return ds
    if name not in ds.class_names:
        raise DatasetError(f"class {name!r} not in dataset {ds.source}")
    return ds.of_class(name)


def _prepare_out(cfg: dict) -> Path:
    out = Path(cfg["out"] or "out")
    out.mkdir(parents=True, exist_ok=True)
    write_config(out / "config.txt", cfg)
    return out


def _echo(cfg: dict) -> dict:
    # the output location does not influence content, so artifacts omit it
    return {k: _fmt(v) for k, v in cfg.items() if k != "out"}


# ---------------------------------------------------------------------------
# commands


def cmd_synth(cfg: dict) -> int:
    ds = synth_shapes(cfg["classes"], cfg["per_class"], cfg["image_size"], cfg["noise"], cfg["seed"], cfg["jitter"])
    if cfg["select"]:
        ds = ds.select_classes(cfg["select"])
    out = _prepare_out(cfg)
    save_dataset(ds, out / "dataset.bin")
    print(f"wrote {len(ds)} images of {ds.num_classes} classes to {out / 'dataset.bin'}")
    return EXIT_OK


def cmd_pretrain(cfg: dict) -> int:
    ref = _without(load_data(cfg["reference"], cfg, "reference"), cfg["exclude"])
    m = modellib.build(modellib.desk_backbone(ref.num_classes, cfg["feature_dim"], cfg["hidden"]), ref.image_shape, seed=cfg["seed"])
    m, log = pretrain_reference(m, ref, cfg["epochs"], cfg["pretrain_lr"], cfg["seed"], cfg["batch_size"], cfg["weight_decay"])
    m.metadata = dict(m.metadata, config=_echo(cfg), classes=ref.class_names)
    out = _prepare_out(cfg)
    modellib.save(m, out / "checkpoint.bin")
    write_log(log, out / "pretrain_log.csv", _echo(cfg))
    print(f"pretrained {len(log.records)} iterations, final loss {log.records[-1]['l_D']:.4f}" if log.records else "no pretraining steps")
    print(f"checkpoint {out / 'checkpoint.bin'} hash {m.hash()}")
    return EXIT_OK


def cmd_train(cfg: dict) -> int:
    w0 = modellib.load(cfg["checkpoint"])
    target = _only(load_data(cfg["target"], cfg, "target"), cfg["target_class"])
    ref = _without(load_data(cfg["reference"], cfg, "reference"), cfg["exclude"])
    ref = reference_subset(ref, cfg["reference_fraction"], cfg["seed"])
    tcfg = train_config(cfg)
    m, log = train(w0, ref, target, tcfg)
    m.metadata = dict(m.metadata, config=_echo(cfg))
    out = _prepare_out(cfg)
    modellib.save(m, out / "checkpoint.bin")
    write_log(log, out / "train_log.csv", _echo(cfg))
    last = log.records[-1] if log.records else None
    if last:
        print(
            f"iteration {last['iteration']}: l_D {last['l_D']:.4f} l_C {last['l_C']:.3e} l {last['l']:.4f} "
            f"feature_norm {last['feature_norm']:.3e} dead_fraction {last['dead_fraction']:.3f}"
        )
    print(f"checkpoint {out / 'checkpoint.bin'} hash {m.hash()}")
    return EXIT_OK


def cmd_templates(cfg: dict) -> int:
    m = modellib.load(cfg["checkpoint"])
    target = _only(load_data(cfg["target"], cfg, "target"), cfg["target_class"])
    t = classifier.generate_templates(m, target, cfg["count"], cfg["seed"], cfg["normalize"])
    out = _prepare_out(cfg)
    classifier.save_templates(t, out / "templates.bin", _echo(cfg))
    print(f"wrote {len(t)} templates of dimension {t.dim} to {out / 'templates.bin'}")
    return EXIT_OK


def cmd_score(cfg: dict) -> int:
    m = modellib.load(cfg["checkpoint"])
    t = classifier.load_templates(cfg["templates"])
    ds = load_data(cfg["images"], cfg, "images")
    scores = classifier.score_images(m, ds.images, t, cfg["neighbors"])
    out = _prepare_out(cfg)
    with open(out / "scores.csv", "w") as fh:
        for key, value in sorted(_echo(cfg).items()):
            fh.write(f"# {key}={value}\n")
        fh.write("id,label,class,score" + (",decision" if cfg["threshold"] is not None else "") + "\n")
        for i, (sid, lab, s) in enumerate(zip(ds.ids, ds.labels, scores)):
            row = f"{sid},{lab},{ds.class_names[lab]},{float(s)!r}"
            if cfg["threshold"] is not None:
                row += f",{classifier.classify(float(s), cfg['threshold'])}"
            fh.write(row + "\n")
    print(f"scored {len(scores)} images; min {scores.min():.4f} max {scores.max():.4f}")
    return EXIT_OK


def cmd_evaluate(cfg: dict) -> int:
    dataset = load_data(cfg["dataset"], cfg, "dataset")
    reference = load_data(cfg["reference"], cfg, "reference")
    pcfg = evaluation.ProtocolConfig(
        train=train_config(cfg),
        modes=tuple(cfg["modes"]),
        template_count=cfg["template_count"],
        train_fraction=cfg["train_fraction"],
        reference_fraction=cfg["reference_fraction"],
        pretrain_epochs=cfg["pretrain_epochs"],
        pretrain_lr=cfg["pretrain_lr"],
        feature_dim=cfg["feature_dim"],
        hidden=cfg["hidden"],
        n_neighbors=cfg["neighbors"],
        repeats=cfg["repeats"],
        seed=cfg["seed"],
    )
    report = evaluation.run_protocol(dataset, reference, pcfg, cfg["classes"])
    report.config = dict(report.config, **{f"cli.{k}": v for k, v in _echo(cfg).items()})
    out = _prepare_out(cfg)
    report.to_csv(out / "report.csv")
    for r in report.results:
        evaluation.write_roc_csv(out / f"roc_{r.class_name}_{r.mode}_{r.repeat}.csv", r.scores, r.truth)
        if r.log is not None:
            write_log(r.log, out / f"train_log_{r.class_name}_{r.mode}_{r.repeat}.csv", _echo(cfg))
    print(report.table())
    return EXIT_OK


def cmd_gradcheck(cfg: dict) -> int:
    checks = gradcheck.run_all(cfg["seed"], cfg["perturb"], cfg["tolerance"], cfg["quick"])
    lines = [c.line() for c in checks]
    ok = all(c.passed for c in checks)
    lines.append("all checks passed" if ok else f"{sum(not c.passed for c in checks)} check(s) failed")
    print("\n".join(lines))
    if cfg["out"]:
        out = _prepare_out(cfg)
        (out / "gradcheck.txt").write_text("".join(f"# {k}={v}\n" for k, v in sorted(_echo(cfg).items())) + "\n".join(lines) + "\n")
    return EXIT_OK if ok else EXIT_NUMERICAL


HANDLERS = {
    "synth": cmd_synth,
    "pretrain": cmd_pretrain,
    "train": cmd_train,
    "templates": cmd_templates,
    "score": cmd_score,
    "evaluate": cmd_evaluate,
    "gradcheck": cmd_gradcheck,
}


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = resolve(args.command, args)
        return HANDLERS[args.command](cfg)
    except (TrainingDiverged, NonFiniteError, FloatingPointError) as exc:
        print(f"error: numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERICAL
    except (container.ContainerError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_IO
    except (ConfigError, DatasetError, classifier.TemplateError, ShapeError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_VALIDATION


if __name__ == "__main__":
    sys.exit(main())
