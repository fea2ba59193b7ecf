"""Command-line entry point: ``platenet <command> [flags]``.

Exit codes: 0 success (or an ok part for ``predict``), 1 operational error,
2 refused precondition or bad usage, 3 a bad part from ``predict``.

Settings can also come from a ``key=value`` file passed with ``--config``;
explicit flags override the file, and the file overrides built-in defaults.
"""

import argparse
import dataclasses
import hashlib
import os
import sys

import numpy as np

from platenet import augment as aug
from platenet import dataset as ds
from platenet import metrics
from platenet import model as model_io
from platenet import trainer
from platenet.errors import BuildError, DatasetError, FormatError, PlatenetError, StructureError

EXIT_OK, EXIT_ERROR, EXIT_REFUSED, EXIT_BAD = 0, 1, 2, 3


@dataclasses.dataclass
class RunConfig:
    data_root: str = "data"
    model_path: str = "model.pnw"
    history_path: str = None  # defaults to "<model_path>.history.tsv"
    seed: int = 123
    epochs: int = 20
    batch_size: int = 64
    validation_fraction: float = 0.2
    threshold: float = 0.5
    image_size: int = 300
    rotation_range: float = 90.0
    width_shift_range: float = 0.05
    height_shift_range: float = 0.05
    shear_range: float = 0.05
    zoom_range: float = 0.05
    horizontal_flip: bool = True
    vertical_flip: bool = True
    brightness_low: float = 0.75
    brightness_high: float = 1.25

    def augment_config(self):
        return aug.AugmentConfig(
            rotation_range=self.rotation_range,
            width_shift_range=self.width_shift_range,
            height_shift_range=self.height_shift_range,
            shear_range=self.shear_range,
            zoom_range=self.zoom_range,
            horizontal_flip=self.horizontal_flip,
            vertical_flip=self.vertical_flip,
            brightness_range=(self.brightness_low, self.brightness_high),
        )

    @property
    def history_file(self):
        return self.history_path or self.model_path + ".history.tsv"


FIELD_TYPES = {f.name: f.type for f in dataclasses.fields(RunConfig)}


class CommandError(Exception):
    def __init__(self, message, code=EXIT_ERROR):
        super().__init__(message)
        self.code = code


def _parse_bool(text):
    low = str(text).strip().lower()
    if low in ("1", "true", "yes", "on"):
        return True
    if low in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {text!r}")


def _coerce(key, value):
    kind = FIELD_TYPES[key]
    if kind is bool:
        return _parse_bool(value)
    if kind is int:
        return int(value)
    if kind is float:
        return float(value)
    return str(value)


def read_config_file(path):
    """Parse ``key = value`` lines; ``#`` starts a comment. Returns a dict of typed values."""
    values = {}
    try:
        with open(path, encoding="utf-8") as fh:
            lines = fh.readlines()
    except OSError as exc:
        raise CommandError(f"cannot read config file {path}: {exc}") from None
    for number, line in enumerate(lines, 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        key, sep, value = line.partition("=")
        key = key.strip().replace("-", "_")
        if not sep or key not in FIELD_TYPES:
            raise CommandError(f"{path}:{number}: expected one of the known keys as key=value, got {line!r}")
        try:
            values[key] = _coerce(key, value.strip())
        except ValueError as exc:
            raise CommandError(f"{path}:{number}: bad value for {key}: {exc}") from None
    return values


def resolve_config(args):
    """Defaults, then the config file, then any flag the user actually gave."""
    merged = {}
    if getattr(args, "config", None):
        merged.update(read_config_file(args.config))
    for key in FIELD_TYPES:
        value = getattr(args, key, None)
        if value is not None:
            merged[key] = value
    return RunConfig(**merged)


# ---------------------------------------------------------------- helpers


def _out(text=""):
    print(text, flush=True)


def _err(text):
    print(f"platenet: {text}", file=sys.stderr, flush=True)


def _split_dir(root, part):
    """``root/part`` when it exists, else ``root`` itself (a bare ``ok``/``bad`` tree)."""
    candidate = os.path.join(root, part)
    return candidate if os.path.isdir(candidate) else root


def input_digest(path, image_size):
    """Hash of the preprocessed (non-augmented) tensor an image becomes inside the pipeline."""
    tensor = ds.preprocess(path, image_size)
    return hashlib.blake2b(tensor.tobytes(), digest_size=8).hexdigest()


def _found(index, split=None):
    n = sum(index.counts(split).values())
    _out(f"Found {n} images belonging to {len(ds.CLASSES)} classes.")


def _load_model(path):
    try:
        return model_io.load(path)
    except FileNotFoundError:
        raise CommandError(f"model file not found: {path}") from None
    except (OSError, FormatError, StructureError) as exc:
        raise CommandError(f"cannot load model {path}: {exc}") from None


# ---------------------------------------------------------------- commands


def cmd_synth(args):
    out = args.out
    if os.path.isdir(out) and os.listdir(out) and not args.force:
        raise CommandError(f"output directory {out} is not empty (use --force to write anyway)", EXIT_REFUSED)
    if args.ok < 0 or args.bad < 0:
        raise CommandError("--ok and --bad must be nonnegative", EXIT_REFUSED)
    try:
        manifest = ds.synthesize(args.ok, args.bad, args.image_size, args.seed, out)
    except OSError as exc:
        raise CommandError(f"cannot write corpus to {out}: {exc}") from None
    if args.ok + args.bad == 0:
        _err("warning: no images requested; wrote an empty tree")
    for name, count in (("ok", args.ok), ("bad", args.bad)):
        n_test = count // 5
        _out(f"{name}: {count - n_test} train, {n_test} test")
    _out(f"manifest: {manifest}")
    return EXIT_OK


def cmd_train(args):
    cfg = resolve_config(args)
    root = _split_dir(cfg.data_root, "train")
    size = (cfg.image_size, cfg.image_size)
    try:
        index = ds.split(ds.scan(root, seed=cfg.seed), cfg.validation_fraction)
    except DatasetError as exc:
        raise CommandError(str(exc)) from None
    try:
        model = model_io.build(model_io.default_spec(cfg.image_size), seed=cfg.seed)
    except BuildError as exc:
        raise CommandError(str(exc)) from None
    _found(index, ds.TRAINING)
    _found(index, ds.VALIDATION)
    _out(f"input digest: {input_digest(index.entries[0].path, size)}")

    augment_cfg = cfg.augment_config()

    def train_batches(epoch):
        return ds.batches(index, ds.TRAINING, cfg.batch_size, shuffle=True, augment=augment_cfg,
                          epoch=epoch, target_size=size)

    def val_batches(epoch):
        return ds.batches(index, ds.VALIDATION, cfg.batch_size, target_size=size)

    config = trainer.TrainConfig(epochs=cfg.epochs, batch_size=cfg.batch_size, seed=cfg.seed,
                                 checkpoint_path=cfg.model_path, threshold=cfg.threshold)
    try:
        _, history = trainer.train(model, train_batches, val_batches, config, log=_out)
    except PlatenetError as exc:
        if getattr(exc, "history", None):
            trainer.export_history(exc.history, cfg.history_file)
        raise CommandError(str(exc)) from None
    try:
        trainer.export_history(history, cfg.history_file)
    except OSError as exc:
        raise CommandError(f"cannot write history {cfg.history_file}: {exc}") from None
    _out(f"best checkpoint: {cfg.model_path} (epochs {', '.join(map(str, history.checkpoint_epochs))})")
    _out(f"history: {cfg.history_file}")
    return EXIT_OK


def _predict_index(model, index, batch_size):
    size = model.input_size[:2]
    probs, labels, paths = [], [], []
    for batch in ds.batches(index, ds.TRAINING, batch_size, target_size=size):
        probs.append(model.forward(batch.inputs, training=False).reshape(-1))
        labels.append(batch.labels)
        paths += batch.paths
    return np.concatenate(probs), np.concatenate(labels).astype(np.int64), paths


def cmd_evaluate(args):
    cfg = resolve_config(args)
    model = _load_model(cfg.model_path)
    root = _split_dir(cfg.data_root, "test")
    try:
        index = ds.scan(root, seed=cfg.seed)  # every entry is tagged training; no split applied
        _found(index)
        _out(f"input digest: {input_digest(index.entries[0].path, model.input_size[:2])}")
        probs, labels, paths = _predict_index(model, index, cfg.batch_size)
    except DatasetError as exc:
        raise CommandError(str(exc)) from None
    try:
        predicted = metrics.threshold_predict(probs, cfg.threshold)
    except ValueError as exc:
        raise CommandError(str(exc), EXIT_REFUSED) from None
    cm = metrics.confusion(labels, predicted)
    rep = metrics.report(cm)
    _out()
    _out(metrics.render_confusion(cm))
    _out(metrics.render_report(rep))
    if rep.zero_division:
        _err("warning: undefined metrics set to 0: " + ", ".join(rep.zero_division))
    if args.probs_out:
        with open(args.probs_out, "w", encoding="utf-8") as fh:
            fh.write("path\tlabel\tprobability\n")
            for path, y, p in zip(paths, labels, probs):
                fh.write(f"{path}\t{y}\t{float(p)!r}\n")
    if args.report_out:
        with open(args.report_out, "w", encoding="utf-8") as fh:
            fh.write(metrics.render_report_tsv(rep))
    return EXIT_OK


def cmd_predict(args):
    model = _load_model(args.model)
    try:
        x = ds.preprocess(args.image, model.input_size[:2])
    except DatasetError as exc:
        raise CommandError(str(exc)) from None
    p = float(model.forward(x[None], training=False).reshape(-1)[0])
    label = int(metrics.threshold_predict([p], args.threshold)[0])
    _out(f"{args.image}\t{p:.4f}\t{ds.CLASS_NAMES[label]}")
    return EXIT_BAD if label == 1 else EXIT_OK


def cmd_summary(args):
    try:
        model = model_io.build(model_io.default_spec(args.image_size), seed=0)
    except BuildError as exc:
        raise CommandError(str(exc)) from None
    _out(model.summary().render())
    return EXIT_OK


def cmd_inspect(args):
    size = (args.image_size, args.image_size)
    try:
        x = ds.preprocess(args.image, size)[:, :, 0]
    except DatasetError as exc:
        raise CommandError(str(exc)) from None
    r, c, n = args.row, args.col, args.size
    if n < 1 or r < 0 or c < 0 or r + n > x.shape[0] or c + n > x.shape[1]:
        raise CommandError(f"patch rows {r}:{r + n}, cols {c}:{c + n} is outside the "
                           f"{x.shape[0]}x{x.shape[1]} image")
    for row in x[r:r + n, c:c + n]:
        _out(" ".join(f"{v:.2f}" for v in row))
    return EXIT_OK


def cmd_history_export(args):
    try:
        history = trainer.read_history(args.history)
    except (OSError, ValueError, IndexError) as exc:
        raise CommandError(f"cannot read history {args.history}: {exc}") from None
    if not history.records:
        raise CommandError(f"history {args.history} has no epochs")
    sep = "," if args.format == "csv" else "\t"
    text = trainer.format_history(history).replace("\t", sep)
    if args.out:
        with open(args.out, "w", encoding="utf-8") as fh:
            fh.write(text)
    else:
        sys.stdout.write(text)
    return EXIT_OK


# ---------------------------------------------------------------- parser


def _add_run_flags(p, *names):
    flags = {
        "data_root": dict(flags=("--data",), type=str, help="corpus root (uses train/ or test/ inside it if present)"),
        "model_path": dict(flags=("--model",), type=str, help="checkpoint path"),
        "history_path": dict(flags=("--history",), type=str, help="history TSV path"),
        "seed": dict(type=int),
        "epochs": dict(type=int),
        "batch_size": dict(type=int),
        "validation_fraction": dict(type=float),
        "threshold": dict(type=float),
        "image_size": dict(type=int),
        "rotation_range": dict(type=float),
        "width_shift_range": dict(type=float),
        "height_shift_range": dict(type=float),
        "shear_range": dict(type=float),
        "zoom_range": dict(type=float),
        "horizontal_flip": dict(type=_parse_bool),
        "vertical_flip": dict(type=_parse_bool),
        "brightness_low": dict(type=float),
        "brightness_high": dict(type=float),
    }
    p.add_argument("--config", help="key=value settings file; flags override it")
    for name in names:
        opts = dict(flags[name])
        option_strings = opts.pop("flags", ("--" + name.replace("_", "-"),))
        default = getattr(RunConfig, name)
        opts.setdefault("help", f"default {default}")
        p.add_argument(*option_strings, dest=name, default=None, **opts)


AUGMENT_FIELDS = ("rotation_range", "width_shift_range", "height_shift_range", "shear_range", "zoom_range",
                  "horizontal_flip", "vertical_flip", "brightness_low", "brightness_high")


def build_parser():
    parser = argparse.ArgumentParser(prog="platenet", description="Plated-part surface inspection CNN.")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="write a synthetic labelled corpus")
    p.add_argument("--ok", type=int, default=200)
    p.add_argument("--bad", type=int, default=200)
    p.add_argument("--out", default="data")
    p.add_argument("--seed", type=int, default=123)
    p.add_argument("--image-size", type=int, default=300)
    p.add_argument("--force", action="store_true", help="write into a non-empty directory")
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("train", help="train the default network and checkpoint the best epoch")
    _add_run_flags(p, "data_root", "model_path", "history_path", "seed", "epochs", "batch_size",
                   "validation_fraction", "threshold", "image_size", *AUGMENT_FIELDS)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("evaluate", help="confusion matrix and classification report on a test tree")
    _add_run_flags(p, "data_root", "model_path", "seed", "batch_size", "threshold")
    p.add_argument("--probs-out", help="write per-image probabilities as TSV")
    p.add_argument("--report-out", help="write the report as TSV")
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("predict", help="classify one image (exit 0 for ok, 3 for bad)")
    p.add_argument("--model", default=RunConfig.model_path)
    p.add_argument("--threshold", type=float, default=RunConfig.threshold)
    p.add_argument("image")
    p.set_defaults(func=cmd_predict)

    p = sub.add_parser("summary", help="print the layer table")
    p.add_argument("--image-size", type=int, default=RunConfig.image_size)
    p.set_defaults(func=cmd_summary)

    p = sub.add_parser("inspect", help="print a patch of rescaled pixel values")
    p.add_argument("image")
    p.add_argument("--row", type=int, default=0)
    p.add_argument("--col", type=int, default=0)
    p.add_argument("--size", type=int, default=25)
    p.add_argument("--image-size", type=int, default=RunConfig.image_size)
    p.set_defaults(func=cmd_inspect)

    p = sub.add_parser("history-export", help="convert a training history file")
    p.add_argument("history")
    p.add_argument("--out", help="output path (stdout if omitted)")
    p.add_argument("--format", choices=("tsv", "csv"), default="tsv")
    p.set_defaults(func=cmd_history_export)
    return parser


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except CommandError as exc:
        _err(str(exc))
        return exc.code
    except (PlatenetError, OSError, ValueError) as exc:
        _err(str(exc))
        return EXIT_ERROR


if __name__ == "__main__":
    sys.exit(main())
