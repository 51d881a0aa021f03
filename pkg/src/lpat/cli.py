"""Command-line surface: dataset preparation, synthetic fleets, training,
evaluation, and single-window prediction.

Every flag can also come from a flat key=value config file (--config); flags
override file values, unknown file keys are rejected. Commands exit 0 only on
success; diagnostics go to stderr.
"""

from __future__ import annotations

import argparse
import sys
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import cache, data, evaluate, synthetic, training
from .checkpoint import CheckpointError, checkpoint_load, checkpoint_save
from .perturb import PerturbationConfig
from .training import TrainConfig

MODE_MAP = {
    "basic": "none",
    "at": "supervised_at",
    "vat": "virtual_at",
    "lpat": "virtual_at",
}
DEFAULT_LAYERS = {"basic": "all", "at": "input", "vat": "input", "lpat": "all"}


class CliError(Exception):
    """Fatal command error; message goes to stderr, exit code 1."""


@dataclass
class Flag:
    name: str          # long flag, e.g. "keep-frac"
    type: type
    default: object
    help: str
    choices: tuple = ()

    @property
    def dest(self) -> str:
        if self.name == "lambda":  # keyword-safe attribute name
            return "lam"
        return self.name.replace("-", "_")


SCHEMAS: dict[str, list[Flag]] = {
    "prep": [
        Flag("input", str, None, "input CSV in the Backblaze daily schema"),
        Flag("out", str, None, "dataset cache file to write"),
        Flag("attrs", str, ",".join(data.DEFAULT_ATTRS), "comma-separated attribute columns"),
        Flag("clusters", int, 10, "k for the healthy-drive k-means subset"),
        Flag("keep-frac", float, 0.3, "fraction of each cluster kept (nearest the centroid)"),
        Flag("window", int, 20, "window length in days"),
        Flag("seed", int, 0, "pipeline seed"),
    ],
    "synth": [
        Flag("healthy", int, 100, "number of healthy drives"),
        Flag("failed", int, 10, "number of failing drives"),
        Flag("attrs", int, 8, "number of SMART attributes"),
        Flag("days", int, 60, "history length per drive"),
        Flag("seed", int, 0, "generator seed"),
        Flag("out", str, None, "CSV file to write"),
    ],
    "train": [
        Flag("data", str, None, "dataset cache from prep"),
        Flag("mode", str, "lpat", "training mode", ("basic", "at", "vat", "lpat")),
        Flag("layers", str, None, "injection points", ("input", "bottom", "top", "all")),
        Flag("epsilon", float, 20.0, "perturbation magnitude"),
        Flag("lambda", float, 1.0, "adversarial loss weight"),
        Flag("xi", float, 10.0, "finite-difference step for the virtual direction"),
        Flag("unlabeled-frac", float, 1.0, "fraction of the unlabeled pool to use"),
        Flag("epochs", int, 210, "training epochs"),
        Flag("batch", int, 128, "mini-batch size"),
        Flag("lr", float, 0.001, "RMSProp learning rate"),
        Flag("seed", int, 0, "run seed"),
        Flag("out", str, None, "checkpoint file to write"),
        Flag("report", str, None, "per-epoch report file to write"),
    ],
    "eval": [
        Flag("data", str, None, "dataset cache from prep"),
        Flag("checkpoint", str, None, "checkpoint to evaluate"),
        Flag("split", str, "test", "which split to score", ("valid", "test")),
        Flag("report", str, None, "metrics file to write"),
    ],
    "predict": [
        Flag("checkpoint", str, None, "trained checkpoint"),
        Flag("window", str, None, "CSV with exactly the trained window's rows"),
    ],
}

REQUIRED = {
    "prep": ("input", "out"),
    "synth": ("out",),
    "train": ("data", "out"),
    "eval": ("data", "checkpoint"),
    "predict": ("checkpoint", "window"),
}


@dataclass
class RunConfig:
    """Validated per-command settings merged from defaults, config file, and
    explicit flags (flags win)."""

    command: str
    values: dict

    def __getattr__(self, name):
        try:
            return self.values[name]
        except KeyError:
            raise AttributeError(name) from None

    @staticmethod
    def load_file(command: str, path) -> dict:
        """Read key=value lines; '#' starts a comment; keys use flag spelling."""
        known = {f.name: f for f in SCHEMAS[command]}
        out = {}
        for line_no, raw in enumerate(Path(path).read_text().splitlines(), start=1):
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise CliError(f"{path}:{line_no}: expected key=value, got {raw!r}")
            key, value = (part.strip() for part in line.split("=", 1))
            if key not in known:
                raise CliError(f"{path}:{line_no}: unknown key {key!r} for {command}")
            flag = known[key]
            try:
                parsed = flag.type(value)
            except ValueError:
                raise CliError(f"{path}:{line_no}: bad value {value!r} for {key}") from None
            if flag.choices and parsed not in flag.choices:
                raise CliError(
                    f"{path}:{line_no}: {key} must be one of {flag.choices}")
            out[flag.dest] = parsed
        return out

    @classmethod
    def merge(cls, command: str, cli_values: dict, config_path) -> "RunConfig":
        values = {f.dest: f.default for f in SCHEMAS[command]}
        if config_path:
            values.update(cls.load_file(command, config_path))
        values.update({k: v for k, v in cli_values.items() if v is not None})
        for name in REQUIRED[command]:
            if values[name.replace("-", "_")] is None:
                raise CliError(f"{command}: --{name} is required")
        return cls(command=command, values=values)

    def save(self, path) -> None:
        flags = {f.dest: f.name for f in SCHEMAS[self.command]}
        lines = [f"# lpat {self.command} config"]
        for dest, name in flags.items():
            value = self.values[dest]
            if value is not None:
                lines.append(f"{name}={value}")
        Path(path).write_text("\n".join(lines) + "\n")


def _build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="lpat",
        description="Adversarially trained LSTM hard-drive health classifier")
    sub = parser.add_subparsers(dest="command", required=True)
    for command, flags in SCHEMAS.items():
        p = sub.add_parser(command)
        p.add_argument("--config", default=None,
                       help="key=value config file; explicit flags override it")
        for f in flags:
            kwargs = dict(type=f.type, default=None, help=f.help, dest=f.dest)
            if f.choices:
                kwargs["choices"] = f.choices
            p.add_argument(f"--{f.name}", **kwargs)
    return parser


# ----------------------------------------------------------------- commands

def _attr_names(n: int) -> tuple[str, ...]:
    names = list(data.DEFAULT_ATTRS[:n])
    names += [f"smart_{200 + i}_raw" for i in range(len(names), n)]
    return tuple(names)


def cmd_synth(cfg: RunConfig) -> None:
    sc = synthetic.SynthConfig(healthy=cfg.healthy, failed=cfg.failed,
                               n_attrs=cfg.attrs, days=cfg.days, seed=cfg.seed)
    timelines = synthetic.generate_synthetic(sc)
    data.write_backblaze_csv(timelines, _attr_names(cfg.attrs), cfg.out)
    print(f"wrote {len(timelines)} drives ({cfg.healthy} healthy, "
          f"{cfg.failed} failing) to {cfg.out}")


def cmd_prep(cfg: RunConfig) -> None:
    attrs = tuple(a for a in cfg.attrs.split(",") if a)
    timelines = data.ingest_csv(cfg.input, attrs)
    split, stats = data.prepare_dataset(
        timelines, attrs=attrs, clusters=cfg.clusters, keep_frac=cfg.keep_frac,
        window=cfg.window, seed=cfg.seed)
    cache.save_split(split, cfg.out)
    print(stats.table(), end="")
    print("samples: "
          f"train={len(split.train_labeled)} "
          f"unlabeled={len(split.train_unlabeled)} "
          f"valid={len(split.valid)} test={len(split.test)}")
    print(f"cache written to {cfg.out}")


def _train_configs(cfg: RunConfig, has_unlabeled: bool
                   ) -> tuple[TrainConfig, PerturbationConfig]:
    layers = cfg.layers or DEFAULT_LAYERS[cfg.mode]
    mode = MODE_MAP[cfg.mode]
    if mode == "supervised_at" and has_unlabeled and cfg.unlabeled_frac > 0:
        raise CliError(
            "mode=at is supervised and cannot use unlabeled data; "
            "pass --unlabeled-frac 0 or use --mode vat/lpat")
    pcfg = PerturbationConfig(mode=mode, layers=layers, epsilon=cfg.epsilon,
                              xi=cfg.xi, lam=cfg.lam)
    tcfg = TrainConfig(learning_rate=cfg.lr, batch_size=cfg.batch,
                       epochs=cfg.epochs, unlabeled_frac=cfg.unlabeled_frac,
                       seed=cfg.seed)
    return tcfg, pcfg


def cmd_train(cfg: RunConfig) -> None:
    split = cache.load_split(cfg.data)
    tcfg, pcfg = _train_configs(cfg, bool(split.train_unlabeled))
    net, report = training.train(split, tcfg, pcfg)
    meta = {
        "window": str(split.window),
        "attrs": ",".join(split.attrs),
        "vmin": ",".join(repr(float(v)) for v in split.scaling.v_min),
        "vmax": ",".join(repr(float(v)) for v in split.scaling.v_max),
    }
    checkpoint_save(net, cfg.out, meta=meta)
    if cfg.report:
        Path(cfg.report).write_text(training.format_report(report))
    last = report.epochs[-1]
    print(f"trained {cfg.epochs} epochs; best epoch {report.best_epoch}; "
          f"final train loss {last.train_loss:.6f}")
    print(f"checkpoint written to {cfg.out}")


def cmd_eval(cfg: RunConfig) -> None:
    split = cache.load_split(cfg.data)
    net, meta = checkpoint_load(cfg.checkpoint,
                                expect={"n_attrs": len(split.attrs)})
    if meta.get("window") not in (None, str(split.window)):
        raise CliError(
            f"checkpoint was trained with window {meta['window']}, "
            f"cache uses {split.window}")
    samples = split.valid if cfg.split == "valid" else split.test
    if not samples:
        raise CliError(f"the {cfg.split} split is empty")
    report = evaluate.evaluate(net, samples)
    print(evaluate.format_table(report), end="")
    if cfg.report:
        Path(cfg.report).write_text(evaluate.format_metrics(report))
        print(f"metrics written to {cfg.report}")


def _format_probs(probs, decimals: int = 3) -> str:
    """Rounded probabilities adjusted to sum to exactly 1 at print precision."""
    r = [round(float(p), decimals) for p in probs]
    r[int(np.argmax(r))] += 1.0 - sum(r)
    return "[" + ", ".join(f"{v:.{decimals}f}" for v in r) + "]"


def cmd_predict(cfg: RunConfig) -> None:
    net, meta = checkpoint_load(cfg.checkpoint)
    for key in ("window", "attrs", "vmin", "vmax"):
        if key not in meta:
            raise CliError(f"checkpoint lacks pipeline metadata {key!r}; "
                           "was it written by lpat train?")
    w = int(meta["window"])
    attrs = tuple(meta["attrs"].split(","))
    scaling = data.ScalingParams(
        v_min=[float(v) for v in meta["vmin"].split(",")],
        v_max=[float(v) for v in meta["vmax"].split(",")],
    )
    rows = _read_window_csv(cfg.window, attrs, w)
    feats = data.minmax_apply(rows, scaling)
    label, probs = training.predict(net, feats)
    print(f"class={label} meaning={evaluate.CLASS_NAMES[label]} "
          f"probs={_format_probs(probs)}")


def _read_window_csv(path, attrs, w: int) -> np.ndarray:
    import csv as _csv
    with open(path, newline="") as fh:
        reader = _csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise CliError(f"{path}: empty window file") from None
        col = {name: i for i, name in enumerate(header)}
        missing = [a for a in attrs if a not in col]
        if missing:
            raise CliError(f"{path}: missing attribute columns {missing}")
        rows = []
        for line_no, row in enumerate(reader, start=2):
            try:
                rows.append([float(row[col[a]]) for a in attrs])
            except (ValueError, IndexError):
                raise CliError(f"{path}:{line_no}: malformed row") from None
    if len(rows) != w:
        raise CliError(f"{path}: expected exactly {w} rows "
                       f"(the trained window length), got {len(rows)}")
    return np.array(rows)


HANDLERS = {
    "prep": cmd_prep,
    "synth": cmd_synth,
    "train": cmd_train,
    "eval": cmd_eval,
    "predict": cmd_predict,
}


def main(argv=None) -> int:
    parser = _build_parser()
    args = parser.parse_args(argv)
    command = args.command
    cli_values = {f.dest: getattr(args, f.dest) for f in SCHEMAS[command]}
    try:
        cfg = RunConfig.merge(command, cli_values, args.config)
        HANDLERS[command](cfg)
    except (CliError, CheckpointError, cache.CacheFormatError, data.SchemaError,
            data.RowError, ValueError, OSError) as exc:
        print(f"lpat {command}: {exc}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
