"""Command-line entry point: ``racs {train,sweep,adapt-sim,classify,export-phi}``.

Settings come from built-in defaults, then an optional INI file
(``--config``), then command-line flags.  Every flag has a ``section.key``
equivalent in the file; flags win.

Exit codes: 0 success, 1 usage, 2 config, 3 data, 4 numeric failure.
"""

from __future__ import annotations

import argparse
import configparser
import csv
import json
import logging
import os
import sys
from dataclasses import dataclass, fields

import numpy as np

from . import adaptation
from .checkpoint import checkpoint_load, checkpoint_save
from .data import BlockDataset, extract_blocks, load_pgm, load_pgm_dir, split, synth_dataset
from .errors import DimensionError, FormatError, NumericError, RangeError
from .evaluation import export_phi_images, sweep_rates, write_csv
from .models import HEADS, ModelSpec
from .nn import forward_pass
from .sensing import MeasurementMatrix, quantize_export
from .training import (TrainConfig, TrainLog, make_checkpoint, model_from_checkpoint, run_rate_adaptive,
                       train_vanilla)

log = logging.getLogger("racs")

EXIT_OK, EXIT_USAGE, EXIT_CONFIG, EXIT_DATA, EXIT_NUMERIC = 0, 1, 2, 3, 4
MODES = ("vanilla", "rate-adaptive", "gaussian-fixed")
POLICIES = ("linear", "framediff", "confidence")


class UsageError(Exception):
    pass


class ConfigError(Exception):
    pass


class DataError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


@dataclass(frozen=True)
class Opt:
    flag: str
    section: str
    key: str
    type: type = str
    default: object = None
    help: str = ""


def _bool(text) -> bool:
    if isinstance(text, bool):
        return text
    value = str(text).strip().lower()
    if value in ("1", "true", "yes", "on"):
        return True
    if value in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {text!r}")


_TRAIN_DEFAULTS = TrainConfig()
TRAIN_OPTS = [Opt(f"--{f.name.replace('_', '-')}", "train", f.name, type(getattr(_TRAIN_DEFAULTS, f.name)),
                  getattr(_TRAIN_DEFAULTS, f.name)) for f in fields(TrainConfig)]
MODEL_OPTS = [
    Opt("--head", "model", "head", str, "autoencoder", f"one of {', '.join(HEADS)}"),
    Opt("--b", "model", "b", int, 33, "block side"),
    Opt("--num-classes", "model", "num_classes", int, 10),
]
DATA_OPTS = [
    Opt("--data", "data", "source", str, None, "PGM directory or synth:<kind>"),
    Opt("--count", "data", "count", int, 2000, "block count for synthetic sources"),
    Opt("--data-seed", "data", "seed", int, 1),
]
RUN_OPTS = [
    Opt("--mode", "run", "mode", str, "rate-adaptive", f"one of {', '.join(MODES)}"),
    Opt("--out", "run", "out", str, "out", "output directory"),
    Opt("--val-fraction", "run", "val_fraction", float, 0.1),
]
CKPT_OPT = Opt("--checkpoint", "run", "checkpoint", str, None, "checkpoint file")
ADAPT_OPTS = [
    Opt("--policy", "adapt", "policy", str, "framediff", f"one of {', '.join(POLICIES)}"),
    Opt("--frames", "adapt", "frames", str, None, "directory of PGM frames"),
    Opt("--alpha", "adapt", "alpha", float, 0.15),
    Opt("--beta", "adapt", "beta", float, 0.3),
    Opt("--gamma", "adapt", "gamma", float, 0.3),
    Opt("--delta", "adapt", "delta_rows", int, 3, "rows added/removed per step"),
    Opt("--r-start", "adapt", "r_start", int, None),
    Opt("--r-end", "adapt", "r_end", int, None),
    Opt("--bound-min", "adapt", "k_min", int, None, "defaults to the checkpoint's k_min"),
    Opt("--bound-max", "adapt", "m_max", int, None, "defaults to the checkpoint's m_max"),
    Opt("--confidences", "adapt", "confidences", str, None, "single-column CSV"),
    Opt("--ground-truth", "adapt", "ground_truth", _bool, False, "frame differences from true frames"),
    Opt("--trace", "adapt", "trace", str, "trace.csv"),
]
SWEEP_OPTS = [
    Opt("--r-min", "sweep", "r_min", int, None),
    Opt("--r-max", "sweep", "r_max", int, None),
    Opt("--csv", "sweep", "csv", str, "sweep.csv"),
]
CLASSIFY_OPTS = [
    Opt("--r", "classify", "r", int, None, "rows to use (default m_max)"),
    Opt("--image", "classify", "image", str, None, "single PGM block to classify"),
    Opt("--predictions", "classify", "predictions", str, "predictions.csv"),
]
EXPORT_OPTS = [
    Opt("--r", "export", "r", int, None, "export only the first r rows"),
    Opt("--quantize", "export", "quantize", _bool, False, "also write 9-bit integer rows"),
]

COMMANDS = {
    "train": TRAIN_OPTS + MODEL_OPTS + DATA_OPTS + RUN_OPTS,
    "sweep": [CKPT_OPT] + DATA_OPTS + SWEEP_OPTS + [RUN_OPTS[1]],
    "adapt-sim": [CKPT_OPT] + ADAPT_OPTS + [RUN_OPTS[1]],
    "classify": [CKPT_OPT] + DATA_OPTS + CLASSIFY_OPTS + [RUN_OPTS[1]],
    "export-phi": [CKPT_OPT] + EXPORT_OPTS + [RUN_OPTS[1]],
}
_ALL_KEYS = {(o.section, o.key) for opts in COMMANDS.values() for o in opts}


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="racs", description="Rate-adaptive compressive sensing experiments.")
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)
    for name, opts in COMMANDS.items():
        p = sub.add_parser(name)
        p.add_argument("--config", help="INI file; [section] keys use the field names, e.g. [train] max_iters_1")
        for opt in opts:
            if opt.type is _bool:
                p.add_argument(opt.flag, dest=f"{opt.section}.{opt.key}", nargs="?", const=True,
                               default=None, type=_bool, help=opt.help)
            else:
                p.add_argument(opt.flag, dest=f"{opt.section}.{opt.key}", default=None, help=opt.help)
    return parser


def resolve(opts, ns, config_path=None) -> dict:
    """Merge defaults < INI file < flags into ``{(section, key): value}``."""
    values = {(o.section, o.key): o.default for o in opts}
    types = {(o.section, o.key): o.type for o in opts}
    if config_path:
        ini = configparser.ConfigParser()
        try:
            with open(config_path) as fh:
                ini.read_file(fh)
        except (OSError, configparser.Error) as exc:
            raise ConfigError(f"cannot read config {config_path}: {exc}") from exc
        for section in ini.sections():
            for key, text in ini.items(section):
                if (section, key) not in values:
                    if (section, key) in _ALL_KEYS:
                        continue  # belongs to another subcommand
                    raise ConfigError(f"{config_path}: unknown key [{section}] {key}")
                values[(section, key)] = _convert(types[(section, key)], text, f"[{section}] {key}")
    for (section, key), typ in types.items():
        raw = getattr(ns, f"{section}.{key}", None)
        if raw is not None:
            try:
                values[(section, key)] = typ(raw)
            except ValueError as exc:
                raise UsageError(f"bad value for {key}: {raw!r}") from exc
    return values


def _convert(typ, text, where):
    try:
        return typ(text)
    except ValueError as exc:
        raise ConfigError(f"bad value for {where}: {text!r}") from exc


def _section(values, section) -> dict:
    return {k: v for (s, k), v in values.items() if s == section}


# ---------------------------------------------------------------- data


def load_source(source, b, count, seed, labelled=False) -> BlockDataset:
    if not source:
        raise ConfigError("no data source given (--data or [data] source)")
    if source.startswith("synth:"):
        kind = source.split(":", 1)[1]
        try:
            return synth_dataset(kind, count, b, seed)
        except ValueError as exc:
            raise ConfigError(str(exc)) from exc
    if labelled:
        raise DataError("labelled data is only available from synth:shapes")
    if not os.path.isdir(source):
        raise DataError(f"data directory {source} does not exist")
    images = load_pgm_dir(source)
    if not images:
        raise DataError(f"no .pgm files in {source}")
    blocks = np.concatenate([extract_blocks(img, b)[0].blocks for img in images])
    return BlockDataset(b, blocks)


def _load_checkpoint(path):
    if not path:
        raise ConfigError("no checkpoint given (--checkpoint)")
    if not os.path.exists(path):
        raise DataError(f"checkpoint {path} does not exist")
    ckpt = checkpoint_load(path)
    try:
        spec, cfg, phi, model = model_from_checkpoint(ckpt)
    except (KeyError, TypeError, ValueError) as exc:
        raise FormatError(f"{path}: checkpoint metadata incomplete: {exc}") from exc
    return ckpt, spec, cfg, phi, model


def _fmt(x) -> str:
    return f"{x:.6g}"


# ---------------------------------------------------------------- commands


def cmd_train(values) -> int:
    try:
        cfg = TrainConfig(**_section(values, "train"))
        spec = ModelSpec(**_section(values, "model"))
    except (TypeError, ValueError) as exc:
        raise ConfigError(str(exc)) from exc
    mode = values[("run", "mode")]
    if mode not in MODES:
        raise ConfigError(f"unknown mode {mode!r}; choose from {MODES}")
    d = _section(values, "data")
    data = load_source(d["source"], spec.b, d["count"], d["seed"], labelled=spec.head == "classifier")
    vf = values[("run", "val_fraction")]
    try:
        train, val, _ = split(data, (1.0 - vf, vf, 0.0), seed=cfg.seed)
    except ValueError as exc:
        raise ConfigError(str(exc)) from exc
    if len(train) == 0:
        raise DataError("training split is empty")

    out = values[("run", "out")]
    os.makedirs(out, exist_ok=True)
    if mode == "rate-adaptive":
        result = run_rate_adaptive(train, spec, cfg, val)
        ckpt = make_checkpoint(result.phi.rows, cfg.k_min, result.model, 3, cfg, spec)
    else:
        rng = np.random.default_rng(cfg.seed)
        result = train_vanilla(train, spec, cfg.m_max, cfg, val, rng, train_phi=mode == "vanilla")
        # a single-rate matrix still decodes at any prefix, so keep k_min = 1
        ckpt = make_checkpoint(result.phi.rows, 1, result.model, 1, cfg, spec)
    ckpt.config["mode"] = mode
    checkpoint_save(os.path.join(out, "model.racs"), ckpt)
    _write_train_log(result.log, os.path.join(out, "train_log.csv"))
    print(f"wrote {os.path.join(out, 'model.racs')} after {result.log.steps} steps")
    return EXIT_OK


def _write_train_log(tlog: TrainLog, path):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["stage", "row", "iteration", "loss"])
        for stage, row, it, loss in tlog.records:
            w.writerow([stage, row, it, _fmt(loss)])


def cmd_sweep(values) -> int:
    _, spec, cfg, phi, model = _load_checkpoint(values[("run", "checkpoint")])
    d = _section(values, "data")
    data = load_source(d["source"], spec.b, d["count"], d["seed"], labelled=spec.head == "classifier")
    r_min = values[("sweep", "r_min")] or phi.k_min
    r_max = values[("sweep", "r_max")] or phi.m_max
    if not phi.k_min <= r_min <= r_max <= phi.m_max:
        raise UsageError(f"need {phi.k_min} <= r-min <= r-max <= {phi.m_max}, got {r_min}..{r_max}")
    report = sweep_rates(model, phi, data, range(r_min, r_max + 1), dataset_name=d["source"])
    path = _in_out(values, values[("sweep", "csv")])
    write_csv(report, path)
    print(f"wrote {path} ({len(report.records)} rows, metric {report.metric})")
    return EXIT_OK


def _in_out(values, name):
    out = values[("run", "out")]
    os.makedirs(out, exist_ok=True)
    return name if os.path.isabs(name) else os.path.join(out, name)


def build_policy(a: dict, phi: MeasurementMatrix, n_frames: int):
    bounds = adaptation.Bounds(a["k_min"] or phi.k_min, a["m_max"] or phi.m_max)
    name = a["policy"]
    if name == "linear":
        r_start = a["r_start"] if a["r_start"] is not None else bounds.m_max
        r_end = a["r_end"] if a["r_end"] is not None else bounds.k_min
        return adaptation.LinearPolicy(bounds, r_start, r_end, n_frames)
    if name == "framediff":
        return adaptation.FrameDiffPolicy(bounds, a["alpha"], a["beta"], a["delta_rows"])
    if name == "confidence":
        return adaptation.ConfidencePolicy(bounds, a["gamma"], a["delta_rows"])
    raise ConfigError(f"unknown policy {name!r}; choose from {POLICIES}")


def cmd_adapt_sim(values) -> int:
    _, spec, cfg, phi, model = _load_checkpoint(values[("run", "checkpoint")])
    if spec.head == "classifier":
        raise ConfigError("adapt-sim needs a reconstruction checkpoint")
    a = _section(values, "adapt")
    if not a["frames"] or not os.path.isdir(a["frames"]):
        raise DataError(f"frame directory {a['frames']!r} does not exist")
    frames = load_pgm_dir(a["frames"])
    if not frames:
        raise DataError(f"no .pgm frames in {a['frames']}")
    try:
        policy = build_policy(a, phi, len(frames))
    except RangeError as exc:
        raise ConfigError(str(exc)) from exc
    confidences = None
    if a["policy"] == "confidence":
        if not a["confidences"]:
            raise ConfigError("the confidence policy needs --confidences")
        confidences = adaptation.read_confidences(a["confidences"])
    trace = adaptation.simulate_stream(frames, policy, model, phi, confidences, a["ground_truth"])
    path = _in_out(values, a["trace"])
    adaptation.write_trace_csv(trace, path)
    print(f"wrote {path}; avg MR {_fmt(trace.avg_mr)}")
    return EXIT_OK


def cmd_classify(values) -> int:
    _, spec, cfg, phi, model = _load_checkpoint(values[("run", "checkpoint")])
    if spec.head != "classifier":
        raise ConfigError(f"checkpoint head is {spec.head}, not classifier")
    c = _section(values, "classify")
    r = phi.check_r(c["r"] or phi.m_max)
    if c["image"]:
        data = BlockDataset(spec.b, load_pgm(c["image"]))
    else:
        d = _section(values, "data")
        data = load_source(d["source"], spec.b, d["count"], d["seed"])
    logits = np.concatenate([forward_pass(model, phi.prefix(r), data.blocks[i:i + 256])[0]
                             for i in range(0, len(data), 256)])
    pred = np.argmax(logits, axis=1)
    path = _in_out(values, c["predictions"])
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["index", "label", "prediction"])
        for i, p in enumerate(pred):
            w.writerow([i, "" if data.labels is None else int(data.labels[i]), int(p)])
    if data.labels is not None:
        print(f"accuracy at r={r}: {_fmt(float(np.mean(pred == data.labels)))}")
    else:
        print(" ".join(str(int(p)) for p in pred))
    return EXIT_OK


def cmd_export_phi(values) -> int:
    _, spec, cfg, phi, model = _load_checkpoint(values[("run", "checkpoint")])
    e = _section(values, "export")
    r = phi.check_r(e["r"]) if e["r"] else phi.m_max
    out = values[("run", "out")]
    rows = MeasurementMatrix(phi.rows[:r].copy(), min(phi.k_min, r))
    export_phi_images(rows, out, spec.b)
    rows.rows.astype("<f4").tofile(os.path.join(out, "phi.bin"))
    meta = {"rows": r, "n": phi.n, "dtype": "float32-le"}
    if e["quantize"]:
        q, scale = quantize_export(phi, r)
        q.astype("<i2").tofile(os.path.join(out, "phi_q.bin"))
        meta.update(quantized_dtype="int16-le", scale=float(scale))
    with open(os.path.join(out, "phi.json"), "w") as fh:
        json.dump(meta, fh, indent=2, sort_keys=True)
        fh.write("\n")
    print(f"exported {r} rows to {out}")
    return EXIT_OK


HANDLERS = {"train": cmd_train, "sweep": cmd_sweep, "adapt-sim": cmd_adapt_sim,
            "classify": cmd_classify, "export-phi": cmd_export_phi}


def run_command(argv=None) -> int:
    parser = build_parser()
    ns = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if ns.verbose else logging.WARNING,
                        format="%(asctime)s %(name)s %(levelname)s %(message)s", stream=sys.stderr)
    try:
        values = resolve(COMMANDS[ns.command], ns, ns.config)
        return HANDLERS[ns.command](values)
    except UsageError as exc:
        return _fail(EXIT_USAGE, exc)
    except ConfigError as exc:
        return _fail(EXIT_CONFIG, exc)
    except (DataError, FormatError, DimensionError, RangeError, FileNotFoundError) as exc:
        return _fail(EXIT_DATA, exc)
    except NumericError as exc:
        return _fail(EXIT_NUMERIC, exc)


def _fail(code, exc) -> int:
    print(f"racs: error: {exc}", file=sys.stderr)
    return code


def main():
    sys.exit(run_command())
