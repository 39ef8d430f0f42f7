"""Command-line entry point: ``mothtrap <command> [options]``.

Every option can also come from a ``--config`` file of ``key = value`` lines
(``#`` starts a comment; keys are option names with dashes or underscores).
Precedence is built-in default < config file < command-line flag.
"""
from __future__ import annotations

import argparse
import csv
import sys
import time
from dataclasses import dataclass, field
from pathlib import Path

EXIT_OK, EXIT_USAGE, EXIT_IO, EXIT_FORMAT, EXIT_MODEL, EXIT_DEPLETED = 0, 1, 2, 3, 4, 5

EPILOG = """exit codes:
  0  success
  1  usage error (bad flags, bad config file)
  2  I/O error (missing or unwritable file)
  3  format error (image, weight file, payload, energy config)
  4  model error (shape mismatch, training diverged)
  5  simulation flagged battery depletion
"""


class UsageError(Exception):
    pass


class ConfigError(UsageError):
    pass


@dataclass(frozen=True)
class Opt:
    name: str
    type: type
    default: object = None
    help: str = ""
    kind: str = ""  # "in" / "out" / "dir-in" for path validation

    @property
    def key(self) -> str:
        return self.name.replace("-", "_")


_MODEL_OPTS = [
    Opt("model", str, None, "weight file (.pdnw); a .pdnw.json sidecar supplies the topology", "in"),
    Opt("arch", str, "lenet5", "architecture used when the weight file has no sidecar"),
]

COMMANDS: dict[str, tuple[str, list[Opt]]] = {
    "detect": ("run the capture -> preprocess -> infer -> report cycle on an image file", [
        Opt("image", str, None, "trap image (PGM or PPM)", "in"),
        *_MODEL_OPTS,
        Opt("out", str, None, "annotated RGB image (PPM)", "out"),
        Opt("csv", str, None, "detections CSV", "out"),
        Opt("report", str, None, "encoded 11-byte report payload", "out"),
        Opt("threshold", float, 0.5, "moth probability threshold"),
        Opt("stride", int, 26, "sliding-window stride in pixels"),
        Opt("min-edge-density", float, 0.02, "edge-density gate; 0 disables"),
        Opt("workers", int, 1, "classification threads"),
        Opt("trap-id", int, 0, "trap identifier in the report"),
        Opt("timestamp", int, 0, "report timestamp, minutes since epoch"),
        Opt("soc", float, 1.0, "battery state of charge for the report"),
        Opt("history", str, None, "CSV of earlier cycles (timestamp_min,moth_count) for the alert rule", "in"),
        Opt("cycle", bool, False, "print per-stage wall time and estimated cycle energy"),
        Opt("profile", str, "rpi3-lenet", "energy profile used by --cycle"),
        Opt("energy-config", str, None, "energy configuration file", "in"),
    ]),
    "train": ("train a classifier on a tile dataset or the synthetic benchmark", [
        Opt("arch", str, "lenet5", "lenet5, vgg16 or mobilenetv2"),
        Opt("data", str, None, "dataset root (class folders, optionally under train/ and test/)", "dir-in"),
        Opt("n-train", int, 2000, "synthetic training tiles when --data is absent"),
        Opt("n-test", int, 500, "synthetic test tiles when --data is absent"),
        Opt("augment", int, 1, "augmentation factor for the training split"),
        Opt("epochs", int, 100, "maximum epochs"),
        Opt("lr", float, 0.01, "learning rate"),
        Opt("batch", int, 32, "batch size"),
        Opt("early-stop", float, 0.995, "stop when validation accuracy reaches this; 0 disables"),
        Opt("prune", float, None, "magnitude-prune to this sparsity during training"),
        Opt("seed", int, 0, "random seed"),
        Opt("out", str, None, "output weight file (.pdnw)", "out"),
        Opt("history-csv", str, None, "per-epoch history CSV", "out"),
    ]),
    "optimize": ("run graph optimization passes on a weight file", [
        *_MODEL_OPTS,
        Opt("passes", str, "fold-bn,strip-train,fuse-const", "comma list: fold-bn, strip-train, fuse-const, prune:<s>"),
        Opt("out", str, None, "output weight file", "out"),
    ]),
    "simulate": ("simulate battery state of charge under solar harvesting", [
        Opt("profile", str, "rpi3-lenet", "cycle energy profile"),
        Opt("lux", float, 7000.0, "daytime illuminance"),
        Opt("days", int, 3, "simulated days"),
        Opt("daylight-hours", float, 12.0, "hours of light per day, starting 06:00"),
        Opt("soc", float, 0.5, "initial state of charge"),
        Opt("step", float, 60.0, "time step in seconds"),
        Opt("csv", str, None, "output CSV t_seconds,soc,volts,event", "out"),
        Opt("energy-config", str, None, "energy configuration file", "in"),
        Opt("summary", bool, False, "also print lifetime and recharge figures"),
    ]),
    "metrics": ("accuracy, precision, recall and F-score on a test set", [
        *_MODEL_OPTS,
        Opt("data", str, None, "dataset root; default is the synthetic benchmark test split", "dir-in"),
        Opt("n-test", int, 500, "synthetic test tiles when --data is absent"),
        Opt("seed", int, 0, "synthetic benchmark seed"),
        Opt("threshold", float, 0.5, "moth probability threshold"),
    ]),
    "report-decode": ("decode an 11-byte report payload", [
        Opt("hex", str, None, "payload as a hex string"),
        Opt("file", str, None, "payload file", "in"),
    ]),
    "gen-dataset": ("write synthetic tiles and trap scenes", [
        Opt("out", str, None, "output directory"),
        Opt("n-train", int, 2000, "training tiles"),
        Opt("n-test", int, 500, "test tiles"),
        Opt("scenes", int, 0, "also write this many trap scenes with ground truth"),
        Opt("seed", int, 0, "random seed"),
    ]),
}

REQUIRED = {
    "detect": ("image", "model"),
    "optimize": ("model", "out"),
    "metrics": ("model",),
    "gen-dataset": ("out",),
}

ALL_KEYS = {o.key: o for _, opts in COMMANDS.values() for o in opts}


@dataclass
class RunConfig:
    command: str | None = None
    values: dict = field(default_factory=dict)
    lines: dict = field(default_factory=dict)  # key -> config line number

    def get(self, key, default=None):
        return self.values.get(key, default)


def _parse_bool(text: str) -> bool:
    t = text.strip().lower()
    if t in ("1", "true", "yes", "on"):
        return True
    if t in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {text!r}")


def _convert(opt: Opt, raw: str):
    if opt.type is bool:
        return _parse_bool(raw)
    return opt.type(raw)


def parse_config(text: str, source: str = "<config>") -> RunConfig:
    cfg = RunConfig()
    for lineno, line in enumerate(text.splitlines(), start=1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        key, sep, raw = line.partition("=")
        if not sep:
            raise ConfigError(f"{source}:{lineno}: expected key = value")
        key = key.strip().replace("-", "_")
        raw = raw.strip()
        if key not in ALL_KEYS:
            raise ConfigError(f"{source}:{lineno}: unknown key {key!r}")
        try:
            cfg.values[key] = _convert(ALL_KEYS[key], raw)
        except ValueError:
            raise ConfigError(f"{source}:{lineno}: bad value {raw!r} for {key}") from None
        cfg.lines[key] = lineno
    return cfg


def load_config(path) -> RunConfig:
    path = Path(path)
    try:
        text = path.read_text()
    except OSError as e:
        raise OSError(f"cannot read config {path}: {e.strerror or e}") from None
    return parse_config(text, str(path))


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.prog}: {message}")


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="mothtrap", description="Codling moth trap toolkit.", epilog=EPILOG,
                formatter_class=argparse.RawDescriptionHelpFormatter)
    sub = p.add_subparsers(dest="command", metavar="command")
    for name, (help_text, opts) in COMMANDS.items():
        sp = sub.add_parser(name, help=help_text, description=help_text, epilog=EPILOG,
                            formatter_class=argparse.RawDescriptionHelpFormatter,
                            argument_default=argparse.SUPPRESS)
        sp.add_argument("--config", help="key = value file; flags override it")
        for o in opts:
            default = "" if o.default is None else f" (default {o.default})"
            if o.type is bool:
                sp.add_argument(f"--{o.name}", dest=o.key, action="store_true", help=o.help)
            else:
                sp.add_argument(f"--{o.name}", dest=o.key, type=o.type, help=o.help + default,
                                metavar=o.name.split("-")[-1].upper())
    return p


def resolve(argv: list[str]) -> RunConfig:
    """Parse ``argv`` and merge defaults, the config file and flags."""
    ns = vars(build_parser().parse_args(argv))
    command = ns.pop("command", None)
    if command is None:
        raise UsageError("no command given")
    opts = COMMANDS[command][1]
    values = {o.key: o.default for o in opts}
    lines = {}
    if ns.get("config"):
        fc = load_config(ns.pop("config"))
        lines = fc.lines
        values.update({k: v for k, v in fc.values.items() if k in values})
    ns.pop("config", None)
    values.update(ns)
    for key in REQUIRED.get(command, ()):
        if values.get(key) in (None, ""):
            raise UsageError(f"{command}: --{key.replace('_', '-')} is required")
    cfg = RunConfig(command, values, lines)
    _validate_paths(cfg, opts)
    return cfg


def _validate_paths(cfg: RunConfig, opts: list[Opt]) -> None:
    for o in opts:
        v = cfg.values.get(o.key)
        if not v or not o.kind:
            continue
        p = Path(v)
        if o.kind == "in" and not p.is_file():
            raise FileNotFoundError(f"--{o.name}: no such file {p}")
        if o.kind == "dir-in" and not p.is_dir():
            raise FileNotFoundError(f"--{o.name}: no such directory {p}")
        if o.kind == "out" and not p.parent.resolve().is_dir():
            raise FileNotFoundError(f"--{o.name}: directory {p.parent} does not exist")


# ---------------------------------------------------------------------------
# commands


def _load_model(cfg):
    from .weightfile import load_model

    return load_model(cfg.get("model"), cfg.get("arch"))


def _energy(cfg):
    from .energy import load_energy_config

    return load_energy_config(cfg.get("energy_config"))


def _read_history(path) -> list[tuple[int, int]]:
    with open(path, newline="") as fh:
        rows = []
        for i, r in enumerate(csv.DictReader(fh), start=2):
            try:
                rows.append((int(r["timestamp_min"]), int(r["moth_count"])))
            except (KeyError, TypeError, ValueError):
                raise ValueError(f"{path}:{i}: expected timestamp_min,moth_count") from None
    return rows


def cmd_detect(cfg: RunConfig, out) -> int:
    from .detection import PipelineParams, annotate, classify_rois, count_labels, extract_rois, finalize, \
        preprocess, write_detections_csv
    from .energy import TASK_LABELS, TASKS
    from .imageio import read_image, write_image
    from .telemetry import TrapReport, alert_rule, to_hex, write_report

    profile = _energy(cfg).profile(cfg.get("profile")) if cfg.get("cycle") else None
    model = _load_model(cfg)
    threshold = cfg.get("threshold")
    if not 0.0 <= threshold <= 1.0:
        raise UsageError("--threshold must lie in [0, 1]")
    density = cfg.get("min_edge_density") or None
    params = PipelineParams(stride=cfg.get("stride"), min_edge_density=density)
    stages = {}

    t0 = time.perf_counter()
    img = read_image(cfg.get("image"))
    stages["task1"] = time.perf_counter() - t0

    t0 = time.perf_counter()
    gray, edges = preprocess(img, params)
    cands = extract_rois(gray, edges, params.window, params.stride, params.min_edge_density)
    stages["task2"] = time.perf_counter() - t0

    t0 = time.perf_counter()
    dets = finalize(classify_rois(cands, gray, model, workers=cfg.get("workers")), threshold, params)
    stages["task3"] = time.perf_counter() - t0

    t0 = time.perf_counter()
    moths, others = count_labels(dets)
    history = _read_history(cfg.get("history")) if cfg.get("history") else []
    alert = alert_rule(history + [(cfg.get("timestamp"), moths)])
    report = TrapReport.from_counts(cfg.get("trap_id"), cfg.get("timestamp"), moths, others, cfg.get("soc"), alert)
    payload = None
    if cfg.get("report"):
        payload = write_report(report, cfg.get("report"))
    if cfg.get("out"):
        write_image(annotate(img, dets), cfg.get("out"))
    if cfg.get("csv"):
        write_detections_csv(dets, cfg.get("csv"))
    stages["task4"] = time.perf_counter() - t0

    print(f"{moths} codling moth, {others} other", file=out)
    if alert:
        print("ALERT: treatment threshold reached (>= 2 moths in 7 days)", file=out)
    if payload is not None:
        print(f"report {to_hex(payload)}", file=out)
    if profile is not None:
        tasks = profile.tasks()
        for k in TASKS:
            wall = f"{1000 * stages[k]:9.1f} ms" if k in stages else " " * 12
            print(f"  {TASK_LABELS[k]:<11} {wall}  {tasks[k]:8.3f} J", file=out)
        print(f"  estimated cycle energy ({profile.name}): {sum(tasks.values()):.1f} J", file=out)
    return EXIT_OK


def cmd_train(cfg: RunConfig, out) -> int:
    from .data import augment, load_split, synthetic_benchmark, DatasetSplit
    from .optimize import PruneSchedule
    from .training import evaluate_metrics, train_sgd, write_history
    from .weightfile import save_model
    from .zoo import build

    seed = cfg.get("seed")
    if cfg.get("data"):
        ds = load_split(cfg.get("data"), seed=seed)
    else:
        ds = synthetic_benchmark(cfg.get("n_train"), cfg.get("n_test"), seed)
    if cfg.get("augment") > 1:
        ds = DatasetSplit(augment(ds.train, cfg.get("augment"), seed), ds.test)
    model = build(cfg.get("arch"), seed=seed)
    sched = PruneSchedule(cfg.get("prune"), epochs=cfg.get("epochs")) if cfg.get("prune") else None
    early = cfg.get("early_stop") or None

    def log(rec):
        print(f"epoch {rec.epoch:3d}  loss {rec.loss:.4f}  train {rec.train_acc:.4f}  val {rec.val_acc:.4f}",
              file=out)

    model, hist = train_sgd(model, ds, epochs=cfg.get("epochs"), early_stop_acc=early, lr=cfg.get("lr"),
                            batch=cfg.get("batch"), seed=seed, prune_schedule=sched, log=log)
    print(evaluate_metrics(model, ds.test), file=out)
    if cfg.get("out"):
        save_model(model, cfg.get("out"))
    if cfg.get("history_csv"):
        write_history(hist, cfg.get("history_csv"))
    return EXIT_OK


def cmd_optimize(cfg: RunConfig, out) -> int:
    from .optimize import run_pipeline
    from .weightfile import save_model

    try:
        from .optimize import parse_pipeline

        parse_pipeline(cfg.get("passes"))
    except ValueError as e:
        raise UsageError(f"--passes: {e}") from None
    model = _load_model(cfg)
    before = len(model.layers)
    model, reports = run_pipeline(model, cfg.get("passes"))
    for r in reports:
        print(r.line(), file=out)
    print(f"layers {before} -> {len(model.layers)}, parameters {model.param_count()}", file=out)
    save_model(model, cfg.get("out"))
    return EXIT_OK


def cmd_simulate(cfg: RunConfig, out) -> int:
    from .energy import cycle_energy, daylight_schedule, lifetime_cycles, recharge_time, simulate_soc, \
        RECHARGE_TABLE

    ec = _energy(cfg)
    profile = ec.profile(cfg.get("profile"))
    if cfg.get("lux") < 0 or cfg.get("days") < 1 or cfg.get("step") <= 0:
        raise UsageError("need --lux >= 0, --days >= 1 and --step > 0")
    battery = ec.battery.with_soc(cfg.get("soc"))
    sched = daylight_schedule(cfg.get("lux"), hours=cfg.get("daylight_hours"))
    tr = simulate_soc(battery, profile, ec.panel, sched, cfg.get("days"), step=cfg.get("step"))
    if cfg.get("csv"):
        tr.write_csv(cfg.get("csv"))
    print(f"{profile.name}: {cycle_energy(profile):.1f} J/cycle, {len(tr.cycle_times)} cycles, "
          f"SoC {tr.soc[0]:.3f} -> {tr.soc[-1]:.3f}", file=out)
    if cfg.get("summary"):
        life = lifetime_cycles(ec.battery, profile)
        print(f"full battery: {life.cycles} cycles, {life.days:g} days without harvesting", file=out)
        for lux in RECHARGE_TABLE:
            full = recharge_time(ec.battery.recharge_energy(), ec.panel, lux)
            one = recharge_time(cycle_energy(profile), ec.panel, lux)
            print(f"{lux:>6} lx: 20-100% in {full / 3600:.1f} h, one cycle in {one / 60:.1f} min", file=out)
    if tr.depleted:
        print(f"battery depleted at t={tr.depletion_time:.0f} s", file=out)
        return EXIT_DEPLETED
    return EXIT_OK


def cmd_metrics(cfg: RunConfig, out) -> int:
    from .data import load_split, synthetic_benchmark
    from .training import evaluate_metrics

    model = _load_model(cfg)
    if cfg.get("data"):
        test = load_split(cfg.get("data"), seed=cfg.get("seed")).test
    else:
        test = synthetic_benchmark(0, cfg.get("n_test"), cfg.get("seed")).test
    m = evaluate_metrics(model, test, cfg.get("threshold"))
    print(m, file=out)
    return EXIT_OK


def cmd_report_decode(cfg: RunConfig, out) -> int:
    from .telemetry import decode, from_hex

    if bool(cfg.get("hex")) == bool(cfg.get("file")):
        raise UsageError("give exactly one of --hex or --file")
    payload = from_hex(cfg.get("hex")) if cfg.get("hex") else Path(cfg.get("file")).read_bytes()
    r = decode(payload)
    for k in ("trap_id", "timestamp_min", "moth_count", "insect_count", "battery_soc_pct", "alert"):
        print(f"{k}={getattr(r, k)}", file=out)
    return EXIT_OK


def cmd_gen_dataset(cfg: RunConfig, out) -> int:
    from .data import save_split, synthetic_benchmark, synthetic_scene
    from .imageio import write_image

    root = Path(cfg.get("out"))
    root.mkdir(parents=True, exist_ok=True)
    seed = cfg.get("seed")
    save_split(synthetic_benchmark(cfg.get("n_train"), cfg.get("n_test"), seed), root)
    if cfg.get("scenes"):
        sdir = root / "scenes"
        sdir.mkdir(exist_ok=True)
        for i in range(cfg.get("scenes")):
            img, planted = synthetic_scene(seed=seed * 1000 + i)
            write_image(img, sdir / f"scene_{i:03d}.pgm")
            with open(sdir / f"scene_{i:03d}.csv", "w", newline="") as fh:
                w = csv.writer(fh)
                w.writerow(["x", "y", "class"])
                for p in planted:
                    w.writerow([f"{p.x:.1f}", f"{p.y:.1f}", p.label])
    print(f"wrote {cfg.get('n_train')} train / {cfg.get('n_test')} test tiles"
          f" and {cfg.get('scenes')} scenes to {root}", file=out)
    return EXIT_OK


HANDLERS = {
    "detect": cmd_detect,
    "train": cmd_train,
    "optimize": cmd_optimize,
    "simulate": cmd_simulate,
    "metrics": cmd_metrics,
    "report-decode": cmd_report_decode,
    "gen-dataset": cmd_gen_dataset,
}


def _exit_code(exc: BaseException) -> int:
    from .energy import EnergyConfigError
    from .graph import GraphError
    from .imageio import ImageFormatError
    from .tensor import NonFiniteError, ShapeError
    from .telemetry import TelemetryError
    from .training import TrainingDivergedError
    from .weightfile import WeightFormatError

    if isinstance(exc, UsageError):
        return EXIT_USAGE
    if isinstance(exc, OSError):
        return EXIT_IO
    if isinstance(exc, (ShapeError, GraphError, TrainingDivergedError, NonFiniteError)):
        return EXIT_MODEL
    if isinstance(exc, (ImageFormatError, WeightFormatError, TelemetryError, EnergyConfigError,
                        ValueError, UnicodeDecodeError)):
        return EXIT_FORMAT
    return EXIT_USAGE


def run(argv: list[str] | None = None, out=None, err=None) -> int:
    out = out or sys.stdout
    err = err or sys.stderr
    argv = list(sys.argv[1:] if argv is None else argv)
    if not argv:
        build_parser().print_usage(err)
        return EXIT_USAGE
    try:
        cfg = resolve(argv)
        return HANDLERS[cfg.command](cfg, out)
    except SystemExit as e:  # --help
        return EXIT_OK if e.code in (0, None) else EXIT_USAGE
    except Exception as e:  # one-line diagnostic, mapped exit code
        code = _exit_code(e)
        print(f"mothtrap: error: {e}", file=err)
        if code == EXIT_USAGE and not isinstance(e, ConfigError):
            build_parser().print_usage(err)
        return code


def main() -> None:
    sys.exit(run())
