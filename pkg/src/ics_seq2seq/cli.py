"""Command-line pipeline: simulate, train, detect, evaluate, plot-errors.

Exit codes: 0 success, 1 alerts found (``detect`` only), 2 usage or input error.
Every command writes ``manifest.json`` into its output directory listing the
effective configuration, seeds, input digests and output digests.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import logging
import sys
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field, fields
from datetime import timedelta
from pathlib import Path

try:
    import tomllib
except ImportError:  # Python < 3.11
    import tomli as tomllib

from . import __version__
from .dataset import DataError, load_csv, load_schema, write_csv, write_schema
from .decision import RatingConfig, detect, write_alerts, write_ratings, read_alerts, read_ratings
from .scoring import read_errors, score_series, write_errors
from .seqmodel import ModelConfig, load_checkpoint, save_checkpoint
from .simulator import AttackScript, SpecError, attack_labels, default_plant, inject, load_plant, \
    load_script, save_plant, save_script, simulate
from .trainer import TrainConfig, TrainingDiverged, run_trials, select_best, write_train_log

log = logging.getLogger("ics_seq2seq")

EXIT_OK, EXIT_ALERTS, EXIT_USAGE = 0, 1, 2


class UsageError(Exception):
    pass


# -- manifest --------------------------------------------------------------


def sha256_file(path: str | Path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


@dataclass
class RunManifest:
    command: str
    config: dict
    seed: int | None
    inputs: dict[str, str] = field(default_factory=dict)
    outputs: dict[str, str] = field(default_factory=dict)
    logs: list[str] = field(default_factory=list)
    tool_version: str = __version__

    def add_input(self, path) -> None:
        self.inputs[str(path)] = sha256_file(path)

    def add_output(self, out_dir: Path, path) -> None:
        self.outputs[Path(path).relative_to(out_dir).as_posix()] = sha256_file(path)

    def write(self, out_dir: Path) -> Path:
        path = out_dir / "manifest.json"
        data = asdict(self)
        data["outputs"] = dict(sorted(self.outputs.items()))
        data["logs"] = sorted(self.logs)
        path.write_text(json.dumps(data, indent=2, sort_keys=True) + "\n")
        return path


# -- config ----------------------------------------------------------------


def load_config(path: str | None) -> dict:
    if path is None:
        return {}
    try:
        with open(path, "rb") as fh:
            return tomllib.load(fh)
    except FileNotFoundError:
        raise UsageError(f"config file not found: {path}") from None
    except tomllib.TOMLDecodeError as exc:
        raise UsageError(f"{path}: {exc}") from None


def _merge(cls, section: dict, overrides: dict, **fixed):
    """Build a config dataclass from file values, then non-None flag values."""
    names = {f.name for f in fields(cls)}
    unknown = set(section) - names
    if unknown:
        raise UsageError(f"unknown {cls.__name__} key(s): {', '.join(sorted(unknown))}")
    values = {**section, **{k: v for k, v in overrides.items() if v is not None and k in names}, **fixed}
    try:
        return cls(**values)
    except (TypeError, ValueError) as exc:
        raise UsageError(f"{cls.__name__}: {exc}") from None


def _rating_config(args, cfg: dict) -> RatingConfig:
    return _merge(RatingConfig, cfg.get("rating", {}), {
        "sum_window_seconds": args.sum_window, "outliers_removed": args.outliers,
        "history_size": args.history, "alert_threshold": args.threshold,
        "ratio_divisor": args.ratio_divisor, "merge_gap_seconds": args.merge_gap,
    })


def _seed(args, cfg: dict) -> int:
    return args.seed if args.seed is not None else int(cfg.get("seed", 0))


def _out_dir(args) -> Path:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _require(path, what: str) -> Path:
    p = Path(path)
    if not p.is_file():
        raise UsageError(f"{what} not found: {path}")
    return p


def _load_series(args, manifest: RunManifest):
    data = _require(args.data, "data file")
    schema = None
    if args.schema:
        schema = load_schema(_require(args.schema, "schema file"))
        manifest.add_input(args.schema)
    manifest.add_input(data)
    return load_csv(data, schema)


def _processes(arg: str | None, available: list[int]) -> list[int]:
    if arg is None or arg == "all":
        return available
    try:
        wanted = [int(x) for x in arg.split(",")]
    except ValueError:
        raise UsageError(f"invalid process id {arg!r}") from None
    bad = [p for p in wanted if p not in available]
    if bad:
        raise UsageError(f"invalid process id {bad[0]}; data has processes {available}")
    return wanted


# -- commands --------------------------------------------------------------


def cmd_simulate(args) -> int:
    cfg = load_config(args.config)
    sim_cfg = cfg.get("simulate", {})
    seed = _seed(args, cfg)
    duration = args.duration or int(sim_cfg.get("duration", 20000))
    out = _out_dir(args)
    manifest = RunManifest("simulate", {"duration": duration}, seed)
    spec_path = args.spec or sim_cfg.get("spec")
    if spec_path:
        spec = load_plant(_require(spec_path, "plant spec"))
        manifest.add_input(spec_path)
        spec.seed = seed if args.seed is not None or "seed" in cfg else spec.seed
    else:
        spec = default_plant(seed)
    manifest.seed = spec.seed
    script_path = args.script or sim_cfg.get("script")
    script = AttackScript()
    if script_path:
        script = load_script(_require(script_path, "attack script"))
        manifest.add_input(script_path)
    series = simulate(spec, duration)
    if script.attacks:
        series = inject(series, script, spec)
    manifest.config["plant"] = spec.to_dict()
    manifest.config["attacks"] = script.to_dict()["attacks"]

    paths = [out / "data.csv", out / "schema.csv", out / "plant.json"]
    write_csv(series, paths[0])
    write_schema(series.schema, paths[1])
    save_plant(spec, paths[2])
    if script.attacks:
        from .evaluation import write_labels

        paths += [out / "labels.csv", out / "attacks.json"]
        write_labels(attack_labels(script, series), paths[3])
        save_script(script, paths[4])
    for p in paths:
        manifest.add_output(out, p)
    manifest.write(out)
    print(f"wrote {len(series)} rows x {len(series.schema)} tags to {out}")
    return EXIT_OK


def _train_one(job):
    series, pid, train_cfg, model_cfg, out = job
    results = run_trials(series, pid, train_cfg, model_cfg)
    logs = []
    for r in results:
        if r is not None:
            path = out / "logs" / f"process_{pid}_seed_{r.seed}.csv"
            write_train_log(r, path)
            logs.append(path)
    best = select_best(results)
    ckpt = out / f"process_{pid}.ckpt"
    save_checkpoint(best.params, ckpt)
    return pid, ckpt, best.seed, best.loss_history, logs


def cmd_train(args) -> int:
    cfg = load_config(args.config)
    seed = _seed(args, cfg)
    train_cfg = _merge(TrainConfig, cfg.get("train", {}), {
        "epochs": args.epochs, "batch_size": args.batch_size, "learning_rate": args.lr,
        "trials": args.trials,
    }, seed=seed)
    model_section = cfg.get("model", {})
    model_cfg = _merge(ModelConfig, model_section, {
        "hidden_dim": args.hidden, "num_layers": args.layers, "attention": args.attention,
    }, n_tags=1, seed=seed)
    out = _out_dir(args)
    # n_tags and process_id are filled in per process
    model_record = {k: v for k, v in asdict(model_cfg).items() if k not in ("n_tags", "process_id")}
    manifest = RunManifest("train", {"train": asdict(train_cfg), "model": model_record}, seed)
    series = _load_series(args, manifest)
    if series.labels is not None and series.labels.any():
        raise UsageError("training data contains attack-labeled rows")
    pids = _processes(args.process, series.schema.processes)
    (out / "logs").mkdir(exist_ok=True)
    jobs = [(series, pid, train_cfg, model_cfg, out) for pid in pids]
    if args.jobs > 1 and len(jobs) > 1:
        with ProcessPoolExecutor(max_workers=args.jobs) as pool:
            done = list(pool.map(_train_one, jobs))
    else:
        done = [_train_one(j) for j in jobs]
    for pid, ckpt, best_seed, hist, logs in done:
        manifest.add_output(out, ckpt)
        manifest.logs += [p.relative_to(out).as_posix() for p in logs]
        manifest.config.setdefault("selected_seeds", {})[str(pid)] = best_seed
        print(f"process {pid}: seed {best_seed} final loss {hist[-1]:.6g} -> {ckpt}")
    if args.plot:
        from .plotting import plot_loss

        fig = plot_loss({f"P{pid}": hist for pid, _, _, hist, _ in done}, out / "loss.png")
        manifest.add_output(out, fig)
    manifest.write(out)
    return EXIT_OK


def _checkpoints(models: list[str]) -> list[Path]:
    paths: list[Path] = []
    for m in models:
        p = Path(m)
        if p.is_dir():
            paths += sorted(p.glob("process_*.ckpt"))
        elif p.is_file():
            paths.append(p)
        else:
            raise UsageError(f"model path not found: {m}")
    if not paths:
        raise UsageError("no checkpoints found")
    return paths


def cmd_detect(args) -> int:
    cfg = load_config(args.config)
    rating_cfg = _rating_config(args, cfg)
    out = _out_dir(args)
    manifest = RunManifest("detect", {"rating": asdict(rating_cfg), "p": args.p}, None)
    series = _load_series(args, manifest)
    alerts = []
    outputs = []
    for ckpt in _checkpoints(args.models):
        try:
            model = load_checkpoint(ckpt)
        except (ValueError, KeyError) as exc:
            raise UsageError(f"{ckpt}: {exc}") from None
        manifest.add_input(ckpt)
        pid = model.config.process_id
        if args.process not in (None, "all") and pid not in _processes(args.process, series.schema.processes):
            continue
        errors = score_series(model, series, p=args.p)
        ratings, found = detect(errors, rating_cfg)
        alerts += found
        e_path, r_path = out / f"errors_p{pid}.csv", out / f"ratings_p{pid}.csv"
        write_errors(errors, e_path)
        write_ratings(ratings, r_path)
        outputs += [e_path, r_path]
        print(f"process {pid}: {len(errors)} scored seconds, {len(found)} alert(s)")
    a_path = out / "alerts.jsonl"
    write_alerts(alerts, a_path)
    for p in outputs + [a_path]:
        manifest.add_output(out, p)
    manifest.write(out)
    return EXIT_ALERTS if alerts else EXIT_OK


def cmd_evaluate(args) -> int:
    from .evaluation import evaluate, load_labels, render_report
    from .plotting import plot_timeline

    cfg = load_config(args.config)
    eval_cfg = cfg.get("evaluate", {})
    grace = args.grace_minutes if args.grace_minutes is not None else eval_cfg.get("grace_minutes", 15)
    lt = args.lt_minutes if args.lt_minutes is not None else eval_cfg.get("lt_minutes", 60)
    gap = eval_cfg.get("dedup_minutes", 15)
    threshold = cfg.get("rating", {}).get("alert_threshold", 0.3)
    out = _out_dir(args)
    manifest = RunManifest("evaluate", {"grace_minutes": grace, "lt_minutes": lt, "dedup_minutes": gap,
                                        "alert_threshold": threshold}, None)
    alerts = read_alerts(_require(args.alerts, "alerts file"))
    labels = load_labels(_require(args.labels, "label file"))
    manifest.add_input(args.alerts)
    manifest.add_input(args.labels)
    processes = sorted(set(args.processes or []) | {a.process_id for a in alerts}
                       | {p for x in labels for p in x.target_processes})
    report = evaluate(alerts, labels, processes, timedelta(minutes=grace), timedelta(minutes=lt),
                      timedelta(minutes=gap), threshold)
    render_report(report, out)
    names = ["attacks.csv", "false_positives.csv", "fp_summary.csv", "report.txt"]
    paths = [out / n for n in names]
    if not args.no_plot:
        paths.append(plot_timeline(alerts, labels, processes, out / "timeline.png"))
    for p in paths:
        manifest.add_output(out, p)
    manifest.write(out)
    sys.stdout.write((out / "report.txt").read_text())
    return EXIT_OK


def cmd_plot_errors(args) -> int:
    from .evaluation import load_labels
    from .plotting import plot_errors, plot_tag_errors

    out = _out_dir(args)
    manifest = RunManifest("plot-errors", {"threshold": args.threshold}, None)
    errors = read_errors(_require(args.errors, "error dump"))
    manifest.add_input(args.errors)
    ratings = alerts = labels = None
    if args.ratings:
        ratings = read_ratings(_require(args.ratings, "rating dump"))
        manifest.add_input(args.ratings)
    if args.labels:
        labels = load_labels(_require(args.labels, "label file"))
        manifest.add_input(args.labels)
    if args.alerts:
        alerts = read_alerts(_require(args.alerts, "alerts file"))
        manifest.add_input(args.alerts)
    stem = Path(args.errors).stem
    if alerts is not None and errors.tags:
        from .dataset import process_of

        pid = process_of(errors.tags[0])
        alerts = [a for a in alerts if a.process_id == pid]
    paths = [plot_errors(errors, out / f"{stem}.png", ratings, labels, alerts, args.threshold)]
    if args.per_tag:
        paths.append(plot_tag_errors(errors, out / f"{stem}_tags.png"))
    for p in paths:
        manifest.add_output(out, p)
    manifest.write(out)
    print("\n".join(str(p) for p in paths))
    return EXIT_OK


# -- parser ----------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="ics-seq2seq", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, out_default):
        p.add_argument("--config", help="TOML config file; flags override its values")
        p.add_argument("--out", default=out_default, help="output directory")

    p = sub.add_parser("simulate", help="generate synthetic plant data")
    common(p, "sim")
    p.add_argument("--spec", help="plant spec JSON (default: built-in three-process plant)")
    p.add_argument("--script", help="attack script JSON")
    p.add_argument("--duration", type=int, help="seconds to simulate (default 20000)")
    p.add_argument("--seed", type=int)
    p.set_defaults(func=cmd_simulate)

    p = sub.add_parser("train", help="train per-process models")
    common(p, "models")
    p.add_argument("--data", required=True)
    p.add_argument("--schema")
    p.add_argument("--process", default="all", help='process id, comma list, or "all"')
    p.add_argument("--seed", type=int)
    p.add_argument("--epochs", type=int)
    p.add_argument("--batch-size", type=int)
    p.add_argument("--lr", type=float)
    p.add_argument("--trials", type=int)
    p.add_argument("--hidden", type=int)
    p.add_argument("--layers", type=int)
    p.add_argument("--attention", choices=["general", "dot"])
    p.add_argument("--jobs", type=int, default=1, help="processes trained in parallel")
    p.add_argument("--plot", action="store_true", help="also render loss.png")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("detect", help="score data and emit alerts")
    common(p, "detect")
    p.add_argument("--data", required=True)
    p.add_argument("--schema")
    p.add_argument("--models", nargs="+", required=True, help="checkpoint files or directories")
    p.add_argument("--process", default="all")
    p.add_argument("--p", type=float, default=4.0, help="norm order of the distance")
    p.add_argument("--seed", type=int, help="accepted for uniformity; detection is deterministic")
    for flag, kind in (("--sum-window", int), ("--outliers", int), ("--history", int),
                       ("--threshold", float), ("--ratio-divisor", float), ("--merge-gap", int)):
        p.add_argument(flag, type=kind)
    p.set_defaults(func=cmd_detect)

    p = sub.add_parser("evaluate", help="score alerts against attack labels")
    common(p, "report")
    p.add_argument("--alerts", required=True)
    p.add_argument("--labels", required=True)
    p.add_argument("--processes", type=int, nargs="*", help="process ids to list in FP tables")
    p.add_argument("--grace-minutes", type=float)
    p.add_argument("--lt-minutes", type=float)
    p.add_argument("--no-plot", action="store_true")
    p.add_argument("--seed", type=int)
    p.add_argument("--process")
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("plot-errors", help="render error/rating dumps to PNG")
    common(p, "plots")
    p.add_argument("--errors", required=True, help="errors_p<k>.csv from detect")
    p.add_argument("--ratings")
    p.add_argument("--labels")
    p.add_argument("--alerts")
    p.add_argument("--threshold", type=float, default=0.3)
    p.add_argument("--per-tag", action="store_true")
    p.add_argument("--seed", type=int)
    p.add_argument("--process")
    p.set_defaults(func=cmd_plot_errors)
    return parser


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except (UsageError, DataError, SpecError, TrainingDiverged, ValueError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
