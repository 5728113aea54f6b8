"""Command-line entry point: run, ablate, eval, dump-attn.

Exit codes: 0 success, 2 configuration error, 3 numerical error, 4 nothing to
evaluate.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import os
import sys
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path

import numpy as np

from isac import io
from isac.engine import RunConfig, class_palette_ids, run
from isac.errors import ConfigError, NumericalError
from isac.evaluation import BenchPrompt, accuracy, detect_ensemble, prompt_config, synthetic_suite
from isac.losses import LOSS_KINDS, SCHEDULES
from isac.toybench import TOY_PALETTE

EXIT_OK, EXIT_CONFIG, EXIT_NUMERIC, EXIT_EMPTY = 0, 2, 3, 4

RUN_KEYS = {f.name: f.default for f in dataclasses.fields(RunConfig)}
EXTRA_KEYS = {
    "out": "isac-out",
    "seed": None,
    "seeds": [0],
    "schedules": ["E"],
    "losses": ["MPO"],
    "baseline": False,
    "suite_seed": 0,
    "per_cell": 5,
    "jobs": None,
}
RESULT_COLUMNS = ("config_id", "prompt_id", "seed", "kind", "size_param", "accuracy")
AGGREGATE_COLUMNS = ("config_id", "runs", "failures", "accuracy", "multi_class", "multi_instance")
DUMP_KEYS = ("sa", "ca", "caprop", "fg", "masks", "clsmasks", "assignment")


def load_config_file(path) -> dict:
    """Parse a JSON config object and reject unknown keys."""
    if path is None:
        return {}
    try:
        data = json.loads(Path(path).read_text())
    except (OSError, ValueError) as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    if not isinstance(data, dict):
        raise ConfigError("config file must hold a key-value object")
    unknown = sorted(set(data) - set(RUN_KEYS) - set(EXTRA_KEYS))
    if unknown:
        raise ConfigError(f"unknown config keys: {', '.join(unknown)}")
    return data


def build_run_config(data: dict, **overrides) -> RunConfig:
    kw = {k: v for k, v in data.items() if k in RUN_KEYS}
    kw.update({k: v for k, v in overrides.items() if v is not None})
    try:
        return RunConfig(**kw)
    except (TypeError, ValueError) as exc:
        if isinstance(exc, ConfigError):
            raise
        raise ConfigError(str(exc)) from exc


def resolve_seed(flag, data: dict) -> int:
    """--seed, then the config file, then $ISAC_SEED, then 0."""
    for value in (flag, data.get("seed"), os.environ.get("ISAC_SEED")):
        if value is not None:
            try:
                return int(value)
            except ValueError as exc:
                raise ConfigError(f"seed must be an integer, got {value!r}") from exc
    return 0


def prompt_of(config: RunConfig) -> dict:
    kind = "multi-class" if len(config.classes) > 1 else "multi-instance"
    return {
        "kind": kind,
        "category": config.category,
        "classes": list(config.classes),
        "counts": list(config.counts),
        "class_ids": list(class_palette_ids(config)),
        "text": config.prompt_text(),
    }


def write_run(config: RunConfig, seed: int, out: Path, prompt_id: str = "prompt") -> dict:
    """Execute one run and write its artifacts; returns the manifest."""
    rec = run(config, seed)
    out.mkdir(parents=True, exist_ok=True)
    io.atomic_write(out / "losses.csv", io.losses_csv(rec.reports, rec.hashes))
    io.write_ppm(out / "image.ppm", rec.image)
    files = ["losses.csv", "image.ppm"]
    if rec.ground_truth is not None:
        gt = [{"class": c, "center": list(xy), "radius": r} for c, xy, r in rec.ground_truth]
        io.atomic_write(out / "ground_truth.json", io.dumps_kv({"instances": gt}))
        files.append("ground_truth.json")
    for t, dump in sorted(rec.dumps.items()):
        for key in DUMP_KEYS:
            if key in dump:
                name = f"{key}_{t}.isac"
                io.write_tensor(out / name, dump[key])
                files.append(name)
    cfg = config.to_dict()
    manifest = {
        "config": cfg,
        "config_hash": io.config_hash(cfg),
        "seed": seed,
        "prompt_id": prompt_id,
        "prompt": prompt_of(config),
        "palette": TOY_PALETTE.tolist(),
        "hashes": {name: io.file_hash(out / name) for name in files},
    }
    io.atomic_write(out / "manifest.json", io.dumps_kv(manifest))
    return manifest


def evaluate_dir(run_dir: Path) -> dict:
    """Recompute detection, voting and accuracy from a stored run."""
    manifest = json.loads((run_dir / "manifest.json").read_text())
    p = manifest["prompt"]
    category = p["category"] or "prompt"
    prompt = BenchPrompt(
        manifest["prompt_id"], p["kind"], category, tuple(p["classes"]), tuple(p["counts"]), p["text"]
    )
    # palette index of each class, so detections map back to prompt classes
    names = [f"#{i}" for i in range(max(p["class_ids"]) + 1)]
    for name, idx in zip(p["classes"], p["class_ids"]):
        names[idx] = name
    palette = np.asarray(manifest.get("palette", TOY_PALETTE.tolist()), dtype=np.float64)
    image = io.read_ppm(run_dir / "image.ppm")
    acc = accuracy(detect_ensemble(image, palette), prompt, {category: names})
    return {
        "config_id": manifest.get("config_id", ""),
        "prompt_id": prompt.prompt_id,
        "seed": manifest["seed"],
        "kind": prompt.kind,
        "size_param": prompt.size_param,
        "accuracy": acc,
    }


def aggregate(rows, failures: dict, order=()) -> list[dict]:
    """Per-config means, in ``order`` first, then in order of appearance."""
    out = []
    for cid in dict.fromkeys(list(order) + [r["config_id"] for r in rows] + list(failures)):
        mine = [r for r in rows if r["config_id"] == cid]

        def mean(kind=None):
            vals = [r["accuracy"] for r in mine if kind is None or r["kind"] == kind]
            return float(np.mean(vals)) if vals else float("nan")

        out.append(
            {
                "config_id": cid,
                "runs": len(mine),
                "failures": failures.get(cid, 0),
                "accuracy": mean(),
                "multi_class": mean("multi-class"),
                "multi_instance": mean("multi-instance"),
            }
        )
    return out


def _cell(args):
    cid, config, prompt, seed, out = args
    run_dir = Path(out) / cid / prompt.prompt_id / f"seed{seed}"
    try:
        manifest = write_run(prompt_config(config, prompt), seed, run_dir, prompt.prompt_id)
    except (NumericalError, ConfigError) as exc:
        return {"config_id": cid, "prompt_id": prompt.prompt_id, "seed": seed, "error": str(exc)}
    manifest["config_id"] = cid
    io.atomic_write(run_dir / "manifest.json", io.dumps_kv(manifest))
    return evaluate_dir(run_dir)


def parse_list(text, allowed, what) -> list[str]:
    items = [s.strip() for s in str(text).split(",") if s.strip()] if isinstance(text, str) else list(text)
    bad = [s for s in items if s not in allowed]
    if bad or not items:
        raise ConfigError(f"unknown {what} id(s): {', '.join(bad) or '(empty)'}")
    return items


def ablation_configs(base: RunConfig, schedules, losses, baseline: bool) -> dict:
    cells = {}
    if baseline:
        cells["baseline"] = dataclasses.replace(base, eta=0.0)
    for s in schedules:
        for k in losses:
            cells[f"{s}-{k}"] = dataclasses.replace(base, schedule=s, loss_kind=k)
    return cells


def write_tables(out: Path, rows, failures, order=()) -> tuple[Path, Path]:
    rank = {cid: i for i, cid in enumerate(order)}
    rows = sorted(rows, key=lambda r: (rank.get(r["config_id"], len(rank)), r["config_id"], r["prompt_id"], r["seed"]))
    results, agg = out / "results.csv", out / "aggregate.csv"
    io.atomic_write(results, io.rows_csv(rows, RESULT_COLUMNS))
    io.atomic_write(agg, io.rows_csv(aggregate(rows, failures, order), AGGREGATE_COLUMNS))
    return results, agg


# commands


def cmd_run(args) -> int:
    data = load_config_file(args.config)
    config = build_run_config(data, eta=args.eta)
    seed = resolve_seed(args.seed, data)
    out = Path(args.out or data.get("out", EXTRA_KEYS["out"]))
    write_run(config, seed, out)
    print(out / "manifest.json")
    return EXIT_OK


def cmd_dump_attn(args) -> int:
    data = load_config_file(args.config)
    base = build_run_config(data, eta=args.eta)
    steps = [int(s) for s in args.timesteps.split(",")] if args.timesteps else [base.T]
    config = build_run_config({**data, "dump_timesteps": steps}, eta=args.eta)
    seed = resolve_seed(args.seed, data)
    out = Path(args.out or data.get("out", EXTRA_KEYS["out"]))
    write_run(config, seed, out)
    print(out / "manifest.json")
    return EXIT_OK


def cmd_ablate(args) -> int:
    data = load_config_file(args.config)
    base = build_run_config(data, eta=args.eta)
    schedules = parse_list(args.schedules or data.get("schedules", EXTRA_KEYS["schedules"]), SCHEDULES, "schedule")
    losses = parse_list(args.losses or data.get("losses", EXTRA_KEYS["losses"]), LOSS_KINDS, "loss")
    seeds_raw = args.seeds if args.seeds is not None else data.get("seeds", EXTRA_KEYS["seeds"])
    try:
        seeds = [int(s) for s in (seeds_raw.split(",") if isinstance(seeds_raw, str) else seeds_raw)]
    except ValueError as exc:
        raise ConfigError(f"bad seed list {seeds_raw!r}") from exc
    suite = synthetic_suite(int(data.get("suite_seed", 0)), int(data.get("per_cell", 5)))
    if args.prompts is not None:
        suite.prompts = suite.prompts[: args.prompts]
    baseline = args.baseline or bool(data.get("baseline", False))
    configs = ablation_configs(base, schedules, losses, baseline)
    out = Path(args.out or data.get("out", EXTRA_KEYS["out"]))
    jobs = args.jobs or data.get("jobs") or os.cpu_count() or 1
    cells = [(cid, cfg, p, s, str(out)) for cid, cfg in configs.items() for p in suite.prompts for s in seeds]
    if jobs > 1:
        with ProcessPoolExecutor(jobs) as pool:
            rows = list(pool.map(_cell, cells, chunksize=2))
    else:
        rows = [_cell(c) for c in cells]
    failures = {cid: 0 for cid in configs}
    for r in rows:
        if "error" in r:
            failures[r["config_id"]] += 1
            print(f"warning: {r['config_id']}/{r['prompt_id']}/seed{r['seed']}: {r['error']}", file=sys.stderr)
    ok = [r for r in rows if "error" not in r]
    for path in write_tables(out, ok, failures, list(configs)):
        print(path)
    return EXIT_OK


def cmd_eval(args) -> int:
    root = Path(args.runs)
    rows, failures = [], {}
    manifests = sorted(root.rglob("manifest.json")) if root.is_dir() else []
    for m in manifests:
        try:
            rows.append(evaluate_dir(m.parent))
        except (OSError, ValueError, KeyError) as exc:
            print(f"warning: skipping {m.parent}: {exc}", file=sys.stderr)
    if not rows:
        print(f"error: no evaluable runs under {root}", file=sys.stderr)
        return EXIT_EMPTY
    for path in write_tables(Path(args.out or root), rows, failures):
        print(path)
    return EXIT_OK


def _config_help() -> str:
    lines = ["config file keys (JSON object) and defaults:"]
    for k, v in {**RUN_KEYS, **EXTRA_KEYS}.items():
        v = v if not isinstance(v, dataclasses._MISSING_TYPE) else "(required)"
        lines.append(f"  {k} = {json.dumps(v, default=str)}")
    lines.append("seed precedence: --seed > config 'seed' > $ISAC_SEED > 0")
    lines.append("exit codes: 0 ok, 2 config error, 3 numerical error, 4 nothing evaluated")
    return "\n".join(lines)


def build_parser() -> argparse.ArgumentParser:
    fmt = argparse.RawDescriptionHelpFormatter

    class Fmt(argparse.ArgumentDefaultsHelpFormatter, fmt):
        pass

    parser = argparse.ArgumentParser(prog="isac", description=__doc__, epilog=_config_help(), formatter_class=Fmt)
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, need_config=True):
        p.add_argument("config", nargs=None if need_config else "?", help="JSON config file")
        p.add_argument("--seed", type=int, default=None, help="run seed (falls back to config, then $ISAC_SEED)")
        p.add_argument("--out", default=None, help="output directory (default: config 'out' or isac-out)")
        p.add_argument("--eta", type=float, default=None, help="step size override (config default 0.01)")

    p = sub.add_parser("run", help="one sampling run", formatter_class=Fmt, epilog=_config_help())
    common(p)
    p.set_defaults(func=cmd_run)

    p = sub.add_parser("dump-attn", help="run and dump attention tensors", formatter_class=Fmt)
    common(p)
    p.add_argument("--timesteps", default=None, help="comma-separated timesteps to dump (default: T)")
    p.set_defaults(func=cmd_dump_attn)

    p = sub.add_parser("ablate", help="schedule x loss ablation over the synthetic suite", formatter_class=Fmt)
    common(p)
    p.add_argument("--schedules", default=None, help="comma-separated schedule ids from A..E (default: E)")
    p.add_argument("--losses", default=None, help="comma-separated overlap ids from MPO,MAE,KL,IoU (default: MPO)")
    p.add_argument("--seeds", default=None, help="comma-separated seeds (default: 0)")
    p.add_argument("--baseline", action="store_true", help="add an eta = 0 row")
    p.add_argument("--prompts", type=int, default=None, help="use only the first N suite prompts")
    p.add_argument("--jobs", type=int, default=None, help="worker processes (default: number of processors)")
    p.set_defaults(func=cmd_ablate)

    p = sub.add_parser("eval", help="re-evaluate stored runs", formatter_class=Fmt)
    p.add_argument("--runs", required=True, help="directory searched for run manifests")
    p.add_argument("--out", default=None, help="where to write CSVs (default: --runs)")
    p.set_defaults(func=cmd_eval)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_CONFIG if exc.code else EXIT_OK
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except NumericalError as exc:
        print(f"numerical error: {exc}", file=sys.stderr)
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())
