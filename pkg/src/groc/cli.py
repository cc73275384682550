"""Command-line entry point: ``groc generate | train | eval | report``.

Exit codes: 0 success, 2 usage error, 3 data error, 4 numerical failure.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import os
import sys
from concurrent.futures import ThreadPoolExecutor
from datetime import datetime, timezone
from pathlib import Path

import numpy as np

from . import __version__
from .autodiff import NumericalError
from .config import GRAPH_PRESETS, ConfigError, build_config, config_hash
from .encoder import embed, load_checkpoint, save_checkpoint
from .evaluation import (
    attack_evasion,
    attack_log,
    linear_probe_train,
    robust_accuracy,
    select_targets,
    surrogate_fit,
)
from .graph import GraphError, load_graph, save_graph, sbm_generate
from .trainer import train

log = logging.getLogger("groc")

EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 2, 3, 4
MAX_REPORTED_BUDGET = 5


class UsageError(Exception):
    pass


def _now() -> str:
    return datetime.now(timezone.utc).isoformat(timespec="seconds")


def _prepare_out(path: Path, force: bool) -> None:
    if path.exists() and any(path.iterdir()) and not force:
        raise UsageError(f"{path} exists and is not empty (use --force)")
    path.mkdir(parents=True, exist_ok=True)


def _write_manifest(out: Path, **fields) -> None:
    fields.setdefault("finished", _now())
    (out / "run_manifest.json").write_text(json.dumps(fields, indent=2, sort_keys=True) + "\n")


def write_embeddings(path: Path, z: np.ndarray) -> None:
    with open(path, "w") as fh:
        for row in z:
            fh.write(",".join(repr(float(x)) for x in row) + "\n")


def read_embeddings(path: Path) -> np.ndarray:
    return np.loadtxt(path, delimiter=",", ndmin=2)


# ---------------------------------------------------------------------------
# commands


def cmd_generate(args) -> None:
    params = dict(GRAPH_PRESETS[args.preset]) if args.preset else dict(GRAPH_PRESETS["sbm"])
    if args.sizes:
        params["block_sizes"] = [int(s) for s in args.sizes.split(",")]
    for flag, key in (("p_in", "p_in"), ("p_out", "p_out"), ("flip_prob", "flip_prob"),
                      ("feature_copies", "feature_copies")):
        if getattr(args, flag) is not None:
            params[key] = getattr(args, flag)
    out = Path(args.out)
    _prepare_out(out, args.force)
    g = sbm_generate(args.seed, **params)
    save_graph(g, out)
    meta = {"generator": "sbm", "seed": args.seed, **params}
    (out / "generator.json").write_text(json.dumps(meta, indent=2, sort_keys=True) + "\n")
    log.info("wrote %d nodes, %d edges to %s", g.num_nodes, g.num_edges, out)


def cmd_train(args) -> None:
    started = _now()
    cfg = build_config(args.method, args.preset, args.config or [], args.seed)
    g = load_graph(args.data)
    out = Path(args.out)
    _prepare_out(out, args.force)
    enc, head, report = train(g, cfg)
    z = embed(g, enc)
    if not np.all(np.isfinite(z)):
        raise NumericalError("non-finite embeddings")
    digest = config_hash(cfg)
    (out / "config.json").write_text(json.dumps(cfg.to_dict(), indent=2, sort_keys=True) + "\n")
    save_checkpoint(out / "checkpoint", enc, head,
                    {"method": cfg.method, "seed": cfg.seed, "config_hash": digest,
                     "dataset": Path(args.data).name})
    write_embeddings(out / "embeddings.csv", z)
    (out / "train_report.csv").write_text(report.to_csv())
    _write_manifest(out, config_hash=digest, seed=cfg.seed, method=cfg.method,
                    dataset=str(args.data), started=started,
                    artifacts={"config": "config.json", "checkpoint": "checkpoint",
                               "embeddings": "embeddings.csv", "report": "train_report.csv"})


def _attack_all(g, targets, budget, surrogate):
    threads = max(1, int(os.environ.get("GROC_THREADS", "1")))
    targets = sorted(int(t) for t in targets)
    if threads == 1:
        results = [attack_evasion(g, t, budget, surrogate) for t in targets]
    else:
        with ThreadPoolExecutor(threads) as pool:
            results = list(pool.map(lambda t: attack_evasion(g, t, budget, surrogate), targets))
    return dict(zip(targets, results))


def parse_budgets(text: str) -> list[int]:
    text = (text or "").strip()
    if not text:
        return []
    if ".." in text:
        lo, hi = text.split("..")
        return list(range(int(lo), int(hi) + 1))
    budgets = sorted({int(x) for x in text.split(",") if x.strip()})
    if any(b < 1 for b in budgets):
        raise UsageError("attack budgets must be >= 1")
    return budgets


def result_columns(budgets: list[int]) -> list[str]:
    top = max([MAX_REPORTED_BUDGET, *budgets])
    return ["method", "dataset", "seed", "Acc"] + [f"robust@{b}" for b in range(1, top + 1)]


def cmd_eval(args) -> None:
    started = _now()
    budgets = parse_budgets(args.attack_budgets)
    if budgets and not args.checkpoint:
        raise UsageError("--checkpoint is required when attack budgets are given")
    g = load_graph(args.data)
    if g.labels is None or g.splits is None:
        raise GraphError("evaluation needs labels.csv and splits.json")
    enc = manifest = None
    if args.checkpoint:
        enc, _, manifest = load_checkpoint(args.checkpoint)
    if args.embeddings:
        z = read_embeddings(Path(args.embeddings))
    elif enc is not None:
        z = embed(g, enc)
    else:
        raise UsageError("need --embeddings or --checkpoint")
    if z.shape[0] != g.num_nodes:
        raise GraphError("embedding rows do not match the graph")
    out = Path(args.out)
    _prepare_out(out, args.force)
    method = args.method or (manifest or {}).get("method", "unknown")
    dataset = args.dataset or Path(args.data).name
    train_idx, _, test_idx = g.splits
    probe = linear_probe_train(z, g.labels, train_idx, seed=args.seed)
    row = {"method": method, "dataset": dataset, "seed": args.seed,
           "Acc": repr(probe.accuracy(z, g.labels, test_idx))}
    artifacts = {"results": "results.csv"}
    if budgets:
        surrogate = surrogate_fit(g, seed=args.seed)
        targets = select_targets(surrogate, g, seed=args.seed)
        attacks = _attack_all(g, targets.all, max(budgets), surrogate)
        rep = robust_accuracy(enc, probe, g, targets.all, budgets, attacks=attacks)
        for b in budgets:
            row[f"robust@{b}"] = repr(rep.accuracy[b])
        (out / "attacks.json").write_text(attack_log(attacks))
        summary = {
            "easiest": targets.easiest, "hardest": targets.hardest, "random": targets.random,
            "accuracy": {str(b): v for b, v in rep.accuracy.items()},
            "accuracy_clean_correct": {str(b): v for b, v in rep.accuracy_clean_correct.items()},
        }
        (out / "targets.json").write_text(json.dumps(summary, indent=2, sort_keys=True) + "\n")
        artifacts.update({"attacks": "attacks.json", "targets": "targets.json"})
    cols = result_columns(budgets)
    with open(out / "results.csv", "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=cols, lineterminator="\n")
        writer.writeheader()
        writer.writerow({c: row.get(c, "") for c in cols})
    _write_manifest(out, seed=args.seed, method=method, dataset=str(args.data), started=started,
                    config_hash=(manifest or {}).get("config_hash"), artifacts=artifacts)


def cmd_report(args) -> None:
    files = sorted(Path(args.runs).rglob("results.csv"))
    if not files:
        raise GraphError(f"no results.csv under {args.runs}")
    header = None
    groups: dict[tuple[str, str], list[dict]] = {}
    for path in files:
        with open(path, newline="") as fh:
            reader = csv.DictReader(fh)
            if header is None:
                header = reader.fieldnames
            elif reader.fieldnames != header:
                raise GraphError(f"{path} has columns {reader.fieldnames}, expected {header}")
            for row in reader:
                groups.setdefault((row["method"], row["dataset"]), []).append(row)
    metrics = [c for c in header if c not in ("method", "dataset", "seed")]
    cols = ["method", "dataset", "n_seeds"]
    for m in metrics:
        cols += [f"{m}_mean", f"{m}_std"]
    with open(args.out, "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(cols)
        for (method, dataset), rows in sorted(groups.items()):
            line = [method, dataset, len(rows)]
            for m in metrics:
                vals = [float(r[m]) for r in rows if r[m] != ""]
                if vals:
                    line += [f"{np.mean(vals):.6f}", f"{np.std(vals):.6f}"]
                else:
                    line += ["", ""]
            writer.writerow(line)


# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="groc", description=__doc__.splitlines()[0])
    p.add_argument("--version", action="version", version=__version__)
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    gen = sub.add_parser("generate", help="write a synthetic SBM dataset")
    gen.add_argument("--preset", choices=sorted(GRAPH_PRESETS))
    gen.add_argument("--sizes", help="comma-separated block sizes")
    gen.add_argument("--p-in", dest="p_in", type=float)
    gen.add_argument("--p-out", dest="p_out", type=float)
    gen.add_argument("--flip-prob", dest="flip_prob", type=float)
    gen.add_argument("--feature-copies", dest="feature_copies", type=int)
    gen.add_argument("--seed", type=int, default=7)
    gen.add_argument("--out", required=True)
    gen.add_argument("--force", action="store_true")
    gen.set_defaults(func=cmd_generate)

    tr = sub.add_parser("train", help="train an encoder")
    tr.add_argument("--data", required=True)
    tr.add_argument("--method", required=True, choices=["grace", "gca-de", "grace-adv", "groc"])
    tr.add_argument("--preset", default="sbm", help="built-in preset name or JSON file")
    tr.add_argument("--config", action="append", help="key=value override or JSON file (repeatable)")
    tr.add_argument("--seed", type=int, default=0)
    tr.add_argument("--out", required=True)
    tr.add_argument("--force", action="store_true")
    tr.set_defaults(func=cmd_train)

    ev = sub.add_parser("eval", help="linear evaluation and robust accuracy")
    ev.add_argument("--data", required=True)
    ev.add_argument("--embeddings")
    ev.add_argument("--checkpoint")
    ev.add_argument("--attack-budgets", dest="attack_budgets", default="1,2,3,4,5",
                    help='comma list or range like "1..5"; empty for clean accuracy only')
    ev.add_argument("--seed", type=int, default=0)
    ev.add_argument("--method")
    ev.add_argument("--dataset")
    ev.add_argument("--out", required=True)
    ev.add_argument("--force", action="store_true")
    ev.set_defaults(func=cmd_eval)

    rp = sub.add_parser("report", help="aggregate results.csv files")
    rp.add_argument("--runs", required=True)
    rp.add_argument("--out", required=True)
    rp.set_defaults(func=cmd_report)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.INFO,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        args.func(args)
    except (UsageError, ConfigError) as exc:
        print(f"groc: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (GraphError, FileNotFoundError) as exc:
        print(f"groc: data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except NumericalError as exc:
        print(f"groc: numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    return 0


if __name__ == "__main__":
    sys.exit(main())
