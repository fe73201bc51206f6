"""Command-line driver: ``tmlab {train,sample,eval,rank,check}``.

Exit codes: 0 ok, 1 invalid config or arguments, 2 a check failed,
3 numeric failure (divergence, non-finite state, singular step).
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import platform
import sys
import time
from contextlib import nullcontext
from pathlib import Path

import numpy as np

from tmlab import __version__
from tmlab.config import MANIFEST_FORMAT, ConfigError, ExperimentConfig, load_config
from tmlab.evaluation import MetricTable, energy_distance, gen_dataset, rank_aggregate, sliced_wasserstein, write_rank_csv
from tmlab.model import Model
from tmlab.process import SingularityError
from tmlab.rng import Streams
from tmlab.samplers import run_sampler
from tmlab.training import TrainingDiverged, train, write_trace_csv

log = logging.getLogger("tmlab")

EXIT_OK, EXIT_INVALID, EXIT_CHECK, EXIT_NUMERIC = 0, 1, 2, 3


class UsageError(ValueError):
    pass


# ---------------------------------------------------------------- helpers


def _versions() -> dict:
    import scipy

    return {"tmlab": __version__, "python": platform.python_version(), "numpy": np.__version__, "scipy": scipy.__version__}


def _write_json(path: Path, obj: dict) -> None:
    path.write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n", encoding="utf-8")


def _manifest(cfg: ExperimentConfig, command: str, outputs: dict, timing: dict | None = None, **extra) -> dict:
    # timing is kept apart so that everything else is reproducible byte for byte
    return {
        "format": MANIFEST_FORMAT,
        "command": command,
        "seed": cfg.seed,
        "config": cfg.to_json_dict(),
        "versions": _versions(),
        "outputs": outputs,
        **extra,
        "timing": timing or {},
    }


def _out_dir(args, cfg: ExperimentConfig | None) -> Path:
    out = args.out or (cfg.out_dir if cfg is not None else None)
    if out is None:
        raise UsageError("no output directory: pass --out or set out_dir in the config")
    path = Path(out)
    path.mkdir(parents=True, exist_ok=True)
    return path


def _config(args) -> ExperimentConfig:
    if not args.config:
        raise UsageError("--config is required for this command")
    return load_config(args.config, args.seed)


def datasets_for(cfg: ExperimentConfig):
    """Training set and held-out set, both derived from the config seed."""
    root = Streams(cfg.seed).child("data")
    d = cfg.dataset
    return gen_dataset(d.name, d.n, root.child("train").generator()), gen_dataset(d.name, d.heldout, root.child("heldout").generator())


def write_samples_csv(path: Path, x: np.ndarray) -> None:
    flat = np.asarray(x, dtype=np.float64).reshape(x.shape[0], -1)
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["chain_id"] + [f"coord_{j}" for j in range(flat.shape[1])])
        for i, row in enumerate(flat):
            w.writerow([i] + [repr(float(v)) for v in row])


def read_samples_csv(path: str | Path) -> np.ndarray:
    with open(path, newline="", encoding="utf-8") as fh:
        rows = list(csv.reader(fh))
    header = rows[0]
    if not header or header[0] != "chain_id" or any(not c.startswith("coord_") for c in header[1:]):
        raise UsageError(f"{path}: expected columns chain_id, coord_0, ...")
    return np.array([[float(v) for v in r[1:]] for r in rows[1:] if r], dtype=np.float64)


# ---------------------------------------------------------------- commands


def cmd_train(args) -> int:
    cfg = _config(args)
    out = _out_dir(args, cfg)
    data, _ = datasets_for(cfg)
    model = Model.init(cfg.build_model_config(), cfg.seed)
    tc = cfg.build_train_config()
    start = time.perf_counter()
    res = train(model, data, tc, Streams(cfg.seed).child("train"),
                log=lambda step, loss, ms: log.info("step %d loss %.5f (%.0f ms)", step, loss, ms))
    seconds = time.perf_counter() - start
    res.model.save(out / "checkpoint.bin", seed=cfg.seed, steps=tc.steps)
    write_trace_csv(out / "loss.csv", res.trace)
    final = res.trace[-1][1] if res.trace else None
    _write_json(out / "manifest.json", _manifest(
        cfg, "train", {"checkpoint": "checkpoint.bin", "loss_trace": "loss.csv"},
        timing={"train_seconds": round(seconds, 3)}, final_logged_loss=final,
    ))
    print(f"trained {tc.steps} steps in {seconds:.1f}s; checkpoint -> {out / 'checkpoint.bin'}")
    return EXIT_OK


def _sweep_cells(cfg: ExperimentConfig):
    s = cfg.sampler
    if s.sweep_c is None and s.sweep_tau is None:
        return [(None, None)]
    return [(c, tau) for c in (s.sweep_c or [s.c]) for tau in (s.sweep_tau or [s.tau])]


def cmd_sample(args) -> int:
    cfg = _config(args)
    out = _out_dir(args, cfg)
    ckpt = Path(args.checkpoint) if args.checkpoint else out / "checkpoint.bin"
    model, header = Model.load(ckpt)
    if model.kind != cfg.mode:
        raise UsageError(f"checkpoint holds a {model.kind} model but the config mode is {cfg.mode}")
    n = args.n or cfg.sampler.n
    cond = cfg.sampler.cond
    cells, outputs, timing = [], {}, {}
    for c, tau in _sweep_cells(cfg):
        spec = cfg.sampler_spec(c, tau)
        if spec.mode[:3] != model.kind[:3]:
            raise UsageError(f"sampler mode {spec.mode} needs a {spec.mode[:3]} model, checkpoint is {model.kind}")
        name = "samples.csv" if c is None else f"samples_c{spec.c:g}_tau{spec.tau}.csv"
        start = time.perf_counter()
        x = run_sampler(model, spec, Streams(cfg.seed).child("sample"), cond, n)
        timing[name] = round(time.perf_counter() - start, 3)
        write_samples_csv(out / name, x)
        cells.append({"file": name, "spec": spec.to_dict(), "n": n, "cond": cond, **model.counters.to_dict()})
        outputs[name] = name
        log.info("%s: backbone_nfe=%d head_nfe=%d", name, model.counters.backbone_nfe, model.counters.head_nfe)
    _write_json(out / "sample_manifest.json", _manifest(
        cfg, "sample", outputs, timing={"sample_seconds": timing}, checkpoint=str(ckpt.name), cells=cells,
    ))
    print(f"wrote {len(cells)} sample file(s) to {out}")
    return EXIT_OK


def compute_metrics(cfg: ExperimentConfig, samples: np.ndarray, reference: np.ndarray) -> list[tuple[str, bool, float]]:
    rng = Streams(cfg.seed).child("eval").generator()
    rows = []
    for name in cfg.eval.metrics:
        if name == "sliced_wasserstein":
            rows.append((name, False, sliced_wasserstein(samples, reference, cfg.eval.n_proj, rng)))
        else:
            rows.append((name, False, energy_distance(samples, reference)))
    return rows


def cmd_eval(args) -> int:
    cfg = _config(args)
    out = _out_dir(args, cfg)
    path = Path(args.samples) if args.samples else out / "samples.csv"
    samples = read_samples_csv(path)
    if args.reference:
        reference = read_samples_csv(args.reference)
    else:
        reference = datasets_for(cfg)[1].x.reshape(cfg.dataset.heldout, -1)
    metrics = compute_metrics(cfg, samples, reference)
    model_id = args.model_id or path.stem
    table = MetricTable([model_id], [(m, hib) for m, hib, _ in metrics], [[v for *_, v in metrics]])
    dest = Path(args.table) if args.table else out / "metrics.csv"
    table.to_csv(dest)
    for name, _, value in metrics:
        print(f"{model_id} {name} = {value:.6g}")
    return EXIT_OK


def cmd_rank(args) -> int:
    if not args.tables:
        raise UsageError("rank needs at least one metric table CSV")
    table = MetricTable.concat([MetricTable.from_csv(p) for p in args.tables])
    scores = rank_aggregate(table)
    dest = Path(args.out) / "rank.csv" if args.out else Path("rank.csv")
    dest.parent.mkdir(parents=True, exist_ok=True)
    write_rank_csv(dest, scores)
    for model, s in scores.items():
        print(f"{model} {s:.6g}")
    return EXIT_OK


def cmd_check(args) -> int:
    from tmlab.checks import SUITES, run_suite

    suites = args.suites or list(SUITES)
    for s in suites:
        if s not in SUITES:
            raise UsageError(f"unknown suite {s!r}; expected one of {SUITES}")
    results = []
    start = time.perf_counter()
    for s in suites:
        for r in run_suite(s, args.seed or 0):
            print(r.line(), flush=True)
            results.append(r)
    failed = [r for r in results if not r.passed]
    print(f"{len(results) - len(failed)}/{len(results)} checks passed in {time.perf_counter() - start:.1f}s")
    if args.out:
        Path(args.out).mkdir(parents=True, exist_ok=True)
        _write_json(Path(args.out) / "check_report.json", {"results": [r.to_dict() for r in results]})
    return EXIT_CHECK if failed else EXIT_OK


# ---------------------------------------------------------------- entry point


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="experiment config JSON (a run manifest also works)")
    common.add_argument("--out", help="output directory")
    common.add_argument("--seed", type=int, help="override the config seed")
    common.add_argument("--threads", type=int, help="limit BLAS threads")
    common.add_argument("-v", "--verbose", action="store_true")

    parser = argparse.ArgumentParser(prog="tmlab", description="Transition-matching toy lab")
    parser.add_argument("--version", action="version", version=f"tmlab {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)
    sub.add_parser("train", parents=[common], help="train a model; writes checkpoint.bin, loss.csv, manifest.json")

    p = sub.add_parser("sample", parents=[common], help="sample a checkpoint; writes samples CSV and NFE manifest")
    p.add_argument("--checkpoint", help="defaults to <out>/checkpoint.bin")
    p.add_argument("--n", type=int, help="number of chains (overrides sampler.n)")

    p = sub.add_parser("eval", parents=[common], help="score a sample CSV against held-out data")
    p.add_argument("--samples", help="defaults to <out>/samples.csv")
    p.add_argument("--reference", help="reference sample CSV instead of the held-out set")
    p.add_argument("--model-id")
    p.add_argument("--table", help="metric table path, defaults to <out>/metrics.csv")

    p = sub.add_parser("rank", parents=[common], help="aggregate metric tables into rank scores")
    p.add_argument("tables", nargs="*")

    p = sub.add_parser("check", parents=[common], help="run self-check suites")
    p.add_argument("suites", nargs="*", help="process, gradients, marginals, oracle_end2end (default: all)")
    return parser


_COMMANDS = {"train": cmd_train, "sample": cmd_sample, "eval": cmd_eval, "rank": cmd_rank, "check": cmd_check}


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_OK if exc.code == 0 else EXIT_INVALID
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    if args.threads is not None and args.threads < 1:
        print("error: --threads must be >= 1", file=sys.stderr)
        return EXIT_INVALID
    if args.threads:
        from threadpoolctl import threadpool_limits

        limiter = threadpool_limits(args.threads)
    else:
        limiter = nullcontext()
    with limiter:
        try:
            return _COMMANDS[args.command](args)
        except ConfigError as exc:
            print(f"error: {exc}", file=sys.stderr)
            return EXIT_INVALID
        except (TrainingDiverged, FloatingPointError, SingularityError) as exc:
            print(f"numeric failure: {exc}", file=sys.stderr)
            return EXIT_NUMERIC
        except (UsageError, ValueError, KeyError, FileNotFoundError) as exc:
            print(f"error: {exc}", file=sys.stderr)
            return EXIT_INVALID


if __name__ == "__main__":
    sys.exit(main())
