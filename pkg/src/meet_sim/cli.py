"""``meet-sim`` experiment runner: config in, provenance-stamped CSV/JSON out."""

from __future__ import annotations

import argparse
import csv
import io
import itertools
import json
import math
import subprocess
import sys
import time
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from . import __version__
from .config import (
    ConfigError,
    ExperimentConfig,
    config_hash,
    dump_config,
    parse_config,
    resolve_param,
    with_param,
)
from .deployment import DeploymentPlanner, DeploymentScenario, InfeasibleScenario, SlotDraws, energy_cost
from .engine import RngStream
from .offload import POLICY_TRACE_HEADER, simulate as simulate_offload, wilson_interval

HASH_PREFIX = "# config_sha256="

OFFLOAD_COLUMNS = ["arrival_rate", "replicas", "tasks", "completed", "ratio", "ci_lo", "ci_hi"]
FRONTIER_COLUMNS = ["lambda_opv", "lambda_es", "lambda_inv", "pb_hat", "ci"]
OPTIMUM_COLUMNS = ["lambda_opv", "lambda_es", "lambda_inv", "cost", "power_kw"]
TIMELINE_COLUMNS = ["t", "version", "top1", "topk", "clients_active", "uploads_dropped"]
FEDSIM_SUMMARY_COLUMNS = ["sweep", "rep", "time_to_threshold", "final_top1", "final_topk", "rounds", "uploads_dropped"]


class ProvenanceError(ValueError):
    """Result files were produced from different configurations."""


def sub_seed(master: int, sweep_idx: int, rep_idx: int) -> int:
    """64-bit seed for one grid cell; depends only on its arguments."""
    ss = np.random.SeedSequence(master, spawn_key=(sweep_idx, rep_idx))
    return int(ss.generate_state(1, np.uint64)[0])


def sweep_points(cfg: ExperimentConfig) -> list[dict]:
    """Cartesian product of the sweep lists, first key varying slowest."""
    keys = list(cfg.sweep)
    return [dict(zip(keys, values)) for values in itertools.product(*(cfg.sweep[k] for k in keys))]


def _block_for(cfg: ExperimentConfig, point: dict):
    block = cfg.block()
    for key, value in point.items():
        block = with_param(block, key, value)
    return block


def _fmt(x) -> str:
    if isinstance(x, (bool, np.bool_)):
        return str(bool(x)).lower()
    if isinstance(x, (int, np.integer)):
        return str(int(x))
    if isinstance(x, (float, np.floating)):
        return "inf" if math.isinf(x) else format(float(x), ".10g")
    return str(x)


def write_csv(path: Path, digest: str, header: Sequence[str], rows) -> None:
    buf = io.StringIO()
    buf.write(f"{HASH_PREFIX}{digest}\n")
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    for row in rows:
        w.writerow([_fmt(x) for x in row])
    path.write_text(buf.getvalue(), encoding="utf-8")


def read_csv(path, expected_hash: Optional[str] = None) -> tuple[str, list, list]:
    """Return ``(config hash, header, rows)``; raises on a missing or unexpected hash."""
    lines = Path(path).read_text(encoding="utf-8").splitlines()
    if not lines or not lines[0].startswith(HASH_PREFIX):
        raise ProvenanceError(f"{path}: missing config hash line")
    digest = lines[0][len(HASH_PREFIX):].strip()
    if expected_hash is not None and digest != expected_hash:
        raise ProvenanceError(f"{path}: config hash {digest[:12]} does not match {expected_hash[:12]}")
    rows = list(csv.reader(lines[1:]))
    return digest, rows[0], rows[1:]


def combine_results(paths: Sequence) -> tuple[str, list, list]:
    """Concatenate result CSVs that share one config hash and header."""
    digest, header, rows = read_csv(paths[0])
    for p in paths[1:]:
        _, h, r = read_csv(p, expected_hash=digest)
        if h != header:
            raise ProvenanceError(f"{p}: header {h} differs from {header}")
        rows.extend(r)
    return digest, header, rows


def version_string() -> str:
    try:
        out = subprocess.run(
            ["git", "describe", "--always", "--dirty"],
            cwd=Path(__file__).resolve().parent,
            capture_output=True,
            text=True,
            timeout=5,
        )
        if out.returncode == 0 and out.stdout.strip():
            return f"{__version__}+g{out.stdout.strip()}"
    except (OSError, subprocess.SubprocessError):
        pass
    return __version__


# -- per-job workers (top level so they pickle) ------------------------------------


def _offload_job(block, seed: int, trace_path: Optional[str], policy_path: Optional[str]) -> dict:
    trace = open(trace_path, "w", encoding="utf-8") if trace_path else None
    policy = open(policy_path, "w", encoding="utf-8") if policy_path else None
    try:
        if policy is not None:
            policy.write(POLICY_TRACE_HEADER + "\n")
        m = simulate_offload(block, seed, trace=trace, policy_trace=policy)
    finally:
        for fh in (trace, policy):
            if fh is not None:
                fh.close()
    return {"tasks": m.denominator, "completed": m.tasks_completed}


def _fedsim_job(block, seed: int, task_seed: int, trace_path: Optional[str]) -> dict:
    from .fedsim import TASK_STREAM, fl_vehicles, make_synthetic_task, run_fl

    task = make_synthetic_task(block.features, block.classes, block.separation,
                               RngStream(task_seed, TASK_STREAM), block.eval_size)
    trace = open(trace_path, "w", encoding="utf-8") if trace_path else None
    try:
        tl = run_fl(fl_vehicles(block, seed), block, task, seed, trace=trace)
    finally:
        if trace is not None:
            trace.close()
    return {
        "rows": list(tl.rows()),
        "time_to_threshold": tl.time_to_threshold(block.accuracy_threshold, block.threshold_metric),
        "final_top1": tl.top1[-1],
        "final_topk": tl.topk[-1],
        "rounds": len(tl.rounds),
        "uploads_dropped": tl.uploads_dropped[-1],
    }


def _deploy_job(block, draws_seed: int, slots: int) -> dict:
    scenario = DeploymentScenario(
        rows=block.rows,
        cols=block.cols,
        cell_radius=block.cell_radius,
        lambda_opv=block.lambda_opv,
        gamma=tuple(block.gamma) if block.gamma is not None else None,
        capacities=(block.capacities.es, block.capacities.inv, block.capacities.opv),
        base_load=block.base_load,
        alpha=block.alpha,
        target_pb=block.target_pb,
        inv_placement=block.inv_placement,
    )
    draws = SlotDraws(slots, scenario.n_cells, RngStream(draws_seed, 0))
    planner = DeploymentPlanner(tuple(block.lambda_es), block.inv_grid_step, block.inv_search_max, slots)
    try:
        planner.fit(scenario, draws=draws)
    except InfeasibleScenario as exc:
        return {"infeasible": str(exc)}
    es, inv, cost = planner.optimum_
    n = scenario.n_cells
    return {
        "frontier": [(p.lambda_opv, p.lambda_es, p.lambda_inv, p.pb_hat, p.ci) for p in planner.frontier_],
        "infeasible_es": planner.infeasible_,
        "optimum": (block.lambda_opv, es, inv, cost, energy_cost(n, inv * n, block.p_bs_kw, block.p_inv_kw)),
    }


# -- studies -----------------------------------------------------------------------


def _extra_keys(cfg: ExperimentConfig, columns: Sequence[str]) -> list[str]:
    """Swept keys that the fixed CSV schema does not already show."""
    block = cfg.block()
    return [k for k in cfg.sweep if resolve_param(block, k)[-1] not in columns]


def _map(fn, jobs: list, parallel: int) -> list:
    if parallel > 1 and len(jobs) > 1:
        with ProcessPoolExecutor(max_workers=parallel) as pool:
            return list(pool.map(fn, *zip(*jobs)))
    return [fn(*job) for job in jobs]


def run_study(cfg: ExperimentConfig, out: Path, parallel: int = 1, trace: bool = False,
              policy_trace: bool = False) -> dict:
    out = Path(out)
    out.mkdir(parents=True, exist_ok=True)
    started = time.perf_counter()
    digest = config_hash(cfg)
    points = sweep_points(cfg) or [{}]
    blocks = [_block_for(cfg, pt) for pt in points]
    reps = range(cfg.replications)
    files = []
    summary = {"study": cfg.study, "config_sha256": digest, "version": version_string(),
               "seed": cfg.seed, "sweep_points": len(points), "replications": cfg.replications}

    def path(kind, i, r, ext):
        return str(out / f"{kind}_s{i}_r{r}.{ext}") if trace or kind == "policy" else None

    if cfg.study == "offload":
        jobs = [(b, sub_seed(cfg.seed, i, r), path("trace", i, r, "log") if trace else None,
                 path("policy", i, r, "csv") if policy_trace and b.scheme == "v2v" else None)
                for i, b in enumerate(blocks) for r in reps]
        results = _map(_offload_job, jobs, parallel)
        extra = _extra_keys(cfg, OFFLOAD_COLUMNS)
        rows = []
        for i, (pt, b) in enumerate(zip(points, blocks)):
            chunk = results[i * cfg.replications:(i + 1) * cfg.replications]
            n = sum(c["tasks"] for c in chunk)
            k = sum(c["completed"] for c in chunk)
            if n == 0:
                raise InfeasibleScenario(f"sweep point {pt or 'default'} produced no tasks")
            lo, hi = wilson_interval(k, n)
            rows.append([pt[e] for e in extra] + [b.arrival_rate, b.replicas, n, k, k / n, lo, hi])
        write_csv(out / "offload.csv", digest, extra + OFFLOAD_COLUMNS, rows)
        files.append("offload.csv")

    elif cfg.study == "deploy":
        # every sweep point shares the same slot draws (common random numbers);
        # replications extend the number of slots instead of repeating the search
        slots = cfg.deploy.slots * cfg.replications
        jobs = [(b, sub_seed(cfg.seed, 0, 0), slots) for b in blocks]
        results = _map(_deploy_job, jobs, parallel)
        bad = [(pt, res["infeasible"]) for pt, res in zip(points, results) if "infeasible" in res]
        if bad:
            pt, msg = bad[0]
            raise InfeasibleScenario(f"sweep point {pt or 'default'}: {msg}")
        extra = _extra_keys(cfg, FRONTIER_COLUMNS)
        frontier, optimum = [], []
        for pt, res in zip(points, results):
            lead = [pt[e] for e in extra]
            frontier.extend(lead + list(row) for row in res["frontier"])
            optimum.append(lead + list(res["optimum"]))
        write_csv(out / "frontier.csv", digest, extra + FRONTIER_COLUMNS, frontier)
        write_csv(out / "optimum.csv", digest, extra + OPTIMUM_COLUMNS, optimum)
        files += ["frontier.csv", "optimum.csv"]
        summary["infeasible_lambda_es"] = [res["infeasible_es"] for res in results]

    else:
        # the toy learning task is shared across sweep points so that they are paired
        jobs = [(b, sub_seed(cfg.seed, i, r), sub_seed(cfg.seed, 0, r), path("trace", i, r, "log") if trace else None)
                for i, b in enumerate(blocks) for r in reps]
        results = _map(_fedsim_job, jobs, parallel)
        extra = _extra_keys(cfg, [])
        srows = []
        for j, res in enumerate(results):
            i, r = divmod(j, cfg.replications)
            name = f"timeline_s{i}_r{r}.csv"
            write_csv(out / name, digest, TIMELINE_COLUMNS, res["rows"])
            files.append(name)
            srows.append([points[i][e] for e in extra] + [i, r, res["time_to_threshold"], res["final_top1"],
                                                         res["final_topk"], res["rounds"], res["uploads_dropped"]])
        write_csv(out / "fedsim_summary.csv", digest, extra + FEDSIM_SUMMARY_COLUMNS, srows)
        files.append("fedsim_summary.csv")

    echo = f"{HASH_PREFIX}{digest}\n" + dump_config(cfg)
    (out / "config.resolved.yaml").write_text(echo, encoding="utf-8")
    files.append("config.resolved.yaml")
    summary["files"] = files
    summary["wall_time_s"] = round(time.perf_counter() - started, 3)
    (out / "summary.json").write_text(json.dumps(summary, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    return summary


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="meet-sim", description="Run a deploy, offload or fedsim study.")
    ap.add_argument("study", choices=["deploy", "offload", "fedsim"])
    ap.add_argument("--config", required=True, help="YAML experiment config")
    ap.add_argument("--seed", type=int, help="override the master seed")
    ap.add_argument("--out", help="output directory (default: config 'output')")
    ap.add_argument("--parallel", type=int, default=1, help="worker processes for the sweep grid")
    ap.add_argument("--trace", action="store_true", help="write per-run event traces")
    ap.add_argument("--policy-trace", action="store_true", help="write bandit selection/reward CSVs (offload)")
    return ap


def main(argv: Optional[Sequence[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        cfg = parse_config(args.config)
        if cfg.study != args.study:
            raise ConfigError(f"{args.config}: study is {cfg.study!r} but {args.study!r} was requested")
        if args.seed is not None:
            data = cfg.model_dump()
            data["seed"] = args.seed
            try:
                cfg = ExperimentConfig.model_validate(data)
            except Exception as exc:
                raise ConfigError(f"--seed: {exc}") from None
        if args.parallel < 1:
            raise ConfigError("--parallel must be >= 1")
        out = Path(args.out if args.out else cfg.output)
        summary = run_study(cfg, out, args.parallel, args.trace, args.policy_trace)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    except InfeasibleScenario as exc:
        print(f"infeasible scenario: {exc}", file=sys.stderr)
        return 3
    print(f"{summary['study']}: wrote {len(summary['files'])} files to {out} in {summary['wall_time_s']} s")
    return 0


if __name__ == "__main__":
    sys.exit(main())
