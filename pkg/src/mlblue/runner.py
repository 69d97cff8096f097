"""End-to-end estimator execution, efficiency metrics, and file emission.

run_estimate turns an integer allocation into actual estimates: for every
group with a positive count it draws that many common-input samples of the
group's models, per replication, then combines them through the linear
estimator core one output at a time. Sample streams are keyed by (seed,
group index) with one counter block per replication, so results depend
only on (config, seed), never on execution order.

The module also owns the on-disk formats: allocation JSON, estimate-report
JSON, and the Pareto frontier CSV with its fixed header and 17-significant-
digit rows.
"""

from __future__ import annotations

import json
import subprocess
from dataclasses import dataclass

import numpy as np

from .allocate import Allocation, MosapSpec, systems_from_store
from .baselines import BaselineAllocation
from .config import ProblemConfig
from .estimator import blue_variance, combine_samples
from .models import GroupSet
from .synthetic import SyntheticSuite

__all__ = [
    "EstimateReport",
    "EvaluatorError",
    "spec_from_config",
    "run_estimate",
    "efficiency_report",
    "normalized_error",
    "allocation_to_json",
    "allocation_from_json",
    "baseline_to_json",
    "report_to_json",
    "frontier_to_csv",
    "emit_outputs",
]


class EvaluatorError(RuntimeError):
    """A model evaluation failed; the message names group and sample."""


@dataclass(frozen=True)
class EstimateReport:
    """What one estimation run produced.

    ``estimates`` has shape (replications, num_outputs) and holds the
    high-fidelity mean estimate of every replication. ``total_cost`` is the
    exact per-replication cost n @ group_costs. ``empirical_variance`` is
    the across-replication sample variance (None when replications == 1).
    """

    estimates: np.ndarray
    mean_estimate: np.ndarray
    predicted_variance: np.ndarray
    empirical_variance: np.ndarray | None
    total_cost: float
    allocation: np.ndarray
    replications: int
    seed: int


class _CommandEvaluator:
    """Talks to an external model over stdin/stdout, one JSON line each way.

    Request: {"model": <1-based id>, "input": [floats]}; response:
    {"values": [one float per output]}. A single process serves all
    requests for a run.
    """

    def __init__(self, argv, num_outputs):
        self.num_outputs = num_outputs
        try:
            self.proc = subprocess.Popen(
                argv, stdin=subprocess.PIPE, stdout=subprocess.PIPE,
                text=True, bufsize=1,
            )
        except OSError as exc:
            raise EvaluatorError(f"cannot start evaluator {argv!r}: {exc}") from exc

    def evaluate(self, group, z, where):
        out = np.empty((z.shape[0], len(group), self.num_outputs))
        for j in range(z.shape[0]):
            for a, model in enumerate(group):
                req = json.dumps({"model": int(model), "input": list(map(float, z[j]))})
                try:
                    self.proc.stdin.write(req + "\n")
                    self.proc.stdin.flush()
                    line = self.proc.stdout.readline()
                except (BrokenPipeError, OSError) as exc:
                    raise EvaluatorError(f"evaluator died at {where}, sample {j}") from exc
                if not line:
                    raise EvaluatorError(f"evaluator closed its output at {where}, sample {j}")
                try:
                    values = json.loads(line)["values"]
                    out[j, a, :] = np.asarray(values, dtype=float)
                except (KeyError, TypeError, ValueError) as exc:
                    raise EvaluatorError(
                        f"bad evaluator response at {where}, sample {j}: {line!r}"
                    ) from exc
        return out

    def close(self):
        if self.proc.stdin:
            self.proc.stdin.close()
        self.proc.wait(timeout=10)


def spec_from_config(config: ProblemConfig, mode: str | None = None,
                     tau_tilde: float | None = None) -> MosapSpec:
    """Build the allocation problem a config describes.

    Per-model sample caps become linear rows summing the counts of every
    group containing the model. For pareto mode the scale-free tau_tilde is
    divided by the 2-norm of the group cost vector, matching pareto_sweep.
    """
    systems = tuple(systems_from_store(config.groups, config.store))
    extra = []
    for i, cap in enumerate(config.model_caps):
        if cap is None:
            continue
        coeffs = np.array(
            [1.0 if (i + 1) in g else 0.0 for g in config.groups.groups]
        )
        extra.append((coeffs, float(cap)))
    mode = config.mode if mode is None else mode
    tau = None
    if mode == "pareto":
        if tau_tilde is None:
            tau_tilde = config.tau_tilde
        if tau_tilde is None:
            raise ValueError("pareto spec needs a tau_tilde value")
        tau = float(tau_tilde) / float(np.linalg.norm(config.groups.group_costs))
    return MosapSpec(
        mode=mode,
        groups=config.groups,
        systems=systems,
        budget=config.budget,
        tolerances=config.tolerances,
        tau=tau,
        extra_linear=tuple(extra),
    )


def _integer_counts(n, num_groups):
    n = np.asarray(n, dtype=float)
    if n.shape != (num_groups,):
        raise ValueError(f"allocation must have length {num_groups}")
    counts = np.rint(n).astype(int)
    if np.abs(n - counts).max(initial=0.0) > 1e-9 or np.any(counts < 0):
        raise ValueError("run_estimate needs a nonnegative integer allocation")
    return counts


def run_estimate(config: ProblemConfig, allocation, replications=None,
                 seed=None) -> EstimateReport:
    """Execute the estimator: draw group samples, combine, replicate.

    ``allocation`` is an Allocation or a plain per-group count vector.
    Within a group every model sees the identical input draw; groups and
    replications use disjoint streams. The reduction order is fixed, so
    identical (config, seed) gives bit-identical reports.
    """
    if isinstance(allocation, Allocation):
        n = allocation.n
    else:
        n = allocation
    counts = _integer_counts(n, config.groups.num_groups)
    reps = int(config.replications if replications is None else replications)
    the_seed = int(config.seed if seed is None else seed)
    if reps < 1:
        raise ValueError("replications must be >= 1")

    systems = systems_from_store(config.groups, config.store)
    m = config.num_outputs
    sampled = np.flatnonzero(counts)
    evaluator = None
    if config.evaluator["type"] == "command":
        evaluator = _CommandEvaluator(config.evaluator["argv"], m)
        dim = config.evaluator["input_dim"]
    elif config.suite is None:
        raise ValueError("synthetic evaluator needs a suite")

    estimates = np.empty((reps, m))
    try:
        for r in range(reps):
            draws = {}
            for k in sampled:
                group = config.groups.groups[k]
                if evaluator is None:
                    draws[k] = config.suite.draw_group(
                        group, int(counts[k]), the_seed, int(k), replication=r)
                else:
                    z = SyntheticSuite.factor_draws(
                        int(counts[k]), dim, the_seed, int(k), replication=r)
                    draws[k] = evaluator.evaluate(
                        group, z, f"group {k} (replication {r})")
            for s, system in enumerate(systems):
                block = {
                    k: draws[k][:, :, s]
                    for k in sampled
                    if k in system.usable_group_indices()
                }
                mu = combine_samples(system, counts.astype(float), block)
                estimates[r, s] = mu[0]
    finally:
        if evaluator is not None:
            evaluator.close()

    predicted = np.array(
        [blue_variance(system, counts.astype(float)) for system in systems]
    )
    empirical = None
    if reps > 1:
        empirical = estimates.var(axis=0, ddof=1)
    return EstimateReport(
        estimates=estimates,
        mean_estimate=estimates.mean(axis=0),
        predicted_variance=predicted,
        empirical_variance=empirical,
        total_cost=float(counts @ config.groups.group_costs),
        allocation=counts,
        replications=reps,
        seed=the_seed,
    )


def efficiency_report(estimate, reference) -> float | np.ndarray:
    """Normalized efficiency: log10(reference variance / achieved variance).

    0 means the run matched the best-case variance ``reference``; negative
    values measure decades of lost efficiency. ``estimate`` may be an
    EstimateReport (empirical variance preferred, predicted as fallback) or
    a plain variance value/array.
    """
    if isinstance(estimate, EstimateReport):
        var = estimate.empirical_variance
        if var is None:
            var = estimate.predicted_variance
    else:
        var = estimate
    var = np.asarray(var, dtype=float)
    ref = np.asarray(reference, dtype=float)
    if np.any(var <= 0) or np.any(ref <= 0):
        raise ValueError("variances must be positive")
    out = np.log10(ref / var)
    return float(out) if out.ndim == 0 else out


def normalized_error(variances, highfi_variances) -> float:
    """Worst-output relative error sqrt(V[estimate]/V[model 1 output])."""
    v = np.asarray(variances, dtype=float)
    ref = np.asarray(highfi_variances, dtype=float)
    if np.any(ref <= 0):
        raise ValueError("high-fidelity variances must be positive")
    return float(np.sqrt(v / ref).max())


def _gap_or_none(value):
    return None if not np.isfinite(value) else float(value)


def allocation_to_json(alloc: Allocation, groups: GroupSet) -> dict:
    """The allocation wire format; only sampled groups are listed."""
    sel = np.flatnonzero(alloc.n > 0)
    ints = alloc.is_integer
    return {
        "mode": alloc.mode,
        "n": [int(round(alloc.n[k])) if ints else float(alloc.n[k]) for k in sel],
        "groups": [list(groups.groups[k]) for k in sel],
        "total_cost": float(alloc.total_cost),
        "per_output_variance": [float(v) for v in alloc.per_output_variance],
        "solver": {
            "iterations": int(alloc.solver_iterations),
            "gap": _gap_or_none(alloc.solver_gap),
        },
    }


def allocation_from_json(data: dict, groups: GroupSet) -> Allocation:
    """Rebuild an Allocation from its wire format (solver fields kept)."""
    n = np.zeros(groups.num_groups)
    for ids, count in zip(data["groups"], data["n"]):
        n[groups.index_of(tuple(ids))] = count
    n.setflags(write=False)
    gap = data["solver"].get("gap")
    return Allocation(
        mode=data["mode"],
        n=n,
        per_output_variance=np.array(data["per_output_variance"]),
        total_cost=float(data["total_cost"]),
        is_integer=bool(np.all(np.rint(n) == n)),
        selected_groups=tuple(
            int(groups.index_of(tuple(ids))) for ids in data["groups"]
        ),
        objective_value=float("nan"),
        solver_iterations=int(data["solver"]["iterations"]),
        solver_gap=float("nan") if gap is None else float(gap),
    )


def baseline_to_json(baseline: BaselineAllocation, models) -> dict:
    """Baseline allocation in the same wire shape, plus a method tag.

    For 'mlmc' the groups are the level pairs (last level a singleton).
    For 'mfmc' the nested per-model counts decompose into suffix groups:
    sort models by count, the j-th group holds every model whose count
    reaches the j-th distinct level and draws the increment.
    """
    from .baselines import mlmc_levels

    if baseline.method == "mlmc":
        _, levels = mlmc_levels(baseline.model_subset, models.costs)
        groups = [list(level) for level in levels]
        counts = [int(v) for v in baseline.samples]
    else:
        subset = sorted(baseline.model_subset)
        per_model = {i: int(v) for i, v in zip(subset, baseline.samples)}
        distinct = sorted(set(per_model.values()))
        groups, counts = [], []
        prev = 0
        for level in distinct:
            members = [i for i in subset if per_model[i] >= level]
            if level > prev and members:
                groups.append(members)
                counts.append(level - prev)
            prev = level
    return {
        "method": baseline.method,
        "mode": "tolerance",
        "n": counts,
        "groups": groups,
        "total_cost": float(baseline.total_cost),
        "per_output_variance": [float(v) for v in baseline.predicted_variance],
        "solver": {"iterations": 0, "gap": None},
    }


def report_to_json(report: EstimateReport, alloc_json: dict | None = None) -> dict:
    out = {
        "mean_estimate": [float(v) for v in report.mean_estimate],
        "predicted_variance": [float(v) for v in report.predicted_variance],
        "empirical_variance": (
            None if report.empirical_variance is None
            else [float(v) for v in report.empirical_variance]
        ),
        "total_cost": float(report.total_cost),
        "replications": int(report.replications),
        "seed": int(report.seed),
    }
    if alloc_json is not None:
        out["allocation"] = alloc_json
    return out


def frontier_to_csv(frontier) -> str:
    """Fixed-format frontier CSV: ascending tau_tilde, 17 significant digits.

    Failed sweep points carry no cost or variance and are omitted.
    """
    lines = ["tau_tilde,cost,variance,normalized_error"]
    points = [p for p in frontier if p.get("status") != "failed"]
    for p in sorted(points, key=lambda p: p["tau_tilde"]):
        lines.append(
            "%.17g,%.17g,%.17g,%.17g"
            % (p["tau_tilde"], p["cost"], p["variance"], p["normalized_error"])
        )
    return "\n".join(lines) + "\n"


def _frontier_point_json(p):
    if p.get("status") == "failed":
        return {"tau_tilde": float(p["tau_tilde"]), "status": "failed",
                "error": p.get("error", "")}
    return {
        "tau_tilde": float(p["tau_tilde"]),
        "cost": float(p["cost"]),
        "variance": float(p["variance"]),
        "normalized_error": float(p["normalized_error"]),
        "status": p.get("status", "optimal"),
    }


def emit_outputs(obj, path, format: str = "json", groups: GroupSet | None = None):
    """Write an allocation, report, frontier, or plain dict to disk.

    Frontiers accept 'json' or 'csv'; everything else is JSON only.
    """
    if format not in ("json", "csv"):
        raise ValueError(f"unknown format {format!r}")
    if isinstance(obj, Allocation):
        if groups is None:
            raise ValueError("allocation emission needs the group set")
        payload = allocation_to_json(obj, groups)
    elif isinstance(obj, EstimateReport):
        payload = report_to_json(obj)
    elif isinstance(obj, list):
        if format == "csv":
            with open(path, "w", encoding="utf-8") as fh:
                fh.write(frontier_to_csv(obj))
            return
        payload = [_frontier_point_json(p) for p in obj]
    elif isinstance(obj, dict):
        payload = obj
    else:
        raise TypeError(f"cannot emit {type(obj).__name__}")
    if format == "csv":
        raise ValueError("csv format is only defined for frontiers")
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(payload, fh, indent=2)
        fh.write("\n")
