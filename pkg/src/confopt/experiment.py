"""Train, solve and evaluate: the pipeline behind the command-line tool."""

from __future__ import annotations

import itertools
import json
import os
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import bruteforce
from .config import CONSTRAINED, ExperimentConfig, resolved
from .confusion import ConfusionLayout
from .data import (
    Dataset,
    ExactEtaModel,
    SyntheticSpec,
    load_csv,
    sample_synthetic,
    spec_to_dict,
    split,
)
from .errors import ConfigError, LayoutMismatch
from .metrics import BoundConstraints, Constraint, ConstraintKind, Metric, MetricKind, choose_layout
from .oracle import CpeConfig, PluginOracle, WlrOracle, classifier_from_dict, train_cpe
from .solvers import (
    bisection,
    con_bisection,
    con_ellipsoid,
    con_gda,
    ellipsoid,
    frank_wolfe,
    gda,
    split_fw,
)

FEAS_TOL = 1e-6
# ellipsoid budgets count LMO calls; cuts outside the dual region are free, so iterations get headroom
ELLIPSOID_ITERATION_CAP = 10


def build_metric(cfg: ExperimentConfig) -> Metric:
    m = cfg.metric
    if m.kind is MetricKind.LINEAR:
        return Metric.linear(m.coeffs)
    if m.kind is MetricKind.RATIO:
        return Metric.ratio(m.numerator, m.denominator)
    if m.kind is MetricKind.MICRO_F1:
        return Metric.micro_f1(m.default_class)
    return Metric(m.kind)


def build_constraints(cfg: ExperimentConfig, priors) -> list[Constraint]:
    out = []
    for c in cfg.constraints:
        tau = np.asarray(priors, dtype=float) if c.tau == "priors" else c.tau
        if c.kind is ConstraintKind.LINEAR:
            out.append(Constraint.linear(c.coeffs, c.bound))
        else:
            out.append(Constraint(c.kind, target_class=c.target_class, tau=tau, eps=c.eps))
    return out


def synthetic_spec(cfg: ExperimentConfig) -> SyntheticSpec | None:
    s = cfg.data.synthetic
    if s is None:
        return None
    if s.kind == "Custom":
        return SyntheticSpec.custom(s.priors, s.components, seed=cfg.seed)
    return SyntheticSpec(s.kind, seed=cfg.seed)


def load_data(cfg: ExperimentConfig, seed: int) -> tuple[Dataset, Dataset]:
    """Training and test data for one trial.

    Synthetic sources draw ``n_samples`` training points and an independent
    test sample carrying exact class probabilities as soft labels.
    """
    spec = synthetic_spec(cfg)
    if spec is not None:
        train = sample_synthetic(spec, cfg.data.n_samples, seed=[seed, 0])
        test = sample_synthetic(spec, cfg.data.test_samples, seed=[seed, 1], soft_labels=True)
        return train, test
    data = load_csv(cfg.data.csv, cfg.data.n_classes, cfg.data.n_groups)
    if cfg.data.test_csv is not None:
        test = load_csv(cfg.data.test_csv, data.n_classes, data.n_groups)
        return data, test
    return split(data, cfg.data.split_fraction, seed=seed)


def make_layout(cfg: ExperimentConfig, metric, constraints, train: Dataset) -> ConfusionLayout:
    n, m = train.n_classes, train.n_groups
    masses = train.group_class_masses()
    if cfg.lmo.layout == "full":
        return ConfusionLayout.full(n, m, masses)
    if cfg.lmo.layout == "diagonal":
        return ConfusionLayout.diagonal(masses)
    return choose_layout(metric, constraints, n, m, masses)


def make_lmo(cfg: ExperimentConfig, train: Dataset, layout: ConfusionLayout):
    cpe = CpeConfig(**cfg.cpe.model_dump())
    if cfg.lmo.kind == "exact_eta":
        return PluginOracle(ExactEtaModel(synthetic_spec(cfg)), train, layout)
    model = train_cpe(train, cpe)
    if cfg.lmo.kind == "wlr":
        return WlrOracle(train, layout, cpe, fallback_model=model)
    return PluginOracle(model, train, layout)


def _call_solver(cfg: ExperimentConfig, metric, constraints, lmo, eta=None, eta_dual=None):
    s = cfg.solver
    T = s.budget
    if s.name == "fw":
        return frank_wolfe(metric, lmo, T=T)
    if s.name == "gda":
        return gda(metric, lmo, T=T, L=s.L, eta=eta, eta_dual=eta_dual)
    if s.name == "ellipsoid":
        return ellipsoid(metric, lmo, T=ELLIPSOID_ITERATION_CAP * T, a=s.a, xi_budget=s.xi_budget,
                         hull_budget=s.hull_budget, max_lmo_calls=T)
    if s.name == "bisection":
        return bisection(metric, lmo, T=T)
    if s.name == "split_fw":
        return split_fw(metric, constraints, lmo, T=T, zeta=s.zeta, eta_schedule=tuple(s.eta_schedule),
                        line_search=s.line_search, prune=True if s.prune is None else s.prune)
    if s.name == "con_gda":
        return con_gda(metric, constraints, lmo, T=T, L=s.L, r=s.r, eta=eta, eta_dual=eta_dual,
                       prune=True if s.prune is None else s.prune)
    if s.name == "con_ellipsoid":
        return con_ellipsoid(metric, constraints, lmo, T=ELLIPSOID_ITERATION_CAP * T, a=s.a, r=s.r,
                             xi_budget=s.xi_budget, hull_budget=s.hull_budget, max_lmo_calls=T)
    return con_bisection(metric, constraints, lmo, T=T, T_inner=s.T_inner, r=s.r, branch=s.branch, L=s.L,
                         prune=True if s.prune is None else s.prune)


def run_solver(cfg: ExperimentConfig, metric, constraints, lmo):
    """Run the configured solver, grid-searching GDA step sizes on the training objective when asked."""
    s = cfg.solver
    if s.name not in ("gda", "con_gda") or not s.tune_steps or s.eta is not None or s.eta_dual is not None:
        return _call_solver(cfg, metric, constraints, lmo, s.eta, s.eta_dual)
    bm = metric.bind(lmo.layout)
    bc = BoundConstraints(constraints, lmo.layout)
    best, best_key = None, None
    for eta, eta_dual in itertools.product(s.step_grid, repeat=2):
        h, trace = _call_solver(cfg, metric, constraints, lmo, eta, eta_dual)
        c = trace.final_confusion.entries
        violation = max(float(bc.values(c).max()), 0.0) if len(bc) else 0.0
        # feasible runs first, then the training objective; infeasible runs by violation
        key = (0, bm.value(c)) if violation <= FEAS_TOL else (1, violation)
        if best_key is None or key < best_key:
            best, best_key = (h, trace), key
            trace.info.update(eta=eta, eta_dual=eta_dual)
    return best


def evaluate(classifier, data: Dataset, metric, constraints) -> dict:
    """Metric value and per-constraint violations of ``classifier`` on ``data``."""
    layout = ConfusionLayout.full(data.n_classes, data.n_groups, data.group_class_masses())
    x = layout.forward(classifier.raw_confusion(data))
    out = {"objective": metric.bind(layout).value(x), "violations": []}
    for c in constraints:
        v = BoundConstraints([c], layout).values(x)
        out["violations"].append(max(float(v.max()), 0.0))
    out["max_violation"] = max(out["violations"], default=0.0)
    return out


@dataclass
class TrialResult:
    record: dict
    trace: object
    classifier: object
    wall_time: float


def run_trial(cfg: ExperimentConfig, trial: int) -> TrialResult:
    start = time.perf_counter()
    seed = cfg.seed + trial
    train, test = load_data(cfg, seed)
    metric = build_metric(cfg)
    constraints = build_constraints(cfg, train.group_class_masses().sum(axis=0))
    layout = make_layout(cfg, metric, constraints, train)
    if not metric.in_layout_space and not layout.represents(metric.functionals(layout.n_classes, layout.n_groups,
                                                                                  layout.masses)):
        raise LayoutMismatch(f"the {layout.representation.value} layout cannot express {metric.kind.value}")
    lmo = make_lmo(cfg, train, layout)
    h, trace = run_solver(cfg, metric, constraints, lmo)
    train_eval = evaluate(h, train, metric, constraints)
    test_eval = evaluate(h, test, metric, constraints)
    record = {
        "trial": trial,
        "seed": seed,
        "layout": layout.representation.value,
        "iterations": len(trace),
        "lmo_calls": trace.records[-1].lmo_calls if len(trace) else 0,
        "train_objective": train_eval["objective"],
        "train_max_violation": train_eval["max_violation"],
        "test_objective": test_eval["objective"],
        "test_violations": test_eval["violations"],
        "test_max_violation": test_eval["max_violation"],
    }
    return TrialResult(record, trace, h, time.perf_counter() - start)


def _stats(values) -> dict:
    v = np.asarray(values, dtype=float)
    return {"mean": float(v.mean()), "std": float(v.std(ddof=1)) if v.size > 1 else None}


def summarize(cfg: ExperimentConfig, records: list[dict]) -> dict:
    return {
        "config": resolved(cfg),
        "trials": records,
        "aggregate": {k: _stats([r[k] for r in records])
                      for k in ("test_objective", "test_max_violation", "train_objective", "lmo_calls")},
    }


def thread_count() -> int:
    try:
        return max(int(os.environ.get("CONFOPT_THREADS", "1")), 1)
    except ValueError:
        raise ConfigError("CONFOPT_THREADS must be a positive integer") from None


def run_experiment(cfg: ExperimentConfig, out_dir=None, threads: int | None = None) -> dict:
    """All trials of an experiment; writes traces, classifiers, summary and timings to ``out_dir``."""
    threads = thread_count() if threads is None else threads
    trials = range(cfg.n_trials)
    start = time.perf_counter()
    if threads > 1 and cfg.n_trials > 1:
        with ThreadPoolExecutor(max_workers=min(threads, cfg.n_trials)) as pool:
            results = list(pool.map(lambda k: run_trial(cfg, k), trials))
    else:
        results = [run_trial(cfg, k) for k in trials]
    summary = summarize(cfg, [r.record for r in results])
    if out_dir is not None:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        for k, r in enumerate(results):
            r.trace.write_csv(out / f"trace_trial{k}.csv")
            write_json(out / f"classifier_trial{k}.json", r.classifier.to_dict())
        write_json(out / "summary.json", summary)
        timing = {"trials": [{"trial": k, "wall_time": r.wall_time} for k, r in enumerate(results)],
                  "total": time.perf_counter() - start}
        write_json(out / "timing.json", timing)
    return summary


def evaluate_saved(cfg: ExperimentConfig, classifier_path, trial: int = 0) -> dict:
    """Re-evaluate a saved classifier on the data of one trial."""
    d = json.loads(Path(classifier_path).read_text(encoding="utf-8"))
    h = classifier_from_dict(d)
    train, test = load_data(cfg, cfg.seed + trial)
    metric = build_metric(cfg)
    constraints = build_constraints(cfg, train.group_class_masses().sum(axis=0))
    return {"seed": cfg.seed + trial, "train": evaluate(h, train, metric, constraints),
            "test": evaluate(h, test, metric, constraints)}


def run_bayes_oracle(cfg: ExperimentConfig) -> dict:
    """Grid-search reference value for a synthetic problem, as fixture data."""
    spec = synthetic_spec(cfg)
    if spec is None:
        raise ConfigError("data.synthetic: the grid oracle needs a synthetic distribution")
    metric = build_metric(cfg)
    constraints = build_constraints(cfg, spec.priors)
    o = cfg.oracle
    record = {
        "oracle": "constrained_grid" if constraints else "grid_bayes",
        "data": spec_to_dict(spec),
        "metric": cfg.metric.model_dump(mode="json"),
        "constraints": [c.model_dump(mode="json") for c in cfg.constraints],
        "grid": {"step": o.step, "w_max": o.w_max, "n_samples": o.n_samples, "seed": o.seed},
    }
    if constraints:
        value, x, (wa, wb, s) = bruteforce.constrained_grid_optimum(
            metric, constraints, spec, o.step, o.w_max, o.mix_steps, o.n_samples, o.seed)
        record["grid"]["mix_steps"] = o.mix_steps
        record.update(value=value, weights=[wa.tolist(), wb.tolist()], mixing=s, confusion=x.tolist())
    else:
        res = bruteforce.grid_bayes(metric, spec, o.step, o.w_max, o.n_samples, o.seed)
        record.update(value=res.value, weights=res.weights.tolist(), confusion=res.confusion.ravel().tolist())
    return record


def write_json(path, data) -> None:
    Path(path).write_text(json.dumps(data, indent=2, sort_keys=True) + "\n", encoding="utf-8")


__all__ = [
    "CONSTRAINED",
    "build_constraints",
    "build_metric",
    "evaluate",
    "evaluate_saved",
    "load_data",
    "run_bayes_oracle",
    "run_experiment",
    "run_trial",
]
