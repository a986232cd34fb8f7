"""BIC-based selection of the number of clusters.

The criterion is the dataset-mean ELBO penalized by half the free generative
parameter count (minus one, for the weight-sum constraint) times log N; the
candidate with the largest value wins, with ties resolved toward fewer
clusters. Each candidate is trained with the full restart protocol and scored
with a fixed evaluation noise stream so sweeps are reproducible.
"""

from __future__ import annotations

import os
import warnings
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass

import numpy as np

from . import trainer as tr
from .diffcore import SeededRng
from .ssm import MixtureParams, SSMDefinition
from .varpost import NetworkConfig


def count_params(theta: MixtureParams) -> int:
    """Free generative parameters: per-cluster block dims plus the M weights."""
    per_cluster = sum(b.size for b in theta.model.blocks)
    return per_cluster * theta.n_clusters + theta.n_clusters


def bic(mean_elbo: float, n_params: int, n_series: int) -> float:
    """mean ELBO - (n_params - 1)/2 * ln N (natural log)."""
    if n_series < 1:
        raise ValueError("n_series must be >= 1")
    return mean_elbo - 0.5 * (n_params - 1) * np.log(n_series)


def mean_elbo(
    state: tr.TrainState, dataset, eval_seed: int = 0, eval_samples: int = 1
) -> float:
    """Single-sample (optionally seed-averaged) dataset-mean ELBO."""
    values = tr._dataset_values(dataset)
    means = []
    for j in range(eval_samples):
        rng = SeededRng(eval_seed).spawn(tr.EVAL_STREAM, j)
        means.append(tr.dataset_elbo(state.theta, state.phi, values, rng).mean())
    return float(np.mean(means))


@dataclass
class BICEntry:
    n_clusters: int
    mean_elbo: float
    n_params: int
    bic: float
    state: tr.TrainState | None
    failed: bool = False


@dataclass
class BICReport:
    entries: list[BICEntry]
    selected: int  # number of clusters with the largest BIC

    def best(self) -> BICEntry:
        for e in self.entries:
            if e.n_clusters == self.selected:
                return e
        raise LookupError("no selected entry")


def _train_one(args):
    dataset, m, cfg, schedule, model, net, fixed, eval_seed, eval_samples = args
    try:
        state = tr.train(dataset, m, cfg, schedule, model=model, net=net, fixed=fixed)
    except tr.TrainingDiverged:
        return m, None, float("nan"), 0
    elbo = mean_elbo(state, dataset, eval_seed, eval_samples)
    return m, state, elbo, count_params(state.theta)


def sweep(
    dataset,
    m_range,
    cfg: tr.OptimizerConfig,
    schedule: tr.AnnealingSchedule,
    model: SSMDefinition | None = None,
    net: NetworkConfig | None = None,
    fixed=None,
    eval_seed: int = 0,
    eval_samples: int = 1,
    workers: int | None = None,
) -> BICReport:
    """Train every candidate cluster count and rank them by BIC.

    Candidates whose restarts all diverge are marked failed and excluded from
    selection with a warning. `workers` > 1 trains candidates in parallel
    processes (capped by the MSSM_THREADS environment variable).
    """
    ms = sorted(set(int(m) for m in m_range))
    if not ms:
        raise ValueError("m_range must be non-empty")
    jobs = [
        (dataset, m, cfg, schedule, model, net, fixed, eval_seed, eval_samples)
        for m in ms
    ]
    cap = os.environ.get("MSSM_THREADS")
    if workers is None:
        workers = 1
    if cap is not None:
        workers = max(1, min(workers, int(cap)))
    if os.environ.get("MSSM_DETERMINISTIC") == "1":
        workers = 1
    if workers > 1 and len(jobs) > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            results = list(pool.map(_train_one, jobs))
    else:
        results = [_train_one(j) for j in jobs]

    entries = []
    for m, state, elbo, n_params in results:
        if state is None:
            warnings.warn(f"all restarts diverged for M={m}; excluded from selection")
            entries.append(BICEntry(m, float("nan"), 0, float("nan"), None, True))
            continue
        entries.append(
            BICEntry(m, elbo, n_params, bic(elbo, n_params, len(tr._dataset_values(dataset))), state)
        )
    ok = [e for e in entries if not e.failed]
    if not ok:
        raise tr.TrainingDiverged("every candidate cluster count diverged")
    best = ok[0]
    for e in ok[1:]:
        if e.bic > best.bic:  # strict: ties keep the smaller M
            best = e
    return BICReport(entries, best.n_clusters)


def report_csv(report: BICReport) -> str:
    """Per-candidate table, one row per cluster count (ascending)."""
    lines = ["n_clusters,mean_elbo,n_params,bic,failed"]
    for e in report.entries:
        lines.append(
            f"{e.n_clusters},{_g(e.mean_elbo)},{e.n_params},{_g(e.bic)},{int(e.failed)}"
        )
    return "\n".join(lines) + "\n"


def _g(v: float) -> str:
    return format(float(v), ".17g")
