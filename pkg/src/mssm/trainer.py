"""Mixture ELBO, entropy-annealed loss, and the full optimization regimen.

Training follows three phases per restart: a main phase with a triangular
cyclical learning rate and entropy annealing, a convergence phase at a low
constant rate, and a fine-tune phase that updates only the initial-state
parameters and the flow weights. Several restarts are run from independent
random initializations and the state with the lowest final loss wins.

The cluster assignment variable is never sampled: the per-series ELBO
enumerates all M branches with one shared noise draw, weighting each branch by
the classifier posterior.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from . import diffcore as dc
from . import varpost as vp
from .diffcore import SeededRng, Tensor
from .ssm import (
    ROLE_P0,
    ClusterParams,
    MixtureParams,
    SSMDefinition,
    constrain_graph,
    log_joint_graph,
)

EVAL_STREAM = 982451653  # rng sub-stream reserved for loss/ELBO evaluation


class TrainingDiverged(Exception):
    """All restarts produced a non-finite loss."""


class ElboNotFinite(Exception):
    """Non-finite ELBO; carries the offending series index and branch."""

    def __init__(self, series_index, branch):
        self.series_index = series_index
        self.branch = branch
        super().__init__(
            f"non-finite ELBO at series {series_index}, cluster branch {branch}"
        )


@dataclass(frozen=True)
class AnnealingSchedule:
    """Entropy-annealing strength: plateau, linear decay, then zero."""

    alpha_max: float
    n_start: int
    n_end: int

    def __post_init__(self):
        if self.alpha_max < 0:
            raise ValueError("alpha_max must be >= 0")
        if not 1 <= self.n_start < self.n_end:
            raise ValueError("need 1 <= n_start < n_end")


@dataclass(frozen=True)
class OptimizerConfig:
    batch_size: int = 25
    epochs: int = 100
    lr_base: float = 1e-3
    lr_max: float = 1e-2
    cycle_length: int = 10  # triangular LR period, in epochs
    converge_epochs: int = 20
    converge_lr: float = 1e-3
    finetune_epochs: int = 20
    finetune_lr: float = 1e-3
    restarts: int = 3
    seed: int = 0

    def __post_init__(self):
        for name in (
            "batch_size",
            "lr_base",
            "lr_max",
            "cycle_length",
            "converge_lr",
            "finetune_lr",
            "restarts",
        ):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be positive")
        if self.lr_base > self.lr_max:
            raise ValueError("lr_base must be <= lr_max")


@dataclass
class EpochRecord:
    restart: int
    epoch: int
    phase: str  # main | converge | finetune
    lr: float
    alpha: float
    loss: float


@dataclass
class TrainState:
    """Result of one full training run (best restart)."""

    theta: MixtureParams
    phi: vp.VariationalParams
    epoch: int
    step: int
    loss_history: list[EpochRecord]  # best restart only
    final_loss: float
    restart_losses: list[float]  # +inf marks a diverged restart
    best_restart: int
    all_history: list[EpochRecord] = field(default_factory=list)


# -- schedules ----------------------------------------------------------------


def entropy(q) -> float:
    """Shannon entropy with the 0 log 0 := 0 convention."""
    q = np.asarray(q, dtype=np.float64)
    pos = q[q > 0]
    return float(-(pos * np.log(pos)).sum())


def annealing_strength(n: int, s: AnnealingSchedule) -> float:
    if n < s.n_start:
        return s.alpha_max
    if n < s.n_end:
        return s.alpha_max * (s.n_end - n) / (s.n_end - s.n_start)
    return 0.0


def cyclical_lr(step: int, cfg: OptimizerConfig) -> float:
    """Triangular wave: lr_base at phase 0, lr_max at half a cycle."""
    phase = (step % cfg.cycle_length) / cfg.cycle_length
    return cfg.lr_base + (cfg.lr_max - cfg.lr_base) * (1.0 - abs(2.0 * phase - 1.0))


def default_schedule(cfg: OptimizerConfig, alpha_max: float = 1.0) -> AnnealingSchedule:
    """Plateau for 40% of the main epochs, decay to zero at 80%."""
    n_start = max(1, math.ceil(0.4 * cfg.epochs))
    n_end = max(n_start + 1, math.ceil(0.8 * cfg.epochs))
    return AnnealingSchedule(alpha_max, n_start, n_end)


# -- parameter packing ----------------------------------------------------------


def pack_params(theta: MixtureParams, phi: vp.VariationalParams) -> dict[str, np.ndarray]:
    out: dict[str, np.ndarray] = {}
    for k, cp in enumerate(theta.clusters):
        for name, v in cp.blocks.items():
            out[f"theta.{k}.{name}"] = v.copy()
    out["theta.weights"] = theta.free_logits.copy()
    for name, v in phi.blocks.items():
        out[f"phi.{name}"] = v.copy()
    return out


def unpack_params(
    params: dict[str, np.ndarray], theta: MixtureParams, phi: vp.VariationalParams
):
    """Rebuild (theta, phi) from a flat dict, using the originals as templates."""
    clusters = []
    for k, cp in enumerate(theta.clusters):
        blocks = {name: params[f"theta.{k}.{name}"].copy() for name in cp.blocks}
        clusters.append(ClusterParams(cp.model, blocks, dict(cp.fixed)))
    new_theta = MixtureParams(theta.model, clusters, params["theta.weights"].copy())
    new_phi = vp.VariationalParams(
        phi.model,
        phi.n_clusters,
        phi.net,
        {name: params[f"phi.{name}"].copy() for name in phi.blocks},
    )
    return new_theta, new_phi


def init_mixture_params(
    model: SSMDefinition, n_clusters: int, rng: SeededRng, fixed=None
) -> MixtureParams:
    """Random generative-parameter initialization for one restart.

    `fixed` is a mapping of per-cluster fixed constants; scalars are shared by
    all clusters, sequences give one value per cluster.
    """
    fixed = fixed or {}
    clusters = []
    for k in range(n_clusters):
        cluster_fixed = {}
        for name, value in fixed.items():
            cluster_fixed[name] = (
                float(value[k]) if np.ndim(value) > 0 else float(value)
            )
        if model.init_blocks is not None:
            blocks = model.init_blocks(rng)
        else:
            blocks = {b.name: rng.standard_normal(b.size) * 0.3 for b in model.blocks}
        clusters.append(ClusterParams(model, blocks, cluster_fixed))
    return MixtureParams(model, clusters, np.zeros(n_clusters - 1))


def finetune_predicate(model: SSMDefinition) -> Callable[[str], bool]:
    """Trainable-name filter for the fine-tune phase: theta_P0 blocks + flows."""
    p0_blocks = {b.name for b in model.blocks if b.role == ROLE_P0}

    def pred(name: str) -> bool:
        if name.startswith("phi.flow."):
            return True
        if name.startswith("theta."):
            parts = name.split(".", 2)
            return len(parts) == 3 and parts[2] in p0_blocks
        return False

    return pred


# -- objective graph --------------------------------------------------------------


def _objective_graph(
    leaves: dict[str, Tensor],
    model: SSMDefinition,
    net: vp.NetworkConfig,
    n_clusters: int,
    fixeds: list[dict],
    Y: np.ndarray,
    eps: np.ndarray,
):
    """(elbo, entropy, per-branch f) tensors for a batch of series.

    Y is (B, T, obs_dim); eps is one (B, T, state_dim) draw shared across the
    M enumerated cluster branches.
    """
    B, T, _ = Y.shape
    M = n_clusters
    phi_leaves = {k[4:]: t for k, t in leaves.items() if k.startswith("phi.")}

    q, log_q = vp.classifier_graph(phi_leaves, Y, net)  # (B, M)

    y_tiled = np.repeat(Y, M, axis=0)
    onehot = np.tile(np.eye(M), (B, 1))[:, None, :].repeat(T, axis=1)
    enc_inputs = np.concatenate([y_tiled, onehot], axis=2)
    eps_tiled = np.repeat(eps, M, axis=0)
    X, logq_x = vp.sample_path_graph(phi_leaves, enc_inputs, eps_tiled, net, model)

    wl = dc.concat([Tensor(np.zeros(1)), leaves["theta.weights"]], axis=0)
    log_w = wl - dc.logsumexp(wl, axis=0, keepdims=True)  # (M,)

    branches = []
    for k in range(M):
        theta_k = {
            b.name: constrain_graph(leaves[f"theta.{k}.{b.name}"], b.transform)
            for b in model.blocks
        }
        branches.append(log_joint_graph(model, theta_k, fixeds[k], X[k::M], Y))
    log_joint = dc.stack(branches, axis=1)  # (B, M)

    f = log_joint - dc.reshape(logq_x, (B, M)) - log_q + log_w
    elbo = (q * f).sum(axis=1)  # (B,)
    ent = -(q * log_q).sum(axis=1)  # (B,)
    return elbo, ent, f


def _loss_program(leaves, inputs):
    model, net, M, fixeds, Y, eps, alpha = inputs
    elbo, ent, _ = _objective_graph(leaves, model, net, M, fixeds, Y, eps)
    return (-elbo - alpha * ent).mean()


def _fixeds(theta: MixtureParams) -> list[dict]:
    return [cp.fixed for cp in theta.clusters]


def elbo_i(theta: MixtureParams, phi: vp.VariationalParams, Y_i, rng: SeededRng) -> float:
    """Single-series mixture ELBO estimate with one shared noise draw.

    The cluster variable is enumerated exactly; only the trajectory noise is
    sampled (L = 1).
    """
    model = theta.model
    Y = np.asarray(Y_i, dtype=np.float64).reshape(1, -1, model.obs_dim)
    eps = rng.standard_normal((1, Y.shape[1], model.state_dim))
    params = pack_params(theta, phi)

    def program(leaves, _):
        elbo, _ent, f = _objective_graph(
            leaves, model, phi.net, theta.n_clusters, _fixeds(theta), Y, eps
        )
        return dc.concat([elbo, dc.reshape(f, (-1,))], axis=0)

    out = dc.evaluate(program, params, None)
    value, f_row = out[0], out[1:]
    if not np.isfinite(value):
        branch = int(np.flatnonzero(~np.isfinite(f_row))[0]) + 1
        raise ElboNotFinite(0, branch)
    return float(value)


def dataset_elbo(
    theta: MixtureParams,
    phi: vp.VariationalParams,
    values: np.ndarray,
    rng: SeededRng,
    batch_size: int = 64,
) -> np.ndarray:
    """Per-series ELBO over a whole dataset, evaluated in batches."""
    model = theta.model
    params = pack_params(theta, phi)
    fixeds = _fixeds(theta)
    out = []
    for start in range(0, len(values), batch_size):
        Y = values[start : start + batch_size]
        eps = rng.standard_normal((len(Y), Y.shape[1], model.state_dim))

        def program(leaves, _):
            elbo, _ent, _f = _objective_graph(
                leaves, model, phi.net, theta.n_clusters, fixeds, Y, eps
            )
            return elbo

        out.append(np.atleast_1d(dc.evaluate(program, params, None)))
    return np.concatenate(out)


def loss_batch(
    theta: MixtureParams,
    phi: vp.VariationalParams,
    batch,
    n: int,
    schedule: AnnealingSchedule,
    rng: SeededRng,
) -> float:
    """Mean over the batch of [-ELBO_i - alpha_n * entropy(q(z|Y_i))]."""
    model = theta.model
    Y = np.asarray(batch, dtype=np.float64)
    if Y.ndim == 2:
        Y = Y[:, :, None]
    if Y.shape[0] == 0:
        raise ValueError("batch must be non-empty")
    alpha = annealing_strength(n, schedule)
    eps = rng.standard_normal((Y.shape[0], Y.shape[1], model.state_dim))
    params = pack_params(theta, phi)
    inputs = (model, phi.net, theta.n_clusters, _fixeds(theta), Y, eps, alpha)
    return float(dc.evaluate(_loss_program, params, inputs))


# -- optimization loop --------------------------------------------------------------


class _Diverged(Exception):
    pass


def _sgd_epochs(
    params: dict[str, np.ndarray],
    values: np.ndarray,
    model: SSMDefinition,
    net: vp.NetworkConfig,
    n_clusters: int,
    fixeds: list[dict],
    n_epochs: int,
    lr_fn: Callable[[int], float],
    alpha_fn: Callable[[int], float],
    batch_size: int,
    rng: SeededRng,
    records: list[EpochRecord],
    restart: int,
    phase: str,
    epoch_offset: int,
    trainable: Callable[[str], bool] | None = None,
) -> int:
    """Plain mini-batch SGD over `params` in place; returns steps taken."""
    N, T, _ = values.shape
    d = model.state_dim
    steps = 0
    for e in range(1, n_epochs + 1):
        lr = lr_fn(e)
        alpha = alpha_fn(e)
        perm = rng.permutation(N)
        total = 0.0
        for start in range(0, N, batch_size):
            idx = perm[start : start + batch_size]
            Y = values[idx]
            eps = rng.standard_normal((len(idx), T, d))
            inputs = (model, net, n_clusters, fixeds, Y, eps, alpha)
            loss, grads = dc.value_and_grad(_loss_program, params, inputs)
            if not np.isfinite(loss):
                raise _Diverged
            for name, g in grads.items():
                if trainable is None or trainable(name):
                    params[name] -= lr * g
            total += loss * len(idx)
            steps += 1
        records.append(
            EpochRecord(restart, epoch_offset + e, phase, lr, alpha, total / N)
        )
    return steps


def _dataset_values(dataset) -> np.ndarray:
    values = dataset.values if hasattr(dataset, "values") else np.asarray(dataset)
    values = np.asarray(values, dtype=np.float64)
    if values.ndim == 2:
        values = values[:, :, None]
    return values


def train(
    dataset,
    n_clusters: int,
    cfg: OptimizerConfig,
    schedule: AnnealingSchedule,
    model: SSMDefinition | None = None,
    net: vp.NetworkConfig | None = None,
    fixed=None,
) -> TrainState:
    """Run the full multi-restart protocol and keep the lowest-loss state.

    Per restart: main phase (cyclical LR + entropy annealing), convergence
    phase (constant low LR, no annealing), fine-tune phase (initial-state and
    flow parameters only). A restart whose loss goes non-finite is recorded as
    diverged and skipped; only if every restart diverges does training fail.
    """
    values = _dataset_values(dataset)
    if len(values) == 0:
        raise ValueError("dataset must be non-empty")
    if model is None:
        name = getattr(dataset, "metadata", {}).get("model")
        if name is None:
            raise ValueError("no model given and dataset carries no model name")
        from .ssm import MODELS

        model = MODELS[name]
    net = net or vp.NetworkConfig()

    all_history: list[EpochRecord] = []
    restart_losses: list[float] = []
    best: tuple[float, int, dict, MixtureParams, vp.VariationalParams, int, list] | None = None

    for restart in range(cfg.restarts):
        rng = SeededRng(cfg.seed).spawn(restart)
        theta0 = init_mixture_params(model, n_clusters, rng, fixed)
        phi0 = vp.init_variational_params(model, n_clusters, net, rng)
        params = pack_params(theta0, phi0)
        fixeds = _fixeds(theta0)
        records: list[EpochRecord] = []
        steps = 0
        try:
            steps += _sgd_epochs(
                params, values, model, net, n_clusters, fixeds,
                cfg.epochs,
                lr_fn=lambda e: cyclical_lr(e - 1, cfg),
                alpha_fn=lambda e: annealing_strength(e, schedule),
                batch_size=cfg.batch_size,
                rng=rng, records=records, restart=restart,
                phase="main", epoch_offset=0,
            )
            steps += _sgd_epochs(
                params, values, model, net, n_clusters, fixeds,
                cfg.converge_epochs,
                lr_fn=lambda e: cfg.converge_lr,
                alpha_fn=lambda e: 0.0,
                batch_size=cfg.batch_size,
                rng=rng, records=records, restart=restart,
                phase="converge", epoch_offset=cfg.epochs,
            )
            steps += _sgd_epochs(
                params, values, model, net, n_clusters, fixeds,
                cfg.finetune_epochs,
                lr_fn=lambda e: cfg.finetune_lr,
                alpha_fn=lambda e: 0.0,
                batch_size=cfg.batch_size,
                rng=rng, records=records, restart=restart,
                phase="finetune", epoch_offset=cfg.epochs + cfg.converge_epochs,
                trainable=finetune_predicate(model),
            )
        except _Diverged:
            restart_losses.append(float("inf"))
            all_history.extend(records)
            continue

        theta, phi = unpack_params(params, theta0, phi0)
        final_loss = _final_loss(theta, phi, values, cfg)
        restart_losses.append(final_loss)
        all_history.extend(records)
        if best is None or final_loss < best[0]:
            best = (final_loss, restart, params, theta, phi, steps, records)

    if best is None:
        raise TrainingDiverged(
            f"all {cfg.restarts} restarts diverged (non-finite loss)"
        )
    final_loss, restart, _params, theta, phi, steps, records = best
    return TrainState(
        theta=theta,
        phi=phi,
        epoch=len(records),
        step=steps,
        loss_history=records,
        final_loss=final_loss,
        restart_losses=restart_losses,
        best_restart=restart,
        all_history=all_history,
    )


def _final_loss(theta, phi, values, cfg: OptimizerConfig) -> float:
    """Full-dataset loss with a restart-independent evaluation noise stream."""
    rng = SeededRng(cfg.seed).spawn(EVAL_STREAM)
    elbo = dataset_elbo(theta, phi, values, rng)
    return float(-elbo.mean())


# -- post-training queries ----------------------------------------------------------


def responsibilities(state: TrainState, dataset) -> np.ndarray:
    """q(z | Y_i) for every series, as an (N, M) row-stochastic matrix."""
    values = _dataset_values(dataset)
    phi = state.phi
    out = []
    for start in range(0, len(values), 256):
        Y = values[start : start + 256]

        def program(ph, _):
            q, _lq = vp.classifier_graph(ph, Y, phi.net)
            return q

        out.append(np.atleast_2d(dc.evaluate(program, phi.blocks, None)))
    return np.concatenate(out, axis=0)


def hard_assignments(state: TrainState, dataset) -> np.ndarray:
    """1-based cluster labels: argmax responsibility, ties to the lowest index."""
    return responsibilities(state, dataset).argmax(axis=1) + 1


@dataclass
class LatentEstimate:
    mean: np.ndarray  # (T, d)
    q05: np.ndarray
    q95: np.ndarray
    cluster: int  # 1-based hard assignment used for the posterior


def latent_estimates(
    state: TrainState, Y_i, n_samples: int, rng: SeededRng | None = None
) -> LatentEstimate:
    """Monte Carlo mean and [5%, 95%] quantiles of the latent trajectory.

    Sampling conditions on the hard-assigned cluster. For positive-support
    models the samples are normalized to the simplex first, so the estimates
    live on the interpretable scale.
    """
    if n_samples < 1:
        raise ValueError("n_samples must be >= 1")
    rng = rng or SeededRng(0)
    phi = state.phi
    model = phi.model
    Y = np.asarray(Y_i, dtype=np.float64).reshape(-1, model.obs_dim)
    q = vp.cluster_posterior(Y, phi)
    z_hat = int(q.argmax()) + 1
    enc = vp.encode(Y, z_hat, phi)
    T, d = enc.mu.shape
    eps = rng.standard_normal((n_samples, T, d))
    xi = enc.mu + np.exp(enc.log_scale) * eps
    ctx = np.broadcast_to(enc.context, (n_samples,) + enc.context.shape)
    x, _ = vp._flow_forward_np(phi.blocks, xi, ctx, phi.net, d)
    if model.latent_support == "positive":
        g = np.exp(x)
        x = g / g.sum(axis=2, keepdims=True)
    return LatentEstimate(
        mean=x.mean(axis=0),
        q05=np.quantile(x, 0.05, axis=0),
        q95=np.quantile(x, 0.95, axis=0),
        cluster=z_hat,
    )
