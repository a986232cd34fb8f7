"""State space model definitions and mixtures of them.

A model is described by an ``SSMDefinition``: latent/observation dimensions,
the latent support, a list of parameter blocks (stored unconstrained, with
paired transforms into the valid region), and a builder for the three log
density terms (initial, transition, observation). Two concrete models ship
here: the discrete-time stochastic Stuart-Landau oscillator and the SIR
epidemic model in its normalized-Gamma form. Custom models can be registered
by constructing an SSMDefinition directly.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from . import diffcore as dc
from .diffcore import Tensor

LOG_2PI = float(np.log(2.0 * np.pi))
LN10 = float(np.log(10.0))

ROLE_Q = "theta_q"
ROLE_R = "theta_r"
ROLE_P0 = "theta_p0"

# unconstrained-space step size multiplier for raw coefficient blocks; keeps
# their loss curvature comparable to the log-scale blocks under one global
# SGD learning rate
RAW_SCALE = 0.1


# -- parameter blocks and transforms -------------------------------------------


@dataclass(frozen=True)
class ParamBlock:
    """One optimizable parameter block, stored as an unconstrained vector.

    `transform` maps the unconstrained vector to the constrained values:
      identity  constrained == unconstrained
      scaled    constrained == RAW_SCALE * unconstrained
      positive  elementwise exp
      tril2     [u0,u1,u2] -> lower-triangular 2x2 [[sp(u0),0],[s*u1,sp(u2)]]
                with s = RAW_SCALE (kept as the 3-vector [L00, L10, L11])
      simplex   length-K vector from K-1 free logits with the last pivot at 0
    The free parameter count of the constrained object equals `size` for all
    of these by construction.
    """

    name: str
    role: str
    size: int
    transform: str = "identity"


def constrain_block(u: np.ndarray, transform: str) -> np.ndarray:
    u = np.asarray(u, dtype=np.float64)
    if not np.all(np.isfinite(u)):
        raise ValueError("non-finite unconstrained parameter")
    if transform == "identity":
        return u.copy()
    if transform == "scaled":
        return RAW_SCALE * u
    if transform == "positive":
        return np.exp(u)
    if transform == "tril2":
        return np.array([_softplus(u[0]), RAW_SCALE * u[1], _softplus(u[2])])
    if transform == "simplex":
        full = np.concatenate([u, [0.0]])
        e = np.exp(full - full.max())
        return e / e.sum()
    raise ValueError(f"unknown transform {transform!r}")


def unconstrain_block(v: np.ndarray, transform: str) -> np.ndarray:
    v = np.asarray(v, dtype=np.float64)
    if not np.all(np.isfinite(v)):
        raise ValueError("non-finite constrained parameter")
    if transform == "identity":
        return v.copy()
    if transform == "scaled":
        return v / RAW_SCALE
    if transform == "positive":
        return np.log(v)
    if transform == "tril2":
        return np.array([_inv_softplus(v[0]), v[1] / RAW_SCALE, _inv_softplus(v[2])])
    if transform == "simplex":
        return np.log(v[:-1]) - np.log(v[-1])
    raise ValueError(f"unknown transform {transform!r}")


def _softplus(x):
    return np.logaddexp(0.0, x)


def _inv_softplus(y):
    # inverse of log(1+e^x); accurate for small and large y
    return y + np.log(-np.expm1(-y))


def constrain_graph(u: Tensor, transform: str) -> Tensor:
    """Tape version of constrain_block, so SGD runs in unconstrained space."""
    if transform == "identity":
        return u
    if transform == "scaled":
        return u * RAW_SCALE
    if transform == "positive":
        return dc.exp(u)
    if transform == "tril2":
        return dc.concat(
            [dc.softplus(u[0:1]), u[1:2] * RAW_SCALE, dc.softplus(u[2:3])], axis=0
        )
    if transform == "simplex":
        full = dc.concat([u, Tensor(np.zeros(1))], axis=0)
        return dc.softmax(full, axis=0)
    raise ValueError(f"unknown transform {transform!r}")


# -- model definition ------------------------------------------------------------


@dataclass(frozen=True)
class SSMDefinition:
    """A state space model: densities for transition Q, observation R, initial P0.

    `log_terms` builds the three log-density terms on the tape, vectorized over
    a batch of trajectories:
        log_terms(theta, fixed, X, Y) -> (init, trans, obs), each (B,)
    where theta maps block name -> constrained Tensor, fixed maps constant
    name -> float, X is a (B, T, state_dim) Tensor on the latent support, and
    Y is a constant (B, T, obs_dim) array.
    """

    name: str
    state_dim: int
    obs_dim: int
    latent_support: str  # "unbounded" | "positive"
    blocks: tuple[ParamBlock, ...]
    log_terms: Callable
    fixed_names: tuple[str, ...] = ()
    init_blocks: Callable | None = None  # rng -> unconstrained block dict

    def block(self, name: str) -> ParamBlock:
        for b in self.blocks:
            if b.name == name:
                return b
        raise KeyError(name)


@dataclass
class ClusterParams:
    """Generative parameters of one mixture component, unconstrained storage."""

    model: SSMDefinition
    blocks: dict[str, np.ndarray]
    fixed: dict[str, float] = field(default_factory=dict)

    def constrained(self) -> dict[str, np.ndarray]:
        return {
            b.name: constrain_block(self.blocks[b.name], b.transform)
            for b in self.model.blocks
        }

    @classmethod
    def from_constrained(cls, model: SSMDefinition, values: dict, fixed=None):
        blocks = {
            b.name: unconstrain_block(np.asarray(values[b.name]), b.transform)
            for b in model.blocks
        }
        return cls(model, blocks, dict(fixed or {}))

    def copy(self) -> "ClusterParams":
        return ClusterParams(
            self.model, {k: v.copy() for k, v in self.blocks.items()}, dict(self.fixed)
        )


@dataclass
class MixtureParams:
    """Mixture of M SSM components with softmax weights (first logit pinned to 0)."""

    model: SSMDefinition
    clusters: list[ClusterParams]
    free_logits: np.ndarray  # (M-1,)

    @property
    def n_clusters(self) -> int:
        return len(self.clusters)

    @property
    def weight_logits(self) -> np.ndarray:
        return np.concatenate([[0.0], self.free_logits])

    def weights(self) -> np.ndarray:
        z = self.weight_logits
        e = np.exp(z - z.max())
        return e / e.sum()

    def copy(self) -> "MixtureParams":
        return MixtureParams(
            self.model, [c.copy() for c in self.clusters], self.free_logits.copy()
        )


# -- Gaussian / Gamma / Beta building blocks (tape ops) ---------------------------


def _gauss1(resid, scale):
    """Log N(resid; 0, scale^2), elementwise."""
    u = resid / scale
    return -0.5 * LOG_2PI - dc.log(scale) - 0.5 * (u * u)


def _gauss2_tril(r1, r2, tril):
    """Log N((r1,r2); 0, LL^T) with L the [L00, L10, L11] lower factor."""
    u1 = r1 / tril[0]
    u2 = (r2 - tril[1] * u1) / tril[2]
    return (
        -LOG_2PI - dc.log(tril[0]) - dc.log(tril[2]) - 0.5 * (u1 * u1 + u2 * u2)
    )


def _gamma_logpdf(x, shape):
    """Log Gamma(x; shape, scale=1), elementwise: (a-1) log x - x - lgamma(a)."""
    return (shape - 1.0) * dc.log(x) - x - dc.lgamma(shape)


def _beta_logpdf(y: np.ndarray, a, b):
    """Log Beta(y; a, b) for constant observations y and tape shapes a, b."""
    logy = np.log(y)
    log1my = np.log1p(-y)
    return (
        (a - 1.0) * logy
        + (b - 1.0) * log1my
        - dc.lgamma(a)
        - dc.lgamma(b)
        + dc.lgamma(a + b)
    )


# -- Stuart-Landau oscillator ------------------------------------------------------


def sl_step_mean_core(x, y, a1, a2, b1, b2):
    """Deterministic part of the Stuart-Landau step; works on arrays or Tensors."""
    r2 = x * x + y * y
    nx = x + a1 * x - b1 * y - r2 * (a2 * x - b2 * y)
    ny = y + a1 * y + b1 * x - r2 * (a2 * y + b2 * x)
    return nx, ny


def _sl_log_terms(theta, fixed, X: Tensor, Y: np.ndarray):
    a1 = fixed["a1"]
    dyn = theta["dyn"]
    a2, b1, b2 = dyn[0], dyn[1], dyn[2]
    A = theta["noise_tril"]
    C = theta["init_tril"]
    mu = theta["init_mean"]
    b_obs = theta["obs_scale"][0]

    init = _gauss2_tril(X[:, 0, 0] - mu[0], X[:, 0, 1] - mu[1], C)

    mx, my = sl_step_mean_core(X[:, :-1, 0], X[:, :-1, 1], a1, a2, b1, b2)
    trans = _gauss2_tril(X[:, 1:, 0] - mx, X[:, 1:, 1] - my, A).sum(axis=1)

    # the second latent coordinate is observed under Gaussian noise
    obs = _gauss1(Y[:, :, 0] - X[:, :, 1], b_obs).sum(axis=1)
    return init, trans, obs


def _sl_init_blocks(rng) -> dict[str, np.ndarray]:
    """Random restart draw in unconstrained space.

    Noise scales start broad (overdispersed relative to the benchmarks) and
    shrink during training; the reverse direction is the unstable one, and a
    broad start also keeps early dynamics mismatch from slingshotting the
    scale parameters.
    """
    s_noise = rng.uniform(0.6, 1.2)
    s_obs = rng.uniform(0.3, 0.8)
    s_init = rng.uniform(0.6, 1.2)
    return {
        "dyn": rng.uniform([0.2, 0.1, -0.1], [1.5, 1.0, 0.3]) / RAW_SCALE,
        "noise_tril": np.array([_inv_softplus(s_noise), 0.0, _inv_softplus(s_noise)]),
        "obs_scale": np.array([np.log(s_obs)]),
        "init_mean": rng.uniform(-1.0, 1.0, 2) / RAW_SCALE,
        "init_tril": np.array([_inv_softplus(s_init), 0.0, _inv_softplus(s_init)]),
    }


STUART_LANDAU = SSMDefinition(
    name="stuart-landau",
    state_dim=2,
    obs_dim=1,
    latent_support="unbounded",
    blocks=(
        ParamBlock("dyn", ROLE_Q, 3, "scaled"),  # a2, b1, b2
        ParamBlock("noise_tril", ROLE_Q, 3, "tril2"),
        ParamBlock("obs_scale", ROLE_R, 1, "positive"),
        ParamBlock("init_mean", ROLE_P0, 2, "scaled"),
        ParamBlock("init_tril", ROLE_P0, 3, "tril2"),
    ),
    log_terms=_sl_log_terms,
    fixed_names=("a1",),
    init_blocks=_sl_init_blocks,
)


@dataclass
class StuartLandauParams:
    """Constrained Stuart-Landau parameters (a1 is fixed, not estimated)."""

    a1: float
    a2: float
    b1: float
    b2: float
    A: np.ndarray  # (2,2) lower triangular, positive diagonal
    b: float
    mu_x: float
    mu_y: float
    C: np.ndarray  # (2,2) lower triangular, positive diagonal

    def to_cluster(self) -> ClusterParams:
        values = {
            "dyn": [self.a2, self.b1, self.b2],
            "noise_tril": [self.A[0, 0], self.A[1, 0], self.A[1, 1]],
            "obs_scale": [self.b],
            "init_mean": [self.mu_x, self.mu_y],
            "init_tril": [self.C[0, 0], self.C[1, 0], self.C[1, 1]],
        }
        return ClusterParams.from_constrained(STUART_LANDAU, values, {"a1": self.a1})

    @classmethod
    def from_cluster(cls, cp: ClusterParams) -> "StuartLandauParams":
        v = cp.constrained()
        return cls(
            a1=cp.fixed["a1"],
            a2=v["dyn"][0],
            b1=v["dyn"][1],
            b2=v["dyn"][2],
            A=np.array([[v["noise_tril"][0], 0.0], [v["noise_tril"][1], v["noise_tril"][2]]]),
            b=v["obs_scale"][0],
            mu_x=v["init_mean"][0],
            mu_y=v["init_mean"][1],
            C=np.array([[v["init_tril"][0], 0.0], [v["init_tril"][1], v["init_tril"][2]]]),
        )


def sl_step_mean(state, p: StuartLandauParams) -> np.ndarray:
    """Noise-free next state of the Stuart-Landau oscillator."""
    x, y = float(state[0]), float(state[1])
    nx, ny = sl_step_mean_core(x, y, p.a1, p.a2, p.b1, p.b2)
    return np.array([nx, ny])


# -- SIR model (normalized-Gamma form) ---------------------------------------------


def sir_drift_core(rs, ri, rr, beta, gamma):
    """SIR mean-field update; polymorphic over arrays and Tensors."""
    si = rs * ri
    fs = rs - beta * si
    fi = ri + beta * si - gamma * ri
    fr = rr + gamma * ri
    return fs, fi, fr


def _sir_log_terms(theta, fixed, X: Tensor, Y: np.ndarray):
    beta, gamma = theta["rates"][0], theta["rates"][1]
    conc_q = dc.exp(theta["trans_conc"][0] * LN10)  # 10^a
    conc_r = dc.exp(theta["obs_conc"][0] * LN10)  # 10^b
    conc_p0 = dc.exp(theta["init_conc"][0] * LN10)  # 10^c
    rho_init = theta["init_simplex"]

    # latents are the positive Gamma variates G; rho is their normalization
    total = X.sum(axis=2, keepdims=True)
    rho = X / total

    init = (
        _gamma_logpdf(X[:, 0, 0], conc_p0 * rho_init[0])
        + _gamma_logpdf(X[:, 0, 1], conc_p0 * rho_init[1])
        + _gamma_logpdf(X[:, 0, 2], conc_p0 * rho_init[2])
    )

    fs, fi, fr = sir_drift_core(
        rho[:, :-1, 0], rho[:, :-1, 1], rho[:, :-1, 2], beta, gamma
    )
    trans = (
        _gamma_logpdf(X[:, 1:, 0], conc_q * fs)
        + _gamma_logpdf(X[:, 1:, 1], conc_q * fi)
        + _gamma_logpdf(X[:, 1:, 2], conc_q * fr)
    ).sum(axis=1)

    # simulated observations can hit the Beta boundary; clamp before evaluating
    y = np.clip(Y[:, :, 0], 1e-6, 1.0 - 1e-6)
    ri_obs = rho[:, :, 1]
    obs = _beta_logpdf(y, conc_r * ri_obs, conc_r * (1.0 - ri_obs)).sum(axis=1)
    return init, trans, obs


def _sir_init_blocks(rng) -> dict[str, np.ndarray]:
    # concentrations start low (broad noise) so the early posterior mismatch
    # stays mild; they sharpen during training
    return {
        "rates": np.log(rng.uniform([0.15, 0.02], [1.0, 0.2])),
        "trans_conc": rng.uniform(1.0, 2.0, 1) / RAW_SCALE,
        "obs_conc": rng.uniform(1.5, 2.5, 1) / RAW_SCALE,
        "init_conc": rng.uniform(1.0, 2.0, 1) / RAW_SCALE,
        "init_simplex": rng.uniform(-0.3, 0.3, 2),
    }


SIR = SSMDefinition(
    name="sir",
    state_dim=3,
    obs_dim=1,
    latent_support="positive",
    blocks=(
        ParamBlock("rates", ROLE_Q, 2, "positive"),  # beta, gamma
        ParamBlock("trans_conc", ROLE_Q, 1, "scaled"),  # a (log10 concentration)
        ParamBlock("obs_conc", ROLE_R, 1, "scaled"),  # b
        ParamBlock("init_conc", ROLE_P0, 1, "scaled"),  # c
        ParamBlock("init_simplex", ROLE_P0, 2, "simplex"),  # rho_init
    ),
    log_terms=_sir_log_terms,
    init_blocks=_sir_init_blocks,
)


@dataclass
class SIRParams:
    """Constrained SIR parameters."""

    beta: float
    gamma: float
    a: float
    b: float
    c: float
    rho_init: np.ndarray  # (3,) on the simplex

    def to_cluster(self) -> ClusterParams:
        values = {
            "rates": [self.beta, self.gamma],
            "trans_conc": [self.a],
            "obs_conc": [self.b],
            "init_conc": [self.c],
            "init_simplex": np.asarray(self.rho_init),
        }
        return ClusterParams.from_constrained(SIR, values)

    @classmethod
    def from_cluster(cls, cp: ClusterParams) -> "SIRParams":
        v = cp.constrained()
        return cls(
            beta=v["rates"][0],
            gamma=v["rates"][1],
            a=v["trans_conc"][0],
            b=v["obs_conc"][0],
            c=v["init_conc"][0],
            rho_init=v["init_simplex"].copy(),
        )


def sir_drift(rho, p: SIRParams) -> np.ndarray:
    """One deterministic SIR step on the 3-simplex; output sums to 1 exactly."""
    rho = np.asarray(rho, dtype=np.float64)
    if rho.shape != (3,) or np.any(rho < 0) or abs(rho.sum() - 1.0) > 1e-9:
        raise ValueError(f"rho must be on the 3-simplex, got {rho}")
    fs, fi, fr = sir_drift_core(rho[0], rho[1], rho[2], p.beta, p.gamma)
    return np.array([fs, fi, fr])


def gamma_normalize(g) -> np.ndarray:
    """Normalize positive Gamma variates to the simplex."""
    g = np.asarray(g, dtype=np.float64)
    if np.any(g <= 0):
        raise ValueError(f"all components must be positive, got {g}")
    return g / g.sum()


MODELS: dict[str, SSMDefinition] = {
    STUART_LANDAU.name: STUART_LANDAU,
    SIR.name: SIR,
}


# -- log joints -------------------------------------------------------------------


def _check_support(model: SSMDefinition, X: np.ndarray) -> None:
    if model.latent_support == "positive" and np.any(X <= 0):
        raise ValueError(f"latent trajectory outside the support of {model.name}")


def constrained_theta_graph(params: ClusterParams, leaves: dict[str, Tensor]) -> dict:
    """Constrained block tensors from unconstrained leaves (for tape use)."""
    return {
        b.name: constrain_graph(leaves[b.name], b.transform)
        for b in params.model.blocks
    }


def log_joint_terms_graph(
    model: SSMDefinition, theta: dict, fixed: dict, X: Tensor, Y: np.ndarray
):
    """(init, trans, obs) log-density terms for a (B, T, d) trajectory batch."""
    return model.log_terms(theta, fixed, X, Y)


def log_joint_graph(
    model: SSMDefinition, theta: dict, fixed: dict, X: Tensor, Y: np.ndarray
) -> Tensor:
    init, trans, obs = model.log_terms(theta, fixed, X, Y)
    return init + trans + obs


def _single_series_terms(params: ClusterParams, X, Y):
    model = params.model
    X = np.asarray(X, dtype=np.float64).reshape(1, -1, model.state_dim)
    Y = np.asarray(Y, dtype=np.float64).reshape(1, X.shape[1], model.obs_dim)
    _check_support(model, X)

    def program(leaves, _):
        theta = constrained_theta_graph(params, leaves)
        init, trans, obs = model.log_terms(theta, params.fixed, Tensor(X), Y)
        return dc.stack([init[0], trans[0], obs[0]], axis=0)

    out = dc.evaluate(program, params.blocks, None)
    return float(out[0]), float(out[1]), float(out[2])


def log_joint_terms(params: ClusterParams, X, Y) -> tuple[float, float, float]:
    """(initial, transition, observation) log-density terms for one series."""
    return _single_series_terms(params, X, Y)


def log_joint(params: ClusterParams, X, Y) -> float:
    """Complete-data log density log p(X, Y | theta) for one series.

    For a length-1 series this is log p0(x1) + log r(y1 | x1); otherwise the
    transition terms for t = 2..T are added.
    """
    init, trans, obs = _single_series_terms(params, X, Y)
    return init + trans + obs


def mixture_log_joint(theta: MixtureParams, k: int, X, Y) -> float:
    """log p^(k) + log p(X, Y | theta^(k)); k is 1-based."""
    if not 1 <= k <= theta.n_clusters:
        raise ValueError(f"cluster index {k} out of range 1..{theta.n_clusters}")
    log_w = np.log(theta.weights()[k - 1])
    return log_w + log_joint(theta.clusters[k - 1], X, Y)
