"""Shared test fixtures: toy conjugate models and small training utilities."""

import numpy as np

from mssm import diffcore as dc
from mssm import trainer as tr
from mssm import varpost as vp
from mssm.diffcore import SeededRng, Tensor
from mssm.ssm import (
    ROLE_P0,
    ROLE_Q,
    ROLE_R,
    ClusterParams,
    MixtureParams,
    ParamBlock,
    SSMDefinition,
)

LOG_2PI = float(np.log(2 * np.pi))


def _gauss_term(resid, log_scale):
    scale = dc.exp(log_scale)
    u = resid / scale
    return -0.5 * LOG_2PI - log_scale - 0.5 * (u * u)


def _conjugate_terms(theta, fixed, X, Y):
    """x ~ N(m0, s0^2); y_t = x_t + N(0, r^2); random walk x_t = x_{t-1}+N(0,q^2)."""
    init = _gauss_term(X[:, 0, 0] - theta["init_mean"][0], theta["init_log_scale"][0])
    if X.shape[1] > 1:
        trans = _gauss_term(
            X[:, 1:, 0] - X[:, :-1, 0], theta["trans_log_scale"][0]
        ).sum(axis=1)
    else:
        trans = init * 0.0
    obs = _gauss_term(Y[:, :, 0] - X[:, :, 0], theta["obs_log_scale"][0]).sum(axis=1)
    return init, trans, obs


CONJUGATE_RW = SSMDefinition(
    name="conjugate-rw",
    state_dim=1,
    obs_dim=1,
    latent_support="unbounded",
    blocks=(
        ParamBlock("trans_log_scale", ROLE_Q, 1),
        ParamBlock("obs_log_scale", ROLE_R, 1),
        ParamBlock("init_mean", ROLE_P0, 1),
        ParamBlock("init_log_scale", ROLE_P0, 1),
    ),
    log_terms=_conjugate_terms,
)


def conjugate_cluster(m0=0.3, s0=0.8, q=0.5, r=0.4) -> ClusterParams:
    return ClusterParams.from_constrained(
        CONJUGATE_RW,
        {
            "init_mean": [m0],
            "init_log_scale": [np.log(s0)],
            "trans_log_scale": [np.log(q)],
            "obs_log_scale": [np.log(r)],
        },
    )


def _ar1_terms(theta, fixed, X, Y):
    """Two-cluster toy: x_t = rho x_{t-1} + noise, y = x + noise."""
    rho = theta["rho"][0]
    init = _gauss_term(X[:, 0, 0] - theta["init_mean"][0], theta["init_log_scale"][0])
    trans = _gauss_term(X[:, 1:, 0] - rho * X[:, :-1, 0], theta["trans_log_scale"][0]).sum(
        axis=1
    )
    obs = _gauss_term(Y[:, :, 0] - X[:, :, 0], theta["obs_log_scale"][0]).sum(axis=1)
    return init, trans, obs


def _ar1_init(rng):
    return {
        "rho": rng.uniform(-0.5, 0.5, 1) / 0.1,
        "trans_log_scale": np.log(rng.uniform(0.3, 1.0, 1)),
        "obs_log_scale": np.log(rng.uniform(0.3, 1.0, 1)),
        "init_mean": np.zeros(1),
        "init_log_scale": np.log(rng.uniform(0.5, 1.5, 1)),
    }


AR1 = SSMDefinition(
    name="toy-ar1",
    state_dim=1,
    obs_dim=1,
    latent_support="unbounded",
    blocks=(
        ParamBlock("rho", ROLE_Q, 1, "scaled"),
        ParamBlock("trans_log_scale", ROLE_Q, 1),
        ParamBlock("obs_log_scale", ROLE_R, 1),
        ParamBlock("init_mean", ROLE_P0, 1),
        ParamBlock("init_log_scale", ROLE_P0, 1),
    ),
    log_terms=_ar1_terms,
    init_blocks=_ar1_init,
)


def gen_ar1_dataset(n_per_cluster=20, T=20, seed=0, rhos=(0.9, -0.6)):
    """Labeled two-cluster AR(1) observations with unit-ish noise scales."""
    root = SeededRng(seed)
    rows, labels = [], []
    for k, rho in enumerate(rhos):
        for j in range(n_per_cluster):
            rng = root.spawn(k * n_per_cluster + j)
            x = np.empty(T)
            x[0] = rng.standard_normal() * 0.8
            for t in range(1, T):
                x[t] = rho * x[t - 1] + 0.3 * rng.standard_normal()
            rows.append(x + 0.2 * rng.standard_normal(T))
            labels.append(k + 1)
    values = np.asarray(rows)[:, :, None]
    return values, np.asarray(labels)


def train_phi_only(
    theta: MixtureParams,
    phi: vp.VariationalParams,
    values: np.ndarray,
    epochs: int,
    lr: float,
    rng: SeededRng,
    batch_size: int = 64,
):
    """Plain SGD on the variational parameters with the generative side frozen."""
    params = tr.pack_params(theta, phi)
    model = theta.model
    fixeds = [cp.fixed for cp in theta.clusters]
    N, T, _ = values.shape
    for _ in range(epochs):
        perm = rng.permutation(N)
        for s in range(0, N, batch_size):
            idx = perm[s : s + batch_size]
            Y = values[idx]
            eps = rng.standard_normal((len(idx), T, model.state_dim))
            inputs = (model, phi.net, theta.n_clusters, fixeds, Y, eps, 0.0)
            loss, grads = dc.value_and_grad(tr._loss_program, params, inputs)
            assert np.isfinite(loss)
            for name, g in grads.items():
                if name.startswith("phi."):
                    params[name] -= lr * g
    return tr.unpack_params(params, theta, phi)
