"""Amortized variational posterior.

q(X | z, Y) is built from a bidirectional GRU encoder that emits, per time
step, a diagonal-Gaussian base distribution (mean, log scale) and a flow
conditioning context; a stack of affine coupling flows with shared weights
across time then transforms each step's base sample. q(z | Y) is a separate
GRU classifier with a softmax head. All weights live in one flat block dict so
the trainer can treat them uniformly.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import diffcore as dc
from .diffcore import SeededRng, Tensor
from .ssm import LOG_2PI, SSMDefinition


class FlowError(Exception):
    """Non-finite value inside a flow layer; carries the layer index."""

    def __init__(self, layer: int, direction: str):
        self.layer = layer
        super().__init__(f"non-finite value in flow layer {layer} ({direction})")


@dataclass(frozen=True)
class NetworkConfig:
    hidden: int = 16
    context_dim: int = 8
    flow_layers: int = 2
    flow_hidden: int = 16
    scale_cap: float = 3.0  # coupling log-scales are bounded to (-cap, cap)


# base log-scales are soft-bounded to (-S_CAP, S_CAP); keeps exp() finite under
# aggressive SGD steps while leaving tanh(0) = 0 behaviour for zero weights
S_CAP = 6.0
# head bias starts the base scale near exp(-1.5) so early posterior samples
# stay on the data scale instead of N(0, 1)
INIT_LOG_SCALE = -1.5
# mean and flow outputs are multiplied by this constant; it divides the loss
# curvature of those directions by 1/OUT_SCALE^2 so one global SGD rate covers
# both broad early noise scales and sharp late ones
OUT_SCALE = 0.1


@dataclass
class EncoderOutput:
    """Per-step base distribution and flow context for one series."""

    mu: np.ndarray  # (T, state_dim)
    log_scale: np.ndarray  # (T, state_dim)
    context: np.ndarray  # (T, context_dim)


@dataclass
class VariationalParams:
    """All weights of the approximate posterior for a fixed cluster count."""

    model: SSMDefinition
    n_clusters: int
    net: NetworkConfig
    blocks: dict[str, np.ndarray] = field(default_factory=dict)

    def copy(self) -> "VariationalParams":
        return VariationalParams(
            self.model,
            self.n_clusters,
            self.net,
            {k: v.copy() for k, v in self.blocks.items()},
        )


def _uniform(rng: SeededRng, shape, fan_in: int) -> np.ndarray:
    bound = 1.0 / np.sqrt(fan_in)
    return rng.uniform(-bound, bound, shape)


def init_variational_params(
    model: SSMDefinition, n_clusters: int, net: NetworkConfig, rng: SeededRng
) -> VariationalParams:
    """Fan-in uniform GRU weights; zero heads and zero flow output layers.

    The zero classifier head makes training start from uniform
    responsibilities, and zero flow output layers make every coupling layer the
    identity (logdet exactly 0).
    """
    d, c, h = model.state_dim, net.context_dim, net.hidden
    din_enc = model.obs_dim + n_clusters
    blocks: dict[str, np.ndarray] = {}
    for pfx, din in (("enc.fw", din_enc), ("enc.bw", din_enc), ("cls", model.obs_dim)):
        blocks[f"{pfx}.wx"] = _uniform(rng, (din, 3 * h), din)
        blocks[f"{pfx}.wh"] = _uniform(rng, (h, 3 * h), h)
        blocks[f"{pfx}.b"] = np.zeros(3 * h)
    # head input is [h_fw, h_bw, y_t]: the raw-observation skip lets the base
    # mean latch onto the observed coordinate within a few SGD steps
    blocks["enc.head.w"] = np.zeros((2 * h + model.obs_dim, 2 * d + c))
    head_b = np.zeros(2 * d + c)
    head_b[d : 2 * d] = INIT_LOG_SCALE
    blocks["enc.head.b"] = head_b
    for i in range(net.flow_layers):
        blocks[f"flow.{i}.w1"] = _uniform(rng, (d + c, net.flow_hidden), d + c)
        blocks[f"flow.{i}.b1"] = np.zeros(net.flow_hidden)
        blocks[f"flow.{i}.w2"] = np.zeros((net.flow_hidden, 2 * d))
        blocks[f"flow.{i}.b2"] = np.zeros(2 * d)
    blocks["cls.out.w"] = np.zeros((h, n_clusters))
    blocks["cls.out.b"] = np.zeros(n_clusters)
    return VariationalParams(model, n_clusters, net, blocks)


def coupling_mask(layer: int, dim: int) -> np.ndarray:
    """Alternating binary mask; 1 marks the coordinates a layer passes through."""
    return np.array([(j + layer) % 2 == 0 for j in range(dim)], dtype=np.float64)


def onehot_inputs(Y: np.ndarray, z: int, n_clusters: int) -> np.ndarray:
    """Encoder input: observations with the cluster one-hot appended per step."""
    B, T, _ = Y.shape
    oh = np.zeros((B, T, n_clusters))
    oh[:, :, z - 1] = 1.0
    return np.concatenate([Y, oh], axis=2)


# -- graph builders (used by the trainer; leaves come in pre-wrapped) -----------


def gru_sequence_graph(ph: dict, inputs: np.ndarray, prefix: str, hidden: int, reverse=False):
    """Hidden states of one GRU direction over a (B, T, Din) input block."""
    B, T, _ = inputs.shape
    h = Tensor(np.zeros((B, hidden)))
    steps = range(T - 1, -1, -1) if reverse else range(T)
    hs: list = [None] * T
    for t in steps:
        h = dc.gru_cell(
            Tensor(inputs[:, t, :]),
            h,
            ph[f"{prefix}.wx"],
            ph[f"{prefix}.wh"],
            ph[f"{prefix}.b"],
        )
        hs[t] = h
    return hs


def encoder_graph(
    ph: dict, inputs: np.ndarray, net: NetworkConfig, state_dim: int, obs_dim: int
):
    """(mu, log_scale, context) tensors of shape (B, T, .) for q(X | z, Y).

    The head emits the base mean in units of the base scale (mu = exp(s) * m),
    which keeps the loss curvature w.r.t. the mean path O(1) even when the
    generative noise scales become small; a plain global SGD step stays stable
    through the whole fit. Zero weights still give mu = 0, s = 0.
    """
    hf = gru_sequence_graph(ph, inputs, "enc.fw", net.hidden)
    hb = gru_sequence_graph(ph, inputs, "enc.bw", net.hidden, reverse=True)
    hcat = dc.concat(
        [dc.stack(hf, axis=1), dc.stack(hb, axis=1), Tensor(inputs[:, :, :obs_dim])],
        axis=2,
    )  # (B, T, 2H + obs_dim)
    out = dc.matmul(hcat, ph["enc.head.w"]) + ph["enc.head.b"]
    d = state_dim
    log_scale = dc.tanh(out[:, :, d : 2 * d] * (1.0 / S_CAP)) * S_CAP
    mu = out[:, :, :d] * OUT_SCALE
    return mu, log_scale, out[:, :, 2 * d :]


def classifier_graph(ph: dict, Y: np.ndarray, net: NetworkConfig):
    """(q, log_q) tensors of shape (B, M) for q(z | Y)."""
    hs = gru_sequence_graph(ph, Y, "cls", net.hidden)
    pooled = dc.stack(hs, axis=1).mean(axis=1)  # (B, H)
    logits = dc.matmul(pooled, ph["cls.out.w"]) + ph["cls.out.b"]
    log_q = logits - dc.logsumexp(logits, axis=1, keepdims=True)
    return dc.exp(log_q), log_q


def flow_forward_graph(ph: dict, xi: Tensor, ctx: Tensor, net: NetworkConfig, dim: int):
    """Push (B, T, d) base samples through the coupling stack.

    Returns the transformed tensor and the per-step log-determinant (B, T).
    """
    x = xi
    logdet = None
    for i in range(net.flow_layers):
        m = coupling_mask(i, dim)
        xm = x * m
        inp = dc.concat([xm, ctx], axis=2)
        hid = dc.tanh(dc.matmul(inp, ph[f"flow.{i}.w1"]) + ph[f"flow.{i}.b1"])
        out = dc.matmul(hid, ph[f"flow.{i}.w2"]) + ph[f"flow.{i}.b2"]
        cap = net.scale_cap
        s = dc.tanh(out[:, :, :dim] * (OUT_SCALE / cap)) * cap * (1.0 - m)
        t = out[:, :, dim:] * (OUT_SCALE * (1.0 - m))
        x = xm + (1.0 - m) * (x * dc.exp(s) + t)
        step_ld = s.sum(axis=2)
        logdet = step_ld if logdet is None else logdet + step_ld
    if logdet is None:
        logdet = Tensor(np.zeros(xi.shape[:2]))
    return x, logdet


def sample_path_graph(
    ph: dict,
    inputs: np.ndarray,
    eps: np.ndarray,
    net: NetworkConfig,
    model: SSMDefinition,
):
    """Reparameterized trajectory sample and its log density, batched.

    xi_t = mu_t + exp(s_t) * eps_t, then the flow stack, then (for positive
    latent support) an elementwise exp with its log-Jacobian correction.
    Returns (X, logq) with X (B, T, d) on the latent support and logq (B,).
    """
    d = model.state_dim
    mu, s, ctx = encoder_graph(ph, inputs, net, d, model.obs_dim)
    xi = mu + dc.exp(s) * eps
    u = (xi - mu) / dc.exp(s)
    base = (-0.5 * LOG_2PI - s - 0.5 * (u * u)).sum(axis=(1, 2))
    x, logdet = flow_forward_graph(ph, xi, ctx, net, d)
    logq = base - logdet.sum(axis=1)
    if model.latent_support == "positive":
        logq = logq - x.sum(axis=(1, 2))
        x = dc.exp(x)
    return x, logq


# -- numpy flow paths (no gradients; exact same arithmetic as the graphs) --------


def _conditioner_np(ph: dict, i: int, xm: np.ndarray, ctx: np.ndarray, net, dim: int):
    inp = np.concatenate([xm, ctx], axis=-1)
    hid = np.tanh(inp @ ph[f"flow.{i}.w1"] + ph[f"flow.{i}.b1"])
    out = hid @ ph[f"flow.{i}.w2"] + ph[f"flow.{i}.b2"]
    cap = net.scale_cap
    s = np.tanh(out[..., :dim] * (OUT_SCALE / cap)) * cap
    return s, out[..., dim:] * OUT_SCALE


def _flow_forward_np(ph: dict, xi: np.ndarray, ctx: np.ndarray, net, dim: int):
    x = xi
    logdet = np.zeros(xi.shape[:-1])
    for i in range(net.flow_layers):
        m = coupling_mask(i, dim)
        xm = x * m
        s, t = _conditioner_np(ph, i, xm, ctx, net, dim)
        s, t = s * (1.0 - m), t * (1.0 - m)
        x = xm + (1.0 - m) * (x * np.exp(s) + t)
        if not np.all(np.isfinite(x)):
            raise FlowError(i, "forward")
        logdet = logdet + s.sum(axis=-1)
    return x, logdet


def _flow_inverse_np(ph: dict, x: np.ndarray, ctx: np.ndarray, net, dim: int):
    xi = x
    logdet = np.zeros(x.shape[:-1])
    for i in range(net.flow_layers - 1, -1, -1):
        m = coupling_mask(i, dim)
        xm = xi * m
        s, t = _conditioner_np(ph, i, xm, ctx, net, dim)
        s, t = s * (1.0 - m), t * (1.0 - m)
        xi = xm + (1.0 - m) * ((xi - t) * np.exp(-s))
        if not np.all(np.isfinite(xi)):
            raise FlowError(i, "inverse")
        logdet = logdet + s.sum(axis=-1)
    return xi, logdet


# -- public single-series operations ---------------------------------------------


def _check_z(phi: VariationalParams, z: int) -> None:
    if not 1 <= z <= phi.n_clusters:
        raise ValueError(f"cluster index {z} out of range 1..{phi.n_clusters}")


def _series(Y: np.ndarray, obs_dim: int) -> np.ndarray:
    Y = np.asarray(Y, dtype=np.float64)
    return Y.reshape(1, -1, obs_dim)


def encode(Y: np.ndarray, z: int, phi: VariationalParams) -> EncoderOutput:
    """Deterministic per-step base parameters and flow context for one series."""
    _check_z(phi, z)
    Yb = _series(Y, phi.model.obs_dim)
    inputs = onehot_inputs(Yb, z, phi.n_clusters)
    d = phi.model.state_dim

    def program(ph, _):
        mu, s, ctx = encoder_graph(ph, inputs, phi.net, d, phi.model.obs_dim)
        return dc.concat([mu, s, ctx], axis=2)

    out = dc.evaluate(program, phi.blocks, None)[0]
    return EncoderOutput(out[:, :d], out[:, d : 2 * d], out[:, 2 * d :])


def flow_forward(xi, context, phi: VariationalParams):
    """Apply the flow stack to one vector (or a batch of vectors).

    Returns (x, logdet); logdet is a float for a single vector input.
    """
    xi = np.asarray(xi, dtype=np.float64)
    ctx = np.asarray(context, dtype=np.float64)
    single = xi.ndim == 1
    d = phi.model.state_dim
    x, logdet = _flow_forward_np(
        phi.blocks, np.atleast_2d(xi), np.atleast_2d(ctx), phi.net, d
    )
    return (x[0], float(logdet[0])) if single else (x, logdet)


def flow_inverse(x, context, phi: VariationalParams):
    """Invert the flow stack (exact for coupling layers)."""
    x = np.asarray(x, dtype=np.float64)
    ctx = np.asarray(context, dtype=np.float64)
    single = x.ndim == 1
    xi, _ = _flow_inverse_np(
        phi.blocks, np.atleast_2d(x), np.atleast_2d(ctx), phi.net, phi.model.state_dim
    )
    return xi[0] if single else xi


def sample_trajectory(Y, z: int, phi: VariationalParams, rng: SeededRng):
    """One reparameterized posterior draw X ~ q(X | z, Y) and its log density."""
    _check_z(phi, z)
    enc = encode(Y, z, phi)
    T, d = enc.mu.shape
    eps = rng.standard_normal((T, d))
    xi = enc.mu + np.exp(enc.log_scale) * eps
    base = (-0.5 * LOG_2PI - enc.log_scale - 0.5 * eps * eps).sum()
    x, logdet = _flow_forward_np(phi.blocks, xi, enc.context, phi.net, d)
    logq = base - logdet.sum()
    if phi.model.latent_support == "positive":
        logq -= x.sum()
        x = np.exp(x)
    return x, float(logq)


def log_density(Y, z: int, phi: VariationalParams, X) -> float:
    """Evaluate log q(X | z, Y) at a given trajectory via the inverse path."""
    _check_z(phi, z)
    enc = encode(Y, z, phi)
    d = phi.model.state_dim
    X = np.asarray(X, dtype=np.float64).reshape(-1, d)
    corr = 0.0
    u = X
    if phi.model.latent_support == "positive":
        u = np.log(X)
        corr = u.sum()
    xi, logdet = _flow_inverse_np(phi.blocks, u, enc.context, phi.net, d)
    w = (xi - enc.mu) / np.exp(enc.log_scale)
    base = (-0.5 * LOG_2PI - enc.log_scale - 0.5 * w * w).sum()
    return float(base - logdet.sum() - corr)


def cluster_posterior(Y, phi: VariationalParams) -> np.ndarray:
    """q(z | Y): a length-M probability vector."""
    Yb = _series(Y, phi.model.obs_dim)

    def program(ph, _):
        q, _lq = classifier_graph(ph, Yb, phi.net)
        return q

    return dc.evaluate(program, phi.blocks, None)[0]
