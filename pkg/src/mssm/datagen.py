"""Synthetic benchmark datasets and the dataset file format.

Generation is a pure function of (parameters, n_per_cluster, T, seed): each
series draws from its own derived random stream keyed by (seed, series index),
so output does not depend on generation order.

The file format is line-oriented UTF-8 text: `#key=value` header lines
(model, seed, T, obs_dim first, then any extra metadata), one
`series_id,t,y_1..y_d` line per observation with 17 significant digits, and an
optional trailing `#labels` block of `series_id,label` lines.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np

from .diffcore import SeededRng
from .ssm import SIRParams, StuartLandauParams, sir_drift_core, sl_step_mean_core


class DataFormatError(ValueError):
    """Malformed dataset file; message carries the offending line number."""


@dataclass
class TimeSeriesDataset:
    values: np.ndarray  # (N, T, obs_dim)
    labels: np.ndarray | None = None  # (N,) 1-based cluster indices
    metadata: dict[str, str] = field(default_factory=dict)
    ids: np.ndarray | None = None  # (N,) series ids; defaults to 1..N

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=np.float64)
        if self.values.ndim != 3:
            raise ValueError("values must have shape (N, T, obs_dim)")
        if self.ids is None:
            self.ids = np.arange(1, len(self.values) + 1)
        if self.labels is not None:
            self.labels = np.asarray(self.labels, dtype=np.int64)
            if len(self.labels) != len(self.values):
                raise ValueError("labels length must match series count")

    @property
    def n_series(self) -> int:
        return self.values.shape[0]

    @property
    def n_steps(self) -> int:
        return self.values.shape[1]

    @property
    def obs_dim(self) -> int:
        return self.values.shape[2]


# -- benchmark parameter tables ---------------------------------------------------


def stuart_landau_benchmark() -> list[StuartLandauParams]:
    """Three oscillator regimes differing in (a2, b1, b2)."""
    eye05 = 0.05 * np.eye(2)
    shared = dict(a1=1.0, A=eye05, b=0.05, mu_x=1.0, mu_y=0.0, C=eye05)
    return [
        StuartLandauParams(a2=0.5, b1=0.5, b2=0.1, **shared),
        StuartLandauParams(a2=1.5, b1=0.8, b2=0.2, **shared),
        StuartLandauParams(a2=1.0, b1=0.2, b2=0.0, **shared),
    ]


def sir_benchmark() -> list[SIRParams]:
    """Fast and slow epidemics with identical noise concentrations."""
    rho0 = np.array([0.95, 0.04, 0.01])
    return [
        SIRParams(beta=0.9, gamma=0.1, a=3.0, b=3.0, c=2.0, rho_init=rho0.copy()),
        SIRParams(beta=0.3, gamma=0.05, a=3.0, b=3.0, c=2.0, rho_init=rho0.copy()),
    ]


# -- generators -------------------------------------------------------------------


def _sl_params_json(p: StuartLandauParams) -> dict:
    return {
        "a1": p.a1, "a2": p.a2, "b1": p.b1, "b2": p.b2,
        "A": np.asarray(p.A).tolist(), "b": p.b,
        "mu_x": p.mu_x, "mu_y": p.mu_y, "C": np.asarray(p.C).tolist(),
    }


def _sir_params_json(p: SIRParams) -> dict:
    return {
        "beta": p.beta, "gamma": p.gamma, "a": p.a, "b": p.b, "c": p.c,
        "rho_init": np.asarray(p.rho_init).tolist(),
    }


def gen_stuart_landau(
    cluster_params: list[StuartLandauParams],
    n_per_cluster: int,
    T: int,
    seed: int,
    return_latents: bool = False,
):
    """Labeled dataset of noisy Stuart-Landau observations (obs_dim 1).

    Each series starts from N(mu, CC^T), evolves with process noise N(0, AA^T)
    around the deterministic step, and is observed as the second latent
    coordinate plus N(0, b^2) noise.
    """
    if T < 2:
        raise ValueError("T must be >= 2")
    root = SeededRng(seed)
    n = len(cluster_params) * n_per_cluster
    values = np.empty((n, T, 1))
    latents = np.empty((n, T, 2))
    labels = np.empty(n, dtype=np.int64)
    i = 0
    for k, p in enumerate(cluster_params):
        A, C = np.asarray(p.A, dtype=np.float64), np.asarray(p.C, dtype=np.float64)
        mu = np.array([p.mu_x, p.mu_y])
        for _ in range(n_per_cluster):
            rng = root.spawn(i)
            x = np.empty((T, 2))
            x[0] = mu + C @ rng.standard_normal(2)
            for t in range(1, T):
                mx, my = sl_step_mean_core(
                    x[t - 1, 0], x[t - 1, 1], p.a1, p.a2, p.b1, p.b2
                )
                x[t] = np.array([mx, my]) + A @ rng.standard_normal(2)
            values[i, :, 0] = x[:, 1] + p.b * rng.standard_normal(T)
            latents[i] = x
            labels[i] = k + 1
            i += 1
    ds = TimeSeriesDataset(
        values,
        labels,
        metadata={
            "model": "stuart-landau",
            "seed": str(seed),
            "T": str(T),
            "obs_dim": "1",
            "params": json.dumps(
                {
                    "clusters": [_sl_params_json(p) for p in cluster_params],
                    "n_per_cluster": n_per_cluster,
                }
            ),
        },
    )
    return (ds, latents) if return_latents else ds


def gen_sir(
    cluster_params: list[SIRParams],
    n_per_cluster: int,
    T: int,
    seed: int,
    return_latents: bool = False,
):
    """Labeled dataset of SIR infection observations (obs_dim 1).

    Latent proportions follow the normalized-Gamma transition (equivalent to
    the Dirichlet form); the observed fraction is a Beta draw centered on the
    infected proportion. Latents returned by `return_latents` are the simplex
    proportions rho, not the raw Gamma variates.
    """
    if T < 2:
        raise ValueError("T must be >= 2")
    for p in cluster_params:
        if np.any(np.asarray(p.rho_init) <= 0):
            raise ValueError("rho_init components must be strictly positive")
    root = SeededRng(seed)
    n = len(cluster_params) * n_per_cluster
    values = np.empty((n, T, 1))
    latents = np.empty((n, T, 3))
    labels = np.empty(n, dtype=np.int64)
    i = 0
    for k, p in enumerate(cluster_params):
        conc_q, conc_r, conc_p0 = 10.0**p.a, 10.0**p.b, 10.0**p.c
        for _ in range(n_per_cluster):
            rng = root.spawn(i)
            rho = np.empty((T, 3))
            g = rng.gamma(conc_p0 * np.asarray(p.rho_init))
            rho[0] = g / g.sum()
            for t in range(1, T):
                fs, fi, fr = sir_drift_core(
                    rho[t - 1, 0], rho[t - 1, 1], rho[t - 1, 2], p.beta, p.gamma
                )
                g = rng.gamma(conc_q * np.array([fs, fi, fr]))
                rho[t] = g / g.sum()
            values[i, :, 0] = rng.beta(conc_r * rho[:, 1], conc_r * (1.0 - rho[:, 1]))
            latents[i] = rho
            labels[i] = k + 1
            i += 1
    ds = TimeSeriesDataset(
        values,
        labels,
        metadata={
            "model": "sir",
            "seed": str(seed),
            "T": str(T),
            "obs_dim": "1",
            "params": json.dumps(
                {
                    "clusters": [_sir_params_json(p) for p in cluster_params],
                    "n_per_cluster": n_per_cluster,
                }
            ),
        },
    )
    return (ds, latents) if return_latents else ds


# -- file format -------------------------------------------------------------------

_LEAD_KEYS = ("model", "seed", "T", "obs_dim")


def _fmt(v: float) -> str:
    return format(float(v), ".17g")


def write_dataset(ds: TimeSeriesDataset, path) -> None:
    lines = []
    for key in _LEAD_KEYS:
        if key in ds.metadata:
            lines.append(f"#{key}={ds.metadata[key]}")
    for key in sorted(ds.metadata):
        if key not in _LEAD_KEYS:
            lines.append(f"#{key}={ds.metadata[key]}")
    for i, sid in enumerate(ds.ids):
        for t in range(ds.n_steps):
            vals = ",".join(_fmt(v) for v in ds.values[i, t])
            lines.append(f"{sid},{t + 1},{vals}")
    if ds.labels is not None:
        lines.append("#labels")
        for sid, lab in zip(ds.ids, ds.labels):
            lines.append(f"{sid},{lab}")
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("\n".join(lines) + "\n")


def read_dataset(path) -> TimeSeriesDataset:
    metadata: dict[str, str] = {}
    rows: dict[int, list[tuple[int, list[float]]]] = {}
    order: list[int] = []
    labels: dict[int, int] = {}
    in_labels = False
    with open(path, encoding="utf-8") as fh:
        for ln, raw in enumerate(fh, start=1):
            line = raw.strip()
            if not line:
                continue
            if line.startswith("#"):
                if line == "#labels":
                    in_labels = True
                    continue
                if "=" not in line:
                    raise DataFormatError(f"line {ln}: malformed header {line!r}")
                key, _, value = line[1:].partition("=")
                metadata[key] = value
                continue
            parts = line.split(",")
            try:
                if in_labels:
                    if len(parts) != 2:
                        raise ValueError
                    labels[int(parts[0])] = int(parts[1])
                else:
                    if len(parts) < 3:
                        raise ValueError
                    sid, t = int(parts[0]), int(parts[1])
                    if sid not in rows:
                        rows[sid] = []
                        order.append(sid)
                    rows[sid].append((t, [float(v) for v in parts[2:]]))
            except ValueError:
                raise DataFormatError(f"line {ln}: cannot parse {line!r}") from None
    if not rows:
        raise DataFormatError("line 0: no data rows")
    lengths = {len(v) for v in rows.values()}
    if len(lengths) != 1:
        raise DataFormatError(
            f"line 0: inconsistent series lengths {sorted(lengths)}"
        )
    T = lengths.pop()
    dims = {len(v) for series in rows.values() for _, v in series}
    if len(dims) != 1:
        raise DataFormatError(f"line 0: inconsistent observation dims {sorted(dims)}")
    obs_dim = dims.pop()
    values = np.empty((len(order), T, obs_dim))
    for i, sid in enumerate(order):
        series = sorted(rows[sid])
        if [t for t, _ in series] != list(range(1, T + 1)):
            raise DataFormatError(f"line 0: series {sid} missing time steps")
        values[i] = np.array([v for _, v in series])
    label_arr = None
    if labels:
        missing = [sid for sid in order if sid not in labels]
        if missing:
            raise DataFormatError(f"line 0: labels missing for series {missing[:5]}")
        label_arr = np.array([labels[sid] for sid in order], dtype=np.int64)
    return TimeSeriesDataset(
        values, label_arr, metadata, ids=np.array(order, dtype=np.int64)
    )
