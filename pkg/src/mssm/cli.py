"""Command-line interface: generate, train, select, evaluate, latents.

Run configuration is a flat text format of `section.key = value` lines (`#`
comments allowed); unknown keys are rejected. Checkpoints are plain text with
a structured header, a full config snapshot, and parameter blocks encoded as
hex IEEE-754 doubles, which round-trips bit-exactly.
"""

from __future__ import annotations

import argparse
import math
import os
import re
import shutil
import sys
from dataclasses import dataclass, field, replace

import numpy as np
from scipy.optimize import linear_sum_assignment

from . import datagen, modelselect, trainer
from .datagen import DataFormatError, TimeSeriesDataset, read_dataset, write_dataset
from .diffcore import SeededRng
from .ssm import (
    MODELS,
    ClusterParams,
    MixtureParams,
    SIRParams,
    SSMDefinition,
    StuartLandauParams,
)
from .trainer import AnnealingSchedule, OptimizerConfig, TrainState, TrainingDiverged
from .varpost import NetworkConfig, VariationalParams

CHECKPOINT_MAGIC = "#mssm-checkpoint v1"


class ConfigError(ValueError):
    pass


# -- run configuration --------------------------------------------------------------

# key -> (type, default); types: int, float, str, floats (comma-separated)
_SCHEMA: dict[str, tuple[str, object]] = {
    "model.name": ("str", ""),
    "model.a1": ("floats", [1.0]),
    "generate.n_per_cluster": ("int", 300),
    "generate.T": ("int", 50),
    "generate.clusters": ("int", 0),  # 0 = benchmark table size
    "train.batch_size": ("int", 25),
    "train.epochs": ("int", 100),
    "train.lr_base": ("float", 1e-3),
    "train.lr_max": ("float", 1e-2),
    "train.cycle_length": ("int", 10),
    "train.converge_epochs": ("int", 20),
    "train.converge_lr": ("float", 1e-3),
    "train.finetune_epochs": ("int", 20),
    "train.finetune_lr": ("float", 1e-3),
    "train.restarts": ("int", 3),
    "train.seed": ("int", 0),
    "anneal.alpha_max": ("float", 1.0),
    "anneal.n_start": ("int", 0),  # 0 = 40% of main epochs
    "anneal.n_end": ("int", 0),  # 0 = 80% of main epochs
    "network.hidden": ("int", 16),
    "network.context_dim": ("int", 8),
    "network.flow_layers": ("int", 2),
    "network.flow_hidden": ("int", 16),
    "network.scale_cap": ("float", 3.0),
    "eval.seed": ("int", 0),
    "eval.samples": ("int", 1),
}

# per-cluster generation overrides, e.g. generate.cluster2.a2 = 0.7
_CLUSTER_KEY = re.compile(r"generate\.cluster(\d+)\.([a-z_0-9]+)$")


def _parse_value(key: str, raw: str):
    kind = _SCHEMA[key][0] if key in _SCHEMA else "floats"
    try:
        if kind == "int":
            return int(raw)
        if kind == "float":
            return float(raw)
        if kind == "floats":
            return [float(v) for v in raw.split(",")]
        return raw
    except ValueError:
        raise ConfigError(f"config key {key}: cannot parse {raw!r} as {kind}") from None


@dataclass
class RunConfig:
    """Validated flat configuration; unset keys fall back to schema defaults."""

    entries: dict[str, str] = field(default_factory=dict)

    def get(self, key: str):
        if key in self.entries:
            return _parse_value(key, self.entries[key])
        if key in _SCHEMA:
            return _SCHEMA[key][1]
        raise KeyError(key)

    def with_entry(self, key: str, value: str) -> "RunConfig":
        new = dict(self.entries)
        new[key] = value
        return RunConfig(new)

    def optimizer(self, seed: int | None = None) -> OptimizerConfig:
        return OptimizerConfig(
            batch_size=self.get("train.batch_size"),
            epochs=self.get("train.epochs"),
            lr_base=self.get("train.lr_base"),
            lr_max=self.get("train.lr_max"),
            cycle_length=self.get("train.cycle_length"),
            converge_epochs=self.get("train.converge_epochs"),
            converge_lr=self.get("train.converge_lr"),
            finetune_epochs=self.get("train.finetune_epochs"),
            finetune_lr=self.get("train.finetune_lr"),
            restarts=self.get("train.restarts"),
            seed=self.get("train.seed") if seed is None else seed,
        )

    def annealing(self) -> AnnealingSchedule:
        epochs = self.get("train.epochs")
        n_start = self.get("anneal.n_start") or max(1, math.ceil(0.4 * epochs))
        n_end = self.get("anneal.n_end") or max(n_start + 1, math.ceil(0.8 * epochs))
        return AnnealingSchedule(self.get("anneal.alpha_max"), n_start, n_end)

    def network(self) -> NetworkConfig:
        return NetworkConfig(
            hidden=self.get("network.hidden"),
            context_dim=self.get("network.context_dim"),
            flow_layers=self.get("network.flow_layers"),
            flow_hidden=self.get("network.flow_hidden"),
            scale_cap=self.get("network.scale_cap"),
        )

    def fixed(self, model: SSMDefinition) -> dict:
        out = {}
        if "a1" in model.fixed_names:
            a1 = self.get("model.a1")
            out["a1"] = a1[0] if len(a1) == 1 else np.asarray(a1)
        return out

    def effective_lines(self) -> list[str]:
        """Every key pinned to its effective value (snapshot for checkpoints)."""
        lines = []
        for key in sorted(set(_SCHEMA) | set(self.entries)):
            raw = self.entries.get(key)
            if raw is None:
                default = _SCHEMA[key][1]
                raw = (
                    ",".join(format(v, "g") for v in default)
                    if isinstance(default, list)
                    else str(default)
                )
            lines.append(f"{key} = {raw}")
        return lines


def parse_config(text: str) -> RunConfig:
    entries: dict[str, str] = {}
    for ln, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"config line {ln}: expected 'section.key = value'")
        key, _, value = line.partition("=")
        key, value = key.strip(), value.strip()
        if key not in _SCHEMA and not _CLUSTER_KEY.match(key):
            raise ConfigError(f"config line {ln}: unknown key {key!r}")
        _parse_value(key, value)  # validate type early
        entries[key] = value
    return RunConfig(entries)


def load_config(path) -> RunConfig:
    with open(path, encoding="utf-8") as fh:
        return parse_config(fh.read())


# -- generation parameter assembly ---------------------------------------------------

_SL_SCALARS = ("a1", "a2", "b1", "b2", "b", "mu_x", "mu_y")
_SIR_SCALARS = ("beta", "gamma", "a", "b", "c")


def generation_params(model_name: str, config: RunConfig):
    """Benchmark parameter table with optional per-cluster config overrides."""
    table = (
        datagen.stuart_landau_benchmark()
        if model_name == "stuart-landau"
        else datagen.sir_benchmark()
    )
    overrides: dict[int, dict[str, list[float]]] = {}
    for key, raw in config.entries.items():
        m = _CLUSTER_KEY.match(key)
        if m:
            k, name = int(m.group(1)), m.group(2)
            overrides.setdefault(k, {})[name] = _parse_value(key, raw)
    n = config.get("generate.clusters") or max(
        [len(table)] + [k for k in overrides]
    )
    params = []
    for k in range(1, n + 1):
        p = replace(table[(k - 1) % len(table)])
        for name, vals in overrides.get(k, {}).items():
            if model_name == "stuart-landau":
                if name in _SL_SCALARS:
                    setattr(p, name, vals[0])
                elif name in ("A", "C") and len(vals) == 3:
                    setattr(
                        p, name, np.array([[vals[0], 0.0], [vals[1], vals[2]]])
                    )
                else:
                    raise ConfigError(f"bad stuart-landau override {name!r}")
            else:
                if name in _SIR_SCALARS:
                    setattr(p, name, vals[0])
                elif name == "rho_init" and len(vals) == 3:
                    p.rho_init = np.asarray(vals)
                else:
                    raise ConfigError(f"bad sir override {name!r}")
        params.append(p)
    return params


# -- checkpoints ----------------------------------------------------------------------


def _fmt(v: float) -> str:
    return format(float(v), ".17g")


def save_checkpoint(path, state: TrainState, config: RunConfig) -> None:
    theta, phi = state.theta, state.phi
    lines = [
        CHECKPOINT_MAGIC,
        f"#model={theta.model.name}",
        f"#clusters={theta.n_clusters}",
        f"#rng={SeededRng.ALGORITHM}",
        f"#final-loss={_fmt(state.final_loss)}",
        f"#best-restart={state.best_restart}",
        "#config-begin",
        *config.effective_lines(),
        "#config-end",
    ]
    for k, cp in enumerate(theta.clusters):
        for name in sorted(cp.fixed):
            lines.append(f"#fixed {k} {name}={_fmt(cp.fixed[name])}")
    for k, cp in enumerate(theta.clusters):
        for name, v in sorted(cp.constrained().items()):
            vals = ",".join(_fmt(x) for x in np.atleast_1d(v))
            lines.append(f"#constrained {k} {name}={vals}")
    w = ",".join(_fmt(x) for x in theta.weights())
    lines.append(f"#constrained weights={w}")
    params = trainer.pack_params(theta, phi)
    for name in sorted(params):
        arr = params[name]
        shape = "x".join(str(s) for s in arr.shape)
        lines.append(f"#param {name} {shape}")
        lines.append(arr.astype("<f8").tobytes().hex())
    lines.append("#end")
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("\n".join(lines) + "\n")


def load_checkpoint(path) -> tuple[TrainState, RunConfig]:
    with open(path, encoding="utf-8") as fh:
        lines = fh.read().splitlines()
    if not lines or lines[0] != CHECKPOINT_MAGIC:
        raise ValueError(f"{path}: not a checkpoint file")
    header: dict[str, str] = {}
    config_lines: list[str] = []
    fixed: dict[int, dict[str, float]] = {}
    params: dict[str, np.ndarray] = {}
    i = 1
    in_config = False
    while i < len(lines):
        line = lines[i]
        if line == "#config-begin":
            in_config = True
        elif line == "#config-end":
            in_config = False
        elif in_config:
            config_lines.append(line)
        elif line.startswith("#fixed "):
            _, k, kv = line.split(" ", 2)
            name, _, value = kv.partition("=")
            fixed.setdefault(int(k), {})[name] = float(value)
        elif line.startswith("#param "):
            _, name, shape_s = line.split(" ")
            shape = tuple(int(s) for s in shape_s.split("x")) if shape_s else ()
            i += 1
            data = np.frombuffer(bytes.fromhex(lines[i]), dtype="<f8")
            params[name] = data.reshape(shape).astype(np.float64)
        elif line.startswith("#constrained") or line == "#end":
            pass
        elif line.startswith("#"):
            key, _, value = line[1:].partition("=")
            header[key] = value
        i += 1
    config = parse_config("\n".join(config_lines))
    model = MODELS[header["model"]]
    n_clusters = int(header["clusters"])
    clusters = []
    for k in range(n_clusters):
        blocks = {b.name: params[f"theta.{k}.{b.name}"].copy() for b in model.blocks}
        clusters.append(ClusterParams(model, blocks, fixed.get(k, {})))
    theta = MixtureParams(model, clusters, params["theta.weights"].copy())
    net = config.network()
    phi_blocks = {
        name[4:]: v.copy() for name, v in params.items() if name.startswith("phi.")
    }
    phi = VariationalParams(model, n_clusters, net, phi_blocks)
    state = TrainState(
        theta=theta,
        phi=phi,
        epoch=0,
        step=0,
        loss_history=[],
        final_loss=float(header.get("final-loss", "nan")),
        restart_losses=[],
        best_restart=int(header.get("best-restart", "0")),
    )
    return state, config


def write_trace(path, state: TrainState) -> None:
    rows = ["epoch,phase,lr,alpha_n,loss"]
    current = None
    for r in state.all_history:
        if r.restart != current:
            rows.append(f"# restart {r.restart}")
            current = r.restart
        rows.append(f"{r.epoch},{r.phase},{_fmt(r.lr)},{_fmt(r.alpha)},{_fmt(r.loss)}")
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("\n".join(rows) + "\n")


# -- cluster alignment ------------------------------------------------------------------


def align_clusters(labels: np.ndarray, assignments: np.ndarray, n_clusters: int):
    """Match estimated clusters to true labels by maximum agreement.

    Returns (confusion, accuracy, column_order): confusion is the K x M count
    matrix with estimated-cluster columns permuted so the matched cluster for
    true class i sits on the diagonal; column_order[j] is the original
    (1-based) estimated cluster shown in column j.
    """
    labels = np.asarray(labels, dtype=np.int64)
    assignments = np.asarray(assignments, dtype=np.int64)
    K = int(labels.max())
    agreement = np.zeros((K, n_clusters), dtype=np.int64)
    np.add.at(agreement, (labels - 1, assignments - 1), 1)
    rows, cols = linear_sum_assignment(-agreement)
    order = [int(c) for _, c in sorted(zip(rows, cols))]
    order += [j for j in range(n_clusters) if j not in order]
    confusion = agreement[:, order]
    matched = sum(agreement[r, c] for r, c in zip(rows, cols))
    accuracy = float(matched) / float(len(labels))
    return confusion, accuracy, [c + 1 for c in order]


# -- parameter export --------------------------------------------------------------------

_SL_COLUMNS = "p,a2,b1,b2,A11,A21,A22,b,C11,C21,C22,mu_x,mu_y"
_SIR_COLUMNS = "p,beta,gamma,a,b,c,rho_S_init,rho_I_init,rho_R_init"


def _param_row(theta: MixtureParams, k: int) -> list[float]:
    w = theta.weights()[k]
    if theta.model.name == "stuart-landau":
        p = StuartLandauParams.from_cluster(theta.clusters[k])
        return [
            w, p.a2, p.b1, p.b2, p.A[0, 0], p.A[1, 0], p.A[1, 1], p.b,
            p.C[0, 0], p.C[1, 0], p.C[1, 1], p.mu_x, p.mu_y,
        ]
    if theta.model.name == "sir":
        p = SIRParams.from_cluster(theta.clusters[k])
        return [w, p.beta, p.gamma, p.a, p.b, p.c, *p.rho_init]
    raise ValueError(f"no parameter table layout for model {theta.model.name!r}")


def params_csv(theta: MixtureParams, order=None) -> str:
    header = _SL_COLUMNS if theta.model.name == "stuart-landau" else _SIR_COLUMNS
    out = [f"cluster,{header}"]
    order = order or range(1, theta.n_clusters + 1)
    for row_i, k in enumerate(order, start=1):
        vals = ",".join(_fmt(v) for v in _param_row(theta, k - 1))
        out.append(f"{row_i},{vals}")
    return "\n".join(out) + "\n"


# -- commands -------------------------------------------------------------------------


def _load_run_inputs(args):
    ds = read_dataset(args.data)
    config = load_config(args.config) if args.config else RunConfig()
    model_name = ds.metadata.get("model")
    if model_name not in MODELS:
        raise ValueError(f"dataset model {model_name!r} is not a known model")
    return ds, config, MODELS[model_name]


def cmd_generate(args) -> int:
    config = load_config(args.config) if args.config else RunConfig()
    params = generation_params(args.model, config)
    n_per = config.get("generate.n_per_cluster")
    T = config.get("generate.T")
    gen = datagen.gen_stuart_landau if args.model == "stuart-landau" else datagen.gen_sir
    ds = gen(params, n_per, T, args.seed)
    write_dataset(ds, args.out)
    print(
        f"wrote {args.out}: N={ds.n_series} T={ds.n_steps} M_true={len(params)} "
        f"seed={args.seed}"
    )
    return 0


def cmd_train(args) -> int:
    ds, config, model = _load_run_inputs(args)
    if args.seed is not None:
        config = config.with_entry("train.seed", str(args.seed))
    opt = config.optimizer()
    schedule = config.annealing()
    state = trainer.train(
        ds,
        args.clusters,
        opt,
        schedule,
        model=model,
        net=config.network(),
        fixed=config.fixed(model),
    )
    save_checkpoint(args.out, state, config)
    trace_path = args.trace or f"{args.out}.trace.csv"
    write_trace(trace_path, state)
    elbo = modelselect.mean_elbo(
        state, ds, config.get("eval.seed"), config.get("eval.samples")
    )
    diverged = sum(1 for v in state.restart_losses if not np.isfinite(v))
    print(
        f"trained M={args.clusters}: final_loss={state.final_loss:.6g} "
        f"mean_elbo={elbo:.6g} best_restart={state.best_restart} "
        f"diverged_restarts={diverged}"
    )
    print(f"checkpoint: {args.out}\ntrace: {trace_path}")
    return 0


def cmd_select(args) -> int:
    ds, config, model = _load_run_inputs(args)
    if args.min_clusters > args.max_clusters:
        raise ValueError("--min-clusters must be <= --max-clusters")
    ms = list(range(args.min_clusters, args.max_clusters + 1))
    workers = args.workers or min(len(ms), os.cpu_count() or 1)
    report = modelselect.sweep(
        ds,
        ms,
        config.optimizer(),
        config.annealing(),
        model=model,
        net=config.network(),
        fixed=config.fixed(model),
        eval_seed=config.get("eval.seed"),
        eval_samples=config.get("eval.samples"),
        workers=workers,
    )
    os.makedirs(args.out, exist_ok=True)
    bic_path = os.path.join(args.out, "bic.csv")
    with open(bic_path, "w", encoding="utf-8") as fh:
        fh.write(modelselect.report_csv(report))
    best_path = None
    for e in report.entries:
        if e.state is None:
            continue
        path = os.path.join(args.out, f"m{e.n_clusters}.ckpt")
        save_checkpoint(path, e.state, config)
        if e.n_clusters == report.selected:
            best_path = path
    shutil.copyfile(best_path, os.path.join(args.out, "best.ckpt"))
    for e in report.entries:
        mark = " *" if e.n_clusters == report.selected else ""
        if e.failed:
            print(f"M={e.n_clusters}: failed (all restarts diverged)")
        else:
            print(
                f"M={e.n_clusters}: mean_elbo={e.mean_elbo:.4f} "
                f"params={e.n_params} bic={e.bic:.4f}{mark}"
            )
    print(f"selected M={report.selected}; table: {bic_path}")
    return 0


def cmd_evaluate(args) -> int:
    state, _config = load_checkpoint(args.ckpt)
    ds = read_dataset(args.data)
    if ds.metadata.get("model") != state.theta.model.name:
        raise ValueError(
            f"checkpoint model {state.theta.model.name!r} does not match "
            f"dataset model {ds.metadata.get('model')!r}"
        )
    os.makedirs(args.out, exist_ok=True)
    order = np.argsort(ds.ids, kind="stable")
    resp = trainer.responsibilities(state, ds)
    M = state.theta.n_clusters
    with open(os.path.join(args.out, "responsibilities.csv"), "w", encoding="utf-8") as fh:
        fh.write("series_id," + ",".join(f"q{k}" for k in range(1, M + 1)) + "\n")
        for i in order:
            fh.write(f"{ds.ids[i]}," + ",".join(_fmt(v) for v in resp[i]) + "\n")

    col_order = None
    if ds.labels is not None:
        assign = resp.argmax(axis=1) + 1
        confusion, accuracy, col_order = align_clusters(ds.labels, assign, M)
        with open(os.path.join(args.out, "confusion.csv"), "w", encoding="utf-8") as fh:
            fh.write(
                "true\\pred," + ",".join(str(j) for j in range(1, M + 1)) + "\n"
            )
            for i, row in enumerate(confusion, start=1):
                fh.write(f"{i}," + ",".join(str(int(v)) for v in row) + "\n")
        print(f"accuracy={accuracy:.6f} (aligned over cluster permutations)")
    else:
        print("dataset has no labels; confusion matrix skipped")

    with open(os.path.join(args.out, "params.csv"), "w", encoding="utf-8") as fh:
        fh.write(params_csv(state.theta, order=col_order))
    print(f"outputs in {args.out}")
    return 0


def cmd_latents(args) -> int:
    state, _config = load_checkpoint(args.ckpt)
    ds = read_dataset(args.data)
    matches = np.flatnonzero(ds.ids == args.series)
    if len(matches) == 0:
        raise ValueError(f"series id {args.series} not found in {args.data}")
    Y = ds.values[matches[0]]
    est = trainer.latent_estimates(
        state, Y, args.samples, SeededRng(args.seed)
    )
    d = est.mean.shape[1]
    cols = (
        [f"mean_{j}" for j in range(1, d + 1)]
        + [f"q05_{j}" for j in range(1, d + 1)]
        + [f"q95_{j}" for j in range(1, d + 1)]
    )
    with open(args.out, "w", encoding="utf-8") as fh:
        fh.write("t," + ",".join(cols) + "\n")
        for t in range(est.mean.shape[0]):
            row = np.concatenate([est.mean[t], est.q05[t], est.q95[t]])
            fh.write(f"{t + 1}," + ",".join(_fmt(v) for v in row) + "\n")
    print(f"series {args.series}: cluster={est.cluster}, wrote {args.out}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="mssm",
        description="Time series clustering with mixtures of state space models.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("generate", help="generate a benchmark dataset")
    p.add_argument("--model", required=True, choices=sorted(MODELS))
    p.add_argument("--config", default=None)
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_generate)

    p = sub.add_parser("train", help="fit a mixture with a fixed cluster count")
    p.add_argument("--data", required=True)
    p.add_argument("--clusters", type=int, required=True)
    p.add_argument("--config", default=None)
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--trace", default=None)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("select", help="sweep cluster counts and pick by BIC")
    p.add_argument("--data", required=True)
    p.add_argument("--min-clusters", type=int, required=True)
    p.add_argument("--max-clusters", type=int, required=True)
    p.add_argument("--config", default=None)
    p.add_argument("--out", required=True)
    p.add_argument("--workers", type=int, default=None)
    p.set_defaults(func=cmd_select)

    p = sub.add_parser("evaluate", help="confusion matrix and parameter tables")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("latents", help="export latent-state estimates for one series")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--series", type=int, required=True)
    p.add_argument("--samples", type=int, default=200)
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_latents)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except (
        ConfigError,
        DataFormatError,
        TrainingDiverged,
        ValueError,
        KeyError,
        OSError,
    ) as e:
        print(f"error: {e}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
