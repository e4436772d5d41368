"""Command-line entry point.

Subcommands cover the full pipeline (corpus, topology, simulation, sampling,
training, regression, evaluation, reporting) plus a declarative ``run`` that
executes an experiment config end to end.  Every subcommand writes a manifest
(inputs, seeds, versions, output hashes) next to its outputs; artifacts are
reproducible byte-for-byte from the same seed and thread count.
"""

from __future__ import annotations

import argparse
import dataclasses
import hashlib
import json
import os
import sys
from dataclasses import dataclass, field, fields, is_dataclass
from pathlib import Path

import numpy as np
import torch

from . import __version__, corpus, dynamics, inference, metrics, sampling, topology, training
from .model import ModelConfig

OUTPUT_ROOT_ENV = "NETSR_OUTPUT_ROOT"


class ParseError(Exception):
    """Config file failed validation."""


# ---------------------------------------------------------------------------
# Experiment config
# ---------------------------------------------------------------------------


@dataclass
class CorpusSection:
    n: int = 64
    D: int = 3
    b_max: int = 5
    u_max: int = 5
    c_min: float = -20.0
    c_max: float = 20.0
    d_depth: int = 8
    max_tokens: int = 60
    p_empty_self: float = 0.1
    p_const_leaf: float = 0.5

    def gen_config(self) -> corpus.GenConfig:
        d = dataclasses.asdict(self)
        d.pop("n")
        return corpus.GenConfig(**d)


@dataclass
class TopologySection:
    kind: str = "random"
    n: int = 50
    m: int = 5
    k: int = 5
    p: float = 0.1
    p_in: float = 0.25
    p_out: float = 0.01
    communities: int = 4
    sizes: list | None = None

    def spec(self) -> topology.TopologySpec:
        params: dict = {}
        if self.kind == "power_law":
            params["m"] = self.m
        elif self.kind == "small_world":
            params = {"k": self.k, "p": self.p if self.p != 0.1 else 0.5}
        elif self.kind == "community":
            params = {"p_in": self.p_in, "p_out": self.p_out}
            if self.sizes is not None:
                params["sizes"] = list(self.sizes)
            else:
                params["communities"] = self.communities
        elif self.kind == "random":
            params["p"] = self.p
        return topology.TopologySpec(self.kind, self.n, params)


@dataclass
class DynamicsSection:
    preset: str = "heat"
    t_delta: float | None = None
    horizon: float | None = None


@dataclass
class SamplingSection:
    n_nodes: int = 20
    n_clusters: int = 10
    per_cluster: int = 20
    t_points: int = 10


@dataclass
class TrainSection:
    batch_size: int = 16
    epochs: int = 20
    lr: float = 3e-4
    clip_norm: float = 1.0
    checkpoint_every: int = 0
    constant_resample: bool = True
    n_obs_points: int = 200
    topo_n_min: int = 10
    topo_n_max: int = 200
    max_steps: int | None = None
    target_token_accuracy: float | None = None

    def train_config(self, seed: int) -> training.TrainConfig:
        return training.TrainConfig(
            batch_size=self.batch_size,
            epochs=self.epochs,
            lr=self.lr,
            clip_norm=self.clip_norm,
            seed=seed,
            checkpoint_every=self.checkpoint_every,
            constant_resample=self.constant_resample,
            n_obs_points=self.n_obs_points,
            topo_n_range=(self.topo_n_min, self.topo_n_max),
            max_steps=self.max_steps,
            target_token_accuracy=self.target_token_accuracy,
        )


@dataclass
class InferenceSection:
    beam_size: int = 10
    max_len: int = 40
    forced_self: list | None = None
    forced_inter: list | None = None
    length_alpha: float = 1.0
    holdout_frac: float = 0.2
    simplify: bool = True

    def beam_options(self) -> inference.BeamOptions:
        return inference.BeamOptions(
            beam_size=self.beam_size,
            max_len=self.max_len,
            forced_self=tuple(self.forced_self) if self.forced_self else None,
            forced_inter=tuple(self.forced_inter) if self.forced_inter else None,
            length_alpha=self.length_alpha,
        )


@dataclass
class ModelSection:
    d_754: int = 32
    d_e: int = 128
    n_heads: int = 4
    n_isab: int = 2
    n_inducing: int = 16
    n_seeds: int = 8
    n_sab: int = 1
    n_dec_layers: int = 2
    max_seq: int = 64
    d_max: int = 3
    k_max: int = 16

    def model_config(self) -> ModelConfig:
        return ModelConfig(**dataclasses.asdict(self))


@dataclass
class ExperimentConfig:
    seed: int
    output_dir: str = "run"
    corpus: CorpusSection = field(default_factory=CorpusSection)
    topology: TopologySection = field(default_factory=TopologySection)
    dynamics: DynamicsSection = field(default_factory=DynamicsSection)
    sampling: SamplingSection = field(default_factory=SamplingSection)
    model: ModelSection = field(default_factory=ModelSection)
    train: TrainSection = field(default_factory=TrainSection)
    inference: InferenceSection = field(default_factory=InferenceSection)


def _from_dict(cls, data: dict, path: str):
    if not isinstance(data, dict):
        raise ParseError(f"{path}: expected a mapping, got {type(data).__name__}")
    known = {f.name: f for f in fields(cls)}
    unknown = set(data) - set(known)
    if unknown:
        raise ParseError(f"{path}: unknown field {sorted(unknown)[0]!r}")
    kwargs = {}
    for name, value in data.items():
        f = known[name]
        if is_dataclass(f.type) or (isinstance(f.type, str) and f.type in _SECTION_TYPES):
            section_cls = _SECTION_TYPES[f.type] if isinstance(f.type, str) else f.type
            kwargs[name] = _from_dict(section_cls, value, f"{path}.{name}")
        else:
            kwargs[name] = value
    try:
        return cls(**kwargs)
    except TypeError as exc:
        raise ParseError(f"{path}: {exc}") from exc


_SECTION_TYPES = {
    "CorpusSection": CorpusSection,
    "TopologySection": TopologySection,
    "DynamicsSection": DynamicsSection,
    "SamplingSection": SamplingSection,
    "ModelSection": ModelSection,
    "TrainSection": TrainSection,
    "InferenceSection": InferenceSection,
}


def validate_config(path: str | Path) -> ExperimentConfig:
    """Parse and validate an experiment config file, filling defaults."""
    try:
        data = json.loads(Path(path).read_text())
    except OSError as exc:
        raise ParseError(f"{path}: {exc}") from exc
    except json.JSONDecodeError as exc:
        raise ParseError(f"{path}: line {exc.lineno}: {exc.msg}") from exc
    if "seed" not in data:
        raise ParseError(f"{path}: missing required field 'seed'")
    return _from_dict(ExperimentConfig, data, "config")


def effective_config_json(cfg: ExperimentConfig) -> str:
    return json.dumps(dataclasses.asdict(cfg), sort_keys=True, indent=1)


# ---------------------------------------------------------------------------
# Manifests
# ---------------------------------------------------------------------------


def _sha256(path: Path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def _write_manifest(out_dir: Path, command: str, args: dict, inputs: list, outputs: list) -> None:
    manifest = {
        "command": command,
        "version": __version__,
        "args": {k: v for k, v in sorted(args.items())},
        "inputs": {str(p): _sha256(Path(p)) for p in inputs},
        "outputs": {str(Path(p).name): _sha256(Path(p)) for p in outputs},
    }
    (out_dir / f"{command}.manifest.json").write_text(
        json.dumps(manifest, sort_keys=True, indent=1) + "\n"
    )


def _out_dir(arg: str | None) -> Path:
    root = os.environ.get(OUTPUT_ROOT_ENV, ".")
    out = Path(arg) if arg else Path(root) / "netsr-out"
    if not out.is_absolute() and arg is not None and not str(arg).startswith("."):
        out = Path(root) / out
    out.mkdir(parents=True, exist_ok=True)
    return out


def _clean_args(ns: argparse.Namespace) -> dict:
    skip = {"func", "command"}
    return {k: v for k, v in vars(ns).items() if k not in skip and v is not None}


# ---------------------------------------------------------------------------
# Subcommand handlers
# ---------------------------------------------------------------------------


def _cmd_gen_corpus(ns) -> int:
    out = _out_dir(ns.out)
    cfg = corpus.GenConfig(
        D=ns.dim_max,
        b_max=ns.b_max,
        u_max=ns.u_max,
        max_tokens=ns.max_tokens,
        p_empty_self=ns.p_empty_self,
    )
    built = corpus.build_corpus(cfg, ns.n, seed=ns.seed)
    path = out / "corpus.jsonl"
    corpus.save_corpus(built, path)
    _write_manifest(out, "gen-corpus", _clean_args(ns), [], [path])
    print(f"wrote {path} ({len(built)} pairs)")
    return 0


def _topology_from_flags(ns) -> topology.TopologySpec:
    params: dict = {}
    if ns.topology == "power_law":
        params["m"] = ns.m
    elif ns.topology == "small_world":
        params = {"k": ns.k, "p": ns.p}
    elif ns.topology == "community":
        params = {"p_in": ns.p_in, "p_out": ns.p_out}
        if ns.sizes:
            params["sizes"] = [int(s) for s in ns.sizes.split(",")]
    elif ns.topology == "random":
        params["p"] = ns.p
    return topology.TopologySpec(ns.topology, ns.n, params)


def _cmd_gen_topology(ns) -> int:
    out = _out_dir(ns.out)
    ns.topology = ns.kind
    spec = _topology_from_flags(ns)
    adj = topology.generate_topology(spec, np.random.default_rng(ns.seed))
    path = out / "graph.tsv"
    topology.save_edge_list(adj, path)
    _write_manifest(out, "gen-topology", _clean_args(ns), [], [path])
    print(
        f"wrote {path} ({adj.n} nodes, {adj.n_edges} edges, "
        f"{topology.component_count(adj)} components)"
    )
    return 0


def _cmd_simulate(ns) -> int:
    out = _out_dir(ns.out)
    rng = np.random.default_rng(ns.seed)
    outputs = []
    if ns.preset == "hetero-sis":
        sizes = [int(s) for s in ns.sizes.split(",")] if ns.sizes else [120, 120, 90, 30]
        deltas = [float(d) for d in ns.deltas.split(",")] if ns.deltas else [0.5, 2.0, 5.0, 10.0]
        system = dynamics.heterogeneous_sis(sizes, deltas, ns.beta, rng=rng)
        adj = system.adj
        base = dynamics.preset("epi")
        t_delta = ns.t_delta or base.t_delta
        horizon = ns.horizon or base.t_train
        x0 = rng.uniform(0.0, 1.0, size=(adj.n, 1))
        meta = {"preset": "hetero-sis", "seed": ns.seed, "t_delta": t_delta}
    else:
        pre = dynamics.preset(ns.preset)
        if ns.edges:
            adj = topology.load_edge_list(ns.edges)
        else:
            spec = _topology_from_flags(ns)
            adj = topology.generate_topology(spec, rng)
        system = pre.system(adj)
        t_delta = ns.t_delta or pre.t_delta
        horizon = ns.horizon or pre.t_train
        x0 = pre.sample_x0(adj.n, rng)
        meta = {"preset": ns.preset, "seed": ns.seed, "t_delta": t_delta}
    traj = dynamics.integrate(system, x0, t_delta, horizon)
    tpath = out / "trajectory.tsv"
    dynamics.save_trajectory(traj, tpath, meta)
    outputs.append(tpath)
    gpath = out / "graph.tsv"
    topology.save_edge_list(adj, gpath)
    outputs.append(gpath)
    inputs = [ns.edges] if ns.edges else []
    _write_manifest(out, "simulate", _clean_args(ns), inputs, outputs)
    print(f"wrote {tpath} ({len(traj.times)} steps on {adj.n} nodes)")
    return 0


def _cmd_sample(ns) -> int:
    out = _out_dir(ns.out)
    traj, _meta = dynamics.load_trajectory(ns.trajectory)
    adj = topology.load_edge_list(ns.edges)
    obs, scaler = sampling.build_observation_set(
        traj.times,
        traj.states,
        adj,
        n_nodes=ns.n_nodes,
        n_clusters=ns.clusters,
        per_cluster=ns.per_cluster,
        t_points=ns.t_points,
        rng=np.random.default_rng(ns.seed),
    )
    path = out / "observations.tsv"
    sampling.save_observations(obs, path)
    _write_manifest(
        out,
        "sample",
        _clean_args(ns),
        [ns.trajectory, ns.edges],
        [path, path.with_suffix(path.suffix + ".scaler")],
    )
    print(f"wrote {path} ({len(obs)} triplets from {ns.n_nodes} nodes)")
    return 0


def _cmd_train(ns) -> int:
    out = _out_dir(ns.out)
    built = corpus.load_corpus(ns.corpus)
    mcfg = ModelConfig(
        d_e=ns.d_e,
        n_heads=ns.n_heads,
        n_isab=ns.n_isab,
        n_inducing=ns.n_inducing,
        n_seeds=ns.n_seeds,
        n_sab=ns.n_sab,
        n_dec_layers=ns.n_dec_layers,
        max_seq=ns.max_seq,
        k_max=ns.k_max,
    )
    tcfg = training.TrainConfig(
        batch_size=ns.batch_size,
        epochs=ns.epochs,
        lr=ns.lr,
        seed=ns.seed,
        checkpoint_every=ns.checkpoint_every,
        constant_resample=not ns.no_resample,
        n_obs_points=ns.points,
        topo_n_range=(ns.topo_min, ns.topo_max),
        max_steps=ns.max_steps,
        target_token_accuracy=ns.accuracy_target,
    )
    training.train(built, mcfg, tcfg, out_dir=out, log=print if ns.verbose else None)
    outputs = sorted(p for p in out.glob("*.bin"))
    _write_manifest(out, "train", _clean_args(ns), [ns.corpus], outputs)
    print(f"wrote {out / 'checkpoint.bin'}")
    return 0


def _cmd_regress(ns) -> int:
    out = _out_dir(ns.out)
    ckpt = training.load_checkpoint(ns.checkpoint)
    opts = inference.BeamOptions(
        beam_size=ns.beam_size,
        max_len=ns.max_len,
        forced_self=tuple(ns.forced_self.split()) if ns.forced_self else None,
        forced_inter=tuple(ns.forced_inter.split()) if ns.forced_inter else None,
    )
    inputs = [ns.checkpoint]
    if ns.observations:
        obs = sampling.load_observations(ns.observations)
        source = obs
        adj = None
        inputs.append(ns.observations)
    else:
        if not (ns.trajectory and ns.edges):
            raise ParseError("regress needs --observations or --trajectory with --edges")
        traj, _meta = dynamics.load_trajectory(ns.trajectory)
        adj = topology.load_edge_list(ns.edges)
        source = traj
        inputs += [ns.trajectory, ns.edges]
    result = inference.regress(
        ckpt,
        source,
        adj,
        opts,
        seed=ns.seed,
        n_nodes=ns.n_nodes,
        n_clusters=ns.clusters,
        per_cluster=ns.per_cluster,
        t_points=ns.t_points,
        simplify=not ns.no_simplify,
    )
    rpath = out / "result.json"
    inference.save_result(result, rpath)
    win = result.winner
    mpath = out / "metrics.json"
    mpath.write_text(
        json.dumps(
            {"r2": win.r2, **{f"close_{k:g}": v for k, v in win.close.items()}},
            sort_keys=True,
            indent=1,
        )
        + "\n"
    )
    _write_manifest(out, "regress", _clean_args(ns), inputs, [rpath, mpath])
    print(f"wrote {rpath}")
    print(f"winner: d/dt = {inference.expr.to_infix(win.pair.f_self, win.pair.self_constants)}"
          f" + sum_j A_ij [{inference.expr.to_infix(win.pair.f_inter, win.pair.inter_constants)}]"
          f" (holdout r2={win.r2:.4f})")
    return 0


def _cmd_eval(ns) -> int:
    out = _out_dir(ns.out)
    result = inference.load_result(ns.result)
    traj, _meta = dynamics.load_trajectory(ns.trajectory)
    adj = topology.load_edge_list(ns.edges)
    pair = result.winner.pair
    system = dynamics.NetworkSystem((pair,), adj)
    t_delta = float(traj.times[1] - traj.times[0])
    horizon = float(traj.times[-1])
    note = ""
    try:
        pred = dynamics.integrate(system, traj.states[0], t_delta, horizon)
        pred_states = pred.states
    except dynamics.BlowUp as exc:
        pred_states = exc.trajectory.states
        note = f"integration stopped early at t={exc.time:.6g}"
    n = min(len(pred_states), len(traj.states))
    rep = metrics.report(traj.states[:n].reshape(-1), pred_states[:n].reshape(-1))
    data = rep.to_dict()
    data["note"] = note
    mpath = out / "metrics.json"
    mpath.write_text(json.dumps(data, sort_keys=True, indent=1) + "\n")
    ppath = out / "prediction.tsv"
    dynamics.save_trajectory(
        dynamics.Trajectory(traj.times[:n], pred_states[:n]), ppath, {"source": "eval"}
    )
    _write_manifest(
        out, "eval", _clean_args(ns), [ns.result, ns.trajectory, ns.edges], [mpath, ppath]
    )
    print(f"wrote {mpath} (r2={rep.r2:.4f}{', ' + note if note else ''})")
    return 0


def _cmd_report(ns) -> int:
    out = _out_dir(ns.out)
    rows = []
    for run in ns.runs:
        run = Path(run)
        mfile = run / "metrics.json"
        if not mfile.exists():
            continue
        data = json.loads(mfile.read_text())
        row = {"run": run.name}
        row.update({k: data[k] for k in sorted(data) if not isinstance(data[k], dict)})
        rfile = run / "result.json"
        if rfile.exists():
            res = json.loads(rfile.read_text())
            win = res["candidates"][res["chosen"]]
            row["self"] = win["self_infix"]
            row["inter"] = win["inter_infix"]
        rows.append(row)
    if not rows:
        raise ParseError("no metrics.json found in the given run directories")
    cols = sorted({k for r in rows for k in r}, key=lambda c: (c != "run", c))
    csv_path = out / "report.csv"
    with open(csv_path, "w") as fh:
        fh.write(",".join(cols) + "\n")
        for r in rows:
            fh.write(",".join(_csv_cell(r.get(c, "")) for c in cols) + "\n")
    outputs = [csv_path]
    if ns.plot:
        outputs += _emit_plots(ns.runs, out)
    _write_manifest(out, "report", _clean_args(ns), [], outputs)
    print(f"wrote {csv_path} ({len(rows)} runs)")
    return 0


def _csv_cell(v) -> str:
    s = str(v)
    if "," in s or '"' in s:
        s = '"' + s.replace('"', '""') + '"'
    return s


def _emit_plots(runs, out: Path) -> list[Path]:
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    written = []
    for run in runs:
        run = Path(run)
        tfile = run / "trajectory.tsv"
        if not tfile.exists():
            continue
        traj, _ = dynamics.load_trajectory(tfile)
        fig, ax = plt.subplots(figsize=(6, 4))
        show = min(8, traj.n_nodes)
        for i in range(show):
            ax.plot(traj.times, traj.states[:, i, 0], lw=1)
        pfile = run / "prediction.tsv"
        if pfile.exists():
            pred, _ = dynamics.load_trajectory(pfile)
            for i in range(min(show, pred.n_nodes)):
                ax.plot(pred.times, pred.states[:, i, 0], lw=1, ls="--", alpha=0.7)
        ax.set_xlabel("t")
        ax.set_ylabel("state")
        ax.set_title(run.name)
        path = out / f"plot_{run.name}.png"
        fig.savefig(path, dpi=100, metadata={"Software": None})
        plt.close(fig)
        written.append(path)
    return written


def _cmd_validate_config(ns) -> int:
    cfg = validate_config(ns.config)
    print(effective_config_json(cfg))
    return 0


def _cmd_run(ns) -> int:
    cfg = validate_config(ns.config)
    out = _out_dir(ns.out or cfg.output_dir)
    print(effective_config_json(cfg))
    rng = np.random.default_rng(cfg.seed)
    built = corpus.build_corpus(cfg.corpus.gen_config(), cfg.corpus.n, seed=cfg.seed)
    corpus.save_corpus(built, out / "corpus.jsonl")
    ckpt = training.train(
        built, cfg.model.model_config(), cfg.train.train_config(cfg.seed), out_dir=out
    )
    adj = topology.generate_topology(cfg.topology.spec(), rng)
    pre = dynamics.preset(cfg.dynamics.preset)
    traj = dynamics.integrate(
        pre.system(adj),
        pre.sample_x0(adj.n, rng),
        cfg.dynamics.t_delta or pre.t_delta,
        cfg.dynamics.horizon or pre.t_train,
    )
    dynamics.save_trajectory(traj, out / "trajectory.tsv", {"preset": cfg.dynamics.preset, "seed": cfg.seed})
    topology.save_edge_list(adj, out / "graph.tsv")
    result = inference.regress(
        ckpt,
        traj,
        adj,
        cfg.inference.beam_options(),
        seed=cfg.seed,
        n_nodes=min(cfg.sampling.n_nodes, adj.n),
        n_clusters=cfg.sampling.n_clusters,
        per_cluster=cfg.sampling.per_cluster,
        t_points=cfg.sampling.t_points,
        simplify=cfg.inference.simplify,
    )
    inference.save_result(result, out / "result.json")
    win = result.winner
    (out / "metrics.json").write_text(
        json.dumps(
            {"r2": win.r2, **{f"close_{k:g}": v for k, v in win.close.items()}},
            sort_keys=True,
            indent=1,
        )
        + "\n"
    )
    _write_manifest(
        out,
        "run",
        {"config": str(ns.config)},
        [ns.config],
        [out / "corpus.jsonl", out / "checkpoint.bin", out / "trajectory.tsv",
         out / "graph.tsv", out / "result.json", out / "metrics.json"],
    )
    print(f"run complete; winner holdout r2={win.r2:.4f}")
    return 0


# ---------------------------------------------------------------------------
# Parser
# ---------------------------------------------------------------------------


def _positive_int(text: str) -> int:
    v = int(text)
    if v < 1:
        raise argparse.ArgumentTypeError(f"must be >= 1, got {v}")
    return v


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="netsr",
        description="Symbolic regression of governing equations on complex networks.",
    )
    parser.add_argument("--threads", type=_positive_int, default=os.cpu_count(),
                        help="torch CPU threads (default: logical cores)")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-corpus", help="generate an equation-pair corpus")
    p.add_argument("--n", type=_positive_int, required=True)
    p.add_argument("--seed", type=int, required=True)
    p.add_argument("--out", default=None)
    p.add_argument("--dim-max", type=int, default=3)
    p.add_argument("--b-max", type=int, default=5)
    p.add_argument("--u-max", type=int, default=5)
    p.add_argument("--max-tokens", type=int, default=60)
    p.add_argument("--p-empty-self", type=float, default=0.1)
    p.set_defaults(func=_cmd_gen_corpus)

    p = sub.add_parser("gen-topology", help="generate one network")
    p.add_argument("--kind", choices=topology.TOPOLOGY_KINDS, required=True)
    p.add_argument("--n", type=_positive_int, required=True)
    p.add_argument("--seed", type=int, required=True)
    p.add_argument("--out", default=None)
    p.add_argument("--m", type=int, default=5)
    p.add_argument("--k", type=int, default=5)
    p.add_argument("--p", type=float, default=0.1)
    p.add_argument("--p-in", type=float, default=0.25)
    p.add_argument("--p-out", type=float, default=0.01)
    p.add_argument("--sizes", default=None, help="comma-separated community sizes")
    p.set_defaults(func=_cmd_gen_topology)

    p = sub.add_parser("simulate", help="integrate a benchmark dynamic")
    p.add_argument("--preset", required=True,
                   choices=list(dynamics.PRESET_NAMES) + ["hetero-sis"])
    p.add_argument("--topology", choices=topology.TOPOLOGY_KINDS, default="random")
    p.add_argument("--n", type=_positive_int, default=100)
    p.add_argument("--seed", type=int, required=True)
    p.add_argument("--out", default=None)
    p.add_argument("--edges", default=None, help="reuse an existing edge list")
    p.add_argument("--t-delta", type=float, default=None)
    p.add_argument("--horizon", type=float, default=None)
    p.add_argument("--m", type=int, default=5)
    p.add_argument("--k", type=int, default=5)
    p.add_argument("--p", type=float, default=0.1)
    p.add_argument("--p-in", type=float, default=0.25)
    p.add_argument("--p-out", type=float, default=0.01)
    p.add_argument("--sizes", default=None)
    p.add_argument("--deltas", default=None, help="hetero-sis recovery rates")
    p.add_argument("--beta", type=float, default=1.0)
    p.set_defaults(func=_cmd_simulate)

    p = sub.add_parser("sample", help="trajectory -> observation set")
    p.add_argument("--trajectory", required=True)
    p.add_argument("--edges", required=True)
    p.add_argument("--seed", type=int, required=True)
    p.add_argument("--out", default=None)
    p.add_argument("--n-nodes", type=_positive_int, default=20)
    p.add_argument("--clusters", type=_positive_int, default=10)
    p.add_argument("--per-cluster", type=_positive_int, default=20)
    p.add_argument("--t-points", type=_positive_int, default=10)
    p.set_defaults(func=_cmd_sample)

    p = sub.add_parser("train", help="pre-train the regressor on a corpus")
    p.add_argument("--corpus", required=True)
    p.add_argument("--seed", type=int, required=True)
    p.add_argument("--out", default=None)
    p.add_argument("--batch-size", type=_positive_int, default=16)
    p.add_argument("--epochs", type=int, default=20)
    p.add_argument("--lr", type=float, default=3e-4)
    p.add_argument("--checkpoint-every", type=int, default=0)
    p.add_argument("--no-resample", action="store_true")
    p.add_argument("--points", type=_positive_int, default=200)
    p.add_argument("--topo-min", type=int, default=10)
    p.add_argument("--topo-max", type=int, default=200)
    p.add_argument("--max-steps", type=int, default=None)
    p.add_argument("--accuracy-target", type=float, default=None)
    p.add_argument("--verbose", action="store_true")
    p.add_argument("--d-e", type=int, default=128)
    p.add_argument("--n-heads", type=int, default=4)
    p.add_argument("--n-isab", type=int, default=2)
    p.add_argument("--n-inducing", type=int, default=16)
    p.add_argument("--n-seeds", type=int, default=8)
    p.add_argument("--n-sab", type=int, default=1)
    p.add_argument("--n-dec-layers", type=int, default=2)
    p.add_argument("--max-seq", type=int, default=64)
    p.add_argument("--k-max", type=int, default=16)
    p.set_defaults(func=_cmd_train)

    p = sub.add_parser("regress", help="recover equations from observations")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--observations", default=None)
    p.add_argument("--trajectory", default=None)
    p.add_argument("--edges", default=None)
    p.add_argument("--seed", type=int, required=True)
    p.add_argument("--out", default=None)
    p.add_argument("--beam-size", type=_positive_int, default=10)
    p.add_argument("--max-len", type=_positive_int, default=40)
    p.add_argument("--forced-self", default=None, help="space-separated token block")
    p.add_argument("--forced-inter", default=None)
    p.add_argument("--no-simplify", action="store_true")
    p.add_argument("--n-nodes", type=_positive_int, default=20)
    p.add_argument("--clusters", type=_positive_int, default=10)
    p.add_argument("--per-cluster", type=_positive_int, default=20)
    p.add_argument("--t-points", type=_positive_int, default=10)
    p.set_defaults(func=_cmd_regress)

    p = sub.add_parser("eval", help="score a recovered equation on a trajectory")
    p.add_argument("--result", required=True)
    p.add_argument("--trajectory", required=True)
    p.add_argument("--edges", required=True)
    p.add_argument("--out", default=None)
    p.set_defaults(func=_cmd_eval)

    p = sub.add_parser("report", help="summarize runs into a CSV (optionally plots)")
    p.add_argument("--runs", nargs="+", required=True)
    p.add_argument("--out", default=None)
    p.add_argument("--plot", action="store_true")
    p.set_defaults(func=_cmd_report)

    p = sub.add_parser("validate-config", help="check a config file, print it resolved")
    p.add_argument("config")
    p.set_defaults(func=_cmd_validate_config)

    p = sub.add_parser("run", help="execute a full experiment from a config file")
    p.add_argument("--config", required=True)
    p.add_argument("--out", default=None)
    p.set_defaults(func=_cmd_run)

    return parser


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    ns = parser.parse_args(argv)
    torch.set_num_threads(ns.threads)
    try:
        return ns.func(ns)
    except ParseError as exc:
        print(f"netsr: usage error stage={ns.command}: {exc}", file=sys.stderr)
        return 2
    except Exception as exc:  # runtime failure with stage attribution
        print(
            f"netsr: error stage={ns.command} type={type(exc).__name__}: {exc}",
            file=sys.stderr,
        )
        return 1


if __name__ == "__main__":
    sys.exit(main())
