"""Equation recovery from observations.

Both branches are decoded independently with length-normalized beam search;
hypotheses must close their arity balance at EOS to survive.  A forced token
block, when given, is injected into any hypothesis that would finish without
it, and only candidates containing the block are returned.  Candidate pairs
are fitted with multi-start BFGS on a train split, ranked by held-out R^2,
unscaled back to raw coordinates, and the winner optionally simplified.
"""

from __future__ import annotations

import dataclasses
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np
import torch
from scipy import optimize

from . import expr, metrics
from .corpus import EquationPair
from .model import RegressorModel, TooLong, pack_observations
from .sampling import (
    ObservationSet,
    Scaler,
    build_observation_set,
    fit_scaler,
    apply_scaler,
    unscale_equation,
    unscale_observations,
)
from .training import Checkpoint

PENALTY_RESIDUAL = 1e6


class NoValidCandidate(Exception):
    """Every beam failed the arity or forced-token requirements."""


class NoConvergence(Exception):
    """All optimizer starts failed; carries best-effort constants."""

    def __init__(self, message: str, pair: EquationPair | None = None):
        super().__init__(message)
        self.pair = pair


@dataclass(frozen=True)
class BeamOptions:
    beam_size: int = 10
    max_len: int = 40
    forced_self: tuple[str, ...] | None = None
    forced_inter: tuple[str, ...] | None = None
    length_alpha: float = 1.0  # score = logprob / len**alpha

    def __post_init__(self):
        if self.beam_size < 1:
            raise ValueError("beam_size must be >= 1")


@dataclass(frozen=True)
class BeamCandidate:
    self_tokens: tuple[str, ...]
    inter_tokens: tuple[str, ...]
    log_prob: float  # joint, unnormalized
    score: float  # joint, length-normalized

    def skeleton(self, dim: int) -> EquationPair:
        return EquationPair.from_prefix(
            list(self.self_tokens),
            list(self.inter_tokens),
            [1.0] * _count_placeholders(self.self_tokens),
            [1.0] * _count_placeholders(self.inter_tokens),
            dim,
        )


def _count_placeholders(tokens: Sequence[str]) -> int:
    return sum(1 for t in tokens if t == expr.CONST_SYMBOL)


def _arity_complete(tokens: Sequence[str]) -> bool:
    if not tokens:
        return True
    need = 1
    for i, t in enumerate(tokens):
        if need == 0:
            return False
        try:
            need += expr.token_from_symbol(t).arity - 1
        except expr.UnknownToken:
            return False
    return need == 0


def _contains(tokens: Sequence[str], block: Sequence[str]) -> bool:
    if not block:
        return True
    tokens = list(tokens)
    block = list(block)
    for start in range(len(tokens) - len(block) + 1):
        if tokens[start : start + len(block)] == block:
            return True
    return False


@dataclass
class _Hyp:
    ids: list[int]
    log_prob: float


def _branch_beam(
    model: RegressorModel,
    branch: str,
    h: torch.Tensor,
    opts: BeamOptions,
    forced: tuple[str, ...] | None,
) -> list[tuple[tuple[str, ...], float, float]]:
    """Beam-decode one branch; returns (tokens, log_prob, score) finished
    hypotheses sorted by descending normalized score."""
    vocab = model.vocab
    forced_ids = vocab.encode(forced) if forced else []
    eos, bos, pad = vocab.eos_id, vocab.bos_id, vocab.pad_id
    max_len = min(opts.max_len, model.cfg.max_seq - 1)
    alive = [_Hyp([], 0.0)]
    done: list[tuple[list[int], float]] = []

    def step_logprobs(hyps: list[_Hyp]) -> np.ndarray:
        length = max(len(hyp.ids) for hyp in hyps) + 1
        ids = torch.full((len(hyps), length), pad, dtype=torch.long)
        for r, hyp in enumerate(hyps):
            ids[r, 0] = bos
            if hyp.ids:
                ids[r, 1 : 1 + len(hyp.ids)] = torch.tensor(hyp.ids)
        with torch.no_grad():
            logits = model.branch_logits(branch, h.expand(len(hyps), -1, -1), ids)
        rows = torch.arange(len(hyps))
        last = torch.tensor([len(hyp.ids) for hyp in hyps])
        return torch.log_softmax(logits[rows, last], dim=-1).numpy()

    def forced_continuation(hyp: _Hyp) -> _Hyp | None:
        """Append the forced block, accruing its model log-probs."""
        new_ids = hyp.ids + forced_ids
        if len(new_ids) >= max_len:
            return None
        ids = torch.tensor([[bos] + new_ids], dtype=torch.long)
        with torch.no_grad():
            logits = model.branch_logits(branch, h, ids)
        logp = torch.log_softmax(logits[0], dim=-1)
        extra = 0.0
        for pos in range(len(hyp.ids), len(new_ids)):
            extra += float(logp[pos, new_ids[pos]])
        return _Hyp(new_ids, hyp.log_prob + extra)

    for _ in range(max_len):
        if not alive:
            break
        logprobs = step_logprobs(alive)
        candidates: list[tuple[float, _Hyp, int]] = []
        for r, hyp in enumerate(alive):
            for tok_id in np.argsort(logprobs[r])[::-1][: 2 * opts.beam_size]:
                tok_id = int(tok_id)
                lp = float(logprobs[r][tok_id])
                if not np.isfinite(lp):
                    continue
                candidates.append((hyp.log_prob + lp, hyp, tok_id))
        candidates.sort(key=lambda c: -c[0])
        next_alive: list[_Hyp] = []
        for total_lp, hyp, tok_id in candidates:
            if len(next_alive) >= opts.beam_size and len(done) >= opts.beam_size:
                break
            if tok_id == eos:
                tokens = vocab.decode(hyp.ids)
                if forced_ids and not _contains(hyp.ids, forced_ids):
                    cont = forced_continuation(hyp)
                    if cont is not None and len(next_alive) < opts.beam_size:
                        next_alive.append(cont)
                    continue
                if _arity_complete(tokens) and len(done) < 4 * opts.beam_size:
                    done.append((hyp.ids, total_lp))
            elif tok_id not in (pad, bos):
                if len(next_alive) < opts.beam_size:
                    next_alive.append(_Hyp(hyp.ids + [tok_id], total_lp))
        alive = next_alive
    out = []
    for ids, lp in done:
        tokens = tuple(vocab.decode(ids))
        norm = max(1, len(ids))
        out.append((tokens, lp, lp / norm ** opts.length_alpha))
    out.sort(key=lambda t: -t[2])
    return out[: opts.beam_size]


def beam_search(
    source: Checkpoint | RegressorModel,
    obs: ObservationSet,
    opts: BeamOptions,
) -> list[BeamCandidate]:
    """Decode both branches and pair the beams by joint log-probability."""
    if len(obs) == 0:
        raise ValueError("observation set is empty")
    model = source.build_model() if isinstance(source, Checkpoint) else source
    model.eval()
    h = model.encode_sets([obs])
    selfs = _branch_beam(model, "self", h, opts, opts.forced_self)
    inters = _branch_beam(model, "inter", h, opts, opts.forced_inter)
    # the empty self sequence is always a legal hypothesis; beams that never
    # finished otherwise still yield candidates through the inter branch
    if not selfs:
        selfs = [((), 0.0, 0.0)]
    inters = [
        cand
        for cand in inters
        if any(t.startswith("x_{j") for t in cand[0])
    ]
    if not inters:
        raise NoValidCandidate("no parsable interaction skeleton in the beam")
    pairs: list[BeamCandidate] = []
    for s_toks, s_lp, s_score in selfs:
        for i_toks, i_lp, i_score in inters:
            pairs.append(BeamCandidate(s_toks, i_toks, s_lp + i_lp, s_score + i_score))
    pairs.sort(key=lambda c: -c.log_prob)
    return pairs[: opts.beam_size]


# ---------------------------------------------------------------------------
# Constant fitting
# ---------------------------------------------------------------------------


class _Objective:
    """Mean squared residual of a skeleton pair over packed triplets."""

    def __init__(self, pair: EquationPair, triplets: Sequence):
        self.pair = pair
        self.n_self = len(pair.self_constants)
        self.n_total = self.n_self + len(pair.inter_constants)
        self.dim = pair.dim
        self.groups = []
        by_k: dict[int, list] = {}
        for t in triplets:
            by_k.setdefault(len(t.neighbors), []).append(t)
        for k, ts in sorted(by_k.items()):
            xi = np.stack([np.atleast_1d(t.x_i) for t in ts])
            y = np.array([np.atleast_1d(t.y_i)[0] for t in ts])
            nb = (
                np.stack([np.asarray(t.neighbors, float) for t in ts])
                if k
                else np.zeros((len(ts), 0, self.dim))
            )
            w = (
                np.stack([np.asarray(t.weights, float) for t in ts])
                if k
                else np.zeros((len(ts), 0))
            )
            self.groups.append((k, xi, nb, w, y))
        self.n_points = sum(len(g[4]) for g in self.groups)

    def residuals(self, theta: np.ndarray) -> np.ndarray:
        sc = theta[: self.n_self]
        ic = theta[self.n_self :]
        res = []
        for k, xi, nb, w, y in self.groups:
            m = len(y)
            bind = {expr.var_symbol("i", d): xi[:, d] for d in range(self.dim)}
            rs = expr.eval_batch(self.pair.f_self, bind, sc, shape=(m,))
            pred = rs.values.copy()
            ok = rs.ok.copy()
            if k:
                bi = {
                    expr.var_symbol("i", d): np.repeat(xi[:, d], k)
                    for d in range(self.dim)
                }
                bi.update(
                    {
                        expr.var_symbol("j", d): nb[:, :, d].reshape(-1)
                        for d in range(self.dim)
                    }
                )
                ri = expr.eval_batch(self.pair.f_inter, bi, ic, shape=(m * k,))
                ok &= ri.ok.reshape(m, k).all(axis=1)
                pred = pred + (w * ri.values.reshape(m, k)).sum(axis=1)
            r = y - pred
            bad = ~ok | ~np.isfinite(r)
            res.append(np.where(bad, PENALTY_RESIDUAL, r))
        return np.concatenate(res)

    def __call__(self, theta: np.ndarray) -> float:
        r = self.residuals(theta)
        return float((r * r).mean())

    def grad(self, theta: np.ndarray) -> np.ndarray:
        """Central differences with a step scaled by each coordinate."""
        g = np.zeros_like(theta)
        for i in range(len(theta)):
            step = 1e-6 * max(1.0, abs(theta[i]))
            hi = theta.copy()
            lo = theta.copy()
            hi[i] += step
            lo[i] -= step
            g[i] = (self(hi) - self(lo)) / (2 * step)
        return g


def fit_constants(
    pair: EquationPair,
    obs: ObservationSet,
    rng: np.random.Generator | None = None,
    n_random_starts: int = 10,
) -> EquationPair:
    """Multi-start BFGS on the mean squared residual over the triplets."""
    n_params = len(pair.self_constants) + len(pair.inter_constants)
    if n_params == 0:
        return pair
    if len(obs) < n_params:
        raise ValueError(f"{len(obs)} points cannot pin {n_params} constants")
    rng = rng or np.random.default_rng(0)
    objective = _Objective(pair, obs.triplets)
    starts = [np.zeros(n_params), np.ones(n_params)]
    starts += [rng.standard_normal(n_params) for _ in range(n_random_starts)]
    best_theta: np.ndarray | None = None
    best_val = np.inf
    for theta0 in starts:
        val0 = objective(theta0)
        if np.isfinite(val0) and val0 < best_val:
            best_val, best_theta = val0, theta0.copy()
        try:
            res = optimize.minimize(
                objective,
                theta0,
                jac=objective.grad,
                method="BFGS",
                options={"maxiter": 200},
            )
        except (FloatingPointError, ValueError):
            continue
        if np.isfinite(res.fun) and np.isfinite(res.x).all() and res.fun < best_val:
            best_val, best_theta = float(res.fun), res.x.copy()
    if best_theta is None:
        raise NoConvergence("no optimizer start produced a finite loss", pair)
    return dataclasses.replace(
        pair,
        self_constants=tuple(best_theta[: len(pair.self_constants)]),
        inter_constants=tuple(best_theta[len(pair.self_constants) :]),
    )


# ---------------------------------------------------------------------------
# Full pipeline
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class CandidateResult:
    pair: EquationPair  # fitted and unscaled
    r2: float
    close: dict
    log_prob: float
    note: str = ""


@dataclass(frozen=True)
class RegressionResult:
    candidates: tuple[CandidateResult, ...]
    scaler: Scaler
    chosen: int

    @property
    def winner(self) -> CandidateResult:
        return self.candidates[self.chosen]


def regress(
    source: Checkpoint | RegressorModel,
    obs_or_traj,
    adj=None,
    opts: BeamOptions | None = None,
    *,
    seed: int = 0,
    n_nodes: int = 20,
    n_clusters: int = 10,
    per_cluster: int = 20,
    t_points: int = 10,
    holdout_frac: float = 0.2,
    simplify: bool = True,
    simplify_threshold: float = 1e-4,
) -> RegressionResult:
    """Observations -> ranked fitted equations.

    ``obs_or_traj`` is either an ObservationSet (raw sets get a scaler fitted
    and applied here) or a Trajectory, in which case ``adj`` is required and
    the preprocessing pipeline builds the observation set.
    """
    opts = opts or BeamOptions()
    rng = np.random.default_rng(np.random.SeedSequence([seed, 101]))
    if isinstance(obs_or_traj, ObservationSet):
        obs = obs_or_traj
        if obs.scaler is None:
            xs = np.stack([t.x_i for t in obs.triplets])
            scaler = fit_scaler(xs)
            obs = ObservationSet(
                tuple(
                    dataclasses.replace(
                        t,
                        x_i=apply_scaler(t.x_i, scaler),
                        neighbors=apply_scaler(t.neighbors, scaler)
                        if len(t.neighbors)
                        else t.neighbors,
                    )
                    for t in obs.triplets
                ),
                obs.dim,
                scaler,
            )
    else:
        if adj is None:
            raise ValueError("regressing a trajectory needs the adjacency")
        traj = obs_or_traj
        obs, _scaler = build_observation_set(
            traj.times,
            traj.states,
            adj,
            n_nodes=n_nodes,
            n_clusters=n_clusters,
            per_cluster=per_cluster,
            t_points=t_points,
            rng=rng,
        )
    candidates = beam_search(source, obs, opts)
    n = len(obs)
    perm = rng.permutation(n)
    n_hold = max(2, int(round(holdout_frac * n))) if n >= 10 else 0
    hold_idx = set(int(i) for i in perm[:n_hold])
    train_trip = tuple(t for i, t in enumerate(obs.triplets) if i not in hold_idx)
    hold_trip = tuple(t for i, t in enumerate(obs.triplets) if i in hold_idx)
    train_obs = ObservationSet(train_trip, obs.dim, obs.scaler)
    eval_trip = hold_trip if hold_trip else train_trip
    y_hold = np.array([np.atleast_1d(t.y_i)[0] for t in eval_trip])
    results: list[CandidateResult] = []
    for cand in candidates:
        note = ""
        try:
            pair = cand.skeleton(obs.dim)
        except (expr.ExprError, ValueError) as exc:
            continue
        try:
            fitted = fit_constants(pair, train_obs, rng=np.random.default_rng(
                np.random.SeedSequence([seed, 7, len(results)])))
        except (NoConvergence, ValueError) as exc:
            fitted, note = pair, f"fit failed: {exc}"
        pred = expr.predict_pair(fitted, eval_trip)
        if np.isfinite(pred).all() and len(y_hold) >= 2 and not np.allclose(y_hold, y_hold[0]):
            r2 = metrics.r2(y_hold, pred)
            close = {}
            for p in metrics.CLOSE_LEVELS:
                try:
                    close[p] = metrics.close_p(y_hold, pred, p)
                except metrics.AllSkipped:
                    close[p] = float("nan")
        else:
            r2, close = float("-inf"), {}
            note = note or "holdout evaluation failed"
        results.append(
            CandidateResult(fitted, r2, close, cand.log_prob, note)
        )
    if not results:
        raise NoValidCandidate("no candidate survived fitting")
    results.sort(
        key=lambda c: (-c.r2, c.pair.total_tokens, -c.log_prob)
    )
    scaler = obs.scaler
    unscaled = [
        dataclasses.replace(c, pair=unscale_equation(c.pair, scaler))
        for c in results
    ]
    if simplify:
        raw_obs = unscale_observations(obs)
        winner = unscaled[0]
        simplified = expr.simplify_coefficients(
            winner.pair, simplify_threshold, raw_obs
        )
        unscaled[0] = dataclasses.replace(winner, pair=simplified)
    return RegressionResult(tuple(unscaled), scaler, 0)


# ---------------------------------------------------------------------------
# Result persistence
# ---------------------------------------------------------------------------


def save_result(result: RegressionResult, path: str | Path) -> None:
    data = {
        "chosen": result.chosen,
        "scaler": {
            "mu": [float(v) for v in result.scaler.mu],
            "sigma": [float(v) for v in result.scaler.sigma],
        },
        "candidates": [
            {
                "self_prefix": " ".join(expr.serialize_prefix(c.pair.f_self)),
                "inter_prefix": " ".join(expr.serialize_prefix(c.pair.f_inter)),
                "self_constants": list(c.pair.self_constants),
                "inter_constants": list(c.pair.inter_constants),
                "dim": c.pair.dim,
                "self_infix": expr.to_infix(c.pair.f_self, c.pair.self_constants),
                "inter_infix": expr.to_infix(c.pair.f_inter, c.pair.inter_constants),
                "r2": c.r2,
                "close": {f"{k:g}": v for k, v in c.close.items()},
                "log_prob": c.log_prob,
                "note": c.note,
            }
            for c in result.candidates
        ],
    }
    Path(path).write_text(json.dumps(data, sort_keys=True, indent=1) + "\n")


def load_result(path: str | Path) -> RegressionResult:
    data = json.loads(Path(path).read_text())
    scaler = Scaler(
        np.array(data["scaler"]["mu"], float), np.array(data["scaler"]["sigma"], float)
    )
    cands = []
    for rec in data["candidates"]:
        pair = EquationPair.from_prefix(
            rec["self_prefix"],
            rec["inter_prefix"],
            rec["self_constants"],
            rec["inter_constants"],
            rec["dim"],
        )
        cands.append(
            CandidateResult(
                pair,
                rec["r2"],
                {float(k): v for k, v in rec["close"].items()},
                rec["log_prob"],
                rec.get("note", ""),
            )
        )
    return RegressionResult(tuple(cands), scaler, data["chosen"])
