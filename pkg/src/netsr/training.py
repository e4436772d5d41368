"""Pre-training loop and checkpoint persistence.

Each step draws a batch of corpus pairs, optionally resamples their
constants, synthesizes a fresh observation set per pair on a freshly drawn
topology, and applies one clipped Adam update on the combined branch
cross-entropy.  All randomness is derived from (seed, step), so a run is
reproducible at a fixed thread count.
"""

from __future__ import annotations

import json
import struct
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np
import torch

from . import corpus as corpus_mod
from . import topology as topo_mod
from .corpus import Corpus, resample_constants, synthesize_observations
from .model import (
    ModelConfig,
    ObsBatch,
    RegressorModel,
    TargetBatch,
    Vocabulary,
    pack_observations,
    pack_targets,
)

CHECKPOINT_MAGIC = b"NSRCKPT\x01"
CHECKPOINT_VERSION = 1


class NonFiniteLoss(Exception):
    """Training aborted on a non-finite loss; the batch was dumped."""


class CorruptFile(Exception):
    pass


class VersionMismatch(Exception):
    pass


class ConfigMismatch(Exception):
    """Checkpoint does not match the configuration the runtime expects."""


@dataclass(frozen=True)
class TrainConfig:
    batch_size: int = 16
    epochs: int = 20
    lr: float = 3e-4
    lr_warmup_steps: int = 0  # linear ramp to lr; constant afterwards
    clip_norm: float = 1.0
    seed: int = 0
    checkpoint_every: int = 0  # steps; 0 = final checkpoint only
    constant_resample: bool = True
    n_obs_points: int = 200
    topo_n_range: tuple[int, int] = (10, 200)
    max_steps: int | None = None  # optional hard cap across epochs
    target_token_accuracy: float | None = None  # early stop when reached
    target_loss: float | None = None  # early stop when the smoothed loss dips
    log_every: int = 10

    def __post_init__(self):
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if self.lr <= 0:
            raise ValueError("lr must be positive")


@dataclass
class Checkpoint:
    config: ModelConfig
    vocab: Vocabulary
    params: dict[str, np.ndarray]
    seed: int
    step: int

    def build_model(self) -> RegressorModel:
        model = RegressorModel(self.config, self.vocab)
        state = {k: torch.from_numpy(v.copy()) for k, v in self.params.items()}
        model.load_state_dict(state)
        model.eval()
        return model

    @classmethod
    def from_model(cls, model: RegressorModel, seed: int, step: int) -> "Checkpoint":
        params = {
            k: v.detach().cpu().numpy().copy() for k, v in model.state_dict().items()
        }
        return cls(model.cfg, model.vocab, params, seed, step)


def save_checkpoint(ckpt: Checkpoint, path: str | Path) -> None:
    """Versioned binary container: JSON header + raw little-endian arrays."""
    names = sorted(ckpt.params)
    header = {
        "version": CHECKPOINT_VERSION,
        "config": ckpt.config.to_dict(),
        "vocab": list(ckpt.vocab.tokens),
        "seed": ckpt.seed,
        "step": ckpt.step,
        "arrays": [
            {
                "name": n,
                "shape": list(ckpt.params[n].shape),
                "dtype": str(ckpt.params[n].dtype),
            }
            for n in names
        ],
    }
    blob = json.dumps(header, sort_keys=True).encode()
    with open(path, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(struct.pack("<I", len(blob)))
        fh.write(blob)
        for n in names:
            arr = np.ascontiguousarray(ckpt.params[n])
            fh.write(arr.astype(arr.dtype.newbyteorder("<"), copy=False).tobytes())


def load_checkpoint(path: str | Path, require_config: ModelConfig | None = None) -> Checkpoint:
    raw = Path(path).read_bytes()
    if len(raw) < len(CHECKPOINT_MAGIC) + 4 or not raw.startswith(CHECKPOINT_MAGIC[:-1]):
        raise CorruptFile(f"{path}: not a checkpoint file")
    if raw[: len(CHECKPOINT_MAGIC)] != CHECKPOINT_MAGIC:
        raise VersionMismatch(f"{path}: unsupported container revision")
    off = len(CHECKPOINT_MAGIC)
    (hlen,) = struct.unpack_from("<I", raw, off)
    off += 4
    try:
        header = json.loads(raw[off : off + hlen].decode())
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CorruptFile(f"{path}: unreadable header") from exc
    off += hlen
    if header.get("version") != CHECKPOINT_VERSION:
        raise VersionMismatch(
            f"{path}: version {header.get('version')} != {CHECKPOINT_VERSION}"
        )
    cfg = ModelConfig(**header["config"])
    params: dict[str, np.ndarray] = {}
    for spec in header["arrays"]:
        dtype = np.dtype(spec["dtype"]).newbyteorder("<")
        count = int(np.prod(spec["shape"])) if spec["shape"] else 1
        nbytes = count * dtype.itemsize
        if off + nbytes > len(raw):
            raise CorruptFile(f"{path}: truncated array {spec['name']}")
        arr = np.frombuffer(raw, dtype=dtype, count=count, offset=off)
        params[spec["name"]] = arr.reshape(spec["shape"]).astype(spec["dtype"])
        off += nbytes
    if off != len(raw):
        raise CorruptFile(f"{path}: {len(raw) - off} trailing bytes")
    ckpt = Checkpoint(cfg, Vocabulary(tuple(header["vocab"])), params, header["seed"], header["step"])
    if require_config is not None and cfg != require_config:
        raise ConfigMismatch(f"checkpoint config {cfg} != expected {require_config}")
    return ckpt


# ---------------------------------------------------------------------------
# Data synthesis
# ---------------------------------------------------------------------------


def _step_rng(seed: int, step: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence([seed, step]))


def _epoch_rng(seed: int, epoch: int) -> np.random.Generator:
    # separate stream namespace from per-step seeds
    return np.random.default_rng(np.random.SeedSequence([seed, 2**40 + epoch]))


def synthesize_batch(
    pairs: Sequence,
    gen_cfg,
    mcfg: ModelConfig,
    rng: np.random.Generator,
    n_points: int,
    topo_n_range: tuple[int, int],
    resample: bool,
) -> tuple[ObsBatch, TargetBatch, list[int], list[str]]:
    """Fresh observations (and optionally constants) for a batch of pairs.

    Returns the packed batch, targets, the indices of pairs that survived
    synthesis, and notes for the skipped ones.
    """
    kept, sets, notes = [], [], []
    vocab = Vocabulary.build(mcfg.d_max)
    for i, pair in enumerate(pairs):
        if resample:
            pair = resample_constants(pair, gen_cfg, rng)
        spec = topo_mod.sample_spec(rng, topo_n_range)
        adj = topo_mod.generate_topology(spec, rng)
        n_centers = int(rng.integers(1, max(1, adj.n // 10) + 1))
        try:
            obs = synthesize_observations(pair, adj, n_centers, rng, n_points)
        except corpus_mod.DegenerateEquation as exc:
            notes.append(f"pair {i}: {exc}")
            continue
        kept.append(i)
        sets.append(obs)
    if not kept:
        return None, None, kept, notes  # type: ignore[return-value]
    batch = pack_observations(sets, mcfg)
    targets = pack_targets([pairs[i] for i in kept], vocab, mcfg.max_seq)
    return batch, targets, kept, notes


# ---------------------------------------------------------------------------
# Training loop
# ---------------------------------------------------------------------------


def train(
    corpus: Corpus,
    mcfg: ModelConfig,
    tcfg: TrainConfig,
    out_dir: str | Path | None = None,
    log: Callable[[str], None] | None = None,
) -> Checkpoint:
    """Pre-train on a corpus; returns (and optionally persists) the checkpoint."""
    if not corpus.pairs:
        raise ValueError("corpus is empty")
    out = Path(out_dir) if out_dir is not None else None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
    model = RegressorModel(mcfg)
    model.reset_parameters(tcfg.seed)
    model.train()
    opt = torch.optim.Adam(model.parameters(), lr=tcfg.lr, betas=(0.9, 0.999), eps=1e-8)
    n = len(corpus.pairs)
    steps_per_epoch = (n + tcfg.batch_size - 1) // tcfg.batch_size
    log_lines: list[str] = []
    step = 0
    t0 = time.monotonic()
    stop = False
    acc_window: list[float] = []
    loss_window: list[float] = []
    for epoch in range(tcfg.epochs):
        order = _epoch_rng(tcfg.seed, epoch).permutation(n)
        for chunk in range(steps_per_epoch):
            idx = order[chunk * tcfg.batch_size : (chunk + 1) * tcfg.batch_size]
            pairs = [corpus.pairs[i] for i in idx]
            rng = _step_rng(tcfg.seed, step)
            batch, targets, kept, notes = synthesize_batch(
                pairs,
                corpus.config,
                mcfg,
                rng,
                tcfg.n_obs_points,
                tcfg.topo_n_range,
                tcfg.constant_resample,
            )
            for note in notes:
                log_lines.append(f"step {step} skipped {note}")
            if batch is None:
                step += 1
                continue
            loss, stats = model.loss(batch, targets)
            if not torch.isfinite(loss):
                if out is not None:
                    _dump_batch(out / "nonfinite_batch.npz", batch, targets)
                raise NonFiniteLoss(f"loss became non-finite at step {step}")
            if tcfg.lr_warmup_steps and step < tcfg.lr_warmup_steps:
                scale = (step + 1) / tcfg.lr_warmup_steps
                for group in opt.param_groups:
                    group["lr"] = tcfg.lr * scale
            elif tcfg.lr_warmup_steps and step == tcfg.lr_warmup_steps:
                for group in opt.param_groups:
                    group["lr"] = tcfg.lr
            opt.zero_grad()
            loss.backward()
            torch.nn.utils.clip_grad_norm_(model.parameters(), tcfg.clip_norm)
            opt.step()
            for p in model.parameters():
                if not torch.isfinite(p).all():
                    raise NonFiniteLoss(f"non-finite parameter after step {step}")
            step += 1
            acc_window.append(stats.token_accuracy)
            loss_window.append(stats.loss)
            if len(acc_window) > 10:
                acc_window.pop(0)
            if len(loss_window) > 10:
                loss_window.pop(0)
            if step % tcfg.log_every == 0 or step == 1:
                line = (
                    f"step={step} loss={stats.loss:.6f} "
                    f"token_acc={stats.token_accuracy:.4f} wall={time.monotonic() - t0:.1f}s"
                )
                log_lines.append(line)
                if log is not None:
                    log(line)
            if out is not None and tcfg.checkpoint_every and step % tcfg.checkpoint_every == 0:
                save_checkpoint(
                    Checkpoint.from_model(model, tcfg.seed, step),
                    out / f"ckpt_step{step:06d}.bin",
                )
            if (
                tcfg.target_token_accuracy is not None
                and len(acc_window) >= 5
                and float(np.mean(acc_window[-5:])) >= tcfg.target_token_accuracy
            ):
                stop = True
                break
            if (
                tcfg.target_loss is not None
                and len(loss_window) >= 10
                and float(np.mean(loss_window)) <= tcfg.target_loss
            ):
                stop = True
                break
            if tcfg.max_steps is not None and step >= tcfg.max_steps:
                stop = True
                break
        if stop:
            break
    model.eval()
    ckpt = Checkpoint.from_model(model, tcfg.seed, step)
    if out is not None:
        save_checkpoint(ckpt, out / "checkpoint.bin")
        (out / "train.log").write_text("\n".join(log_lines) + "\n" if log_lines else "")
    return ckpt


def _dump_batch(path: Path, batch: ObsBatch, targets: TargetBatch) -> None:
    np.savez(
        path,
        xi_bits=batch.xi_bits.numpy(),
        nb_bits=batch.nb_bits.numpy(),
        nb_mask=batch.nb_mask.numpy(),
        y_bits=batch.y_bits.numpy(),
        set_mask=batch.set_mask.numpy(),
        self_in=targets.self_in.numpy(),
        self_out=targets.self_out.numpy(),
        inter_in=targets.inter_in.numpy(),
        inter_out=targets.inter_out.numpy(),
    )


def token_accuracy(
    model: RegressorModel,
    corpus: Corpus,
    seed: int,
    n_points: int = 200,
    topo_n_range: tuple[int, int] = (10, 200),
    batch_size: int = 16,
) -> float:
    """Teacher-forced token accuracy over the whole corpus on fresh data."""
    model.eval()
    total = correct = 0
    rng = _step_rng(seed, 10**9)
    with torch.no_grad():
        for start in range(0, len(corpus.pairs), batch_size):
            pairs = corpus.pairs[start : start + batch_size]
            batch, targets, kept, _notes = synthesize_batch(
                pairs, corpus.config, model.cfg, rng, n_points, topo_n_range, False
            )
            if batch is None:
                continue
            _loss, stats = model.loss(batch, targets)
            total += stats.n_tokens
            correct += stats.n_correct
    return correct / max(1, total)
