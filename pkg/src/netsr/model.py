"""Set-to-sequence model: bit-pattern float embedding, per-role state
embeddings with sum-pooled neighbor sets, an induced set-attention encoder
pooled to a fixed number of latent features, and two autoregressive
transformer decoders that emit the self and interaction prefix sequences.

Everything runs in double precision so gradient checks are sharp; the float
embedding itself uses the single-precision bit pattern (32 features per
scalar, sign bit first).
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Iterable, Sequence

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from . import expr
from .sampling import ObservationSet

# Reference configuration used by the original full-scale training run.
PAPER_SCALE = {
    "B": 16,
    "D_max": 3,
    "D_754": 32,
    "D_e": 512,
    "N_d": 6,
    "N_s": 200,
    "N_i": 50,
    "N_o": 20,
    "N_SAB": 2,
    "N_ISAB": 3,
}


class NonFinite(Exception):
    """Float embedding rejects NaN/inf inputs."""


class ShapeMismatch(Exception):
    pass


class TooLong(Exception):
    """Sequence does not fit the decoder's positional table."""


@dataclass(frozen=True)
class ModelConfig:
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
    k_max: int = 16  # neighbor cap per triplet

    def __post_init__(self):
        if self.d_e % self.n_heads:
            raise ValueError("d_e must be divisible by n_heads")
        if self.d_754 != 32:
            raise ValueError("float embedding is fixed to the 32-bit pattern")

    def to_dict(self) -> dict:
        return {k: getattr(self, k) for k in self.__dataclass_fields__}


@dataclass(frozen=True)
class Vocabulary:
    tokens: tuple[str, ...]

    @classmethod
    def build(cls, d_max: int = 3) -> "Vocabulary":
        toks = [expr.PAD, expr.BOS, expr.EOS]
        toks += list(expr.BINARY_OPS) + list(expr.UNARY_OPS)
        toks += [expr.var_symbol("i", k) for k in range(d_max)]
        toks += [expr.var_symbol("j", k) for k in range(d_max)]
        toks.append(expr.CONST_SYMBOL)
        return cls(tuple(toks))

    def __post_init__(self):
        if len(set(self.tokens)) != len(self.tokens):
            raise ValueError("duplicate tokens in vocabulary")

    def __len__(self) -> int:
        return len(self.tokens)

    @property
    def index(self) -> dict[str, int]:
        return {t: i for i, t in enumerate(self.tokens)}

    @property
    def pad_id(self) -> int:
        return self.tokens.index(expr.PAD)

    @property
    def bos_id(self) -> int:
        return self.tokens.index(expr.BOS)

    @property
    def eos_id(self) -> int:
        return self.tokens.index(expr.EOS)

    def encode(self, symbols: Iterable[str]) -> list[int]:
        idx = self.index
        return [idx[s] for s in symbols]

    def decode(self, ids: Iterable[int]) -> list[str]:
        return [self.tokens[i] for i in ids]

    def xj_ids(self) -> list[int]:
        out = []
        for i, t in enumerate(self.tokens):
            try:
                role, _ = expr.var_parts(t)
            except expr.UnknownToken:
                continue
            if role == "j":
                out.append(i)
        return out


def embed_float754(x: float) -> np.ndarray:
    """IEEE-754 single-precision bit pattern as 0/1 features, sign bit first."""
    if not np.isfinite(x):
        raise NonFinite(f"cannot embed {x}")
    return _bits(np.asarray(x, dtype=np.float64)).astype(np.float64)


def _bits(arr: np.ndarray) -> np.ndarray:
    """(…,) float array -> (…, 32) bit array, most significant bit first."""
    with np.errstate(over="ignore"):
        as32 = np.asarray(arr, dtype=np.float32)
    if not np.isfinite(as32).all():
        raise NonFinite("value does not fit the single-precision range")
    u = as32.view(np.uint32)
    shifts = np.arange(31, -1, -1, dtype=np.uint32)
    return ((u[..., None] >> shifts) & 1).astype(np.float64)


def _component_bits(vecs: np.ndarray, d_max: int) -> np.ndarray:
    """(…, d) states -> (…, d_max*32) bits, missing components = bits of 0.0."""
    d = vecs.shape[-1]
    out = np.zeros(vecs.shape[:-1] + (d_max, 32))
    out[..., :d, :] = _bits(vecs)
    return out.reshape(vecs.shape[:-1] + (d_max * 32,))


# ---------------------------------------------------------------------------
# Batching
# ---------------------------------------------------------------------------


@dataclass
class ObsBatch:
    xi_bits: torch.Tensor  # (B, S, d_max*32)
    nb_bits: torch.Tensor  # (B, S, K, d_max*32)
    nb_mask: torch.Tensor  # (B, S, K) bool
    y_bits: torch.Tensor  # (B, S, d_max*32)
    set_mask: torch.Tensor  # (B, S) bool


@dataclass
class TargetBatch:
    self_in: torch.Tensor  # (B, L) long, BOS-prefixed
    self_out: torch.Tensor  # (B, L) long, EOS-suffixed, PAD elsewhere
    inter_in: torch.Tensor
    inter_out: torch.Tensor


def pack_observations(sets: Sequence[ObservationSet], cfg: ModelConfig) -> ObsBatch:
    """Pad observation sets to common sizes and embed every scalar."""
    if not sets:
        raise ShapeMismatch("empty batch")
    b = len(sets)
    s_max = max(len(o) for o in sets)
    if s_max == 0:
        raise ShapeMismatch("observation sets must be non-empty")
    # pad neighbors only to the batch's true maximum (cap still applies)
    k_data = max((len(t.neighbors) for o in sets for t in o.triplets), default=0)
    k = max(1, min(cfg.k_max, k_data))
    dm = cfg.d_max
    xi = np.zeros((b, s_max, dm * 32))
    nb = np.zeros((b, s_max, k, dm * 32))
    nbm = np.zeros((b, s_max, k), bool)
    yb = np.zeros((b, s_max, dm * 32))
    sm = np.zeros((b, s_max), bool)
    for bi, obs in enumerate(sets):
        if obs.dim > dm:
            raise ShapeMismatch(f"observation dim {obs.dim} exceeds d_max {dm}")
        for si, t in enumerate(obs.triplets):
            xi[bi, si] = _component_bits(np.atleast_1d(t.x_i), dm)
            yb[bi, si] = _component_bits(np.atleast_1d(t.y_i), dm)
            sm[bi, si] = True
            kk = min(len(t.neighbors), k)
            if kk:
                states = np.asarray(t.neighbors, float)
                if len(states) > k:
                    # cap: keep a canonical subset so the truncation is
                    # invariant to the neighbors' input order
                    keys = tuple(states[:, d] for d in range(states.shape[1] - 1, -1, -1))
                    order = np.lexsort((np.asarray(t.weights, float),) + keys)[:k]
                    states = states[order]
                nb[bi, si, :kk] = _component_bits(states, dm)
                nbm[bi, si, :kk] = True
    return ObsBatch(
        torch.from_numpy(xi),
        torch.from_numpy(nb),
        torch.from_numpy(nbm),
        torch.from_numpy(yb),
        torch.from_numpy(sm),
    )


def pack_targets(
    pairs: Sequence, vocab: Vocabulary, max_seq: int
) -> TargetBatch:
    """Teacher-forcing tensors for both branches (BOS-in, EOS-out, PAD fill)."""

    def one_branch(seqs: list[list[str]]) -> tuple[torch.Tensor, torch.Tensor]:
        ids = [vocab.encode(s) for s in seqs]
        for s in ids:
            if len(s) + 1 > max_seq:
                raise TooLong(f"target of {len(s)} tokens exceeds max_seq={max_seq}")
        length = max(len(s) for s in ids) + 1
        src = torch.full((len(ids), length), vocab.pad_id, dtype=torch.long)
        out = torch.full((len(ids), length), vocab.pad_id, dtype=torch.long)
        for i, s in enumerate(ids):
            src[i, 0] = vocab.bos_id
            src[i, 1 : 1 + len(s)] = torch.tensor(s, dtype=torch.long)
            out[i, : len(s)] = torch.tensor(s, dtype=torch.long)
            out[i, len(s)] = vocab.eos_id
        return src, out

    self_in, self_out = one_branch(
        [expr.serialize_prefix(p.f_self) for p in pairs]
    )
    inter_in, inter_out = one_branch(
        [expr.serialize_prefix(p.f_inter) for p in pairs]
    )
    return TargetBatch(self_in, self_out, inter_in, inter_out)


# ---------------------------------------------------------------------------
# Attention blocks
# ---------------------------------------------------------------------------


class MultiheadAttention(nn.Module):
    def __init__(self, d: int, heads: int):
        super().__init__()
        self.heads = heads
        self.wq = nn.Linear(d, d)
        self.wk = nn.Linear(d, d)
        self.wv = nn.Linear(d, d)
        self.wo = nn.Linear(d, d)

    def forward(
        self,
        q: torch.Tensor,
        kv: torch.Tensor,
        key_mask: torch.Tensor | None = None,
        causal: bool = False,
    ) -> torch.Tensor:
        b, lq, d = q.shape
        lk = kv.shape[1]
        h, dh = self.heads, d // self.heads
        qh = self.wq(q).view(b, lq, h, dh).transpose(1, 2)
        kh = self.wk(kv).view(b, lk, h, dh).transpose(1, 2)
        vh = self.wv(kv).view(b, lk, h, dh).transpose(1, 2)
        scores = qh @ kh.transpose(-1, -2) / math.sqrt(dh)
        if key_mask is not None:
            scores = scores.masked_fill(~key_mask[:, None, None, :], float("-inf"))
        if causal:
            causal_mask = torch.ones(lq, lk, dtype=torch.bool, device=q.device).triu(1)
            scores = scores.masked_fill(causal_mask, float("-inf"))
        att = torch.softmax(scores, dim=-1)
        out = (att @ vh).transpose(1, 2).reshape(b, lq, d)
        return self.wo(out)


class MAB(nn.Module):
    """Attention block of the set encoder: attend, then a residual rFF."""

    def __init__(self, d: int, heads: int):
        super().__init__()
        self.att = MultiheadAttention(d, heads)
        self.ff = nn.Linear(d, d)
        self.ln0 = nn.LayerNorm(d)
        self.ln1 = nn.LayerNorm(d)

    def forward(self, q, kv, key_mask=None):
        x = self.ln0(q + self.att(q, kv, key_mask=key_mask))
        return self.ln1(x + torch.relu(self.ff(x)))


class ISAB(nn.Module):
    """Set attention through a small bank of inducing points."""

    def __init__(self, d: int, heads: int, n_inducing: int):
        super().__init__()
        self.inducing = nn.Parameter(torch.zeros(n_inducing, d))
        self.mab0 = MAB(d, heads)
        self.mab1 = MAB(d, heads)

    def forward(self, x, mask=None):
        b = x.shape[0]
        i = self.inducing.unsqueeze(0).expand(b, -1, -1)
        h = self.mab0(i, x, key_mask=mask)
        return self.mab1(x, h)


class PMA(nn.Module):
    """Pool a set onto learned seed vectors by attention."""

    def __init__(self, d: int, heads: int, n_seeds: int):
        super().__init__()
        self.seeds = nn.Parameter(torch.zeros(n_seeds, d))
        self.pre = nn.Linear(d, d)
        self.mab = MAB(d, heads)

    def forward(self, x, mask=None):
        b = x.shape[0]
        s = self.seeds.unsqueeze(0).expand(b, -1, -1)
        return self.mab(s, torch.relu(self.pre(x)), key_mask=mask)


class RoleEmbed(nn.Module):
    """Bit pattern -> d_e via linear + leaky-rectifier + linear."""

    def __init__(self, d_in: int, d_e: int):
        super().__init__()
        self.l1 = nn.Linear(d_in, d_e)
        self.l2 = nn.Linear(d_e, d_e)

    def forward(self, x):
        return self.l2(F.leaky_relu(self.l1(x)))


class DecoderLayer(nn.Module):
    def __init__(self, d: int, heads: int):
        super().__init__()
        self.ln1 = nn.LayerNorm(d)
        self.self_att = MultiheadAttention(d, heads)
        self.ln2 = nn.LayerNorm(d)
        self.cross_att = MultiheadAttention(d, heads)
        self.ln3 = nn.LayerNorm(d)
        self.ff1 = nn.Linear(d, d)
        self.ff2 = nn.Linear(d, d)

    def forward(self, x, h):
        a = self.ln1(x)
        x = x + self.self_att(a, a, causal=True)
        b = self.ln2(x)
        x = x + self.cross_att(b, h)
        c = self.ln3(x)
        return x + self.ff2(torch.relu(self.ff1(c)))


class Decoder(nn.Module):
    def __init__(self, cfg: ModelConfig, vocab_size: int):
        super().__init__()
        self.token_emb = nn.Embedding(vocab_size, cfg.d_e)
        self.pos_emb = nn.Embedding(cfg.max_seq, cfg.d_e)
        self.layers = nn.ModuleList(
            DecoderLayer(cfg.d_e, cfg.n_heads) for _ in range(cfg.n_dec_layers)
        )
        self.ln = nn.LayerNorm(cfg.d_e)
        self.head = nn.Linear(cfg.d_e, vocab_size)

    def forward(self, ids: torch.Tensor, h: torch.Tensor) -> torch.Tensor:
        b, l = ids.shape
        pos = torch.arange(l, device=ids.device)
        x = self.token_emb(ids) + self.pos_emb(pos)[None]
        for layer in self.layers:
            x = layer(x, h)
        return self.head(self.ln(x))


@dataclass
class LossStats:
    loss: float
    n_tokens: int
    n_correct: int

    @property
    def token_accuracy(self) -> float:
        return self.n_correct / max(1, self.n_tokens)


class RegressorModel(nn.Module):
    """Encoder over observation sets plus self/inter branch decoders."""

    def __init__(self, cfg: ModelConfig, vocab: Vocabulary | None = None):
        super().__init__()
        self.cfg = cfg
        self.vocab = vocab or Vocabulary.build(cfg.d_max)
        d_in = cfg.d_max * cfg.d_754
        self.emb_xi = RoleEmbed(d_in, cfg.d_e)
        self.emb_y = RoleEmbed(d_in, cfg.d_e)
        self.nb_phi = RoleEmbed(d_in, cfg.d_e)
        self.nb_rho = nn.Linear(cfg.d_e, cfg.d_e)
        self.joint = nn.Linear(3 * cfg.d_e, cfg.d_e)
        self.joint_norm = nn.LayerNorm(cfg.d_e)
        self.isabs = nn.ModuleList(
            ISAB(cfg.d_e, cfg.n_heads, cfg.n_inducing) for _ in range(cfg.n_isab)
        )
        self.pma = PMA(cfg.d_e, cfg.n_heads, cfg.n_seeds)
        # SAB(x) == MAB(x, x); applied after pooling where no mask is needed
        self.sabs = nn.ModuleList(
            MAB(cfg.d_e, cfg.n_heads) for _ in range(cfg.n_sab)
        )
        self.dec_self = Decoder(cfg, len(self.vocab))
        self.dec_inter = Decoder(cfg, len(self.vocab))
        xj = torch.zeros(len(self.vocab), dtype=torch.bool)
        xj[self.vocab.xj_ids()] = True
        self.register_buffer("xj_mask", xj)
        self.double()

    # -- initialization ----------------------------------------------------

    def reset_parameters(self, seed: int) -> None:
        """Uniform fan-in init for affine maps, zero biases, seeded."""
        g = torch.Generator().manual_seed(seed)
        for mod in self.modules():
            if isinstance(mod, nn.Linear):
                bound = 1.0 / math.sqrt(mod.in_features)
                mod.weight.data.uniform_(-bound, bound, generator=g)
                mod.bias.data.zero_()
            elif isinstance(mod, nn.Embedding):
                bound = 1.0 / math.sqrt(mod.embedding_dim)
                mod.weight.data.uniform_(-bound, bound, generator=g)
            elif isinstance(mod, nn.LayerNorm):
                mod.weight.data.fill_(1.0)
                mod.bias.data.zero_()
        for name, par in self.named_parameters():
            if name.endswith("inducing") or name.endswith("seeds"):
                # unit-scale learned queries so attention differentiates from step 0
                par.data.normal_(0.0, 1.0, generator=g)

    # -- encoder -----------------------------------------------------------

    def encode(self, batch: ObsBatch) -> torch.Tensor:
        """(B, n_seeds, d_e) latent; invariant to triplet and neighbor order."""
        e_xi = self.emb_xi(batch.xi_bits)
        e_y = self.emb_y(batch.y_bits)
        phi = self.nb_phi(batch.nb_bits)
        phi = phi * batch.nb_mask[..., None]
        e_nb = self.nb_rho(phi.sum(dim=2))
        x = self.joint_norm(self.joint(torch.cat([e_xi, e_nb, e_y], dim=-1)))
        mask = batch.set_mask
        for isab in self.isabs:
            x = isab(x, mask)
        x = self.pma(x, mask)
        for sab in self.sabs:
            x = sab(x, x)
        return x

    def encode_sets(self, sets: Sequence[ObservationSet]) -> torch.Tensor:
        with torch.no_grad():
            return self.encode(pack_observations(sets, self.cfg))

    # -- decoders ----------------------------------------------------------

    def branch_logits(self, branch: str, h: torch.Tensor, ids: torch.Tensor) -> torch.Tensor:
        if branch not in ("self", "inter"):
            raise ValueError(f"branch must be 'self' or 'inter', got {branch!r}")
        if ids.shape[1] > self.cfg.max_seq:
            raise TooLong(f"prefix of {ids.shape[1]} exceeds max_seq={self.cfg.max_seq}")
        dec = self.dec_self if branch == "self" else self.dec_inter
        logits = dec(ids, h)
        if branch == "self":
            logits = logits.masked_fill(self.xj_mask[None, None, :], float("-inf"))
        return logits

    def decode_logits(
        self, branch: str, h: torch.Tensor, prefix: Sequence[str]
    ) -> np.ndarray:
        """Next-token distribution after a prefix (single set's h)."""
        if h.dim() == 2:
            h = h.unsqueeze(0)
        ids = torch.tensor(
            [[self.vocab.bos_id] + self.vocab.encode(prefix)], dtype=torch.long
        )
        if ids.shape[1] > self.cfg.max_seq:
            raise TooLong(f"prefix of {len(prefix)} tokens is too long")
        with torch.no_grad():
            logits = self.branch_logits(branch, h, ids)[0, -1]
            probs = torch.softmax(logits, dim=-1)
        return probs.numpy()

    # -- training objective --------------------------------------------------

    def loss(self, batch: ObsBatch, targets: TargetBatch) -> tuple[torch.Tensor, LossStats]:
        """Mean token cross-entropy over both branches, PAD excluded."""
        h = self.encode(batch)
        total = None
        n_tokens = 0
        n_correct = 0
        pad = self.vocab.pad_id
        for branch, ids_in, ids_out in (
            ("self", targets.self_in, targets.self_out),
            ("inter", targets.inter_in, targets.inter_out),
        ):
            logits = self.branch_logits(branch, h, ids_in)
            ce = F.cross_entropy(
                logits.transpose(1, 2), ids_out, ignore_index=pad, reduction="sum"
            )
            total = ce if total is None else total + ce
            keep = ids_out != pad
            n_tokens += int(keep.sum())
            n_correct += int(((logits.argmax(dim=-1) == ids_out) & keep).sum())
        loss = total / max(1, n_tokens)
        return loss, LossStats(float(loss.detach()), n_tokens, n_correct)
