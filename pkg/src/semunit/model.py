"""SU4MT: a Transformer whose encoder reads token- and semantic-unit-level streams."""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, fields
from typing import Sequence

import torch
import torch.nn as nn

from .corpus import BOS_ID, EOS_ID, PAD_ID
from .layers import LN_EPS, DecoderLayer, EncoderLayer, MultiHeadAttention, sinusoidal_pe
from .wpe import SpanSet

INPUT_MODES = ("token+semantic", "token-x2", "semantic-x2", "token-only", "semantic-only")

# parameters that exist only for the semantic stream; everything else is
# shared with a plain Transformer baseline
SEMANTIC_PREFIXES = ("asf.", "input_norm.")

_ARCH_FIELDS = ("src_vocab", "tgt_vocab", "d_model", "d_ffn", "enc_layers",
                "dec_layers", "heads", "asf_heads", "max_len")


@dataclass
class ModelConfig:
    src_vocab: int
    tgt_vocab: int
    d_model: int = 64
    d_ffn: int = 256
    enc_layers: int = 2
    dec_layers: int = 2
    heads: int = 4
    asf_heads: int | None = None
    dropout: float = 0.1
    input_mode: str = "token+semantic"
    max_span: int = 6
    max_len: int = 256

    def __post_init__(self):
        if self.d_model % self.heads:
            raise ValueError("d_model must be divisible by heads")
        if self.asf_heads is not None and self.d_model % self.asf_heads:
            raise ValueError("d_model must be divisible by asf_heads")
        if self.d_model % 2:
            raise ValueError("d_model must be even")
        if not 0.0 <= self.dropout < 1.0:
            raise ValueError("dropout must be in [0, 1)")
        if self.input_mode not in INPUT_MODES:
            raise ValueError(f"unknown input mode {self.input_mode!r}; pick one of {INPUT_MODES}")

    @classmethod
    def transformer_base(cls, src_vocab: int, tgt_vocab: int, **kw) -> "ModelConfig":
        base = dict(d_model=512, d_ffn=2048, enc_layers=6, dec_layers=6, heads=8, dropout=0.1)
        base.update(kw)
        return cls(src_vocab, tgt_vocab, **base)

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        names = {f.name for f in fields(cls)}
        return cls(**{k: v for k, v in d.items() if k in names})

    def arch_mismatch(self, other: "ModelConfig") -> list[str]:
        """Architecture fields that differ (mode and dropout may differ freely)."""
        return [f for f in _ARCH_FIELDS if getattr(self, f) != getattr(other, f)]


def pool_features(unit: torch.Tensor, mask: torch.Tensor | None = None) -> torch.Tensor:
    """Stack (min, max, mean) over the token axis: (..., S, d) -> (..., 3, d).

    `mask` (..., S) marks real tokens; padded slots never influence the result.
    """
    if unit.shape[-2] == 0:
        raise ValueError("cannot pool an empty unit")
    if mask is None:
        return torch.stack([unit.amin(-2), unit.amax(-2), unit.mean(-2)], dim=-2)
    if not bool(mask.any(-1).all()):
        raise ValueError("cannot pool an empty unit")
    m = mask.unsqueeze(-1)
    lo = unit.masked_fill(~m, float("inf")).amin(-2)
    hi = unit.masked_fill(~m, float("-inf")).amax(-2)
    avg = (unit * m).sum(-2) / m.sum(-2).to(unit.dtype)
    return torch.stack([lo, hi, avg], dim=-2)


class AttentiveSemanticFusion(nn.Module):
    """Fuse the token vectors of one semantic unit into a single vector.

    The pooled (min, max, mean) rows query the unit's own tokens, the three
    outputs are flattened to 3*d and projected back down to d, then normalized.
    """

    def __init__(self, d_model: int, heads: int):
        super().__init__()
        self.attn = MultiHeadAttention(d_model, heads)
        self.downsample = nn.Linear(3 * d_model, d_model)
        self.norm = nn.LayerNorm(d_model, eps=LN_EPS)

    def forward(self, units: torch.Tensor, mask: torch.Tensor | None = None) -> torch.Tensor:
        """(U, S, d) units with (U, S) mask -> (U, d). A 2-D input is one unit."""
        single = units.dim() == 2
        if single:
            units = units.unsqueeze(0)
            mask = None if mask is None else mask.unsqueeze(0)
        query = pool_features(units, mask)
        fused = self.attn(query, units, units, None if mask is None else mask.unsqueeze(-2))
        out = self.norm(self.downsample(fused.flatten(-2)))
        return out[0:1] if single else out


def asf_forward(unit: torch.Tensor, asf: AttentiveSemanticFusion) -> torch.Tensor:
    """Fuse one unit of shape (k, d) into a (1, d) vector."""
    if unit.dim() != 2:
        raise ValueError("a single unit has shape (tokens, d)")
    return asf(unit)


@dataclass
class EncodedSource:
    states: torch.Tensor  # (B, L, d)
    mask: torch.Tensor  # (B, L) True for real positions

    def repeat(self, n: int) -> "EncodedSource":
        return EncodedSource(self.states.expand(n, -1, -1), self.mask.expand(n, -1))


class SU4MT(nn.Module):
    def __init__(self, config: ModelConfig):
        super().__init__()
        self.config = c = config
        self.src_embed = nn.Embedding(c.src_vocab, c.d_model, padding_idx=PAD_ID)
        self.tgt_embed = nn.Embedding(c.tgt_vocab, c.d_model, padding_idx=PAD_ID)
        self.asf = AttentiveSemanticFusion(c.d_model, c.asf_heads or c.heads)
        self.input_norm = nn.LayerNorm(c.d_model, eps=LN_EPS)
        self.encoder = nn.ModuleList(
            EncoderLayer(c.d_model, c.d_ffn, c.heads, c.dropout) for _ in range(c.enc_layers)
        )
        self.decoder = nn.ModuleList(
            DecoderLayer(c.d_model, c.d_ffn, c.heads, c.dropout) for _ in range(c.dec_layers)
        )
        self.generator = nn.Linear(c.d_model, c.tgt_vocab)
        self.dropout = nn.Dropout(c.dropout)
        self.scale = math.sqrt(c.d_model)
        self.reset_parameters()

    def reset_parameters(self, prefixes: Sequence[str] | None = None) -> None:
        """(Re)initialize all parameters, or only those under `prefixes`."""
        for name, p in self.named_parameters():
            if prefixes is not None and not name.startswith(tuple(prefixes)):
                continue
            with torch.no_grad():
                if name.endswith("embed.weight"):
                    nn.init.normal_(p, 0.0, self.config.d_model ** -0.5)
                    p[PAD_ID].zero_()
                elif "norm" in name:
                    nn.init.ones_(p) if name.endswith("weight") else nn.init.zeros_(p)
                elif p.dim() > 1:
                    nn.init.xavier_uniform_(p)
                else:
                    nn.init.zeros_(p)

    def _pe(self, n: int, like: torch.Tensor) -> torch.Tensor:
        return sinusoidal_pe(n, self.config.d_model, 0, dtype=like.dtype)

    def semantic_stream(self, tok: torch.Tensor, spans: Sequence[SpanSet]):
        """ASF over every span: (B, Lt, d) token vectors -> (B, Ls, d), mask."""
        B, Lt, d = tok.shape
        counts = [len(ss) for ss in spans]
        Ls = max(counts)
        width = max(ss.max_len() for ss in spans)
        rows, cols, idx, umask = [], [], [], []
        for b, ss in enumerate(spans):
            for j, (s, e) in enumerate(ss.spans):
                rows.append(b)
                cols.append(j)
                idx.append([b * Lt + min(s + t, e - 1) for t in range(width)])
                umask.append([t < e - s for t in range(width)])
        idx_t = torch.tensor(idx, dtype=torch.long)
        units = tok.reshape(B * Lt, d)[idx_t]
        fused = self.asf(units, torch.tensor(umask, dtype=torch.bool))
        sem = tok.new_zeros(B, Ls, d).index_put(
            (torch.tensor(rows), torch.tensor(cols)), fused
        )
        mask = torch.arange(Ls).unsqueeze(0) < torch.tensor(counts).unsqueeze(1)
        return sem, mask

    def encode(
        self, src: torch.Tensor, spans: Sequence[SpanSet], mode: str | None = None
    ) -> EncodedSource:
        """Encode padded source ids (B, Lt) with one SpanSet per row."""
        mode = mode or self.config.input_mode
        if mode not in INPUT_MODES:
            raise ValueError(f"unknown input mode {mode!r}")
        if src.dim() == 1:
            src = src.unsqueeze(0)
        B, Lt = src.shape
        if len(spans) != B:
            raise ValueError(f"{len(spans)} span sets for a batch of {B}")
        if src.numel() and (int(src.min()) < 0 or int(src.max()) >= self.config.src_vocab):
            raise ValueError("source token id outside the vocabulary")
        tok_mask = src != PAD_ID
        lengths = tok_mask.sum(1).tolist()
        for b, (ss, n) in enumerate(zip(spans, lengths)):
            if ss.sentence_len != n:
                raise ValueError(f"row {b}: spans cover {ss.sentence_len} tokens, sentence has {n}")

        tok = self.src_embed(src) * self.scale
        parts = []
        if mode != "semantic-only" and mode != "semantic-x2":
            tok_stream = tok + self._pe(Lt, tok)
            parts += [(tok_stream, tok_mask)] * (2 if mode == "token-x2" else 1)
        if mode != "token-only" and mode != "token-x2":
            sem, sem_mask = self.semantic_stream(tok, spans)
            sem_stream = sem + self._pe(sem.shape[1], sem)
            if mode == "semantic-x2":
                parts = [(sem_stream, sem_mask)] * 2
            else:
                parts.append((sem_stream, sem_mask))

        x = torch.cat([p for p, _ in parts], dim=1)
        mask = torch.cat([m for _, m in parts], dim=1)
        if mode != "token-only":
            x = self.input_norm(x)
        x = self.dropout(x)
        attn_mask = mask.unsqueeze(1)
        for layer in self.encoder:
            x = layer(x, attn_mask)
        return EncodedSource(x, mask)

    def decode(self, tgt_in: torch.Tensor, enc: EncodedSource) -> torch.Tensor:
        """Logits (B, T, V) for every prefix position of `tgt_in` (B, T)."""
        B, T = tgt_in.shape
        if T > self.config.max_len:
            raise ValueError(f"target prefix of {T} exceeds max_len={self.config.max_len}")
        y = self.tgt_embed(tgt_in) * self.scale
        y = self.dropout(y + self._pe(T, y))
        causal = torch.ones(T, T, dtype=torch.bool).tril()
        self_mask = causal.unsqueeze(0) & (tgt_in != PAD_ID).unsqueeze(1)
        cross_mask = enc.mask.unsqueeze(1)
        for layer in self.decoder:
            y = layer(y, enc.states, self_mask, cross_mask)
        return self.generator(y)

    def forward(self, src, spans, tgt_in, mode=None):
        return self.decode(tgt_in, self.encode(src, spans, mode))

    def decode_step(self, prefix: torch.Tensor, enc: EncodedSource) -> torch.Tensor:
        """Log-probabilities (B, V) of the token following each prefix (B, T)."""
        if prefix.dim() == 1:
            prefix = prefix.unsqueeze(0)
        if prefix.shape[1] == 0 or bool((prefix[:, 0] != BOS_ID).any()):
            raise ValueError("prefix must start with <bos>")
        logits = self.decode(prefix, enc)[:, -1]
        return torch.log_softmax(logits, dim=-1)


def _default_max_len(model: SU4MT, src_len: int) -> int:
    return min(model.config.max_len - 1, 2 * src_len + 10)


@torch.no_grad()
def greedy(model: SU4MT, enc: EncodedSource, max_len: int) -> tuple[list[int], float]:
    """Iterated argmax for a single encoded sentence; returns (ids, log-prob)."""
    prefix = [BOS_ID]
    total = 0.0
    for _ in range(max_len):
        logp = model.decode_step(torch.tensor([prefix]), enc)[0]
        tok = int(torch.argmax(logp))
        total += float(logp[tok])
        if tok == EOS_ID:
            return prefix[1:], total
        prefix.append(tok)
    return prefix[1:], total


def _norm_score(ids: list[int], logp: float, terminated: bool) -> float:
    return logp / (len(ids) + int(terminated)) if ids or terminated else logp


@torch.no_grad()
def translate_ids(
    model: SU4MT,
    src_ids: Sequence[int],
    spans: SpanSet,
    beam: int = 1,
    max_len: int | None = None,
) -> list[int]:
    """Beam search with length-normalized log-probability; beam=1 is greedy.

    The greedy hypothesis always competes in the final selection, so a wider
    beam never returns a lower normalized score than greedy decoding.
    """
    if beam < 1:
        raise ValueError("beam must be >= 1")
    was_training = model.training
    model.eval()
    try:
        enc = model.encode(torch.tensor([list(src_ids)]), [spans])
        max_len = max_len or _default_max_len(model, len(src_ids))
        g_ids, g_lp = greedy(model, enc, max_len)
        if beam == 1:
            return g_ids
        g_done = len(g_ids) < max_len
        candidates = []  # (normalized score, ids)
        hyps = [([BOS_ID], 0.0)]
        for step in range(max_len):
            n = len(hyps)
            logp = model.decode_step(torch.tensor([h for h, _ in hyps]), enc.repeat(n))
            total = torch.tensor([s for _, s in hyps], dtype=logp.dtype).unsqueeze(1) + logp
            top = torch.topk(total.reshape(-1), min(2 * beam, total.numel()))
            V = logp.shape[1]
            nxt = []
            for score, flat in zip(top.values.tolist(), top.indices.tolist()):
                h, tok = divmod(flat, V)
                seq = hyps[h][0]
                if tok == EOS_ID:
                    candidates.append((_norm_score(seq[1:], score, True), seq[1:]))
                else:
                    nxt.append((seq + [tok], score))
                if len(nxt) == beam:
                    break
            hyps = nxt
            if len(candidates) >= beam or not hyps:
                break
        else:
            for seq, score in hyps:
                candidates.append((_norm_score(seq[1:], score, False), seq[1:]))
        best_score, best = max(candidates, key=lambda c: c[0])
        if _norm_score(g_ids, g_lp, g_done) > best_score:
            return g_ids
        return best
    finally:
        model.train(was_training)


@torch.no_grad()
def greedy_batch(
    model: SU4MT, src: torch.Tensor, spans: Sequence[SpanSet], max_len: int
) -> list[list[int]]:
    """Greedy decoding of a padded batch (B, Lt)."""
    model.eval()
    enc = model.encode(src, spans)
    B = src.shape[0]
    prefix = torch.full((B, 1), BOS_ID, dtype=torch.long)
    done = torch.zeros(B, dtype=torch.bool)
    for _ in range(max_len):
        nxt = model.decode_step(prefix, enc).argmax(-1)
        nxt = torch.where(done, torch.full_like(nxt, PAD_ID), nxt)
        prefix = torch.cat([prefix, nxt.unsqueeze(1)], dim=1)
        done |= nxt == EOS_ID
        if bool(done.all()):
            break
    out = []
    for row in prefix[:, 1:].tolist():
        ids = []
        for t in row:
            if t in (EOS_ID, PAD_ID):
                break
            ids.append(t)
        out.append(ids)
    return out


def translate(
    model: SU4MT,
    src: Sequence[str],
    spans: SpanSet,
    src_vocab,
    tgt_vocab,
    beam: int = 1,
    max_len: int | None = None,
) -> list[str]:
    """Translate one subword sentence to target subword tokens."""
    ids = src_vocab.encode(src)
    return tgt_vocab.decode(translate_ids(model, ids, spans, beam=beam, max_len=max_len))
