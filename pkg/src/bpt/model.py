"""Compact bidirectional encoder with breakpoint pooling and belief scoring.

One story read produces every breakpoint embedding: ``[B]`` hidden states are
projected and L2-normalized, a future-masked single-head self-attention block
adds a contextual stream, and a per-class bilinear layer scores propositions
encoded by the same (siamese) encoder. A multi-pass baseline that re-encodes
the story once per queried breakpoint and a conditioned greedy decoder share
the same parameters object.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Iterable, Sequence

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .corpus import (
    BOS_TOKEN,
    BREAK_TOKEN,
    EOS_TOKEN,
    Example,
    MARK_TOKEN,
    PROP_TOKEN,
    TruthLabel,
    Vocab,
    tokenize,
)

LABEL_ORDER = (TruthLabel.ENTAILED, TruthLabel.CONTRADICTED, TruthLabel.UNKNOWN)
LABEL_INDEX = {l: i for i, l in enumerate(LABEL_ORDER)}

MAX_BREAKPOINTS = 64


class ModelError(Exception):
    pass


@dataclass(frozen=True)
class ModelConfig:
    d_model: int = 128
    n_layers: int = 4
    n_heads: int = 4
    d_ffn: int = 512
    dropout: float = 0.1
    max_len: int = 256
    decoder_layers: int = 2
    brk_self_attn: bool = True
    prop_pooling: str = "prefix"  # or "mean" over proposition token states

    def __post_init__(self):
        if self.d_model % self.n_heads != 0:
            raise ModelError("d_model must be divisible by n_heads")
        if self.prop_pooling not in ("prefix", "mean"):
            raise ModelError(f"unknown prop_pooling {self.prop_pooling!r}")


@dataclass
class BreakpointEmbedding:
    """Initial (unit-norm) and contextual streams plus their concatenation."""

    initial: torch.Tensor
    contextual: torch.Tensor

    @property
    def final(self) -> torch.Tensor:
        return torch.cat([self.initial, self.contextual], dim=-1)


@dataclass(frozen=True)
class BeliefDistribution:
    """Probability vector over (entailed, contradicted, unknown)."""

    probabilities: tuple[float, float, float]

    @property
    def label(self) -> TruthLabel:
        # ties break toward the earlier class in (E, C, U)
        return LABEL_ORDER[int(np.argmax(self.probabilities))]


@dataclass
class DecodeResult:
    tokens: list[str]
    truncated: bool

    @property
    def text(self) -> str:
        return " ".join(self.tokens)


def sinusoid(n: int, d: int, device, dtype) -> torch.Tensor:
    position = torch.arange(n, device=device, dtype=torch.float64).unsqueeze(1)
    div = torch.exp(
        torch.arange(0, d, 2, device=device, dtype=torch.float64)
        * (-math.log(10000.0) / d)
    )
    pe = torch.zeros(n, d, device=device, dtype=torch.float64)
    pe[:, 0::2] = torch.sin(position * div)
    pe[:, 1::2] = torch.cos(position * div)
    return pe.to(dtype)


def _attention(q, k, v, mask=None):
    # q,k,v: (..., L, head_dim); mask True = blocked, additive -inf keeps
    # blocked positions at exactly zero weight after softmax
    scores = q @ k.transpose(-2, -1) / math.sqrt(q.shape[-1])
    if mask is not None:
        scores = scores.masked_fill(mask, float("-inf"))
    return torch.softmax(scores, dim=-1) @ v


class MultiHeadAttention(nn.Module):
    def __init__(self, d_model: int, n_heads: int):
        super().__init__()
        self.n_heads = n_heads
        self.head_dim = d_model // n_heads
        self.wq = nn.Linear(d_model, d_model)
        self.wk = nn.Linear(d_model, d_model)
        self.wv = nn.Linear(d_model, d_model)
        self.wo = nn.Linear(d_model, d_model)

    def forward(self, q_in, kv_in, mask=None):
        b, lq, d = q_in.shape
        lk = kv_in.shape[1]
        shape = lambda x, l: x.view(b, l, self.n_heads, self.head_dim).transpose(1, 2)
        out = _attention(
            shape(self.wq(q_in), lq), shape(self.wk(kv_in), lk),
            shape(self.wv(kv_in), lk), mask,
        )
        return self.wo(out.transpose(1, 2).reshape(b, lq, d))


class EncoderBlock(nn.Module):
    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.attn = MultiHeadAttention(cfg.d_model, cfg.n_heads)
        self.norm1 = nn.LayerNorm(cfg.d_model)
        self.norm2 = nn.LayerNorm(cfg.d_model)
        self.ffn = nn.Sequential(
            nn.Linear(cfg.d_model, cfg.d_ffn), nn.ReLU(), nn.Linear(cfg.d_ffn, cfg.d_model)
        )
        self.drop = nn.Dropout(cfg.dropout)

    def forward(self, x, pad_mask=None):
        # pad_mask: (B, L) True where padding; keys at pads are blocked
        mask = None
        if pad_mask is not None:
            mask = pad_mask[:, None, None, :]
        x = self.norm1(x + self.drop(self.attn(x, x, mask)))
        return self.norm2(x + self.drop(self.ffn(x)))


class DecoderBlock(nn.Module):
    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.self_attn = MultiHeadAttention(cfg.d_model, cfg.n_heads)
        self.cross_attn = MultiHeadAttention(cfg.d_model, cfg.n_heads)
        self.norm1 = nn.LayerNorm(cfg.d_model)
        self.norm2 = nn.LayerNorm(cfg.d_model)
        self.norm3 = nn.LayerNorm(cfg.d_model)
        self.ffn = nn.Sequential(
            nn.Linear(cfg.d_model, cfg.d_ffn), nn.ReLU(), nn.Linear(cfg.d_ffn, cfg.d_model)
        )
        self.drop = nn.Dropout(cfg.dropout)

    def forward(self, x, memory, mem_pad_mask=None):
        l = x.shape[1]
        causal = torch.triu(
            torch.ones(l, l, dtype=torch.bool, device=x.device), diagonal=1
        )
        x = self.norm1(x + self.drop(self.self_attn(x, x, causal)))
        mem_mask = None
        if mem_pad_mask is not None:
            mem_mask = mem_pad_mask[:, None, None, :]
        x = self.norm2(x + self.drop(self.cross_attn(x, memory, mem_mask)))
        return self.norm3(x + self.drop(self.ffn(x)))


class BreakpointSelfAttention(nn.Module):
    """Single-head transformer block over breakpoint ordinals, strictly future-masked."""

    def __init__(self, cfg: ModelConfig):
        super().__init__()
        d = cfg.d_model
        self.pos = nn.Embedding(MAX_BREAKPOINTS, d)
        self.attn = MultiHeadAttention(d, 1)
        self.norm1 = nn.LayerNorm(d)
        self.norm2 = nn.LayerNorm(d)
        self.ffn = nn.Sequential(nn.Linear(d, cfg.d_ffn), nn.ReLU(), nn.Linear(cfg.d_ffn, d))
        self.drop = nn.Dropout(cfg.dropout)

    def forward(self, x, pad_mask=None):
        b, m, d = x.shape
        if m > MAX_BREAKPOINTS:
            raise ModelError(f"{m} breakpoints exceeds the supported {MAX_BREAKPOINTS}")
        x = x + self.pos.weight[:m].to(x.dtype)
        future = torch.triu(torch.ones(m, m, dtype=torch.bool, device=x.device), diagonal=1)
        mask = future[None, None, :, :]
        if pad_mask is not None:
            mask = mask | pad_mask[:, None, None, :]
        x = self.norm1(x + self.drop(self.attn(x, x, mask)))
        return self.norm2(x + self.drop(self.ffn(x)))


class BreakpointModel(nn.Module):
    """All trainable tensors plus the operations defined over them."""

    def __init__(self, cfg: ModelConfig, vocab: Vocab):
        super().__init__()
        self.cfg = cfg
        self.vocab = vocab
        d = cfg.d_model
        self.embed = nn.Embedding(len(vocab), d, padding_idx=0)
        self.encoder = nn.ModuleList(EncoderBlock(cfg) for _ in range(cfg.n_layers))
        self.projection = nn.Linear(d, d)  # shared by breakpoints and propositions
        self.brk_attn = BreakpointSelfAttention(cfg)
        self.bilinear = nn.Parameter(torch.empty(3, 2 * d, d))
        self.bilinear_bias = nn.Parameter(torch.zeros(3))
        self.decoder = nn.ModuleList(DecoderBlock(cfg) for _ in range(cfg.decoder_layers))
        self.lm_head = nn.Linear(d, len(vocab))
        self.multipass_head = nn.Sequential(
            nn.Linear(4 * d, d), nn.ReLU(), nn.Linear(d, 3)
        )
        self.prop_only_head = nn.Linear(d, 3)
        self.drop = nn.Dropout(cfg.dropout)
        nn.init.normal_(self.bilinear, std=0.02)
        self.counters = {"story_encodes": 0, "prop_encodes": 0, "prop_cache_hits": 0}

    # -- plumbing ---------------------------------------------------------

    def reset_counters(self) -> None:
        for k in self.counters:
            self.counters[k] = 0

    @property
    def device(self):
        return self.embed.weight.device

    @property
    def dtype(self):
        return self.embed.weight.dtype

    def _ids(self, tokens: Sequence[str]) -> list[int]:
        return self.vocab.encode(tokens)

    def _pad_batch(self, token_lists: Sequence[Sequence[str]]):
        lengths = [len(t) for t in token_lists]
        width = max(lengths)
        ids = torch.zeros(len(token_lists), width, dtype=torch.long, device=self.device)
        pad = torch.ones(len(token_lists), width, dtype=torch.bool, device=self.device)
        for i, toks in enumerate(token_lists):
            ids[i, : len(toks)] = torch.tensor(self._ids(toks), device=self.device)
            pad[i, : len(toks)] = False
        return ids, pad

    def _run_encoder(self, ids: torch.Tensor, pad_mask: torch.Tensor) -> torch.Tensor:
        n = ids.shape[1]
        x = self.embed(ids) + sinusoid(n, self.cfg.d_model, ids.device, self.dtype)
        x = self.drop(x)
        for block in self.encoder:
            x = block(x, pad_mask)
        return x

    # -- story side --------------------------------------------------------

    def encode_stories(self, stories: Sequence[Sequence[str]]):
        """Batched single-read encoding; returns (states, pad_mask)."""
        for toks in stories:
            if len(toks) > self.cfg.max_len:
                raise ModelError(
                    f"story of {len(toks)} tokens exceeds max_len={self.cfg.max_len}"
                )
        ids, pad = self._pad_batch(stories)
        self.counters["story_encodes"] += len(stories)
        return self._run_encoder(ids, pad), pad

    def encode_story(self, story_tokens: Sequence[str]) -> torch.Tensor:
        states, _ = self.encode_stories([story_tokens])
        return states[0]

    def _project_norm(self, x: torch.Tensor, what: str) -> torch.Tensor:
        y = self.projection(x)
        norms = y.norm(dim=-1, keepdim=True)
        if bool((norms < 1e-8).any()):
            raise ModelError(f"cannot normalize a zero {what} vector")
        return y / norms

    def pool_breakpoints(
        self, states: torch.Tensor, marker_positions: Sequence[int]
    ) -> torch.Tensor:
        """Project + L2-normalize the hidden states at the marker positions."""
        n = states.shape[0]
        for p in marker_positions:
            if not 0 <= p < n:
                raise ModelError(f"marker position {p} out of range for {n} tokens")
        idx = torch.tensor(list(marker_positions), dtype=torch.long, device=states.device)
        return self._project_norm(states[idx], "breakpoint")

    def self_attend_breakpoints(self, initials: torch.Tensor) -> torch.Tensor:
        """Future-masked contextual stream; all-zeros when the block is ablated."""
        if not self.cfg.brk_self_attn:
            return torch.zeros_like(initials)
        return self.brk_attn(initials.unsqueeze(0))[0]

    def breakpoint_embeddings(self, example: Example) -> list[BreakpointEmbedding]:
        states = self.encode_story(example.story_tokens)
        initials = self.pool_breakpoints(states, example.marker_positions)
        contextual = self.self_attend_breakpoints(initials)
        return [BreakpointEmbedding(i, c) for i, c in zip(initials, contextual)]

    # -- proposition side ---------------------------------------------------

    def encode_propositions(self, texts: Sequence[str]) -> torch.Tensor:
        """Shared-encoder proposition embeddings (unit norm), batched."""
        token_lists = [[PROP_TOKEN] + tokenize(t) for t in texts]
        for toks in token_lists:
            if len(toks) < 2:
                raise ModelError("empty proposition")
        ids, pad = self._pad_batch(token_lists)
        states = self._run_encoder(ids, pad)
        self.counters["prop_encodes"] += len(texts)
        if self.cfg.prop_pooling == "prefix":
            pooled = states[:, 0]
        else:
            keep = (~pad).to(states.dtype)
            keep[:, 0] = 0  # mean over the proposition tokens, not the prefix
            pooled = (states * keep.unsqueeze(-1)).sum(1) / keep.sum(1, keepdim=True)
        return self._project_norm(pooled, "proposition")

    def encode_proposition(self, prop_tokens: Sequence[str]) -> torch.Tensor:
        if not prop_tokens:
            raise ModelError("empty proposition")
        return self.encode_propositions([" ".join(prop_tokens)])[0]

    # -- scoring ------------------------------------------------------------

    def score_proposition(self, b: BreakpointEmbedding, c: torch.Tensor) -> torch.Tensor:
        return self.score_pairs(b.final.unsqueeze(0), c.unsqueeze(0))[0]

    def score_pairs(self, b_final: torch.Tensor, c: torch.Tensor) -> torch.Tensor:
        """(N, 2d) x (N, d) -> (N, 3) bilinear logits."""
        if b_final.shape[-1] != 2 * self.cfg.d_model or c.shape[-1] != self.cfg.d_model:
            raise ModelError(
                f"dimension mismatch: got {tuple(b_final.shape)} x {tuple(c.shape)}"
            )
        return torch.einsum("nq,yqd,nd->ny", b_final, self.bilinear, c) + self.bilinear_bias

    def _distributions(self, logits: torch.Tensor) -> list[BeliefDistribution]:
        probs = torch.softmax(logits, dim=-1).detach().cpu().numpy()
        return [BeliefDistribution(tuple(float(x) for x in row)) for row in probs]

    def predict_beliefs(
        self, example: Example, queries: Sequence[tuple[int, Sequence[str]]]
    ) -> list[BeliefDistribution]:
        """One story read serves every query; proposition encodings are cached
        per distinct text within the call."""
        m = len(example.breakpoints)
        for j, _ in queries:
            if not 1 <= j <= m:
                raise ModelError(f"breakpoint index {j} out of range 1..{m}")
        embs = self.breakpoint_embeddings(example)
        finals = torch.stack([e.final for e in embs])
        texts = [" ".join(toks) for _, toks in queries]
        distinct: dict[str, int] = {}
        for t in texts:
            if t in distinct:
                self.counters["prop_cache_hits"] += 1
            else:
                distinct[t] = len(distinct)
        vectors = self.encode_propositions(list(distinct))
        b = finals[[j - 1 for j, _ in queries]]
        c = vectors[[distinct[t] for t in texts]]
        return self._distributions(self.score_pairs(b, c))

    def marked_story(self, example: Example, breakpoint_index: int) -> list[str]:
        """Story with the target [B] replaced by [MARK] and other markers removed."""
        target = example.breakpoints[breakpoint_index - 1].token_position
        out = []
        for pos, tok in enumerate(example.story_tokens):
            if pos == target:
                out.append(MARK_TOKEN)
            elif tok != BREAK_TOKEN:
                out.append(tok)
        return out

    def multipass_predict(
        self, example: Example, queries: Sequence[tuple[int, Sequence[str]]]
    ) -> list[BeliefDistribution]:
        """Baseline: re-encode the marked story once per queried breakpoint."""
        m = len(example.breakpoints)
        for j, _ in queries:
            if not 1 <= j <= m:
                raise ModelError(f"breakpoint index {j} out of range 1..{m}")
        wanted = sorted({j for j, _ in queries})
        stories = [self.marked_story(example, j) for j in wanted]
        states, pad = self.encode_stories(stories)
        keep = (~pad).to(states.dtype).unsqueeze(-1)
        u_all = (states * keep).sum(1) / keep.sum(1)
        u_by_bp = {j: u_all[i] for i, j in enumerate(wanted)}
        texts = [" ".join(toks) for _, toks in queries]
        distinct = {t: i for i, t in enumerate(dict.fromkeys(texts))}
        vectors = self.encode_propositions(list(distinct))
        u = torch.stack([u_by_bp[j] for j, _ in queries])
        v = vectors[[distinct[t] for t in texts]]
        feats = torch.cat([u, v, (u - v).abs(), u * v], dim=-1)
        return self._distributions(self.multipass_head(feats))

    def prop_only_predict(self, prop_tokens: Sequence[str]) -> BeliefDistribution:
        vec = self.encode_proposition(prop_tokens)
        return self._distributions(self.prop_only_head(vec).unsqueeze(0))[0]

    # -- decoding -----------------------------------------------------------

    def decoder_states(
        self, input_ids: torch.Tensor, memory: torch.Tensor, mem_pad_mask=None
    ) -> torch.Tensor:
        n = input_ids.shape[1]
        x = self.embed(input_ids) + sinusoid(n, self.cfg.d_model, input_ids.device, self.dtype)
        x = self.drop(x)
        for block in self.decoder:
            x = block(x, memory, mem_pad_mask)
        return x

    def decoder_logits(
        self, input_ids: torch.Tensor, memory: torch.Tensor, mem_pad_mask=None
    ) -> torch.Tensor:
        return self.lm_head(self.decoder_states(input_ids, memory, mem_pad_mask))

    def decode_text(
        self,
        conditioning: torch.Tensor,
        prompt_tokens: Sequence[str] = (),
        max_new_tokens: int = 16,
        mem_pad_mask: torch.Tensor | None = None,
    ) -> DecodeResult:
        """Greedy decoding over the conditioning memory (token states for QA,
        one or two breakpoint vectors for generation); stops at [EOS] or length."""
        if conditioning.dim() == 1:
            conditioning = conditioning.unsqueeze(0)
        if conditioning.dim() == 2:
            conditioning = conditioning.unsqueeze(0)
        if conditioning.numel() == 0:
            raise ModelError("empty conditioning")
        ids = [2] + self._ids(list(prompt_tokens))  # [BOS]
        out: list[str] = []
        truncated = True
        for _ in range(max_new_tokens):
            inp = torch.tensor([ids], dtype=torch.long, device=self.device)
            logits = self.decoder_logits(inp, conditioning, mem_pad_mask)[0, -1]
            nxt = int(np.argmax(logits.detach().cpu().numpy()))
            if nxt == 3:  # [EOS]
                truncated = False
                break
            ids.append(nxt)
            out.append(self.vocab.tokens[nxt])
        return DecodeResult(tokens=out, truncated=truncated)

    def answer_question(self, example: Example, question: str) -> DecodeResult:
        states, pad = self.encode_stories([list(example.story_tokens)])
        return self.decode_text(states, tokenize(question), mem_pad_mask=pad)

    def parameter_count(self) -> int:
        return sum(p.numel() for p in self.parameters())
