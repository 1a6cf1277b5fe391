"""A small causal decoder that mixes text, occupancy patches, and point tokens.

Pre-norm transformer in float64 with learned absolute positions. Three input
routes share one sequence: ordinary token embeddings, an 8x8-patch linear
embedder for occupancy frames at `<image>` slots, and the point encoder at
`<point>` slots. Hidden states feed an untied text head and the point head;
the hidden state one position before a `<point>` token both names the token
and carries its coordinates.

Query and value projections carry LoRA adapters (delta W = alpha/r * B A,
B zero at init) so fine-tuning stages can keep the backbone frozen.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, asdict

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .pointcodec import PointEncoder, PointHead
from .tokens import BASE_TOKENS, CONTEXT_LIMIT, PAD, SPECIALS, TokenStream

DIGIT_OFFSET = len(SPECIALS)  # ids 8..17 are the digits "0".."9"


@dataclass(frozen=True)
class ModelConfig:
    vocab_size: int = 2048
    dim: int = 128
    n_layers: int = 4
    n_heads: int = 4
    context: int = CONTEXT_LIMIT
    patch_size: int = 8
    lora_rank: int = 4
    lora_alpha: float = 4.0
    query_slots: int = 0  # learned slots for the one-pass decoding variant
    seed: int = 0

    def __post_init__(self):
        if self.dim % self.n_heads != 0:
            raise ValueError("dim must divide evenly into heads")
        if self.lora_rank < 0:
            raise ValueError("lora_rank must be non-negative")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        return cls(**d)


class LoRALinear(nn.Module):
    """Linear layer with a frozen-friendly low-rank residual path."""

    def __init__(self, dim_in: int, dim_out: int, rank: int, alpha: float):
        super().__init__()
        self.rank, self.alpha = rank, alpha
        self.base = nn.Linear(dim_in, dim_out, dtype=torch.float64)
        if rank > 0:
            self.A = nn.Parameter(torch.randn(rank, dim_in, dtype=torch.float64) / math.sqrt(rank))
            self.B = nn.Parameter(torch.zeros(dim_out, rank, dtype=torch.float64))

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        y = self.base(x)
        if self.rank > 0:
            y = y + (self.alpha / self.rank) * F.linear(F.linear(x, self.A), self.B)
        return y


class CausalSelfAttention(nn.Module):
    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.n_heads = cfg.n_heads
        self.head_dim = cfg.dim // cfg.n_heads
        self.wq = LoRALinear(cfg.dim, cfg.dim, cfg.lora_rank, cfg.lora_alpha)
        self.wk = nn.Linear(cfg.dim, cfg.dim, dtype=torch.float64)
        self.wv = LoRALinear(cfg.dim, cfg.dim, cfg.lora_rank, cfg.lora_alpha)
        self.wo = nn.Linear(cfg.dim, cfg.dim, dtype=torch.float64)

    def forward(self, x: torch.Tensor, past=None):
        B, L, D = x.shape
        q = self.wq(x).view(B, L, self.n_heads, self.head_dim).transpose(1, 2)
        k = self.wk(x).view(B, L, self.n_heads, self.head_dim).transpose(1, 2)
        v = self.wv(x).view(B, L, self.n_heads, self.head_dim).transpose(1, 2)
        if past is not None:
            k = torch.cat([past[0], k], dim=2)
            v = torch.cat([past[1], v], dim=2)
        n_past = k.shape[2] - L
        att = q @ k.transpose(-2, -1) / math.sqrt(self.head_dim)
        # row i (absolute position n_past + i) may see columns 0 .. n_past + i
        cols = torch.arange(k.shape[2])
        rows = torch.arange(L) + n_past
        att = att.masked_fill(cols[None, None, None, :] > rows[None, None, :, None], -torch.inf)
        out = torch.softmax(att, dim=-1) @ v
        out = out.transpose(1, 2).reshape(B, L, D)
        return self.wo(out), (k, v)


class Block(nn.Module):
    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.ln1 = nn.LayerNorm(cfg.dim, dtype=torch.float64)
        self.attn = CausalSelfAttention(cfg)
        self.ln2 = nn.LayerNorm(cfg.dim, dtype=torch.float64)
        self.mlp = nn.Sequential(
            nn.Linear(cfg.dim, 4 * cfg.dim, dtype=torch.float64),
            nn.GELU(),
            nn.Linear(4 * cfg.dim, cfg.dim, dtype=torch.float64),
        )

    def forward(self, x: torch.Tensor, past=None):
        a, kv = self.attn(self.ln1(x), past)
        x = x + a
        x = x + self.mlp(self.ln2(x))
        return x, kv


@dataclass
class KVCache:
    layers: list = field(default_factory=list)

    @property
    def length(self) -> int:
        return 0 if not self.layers else int(self.layers[0][0].shape[2])


class TinyVLM(nn.Module):
    """The decoder plus its embedders and heads; seeded init is bit-exact."""

    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.cfg = cfg
        torch.manual_seed(cfg.seed)
        self.tok_emb = nn.Embedding(cfg.vocab_size, cfg.dim, dtype=torch.float64)
        self.pos_emb = nn.Embedding(cfg.context, cfg.dim, dtype=torch.float64)
        self.patch_embed = nn.Linear(cfg.patch_size**2, cfg.dim, dtype=torch.float64)
        self.point_enc = PointEncoder(cfg.dim)
        self.point_head = PointHead(cfg.dim)
        self.blocks = nn.ModuleList(Block(cfg) for _ in range(cfg.n_layers))
        self.final_norm = nn.LayerNorm(cfg.dim, dtype=torch.float64)
        self.text_head = nn.Linear(cfg.dim, cfg.vocab_size, bias=False, dtype=torch.float64)
        if cfg.query_slots > 0:
            self.query_emb = nn.Parameter(
                torch.randn(cfg.query_slots, cfg.dim, dtype=torch.float64) * 0.02
            )
        self.forward_calls = 0
        self._structured_init()

    def _structured_init(self):
        """Gaussian embeddings with two deterministic structure channels.

        Channel 0 of each digit token embedding encodes its numeric value and
        channel 1 of the positional table ramps monotonically with position;
        both give frozen embeddings a handle on counting and ordinal position
        at horizons longer than any seen in training.
        """
        with torch.no_grad():
            self.tok_emb.weight.normal_(0.0, 0.02)
            self.pos_emb.weight.normal_(0.0, 0.02)
            self.text_head.weight.normal_(0.0, 0.02)
            for d in range(10):
                self.tok_emb.weight[DIGIT_OFFSET + d, 0] = (d - 4.5) * 0.2
            self.pos_emb.weight[:, 1] = torch.linspace(-1.0, 1.0, self.cfg.context) * 0.5

    def param_count(self) -> int:
        return sum(p.numel() for p in self.parameters())

    def grids_to_patches(self, grids: np.ndarray) -> torch.Tensor:
        """(F, 32, 32) uint8 -> (F*16, 64) float64 patches in row-major order."""
        g = torch.from_numpy(np.ascontiguousarray(grids)).to(torch.float64) / 255.0
        f, s, p = g.shape[0], g.shape[1], self.cfg.patch_size
        n = s // p
        patches = g.view(f, n, p, n, p).permute(0, 1, 3, 2, 4).reshape(f * n * n, p * p)
        return patches

    def embed_stream(self, streams) -> tuple:
        """Pad a list of TokenStream to one (B, L, D) embedding batch.

        Returns (embeddings, padded ids). Visual slots take patch embeddings,
        point slots take point-encoder embeddings, everything gets its
        absolute position added; pad slots hold the <pad> embedding.
        """
        if isinstance(streams, TokenStream):
            streams = [streams]
        L = max(len(st) for st in streams)
        if L > self.cfg.context:
            raise ValueError(f"stream length {L} exceeds context {self.cfg.context}")
        ids = torch.full((len(streams), L), PAD, dtype=torch.int64)
        for b, st in enumerate(streams):
            ids[b, : len(st)] = torch.from_numpy(st.ids)
        emb = self.tok_emb(ids)
        for b, st in enumerate(streams):
            vis = self.patch_embed(self.grids_to_patches(st.grids))
            emb[b, torch.from_numpy(st.visual_positions)] = vis
            if len(st.point_positions):
                pts = self.point_enc(torch.from_numpy(st.point_values))
                emb[b, torch.from_numpy(st.point_positions)] = pts
        emb = emb + self.pos_emb.weight[:L]
        return emb, ids

    def embed_step(self, token_id: int, position: int, point=None) -> torch.Tensor:
        """Embedding for one generated token at an absolute position."""
        if point is not None:
            e = self.point_enc(torch.tensor([point], dtype=torch.float64))[0]
        else:
            e = self.tok_emb.weight[token_id]
        return (e + self.pos_emb.weight[position]).view(1, 1, -1)

    def forward(self, emb: torch.Tensor, cache: KVCache = None, use_cache: bool = False):
        """Run the blocks over already-embedded inputs; returns normed hiddens.

        With a cache the embeddings are treated as a suffix starting right
        after the cached positions. Every invocation bumps `forward_calls`.
        """
        self.forward_calls += 1
        x = emb
        new_layers = []
        for i, block in enumerate(self.blocks):
            past = cache.layers[i] if cache is not None and cache.layers else None
            x, kv = block(x, past)
            if use_cache:
                new_layers.append(kv)
        h = self.final_norm(x)
        if use_cache:
            return h, KVCache(layers=new_layers)
        return h

    def text_logits(self, hidden: torch.Tensor) -> torch.Tensor:
        return self.text_head(hidden)

    def decode_points(self, hidden: torch.Tensor) -> torch.Tensor:
        return self.point_head(hidden)

    def trainable_parameters(self, stage: str) -> dict:
        """Named parameters a training stage may update; the rest stay frozen.

        cot: adapters, text head, patch embedder, positional table.
        forecast: adapters, text head, point encoder, point head.
        single_pass: adapters, point encoder, point head, query slots.
        all: everything (toy runs and tests).
        """
        def lora(name):
            return name.endswith(".A") or name.endswith(".B")

        groups = {
            "cot": lambda n: lora(n)
            or n.startswith(("text_head.", "patch_embed.", "pos_emb.")),
            "forecast": lambda n: lora(n)
            or n.startswith(("text_head.", "point_enc.", "point_head.")),
            "single_pass": lambda n: lora(n)
            or n.startswith(("point_enc.", "point_head.", "query_emb")),
            "all": lambda n: True,
        }
        if stage not in groups:
            raise ValueError(f"unknown stage: {stage}")
        keep = groups[stage]
        return {n: p for n, p in self.named_parameters() if keep(n)}
