"""Trainable feature transforms and the shared bidirectional text encoder.

The original-scale stack (a frozen pretrained biomedical encoder and its
subword tokenizer) is replaced here by a small transformer with seeded
random token embeddings and a hash tokenizer. The mechanism is unchanged:
prompts are rows in the same embedding space as adapted feature tokens,
and one encoder serves both stages.
"""

from __future__ import annotations

import math
import re
from dataclasses import dataclass
from typing import NamedTuple, Sequence

import torch
import torch.nn as nn

_WORD_RE = re.compile(r"[a-z0-9]+")

_FNV_OFFSET = 0xCBF29CE484222325
_FNV_PRIME = 0x100000001B3
_U64 = 1 << 64


class EncoderError(ValueError):
    pass


class SequenceTooLongError(EncoderError):
    pass


@dataclass(frozen=True)
class EncoderConfig:
    """Desk-scale defaults; the reference setting uses model_dim=768 with a
    512-token cap, which these fields can also express."""

    model_dim: int = 32
    n_layers: int = 2
    n_heads: int = 2
    mlp_ratio: int = 4
    max_seq_len: int = 512
    layernorm_eps: float = 1e-5
    vocab_size: int = 4096
    trainable_encoder: bool = False

    def __post_init__(self):
        if self.model_dim < 1 or self.model_dim % self.n_heads != 0:
            raise EncoderError(
                f"model_dim {self.model_dim} must be positive and divisible "
                f"by n_heads {self.n_heads}"
            )
        for name in ("n_layers", "mlp_ratio", "max_seq_len", "vocab_size"):
            if getattr(self, name) < 1:
                raise EncoderError(f"{name} must be positive")
        if self.layernorm_eps <= 0:
            raise EncoderError("layernorm_eps must be positive")


def _fnv1a64(word: str) -> int:
    h = _FNV_OFFSET
    for byte in word.encode("utf-8"):
        h = ((h ^ byte) * _FNV_PRIME) % _U64
    return h


def tokenize_text(text: str, vocab_size: int = 4096) -> list[int]:
    """Lowercase, split on whitespace/punctuation, hash each word to an id.

    Ids are the 64-bit FNV-1a hash of the word modulo the vocab size, so the
    mapping is stable across processes with no stored vocabulary.
    """
    return [_fnv1a64(w) % vocab_size for w in _WORD_RE.findall(text.lower())]


def reinit_linears(module: nn.Module, gen: torch.Generator) -> None:
    """Redo the default Linear init from a dedicated generator.

    Construction-time init draws from torch's global RNG, which would make
    model builds depend on whatever ran before; every model here reseeds
    its Linears through this instead.
    """
    with torch.no_grad():
        for m in module.modules():
            if isinstance(m, nn.Linear):
                nn.init.kaiming_uniform_(m.weight, a=math.sqrt(5), generator=gen)
                if m.bias is not None:
                    bound = 1.0 / math.sqrt(m.in_features)
                    m.bias.uniform_(-bound, bound, generator=gen)


@dataclass
class TokenSequence:
    """One assembled encoder input; masked positions carry zero rows."""

    tokens: torch.Tensor  # (L, D)
    attention_mask: torch.Tensor  # (L,) bool

    def __post_init__(self):
        if self.tokens.ndim != 2:
            raise EncoderError(f"tokens must be (L, D), got {tuple(self.tokens.shape)}")
        mask = self.attention_mask.to(torch.bool)
        if mask.shape != (self.tokens.shape[0],):
            raise EncoderError("attention mask length must match sequence length")
        self.attention_mask = mask
        if not bool(mask.all()):
            self.tokens = self.tokens * mask.unsqueeze(-1).to(self.tokens.dtype)

    def __len__(self) -> int:
        return self.tokens.shape[0]


class PathologyAdapter(nn.Module):
    """Linear projection plus ReLU aligning patch features with the token space."""

    def __init__(self, in_dim: int, model_dim: int):
        super().__init__()
        self.linear = nn.Linear(in_dim, model_dim)

    @property
    def weight(self) -> torch.Tensor:
        return self.linear.weight

    @property
    def bias(self) -> torch.Tensor:
        return self.linear.bias

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        if x.shape[-1] != self.linear.in_features:
            raise EncoderError(
                f"adapter expects width {self.linear.in_features}, got {x.shape[-1]}"
            )
        return torch.relu(self.linear(x))


class PathwayEncoder(nn.Module):
    """Two self-normalizing layers (linear -> SELU, twice) for pathway vectors."""

    def __init__(self, in_dim: int, model_dim: int):
        super().__init__()
        self.fc1 = nn.Linear(in_dim, model_dim)
        self.fc2 = nn.Linear(model_dim, model_dim)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        if x.shape[-1] != self.fc1.in_features:
            raise EncoderError(
                f"pathway encoder expects width {self.fc1.in_features}, got {x.shape[-1]}"
            )
        return torch.selu(self.fc2(torch.selu(self.fc1(x))))


class MultiHeadSelfAttention(nn.Module):
    def __init__(self, dim: int, n_heads: int):
        super().__init__()
        self.n_heads = n_heads
        self.head_dim = dim // n_heads
        self.q = nn.Linear(dim, dim)
        self.k = nn.Linear(dim, dim)
        self.v = nn.Linear(dim, dim)
        self.out = nn.Linear(dim, dim)

    def forward(
        self, x: torch.Tensor, key_mask: torch.Tensor
    ) -> tuple[torch.Tensor, torch.Tensor]:
        b, length, dim = x.shape

        def split(t: torch.Tensor) -> torch.Tensor:
            return t.view(b, length, self.n_heads, self.head_dim).transpose(1, 2)

        q, k, v = split(self.q(x)), split(self.k(x)), split(self.v(x))
        scores = q @ k.transpose(-2, -1) / math.sqrt(self.head_dim)
        scores = scores.masked_fill(~key_mask[:, None, None, :], float("-inf"))
        attn = torch.softmax(scores, dim=-1)
        mixed = (attn @ v).transpose(1, 2).reshape(b, length, dim)
        return self.out(mixed), attn


class EncoderLayer(nn.Module):
    """Post-norm block: attention, add+norm, GELU MLP, add+norm."""

    def __init__(self, cfg: EncoderConfig):
        super().__init__()
        dim = cfg.model_dim
        self.attn = MultiHeadSelfAttention(dim, cfg.n_heads)
        self.norm1 = nn.LayerNorm(dim, eps=cfg.layernorm_eps)
        self.mlp = nn.Sequential(
            nn.Linear(dim, cfg.mlp_ratio * dim),
            nn.GELU(),
            nn.Linear(cfg.mlp_ratio * dim, dim),
        )
        self.norm2 = nn.LayerNorm(dim, eps=cfg.layernorm_eps)

    def forward(
        self, x: torch.Tensor, key_mask: torch.Tensor
    ) -> tuple[torch.Tensor, torch.Tensor]:
        attn_out, weights = self.attn(x, key_mask)
        x = self.norm1(x + attn_out)
        x = self.norm2(x + self.mlp(x))
        return x, weights


class EncoderOutput(NamedTuple):
    hidden: torch.Tensor  # (B, L, D) or (L, D)
    cls: torch.Tensor  # (B, D) or (D,)
    attentions: tuple[torch.Tensor, ...]  # per layer, (B, heads, L, L)


class TextEncoder(nn.Module):
    """Bidirectional transformer shared by both training stages.

    Token-id embeddings are a buffer drawn once from ``embedding_seed``: they
    stand in for the frozen pretrained vocabulary and never train. The CLS
    vector, learned position embeddings, and the layers train only when the
    config says so; there is no dropout, so eval-mode outputs are
    deterministic and per-layer attention maps can be compared across runs.
    """

    def __init__(self, cfg: EncoderConfig, embedding_seed: int = 0):
        super().__init__()
        self.cfg = cfg
        gen = torch.Generator().manual_seed(embedding_seed)
        table = torch.randn(cfg.vocab_size, cfg.model_dim, generator=gen) * 0.02
        self.register_buffer("token_table", table)
        self.cls_embedding = nn.Parameter(
            torch.randn(cfg.model_dim, generator=gen) * 0.02
        )
        self.position_embeddings = nn.Parameter(
            torch.randn(cfg.max_seq_len, cfg.model_dim, generator=gen) * 0.02
        )
        self.layers = nn.ModuleList(EncoderLayer(cfg) for _ in range(cfg.n_layers))
        reinit_linears(self.layers, gen)
        if not cfg.trainable_encoder:
            for p in self.parameters():
                p.requires_grad_(False)

    def embed(self, token_ids: Sequence[int]) -> torch.Tensor:
        ids = torch.as_tensor(list(token_ids), dtype=torch.long)
        if ids.numel() and (ids.min() < 0 or ids.max() >= self.cfg.vocab_size):
            raise EncoderError("token id out of vocabulary range")
        return self.token_table[ids]

    def forward(
        self,
        tokens: torch.Tensor,
        attention_mask: torch.Tensor | None = None,
    ) -> EncoderOutput:
        squeeze = tokens.ndim == 2
        if squeeze:
            tokens = tokens.unsqueeze(0)
            if attention_mask is not None:
                attention_mask = attention_mask.unsqueeze(0)
        b, length, dim = tokens.shape
        if dim != self.cfg.model_dim:
            raise EncoderError(f"token width {dim} != model_dim {self.cfg.model_dim}")
        if length > self.cfg.max_seq_len:
            raise SequenceTooLongError(
                f"sequence length {length} exceeds max_seq_len {self.cfg.max_seq_len}"
            )
        if attention_mask is None:
            key_mask = torch.ones(b, length, dtype=torch.bool, device=tokens.device)
        else:
            key_mask = attention_mask.to(torch.bool)
            if not bool(key_mask.any(dim=1).all()):
                raise EncoderError("every sequence needs at least one unmasked position")

        x = tokens + self.position_embeddings[:length].to(tokens.dtype)
        x = x * key_mask.unsqueeze(-1).to(x.dtype)
        attentions = []
        for layer in self.layers:
            x, weights = layer(x, key_mask)
            attentions.append(weights)
        cls = x[:, 0]
        if squeeze:
            return EncoderOutput(x[0], cls[0], tuple(a[0] for a in attentions))
        return EncoderOutput(x, cls, tuple(attentions))


def encode_sequence(
    encoder: TextEncoder, seq: TokenSequence
) -> tuple[torch.Tensor, torch.Tensor]:
    """Contextual outputs (L, D) and the CLS vector for one assembled sequence."""
    out = encoder(seq.tokens, seq.attention_mask)
    return out.hidden, out.cls
