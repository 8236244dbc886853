"""A small decoder-only transformer trained from scratch.

Stands in for the multi-billion-parameter models the exported trainer
configs were written for: the training mechanics (loss curves, margin
movement, score records) are the point, not capability. Weights are
float32, attention is causal, and the unembedding is tied to the token
embedding.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass

import torch
from torch import nn
from torch.nn import functional as F

from trainer_bridge.errors import BridgeConfigError
from trainer_bridge.vocab import VOCAB_SIZE


@dataclass(frozen=True)
class ModelSpec:
    """Architecture hyperparameters; vocab is fixed by the tokenizer."""

    d_model: int = 64
    n_heads: int = 4
    n_layers: int = 2
    max_seq_len: int = 256

    def __post_init__(self):
        if self.d_model % self.n_heads != 0:
            raise BridgeConfigError("d_model must be divisible by n_heads")
        if min(self.d_model, self.n_heads, self.n_layers, self.max_seq_len) < 1:
            raise BridgeConfigError("model dimensions must be positive")


# model_id values accepted by jobs; "tiny" is the default everywhere.
MODEL_SPECS: dict[str, ModelSpec] = {
    "tiny-byte-decoder": ModelSpec(d_model=64, n_heads=4, n_layers=2, max_seq_len=256),
    "small-byte-decoder": ModelSpec(d_model=128, n_heads=4, n_layers=4, max_seq_len=384),
}


def resolve_model_spec(model_id: str) -> ModelSpec:
    try:
        return MODEL_SPECS[model_id]
    except KeyError:
        known = ", ".join(sorted(MODEL_SPECS))
        raise BridgeConfigError(f"unknown model_id {model_id!r} (known: {known})") from None


class Block(nn.Module):
    def __init__(self, spec: ModelSpec):
        super().__init__()
        self.n_heads = spec.n_heads
        self.head_dim = spec.d_model // spec.n_heads
        self.ln_attn = nn.LayerNorm(spec.d_model)
        self.qkv = nn.Linear(spec.d_model, 3 * spec.d_model)
        self.attn_out = nn.Linear(spec.d_model, spec.d_model)
        self.ln_mlp = nn.LayerNorm(spec.d_model)
        self.mlp = nn.Sequential(
            nn.Linear(spec.d_model, 4 * spec.d_model),
            nn.GELU(),
            nn.Linear(4 * spec.d_model, spec.d_model),
        )

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        b, t, d = x.shape
        q, k, v = self.qkv(self.ln_attn(x)).chunk(3, dim=-1)
        q = q.view(b, t, self.n_heads, self.head_dim).transpose(1, 2)
        k = k.view(b, t, self.n_heads, self.head_dim).transpose(1, 2)
        v = v.view(b, t, self.n_heads, self.head_dim).transpose(1, 2)
        attn = F.scaled_dot_product_attention(q, k, v, is_causal=True)
        attn = attn.transpose(1, 2).reshape(b, t, d)
        x = x + self.attn_out(attn)
        x = x + self.mlp(self.ln_mlp(x))
        return x


class ByteDecoder(nn.Module):
    """Causal language model over the byte vocabulary."""

    def __init__(self, spec: ModelSpec):
        super().__init__()
        self.spec = spec
        self.tok_emb = nn.Embedding(VOCAB_SIZE, spec.d_model)
        self.pos_emb = nn.Embedding(spec.max_seq_len, spec.d_model)
        self.blocks = nn.ModuleList(Block(spec) for _ in range(spec.n_layers))
        self.ln_final = nn.LayerNorm(spec.d_model)
        self.apply(self._init_weights)

    @staticmethod
    def _init_weights(module: nn.Module) -> None:
        if isinstance(module, nn.Linear):
            nn.init.normal_(module.weight, std=0.02)
            nn.init.zeros_(module.bias)
        elif isinstance(module, nn.Embedding):
            nn.init.normal_(module.weight, std=0.02)

    def forward(self, ids: torch.Tensor) -> torch.Tensor:
        """ids (batch, seq) -> logits (batch, seq, vocab)."""
        b, t = ids.shape
        if t > self.spec.max_seq_len:
            raise BridgeConfigError(
                f"sequence length {t} exceeds model max_seq_len {self.spec.max_seq_len}"
            )
        pos = torch.arange(t, device=ids.device)
        x = self.tok_emb(ids) + self.pos_emb(pos)
        for block in self.blocks:
            x = block(x)
        x = self.ln_final(x)
        # tied unembedding
        return x @ self.tok_emb.weight.T

    def parameter_count(self) -> int:
        return sum(p.numel() for p in self.parameters())


def sequence_logprobs(
    model: nn.Module, ids: torch.Tensor, score_mask: torch.Tensor
) -> torch.Tensor:
    """Sum of log P(token_t | tokens_<t) over positions where
    score_mask is true, one value per batch row.

    ids (batch, seq) int64; score_mask (batch, seq) bool; padding
    columns must be mask-false. Differentiable through the model.
    """
    logits = model(ids)
    logprobs = F.log_softmax(logits[:, :-1, :].float(), dim=-1)
    targets = ids[:, 1:]
    token_lp = logprobs.gather(-1, targets.unsqueeze(-1)).squeeze(-1)
    return (token_lp * score_mask[:, 1:].float()).sum(dim=-1)


def token_nll(model: nn.Module, ids: torch.Tensor, score_mask: torch.Tensor) -> torch.Tensor:
    """Mean negative log-likelihood per scored token over the batch."""
    seq_lp = sequence_logprobs(model, ids, score_mask)
    n_tokens = score_mask[:, 1:].sum()
    if int(n_tokens) == 0:
        raise BridgeConfigError("batch has no scored tokens")
    return -seq_lp.sum() / n_tokens.float()


def warmup_lr(step: int, total_steps: int, base_lr: float, warmup_ratio: float) -> float:
    """Linear warmup to base_lr over warmup_ratio of total_steps, then
    constant. step is 1-based (the step about to be applied)."""
    warm = max(1, math.ceil(total_steps * warmup_ratio)) if warmup_ratio > 0 else 0
    if warm and step <= warm:
        return base_lr * step / warm
    return base_lr


def spec_as_dict(spec: ModelSpec) -> dict:
    return asdict(spec)
