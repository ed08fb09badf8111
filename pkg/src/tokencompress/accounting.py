"""Closed-form FLOP counts for the compressor and a parametric downstream cost.

Counting convention: a multiply-add is 2 flops and a softmax element is 5.
Only matmuls and softmaxes are counted; bias adds, GELU, FiLM modulation,
mean pooling and concatenation are treated as free. The instrumented counter
in :mod:`tokencompress.numeric` follows the same convention.
"""

from __future__ import annotations

import json
from dataclasses import dataclass

from .errors import ContractError
from .pipeline import CompressionConfig, token_count


@dataclass(frozen=True)
class CostModel:
    """Downstream consumer cost ``fixed + linear * M + pair * M**2`` for M tokens."""

    per_token_linear: float = 0.0
    per_token_pair: float = 0.0
    fixed: float = 0.0

    def __post_init__(self):
        for name in ("per_token_linear", "per_token_pair", "fixed"):
            if getattr(self, name) < 0:
                raise ContractError(f"cost model coefficient {name} must be >= 0")

    def cost(self, tokens: int) -> float:
        return self.fixed + self.per_token_linear * tokens + self.per_token_pair * tokens**2

    @classmethod
    def from_dict(cls, data) -> "CostModel":
        known = {"per_token_linear", "per_token_pair", "fixed"}
        unknown = sorted(set(data) - known)
        if unknown:
            raise ContractError(f"unknown cost model fields: {unknown}")
        return cls(**data)


def _attention_flops(n_queries, n_keys, d):
    # scores + weighted sum + softmax
    return 2 * n_queries * n_keys * d * 2 + 5 * n_queries * n_keys


def stc_flops(config: CompressionConfig) -> int:
    if not config.uses_stc:
        return 0
    d, k, dl, v = config.D, config.k, config.lang_dim, config.views
    n = config.H * config.W
    total = 0
    if config.stc_guided:
        total += 2 * dl * 2 * d + 2 * 2 * d * d   # task embedding MLP
        total += 2 * d * 2 * k * d                # FiLM generator
    if not config.identity_projections:
        total += 2 * k * d * d                    # query projection, shared by views
        total += v * (2 * 2 * n * d * d)          # key and value projections
        total += v * (2 * k * d * d)              # output projection
    total += v * _attention_flops(k, n, d)
    return total


def src_flops(config: CompressionConfig) -> int:
    if not config.uses_src:
        return 0
    d, dl, v = config.D, config.lang_dim, config.views
    n = config.H * config.W
    n_loc, win = config.local_tokens, config.w * config.w
    total = 0
    if config.src_film:
        total += 2 * dl * 2 * d
    elif config.src_guided:
        total += 2 * dl * d
    if not config.identity_projections:
        total += v * (2 * n_loc * d * d + 2 * 2 * n * d * d + 2 * n_loc * d * d)
    total += v * n_loc * _attention_flops(1, win, d)
    return total


def compressor_flops(config: CompressionConfig) -> int:
    """Flops of one compress call (one instruction, ``config.views`` views)."""
    return stc_flops(config) + src_flops(config)


def pipeline_flops(model: CostModel, config: CompressionConfig, include_compressor=True) -> dict:
    tokens_base = config.views * config.H * config.W
    tokens_comp = token_count(config)
    flops_base = model.cost(tokens_base)
    overhead = compressor_flops(config)
    flops_comp = model.cost(tokens_comp) + (overhead if include_compressor else 0)
    return {
        "config": config.to_dict(),
        "tokens_baseline": tokens_base,
        "tokens_compressed": tokens_comp,
        "flops_baseline": flops_base,
        "flops_compressed": flops_comp,
        "flops_compressor": overhead,
        "ratio": flops_comp / flops_base if flops_base else float("nan"),
        "ratio_without_compressor": (
            model.cost(tokens_comp) / flops_base if flops_base else float("nan")
        ),
    }


def token_report(config: CompressionConfig) -> dict:
    return {
        "config": config.to_dict(),
        "tokens_baseline": config.views * config.H * config.W,
        "tokens_compressed": token_count(config),
    }


def to_canonical_json(report: dict) -> str:
    return json.dumps(report, sort_keys=True, separators=(",", ":"))
