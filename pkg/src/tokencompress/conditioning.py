"""Instruction conditioning signals for the two compression pathways."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ContractError, ShapeError
from .numeric import Mlp, Var, as_var, matmul, mlp_forward, reshape, getitem


@dataclass
class InstructionEmbedding:
    """Per-token language embeddings [T, d_lang] with an optional validity mask."""

    tokens: np.ndarray
    mask: np.ndarray | None = None

    def __post_init__(self):
        self.tokens = np.asarray(self.tokens)
        if self.tokens.ndim != 2:
            raise ShapeError(f"instruction tokens must be [T, d_lang], got {self.tokens.shape}")
        if self.mask is not None:
            self.mask = np.asarray(self.mask, dtype=bool)
            if self.mask.shape != (self.tokens.shape[0],):
                raise ShapeError(
                    f"mask length {self.mask.shape} does not match T={self.tokens.shape[0]}"
                )

    def valid_count(self) -> int:
        if self.mask is None:
            return self.tokens.shape[0]
        return int(self.mask.sum())


@dataclass
class PooledInstruction:
    vector: Var


@dataclass
class FilmParams:
    gamma: Var
    beta: Var


@dataclass
class SrcInjection:
    vector: Var


def pool_weights(emb: InstructionEmbedding) -> np.ndarray:
    """Averaging weights over tokens; masked tokens get weight zero."""
    count = emb.valid_count()
    if count == 0:
        raise ContractError("no valid instruction tokens")
    valid = np.ones(emb.tokens.shape[0], dtype=bool) if emb.mask is None else emb.mask
    return np.where(valid, 1.0 / count, 0.0).astype(emb.tokens.dtype)


def pool_instruction(emb: InstructionEmbedding) -> PooledInstruction:
    """Mean over valid tokens (all tokens when no mask is given)."""
    w = pool_weights(emb)[None, :]
    pooled = matmul(w, emb.tokens, counted=False)
    return PooledInstruction(reshape(pooled, (emb.tokens.shape[1],)))


def compute_task_embedding(pooled: PooledInstruction, mlp_stc: Mlp) -> Var:
    return mlp_forward(mlp_stc, pooled.vector)


def compute_film(task_emb, mlp_film: Mlp, k: int, d: int) -> FilmParams:
    """Run the FiLM generator and split its output into gamma [k, D] and beta [k, D].

    The first k*D outputs fill gamma row-major, the remaining k*D fill beta.
    Leading batch dims of ``task_emb`` are carried through.
    """
    if mlp_film.out_dim != 2 * k * d:
        raise ShapeError(
            f"FiLM generator must output 2*k*D = {2 * k * d} values, got {mlp_film.out_dim}"
        )
    out = mlp_forward(mlp_film, task_emb)
    lead = out.shape[:-1]
    gamma = reshape(getitem(out, (..., slice(0, k * d))), (*lead, k, d))
    beta = reshape(getitem(out, (..., slice(k * d, 2 * k * d))), (*lead, k, d))
    return FilmParams(gamma, beta)


def compute_src_injection(pooled: PooledInstruction, mlp_src: Mlp) -> SrcInjection:
    return SrcInjection(mlp_forward(mlp_src, as_var(pooled.vector)))
