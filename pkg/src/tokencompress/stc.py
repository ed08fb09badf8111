"""Global pathway: FiLM-conditioned learnable queries attending over a whole view."""

from __future__ import annotations

from dataclasses import dataclass

from .conditioning import (
    FilmParams,
    PooledInstruction,
    compute_film,
    compute_task_embedding,
)
from .errors import ContractError, ShapeError
from .numeric import (
    LinearMap,
    Mlp,
    Var,
    add,
    as_var,
    attention,
    linear,
    mul,
    reshape,
)


@dataclass
class StcParams:
    """Query bank [k, D] plus attention projections and conditioning MLPs.

    Projections are ``None`` when the literal projection-free attention is used.
    """

    queries: Var
    q_proj: LinearMap | None
    k_proj: LinearMap | None
    v_proj: LinearMap | None
    o_proj: LinearMap | None
    mlp_stc: Mlp
    mlp_film: Mlp

    @property
    def k(self):
        return self.queries.shape[0]

    @property
    def d(self):
        return self.queries.shape[1]


@dataclass
class StcOutput:
    z_g: Var   # [..., k, D]
    attn: Var  # [..., k, N]


def _project(lm, x):
    return x if lm is None else linear(lm, x)


def condition_queries(queries, film: FilmParams) -> Var:
    """Elementwise ``gamma * Q + beta``."""
    queries = as_var(queries)
    qs = queries.shape
    if film.gamma.shape[-2:] != qs or film.beta.shape[-2:] != qs:
        raise ShapeError(
            f"FiLM shapes gamma={film.gamma.shape}, beta={film.beta.shape} "
            f"do not match query bank {qs}"
        )
    return add(mul(film.gamma, queries), film.beta)


def cross_attend(q_con, x, params: StcParams) -> StcOutput:
    """Attend from conditioned queries [..., k, D] to visual tokens [..., N, D].

    Query and token batch dims must agree; a 2-D query bank is shared.
    """
    x = as_var(x)
    if x.shape[-2] == 0:
        raise ContractError("empty visual sequence")
    q_con = as_var(q_con)
    if x.shape[-1] != q_con.shape[-1]:
        raise ShapeError(f"token width {x.shape[-1]} does not match query width {q_con.shape[-1]}")
    q = _project(params.q_proj, q_con)
    keys = _project(params.k_proj, x)
    values = _project(params.v_proj, x)
    mixed, weights = attention(q, keys, values)
    return StcOutput(_project(params.o_proj, mixed), weights)


def stc_forward(params: StcParams, x, pooled: PooledInstruction, guidance: bool) -> StcOutput:
    """Global summary of ``x`` [..., N, D]; guidance routes the queries through FiLM.

    With ``pooled.vector`` shaped [B, d_lang], ``x`` must be [B, ..., N, D].
    """
    x = as_var(x)
    if not guidance:
        return cross_attend(params.queries, x, params)
    task = compute_task_embedding(pooled, params.mlp_stc)
    film = compute_film(task, params.mlp_film, params.k, params.d)
    q_con = condition_queries(params.queries, film)
    extra = x.ndim - q_con.ndim
    if extra > 0:
        # singleton view axes; attention broadcasts them, so queries project once
        q_con = reshape(q_con, (*q_con.shape[:-2], *([1] * extra), *q_con.shape[-2:]))
    return cross_attend(q_con, x, params)
