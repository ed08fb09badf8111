"""Local pathway: one instruction-hinted query per non-overlapping w x w window."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .conditioning import SrcInjection
from .errors import ContractError, ShapeError
from .numeric import (
    LinearMap,
    Mlp,
    Var,
    add,
    as_var,
    attention,
    getitem,
    linear,
    mean,
    mul,
    permute,
    reshape,
)


@dataclass
class FeatureGrid:
    """One view's encoder output, [H, W, D] row-major."""

    grid: np.ndarray
    view: int | str = 0

    def __post_init__(self):
        self.grid = np.asarray(self.grid)
        if self.grid.ndim != 3 or min(self.grid.shape[:2]) < 1:
            raise ShapeError(f"feature grid must be [H, W, D] with H, W >= 1, got {self.grid.shape}")

    @property
    def tokens(self):
        h, w, d = self.grid.shape
        return self.grid.reshape(h * w, d)


@dataclass
class SrcParams:
    q_proj: LinearMap | None
    k_proj: LinearMap | None
    v_proj: LinearMap | None
    o_proj: LinearMap | None
    mlp_src: Mlp
    window: int
    # only for the experimental FiLM-modulated local query
    mlp_film: Mlp | None = None


@dataclass
class SrcOutput:
    z_l: Var   # [..., N', D], windows in row-major order
    attn: Var  # [..., N', w*w]


def valid_windows(h: int, w: int) -> list[int]:
    return [s for s in range(1, min(h, w) + 1) if h % s == 0 and w % s == 0]


def check_window(h: int, w: int, window: int):
    if window < 1 or h % window or w % window:
        raise ContractError(
            f"window size w={window} does not divide the {h}x{w} grid; "
            f"valid w: {valid_windows(h, w)}"
        )


def partition_windows(grid, w: int) -> Var:
    """Split [..., H, W, D] into [..., H/w * W/w, w, w, D], windows row-major."""
    grid = as_var(grid.grid if isinstance(grid, FeatureGrid) else grid)
    *lead, h, wd, d = grid.shape
    check_window(h, wd, w)
    nl = len(lead)
    x = reshape(grid, (*lead, h // w, w, wd // w, w, d))
    axes = list(range(nl)) + [nl, nl + 2, nl + 1, nl + 3, nl + 4]
    x = permute(x, axes)
    return reshape(x, (*lead, (h // w) * (wd // w), w, w, d))


def downsample_window(win) -> Var:
    """Mean over the w*w positions of a window [..., w, w, D]."""
    win = as_var(win)
    *lead, w1, w2, d = win.shape
    return mean(reshape(win, (*lead, w1 * w2, d)), axis=-2)


def _project(lm, x):
    return x if lm is None else linear(lm, x)


def _align(vec, target_ndim):
    """Insert singleton axes so a [..., D] conditioning vector broadcasts."""
    vec = as_var(vec)
    missing = target_ndim - vec.ndim
    if missing <= 0:
        return vec
    return reshape(vec, (*vec.shape[:-1], *([1] * missing), vec.shape[-1]))


def _local_attend(windows, injection, params: SrcParams, guidance: bool, film=None):
    *lead, n_win, w1, w2, d = windows.shape
    tokens = reshape(windows, (*lead, n_win, w1 * w2, d))
    q = mean(tokens, axis=-2)
    if film is not None:
        gamma, beta = film
        q = add(mul(_align(gamma, q.ndim), q), _align(beta, q.ndim))
    elif guidance:
        inj = injection.vector if isinstance(injection, SrcInjection) else injection
        q = add(q, _align(inj, q.ndim))
    q = reshape(_project(params.q_proj, q), (*lead, n_win, 1, d))
    keys = _project(params.k_proj, tokens)
    values = _project(params.v_proj, tokens)
    mixed, weights = attention(q, keys, values)
    z = _project(params.o_proj, reshape(mixed, (*lead, n_win, d)))
    return z, reshape(weights, (*lead, n_win, w1 * w2))


def src_window_forward(win, injection, params: SrcParams, guidance: bool):
    """Summarize one window [w, w, D]; returns (z_w [D], attn_w [w*w])."""
    win = as_var(win)
    batched = reshape(win, (1, *win.shape))
    z, attn = _local_attend(batched, injection, params, guidance)
    return getitem(z, 0), getitem(attn, 0)


def src_forward(grid, injection, params: SrcParams, guidance: bool, film=None) -> SrcOutput:
    """Local tokens for a grid [..., H, W, D].

    ``film`` is an optional (gamma, beta) pair that replaces the additive
    injection with an affine modulation of the raw window query.
    """
    windows = partition_windows(grid, params.window)
    z, attn = _local_attend(windows, injection, params, guidance, film)
    return SrcOutput(z, attn)
