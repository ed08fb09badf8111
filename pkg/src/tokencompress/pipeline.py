"""End-to-end compressor: configuration, multi-view orchestration, persistence."""

from __future__ import annotations

import dataclasses
import json
import math
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np

from .conditioning import (
    InstructionEmbedding,
    PooledInstruction,
    compute_src_injection,
    pool_weights,
)
from .errors import ContractError, FormatError, ShapeError, VersionError
from .numeric import (
    LinearMap,
    Mlp,
    Var,
    as_var,
    concat,
    dtype_for,
    getitem,
    matmul,
    mlp_forward,
    reshape,
    uniform_init,
)
from .src import FeatureGrid, SrcParams, check_window, src_forward
from .stc import StcParams, stc_forward

VARIANTS = ("stc_src", "stc_src_film", "no_guidance", "stc_only", "src_only")
FORMAT_VERSION = 1
PARAMS_MAGIC = b"CVLA"


@dataclass(frozen=True)
class CompressionConfig:
    D: int = 8
    k: int = 16
    w: int = 2
    H: int = 16
    W: int = 16
    views: int = 2
    variant: str = "stc_src"
    precision: str = "verify64"
    identity_projections: bool = False
    seed: int = 0
    d_lang: int | None = None

    def __post_init__(self):
        for name in ("D", "k", "w", "H", "W", "views", "seed", "d_lang"):
            value = getattr(self, name)
            if value is None and name == "d_lang":
                continue
            if isinstance(value, bool) or not isinstance(value, (int, np.integer)):
                raise ContractError(f"config field {name} must be an integer, got {value!r}")
        if not isinstance(self.identity_projections, bool):
            raise ContractError("config field identity_projections must be true or false")
        for name in ("D", "H", "W", "views", "w"):
            if getattr(self, name) < 1:
                raise ContractError(f"config field {name} must be >= 1")
        if self.k < 1:
            raise ContractError("config field k must be >= 1")
        if not isinstance(self.variant, str) or self.variant not in VARIANTS:
            raise ContractError(f"unknown variant {self.variant!r}; expected one of {VARIANTS}")
        dtype_for(self.precision)
        check_window(self.H, self.W, self.w)
        if self.d_lang is not None and self.d_lang < 1:
            raise ContractError("config field d_lang must be >= 1")

    @property
    def lang_dim(self) -> int:
        return self.D if self.d_lang is None else self.d_lang

    @property
    def uses_stc(self) -> bool:
        return self.variant != "src_only"

    @property
    def uses_src(self) -> bool:
        return self.variant != "stc_only"

    @property
    def stc_guided(self) -> bool:
        return self.variant in ("stc_src", "stc_src_film", "stc_only")

    @property
    def src_guided(self) -> bool:
        return self.variant in ("stc_src", "stc_src_film", "src_only")

    @property
    def src_film(self) -> bool:
        return self.variant == "stc_src_film"

    @property
    def local_tokens(self) -> int:
        return (self.H // self.w) * (self.W // self.w)

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True, separators=(",", ":"))

    @classmethod
    def from_dict(cls, data: Mapping) -> "CompressionConfig":
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = sorted(set(data) - known)
        if unknown:
            raise ContractError(f"unknown config fields: {unknown}")
        return cls(**data)

    def replace(self, **changes) -> "CompressionConfig":
        return dataclasses.replace(self, **changes)


SHAPE_FIELDS = ("D", "k", "w", "H", "W", "views", "variant", "identity_projections", "d_lang")


def token_count(config: CompressionConfig) -> int:
    """Compressed sequence length: views * (k if global + (H/w)(W/w) if local)."""
    check_window(config.H, config.W, config.w)
    g = config.k if config.uses_stc else 0
    l = config.local_tokens if config.uses_src else 0
    return config.views * (g + l)


# -- parameters --------------------------------------------------------------

def _projection_shapes(prefix, d):
    shapes = {}
    for proj in ("q", "k", "v", "o"):
        shapes[f"{prefix}.{proj}_proj.weight"] = (d, d)
        # a key bias shifts every logit of a query equally, so it is omitted
        if proj != "k":
            shapes[f"{prefix}.{proj}_proj.bias"] = (d,)
    return shapes


def param_shapes(config: CompressionConfig) -> dict[str, tuple]:
    d, k, dl = config.D, config.k, config.lang_dim
    shapes = {"stc.queries": (k, d)}
    if not config.identity_projections:
        shapes.update(_projection_shapes("stc", d))
    shapes.update({
        "stc.mlp_stc.0.weight": (dl, 2 * d),
        "stc.mlp_stc.0.bias": (2 * d,),
        "stc.mlp_stc.1.weight": (2 * d, d),
        "stc.mlp_stc.1.bias": (d,),
        "stc.mlp_film.0.weight": (d, 2 * k * d),
        "stc.mlp_film.0.bias": (2 * k * d,),
    })
    if not config.identity_projections:
        shapes.update(_projection_shapes("src", d))
    shapes.update({"src.mlp_src.0.weight": (dl, d), "src.mlp_src.0.bias": (d,)})
    if config.src_film:
        shapes.update({"src.mlp_film.0.weight": (dl, 2 * d), "src.mlp_film.0.bias": (2 * d,)})
    return shapes


def parameter_count(config: CompressionConfig) -> int:
    return sum(math.prod(s) for s in param_shapes(config).values())


@dataclass
class CompressorParams:
    config: CompressionConfig
    tensors: dict[str, np.ndarray]
    version: int = FORMAT_VERSION

    def __post_init__(self):
        expected = param_shapes(self.config)
        if set(expected) != set(self.tensors):
            missing = sorted(set(expected) - set(self.tensors))
            extra = sorted(set(self.tensors) - set(expected))
            raise ShapeError(f"parameter set mismatch; missing {missing}, unexpected {extra}")
        for name, shape in expected.items():
            if tuple(self.tensors[name].shape) != shape:
                raise ShapeError(
                    f"parameter {name} has shape {self.tensors[name].shape}, config expects {shape}"
                )

    def as_vars(self) -> dict[str, Var]:
        return {name: Var(v) for name, v in self.tensors.items()}


def init_params(config: CompressionConfig, seed: int | None = None) -> CompressorParams:
    """Seeded initialization; the FiLM generators start at identity modulation."""
    rng = np.random.default_rng(config.seed if seed is None else seed)
    dtype = dtype_for(config.precision)
    tensors = {}
    for name, shape in param_shapes(config).items():
        if name == "stc.queries":
            tensors[name] = uniform_init(rng, config.D, shape, dtype)
        elif name.endswith("mlp_film.0.weight"):
            tensors[name] = np.zeros(shape, dtype)
        elif name.endswith("mlp_film.0.bias"):
            half = shape[0] // 2
            tensors[name] = np.concatenate([np.ones(half), np.zeros(half)]).astype(dtype)
        elif name.endswith(".weight"):
            tensors[name] = uniform_init(rng, shape[0], shape, dtype)
        else:
            tensors[name] = np.zeros(shape, dtype)
    return CompressorParams(config, tensors)


def _linear(t, prefix):
    if f"{prefix}.weight" not in t:
        return None
    return LinearMap(t[f"{prefix}.weight"], t.get(f"{prefix}.bias"))


def _mlp(t, prefix):
    layers = []
    while f"{prefix}.{len(layers)}.weight" in t:
        layers.append(_linear(t, f"{prefix}.{len(layers)}"))
    return Mlp(layers, "gelu")


def stc_params(t: Mapping[str, Var]) -> StcParams:
    return StcParams(
        queries=t["stc.queries"],
        q_proj=_linear(t, "stc.q_proj"),
        k_proj=_linear(t, "stc.k_proj"),
        v_proj=_linear(t, "stc.v_proj"),
        o_proj=_linear(t, "stc.o_proj"),
        mlp_stc=_mlp(t, "stc.mlp_stc"),
        mlp_film=_mlp(t, "stc.mlp_film"),
    )


def src_params(t: Mapping[str, Var], window: int) -> SrcParams:
    return SrcParams(
        q_proj=_linear(t, "src.q_proj"),
        k_proj=_linear(t, "src.k_proj"),
        v_proj=_linear(t, "src.v_proj"),
        o_proj=_linear(t, "src.o_proj"),
        mlp_src=_mlp(t, "src.mlp_src"),
        window=window,
        mlp_film=_mlp(t, "src.mlp_film") if "src.mlp_film.0.weight" in t else None,
    )


# -- forward -----------------------------------------------------------------

@dataclass
class ForwardResult:
    """Batched forward output; leading axis is the item (instruction) batch."""

    z: Var                 # [B, M, D]
    z_g: Var | None        # [B, V, k, D]
    z_l: Var | None        # [B, V, N', D]
    attn_g: Var | None     # [B, V, k, N]
    attn_l: Var | None     # [B, V, N', w*w]


def forward(t: Mapping[str, Var], grids, pooled, config: CompressionConfig) -> ForwardResult:
    """Compress ``grids`` [B, V, H, W, D] under pooled instructions [B, d_lang]."""
    grids, pooled = as_var(grids), as_var(pooled)
    b, v, h, w, d = grids.shape
    if (v, h, w, d) != (config.views, config.H, config.W, config.D):
        raise ShapeError(
            f"views must be [V={config.views}, H={config.H}, W={config.W}, D={config.D}], "
            f"got [V={v}, H={h}, W={w}, D={d}]"
        )
    if pooled.shape != (b, config.lang_dim):
        raise ShapeError(f"pooled instruction must be [{b}, {config.lang_dim}], got {pooled.shape}")
    cond = PooledInstruction(pooled)
    parts = []
    z_g = z_l = attn_g = attn_l = None
    if config.uses_stc:
        tokens = reshape(grids, (b, v, h * w, d))
        out = stc_forward(stc_params(t), tokens, cond, config.stc_guided)
        z_g, attn_g = out.z_g, out.attn
        parts.append(z_g)
    if config.uses_src:
        sp = src_params(t, config.w)
        film = injection = None
        if config.src_film:
            gb = mlp_forward(sp.mlp_film, pooled)
            film = (getitem(gb, (..., slice(0, d))), getitem(gb, (..., slice(d, 2 * d))))
        elif config.src_guided:
            injection = compute_src_injection(cond, sp.mlp_src)
        out = src_forward(grids, injection, sp, config.src_guided, film)
        z_l, attn_l = out.z_l, out.attn
        parts.append(z_l)
    z = concat(parts, axis=-2) if len(parts) > 1 else parts[0]
    return ForwardResult(reshape(z, (b, token_count(config), d)), z_g, z_l, attn_g, attn_l)


@dataclass
class CompressedOutput:
    z: np.ndarray                                   # [M, D]
    z_g: list[np.ndarray] = field(default_factory=list)
    z_l: list[np.ndarray] = field(default_factory=list)
    attn_global: list[np.ndarray] = field(default_factory=list)  # per view [k, N]
    attn_local: list[np.ndarray] = field(default_factory=list)   # per view [N', w*w]


def _stack_views(views: Sequence, config: CompressionConfig, dtype) -> np.ndarray:
    if len(views) != config.views:
        raise ShapeError(f"expected {config.views} views, got {len(views)}")
    grids = []
    for i, view in enumerate(views):
        g = view.grid if isinstance(view, FeatureGrid) else np.asarray(view)
        if g.shape != (config.H, config.W, config.D):
            raise ShapeError(
                f"view {i} has dims {list(g.shape)}, config expects "
                f"[{config.H}, {config.W}, {config.D}]"
            )
        grids.append(g)
    return np.stack(grids).astype(dtype)[None]


def pooled_batch(instr: InstructionEmbedding, config: CompressionConfig, dtype) -> np.ndarray:
    if instr.tokens.shape[1] != config.lang_dim:
        raise ShapeError(
            f"instruction width {instr.tokens.shape[1]} does not match d_lang={config.lang_dim}"
        )
    w = pool_weights(instr)[None, :].astype(dtype)
    return matmul(w, instr.tokens.astype(dtype), counted=False).value


def compress(
    params: CompressorParams,
    views: Sequence,
    instr: InstructionEmbedding | np.ndarray,
    config: CompressionConfig | None = None,
) -> CompressedOutput:
    config = params.config if config is None else config
    dtype = dtype_for(config.precision)
    if not isinstance(instr, InstructionEmbedding):
        instr = InstructionEmbedding(np.asarray(instr))
    pooled = pooled_batch(instr, config, dtype)
    grids = _stack_views(views, config, dtype)
    tensors = {n: Var(a.astype(dtype, copy=False)) for n, a in params.tensors.items()}
    res = forward(tensors, grids, pooled, config)
    out = CompressedOutput(res.z.value[0])
    for vi in range(config.views):
        if res.z_g is not None:
            out.z_g.append(res.z_g.value[0, vi])
            out.attn_global.append(res.attn_g.value[0, vi])
        if res.z_l is not None:
            out.z_l.append(res.z_l.value[0, vi])
            out.attn_local.append(res.attn_l.value[0, vi])
    return out


# -- persistence -------------------------------------------------------------

def _payload_dtype(precision):
    return np.dtype("<f8") if precision == "verify64" else np.dtype("<f4")


def params_to_bytes(params: CompressorParams) -> bytes:
    cfg = params.config.to_json().encode()
    dt = _payload_dtype(params.config.precision)
    chunks = [PARAMS_MAGIC, struct.pack("<H", FORMAT_VERSION), struct.pack("<I", len(cfg)), cfg]
    for name, arr in params.tensors.items():
        raw = name.encode()
        chunks.append(struct.pack("<H", len(raw)) + raw)
        chunks.append(struct.pack("<B", arr.ndim) + struct.pack(f"<{arr.ndim}I", *arr.shape))
        chunks.append(np.ascontiguousarray(arr, dtype=dt).tobytes())
    return b"".join(chunks)


def save_params(params: CompressorParams, path) -> None:
    Path(path).write_bytes(params_to_bytes(params))


class _Reader:
    def __init__(self, data: bytes):
        self.data, self.pos = data, 0

    def take(self, n, what):
        if self.pos + n > len(self.data):
            raise FormatError(f"corrupt header: file truncated while reading {what}")
        chunk = self.data[self.pos:self.pos + n]
        self.pos += n
        return chunk

    def unpack(self, fmt, what):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt), what))


def params_from_bytes(data: bytes, expected: CompressionConfig | None = None) -> CompressorParams:
    r = _Reader(data)
    if r.take(4, "magic") != PARAMS_MAGIC:
        raise FormatError("corrupt header: bad magic, not a parameter file")
    (version,) = r.unpack("<H", "version")
    if version != FORMAT_VERSION:
        raise VersionError(f"unsupported parameter format version {version} (expected {FORMAT_VERSION})")
    (n,) = r.unpack("<I", "config length")
    try:
        config = CompressionConfig.from_dict(json.loads(r.take(n, "config").decode()))
    except (ValueError, TypeError) as exc:
        raise FormatError(f"corrupt header: config blob unreadable ({exc})") from exc
    if expected is not None:
        diffs = [
            f"{f}={getattr(config, f)!r} in file vs {f}={getattr(expected, f)!r} requested"
            for f in SHAPE_FIELDS
            if getattr(config, f) != getattr(expected, f)
        ]
        if diffs:
            raise ShapeError("parameter file does not match requested config: " + "; ".join(diffs))
    dt = _payload_dtype(config.precision)
    tensors = {}
    while r.pos < len(data):
        (ln,) = r.unpack("<H", "tensor name length")
        name = r.take(ln, "tensor name").decode(errors="replace")
        (rank,) = r.unpack("<B", f"rank of {name}")
        dims = r.unpack(f"<{rank}I", f"dims of {name}")
        raw = r.take(dt.itemsize * math.prod(dims), f"payload of {name}")
        tensors[name] = np.frombuffer(raw, dtype=dt).reshape(dims).astype(dt.newbyteorder("="))
    missing = set(param_shapes(config)) - set(tensors)
    if missing and set(tensors) < set(param_shapes(config)):
        raise FormatError(f"corrupt header: file truncated, {len(missing)} tensors missing")
    return CompressorParams(config, tensors, version)


def load_params(path, expected: CompressionConfig | None = None) -> CompressorParams:
    return params_from_bytes(Path(path).read_bytes(), expected)
