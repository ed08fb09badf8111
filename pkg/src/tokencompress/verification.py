"""Executable checks: gradient certification, a brute-force attention oracle,
and a synthetic instruction-retrieval task.

Toy scene layout (defaults H = W = 8, D = 8, w = 2): the grid is tiled into
w x w cells. A region is one cell column inside the top or bottom half, so
the default grid has 8 regions of 2 cells. Each of the P objects fills one
whole cell with a colour direction (a basis vector among the leading
channels), at most one object per region. The trailing channels carry a
coarse positional code on every token: one +-0.5 channel for the half and
a binary +-0.5 code of the cell column. The instruction is the target's
colour direction plus noise. The label is the target's cell.

The global pathway can therefore name the target's region but not the cell
inside it, while local window tokens show which cells hold objects but,
because an object fills its window, carry no instruction-dependent signal.
Only the combination pins down the target. Having more regions than objects
means attending to everything except the target says little about where it
is, which keeps the attention readout meaningful.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field, replace

import numpy as np

from . import numeric as nm
from .conditioning import InstructionEmbedding
from .errors import CertificationError, ContractError
from .numeric import Var
from .pipeline import VARIANTS, CompressionConfig, forward, init_params, token_count
from .src import FeatureGrid
from .stc import StcParams, cross_attend

log = logging.getLogger(__name__)

TOY_CONFIG = CompressionConfig(D=8, k=4, w=2, H=8, W=8, views=1)
DESK_CONFIG = CompressionConfig(D=8, k=4, w=2, H=8, W=8, views=2)
CERT_TOLERANCE = 1e-4


# -- brute-force oracle ------------------------------------------------------

def brute_force_attention(q, keys, values):
    """Scaled dot-product attention with plain Python loops over floats."""
    q = [[float(v) for v in row] for row in np.asarray(q)]
    keys = [[float(v) for v in row] for row in np.asarray(keys)]
    values = [[float(v) for v in row] for row in np.asarray(values)]
    d = len(q[0])
    out = []
    for qi in q:
        logits = []
        for kj in keys:
            s = 0.0
            for a, b in zip(qi, kj):
                s += a * b
            logits.append(s / math.sqrt(d))
        top = max(logits)
        ex = [math.exp(x - top) for x in logits]
        total = sum(ex)
        row = [0.0] * len(values[0])
        for e, vj in zip(ex, values):
            for c, vv in enumerate(vj):
                row[c] += e / total * vv
        out.append(row)
    return np.array(out)


def check_attention_oracle(instances=50, seed=0, tol=None, projections=False) -> dict:
    """Library cross-attention against the loop oracle.

    With ``projections`` the library applies random q/k/v projections and the
    oracle receives the same projected queries, keys and values.
    """
    tol = (1e-7 if projections else 1e-9) if tol is None else tol
    rng = np.random.default_rng(seed)
    matched, worst = 0, 0.0
    for _ in range(instances):
        k, n, d = rng.integers(1, 5), rng.integers(1, 17), rng.integers(1, 9)
        q = rng.normal(size=(k, d))
        x = rng.normal(size=(n, d))
        if projections:
            maps = [nm.LinearMap(rng.normal(size=(d, d)), rng.normal(size=d)) for _ in range(3)]
            qp, kp, vp = (x_ @ lm.weight + lm.bias for lm, x_ in zip(maps, (q, x, x)))
            params = StcParams(Var(q), maps[0], maps[1], maps[2], None, None, None)
            expected = brute_force_attention(qp, kp, vp)
        else:
            params = StcParams(Var(q), None, None, None, None, None, None)
            expected = brute_force_attention(q, x, x)
        got = cross_attend(q, x, params).z_g.value
        err = float(np.abs(got - expected).max())
        worst = max(worst, err)
        matched += err <= tol
    return {"mode": "oracle", "projections": projections, "instances": instances,
            "matched": int(matched), "max_abs_error": worst, "tolerance": tol,
            "passed": bool(matched == instances)}


def check_instruction_invariance(config: CompressionConfig, seed=0, instructions=8) -> dict:
    """Compress one scene under several random instructions; Z must not change
    at all when guidance is off."""
    rng = np.random.default_rng([seed, 3])
    params = init_params(config, seed).as_vars()
    for name in params:
        if "mlp_film" in name:  # move off identity so guidance would be visible
            params[name] = Var(params[name].value + rng.normal(scale=0.3, size=params[name].shape))
    grids = np.repeat(rng.normal(size=(1, config.views, config.H, config.W, config.D)),
                      instructions, axis=0)
    pooled = rng.normal(size=(instructions, config.lang_dim))
    z = forward(params, grids, pooled, config).z.value
    identical = bool(all(np.array_equal(z[0], z[i]) for i in range(1, instructions)))
    return {"variant": config.variant, "instructions": instructions,
            "instruction_invariant": identical}


# -- gradient certification ---------------------------------------------------

def certification_problem(config: CompressionConfig, seed: int):
    """Random parameters, inputs and a mean-normalized scalar loss over Z.

    FiLM generators are moved off their identity init so every path is live.
    """
    rng = np.random.default_rng(10_000 + seed)
    tensors = dict(init_params(config, seed).tensors)
    for name in tensors:
        if "mlp_film" in name:
            tensors[name] = tensors[name] + rng.normal(scale=0.3, size=tensors[name].shape)
    grids = rng.normal(size=(1, config.views, config.H, config.W, config.D))
    pooled = rng.normal(size=(1, config.lang_dim))
    target = rng.normal(size=(1, token_count(config), config.D))

    def loss(params):
        z = forward(params, grids, pooled, config).z
        total = nm.sum_all(nm.mul(z, target)) + nm.scale(nm.sum_all(nm.mul(z, z)), 0.5)
        return nm.scale(total, 1.0 / z.value.size)

    return loss, tensors


def certify_gradients(config: CompressionConfig = DESK_CONFIG, seeds=range(5),
                      variants=VARIANTS, eps=1e-5, tol=CERT_TOLERANCE) -> dict:
    """Finite-difference certification of every parameter group and variant."""
    if config.precision != "verify64":
        raise ContractError("gradient certification requires verify64 precision")
    runs, failures = [], []
    for variant in variants:
        cfg = config.replace(variant=variant)
        for seed in seeds:
            loss, tensors = certification_problem(cfg, seed)
            rep = nm.finite_diff_check(loss, tensors, eps)
            runs.append({"variant": variant, "seed": int(seed),
                         "max_rel_error": rep.max_rel_error,
                         "worst_param": rep.worst_param[0], "per_group": rep.per_group})
            for group, err in rep.per_group.items():
                if err >= tol:
                    failures.append(f"{variant}/seed{seed}/{group}: {err:.3g}")
    return {
        "mode": "grad",
        "eps": eps,
        "tolerance": tol,
        "max_rel_error": max(r["max_rel_error"] for r in runs),
        "runs": runs,
        "failures": failures,
        "passed": not failures,
    }


def epsilon_sensitivity(config: CompressionConfig, seed: int, eps_values=(1e-4, 1e-5, 1e-6)) -> dict:
    """Finite-difference error per step size, scaled by the largest gradient entry.

    Truncation error shrinks like eps**2 and roundoff grows like 1/eps, so a
    good step size sits at the bottom of the resulting V.
    """
    loss, tensors = certification_problem(config, seed)
    analytic = nm.gradients(loss, tensors)
    a = np.concatenate([analytic[n].ravel() for n in tensors])
    scale = float(np.abs(a).max())
    out = {}
    for eps in eps_values:
        num = nm.numeric_gradients(loss, tensors, eps)
        b = np.concatenate([num[n].ravel() for n in tensors])
        out[eps] = {"scaled_error": float(np.abs(a - b).max()) / scale,
                    "max_rel_error": float(nm.relative_error(a, b).max())}
    return out


def require(report: dict):
    if not report["passed"]:
        raise CertificationError(f"{report['mode']} certification failed: {report.get('failures')}")
    return report


# -- toy retrieval task ------------------------------------------------------

@dataclass
class ToyScene:
    grid: FeatureGrid
    object_cells: np.ndarray   # [P] cell index per object
    object_colors: np.ndarray  # [P] colour channel per object
    target_index: int
    window: int

    @property
    def target_cell(self) -> int:
        return int(self.object_cells[self.target_index])


@dataclass
class ToyBatch:
    grids: np.ndarray          # [B, 1, H, W, D]
    instructions: np.ndarray   # [B, D]
    object_cells: np.ndarray   # [B, P]
    object_colors: np.ndarray  # [B, P]
    target_index: np.ndarray   # [B]

    @property
    def labels(self):
        return self.object_cells[np.arange(len(self.target_index)), self.target_index]


def _region_layout(h, w, window):
    """Region id per cell: (top/bottom half) x (cell column)."""
    ch, cw = h // window, w // window
    rows = np.arange(ch)[:, None] >= ch // 2
    return (rows * cw + np.arange(cw)[None, :]).ravel(), 2 * cw


def _code_dims(w, window):
    return 1 + max(1, int(np.ceil(np.log2(w // window))))


def sample_toy_batch(rng: np.random.Generator, n: int, P=4, sigma=0.1,
                     H=8, W=8, D=8, window=2) -> ToyBatch:
    if H % (2 * window) or W % window:
        raise ContractError(f"grid {H}x{W} must split into halves of whole {window}x{window} cells")
    ch, cw = H // window, W // window
    n_code = _code_dims(W, window)
    n_colors = D - n_code
    region_of, n_regions = _region_layout(H, W, window)
    if not 1 <= P <= min(n_regions, n_colors):
        raise ContractError(
            f"P={P} objects do not fit: at most {min(n_regions, n_colors)} "
            f"(distinct regions and colours)"
        )
    grids = rng.normal(scale=sigma, size=(n, 1, H, W, D))
    # coarse position: half bit for rows, binary cell-column code for columns
    cell_col = np.arange(W) // window
    grids[..., n_colors] += np.where(np.arange(H) < H // 2, 0.5, -0.5)[:, None]
    for bit in range(n_code - 1):
        grids[..., n_colors + 1 + bit] += np.where((cell_col >> bit) & 1, 0.5, -0.5)[None, :]
    members = np.stack([np.flatnonzero(region_of == r) for r in range(n_regions)])
    chosen = np.argsort(rng.random((n, n_regions)), axis=1)[:, :P]
    colors = np.argsort(rng.random((n, n_colors)), axis=1)[:, :P]
    slot = rng.integers(0, members.shape[1], size=(n, P))
    cells = members[chosen, slot]
    paint = np.zeros((n, ch, cw, D))
    paint.reshape(n, ch * cw, D)[np.arange(n)[:, None], cells, colors] = 1.0
    grids[:, 0] += np.repeat(np.repeat(paint, window, axis=1), window, axis=2)
    target = rng.integers(0, P, size=n)
    instr = rng.normal(scale=sigma, size=(n, D))
    instr[np.arange(n), colors[np.arange(n), target]] += 1.0
    return ToyBatch(grids, instr, cells, colors, target)


def generate_toy_scene(seed: int, P=4, sigma=0.1, H=8, W=8, D=8, window=2):
    """One deterministic scene and its single-token instruction."""
    if sigma < 0:
        raise ContractError("sigma must be >= 0")
    b = sample_toy_batch(np.random.default_rng(seed), 1, P, sigma, H, W, D, window)
    scene = ToyScene(FeatureGrid(b.grids[0, 0], view=0), b.object_cells[0],
                     b.object_colors[0], int(b.target_index[0]), window)
    return scene, InstructionEmbedding(b.instructions[:1])


def oracle_retrieval_accuracy(batch: ToyBatch, window=2) -> float:
    """Bayes-style readout with full knowledge of the generator.

    Objects are the P cells whose mean colour energy is largest; the answer is
    the object whose mean colour best matches the instruction.
    """
    g = batch.grids[:, 0]
    n, h, w, d = g.shape
    cells = g.reshape(n, h // window, window, w // window, window, d).mean(axis=(2, 4))
    n_colors = d - _code_dims(w, window)
    cells = cells.reshape(n, -1, d)[..., :n_colors]
    P = batch.object_cells.shape[1]
    hits = 0
    for b in range(n):
        found = np.argsort(-np.linalg.norm(cells[b], axis=1))[:P]
        score = cells[b, found] @ batch.instructions[b, :n_colors]
        hits += found[int(np.argmax(score))] == batch.labels[b]
    return hits / n


@dataclass
class TrainerSettings:
    steps: int = 2000
    batch: int = 32
    lr: float = 3e-3
    optimizer: str = "adam"
    cosine: bool = False
    test_size: int = 512
    P: int = 4
    sigma: float = 0.1
    seed: int = 0
    restarts: int = 0
    fit_loss: float = 0.05


@dataclass
class ToyTaskResult:
    variant: str
    seed: int
    retrieval_accuracy: float
    attention_mass_on_target: float | None
    target_attention_top_fraction: float | None
    chance: float
    final_loss: float
    diverged: bool = False
    attempts: int = 1
    loss_curve: list[float] = field(default_factory=list, repr=False)
    # trained compressor and readout tensors
    params: dict = field(default_factory=dict, repr=False)

    def to_dict(self):
        d = dict(self.__dict__)
        d.pop("loss_curve")
        d.pop("params")
        return d


class _Adam:
    def __init__(self, params, lr, b1=0.9, b2=0.999, eps=1e-8):
        self.lr, self.b1, self.b2, self.eps = lr, b1, b2, eps
        self.m = {k: np.zeros_like(v) for k, v in params.items()}
        self.v = {k: np.zeros_like(v) for k, v in params.items()}
        self.t = 0

    def step(self, params, grads, lr):
        self.t += 1
        c1, c2 = 1 - self.b1**self.t, 1 - self.b2**self.t
        for k, g in grads.items():
            self.m[k] = self.b1 * self.m[k] + (1 - self.b1) * g
            self.v[k] = self.b2 * self.v[k] + (1 - self.b2) * g * g
            params[k] -= lr * (self.m[k] / c1) / (np.sqrt(self.v[k] / c2) + self.eps)


def _readout_loss(config, batch):
    n_cells = config.local_tokens
    labels = batch.labels

    def loss(params):
        res = forward(params, batch.grids, batch.instructions, config)
        flat = nm.reshape(res.z, (res.z.shape[0], -1))
        logits = nm.add(nm.matmul(flat, params["readout.weight"]), params["readout.bias"])
        return nm.cross_entropy(logits, labels), logits, res

    return loss, n_cells


def _evaluate(config, params, batch):
    loss_fn, _ = _readout_loss(config, batch)
    vars_ = {k: Var(v) for k, v in params.items()}
    _, logits, res = loss_fn(vars_)
    pred = logits.value.argmax(axis=1)
    acc = float((pred == batch.labels).mean())
    if res.attn_g is None:
        return acc, None, None
    w = config.w
    cw = config.W // w
    attn = res.attn_g.value[:, 0]  # [B, k, N]
    grid_attn = attn.mean(axis=1).reshape(-1, config.H, config.W)
    n = grid_attn.shape[0]
    cell_mass = grid_attn.reshape(n, config.H // w, w, cw, w).sum(axis=(2, 4)).reshape(n, -1)
    obj_mass = np.take_along_axis(cell_mass, batch.object_cells, axis=1)
    rows = np.arange(n)
    target_mass = obj_mass[rows, batch.target_index]
    others = obj_mass.copy()
    others[rows, batch.target_index] = -np.inf
    top = float((target_mass > others.max(axis=1)).mean()) if obj_mass.shape[1] > 1 else 1.0
    return acc, float(target_mass.mean()), top


def _train_once(config, s: TrainerSettings, init_seed: int):
    rng = np.random.default_rng(init_seed)
    params = dict(init_params(config, init_seed).tensors)
    m, n_cells = token_count(config), config.local_tokens
    params["readout.weight"] = nm.uniform_init(rng, m * config.D, (m * config.D, n_cells))
    params["readout.bias"] = np.zeros(n_cells)
    opt = _Adam(params, s.lr) if s.optimizer == "adam" else None
    data_rng = np.random.default_rng([s.seed, 1])
    curve, diverged = [], False
    for step in range(s.steps):
        lr = s.lr
        if s.cosine:
            lr = 0.5 * s.lr * (1 + math.cos(math.pi * step / s.steps))
        batch = sample_toy_batch(data_rng, s.batch, s.P, s.sigma, config.H, config.W, config.D, config.w)
        loss_fn, _ = _readout_loss(config, batch)
        holder = {}

        def objective(p):
            value, _, _ = loss_fn(p)
            holder["loss"] = float(value.value)
            return value

        grads = nm.gradients(objective, params)
        if not np.isfinite(holder["loss"]):
            diverged = True
            log.warning("toy task diverged: variant=%s seed=%d step=%d", config.variant, s.seed, step)
            break
        curve.append(holder["loss"])
        if opt is not None:
            opt.step(params, grads, lr)
        else:
            for k, g in grads.items():
                params[k] -= lr * g
    return params, curve, diverged


def _fit_loss(curve, diverged):
    if diverged or not curve:
        return float("inf")
    return float(np.mean(curve[-100:]))


def train_toy_task(config: CompressionConfig = TOY_CONFIG,
                   settings: TrainerSettings | None = None) -> ToyTaskResult:
    """Train compressor + linear readout on the retrieval task; report held-out metrics.

    With ``settings.restarts > 0`` a run whose smoothed final training loss
    stays above ``settings.fit_loss`` is repeated from a fresh initialization
    and the attempt with the lowest training loss is kept. Held-out data never
    enters the selection.
    """
    s = settings or TrainerSettings()
    if s.optimizer not in ("adam", "sgd"):
        raise ContractError(f"unknown optimizer {s.optimizer!r}")
    best = None
    for attempt in range(1 + s.restarts):
        init_seed = s.seed + 7919 * attempt
        params, curve, diverged = _train_once(config, s, init_seed)
        fit = _fit_loss(curve, diverged)
        if best is None or fit < best[0]:
            best = (fit, params, curve, diverged)
        if fit <= s.fit_loss:
            break
        log.info("toy task attempt %d fit loss %.4g above %.4g", attempt + 1, fit, s.fit_loss)
    fit, params, curve, diverged = best
    attempts = attempt + 1
    test = sample_toy_batch(np.random.default_rng([s.seed, 2]), s.test_size, s.P, s.sigma,
                            config.H, config.W, config.D, config.w)
    if diverged:
        acc, mass, top = float("nan"), None, None
    else:
        acc, mass, top = _evaluate(config, params, test)
    return ToyTaskResult(config.variant, s.seed, acc, mass, top, 1.0 / s.P,
                         fit, diverged, attempts, curve, params)


# Frozen after the solvability oracle scored 1.0 at sigma = 0.1 and a
# calibration sweep on seeds 0-9; acceptance uses HELDOUT_SEEDS.
TOY_ACCURACY_MIN = 0.95
TOY_CHANCE_MARGIN = 0.1
TOY_TOP_FRACTION_MIN = 0.9
ABLATION_VARIANTS = ("stc_src", "no_guidance", "stc_only", "src_only")
HELDOUT_SEEDS = tuple(range(100, 110))


def certify_toy(variants=ABLATION_VARIANTS, seeds=HELDOUT_SEEDS, settings=None,
                config: CompressionConfig = TOY_CONFIG) -> dict:
    """Train every variant on every seed and check the steering properties.

    Checks only apply when the variants they mention were run.
    """
    base = settings or TrainerSettings(restarts=1)
    results = {v: [] for v in variants}
    for v in variants:
        for seed in seeds:
            r = train_toy_task(config.replace(variant=v), replace(base, seed=int(seed)))
            log.info("toy %s seed %d: acc %.3f", v, seed, r.retrieval_accuracy)
            results[v].append(r)
    failures, checks = [], {}
    for v, runs in results.items():
        for r in runs:
            if r.diverged:
                failures.append(f"{v}/seed{r.seed}: diverged")
    summary = {}
    for v, runs in results.items():
        accs = [r.retrieval_accuracy for r in runs if not r.diverged]
        summary[v] = {
            "mean_accuracy": float(np.mean(accs)) if accs else float("nan"),
            "min_accuracy": float(np.min(accs)) if accs else float("nan"),
            "runs": [r.to_dict() for r in runs],
        }
    chance = 1.0 / base.P
    if "stc_src" in results:
        runs = results["stc_src"]
        low = [r.seed for r in runs if not r.retrieval_accuracy >= TOY_ACCURACY_MIN]
        checks["stc_src_accuracy"] = not low
        if low:
            failures.append(f"stc_src accuracy below {TOY_ACCURACY_MIN} on seeds {low}")
        tops = [r.target_attention_top_fraction for r in runs if not r.diverged]
        pooled = float(np.mean(tops)) if tops else float("nan")
        summary["stc_src"]["target_top_fraction_pooled"] = pooled
        checks["stc_src_attention_on_target"] = pooled >= TOY_TOP_FRACTION_MIN
        if not checks["stc_src_attention_on_target"]:
            failures.append(f"target holds the most attention on {pooled:.3f} of scenes "
                            f"(< {TOY_TOP_FRACTION_MIN})")
    if "no_guidance" in results:
        high = [r.seed for r in results["no_guidance"]
                if not r.retrieval_accuracy <= chance + TOY_CHANCE_MARGIN]
        checks["no_guidance_at_chance"] = not high
        if high:
            failures.append(f"no_guidance above chance + {TOY_CHANCE_MARGIN} on seeds {high}")
        inv = check_instruction_invariance(config.replace(variant="no_guidance"))
        summary["no_guidance"]["invariance"] = inv
        checks["no_guidance_instruction_invariant"] = inv["instruction_invariant"]
        if not inv["instruction_invariant"]:
            failures.append("no_guidance output changed with the instruction")
    rivals = [v for v in results if v != "stc_src"]
    if "stc_src" in results and rivals:
        best_rival = max(summary[v]["mean_accuracy"] for v in rivals)
        checks["ablation_ordering"] = summary["stc_src"]["mean_accuracy"] > best_rival
        if not checks["ablation_ordering"]:
            failures.append("stc_src mean accuracy does not beat every ablation")
    return {
        "mode": "toy",
        "seeds": [int(s) for s in seeds],
        "chance": chance,
        "thresholds": {"accuracy_min": TOY_ACCURACY_MIN, "chance_margin": TOY_CHANCE_MARGIN,
                       "top_fraction_min": TOY_TOP_FRACTION_MIN},
        "variants": summary,
        "checks": checks,
        "failures": failures,
        "passed": not failures,
    }

