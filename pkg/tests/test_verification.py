import numpy as np
import pytest
from scipy import stats

from tokencompress import numeric as nm
from tokencompress.errors import CertificationError, ContractError
from tokencompress.pipeline import VARIANTS, forward
from tokencompress.verification import (
    DESK_CONFIG,
    TOY_CONFIG,
    TrainerSettings,
    brute_force_attention,
    certification_problem,
    certify_gradients,
    certify_toy,
    check_attention_oracle,
    check_instruction_invariance,
    epsilon_sensitivity,
    generate_toy_scene,
    oracle_retrieval_accuracy,
    require,
    sample_toy_batch,
    train_toy_task,
)


def test_brute_force_single_key(rng):
    v = rng.normal(size=(1, 3))
    out = brute_force_attention(rng.normal(size=(2, 4)), rng.normal(size=(1, 4)), v)
    assert np.allclose(out, np.repeat(v, 2, axis=0), rtol=0, atol=1e-15)


def test_brute_force_uniform_keys(rng):
    v = rng.normal(size=(5, 3))
    keys = np.repeat(rng.normal(size=(1, 4)), 5, axis=0)
    out = brute_force_attention(rng.normal(size=(2, 4)), keys, v)
    assert np.allclose(out, np.repeat(v.mean(axis=0, keepdims=True), 2, axis=0), rtol=0, atol=1e-14)


def test_oracle_identity_and_projected():
    plain = check_attention_oracle()
    assert plain["matched"] == 50 and plain["tolerance"] == 1e-9
    projected = check_attention_oracle(projections=True)
    assert projected["matched"] == 50 and projected["tolerance"] == 1e-7


def test_scene_single_object_no_noise():
    scene, instr = generate_toy_scene(5, P=1, sigma=0.0)
    g = scene.grid.grid
    n_colors = 8 - 3
    energy = np.abs(g[..., :n_colors]).sum(axis=-1)
    cells = energy.reshape(4, 2, 4, 2).sum(axis=(1, 3)).ravel()
    assert np.count_nonzero(cells) == 1
    assert np.flatnonzero(cells)[0] == scene.target_cell
    assert instr.tokens.shape == (1, 8)
    assert instr.tokens[0, scene.object_colors[0]] == 1.0


def test_scene_deterministic():
    a, ia = generate_toy_scene(11)
    b, ib = generate_toy_scene(11)
    assert np.array_equal(a.grid.grid, b.grid.grid) and np.array_equal(ia.tokens, ib.tokens)
    assert a.target_cell == b.target_cell


def test_scene_objects_distinct():
    for seed in range(50):
        s, _ = generate_toy_scene(seed)
        assert len(set(s.object_cells.tolist())) == 4
        assert len(set(s.object_colors.tolist())) == 4


def test_scene_errors():
    with pytest.raises(ContractError):
        generate_toy_scene(0, P=6)
    with pytest.raises(ContractError):
        generate_toy_scene(0, sigma=-0.1)


def test_target_positions_uniform():
    cells = [generate_toy_scene(seed)[0].target_cell for seed in range(1600)]
    counts = np.bincount(cells, minlength=16)
    assert stats.chisquare(counts).pvalue > 1e-3


def test_solvability_oracle():
    batch = sample_toy_batch(np.random.default_rng(99), 2000)
    assert oracle_retrieval_accuracy(batch) >= 0.99


def test_gradient_certification_single_seed():
    rep = certify_gradients(seeds=[0], variants=("stc_src", "src_only"))
    assert rep["passed"] and rep["max_rel_error"] < 1e-4
    groups = rep["runs"][0]["per_group"]
    assert "stc.mlp_film.0.weight" in groups and "src.mlp_src.0.weight" in groups


def test_certification_rejects_fast32():
    with pytest.raises(ContractError):
        certify_gradients(DESK_CONFIG.replace(precision="fast32"), seeds=[0])


def test_require_raises():
    with pytest.raises(CertificationError, match="grad"):
        require({"mode": "grad", "passed": False, "failures": ["x"]})


def test_stc_only_src_gradients_exactly_zero():
    loss, tensors = certification_problem(DESK_CONFIG.replace(variant="stc_only"), 0)
    # include the SRC tensors of a full config even though stc_only never reads them
    full = certification_problem(DESK_CONFIG, 0)[1]
    extra = {n: a for n, a in full.items() if n.startswith("src.")}
    grads = nm.gradients(loss, {**tensors, **extra})
    assert extra and all(not grads[n].any() for n in extra)


@pytest.mark.parametrize("variant", VARIANTS)
def test_epsilon_brackets(variant):
    for seed in range(2):
        rep = epsilon_sensitivity(DESK_CONFIG.replace(variant=variant), seed, (1e-3, 1e-4, 1e-5, 1e-6))
        e = {k: v["scaled_error"] for k, v in rep.items()}
        assert e[1e-5] < e[1e-4] and e[1e-5] < e[1e-6]
        # truncation regime: central differences are second order
        assert 30 < e[1e-3] / e[1e-4] < 300
        m = {k: v["max_rel_error"] for k, v in rep.items()}
        assert m[1e-5] <= max(m[1e-4], m[1e-6])


def test_instruction_invariance_checks():
    assert check_instruction_invariance(TOY_CONFIG.replace(variant="no_guidance"))["instruction_invariant"]
    for v in ("stc_src", "stc_only", "src_only", "stc_src_film"):
        assert not check_instruction_invariance(TOY_CONFIG.replace(variant=v))["instruction_invariant"]


def test_short_training_reports_fractions():
    r = train_toy_task(TOY_CONFIG, TrainerSettings(steps=30, test_size=64))
    assert 0 <= r.retrieval_accuracy <= 1
    assert 0 <= r.attention_mass_on_target <= 1 and 0 <= r.target_attention_top_fraction <= 1
    assert r.chance == 0.25 and len(r.loss_curve) == 30 and not r.diverged
    assert "params" not in r.to_dict()


def test_src_only_has_no_attention_mass():
    r = train_toy_task(TOY_CONFIG.replace(variant="src_only"), TrainerSettings(steps=5, test_size=16))
    assert r.attention_mass_on_target is None


def test_divergence_reported_with_seed():
    settings = TrainerSettings(steps=20, optimizer="sgd", lr=1e12, test_size=16)
    rep = certify_toy(variants=("stc_src",), seeds=(3,), settings=settings)
    assert rep["variants"]["stc_src"]["runs"][0]["diverged"]
    assert not rep["passed"] and any("seed3" in f for f in rep["failures"])


def test_restart_only_when_fit_is_poor():
    s = TrainerSettings(steps=20, test_size=16, restarts=2, fit_loss=100.0)
    assert train_toy_task(TOY_CONFIG, s).attempts == 1
    s = TrainerSettings(steps=20, test_size=16, restarts=2, fit_loss=0.0)
    assert train_toy_task(TOY_CONFIG, s).attempts == 3


def test_unknown_optimizer():
    with pytest.raises(ContractError):
        train_toy_task(TOY_CONFIG, TrainerSettings(steps=1, optimizer="lbfgs"))


@pytest.mark.slow
def test_trained_stc_src_attention_depends_on_instruction():
    r = train_toy_task(TOY_CONFIG, TrainerSettings(seed=0))
    scene, _ = generate_toy_scene(1234)
    params = {n: nm.Var(a) for n, a in r.params.items()}
    grids = scene.grid.grid[None, None]
    attn = []
    for obj in range(len(scene.object_cells)):
        instr = np.zeros((1, 8))
        instr[0, scene.object_colors[obj]] = 1.0
        attn.append(forward(params, grids, instr, TOY_CONFIG).attn_g.value)
    assert any(not np.array_equal(attn[0], a) for a in attn[1:])
    assert max(float(np.abs(attn[0] - a).max()) for a in attn[1:]) > 0.1
