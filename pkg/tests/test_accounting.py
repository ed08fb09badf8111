import itertools

import numpy as np
import pytest

from tokencompress import accounting as acc
from tokencompress.conditioning import InstructionEmbedding
from tokencompress.errors import ContractError
from tokencompress.numeric import count_flops
from tokencompress.pipeline import VARIANTS, CompressionConfig, compress, init_params

SMOKE = [
    CompressionConfig(D=8, H=16, W=16, k=k, w=w, variant=v, identity_projections=ident, d_lang=12)
    for k, w, v, ident in itertools.product((8, 16, 32), (2, 4, 8), VARIANTS, (False, True))
]


@pytest.mark.parametrize("cfg", SMOKE, ids=lambda c: f"{c.variant}-k{c.k}-w{c.w}-{'id' if c.identity_projections else 'proj'}")
def test_closed_form_equals_instrumented_counter(cfg):
    r = np.random.default_rng(0)
    p = init_params(cfg, 0)
    views = [r.normal(size=(cfg.H, cfg.W, cfg.D)) for _ in range(cfg.views)]
    instr = InstructionEmbedding(r.normal(size=(5, cfg.lang_dim)))
    with count_flops() as c:
        compress(p, views, instr)
    assert c.total == acc.compressor_flops(cfg)


def test_linear_only_ratio():
    rep = acc.pipeline_flops(acc.CostModel(per_token_linear=1.0), CompressionConfig(), include_compressor=False)
    assert rep["ratio"] == 0.3125
    assert rep["ratio_without_compressor"] == 0.3125
    assert (rep["tokens_baseline"], rep["tokens_compressed"]) == (512, 160)


def test_fixed_cost_dilutes_ratio():
    rep = acc.pipeline_flops(acc.CostModel(per_token_linear=1.0, fixed=512.0), CompressionConfig(),
                             include_compressor=False)
    assert rep["ratio"] == pytest.approx((512 + 160) / (512 + 512))


def test_pair_only_ratio():
    rep = acc.pipeline_flops(acc.CostModel(per_token_pair=1.0), CompressionConfig(), include_compressor=False)
    assert rep["ratio"] == pytest.approx((160 / 512) ** 2)
    assert round(rep["ratio"], 4) == 0.0977


def test_compressor_overhead_included():
    cfg = CompressionConfig()
    model = acc.CostModel(per_token_linear=1e6)
    rep = acc.pipeline_flops(model, cfg)
    assert rep["flops_compressed"] == model.cost(160) + acc.compressor_flops(cfg)


@pytest.mark.parametrize("model", [
    acc.CostModel(per_token_linear=3.0),
    acc.CostModel(per_token_pair=0.5),
    acc.CostModel(per_token_linear=1.0, per_token_pair=2.0, fixed=10.0),
])
def test_cost_strictly_increasing_in_tokens(model):
    costs = [model.cost(m) for m in range(0, 600, 7)]
    assert all(b > a for a, b in zip(costs, costs[1:]))
    # and across the published configurations, ordered by token count
    cfgs = sorted((CompressionConfig(k=k, w=w) for k in (8, 16, 32) for w in (2, 4, 8)),
                  key=lambda c: acc.token_report(c)["tokens_compressed"])
    ratios = [acc.pipeline_flops(model, c, include_compressor=False)["ratio"] for c in cfgs]
    tokens = [acc.token_report(c)["tokens_compressed"] for c in cfgs]
    for (t0, r0), (t1, r1) in zip(zip(tokens, ratios), zip(tokens[1:], ratios[1:])):
        if t1 > t0:
            assert r1 > r0


def test_cost_model_validation():
    with pytest.raises(ContractError):
        acc.CostModel(per_token_linear=-1.0)
    with pytest.raises(ContractError):
        acc.CostModel.from_dict({"linear": 1.0})


def test_canonical_json_is_stable():
    rep = acc.token_report(CompressionConfig())
    assert acc.to_canonical_json(rep) == acc.to_canonical_json(dict(reversed(list(rep.items()))))
