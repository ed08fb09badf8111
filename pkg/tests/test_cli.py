import json
import subprocess
import sys

import numpy as np
import pytest

from tokencompress import cli
from tokencompress.pipeline import CompressionConfig, param_shapes, parameter_count
from tokencompress.tensorfile import read_pgm, read_tensor, write_tensor


def run(capsys, *argv):
    code = cli.main(list(argv))
    out, err = capsys.readouterr()
    return code, out, err


def report(out):
    lines = out.strip().splitlines()
    assert len(lines) == 1
    return json.loads(lines[0])


@pytest.fixture
def inputs(tmp_path, rng):
    for v in range(2):
        write_tensor(tmp_path / f"v{v}.ctf", rng.normal(size=(16, 16, 8)))
    write_tensor(tmp_path / "instr.ctf", rng.normal(size=(6, 8)))
    write_tensor(tmp_path / "empty.ctf", np.zeros((0, 8)))
    return tmp_path


def test_compress_default(capsys, inputs):
    d = inputs
    code, out, _ = run(capsys, "init", "--out", str(d / "p.cvla"))
    assert code == 0
    code, out, err = run(capsys, "compress", "--params", str(d / "p.cvla"),
                         "--views", f"{d / 'v0.ctf'},{d / 'v1.ctf'}", "--instruction", str(d / "instr.ctf"),
                         "--out", str(d / "z.ctf"), "--attn-dir", str(d / "attn"))
    assert code == 0 and err == ""
    rep = report(out)
    assert rep["dims"] == [160, 8]
    assert read_tensor(d / "z.ctf").shape == (160, 8)
    names = {p.split("/")[-1] for p in rep["attention_files"]}
    assert {"view0_global.pgm", "view1_local.pgm", "view0_query15.pgm"} <= names
    assert len(names) == 2 * (1 + 16 + 1)
    pixels, maxval = read_pgm(d / "attn" / "view1_query3.pgm")
    assert pixels.shape == (16, 16) and maxval == 15 and pixels.max() == 15
    assert read_pgm(d / "attn" / "view0_global.pgm")[0].shape == (16, 256)
    assert read_pgm(d / "attn" / "view0_local.pgm")[0].shape == (16, 16)


def test_compress_empty_instruction(capsys, inputs):
    d = inputs
    run(capsys, "init", "--out", str(d / "p.cvla"))
    code, out, err = run(capsys, "compress", "--params", str(d / "p.cvla"),
                         "--views", f"{d / 'v0.ctf'},{d / 'v1.ctf'}", "--instruction", str(d / "empty.ctf"),
                         "--out", str(d / "z.ctf"))
    assert code == 2 and out == ""
    assert "no valid instruction tokens" in err


def test_compress_view_shape_mismatch(capsys, inputs, rng):
    d = inputs
    run(capsys, "init", "--out", str(d / "p.cvla"))
    write_tensor(d / "bad.ctf", rng.normal(size=(16, 8, 8)))
    code, out, err = run(capsys, "compress", "--params", str(d / "p.cvla"),
                         "--views", f"{d / 'v0.ctf'},{d / 'bad.ctf'}", "--instruction", str(d / "instr.ctf"),
                         "--out", str(d / "z.ctf"))
    assert code == 2 and "[16, 8, 8]" in err


def test_unreadable_and_corrupt_files(capsys, inputs):
    d = inputs
    run(capsys, "init", "--out", str(d / "p.cvla"))
    args = ["compress", "--params", str(d / "p.cvla"), "--views", f"{d / 'v0.ctf'},{d / 'v1.ctf'}",
            "--instruction", str(d / "instr.ctf"), "--out", str(d / "z.ctf")]
    missing = list(args)
    missing[2] = str(d / "missing.cvla")
    assert run(capsys, *missing)[0] == 3
    (d / "v1.ctf").write_bytes((d / "v1.ctf").read_bytes() + b"\0\0")
    code, out, err = run(capsys, *args)
    assert code == 3 and "trailing" in err and out == ""
    (d / "p.cvla").write_bytes((d / "p.cvla").read_bytes()[:100])
    assert run(capsys, *args)[0] == 3


def test_window_three_lists_valid(capsys):
    code, out, err = run(capsys, "tokens", "--config", '{"w": 3}')
    assert code == 2 and out == ""
    assert "[1, 2, 4, 8, 16]" in err


def test_tokens_reports(capsys, tmp_path):
    cfg = tmp_path / "c.json"
    cfg.write_text(json.dumps({"k": 16, "w": 2, "views": 2}))
    rep = report(run(capsys, "tokens", "--config", str(cfg))[1])
    assert (rep["tokens_compressed"], rep["tokens_baseline"]) == (160, 512)
    assert report(run(capsys, "tokens", "--config", '{"w": 8}')[1])["tokens_compressed"] == 40


def test_unknown_config_field(capsys):
    code, _, err = run(capsys, "tokens", "--config", '{"k": 16, "queries": 4}')
    assert code == 2 and "queries" in err


def test_flops_linear_only(capsys):
    code, out, _ = run(capsys, "flops", "--cost-model", '{"per_token_linear": 1000.0}')
    rep = report(out)
    assert code == 0 and rep["ratio_without_compressor"] == 0.3125
    assert rep["flops_compressor"] > 0 and rep["ratio"] > 0.3125


def test_precision_env_override(capsys, monkeypatch):
    monkeypatch.setenv("COMPRESSOR_PRECISION", "fast32")
    assert report(run(capsys, "tokens")[1])["config"]["precision"] == "fast32"
    monkeypatch.setenv("COMPRESSOR_PRECISION", "bfloat16")
    assert run(capsys, "tokens")[0] == 2


def test_init_deterministic_and_sized(capsys, tmp_path):
    a, b = tmp_path / "a.cvla", tmp_path / "b.cvla"
    rep = report(run(capsys, "init", "--seed", "4", "--out", str(a))[1])
    run(capsys, "init", "--seed", "4", "--out", str(b))
    assert a.read_bytes() == b.read_bytes()
    cfg = CompressionConfig()
    header = 4 + 2 + 4 + len(cfg.to_json().encode())
    names = sum(2 + len(n.encode()) + 1 + 4 * len(s) for n, s in param_shapes(cfg).items())
    assert rep["parameter_count"] == parameter_count(cfg)
    assert rep["bytes"] == a.stat().st_size == header + names + 8 * rep["parameter_count"]


def test_k_mismatch_on_later_load(capsys, inputs):
    d = inputs
    run(capsys, "init", "--config", '{"k": 16}', "--out", str(d / "p.cvla"))
    code, out, err = run(capsys, "compress", "--params", str(d / "p.cvla"), "--config", '{"k": 32}',
                         "--views", f"{d / 'v0.ctf'},{d / 'v1.ctf'}", "--instruction", str(d / "instr.ctf"),
                         "--out", str(d / "z.ctf"))
    assert code == 2 and "k=16" in err and "k=32" in err


def test_certify_oracle(capsys):
    code, out, _ = run(capsys, "certify", "--mode", "oracle")
    rep = report(out)
    assert code == 0 and rep["identity"]["matched"] == 50 and rep["projected"]["matched"] == 50


def test_certify_grad_five_seeds(capsys):
    code, out, _ = run(capsys, "certify", "--mode", "grad", "--seeds", "5")
    rep = report(out)
    assert code == 0 and rep["max_rel_error"] < 1e-4 and rep["passed"]


def test_certify_toy_no_guidance_invariance(capsys):
    code, out, _ = run(capsys, "certify", "--mode", "toy", "--variant", "no_guidance", "--seeds", "1")
    rep = report(out)
    assert code == 0
    assert rep["checks"]["no_guidance_instruction_invariant"] is True
    assert rep["variants"]["no_guidance"]["invariance"]["instruction_invariant"] is True


def test_certify_failure_exit_four(capsys):
    code, out, err = run(capsys, "certify", "--mode", "toy", "--variant", "stc_src", "--seeds", "1",
                         "--steps", "3", "--restarts", "0")
    assert code == 4
    assert report(out)["passed"] is False and "accuracy" in err


def test_unknown_variant(capsys):
    assert run(capsys, "certify", "--mode", "toy", "--variant", "stc_plus")[0] == 2


def test_module_entry_stdout_is_json():
    r = subprocess.run([sys.executable, "-m", "tokencompress.cli", "tokens", "--config", '{"k": 8}'],
                       capture_output=True, text=True, check=False)
    assert r.returncode == 0 and r.stderr == ""
    assert json.loads(r.stdout)["tokens_compressed"] == 144
