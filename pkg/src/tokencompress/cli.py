"""Command-line entry point. Reports go to stdout as JSON; everything else to stderr."""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from pathlib import Path

from . import accounting, pipeline, tensorfile, verification
from .conditioning import InstructionEmbedding
from .errors import CertificationError, ContractError, FormatError
from .numeric import PRECISIONS
from .pipeline import CompressionConfig

log = logging.getLogger("tokencompress")

EXIT_OK, EXIT_CONTRACT, EXIT_IO, EXIT_CERT = 0, 2, 3, 4
PRECISION_ENV = "COMPRESSOR_PRECISION"


def _read_json(source: str) -> dict:
    """Inline JSON (starting with '{') or a path to a JSON file."""
    text = source if source.lstrip().startswith("{") else Path(source).read_text()
    try:
        data = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ContractError(f"invalid JSON in {source!r}: {exc}") from exc
    if not isinstance(data, dict):
        raise ContractError("expected a JSON object")
    return data


def load_config(source: str | None, default: CompressionConfig | None = None) -> CompressionConfig:
    config = CompressionConfig.from_dict(_read_json(source)) if source else (default or CompressionConfig())
    override = os.environ.get(PRECISION_ENV)
    if override:
        if override not in PRECISIONS:
            raise ContractError(f"{PRECISION_ENV}={override!r} is not one of {sorted(PRECISIONS)}")
        config = config.replace(precision=override)
    return config


def _emit(report: dict):
    sys.stdout.write(json.dumps(report, sort_keys=True) + "\n")


def cmd_compress(args) -> int:
    config = load_config(args.config)
    params = pipeline.load_params(args.params, expected=config)
    views = [tensorfile.read_tensor(p) for p in args.views.split(",") if p]
    instr = tensorfile.read_tensor(args.instruction)
    if instr.ndim == 1:
        instr = instr[None, :]
    if instr.ndim != 2:
        raise ContractError(f"instruction must be [T, d_lang], got dims {list(instr.shape)}")
    out = pipeline.compress(params, views, InstructionEmbedding(instr), config)
    tensorfile.write_tensor(args.out, out.z)
    report = {"out": str(args.out), "dims": list(out.z.shape), "config": config.to_dict()}
    if args.attn_dir:
        files = tensorfile.export_attention(args.attn_dir, out.attn_global, out.attn_local, config)
        report["attention_files"] = [str(f) for f in files]
    _emit(report)
    return EXIT_OK


def cmd_tokens(args) -> int:
    _emit(accounting.token_report(load_config(args.config)))
    return EXIT_OK


def cmd_flops(args) -> int:
    config = load_config(args.config)
    model = accounting.CostModel.from_dict(_read_json(args.cost_model))
    _emit(accounting.pipeline_flops(model, config))
    return EXIT_OK


def _variants(arg):
    if not arg:
        return None
    names = tuple(v for v in arg.split(",") if v)
    bad = [v for v in names if v not in pipeline.VARIANTS]
    if bad:
        raise ContractError(f"unknown variant(s) {bad}; valid: {list(pipeline.VARIANTS)}")
    return names


def cmd_certify(args) -> int:
    if args.mode == "toy":
        first, count = verification.HELDOUT_SEEDS[0], len(verification.HELDOUT_SEEDS)
    else:
        first, count = 0, 5
    first = first if args.first_seed is None else args.first_seed
    seeds = range(first, first + (count if args.seeds is None else args.seeds))
    variants = _variants(args.variant)
    if args.mode == "grad":
        config = load_config(args.config, verification.DESK_CONFIG).replace(precision="verify64")
        report = verification.certify_gradients(config, seeds, variants or pipeline.VARIANTS)
        report.pop("runs")
    elif args.mode == "oracle":
        plain = verification.check_attention_oracle(args.instances, first)
        projected = verification.check_attention_oracle(args.instances, first, projections=True)
        report = {"mode": "oracle", "identity": plain, "projected": projected,
                  "passed": plain["passed"] and projected["passed"]}
    else:
        config = load_config(args.config, verification.TOY_CONFIG).replace(precision="verify64")
        settings = verification.TrainerSettings(steps=args.steps, restarts=args.restarts)
        report = verification.certify_toy(variants or verification.ABLATION_VARIANTS, seeds, settings, config)
    _emit(report)
    verification.require(report)
    return EXIT_OK


def cmd_init(args) -> int:
    config = load_config(args.config)
    params = pipeline.init_params(config, args.seed)
    data = pipeline.params_to_bytes(params)
    Path(args.out).write_bytes(data)
    _emit({"out": str(args.out), "parameter_count": pipeline.parameter_count(config),
           "bytes": len(data), "config": config.to_dict()})
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="tokencompress", description=__doc__)
    ap.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = ap.add_subparsers(dest="command", required=True)

    p = sub.add_parser("compress", help="compress view tensors into Z")
    p.add_argument("--params", required=True)
    p.add_argument("--config")
    p.add_argument("--views", required=True, help="comma-separated CTF files, one per view")
    p.add_argument("--instruction", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--attn-dir")
    p.set_defaults(func=cmd_compress)

    p = sub.add_parser("tokens", help="token count report")
    p.add_argument("--config")
    p.set_defaults(func=cmd_tokens)

    p = sub.add_parser("flops", help="FLOPs report under a cost model")
    p.add_argument("--config")
    p.add_argument("--cost-model", required=True, help="JSON file or inline object")
    p.set_defaults(func=cmd_flops)

    p = sub.add_parser("certify", help="gradient, oracle or toy-task certification")
    p.add_argument("--mode", choices=("grad", "oracle", "toy"), required=True)
    p.add_argument("--seeds", type=int, help="number of seeds (grad: 5, toy: 10)")
    p.add_argument("--first-seed", type=int, help="grad and oracle: 0, toy: the held-out range start")
    p.add_argument("--variant", help="comma-separated variants (default: all relevant)")
    p.add_argument("--config")
    p.add_argument("--instances", type=int, default=50)
    p.add_argument("--steps", type=int, default=2000)
    p.add_argument("--restarts", type=int, default=1)
    p.set_defaults(func=cmd_certify)

    p = sub.add_parser("init", help="write freshly initialized parameters")
    p.add_argument("--config")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_init)
    return ap


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        stream=sys.stderr, format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except CertificationError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CERT
    except ContractError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONTRACT
    except (FormatError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_IO


if __name__ == "__main__":
    sys.exit(main())
