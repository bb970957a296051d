"""Command-line entry point.

Subcommands: forge, probe, train-adapter, grad-check, eval, validate.
Exit codes: 0 success, 1 domain error, 2 usage error. Diagnostics go to
stderr; data goes to files or stdout. Configuration resolves as config
file < flags < environment (DESTA_API_TOKEN, DESTA_LOG).
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from pathlib import Path

from . import __version__
from .errors import DestaError

log = logging.getLogger("desta")

LOG_ENV = "DESTA_LOG"


def _setup_logging():
    level_name = os.environ.get(LOG_ENV, "WARNING").upper()
    level = getattr(logging, level_name, logging.WARNING)
    logging.basicConfig(
        stream=sys.stderr,
        level=level,
        format="%(asctime)s %(name)s %(levelname)s %(message)s",
    )


def _load_config_section(path: str | None, section: str) -> dict:
    if not path:
        return {}
    with open(path, encoding="utf-8") as fh:
        config = json.load(fh)
    if not isinstance(config, dict):
        raise DestaError(f"config file {path} must hold a JSON object")
    return dict(config.get(section) or {})


def _merge_config(section: dict, args: argparse.Namespace, keys: list[str]) -> dict:
    """Config file < flags. Returns the resolved mapping for the keys."""
    resolved = {}
    for key in keys:
        flag_value = getattr(args, key, None)
        if flag_value is not None:
            resolved[key] = flag_value
        elif key in section:
            resolved[key] = section[key]
    return resolved


def _parse_weights(text: str) -> dict[str, float]:
    weights = {}
    for part in text.split(","):
        if "=" not in part:
            raise DestaError(f"bad weight {part!r}; expected domain=value")
        domain, value = part.split("=", 1)
        weights[domain.strip()] = float(value)
    return weights


def _parse_dims(text: str):
    from .adapter_core import AdapterDims

    mapping = {
        "d": "d",
        "dp": "dp",
        "N": "n_queries",
        "B": "blocks",
        "H": "heads",
        "V": "vocab",
        "K": None,  # number of tapped layers
    }
    kwargs = {}
    n_layers = None
    for part in text.split(","):
        if "=" not in part:
            raise DestaError(f"bad dim {part!r}; expected name=value")
        name, value = part.split("=", 1)
        name = name.strip()
        if name not in mapping:
            raise DestaError(f"unknown dim {name!r} (expected {sorted(mapping)})")
        if name == "K":
            n_layers = int(value)
        else:
            kwargs[mapping[name]] = int(value)
    if n_layers is not None:
        kwargs["layers"] = tuple(range(1, n_layers + 1))
    return AdapterDims(**kwargs)


def _make_backend(resolved: dict):
    from .llm_backend import MockBackend, RemoteBackend

    kind = resolved.get("backend", "mock")
    if kind == "mock":
        return MockBackend(
            seed=int(resolved.get("mock_seed", 0)),
            vocab_size=int(resolved.get("mock_vocab", 64)),
            fail_substring=resolved.get("fail_substring"),
        )
    if kind == "remote":
        url = resolved.get("remote_url")
        model = resolved.get("model")
        if not url or not model:
            raise DestaError("remote backend needs remote_url and model")
        token = os.environ.get("DESTA_API_TOKEN") or resolved.get("api_token")
        return RemoteBackend(url, model, api_token=token)
    raise DestaError(f"unknown backend {kind!r}")


_BACKEND_KEYS = [
    "backend", "mock_seed", "mock_vocab", "fail_substring", "remote_url",
    "model", "api_token",
]
_DECODING_KEYS = ["temperature", "top_p", "max_new_tokens"]


def _make_decoding(resolved: dict):
    from .llm_backend import DecodingConfig

    kwargs = {}
    for key in _DECODING_KEYS:
        if key in resolved:
            kwargs[key] = resolved[key]
    return DecodingConfig(**kwargs)


def _add_backend_flags(parser: argparse.ArgumentParser, name: str):
    parser.add_argument(f"--{name}", choices=["mock", "remote"], dest="backend")
    parser.add_argument("--mock-seed", type=int, dest="mock_seed")
    parser.add_argument("--mock-vocab", type=int, dest="mock_vocab")
    parser.add_argument("--fail-substring", dest="fail_substring", help=argparse.SUPPRESS)
    parser.add_argument("--remote-url", dest="remote_url")
    parser.add_argument("--model", dest="model")
    parser.add_argument("--temperature", type=float)
    parser.add_argument("--top-p", type=float, dest="top_p")
    parser.add_argument("--max-new-tokens", type=int, dest="max_new_tokens")


def _cmd_forge(args) -> int:
    from .forge_pipeline import BalanceConfig, build_plan, load_initial_pairs, run_forge
    from .prompt_pool import load_pool

    section = _load_config_section(args.config, "forge")
    keys = [
        "metadata", "pool", "seed", "weights", "prompts_per_pair", "out",
        "parallelism", "shard_size", "deadletter_threshold",
    ] + _BACKEND_KEYS + _DECODING_KEYS
    resolved = _merge_config(section, args, keys)
    for required in ("metadata", "pool", "out"):
        if required not in resolved:
            raise DestaError(f"forge needs --{required.replace('_', '-')}")
    weights = resolved.get("weights") or "speech=0.77,sound=0.14,music=0.07"
    if isinstance(weights, str):
        weights = _parse_weights(weights)
    resolved["weights"] = weights

    pairs = load_initial_pairs(resolved["metadata"])
    pool = load_pool(resolved["pool"])
    present = {p.domain for p in pairs}
    weights = {d: w for d, w in weights.items() if d in present} or dict(weights)
    cfg = BalanceConfig(weights, int(resolved.get("prompts_per_pair", 1)))
    seed = int(resolved.get("seed", 0))
    plan = build_plan(pairs, pool, cfg, seed)
    backend = _make_backend(resolved)
    decoding = _make_decoding(resolved)
    echo = {
        k: v for k, v in sorted(resolved.items())
        if k not in ("parallelism", "api_token")
    }
    manifest = run_forge(
        plan,
        backend,
        decoding,
        resolved["out"],
        parallelism=int(resolved.get("parallelism", 1)),
        shard_size=int(resolved.get("shard_size", 10_000)),
        deadletter_threshold=float(resolved.get("deadletter_threshold", 0.01)),
        resume_run=bool(args.resume),
        resolved_config=echo,
    )
    realized = manifest.get("realized", {})
    print(
        f"forged {realized.get('triplets', 0)} triplets "
        f"({realized.get('deadletters', 0)} dead-lettered) into {resolved['out']}"
    )
    return 0


def _cmd_probe(args) -> int:
    from .forge_pipeline import read_shards
    from .mismatch_probe import compare_sources, corpus_perplexity, write_report

    section = _load_config_section(args.config, "probe")
    keys = ["out"] + _BACKEND_KEYS
    resolved = _merge_config(section, args, keys)
    resolved.setdefault("backend", resolved.pop("scorer", "mock"))
    datasets = args.dataset or section.get("datasets")
    if not datasets:
        raise DestaError("probe needs at least one --dataset label=path")
    labeled = []
    for spec in datasets:
        if "=" not in spec:
            raise DestaError(f"bad dataset {spec!r}; expected label=path")
        label, path = spec.split("=", 1)
        labeled.append((label, read_shards(path)))
    scorer = _make_backend(resolved)
    if len(labeled) == 1:
        report = corpus_perplexity(scorer, labeled[0][1], label=labeled[0][0])
        payload = report.to_dict()
        from .mismatch_probe import CONTEXT_CONVENTION

        payload["context_convention"] = CONTEXT_CONVENTION
        text = json.dumps(payload, indent=2, sort_keys=True)
        if resolved.get("out"):
            Path(resolved["out"]).write_text(text + "\n", encoding="utf-8")
        else:
            print(text)
        return 0
    table = compare_sources(scorer, labeled)
    if resolved.get("out"):
        write_report(table, resolved["out"])
    print(table.render())
    return 0


def _cmd_train_adapter(args) -> int:
    from .adapter_core import TrainConfig, load_fixture, make_planted_fixture, train_adapter

    section = _load_config_section(args.config, "train_adapter")
    keys = ["fixture", "dims", "steps", "seed", "out", "lr", "warmup_steps", "early_stop_loss"]
    resolved = _merge_config(section, args, keys)
    fixture_spec = resolved.get("fixture")
    if not fixture_spec:
        raise DestaError("train-adapter needs --fixture <file.npz | planted:seed=N[,n=M]>")
    dims = _parse_dims(resolved["dims"]) if resolved.get("dims") else None
    if str(fixture_spec).startswith("planted:"):
        params = dict(
            part.split("=", 1) for part in str(fixture_spec)[len("planted:") :].split(",")
        )
        fixture = make_planted_fixture(
            seed=int(params.get("seed", 0)),
            n_samples=int(params.get("n", 32)),
            dims=dims,
        )
    else:
        fixture = load_fixture(fixture_spec)
    cfg = TrainConfig(
        steps=int(resolved.get("steps", 2000)),
        base_lr=float(resolved.get("lr", 1e-2)),
        warmup_steps=int(resolved.get("warmup_steps", 100)),
        seed=int(resolved.get("seed", 0)),
        early_stop_loss=(
            float(resolved["early_stop_loss"]) if resolved.get("early_stop_loss") else None
        ),
    )
    result = train_adapter(
        fixture.batches,
        fixture.decoder,
        fixture.dims,
        cfg,
        checkpoint_path=resolved.get("out"),
    )
    final = result.loss_log[-1]
    print(
        f"trained {result.steps_run} steps; final loss {final:.6f}; "
        f"worst layer-weight sum error {result.max_weight_sum_error:.2e}"
    )
    if resolved.get("out"):
        print(f"checkpoint written to {resolved['out']}")
    return 0


def _cmd_grad_check(args) -> int:
    from .adapter_core import grad_check

    failures = 0
    for offset in range(args.count):
        report = grad_check(args.seed + offset, eps=args.eps,
                            tolerance=args.tolerance, perturb=args.perturb)
        print(f"seed {args.seed + offset}: max rel error {report.max_rel_error:.3e} "
              f"-> {'PASS' if report.passed else 'FAIL'}")
        if not report.passed:
            failures += 1
    return 1 if failures else 0


def _cmd_eval(args) -> int:
    from .eval_harness import (
        EvalReport,
        accuracy_report,
        forgetting_rate,
        if_rate,
        load_response_file,
        relative_scores,
    )

    section = _load_config_section(args.config, "eval")
    keys = ["responses", "backbone_ifrate", "baseline", "out", "extract_choice"]
    resolved = _merge_config(section, args, keys)
    if not resolved.get("responses"):
        raise DestaError("eval needs --responses <file>")
    items, constrained = load_response_file(resolved["responses"])
    report = EvalReport(
        accuracy_report(items, extract_choice=bool(resolved.get("extract_choice")))
    )
    if constrained:
        report.ifrate = if_rate(constrained)
        if resolved.get("backbone_ifrate") is not None:
            report.delta = forgetting_rate(report.ifrate, float(resolved["backbone_ifrate"]))
    if resolved.get("baseline"):
        with open(resolved["baseline"], encoding="utf-8") as fh:
            baseline = {str(k): float(v) for k, v in json.load(fh).items()}
        report.relative = relative_scores(report.accuracy.per_category, baseline)
    text = json.dumps(report.to_dict(), indent=2, sort_keys=True)
    if resolved.get("out"):
        Path(resolved["out"]).write_text(text + "\n", encoding="utf-8")
    else:
        print(text)
    return 0


def _cmd_validate(args) -> int:
    from .description_schema import record_warnings, serialize_description
    from .forge_pipeline import load_initial_pairs, read_shards
    from .prompt_pool import load_pool

    if not (args.metadata or args.pool or args.shards):
        raise DestaError("validate needs --metadata, --pool, or --shards")
    if args.metadata:
        pairs = load_initial_pairs(args.metadata)
        warning_count = 0
        with open(args.metadata, encoding="utf-8") as fh:
            for line in fh:
                if line.strip():
                    for warning in record_warnings(json.loads(line)):
                        log.warning("%s: %s", args.metadata, warning)
                        warning_count += 1
        for pair in pairs:
            serialize_description(pair.description)
        print(f"{args.metadata}: {len(pairs)} pairs OK ({warning_count} warnings)")
    if args.pool:
        pool = load_pool(args.pool)
        print(f"{args.pool}: {len(pool)} prompts OK")
    if args.shards:
        triplets = read_shards(args.shards)
        print(f"{args.shards}: {len(triplets)} triplets OK")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="desta",
        description="Self-generated audio-text alignment toolkit",
    )
    parser.add_argument("--version", action="version", version=f"desta {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("forge", help="plan and generate a sharded triplet dataset")
    p.add_argument("--metadata")
    p.add_argument("--pool")
    p.add_argument("--seed", type=int)
    p.add_argument("--weights")
    p.add_argument("--prompts-per-pair", type=int, dest="prompts_per_pair")
    p.add_argument("--out")
    p.add_argument("--parallelism", type=int)
    p.add_argument("--shard-size", type=int, dest="shard_size")
    p.add_argument("--deadletter-threshold", type=float, dest="deadletter_threshold")
    p.add_argument("--resume", action="store_true")
    p.add_argument("--config")
    _add_backend_flags(p, "backend")
    p.set_defaults(func=_cmd_forge)

    p = sub.add_parser("probe", help="corpus perplexity of training targets")
    p.add_argument("--dataset", action="append", metavar="LABEL=PATH")
    p.add_argument("--out")
    p.add_argument("--config")
    _add_backend_flags(p, "scorer")
    p.set_defaults(func=_cmd_probe)

    p = sub.add_parser("train-adapter", help="train the toy modality adapter")
    p.add_argument("--fixture")
    p.add_argument("--dims", help="e.g. d=16,dp=16,N=4,B=2,H=2")
    p.add_argument("--steps", type=int)
    p.add_argument("--seed", type=int)
    p.add_argument("--lr", type=float)
    p.add_argument("--warmup-steps", type=int, dest="warmup_steps")
    p.add_argument("--early-stop-loss", type=float, dest="early_stop_loss")
    p.add_argument("--out")
    p.add_argument("--config")
    p.set_defaults(func=_cmd_train_adapter)

    p = sub.add_parser("grad-check", help="finite-difference gradient validation")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--count", type=int, default=1)
    p.add_argument("--eps", type=float, default=1e-5)
    p.add_argument("--tolerance", type=float, default=1e-4)
    p.add_argument("--perturb", action="store_true", help=argparse.SUPPRESS)
    p.set_defaults(func=_cmd_grad_check)

    p = sub.add_parser("eval", help="metrics over a response file")
    p.add_argument("--responses")
    p.add_argument("--backbone-ifrate", type=float, dest="backbone_ifrate")
    p.add_argument("--baseline")
    p.add_argument("--extract-choice", action="store_true", dest="extract_choice")
    p.add_argument("--out")
    p.add_argument("--config")
    p.set_defaults(func=_cmd_eval)

    p = sub.add_parser("validate", help="schema-check metadata/pool/shard files")
    p.add_argument("--metadata")
    p.add_argument("--pool")
    p.add_argument("--shards")
    p.set_defaults(func=_cmd_validate)

    return parser


def dispatch(argv: list[str]) -> int:
    """Run one CLI invocation; returns the process exit code."""
    _setup_logging()
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    try:
        return args.func(args)
    except DestaError as exc:
        log.error("%s", exc)
        print(f"error: {exc}", file=sys.stderr)
        return 1


def main():
    sys.exit(dispatch(sys.argv[1:]))


if __name__ == "__main__":
    main()
