"""Command-line entry point: synth, train, evaluate, generate, gradcheck.

Every command is deterministic given its flags, seed, and input files.
Configuration comes from an optional ``key = value`` file with flag
overrides (flags win); the TOKMOE_SEED environment variable overrides the
seed from both. Errors print one ``error[<code>]: message`` line on
stderr; exit code 0 means success, 2 bad usage, 1 any other failure.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import os
import sys
from pathlib import Path

from . import checkpoint as ckpt
from . import data as D
from . import metrics as MX
from . import model as M
from . import tensor as T
from . import training as TR
from .config import (
    RunConfig,
    SchemeConfig,
    VariantConfig,
    parse_config_file,
    write_config_file,
)
from .errors import ConfigError, TokmoeError, UsageError

GRADCHECK_TOLERANCE = 1e-4
GRADCHECK_MAX_HIDDEN = 8


def _sha256(path: Path) -> str:
    return hashlib.sha256(path.read_bytes()).hexdigest()


def _combine_mode(scheme_name: str, params: M.ModelParams) -> str:
    if params.num_decoders == 1 or scheme_name == "S3":
        return M.COMBINE_CHAIR
    return M.COMBINE_MIXTURE


def _generated_tokens(params: M.ModelParams, vocab: D.Vocabulary, context_ids, max_len, mode):
    ids = M.greedy_decode(params, context_ids, max_len, combine=mode)
    return vocab.decode_ids(ids)


# ---------------------------------------------------------------------------
# synth


def cmd_synth(args: argparse.Namespace) -> int:
    if args.intents < 2:
        raise UsageError("--intents must be at least 2")
    if args.per_intent < 1:
        raise UsageError("--per-intent must be at least 1")
    spec = D.SynthSpec(
        intents=args.intents,
        shared_vocab=args.shared_vocab,
        per_intent_vocab=args.per_intent_vocab,
        samples_per_intent=args.per_intent,
        context_len=(args.context_min, args.context_max),
        response_len=(args.response_min, args.response_max),
        seed=args.seed,
    )
    train, valid, test = D.generate_synthetic_splits(spec)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    for corpus, name in ((train, "train"), (valid, "valid"), (test, "test")):
        D.save_corpus_jsonl(corpus, out / f"{name}.jsonl")
        print(f"{name}: {len(corpus)} samples -> {out / (name + '.jsonl')}")
    return 0


# ---------------------------------------------------------------------------
# train


def _build_run_config(args: argparse.Namespace) -> RunConfig:
    mapping: dict[str, str] = {}
    if args.config:
        mapping.update(parse_config_file(args.config))
    overrides = {
        "scheme": args.scheme,
        "variant": args.variant,
        "hidden_size": args.hidden_size,
        "embedding_size": args.embedding_size,
        "cell_kind": args.cell,
        "vocab_cap": args.vocab_cap,
        "batch_size": args.batch_size,
        "epochs": args.epochs,
        "seed": args.seed,
        "train_path": args.train,
        "valid_path": args.valid,
        "test_path": args.test,
        "out_dir": args.out,
        "max_gen_len": args.max_gen_len,
    }
    if getattr(args, "no_attention", False):
        overrides["attention_enabled"] = "false"
    if getattr(args, "single_module", False):
        overrides["single_module"] = "true"
    for key, value in overrides.items():
        if value is not None:
            mapping[key] = str(value)
    config = RunConfig.from_mapping(mapping)
    env_seed = os.environ.get("TOKMOE_SEED")
    if env_seed is not None:
        try:
            config.seed = int(env_seed)
        except ValueError:
            raise ConfigError(f"TOKMOE_SEED must be an integer, got {env_seed!r}") from None
    if args.lambda_ is not None:
        scheme = config.scheme_config()
        if scheme.lambda_mode == "learnable":
            raise ConfigError(f"scheme {config.scheme} learns lambda; --lambda is not accepted")
        if abs(args.lambda_ - scheme.lambda_value) > 1e-12:
            raise ConfigError(
                f"scheme {config.scheme} fixes lambda = {scheme.lambda_value}; got --lambda {args.lambda_}"
            )
    return config


def _prepare_training(config: RunConfig):
    if not config.train_path:
        raise ConfigError("train_path not set (use --train or the config file)")
    train_corpus = D.load_corpus_jsonl(config.train_path, split="train")
    vocab = D.Vocabulary.build(train_corpus, cap=config.vocab_cap)
    encoded = D.encode_corpus(vocab, train_corpus)
    partition = TR.partition_by_intent(train_corpus)
    intents = sorted(partition)
    expert_of = TR.expert_index_map(intents)
    num_experts = 0 if config.single_module else len(intents)
    params = M.init_model(len(vocab), num_experts, config.variant_config(), config.seed)
    scheme = config.scheme_config()
    weights = None
    if scheme.scheme == "S1" and num_experts > 0:
        weights = TR.SchemeWeights.fresh(num_experts)
    return train_corpus, vocab, encoded, intents, expert_of, params, scheme, weights


def cmd_train(args: argparse.Namespace) -> int:
    config = _build_run_config(args)
    train_corpus, vocab, encoded, intents, expert_of, params, scheme, weights = _prepare_training(config)
    opt = config.optimizer_config()

    valid_scorer = None
    if config.valid_path:
        valid_corpus = D.load_corpus_jsonl(config.valid_path, split="valid")
    else:
        valid_corpus = None
    if valid_corpus is not None and len(valid_corpus) > 0:
        valid_encoded = D.encode_corpus(vocab, valid_corpus)
        mode = _combine_mode(config.scheme, params)

        def valid_scorer(p: M.ModelParams) -> float:
            generated = [
                _generated_tokens(p, vocab, s.context_ids, config.max_gen_len, mode)
                for s in valid_encoded
            ]
            return MX.build_report([s.sample for s in valid_encoded], generated).overall.score

    def progress(record: TR.EpochRecord) -> None:
        report = record.report
        line = (
            f"epoch {record.epoch:>3}  total {report.total:.4f}  "
            f"chair {report.chair_loss:.4f}  experts "
            + "/".join(f"{v:.4f}" for v in report.expert_losses)
        )
        if record.valid_score is not None:
            line += f"  val_score {record.valid_score:.2f}"
        print(line)

    result = TR.train_run(
        params, encoded, scheme, opt, config.epochs, config.seed, expert_of,
        weights=weights, valid_scorer=valid_scorer, progress=progress,
    )

    accuracy = TR.teacher_forced_accuracy(params, encoded, scheme)
    print(f"train teacher-forced accuracy: {accuracy:.4f}")

    out_dir = Path(config.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    ckpt_path = out_dir / "model.ckpt"
    extra = weights.slots() if weights is not None else None
    ckpt.save_model(params, ckpt_path, vocab.id_to_token, intents, config.scheme, extra_slots=extra)
    write_config_file(config, out_dir / "config.snapshot")

    checksums = {"train": _sha256(Path(config.train_path))}
    if config.valid_path:
        checksums["valid"] = _sha256(Path(config.valid_path))
    manifest = {
        "config": config.to_mapping(),
        "seed": config.seed,
        "corpus_checksums": checksums,
        "checkpoint": ckpt_path.name,
        "best_epoch": result.best_epoch,
        "best_valid_score": result.best_score,
        "train_accuracy": accuracy,
        "history": [
            {
                "epoch": r.epoch,
                "total": r.report.total,
                "chair_loss": r.report.chair_loss,
                "expert_losses": r.report.expert_losses,
                "valid_score": r.valid_score,
            }
            for r in result.history
        ],
    }
    manifest_path = out_dir / "manifest.json"
    tmp = manifest_path.with_name(manifest_path.name + ".tmp")
    tmp.write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    tmp.replace(manifest_path)
    print(f"checkpoint: {ckpt_path}")
    print(f"manifest:   {manifest_path}")
    return 0


# ---------------------------------------------------------------------------
# evaluate


def cmd_evaluate(args: argparse.Namespace) -> int:
    params, meta = ckpt.load_model(args.checkpoint)
    vocab = D.Vocabulary(meta["tokens"], cap=max(len(meta["tokens"]), 4))
    corpus = D.load_corpus_jsonl(args.corpus, split="test")
    encoded = D.encode_corpus(vocab, corpus)
    mode = _combine_mode(meta["scheme"], params)
    generated = [
        _generated_tokens(params, vocab, s.context_ids, args.max_len, mode) for s in encoded
    ]
    report = MX.build_report(corpus.samples, generated)
    print(report.to_json() if args.json else report.to_table())
    return 0


# ---------------------------------------------------------------------------
# generate


def cmd_generate(args: argparse.Namespace) -> int:
    tokens = args.context.split()
    if not tokens:
        raise UsageError("context must contain at least one token")
    params, meta = ckpt.load_model(args.checkpoint)
    vocab = D.Vocabulary(meta["tokens"], cap=max(len(meta["tokens"]), 4))
    mode = _combine_mode(meta["scheme"], params)
    ids, betas = M.greedy_decode(
        params, vocab.encode_tokens(tokens), args.max_len, combine=mode, collect_beta=True
    )
    words = vocab.decode_ids(ids)
    print(" ".join(words))
    if args.trace:
        names = [params.decoder_name(i) for i in range(params.num_decoders)]
        print("# gating weights per generated token (" + ", ".join(names) + ")")
        for token_id, beta in zip(ids, betas):
            beta_text = " ".join(f"{b:.4f}" for b in beta)
            print(f"{vocab.id_to_token[token_id]:<16} {beta_text}")
    return 0


# ---------------------------------------------------------------------------
# gradcheck


def _gradcheck_samples(vocab_size: int, num_intents: int) -> tuple[list[D.EncodedSample], dict[str, int]]:
    intents = [f"intent{i}" for i in range(num_intents)]
    samples = []
    for i, intent in enumerate(intents):
        base = 4 + (i % max(vocab_size - 4, 1))
        ctx = [base, 4 + ((base + 1) % (vocab_size - 4)), 4]
        resp = [4 + ((base + 2) % (vocab_size - 4)), base, 3]  # ends on EOS id
        raw = D.Sample([str(t) for t in ctx], [str(t) for t in resp], intent)
        samples.append(D.EncodedSample(ctx, resp, intent, raw))
    return samples, TR.expert_index_map(intents)


def _gradcheck_variants(hidden: int) -> list[tuple[str, VariantConfig]]:
    small = dict(embedding_size=3, attn_size=2, gate_hidden=4, gate_out=3)
    return [
        ("base", VariantConfig(hidden_size=hidden, **small)),
        ("V1", VariantConfig(hidden_size=hidden, attention_enabled=False, **small)),
        ("V2", VariantConfig(hidden_size=hidden, cell_kind="gru", **small)),
        ("V3", VariantConfig(hidden_size=max(hidden - 1, 2), **small)),
    ]


def run_gradcheck(
    num_experts: int = 2, hidden: int = 3, vocab_size: int = 6, seed: int = 0,
    epsilon: float = 1e-5,
) -> dict[str, dict[str, float]]:
    """Gradient-oracle sweep over every scheme x variant combination."""
    if hidden > GRADCHECK_MAX_HIDDEN:
        raise ConfigError(f"gradcheck refuses hidden size {hidden} > {GRADCHECK_MAX_HIDDEN}")
    samples, expert_of = _gradcheck_samples(vocab_size, num_experts)
    results: dict[str, dict[str, float]] = {}
    for scheme_name in ("S1", "S2", "S3", "S4"):
        scheme = SchemeConfig.from_name(scheme_name)
        per_variant: dict[str, float] = {}
        for variant_name, variant in _gradcheck_variants(hidden):
            params = M.init_model(vocab_size, num_experts, variant, seed)
            weights = TR.SchemeWeights.fresh(num_experts) if scheme_name == "S1" else None
            per_variant[variant_name] = TR.grad_check(
                params, samples, scheme, expert_of, weights=weights, epsilon=epsilon
            )
        results[scheme_name] = per_variant
    return results


def cmd_gradcheck(args: argparse.Namespace) -> int:
    if args.inject_bug:
        # Test fixture: corrupt one backward rule so the oracle must fail.
        original = T.tanh_backward
        T.tanh_backward = lambda grad, out: 2.0 * original(grad, out)
    try:
        results = run_gradcheck(
            num_experts=args.experts, hidden=args.hidden,
            vocab_size=args.vocab_size, seed=args.seed, epsilon=args.epsilon,
        )
    finally:
        if args.inject_bug:
            T.tanh_backward = original
    worst = 0.0
    for scheme_name, per_variant in results.items():
        scheme_worst = max(per_variant.values())
        worst = max(worst, scheme_worst)
        status = "ok" if scheme_worst < GRADCHECK_TOLERANCE else "FAIL"
        detail = " ".join(f"{v}={err:.2e}" for v, err in per_variant.items())
        print(f"{scheme_name} {status} max_rel_err={scheme_worst:.2e} ({detail})")
    print(f"overall max relative error: {worst:.2e}")
    return 0 if worst < GRADCHECK_TOLERANCE else 1


# ---------------------------------------------------------------------------
# Argument parsing


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="tokmoe",
        description="Token-level mixture-of-experts dialogue generator (desk scale)",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="emit a seeded synthetic multi-intent corpus")
    p.add_argument("--out", required=True, help="output directory for train/valid/test.jsonl")
    p.add_argument("--intents", type=int, default=3)
    p.add_argument("--per-intent", type=int, default=20, dest="per_intent")
    p.add_argument("--shared-vocab", type=int, default=14, dest="shared_vocab")
    p.add_argument("--per-intent-vocab", type=int, default=10, dest="per_intent_vocab")
    p.add_argument("--context-min", type=int, default=4, dest="context_min")
    p.add_argument("--context-max", type=int, default=8, dest="context_max")
    p.add_argument("--response-min", type=int, default=5, dest="response_min")
    p.add_argument("--response-max", type=int, default=9, dest="response_max")
    p.add_argument("--seed", type=int, default=13)
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("train", help="train a model and write checkpoint + manifest")
    p.add_argument("--config", help="key = value config file")
    p.add_argument("--scheme", choices=("S1", "S2", "S3", "S4"))
    p.add_argument("--variant", choices=("V1", "V2", "V3"))
    p.add_argument("--train", help="training corpus (jsonl)")
    p.add_argument("--valid", help="validation corpus (jsonl)")
    p.add_argument("--test", help="test corpus path recorded in the manifest")
    p.add_argument("--out", help="run directory")
    p.add_argument("--epochs", type=int)
    p.add_argument("--seed", type=int)
    p.add_argument("--hidden-size", type=int, dest="hidden_size")
    p.add_argument("--embedding-size", type=int, dest="embedding_size")
    p.add_argument("--cell", choices=("lstm", "gru"))
    p.add_argument("--no-attention", action="store_true", dest="no_attention")
    p.add_argument("--single-module", action="store_true", dest="single_module",
                   help="one decoder, no mixture (scheme S3 only)")
    p.add_argument("--vocab-cap", type=int, dest="vocab_cap")
    p.add_argument("--batch-size", type=int, dest="batch_size")
    p.add_argument("--max-gen-len", type=int, dest="max_gen_len")
    p.add_argument("--lambda", type=float, dest="lambda_",
                   help="must match the scheme's fixed value; rejected otherwise")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("evaluate", help="greedy-decode a corpus and report metrics")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--corpus", required=True)
    p.add_argument("--max-len", type=int, default=40, dest="max_len")
    p.add_argument("--json", action="store_true")
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("generate", help="generate a response for one context")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--context", required=True, help="whitespace-tokenized context")
    p.add_argument("--max-len", type=int, default=40, dest="max_len")
    p.add_argument("--trace", action="store_true", help="print per-token gating weights")
    p.set_defaults(func=cmd_generate)

    p = sub.add_parser("gradcheck", help="finite-difference gradient oracle, all schemes")
    p.add_argument("--experts", type=int, default=2)
    p.add_argument("--hidden", type=int, default=3)
    p.add_argument("--vocab-size", type=int, default=6, dest="vocab_size")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--epsilon", type=float, default=1e-5)
    p.add_argument("--inject-bug", action="store_true", dest="inject_bug",
                   help=argparse.SUPPRESS)
    p.set_defaults(func=cmd_gradcheck)

    return parser


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except UsageError as exc:
        print(f"error[{exc.code}]: {exc}", file=sys.stderr)
        return 2
    except TokmoeError as exc:
        print(f"error[{exc.code}]: {exc}", file=sys.stderr)
        return 1
    except FileNotFoundError as exc:
        print(f"error[io]: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    raise SystemExit(main())
