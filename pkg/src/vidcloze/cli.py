"""Command-line entry point.

Subcommands cover the whole experiment lifecycle: generate data,
pretrain the text model, graft and train the visual side, evaluate,
finetune, inspect attention and parameter budgets, check gradients, and
sweep the ablation grid. Exit codes: 0 success, 1 usage error, 2
runtime failure.
"""

from __future__ import annotations

import argparse
import os
import sys

import numpy as np

from . import bilm as lm
from . import checkpoint as ckpt
from . import fusion
from . import gradcheck
from . import harness
from . import synthdata as sd
from . import tasks
from .rng import RngStream


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    """argparse that signals usage problems instead of exiting with 2."""

    def error(self, message):
        raise UsageError(message)


def _default_seed() -> int:
    env = os.environ.get("FBLM_SEED")
    if env is None:
        return 0
    try:
        return int(env)
    except ValueError:
        raise UsageError(f"FBLM_SEED must be an integer, got {env!r}") from None


def build_parser() -> _Parser:
    parser = _Parser(prog="vidcloze", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p):
        p.add_argument("--seed", type=int, default=None,
                       help="random seed (default: FBLM_SEED or 0)")
        p.add_argument("--config", help="JSON run config file")

    p = sub.add_parser("gen-data", help="write corpus, pairs, and QA files")
    common(p)
    p.add_argument("--out", required=True, help="output directory")

    p = sub.add_parser("pretrain-text", help="train the text model")
    common(p)
    p.add_argument("--corpus", help="text file, one sentence per line "
                                    "(default: generate synthetically)")
    p.add_argument("--out", required=True, help="checkpoint path")
    p.add_argument("--steps", type=int, help="override pretraining steps")
    p.add_argument("--metrics", help="metrics JSON path")

    p = sub.add_parser("train-crossmodal",
                       help="train projection and adapters on video-caption pairs")
    common(p)
    p.add_argument("--checkpoint", required=True, help="pretrained text model")
    p.add_argument("--pairs", help="pairs JSONL (default: generate)")
    p.add_argument("--features", help="pair features FBFT file")
    p.add_argument("--variant", default=None, choices=fusion.VARIANTS)
    p.add_argument("--out", required=True, help="multimodal checkpoint path")
    p.add_argument("--metrics", help="metrics JSON path")

    p = sub.add_parser("eval", help="score a dataset by cloze inference")
    common(p)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--dataset", help="QA JSONL (default: generate test split)")
    p.add_argument("--features", help="FBFT features for the dataset")
    p.add_argument("--task", default=None,
                   help="open|mc|fib or the full task name")
    p.add_argument("--answers-from", dest="answers_from",
                   help="train JSONL to harvest the answer list from")
    p.add_argument("--no-video", action="store_true",
                   help="evaluate without the video prompt")
    p.add_argument("--no-subtitles", action="store_true",
                   help="drop subtitle segments from prompts")
    p.add_argument("--no-suffix", action="store_true",
                   help="cut each prompt right after the mask")
    p.add_argument("--metrics", help="metrics JSON path")

    p = sub.add_parser("finetune", help="train on a supervision fraction")
    common(p)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--dataset", help="train JSONL (default: generate)")
    p.add_argument("--features")
    p.add_argument("--task", default=None)
    p.add_argument("--fraction", type=float, required=True)
    p.add_argument("--out", required=True, help="tuned checkpoint path")
    p.add_argument("--metrics", help="metrics JSON path")

    p = sub.add_parser("dump-attention", help="write one layer's attention CSV")
    common(p)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--dataset", required=True)
    p.add_argument("--features")
    p.add_argument("--index", type=int, default=0, help="instance index")
    p.add_argument("--layer", type=int, required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--renorm", help="also write a per-query max-renormalized "
                                    "transposed copy here")
    p.add_argument("--no-video", action="store_true")

    p = sub.add_parser("param-report", help="print the trainable budget")
    common(p)
    p.add_argument("--checkpoint", required=True)

    p = sub.add_parser("grad-check",
                       help="finite-difference check on a small model")
    common(p)
    p.add_argument("--probes", type=int, default=100)
    p.add_argument("--tolerance", type=float, default=1e-4)

    p = sub.add_parser("run-grid", help="variant x fraction x modality sweep")
    common(p)
    p.add_argument("--out", required=True, help="CSV path")
    p.add_argument("--task", default=None)
    return parser


def _load_config(args) -> harness.RunConfig:
    if args.config:
        config = harness.RunConfig.from_file(args.config)
    else:
        config = harness.RunConfig()
    if args.seed is not None:
        config.seed = args.seed
    elif not args.config:
        config.seed = _default_seed()
    if getattr(args, "task", None):
        config.task = harness.resolve_task(args.task)
    return config


def _load_vlm(path: str, allow_bare: bool = False) -> fusion.FrozenVlmModel:
    """A multimodal model; a plain text model is wrapped only when the
    caller does not need the visual side (fresh adapters are identity,
    so the wrapped model's text path equals the original)."""
    model = ckpt.load_model(path)
    if isinstance(model, lm.BiLM):
        if not allow_bare:
            raise UsageError(
                f"{path} holds a plain text model; run train-crossmodal "
                f"first or pass --no-video")
        return fusion.build_model(model, variant="frozen_with_adapters")
    return model


def _load_eval_dataset(args, config):
    if args.dataset:
        return harness.load_dataset(args.dataset, args.features, config.frames)
    return None


def _answer_vocab(args, config, model):
    if config.task == "multi_choice":
        return None
    if getattr(args, "answers_from", None):
        # Only the gold strings matter here, so clip references are
        # dropped rather than requiring a feature file.
        train = [harness.record_to_instance(dict(rec, clip=None), None,
                                            config.frames)
                 for rec in harness.read_jsonl(args.answers_from)]
        answers = tasks.collect_answers(train)
        return tasks.build_answer_head(answers, model.bilm, model.vocab)
    return harness.answer_vocab_for(config, model)


def cmd_gen_data(args) -> int:
    config = _load_config(args)
    manifest = harness.gen_data(config, args.out)
    for key in sorted(manifest):
        print(f"{key}: {manifest[key]}")
    return 0


def cmd_pretrain_text(args) -> int:
    config = _load_config(args)
    if args.steps:
        config.pretrain_steps = args.steps
    corpus = None
    if args.corpus:
        with open(args.corpus, "r", encoding="utf-8") as f:
            corpus = [line.strip() for line in f if line.strip()]
    bilm, report = harness.pretrain_pipeline(config, corpus)
    ckpt.save_bilm(bilm, args.out)
    tail = report.losses[-min(50, len(report.losses)):]
    print(f"pretrained {config.pretrain_steps} steps, "
          f"final loss {sum(tail) / len(tail):.4f}, saved {args.out}")
    if args.metrics:
        report.save(args.metrics)
    return 0


def cmd_train_crossmodal(args) -> int:
    config = _load_config(args)
    if args.variant:
        config.variant = args.variant
    bilm = ckpt.load_bilm(args.checkpoint)
    pairs = None
    if args.pairs:
        if not args.features:
            raise UsageError("--pairs needs --features")
        pairs = harness.load_pairs(args.pairs, args.features, config.frames)
    model, report = harness.crossmodal_pipeline(config, bilm, pairs)
    ckpt.save_vlm(model, args.out)
    print(f"trained {config.variant}, final loss "
          f"{report.losses[-1]:.4f}, saved {args.out}")
    if args.metrics:
        report.save(args.metrics)
    return 0


def cmd_eval(args) -> int:
    config = _load_config(args)
    config.use_video = not args.no_video
    config.use_subtitles = not args.no_subtitles
    config.use_suffix = not args.no_suffix
    model = _load_vlm(args.checkpoint, allow_bare=args.no_video)
    dataset = _load_eval_dataset(args, config)
    if dataset is not None:
        kinds = {i.kind for i in dataset}
        if len(kinds) == 1:
            config.task = kinds.pop()
    answer_vocab = _answer_vocab(args, config, model)
    summary, report = harness.eval_pipeline(config, model, dataset,
                                            answer_vocab)
    print(f"accuracy {summary.accuracy:.4f} "
          f"({summary.n_correct}/{summary.n_eval})")
    for qtype in sorted(summary.per_type):
        print(f"  {qtype}: {summary.per_type[qtype]:.4f} "
              f"(n={summary.per_type_counts[qtype]})")
    if args.metrics:
        report.save(args.metrics)
    return 0


def cmd_finetune(args) -> int:
    config = _load_config(args)
    config.fraction = args.fraction
    model = _load_vlm(args.checkpoint)
    dataset = None
    if args.dataset:
        dataset = harness.load_dataset(args.dataset, args.features,
                                       config.frames)
        kinds = {i.kind for i in dataset}
        if len(kinds) == 1:
            config.task = kinds.pop()
    answer_vocab = None
    if config.task != "multi_choice":
        answer_vocab = harness.answer_vocab_for(config, model, dataset)
    model, report = harness.finetune_pipeline(config, model, dataset,
                                              answer_vocab)
    ckpt.save_vlm(model, args.out)
    final = report.losses[-1] if report.losses else float("nan")
    print(f"finetuned on fraction {config.fraction:g}, "
          f"final loss {final:.4f}, saved {args.out}")
    if args.metrics:
        report.save(args.metrics)
    return 0


def cmd_dump_attention(args) -> int:
    config = _load_config(args)
    model = _load_vlm(args.checkpoint)
    dataset = harness.load_dataset(args.dataset, args.features, config.frames)
    if not 0 <= args.index < len(dataset):
        raise UsageError(f"--index {args.index} out of range for "
                         f"{len(dataset)} instances")
    harness.dump_attention(model, dataset[args.index], args.layer, args.out,
                           renorm_path=args.renorm,
                           use_video=not args.no_video)
    print(f"wrote layer {args.layer} attention to {args.out}")
    return 0


def cmd_param_report(args) -> int:
    model = _load_vlm(args.checkpoint)
    report = fusion.trainable_param_report(model)
    print(f"parameter budget for {args.checkpoint}:")
    print(report)
    return 0


def cmd_grad_check(args) -> int:
    config = _load_config(args)
    report = small_model_grad_check(seed=config.seed, n_probes=args.probes,
                                    tolerance=args.tolerance)
    status = "PASS" if report.passed else "FAIL"
    print(f"grad check: max rel error {report.max_rel_error:.3e} "
          f"over {report.n_probes} probes, tolerance {report.tolerance:g} "
          f"[{status}]")
    return 0 if report.passed else 2


def small_model_grad_check(seed: int = 0, n_probes: int = 100,
                           tolerance: float = 1e-4) -> gradcheck.GradCheckReport:
    """Finite-difference check of the full multimodal loss on a small model."""
    corpus = ["the red ball is rolling in the kitchen",
              "a blue dog is sleeping in the garden",
              "question : what color is the ball ? answer : red"]
    from .vocab import build_vocab, encode
    vocab = build_vocab(corpus)
    config = lm.BiLMConfig(vocab_size=vocab.size, hidden_dim=32, n_layers=2,
                           n_heads=4, ffn_dim=64, max_positions=32,
                           text_len=24, dropout_p=0.0)
    bilm = lm.BiLM(config, vocab, RngStream(seed, "gradcheck/init"))
    model = fusion.build_model(bilm, d_visual=8, prompt_len=4, adapter_dim=4,
                               seed=seed)
    for p in model.parameters():
        p.frozen = False
    video = fusion.pad_video(
        RngStream(seed, "gradcheck/video").normal((4, 8), std=1.0),
        np.ones(4, dtype=bool), 4, "probe")
    clean = encode("[CLS] the red ball is rolling in the kitchen [SEP]",
                   vocab, 10)
    masked = encode("[CLS] the [MASK] ball is rolling in the [MASK] [SEP]",
                    vocab, 10)
    original = np.asarray([clean.ids])
    corrupted = np.asarray([masked.ids])
    batch = lm.MaskedBatch(
        corrupted_ids=corrupted, original_ids=original,
        loss_positions=corrupted == vocab.id_of("[MASK]"),
        attention_mask=np.asarray([clean.attention_mask]))

    def loss_fn():
        prompt = fusion.prompt_prenorm_rows(video.features[None], model)
        return lm.mlm_loss(batch, model.bilm, adapters=model.adapters,
                           prompt_rows=prompt,
                           prompt_valid=video.valid[None].astype(np.int64))

    return gradcheck.grad_check(loss_fn, model.parameters(),
                                n_probes=n_probes, tolerance=tolerance,
                                seed=seed)


def cmd_run_grid(args) -> int:
    config = _load_config(args)
    rows, failures = harness.run_ablation_grid(config, args.out)
    print(f"wrote {len(rows)} grid rows to {args.out} "
          f"({failures} cell failures)")
    orderings = harness.grid_orderings(rows)
    for name, value in sorted(orderings.items()):
        if name != "zero_shot":
            print(f"  {name}: {value}")
    return 2 if failures else 0


_COMMANDS = {
    "gen-data": cmd_gen_data,
    "pretrain-text": cmd_pretrain_text,
    "train-crossmodal": cmd_train_crossmodal,
    "eval": cmd_eval,
    "finetune": cmd_finetune,
    "dump-attention": cmd_dump_attention,
    "param-report": cmd_param_report,
    "grad-check": cmd_grad_check,
    "run-grid": cmd_run_grid,
}


def cli_main(argv: list | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except UsageError as e:
        print(f"usage error: {e}", file=sys.stderr)
        return 1
    try:
        return _COMMANDS[args.command](args)
    except UsageError as e:
        print(f"usage error: {e}", file=sys.stderr)
        return 1
    except (ValueError, OSError, KeyError, lm.TrainingDiverged,
            fusion.FrozenDriftError, fusion.ShapeError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 2


def main() -> None:
    sys.exit(cli_main())


if __name__ == "__main__":
    main()
