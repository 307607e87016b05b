"""Command-line entry point: ``tisr <subcommand> ...``.

Exit codes: 0 success, 1 usage or configuration error, 2 runtime failure
(non-finite loss, missing file, unknown sample). The default output root
is taken from ``$TISR_OUT`` (falling back to ``runs``).
"""
from __future__ import annotations

import argparse
import logging
import os
import sys
from pathlib import Path

from .config import ConfigError, RunConfig, parse_pairs, run_config_from_text
from .corpus import batch_patches, generate_dataset, read_dataset, write_dataset
from .harness import TrainingError, ablate, attn_dump, by_split, decode_reports, evaluate, train, write_eval
from .model import load_checkpoint

log = logging.getLogger("tisr")

ENV_OUT = "TISR_OUT"

# (flag, config key, value when the flag is given)
ABLATION_FLAGS = (
    ("--no-textual-inversion", "use_textual_inversion", False),
    ("--no-refinement", "use_refinement", False),
    ("--no-cross-modal-interaction", "use_cross_modal_interaction", False),
    ("--no-fusion-mlp", "use_fusion_mlp", False),
    ("--no-refine-decoder", "use_refine_decoder", False),
    ("--no-rrg-loss", "use_rrg_loss", False),
    ("--no-sr-loss", "use_sr_loss", False),
)


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.prog}: {message}")


def default_out():
    return os.environ.get(ENV_OUT) or "runs"


def _add_run_options(p):
    p.add_argument("--config", help="flat key = value config file")
    p.add_argument("--data", help="dataset directory written by gen-data")
    p.add_argument("--seed", type=int)
    p.add_argument("--out", help="output directory (default: $TISR_OUT or ./runs)")
    p.add_argument("--run-id")
    p.add_argument("--steps", type=int)
    p.add_argument("--lr", type=float)
    p.add_argument("--batch-size", type=int)
    p.add_argument("--inversion-variant", choices=["mlp", "transformer"])
    for flag, key, _ in ABLATION_FLAGS:
        p.add_argument(flag, dest=key, action="store_true")


def resolve_config(args) -> RunConfig:
    cfg, explicit = RunConfig(), {}
    if args.config:
        text = Path(args.config).read_text()
        cfg, explicit = run_config_from_text(text), parse_pairs(text)
    changes = {}
    for key, attr in (("seed", "seed"), ("steps", "steps"), ("lr", "lr"), ("batch_size", "batch_size"),
                      ("run_id", "run_id"), ("inversion_variant", "inversion_variant")):
        value = getattr(args, attr, None)
        if value is not None:
            changes[key] = value
    for _, key, value in ABLATION_FLAGS:
        if getattr(args, key, False):
            changes[key] = value
    if args.data:
        changes["data_dir"] = args.data
    changes["out_dir"] = args.out or (cfg.out_dir if "out_dir" in explicit else default_out())
    cfg = cfg.replace(**changes)
    if not cfg.data_dir:
        raise ConfigError("no dataset: pass --data or set data_dir in the config")
    if not Path(cfg.data_dir, "manifest.tsv").is_file():
        raise FileNotFoundError(f"{cfg.data_dir}: no manifest.tsv")
    return cfg.validate()


def _load_data(data_dir):
    if not data_dir or not Path(data_dir, "manifest.tsv").is_file():
        raise FileNotFoundError(f"{data_dir}: no manifest.tsv")
    return read_dataset(data_dir)


def _load_model(path, vocab):
    if not Path(path).is_file():
        raise FileNotFoundError(f"{path}: no such checkpoint")
    model = load_checkpoint(path)
    if model.cfg.V != len(vocab):
        raise ConfigError(f"checkpoint vocabulary size {model.cfg.V} != dataset vocabulary size {len(vocab)}")
    return model


def _check_dims(model, samples):
    M, d_img = batch_patches(samples[:1]).shape[1:]
    if (model.cfg.M, model.cfg.D_img) != (M, d_img):
        raise ConfigError(f"checkpoint expects {model.cfg.M} patches of {model.cfg.D_img} values; "
                          f"dataset has {M} x {d_img}")


def cmd_gen_data(args):
    out = Path(args.out or default_out())
    samples = generate_dataset(args.seed, args.n, max_findings=args.max_findings)
    path = write_dataset(samples, out)
    counts = {t: sum(s.split == t for s in samples) for t in ("train", "val", "test")}
    print(f"wrote {len(samples)} samples to {path} (train/val/test = "
          f"{counts['train']}/{counts['val']}/{counts['test']})")


def cmd_train(args):
    cfg = resolve_config(args)
    samples, vocab = _load_data(cfg.data_dir)
    out = Path(cfg.out_dir)
    result = train(cfg, samples, vocab, out_dir=out)
    val = by_split(samples, "val")
    if val:
        result.load_best()
        rep, cands, refs = evaluate(result.model, val, vocab)
        write_eval(out, cfg.run_id, "val", rep, cands, refs, [s.sample_id for s in val])
    last = result.losses[-1] if result.losses else None
    print(f"trained {cfg.steps} steps; final total loss {last[3]:.6f}" if last else "no steps run")
    for name, path in result.files.items():
        print(f"  {name}: {path}")


def cmd_eval(args):
    samples, vocab = _load_data(args.data)
    model = _load_model(args.checkpoint, vocab)
    part = by_split(samples, args.split)
    if not part:
        raise ConfigError(f"split {args.split!r} is empty")
    _check_dims(model, part)
    rep, cands, refs = evaluate(model, part, vocab)
    run_id = args.run_id or Path(args.checkpoint).stem
    csv_path, txt_path = write_eval(args.out or default_out(), run_id, args.split, rep, cands, refs,
                                    [s.sample_id for s in part])
    for k, v in rep.as_dict().items():
        print(f"{k:<13} {v:.4f}")
    print(f"wrote {csv_path} and {txt_path}")


def cmd_generate(args):
    samples, vocab = _load_data(args.data)
    model = _load_model(args.checkpoint, vocab)
    if args.sample_id:
        chosen = [s for s in samples if s.sample_id in set(args.sample_id)]
        missing = set(args.sample_id) - {s.sample_id for s in chosen}
        if missing:
            raise LookupError(f"unknown sample id(s): {sorted(missing)}")
    else:
        chosen = by_split(samples, args.split)
    _check_dims(model, chosen)
    for s, text in zip(chosen, decode_reports(model, chosen, vocab)):
        print(f"{s.sample_id}\t{text}")


def cmd_ablate(args):
    cfg = resolve_config(args)
    samples, vocab = _load_data(cfg.data_dir)
    seeds = [int(x) for x in args.seeds.split(",")] if args.seeds else [cfg.seed]
    names = args.only.split(",") if args.only else None
    ablate(cfg, samples, vocab, out_dir=cfg.out_dir, seeds=seeds, names=names, split=args.split)
    print(Path(cfg.out_dir, f"{cfg.run_id}_ablation.txt").read_text(), end="")


def cmd_attn_dump(args):
    samples, vocab = _load_data(args.data)
    model = _load_model(args.checkpoint, vocab)
    match = [s for s in samples if s.sample_id == args.sample_id]
    if not match:
        raise LookupError(f"unknown sample id {args.sample_id!r}")
    _check_dims(model, match)
    tokens, _, files, csv_path = attn_dump(model, match[0], vocab, args.out or default_out())
    print(f"{len(tokens)} tokens: {' '.join(tokens)}")
    print(f"wrote {len(files)} heatmaps and {csv_path}")


def build_parser():
    parser = _Parser(prog="tisr", description="Synthetic report-generation experiments.")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", parser_class=_Parser)

    p = sub.add_parser("gen-data", help="generate a synthetic image/report corpus")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--n", type=int, default=1000)
    p.add_argument("--max-findings", type=int, default=3)
    p.add_argument("--out")
    p.set_defaults(func=cmd_gen_data)

    p = sub.add_parser("train", help="train one configuration")
    _add_run_options(p)
    p.set_defaults(func=cmd_train)

    for name, func, help_text in (("eval", cmd_eval, "score a checkpoint on a split"),
                                  ("generate", cmd_generate, "print greedy reports")):
        p = sub.add_parser(name, help=help_text)
        p.add_argument("--checkpoint", required=True)
        p.add_argument("--data", required=True)
        p.add_argument("--split", default="test", choices=["train", "val", "test"])
        p.add_argument("--out")
        p.add_argument("--run-id")
        if name == "generate":
            p.add_argument("--sample-id", action="append")
        p.set_defaults(func=func)

    p = sub.add_parser("ablate", help="run the ablation grid")
    _add_run_options(p)
    p.add_argument("--seeds", help="comma-separated seeds (default: the config seed)")
    p.add_argument("--only", help="comma-separated subset of grid rows")
    p.add_argument("--split", default="test", choices=["val", "test"])
    p.set_defaults(func=cmd_ablate)

    p = sub.add_parser("attn-dump", help="export per-token attention heatmaps")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--sample-id", required=True)
    p.add_argument("--out")
    p.set_defaults(func=cmd_attn_dump)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        if not args.command:
            raise UsageError(parser.format_usage().strip())
    except UsageError as exc:
        print(exc, file=sys.stderr)
        return 1
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    try:
        args.func(args)
    except (ConfigError, UsageError) as exc:
        print(f"configuration error: {exc}", file=sys.stderr)
        return 1
    except (TrainingError, OSError, LookupError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    return 0


if __name__ == "__main__":
    sys.exit(main())
