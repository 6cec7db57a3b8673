"""Command-line interface.

Exit codes: 0 success, 1 usage error, 2 data error (bad input files,
geometry, vocabulary, checkpoints), 3 numerical failure.
"""

from __future__ import annotations

import argparse
import configparser
import json
import logging
import sys
from dataclasses import fields
from pathlib import Path

import numpy as np

from . import __version__
from .autodiff import grad_check
from .corpus import format_corpus, load_corpus, make_planted_corpus
from .errors import AnchorNetError, InvalidArgument, NumericalError, ParseError, VocabMismatch
from .flops import REFERENCE_STATS, format_report, model_flops, parse_stats, pipeline_ratio
from .localize import TEST_REGIME, TRAIN_REGIME, LipParams, lip
from .model import AnchorNetT, ModelConfig, class_activation_map
from .pipeline import fgsm_eval, lip_sweep, model_classifier, run_downstream, run_localize
from .rf import as_pair, compose, layer_sizes, map_location
from .serialization import (Checkpoint, format_heatmap, format_patch_set, load_checkpoint, parse_heatmap,
                            read_records, save_checkpoint, write_jsonl)
from .stack import resolve_stack
from .textcnn import TextCNN, TextCNNConfig
from .training import Schedule, train


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.prog}: {message}")


def _emit(text: str, out: str | None) -> None:
    if out:
        Path(out).write_text(text if text.endswith("\n") else text + "\n", encoding="utf-8")
    else:
        print(text)


def _floats(text: str) -> list[float]:
    try:
        return [float(t) for t in text.split(",") if t.strip()]
    except ValueError:
        raise UsageError(f"expected comma-separated numbers, got {text!r}") from None


def _read_ini(path: str | None) -> configparser.ConfigParser:
    parser = configparser.ConfigParser(interpolation=None)
    if path:
        try:
            parser.read_string(Path(path).read_text(encoding="utf-8"))
        except configparser.Error as exc:
            raise ParseError(f"{path}: {exc}") from None
    return parser


def _section_kwargs(parser: configparser.ConfigParser, section: str, cls) -> dict:
    """Typed keyword arguments for dataclass ``cls`` from an INI section."""
    if not parser.has_section(section):
        return {}
    known = {f.name: f for f in fields(cls)}
    out = {}
    for key, raw in parser[section].items():
        if key in ("format", "version"):
            continue
        if key not in known or key == "vocab_size":
            raise ParseError(f"[{section}] unknown or derived key {key!r}")
        default = known[key].default
        try:
            if isinstance(default, tuple):
                out[key] = tuple(int(t) for t in raw.split())
            elif isinstance(default, bool):
                out[key] = raw.strip().lower() in ("1", "true", "yes")
            elif isinstance(default, float) or default is None:
                out[key] = float(raw)
            elif isinstance(default, int):
                out[key] = int(raw)
            else:
                out[key] = raw.strip()
        except ValueError:
            raise ParseError(f"[{section}] bad value for {key}: {raw!r}") from None
    return out


def _size(stack, values):
    if values is None:
        raise UsageError("--size is required")
    if len(values) not in (1, 2):
        raise UsageError("--size takes one (square or sequence length) or two integers")
    return as_pair(values[0] if len(values) == 1 else tuple(values), one_d=stack.one_d)


# subcommands ---------------------------------------------------------------

def cmd_rf_analyze(args) -> None:
    stack = resolve_stack(args.stack)
    layers = stack.geometry()

    def row(*cells):
        return f"{cells[0]:<20}" + "".join(f"{c:>10}" for c in cells[1:])

    def pair(p, sep="x"):
        return f"{p[0]}{sep}{p[1]}"

    lines = [row("layer", "kernel", "stride", "pad", "out", "rf", "jump", "start")]
    size = _size(stack, args.size) if args.size else None
    sizes = layer_sizes(size, layers) if size else [None] * len(layers)
    for i, (layer, out) in enumerate(zip(layers, sizes)):
        s = compose(layers[:i + 1])
        lines.append(row(layer.label(i), pair(layer.kernel), pair(layer.stride), pair(layer.padding),
                         pair(out) if out else "-", pair(s.rf), pair(s.jump), pair(s.start, ",")))
    if size:
        total = compose(layers, size)
        h, w = total.out_size
        lines.append(f"patch grid {h}x{w} = {h * w} patches of {total.rf[0]}x{total.rf[1]}")
    _emit("\n".join(lines), args.out)


def cmd_map(args) -> None:
    stack = resolve_stack(args.stack)
    summary = compose(stack.geometry(), _size(stack, args.size))
    if len(args.loc) not in (1, 2):
        raise UsageError("--loc takes a position (1D) or row and column")
    if len(args.loc) == 2:
        loc = tuple(args.loc)
    else:
        # a lone position on a 1D stack sits in row 0
        loc = (0, args.loc[0]) if stack.one_d else (args.loc[0], args.loc[0])
    r = map_location(loc, summary)
    _emit(json.dumps({"top": r.top, "left": r.left, "height": r.height, "width": r.width}), args.out)


def _lip_params(args, heatmap) -> LipParams:
    if args.regime:
        table = TEST_REGIME if args.regime == "test" else TRAIN_REGIME
        if heatmap.geometry.rf[0] not in table:
            raise InvalidArgument(f"no {args.regime} regime for receptive field {heatmap.geometry.rf}")
        base = table[heatmap.geometry.rf[0]]
    else:
        base = LipParams(1, 0.5, 1.0)
    return LipParams(args.K if args.K is not None else base.K,
                     args.T if args.T is not None else base.T,
                     args.P if args.P is not None else base.P)


def cmd_lip(args) -> None:
    hm = parse_heatmap(Path(args.heatmap).read_text(encoding="utf-8"))
    _emit(format_patch_set(lip(hm, _lip_params(args, hm))), args.out)


def cmd_lip_sweep(args) -> None:
    T_values, P_values = _floats(args.T), _floats(args.P)
    try:
        K = None if args.K in (None, "area") else int(args.K)
    except ValueError:
        raise UsageError(f"-K takes an integer or 'area', got {args.K!r}") from None
    heatmaps = [parse_heatmap(Path(p).read_text(encoding="utf-8")) for p in args.heatmaps]
    rows = lip_sweep(heatmaps, T_values, P_values, K)
    lines = ["T\tP\tmean_patches\tcovered_fraction"]
    lines += [f"{r.T:g}\t{r.P:g}\t{r.mean_patches:.4f}\t{r.covered_fraction:.4f}" for r in rows]
    _emit("\n".join(lines), args.out)


def _schedule(cfg, args) -> Schedule:
    kwargs = _section_kwargs(cfg, "schedule", Schedule)
    for key in ("epochs", "batch_size", "learning_rate", "momentum", "weight_decay", "target_accuracy"):
        value = getattr(args, key, None)
        if value is not None:
            kwargs[key] = value
    kwargs["seed"] = args.seed
    return Schedule(**kwargs)


def cmd_train_text(args) -> None:
    if not args.out:
        raise UsageError("train-text needs --out for the checkpoint")
    corpus = load_corpus(args.corpus, seed=args.seed)
    cfg = _read_ini(args.config)
    if args.model == "anchornet":
        config = ModelConfig(**{"vocab_size": len(corpus.vocab), "num_classes": corpus.num_classes,
                                **_section_kwargs(cfg, "model", ModelConfig)})
        model = AnchorNetT(config, seed=args.seed)
    else:
        config = TextCNNConfig(**{"vocab_size": len(corpus.vocab), "num_classes": corpus.num_classes,
                                  **_section_kwargs(cfg, "textcnn", TextCNNConfig)})
        model = TextCNN(config, seed=args.seed)
    schedule = _schedule(cfg, args)
    log_rows = []

    def on_epoch(rec):
        log_rows.append(rec)
        print(json.dumps(rec), file=sys.stderr)

    result = train(model, corpus, schedule, on_epoch)
    meta = {"seed": args.seed, "best_epoch": result.best_epoch, "metrics": result.best,
            "schedule": {f.name: getattr(schedule, f.name) for f in fields(schedule)}}
    save_checkpoint(args.out, Checkpoint.from_model(model, corpus.vocab, meta))
    if args.metrics:
        write_jsonl(args.metrics, log_rows)


def cmd_localize_text(args) -> None:
    ckpt = load_checkpoint(args.checkpoint)
    corpus = load_corpus(args.corpus, seed=args.seed)
    records = run_localize(ckpt, corpus, args.split)
    if args.heatmaps:
        _dump_heatmaps(ckpt, corpus, records, Path(args.heatmaps))
    if args.out:
        write_jsonl(args.out, records)
    else:
        for r in records:
            print(r.to_json())


def _dump_heatmaps(ckpt, corpus, records, folder: Path) -> None:
    model = ckpt.build()
    folder.mkdir(parents=True, exist_ok=True)
    seq_len = model.config.seq_len
    for r in records:
        out = model.forward(corpus.encode_tokens(corpus.documents[r.doc], seq_len))
        hm = class_activation_map(out.branch(r.theta), r.gamma, seq_len)
        (folder / f"doc{r.doc:06d}.ini").write_text(format_heatmap(hm), encoding="utf-8")


def cmd_classify_patches(args) -> None:
    records = read_records(args.records)
    ckpt = load_checkpoint(args.checkpoint)
    corpus = load_corpus(args.corpus, seed=args.seed)
    if ckpt.vocab != corpus.vocab:
        raise VocabMismatch("downstream checkpoint vocabulary differs from the corpus vocabulary")
    model = ckpt.build()
    stack = resolve_stack(args.stack)
    report = run_downstream(records, corpus, model_classifier(model), args.seq_len, stack)
    lines = [f"documents\t{len(report.predictions)}", f"accuracy\t{report.accuracy:.4f}"]
    for theta, ratio in zip(sorted({r.theta for r in records}), report.cost.branch_ratios):
        lines.append(f"flops ratio (span {theta})\t{ratio:.4f}")
    lines.append(f"flops ratio overall\t{report.cost.overall:.4f}")
    _emit("\n".join(lines), args.out)


def cmd_flops_estimate(args) -> None:
    stack = resolve_stack(args.stack)
    size = _size(stack, args.size)
    report = model_flops(stack, size)
    text = [f"{stack.name} at {size[0]}x{size[1]}", format_report(report, args.limit)]
    stats = None
    if args.stats in REFERENCE_STATS:
        stats = REFERENCE_STATS[args.stats]
    elif args.stats:
        stats = parse_stats(Path(args.stats).read_text(encoding="utf-8"))
    if stats:
        text.append("")
        text.append(f"{'branch':<10}{'count':>9}{'patches':>9}{'size':>11}{'ratio':>9}")
        readings = [False] + ([True] if args.upstream_flops else [])
        for include in readings:
            pr = pipeline_ratio(stack, size, stats, include, args.upstream_flops or 0.0)
            label = "with upstream" if include else "downstream only"
            for st, ratio in zip(stats, pr.branch_ratios):
                h, w = as_pair(st.patch_size)
                text.append(f"{'':<10}{st.count:>9}{st.mean_patches:>9.2f}{f'{h}x{w}':>11}{ratio:>8.2f}x")
            text.append(f"overall ({label}){'':<4}{pr.overall:.2f}x")
    _emit("\n".join(text), args.out)


def cmd_grad_check(args) -> None:
    rng = np.random.default_rng(args.seed)
    cfg = _read_ini(args.config)
    kwargs = {"vocab_size": 12, "embed_dim": 4, "seq_len": 9, "head_channels": (5,), "branch_kernels": (3, 5),
              "branch_channels": 6, "attention_channels": 4, "num_classes": 3}
    kwargs.update(_section_kwargs(cfg, "model", ModelConfig))
    config = ModelConfig(**kwargs)
    model = AnchorNetT(config, seed=args.seed)
    for p in model.parameters():
        p.data = p.data + rng.normal(0.0, 0.3, p.data.shape)
    # the pad row is frozen by design, so keep it out of the finite differences
    tokens = rng.integers(config.pad_index + 1, config.vocab_size, size=(args.batch, config.seq_len))
    labels = rng.integers(config.num_classes, size=args.batch)
    err = grad_check(lambda: model.loss(tokens, labels), model.parameters(), args.epsilon,
                     samples=args.samples, rng=rng)
    _emit(f"max relative error {err:.3e} (tolerance {args.tolerance:g})", args.out)
    if err >= args.tolerance:
        raise NumericalError(f"gradient check failed: {err:.3e} >= {args.tolerance:g}")


def cmd_fgsm_eval(args) -> None:
    ckpt = load_checkpoint(args.checkpoint)
    corpus = load_corpus(args.corpus, seed=args.seed)
    if ckpt.kind != "anchornet-t":
        raise InvalidArgument("fgsm-eval needs an anchornet-t checkpoint")
    if ckpt.vocab != corpus.vocab:
        raise VocabMismatch("checkpoint vocabulary differs from the corpus vocabulary")
    model = ckpt.build()
    tokens, labels = corpus.encode(args.split, model.config.seq_len)
    if args.limit:
        tokens, labels = tokens[:args.limit], labels[:args.limit]
    lines = ["epsilon\tclean_loss\tadv_loss\tclean_acc\tadv_acc"]
    for eps in _floats(args.epsilon):
        r = fgsm_eval(model, tokens, labels, eps)
        lines.append(f"{eps:g}\t{r.clean_loss:.6f}\t{r.adversarial_loss:.6f}\t"
                     f"{r.clean_accuracy:.4f}\t{r.adversarial_accuracy:.4f}")
    _emit("\n".join(lines), args.out)


def cmd_synth_corpus(args) -> None:
    pc = make_planted_corpus(args.n_train, args.n_val, args.n_test, seed=args.seed)
    _emit(format_corpus(pc.corpus).rstrip("\n"), args.out)


# parser --------------------------------------------------------------------

def _global_flags(suppress: bool) -> argparse.ArgumentParser:
    # Subcommands repeat the global flags with suppressed defaults so a value
    # given before the subcommand is not reset by the subparser.
    def d(value):
        return argparse.SUPPRESS if suppress else value
    common = _Parser(add_help=False)
    common.add_argument("--seed", type=int, default=d(0), help="random seed (default 0)")
    common.add_argument("--config", default=d(None), help="INI file with [model]/[textcnn]/[schedule] sections")
    common.add_argument("--out", default=d(None), help="output file (default: stdout)")
    common.add_argument("-v", "--verbose", action="store_true", default=d(False))
    return common


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="anchornet", description=__doc__.splitlines()[0], parents=[_global_flags(False)])
    common = _global_flags(True)
    parser.add_argument("--version", action="version", version=__version__)
    sub = parser.add_subparsers(dest="command", parser_class=_Parser, required=True)

    def add(name, func, help_text):
        p = sub.add_parser(name, help=help_text, parents=[common])
        p.set_defaults(func=func)
        return p

    p = add("rf-analyze", cmd_rf_analyze, "per-layer receptive field table of a stack")
    p.add_argument("stack", help="stack INI path or built-in name")
    p.add_argument("--size", type=int, nargs="+")

    p = add("map", cmd_map, "input patch of one output location")
    p.add_argument("stack")
    p.add_argument("--size", type=int, nargs="+", required=True)
    p.add_argument("--loc", type=int, nargs="+", required=True, help="row col (or position for 1D)")

    p = add("lip", cmd_lip, "select patches on a heatmap file")
    p.add_argument("heatmap")
    p.add_argument("--regime", choices=("test", "train"))
    p.add_argument("-K", type=int)
    p.add_argument("-T", type=float)
    p.add_argument("-P", type=float)

    p = add("lip-sweep", cmd_lip_sweep, "patch count and coverage over a T x P grid")
    p.add_argument("heatmaps", nargs="+")
    p.add_argument("-T", default="0.1,0.3,0.5,0.7,0.9")
    p.add_argument("-P", default="0.05,0.1,0.3,0.5,1.0")
    p.add_argument("-K", help="patch cap, or 'area' (default) for the input-tiling bound")

    p = add("train-text", cmd_train_text, "train AnchorNet-T or the downstream text CNN")
    p.add_argument("corpus", help="label<TAB>text[<TAB>split] file")
    p.add_argument("--model", choices=("anchornet", "textcnn"), default="anchornet")
    p.add_argument("--epochs", type=int)
    p.add_argument("--batch-size", dest="batch_size", type=int)
    p.add_argument("--lr", dest="learning_rate", type=float)
    p.add_argument("--momentum", type=float)
    p.add_argument("--weight-decay", dest="weight_decay", type=float)
    p.add_argument("--target-accuracy", dest="target_accuracy", type=float)
    p.add_argument("--metrics", help="write per-epoch JSON lines here")

    p = add("localize-text", cmd_localize_text, "top-1 span per document as JSON lines")
    p.add_argument("checkpoint")
    p.add_argument("corpus")
    p.add_argument("--split", default="test", choices=("train", "val", "test"))
    p.add_argument("--heatmaps", help="also write the selected branch's heatmap per document here")

    p = add("classify-patches", cmd_classify_patches, "classify localized spans downstream")
    p.add_argument("records")
    p.add_argument("checkpoint", help="downstream (textcnn) checkpoint")
    p.add_argument("corpus")
    p.add_argument("--stack", default="kim-cnn", help="downstream stack for the FLOPs ratio")
    p.add_argument("--seq-len", dest="seq_len", type=int, default=59)

    p = add("flops-estimate", cmd_flops_estimate, "FLOPs of a stack and pipeline cost ratios")
    p.add_argument("stack")
    p.add_argument("--size", type=int, nargs="+", required=True)
    p.add_argument("--stats", help=f"stats INI file or one of {sorted(REFERENCE_STATS)}")
    p.add_argument("--upstream-flops", dest="upstream_flops", type=float,
                   help="also report ratios including this localizer cost")
    p.add_argument("--limit", type=int, help="show only the first N layers")

    p = add("grad-check", cmd_grad_check, "finite-difference check of total_loss on a toy model")
    p.add_argument("--epsilon", type=float, default=1e-5)
    p.add_argument("--samples", type=int, default=8, help="coordinates checked per tensor")
    p.add_argument("--batch", type=int, default=2)
    p.add_argument("--tolerance", type=float, default=1e-4)

    p = add("fgsm-eval", cmd_fgsm_eval, "loss and accuracy under embedding-space FGSM")
    p.add_argument("checkpoint")
    p.add_argument("corpus")
    p.add_argument("--epsilon", default="0,0.2")
    p.add_argument("--split", default="test", choices=("train", "val", "test"))
    p.add_argument("--limit", type=int)

    p = add("synth-corpus", cmd_synth_corpus, "write the planted-trigram corpus")
    p.add_argument("--n-train", dest="n_train", type=int, default=2000)
    p.add_argument("--n-val", dest="n_val", type=int, default=500)
    p.add_argument("--n-test", dest="n_test", type=int, default=500)
    return parser


def main(argv=None) -> int:
    try:
        args = build_parser().parse_args(argv)
        logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                            format="%(levelname)s %(name)s: %(message)s")
        args.func(args)
    except UsageError as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return 1
    except NumericalError as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return exc.exit_code
    except AnchorNetError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return exc.exit_code
    except (OSError, UnicodeDecodeError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    return 0


if __name__ == "__main__":
    sys.exit(main())
