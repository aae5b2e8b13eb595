"""Command-line entry point: ``viptr <subcommand> ...``.

Results go to stdout as ``key=value`` lines (``infer`` prints the decoded
text). Diagnostics go to stderr. Exit status is 0 on success, 1 on a runtime
failure and 2 on a usage error.
"""
import argparse
import sys

from .backbone import REGISTRY

EXIT_OK, EXIT_RUNTIME, EXIT_USAGE = 0, 1, 2


class UsageFailure(Exception):
    pass


def _positive(v):
    try:
        n = int(v)
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected an integer, got {v!r}") from None
    if n < 1:
        raise argparse.ArgumentTypeError(f"expected a positive integer, got {n}")
    return n


def _width(v):
    n = _positive(v)
    if n % 4:
        raise argparse.ArgumentTypeError(f"width must be a multiple of 4, got {n}")
    return n


def build_parser():
    p = argparse.ArgumentParser(prog="viptr", description="SVIPTR recogniser toolkit")
    sub = p.add_subparsers(dest="command", required=True)
    variants = sorted(REGISTRY)

    c = sub.add_parser("count", help="parameter counts")
    c.add_argument("--variant", required=True, choices=variants)

    f = sub.add_parser("flops", help="multiply-accumulate counts")
    f.add_argument("--variant", required=True, choices=variants)
    f.add_argument("--width", type=_width, default=96)
    f.add_argument("--height", type=_positive, default=32)
    f.add_argument("--scope", choices=["backbone", "full"], default="backbone")

    i = sub.add_parser("infer", help="transcribe images with a checkpoint")
    i.add_argument("--ckpt", required=True)
    i.add_argument("--image", required=True, nargs="+")

    t = sub.add_parser("train", help="train on the synthetic glyph corpus")
    t.add_argument("--config", required=True)
    t.add_argument("--quiet", action="store_true", help="suppress per-epoch progress on stderr")

    b = sub.add_parser("bench", help="per-image inference latency at batch 4")
    b.add_argument("--variant", action="append", choices=variants,
                   help="repeatable; default is every registry variant")
    b.add_argument("--width", type=_width, default=96)
    b.add_argument("--iters", type=_positive, default=10)
    b.add_argument("--warmup", type=int, default=5)

    d = sub.add_parser("dump-attn", help="write attention maps as PGM images")
    d.add_argument("--ckpt", required=True)
    d.add_argument("--image", required=True)
    d.add_argument("--out", required=True)
    return p


def _emit(lines):
    for ln in lines:
        print(ln)


def cmd_count(a):
    from .backbone import build_model, count_params
    model = build_model(a.variant, init=False)
    _emit([f"variant={a.variant}",
           f"backbone_params={count_params(model, 'backbone')}",
           f"full_params={count_params(model, 'full')}"])


def cmd_flops(a):
    from .backbone import variant
    from .flops import count_flops
    cfg = variant(a.variant)
    if a.height % 16:
        raise UsageFailure("height must be a multiple of 16")
    cfg.input_height = a.height
    rep = count_flops(cfg, (a.height, a.width), a.scope)
    lines = [f"variant={a.variant}", f"input={a.height}x{a.width}", f"scope={a.scope}",
             f"total_macs={rep.total}", f"total_gflops={rep.total / 1e9:.4f}"]
    lines += [f"kind.{k}={v}" for k, v in rep.by_kind().items()]
    lines += [f"stage.{s}={rep.stage_total(s)}" for s in rep.stages]
    _emit(lines)


def cmd_infer(a):
    from .checkpoint import load_checkpoint
    from .ctc import greedy_decode
    from .imageio import load_image
    from .tensor import no_grad
    ck = load_checkpoint(a.ckpt)
    for path in a.image:
        img = load_image(path, ck.config.input_height)
        with no_grad():
            logits = ck.model.logits(img[None])
        print(greedy_decode(logits.data[0], ck.alphabet))


def cmd_train(a):
    from .config import load_run_config
    from .train import train
    rc = load_run_config(a.config)
    rc.options.verbose = not a.quiet
    history, _ = train(rc.model, rc.synth, rc.hyper, rc.seed, rc.options)
    best = max(history, key=lambda m: m.word_acc)
    _emit([f"epochs={len(history)}", f"final_loss={history[-1].loss:.6f}",
           f"best_word_acc={best.word_acc:.6f}", f"best_epoch={best.epoch}",
           f"log={rc.options.log_path}", f"checkpoint={rc.options.ckpt_dir}"])


def cmd_bench(a):
    from .bench import bench_variants, ordering
    if a.warmup < 5:
        raise UsageFailure("--warmup must be at least 5")
    stats = bench_variants(a.variant, a.width, a.iters, a.warmup)
    lines = [f"width={a.width}", "batch=4"]
    for s in stats:
        lines += s.lines()
    lines.append(f"ordering={ordering(stats)}")
    _emit(lines)


def cmd_dump_attn(a):
    from .attnmap import dump_attention
    from .checkpoint import load_checkpoint
    from .imageio import load_image
    ck = load_checkpoint(a.ckpt)
    img = load_image(a.image, ck.config.input_height)
    files = dump_attention(ck.model, img, a.out)
    _emit([f"out={a.out}", f"maps={len(files)}"])


COMMANDS = {"count": cmd_count, "flops": cmd_flops, "infer": cmd_infer, "train": cmd_train,
            "bench": cmd_bench, "dump-attn": cmd_dump_attn}


def main(argv=None):
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return EXIT_OK if e.code == 0 else EXIT_USAGE
    try:
        COMMANDS[args.command](args)
    except UsageFailure as e:
        print(f"viptr {args.command}: {e}", file=sys.stderr)
        return EXIT_USAGE
    except KeyboardInterrupt:
        print("interrupted", file=sys.stderr)
        return EXIT_RUNTIME
    except Exception as e:  # every other failure is a runtime error
        print(f"viptr {args.command}: error: {e}", file=sys.stderr)
        return EXIT_RUNTIME
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
