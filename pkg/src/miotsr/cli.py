"""Command-line interface: ``miotsr <command> [options]``.

Exit codes: 0 success, 1 usage error, 2 data error, 3 model error.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

if sys.version_info >= (3, 11):
    import tomllib
else:
    import tomli as tomllib

from . import codec, harness, imageio, rdn, resample, synth

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_MODEL = 0, 1, 2, 3

log = logging.getLogger("miotsr")


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.prog}: {message}")


def _ints(text: str) -> tuple:
    try:
        return tuple(int(t) for t in text.split(",") if t.strip())
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {text!r}") from None


def _size(text: str) -> tuple:
    try:
        w, h = (int(t) for t in text.lower().split("x"))
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected WIDTHxHEIGHT, got {text!r}") from None
    return w, h


def read_config(path) -> dict:
    """TOML file of option defaults; keys are flag names with dashes or underscores."""
    try:
        with open(path, "rb") as fh:
            data = tomllib.load(fh)
    except tomllib.TOMLDecodeError as e:
        raise UsageError(f"{path}: {e}") from None
    return {key.replace("-", "_"): value for key, value in data.items()}


def _apply_config(parser: argparse.ArgumentParser, argv, config: dict):
    """Use config values as defaults; explicit flags still win."""
    actions = {a.dest: a for a in parser._actions}
    for a in parser._actions:
        for flag in a.option_strings:
            actions.setdefault(flag.lstrip("-").replace("-", "_"), a)
    defaults = {}
    for key, value in config.items():
        action = actions.get(key)
        if action is None:
            raise UsageError(f"unknown config key {key!r}")
        key = action.dest
        if isinstance(action, (argparse._StoreTrueAction, argparse._StoreFalseAction)):
            if not isinstance(value, bool):
                raise UsageError(f"config key {key!r} must be true or false")
            defaults[key] = value
            continue
        # route through the flag's own parser so both sources validate alike
        raw = ",".join(map(str, value)) if isinstance(value, list) else str(value)
        try:
            defaults[key] = action.type(raw) if action.type else raw
        except (ValueError, argparse.ArgumentTypeError) as e:
            raise UsageError(f"config key {key!r}: {e}") from None
        if action.choices is not None and defaults[key] not in action.choices:
            raise UsageError(f"config key {key!r}: {defaults[key]!r} not in {sorted(action.choices)}")
    parser.set_defaults(**defaults)
    return parser.parse_args(argv)


# ---------------------------------------------------------------- commands


def cmd_encode(a):
    img = imageio.load(a.input)
    if a.variant == 2:
        img = resample.downscale(harness.pad_to_multiple(img, a.scale), a.scale)
    bs = codec.encode(img, a.quality, not a.no_subsample, variant=a.variant - 1, scale=a.scale if a.variant == 2 else 1)
    Path(a.output).write_bytes(bs)
    print(f"{a.output}: {len(bs)} bytes ({img.width}x{img.height}, q={a.quality})")


def cmd_decode(a):
    img = codec.decode(Path(a.input).read_bytes())
    imageio.save(img, a.output)
    print(f"{a.output}: {img.width}x{img.height}")


def cmd_synth(a):
    w, h = a.size
    out = Path(a.out)
    out.mkdir(parents=True, exist_ok=True)
    seeds = synth.corpus_seeds(a.count, a.seed)
    for i, s in enumerate(seeds):
        imageio.save(synth.scene(h, w, s), out / f"img{i:04d}.ppm")
    print(f"wrote {a.count} images to {out}")


def cmd_prepare(a):
    sources = ((name, img) for name, img in rdn.load_dataset(a.dataset))
    result = rdn.prepare_dataset(sources, a.out, a.seed)
    for name, reason in result["skipped"]:
        print(f"skipped {name}: {reason}", file=sys.stderr)
    print(f"wrote {len(result['written'])} crops to {a.out}, skipped {len(result['skipped'])}")


def _config(a, variant):
    return rdn.RdnConfig.for_variant(
        variant, D=a.D, C=a.C, G=a.G, G0=a.G0, up_stages=a.up_stages, residual=a.residual
    )


def cmd_train(a):
    items = rdn.load_dataset(a.dataset)
    train_items, held = rdn.split_dataset(items)
    cfg = _config(a, a.variant)
    plan = rdn.TrainPlan(
        variant=a.variant,
        steps=a.steps,
        batch=a.batch,
        patch=a.patch,
        qualities=a.quality or (),
        seed=a.seed,
        lr=a.lr,
        loss=a.loss,
        log_every=a.log_every,
    )
    print(f"training variant {a.variant} on {len(train_items)} images ({len(held)} held out)")
    result = rdn.train(cfg, plan, [img for _, img in train_items], callback=lambda s, l: print(f"step {s} loss {l:.5f}"))
    rdn.save_weights_file(result.params, a.out)
    if a.trace:
        Path(a.trace).write_text("\n".join(repr(x) for x in result.losses) + "\n")
    first, last = result.window_means(min(50, len(result.losses)))
    print(f"saved {a.out}; mean loss first {first:.5f} last {last:.5f}")


def cmd_restore(a):
    params = rdn.load_weights_file(a.model, residual=a.residual)
    data = Path(a.input).read_bytes()
    img = codec.decode(data) if data[:4] == codec.MAGIC else imageio.read_ppm(data)
    out = rdn.restore(params, img)
    imageio.save(out, a.output)
    print(f"{a.output}: {out.width}x{out.height}")


def _load_models(paths, residual) -> dict:
    models = {}
    for path in paths or ():
        p = rdn.load_weights_file(path, residual=residual)
        variant = 1 if p.cfg.scale == 1 else 2
        if variant in models:
            raise rdn.ModelError(f"two models given for variant {variant}")
        models[variant] = p
    return models


def cmd_sweep(a):
    models = _load_models(a.model, a.residual)
    pairs = harness.PAIRED_QUALITIES
    grid1 = a.grid1 or tuple(q for q, _ in pairs)
    grid2 = a.grid2 or tuple(q for _, q in pairs)
    if a.variant == 1:
        grid2 = ()
    elif a.variant == 2:
        grid1 = ()
    # paired rows only where both grids reach the pair
    pairs = tuple((q1, q2) for q1, q2 in pairs if q1 in grid1 and q2 in grid2)
    plan = harness.SweepPlan(
        grid1=grid1,
        grid2=grid2,
        pairs=pairs,
        restore=not a.no_restore,
        seed=a.seed,
        radio=harness.RadioModel.parse(a.radio) if a.radio else harness.RadioModel(),
        workers=a.workers,
    )
    if plan.restore:
        wanted = [v for v in (1, 2) if plan.grid(v)]
        missing = [v for v in wanted if v not in models]
        if missing:
            raise rdn.ModelError(f"no --model given for variant(s) {missing} (use --no-restore to skip restoration)")
    dataset = rdn.load_dataset(a.dataset)
    if not dataset:
        raise FileNotFoundError(f"no images in {a.dataset}")
    report = harness.sweep(plan, dataset, models)
    for p in harness.emit_report(report, a.out, a.format):
        print(p)


def cmd_report(a):
    report = harness.load_report_json(Path(a.input).read_text())
    for p in harness.emit_report(report, a.out, a.format):
        print(p)


# ---------------------------------------------------------------- parser


def _add_model_shape(p):
    p.add_argument("--D", type=int, default=4)
    p.add_argument("--C", type=int, default=8)
    p.add_argument("--G", type=int, default=16)
    p.add_argument("--G0", type=int, default=32)
    p.add_argument("--up-stages", type=int, default=1, choices=(1, 2))


def _add_residual(p):
    p.add_argument("--residual", action="store_true", help="network predicts a correction to the input")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="miotsr", description=__doc__.splitlines()[0])
    parser.add_argument("--config", help="TOML file of option defaults (keys are flag names)")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", parser_class=_Parser)

    p = sub.add_parser("encode", help="compress a PPM/PGM image")
    p.add_argument("input")
    p.add_argument("output")
    p.add_argument("--quality", type=int, default=10)
    p.add_argument("--variant", type=int, default=1, choices=(1, 2))
    p.add_argument("--scale", type=int, default=4, choices=(4,))
    p.add_argument("--no-subsample", action="store_true", help="keep chroma at full resolution")
    p.set_defaults(func=cmd_encode)

    p = sub.add_parser("decode", help="decompress a bitstream to PPM/PGM")
    p.add_argument("input")
    p.add_argument("output")
    p.set_defaults(func=cmd_decode)

    p = sub.add_parser("synth", help="render procedural test/source images")
    p.add_argument("--out", required=True)
    p.add_argument("--count", type=int, default=24)
    p.add_argument("--size", type=_size, default=(768, 512), help="WIDTHxHEIGHT")
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("prepare-data", help="random resize + 256x256 crop of every source image")
    p.add_argument("--dataset", required=True, help="directory of source PPM/PGM images")
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_prepare)

    p = sub.add_parser("train", help="train a restoration model")
    p.add_argument("--dataset", required=True, help="prepared crop directory")
    p.add_argument("--out", required=True, help="weights file to write")
    p.add_argument("--variant", type=int, default=1, choices=(1, 2))
    p.add_argument("--quality", type=_ints, help="comma-separated training qualities")
    p.add_argument("--steps", type=int, default=500)
    p.add_argument("--batch", type=int, default=16)
    p.add_argument("--patch", type=int, default=96)
    p.add_argument("--lr", type=float, default=1e-4)
    p.add_argument("--loss", choices=("l1", "l2"), default="l1")
    p.add_argument("--log-every", type=int, default=50)
    p.add_argument("--trace", help="write the per-step loss trace here")
    p.add_argument("--seed", type=int, default=0)
    _add_model_shape(p)
    _add_residual(p)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("restore", help="run a trained model on a bitstream or PPM")
    p.add_argument("input")
    p.add_argument("output")
    p.add_argument("--model", required=True)
    _add_residual(p)
    p.set_defaults(func=cmd_restore)

    p = sub.add_parser("sweep", help="quality sweep over a corpus for both variants")
    p.add_argument("--dataset", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--model", action="append", help="weights file (repeat for both variants)")
    p.add_argument("--variant", type=int, choices=(1, 2), help="only sweep this variant")
    p.add_argument("--quality", dest="grid1", type=_ints, help="variant-1 qualities")
    p.add_argument("--quality2", dest="grid2", type=_ints, help="variant-2 qualities")
    p.add_argument("--no-restore", action="store_true", help="codec-only sweep, no models")
    p.add_argument("--format", choices=("csv", "json"), default="csv")
    p.add_argument("--radio", help="e_elec,e_amp,d,gamma")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--workers", type=int, default=1, help="threads running pipeline jobs")
    _add_residual(p)
    p.set_defaults(func=cmd_sweep)

    p = sub.add_parser("report", help="re-emit a saved JSON sweep report")
    p.add_argument("input")
    p.add_argument("--out", required=True)
    p.add_argument("--format", choices=("csv", "json"), default="csv")
    p.set_defaults(func=cmd_report)
    return parser


def _parse(argv):
    parser = build_parser()
    args = parser.parse_args(argv)
    if args.command is None:
        raise UsageError("a command is required (see --help)")
    if args.config:
        config = read_config(args.config)
        subparser = parser._subparsers._group_actions[0].choices[args.command]
        rest = list(argv)
        # re-parse the sub-command with config values as its defaults
        idx = rest.index(args.command)
        sub_args = _apply_config(subparser, rest[idx + 1 :], config)
        for k, v in vars(sub_args).items():
            setattr(args, k, v)
    return args


def main(argv=None) -> int:
    argv = sys.argv[1:] if argv is None else list(argv)
    try:
        args = _parse(argv)
    except UsageError as e:
        print(e, file=sys.stderr)
        return EXIT_USAGE
    except SystemExit as e:  # --help
        return EXIT_OK if not e.code else EXIT_USAGE
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    try:
        args.func(args)
    except UsageError as e:
        print(e, file=sys.stderr)
        return EXIT_USAGE
    except rdn.ModelError as e:
        print(f"model error: {e}", file=sys.stderr)
        return EXIT_MODEL
    except harness.PipelineError as e:
        code = EXIT_MODEL if isinstance(e.cause, rdn.ModelError) else EXIT_DATA
        print(f"error: {e}", file=sys.stderr)
        return code
    except rdn.TrainingDiverged as e:
        print(f"model error: {e}", file=sys.stderr)
        return EXIT_MODEL
    except (OSError, ValueError) as e:
        print(f"data error: {e}", file=sys.stderr)
        return EXIT_DATA
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
