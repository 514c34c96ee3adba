"""Command-line entry point: gen-data, train, eval, profile, gradcheck, sweep.

Exit codes: 0 success, 1 invalid input or usage, 2 runtime or numeric failure.
Every command writes ``resolved_config.json`` into ``--out``; passing that file
back through ``--config`` repeats the run.
"""
from __future__ import annotations

import argparse
import json
import logging
import sys
from dataclasses import asdict
from pathlib import Path

import numpy as np

from .arch import TABLE1_CONFIGS, ArchConfig, arch_from_dict, resolve_arch
from .dataset import SegSample, generate_scene, read_manifest, write_samples
from .gradcheck import network_check, primitive_suite
from .metrics import MetricsTable, evaluate, render_table
from .profiler import emit_report, profile
from .training import TrainConfig, load_checkpoint, train

log = logging.getLogger("segdec")

CONFIG_NAME = "resolved_config.json"


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError(f"{self.prog}: error: {message}")


def parse_input(text: str) -> tuple[int, int, int]:
    try:
        c, h, w = (int(v) for v in text.lower().split("x"))
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected CxHxW, got {text!r}") from None
    if min(c, h, w) < 1:
        raise argparse.ArgumentTypeError(f"dimensions must be positive, got {text!r}")
    return c, h, w


def load_data(spec: str, input_shape=(3, 48, 160)) -> list[SegSample]:
    """``gen:SEED:COUNT[:START]`` or a manifest path.

    Generated sample ``i`` uses scene seed ``SEED * 1_000_003 + START + i``,
    the same numbering as ``make_split``; a validation set that follows a
    training set of N samples is therefore ``gen:SEED:M:N``.
    """
    if spec.startswith("gen:"):
        parts = spec.split(":")[1:]
        if len(parts) not in (2, 3):
            raise ValueError(f"data spec must be gen:SEED:COUNT[:START], got {spec!r}")
        seed, count, start = (int(v) for v in parts + ["0"] * (3 - len(parts)))
        if count < 1:
            raise ValueError("sample count must be >= 1")
        _, h, w = input_shape
        return [generate_scene(seed * 1_000_003 + start + i, h, w) for i in range(count)]
    return read_manifest(spec)


def _arch(args) -> ArchConfig:
    if isinstance(args.arch, dict):
        arch = arch_from_dict(args.arch, args.input)
    else:
        arch = resolve_arch(args.arch, args.input)
    args.input = arch.encoder.input_shape
    return arch


def _write_config(out: Path, args, extra: dict | None = None) -> dict:
    out.mkdir(parents=True, exist_ok=True)
    doc = {k: v for k, v in vars(args).items() if k not in ("config", "func")}
    if doc.get("input") is not None:
        doc["input"] = list(doc["input"])
    doc.update(extra or {})
    (out / CONFIG_NAME).write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n")
    return doc


def _train_config(args, arch: ArchConfig) -> TrainConfig:
    batch = args.batch or arch.decoder.batch_size or 4
    return TrainConfig(lr0=args.lr0, max_iters=args.iters, batch_size=batch, seed=args.seed,
                       precision=args.precision, log_every=args.log_every)


# ---------------------------------------------------------------------------
# commands


def cmd_gen_data(args) -> int:
    out = Path(args.out)
    samples = load_data(args.data, args.input)
    manifest = write_samples(samples, out, args.prefix)
    _write_config(out, args)
    print(f"wrote {len(samples)} samples; manifest {manifest}")
    return 0


def _train_one(args, arch: ArchConfig, out: Path, train_set, val_set) -> MetricsTable | None:
    graph = arch.build()
    cfg = _train_config(args, arch)
    _write_config(out, args, {"arch": arch.to_dict(), "train": asdict(cfg)})
    on_log = lambda it, loss, lr: log.info("iter %d loss %.5f lr %.3g", it, loss, lr)
    res = train(graph, train_set, cfg, out_dir=out, on_log=on_log, meta={"arch": arch.to_dict()})
    if not val_set:
        return None
    table = evaluate(graph, res.params, res.buffers, val_set)
    (out / "metrics.json").write_text(table.to_json() + "\n")
    return table


def cmd_train(args) -> int:
    arch = _arch(args)
    out = Path(args.out)
    train_set = load_data(args.data, arch.encoder.input_shape)
    val_set = load_data(args.val, arch.encoder.input_shape) if args.val else []
    table = _train_one(args, arch, out, train_set, val_set)
    print(f"checkpoint {out / 'checkpoint'}")
    if table is not None:
        print(render_table([(arch.decoder.name or arch.source, table)]))
    return 0


def cmd_eval(args) -> int:
    ckpt_dir = Path(args.checkpoint)
    probe = json.loads((ckpt_dir / "manifest.json").read_text())
    if args.arch is None:
        if "arch" not in probe.get("meta", {}):
            raise ValueError(f"{ckpt_dir} records no architecture; pass --arch")
        args.arch = probe["meta"]["arch"]
    arch = _arch(args)
    graph = arch.build()
    precision = probe.get("meta", {}).get("train", {}).get("precision", "float64")
    ckpt = load_checkpoint(ckpt_dir, np.dtype(precision))
    samples = load_data(args.data, arch.encoder.input_shape)
    table = evaluate(graph, ckpt.params, ckpt.buffers, samples)
    out = Path(args.out)
    _write_config(out, args, {"arch": arch.to_dict()})
    (out / "metrics.json").write_text(table.to_json() + "\n")
    if args.format == "json":
        print(table.to_json())
    else:
        print(render_table([(arch.decoder.name or arch.source, table)]))
    return 0


def cmd_profile(args) -> int:
    arch = _arch(args)
    report = profile(arch.build(), arch.encoder.input_shape)
    text = emit_report(report, args.format)
    out = Path(args.out)
    _write_config(out, args, {"arch": arch.to_dict()})
    (out / f"profile.{'json' if args.format == 'json' else 'txt'}").write_text(text + "\n")
    print(text)
    return 0


def cmd_gradcheck(args) -> int:
    rows = []
    for seed in range(args.seed, args.seed + args.seeds):
        for name, rep in primitive_suite(seed, tolerance=args.tol).items():
            rows.append((f"seed {seed} {name}", rep))
    if args.arch is not None:
        arch = _arch(args)
        reps = network_check(arch.build(), args.seed, arch.encoder.input_shape, tolerance=args.tol,
                             max_params=args.max_params)
        rows += [(f"network {name}", rep) for name, rep in reps.items()]
    out = Path(args.out)
    _write_config(out, args)
    doc = {name: {"max_rel_error": rep.max_rel_error, "checked": rep.checked, "passed": rep.passed}
           for name, rep in rows}
    (out / "gradcheck.json").write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n")
    failed = [name for name, rep in rows if not rep.passed]
    if args.format == "json":
        print(json.dumps(doc, indent=2, sort_keys=True))
    else:
        for name, rep in rows:
            print(f"{'ok  ' if rep.passed else 'FAIL'} {rep.max_rel_error:.3e}  {name}")
        print(f"{len(rows) - len(failed)}/{len(rows)} checks within {args.tol:g}")
    return 2 if failed else 0


def cmd_sweep(args) -> int:
    names = [a for spec in args.archs for a in spec.split(",") if a]
    if names == ["table1"]:
        names = list(TABLE1_CONFIGS)
    if len(names) < 2:
        raise ValueError("a sweep needs at least two configurations")
    # every member must build before any training starts; without --input
    # each keeps its own default resolution (the five-stage D7 needs h % 32 == 0)
    archs = [resolve_arch(n, args.input) for n in names]
    for a in archs:
        a.build()
    out = Path(args.out)
    _write_config(out, args, {"members": [a.to_dict() for a in archs]})
    if args.build_only:
        print(f"{len(archs)} configurations parsed and built")
        return 0
    cache: dict = {}

    def data(spec, shape):
        if (spec, shape) not in cache:
            cache[spec, shape] = load_data(spec, shape)
        return cache[spec, shape]

    rows, failures = [], []
    for i, (name, arch) in enumerate(zip(names, archs)):
        shape = arch.encoder.input_shape
        train_set, val_set = data(args.data, shape), data(args.val, shape)
        member = out / f"{i:02d}_{name.replace('(', '').replace(')', '_').strip('_') or 'empty'}"
        try:
            table = _train_one(args, arch, member, train_set, val_set)
        except (ArithmeticError, RuntimeError) as exc:
            log.error("%s failed: %s", name, exc)
            failures.append(name)
            table = MetricsTable.from_values([np.nan] * 3, [np.nan] * 3, np.nan)
            name = f"{name} [FAILED]"
        rows.append((name, table))
    text = render_table(rows)
    (out / "table.txt").write_text(text + "\n")
    print(text)
    return 2 if failures else 0


# ---------------------------------------------------------------------------
# parser


def build_parser() -> _Parser:
    parser = _Parser(prog="segdec", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    def common(p, out, arch=True, train=False):
        p.add_argument("--out", default=out, help="output directory")
        p.add_argument("--seed", type=int, default=0)
        p.add_argument("--format", choices=("text", "json"), default="text")
        p.add_argument("--config", help="resolved_config.json of an earlier run to repeat")
        p.add_argument("--input", type=parse_input, default=None, help="CxHxW, e.g. 3x48x160")
        if arch:
            p.add_argument("--arch", default="Optimal", help="preset, mNp layout string, or JSON path")
        if train:
            p.add_argument("--iters", type=int, default=3000)
            p.add_argument("--batch", type=int, default=None, help="default: the preset's, else 4")
            p.add_argument("--lr0", type=float, default=5e-4)
            p.add_argument("--precision", choices=("float32", "float64"), default="float32")
            p.add_argument("--log-every", type=int, default=50)

    p = sub.add_parser("gen-data", help="write synthetic scenes as PPM/PGM plus a manifest")
    common(p, "runs/data", arch=False)
    p.add_argument("--data", default="gen:0:400", help="gen:SEED:COUNT[:START]")
    p.add_argument("--prefix", default="sample")
    p.set_defaults(func=cmd_gen_data)

    p = sub.add_parser("train", help="train one architecture")
    common(p, "runs/train", train=True)
    p.add_argument("--data", default="gen:0:400")
    p.add_argument("--val", default=None, help="optional validation data, evaluated after training")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="evaluate a checkpoint")
    common(p, "runs/eval")
    p.set_defaults(arch=None)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", default="gen:0:50:400")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("profile", help="parameters, MACs, receptive field, activation memory")
    common(p, "runs/profile")
    p.set_defaults(func=cmd_profile)

    p = sub.add_parser("gradcheck", help="finite-difference checks of every primitive and, with --arch, a network")
    common(p, "runs/gradcheck")
    p.set_defaults(arch=None)
    p.add_argument("--tol", type=float, default=1e-4)
    p.add_argument("--seeds", type=int, default=1, help="number of primitive-suite seeds")
    p.add_argument("--max-params", type=int, default=24, help="parameter tensors probed in the network check")
    p.set_defaults(func=cmd_gradcheck)

    p = sub.add_parser("sweep", help="train several architectures identically and tabulate them")
    common(p, "runs/sweep", arch=False, train=True)
    p.add_argument("--archs", nargs="+", default=["D1", "Optimal"],
                   help="names or layouts (comma or space separated); 'table1' for all 14")
    p.add_argument("--data", default="gen:0:400")
    p.add_argument("--val", default="gen:0:50:400")
    p.add_argument("--build-only", action="store_true", help="parse and build every member, no training")
    p.set_defaults(func=cmd_sweep)
    return parser


def _defaults_for(args) -> dict:
    doc = json.loads(Path(args.config).read_text())
    keep = {k: v for k, v in doc.items() if k not in ("command", "train", "members", "config")}
    if keep.get("input") is not None:
        keep["input"] = tuple(keep["input"])
    return keep


def parse_args(argv) -> argparse.Namespace:
    parser = build_parser()
    args = parser.parse_args(argv)
    if args.config:
        sub = parser._subparsers._group_actions[0].choices[args.command]
        sub.set_defaults(**_defaults_for(args))
        args = parser.parse_args(argv)
    if "input" in vars(args) and args.input is not None:
        args.input = tuple(args.input)
    if args.command == "gen-data" and args.input is None:
        args.input = (3, 48, 160)
    if args.command == "gradcheck" and args.input is None:
        args.input = (3, 16, 32)  # the network probe re-runs the forward pass per coordinate
    return args


def main(argv=None) -> int:
    try:
        args = parse_args(sys.argv[1:] if argv is None else argv)
    except UsageError as exc:
        print(exc, file=sys.stderr)
        return 1
    except SystemExit as exc:  # --help
        return int(exc.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    try:
        return args.func(args)
    except (ValueError, KeyError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except (ArithmeticError, RuntimeError) as exc:
        print(f"failed: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
