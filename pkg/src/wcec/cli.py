"""Command-line interface: ``wcec analyze | replay | fit | simulate | models``."""

from __future__ import annotations

import argparse
import logging
import os
import sys

from . import __version__
from .driver import (EXIT_ANALYSIS, EXIT_BUDGET, EXIT_CONFIG, EXIT_OK, AnalysisConfig, analyze,
                     emit_dot, emit_report_xml, parse_config, replay_cli, summary_text)
from .errors import ConfigError, WcecError


def _addr(text):
    try:
        return int(text, 0)
    except ValueError:
        raise argparse.ArgumentTypeError(f"not an address: {text!r}") from None


def _entry(text):
    try:
        return int(text, 0)
    except ValueError:
        return text


def _addr_list(text):
    return tuple(_addr(a) for a in text.split(",") if a.strip())


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_CONFIG, f"{self.prog}: error: {message}\n")


def build_parser():
    p = _Parser(prog="wcec", description="Static worst-case energy estimation for ARMv6-M binaries.")
    p.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    a = sub.add_parser("analyze", help="estimate the worst-case energy of a binary")
    a.add_argument("--config", help="flat configuration file; command-line flags override it")
    a.add_argument("--binary")
    a.add_argument("--raw", action="store_true", default=None, help="treat the binary as a raw image")
    a.add_argument("--base", type=_addr)
    a.add_argument("--entry", type=_entry)
    a.add_argument("--annotations")
    a.add_argument("--model")
    a.add_argument("--contexts", type=int)
    a.add_argument("--loop-contexts", choices=("first-rest", "none"))
    a.add_argument("--report")
    a.add_argument("--dot")
    a.add_argument("--lp")
    a.add_argument("--oracle", action="store_true", default=None)
    a.add_argument("--stop", type=_addr_list)
    a.add_argument("--max-steps", type=int)
    a.add_argument("--budget", type=float, help="solver time budget in seconds (default 600)")

    r = sub.add_parser("replay", help="price measured counters with a model")
    r.add_argument("--model", required=True)
    r.add_argument("--trace", required=True, help="counter CSV, '-' for stdin")

    f = sub.add_parser("fit", help="fit a no-intercept NNLS model to a measured trace")
    f.add_argument("--trace", required=True)
    f.add_argument("--counters", required=True, help="comma-separated candidate counter columns")
    f.add_argument("--strategy", choices=("bottom-up", "top-down", "exhaustive", "none"), default="none",
                   help="subset search; 'none' fits all given counters")
    f.add_argument("--intercept", action="store_true")
    f.add_argument("--name", default="fitted")
    f.add_argument("--unit", default="nJ")
    f.add_argument("--seed", type=int, default=0)
    f.add_argument("--test-fraction", type=float, default=0.3)
    f.add_argument("--output", help="write the model file here")

    s = sub.add_parser("simulate", help="run the instruction-set simulator")
    s.add_argument("--binary", required=True)
    s.add_argument("--raw", action="store_true")
    s.add_argument("--base", type=_addr)
    s.add_argument("--entry", type=_entry)
    s.add_argument("--stop", type=_addr_list, default=())
    s.add_argument("--max-steps", type=int, default=1_000_000)
    s.add_argument("--model", default="cortex-m0.v1")
    s.add_argument("--counters-out", help="write the counter CSV here")
    s.add_argument("--trace-out", help="write the (step, pc) CSV here")

    sub.add_parser("models", help="list built-in models")
    return p


def _read(path):
    if path == "-":
        return sys.stdin.read()
    with open(path, encoding="utf-8") as fh:
        return fh.read()


def _analyze(args):
    if args.config:
        try:
            text = _read(args.config)
        except OSError as exc:
            raise ConfigError(f"cannot read configuration: {exc}") from None
        cfg = parse_config(text, os.path.dirname(os.path.abspath(args.config)))
    else:
        cfg = AnalysisConfig()
    for key in ("binary", "raw", "base", "entry", "annotations", "model", "contexts", "loop_contexts",
                "report", "dot", "lp", "oracle", "stop", "max_steps", "budget"):
        val = getattr(args, key)
        if val is not None:
            setattr(cfg, key, val)
    rep = analyze(cfg)
    if cfg.report:
        emit_report_xml(rep, cfg.report)
    if cfg.dot and rep.solution is not None:
        emit_dot(rep, rep.ctx_cfg, cfg.dot)
    if cfg.lp:
        from .ipet import export_lp

        with open(cfg.lp, "w", encoding="utf-8", newline="\n") as fh:
            fh.write(export_lp(rep.problem))
    sys.stdout.write(summary_text(rep))
    return EXIT_BUDGET if rep.status == "RelaxationBound" else EXIT_OK


def _replay(args):
    text, _ = replay_cli(args.model, _read(args.trace))
    sys.stdout.write(text)
    return EXIT_OK


def _fit(args):
    from .fitting import fit_nnls, search_subset, split_indices
    from .models import dump_model, format_quantity, read_trace

    trace = read_trace(_read(args.trace))
    counters = [c.strip() for c in args.counters.split(",") if c.strip()]
    if args.strategy == "none":
        res = fit_nnls(trace, counters, args.intercept, name=args.name, unit=args.unit)
        model, mape = res.model, res.train_mape
        print(f"train MAPE {mape:.4f}%")
    else:
        split = split_indices(len(trace), args.test_fraction, args.seed)
        res = search_subset(trace, counters, args.strategy, split=split, with_intercept=args.intercept,
                            unit=args.unit)
        model = res.model
        print(f"{args.strategy}: counters {','.join(res.counters)}; "
              f"train MAPE {res.train_mape:.4f}%, test MAPE {res.test_mape:.4f}%")
    for c in model.counters:
        print(f"  {c}\t{format_quantity(model.coefficients[c])}")
    print(f"  alpha\t{format_quantity(model.intercept)}")
    if args.output:
        from dataclasses import replace

        with open(args.output, "w", encoding="utf-8") as fh:
            fh.write(dump_model(replace(model, name=args.name)))
    return EXIT_OK


def _model(name):
    from .models import resolve_model

    try:
        return resolve_model(name)
    except WcecError as exc:
        raise ConfigError(str(exc)) from None


def _simulate(args):
    from . import sim
    from .loader import load_elf, load_raw
    from .models import format_quantity

    with open(args.binary, "rb") as fh:
        data = fh.read()
    if args.raw:
        if args.base is None or not isinstance(args.entry, int):
            raise ConfigError("raw binaries need --base and a numeric --entry")
        image = load_raw(data, args.base, args.entry)
    else:
        image = load_elf(data)
    start = image.entry
    if isinstance(args.entry, str):
        start = image.symbol(args.entry)
        if start is None:
            raise ConfigError(f"unknown entry symbol {args.entry!r}")
    elif isinstance(args.entry, int):
        start = args.entry
    model = _model(args.model)
    res = sim.run(image, start, args.stop, args.max_steps, record_pcs=bool(args.trace_out))
    for c, v in res.counters.items():
        print(f"{c}\t{v}")
    print(f"stop\t{res.stop_reason}" + (f" ({res.fault})" if res.fault else ""))
    print(f"model\t{format_quantity(sim.model_result(res, model))} {model.unit}")
    if args.counters_out:
        with open(args.counters_out, "w", encoding="utf-8") as fh:
            fh.write(sim.dump_counters(res))
    if args.trace_out:
        with open(args.trace_out, "w", encoding="utf-8") as fh:
            fh.write(res.trace_csv())
    return EXIT_ANALYSIS if res.fault else EXIT_OK


def _models(_args):
    from .models import builtin_models

    for m in builtin_models():
        print(f"{m.name}\t{m.mode}\t{m.unit}\t{','.join(m.counters)}")
    return EXIT_OK


def main(argv=None):
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    handler = {"analyze": _analyze, "replay": _replay, "fit": _fit, "simulate": _simulate,
               "models": _models}[args.command]
    try:
        return handler(args)
    except ConfigError as exc:
        print(f"wcec: configuration error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except WcecError as exc:
        print(f"wcec: {getattr(exc, 'stage', args.command)}: {exc}", file=sys.stderr)
        return EXIT_ANALYSIS
    except OSError as exc:
        print(f"wcec: {exc}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
