"""Command-line experiment runner.

    keystroke-sim run --scenario x86-t460s --attack procfs --defense on --seed 1 --out run.csv
    keystroke-sim sweep --scenario x86-t460s --seeds 20 --out sweep.csv
    keystroke-sim multitrace --reps 20 --sigma-ms 40 --defense on --out mt.csv
    keystroke-sim dump-trace --attack rdtsc --defense off --out trace.csv

CSV goes to ``--out`` (``-`` for stdout); summaries go to stdout.  Parameter
errors exit with status 2.
"""

from __future__ import annotations

import argparse
import contextlib
import logging
import sys
from dataclasses import replace

from . import experiments as exp
from . import multitrace as mt
from .attackers import ATTACKS
from .scenarios import PRESETS, load_scenario
from .simcore import ParameterError, ms, seconds

log = logging.getLogger("keystroke_sim")


@contextlib.contextmanager
def _output(path: str):
    if path == "-":
        yield sys.stdout
    else:
        with open(path, "w", newline="", encoding="utf-8") as fh:
            yield fh


def _on_off(text: str) -> bool:
    if text not in ("on", "off"):
        raise argparse.ArgumentTypeError("expected 'on' or 'off'")
    return text == "on"


def _seed(text: str) -> int:
    v = int(text, 0)
    if not 0 <= v < 2**64:
        raise argparse.ArgumentTypeError("seed must be an unsigned 64-bit integer")
    return v


def _positive_int(text: str) -> int:
    v = int(text)
    if v < 1:
        raise argparse.ArgumentTypeError("must be a positive integer")
    return v


def _span(args) -> int | None:
    return None if args.span_s is None else seconds(args.span_s)


def cmd_run(args) -> int:
    scenario = load_scenario(args.scenario)
    report = exp.run(scenario, args.attack, args.defense, args.seed, span=_span(args))
    with _output(args.out) as fh:
        fh.write(exp.reports_to_csv([report]))
    return 0


def cmd_sweep(args) -> int:
    scenario = load_scenario(args.scenario)
    attacks = args.attacks.split(",") if args.attacks else [a for a in exp.DEFAULT_ATTACKS if a in scenario.attackers]
    reports = exp.sweep(scenario, attacks, range(1, args.seeds + 1), span=_span(args), jobs=args.jobs)
    with _output(args.out) as fh:
        fh.write(exp.reports_to_csv(reports))
    if args.out != "-":
        sys.stdout.write(exp.summary_to_text(exp.summarize(reports)))
    return 0


def cmd_multitrace(args) -> int:
    params = mt.PasswordAttackParams(
        n_keys=args.n_keys,
        span=seconds(args.span_s),
        sigma=ms(args.sigma_ms),
        bin=ms(args.bin_ms),
        tolerance=None if args.tolerance_ms is None else ms(args.tolerance_ms),
        max_traces=args.max_traces,
    )
    params = mt.with_defense(params, args.defense)
    if args.fake_rate is not None:
        params = replace(params, defense=_defense_at_rate(params.defense, args.fake_rate))
    result = mt.required_traces(params, args.seed, args.reps, jobs=args.jobs)
    with _output(args.out) as fh:
        fh.write(_multitrace_csv(result))
    if args.out != "-":
        q1, q2, q3 = result.quantiles()
        print(
            f"mean required traces {result.mean:.1f} (quartiles {q1:g}/{q2:g}/{q3:g}, "
            f"{result.n_censored} censored); above {result.threshold_traces}: {str(result.exceeds_threshold).lower()}"
        )
    return 0


def _defense_at_rate(cfg, rate: float):
    """Injection window ``[0, 2/rate]`` giving ``rate`` events per second; rate 0 disables it."""
    if rate < 0:
        raise ParameterError("fake rate must be non-negative")
    if rate == 0:
        return replace(cfg, enabled=False)
    return replace(cfg, enabled=True, inj_lo=0, inj_hi=round(2e9 / rate))


def _multitrace_csv(result: mt.RequiredTraces) -> str:
    lines = [",".join(mt.RESULTS_CSV_HEADER)]
    lines += [",".join(str(x) for x in r.row()) for r in result.reps]
    return "\n".join(lines) + "\n"


def cmd_dump_trace(args) -> int:
    scenario = load_scenario(args.scenario)
    scenario.attacker(args.attack)
    world = exp.build_world(scenario, args.defense, args.seed, seconds(args.span_s))
    trace = exp.probe_trace(scenario, args.attack, world, args.seed)
    with _output(args.out) as fh:
        trace.write_csv(fh)
    return 0


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="keystroke-sim", description="Keystroke side-channel and fake-keystroke defense simulator.")
    p.add_argument("-v", "--verbose", action="store_true", help="debug logging on stderr")
    sub = p.add_subparsers(dest="command", required=True)

    def scenario_arg(sp):
        sp.add_argument("--scenario", default="x86-t460s", help=f"preset ({', '.join(PRESETS)}) or JSON file")

    def out_arg(sp):
        sp.add_argument("--out", default="-", help="CSV output path, '-' for stdout")

    r = sub.add_parser("run", help="one attack, one defense state, one seed")
    scenario_arg(r)
    r.add_argument("--attack", required=True, choices=ATTACKS)
    r.add_argument("--defense", type=_on_off, default=False, metavar="on|off")
    r.add_argument("--seed", type=_seed, default=1)
    r.add_argument("--span-s", type=float, default=None, help="simulated seconds (scenario default if omitted)")
    out_arg(r)
    r.set_defaults(func=cmd_run)

    s = sub.add_parser("sweep", help="attack x defense x seed grid with a summary table")
    scenario_arg(s)
    s.add_argument("--seeds", type=_positive_int, default=20, help="seeds 1..N")
    s.add_argument("--attacks", default=None, help="comma-separated attack names")
    s.add_argument("--span-s", type=float, default=None)
    s.add_argument("--jobs", type=_positive_int, default=1)
    out_arg(s)
    s.set_defaults(func=cmd_sweep)

    m = sub.add_parser("multitrace", help="traces needed to recover a password by averaging")
    m.add_argument("--reps", type=_positive_int, default=20)
    m.add_argument("--sigma-ms", type=float, default=40.0)
    m.add_argument("--defense", type=_on_off, default=True, metavar="on|off")
    m.add_argument("--fake-rate", type=float, default=None, help="fake events per second (overrides the default 100)")
    m.add_argument("--n-keys", type=_positive_int, default=8)
    m.add_argument("--span-s", type=float, default=2.0)
    m.add_argument("--bin-ms", type=float, default=1.0)
    m.add_argument("--tolerance-ms", type=float, default=None, help="match window (default: sigma, at least one bin)")
    m.add_argument("--max-traces", type=_positive_int, default=8192)
    m.add_argument("--seed", type=_seed, default=1)
    m.add_argument("--jobs", type=_positive_int, default=1)
    out_arg(m)
    m.set_defaults(func=cmd_multitrace)

    d = sub.add_parser("dump-trace", help="raw probe samples for plotting")
    scenario_arg(d)
    d.add_argument("--attack", required=True, choices=ATTACKS)
    d.add_argument("--defense", type=_on_off, default=False, metavar="on|off")
    d.add_argument("--seed", type=_seed, default=1)
    d.add_argument("--span-s", type=float, default=5.0)
    out_arg(d)
    d.set_defaults(func=cmd_dump_trace)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except ParameterError as exc:
        print(f"keystroke-sim: error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
