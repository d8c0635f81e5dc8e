"""Composition of victim, defense, attacker and scoring into reproducible runs."""

from __future__ import annotations

import csv
import io
import logging
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, replace
from typing import Iterable, Sequence

import numpy as np

from . import attackers as atk
from .defense import MergedStream, defended_emissions, injection_loop
from .metrics import METRICS_CSV_HEADER, FrameGrid, Metrics, always_one, evaluate, evaluate_per_detection, format_float
from .scenarios import Scenario, load_scenario
from .simcore import ParameterError, derive_rng
from .victim import Emissions, GroundTruth, generate_typing, inject_background

log = logging.getLogger(__name__)

DEFAULT_ATTACKS = ("procfs", "rdtsc", "flush-reload", "multi-pp-kernel")


@dataclass(frozen=True)
class World:
    """Everything an attacker can observe in one run, plus the ground truth."""

    truth: GroundTruth
    stream: MergedStream
    emissions: Emissions
    span: int


@dataclass(frozen=True)
class RunReport:
    scenario: str
    attack: str
    defense: bool
    seed: int
    metrics: Metrics
    runtime_s: float
    per_detection: Metrics | None = None
    baseline_fscore: float = float("nan")

    def row(self) -> tuple:
        m = self.metrics
        return (
            self.scenario,
            self.attack,
            "on" if self.defense else "off",
            self.seed,
            m.tp,
            m.fp,
            m.fn,
            format_float(m.precision),
            format_float(m.recall),
            format_float(m.fscore),
            format_float(m.advantage_pct),
        )


def build_world(scenario: Scenario, defense_on: bool, seed: int, span: int | None = None) -> World:
    """Victim typing, defense and background activity for one seed.

    Typing and background draws do not depend on the defense state, so
    on/off runs with the same seed see the same real keys and noise.
    """
    span = span or scenario.span
    truth = generate_typing(scenario.typing, span, derive_rng(seed, "typing"))
    cfg = scenario.defense if defense_on else _disabled(scenario)
    stream = injection_loop(truth, cfg, span, derive_rng(seed, "injection"))
    ems = defended_emissions(stream, scenario.pipeline, cfg, scenario.clock, derive_rng(seed, "pipeline"))
    bg = inject_background(scenario.pipeline, span, derive_rng(seed, "background"), scenario.clock)
    return World(truth, stream, Emissions.concat([ems, bg]), span)


def _disabled(scenario: Scenario):
    return replace(scenario.defense, enabled=False)


def attack_world(scenario: Scenario, attack: str, world: World, seed: int) -> atk.DetectionResult:
    cfg = scenario.attacker(attack)
    gen = derive_rng(seed, "attacker", attack)
    pipe = scenario.pipeline
    if attack == "procfs":
        return atk.procfs_attack(world.emissions, cfg, gen, calibration=world.truth, span=world.span)
    if attack == "rdtsc":
        return atk.rdtsc_attack(
            world.emissions, cfg, scenario.clock, gen, pipe=pipe, calibration=world.truth, span=world.span
        )
    if attack == "flush-reload":
        return atk.flush_reload_attack(
            world.emissions, pipe.lib_addresses[0], cfg, gen, world.span, lines=pipe.lib_addresses, calibration=world.truth
        )
    if attack in ("multi-pp-kernel", "multi-pp-buffer"):
        sets = pipe.kernel_sets if attack == "multi-pp-kernel" else pipe.buffer_sets
        return atk.multi_prime_probe_attack(world.emissions, sets, cfg, gen, world.span, calibration=world.truth)
    raise ParameterError(f"unknown attack {attack!r}")


def probe_trace(scenario: Scenario, attack: str, world: World, seed: int) -> atk.ProbeTrace:
    """Raw measurements of ``attack`` before thresholding, for plotting."""
    cfg = scenario.attacker(attack)
    gen = derive_rng(seed, "attacker", attack)
    pipe = scenario.pipeline
    if attack == "procfs":
        return atk.procfs_probe(world.emissions, cfg, gen, world.span)
    if attack == "rdtsc":
        return atk.rdtsc_probe(world.emissions, cfg, scenario.clock, gen, world.span)
    if attack == "flush-reload":
        return atk.flush_reload_probe(world.emissions, pipe.lib_addresses[0], cfg, gen, world.span, pipe.lib_addresses)
    if attack in ("multi-pp-kernel", "multi-pp-buffer"):
        sets = pipe.kernel_sets if attack == "multi-pp-kernel" else pipe.buffer_sets
        return atk.multi_prime_probe_trace(world.emissions, sets, cfg, gen, world.span)
    raise ParameterError(f"unknown attack {attack!r}")


def run(
    scenario: Scenario | str,
    attack: str,
    defense_on: bool,
    seed: int,
    span: int | None = None,
    world: World | None = None,
) -> RunReport:
    if isinstance(scenario, str):
        scenario = load_scenario(scenario)
    scenario.attacker(attack)
    start = time.perf_counter()
    world = world or build_world(scenario, defense_on, seed, span)
    det = attack_world(scenario, attack, world, seed)
    grid = FrameGrid.for_truth(world.truth)
    report = RunReport(
        scenario.name,
        attack,
        defense_on,
        seed,
        evaluate(det, world.truth, grid),
        time.perf_counter() - start,
        evaluate_per_detection(det, world.truth, grid),
        always_one(grid).fscore if grid.k_real else float("nan"),
    )
    log.debug("%s %s defense=%s seed=%d F=%.3f", scenario.name, attack, defense_on, seed, report.metrics.fscore)
    return report


def _cell(args) -> list[RunReport]:
    scenario, attacks, defense_on, seed, span = args
    world = build_world(scenario, defense_on, seed, span)
    return [run(scenario, a, defense_on, seed, world=world) for a in attacks]


def sweep(
    scenario: Scenario | str,
    attacks: Sequence[str] = DEFAULT_ATTACKS,
    seeds: Iterable[int] = range(1, 21),
    defense_states: Sequence[bool] = (False, True),
    span: int | None = None,
    jobs: int = 1,
) -> list[RunReport]:
    """Full (attack, defense state, seed) grid, rows in deterministic grid order."""
    if isinstance(scenario, str):
        scenario = load_scenario(scenario)
    attacks, seeds = list(attacks), list(seeds)
    if not attacks or not seeds or not defense_states:
        raise ParameterError("sweep needs non-empty attack, seed and defense lists")
    for a in attacks:
        scenario.attacker(a)
    # one world per (defense state, seed) is shared by all attacks
    tasks = [(scenario, attacks, d, s, span) for d in defense_states for s in seeds]
    if jobs > 1:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            results = list(pool.map(_cell, tasks))
    else:
        results = [_cell(t) for t in tasks]
    by_key = {(r.attack, r.defense, r.seed): r for cell in results for r in cell}
    return [by_key[(a, d, s)] for a in attacks for d in defense_states for s in seeds]


@dataclass(frozen=True)
class SummaryCell:
    attack: str
    defense: bool
    mean_fscore: float
    mean_precision: float
    mean_recall: float
    advantage_pct: float
    mean_fscore_per_detection: float
    n: int


def summarize(reports: Sequence[RunReport]) -> list[SummaryCell]:
    """Mean F per (attack, defense) cell and its advantage over always-one.

    The always-one baseline uses the mean key-frame density of the runs in
    the cell.
    """
    cells: dict[tuple[str, bool], list[RunReport]] = {}
    for r in reports:
        cells.setdefault((r.attack, r.defense), []).append(r)
    out = []
    for (attack, defense), rs in cells.items():
        f = float(np.mean([r.metrics.fscore for r in rs]))
        base = float(np.mean([r.baseline_fscore for r in rs]))
        out.append(
            SummaryCell(
                attack,
                defense,
                f,
                float(np.mean([r.metrics.precision for r in rs])),
                float(np.mean([r.metrics.recall for r in rs])),
                (f / base - 1) * 100,
                float(np.mean([r.per_detection.fscore for r in rs if r.per_detection is not None] or [np.nan])),
                len(rs),
            )
        )
    return out


def reports_to_csv(reports: Sequence[RunReport]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(METRICS_CSV_HEADER)
    for r in reports:
        w.writerow(r.row())
    return buf.getvalue()


def summary_to_text(cells: Sequence[SummaryCell]) -> str:
    lines = [f"{'attack':<17} {'defense':<7} {'mean F':>7} {'P':>6} {'R':>6} {'vs always-one':>14} {'F per-det':>9}"]
    for c in cells:
        lines.append(
            f"{c.attack:<17} {'on' if c.defense else 'off':<7} {c.mean_fscore:7.3f} {c.mean_precision:6.3f} "
            f"{c.mean_recall:6.3f} {c.advantage_pct:+13.1f}% {c.mean_fscore_per_detection:9.3f}"
        )
    return "\n".join(lines) + "\n"
