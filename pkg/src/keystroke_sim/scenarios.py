"""Scenario presets: victim, defense and attacker parameters in one JSON document."""

from __future__ import annotations

import json
from dataclasses import dataclass, field, fields
from importlib import resources
from pathlib import Path
from typing import Any, Mapping

from .attackers import ATTACKS, AUTO, AttackerConfig
from .defense import DefenseConfig
from .simcore import CpuClock, ParameterError, convert, ms, seconds, us
from .victim import TYPING_PRESETS, PipelineModel, TypingModel

PRESETS = ("x86-t460s", "nexus5", "oneplus3t")


@dataclass(frozen=True)
class Scenario:
    name: str
    typing: TypingModel
    pipeline: PipelineModel
    defense: DefenseConfig
    attackers: Mapping[str, AttackerConfig]
    clock: CpuClock = CpuClock()
    span: int = seconds(60)
    targets: Mapping[str, tuple[float, float]] = field(default_factory=dict)
    description: str = ""

    def __post_init__(self) -> None:
        unknown = set(self.attackers) - set(ATTACKS)
        if unknown:
            raise ParameterError(f"unknown attacks in scenario {self.name!r}: {sorted(unknown)}")
        unknown = set(self.targets) - set(ATTACKS)
        if unknown:
            raise ParameterError(f"targets for unknown attacks: {sorted(unknown)}")

    def attacker(self, attack: str) -> AttackerConfig:
        try:
            return self.attackers[attack]
        except KeyError:
            raise ParameterError(f"scenario {self.name!r} has no attack {attack!r}; known: {sorted(self.attackers)}") from None


def _check_keys(section: str, data: Mapping[str, Any], allowed) -> None:
    extra = set(data) - set(allowed)
    if extra:
        raise ParameterError(f"unknown keys in {section}: {sorted(extra)}")


def _typing_from(d: Mapping[str, Any]) -> TypingModel:
    _check_keys("typing", d, {"preset", "mean_interval_ms", "sigma_ms", "min_interval_ms"})
    base = TYPING_PRESETS[d["preset"]] if "preset" in d else TypingModel()
    if "preset" in d and d["preset"] not in TYPING_PRESETS:
        raise ParameterError(f"unknown typing preset {d['preset']!r}")
    return TypingModel(
        mean_interval=ms(d["mean_interval_ms"]) if "mean_interval_ms" in d else base.mean_interval,
        sigma=ms(d["sigma_ms"]) if "sigma_ms" in d else base.sigma,
        min_interval=ms(d["min_interval_ms"]) if "min_interval_ms" in d else base.min_interval,
    )


_PIPE_KEYS = {f.name for f in fields(PipelineModel)} - {"cache_noise_spread"} | {"cache_noise_spread_us"}


def _pipeline_from(d: Mapping[str, Any]) -> PipelineModel:
    _check_keys("pipeline", d, _PIPE_KEYS)
    kw = dict(d)
    if "cache_noise_spread_us" in kw:
        kw["cache_noise_spread"] = us(kw.pop("cache_noise_spread_us"))
    for k in ("lib_addresses", "kernel_sets", "buffer_sets"):
        if k in kw:
            kw[k] = tuple(int(x, 0) if isinstance(x, str) else int(x) for x in kw[k])
    return PipelineModel(**kw)


def _defense_from(d: Mapping[str, Any]) -> DefenseConfig:
    _check_keys("defense", d, {"inj_lo_ms", "inj_hi_ms", "handler_delay_max_us", "layers"})
    base = DefenseConfig()
    return DefenseConfig(
        enabled=True,
        inj_lo=ms(d.get("inj_lo_ms", base.inj_lo / 1e6)),
        inj_hi=ms(d.get("inj_hi_ms", base.inj_hi / 1e6)),
        handler_delay_max=us(d.get("handler_delay_max_us", base.handler_delay_max / 1e3)),
        layers=frozenset(d.get("layers", base.layers)),
    )


_ATTACKER_KEYS = {
    "probe_interval_cycles",
    "probe_interval_us",
    "threshold",
    "n_sets",
    "smooth_window_us",
    "miss_prob",
    "fp_rate",
    "jitter",
}


def _attacker_from(name: str, d: Mapping[str, Any], clock: CpuClock) -> AttackerConfig:
    _check_keys(f"attackers.{name}", d, _ATTACKER_KEYS)
    if ("probe_interval_cycles" in d) == ("probe_interval_us" in d):
        raise ParameterError(f"attackers.{name}: give exactly one of probe_interval_cycles / probe_interval_us")
    probe = convert(clock, d["probe_interval_cycles"]) if "probe_interval_cycles" in d else us(d["probe_interval_us"])
    thr = d.get("threshold", AUTO)
    kw = {k: d[k] for k in ("n_sets", "miss_prob", "fp_rate", "jitter") if k in d}
    if "smooth_window_us" in d:
        kw["smooth_window"] = us(d["smooth_window_us"])
    return AttackerConfig(probe_interval=probe, threshold=thr if isinstance(thr, str) else float(thr), **kw)


def scenario_from_dict(data: Mapping[str, Any]) -> Scenario:
    _check_keys(
        "scenario",
        data,
        {"name", "description", "freq_hz", "span_s", "typing", "pipeline", "defense", "attackers", "targets"},
    )
    if "name" not in data:
        raise ParameterError("scenario needs a name")
    clock = CpuClock(int(data.get("freq_hz", CpuClock().freq_hz)))
    targets = {}
    for k, v in data.get("targets", {}).items():
        if len(v) != 2:
            raise ParameterError(f"target for {k!r} must be [fscore_off, fscore_on]")
        targets[k] = (float(v[0]), float(v[1]))
    return Scenario(
        name=str(data["name"]),
        description=str(data.get("description", "")),
        clock=clock,
        span=seconds(data.get("span_s", 60)),
        typing=_typing_from(data.get("typing", {})),
        pipeline=_pipeline_from(data.get("pipeline", {})),
        defense=_defense_from(data.get("defense", {})),
        attackers={k: _attacker_from(k, v, clock) for k, v in data.get("attackers", {}).items()},
        targets=targets,
    )


def load_scenario(name_or_path: str | Path) -> Scenario:
    """Built-in preset by name, or a JSON file path."""
    if str(name_or_path) in PRESETS:
        text = resources.files("keystroke_sim.presets").joinpath(f"{name_or_path}.json").read_text("utf-8")
    else:
        p = Path(name_or_path)
        if not p.is_file():
            raise ParameterError(f"unknown scenario {str(name_or_path)!r}; presets: {', '.join(PRESETS)}")
        text = p.read_text("utf-8")
    try:
        data = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ParameterError(f"scenario file is not valid JSON: {exc}") from exc
    return scenario_from_dict(data)
