"""Scenario files: flat sectioned text, canonical hashing, validation.

Grammar (INI-style, `#` comments, case-sensitive keys):

    [model]
    kind = averaged              # averaged | switched
    t_end = 0.4                  # s
    sample_rate = 20000          # Hz (averaged output grid)
    fsw = 10000                  # Hz (switched only)
    steps_per_period = 200       # switched only
    sample_stride = 1            # switched storage decimation
    theta_bar = 0.5555555555555556, 0.726, -0.018

    [controller]
    kind = ph_pi                 # fixed_theta | ph_p | ph_dae | ph_pi | cascaded_pi | bass
    gamma = 1e5
    delta = 1.5

    [params]                     # EvcsParams overrides, optional
    R_f = 0.1

    [initial]                    # additive deviations by port alias, optional
    i_L = 50.0

    [disturbance.1]              # any number of windows
    t0 = 0.02
    t1 = 0.12
    quantity = v_dc
    value = 400.0

    [outputs]
    quantities = v_dc, i_gq
"""

import configparser
import hashlib
import io
import json
from dataclasses import dataclass, field, fields, replace

import numpy as np

from .evcs import PAPER_THETA, EvcsParams, EvcsStateLayout

MODEL_KINDS = ("averaged", "switched")
CONTROLLER_KINDS = ("fixed_theta", "ph_p", "ph_dae", "ph_pi", "cascaded_pi", "bass")


class ScenarioError(ValueError):
    """Scenario file is syntactically or semantically invalid."""


@dataclass(frozen=True)
class Disturbance:
    t0: float
    t1: float
    quantity: str
    value: float


@dataclass(frozen=True)
class Scenario:
    model: str = "averaged"
    controller: str = "ph_pi"
    gamma: float = 1e5
    delta: float = 1.5
    delta_exponent: int = 1
    theta_bar: tuple = tuple(PAPER_THETA)
    t_end: float = 0.1
    sample_rate: float = 2e4
    fsw: float = 1e4
    steps_per_period: int = 200
    sample_stride: int = 1
    param_overrides: tuple = ()            # ((name, value), ...)
    initial_deviation: tuple = ()          # ((alias, amount), ...)
    disturbances: tuple = ()               # (Disturbance, ...)
    outputs: tuple = ("v_dc", "v_bat", "i_bat")

    def validate(self):
        if self.model not in MODEL_KINDS:
            raise ScenarioError(f"model kind must be one of {MODEL_KINDS}, got {self.model!r}")
        if self.controller not in CONTROLLER_KINDS:
            raise ScenarioError(
                f"controller kind must be one of {CONTROLLER_KINDS}, got {self.controller!r}")
        if self.t_end <= 0:
            raise ScenarioError("t_end must be positive")
        if self.gamma <= 0:
            raise ScenarioError(f"gamma must be positive, got {self.gamma}")
        if self.delta <= 0:
            raise ScenarioError(f"delta must be positive, got {self.delta}")
        known_params = {f.name for f in fields(EvcsParams)}
        for name, _ in self.param_overrides:
            if name not in known_params:
                raise ScenarioError(f"unknown parameter override {name!r}")
        valid = EvcsStateLayout.quantity_names()
        for alias, _ in self.initial_deviation:
            if alias not in EvcsStateLayout.alias_names:
                raise ScenarioError(
                    f"unknown initial-deviation alias {alias!r}; valid: "
                    f"{EvcsStateLayout.alias_names}")
        for d in self.disturbances:
            if not (0.0 <= d.t0 < d.t1 <= self.t_end):
                raise ScenarioError(
                    f"disturbance window [{d.t0}, {d.t1}] not within [0, {self.t_end}]")
            if d.quantity not in EvcsStateLayout.alias_names:
                raise ScenarioError(
                    f"unknown disturbance quantity {d.quantity!r}; valid: "
                    f"{EvcsStateLayout.alias_names}")
        for q in self.outputs:
            if q not in valid:
                raise ScenarioError(f"unknown output {q!r}; valid: {valid}")
        return self

    def params(self):
        return replace(EvcsParams(), **dict(self.param_overrides))

    def canonical(self):
        """Canonical dict: whitespace/comment-insensitive identity."""
        out = {}
        for f in fields(Scenario):
            v = getattr(self, f.name)
            if f.name == "disturbances":
                v = [[d.t0, d.t1, d.quantity, d.value] for d in v]
            elif isinstance(v, tuple):
                v = [list(e) if isinstance(e, tuple) else e for e in v]
            out[f.name] = v
        return out

    def hash(self):
        blob = json.dumps(self.canonical(), sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(blob.encode()).hexdigest()[:16]


def _floats(s):
    return tuple(float(v.strip()) for v in s.split(","))


def parse_scenario(text):
    cp = configparser.ConfigParser(inline_comment_prefixes=("#",))
    try:
        cp.read_string(text)
    except configparser.Error as exc:
        raise ScenarioError(f"scenario parse error: {exc}") from exc

    kw = {}
    if cp.has_section("model"):
        sec = cp["model"]
        kw["model"] = sec.get("kind", "averaged").strip()
        for key, cast in (("t_end", float), ("sample_rate", float), ("fsw", float),
                          ("steps_per_period", int), ("sample_stride", int)):
            if key in sec:
                kw[key] = cast(sec[key])
        if "theta_bar" in sec:
            kw["theta_bar"] = _floats(sec["theta_bar"])
    if cp.has_section("controller"):
        sec = cp["controller"]
        kw["controller"] = sec.get("kind", "ph_pi").strip()
        for key, cast in (("gamma", float), ("delta", float), ("delta_exponent", int)):
            if key in sec:
                kw[key] = cast(sec[key])
    if cp.has_section("params"):
        kw["param_overrides"] = tuple(sorted((k, float(v)) for k, v in cp["params"].items()))
    if cp.has_section("initial"):
        kw["initial_deviation"] = tuple(sorted((k, float(v)) for k, v in cp["initial"].items()))
    dists = []
    for name in sorted(s for s in cp.sections() if s.startswith("disturbance")):
        sec = cp[name]
        try:
            dists.append(Disturbance(t0=float(sec["t0"]), t1=float(sec["t1"]),
                                     quantity=sec["quantity"].strip(),
                                     value=float(sec["value"])))
        except KeyError as exc:
            raise ScenarioError(f"[{name}] misses key {exc}") from exc
    kw["disturbances"] = tuple(dists)
    if cp.has_section("outputs") and "quantities" in cp["outputs"]:
        kw["outputs"] = tuple(q.strip() for q in cp["outputs"]["quantities"].split(","))
    return Scenario(**kw).validate()


def load_scenario(path):
    with open(path, "r", encoding="utf-8") as fh:
        return parse_scenario(fh.read())


def scenario_to_text(sc):
    buf = io.StringIO()
    buf.write("[model]\n")
    buf.write(f"kind = {sc.model}\n")
    buf.write(f"t_end = {sc.t_end!r}\n")
    buf.write(f"sample_rate = {sc.sample_rate!r}\n")
    buf.write(f"fsw = {sc.fsw!r}\n")
    buf.write(f"steps_per_period = {sc.steps_per_period}\n")
    buf.write(f"sample_stride = {sc.sample_stride}\n")
    buf.write(f"theta_bar = {', '.join(repr(v) for v in sc.theta_bar)}\n")
    buf.write("\n[controller]\n")
    buf.write(f"kind = {sc.controller}\n")
    buf.write(f"gamma = {sc.gamma!r}\n")
    buf.write(f"delta = {sc.delta!r}\n")
    buf.write(f"delta_exponent = {sc.delta_exponent}\n")
    if sc.param_overrides:
        buf.write("\n[params]\n")
        for k, v in sc.param_overrides:
            buf.write(f"{k} = {v!r}\n")
    if sc.initial_deviation:
        buf.write("\n[initial]\n")
        for k, v in sc.initial_deviation:
            buf.write(f"{k} = {v!r}\n")
    for i, d in enumerate(sc.disturbances, 1):
        buf.write(f"\n[disturbance.{i}]\n")
        buf.write(f"t0 = {d.t0!r}\nt1 = {d.t1!r}\n")
        buf.write(f"quantity = {d.quantity}\nvalue = {d.value!r}\n")
    buf.write("\n[outputs]\n")
    buf.write(f"quantities = {', '.join(sc.outputs)}\n")
    return buf.getvalue()
