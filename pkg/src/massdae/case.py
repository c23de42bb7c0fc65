"""System case files: a single JSON document validated against a schema.

All electrical quantities are per unit.  Line and load data are on the system
base (``base_mva``); generator data are on each machine's own ``mva`` base,
except the dispatch ``p`` which is on the system base.  Times are seconds,
angles radians.
"""
from __future__ import annotations

import dataclasses
import json
import math
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path

import jsonschema

from .dae import Event, ModelError
from .machines import ExciterParams, GenrouParams, GovParams
from .network import SLACK, BusRecord, LineRecord, LoadRecord

SCHEMA_VERSION = 1
LINE_ACTIONS = ("line_trip", "line_reconnect")


class CaseError(ValueError):
    """A case file that cannot be parsed or does not validate."""


@dataclass(frozen=True)
class GeneratorRecord:
    id: str
    p: float
    params: GenrouParams

    @property
    def bus(self) -> str:
        return self.params.bus


@dataclass(frozen=True)
class ExciterRecord:
    id: str
    gen: str
    params: ExciterParams


@dataclass(frozen=True)
class GovernorRecord:
    id: str
    gen: str
    params: GovParams


@dataclass(frozen=True)
class SystemCase:
    name: str
    base_mva: float
    freq: float
    buses: tuple[BusRecord, ...]
    lines: tuple[LineRecord, ...]
    loads: tuple[LoadRecord, ...] = ()
    generators: tuple[GeneratorRecord, ...] = ()
    exciters: tuple[ExciterRecord, ...] = ()
    governors: tuple[GovernorRecord, ...] = ()
    events: tuple[Event, ...] = ()
    simulation: dict = field(default_factory=dict)

    def __post_init__(self):
        validate_case(self)

    @property
    def tf(self) -> float:
        return float(self.simulation.get("tf", 5.0))

    def generator(self, gid: str) -> GeneratorRecord:
        for g in self.generators:
            if g.id == gid:
                return g
        raise KeyError(gid)

    def replace(self, **changes) -> "SystemCase":
        return dataclasses.replace(self, **changes)

    def with_reduced(self, gen_ids) -> "SystemCase":
        """Copy with ``T''d0 = T''q0 = 0`` on the listed generators."""
        ids = set(gen_ids)
        gens = tuple(
            dataclasses.replace(g, params=dataclasses.replace(g.params, Td02=0.0, Tq02=0.0))
            if g.id in ids else g
            for g in self.generators
        )
        return self.replace(generators=gens)

    def without_events(self) -> "SystemCase":
        return self.replace(events=())


def validate_case(case: SystemCase) -> None:
    def dup(kind, ids):
        seen = set()
        for i in ids:
            if i in seen:
                raise CaseError(f"duplicate {kind} id {i!r}")
            seen.add(i)

    bus_ids = [b.id for b in case.buses]
    dup("bus", bus_ids)
    dup("line", [ln.id for ln in case.lines])
    dup("load", [ld.id for ld in case.loads])
    dup("generator", [g.id for g in case.generators])
    dup("model", [g.id for g in case.generators] + [e.id for e in case.exciters]
        + [g.id for g in case.governors])
    buses = set(bus_ids)
    if not case.buses:
        raise CaseError("case has no buses")
    nslack = sum(b.type == SLACK for b in case.buses)
    if nslack != 1:
        raise CaseError(f"exactly one slack bus required, found {nslack}")
    for ln in case.lines:
        for b in (ln.from_bus, ln.to_bus):
            if b not in buses:
                raise CaseError(f"line {ln.id}: unknown bus {b!r}")
    for ld in case.loads:
        if ld.bus not in buses:
            raise CaseError(f"load {ld.id}: unknown bus {ld.bus!r}")
    gens = {g.id for g in case.generators}
    for g in case.generators:
        if g.bus not in buses:
            raise CaseError(f"generator {g.id}: unknown bus {g.bus!r}")
    for kind, recs in (("exciter", case.exciters), ("governor", case.governors)):
        linked = set()
        for r in recs:
            if r.gen not in gens:
                raise CaseError(f"{kind} {r.id}: unknown generator {r.gen!r}")
            if r.gen in linked:
                raise CaseError(f"{kind} {r.id}: generator {r.gen!r} already has a {kind}")
            linked.add(r.gen)
    tf = case.tf
    lines = {ln.id for ln in case.lines}
    for ev in case.events:
        label = f"event {ev.label} at t={ev.time:g}"
        if not 0 <= ev.time <= tf:
            raise CaseError(f"{label}: outside the simulation span [0, {tf:g}]")
        if ev.action in LINE_ACTIONS and ev.target not in lines:
            raise CaseError(f"{label}: unknown line {ev.target!r}")
    times = [ev.time for ev in case.events]
    if times != sorted(times):
        raise CaseError("events must be sorted by time")


def schema() -> dict:
    return json.loads(resources.files("massdae.data").joinpath("case.schema.json").read_text())


def parse_case(doc: dict) -> SystemCase:
    try:
        jsonschema.validate(doc, schema())
    except jsonschema.ValidationError as exc:
        where = "/".join(str(p) for p in exc.absolute_path) or "<root>"
        raise CaseError(f"schema violation at {where}: {exc.message}") from None

    base = float(doc["base_mva"])
    freq = float(doc.get("freq", 60.0))
    try:
        buses = tuple(BusRecord(str(b["id"]), b["type"], b.get("v0", 1.0), b.get("theta0", 0.0))
                      for b in doc["buses"])
        lines = tuple(LineRecord(str(ln["id"]), str(ln["from"]), str(ln["to"]), ln["r"], ln["x"],
                                 ln.get("b", 0.0), ln.get("status", "in") == "in")
                      for ln in doc.get("lines", []))
        loads = tuple(LoadRecord(str(ld["id"]), str(ld["bus"]), ld["p"], ld["q"])
                      for ld in doc.get("loads", []))
        gens = []
        for g in doc.get("generators", []):
            prm = GenrouParams(
                bus=str(g["bus"]), xd=g["xd"], xq=g["xq"], xd1=g["xd1"], xq1=g["xq1"], x2=g["x2"],
                xl=g["xl"], ra=g.get("ra", 0.0), Td01=g["Td01"], Tq01=g["Tq01"], Td02=g["Td02"],
                Tq02=g["Tq02"], H=g["H"], D=g.get("D", 0.0), mva=g.get("mva", base),
                omega_b=2 * math.pi * freq,
            )
            gens.append(GeneratorRecord(str(g["id"]), g["p"], prm))
        excs = tuple(ExciterRecord(str(e["id"]), str(e["gen"]), ExciterParams(e["KA"], e["TA"]))
                     for e in doc.get("exciters", []))
        govs = tuple(GovernorRecord(str(v["id"]), str(v["gen"]),
                                    GovParams(v["R"], v["T1"], v["T2"], v["T3"]))
                     for v in doc.get("governors", []))
    except ModelError as exc:
        raise CaseError(str(exc)) from None
    events = tuple(Event(float(e["t"]), e["action"], str(e["target"]), e.get("value"))
                   for e in doc.get("events", []))
    return SystemCase(
        name=doc.get("name", "case"), base_mva=base, freq=freq, buses=buses, lines=lines,
        loads=loads, generators=tuple(gens), exciters=excs, governors=govs, events=events,
        simulation=dict(doc.get("simulation", {})),
    )


def load_case(path: str | Path) -> SystemCase:
    text = Path(path).read_text()
    if not text.strip():
        raise CaseError(f"{path}: empty file")
    try:
        doc = json.loads(text)
    except json.JSONDecodeError as exc:
        raise CaseError(f"{path}: parse error at line {exc.lineno}, column {exc.colno}: {exc.msg}") from None
    return parse_case(doc)


def bundled_case_path(name: str) -> Path:
    return Path(str(resources.files("massdae.data").joinpath(f"{name}.json")))


def bundled_case(name: str = "kundur_two_area") -> SystemCase:
    return load_case(bundled_case_path(name))
