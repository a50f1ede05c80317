"""Planning cases: grid data, scenarios, contingency states, investment options.

A case is a single JSON document in SI units (MW, MVAr, MVA, EUR/MWh); branch
series admittances are p.u. on the case power base. A loaded case is immutable
and safe to share across worker processes.
"""

from __future__ import annotations

import hashlib
import json
from collections import deque
from dataclasses import dataclass, field
from functools import cached_property
from pathlib import Path


class CaseError(Exception):
    """Base class for case loading problems."""


class CaseFormatError(CaseError):
    """The file is not a well-formed case document."""


class CaseValidationError(CaseError):
    """The case parsed but violates model invariants."""

    def __init__(self, diagnostics: list["Diagnostic"]):
        self.diagnostics = diagnostics
        lines = "; ".join(d.message for d in diagnostics)
        super().__init__(f"invalid case: {lines}")


@dataclass(frozen=True)
class Diagnostic:
    severity: str  # "error" | "warning"
    code: str
    message: str

    @property
    def is_error(self) -> bool:
        return self.severity == "error"


@dataclass(frozen=True)
class Bus:
    id: int
    v_min: float
    v_max: float
    demand_p: float = 0.0  # MW, baseline (scenarios may override)
    demand_q: float = 0.0  # MVAr
    res_p: float = 0.0     # MW of available renewable injection
    is_reference: bool = False


@dataclass(frozen=True)
class Line:
    id: int
    from_bus: int
    to_bus: int
    g: float        # series conductance, p.u.
    b: float        # series susceptance, p.u.
    s_max: float    # apparent-power rating, MVA
    li_max: float = 0.0  # maximum reinforcement, MVA
    c_inv: float = 0.0   # levelised reinforcement cost, EUR/MVA/h


@dataclass(frozen=True)
class Generator:
    id: int
    bus: int
    p_min: float
    p_max: float
    q_min: float
    q_max: float
    cost_c0: float = 0.0  # EUR/h
    cost_c1: float = 0.0  # EUR/MWh
    cost_c2: float = 0.0  # EUR/MW^2h


@dataclass(frozen=True)
class FlexProvider:
    id: int
    bus: int
    p_up_base: float = 0.0
    p_dn_base: float = 0.0
    q_up_base: float = 0.0
    q_dn_base: float = 0.0
    fi_max: float = 0.0   # maximum capacity expansion, MW
    c_flex: float = 0.0   # activation price, EUR/MWh
    c_inv: float = 0.0    # levelised investment cost, EUR/MW/h


@dataclass(frozen=True)
class Scenario:
    id: int
    weight: float
    # bus id -> {"demand_p": .., "demand_q": .., "res_p": ..} replacing the bus baseline
    overrides: dict[int, dict[str, float]] = field(default_factory=dict)


@dataclass(frozen=True)
class SystemState:
    k: int                        # 0 = normal operation
    weight: float                 # used verbatim in the expected-cost objective
    outaged_line: int | None = None  # line id, present iff k >= 1


@dataclass(frozen=True)
class InvestmentOption:
    id: int
    kind: str    # "line" | "flex"
    device: int  # line id or flex provider id


_OVERRIDE_FIELDS = ("demand_p", "demand_q", "res_p")


@dataclass(frozen=True)
class NetworkCase:
    name: str
    base_mva: float
    c_curt_load: float  # EUR/MWh
    c_curt_res: float   # EUR/MWh
    buses: tuple[Bus, ...]
    lines: tuple[Line, ...]
    generators: tuple[Generator, ...]
    flex_providers: tuple[FlexProvider, ...]
    scenarios: tuple[Scenario, ...]
    states: tuple[SystemState, ...]
    options: tuple[InvestmentOption, ...]

    @cached_property
    def bus_index(self) -> dict[int, int]:
        return {b.id: i for i, b in enumerate(self.buses)}

    @cached_property
    def line_index(self) -> dict[int, int]:
        return {ln.id: i for i, ln in enumerate(self.lines)}

    @cached_property
    def generator_index(self) -> dict[int, int]:
        return {g.id: i for i, g in enumerate(self.generators)}

    @cached_property
    def flex_index(self) -> dict[int, int]:
        return {f.id: i for i, f in enumerate(self.flex_providers)}

    @cached_property
    def option_index(self) -> dict[int, int]:
        return {o.id: i for i, o in enumerate(self.options)}

    @cached_property
    def reference_bus(self) -> Bus:
        refs = [b for b in self.buses if b.is_reference]
        if len(refs) != 1:
            raise CaseValidationError(
                [Diagnostic("error", "reference", f"expected exactly one reference bus, found {len(refs)}")]
            )
        return refs[0]

    def scenario_value(self, scenario: Scenario, bus: Bus, name: str) -> float:
        """Demand/RES value of `bus` under `scenario` (MW / MVAr)."""
        override = scenario.overrides.get(bus.id)
        if override and name in override:
            return override[name]
        return getattr(bus, name)

    def option_label(self, option: InvestmentOption) -> str:
        if option.kind == "line":
            ln = self.lines[self.line_index[option.device]]
            return f"line {ln.from_bus}-{ln.to_bus}"
        fx = self.flex_providers[self.flex_index[option.device]]
        return f"flex bus {fx.bus}"


def _connected(case: NetworkCase, skip_line: int | None = None) -> bool:
    """BFS over in-service lines; True iff every bus is reachable."""
    if not case.buses:
        return True
    adjacency: dict[int, list[int]] = {b.id: [] for b in case.buses}
    for ln in case.lines:
        if ln.id == skip_line:
            continue
        if ln.from_bus in adjacency and ln.to_bus in adjacency:
            adjacency[ln.from_bus].append(ln.to_bus)
            adjacency[ln.to_bus].append(ln.from_bus)
    start = case.buses[0].id
    seen = {start}
    queue = deque([start])
    while queue:
        cur = queue.popleft()
        for nxt in adjacency[cur]:
            if nxt not in seen:
                seen.add(nxt)
                queue.append(nxt)
    return len(seen) == len(case.buses)


def validate_case(case: NetworkCase) -> list[Diagnostic]:
    """Check every model invariant; returns one diagnostic per violation.

    An empty list means the case is valid. Diagnostics never raise; loading
    raises CaseValidationError when any error-severity diagnostic is present.
    """
    out: list[Diagnostic] = []
    err = lambda code, msg: out.append(Diagnostic("error", code, msg))
    warn = lambda code, msg: out.append(Diagnostic("warning", code, msg))

    if case.base_mva <= 0:
        err("base", f"base_mva must be positive, got {case.base_mva}")
    if case.c_curt_load < 0:
        err("penalty", "c_curt_load must be nonnegative")
    if case.c_curt_res < 0:
        err("penalty", "c_curt_res must be nonnegative")

    for kind, items in (("bus", case.buses), ("line", case.lines), ("generator", case.generators),
                        ("flex provider", case.flex_providers), ("scenario", case.scenarios),
                        ("option", case.options)):
        ids = [x.id for x in items]
        for dup in sorted({i for i in ids if ids.count(i) > 1}):
            err("duplicate-id", f"duplicate {kind} id {dup}")

    refs = [b.id for b in case.buses if b.is_reference]
    if len(refs) == 0:
        err("reference", "no reference bus")
    elif len(refs) > 1:
        err("reference", f"multiple reference buses: {refs}")

    bus_ids = {b.id for b in case.buses}
    for b in case.buses:
        if not (0 < b.v_min <= b.v_max):
            err("voltage-bounds", f"bus {b.id}: requires 0 < v_min <= v_max, got [{b.v_min}, {b.v_max}]")
        if b.demand_p < 0 or b.res_p < 0:
            err("negative-power", f"bus {b.id}: demand_p and res_p must be nonnegative")

    for ln in case.lines:
        if ln.from_bus == ln.to_bus:
            err("line-loop", f"line {ln.id}: from_bus equals to_bus ({ln.from_bus})")
        for end in (ln.from_bus, ln.to_bus):
            if end not in bus_ids:
                err("dangling-ref", f"line {ln.id}: unknown bus {end}")
        if ln.s_max <= 0:
            err("line-rating", f"line {ln.id}: s_max must be positive, got {ln.s_max}")
        if ln.li_max < 0 or ln.c_inv < 0:
            err("line-investment", f"line {ln.id}: li_max and c_inv must be nonnegative")

    for g in case.generators:
        if g.bus not in bus_ids:
            err("dangling-ref", f"generator {g.id}: unknown bus {g.bus}")
        if g.p_min > g.p_max or g.q_min > g.q_max:
            err("gen-bounds", f"generator {g.id}: empty dispatch box")
        if g.cost_c2 < 0:
            err("gen-cost", f"generator {g.id}: cost_c2 must be nonnegative")

    for f in case.flex_providers:
        if f.bus not in bus_ids:
            err("dangling-ref", f"flex provider {f.id}: unknown bus {f.bus}")
        if min(f.p_up_base, f.p_dn_base, f.q_up_base, f.q_dn_base) < 0:
            err("flex-bounds", f"flex provider {f.id}: base capacities must be nonnegative")
        if f.fi_max < 0 or f.c_flex < 0 or f.c_inv < 0:
            err("flex-bounds", f"flex provider {f.id}: fi_max and costs must be nonnegative")

    for s in case.scenarios:
        if s.weight < 0:
            err("scenario-weight", f"scenario {s.id}: weight must be nonnegative, got {s.weight}")
        for bid, fields in s.overrides.items():
            if bid not in bus_ids:
                err("dangling-ref", f"scenario {s.id}: override references unknown bus {bid}")
            for name, value in fields.items():
                if name not in _OVERRIDE_FIELDS:
                    err("override-field", f"scenario {s.id}: unknown override field {name!r}")
                elif value < 0:
                    err("negative-power", f"scenario {s.id}: bus {bid} override {name} is negative")
    if not case.scenarios:
        err("scenario-missing", "case has no scenarios")

    line_ids = {ln.id for ln in case.lines}
    ks = [st.k for st in case.states]
    for dup in sorted({k for k in ks if ks.count(k) > 1}):
        err("duplicate-id", f"duplicate state index {dup}")
    if 0 not in ks:
        err("state-normal", "no normal state (k = 0)")
    outaged: list[int] = []
    for st in case.states:
        if st.weight < 0:
            err("state-weight", f"state {st.k}: weight must be nonnegative")
        if st.k == 0:
            if st.outaged_line is not None:
                err("state-normal", "normal state must not outage a line")
        else:
            if st.outaged_line is None:
                err("state-outage", f"state {st.k}: contingency without an outaged line")
            elif st.outaged_line not in line_ids:
                err("dangling-ref", f"state {st.k}: unknown line {st.outaged_line}")
            else:
                if st.outaged_line in outaged:
                    err("state-outage", f"state {st.k}: line {st.outaged_line} outaged by more than one state")
                outaged.append(st.outaged_line)

    flex_ids = {f.id for f in case.flex_providers}
    seen_devices: set[tuple[str, int]] = set()
    for o in case.options:
        if o.kind not in ("line", "flex"):
            err("option-kind", f"option {o.id}: kind must be 'line' or 'flex', got {o.kind!r}")
            continue
        pool = line_ids if o.kind == "line" else flex_ids
        if o.device not in pool:
            err("dangling-ref", f"option {o.id}: unknown {o.kind} device {o.device}")
            continue
        key = (o.kind, o.device)
        if key in seen_devices:
            err("option-duplicate", f"option {o.id}: device {o.device} appears in more than one option")
        seen_devices.add(key)
        cap = (case.lines[case.line_index[o.device]].li_max if o.kind == "line"
               else case.flex_providers[case.flex_index[o.device]].fi_max)
        if cap == 0:
            warn("option-zero-cap", f"option {o.id}: device has zero expandable capacity")

    for ln in case.lines:
        if ln.li_max > 0 and ("line", ln.id) not in seen_devices:
            warn("option-missing", f"line {ln.id} is reinforceable but has no investment option")
    for f in case.flex_providers:
        if f.fi_max > 0 and ("flex", f.id) not in seen_devices:
            warn("option-missing", f"flex provider {f.id} is investable but has no investment option")

    # connectivity: only meaningful once references resolve
    if not any(d.is_error for d in out):
        if not _connected(case):
            err("islanding", "network is disconnected in the normal state")
        else:
            for st in case.states:
                if st.k >= 1 and st.outaged_line is not None and not _connected(case, st.outaged_line):
                    err("islanding", f"state {st.k}: outage of line {st.outaged_line} islands the network")

    return out


# ---------------------------------------------------------------------------
# serialization

def serialize_case(case: NetworkCase) -> dict:
    """Plain-dict form of a case, identical to the JSON schema."""
    return {
        "name": case.name,
        "base_mva": case.base_mva,
        "c_curt_load": case.c_curt_load,
        "c_curt_res": case.c_curt_res,
        "buses": [
            {"id": b.id, "v_min": b.v_min, "v_max": b.v_max, "demand_p": b.demand_p,
             "demand_q": b.demand_q, "res_p": b.res_p, "is_reference": b.is_reference}
            for b in case.buses
        ],
        "lines": [
            {"id": ln.id, "from_bus": ln.from_bus, "to_bus": ln.to_bus, "g": ln.g, "b": ln.b,
             "s_max": ln.s_max, "li_max": ln.li_max, "c_inv": ln.c_inv}
            for ln in case.lines
        ],
        "generators": [
            {"id": g.id, "bus": g.bus, "p_min": g.p_min, "p_max": g.p_max, "q_min": g.q_min,
             "q_max": g.q_max, "cost_c0": g.cost_c0, "cost_c1": g.cost_c1, "cost_c2": g.cost_c2}
            for g in case.generators
        ],
        "flex_providers": [
            {"id": f.id, "bus": f.bus, "p_up_base": f.p_up_base, "p_dn_base": f.p_dn_base,
             "q_up_base": f.q_up_base, "q_dn_base": f.q_dn_base, "fi_max": f.fi_max,
             "c_flex": f.c_flex, "c_inv": f.c_inv}
            for f in case.flex_providers
        ],
        "scenarios": [
            {"id": s.id, "weight": s.weight,
             "overrides": {str(bid): dict(fields) for bid, fields in s.overrides.items()}}
            for s in case.scenarios
        ],
        "states": [
            ({"k": st.k, "weight": st.weight} if st.outaged_line is None
             else {"k": st.k, "weight": st.weight, "outaged_line": st.outaged_line})
            for st in case.states
        ],
        "options": [
            {"id": o.id, "kind": o.kind, "device": o.device}
            for o in case.options
        ],
    }


def case_from_dict(doc: dict) -> NetworkCase:
    """Build a NetworkCase from the JSON-schema dict. Raises CaseFormatError on shape problems."""
    try:
        buses = tuple(
            Bus(id=int(b["id"]), v_min=float(b["v_min"]), v_max=float(b["v_max"]),
                demand_p=float(b.get("demand_p", 0.0)), demand_q=float(b.get("demand_q", 0.0)),
                res_p=float(b.get("res_p", 0.0)), is_reference=bool(b.get("is_reference", False)))
            for b in doc["buses"]
        )
        lines = tuple(
            Line(id=int(x["id"]), from_bus=int(x["from_bus"]), to_bus=int(x["to_bus"]),
                 g=float(x["g"]), b=float(x["b"]), s_max=float(x["s_max"]),
                 li_max=float(x.get("li_max", 0.0)), c_inv=float(x.get("c_inv", 0.0)))
            for x in doc["lines"]
        )
        generators = tuple(
            Generator(id=int(g["id"]), bus=int(g["bus"]), p_min=float(g["p_min"]),
                      p_max=float(g["p_max"]), q_min=float(g["q_min"]), q_max=float(g["q_max"]),
                      cost_c0=float(g.get("cost_c0", 0.0)), cost_c1=float(g.get("cost_c1", 0.0)),
                      cost_c2=float(g.get("cost_c2", 0.0)))
            for g in doc["generators"]
        )
        flex = tuple(
            FlexProvider(id=int(f["id"]), bus=int(f["bus"]),
                         p_up_base=float(f.get("p_up_base", 0.0)), p_dn_base=float(f.get("p_dn_base", 0.0)),
                         q_up_base=float(f.get("q_up_base", 0.0)), q_dn_base=float(f.get("q_dn_base", 0.0)),
                         fi_max=float(f.get("fi_max", 0.0)), c_flex=float(f.get("c_flex", 0.0)),
                         c_inv=float(f.get("c_inv", 0.0)))
            for f in doc.get("flex_providers", [])
        )
        scenarios = tuple(
            Scenario(id=int(s["id"]), weight=float(s["weight"]),
                     overrides={int(bid): {str(k): float(v) for k, v in fields.items()}
                                for bid, fields in s.get("overrides", {}).items()})
            for s in doc["scenarios"]
        )
        states = tuple(
            SystemState(k=int(st["k"]), weight=float(st["weight"]),
                        outaged_line=(int(st["outaged_line"]) if "outaged_line" in st and st["outaged_line"] is not None else None))
            for st in doc["states"]
        )
        options = tuple(
            InvestmentOption(id=int(o["id"]), kind=str(o["kind"]), device=int(o["device"]))
            for o in doc.get("options", [])
        )
        return NetworkCase(
            name=str(doc.get("name", "unnamed")),
            base_mva=float(doc["base_mva"]),
            c_curt_load=float(doc["c_curt_load"]),
            c_curt_res=float(doc["c_curt_res"]),
            buses=buses, lines=lines, generators=generators, flex_providers=flex,
            scenarios=scenarios, states=states, options=options,
        )
    except (KeyError, TypeError, ValueError) as exc:
        raise CaseFormatError(f"malformed case document: {exc!r}") from exc


def load_case(path: str | Path) -> NetworkCase:
    """Load and validate a case file; raises on parse or validation failure."""
    path = Path(path)
    try:
        doc = json.loads(path.read_text())
    except OSError as exc:
        raise
    except json.JSONDecodeError as exc:
        raise CaseFormatError(f"{path}: not valid JSON ({exc})") from exc
    if not isinstance(doc, dict):
        raise CaseFormatError(f"{path}: top level must be an object")
    case = case_from_dict(doc)
    problems = [d for d in validate_case(case) if d.is_error]
    if problems:
        raise CaseValidationError(problems)
    return case


def save_case(case: NetworkCase, path: str | Path) -> None:
    Path(path).write_text(json.dumps(serialize_case(case), indent=2, sort_keys=True) + "\n")


def case_hash(case: NetworkCase) -> str:
    """Stable content hash used to key cached coalition values."""
    canon = json.dumps(serialize_case(case), sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(canon.encode()).hexdigest()


# ---------------------------------------------------------------------------
# MATPOWER-style import

def series_admittance(r: float, x: float) -> tuple[float, float]:
    """Map branch impedance (r, x) to series (g, b): g = r/(r^2+x^2), b = -x/(r^2+x^2)."""
    den = r * r + x * x
    if den == 0:
        raise ValueError("branch with zero impedance")
    return r / den, -x / den


def case_from_matpower(mpc: dict, name: str = "imported",
                       c_curt_load: float = 1e4, c_curt_res: float = 100.0) -> NetworkCase:
    """Build a case from MATPOWER-style tables (bus / gen / branch / gencost lists).

    Uses the standard column layouts. Produces a single unit-weight scenario and
    the normal state only; contingencies and investment options are added by the
    caller. Branch shunt charging, taps, and phase shifts are not modeled and
    must be zero or absent.
    """
    base = float(mpc["baseMVA"])
    buses = []
    for row in mpc["bus"]:
        buses.append(Bus(
            id=int(row[0]),
            v_min=float(row[12]) if len(row) > 12 else 0.94,
            v_max=float(row[11]) if len(row) > 11 else 1.06,
            demand_p=float(row[2]),
            demand_q=float(row[3]),
            is_reference=int(row[1]) == 3,
        ))
    lines = []
    for i, row in enumerate(mpc["branch"]):
        g, b = series_admittance(float(row[2]), float(row[3]))
        rate = float(row[5]) if len(row) > 5 and float(row[5]) > 0 else 10.0 * base
        lines.append(Line(id=i + 1, from_bus=int(row[0]), to_bus=int(row[1]),
                          g=g, b=b, s_max=rate))
    gens = []
    gencost = mpc.get("gencost")
    for i, row in enumerate(mpc["gen"]):
        c0 = c1 = c2 = 0.0
        if gencost is not None and i < len(gencost):
            cost = gencost[i]
            n_coef = int(cost[3])
            coeffs = [float(c) for c in cost[4:4 + n_coef]]  # highest order first
            padded = [0.0] * (3 - len(coeffs)) + coeffs[-3:]
            c2, c1, c0 = padded[0], padded[1], padded[2]
        gens.append(Generator(id=i + 1, bus=int(row[0]),
                              p_min=float(row[9]), p_max=float(row[8]),
                              q_min=float(row[4]), q_max=float(row[3]),
                              cost_c0=c0, cost_c1=c1, cost_c2=c2))
    return NetworkCase(
        name=name, base_mva=base, c_curt_load=c_curt_load, c_curt_res=c_curt_res,
        buses=tuple(buses), lines=tuple(lines), generators=tuple(gens),
        flex_providers=(), scenarios=(Scenario(id=1, weight=1.0),),
        states=(SystemState(k=0, weight=1.0),), options=(),
    )
