"""Grid data model, case-file readers and the branch-bus incidence matrix.

Two case formats are understood:

* the native JSON format (all quantities already per unit)::

      {"base_mva": 100,
       "buses": [{"id": 1, "kind": "generator", "p0": 1.0, "pmin": 0.0,
                  "pmax": 2.0, "weight": 1.0}, ...],
       "branches": [{"id": 1, "from": 1, "to": 2, "y": 10.0, "c": 1.0}, ...]}

* MATPOWER-style ``.m`` text cases (``mpc.bus``, ``mpc.gen``, ``mpc.branch``
  matrices, MW on ``mpc.baseMVA``).  Only the columns needed for a DC model
  are read.
"""
from __future__ import annotations

import io
import json
import re
from dataclasses import dataclass, field
from os import PathLike
from pathlib import Path
from typing import IO, Sequence, Union

import numpy as np

BALANCE_TOL = 1e-6
DEFAULT_THRESHOLD = 1.0

GENERATOR = "generator"
LOAD = "load"


class CaseFormatError(ValueError):
    """A case file could not be parsed."""


class CaseValidationError(ValueError):
    """A parsed case violates a structural or physical invariant."""


class InvalidDisturbanceError(ValueError):
    """A disturbance would leave a branch with negative admittance."""


@dataclass(frozen=True)
class Bus:
    id: int
    kind: str
    base_injection: float
    injection_min: float
    injection_max: float
    weight: float = 1.0


@dataclass(frozen=True)
class Branch:
    id: int
    from_bus: int
    to_bus: int
    admittance: float
    flow_threshold: float = DEFAULT_THRESHOLD


def _frozen(a) -> np.ndarray:
    a = np.array(a, dtype=float)
    a.setflags(write=False)
    return a


@dataclass(frozen=True)
class PowerNetwork:
    """Immutable DC grid description.

    ``buses`` and ``branches`` keep their file order.  Branch endpoints refer
    to external bus ids; every array attribute is indexed internally from 0
    (bus position, branch position).
    """

    buses: tuple[Bus, ...]
    branches: tuple[Branch, ...]
    base_mva: float = 100.0
    incidence: np.ndarray = field(init=False, repr=False, compare=False)
    bus_index: dict = field(init=False, repr=False, compare=False)

    def __post_init__(self):
        object.__setattr__(self, "buses", tuple(self.buses))
        object.__setattr__(self, "branches", tuple(self.branches))
        _validate(self)
        index = {b.id: i for i, b in enumerate(self.buses)}
        object.__setattr__(self, "bus_index", index)
        A = np.zeros((len(self.branches), len(self.buses)))
        for row, br in enumerate(self.branches):
            A[row, index[br.from_bus]] = 1.0
            A[row, index[br.to_bus]] = -1.0
        A.setflags(write=False)
        object.__setattr__(self, "incidence", A)
        for name, values in (
            ("admittance", [br.admittance for br in self.branches]),
            ("thresholds", [br.flow_threshold for br in self.branches]),
            ("p0", [b.base_injection for b in self.buses]),
            ("pmin", [b.injection_min for b in self.buses]),
            ("pmax", [b.injection_max for b in self.buses]),
            ("weights", [b.weight for b in self.buses]),
        ):
            object.__setattr__(self, name, _frozen(values))
        object.__setattr__(
            self, "is_generator",
            np.array([b.kind == GENERATOR for b in self.buses], dtype=bool),
        )

    @property
    def n(self) -> int:
        return len(self.buses)

    @property
    def n_branches(self) -> int:
        return len(self.branches)

    @property
    def bus_ids(self) -> list[int]:
        return [b.id for b in self.buses]

    @property
    def branch_ids(self) -> list[int]:
        return [br.id for br in self.branches]

    def branch_position(self, branch_id: int) -> int:
        for pos, br in enumerate(self.branches):
            if br.id == branch_id:
                return pos
        raise KeyError(f"no branch with id {branch_id}")

    def with_thresholds(self, default: float | None = None,
                        overrides: dict[int, float] | None = None) -> "PowerNetwork":
        """Copy of the network with flow thresholds replaced.

        ``default`` (if given) is applied to every branch first, then
        ``overrides`` maps branch id to threshold.
        """
        overrides = overrides or {}
        known = set(self.branch_ids)
        unknown = set(overrides) - known
        if unknown:
            raise KeyError(f"threshold override for unknown branch ids {sorted(unknown)}")
        branches = []
        for br in self.branches:
            c = br.flow_threshold if default is None else default
            c = overrides.get(br.id, c)
            branches.append(Branch(br.id, br.from_bus, br.to_bus, br.admittance, float(c)))
        return PowerNetwork(self.buses, tuple(branches), self.base_mva)

    def with_weights(self, weights: Sequence[float]) -> "PowerNetwork":
        weights = np.asarray(weights, dtype=float)
        if weights.shape != (self.n,):
            raise ValueError(f"expected {self.n} weights, got shape {weights.shape}")
        buses = tuple(
            Bus(b.id, b.kind, b.base_injection, b.injection_min, b.injection_max, float(w))
            for b, w in zip(self.buses, weights)
        )
        return PowerNetwork(buses, self.branches, self.base_mva)


def _validate(net: PowerNetwork) -> None:
    if not net.buses:
        raise CaseValidationError("case has no buses")
    ids = [b.id for b in net.buses]
    seen = set()
    for row, b in enumerate(net.buses, start=1):
        where = f"bus row {row} (id {b.id})"
        if b.id in seen:
            raise CaseValidationError(f"{where}: duplicate bus id")
        seen.add(b.id)
        if b.kind not in (GENERATOR, LOAD):
            raise CaseValidationError(f"{where}: kind must be 'generator' or 'load', got {b.kind!r}")
        if not b.weight > 0:
            raise CaseValidationError(f"{where}: weight must be positive, got {b.weight}")
        tol = 1e-9 * max(1.0, abs(b.base_injection))
        if not (b.injection_min - tol <= b.base_injection <= b.injection_max + tol):
            raise CaseValidationError(
                f"{where}: base injection {b.base_injection} outside "
                f"[{b.injection_min}, {b.injection_max}]"
            )
    known = set(ids)
    for row, br in enumerate(net.branches, start=1):
        where = f"branch row {row} (id {br.id})"
        for end, bus in (("from", br.from_bus), ("to", br.to_bus)):
            if bus not in known:
                raise CaseValidationError(f"{where}: {end} bus {bus} does not exist")
        if br.from_bus == br.to_bus:
            raise CaseValidationError(f"{where}: from and to bus are both {br.from_bus}")
        if not br.admittance > 0:
            raise CaseValidationError(f"{where}: admittance must be positive, got {br.admittance}")
        if not br.flow_threshold > 0:
            raise CaseValidationError(
                f"{where}: flow threshold must be positive, got {br.flow_threshold}"
            )
    imbalance = sum(b.base_injection for b in net.buses)
    if abs(imbalance) > BALANCE_TOL:
        raise CaseValidationError(
            f"bus injections: total {imbalance:.3e} pu exceeds balance tolerance {BALANCE_TOL}"
        )


# --------------------------------------------------------------------------
# readers

Source = Union[str, bytes, PathLike, IO]


def load_case(source: Source, fmt: str | None = None, **options) -> PowerNetwork:
    """Read a case from a path, raw bytes/str, or an open file.

    ``fmt`` is ``"json"`` or ``"matpower"``; when omitted it is taken from the
    file suffix (``.json`` / ``.m``) or sniffed from the content.  Extra
    keyword options are passed to the format reader.
    """
    text, suffix = _read_source(source)
    if fmt is None:
        if suffix == ".json":
            fmt = "json"
        elif suffix == ".m":
            fmt = "matpower"
        else:
            fmt = "json" if text.lstrip().startswith("{") else "matpower"
    fmt = fmt.lower()
    if fmt == "json":
        return parse_json_case(text, **options)
    if fmt in ("matpower", "m"):
        return parse_matpower_case(text, **options)
    raise ValueError(f"unknown case format {fmt!r}")


def _read_source(source: Source) -> tuple[str, str]:
    if isinstance(source, bytes):
        return source.decode("utf-8"), ""
    if isinstance(source, (str, PathLike)):
        path = Path(source)
        if isinstance(source, str) and ("\n" in source or source.lstrip().startswith("{")):
            return source, ""
        return path.read_text(encoding="utf-8"), path.suffix.lower()
    data = source.read()
    if isinstance(data, bytes):
        data = data.decode("utf-8")
    return data, Path(getattr(source, "name", "")).suffix.lower()


def parse_json_case(text: str, default_threshold: float = DEFAULT_THRESHOLD) -> PowerNetwork:
    try:
        doc = json.loads(text)
    except json.JSONDecodeError as exc:
        raise CaseFormatError(f"invalid JSON at line {exc.lineno} column {exc.colno}: {exc.msg}") from exc
    if not isinstance(doc, dict):
        raise CaseFormatError("top-level JSON value must be an object")
    buses = []
    for row, rec in enumerate(doc.get("buses", []), start=1):
        try:
            buses.append(Bus(
                id=int(rec["id"]),
                kind=str(rec.get("kind", LOAD)),
                base_injection=float(rec["p0"]),
                injection_min=float(rec["pmin"]),
                injection_max=float(rec["pmax"]),
                weight=float(rec.get("weight", 1.0)),
            ))
        except (KeyError, TypeError, ValueError) as exc:
            raise CaseFormatError(f"buses[{row - 1}]: bad or missing field {exc}") from exc
    branches = []
    for row, rec in enumerate(doc.get("branches", []), start=1):
        try:
            c = rec.get("c")
            branches.append(Branch(
                id=int(rec.get("id", row)),
                from_bus=int(rec["from"]),
                to_bus=int(rec["to"]),
                admittance=float(rec["y"]),
                flow_threshold=float(default_threshold if c is None else c),
            ))
        except (KeyError, TypeError, ValueError) as exc:
            raise CaseFormatError(f"branches[{row - 1}]: bad or missing field {exc}") from exc
    return PowerNetwork(tuple(buses), tuple(branches), float(doc.get("base_mva", 100.0)))


def network_to_json(net: PowerNetwork) -> dict:
    return {
        "base_mva": net.base_mva,
        "buses": [
            {"id": b.id, "kind": b.kind, "p0": b.base_injection, "pmin": b.injection_min,
             "pmax": b.injection_max, "weight": b.weight}
            for b in net.buses
        ],
        "branches": [
            {"id": br.id, "from": br.from_bus, "to": br.to_bus, "y": br.admittance,
             "c": br.flow_threshold}
            for br in net.branches
        ],
    }


# MATPOWER column indices (0-based)
_BUS_I, _BUS_TYPE, _PD = 0, 1, 2
_REF = 3
_GEN_BUS, _PG, _GEN_STATUS, _PMAX = 0, 1, 7, 8
_F_BUS, _T_BUS, _BR_X, _RATE_A, _BR_STATUS = 0, 1, 3, 5, 10

_MATRIX_RE = re.compile(r"mpc\.(\w+)\s*=\s*\[(.*?)\]\s*;?", re.S)
_SCALAR_RE = re.compile(r"mpc\.baseMVA\s*=\s*([-+0-9.eE]+)")


def _parse_matrix(name: str, body: str, min_cols: int) -> np.ndarray:
    rows = []
    lines = body.splitlines()
    for lineno, line in enumerate(lines, start=1):
        line = line.split("%", 1)[0]
        for chunk in line.split(";"):
            chunk = chunk.strip().replace(",", " ")
            if not chunk:
                continue
            try:
                rows.append([float(tok) for tok in chunk.split()])
            except ValueError as exc:
                raise CaseFormatError(
                    f"mpc.{name} row {len(rows) + 1}: non-numeric entry ({exc})"
                ) from exc
            if len(rows[-1]) < min_cols:
                raise CaseFormatError(
                    f"mpc.{name} row {len(rows)}: expected at least {min_cols} columns, "
                    f"got {len(rows[-1])}"
                )
    if not rows:
        return np.zeros((0, min_cols))
    width = {len(r) for r in rows}
    if len(width) != 1:
        raise CaseFormatError(f"mpc.{name}: rows have differing column counts {sorted(width)}")
    return np.array(rows)


def parse_matpower_case(text: str, default_threshold: float = DEFAULT_THRESHOLD,
                        balance: str = "reference", use_ratings: bool = True) -> PowerNetwork:
    """Build a DC network from MATPOWER text.

    Branch admittance is ``1/x``.  Generator and load powers are netted per
    bus.  AC case files carry generator set-points that include losses, so by
    default (``balance="reference"``) the reference bus output is re-dispatched
    to the lossless DC balance, as a DC power flow does; ``balance="none"``
    leaves the data untouched and lets validation reject an imbalanced case.

    ``rateA`` becomes the flow threshold when ``use_ratings`` is set and the
    rating is positive; otherwise ``default_threshold`` applies.
    """
    tables = {m.group(1): m.group(2) for m in _MATRIX_RE.finditer(text)}
    for name in ("bus", "gen", "branch"):
        if name not in tables:
            raise CaseFormatError(f"missing mpc.{name} matrix")
    m = _SCALAR_RE.search(text)
    base = float(m.group(1)) if m else 100.0
    bus = _parse_matrix("bus", tables["bus"], 3)
    gen = _parse_matrix("gen", tables["gen"], 9)
    branch = _parse_matrix("branch", tables["branch"], 4)

    ids = [int(r[_BUS_I]) for r in bus]
    index = {b: i for i, b in enumerate(ids)}
    n = len(ids)
    load = bus[:, _PD] / base
    pg = np.zeros(n)
    pmax = np.zeros(n)
    has_gen = np.zeros(n, dtype=bool)
    for row, g in enumerate(gen, start=1):
        b = int(g[_GEN_BUS])
        if b not in index:
            raise CaseValidationError(f"gen row {row}: bus {b} does not exist")
        if g[_GEN_STATUS] <= 0:
            continue
        i = index[b]
        has_gen[i] = True
        pg[i] += g[_PG] / base
        pmax[i] += g[_PMAX] / base

    if balance == "reference":
        refs = [i for i, r in enumerate(bus) if int(r[_BUS_TYPE]) == _REF and has_gen[i]]
        if not refs:
            raise CaseValidationError("bus table: no reference bus with an in-service generator")
        pg[refs[0]] += load.sum() - pg.sum()
    elif balance != "none":
        raise ValueError(f"unknown balance mode {balance!r}")

    buses = []
    for i, b in enumerate(ids):
        p0 = pg[i] - load[i]
        if has_gen[i]:
            buses.append(Bus(b, GENERATOR, p0, -load[i], max(pmax[i], pg[i]) , 1.0))
        else:
            buses.append(Bus(b, LOAD, p0, min(p0, 0.0), 0.0 if p0 <= 0 else p0, 1.0))

    branches = []
    for row, r in enumerate(branch, start=1):
        if r.shape[0] > _BR_STATUS and r[_BR_STATUS] <= 0:
            continue
        f, t = int(r[_F_BUS]), int(r[_T_BUS])
        for end, bid in (("from", f), ("to", t)):
            if bid not in index:
                raise CaseValidationError(f"branch row {row}: {end} bus {bid} does not exist")
        x = r[_BR_X]
        if not x > 0:
            raise CaseValidationError(f"branch row {row}: reactance must be positive, got {x}")
        rate = r[_RATE_A] / base if r.shape[0] > _RATE_A else 0.0
        c = rate if (use_ratings and rate > 0) else default_threshold
        branches.append(Branch(row, f, t, 1.0 / x, float(c)))
    return PowerNetwork(tuple(buses), tuple(branches), base)


def ieee57_path() -> Path:
    return Path(__file__).with_name("data") / "case57.m"


def ieee57(threshold: float = DEFAULT_THRESHOLD) -> PowerNetwork:
    """The IEEE 57-bus system with a uniform flow threshold (pu)."""
    return load_case(ieee57_path()).with_thresholds(default=threshold)


# --------------------------------------------------------------------------
# topology

def incidence_matrix(network: PowerNetwork) -> np.ndarray:
    """Oriented branch-bus incidence (+1 at the from bus, -1 at the to bus)."""
    return network.incidence.copy()


def apply_disturbance(network: PowerNetwork, delta) -> np.ndarray:
    """Admittance after a disturbance: ``Y0 + delta``."""
    delta = np.asarray(delta, dtype=float)
    if delta.shape != (network.n_branches,):
        raise InvalidDisturbanceError(
            f"disturbance must have length {network.n_branches}, got shape {delta.shape}"
        )
    Y1 = network.admittance + delta
    bad = np.flatnonzero(Y1 < -1e-12)
    if bad.size:
        ids = [network.branches[i].id for i in bad]
        raise InvalidDisturbanceError(f"negative admittance on branch ids {ids}")
    return np.clip(Y1, 0.0, None)


def sever(network: PowerNetwork, branch_ids: Sequence[int]) -> np.ndarray:
    """Disturbance vector that cuts the given branches completely."""
    delta = np.zeros(network.n_branches)
    for bid in branch_ids:
        pos = network.branch_position(int(bid))
        delta[pos] = -network.admittance[pos]
    return delta
