"""Problem instance generation, serialization, and benchmark-file loading.

Randomness: every generator draws from a Philox4x64-10 counter-based bit
generator keyed by the 64-bit instance seed, so generate(variant, n, seed)
is a pure function and disjoint seeds give independent streams.  The draw
order inside each generator is part of the instance definition and must not
be reordered.

Time units: TSPTW windows are stored divided by the (redefined) start-node
deadline so they lie in [0, 1]; the divisor is kept in ``time_scale`` and
travel times are ``distance / time_scale`` in window units.  CVRPBLTW windows
are stored raw in [0, 3] with unit-speed travel (``time_scale == 1``).
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from enum import Enum

import numpy as np

from .errors import InvariantError, ParameterError, ParseError, SchemaError, SizeError


class Variant(str, Enum):
    TSPTW_HARD = "tsptw_hard"
    TSPTW_MEDIUM = "tsptw_medium"
    CVRPBLTW = "cvrpbltw"
    CVRP = "cvrp"
    TSPDL = "tspdl"
    SOP = "sop"


#: Variants whose solutions include a depot (index 0) and multiple routes.
MULTI_ROUTE = frozenset({Variant.CVRPBLTW, Variant.CVRP})

#: Vehicle capacity by problem size; interpolated by the smallest threshold
#: covering n, extrapolated by +10 per extra 100 customers beyond the table.
CAPACITY_BY_SIZE = ((20, 30), (50, 40), (100, 50), (200, 70))

#: Expected tour length constant for TSPTW-Medium at n = 20; other sizes use
#: T_N = T_20 * sqrt(n / 20).  Overridable via generate(..., t_n=...).
T_20 = 10.9

CVRPBLTW_DEPOT_TW = (0.0, 3.0)
CVRPBLTW_SERVICE_TIME = 0.2
CVRPBLTW_DURATION_LIMIT = 3.0
CVRPBLTW_BACKHAUL_RATIO = 0.2


def capacity_for(n: int) -> int:
    for size, cap in CAPACITY_BY_SIZE:
        if n <= size:
            return cap
    extra = math.ceil((n - CAPACITY_BY_SIZE[-1][0]) / 100)
    return CAPACITY_BY_SIZE[-1][1] + 10 * extra


@dataclass
class Instance:
    """One routing problem.

    ``coords`` has one row per node.  Multi-route variants put the depot at
    index 0 and customers at 1..n; single-tour variants have n nodes total
    with node 0 the designated start.
    """

    variant: Variant
    n: int
    coords: np.ndarray                      # (num_nodes, 2) in [0, 1]^2
    tw: np.ndarray | None = None            # (num_nodes, 2) lower/upper
    demand: np.ndarray | None = None        # (num_nodes,) int
    capacity: int | None = None
    backhaul: np.ndarray | None = None      # (num_nodes,) bool
    service_time: float | None = None
    duration_limit: float | None = None
    draft_limit: np.ndarray | None = None   # (num_nodes,) float
    precedence: tuple[tuple[int, int], ...] | None = None
    seed: int = 0
    time_scale: float | None = None         # travel-time divisor (TSPTW)
    _dist: np.ndarray | None = field(default=None, repr=False, compare=False)

    def __post_init__(self):
        self.variant = Variant(self.variant)
        self.coords = np.asarray(self.coords, dtype=np.float64)
        if self.tw is not None:
            self.tw = np.asarray(self.tw, dtype=np.float64)
        if self.demand is not None:
            self.demand = np.asarray(self.demand, dtype=np.int64)
        if self.backhaul is not None:
            self.backhaul = np.asarray(self.backhaul, dtype=bool)
        if self.draft_limit is not None:
            self.draft_limit = np.asarray(self.draft_limit, dtype=np.float64)
        if self.precedence is not None:
            self.precedence = tuple(sorted((int(a), int(b)) for a, b in self.precedence))
        self.validate()

    # -- structural checks ------------------------------------------------

    @property
    def num_nodes(self) -> int:
        return self.n + 1 if self.variant in MULTI_ROUTE else self.n

    @property
    def has_depot(self) -> bool:
        return self.variant in MULTI_ROUTE

    @property
    def feasibility_guaranteed(self) -> bool:
        """True when the generator guarantees a feasible solution exists."""
        return self.variant is not Variant.TSPTW_MEDIUM

    def validate(self):
        m = self.num_nodes
        if self.coords.shape != (m, 2):
            raise SchemaError(f"coords shape {self.coords.shape}, expected ({m}, 2)")
        if np.any(self.coords < 0.0) or np.any(self.coords > 1.0):
            raise InvariantError("coordinates must lie in [0, 1]")
        required = _REQUIRED_FIELDS[self.variant]
        for name in _OPTIONAL_FIELDS:
            val = getattr(self, name)
            if name in required and val is None:
                raise SchemaError(f"{self.variant.value} requires field '{name}'")
            if name not in required and val is not None:
                raise SchemaError(f"{self.variant.value} must not carry field '{name}'")
        if self.tw is not None:
            if self.tw.shape != (m, 2):
                raise SchemaError(f"tw shape {self.tw.shape}, expected ({m}, 2)")
            if np.any(self.tw[:, 0] > self.tw[:, 1] + 1e-12):
                raise InvariantError("time windows must satisfy l_i <= u_i")
            if np.any(self.tw[:, 0] < -1e-12):
                raise InvariantError("time windows must be nonnegative")
        if self.demand is not None and self.demand.shape != (m,):
            raise SchemaError("demand length mismatch")
        if self.backhaul is not None and self.backhaul.shape != (m,):
            raise SchemaError("backhaul length mismatch")
        if self.draft_limit is not None:
            if self.draft_limit.shape != (m,):
                raise SchemaError("draft_limit length mismatch")
            if np.any(self.draft_limit < self.demand - 1e-12):
                raise InvariantError("draft limits must satisfy d_i >= q_i")
        if self.precedence is not None:
            for a, b in self.precedence:
                if not (0 <= a < m and 0 <= b < m and a != b):
                    raise SchemaError(f"precedence pair ({a}, {b}) out of range")
            if not _is_acyclic(m, self.precedence):
                raise InvariantError("precedence relation must be acyclic")

    def dist_matrix(self) -> np.ndarray:
        if self._dist is None:
            diff = self.coords[:, None, :] - self.coords[None, :, :]
            self._dist = np.sqrt((diff * diff).sum(-1))
        return self._dist

    def __eq__(self, other):
        if not isinstance(other, Instance):
            return NotImplemented
        for name in ("variant", "n", "capacity", "service_time", "duration_limit",
                     "precedence", "seed", "time_scale"):
            if getattr(self, name) != getattr(other, name):
                return False
        for name in ("coords", "tw", "demand", "backhaul", "draft_limit"):
            a, b = getattr(self, name), getattr(other, name)
            if (a is None) != (b is None):
                return False
            if a is not None and not np.array_equal(a, b):
                return False
        return True


_OPTIONAL_FIELDS = ("tw", "demand", "capacity", "backhaul", "service_time",
                    "duration_limit", "draft_limit", "precedence", "time_scale")

_REQUIRED_FIELDS = {
    Variant.TSPTW_HARD: {"tw", "time_scale"},
    Variant.TSPTW_MEDIUM: {"tw", "time_scale"},
    Variant.CVRPBLTW: {"tw", "demand", "capacity", "backhaul", "service_time",
                       "duration_limit"},
    Variant.CVRP: {"demand", "capacity"},
    Variant.TSPDL: {"demand", "draft_limit"},
    Variant.SOP: {"precedence"},
}


def _is_acyclic(m: int, pairs) -> bool:
    # Kahn's algorithm; pairs is small at desk scale.
    indeg = [0] * m
    out = [[] for _ in range(m)]
    for a, b in pairs:
        out[a].append(b)
        indeg[b] += 1
    queue = [v for v in range(m) if indeg[v] == 0]
    seen = 0
    while queue:
        v = queue.pop()
        seen += 1
        for w in out[v]:
            indeg[w] -= 1
            if indeg[w] == 0:
                queue.append(w)
    return seen == m


def _rng(seed: int) -> np.random.Generator:
    return np.random.Generator(np.random.Philox(key=np.uint64(seed)))


# -- generation ------------------------------------------------------------


def generate(variant: Variant | str, n: int, seed: int, *, eta: float | None = None,
             t_n: float | None = None, sigma: float = 90.0, h: float = 20.0,
             g: float = 0.3, capacity: int | None = None) -> Instance:
    """Generate one instance of ``variant`` with ``n`` customer nodes.

    Variant-specific parameters: ``eta`` (TSPTW-Hard window half-width,
    default n), ``t_n`` (TSPTW-Medium horizon, default T_20*sqrt(n/20)),
    ``sigma`` (TSPDL percentage of binding draft limits), ``h``/``g`` (SOP
    precedence percentage and distance-mix weight).
    """
    variant = Variant(variant)
    if n < 2:
        raise SizeError(f"n={n} too small, need at least 2 customer nodes")
    if not 0 <= sigma <= 100:
        raise ParameterError(f"sigma={sigma} outside [0, 100]")
    if not 0 <= h <= 100:
        raise ParameterError(f"h={h} outside [0, 100]")
    if not 0.0 <= g <= 1.0:
        raise ParameterError(f"g={g} outside [0, 1]")
    seed = int(seed) & 0xFFFFFFFFFFFFFFFF
    rng = _rng(seed)
    if variant is Variant.TSPTW_HARD:
        return _gen_tsptw_hard(n, seed, rng, eta)
    if variant is Variant.TSPTW_MEDIUM:
        return _gen_tsptw_medium(n, seed, rng, t_n)
    if variant is Variant.CVRPBLTW:
        return _gen_cvrpbltw(n, seed, rng, capacity)
    if variant is Variant.CVRP:
        return _gen_cvrp(n, seed, rng, capacity)
    if variant is Variant.TSPDL:
        return _gen_tspdl(n, seed, rng, sigma)
    return _gen_sop(n, seed, rng, h, g)


def _tsptw_hard_parts(n: int, rng: np.random.Generator, eta: float | None):
    """Witness permutation and raw windows; exposed for witness-based tests."""
    if eta is None:
        eta = float(n)
    coords = rng.random((n, 2))
    witness = rng.permutation(n)
    diff = coords[witness[1:]] - coords[witness[:-1]]
    cum = np.concatenate([[0.0], np.cumsum(np.sqrt((diff * diff).sum(-1)))])
    lo = np.empty(n)
    hi = np.empty(n)
    lo[witness] = cum - eta * rng.random(n)
    hi[witness] = cum + eta * rng.random(n)
    lo = np.maximum(lo, 0.0)  # arrivals are nonnegative, so this loses nothing
    # Relabel so the witness's first node is the instance's fixed start.
    swap = np.arange(n)
    a = witness[0]
    swap[[0, a]] = swap[[a, 0]]
    inv = np.empty(n, dtype=np.int64)
    inv[swap] = np.arange(n)
    coords, lo, hi = coords[swap], lo[swap], hi[swap]
    witness = inv[witness]
    return coords, witness, lo, hi, cum


def _finish_tsptw(variant, n, seed, coords, lo, hi):
    d0 = np.sqrt(((coords[1:] - coords[0]) ** 2).sum(-1))
    u0 = float(np.max(hi[1:] + d0))
    hi[0] = u0
    lo[0] = 0.0
    tw = np.stack([lo, hi], axis=1) / u0
    return Instance(variant=variant, n=n, coords=coords, tw=tw, seed=seed,
                    time_scale=u0)


def _gen_tsptw_hard(n, seed, rng, eta):
    coords, _, lo, hi, _ = _tsptw_hard_parts(n, rng, eta)
    return _finish_tsptw(Variant.TSPTW_HARD, n, seed, coords, lo, hi)


def _gen_tsptw_medium(n, seed, rng, t_n):
    if t_n is None:
        t_n = T_20 * math.sqrt(n / 20.0)
    coords = rng.random((n, 2))
    lo = t_n * rng.random(n)
    hi = lo + t_n * rng.uniform(0.1, 0.2, size=n)
    return _finish_tsptw(Variant.TSPTW_MEDIUM, n, seed, coords, lo, hi)


def _gen_cvrpbltw(n, seed, rng, capacity):
    depot_lo, depot_hi = CVRPBLTW_DEPOT_TW
    s = CVRPBLTW_SERVICE_TIME
    if capacity is None:
        capacity = capacity_for(n)
    coords = rng.random((n + 1, 2))
    demand = np.concatenate([[0], rng.integers(1, 10, size=n)])
    n_back = int(math.floor(CVRPBLTW_BACKHAUL_RATIO * n))
    backhaul = np.zeros(n + 1, dtype=bool)
    backhaul[rng.choice(np.arange(1, n + 1), size=n_back, replace=False)] = True
    tw = np.zeros((n + 1, 2))
    tw[0] = (depot_lo, depot_hi)
    for i in range(1, n + 1):
        while True:
            d0 = float(np.sqrt(((coords[i] - coords[0]) ** 2).sum()))
            g_lo, g_hi = depot_lo + d0, depot_hi - d0 - s
            if g_lo < g_hi:
                break
            coords[i] = rng.random(2)  # window domain empty: node too remote
        gamma = rng.uniform(g_lo, g_hi)
        width = rng.uniform(s / 2, depot_hi / 3)
        tw[i] = (max(depot_lo, gamma - width), min(depot_hi, gamma + width))
    return Instance(variant=Variant.CVRPBLTW, n=n, coords=coords, tw=tw,
                    demand=demand, capacity=int(capacity), backhaul=backhaul,
                    service_time=s, duration_limit=CVRPBLTW_DURATION_LIMIT,
                    seed=seed)


def _gen_cvrp(n, seed, rng, capacity):
    if capacity is None:
        capacity = capacity_for(n)
    coords = rng.random((n + 1, 2))
    demand = np.concatenate([[0], rng.integers(1, 10, size=n)])
    return Instance(variant=Variant.CVRP, n=n, coords=coords, demand=demand,
                    capacity=int(capacity), seed=seed)


def _gen_tspdl(n, seed, rng, sigma):
    n_bind = math.ceil(sigma / 100.0 * n)
    if n_bind > n - 2:
        # Positions 0 and 1 of any feasible tour carry the full load, so at
        # least two ports must accept it.
        raise SizeError(f"n={n} cannot carry {n_bind} binding draft limits")
    coords = rng.random((n, 2))
    demand = np.concatenate([[0], rng.integers(1, 10, size=n - 1)])
    total = float(demand.sum())
    witness = np.concatenate([[0], rng.permutation(np.arange(1, n))])
    # Load on board when arriving at witness position k (before unloading).
    arrive_load = total - np.concatenate([[0.0], np.cumsum(demand[witness[:-1]])])
    draft = np.full(n, total)
    bind_pos = rng.choice(np.arange(2, n), size=n_bind, replace=False)
    for k in bind_pos:
        d = rng.uniform(arrive_load[k], total)
        if d >= total:  # float rounding can hit the open upper end
            d = np.nextafter(total, 0.0)
        draft[witness[k]] = d
    return Instance(variant=Variant.TSPDL, n=n, coords=coords, demand=demand,
                    draft_limit=draft, seed=seed)


def _gen_sop(n, seed, rng, h, g):
    if n < 3:
        raise SizeError("SOP needs n >= 3 for a nontrivial precedence order")
    coords = rng.random((n, 2))
    witness = np.concatenate([[0], rng.permutation(np.arange(1, n - 1)), [n - 1]])
    idx_a, idx_b = np.triu_indices(n, k=1)
    pairs = np.stack([witness[idx_a], witness[idx_b]], axis=1)
    dist = np.sqrt(((coords[pairs[:, 0]] - coords[pairs[:, 1]]) ** 2).sum(-1))
    span = dist.max() - dist.min()
    dist_norm = (dist - dist.min()) / span if span > 0 else np.zeros_like(dist)
    score = g * (1.0 - dist_norm) + (1.0 - g) * rng.random(len(pairs))
    keep = int(round(h / 100.0 * len(pairs)))
    chosen = np.argsort(-score, kind="stable")[:keep]
    prec = tuple((int(a), int(b)) for a, b in pairs[chosen])
    return Instance(variant=Variant.SOP, n=n, coords=coords, precedence=prec,
                    seed=seed)


# -- serialization ----------------------------------------------------------

_FIELD_ORDER = ("variant", "n", "coords", "tw", "demand", "capacity", "backhaul",
                "service_time", "duration_limit", "draft_limit", "precedence",
                "seed", "time_scale")


def instance_to_record(inst: Instance) -> dict:
    rec = {
        "variant": inst.variant.value,
        "n": inst.n,
        "coords": inst.coords.tolist(),
        "tw": inst.tw.tolist() if inst.tw is not None else None,
        "demand": inst.demand.tolist() if inst.demand is not None else None,
        "capacity": inst.capacity,
        "backhaul": inst.backhaul.tolist() if inst.backhaul is not None else None,
        "service_time": inst.service_time,
        "duration_limit": inst.duration_limit,
        "draft_limit": inst.draft_limit.tolist() if inst.draft_limit is not None else None,
        "precedence": [list(p) for p in inst.precedence] if inst.precedence is not None else None,
        "seed": inst.seed,
        "time_scale": inst.time_scale,
    }
    return rec


def instance_from_record(rec: dict) -> Instance:
    unknown = set(rec) - set(_FIELD_ORDER)
    if unknown:
        raise SchemaError(f"unknown fields {sorted(unknown)}")
    for name in ("variant", "n", "coords", "seed"):
        if rec.get(name) is None:
            raise SchemaError(f"missing required field '{name}'")
    try:
        variant = Variant(rec["variant"])
    except ValueError as exc:
        raise SchemaError(f"unknown variant {rec['variant']!r}") from exc
    kwargs = {}
    for name in ("capacity", "service_time", "duration_limit", "time_scale"):
        kwargs[name] = rec.get(name)
    for name in ("tw", "demand", "backhaul", "draft_limit"):
        kwargs[name] = np.asarray(rec[name]) if rec.get(name) is not None else None
    prec = rec.get("precedence")
    kwargs["precedence"] = tuple(tuple(p) for p in prec) if prec is not None else None
    return Instance(variant=variant, n=int(rec["n"]),
                    coords=np.asarray(rec["coords"]), seed=int(rec["seed"]),
                    **kwargs)


def save_instances(instances, path):
    """Write one self-describing JSON record per line."""
    with open(path, "w", encoding="utf-8") as f:
        for inst in instances:
            f.write(json.dumps(instance_to_record(inst)) + "\n")


def load_instances(path) -> list[Instance]:
    out = []
    with open(path, "r", encoding="utf-8") as f:
        for lineno, line in enumerate(f, start=1):
            line = line.strip()
            if not line:
                continue
            try:
                rec = json.loads(line)
            except json.JSONDecodeError as exc:
                raise ParseError(f"{path}:{lineno}: not a JSON record: {exc}") from exc
            try:
                out.append(instance_from_record(rec))
            except (SchemaError, InvariantError) as exc:
                raise type(exc)(f"{path}:{lineno}: {exc}") from exc
    return out


# -- CVRPLIB X-format loader -------------------------------------------------

_CVRPLIB_KEYS = {"NAME", "COMMENT", "TYPE", "DIMENSION", "EDGE_WEIGHT_TYPE",
                 "CAPACITY"}
_CVRPLIB_SECTIONS = {"NODE_COORD_SECTION", "DEMAND_SECTION", "DEPOT_SECTION",
                     "EOF"}


def load_cvrplib(path) -> Instance:
    """Load a CVRPLIB X-format .vrp file as a CVRP instance.

    Coordinates are min-max normalized into [0, 1]^2 preserving the aspect
    ratio; demands and the capacity stay integral.
    """
    header: dict[str, str] = {}
    coords: dict[int, tuple[float, float]] = {}
    demands: dict[int, int] = {}
    depot = None
    section = None
    with open(path, "r", encoding="utf-8") as f:
        for lineno, raw in enumerate(f, start=1):
            line = raw.strip()
            if not line:
                continue
            word = line.split()[0].rstrip(":")
            if word in _CVRPLIB_SECTIONS:
                section = word
                if word == "EOF":
                    break
                continue
            if section is None:
                if ":" not in line:
                    raise ParseError(f"{path}:{lineno}: expected 'KEY : value'")
                key, _, value = line.partition(":")
                key = key.strip()
                if key not in _CVRPLIB_KEYS:
                    raise ParseError(f"{path}:{lineno}: unknown keyword {key!r}")
                header[key] = value.strip()
            elif section == "NODE_COORD_SECTION":
                parts = line.split()
                if len(parts) != 3:
                    raise ParseError(f"{path}:{lineno}: bad coordinate row")
                coords[int(parts[0])] = (float(parts[1]), float(parts[2]))
            elif section == "DEMAND_SECTION":
                parts = line.split()
                if len(parts) != 2:
                    raise ParseError(f"{path}:{lineno}: bad demand row")
                demands[int(parts[0])] = int(parts[1])
            elif section == "DEPOT_SECTION":
                value = int(line.split()[0])
                if value != -1 and depot is None:
                    depot = value
    if "DIMENSION" not in header or "CAPACITY" not in header:
        raise ParseError(f"{path}: missing DIMENSION or CAPACITY")
    dim = int(header["DIMENSION"])
    if not coords:
        raise ParseError(f"{path}: EOF before NODE_COORD_SECTION")
    if not demands:
        raise ParseError(f"{path}: EOF before DEMAND_SECTION")
    if depot is None:
        raise SchemaError(f"{path}: missing depot")
    if len(coords) != dim or len(demands) != dim:
        raise ParseError(f"{path}: expected {dim} nodes")
    order = [depot] + [i for i in sorted(coords) if i != depot]
    xy = np.array([coords[i] for i in order], dtype=np.float64)
    mins = xy.min(axis=0)
    span = float(max((xy.max(axis=0) - mins).max(), 1e-12))
    xy = (xy - mins) / span
    q = np.array([demands[i] for i in order], dtype=np.int64)
    if q[0] != 0:
        raise SchemaError(f"{path}: depot demand must be 0")
    return Instance(variant=Variant.CVRP, n=dim - 1, coords=xy, demand=q,
                    capacity=int(header["CAPACITY"]), seed=0)


def derive_seeds(master_seed: int, stream: int, count: int) -> np.ndarray:
    """Disjoint 64-bit instance seeds for (master seed, stream index)."""
    ss = np.random.SeedSequence(entropy=int(master_seed) & 0xFFFFFFFFFFFFFFFF,
                                spawn_key=(int(stream),))
    return ss.generate_state(count, dtype=np.uint64)
