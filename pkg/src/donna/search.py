"""Cost models, Pareto utilities, NSGA-II and the random-search baseline."""
from __future__ import annotations

import csv
import math
import os
import shlex
import subprocess
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Mapping, Sequence

import numpy as np
import yaml

from .blocks import build_block, build_network, count_macs, count_params
from .space import Genome, SearchSpace, cardinality, encode, sample_uniform

__all__ = [
    "CostModel",
    "make_cost_model",
    "CostProviderError",
    "Individual",
    "dominates",
    "non_dominated_sort",
    "crowding_distance",
    "hypervolume",
    "pareto_filter",
    "SearchConfig",
    "SearchResult",
    "nsga2_search",
    "RandomSearchResult",
    "InfeasibleConstraint",
    "random_search_baseline",
    "LedgerTerm",
    "cost_ledger",
    "random_search_ratio",
    "write_pareto_csv",
]


class CostProviderError(RuntimeError):
    pass


# --------------------------------------------------------------------------
# cost models
# --------------------------------------------------------------------------


class CostModel:
    """Deterministic scalar cost per genome with an in-memory cache.

    ``kind`` is one of analytic-macs, analytic-params, latency-table,
    external-command.
    """

    def __init__(self, kind: str, space: SearchSpace, params: Mapping | None = None):
        self.kind = kind
        self.space = space
        self.params = dict(params or {})
        self.cache: dict[str, float] = {}
        self.invocations = 0
        if kind in ("analytic-macs", "analytic-params"):
            self._tables = self._analytic_tables(kind)
        elif kind == "latency-table":
            self._overhead, self._table = _load_latency_table(self.params)
        elif kind == "external-command":
            if "command" not in self.params:
                raise ValueError("external-command cost needs a 'command'")
            self._cache_file = Path(self.params["cache"]) if self.params.get("cache") else None
            self._load_external_cache()
        else:
            raise ValueError(f"unknown cost kind {kind!r}")

    @property
    def name(self) -> str:
        return self.params.get("name", self.kind)

    def _analytic_tables(self, kind: str):
        space = self.space
        preset = space.preset
        shape = (1, preset.in_channels, preset.image_size, preset.image_size)
        # a single-choice skeleton gives stem + head; blocks are added per position
        skeleton = build_network(preset, [s.reference for s in space.slots], 0)
        if kind == "analytic-macs":
            total, s = skeleton.stem.macs(shape)
            for b in skeleton.blocks:
                _, s = b.macs(s)
            base = total + skeleton.head.macs(s)[0]
        else:
            base = count_params(skeleton.stem) + count_params(skeleton.head)
        tables = []
        for n, slot in enumerate(space.slots):
            row = []
            for c in space.choices[n]:
                blk = build_block(c, slot, 0)
                if kind == "analytic-macs":
                    row.append(count_macs(blk, (1, slot.in_channels, slot.in_size, slot.in_size)))
                else:
                    row.append(count_params(blk))
            tables.append(row)
        return base, tables

    def __call__(self, genome: Sequence[int]) -> float:
        g = self.space.validate(genome)
        key = encode(g)
        if key in self.cache:
            return self.cache[key]
        if self.kind in ("analytic-macs", "analytic-params"):
            base, tables = self._tables
            cost = float(base + sum(tables[n][i] for n, i in enumerate(g)))
        elif self.kind == "latency-table":
            root = self.space.to_root(g)
            cost = self._overhead
            for n, r in enumerate(root):
                try:
                    cost += self._table[n][r]
                except KeyError:
                    raise KeyError(f"latency table has no entry for position {n}, choice {r}") from None
            cost = float(cost)
        else:
            cost = self._external(g)
        self.cache[key] = cost
        return cost

    # -- external provider -------------------------------------------------

    def _external_key(self, g: Genome) -> tuple[str, str]:
        return self.space.library_hash, encode(self.space.to_root(g))

    def _load_external_cache(self) -> None:
        self._external_cache: dict[tuple[str, str], float] = {}
        if self._cache_file and self._cache_file.exists():
            for line in self._cache_file.read_text().splitlines():
                parts = line.split()
                if len(parts) == 3:
                    self._external_cache[(parts[0], parts[1])] = float(parts[2])

    def _external(self, g: Genome) -> float:
        key = self._external_key(g)
        if key in self._external_cache:
            return self._external_cache[key]
        cmd = self.params["command"]
        argv = shlex.split(cmd) if isinstance(cmd, str) else list(cmd)
        self.invocations += 1
        try:
            proc = subprocess.run(
                argv, input=f"{key[0]} {key[1]}\n", capture_output=True, text=True,
                timeout=float(self.params.get("timeout", 60)),
            )
        except (OSError, subprocess.TimeoutExpired) as exc:
            raise CostProviderError(f"cost command {argv[0]!r} failed: {exc}") from exc
        if proc.returncode != 0:
            raise CostProviderError(
                f"cost command exited {proc.returncode} for {key[1]}: {proc.stderr.strip()[:200]}"
            )
        try:
            cost = float(proc.stdout.strip())
        except ValueError:
            raise CostProviderError(f"cost command printed {proc.stdout.strip()[:80]!r}, expected a number") from None
        if not math.isfinite(cost) or cost < 0:
            raise CostProviderError(f"cost command returned invalid cost {cost}")
        self._external_cache[key] = cost
        if self._cache_file:
            with open(self._cache_file, "a") as f:
                f.write(f"{key[0]} {key[1]} {cost!r}\n")
        return cost


def _load_latency_table(params: Mapping) -> tuple[float, dict[int, dict[int, float]]]:
    data = params.get("table")
    if data is None:
        if "path" not in params:
            raise ValueError("latency-table cost needs 'path' or inline 'table'")
        data = yaml.safe_load(Path(params["path"]).read_text())
    if "overhead" not in data or "positions" not in data:
        raise ValueError("latency table needs 'overhead' and 'positions'")
    table = {int(n): {int(c): float(v) for c, v in row.items()} for n, row in data["positions"].items()}
    return float(data["overhead"]), table


def make_cost_model(spec: Mapping | str, space: SearchSpace) -> CostModel:
    """Build from a spec mapping ``{kind: ..., ...}`` or a bare kind name."""
    if isinstance(spec, str):
        spec = {"kind": spec}
    spec = dict(spec)
    aliases = {"macs": "analytic-macs", "params": "analytic-params"}
    kind = aliases.get(spec["kind"], spec["kind"])
    return CostModel(kind, space, spec)


# --------------------------------------------------------------------------
# Pareto utilities; objectives are (accuracy: maximize, cost: minimize)
# --------------------------------------------------------------------------


@dataclass
class Individual:
    genome: Genome
    accuracy: float
    cost: float
    rank: int = 0
    crowding: float = 0.0
    violation: float = 0.0


def dominates(a: Sequence[float], b: Sequence[float]) -> bool:
    """``a`` dominates ``b`` for (accuracy, cost) pairs."""
    return a[0] >= b[0] and a[1] <= b[1] and (a[0] > b[0] or a[1] < b[1])


def _cdominates(a: Individual, b: Individual) -> bool:
    if a.violation < b.violation:
        return True
    if a.violation > b.violation:
        return False
    return dominates((a.accuracy, a.cost), (b.accuracy, b.cost))


def non_dominated_sort(points: Sequence) -> list[list[int]]:
    """Fast non-dominated sorting; returns fronts as index lists (front 1 first).

    ``points`` may be (accuracy, cost) pairs or :class:`Individual` objects,
    the latter using constrained domination.
    """
    n = len(points)
    if n and isinstance(points[0], Individual):
        dom = lambda i, j: _cdominates(points[i], points[j])  # noqa: E731
    else:
        dom = lambda i, j: dominates(points[i], points[j])  # noqa: E731
    beats: list[list[int]] = [[] for _ in range(n)]
    count = [0] * n
    fronts: list[list[int]] = [[]]
    for i in range(n):
        for j in range(i + 1, n):
            if dom(i, j):
                beats[i].append(j)
                count[j] += 1
            elif dom(j, i):
                beats[j].append(i)
                count[i] += 1
    fronts[0] = [i for i in range(n) if count[i] == 0]
    while fronts[-1]:
        nxt = []
        for i in fronts[-1]:
            for j in beats[i]:
                count[j] -= 1
                if count[j] == 0:
                    nxt.append(j)
        fronts.append(sorted(nxt))
    return fronts[:-1]


def crowding_distance(points: Sequence[Sequence[float]]) -> np.ndarray:
    """Crowding distance of one front over both objectives."""
    f = np.asarray(points, dtype=np.float64).reshape(len(points), -1)
    n = len(f)
    d = np.zeros(n)
    if n <= 2:
        return np.full(n, np.inf)
    for k in range(f.shape[1]):
        order = np.argsort(f[:, k], kind="stable")
        span = f[order[-1], k] - f[order[0], k]
        d[order[0]] = d[order[-1]] = np.inf
        if span > 0:
            d[order[1:-1]] += (f[order[2:], k] - f[order[:-2], k]) / span
    return d


def pareto_filter(points: Sequence[Sequence[float]]) -> list[int]:
    """Indices of the non-dominated points (duplicates all kept), ascending.

    One sort and a sweep: within a cost level only the top accuracy survives,
    and it must beat every strictly cheaper point.
    """
    if not len(points):
        return []
    f = np.asarray(points, dtype=np.float64).reshape(len(points), 2)
    order = np.lexsort((-f[:, 0], f[:, 1]))
    keep: list[int] = []
    best = -np.inf
    i = 0
    while i < len(order):
        cost = f[order[i], 1]
        top = f[order[i], 0]
        j = i
        while j < len(order) and f[order[j], 1] == cost:
            if f[order[j], 0] == top and top > best:
                keep.append(int(order[j]))
            j += 1
        best = max(best, top)
        i = j
    return sorted(keep)


def hypervolume(points: Sequence[Sequence[float]], reference: Sequence[float]) -> float:
    """Area dominated by ``points`` and bounded by ``reference`` = (min accuracy, max cost)."""
    ref_acc, ref_cost = float(reference[0]), float(reference[1])
    pts = [(float(a), float(c)) for a, c in points]
    for a, c in pts:
        if a < ref_acc or c > ref_cost:
            raise ValueError(f"point ({a}, {c}) lies outside the reference point ({ref_acc}, {ref_cost})")
    if not pts:
        return 0.0
    front = sorted({pts[i] for i in pareto_filter(pts)}, key=lambda p: (p[1], p[0]))
    area = 0.0
    for i, (a, c) in enumerate(front):
        nxt = front[i + 1][1] if i + 1 < len(front) else ref_cost
        area += (a - ref_acc) * (nxt - c)
    return area


# --------------------------------------------------------------------------
# NSGA-II
# --------------------------------------------------------------------------


@dataclass(frozen=True)
class SearchConfig:
    population: int = 100
    generations: int = 200
    stagnation: int = 20
    mutation_rate: float | None = None  # default 1/N
    crossover_rate: float = 0.9
    seed: int = 0
    max_evaluations: int | None = None
    cost_band: tuple[float, float] | None = None  # feasible cost interval
    # check the (cheap) cost first and redraw out-of-band candidates, so the
    # accuracy function and the evaluation budget only see feasible genomes
    screen_band: bool = False

    def __post_init__(self):
        if self.population < 2 or self.population % 2:
            raise ValueError("population must be even and >= 2")
        for r in (self.crossover_rate, self.mutation_rate):
            if r is not None and not 0.0 <= r <= 1.0:
                raise ValueError("rates must lie in [0, 1]")


@dataclass
class SearchResult:
    front: list[Individual]
    history: list[dict]
    evaluations: int
    archive: list[Individual] = field(default_factory=list)

    def best_accuracy(self) -> float:
        feasible = [i for i in self.archive if i.violation == 0]
        return max(i.accuracy for i in feasible) if feasible else float("nan")


def _violation(cost: float, band: tuple[float, float] | None) -> float:
    if band is None:
        return 0.0
    lo, hi = band
    return max(0.0, lo - cost, cost - hi)


def nsga2_search(
    space: SearchSpace,
    accuracy_fn: Callable[[Genome], float],
    cost_fn: Callable[[Genome], float],
    config: SearchConfig = SearchConfig(),
    on_generation: Callable[[dict], None] | None = None,
) -> SearchResult:
    """Bi-objective NSGA-II over genomes of ``space``.

    Every evaluated genome goes into an archive; the returned front is the
    archive's non-dominated (feasible, if a cost band is set) subset.
    Offspring never repeat an already-evaluated genome.
    """
    rng = np.random.default_rng(config.seed)
    sizes = np.array(space.sizes)
    n_pos = len(sizes)
    pm = config.mutation_rate if config.mutation_rate is not None else 1.0 / n_pos
    total = cardinality(space)
    budget = config.max_evaluations if config.max_evaluations is not None else math.inf
    archive: dict[Genome, Individual] = {}

    def evaluate(genomes: list[Genome]) -> list[Individual]:
        out = []
        for g in genomes:  # fixed index order keeps runs deterministic
            c = float(cost_fn(g))
            ind = Individual(g, float(accuracy_fn(g)), c, violation=_violation(c, config.cost_band))
            archive[g] = ind
            out.append(ind)
        return out

    def fresh(g: Genome, seen: set) -> Genome | None:
        tries = 0
        while g in seen:
            if tries >= 20:
                return None
            arr = np.array(g)
            pos = rng.integers(n_pos)
            arr[pos] = rng.integers(sizes[pos])
            g = tuple(int(v) for v in arr)
            tries += 1
        return g

    screening = config.screen_band and config.cost_band is not None

    def admissible(g: Genome) -> bool:
        return not screening or _violation(float(cost_fn(g)), config.cost_band) == 0

    # initial population: distinct uniform genomes
    init: list[Genome] = []
    seen: set = set()
    want = int(min(config.population, total, budget))
    attempts = 0
    while len(init) < want and attempts < (1000 if screening else 100) * want:
        for g in sample_uniform(space, want, int(rng.integers(2**31))):
            if g not in seen and len(init) < want and admissible(g):
                seen.add(g)
                init.append(g)
        attempts += want
    if not init:
        raise InfeasibleConstraint(f"no genome with cost in {config.cost_band} after {attempts} draws")
    pop = evaluate(init)
    costs = [i.cost for i in pop]
    hv_ref_cost = max(costs) * 1.1 if max(costs) > 0 else 1.0
    history: list[dict] = []

    def archive_hv() -> float:
        pts = [(i.accuracy, i.cost) for i in archive.values() if i.violation == 0 and i.cost <= hv_ref_cost]
        return hypervolume(pts, (0.0, hv_ref_cost)) if pts else 0.0

    def assign(individuals: list[Individual]) -> list[list[int]]:
        fronts = non_dominated_sort(individuals)
        for r, fr in enumerate(fronts, start=1):
            cd = crowding_distance([(individuals[i].accuracy, individuals[i].cost) for i in fr])
            for i, d in zip(fr, cd):
                individuals[i].rank = r
                individuals[i].crowding = float(d)
        return fronts

    assign(pop)
    best_hv = archive_hv()
    stale = 0
    history.append({"generation": 0, "evaluations": len(archive), "hypervolume": best_hv})

    def better(a: Individual, b: Individual) -> Individual:
        if a.rank != b.rank:
            return a if a.rank < b.rank else b
        if a.crowding != b.crowding:
            return a if a.crowding > b.crowding else b
        return a

    for gen in range(1, config.generations + 1):
        if len(archive) >= total or len(archive) >= budget:
            break
        room = int(min(config.population, budget - len(archive), total - len(archive)))
        kids: list[Genome] = []
        tries = 0
        while len(kids) < room and tries < 1000 * room:
            tries += 1
            picks = rng.integers(len(pop), size=4)
            p1 = better(pop[picks[0]], pop[picks[1]]).genome
            p2 = better(pop[picks[2]], pop[picks[3]]).genome
            a, b = np.array(p1), np.array(p2)
            if rng.random() < config.crossover_rate:
                swap = rng.random(n_pos) < 0.5
                a[swap], b[swap] = b[swap].copy(), a[swap].copy()
            for child in (a, b):
                mut = rng.random(n_pos) < pm
                if mut.any():
                    child[mut] = rng.integers(sizes[mut])
                g = fresh(tuple(int(v) for v in child), seen)
                if g is not None and len(kids) < room and admissible(g):
                    seen.add(g)
                    kids.append(g)
            if len(seen) >= total:
                break
        if not kids:
            break
        merged = pop + evaluate(kids)
        fronts = assign(merged)
        nxt: list[Individual] = []
        for fr in fronts:
            if len(nxt) + len(fr) <= config.population:
                nxt.extend(merged[i] for i in fr)
            else:
                rest = sorted(fr, key=lambda i: -merged[i].crowding)
                nxt.extend(merged[i] for i in rest[: config.population - len(nxt)])
                break
        pop = nxt
        assign(pop)
        hv = archive_hv()
        if hv > best_hv + 1e-9:
            best_hv, stale = hv, 0
        else:
            stale += 1
        record = {"generation": gen, "evaluations": len(archive), "hypervolume": hv}
        history.append(record)
        if on_generation:
            on_generation(record)
        if stale >= config.stagnation:
            break

    everything = list(archive.values())
    feasible = [i for i in everything if i.violation == 0]
    idx = pareto_filter([(i.accuracy, i.cost) for i in feasible])
    front = sorted((feasible[i] for i in idx), key=lambda i: (i.cost, -i.accuracy, i.genome))
    for ind in front:
        ind.rank = 1
    return SearchResult(front, history, len(archive), everything)


# --------------------------------------------------------------------------
# random search baseline
# --------------------------------------------------------------------------


class InfeasibleConstraint(RuntimeError):
    pass


@dataclass
class RandomSearchResult:
    accuracies: np.ndarray
    best_genome: Genome
    best_accuracy: float
    attempts: int

    @property
    def stats(self) -> dict[str, float]:
        a = self.accuracies
        q1, q2, q3 = np.percentile(a, [25, 50, 75])
        return {
            "n": float(len(a)),
            "mean": float(a.mean()),
            "std": float(a.std()),
            "q1": float(q1),
            "median": float(q2),
            "q3": float(q3),
            "best": float(self.best_accuracy),
        }


def random_search_baseline(
    space: SearchSpace,
    accuracy_fn: Callable[[Genome], float],
    cost_fn: Callable[[Genome], float],
    budget: int,
    band: tuple[float, float],
    seed: int = 0,
) -> RandomSearchResult:
    """Rejection-sample ``budget`` genomes whose cost lies in ``band``."""
    if budget < 1:
        raise ValueError("budget must be >= 1")
    lo, hi = band
    rng = np.random.default_rng(seed)
    accepted: list[Genome] = []
    attempts = 0
    limit = 1000 * budget
    while len(accepted) < budget:
        if attempts >= limit:
            raise InfeasibleConstraint(
                f"only {len(accepted)} of {budget} samples met cost in [{lo}, {hi}] after {attempts} draws"
            )
        g = tuple(int(v) for v in rng.integers(np.array(space.sizes)))
        attempts += 1
        if lo <= cost_fn(g) <= hi:
            accepted.append(g)
    acc = np.array([accuracy_fn(g) for g in accepted])
    best = int(np.argmax(acc))
    return RandomSearchResult(acc, accepted[best], float(acc[best]), attempts)


# --------------------------------------------------------------------------
# training-cost accounting
# --------------------------------------------------------------------------


@dataclass(frozen=True)
class LedgerTerm:
    label: str
    count: int
    epochs_each: float

    @property
    def epochs(self) -> float:
        return self.count * self.epochs_each

    def render(self) -> str:
        if self.count == 1:
            return f"{self.label}: {self.epochs_each:g}"
        return f"{self.label}: {self.count}x{self.epochs_each:g} = {self.epochs:g}"


def cost_ledger(reference_epochs: float, blocks: int, epochs_per_block: float, targets: int, finetune_epochs: float) -> tuple[float, list[LedgerTerm]]:
    """Epochs needed to build the accuracy predictor, term by term."""
    terms = [
        LedgerTerm("reference training", 1, reference_epochs),
        LedgerTerm("block distillation", blocks, epochs_per_block),
        LedgerTerm("architecture finetuning", targets, finetune_epochs),
    ]
    total = sum(t.epochs for t in terms)
    return (int(total) if float(total).is_integer() else total), terms


def random_search_ratio(models: int, scratch_epochs: float, finetune_epochs: float) -> float:
    """Training-epoch advantage of one predictor-building finetune over scratch-training ``models`` networks."""
    return models * scratch_epochs / finetune_epochs


def write_pareto_csv(path: str | os.PathLike, front: Sequence[Individual]) -> None:
    with open(path, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(["genome", "predicted_accuracy", "cost", "rank"])
        for ind in front:
            w.writerow([encode(ind.genome), repr(float(ind.accuracy)), repr(float(ind.cost)), ind.rank])


def synthetic_latency_table(space: SearchSpace) -> dict:
    """A made-up device model for the latency-table provider.

    Per block: MAC-proportional compute (grouped convs run 30% slower per
    MAC), a fixed launch cost per unit, and an extra cost per squeeze-excite.
    """
    macs = make_cost_model("analytic-macs", space)
    base, tables = macs._tables
    positions = {}
    for n, choices in enumerate(space.choices):
        row = {}
        for m, c in enumerate(choices):
            speed = 1.3 if c.layer_type == "grouped" else 1.0
            lat = 2e-6 * tables[n][m] * speed + 0.02 * c.depth + (0.015 * c.depth if c.attention == "se" else 0.0)
            row[space.root_index[n][m]] = round(lat, 6)
        positions[n] = row
    return {"overhead": round(0.1 + 2e-6 * base, 6), "positions": positions}
