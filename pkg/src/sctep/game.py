"""Cooperative game over investment options: characteristic values, marginal
contributions, exact and permutation-sampled Shapley values, and screening.

Players are investment options (line reinforcements and flexibility sites).
The characteristic value of a coalition is the reduction it achieves relative
to the no-investment baseline, under one of two metrics: total load
curtailment avoided (MW, robust planning) or expected system cost reduction
(EUR/h). Both are "larger is better" and v(empty) = 0 by construction.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from threading import Lock

import numpy as np

from .network import NetworkCase, case_hash
from .runner import Journal, SolveRecord, execute, manifest_for
from .solver import SolverSettings

AVOIDED_CURTAILMENT = "avoided_curtailment"
EXPECTED_COST_REDUCTION = "expected_cost_reduction"
METRICS = (AVOIDED_CURTAILMENT, EXPECTED_COST_REDUCTION)

_METRIC_OBJECTIVE = {
    AVOIDED_CURTAILMENT: "curtailment",
    EXPECTED_COST_REDUCTION: "cost",
}


def objective_for_metric(metric: str) -> str:
    if metric not in _METRIC_OBJECTIVE:
        raise ValueError(f"unknown metric {metric!r}, expected one of {METRICS}")
    return _METRIC_OBJECTIVE[metric]


class MissingCoalitionError(KeyError):
    """A required coalition value is absent from the store."""


@dataclass(frozen=True)
class Coalition:
    """Subset of an ordered player list, encoded as a bitmask."""

    mask: int
    n_players: int

    def __post_init__(self):
        if not (0 <= self.n_players <= 64):
            raise ValueError("player count must be within 0..64")
        if self.mask >> self.n_players:
            raise ValueError(f"mask {self.mask:#x} has bits beyond {self.n_players} players")

    @classmethod
    def empty(cls, n: int) -> "Coalition":
        return cls(0, n)

    @classmethod
    def grand(cls, n: int) -> "Coalition":
        return cls((1 << n) - 1, n)

    @classmethod
    def of(cls, indices, n: int) -> "Coalition":
        mask = 0
        for i in indices:
            if not 0 <= i < n:
                raise ValueError(f"player index {i} out of range")
            mask |= 1 << i
        return cls(mask, n)

    def indices(self) -> tuple[int, ...]:
        return tuple(i for i in range(self.n_players) if self.mask >> i & 1)

    def contains(self, i: int) -> bool:
        return bool(self.mask >> i & 1)

    def add(self, i: int) -> "Coalition":
        return Coalition(self.mask | (1 << i), self.n_players)

    def size(self) -> int:
        return bin(self.mask).count("1")

    def option_ids(self, case: NetworkCase) -> frozenset[int]:
        """Option ids when the player list is the case's full option list."""
        if self.n_players != len(case.options):
            raise ValueError("coalition is not over the case's full option list")
        return frozenset(case.options[i].id for i in self.indices())


@dataclass(frozen=True)
class CharacteristicValue:
    mask: int
    metric: str
    value: float       # baseline objective minus coalition objective
    objective: float   # raw optimal objective of the coalition's solve
    status: str


class CoalitionValueStore:
    """Insert-once map from coalition mask to CharacteristicValue."""

    def __init__(self, metric: str, baseline_objective: float):
        self.metric = metric
        self.baseline_objective = baseline_objective
        self._lock = Lock()
        self._values: dict[int, CharacteristicValue] = {}

    def put_record(self, rec: SolveRecord) -> CharacteristicValue:
        cv = CharacteristicValue(
            mask=rec.mask, metric=self.metric,
            value=0.0 if rec.mask == 0 else self.baseline_objective - rec.objective,
            objective=rec.objective, status=rec.status)
        with self._lock:
            return self._values.setdefault(rec.mask, cv)

    def get(self, mask: int) -> CharacteristicValue:
        try:
            return self._values[mask]
        except KeyError:
            raise MissingCoalitionError(mask) from None

    def __contains__(self, mask: int) -> bool:
        return mask in self._values

    def __len__(self) -> int:
        return len(self._values)

    def value_map(self) -> dict[int, float]:
        return {m: cv.value for m, cv in self._values.items()}

    def is_complete(self, n_players: int) -> bool:
        return len(self._values) >= (1 << n_players) and all(
            m in self._values for m in range(1 << n_players))


# ---------------------------------------------------------------------------
# pure game mathematics (work on any mask -> value mapping)

def marginal_contribution(values, player: int, mask: int) -> float:
    """MC of `player` joining the coalition `mask`: v(S + i) - v(S)."""
    if mask >> player & 1:
        raise ValueError(f"player {player} already in coalition {mask:#x}")
    with_i = mask | (1 << player)
    try:
        return values[with_i] - values[mask]
    except KeyError as exc:
        raise MissingCoalitionError(*exc.args) from None


def shapley_exact(values, n: int) -> np.ndarray:
    """Exact Shapley values from a complete 2^n coalition-value store.

    Weighted average of marginal contributions with the classic combinatorial
    weights |S|! (n - |S| - 1)! / n!.
    """
    total = 1 << n
    for m in range(total):
        if m not in values:
            raise MissingCoalitionError(m)
    fact = [math.factorial(k) for k in range(n + 1)]
    weight = [fact[s] * fact[n - s - 1] / fact[n] for s in range(n)]
    sh = np.zeros(n)
    for mask in range(total):
        v_s = values[mask]
        s = bin(mask).count("1")
        for i in range(n):
            if not mask >> i & 1:
                sh[i] += weight[s] * (values[mask | (1 << i)] - v_s)
    return sh


@dataclass
class SampledShapley:
    estimates: np.ndarray
    standard_errors: np.ndarray
    n_permutations: int
    seed: int
    samples: list[list[tuple[int, float]]]  # per player: (prefix mask, MC)


def shapley_sampled_values(value_fn, n: int, m: int, seed: int) -> SampledShapley:
    """Permutation-sampling Shapley estimator over an arbitrary value function.

    Draws m uniform player orderings; each ordering contributes one marginal
    contribution per player (prefix walk), so estimates are unbiased averages
    of m samples. `value_fn(mask) -> float` is called for every distinct
    prefix; callers memoize it when evaluations are expensive.
    """
    if m < 1:
        raise ValueError("permutation count must be >= 1")
    rng = np.random.default_rng(seed)
    per_player: list[list[tuple[int, float]]] = [[] for _ in range(n)]
    v_empty = value_fn(0)
    for _ in range(m):
        order = rng.permutation(n)
        mask = 0
        v_prev = v_empty
        for i in order:
            mask |= 1 << int(i)
            v_cur = value_fn(mask)
            per_player[int(i)].append((mask & ~(1 << int(i)), v_cur - v_prev))
            v_prev = v_cur
    est = np.array([np.mean([mc for _, mc in p]) for p in per_player])
    if m > 1:
        se = np.array([np.std([mc for _, mc in p], ddof=1) / math.sqrt(m) for p in per_player])
    else:
        se = np.full(n, np.nan)
    return SampledShapley(est, se, m, seed, per_player)


def monotonicity_violations(values, pairs, tol=lambda vt: 1e-4 * max(1.0, abs(vt))):
    """Check v(S) <= v(T) + tol for nested pairs (S, T); returns violations."""
    out = []
    for s_mask, t_mask in pairs:
        if s_mask & ~t_mask:
            raise ValueError(f"{s_mask:#x} is not a subset of {t_mask:#x}")
        vs, vt = values[s_mask], values[t_mask]
        if vs > vt + tol(vt):
            out.append((s_mask, t_mask, vs, vt))
    return out


# ---------------------------------------------------------------------------
# solver-backed characteristic function

@dataclass
class GameResult:
    """Everything a full or sampled coalitional analysis produces."""

    case_name: str
    case_hash: str
    metric: str
    players: tuple[int, ...]            # option ids, fixed order
    labels: tuple[str, ...]
    baseline_objective: float
    values: dict[int, CharacteristicValue]
    shapley: np.ndarray
    individual: np.ndarray              # v({i})
    grand_marginal: np.ndarray          # v(N) - v(N minus i)
    estimator: dict
    settings: dict
    standard_errors: np.ndarray | None = None
    mc_samples: list[list[tuple[int, float]]] = field(default_factory=list)
    suspicious_mc: list[tuple[int, int, float]] = field(default_factory=list)

    @property
    def n_players(self) -> int:
        return len(self.players)

    def grand_value(self) -> float:
        full = (1 << self.n_players) - 1
        return self.values[full].value if full in self.values else float("nan")

    def to_dict(self) -> dict:
        return {
            "kind": "game_result",
            "case_name": self.case_name,
            "case_hash": self.case_hash,
            "metric": self.metric,
            "players": list(self.players),
            "labels": list(self.labels),
            "baseline_objective": self.baseline_objective,
            "estimator": self.estimator,
            "settings": self.settings,
            "values": {
                str(m): {"value": cv.value, "objective": cv.objective, "status": cv.status}
                for m, cv in sorted(self.values.items())
            },
            "shapley": [float(v) for v in self.shapley],
            "individual": [float(v) for v in self.individual],
            "grand_marginal": [float(v) for v in self.grand_marginal],
            "standard_errors": (None if self.standard_errors is None
                                else [float(v) for v in self.standard_errors]),
            "mc_samples": [[[int(m), float(v)] for m, v in p] for p in self.mc_samples],
            "suspicious_mc": [[int(p), int(m), float(v)] for p, m, v in self.suspicious_mc],
        }

    @classmethod
    def from_dict(cls, doc: dict) -> "GameResult":
        if doc.get("kind") != "game_result":
            raise ValueError("not a game-result document")
        values = {
            int(m): CharacteristicValue(mask=int(m), metric=doc["metric"],
                                        value=float(d["value"]), objective=float(d["objective"]),
                                        status=str(d["status"]))
            for m, d in doc["values"].items()
        }
        se = doc.get("standard_errors")
        return cls(
            case_name=doc["case_name"], case_hash=doc["case_hash"], metric=doc["metric"],
            players=tuple(int(p) for p in doc["players"]),
            labels=tuple(str(s) for s in doc["labels"]),
            baseline_objective=float(doc["baseline_objective"]),
            values=values,
            shapley=np.array(doc["shapley"], dtype=float),
            individual=np.array(doc["individual"], dtype=float),
            grand_marginal=np.array(doc["grand_marginal"], dtype=float),
            estimator=doc["estimator"], settings=doc["settings"],
            standard_errors=None if se is None else np.array(se, dtype=float),
            mc_samples=[[(int(m), float(v)) for m, v in p] for p in doc.get("mc_samples", [])],
            suspicious_mc=[(int(p), int(m), float(v)) for p, m, v in doc.get("suspicious_mc", [])],
        )


def default_players(case: NetworkCase) -> tuple[int, ...]:
    return tuple(o.id for o in case.options)


def _labels(case: NetworkCase, players) -> tuple[str, ...]:
    by_id = {o.id: o for o in case.options}
    return tuple(case.option_label(by_id[p]) for p in players)


def evaluate_coalitions(case: NetworkCase, metric: str, masks, players=None,
                        settings: SolverSettings = SolverSettings(), workers: int = 1,
                        journal: Journal | None = None
                        ) -> tuple[CoalitionValueStore, dict]:
    """Solve the baseline plus each requested coalition; returns (store, stats)."""
    players = default_players(case) if players is None else tuple(players)
    tag = objective_for_metric(metric)
    plan = sorted(set(int(m) for m in masks) | {0})
    records, stats = execute(case, tag, plan, players, settings=settings,
                             workers=workers, journal=journal)
    store = CoalitionValueStore(metric, baseline_objective=records[0].objective)
    for rec in records.values():
        store.put_record(rec)
    failed = [rec.mask for rec in records.values() if rec.status != "optimal"]
    stats = dict(stats, failed=failed)
    return store, stats


def characteristic_value(case: NetworkCase, coalition: Coalition, metric: str,
                         settings: SolverSettings = SolverSettings(),
                         store: CoalitionValueStore | None = None,
                         players=None) -> CharacteristicValue:
    """Value of one coalition; reuses `store` (and fills it) when provided."""
    players = default_players(case) if players is None else tuple(players)
    if store is not None and coalition.mask in store:
        return store.get(coalition.mask)
    fresh, _ = evaluate_coalitions(case, metric, [coalition.mask], players, settings)
    cv = fresh.get(coalition.mask)
    if store is not None:
        for mask in (0, coalition.mask):
            store.put_record(SolveRecord(mask=mask, objective=fresh.get(mask).objective,
                                         status=fresh.get(mask).status, iterations=0,
                                         wall_time=0.0))
        return store.get(coalition.mask)
    return cv


@dataclass(frozen=True)
class ScreenEntry:
    option_id: int
    label: str
    value: float
    status: str


def screen_options(case: NetworkCase, metric: str,
                   settings: SolverSettings = SolverSettings(), workers: int = 1,
                   journal: Journal | None = None) -> list[ScreenEntry]:
    """Individual value v({i}) of every option, sorted descending (ties by id)."""
    players = default_players(case)
    masks = [1 << i for i in range(len(players))]
    store, _ = evaluate_coalitions(case, metric, masks, players, settings,
                                   workers=workers, journal=journal)
    entries = [
        ScreenEntry(option_id=players[i], label=_labels(case, players)[i],
                    value=store.get(1 << i).value, status=store.get(1 << i).status)
        for i in range(len(players))
    ]
    return sorted(entries, key=lambda e: (-e.value, e.option_id))


MC_REPORT_FLOOR = 1e-4  # relative floor below which negative MCs are flagged


def _collect_exact(store: CoalitionValueStore, n: int):
    values = store.value_map()
    sh = shapley_exact(values, n)
    mc_samples: list[list[tuple[int, float]]] = [[] for _ in range(n)]
    for i in range(n):
        others = [j for j in range(n) if j != i]
        for sub in range(1 << (n - 1)):
            mask = 0
            for b, j in enumerate(others):
                if sub >> b & 1:
                    mask |= 1 << j
            mc_samples[i].append((mask, marginal_contribution(values, i, mask)))
    return values, sh, mc_samples


def _flag_suspicious(mc_samples, scale: float):
    floor = -MC_REPORT_FLOOR * max(1.0, abs(scale))
    out = []
    for i, samples in enumerate(mc_samples):
        for mask, mc in samples:
            if mc < floor:
                out.append((i, mask, mc))
    return out


def run_full_game(case: NetworkCase, metric: str,
                  settings: SolverSettings = SolverSettings(), players=None,
                  workers: int = 1, run_dir=None, player_cap: int = 20) -> GameResult:
    """Evaluate all 2^N coalitions and compute the exact Shapley decomposition."""
    players = default_players(case) if players is None else tuple(players)
    n = len(players)
    if n > player_cap:
        raise ValueError(
            f"{n} players means {1 << n} coalitions; screen options or use "
            f"sampling (cap is {player_cap})")
    journal = None
    if run_dir is not None:
        journal = Journal(run_dir, manifest_for(case, objective_for_metric(metric),
                                                players, settings), resume=True)
    masks = range(1 << n)
    store, stats = evaluate_coalitions(case, metric, masks, players, settings,
                                       workers=workers, journal=journal)
    if stats["failed"]:
        raise RuntimeError(
            f"{len(stats['failed'])} coalition solves did not reach optimality: "
            f"masks {stats['failed'][:8]}...; re-run to resume from the journal")
    values, sh, mc_samples = _collect_exact(store, n)
    grand = (1 << n) - 1
    individual = np.array([values[1 << i] for i in range(n)])
    grand_marginal = np.array([values[grand] - values[grand & ~(1 << i)] for i in range(n)])
    return GameResult(
        case_name=case.name, case_hash=case_hash(case), metric=metric,
        players=players, labels=_labels(case, players),
        baseline_objective=store.baseline_objective,
        values={m: store.get(m) for m in masks},
        shapley=sh, individual=individual, grand_marginal=grand_marginal,
        estimator={"kind": "exact"}, settings=settings.key(),
        mc_samples=mc_samples,
        suspicious_mc=_flag_suspicious(mc_samples, max(abs(v) for v in values.values())),
    )


def shapley_sampled(case: NetworkCase, metric: str, m: int, seed: int,
                    settings: SolverSettings = SolverSettings(), players=None,
                    workers: int = 1, run_dir=None,
                    store: CoalitionValueStore | None = None) -> GameResult:
    """Permutation-sampling Shapley estimate backed by coalition solves.

    Coalition values are cached across permutations (and across calls when a
    populated `store` is passed in). Deterministic for a fixed seed.
    """
    players = default_players(case) if players is None else tuple(players)
    n = len(players)
    journal = None
    if run_dir is not None:
        journal = Journal(run_dir, manifest_for(case, objective_for_metric(metric),
                                                players, settings), resume=True)
    if store is None:
        base, _ = evaluate_coalitions(case, metric, [0], players, settings,
                                      workers=workers, journal=journal)
        store = base

    def value_fn(mask: int) -> float:
        if mask not in store:
            fresh, _ = evaluate_coalitions(case, metric, [mask], players, settings,
                                           workers=workers, journal=journal)
            store.put_record(SolveRecord(mask=mask, objective=fresh.get(mask).objective,
                                         status=fresh.get(mask).status,
                                         iterations=0, wall_time=0.0))
        return store.get(mask).value

    sampled = shapley_sampled_values(value_fn, n, m, seed)
    individual = np.array([value_fn(1 << i) for i in range(n)])
    grand = (1 << n) - 1
    v_grand = value_fn(grand)
    grand_marginal = np.array([v_grand - value_fn(grand & ~(1 << i)) for i in range(n)])
    values = {mask: store.get(mask) for mask in range(1 << n) if mask in store}
    return GameResult(
        case_name=case.name, case_hash=case_hash(case), metric=metric,
        players=players, labels=_labels(case, players),
        baseline_objective=store.baseline_objective,
        values=values, shapley=sampled.estimates,
        individual=individual, grand_marginal=grand_marginal,
        estimator={"kind": "sampled", "m": m, "seed": seed},
        settings=settings.key(), standard_errors=sampled.standard_errors,
        mc_samples=sampled.samples,
        suspicious_mc=_flag_suspicious(sampled.samples,
                                       max(abs(cv.value) for cv in values.values())),
    )
