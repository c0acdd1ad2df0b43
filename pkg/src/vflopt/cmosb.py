"""SecureBoost evaluation (utility loss, HE cost, label leakage) and the constrained NSGA-II search."""
from __future__ import annotations

import itertools
import json
import logging
import math
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np
from scipy.stats import rankdata

from . import moo
from .attack import instance_clustering_attack
from .data import AttackProbeSet, VerticalDataset, sample_balanced_probe, split_train_test
from .moo import Constraints, Genome, ObjectiveTriple, VariationParams
from .secureboost import BinnedData, CostModel, Hyperparameters, TreeParams, predict, train

log = logging.getLogger(__name__)

WORST_COST = 1e6
HV_MARGIN = 0.01

ES_PRESETS = {
    "FATE": Hyperparameters(n_f=5, n_l=1, d=3, r=0.8, theta_p=1.0, eta=0.3),
    "VF2Boost": Hyperparameters(n_f=20, n_l=1, d=7, r=0.8, theta_p=1.0, eta=0.1),
    "Average": Hyperparameters(n_f=10, n_l=1, d=5, r=0.8, theta_p=1.0, eta=0.3),
}

DEFAULT_GRID = {
    "n_f": (1, 4, 8, 16),
    "n_l": (1, 4, 8),
    "d": (2, 4, 6, 8),
    "r": (0.5, 0.8),
    "theta_p": (0.7, 0.9, 1.0),
    "eta": (0.05, 0.1, 0.3),
}


def prepare_experiment(
    ds: VerticalDataset, seed: int = 0, train_fraction: float = 2 / 3, probe_per_class: int = 100
) -> tuple[VerticalDataset, VerticalDataset, AttackProbeSet]:
    """Train/test split plus a class-balanced probe drawn from the training rows.

    ``probe_per_class`` is capped by the smallest training class.
    """
    train_set, test_set = split_train_test(ds, train_fraction, seed)
    per_class = min(probe_per_class, int(train_set.class_counts().min()))
    return train_set, test_set, sample_balanced_probe(train_set, max(per_class, 1), seed + 1)


@dataclass(frozen=True)
class EvalSettings:
    tree: TreeParams = TreeParams()
    cost: CostModel = CostModel()
    attack_stride: int = 1
    known_per_class: int = 1
    worst_cost: float = WORST_COST


@dataclass
class EvaluationRecord:
    hp: Hyperparameters
    eps_u: float
    eps_c: float
    eps_p: float
    eps_p_trace: list[float]
    eps_c_trace: list[float]
    seed: int
    wall_clock: float = 0.0
    solution_id: int = -1
    failed: bool = False

    @property
    def objectives(self) -> tuple[float, float, float]:
        return (self.eps_u, self.eps_c, self.eps_p)

    def triple(self) -> ObjectiveTriple:
        return ObjectiveTriple(self.objectives)

    def to_dict(self, timing: bool = False) -> dict:
        d = {
            "solution_id": self.solution_id,
            "hyperparameters": self.hp.as_dict(),
            "eps_u": self.eps_u,
            "eps_c": self.eps_c,
            "eps_p": self.eps_p,
            "eps_p_trace": self.eps_p_trace,
            "eps_c_trace": self.eps_c_trace,
            "seed": self.seed,
            "failed": self.failed,
        }
        if timing:
            d["wall_clock"] = self.wall_clock
        return d

    @classmethod
    def from_dict(cls, d: dict) -> EvaluationRecord:
        return cls(
            Hyperparameters(**d["hyperparameters"]),
            d["eps_u"], d["eps_c"], d["eps_p"],
            list(d["eps_p_trace"]), list(d["eps_c_trace"]),
            d["seed"], d.get("wall_clock", 0.0), d.get("solution_id", -1), d.get("failed", False),
        )


def auc_score(labels: np.ndarray, scores: np.ndarray) -> float:
    """Mann-Whitney AUC with midranks for ties."""
    labels = np.asarray(labels)
    pos = labels == 1
    n_pos, n_neg = int(pos.sum()), int((~pos).sum())
    if n_pos == 0 or n_neg == 0:
        raise ValueError("AUC needs both classes in the test set")
    ranks = rankdata(scores)
    return float((ranks[pos].sum() - n_pos * (n_pos + 1) / 2) / (n_pos * n_neg))


def utility_loss(model, test: VerticalDataset) -> float:
    proba = predict(model, test.active_features, test.passive_features)
    if model.num_classes == 2:
        return 1.0 - auc_score(test.labels, proba)
    return 1.0 - float(np.mean(np.argmax(proba, axis=1) == test.labels))


def sbo(
    hp: Hyperparameters,
    train_set: VerticalDataset,
    test_set: VerticalDataset,
    probe: AttackProbeSet,
    seed: int = 0,
    settings: EvalSettings = EvalSettings(),
    binned: BinnedData | None = None,
) -> EvaluationRecord:
    """Train one configuration and measure ``(eps_u, eps_c, eps_p)``.

    After every federated round the attack runs on all leaves exposed so far
    (every ``attack_stride``-th round; skipped rounds repeat the last value).
    ``eps_p`` is the maximum over attacked rounds, ``eps_c`` the sum of
    per-round costs.
    """
    start = time.perf_counter()
    model, ledger, trace = train(hp, train_set, seed, settings.tree, settings.cost, binned)
    eps_c_trace = ledger.round_costs()
    floor = 1.0 / probe.num_classes
    eps_p_trace, attacked = [], []
    last = floor
    for i in range(1, hp.n_f + 1):
        if i % settings.attack_stride == 0 or i == hp.n_f:
            report = instance_clustering_attack(trace.up_to_round(i), probe, seed, settings.known_per_class)
            last = report.epsilon_p
            attacked.append(last)
        eps_p_trace.append(last)
    return EvaluationRecord(
        hp=hp,
        eps_u=utility_loss(model, test_set),
        eps_c=float(math.fsum(eps_c_trace)),
        eps_p=max(attacked),
        eps_p_trace=eps_p_trace,
        eps_c_trace=eps_c_trace,
        seed=seed,
        wall_clock=time.perf_counter() - start,
    )


def worst_record(hp: Hyperparameters, seed: int, settings: EvalSettings, solution_id: int = -1) -> EvaluationRecord:
    return EvaluationRecord(hp, 1.0, settings.worst_cost, 1.0, [], [], seed, 0.0, solution_id, failed=True)


def solution_seed(master: int, solution_id: int) -> int:
    return int(np.random.SeedSequence([master, solution_id]).generate_state(1)[0])


@dataclass
class _Job:
    hp: Hyperparameters
    solution_id: int
    seed: int


_WORKER_STATE: dict = {}


def _init_worker(train_set, test_set, probe, settings):
    _WORKER_STATE.update(
        train=train_set, test=test_set, probe=probe, settings=settings,
        binned=BinnedData.fit(train_set, settings.tree.n_bins),
    )


def _run_job(job: _Job) -> EvaluationRecord:
    s = _WORKER_STATE
    try:
        rec = sbo(job.hp, s["train"], s["test"], s["probe"], job.seed, s["settings"], s["binned"])
        rec.solution_id = job.solution_id
        return rec
    except Exception as exc:  # evolutionary search must stay total
        log.warning("evaluation of solution %d (%s) failed: %s", job.solution_id, job.hp, exc)
        return worst_record(job.hp, job.seed, s["settings"], job.solution_id)


class Evaluator:
    """Runs batches of ``sbo`` calls, in a process pool when ``jobs > 1``.

    Results come back in submission order, so output is independent of ``jobs``.
    """

    def __init__(self, train_set, test_set, probe, settings: EvalSettings = EvalSettings(), jobs: int = 1):
        self.args = (train_set, test_set, probe, settings)
        self.jobs = max(1, int(jobs))
        self._pool = None
        self.count = 0

    def __enter__(self):
        if self.jobs > 1:
            self._pool = ProcessPoolExecutor(self.jobs, initializer=_init_worker, initargs=self.args)
        else:
            _init_worker(*self.args)
        return self

    def __exit__(self, *exc):
        if self._pool is not None:
            self._pool.shutdown()
            self._pool = None

    def evaluate(self, jobs: Sequence[_Job]) -> list[EvaluationRecord]:
        self.count += len(jobs)
        if self._pool is None:
            if not _WORKER_STATE or _WORKER_STATE.get("train") is not self.args[0]:
                _init_worker(*self.args)
            return [_run_job(j) for j in jobs]
        return list(self._pool.map(_run_job, jobs))


@dataclass
class RunConfig:
    generations: int = 40
    population: int = 20
    constraints: Constraints = Constraints()
    seed: int = 42
    variation: VariationParams = VariationParams()
    settings: EvalSettings = EvalSettings()
    inject_presets: bool = False
    jobs: int = 1
    dataset: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.generations < 1:
            raise ValueError("generations must be >= 1")
        if self.population < 2 or self.population % 2:
            raise ValueError("population must be an even number >= 2")

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class Normalizer:
    lo: np.ndarray
    hi: np.ndarray
    margin: float = HV_MARGIN

    @property
    def reference(self) -> np.ndarray:
        return np.full(len(self.lo), 1.0 + self.margin)

    def transform(self, F: np.ndarray) -> np.ndarray:
        F = np.asarray(F, dtype=float).reshape(-1, len(self.lo))
        span = self.hi - self.lo
        safe = np.where(span > 0, span, 1.0)
        return np.where(span > 0, (F - self.lo) / safe, 0.0)

    def hypervolume(self, F: np.ndarray) -> float:
        F = np.asarray(F, dtype=float).reshape(-1, len(self.lo))
        if len(F) == 0:
            return 0.0
        return moo.hypervolume(self.transform(F[moo.non_dominated(F)]), self.reference)


def normalize_objectives(groups: Sequence[np.ndarray | Sequence[EvaluationRecord]], margin: float = HV_MARGIN):
    """Min-max scale every objective over the union of ``groups``.

    Returns the scaled groups, the reference point ``(1 + margin, ...)`` and
    the fitted :class:`Normalizer`. A constant objective scales to 0.
    """
    arrays = []
    for g in groups:
        if len(g) and isinstance(g[0], EvaluationRecord):
            arrays.append(np.array([r.objectives for r in g], dtype=float))
        else:
            arrays.append(np.asarray(g, dtype=float).reshape(-1, 3))
    union = np.vstack([a for a in arrays if len(a)])
    norm = Normalizer(union.min(axis=0), union.max(axis=0), margin)
    return [norm.transform(a) for a in arrays], norm.reference, norm


def compare_hypervolumes(
    fronts: dict[str, np.ndarray], records: Sequence[np.ndarray] = (), margin: float = HV_MARGIN
) -> dict[str, float]:
    """Normalized hypervolume of each named point set on a shared scale.

    The scale is fitted on the fronts plus any extra ``records`` (for
    instance every evaluation made by the compared methods).
    """
    names = list(fronts)
    _, _, norm = normalize_objectives([fronts[n] for n in names] + list(records), margin)
    return {n: norm.hypervolume(fronts[n]) for n in names}


def feasible_points(F: np.ndarray, constraints: Constraints) -> np.ndarray:
    """Rows of raw objectives satisfying every finite bound."""
    F = np.asarray(F, dtype=float).reshape(-1, 3)
    ok = np.ones(len(F), dtype=bool)
    for j, phi in enumerate((constraints.phi_u, constraints.phi_c, constraints.phi_p)):
        if phi is not None:
            ok &= F[:, j] <= phi
    return F[ok]


@dataclass
class RunResult:
    pareto_set: list[Hyperparameters]
    front: np.ndarray  # raw objectives of the final rank-0 solutions
    penalized_front: np.ndarray
    pareto_ids: list[int]
    hv_series: list[float]
    records: list[EvaluationRecord]
    population_ids: list[int]
    ranks: list[int]


def _penalized(records: Sequence[EvaluationRecord], c: Constraints) -> np.ndarray:
    return np.array([moo.penalize(r.triple(), c).penalized for r in records], dtype=float)


def cmosb_run(
    config: RunConfig,
    train_set: VerticalDataset,
    test_set: VerticalDataset,
    probe: AttackProbeSet,
    evaluator: Evaluator | None = None,
) -> RunResult:
    """Constrained NSGA-II over the hyperparameter genome with ``sbo`` as fitness.

    Only new genomes are evaluated: a child identical to one of its parents
    keeps the parent's id and record.
    The hypervolume series tracks, after initialization and every
    generation, the raw non-dominated set of everything evaluated so far,
    normalized with the run's final min/max.
    """
    C = train_set.num_classes
    n = config.population
    own = evaluator is None
    ev = evaluator or Evaluator(train_set, test_set, probe, config.settings, config.jobs)
    if own:
        ev.__enter__()
    try:
        init_rng = np.random.default_rng([config.seed, 0, 0])
        genomes = [Genome.random(init_rng) for _ in range(n)]
        if config.inject_presets:
            for k, hp in enumerate(ES_PRESETS.values()):
                capped = Hyperparameters(min(hp.n_f, 16), max(hp.n_l, 1), min(hp.d, 8), hp.r, hp.theta_p, hp.eta)
                if k < n:
                    genomes[k] = moo.encode(capped, C)
        ids = list(range(n))
        records = ev.evaluate([_Job(moo.decode(g, C), i, solution_seed(config.seed, i)) for g, i in zip(genomes, ids)])
        all_records = list(records)
        archive_marks = [len(all_records)]
        next_id = n

        for gen in range(1, config.generations + 1):
            rng = np.random.default_rng([config.seed, gen, 1])
            F = _penalized(records, config.constraints)
            fronts = moo.non_dominated_sort(F)
            rank = moo.ranks_from_fronts(fronts, n)
            crowd = np.zeros(n)
            for f in fronts:
                crowd[f] = moo.crowding_distance(F[f])
            parents = moo.tournament(rank, crowd, rng, n)
            children: list[Genome] = []
            child_ids: list[int] = []
            child_records: list[EvaluationRecord | None] = []
            for a, b in zip(parents[0::2], parents[1::2]):
                for child in moo.vary((genomes[a], genomes[b]), rng, config.variation):
                    # an unchanged copy of a parent is the same solution, not a new one
                    same = next((p for p in (a, b) if genomes[p] == child), None)
                    children.append(child)
                    if same is None:
                        child_ids.append(next_id)
                        child_records.append(None)
                        next_id += 1
                    else:
                        child_ids.append(ids[same])
                        child_records.append(records[same])
            fresh = [k for k, r in enumerate(child_records) if r is None]
            evaluated = ev.evaluate(
                [_Job(moo.decode(children[k], C), child_ids[k], solution_seed(config.seed, child_ids[k])) for k in fresh]
            )
            for k, rec in zip(fresh, evaluated):
                child_records[k] = rec
            all_records.extend(evaluated)
            archive_marks.append(len(all_records))

            merged_g, merged_r, merged_ids = list(genomes), list(records), list(ids)
            for g, r, i in zip(children, child_records, child_ids):
                if i not in merged_ids:
                    merged_g.append(g)
                    merged_r.append(r)
                    merged_ids.append(i)
            keep = moo.select(_penalized(merged_r, config.constraints), n, merged_ids)
            genomes = [merged_g[i] for i in keep]
            records = [merged_r[i] for i in keep]
            ids = [merged_ids[i] for i in keep]
    finally:
        if own:
            ev.__exit__(None, None, None)

    F = _penalized(records, config.constraints)
    fronts = moo.non_dominated_sort(F)
    rank = moo.ranks_from_fronts(fronts, n)
    best = sorted(fronts[0].tolist(), key=lambda i: ids[i])
    raw_all = np.array([r.objectives for r in all_records], dtype=float)
    _, _, norm = normalize_objectives([raw_all])
    hv_series = [norm.hypervolume(raw_all[:mark]) for mark in archive_marks]
    return RunResult(
        pareto_set=[records[i].hp for i in best],
        front=np.array([records[i].objectives for i in best], dtype=float),
        penalized_front=F[best],
        pareto_ids=[ids[i] for i in best],
        hv_series=hv_series,
        records=all_records,
        population_ids=ids,
        ranks=rank.tolist(),
    )


def empirical_baseline(
    train_set, test_set, probe, seed: int = 0, settings: EvalSettings = EvalSettings(), evaluator=None
) -> list[EvaluationRecord]:
    """Evaluate the three empirical-selection presets (FATE, VF2Boost, Average)."""
    ev = evaluator or Evaluator(train_set, test_set, probe, settings)
    jobs = [_Job(hp, i, solution_seed(seed, i)) for i, hp in enumerate(ES_PRESETS.values())]
    with _maybe_enter(ev, evaluator is None):
        return ev.evaluate(jobs)


class _maybe_enter:
    def __init__(self, ev, enter):
        self.ev, self.enter = ev, enter

    def __enter__(self):
        if self.enter:
            self.ev.__enter__()
        return self.ev

    def __exit__(self, *exc):
        if self.enter:
            self.ev.__exit__(*exc)


def grid_points(grid: dict[str, Sequence] | None = None) -> list[Hyperparameters]:
    grid = grid or DEFAULT_GRID
    names = ("n_f", "n_l", "d", "r", "theta_p", "eta")
    return [Hyperparameters(**dict(zip(names, combo))) for combo in itertools.product(*(grid[k] for k in names))]


@dataclass
class GridResult:
    front: np.ndarray
    front_records: list[EvaluationRecord]
    records: list[EvaluationRecord]


def grid_search(
    train_set, test_set, probe, seed: int = 0, budget: int | None = None, grid: dict | None = None,
    settings: EvalSettings = EvalSettings(), evaluator=None,
) -> GridResult:
    """Evaluate grid points (a seeded random subset of size ``budget``) and keep the non-dominated ones."""
    points = grid_points(grid)
    if not points:
        raise ValueError("grid is empty")
    if budget is not None and budget < len(points):
        order = np.random.default_rng([seed, 7]).permutation(len(points))[:budget]
        points = [points[i] for i in order]
    ev = evaluator or Evaluator(train_set, test_set, probe, settings)
    with _maybe_enter(ev, evaluator is None):
        records = ev.evaluate([_Job(hp, i, solution_seed(seed, i)) for i, hp in enumerate(points)])
    F = np.array([r.objectives for r in records], dtype=float)
    keep = moo.non_dominated(F)
    return GridResult(F[keep], [records[i] for i in keep], records)


def defense_sweep(
    parameter: str, values: Sequence[float], base: Hyperparameters, train_set, test_set, probe,
    seed: int = 0, settings: EvalSettings = EvalSettings(),
) -> list[tuple[float, float, float]]:
    """``(value, eps_p, eps_u)`` rows while varying ``n_l`` or ``theta_p`` from ``base``."""
    if parameter not in ("n_l", "theta_p"):
        raise ValueError("sweep parameter must be 'n_l' or 'theta_p'")
    rows = []
    ev = Evaluator(train_set, test_set, probe, settings)
    with ev:
        for k, v in enumerate(values):
            fields = base.as_dict()
            fields[parameter] = int(v) if parameter == "n_l" else float(v)
            rec = ev.evaluate([_Job(Hyperparameters(**fields), k, seed)])[0]
            rows.append((v, rec.eps_p, rec.eps_u))
    return rows


def write_run_artifacts(out: str | Path, result: RunResult, config: RunConfig, extra_config: dict | None = None) -> None:
    """``front.csv``, ``hv_series.csv``, ``records.jsonl`` and ``config.json`` in ``out``.

    ``extra_config`` entries are written next to the ``run_config`` key.
    """
    out = Path(out)
    out.mkdir(parents=True, exist_ok=True)
    rows = []
    for hp, sid, raw, pen in zip(result.pareto_set, result.pareto_ids, result.front, result.penalized_front):
        t = ObjectiveTriple(tuple(map(float, raw)), tuple(map(float, pen)), tuple(bool(p > r) for p, r in zip(pen, raw)))
        rows.append((sid, hp, t, 0))
    moo.write_front_csv(out / "front.csv", rows)
    with (out / "hv_series.csv").open("w", encoding="utf-8") as fh:
        fh.write("generation,hv\n")
        for g, hv in enumerate(result.hv_series):
            fh.write(f"{g},{hv!r}\n")
    write_records(out / "records.jsonl", result.records)
    write_config(out / "config.json", {**(extra_config or {}), "run_config": config.to_dict()})


def write_records(path: str | Path, records: Sequence[EvaluationRecord]) -> None:
    with Path(path).open("w", encoding="utf-8") as fh:
        for r in records:
            fh.write(json.dumps(r.to_dict(), sort_keys=True) + "\n")


def write_config(path: str | Path, config: dict) -> None:
    Path(path).write_text(json.dumps(config, indent=2, sort_keys=True, default=str) + "\n", encoding="utf-8")
