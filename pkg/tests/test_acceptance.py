"""Acceptance suite: one check per criterion, each printing a PASS/FAIL line.

Run with ``pytest tests/test_acceptance.py -v`` or ``python tests/test_acceptance.py``.
All experiments use the Synthetic1 shape (2000 rows, 5 + 5 features,
binary) with noise 2.0; seeds 0..4 unless stated otherwise.
"""
from __future__ import annotations

import functools
import hashlib
import time
from pathlib import Path

import numpy as np
import pytest

from vflopt import cmosb, moo
from vflopt.attack import similarity_matrix, trace_mutual_information
from vflopt.cli import run_command
from vflopt.data import AttackProbeSet, gen_synthetic
from vflopt.moo import Constraints, ObjectiveTriple, crowding_distance, dominates, hypervolume, non_dominated_sort, penalize
from vflopt.secureboost import Hyperparameters, LeafTrace, TraceTree, train, train_centralized

NOISE = 2.0
SEEDS = range(5)
UNDEFENDED = Hyperparameters(n_f=20, n_l=0, d=7, r=0.8, theta_p=1.0, eta=0.1)


def synthetic1(seed: int):
    return gen_synthetic(2000, 5, 5, 2, noise=NOISE, seed=seed)


@functools.lru_cache(maxsize=None)
def experiment(seed: int):
    return cmosb.prepare_experiment(synthetic1(seed), seed)


def report(number: int, title: str, passed: bool, detail: str) -> str:
    line = f"[{'PASS' if passed else 'FAIL'}] #{number:<2} {title}: {detail}"
    print(line, flush=True)
    return line


@functools.lru_cache(maxsize=None)
def _sbo(hp: Hyperparameters, seed: int) -> cmosb.EvaluationRecord:
    tr, te, pr = experiment(seed)
    return cmosb.sbo(hp, tr, te, pr, seed)


def _mean(hp: Hyperparameters, attr: str) -> float:
    return float(np.mean([getattr(_sbo(hp, s), attr) for s in SEEDS]))


def criterion_1():
    eps_p = _mean(UNDEFENDED, "eps_p")
    return eps_p >= 0.70, f"mean eps_p={eps_p:.4f} (need >= 0.70), mean eps_u={_mean(UNDEFENDED, 'eps_u'):.4f}"


def criterion_2():
    local = Hyperparameters(n_f=20, n_l=10, d=7, r=0.8, theta_p=1.0, eta=0.1)
    drop = _mean(UNDEFENDED, "eps_p") - _mean(local, "eps_p")
    rise = _mean(local, "eps_u") - _mean(UNDEFENDED, "eps_u")
    ok = drop >= 0.15 and rise <= 0.05
    return ok, f"eps_p drop={drop:.4f} (need >= 0.15), eps_u rise={rise:.4f} (need <= 0.05)"


def criterion_3():
    thetas = (1.0, 0.9, 0.8, 0.7)
    means = [_mean(Hyperparameters(20, 0, 7, 0.8, t, 0.1), "eps_p") for t in thetas]
    rises = [b - a for a, b in zip(means, means[1:]) if b > a]
    ok = len(rises) == 0 or (len(rises) == 1 and rises[0] <= 0.02)
    shown = ", ".join(f"{t}:{m:.4f}" for t, m in zip(thetas, means))
    return ok, f"mean eps_p by theta_p {shown}"


def _node_key(n):
    return (n.depth, n.column, n.bin, n.threshold, n.left, n.right, n.weight)


def criterion_4():
    rng = np.random.default_rng(2024)
    mismatches = 0
    for k in range(10):
        n = int(rng.integers(50, 501))
        c = int(rng.choice([2, 3]))
        ds = gen_synthetic(n, int(rng.integers(1, 5)), int(rng.integers(1, 5)), c, noise=float(rng.uniform(0.5, 3)), seed=k)
        hp = Hyperparameters(int(rng.integers(1, 6)), 0, int(rng.integers(1, 7)), 1.0, 1.0, float(rng.uniform(0.05, 0.3)))
        model, _, _ = train(hp, ds, seed=k)
        central = train_centralized(ds.features, ds.labels, c, hp.n_f, hp.d, hp.eta, r=1.0, seed=k)
        if len(central) != len(model.federated_trees):
            mismatches += 1
            continue
        for a, b in zip(model.federated_trees, central):
            mismatches += [_node_key(x) for x in a.nodes] != [_node_key(x) for x in b.nodes]
    return mismatches == 0, f"{mismatches} mismatching trees over 10 random datasets"


def _brute_similarity(trace: LeafTrace, ids: list[int]) -> np.ndarray:
    trees = [t for t in trace.trees if t.leaves]
    S = np.zeros((len(ids), len(ids)))
    for t in trees:
        leaf_of = {}
        for j, leaf in enumerate(t.leaves):
            for i in leaf:
                leaf_of[int(i)] = j
        for a, ia in enumerate(ids):
            for b, ib in enumerate(ids):
                if ia in leaf_of and ib in leaf_of and leaf_of[ia] == leaf_of[ib]:
                    S[a, b] += 1
    return S / len(trees)


def criterion_5():
    rng = np.random.default_rng(5)
    bad = 0
    for _ in range(20):
        universe = np.arange(400)
        trees = []
        for t in range(int(rng.integers(1, 21))):
            ids = rng.permutation(universe)[: int(rng.integers(1, 400))]
            cuts = np.sort(rng.integers(0, len(ids), size=int(rng.integers(1, 12))))
            trees.append(TraceTree(t, t + 1, 0, [x for x in np.split(ids, cuts) if len(x)]))
        probe_ids = rng.choice(universe, size=int(rng.integers(2, 201)), replace=False)
        probe = AttackProbeSet(probe_ids, np.arange(len(probe_ids)) % 2, 2)
        sim = similarity_matrix(LeafTrace(trees), probe)
        bad += not np.array_equal(sim.S, _brute_similarity(LeafTrace(trees), probe_ids.tolist()))
    return bad == 0, f"{bad} of 20 random traces differ from the brute-force matrix"


def _random_front(rng, m=3):
    P = rng.random((int(rng.integers(5, 60)), m))
    return P[moo.non_dominated(P)]


def _monte_carlo_hv(P, samples, rng):
    hits = 0
    for start in range(0, samples, 100_000):
        X = rng.random((min(100_000, samples - start), P.shape[1]))
        dominated = np.zeros(len(X), dtype=bool)
        for p in P:
            dominated |= (X >= p).all(axis=1)
        hits += int(dominated.sum())
    return hits / samples


def criterion_6():
    start = time.perf_counter()
    exact2d = hypervolume(np.array([[0.25, 0.75], [0.75, 0.25]]), (1.0, 1.0))
    rng = np.random.default_rng(6)
    worst = 0.0
    for _ in range(20):
        P = _random_front(rng)
        exact = hypervolume(P, (1.0, 1.0, 1.0))
        mc = _monte_carlo_hv(P, 1_000_000, rng)
        worst = max(worst, abs(exact - mc) / exact)
    elapsed = time.perf_counter() - start
    ok = exact2d == 0.3125 and worst <= 0.01 and elapsed < 60
    return ok, f"2D={exact2d!r}, worst 3D relative gap={worst:.5f} (need <= 0.01), {elapsed:.1f}s"


def _oracle_ranks(F):
    n = len(F)
    dominators = [[j for j in range(n) if dominates(F[j], F[i])] for i in range(n)]
    memo: dict[int, int] = {}

    def rank(i):
        if i not in memo:
            memo[i] = 0 if not dominators[i] else 1 + max(rank(j) for j in dominators[i])
        return memo[i]

    return np.array([rank(i) for i in range(n)])


def criterion_7():
    rng = np.random.default_rng(7)
    sort_bad = crowd_bad = 0
    for k in range(100):
        n = int(rng.integers(2, 201))
        m = int(rng.integers(2, 4))
        F = rng.integers(0, 12, size=(n, m)).astype(float) if k % 2 else rng.random((n, m))
        fronts = non_dominated_sort(F)
        got = moo.ranks_from_fronts(fronts, n)
        sort_bad += not np.array_equal(got, _oracle_ranks(F.tolist()))
        for f in fronts:
            d = crowding_distance(F[f])
            for j in range(m):
                col = F[f, j]
                crowd_bad += not np.isinf(d[col == col.min()]).any()
                crowd_bad += not np.isinf(d[col == col.max()]).any()
    ok = sort_bad == 0 and crowd_bad == 0
    return ok, f"{sort_bad} sort mismatches, {crowd_bad} finite boundary members over 100 populations"


def criterion_8():
    t = penalize(ObjectiveTriple((0.1, 10.0, 0.7)), Constraints.uniform(phi_p=0.6, alpha=20.0))
    return t.penalized[2] == 2.7, f"penalized eps_p={t.penalized[2]!r}"


def _front_array(records):
    return np.array([r.objectives for r in records], dtype=float).reshape(-1, 3)


@functools.lru_cache(maxsize=None)
def search_runs(seed: int, constrained: bool, with_baselines: bool):
    tr, te, pr = experiment(seed)
    out = {}
    with cmosb.Evaluator(tr, te, pr) as ev:
        cons = Constraints.uniform(phi_p=0.6, alpha=20.0) if constrained else Constraints()
        cfg = cmosb.RunConfig(generations=15, population=12, seed=seed, constraints=cons)
        out["cmosb"] = cmosb.cmosb_run(cfg, tr, te, pr, evaluator=ev)
        if with_baselines:
            out["grid"] = cmosb.grid_search(tr, te, pr, seed, budget=180, evaluator=ev)
            out["es"] = cmosb.empirical_baseline(tr, te, pr, seed, evaluator=ev)
    return out


def criterion_9():
    wins_grid = beats_es = 0
    rows = []
    start = time.perf_counter()
    for seed in SEEDS:
        r = search_runs(seed, False, True)
        hv = cmosb.compare_hypervolumes(
            {"cmosb": r["cmosb"].front, "grid": r["grid"].front, "es": _front_array(r["es"])}
        )
        wins_grid += hv["cmosb"] >= hv["grid"]
        beats_es += hv["cmosb"] > hv["es"] and hv["grid"] > hv["es"]
        rows.append(f"{hv['cmosb']:.3f}/{hv['grid']:.3f}/{hv['es']:.3f}")
    ok = wins_grid >= 4 and beats_es == 5
    detail = (f"CMOSB>=GS in {wins_grid}/5 (need 4), both>ES in {beats_es}/5 (need 5); "
              f"HV cmosb/grid/es per seed {' '.join(rows)}; {time.perf_counter() - start:.0f}s")
    return ok, detail


def criterion_10():
    wins = 0
    rows = []
    bound = Constraints(phi_p=0.6)
    for seed in SEEDS:
        con = cmosb.feasible_points(search_runs(seed, True, False)["cmosb"].front, bound)
        unc = cmosb.feasible_points(search_runs(seed, False, True)["cmosb"].front, bound)
        if len(con) + len(unc) == 0:
            rows.append("none")
            continue
        hv = cmosb.compare_hypervolumes({"con": con, "unc": unc})
        wins += hv["con"] >= hv["unc"]
        rows.append(f"{hv['con']:.3f}/{hv['unc']:.3f}")
    return wins >= 3, f"constrained >= unconstrained feasible HV in {wins}/5 (need 3); per seed {' '.join(rows)}"


def constraint_effect():
    seeds = range(10)
    fu = [np.mean(search_runs(s, False, s in SEEDS)["cmosb"].front[:, 2] > 0.6) for s in seeds]
    fc = [np.mean(search_runs(s, True, False)["cmosb"].front[:, 2] > 0.6) for s in seeds]
    ok = float(np.mean(fc)) <= float(np.mean(fu))
    return ok, f"mean violating share of rank-0, constrained={np.mean(fc):.3f} vs unconstrained={np.mean(fu):.3f}"


def criterion_11():
    first, tenth = [], []
    for seed in range(10):
        tr, _, _ = experiment(seed)
        _, _, trace = train(UNDEFENDED, tr, seed)
        mi = trace_mutual_information(trace, tr.instance_ids, tr.labels)
        first.append(mi[0])
        tenth.append(mi[9])
    a, b = float(np.mean(first)), float(np.mean(tenth))
    return a > b, f"mean MI tree 1={a:.4f}, tree 10={b:.4f}"


def _digest(root: Path) -> dict[str, str]:
    return {
        str(p.relative_to(root)): hashlib.sha256(p.read_bytes()).hexdigest()
        for p in sorted(root.rglob("*"))
        if p.is_file() and p.suffix in (".csv", ".json", ".jsonl")
    }


def criterion_12(workdir: Path):
    data = workdir / "data"
    commands = [
        ["gen-data", "--samples", "600", "--active", "3", "--passive", "3", "--out", str(data)],
        ["train", "--data", str(data / "data.csv"), "--n-f", "4", "--out", str(workdir / "train")],
        ["attack", "--data", str(data / "data.csv"), "--trace", str(workdir / "train" / "trace.csv"),
         "--out", str(workdir / "attack")],
        ["optimize", "--data", str(data / "data.csv"), "--generations", "2", "--population", "6",
         "--phi-p", "0.6", "--phi-c", "100", "--alpha", "20", "--jobs", "1", "--out", str(workdir / "opt")],
        ["grid", "--data", str(data / "data.csv"), "--budget", "6", "--jobs", "1", "--out", str(workdir / "grid")],
        ["baselines", "--data", str(data / "data.csv"), "--out", str(workdir / "es")],
        ["hv", str(workdir / "opt" / "front.csv"), str(workdir / "grid" / "front.csv"),
         str(workdir / "es" / "front.csv"), "--out", str(workdir / "hv")],
        ["defense-sweep", "--data", str(data / "data.csv"), "--values", "0,4", "--n-f", "4",
         "--out", str(workdir / "sweep")],
    ]
    digests = []
    for _ in range(2):
        for argv in commands:
            if run_command(argv) != 0:
                return False, f"command failed: {' '.join(argv[:1])}"
        digests.append(_digest(workdir))
    same = digests[0] == digests[1]
    return same, f"{len(digests[0])} artifacts from {len(commands)} commands, identical on rerun: {same}"


CRITERIA = [
    (1, "attack potency", criterion_1),
    (2, "local-trees defense", criterion_2),
    (3, "purity-threshold defense", criterion_3),
    (4, "federation equivalence", criterion_4),
    (5, "similarity matrix oracle", criterion_5),
    (6, "hypervolume", criterion_6),
    (7, "NSGA-II internals", criterion_7),
    (8, "penalty arithmetic", criterion_8),
    (9, "optimizer ordering", criterion_9),
    (10, "constrained vs unconstrained", criterion_10),
    (11, "mutual-information trend", criterion_11),
]


def _check(capsys, number, title, fn, *args):
    passed, detail = fn(*args)
    with capsys.disabled():
        print()
        report(number, title, passed, detail)
    assert passed, detail


@pytest.mark.parametrize("number,title,fn", CRITERIA, ids=[f"c{n:02d}_{t.replace(' ', '_')}" for n, t, _ in CRITERIA])
def test_criterion(capsys, number, title, fn):
    _check(capsys, number, title, fn)


def test_criterion_12_cli_determinism(capsys, tmp_path):
    _check(capsys, 12, "CLI determinism", criterion_12, tmp_path)


def test_constraint_effect_invariant(capsys):
    passed, detail = constraint_effect()
    with capsys.disabled():
        print(f"\n[{'PASS' if passed else 'FAIL'}] invariant constraint effect (10 paired seeds): {detail}")
    assert passed, detail


if __name__ == "__main__":
    import tempfile

    results = []
    for number, title, fn in CRITERIA:
        passed, detail = fn()
        results.append(passed)
        report(number, title, passed, detail)
    with tempfile.TemporaryDirectory() as tmp:
        passed, detail = criterion_12(Path(tmp))
        results.append(passed)
        report(12, "CLI determinism", passed, detail)
    print(f"{sum(results)}/{len(results)} criteria passed")
