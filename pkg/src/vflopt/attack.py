"""Instance clustering attack: label inference from shared leaf co-occurrence."""
from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .data import AttackProbeSet
from .secureboost import LeafTrace

EIG_TOL = 1e-10
KMEANS_MAX_ITER = 100
KMEANS_RESTARTS = 10


@dataclass
class SimilarityMatrix:
    S: np.ndarray
    n_trees: int
    probe_ids: np.ndarray


class NoSignal:
    """Returned when no federated tree exposed any leaf."""

    def __repr__(self):
        return "NO_SIGNAL"


NO_SIGNAL = NoSignal()


@dataclass
class ClusterAssignment:
    clusters: np.ndarray
    num_clusters: int


def similarity_matrix(trace: LeafTrace, probe: AttackProbeSet) -> SimilarityMatrix | NoSignal:
    """Fraction of contributing trees in which two probe instances share a leaf.

    ``n`` counts the trees with at least one recorded leaf.
    """
    trees = trace.contributing()
    if not trees:
        return NO_SIGNAL
    ids = np.asarray(probe.probe_ids)
    order = np.argsort(ids)
    sorted_ids = ids[order]
    counts = np.zeros((len(ids), len(ids)))
    for t in trees:
        leaf_of = np.full(len(ids), -1)
        for j, leaf in enumerate(t.leaves):
            pos = np.searchsorted(sorted_ids, leaf)
            pos = np.clip(pos, 0, len(ids) - 1)
            hit = sorted_ids[pos] == leaf
            leaf_of[order[pos[hit]]] = j
        present = leaf_of >= 0
        counts += (leaf_of[:, None] == leaf_of[None, :]) & present[:, None] & present[None, :]
    return SimilarityMatrix(counts / len(trees), len(trees), ids)


def _kmeans_pp(x: np.ndarray, k: int, rng: np.random.Generator) -> np.ndarray:
    n = len(x)
    centers = [x[rng.integers(n)]]
    d2 = ((x - centers[0]) ** 2).sum(axis=1)
    for _ in range(1, k):
        total = d2.sum()
        if total <= 0:
            i = rng.integers(n)
        else:
            i = rng.choice(n, p=d2 / total)
        centers.append(x[i])
        d2 = np.minimum(d2, ((x - x[i]) ** 2).sum(axis=1))
    return np.array(centers)


def kmeans(
    x: np.ndarray, k: int, seed: int = 0, n_init: int = KMEANS_RESTARTS, max_iter: int = KMEANS_MAX_ITER
) -> np.ndarray:
    """Lloyd's algorithm with k-means++ seeding; best inertia over ``n_init`` restarts."""
    ss = np.random.SeedSequence(seed)
    best_labels, best_inertia = None, np.inf
    for child in ss.spawn(n_init):
        rng = np.random.default_rng(child)
        centers = _kmeans_pp(x, k, rng)
        labels = None
        for _ in range(max_iter):
            dist = ((x[:, None, :] - centers[None, :, :]) ** 2).sum(axis=2)
            new = dist.argmin(axis=1)
            if labels is not None and np.array_equal(new, labels):
                break
            labels = new
            for c in range(k):
                members = x[labels == c]
                if len(members):
                    centers[c] = members.mean(axis=0)
        inertia = ((x - centers[labels]) ** 2).sum()
        if inertia < best_inertia - 1e-12:
            best_inertia, best_labels = inertia, labels
    return best_labels


def _canonical(labels: np.ndarray) -> np.ndarray:
    """Renumber clusters in order of first appearance."""
    _, first = np.unique(labels, return_index=True)
    mapping = np.empty(labels.max() + 1, dtype=np.int64)
    mapping[labels[np.sort(first)]] = np.arange(len(first))
    return mapping[labels]


def spectral_cluster(sim: SimilarityMatrix | np.ndarray, num_clusters: int, seed: int = 0) -> ClusterAssignment:
    """Normalized spectral clustering of a similarity matrix.

    Embeds instances with the top eigenvectors of ``D^-1/2 S D^-1/2``,
    normalizes rows to unit length and runs k-means. Instances with an
    all-zero similarity row carry no signal and go to cluster 0.
    """
    S = sim.S if isinstance(sim, SimilarityMatrix) else np.asarray(sim, dtype=float)
    if num_clusters < 2:
        raise ValueError("need at least two clusters")
    if S.ndim != 2 or S.shape[0] != S.shape[1]:
        raise ValueError("similarity matrix must be square")
    n = len(S)
    out = np.zeros(n, dtype=np.int64)
    deg = S.sum(axis=1)
    live = np.flatnonzero(deg > 0)
    if len(live) == 0:
        return ClusterAssignment(out, num_clusters)
    A = S[np.ix_(live, live)]
    inv_sqrt = 1.0 / np.sqrt(deg[live])
    M = A * inv_sqrt[:, None] * inv_sqrt[None, :]
    k = min(num_clusters, len(live))
    vals, vecs = np.linalg.eigh((M + M.T) / 2)
    emb = vecs[:, ::-1][:, :k]
    norms = np.linalg.norm(emb, axis=1, keepdims=True)
    emb = emb / np.where(norms < EIG_TOL, 1.0, norms)
    labels = kmeans(emb, k, seed) if k > 1 else np.zeros(len(live), dtype=np.int64)
    out[live] = _canonical(labels)
    return ClusterAssignment(out, num_clusters)


def choose_known(probe: AttackProbeSet, per_class: int = 1, seed: int = 0) -> np.ndarray:
    """Probe positions whose labels the attacker knows, ``per_class`` for every class."""
    rng = np.random.default_rng(seed)
    picks = []
    for c in range(probe.num_classes):
        pos = np.flatnonzero(probe.probe_labels == c)
        picks.append(np.sort(rng.choice(pos, size=min(per_class, len(pos)), replace=False)))
    return np.concatenate(picks)


def assign_labels(clusters: ClusterAssignment, known: np.ndarray, probe: AttackProbeSet) -> np.ndarray:
    """Map clusters to labels through the attacker's known instances.

    ``known`` holds probe positions with known labels. A cluster containing
    known instances takes the label of the one with the lowest instance id.
    Clusters without any known instance take the class used by the fewest
    clusters so far (lowest class id on ties), in cluster order.
    """
    cl = clusters.clusters
    ids = probe.probe_ids
    labels_of = np.full(clusters.num_clusters, -1)
    for c in range(clusters.num_clusters):
        inside = [p for p in known if cl[p] == c]
        if inside:
            first = min(inside, key=lambda p: ids[p])
            labels_of[c] = probe.probe_labels[first]
    used = np.bincount(labels_of[labels_of >= 0], minlength=probe.num_classes)
    for c in range(clusters.num_clusters):
        if labels_of[c] < 0:
            labels_of[c] = int(np.argmin(used))
            used[labels_of[c]] += 1
    return labels_of[cl]


def leakage(predicted: np.ndarray | NoSignal, probe: AttackProbeSet) -> float:
    """Attack accuracy on the probe set; ``1/C`` when there was nothing to attack."""
    if predicted is NO_SIGNAL:
        return 1.0 / probe.num_classes
    predicted = np.asarray(predicted)
    if len(predicted) != probe.size:
        raise ValueError("one inferred label per probe instance is required")
    return float(np.mean(predicted == probe.probe_labels))


@dataclass
class AttackReport:
    epsilon_p: float
    n_trees: int
    C: int
    N_pl: int
    per_class_accuracy: list[float]
    seed: int

    def to_dict(self) -> dict:
        return dict(self.__dict__)

    def save(self, path: str | Path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n", encoding="utf-8")


def instance_clustering_attack(
    trace: LeafTrace, probe: AttackProbeSet, seed: int = 0, known_per_class: int = 1
) -> AttackReport:
    """Similarity, spectral clustering and label mapping in one call."""
    C = probe.num_classes
    sim = similarity_matrix(trace, probe)
    if sim is NO_SIGNAL:
        predicted: np.ndarray | NoSignal = NO_SIGNAL
        per_class = [1.0 / C] * C
        n_trees = 0
    else:
        clusters = spectral_cluster(sim, C, seed)
        known = choose_known(probe, known_per_class, seed)
        predicted = assign_labels(clusters, known, probe)
        per_class = [float(np.mean(predicted[probe.probe_labels == c] == c)) for c in range(C)]
        n_trees = sim.n_trees
    return AttackReport(leakage(predicted, probe), n_trees, C, probe.size, per_class, seed)


def mutual_information(leaf_assignment: np.ndarray, labels: np.ndarray) -> float:
    """Plug-in mutual information (nats) between leaf ids and labels."""
    a = np.asarray(leaf_assignment)
    y = np.asarray(labels)
    if len(a) != len(y):
        raise ValueError("leaf assignment and labels must have the same length")
    if len(a) == 0:
        return 0.0
    _, ai = np.unique(a, return_inverse=True)
    _, yi = np.unique(y, return_inverse=True)
    table = np.zeros((ai.max() + 1, yi.max() + 1))
    np.add.at(table, (ai, yi), 1.0)
    p = table / table.sum()
    px = p.sum(axis=1, keepdims=True)
    py = p.sum(axis=0, keepdims=True)
    nz = p > 0
    return float(max(0.0, (p[nz] * np.log(p[nz] / (px @ py)[nz])).sum()))


def trace_mutual_information(trace: LeafTrace, ids: np.ndarray, labels: np.ndarray) -> list[float]:
    """MI between leaf membership and label for every federated tree in ``trace``.

    ``ids``/``labels`` give the true label of each training instance; only
    instances inside recorded leaves enter a tree's table.
    """
    lookup = dict(zip(np.asarray(ids).tolist(), np.asarray(labels).tolist()))
    out = []
    for t in trace.trees:
        leaf_ids = [j for j, leaf in enumerate(t.leaves) for _ in leaf]
        members = [lookup[int(i)] for leaf in t.leaves for i in leaf]
        out.append(mutual_information(np.array(leaf_ids), np.array(members)))
    return out
