"""Two-party SecureBoost simulation with local-tree and purity-threshold defenses.

Homomorphic encryption is not performed. Gradients stay in plaintext and a
:class:`CostLedger` counts the encrypt / decrypt / add operations the real
protocol would execute. The passive party's view is collected as a
:class:`LeafTrace`.

Node visibility. A federated tree exposes the instance space of every node
on which split finding runs jointly, and of every child produced by such a
split. Before a non-terminal node is split jointly the active party checks
its purity; at ``purity >= theta_p`` the node and its whole subtree are grown
by the active party on its own features and stay hidden. Terminal checks
(depth limit, fewer than two instances, pure node) come first, so with
``theta_p = 1`` nothing is gated.
"""
from __future__ import annotations

import csv
import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Iterable

import numpy as np
from scipy.special import expit, softmax

from .data import VerticalDataset

ACTIVE = 0
PASSIVE = 1
PARTY_NAMES = {ACTIVE: "active", PASSIVE: "passive"}


@dataclass(frozen=True)
class Hyperparameters:
    """One SecureBoost configuration.

    ``n_l = 0`` (no local trees) and ``n_f`` above the search cap are accepted
    here; the search-space bounds live in :mod:`vflopt.moo`.
    """

    n_f: int
    n_l: int
    d: int
    r: float
    theta_p: float
    eta: float

    def __post_init__(self):
        if self.n_f < 1:
            raise ValueError(f"n_f must be >= 1, got {self.n_f}")
        if self.n_l < 0:
            raise ValueError(f"n_l must be >= 0, got {self.n_l}")
        if self.d < 1:
            raise ValueError(f"d must be >= 1, got {self.d}")
        if not 0.0 < self.r <= 1.0:
            raise ValueError(f"r must be in (0, 1], got {self.r}")
        if not 0.0 < self.theta_p <= 1.0:
            raise ValueError(f"theta_p must be in (0, 1], got {self.theta_p}")
        if not self.eta > 0.0:
            raise ValueError(f"eta must be > 0, got {self.eta}")

    def as_dict(self) -> dict:
        return asdict(self)


@dataclass(frozen=True)
class TreeParams:
    reg_lambda: float = 1.0
    gamma: float = 0.0
    n_bins: int = 32


@dataclass(frozen=True)
class CostModel:
    """Seconds per simulated HE operation."""

    t_enc: float = 3e-3
    t_dec: float = 1.5e-3
    t_add: float = 1e-5


@dataclass
class CostLedger:
    c_enc: int = 0
    c_dec: int = 0
    c_add: int = 0
    t_enc: float = CostModel.t_enc
    t_dec: float = CostModel.t_dec
    t_add: float = CostModel.t_add
    # counts (c_enc, c_dec, c_add) after each federated boosting round
    history: list[tuple[int, int, int]] = field(default_factory=list)

    @classmethod
    def from_model(cls, cost: CostModel) -> CostLedger:
        return cls(t_enc=cost.t_enc, t_dec=cost.t_dec, t_add=cost.t_add)

    def counts(self) -> tuple[int, int, int]:
        return (self.c_enc, self.c_dec, self.c_add)

    def cost_of(self, counts: Iterable[int]) -> float:
        c_enc, c_dec, c_add = counts
        return c_enc * self.t_enc + c_dec * self.t_dec + c_add * self.t_add

    def round_costs(self) -> list[float]:
        """Per-round cost deltas; they sum to :func:`ledger_cost` of the final counts."""
        out, prev = [], (0, 0, 0)
        for snap in self.history:
            out.append(self.cost_of(s - p for s, p in zip(snap, prev)))
            prev = snap
        return out

    def to_dict(self) -> dict:
        d = asdict(self)
        d["history"] = [list(h) for h in self.history]
        d["epsilon_c"] = ledger_cost(self)
        return d


def ledger_cost(ledger: CostLedger) -> float:
    """Simulated HE training time in seconds."""
    return ledger.cost_of(ledger.counts())


@dataclass
class GradientPair:
    """First and second order gradients; shape ``(m,)`` for binary, ``(m, C)`` otherwise."""

    g: np.ndarray
    h: np.ndarray


def compute_gradients(scores: np.ndarray, labels: np.ndarray, num_classes: int = 2) -> GradientPair:
    """Logistic (binary) or softmax (multiclass) loss gradients of raw scores."""
    scores = np.asarray(scores, dtype=float)
    labels = np.asarray(labels)
    if len(scores) != len(labels):
        raise ValueError("scores and labels must have the same length")
    if num_classes == 2:
        p = expit(scores)
        return GradientPair(p - labels, p * (1.0 - p))
    p = softmax(scores, axis=1)
    onehot = np.zeros_like(p)
    onehot[np.arange(len(labels)), labels] = 1.0
    return GradientPair(p - onehot, p * (1.0 - p))


def node_purity(labels: np.ndarray, num_classes: int | None = None) -> float:
    """Share of the node's majority class. ``labels`` are the labels of the node's instances."""
    labels = np.asarray(labels)
    if len(labels) == 0:
        raise ValueError("purity of an empty node is undefined")
    return float(np.bincount(labels, minlength=num_classes or 0).max() / len(labels))


class Binner:
    """Per-feature quantile bins fitted on training data.

    Bin ``b`` of feature ``f`` holds values in ``(edges[f][b-1], edges[f][b]]``,
    so a split at bin ``b`` sends ``x <= edges[f][b]`` left.
    """

    def __init__(self, n_bins: int = 32):
        if n_bins < 2 or n_bins > 256:
            raise ValueError("n_bins must be in [2, 256]")
        self.n_bins = n_bins
        self.edges: list[np.ndarray] = []

    def fit(self, x: np.ndarray) -> Binner:
        qs = np.arange(1, self.n_bins) / self.n_bins
        self.edges = []
        for col in np.asarray(x, dtype=float).T:
            edges = np.unique(np.quantile(col, qs, method="linear"))
            self.edges.append(edges)
        return self

    def transform(self, x: np.ndarray) -> np.ndarray:
        x = np.asarray(x, dtype=float)
        out = np.empty(x.shape, dtype=np.uint8)
        for f, edges in enumerate(self.edges):
            out[:, f] = np.searchsorted(edges, x[:, f], side="left")
        return out

    def threshold(self, feature: int, bin_index: int) -> float:
        return float(self.edges[feature][bin_index])


@dataclass
class SplitDecision:
    party: int
    feature: int  # index within the owning party's columns
    bin: int
    threshold: float
    left: np.ndarray  # row indices going left
    right: np.ndarray
    gain: float


def _best_split(
    bins: np.ndarray,
    g: np.ndarray,
    h: np.ndarray,
    n_bins: int,
    params: TreeParams,
) -> tuple[float, int, int] | None:
    """Highest regularized gain over all (feature, bin) candidates.

    ``bins`` is the node's ``(n, F)`` binned block. Ties go to the lower
    feature, then the lower bin. Returns ``None`` without a positive gain.
    """
    n, n_feat = bins.shape
    if n < 2 or n_feat == 0:
        return None
    flat = (bins.astype(np.int64) + np.arange(n_feat) * n_bins).ravel()
    size = n_feat * n_bins
    hist_g = np.bincount(flat, weights=np.repeat(g, n_feat), minlength=size).reshape(n_feat, n_bins)
    hist_h = np.bincount(flat, weights=np.repeat(h, n_feat), minlength=size).reshape(n_feat, n_bins)
    hist_n = np.bincount(flat, minlength=size).reshape(n_feat, n_bins)
    g_left = np.cumsum(hist_g, axis=1)[:, :-1]
    h_left = np.cumsum(hist_h, axis=1)[:, :-1]
    n_left = np.cumsum(hist_n, axis=1)[:, :-1]
    g_tot, h_tot = g.sum(), h.sum()
    lam = params.reg_lambda
    gain = 0.5 * (
        g_left**2 / (h_left + lam)
        + (g_tot - g_left) ** 2 / (h_tot - h_left + lam)
        - g_tot**2 / (h_tot + lam)
    ) - params.gamma
    gain[(n_left == 0) | (n_left == n)] = -np.inf
    best = int(np.argmax(gain))
    f, b = divmod(best, n_bins - 1)
    if not gain[f, b] > 0.0:
        return None
    return float(gain[f, b]), f, b


def _charge_split(ledger: CostLedger | None, n_instances: int, n_passive: int, n_bins: int) -> None:
    if ledger is None or n_passive == 0:
        return
    ledger.c_add += 2 * n_instances * n_passive
    ledger.c_dec += 2 * n_bins * n_passive


@dataclass
class BinnedData:
    """Training features binned per party; concatenated as ``[active | passive]``."""

    binner: Binner
    bins: np.ndarray
    num_active: int
    num_passive: int

    @classmethod
    def fit(cls, ds: VerticalDataset, n_bins: int = 32) -> BinnedData:
        x = ds.features
        binner = Binner(n_bins).fit(x)
        return cls(binner, binner.transform(x), ds.num_active, ds.num_passive)

    def locate(self, column: int) -> tuple[int, int]:
        if column < self.num_active:
            return ACTIVE, column
        return PASSIVE, column - self.num_active


def split_finding(
    rows: np.ndarray,
    grads: GradientPair,
    binned: BinnedData,
    ledger: CostLedger | None = None,
    params: TreeParams = TreeParams(),
    active_only: bool = False,
) -> SplitDecision | None:
    """Jointly find the best split of a node (``None`` when no split has positive gain).

    The passive party's histograms are charged to ``ledger`` unless
    ``active_only``. ``grads`` must be one-dimensional (a single tree's
    gradients, indexed by training row).
    """
    rows = np.asarray(rows)
    n_cols = binned.num_active if active_only else binned.num_active + binned.num_passive
    if not active_only:
        _charge_split(ledger, len(rows), binned.num_passive, binned.binner.n_bins)
    best = _best_split(binned.bins[rows, :n_cols], grads.g[rows], grads.h[rows], binned.binner.n_bins, params)
    if best is None:
        return None
    gain, col, b = best
    go_left = binned.bins[rows, col] <= b
    party, feat = binned.locate(col)
    return SplitDecision(party, feat, b, binned.binner.threshold(col, b), rows[go_left], rows[~go_left], gain)


@dataclass
class Node:
    depth: int
    weight: float = 0.0
    column: int = -1  # index into the concatenated [active | passive] features
    party: int = -1
    bin: int = -1
    threshold: float = math.nan
    left: int = -1
    right: int = -1
    local: bool = False  # grown by the active party without the passive party

    @property
    def is_leaf(self) -> bool:
        return self.left < 0


@dataclass
class Tree:
    nodes: list[Node]
    kind: str  # "local" | "federated" | "centralized"
    class_index: int = 0

    def apply(self, x: np.ndarray) -> np.ndarray:
        """Leaf node index reached by every row of the concatenated matrix ``x``."""
        left = np.array([n.left for n in self.nodes])
        right = np.array([n.right for n in self.nodes])
        cols = np.maximum(np.array([n.column for n in self.nodes]), 0)
        thr = np.array([n.threshold for n in self.nodes])
        idx = np.zeros(len(x), dtype=np.int64)
        rows = np.arange(len(x))
        while True:
            inner = left[idx] >= 0
            if not inner.any():
                return idx
            val = x[rows, cols[idx]]
            nxt = np.where(val <= thr[idx], left[idx], right[idx])
            idx = np.where(inner, nxt, idx)

    def predict(self, x: np.ndarray) -> np.ndarray:
        weights = np.array([n.weight for n in self.nodes])
        return weights[self.apply(x)]

    def max_depth(self) -> int:
        return max(n.depth for n in self.nodes)

    def to_dict(self, active_names=None, passive_names=None) -> dict:
        def encode(i: int) -> dict:
            n = self.nodes[i]
            if n.is_leaf:
                return {"leaf": n.weight, "local": n.local}
            return {
                "party": PARTY_NAMES[n.party],
                "column": n.column,
                "bin": n.bin,
                "threshold": n.threshold,
                "local": n.local,
                "left": encode(n.left),
                "right": encode(n.right),
            }

        return {"kind": self.kind, "class_index": self.class_index, "root": encode(0)}

    @classmethod
    def from_dict(cls, d: dict) -> Tree:
        nodes: list[Node] = []
        parties = {v: k for k, v in PARTY_NAMES.items()}

        def decode(obj: dict, depth: int) -> int:
            i = len(nodes)
            nodes.append(Node(depth=depth, local=obj.get("local", False)))
            if "leaf" in obj:
                nodes[i].weight = float(obj["leaf"])
                return i
            nodes[i].party = parties[obj["party"]]
            nodes[i].column = int(obj["column"])
            nodes[i].bin = int(obj["bin"])
            nodes[i].threshold = float(obj["threshold"])
            nodes[i].left = decode(obj["left"], depth + 1)
            nodes[i].right = decode(obj["right"], depth + 1)
            return i

        decode(d["root"], 0)
        return cls(nodes, d["kind"], d.get("class_index", 0))


@dataclass
class TraceTree:
    """Leaves of one federated tree whose instance sets the passive party saw."""

    tree_index: int
    round: int
    class_index: int
    leaves: list[np.ndarray]


@dataclass
class LeafTrace:
    trees: list[TraceTree] = field(default_factory=list)

    def up_to_round(self, round_index: int) -> LeafTrace:
        return LeafTrace([t for t in self.trees if t.round <= round_index])

    def contributing(self) -> list[TraceTree]:
        return [t for t in self.trees if t.leaves]

    def instance_ids(self) -> set[int]:
        return {int(i) for t in self.trees for leaf in t.leaves for i in leaf}

    def to_csv(self, path: str | Path) -> None:
        with Path(path).open("w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["tree_id", "leaf_id", "instance_id"])
            for t in self.trees:
                for j, leaf in enumerate(t.leaves):
                    for iid in leaf:
                        w.writerow([t.tree_index, j, int(iid)])

    @classmethod
    def from_csv(cls, path: str | Path) -> LeafTrace:
        """Read :meth:`to_csv` output; round numbers are taken as ``tree_id + 1``."""
        path = Path(path)
        groups: dict[int, dict[int, list[int]]] = {}
        with path.open(newline="", encoding="utf-8") as fh:
            reader = csv.reader(fh)
            header = next(reader, None)
            if header != ["tree_id", "leaf_id", "instance_id"]:
                raise ValueError(f"{path}:1: expected header tree_id,leaf_id,instance_id")
            for lineno, row in enumerate(reader, start=2):
                try:
                    t, j, i = (int(v) for v in row)
                except ValueError:
                    raise ValueError(f"{path}:{lineno}: malformed row {row!r}") from None
                groups.setdefault(t, {}).setdefault(j, []).append(i)
        trees = [
            TraceTree(t, t + 1, 0, [np.array(groups[t][j], dtype=np.int64) for j in sorted(groups[t])])
            for t in sorted(groups)
        ]
        return cls(trees)


@dataclass
class BoostModel:
    local_trees: list[Tree]
    federated_trees: list[Tree]
    base_score: float
    learning_rate: float
    num_classes: int
    num_active: int
    num_passive: int

    @property
    def task(self) -> str:
        return "binary" if self.num_classes == 2 else "multiclass"

    def raw_scores(self, x: np.ndarray) -> np.ndarray:
        n = len(x)
        if self.num_classes == 2:
            out = np.full(n, self.base_score)
        else:
            out = np.full((n, self.num_classes), self.base_score)
        for tree in [*self.local_trees, *self.federated_trees]:
            contrib = self.learning_rate * tree.predict(x)
            if self.num_classes == 2:
                out += contrib
            else:
                out[:, tree.class_index] += contrib
        return out

    def to_dict(self) -> dict:
        return {
            "task": self.task,
            "num_classes": self.num_classes,
            "base_score": self.base_score,
            "learning_rate": self.learning_rate,
            "num_active": self.num_active,
            "num_passive": self.num_passive,
            "local_trees": [t.to_dict() for t in self.local_trees],
            "federated_trees": [t.to_dict() for t in self.federated_trees],
        }

    @classmethod
    def from_dict(cls, d: dict) -> BoostModel:
        return cls(
            [Tree.from_dict(t) for t in d["local_trees"]],
            [Tree.from_dict(t) for t in d["federated_trees"]],
            float(d["base_score"]),
            float(d["learning_rate"]),
            int(d["num_classes"]),
            int(d["num_active"]),
            int(d["num_passive"]),
        )

    def save(self, path: str | Path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=1) + "\n", encoding="utf-8")


def predict(model: BoostModel, active_features: np.ndarray, passive_features: np.ndarray) -> np.ndarray:
    """Positive-class probability (binary) or class-probability matrix (multiclass)."""
    active_features = np.asarray(active_features, dtype=float)
    passive_features = np.asarray(passive_features, dtype=float)
    if active_features.ndim != 2 or active_features.shape[1] != model.num_active:
        raise ValueError(f"expected {model.num_active} active features, got shape {active_features.shape}")
    if passive_features.ndim != 2 or passive_features.shape[1] != model.num_passive:
        raise ValueError(f"expected {model.num_passive} passive features, got shape {passive_features.shape}")
    if len(active_features) != len(passive_features):
        raise ValueError("active and passive feature blocks have different row counts")
    scores = model.raw_scores(np.hstack([active_features, passive_features]))
    return expit(scores) if model.num_classes == 2 else softmax(scores, axis=1)


def predict_labels(model: BoostModel, ds: VerticalDataset) -> np.ndarray:
    proba = predict(model, ds.active_features, ds.passive_features)
    return (proba > 0.5).astype(np.int64) if model.num_classes == 2 else np.argmax(proba, axis=1)


class _Grower:
    """Grows one tree on a subsample, applying the purity gate in federated mode."""

    def __init__(self, binned, labels, num_classes, max_depth, params, theta_p=None, ledger=None):
        self.binned = binned
        self.labels = labels
        self.num_classes = num_classes
        self.max_depth = max_depth
        self.params = params
        self.theta_p = theta_p
        self.ledger = ledger
        self.n_bins = binned.binner.n_bins

    def grow(self, rows: np.ndarray, g: np.ndarray, h: np.ndarray, federated: bool, kind: str, class_index=0):
        nodes: list[Node] = []
        revealed: list[np.ndarray] = []
        n_active = self.binned.num_active
        n_all = n_active + self.binned.num_passive
        # (node index, rows, local region, instance set already shown to the passive party)
        stack = [(0, rows, not federated, False)]
        nodes.append(Node(depth=0, local=not federated))
        while stack:
            i, idx, local, shown = stack.pop()
            node = nodes[i]
            labels = self.labels[idx]
            purity = node_purity(labels, self.num_classes)
            best = None
            if node.depth < self.max_depth and len(idx) >= 2 and purity < 1.0:
                if not local and purity >= self.theta_p:
                    local = True
                    node.local = True
                n_cols = n_active if local else n_all
                if not local:
                    shown = True
                    _charge_split(self.ledger, len(idx), self.binned.num_passive, self.n_bins)
                best = _best_split(self.binned.bins[idx, :n_cols], g[idx], h[idx], self.n_bins, self.params)
            if best is None:
                node.weight = float(-g[idx].sum() / (h[idx].sum() + self.params.reg_lambda))
                if shown and not local:
                    revealed.append(idx)
                continue
            _, col, b = best
            go_left = self.binned.bins[idx, col] <= b
            node.column = col
            node.party = self.binned.locate(col)[0]
            node.bin = b
            node.threshold = self.binned.binner.threshold(col, b)
            node.left = len(nodes)
            nodes.append(Node(depth=node.depth + 1, local=local))
            node.right = len(nodes)
            nodes.append(Node(depth=node.depth + 1, local=local))
            # right pushed first so the left subtree is grown first
            stack.append((node.right, idx[~go_left], local, not local))
            stack.append((node.left, idx[go_left], local, not local))
        return Tree(nodes, kind, class_index), revealed


def _subsample(rng: np.random.Generator, m: int, r: float) -> np.ndarray:
    k = math.ceil(r * m)
    if k >= m:
        return np.arange(m)
    return np.sort(rng.choice(m, size=k, replace=False))


def _tree_grads(grads: GradientPair, k: int, multiclass: bool) -> tuple[np.ndarray, np.ndarray]:
    if multiclass:
        return grads.g[:, k], grads.h[:, k]
    return grads.g, grads.h


def train(
    hp: Hyperparameters,
    train: VerticalDataset,
    seed: int = 0,
    params: TreeParams = TreeParams(),
    cost: CostModel = CostModel(),
    binned: BinnedData | None = None,
) -> tuple[BoostModel, CostLedger, LeafTrace]:
    """Local stage (``n_l`` rounds) followed by the federated stage (``n_f`` rounds).

    Multiclass tasks grow one tree per class per round. ``ledger.history``
    holds the cumulative counts after each federated round and trace trees
    carry their federated round number (1-based).
    """
    if len(train) == 0:
        raise ValueError("training set is empty")
    binned = binned or BinnedData.fit(train, params.n_bins)
    rng = np.random.default_rng(seed)
    m = len(train)
    num_classes = train.num_classes
    multiclass = num_classes > 2
    labels = train.labels
    x = train.features
    scores = np.zeros((m, num_classes)) if multiclass else np.zeros(m)
    ledger = CostLedger.from_model(cost)
    trace = LeafTrace()
    local_trees: list[Tree] = []
    fed_trees: list[Tree] = []
    grower = _Grower(binned, labels, num_classes, hp.d, params, hp.theta_p, ledger)
    per_round = num_classes if multiclass else 1

    for rnd in range(hp.n_l + hp.n_f):
        federated = rnd >= hp.n_l
        rows = _subsample(rng, m, hp.r)
        grads = compute_gradients(scores, labels, num_classes)
        for k in range(per_round):
            g, h = _tree_grads(grads, k, multiclass)
            if federated:
                ledger.c_enc += 2 * len(rows)
                tree, revealed = grower.grow(rows, g, h, True, "federated", k)
                trace.trees.append(
                    TraceTree(len(fed_trees), rnd - hp.n_l + 1, k, [train.instance_ids[r] for r in revealed])
                )
                fed_trees.append(tree)
            else:
                tree, _ = grower.grow(rows, g, h, False, "local", k)
                local_trees.append(tree)
            contrib = hp.eta * tree.predict(x)
            if multiclass:
                scores[:, k] += contrib
            else:
                scores += contrib
        if federated:
            ledger.history.append(ledger.counts())

    model = BoostModel(local_trees, fed_trees, 0.0, hp.eta, num_classes, train.num_active, train.num_passive)
    return model, ledger, trace


def train_centralized(
    x: np.ndarray,
    labels: np.ndarray,
    num_classes: int,
    n_rounds: int,
    max_depth: int,
    eta: float,
    r: float = 1.0,
    seed: int = 0,
    params: TreeParams = TreeParams(),
) -> list[Tree]:
    """Single-owner boosting on one feature matrix; no gate, no trace, no ledger."""
    x = np.asarray(x, dtype=float)
    labels = np.asarray(labels)
    binner = Binner(params.n_bins).fit(x)
    bins = binner.transform(x)
    rng = np.random.default_rng(seed)
    m = len(x)
    multiclass = num_classes > 2
    scores = np.zeros((m, num_classes)) if multiclass else np.zeros(m)
    trees: list[Tree] = []

    def grow(rows, g, h, k) -> Tree:
        nodes = [Node(depth=0)]
        stack = [(0, rows)]
        while stack:
            i, idx = stack.pop()
            node = nodes[i]
            best = None
            if node.depth < max_depth and len(idx) >= 2 and node_purity(labels[idx], num_classes) < 1.0:
                best = _best_split(bins[idx], g[idx], h[idx], params.n_bins, params)
            if best is None:
                node.weight = float(-g[idx].sum() / (h[idx].sum() + params.reg_lambda))
                continue
            _, col, b = best
            go_left = bins[idx, col] <= b
            node.column, node.bin, node.threshold = col, b, binner.threshold(col, b)
            node.left, node.right = len(nodes), len(nodes) + 1
            nodes.extend([Node(depth=node.depth + 1), Node(depth=node.depth + 1)])
            stack.append((node.right, idx[~go_left]))
            stack.append((node.left, idx[go_left]))
        return Tree(nodes, "centralized", k)

    for _ in range(n_rounds):
        rows = _subsample(rng, m, r)
        grads = compute_gradients(scores, labels, num_classes)
        for k in range(num_classes if multiclass else 1):
            g, h = _tree_grads(grads, k, multiclass)
            tree = grow(rows, g, h, k)
            trees.append(tree)
            if multiclass:
                scores[:, k] += eta * tree.predict(x)
            else:
                scores += eta * tree.predict(x)
    return trees
