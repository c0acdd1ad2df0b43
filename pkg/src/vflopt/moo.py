"""Constrained NSGA-II building blocks over the SecureBoost hyperparameter genome."""
from __future__ import annotations

import csv
import math
import warnings
from dataclasses import dataclass, field
from decimal import Decimal
from pathlib import Path
from typing import Sequence

import numpy as np

from .secureboost import Hyperparameters

N_BITS = 11  # 4 bits n_f, 4 bits n_l, 3 bits d
BIT_FIELDS = (("n_f", 0, 4), ("n_l", 4, 8), ("d", 8, 11))
REAL_NAMES = ("r", "theta_p", "eta")
REAL_BOUNDS = np.array([[0.1, 1.0], [0.1, 1.0], [0.01, 0.3]])
BINARY_THETA_RANGE = (0.7, 1.0)


@dataclass(frozen=True)
class Genome:
    bits: tuple[int, ...]
    reals: tuple[float, ...]

    def __post_init__(self):
        if len(self.bits) != N_BITS or any(b not in (0, 1) for b in self.bits):
            raise ValueError(f"binary segment must be {N_BITS} bits")
        if len(self.reals) != len(REAL_NAMES):
            raise ValueError("real segment must hold (r, theta_p, eta)")
        clamped = tuple(float(np.clip(v, lo, hi)) for v, (lo, hi) in zip(self.reals, REAL_BOUNDS))
        object.__setattr__(self, "reals", clamped)

    @classmethod
    def random(cls, rng: np.random.Generator) -> Genome:
        bits = tuple(int(b) for b in rng.integers(0, 2, N_BITS))
        reals = tuple(float(v) for v in rng.uniform(REAL_BOUNDS[:, 0], REAL_BOUNDS[:, 1]))
        return cls(bits, reals)


def _bits_to_int(bits: Sequence[int]) -> int:
    value = 0
    for b in bits:
        value = value * 2 + int(b)
    return value


def _int_to_bits(value: int, width: int) -> list[int]:
    return [(value >> (width - 1 - i)) & 1 for i in range(width)]


def decode(genome: Genome, num_classes: int | None = None) -> Hyperparameters:
    """Genome to hyperparameters; integers are ``binary value + 1`` (MSB first).

    For binary tasks (``num_classes == 2``) the purity-threshold gene is
    mapped affinely from ``[0.1, 1.0]`` onto ``[0.7, 1.0]``.
    """
    ints = {name: _bits_to_int(genome.bits[a:b]) + 1 for name, a, b in BIT_FIELDS}
    r, theta, eta = genome.reals
    if num_classes == 2:
        lo, hi = REAL_BOUNDS[1]
        t_lo, t_hi = BINARY_THETA_RANGE
        theta = t_lo + (theta - lo) * (t_hi - t_lo) / (hi - lo)
    return Hyperparameters(n_f=ints["n_f"], n_l=ints["n_l"], d=ints["d"], r=r, theta_p=float(theta), eta=eta)


def encode(hp: Hyperparameters, num_classes: int | None = None) -> Genome:
    """Inverse of :func:`decode` for hyperparameters inside the search space."""
    bits: list[int] = []
    for name, a, b in BIT_FIELDS:
        value = getattr(hp, name) - 1
        if not 0 <= value < 2 ** (b - a):
            raise ValueError(f"{name}={getattr(hp, name)} is outside the searchable range")
        bits += _int_to_bits(value, b - a)
    theta = hp.theta_p
    if num_classes == 2:
        lo, hi = REAL_BOUNDS[1]
        t_lo, t_hi = BINARY_THETA_RANGE
        theta = lo + (theta - t_lo) * (hi - lo) / (t_hi - t_lo)
    return Genome(tuple(bits), (hp.r, theta, hp.eta))


@dataclass(frozen=True)
class VariationParams:
    p_crossover_binary: float = 0.9
    p_mutation_binary: float = 0.1  # per bit
    p_crossover_real: float = 0.9
    eta_crossover: float = 2.0
    p_mutation_real: float = 0.1  # per gene
    eta_mutation: float = 20.0


def _sbx(x1: float, x2: float, eta: float, rng: np.random.Generator) -> tuple[float, float]:
    u = rng.random()
    if u <= 0.5:
        beta = (2.0 * u) ** (1.0 / (eta + 1.0))
    else:
        beta = (1.0 / (2.0 * (1.0 - u))) ** (1.0 / (eta + 1.0))
    c1 = 0.5 * ((1.0 + beta) * x1 + (1.0 - beta) * x2)
    c2 = 0.5 * ((1.0 - beta) * x1 + (1.0 + beta) * x2)
    return c1, c2


def _poly_mutation(x: float, lo: float, hi: float, eta: float, rng: np.random.Generator) -> float:
    u = rng.random()
    if u < 0.5:
        delta = (2.0 * u) ** (1.0 / (eta + 1.0)) - 1.0
    else:
        delta = 1.0 - (2.0 * (1.0 - u)) ** (1.0 / (eta + 1.0))
    return x + delta * (hi - lo)


def vary(
    parents: tuple[Genome, Genome], rng: np.random.Generator, params: VariationParams = VariationParams()
) -> tuple[Genome, Genome]:
    """Single-point crossover + bit flips on the binary segment, SBX + polynomial mutation on the reals."""
    a, b = parents
    bits1, bits2 = list(a.bits), list(b.bits)
    if rng.random() < params.p_crossover_binary:
        cut = int(rng.integers(1, N_BITS))
        bits1, bits2 = bits1[:cut] + bits2[cut:], bits2[:cut] + bits1[cut:]
    for bits in (bits1, bits2):
        flips = rng.random(N_BITS) < params.p_mutation_binary
        for i in np.flatnonzero(flips):
            bits[i] ^= 1

    reals1, reals2 = list(a.reals), list(b.reals)
    if rng.random() < params.p_crossover_real:
        for i in range(len(REAL_NAMES)):
            reals1[i], reals2[i] = _sbx(reals1[i], reals2[i], params.eta_crossover, rng)
    for reals in (reals1, reals2):
        for i, (lo, hi) in enumerate(REAL_BOUNDS):
            if rng.random() < params.p_mutation_real:
                reals[i] = _poly_mutation(reals[i], lo, hi, params.eta_mutation, rng)
    return Genome(tuple(bits1), tuple(reals1)), Genome(tuple(bits2), tuple(reals2))


@dataclass(frozen=True)
class ObjectiveTriple:
    """Raw ``(eps_u, eps_c, eps_p)`` plus their penalized counterparts."""

    raw: tuple[float, float, float]
    penalized: tuple[float, float, float] = None  # type: ignore[assignment]
    violated: tuple[bool, bool, bool] = (False, False, False)

    def __post_init__(self):
        if self.penalized is None:
            object.__setattr__(self, "penalized", tuple(self.raw))

    @property
    def values(self) -> tuple[float, float, float]:
        return self.penalized


@dataclass(frozen=True)
class Constraints:
    """Upper bounds (``None`` = unbounded) and penalty coefficients per objective."""

    phi_u: float | None = None
    phi_c: float | None = None
    phi_p: float | None = None
    alpha_u: float = 0.0
    alpha_c: float = 0.0
    alpha_p: float = 0.0
    penalize_utility: bool = False

    @classmethod
    def uniform(cls, phi_u=None, phi_c=None, phi_p=None, alpha=20.0, penalize_utility=False) -> Constraints:
        return cls(phi_u, phi_c, phi_p, alpha, alpha, alpha, penalize_utility)

    @property
    def active(self) -> bool:
        return any(
            phi is not None and alpha > 0
            for phi, alpha in ((self.phi_c, self.alpha_c), (self.phi_p, self.alpha_p))
        ) or (self.penalize_utility and self.phi_u is not None and self.alpha_u > 0)


def penalize(t: ObjectiveTriple, c: Constraints) -> ObjectiveTriple:
    """``eps + alpha * max(0, eps - phi)`` on cost and leakage (and utility if enabled)."""
    bounds = (
        (c.phi_u if c.penalize_utility else None, c.alpha_u),
        (c.phi_c, c.alpha_c),
        (c.phi_p, c.alpha_p),
    )
    out, flags = [], []
    for value, (phi, alpha) in zip(t.raw, bounds):
        if phi is None or not value > phi:
            out.append(float(value))
            flags.append(False)
            continue
        out.append(_decimal_penalty(value, phi, alpha))
        flags.append(True)
    return ObjectiveTriple(tuple(t.raw), tuple(out), tuple(flags))


def _decimal_penalty(value: float, phi: float, alpha: float) -> float:
    """``value + alpha * (value - phi)`` evaluated on the shortest decimal reprs.

    Keeps e.g. ``0.7 + 20 * (0.7 - 0.6)`` at exactly ``2.7``.
    """
    if not all(math.isfinite(v) for v in (value, phi, alpha)):
        return value + alpha * (value - phi)
    v, p, a = (Decimal(repr(float(x))) for x in (value, phi, alpha))
    return float(v + a * (v - p))


def dominates(a: Sequence[float], b: Sequence[float]) -> bool:
    a = a.values if isinstance(a, ObjectiveTriple) else a
    b = b.values if isinstance(b, ObjectiveTriple) else b
    if len(a) != len(b):
        raise ValueError("objective vectors differ in length")
    return all(x <= y for x, y in zip(a, b)) and any(x < y for x, y in zip(a, b))


def _dominance_matrix(F: np.ndarray) -> np.ndarray:
    le = (F[:, None, :] <= F[None, :, :]).all(axis=2)
    lt = (F[:, None, :] < F[None, :, :]).any(axis=2)
    return le & lt


def non_dominated_sort(F: np.ndarray) -> list[np.ndarray]:
    """Fast non-dominated sorting; returns index arrays, best front first."""
    F = np.asarray(F, dtype=float)
    if len(F) == 0:
        raise ValueError("population is empty")
    dom = _dominance_matrix(F)
    n_dominators = dom.sum(axis=0)
    fronts = []
    current = np.flatnonzero(n_dominators == 0)
    while len(current):
        fronts.append(current)
        n_dominators = n_dominators - dom[current].sum(axis=0)
        n_dominators[current] = -1
        current = np.flatnonzero(n_dominators == 0)
    return fronts


def ranks_from_fronts(fronts: list[np.ndarray], n: int) -> np.ndarray:
    rank = np.empty(n, dtype=np.int64)
    for k, f in enumerate(fronts):
        rank[f] = k
    return rank


def crowding_distance(F: np.ndarray) -> np.ndarray:
    F = np.asarray(F, dtype=float)
    n, m = F.shape
    if n == 0:
        raise ValueError("front is empty")
    dist = np.zeros(n)
    if n <= 2:
        return np.full(n, np.inf)
    for j in range(m):
        order = np.argsort(F[:, j], kind="stable")
        col = F[order, j]
        dist[order[0]] = dist[order[-1]] = np.inf
        span = col[-1] - col[0]
        if span > 0:
            dist[order[1:-1]] += (col[2:] - col[:-2]) / span
    return dist


def select(F: np.ndarray, n: int, ids: Sequence[int] | None = None) -> np.ndarray:
    """Indices of the ``n`` best members by (rank, -crowding distance, id)."""
    F = np.asarray(F, dtype=float)
    if len(F) < n:
        raise ValueError(f"cannot select {n} from {len(F)} solutions")
    ids = np.arange(len(F)) if ids is None else np.asarray(ids)
    chosen: list[int] = []
    for front in non_dominated_sort(F):
        if len(chosen) + len(front) <= n:
            chosen.extend(sorted(front.tolist(), key=lambda i: ids[i]))
            if len(chosen) == n:
                break
            continue
        crowd = crowding_distance(F[front])
        order = sorted(range(len(front)), key=lambda k: (-crowd[k], ids[front[k]]))
        chosen.extend(int(front[k]) for k in order[: n - len(chosen)])
        break
    return np.array(chosen, dtype=np.int64)


def tournament(rank: np.ndarray, crowd: np.ndarray, rng: np.random.Generator, n: int) -> np.ndarray:
    """Binary tournaments on (lower rank, larger crowding distance)."""
    picks = rng.integers(0, len(rank), size=(n, 2))
    out = []
    for a, b in picks:
        if (rank[a], -crowd[a], a) <= (rank[b], -crowd[b], b):
            out.append(a)
        else:
            out.append(b)
    return np.array(out, dtype=np.int64)


def _hv2d(points: np.ndarray, ref: np.ndarray) -> float:
    pts = points[np.lexsort((points[:, 1], points[:, 0]))]
    area, best_y = 0.0, ref[1]
    for x, y in pts:
        if y < best_y:
            area += (ref[0] - x) * (best_y - y)
            best_y = y
    return area


def _hv3d(points: np.ndarray, ref: np.ndarray) -> float:
    pts = points[np.argsort(points[:, 2], kind="stable")]
    volume = 0.0
    for i in range(len(pts)):
        top = pts[i + 1, 2] if i + 1 < len(pts) else ref[2]
        depth = top - pts[i, 2]
        if depth > 0:
            volume += _hv2d(pts[: i + 1, :2], ref[:2]) * depth
    return volume


def hypervolume(points: np.ndarray, ref: Sequence[float]) -> float:
    """Exact Lebesgue measure dominated by ``points`` up to reference point ``ref``.

    Points not weakly below ``ref`` in every coordinate are dropped with a warning.
    """
    ref = np.asarray(ref, dtype=float)
    points = np.asarray(points, dtype=float).reshape(-1, len(ref))
    if len(points) == 0:
        return 0.0
    inside = (points <= ref).all(axis=1)
    if not inside.all():
        warnings.warn(f"{int((~inside).sum())} point(s) exceed the reference point and were ignored", stacklevel=2)
        points = points[inside]
    if len(points) == 0:
        return 0.0
    m = len(ref)
    if m == 1:
        return float(ref[0] - points[:, 0].min())
    if m == 2:
        return float(_hv2d(points, ref))
    if m == 3:
        return float(_hv3d(points, ref))
    raise ValueError("exact hypervolume is implemented for up to 3 objectives")


@dataclass
class Front:
    """Mutually non-dominated members with their objective vectors."""

    members: list = field(default_factory=list)
    objectives: np.ndarray = field(default_factory=lambda: np.zeros((0, 3)))
    reference: np.ndarray | None = None

    def hypervolume(self, reference: Sequence[float] | None = None) -> float:
        ref = self.reference if reference is None else reference
        return hypervolume(self.objectives, ref)


def non_dominated(F: np.ndarray) -> np.ndarray:
    """Indices of the non-dominated rows of ``F`` (duplicates all kept)."""
    F = np.asarray(F, dtype=float)
    if len(F) == 0:
        return np.zeros(0, dtype=np.int64)
    return np.flatnonzero(~_dominance_matrix(F).any(axis=0))


FRONT_COLUMNS = (
    "solution_id", "n_f", "n_l", "d", "r", "theta_p", "eta",
    "eps_u", "eps_c", "eps_p", "penalized_u", "penalized_c", "penalized_p", "rank",
)


def write_front_csv(path: str | Path, rows: Sequence[tuple[int, Hyperparameters, ObjectiveTriple, int]]) -> None:
    with Path(path).open("w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(FRONT_COLUMNS)
        for sid, hp, t, rank in rows:
            w.writerow([sid, hp.n_f, hp.n_l, hp.d, repr(hp.r), repr(hp.theta_p), repr(hp.eta),
                        *(repr(float(v)) for v in t.raw), *(repr(float(v)) for v in t.penalized), rank])


def read_front_csv(path: str | Path) -> list[tuple[int, Hyperparameters, ObjectiveTriple, int]]:
    path = Path(path)
    rows = []
    with path.open(newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None or tuple(header) != FRONT_COLUMNS:
            raise ValueError(f"{path}:1: unexpected header")
        for lineno, row in enumerate(reader, start=2):
            try:
                sid, nf, nl, d = (int(v) for v in row[:4])
                r, theta, eta = (float(v) for v in row[4:7])
                raw = tuple(float(v) for v in row[7:10])
                pen = tuple(float(v) for v in row[10:13])
                rank = int(row[13])
                hp = Hyperparameters(nf, nl, d, r, theta, eta)
            except (ValueError, IndexError) as exc:
                raise ValueError(f"{path}:{lineno}: malformed row ({exc})") from None
            violated = tuple(p > v for p, v in zip(pen, raw))
            rows.append((sid, hp, ObjectiveTriple(raw, pen, violated), rank))
    return rows

