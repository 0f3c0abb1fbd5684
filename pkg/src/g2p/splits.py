"""K-means clustering and fold plans for environment and hybrid splits."""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np

from .errors import DataError
from .numcore import rng_stream

SPLIT_MODES = ("environment", "hybrid")


@dataclass
class KMeansResult:
    centroids: np.ndarray  # (k, p)
    labels: np.ndarray  # (n,)
    inertia: float
    history: list[float] = field(default_factory=list)  # objective after each assignment
    n_iter: int = 0


def _sq_dists(points: np.ndarray, centroids: np.ndarray) -> np.ndarray:
    d = (points ** 2).sum(1)[:, None] - 2.0 * points @ centroids.T + (centroids ** 2).sum(1)[None, :]
    return np.maximum(d, 0.0)


def _plus_plus(points, k, rng):
    n = len(points)
    centers = [int(rng.integers(n))]
    closest = _sq_dists(points, points[centers]).ravel()
    for _ in range(1, k):
        total = closest.sum()
        if total <= 0:
            # fewer distinct points than k: take unused indices in order
            used = set(centers)
            centers.append(next(i for i in range(n) if i not in used))
        else:
            r = rng.random() * total
            idx = int(np.searchsorted(np.cumsum(closest), r, side="right"))
            centers.append(min(idx, n - 1))
        closest = np.minimum(closest, _sq_dists(points, points[centers[-1:]]).ravel())
    return points[centers].copy()


def kmeans(points, k: int, seed: int, max_iter: int = 300) -> KMeansResult:
    """k-means++ seeding followed by Lloyd iterations.

    Stops when the assignment no longer changes or after ``max_iter``
    iterations. An empty cluster is re-seeded at the point farthest from
    its current centroid.
    """
    points = np.asarray(points, dtype=np.float64)
    if points.ndim != 2:
        raise DataError("kmeans expects an (n, p) array")
    n = points.shape[0]
    if k < 1 or n < k:
        raise DataError(f"kmeans needs at least k={k} points, got {n}")
    rng = rng_stream(seed, "kmeans")
    centroids = _plus_plus(points, k, rng)
    labels = None
    history = []
    it = 0
    for it in range(1, max_iter + 1):
        d = _sq_dists(points, centroids)
        new = d.argmin(axis=1)
        history.append(float(d[np.arange(n), new].sum()))
        if labels is not None and np.array_equal(new, labels):
            break
        labels = new
        counts = np.bincount(labels, minlength=k)
        sums = np.zeros_like(centroids)
        np.add.at(sums, labels, points)
        for c in np.flatnonzero(counts == 0):
            far = int(d[np.arange(n), labels].argmax())
            sums[c] = points[far]
            counts[c] = 1
            # move the point so its old cluster gives it up
            d[far, labels[far]] = 0.0
            labels[far] = c
        nonempty = counts > 0
        centroids[nonempty] = sums[nonempty] / counts[nonempty, None]
    d = _sq_dists(points, centroids)
    labels = d.argmin(axis=1)
    inertia = float(((points - centroids[labels]) ** 2).sum())
    return KMeansResult(centroids, labels, inertia, history, it)


@dataclass
class SplitPlan:
    """Fold groups of units; run ``r`` tests on group ``r`` and validates on ``r+1``."""

    mode: str
    groups: list[list[str]]
    unit_of: dict[str, str]  # env id or hybrid id -> unit id
    seed: int

    @property
    def n_folds(self) -> int:
        return len(self.groups)

    def run(self, r: int) -> dict[str, list[str]]:
        if not 0 <= r < self.n_folds:
            raise DataError(f"fold {r} outside 0..{self.n_folds - 1}")
        val = (r + 1) % self.n_folds
        train = [u for g, units in enumerate(self.groups) if g not in (r, val) for u in units]
        return {"train": sorted(train), "val": list(self.groups[val]), "test": list(self.groups[r])}

    def observation_key(self, env_id: str, hybrid_id: str) -> str:
        return env_id if self.mode == "environment" else hybrid_id

    def assign(self, env_ids, hybrid_ids, r: int) -> dict[str, np.ndarray]:
        """Observation row indices for the train/val/test parts of run ``r``."""
        parts = self.run(r)
        where = {}
        for name, units in parts.items():
            for u in units:
                where[u] = name
        out = {name: [] for name in parts}
        for i, (e, h) in enumerate(zip(env_ids, hybrid_ids)):
            key = self.observation_key(e, h)
            if key not in self.unit_of:
                raise DataError(f"observation {i} ({e}, {h}) has no unit in the split plan")
            out[where[self.unit_of[key]]].append(i)
        return {name: np.array(v, dtype=int) for name, v in out.items()}

    def to_dict(self) -> dict:
        return {"mode": self.mode, "groups": self.groups, "unit_of": self.unit_of, "seed": self.seed}

    @classmethod
    def from_dict(cls, d) -> "SplitPlan":
        return cls(d["mode"], [list(g) for g in d["groups"]], dict(d["unit_of"]), int(d["seed"]))

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True)


def deal_units(units, folds: int, seed: int) -> list[list[str]]:
    """Shuffle ``units`` with the seed and deal them round-robin into ``folds`` groups."""
    units = sorted(set(units))
    if len(units) < folds:
        raise DataError(f"need at least {folds} units for {folds} folds, got {len(units)}")
    perm = rng_stream(seed, "split").permutation(len(units))
    groups = [[] for _ in range(folds)]
    for i, j in enumerate(perm):
        groups[i % folds].append(units[j])
    return [sorted(g) for g in groups]


def make_split(env_ids, hybrid_ids, mode: str, seed: int, folds: int = 10, k: int = 100,
               hybrid_vectors=None) -> SplitPlan:
    """Build a fold plan over environments or over k-means clusters of hybrids.

    ``hybrid_vectors`` maps hybrid id to its genotype vector and is required
    in hybrid mode.
    """
    if mode not in SPLIT_MODES:
        raise DataError(f"unknown split mode {mode!r}; expected one of {SPLIT_MODES}")
    if folds < 3:
        raise DataError("need at least 3 folds (train, validation and test)")
    if mode == "environment":
        units = sorted(set(env_ids))
        unit_of = {e: e for e in units}
    else:
        if hybrid_vectors is None:
            raise DataError("hybrid split needs genotype vectors")
        hybrids = sorted(set(hybrid_ids))
        missing = [h for h in hybrids if h not in hybrid_vectors]
        if missing:
            raise DataError(f"no genotype vector for hybrid {missing[0]!r}")
        points = np.stack([np.asarray(hybrid_vectors[h], dtype=np.float64) for h in hybrids])
        result = kmeans(points, min(k, len(hybrids)), seed)
        width = len(str(result.centroids.shape[0] - 1))
        unit_of = {h: f"c{int(c):0{width}d}" for h, c in zip(hybrids, result.labels)}
        units = sorted(set(unit_of.values()))
    return SplitPlan(mode, deal_units(units, folds, seed), unit_of, seed)
