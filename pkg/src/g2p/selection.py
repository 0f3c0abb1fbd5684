"""Two-stage SNP selection: boosted-tree RFE, then mutual-information ranking."""

from __future__ import annotations

import csv
import json
import math
from collections import Counter
from dataclasses import asdict, dataclass, field

import numpy as np

from .encode import IUPAC_ALLELES
from .errors import DataError
from .ingest import GenotypeTable, PhenotypeTable

# ---------------------------------------------------------------------------
# dosage coding
# ---------------------------------------------------------------------------


def snp_dosage(call: str, ref: str) -> int:
    """0 = homozygous reference, 1 = heterozygous carrying the reference, 2 otherwise."""
    alleles = IUPAC_ALLELES.get(call)
    if alleles is None or ref not in "ACGT" or len(ref) != 1:
        raise DataError(f"invalid call/reference pair {call!r}/{ref!r}")
    if alleles == ref:
        return 0
    if ref in alleles:
        return 1
    return 2


def dosage_matrix(table: GenotypeTable) -> np.ndarray:
    """``(hybrids, snps)`` float matrix of :func:`snp_dosage` values."""
    out = np.empty(table.shape, dtype=np.float64)
    for j, snp in enumerate(table.snps):
        lut = {c: snp_dosage(c, snp.ref) for c in IUPAC_ALLELES}
        col = table.calls[:, j]
        try:
            out[:, j] = [lut[c] for c in col]
        except KeyError as exc:
            raise DataError(f"snp {snp.id}: cannot code call {exc.args[0]!r}") from None
    return out


# ---------------------------------------------------------------------------
# gradient-boosted regression trees
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class GbdtConfig:
    n_trees: int = 100
    max_leaves: int = 31
    max_depth: int = 6
    learning_rate: float = 0.1
    min_samples_leaf: int = 20
    max_bins: int = 64


@dataclass
class Tree:
    feature: np.ndarray
    threshold: np.ndarray
    left: np.ndarray
    right: np.ndarray
    value: np.ndarray

    def predict(self, X: np.ndarray) -> np.ndarray:
        node = np.zeros(X.shape[0], dtype=np.int64)
        active = self.feature[node] >= 0
        while active.any():
            rows = np.nonzero(active)[0]
            n = node[rows]
            go_left = X[rows, self.feature[n]] <= self.threshold[n]
            node[rows] = np.where(go_left, self.left[n], self.right[n])
            active = self.feature[node] >= 0
        return self.value[node]


@dataclass
class GbdtModel:
    base: float
    learning_rate: float
    trees: list[Tree]
    split_importance: np.ndarray
    gain_importance: np.ndarray
    train_loss: list[float] = field(default_factory=list)

    def predict(self, X) -> np.ndarray:
        X = np.asarray(X, dtype=np.float64)
        out = np.full(X.shape[0], self.base)
        for t in self.trees:
            out += self.learning_rate * t.predict(X)
        return out


def _bin_features(X: np.ndarray, max_bins: int):
    """Integer codes with ``code <= b`` iff ``x <= thresholds[f][b]``."""
    n, p = X.shape
    thresholds = []
    codes = np.empty((n, p), dtype=np.int32)
    for f in range(p):
        col = X[:, f]
        uniq = np.unique(col)
        if uniq.size <= max_bins:
            t = uniq[:-1]
        else:
            t = np.unique(np.quantile(col, np.linspace(0, 1, max_bins + 1)[1:-1]))
            t = t[t < uniq[-1]]
        thresholds.append(t)
        codes[:, f] = np.searchsorted(t, col, side="left")
    return codes, thresholds


class _Hist:
    __slots__ = ("g", "c")

    def __init__(self, g, c):
        self.g = g
        self.c = c


def fit_gbdt(X, y, config: GbdtConfig = GbdtConfig()) -> GbdtModel:
    """Least-squares boosting with leaf-wise histogram trees.

    Gain importance accumulates each split's reduction of the training sum
    of squared errors, including the shrinkage factor, so the importances add
    up to the total training SSE reduction.
    """
    X = np.asarray(X, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if X.ndim != 2 or X.shape[0] != y.shape[0]:
        raise DataError(f"X shape {X.shape} incompatible with y length {y.shape[0]}")
    n, p = X.shape
    if n < 2:
        raise DataError("need at least two samples")
    if not (np.all(np.isfinite(X)) and np.all(np.isfinite(y))):
        raise DataError("X and y must be finite")
    if config.min_samples_leaf < 1 or config.max_leaves < 2:
        raise ValueError("min_samples_leaf >= 1 and max_leaves >= 2 required")

    eta = config.learning_rate
    shrink = eta * (2.0 - eta)
    base = float(y.mean())
    pred = np.full(n, base)
    split_imp = np.zeros(p, dtype=np.int64)
    gain_imp = np.zeros(p)
    losses = [float(np.mean((y - pred) ** 2))]
    trees: list[Tree] = []

    if np.ptp(y) == 0.0 or p == 0:
        return GbdtModel(base, eta, trees, split_imp, gain_imp, losses)

    codes, thresholds = _bin_features(X, config.max_bins)
    n_bins = max((len(t) + 1 for t in thresholds), default=1)
    flat = codes + (np.arange(p, dtype=np.int32) * n_bins)[None, :]
    size = p * n_bins
    msl = config.min_samples_leaf

    def histogram(idx, r):
        keys = flat[idx].ravel()
        g = np.bincount(keys, weights=np.repeat(r[idx], p), minlength=size).reshape(p, n_bins)
        c = np.bincount(keys, minlength=size).reshape(p, n_bins).astype(np.float64)
        return _Hist(g, c)

    def best_split(h: _Hist):
        G, N = h.g[0].sum(), h.c[0].sum()
        gl = np.cumsum(h.g, axis=1)[:, :-1]
        nl = np.cumsum(h.c, axis=1)[:, :-1]
        gr, nr = G - gl, N - nl
        ok = (nl >= msl) & (nr >= msl)
        with np.errstate(divide="ignore", invalid="ignore"):
            gain = gl * gl / nl + gr * gr / nr - G * G / N
        gain = np.where(ok, gain, -np.inf)
        if gain.size == 0:
            return -np.inf, -1, -1
        k = int(np.argmax(gain))
        f, b = divmod(k, gain.shape[1])
        return float(gain[f, b]), f, b

    for _ in range(config.n_trees):
        r = y - pred
        feature, threshold, left, right, value = [-1], [0.0], [-1], [-1], [0.0]
        root_idx = np.arange(n)
        root_h = histogram(root_idx, r)
        # leaf: [node_id, idx, depth, hist, (gain, f, b)]
        leaves = [[0, root_idx, 0, root_h, best_split(root_h)]]
        while len(leaves) < config.max_leaves:
            cand = [i for i, lf in enumerate(leaves) if lf[2] < config.max_depth and lf[4][0] > 0.0]
            if not cand:
                break
            i = max(cand, key=lambda j: (leaves[j][4][0], -leaves[j][0]))
            node_id, idx, depth, h, (gain, f, b) = leaves.pop(i)
            mask = codes[idx, f] <= b
            li, ri = idx[mask], idx[~mask]
            if li.size <= ri.size:
                lh = histogram(li, r)
                rh = _Hist(h.g - lh.g, h.c - lh.c)
            else:
                rh = histogram(ri, r)
                lh = _Hist(h.g - rh.g, h.c - rh.c)
            lid, rid = len(feature), len(feature) + 1
            feature[node_id] = f
            threshold[node_id] = float(thresholds[f][b])
            left[node_id], right[node_id] = lid, rid
            feature += [-1, -1]
            threshold += [0.0, 0.0]
            left += [-1, -1]
            right += [-1, -1]
            value += [0.0, 0.0]
            split_imp[f] += 1
            gain_imp[f] += shrink * gain
            leaves.insert(i, [rid, ri, depth + 1, rh, best_split(rh)])
            leaves.insert(i, [lid, li, depth + 1, lh, best_split(lh)])
        for node_id, idx, _, _, _ in leaves:
            v = float(r[idx].mean())
            value[node_id] = v
            pred[idx] += eta * v
        trees.append(Tree(np.array(feature), np.array(threshold), np.array(left),
                          np.array(right), np.array(value)))
        losses.append(float(np.mean((y - pred) ** 2)))
    return GbdtModel(base, eta, trees, split_imp, gain_imp, losses)


# ---------------------------------------------------------------------------
# recursive feature elimination
# ---------------------------------------------------------------------------


@dataclass
class RfeResult:
    selected: list[str]
    rounds: list[list[str]]
    gain: dict[str, float]
    split_count: dict[str, int]


def _rank(ids, gains):
    """Indices ordered by gain descending, ties by input order."""
    return sorted(range(len(ids)), key=lambda i: (-gains[i], i))


def rfe_select(X, y, target: int, config: GbdtConfig = GbdtConfig(), feature_ids=None,
               step: float = 0.1) -> RfeResult:
    """Drop the lowest-gain ``ceil(step * remaining)`` features per round until ``target`` remain."""
    X = np.asarray(X, dtype=np.float64)
    p = X.shape[1]
    ids = list(feature_ids) if feature_ids is not None else [str(i) for i in range(p)]
    if len(ids) != p:
        raise ValueError("feature_ids length does not match X")
    if target < 1 or target > p:
        raise DataError(f"RFE target {target} outside 1..{p}")
    remaining = list(range(p))
    rounds = []
    while True:
        rounds.append([ids[i] for i in remaining])
        model = fit_gbdt(X[:, remaining], y, config)
        order = _rank(remaining, model.gain_importance)
        if len(remaining) <= target:
            break
        n_drop = min(math.ceil(step * len(remaining)), len(remaining) - target)
        keep = sorted(order[: len(remaining) - n_drop])
        remaining = [remaining[k] for k in keep]
    selected = [ids[remaining[k]] for k in order]
    gain = {ids[remaining[k]]: float(model.gain_importance[k]) for k in range(len(remaining))}
    splits = {ids[remaining[k]]: int(model.split_importance[k]) for k in range(len(remaining))}
    return RfeResult(selected, rounds, gain, splits)


# ---------------------------------------------------------------------------
# mutual information
# ---------------------------------------------------------------------------


def quantile_bins(y, bins: int = 16) -> np.ndarray:
    """Integer bin codes for ``y``.

    When ``y`` has at most ``bins`` distinct values each value is its own bin;
    otherwise bins are delimited by empirical quantiles.
    """
    y = np.asarray(y, dtype=np.float64)
    uniq, inverse = np.unique(y, return_inverse=True)
    if uniq.size <= bins:
        return inverse.astype(np.int64)
    edges = np.unique(np.quantile(y, np.linspace(0, 1, bins + 1)[1:-1]))
    return np.searchsorted(edges, y, side="right").astype(np.int64)


def _plugin_mi(xc: np.ndarray, yc: np.ndarray, ny: int) -> float:
    n = xc.size
    _, xi = np.unique(xc, return_inverse=True)
    nx = int(xi.max()) + 1
    joint = np.bincount(xi * ny + yc, minlength=nx * ny).reshape(nx, ny) / n
    px = joint.sum(axis=1, keepdims=True)
    py = joint.sum(axis=0, keepdims=True)
    nz = joint > 0
    mi = float(np.sum(joint[nz] * np.log(joint[nz] / (px @ py)[nz])))
    return max(mi, 0.0)


def mutual_information(x, y, bins: int = 16) -> float:
    """Plug-in MI (nats) between categorical ``x`` and quantile-binned ``y``."""
    x = np.asarray(x)
    y = np.asarray(y, dtype=np.float64)
    if x.size == 0 or x.shape[0] != y.shape[0]:
        raise DataError("mutual_information needs equal-length, non-empty inputs")
    yc = quantile_bins(y, bins)
    return _plugin_mi(x, yc, int(yc.max()) + 1)


def mi_scores(X, y, bins: int = 16) -> np.ndarray:
    """:func:`mutual_information` of every column of ``X`` against ``y``."""
    X = np.asarray(X)
    y = np.asarray(y, dtype=np.float64)
    if X.shape[0] == 0:
        raise DataError("mutual_information needs non-empty inputs")
    yc = quantile_bins(y, bins)
    ny = int(yc.max()) + 1
    return np.array([_plugin_mi(X[:, j], yc, ny) for j in range(X.shape[1])])


# ---------------------------------------------------------------------------
# full selection pipeline
# ---------------------------------------------------------------------------


@dataclass
class SelectionReport:
    rounds: list[list[str]]
    rfe_selected: list[str]
    gain: dict[str, float]
    split_count: dict[str, int]
    mi: dict[str, float]
    selected: list[str]
    chromosome_counts: dict[int, int]
    snp_info: dict[str, tuple[int, int]] = field(default_factory=dict)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["chromosome_counts"] = {str(k): v for k, v in sorted(self.chromosome_counts.items())}
        d["snp_info"] = {k: list(v) for k, v in self.snp_info.items()}
        return d

    @classmethod
    def from_dict(cls, d) -> "SelectionReport":
        d = dict(d)
        d["chromosome_counts"] = {int(k): v for k, v in d["chromosome_counts"].items()}
        d["snp_info"] = {k: tuple(v) for k, v in d.get("snp_info", {}).items()}
        return cls(**d)

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=1)

    def write_tsv(self, path) -> None:
        with open(path, "w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh, delimiter="\t", lineterminator="\n")
            w.writerow(["snp_id", "chrom", "pos", "gain", "split_count", "mi"])
            for sid in self.selected:
                chrom, pos = self.snp_info.get(sid, ("", ""))
                w.writerow([sid, chrom, pos, repr(self.gain.get(sid, 0.0)),
                            self.split_count.get(sid, 0), repr(self.mi[sid])])


def observation_design(table: GenotypeTable, phenotypes: PhenotypeTable, rows=None):
    """Dosage rows aligned with phenotype observations, plus the yields."""
    rows = np.arange(len(phenotypes)) if rows is None else np.asarray(rows, dtype=int)
    dos = dosage_matrix(table)
    h = np.array([table.hybrid_index(x) for x in phenotypes.hybrid_ids[rows]], dtype=int)
    return dos[h], phenotypes.yields[rows]


def select_snps(table: GenotypeTable, phenotypes: PhenotypeTable, rfe_target: int = 1000,
                top_k: int = 100, config: GbdtConfig = GbdtConfig(), bins: int = 16,
                rows=None, step: float = 0.1) -> SelectionReport:
    """RFE down to ``rfe_target`` SNPs, then keep the ``top_k`` by mutual information.

    With fewer than ``rfe_target`` input SNPs the RFE stage keeps all of them.
    """
    p = len(table.snps)
    if p < top_k:
        raise DataError(f"need at least {top_k} SNPs for selection, got {p}")
    X, y = observation_design(table, phenotypes, rows)
    ids = [s.id for s in table.snps]
    rfe = rfe_select(X, y, min(rfe_target, p), config, ids, step)
    col = {sid: j for j, sid in enumerate(ids)}
    surv = [col[s] for s in rfe.selected]
    scores = mi_scores(X[:, surv], y, bins)
    mi = {ids[j]: float(s) for j, s in zip(surv, scores)}
    order = sorted(range(len(surv)), key=lambda k: (-scores[k], surv[k]))
    selected = [ids[surv[k]] for k in order[:top_k]]
    info = {s.id: (s.chrom, s.pos) for s in table.snps}
    counts = Counter(info[s][0] for s in selected)
    return SelectionReport(
        rounds=rfe.rounds,
        rfe_selected=rfe.selected,
        gain=rfe.gain,
        split_count=rfe.split_count,
        mi=mi,
        selected=selected,
        chromosome_counts=dict(sorted(counts.items())),
        snp_info={s: info[s] for s in rfe.selected},
    )
