"""Fold preparation, training loop, metrics and 10-fold cross-validation."""

from __future__ import annotations

import csv
import json
import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

import numpy as np

from . import numcore as nc
from .encode import center_onehot, encode_table, positional_codes
from .errors import DataError, G2PError, NumericError
from .ingest import WEATHER_CHANNELS, Dataset, StandardScaler, fit_scaler, window_and_pad
from .model import Batch, ModelConfig, init_params, model_forward
from .selection import GbdtConfig, SelectionReport, select_snps
from .splits import SplitPlan, make_split

# ---------------------------------------------------------------------------
# configuration
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class TrainSchedule:
    batch_size: int = 64
    max_epochs: int = 100
    patience: int = 10
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    def validate(self) -> None:
        if self.batch_size < 1 or self.max_epochs < 1 or self.patience < 1:
            raise DataError("batch_size, max_epochs and patience must be positive")
        if self.lr <= 0:
            raise DataError("learning rate must be positive")


@dataclass(frozen=True)
class SelectionConfig:
    rfe_target: int = 1000
    top_k: int = 100
    bins: int = 16
    step: float = 0.1
    global_selection: bool = False
    gbdt: GbdtConfig = GbdtConfig()


@dataclass(frozen=True)
class CVConfig:
    model: ModelConfig = ModelConfig()
    schedule: TrainSchedule = TrainSchedule()
    selection: SelectionConfig = SelectionConfig()
    seed: int = 0

    def to_dict(self) -> dict:
        return {
            "model": self.model.to_dict(),
            "schedule": asdict(self.schedule),
            "selection": {**{k: v for k, v in asdict(self.selection).items() if k != "gbdt"},
                          "gbdt": asdict(self.selection.gbdt)},
            "seed": self.seed,
        }


# ---------------------------------------------------------------------------
# fold data preparation
# ---------------------------------------------------------------------------


@dataclass
class PreparedData:
    """Model-ready arrays; observations index into per-hybrid and per-env blocks."""

    snps: np.ndarray | None  # (hybrids, S, 4, L)
    descriptors: list
    pos_codes: np.ndarray | None
    weather: np.ndarray  # (envs, 9, 43), scaled
    soil: np.ndarray  # (envs, 19), imputed and scaled
    mgmt: np.ndarray  # (envs, 5), scaled
    hybrid_row: np.ndarray  # per observation
    env_row: np.ndarray  # per observation
    target: np.ndarray  # scaled yields
    target_scaler: StandardScaler
    scalers: FoldScalers
    env_ids: list[str]
    hybrids: list[str]

    def batch(self, rows) -> Batch:
        rows = np.asarray(rows, dtype=int)
        h, e = self.hybrid_row[rows], self.env_row[rows]
        snps = self.snps[h] if self.snps is not None else None
        return Batch(snps, self.descriptors, self.weather[e], self.soil[e], self.mgmt[e], self.pos_codes)


def canonical_order(ds: Dataset, rows) -> np.ndarray:
    """Sort observation rows by (env, hybrid, yield) so results never depend on input order."""
    rows = np.asarray(rows, dtype=int)
    ph = ds.phenotypes
    return np.array(sorted(rows.tolist(), key=lambda i: (ph.env_ids[i], ph.hybrid_ids[i], ph.yields[i])),
                    dtype=int)


def env_series(ds: Dataset, env_ids) -> np.ndarray:
    """Windowed ``(envs, 9, 43)`` weather for ``env_ids``."""
    return np.stack([window_and_pad(ds.weather[e]).values for e in env_ids])


@dataclass
class FoldScalers:
    """Everything fit on a fold's training split: scalers plus soil/management fill values."""

    weather: StandardScaler
    soil: StandardScaler
    management: StandardScaler
    target: StandardScaler
    soil_fill: np.ndarray
    management_fill: np.ndarray

    def to_dict(self) -> dict:
        return {"weather": self.weather.to_dict(), "soil": self.soil.to_dict(),
                "management": self.management.to_dict(), "yield": self.target.to_dict(),
                "soil_fill": [float(x) for x in self.soil_fill],
                "management_fill": [float(x) for x in self.management_fill]}

    @classmethod
    def from_dict(cls, d) -> "FoldScalers":
        return cls(StandardScaler.from_dict(d["weather"]), StandardScaler.from_dict(d["soil"]),
                   StandardScaler.from_dict(d["management"]), StandardScaler.from_dict(d["yield"]),
                   np.array(d["soil_fill"], dtype=np.float64),
                   np.array(d["management_fill"], dtype=np.float64))

    @property
    def fit_set_id(self) -> str:
        return self.target.fit_set_id


def fit_fold_scalers(ds: Dataset, train_rows, fit_set_id: str) -> FoldScalers:
    """Fit every scaler and imputation on the training observations only."""
    ph = ds.phenotypes
    train_rows = np.asarray(train_rows, dtype=int)
    train_envs = sorted({ph.env_ids[i] for i in train_rows})
    series = env_series(ds, train_envs)
    soil_fill = ds.soil.fill_values(train_envs)
    mgmt_fill = ds.management.fill_values(train_envs)
    return FoldScalers(
        weather=fit_scaler(series.transpose(0, 2, 1).reshape(-1, series.shape[1]), WEATHER_CHANNELS,
                           fit_set_id),
        soil=fit_scaler(ds.soil.filled(soil_fill).rows(train_envs), ds.soil.names, fit_set_id),
        management=fit_scaler(ds.management.filled(mgmt_fill).rows(train_envs), ds.management.names,
                              fit_set_id),
        target=fit_scaler(ph.yields[train_rows], ["yield"], fit_set_id),
        soil_fill=soil_fill, management_fill=mgmt_fill,
    )


def build_data(ds: Dataset, snp_ids, scalers: FoldScalers, cfg: ModelConfig) -> PreparedData:
    """Encode and scale every observation of ``ds`` with already-fit scalers."""
    ph = ds.phenotypes
    fit_id = scalers.fit_set_id
    env_ids = sorted(set(ph.env_ids))
    env_index = {e: i for i, e in enumerate(env_ids)}
    series = env_series(ds, env_ids)
    weather = scalers.weather.transform(series.transpose(0, 2, 1), fit_id).transpose(0, 2, 1).copy()
    table = ds.genotypes
    snps = codes = None
    descriptors = []
    if not cfg.no_g:
        sub = table.subset(list(snp_ids)).resolve_missing()
        snps = encode_table(sub)
        descriptors = list(sub.snps)
        codes = positional_codes(descriptors, cfg.d, cfg.position_scale)
    return PreparedData(
        snps=snps, descriptors=descriptors, pos_codes=codes, weather=weather,
        soil=scalers.soil.transform(ds.soil.filled(scalers.soil_fill).rows(env_ids), fit_id),
        mgmt=scalers.management.transform(ds.management.filled(scalers.management_fill).rows(env_ids), fit_id),
        hybrid_row=np.array([table.hybrid_index(h) for h in ph.hybrid_ids], dtype=int),
        env_row=np.array([env_index[e] for e in ph.env_ids], dtype=int),
        target=scalers.target.transform(ph.yields[:, None], fit_id)[:, 0],
        target_scaler=scalers.target,
        scalers=scalers,
        env_ids=env_ids, hybrids=list(table.hybrids),
    )


def prepare(ds: Dataset, snp_ids, train_rows, fit_set_id: str, cfg: ModelConfig) -> PreparedData:
    """Fit scalers on ``train_rows`` and build model inputs for all observations."""
    return build_data(ds, snp_ids, fit_fold_scalers(ds, train_rows, fit_set_id), cfg)


# ---------------------------------------------------------------------------
# training
# ---------------------------------------------------------------------------


@dataclass
class TrainResult:
    params: dict
    history: list[dict]
    best_epoch: int
    best_val_rmse: float


def predict(params, data: PreparedData, rows, cfg: ModelConfig, batch_size: int = 256) -> np.ndarray:
    """Predictions in original yield units."""
    rows = np.asarray(rows, dtype=int)
    out = np.empty(len(rows))
    for start in range(0, len(rows), batch_size):
        part = rows[start: start + batch_size]
        out[start: start + len(part)] = model_forward(params, data.batch(part), cfg).predictions
    return data.target_scaler.inverse_transform(out[:, None])[:, 0]


def rmse(pred, truth) -> float:
    pred, truth = np.asarray(pred, dtype=np.float64), np.asarray(truth, dtype=np.float64)
    return float(np.sqrt(np.mean((pred - truth) ** 2)))


def train(cfg: ModelConfig, data: PreparedData, train_rows, val_rows, seed: int,
          schedule: TrainSchedule = TrainSchedule(), label: str = "", params=None) -> TrainResult:
    """Adam on standardized-yield MSE with early stopping on validation RMSE.

    ``label`` names the RNG streams (e.g. the fold id) so parallel runs draw
    independent but reproducible numbers.
    """
    schedule.validate()
    train_rows = np.asarray(train_rows, dtype=int)
    val_rows = np.asarray(val_rows, dtype=int)
    if len(train_rows) == 0 or len(val_rows) == 0:
        raise DataError("training and validation sets must be non-empty")
    if params is None:
        params = init_params(cfg, nc.rng_stream(seed, f"init/{label}"))
    shuffle = nc.rng_stream(seed, f"shuffle/{label}")
    drop = nc.rng_stream(seed, f"dropout/{label}")
    state = nc.AdamState(schedule.lr, schedule.beta1, schedule.beta2, schedule.eps)
    val_truth = data.target_scaler.inverse_transform(data.target[val_rows][:, None])[:, 0]

    history = []
    best = (math.inf, -1, params)
    for epoch in range(schedule.max_epochs):
        order = train_rows[shuffle.permutation(len(train_rows))]
        losses = []
        for b, start in enumerate(range(0, len(order), schedule.batch_size)):
            rows = order[start: start + schedule.batch_size]
            try:
                res = model_forward(params, data.batch(rows), cfg, training=True, rng=drop)
                loss = nc.mse_loss(res.output, data.target[rows])
                grads = res.record.backward(loss)
            except NumericError as exc:
                raise NumericError(f"epoch {epoch} batch {b}: {exc}") from None
            value = float(loss.value)
            if not math.isfinite(value):
                raise NumericError(f"epoch {epoch} batch {b}: non-finite loss {value}")
            losses.append(value * len(rows))
            params = nc.adam_step(params, grads, state)
        val_rmse = rmse(predict(params, data, val_rows, cfg), val_truth)
        if not math.isfinite(val_rmse):
            raise NumericError(f"epoch {epoch}: non-finite validation RMSE")
        history.append({"epoch": epoch, "train_loss": sum(losses) / len(train_rows), "val_rmse": val_rmse})
        if val_rmse < best[0]:
            best = (val_rmse, epoch, params)
        elif epoch - best[1] >= schedule.patience:
            break
    return TrainResult(best[2], history, best[1], best[0])


# ---------------------------------------------------------------------------
# metrics
# ---------------------------------------------------------------------------


def pearson(pred, truth) -> float | None:
    """Sample Pearson correlation; ``None`` when either side is constant."""
    pred, truth = np.asarray(pred, dtype=np.float64), np.asarray(truth, dtype=np.float64)
    a, b = pred - pred.mean(), truth - truth.mean()
    denom = math.sqrt(float(a @ a) * float(b @ b))
    if denom == 0.0:
        return None
    return float(np.clip(float(a @ b) / denom, -1.0, 1.0))


def evaluate(pred, truth) -> dict:
    pred, truth = np.asarray(pred, dtype=np.float64), np.asarray(truth, dtype=np.float64)
    if pred.shape != truth.shape or pred.ndim != 1:
        raise DataError("predictions and truth must be 1-D arrays of equal length")
    if len(truth) < 2:
        raise DataError("need at least two observations to evaluate")
    return {"pearson": pearson(pred, truth), "rmse": rmse(pred, truth)}


# ---------------------------------------------------------------------------
# cross-validation
# ---------------------------------------------------------------------------


@dataclass
class FoldResult:
    fold: int
    pearson: float | None
    rmse: float
    val_rmse: float
    best_epoch: int
    n_train: int
    n_val: int
    n_test: int
    selected: list[str]
    fit_set_id: str
    history: list[dict] = field(default_factory=list)
    scalers: dict = field(default_factory=dict)


@dataclass
class MetricReport:
    split_mode: str
    variant: str
    seed: int
    folds: list[FoldResult]

    def _values(self, key):
        return [getattr(f, key) for f in self.folds if getattr(f, key) is not None]

    def summary(self) -> dict:
        out = {}
        for key in ("pearson", "rmse", "val_rmse"):
            vals = np.array(self._values(key), dtype=np.float64)
            out[key] = {"mean": float(vals.mean()) if vals.size else None,
                        "std": float(vals.std(ddof=1)) if vals.size > 1 else None}
        return out

    def to_dict(self) -> dict:
        return {"split_mode": self.split_mode, "variant": self.variant, "seed": self.seed,
                "n_folds": len(self.folds), "summary": self.summary(),
                "folds": [asdict(f) for f in self.folds]}

    @classmethod
    def from_dict(cls, d) -> "MetricReport":
        return cls(d["split_mode"], d["variant"], d["seed"], [FoldResult(**f) for f in d["folds"]])

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=1, sort_keys=True)

    def write_tsv(self, path) -> None:
        with open(path, "w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh, delimiter="\t", lineterminator="\n")
            w.writerow(["fold", "split_mode", "variant", "pearson", "rmse"])
            for f in self.folds:
                w.writerow([f.fold, self.split_mode, self.variant,
                            "NA" if f.pearson is None else repr(f.pearson), repr(f.rmse)])

    def write_histories(self, out_dir) -> list[Path]:
        out_dir = Path(out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)
        paths = []
        for f in self.folds:
            path = out_dir / f"history_fold{f.fold:02d}.csv"
            with open(path, "w", newline="", encoding="utf-8") as fh:
                w = csv.writer(fh, lineterminator="\n")
                w.writerow(["epoch", "train_loss", "val_rmse"])
                for h in f.history:
                    w.writerow([h["epoch"], repr(h["train_loss"]), repr(h["val_rmse"])])
            paths.append(path)
        return paths

    def write(self, out_dir, stem: str = "metrics") -> dict[str, Path]:
        out_dir = Path(out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)
        paths = {"json": out_dir / f"{stem}.json", "tsv": out_dir / f"{stem}.tsv"}
        paths["json"].write_text(self.to_json())
        self.write_tsv(paths["tsv"])
        self.write_histories(out_dir / f"{stem}_history")
        return paths


def fold_selection(ds: Dataset, rows, sel: SelectionConfig) -> tuple[list[str], SelectionReport | None]:
    """SNP ids for the model; selection is skipped when there are at most ``top_k`` SNPs."""
    table = ds.genotypes
    if len(table.snps) <= sel.top_k:
        return [s.id for s in table.snps], None
    report = select_snps(table.resolve_missing(), ds.phenotypes, sel.rfe_target, sel.top_k, sel.gbdt,
                         sel.bins, rows=rows, step=sel.step)
    return list(report.selected), report


def fold_id(plan: SplitPlan, r: int) -> str:
    return f"{plan.mode}/fold{r:02d}/train"


@dataclass
class FoldOutput:
    result: FoldResult
    params: dict
    selection: SelectionReport | None


def run_fold(ds: Dataset, plan: SplitPlan, config: CVConfig, r: int, global_snps=None) -> FoldOutput:
    parts = plan.assign(ds.phenotypes.env_ids, ds.phenotypes.hybrid_ids, r)
    parts = {k: canonical_order(ds, v) for k, v in parts.items()}
    for name, rows in parts.items():
        if len(rows) == 0:
            raise DataError(f"fold {r}: empty {name} set")
    cfg = config.model
    report = None
    if cfg.no_g:
        snp_ids = []
    elif global_snps is not None:
        snp_ids = list(global_snps)
    else:
        snp_ids, report = fold_selection(ds, parts["train"], config.selection)
    if not cfg.no_g and len(snp_ids) != cfg.n_snps:
        cfg = replace(cfg, n_snps=len(snp_ids))
    fit_id = fold_id(plan, r)
    data = prepare(ds, snp_ids, parts["train"], fit_id, cfg)
    trained = train(cfg, data, parts["train"], parts["val"], config.seed, config.schedule,
                    label=f"fold{r:02d}")
    truth = ds.phenotypes.yields[parts["test"]]
    metrics = evaluate(predict(trained.params, data, parts["test"], cfg), truth)
    result = FoldResult(
        fold=r, pearson=metrics["pearson"], rmse=metrics["rmse"], val_rmse=trained.best_val_rmse,
        best_epoch=trained.best_epoch, n_train=len(parts["train"]), n_val=len(parts["val"]),
        n_test=len(parts["test"]), selected=snp_ids, fit_set_id=fit_id, history=trained.history,
        scalers=data.scalers.to_dict(),
    )
    return FoldOutput(result, trained.params, report)


def _run_fold_safe(args):
    ds, plan, config, r, global_snps = args
    try:
        return run_fold(ds, plan, config, r, global_snps)
    except G2PError as exc:
        raise type(exc)(f"fold {r}: {exc}") from None


def cross_validate(ds: Dataset, plan: SplitPlan, config: CVConfig, n_jobs: int = 1,
                   folds=None, keep_params: bool = False):
    """Run every rotation of ``plan`` and collect a :class:`MetricReport`.

    Folds may run in separate processes; each fold draws from streams keyed
    by its id, so results are identical to a serial run. With
    ``keep_params`` the per-fold outputs (parameters, selection reports) are
    returned alongside the report.
    """
    folds = list(range(plan.n_folds)) if folds is None else sorted(folds)
    global_snps = None
    if config.selection.global_selection and not config.model.no_g:
        global_snps, _ = fold_selection(ds, canonical_order(ds, np.arange(len(ds.phenotypes))),
                                        config.selection)
    jobs = [(ds, plan, config, r, global_snps) for r in folds]
    if n_jobs > 1 and len(jobs) > 1:
        with ProcessPoolExecutor(max_workers=min(n_jobs, len(jobs))) as pool:
            outputs = list(pool.map(_run_fold_safe, jobs))
    else:
        outputs = [_run_fold_safe(j) for j in jobs]
    outputs.sort(key=lambda o: o.result.fold)
    report = MetricReport(plan.mode, config.model.variant, config.seed, [o.result for o in outputs])
    return (report, outputs) if keep_params else report


def hybrid_vectors(ds: Dataset, snp_ids=None) -> dict[str, np.ndarray]:
    """Flattened centre-column one-hot vectors used to cluster hybrids."""
    table = ds.genotypes.resolve_missing()
    if snp_ids is not None:
        table = table.subset(list(snp_ids))
    mat = center_onehot(table)
    return {h: mat[i] for i, h in enumerate(table.hybrids)}


def plan_for(ds: Dataset, mode: str, seed: int, folds: int = 10, k: int = 100, snp_ids=None) -> SplitPlan:
    vectors = hybrid_vectors(ds, snp_ids) if mode == "hybrid" else None
    return make_split(list(ds.phenotypes.env_ids), list(ds.phenotypes.hybrid_ids), mode, seed, folds, k,
                      vectors)
