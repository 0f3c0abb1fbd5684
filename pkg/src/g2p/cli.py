"""Command-line entry point.

Settings are resolved in three layers: built-in defaults, then the config
file given with ``--config`` (YAML or JSON), then explicit command-line
flags. A flag always wins over the file.
"""

from __future__ import annotations

import hashlib
import json
import platform
import sys
from dataclasses import asdict, dataclass, field, fields, replace
from importlib.metadata import version as dist_version
from pathlib import Path

import click
import numpy as np
import yaml

from . import __version__
from .errors import ConfigError, DataError, G2PError
from .ingest import TABLE_FILES, WEATHER_CHANNELS, load_dataset, table_paths, window_and_pad
from .model import (
    VARIANTS, Batch, ModelConfig, check_params, load_checkpoint, model_forward, save_checkpoint,
    write_attention_csv, write_attention_svg,
)
from .selection import GbdtConfig, select_snps
from .splits import SPLIT_MODES, SplitPlan
from .synth import SynthConfig, generate, write as write_synth
from .traineval import (
    CVConfig, FoldResult, FoldScalers, MetricReport, SelectionConfig, TrainSchedule, build_data, canonical_order,
    cross_validate, evaluate, fold_id, plan_for, predict,
)

MANIFEST_SCHEMA = "g2p-manifest/1"

# ---------------------------------------------------------------------------
# run configuration
# ---------------------------------------------------------------------------


@dataclass
class RunConfig:
    data: dict = field(default_factory=dict)  # directory under "dir" and/or per-table paths
    seed: int | None = None
    split: dict = field(default_factory=lambda: {"mode": "environment", "folds": 10, "k": 100})
    variant: str = "full"
    model: dict = field(default_factory=dict)
    selection: dict = field(default_factory=dict)
    schedule: dict = field(default_factory=dict)
    output: str = "out"
    n_jobs: int = 1
    synth: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        return asdict(self)

    def hash(self) -> str:
        return hashlib.sha256(json.dumps(self.to_dict(), sort_keys=True).encode()).hexdigest()[:16]

    # typed views -------------------------------------------------------
    def table_paths(self) -> dict[str, Path]:
        paths = table_paths(self.data["dir"]) if self.data.get("dir") else {}
        for name in TABLE_FILES:
            if self.data.get(name):
                paths[name] = Path(self.data[name])
        return paths

    def model_config(self) -> ModelConfig:
        return _build(ModelConfig, self.model, "model").with_variant(self.variant)

    def schedule_config(self) -> TrainSchedule:
        return _build(TrainSchedule, self.schedule, "schedule")

    def selection_config(self) -> SelectionConfig:
        sel = dict(self.selection)
        gbdt = _build(GbdtConfig, sel.pop("gbdt", {}) or {}, "selection.gbdt")
        return replace(_build(SelectionConfig, sel, "selection"), gbdt=gbdt)

    def cv_config(self) -> CVConfig:
        return CVConfig(self.model_config(), self.schedule_config(), self.selection_config(), self.seed)


_SECTIONS = {f.name for f in fields(RunConfig)}
_DATA_KEYS = {"dir", *TABLE_FILES}
_SPLIT_KEYS = {"mode", "folds", "k"}


def _build(cls, values: dict, where: str):
    if not isinstance(values, dict):
        raise ConfigError(f"config.{where}: expected a mapping")
    known = {f.name for f in fields(cls)}
    for key in values:
        if key not in known:
            raise ConfigError(f"config.{where}.{key}: unknown field")
    try:
        return cls(**values)
    except ConfigError as exc:
        raise ConfigError(f"config.{where}: {exc}") from None
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"config.{where}: {exc}") from None


def _check_type(value, kind, path):
    if not isinstance(value, kind) or (kind is int and isinstance(value, bool)):
        raise ConfigError(f"config.{path}: expected {kind.__name__}, got {type(value).__name__}")


def parse_run_config(doc: dict) -> RunConfig:
    """Validate a raw config document; errors name the offending field path."""
    if doc is None:
        doc = {}
    if not isinstance(doc, dict):
        raise ConfigError("config: top level must be a mapping")
    for key in doc:
        if key not in _SECTIONS:
            raise ConfigError(f"config.{key}: unknown field")
    cfg = RunConfig()
    for key, value in doc.items():
        setattr(cfg, key, value)
    for section in ("data", "split", "model", "selection", "schedule", "synth"):
        _check_type(getattr(cfg, section), dict, section)
    for key in cfg.data:
        if key not in _DATA_KEYS:
            raise ConfigError(f"config.data.{key}: unknown field")
    split = {"mode": "environment", "folds": 10, "k": 100}
    for key, value in cfg.split.items():
        if key not in _SPLIT_KEYS:
            raise ConfigError(f"config.split.{key}: unknown field")
        split[key] = value
    cfg.split = split
    if split["mode"] not in SPLIT_MODES:
        raise ConfigError(f"config.split.mode: must be one of {SPLIT_MODES}")
    for key in ("folds", "k"):
        _check_type(split[key], int, f"split.{key}")
    if cfg.seed is not None:
        _check_type(cfg.seed, int, "seed")
    _check_type(cfg.n_jobs, int, "n_jobs")
    _check_type(cfg.output, str, "output")
    if cfg.variant not in VARIANTS:
        raise ConfigError(f"config.variant: must be one of {VARIANTS}")
    # build the typed views once so schema errors surface immediately
    cfg.model_config()
    cfg.schedule_config()
    cfg.selection_config()
    return cfg


def load_config_file(path) -> dict:
    path = Path(path)
    try:
        text = path.read_text()
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from None
    try:
        doc = json.loads(text) if path.suffix == ".json" else yaml.safe_load(text)
    except (json.JSONDecodeError, yaml.YAMLError) as exc:
        raise ConfigError(f"{path}: not valid {'JSON' if path.suffix == '.json' else 'YAML'}: {exc}") from None
    return doc or {}


def resolve_config(config_path, overrides: dict) -> RunConfig:
    """Defaults < config file < flags. ``overrides`` uses dotted keys; ``None`` values are ignored."""
    doc = load_config_file(config_path) if config_path else {}
    for dotted, value in overrides.items():
        if value is None:
            continue
        node = doc
        *parents, leaf = dotted.split(".")
        for p in parents:
            node = node.setdefault(p, {})
            if not isinstance(node, dict):
                raise ConfigError(f"config.{p}: expected a mapping")
        node[leaf] = value
    return parse_run_config(doc)


def require_seed(cfg: RunConfig) -> int:
    if cfg.seed is None:
        raise ConfigError("config.seed: a seed is required (set it in the config or pass --seed)")
    return cfg.seed


def require_data(cfg: RunConfig) -> dict[str, Path]:
    paths = cfg.table_paths()
    for name in TABLE_FILES:
        if name not in paths:
            raise ConfigError(f"config.data.{name}: no path given (set data.dir or data.{name})")
        if not paths[name].exists():
            raise ConfigError(f"config.data.{name}: {paths[name]} does not exist")
    return paths


# ---------------------------------------------------------------------------
# outputs
# ---------------------------------------------------------------------------


def _sha256(path: Path) -> str:
    return hashlib.sha256(path.read_bytes()).hexdigest()


def versions() -> dict:
    return {"g2p": __version__, "python": platform.python_version(), "numpy": np.__version__,
            "click": dist_version("click"), "pyyaml": yaml.__version__}


def write_manifest(out_dir: Path, command: str, cfg: RunConfig, outputs, extra=None) -> Path:
    out_dir.mkdir(parents=True, exist_ok=True)
    doc = {
        "schema": MANIFEST_SCHEMA,
        "command": command,
        "config": cfg.to_dict(),
        "config_hash": cfg.hash(),
        "seed": cfg.seed,
        "versions": versions(),
        "outputs": {str(Path(p).relative_to(out_dir)) if Path(p).is_relative_to(out_dir) else str(p):
                    _sha256(Path(p)) for p in sorted(map(str, outputs))},
    }
    if extra:
        doc.update(extra)
    path = out_dir / f"manifest_{command}.json"
    path.write_text(json.dumps(doc, indent=1, sort_keys=True))
    return path


def _out_dir(cfg: RunConfig) -> Path:
    out = Path(cfg.output)
    out.mkdir(parents=True, exist_ok=True)
    return out


# ---------------------------------------------------------------------------
# commands
# ---------------------------------------------------------------------------


def _common(f):
    f = click.option("--config", "config_path", type=click.Path(dir_okay=False), help="YAML or JSON run config.")(f)
    f = click.option("--data", "data_dir", type=click.Path(), help="Directory holding the five tables.")(f)
    f = click.option("--out", "out_dir", type=click.Path(), help="Output directory.")(f)
    f = click.option("--seed", type=int, help="Master seed.")(f)
    return f


def _base_overrides(data_dir, out_dir, seed):
    return {"data.dir": data_dir, "output": out_dir, "seed": seed}


@click.group()
@click.version_option(__version__, prog_name="g2p")
def main():
    """Genotype-to-phenotype yield prediction toolkit."""


@main.command("ingest")
@_common
def ingest_cmd(config_path, data_dir, out_dir, seed):
    """Parse and validate the five tables; write per-environment weather series."""
    cfg = resolve_config(config_path, _base_overrides(data_dir, out_dir, seed))
    ds = load_dataset(require_data(cfg))
    out = _out_dir(cfg)
    envs = sorted(ds.weather)
    series_path = out / "weather_series.tsv"
    with open(series_path, "w", encoding="utf-8") as fh:
        fh.write("env_id\tchannel\t" + "\t".join(f"w{i:02d}" for i in range(43)) + "\n")
        for env in envs:
            values = window_and_pad(ds.weather[env]).values
            for c, name in enumerate(WEATHER_CHANNELS):
                fh.write(f"{env}\t{name}\t" + "\t".join(repr(float(v)) for v in values[c]) + "\n")
    summary = {
        "hybrids": len(ds.genotypes.hybrids), "snps": len(ds.genotypes.snps),
        "missing_calls": int((ds.genotypes.calls == "N").sum()),
        "environments": len(envs), "observations": len(ds.phenotypes),
        "soil_missing": int(np.isnan(ds.soil.values).sum()),
        "management_missing": int(np.isnan(ds.management.values).sum()),
    }
    summary_path = out / "ingest_summary.json"
    summary_path.write_text(json.dumps(summary, indent=1, sort_keys=True))
    write_manifest(out, "ingest", cfg, [series_path, summary_path])
    click.echo(" ".join(f"{k}={v}" for k, v in summary.items()))


@main.command("select-snps")
@_common
@click.option("--rfe-target", type=int, help="SNPs kept by recursive elimination.")
@click.option("--top-k", type=int, help="SNPs kept by mutual information.")
def select_cmd(config_path, data_dir, out_dir, seed, rfe_target, top_k):
    """Run tree-based elimination then mutual-information ranking on all observations."""
    cfg = resolve_config(config_path, {**_base_overrides(data_dir, out_dir, seed),
                                       "selection.rfe_target": rfe_target, "selection.top_k": top_k})
    sel = cfg.selection_config()
    ds = load_dataset(require_data(cfg))
    rows = canonical_order(ds, np.arange(len(ds.phenotypes)))
    report = select_snps(ds.genotypes.resolve_missing(), ds.phenotypes, sel.rfe_target, sel.top_k,
                         sel.gbdt, sel.bins, rows=rows, step=sel.step)
    out = _out_dir(cfg)
    json_path, tsv_path = out / "selection.json", out / "selection.tsv"
    json_path.write_text(report.to_json())
    report.write_tsv(tsv_path)
    write_manifest(out, "select-snps", cfg, [json_path, tsv_path])
    counts = ", ".join(f"chr{c}:{n}" for c, n in report.chromosome_counts.items())
    click.echo(f"selected {len(report.selected)} of {len(ds.genotypes.snps)} SNPs ({counts})")


def _train_overrides(variant, split_mode, folds, max_epochs, patience, lr, batch_size, n_jobs,
                     global_selection):
    return {"variant": variant, "split.mode": split_mode, "split.folds": folds,
            "schedule.max_epochs": max_epochs, "schedule.patience": patience, "schedule.lr": lr,
            "schedule.batch_size": batch_size, "n_jobs": n_jobs,
            "selection.global_selection": True if global_selection else None}


def _train_options(f):
    f = click.option("--variant", type=click.Choice(VARIANTS), help="Model variant.")(f)
    f = click.option("--split", "split_mode", type=click.Choice(SPLIT_MODES), help="Split mode.")(f)
    f = click.option("--folds", type=int, help="Number of fold groups.")(f)
    f = click.option("--max-epochs", type=int)(f)
    f = click.option("--patience", type=int)(f)
    f = click.option("--lr", type=float)(f)
    f = click.option("--batch-size", type=int)(f)
    f = click.option("--jobs", "n_jobs", type=int, help="Folds run in parallel.")(f)
    f = click.option("--global-selection", is_flag=True, default=False,
                     help="Select SNPs once on all data instead of per fold.")(f)
    return f


def _plan(ds, cfg: RunConfig) -> SplitPlan:
    return plan_for(ds, cfg.split["mode"], require_seed(cfg), cfg.split["folds"], cfg.split["k"])


@main.command("train")
@_common
@_train_options
def train_cmd(config_path, data_dir, out_dir, seed, variant, split_mode, folds, max_epochs, patience,
              lr, batch_size, n_jobs, global_selection):
    """Train one model per fold rotation; write checkpoints and a training report."""
    cfg = resolve_config(config_path, {**_base_overrides(data_dir, out_dir, seed),
                                       **_train_overrides(variant, split_mode, folds, max_epochs, patience,
                                                          lr, batch_size, n_jobs, global_selection)})
    require_seed(cfg)
    ds = load_dataset(require_data(cfg))
    plan = _plan(ds, cfg)
    report, outputs = cross_validate(ds, plan, cfg.cv_config(), n_jobs=cfg.n_jobs, keep_params=True)
    out = _out_dir(cfg)
    ck_dir = out / f"checkpoints_{report.variant}"
    ck_dir.mkdir(parents=True, exist_ok=True)
    written = []
    plan_path = out / "split_plan.json"
    plan_path.write_text(plan.to_json())
    written.append(plan_path)
    for o in outputs:
        r = o.result
        model_cfg = cfg.model_config()
        if not model_cfg.no_g:
            model_cfg = replace(model_cfg, n_snps=len(r.selected))
        path = ck_dir / f"fold{r.fold:02d}.json"
        save_checkpoint(path, o.params, model_cfg, fold=r.fold, variant=report.variant,
                        split_mode=plan.mode, seed=cfg.seed, selected=r.selected,
                        scalers=r.scalers, fit_set_id=r.fit_set_id, run_config_hash=cfg.hash())
        written.append(path)
    paths = report.write(out, f"train_{report.variant}")
    written += list(paths.values())
    write_manifest(out, f"train_{report.variant}", cfg, written)
    s = report.summary()
    click.echo(f"variant={report.variant} split={plan.mode} folds={len(report.folds)} "
               f"val_rmse={s['val_rmse']['mean']:.4f} test_rmse={s['rmse']['mean']:.4f}")


def _load_fold_model(path):
    params, model_cfg, doc = load_checkpoint(path)
    check_params(model_cfg, params)
    for key in ("selected", "scalers", "fold"):
        if key not in doc:
            raise DataError(f"{path}: checkpoint lacks {key!r}")
    return params, model_cfg, doc


@main.command("evaluate")
@_common
@click.option("--variant", type=click.Choice(VARIANTS), help="Which trained variant to evaluate.")
@click.option("--checkpoints", "ck_dir", type=click.Path(file_okay=False),
              help="Checkpoint directory (default: <out>/checkpoints_<variant>).")
def evaluate_cmd(config_path, data_dir, out_dir, seed, variant, ck_dir):
    """Score each fold's checkpoint on its test split and write the fold MetricReport."""
    cfg = resolve_config(config_path, {**_base_overrides(data_dir, out_dir, seed), "variant": variant})
    out = _out_dir(cfg)
    plan_path = out / "split_plan.json"
    if not plan_path.exists():
        raise DataError(f"{plan_path} not found; run `train` first")
    plan = SplitPlan.from_dict(json.loads(plan_path.read_text()))
    ds = load_dataset(require_data(cfg))
    ck_dir = Path(ck_dir) if ck_dir else out / f"checkpoints_{cfg.variant}"
    results = []
    for r in range(plan.n_folds):
        path = ck_dir / f"fold{r:02d}.json"
        if not path.exists():
            raise DataError(f"fold {r}: checkpoint {path} not found")
        params, model_cfg, doc = _load_fold_model(path)
        scalers = FoldScalers.from_dict(doc["scalers"])
        if scalers.fit_set_id != fold_id(plan, r):
            raise DataError(f"fold {r}: scalers were fit on {scalers.fit_set_id!r}, expected {fold_id(plan, r)!r}")
        data = build_data(ds, doc["selected"], scalers, model_cfg)
        test = canonical_order(ds, plan.assign(ds.phenotypes.env_ids, ds.phenotypes.hybrid_ids, r)["test"])
        m = evaluate(predict(params, data, test, model_cfg), ds.phenotypes.yields[test])
        results.append(FoldResult(r, m["pearson"], m["rmse"], float("nan"), -1, 0, 0, len(test),
                                  list(doc["selected"]), scalers.fit_set_id))
    report = MetricReport(plan.mode, cfg.variant, plan.seed, results)
    paths = report.write(out, f"metrics_{cfg.variant}")
    write_manifest(out, f"evaluate_{cfg.variant}", cfg, list(paths.values()))
    s = report.summary()
    r_mean = s["pearson"]["mean"]
    click.echo(f"variant={cfg.variant} folds={len(results)} pearson={'NA' if r_mean is None else f'{r_mean:.4f}'}"
               f" rmse={s['rmse']['mean']:.4f} (sd {s['rmse']['std'] or 0:.4f})")


@main.command("predict")
@_common
@click.option("--checkpoint", type=click.Path(dir_okay=False, exists=True), required=True)
def predict_cmd(config_path, data_dir, out_dir, seed, checkpoint):
    """Predict yield for every phenotype row of the data with one checkpoint."""
    cfg = resolve_config(config_path, _base_overrides(data_dir, out_dir, seed))
    ds = load_dataset(require_data(cfg))
    params, model_cfg, doc = _load_fold_model(checkpoint)
    data = build_data(ds, doc["selected"], FoldScalers.from_dict(doc["scalers"]), model_cfg)
    preds = predict(params, data, np.arange(len(ds.phenotypes)), model_cfg)
    out = _out_dir(cfg)
    path = out / "predictions.tsv"
    ph = ds.phenotypes
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("env_id\thybrid_id\tyield\tprediction\n")
        for e, h, y, p in zip(ph.env_ids, ph.hybrid_ids, ph.yields, preds):
            fh.write(f"{e}\t{h}\t{float(y)!r}\t{float(p)!r}\n")
    write_manifest(out, "predict", cfg, [path], {"checkpoint": str(checkpoint)})
    click.echo(f"wrote {len(preds)} predictions to {path}")


@main.command("simulate")
@click.option("--config", "config_path", type=click.Path(dir_okay=False), help="Config with a `synth` section.")
@click.option("--out", "out_dir", type=click.Path(), help="Output directory for the tables.")
@click.option("--seed", type=int)
@click.option("--hybrids", type=int)
@click.option("--envs", type=int)
@click.option("--snps", type=int)
@click.option("--causal", type=int)
@click.option("--interactions", type=int)
@click.option("--noise", type=float)
def simulate_cmd(config_path, out_dir, seed, hybrids, envs, snps, causal, interactions, noise):
    """Write synthetic tables and their ground truth."""
    cfg = resolve_config(config_path, {
        "output": out_dir, "seed": seed, "synth.n_hybrids": hybrids, "synth.n_envs": envs,
        "synth.n_snps": snps, "synth.n_causal": causal, "synth.n_interactions": interactions,
        "synth.noise": noise})
    synth = _build(SynthConfig, {**cfg.synth, "seed": require_seed(cfg)}, "synth")
    ds, gt = generate(synth)
    out = _out_dir(cfg)
    paths = write_synth(ds, gt, out, synth)
    write_manifest(out, "simulate", cfg, list(paths.values()))
    click.echo(f"wrote {len(ds.genotypes.hybrids)} hybrids x {len(ds.genotypes.snps)} SNPs, "
               f"{len(ds.weather)} environments, {len(ds.phenotypes)} observations to {out}")


@main.command("export-attention")
@_common
@click.option("--checkpoint", type=click.Path(dir_okay=False, exists=True), required=True)
@click.option("--env", "env_id", help="Environment of the observation (default: first row).")
@click.option("--hybrid", "hybrid_id", help="Hybrid of the observation (default: first row).")
@click.option("--svg/--no-svg", default=False, help="Also write an SVG heatmap.")
def export_attention_cmd(config_path, data_dir, out_dir, seed, checkpoint, env_id, hybrid_id, svg):
    """Write the SNP-by-timestep attention weights of one observation as CSV."""
    cfg = resolve_config(config_path, _base_overrides(data_dir, out_dir, seed))
    ds = load_dataset(require_data(cfg))
    params, model_cfg, doc = _load_fold_model(checkpoint)
    if model_cfg.no_ge:
        raise ConfigError(f"checkpoint variant {model_cfg.variant!r} has no attention")
    ph = ds.phenotypes
    env_id = env_id or ph.env_ids[0]
    hybrid_id = hybrid_id or ph.hybrid_ids[0]
    if env_id not in ds.weather or hybrid_id not in set(ds.genotypes.hybrids):
        raise DataError(f"unknown observation ({env_id}, {hybrid_id})")
    data = build_data(ds, doc["selected"], FoldScalers.from_dict(doc["scalers"]), model_cfg)
    h = ds.genotypes.hybrid_index(hybrid_id)
    e = data.env_ids.index(env_id)
    batch = Batch(data.snps[[h]], data.descriptors, data.weather[[e]], data.soil[[e]], data.mgmt[[e]],
                  data.pos_codes)
    result = model_forward(params, batch, model_cfg)
    weights = result.attention[0]
    out = _out_dir(cfg)
    ids = [s.id for s in data.descriptors]
    path = out / "attention.csv"
    write_attention_csv(path, weights, ids)
    written = [path]
    if svg:
        svg_path = out / "attention.svg"
        write_attention_svg(svg_path, weights, ids)
        written.append(svg_path)
    write_manifest(out, "export-attention", cfg, written,
                   {"checkpoint": str(checkpoint), "env_id": env_id, "hybrid_id": hybrid_id})
    click.echo(f"attention {weights.shape[0]}x{weights.shape[1]} for ({env_id}, {hybrid_id}) -> {path}")


def run(argv=None) -> int:
    """Invoke the CLI and map errors to exit codes (config 2, data 3, numeric 4)."""
    try:
        main.main(args=argv, prog_name="g2p", standalone_mode=False)
    except G2PError as exc:
        click.echo(f"error: {exc}", err=True)
        return exc.exit_code
    except click.exceptions.Abort:
        click.echo("aborted", err=True)
        return 1
    except click.ClickException as exc:
        exc.show()
        return 2 if isinstance(exc, click.UsageError) else 1
    return 0


def entry() -> None:
    sys.exit(run())
