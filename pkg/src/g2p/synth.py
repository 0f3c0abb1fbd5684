"""Synthetic genotype, weather, soil, management and yield tables with known effects.

Yield is a linear function of genotype dosages, environment features and
dosage-by-weather products, so the generating model can be recovered
exactly by least squares when the noise is zero.
"""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .errors import ConfigError, DataError
from .ingest import (
    BASES, N_CHROMOSOMES, N_MANAGEMENT, N_SOIL, WEATHER_CHANNELS, Dataset, DailyWeather, EnvTable,
    GenotypeTable, PhenotypeTable, SnpDescriptor, derive_weather, saturation_vp, window_and_pad,
    write_dataset,
)
from .numcore import rng_stream
from .selection import dosage_matrix

EFFECT_MODES = ("linear", "threshold")
_HET = {frozenset("AG"): "R", frozenset("CT"): "Y", frozenset("CG"): "S",
        frozenset("AT"): "W", frozenset("GT"): "K", frozenset("AC"): "M"}


@dataclass(frozen=True)
class SynthConfig:
    n_hybrids: int = 200
    n_envs: int = 20
    n_snps: int = 100
    n_causal: int = 10
    n_interactions: int = 0
    allele_freq: tuple = (0.2, 0.8)
    beta_scale: float = 1.0
    gamma_scale: float = 1.0
    delta_scale: float = 1.0
    noise: float = 1.0
    target_r2: float | None = None  # if set, overrides ``noise``
    mean_yield: float = 150.0
    season_days: int = 215
    context_width: int = 2
    summary_window: int = 8  # windows averaged by each interacting weather summary
    obs_fraction: float = 1.0
    effect_mode: str = "linear"
    seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, "allele_freq", tuple(float(x) for x in self.allele_freq))
        self.validate()

    def validate(self) -> None:
        if min(self.n_hybrids, self.n_envs, self.n_snps) < 1:
            raise ConfigError("hybrid, environment and SNP counts must be positive")
        if not 0 <= self.n_causal <= self.n_snps:
            raise ConfigError(f"n_causal={self.n_causal} must lie in 0..n_snps={self.n_snps}")
        if not 0 <= self.n_interactions <= self.n_causal:
            raise ConfigError(f"n_interactions={self.n_interactions} must lie in 0..n_causal={self.n_causal}")
        lo, hi = self.allele_freq
        if not 0.0 < lo <= hi < 1.0:
            raise ConfigError("allele_freq must satisfy 0 < low <= high < 1")
        if self.noise < 0:
            raise ConfigError("noise must be >= 0")
        if self.target_r2 is not None and not 0.0 < self.target_r2 <= 1.0:
            raise ConfigError("target_r2 must lie in (0, 1]")
        if self.season_days < 1 or self.context_width < 0:
            raise ConfigError("season_days must be positive and context_width >= 0")
        if not 1 <= self.summary_window <= 43:
            raise ConfigError("summary_window must lie in 1..43")
        if not 0.0 < self.obs_fraction <= 1.0:
            raise ConfigError("obs_fraction must lie in (0, 1]")
        if self.effect_mode not in EFFECT_MODES:
            raise ConfigError(f"effect_mode must be one of {EFFECT_MODES}")
        if self.n_envs > 26 * 100:
            raise ConfigError("too many environments for the id scheme")

    @classmethod
    def from_dict(cls, d) -> "SynthConfig":
        extra = set(d) - set(cls.__dataclass_fields__)
        if extra:
            raise ConfigError(f"unknown synth config fields: {sorted(extra)}")
        return cls(**d)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["allele_freq"] = list(self.allele_freq)
        return d


@dataclass
class Interaction:
    snp: str
    channel: str
    window_start: int
    window_len: int
    center: float
    scale: float
    delta: float


@dataclass
class GroundTruth:
    mean_yield: float
    beta: dict[str, float]
    gamma: dict[str, float]  # soil and management feature -> coefficient
    interactions: list[Interaction]
    noise: float
    effect_mode: str = "linear"
    allele_freq: dict[str, float] = field(default_factory=dict)  # reference allele frequency per SNP

    def to_dict(self) -> dict:
        return {
            "mean_yield": self.mean_yield,
            "beta": self.beta,
            "gamma": self.gamma,
            "interactions": [asdict(i) for i in self.interactions],
            "noise": self.noise,
            "effect_mode": self.effect_mode,
            "allele_freq": self.allele_freq,
        }

    @classmethod
    def from_dict(cls, d) -> "GroundTruth":
        return cls(d["mean_yield"], dict(d["beta"]), dict(d["gamma"]),
                   [Interaction(**i) for i in d["interactions"]], d["noise"],
                   d.get("effect_mode", "linear"), dict(d.get("allele_freq", {})))

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=1, sort_keys=True)


# ---------------------------------------------------------------------------
# table generators
# ---------------------------------------------------------------------------


def env_ids_for(n: int) -> list[str]:
    """``LOCxx_year`` ids: locations cycle first, then years advance."""
    n_loc = min(n, 20)
    return [f"LOC{i % n_loc:02d}_{2014 + i // n_loc}" for i in range(n)]


def _genotypes(cfg: SynthConfig, rng) -> tuple[GenotypeTable, np.ndarray]:
    n_h, n_s, w = cfg.n_hybrids, cfg.n_snps, cfg.context_width
    chrom = np.sort(rng.integers(1, N_CHROMOSOMES + 1, n_s))
    snps = []
    calls = np.empty((n_h, n_s), dtype="<U1")
    freqs = rng.uniform(*cfg.allele_freq, n_s)
    used = set()
    for j in range(n_s):
        pos = int(rng.integers(1, 300_000_000))
        while (chrom[j], pos) in used:
            pos += 1
        used.add((chrom[j], pos))
        context = "".join(rng.choice(list(BASES), 2 * w + 1))
        ref = context[w]
        alt = str(rng.choice([b for b in BASES if b != ref]))
        snps.append(SnpDescriptor(f"S{j + 1:05d}", int(chrom[j]), pos, context))
        q = freqs[j]
        # Hardy-Weinberg: hom-ref q^2, het 2q(1-q), hom-alt (1-q)^2
        draw = rng.choice(3, size=n_h, p=[q * q, 2 * q * (1 - q), (1 - q) ** 2])
        calls[:, j] = np.array([ref, _HET[frozenset(ref + alt)], alt])[draw]
    hybrids = [f"H{i + 1:05d}" for i in range(n_h)]
    return GenotypeTable(snps, hybrids, calls), freqs


def _weather(cfg: SynthConfig, env_ids, rng) -> dict[str, DailyWeather]:
    out = {}
    t = np.arange(cfg.season_days, dtype=np.float64)
    season = np.sin(np.pi * t / max(cfg.season_days, 1))  # warm mid-season
    for env in env_ids:
        year = int(env.rsplit("_", 1)[1])
        dates = np.datetime64(f"{year}-04-15") + np.arange(cfg.season_days).astype("timedelta64[D]")
        off_t, off_s, off_p, off_w, humid = (rng.normal(0, 3), rng.normal(0, 40), rng.uniform(1, 5),
                                             rng.normal(0, 0.8), rng.uniform(0.5, 0.9))
        phase = rng.uniform(-0.3, 0.3)
        shape = np.sin(np.pi * (t / max(cfg.season_days, 1) + phase)) if phase else season
        tmean = 16 + off_t + 10 * shape + rng.normal(0, 2, t.size)
        spread = np.maximum(1.0, 11 + rng.normal(0, 2, t.size))
        tmax, tmin = tmean + spread / 2, tmean - spread / 2
        vp = saturation_vp(tmin) * np.clip(humid + rng.normal(0, 0.08, t.size), 0.2, 1.0)
        srad = np.maximum(5.0, 320 + off_s + 90 * shape + rng.normal(0, 35, t.size))
        prcp = np.where(rng.random(t.size) < 0.3, rng.exponential(off_p * 3, t.size), 0.0)
        wind = np.abs(3 + off_w + rng.normal(0, 1, t.size))
        out[env] = derive_weather(DailyWeather(env, dates, srad, vp, prcp, tmax, tmin, wind))
    return out


def weather_summary(series: np.ndarray, inter: Interaction) -> float:
    """Mean of one channel over the designated windows of a ``9 x 43`` series."""
    c = WEATHER_CHANNELS.index(inter.channel)
    return float(series[c, inter.window_start: inter.window_start + inter.window_len].mean())


def _interaction_factor(z: np.ndarray, mode: str) -> np.ndarray:
    if mode == "threshold":
        return (z > 0).astype(np.float64)
    return z


def yield_components(gt: GroundTruth, genotypes: GenotypeTable, series: dict[str, np.ndarray],
                     soil: EnvTable, management: EnvTable, env_ids, hybrid_ids) -> dict[str, np.ndarray]:
    """Noise-free yield contributions per observation, evaluated from the tables."""
    dos = dosage_matrix(genotypes)
    h = np.array([genotypes.hybrid_index(x) for x in hybrid_ids], dtype=int)
    col = {s.id: j for j, s in enumerate(genotypes.snps)}
    n = len(h)
    g = np.zeros(n)
    for sid, b in gt.beta.items():
        g += b * dos[h, col[sid]]
    names = list(soil.names) + list(management.names)
    env_feat = np.hstack([soil.rows(env_ids), management.rows(env_ids)])
    e = env_feat @ np.array([gt.gamma[nm] for nm in names])
    ge = np.zeros(n)
    for inter in gt.interactions:
        z = np.array([(weather_summary(series[x], inter) - inter.center) / inter.scale for x in env_ids])
        ge += inter.delta * dos[h, col[inter.snp]] * _interaction_factor(z, gt.effect_mode)
    return {"genetic": g, "environment": e, "interaction": ge,
            "total": gt.mean_yield + g + e + ge}


def expected_yield(gt: GroundTruth, ds: Dataset) -> np.ndarray:
    """Noise-free yield of every phenotype row of ``ds``."""
    series = {env: window_and_pad(day).values for env, day in ds.weather.items()}
    return yield_components(gt, ds.genotypes, series, ds.soil, ds.management,
                            list(ds.phenotypes.env_ids), list(ds.phenotypes.hybrid_ids))["total"]


def _signs(rng, n):
    return np.where(rng.random(n) < 0.5, -1.0, 1.0)


def generate(cfg: SynthConfig) -> tuple[Dataset, GroundTruth]:
    """Draw all five tables and the ground truth from ``cfg.seed``."""
    genotypes, freqs = _genotypes(cfg, rng_stream(cfg.seed, "synth/genotypes"))
    envs = env_ids_for(cfg.n_envs)
    weather = _weather(cfg, envs, rng_stream(cfg.seed, "synth/weather"))
    rng = rng_stream(cfg.seed, "synth/env")
    soil = EnvTable("soil", [f"soil_{i + 1:02d}" for i in range(N_SOIL)], list(envs),
                    rng.standard_normal((len(envs), N_SOIL)))
    mgmt = EnvTable("management", [f"mgmt_{i + 1}" for i in range(N_MANAGEMENT)], list(envs),
                    rng.standard_normal((len(envs), N_MANAGEMENT)))

    rng = rng_stream(cfg.seed, "synth/effects")
    ids = [s.id for s in genotypes.snps]
    causal = sorted(rng.choice(len(ids), cfg.n_causal, replace=False).tolist())
    beta = _signs(rng, cfg.n_causal) * rng.uniform(0.5, 1.5, cfg.n_causal) * cfg.beta_scale
    names = soil.names + mgmt.names
    gamma = rng.normal(0, 1, len(names)) * cfg.gamma_scale / math.sqrt(len(names))
    series = {env: window_and_pad(day).values for env, day in weather.items()}
    interactions = []
    inter_snps = rng.choice(causal, cfg.n_interactions, replace=False).tolist() if cfg.n_interactions else []
    for j in sorted(inter_snps):
        channel = WEATHER_CHANNELS[int(rng.integers(len(WEATHER_CHANNELS)))]
        start = int(rng.integers(0, 43 - cfg.summary_window + 1))
        delta = float(_signs(rng, 1)[0] * rng.uniform(0.5, 1.5) * cfg.delta_scale)
        probe = Interaction(ids[j], channel, start, cfg.summary_window, 0.0, 1.0, delta)
        raw = np.array([weather_summary(series[e], probe) for e in envs])
        scale = float(raw.std())
        probe.center = float(raw.mean())
        probe.scale = scale if scale > 0 else 1.0
        interactions.append(probe)
    gt = GroundTruth(cfg.mean_yield, {ids[j]: float(b) for j, b in zip(causal, beta)},
                     {nm: float(g) for nm, g in zip(names, gamma)}, interactions, cfg.noise,
                     cfg.effect_mode, {sid: float(q) for sid, q in zip(ids, freqs)})

    rng = rng_stream(cfg.seed, "synth/observations")
    pairs = [(e, h) for e in envs for h in genotypes.hybrids]
    if cfg.obs_fraction < 1.0:
        keep = rng.random(len(pairs)) < cfg.obs_fraction
        pairs = [p for p, k in zip(pairs, keep) if k]
    if not pairs:
        raise DataError("obs_fraction left no observations")
    env_col = [p[0] for p in pairs]
    hyb_col = [p[1] for p in pairs]
    signal = yield_components(gt, genotypes, series, soil, mgmt, env_col, hyb_col)["total"]
    sigma = cfg.noise
    if cfg.target_r2 is not None:
        sigma = noise_for_r2(signal, cfg.target_r2)
        gt.noise = sigma
    y = signal + rng.normal(0, 1, len(pairs)) * sigma if sigma > 0 else signal.copy()
    ds = Dataset(genotypes, weather, soil, mgmt, PhenotypeTable(env_col, hyb_col, y))
    ds.validate()
    return ds, gt


def noise_for_r2(signal: np.ndarray, r2: float) -> float:
    """Noise std giving ``var(signal) / (var(signal) + sigma^2) = r2``."""
    var = float(np.var(signal))
    return math.sqrt(var * (1.0 - r2) / r2) if r2 < 1.0 else 0.0


def write(ds: Dataset, gt: GroundTruth, out_dir, cfg: SynthConfig | None = None) -> dict[str, Path]:
    paths = write_dataset(ds, out_dir)
    doc = gt.to_dict()
    if cfg is not None:
        doc["config"] = cfg.to_dict()
    path = Path(out_dir) / "ground_truth.json"
    path.write_text(json.dumps(doc, indent=1, sort_keys=True))
    paths["ground_truth"] = path
    return paths


def read_ground_truth(path) -> GroundTruth:
    return GroundTruth.from_dict(json.loads(Path(path).read_text()))
