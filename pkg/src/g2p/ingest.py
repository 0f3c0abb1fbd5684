"""Parsing and preprocessing of the five tab-separated input tables.

File layouts (UTF-8, tab separated, header row mandatory):

``genotypes.tsv``   ``snp_id chrom pos context <hybrid_1> ... <hybrid_H>``
``weather.tsv``     ``env_id date srad vp prcp tmax tmin wind``
``soil.tsv``        ``env_id`` + 19 numeric columns
``management.tsv``  ``env_id`` + 5 numeric columns
``phenotypes.tsv``  ``env_id hybrid_id yield``
"""

from __future__ import annotations

import csv
import json
import math
import re
import warnings
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from .errors import DataError, ParseError

IUPAC_CALLS = frozenset("ACGTRYSWKMN")
BASES = "ACGT"
N_CHROMOSOMES = 10

WEATHER_RAW = ("srad", "vp", "prcp", "tmax", "tmin", "wind")
WEATHER_DERIVED = ("dewpoint", "rh", "gdd")
WEATHER_CHANNELS = WEATHER_RAW + WEATHER_DERIVED
N_SOIL = 19
N_MANAGEMENT = 5
WINDOW_DAYS = 5
SERIES_LENGTH = 43

# Magnus-Tetens constants (saturation vapour pressure over water, Pa / degC)
MAGNUS_A = 17.67
MAGNUS_B = 243.5
MAGNUS_E0 = 611.2

GDD_BASE_F = 50.0
GDD_CAP_F = 86.0

ENV_ID_RE = re.compile(r"^\S+_(\d{4})$")
MISSING = {"", "NA", "NaN", "nan", "."}

TABLE_FILES = {
    "genotypes": "genotypes.tsv",
    "weather": "weather.tsv",
    "soil": "soil.tsv",
    "management": "management.tsv",
    "phenotypes": "phenotypes.tsv",
}


# ---------------------------------------------------------------------------
# domain types
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class SnpDescriptor:
    id: str
    chrom: int
    pos: int
    context: str

    @property
    def width(self) -> int:
        """Flank width ``w`` of a ``2w+1`` context."""
        return len(self.context) // 2

    @property
    def ref(self) -> str:
        return self.context[len(self.context) // 2]


@dataclass
class GenotypeTable:
    snps: list[SnpDescriptor]
    hybrids: list[str]
    calls: np.ndarray  # (hybrids, snps) single-letter strings

    def __post_init__(self):
        self.calls = np.asarray(self.calls, dtype="<U1")
        if self.calls.shape != (len(self.hybrids), len(self.snps)):
            raise DataError(f"calls shape {self.calls.shape} does not match "
                            f"{len(self.hybrids)} hybrids x {len(self.snps)} snps")
        _check_unique([s.id for s in self.snps], "snp id")
        _check_unique(self.hybrids, "hybrid id")
        bad = ~np.isin(self.calls, sorted(IUPAC_CALLS))
        if bad.any():
            h, s = np.argwhere(bad)[0]
            raise DataError(f"call {self.calls[h, s]!r} for hybrid {self.hybrids[h]} "
                            f"at snp {self.snps[s].id} is not an IUPAC genotype letter")
        self._hybrid_index = {h: i for i, h in enumerate(self.hybrids)}
        self._snp_index = {s.id: i for i, s in enumerate(self.snps)}

    @property
    def shape(self) -> tuple[int, int]:
        return self.calls.shape

    def hybrid_index(self, hybrid_id: str) -> int:
        return self._hybrid_index[hybrid_id]

    def snp_index(self, snp_id: str) -> int:
        return self._snp_index[snp_id]

    def subset(self, snp_ids) -> "GenotypeTable":
        cols = [self._snp_index[s] for s in snp_ids]
        return GenotypeTable([self.snps[c] for c in cols], list(self.hybrids), self.calls[:, cols])

    def resolve_missing(self) -> "GenotypeTable":
        """Replace ``N`` calls with the most frequent call at that SNP.

        Ties resolve alphabetically; a SNP with only ``N`` calls falls back to
        the reference base.
        """
        calls = self.calls.copy()
        for j, snp in enumerate(self.snps):
            col = calls[:, j]
            missing = col == "N"
            if not missing.any():
                continue
            letters, counts = np.unique(col[~missing], return_counts=True)
            fill = letters[np.argmax(counts)] if letters.size else snp.ref
            col[missing] = fill
        return GenotypeTable(list(self.snps), list(self.hybrids), calls)


@dataclass(frozen=True)
class DailyWeather:
    """Daily records for one location-year; derived channels may be ``None``."""

    env_id: str
    dates: np.ndarray
    srad: np.ndarray
    vp: np.ndarray
    prcp: np.ndarray
    tmax: np.ndarray
    tmin: np.ndarray
    wind: np.ndarray
    dewpoint: np.ndarray | None = None
    rh: np.ndarray | None = None
    gdd: np.ndarray | None = None

    def __len__(self):
        return len(self.dates)

    @property
    def derived(self) -> bool:
        return self.gdd is not None

    def matrix(self) -> np.ndarray:
        """``(days, 9)`` array in :data:`WEATHER_CHANNELS` order."""
        if not self.derived:
            raise DataError(f"{self.env_id}: derived weather features not computed")
        return np.column_stack([getattr(self, c) for c in WEATHER_CHANNELS]).astype(np.float64)


@dataclass(frozen=True)
class WeatherSeries:
    env_id: str
    values: np.ndarray  # (channels, windows)


@dataclass
class EnvTable:
    """Per-environment numeric features (soil or management). Missing cells are NaN."""

    kind: str
    names: list[str]
    env_ids: list[str]
    values: np.ndarray
    imputed: np.ndarray = field(default=None)

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=np.float64)
        if self.imputed is None:
            self.imputed = np.zeros(self.values.shape, dtype=bool)
        _check_unique(self.env_ids, f"{self.kind} env_id")
        self._index = {e: i for i, e in enumerate(self.env_ids)}

    def row(self, env_id: str) -> np.ndarray:
        return self.values[self._index[env_id]]

    def rows(self, env_ids) -> np.ndarray:
        return self.values[[self._index[e] for e in env_ids]]

    def __contains__(self, env_id):
        return env_id in self._index

    def fill_values(self, train_env_ids) -> np.ndarray:
        """Column means over ``train_env_ids`` ignoring NaN; 0 where a column has no data."""
        train = self.rows(sorted(set(train_env_ids)))
        if not train.size:
            return np.zeros(len(self.names))
        with np.errstate(all="ignore"), warnings.catch_warnings():
            warnings.simplefilter("ignore", RuntimeWarning)
            means = np.nanmean(train, axis=0)
        return np.where(np.isfinite(means), means, 0.0)

    def filled(self, fill) -> "EnvTable":
        missing = np.isnan(self.values)
        values = np.where(missing, np.asarray(fill, dtype=np.float64), self.values)
        return EnvTable(self.kind, list(self.names), list(self.env_ids), values, self.imputed | missing)

    def impute(self, train_env_ids) -> "EnvTable":
        """Fill NaN cells with column means over ``train_env_ids`` and flag them."""
        return self.filled(self.fill_values(train_env_ids))


@dataclass
class PhenotypeTable:
    env_ids: np.ndarray
    hybrid_ids: np.ndarray
    yields: np.ndarray

    def __post_init__(self):
        self.env_ids = np.asarray(self.env_ids, dtype=object)
        self.hybrid_ids = np.asarray(self.hybrid_ids, dtype=object)
        self.yields = np.asarray(self.yields, dtype=np.float64)
        if not (len(self.env_ids) == len(self.hybrid_ids) == len(self.yields)):
            raise DataError("phenotype columns have unequal lengths")

    def __len__(self):
        return len(self.yields)

    def subset(self, index) -> "PhenotypeTable":
        index = np.asarray(index, dtype=int)
        return PhenotypeTable(self.env_ids[index], self.hybrid_ids[index], self.yields[index])


@dataclass
class Dataset:
    genotypes: GenotypeTable
    weather: dict[str, DailyWeather]
    soil: EnvTable
    management: EnvTable
    phenotypes: PhenotypeTable

    def validate(self) -> None:
        """Check that every observation resolves in the other tables."""
        known_h = set(self.genotypes.hybrids)
        for i, (e, h) in enumerate(zip(self.phenotypes.env_ids, self.phenotypes.hybrid_ids)):
            if h not in known_h:
                raise DataError(f"phenotype row {i + 2}: unknown hybrid {h!r}")
            for name, table in (("weather", self.weather), ("soil", self.soil),
                                ("management", self.management)):
                if e not in table:
                    raise DataError(f"phenotype row {i + 2}: env {e!r} missing from {name} table")

    @property
    def env_ids(self) -> list[str]:
        return sorted(set(self.phenotypes.env_ids))


# ---------------------------------------------------------------------------
# parsing
# ---------------------------------------------------------------------------


def _check_unique(ids, what):
    seen = set()
    for x in ids:
        if x in seen:
            raise DataError(f"duplicate {what} {x!r}")
        seen.add(x)


def _read_rows(path):
    path = Path(path)
    if not path.exists():
        raise DataError(f"{path}: no such file")
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh, delimiter="\t")
        try:
            header = next(reader)
        except StopIteration:
            raise ParseError("empty file, header expected", path) from None
        rows = []
        for lineno, row in enumerate(reader, start=2):
            if not row or all(not c.strip() for c in row):
                continue
            if len(row) != len(header):
                raise ParseError(f"expected {len(header)} fields, found {len(row)}", path, lineno)
            rows.append((lineno, row))
    return header, rows


def _require_header(path, header, expected):
    if header[: len(expected)] != list(expected):
        raise ParseError(f"header must start with {' '.join(expected)}, got {' '.join(header)}", path, 1)


def _as_int(text, path, line, col):
    try:
        return int(text)
    except ValueError:
        raise ParseError(f"expected integer, got {text!r}", path, line, col) from None


def _as_float(text, path, line, col, allow_missing=False):
    if allow_missing and text.strip() in MISSING:
        return math.nan
    try:
        value = float(text)
    except ValueError:
        raise ParseError(f"expected number, got {text!r}", path, line, col) from None
    if not math.isfinite(value):
        raise ParseError(f"non-finite value {text!r}", path, line, col)
    return value


def check_env_id(env_id, path=None, line=None):
    if not ENV_ID_RE.match(env_id):
        raise ParseError(f"env_id {env_id!r} is not of the form <location>_<year>", path, line, "env_id")
    return env_id


def parse_genotypes(path) -> GenotypeTable:
    header, rows = _read_rows(path)
    fixed = ("snp_id", "chrom", "pos", "context")
    _require_header(path, header, fixed)
    hybrids = header[4:]
    if not hybrids:
        raise ParseError("no hybrid columns", path, 1)
    if len(set(hybrids)) != len(hybrids):
        dup = next(h for h in hybrids if hybrids.count(h) > 1)
        raise ParseError(f"duplicate hybrid id {dup!r}", path, 1)
    snps, calls, seen = [], [], set()
    width = None
    for lineno, row in rows:
        snp_id = row[0]
        if snp_id in seen:
            raise ParseError(f"duplicate snp id {snp_id!r}", path, lineno, "snp_id")
        seen.add(snp_id)
        chrom = _as_int(row[1], path, lineno, "chrom")
        if not 1 <= chrom <= N_CHROMOSOMES:
            raise ParseError(f"chromosome {chrom} outside 1..{N_CHROMOSOMES}", path, lineno, "chrom")
        pos = _as_int(row[2], path, lineno, "pos")
        if pos < 1:
            raise ParseError(f"position must be positive, got {pos}", path, lineno, "pos")
        context = row[3].strip().upper()
        if len(context) % 2 != 1 or any(c not in BASES for c in context):
            raise ParseError(f"context {row[3]!r} must be an odd-length string over ACGT",
                             path, lineno, "context")
        if width is None:
            width = len(context)
        elif len(context) != width:
            raise ParseError(f"context length {len(context)} differs from {width}", path, lineno, "context")
        letters = [c.strip().upper() for c in row[4:]]
        for col, letter in zip(hybrids, letters):
            if len(letter) != 1 or letter not in IUPAC_CALLS:
                raise ParseError(f"invalid genotype letter {letter!r}", path, lineno, col)
        snps.append(SnpDescriptor(snp_id, chrom, pos, context))
        calls.append(letters)
    matrix = np.array(calls, dtype="<U1").T if calls else np.empty((len(hybrids), 0), dtype="<U1")
    return GenotypeTable(snps, list(hybrids), matrix)


def parse_weather_daily(path) -> dict[str, DailyWeather]:
    header, rows = _read_rows(path)
    expected = ("env_id", "date") + WEATHER_RAW
    if header != list(expected):
        raise ParseError(f"header must be {' '.join(expected)}", path, 1)
    grouped: dict[str, list] = {}
    for lineno, row in rows:
        env = check_env_id(row[0], path, lineno)
        try:
            date = np.datetime64(row[1], "D")
        except ValueError:
            raise ParseError(f"bad date {row[1]!r}, expected YYYY-MM-DD", path, lineno, "date") from None
        vals = [_as_float(row[2 + i], path, lineno, c) for i, c in enumerate(WEATHER_RAW)]
        rec = dict(zip(WEATHER_RAW, vals))
        if rec["vp"] <= 0:
            raise ParseError("vapour pressure must be positive", path, lineno, "vp")
        if rec["tmax"] < rec["tmin"]:
            raise ParseError("tmax below tmin", path, lineno, "tmax")
        days = grouped.setdefault(env, [])
        if days and date <= days[-1][1]:
            raise ParseError(f"dates for {env} not strictly increasing", path, lineno, "date")
        days.append((lineno, date, vals))
    out = {}
    for env, days in grouped.items():
        arr = np.array([d[2] for d in days], dtype=np.float64)
        out[env] = DailyWeather(env, np.array([d[1] for d in days], dtype="datetime64[D]"),
                                *(arr[:, i] for i in range(len(WEATHER_RAW))))
    return out


def _parse_env_table(path, kind, n_features) -> EnvTable:
    header, rows = _read_rows(path)
    if not header or header[0] != "env_id":
        raise ParseError("first column must be env_id", path, 1)
    names = header[1:]
    if len(names) != n_features:
        raise ParseError(f"{kind} table needs {n_features} feature columns, found {len(names)}", path, 1)
    if len(set(names)) != len(names):
        raise ParseError("duplicate feature column", path, 1)
    env_ids, values = [], []
    for lineno, row in rows:
        env = check_env_id(row[0], path, lineno)
        if env in env_ids:
            raise ParseError(f"duplicate env_id {env!r}", path, lineno, "env_id")
        env_ids.append(env)
        values.append([_as_float(v, path, lineno, n, allow_missing=True) for n, v in zip(names, row[1:])])
    values = np.array(values, dtype=np.float64).reshape(len(env_ids), n_features)
    return EnvTable(kind, names, env_ids, values)


def parse_soil(path) -> EnvTable:
    return _parse_env_table(path, "soil", N_SOIL)


def parse_management(path) -> EnvTable:
    return _parse_env_table(path, "management", N_MANAGEMENT)


def parse_phenotypes(path) -> PhenotypeTable:
    header, rows = _read_rows(path)
    if header != ["env_id", "hybrid_id", "yield"]:
        raise ParseError("header must be env_id hybrid_id yield", path, 1)
    envs, hybrids, ys = [], [], []
    for lineno, row in rows:
        envs.append(check_env_id(row[0], path, lineno))
        if not row[1].strip():
            raise ParseError("empty hybrid_id", path, lineno, "hybrid_id")
        hybrids.append(row[1])
        ys.append(_as_float(row[2], path, lineno, "yield"))
    return PhenotypeTable(envs, hybrids, ys)


def table_paths(data_dir) -> dict[str, Path]:
    return {k: Path(data_dir) / v for k, v in TABLE_FILES.items()}


def load_dataset(paths) -> Dataset:
    """Parse all five tables. ``paths`` is a directory or a name -> path mapping."""
    if not isinstance(paths, dict):
        paths = table_paths(paths)
    weather = {env: derive_weather(day) for env, day in parse_weather_daily(paths["weather"]).items()}
    ds = Dataset(
        genotypes=parse_genotypes(paths["genotypes"]),
        weather=weather,
        soil=parse_soil(paths["soil"]),
        management=parse_management(paths["management"]),
        phenotypes=parse_phenotypes(paths["phenotypes"]),
    )
    ds.validate()
    return ds


# ---------------------------------------------------------------------------
# writing
# ---------------------------------------------------------------------------


def _fmt(x: float) -> str:
    return "NA" if math.isnan(x) else repr(float(x))


def write_genotypes(table: GenotypeTable, path) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, delimiter="\t", lineterminator="\n")
        w.writerow(["snp_id", "chrom", "pos", "context", *table.hybrids])
        for j, s in enumerate(table.snps):
            w.writerow([s.id, s.chrom, s.pos, s.context, *table.calls[:, j]])


def write_weather(weather: dict[str, DailyWeather], path) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, delimiter="\t", lineterminator="\n")
        w.writerow(["env_id", "date", *WEATHER_RAW])
        for env in sorted(weather):
            day = weather[env]
            cols = [getattr(day, c) for c in WEATHER_RAW]
            for i, date in enumerate(day.dates):
                w.writerow([env, str(date), *(_fmt(c[i]) for c in cols)])


def write_env_table(table: EnvTable, path) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, delimiter="\t", lineterminator="\n")
        w.writerow(["env_id", *table.names])
        for env, row in zip(table.env_ids, table.values):
            w.writerow([env, *(_fmt(v) for v in row)])


def write_phenotypes(table: PhenotypeTable, path) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, delimiter="\t", lineterminator="\n")
        w.writerow(["env_id", "hybrid_id", "yield"])
        for e, h, y in zip(table.env_ids, table.hybrid_ids, table.yields):
            w.writerow([e, h, _fmt(y)])


def write_dataset(ds: Dataset, out_dir) -> dict[str, Path]:
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    paths = table_paths(out_dir)
    write_genotypes(ds.genotypes, paths["genotypes"])
    write_weather(ds.weather, paths["weather"])
    write_env_table(ds.soil, paths["soil"])
    write_env_table(ds.management, paths["management"])
    write_phenotypes(ds.phenotypes, paths["phenotypes"])
    return paths


# ---------------------------------------------------------------------------
# derived weather features
# ---------------------------------------------------------------------------


def saturation_vp(t_c):
    """Saturation vapour pressure (Pa) at ``t_c`` degrees Celsius."""
    t_c = np.asarray(t_c, dtype=np.float64)
    return MAGNUS_E0 * np.exp(MAGNUS_A * t_c / (t_c + MAGNUS_B))


def dew_point(vp_pa):
    """Dew point (degC) from actual vapour pressure (Pa), inverse Magnus."""
    vp_pa = np.asarray(vp_pa, dtype=np.float64)
    if np.any(vp_pa <= 0):
        raise DataError("vapour pressure must be positive")
    g = np.log(vp_pa / MAGNUS_E0)
    return MAGNUS_B * g / (MAGNUS_A - g)


def relative_humidity(vp_pa, tmax_c, tmin_c):
    """Percent RH against saturation at the daily mean temperature, clipped to [0, 100]."""
    t_mean = (np.asarray(tmax_c, dtype=np.float64) + np.asarray(tmin_c, dtype=np.float64)) / 2.0
    return np.clip(100.0 * np.asarray(vp_pa, dtype=np.float64) / saturation_vp(t_mean), 0.0, 100.0)


def c_to_f(t_c):
    return np.asarray(t_c, dtype=np.float64) * 9.0 / 5.0 + 32.0


def growing_degree_days(tmax_c, tmin_c):
    """Corn GDD in degF-days with the 86 degF cap and 50 degF floor."""
    hi = np.minimum(c_to_f(tmax_c), GDD_CAP_F)
    lo = np.maximum(c_to_f(tmin_c), GDD_BASE_F)
    return np.maximum(0.0, (hi + lo) / 2.0 - GDD_BASE_F)


def derive_weather(day: DailyWeather) -> DailyWeather:
    if np.any(day.vp <= 0):
        raise DataError(f"{day.env_id}: nonpositive vapour pressure")
    if np.any(day.tmax < day.tmin):
        raise DataError(f"{day.env_id}: tmax below tmin")
    return replace(
        day,
        dewpoint=dew_point(day.vp),
        rh=relative_humidity(day.vp, day.tmax, day.tmin),
        gdd=growing_degree_days(day.tmax, day.tmin),
    )


def window_means(daily: np.ndarray, window: int = WINDOW_DAYS, target_len: int = SERIES_LENGTH) -> np.ndarray:
    """Non-overlapping window means of a ``(days, channels)`` array, as ``(channels, target_len)``.

    The last window may be partial. Short seasons are right-padded with each
    channel's mean over its observed windows; long ones are truncated.
    """
    daily = np.asarray(daily, dtype=np.float64)
    if daily.ndim == 1:
        daily = daily[:, None]
    n_days = daily.shape[0]
    if n_days == 0:
        raise DataError("cannot window an empty weather sequence")
    starts = np.arange(0, n_days, window)
    sums = np.add.reduceat(daily, starts, axis=0)
    counts = np.diff(np.append(starts, n_days))[:, None]
    means = (sums / counts)[:target_len]
    if means.shape[0] < target_len:
        pad = np.repeat(means.mean(axis=0, keepdims=True), target_len - means.shape[0], axis=0)
        means = np.vstack([means, pad])
    return means.T.copy()


def window_and_pad(day: DailyWeather, window: int = WINDOW_DAYS, target_len: int = SERIES_LENGTH) -> WeatherSeries:
    if not day.derived:
        day = derive_weather(day)
    return WeatherSeries(day.env_id, window_means(day.matrix(), window, target_len))


# ---------------------------------------------------------------------------
# standard scaling
# ---------------------------------------------------------------------------


@dataclass
class StandardScaler:
    names: list[str]
    mean: np.ndarray
    std: np.ndarray
    fit_set_id: str
    constant: np.ndarray  # bool flags for zero-variance features

    def transform(self, rows, fit_set_id: str | None = None) -> np.ndarray:
        if fit_set_id is not None and fit_set_id != self.fit_set_id:
            raise DataError(f"scaler was fit on {self.fit_set_id!r}, not {fit_set_id!r}")
        rows = np.asarray(rows, dtype=np.float64)
        if rows.shape[-1] != len(self.mean):
            raise DataError(f"expected {len(self.mean)} features, got {rows.shape[-1]}")
        return (rows - self.mean) / self.std

    def inverse_transform(self, rows) -> np.ndarray:
        return np.asarray(rows, dtype=np.float64) * self.std + self.mean

    def to_dict(self) -> dict:
        return {
            "names": list(self.names),
            "mean": [float(x) for x in self.mean],
            "std": [float(x) for x in self.std],
            "fit_set_id": self.fit_set_id,
            "constant": [bool(x) for x in self.constant],
        }

    @classmethod
    def from_dict(cls, d) -> "StandardScaler":
        return cls(list(d["names"]), np.array(d["mean"], dtype=np.float64),
                   np.array(d["std"], dtype=np.float64), d["fit_set_id"],
                   np.array(d["constant"], dtype=bool))

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True)

    @classmethod
    def from_json(cls, text) -> "StandardScaler":
        return cls.from_dict(json.loads(text))


def fit_scaler(rows, names=None, fit_set_id: str = "train") -> StandardScaler:
    """Per-column mean and population std over ``rows`` (shape ``(n, features)``)."""
    rows = np.asarray(rows, dtype=np.float64)
    if rows.ndim == 1:
        rows = rows[:, None]
    if rows.shape[0] == 0:
        raise DataError("cannot fit a scaler on an empty set")
    mean = rows.mean(axis=0)
    std = rows.std(axis=0)
    constant = ~(std > 1e-12 * np.maximum(1.0, np.abs(mean)))
    std = np.where(constant, 1.0, std)
    if names is None:
        names = [f"f{i}" for i in range(rows.shape[1])]
    return StandardScaler(list(names), mean, std, fit_set_id, constant)


def apply_scaler(scaler: StandardScaler, rows, fit_set_id: str | None = None) -> np.ndarray:
    return scaler.transform(rows, fit_set_id)
