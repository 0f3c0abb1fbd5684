"""Multi-modal yield network.

Branches: a shared-kernel CNN over each SNP's one-hot context (plus its
positional code), a CNN over the weather channels, per-SNP cross-attention
from SNP embeddings onto the weather sequence, MLPs for soil and management
features, and a fusion MLP over the concatenated embeddings.
"""

from __future__ import annotations

import hashlib
import json
import math
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

import numpy as np

from . import numcore as nc
from .encode import POSITION_SCALE, positional_codes
from .errors import ConfigError, DataError
from .ingest import SnpDescriptor

VARIANTS = ("full", "no_ge", "no_g")
CHECKPOINT_FORMAT = "g2p-checkpoint"
CHECKPOINT_VERSION = 1


@dataclass(frozen=True)
class ModelConfig:
    n_snps: int = 100
    context_width: int = 2
    kernel_sizes: tuple = (2, 3, 4)
    filters: int = 16
    weather_channels: int = 9
    weather_len: int = 43
    weather_conv: tuple = (32, 64)
    weather_kernel: int = 3
    soil_features: int = 19
    soil_hidden: tuple = (32, 16)
    mgmt_features: int = 5
    mgmt_hidden: tuple = (16, 8)
    fusion_hidden: tuple = (128, 32)
    dropout: float = 0.2
    position_scale: float = POSITION_SCALE
    no_ge: bool = False
    no_g: bool = False

    def __post_init__(self):
        for name in ("kernel_sizes", "weather_conv", "soil_hidden", "mgmt_hidden", "fusion_hidden"):
            object.__setattr__(self, name, tuple(int(v) for v in getattr(self, name)))
        self.validate()

    @property
    def d(self) -> int:
        """SNP embedding width (one block of filters per kernel length)."""
        return len(self.kernel_sizes) * self.filters

    @property
    def d_w(self) -> int:
        return self.weather_conv[-1]

    @property
    def context_len(self) -> int:
        return 2 * self.context_width + 1

    @property
    def weather_steps(self) -> int:
        """Length of the weather embedding sequence after the valid convolutions."""
        return self.weather_len - len(self.weather_conv) * (self.weather_kernel - 1)

    @property
    def variant(self) -> str:
        if self.no_g:
            return "no_g"
        return "no_ge" if self.no_ge else "full"

    def with_variant(self, variant: str) -> "ModelConfig":
        if variant not in VARIANTS:
            raise ConfigError(f"unknown variant {variant!r}; expected one of {VARIANTS}")
        return replace(self, no_ge=variant != "full", no_g=variant == "no_g")

    def validate(self) -> None:
        ints = [self.n_snps, self.filters, self.weather_channels, self.weather_len,
                self.weather_kernel, self.soil_features, self.mgmt_features,
                *self.kernel_sizes, *self.weather_conv, *self.soil_hidden,
                *self.mgmt_hidden, *self.fusion_hidden]
        if any(v <= 0 for v in ints) or not self.kernel_sizes or not self.weather_conv:
            raise ConfigError("all model widths and counts must be positive")
        if self.context_width < 0:
            raise ConfigError("context_width must be >= 0")
        if max(self.kernel_sizes) > self.context_len:
            raise ConfigError(f"kernel length {max(self.kernel_sizes)} exceeds context {self.context_len}")
        if self.weather_steps < 1:
            raise ConfigError("weather series too short for the convolution stack")
        if self.d % 2:
            raise ConfigError(f"SNP embedding width {self.d} must be even for positional codes")
        if not 0.0 <= self.dropout < 1.0:
            raise ConfigError("dropout must lie in [0, 1)")

    def to_dict(self) -> dict:
        d = asdict(self)
        return {k: list(v) if isinstance(v, tuple) else v for k, v in d.items()}

    @classmethod
    def from_dict(cls, d) -> "ModelConfig":
        known = {f for f in cls.__dataclass_fields__}
        extra = set(d) - known
        if extra:
            raise ConfigError(f"unknown model config fields: {sorted(extra)}")
        return cls(**d)

    def hash(self) -> str:
        return hashlib.sha256(json.dumps(self.to_dict(), sort_keys=True).encode()).hexdigest()[:16]


# ---------------------------------------------------------------------------
# parameters
# ---------------------------------------------------------------------------


def _mlp_shapes(prefix, n_in, widths):
    shapes = {}
    for i, w in enumerate(widths):
        shapes[f"{prefix}.fc{i}.w"] = (w, n_in)
        shapes[f"{prefix}.fc{i}.b"] = (w,)
        n_in = w
    return shapes, n_in


def param_shapes(cfg: ModelConfig) -> dict[str, tuple]:
    shapes: dict[str, tuple] = {}
    c_in = cfg.weather_channels
    for i, c_out in enumerate(cfg.weather_conv):
        shapes[f"weather.conv{i}.w"] = (c_out, c_in, cfg.weather_kernel)
        shapes[f"weather.conv{i}.b"] = (c_out,)
        c_in = c_out
    fused = cfg.d_w
    if not cfg.no_g:
        for k in cfg.kernel_sizes:
            shapes[f"genome.conv{k}.w"] = (cfg.filters, 4, k)
            shapes[f"genome.conv{k}.b"] = (cfg.filters,)
        if not cfg.no_ge:
            shapes["attn.key"] = (cfg.d, cfg.d_w)
            shapes["attn.out.w"] = (cfg.d, cfg.d_w)
            shapes["attn.out.b"] = (cfg.d,)
        fused += cfg.d
    soil, n_soil = _mlp_shapes("soil", cfg.soil_features, cfg.soil_hidden)
    mgmt, n_mgmt = _mlp_shapes("mgmt", cfg.mgmt_features, cfg.mgmt_hidden)
    shapes.update(soil)
    shapes.update(mgmt)
    fused += n_soil + n_mgmt
    fusion, n_last = _mlp_shapes("fusion", fused, cfg.fusion_hidden)
    shapes.update(fusion)
    shapes["fusion.out.w"] = (1, n_last)
    shapes["fusion.out.b"] = (1,)
    return shapes


def init_params(cfg: ModelConfig, rng: np.random.Generator) -> dict[str, np.ndarray]:
    """He-uniform weights (bound ``sqrt(6 / fan_in)``), zero biases.

    Each tensor draws from its own stream keyed by name, so the variants
    share identical values for the parameters they have in common. The
    attention output projection starts at zero: at initialisation the full
    model computes exactly the ``no_ge`` function and learns the G*E term
    from there.
    """
    base = int(rng.integers(2**63))
    params = {}
    for name, shape in param_shapes(cfg).items():
        if len(shape) == 1 or name == "attn.out.w":
            params[name] = np.zeros(shape)
        else:
            fan_in = int(np.prod(shape[1:]))
            bound = math.sqrt(6.0 / fan_in)
            params[name] = nc.rng_stream(base, f"param/{name}").uniform(-bound, bound, size=shape)
    return params


def check_params(cfg: ModelConfig, params: dict) -> None:
    expected = param_shapes(cfg)
    if set(expected) != set(params):
        missing, extra = set(expected) - set(params), set(params) - set(expected)
        raise DataError(f"parameter set mismatch: missing {sorted(missing)}, unexpected {sorted(extra)}")
    for name, shape in expected.items():
        if tuple(params[name].shape) != shape:
            raise DataError(f"parameter {name} has shape {params[name].shape}, expected {shape}")


# ---------------------------------------------------------------------------
# forward pass
# ---------------------------------------------------------------------------


@dataclass
class Batch:
    """Model inputs for ``B`` observations.

    ``snps`` is ``(B, S, 4, 2w+1)`` (ignored by the ``no_g`` variant) and is
    aligned with ``descriptors``; ``weather`` is ``(B, channels, length)``.
    """

    snps: np.ndarray | None
    descriptors: list[SnpDescriptor]
    weather: np.ndarray
    soil: np.ndarray
    mgmt: np.ndarray
    pos_codes: np.ndarray | None = None

    def __len__(self):
        return self.weather.shape[0]


@dataclass
class ForwardResult:
    predictions: np.ndarray
    record: nc.Record
    output: nc.Node
    attention: np.ndarray | None = None  # (B, S, T') in the batch's SNP order
    layers: dict = field(default_factory=dict)


def canonical_snp_order(descriptors) -> np.ndarray:
    """Order SNPs by (chromosome, position, id).

    Running every SNP-indexed computation in this order makes predictions
    bitwise independent of the order the caller supplies, which BLAS row
    blocking would otherwise not guarantee.
    """
    return np.array(sorted(range(len(descriptors)),
                           key=lambda i: (descriptors[i].chrom, descriptors[i].pos, descriptors[i].id)),
                    dtype=int)


def unique_rows(arr: np.ndarray):
    """Distinct leading-axis slices of ``arr`` and the inverse index."""
    arr = np.ascontiguousarray(arr, dtype=np.float64)
    n = arr.shape[0]
    flat = arr.reshape(n, -1)
    keys = flat.view(np.dtype((np.void, flat.dtype.itemsize * flat.shape[1]))).ravel()
    _, first, inverse = np.unique(keys, return_index=True, return_inverse=True)
    return arr[first], inverse.reshape(-1)


def _mlp(rec, P, prefix, h, n_layers):
    for i in range(n_layers):
        with rec.scope(f"{prefix}.fc{i}"):
            h = nc.relu(nc.dense(h, P[f"{prefix}.fc{i}.w"], P[f"{prefix}.fc{i}.b"]))
    return h


def _check_batch(cfg: ModelConfig, batch: Batch) -> None:
    B = len(batch)
    if batch.weather.shape != (B, cfg.weather_channels, cfg.weather_len):
        raise DataError(f"weather batch shape {batch.weather.shape} != "
                        f"({B}, {cfg.weather_channels}, {cfg.weather_len})")
    if batch.soil.shape != (B, cfg.soil_features) or batch.mgmt.shape != (B, cfg.mgmt_features):
        raise DataError("soil/management batch shapes do not match the config")
    if not cfg.no_g:
        expected = (B, len(batch.descriptors), 4, cfg.context_len)
        if batch.snps is None or batch.snps.shape != expected:
            got = None if batch.snps is None else batch.snps.shape
            raise DataError(f"snp batch shape {got} != {expected}")
        if len(batch.descriptors) != cfg.n_snps:
            raise DataError(f"expected {cfg.n_snps} SNPs, got {len(batch.descriptors)}")


def model_forward(params: dict, batch: Batch, cfg: ModelConfig, training: bool = False,
                  rng: np.random.Generator | None = None, check_finite: bool = True) -> ForwardResult:
    """Predict one scalar per observation; returns the tape for backward."""
    _check_batch(cfg, batch)
    rec = nc.Record(check_finite=check_finite)
    P = {name: rec.param(name, value) for name, value in params.items()}
    layers = {}

    with rec.scope("weather"):
        # observations from one environment share a series; convolve each once
        uniq, inverse_env = unique_rows(batch.weather)
        h = rec.constant(uniq)
        for i in range(len(cfg.weather_conv)):
            with rec.scope(f"conv{i}"):
                h = nc.relu(nc.conv1d_valid(h, P[f"weather.conv{i}.w"], P[f"weather.conv{i}.b"]))
        seq_u = nc.transpose(h, (0, 2, 1))  # (U, T', d_w)
        pooled, _ = nc.maxpool_over_time(h)
        weather_vec = nc.take(pooled, inverse_env, axis=0)
        weather_seq = nc.take(seq_u, inverse_env, axis=0)  # (B, T', d_w)
    layers["weather_seq"] = weather_seq
    parts = []
    attention = None

    if not cfg.no_g:
        order = canonical_snp_order(batch.descriptors)
        codes = batch.pos_codes
        if codes is None:
            codes = positional_codes(batch.descriptors, cfg.d, cfg.position_scale)
        codes = np.asarray(codes)[order]
        snps = np.asarray(batch.snps)[:, order]
        B, S = snps.shape[:2]
        with rec.scope("genome"):
            # a SNP takes only a few distinct genotype columns within a batch
            uniq, inverse = unique_rows(snps.reshape(B * S, 4, cfg.context_len))
            x = rec.constant(uniq)
            feats = []
            for k in cfg.kernel_sizes:
                with rec.scope(f"conv{k}"):
                    c = nc.relu(nc.conv1d_valid(x, P[f"genome.conv{k}.w"], P[f"genome.conv{k}.b"]))
                    m, _ = nc.maxpool_over_time(c)
                    feats.append(m)
            emb = nc.take(nc.concat(feats, axis=-1), inverse, axis=0)
            emb = nc.reshape(emb, (B, S, cfg.d))
            emb = nc.add(emb, codes)
        layers["snp_embedding"] = emb
        if not cfg.no_ge:
            with rec.scope("attention"):
                # keys depend only on the environment: project each distinct series once
                keys = nc.take(nc.dense(seq_u, P["attn.key"]), inverse_env, axis=0)  # (B, T', d)
                scores = nc.scale(nc.matmul(emb, nc.transpose(keys, (0, 2, 1))), 1.0 / math.sqrt(cfg.d))
                attn_weights = nc.softmax(scores, axis=-1)
                context = nc.matmul(attn_weights, weather_seq)  # (B, S, d_w)
                ge = nc.dense(context, P["attn.out.w"], P["attn.out.b"])
                emb = nc.add(emb, ge)
            inverse = np.argsort(order)
            attention = attn_weights.value[:, inverse]
            layers["attention_context"] = context
        with rec.scope("genome_pool"):
            genome_vec, _ = nc.max_over(emb, axis=1)
        parts.append(genome_vec)

    parts.append(weather_vec)
    parts.append(_mlp(rec, P, "soil", rec.constant(batch.soil), len(cfg.soil_hidden)))
    parts.append(_mlp(rec, P, "mgmt", rec.constant(batch.mgmt), len(cfg.mgmt_hidden)))

    with rec.scope("fusion"):
        z = nc.concat(parts, axis=-1)
        for i in range(len(cfg.fusion_hidden)):
            with rec.scope(f"fc{i}"):
                z = nc.relu(nc.dense(z, P[f"fusion.fc{i}.w"], P[f"fusion.fc{i}.b"]))
                z = nc.dropout(z, cfg.dropout, rng, training)
        with rec.scope("out"):
            out = nc.reshape(nc.dense(z, P["fusion.out.w"], P["fusion.out.b"]), (len(batch),))
    return ForwardResult(out.value.copy(), rec, out, attention, layers)


def cross_attention(query: np.ndarray, seq: np.ndarray, key: np.ndarray, out_w: np.ndarray,
                    out_b: np.ndarray):
    """Single-query attention onto a context sequence.

    ``query`` is ``(d,)``, ``seq`` is ``(T, d_w)``. Returns ``(ge_embedding,
    weights, context)`` where ``context = sum_t weights[t] * seq[t]``.
    """
    seq = np.asarray(seq, dtype=np.float64)
    if seq.ndim != 2 or seq.shape[0] == 0:
        raise DataError("cross_attention needs a non-empty (T, d_w) sequence")
    query = np.asarray(query, dtype=np.float64)
    scores = (seq @ key.T) @ query / math.sqrt(query.shape[0])
    weights = nc.softmax_array(scores)
    context = weights @ seq
    return out_w @ context + out_b, weights, context


# ---------------------------------------------------------------------------
# checkpoints and attention export
# ---------------------------------------------------------------------------


def save_checkpoint(path, params: dict, cfg: ModelConfig, **extra) -> None:
    doc = {
        "format": CHECKPOINT_FORMAT,
        "version": CHECKPOINT_VERSION,
        "config": cfg.to_dict(),
        "config_hash": cfg.hash(),
        "params": {k: {"shape": list(v.shape), "data": [float(x) for x in v.ravel()]}
                   for k, v in params.items()},
    }
    doc.update(extra)
    Path(path).write_text(json.dumps(doc))


def load_checkpoint(path):
    """Returns ``(params, config, document)``."""
    try:
        doc = json.loads(Path(path).read_text())
    except (OSError, json.JSONDecodeError) as exc:
        raise DataError(f"cannot read checkpoint {path}: {exc}") from None
    if doc.get("format") != CHECKPOINT_FORMAT or doc.get("version") != CHECKPOINT_VERSION:
        raise DataError(f"{path}: not a version {CHECKPOINT_VERSION} checkpoint")
    cfg = ModelConfig.from_dict(doc["config"])
    if cfg.hash() != doc.get("config_hash"):
        raise DataError(f"{path}: config hash mismatch")
    params = {k: np.array(v["data"], dtype=np.float64).reshape(v["shape"]) for k, v in doc["params"].items()}
    check_params(cfg, params)
    return params, cfg, doc


def write_attention_csv(path, weights: np.ndarray, snp_ids) -> None:
    """One row per SNP, one column per weather step."""
    weights = np.asarray(weights)
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("snp_id," + ",".join(f"t{j}" for j in range(weights.shape[1])) + "\n")
        for sid, row in zip(snp_ids, weights):
            fh.write(sid + "," + ",".join(repr(float(v)) for v in row) + "\n")


def write_attention_svg(path, weights: np.ndarray, snp_ids, cell: int = 8) -> None:
    weights = np.asarray(weights)
    S, T = weights.shape
    top = float(weights.max()) or 1.0
    label_w = 8 * max((len(s) for s in snp_ids), default=1)
    parts = [f'<svg xmlns="http://www.w3.org/2000/svg" width="{label_w + T * cell}" height="{S * cell}">']
    for i, sid in enumerate(snp_ids):
        parts.append(f'<text x="0" y="{(i + 1) * cell - 1}" font-size="{cell}">{sid}</text>')
        for j in range(T):
            shade = int(255 * (1.0 - weights[i, j] / top))
            parts.append(f'<rect x="{label_w + j * cell}" y="{i * cell}" width="{cell}" height="{cell}" '
                         f'fill="rgb(255,{shade},{shade})"/>')
    parts.append("</svg>")
    Path(path).write_text("\n".join(parts))
