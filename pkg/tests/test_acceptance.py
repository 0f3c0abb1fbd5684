"""Acceptance gate: one test per criterion, each recording a pass/fail line.

Run ``pytest tests/test_acceptance.py -v``; the per-criterion summary is
printed at the end of the session by ``conftest.pytest_terminal_summary``.
"""

import math
import time

import numpy as np
import pytest

from conftest import ACCEPTANCE, max_rel_error
from g2p import numcore as nc
from g2p.encode import ENCODABLE, build_context_matrix, encode_letter, encode_table
from g2p.ingest import DailyWeather, SnpDescriptor, dew_point, derive_weather, growing_degree_days, window_and_pad
from g2p.model import Batch, ModelConfig, cross_attention, init_params, model_forward, param_shapes
from g2p.selection import GbdtConfig, fit_gbdt, mutual_information, select_snps
from g2p.splits import make_split
from g2p.synth import SynthConfig, generate
from g2p.traineval import CVConfig, SelectionConfig, TrainSchedule, cross_validate, hybrid_vectors, plan_for


def record(number, ok, detail):
    ACCEPTANCE[number] = (bool(ok), detail)
    assert ok, f"criterion {number}: {detail}"


# ---------------------------------------------------------------------------
# 1. analytic gradients against central differences
# ---------------------------------------------------------------------------


def test_c01_gradient_check():
    start = time.perf_counter()
    rng = np.random.default_rng(1)
    cfg = ModelConfig(n_snps=5, context_width=2, weather_len=8, filters=4, weather_conv=(6, 6),
                      soil_hidden=(6,), mgmt_hidden=(4,), fusion_hidden=(10, 8), dropout=0.2)
    params = init_params(cfg, rng)
    for name in params:
        # biases and the attention projection start at zero; perturb them so every path is exercised
        if name.endswith(".b") or name == "attn.out.w":
            params[name] = rng.normal(scale=0.1, size=params[name].shape)
    snps = [SnpDescriptor(f"s{i}", int(rng.integers(1, 11)), int(rng.integers(1, 10**7)), "ACGTA")
            for i in range(5)]
    batch = Batch(rng.random((4, 5, 4, 5)), snps, rng.normal(size=(4, 9, 8)), rng.normal(size=(4, 19)),
                  rng.normal(size=(4, 5)))
    target = rng.normal(size=4)

    def forward(p):
        # a fixed dropout mask: the stream is re-created for every evaluation
        return model_forward(p, batch, cfg, training=True, rng=nc.rng_stream(0, "gradcheck"))

    res = forward(params)
    grads = res.record.backward(nc.mse_loss(res.output, target))

    def loss():
        return float(np.mean((forward(params).predictions - target) ** 2))

    h = 1e-5
    worst, worst_name = 0.0, ""
    for name, arr in params.items():
        numeric = np.zeros_like(arr)
        for i in np.ndindex(arr.shape):
            old = arr[i]
            arr[i] = old + h
            up = loss()
            arr[i] = old - h
            down = loss()
            arr[i] = old
            numeric[i] = (up - down) / (2 * h)
        err = max_rel_error(grads[name], numeric)
        if err > worst:
            worst, worst_name = err, name
    elapsed = time.perf_counter() - start
    n = sum(int(np.prod(s)) for s in param_shapes(cfg).values())
    record(1, worst <= 1e-4 and elapsed < 60.0,
           f"{n} parameters, max rel error {worst:.2e} ({worst_name}), {elapsed:.1f}s")


# ---------------------------------------------------------------------------
# 2. encoding
# ---------------------------------------------------------------------------


def test_c02_encoding():
    problems = []
    for letter in ENCODABLE:
        v = encode_letter(letter)
        if v.shape != (4,) or v.sum() != 1.0 or np.any(v < 0):
            problems.append(letter)
    k_ok = np.array_equal(encode_letter("K"), np.array([0.0, 0.0, 0.5, 0.5]))
    mat = build_context_matrix(SnpDescriptor("s", 1, 1, "GATTC"), "K", width=2)
    cols_ok = np.array_equal(mat.sum(axis=0), np.ones(5))
    record(2, len(ENCODABLE) == 10 and not problems and k_ok and mat.shape == (4, 5) and cols_ok,
           f"{len(ENCODABLE)} letters column-stochastic, K exact={k_ok}, context shape {mat.shape}")


# ---------------------------------------------------------------------------
# 3. attention invariants
# ---------------------------------------------------------------------------


def test_c03_attention_invariants():
    rng = np.random.default_rng(3)
    worst_sum, worst_bound, worst_identity, negative = 0.0, 0.0, 0.0, 0
    for _ in range(1000):
        d, d_w, steps = int(rng.integers(2, 17)), int(rng.integers(1, 9)), int(rng.integers(1, 50))
        scale = 10.0 ** rng.uniform(-2, 2)
        query = rng.normal(size=d) * scale
        seq = rng.normal(size=(steps, d_w)) * scale
        key, out_w, out_b = rng.normal(size=(d, d_w)), rng.normal(size=(d, d_w)), rng.normal(size=d)
        ge, weights, context = cross_attention(query, seq, key, out_w, out_b)
        worst_sum = max(worst_sum, abs(weights.sum() - 1.0))
        negative += int(np.any(weights < 0))
        over = np.maximum(context - seq.max(0), 0) + np.maximum(seq.min(0) - context, 0)
        worst_bound = max(worst_bound, float(over.max()))
        single = cross_attention(query, seq[:1], key, out_w, out_b)
        worst_identity = max(worst_identity, float(np.abs(single[2] - seq[0]).max()),
                             float(np.abs(single[0] - (out_w @ seq[0] + out_b)).max()))
    record(3, worst_sum <= 1e-9 and negative == 0 and worst_bound <= 1e-9 and worst_identity == 0.0,
           f"1000 instances: max |sum-1| {worst_sum:.1e}, negatives {negative}, "
           f"hull violation {worst_bound:.1e}, single-step deviation {worst_identity:.1e}")


# ---------------------------------------------------------------------------
# 4. SNP permutation invariance
# ---------------------------------------------------------------------------


def test_c04_permutation_invariance():
    ds, _ = generate(SynthConfig(n_hybrids=16, n_envs=4, n_snps=100, n_causal=5, seed=4))
    cfg = ModelConfig()
    params = init_params(cfg, nc.rng_stream(4, "perm"))
    rng = np.random.default_rng(4)
    params["attn.out.w"] = rng.normal(scale=0.1, size=params["attn.out.w"].shape)
    enc = encode_table(ds.genotypes)
    envs = sorted(ds.weather)
    weather = np.stack([window_and_pad(ds.weather[envs[i % 4]]).values for i in range(16)])
    batch = Batch(enc, ds.genotypes.snps, weather, rng.normal(size=(16, 19)), rng.normal(size=(16, 5)))
    base = model_forward(params, batch, cfg).predictions
    identical = 0
    for _ in range(10):
        perm = rng.permutation(100)
        shuffled = Batch(enc[:, perm], [ds.genotypes.snps[j] for j in perm], weather, batch.soil, batch.mgmt)
        identical += int(np.array_equal(model_forward(params, shuffled, cfg).predictions, base))
    record(4, identical == 10, f"{identical}/10 random SNP permutations bitwise identical")


# ---------------------------------------------------------------------------
# 5. mutual information oracle
# ---------------------------------------------------------------------------


def analytic_mi(joint):
    joint = np.asarray(joint, dtype=np.float64)
    px, py = joint.sum(1, keepdims=True), joint.sum(0, keepdims=True)
    nz = joint > 0
    return float(np.sum(joint[nz] * np.log(joint[nz] / (px @ py)[nz])))


def sample_joint(joint, n, rng):
    joint = np.asarray(joint, dtype=np.float64)
    cells = rng.choice(joint.size, size=n, p=joint.ravel())
    return np.divmod(cells, joint.shape[1])


def test_c05_mi_oracle():
    cases = {
        "balanced binary copy": [[0.5, 0.0], [0.0, 0.5]],
        "independent 3x4": np.outer([0.2, 0.3, 0.5], [0.1, 0.2, 0.3, 0.4]),
        "dosage vs 3-level": [[0.30, 0.05, 0.05], [0.05, 0.25, 0.05], [0.02, 0.03, 0.20]],
    }
    rng = np.random.default_rng(5)
    errors = {}
    for name, joint in cases.items():
        x, y = sample_joint(joint, 100_000, rng)
        errors[name] = abs(mutual_information(x, y.astype(np.float64)) - analytic_mi(joint))
    assert analytic_mi(cases["balanced binary copy"]) == pytest.approx(math.log(2))
    record(5, max(errors.values()) <= 1e-3,
           "n=1e5, |error| " + ", ".join(f"{k}: {v:.1e}" for k, v in errors.items()))


# ---------------------------------------------------------------------------
# 6. boosted trees
# ---------------------------------------------------------------------------


def test_c06_gbdt_sanity():
    rng = np.random.default_rng(6)
    x = rng.uniform(-3, 3, size=(1000, 1))
    y = np.sin(x[:, 0]) + 0.5 * x[:, 0]
    model = fit_gbdt(x, y, GbdtConfig(n_trees=100))
    monotone = bool(np.all(np.diff(model.train_loss) <= 0))
    r2 = 1 - np.mean((y - model.predict(x)) ** 2) / np.var(y)

    X = rng.integers(0, 3, size=(1000, 30)).astype(np.float64)
    y2 = 2.0 * X[:, 11] + 0.3 * rng.normal(size=1000)
    planted = fit_gbdt(X, y2, GbdtConfig(n_trees=50))
    top = int(np.argmax(planted.gain_importance))
    monotone = monotone and bool(np.all(np.diff(planted.train_loss) <= 0))
    record(6, monotone and r2 >= 0.99 and top == 11,
           f"loss monotone={monotone}, single-feature R2 {r2:.4f}, top gain feature {top} (planted 11)")


# ---------------------------------------------------------------------------
# 7. selection recovers causal SNPs
# ---------------------------------------------------------------------------

SELECTION_HYBRIDS = 1000


def test_c07_selection_recovery():
    fractions = []
    for seed in range(5):
        ds, gt = generate(SynthConfig(n_hybrids=SELECTION_HYBRIDS, n_envs=1, n_snps=2000, n_causal=20,
                                      gamma_scale=0.0, target_r2=0.8, seed=seed))
        report = select_snps(ds.genotypes, ds.phenotypes, rfe_target=500, top_k=100)
        fractions.append(len(set(report.selected) & set(gt.beta)) / 20)
    mean = float(np.mean(fractions))
    record(7, mean >= 0.8, f"2000->500->100, causal retained per seed {fractions}, mean {mean:.2f}")


# ---------------------------------------------------------------------------
# 8. the attention block captures planted G*E
# ---------------------------------------------------------------------------

GE_DATA = dict(n_hybrids=500, n_envs=20, n_snps=100, n_causal=10, delta_scale=3.0, beta_scale=0.5,
               gamma_scale=0.3, noise=0.1, summary_window=43, allele_freq=(0.6, 0.9), obs_fraction=0.2)
GE_SCHEDULE = TrainSchedule(batch_size=64, max_epochs=60, patience=20, lr=5e-3)


def mean_val_rmse(n_interactions, variant, seeds):
    out = []
    for seed in seeds:
        ds, _ = generate(SynthConfig(**GE_DATA, n_interactions=n_interactions, seed=seed))
        plan = plan_for(ds, "environment", seed)
        cfg = CVConfig(model=ModelConfig().with_variant(variant), schedule=GE_SCHEDULE, seed=seed)
        out.append(cross_validate(ds, plan, cfg, folds=[0]).folds[0].val_rmse)
    return out


@pytest.mark.slow
def test_c08_ge_mechanism():
    start = time.perf_counter()
    seeds = range(5)
    ge_full, ge_plain = mean_val_rmse(3, "full", seeds), mean_val_rmse(3, "no_ge", seeds)
    flat_full, flat_plain = mean_val_rmse(0, "full", seeds), mean_val_rmse(0, "no_ge", seeds)
    elapsed = time.perf_counter() - start
    a, b = float(np.mean(ge_full)), float(np.mean(ge_plain))
    c, d = float(np.mean(flat_full)), float(np.mean(flat_plain))
    gap = abs(c - d) / min(c, d)
    record(8, a < b and gap < 0.05 and elapsed < 1800,
           f"G*E data: full {a:.3f} vs no_ge {b:.3f}; no-interaction data: full {c:.3f} vs no_ge {d:.3f} "
           f"(gap {100 * gap:.1f}%); {elapsed / 60:.1f} min")


# ---------------------------------------------------------------------------
# 9. fold plans
# ---------------------------------------------------------------------------


def test_c09_protocol_invariants():
    envs = [f"LOC{i % 20:02d}_{2014 + i // 20}" for i in range(67)]
    env_ids = np.repeat(envs, 2)
    hyb = np.tile(["H1", "H2"], 67)
    plan = make_split(env_ids, hyb, "environment", seed=9)
    env_ok = plan.n_folds == 10 and sorted(u for g in plan.groups for u in g) == sorted(envs)
    for r in range(10):
        parts = plan.assign(env_ids, hyb, r)
        seen = {k: set(env_ids[v]) for k, v in parts.items()}
        env_ok &= not (seen["train"] & seen["val"] or seen["train"] & seen["test"] or seen["val"] & seen["test"])
        env_ok &= sum(len(v) for v in parts.values()) == len(env_ids)

    ds, _ = generate(SynthConfig(n_hybrids=2000, n_envs=1, n_snps=50, n_causal=0, seed=9))
    hplan = make_split(ds.phenotypes.env_ids, ds.phenotypes.hybrid_ids, "hybrid", seed=9, folds=10, k=100,
                       hybrid_vectors=hybrid_vectors(ds))
    clusters = set(hplan.unit_of.values())
    hyb_ok = len(clusters) == 100 and sorted(u for g in hplan.groups for u in g) == sorted(clusters)
    for r in range(10):
        parts = hplan.assign(ds.phenotypes.env_ids, ds.phenotypes.hybrid_ids, r)
        seen = {k: {hplan.unit_of[h] for h in ds.phenotypes.hybrid_ids[v]} for k, v in parts.items()}
        hyb_ok &= not (seen["train"] & seen["val"] or seen["train"] & seen["test"] or seen["val"] & seen["test"])
    record(9, env_ok and hyb_ok,
           f"67 environments over 10 folds disjoint={env_ok}; 2000 hybrids in {len(clusters)} clusters "
           f"disjoint={hyb_ok}")


# ---------------------------------------------------------------------------
# 10. weather derivation
# ---------------------------------------------------------------------------


def test_c10_weather():
    def f_to_c(f):
        return (f - 32.0) * 5.0 / 9.0

    plain = float(growing_degree_days(f_to_c(86.0), f_to_c(50.0)))
    capped = float(growing_degree_days(f_to_c(100.0), f_to_c(20.0)))
    dew = float(dew_point(611.2))
    shapes = set()
    rng = np.random.default_rng(10)
    for days in (1, 4, 5, 37, 214, 215, 216, 300):
        dates = np.datetime64("2021-04-01") + np.arange(days).astype("timedelta64[D]")
        tmin = rng.uniform(0, 20, days)
        day = DailyWeather("X_2021", dates, rng.uniform(100, 400, days), rng.uniform(300, 2000, days),
                           rng.uniform(0, 5, days), tmin + rng.uniform(1, 12, days), tmin, rng.uniform(0, 6, days))
        shapes.add(window_and_pad(derive_weather(day)).values.shape)
    ds, _ = generate(SynthConfig(n_hybrids=2, n_envs=5, n_snps=2, n_causal=0, seed=10))
    shapes |= {window_and_pad(d).values.shape for d in ds.weather.values()}
    ok = abs(plain - 18.0) < 1e-9 and abs(capped - 18.0) < 1e-9 and abs(dew) <= 0.1 and shapes == {(9, 43)}
    record(10, ok, f"GDD 86/50F {plain:.6f}, capped {capped:.6f}, dew point at 611.2 Pa {dew:+.4f} C, "
                   f"series shapes {sorted(shapes)}")


# ---------------------------------------------------------------------------
# 11. end-to-end determinism
# ---------------------------------------------------------------------------


def test_c11_determinism():
    ds, _ = generate(SynthConfig(n_hybrids=60, n_envs=12, n_snps=40, n_causal=5, n_interactions=1, seed=11))
    cfg = CVConfig(
        model=ModelConfig(filters=4, weather_conv=(8, 8), soil_hidden=(8,), mgmt_hidden=(4,), fusion_hidden=(16,)),
        schedule=TrainSchedule(batch_size=32, max_epochs=3, patience=3, lr=3e-3),
        selection=SelectionConfig(rfe_target=30, top_k=12, gbdt=GbdtConfig(n_trees=20)),
        seed=11,
    )
    plan = plan_for(ds, "environment", 11)
    folds = [0, 3, 6, 9]
    serial = [cross_validate(ds, plan, cfg, folds=folds).to_json() for _ in range(2)]
    parallel = cross_validate(ds, plan, cfg, n_jobs=2, folds=folds).to_json()
    record(11, serial[0] == serial[1] == parallel,
           f"two serial runs identical={serial[0] == serial[1]}, serial vs 2 workers identical={serial[0] == parallel}")
