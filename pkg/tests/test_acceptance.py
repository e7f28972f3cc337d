"""Acceptance suite: one test per release criterion, tolerances pinned.

Criteria 4-7 and 10 exercise trained models from the shared zoo (tests/zoo.py);
the first cold run trains them and caches checkpoints under .zoo/, so expect
roughly half an hour of training on a fresh checkout. Everything else runs in
seconds. Each test states its claim and threshold inline.
"""

import hashlib
import json
import time
from pathlib import Path

import numpy as np
import pytest

import zoo
from diffseg.analysis import (
    TimestepProfile,
    bayes_pixel_mmse,
    derivative_weights,
    ece,
    fingerprint,
    iou,
    profile_mask_error,
    profile_training_loss,
    smooth,
)
from diffseg.autodiff import (
    Tensor,
    avg_pool2x,
    bce_with_logits,
    channel_bias,
    concat,
    conv2d,
    dice_ce_loss,
    elementwise,
    matmul,
    mse_loss,
    nonlinear,
    reduce,
    upsample2x,
)
from diffseg.cli import main
from diffseg.diffusion import TimestepWeights, epsilon_loss, forward_sample, linear_schedule
from diffseg.models import ModelConfig, build_model
from diffseg.training import ensemble_predict
from fd_oracle import gradcheck

# -- criterion 1: gradients --------------------------------------------------------------


def test_c01_gradients_match_finite_differences():
    """Every primitive and a composite denoiser pass agree with central
    differences: max relative error < 1e-4 per primitive, < 1e-3 for the
    composite, all inside one minute."""
    start = time.perf_counter()
    rng = np.random.default_rng(7)
    a23 = rng.standard_normal((2, 3))
    b23 = rng.standard_normal((2, 3)) + 3.0  # keep divisors away from zero
    worst = 0.0

    for kind in ("add", "sub", "mul"):
        worst = max(worst, gradcheck(
            lambda x, y, k=kind: reduce("sum", elementwise(k, x, y) * elementwise(k, x, y)),
            [a23, b23]))
    worst = max(worst, gradcheck(
        lambda x: reduce("sum", elementwise("scale", x, 2.5) * elementwise("scale", x, 2.5)), [a23]))
    worst = max(worst, gradcheck(lambda x, y: reduce("sum", (x / y) * (x / y)), [a23, b23]))
    worst = max(worst, gradcheck(
        lambda x, y: reduce("sum", matmul(x, y) * matmul(x, y)),
        [rng.standard_normal((3, 4)), rng.standard_normal((4, 2))]))
    img = rng.standard_normal((2, 2, 6, 6))
    ker = rng.standard_normal((3, 2, 3, 3))
    worst = max(worst, gradcheck(
        lambda x, k: reduce("sum", conv2d(x, k, stride=1, pad=1) * conv2d(x, k, stride=1, pad=1)), [img, ker]))
    img7 = rng.standard_normal((2, 2, 7, 7))
    worst = max(worst, gradcheck(
        lambda x, k: reduce("sum", conv2d(x, k, stride=2, pad=1) * conv2d(x, k, stride=2, pad=1)), [img7, ker]))
    for kind in ("relu", "silu", "sigmoid"):
        worst = max(worst, gradcheck(
            lambda x, k=kind: reduce("sum", nonlinear(k, x) * nonlinear(k, x)),
            [rng.standard_normal((4, 5)) + 0.3]))  # offset keeps relu off its kink
    worst = max(worst, gradcheck(
        lambda x: reduce("sum", reduce("mean", x * x, axes=(1,))), [rng.standard_normal((3, 4))]))
    worst = max(worst, gradcheck(
        lambda x, y: reduce("sum", concat([x, y], axis=1) * concat([x, y], axis=1)),
        [rng.standard_normal((2, 2, 3, 3)), rng.standard_normal((2, 1, 3, 3))]))
    worst = max(worst, gradcheck(
        lambda x, b: reduce("sum", channel_bias(x, b) * channel_bias(x, b)),
        [rng.standard_normal((2, 3, 4, 4)), rng.standard_normal(3)]))
    worst = max(worst, gradcheck(
        lambda x: reduce("sum", avg_pool2x(x) * avg_pool2x(x)), [rng.standard_normal((2, 2, 4, 4))]))
    worst = max(worst, gradcheck(
        lambda x: reduce("sum", upsample2x(x) * upsample2x(x)), [rng.standard_normal((2, 2, 3, 3))]))
    worst = max(worst, gradcheck(
        lambda x: reduce("sum", x.reshape(6, 4) * x.reshape(6, 4)), [rng.standard_normal((2, 3, 4))]))
    mse_target = rng.standard_normal((3, 3))
    worst = max(worst, gradcheck(
        lambda p: mse_loss(p, mse_target), [rng.standard_normal((3, 3))]))
    worst = max(worst, gradcheck(
        lambda lg: bce_with_logits(lg, Tensor(np.array([[1.0, 0.0], [0.0, 1.0]]))),
        [rng.standard_normal((2, 2))]))
    mask = (rng.uniform(size=(1, 1, 4, 4)) > 0.5).astype(float)
    worst = max(worst, gradcheck(
        lambda lg: dice_ce_loss(lg, mask), [rng.standard_normal((1, 1, 4, 4))]))
    assert worst < 1e-4, f"primitive gradient error {worst:.2e}"

    # composite: a full conditional denoiser forward through the training loss,
    # finite differences on a sample of parameter coordinates
    cfg = ModelConfig(variant="concat", base_channels=2, depth=1, time_embed_dim=4,
                      image_channels=1, image_size=8, total_timesteps=10)
    model = build_model(cfg, np.random.default_rng(0))
    model.predicts = "eps"
    sched = linear_schedule(10, 1e-2, 0.2)
    x0 = np.sign(rng.standard_normal((2, 1, 8, 8)))
    eps = rng.standard_normal((2, 1, 8, 8))
    y = rng.uniform(size=(2, 1, 8, 8))

    def loss_value():
        return epsilon_loss(model, x0, 4, eps, sched, y=y).item()

    loss = epsilon_loss(model, x0, 4, eps, sched, y=y)
    loss.backward()
    params = model.parameters()
    coord_rng = np.random.default_rng(1)
    h = 1e-5
    comp_worst = 0.0
    for _ in range(24):
        p = params[coord_rng.integers(len(params))]
        idx = np.unravel_index(coord_rng.integers(p.data.size), p.data.shape)
        keep = p.data[idx]
        p.data[idx] = keep + h
        fp = loss_value()
        p.data[idx] = keep - h
        fm = loss_value()
        p.data[idx] = keep
        num = (fp - fm) / (2.0 * h)
        comp_worst = max(comp_worst, abs(p.grad[idx] - num) / max(abs(num), 1e-8))
    elapsed = time.perf_counter() - start
    assert comp_worst < 1e-3, f"composite gradient error {comp_worst:.2e}"
    assert elapsed < 60.0, f"gradient checks took {elapsed:.1f}s"
    print(f"\nC1 PASS: primitives {worst:.2e} < 1e-4, composite {comp_worst:.2e} < 1e-3, {elapsed:.1f}s")


# -- criterion 2: forward-process statistics ------------------------------------------------


def test_c02_forward_process_moments():
    """Across five timesteps spanning the schedule, Monte Carlo mean and
    variance of the forward corruption match the closed form within 3
    standard errors over 10^4 draws (seed pinned)."""
    sched = linear_schedule(1000, 1e-4, 0.02)
    n = 10_000
    rng = np.random.default_rng(0)
    x0 = rng.uniform(-1.0, 1.0, (3, 3))
    worst = 0.0
    for t in (1, 250, 500, 750, 1000):
        ab = sched.alpha_bar(t)
        eps = rng.standard_normal((n, 3, 3))
        xt = forward_sample(np.broadcast_to(x0, (n, 3, 3)), t, eps, sched)
        mu = xt.mean(axis=0)
        var = xt.var(axis=0, ddof=1)
        z_mu = np.abs(mu - np.sqrt(ab) * x0) / np.sqrt((1.0 - ab) / n)
        z_var = np.abs(var - (1.0 - ab)) / ((1.0 - ab) * np.sqrt(2.0 / (n - 1)))
        worst = max(worst, float(z_mu.max()), float(z_var.max()))
    assert worst < 3.0, f"worst standardized moment deviation {worst:.2f} >= 3 SE"
    print(f"\nC2 PASS: worst moment deviation {worst:.2f} SE < 3 over 10^4 draws x 5 timesteps")


# -- criterion 3: pixelwise-recovery oracle ---------------------------------------------------


def test_c03_recovery_oracle_consistency():
    """The pixelwise mask-recovery floor is monotone in t, hits its exact
    limits within 1e-3, and agrees with a 10^6-draw Monte Carlo oracle
    within 1% relative."""
    sched = linear_schedule(1000, 1e-4, 0.02)
    p = 0.3
    values = [bayes_pixel_mmse(p, sched, t) for t in range(1, 1001, 25)]
    diffs = np.diff(values)
    assert np.all(diffs >= -1e-12), f"not monotone: min step {diffs.min():.2e}"

    clean = linear_schedule(10, 1e-8, 1e-7)  # alpha_bar ~ 1 everywhere
    assert bayes_pixel_mmse(p, clean, 1) < 1e-3
    noisy = linear_schedule(400, 0.05, 0.3)  # alpha_bar_T below 1e-14
    limit = 4.0 * p * (1.0 - p)
    assert abs(bayes_pixel_mmse(p, noisy, 400) - limit) < 1e-3

    t_mc = 500
    ab = sched.alpha_bar(t_mc)
    s = np.sqrt(ab)
    sigma = np.sqrt(1.0 - ab)
    rng = np.random.default_rng(123)
    n = 1_000_000
    x0 = np.where(rng.uniform(size=n) < p, 1.0, -1.0)
    xt = s * x0 + sigma * rng.standard_normal(n)
    log_ratio = np.log(p / (1.0 - p))
    post_mean = np.tanh(s * xt / (sigma * sigma) + 0.5 * log_ratio)
    mc = np.mean((x0 - post_mean) ** 2)
    quad = bayes_pixel_mmse(p, sched, t_mc)
    rel = abs(quad - mc) / mc
    assert rel < 0.01, f"quadrature vs Monte Carlo relative error {rel:.4f}"
    print(f"\nC3 PASS: monotone, limits within 1e-3, MC agreement {rel * 100:.2f}% < 1%")


# -- criterion 8: metric unit suite ----------------------------------------------------------------


def test_c08_metric_examples_exact():
    """The documented IoU, calibration, smoothing, and weighting examples
    hold exactly, and a size-1 ensemble is certain of itself."""
    full = np.ones((4, 4))
    left = np.zeros((4, 4)); left[:, :2] = 1.0
    right = np.zeros((4, 4)); right[:, 2:] = 1.0
    assert iou(full, full) == 1.0
    assert iou(left, right) == 0.0
    pred = np.zeros((4, 4)); pred[0, :4] = 1.0
    gt = np.zeros((4, 4)); gt[0, 2:] = 1.0; gt[1, :2] = 1.0
    assert abs(iou(pred, gt) - 2.0 / 6.0) < 1e-12

    ones = np.ones(100)
    assert ece(ones, ones).ece == 0.0
    half = np.concatenate([np.ones(50), np.zeros(50)])
    assert abs(ece(ones, half).ece - 0.5) < 1e-12
    p07 = np.full(100, 0.7)
    correct70 = np.concatenate([np.ones(70), np.zeros(30)])
    assert abs(ece(p07, correct70).ece) < 1e-12

    curve = TimestepProfile(np.arange(1, 12), np.linspace(0.2, 1.4, 11))
    assert np.allclose(smooth(curve, 1).values, curve.values)
    const = TimestepProfile(np.arange(1, 12), np.full(11, 0.6))
    assert np.allclose(smooth(const, 5).values, 0.6)
    impulse = TimestepProfile(np.arange(1, 16), np.eye(15)[7])
    assert np.allclose(smooth(impulse, 5).values[5:10], 0.2)

    t = np.arange(1, 41, dtype=float)
    linear = TimestepProfile(t, 0.03 * t)
    w_lin = derivative_weights(linear, floor=0.05)
    assert np.allclose(w_lin.weights, 1.0)
    flat = TimestepProfile(t, np.full(40, 0.8))
    w_flat = derivative_weights(flat, floor=0.05)
    assert np.allclose(w_flat.weights, 1.0)

    cfg = ModelConfig(variant="concat", base_channels=2, depth=1, time_embed_dim=4,
                      image_channels=1, image_size=8, total_timesteps=10)
    model = build_model(cfg, np.random.default_rng(3))
    model.predicts = "logits"
    _, std_map, _ = ensemble_predict(model, np.zeros((8, 8)), 1,
                                     linear_schedule(10, 1e-2, 0.2),
                                     np.random.default_rng(0))
    assert np.array_equal(std_map, np.zeros((8, 8)))
    print("\nC8 PASS: IoU, calibration, smoothing, weighting examples exact; n=1 std map is zero")


# -- criterion 9: manifest replay -------------------------------------------------------------------


def _digest_outputs(run_dir: Path, outputs) -> dict:
    return {rel: hashlib.sha256((run_dir / rel).read_bytes()).hexdigest() for rel in outputs}


def test_c09_manifest_replay_byte_identical(tmp_path):
    """Re-running the command recorded in any run manifest reproduces every
    listed output file byte for byte."""
    data = tmp_path / "data"
    train_out = tmp_path / "train"
    small = ["--base-channels", "4", "--depth", "2", "--time-embed-dim", "8",
             "--timesteps", "20", "--beta-start", "5e-3", "--beta-end", "0.3",
             "--lr", "1e-3", "--batch-size", "6", "--log-interval", "20"]
    assert main(["gen-data", "lesion", "--count", "12", "--size", "16", "--seed", "2",
                 "--out", str(data)]) == 0
    assert main(["train", "e2", "--data", str(data), "--steps", "30", *small,
                 "--out", str(train_out)]) == 0
    ckpt = train_out / "e2_concat.ckpt"
    assert main(["eval", str(ckpt), "--data", str(data), "--ensemble-n", "2",
                 "--out", str(tmp_path / "eval")]) == 0
    assert main(["profile", "--checkpoint", str(ckpt), "--data", str(data),
                 "--t-grid", "0:19:4", "--n-eval", "2",
                 "--out", str(tmp_path / "prof")]) == 0
    assert main(["weights", str(tmp_path / "prof" / "loss_e2_lesion_cond.csv"),
                 "--total", "20", "--out", str(tmp_path / "w")]) == 0
    assert main(["report", str(tmp_path), "--out", str(tmp_path / "rep")]) == 0

    manifests = sorted(tmp_path.rglob("run_manifest.json"))
    assert len(manifests) == 6
    for manifest_path in manifests:
        manifest = json.loads(manifest_path.read_text())
        run_dir = manifest_path.parent
        before = _digest_outputs(run_dir, manifest["outputs"])
        assert main(manifest["argv"]) == 0, f"replay failed: {manifest['command']}"
        after = _digest_outputs(run_dir, manifest["outputs"])
        assert after == before, f"{manifest['command']} outputs changed on replay"
    print(f"\nC9 PASS: {len(manifests)} manifests replayed byte-identically "
          f"({', '.join(json.loads(m.read_text())['command'] for m in manifests)})")


# -- criteria 4-7, 10: trained desk-scale models ----------------------------------------------------
#
# Checkpoints come from tests/zoo.py and are cached under .zoo/ after the
# first (cold, ~2h) run. Measurements derived from those checkpoints
# (profiles, ensemble scores) are disk-memoized the same way: they are pure
# functions of the cached model and the pinned evaluation seeds, so the memo
# is a speed-up, not a fixture. Deleting .zoo/ reproduces every number.

GRID = list(range(1, zoo.ZOO_T + 1))
WINDOW = 51
E3_DEEP_STEPS = 3500  # the unconditional reference needs a tight low-noise floor


def _decile_means(values):
    return np.array([chunk.mean() for chunk in np.array_split(np.asarray(values), 10)])


def _mask_profile(model, meta, kind, split, conditioned, n_eval):
    """Smoothed mask-recovery error curve, memoized next to the checkpoint."""
    pairs = zoo.zoo_dataset(kind)[0 if split == "train" else 1]
    record = zoo.zoo_memo("maskprof", {
        "model": meta["digest"], "kind": kind, "split": split,
        "conditioned": conditioned, "n_eval": n_eval, "seed": 0,
        "T": zoo.ZOO_T, "window": WINDOW,
    }, lambda: list(smooth(profile_mask_error(
        model, pairs, zoo.zoo_schedule(), GRID,
        conditioned=conditioned, n_eval=n_eval, seed=0), WINDOW).values))
    return np.asarray(record["value"]), record["seconds"]


def _loss_profile(model, meta, kind, objective, n_eval):
    """Smoothed per-timestep training-objective curve on the train split."""
    pairs = zoo.zoo_dataset(kind)[0]
    record = zoo.zoo_memo("lossprof", {
        "model": meta["digest"], "kind": kind, "objective": objective,
        "n_eval": n_eval, "seed": 0, "T": zoo.ZOO_T, "window": WINDOW,
    }, lambda: list(smooth(profile_training_loss(
        model, pairs, objective, zoo.zoo_schedule(), GRID,
        n_eval=n_eval, seed=0), WINDOW).values))
    return np.asarray(record["value"]), record["seconds"]


def _ensemble_scores(model, val, n, salt):
    """Mean per-image IoU and pooled ECE of an n-member ensemble."""
    sched = zoo.zoo_schedule()
    rng = np.random.default_rng(np.random.SeedSequence([404, salt]))
    ious, means, gts = [], [], []
    for pair in val:
        mean_map, _, binary = ensemble_predict(model, pair.image, n, sched, rng)
        ious.append(iou(binary, pair.mask))
        means.append(mean_map)
        gts.append(pair.mask)
    return [float(np.mean(ious)), float(ece(np.stack(means), np.stack(gts)).ece)]


def _ensemble_memo(model, meta, kind, n, salt):
    record = zoo.zoo_memo("ens", {
        "model": meta["digest"], "kind": kind, "n": n, "salt": salt,
    }, lambda: _ensemble_scores(model, zoo.zoo_dataset(kind)[1], n, salt))
    return record["value"]


def test_c04_conditioning_matches_at_low_noise_and_helps_at_high():
    """Conditioned (mask+image) and unconditioned (mask-only) recovery-error
    curves on the tumor family coincide over the lowest decile of timesteps
    (gap < 5% of the unconditioned terminal level) while conditioning wins
    by >= 10% somewhere in the top half; training plus profiling fits a
    15-minute CPU budget."""
    e2, meta2 = zoo.zoo_model("e2_tumor_s0", experiment="E2", kind="tumor", seed=0)
    e3, meta3 = zoo.zoo_model("e3_tumor_deep_s0", experiment="E3", kind="tumor",
                              seed=0, steps=E3_DEEP_STEPS)
    cond, s_cond = _mask_profile(e2, meta2, "tumor", "val", True, n_eval=8)
    uncond, s_uncond = _mask_profile(e3, meta3, "tumor", "val", False, n_eval=8)
    budget = meta2["train_seconds"] + meta3["train_seconds"] + s_cond + s_uncond

    terminal = uncond[-1]
    low_gap = float(np.max(np.abs(cond[:20] - uncond[:20])) / terminal)
    top = slice(zoo.ZOO_T // 2, zoo.ZOO_T)
    advantage = float(np.max((uncond[top] - cond[top]) / np.maximum(uncond[top], 1e-12)))
    assert low_gap < 0.05, f"low-noise gap is {low_gap:.3f} of the terminal level"
    assert advantage >= 0.10, f"best conditioning advantage in top half is {advantage:.3f}"
    assert budget < 900.0, f"experiment cost {budget:.0f}s"
    print(f"\nC4 PASS: low-decile gap {low_gap:.3f} < 0.05, top-half advantage "
          f"{advantage:.2f} >= 0.10, budget {budget:.0f}s < 900s")


def test_c05_loss_profiles_monotone_generation_vs_dipping_segmentation():
    """The image-generation loss profile declines across deciles, while the
    conditional noise-prediction profile has an interior minimum in the first
    fifth of the schedule followed by a rise of at least 20% of the curve's
    range."""
    e4, meta4 = zoo.zoo_model("e4_tumor_s0", experiment="E4", kind="tumor", seed=0)
    gen, _ = _loss_profile(e4, meta4, "tumor", "eq1", n_eval=16)
    deciles = _decile_means(gen)
    assert np.all(np.diff(deciles) <= 1e-3), (
        f"generation deciles rise beyond noise: {np.round(deciles, 4)}")

    e2, meta2 = zoo.zoo_model("e2_tumor_s0", experiment="E2", kind="tumor", seed=0)
    seg, _ = _loss_profile(e2, meta2, "tumor", "eq3", n_eval=8)
    imin = int(np.argmin(seg))
    span = float(seg.max() - seg.min())
    rise = float(seg[imin:].max() - seg[imin])
    assert 0 < imin < int(0.2 * zoo.ZOO_T), f"minimum sits at t={imin + 1}"
    assert rise >= 0.2 * span, f"post-dip rise {rise:.4f} < 20% of range {span:.4f}"
    print(f"\nC5 PASS: generation deciles non-increasing {np.round(deciles, 3)}; "
          f"segmentation dip at t={imin + 1} with rise {rise / span * 100:.0f}% of range")


def test_c06_structure_scale_orders_information_decay():
    """Mask-recovery error reaches half its terminal level earliest for the
    fine-grained nuclei family and latest for large lesions, on per-family
    averages over three training seeds."""
    profiles = {}
    for kind in ("nuclei", "tumor", "lesion"):
        curves = []
        for seed in (0, 1, 2):
            model, meta = zoo.zoo_model(f"e3_{kind}_s{seed}", experiment="E3",
                                        kind=kind, seed=seed)
            values, _ = _mask_profile(model, meta, kind, "val", False, n_eval=16)
            curves.append(values)
        profiles[kind] = TimestepProfile(tuple(float(t) for t in GRID),
                                         tuple(np.mean(curves, axis=0)))
    summary = fingerprint(profiles)
    t_half = {entry.kind: entry.t_half for entry in summary.entries}
    assert t_half["nuclei"] < t_half["tumor"], (
        f"nuclei t_half {t_half['nuclei']} not below tumor {t_half['tumor']}")
    assert t_half["lesion"] > max(t_half["nuclei"], t_half["tumor"]), (
        f"lesion t_half is not the largest: {t_half}")
    print(f"\nC6 PASS: t_half nuclei {t_half['nuclei']} < tumor {t_half['tumor']} "
          f"< lesion {t_half['lesion']} (3-seed averages)")


def test_c07_diffusion_ensembles_calibrate_at_least_as_well():
    """With matched step budgets over three seeds on the lesion family, the
    10-member diffusion ensemble's median calibration error does not exceed
    the feed-forward ensemble's, and both reach median IoU >= 0.70. The IoU
    direction is reported, not enforced."""
    iou_ff, ece_ff, iou_dd, ece_dd = [], [], [], []
    for seed in (0, 1, 2):
        e1, meta1 = zoo.zoo_model(f"e1_lesion_s{seed}", experiment="E1",
                                  kind="lesion", seed=seed)
        e2, meta2 = zoo.zoo_model(f"e2_lesion_s{seed}", experiment="E2",
                                  kind="lesion", seed=seed)
        assert meta1["steps"] == meta2["steps"], "budgets must be matched"
        i1, c1 = _ensemble_memo(e1, meta1, "lesion", 10, salt=seed)
        i2, c2 = _ensemble_memo(e2, meta2, "lesion", 10, salt=100 + seed)
        iou_ff.append(i1); ece_ff.append(c1); iou_dd.append(i2); ece_dd.append(c2)

    med = lambda xs: float(np.median(xs))
    assert med(ece_dd) <= med(ece_ff), (
        f"diffusion ECE {med(ece_dd):.4f} exceeds feed-forward ECE {med(ece_ff):.4f}")
    assert med(iou_ff) >= 0.70 and med(iou_dd) >= 0.70, (
        f"median IoU below floor: feed-forward {med(iou_ff):.3f}, diffusion {med(iou_dd):.3f}")
    direction = "diffusion" if med(iou_dd) >= med(iou_ff) else "feed-forward"
    print(f"\nC7 PASS: median ECE diffusion {med(ece_dd):.4f} <= feed-forward "
          f"{med(ece_ff):.4f}; median IoU feed-forward {med(iou_ff):.3f} vs "
          f"diffusion {med(iou_dd):.3f} (higher: {direction}; reported only)")


def test_c10_derivative_weighted_retraining_stays_comparable():
    """Per-timestep weights derived from a trained mask-recovery profile feed
    a weighted retraining run without error, and its ensemble validation IoU
    stays within 5 points of the unweighted run at the same step budget."""
    e3, meta3 = zoo.zoo_model("e3_tumor_deep_s0", experiment="E3", kind="tumor",
                              seed=0, steps=E3_DEEP_STEPS)
    values, _ = _mask_profile(e3, meta3, "tumor", "train", False, n_eval=8)
    profile = TimestepProfile(tuple(float(t) for t in GRID), tuple(values))
    weights = derivative_weights(profile, floor=0.05, total=zoo.ZOO_T)
    assert abs(float(np.mean(weights.weights)) - 1.0) < 1e-9

    baseline, meta_b = zoo.zoo_model("e2_tumor_s0", experiment="E2", kind="tumor", seed=0)
    weighted, meta_w = zoo.zoo_model("e2w_tumor_s0", experiment="E2", kind="tumor",
                                     seed=0, weights=weights)
    assert meta_w["steps"] == meta_b["steps"], "step budgets must match"

    iou_base, _ = _ensemble_memo(baseline, meta_b, "tumor", 4, salt=7)
    iou_weighted, _ = _ensemble_memo(weighted, meta_w, "tumor", 4, salt=7)
    assert iou_weighted >= iou_base - 0.05, (
        f"weighted run IoU {iou_weighted:.3f} fell more than 5 points below "
        f"the unweighted {iou_base:.3f}")
    print(f"\nC10 PASS: weighted IoU {iou_weighted:.3f} vs unweighted {iou_base:.3f} "
          f"at equal budget ({meta_w['steps']} steps); profile-derived mean-one "
          f"weights drove training end to end")
