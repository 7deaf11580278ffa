"""Acceptance suite: one or more tests per numbered criterion.

Each test carries a ``criterion`` marker; the terminal summary prints one
PASS/FAIL line per criterion together with the measured quantities. The
toy end-to-end experiment (criteria 5 and 9, plus the trained-translator
checks) is built once per session and takes roughly a quarter of an hour
on one CPU core.
"""

import filecmp
import json
import math
import time
from dataclasses import replace

import numpy as np
import pytest
import torch

from domainbridge.cli import main as cli
from domainbridge.datasets import (
    ToyWorldConfig,
    assemble_bridged_dataset,
    detect_droplets,
    generate_toy_dataset,
    subsample_video_frames,
)
from domainbridge.datasets.records import DatasetManifest, DomainTags, SampleRecord
from domainbridge.evaluation import style_diversity
from domainbridge.i2i import I2iTrainConfig, translate, train_i2i
from domainbridge.uda import (
    PathPolicy,
    UdaConfig,
    coverage_expansion,
    fires_self_supervision,
    gate_draws,
    run_uda_training,
)
from domainbridge.wpl import (
    ThresholdParam,
    WplLossConfig,
    balancing_loss,
    compute_pseudo_label,
    compute_weights,
    weighted_ce,
    wpl_gradients,
    wpl_loss,
)
from oracles import pixel_loop_wpl, random_point_away_from_boundary, random_prob_map, wpl_scalar_loss

# Toy end-to-end experiment. Iteration and epoch counts were chosen in pilot
# runs so the whole experiment fits the 30 minute budget on one core.
TOY_SIZES = dict(source=500, target=500, eval=200, bridge=300)
TOY_I2I_ITERATIONS = 3000
TOY_UDA = dict(epochs=12, refine_epochs=6)
TIME_BUDGET_S = 30 * 60
MIOU_MARGIN = 0.05
# Trained-translator checks, bounds recorded from the pilot checkpoint (bridged
# droplet rate 0.975, style recovery MSE 0.861). An unbridged pilot also reached
# droplet rate 1.0, so no upper bound is asserted for unbridged training.
# Predicting the prior mean scores a style MSE of 1.0; the bound sits below it.
STYLE_RECON_MSE_BOUND = 0.95
DROPLET_RATE_BRIDGED = 0.5


def as_map(p):
    return torch.from_numpy(np.ascontiguousarray(np.moveaxis(p, -1, 0)))


def rel_err(a, b):
    a, b = np.asarray(a, dtype=np.float64), np.asarray(b, dtype=np.float64)
    return float(np.linalg.norm(a - b) / max(np.linalg.norm(b), 1e-300))


# ------------------------------------------------------------------ criterion 1

@pytest.mark.criterion(1, "WPL gradients match central finite differences (rel < 1e-4, 100 points, < 1 min)")
def test_c1_gradients_match_finite_differences(record_property):
    rng = np.random.default_rng(2024)
    cfg = WplLossConfig()
    h = 1e-6
    worst_beta = worst_p = 0.0
    t0 = time.perf_counter()
    for _ in range(100):
        q = int(rng.choice([2, 3, 5]))
        p, alpha = random_point_away_from_boundary(rng, 4, 4, q)
        theta = ThresholdParam(alpha, dtype=torch.float64)
        beta = float(theta.beta.detach())
        _, g_beta, g_p = wpl_gradients(as_map(p), theta, cfg)

        fd_beta = (wpl_scalar_loss(p, beta + h, cfg.sigma, cfg.gamma)
                   - wpl_scalar_loss(p, beta - h, cfg.sigma, cfg.gamma)) / (2 * h)
        worst_beta = max(worst_beta, abs(float(g_beta) - fd_beta) / abs(fd_beta))

        # pseudo-labels and confidences are constants of the step: freeze them
        classes, m = p.argmax(axis=-1), p.max(axis=-1)
        fixed = (classes, m, m >= 1 / (1 + math.exp(-beta)))
        fd_p = np.zeros_like(p)
        for idx in np.ndindex(*p.shape):
            e = np.zeros_like(p)
            e[idx] = h
            fd_p[idx] = (wpl_scalar_loss(p + e, beta, cfg.sigma, cfg.gamma, fixed)
                         - wpl_scalar_loss(p - e, beta, cfg.sigma, cfg.gamma, fixed)) / (2 * h)
        worst_p = max(worst_p, rel_err(np.moveaxis(g_p.numpy(), 0, -1), fd_p))
    elapsed = time.perf_counter() - t0
    record_property("measured", f"max rel err beta {worst_beta:.1e}, p {worst_p:.1e}, {elapsed:.0f}s")
    assert worst_beta < 1e-4 and worst_p < 1e-4
    assert elapsed < 60


# ------------------------------------------------------------------ criterion 2

@pytest.mark.criterion(2, "vectorized pseudo-labels, weights and L_w equal per-pixel loops (1000 maps per Q)")
@pytest.mark.parametrize("q", [2, 3, 19])
def test_c2_vectorized_equals_pixel_loops(q, record_property):
    rng = np.random.default_rng(100 + q)
    t0 = time.perf_counter()
    worst = 0.0
    for _ in range(1000):
        p = random_prob_map(rng, 8, 8, q, scale=rng.uniform(0.2, 5.0))
        alpha = float(rng.uniform(0.01, 0.99))
        classes, included, weights, lw = pixel_loop_wpl(p, alpha)
        t = as_map(p)
        state = compute_pseudo_label(t, alpha)
        state.weights = compute_weights(t, alpha)
        assert np.array_equal(state.classes.numpy(), classes)
        assert np.array_equal(state.included.numpy(), included)
        assert np.array_equal(state.weights.numpy(), weights)
        got = float(weighted_ce(t, state))
        worst = max(worst, abs(got - lw) / max(abs(lw), 1e-300))
    elapsed = time.perf_counter() - t0
    record_property("measured", f"Q={q}: L_w max rel diff {worst:.1e}, {elapsed:.1f}s")
    # classes, masks and weights are bitwise equal; the reduced L_w only differs by summation order
    assert worst < 1e-12
    assert elapsed < 120


# ------------------------------------------------------------------ criterion 3

@pytest.mark.criterion(3, "scalar anchors L_b(0.8), w(0.9; 0.8), L_ss")
def test_c3_scalar_anchors(record_property):
    lb = balancing_loss(0.8)
    assert lb == pytest.approx(2.5903, abs=1e-4)
    w = compute_weights(as_map(np.array([[[0.9, 0.1]]])), 0.8)
    assert float(w[0, 0]) == 0.5
    cfg = WplLossConfig()
    assert (cfg.sigma, cfg.gamma, cfg.alpha_init) == (0.005, 1.0, 0.8)
    lss = cfg.sigma * 2.0 + cfg.gamma * 2.5903
    assert lss == pytest.approx(2.6003, abs=1e-4)
    # the loss function combines its parts with the same weights
    conf = 0.9
    out = wpl_loss(as_map(np.array([[[conf, 1 - conf]]])), ThresholdParam(0.8, dtype=torch.float64), cfg)
    l_w, l_b, loss = (float(v.detach()) for v in (out.l_w, out.l_b, out.loss))
    assert l_w == pytest.approx(0.5 * -math.log(conf), rel=1e-12)
    assert loss == pytest.approx(cfg.sigma * l_w + cfg.gamma * l_b, rel=1e-12)
    assert l_b == pytest.approx(math.log(0.2) ** 2, rel=1e-6)
    record_property("measured", f"L_b(0.8)={lb:.5f}, w=0.5, L_ss={lss:.5f}")


# ------------------------------------------------------------------ criterion 4

@pytest.mark.criterion(4, "threshold dynamics: dL_b/dalpha > 0, dL_w/dalpha <= 0, coverage expands (>= 2 of 3 seeds)")
def test_c4_sign_tests():
    rng = np.random.default_rng(7)
    for _ in range(100):
        q = int(rng.choice([2, 3, 19]))
        p, alpha0 = random_point_away_from_boundary(rng, 8, 8, q)
        alpha = torch.tensor(alpha0, dtype=torch.float64, requires_grad=True)
        (g_b,) = torch.autograd.grad(balancing_loss(alpha), [alpha])
        assert float(g_b) > 0
        t = as_map(p)
        state = compute_pseudo_label(t, alpha0)
        state.weights = compute_weights(t, alpha)
        (g_w,) = torch.autograd.grad(weighted_ce(t, state), [alpha])
        assert float(g_w) <= 0


@pytest.fixture(scope="module")
def refinement_runs():
    runs = []
    for seed in range(3):
        world = ToyWorldConfig(seed=seed)
        src = generate_toy_dataset(world, 150, "source_clear")
        tgt = generate_toy_dataset(world, 150, "target_rain")
        cfg = UdaConfig.toy(epochs=2, refine_epochs=4, seed=seed)
        runs.append(run_uda_training(src, tgt, None, cfg))
    return runs


@pytest.mark.criterion(4, "threshold dynamics: dL_b/dalpha > 0, dL_w/dalpha <= 0, coverage expands (>= 2 of 3 seeds)")
def test_c4_coverage_expands(refinement_runs, record_property):
    notes, expanded = [], 0
    for seed, run in enumerate(refinement_runs):
        first, last = coverage_expansion(run.coverages(), 0.1)
        expanded += last > first
        notes.append(f"seed {seed}: {first:.3f}->{last:.3f}")
    record_property("measured", "coverage " + ", ".join(notes))
    assert expanded >= 2


# ------------------------------------------------------------------ criterion 5 and 9: toy experiment

@pytest.fixture(scope="module")
def toy_experiment(tmp_path_factory):
    out = tmp_path_factory.mktemp("toy_experiment")
    t0 = time.perf_counter()
    world = ToyWorldConfig()
    A = generate_toy_dataset(world, TOY_SIZES["source"], "source_clear")
    target_all = generate_toy_dataset(world, TOY_SIZES["target"] + TOY_SIZES["eval"], "target_rain")
    B = target_all.subset(range(TOY_SIZES["target"]))
    E = target_all.subset(range(TOY_SIZES["target"], len(target_all)), "target_eval")
    C = generate_toy_dataset(world, TOY_SIZES["bridge"], "bridge_clear")
    D = generate_toy_dataset(world, TOY_SIZES["bridge"], "bridge_rain")
    A2, B2 = assemble_bridged_dataset(A, B, C, D)
    translator, history = train_i2i(A2, B2, I2iTrainConfig.toy(iterations=TOY_I2I_ITERATIONS),
                                    out_dir=out / "i2i")
    t_i2i = time.perf_counter() - t0
    base_cfg = UdaConfig.toy(**TOY_UDA)
    baseline = run_uda_training(A, B, None, replace(base_cfg, strategy="none"), eval_set=E,
                                out_dir=out / "no_adaptation")
    full = run_uda_training(A, B, translator, replace(base_cfg, strategy="wpl"), eval_set=E,
                            out_dir=out / "full_wpl")
    elapsed = time.perf_counter() - t0
    return dict(out=out, A=A, B=B, E=E, translator=translator, history=history, baseline=baseline,
                full=full, elapsed=elapsed, t_i2i=t_i2i, cfg=base_cfg)


@pytest.mark.criterion(5, "toy UDA: bridge + OMS + WPL >= no adaptation + 5 mIoU points within 30 min")
def test_c5_toy_end_to_end(toy_experiment, record_property):
    base = toy_experiment["baseline"].report.miou
    full = toy_experiment["full"].report.miou
    record_property("measured", f"mIoU no-adaptation {base:.4f}, full {full:.4f} "
                                f"(+{100 * (full - base):.2f} points), {toy_experiment['elapsed'] / 60:.1f} min")
    assert full >= base + MIOU_MARGIN
    assert toy_experiment["elapsed"] < TIME_BUDGET_S


@pytest.mark.criterion(9, "strategies none / batchwise / wpl complete the toy run with comparable CSVs")
def test_c9_strategy_harness(toy_experiment, record_property):
    exp = toy_experiment
    results = {"wpl": exp["full"]}
    for strategy in ("none", "batchwise"):
        results[strategy] = run_uda_training(exp["A"], exp["B"], exp["translator"],
                                             replace(exp["cfg"], strategy=strategy), eval_set=exp["E"],
                                             out_dir=exp["out"] / f"strategy_{strategy}")
    headers = {(r.out_dir / "eval.csv").read_text().splitlines()[0] for r in results.values()}
    metric_headers = {(r.out_dir / "metrics.csv").read_text().splitlines()[0] for r in results.values()}
    assert len(headers) == 1 and len(metric_headers) == 1
    for r in results.values():
        assert r.report is not None and 0.0 <= r.report.miou <= 1.0
    order = sorted(results, key=lambda k: -results[k].report.miou)
    record_property("measured", "mIoU " + ", ".join(f"{k} {results[k].report.miou:.4f}" for k in order)
                    + " (ordering reported, not asserted)")


# ------------------------------------------------------------------ trained translator checks

def _clear_images(n=40, seed=5):
    m = generate_toy_dataset(ToyWorldConfig(seed=seed), n, "source_clear")
    return torch.from_numpy(np.stack([s.image_data for s in m.samples])).permute(0, 3, 1, 2)


def test_trained_translator_properties(toy_experiment, record_property):
    tr = toy_experiment["translator"]
    x = _clear_images()
    g = torch.Generator().manual_seed(0)
    assert all(math.isfinite(v) for _, _, v in toy_experiment["history"])
    # distant styles give visibly different outputs
    s1, s2 = torch.randn(8, generator=g), torch.randn(8, generator=g)
    while torch.dist(s1, s2) <= 1:
        s2 = torch.randn(8, generator=g)
    diff = float((translate(x, s1, tr) - translate(x, s2, tr)).abs().mean())
    diversity = style_diversity(tr, x, 4, torch.Generator().manual_seed(1))
    # the style of a translation is recovered by the rain-domain style encoder
    styles = torch.randn(len(x), 8, generator=g)
    with torch.no_grad():
        _, s_rec = tr.gen_b.encode(translate(x, styles, tr))
    mse = float(((s_rec - styles) ** 2).mean())
    # translated clear images show droplets
    y = translate(x, torch.randn(len(x), 8, generator=g), tr)
    rate = float(np.mean([len(detect_droplets(im.permute(1, 2, 0).numpy())) >= 1 for im in y]))
    record_property("measured", f"style diff {diff:.4f}, diversity {diversity:.4f}, "
                                f"style recon MSE {mse:.3f}, droplet rate {rate:.2f}")
    assert diff > 0.01 and diversity > 0.01
    assert mse < STYLE_RECON_MSE_BOUND
    assert rate >= DROPLET_RATE_BRIDGED


# ------------------------------------------------------------------ criterion 6

@pytest.mark.criterion(6, "self-supervised path frequency 0.25 +- 0.02 over 10000 steps (p_tp = 0.75)")
def test_c6_gating_frequency(record_property):
    policy = PathPolicy()
    assert policy.p_tp == 0.75
    fired = [fires_self_supervision(gate_draws(0, i)[1], policy) for i in range(10_000)]
    freq = float(np.mean(fired))
    record_property("measured", f"frequency {freq:.4f}")
    assert abs(freq - 0.25) <= 0.02


@pytest.mark.criterion(6, "self-supervised path frequency 0.25 +- 0.02 over 10000 steps (p_tp = 0.75)")
def test_c6_recorded_steps_follow_gate(refinement_runs):
    run = refinement_runs[0]
    refine = [s for s in run.steps if s["phase"] == "refine"]
    expected = [fires_self_supervision(gate_draws(0, s["step"])[1], PathPolicy()) for s in refine]
    assert [s["ss_fired"] for s in refine] == expected


# ------------------------------------------------------------------ criterion 7

@pytest.mark.criterion(7, "bridge arithmetic 2 x 6026 + 3 x 9294 = 39934")
def test_c7_bridge_counts(record_property):
    def rec(ref, weather):
        return SampleRecord(ref, DomainTags(weather, "tube"))

    C = DatasetManifest("C", [rec(f"c{v}_{f}", "clear") for v in range(2)
                              for f in subsample_video_frames(18_000, 6026)], 19)
    D = DatasetManifest("D", [rec(f"d{v}_{f}", "rain") for v in range(3)
                              for f in subsample_video_frames(27_000, 9294)], 19)
    A = DatasetManifest("A", [SampleRecord(f"city{i}", DomainTags("clear", "car")) for i in range(2975)], 19)
    B = DatasetManifest("B", [SampleRecord(f"bdd{i}", DomainTags("rain", "dash")) for i in range(213)], 19)
    A2, B2 = assemble_bridged_dataset(A, B, C, D)
    added = (len(A2) - len(A)) + (len(B2) - len(B))
    record_property("measured", f"{len(A2) - len(A)} + {len(B2) - len(B)} = {added}")
    assert added == 39934


# ------------------------------------------------------------------ criterion 8

TINY = {"model": {"widths": [8, 16, 16], "decoder_width": 8}, "crop": [48, 48]}


@pytest.fixture(scope="module")
def tiny_toy(tmp_path_factory):
    out = tmp_path_factory.mktemp("tiny_toy")
    assert cli(["-q", "toygen", "--out", str(out), "--n", "8", "--n-eval", "4", "--seed", "3"]) == 0
    return out


def _uda(toy, out, *extra):
    cfg = out.parent / f"{out.name}.json"
    cfg.write_text(json.dumps({"uda": TINY}))
    return cli(["-q", "uda-train", "--config", str(cfg), "--src", str(toy / "source_clear.jsonl"),
                "--tgt", str(toy / "target_rain.jsonl"), "--eval", str(toy / "target_eval.jsonl"),
                "--out", str(out), "--epochs", "2", "--refine-epochs", "2", "--batch-size", "4",
                "--seed", "11", *extra])


@pytest.mark.criterion(8, "same seed gives byte-identical CSVs; resume matches the uninterrupted run")
def test_c8_repeat_and_resume(tiny_toy, tmp_path):
    assert _uda(tiny_toy, tmp_path / "a", "--checkpoint-every", "1") == 0
    assert _uda(tiny_toy, tmp_path / "b") == 0
    assert _uda(tiny_toy, tmp_path / "c", "--resume", str(tmp_path / "a" / "state_epoch001.pt")) == 0
    for f in ("metrics.csv", "epochs.csv", "eval.csv"):
        assert filecmp.cmp(tmp_path / "a" / f, tmp_path / "b" / f, shallow=False)
        assert filecmp.cmp(tmp_path / "a" / f, tmp_path / "c" / f, shallow=False)


@pytest.mark.criterion(8, "same seed gives byte-identical CSVs; resume matches the uninterrupted run")
def test_c8_translator_training_repeatable(tiny_toy, tmp_path):
    cfg = tmp_path / "t.json"
    cfg.write_text(json.dumps({"translator": {"base_channels": 8, "mlp_dim": 16,
                                                            "disc_channels": 8}}))
    for name in ("a", "b"):
        assert cli(["-q", "i2i-train", "--config", str(cfg), "--a", str(tiny_toy / "source_clear.jsonl"),
                    "--b", str(tiny_toy / "target_rain.jsonl"), "--out", str(tmp_path / name),
                    "--iters", "5", "--seed", "2"]) == 0
    assert filecmp.cmp(tmp_path / "a" / "losses.csv", tmp_path / "b" / "losses.csv", shallow=False)
