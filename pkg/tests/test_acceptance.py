"""Acceptance criteria, one test each, at the stated tolerances.

Each test records a PASS/FAIL line that is printed in the terminal summary.
Criterion 5 trains ten small CNNs on MNIST (about five minutes on one core).
"""
import time
from pathlib import Path

import numpy as np
import pytest
from conftest import mnist_dir
from oracles import enumerate_select

from latentcnn import cli, svm
from latentcnn.config import load_config
from latentcnn.datasets import Dataset, SyntheticSpec
from latentcnn.ensemble import (EnsembleModel, LatentCnnConfig, ensemble_scores, ensemble_train,
                                latent_cnn_train_step, load_ensemble, save_ensemble)
from latentcnn.experiments import REFERENCE_ERRORS, gradient_suite, run_ablation, synth_benchmark
from latentcnn.metrics import read_metrics
from latentcnn.nn import Conv2D, Dense, MaxPool, Network, ReLU
from latentcnn.regions import canonical_grid, crop_all

PRESETS = Path(__file__).resolve().parents[1] / "scripts" / "presets"

# Frozen regression fixtures for the synthetic benchmark (criterion 4).
SYNTH_LATENT_ACC = 0.970
SYNTH_WHOLE_ACC = 0.810


def test_c1_gradient_suite(acceptance):
    rep = gradient_suite(seeds=10)
    ok = rep.passed and rep.seconds < 30 and len(rep.per_kind) == 10
    worst = max(rep.per_kind.items(), key=lambda kv: kv[1] / rep.tol[kv[0]])
    acceptance(1, "gradient suite", ok,
               f"10 seeds, worst {worst[0]} {worst[1]:.1e} (tol {rep.tol[worst[0]]:.0e}), {rep.seconds:.1f}s")
    assert rep.passed, rep.lines()
    assert rep.seconds < 30
    assert cli.main(["gradcheck", "--seeds", "10"]) == 0


def test_c2_degeneracy_equivalence(acceptance):
    rng = np.random.default_rng(2)
    n, fl, nc = 100, 6, 4
    X = rng.normal(size=(n, fl))
    Y = np.array([svm.label_vector(int(c), nc) for c in rng.integers(0, nc, n)])
    cfg = svm.TrainConfig(C=2.0, lr=5000.0, T=1000)
    w_lat, w_cls = np.zeros((fl, nc)), np.zeros((fl, nc))
    s_lat = s_cls = svm.SgdState()
    identical = True
    for i in range(n):
        w_lat, s_lat, _ = svm.latent_sgd_step(w_lat, X[i:i + 1], Y[i], cfg, s_lat)
        w_cls, s_cls, _ = svm.classical_sgd_step(w_cls, X[i], Y[i], cfg, s_cls)
        identical &= w_lat.tobytes() == w_cls.tobytes() and s_lat == s_cls
    a, _ = svm.train([(X[i:i + 1], Y[i]) for i in range(n)], cfg)
    b, _ = svm.train_classical(X, Y, cfg)
    identical &= a.tobytes() == b.tobytes() and bool(np.abs(a).max() > 0)
    acceptance(2, "degeneracy equivalence", identical, f"{n} steps bit-identical: {identical}")
    assert identical


def test_c3_selection_oracle(acceptance):
    rng = np.random.default_rng(3)
    t0 = time.perf_counter()
    mismatches, ties = 0, 0
    for i in range(1000):
        fl, nc, nz = rng.integers(1, 9), rng.integers(2, 6), rng.integers(1, 8)
        w = rng.normal(size=(fl, nc))
        bag = rng.normal(size=(nz, fl))
        if i % 4 == 0 and nz > 1:
            # constructed tie: duplicate rows, the first copy must win
            src, dst = sorted(rng.choice(nz, 2, replace=False))
            bag[dst] = bag[src]
            ties += 1
        if i % 10 == 0:
            bag[:] = bag[0]  # every row tied
        y = svm.label_vector(int(rng.integers(nc)), nc)
        for mode in svm.SELECTION_MODES:
            z, _ = svm.select_latent(w, bag, y, mode)
            mismatches += z != enumerate_select(w, bag, y, mode)[0]
    seconds = time.perf_counter() - t0
    ok = mismatches == 0 and seconds < 5
    acceptance(3, "selection oracle", ok, f"1000 instances x 2 modes, {ties} with duplicate rows, "
                                         f"{mismatches} mismatches, {seconds:.1f}s")
    assert mismatches == 0 and seconds < 5


def test_c4_synthetic_latent_benchmark(acceptance):
    res = synth_benchmark(SyntheticSpec(side=16, pattern=8, n_classes=2, noise=0.3, n_train=400,
                                        n_test=200, seed=7))
    ok = res["latent_acc"] >= 0.95 and res["gap"] >= 0.15 and res["seconds"] < 60
    acceptance(4, "synthetic latent benchmark", ok,
               f"latent {100 * res['latent_acc']:.1f}%, whole-image {100 * res['whole_acc']:.1f}%, "
               f"gap {100 * res['gap']:.1f} pts, {res['seconds']:.1f}s")
    assert res["latent_acc"] >= 0.95
    assert res["gap"] >= 0.15
    assert res["seconds"] < 60
    assert res["latent_acc"] == pytest.approx(SYNTH_LATENT_ACC, abs=1e-9)
    assert res["whole_acc"] == pytest.approx(SYNTH_WHOLE_ACC, abs=1e-9)


@pytest.mark.slow
def test_c5_mnist_ablation(acceptance, monkeypatch):
    root = mnist_dir()
    if root is None:
        acceptance(5, "desk-scale MNIST ablation", False, "MNIST IDX files not available")
        pytest.skip("MNIST IDX files not found")
    monkeypatch.setenv("LCNN_DATA_ROOT", str(root.parent))
    cfg = load_config(PRESETS / "mnist_desk.cfg")
    assert cfg.data.train_per_class * 10 == 10_000 and cfg.data.test_per_class * 10 == 2_000
    t0 = time.perf_counter()
    results = [run_ablation(cfg, seed) for seed in cfg.run.seeds]
    seconds = time.perf_counter() - t0
    wins = sum(r["errors"]["2CNN-latent"] <= r["errors"]["2CNN-average"] for r in results)
    worst_global = max(r["errors"]["global CNN"] for r in results)
    ok = len(results) == 5 and wins >= 3 and worst_global <= 0.05 and seconds < 30 * 60
    rows = "; ".join(f"seed {r['seed']}: avg {100 * r['errors']['2CNN-average']:.2f} / "
                     f"latent {100 * r['errors']['2CNN-latent']:.2f}" for r in results)
    acceptance(5, "desk-scale MNIST ablation", ok,
               f"latent <= average in {wins}/5 seeds, worst global CNN {100 * worst_global:.2f}%, "
               f"{seconds / 60:.1f} min total ({rows})")
    assert wins >= 3
    assert worst_global <= 0.05
    assert max(r["seconds"] for r in results) < 30 * 60


def test_c6_reproducibility_statement(acceptance):
    full = {name: load_config(PRESETS / f"{name}_full.cfg") for name in ("mnist", "cifar10", "cifar100")}
    ok = all(c.backbone.arch == "nin" and c.data.train_per_class == 0 for c in full.values())
    # the full-scale presets are parsed by the suite but never run
    ok &= REFERENCE_ERRORS["mnist"][3] == 0.42 and REFERENCE_ERRORS["cifar10"][3] == 8.13
    ok &= REFERENCE_ERRORS["cifar100"][3] == 32.31
    acceptance(6, "full-scale numbers", ok,
               "CIFAR-10 8.13%, CIFAR-100 32.31%, MNIST 0.42% and the PASCAL results are not reproduced "
               "at desk scale; full-scale presets ship in scripts/presets and are excluded from tests")
    assert ok


def test_c7_determinism_and_persistence(acceptance, tmp_path):
    cfg = PRESETS / "synthetic.cfg"
    finals = []
    for run in ("a", "b"):
        assert cli.main(["train", "--config", str(cfg), "--out", str(tmp_path / run)]) == 0
        finals.append(read_metrics(tmp_path / run / "metrics.jsonl")[-1]["error_rate"])
    same_bytes = (tmp_path / "a" / "model.lme").read_bytes() == (tmp_path / "b" / "model.lme").read_bytes()

    # conv-backbone ensemble with jointly fine-tuned backbones
    rng = np.random.default_rng(7)
    ds = Dataset(rng.random((30, 10, 10, 1)), np.arange(30) % 3, 3)
    regions = canonical_grid(10, 10, 8, 8)

    def make():
        root = Network((10, 10, 1), [Conv2D(3, 3, 1, 3), ReLU(), MaxPool(2, 2), Dense(48, 8)], seed=1)
        part = Network((8, 8, 1), [Conv2D(3, 3, 1, 3), ReLU(), MaxPool(2, 2), Dense(27, 8)], seed=2)
        model = EnsembleModel.create(root, part, 3, regions, tap=4)
        cfg = LatentCnnConfig(svm=svm.TrainConfig(C=1, lr=100, epochs=2, shuffle=True, seed=3),
                              backbone_lr=0.01, root_backbone_lr=0.01)
        return ensemble_train(model, ds, cfg)[0]

    m1, m2 = make(), make()
    probe = rng.random((100, 10, 10, 1))
    s1 = ensemble_scores(m1, probe)
    save_ensemble(m1, tmp_path / "conv.lme")
    back = load_ensemble(tmp_path / "conv.lme")
    s_back = ensemble_scores(back, probe)
    synth_model = load_ensemble(tmp_path / "a" / "model.lme")
    ok = (finals[0] == finals[1] and same_bytes and np.array_equal(s1, ensemble_scores(m2, probe))
          and np.array_equal(s1.argmax(1), s_back.argmax(1)) and np.array_equal(s1, s_back)
          and synth_model.n_classes == 2)
    acceptance(7, "determinism and persistence", ok,
               f"rerun final error {finals[0]:.3f} == {finals[1]:.3f}; 100-probe predictions unchanged after "
               f"save/load")
    assert ok


def test_c8_schedule_and_selectivity(acceptance):
    cfg = svm.TrainConfig(lr=3.0)
    t = np.arange(1, 200_001)
    lrs = cfg.lr / (t + cfg.T)
    schedule_ok = bool(np.all(np.diff(lrs) < 0)) and all(
        cfg.effective_lr(i + 1) < cfg.effective_lr(i) for i in range(1, 1000))

    rng = np.random.default_rng(8)
    regions = canonical_grid(9, 9, 7, 7)
    root = Network((9, 9, 1), [Conv2D(3, 3, 1, 2), ReLU(), MaxPool(2, 2), Dense(18, 5)], seed=0)
    part = Network((7, 7, 1), [Conv2D(3, 3, 1, 2), ReLU(), MaxPool(2, 2), Dense(8, 5)], seed=1)
    model = EnsembleModel.create(root, part, 3, regions, tap=4)
    model.part_w = rng.normal(size=model.part_w.shape)
    lr = 0.01
    step_cfg = LatentCnnConfig(svm=svm.TrainConfig(C=1.0, lr=50), backbone_lr=lr)
    selective, active = True, 0
    for step in range(120):
        img = rng.random((9, 9, 1))
        y = svm.label_vector(int(rng.integers(3)), 3)
        snap = model.part_net.copy()
        res = latent_cnn_train_step(model, img, y, step_cfg)
        z = res.breakdown.z
        active += bool(res.output_grad.any())
        crops = crop_all(img, regions)
        # every non-selected region alone contributes an exactly zero gradient
        for other in range(len(regions)):
            if other == z:
                continue
            g = np.zeros_like(res.output_grad)
            g[other] = res.output_grad[other]
            _, tr = snap.forward(crops, "train", upto=model.tap)
            grads, _ = snap.backward(tr, g)
            selective &= all(not a.any() for gk in grads for a in gk.values())
        # and the applied update equals one computed from crop z* alone
        out, tr = snap.forward(crops[z:z + 1], "train", upto=model.tap)
        grads, _ = snap.backward(tr, res.output_grad[z:z + 1])
        expected = snap.sgd_step(grads, lr)
        for pa, pb in zip(expected.params, model.part_net.params):
            for n in pa:
                selective &= np.allclose(pa[n], pb[n], rtol=0, atol=1e-14)
    ok = schedule_ok and selective and active >= 100
    acceptance(8, "schedule and selectivity", ok,
               f"lr/(t+T) strictly decreasing: {schedule_ok}; {active}/120 latent-CNN steps with active hinge, "
               f"zero gradient from non-selected regions: {selective}")
    assert ok
