"""Acceptance suite: one test per criterion, each reporting a PASS/FAIL line.

Criteria 6, 7 and 10 share three desk-scale quickstart runs (seeds 0, 1, 2)
launched through the CLI, so this module takes roughly 45 minutes on one CPU.
"""

import copy
import csv
import io
import itertools
import json
import time

import numpy as np
import pytest
import torch

from vsuda.cli import main
from vsuda.conversion import GROUPS, ConversionTrainConfig, DiscriminatorConfig, GeneratorConfig, build_conversion_model, generator_step_loss, set_requires_grad
from vsuda.data import load_dataset
from vsuda.losses import dice_ce_loss, kspace_cycle_loss
from vsuda.metrics import assd, dice_score
from vsuda.segmentation import SoftPrediction
from vsuda.self_training import FoldScore, average_predictions, select_folds
from vsuda.utils import seed_everything

SEEDS = (0, 1, 2)


@pytest.fixture
def check(criterion_log):
    def _check(n, ok, detail):
        criterion_log(n, ok, detail)
        assert ok, f"criterion {n}: {detail}"

    return _check


# ----------------------------------------------------------- 1. metrics oracle


def _surface_oracle(mask):
    out = np.zeros_like(mask)
    for idx in zip(*np.nonzero(mask)):
        for ax, d in itertools.product(range(3), (-1, 1)):
            nb = list(idx)
            nb[ax] += d
            if not 0 <= nb[ax] < mask.shape[ax] or not mask[tuple(nb)]:
                out[idx] = True
    return out


def _assd_oracle(a, b, spacing):
    sa = np.argwhere(_surface_oracle(a)) * np.asarray(spacing)
    sb = np.argwhere(_surface_oracle(b)) * np.asarray(spacing)
    d = np.sqrt(((sa[:, None, :] - sb[None, :, :]) ** 2).sum(-1))
    return (d.min(1).sum() + d.min(0).sum()) / (len(sa) + len(sb))


def test_criterion_1_metrics_oracle(check):
    rng = np.random.default_rng(2024)
    t0 = time.time()
    worst, dice_mismatch = 0.0, 0
    for _ in range(50):
        a, b = rng.random((8, 8, 8)) < rng.uniform(0.1, 0.5), rng.random((8, 8, 8)) < rng.uniform(0.1, 0.5)
        spacing = tuple(rng.uniform(0.5, 2.0, 3))
        sa, sb = {tuple(i) for i in np.argwhere(a)}, {tuple(i) for i in np.argwhere(b)}
        dice_mismatch += dice_score(a.astype(int), b.astype(int)) != 2 * len(sa & sb) / (len(sa) + len(sb))
        worst = max(worst, abs(assd(a.astype(int), b.astype(int), spacing=spacing) - _assd_oracle(a, b, spacing)))
    secs = time.time() - t0
    check(1, dice_mismatch == 0 and worst < 1e-9 and secs < 10, f"dice mismatches {dice_mismatch}, max ASSD error {worst:.2e} mm, {secs:.1f} s")


# ------------------------------------------------------ 2. gradient check


def _fd_grad(f, x, h=1e-6):
    g = torch.zeros_like(x)
    flat, gflat = x.view(-1), g.view(-1)
    for i in range(flat.numel()):
        old = flat[i].item()
        flat[i] = old + h
        up = f(x).item()
        flat[i] = old - h
        down = f(x).item()
        flat[i] = old
        gflat[i] = (up - down) / (2 * h)
    return g


def test_criterion_2_loss_gradients(check):
    t0 = time.time()
    worst = 0.0
    gen = torch.Generator().manual_seed(7)
    for shape in [(2, 3, 5, 5), (1, 3, 4, 4, 3), (3, 3, 6), (2, 3, 3, 4)]:
        logits = torch.randn(shape, dtype=torch.float64, generator=gen)
        labels = torch.randint(0, 3, (shape[0],) + shape[2:], generator=gen)
        x = logits.clone().requires_grad_(True)
        dice_ce_loss(x, labels).backward()
        fd = _fd_grad(lambda z: dice_ce_loss(z, labels), logits.clone())
        worst = max(worst, float(((x.grad - fd).abs() / (torch.maximum(x.grad.abs(), fd.abs()) + 1e-6)).max()))
    secs = time.time() - t0
    check(2, worst < 1e-3 and secs < 30, f"max relative error {worst:.2e}, {secs:.1f} s")


# --------------------------------------------------------- 3. k-space loss


def test_criterion_3_kspace_loss(check):
    rng = np.random.default_rng(11)
    t0 = time.time()
    ok_diff = ok_same = 0
    worst_l2 = 0.0
    for _ in range(20):
        x = torch.from_numpy(rng.normal(size=(2, 1, 16, 12)))
        y = torch.from_numpy(rng.normal(size=(2, 1, 16, 12)))
        ok_diff += kspace_cycle_loss(x, y).item() > 0
        ok_same += kspace_cycle_loss(x, x.clone()).item() == 0.0
        worst_l2 = max(worst_l2, abs(kspace_cycle_loss(x, y, p=2).item() - ((x - y) ** 2).mean().item()))
    secs = time.time() - t0
    check(3, ok_diff == 20 and ok_same == 20 and worst_l2 < 1e-6 and secs < 10,
          f"{ok_diff}/20 distinct pairs > 0, {ok_same}/20 identical pairs == 0, L2 vs image MSE {worst_l2:.1e}, {secs:.1f} s")


# -------------------------------------------------- 4. weighting and gating


def _small_batch(seed):
    g = torch.Generator().manual_seed(seed)
    labels = torch.zeros(2, 32, 32, dtype=torch.long)
    labels[:, 10:18, 12:20] = 1
    labels[:, 20:23, 5:8] = 2
    return {"real_a": torch.rand(2, 1, 32, 32, generator=g) * 2 - 1, "labels_a": labels, "real_b": torch.rand(2, 1, 32, 32, generator=g) * 2 - 1}


def _twin_steps(model, cfg, epochs):
    opt = torch.optim.Adam(model.generator_parameters(), lr=1e-3)
    set_requires_grad(model.D_a, False)
    set_requires_grad(model.D_b, False)
    for e in epochs:
        for s in range(3):
            opt.zero_grad(set_to_none=True)
            generator_step_loss(model, _small_batch(100 * e + s), e, cfg)[0].backward()
            opt.step()
    return model


def _same(a, b):
    return all(torch.equal(p, q) for p, q in zip(a.state_dict().values(), b.state_dict().values()))


def test_criterion_4_weighting_and_gating(check, quickstart_runs):
    # every step logged by the segmenter-augmented conversion of each desk run
    w = {"adv": 1.0, "cyc": 10.0, "id": 5.0, "seg": 100.0}
    n_steps, worst, gate_ok = 0, 0.0, True
    for run in quickstart_runs.values():
        for rec in csv.DictReader(io.StringIO((run / "conversion/loss_steps.csv").read_text())):
            manual = sum(w[g] * float(rec[t]) for g, ts in GROUPS.items() for t in ts if rec.get(t))
            worst = max(worst, abs(float(rec["total"]) - manual))
            gate_ok &= bool(rec["seg_b_fake"]) == (int(rec["epoch"]) >= 5)
            n_steps += 1
    # twin runs: identical until the fake-hrT2 term switches on at epoch 5
    seed_everything(0)
    base = build_conversion_model(GeneratorConfig(base_channels=4), DiscriminatorConfig(base_channels=4))
    gated, never = ConversionTrainConfig(epochs=10, seg_start_epoch=5), ConversionTrainConfig(epochs=10, seg_start_epoch=9)
    a = _twin_steps(copy.deepcopy(base), gated, range(5))
    b = _twin_steps(copy.deepcopy(base), never, range(5))
    equal_before = _same(a, b)
    differ_after = not _same(_twin_steps(a, gated, [5]), _twin_steps(b, never, [5]))
    check(4, n_steps > 0 and worst < 1e-6 and gate_ok and equal_before and differ_after,
          f"{n_steps} logged steps, max |total - 1:10:5:100 sum| {worst:.1e}, gate on from epoch 5: {gate_ok}, "
          f"twins equal through epoch 4: {equal_before}, diverge at epoch 5: {differ_after}")


# ----------------------------------------------------- 5. architecture dry run


def test_criterion_5_dry_run(check, capsys, tmp_path, monkeypatch):
    monkeypatch.chdir(tmp_path)
    rc = main(["seg", "train", "--dim", "3d", "--dry-run"])
    out = capsys.readouterr().out
    channels = [int(line.split("channels")[1].split()[0]) for line in out.splitlines() if "channels" in line]
    ok = rc == 0 and "40x256x192" in out and "5x4x3" in out and "6 downsamplings" in out and channels == [32, 64, 128, 256, 320, 320, 320]
    ok &= not any(tmp_path.iterdir())
    check(5, ok, f"exit {rc}, channel ladder {channels}, bottleneck 5x4x3 listed: {'5x4x3' in out}")


# ------------------------------------------------ shared desk quickstart runs


@pytest.fixture(scope="module")
def quickstart_runs(tmp_path_factory):
    root = tmp_path_factory.mktemp("quickstart")
    runs = {}
    for seed in SEEDS:
        t0 = time.time()
        rc = main(["quickstart", "--seed", str(seed), "--out", str(root / f"seed{seed}")])
        assert rc == 0, f"quickstart seed {seed} exited {rc}"
        (root / f"seed{seed}" / "wall_seconds.txt").write_text(f"{time.time() - t0:.1f}\n")
        runs[seed] = root / f"seed{seed}"
    return runs


def _summary(run):
    return json.loads((run / "reports/summary.json").read_text())


def test_criterion_6_shape_preservation(check, quickstart_runs):
    aug = [_summary(r)["probe_augmented_vs_dice"] for r in quickstart_runs.values()]
    plain = [_summary(r)["probe_plain_vs_dice"] for r in quickstart_runs.values()]
    n_cases = len(load_dataset(quickstart_runs[0] / "phantom/domainA/manifest.json")) + len(load_dataset(quickstart_runs[0] / "phantom/domainB/manifest.json"))
    gap = float(np.mean(aug) - np.mean(plain))
    detail = ", ".join(f"seed {s}: {a:.3f} vs {p:.3f}" for s, a, p in zip(SEEDS, aug, plain))
    check(6, n_cases == 20 and gap >= 0.02, f"{n_cases}-case cohort, probe VS Dice augmented vs plain ({detail}); mean gap {gap:+.4f} (need >= 0.02)")


def test_criterion_7_self_training_direction(check, quickstart_runs):
    s2 = [_summary(r)["stage2_vs_dice"] for r in quickstart_runs.values()]
    fin = [_summary(r)["final_vs_dice"] for r in quickstart_runs.values()]
    m2, mf = float(np.mean(s2)), float(np.mean(fin))
    detail = ", ".join(f"seed {s}: {a:.3f} -> {b:.3f}" for s, a, b in zip(SEEDS, s2, fin))
    check(7, mf >= m2 - 0.01 and mf >= 0.80, f"VS Dice stage 2 -> self-trained ({detail}); means {m2:.4f} -> {mf:.4f} (need >= stage 2 - 0.01 and >= 0.80)")


# ------------------------------------------------------- 8. ensemble algebra


def _soft(seed):
    p = np.random.default_rng(seed).dirichlet(np.ones(3), size=(4, 6, 5)).transpose(3, 0, 1, 2)
    return SoftPrediction(p.astype(np.float32), "c")


def _sort_and_take(table, n_2d, n_3d):
    out = []
    for dim, n in ((2, n_2d), (3, n_3d)):
        ranked = sorted((s for s in table if s.dim == dim), key=lambda s: (-s.score, s.fold))
        out += [(dim, s.fold) for s in ranked[:n]]
    return out


def test_criterion_8_ensemble_algebra(check):
    p = _soft(0)
    idem = all(np.array_equal(average_predictions([p] * n).probs, p.probs) for n in range(1, 6))
    preds = [_soft(s) for s in range(1, 6)]
    ref = average_predictions(preds).probs
    perm = all(np.array_equal(average_predictions([preds[i] for i in order]).probs, ref) for order in itertools.permutations(range(5)))
    rng = np.random.default_rng(5)
    tables_ok = 0
    for _ in range(200):
        scores = rng.choice([0.2, 0.5, 0.5, 0.75, 0.9, 0.9], size=10)
        table = [FoldScore(2 if i < 5 else 3, i % 5, float(s)) for i, s in enumerate(scores)]
        rng.shuffle(table)
        tables_ok += [(m.dim, m.fold) for m in select_folds(table, 2, 3).members] == _sort_and_take(table, 2, 3)
    check(8, idem and perm and tables_ok == 200, f"idempotent: {idem}, 120 permutations identical: {perm}, selection matches oracle on {tables_ok}/200 tables")


# ---------------------------------------------------------- 9. determinism

DET = """
seed: 5
phantom:
  spec: {grid: [12, 32, 32], spacing: [1.5, 1.0, 1.0], vs_radius_mm: [2.5, 3.5], cochlea_radius_mm: [1.5, 2.0]}
  n_annotated_a: 4
  n_unannotated_b: 3
conversion:
  generator: {base_channels: 8}
  discriminator: {base_channels: 8}
  train: {epochs: 3, steps_per_epoch: 3, batch_size: 2, seg_start_epoch: 1, lr: 1.0e-3}
segmentation:
  stage2_k: 2
  net_3d: {patch_size: [8, 16, 16], strides: [[1, 2, 2], [2, 2, 2]], base_channels: 4}
  train_3d: {epochs: 2, iterations_per_epoch: 3, val_every: 1}
  net_2d: {dim: 2, patch_size: [32, 32], strides: [[2, 2], [2, 2]], base_channels: 4}
  train_2d: {epochs: 2, iterations_per_epoch: 3, val_every: 1}
self_training: {k: 2, n_2d: 1, n_3d: 1}
"""


def _chain(root, cfg):
    c = ["--config", str(cfg)]
    assert main(["phantom", "generate", *c, "--out", str(root / "ph")]) == 0
    a, b = str(root / "ph/domainA/manifest.json"), str(root / "ph/domainB/manifest.json")
    assert main(["convert", "train", *c, "--domain-a", a, "--domain-b", b, "--out", str(root / "conv")]) == 0
    assert main(["convert", "apply", *c, "--checkpoint", str(root / "conv/checkpoint.pt"), "--data", a, "--out", str(root / "synth")]) == 0
    synth = str(root / "synth/manifest.json")
    assert main(["seg", "train", *c, "--data", synth, "--dim", "3d", "--out", str(root / "stage2")]) == 0
    assert main(["seg", "infer", *c, "--checkpoint", str(root / "stage2/folds/3d"), "--data", b, "--out", str(root / "stage2_pred")]) == 0
    assert main(["selftrain", "run", *c, "--stage2", str(root / "stage2/folds/3d"), "--synthetic", synth, "--real", b, "--out", str(root / "st")]) == 0
    assert main(["ensemble", "predict", *c, "--ensemble", str(root / "st/ensemble/spec.json"), "--data", b, "--out", str(root / "final")]) == 0


def test_criterion_9_determinism(check, tmp_path):
    (tmp_path / "det.yaml").write_text(DET)
    _chain(tmp_path / "r1", tmp_path / "det.yaml")
    _chain(tmp_path / "r2", tmp_path / "det.yaml")
    csvs = sorted(p.relative_to(tmp_path / "r1") for p in (tmp_path / "r1").rglob("*.csv"))
    csv_diff = [str(p) for p in csvs if (tmp_path / "r1" / p).read_bytes() != (tmp_path / "r2" / p).read_bytes()]
    maps = 0
    map_diff = []
    for stage in ("stage2_pred", "st/pseudo_labels", "final"):
        d1, d2 = load_dataset(tmp_path / "r1" / stage / "manifest.json"), load_dataset(tmp_path / "r2" / stage / "manifest.json")
        for c1, c2 in zip(d1, d2):
            maps += 1
            if not np.array_equal(c1.load_labels().data, c2.load_labels().data):
                map_diff.append(f"{stage}/{c1.case_id}")
    kinds = {p.name for p in csvs}
    ok = not csv_diff and not map_diff and {"loss_history.csv", "loss_steps.csv", "history.csv"} <= kinds and maps > 0
    check(9, ok, f"{len(csvs)} loss/metric CSVs, {len(csv_diff)} differ; {maps} label maps, {len(map_diff)} differ")


# ------------------------------------------------------- 10. end to end


def test_criterion_10_end_to_end(check, quickstart_runs):
    times = {s: float((r / "wall_seconds.txt").read_text()) for s, r in quickstart_runs.items()}
    ok = True
    for run in quickstart_runs.values():
        comp = (run / "reports/comparison.csv").read_text()
        ok &= "delta_dice" in comp and (run / "run_manifest.json").exists()
        for sub in ("phantom", "conversion", "synthetic", "stage2", "selftrain", "final"):
            ok &= (run / sub).is_dir()
    ok &= max(times.values()) < 45 * 60
    detail = ", ".join(f"seed {s}: {t / 60:.1f} min" for s, t in times.items())
    check(10, ok, f"four stages plus comparison report per run; wall time {detail} (need < 45 min)")
