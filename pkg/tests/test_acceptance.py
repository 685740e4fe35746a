"""Acceptance suite: one test per criterion, each printing a PASS/FAIL line.

The training criteria (7 to 11) train real networks on CPU and take hours.
Set ANISOSEG_ACCEPTANCE_DIR to keep their datasets and runs between
sessions; finished runs with an identical config are then reused.
"""
import os
import time
from pathlib import Path

import numpy as np
import pytest
import torch

from anisoseg import metrics as M
from anisoseg.losses import (
    HDLConfig,
    check_hdl_gradient,
    hdl,
    pooled_targets,
    total_loss,
)
from anisoseg.network import (
    NetworkConfig,
    Prediction,
    build_network,
    load_checkpoint,
    receptive_field,
)
from anisoseg.trainer import (
    BEST_DIR,
    AblationCell,
    TrainConfig,
    attention_focus,
    load_prepared,
    predict,
    run_ablation,
    sweep_lambda,
    train,
    train_and_test,
)
from anisoseg.volume_io import LabelVolume, Manifest, SyntheticSpec, make_dataset
from oracles import assd_oracle, dice_oracle, rve_oracle

# Reduced CPU profile for the desk-scale run (criteria 7, 10, 11).
DESK_SPEC = SyntheticSpec(seed=1000, shape=(16, 64, 64), ellipsoid_radii_mm=((3, 7),) * 3)
DESK_TRAIN = TrainConfig(max_steps=2000)

# Smaller profile for the multi-seed comparisons (criteria 8, 9).
COMPARE_SPEC = SyntheticSpec(seed=5000, shape=(16, 32, 32), ellipsoid_radii_mm=((2, 4), (2, 4.5), (2, 4.5)))
COMPARE_TRAIN = TrainConfig(max_steps=2500, val_interval_steps=250)
SEEDS = (0, 1, 2)

SPLIT = (40, 10, 10)


def _workdir(tmp_path_factory, name):
    root = os.environ.get("ANISOSEG_ACCEPTANCE_DIR")
    if root:
        path = Path(root) / name
        path.mkdir(parents=True, exist_ok=True)
        return path
    return tmp_path_factory.mktemp(name)


def _dataset(root, spec):
    if not (root / "manifest.json").exists():
        make_dataset(spec, *SPLIT, root)
    return Manifest.load(root)


@pytest.fixture(scope="session")
def desk(tmp_path_factory):
    root = _workdir(tmp_path_factory, "desk")
    manifest = _dataset(root / "data", DESK_SPEC)
    t0 = time.time()
    record, rows, run_dir = train_and_test(DESK_TRAIN, manifest, root / "runs")
    return {"manifest": manifest, "record": record, "rows": rows, "run_dir": run_dir,
            "root": root, "elapsed": time.time() - t0}


@pytest.fixture(scope="session")
def compare(tmp_path_factory):
    root = _workdir(tmp_path_factory, "compare")
    return {"manifest": _dataset(root / "data", COMPARE_SPEC), "root": root}


# ---------------------------------------------------------------------------
# Criterion 1
# ---------------------------------------------------------------------------

def _plain_soft_dice(P, G, eps=1e-5):
    P, G = P.reshape(P.shape[0], -1), G.reshape(G.shape[0], -1)
    per_class = (2 * (P * G).sum(1) + eps) / ((P + G).sum(1) + eps)
    return 1 - per_class.mean()


def test_criterion_01_hdl_reduces_to_soft_dice(acceptance_report):
    rng = np.random.default_rng(1)
    t0 = time.time()
    worst = 0.0
    for _ in range(200):
        spatial = tuple(rng.integers(1, 9, size=3))
        logits = rng.normal(size=(2,) + spatial)
        P = np.exp(logits) / np.exp(logits).sum(0)
        labels = rng.integers(0, 2, size=spatial)
        G = np.stack([labels == 0, labels == 1]).astype(np.float64)
        got = float(hdl(torch.as_tensor(P), torch.as_tensor(G), HDLConfig(lam=0.0)))
        worst = max(worst, abs(got - _plain_soft_dice(P, G)))
    elapsed = time.time() - t0
    passed = worst < 1e-7 and elapsed < 10
    acceptance_report(1, "loss identity", passed, f"max |hdl(0) - soft Dice| = {worst:.2e} over 200 pairs in {elapsed:.1f}s")
    assert passed


# ---------------------------------------------------------------------------
# Criterion 2
# ---------------------------------------------------------------------------

def test_criterion_02_gradient_check(acceptance_report):
    t0 = time.time()
    worst = {}
    for lam in (0.0, 0.4, 0.6, 1.0):
        reports = [check_hdl_gradient(lam, seed=s, h=1e-5, tolerance=1e-4) for s in range(20)]
        worst[lam] = max(r.max_rel_error for r in reports)
    elapsed = time.time() - t0
    passed = max(worst.values()) < 1e-4 and elapsed < 60
    detail = ", ".join(f"λ={k}: {v:.1e}" for k, v in worst.items())
    acceptance_report(2, "gradient correctness", passed, f"max rel error {detail} ({elapsed:.1f}s)")
    assert passed


# ---------------------------------------------------------------------------
# Criterion 3
# ---------------------------------------------------------------------------

def test_criterion_03_perfect_prediction_floor(acceptance_report):
    schedule = NetworkConfig().schedule
    rng = np.random.default_rng(3)
    labels = rng.integers(0, 2, size=(8, 8, 8))
    G = torch.as_tensor(np.stack([labels == 0, labels == 1]).astype(np.float64))
    # foreground aligned with every pooling block, so each pooled mask is binary
    gf = np.zeros((1, 1, 16, 32, 32))
    gf[0, 0, 4:12, 0:16, 16:32] = 1
    onehot = torch.as_tensor(np.concatenate([1 - gf, gf], axis=1))
    pooled = pooled_targets(torch.as_tensor(gf), schedule)
    pred = Prediction(logits=onehot, probs=onehot, attentions=[p.clone() for p in pooled])
    worst_hdl, worst_total = 0.0, 0.0
    for lam in (0.0, 0.5, 1.0):
        cfg = HDLConfig(lam=lam)
        worst_hdl = max(worst_hdl, float(hdl(G, G, cfg)))
        worst_total = max(worst_total, float(total_loss(pred, onehot, pooled, cfg, "SpvPA")))
    # informational: a foreground that straddles pooling blocks leaves a Dice floor
    gf_soft = np.zeros_like(gf)
    gf_soft[0, 0, 3:11, 5:19, 9:27] = 1
    onehot_soft = torch.as_tensor(np.concatenate([1 - gf_soft, gf_soft], axis=1))
    pooled_soft = pooled_targets(torch.as_tensor(gf_soft), schedule)
    soft = Prediction(logits=onehot_soft, probs=onehot_soft, attentions=[p.clone() for p in pooled_soft])
    floor = float(total_loss(soft, onehot_soft, pooled_soft, HDLConfig(lam=0.5), "SpvPA"))
    passed = worst_hdl <= 1e-4 and worst_total <= 1e-4
    acceptance_report(
        3, "perfect-prediction floor", passed,
        f"max hdl(G,G) = {worst_hdl:.1e}, max total_loss (block-aligned mask) = {worst_total:.1e}; "
        f"non-aligned mask floor {floor:.3f} (soft pooled targets)",
    )
    assert passed


# ---------------------------------------------------------------------------
# Criterion 4
# ---------------------------------------------------------------------------

def test_criterion_04_shape_contract(acceptance_report):
    torch.manual_seed(0)
    net = build_network(NetworkConfig(variant="2.5D", attention_mode="SpvPA")).eval()
    x = torch.randn(2, 1, 32, 128, 128)
    with torch.no_grad():
        feats = net.encode(x)
        pred = net(x)
    expected = [(2, 16, 32, 128, 128), (2, 32, 32, 64, 64), (2, 48, 32, 32, 32), (2, 64, 16, 16, 16), (2, 80, 8, 8, 8)]
    enc = [tuple(f.shape) for f in feats]
    att = [tuple(a.shape) for a in pred.attentions]
    passed = (
        tuple(pred.probs.shape) == (2, 2, 32, 128, 128)
        and enc == expected
        and att == [(2, 1) + e[2:] for e in expected]
    )
    acceptance_report(4, "shape/topology contract", passed, f"output {tuple(pred.probs.shape)}, {len(att)} attention maps {att}")
    assert passed


# ---------------------------------------------------------------------------
# Criterion 5
# ---------------------------------------------------------------------------

def test_criterion_05_receptive_field(acceptance_report):
    hand = [(1, 5, 5), (1, 14, 14), (5, 32, 32), (14, 68, 68), (32, 140, 140)]
    hand_mm = [(1.5, 2.0, 2.0), (1.5, 5.6, 5.6), (7.5, 12.8, 12.8), (21.0, 27.2, 27.2), (48.0, 56.0, 56.0)]
    table = receptive_field(NetworkConfig(variant="2.5D"), (1.5, 0.4, 0.4))
    vox_ok = [row["rf_voxels"] for row in table] == hand
    mm_ok = all(np.allclose(row["rf_mm"], e, rtol=0, atol=1e-12) for row, e in zip(table, hand_mm))
    d, h, _ = table[-1]["rf_mm"]
    ratio = h / d
    flat = receptive_field(NetworkConfig(variant="2D"), (1.5, 0.4, 0.4))
    flat_ok = all(row["rf_mm"][0] == 1.5 for row in flat)
    passed = vox_ok and mm_ok and 1 / 1.5 <= ratio <= 1.5 and flat_ok
    acceptance_report(
        5, "receptive-field isotropy", passed,
        f"bottleneck rf {table[-1]['rf_mm']} mm, in/through-plane ratio {ratio:.3f}; "
        f"2D variant through-plane rf {[row['rf_mm'][0] for row in flat]}",
    )
    assert passed


# ---------------------------------------------------------------------------
# Criterion 6
# ---------------------------------------------------------------------------

def test_criterion_06_metric_oracles(acceptance_report):
    rng = np.random.default_rng(6)
    t0 = time.time()
    mismatches, worst_assd = 0, 0.0
    for _ in range(100):
        shape = tuple(rng.integers(1, 9, size=3))
        while True:
            a = rng.random(shape) < rng.uniform(0.1, 0.7)
            b = rng.random(shape) < rng.uniform(0.1, 0.7)
            if a.any() and b.any():
                break
        spacing = tuple(rng.uniform(0.2, 2.0, size=3))
        A = LabelVolume(a.astype(np.uint8), spacing)
        B = LabelVolume(b.astype(np.uint8), spacing)
        mismatches += M.dice_score(A, B) != dice_oracle(a, b)
        mismatches += M.rve(A, B) != rve_oracle(a, b, spacing)
        worst_assd = max(worst_assd, abs(M.assd(A, B) - assd_oracle(a, b, np.array(spacing))))
    elapsed = time.time() - t0
    passed = mismatches == 0 and worst_assd <= 1e-9 and elapsed < 60
    acceptance_report(
        6, "metric oracles", passed,
        f"{mismatches} dice/rve mismatches, max ASSD error {worst_assd:.1e} mm over 100 pairs ({elapsed:.1f}s)",
    )
    assert passed


# ---------------------------------------------------------------------------
# Criteria 7, 10, 11: desk-scale training
# ---------------------------------------------------------------------------

@pytest.mark.slow
def test_criterion_07_desk_training(desk, acceptance_report):
    summary = M.summarize(desk["rows"])
    dice, assd = summary["dice"]["mean"], summary["assd_mm"]["mean"]
    wall = desk["record"]["wall_time_s"]
    passed = dice >= 0.85 and assd is not None and assd <= 1.0 and wall <= 7200
    acceptance_report(
        7, "desk-scale training", passed,
        f"test Dice {dice:.4f}, ASSD {assd:.3f} mm ({M.format_summary(summary)}); "
        f"best step {desk['record']['best_step']}/{desk['record']['steps_completed']}, training {wall / 60:.1f} min",
    )
    assert passed


@pytest.mark.slow
def test_criterion_10_attention_focus(desk, acceptance_report):
    model, _ = load_checkpoint(desk["run_dir"] / BEST_DIR)
    cfg = TrainConfig(network=model.config)
    ratios = []
    for case in load_prepared(desk["manifest"], "test", cfg):
        _, maps = predict(model, case, cfg.depth_resample)
        fg, bg = attention_focus(maps[0], case.label.data)
        ratios.append(fg / bg if bg > 0 else np.inf)
    hits = sum(r >= 2.0 for r in ratios)
    passed = hits >= 8
    acceptance_report(
        10, "attention focus", passed,
        f"{hits}/{len(ratios)} test cases with foreground/background level-1 attention ≥ 2 "
        f"(ratios {', '.join(f'{r:.2f}' for r in ratios)})",
    )
    assert passed


@pytest.mark.slow
def test_criterion_11_determinism(desk, acceptance_report, tmp_path):
    first = desk["record"]
    again = train(TrainConfig.model_validate(first["config"]), desk["manifest"], tmp_path / "repeat")
    traj1 = [(t["step"], t["val_dice"]) for t in first["trajectory"]]
    traj2 = [(t["step"], t["val_dice"]) for t in again["trajectory"]]
    passed = traj1 == traj2 and first["train_losses"] == again["train_losses"]
    acceptance_report(
        11, "determinism", passed,
        f"{len(traj1)} validation points, trajectories {'identical' if traj1 == traj2 else 'differ'}; "
        f"{len(first['train_losses'])} training losses {'identical' if first['train_losses'] == again['train_losses'] else 'differ'}",
    )
    assert passed


# ---------------------------------------------------------------------------
# Criteria 8, 9: multi-seed comparisons
# ---------------------------------------------------------------------------

def _per_case_dice(entry):
    out = {}
    for seed, run in zip(SEEDS, entry["runs"]):
        for row in M.read_metrics_csv(Path(run) / "metrics_test.csv"):
            out[f"seed{seed}/{row.case_id}"] = row.dice
    return out


def _paired_p(a, b):
    keys = sorted(set(a) & set(b))
    return M.paired_ttest([a[k] for k in keys], [b[k] for k in keys]).p


@pytest.mark.slow
def test_criterion_08_ablation_direction(compare, acceptance_report):
    cells = [
        AblationCell(name="2D", variant="2D"),
        AblationCell(name="2.5D", variant="2.5D"),
        AblationCell(name="2.5D+SpvPA", variant="2.5D", attention_mode="SpvPA"),
    ]
    table = run_ablation(cells, COMPARE_TRAIN, compare["manifest"], compare["root"] / "ablation",
                         seeds=SEEDS, baseline="2.5D")
    by_name = {row["name"]: row for row in table}
    mean = {n: by_name[n]["summary"]["dice"]["mean"] for n in by_name}
    dice = {n: _per_case_dice(by_name[n]) for n in by_name}
    p_25_vs_2 = _paired_p(dice["2.5D"], dice["2D"])
    p_spv_vs_25 = _paired_p(dice["2.5D+SpvPA"], dice["2.5D"])
    passed = mean["2.5D"] >= mean["2D"] and mean["2.5D+SpvPA"] >= mean["2.5D"]
    acceptance_report(
        8, "ablation direction", passed,
        f"mean test Dice 2D {mean['2D']:.4f}, 2.5D {mean['2.5D']:.4f} (p={p_25_vs_2:.3g} vs 2D), "
        f"2.5D+SpvPA {mean['2.5D+SpvPA']:.4f} (p={p_spv_vs_25:.3g} vs 2.5D), {len(SEEDS)} seeds",
    )
    assert passed


@pytest.mark.slow
def test_criterion_09_lambda_sweep(compare, acceptance_report):
    # same runs root as criterion 8, so the λ=0 SpvPA runs are shared
    rows = sweep_lambda([0.0, 0.4, 0.6], COMPARE_TRAIN, compare["manifest"], compare["root"] / "ablation", seeds=SEEDS)
    mean = {r["lambda"]: r["dice_mean"] for r in rows}
    passed = max(mean[0.4], mean[0.6]) >= mean[0.0]
    acceptance_report(
        9, "λ-sweep shape", passed,
        "mean test Dice " + ", ".join(f"λ={k:g}: {v:.4f}" for k, v in mean.items()) + f", {len(SEEDS)} seeds",
    )
    assert passed
