"""Training loop, evaluation, ablation/λ-sweep harness and attention export."""
from __future__ import annotations

import csv
import hashlib
import json
import logging
import math
import time
from dataclasses import dataclass
from pathlib import Path
from typing import Dict, List, Literal, Optional, Sequence, Tuple

import numpy as np
import torch
import torch.nn.functional as F
from pydantic import BaseModel, ConfigDict, Field

from . import metrics as M
from .errors import ConfigurationError, NonFiniteLossError
from .losses import HDLConfig, loss_terms, pooled_targets
from .network import NetworkConfig, SegmentationNet, build_network, load_checkpoint, save_checkpoint
from .volume_io import LabelVolume, Manifest, Volume, normalize, read_case, write_case

log = logging.getLogger(__name__)

RUN_RECORD_NAME = "run_record.json"
BEST_DIR = "best"


class TrainSettings(BaseModel):
    """Optimization protocol: Adam + L2 weight decay, step-halved learning rate, early stopping."""

    model_config = ConfigDict(extra="forbid", frozen=True)

    lr_init: float = Field(default=1e-4, gt=0)
    lr_halving_period_steps: int = Field(default=10_000, ge=1)
    weight_decay: float = Field(default=1e-7, ge=0)
    batch_size: int = Field(default=2, ge=1)
    max_steps: int = Field(default=5000, ge=1)
    val_interval_steps: int = Field(default=500, ge=1)
    early_stop_patience: int = Field(default=5, ge=1)
    seed: int = 0
    deterministic: bool = True
    eval_train_split: bool = True
    depth_resample: Literal["nearest", "linear"] = "linear"
    log_interval_steps: int = Field(default=100, ge=1)


class TrainConfig(TrainSettings):
    hdl: HDLConfig = HDLConfig()
    network: NetworkConfig = NetworkConfig()


def lr_at(step: int, config: TrainConfig) -> float:
    return config.lr_init * 0.5 ** (step // config.lr_halving_period_steps)


def set_determinism(seed: int, deterministic: bool = True) -> None:
    torch.manual_seed(seed)
    np.random.seed(seed % 2**32)
    torch.use_deterministic_algorithms(deterministic)


# ---------------------------------------------------------------------------
# Data preparation
# ---------------------------------------------------------------------------

@dataclass
class PreparedCase:
    case_id: str
    image: torch.Tensor  # (1, D, H, W), standardized, network grid
    onehot: torch.Tensor  # (C, D, H, W), network grid
    label: LabelVolume  # original grid
    volume: Volume  # original grid, standardized


def network_depth(depth: int, spacing_mm, config: TrainConfig) -> int:
    """Depth the 3D variant works at: near-isotropic, rounded to the pooling period."""
    if config.network.variant != "3D":
        return depth
    period = config.network.schedule.cumulative_factors()[-1][0]
    iso = depth * spacing_mm[0] / spacing_mm[2]
    return max(period, int(round(iso / period)) * period)


def _resample_depth(t: torch.Tensor, depth: int, mode: str) -> torch.Tensor:
    """Resample a (N, C, D, H, W) tensor along depth only."""
    if t.shape[2] == depth:
        return t
    size = (depth,) + tuple(t.shape[3:])
    if mode == "nearest":
        return F.interpolate(t, size=size, mode="nearest")
    return F.interpolate(t, size=size, mode="trilinear", align_corners=False)


def prepare_case(volume: Volume, label: LabelVolume, config: TrainConfig) -> PreparedCase:
    vol = normalize(volume)
    image = torch.from_numpy(np.array(vol.data, dtype=np.float32))[None]
    fg = torch.from_numpy(np.array(label.data, dtype=np.float32))
    onehot = torch.stack([1.0 - fg, fg])
    depth = network_depth(image.shape[1], vol.spacing_mm, config)
    if depth != image.shape[1]:
        image = _resample_depth(image[None], depth, config.depth_resample)[0]
        fg_r = _resample_depth(fg[None, None], depth, "nearest")[0, 0]
        onehot = torch.stack([1.0 - fg_r, fg_r])
    return PreparedCase(volume.id, image, onehot, label, vol)


def load_prepared(manifest: Manifest, split: str, config: TrainConfig) -> List[PreparedCase]:
    return [prepare_case(v, l, config) for v, l in manifest.load_split(split)]


def batch_order(n_cases: int, batch_size: int, seed: int, n_batches: int) -> List[List[int]]:
    """Case indices for each step: reshuffled epochs drawn from a seeded generator."""
    rng = np.random.default_rng(seed)
    order: List[int] = []
    batches = []
    for _ in range(n_batches):
        batch = []
        while len(batch) < batch_size:
            if not order:
                order = list(rng.permutation(n_cases))
            batch.append(int(order.pop(0)))
        batches.append(batch)
    return batches


# ---------------------------------------------------------------------------
# Inference
# ---------------------------------------------------------------------------

@torch.no_grad()
def predict(model: SegmentationNet, case: PreparedCase, mode: str = "linear"):
    """Probabilities on the original grid and attention maps on the network grid."""
    model.eval()
    pred = model(case.image[None])
    probs = pred.probs
    depth = case.label.shape[0]
    if probs.shape[2] != depth:
        probs = _resample_depth(probs, depth, mode)
    return probs[0].numpy(), [a[0, 0].numpy() for a in pred.attentions]


def segment(probs: np.ndarray) -> np.ndarray:
    return np.argmax(probs, axis=0).astype(np.uint8)


def evaluate_cases(model: SegmentationNet, cases: Sequence[PreparedCase], mode: str = "linear") -> List[M.CaseMetrics]:
    rows = []
    for case in cases:
        probs, _ = predict(model, case, mode)
        seg = LabelVolume(segment(probs), case.label.spacing_mm, case.case_id)
        rows.append(M.case_metrics(case.case_id, seg, case.label))
    return rows


def mean_dice(rows: Sequence[M.CaseMetrics]) -> float:
    return float(np.mean([r.dice for r in rows]))


# ---------------------------------------------------------------------------
# Training
# ---------------------------------------------------------------------------

def _stack(cases: Sequence[PreparedCase], idx: Sequence[int]):
    return torch.stack([cases[i].image for i in idx]), torch.stack([cases[i].onehot for i in idx])


def train(
    config: TrainConfig,
    manifest,
    output_dir,
    model: Optional[SegmentationNet] = None,
) -> dict:
    """Optimize the configured loss and return the RunRecord (also written as JSON).

    ``model`` replaces the freshly built network (used to inject stubs).
    """
    output_dir = Path(output_dir)
    output_dir.mkdir(parents=True, exist_ok=True)
    manifest = manifest if isinstance(manifest, Manifest) else Manifest.load(manifest)
    (output_dir / "config.json").write_text(json.dumps(config.model_dump(mode="json", by_alias=True), indent=2) + "\n")

    set_determinism(config.seed, config.deterministic)
    if model is None:
        model = build_network(config.network)
    train_cases = load_prepared(manifest, "train", config)
    val_cases = load_prepared(manifest, "val", config)
    mode = config.network.attention_mode
    schedule = config.network.schedule

    params = [p for p in model.parameters() if p.requires_grad]
    # Adam's weight_decay adds wd * w to the gradient (L2, not decoupled)
    optimizer = torch.optim.Adam(params, lr=config.lr_init, weight_decay=config.weight_decay) if params else None
    batches = batch_order(len(train_cases), config.batch_size, config.seed, config.max_steps)

    record = {
        "config": config.model_dump(mode="json", by_alias=True),
        "trajectory": [],
        "train_losses": [],
        "best_step": None,
        "best_val_dice": None,
        "best_train_dice": None,
        "best_checkpoint": str(output_dir / BEST_DIR),
        "stop_reason": None,
        "steps_completed": 0,
    }
    best = -math.inf
    stale = 0
    t0 = time.time()
    for step in range(1, config.max_steps + 1):
        model.train()
        lr = lr_at(step - 1, config)
        idx = batches[step - 1]
        x, onehot = _stack(train_cases, idx)
        pred = model(x)
        pooled = pooled_targets(onehot[:, 1:2], schedule) if mode == "SpvPA" else []
        terms = loss_terms(pred, onehot, pooled, config.hdl, mode)
        loss = terms["total"]
        if not torch.isfinite(loss):
            raise NonFiniteLossError(
                f"non-finite loss at step {step} (cases {[train_cases[i].case_id for i in idx]}): "
                + ", ".join(f"{k}={float(v)}" for k, v in terms.items()),
                step=step,
                batch_ids=[train_cases[i].case_id for i in idx],
                components={k: float(v) for k, v in terms.items()},
            )
        if optimizer is not None and loss.requires_grad:
            for group in optimizer.param_groups:
                group["lr"] = lr
            optimizer.zero_grad(set_to_none=True)
            loss.backward()
            optimizer.step()
        record["train_losses"].append(float(loss.detach()))
        record["steps_completed"] = step
        if step % config.log_interval_steps == 0:
            recent = record["train_losses"][-config.log_interval_steps:]
            log.info("step %d lr %.2e loss %.4f (%.1fs)", step, lr, float(np.mean(recent)), time.time() - t0)

        if step % config.val_interval_steps == 0 or step == config.max_steps:
            val_dice = mean_dice(evaluate_cases(model, val_cases, config.depth_resample))
            entry = {"step": step, "val_dice": val_dice, "lr": lr}
            improved = val_dice > best
            if improved:
                best = val_dice
                stale = 0
                if config.eval_train_split:
                    entry["train_dice"] = mean_dice(evaluate_cases(model, train_cases, config.depth_resample))
                save_checkpoint(output_dir / BEST_DIR, model, step, {"val_dice": val_dice, "seed": config.seed})
                record.update(best_step=step, best_val_dice=val_dice, best_train_dice=entry.get("train_dice"))
            else:
                stale += 1
            record["trajectory"].append(entry)
            log.info("validation at step %d: dice %.4f%s", step, val_dice, " (best)" if improved else "")
            if stale >= config.early_stop_patience:
                record["stop_reason"] = "early_stop"
                break
    if record["stop_reason"] is None:
        record["stop_reason"] = "max_steps"
    record["wall_time_s"] = time.time() - t0
    _write_json(output_dir / RUN_RECORD_NAME, record)
    return record


def _write_json(path: Path, obj) -> None:
    path.write_text(json.dumps(obj, indent=2) + "\n")


def evaluate_checkpoint(checkpoint, manifest, split: str, output_dir=None, depth_resample: Optional[str] = None):
    """Per-case metrics of a checkpoint on one split; optionally writes CSV and summary JSON."""
    model, sidecar = load_checkpoint(checkpoint)
    net_cfg = model.config
    cfg = TrainConfig(network=net_cfg, depth_resample=depth_resample or "linear")
    manifest = manifest if isinstance(manifest, Manifest) else Manifest.load(manifest)
    rows = evaluate_cases(model, load_prepared(manifest, split, cfg), cfg.depth_resample)
    summary = M.summarize(rows)
    if output_dir is not None:
        output_dir = Path(output_dir)
        output_dir.mkdir(parents=True, exist_ok=True)
        M.write_metrics_csv(output_dir / f"metrics_{split}.csv", rows)
        _write_json(output_dir / f"summary_{split}.json", summary)
    return rows, summary


# ---------------------------------------------------------------------------
# Experiment harness
# ---------------------------------------------------------------------------

class AblationCell(BaseModel):
    model_config = ConfigDict(extra="forbid", frozen=True, populate_by_name=True)

    name: str
    variant: Literal["2.5D", "2D", "3D"] = "2.5D"
    attention_mode: Literal["none", "PA", "SpvPA"] = "none"
    lam: float = Field(default=0.0, ge=0.0, le=1.0, alias="lambda")


TABLE1_MATRIX = [
    AblationCell(name="2D U-Net", variant="2D"),
    AblationCell(name="3D U-Net", variant="3D"),
    AblationCell(name="2.5D U-Net", variant="2.5D"),
    AblationCell(name="2.5D U-Net + PA", variant="2.5D", attention_mode="PA"),
    AblationCell(name="2.5D U-Net + SpvPA", variant="2.5D", attention_mode="SpvPA"),
]
TABLE2_MATRIX = [
    AblationCell(name="2.5D U-Net / Dice", variant="2.5D", lam=0.0),
    AblationCell(name="2.5D U-Net / HDL 0.6", variant="2.5D", lam=0.6),
    AblationCell(name="2.5D U-Net + SpvPA / Dice", variant="2.5D", attention_mode="SpvPA", lam=0.0),
    AblationCell(name="2.5D U-Net + SpvPA / HDL 0.6", variant="2.5D", attention_mode="SpvPA", lam=0.6),
]


def cell_config(base: TrainConfig, cell: AblationCell, seed: int) -> TrainConfig:
    net = base.network.model_dump(exclude={"schedule"})
    net.update(variant=cell.variant, attention_mode=cell.attention_mode)
    return base.model_copy(
        update={
            "seed": seed,
            "network": NetworkConfig(**net),
            "hdl": base.hdl.model_copy(update={"lam": cell.lam}),
        }
    )


def config_key(config: TrainConfig) -> str:
    blob = json.dumps(config.model_dump(mode="json", by_alias=True), sort_keys=True)
    return hashlib.sha256(blob.encode()).hexdigest()[:12]


def train_and_test(config: TrainConfig, manifest: Manifest, runs_root: Path, reuse: bool = True):
    """Train one configuration (or reuse a finished identical run) and score its test split.

    Runs are stored under ``runs_root / <config hash>``; a run counts as
    finished when its RunRecord and test metrics CSV exist and the stored
    config equals ``config``.
    """
    run_dir = Path(runs_root) / config_key(config)
    record_path = run_dir / RUN_RECORD_NAME
    metrics_path = run_dir / "metrics_test.csv"
    if reuse and record_path.exists() and metrics_path.exists():
        record = json.loads(record_path.read_text())
        if record["config"] == config.model_dump(mode="json", by_alias=True):
            log.info("reusing finished run %s", run_dir)
            return record, M.read_metrics_csv(metrics_path), run_dir
    record = train(config, manifest, run_dir)
    rows, _ = evaluate_checkpoint(run_dir / BEST_DIR, manifest, "test", run_dir, config.depth_resample)
    return record, rows, run_dir


def _pair_key(seed: int, row: M.CaseMetrics) -> str:
    return f"seed{seed}/{row.case_id}"


_BETTER = {"dice": 1.0, "assd_mm": -1.0, "rve_pct": -1.0}


def _compare(rows: Dict[str, M.CaseMetrics], base: Dict[str, M.CaseMetrics]) -> dict:
    out = {}
    keys = sorted(set(rows) & set(base))
    for name in M.METRIC_FIELDS:
        pairs = [(getattr(rows[k], name), getattr(base[k], name)) for k in keys]
        pairs = [(a, b) for a, b in pairs if a is not None and b is not None]
        if len(pairs) < 2:
            out[name] = {"t": None, "p": None, "significant": False}
            continue
        x, y = zip(*pairs)
        res = M.paired_ttest(x, y)
        improved = _BETTER[name] * (np.mean(x) - np.mean(y)) > 0
        out[name] = {"t": res.t, "p": res.p, "significant": bool(improved and res.p < 0.05)}
    return out


def run_ablation(
    matrix: Sequence[AblationCell],
    base: TrainConfig,
    manifest,
    output_dir,
    seeds: Sequence[int] = (0,),
    baseline: Optional[str] = None,
    reuse: bool = True,
) -> List[dict]:
    """Train every cell for every seed, score on the test split, compare against a baseline row.

    Per-case metrics are pooled over seeds and paired by (seed, case) for
    the t-tests. Writes ``results.csv`` and ``results.json`` under ``output_dir``.
    """
    if not matrix:
        raise ConfigurationError("ablation matrix is empty")
    names = [c.name for c in matrix]
    if len(set(names)) != len(names):
        raise ConfigurationError(f"duplicate cell names in ablation matrix: {names}")
    if baseline is not None and baseline not in names:
        raise ConfigurationError(f"baseline {baseline!r} is not a cell of the matrix")
    manifest = manifest if isinstance(manifest, Manifest) else Manifest.load(manifest)
    output_dir = Path(output_dir)
    runs_root = output_dir / "runs"

    per_cell: Dict[str, Dict[str, M.CaseMetrics]] = {}
    run_dirs: Dict[str, List[str]] = {}
    for cell in matrix:
        per_cell[cell.name] = {}
        run_dirs[cell.name] = []
        for seed in seeds:
            _, rows, run_dir = train_and_test(cell_config(base, cell, seed), manifest, runs_root, reuse)
            run_dirs[cell.name].append(str(run_dir))
            for r in rows:
                per_cell[cell.name][_pair_key(seed, r)] = r

    table = []
    for cell in matrix:
        rows = per_cell[cell.name]
        summary = M.summarize(rows.values())
        entry = {"name": cell.name, "cell": cell.model_dump(by_alias=True), "summary": summary, "runs": run_dirs[cell.name]}
        if baseline is not None and cell.name != baseline:
            entry["vs_baseline"] = _compare(rows, per_cell[baseline])
        table.append(entry)
    output_dir.mkdir(parents=True, exist_ok=True)
    _write_json(output_dir / "results.json", {"baseline": baseline, "seeds": list(seeds), "rows": table})
    write_results_csv(output_dir / "results.csv", table)
    return table


def write_results_csv(path, table: Sequence[dict]) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        header = ["name"]
        for f in M.METRIC_FIELDS:
            header += [f"{f}_mean", f"{f}_std", f"{f}_p", f"{f}_sig"]
        w.writerow(header)
        for row in table:
            line = [row["name"]]
            for f in M.METRIC_FIELDS:
                s = row["summary"][f]
                cmp = row.get("vs_baseline", {}).get(f, {})
                line += [s["mean"], s["std"], cmp.get("p", ""), "*" if cmp.get("significant") else ""]
            w.writerow(line)


def format_table(table: Sequence[dict]) -> str:
    lines = [f"{'Network':<34} {'Dice(%)':>16} {'ASSD(mm)':>14} {'RVE(%)':>16}"]
    for row in table:
        cols = []
        for f, scale, width in (("dice", 100.0, 16), ("assd_mm", 1.0, 14), ("rve_pct", 1.0, 16)):
            s = row["summary"][f]
            mark = "*" if row.get("vs_baseline", {}).get(f, {}).get("significant") else ""
            txt = "n/a" if s["mean"] is None else f"{s['mean'] * scale:.2f}±{s['std'] * scale:.2f}{mark}"
            cols.append(f"{txt:>{width}}")
        lines.append(f"{row['name']:<34} " + " ".join(cols))
    return "\n".join(lines)


def sweep_lambda(
    lambdas: Sequence[float],
    base: TrainConfig,
    manifest,
    output_dir,
    seeds: Sequence[int] = (0,),
    reuse: bool = True,
) -> List[dict]:
    """One run per (λ, seed) with the base network; writes the plot-ready ``lambda_sweep.csv``."""
    lambdas = [float(v) for v in lambdas]
    if not lambdas:
        raise ConfigurationError("no λ values given")
    if len(set(lambdas)) != len(lambdas):
        raise ConfigurationError(f"duplicate λ values: {lambdas}")
    for v in lambdas:
        if not 0.0 <= v <= 1.0:
            raise ConfigurationError(f"λ={v} is outside [0, 1]")
    cells = [
        AblationCell(
            name=f"lambda={v:g}",
            variant=base.network.variant,
            attention_mode=base.network.attention_mode,
            lam=v,
        )
        for v in lambdas
    ]
    table = run_ablation(cells, base, manifest, output_dir, seeds=seeds, baseline=None, reuse=reuse)
    rows = []
    for v, entry in zip(lambdas, table):
        s = entry["summary"]
        rows.append(
            {
                "lambda": v,
                **{f"{f}_mean": s[f]["mean"] for f in M.METRIC_FIELDS},
                **{f"{f}_std": s[f]["std"] for f in M.METRIC_FIELDS},
                "n": s["n_cases"],
            }
        )
    fields = ["lambda"] + [f"{f}_{k}" for f in M.METRIC_FIELDS for k in ("mean", "std")] + ["n"]
    with open(Path(output_dir) / "lambda_sweep.csv", "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=fields)
        w.writeheader()
        w.writerows(rows)
    return rows


# ---------------------------------------------------------------------------
# Attention export
# ---------------------------------------------------------------------------

def attention_focus(attention: np.ndarray, label: np.ndarray) -> Tuple[float, float]:
    """Mean attention inside and outside the foreground."""
    fg = np.asarray(label).astype(bool)
    return float(attention[fg].mean()), float(attention[~fg].mean())


def export_attention(checkpoint, case_path, output_dir, depth_resample: str = "linear") -> List[Path]:
    """Write each level's attention map as a case directory plus a level-1 overlay PNG.

    The image payload holds the attention values; the label payload holds
    the map thresholded at 0.5.
    """
    model, _ = load_checkpoint(checkpoint)
    if not model.config.attention_enabled:
        raise ConfigurationError("checkpoint network has attention disabled")
    cfg = TrainConfig(network=model.config, depth_resample=depth_resample)
    volume, label = read_case(case_path)
    case = prepare_case(volume, label, cfg)
    _, maps = predict(model, case, depth_resample)
    output_dir = Path(output_dir)
    output_dir.mkdir(parents=True, exist_ok=True)
    grid_spacing = list(volume.spacing_mm)
    if case.image.shape[1] != volume.shape[0]:
        grid_spacing[0] = volume.spacing_mm[0] * volume.shape[0] / case.image.shape[1]
    written = []
    for level, (a, factor) in enumerate(zip(maps, model.config.schedule.cumulative_factors()), start=1):
        spacing = tuple(s * f for s, f in zip(grid_spacing, factor))
        path = output_dir / f"attention_L{level}"
        write_case(
            path,
            Volume(a.astype(np.float32), spacing, f"{volume.id}_attention_L{level}"),
            LabelVolume((a >= 0.5).astype(np.uint8), spacing, f"{volume.id}_attention_L{level}"),
        )
        written.append(path)
    _overlay_png(case, maps[0], output_dir / "attention_L1.png")
    return written


def _overlay_png(case: PreparedCase, att: np.ndarray, path: Path) -> None:
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    image = case.image[0].numpy()
    lab = case.onehot[1].numpy()
    z = int(np.argmax(lab.sum(axis=(1, 2)))) if lab.any() else image.shape[0] // 2
    fig, axes = plt.subplots(1, 2, figsize=(8, 4))
    axes[0].imshow(image[z], cmap="gray")
    axes[0].contour(lab[z], levels=[0.5], colors="yellow", linewidths=0.8)
    axes[0].set_title(f"{case.case_id} slice {z}")
    axes[1].imshow(image[z], cmap="gray")
    axes[1].imshow(att[z], cmap="jet", alpha=0.5, vmin=0.0, vmax=1.0)
    axes[1].set_title("level-1 attention")
    for ax in axes:
        ax.axis("off")
    fig.tight_layout()
    fig.savefig(path, dpi=100)
    plt.close(fig)
