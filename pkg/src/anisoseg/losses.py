"""Hardness-weighted Dice loss, supervised-attention composite loss, gradient checking."""
from __future__ import annotations

from dataclasses import asdict, dataclass
from typing import Callable, List, Optional, Sequence

import numpy as np
import torch
import torch.nn.functional as F
from pydantic import BaseModel, ConfigDict, Field

from .errors import ConfigurationError, NonFiniteLossError, ShapeError


class HDLConfig(BaseModel):
    model_config = ConfigDict(extra="forbid", frozen=True, populate_by_name=True)

    lam: float = Field(default=0.6, ge=0.0, le=1.0, alias="lambda")
    epsilon: float = Field(default=1e-5, gt=0.0)
    couple_weight_gradient: bool = True


def _as_tensor(x, like: Optional[torch.Tensor] = None) -> torch.Tensor:
    if isinstance(x, torch.Tensor):
        return x
    dtype = like.dtype if like is not None else torch.float64
    return torch.as_tensor(np.asarray(x), dtype=dtype)


def hardness_weights(p, g, config: HDLConfig) -> torch.Tensor:
    """Per-element weight lam * |p - g| + (1 - lam); lies in [1 - lam, 1]."""
    p = _as_tensor(p)
    g = _as_tensor(g, p)
    if p.shape != g.shape:
        raise ShapeError(f"probabilities {tuple(p.shape)} and targets {tuple(g.shape)} differ in shape")
    # torch.abs has subgradient 0 at 0
    return config.lam * torch.abs(p - g) + (1.0 - config.lam)


def _reduce_dims(x: torch.Tensor, channel_axis: int) -> List[int]:
    channel_axis %= x.dim()
    return [d for d in range(x.dim()) if d != channel_axis]


def hdl(P, G, config: HDLConfig, channel_axis: int = 0, weights: Optional[torch.Tensor] = None) -> torch.Tensor:
    """Hardness-weighted Dice loss, averaged over channels.

    Every axis other than ``channel_axis`` is summed over, so batched input
    ``(N, C, D, H, W)`` with ``channel_axis=1`` pools the whole batch per
    channel. ``weights`` overrides the hardness weights (used to freeze them
    at a reference point).
    """
    P = _as_tensor(P)
    G = _as_tensor(G, P)
    if P.shape != G.shape:
        raise ShapeError(f"prediction {tuple(P.shape)} and target {tuple(G.shape)} differ in shape")
    if P.dim() == 0:
        raise ShapeError("hdl needs at least a channel axis")
    if weights is None:
        weights = hardness_weights(P, G, config)
        if not config.couple_weight_gradient:
            weights = weights.detach()
    dims = _reduce_dims(P, channel_axis)
    eps = config.epsilon
    num = 2.0 * (weights * P * G).sum(dim=dims) + eps
    den = (weights * (P + G)).sum(dim=dims) + eps
    return 1.0 - (num / den).mean()


def soft_dice_loss(P, G, epsilon: float = 1e-5, channel_axis: int = 0) -> torch.Tensor:
    """Unweighted soft Dice loss averaged over channels."""
    P = _as_tensor(P)
    G = _as_tensor(G, P)
    if P.shape != G.shape:
        raise ShapeError(f"prediction {tuple(P.shape)} and target {tuple(G.shape)} differ in shape")
    dims = _reduce_dims(P, channel_axis)
    num = 2.0 * (P * G).sum(dim=dims) + epsilon
    den = (P + G).sum(dim=dims) + epsilon
    return 1.0 - (num / den).mean()


def pooled_targets(gf, schedule) -> List[torch.Tensor]:
    """Block-average the foreground mask down to every level of ``schedule``.

    ``gf`` may be a LabelVolume, a (D, H, W) array or a batched
    (N, 1, D, H, W) tensor; the result keeps that layout. Level 1 is ``gf``.
    """
    data = getattr(gf, "data", gf)
    t = data if isinstance(data, torch.Tensor) else torch.as_tensor(np.asarray(data, dtype=np.float32))
    squeeze = t.dim() == 3
    if squeeze:
        t = t[None, None]
    if t.dim() != 5:
        raise ShapeError(f"mask must be (D,H,W) or (N,1,D,H,W), got {tuple(t.shape)}")
    t = t.to(torch.float64 if t.dtype == torch.float64 else torch.float32)
    masks = []
    for factor in schedule.cumulative_factors():
        bad = [(n, f) for n, f in zip(t.shape[2:], factor) if n % f]
        if bad:
            raise ShapeError(f"mask shape {tuple(t.shape[2:])} not divisible by pool factor {factor}")
        m = t if factor == (1, 1, 1) else F.avg_pool3d(t, factor, stride=factor)
        masks.append(m[0, 0] if squeeze else m)
    return masks


def total_loss(prediction, target, pooled: Sequence[torch.Tensor], config: HDLConfig, mode: str) -> torch.Tensor:
    """Segmentation loss plus, for ``SpvPA``, the mean attention-supervision loss.

    ``prediction`` is a network Prediction (probs ``(N, C, ...)``, attentions
    ``(N, 1, ...)``); ``target`` is the one-hot tensor matching ``probs``.
    """
    return loss_terms(prediction, target, pooled, config, mode)["total"]


def loss_terms(prediction, target, pooled, config: HDLConfig, mode: str) -> dict:
    onehot = getattr(target, "onehot", target)
    onehot = _as_tensor(onehot, prediction.probs)
    if onehot.dim() == prediction.probs.dim() - 1:
        onehot = onehot.unsqueeze(0)
    seg = hdl(prediction.probs, onehot, config, channel_axis=1)
    terms = {"segmentation": seg}
    if mode == "SpvPA":
        attentions = prediction.attentions
        if not attentions or len(attentions) != len(pooled):
            raise ShapeError(
                f"{len(attentions)} attention maps cannot be matched with {len(pooled)} pooled targets"
            )
        att = []
        for a, g in zip(attentions, pooled):
            g = _as_tensor(g, a)
            if g.dim() == a.dim() - 2:
                g = g[None, None]
            att.append(hdl(a, g.to(a.dtype), config, channel_axis=1))
        terms["attention"] = torch.stack(att).mean()
        terms["total"] = terms["attention"] + seg
    elif mode in ("PA", "none"):
        terms["total"] = seg
    else:
        raise ConfigurationError(f"unknown attention mode {mode!r}")
    return terms


# ---------------------------------------------------------------------------
# Finite-difference gradient check
# ---------------------------------------------------------------------------

@dataclass
class GradCheckReport:
    loss_name: str
    lam: Optional[float]
    max_rel_error: float
    n_coords: int
    n_excluded_kinks: int
    passed: bool

    def to_json(self) -> dict:
        d = asdict(self)
        return {
            "loss_name": d["loss_name"],
            "lambda": d["lam"],
            "max_rel_error": d["max_rel_error"],
            "n_coords": d["n_coords"],
            "n_excluded_kinks": d["n_excluded_kinks"],
            "pass": d["passed"],
        }


def grad_check(
    loss_fn: Callable[[torch.Tensor], torch.Tensor],
    point,
    h: float = 1e-5,
    tolerance: float = 1e-4,
    kink_mask=None,
    loss_name: str = "custom",
    lam: Optional[float] = None,
) -> GradCheckReport:
    """Compare autograd against central differences at every coordinate of ``point``.

    ``kink_mask`` marks coordinates to skip (non-differentiable points).
    Relative error per coordinate is |a - n| / max(|a|, |n|, 1e-8).
    """
    x0 = _as_tensor(point).detach().to(torch.float64)
    x = x0.clone().requires_grad_(True)
    f0 = loss_fn(x)
    if not torch.isfinite(f0):
        raise NonFiniteLossError(f"loss is {f0.item()} at the base point")
    analytic = None
    if f0.requires_grad:
        (analytic,) = torch.autograd.grad(f0, x, allow_unused=True)
    if analytic is None:
        analytic = torch.zeros_like(x0)
    analytic = analytic.reshape(-1)

    skip = np.zeros(x0.numel(), dtype=bool) if kink_mask is None else np.asarray(kink_mask).reshape(-1)
    flat = x0.reshape(-1)
    worst = 0.0
    checked = 0
    with torch.no_grad():
        for i in np.flatnonzero(~skip):
            xp = flat.clone()
            xm = flat.clone()
            xp[i] += h
            xm[i] -= h
            fp = loss_fn(xp.reshape(x0.shape))
            fm = loss_fn(xm.reshape(x0.shape))
            if not (torch.isfinite(fp) and torch.isfinite(fm)):
                raise NonFiniteLossError(f"non-finite loss when perturbing coordinate {i}")
            numeric = float((fp - fm) / (2 * h))
            a = float(analytic[i])
            err = abs(a - numeric) / max(abs(a), abs(numeric), 1e-8)
            worst = max(worst, err)
            checked += 1
    return GradCheckReport(
        loss_name=loss_name,
        lam=lam,
        max_rel_error=worst,
        n_coords=checked,
        n_excluded_kinks=int(skip.sum()),
        passed=bool(worst < tolerance),
    )


def kink_mask(P, G, h: float = 1e-5, tol: float = 1e-6) -> np.ndarray:
    """Coordinates whose central-difference stencil would touch |p - g| = 0."""
    diff = np.abs(np.asarray(P, dtype=np.float64) - np.asarray(G, dtype=np.float64))
    return diff <= max(tol, h)


def random_hdl_point(shape=(2, 4, 4, 4), seed: int = 0):
    """A softmax-normalised probability tensor and a matching one-hot target."""
    rng = np.random.default_rng(seed)
    logits = rng.normal(size=shape)
    P = np.exp(logits - logits.max(axis=0))
    P /= P.sum(axis=0)
    labels = rng.integers(0, shape[0], size=shape[1:])
    G = np.stack([(labels == c).astype(np.float64) for c in range(shape[0])])
    return P, G


def check_hdl_gradient(
    lam: float, seed: int = 0, shape=(2, 4, 4, 4), h: float = 1e-5, tolerance: float = 1e-4,
    couple_weight_gradient: bool = True,
) -> GradCheckReport:
    """Gradient check of hdl with respect to the probabilities at a random point.

    When the weights are decoupled, the finite-difference side holds them at
    their value at the base point, so both sides differentiate the same function.
    """
    P, G = random_hdl_point(shape, seed)
    cfg = HDLConfig(lam=lam, couple_weight_gradient=couple_weight_gradient)
    Gt = torch.as_tensor(G)
    if couple_weight_gradient:
        fn = lambda x: hdl(x, Gt, cfg)
    else:
        w0 = hardness_weights(torch.as_tensor(P), Gt, cfg)
        fn = lambda x: hdl(x, Gt, cfg, weights=w0)
    mask = kink_mask(P, G, h) if lam > 0 else None
    name = "dice" if lam == 0 else "hdl"
    return grad_check(fn, P, h=h, tolerance=tolerance, kink_mask=mask, loss_name=name, lam=lam)


def check_total_loss_gradient(
    lam: float, seed: int = 0, spatial=(2, 4, 4), h: float = 1e-5, tolerance: float = 1e-4
) -> GradCheckReport:
    """Gradient check of the SpvPA composite loss w.r.t. probabilities and all attention maps.

    Uses a three-level schedule (one 2D level, two 3D levels) so every
    attention level, including a fully pooled one, contributes.
    """
    from .network import LayerSchedule, Prediction

    schedule = LayerSchedule.mixed(n_levels=3, n_2d=1, base_channels=2)
    rng = np.random.default_rng(seed)
    P, G = random_hdl_point((2,) + tuple(spatial), seed)
    P, G = P[None], G[None]
    pooled = pooled_targets(torch.as_tensor(G[:, 1:2]), schedule)
    att_shapes = [tuple(p.shape) for p in pooled]
    atts = [1.0 / (1.0 + np.exp(-rng.normal(size=s))) for s in att_shapes]
    sizes = [P.size] + [a.size for a in atts]
    point = np.concatenate([P.ravel()] + [a.ravel() for a in atts])
    targets = np.concatenate([G.ravel()] + [p.numpy().ravel() for p in pooled])
    cfg = HDLConfig(lam=lam)
    Gt = torch.as_tensor(G)
    offsets = np.cumsum([0] + sizes)

    def fn(x):
        probs = x[offsets[0]:offsets[1]].reshape(P.shape)
        maps = [x[offsets[i + 1]:offsets[i + 2]].reshape(s) for i, s in enumerate(att_shapes)]
        pred = Prediction(logits=probs, probs=probs, attentions=maps)
        return total_loss(pred, Gt, pooled, cfg, "SpvPA")

    mask = kink_mask(point, targets, h) if lam > 0 else None
    return grad_check(fn, point, h=h, tolerance=tolerance, kink_mask=mask, loss_name="total", lam=lam)
