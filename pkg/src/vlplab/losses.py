"""Cross-modal training objectives over embedding matrices.

All sums over the batch are taken as means so magnitudes do not depend on
batch size. Every function returns a scalar :class:`Tensor` and is
differentiable through :mod:`vlplab.tensorlab`.
"""

from __future__ import annotations

from dataclasses import dataclass, fields

import numpy as np

from . import tensorlab as tl
from .sinkhorn import NotSquare, SinkhornConfig, mix_with_identity, sinkhorn_normalize
from .tensorlab import Tensor


class ViewCountMismatch(ValueError):
    pass


def smoothed_targets(n: int, smoothing: float = 0.0) -> np.ndarray:
    """Identity softened toward uniform: ``(1 - s) I + (s / n) 1``."""
    if not 0.0 <= smoothing < 1.0:
        raise ValueError("smoothing must lie in [0, 1)")
    return (1.0 - smoothing) * np.eye(n) + smoothing / n


def _scaled(sims: Tensor, logit_scale) -> Tensor:
    if isinstance(logit_scale, Tensor):
        return tl.mul(sims, logit_scale)
    return tl.scale(sims, float(logit_scale))


def contrastive_directional(za: Tensor, zb: Tensor, logit_scale, targets=None) -> Tensor:
    """InfoNCE from ``za`` rows to ``zb`` rows; ``logit_scale`` is 1/temperature."""
    if za.shape != zb.shape:
        raise tl.DimMismatch(f"za {za.dims} vs zb {zb.dims}")
    if targets is None:
        targets = np.eye(za.shape[0])
    logits = _scaled(tl.cosine_sim_matrix(za, zb), logit_scale)
    return tl.cross_entropy_rows(logits, targets)


def contrastive_symmetric(za: Tensor, zb: Tensor, logit_scale, targets=None) -> Tensor:
    ab = contrastive_directional(za, zb, logit_scale, targets)
    ba = contrastive_directional(zb, za, logit_scale, targets)
    return tl.scale(tl.add(ab, ba), 0.5)


def consistency_loss(pred: Tensor, target: Tensor) -> Tensor:
    """Mean squared distance between row-normalized predictions and targets.

    ``target`` is detached here, so no gradient reaches it.
    """
    if pred.shape != target.shape:
        raise tl.DimMismatch(f"pred {pred.dims} vs target {target.dims}")
    diff = tl.sub(tl.l2_normalize_rows(pred), tl.l2_normalize_rows(tl.detach(target)))
    return tl.scale(tl.sum_all(tl.mul(diff, diff)), 1.0 / pred.shape[0])


class ZeroColumn(ValueError):
    pass


def barlow_cross_correlation(za: Tensor, zb: Tensor) -> Tensor:
    """Feature-by-feature correlation across the batch, norm-scaled and not mean-centered."""
    if za.shape != zb.shape:
        raise tl.DimMismatch(f"za {za.dims} vs zb {zb.dims}")
    try:
        na = tl.l2_normalize_cols(za)
        nb = tl.l2_normalize_cols(zb)
    except tl.ZeroRow as err:
        raise ZeroColumn(str(err).replace("row", "feature column")) from None
    return tl.matmul(tl.transpose(na), nb)


def barlow_loss(c: Tensor, lam_bt: float = 5e-3) -> Tensor:
    """``sum_u (1 - C_uu)^2 + lam_bt * sum_{u != v} C_uv^2``."""
    if c.data.ndim != 2 or c.shape[0] != c.shape[1]:
        raise NotSquare(f"cross-correlation must be square, got {c.dims}")
    d = c.shape[0]
    eye = np.eye(d)
    on = 1.0 - np.diag(c.data)
    off = c.data * (1.0 - eye)
    value = np.dot(on, on) + lam_bt * np.einsum("ij,ij->", off, off)

    def back(g):
        return (float(g) * (-2.0 * np.diag(on) + 2.0 * lam_bt * off),)

    return tl._record(np.asarray(value), (c,), back)


def swav_xent(za: Tensor, assignments, prototypes: Tensor, temperature: float) -> Tensor:
    """Cross-entropy between fixed assignments and softmax over prototype similarities."""
    a = assignments.q if hasattr(assignments, "q") else np.asarray(assignments)
    if za.shape[1] != prototypes.shape[1] or a.shape != (za.shape[0], prototypes.shape[0]):
        raise tl.DimMismatch(f"za {za.dims}, prototypes {prototypes.dims}, assignments {list(a.shape)}")
    logits = tl.scale(tl.cosine_sim_matrix(za, prototypes), 1.0 / temperature)
    return tl.cross_entropy_rows(logits, a)


def _cos_np(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    an = a / np.linalg.norm(a, axis=1, keepdims=True)
    bn = b / np.linalg.norm(b, axis=1, keepdims=True)
    return an @ bn.T


def _swalip_plan(views):
    """The eight (predicting view, partner view, prototype view) index triples."""
    za, zabar, zb, zbbar = range(4)
    plan = []
    for own, other in (((za, zabar), (zb, zbbar)), ((zb, zbbar), (za, zabar))):
        for proto in other:
            plan.append((own[0], own[1], proto))
            plan.append((own[1], own[0], proto))
    return plan


def swalip_assignments(views, lam: float = 0.5, sinkhorn_cfg: SinkhornConfig | None = None):
    """Identity-mixed Sinkhorn assignments for each of the eight swapped terms.

    ``views`` is ``(zA, zA_bar, zB, zB_bar)``. Assignments are constants.
    """
    cfg = sinkhorn_cfg or SinkhornConfig()
    data = [v.data if isinstance(v, Tensor) else np.asarray(v) for v in views]
    out = []
    for _, partner, proto in _swalip_plan(views):
        q = sinkhorn_normalize(_cos_np(data[partner], data[proto]), cfg.epsilon, cfg.n_iters, cfg.tol)
        out.append(mix_with_identity(q, lam).q)
    return out


def swalip_modified(za: Tensor, za_bar: Tensor, zb: Tensor, zb_bar: Tensor, lam: float = 0.5,
                    temperature: float = 0.1, sinkhorn_cfg: SinkhornConfig | None = None,
                    assignments=None) -> Tensor:
    """Swapped prediction using the other modality's batch as prototypes.

    Each term predicts one view's assignments, computed from its correlated
    partner view against the chosen prototype view and mixed with the
    identity. Both directions, both predicting views and both prototype views
    are averaged (eight terms).
    """
    views = (za, za_bar, zb, zb_bar)
    if any(v is None for v in views):
        raise ViewCountMismatch("modified SwALIP needs two strong views per modality")
    shapes = {v.shape for v in views}
    if len(shapes) != 1:
        raise tl.DimMismatch(f"view shapes differ: {sorted(shapes)}")
    if assignments is None:
        assignments = swalip_assignments(views, lam, sinkhorn_cfg)
    terms = [swav_xent(views[own], a, views[proto], temperature)
             for (own, _, proto), a in zip(_swalip_plan(views), assignments)]
    return tl.scale(tl.sum_all(tl.stack_scalars(terms)), 1.0 / len(terms))


def swalip_learned(za: Tensor, zb: Tensor, prototypes: Tensor, temperature: float = 0.1,
                   sinkhorn_cfg: SinkhornConfig | None = None) -> Tensor:
    """Shared learned prototypes, swapped assignments in both directions."""
    cfg = sinkhorn_cfg or SinkhornConfig()
    p = prototypes.data
    qa = sinkhorn_normalize(_cos_np(za.data, p), cfg.epsilon, cfg.n_iters, cfg.tol)
    qb = sinkhorn_normalize(_cos_np(zb.data, p), cfg.epsilon, cfg.n_iters, cfg.tol)
    ab = swav_xent(za, qb, prototypes, temperature)
    ba = swav_xent(zb, qa, prototypes, temperature)
    return tl.scale(tl.add(ab, ba), 0.5)


def combined_objective(lc, lnc, alpha: float = 1.0, beta: float = 1.0) -> Tensor:
    return tl.add(tl.scale(tl.as_tensor(lc), alpha), tl.scale(tl.as_tensor(lnc), beta))


@dataclass
class LossBreakdown:
    """Scalar parts of one training step.

    ``contrastive = (loss_a + loss_b) / 2`` with
    ``loss_a = (loss_a_w + num_augs * loss_a_s) / (1 + num_augs)`` (same for b),
    and ``total = alpha * contrastive + beta * non_contrastive``.
    """

    total: float = 0.0
    contrastive: float = 0.0
    contrastive_weak: float = 0.0
    contrastive_strong: float = 0.0
    non_contrastive: float = 0.0
    loss_a_w: float = 0.0
    loss_b_w: float = 0.0
    loss_a_s: float = 0.0
    loss_b_s: float = 0.0
    loss_a: float = 0.0
    loss_b: float = 0.0

    def as_dict(self) -> dict[str, float]:
        return {f.name: getattr(self, f.name) for f in fields(self)}
