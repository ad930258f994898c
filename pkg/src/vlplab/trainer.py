"""Training step for every method and recipe, AdamW, LR schedule and the epoch loop."""

from __future__ import annotations

import csv
import io
import json
import logging
import math
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable

import numpy as np

from . import losses as L
from . import tensorlab as tl
from .config import ConfigError, TrainConfig, config_hash, model_config, parse_config_text, to_config_text, validate
from .evaldata import Dataset, zeroshot_classify
from .imageaug import augment_batch
from .model import (ModelState, clamp_logit_scales, decay_eligible, forward_views, init_model,
                    momentum_update, predictor_forward)
from .seeding import derive_rng
from .tensorlab import GradTape, Tensor
from .textaug import augment_text

log = logging.getLogger(__name__)

METRICS_HEADER = ("epoch", "step", "lr", "loss_total", "loss_weak", "loss_strong", "loss_nc",
                  "logit_scale_weak", "logit_scale_strong", "zeroshot_acc", "elapsed_s")


class NonFiniteGradient(ArithmeticError):
    pass


class NumericAbort(ArithmeticError):
    pass


# ---------------------------------------------------------------------------
# Views


@dataclass
class Batch:
    images: np.ndarray
    captions: list[list[str]]
    indices: np.ndarray


def build_views(batch: Batch, cfg: TrainConfig, epoch: int):
    """One weak view plus ``n_strong`` strong views for each modality.

    View ``v`` of sample ``i`` draws from ``derive_rng(seed, epoch, i, v)``:
    image parameters first, then the caption augmentation.
    """
    image_views, text_views = [], []
    for v in range(1 + cfg.n_strong):
        mode = "weak" if v == 0 else "strong"
        rngs = [derive_rng(cfg.seed, epoch, int(idx), v) for idx in batch.indices]
        image_views.append(augment_batch(batch.images, mode, cfg.image, rngs))
        text_views.append([augment_text(caps, mode, cfg.text, rng) for caps, rng in zip(batch.captions, rngs)])
    return image_views, text_views


# ---------------------------------------------------------------------------
# Losses over views


def _mean(terms: list[Tensor]) -> Tensor:
    if len(terms) == 1:
        return terms[0]
    return tl.scale(tl.sum_all(tl.stack_scalars(terms)), 1.0 / len(terms))


def contrastive_terms(state: ModelState, views, cfg: TrainConfig):
    """Weak and strong contrastive losses with the multi-view weighting.

    Returns the contrastive loss tensor and the named scalar parts.
    """
    ls_w = state.logit_scale("weak")
    loss_a_w = L.contrastive_directional(views.img_weak, views.txt_weak, ls_w)
    loss_b_w = L.contrastive_directional(views.txt_weak, views.img_weak, ls_w)
    parts = {"loss_a_w": loss_a_w, "loss_b_w": loss_b_w}
    n = cfg.n_strong
    if n == 0:
        loss_a, loss_b = loss_a_w, loss_b_w
    else:
        ls_s = state.logit_scale("strong")
        targets = L.smoothed_targets(views.img_weak.shape[0], cfg.label_smoothing)
        a_terms, b_terms = [], []
        for i in range(n):
            a_terms += [L.contrastive_directional(x, views.txt_strong[i], ls_s, targets) for x in views.img_strong]
            b_terms += [L.contrastive_directional(x, views.img_strong[i], ls_s, targets) for x in views.txt_strong]
        loss_a_s, loss_b_s = _mean(a_terms), _mean(b_terms)
        loss_a = tl.scale(tl.add(loss_a_w, tl.scale(loss_a_s, n)), 1.0 / (1 + n))
        loss_b = tl.scale(tl.add(loss_b_w, tl.scale(loss_b_s, n)), 1.0 / (1 + n))
        parts.update(loss_a_s=loss_a_s, loss_b_s=loss_b_s)
    parts.update(loss_a=loss_a, loss_b=loss_b)
    return tl.scale(tl.add(loss_a, loss_b), 0.5), parts


def non_contrastive_term(state: ModelState, views, cfg: TrainConfig, momentum_views=None) -> Tensor:
    """Auxiliary loss on strong projections (weak ones under the base recipe)."""
    method = cfg.method
    if method == "CLIP":
        return Tensor(0.0)
    imgs = views.img_strong if cfg.n_strong else [views.img_weak]
    txts = views.txt_strong if cfg.n_strong else [views.txt_weak]
    if method == "SwALIP-modified":
        if len(imgs) < 2:
            raise L.ViewCountMismatch("modified SwALIP needs two strong views per modality")
        return L.swalip_modified(imgs[0], imgs[1], txts[0], txts[1], cfg.swalip_lambda,
                                 cfg.swav_temperature, cfg.sinkhorn)
    if method == "BYOLIP":
        mimgs = momentum_views.img_strong if cfg.n_strong else [momentum_views.img_weak]
        mtxts = momentum_views.txt_strong if cfg.n_strong else [momentum_views.txt_weak]
    terms = []
    for i, za in enumerate(imgs):
        for j, zb in enumerate(txts):
            if method == "BarLIP":
                terms.append(L.barlow_loss(L.barlow_cross_correlation(za, zb), cfg.lam_bt))
            elif method == "SwALIP":
                terms.append(L.swalip_learned(za, zb, state.params["prototypes"], cfg.swav_temperature,
                                              cfg.sinkhorn))
            else:
                tb = zb if method == "SiamLIP" else mtxts[j]
                ta = za if method == "SiamLIP" else mimgs[i]
                ab = L.consistency_loss(predictor_forward(state, "a2b", za), tb)
                ba = L.consistency_loss(predictor_forward(state, "b2a", zb), ta)
                terms.append(tl.scale(tl.add(ab, ba), 0.5))
    return _mean(terms)


def training_step(state: ModelState, batch: Batch, cfg: TrainConfig, epoch: int = 0, step: int = 0):
    """Forward all views, build the objective and return ``(LossBreakdown, gradients)``."""
    image_views, text_views = build_views(batch, cfg, epoch)
    momentum_views = None
    if cfg.method == "BYOLIP":
        momentum_views = forward_views(state, image_views, text_views, "train",
                                       derive_rng(cfg.seed, "dropout", "momentum", epoch, step),
                                       use_momentum=True)
    with GradTape() as tape:
        views = forward_views(state, image_views, text_views, "train", derive_rng(cfg.seed, "dropout", epoch, step))
        lc, parts = contrastive_terms(state, views, cfg)
        lnc = non_contrastive_term(state, views, cfg, momentum_views)
        total = L.combined_objective(lc, lnc, cfg.alpha, cfg.beta)
        grads = tape.backward(total)
    values = {k: v.item() for k, v in parts.items()}
    breakdown = L.LossBreakdown(
        total=total.item(), contrastive=lc.item(),
        contrastive_weak=0.5 * (values["loss_a_w"] + values["loss_b_w"]),
        contrastive_strong=0.5 * (values.get("loss_a_s", 0.0) + values.get("loss_b_s", 0.0)),
        non_contrastive=lnc.item(), **values)
    return breakdown, grads


# ---------------------------------------------------------------------------
# Optimizer and schedule


@dataclass
class OptimizerState:
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)
    step: int = 0
    decay: dict[str, bool] = field(default_factory=dict)


def init_optimizer(state: ModelState) -> OptimizerState:
    return OptimizerState(decay={name: decay_eligible(name) for name in state.params})


def adamw_step(opt: OptimizerState, state: ModelState, grads: dict[str, np.ndarray], lr: float,
               cfg: TrainConfig) -> None:
    """Decoupled weight decay Adam update in place; parameters without a gradient are skipped."""
    for name, g in grads.items():
        if not np.isfinite(g).all():
            raise NonFiniteGradient(f"non-finite gradient for {name}")
    opt.step += 1
    b1, b2 = cfg.adam_beta1, cfg.adam_beta2
    c1, c2 = 1.0 - b1 ** opt.step, 1.0 - b2 ** opt.step
    for name, g in grads.items():
        p = state.params[name].data
        m = opt.m.get(name)
        m = (1.0 - b1) * g if m is None else b1 * m + (1.0 - b1) * g
        v = opt.v.get(name)
        v = (1.0 - b2) * g * g if v is None else b2 * v + (1.0 - b2) * g * g
        opt.m[name], opt.v[name] = m, v
        update = lr * (m / c1) / (np.sqrt(v / c2) + cfg.adam_eps)
        if opt.decay.get(name, decay_eligible(name)):
            update = update + lr * cfg.weight_decay * p
        state.params[name] = tl.parameter(p - update, name)
    clamp_logit_scales(state)
    if "prototypes" in state.params:
        p = state.params["prototypes"].data
        state.params["prototypes"] = tl.parameter(p / np.linalg.norm(p, axis=1, keepdims=True), "prototypes")


def lr_at(step: int, cfg: TrainConfig, steps_per_epoch: int) -> float:
    """Linear warmup from 0, then cosine decay reaching ``final_lr`` at the last step."""
    warmup = int(round(cfg.warmup_epochs * steps_per_epoch))
    last = cfg.epochs * steps_per_epoch - 1
    if step < warmup:
        return cfg.lr * step / warmup
    if last <= warmup:
        return cfg.lr
    progress = min(1.0, (step - warmup) / (last - warmup))
    return cfg.final_lr + 0.5 * (cfg.lr - cfg.final_lr) * (1.0 + math.cos(math.pi * progress))


# ---------------------------------------------------------------------------
# Epoch loop


def _fmt(x) -> str:
    if x is None or (isinstance(x, float) and math.isnan(x)):
        return ""
    return format(x, ".10g")


@dataclass
class RunResult:
    state: ModelState
    rows: list[dict] = field(default_factory=list)
    breakdowns: list[L.LossBreakdown] = field(default_factory=list)
    final_accuracy: float | None = None
    elapsed_s: float = 0.0

    def metrics_csv(self) -> str:
        buf = io.StringIO()
        writer = csv.writer(buf, lineterminator="\n")
        writer.writerow(METRICS_HEADER)
        for row in self.rows:
            writer.writerow([_fmt(row[k]) if not isinstance(row[k], int) else row[k] for k in METRICS_HEADER])
        return buf.getvalue()


def run_epochs(cfg: TrainConfig, train: Dataset, heldout: Dataset | None = None,
               prompts: dict[str, list[str]] | None = None, out_dir: str | Path | None = None,
               state: ModelState | None = None,
               on_step: Callable[[ModelState, L.LossBreakdown, dict], None] | None = None) -> RunResult:
    """Train for ``cfg.epochs`` epochs; optionally write metrics and a checkpoint to ``out_dir``."""
    validate(cfg)
    n = len(train)
    if n < 2:
        raise ValueError("training set needs at least two samples")
    batch_size = min(cfg.batch_size, n)
    steps_per_epoch = n // batch_size
    state = state or init_model(model_config(cfg), cfg.seed)
    opt = init_optimizer(state)
    result = RunResult(state)
    t0 = time.perf_counter()
    step = 0
    for epoch in range(cfg.epochs):
        order = derive_rng(cfg.seed, "shuffle", epoch).permutation(n)
        for b in range(steps_per_epoch):
            idx = np.sort(order[b * batch_size:(b + 1) * batch_size])
            batch = Batch(train.images[idx], [train.captions[i] for i in idx], idx)
            lr = lr_at(step, cfg, steps_per_epoch)
            breakdown, grads = training_step(state, batch, cfg, epoch, step)
            if not math.isfinite(breakdown.total):
                _abort(out_dir, cfg, epoch, step, idx, breakdown)
            adamw_step(opt, state, grads, lr, cfg)
            if cfg.method == "BYOLIP":
                momentum_update(state, cfg.momentum)
            if on_step is not None:
                on_step(state, breakdown, grads)
            result.breakdowns.append(breakdown)
            acc = None
            last_of_epoch = b == steps_per_epoch - 1
            if last_of_epoch and epoch == cfg.epochs - 1:
                snap_to_storage(state)
            if last_of_epoch and heldout is not None and prompts and len(heldout) and \
                    ((epoch + 1) % cfg.eval_every == 0 or epoch == cfg.epochs - 1):
                acc = zeroshot_classify(state, heldout.images, prompts, heldout.labels).accuracy
                result.final_accuracy = acc
                log.info("epoch %d step %d zero-shot accuracy %.4f", epoch, step, acc)
            result.rows.append({
                "epoch": epoch, "step": step, "lr": lr, "loss_total": breakdown.total,
                "loss_weak": breakdown.contrastive_weak, "loss_strong": breakdown.contrastive_strong,
                "loss_nc": breakdown.non_contrastive,
                "logit_scale_weak": state.logit_scale_value("weak"),
                "logit_scale_strong": state.logit_scale_value("strong"),
                "zeroshot_acc": acc,
                "elapsed_s": time.perf_counter() - t0 if cfg.log_timing else None,
            })
            step += 1
    result.elapsed_s = time.perf_counter() - t0
    if out_dir is not None:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        (out / "metrics.csv").write_text(result.metrics_csv(), encoding="utf-8", newline="\n")
        save_checkpoint(state, cfg, out / "checkpoint")
    return result


def _abort(out_dir, cfg, epoch, step, idx, breakdown):
    dump = {"epoch": epoch, "step": step, "seed": cfg.seed, "batch_indices": [int(i) for i in idx],
            "losses": breakdown.as_dict()}
    if out_dir is not None:
        Path(out_dir).mkdir(parents=True, exist_ok=True)
        (Path(out_dir) / "nan_dump.json").write_text(json.dumps(dump, indent=1) + "\n", encoding="utf-8")
    raise NumericAbort(f"non-finite loss at epoch {epoch} step {step} (seed {cfg.seed}): {dump['losses']}")


# ---------------------------------------------------------------------------
# Checkpoints


class CheckpointMismatch(ValueError):
    pass


def snap_to_storage(state: ModelState) -> None:
    """Round parameters and buffers to the 32-bit precision checkpoints store."""
    for name, t in state.params.items():
        state.params[name] = tl.parameter(np.float32(t.data).astype(np.float64), name)
    for name, arr in state.buffers.items():
        state.buffers[name] = np.float32(arr).astype(np.float64)


def save_checkpoint(state: ModelState, cfg: TrainConfig, path: str | Path) -> None:
    """One TNSR file per parameter and buffer plus ``manifest.txt`` and ``config.ini``."""
    path = Path(path)
    path.mkdir(parents=True, exist_ok=True)
    text = to_config_text(cfg)
    (path / "config.ini").write_text(text, encoding="utf-8", newline="\n")
    lines = [f"config_hash = {config_hash(cfg)}"]
    for kind, table in (("param", {k: v.data for k, v in state.params.items()}), ("buffer", state.buffers)):
        for name, arr in table.items():
            tl.write_tnsr(path / f"{name}.tnsr", arr)
            dims = "x".join(str(d) for d in np.shape(arr)) or "scalar"
            lines.append(f"{kind} {name} {dims}")
    (path / "manifest.txt").write_text("\n".join(lines) + "\n", encoding="utf-8", newline="\n")


def load_checkpoint(path: str | Path) -> tuple[ModelState, TrainConfig]:
    path = Path(path)
    try:
        manifest = (path / "manifest.txt").read_text(encoding="utf-8").splitlines()
        cfg_text = (path / "config.ini").read_text(encoding="utf-8")
    except UnicodeDecodeError as err:
        raise CheckpointMismatch(f"unreadable checkpoint metadata: {err}") from None
    if not manifest or not manifest[0].startswith("config_hash = "):
        raise CheckpointMismatch("manifest lacks a config hash line")
    try:
        cfg = parse_config_text(cfg_text)
    except ConfigError as err:
        raise CheckpointMismatch(f"checkpoint config.ini does not parse: {err}") from None
    if manifest[0].split("=", 1)[1].strip() != config_hash(cfg):
        raise CheckpointMismatch("config hash in manifest does not match config.ini")
    state = init_model(model_config(cfg), cfg.seed)
    seen = set()
    for line in manifest[1:]:
        parts = line.split()
        if len(parts) != 3 or parts[0] not in ("param", "buffer"):
            raise CheckpointMismatch(f"bad manifest line {line!r}")
        kind, name, dims = parts
        arr = tl.read_tnsr(path / f"{name}.tnsr")
        expected = "x".join(str(d) for d in arr.shape) or "scalar"
        if dims != expected:
            raise CheckpointMismatch(f"{name}: manifest says {dims}, file holds {expected}")
        if kind == "param":
            if name not in state.params or state.params[name].shape != arr.shape:
                raise CheckpointMismatch(f"parameter {name} does not fit the configured model")
            state.params[name] = tl.parameter(arr, name)
        else:
            state.buffers[name] = arr
        seen.add(name)
    missing = set(state.params) - seen
    if missing:
        raise CheckpointMismatch(f"checkpoint lacks parameters: {sorted(missing)}")
    return state, cfg
