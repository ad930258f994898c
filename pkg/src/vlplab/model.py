"""Toy encoders, weak/strong projectors, predictors, prototypes and temperatures.

Parameters live in a flat ``name -> Tensor`` dict so the optimizer, the
momentum copy and the checkpoint writer can treat them uniformly. Each
parameter is initialized from a stream derived from ``(seed, name)``, so
adding a head (predictor, prototypes) never changes the shared weights.
"""

from __future__ import annotations

import math
import zlib
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from . import tensorlab as tl
from .seeding import derive_rng
from .tensorlab import Tensor

LOGIT_SCALE_INIT = math.log(1 / 0.07)
LOGIT_SCALE_MAX = 100.0


class BadConfig(ValueError):
    pass


class ShapeMismatch(ValueError):
    pass


class PredictorMissing(RuntimeError):
    pass


class MomentumMissing(RuntimeError):
    pass


@dataclass(frozen=True)
class ModelConfig:
    image_size: int = 32
    patch_size: int = 4
    merge: int = 2
    stem_dim: int = 32
    encoder_hidden: int = 128
    embed_dim: int = 64
    vocab_buckets: int = 2048
    token_dim: int = 64
    proj_hidden: int = 128
    proj_dim: int = 32
    text_dropout: float = 0.0
    bn_momentum: float = 0.9
    bn_eps: float = 1e-5
    strong_projectors: bool = True
    predictors: bool = False
    n_prototypes: int = 0
    momentum: bool = False


DESK_MODEL = ModelConfig()
# Projector sizes used with full-scale backbones.
PAPER_MODEL = ModelConfig(image_size=224, patch_size=16, encoder_hidden=2048, embed_dim=1024,
                          proj_hidden=4096, proj_dim=256)


@dataclass
class ModelState:
    cfg: ModelConfig
    params: dict[str, Tensor]
    buffers: dict[str, np.ndarray] = field(default_factory=dict)
    momentum_params: dict[str, Tensor] | None = None
    momentum_buffers: dict[str, np.ndarray] | None = None

    def logit_scale(self, branch: str) -> Tensor:
        return tl.exp(self.params[f"logit_scale.{branch}"])

    def logit_scale_value(self, branch: str) -> float:
        key = f"logit_scale.{branch}"
        return math.exp(self.params[key].item()) if key in self.params else float("nan")


def _linear_init(rng, fan_in: int, fan_out: int) -> np.ndarray:
    bound = 1.0 / math.sqrt(fan_in)
    return rng.uniform(-bound, bound, size=(fan_in, fan_out))


def param_shapes(cfg: ModelConfig) -> dict[str, tuple[int, ...]]:
    """Ordered parameter layout; biases are 1-D."""
    patch_dim = 3 * cfg.patch_size ** 2
    h, e, p = cfg.encoder_hidden, cfg.embed_dim, cfg.proj_dim
    shapes: dict[str, tuple[int, ...]] = {
        "img.stem.w": (patch_dim, cfg.stem_dim), "img.stem.b": (cfg.stem_dim,),
        **({"img.merge.w": (cfg.merge ** 2 * cfg.stem_dim, h), "img.merge.b": (h,)} if cfg.merge > 1 else {}),
        "img.fc1.w": (h if cfg.merge > 1 else cfg.stem_dim, h), "img.fc1.b": (h,),
        "img.fc2.w": (h, h), "img.fc2.b": (h,),
        "img.out.w": (h, e), "img.out.b": (e,),
        "txt.embed": (cfg.vocab_buckets, cfg.token_dim),
        "txt.fc1.w": (cfg.token_dim, h), "txt.fc1.b": (h,),
        "txt.fc2.w": (h, h), "txt.fc2.b": (h,),
        "txt.out.w": (h, e), "txt.out.b": (e,),
        "proj.img.weak.w": (e, p),
        "proj.txt.weak.w": (e, p),
        "logit_scale.weak": (),
    }
    if cfg.strong_projectors:
        for mod in ("img", "txt"):
            shapes.update({
                f"proj.{mod}.strong.fc1.w": (e, cfg.proj_hidden),
                f"proj.{mod}.strong.fc1.b": (cfg.proj_hidden,),
                f"proj.{mod}.strong.bn.gamma": (cfg.proj_hidden,),
                f"proj.{mod}.strong.bn.beta": (cfg.proj_hidden,),
                f"proj.{mod}.strong.fc2.w": (cfg.proj_hidden, p),
                f"proj.{mod}.strong.fc2.b": (p,),
            })
        shapes["logit_scale.strong"] = ()
    if cfg.predictors:
        for d in ("a2b", "b2a"):
            shapes.update({
                f"pred.{d}.fc1.w": (p, cfg.proj_hidden), f"pred.{d}.fc1.b": (cfg.proj_hidden,),
                f"pred.{d}.fc2.w": (cfg.proj_hidden, p), f"pred.{d}.fc2.b": (p,),
            })
    if cfg.n_prototypes:
        shapes["prototypes"] = (cfg.n_prototypes, p)
    return shapes


def momentum_names(names) -> list[str]:
    """Encoders and projectors get an EMA copy; heads and temperatures do not."""
    return [n for n in names if n.startswith(("img.", "txt.", "proj."))]


def decay_eligible(name: str) -> bool:
    """Biases, normalization parameters and temperatures are not decayed."""
    return not (name.endswith(".b") or ".bn." in name or name.startswith("logit_scale"))


def init_model(cfg: ModelConfig, seed: int) -> ModelState:
    for key in ("image_size", "patch_size", "stem_dim", "encoder_hidden", "embed_dim", "vocab_buckets",
                "token_dim", "proj_hidden", "proj_dim"):
        if getattr(cfg, key) <= 0:
            raise BadConfig(f"{key} must be positive")
    if cfg.image_size % cfg.patch_size:
        raise BadConfig("image_size must be a multiple of patch_size")
    if cfg.merge < 1 or (cfg.image_size // cfg.patch_size) % cfg.merge:
        raise BadConfig("merge must be a positive divisor of the patch grid side")
    if not 0.0 <= cfg.text_dropout < 1.0:
        raise BadConfig("text_dropout must lie in [0, 1)")
    params: dict[str, Tensor] = {}
    for name, shape in param_shapes(cfg).items():
        rng = derive_rng(seed, "init", name)
        if name.startswith("logit_scale"):
            value = np.asarray(LOGIT_SCALE_INIT)
        elif name.endswith(".b") or name.endswith(".beta"):
            value = np.zeros(shape)
        elif name.endswith(".gamma"):
            value = np.ones(shape)
        elif name == "txt.embed":
            value = rng.normal(0.0, 1.0, size=shape)
        elif name == "prototypes":
            value = rng.normal(size=shape)
            value /= np.linalg.norm(value, axis=1, keepdims=True)
        else:
            value = _linear_init(rng, *shape)
        params[name] = tl.parameter(value, name)
    buffers = {}
    if cfg.strong_projectors:
        for mod in ("img", "txt"):
            buffers[f"proj.{mod}.strong.bn.mean"] = np.zeros(cfg.proj_hidden)
            buffers[f"proj.{mod}.strong.bn.var"] = np.ones(cfg.proj_hidden)
    state = ModelState(cfg, params, buffers)
    if cfg.momentum:
        state.momentum_params = {n: Tensor(params[n].data, name=None) for n in momentum_names(params)}
        state.momentum_buffers = {k: v.copy() for k, v in buffers.items()}
    return state


# ---------------------------------------------------------------------------
# Forward pieces


def linear(x: Tensor, w: Tensor, b: Tensor | None = None) -> Tensor:
    y = tl.matmul(x, w)
    return tl.add(y, b) if b is not None else y


def apply_dropout(t: Tensor, prob: float, mode: str, rng: np.random.Generator | None) -> Tensor:
    """Inverted dropout in train mode, identity otherwise."""
    if mode != "train" or prob <= 0.0:
        return t
    if not 0.0 <= prob < 1.0:
        raise ValueError("dropout prob must lie in [0, 1)")
    mask = rng.random(t.shape) >= prob
    return tl.dropout_mask(t, mask, 1.0 / (1.0 - prob))


def patchify(images: np.ndarray, patch: int) -> np.ndarray:
    """(M, 3, H, W) -> (M * P, 3 * patch * patch)."""
    m, c, h, w = images.shape
    x = images.reshape(m, c, h // patch, patch, w // patch, patch)
    x = x.transpose(0, 2, 4, 1, 3, 5)
    return x.reshape(m * (h // patch) * (w // patch), c * patch * patch)


def encode_images(params, cfg: ModelConfig, images: np.ndarray) -> Tensor:
    """Shared linear stem on flattened patches, mean-pooled, then two hidden layers."""
    images = np.asarray(images, dtype=np.float64)
    if images.ndim != 4 or images.shape[1:] != (3, cfg.image_size, cfg.image_size):
        raise ShapeMismatch(f"expected (M, 3, {cfg.image_size}, {cfg.image_size}) images, got {images.shape}")
    m = images.shape[0]
    grid = cfg.image_size // cfg.patch_size
    x = Tensor(patchify(images, cfg.patch_size), check=False)
    h = tl.relu(linear(x, params["img.stem.w"], params["img.stem.b"]))
    if cfg.merge > 1:
        # k x k neighbouring patch features concatenated, then a shared layer
        k, g = cfg.merge, grid // cfg.merge
        h = tl.reshape(h, (m, g, k, g, k, cfg.stem_dim))
        h = tl.reshape(tl.permute(h, (0, 1, 3, 2, 4, 5)), (m * g * g, k * k * cfg.stem_dim))
        h = tl.relu(linear(h, params["img.merge.w"], params["img.merge.b"]))
        grid = g
    width = cfg.encoder_hidden if cfg.merge > 1 else cfg.stem_dim
    h = tl.mean(tl.reshape(h, (m, grid * grid, width)), axis=1)
    h = tl.relu(linear(h, params["img.fc1.w"], params["img.fc1.b"]))
    h = tl.relu(linear(h, params["img.fc2.w"], params["img.fc2.b"]))
    return linear(h, params["img.out.w"], params["img.out.b"])


def token_bucket(token: str, buckets: int) -> int:
    return zlib.crc32(token.encode("utf-8")) % buckets


def bag_matrix(texts: Sequence[Sequence[str]], buckets: int) -> np.ndarray:
    """Row i averages the hash buckets of sequence i's tokens."""
    pool = np.zeros((len(texts), buckets))
    for i, tokens in enumerate(texts):
        if not tokens:
            raise ShapeMismatch(f"text {i} has no tokens")
        for tok in tokens:
            pool[i, token_bucket(tok, buckets)] += 1.0 / len(tokens)
    return pool


def encode_texts(params, cfg: ModelConfig, texts: Sequence[Sequence[str]], mode: str = "eval",
                 rng: np.random.Generator | None = None) -> Tensor:
    """Hash-embedding mean pool, two hidden layers with dropout after each."""
    pool = Tensor(bag_matrix(texts, cfg.vocab_buckets), check=False)
    h = tl.matmul(pool, params["txt.embed"])
    h = tl.relu(linear(h, params["txt.fc1.w"], params["txt.fc1.b"]))
    h = apply_dropout(h, cfg.text_dropout, mode, rng)
    h = tl.relu(linear(h, params["txt.fc2.w"], params["txt.fc2.b"]))
    h = apply_dropout(h, cfg.text_dropout, mode, rng)
    return linear(h, params["txt.out.w"], params["txt.out.b"])


def weak_project(params, mod: str, h: Tensor) -> Tensor:
    return tl.matmul(h, params[f"proj.{mod}.weak.w"])


def strong_project(params, buffers, cfg: ModelConfig, mod: str, h: Tensor, mode: str) -> Tensor:
    """Linear, batch-norm, ReLU, linear, then L2 row normalization."""
    pre = f"proj.{mod}.strong"
    x = linear(h, params[f"{pre}.fc1.w"], params[f"{pre}.fc1.b"])
    gamma, beta = params[f"{pre}.bn.gamma"], params[f"{pre}.bn.beta"]
    if mode == "train":
        x, mu, var = tl.batch_norm_train(x, gamma, beta, cfg.bn_eps)
        n = h.shape[0]
        unbiased = var * n / (n - 1) if n > 1 else var
        m = cfg.bn_momentum
        buffers[f"{pre}.bn.mean"] = m * buffers[f"{pre}.bn.mean"] + (1 - m) * mu
        buffers[f"{pre}.bn.var"] = m * buffers[f"{pre}.bn.var"] + (1 - m) * unbiased
    else:
        x = tl.batch_norm_eval(x, gamma, beta, buffers[f"{pre}.bn.mean"], buffers[f"{pre}.bn.var"], cfg.bn_eps)
    x = linear(tl.relu(x), params[f"{pre}.fc2.w"], params[f"{pre}.fc2.b"])
    return tl.l2_normalize_rows(x)


@dataclass
class Views:
    """Projected embeddings for one weak and any number of strong views per modality."""

    img_weak: Tensor
    txt_weak: Tensor
    img_strong: list[Tensor] = field(default_factory=list)
    txt_strong: list[Tensor] = field(default_factory=list)


def forward_views(state: ModelState, image_views: Sequence[np.ndarray], text_views: Sequence[Sequence[Sequence[str]]],
                  mode: str = "train", rng: np.random.Generator | None = None,
                  use_momentum: bool = False) -> Views:
    """Encode ``[weak, strong_1, ...]`` views of a batch and project each.

    All views of a modality share one encoder pass; batch-norm statistics in
    the strong projectors are per view.
    """
    if mode not in ("train", "eval"):
        raise ValueError(f"mode must be 'train' or 'eval', got {mode!r}")
    if len(image_views) != len(text_views) or not image_views:
        raise ShapeMismatch("need the same nonzero number of image and text views")
    n = len(image_views[0])
    if any(len(v) != n for v in list(image_views) + list(text_views)):
        raise ShapeMismatch("every view must hold the same batch size")
    cfg = state.cfg
    n_strong = len(image_views) - 1
    if n_strong and not cfg.strong_projectors:
        raise ShapeMismatch("strong views given but the model has no strong projectors")
    if use_momentum:
        if state.momentum_params is None:
            raise MomentumMissing("model has no momentum copy")
        params = dict(state.params)
        params.update(state.momentum_params)
        buffers = state.momentum_buffers
    else:
        params, buffers = state.params, state.buffers
    img_h = encode_images(params, cfg, np.concatenate(list(image_views)))
    txt_h = encode_texts(params, cfg, [t for view in text_views for t in view], mode, rng)
    views = Views(weak_project(params, "img", tl.rows(img_h, 0, n)),
                  weak_project(params, "txt", tl.rows(txt_h, 0, n)))
    for k in range(1, n_strong + 1):
        views.img_strong.append(strong_project(params, buffers, cfg, "img", tl.rows(img_h, k * n, (k + 1) * n), mode))
        views.txt_strong.append(strong_project(params, buffers, cfg, "txt", tl.rows(txt_h, k * n, (k + 1) * n), mode))
    return views


def predictor_forward(state: ModelState, direction: str, z: Tensor) -> Tensor:
    key = {"a2b": "a2b", "A->B": "a2b", "b2a": "b2a", "B->A": "b2a"}.get(direction)
    if key is None:
        raise ValueError(f"unknown direction {direction!r}")
    if f"pred.{key}.fc1.w" not in state.params:
        raise PredictorMissing("this model was built without predictors")
    p = state.params
    h = tl.relu(linear(z, p[f"pred.{key}.fc1.w"], p[f"pred.{key}.fc1.b"]))
    return linear(h, p[f"pred.{key}.fc2.w"], p[f"pred.{key}.fc2.b"])


def momentum_update(state: ModelState, m: float) -> None:
    """``momentum <- m * momentum + (1 - m) * online`` for every copied parameter."""
    if state.momentum_params is None:
        raise MomentumMissing("model has no momentum copy")
    if not 0.0 <= m <= 1.0:
        raise ValueError("momentum coefficient must lie in [0, 1]")
    for name, mom in state.momentum_params.items():
        state.momentum_params[name] = Tensor(m * mom.data + (1.0 - m) * state.params[name].data, check=False)


def clamp_logit_scales(state: ModelState) -> None:
    cap = math.log(LOGIT_SCALE_MAX)
    for name in ("logit_scale.weak", "logit_scale.strong"):
        if name in state.params and state.params[name].item() > cap:
            state.params[name] = tl.parameter(cap, name)
