"""Property battery behind ``vlplab verify``.

Every check returns a :class:`CheckResult`. Loss gradient checks run on
three random instances each. ``fault`` names a loss whose backward pass is
deliberately scaled, which the battery must catch.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable

import numpy as np

from . import losses as L
from . import tensorlab as tl
from .imageaug import ImageAugConfig, augment_image, horizontal_flip, to_grayscale
from .model import ModelConfig, encode_images, encode_texts, init_model, strong_project
from .seeding import derive_rng
from .sinkhorn import marginal_residuals, sinkhorn_normalize
from .textaug import TextAugConfig, augment_text

GRAD_INSTANCES = 3
FAULT_FACTOR = 1.5


@dataclass
class CheckResult:
    group: str
    name: str
    passed: bool
    detail: str


def _fault(x: tl.Tensor, active: bool) -> tl.Tensor:
    return tl.grad_scale(x, FAULT_FACTOR) if active else x


def _rand(rng, *shape) -> np.ndarray:
    return rng.normal(size=shape)


# ---------------------------------------------------------------------------
# Loss gradients. Each builder returns (f, params) for one random instance.


def _contrastive(rng, fault):
    n, d = rng.integers(3, 9), rng.integers(2, 17)
    scale = np.log(rng.uniform(2.0, 20.0))

    def f(za, zb, log_scale):
        return L.contrastive_directional(_fault(za, fault), zb, tl.exp(log_scale))
    return f, [_rand(rng, n, d), _rand(rng, n, d), np.array(scale)]


def _symmetric(rng, fault):
    n, d = rng.integers(3, 9), rng.integers(2, 17)

    def f(za, zb):
        return L.contrastive_symmetric(_fault(za, fault), zb, 7.0)
    return f, [_rand(rng, n, d), _rand(rng, n, d)]


def _consistency(rng, fault):
    n, d = rng.integers(3, 9), rng.integers(2, 17)
    target = tl.Tensor(_rand(rng, n, d))

    def f(pred):
        return L.consistency_loss(_fault(pred, fault), target)
    return f, [_rand(rng, n, d)]


def _barlow(rng, fault):
    n, d = rng.integers(4, 9), rng.integers(2, 17)

    def f(za, zb):
        return L.barlow_loss(L.barlow_cross_correlation(_fault(za, fault), zb), 5e-3)
    return f, [_rand(rng, n, d), _rand(rng, n, d)]


def _swav(rng, fault):
    n, k, d = rng.integers(3, 9), rng.integers(2, 9), rng.integers(2, 17)
    a = sinkhorn_normalize(rng.uniform(-1, 1, (n, k))).q

    def f(z, protos):
        return L.swav_xent(_fault(z, fault), a, protos, 0.1)
    return f, [_rand(rng, n, d), _rand(rng, k, d)]


def _combined(rng, fault):
    n, d = rng.integers(4, 9), rng.integers(2, 17)
    alpha, beta = rng.uniform(0.2, 1.0, 2)

    def f(za, zb):
        za = _fault(za, fault)
        lc = L.contrastive_symmetric(za, zb, 5.0)
        lnc = L.barlow_loss(L.barlow_cross_correlation(za, zb))
        return L.combined_objective(lc, lnc, alpha, beta)
    return f, [_rand(rng, n, d), _rand(rng, n, d)]


def _swalip(rng, fault):
    n, d = rng.integers(3, 9), rng.integers(2, 17)
    views = [_rand(rng, n, d) for _ in range(4)]
    frozen = L.swalip_assignments(views, 0.5)

    def f(za, zabar, zb, zbbar):
        return L.swalip_modified(_fault(za, fault), zabar, zb, zbbar, 0.5, 0.1, assignments=frozen)
    return f, views


def _smoothed(rng, fault):
    n, d = rng.integers(3, 9), rng.integers(2, 17)
    targets = L.smoothed_targets(n, rng.uniform(0.05, 0.3))

    def f(za, zb):
        return L.contrastive_directional(_fault(za, fault), zb, 9.0, targets)
    return f, [_rand(rng, n, d), _rand(rng, n, d)]


LOSS_GRADIENTS: dict[str, Callable] = {
    "contrastive": _contrastive,
    "contrastive-symmetric": _symmetric,
    "consistency": _consistency,
    "barlow": _barlow,
    "swav-xent": _swav,
    "combined": _combined,
    "swalip-modified": _swalip,
    "smoothed-xent": _smoothed,
}


def _abs_gap(report) -> float:
    return max((float(np.abs(a - n).max()) for a, n in zip(report.analytic, report.numeric) if a.size), default=0.0)


def _grad_check(name, builder, rng, fault_on) -> CheckResult:
    worst = gap = 0.0
    for _ in range(GRAD_INSTANCES):
        f, params = builder(rng, fault_on)
        report = tl.finite_diff_grad_check(f, [tl.Tensor(p) for p in params])
        worst = max(worst, report.max_rel_error)
        gap = max(gap, _abs_gap(report))
    passed = worst <= 1e-4
    return CheckResult("loss-gradient", name, passed,
                       f"max rel err {worst:.2e}, max abs diff {gap:.1e} over {GRAD_INSTANCES} instances")


# ---------------------------------------------------------------------------
# Layer gradients


def _layer_builders():
    def l2rows(rng):
        w = tl.Tensor(_rand(rng, 5, 4))
        return lambda m: tl.sum_all(tl.mul(tl.l2_normalize_rows(m), w)), [_rand(rng, 5, 4)]

    def l2cols(rng):
        w = tl.Tensor(_rand(rng, 5, 4))
        return lambda m: tl.sum_all(tl.mul(tl.l2_normalize_cols(m), w)), [_rand(rng, 5, 4)]

    def cosine(rng):
        w = tl.Tensor(_rand(rng, 4, 6))
        return lambda a, b: tl.sum_all(tl.mul(tl.cosine_sim_matrix(a, b), w)), [_rand(rng, 4, 3), _rand(rng, 6, 3)]

    def softmax(rng):
        w = tl.Tensor(_rand(rng, 4, 5))
        return lambda m: tl.sum_all(tl.mul(tl.softmax_rows(m), w)), [_rand(rng, 4, 5)]

    def batchnorm(rng):
        w = tl.Tensor(_rand(rng, 6, 3))
        return (lambda x, g, b: tl.sum_all(tl.mul(tl.batch_norm_train(x, g, b)[0], w)),
                [_rand(rng, 6, 3), rng.uniform(0.5, 1.5, 3), _rand(rng, 3)])

    def mlp(rng):
        w = tl.Tensor(_rand(rng, 5, 2))

        def f(x, w1, b1, w2):
            h = tl.relu(tl.add(tl.matmul(x, w1), b1))
            return tl.sum_all(tl.mul(tl.matmul(h, w2), w))
        return f, [_rand(rng, 5, 4), _rand(rng, 4, 6), _rand(rng, 6), _rand(rng, 6, 2)]

    def reshape_pool(rng):
        w = tl.Tensor(_rand(rng, 2, 3))

        def f(x):
            y = tl.permute(tl.reshape(x, (2, 2, 2, 3)), (0, 2, 1, 3))
            return tl.sum_all(tl.mul(tl.mean(tl.reshape(y, (2, 4, 3)), axis=1), w))
        return f, [_rand(rng, 8, 3)]

    def dropout(rng):
        mask = rng.random((4, 5)) < 0.7
        w = tl.Tensor(_rand(rng, 4, 5))
        return lambda x: tl.sum_all(tl.mul(tl.dropout_mask(x, mask, 1 / 0.7), w)), [_rand(rng, 4, 5)]

    def strong_projector(rng):
        cfg = ModelConfig(embed_dim=4, proj_hidden=6, proj_dim=3)
        state = init_model(cfg, int(rng.integers(1 << 30)))
        w = tl.Tensor(_rand(rng, 5, 3))

        def f(h, w1, gamma, w2):
            params = dict(state.params)
            params.update({"proj.img.strong.fc1.w": w1, "proj.img.strong.bn.gamma": gamma,
                           "proj.img.strong.fc2.w": w2})
            z = strong_project(params, dict(state.buffers), cfg, "img", h, "train")
            return tl.sum_all(tl.mul(z, w))
        p = state.params
        return f, [_rand(rng, 5, 4), p["proj.img.strong.fc1.w"].data, p["proj.img.strong.bn.gamma"].data,
                   p["proj.img.strong.fc2.w"].data]

    def image_encoder(rng):
        cfg = ModelConfig(image_size=8, patch_size=2, merge=2, encoder_hidden=5, embed_dim=3)
        state = init_model(cfg, int(rng.integers(1 << 30)))
        images = rng.random((2, 3, 8, 8))
        w = tl.Tensor(_rand(rng, 2, 3))

        def f(stem, merge, fc1):
            params = dict(state.params, **{"img.stem.w": stem, "img.merge.w": merge, "img.fc1.w": fc1})
            return tl.sum_all(tl.mul(encode_images(params, cfg, images), w))
        p = state.params
        return f, [p["img.stem.w"].data, p["img.merge.w"].data, p["img.fc1.w"].data]

    def text_encoder(rng):
        cfg = ModelConfig(vocab_buckets=16, token_dim=3, encoder_hidden=4, embed_dim=3)
        state = init_model(cfg, int(rng.integers(1 << 30)))
        texts = [["a", "red", "circle"], ["blue", "square"]]
        w = tl.Tensor(_rand(rng, 2, 3))

        def f(embed, fc1):
            params = dict(state.params, **{"txt.embed": embed, "txt.fc1.w": fc1})
            return tl.sum_all(tl.mul(encode_texts(params, cfg, texts), w))
        p = state.params
        return f, [p["txt.embed"].data, p["txt.fc1.w"].data]

    return {"l2-normalize-rows": l2rows, "l2-normalize-cols": l2cols, "cosine-sim": cosine,
            "softmax-rows": softmax, "batch-norm": batchnorm, "linear-relu": mlp,
            "reshape-permute-mean": reshape_pool, "dropout": dropout,
            "strong-projector": strong_projector, "image-encoder": image_encoder,
            "text-encoder": text_encoder}


def _layer_check(name, builder, rng) -> CheckResult:
    f, params = builder(rng)
    report = tl.finite_diff_grad_check(f, [tl.Tensor(p) for p in params])
    return CheckResult("layer-gradient", name, report.passed,
                       f"max rel err {report.max_rel_error:.2e}, max abs diff {_abs_gap(report):.1e}")


# ---------------------------------------------------------------------------
# Sinkhorn


def _sinkhorn_checks(rng) -> list[CheckResult]:
    worst = 0.0
    for _ in range(20):
        s = rng.uniform(0.0, 1.0, (8, 8))
        q = sinkhorn_normalize(s, epsilon=0.5, n_iters=10_000, tol=1e-9).q
        worst = max(worst, *marginal_residuals(q))
    out = [CheckResult("sinkhorn", "marginals", worst <= 1e-6, f"max marginal residual {worst:.1e}")]
    n, k = 6, 4
    q = sinkhorn_normalize(np.full((n, k), 0.3)).q
    err = float(np.abs(q - 1.0 / k).max())
    out.append(CheckResult("sinkhorn", "uniform-input", err == 0.0, f"max deviation {err:.1e}"))
    worst = 0.0
    for _ in range(20):
        s = rng.uniform(-1, 1, (8, 5))
        c = rng.uniform(0.5, 3.0)
        a = sinkhorn_normalize(s, 0.05, 3).q
        b = sinkhorn_normalize(c * s, c * 0.05, 3).q
        worst = max(worst, float(np.abs(a - b).max()))
    out.append(CheckResult("sinkhorn", "epsilon-rescaling", worst <= 1e-9, f"max deviation {worst:.1e}"))
    return out


# ---------------------------------------------------------------------------
# Augmentation


def _augmentation_checks(rng) -> list[CheckResult]:
    icfg, tcfg = ImageAugConfig(out_size=16), TextAugConfig()
    img = rng.random((3, 20, 20))
    caps = ["a small red circle on a gray background", "a red circle centered in the picture"]
    same = True
    for i in range(20):
        for mode in ("weak", "strong"):
            a = augment_image(img, mode, icfg, derive_rng(0, 0, i, 1))
            b = augment_image(img, mode, icfg, derive_rng(0, 0, i, 1))
            ta = augment_text(caps, mode, tcfg, derive_rng(0, 0, i, 1))
            tb = augment_text(caps, mode, tcfg, derive_rng(0, 0, i, 1))
            same &= bool(np.array_equal(a, b)) and ta == tb
    coin = np.random.default_rng(0)
    flip_ok = bool(np.array_equal(horizontal_flip(horizontal_flip(img, coin, 1.0), coin, 1.0), img))
    g1 = to_grayscale(img, np.random.default_rng(0), 1.0)
    g2 = to_grayscale(g1, np.random.default_rng(0), 1.0)
    return [CheckResult("augmentation", "seeded-determinism", same, "40 image and 40 caption views repeated"),
            CheckResult("augmentation", "flip-involution", flip_ok, "flip(flip(x)) == x"),
            CheckResult("augmentation", "grayscale-idempotent", bool(np.array_equal(g1, g2)), "gray(gray(x)) == gray(x)")]


# ---------------------------------------------------------------------------
# Naive references


def naive_contrastive(za: np.ndarray, zb: np.ndarray, logit_scale: float) -> float:
    n = len(za)
    total = 0.0
    for i in range(n):
        sims = [float(za[i] @ zb[j]) / (np.linalg.norm(za[i]) * np.linalg.norm(zb[j])) for j in range(n)]
        logits = [logit_scale * s for s in sims]
        top = max(logits)
        lse = top + math.log(sum(math.exp(v - top) for v in logits))
        total += lse - logits[i]
    return total / n


def naive_swav(z: np.ndarray, assignments: np.ndarray, protos: np.ndarray, temperature: float) -> float:
    n, k = assignments.shape
    total = 0.0
    for i in range(n):
        logits = []
        for j in range(k):
            cos = float(z[i] @ protos[j]) / (np.linalg.norm(z[i]) * np.linalg.norm(protos[j]))
            logits.append(cos / temperature)
        top = max(logits)
        lse = top + math.log(sum(math.exp(v - top) for v in logits))
        total += sum(-assignments[i, j] * (logits[j] - lse) for j in range(k))
    return total / n


def naive_barlow(za: np.ndarray, zb: np.ndarray, lam: float) -> float:
    d = za.shape[1]
    c = np.zeros((d, d))
    for u in range(d):
        for v in range(d):
            num = sum(za[i, u] * zb[i, v] for i in range(len(za)))
            c[u, v] = num / (math.sqrt(sum(x * x for x in za[:, u])) * math.sqrt(sum(x * x for x in zb[:, v])))
    return sum((1 - c[u, u]) ** 2 for u in range(d)) + lam * sum(
        c[u, v] ** 2 for u in range(d) for v in range(d) if u != v)


def _oracle_checks(rng, instances: int = 100) -> list[CheckResult]:
    e1 = e5 = e4 = 0.0
    for _ in range(instances):
        n, d, k = rng.integers(2, 9), rng.integers(2, 17), rng.integers(2, 9)
        za, zb = _rand(rng, n, d), _rand(rng, n, d)
        s = float(rng.uniform(1, 30))
        e1 = max(e1, abs(L.contrastive_directional(tl.Tensor(za), tl.Tensor(zb), s).item() - naive_contrastive(za, zb, s)))
        a = rng.dirichlet(np.ones(k), size=n)
        p = _rand(rng, k, d)
        e5 = max(e5, abs(L.swav_xent(tl.Tensor(za), a, tl.Tensor(p), 0.1).item() - naive_swav(za, a, p, 0.1)))
    for _ in range(10):
        za, zb = _rand(rng, 6, 5), _rand(rng, 6, 5)
        e4 = max(e4, abs(L.barlow_loss(L.barlow_cross_correlation(tl.Tensor(za), tl.Tensor(zb))).item()
                         - naive_barlow(za, zb, 5e-3)))
    return [CheckResult("oracle", "contrastive-vs-loops", e1 <= 1e-12, f"max abs diff {e1:.1e}"),
            CheckResult("oracle", "swav-xent-vs-loops", e5 <= 1e-12, f"max abs diff {e5:.1e}"),
            CheckResult("oracle", "barlow-vs-loops", e4 <= 1e-12, f"max abs diff {e4:.1e}")]


# ---------------------------------------------------------------------------


def run_battery(seed: int = 0, fault: str | None = None) -> list[CheckResult]:
    if fault is not None and fault not in LOSS_GRADIENTS:
        raise ValueError(f"unknown fault target {fault!r}; choose from {', '.join(LOSS_GRADIENTS)}")
    rng = derive_rng(seed, "verify")
    results = [_grad_check(name, b, rng, name == fault) for name, b in LOSS_GRADIENTS.items()]
    results += [_layer_check(name, b, rng) for name, b in _layer_builders().items()]
    results += _sinkhorn_checks(rng)
    results += _augmentation_checks(rng)
    results += _oracle_checks(rng)
    return results


def format_table(results: list[CheckResult]) -> str:
    width = max(len(r.group) + len(r.name) + 1 for r in results)
    lines = [f"{'check':<{width}}  result  detail"]
    for r in results:
        lines.append(f"{r.group + '/' + r.name:<{width}}  {'PASS' if r.passed else 'FAIL':<6}  {r.detail}")
    failed = [r for r in results if not r.passed]
    lines.append(f"{len(results) - len(failed)}/{len(results)} checks passed")
    return "\n".join(lines)
