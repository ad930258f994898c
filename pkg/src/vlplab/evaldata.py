"""Synthetic captioned shapes, dataset files and zero-shot classification."""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Iterator, Sequence

import numpy as np

from . import tensorlab as tl
from .model import BadConfig, ModelState, encode_images, encode_texts, strong_project, weak_project
from .seeding import derive_rng
from .textaug import tokenize

COLORS = {
    "red": (0.85, 0.15, 0.15),
    "green": (0.15, 0.75, 0.2),
    "blue": (0.15, 0.25, 0.85),
    "yellow": (0.9, 0.85, 0.15),
    "purple": (0.6, 0.2, 0.75),
}
SHAPES = ("circle", "square", "triangle")

CAPTION_TEMPLATES = (
    "a {color} {shape} on a gray background",
    "a photo of a {color} {shape}",
    "a {size} {color} {shape}",
    "there is a {color} {shape} in the picture",
    "a drawing of a single {color} {shape}",
    "an image showing a {color} {shape} shape",
    "a {color} colored {shape} on a noisy background",
)
PROMPT_TEMPLATES = (
    "a photo of a {color} {shape}",
    "a {color} {shape}",
    "a drawing of a {color} {shape}",
    "an image showing a {color} {shape} shape",
)


class CorruptRecord(ValueError):
    def __init__(self, message: str, line: int):
        super().__init__(f"line {line}: {message}")
        self.line = line


class MissingImageFile(FileNotFoundError):
    pass


class NoClasses(ValueError):
    pass


@dataclass
class Sample:
    image: np.ndarray
    captions: list[str]
    class_label: str | None = None


@dataclass(frozen=True)
class DataConfig:
    colors: tuple[str, ...] = ("red", "green", "blue")
    shapes: tuple[str, ...] = SHAPES
    samples_per_class: int = 100
    heldout_per_class: int = 20
    image_size: int = 32
    noise_level: float = 0.05
    min_captions: int = 2
    max_captions: int = 4
    seed: int = 0

    @property
    def classes(self) -> list[str]:
        return [f"{c} {s}" for c in self.colors for s in self.shapes]


def class_prompts(cfg: DataConfig) -> dict[str, list[str]]:
    out = {}
    for color in cfg.colors:
        for shape in cfg.shapes:
            out[f"{color} {shape}"] = [t.format(color=color, shape=shape) for t in PROMPT_TEMPLATES]
    return out


def _shape_mask(shape: str, size: int, cx: float, cy: float, r: float, supersample: int = 2) -> np.ndarray:
    n = size * supersample
    coords = (np.arange(n) + 0.5) / supersample
    y, x = np.meshgrid(coords, coords, indexing="ij")
    if shape == "circle":
        m = (x - cx) ** 2 + (y - cy) ** 2 <= r ** 2
    elif shape == "square":
        half = 0.85 * r
        m = (np.abs(x - cx) <= half) & (np.abs(y - cy) <= half)
    elif shape == "triangle":
        top, bottom = cy - r, cy + r
        half_width = r * 1.1 * (y - top) / (bottom - top)
        m = (y >= top) & (y <= bottom) & (np.abs(x - cx) <= half_width)
    else:
        raise ValueError(f"unknown shape {shape!r}")
    return m.reshape(size, supersample, size, supersample).mean(axis=(1, 3))


def render_sample(color: str, shape: str, cfg: DataConfig, rng: np.random.Generator):
    """One image plus its caption list."""
    s = cfg.image_size
    r = rng.uniform(0.22, 0.38) * s
    cx, cy = rng.uniform(r, s - r, size=2)
    gray = rng.uniform(0.4, 0.6)
    rgb = np.clip(np.asarray(COLORS[color]) + rng.uniform(-0.08, 0.08, size=3), 0.0, 1.0)
    mask = _shape_mask(shape, s, cx, cy, r)
    img = gray * (1.0 - mask)[None] + rgb[:, None, None] * mask[None]
    img = np.clip(img + rng.normal(0.0, cfg.noise_level, size=img.shape), 0.0, 1.0)
    n_caps = int(rng.integers(cfg.min_captions, cfg.max_captions + 1))
    picks = rng.choice(len(CAPTION_TEMPLATES), size=n_caps, replace=False)
    size_word = "small" if r < 0.3 * s else "large"
    captions = [CAPTION_TEMPLATES[i].format(color=color, shape=shape, size=size_word) for i in picks]
    return img, captions


def generate_split(cfg: DataConfig, split: str, per_class: int) -> list[Sample]:
    classes = [(c, s) for c in cfg.colors for s in cfg.shapes]
    samples = []
    for i in range(per_class * len(classes)):
        color, shape = classes[i % len(classes)]
        img, caps = render_sample(color, shape, cfg, derive_rng(cfg.seed, "data", split, i))
        samples.append(Sample(img, caps, f"{color} {shape}"))
    return samples


def write_samples(samples: Sequence[Sample], out_dir: str | Path) -> int:
    """Write ``samples.jsonl`` plus TNSR images; returns bytes written."""
    out = Path(out_dir)
    (out / "images").mkdir(parents=True, exist_ok=True)
    lines = []
    total = 0
    for i, sample in enumerate(samples):
        rel = f"images/{i:06d}.tnsr"
        tl.write_tnsr(out / rel, sample.image)
        total += (out / rel).stat().st_size
        record = {"image": rel, "captions": list(sample.captions)}
        if sample.class_label is not None:
            record["class"] = sample.class_label
        lines.append(json.dumps(record, ensure_ascii=False))
    text = "".join(line + "\n" for line in lines)
    (out / "samples.jsonl").write_text(text, encoding="utf-8", newline="\n")
    return total + len(text.encode("utf-8"))


def generate_synthetic_dataset(out_dir: str | Path, cfg: DataConfig = DataConfig()) -> dict:
    """Render train and held-out splits plus a class-prompt file under ``out_dir``."""
    if not cfg.colors or not cfg.shapes:
        raise BadConfig("need at least one color and one shape")
    unknown = [c for c in cfg.colors if c not in COLORS] + [s for s in cfg.shapes if s not in SHAPES]
    if unknown:
        raise BadConfig(f"unknown colors/shapes: {unknown}")
    if cfg.samples_per_class < 1 or cfg.heldout_per_class < 0 or cfg.image_size < 8:
        raise BadConfig("bad dataset sizes")
    if not 2 <= cfg.min_captions <= cfg.max_captions <= len(CAPTION_TEMPLATES):
        raise BadConfig("caption counts must satisfy 2 <= min <= max <= number of templates")
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    summary = {"classes": len(cfg.classes), "bytes": 0}
    for split, per_class in (("train", cfg.samples_per_class), ("heldout", cfg.heldout_per_class)):
        samples = generate_split(cfg, split, per_class)
        summary["bytes"] += write_samples(samples, out / split)
        summary[split] = len(samples)
    prompts = json.dumps(class_prompts(cfg), indent=1, ensure_ascii=False) + "\n"
    (out / "prompts.json").write_text(prompts, encoding="utf-8", newline="\n")
    summary["bytes"] += len(prompts.encode("utf-8"))
    return summary


def load_dataset(path: str | Path) -> Iterator[Sample]:
    """Stream samples from a directory holding ``samples.jsonl`` (or the file itself)."""
    path = Path(path)
    jsonl = path / "samples.jsonl" if path.is_dir() else path
    root = jsonl.parent
    with open(jsonl, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            if not line.strip():
                continue
            try:
                record = json.loads(line)
            except json.JSONDecodeError as err:
                raise CorruptRecord(f"invalid JSON ({err.msg})", lineno) from None
            if not isinstance(record, dict) or not isinstance(record.get("image"), str):
                raise CorruptRecord("missing image path", lineno)
            caps = record.get("captions")
            if not isinstance(caps, list) or not caps or not all(isinstance(c, str) and c.strip() for c in caps):
                raise CorruptRecord("captions must be a nonempty list of nonempty strings", lineno)
            img_path = root / record["image"]
            if not img_path.is_file():
                raise MissingImageFile(f"line {lineno}: {img_path} not found")
            try:
                img = tl.read_tnsr(img_path)
            except tl.TensorError as err:
                raise CorruptRecord(str(err), lineno) from None
            if img.ndim != 3 or img.shape[0] != 3:
                raise CorruptRecord(f"image dims {list(img.shape)} are not (3, H, W)", lineno)
            label = record.get("class")
            if label is not None and not isinstance(label, str):
                raise CorruptRecord("class must be a string", lineno)
            yield Sample(img, caps, label)


def load_prompts(path: str | Path) -> dict[str, list[str]]:
    prompts = json.loads(Path(path).read_text(encoding="utf-8"))
    if not isinstance(prompts, dict) or not all(isinstance(v, list) and v for v in prompts.values()):
        raise ValueError(f"{path}: expected a JSON map from class name to a nonempty prompt list")
    return prompts


@dataclass
class Dataset:
    images: np.ndarray
    captions: list[list[str]]
    labels: list[str | None] = field(default_factory=list)

    def __len__(self) -> int:
        return len(self.captions)


def collect(samples: Iterable[Sample]) -> Dataset:
    samples = list(samples)
    if not samples:
        return Dataset(np.zeros((0, 3, 1, 1)), [], [])
    return Dataset(np.stack([s.image for s in samples]), [list(s.captions) for s in samples],
                   [s.class_label for s in samples])


# ---------------------------------------------------------------------------
# Zero-shot classification


def _normalize(x: np.ndarray) -> np.ndarray:
    return x / np.linalg.norm(x, axis=1, keepdims=True)


def class_embeddings(state: ModelState, prompts: dict[str, list[str]]) -> dict[str, np.ndarray]:
    """Per-branch class embeddings: mean of normalized prompt embeddings, renormalized."""
    if not prompts:
        raise NoClasses("prompt set is empty")
    names = list(prompts)
    texts = [tokenize(p) for name in names for p in prompts[name]]
    owner = np.repeat(np.arange(len(names)), [len(prompts[n]) for n in names])
    h = encode_texts(state.params, state.cfg, texts, "eval")
    branches = {"weak": weak_project(state.params, "txt", h).data}
    if state.cfg.strong_projectors:
        branches["strong"] = strong_project(state.params, state.buffers, state.cfg, "txt", h, "eval").data
    out = {}
    for branch, emb in branches.items():
        emb = _normalize(emb)
        means = np.stack([emb[owner == c].mean(axis=0) for c in range(len(names))])
        out[branch] = _normalize(means)
    return out


def image_embeddings(state: ModelState, images: np.ndarray, batch_size: int = 256) -> dict[str, np.ndarray]:
    parts: dict[str, list[np.ndarray]] = {}
    for start in range(0, len(images), batch_size):
        h = encode_images(state.params, state.cfg, images[start:start + batch_size])
        parts.setdefault("weak", []).append(weak_project(state.params, "img", h).data)
        if state.cfg.strong_projectors:
            parts.setdefault("strong", []).append(
                strong_project(state.params, state.buffers, state.cfg, "img", h, "eval").data)
    return {k: _normalize(np.concatenate(v)) for k, v in parts.items()}


def branch_similarities(state: ModelState, images: np.ndarray, prompts: dict[str, list[str]]) -> dict[str, np.ndarray]:
    """Raw cosine similarities (images x classes) for each projector branch."""
    cls = class_embeddings(state, prompts)
    img = image_embeddings(state, images)
    return {branch: img[branch] @ cls[branch].T for branch in cls}


@dataclass
class ZeroShotResult:
    classes: list[str]
    predictions: np.ndarray
    similarities: np.ndarray
    accuracy: float | None = None
    per_class: dict[str, tuple[int, int]] = field(default_factory=dict)


def zeroshot_classify(state: ModelState, images: np.ndarray, prompts: dict[str, list[str]],
                      labels: Sequence[str] | None = None) -> ZeroShotResult:
    """Argmax cosine similarity to class prompts; weak and strong branches averaged.

    Ties go to the lowest class index.
    """
    classes = list(prompts)
    if not classes:
        raise NoClasses("prompt set is empty")
    if len(images) == 0:
        return ZeroShotResult(classes, np.zeros(0, dtype=int), np.zeros((0, len(classes))), None)
    sims = branch_similarities(state, np.asarray(images, dtype=np.float64), prompts)
    combined = sims["weak"] if len(sims) == 1 else 0.5 * (sims["weak"] + sims["strong"])
    pred = np.argmax(combined, axis=1)
    result = ZeroShotResult(classes, pred, combined)
    if labels is not None:
        index = {c: i for i, c in enumerate(classes)}
        truth = np.array([index[label] for label in labels])
        result.accuracy = float((pred == truth).mean())
        for i, c in enumerate(classes):
            sel = truth == i
            result.per_class[c] = (int(sel.sum()), int((pred[sel] == i).sum()))
    return result
