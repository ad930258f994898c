"""
Base CLIP against the improved recipe on the synthetic shapes
=============================================================

Renders the nine-class dataset into a temporary directory, trains both
recipes and classifies the held-out images from class prompts alone.
"""

import tempfile
from dataclasses import replace
from pathlib import Path

from vlplab.config import TrainConfig
from vlplab.evaldata import collect, generate_synthetic_dataset, load_dataset, load_prompts, zeroshot_classify
from vlplab.trainer import run_epochs

EPOCHS = 80

root = Path(tempfile.mkdtemp())
print(generate_synthetic_dataset(root))
train = collect(load_dataset(root / "train"))
heldout = collect(load_dataset(root / "heldout"))
prompts = load_prompts(root / "prompts.json")

for recipe in ("base", "improved"):
    cfg = replace(TrainConfig(), recipe=recipe, epochs=EPOCHS, eval_every=20)
    res = run_epochs(cfg, train, heldout, prompts)
    curve = [round(r["zeroshot_acc"], 3) for r in res.rows if r["zeroshot_acc"] is not None]
    print(f"{recipe:<8} accuracy by checkpoint {curve}  ({res.elapsed_s:.0f}s)")

    # the per-class view of the last model
    out = zeroshot_classify(res.state, heldout.images, prompts, heldout.labels)
    print({c: f"{k}/{n}" for c, (n, k) in out.per_class.items()})
