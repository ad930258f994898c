"""
Weak and strong views of one captioned image
============================================

"""

import numpy as np

from vlplab import imageaug as A
from vlplab import textaug as T
from vlplab.evaldata import DataConfig, render_sample
from vlplab.seeding import derive_rng

cfg = A.ImageAugConfig()
img, captions = render_sample("blue", "triangle", DataConfig(), np.random.default_rng(3))
print(captions)

# the same (seed, epoch, sample, view) key always yields the same view
for view in range(4):
    mode = "weak" if view == 0 else "strong"
    rng = derive_rng(0, 0, 17, view)
    x = A.augment_image(img, mode, cfg, rng)
    words = T.augment_text(captions, mode, T.TextAugConfig(), rng)
    print(f"{mode:<6} mean rgb {x.mean(axis=(1, 2)).round(3)} std {x.std():.3f}  {' '.join(words)}")

# what a strong view is made of
p = A.draw_view_params(32, 32, "strong", cfg, derive_rng(0, 0, 17, 1))
print(p)

# stop words go first, then one EDA edit picked with weights 0.4 / 0.4 / 0.2
picks = np.bincount([T.draw_eda_branch(derive_rng(1, i)) for i in range(5000)], minlength=3) / 5000
print(dict(zip(T.EDA_BRANCHES, picks.round(3).tolist())))
