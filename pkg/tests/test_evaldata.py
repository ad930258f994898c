import filecmp
import json
import math

import numpy as np
import pytest
from conftest import small_model

from vlplab import evaldata as E
from vlplab import model as M
from vlplab.evaldata import DataConfig


def tree_equal(a, b):
    cmp = filecmp.dircmp(a, b)
    if cmp.left_only or cmp.right_only or cmp.diff_files or cmp.funny_files:
        return False
    _, mismatch, errors = filecmp.cmpfiles(a, b, cmp.common_files, shallow=False)
    return not mismatch and not errors and all(tree_equal(a / d, b / d) for d in cmp.common_dirs)


def test_generation_is_balanced_and_captioned(small_data):
    cfg = DataConfig()
    assert len(cfg.classes) == 9
    train = small_data["train"]
    assert len(train) == 36 and train.images.shape == (36, 3, 16, 16)
    labels, counts = np.unique(train.labels, return_counts=True)
    assert len(labels) == 9 and set(counts) == {4}
    for caps, label in zip(train.captions, train.labels):
        color, shape = label.split()
        assert 2 <= len(caps) <= 4
        assert all(color in c and shape in c for c in caps)
    assert train.images.min() >= 0 and train.images.max() <= 1


def test_default_sizes(default_data):
    assert len(default_data["train"]) == 900 and len(default_data["heldout"]) == 180
    assert default_data["train"].images.shape[1:] == (3, 32, 32)
    assert set(default_data["prompts"]) == set(DataConfig().classes)


def test_generation_is_byte_identical(tmp_path):
    cfg = DataConfig(samples_per_class=2, heldout_per_class=1, image_size=12)
    E.generate_synthetic_dataset(tmp_path / "a", cfg)
    E.generate_synthetic_dataset(tmp_path / "b", cfg)
    assert tree_equal(tmp_path / "a", tmp_path / "b")
    E.generate_synthetic_dataset(tmp_path / "c", DataConfig(samples_per_class=2, heldout_per_class=1,
                                                            image_size=12, seed=1))
    assert not tree_equal(tmp_path / "a", tmp_path / "c")


@pytest.mark.parametrize("cfg", [DataConfig(colors=()), DataConfig(colors=("mauve",)),
                                 DataConfig(samples_per_class=0), DataConfig(min_captions=1),
                                 DataConfig(image_size=4)])
def test_generation_bad_config(tmp_path, cfg):
    with pytest.raises(M.BadConfig):
        E.generate_synthetic_dataset(tmp_path, cfg)


def test_round_trip(tmp_path):
    samples = E.generate_split(DataConfig(image_size=12), "train", 1)
    E.write_samples(samples, tmp_path)
    loaded = list(E.load_dataset(tmp_path))
    assert len(loaded) == len(samples)
    for a, b in zip(samples, loaded):
        assert a.captions == b.captions and a.class_label == b.class_label
        assert np.array_equal(np.float32(a.image), b.image)


def test_empty_file_is_empty(tmp_path):
    (tmp_path / "samples.jsonl").write_text("")
    assert list(E.load_dataset(tmp_path)) == []


@pytest.mark.parametrize("record,exc", [
    ('{"image": "x.tnsr", "captions": []}', E.CorruptRecord),
    ('{"image": "x.tnsr", "captions": [" "]}', E.CorruptRecord),
    ('{"captions": ["a"]}', E.CorruptRecord),
    ("not json", E.CorruptRecord),
    ('{"image": "missing.tnsr", "captions": ["a"]}', E.MissingImageFile),
])
def test_bad_records(tmp_path, record, exc):
    E.write_samples(E.generate_split(DataConfig(image_size=12), "train", 1)[:1], tmp_path)
    with open(tmp_path / "samples.jsonl", "a") as fh:
        fh.write(record + "\n")
    with pytest.raises(exc) as info:
        list(E.load_dataset(tmp_path))
    if exc is E.CorruptRecord:
        assert "2" in str(info.value)


def test_wrong_image_dims(tmp_path):
    from vlplab import tensorlab as tl
    tl.write_tnsr(tmp_path / "x.tnsr", np.zeros((4, 4)))
    (tmp_path / "samples.jsonl").write_text('{"image": "x.tnsr", "captions": ["a"]}\n')
    with pytest.raises(E.CorruptRecord):
        list(E.load_dataset(tmp_path))


def test_prompts_have_entries():
    prompts = E.class_prompts(DataConfig())
    assert all(len(v) >= 1 for v in prompts.values())
    assert all("red" in p and "circle" in p for p in prompts["red circle"])


# --- zero-shot -------------------------------------------------------------------

def test_no_classes():
    state = M.init_model(small_model(), 0)
    with pytest.raises(E.NoClasses):
        E.zeroshot_classify(state, np.zeros((1, 3, 16, 16)), {})


def test_average_of_branches(small_data):
    state = M.init_model(small_model(), 0)
    imgs, prompts = small_data["heldout"].images, small_data["prompts"]
    sims = E.branch_similarities(state, imgs, prompts)
    res = E.zeroshot_classify(state, imgs, prompts, small_data["heldout"].labels)
    assert np.allclose(res.similarities, 0.5 * (sims["weak"] + sims["strong"]), atol=1e-15)
    assert np.array_equal(res.predictions, np.argmax(res.similarities, axis=1))
    again = E.zeroshot_classify(state, imgs, prompts, small_data["heldout"].labels)
    assert np.array_equal(res.predictions, again.predictions)
    assert sum(n for n, _ in res.per_class.values()) == 18


def test_base_model_uses_weak_branch_only(small_data):
    state = M.init_model(small_model(strong_projectors=False), 0)
    res = E.zeroshot_classify(state, small_data["heldout"].images, small_data["prompts"])
    sims = E.branch_similarities(state, small_data["heldout"].images, small_data["prompts"])
    assert set(sims) == {"weak"} and np.array_equal(res.similarities, sims["weak"])


def test_class_order_invariance(small_data):
    state = M.init_model(small_model(), 1)
    prompts = small_data["prompts"]
    rev = dict(reversed(list(prompts.items())))
    a = E.zeroshot_classify(state, small_data["heldout"].images, prompts)
    b = E.zeroshot_classify(state, small_data["heldout"].images, rev)
    assert [a.classes[i] for i in a.predictions] == [b.classes[i] for i in b.predictions]


def test_image_equal_to_class_embedding_is_predicted(small_data, monkeypatch):
    state = M.init_model(small_model(strong_projectors=False), 0)
    prompts = small_data["prompts"]
    cls = E.class_embeddings(state, prompts)["weak"]
    monkeypatch.setattr(E, "image_embeddings", lambda s, imgs: {"weak": cls[[4, 0, 8]]})
    res = E.zeroshot_classify(state, np.zeros((3, 3, 16, 16)), prompts)
    assert list(res.predictions) == [4, 0, 8]


def test_ties_go_to_lowest_index(small_data, monkeypatch):
    state = M.init_model(small_model(strong_projectors=False), 0)
    monkeypatch.setattr(E, "branch_similarities", lambda s, i, p: {"weak": np.ones((2, 9))})
    assert list(E.zeroshot_classify(state, np.zeros((2, 3, 16, 16)), small_data["prompts"]).predictions) == [0, 0]


def test_scaling_similarities_keeps_predictions(small_data, monkeypatch):
    state = M.init_model(small_model(), 0)
    imgs, prompts = small_data["heldout"].images, small_data["prompts"]
    base = E.zeroshot_classify(state, imgs, prompts).predictions
    real = E.branch_similarities
    monkeypatch.setattr(E, "branch_similarities", lambda *a: {k: 7.5 * v for k, v in real(*a).items()})
    assert np.array_equal(E.zeroshot_classify(state, imgs, prompts).predictions, base)


def test_untrained_model_is_at_chance(default_data):
    # 1080 images over 9 balanced classes from several random inits
    from vlplab.config import TrainConfig, model_config
    imgs = np.concatenate([default_data["train"].images[:900], default_data["heldout"].images])
    labels = list(default_data["train"].labels[:900]) + list(default_data["heldout"].labels)
    accs = [E.zeroshot_classify(M.init_model(model_config(TrainConfig()), s), imgs,
                                default_data["prompts"], labels).accuracy for s in range(3)]
    sigma = math.sqrt((1 / 9) * (8 / 9) / (3 * len(labels)))
    assert abs(np.mean(accs) - 1 / 9) < 3 * sigma
