import pytest

from vlplab import verify as V
from vlplab.seeding import derive_rng


@pytest.fixture(scope="module")
def battery():
    return V.run_battery(seed=0)


def test_clean_battery_passes(battery):
    failed = [f"{r.group}/{r.name}: {r.detail}" for r in battery if not r.passed]
    assert failed == []


def test_coverage(battery):
    groups = {}
    for r in battery:
        groups.setdefault(r.group, []).append(r.name)
    assert set(groups["loss-gradient"]) == {"contrastive", "contrastive-symmetric", "consistency", "barlow",
                                        "swav-xent", "combined", "swalip-modified", "smoothed-xent"}
    assert len(groups["layer-gradient"]) >= 10
    assert {"sinkhorn", "augmentation", "oracle"} <= set(groups)


@pytest.mark.parametrize("name", sorted(V.LOSS_GRADIENTS))
def test_each_injected_fault_is_caught(name):
    rng = derive_rng(0, "verify")
    assert not V._grad_check(name, V.LOSS_GRADIENTS[name], rng, True).passed


def test_unknown_fault():
    with pytest.raises(ValueError):
        V.run_battery(fault="nonsense")


def test_table_format(battery):
    table = V.format_table(battery).splitlines()
    assert table[0].startswith("check")
    assert table[-1] == f"{len(battery)}/{len(battery)} checks passed"
    assert all(("PASS" in line) for line in table[1:-1])
