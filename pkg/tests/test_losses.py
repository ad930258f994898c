import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from vlplab import losses as L
from vlplab import tensorlab as tl
from vlplab.sinkhorn import NotSquare
from vlplab.tensorlab import Tensor
from vlplab.verify import naive_barlow, naive_contrastive, naive_swav

seeds = st.integers(0, 2**32 - 1)


def rand(rng, *shape):
    return rng.normal(size=shape)


# --- smoothed targets ----------------------------------------------------------

def test_smoothed_targets():
    assert np.array_equal(L.smoothed_targets(3, 0.0), np.eye(3))
    assert np.allclose(L.smoothed_targets(2, 0.1), [[0.95, 0.05], [0.05, 0.95]], atol=1e-15)
    assert np.allclose(L.smoothed_targets(7, 0.3).sum(axis=1), 1.0, atol=1e-15)
    with pytest.raises(ValueError):
        L.smoothed_targets(2, 1.0)


# --- contrastive --------------------------------------------------------------

def test_single_pair_is_zero():
    v = L.contrastive_directional(Tensor([[0.3, -2.0]]), Tensor([[1.0, 5.0]]), 10.0).item()
    assert v == pytest.approx(0.0, abs=1e-15)


def test_identity_oracle():
    eye = Tensor(np.eye(2))
    assert L.contrastive_directional(eye, eye, 1.0).item() == pytest.approx(0.31326168751822286, abs=1e-14)
    assert math.log1p(math.exp(-1)) == pytest.approx(0.31326168751822286, abs=1e-16)


def test_symmetric_composition():
    rng = np.random.default_rng(4)
    za, zb = Tensor(rand(rng, 4, 3)), Tensor(rand(rng, 4, 3))
    ab = L.contrastive_directional(za, zb, 7.0).item()
    ba = L.contrastive_directional(zb, za, 7.0).item()
    assert L.contrastive_symmetric(za, zb, 7.0).item() == pytest.approx(0.5 * (ab + ba), abs=1e-15)
    assert L.contrastive_symmetric(za, za, 7.0).item() == pytest.approx(
        L.contrastive_directional(za, za, 7.0).item(), abs=1e-15)


def test_contrastive_dim_mismatch():
    with pytest.raises(tl.DimMismatch):
        L.contrastive_directional(Tensor(np.ones((2, 3))), Tensor(np.ones((3, 3))), 1.0)


def test_contrastive_zero_row():
    with pytest.raises(tl.ZeroRow):
        L.contrastive_directional(Tensor([[0.0, 0.0], [1.0, 0.0]]), Tensor(np.eye(2)), 1.0)


def test_contrastive_matches_loops():
    rng = np.random.default_rng(11)
    for _ in range(100):
        n, d = rng.integers(1, 9), rng.integers(1, 17)
        za, zb = rand(rng, n, d), rand(rng, n, d)
        s = float(rng.uniform(0.5, 50))
        got = L.contrastive_directional(Tensor(za), Tensor(zb), s).item()
        assert abs(got - naive_contrastive(za, zb, s)) <= 1e-12


def test_contrastive_argmin_at_za():
    # descent from a scrambled start lands each zb row on its own partner;
    # at finite scale the optimum also pushes the other cosines below zero,
    # so it does at least as well as zb = za
    za = Tensor(np.eye(4))
    zb = np.random.default_rng(0).normal(size=(4, 4))
    for _ in range(2000):
        (g,) = tl.backward_grads(lambda b: L.contrastive_directional(za, b, 10.0), [Tensor(zb)])
        zb = zb - 2.0 * g
    cos = tl.cosine_sim_matrix(za, Tensor(zb)).data
    assert np.array_equal(cos.argmax(axis=1), np.arange(4))
    at_za = L.contrastive_directional(za, za, 10.0).item()
    assert L.contrastive_directional(za, Tensor(zb), 10.0).item() <= at_za


@settings(max_examples=50, deadline=None)
@given(seeds)
def test_contrastive_symmetry_and_invariances(seed):
    rng = np.random.default_rng(seed)
    n, d = rng.integers(2, 7), rng.integers(2, 6)
    za, zb = rand(rng, n, d), rand(rng, n, d)
    t = L.smoothed_targets(n, 0.1)
    base = L.contrastive_symmetric(Tensor(za), Tensor(zb), 5.0, t).item()
    assert base == L.contrastive_symmetric(Tensor(zb), Tensor(za), 5.0, t).item()
    assert base >= 0
    c = rng.uniform(0.1, 10, size=(n, 1))
    assert L.contrastive_symmetric(Tensor(za * c), Tensor(zb), 5.0, t).item() == pytest.approx(base, abs=1e-12)
    perm = rng.permutation(n)
    moved = L.contrastive_symmetric(Tensor(za[perm]), Tensor(zb[perm]), 5.0, t[np.ix_(perm, perm)]).item()
    assert moved == pytest.approx(base, abs=1e-12)


# --- consistency ----------------------------------------------------------------

def test_consistency_examples():
    z = Tensor([[1.0, 0.0], [0.0, 2.0]])
    assert L.consistency_loss(z, z).item() == pytest.approx(0.0, abs=1e-15)
    assert L.consistency_loss(z, Tensor(-z.data)).item() == pytest.approx(4.0, abs=1e-14)
    assert L.consistency_loss(z, Tensor([[0.0, 3.0], [1.0, 0.0]])).item() == pytest.approx(2.0, abs=1e-14)


def test_consistency_target_gets_no_gradient():
    p = Tensor([[1.0, 2.0]], requires_grad=True, name="p")
    t = Tensor([[0.5, -1.0]], requires_grad=True, name="t")
    with tl.GradTape() as tape:
        grads = tape.backward(L.consistency_loss(p, t))
    assert "p" in grads and "t" not in grads


@settings(max_examples=50, deadline=None)
@given(seeds)
def test_consistency_equals_two_minus_two_cos(seed):
    rng = np.random.default_rng(seed)
    p, z = rand(rng, 5, 3), rand(rng, 5, 3)
    cos = np.diag(tl.cosine_sim_matrix(Tensor(p), Tensor(z)).data)
    assert L.consistency_loss(Tensor(p), Tensor(z)).item() == pytest.approx(float(np.mean(2 - 2 * cos)), abs=1e-12)


# --- Barlow -----------------------------------------------------------------------

def test_barlow_correlation_examples():
    eye = Tensor(np.eye(3))
    assert np.allclose(L.barlow_cross_correlation(eye, eye).data, np.eye(3), atol=1e-15)
    c = L.barlow_cross_correlation(Tensor([[1.0, 0.0], [0.0, 1.0]]), Tensor([[1.0, 1.0], [1.0, 1.0]])).data
    assert np.allclose(c, 1 / math.sqrt(2), atol=1e-15)
    rng = np.random.default_rng(2)
    z = rand(rng, 6, 4)
    same = L.barlow_cross_correlation(Tensor(z), Tensor(z)).data
    assert np.allclose(L.barlow_cross_correlation(Tensor(z), Tensor(-z)).data, -same, atol=1e-15)


def test_barlow_zero_column():
    with pytest.raises(L.ZeroColumn):
        L.barlow_cross_correlation(Tensor([[1.0, 0.0], [2.0, 0.0]]), Tensor(np.ones((2, 2))))


def test_barlow_loss_examples():
    assert L.barlow_loss(Tensor(np.eye(4))).item() == 0.0
    assert L.barlow_loss(Tensor(np.zeros((4, 4)))).item() == 4.0
    c = np.full((3, 3), 0.2)
    np.fill_diagonal(c, 1.0)
    assert L.barlow_loss(Tensor(c), 0.01).item() == pytest.approx(0.01 * 3 * 2 * 0.04, abs=1e-15)
    with pytest.raises(NotSquare):
        L.barlow_loss(Tensor(np.ones((2, 3))))


def test_barlow_matches_loops():
    rng = np.random.default_rng(5)
    for _ in range(20):
        za, zb = rand(rng, 6, 4), rand(rng, 6, 4)
        got = L.barlow_loss(L.barlow_cross_correlation(Tensor(za), Tensor(zb))).item()
        assert abs(got - naive_barlow(za, zb, 5e-3)) <= 1e-12


@settings(max_examples=50, deadline=None)
@given(seeds)
def test_barlow_bounds(seed):
    rng = np.random.default_rng(seed)
    c = L.barlow_cross_correlation(Tensor(rand(rng, 5, 3)), Tensor(rand(rng, 5, 3))).data
    assert np.abs(c).max() <= 1 + 1e-12
    assert L.barlow_loss(Tensor(c)).item() > 0


# --- swapped prediction ---------------------------------------------------------

def test_swav_confident_correct_goes_to_zero():
    p = np.eye(3)
    losses = [L.swav_xent(Tensor(p), np.eye(3), Tensor(p), t).item() for t in (1.0, 0.1, 0.01)]
    assert losses[0] > losses[1] > losses[2]
    assert losses[2] < 1e-40 or losses[2] == pytest.approx(0.0, abs=1e-40)


def test_swav_uniform_equal_sims_is_log_k():
    z = Tensor(np.ones((2, 2)))
    protos = Tensor(np.ones((4, 2)))
    assert L.swav_xent(z, np.full((2, 4), 0.25), protos, 0.1).item() == pytest.approx(math.log(4), abs=1e-14)


def test_swav_matches_loops():
    rng = np.random.default_rng(6)
    for _ in range(100):
        n, k, d = rng.integers(1, 9), rng.integers(1, 9), rng.integers(1, 17)
        z, p = rand(rng, n, d), rand(rng, k, d)
        a = rng.dirichlet(np.ones(k), size=n)
        assert abs(L.swav_xent(Tensor(z), a, Tensor(p), 0.1).item() - naive_swav(z, a, p, 0.1)) <= 1e-12


def test_swav_dim_mismatch():
    with pytest.raises(tl.DimMismatch):
        L.swav_xent(Tensor(np.ones((2, 3))), np.full((2, 2), 0.5), Tensor(np.ones((2, 4))), 0.1)


def test_swalip_modified_needs_two_views():
    z = Tensor(np.eye(3))
    with pytest.raises(L.ViewCountMismatch):
        L.swalip_modified(z, None, z, z)


def test_swalip_modified_lam_zero_is_contrastive():
    rng = np.random.default_rng(7)
    views = [Tensor(rand(rng, 4, 3)) for _ in range(4)]
    got = L.swalip_modified(*views, lam=0.0, temperature=0.2).item()
    za, zab, zb, zbb = views
    own_views = [za, zab, za, zab, zb, zbb, zb, zbb]
    protos = [zb, zb, zbb, zbb, za, za, zab, zab]
    terms = [L.contrastive_directional(o, p, 5.0).item() for o, p in zip(own_views, protos)]
    assert got == pytest.approx(float(np.mean(terms)), abs=1e-12)


def test_swalip_modified_orthonormal_temperature_monotone():
    z = Tensor(np.eye(4))
    values = [L.swalip_modified(z, z, z, z, lam=0.5, temperature=t).item() for t in (1.0, 0.5, 0.1)]
    assert values[0] > values[1] > values[2]
    a = L.swalip_assignments([z.data] * 4, 0.5)[0]
    assert (np.diag(a) > 0.5).all()


@settings(max_examples=30, deadline=None)
@given(seeds)
def test_swalip_modified_permutation_symmetry(seed):
    rng = np.random.default_rng(seed)
    arrs = [rand(rng, 5, 3) for _ in range(4)]
    perm = rng.permutation(5)
    base = L.swalip_modified(*map(Tensor, arrs)).item()
    moved = L.swalip_modified(*(Tensor(a[perm]) for a in arrs)).item()
    assert moved == pytest.approx(base, abs=1e-9)
    assert base >= 0


def test_swalip_learned_is_symmetric_mean():
    rng = np.random.default_rng(8)
    za, zb, p = Tensor(rand(rng, 6, 3)), Tensor(rand(rng, 6, 3)), Tensor(rand(rng, 4, 3))
    assert L.swalip_learned(za, zb, p).item() == pytest.approx(L.swalip_learned(zb, za, p).item(), abs=1e-14)


# --- combination --------------------------------------------------------------

@pytest.mark.parametrize("alpha,beta,expected", [(1, 0, 2.0), (0, 1, 3.0), (1, 1, 5.0), (0.5, 0.25, 1.75)])
def test_combined_objective(alpha, beta, expected):
    assert L.combined_objective(2.0, 3.0, alpha, beta).item() == expected


def test_loss_breakdown_dict():
    b = L.LossBreakdown(total=1.0, loss_a=0.5)
    d = b.as_dict()
    assert d["total"] == 1.0 and d["loss_a"] == 0.5 and "non_contrastive" in d
