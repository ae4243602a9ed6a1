from itertools import combinations, permutations

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from cfdl import gradcore as gc
from cfdl.cfd import (CfdEncoders, Linear, decouple, enumerate_subsets, loss_diff, loss_ps, loss_sh,
                      pairwise_cosine_matrix)
from cfdl.gradcore import Matrix

from conftest import grad_check


def inputs(rng, M, batch, in_dim):
    return [Matrix(rng.normal(size=(batch, in_dim))) for _ in range(M)]


def test_lattice_m3():
    lat = enumerate_subsets(3)
    assert lat.partials == ((1, 2), (1, 3), (2, 3))
    assert lat.final_count == 7
    assert lat.raw_count == 12
    assert lat.final_names() == ["F", "P_1", "P_2", "P_3", "G_12", "G_13", "G_23"]
    assert lat.raw_names()[:6] == ["F_1", "F_2", "F_3", "P_1", "P_2", "P_3"]
    assert lat.raw_names()[6:] == ["G_12^1", "G_12^2", "G_13^1", "G_13^3", "G_23^2", "G_23^3"]


def test_lattice_m4():
    lat = enumerate_subsets(4)
    assert len(lat.partials) == 10
    assert sum(len(s) == 2 for s in lat.partials) == 6
    assert sum(len(s) == 3 for s in lat.partials) == 4
    assert lat.raw_count == 32
    assert lat.final_count == 15
    # size first, then lexicographic
    assert lat.partials[5] == (3, 4) and lat.partials[6] == (1, 2, 3)


def test_lattice_m2_and_invalid():
    lat = enumerate_subsets(2)
    assert lat.partials == ()
    assert lat.final_count == 3
    with pytest.raises(ValueError):
        enumerate_subsets(1)


@pytest.mark.parametrize("M", [2, 3, 4, 5])
def test_final_count_is_all_nonempty_subsets(M):
    lat = enumerate_subsets(M)
    assert lat.final_count == 2 ** M - 1
    assert len(set(lat.all_subsets())) == 2 ** M - 1
    assert enumerate_subsets(M, with_partials=False).final_count == M + 1


def test_glorot_bounds_and_zero_bias():
    lin = Linear.glorot(512, 32, np.random.default_rng(0))
    limit = np.sqrt(6 / 544)
    assert np.all(np.abs(lin.W.data) <= limit)
    assert np.abs(lin.W.data).max() > 0.9 * limit
    assert np.array_equal(lin.b.data, np.zeros((1, 32)))
    assert lin.num_parameters() == 16416


def test_decouple_shapes(rng):
    lat = enumerate_subsets(3)
    enc = CfdEncoders.init(lat, 6, 32, rng)
    feats = decouple(inputs(rng, 3, 2, 6), enc)
    flat = feats.flat()
    assert len(flat) == 7 and all(f.shape == (2, 32) for f in flat)
    assert len(feats.raw_flat()) == 12
    with pytest.raises(ValueError):
        decouple(inputs(rng, 2, 2, 6), enc)
    with pytest.raises(gc.ShapeError):
        decouple(inputs(rng, 3, 2, 5), enc)


def test_decouple_symmetric_inputs(rng):
    lat = enumerate_subsets(3)
    enc = CfdEncoders.init(lat, 5, 4, rng)
    for lin in enc.specific + list(enc.partial.values()):
        lin.W.data = enc.shared.W.data.copy()
    x = Matrix(rng.normal(size=(3, 5)))
    feats = decouple([x, x, x], enc)
    for f in feats.raw_shared:
        assert np.array_equal(f.data, feats.raw_shared[0].data)
    assert np.allclose(feats.F.data, feats.raw_shared[0].data, atol=1e-15)


def test_decouple_zero_weights_give_bias(rng):
    lat = enumerate_subsets(3)
    enc = CfdEncoders.init(lat, 5, 4, rng)
    bias = np.array([[1.0, -2.0, 0.5, 3.0]])
    for _, lin in enc.named_layers():
        lin.W.data = np.zeros_like(lin.W.data)
        lin.b.data = bias.copy()
    feats = decouple(inputs(rng, 3, 6, 5), enc)
    for f in feats.flat() + feats.raw_flat():
        assert np.allclose(f.data, np.tile(bias, (6, 1)))


def test_loss_sh_examples(rng):
    assert loss_sh([Matrix([[0.0]]), Matrix([[2.0]])]).item() == 4.0
    a = Matrix(rng.normal(size=(2, 3)))
    assert loss_sh([a, a, a]).item() == 0.0
    xs = [Matrix(rng.normal(size=(2, 3))) for _ in range(3)]
    expected = sum(np.mean((p.data - q.data) ** 2) for p, q in combinations(xs, 2))
    assert loss_sh(xs).item() == pytest.approx(expected, rel=1e-14)


def test_loss_ps_examples(rng):
    lat = enumerate_subsets(3)
    enc = CfdEncoders.init(lat, 4, 3, rng)
    feats = decouple(inputs(rng, 3, 5, 4), enc)
    expected = sum(np.mean((g[0].data - g[1].data) ** 2) for g in feats.raw_partial.values())
    assert len(feats.raw_partial) == 3
    assert loss_ps(feats.raw_partial).item() == pytest.approx(expected, rel=1e-14)
    same = {s: [feats.raw_partial[s][0]] * len(s) for s in feats.raw_partial}
    assert loss_ps(same).item() == 0.0
    m2 = decouple(inputs(rng, 2, 5, 4), CfdEncoders.init(enumerate_subsets(2), 4, 3, rng))
    assert loss_ps(m2.raw_partial).item() == 0.0


def test_loss_ps_triples_use_all_pairs(rng):
    lat = enumerate_subsets(4)
    enc = CfdEncoders.init(lat, 3, 2, rng)
    feats = decouple(inputs(rng, 4, 3, 3), enc)
    expected = sum(np.mean((p.data - q.data) ** 2)
                   for group in feats.raw_partial.values() for p, q in combinations(group, 2))
    assert loss_ps(feats.raw_partial).item() == pytest.approx(expected, rel=1e-13)


def test_loss_diff_examples(rng):
    feats = [Matrix(rng.normal(size=(4, 5))) for _ in range(7)]
    expected = sum(gc.cosine_similarity(a, b).item() for a, b in combinations(feats, 2))
    assert loss_diff(feats).item() == pytest.approx(expected, rel=1e-13)
    eye = np.eye(7)
    ortho = [Matrix(np.tile(eye[k], (3, 1))) for k in range(7)]
    assert loss_diff(ortho).item() == 0.0
    v = Matrix(np.tile([1.0, 2.0, -1.0], (3, 1)))
    assert loss_diff([v] * 7).item() == pytest.approx(21.0, abs=1e-6)


def test_loss_diff_scale_invariance(rng):
    feats = [Matrix(rng.normal(size=(4, 32))) for _ in range(7)]
    base = loss_diff(feats).item()
    for c in (0.5, 2.0, 7.0, 1e3):
        scaled = list(feats)
        scaled[2] = gc.scale(feats[2], c)
        assert abs(loss_diff(scaled).item() - base) < 1e-9
    # for tiny norms the epsilon guard dominates; the drift stays within its first-order bound
    for c in (0.1, 1e-3):
        tiny = list(feats)
        tiny[2] = gc.scale(feats[2], c)
        min_norm = c * np.linalg.norm(feats[2].data, axis=1).min()
        assert abs(loss_diff(tiny).item() - base) <= 6 * gc.COSINE_EPS / min_norm


@settings(max_examples=100, deadline=None)
@given(st.integers(0, 10_000), st.booleans())
def test_alignment_losses_nonnegative_zero_iff_equal(seed, equal):
    rng = np.random.default_rng(seed)
    a = rng.normal(size=(3, 4))
    b = a.copy() if equal else a + rng.normal(size=(3, 4)) * 10 ** rng.uniform(-6, 1)
    v = loss_sh([Matrix(a), Matrix(b)]).item()
    w = loss_ps({(1, 2): [Matrix(a), Matrix(b)]}).item()
    assert v >= 0 and w >= 0
    assert (v == 0) == equal and (w == 0) == equal


@pytest.mark.parametrize("perm", list(permutations(range(3))))
def test_decouple_permutation_consistency(perm):
    rng = np.random.default_rng(11)
    lat = enumerate_subsets(3)
    enc = CfdEncoders.init(lat, 4, 3, rng)
    x = inputs(rng, 3, 5, 4)
    pi = [p + 1 for p in perm]  # new modality j reads old modality pi[j-1]
    x2 = [x[pi[j] - 1] for j in range(3)]

    def old_of(s):
        return tuple(sorted(pi[j - 1] for j in s))

    enc2 = CfdEncoders(lat, enc.shared, [enc.specific[pi[j] - 1] for j in range(3)],
                       {s: enc.partial[old_of(s)] for s in lat.partials})
    f1, f2 = decouple(x, enc), decouple(x2, enc2)
    assert np.allclose(f1.F.data, f2.F.data, atol=1e-12)
    for j in range(3):
        assert np.array_equal(f2.P[j].data, f1.P[pi[j] - 1].data)
    for s in lat.partials:
        assert np.allclose(f2.G[s].data, f1.G[old_of(s)].data, atol=1e-12)


def test_alignment_losses_converge_under_gradient_descent():
    rng = np.random.default_rng(0)
    lat = enumerate_subsets(3)
    enc = CfdEncoders.init(lat, 6, 8, rng)
    x = inputs(rng, 3, 16, 6)
    params = [p for _, lin in enc.named_layers() for p in (lin.W, lin.b)]
    for _ in range(2000):
        feats = decouple(x, enc)
        loss = gc.add(loss_sh(feats.raw_shared), loss_ps(feats.raw_partial))
        gc.zero_grads(params)
        gc.backward(loss)
        for p in params:
            p.data -= 1e-2 * p.grad
    feats = decouple(x, enc)
    worst = max(gc.mse(a, b).item() for a, b in combinations(feats.raw_shared, 2))
    assert worst < 1e-3


def _loss_case(which):
    def case(rng):
        enc = CfdEncoders.init(enumerate_subsets(3), 3, 2, rng)
        x = inputs(rng, 3, 4, 3)
        params = [p for _, lin in enc.named_layers() for p in (lin.W, lin.b)]

        def f():
            feats = decouple(x, enc)
            terms = {"L_sh": lambda: loss_sh(feats.raw_shared), "L_ps": lambda: loss_ps(feats.raw_partial),
                     "L_diff": lambda: loss_diff(feats)}
            if which == "sum":
                return gc.add_n([t() for t in terms.values()])
            return terms[which]()

        return f, params
    return case


LOSS_CASES = {name: _loss_case(name) for name in ("L_sh", "L_ps", "L_diff", "sum")}


@pytest.mark.parametrize("name", sorted(LOSS_CASES))
def test_loss_gradients_finite_difference(name):
    for seed in range(20):
        assert grad_check(*LOSS_CASES[name](np.random.default_rng(seed))) < 1e-4


def test_pairwise_cosine_matrix(rng):
    feats = [rng.normal(size=(6, 4)) for _ in range(5)]
    cs = pairwise_cosine_matrix(feats)
    assert cs.shape == (5, 5)
    assert np.allclose(cs, cs.T, atol=1e-15)
    assert np.allclose(np.diag(cs), 1.0, atol=1e-7)
    assert cs[1, 3] == pytest.approx(gc.cosine_similarity(Matrix(feats[1]), Matrix(feats[3])).item(), abs=1e-14)
