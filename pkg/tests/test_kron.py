import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from wavelg.errors import ShapeError
from wavelg.kron import (
    assemble_blocks,
    block_partition,
    compose_weight,
    grad_scalers,
    grad_templates,
    kron_product,
)

from conftest import fd_grad, rel_err


def kron_oracle(a, b):
    """Entrywise definition: out[j*p + r, k*q + c] = a[j, k] * b[r, c]."""
    m, n = a.shape
    p, q = b.shape
    out = np.zeros((m * p, n * q))
    for j in range(m):
        for k in range(n):
            for r in range(p):
                for c in range(q):
                    out[j * p + r, k * q + c] = a[j, k] * b[r, c]
    return out


def compose_oracle(T, S):
    return sum(kron_oracle(t, s) for t, s in zip(T, S))


def random_factors(r, n=None):
    n = n or int(r.integers(1, 4))
    t1, t2, s1, s2 = (int(v) for v in r.integers(1, 5, size=4))
    return r.standard_normal((n, t1, t2)), r.standard_normal((n, s1, s2))


def test_identity_kron_is_block_diagonal(rng):
    b = rng.standard_normal((2, 3))
    out = kron_product(np.eye(2), b)
    assert np.array_equal(out[:2, :3], b) and np.array_equal(out[2:, 3:], b)
    assert not out[:2, 3:].any() and not out[2:, :3].any()


def test_kron_hand_example():
    assert kron_product([[1, 2]], [[3], [4]]).tolist() == [[3, 6], [4, 8]]


def test_kron_full_width_template_shape():
    # full-width templates (t = 192) with a 1x4 scaler, as used for MLP weights
    assert kron_product(np.zeros((192, 192)), np.zeros((1, 4))).shape == (192, 768)


@pytest.mark.parametrize("m,n,p,q", [(m, n, p, q) for m in (1, 3) for n in (1, 2, 3) for p in (1, 3) for q in (1, 2, 3)])
def test_kron_matches_index_oracle(m, n, p, q, rng):
    a, b = rng.standard_normal((m, n)), rng.standard_normal((p, q))
    assert np.array_equal(kron_product(a, b), kron_oracle(a, b))


def test_kron_matches_numpy_kron(rng):
    a, b = rng.standard_normal((3, 2)), rng.standard_normal((4, 5))
    assert np.allclose(kron_product(a, b), np.kron(a, b), rtol=0, atol=1e-15)


def test_compose_identity_scaler(rng):
    T = rng.standard_normal((3, 3))
    assert np.array_equal(compose_weight([T], [np.array([[1.0]])]), T)


def test_compose_linearity_pair(rng):
    T1, T2 = rng.standard_normal((2, 2)), rng.standard_normal((2, 2))
    assert np.allclose(compose_weight([T1, T2], [[[1.0]], [[-1.0]]]), T1 - T2)


def test_compose_matches_brute_force(rng):
    T, S = rng.standard_normal((2, 2, 2)), rng.standard_normal((2, 2, 3))
    assert np.max(np.abs(compose_weight(T, S) - compose_oracle(T, S))) < 1e-6


def test_compose_accepts_lists_and_stacks(rng):
    T, S = random_factors(rng, 3)
    assert np.array_equal(compose_weight(list(T), list(S)), compose_weight(T, S))


@settings(max_examples=60, deadline=None)
@given(st.integers(0, 2**31))
def test_shape_law_and_bilinearity(seed):
    r = np.random.default_rng(seed)
    T, S = random_factors(r)
    n, t1, t2 = T.shape
    _, s1, s2 = S.shape
    W = compose_weight(T, S)
    assert W.shape == (t1 * s1, t2 * s2)
    T2, S2 = r.standard_normal(T.shape), r.standard_normal(S.shape)
    a, b = r.standard_normal(2)
    assert np.allclose(compose_weight(a * T + b * T2, S), a * W + b * compose_weight(T2, S), atol=1e-6)
    assert np.allclose(compose_weight(T, a * S + b * S2), a * W + b * compose_weight(T, S2), atol=1e-6)


def test_compose_rejects_bad_inputs(rng):
    with pytest.raises(ShapeError):
        compose_weight([], [])
    with pytest.raises(ShapeError):
        compose_weight([np.ones((2, 2)), np.ones((3, 3))], [np.ones((1, 1))] * 2)
    with pytest.raises(ShapeError):
        compose_weight([np.ones((2, 2))], [np.ones((1, 1))] * 2)


# ---- gradients ------------------------------------------------------------

def test_grad_scalers_identity_template_all_ones():
    t, s = 3, 2
    G = np.ones((t * s, t * s))
    dS = grad_scalers(G, [np.eye(t)])
    assert np.array_equal(dS[0], t * np.ones((s, s)))


def test_grad_scalers_all_ones_upstream_closed_form(rng):
    T = rng.standard_normal((2, 3, 2))
    dS = grad_scalers(np.ones((3 * 4, 2 * 5)), T)
    for i in range(2):
        assert np.allclose(dS[i], T[i].sum() * np.ones((4, 5)))


def test_grad_templates_unit_scaler_is_upstream(rng):
    G = rng.standard_normal((3, 4))
    assert np.array_equal(grad_templates(G, [np.array([[1.0]])])[0], G)


def test_grad_templates_all_ones_scaler_block_sums(rng):
    G = rng.standard_normal((2 * 3, 3 * 2))
    dT = grad_templates(G, [np.ones((3, 2))])[0]
    blocks = block_partition(G, 2, 3)
    assert np.allclose(dT, [[b.sum() for b in row] for row in blocks])


def _fd_factor_check(r):
    T, S = random_factors(r)
    C = r.standard_normal(compose_weight(T, S).shape)

    def loss():
        W = compose_weight(T, S)
        return float(np.sum(C * W) + 0.5 * np.sum(W**2))  # smooth, nonlinear in W

    G = C + compose_weight(T, S)
    dT, dS = grad_templates(G, S), grad_scalers(G, T)
    num_T = np.array([fd_grad(loss, T, i) for i in np.ndindex(T.shape)]).reshape(T.shape)
    num_S = np.array([fd_grad(loss, S, i) for i in np.ndindex(S.shape)]).reshape(S.shape)
    return rel_err(dT, num_T, 1e-6), rel_err(dS, num_S, 1e-6)


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 2**31))
def test_factor_gradients_match_finite_differences(seed):
    et, es = _fd_factor_check(np.random.default_rng(seed))
    assert et < 1e-4 and es < 1e-4


def test_gradients_reject_indivisible_upstream():
    with pytest.raises(ShapeError, match="t1=2"):
        grad_scalers(np.ones((3, 4)), np.ones((1, 2, 2)))
    with pytest.raises(ShapeError, match="s2=3"):
        grad_templates(np.ones((4, 4)), np.ones((1, 2, 3)))


# ---- block partition ------------------------------------------------------

def test_partition_scalars():
    grid = block_partition(np.array([[1, 2], [3, 4]]), 2, 2)
    assert [[b.item() for b in row] for row in grid] == [[1, 2], [3, 4]]


def test_partition_index_arithmetic():
    w = np.arange(24).reshape(4, 6)
    grid = block_partition(w, 2, 3)
    for j in range(2):
        for k in range(3):
            expect = [[w[2 * j + a, 2 * k + b] for b in range(2)] for a in range(2)]
            assert grid[j][k].tolist() == expect


@settings(max_examples=50, deadline=None)
@given(st.integers(1, 4), st.integers(1, 4), st.integers(1, 3), st.integers(1, 3))
def test_partition_round_trip(t1, t2, h, v):
    w = np.random.default_rng(t1 * 7 + t2).standard_normal((t1 * h, t2 * v))
    assert np.array_equal(assemble_blocks(block_partition(w, t1, t2)), w)


def test_partition_names_bad_dimension():
    with pytest.raises(ShapeError, match="cols=5"):
        block_partition(np.ones((4, 5)), 2, 2)
