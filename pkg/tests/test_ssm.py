import math
from fractions import Fraction

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from mambaloc import ssm
from mambaloc import tensor as T
from mambaloc.errors import DomainError, ShapeMismatch


def loop_scan(Abar, Bbar, C, x):
    """Plain-python recurrence used as an independent oracle."""
    b_, l_, d_, n_ = Abar.shape
    y = np.zeros((b_, l_, d_))
    for b in range(b_):
        for d in range(d_):
            h = [0.0] * n_
            for t in range(l_):
                for n in range(n_):
                    h[n] = Abar[b, t, d, n] * h[n] + Bbar[b, t, d, n] * x[b, t, d]
                y[b, t, d] = sum(C[b, t, n] * h[n] for n in range(n_))
    return y


def random_system(rng, b, l, d, n):
    delta = rng.uniform(0.01, 1.0, (b, l, d))
    A = -np.exp(rng.normal(size=(d, n)))
    sys = ssm.discretize(delta, A, rng.normal(size=(b, l, n)), rng.normal(size=(b, l, n)))
    return sys, rng.normal(size=(b, l, d))


# -- init --------------------------------------------------------------------

def test_hippo_rows():
    A_log = ssm.hippo_init(3, 4)
    np.testing.assert_allclose(A_log, np.tile([0, math.log(2), math.log(3), math.log(4)], (3, 1)), atol=1e-15)
    np.testing.assert_allclose(-np.exp(A_log[1]), [-1, -2, -3, -4], atol=1e-14)


@given(st.integers(1, 40), st.integers(1, 32))
def test_hippo_strictly_negative(D, N):
    A = -np.exp(ssm.hippo_init(D, N))
    assert (A < 0).all()
    assert (A == A[0]).all()


def test_dt_rank_rule():
    assert ssm.dt_rank_for(8) == 1
    assert ssm.dt_rank_for(16) == 1
    assert ssm.dt_rank_for(47) == 2
    assert ssm.dt_rank_for(256) == 16
    assert ssm.SsmParams.init(64).rank == 4


def test_default_state_dim_is_16():
    assert ssm.SsmParams.init(32).N == 16


def test_param_shape_checked():
    p = ssm.SsmParams.init(8, 4)
    with pytest.raises(ShapeMismatch):
        ssm.SsmParams(p.A_log, p.W_C, p.W_B, p.W_dt_down, p.W_dt_down, p.dt_bias)


# -- selectivity -------------------------------------------------------------

def test_selectivity_zero_input_gives_ln2():
    p = ssm.SsmParams.init(8, 4)
    p.dt_bias.data[:] = 0.0
    B, C, delta = ssm.selectivity(T.Tensor(np.zeros((2, 3, 8))), p)
    np.testing.assert_allclose(delta.data, math.log(2), atol=1e-15)
    assert B.shape == (2, 3, 4) and C.shape == (2, 3, 4) and delta.shape == (2, 3, 8)


def test_selectivity_delta_positive(rng):
    p = ssm.SsmParams.init(16, 8, rng=rng)
    x = T.Tensor(rng.normal(scale=5.0, size=(1000, 1, 16)))
    assert (ssm.selectivity(x, p)[2].data > 0).all()


def test_selectivity_zero_wb_gives_zero_b(rng):
    p = ssm.SsmParams.init(8, 4, rng=rng)
    p.W_B.data[:] = 0.0
    B, _, _ = ssm.selectivity(T.Tensor(rng.normal(size=(2, 5, 8))), p)
    assert not B.data.any()


def test_selectivity_shape_error():
    with pytest.raises(ShapeMismatch):
        ssm.selectivity(T.Tensor(np.zeros((2, 3, 7))), ssm.SsmParams.init(8, 4))


# -- discretize --------------------------------------------------------------

def test_zoh_scalar_closed_form():
    sys = ssm.discretize(np.full((1, 1, 1), math.log(2)), [[-1.0]], np.ones((1, 1, 1)))
    assert abs(sys.Abar.data.item() - 0.5) < 1e-15
    assert abs(sys.Bbar.data.item() - 0.5) < 1e-15


def test_zoh_taylor_order():
    A = np.array([[-1.0, -3.0]])
    errs = []
    for k in range(6):
        dt = 0.1 / 2 ** k
        sys = ssm.discretize(np.full((1, 1, 1), dt), A, np.ones((1, 1, 2)))
        errs.append(np.abs(sys.Abar.data - (1 + dt * A)).max())
        np.testing.assert_allclose(sys.Bbar.data[0, 0, 0], dt * np.ones(2), rtol=2 * dt * 3)
    ratios = np.array(errs[:-1]) / np.array(errs[1:])
    assert np.all(np.abs(ratios - 4.0) < 0.4), ratios


def test_zoh_series_branch_is_continuous():
    # either side of the 1e-8 switch
    A = np.array([[-1.0]])
    lo = ssm.discretize(np.full((1, 1, 1), 0.99e-8), A, np.ones((1, 1, 1))).Bbar.data.item()
    hi = ssm.discretize(np.full((1, 1, 1), 1.01e-8), A, np.ones((1, 1, 1))).Bbar.data.item()
    assert abs(lo / 0.99e-8 - 1) < 1e-7
    assert abs(hi / 1.01e-8 - 1) < 1e-7


def test_zoh_exact_against_formula(rng):
    delta = rng.uniform(0.05, 2.0, (2, 3, 4))
    A = -np.exp(rng.normal(size=(4, 5)))
    Bs = rng.normal(size=(2, 3, 5))
    sys = ssm.discretize(delta, A, Bs)
    dA = delta[..., None] * A
    np.testing.assert_allclose(sys.Abar.data, np.exp(dA), rtol=1e-14)
    ref = (np.exp(dA) - 1) / dA * delta[..., None] * Bs[:, :, None, :]
    np.testing.assert_allclose(sys.Bbar.data, ref, rtol=1e-12)


@given(st.floats(1e-6, 20.0), st.floats(1e-3, 50.0))
def test_abar_in_unit_interval(dt, a):
    sys = ssm.discretize(np.full((1, 1, 1), dt), [[-a]], np.ones((1, 1, 1)))
    v = sys.Abar.data.item()
    assert 0.0 < v < 1.0 or (v == 0.0 and dt * a > 700)


def test_discretize_rejects_nonpositive_delta():
    with pytest.raises(DomainError):
        ssm.discretize(np.array([[[0.1, 0.0]]]), -np.ones((2, 1)), np.ones((1, 1, 1)))
    with pytest.raises(DomainError):
        ssm.discretize(np.array([[[-0.1]]]), -np.ones((1, 1)), np.ones((1, 1, 1)))


def test_discretize_shape_error():
    with pytest.raises(ShapeMismatch):
        ssm.discretize(np.ones((1, 2, 3)), -np.ones((4, 2)), np.ones((1, 2, 2)))


# -- scans -------------------------------------------------------------------

def tiny_system(abar, bbar, c):
    a = np.asarray(abar, dtype=float).reshape(1, -1, 1, 1)
    b = np.asarray(bbar, dtype=float).reshape(1, -1, 1, 1)
    return ssm.DiscretizedSystem(T.Tensor(a), T.Tensor(b), T.Tensor(np.asarray(c, dtype=float).reshape(1, -1, 1)))


@pytest.mark.parametrize("scan", [ssm.scan_sequential, ssm.scan_chunked])
def test_scan_hand_example(scan):
    y = scan(tiny_system([0.5, 0.5], [1, 1], [1, 1]), np.ones((1, 2, 1)))
    np.testing.assert_array_equal(y.data.ravel(), [1.0, 1.5])


def test_scan_memoryless_and_zero_input(rng):
    sys, x = random_system(rng, 2, 9, 3, 4)
    sys.Abar = T.Tensor(np.zeros(sys.Abar.shape))
    y = ssm.scan_sequential(sys, x).data
    ref = np.einsum("bln,bldn->bld", sys.C.data, sys.Bbar.data) * x
    np.testing.assert_allclose(y, ref, atol=1e-14)
    sys, _ = random_system(rng, 2, 9, 3, 4)
    assert not ssm.scan_chunked(sys, np.zeros((2, 9, 3)), 4).data.any()


def test_scan_matches_loop_oracle(rng):
    sys, x = random_system(rng, 2, 11, 3, 4)
    ref = loop_scan(sys.Abar.data, sys.Bbar.data, sys.C.data, x)
    np.testing.assert_allclose(ssm.scan_sequential(sys, x).data, ref, atol=1e-12)
    np.testing.assert_allclose(ssm.scan_chunked(sys, x, 3).data, ref, atol=1e-12)


def test_chunk_equal_to_length_is_bitwise(rng):
    sys, x = random_system(rng, 2, 16, 3, 4)
    seq = ssm.scan_sequential(sys, x).data
    assert np.array_equal(ssm.scan_chunked(sys, x, 16).data, seq)
    assert np.array_equal(ssm.scan_chunked(sys, x, 100).data, seq)


@pytest.mark.parametrize("chunk", [1, 7, 64])
def test_chunked_matches_sequential(rng, chunk):
    sys, x = random_system(rng, 3, 200, 5, 16)
    diff = np.abs(ssm.scan_chunked(sys, x, chunk).data - ssm.scan_sequential(sys, x).data).max()
    assert diff < 1e-9


def test_oracle_equivalence_100_cases():
    rng = np.random.default_rng(7)
    for case in range(100):
        b = int(rng.integers(1, 5))
        l = [1, 2, 64, 1024][case % 4]
        d = int(rng.integers(1, 33)) if l < 1024 else int(rng.integers(1, 5))
        chunk = int(rng.choice([1, 3, 7, 16, 64, 100]))
        sys, x = random_system(rng, b, l, d, 16)
        diff = np.abs(ssm.scan_chunked(sys, x, chunk).data - ssm.scan_sequential(sys, x).data).max()
        assert diff < 1e-9, (case, b, l, d, chunk, diff)


def test_scan_shape_errors(rng):
    sys, x = random_system(rng, 1, 4, 2, 3)
    with pytest.raises(ShapeMismatch):
        ssm.scan_sequential(sys, np.zeros((1, 4, 3)))
    with pytest.raises(ShapeMismatch):
        ssm.scan_chunked(ssm.DiscretizedSystem(sys.Abar, sys.Bbar, None), x)
    with pytest.raises(ValueError):
        ssm.scan_chunked(sys, x, 0)


def test_state_bound_on_constant_input():
    rng = np.random.default_rng(3)
    for _ in range(20):
        d, n, l = 4, 8, 300
        delta = np.broadcast_to(rng.uniform(0.01, 1.0, (1, 1, d)), (1, l, d)).copy()
        A = -np.exp(rng.normal(size=(d, n)))
        Bs = np.broadcast_to(rng.normal(size=(1, 1, n)), (1, l, n)).copy()
        sys = ssm.discretize(delta, A, Bs, np.ones((1, l, n)))
        x = np.full((1, l, d), rng.normal())
        _, h = ssm.scan_chunked(sys, x, 16, return_states=True)
        a = sys.Abar.data
        bound = np.abs(sys.Bbar.data).max() * np.abs(x).max() / (1 - a.max())
        assert np.abs(h).max() <= bound * (1 + 1e-12)


dyadic = st.integers(-64, 64).map(lambda k: k / 16)


@given(dyadic, dyadic, dyadic, dyadic, dyadic, dyadic)
def test_compose_associative_exact(a1, b1, a2, b2, a3, b3):
    p, q, r = (a1, b1), (a2, b2), (a3, b3)
    left = ssm.compose(ssm.compose(p, q), r)
    right = ssm.compose(p, ssm.compose(q, r))
    assert left == right
    # and against exact rationals
    F = [Fraction(v) for v in (a1, b1, a2, b2, a3, b3)]
    assert Fraction(left[0]) == F[0] * F[2] * F[4]
    assert Fraction(left[1]) == F[4] * (F[2] * F[1] + F[3]) + F[5]


def test_compose_matches_stepping():
    p, q = (0.5, 2.0), (0.25, -1.0)
    a, b = ssm.compose(p, q)
    h = 3.0
    assert a * h + b == q[0] * (p[0] * h + p[1]) + q[1]


# -- gradients ---------------------------------------------------------------

@pytest.mark.parametrize("chunk", [None, 1, 3, 64])
def test_scan_gradient(rng, chunk):
    delta = rng.uniform(0.1, 1.0, (2, 7, 3))
    Ab = T.parameter(np.exp(-delta[..., None] * np.exp(rng.normal(size=(3, 4)))))
    Bb = T.parameter(rng.normal(size=(2, 7, 3, 4)))
    C = T.parameter(rng.normal(size=(2, 7, 4)))
    x = T.parameter(rng.normal(size=(2, 7, 3)))
    w = rng.normal(size=(2, 7, 3))

    def f():
        sys = ssm.DiscretizedSystem(Ab, Bb, C)
        y = ssm.scan_sequential(sys, x) if chunk is None else ssm.scan_chunked(sys, x, chunk)
        return (y * w).sum()

    assert T.grad_check(f, [Ab, Bb, C, x], h=1e-6) < 1e-5


@pytest.mark.parametrize("seed", range(5))
def test_full_chain_gradient(seed):
    r = np.random.default_rng(seed)
    p = ssm.SsmParams.init(6, 4, rng=r)
    x = T.parameter(r.normal(size=(2, 5, 6)))
    w = r.normal(size=(2, 5, 6))
    err = T.grad_check(lambda: (ssm.selective_ssm(x, p, chunk=2) * w).sum(), [x] + p.parameters(), h=1e-6)
    assert err < 1e-5


def test_param_count():
    p = ssm.SsmParams.init(32, 16)
    assert sum(q.data.size for q in p.parameters()) == ssm.ssm_param_count(32, 16)
