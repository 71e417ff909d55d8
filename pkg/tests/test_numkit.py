import itertools
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from lensforge.numkit import (
    AdamState, DomainError, NumericError, Rng, ShapeError, adam_step, assignment_min_cost, derive_seed,
    finite_diff_check, loglog_fit, matmul, sample_standard_normal, splitmix64,
)

MASK = (1 << 64) - 1


# --- pure-Python reference generator ---------------------------------------

def _rotl(x, k):
    return ((x << k) | (x >> (64 - k))) & MASK


def py_splitmix(state):
    state = (state + 0x9E3779B97F4A7C15) & MASK
    z = state
    z = ((z ^ (z >> 30)) * 0xBF58476D1CE4E5B9) & MASK
    z = ((z ^ (z >> 27)) * 0x94D049BB133111EB) & MASK
    return state, z ^ (z >> 31)


def py_xoshiro(seed, n):
    s, st_ = [], seed & MASK
    for _ in range(4):
        st_, out = py_splitmix(st_)
        s.append(out)
    outs = []
    for _ in range(n):
        outs.append((_rotl((s[1] * 5) & MASK, 7) * 9) & MASK)
        t = (s[1] << 17) & MASK
        s[2] ^= s[0]
        s[3] ^= s[1]
        s[1] ^= s[2]
        s[0] ^= s[3]
        s[2] ^= t
        s[3] = _rotl(s[3], 45)
    return outs


def test_splitmix_known_first_output():
    assert splitmix64(0)[1] == 0xE220A8397B1DCDAF


@pytest.mark.parametrize("seed", [0, 1, 42, 2**63 + 5, MASK])
def test_xoshiro_matches_pure_python(seed):
    assert [int(x) for x in Rng(seed).next_u64(50)] == py_xoshiro(seed, 50)


def test_xoshiro_hand_state():
    rng = Rng(0)
    rng._state = np.array([1, 2, 3, 4], dtype=np.uint64)
    out = rng.next_u64(2)
    assert int(out[0]) == 11520 and int(out[1]) == 0


def test_box_muller_uses_consecutive_uniform_pairs():
    u = Rng(9).uniform(4)
    z = Rng(9).normal(4)
    for i in range(2):
        r = math.sqrt(-2.0 * math.log(1.0 - u[2 * i]))
        th = 2.0 * math.pi * u[2 * i + 1]
        assert z[2 * i] == pytest.approx(r * math.cos(th), abs=1e-15)
        assert z[2 * i + 1] == pytest.approx(r * math.sin(th), abs=1e-15)


def test_normal_moments_seed_42():
    z = sample_standard_normal(Rng(42), 100_000)
    assert abs(z.mean()) < 0.02
    assert abs(z.var() - 1.0) < 0.05


def test_normal_determinism_and_degenerate():
    assert np.array_equal(Rng(5).normal(1000), Rng(5).normal(1000))
    with pytest.raises(DomainError):
        sample_standard_normal(Rng(5), 0)


def test_spawn_depends_on_keys_not_history():
    a = Rng(3)
    a.normal(10)
    assert np.array_equal(a.spawn(1, 2).uniform(5), Rng(3).spawn(1, 2).uniform(5))
    assert not np.array_equal(Rng(3).spawn(1).uniform(5), Rng(3).spawn(2).uniform(5))
    assert derive_seed(7, 1) != derive_seed(7, 2)


def test_choice_distinct():
    idx = Rng(1).choice(50, 20)
    assert len(set(idx.tolist())) == 20
    with pytest.raises(DomainError):
        Rng(1).choice(3, 4)


# --- matmul ------------------------------------------------------------------

def naive_matmul(a, b):
    n, k = len(a), len(a[0])
    m = len(b[0])
    out = [[0.0] * m for _ in range(n)]
    for i in range(n):
        for j in range(m):
            acc = 0.0
            for t in range(k):
                acc += a[i][t] * b[t][j]
            out[i][j] = acc
    return out


def test_matmul_examples():
    assert matmul([[1, 0], [0, 1]], [[3], [4]]).tolist() == [[3], [4]]
    assert matmul([[1, 2], [3, 4]], [[5], [6]]).tolist() == [[17], [39]]


def test_matmul_triple_loop_oracle():
    rng = Rng(8)
    a, b = rng.normal_like((8, 8)), rng.normal_like((8, 8))
    np.testing.assert_allclose(matmul(a, b), naive_matmul(a.tolist(), b.tolist()), rtol=0, atol=1e-13)


def test_matmul_shape_error():
    with pytest.raises(ShapeError):
        matmul(np.ones((2, 3)), np.ones((2, 3)))


def test_matmul_nonfinite_rejected():
    with pytest.raises(NumericError):
        matmul([[1e308, 1e308]], [[10.0], [10.0]])


@settings(max_examples=50, deadline=None)
@given(st.integers(0, 2**32), st.integers(1, 5), st.integers(1, 5), st.integers(1, 5), st.integers(1, 5))
def test_matmul_associative(seed, n, k, m, p):
    rng = Rng(seed)
    a, b, c = rng.normal_like((n, k)), rng.normal_like((k, m)), rng.normal_like((m, p))
    np.testing.assert_allclose(matmul(matmul(a, b), c), matmul(a, matmul(b, c)), rtol=0, atol=1e-9)


# --- Adam --------------------------------------------------------------------

def test_adam_zero_grad_is_identity():
    w = np.array([1.0, -2.0, 3.0])
    st_ = AdamState.zeros_like(w, lr=0.1)
    assert np.array_equal(adam_step(w, np.zeros(3), st_), w)
    assert st_.step == 1


@settings(max_examples=50, deadline=None)
@given(st.integers(0, 2**32), st.integers(0, 20))
def test_adam_zero_grad_identity_any_state(seed, warm):
    rng = Rng(seed)
    w = rng.normal_like((4,))
    st_ = AdamState.zeros_like(w, lr=0.05)
    for _ in range(warm):
        adam_step(w, rng.normal_like((4,)), st_)
    st_.m[:] = 0.0
    st_.v[:] = np.abs(st_.v)
    assert np.array_equal(adam_step(w, np.zeros(4), st_), w)


def test_adam_descends_quadratic():
    w = np.array([3.0])
    st_ = AdamState.zeros_like(w, lr=0.1)
    assert adam_step(w, 2 * w, st_)[0] < 3.0


def test_adam_50_steps_matches_reference_recurrence():
    w = np.array([0.0])
    st_ = AdamState.zeros_like(w, lr=0.1)
    # scalar reference recurrence
    x, m, v = 0.0, 0.0, 0.0
    for t in range(1, 51):
        g = 2 * (w - 2.0)
        w = adam_step(w, g, st_)
        gx = 2 * (x - 2.0)
        m = 0.9 * m + 0.1 * gx
        v = 0.999 * v + 0.001 * gx * gx
        x -= 0.1 * (m / (1 - 0.9 ** t)) / (math.sqrt(v / (1 - 0.999 ** t)) + 1e-8)
    assert w[0] == pytest.approx(x, abs=1e-12)
    assert abs(w[0] - 2.0) < 0.5


def test_adam_shape_mismatch():
    with pytest.raises(ShapeError):
        adam_step(np.zeros(3), np.zeros(2), AdamState.zeros_like(np.zeros(3)))


# --- finite differences -------------------------------------------------------

def test_finite_diff_quadratic_exact():
    a = np.array([[2.0, 0.5], [0.5, 1.0]])
    w = np.array([0.3, -1.2])
    err = finite_diff_check(lambda x: float(x @ a @ x), w, 2 * a @ w)
    assert err < 1e-7


def test_finite_diff_detects_wrong_gradient():
    w = np.array([1.0, 2.0])
    assert finite_diff_check(lambda x: float(x @ x), w, np.array([2.0, 5.0])) > 0.1


def test_finite_diff_nonfinite():
    with pytest.raises(NumericError):
        finite_diff_check(lambda x: float("nan"), np.zeros(2), np.zeros(2))


# --- log-log fit ---------------------------------------------------------------

def test_loglog_exact_lines():
    assert loglog_fit([10, 1000], [0.1, 0.001])[0] == pytest.approx(-1.0, abs=1e-12)
    assert loglog_fit([100, 10000], [0.1, 0.01])[0] == pytest.approx(-0.5, abs=1e-12)


def test_loglog_noisy_power_law():
    rng = Rng(17)
    ns = np.array([50, 100, 200, 400, 800, 1600, 3200, 6400], dtype=float)
    ys = 3.0 * ns ** -0.4 * np.exp(0.05 * rng.normal(8))
    assert abs(loglog_fit(ns, ys)[0] + 0.4) < 0.1


def test_loglog_domain_errors():
    with pytest.raises(DomainError):
        loglog_fit([1, 2], [1, 0])
    with pytest.raises(DomainError):
        loglog_fit([2, 2], [1, 3])


@settings(max_examples=50, deadline=None)
@given(st.floats(-3, 3), st.floats(-5, 5), st.lists(st.floats(1, 1e5), min_size=2, max_size=8, unique=True))
def test_loglog_recovers_planted_line(slope, icpt, xs):
    xs = np.array(xs)
    if np.ptp(np.log(xs)) < 1e-3:
        return
    s, b = loglog_fit(xs, np.exp(icpt) * xs ** slope)
    assert s == pytest.approx(slope, abs=1e-6)
    assert b == pytest.approx(icpt, abs=1e-5)


# --- assignment -------------------------------------------------------------

def brute_force(cost):
    n = len(cost)
    return min(sum(cost[i][p[i]] for i in range(n)) for p in itertools.permutations(range(n)))


def test_assignment_examples():
    c = np.ones((4, 4)) - np.eye(4)
    perm, total = assignment_min_cost(c)
    assert perm.tolist() == [0, 1, 2, 3] and total == 0.0
    perm, total = assignment_min_cost([[1, 0], [0, 1]])
    assert perm.tolist() == [1, 0] and total == 0.0


def test_assignment_6x6_brute_force():
    c = np.abs(Rng(6).normal_like((6, 6)))
    assert assignment_min_cost(c)[1] == pytest.approx(brute_force(c.tolist()), abs=1e-12)


@pytest.mark.parametrize("seed", range(100))
def test_assignment_matches_brute_force(seed):
    rng = Rng(1000 + seed)
    n = 1 + int(rng.integers(7, 1)[0])
    c = np.abs(rng.normal_like((n, n)))
    perm, total = assignment_min_cost(c)
    assert sorted(perm.tolist()) == list(range(n))
    assert total == pytest.approx(c[np.arange(n), perm].sum(), abs=1e-12)
    assert total == pytest.approx(brute_force(c.tolist()), abs=1e-12)


def test_assignment_errors():
    with pytest.raises(ShapeError):
        assignment_min_cost(np.ones((2, 3)))
    with pytest.raises(ShapeError):
        assignment_min_cost(np.ones((513, 513)))
    with pytest.raises(DomainError):
        assignment_min_cost([[-1.0, 0.0], [0.0, 1.0]])
