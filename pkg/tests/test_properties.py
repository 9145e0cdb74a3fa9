import numpy as np
from hypothesis import given, settings
from hypothesis import strategies as st

from conftest import central_difference, random_hermitian, random_unitary
from hwgrape.distortion import LinearOperator, RiseTimeOperator, compose, crosstalk_operator
from hwgrape.quantum import ControlProblem, DistortedPulse, fidelity, fidelity_gradient, propagators, total_propagator

seeds = st.integers(0, 2**32 - 1)


def random_problem(rng, d, k):
    return ControlProblem(
        random_hermitian(rng, d), tuple(random_hermitian(rng, d) for _ in range(k)), random_unitary(rng, d)
    )


@settings(max_examples=40, deadline=None)
@given(seed=seeds, d=st.integers(2, 6), k=st.integers(1, 3), m=st.integers(1, 8))
def test_propagators_unitary_and_fidelity_bounded(seed, d, k, m):
    rng = np.random.default_rng(seed)
    prob = random_problem(rng, d, k)
    q = DistortedPulse(rng.normal(scale=2.0, size=(m, k)), float(rng.uniform(0.01, 1.0)))
    for U in propagators(q, prob):
        assert np.allclose(U.conj().T @ U, np.eye(d), atol=1e-10)
    U = total_propagator(q, prob)
    assert np.allclose(U.conj().T @ U, np.eye(d), atol=1e-10)
    assert -1e-12 <= fidelity(q, prob) <= 1 + 1e-12


@settings(max_examples=25, deadline=None)
@given(seed=seeds, d=st.integers(2, 5), k=st.integers(1, 2), m=st.integers(1, 6))
def test_fidelity_gradient_matches_differences(seed, d, k, m):
    rng = np.random.default_rng(seed)
    prob = random_problem(rng, d, k)
    dt = float(rng.uniform(0.05, 0.5))
    x = rng.normal(size=(m, k))
    grad = fidelity_gradient(DistortedPulse(x, dt), prob)
    fd = central_difference(lambda v: fidelity(DistortedPulse(v, dt), prob), x, 1e-6)
    scale = max(np.max(np.abs(fd)), 1e-3)
    assert np.max(np.abs(grad - fd)) / scale < 1e-5


@settings(max_examples=40, deadline=None)
@given(seed=seeds, a=st.floats(-3, 3), b=st.floats(-3, 3))
def test_distortions_are_linear(seed, a, b):
    rng = np.random.default_rng(seed)
    n = int(rng.integers(1, 6))
    chi = rng.normal(size=(2, 2))
    g = compose(crosstalk_operator(chi, 2 * n, 0.5), RiseTimeOperator(rng.uniform(0.1, 2.0, 2), n, 1.0, m=2 * n, dt_out=0.5))
    p1, p2 = rng.normal(size=(n, 2)), rng.normal(size=(n, 2))
    lhs = g.apply(a * p1 + b * p2).values
    rhs = a * g.apply(p1).values + b * g.apply(p2).values
    assert np.max(np.abs(lhs - rhs)) <= 1e-12 * max(1.0, np.max(np.abs(lhs)))


@settings(max_examples=30, deadline=None)
@given(seed=seeds)
def test_pullback_is_adjoint_of_push(seed):
    rng = np.random.default_rng(seed)
    g = LinearOperator(rng.normal(size=(4, 3, 2, 2)), 1.0, 1.0)
    J = g.jacobian(np.zeros((2, 2)))
    u, w = rng.normal(size=(2, 2)), rng.normal(size=(4, 3))
    assert np.isclose(np.sum(J.push(u) * w), np.sum(u * J.pullback(w)), rtol=1e-12, atol=1e-12)
