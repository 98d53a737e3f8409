import math

import numpy as np
import pytest
from scipy.linalg import expm

from ngstwa.gaussian_core import (
    MAX_MOMENT_ORDER,
    BudgetExceededError,
    GaussianParams,
    InvalidInputError,
    NGSState,
    UnsupportedOrderError,
    char_moment,
    fock_expansion,
    gaussian_overlap,
    ngs_overlap,
    normal_order_ds,
    perturb,
    product_ngs,
)

from conftest import random_state

CUT = 70


def _ladder(cut):
    a = np.diag(np.sqrt(np.arange(1, cut)), 1).astype(complex)
    return a, a.conj().T


def dense_gaussian(p: GaussianParams, cut=CUT):
    """e^{kappa + i theta} D(alpha) S(zeta)|0> from matrix exponentials in a large basis."""
    a, ad = _ladder(cut)
    zeta = p.r * np.exp(1j * p.phi)
    S = expm(0.5 * (zeta * ad @ ad - np.conj(zeta) * a @ a))
    D = expm(p.alpha * ad - np.conj(p.alpha) * a)
    vac = np.zeros(cut, complex)
    vac[0] = 1
    return np.exp(p.kappa + 1j * p.theta) * (D @ (S @ vac))


@pytest.mark.parametrize(
    "p",
    [
        GaussianParams(),
        GaussianParams(x=0.7, y=-0.4),
        GaussianParams(kappa=0.2, theta=1.1, x=-0.3, y=0.5, r=0.4, phi=0.9),
        GaussianParams(x=1.2, r=0.6, phi=-2.0),
    ],
)
def test_normal_form_matches_matrix_exponential(p):
    ref = dense_gaussian(p)[:30]
    got = normal_order_ds(p).fock_amplitudes(30)
    assert np.allclose(got, ref, atol=1e-10)


def test_coherent_overlap_closed_form():
    a, b = 0.3 - 0.8j, -0.5 + 0.2j
    got = gaussian_overlap(GaussianParams(x=a.real, y=a.imag), GaussianParams(x=b.real, y=b.imag))
    ref = np.exp(-abs(a) ** 2 / 2 - abs(b) ** 2 / 2 + np.conj(a) * b)
    assert abs(got - ref) < 1e-14


def test_overlap_and_moments_against_dense():
    bra = GaussianParams(kappa=-0.1, theta=0.4, x=0.5, y=0.1, r=0.3, phi=0.5)
    ket = GaussianParams(kappa=0.2, theta=-0.7, x=-0.2, y=0.6, r=0.5, phi=-1.2)
    vb, vk = dense_gaussian(bra), dense_gaussian(ket)
    assert abs(gaussian_overlap(bra, ket) - np.vdot(vb, vk)) < 1e-10
    a, ad = _ladder(CUT)
    for m, n in [(0, 1), (1, 0), (1, 1), (2, 1), (3, 2), (0, 4)]:
        op = np.linalg.matrix_power(ad, m) @ np.linalg.matrix_power(a, n)
        assert abs(char_moment(bra, ket, m, n) - np.vdot(vb, op @ vk)) < 1e-8


def test_moment_order_limit():
    p = GaussianParams(x=0.1)
    char_moment(p, p, MAX_MOMENT_ORDER // 2, MAX_MOMENT_ORDER // 2)
    with pytest.raises(UnsupportedOrderError):
        char_moment(p, p, MAX_MOMENT_ORDER, 1)
    with pytest.raises(InvalidInputError):
        char_moment(p, p, -1, 0)


@pytest.mark.parametrize("kw", [dict(r=-0.1), dict(x=float("nan")), dict(kappa=float("inf"))])
def test_invalid_gaussian_params(kw):
    with pytest.raises(InvalidInputError):
        GaussianParams(**kw)


def test_state_validation():
    with pytest.raises(InvalidInputError):
        NGSState(1, np.zeros((1, 1)), np.zeros((1, 1)), np.zeros((1, 1, 1)), np.zeros((1, 1, 1)))
    with pytest.raises(InvalidInputError):
        NGSState(0, np.zeros((1, 1)), np.zeros((1, 1)), np.zeros((1, 1, 1)), np.zeros((1, 1, 1)),
                 r=np.full((1, 1, 1), 0.1))


def test_ngs_overlap_matches_fock_expansion(rng):
    a = random_state(rng, n_spins=1, n_gaussians=2, n_modes=2, squeezing=True, disp=0.6, rmax=0.4)
    b = random_state(rng, n_spins=1, n_gaussians=3, n_modes=2, squeezing=True, disp=0.6, rmax=0.4)
    va = fock_expansion(a, 30).vector
    vb = fock_expansion(b, 30).vector
    assert abs(ngs_overlap(a, b) - np.vdot(va, vb)) < 1e-9 * abs(np.vdot(va, vb)) + 1e-10


def test_vector_round_trip_folds_negative_r(rng):
    st = random_state(rng, n_spins=1, n_gaussians=2, n_modes=2, squeezing=True)
    v = st.to_vector()
    assert np.array_equal(st.from_vector(v).to_vector(), v)
    labels = st.param_labels()
    i = next(k for k, lab in enumerate(labels) if lab[3] == "r")
    w = v.copy()
    w[i] = -w[i]
    flipped = st.from_vector(w)
    assert np.all(flipped.r >= 0)
    p = labels[i]
    assert flipped.phi[p[0], p[1], p[2]] == pytest.approx(st.phi[p[0], p[1], p[2]] + np.pi)


def test_product_state_and_dead_configurations():
    st = product_ngs(2, 1, [0.5, 0.0, 0.2j], n_gaussians=3)
    assert st.n_configs == 4 and st.n_gaussians == 3 and st.n_modes == 3
    fe = fock_expansion(st, 12)
    psi = fe.vector.reshape(4, -1)
    populated = np.linalg.norm(psi[1]) ** 2
    assert populated == pytest.approx(1.0, abs=1e-6)
    for s in (0, 2, 3):
        # each spectator configuration carries amplitude 3 * 1e-4
        assert np.linalg.norm(psi[s]) == pytest.approx(3e-4, rel=1e-3)


def test_perturb_is_uniform_and_bounded(rng):
    st = product_ngs(1, 0, [1.0, 0.0], n_gaussians=4)
    out = perturb(st, rng, 1e-4)
    d = out.to_vector() - st.to_vector()
    assert np.all(d >= 0) and np.all(d < 1e-4)
    assert perturb(st, rng, 0.0) is st


def test_fock_budget():
    st = product_ngs(3, 0, [0.1] * 4)
    with pytest.raises(BudgetExceededError):
        fock_expansion(st, 20)


def test_fock_truncation_error_reported():
    st = product_ngs(0, 0, [3.0])
    fe = fock_expansion(st, 5)
    assert fe.truncation_error > 0.1
    assert fock_expansion(st, 60).truncation_error < 1e-12


def test_normalized_state_has_unit_norm(rng):
    st = random_state(rng, n_spins=1, n_gaussians=2, n_modes=1)
    assert st.normalized().norm_squared() == pytest.approx(1.0, abs=1e-12)
    assert math.isfinite(st.norm_squared())
