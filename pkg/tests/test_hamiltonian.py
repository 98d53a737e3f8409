import math

import numpy as np
import pytest
import scipy.sparse as sp

from ngstwa.exact_oracle import FockBasisConfig, to_dense
from ngstwa.gaussian_core import NGSState
from ngstwa.hamiltonian import (
    Channel,
    HPMapping,
    HTCParams,
    LindbladSpec,
    SpinBosonOperator as Op,
    UnsupportedSpinStructureError,
    build_htc,
    collective_sz,
    decoherence_k,
    energy,
    energy_gradient,
    hp_transform,
    jump_operators,
)

from conftest import random_state


def _is_zero(op, tol=1e-13):
    return all(abs(v) < tol for v in op.terms.values())


def _kron(*ms):
    out = sp.identity(1, dtype=complex, format="csr")
    for m in ms:
        out = sp.kron(out, m, format="csr")
    return out


def hand_built_htc(ns, cut, delta, g, nu, lam, eps):
    """Dense HTC matrix assembled from explicit Kronecker products."""
    a = sp.diags(np.sqrt(np.arange(1, cut)), 1, format="csr", dtype=complex)
    I2, Ib = sp.identity(2, format="csr"), sp.identity(cut, format="csr")
    sz = sp.diags([1.0, -1.0], format="csr")
    sp_ = sp.csr_matrix(np.array([[0, 1], [0, 0]], dtype=complex))

    def spin(j, m):
        return _kron(*[m if i == j else I2 for i in range(ns)], *[Ib] * (ns + 1))

    def mode(k, m):
        return _kron(*[I2] * ns, *[m if i == k else Ib for i in range(ns + 1)])

    A = mode(0, a)
    dim = 2**ns * cut ** (ns + 1)
    one = sp.identity(dim, format="csr")
    H = sp.csr_matrix((dim, dim), dtype=complex)
    for j in range(ns):
        zp1 = spin(j, sz) + one
        B = mode(1 + j, a)
        H = H + 0.5 * (delta - eps[j]) * zp1
        H = H + g / math.sqrt(ns) * (A @ spin(j, sp_) + A.conj().T @ spin(j, sp_.T))
        H = H + nu * (B.conj().T @ B) - 0.5 * lam * nu * ((B + B.conj().T) @ zp1)
    return H


def test_switched_off_couplings():
    p = HTCParams(n_spins=2, delta=0.7, g=0.0, nu=1.3, lam=0.0)
    H = build_htc(p)
    ref = Op.zero(2, 3)
    for j in range(2):
        ref = ref + 0.35 * (Op.pauli(2, 3, j, "Z") + Op.identity(2, 3)) + 1.3 * Op.boson(2, 3, 1 + j, 1, 1)
    assert _is_zero(H - ref)


def test_htc_matches_hand_built_matrix():
    g = 0.1
    eps = (2 * g, 3 * g, 4 * g)
    p = HTCParams(n_spins=3, delta=0.0, g=g, nu=1.0, lam=1.0, eps=eps)
    basis = FockBasisConfig(3, (10,) * 4)
    ours = to_dense(build_htc(p), basis, sparse=True)
    ref = hand_built_htc(3, 10, 0.0, g, 1.0, 1.0, eps)
    assert abs(ours - ref).max() < 1e-13


def test_htc_is_hermitian(rng):
    for _ in range(5):
        p = HTCParams(n_spins=2, delta=rng.normal(), g=rng.normal(), nu=rng.uniform(0.5, 2), lam=rng.normal(),
                      eps=tuple(rng.normal(size=2)), omega_cavity=rng.normal())
        assert build_htc(p).is_hermitian()


def test_excitation_number_conserved_without_holstein():
    ns, cut = 2, 6
    p = HTCParams(n_spins=ns, delta=0.4, g=0.3, nu=1.0, lam=0.0)
    basis = FockBasisConfig(ns, (cut,) * (ns + 1))
    H = to_dense(build_htc(p), basis)
    N = to_dense(Op.boson(ns, ns + 1, 0, 1, 1) + collective_sz(ns, ns + 1) + Op.identity(ns, ns + 1, ns / 2), basis)
    assert np.abs(H @ N - N @ H).max() < 1e-13


def test_parameter_validation():
    with pytest.raises(ValueError):
        HTCParams(n_spins=2, eps=(0.1,))
    with pytest.raises(ValueError):
        Channel("cavity_decay", -1.0)
    with pytest.raises(ValueError):
        Channel("leak", 1.0)


def test_hp_exact_single_spin():
    sz = hp_transform(Op.pauli(1, 1, 0, "Z"), HPMapping("spin_half_exact"))
    ref = Op.identity(0, 2) - 2 * Op.boson(0, 2, 1, 1, 1)
    assert _is_zero(sz - ref)


def test_hp_collective_sz():
    sz = hp_transform(collective_sz(3, 1), HPMapping("large_spin_first_order"))
    ref = Op.identity(0, 2, 1.5) - Op.boson(0, 2, 1, 1, 1)
    assert _is_zero(sz - ref)


def test_hp_exact_equals_spin_model_on_two_level_subspace():
    ns, cut = 2, 4
    H = build_htc(HTCParams(n_spins=ns, delta=0.6, g=0.4, vibrations=False, eps=(0.1, -0.2)))
    H_hp = hp_transform(H, HPMapping("spin_half_exact"))
    spin = to_dense(H, FockBasisConfig(ns, (cut,)))
    bos = to_dense(H_hp, FockBasisConfig(0, (cut, 2, 2)))
    # bosonic order [a, hp_0, hp_1] -> spin order [s_0, s_1, a]; HP vacuum is spin up
    bos = bos.reshape(cut, 2, 2, cut, 2, 2).transpose(1, 2, 0, 4, 5, 3).reshape(spin.shape)
    assert np.abs(bos - spin).max() < 1e-14


@pytest.mark.parametrize("n_spins", [3, 12, 40])
def test_first_order_hp_error_is_controlled(n_spins):
    s = n_spins / 2
    cut_hp = min(n_spins, 6) + 1
    sm = hp_transform(sum((Op.pauli(n_spins, 0 + 1, j, "-") for j in range(n_spins)), Op.zero(n_spins, 1)),
                      HPMapping("large_spin_first_order"))
    M = to_dense(sm, FockBasisConfig(0, (1, cut_hp)))
    for n in range(cut_hp - 1):
        exact = math.sqrt((2 * s - n) * (n + 1))  # Dicke matrix element of S_- below the top state
        rel = abs(M[n + 1, n] - exact) / exact
        assert rel <= (n / (2 * s)) ** 2 + 1e-14


def test_collective_hp_rejects_nonsymmetric_ops():
    op = Op.pauli(2, 1, 0, "Z") + 2 * Op.pauli(2, 1, 1, "Z")
    with pytest.raises(UnsupportedSpinStructureError):
        hp_transform(op, HPMapping("large_spin_first_order"))
    with pytest.raises(UnsupportedSpinStructureError):
        hp_transform(Op.pauli(2, 1, 0, "Z") * Op.pauli(2, 1, 1, "Z"), HPMapping("large_spin_first_order"))


def test_decoherence_operators():
    K = decoherence_k(LindbladSpec((Channel("cavity_decay", 0.8),)), 0, 1)
    assert _is_zero(K - 0.4 * Op.boson(0, 1, 0, 1, 1))
    assert len(decoherence_k(LindbladSpec(()), 1, 1).terms) == 0
    ns = 3
    K = decoherence_k(LindbladSpec((Channel("collective_spin_decay", 0.3),)), ns, 1)
    basis = FockBasisConfig(ns, (1,))
    smin = sum(to_dense(Op.pauli(ns, 1, j, "-"), basis) for j in range(ns))
    assert np.abs(to_dense(K, basis) - 0.15 * smin.conj().T @ smin).max() < 1e-14
    assert K.is_hermitian()


def test_single_spin_decay_expands_per_spin():
    jumps = jump_operators(LindbladSpec((Channel("single_spin_decay", 0.5),)), 3, 1)
    assert [k for k, _ in jumps] == ["single_spin_decay"] * 3


def test_energy_of_identity_is_norm(rng):
    st = random_state(rng, n_spins=1, n_gaussians=2, n_modes=2, squeezing=True)
    assert energy(st, Op.identity(1, 2)) == pytest.approx(st.norm_squared(), rel=1e-12)


def _two_coherent(k1, t1, a1, k2, t2, a2):
    return NGSState(0, np.array([[k1, k2]]), np.array([[t1, t2]]),
                    np.array([[[a1.real], [a2.real]]]), np.array([[[a1.imag], [a2.imag]]]))


def test_harmonic_energy_and_gradient_closed_form():
    k1, t1, a1, k2, t2, a2 = 0.1, 0.3, 0.5 - 0.2j, -0.2, -0.4, -0.3 + 0.6j
    st = _two_coherent(k1, t1, a1, k2, t2, a2)
    n = Op.boson(0, 1, 0, 1, 1)
    ov = np.exp(-abs(a1) ** 2 / 2 - abs(a2) ** 2 / 2 + np.conj(a1) * a2)
    cross = np.exp(k1 + k2 - 1j * (t1 - t2)) * np.conj(a1) * a2 * ov
    E = np.exp(2 * k1) * abs(a1) ** 2 + np.exp(2 * k2) * abs(a2) ** 2 + 2 * cross.real
    assert energy(st, n).real == pytest.approx(E, rel=1e-12)
    # d/dx_1 of the same expression, obtained with a complex-step-free central difference
    h = 1e-6
    Ep = energy(_two_coherent(k1, t1, a1 + h, k2, t2, a2), n).real
    Em = energy(_two_coherent(k1, t1, a1 - h, k2, t2, a2), n).real
    assert energy_gradient(st, n)[2] == pytest.approx((Ep - Em) / (2 * h), rel=1e-7)


def test_norm_gradient_has_no_phase_component(rng):
    single = random_state(rng, n_spins=1, n_gaussians=1, n_modes=2)
    labels = single.param_labels()
    grad = energy_gradient(single, Op.identity(1, 2))
    assert np.allclose([grad[i] for i, lab in enumerate(labels) if lab[3] == "theta"], 0, atol=1e-12)
    # with several Gaussians only the common phase of a configuration is free
    st = random_state(rng, n_spins=1, n_gaussians=3, n_modes=1)
    grad = energy_gradient(st, Op.identity(1, 1))
    for s in range(2):
        idx = [i for i, lab in enumerate(st.param_labels()) if lab[3] == "theta" and lab[0] == s]
        assert abs(grad[idx].sum()) < 1e-12


def test_energy_real_and_phase_invariant(rng):
    st = random_state(rng, n_spins=2, n_gaussians=2, n_modes=3)
    H = build_htc(HTCParams(n_spins=2, delta=0.3, g=0.5, nu=1.0, lam=0.7, eps=(0.1, 0.2)))
    E = energy(st, H)
    assert abs(E.imag) < 1e-10 * abs(E.real)
    shifted = st.replace(theta=st.theta + 0.77)
    assert energy(shifted, H) == pytest.approx(E, rel=1e-12)


def test_energy_matches_dense(rng):
    from ngstwa.gaussian_core import fock_expansion

    st = random_state(rng, n_spins=1, n_gaussians=2, n_modes=2, squeezing=True, disp=0.5, rmax=0.3)
    H = build_htc(HTCParams(n_spins=1, delta=0.2, g=0.3, nu=1.0, lam=0.5)) + Op.boson(1, 2, 0, 2, 2)
    cut = 30
    psi = fock_expansion(st, cut).vector
    ref = np.vdot(psi, to_dense(H, FockBasisConfig(1, (cut, cut))) @ psi)
    assert energy(st, H) == pytest.approx(ref, rel=1e-8)
