"""Property-based checks of the structural identities each module must respect."""

import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from ngstwa.cli_io import ResultBundle, emit_series, parse_config, read_series_csv, read_series_json
from ngstwa.gaussian_core import (
    NGSState,
    GaussianParams,
    char_moment,
    fock_expansion,
    ngs_overlap,
    normal_order_ds,
)
from ngstwa.hamiltonian import HTCParams, SpinBosonOperator as Op, build_htc, energy, energy_gradient, k_from_jumps
from ngstwa.trajectories import GDConfig, jump_fidelity, project_jump, trotter_step
from ngstwa.twa import THETA_GUARD, SDEConfig, integrate_twa, sample_initial, weyl_observables
from ngstwa.variational_geometry import build_geometry, eom_real_time, integrate_flow

from conftest import random_operator, random_state
from test_gaussian_core import dense_gaussian

seeds = st.integers(0, 2**32 - 1)
small = st.floats(-1.0, 1.0, allow_nan=False)


@st.composite
def gaussians(draw, rmax=0.5):
    return GaussianParams(
        kappa=draw(st.floats(-0.5, 0.5)), theta=draw(st.floats(-math.pi, math.pi)),
        x=draw(small), y=draw(small), r=draw(st.floats(0.0, rmax)), phi=draw(st.floats(-math.pi, math.pi)),
    )


# --- gaussian_core ---------------------------------------------------------

@given(seeds, st.booleans())
def test_overlap_hermitian_and_cauchy_schwarz(seed, squeezing):
    rng = np.random.default_rng(seed)
    a = random_state(rng, n_spins=1, n_gaussians=2, n_modes=2, squeezing=squeezing, rmax=0.6)
    b = random_state(rng, n_spins=1, n_gaussians=3, n_modes=2, squeezing=squeezing, rmax=0.6)
    ab, ba = ngs_overlap(a, b), ngs_overlap(b, a)
    assert abs(ab - np.conj(ba)) <= 1e-14 * max(1.0, abs(ab))
    aa, bb = ngs_overlap(a, a), ngs_overlap(b, b)
    assert abs(aa.imag) <= 1e-13 * aa.real
    assert abs(ab) ** 2 <= aa.real * bb.real * (1 + 1e-12)


@settings(max_examples=50)
@given(gaussians(), gaussians())
def test_char_moment_matches_fock_oracle(bra, ket):
    vb, vk = dense_gaussian(bra), dense_gaussian(ket)
    cut = len(vb)
    a = np.diag(np.sqrt(np.arange(1, cut)), 1).astype(complex)
    scale = np.linalg.norm(vb) * np.linalg.norm(vk)
    for m in range(5):
        for n in range(5 - m):
            op = np.linalg.matrix_power(a.conj().T, m) @ np.linalg.matrix_power(a, n)
            ref = np.vdot(vb, op @ vk)
            got = char_moment(bra, ket, m, n)
            # relative to the element itself, or to the Cauchy-Schwarz scale when it cancels
            assert abs(got - ref) <= 1e-8 * max(abs(ref), 1e-4 * scale)


@given(gaussians(rmax=0.8))
def test_normal_form_round_trip(p):
    direct = normal_order_ds(p).fock_amplitudes(25)
    one = NGSState(0, np.array([[p.kappa]]), np.array([[p.theta]]), np.array([[[p.x]]]), np.array([[[p.y]]]),
                   np.array([[[p.r]]]), np.array([[[p.phi]]]), squeezing_enabled=True)
    assert np.allclose(fock_expansion(one, 25).vector, direct, atol=1e-13)


# --- variational_geometry --------------------------------------------------

@settings(max_examples=100)
@given(seeds, st.booleans())
def test_kaehler_property(seed, squeezing):
    rng = np.random.default_rng(seed)
    n_g = int(rng.integers(1, 3))
    s = random_state(rng, n_spins=int(rng.integers(0, 2)), n_gaussians=n_g, n_modes=int(rng.integers(1, 3)),
                     squeezing=squeezing, rmin=1e-3)
    geo = build_geometry(s)
    J, P = geo.complex_structure, geo.support_projector
    assert np.abs(P @ J @ J @ P + P).max() < 1e-8


@settings(max_examples=8)
@given(seeds)
def test_real_time_flow_conserves_energy_and_norm(seed):
    rng = np.random.default_rng(seed)
    s = random_state(rng, n_spins=1, n_gaussians=1, n_modes=1, disp=0.5).normalized()
    H = random_operator(rng, 1, 1, n_terms=4, max_power=1)
    H = H + Op.boson(1, 1, 0, 1, 1)
    res = integrate_flow(s, lambda z: eom_real_time(z, H), [0.0, 1.0])
    assert res.success
    end = res.states[-1]
    E0 = energy(s, H).real / s.norm_squared()
    E1 = energy(end, H).real / end.norm_squared()
    assert abs(E1 - E0) < 1e-6 * max(abs(E0), 1.0)
    assert abs(end.norm_squared() - s.norm_squared()) < 1e-8


# --- hamiltonian -----------------------------------------------------------

@settings(max_examples=20)
@given(seeds, st.booleans())
def test_gradient_matches_finite_differences(seed, squeezing):
    rng = np.random.default_rng(seed)
    s = random_state(rng, n_spins=1, n_gaussians=2, n_modes=1, squeezing=squeezing, rmin=0.1, rmax=0.5, disp=0.6)
    H = random_operator(rng, 1, 1, n_terms=4)
    g = energy_gradient(s, H)
    z = s.to_vector()
    h = 1e-6
    for i in rng.choice(len(z), size=min(6, len(z)), replace=False):
        e = np.zeros_like(z)
        e[i] = h
        fd = (energy(s.from_vector(z + e), H) - energy(s.from_vector(z - e), H)) / (2 * h)
        assert abs(g[i] - fd) <= 1e-6 * max(1.0, abs(fd))


@given(seeds, st.floats(-math.pi, math.pi))
def test_energy_real_and_invariant_under_common_phase(seed, c):
    rng = np.random.default_rng(seed)
    s = random_state(rng, n_spins=1, n_gaussians=2, n_modes=2)
    H = build_htc(HTCParams(n_spins=1, delta=rng.normal(), g=rng.normal(), nu=1.0, lam=rng.normal(), eps=(0.1,)))
    E = energy(s, H)
    assert abs(E.imag) < 1e-10 * abs(E.real)
    assert energy(s.replace(theta=s.theta + c), H) == pytest.approx(E, rel=1e-12)


# --- trajectories ----------------------------------------------------------

@settings(max_examples=10)
@given(seeds, st.floats(0.05, 2.0), st.floats(0.0, 1.0))
def test_norm_non_increasing_between_jumps(seed, kappa, gamma):
    rng = np.random.default_rng(seed)
    s = random_state(rng, n_spins=1, n_gaussians=1, n_modes=2, disp=0.8).normalized()
    jumps = [math.sqrt(kappa) * Op.boson(1, 2, 0, 0, 1), math.sqrt(gamma) * Op.pauli(1, 2, 0, "-")]
    K = k_from_jumps(jumps, 1, 2)
    H = build_htc(HTCParams(n_spins=1, delta=0.0, g=0.3, nu=1.0, lam=0.5, eps=(0.0,)))
    before = s.norm_squared()
    for _ in range(3):
        s = trotter_step(s, H, K, 0.05)
        after = s.norm_squared()
        assert after <= before + 1e-10
        before = after


@settings(max_examples=10)
@given(seeds)
def test_projection_never_loses_fidelity(seed):
    rng = np.random.default_rng(seed)
    s = random_state(rng, n_spins=0, n_gaussians=2, n_modes=1, disp=0.7).normalized()
    c = Op.boson(0, 1, 0, 1, 0) + 0.5 * Op.boson(0, 1, 0, 0, 1)
    F0, _ = jump_fidelity(s, c, s)
    _, F, _ = project_jump(s, c, GDConfig(max_iters=20), rng=rng)
    assert F <= 1 + 1e-10
    assert F >= F0 - 1e-12


# --- twa -------------------------------------------------------------------

@settings(max_examples=10)
@given(st.lists(st.booleans(), min_size=1, max_size=3), st.complex_numbers(max_magnitude=1.5), seeds)
def test_initial_sampling_reproduces_quantum_moments(ups, alpha, seed):
    n = 10_000
    cfg = SDEConfig(htc=HTCParams(n_spins=len(ups), eps=(0.0,) * len(ups)), spins_up=tuple(ups),
                    cavity_alpha=alpha, n_traj=n)
    obs = weyl_observables(sample_initial(cfg, n, np.random.default_rng(seed)), cfg)

    def close(samples, exact):
        err = samples.std(ddof=1) / math.sqrt(n)
        assert abs(samples.mean() - exact) <= 4 * err + 1e-12

    for j, up in enumerate(ups):
        z = 1.0 if up else -1.0
        close(obs[f"sx_{j}"], 0.0)
        close(obs[f"sy_{j}"], 0.0)
        close(obs[f"sz_{j}"], z)
        close(obs[f"sx_{j}"] ** 2, 1.0)
        close(obs[f"sx_{j}"] * obs[f"sy_{j}"], 0.0)
    A = obs["a_re"] + 1j * obs["a_im"]
    close(A.real, alpha.real)
    close(A.imag, alpha.imag)
    close((A**2).real, (alpha**2).real)
    close(obs["n_cav"], abs(alpha) ** 2)


@settings(max_examples=10)
@given(seeds, st.floats(0.0, 1.0), st.floats(0.0, 1.0))
def test_twa_phase_point_invariants(seed, gamma, Gamma):
    cfg = SDEConfig(htc=HTCParams(n_spins=2, eps=(0.1, 0.2), lam=0.5), dt=1e-2, t_final=0.5, output_dt=0.1,
                    n_traj=50, gamma=gamma, Gamma=Gamma, kappa=0.5)
    rng = np.random.default_rng(seed)
    state = sample_initial(cfg, cfg.n_traj, rng)
    series, final = integrate_twa(state, cfg, rng)
    assert np.all((final.theta >= THETA_GUARD) & (final.theta <= math.pi - THETA_GUARD))
    assert np.isrealobj(final.N_A) and np.isrealobj(final.N_B)
    s2 = sum(series[f"{c}_{j}"] ** 2 for c in ("sx", "sy", "sz") for j in range(2)) / 2
    assert np.allclose(s2, 3.0)
    assert all(np.all(np.isfinite(v)) for v in series.values())


# --- cli_io ----------------------------------------------------------------

finite_or_not = st.floats(allow_nan=True, allow_infinity=False, width=64)


@given(st.lists(st.tuples(finite_or_not, finite_or_not), min_size=1, max_size=6))
def test_series_serialization_round_trip(tmp_path_factory, rows):
    d = tmp_path_factory.mktemp("ser")
    t = np.arange(len(rows), dtype=float)
    mean = np.array([r[0] for r in rows])
    err = np.array([r[1] for r in rows])
    bundle = ResultBundle(t, {"sz": mean}, {"sz": err}, {"config_hash": "x"}, True)
    emit_series(bundle, d, "s")
    for back in (read_series_csv(d / "s.csv"), read_series_json(d / "s.json")):
        assert np.array_equal(back["t"], t)
        assert np.array_equal(back["sz_mean"], mean, equal_nan=True)
        assert np.array_equal(back["sz_stderr"], err, equal_nan=True)


@given(st.floats(0.1, 5.0), st.integers(2, 50), st.integers(0, 10**6))
def test_config_parse_is_deterministic(g, n_traj, seed):
    text = f"method: ngs\nmodel:\n  preset: htc\n  g: {g!r}\nnumerics:\n  n_traj: {n_traj}\n  seed: {seed}\n"
    a, b = parse_config(text), parse_config(text)
    assert a == b and a.config_hash() == b.config_hash()
    assert a.model.g == g and a.numerics.seed == seed
