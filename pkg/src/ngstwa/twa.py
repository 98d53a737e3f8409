"""Truncated Wigner sampling for the Holstein-Tavis-Cummings family.

Spins live on the radius-sqrt(3) sphere,
``s = sqrt(3) (sin t cos p, -sin t sin p, -cos t)``, with the discrete
spin-1/2 Wigner function rotated about z so that ``theta`` is fixed and
``phi`` uniform. Bosons are sampled from Gaussian Wigner functions. The
stochastic equations are integrated with Euler-Maruyama in the Ito sense.

Trajectories are simulated in vectorised batches. Each batch owns a generator
seeded from ``(rng_seed, batch index)``, so results do not depend on the order
in which batches are run.
"""

from __future__ import annotations

import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, replace
from typing import Callable, Mapping

import numpy as np

from .hamiltonian import HTCParams
from .trajectories import EnsembleResult, worker_count

__all__ = [
    "SpinPhasePoint",
    "BosonPhasePoint",
    "TWAState",
    "SDEConfig",
    "THETA_UP",
    "THETA_DOWN",
    "THETA_GUARD",
    "sample_spin",
    "sample_boson",
    "sample_initial",
    "spin_vector",
    "noise_factor",
    "sde_step_htc",
    "sde_step_collective_hp",
    "integrate_twa",
    "run_twa_ensemble",
    "weyl_observables",
    "hp_validity",
]

THETA_UP = math.acos(-1.0 / math.sqrt(3.0))
THETA_DOWN = math.acos(1.0 / math.sqrt(3.0))
THETA_GUARD = 1e-6
SQRT3 = math.sqrt(3.0)


@dataclass
class SpinPhasePoint:
    theta: np.ndarray
    phi: np.ndarray


@dataclass
class BosonPhasePoint:
    A: np.ndarray
    N: np.ndarray


@dataclass
class TWAState:
    """Batch of phase points; leading axis indexes trajectories.

    ``theta, phi``: (n, N_s). ``A, N_A``: (n,). ``B, N_B``: (n, M) with one
    column per vibrational mode (individual-spin variant) or the single
    large-spin mode (collective variant).
    """

    theta: np.ndarray
    phi: np.ndarray
    A: np.ndarray
    N_A: np.ndarray
    B: np.ndarray
    N_B: np.ndarray
    clamp_count: int = 0

    def copy(self) -> "TWAState":
        return TWAState(self.theta.copy(), self.phi.copy(), self.A.copy(), self.N_A.copy(), self.B.copy(),
                        self.N_B.copy(), self.clamp_count)

    @property
    def n_traj(self) -> int:
        return self.A.shape[0]


@dataclass(frozen=True)
class SDEConfig:
    """Settings for a TWA ensemble.

    ``variant="htc_individual"`` treats every spin on its own sphere with
    local vibrations; ``"tc_collective_hp"`` replaces the spins by one
    Holstein-Primakoff mode (``s = N_s/2``), without vibrations.

    ``spins_up`` selects the initial orientation of each spin (all up by
    default); ``cavity_alpha`` and ``vib_alpha`` set the coherent centres of
    the bosonic modes.

    ``hp_coupling`` fixes the cavity-spin prefactor in the collective variant:
    ``"per_spin"`` uses the single-spin coupling ``g/sqrt(N_s)`` of the
    Hamiltonian, ``"bare"`` uses ``g`` itself.
    """

    htc: HTCParams
    dt: float = 1e-3
    t_final: float = 10.0
    n_traj: int = 1000
    rng_seed: int = 0
    variant: str = "htc_individual"
    kappa: float = 0.0
    gamma: float = 0.0
    Gamma: float = 0.0
    output_dt: float = 0.1
    spins_up: tuple | None = None
    cavity_alpha: complex = 1.0
    vib_alpha: complex = 0.0
    batch_size: int = 2000
    hp_coupling: str = "per_spin"

    def __post_init__(self):
        if not self.dt > 0:
            raise ValueError("dt must be positive")
        if self.n_traj < 1:
            raise ValueError("n_traj must be >= 1")
        if self.variant not in ("htc_individual", "tc_collective_hp"):
            raise ValueError(f"unknown variant {self.variant!r}")
        if self.hp_coupling not in ("per_spin", "bare"):
            raise ValueError(f"unknown hp_coupling {self.hp_coupling!r}")
        for name in ("kappa", "gamma", "Gamma"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be >= 0")
        if self.output_dt < self.dt:
            raise ValueError("output_dt must be >= dt")
        if self.variant == "tc_collective_hp":
            if self.htc.n_spins < 1:
                raise ValueError("the collective variant needs at least one spin")
            if self.htc.lam != 0 or any(self.htc.eps):
                raise ValueError("the collective variant covers the Tavis-Cummings model only")
            if self.gamma != 0:
                raise ValueError("single-spin decay is not available in the collective variant")
        ups = self.spins_up
        if ups is None:
            ups = (True,) * self.htc.n_spins
        ups = tuple(bool(u) for u in ups)
        if len(ups) != self.htc.n_spins:
            raise ValueError("spins_up length differs from n_spins")
        object.__setattr__(self, "spins_up", ups)

    @property
    def s(self) -> float:
        return self.htc.n_spins / 2

    @property
    def times(self) -> np.ndarray:
        n = int(round(self.t_final / self.output_dt))
        return np.arange(n + 1) * self.output_dt


# ---------------------------------------------------------------------------
# Sampling
# ---------------------------------------------------------------------------

def sample_spin(orientation: str, rng: np.random.Generator, size=None) -> SpinPhasePoint:
    """Fixed polar angle (``s_z = +1`` for up, ``-1`` for down) and uniform azimuth."""
    if orientation not in ("up", "down"):
        raise ValueError("orientation must be 'up' or 'down'")
    phi = rng.uniform(0.0, 2 * np.pi, size=size)
    theta = np.full(np.shape(phi), THETA_UP if orientation == "up" else THETA_DOWN)
    return SpinPhasePoint(theta, phi)


def sample_boson(center: complex, nbar: float, rng: np.random.Generator, size=None) -> BosonPhasePoint:
    """Gaussian Wigner sample with quadrature variance ``(nbar + 1/2)/2``.

    The occupation tracker starts at the symmetric-order estimate ``|A|^2 - 1/2``.
    """
    if nbar < 0:
        raise ValueError("nbar must be >= 0")
    w = math.sqrt((nbar + 0.5) / 2)
    A = center + w * (rng.normal(size=size) + 1j * rng.normal(size=size))
    return BosonPhasePoint(A, np.abs(A) ** 2 - 0.5)


def sample_initial(cfg: SDEConfig, n: int, rng: np.random.Generator) -> TWAState:
    ns = cfg.htc.n_spins
    cav = sample_boson(cfg.cavity_alpha, 0.0, rng, size=n)
    if cfg.variant == "tc_collective_hp":
        if not all(cfg.spins_up):
            raise ValueError("the collective variant starts from the fully polarised up state")
        hp = sample_boson(0.0, 0.0, rng, size=(n, 1))
        return TWAState(np.zeros((n, 0)), np.zeros((n, 0)), cav.A, cav.N, hp.A, hp.N)
    theta = np.empty((n, ns))
    phi = np.empty((n, ns))
    for j, up in enumerate(cfg.spins_up):
        sp = sample_spin("up" if up else "down", rng, size=n)
        theta[:, j], phi[:, j] = sp.theta, sp.phi
    n_vib = ns if cfg.htc.vibrations else 0
    vib = sample_boson(cfg.vib_alpha, 0.0, rng, size=(n, n_vib))
    return TWAState(theta, phi, cav.A, cav.N, vib.A, vib.N)


def spin_vector(theta, phi) -> np.ndarray:
    """``s`` on the radius-sqrt(3) sphere, stacked on the last axis."""
    st = np.sin(theta)
    return SQRT3 * np.stack([st * np.cos(phi), -st * np.sin(phi), -np.cos(theta)], axis=-1)


def noise_factor(theta) -> np.ndarray:
    """``f(theta) = 1 + 2 cot^2 - 2 cot csc / sqrt(3)``."""
    cot = 1.0 / np.tan(theta)
    csc = 1.0 / np.sin(theta)
    return 1.0 + 2.0 * cot**2 - 2.0 * cot * csc / SQRT3


# ---------------------------------------------------------------------------
# Equations of motion
# ---------------------------------------------------------------------------

def _clamp(state: TWAState):
    lo, hi = THETA_GUARD, math.pi - THETA_GUARD
    bad = (state.theta < lo) | (state.theta > hi)
    if np.any(bad):
        state.clamp_count += int(bad.sum())
        np.clip(state.theta, lo, hi, out=state.theta)


def sde_step_htc(state: TWAState, cfg: SDEConfig, rng: np.random.Generator | None = None, dW=None) -> TWAState:
    """One Euler-Maruyama step of the individual-spin equations (in place; returns ``state``).

    ``dW`` (shape ``(n, N_s)``) overrides the Wiener increments drawn from ``rng``.
    """
    p = cfg.htc
    dt = cfg.dt
    ns = p.n_spins
    th, ph, A, B = state.theta, state.phi, state.A, state.B
    G2 = cfg.Gamma + cfg.gamma
    sin_t = np.sin(th)
    cot = np.cos(th) / sin_t
    csc = 1.0 / sin_t
    gs = p.g / math.sqrt(ns) if ns else 0.0
    eiphi = np.exp(1j * ph)
    Aphase = A[:, None] * np.conj(eiphi)  # A e^{-i phi}
    eps = np.asarray(p.eps) if ns else np.zeros(0)

    dth = G2 * (cot - csc / SQRT3) + 2 * gs * Aphase.imag
    dph = -p.delta + eps - 2 * gs * cot * Aphase.real
    if p.vibrations and ns:
        dph = dph + 2 * p.lam * p.nu * B.real
    if cfg.Gamma:
        # sum_j cos(phi_i - phi_j) sin theta_j and sum_j sin(phi_i - phi_j) sin theta_j
        Z = np.sum(sin_t * eiphi, axis=1)  # sum_j sin t_j e^{i phi_j}
        cross = eiphi.conj() * Z[:, None]  # sum_j sin t_j e^{i(phi_j - phi_i)}
        dth = dth - 0.5 * cfg.Gamma * SQRT3 * cross.real
        dph = dph - 0.5 * cfg.Gamma * SQRT3 * cot * (-cross.imag)

    dA = -0.5 * cfg.kappa * A - 1j * p.omega_cavity * A - 0.5j * SQRT3 * gs * np.sum(eiphi * sin_t, axis=1)
    dNA = -cfg.kappa * state.N_A - SQRT3 * gs * np.sum(sin_t * Aphase.imag, axis=1)
    if p.vibrations and ns:
        drive = 1.0 - SQRT3 * np.cos(th)
        dB = -1j * p.nu * B + 0.5j * p.lam * p.nu * drive
        dNB = p.lam * p.nu * drive * B.imag
        state.B = B + dt * dB
        state.N_B = state.N_B + dt * dNB

    new_phi = ph + dt * dph
    if G2 > 0:
        if dW is None:
            dW = rng.normal(scale=math.sqrt(dt), size=th.shape)
        f = np.maximum(noise_factor(th), 0.0)
        new_phi = new_phi + np.sqrt(G2 * f) * dW
    state.theta = th + dt * dth
    state.phi = new_phi
    state.A = A + dt * dA
    state.N_A = state.N_A + dt * dNA
    _clamp(state)
    return state


def _hp_prefactor(cfg: SDEConfig) -> float:
    s = cfg.s
    g = cfg.htc.g / math.sqrt(cfg.htc.n_spins) if cfg.hp_coupling == "per_spin" else cfg.htc.g
    return g / (2 * math.sqrt(2 * s))


def sde_step_collective_hp(state: TWAState, cfg: SDEConfig, rng: np.random.Generator | None = None) -> TWAState:
    """One Euler step of the collective-spin Holstein-Primakoff equations (no noise)."""
    p = cfg.htc
    dt = cfg.dt
    s = cfg.s
    c = _hp_prefactor(cfg)
    A, NA = state.A, state.N_A
    B, NB = state.B[:, 0], state.N_B[:, 0]
    B2 = np.abs(B) ** 2
    ImAB = (A * B).imag
    Gm = cfg.Gamma
    dA = -0.5 * cfg.kappa * A - 1j * p.omega_cavity * A - 1j * c * np.conj(B) * (4 * s - NB)
    dNA = -cfg.kappa * NA - 2 * c * ImAB * (4 * s - NB)
    dB = (
        Gm * B * (s - 1 / (8 * s) + NB * (B2 / (16 * s) - 0.5))
        + 1j * c * (A * B**2 - 2 * np.conj(A) * (2 * s - NB))
        + 1j * p.delta * B
    )
    F = B2 * (4 - 8 * s + B2) / (8 * s)
    dNB = Gm * (2 * s + NB * (1 / (4 * s) + 2 * (s - 1) + F)) - 2 * c * ImAB * (4 * s - NB)
    state.A = A + dt * dA
    state.N_A = NA + dt * dNA
    state.B = (B + dt * dB)[:, None]
    state.N_B = (NB + dt * dNB)[:, None]
    return state


# ---------------------------------------------------------------------------
# Observables and ensembles
# ---------------------------------------------------------------------------

def weyl_observables(state: TWAState, cfg: SDEConfig) -> dict:
    """Per-trajectory Weyl symbols.

    ``sz`` is the collective ``S_z = sum_i s_z,i / 2`` (``s - N_B`` in the
    collective variant, ``sz_sym`` there uses ``|B|^2 - 1/2``). ``n_cav`` is the
    occupation tracker and ``n_cav_sym`` the estimate ``|A|^2 - 1/2``.
    """
    out = {
        "n_cav": state.N_A.copy(),
        "n_cav_sym": np.abs(state.A) ** 2 - 0.5,
        "a_re": state.A.real.copy(),
        "a_im": state.A.imag.copy(),
    }
    if cfg.variant == "tc_collective_hp":
        out["sz"] = cfg.s - state.N_B[:, 0]
        out["sz_sym"] = cfg.s - (np.abs(state.B[:, 0]) ** 2 - 0.5)
        out["n_hp"] = state.N_B[:, 0].copy()
        return out
    sv = spin_vector(state.theta, state.phi)
    out["sz"] = 0.5 * sv[..., 2].sum(axis=1)
    for j in range(sv.shape[1]):
        out[f"sx_{j}"] = sv[:, j, 0]
        out[f"sy_{j}"] = sv[:, j, 1]
        out[f"sz_{j}"] = sv[:, j, 2]
    for k in range(state.B.shape[1]):
        out[f"n_vib_{k}"] = state.N_B[:, k].copy()
        out[f"n_vib_sym_{k}"] = np.abs(state.B[:, k]) ** 2 - 0.5
    return out


def integrate_twa(state: TWAState, cfg: SDEConfig, rng: np.random.Generator,
                  observe: Callable[[TWAState, SDEConfig], Mapping[str, np.ndarray]] = weyl_observables):
    """Advance a batch to ``cfg.t_final``; returns per-trajectory series ``{name: (n_t, n)}``."""
    times = cfg.times
    step = sde_step_collective_hp if cfg.variant == "tc_collective_hp" else sde_step_htc
    per = int(round(cfg.output_dt / cfg.dt))
    if abs(per * cfg.dt - cfg.output_dt) > 1e-9 * cfg.output_dt:
        raise ValueError("output_dt must be an integer multiple of dt")
    first = observe(state, cfg)
    series = {k: np.empty((len(times),) + np.shape(v)) for k, v in first.items()}
    for k, v in first.items():
        series[k][0] = v
    for i in range(1, len(times)):
        for _ in range(per):
            step(state, cfg, rng)
        for k, v in observe(state, cfg).items():
            series[k][i] = v
    return series, state


def _batch_seed(base: int, idx: int) -> np.random.SeedSequence:
    return np.random.SeedSequence([int(base), int(idx)])


def _run_batch(args):
    cfg, idx, n, observe = args
    rng = np.random.default_rng(_batch_seed(cfg.rng_seed, idx))
    state = sample_initial(cfg, n, rng)
    series, state = integrate_twa(state, cfg, rng, observe)
    means = {k: v.mean(axis=1) for k, v in series.items()}
    m2 = {k: ((v - means[k][:, None]) ** 2).sum(axis=1) for k, v in series.items()}
    return means, m2, n, state.clamp_count


def run_twa_ensemble(cfg: SDEConfig, workers: int | None = None,
                     observe: Callable[[TWAState, SDEConfig], Mapping[str, np.ndarray]] = weyl_observables
                     ) -> EnsembleResult:
    """Sample, integrate and average ``cfg.n_traj`` trajectories.

    The mean and standard error use the sample standard deviation (``ddof=1``).
    ``observe`` must be a module-level function when ``workers > 1``.
    """
    sizes = []
    left = cfg.n_traj
    while left > 0:
        sizes.append(min(cfg.batch_size, left))
        left -= sizes[-1]
    jobs = [(cfg, i, n, observe) for i, n in enumerate(sizes)]
    workers = worker_count() if workers is None else workers
    if workers > 1 and len(jobs) > 1:
        with ProcessPoolExecutor(max_workers=workers) as ex:
            parts = list(ex.map(_run_batch, jobs))
    else:
        parts = [_run_batch(j) for j in jobs]
    n = sum(p[2] for p in parts)
    mean, err = {}, {}
    for k in parts[0][0]:
        # pairwise merge of batch means and squared deviations, in batch order
        nb, m, M2 = parts[0][2], parts[0][0][k], parts[0][1][k]
        for p in parts[1:]:
            n2, m_b, M2_b = p[2], p[0][k], p[1][k]
            tot = nb + n2
            d = m_b - m
            m = m + d * (n2 / tot)
            M2 = M2 + M2_b + d**2 * (nb * n2 / tot)
            nb = tot
        mean[k] = m
        err[k] = np.sqrt(M2 / max(n - 1, 1) / n)
    meta = {
        "rng_seed": int(cfg.rng_seed),
        "n_traj": n,
        "batch_sizes": sizes,
        "theta_clamps": int(sum(p[3] for p in parts)),
        "variant": cfg.variant,
    }
    if cfg.variant == "tc_collective_hp" and "n_hp" in mean:
        meta["hp_validity"] = hp_validity(mean["n_hp"], cfg.s)
    return EnsembleResult(cfg.times, mean, err, n, 0, [], meta)


def hp_validity(n_hp, s: float, threshold: float = 0.4) -> dict:
    """Flags where the first-order large-spin expansion is unreliable.

    The expansion of ``sqrt(1 - n/(2s))`` is controlled by ``n/(2s)``; once the
    mean HP occupation exceeds ``threshold * 2s`` the mapped dynamics is no
    longer trustworthy. Returns the ratio series, a boolean mask and the first
    flagged index (or ``None``).
    """
    ratio = np.asarray(n_hp, dtype=float) / (2 * s)
    bad = ratio > threshold
    first = int(np.argmax(bad)) if np.any(bad) else None
    return {"ratio": ratio, "flagged": bad, "first_flagged_index": first, "threshold": threshold}
