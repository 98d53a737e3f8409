"""Truncated-Fock reference dynamics for spin-boson operators.

Basis ordering: spin 0 (most significant) ... spin N-1, then mode 0, mode 1 ...
with Fock index fastest in the last mode. This matches
:func:`ngstwa.gaussian_core.fock_expansion`.
"""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass
from typing import Sequence

import numpy as np
import scipy.sparse as sp
from scipy.integrate import solve_ivp
from scipy.optimize import brentq
from scipy.sparse.linalg import expm_multiply

from .gaussian_core import BudgetExceededError, NGSState, fock_expansion

__all__ = [
    "FockBasisConfig",
    "to_dense",
    "coherent_product_state",
    "evolve_schrodinger",
    "evolve_lindblad",
    "fidelity",
    "expect",
    "expect_rho",
    "mcwf_trajectories",
    "LindbladResult",
    "TrajectoryOracleResult",
]

PURE_BUDGET = 200_000
DENSITY_BUDGET = 20_000

_SPIN_MATS = {
    "I": sp.identity(2, dtype=complex, format="csr"),
    "X": sp.csr_matrix(np.array([[0, 1], [1, 0]], dtype=complex)),
    "Y": sp.csr_matrix(np.array([[0, -1j], [1j, 0]], dtype=complex)),
    "Z": sp.csr_matrix(np.array([[1, 0], [0, -1]], dtype=complex)),
}


@dataclass(frozen=True)
class FockBasisConfig:
    n_spins: int
    cutoffs: tuple

    def __post_init__(self):
        object.__setattr__(self, "cutoffs", tuple(int(c) for c in self.cutoffs))
        if any(c < 1 for c in self.cutoffs):
            raise ValueError("cutoffs must be >= 1")

    @property
    def dim(self) -> int:
        return 2**self.n_spins * int(np.prod(self.cutoffs))


def _check_budget(dim: int, budget: int):
    if dim > budget:
        raise BudgetExceededError(f"dimension {dim} exceeds budget {budget}")


def _mode_word(cut: int, m: int, n: int):
    a = sp.diags(np.sqrt(np.arange(1, cut, dtype=float)), 1, shape=(cut, cut), format="csr", dtype=complex)
    ad = a.T.tocsr()
    out = sp.identity(cut, dtype=complex, format="csr")
    for _ in range(m):
        out = out @ ad
    for _ in range(n):
        out = out @ a
    return out


def to_dense(op, basis: FockBasisConfig, sparse: bool = False, budget: int = PURE_BUDGET):
    """Matrix of ``op`` in the truncated product basis (words are products of truncated matrices)."""
    if op.n_spins != basis.n_spins or op.n_modes != len(basis.cutoffs):
        raise ValueError("operator and basis shapes differ")
    _check_budget(basis.dim, budget)
    words: dict = {}
    total = sp.csr_matrix((basis.dim, basis.dim), dtype=complex)
    for (s, b), v in op.terms.items():
        mat = sp.identity(1, dtype=complex, format="csr")
        for lab in s:
            mat = sp.kron(mat, _SPIN_MATS[lab], format="csr")
        for k, (m, n) in enumerate(b):
            key = (basis.cutoffs[k], m, n)
            if key not in words:
                words[key] = _mode_word(*key)
            mat = sp.kron(mat, words[key], format="csr")
        total = total + v * mat
    return total if sparse else total.toarray()


def coherent_product_state(basis: FockBasisConfig, spin_config: int, alphas: Sequence[complex]) -> np.ndarray:
    """``|sigma> (x) prod_k |alpha_k>`` truncated (not renormalised)."""
    vec = np.zeros(2**basis.n_spins, dtype=complex)
    vec[spin_config] = 1.0
    for c, al in zip(basis.cutoffs, alphas):
        n = np.arange(c)
        lf = np.array([math.lgamma(k + 1) for k in n])
        amp = np.exp(-0.5 * abs(al) ** 2 - 0.5 * lf) * np.power(complex(al), n) if al != 0 else (n == 0).astype(complex)
        vec = np.kron(vec, amp)
    return vec


def evolve_schrodinger(psi0, H, times: Sequence[float], method: str = "expm", rtol: float = 1e-10, atol: float = 1e-12):
    """States ``exp(-i H t) psi0`` on ``times`` (no renormalisation).

    ``method="expm"`` uses Krylov/Taylor action of the matrix exponential
    segment by segment; ``method="rk"`` integrates with an adaptive
    8th-order Runge-Kutta scheme.
    """
    psi0 = np.asarray(psi0, dtype=complex)
    times = np.asarray(times, dtype=float)
    if H.shape[0] != psi0.shape[0]:
        raise ValueError("dimension mismatch between generator and state")
    Hs = sp.csr_matrix(H)
    if method == "rk":
        sol = solve_ivp(
            lambda t, y: -1j * (Hs @ y), (times[0], times[-1]), psi0, method="DOP853", t_eval=times, rtol=rtol, atol=atol
        )
        return sol.y.T
    out = np.empty((len(times), psi0.size), dtype=complex)
    out[0] = psi0
    psi = psi0
    gen = (-1j * Hs).tocsc()
    for i in range(1, len(times)):
        dt = times[i] - times[i - 1]
        psi = expm_multiply(gen * dt, psi) if dt != 0 else psi
        out[i] = psi
    return out


def expect(psi: np.ndarray, O) -> complex:
    """``<psi|O|psi> / <psi|psi>``."""
    psi = np.asarray(psi)
    return complex(np.vdot(psi, O @ psi) / np.vdot(psi, psi))


def expect_rho(rho: np.ndarray, O) -> complex:
    return complex(np.sum(np.asarray(O.T if not sp.issparse(O) else O.T.toarray()) * rho) / np.trace(rho))


@dataclass
class LindbladResult:
    times: np.ndarray
    rhos: np.ndarray
    traces: np.ndarray
    min_eigenvalues: np.ndarray


def evolve_lindblad(rho0, H, jumps: Sequence, times: Sequence[float], rtol: float = 1e-10, atol: float = 1e-12,
                    budget: int = DENSITY_BUDGET, store: bool = True, observables: Sequence = ()):
    """Integrate ``drho/dt = -i(H_eff rho - rho H_eff^dag) + sum_m c_m rho c_m^dag``.

    The generator is applied to the matrix directly. When ``store`` is false
    only expectation values of ``observables`` are kept (``rhos`` then holds
    those values with shape ``(n_times, n_obs)``).
    """
    rho0 = np.asarray(rho0, dtype=complex)
    d = rho0.shape[0]
    _check_budget(d, budget)
    Hs = sp.csr_matrix(H)
    cs = [sp.csr_matrix(c) for c in jumps]
    Kd = sum((c.conj().T @ c for c in cs), sp.csr_matrix((d, d), dtype=complex)) * 0.5
    Heff = (Hs - 1j * Kd).tocsr()
    Heff_dag = Heff.conj().T.tocsr()
    cs_dag = [c.conj().T.tocsr() for c in cs]

    def rhs(_t, y):
        rho = y.reshape(d, d)
        out = -1j * (Heff @ rho - (Heff_dag.T @ rho.T).T)
        for c, cd in zip(cs, cs_dag):
            out = out + c @ ((cd.T @ rho.T).T)
        return out.reshape(-1)

    times = np.asarray(times, dtype=float)
    sol = solve_ivp(rhs, (times[0], times[-1]), rho0.reshape(-1), method="DOP853", t_eval=times, rtol=rtol, atol=atol)
    if not sol.success:
        raise RuntimeError(f"Lindblad integration failed: {sol.message}")
    traces = np.empty(len(sol.t))
    mins = np.empty(len(sol.t))
    obs_dense = [np.asarray(o.toarray() if sp.issparse(o) else o) for o in observables]
    kept = []
    for i in range(len(sol.t)):
        rho = sol.y[:, i].reshape(d, d)
        traces[i] = np.trace(rho).real
        mins[i] = np.linalg.eigvalsh(0.5 * (rho + rho.conj().T)).min() if d <= 2000 else np.nan
        if store:
            kept.append(rho)
        else:
            kept.append([np.sum(o.T * rho) / np.trace(rho) for o in obs_dense])
    return LindbladResult(sol.t, np.array(kept), traces, mins)


def fidelity(a, b, cutoff=None) -> float:
    """``|<a|b>|^2`` of the normalised states; ``a`` may be an :class:`NGSState`."""
    if isinstance(a, NGSState):
        if cutoff is None:
            raise ValueError("cutoff required to expand an NGS state")
        fe = fock_expansion(a, cutoff)
        if fe.truncation_error > 1e-6:
            warnings.warn(f"NGS Fock truncation error {fe.truncation_error:.2e} exceeds 1e-6", RuntimeWarning)
        a = fe.vector
    a = np.asarray(a, dtype=complex)
    b = np.asarray(b, dtype=complex)
    return float(abs(np.vdot(a, b)) ** 2 / (np.vdot(a, a).real * np.vdot(b, b).real))


# ---------------------------------------------------------------------------
# Dense quantum trajectories
# ---------------------------------------------------------------------------

@dataclass
class TrajectoryOracleResult:
    times: np.ndarray
    values: np.ndarray  # (n_traj, n_times, n_obs)
    jump_counts: np.ndarray

    def mean(self):
        return self.values.mean(axis=0)

    def stderr(self):
        n = self.values.shape[0]
        return self.values.std(axis=0, ddof=1) / math.sqrt(n)


def mcwf_trajectories(psi0, H, jumps: Sequence, observables: Sequence, times: Sequence[float], n_traj: int,
                      seed: int = 0) -> TrajectoryOracleResult:
    """Waiting-time Monte Carlo wavefunction trajectories on dense matrices.

    Uses the eigendecomposition of ``H_eff`` for propagation to arbitrary times
    so that jump times are located by root finding on the norm.
    """
    H = np.asarray(H.toarray() if sp.issparse(H) else H, dtype=complex)
    cs = [np.asarray(c.toarray() if sp.issparse(c) else c, dtype=complex) for c in jumps]
    obs = [np.asarray(o.toarray() if sp.issparse(o) else o, dtype=complex) for o in observables]
    Heff = H - 0.5j * sum((c.conj().T @ c for c in cs), np.zeros_like(H))
    lam, V = np.linalg.eig(Heff)
    Vinv = np.linalg.inv(V)
    if np.linalg.cond(V) > 1e10:
        warnings.warn("ill-conditioned eigenbasis in trajectory oracle", RuntimeWarning)
    times = np.asarray(times, dtype=float)
    rng = np.random.default_rng(seed)
    vals = np.zeros((n_traj, len(times), len(obs)))
    counts = np.zeros(n_traj, dtype=int)
    psi0 = np.asarray(psi0, dtype=complex)
    psi0 = psi0 / np.linalg.norm(psi0)

    def prop(c, dt):
        return V @ (np.exp(-1j * lam * dt) * c)

    for tr in range(n_traj):
        t0 = times[0]
        coef = Vinv @ psi0
        r = rng.random()
        gi = 0
        while gi < len(times):
            # next grid point or jump
            t_next = times[gi]
            psi_next = prop(coef, t_next - t0)
            n2 = np.vdot(psi_next, psi_next).real
            if n2 > r:
                phi = psi_next / math.sqrt(n2)
                vals[tr, gi] = [np.vdot(phi, o @ phi).real for o in obs]
                gi += 1
                continue
            # jump happens in (t_prev, t_next]; t0 is the last reference time
            t_prev = times[gi - 1] if gi > 0 and times[gi - 1] > t0 else t0
            f = lambda tt: np.linalg.norm(prop(coef, tt - t0)) ** 2 - r
            tj = brentq(f, t_prev, t_next, xtol=1e-13, rtol=1e-13) if f(t_prev) > 0 else t_prev
            psi_j = prop(coef, tj - t0)
            w = np.array([np.vdot(c @ psi_j, c @ psi_j).real for c in cs])
            m = rng.choice(len(cs), p=w / w.sum())
            new = cs[m] @ psi_j
            new /= np.linalg.norm(new)
            coef = Vinv @ new
            t0 = tj
            r = rng.random()
            counts[tr] += 1
    return TrajectoryOracleResult(times, vals, counts)
