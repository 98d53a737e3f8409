"""Quantum trajectories for NGS states.

Between jumps the state follows ``exp(-iH dt) exp(-K dt)`` (first-order
Trotter splitting, ``K = (1/2) sum c^dag c``) with the unnormalised squared
norm decaying. A jump fires when the squared norm falls below a uniform random
threshold; the channel is drawn with weights ``<c_m^dag c_m>`` and the
post-jump state is either written down exactly (when ``c|psi>`` stays inside
the ansatz) or obtained by gradient ascent on the normalised fidelity.
"""

from __future__ import annotations

import hashlib
import json
import math
import os
import warnings
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from typing import Mapping, Sequence

import numpy as np
from scipy.integrate import solve_ivp

from .gaussian_core import NGSState, perturb
from .hamiltonian import LindbladSpec, SpinBosonOperator, jump_operators, k_from_jumps
from .variational_geometry import (
    DEFAULT_PINV_TOL,
    _canonical_rhs,
    build_geometry,
    eom_non_hermitian,
    GeometryInstabilityError,
    eom_imag_time,
    eom_real_time,
    expectation,
    integrate_flow,
    norm_gradient,
    tangent_matrix_elements,
)

__all__ = [
    "GDConfig",
    "TrajectoryConfig",
    "JumpEvent",
    "TrajectoryRecord",
    "EnsembleResult",
    "NormIncreaseError",
    "DegenerateJumpError",
    "trotter_step",
    "detect_jump",
    "select_channel",
    "apply_jump_in_manifold",
    "project_jump",
    "jump_fidelity",
    "run_trajectory",
    "run_ensemble",
    "ensemble_average",
    "trajectory_seed",
]


class NormIncreaseError(RuntimeError):
    """Squared norm grew between jumps: the Trotter step is too large."""


class DegenerateJumpError(RuntimeError):
    """Every jump channel has zero weight, or the jump annihilates the state."""


@dataclass(frozen=True)
class GDConfig:
    max_iters: int = 400
    step_init: float = 0.5
    backtrack_factor: float = 0.5
    grad_tol: float = 1e-7
    fidelity_floor: float = 0.5
    perturbation: float = 1e-2

    def __post_init__(self):
        if self.max_iters < 1 or self.step_init <= 0 or self.grad_tol <= 0:
            raise ValueError("GD settings must be positive")
        if not 0 < self.backtrack_factor < 1:
            raise ValueError("backtrack_factor must lie in (0, 1)")


@dataclass(frozen=True)
class JumpEvent:
    time: float
    channel: int
    pre_jump_norm2: float
    post_projection_fidelity: float
    projected: bool


@dataclass
class TrajectoryConfig:
    """Everything needed to run one trajectory.

    Jump operators come from ``lindblad`` unless ``jumps`` is given explicitly
    (for instance after a Holstein-Primakoff rewrite of spin channels), with
    rates folded into the operators. ``observables`` may be a mapping
    ``name -> operator`` or a plain list (named ``obs0``, ``obs1``, ...).
    ``output_dt`` sets the observable grid; ``dt`` is the Trotter step and is
    shrunk so that an integer number of steps fits each grid interval.
    """

    hamiltonian: SpinBosonOperator
    initial: NGSState
    dt: float
    t_final: float
    lindblad: LindbladSpec = field(default_factory=LindbladSpec)
    jumps: Sequence[SpinBosonOperator] | None = None
    rng_seed: int = 0
    observables: Mapping[str, SpinBosonOperator] | Sequence[SpinBosonOperator] = field(default_factory=dict)
    gd: GDConfig = field(default_factory=GDConfig)
    init_noise_scale: float = 1e-4
    output_dt: float | None = None
    pinv_tol: float = DEFAULT_PINV_TOL
    smooth_pinv: bool = True
    rtol: float = 1e-7
    norm_tol: float = 1e-10
    scheme: str = "continuous"
    method: str = "RK45"
    path: str = "direct"

    def __post_init__(self):
        if not self.dt > 0:
            raise ValueError("dt must be positive")
        if self.dt > self.t_final:
            raise ValueError("dt must not exceed t_final")
        if not 0 <= int(self.rng_seed) < 2**64:
            raise ValueError("rng_seed must be a 64-bit unsigned integer")
        ns, nb = self.hamiltonian.n_spins, self.hamiltonian.n_modes
        if self.jumps is None:
            self.jumps = [op for _, op in jump_operators(self.lindblad, ns, nb)]
        else:
            self.jumps = list(self.jumps)
        if not isinstance(self.observables, Mapping):
            self.observables = {f"obs{i}": op for i, op in enumerate(self.observables)}
        else:
            self.observables = dict(self.observables)
        if self.output_dt is None:
            self.output_dt = self.dt
        if self.scheme not in ("continuous", "trotter"):
            raise ValueError(f"unknown scheme {self.scheme!r}")

    @property
    def times(self) -> np.ndarray:
        n = int(round(self.t_final / self.output_dt))
        return np.arange(n + 1) * self.output_dt

    def decay_operator(self) -> SpinBosonOperator | None:
        if not self.jumps:
            return None
        return k_from_jumps(self.jumps, self.hamiltonian.n_spins, self.hamiltonian.n_modes)

    def config_hash(self) -> str:
        """Short digest of the numerical content of the configuration."""
        h = hashlib.sha256()
        def feed(op):
            h.update(repr(sorted((k, complex(v)) for k, v in op.terms.items())).encode())
        feed(self.hamiltonian)
        for c in self.jumps:
            feed(c)
        for k, op in sorted(self.observables.items()):
            h.update(k.encode())
            feed(op)
        h.update(self.initial.to_vector().tobytes())
        h.update(json.dumps([self.dt, self.t_final, self.output_dt, self.init_noise_scale, self.pinv_tol,
                             self.smooth_pinv, self.rtol, self.scheme, self.method, self.path, repr(self.gd)]).encode())
        return h.hexdigest()[:16]


@dataclass
class TrajectoryRecord:
    times: np.ndarray
    values: dict
    jumps: list
    diagnostics: dict
    failed: bool = False
    message: str = ""


@dataclass
class EnsembleResult:
    times: np.ndarray
    mean: dict
    stderr: dict
    n_traj: int
    n_failed: int
    jump_logs: list
    metadata: dict


# ---------------------------------------------------------------------------
# Elementary steps
# ---------------------------------------------------------------------------

def _shift_norm(state: NGSState, target_norm2: float) -> NGSState:
    n2 = state.norm_squared()
    return state.replace(kappa=state.kappa + 0.5 * math.log(target_norm2 / n2))


def trotter_step(
    state: NGSState,
    H: SpinBosonOperator,
    K: SpinBosonOperator | None,
    dt: float,
    tol: float = DEFAULT_PINV_TOL,
    smooth: bool = True,
    rtol: float = 1e-7,
    path: str = "auto",
) -> NGSState:
    """``exp(-K dt)`` after ``exp(-iH dt)``, both projected on the manifold.

    The Hamiltonian part is norm preserving in exact arithmetic; the discrete
    step is re-anchored to the incoming norm by a uniform shift of kappa.
    """
    if dt <= 0:
        return state
    n2 = state.norm_squared()
    atol = rtol * 1e-2
    if H is not None and len(H.terms):
        res = integrate_flow(state, lambda s: eom_real_time(s, H, tol, path=path, smooth=smooth), [0.0, dt], rtol=rtol, atol=atol)
        if not res.success:
            raise GeometryInstabilityError(res.message)
        state = _shift_norm(res.states[-1], n2)
    if K is not None and len(K.terms):
        res = integrate_flow(state, lambda s: eom_imag_time(s, K, tol, smooth=smooth), [0.0, dt], rtol=rtol, atol=atol)
        if not res.success:
            raise GeometryInstabilityError(res.message)
        state = res.states[-1]
    return state


def detect_jump(norm2_before: float, norm2_after: float, threshold: float, t_before: float, dt: float,
                tol: float = 1e-10) -> float | None:
    """Time in ``(t_before, t_before + dt]`` where the squared norm crosses ``threshold``.

    Linear interpolation of the squared norm inside the step.
    """
    if norm2_after > norm2_before * (1 + tol) + tol:
        raise NormIncreaseError(
            f"squared norm increased from {norm2_before:.16g} to {norm2_after:.16g}; reduce dt"
        )
    if norm2_after > threshold:
        return None
    if norm2_before <= threshold:
        return t_before
    frac = (norm2_before - threshold) / (norm2_before - norm2_after)
    return t_before + dt * min(max(frac, 0.0), 1.0)


def select_channel(state: NGSState, jumps: Sequence[SpinBosonOperator], rng: np.random.Generator) -> int:
    weights = np.array([max(expectation(state, c.adjoint() * c).real, 0.0) for c in jumps])
    total = weights.sum()
    if not total > 0:
        raise DegenerateJumpError("all jump channels have zero weight")
    return int(rng.choice(len(jumps), p=weights / total))


# ---------------------------------------------------------------------------
# Jumps
# ---------------------------------------------------------------------------

def _spin_matrix(c: SpinBosonOperator) -> np.ndarray:
    ns = c.n_spins
    S = 2**ns
    mat = np.zeros((S, S), dtype=complex)
    cols = np.arange(S)
    for t in c.compiled():
        mat[cols ^ t.flip_mask, cols] += t.coeff * t.phase
    return mat


def _in_manifold_structure(state: NGSState, c: SpinBosonOperator):
    """Return (spin matrix, annihilation powers) when ``c|psi>`` stays in the ansatz, else None."""
    terms = c.compiled()
    if not terms:
        return None
    powers = terms[0].powers
    if any(not np.array_equal(t.powers, powers) for t in terms):
        return None
    if np.any(powers[:, 0] != 0):
        return None
    for k in np.nonzero(powers[:, 1])[0]:
        if np.any(state.r[..., k] != 0):
            return None
    spin = _spin_matrix(c)
    nz = np.abs(spin) > 0
    if np.any(nz.sum(axis=0) > 1) or np.any(nz.sum(axis=1) > 1):
        return None
    return spin, powers[:, 1]


def _dead_kappa(kappa: np.ndarray, live: np.ndarray, dead_amplitude: float) -> float:
    return float(np.max(kappa[live])) + math.log(dead_amplitude)


def apply_jump_in_manifold(state: NGSState, c: SpinBosonOperator, dead_amplitude: float = 1e-4) -> NGSState | None:
    """Exact ``c|psi> / ||c|psi>||`` for jumps that map Gaussians to Gaussians.

    Covers boson annihilation words (``a``, ``a^2``, ...) on unsqueezed modes,
    dressed by spin operators that send each configuration to at most one
    other (``sigma^-``, Paulis). Returns ``None`` when the structure does not
    apply. Components whose amplitude vanishes exactly get a tiny relative
    amplitude ``dead_amplitude`` instead of minus infinity.
    """
    _check = _in_manifold_structure(state, c)
    if _check is None:
        return None
    spin, npow = _check
    S = state.n_configs
    alpha = state.x + 1j * state.y  # (S, P, K)
    factor = np.prod(alpha ** npow[None, None, :], axis=-1)  # (S, P)
    kappa = np.empty_like(state.kappa)
    theta = np.empty_like(state.theta)
    x = state.x.copy()
    y = state.y.copy()
    live = np.zeros_like(state.kappa, dtype=bool)
    for tgt in range(S):
        src = np.nonzero(np.abs(spin[tgt]) > 0)[0]
        if src.size == 0:
            kappa[tgt] = state.kappa[tgt]
            theta[tgt] = state.theta[tgt]
            continue
        s = src[0]
        amp = spin[tgt, s] * factor[s]
        nz = amp != 0
        with np.errstate(divide="ignore"):
            kappa[tgt] = state.kappa[s] + np.log(np.abs(amp))
        theta[tgt] = state.theta[s] + np.angle(amp)
        x[tgt] = state.x[s]
        y[tgt] = state.y[s]
        live[tgt] = nz
    if not np.any(live):
        raise DegenerateJumpError("jump annihilates every component")
    floor = _dead_kappa(kappa, live, dead_amplitude)
    kappa = np.where(live, kappa, floor)
    new = state.replace(kappa=kappa, theta=theta, x=x, y=y)
    return new.normalized()


def jump_fidelity(trial: NGSState, c: SpinBosonOperator, psi: NGSState, nc: float | None = None):
    """Normalised fidelity ``|<trial|c psi>|^2 / (<trial|trial> <c psi|c psi>)`` and its gradient."""
    if nc is None:
        nc = expectation(psi, c.adjoint() * c).real
    ov = expectation(trial, c, ket=psi)
    nt = trial.norm_squared()
    F = abs(ov) ** 2 / (nt * nc)
    dov = tangent_matrix_elements(trial, c, ket=psi)
    dnt = norm_gradient(trial)
    grad = 2.0 * (np.conj(ov) * dov).real / (nt * nc) - F * dnt / nt
    return float(F), grad


def project_jump(
    state: NGSState,
    c: SpinBosonOperator,
    gd: GDConfig = GDConfig(),
    rng: np.random.Generator | None = None,
    init: NGSState | None = None,
):
    """Project ``c|psi>`` back onto the ansatz by gradient ascent with backtracking.

    Returns ``(state, fidelity, info)``; ``info`` carries the iteration count,
    a convergence flag and a low-fidelity warning flag.
    """
    rng = np.random.default_rng(0) if rng is None else rng
    nc = expectation(state, c.adjoint() * c).real
    if not nc > 0:
        raise DegenerateJumpError("jump has zero probability on this state")
    trial = state if init is None else init
    F0, grad = jump_fidelity(trial, c, state, nc)
    best_F, best = F0, trial
    z = trial.to_vector()
    if np.linalg.norm(grad) < gd.grad_tol and F0 < 1 - 1e-10:
        # stationary starting point (e.g. a^dag on the vacuum): nudge the displacements
        labels = trial.param_labels()
        mask = np.array([lab[3] in ("x", "y") for lab in labels], dtype=float)
        z = z + gd.perturbation * rng.normal(size=z.size) * mask
        trial = trial.from_vector(z)
        F, grad = jump_fidelity(trial, c, state, nc)
    else:
        F = F0
    step = gd.step_init
    converged = False
    it = 0
    for it in range(1, gd.max_iters + 1):
        gnorm2 = float(grad @ grad)
        if math.sqrt(gnorm2) < gd.grad_tol:
            converged = True
            break
        accepted = False
        while step > 1e-14:
            z_new = z + step * grad
            cand = trial.from_vector(z_new)
            F_new, grad_new = jump_fidelity(cand, c, state, nc)
            if F_new >= F + 1e-4 * step * gnorm2:
                accepted = True
                break
            step *= gd.backtrack_factor
        if not accepted:
            converged = True
            break
        z, trial, F, grad = cand.to_vector(), cand, F_new, grad_new
        step /= gd.backtrack_factor
    if F > best_F:
        best_F, best = F, trial
    info = {
        "iterations": it,
        "converged": converged,
        "low_fidelity": best_F < gd.fidelity_floor,
    }
    if not converged:
        info["warning"] = "gradient ascent did not converge"
    return best.normalized(), min(best_F, 1.0), info


def _apply_jump(state, c, gd, rng):
    new = apply_jump_in_manifold(state, c)
    if new is not None:
        return new, 1.0, False, {}
    new, F, info = project_jump(state, c, gd, rng)
    return new, F, True, info


# ---------------------------------------------------------------------------
# Trajectories
# ---------------------------------------------------------------------------

def trajectory_seed(base_seed: int, index: int) -> int:
    """Deterministic 64-bit seed for trajectory ``index``."""
    return int(np.random.SeedSequence([int(base_seed), int(index)]).generate_state(1, np.uint64)[0])


def _observe(state: NGSState, observables: Mapping[str, SpinBosonOperator]) -> dict:
    n2 = state.norm_squared()
    return {k: expectation(state, op).real / n2 for k, op in observables.items()}


def _jump(state, t, cfg, rng, log, diag):
    pre_n2 = state.norm_squared()
    m = select_channel(state, cfg.jumps, rng)
    new, F, projected, info = _apply_jump(state, cfg.jumps[m], cfg.gd, rng)
    if projected:
        diag["projection_fidelities"].append(F)
        if info.get("low_fidelity") or not info.get("converged", True):
            diag["gd_warnings"] += 1
    log.append(JumpEvent(float(t), m, pre_n2, F, projected))
    return new


def _check_norm(before: float, after: float, cfg: TrajectoryConfig, diag: dict, warn: bool = True,
                tol: float | None = None):
    tol = cfg.norm_tol if tol is None else tol
    if after > before * (1 + tol) + tol:
        raise NormIncreaseError(f"squared norm increased from {before:.16g} to {after:.16g}; reduce dt")
    if warn and after < 0.9 * before and not diag.get("large_step_warned"):
        warnings.warn("squared norm dropped by more than 10% in one step; consider smaller dt", RuntimeWarning)
        diag["large_step_warned"] = True


def _advance_trotter(state, t, t_next, threshold, cfg, K, rng, log, diag):
    """Trotter steps of size <= dt from ``t`` to ``t_next``; returns (state, threshold)."""
    kw = dict(tol=cfg.pinv_tol, smooth=cfg.smooth_pinv, rtol=cfg.rtol, path=cfg.path)
    n_sub = max(1, int(math.ceil((t_next - t) / cfg.dt - 1e-9)))
    h = (t_next - t) / n_sub
    for _ in range(n_sub):
        remaining = h
        while remaining > 1e-15:
            n2_before = state.norm_squared()
            new = trotter_step(state, cfg.hamiltonian, K, remaining, **kw)
            if K is None:
                state = new
                break
            n2_after = new.norm_squared()
            _check_norm(n2_before, n2_after, cfg, diag)
            tj = detect_jump(n2_before, n2_after, threshold, t, remaining, cfg.norm_tol)
            if tj is None:
                state = new
                t += remaining
                break
            partial = trotter_step(state, cfg.hamiltonian, K, tj - t, **kw) if tj > t else state
            state = _jump(partial, tj, cfg, rng, log, diag)
            threshold = rng.random()
            remaining -= tj - t
            t = tj
    return state, threshold


def _evolve_continuous(state, t, times, threshold, cfg, K, rng, log, diag, record):
    """Adaptive integration of the non-Hermitian flow with a norm-crossing event.

    The integrator runs across output times and is restarted only at jumps.
    """
    H = cfg.hamiltonian

    def eom(s):
        return eom_non_hermitian(s, H, K, cfg.pinv_tol, path=cfg.path, smooth=cfg.smooth_pinv)

    t_end = times[-1]
    # the adaptive integrator controls the norm only to its relative tolerance
    norm_tol = max(cfg.norm_tol, cfg.rtol)
    gi = int(np.searchsorted(times, t, side="right"))
    while gi < len(times):
        template = state
        rhs = _canonical_rhs(template, eom)
        n2_before = state.norm_squared()
        thr = threshold

        def event(_t, z):
            return template.from_vector(z).norm_squared() - thr

        event.terminal = True
        event.direction = -1
        sol = solve_ivp(rhs, (t, t_end), template.to_vector(), method=cfg.method, t_eval=times[gi:],
                        rtol=cfg.rtol, atol=cfg.rtol * 1e-2, events=event if K is not None else None)
        if sol.status < 0:
            raise GeometryInstabilityError(sol.message)
        diag["n_evals"] += sol.nfev
        Y = np.reshape(np.asarray(sol.y, dtype=float), (template.n_params, -1))
        for i in range(Y.shape[1]):
            st = template.from_vector(Y[:, i])
            if K is not None:
                _check_norm(n2_before, st.norm_squared(), cfg, diag, warn=False, tol=norm_tol)
            record(gi, st)
            gi += 1
        if Y.shape[1]:
            state = template.from_vector(Y[:, -1])
        if K is not None and sol.t_events[0].size:
            tj = float(sol.t_events[0][0])
            pre = template.from_vector(sol.y_events[0][0])
            _check_norm(n2_before, pre.norm_squared(), cfg, diag, warn=False, tol=norm_tol)
            state = _jump(pre, tj, cfg, rng, log, diag)
            threshold = rng.random()
            t = tj
            if gi < len(times) and abs(times[gi] - tj) < 1e-13:
                record(gi, state)
                gi += 1
            continue
        break
    return state


def run_trajectory(cfg: TrajectoryConfig) -> TrajectoryRecord:
    """One quantum trajectory; deterministic for a fixed ``rng_seed``.

    Observables are evaluated on the normalised state on the output grid; at
    a jump instant the renormalised post-jump state is carried forward.
    ``cfg.scheme`` selects first-order Trotter splitting (``"trotter"``) or
    adaptive integration of the full non-Hermitian flow (``"continuous"``).
    """
    rng = np.random.default_rng(cfg.rng_seed)
    times = cfg.times
    values = {k: np.full(len(times), np.nan) for k in cfg.observables}
    K = cfg.decay_operator()
    log: list[JumpEvent] = []
    diag = {"rank_history": [], "projection_fidelities": [], "gd_warnings": 0, "n_evals": 0}
    state = perturb(cfg.initial, rng, cfg.init_noise_scale).normalized()
    threshold = rng.random()

    def record(i, st):
        for k, v in _observe(st, cfg.observables).items():
            values[k][i] = v
        diag["rank_history"].append(build_geometry(st, cfg.pinv_tol).rank)

    try:
        record(0, state)
        if cfg.scheme == "continuous":
            state = _evolve_continuous(state, times[0], times, threshold, cfg, K, rng, log, diag, record)
        else:
            for gi in range(1, len(times)):
                state, threshold = _advance_trotter(state, times[gi - 1], times[gi], threshold, cfg, K, rng, log, diag)
                record(gi, state)
        diag["final_state"] = state
        return TrajectoryRecord(times, values, log, diag)
    except (GeometryInstabilityError, NormIncreaseError, DegenerateJumpError, np.linalg.LinAlgError) as exc:
        return TrajectoryRecord(times, values, log, diag, failed=True, message=f"{type(exc).__name__}: {exc}")


def ensemble_average(records: Sequence[TrajectoryRecord], metadata: dict | None = None) -> EnsembleResult:
    ok = [r for r in records if not r.failed]
    if len(ok) < 2:
        raise RuntimeError(f"need at least 2 successful trajectories, got {len(ok)}")
    times = ok[0].times
    mean, err = {}, {}
    for k in ok[0].values:
        arr = np.array([r.values[k] for r in ok])
        mean[k] = arr.mean(axis=0)
        err[k] = arr.std(axis=0, ddof=1) / math.sqrt(len(ok))
    return EnsembleResult(
        times,
        mean,
        err,
        len(ok),
        len(records) - len(ok),
        [r.jumps for r in ok],
        dict(metadata or {}),
    )


def _run_indexed(args):
    cfg, seed = args
    from dataclasses import replace
    return run_trajectory(replace(cfg, rng_seed=seed))


def worker_count() -> int:
    """Worker processes for ensembles, from ``NGSTWA_THREADS`` (default 1)."""
    try:
        return max(1, int(os.environ.get("NGSTWA_THREADS", "1")))
    except ValueError:
        return 1


def run_ensemble(cfg: TrajectoryConfig, n_traj: int, base_seed: int | None = None, workers: int | None = None):
    """Run ``n_traj`` independent trajectories; returns ``(EnsembleResult, records)``."""
    base = cfg.rng_seed if base_seed is None else base_seed
    seeds = [trajectory_seed(base, i) for i in range(n_traj)]
    workers = worker_count() if workers is None else workers
    jobs = [(cfg, s) for s in seeds]
    if workers > 1:
        with ProcessPoolExecutor(max_workers=workers) as ex:
            records = list(ex.map(_run_indexed, jobs))
    else:
        records = [_run_indexed(j) for j in jobs]
    meta = {
        "base_seed": int(base),
        "n_traj": n_traj,
        "seeds": seeds,
        "config_hash": cfg.config_hash(),
        "jump_recording": "observables at a jump instant use the renormalised post-jump state",
    }
    return ensemble_average(records, meta), records
