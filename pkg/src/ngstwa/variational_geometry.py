"""Tangent space of the NGS manifold and the variational equations of motion.

Every tangent vector is a quadratic polynomial in one creation operator acting
on its base Gaussian, ``|v> = (f + g a_k^dag + h a_k^dag^2)|G>``. The weight and
phase directions are assigned to mode 0 with ``g = h = 0``; the formulas below
stay exact because a constant polynomial commutes with everything.

Conventions
-----------
g = 2 Re A, omega = 2 Im A, J = -G omega with ``A_{mu nu} = <v_mu|v_nu>``.

Real-time flow solves the Dirac-Frenkel condition
``A zdot = -i <v|H psi>`` whose real part gives ``g zdot = 2 Im <v|H psi>``
and whose imaginary part gives ``omega zdot = -dE``. Both are implemented
(``path="direct"`` and ``path="symplectic"``); ``path="auto"`` takes the
symplectic form when the geometry has full rank.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable, NamedTuple, Sequence

import numpy as np
from scipy.integrate import solve_ivp

from .gaussian_core import GaussianParams, NGSState, moment_table, pair_tables

__all__ = [
    "TangentFrame",
    "GeometricStructures",
    "GeometryInstabilityError",
    "tangent_coefficients",
    "tangent_frame",
    "tangent_fock_vectors",
    "expectation",
    "tangent_matrix_elements",
    "operator_gradient",
    "build_geometry",
    "eom_real_time",
    "eom_imag_time",
    "eom_imag_time_normalized",
    "eom_non_hermitian",
    "integrate_flow",
    "FlowResult",
]

DEFAULT_PINV_TOL = 1e-10


class GeometryInstabilityError(RuntimeError):
    pass


# ---------------------------------------------------------------------------
# Tangent coefficients
# ---------------------------------------------------------------------------

def _fgh_arrays(x, y, r, phi):
    """Return dict name -> (f, g, h) arrays for the per-mode parameters."""
    alpha = x + 1j * y
    ac = np.conj(alpha)
    ephi = np.exp(1j * phi)
    w = 0.5 * ephi * np.tanh(r)
    zero = np.zeros_like(alpha)
    dw_r = 0.5 * ephi / np.cosh(r) ** 2
    out = {
        "x": (-x + 2.0 * w * ac, 1.0 - 2.0 * w, zero),
        "y": (-y - 2j * w * ac, 1j + 2j * w, zero),
        "r": (dw_r * ac**2 - 0.5 * np.tanh(r), -2.0 * dw_r * ac, dw_r),
        "phi": (1j * w * ac**2, -2j * w * ac, 1j * w),
    }
    return out


def tangent_coefficients(params: GaussianParams) -> dict[str, tuple[complex, complex, complex]]:
    """``(f, g, h)`` for each of the six parameters of one single-mode Gaussian.

    The derivative of ``e^{kappa+i theta} D(alpha) S(zeta)|0>`` with respect to a
    parameter equals ``(f + g a^dag + h a^dag^2)`` applied to the state itself.
    """
    per_mode = _fgh_arrays(params.x, params.y, params.r, params.phi)
    out = {"kappa": (1.0 + 0j, 0j, 0j), "theta": (1j, 0j, 0j)}
    for k, v in per_mode.items():
        out[k] = tuple(complex(c) for c in v)
    return out


@dataclass(frozen=True)
class TangentFrame:
    """Polynomial coefficients of all tangent vectors.

    ``coeffs[c, l, j]`` is the coefficient of ``a^dag^j`` for local parameter ``l``
    of component ``c`` and ``mode_of_param[l]`` is the mode it acts on.
    """

    coeffs: np.ndarray
    mode_of_param: np.ndarray


def tangent_frame(state: NGSState) -> TangentFrame:
    cached = state._cache.get("frame")
    if cached is not None:
        return cached
    C = state.n_components
    K = state.n_modes
    names = ["x", "y", "r", "phi"] if state.squeezing_enabled else ["x", "y"]
    L = state.params_per_component
    coeffs = np.zeros((C, L, 3), dtype=complex)
    coeffs[:, 0, 0] = 1.0
    coeffs[:, 1, 0] = 1j
    fgh = _fgh_arrays(
        state.x.reshape(C, K), state.y.reshape(C, K), state.r.reshape(C, K), state.phi.reshape(C, K)
    )
    modes = np.zeros(L, dtype=int)
    nl = len(names)
    for k in range(K):
        for i, nm in enumerate(names):
            l = 2 + k * nl + i
            modes[l] = k
            for j in range(3):
                coeffs[:, l, j] = fgh[nm][j][:, k]
    frame = TangentFrame(coeffs, modes)
    state._cache["frame"] = frame
    return frame


def tangent_fock_vectors(state: NGSState, cutoff) -> np.ndarray:
    """Dense tangent vectors, shape ``(M, dim)``, for verification."""
    from .gaussian_core import single_mode_fock

    K = state.n_modes
    cut = [int(cutoff)] * K if np.isscalar(cutoff) else list(cutoff)
    lam, u, w, spin = state.component_forms()
    frame = tangent_frame(state)
    L = state.params_per_component
    dim_b = int(np.prod(cut))
    out = np.zeros((state.n_components, L, state.n_configs, dim_b), dtype=complex)
    for c in range(state.n_components):
        facs = []
        for k in range(K):
            v0 = single_mode_fock(u[c, k], w[c, k], cut[k] + 2)
            facs.append(v0)
        for l in range(L):
            k0 = frame.mode_of_param[l]
            vec = np.exp(lam[c])
            for k in range(K):
                f = facs[k]
                if k == k0:
                    p = frame.coeffs[c, l]
                    n = np.arange(cut[k])
                    res = p[0] * f[: cut[k]]
                    res = res + p[1] * np.where(n >= 1, np.sqrt(np.maximum(n, 1)) * np.roll(f, 1)[: cut[k]], 0)
                    s2 = np.sqrt(np.maximum(n * (n - 1), 0))
                    res = res + p[2] * np.where(n >= 2, s2 * np.roll(f, 2)[: cut[k]], 0)
                    f = res
                else:
                    f = f[: cut[k]]
                vec = np.multiply.outer(vec, f)
            out[c, l, spin[c]] = vec.reshape(-1)
    return out.reshape(state.n_params, -1)


# ---------------------------------------------------------------------------
# Pair tables and operator contractions
# ---------------------------------------------------------------------------
#
# A term whose Pauli string flips the spins in ``mask`` couples bra
# configuration ``s`` only to ket configuration ``s ^ mask``. Pair arrays are
# therefore laid out as ``(S, Pb, Pk, ...)``: bra configuration, bra Gaussian,
# ket Gaussian. Reducing over the ket-Gaussian axis leaves bra components in
# flattened order.


def _pair_block(bra: NGSState, ket: NGSState, mask: int, max_m: int, max_n: int):
    """``(logov[S,Pb,Pk], mom[S,Pb,Pk,K,max_m+1,max_n+1])`` for one flip mask."""
    same = bra is ket
    key = ("pairs", mask, max_m, max_n)
    if same:
        cached = bra._cache.get(key)
        if cached is not None:
            return cached
        for ck, val in list(bra._cache.items()):
            if isinstance(ck, tuple) and ck[0] == "pairs" and ck[1] == mask and ck[2] >= max_m and ck[3] >= max_n:
                out = (val[0], val[1][..., : max_m + 1, : max_n + 1])
                bra._cache[key] = out
                return out
    S = bra.n_configs
    K = bra.n_modes
    bl, bu, bw, _ = bra.component_forms()
    kl, ku, kw, _ = ket.component_forms()
    Pb, Pk = bra.n_gaussians, ket.n_gaussians
    bl = bl.reshape(S, Pb)
    bu = bu.reshape(S, Pb, K)
    bw = bw.reshape(S, Pb, K)
    perm = np.arange(S) ^ mask
    kl = kl.reshape(S, Pk)[perm]
    ku = ku.reshape(S, Pk, K)[perm]
    kw = kw.reshape(S, Pk, K)[perm]
    q0, qs, qt, qss, qtt, qst = pair_tables(bu[:, :, None], bw[:, :, None], ku[:, None], kw[:, None])
    logov = np.conj(bl)[:, :, None] + kl[:, None, :] + q0.sum(axis=-1)
    mom = moment_table(qs, qt, qss, qtt, qst, max_m, max_n)
    out = (logov, mom)
    if same:
        bra._cache[key] = out
    return out


def _op_orders(op) -> tuple[int, int]:
    mm, mn = 0, 0
    for t in op.compiled():
        if len(t.powers):
            mm = max(mm, int(t.powers[:, 0].max()))
            mn = max(mn, int(t.powers[:, 1].max()))
    return mm, mn


class _MergedTerm(NamedTuple):
    coeff: complex
    flip_mask: int
    phase: np.ndarray
    powers: np.ndarray


def _grouped_terms(op):
    """Compiled terms by flip mask, with terms sharing a boson word merged.

    Merged terms carry ``coeff = 1`` and the summed ket-dependent phases.
    """
    cached = op._cache.get("grouped")
    if cached is not None:
        return cached
    merged: dict = {}
    for t in op.compiled():
        key = (t.flip_mask, t.powers.tobytes(), t.powers.shape)
        if key in merged:
            merged[key] = (merged[key][0] + t.coeff * t.phase, t.powers)
        else:
            merged[key] = (t.coeff * t.phase, t.powers)
    groups: dict = {}
    for (mask, _, _), (phase, powers) in merged.items():
        groups.setdefault(mask, []).append(_MergedTerm(1.0, mask, phase, powers))
    op._cache["grouped"] = groups
    return groups


def _check_shape(state: NGSState, op):
    if op.n_spins != state.n_spins or op.n_modes != state.n_modes:
        raise ValueError(
            f"operator acts on ({op.n_spins} spins, {op.n_modes} modes), state has "
            f"({state.n_spins} spins, {state.n_modes} modes)"
        )


def _check_pair(bra: NGSState, ket: NGSState):
    if bra.n_spins != ket.n_spins or bra.n_modes != ket.n_modes:
        raise ValueError("bra and ket live on different spaces")


def expectation(state: NGSState, op, ket: NGSState | None = None) -> complex:
    """Unnormalised ``<state|op|ket>`` (``ket`` defaults to ``state``)."""
    ket = state if ket is None else ket
    _check_shape(state, op)
    _check_pair(state, ket)
    mm, mn = _op_orders(op)
    K = state.n_modes
    kidx = np.arange(K)
    S = state.n_configs
    total = 0j
    for mask, terms in _grouped_terms(op).items():
        logov, mom = _pair_block(state, ket, mask, max(mm, 2), max(mn, 2))
        ov = np.exp(logov)
        ket_cfg = np.arange(S) ^ mask
        for t in terms:
            V = mom[..., kidx, t.powers[:, 0], t.powers[:, 1]]
            per_cfg = np.sum(ov * np.prod(V, axis=-1), axis=(1, 2))
            total += t.coeff * np.dot(t.phase[ket_cfg], per_cfg)
    return complex(total)


_BINOM = np.array([[math.comb(j, q) for q in range(3)] for j in range(3)], dtype=float)


def _u_table(mom, m, n):
    """``U[..., k, j] = <a_k^j a^dag^m a^n>/ov = sum_q C(j,q) C(m,q) q! R[m-q, n+j-q]``."""
    K = len(m)
    U = np.zeros(mom.shape[:-3] + (K, 3), dtype=complex)
    for k in range(K):
        mk, nk = int(m[k]), int(n[k])
        for j in range(3):
            s = 0
            for q in range(min(j, mk) + 1):
                s = s + _BINOM[j, q] * math.comb(mk, q) * math.factorial(q) * mom[..., k, mk - q, nk + j - q]
            U[..., k, j] = s
    return U


def _excluding_products(V):
    """``W[..., k] = prod_{k' != k} V[..., k']`` without division."""
    K = V.shape[-1]
    pre = np.ones_like(V)
    suf = np.ones_like(V)
    for k in range(1, K):
        pre[..., k] = pre[..., k - 1] * V[..., k - 1]
    for k in range(K - 2, -1, -1):
        suf[..., k] = suf[..., k + 1] * V[..., k + 1]
    return pre * suf


def tangent_matrix_elements(state: NGSState, op, ket: NGSState | None = None) -> np.ndarray:
    """``b_mu = <v_mu| op |ket>`` for every flattened parameter of ``state``."""
    ket = state if ket is None else ket
    _check_shape(state, op)
    _check_pair(state, ket)
    mm, mn = _op_orders(op)
    frame = tangent_frame(state)
    S, Pb, K = state.n_configs, state.n_gaussians, state.n_modes
    kidx = np.arange(K)
    acc = np.zeros((S, Pb, K, 3), dtype=complex)
    for mask, terms in _grouped_terms(op).items():
        logov, mom = _pair_block(state, ket, mask, max(mm, 2), mn + 2)
        ov = np.exp(logov)
        ket_cfg = np.arange(S) ^ mask
        for t in terms:
            m = t.powers[:, 0]
            n = t.powers[:, 1]
            V = mom[..., kidx, m, n]  # (S, Pb, Pk, K)
            W = _excluding_products(V)
            U = _u_table(mom, m, n)  # (S, Pb, Pk, K, 3)
            w = (t.coeff * t.phase[ket_cfg])[:, None, None] * ov
            acc += np.sum((w[..., None] * W)[..., None] * U, axis=2)
    acc = acc.reshape(S * Pb, K, 3)
    b = np.einsum("clj,clj->cl", np.conj(frame.coeffs), acc[:, frame.mode_of_param, :])
    return b.reshape(-1)


def operator_gradient(state: NGSState, op, hermitian: bool | None = None) -> np.ndarray:
    """Derivative of the unnormalised ``<psi|op|psi>`` w.r.t. every real parameter.

    Returns a real vector for Hermitian ``op`` and a complex vector otherwise.
    """
    if hermitian is None:
        hermitian = op.is_hermitian()
    b = tangent_matrix_elements(state, op)
    if hermitian:
        return 2.0 * b.real
    b_dag = tangent_matrix_elements(state, op.adjoint())
    return b + np.conj(b_dag)


def overlap_tangents(state: NGSState, ket: NGSState | None = None) -> np.ndarray:
    """``<v_mu|ket>`` for the tangent vectors of ``state``."""
    ket = state if ket is None else ket
    _check_pair(state, ket)
    logov, mom = _pair_block(state, ket, 0, 2, 2)
    frame = tangent_frame(state)
    S, Pb, K = state.n_configs, state.n_gaussians, state.n_modes
    summed = np.einsum("abc,abckj->abkj", np.exp(logov), mom[..., 0, :3]).reshape(S * Pb, K, 3)
    b = np.einsum("clj,clj->cl", np.conj(frame.coeffs), summed[:, frame.mode_of_param, :])
    return b.reshape(-1)


def norm_gradient(state: NGSState) -> np.ndarray:
    """Derivative of ``<psi|psi>``: ``2 Re <v_mu|psi>``."""
    return 2.0 * overlap_tangents(state).real


# ---------------------------------------------------------------------------
# Geometry
# ---------------------------------------------------------------------------

def _gram_blocks(state: NGSState) -> np.ndarray:
    """Gram matrix blocks, shape ``(S, Pb*L, Pb*L)``; other blocks vanish by spin orthogonality."""
    cached = state._cache.get("gram_blocks")
    if cached is not None:
        return cached
    logov, mom = _pair_block(state, state, 0, 2, 2)
    frame = tangent_frame(state)
    S, Np, L = state.n_configs, state.n_gaussians, state.params_per_component
    P = frame.coeffs.reshape(S, Np, L, 3)
    lm = frame.mode_of_param
    # T[..., k, j, i] = <a^j a^dag^i>/ov = sum_q C(j,q) C(i,q) q! R[i-q, j-q]
    T = np.zeros(mom.shape[:-2] + (3, 3), dtype=complex)
    for j in range(3):
        for i in range(3):
            s = 0
            for q in range(min(i, j) + 1):
                s = s + _BINOM[j, q] * _BINOM[i, q] * math.factorial(q) * mom[..., i - q, j - q]
            T[..., j, i] = s
    momL = mom[:, :, :, lm]  # (S, Pb, Pk, L, 3+, 3+)
    # different modes: one-mode pieces factorise
    a_vec = np.einsum("sqli,spqli->spql", P, momL[..., :3, 0])
    b_vec = np.einsum("splj,spqlj->spql", np.conj(P), momL[..., 0, :3])
    block = b_vec[:, :, :, :, None] * a_vec[:, :, :, None, :]  # (S, Pb, Pk, L', L)
    # same mode: contract both polynomials against T of that mode
    Pc = np.conj(P)
    for k in range(state.n_modes):
        idx = np.nonzero(lm == k)[0]
        left = np.matmul(Pc[:, :, None, idx], T[:, :, :, k])  # (S, Pb, Pk, a, i)
        right = np.swapaxes(P[:, :, idx], -1, -2)[:, None]  # (S, 1, Pk, i, b)
        block[:, :, :, idx[:, None], idx[None, :]] = np.matmul(left, right)
    block = block * np.exp(logov)[..., None, None]
    blocks = block.transpose(0, 1, 3, 2, 4).reshape(S, Np * L, Np * L)
    state._cache["gram_blocks"] = blocks
    return blocks


def _block_diag(blocks: np.ndarray) -> np.ndarray:
    S, n, _ = blocks.shape
    out = np.zeros((S * n, S * n), dtype=blocks.dtype)
    for s in range(S):
        out[s * n : (s + 1) * n, s * n : (s + 1) * n] = blocks[s]
    return out


@dataclass(frozen=True, eq=False)
class GeometricStructures:
    """Gram matrix, metric, symplectic form, their pseudo-inverses and J.

    Everything is block diagonal over spin configurations; the blocks are
    stored and full matrices are assembled on access. The two pseudo-inverses
    are computed on first use, so an equation of motion that needs only one
    of them pays for one decomposition.
    """

    gram_blocks: np.ndarray
    tolerance_used: float
    smooth: bool = False

    def _metric_data(self):
        d = self.__dict__
        if "_metric" not in d:
            inv = np.zeros(self.gram_blocks.shape)
            rank = 0
            for s in range(self.gram_blocks.shape[0]):
                g = 2.0 * self.gram_blocks[s].real
                inv[s], rk = _pinv_sym(0.5 * (g + g.T), self.tolerance_used, self.smooth)
                rank += rk
            d["_metric"] = (inv, rank)
        return d["_metric"]

    @property
    def metric_inv_blocks(self) -> np.ndarray:
        return self._metric_data()[0]

    @property
    def rank(self) -> int:
        return self._metric_data()[1]

    @property
    def symplectic_inv_blocks(self) -> np.ndarray:
        d = self.__dict__
        if "_symp" not in d:
            inv = np.zeros(self.gram_blocks.shape)
            for s in range(self.gram_blocks.shape[0]):
                g = 2.0 * self.gram_blocks[s].real
                om = 2.0 * self.gram_blocks[s].imag
                # omega has the metric's scale, so the metric's Jacobi factors are reused
                inv[s] = _pinv_scaled(0.5 * (om - om.T), _jacobi_scale(g), self.tolerance_used, self.smooth)
            d["_symp"] = inv
        return d["_symp"]

    @property
    def gram(self) -> np.ndarray:
        return _block_diag(self.gram_blocks)

    @property
    def metric(self) -> np.ndarray:
        return _block_diag(2.0 * self.gram_blocks.real)

    @property
    def symplectic(self) -> np.ndarray:
        return _block_diag(2.0 * self.gram_blocks.imag)

    @property
    def metric_inv(self) -> np.ndarray:
        return _block_diag(self.metric_inv_blocks)

    @property
    def symplectic_inv(self) -> np.ndarray:
        return _block_diag(self.symplectic_inv_blocks)

    @property
    def complex_structure(self) -> np.ndarray:
        return _block_diag(-self.metric_inv_blocks @ (2.0 * self.gram_blocks.imag))

    @property
    def dim(self) -> int:
        return self.gram_blocks.shape[0] * self.gram_blocks.shape[1]

    @property
    def full_rank(self) -> bool:
        return self.rank == self.dim

    @property
    def support_projector(self) -> np.ndarray:
        """``G g``: identity on the numerical support of the metric."""
        return _block_diag(self.metric_inv_blocks @ (2.0 * self.gram_blocks.real))

    def _apply(self, blocks, v):
        S, n, _ = blocks.shape
        return np.einsum("sij,sj->si", blocks, np.asarray(v).reshape(S, n)).reshape(-1)

    def apply_metric_inv(self, v) -> np.ndarray:
        return self._apply(self.metric_inv_blocks, v)

    def apply_symplectic_inv(self, v) -> np.ndarray:
        return self._apply(self.symplectic_inv_blocks, v)


def _jacobi_scale(mat: np.ndarray) -> np.ndarray:
    d = np.sqrt(np.abs(np.diag(mat)))
    dmax = d.max() if d.size else 0.0
    return np.where(d > 1e-150 * max(dmax, 1e-300), d, 1.0)


def _pinv_sym(mat: np.ndarray, tol: float, smooth: bool = False):
    """Pseudo-inverse of a symmetric matrix after Jacobi scaling; returns (inverse, rank).

    ``smooth`` replaces the hard cut ``1/l if l > c else 0`` by the filter
    ``l / (l^2 + c^2)``, which keeps the inverse continuous when an eigenvalue
    crosses the threshold ``c``.
    """
    d = _jacobi_scale(mat)
    scaled = mat / d[:, None] / d[None, :]
    evals, evecs = np.linalg.eigh(0.5 * (scaled + scaled.T))
    cut = tol * np.max(np.abs(evals)) if evals.size else 0.0
    keep = np.abs(evals) > cut
    if smooth:
        filt = evals / (evals**2 + cut**2)
        inv = (evecs * filt) @ evecs.T
    else:
        inv = (evecs[:, keep] / evals[keep]) @ evecs[:, keep].T
    return inv / d[:, None] / d[None, :], int(keep.sum())


def _pinv_scaled(mat: np.ndarray, d: np.ndarray, tol: float, smooth: bool = False) -> np.ndarray:
    scaled = mat / d[:, None] / d[None, :]
    U, sv, Vh = np.linalg.svd(scaled)
    cut = tol * sv[0] if sv.size else 0.0
    filt = sv / (sv**2 + cut**2) if smooth else np.where(sv > cut, 1.0 / np.where(sv > cut, sv, 1.0), 0.0)
    return (Vh.T * filt) @ U.T / d[:, None] / d[None, :]


def build_geometry(state: NGSState, tol: float = DEFAULT_PINV_TOL, smooth: bool = False) -> GeometricStructures:
    """Assemble the Gram matrix and derived structures.

    The Gram matrix is block diagonal in the spin configuration. Each block is
    pseudo-inverted separately after scaling by the square root of its
    diagonal, so components of very different weight are treated on an equal
    footing; singular values below ``tol`` times the largest are discarded.
    """
    key = ("geom", tol, smooth)
    cached = state._cache.get(key)
    if cached is not None:
        return cached
    geo = GeometricStructures(_gram_blocks(state), tol, smooth)
    state._cache[key] = geo
    return geo


# ---------------------------------------------------------------------------
# Equations of motion
# ---------------------------------------------------------------------------

def _finite_or_retry(fn: Callable[[float], np.ndarray], tol: float) -> np.ndarray:
    zdot = fn(tol)
    if np.all(np.isfinite(zdot)):
        return zdot
    zdot = fn(tol * 100)
    if np.all(np.isfinite(zdot)):
        return zdot
    raise GeometryInstabilityError("non-finite parameter velocities after regularisation retry")


def eom_real_time(state: NGSState, H, tol: float = DEFAULT_PINV_TOL, path: str = "auto", smooth: bool = False) -> np.ndarray:
    """Parameter velocities for ``i d|psi>/dt = H|psi>`` projected on the manifold."""

    def solve(tl):
        geo = build_geometry(state, tl, smooth)
        use_symp = path == "symplectic" or (path == "auto" and geo.full_rank)
        if use_symp:
            dE = operator_gradient(state, H, hermitian=True)
            return -geo.apply_symplectic_inv(dE)
        b = tangent_matrix_elements(state, H)
        return geo.apply_metric_inv(2.0 * b.imag)

    if path not in ("auto", "direct", "symplectic"):
        raise ValueError(f"unknown path {path!r}")
    return _finite_or_retry(solve, tol)


def eom_imag_time(state: NGSState, K, tol: float = DEFAULT_PINV_TOL, smooth: bool = False) -> np.ndarray:
    """Unnormalised flow ``d|psi>/dt = -K|psi>``: ``zdot = -G d<K>``."""

    def solve(tl):
        geo = build_geometry(state, tl, smooth)
        return -geo.apply_metric_inv(operator_gradient(state, K, hermitian=True))

    return _finite_or_retry(solve, tol)


def eom_imag_time_normalized(state: NGSState, H, tol: float = DEFAULT_PINV_TOL, smooth: bool = False) -> np.ndarray:
    """Energy-minimising flow ``zdot = -G (dE - eps dN)`` with ``eps = E/N``."""

    def solve(tl):
        geo = build_geometry(state, tl, smooth)
        N = state.norm_squared()
        eps = expectation(state, H).real / N
        grad = operator_gradient(state, H, hermitian=True) - eps * norm_gradient(state)
        return -geo.apply_metric_inv(grad)

    return _finite_or_retry(solve, tol)


def _non_hermitian_generator(H, K):
    key = ("minus_iK", id(K))
    hit = H._cache.get(key)
    if hit is None or hit[0] is not K:
        hit = (K, H - 1j * K)
        H._cache[key] = hit
    return hit[1]


def eom_non_hermitian(
    state: NGSState, H, K, tol: float = DEFAULT_PINV_TOL, path: str = "auto", smooth: bool = False
) -> np.ndarray:
    """Flow under ``H - iK`` with ``K`` Hermitian.

    ``g zdot = 2 Im <v|H psi> - d<K>``; for full-rank geometry the Hamiltonian
    part is taken from the complex-structure reduction ``-Omega dE``.
    """
    if K is None:
        return eom_real_time(state, H, tol, path, smooth)
    if path not in ("auto", "direct", "symplectic"):
        raise ValueError(f"unknown path {path!r}")
    Heff = _non_hermitian_generator(H, K)

    def solve(tl):
        geo = build_geometry(state, tl, smooth)
        if path == "symplectic" or (path == "auto" and geo.full_rank):
            dK = operator_gradient(state, K, hermitian=True)
            dE = operator_gradient(state, H, hermitian=True)
            return -geo.apply_symplectic_inv(dE) - geo.apply_metric_inv(dK)
        # 2 Im <v|(H - iK) psi> = 2 Im <v|H psi> - d<K>, one matrix-element pass
        return geo.apply_metric_inv(2.0 * tangent_matrix_elements(state, Heff).imag)

    return _finite_or_retry(solve, tol)


# ---------------------------------------------------------------------------
# Integration
# ---------------------------------------------------------------------------

def _canonical_rhs(template: NGSState, eom: Callable[[NGSState], np.ndarray]):
    """Wrap an EOM so the integrator may cross ``r < 0`` without losing continuity."""
    labels = template.param_labels()
    r_idx = np.array([i for i, lab in enumerate(labels) if lab[3] == "r"], dtype=int)

    def rhs(_t, z):
        st = template.from_vector(z)
        zdot = np.array(eom(st), dtype=float)
        if r_idx.size:
            neg = z[r_idx] < 0
            zdot[r_idx[neg]] *= -1.0
        return zdot

    return rhs


@dataclass
class FlowResult:
    times: np.ndarray
    states: list
    n_evals: int
    success: bool
    message: str


def integrate_flow(
    state: NGSState,
    eom: Callable[[NGSState], np.ndarray],
    t_eval: Sequence[float],
    rtol: float = 1e-8,
    atol: float = 1e-10,
    method: str = "RK45",
    max_step: float = np.inf,
    fixed_step: float | None = None,
) -> FlowResult:
    """Integrate ``zdot = eom(state)`` and return states on ``t_eval``.

    ``fixed_step`` switches to classical RK4 with that step for reproducible
    step sequences; otherwise an adaptive embedded Runge-Kutta pair is used.
    """
    t_eval = np.asarray(t_eval, dtype=float)
    rhs = _canonical_rhs(state, eom)
    z0 = state.to_vector()
    if fixed_step is not None:
        return _rk4_fixed(state, rhs, z0, t_eval, fixed_step)
    if t_eval[-1] == t_eval[0]:
        return FlowResult(t_eval, [state for _ in t_eval], 0, True, "empty interval")
    sol = solve_ivp(
        rhs, (t_eval[0], t_eval[-1]), z0, method=method, t_eval=t_eval, rtol=rtol, atol=atol, max_step=max_step
    )
    states = [state.from_vector(sol.y[:, i]) for i in range(sol.y.shape[1])]
    return FlowResult(sol.t, states, sol.nfev, sol.success, sol.message)


def _rk4_fixed(template, rhs, z0, t_eval, h):
    z = z0.copy()
    t = t_eval[0]
    out = [template.from_vector(z)]
    nfev = 0
    for t_next in t_eval[1:]:
        n_sub = max(1, int(math.ceil((t_next - t) / h - 1e-12)))
        hh = (t_next - t) / n_sub
        for _ in range(n_sub):
            k1 = rhs(t, z)
            k2 = rhs(t + hh / 2, z + hh / 2 * k1)
            k3 = rhs(t + hh / 2, z + hh / 2 * k2)
            k4 = rhs(t + hh, z + hh * k3)
            z = z + hh / 6 * (k1 + 2 * k2 + 2 * k3 + k4)
            t += hh
            nfev += 4
        t = t_next
        out.append(template.from_vector(z))
    return FlowResult(np.asarray(t_eval), out, nfev, True, "fixed-step RK4")
