"""Displaced-squeezed Gaussian states and their superpositions.

A single-mode Gaussian ``e^{kappa + i theta} D(alpha) S(zeta)|0>`` is kept in
normal-ordered form ``e^{lam} exp(u a^dag + w a^dag^2)|0>`` with

    w   = e^{i phi} tanh(r) / 2
    u   = alpha - 2 w alpha^*
    lam = kappa + i theta - |alpha|^2/2 + w alpha^*^2 - log(cosh r)/2

Squeezing convention: ``S(zeta) = exp[(zeta a^dag^2 - zeta^* a^2)/2]`` so that
``S(zeta)|0> = exp(+w a^dag^2)|0> / sqrt(cosh r)``.

Every matrix element between two such states follows from the generating
function ``F(s, t) = <B| e^{s a^dag} e^{t a} |K>``, which is the exponential of
a quadratic polynomial in ``(s, t)``. Normal-ordered moments
``<B| a^dag^m a^n |K> = d_s^m d_t^n F(0, 0)`` are then produced by an exact
two-term recursion, see :func:`moment_table`.

Parameter layout of an :class:`NGSState` (flattened, fastest index last)::

    sigma -> p -> [kappa, theta, (x_k, y_k[, r_k, phi_k]) for k in modes]
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

__all__ = [
    "GaussianParams",
    "NGSState",
    "NormalOrderedForm",
    "InvalidInputError",
    "UnsupportedOrderError",
    "BudgetExceededError",
    "normal_order_ds",
    "gaussian_overlap",
    "char_moment",
    "ngs_overlap",
    "fock_expansion",
    "moment_table",
    "pair_tables",
    "single_mode_fock",
    "MAX_MOMENT_ORDER",
    "product_ngs",
    "perturb",
    "pair_moments",
    "FockExpansion",
]

#: Highest m + n supported by :func:`char_moment`.
MAX_MOMENT_ORDER = 16

DEFAULT_FOCK_BUDGET = 200_000


class InvalidInputError(ValueError):
    pass


class UnsupportedOrderError(ValueError):
    pass


class BudgetExceededError(MemoryError):
    pass


@dataclass(frozen=True)
class GaussianParams:
    """One Gaussian on one mode: weight, phase, displacement and squeezing."""

    kappa: float = 0.0
    theta: float = 0.0
    x: float = 0.0
    y: float = 0.0
    r: float = 0.0
    phi: float = 0.0

    def __post_init__(self):
        vals = (self.kappa, self.theta, self.x, self.y, self.r, self.phi)
        if not all(math.isfinite(v) for v in vals):
            raise InvalidInputError(f"non-finite Gaussian parameters: {vals}")
        if self.r < 0:
            raise InvalidInputError(f"squeezing magnitude must be >= 0, got {self.r}")

    @property
    def alpha(self) -> complex:
        return complex(self.x, self.y)


@dataclass(frozen=True)
class NormalOrderedForm:
    """``scalar_prefactor * exp(linear_coeff a^dag + quadratic_coeff a^dag^2)|0>``."""

    scalar_prefactor: complex
    linear_coeff: complex
    quadratic_coeff: complex

    def fock_amplitudes(self, cutoff: int) -> np.ndarray:
        return self.scalar_prefactor * single_mode_fock(
            self.linear_coeff, self.quadratic_coeff, cutoff
        )


def _normal_form_arrays(x, y, r, phi):
    """Vectorised (log_prefactor_without_weight, u, w) for displaced-squeezed vacua."""
    alpha = x + 1j * y
    w = 0.5 * np.exp(1j * phi) * np.tanh(r)
    u = alpha - 2.0 * w * np.conj(alpha)
    lognorm = -0.5 * np.abs(alpha) ** 2 + w * np.conj(alpha) ** 2 - 0.5 * np.log(np.cosh(r))
    return lognorm, u, w


def normal_order_ds(params: GaussianParams) -> NormalOrderedForm:
    """Normal-ordered form of ``e^{kappa+i theta} D(alpha) S(zeta)|0>``."""
    lognorm, u, w = _normal_form_arrays(params.x, params.y, params.r, params.phi)
    pref = np.exp(params.kappa + 1j * params.theta + lognorm)
    return NormalOrderedForm(complex(pref), complex(u), complex(w))


def single_mode_fock(u: complex, w: complex, cutoff: int) -> np.ndarray:
    """Fock amplitudes of ``exp(u a^dag + w a^dag^2)|0>`` for n < cutoff."""
    amp = np.zeros(cutoff, dtype=complex)
    amp[0] = 1.0
    if cutoff > 1:
        amp[1] = u
    for n in range(2, cutoff):
        amp[n] = (u * amp[n - 1] + 2.0 * w * math.sqrt(n - 1) * amp[n - 2]) / math.sqrt(n)
    return amp


def pair_tables(bu, bw, ku, kw):
    """Quadratic generating-function coefficients for bra/ket normal forms.

    All inputs broadcast against each other. ``bu, bw`` describe the *ket*
    form of the bra state (they are conjugated here). Returns
    ``(q0, qs, qt, qss, qtt, qst)`` such that
    ``log <B|e^{s a^dag} e^{t a}|K> = q0 + qs s + qt t + qss s^2/2 + qtt t^2/2 + qst s t``
    (excluding the scalar prefactors of the two states).
    """
    b = np.conj(bu)
    c = np.conj(bw)
    u = ku
    w = kw
    d = 1.0 - 4.0 * c * w
    q0 = (b * u + b * b * w + u * u * c) / d - 0.5 * np.log(d)
    qs = (b + 2.0 * c * u) / d
    qt = (u + 2.0 * w * b) / d
    qss = 2.0 * c / d
    qtt = 2.0 * w / d
    qst = 4.0 * c * w / d
    return q0, qs, qt, qss, qtt, qst


def moment_table(qs, qt, qss, qtt, qst, max_m: int, max_n: int) -> np.ndarray:
    """Moments ``<a^dag^m a^n>`` divided by the overlap, for m <= max_m, n <= max_n.

    Uses ``M(m+1, n) = qs M + m qss M(m-1, n) + n qst M(m, n-1)`` and
    ``M(m, n+1) = qt M + n qtt M(m, n-1) + m qst M(m-1, n)``.
    The result has the broadcast shape of the inputs plus ``(max_m+1, max_n+1)``.
    """
    shape = np.broadcast(qs, qt, qss, qtt, qst).shape
    out = np.zeros(shape + (max_m + 1, max_n + 1), dtype=complex)
    out[..., 0, 0] = 1.0
    for m in range(max_m):
        nxt = qs * out[..., m, 0]
        if m > 0:
            nxt = nxt + m * qss * out[..., m - 1, 0]
        out[..., m + 1, 0] = nxt
    for n in range(max_n):
        for m in range(max_m + 1):
            nxt = qt * out[..., m, n]
            if n > 0:
                nxt = nxt + n * qtt * out[..., m, n - 1]
            if m > 0:
                nxt = nxt + m * qst * out[..., m - 1, n]
            out[..., m, n + 1] = nxt
    return out


def _single_pair(bra: GaussianParams, ket: GaussianParams):
    bl, bu, bw = _normal_form_arrays(bra.x, bra.y, bra.r, bra.phi)
    kl, ku, kw = _normal_form_arrays(ket.x, ket.y, ket.r, ket.phi)
    q = pair_tables(bu, bw, ku, kw)
    logov = (
        np.conj(bra.kappa + 1j * bra.theta + bl) + ket.kappa + 1j * ket.theta + kl + q[0]
    )
    return logov, q[1:]


def gaussian_overlap(bra: GaussianParams, ket: GaussianParams) -> complex:
    """``<bra|ket>`` including both weight and phase prefactors."""
    logov, _ = _single_pair(bra, ket)
    return complex(np.exp(logov))


def char_moment(bra: GaussianParams, ket: GaussianParams, m: int, n: int) -> complex:
    """Normal-ordered matrix element ``<bra| a^dag^m a^n |ket>``."""
    if m < 0 or n < 0:
        raise InvalidInputError("moment orders must be non-negative")
    if m + n > MAX_MOMENT_ORDER:
        raise UnsupportedOrderError(
            f"order m+n={m + n} exceeds supported maximum {MAX_MOMENT_ORDER}"
        )
    logov, q = _single_pair(bra, ket)
    table = moment_table(*q, max_m=m, max_n=n)
    return complex(np.exp(logov) * table[m, n])


def _spin_bits(n_spins: int) -> np.ndarray:
    """bits[sigma, j] = 0 (up) or 1 (down); spin 0 is the most significant bit."""
    idx = np.arange(2**n_spins)
    return np.array([(idx >> (n_spins - 1 - j)) & 1 for j in range(n_spins)]).T.reshape(
        2**n_spins, n_spins
    )


@dataclass(frozen=True, eq=False)
class NGSState:
    """Superposition of multi-mode Gaussians attached to spin configurations.

    Arrays ``kappa, theta`` have shape ``(2**n_spins, n_gaussians)``; ``x, y, r,
    phi`` have shape ``(2**n_spins, n_gaussians, n_modes)``. Spin configuration
    index ``sigma`` encodes spin ``j`` in bit ``n_spins - 1 - j`` with 0 = up.
    """

    n_spins: int
    kappa: np.ndarray
    theta: np.ndarray
    x: np.ndarray
    y: np.ndarray
    r: np.ndarray = None
    phi: np.ndarray = None
    squeezing_enabled: bool = False
    _cache: dict = field(default_factory=dict, repr=False, compare=False)

    def __post_init__(self):
        kappa = np.asarray(self.kappa, dtype=float)
        theta = np.asarray(self.theta, dtype=float)
        x = np.asarray(self.x, dtype=float)
        y = np.asarray(self.y, dtype=float)
        r = np.zeros_like(x) if self.r is None else np.asarray(self.r, dtype=float)
        phi = np.zeros_like(x) if self.phi is None else np.asarray(self.phi, dtype=float)
        if x.ndim != 3:
            raise InvalidInputError("displacement arrays must have shape (n_configs, n_p, n_modes)")
        if kappa.shape != x.shape[:2] or theta.shape != x.shape[:2]:
            raise InvalidInputError("kappa/theta must have shape (n_configs, n_p)")
        if y.shape != x.shape or r.shape != x.shape or phi.shape != x.shape:
            raise InvalidInputError("x, y, r, phi must share one shape")
        if x.shape[0] != 2**self.n_spins:
            raise InvalidInputError(
                f"expected {2 ** self.n_spins} spin configurations, got {x.shape[0]}"
            )
        if x.shape[2] < 1 or x.shape[1] < 1:
            raise InvalidInputError("need at least one mode and one Gaussian")
        for name, arr in (("kappa", kappa), ("theta", theta), ("x", x), ("y", y), ("r", r), ("phi", phi)):
            if not np.all(np.isfinite(arr)):
                raise InvalidInputError(f"non-finite values in {name}")
        if np.any(r < 0):
            raise InvalidInputError("squeezing magnitudes must be >= 0")
        if not self.squeezing_enabled and np.any(r != 0):
            raise InvalidInputError("non-zero squeezing in a state with squeezing disabled")
        for name, arr in (("kappa", kappa), ("theta", theta), ("x", x), ("y", y), ("r", r), ("phi", phi)):
            arr.setflags(write=False)
            object.__setattr__(self, name, arr)

    # -- shape ---------------------------------------------------------------
    @property
    def n_configs(self) -> int:
        return self.x.shape[0]

    @property
    def n_gaussians(self) -> int:
        return self.x.shape[1]

    @property
    def n_modes(self) -> int:
        return self.x.shape[2]

    @property
    def n_components(self) -> int:
        return self.n_configs * self.n_gaussians

    @property
    def params_per_component(self) -> int:
        return 2 + (4 if self.squeezing_enabled else 2) * self.n_modes

    @property
    def n_params(self) -> int:
        return self.n_components * self.params_per_component

    # -- construction ----------------------------------------------------------
    @classmethod
    def zeros(cls, n_spins: int, n_gaussians: int, n_modes: int, squeezing: bool = False):
        s = 2**n_spins
        return cls(
            n_spins,
            np.zeros((s, n_gaussians)),
            np.zeros((s, n_gaussians)),
            np.zeros((s, n_gaussians, n_modes)),
            np.zeros((s, n_gaussians, n_modes)),
            np.zeros((s, n_gaussians, n_modes)),
            np.zeros((s, n_gaussians, n_modes)),
            squeezing_enabled=squeezing,
        )

    @classmethod
    def from_components(cls, n_spins, n_modes, components, squeezing=False):
        """Build from ``{sigma: [(kappa, theta, alphas, zetas), ...]}`` with equal N_p.

        Configurations absent from the mapping get weight ``-inf``-like
        (kappa = -60) copies of vacuum so that every configuration carries
        the same number of Gaussians.
        """
        n_p = max(len(v) for v in components.values())
        st = cls.zeros(n_spins, n_p, n_modes, squeezing)
        kappa = np.full(st.kappa.shape, -60.0)
        theta = np.zeros(st.theta.shape)
        x = np.zeros(st.x.shape)
        y = np.zeros(st.x.shape)
        r = np.zeros(st.x.shape)
        phi = np.zeros(st.x.shape)
        for sigma, comps in components.items():
            for p, comp in enumerate(comps):
                k, th, alphas = comp[0], comp[1], np.asarray(comp[2], dtype=complex)
                kappa[sigma, p] = k
                theta[sigma, p] = th
                x[sigma, p] = alphas.real
                y[sigma, p] = alphas.imag
                if len(comp) > 3 and comp[3] is not None:
                    zetas = np.asarray(comp[3], dtype=complex)
                    r[sigma, p] = np.abs(zetas)
                    phi[sigma, p] = np.angle(zetas)
        return cls(n_spins, kappa, theta, x, y, r, phi, squeezing_enabled=squeezing)

    def replace(self, **kw) -> "NGSState":
        data = dict(
            n_spins=self.n_spins,
            kappa=self.kappa,
            theta=self.theta,
            x=self.x,
            y=self.y,
            r=self.r,
            phi=self.phi,
            squeezing_enabled=self.squeezing_enabled,
        )
        data.update(kw)
        return NGSState(**data)

    # -- flattening ------------------------------------------------------------
    def to_vector(self) -> np.ndarray:
        s, p, k = self.x.shape
        per_mode = [self.x, self.y]
        if self.squeezing_enabled:
            per_mode += [self.r, self.phi]
        modes = np.stack(per_mode, axis=-1).reshape(s, p, -1)
        return np.concatenate([self.kappa[..., None], self.theta[..., None], modes], axis=-1).ravel()

    def from_vector(self, vec) -> "NGSState":
        vec = np.asarray(vec, dtype=float)
        if vec.size != self.n_params:
            raise InvalidInputError(f"expected {self.n_params} parameters, got {vec.size}")
        s, p, k = self.x.shape
        blk = vec.reshape(s, p, self.params_per_component)
        nl = 4 if self.squeezing_enabled else 2
        modes = blk[..., 2:].reshape(s, p, k, nl)
        kw = dict(kappa=blk[..., 0], theta=blk[..., 1], x=modes[..., 0], y=modes[..., 1])
        if self.squeezing_enabled:
            kw.update(r=np.abs(modes[..., 2]), phi=modes[..., 3] + np.where(modes[..., 2] < 0, np.pi, 0.0))
        return self.replace(**kw)

    def param_labels(self) -> list[tuple[int, int, int, str]]:
        """(sigma, p, mode, name) for every flattened index; mode = -1 for kappa/theta."""
        names = ["x", "y", "r", "phi"] if self.squeezing_enabled else ["x", "y"]
        out = []
        for s in range(self.n_configs):
            for p in range(self.n_gaussians):
                out.append((s, p, -1, "kappa"))
                out.append((s, p, -1, "theta"))
                for k in range(self.n_modes):
                    for nm in names:
                        out.append((s, p, k, nm))
        return out

    # -- normal forms ----------------------------------------------------------
    def component_forms(self):
        """(log_prefactor[C], u[C, K], w[C, K], spin_index[C]) over flattened components."""
        cached = self._cache.get("forms")
        if cached is not None:
            return cached
        lognorm, u, w = _normal_form_arrays(self.x, self.y, self.r, self.phi)
        lam = self.kappa + 1j * self.theta + lognorm.sum(axis=-1)
        s, p, k = self.x.shape
        spin_idx = np.repeat(np.arange(s), p)
        out = (lam.reshape(-1), u.reshape(-1, k), w.reshape(-1, k), spin_idx)
        self._cache["forms"] = out
        return out

    def norm_squared(self) -> float:
        return float(ngs_overlap(self, self).real)

    def normalized(self) -> "NGSState":
        n2 = self.norm_squared()
        if not n2 > 0:
            raise InvalidInputError("cannot normalize a zero-norm state")
        return self.replace(kappa=self.kappa - 0.5 * math.log(n2))

    def __repr__(self):
        return (
            f"NGSState(n_spins={self.n_spins}, n_gaussians={self.n_gaussians}, "
            f"n_modes={self.n_modes}, squeezing={self.squeezing_enabled})"
        )


def pair_moments(bra: NGSState, ket: NGSState, max_m: int, max_n: int):
    """Per-mode moment tables between all bra/ket component pairs.

    Returns ``(log_overlap[Cb, Ck], moments[Cb, Ck, K, max_m+1, max_n+1],
    same_spin[Cb, Ck])``. ``moments`` are divided by the single-mode overlaps,
    so the full matrix element of ``prod_k a_k^dag^{m_k} a_k^{n_k}`` between
    components is ``exp(log_overlap) * prod_k moments[..., k, m_k, n_k]``.
    The log-overlap includes both component prefactors but not the spin
    overlap; ``same_spin`` marks pairs with identical spin configurations.
    """
    if bra.n_modes != ket.n_modes or bra.n_spins != ket.n_spins:
        raise InvalidInputError("bra and ket have different mode/spin structure")
    bl, bu, bw, bs = bra.component_forms()
    kl, ku, kw, ks = ket.component_forms()
    q0, qs, qt, qss, qtt, qst = pair_tables(bu[:, None, :], bw[:, None, :], ku[None], kw[None])
    logov = np.conj(bl)[:, None] + kl[None, :] + q0.sum(axis=-1)
    mom = moment_table(qs, qt, qss, qtt, qst, max_m, max_n)
    return logov, mom, bs[:, None] == ks[None, :]


def ngs_overlap(a: NGSState, b: NGSState) -> complex:
    """``<a|b>`` summed over matching spin configurations and Gaussian pairs."""
    if a.n_spins != b.n_spins or a.n_modes != b.n_modes:
        raise InvalidInputError("shape mismatch between NGS states")
    bl, bu, bw, bs = a.component_forms()
    kl, ku, kw, ks = b.component_forms()
    q0 = pair_tables(bu[:, None, :], bw[:, None, :], ku[None], kw[None])[0]
    logov = np.conj(bl)[:, None] + kl[None, :] + q0.sum(axis=-1)
    mask = bs[:, None] == ks[None, :]
    return complex(np.sum(np.exp(logov)[mask]))


@dataclass(frozen=True)
class FockExpansion:
    coefficients: np.ndarray  # shape (2**n_spins, *cutoffs)
    truncation_error: float

    @property
    def vector(self) -> np.ndarray:
        return self.coefficients.reshape(-1)


def fock_expansion(state: NGSState, cutoff, budget: int = DEFAULT_FOCK_BUDGET) -> FockExpansion:
    """Dense amplitudes over (spin basis) x (Fock basis per mode).

    ``cutoff`` is an int (same for every mode) or a per-mode sequence.
    ``truncation_error = 1 - ||truncated|| / ||analytic||``.
    """
    cut = [int(cutoff)] * state.n_modes if np.isscalar(cutoff) else [int(c) for c in cutoff]
    if len(cut) != state.n_modes or min(cut) < 1:
        raise InvalidInputError("need one cutoff >= 1 per mode")
    dim = state.n_configs * int(np.prod(cut))
    if dim > budget:
        raise BudgetExceededError(f"dense dimension {dim} exceeds budget {budget}")
    lam, u, w, spin = state.component_forms()
    out = np.zeros((state.n_configs, *cut), dtype=complex)
    for c in range(len(lam)):
        vec = np.exp(lam[c])
        for k in range(state.n_modes):
            vec = np.multiply.outer(vec, single_mode_fock(u[c, k], w[c, k], cut[k]))
        out[spin[c]] += vec
    analytic = ngs_overlap(state, state).real
    trunc = 1.0 - math.sqrt(np.vdot(out, out).real / analytic) if analytic > 0 else 0.0
    return FockExpansion(out, float(trunc))


def product_ngs(
    n_spins: int,
    spin_config: int,
    alphas,
    n_gaussians: int = 1,
    squeezing: bool = False,
    dead_amplitude: float = 1e-4,
) -> NGSState:
    """``|sigma> (x) prod_k |alpha_k>`` spread over ``n_gaussians`` identical Gaussians.

    Spin configurations other than ``spin_config`` get every Gaussian at the
    same displacement with amplitude ``dead_amplitude`` instead of exactly
    zero, so that their parameters have a well-defined flow.
    """
    alphas = np.atleast_1d(np.asarray(alphas, dtype=complex))
    S = 2**n_spins
    K = alphas.size
    if not 0 <= spin_config < S:
        raise InvalidInputError("spin configuration index out of range")
    kappa = np.full((S, n_gaussians), math.log(dead_amplitude))
    kappa[spin_config] = -math.log(n_gaussians)
    x = np.broadcast_to(alphas.real, (S, n_gaussians, K)).copy()
    y = np.broadcast_to(alphas.imag, (S, n_gaussians, K)).copy()
    st = NGSState(n_spins, kappa, np.zeros((S, n_gaussians)), x, y, squeezing_enabled=squeezing)
    return st


def perturb(state: NGSState, rng: np.random.Generator, scale: float) -> NGSState:
    """Add independent ``U(0, scale)`` noise to every variational parameter."""
    if scale <= 0:
        return state
    z = state.to_vector() + rng.uniform(0.0, scale, size=state.n_params)
    return state.from_vector(z)
