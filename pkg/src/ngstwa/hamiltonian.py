"""Spin-boson operators, the Holstein-Tavis-Cummings model and Lindblad channels.

Operators are stored canonically as a map

    (pauli_string, boson_powers) -> coefficient

where ``pauli_string`` has one letter from ``IXYZ`` per spin and
``boson_powers`` holds one normal-ordered pair ``(m, n)`` for
``a^dag^m a^n`` per mode. Spin convention: index 0 is up, ``Z = diag(1, -1)``
and ``sigma^+ = |up><down| = (X + iY)/2``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Iterable, Sequence

import numpy as np

from .gaussian_core import MAX_MOMENT_ORDER, NGSState, UnsupportedOrderError
from . import variational_geometry as _vg

__all__ = [
    "SpinBosonOperator",
    "CompiledTerm",
    "HTCParams",
    "Channel",
    "LindbladSpec",
    "HPMapping",
    "UnsupportedSpinStructureError",
    "build_htc",
    "hp_transform",
    "energy",
    "energy_gradient",
    "jump_operators",
    "decoherence_k",
    "k_from_jumps",
    "collective_sz",
]

#: Largest per-mode order an operator may carry for state evaluation.
MAX_OPERATOR_ORDER = MAX_MOMENT_ORDER - 2

_PAULI = {
    "I": np.eye(2, dtype=complex),
    "X": np.array([[0, 1], [1, 0]], dtype=complex),
    "Y": np.array([[0, -1j], [1j, 0]], dtype=complex),
    "Z": np.array([[1, 0], [0, -1]], dtype=complex),
}
# products P1 P2 = phase * P3
_PAULI_PROD = {}
for _a, _ma in _PAULI.items():
    for _b, _mb in _PAULI.items():
        prod = _ma @ _mb
        for _c, _mc in _PAULI.items():
            coef = np.trace(_mc.conj().T @ prod) / 2
            if abs(coef) > 1e-12:
                _PAULI_PROD[(_a, _b)] = (_c, complex(np.round(coef.real) + 1j * np.round(coef.imag)))


class UnsupportedSpinStructureError(ValueError):
    pass


@dataclass(frozen=True)
class CompiledTerm:
    """Evaluation-ready term: coefficient, spin flip mask, ket-dependent phase, powers."""

    coeff: complex
    flip_mask: int
    phase: np.ndarray
    powers: np.ndarray


def _normal_product(w1: tuple[int, int], w2: tuple[int, int]) -> list[tuple[complex, tuple[int, int]]]:
    """``(a^dag^m a^n)(a^dag^p a^q)`` as a sum of normal-ordered words."""
    m, n = w1
    p, q = w2
    return [
        (math.comb(n, k) * math.comb(p, k) * math.factorial(k), (m + p - k, n + q - k))
        for k in range(min(n, p) + 1)
    ]


@dataclass(frozen=True, eq=False)
class SpinBosonOperator:
    """Sum of (coefficient x Pauli string x normal-ordered boson monomials)."""

    n_spins: int
    n_modes: int
    terms: dict = field(default_factory=dict)
    _cache: dict = field(default_factory=dict, repr=False, compare=False)

    # -- construction ------------------------------------------------------
    @classmethod
    def zero(cls, n_spins: int, n_modes: int) -> "SpinBosonOperator":
        return cls(n_spins, n_modes, {})

    @classmethod
    def identity(cls, n_spins: int, n_modes: int, coeff: complex = 1.0) -> "SpinBosonOperator":
        return cls(n_spins, n_modes, {("I" * n_spins, ((0, 0),) * n_modes): complex(coeff)})

    @classmethod
    def pauli(cls, n_spins: int, n_modes: int, spin: int, label: str, coeff: complex = 1.0):
        """Single-spin operator; ``label`` in ``I X Y Z + -``."""
        if not 0 <= spin < n_spins:
            raise ValueError(f"spin index {spin} out of range")
        if label in "+-":
            s = 1.0 if label == "+" else -1.0
            return cls.pauli(n_spins, n_modes, spin, "X", 0.5 * coeff) + cls.pauli(
                n_spins, n_modes, spin, "Y", 0.5j * s * coeff
            )
        if label not in _PAULI:
            raise ValueError(f"unknown Pauli label {label!r}")
        ps = ["I"] * n_spins
        ps[spin] = label
        return cls(n_spins, n_modes, {("".join(ps), ((0, 0),) * n_modes): complex(coeff)})

    @classmethod
    def boson(cls, n_spins: int, n_modes: int, mode: int, m: int, n: int, coeff: complex = 1.0):
        """``coeff * a_mode^dag^m a_mode^n``."""
        if not 0 <= mode < n_modes:
            raise ValueError(f"mode index {mode} out of range")
        pw = [(0, 0)] * n_modes
        pw[mode] = (int(m), int(n))
        return cls(n_spins, n_modes, {("I" * n_spins, tuple(pw)): complex(coeff)})

    @classmethod
    def from_terms(cls, n_spins: int, n_modes: int, items: Iterable):
        out: dict = {}
        for coeff, spins, powers in items:
            key = (spins, tuple(tuple(p) for p in powers))
            out[key] = out.get(key, 0) + complex(coeff)
        return cls(n_spins, n_modes, out)._pruned()

    # -- algebra -------------------------------------------------------------
    def _pruned(self, tol: float = 0.0) -> "SpinBosonOperator":
        return SpinBosonOperator(
            self.n_spins, self.n_modes, {k: v for k, v in self.terms.items() if abs(v) > tol}
        )

    def _compatible(self, other: "SpinBosonOperator"):
        if (self.n_spins, self.n_modes) != (other.n_spins, other.n_modes):
            raise ValueError("operators act on different spaces")

    def __add__(self, other):
        if np.isscalar(other):
            other = SpinBosonOperator.identity(self.n_spins, self.n_modes, other)
        self._compatible(other)
        out = dict(self.terms)
        for k, v in other.terms.items():
            out[k] = out.get(k, 0) + v
        return SpinBosonOperator(self.n_spins, self.n_modes, out)._pruned()

    __radd__ = __add__

    def __neg__(self):
        return SpinBosonOperator(self.n_spins, self.n_modes, {k: -v for k, v in self.terms.items()})

    def __sub__(self, other):
        return self + (-other if not np.isscalar(other) else -other)

    def __rsub__(self, other):
        return (-self) + other

    def __mul__(self, other):
        if np.isscalar(other):
            return SpinBosonOperator(
                self.n_spins, self.n_modes, {k: v * other for k, v in self.terms.items()}
            )._pruned()
        self._compatible(other)
        out: dict = {}
        for (s1, b1), c1 in self.terms.items():
            for (s2, b2), c2 in other.terms.items():
                phase = 1 + 0j
                spins = []
                for p1, p2 in zip(s1, s2):
                    lab, ph = _PAULI_PROD[(p1, p2)]
                    spins.append(lab)
                    phase *= ph
                spin_key = "".join(spins)
                # cartesian product over modes of the normal-ordered expansions
                partial = [(phase * c1 * c2, ())]
                for w1, w2 in zip(b1, b2):
                    expansion = _normal_product(w1, w2)
                    partial = [(c * e, ws + (w,)) for c, ws in partial for e, w in expansion]
                for c, ws in partial:
                    key = (spin_key, ws)
                    out[key] = out.get(key, 0) + c
        return SpinBosonOperator(self.n_spins, self.n_modes, out)._pruned()

    def __rmul__(self, other):
        if np.isscalar(other):
            return self * other
        return NotImplemented

    def __truediv__(self, other):
        return self * (1.0 / other)

    def adjoint(self) -> "SpinBosonOperator":
        return SpinBosonOperator(
            self.n_spins,
            self.n_modes,
            {(s, tuple((n, m) for m, n in b)): np.conj(v) for (s, b), v in self.terms.items()},
        )

    def is_hermitian(self, tol: float = 1e-12) -> bool:
        cached = self._cache.get(("herm", tol))
        if cached is not None:
            return cached
        diff = self - self.adjoint()
        scale = max([abs(v) for v in self.terms.values()] + [1.0])
        res = all(abs(v) <= tol * scale for v in diff.terms.values())
        self._cache[("herm", tol)] = res
        return res

    def max_order(self) -> int:
        """Largest ``m + n`` on any single mode."""
        return max((m + n for (_, b) in self.terms for m, n in b), default=0)

    def embed(self, n_spins: int, n_modes: int, spin_map=None, mode_map=None) -> "SpinBosonOperator":
        """Place this operator into a larger space via index maps."""
        spin_map = list(range(self.n_spins)) if spin_map is None else list(spin_map)
        mode_map = list(range(self.n_modes)) if mode_map is None else list(mode_map)
        out = {}
        for (s, b), v in self.terms.items():
            ns = ["I"] * n_spins
            for j, lab in enumerate(s):
                ns[spin_map[j]] = lab
            nb = [(0, 0)] * n_modes
            for k, w in enumerate(b):
                nb[mode_map[k]] = w
            key = ("".join(ns), tuple(nb))
            out[key] = out.get(key, 0) + v
        return SpinBosonOperator(n_spins, n_modes, out)

    def __len__(self):
        return len(self.terms)

    def __repr__(self):
        return f"SpinBosonOperator(n_spins={self.n_spins}, n_modes={self.n_modes}, n_terms={len(self.terms)})"

    # -- evaluation support ----------------------------------------------------
    def compiled(self) -> list[CompiledTerm]:
        cached = self._cache.get("compiled")
        if cached is not None:
            return cached
        if self.max_order() > MAX_OPERATOR_ORDER:
            raise UnsupportedOrderError(
                f"per-mode order {self.max_order()} exceeds supported {MAX_OPERATOR_ORDER}"
            )
        ns = self.n_spins
        configs = np.arange(2**ns)
        out = []
        for (s, b), v in self.terms.items():
            mask = 0
            phase = np.ones(2**ns, dtype=complex)
            for j, lab in enumerate(s):
                bit = (configs >> (ns - 1 - j)) & 1
                if lab in "XY":
                    mask |= 1 << (ns - 1 - j)
                if lab == "Y":
                    phase *= np.where(bit == 0, 1j, -1j)
                elif lab == "Z":
                    phase *= np.where(bit == 0, 1.0, -1.0)
            powers = np.array(b, dtype=int).reshape(self.n_modes, 2)
            out.append(CompiledTerm(complex(v), mask, phase, powers))
        self._cache["compiled"] = out
        return out


def collective_sz(n_spins: int, n_modes: int) -> SpinBosonOperator:
    """``S_z = sum_j Z_j / 2``."""
    op = SpinBosonOperator.zero(n_spins, n_modes)
    for j in range(n_spins):
        op = op + SpinBosonOperator.pauli(n_spins, n_modes, j, "Z", 0.5)
    return op


# ---------------------------------------------------------------------------
# Model
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class HTCParams:
    """Holstein-Tavis-Cummings parameters in units where the vibrational frequency sets time.

    ``omega_cavity`` adds a bare cavity term ``omega_cavity a^dag a``; it is zero
    in the resonant frame used by the benchmarks. ``vibrations=False`` drops the
    local modes altogether (Tavis-Cummings only, modes ``[a]``).
    """

    n_spins: int
    delta: float = 0.0
    g: float = 0.1
    nu: float = 1.0
    lam: float = 0.0
    eps: tuple = ()
    omega_cavity: float = 0.0
    vibrations: bool = True

    def __post_init__(self):
        if self.n_spins < 0:
            raise ValueError("n_spins must be >= 0")
        if not self.vibrations and self.lam != 0:
            raise ValueError("a Holstein coupling needs the vibrational modes")
        eps = tuple(float(e) for e in self.eps) if len(self.eps) else (0.0,) * self.n_spins
        if len(eps) != self.n_spins:
            raise ValueError(f"eps has length {len(eps)}, expected {self.n_spins}")
        object.__setattr__(self, "eps", eps)
        for name in ("delta", "g", "nu", "lam", "omega_cavity"):
            if not math.isfinite(getattr(self, name)):
                raise ValueError(f"{name} must be finite")

    @property
    def n_modes(self) -> int:
        return 1 + self.n_spins if self.vibrations else 1


def build_htc(p: HTCParams) -> SpinBosonOperator:
    """Hamiltonian on modes ``[a, b_1 .. b_N]``.

    H = (Delta/2) sum (Z_j + 1) + (g/sqrt N) sum (a s+_j + a^dag s-_j)
        + nu sum b_j^dag b_j - (lam nu / 2) sum (b_j + b_j^dag)(Z_j + 1)
        - (1/2) sum eps_j (Z_j + 1) + omega_cavity a^dag a
    """
    ns, nb = p.n_spins, p.n_modes
    O = SpinBosonOperator
    one = O.identity(ns, nb)
    a = O.boson(ns, nb, 0, 0, 1)
    ad = O.boson(ns, nb, 0, 1, 0)
    H = O.zero(ns, nb)
    if p.omega_cavity:
        H = H + p.omega_cavity * (ad * a)
    for j in range(ns):
        zp1 = O.pauli(ns, nb, j, "Z") + one
        H = H + (0.5 * (p.delta - p.eps[j])) * zp1
        if p.g:
            H = H + (p.g / math.sqrt(ns)) * (a * O.pauli(ns, nb, j, "+") + ad * O.pauli(ns, nb, j, "-"))
        if not p.vibrations:
            continue
        b = O.boson(ns, nb, 1 + j, 0, 1)
        bd = O.boson(ns, nb, 1 + j, 1, 0)
        if p.nu:
            H = H + p.nu * (bd * b)
        if p.lam:
            H = H - (0.5 * p.lam * p.nu) * ((b + bd) * zp1)
    return H


# ---------------------------------------------------------------------------
# Dissipation
# ---------------------------------------------------------------------------

CHANNEL_KINDS = (
    "cavity_decay",
    "single_spin_decay",
    "collective_spin_decay",
    "single_photon_gain",
    "momentum_kick",
    "two_photon_loss",
)


@dataclass(frozen=True)
class Channel:
    kind: str
    rate: float
    target: int | None = None

    def __post_init__(self):
        if self.kind not in CHANNEL_KINDS:
            raise ValueError(f"unknown channel kind {self.kind!r}")
        if not (self.rate >= 0 and math.isfinite(self.rate)):
            raise ValueError(f"channel rate must be a finite number >= 0, got {self.rate}")


@dataclass(frozen=True)
class LindbladSpec:
    channels: tuple = ()

    def __post_init__(self):
        object.__setattr__(self, "channels", tuple(self.channels))


def jump_operators(spec: LindbladSpec, n_spins: int, n_modes: int) -> list[tuple[str, SpinBosonOperator]]:
    """Jump operators ``c_m`` (rate included as ``sqrt(rate)``), one per channel instance.

    ``single_spin_decay`` without a target expands to one channel per spin.
    Boson channels default to mode 0 (the cavity).
    """
    O = SpinBosonOperator
    out = []
    for ch in spec.channels:
        if ch.rate == 0:
            continue
        amp = math.sqrt(ch.rate)
        if ch.kind == "single_spin_decay":
            targets = range(n_spins) if ch.target is None else [ch.target]
            for j in targets:
                out.append((ch.kind, O.pauli(n_spins, n_modes, j, "-", amp)))
        elif ch.kind == "collective_spin_decay":
            op = O.zero(n_spins, n_modes)
            for j in range(n_spins):
                op = op + O.pauli(n_spins, n_modes, j, "-", amp)
            out.append((ch.kind, op))
        else:
            k = 0 if ch.target is None else ch.target
            word = {
                "cavity_decay": [(0, 1)],
                "single_photon_gain": [(1, 0)],
                "momentum_kick": [(0, 1), (1, 0)],
                "two_photon_loss": [(0, 2)],
            }[ch.kind]
            op = O.zero(n_spins, n_modes)
            for m, n in word:
                op = op + O.boson(n_spins, n_modes, k, m, n, amp)
            out.append((ch.kind, op))
    return out


def k_from_jumps(jumps: Sequence[SpinBosonOperator], n_spins: int, n_modes: int) -> SpinBosonOperator:
    """``K = (1/2) sum_m c_m^dag c_m``."""
    K = SpinBosonOperator.zero(n_spins, n_modes)
    for c in jumps:
        K = K + 0.5 * (c.adjoint() * c)
    return K


def decoherence_k(spec: LindbladSpec, n_spins: int = 0, n_modes: int = 1) -> SpinBosonOperator:
    return k_from_jumps([c for _, c in jump_operators(spec, n_spins, n_modes)], n_spins, n_modes)


# ---------------------------------------------------------------------------
# Holstein-Primakoff
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class HPMapping:
    """``spin_half_exact`` maps each spin to its own mode; ``large_spin_first_order``
    maps the collective spin of all ``n_spins`` spins (``s = n_spins / 2``) to one mode."""

    variant: str = "spin_half_exact"
    s: float | None = None

    def __post_init__(self):
        if self.variant not in ("spin_half_exact", "large_spin_first_order"):
            raise ValueError(f"unknown HP variant {self.variant!r}")
        if self.variant == "spin_half_exact" and self.s not in (None, 0.5):
            raise ValueError("the exact variant only applies to spin-1/2")


def _hp_single(label: str, nb: int, mode: int) -> SpinBosonOperator:
    O = SpinBosonOperator
    a = O.boson(0, nb, mode, 0, 1)
    ad = O.boson(0, nb, mode, 1, 0)
    n = O.boson(0, nb, mode, 1, 1)
    one = O.identity(0, nb)
    sp = a - O.boson(0, nb, mode, 1, 2)
    sm = ad - O.boson(0, nb, mode, 2, 1)
    return {
        "I": one,
        "Z": one - 2 * n,
        "X": sp + sm,
        "Y": (-1j) * (sp - sm),
    }[label]


def hp_transform(op: SpinBosonOperator, mapping: HPMapping) -> SpinBosonOperator:
    """Replace spin operators by bosonic ones; HP modes are appended after existing modes."""
    ns, nb = op.n_spins, op.n_modes
    if mapping.variant == "spin_half_exact":
        new_nb = nb + ns
        out = SpinBosonOperator.zero(0, new_nb)
        for (s, b), v in op.terms.items():
            term = SpinBosonOperator(0, new_nb, {("", tuple(b) + ((0, 0),) * ns): v})
            for j, lab in enumerate(s):
                if lab != "I":
                    term = term * _hp_single(lab, new_nb, nb + j)
            out = out + term
        return out

    s_val = ns / 2 if mapping.s is None else float(mapping.s)
    if ns == 0:
        raise UnsupportedSpinStructureError("no spins to map")
    new_nb = nb + 1
    O = SpinBosonOperator
    k = nb
    pref = math.sqrt(2 * s_val)
    s_plus = pref * (O.boson(0, new_nb, k, 0, 1) - O.boson(0, new_nb, k, 1, 2, 1 / (4 * s_val)))
    s_minus = pref * (O.boson(0, new_nb, k, 1, 0) - O.boson(0, new_nb, k, 2, 1, 1 / (4 * s_val)))
    sz = O.identity(0, new_nb, s_val) - O.boson(0, new_nb, k, 1, 1)
    # sum_j P_j in terms of collective operators
    collective = {
        "Z": 2 * sz,
        "X": s_plus + s_minus,
        "Y": (-1j) * (s_plus - s_minus),
    }
    groups: dict = {}
    out = O.zero(0, new_nb)
    for (s, b), v in op.terms.items():
        active = [(j, lab) for j, lab in enumerate(s) if lab != "I"]
        bos = O(0, new_nb, {("", tuple(b) + ((0, 0),)): v})
        if not active:
            out = out + bos
            continue
        if len(active) > 1:
            raise UnsupportedSpinStructureError(
                "collective mapping requires operators linear in single-spin Paulis"
            )
        j, lab = active[0]
        groups.setdefault((lab, b), {})[j] = v
    for (lab, b), per_spin in groups.items():
        vals = [per_spin.get(j, 0) for j in range(ns)]
        if not np.allclose(vals, vals[0], rtol=1e-12, atol=1e-14):
            raise UnsupportedSpinStructureError(
                "collective mapping requires permutation-symmetric spin operators"
            )
        bos = O(0, new_nb, {("", tuple(b) + ((0, 0),)): vals[0]})
        out = out + bos * collective[lab]
    return out


# ---------------------------------------------------------------------------
# Evaluation on NGS states
# ---------------------------------------------------------------------------

def energy(state: NGSState, op: SpinBosonOperator) -> complex:
    """Unnormalised ``<psi|op|psi>``."""
    return _vg.expectation(state, op)


def energy_gradient(state: NGSState, op: SpinBosonOperator) -> np.ndarray:
    """Analytic derivative of ``<psi|op|psi>`` w.r.t. the flattened parameters."""
    return _vg.operator_gradient(state, op)
