"""Complex special functions for the closed-form affine exponent.

Complex Gamma via the Lanczos approximation (g = 7, 9 coefficients,
reflection for Re z < 1/2) and the Kummer confluent hypergeometric
functions M(a, b, z) and U(a, b, z) on complex arguments.

M is summed as a power series with term-ratio stopping. Arguments with
negative real part are routed through the transformation
M(a, b, z) = e^z M(b - a, b, -z), which removes the catastrophic
cancellation the raw series suffers there; the running partial-sum
magnitude is tracked and evaluations that still lose too many digits are
reported as non-converged. U is assembled from two M values and
reciprocal Gammas; the reciprocal form is entire, so parameter
combinations that put a Gamma at a pole (e.g. U(a, a+1, z)) are handled
exactly. Integer b, where the reflection formula degenerates, is treated
by averaging two evaluations at b +/- 1e-7 unless the caller asks for a
hard error.

All functions are pure and accept scalars or numpy arrays.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

__all__ = [
    "KummerResult",
    "PoleError",
    "ConvergenceError",
    "gamma_complex",
    "loggamma_complex",
    "rgamma_complex",
    "kummer_m",
    "kummer_u",
]


class PoleError(ValueError):
    """Evaluation requested at a pole of the function."""


class ConvergenceError(RuntimeError):
    """Series did not converge to tolerance within the term budget."""


@dataclass(frozen=True)
class KummerResult:
    value: complex
    method: str  # "series" or "u_reflection"
    terms_used: int
    converged: bool


# Lanczos g = 7, 9-term coefficient set; ~1e-13 relative accuracy for
# Re z >= 1/2, extended by reflection.
_LANCZOS_G = 7.0
_LANCZOS_C = np.array(
    [
        0.99999999999980993,
        676.5203681218851,
        -1259.1392167224028,
        771.32342877765313,
        -176.61502916214059,
        12.507343278686905,
        -0.13857109526572012,
        9.9843695780195716e-6,
        1.5056327351493116e-7,
    ]
)

_MAX_TERMS = 10_000
_SERIES_RTOL = 1e-15
_CANCEL_DIGITS = 1e13  # max allowed ratio of peak partial sum to result
_INTEGER_B_EPS = 1e-7


def _is_nonpositive_integer(z) -> np.ndarray:
    z = np.asarray(z, dtype=complex)
    near = np.round(z.real)
    return (np.abs(z.imag) == 0.0) & (np.abs(z.real - near) == 0.0) & (near <= 0.0)


def _log_sin_pi(z: np.ndarray) -> np.ndarray:
    """log(sin(pi z)) stable for large |Im z| (up to 2*pi*i*k branch shifts)."""
    z = np.asarray(z, dtype=complex)
    out = np.empty(z.shape, dtype=complex)
    up = z.imag > 0
    # sin(pi z) = (e^{i pi z} - e^{-i pi z}) / (2i); factor out the growing term
    zu = z[up]
    # = e^{-i pi z} (1 - e^{2 i pi z}) * (i/2), e^{2 i pi z} small for Im z > 0
    out[up] = -1j * np.pi * zu + (np.log(0.5) + 0.5j * np.pi) + np.log1p(-np.exp(2j * np.pi * zu))
    zd = z[~up]
    # = e^{i pi z} (1 - e^{-2 i pi z}) / (2i), e^{-2 i pi z} small for Im z <= 0
    out[~up] = 1j * np.pi * zd - (np.log(2.0) + 0.5j * np.pi) + np.log1p(-np.exp(-2j * np.pi * zd))
    return out


def loggamma_complex(z):
    """A logarithm of Gamma(z) (exact up to 2*pi*i shifts), vectorized.

    Safe for large |Im z| where Gamma itself under- or overflows; exp of
    sums/differences of these values reproduces Gamma ratios exactly.
    """
    z = np.asarray(z, dtype=complex)
    scalar = z.ndim == 0
    z = np.atleast_1d(z)
    if np.any(_is_nonpositive_integer(z)):
        raise PoleError("Gamma pole at non-positive integer argument")
    out = np.empty(z.shape, dtype=complex)
    refl = z.real < 0.5
    zz = np.where(refl, 1.0 - z, z)

    w = zz - 1.0
    x = np.full(zz.shape, _LANCZOS_C[0], dtype=complex)
    for i in range(1, len(_LANCZOS_C)):
        x = x + _LANCZOS_C[i] / (w + i)
    t = w + _LANCZOS_G + 0.5
    lg = 0.5 * np.log(2.0 * np.pi) + (w + 0.5) * np.log(t) - t + np.log(x)

    out[~refl] = lg[~refl]
    # reflection: log Gamma(z) = log pi - log sin(pi z) - log Gamma(1 - z)
    if np.any(refl):
        out[refl] = np.log(np.pi) - _log_sin_pi(z[refl]) - lg[refl]
    return out[0] if scalar else out


def gamma_complex(z):
    """Gamma(z) for complex z, Lanczos approximation with reflection.

    Raises PoleError at non-positive integers.
    """
    z = np.asarray(z, dtype=complex)
    scalar = z.ndim == 0
    val = np.exp(loggamma_complex(np.atleast_1d(z)))
    return complex(val[0]) if scalar else val


def rgamma_complex(z):
    """1/Gamma(z); entire, returns exactly 0 at non-positive integers."""
    z = np.asarray(z, dtype=complex)
    scalar = z.ndim == 0
    z = np.atleast_1d(z)
    out = np.zeros(z.shape, dtype=complex)
    ok = ~_is_nonpositive_integer(z)
    if np.any(ok):
        out[ok] = np.exp(-loggamma_complex(z[ok]))
    return complex(out[0]) if scalar else out


def _m_series_raw(a, b, z, max_terms):
    """Raw power series for M(a, b, z), elementwise over broadcast arrays.

    Returns (sum, terms_used, converged, peak) with ``peak`` the largest
    partial-sum magnitude seen (cancellation tracking).
    """
    a, b, z = np.broadcast_arrays(
        np.asarray(a, dtype=complex), np.asarray(b, dtype=complex), np.asarray(z, dtype=complex)
    )
    shape = z.shape
    s = np.ones(shape, dtype=complex)
    term = np.ones(shape, dtype=complex)
    peak = np.ones(shape)
    small_streak = np.zeros(shape, dtype=np.int32)
    done = np.zeros(shape, dtype=bool)
    terms_used = np.zeros(shape, dtype=np.int64)

    n = 0
    while n < max_terms and not done.all():
        term = term * (a + n) / ((b + n) * (n + 1)) * z
        live = ~done
        s = np.where(live, s + term, s)
        terms_used[live] = n + 1
        mag = np.abs(s)
        peak = np.where(live & (mag > peak), mag, peak)
        small = np.abs(term) < _SERIES_RTOL * np.maximum(mag, 1e-300)
        small_streak = np.where(live & small, small_streak + 1, np.where(live, 0, small_streak))
        done = done | (small_streak >= 3)
        # elementwise overflow bail-out: flag and freeze
        blown = live & ~np.isfinite(s)
        if blown.any():
            done = done | blown
            small_streak = np.where(blown, 0, small_streak)
        n += 1

    converged = small_streak >= 3
    converged &= np.isfinite(s)
    # excessive cancellation means the digits are gone even if terms shrank
    with np.errstate(divide="ignore", invalid="ignore"):
        ratio = peak / np.maximum(np.abs(s), 1e-300)
    converged &= ratio < _CANCEL_DIGITS
    return s, terms_used, converged, peak


def _kummer_m_array(a, b, z, max_terms=_MAX_TERMS):
    """Vectorized M(a, b, z). Returns (values, terms_used, converged).

    Applies M(a,b,z) = e^z M(b-a, b, -z) where Re z < 0 so the series is
    summed with a non-negative real part argument.
    """
    a, b, z = np.broadcast_arrays(
        np.asarray(a, dtype=complex), np.asarray(b, dtype=complex), np.asarray(z, dtype=complex)
    )
    vals = np.empty(z.shape, dtype=complex)
    terms = np.zeros(z.shape, dtype=np.int64)
    conv = np.zeros(z.shape, dtype=bool)

    neg = z.real < 0.0
    if np.any(~neg):
        s, t, c, _ = _m_series_raw(a[~neg], b[~neg], z[~neg], max_terms)
        vals[~neg], terms[~neg], conv[~neg] = s, t, c
    if np.any(neg):
        s, t, c, _ = _m_series_raw(b[neg] - a[neg], b[neg], -z[neg], max_terms)
        vals[neg] = np.exp(z[neg]) * s
        terms[neg], conv[neg] = t, c
    return vals, terms, conv


def kummer_m(a, b, z, max_terms: int = _MAX_TERMS) -> KummerResult:
    """Confluent hypergeometric M(a, b, z) = 1F1(a; b; z).

    Raises PoleError when b is a non-positive integer and ConvergenceError
    when the series cannot deliver the value (term budget exhausted or all
    significant digits cancelled).
    """
    if _is_nonpositive_integer(np.asarray(b, dtype=complex)).any():
        raise PoleError(f"M(a, b, z) undefined at non-positive integer b = {b}")
    vals, terms, conv = _kummer_m_array(a, b, z, max_terms=max_terms)
    v = complex(vals.reshape(-1)[0])
    t = int(terms.reshape(-1)[0])
    c = bool(conv.reshape(-1)[0])
    if not c:
        raise ConvergenceError(
            f"M series did not converge for a={a}, b={b}, z={z} ({t} terms)"
        )
    return KummerResult(value=v, method="series", terms_used=t, converged=True)


def _kummer_u_single_b(a, b, z, max_terms):
    """U via the reflection formula at a fixed, non-integer b (arrays ok)."""
    a = np.asarray(a, dtype=complex)
    z = np.asarray(z, dtype=complex)
    b = complex(b)
    m1, t1, c1 = _kummer_m_array(a, b, z, max_terms=max_terms)
    m2, t2, c2 = _kummer_m_array(1.0 + a - b, 2.0 - b, z, max_terms=max_terms)
    # reciprocal Gammas keep the formula finite when 1+a-b or a hits a pole
    pref = np.pi / np.sin(np.pi * b)
    term1 = m1 * rgamma_complex(1.0 + a - b) * rgamma_complex(b)
    term2 = np.power(z, 1.0 - b) * m2 * rgamma_complex(a) * rgamma_complex(2.0 - b)
    return pref * (term1 - term2), t1 + t2, c1 & c2


def _kummer_u_array(a, b, z, max_terms=_MAX_TERMS, integer_b: str = "perturb"):
    """Vectorized U(a, b, z) for scalar b. Returns (values, terms, converged)."""
    b = complex(b)
    if b.imag == 0.0 and abs(b.real - round(b.real)) < 1e-9:
        if integer_b == "raise":
            raise PoleError(
                f"U reflection formula degenerates at integer b = {b} (sin(pi b) = 0)"
            )
        eps = _INTEGER_B_EPS
        v1, t1, c1 = _kummer_u_single_b(a, b + eps, z, max_terms)
        v2, t2, c2 = _kummer_u_single_b(a, b - eps, z, max_terms)
        return 0.5 * (v1 + v2), t1 + t2, c1 & c2
    return _kummer_u_single_b(a, b, z, max_terms)


def kummer_u(a, b, z, max_terms: int = _MAX_TERMS, integer_b: str = "perturb") -> KummerResult:
    """Tricomi confluent hypergeometric U(a, b, z).

    ``integer_b`` selects the behaviour at (near-)integer b where the
    reflection formula has a removable singularity: "perturb" (default)
    averages evaluations at b +/- 1e-7, "raise" raises PoleError. z = 0 is
    rejected; the principal branch is used for z**(1-b).
    """
    if integer_b not in ("perturb", "raise"):
        raise ValueError(f"integer_b must be 'perturb' or 'raise', got {integer_b!r}")
    if complex(np.asarray(z, dtype=complex).reshape(-1)[0]) == 0:
        raise PoleError("U(a, b, z) is singular at z = 0")
    vals, terms, conv = _kummer_u_array(a, b, z, max_terms=max_terms, integer_b=integer_b)
    v = complex(np.asarray(vals).reshape(-1)[0])
    t = int(np.asarray(terms).reshape(-1)[0])
    c = bool(np.asarray(conv).reshape(-1)[0])
    if not c:
        raise ConvergenceError(f"U series did not converge for a={a}, b={b}, z={z}")
    return KummerResult(value=v, method="u_reflection", terms_used=t, converged=True)
