"""Domain types shared by all modules.

Model parameters (CIR/Heston variance factors with maturity damping,
optional deterministic log-normal factors), the initial futures curve,
option contract descriptors and the numerical-settings record.

All types are immutable after construction and safe to share across
threads.
"""

from __future__ import annotations

import csv
import json
import math
import warnings
from dataclasses import dataclass, field, replace

__all__ = [
    "FactorParams",
    "DeterministicFactor",
    "ModelParams",
    "FuturesCurve",
    "VanillaContract",
    "CsoContract",
    "NumericsConfig",
    "validate",
    "feller_ratio",
]


@dataclass(frozen=True)
class FactorParams:
    """One square-root stochastic variance factor.

    kappa : mean-reversion rate (1/years)
    theta : long-run variance level
    sigma : volatility of variance
    rho   : correlation between the factor's price and variance drivers, in (-1, 1)
    v0    : initial variance
    lam   : maturity damping rate (1/years); the factor's contribution to a
            contract expiring at T_m is scaled by exp(-lam*(T_m - t))
    """

    kappa: float
    theta: float
    sigma: float
    rho: float
    v0: float
    lam: float

    def violations(self, label: str = "factor") -> list[str]:
        out = []
        if not self.kappa > 0:
            out.append(f"{label}: kappa must be > 0, got {self.kappa}")
        if not self.theta > 0:
            out.append(f"{label}: theta must be > 0, got {self.theta}")
        if not self.sigma > 0:
            out.append(f"{label}: sigma must be > 0, got {self.sigma}")
        if not self.v0 > 0:
            out.append(f"{label}: v0 must be > 0, got {self.v0}")
        if not self.lam >= 0:
            out.append(f"{label}: lambda must be >= 0, got {self.lam}")
        if not (-1.0 < self.rho < 1.0):
            out.append(f"{label}: rho must lie in the open interval (-1, 1), got {self.rho}")
        return out


@dataclass(frozen=True)
class DeterministicFactor:
    """A log-normal volatility factor with maturity damping.

    Contributes instantaneous volatility sigma_hat * exp(-lam*(T_m - t)).
    """

    sigma_hat: float
    lam: float

    def violations(self, label: str = "deterministic factor") -> list[str]:
        out = []
        if not self.sigma_hat > 0:
            out.append(f"{label}: sigma_hat must be > 0, got {self.sigma_hat}")
        if not self.lam >= 0:
            out.append(f"{label}: lambda must be >= 0, got {self.lam}")
        return out


@dataclass(frozen=True)
class ModelParams:
    """Full model state: stochastic factors plus optional deterministic factors.

    A model with only deterministic factors (empty ``factors``) is the
    damped log-normal benchmark; it is accepted everywhere the stochastic
    model is.
    """

    factors: tuple[FactorParams, ...] = ()
    deterministic_factors: tuple[DeterministicFactor, ...] = ()

    def __post_init__(self):
        object.__setattr__(self, "factors", tuple(self.factors))
        object.__setattr__(
            self, "deterministic_factors", tuple(self.deterministic_factors)
        )

    @property
    def n_factors(self) -> int:
        return len(self.factors)

    def to_json_dict(self) -> dict:
        return {
            "factors": [
                {
                    "kappa": f.kappa,
                    "theta": f.theta,
                    "sigma": f.sigma,
                    "rho": f.rho,
                    "v0": f.v0,
                    "lambda": f.lam,
                }
                for f in self.factors
            ],
            "deterministic_factors": [
                {"sigma_hat": d.sigma_hat, "lambda": d.lam}
                for d in self.deterministic_factors
            ],
        }

    @classmethod
    def from_json_dict(cls, d: dict) -> "ModelParams":
        factors = tuple(
            FactorParams(
                kappa=float(f["kappa"]),
                theta=float(f["theta"]),
                sigma=float(f["sigma"]),
                rho=float(f["rho"]),
                v0=float(f["v0"]),
                lam=float(f["lambda"]),
            )
            for f in d.get("factors", [])
        )
        det = tuple(
            DeterministicFactor(sigma_hat=float(g["sigma_hat"]), lam=float(g["lambda"]))
            for g in d.get("deterministic_factors", [])
        )
        return cls(factors=factors, deterministic_factors=det)

    def save(self, path) -> None:
        with open(path, "w") as fh:
            json.dump(self.to_json_dict(), fh, indent=2)
            fh.write("\n")

    @classmethod
    def load(cls, path) -> "ModelParams":
        with open(path) as fh:
            return cls.from_json_dict(json.load(fh))


def feller_ratio(f: FactorParams) -> float:
    """2*kappa*theta/sigma^2; values below 1 allow the variance to reach 0."""
    return 2.0 * f.kappa * f.theta / (f.sigma * f.sigma)


def validate(params: ModelParams) -> list[str]:
    """Collect invariant violations; empty list means the model is usable.

    Feller-condition breaches are not violations: they are reported through
    ``warnings.warn`` because the simulation scheme then has to cope with
    the variance spending time near zero.
    """
    out: list[str] = []
    if params.n_factors < 1 and not params.deterministic_factors:
        out.append("model must have at least one factor (stochastic or deterministic)")
    for j, f in enumerate(params.factors):
        out.extend(f.violations(label=f"factor {j + 1}"))
    for j, d in enumerate(params.deterministic_factors):
        out.extend(d.violations(label=f"deterministic factor {j + 1}"))
    if not out:
        for j, f in enumerate(params.factors):
            fr = feller_ratio(f)
            if fr < 1.0:
                warnings.warn(
                    f"factor {j + 1}: Feller ratio 2*kappa*theta/sigma^2 = {fr:.4f} < 1; "
                    "variance paths will touch zero",
                    stacklevel=2,
                )
    return out


@dataclass(frozen=True)
class FuturesCurve:
    """Initial futures prices F(0, T) quoted at a set of maturities.

    Lookups at quoted maturities return the quoted price exactly; between
    quotes the curve is interpolated linearly in log-price (default) or in
    price. Queries outside the quoted range raise.
    """

    points: tuple[tuple[float, float], ...]
    interpolation: str = "loglinear"  # or "linear"

    def __post_init__(self):
        pts = tuple((float(t), float(p)) for t, p in self.points)
        object.__setattr__(self, "points", pts)
        if not pts:
            raise ValueError("futures curve needs at least one point")
        mats = [t for t, _ in pts]
        if any(b <= a for a, b in zip(mats, mats[1:])):
            raise ValueError("curve maturities must be strictly increasing")
        if any(p <= 0 for _, p in pts):
            raise ValueError("curve prices must be strictly positive")
        if self.interpolation not in ("loglinear", "linear"):
            raise ValueError(f"unknown interpolation {self.interpolation!r}")

    def price(self, T: float) -> float:
        pts = self.points
        for t, p in pts:
            if t == T:
                return p
        if T < pts[0][0] or T > pts[-1][0]:
            raise ValueError(
                f"maturity {T} outside quoted range [{pts[0][0]}, {pts[-1][0]}]"
            )
        for (t0, p0), (t1, p1) in zip(pts, pts[1:]):
            if t0 < T < t1:
                w = (T - t0) / (t1 - t0)
                if self.interpolation == "loglinear":
                    return math.exp((1 - w) * math.log(p0) + w * math.log(p1))
                return (1 - w) * p0 + w * p1
        raise AssertionError("unreachable")

    @classmethod
    def flat(cls, price: float, max_maturity: float = 50.0) -> "FuturesCurve":
        return cls(points=((0.0, price), (max_maturity, price)))

    def save_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["maturity", "price"])
            for t, p in self.points:
                w.writerow([repr(t), repr(p)])

    @classmethod
    def load_csv(cls, path, interpolation: str = "loglinear") -> "FuturesCurve":
        pts = []
        with open(path, newline="") as fh:
            reader = csv.reader(fh)
            header = next(reader)
            if [h.strip().lower() for h in header[:2]] != ["maturity", "price"]:
                raise ValueError(f"expected header 'maturity,price', got {header!r}")
            for lineno, row in enumerate(reader, start=2):
                if not row or not "".join(row).strip():
                    continue
                try:
                    pts.append((float(row[0]), float(row[1])))
                except (ValueError, IndexError) as exc:
                    raise ValueError(f"bad curve row at line {lineno}: {row!r}") from exc
        return cls(points=tuple(pts), interpolation=interpolation)


@dataclass(frozen=True)
class VanillaContract:
    """European option on a single futures contract.

    T   : option maturity (years)
    Tm  : maturity of the underlying futures contract, Tm >= T
    K   : strike
    call: True for a call, False for a put
    r   : continuously compounded flat rate
    """

    T: float
    Tm: float
    K: float
    call: bool = True
    r: float = 0.0

    def __post_init__(self):
        if not (0 < self.T <= self.Tm):
            raise ValueError(f"need 0 < T <= Tm, got T={self.T}, Tm={self.Tm}")
        if not self.K > 0:
            raise ValueError(f"strike must be > 0, got {self.K}")


@dataclass(frozen=True)
class CsoContract:
    """Calendar spread option on F(T, T1) - F(T, T2).

    The strike may be negative. 0 < T <= T1 < T2 is required.
    """

    T: float
    T1: float
    T2: float
    K: float
    call: bool = True
    r: float = 0.0

    def __post_init__(self):
        if not (0 < self.T <= self.T1 < self.T2):
            raise ValueError(
                f"need 0 < T <= T1 < T2, got T={self.T}, T1={self.T1}, T2={self.T2}"
            )


def _power_of_two(n: int) -> bool:
    return n >= 1 and (n & (n - 1)) == 0


@dataclass(frozen=True)
class NumericsConfig:
    """Tunable numerical settings with the validated defaults.

    FFT lattices are scaled per model from a variance proxy; the sizes here
    fix the node counts. ``hz_epsilon`` is the contour shift used by the
    two-dimensional transform pricer and must keep the payoff transform
    integrable (eps2 > 0, eps1 + eps2 < -1).
    """

    quad_upper_limit: float = 200.0
    quad_nodes: int = 2000
    fft_size_1d: int = 4096
    fft_size_2d: int = 512
    carr_madan_delta: float = 1.0
    smoothing_a: float = 3.0
    smoothing_a1: float = 3.0
    smoothing_a2: float = 3.0
    hz_epsilon: tuple[float, float] = (-3.0, 1.5)
    mc_paths: int = 100_000
    mc_steps_per_year: int = 200
    mc_seed: int = 12345
    implied_corr_tol: float = 1e-8
    implied_vol_tol: float = 1e-10
    ode_tol: float = 1e-10

    def __post_init__(self):
        if not self.carr_madan_delta > 0:
            raise ValueError("carr_madan_delta must be > 0")
        for name in ("smoothing_a", "smoothing_a1", "smoothing_a2"):
            if not getattr(self, name) > 0:
                raise ValueError(f"{name} must be > 0")
        for name in ("fft_size_1d", "fft_size_2d"):
            n = getattr(self, name)
            if n < 256 or not _power_of_two(n):
                raise ValueError(f"{name} must be a power of two >= 256, got {n}")
        for name in ("implied_corr_tol", "implied_vol_tol", "ode_tol"):
            if not getattr(self, name) > 0:
                raise ValueError(f"{name} must be > 0")
        if not (self.quad_upper_limit > 0 and self.quad_nodes > 0):
            raise ValueError("quadrature settings must be positive")
        e1, e2 = self.hz_epsilon
        if not (e2 > 0 and e1 + e2 < -1):
            raise ValueError(
                f"hz_epsilon must satisfy eps2 > 0 and eps1 + eps2 < -1, got {self.hz_epsilon}"
            )

    def with_(self, **kw) -> "NumericsConfig":
        return replace(self, **kw)


DEFAULT_NUMERICS = NumericsConfig()
