"""Integration rules over a standard Gaussian latent space.

Three rule families are provided: plain Monte Carlo, randomly shifted rank-1
lattices (RQMC) and tensor-product Gauss-Hermite.  MC/RQMC points are
generated in the unit cube and mapped through the inverse normal CDF.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy.special import erfc

from .data import rng_for

METHODS = ("mc", "rqmc", "gh")

# First 64 coordinates of F. Kuo's component-by-component base-2 extensible
# lattice rule "lattice-33002-1024-1048576.9125" (good for N up to 2^20).
LATTICE_GENERATOR = np.array([
    1, 182667, 213731, 255351, 96013, 116671, 479315, 424089, 271103, 464421,
    124483, 230887, 392877, 162965, 109125, 168491, 216103, 5613, 207895, 506745,
    189519, 114879, 133967, 374257, 254597, 502087, 298245, 191333, 242099, 285991,
    397887, 507051, 511437, 129779, 406987, 345291, 225123, 511175, 432153, 306191,
    116577, 809, 370175, 402615, 485791, 201053, 366959, 54087, 395609, 211615,
    68543, 443345, 327293, 290819, 278623, 362043, 236117, 11091, 216837, 31545,
    325799, 503877, 410523, 88371,
], dtype=np.int64)
LATTICE_MAX_LOG2N = 20
GH_MAX_POINTS = 1 << 20
UNIT_NUDGE = 1e-12


class RuleError(ValueError):
    pass


@dataclass(frozen=True)
class IntegrationRule:
    method: str
    points: np.ndarray
    weights: np.ndarray
    provenance: dict = field(default_factory=dict)

    def __post_init__(self):
        pts = np.atleast_2d(np.array(self.points, dtype=np.float64))
        w = np.array(self.weights, dtype=np.float64).reshape(-1)
        if pts.shape[0] != w.shape[0]:
            raise RuleError(f"{pts.shape[0]} points but {w.shape[0]} weights")
        if not np.all(np.isfinite(pts)):
            raise RuleError("integration points must be finite")
        if np.any(w < 0) or abs(w.sum() - 1.0) > 1e-12:
            raise RuleError("weights must be nonnegative and sum to 1")
        pts.setflags(write=False)
        w.setflags(write=False)
        object.__setattr__(self, "points", pts)
        object.__setattr__(self, "weights", w)

    @property
    def n_points(self) -> int:
        return self.points.shape[0]

    @property
    def dim(self) -> int:
        return self.points.shape[1]

    def with_points(self, points, method=None, **provenance) -> "IntegrationRule":
        return IntegrationRule(method or self.method, points, self.weights,
                               {**self.provenance, **provenance})


def _check_pow2(n):
    m = int(n).bit_length() - 1
    if n < 1 or (1 << m) != n:
        raise RuleError(f"N must be a power of two, got {n}")
    return m


def lattice_uniform(n: int, d: int, shift_seed=None, shift=None) -> np.ndarray:
    """Rank-1 lattice ``frac(i g / N + shift)``, ``i = 0..N-1``.

    The shift is drawn from ``shift_seed`` unless given explicitly; pass
    ``shift=np.zeros(d)`` for the unshifted lattice.
    """
    m = _check_pow2(n)
    if m > LATTICE_MAX_LOG2N:
        raise RuleError(f"lattice supports N <= 2^{LATTICE_MAX_LOG2N}")
    if not 1 <= d <= len(LATTICE_GENERATOR):
        raise RuleError(f"lattice supports 1 <= d <= {len(LATTICE_GENERATOR)}")
    g = LATTICE_GENERATOR[:d] % n
    # exact integer arithmetic before the single division
    u = (np.arange(n, dtype=np.int64)[:, None] * g[None, :] % n) / n
    if shift is None:
        if shift_seed is None:
            raise RuleError("lattice needs a shift seed or an explicit shift")
        shift = rng_for(shift_seed).random(d)
    shift = np.asarray(shift, dtype=np.float64)
    return np.mod(u + shift, 1.0)


def mc_uniform(n: int, d: int, seed) -> np.ndarray:
    if n < 1 or d < 1:
        raise RuleError("N and d must be positive")
    return rng_for(seed).random((n, d))


# Acklam's rational approximation to the normal quantile (rel. error ~1e-9)
_A = (-3.969683028665376e+01, 2.209460984245205e+02, -2.759285104469687e+02,
      1.383577518672690e+02, -3.066479806614716e+01, 2.506628277459239e+00)
_B = (-5.447609879822406e+01, 1.615858368580409e+02, -1.556989798598866e+02,
      6.680131188771972e+01, -1.328068155288572e+01)
_C = (-7.784894002430293e-03, -3.223964580411365e-01, -2.400758277161838e+00,
      -2.549732539343734e+00, 4.374664141464968e+00, 2.938163982698783e+00)
_D = (7.784695709041462e-03, 3.224671290700398e-01, 2.445134137142996e+00,
      3.754408661907416e+00)
_P_LOW = 0.02425


def _poly(coefs, x):
    out = np.zeros_like(x) + coefs[0]
    for c in coefs[1:]:
        out = out * x + c
    return out


def norm_ppf(u) -> np.ndarray:
    """Inverse standard normal CDF: rational approximation plus one Halley step.

    Inputs are clipped to ``[1e-12, 1 - 1e-12]`` so 0 and 1 map to finite values.
    """
    u = np.clip(np.asarray(u, dtype=np.float64), 0.0, 1.0)
    # work on the lower half and reflect, so tail refinement avoids cancellation
    upper = u > 0.5
    q = np.maximum(np.where(upper, 1.0 - u, u), UNIT_NUDGE)
    z = np.empty_like(q)
    tail = q < _P_LOW
    t = np.sqrt(-2.0 * np.log(q[tail]))
    z[tail] = _poly(_C, t) / (_poly(_D, t) * t + 1.0)
    r = q[~tail] - 0.5
    s = r * r
    z[~tail] = _poly(_A, s) * r / (_poly(_B, s) * s + 1.0)
    # Halley refinement against the exact CDF
    e = 0.5 * erfc(-z / np.sqrt(2.0)) - q
    g = e * np.sqrt(2.0 * np.pi) * np.exp(0.5 * z * z)
    z = z - g / (1.0 + 0.5 * z * g)
    return np.where(upper, -z, z)


def to_gaussian(points) -> np.ndarray:
    return norm_ppf(points)


def rqmc_rule(n: int, d: int, seed) -> IntegrationRule:
    shift = rng_for(seed).random(d)
    z = to_gaussian(lattice_uniform(n, d, shift=shift))
    return IntegrationRule("rqmc", z, np.full(n, 1.0 / n), {"seed": int(seed), "shift": shift.tolist()})


def mc_rule(n: int, d: int, seed) -> IntegrationRule:
    z = to_gaussian(mc_uniform(n, d, seed))
    return IntegrationRule("mc", z, np.full(n, 1.0 / n), {"seed": int(seed)})


def _hermite_1d(n: int):
    """Probabilists' Gauss-Hermite nodes and normalised weights.

    Initial guesses come from the Jacobi matrix of the three-term
    recurrence; nodes are then Newton-polished on the normalised Hermite
    functions ``h_k = He_k exp(-x^2/4) / sqrt(k!)`` to avoid overflow.
    """
    if n == 1:
        return np.zeros(1), np.ones(1)
    off = np.sqrt(np.arange(1, n, dtype=np.float64))
    x = np.linalg.eigvalsh(np.diag(off, 1) + np.diag(off, -1))

    def hermite_pair(x):
        h_prev = np.zeros_like(x)
        h = np.exp(-0.25 * x * x)
        for k in range(n):
            h_prev, h = h, (x * h - np.sqrt(k) * h_prev) / np.sqrt(k + 1)
        return h, h_prev

    for _ in range(3):
        h_n, h_nm1 = hermite_pair(x)
        # d/dx He_n = n He_{n-1}; the exp(-x^2/4) factors cancel in the ratio
        ok = h_nm1 != 0
        step = np.where(ok, h_n / (np.sqrt(n) * np.where(ok, h_nm1, 1.0)), 0.0)
        x = x - step
    x = 0.5 * (x - x[::-1])
    _, h_nm1 = hermite_pair(x)
    w = np.where(h_nm1 != 0, np.exp(-0.5 * x * x) / (n * np.where(h_nm1 != 0, h_nm1, 1.0) ** 2), 0.0)
    w = 0.5 * (w + w[::-1])
    return x, w / w.sum()


def gauss_hermite_rule(n_per_dim: int, d: int) -> IntegrationRule:
    """Tensor-product Gauss-Hermite rule for ``N(0, I_d)``, weights normalised to 1."""
    if n_per_dim < 1 or not 1 <= d <= 4:
        raise RuleError("Gauss-Hermite needs n_per_dim >= 1 and 1 <= d <= 4")
    if n_per_dim ** d > GH_MAX_POINTS:
        raise RuleError(f"{n_per_dim}^{d} points exceeds the limit of {GH_MAX_POINTS}")
    x, w = _hermite_1d(n_per_dim)
    grids = np.meshgrid(*([x] * d), indexing="ij")
    wgrids = np.meshgrid(*([w] * d), indexing="ij")
    pts = np.stack([g.ravel() for g in grids], axis=1)
    wts = np.prod(np.stack([g.ravel() for g in wgrids], axis=1), axis=1)
    return IntegrationRule("gh", pts, wts / wts.sum(), {"n_per_dim": n_per_dim})


def make_rule(method: str, n: int, d: int, seed=None) -> IntegrationRule:
    """Build a rule by name; for ``gh``, ``n`` is the total point count (a d-th power)."""
    if method == "rqmc":
        return rqmc_rule(n, d, seed)
    if method == "mc":
        return mc_rule(n, d, seed)
    if method == "gh":
        k = int(round(n ** (1.0 / d)))
        if k ** d != n:
            raise RuleError(f"Gauss-Hermite needs N = k^d, got N={n}, d={d}")
        return gauss_hermite_rule(k, d)
    raise RuleError(f"unknown integration method {method!r}")


def save_rule_csv(rule: IntegrationRule, path) -> None:
    cols = [f"z{k}" for k in range(rule.dim)] + ["weight"]
    lines = [",".join(cols)]
    for z, w in zip(rule.points, rule.weights):
        lines.append(",".join(repr(float(v)) for v in (*z, w)))
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


def load_rule_csv(path, method: str = "custom") -> IntegrationRule:
    arr = np.loadtxt(path, delimiter=",", skiprows=1, ndmin=2)
    return IntegrationRule(method, arr[:, :-1], arr[:, -1], {"source": str(path)})


def estimate_integration_error(model, structure, data, n: int, d: int, num_shifts: int = 8,
                               seed: int = 0, shift_seeds=None):
    """Mean test LL and its standard error across independent random shifts.

    ``model`` is a :class:`~contmix.decoder.Decoder`. Shift seeds default to
    ``seed, seed+1, ...``; duplicates are rejected.
    """
    from .trainer import mean_log_likelihood

    seeds = list(shift_seeds) if shift_seeds is not None else [seed + r for r in range(num_shifts)]
    if len(seeds) < 2:
        raise RuleError("error estimation needs at least two shifts")
    if len(set(seeds)) != len(seeds):
        raise RuleError("shift seeds must be distinct")
    lls = np.array([mean_log_likelihood(model, structure, rqmc_rule(n, d, s), data) for s in seeds])
    return float(lls.mean()), float(lls.std(ddof=1) / np.sqrt(len(lls)))
