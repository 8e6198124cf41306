"""Monte-Carlo checks of how additive noise perturbs transport costs and transported embeddings.

Two statements are exercised. For clouds X, Y and noisy copies X + e_s, Y + e_q:

* the noisy cost never exceeds the clean one by more than sampling error, and the
  clean cost exceeds the noisy one by at most ``sqrt(d * (sigma_s^2 + sigma_q^2))``;
* the barycentric image of a support cloud moves roughly in proportion to
  ``sqrt(2 d) sigma`` when both clouds receive noise of scale ``sigma``.
"""

from __future__ import annotations

import csv
import io
import math
from dataclasses import asdict, dataclass, field

import numpy as np
from scipy.optimize import linear_sum_assignment

from . import ot

MAX_W2_POINTS = 256
BOOTSTRAP_RESAMPLES = 50
SLACK_MULT = 3.0
MEAN_SEPARATION = 2.0


def empirical_w2(x, y) -> float:
    """Exact 2-Wasserstein distance between two equal-size uniform point clouds."""
    x = np.atleast_2d(np.asarray(x, dtype=np.float64))
    y = np.atleast_2d(np.asarray(y, dtype=np.float64))
    if x.shape != y.shape:
        raise ValueError(f"point clouds differ in shape: {x.shape} vs {y.shape}")
    if len(x) > MAX_W2_POINTS:
        raise ValueError(f"at most {MAX_W2_POINTS} points supported, got {len(x)}")
    c = ot.cost_matrix(x, y)
    rows, cols = linear_sum_assignment(c)
    # fsum is exactly rounded, so W(x, y) == W(y, x) bit for bit
    return float(np.sqrt(math.fsum(c[rows, cols]) / len(x)))


def noise_rhs(d: int, sigma_s: float, sigma_q: float) -> float:
    return float(np.sqrt(d * (sigma_s**2 + sigma_q**2)))


def base_clouds(d: int, n: int, rng: np.random.Generator) -> tuple[np.ndarray, np.ndarray]:
    """Unit-covariance Gaussian samples whose means differ by 2 along the first axis."""
    x = rng.standard_normal((n, d))
    y = rng.standard_normal((n, d))
    y[:, 0] += MEAN_SEPARATION
    return x, y


def bootstrap_std(x, y, rng: np.random.Generator, resamples: int = BOOTSTRAP_RESAMPLES) -> float:
    n = len(x)
    vals = [empirical_w2(x[rng.integers(0, n, n)], y[rng.integers(0, n, n)]) for _ in range(resamples)]
    return float(np.std(vals, ddof=1))


@dataclass
class BoundTrial:
    w: float
    w_sigma: float
    bound_rhs: float
    slack: float
    lower_ok: bool
    upper_ok: bool

    @property
    def passed(self) -> bool:
        return self.lower_ok and self.upper_ok


@dataclass
class BoundReport:
    d: int
    n: int
    sigma_s: float
    sigma_q: float
    trials: list[BoundTrial] = field(default_factory=list)

    @property
    def n_trials(self) -> int:
        return len(self.trials)

    @property
    def pass_fraction(self) -> float:
        return sum(t.passed for t in self.trials) / len(self.trials)

    @property
    def lower_fraction(self) -> float:
        return sum(t.lower_ok for t in self.trials) / len(self.trials)

    def to_dict(self) -> dict:
        return {"d": self.d, "n": self.n, "sigma_s": self.sigma_s, "sigma_q": self.sigma_q,
                "trials": self.n_trials, "pass_fraction": self.pass_fraction,
                "lower_fraction": self.lower_fraction,
                "per_trial": [asdict(t) for t in self.trials]}

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["trial", "w", "w_sigma", "bound_rhs", "slack", "passed"])
        for i, t in enumerate(self.trials):
            w.writerow([i, repr(t.w), repr(t.w_sigma), repr(t.bound_rhs), repr(t.slack), int(t.passed)])
        return buf.getvalue()


def _trial_rngs(rng: np.random.Generator, trials: int) -> list[np.random.Generator]:
    """One independent generator per trial, derived from the caller's generator."""
    return [np.random.default_rng(int(s)) for s in rng.integers(0, 2**63 - 1, trials)]


def lemma1_sweep(d: int, n: int, sigma_pairs, trials: int, rng: np.random.Generator,
                 resamples: int = BOOTSTRAP_RESAMPLES) -> list[BoundReport]:
    """Sandwich W_sigma <= W + slack and W <= W_sigma + sqrt(d(s_s^2 + s_q^2)) + slack.

    The slack is three bootstrap standard deviations of the clean estimate. Each
    trial draws its clean clouds, bootstrap resamples and standard-normal noise
    once; every (sigma_s, sigma_q) pair scales that same noise, so the clean W and
    its slack are shared across pairs.
    """
    pairs = [(float(a), float(b)) for a, b in sigma_pairs]
    if d < 1 or n < 1 or any(a < 0 or b < 0 for a, b in pairs):
        raise ValueError("d and n must be positive, noise scales non-negative")
    if trials < 10:
        raise ValueError("need at least 10 trials")
    reports = [BoundReport(d, n, a, b) for a, b in pairs]
    for r in _trial_rngs(rng, trials):
        x, y = base_clouds(d, n, r)
        w = empirical_w2(x, y)
        boot = SLACK_MULT * bootstrap_std(x, y, r, resamples)
        es, eq = r.standard_normal(x.shape), r.standard_normal(y.shape)
        for rep, (sig_s, sig_q) in zip(reports, pairs):
            rhs = noise_rhs(d, sig_s, sig_q)
            slack = boot if rhs > 0 else 0.0
            w_sig = empirical_w2(x + sig_s * es, y + sig_q * eq)
            rep.trials.append(BoundTrial(
                w=w, w_sigma=w_sig, bound_rhs=w_sig + rhs + slack, slack=slack,
                lower_ok=bool(w_sig <= w + slack), upper_ok=bool(w <= w_sig + rhs + slack),
            ))
    return reports


def lemma1_check(d: int, n: int, sigma_s: float, sigma_q: float, trials: int,
                 rng: np.random.Generator, resamples: int = BOOTSTRAP_RESAMPLES) -> BoundReport:
    """Single-point version of lemma1_sweep."""
    return lemma1_sweep(d, n, [(sigma_s, sigma_q)], trials, rng, resamples)[0]


def transported(xs, xq, beta: float) -> np.ndarray:
    """Barycentric image of xs under the entropic plan towards xq."""
    plan = ot.sinkhorn(ot.cost_matrix(xs, xq), beta=beta)
    return ot.barycentric_map(plan, xq)


@dataclass
class ScalingReport:
    d: int
    n: int
    sigma_grid: list[float]
    errors: np.ndarray  # (trials, len(sigma_grid))
    beta: float

    @property
    def mean_errors(self) -> np.ndarray:
        return self.errors.mean(axis=0)

    @property
    def predicted(self) -> np.ndarray:
        return np.sqrt(2 * self.d) * np.asarray(self.sigma_grid)

    @property
    def correlation(self) -> float:
        return float(np.corrcoef(self.mean_errors, self.predicted)[0, 1])

    @property
    def monotone_fraction(self) -> float:
        return float(np.mean(np.all(np.diff(self.errors, axis=1) >= 0, axis=1)))

    def to_dict(self) -> dict:
        return {"d": self.d, "n": self.n, "beta": self.beta, "sigma_grid": list(self.sigma_grid),
                "mean_errors": self.mean_errors.tolist(), "predicted": self.predicted.tolist(),
                "correlation": self.correlation, "monotone_fraction": self.monotone_fraction,
                "per_trial": self.errors.tolist()}

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["trial", "sigma", "error"])
        for i, row in enumerate(self.errors):
            for s, e in zip(self.sigma_grid, row):
                w.writerow([i, s, repr(float(e))])
        return buf.getvalue()


def thm_err_scaling(d: int, n: int, sigma_grid, trials: int, rng: np.random.Generator,
                    beta: float = 0.5) -> ScalingReport:
    """Mean displacement of transported supports when both clouds get noise of scale sigma.

    Within a trial the same standard-normal draws are scaled by every sigma, so the
    error curve along the grid is comparable point to point.
    """
    grid = [float(s) for s in sigma_grid]
    if len(grid) < 3 or np.any(np.diff(grid) <= 0) or grid[0] < 0:
        raise ValueError("sigma_grid must hold at least 3 increasing non-negative values")
    if trials < 1:
        raise ValueError("need at least one trial")
    errors = np.zeros((trials, len(grid)))
    for t, r in enumerate(_trial_rngs(rng, trials)):
        xs, xq = base_clouds(d, n, r)
        es, eq = r.standard_normal(xs.shape), r.standard_normal(xq.shape)
        clean = transported(xs, xq, beta)
        for k, s in enumerate(grid):
            noisy = transported(xs + s * es, xq + s * eq, beta)
            errors[t, k] = np.linalg.norm(clean - noisy, axis=1).mean()
    return ScalingReport(d=d, n=n, sigma_grid=grid, errors=errors, beta=beta)
