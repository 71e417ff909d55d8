"""Computable statements behind the synthesis guarantees.

* noise radius ``t_delta`` for latent Gaussian noise (chi concentration)
* the original-dataset size threshold ``N0`` above which enough augmentation
  lowers the estimation error
* fits for the constants ``C1`` (statistical error), ``p`` (reconstruction
  error decay) and ``B0`` (synthesis bias)
* 1-Wasserstein checks between original and reconstructed point clouds
* the reward-margin lower bound for synthesized pairs
"""

from __future__ import annotations

import logging
import math
from dataclasses import asdict, dataclass, field

import numpy as np

from .data import PairSet
from .numkit import DomainError, Rng, assignment_min_cost, loglog_fit

log = logging.getLogger(__name__)

EXACT_W1_MAX = 512


def compute_t_delta(sigma_noise: float, d_vae: int, delta: float) -> float:
    """Radius containing Gaussian latent noise with probability >= 1 - delta/2."""
    if not sigma_noise > 0:
        raise DomainError("sigma_noise must be > 0")
    if d_vae < 1:
        raise DomainError("d_vae must be >= 1")
    if not 0 < delta < 1:
        raise DomainError("delta must lie in (0, 1)")
    ln = math.log(4.0 / delta)
    return sigma_noise * math.sqrt(d_vae + 2.0 * math.sqrt(d_vae * ln) + 2.0 * ln)


def complexity_term(d: int, delta: float) -> float:
    return d + math.log(1.0 / delta)


def compute_N0(C1: float, B0: float, p: float, d: int, delta: float) -> float:
    """Threshold ``(C1 sqrt(d + ln(1/delta)) / B0) ** (1 / (1/2 - p))``."""
    if not 0 < p < 0.5:
        raise DomainError(f"condition degenerate: need 0 < p < 1/2, got p={p}")
    if C1 <= 0:
        raise DomainError("C1 must be > 0")
    if not 0 < delta < 1:
        raise DomainError("delta must lie in (0, 1)")
    if not B0 > 0:
        raise OverflowError("N0 diverges as B0 -> 0")
    log_n0 = math.log(C1 * math.sqrt(complexity_term(d, delta)) / B0) / (0.5 - p)
    if log_n0 > math.log(np.finfo(np.float64).max):
        raise OverflowError(f"N0 overflows (log N0 = {log_n0:.1f})")
    return math.exp(log_n0)


def estimate_p(ns, eps) -> float:
    """Decay exponent of reconstruction error: minus the log-log slope."""
    ns, eps = list(ns), list(eps)
    if len(ns) < 4:
        raise DomainError(f"need at least 4 sample sizes to estimate p, got {len(ns)}")
    slope, _ = loglog_fit(ns, eps)
    return -slope


def estimate_C1(ns, zetas, d: int, delta: float) -> float:
    """Least-squares ``C1`` in ``zeta(N) ~ C1 sqrt((d + ln(1/delta)) / N)``."""
    ns = np.asarray(ns, dtype=np.float64)
    zetas = np.asarray(zetas, dtype=np.float64)
    if ns.size < 3:
        raise DomainError(f"need at least 3 sample sizes to estimate C1, got {ns.size}")
    if not np.any(zetas > 0):
        raise DomainError("degenerate fit: every estimation error is <= 0")
    x = np.sqrt(complexity_term(d, delta) / ns)
    return float(np.dot(x, zetas) / np.dot(x, x))


def estimate_B0(ns, zetas_aug, C1: float, p: float, d: int, delta: float, k: int) -> float:
    """Least-squares ``B0`` in ``bias(N) = (k-1)/k * B0 * N^-p``.

    The bias at each ``N`` is the augmented estimation error minus the
    statistical term at sample size ``k N``.  Negative bias estimates are
    clamped to zero with a warning.
    """
    if k < 2:
        raise DomainError("k must be >= 2")
    ns = np.asarray(ns, dtype=np.float64)
    zetas_aug = np.asarray(zetas_aug, dtype=np.float64)
    bias = zetas_aug - C1 * np.sqrt(complexity_term(d, delta) / (k * ns))
    if np.any(bias < 0):
        log.warning("clamping %d negative synthesis-bias estimates to 0", int(np.sum(bias < 0)))
        bias = np.maximum(bias, 0.0)
    u = (k - 1) / k * ns ** (-p)
    return float(np.dot(u, bias) / np.dot(u, u))


@dataclass
class W1Check:
    coupling_bound: float
    exact: float | None
    count: int

    def to_json(self) -> dict:
        return asdict(self)


def w1_checks(originals: np.ndarray, reconstructions: np.ndarray) -> W1Check:
    """Identity-coupling bound and (for <= 512 points) exact W1 between clouds."""
    a = np.atleast_2d(np.asarray(originals, dtype=np.float64))
    b = np.atleast_2d(np.asarray(reconstructions, dtype=np.float64))
    if a.shape != b.shape:
        raise DomainError(f"point clouds differ in shape: {a.shape} vs {b.shape}")
    n = a.shape[0]
    bound = float(np.mean(np.linalg.norm(a - b, axis=1)))
    exact = None
    if n <= EXACT_W1_MAX:
        sq = np.sum(a * a, axis=1)[:, None] + np.sum(b * b, axis=1)[None, :] - 2.0 * a @ b.T
        cost = np.sqrt(np.maximum(sq, 0.0))
        _, total = assignment_min_cost(cost)
        exact = total / n
    return W1Check(bound, exact, n)


# ---------------------------------------------------------------------------
# Reward-margin bound for synthesized pairs
# ---------------------------------------------------------------------------

def margin_slack(L_r: float, L_g: float, t_delta: float, eps_rec: float, alpha: float = 1.0) -> float:
    return 2.0 * L_r * (L_g * t_delta + eps_rec) ** alpha


def theorem1_margin_check(
    reference_head, originals: PairSet, synth_pairs: PairSet, sigma_noise: float, d_vae: int, delta: float,
    L_g: float | None, L_r: float | None, alpha: float | None, eps_rec: float | None,
) -> float:
    """Fraction of synthesized pairs whose reference-reward margin falls below
    the original margin minus ``2 L_r (L_g t_delta + eps_rec)^alpha``.

    Synthetic pairs are matched to their original through ``prompt_id``.
    Pairs tagged original/original are skipped when provenance is present.
    """
    if None in (L_g, L_r, alpha, eps_rec):
        raise ValueError("theorem1_margin_check needs L_g, L_r, alpha and eps_rec")
    # sigma_noise = 0 is the degenerate no-noise case
    t = compute_t_delta(sigma_noise, d_vae, delta) if sigma_noise > 0 else 0.0
    slack = margin_slack(L_r, L_g, t, eps_rec, alpha)
    index = {int(pid): i for i, pid in enumerate(originals.prompt_ids)}
    rows = np.array([index[int(pid)] for pid in synth_pairs.prompt_ids])
    orig_margin = reference_head(originals.e_plus) - reference_head(originals.e_minus)
    syn_margin = reference_head(synth_pairs.e_plus) - reference_head(synth_pairs.e_minus)
    keep = np.ones(len(synth_pairs), dtype=bool)
    if synth_pairs.provenance is not None:
        keep = np.array([t != ("original", "original") for t in synth_pairs.provenance])
        if not keep.any():
            keep[:] = True
    violated = syn_margin[keep] < orig_margin[rows[keep]] - slack - 1e-12
    return float(np.mean(violated))


def estimate_lipschitz(fn, points: np.ndarray, rng: Rng, radius: float, samples: int = 2000) -> float:
    """Max ``||fn(x) - fn(y)|| / ||x - y||`` over sampled nearby and random pairs.

    Half of the pairs perturb a data point by an isotropic step of norm
    ``radius``; the other half pair two random data points.  This is a lower
    estimate of the true supremum.
    """
    points = np.atleast_2d(np.asarray(points, dtype=np.float64))
    n, k = points.shape
    half = samples // 2
    idx = rng.integers(n, half)
    step = rng.normal_like((half, k))
    step *= radius / np.maximum(np.linalg.norm(step, axis=1, keepdims=True), 1e-300)
    x1, y1 = points[idx], points[idx] + step
    i2, j2 = rng.integers(n, samples - half), rng.integers(n, samples - half)
    distinct = i2 != j2
    x2, y2 = points[i2[distinct]], points[j2[distinct]]
    xs = np.concatenate([x1, x2])
    ys = np.concatenate([y1, y2])
    fx = np.asarray(fn(xs), dtype=np.float64)
    fy = np.asarray(fn(ys), dtype=np.float64)
    num = np.abs(fx - fy) if fx.ndim == 1 else np.linalg.norm(fx - fy, axis=1)
    den = np.linalg.norm(xs - ys, axis=1)
    ok = den > 0
    return float(np.max(num[ok] / den[ok]))


@dataclass
class TheoryReport:
    C1: float
    p: float
    B0: float
    N0: float | None
    N0_status: str
    t_delta: float
    eps_rec_curve: list[tuple[int, float]]
    zeta_curve: list[tuple[int, float, float]]
    ordering_preservation: float
    gap_original: float
    gap_synthetic: float
    w1_coupling_bound: float
    w1_exact: float
    theorem1_violation_fraction: float
    constants: dict = field(default_factory=dict)
    reference_values: dict = field(default_factory=dict)

    def to_json(self) -> dict:
        return asdict(self)
