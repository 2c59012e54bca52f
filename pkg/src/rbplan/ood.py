"""Distance-to-data uncertainty: smoothed distance, its likelihood identity, the
Lipschitz error bound, and the reconstruction penalty used during training.

Everything except :func:`ood_penalty` works on float64 numpy arrays.
"""
from __future__ import annotations

from dataclasses import asdict, dataclass

import numpy as np
import torch
from scipy.spatial.distance import pdist
from scipy.special import logsumexp
from scipy.stats import multivariate_normal

from .diffusion import NoiseSchedule, reconstruct_x0


@dataclass
class UncertaintyConfig:
    sigma: float = 0.1
    C1: float | None = None  # None -> sigma^2 * log M'
    zeta: float = 1.0

    def __post_init__(self):
        if not self.sigma > 0:
            raise ValueError("sigma must be > 0")
        if self.zeta < 0:
            raise ValueError("zeta must be >= 0")


@dataclass
class UncertaintyReport:
    d_sigma_sq: float
    d_min_sq: float
    closest_index: int
    lipschitz: float
    bound: float
    C2: float

    def to_dict(self):
        return asdict(self)


def _as_data(data) -> np.ndarray:
    data = np.asarray(data, dtype=np.float64)
    if data.ndim == 1:
        data = data[:, None]
    if data.shape[0] == 0:
        raise ValueError("empty-dataset: the state dataset has no points")
    return data


def half_sq_dists(query, data) -> np.ndarray:
    """0.5 * ||query - s_i||^2 for every data row (query may be a batch)."""
    data = _as_data(data)
    q = np.asarray(query, dtype=np.float64).reshape(-1, data.shape[1])
    diff = q[:, None, :] - data[None, :, :]
    return 0.5 * np.einsum("qmd,qmd->qm", diff, diff)


def _softmin(v: np.ndarray, sigma: float) -> np.ndarray:
    """-sigma^2 log sum_i exp(-v_i / sigma^2), shifted by the row minimum so no term overflows."""
    s2 = sigma * sigma
    vmin = v.min(axis=-1)
    rest = np.exp(-(v - vmin[..., None]) / s2).sum(axis=-1)
    return vmin - s2 * np.log(rest)


def smoothed_distance_sq(query, data, sigma: float, C1: float | None = None):
    """Smoothed squared distance to data; ``C1=None`` uses sigma^2 * log M' (always >= 0)."""
    if not sigma > 0:
        raise ValueError("sigma must be > 0")
    data = _as_data(data)
    v = half_sq_dists(query, data)
    if C1 is None:
        # shifted form keeps the d_min <= d_sigma <= d_min + sigma^2 log M' sandwich exact
        s2 = sigma * sigma
        vmin = v.min(axis=-1)
        mean = np.exp(-(v - vmin[..., None]) / s2).mean(axis=-1)
        out = vmin - s2 * np.log(mean)
    else:
        out = _softmin(v, sigma) + C1
    return float(out[0]) if np.ndim(query) <= 1 and out.size == 1 else out


def min_distance_sq(query, data):
    v = half_sq_dists(query, data)
    idx = np.argmin(v, axis=-1)
    vals = v[np.arange(len(v)), idx]
    if np.ndim(query) <= 1 and len(v) == 1:
        return float(vals[0]), int(idx[0])
    return vals, idx


def lemma1_constant(m: int, n: int, sigma: float) -> float:
    """sigma^2 (log M' + n/2 log(2 pi sigma)), with the (2 pi sigma)^n normalizer convention."""
    return sigma ** 2 * (np.log(m) + 0.5 * n * np.log(2 * np.pi * sigma))


def log_perturbed_density(query, data, sigma: float) -> np.ndarray:
    """log of the Gaussian-smoothed empirical density, built from scipy's Gaussian pdf.

    scipy normalizes with (2 pi sigma^2)^(n/2); the result is shifted to the
    (2 pi sigma)^(n/2) convention used by :func:`lemma1_constant`.
    """
    data = _as_data(data)
    m, n = data.shape
    q = np.asarray(query, dtype=np.float64).reshape(-1, n)
    comps = np.stack([multivariate_normal(mean=mu, cov=sigma ** 2 * np.eye(n)).logpdf(q).reshape(-1)
                      for mu in data], axis=-1)
    shift = 0.5 * n * (np.log(2 * np.pi * sigma ** 2) - np.log(2 * np.pi * sigma))
    return logsumexp(comps, axis=-1) - np.log(m) + shift


def verify_lemma1(data, sigma: float, n_queries: int, rng: np.random.Generator) -> float:
    """Max |-sigma^2 log q_sigma(s) - (d_sigma(s)^2 + C)| over random queries near the data."""
    data = _as_data(data)
    if n_queries == 0:
        return 0.0
    m, n = data.shape
    lo, hi = data.min(axis=0), data.max(axis=0)
    span = np.maximum(hi - lo, sigma)
    queries = rng.uniform(lo - 0.5 * span, hi + 0.5 * span, size=(n_queries, n))
    lhs = -sigma ** 2 * log_perturbed_density(queries, data, sigma)
    rhs = smoothed_distance_sq(queries, data, sigma, C1=0.0) + lemma1_constant(m, n, sigma)
    return float(np.max(np.abs(lhs - rhs)))


def softmin_sandwich_violations(queries, data, sigma: float, tol: float = 1e-12) -> int:
    """Count queries breaking d_min <= d_sigma <= d_min + sigma^2 log M'."""
    data = _as_data(data)
    d_sig = np.atleast_1d(smoothed_distance_sq(queries, data, sigma))
    d_min = np.atleast_1d(min_distance_sq(queries, data)[0])
    slack = sigma ** 2 * np.log(len(data))
    scale = tol * (1 + np.abs(d_min))
    bad = (d_sig < d_min - scale) | (d_sig > d_min + slack + scale)
    return int(bad.sum())


def estimate_lipschitz(points, values) -> float:
    """Largest pairwise finite slope |e_i - e_j| / ||s_i - s_j||, coincident points skipped."""
    pts = _as_data(points)
    vals = np.asarray(values, dtype=np.float64).reshape(-1)
    if len(pts) < 2:
        raise ValueError("fewer-than-two-distinct-points")
    dist = pdist(pts)
    dv = pdist(vals[:, None], metric="cityblock")
    ok = dist > 0
    if not ok.any():
        raise ValueError("fewer-than-two-distinct-points")
    return float(np.max(dv[ok] / dist[ok]))


def uncertainty_bound(query, data, sigma: float, lipschitz: float, e_at_closest: float,
                      C1: float | None = None) -> float:
    """e(s_c) + sqrt(2) L_e sqrt(d_sigma(s)^2 + C2), with C2 = sigma^2 log M' - C1."""
    return uncertainty_report(query, data, sigma, lipschitz, e_at_closest, C1).bound


def uncertainty_report(query, data, sigma, lipschitz, e_at_closest, C1=None) -> UncertaintyReport:
    if lipschitz < 0:
        raise ValueError("lipschitz must be >= 0")
    data = _as_data(data)
    log_m = np.log(len(data))
    c1 = sigma ** 2 * log_m if C1 is None else C1
    c2 = sigma ** 2 * log_m - c1
    d_sig = smoothed_distance_sq(query, data, sigma, C1)
    d_min, idx = min_distance_sq(query, data)
    radicand = d_sig + c2
    if radicand < 0:
        if radicand > -1e-12:
            radicand = 0.0
        else:
            raise ValueError(f"negative radicand {radicand:.3e}; C1 too large for this dataset")
    bound = e_at_closest + np.sqrt(2.0) * lipschitz * np.sqrt(radicand)
    return UncertaintyReport(float(d_sig), float(d_min), int(idx), float(lipschitz), float(bound), float(c2))


def certify_bound(error_fn, data, queries, sigma: float, C1: float | None = None) -> dict:
    """Brute-force check of the Lipschitz bound at every query point.

    ``L_e`` is estimated from the dataset alone; ``e(s_c)`` is the true error at
    each query's nearest data point.
    """
    data = _as_data(data)
    queries = _as_data(queries)
    e_data = error_fn(data).reshape(-1)
    lip = estimate_lipschitz(data, e_data)
    log_m = np.log(len(data))
    c1 = sigma ** 2 * log_m if C1 is None else C1
    d_sig = np.atleast_1d(smoothed_distance_sq(queries, data, sigma, C1))
    _, idx = min_distance_sq(queries, data)
    bound = e_data[idx] + np.sqrt(2.0) * lip * np.sqrt(np.maximum(d_sig + sigma ** 2 * log_m - c1, 0.0))
    e_q = error_fn(queries).reshape(-1)
    slack = bound - e_q
    return {"lipschitz": lip, "violations": int(np.sum(slack < -1e-12)),
            "min_slack": float(slack.min()), "n_queries": int(len(queries))}


# --- training-time penalty ------------------------------------------------

def ood_penalty(x0: torch.Tensor, x_k: torch.Tensor, eps_hat: torch.Tensor, k,
                schedule: NoiseSchedule, clip: float | None = None) -> torch.Tensor:
    """Batch mean of sum_{t>=1} ||s_t - s_hat_t||^2 with s_hat from one-shot reconstruction.

    Row 0 (the observed state) is excluded; gradients reach only ``eps_hat``.
    ``clip`` clamps s_hat to ``[-clip, clip]`` the way the sampler does; left at
    None the penalty is the exact ((1 - abar)/abar)-weighted noise error.
    """
    if not (x0.shape == x_k.shape == eps_hat.shape):
        raise ValueError("cache-shape-mismatch: x0, x_k and eps_hat must share a shape")
    x_hat = reconstruct_x0(x_k.detach(), eps_hat, k, schedule)
    if clip is not None:
        x_hat = x_hat.clamp(-clip, clip)
    return ((x0[:, 1:] - x_hat[:, 1:]) ** 2).sum(dim=(1, 2)).mean()


# --- self-check suite -----------------------------------------------------

def ood_identity_residual(x0, x_k, eps, eps_hat, k, schedule: NoiseSchedule) -> float:
    """|penalty - ((1 - abar_k)/abar_k) * restricted noise error|, relative to the larger side."""
    pen = ood_penalty(x0, x_k, eps_hat, k, schedule)
    ab = schedule.t("alpha_bar", x0.dtype)[torch.as_tensor(k).reshape(-1)].reshape(-1, 1, 1)
    ab = ab.expand(x0.shape[0], 1, 1)
    closed = (((1 - ab) / ab) * (eps[:, 1:] - eps_hat[:, 1:]) ** 2).sum(dim=(1, 2)).mean()
    pen, closed = float(pen.detach()), float(closed.detach())
    return abs(pen - closed) / max(abs(closed), 1.0)


def run_theory_suite(n_instances: int = 100, n_queries: int = 1000, sigma: float = 0.1,
                     seed: int = 0, bound_sigma: float = 0.1) -> dict:
    """Lemma, sandwich, small-sigma limit, bound certification and penalty identity.

    ``sigma`` drives the sandwich and limit checks.  The bound is certified at
    ``bound_sigma``: with an estimated Lipschitz constant it needs the
    sigma^2 log M' slack, which vanishes as sigma -> 0.
    ``n_queries = 0`` skips every query-driven check and returns an empty report.
    """
    from .diffusion import forward_diffuse, make_schedule

    rng = np.random.default_rng(seed)
    report: dict = {"n_queries": n_queries, "sigma": sigma, "bound_sigma": bound_sigma, "seed": seed,
                    "checks": {}}
    if n_queries == 0:
        report["ok"] = True
        return report
    checks = report["checks"]

    worst = 0.0
    for _ in range(n_instances):
        m, n = int(rng.integers(1, 65)), int(rng.integers(1, 17))
        sig = float(rng.uniform(0.05, 1.0))
        data = rng.normal(size=(m, n)) * rng.uniform(0.1, 2.0)
        worst = max(worst, verify_lemma1(data, sig, 10, rng))
    checks["lemma1"] = {"max_residual": worst, "instances": n_instances, "violations": int(worst > 1e-9)}

    data = rng.normal(size=(64, 4))
    queries = rng.normal(size=(n_queries, 4)) * 2.0
    checks["sandwich"] = {"violations": softmin_sandwich_violations(queries, data, sigma)}

    d_min = np.atleast_1d(min_distance_sq(queries, data)[0])
    gaps, bad = [], 0
    for sig in sorted({1e-1, 1e-2, 1e-3, 1e-6, sigma}, reverse=True):
        gap = np.abs(np.atleast_1d(smoothed_distance_sq(queries, data, sig)) - d_min)
        bad += int(np.sum(gap > sig ** 2 * np.log(len(data)) * (1 + 1e-9) + 1e-12 * (1 + d_min)))
        gaps.append(float(gap.max()))
    checks["sigma_limit"] = {"max_gap_by_sigma": gaps, "violations": bad}

    pts = np.sort(rng.uniform(0, 2 * np.pi, 50))[:, None]
    qs = rng.uniform(0, 2 * np.pi, (max(n_queries, 10_000), 1))
    cert = certify_bound(lambda s: np.abs(np.sin(s)), pts, qs, bound_sigma)
    checks["theorem1"] = cert

    sched = make_schedule(64)
    gen = torch.Generator().manual_seed(seed)
    worst = 0.0
    for _ in range(100):
        x0 = torch.randn(4, 6, 5, generator=gen, dtype=torch.float64)
        eps = torch.randn(x0.shape, generator=gen, dtype=torch.float64)
        k = torch.randint(1, 65, (4,), generator=gen)
        x_k = forward_diffuse(x0, k, eps, sched)
        eps_hat = eps + 0.1 * torch.randn(x0.shape, generator=gen, dtype=torch.float64)
        worst = max(worst, ood_identity_residual(x0, x_k, eps, eps_hat, k, sched))
    checks["ood_identity"] = {"max_residual": worst, "violations": int(worst > 1e-6)}

    report["ok"] = all(c["violations"] == 0 for c in checks.values())
    return report
