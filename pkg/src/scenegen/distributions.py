"""Output distributions: densities, samplers and raw-parameter transforms.

Every mixture family is built from an unconstrained "raw" vector produced by a
network head.  ``*_logp_grad(raw, value)`` returns the log-density together
with its analytic gradient with respect to that raw vector; these are what the
training graph calls.  Raw layouts (``K`` components):

* von Mises mixture, ``4K``: logits | mean cos | mean sin | log kappa
* bivariate log-normal mixture, ``6K``: logits | mu_w | mu_l | log sigma_w | log sigma_l | atanh rho
* velocity mixture, ``6K - 5``: logits (component 0 is ``v = 0``) |
  mu_s | log sigma_s | dir cos | dir sin | log kappa   (each of the last five has ``K - 1`` entries)
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy.special import logsumexp

from .raster import RasterConfig

LOG_2PI = math.log(2.0 * math.pi)
TWO_PI = 2.0 * math.pi
_SERIES_CUTOFF = 15.0


class DegenerateMaskError(ValueError):
    """Masking removed every bin with positive probability."""


def softmax(z, axis=-1):
    z = np.asarray(z, dtype=np.float64)
    e = np.exp(z - z.max(axis=axis, keepdims=True))
    return e / e.sum(axis=axis, keepdims=True)


def log_softmax(z, axis=-1):
    z = np.asarray(z, dtype=np.float64)
    return z - logsumexp(z, axis=axis, keepdims=True)


# --- Bessel helpers ----------------------------------------------------------

def _series(k: np.ndarray, order: int) -> np.ndarray:
    """sum_m (k^2/4)^m / (m! (m+order)!) for k < 15."""
    t = 0.25 * k * k
    term = np.ones_like(k) / math.factorial(order)
    total = term.copy()
    for m in range(1, 80):
        term = term * t / (m * (m + order))
        total += term
    return total


def _asymptotic(k: np.ndarray, order: int) -> np.ndarray:
    """Bracketed factor of I_order(k) ~ e^k / sqrt(2 pi k) * S(k), for k >= 15."""
    mu = 4.0 * order * order
    term = np.ones_like(k)
    total = term.copy()
    for j in range(1, 30):
        term = term * ((2 * j - 1) ** 2 - mu) / (8.0 * j * k)
        total += term
    return total


def log_i0(kappa):
    """log of the modified Bessel function I0; kappa >= 0."""
    k = np.asarray(kappa, dtype=np.float64)
    out = np.empty_like(k)
    small = k < _SERIES_CUTOFF
    if small.any():
        out[small] = np.log(_series(k[small], 0))
    big = ~small
    if big.any():
        kb = k[big]
        out[big] = kb - 0.5 * np.log(TWO_PI * kb) + np.log(_asymptotic(kb, 0))
    return out if out.ndim else float(out)


def bessel_ratio(kappa):
    """I1(kappa) / I0(kappa), the derivative of log I0."""
    k = np.asarray(kappa, dtype=np.float64)
    out = np.empty_like(k)
    small = k < _SERIES_CUTOFF
    if small.any():
        ks = k[small]
        out[small] = 0.5 * ks * _series(ks, 1) / _series(ks, 0)
    big = ~small
    if big.any():
        kb = k[big]
        out[big] = _asymptotic(kb, 1) / _asymptotic(kb, 0)
    return out if out.ndim else float(out)


# --- von Mises ---------------------------------------------------------------

def von_mises_log_prob(theta, mu, kappa):
    kappa = np.asarray(kappa, dtype=np.float64)
    if np.any(kappa < 0):
        raise ValueError("concentration must be non-negative")
    lp = kappa * np.cos(np.asarray(theta) - np.asarray(mu)) - LOG_2PI - log_i0(kappa)
    return lp if np.ndim(lp) else float(lp)


def von_mises_sample(mu: float, kappa: float, rng: np.random.Generator, size=None):
    """Best & Fisher (1979) rejection sampler; results in ``[0, 2*pi)``."""
    if kappa < 0:
        raise ValueError("concentration must be non-negative")
    n = 1 if size is None else int(np.prod(size))
    if kappa < 1e-8:
        theta = rng.uniform(0.0, TWO_PI, n)
    elif kappa > 1e6:
        theta = mu + rng.standard_normal(n) / math.sqrt(kappa)
    else:
        tau = 1.0 + math.sqrt(1.0 + 4.0 * kappa * kappa)
        rho = (tau - math.sqrt(2.0 * tau)) / (2.0 * kappa)
        r = (1.0 + rho * rho) / (2.0 * rho)
        out = np.empty(n)
        filled = 0
        while filled < n:
            m = max(2 * (n - filled), 8)
            u1, u2, u3 = rng.random((3, m))
            z = np.cos(math.pi * u1)
            f = np.clip((1.0 + r * z) / (r + z), -1.0, 1.0)
            c = kappa * (r - f)
            with np.errstate(divide="ignore", invalid="ignore"):
                ok = (c * (2.0 - c) - u2 > 0) | (np.log(c / u2) + 1.0 - c >= 0)
            acc = np.sign(u3[ok] - 0.5) * np.arccos(f[ok])
            take = min(len(acc), n - filled)
            out[filled:filled + take] = acc[:take]
            filled += take
        theta = mu + out
    theta = np.mod(theta, TWO_PI)
    theta[theta >= TWO_PI] = 0.0
    return float(theta[0]) if size is None else theta.reshape(size)


def _vm_components(theta, cx, cy, log_kappa):
    """Per-component von Mises log-density and its partials w.r.t. (cx, cy, log kappa)."""
    n = np.sqrt(cx * cx + cy * cy)
    n = np.maximum(n, 1e-12)
    ux, uy = cx / n, cy / n
    ct, st = np.cos(theta), np.sin(theta)
    c = ct * ux + st * uy
    kappa = np.exp(log_kappa)
    lp = kappa * c - LOG_2PI - log_i0(kappa)
    d_cx = kappa * (ct - c * ux) / n
    d_cy = kappa * (st - c * uy) / n
    d_lk = kappa * (c - bessel_ratio(kappa))
    return lp, d_cx, d_cy, d_lk


def _mix(logits, comp_lp):
    """log sum_k softmax(logits)_k exp(comp_lp_k); returns (lp, responsibilities, weights)."""
    logw = log_softmax(logits)
    joint = logw + comp_lp
    lp = logsumexp(joint, axis=-1)
    resp = np.exp(joint - lp[..., None])
    return lp, resp, np.exp(logw)


def _split(raw, k, parts):
    raw = np.asarray(raw, dtype=np.float64)
    if raw.shape[-1] != parts * k:
        raise ValueError(f"expected {parts * k} raw values, got {raw.shape[-1]}")
    return [raw[..., i * k:(i + 1) * k] for i in range(parts)]


def von_mises_mixture_logp_grad(raw, theta, k: int):
    raw = np.asarray(raw, dtype=np.float64)
    logits, cx, cy, lk = _split(raw, k, 4)
    th = np.asarray(theta, dtype=np.float64)[..., None]
    comp, d_cx, d_cy, d_lk = _vm_components(th, cx, cy, lk)
    lp, resp, w = _mix(logits, comp)
    grad = np.concatenate([resp - w, resp * d_cx, resp * d_cy, resp * d_lk], axis=-1)
    return lp, grad


@dataclass(frozen=True)
class VonMisesMixture:
    weights: np.ndarray      # (..., K)
    loc: np.ndarray          # (..., K, 2) unit biternions
    log_kappa: np.ndarray    # (..., K)

    @classmethod
    def from_raw(cls, raw, k: int) -> "VonMisesMixture":
        logits, cx, cy, lk = _split(raw, k, 4)
        loc = np.stack([cx, cy], axis=-1)
        loc = loc / np.maximum(np.linalg.norm(loc, axis=-1, keepdims=True), 1e-12)
        return cls(softmax(logits), loc, lk)

    @classmethod
    def single(cls, mu: float, kappa: float) -> "VonMisesMixture":
        return cls(np.ones(1), np.array([[math.cos(mu), math.sin(mu)]]),
                   np.array([math.log(kappa) if kappa > 0 else -np.inf]))

    @property
    def means(self) -> np.ndarray:
        return np.mod(np.arctan2(self.loc[..., 1], self.loc[..., 0]), TWO_PI)

    @property
    def kappa(self) -> np.ndarray:
        return np.exp(self.log_kappa)

    def log_prob(self, theta):
        th = np.asarray(theta, dtype=np.float64)[..., None]
        comp = self.kappa * (np.cos(th) * self.loc[..., 0] + np.sin(th) * self.loc[..., 1]) \
            - LOG_2PI - log_i0(self.kappa)
        with np.errstate(divide="ignore"):
            lp = logsumexp(np.log(self.weights) + comp, axis=-1)
        return lp if np.ndim(lp) else float(lp)

    def sample(self, rng: np.random.Generator) -> float:
        k = sample_categorical(self.weights, rng)
        return von_mises_sample(float(self.means[k]), float(self.kappa[k]), rng)


# --- bivariate log-normal ----------------------------------------------------

def lognormal2_mixture_logp_grad(raw, w, l, k: int):
    w = np.asarray(w, dtype=np.float64)
    l = np.asarray(l, dtype=np.float64)
    if np.any(w <= 0) or np.any(l <= 0):
        raise ValueError("box sizes must be positive")
    logits, m1, m2, ls1, ls2, rr = _split(raw, k, 6)
    lw, ll = np.log(w)[..., None], np.log(l)[..., None]
    s1, s2 = np.exp(ls1), np.exp(ls2)
    rho = np.tanh(rr)
    om = 1.0 - rho * rho
    z1, z2 = (lw - m1) / s1, (ll - m2) / s2
    quad = z1 * z1 + z2 * z2 - 2.0 * rho * z1 * z2
    comp = -LOG_2PI - ls1 - ls2 - 0.5 * np.log(om) - 0.5 * quad / om - lw - ll
    lp, resp, wts = _mix(logits, comp)
    a1 = (z1 - rho * z2) / om
    a2 = (z2 - rho * z1) / om
    d_m1, d_m2 = a1 / s1, a2 / s2
    d_ls1, d_ls2 = -1.0 + z1 * a1, -1.0 + z2 * a2
    d_rr = rho + z1 * z2 - quad * rho / om
    grad = np.concatenate([resp - wts] + [resp * d for d in (d_m1, d_m2, d_ls1, d_ls2, d_rr)], axis=-1)
    return lp, grad


@dataclass(frozen=True)
class LogNormal2Mixture:
    weights: np.ndarray   # (..., K)
    means: np.ndarray     # (..., K, 2) means of (log w, log l)
    log_sigmas: np.ndarray  # (..., K, 2)
    rhos: np.ndarray      # (..., K)

    @classmethod
    def from_raw(cls, raw, k: int) -> "LogNormal2Mixture":
        logits, m1, m2, ls1, ls2, rr = _split(raw, k, 6)
        return cls(softmax(logits), np.stack([m1, m2], -1), np.stack([ls1, ls2], -1), np.tanh(rr))

    @property
    def sigmas(self) -> np.ndarray:
        return np.exp(self.log_sigmas)

    def covariance(self) -> np.ndarray:
        s = self.sigmas
        off = self.rhos * s[..., 0] * s[..., 1]
        return np.stack([np.stack([s[..., 0] ** 2, off], -1), np.stack([off, s[..., 1] ** 2], -1)], -2)

    def log_prob(self, w, l):
        w = np.asarray(w, dtype=np.float64)
        l = np.asarray(l, dtype=np.float64)
        if np.any(w <= 0) or np.any(l <= 0):
            raise ValueError("box sizes must be positive")
        lw, ll = np.log(w)[..., None], np.log(l)[..., None]
        s = self.sigmas
        z1 = (lw - self.means[..., 0]) / s[..., 0]
        z2 = (ll - self.means[..., 1]) / s[..., 1]
        om = 1.0 - self.rhos ** 2
        quad = (z1 * z1 + z2 * z2 - 2.0 * self.rhos * z1 * z2) / om
        comp = -LOG_2PI - self.log_sigmas.sum(-1) - 0.5 * np.log(om) - 0.5 * quad - lw - ll
        with np.errstate(divide="ignore"):
            lp = logsumexp(np.log(self.weights) + comp, axis=-1)
        return lp if np.ndim(lp) else float(lp)

    def sample(self, rng: np.random.Generator) -> tuple[float, float]:
        k = sample_categorical(self.weights, rng)
        z1, z2 = rng.standard_normal(2)
        s1, s2 = self.sigmas[k]
        rho = self.rhos[k]
        lw = self.means[k, 0] + s1 * z1
        ll = self.means[k, 1] + s2 * (rho * z1 + math.sqrt(max(1.0 - rho * rho, 0.0)) * z2)
        return float(math.exp(lw)), float(math.exp(ll))


# --- velocity ----------------------------------------------------------------

def velocity_raw_size(k: int) -> int:
    return 6 * k - 5


def _split_velocity(raw, k):
    raw = np.asarray(raw, dtype=np.float64)
    if k < 2:
        raise ValueError("the velocity mixture needs K >= 2")
    if raw.shape[-1] != velocity_raw_size(k):
        raise ValueError(f"expected {velocity_raw_size(k)} raw values, got {raw.shape[-1]}")
    logits = raw[..., :k]
    rest = raw[..., k:]
    j = k - 1
    return (logits,) + tuple(rest[..., i * j:(i + 1) * j] for i in range(5))


def velocity_logp_grad(raw, speed, direction, k: int):
    """Velocity log-density (mass at v=0, density in (speed, direction) otherwise)."""
    logits, mu, ls, cx, cy, lk = _split_velocity(raw, k)
    speed = np.asarray(speed, dtype=np.float64)
    if np.any(speed < 0):
        raise ValueError("speed must be non-negative")
    logw = log_softmax(logits)
    wts = np.exp(logw)
    moving = speed > 0
    s = np.where(moving, speed, 1.0)[..., None]
    z = (np.log(s) - mu) / np.exp(ls)
    sp_lp = -0.5 * LOG_2PI - ls - 0.5 * z * z - np.log(s)
    d_mu = z / np.exp(ls)
    d_ls = -1.0 + z * z
    dir_lp, d_cx, d_cy, d_lk = _vm_components(np.asarray(direction, dtype=np.float64)[..., None], cx, cy, lk)
    joint = logw[..., 1:] + sp_lp + dir_lp
    lp_move = logsumexp(joint, axis=-1)
    resp = np.exp(joint - lp_move[..., None])
    g_logits_move = np.concatenate([np.zeros_like(resp[..., :1]), resp], axis=-1) - wts
    onehot = np.zeros_like(wts)
    onehot[..., 0] = 1.0
    g_logits_stop = onehot - wts
    mv = moving[..., None]
    g_logits = np.where(mv, g_logits_move, g_logits_stop)
    parts = [np.where(mv, resp * d, 0.0) for d in (d_mu, d_ls, d_cx, d_cy, d_lk)]
    lp = np.where(moving, lp_move, logw[..., 0])
    return lp, np.concatenate([g_logits] + parts, axis=-1)


@dataclass(frozen=True)
class VelocityMixture:
    """Component 0 is exactly-zero velocity; components 1..K-1 are log-normal speed x von Mises direction."""
    weights: np.ndarray       # (K,)
    speed_mu: np.ndarray      # (K-1,)
    speed_log_sigma: np.ndarray
    direction: VonMisesMixture  # per-component directions, weights unused

    @classmethod
    def from_raw(cls, raw, k: int) -> "VelocityMixture":
        logits, mu, ls, cx, cy, lk = _split_velocity(raw, k)
        loc = np.stack([cx, cy], -1)
        loc = loc / np.maximum(np.linalg.norm(loc, axis=-1, keepdims=True), 1e-12)
        return cls(softmax(logits), mu, ls, VonMisesMixture(np.ones_like(mu), loc, lk))

    def log_prob(self, speed: float, direction: float) -> float:
        if speed < 0:
            raise ValueError("speed must be non-negative")
        with np.errstate(divide="ignore"):
            logw = np.log(self.weights)
        if speed == 0:
            return float(logw[0])
        sig = np.exp(self.speed_log_sigma)
        z = (math.log(speed) - self.speed_mu) / sig
        sp = -0.5 * LOG_2PI - self.speed_log_sigma - 0.5 * z * z - math.log(speed)
        d = self.direction
        dr = d.kappa * (math.cos(direction) * d.loc[:, 0] + math.sin(direction) * d.loc[:, 1]) \
            - LOG_2PI - log_i0(d.kappa)
        return float(logsumexp(logw[1:] + sp + dr))

    def sample(self, rng: np.random.Generator) -> tuple[float, float]:
        k = sample_categorical(self.weights, rng)
        if k == 0:
            return 0.0, 0.0
        z = rng.standard_normal()
        speed = float(math.exp(self.speed_mu[k - 1] + math.exp(self.speed_log_sigma[k - 1]) * z))
        omega = von_mises_sample(float(self.direction.means[k - 1]), float(self.direction.kappa[k - 1]), rng)
        if speed <= 0.0:  # exp underflow
            return 0.0, 0.0
        return speed, omega


# --- categorical and quantized location ---------------------------------------

def sample_categorical(probs, rng: np.random.Generator) -> int:
    cdf = np.cumsum(np.asarray(probs, dtype=np.float64).ravel())
    u = rng.random() * cdf[-1]
    return int(min(np.searchsorted(cdf, u, side="right"), len(cdf) - 1))


@dataclass(frozen=True)
class Categorical:
    probs: np.ndarray

    def __post_init__(self):
        p = np.asarray(self.probs, dtype=np.float64)
        if np.any(p < 0) or abs(p.sum() - 1.0) > 1e-6:
            raise ValueError("categorical probabilities must lie on the simplex")
        object.__setattr__(self, "probs", p / p.sum())

    @classmethod
    def from_logits(cls, logits) -> "Categorical":
        return cls(softmax(logits))

    def log_prob(self, i: int) -> float:
        with np.errstate(divide="ignore"):
            return float(np.log(self.probs[i]))

    def sample(self, rng: np.random.Generator) -> int:
        return sample_categorical(self.probs, rng)


@dataclass(frozen=True)
class QuantizedLocation:
    """Categorical over raster bins with a uniform density inside each bin."""
    probs: np.ndarray  # (H, W)
    cfg: RasterConfig

    def __post_init__(self):
        p = np.asarray(self.probs, dtype=np.float64)
        if p.shape != self.cfg.shape:
            raise ValueError(f"grid shape {p.shape} does not match raster {self.cfg.shape}")
        if np.any(p < 0) or abs(p.sum() - 1.0) > 1e-6:
            raise ValueError("location grid must lie on the simplex")
        object.__setattr__(self, "probs", p / p.sum())

    @classmethod
    def from_logits(cls, logits, cfg: RasterConfig) -> "QuantizedLocation":
        return cls(softmax(np.asarray(logits).ravel()).reshape(cfg.shape), cfg)

    def bin_of(self, x: float, y: float) -> tuple[int, int]:
        r, c = self.cfg.to_bin(x, y)
        if not (0 <= r < self.cfg.size and 0 <= c < self.cfg.size):
            raise ValueError(f"({x}, {y}) lies outside the region")
        return r, c

    def bin_log_prob(self, r: int, c: int) -> float:
        with np.errstate(divide="ignore"):
            return float(np.log(self.probs[r, c]))

    def log_prob(self, x: float, y: float) -> float:
        r, c = self.bin_of(x, y)
        return self.bin_log_prob(r, c) - 2.0 * math.log(self.cfg.resolution_m)

    def sample_bin(self, rng: np.random.Generator) -> tuple[int, int]:
        return divmod(sample_categorical(self.probs, rng), self.cfg.size)

    def sample_in_bin(self, r: int, c: int, rng: np.random.Generator,
                      x_min: float | None = None, y_min: float | None = None) -> tuple[float, float]:
        """Uniform point in bin ``(r, c)``, optionally restricted to ``x >= x_min`` / ``y >= y_min``."""
        res = self.cfg.resolution_m
        x0, y0 = self.cfg.bin_lower(r, c)
        lo_x = x0 if x_min is None else min(max(x0, x_min), x0 + res)
        lo_y = y0 if y_min is None else min(max(y0, y_min), y0 + res)
        u, v = rng.random(2)
        x = min(lo_x + u * (x0 + res - lo_x), math.nextafter(x0 + res, -math.inf))
        y = min(lo_y + v * (y0 + res - lo_y), math.nextafter(y0 + res, -math.inf))
        return float(x), float(y)

    def sample(self, rng: np.random.Generator) -> tuple[float, float]:
        r, c = self.sample_bin(rng)
        return self.sample_in_bin(r, c, rng)


def mask_and_renormalize(p: QuantizedLocation, allowed) -> QuantizedLocation:
    allowed = np.asarray(allowed, dtype=bool)
    if allowed.shape != p.probs.shape:
        raise ValueError("mask shape does not match the location grid")
    kept = np.where(allowed, p.probs, 0.0)
    total = kept.sum()
    if not total > 0:
        raise DegenerateMaskError("mask removes all probability mass")
    return QuantizedLocation(kept / total, p.cfg)
