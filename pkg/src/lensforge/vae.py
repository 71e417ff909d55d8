"""VAE over preference embeddings with a positive/negative divergence term.

The encoder is a ReLU trunk followed by a sign-specific head producing
``(mu, log_var)``; the decoder is a two-layer ReLU MLP.  Which blocks are
shared between the positive and negative paths is controlled by ``sharing``:

* ``"shared-trunk"`` (default): trunk and decoder shared, heads separate
* ``"separate"``: nothing shared
* ``"fully-shared"``: trunk, head and decoder all shared

All gradients are derived by hand and checked against finite differences
in the test suite.
"""

from __future__ import annotations

import json
import logging
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .data import ConfigError, FormatError, PairSet
from .numkit import Adam, NumericError, Rng, ShapeError

log = logging.getLogger(__name__)

SIGNS = ("plus", "minus")
SHARING_MODES = ("shared-trunk", "separate", "fully-shared")
LOG_VAR_MIN, LOG_VAR_MAX = -10.0, 10.0
W2_SMOOTHING = 1e-12


@dataclass
class DiagonalGaussian:
    mu: np.ndarray
    log_var: np.ndarray

    @property
    def std(self) -> np.ndarray:
        return np.exp(0.5 * self.log_var)

    @property
    def var(self) -> np.ndarray:
        return np.exp(self.log_var)

    def log_density(self, z: np.ndarray) -> np.ndarray:
        """Log-density of ``z`` (last axis is the latent dimension)."""
        k = self.mu.shape[-1]
        quad = np.sum((z - self.mu) ** 2 / self.var, axis=-1)
        return -0.5 * (quad + np.sum(self.log_var, axis=-1) + k * math.log(2.0 * math.pi))


@dataclass
class VaeTrainConfig:
    epochs: int = 100
    batch: int = 128
    lr: float = 1e-3
    beta: float = 1.0
    gamma: float = 0.1
    seed: int = 0
    latent: int = 16
    hidden: int = 64
    sharing: str = "shared-trunk"

    def validate(self) -> None:
        if self.beta < 0:
            raise ConfigError("beta: must be >= 0")
        if self.gamma < 0:
            raise ConfigError("gamma: must be >= 0")
        if self.batch < 1:
            raise ConfigError("batch: must be >= 1")
        if self.epochs < 1:
            raise ConfigError("epochs: must be >= 1")
        if self.lr <= 0:
            raise ConfigError("lr: must be > 0")
        if self.sharing not in SHARING_MODES:
            raise ConfigError(f"sharing: must be one of {SHARING_MODES}")


@dataclass
class VaeParams:
    dim: int
    latent: int = 16
    hidden: int = 64
    sharing: str = "shared-trunk"
    weights: dict[str, np.ndarray] = field(default_factory=dict)

    def trunk(self, sign: str) -> str:
        return f"trunk_{sign}" if self.sharing == "separate" else "trunk"

    def head(self, sign: str) -> str:
        return "head" if self.sharing == "fully-shared" else f"head_{sign}"

    def decoder(self, sign: str) -> str:
        return f"dec_{sign}" if self.sharing == "separate" else "dec"

    @classmethod
    def init(cls, dim: int, rng: Rng, latent: int = 16, hidden: int = 64, sharing: str = "shared-trunk") -> "VaeParams":
        if sharing not in SHARING_MODES:
            raise ConfigError(f"sharing: must be one of {SHARING_MODES}")
        p = cls(dim, latent, hidden, sharing)

        # same ranges as torch.nn.Linear's default init
        def dense(fan_in, fan_out):
            bound = 1.0 / math.sqrt(fan_in)
            w = (2.0 * rng.uniform(fan_in * fan_out) - 1.0) * bound
            b = (2.0 * rng.uniform(fan_out) - 1.0) * bound
            return w.reshape(fan_in, fan_out), b

        for name in sorted({p.trunk(s) for s in SIGNS}):
            p.weights[f"{name}.w"], p.weights[f"{name}.b"] = dense(dim, hidden)
        for name in sorted({p.head(s) for s in SIGNS}):
            p.weights[f"{name}.w"], p.weights[f"{name}.b"] = dense(hidden, 2 * latent)
        for name in sorted({p.decoder(s) for s in SIGNS}):
            p.weights[f"{name}.w1"], p.weights[f"{name}.b1"] = dense(latent, hidden)
            p.weights[f"{name}.w2"], p.weights[f"{name}.b2"] = dense(hidden, dim)
        return p

    def names(self) -> list[str]:
        return sorted(self.weights)

    def vector(self) -> np.ndarray:
        return np.concatenate([self.weights[k].ravel() for k in self.names()])

    def with_vector(self, v: np.ndarray) -> "VaeParams":
        out = VaeParams(self.dim, self.latent, self.hidden, self.sharing)
        i = 0
        for k in self.names():
            w = self.weights[k]
            out.weights[k] = np.array(v[i:i + w.size]).reshape(w.shape)
            i += w.size
        return out

    def copy(self) -> "VaeParams":
        return VaeParams(self.dim, self.latent, self.hidden, self.sharing, {k: w.copy() for k, w in self.weights.items()})

    def num_parameters(self) -> int:
        return sum(w.size for w in self.weights.values())


def grads_vector(params: VaeParams, grads: dict[str, np.ndarray]) -> np.ndarray:
    return np.concatenate([grads.get(k, np.zeros_like(params.weights[k])).ravel() for k in params.names()])


# ---------------------------------------------------------------------------
# Forward / backward pieces
# ---------------------------------------------------------------------------

def _check_sign(sign: str) -> None:
    if sign not in SIGNS:
        raise ValueError(f"sign must be 'plus' or 'minus', got {sign!r}")


def _as_batch(params: VaeParams, e) -> tuple[np.ndarray, bool]:
    e = np.asarray(e, dtype=np.float64)
    single = e.ndim == 1
    e = np.atleast_2d(e)
    if e.shape[1] != params.dim:
        raise ShapeError(f"VAE expects dim {params.dim}, got {e.shape[1]}")
    return e, single


def _encode(params: VaeParams, e: np.ndarray, sign: str):
    w = params.weights
    t, h = params.trunk(sign), params.head(sign)
    pre = e @ w[f"{t}.w"] + w[f"{t}.b"]
    act = np.maximum(pre, 0.0)
    out = act @ w[f"{h}.w"] + w[f"{h}.b"]
    mu = out[:, : params.latent]
    raw = out[:, params.latent:]
    log_var = np.clip(raw, LOG_VAR_MIN, LOG_VAR_MAX)
    return mu, log_var, (e, pre, act, raw)


def _encode_backward(params: VaeParams, sign: str, cache, d_mu, d_log_var, grads) -> None:
    e, pre, act, raw = cache
    w = params.weights
    t, h = params.trunk(sign), params.head(sign)
    d_raw = d_log_var * ((raw >= LOG_VAR_MIN) & (raw <= LOG_VAR_MAX))
    d_out = np.concatenate([d_mu, d_raw], axis=1)
    _acc(grads, f"{h}.w", act.T @ d_out)
    _acc(grads, f"{h}.b", d_out.sum(axis=0))
    d_pre = (d_out @ w[f"{h}.w"].T) * (pre > 0)
    _acc(grads, f"{t}.w", e.T @ d_pre)
    _acc(grads, f"{t}.b", d_pre.sum(axis=0))


def _decode(params: VaeParams, z: np.ndarray, sign: str):
    w = params.weights
    g = params.decoder(sign)
    pre = z @ w[f"{g}.w1"] + w[f"{g}.b1"]
    act = np.maximum(pre, 0.0)
    return act @ w[f"{g}.w2"] + w[f"{g}.b2"], (z, pre, act)


def _decode_backward(params: VaeParams, sign: str, cache, d_x, grads) -> np.ndarray:
    z, pre, act = cache
    w = params.weights
    g = params.decoder(sign)
    _acc(grads, f"{g}.w2", act.T @ d_x)
    _acc(grads, f"{g}.b2", d_x.sum(axis=0))
    d_pre = (d_x @ w[f"{g}.w2"].T) * (pre > 0)
    _acc(grads, f"{g}.w1", z.T @ d_pre)
    _acc(grads, f"{g}.b1", d_pre.sum(axis=0))
    return d_pre @ w[f"{g}.w1"].T


def _acc(grads: dict, key: str, g: np.ndarray) -> None:
    if key in grads:
        grads[key] = grads[key] + g
    else:
        grads[key] = g


# ---------------------------------------------------------------------------
# Public operations
# ---------------------------------------------------------------------------

def encode(params: VaeParams, e, sign: str) -> DiagonalGaussian:
    _check_sign(sign)
    batch, single = _as_batch(params, e)
    mu, log_var, _ = _encode(params, batch, sign)
    if single:
        return DiagonalGaussian(mu[0], log_var[0])
    return DiagonalGaussian(mu, log_var)


def decode(params: VaeParams, z, sign: str = "plus") -> np.ndarray:
    _check_sign(sign)
    z = np.asarray(z, dtype=np.float64)
    single = z.ndim == 1
    x, _ = _decode(params, np.atleast_2d(z), sign)
    return x[0] if single else x


def reparameterize(q: DiagonalGaussian, rng: Rng) -> np.ndarray:
    eps = rng.normal_like(np.shape(q.mu))
    return q.mu + q.std * eps


def kl_to_standard_normal(q: DiagonalGaussian) -> np.ndarray | float:
    """KL(q || N(0, I)), summed over the latent axis."""
    kl = 0.5 * np.sum(q.mu ** 2 + np.exp(q.log_var) - 1.0 - q.log_var, axis=-1)
    return float(kl) if np.ndim(kl) == 0 else kl


def w2_diag_gaussians(q1: DiagonalGaussian, q2: DiagonalGaussian) -> np.ndarray | float:
    """2-Wasserstein distance between diagonal Gaussians (no smoothing)."""
    if np.shape(q1.mu) != np.shape(q2.mu):
        raise ShapeError(f"posterior shapes differ: {np.shape(q1.mu)} vs {np.shape(q2.mu)}")
    sq = np.sum((q1.mu - q2.mu) ** 2, axis=-1) + np.sum((q1.std - q2.std) ** 2, axis=-1)
    w = np.sqrt(sq)
    return float(w) if np.ndim(w) == 0 else w


def _branch(params: VaeParams, e: np.ndarray, sign: str, eps: np.ndarray, beta: float, weight: float, grads):
    """Forward + backward of the per-sample VAE loss, scaled by ``weight``.

    Returns (recon, kl, mu, log_var, backprop) where ``backprop(d_mu, d_lv)``
    pushes extra posterior gradients (from the divergence term) through the
    encoder together with this branch's own gradient.
    """
    mu, log_var, enc_cache = _encode(params, e, sign)
    std = np.exp(0.5 * log_var)
    z = mu + std * eps
    x, dec_cache = _decode(params, z, sign)
    diff = x - e
    recon = np.sum(diff ** 2, axis=1)
    kl = 0.5 * np.sum(mu ** 2 + np.exp(log_var) - 1.0 - log_var, axis=1)

    d_x = (2.0 * weight) * diff
    d_z = _decode_backward(params, sign, dec_cache, d_x, grads)
    d_mu = d_z + beta * weight * mu
    d_lv = d_z * eps * 0.5 * std + beta * weight * 0.5 * (np.exp(log_var) - 1.0)

    def backprop(extra_mu=None, extra_lv=None):
        dm = d_mu if extra_mu is None else d_mu + extra_mu
        dl = d_lv if extra_lv is None else d_lv + extra_lv
        _encode_backward(params, sign, enc_cache, dm, dl, grads)

    return recon, kl, mu, log_var, backprop


def _check_finite(name: str, value: float) -> None:
    if not math.isfinite(value):
        raise NumericError(f"non-finite {name} term in VAE loss")


def vae_loss(params: VaeParams, e, sign: str, rng: Rng, beta: float):
    """Mean over rows of ||e - decode(z)||^2 + beta * KL, with gradients.

    Returns ``(loss, grads, terms)``.
    """
    _check_sign(sign)
    batch, _ = _as_batch(params, e)
    n = batch.shape[0]
    eps = rng.normal_like((n, params.latent))
    grads: dict[str, np.ndarray] = {}
    recon, kl, _, _, backprop = _branch(params, batch, sign, eps, beta, 1.0 / n, grads)
    backprop()
    r, k = float(recon.mean()), float(kl.mean())
    _check_finite("reconstruction", r)
    _check_finite("KL", k)
    return r + beta * k, grads, {"recon": r, "kl": k}


def total_loss(params: VaeParams, e_plus, e_minus, rng: Rng, beta: float, gamma: float):
    """Batch mean of VAE(e+) + VAE(e-) minus gamma times the mean paired W2.

    Noise for the positive branch is drawn before the negative branch.
    Returns ``(loss, grads, terms)``.
    """
    ep, _ = _as_batch(params, e_plus)
    em, _ = _as_batch(params, e_minus)
    if ep.shape != em.shape:
        raise ShapeError("positive and negative batches differ in shape")
    n = ep.shape[0]
    if n == 0:
        raise ValueError("empty batch")
    eps_p = rng.normal_like((n, params.latent))
    eps_m = rng.normal_like((n, params.latent))
    grads: dict[str, np.ndarray] = {}
    w = 1.0 / n
    rec_p, kl_p, mu_p, lv_p, back_p = _branch(params, ep, "plus", eps_p, beta, w, grads)
    rec_m, kl_m, mu_m, lv_m, back_m = _branch(params, em, "minus", eps_m, beta, w, grads)

    s_p, s_m = np.exp(0.5 * lv_p), np.exp(0.5 * lv_m)
    dmu = mu_p - mu_m
    ds = s_p - s_m
    w2 = np.sqrt(np.sum(dmu ** 2, axis=1) + np.sum(ds ** 2, axis=1) + W2_SMOOTHING)
    if gamma != 0.0:
        coef = (-gamma * w / w2)[:, None]
        back_p(coef * dmu, coef * ds * 0.5 * s_p)
        back_m(-coef * dmu, -coef * ds * 0.5 * s_m)
    else:
        back_p()
        back_m()

    recon = float(np.mean(rec_p + rec_m))
    kl = float(np.mean(kl_p + kl_m))
    w2_mean = float(np.mean(w2))
    _check_finite("reconstruction", recon)
    _check_finite("KL", kl)
    _check_finite("divergence", w2_mean)
    loss = recon + beta * kl - gamma * w2_mean
    return loss, grads, {"recon": recon, "kl": kl, "w2": w2_mean}


# ---------------------------------------------------------------------------
# Training and evaluation
# ---------------------------------------------------------------------------

@dataclass
class VaeHistory:
    loss: list[float] = field(default_factory=list)
    recon: list[float] = field(default_factory=list)
    kl: list[float] = field(default_factory=list)
    w2: list[float] = field(default_factory=list)
    heldout_recon: float | None = None


def train_vae(pairs: PairSet, cfg: VaeTrainConfig, heldout: PairSet | None = None) -> tuple[VaeParams, VaeHistory]:
    cfg.validate()
    if len(pairs) < 1:
        raise ValueError("train_vae needs at least one pair")
    root = Rng(cfg.seed)
    params = VaeParams.init(pairs.dim, root.spawn(1), cfg.latent, cfg.hidden, cfg.sharing)
    shuffle_rng, noise_rng = root.spawn(2), root.spawn(3)
    opt = Adam(lr=cfg.lr)
    hist = VaeHistory()
    n = len(pairs)
    for epoch in range(cfg.epochs):
        order = shuffle_rng.permutation(n)
        sums = np.zeros(4)
        for start in range(0, n, cfg.batch):
            idx = order[start:start + cfg.batch]
            try:
                loss, grads, terms = total_loss(
                    params, pairs.e_plus[idx], pairs.e_minus[idx], noise_rng, cfg.beta, cfg.gamma
                )
            except NumericError as exc:
                raise NumericError(f"VAE training diverged at epoch {epoch}: {exc}") from exc
            opt.step(params.weights, grads)
            sums += len(idx) * np.array([loss, terms["recon"], terms["kl"], terms["w2"]])
        sums /= n
        hist.loss.append(float(sums[0]))
        hist.recon.append(float(sums[1]))
        hist.kl.append(float(sums[2]))
        hist.w2.append(float(sums[3]))
        log.debug("vae epoch %d loss %.5f recon %.5f kl %.5f w2 %.5f", epoch, *sums)
    if heldout is not None:
        hist.heldout_recon = reconstruction_error(params, heldout)
    return params, hist


def reconstruct(params: VaeParams, e, sign: str) -> np.ndarray:
    """Decode the posterior mean (deterministic reconstruction)."""
    q = encode(params, e, sign)
    return decode(params, q.mu, sign)


def reconstruction_error(params: VaeParams, pairs: PairSet) -> float:
    """Mean over all embeddings of squared L2 distance to the mean reconstruction."""
    errs = []
    for sign, e in (("plus", pairs.e_plus), ("minus", pairs.e_minus)):
        errs.append(np.sum((reconstruct(params, e, sign) - e) ** 2, axis=1))
    return float(np.mean(np.concatenate(errs)))


def mean_posterior_separation(params: VaeParams, pairs: PairSet) -> float:
    qp = encode(params, pairs.e_plus, "plus")
    qm = encode(params, pairs.e_minus, "minus")
    return float(np.mean(w2_diag_gaussians(qp, qm)))


# ---------------------------------------------------------------------------
# Persistence: JSON header + f32le blob
# ---------------------------------------------------------------------------

def save_params(params: VaeParams, path, extra: dict | None = None) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    names = params.names()
    header = {
        "kind": "vae",
        "dim": params.dim,
        "latent": params.latent,
        "hidden": params.hidden,
        "sharing": params.sharing,
        "tensors": [{"name": k, "shape": list(params.weights[k].shape)} for k in names],
        **(extra or {}),
    }
    path.with_suffix(".json").write_text(json.dumps(header, sort_keys=True) + "\n")
    path.with_suffix(".bin").write_bytes(params.vector().astype("<f4").tobytes())


def load_params(path) -> VaeParams:
    path = Path(path)
    header = json.loads(path.with_suffix(".json").read_text())
    if header.get("kind") != "vae":
        raise FormatError(f"{path} is not a VAE checkpoint")
    blob = np.frombuffer(path.with_suffix(".bin").read_bytes(), dtype="<f4").astype(np.float64)
    params = VaeParams(header["dim"], header["latent"], header["hidden"], header["sharing"])
    i = 0
    for t in header["tensors"]:
        size = int(np.prod(t["shape"]))
        params.weights[t["name"]] = blob[i:i + size].reshape(t["shape"]).copy()
        i += size
    if i != blob.size:
        raise FormatError(f"VAE blob has {blob.size} floats, header describes {i}")
    return params


def config_dict(cfg: VaeTrainConfig) -> dict:
    return asdict(cfg)
