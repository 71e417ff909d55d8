"""Latent-space synthesis of preference embeddings and compositional pairing.

Also hosts the two latent baselines: noise added directly in embedding space,
and sampling from a per-sign diagonal Gaussian fitted to the embeddings.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .data import ConfigError, PairSet
from .numkit import DomainError, Rng, derive_seed
from .vae import DiagonalGaussian, VaeParams, decode, encode

ORIGINAL, SYNTHETIC = "original", "synthetic"
VARIANCE_FLOOR = 1e-8


def default_top_k(k_aug: int) -> int:
    """Smallest per-sign survivor count whose cross product covers ``k_aug`` pairs."""
    return max(1, math.ceil(math.sqrt(k_aug)) - 1)


@dataclass
class SynthesisConfig:
    sigma_noise2: float = 0.01
    candidates: int = 8
    top_k: int | None = None
    k_aug: int = 4
    seed: int = 0

    @property
    def survivors(self) -> int:
        return self.top_k if self.top_k is not None else default_top_k(self.k_aug)

    def validate(self) -> None:
        if not self.sigma_noise2 > 0:
            raise ConfigError("sigma_noise2: must be > 0")
        if self.k_aug < 2:
            raise ConfigError("k_aug: must be >= 2")
        if self.candidates < 1:
            raise ConfigError("candidates: must be >= 1")
        if not 1 <= self.survivors <= self.candidates:
            raise ConfigError(f"top_k: must be in [1, candidates={self.candidates}], got {self.survivors}")


@dataclass(frozen=True)
class SyntheticEmbedding:
    source_prompt_id: int
    sign: str
    vector: np.ndarray
    latent_log_density: float


@dataclass
class SynthPool:
    """Synthetic embeddings of one sign, grouped by their source prompt."""

    sign: str
    prompt_ids: np.ndarray
    vectors: np.ndarray
    log_density: np.ndarray

    def __len__(self) -> int:
        return len(self.prompt_ids)

    def __iter__(self):
        for i in range(len(self)):
            yield SyntheticEmbedding(int(self.prompt_ids[i]), self.sign, self.vectors[i], float(self.log_density[i]))

    @classmethod
    def from_items(cls, sign: str, items, dim: int) -> "SynthPool":
        items = list(items)
        if not items:
            return cls(sign, np.zeros(0, dtype=np.int64), np.zeros((0, dim)), np.zeros(0))
        return cls(
            sign,
            np.array([s.source_prompt_id for s in items], dtype=np.int64),
            np.stack([s.vector for s in items]),
            np.array([s.latent_log_density for s in items]),
        )

    def by_prompt(self) -> dict[int, np.ndarray]:
        groups: dict[int, list[int]] = {}
        for i, pid in enumerate(self.prompt_ids):
            groups.setdefault(int(pid), []).append(i)
        return {pid: self.vectors[idx] for pid, idx in groups.items()}


# ---------------------------------------------------------------------------
# Latent perturbation with top-k filtering
# ---------------------------------------------------------------------------

def select_top_k(q: DiagonalGaussian, candidates: np.ndarray, k: int) -> tuple[np.ndarray, np.ndarray]:
    """Indices and log-densities of the ``k`` most likely candidates under ``q``.

    Ties keep the earlier candidate.
    """
    logp = q.log_density(candidates)
    keep = np.argsort(-logp, kind="stable")[:k]
    return keep, logp


def _perturb_one(params: VaeParams, q: DiagonalGaussian, sign: str, cfg: SynthesisConfig, rng: Rng):
    z = q.mu + q.std * rng.normal(params.latent)
    eta = math.sqrt(cfg.sigma_noise2) * rng.normal_like((cfg.candidates, params.latent))
    cands = z + eta
    keep, logp = select_top_k(q, cands, cfg.survivors)
    return decode(params, cands[keep], sign), logp[keep]


def perturb_and_decode(params: VaeParams, e, sign: str, cfg: SynthesisConfig, rng: Rng, prompt_id: int = -1) -> list[SyntheticEmbedding]:
    """Perturb one embedding's latent sample and decode the ``top_k`` survivors."""
    cfg.validate()
    q = encode(params, np.asarray(e, dtype=np.float64), sign)
    vecs, logp = _perturb_one(params, q, sign, cfg, rng)
    return [SyntheticEmbedding(prompt_id, sign, v, float(lp)) for v, lp in zip(vecs, logp)]


def prompt_rng(seed: int, prompt_id: int) -> Rng:
    return Rng(derive_seed(seed, prompt_id))


def synthesize(params: VaeParams, pairs: PairSet, cfg: SynthesisConfig) -> tuple[SynthPool, SynthPool]:
    """Synthetic positive and negative pools for every pair.

    Each prompt draws from its own generator keyed by ``(seed, prompt_id)``;
    the positive side is drawn before the negative side.
    """
    cfg.validate()
    q_plus = encode(params, pairs.e_plus, "plus")
    q_minus = encode(params, pairs.e_minus, "minus")
    out = {"plus": [], "minus": []}
    for i, pid in enumerate(pairs.prompt_ids):
        rng = prompt_rng(cfg.seed, int(pid))
        for sign, q in (("plus", q_plus), ("minus", q_minus)):
            qi = DiagonalGaussian(q.mu[i], q.log_var[i])
            vecs, logp = _perturb_one(params, qi, sign, cfg, rng)
            out[sign].extend(SyntheticEmbedding(int(pid), sign, v, float(lp)) for v, lp in zip(vecs, logp))
    return (
        SynthPool.from_items("plus", out["plus"], pairs.dim),
        SynthPool.from_items("minus", out["minus"], pairs.dim),
    )


# ---------------------------------------------------------------------------
# Compositional pairing
# ---------------------------------------------------------------------------

def build_augmented_set(
    originals: PairSet, synth_plus: SynthPool, synth_minus: SynthPool, k_aug: int, rng: Rng
) -> PairSet:
    """Within-prompt cross product of (original + synthetic) positives and negatives.

    Every prompt contributes exactly ``k_aug`` distinct pairs: its original
    pair plus ``k_aug - 1`` others sampled without replacement.  The result
    carries ``provenance`` tags and a ``members`` array holding pool indices
    (0 is the original embedding, ``j >= 1`` the j-th synthetic one).
    """
    if k_aug < 1:
        raise ConfigError("k_aug: must be >= 1")
    plus_groups = synth_plus.by_prompt()
    minus_groups = synth_minus.by_prompt()
    d = originals.dim
    ids, ep, em, prov, members = [], [], [], [], []
    for i, pid in enumerate(originals.prompt_ids):
        pid = int(pid)
        pool_p = np.concatenate([originals.e_plus[i:i + 1], plus_groups.get(pid, np.zeros((0, d)))])
        pool_m = np.concatenate([originals.e_minus[i:i + 1], minus_groups.get(pid, np.zeros((0, d)))])
        total = len(pool_p) * len(pool_m)
        if total < k_aug:
            need = default_top_k(k_aug)
            raise ConfigError(
                f"prompt {pid}: cross product has {total} pairs, k_aug={k_aug} needs top_k >= {need} per sign"
            )
        combos = [(a, b) for a in range(len(pool_p)) for b in range(len(pool_m)) if (a, b) != (0, 0)]
        pick = rng.spawn(pid).choice(len(combos), k_aug - 1) if k_aug > 1 else []
        chosen = [(0, 0)] + [combos[j] for j in pick]
        for a, b in chosen:
            ids.append(pid)
            ep.append(pool_p[a])
            em.append(pool_m[b])
            prov.append((ORIGINAL if a == 0 else SYNTHETIC, ORIGINAL if b == 0 else SYNTHETIC))
            members.append((a, b))
    return PairSet(ids, np.stack(ep), np.stack(em), prov, np.asarray(members, dtype=np.int64))


def lens_augment(params: VaeParams, originals: PairSet, cfg: SynthesisConfig) -> PairSet:
    """Synthesize and pair: the full latent-space augmentation step."""
    sp, sm = synthesize(params, originals, cfg)
    return build_augmented_set(originals, sp, sm, cfg.k_aug, Rng(cfg.seed).spawn(0xA06))


# ---------------------------------------------------------------------------
# Baselines
# ---------------------------------------------------------------------------

def baseline_direct_perturbation(e, sigma2: float, rng: Rng) -> np.ndarray:
    """Gaussian noise added straight to the embedding, no VAE."""
    e = np.asarray(e, dtype=np.float64)
    if sigma2 < 0:
        raise DomainError("sigma2 must be >= 0")
    noise = rng.normal_like(e.shape)
    return e + math.sqrt(sigma2) * noise


@dataclass
class FittedGaussian:
    mean: np.ndarray
    var: np.ndarray

    def sample(self, rng: Rng, n: int) -> np.ndarray:
        return self.mean + np.sqrt(self.var) * rng.normal_like((n, self.mean.size))


def fit_gaussian(embeddings: np.ndarray) -> FittedGaussian:
    x = np.atleast_2d(np.asarray(embeddings, dtype=np.float64))
    if x.shape[0] < 2:
        raise DomainError(f"need at least 2 embeddings to fit a Gaussian, got {x.shape[0]}")
    return FittedGaussian(x.mean(axis=0), np.maximum(x.var(axis=0), VARIANCE_FLOOR))


def baseline_gaussian_sampling(pairs: PairSet, sign: str, rng: Rng, n: int | None = None) -> np.ndarray:
    """I.i.d. draws from a diagonal Gaussian fitted to one sign's embeddings."""
    e = pairs.e_plus if sign == "plus" else pairs.e_minus
    fit = fit_gaussian(e)
    return fit.sample(rng, len(pairs) if n is None else n)


def baseline_augment(originals: PairSet, method: str, cfg: SynthesisConfig) -> PairSet:
    """Augment with a latent baseline instead of the VAE, using the same pairing."""
    cfg.validate()
    t = cfg.survivors
    d = originals.dim
    pools = {}
    if method == "direct":
        for sign, e in (("plus", originals.e_plus), ("minus", originals.e_minus)):
            vecs = []
            for i, pid in enumerate(originals.prompt_ids):
                rng = prompt_rng(cfg.seed, int(pid)).spawn(0 if sign == "plus" else 1)
                vecs.append(baseline_direct_perturbation(np.repeat(e[i:i + 1], t, axis=0), cfg.sigma_noise2, rng))
            pools[sign] = SynthPool(sign, np.repeat(originals.prompt_ids, t), np.concatenate(vecs), np.zeros(t * len(originals)))
    elif method == "gaussian":
        for j, sign in enumerate(("plus", "minus")):
            rng = Rng(cfg.seed).spawn(0x6A55, j)
            vecs = baseline_gaussian_sampling(originals, sign, rng, t * len(originals))
            pools[sign] = SynthPool(sign, np.repeat(originals.prompt_ids, t), vecs.reshape(-1, d), np.zeros(t * len(originals)))
    else:
        raise ConfigError(f"unknown baseline {method!r}; expected 'direct' or 'gaussian'")
    return build_augmented_set(originals, pools["plus"], pools["minus"], cfg.k_aug, Rng(cfg.seed).spawn(0xA06))
