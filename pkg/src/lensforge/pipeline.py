"""End-to-end runs on the synthetic benchmark.

A run is keyed by one 64-bit seed. Everything random is derived from it
through named child streams, so each stage can be recomputed in isolation.
"""

from __future__ import annotations

import dataclasses
import json
import logging
import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

import numpy as np

from .data import (
    CandidateSets, ConfigError, GoldRewardSpec, PairSet, SyntheticBenchConfig,
    benchmark_mixing, sample_candidates, sample_pairs,
)
from .evaluation import BonResult, best_of_n, ordering_preservation
from .numkit import Rng, derive_seed
from .reward import RewardHead, RewardTrainConfig, estimation_error, train_reward
from .synthesis import SynthesisConfig, baseline_augment, lens_augment
from .theory import (
    TheoryReport, compute_N0, compute_t_delta, estimate_B0, estimate_C1, estimate_lipschitz,
    estimate_p, theorem1_margin_check, w1_checks,
)
from .vae import VaeParams, VaeTrainConfig, decode, encode, reconstruct, reconstruction_error, train_vae

log = logging.getLogger(__name__)

# child-stream keys under the run seed
K_GOLD, K_BENCH, K_VAE, K_SYNTH, K_REWARD, K_EVAL = 1, 2, 3, 4, 5, 6
# child-stream keys under the benchmark stream
B_MIX, B_TRAIN, B_TEST, B_HELDOUT, B_REFERENCE, B_SWEEP = 0, 1, 2, 3, 4, 5

REFERENCE_VALUES = {
    "C1": 0.24, "p": 0.26, "B0": 5.63, "N0": 65.59,
    "ordering_preservation": 0.939, "gap_original": 2.86, "gap_synthetic": 2.64, "eps_rec": 0.83,
}

BON_VARIANTS = ("original", "lens-2x", "lens-4x", "lens-8x", "gaussian-8x", "direct-4x", "synthetic-only", "mix")


@dataclass
class EvalConfig:
    n_bon: int = 16
    delta: float = 0.05
    sweep_Ns: list = field(default_factory=lambda: [100, 250, 500, 1000, 2500, 5000])
    zeta_Ns: list = field(default_factory=lambda: [100, 250, 500, 1000, 2000])
    # augmentation factor of the synthesis-bias sweep
    zeta_k: int = 2
    heldout_pairs: int = 5000
    reference_pairs: int = 20000
    high_noise_sigma2: float = 10.0
    lipschitz_samples: int = 2000
    w1_points: int = 256
    seeds: list = field(default_factory=lambda: [0, 1, 2])

    def validate(self) -> None:
        if self.n_bon < 2:
            raise ConfigError("eval.n_bon: must be >= 2")
        if not 0 < self.delta < 1:
            raise ConfigError("eval.delta: must lie in (0, 1)")
        if len(self.sweep_Ns) < 4:
            raise ConfigError(f"eval.sweep_Ns: need at least 4 sample sizes, got {len(self.sweep_Ns)}")
        if len(self.zeta_Ns) < 3:
            raise ConfigError(f"eval.zeta_Ns: need at least 3 sample sizes, got {len(self.zeta_Ns)}")
        if any(n < 2 for n in list(self.sweep_Ns) + list(self.zeta_Ns)):
            raise ConfigError("eval.sweep_Ns/zeta_Ns: sample sizes must be >= 2")
        if self.heldout_pairs < 1 or self.reference_pairs < 2:
            raise ConfigError("eval.heldout_pairs/reference_pairs: must be positive")
        if self.zeta_k < 2:
            raise ConfigError("eval.zeta_k: must be >= 2")
        if not self.seeds:
            raise ConfigError("eval.seeds: need at least one seed")


@dataclass
class RunConfig:
    seed: int = 0
    data: SyntheticBenchConfig = field(default_factory=SyntheticBenchConfig)
    vae: VaeTrainConfig = field(default_factory=VaeTrainConfig)
    synthesis: SynthesisConfig = field(default_factory=SynthesisConfig)
    reward: RewardTrainConfig = field(default_factory=RewardTrainConfig)
    eval: EvalConfig = field(default_factory=EvalConfig)
    output_dir: str = "runs"

    def validate(self) -> None:
        if not 0 <= self.seed < 2**64:
            raise ConfigError("seed: must be an unsigned 64-bit integer")
        self.data.validate()
        self.vae.validate()
        self.synthesis.validate()
        self.reward.validate()
        self.eval.validate()
        if self.eval.n_bon != self.data.candidates_per_prompt:
            raise ConfigError(
                f"eval.n_bon: {self.eval.n_bon} != data.candidates_per_prompt {self.data.candidates_per_prompt}"
            )

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, obj: dict) -> "RunConfig":
        sections = {"data": SyntheticBenchConfig, "vae": VaeTrainConfig, "synthesis": SynthesisConfig,
                    "reward": RewardTrainConfig, "eval": EvalConfig}
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = set(obj) - known
        if unknown:
            raise ConfigError(f"unknown config field(s): {sorted(unknown)}")
        kwargs = {}
        for key, value in obj.items():
            if key in sections:
                if not isinstance(value, dict):
                    raise ConfigError(f"{key}: expected an object")
                sub = sections[key]
                names = {f.name for f in dataclasses.fields(sub)}
                bad = set(value) - names
                if bad:
                    raise ConfigError(f"{key}: unknown field(s) {sorted(bad)}")
                kwargs[key] = sub(**value)
            else:
                kwargs[key] = value
        return cls(**kwargs)

    @classmethod
    def load(cls, path) -> "RunConfig":
        try:
            obj = json.loads(Path(path).read_text())
        except json.JSONDecodeError as exc:
            raise ConfigError(f"{path}: invalid JSON ({exc})") from exc
        return cls.from_dict(obj)

    def for_seed(self, seed: int) -> "RunConfig":
        """Copy with every sub-config seed derived from ``seed``."""
        return replace(
            self, seed=seed,
            vae=replace(self.vae, seed=derive_seed(seed, K_VAE)),
            synthesis=replace(self.synthesis, seed=derive_seed(seed, K_SYNTH)),
            reward=replace(self.reward, seed=derive_seed(seed, K_REWARD)),
        )


# ---------------------------------------------------------------------------
# Benchmark
# ---------------------------------------------------------------------------

@dataclass
class Bench:
    gold: GoldRewardSpec
    mixing: np.ndarray
    train: PairSet
    test: CandidateSets
    cfg: SyntheticBenchConfig
    rng: Rng

    def heldout(self, n: int) -> PairSet:
        first = self.cfg.num_prompts + self.cfg.num_test_prompts
        return sample_pairs(self.cfg, self.gold, self.mixing, n, self.rng.spawn(B_HELDOUT), first)

    def reference_pool(self, n: int) -> PairSet:
        first = self.cfg.num_prompts + self.cfg.num_test_prompts + 10**7
        return sample_pairs(self.cfg, self.gold, self.mixing, n, self.rng.spawn(B_REFERENCE), first)

    def sweep_pool(self, n: int) -> PairSet:
        """Nested training sets for N-sweeps: take prefixes of one pool."""
        first = self.cfg.num_prompts + self.cfg.num_test_prompts + 2 * 10**7
        return sample_pairs(self.cfg, self.gold, self.mixing, n, self.rng.spawn(B_SWEEP), first)


def make_gold(cfg: RunConfig) -> GoldRewardSpec:
    return GoldRewardSpec(seed=derive_seed(cfg.seed, K_GOLD), dim=cfg.data.dim, input_scale=cfg.data.embedding_scale)


def make_bench(cfg: RunConfig) -> Bench:
    cfg.data.validate()
    gold = make_gold(cfg)
    rng = Rng(cfg.seed).spawn(K_BENCH)
    mixing = benchmark_mixing(cfg.data, rng.spawn(B_MIX))
    train = sample_pairs(cfg.data, gold, mixing, cfg.data.num_prompts, rng.spawn(B_TRAIN))
    test = sample_candidates(cfg.data, mixing, cfg.data.num_test_prompts, rng.spawn(B_TEST), cfg.data.num_prompts)
    return Bench(gold, mixing, train, test, cfg.data, rng)


# ---------------------------------------------------------------------------
# Augmentation variants and best-of-N
# ---------------------------------------------------------------------------

def augmented_sets(cfg: RunConfig, vae: VaeParams, originals: PairSet) -> dict[str, PairSet]:
    syn = cfg.synthesis
    sets = {"original": originals}
    for k in (2, 4, 8):
        sets[f"lens-{k}x"] = lens_augment(vae, originals, replace(syn, k_aug=k, top_k=None))
    sets["gaussian-8x"] = baseline_augment(originals, "gaussian", replace(syn, k_aug=8, top_k=None))
    sets["direct-4x"] = baseline_augment(originals, "direct", replace(syn, k_aug=4, top_k=None))
    mix = sets["lens-4x"]
    synthetic = [i for i, t in enumerate(mix.provenance) if t != ("original", "original")]
    sets["synthetic-only"] = mix.subset(synthetic)
    sets["mix"] = mix
    return sets


def run_bon(cfg: RunConfig, variants=BON_VARIANTS) -> dict:
    """Train the VAE, build every augmented set, train one head per set, evaluate BoN."""
    cfg.validate()
    bench = make_bench(cfg)
    vae, vh = train_vae(bench.train, cfg.vae)
    sets = augmented_sets(cfg, vae, bench.train)
    rows = {}
    for name in variants:
        head, hist = train_reward(sets[name], cfg.reward)
        res = best_of_n(head, bench.test, bench.gold, Rng(cfg.seed).spawn(K_EVAL))
        rows[name] = {
            "bon": res.to_json(), "pairs": len(sets[name]), "epochs": len(hist.val_loss),
            "best_epoch": hist.best_epoch, "stopped_early": hist.stopped_early,
        }
        log.info("seed %d %-15s pairs %6d bon %.4f", cfg.seed, name, len(sets[name]), res.mean_gold_reward_of_selected)
    order = ordering_preservation(bench.gold, bench.train, sets["lens-4x"])
    high = replace(cfg.synthesis, sigma_noise2=cfg.eval.high_noise_sigma2, k_aug=4, top_k=None)
    order_high = ordering_preservation(bench.gold, bench.train, lens_augment(vae, bench.train, high))
    return {
        "seed": cfg.seed,
        "gold_digest": bench.gold.digest(),
        "vae_final_loss": vh.loss[-1],
        "vae_final_recon": vh.recon[-1],
        "variants": rows,
        "ordering": order.to_json(),
        "ordering_high_noise": order_high.to_json(),
    }


# ---------------------------------------------------------------------------
# Theory sweep
# ---------------------------------------------------------------------------

def run_theory_seed(cfg: RunConfig) -> dict:
    """Per-seed sweeps: eps_rec(N), zeta(N) for original and augmented training."""
    cfg.validate()
    ev = cfg.eval
    bench = make_bench(cfg)
    heldout = bench.heldout(ev.heldout_pairs)
    pool = bench.sweep_pool(max(max(ev.sweep_Ns), max(ev.zeta_Ns)))
    reference, _ = train_reward(bench.reference_pool(ev.reference_pairs), cfg.reward)
    vaes: dict[int, VaeParams] = {}

    def vae_for(n: int) -> VaeParams:
        if n not in vaes:
            vaes[n], _ = train_vae(pool.subset(np.arange(n)), cfg.vae)
        return vaes[n]

    eps = [(int(n), reconstruction_error(vae_for(n), heldout)) for n in ev.sweep_Ns]
    zeta = []
    for n in ev.zeta_Ns:
        originals = pool.subset(np.arange(n))
        head, _ = train_reward(originals, cfg.reward)
        aug = lens_augment(vae_for(n), originals, replace(cfg.synthesis, k_aug=ev.zeta_k, top_k=None))
        head_aug, _ = train_reward(aug, cfg.reward)
        zeta.append((int(n), estimation_error(head, heldout, reference), estimation_error(head_aug, heldout, reference)))
    log.info("seed %d eps %s zeta %s", cfg.seed, eps, zeta)
    return {"seed": cfg.seed, "eps_rec_curve": eps, "zeta_curve": zeta}


def run_margin_checks(cfg: RunConfig) -> dict:
    """Ordering, W1 and margin-bound checks on the default-size run of one seed."""
    ev = cfg.eval
    bench = make_bench(cfg)
    vae, _ = train_vae(bench.train, cfg.vae)
    syn = lens_augment(vae, bench.train, cfg.synthesis)
    order = ordering_preservation(bench.gold, bench.train, syn)

    m = min(ev.w1_points, len(bench.train))
    e = bench.train.e_plus[:m]
    w1 = w1_checks(e, reconstruct(vae, e, "plus"))

    # Lipschitz constants by finite-difference ratios; the gold reward plays r*
    rng = Rng(cfg.seed).spawn(K_EVAL, 1)
    t_delta = compute_t_delta(math.sqrt(cfg.synthesis.sigma_noise2), cfg.vae.latent, ev.delta)
    z = encode(vae, bench.train.e_plus, "plus").mu
    L_g = estimate_lipschitz(lambda x: decode(vae, x, "plus"), z, rng.spawn(1), t_delta, ev.lipschitz_samples)
    embeds = bench.train.embeddings()
    gold_fn = lambda x: np.asarray(gold_reward_batch(bench.gold, x))
    L_r = estimate_lipschitz(gold_fn, embeds, rng.spawn(2), 0.5, ev.lipschitz_samples)
    # eps_rec as a norm bound: the (1 - delta) quantile of ||g(mu(e)) - e||
    recon_norms = np.concatenate([
        np.linalg.norm(reconstruct(vae, bench.train.e_plus, "plus") - bench.train.e_plus, axis=1),
        np.linalg.norm(reconstruct(vae, bench.train.e_minus, "minus") - bench.train.e_minus, axis=1),
    ])
    eps_norm = float(np.quantile(recon_norms, 1 - ev.delta))
    violation = theorem1_margin_check(
        gold_fn, bench.train, syn, math.sqrt(cfg.synthesis.sigma_noise2), cfg.vae.latent, ev.delta,
        L_g, L_r, 1.0, eps_norm,
    )
    return {
        "seed": cfg.seed, "ordering": order.to_json(), "w1": w1.to_json(), "t_delta": t_delta,
        "L_g": L_g, "L_r": L_r, "alpha": 1.0, "eps_rec_norm": eps_norm, "theorem1_violation_fraction": violation,
    }


def gold_reward_batch(gold: GoldRewardSpec, x):
    from .data import gold_reward
    return gold_reward(gold, np.atleast_2d(x))


def _finite(x):
    return x if x is not None and math.isfinite(x) else None


def fit_theory(cfg: RunConfig, seed_rows: list[dict], margin: dict) -> TheoryReport:
    """Average the per-seed curves and fit p, C1, B0, N0."""
    ev = cfg.eval
    eps = [(n, float(np.mean([r["eps_rec_curve"][i][1] for r in seed_rows]))) for i, n in enumerate(ev.sweep_Ns)]
    zeta = [
        (n, float(np.mean([r["zeta_curve"][i][1] for r in seed_rows])),
         float(np.mean([r["zeta_curve"][i][2] for r in seed_rows])))
        for i, n in enumerate(ev.zeta_Ns)
    ]
    d = cfg.data.dim
    p = estimate_p([n for n, _ in eps], [v for _, v in eps])
    C1 = estimate_C1([z[0] for z in zeta], [z[1] for z in zeta], d, ev.delta)
    B0 = estimate_B0([z[0] for z in zeta], [z[2] for z in zeta], C1, p, d, ev.delta, ev.zeta_k)
    try:
        N0, status = compute_N0(C1, B0, p, d, ev.delta), "ok"
    except OverflowError as exc:
        N0, status = None, f"overflow: {exc}"
    except ArithmeticError as exc:
        N0, status = None, str(exc)
    except ValueError as exc:
        N0, status = None, str(exc)
    order = margin["ordering"]
    return TheoryReport(
        C1=C1, p=p, B0=B0, N0=N0, N0_status=status, t_delta=margin["t_delta"],
        eps_rec_curve=eps, zeta_curve=zeta,
        ordering_preservation=order["fraction"], gap_original=order["gap_original"],
        gap_synthetic=order["gap_synthetic"],
        w1_coupling_bound=margin["w1"]["coupling_bound"], w1_exact=margin["w1"]["exact"],
        theorem1_violation_fraction=margin["theorem1_violation_fraction"],
        constants={
            "L_g": margin["L_g"], "L_r": margin["L_r"], "alpha": margin["alpha"],
            "eps_rec_norm": margin["eps_rec_norm"], "delta": ev.delta, "d": d,
            "lipschitz_method": "max finite-difference ratio over nearby and random sampled pairs",
        },
        reference_values=dict(REFERENCE_VALUES),
    )


# ---------------------------------------------------------------------------
# Seed fan-out
# ---------------------------------------------------------------------------

def map_seeds(fn, cfg: RunConfig, seeds, jobs: int = 1) -> list:
    """Run ``fn(cfg.for_seed(s))`` per seed; results come back in seed order."""
    cfgs = [cfg.for_seed(int(s)) for s in seeds]
    if jobs <= 1 or len(cfgs) == 1:
        return [fn(c) for c in cfgs]
    with ProcessPoolExecutor(max_workers=jobs) as pool:
        return list(pool.map(fn, cfgs))
