"""Best-of-N evaluation against the gold reward and ordering-preservation stats."""

from __future__ import annotations

from dataclasses import asdict, dataclass
from typing import Callable

import numpy as np

from .data import CandidateSets, GoldRewardSpec, PairSet, gold_reward
from .numkit import Rng


@dataclass
class BonResult:
    mean_gold_reward_of_selected: float
    random_pick_baseline: float
    oracle_ceiling: float
    min_candidate_mean: float
    n: int
    prompts: int

    def to_json(self) -> dict:
        return asdict(self)


def best_of_n(scorer: Callable[[np.ndarray], np.ndarray], test_sets: CandidateSets, gold: GoldRewardSpec, rng: Rng | None = None) -> BonResult:
    """Per prompt, pick the candidate the scorer ranks highest and score it with gold.

    ``scorer`` maps an array of shape (..., d) to scores of shape (...); a
    ``RewardHead`` or ``functools.partial(gold_reward, gold)`` both qualify.
    Ties resolve to the first candidate.
    """
    cands = test_sets.candidates
    if cands.shape[0] == 0:
        raise ValueError("best_of_n needs at least one test prompt")
    if cands.shape[1] < 2:
        raise ValueError("best_of_n needs at least 2 candidates per prompt")
    m, n, d = cands.shape
    scores = np.asarray(scorer(cands.reshape(-1, d)), dtype=np.float64).reshape(m, n)
    g = np.asarray(gold_reward(gold, cands.reshape(-1, d))).reshape(m, n)
    rows = np.arange(m)
    pick = np.argmax(scores, axis=1)
    rng = rng if rng is not None else Rng(0)
    rand = rng.integers(n, m)
    return BonResult(
        mean_gold_reward_of_selected=float(g[rows, pick].mean()),
        random_pick_baseline=float(g[rows, rand].mean()),
        oracle_ceiling=float(g.max(axis=1).mean()),
        min_candidate_mean=float(g.min(axis=1).mean()),
        n=n,
        prompts=m,
    )


@dataclass
class OrderingStats:
    fraction: float
    fraction_fully_synthetic: float
    gap_original: float
    gap_synthetic: float
    synthetic_pairs: int

    def to_json(self) -> dict:
        return asdict(self)


def ordering_preservation(gold: GoldRewardSpec, originals: PairSet, synth_pairs: PairSet) -> OrderingStats:
    """Share of synthetic pairs whose gold ordering matches their label.

    A pair counts as synthetic when either side came from synthesis (per its
    provenance tags); pairs without provenance are all treated as synthetic.
    ``fraction_fully_synthetic`` restricts to pairs where both sides are.
    """
    gap_orig = gold_reward(gold, originals.e_plus) - gold_reward(gold, originals.e_minus)
    gaps = gold_reward(gold, synth_pairs.e_plus) - gold_reward(gold, synth_pairs.e_minus)
    if synth_pairs.provenance is None:
        any_syn = np.ones(len(synth_pairs), dtype=bool)
        both_syn = any_syn
    else:
        any_syn = np.array([t != ("original", "original") for t in synth_pairs.provenance])
        both_syn = np.array([t == ("synthetic", "synthetic") for t in synth_pairs.provenance])
    sel = gaps[any_syn]
    if sel.size == 0:
        # nothing was synthesized: the set is the originals themselves
        sel = gaps
        both = gaps
    else:
        both = gaps[both_syn] if both_syn.any() else sel
    return OrderingStats(
        fraction=float(np.mean(sel > 0)),
        fraction_fully_synthetic=float(np.mean(both > 0)),
        gap_original=float(np.mean(gap_orig)),
        gap_synthetic=float(np.mean(sel)),
        synthetic_pairs=int(sel.size),
    )
