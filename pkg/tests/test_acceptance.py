"""Acceptance criteria 1-11, each at its stated tolerance.

The heavy criteria run the real CLI at the default configuration on seeds
0, 1 and 2. Each test records a one-line verdict that is printed in the
terminal summary whether it passes or not.
"""

import json
import math

import numpy as np
import pytest

from lensforge.cli import EXIT_OK, main
from lensforge.numkit import Rng, finite_diff_check
from lensforge.reward import RewardHead, bt_loss
from lensforge.theory import compute_N0, compute_t_delta, estimate_p, w1_checks
from lensforge.vae import (
    DiagonalGaussian, VaeParams, grads_vector, kl_to_standard_normal, total_loss, vae_loss, w2_diag_gaussians,
)

from conftest import ACCEPTANCE_LINES

pytestmark = pytest.mark.slow

SEEDS = [0, 1, 2]


def verdict(k, ok, detail):
    ACCEPTANCE_LINES[k] = f"criterion {k:2d}: {'PASS' if ok else 'FAIL'}  {detail}"
    assert ok, ACCEPTANCE_LINES[k]


def lf(*args):
    return main(list(map(str, args)))


@pytest.fixture(scope="module")
def report_run(tmp_path_factory):
    out = tmp_path_factory.mktemp("report")
    assert lf("report", "--out", out) == EXIT_OK
    return out, json.loads((out / "report" / "report.json").read_text())


@pytest.fixture(scope="module")
def theory_run(tmp_path_factory):
    out = tmp_path_factory.mktemp("theory")
    assert lf("verify-theory", "--out", out) == EXIT_OK
    return out, json.loads((out / "theory" / "theory.json").read_text())


# --- 1 ------------------------------------------------------------------------------

def test_criterion_01_closed_form_oracles():
    exact = [
        (kl_to_standard_normal(DiagonalGaussian(np.zeros(3), np.zeros(3))), 0.0),
        (kl_to_standard_normal(DiagonalGaussian(np.array([1.0]), np.zeros(1))), 0.5),
        (kl_to_standard_normal(DiagonalGaussian(np.zeros(1), np.ones(1))), 0.5 * (math.e - 2)),
        (w2_diag_gaussians(DiagonalGaussian(np.ones(2), np.zeros(2)), DiagonalGaussian(np.ones(2), np.zeros(2))), 0.0),
        (w2_diag_gaussians(DiagonalGaussian(np.zeros(1), np.zeros(1)), DiagonalGaussian(np.array([3.0]), np.zeros(1))), 3.0),
        (w2_diag_gaussians(DiagonalGaussian(np.zeros(2), np.zeros(2)),
                           DiagonalGaussian(np.ones(2), np.log(np.full(2, 4.0)))), 2.0),
    ]
    worst = max(abs(a - b) for a, b in exact)

    q = DiagonalGaussian(np.zeros(1), np.ones(1))
    z = q.mu + q.std * Rng(12).normal_like((200_000, 1))
    mc_kl = np.mean(q.log_density(z) + 0.5 * np.sum(z ** 2, axis=1) + 0.5 * math.log(2 * math.pi))
    kl_rel = abs(mc_kl - kl_to_standard_normal(q)) / kl_to_standard_normal(q)

    xa = Rng(1).normal_like((200_000, 2))
    xb = 1.0 + 2.0 * Rng(2).normal_like((200_000, 2))
    mc_w2 = math.sqrt(sum(np.mean((np.sort(xa[:, k]) - np.sort(xb[:, k])) ** 2) for k in range(2)))
    w2_rel = abs(mc_w2 - 2.0) / 2.0

    ok = worst <= 1e-9 and kl_rel < 0.02 and w2_rel < 0.02
    verdict(1, ok, f"max closed-form error {worst:.1e}; MC rel error KL {kl_rel:.4f}, W2 {w2_rel:.4f}")


# --- 2 ------------------------------------------------------------------------------

def test_criterion_02_gradient_checks():
    errs = {"vae_loss": [], "total_loss": [], "bt_loss": []}
    for i in range(20):
        p = VaeParams.init(6, Rng(100 + i), latent=3, hidden=5)
        e = Rng(200 + i).normal_like((4, 6))
        f = lambda v: vae_loss(p.with_vector(v), e, "plus", Rng(i), 1.0)[0]
        errs["vae_loss"].append(finite_diff_check(f, p.vector(), grads_vector(p, vae_loss(p, e, "plus", Rng(i), 1.0)[1])))

        em = Rng(300 + i).normal_like((4, 6))
        f = lambda v: total_loss(p.with_vector(v), e, em, Rng(i), 1.0, 0.1)[0]
        g = grads_vector(p, total_loss(p, e, em, Rng(i), 1.0, 0.1)[1])
        errs["total_loss"].append(finite_diff_check(f, p.vector(), g))

        head = RewardHead.init(6, Rng(400 + i), hidden=7)
        _, grads = bt_loss(head, e, em)
        flat = np.concatenate([np.ravel(grads[k]) for k in ("b1", "b2", "w1", "w2")])
        errs["bt_loss"].append(finite_diff_check(lambda v: bt_loss(head.with_vector(v), e, em)[0], head.vector(), flat))
    worst = {k: max(v) for k, v in errs.items()}
    verdict(2, all(v < 1e-4 for v in worst.values()),
            "max FD error over 20 points: " + ", ".join(f"{k} {v:.1e}" for k, v in worst.items()))


# --- 3 ------------------------------------------------------------------------------

def test_criterion_03_w1_coupling_bound(theory_run):
    _, rep = theory_run
    checked, holds = 0, True
    for seed in range(50):
        rng = Rng(seed)
        n = 2 + seed * 5
        chk = w1_checks(rng.normal_like((n, 4)), rng.normal_like((n, 4)) * 0.5 + 0.2)
        holds &= chk.exact <= chk.coupling_bound + 1e-9
        checked += 1
    vae_ok = rep["w1_exact"] is not None and rep["w1_exact"] <= rep["w1_coupling_bound"] + 1e-9
    two = w1_checks([[0.0], [1.0]], [[1.0], [0.0]])
    counter = two.exact == 0.0 and two.coupling_bound == 1.0
    verdict(3, holds and vae_ok and counter,
            f"{checked} random sets hold; VAE reconstructions exact {rep['w1_exact']:.4f} <= bound "
            f"{rep['w1_coupling_bound']:.4f}; permuted pair exact {two.exact} bound {two.coupling_bound}")


# --- 4 ------------------------------------------------------------------------------

def test_criterion_04_t_delta():
    t = compute_t_delta(0.1, 16, 0.05)
    norms = np.linalg.norm(0.1 * Rng(4).normal_like((100_000, 16)), axis=1)
    cover = float(np.mean(norms <= t))
    verdict(4, abs(t - 0.6443) <= 1e-3 and cover >= 1 - 0.025 - 0.005,
            f"t_delta {t:.5f} (target 0.6443); empirical coverage {cover:.4f} (need >= 0.97)")


# --- 5 ------------------------------------------------------------------------------

def test_criterion_05_N0_arithmetic():
    n0 = compute_N0(0.24, 5.63, 0.26, 4096, 0.05)
    verdict(5, abs(n0 - 65.59) <= 0.01 * 65.59, f"N0 {n0:.3f} (target 65.59 within 1%)")


# --- 6 ------------------------------------------------------------------------------

def test_criterion_06_scaling_law(theory_run):
    _, rep = theory_run
    ps = [estimate_p([n for n, _ in r["eps_rec_curve"]], [e for _, e in r["eps_rec_curve"]]) for r in rep["per_seed"]]
    mean_slope = -float(np.mean(ps))
    verdict(6, mean_slope < -0.05 and rep["seeds"] == SEEDS,
            f"log-log slope per seed {[round(-p, 3) for p in ps]}, mean {mean_slope:.3f} (need < -0.05)")


# --- 7 ------------------------------------------------------------------------------

def test_criterion_07_ordering(report_run):
    _, rep = report_run
    frac, high = rep["ordering_preservation"], rep["ordering_preservation_high_noise"]
    per_seed = [round(r["ordering"]["fraction"], 3) for r in rep["runs"]]
    verdict(7, frac >= 0.85 and high < frac,
            f"ordering {frac:.3f} per seed {per_seed}; sigma2=10 gives {high:.3f}; reference 0.939")


# --- 8 ------------------------------------------------------------------------------

def test_criterion_08_main_direction(report_run):
    _, rep = report_run
    per_seed = [{v: r["variants"][v]["bon"]["mean_gold_reward_of_selected"] for v in r["variants"]} for r in rep["runs"]]
    means = rep["seed_means"]
    checks = {
        "lens-4x > original": ([s["lens-4x"] - s["original"] for s in per_seed], lambda d: d > 0),
        "lens-8x >= lens-2x": ([s["lens-8x"] - s["lens-2x"] for s in per_seed], lambda d: d >= 0),
        "gaussian-8x < original": ([s["original"] - s["gaussian-8x"] for s in per_seed], lambda d: d > 0),
    }
    parts, ok = [], True
    for name, (diffs, good) in checks.items():
        # with 3 seeds the one-sided sign test cannot reach 0.05, so the paired
        # requirement is that every seed agrees with the seed-mean direction
        mean_ok = good(float(np.mean(diffs)))
        seeds_ok = sum(good(d) for d in diffs)
        ok &= mean_ok and seeds_ok == len(diffs)
        parts.append(f"{name}: mean diff {np.mean(diffs):+.4f}, {seeds_ok}/{len(diffs)} seeds")
    verdict(8, ok and rep["seeds"] == SEEDS, "; ".join(parts)
            + f" [means orig {means['original']:.4f} L2 {means['lens-2x']:.4f} L4 {means['lens-4x']:.4f}"
              f" L8 {means['lens-8x']:.4f} gauss8 {means['gaussian-8x']:.4f}]")


# --- 9 ------------------------------------------------------------------------------

def test_criterion_09_data_mix(report_run):
    _, rep = report_run
    m = rep["seed_means"]
    verdict(9, m["mix"] >= m["synthetic-only"] and m["mix"] >= m["original"],
            f"mix {m['mix']:.4f} vs synthetic-only {m['synthetic-only']:.4f} and original {m['original']:.4f}")


# --- 10 -----------------------------------------------------------------------------

def test_criterion_10_estimation_error_decay(theory_run):
    _, rep = theory_run
    zeta = {n: z for n, z, _ in rep["zeta_curve"]}
    verdict(10, zeta[100] > zeta[2000] and rep["C1"] > 0,
            f"seed-mean zeta(100) {zeta[100]:.4f} > zeta(2000) {zeta[2000]:.4f}; C1 {rep['C1']:.4f}")


# --- 11 -----------------------------------------------------------------------------

def _json_reports(root):
    return {str(p.relative_to(root)): p.read_bytes() for p in sorted(root.rglob("*.json"))}


def test_criterion_11_determinism(report_run, theory_run, tmp_path):
    differing = []
    # whole-run commands at defaults against the fixtures' outputs
    for name, (out, _), args in (("report", report_run, ["report"]), ("verify-theory", theory_run, ["verify-theory"])):
        again = tmp_path / name
        assert lf(*args, "--out", again) == EXIT_OK
        if _json_reports(again) != _json_reports(out):
            differing.append(name)
    # stage commands and one ablation point, each run twice into separate trees
    stages = [["gen-data"], ["train-vae"], ["synth"], ["train-rm"], ["train-rm", "--data", "lens-4x"], ["eval-bon"],
              ["ablate", "--axis", "gamma", "--grid", "0.1"]]
    trees = []
    for k in range(2):
        out = tmp_path / f"stages-{k}"
        for args in stages:
            assert lf(*args, "--seed", 0, "--out", out) == EXIT_OK
        trees.append(_json_reports(out))
    for key in sorted(set(trees[0]) | set(trees[1])):
        if trees[0].get(key) != trees[1].get(key):
            differing.append(key)
    commands = 2 + len(stages)
    verdict(11, not differing,
            f"{commands} subcommand runs compared byte for byte; "
            + ("all identical" if not differing else f"differences in {differing}"))
