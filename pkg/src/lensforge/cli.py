"""Command-line front end.

Stage artifacts live under ``<out>/seed-<seed>/``::

    data/train.*  data/test.*  data/gold.json
    vae/vae.*     synth/<name>.*     rm/<name>.*
    reports/<stage>.json

Every report is deterministic given the config and seed; wall-clock timings
go to the log only.
"""

from __future__ import annotations

import argparse
import csv
import io
import json
import logging
import math
import os
import sys
from dataclasses import asdict, replace
from pathlib import Path

import numpy as np

from . import __version__
from .data import (
    ConfigError, DatasetManifest, FormatError, GoldRewardSpec, read_candidates, read_dataset,
    write_candidates, write_dataset,
)
from .evaluation import best_of_n, ordering_preservation
from .numkit import DomainError, NumericError, Rng
from .pipeline import (
    BON_VARIANTS, K_EVAL, RunConfig, augmented_sets, fit_theory, make_bench, map_seeds, run_bon,
    run_margin_checks, run_theory_seed,
)
from .reward import load_head, save_head, train_reward
from .synthesis import baseline_augment, lens_augment
from .vae import load_params, reconstruction_error, save_params, train_vae

log = logging.getLogger("lensforge")

EXIT_OK, EXIT_ERROR, EXIT_USAGE, EXIT_CONFIG, EXIT_IO, EXIT_NUMERIC = 0, 1, 2, 3, 4, 5

ABLATION_GRIDS = {
    "gamma": [0.0, 0.01, 0.1, 0.5, 1.0],
    "beta": [0.1, 0.5, 1.0, 2.0, 5.0],
    "sigma": [1e-3, 1e-2, 1e-1, 1.0],
    "k": [2, 4, 8],
    "N": [250, 500, 1000, 2000],
    "mix": ["original", "synthetic-only", "mix"],
    "sharing": ["separate", "shared-trunk", "fully-shared"],
}


class MissingArtifact(OSError):
    pass


# ---------------------------------------------------------------------------
# Report helpers
# ---------------------------------------------------------------------------

def _check_finite(obj, where="report"):
    if isinstance(obj, float) and not math.isfinite(obj):
        raise NumericError(f"{where}: non-finite value")
    if isinstance(obj, dict):
        for k, v in obj.items():
            _check_finite(v, f"{where}.{k}")
    elif isinstance(obj, (list, tuple)):
        for i, v in enumerate(obj):
            _check_finite(v, f"{where}[{i}]")


def _jsonable(obj):
    if isinstance(obj, dict):
        return {str(k): _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_jsonable(v) for v in obj]
    if isinstance(obj, np.generic):
        return obj.item()
    if isinstance(obj, np.ndarray):
        return obj.tolist()
    return obj


def write_report(path: Path, obj: dict, required=()) -> dict:
    """Validate (required keys, finite numbers) and write sorted JSON."""
    obj = _jsonable(obj)
    missing = [k for k in required if k not in obj]
    if missing:
        raise ValueError(f"report {path.name} lacks fields {missing}")
    _check_finite(obj, path.stem)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n")
    log.info("wrote %s", path)
    return obj


def write_csv(path: Path, header, rows) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    for r in rows:
        w.writerow([repr(float(x)) if isinstance(x, (float, np.floating)) else x for x in r])
    path.write_text(buf.getvalue())
    log.info("wrote %s", path)


# ---------------------------------------------------------------------------
# Paths
# ---------------------------------------------------------------------------

def seed_dir(out: Path, seed: int) -> Path:
    return out / f"seed-{seed}"


def _require(path: Path, what: str, hint: str, suffix: str = ".manifest.json") -> Path:
    """``path`` is an artifact stem; ``suffix`` names the header file to probe."""
    probe = path.with_name(path.name + suffix)
    if not probe.exists():
        raise MissingArtifact(f"missing {what}: {probe} (run `{hint}` first)")
    return path


def load_train(root: Path):
    return read_dataset(_require(root / "data" / "train", "training data", "lensforge gen-data"))


def load_gold(root: Path) -> GoldRewardSpec:
    p = root / "data" / "gold.json"
    if not p.exists():
        raise MissingArtifact(f"missing gold spec: {p} (run `lensforge gen-data` first)")
    return GoldRewardSpec.from_json(json.loads(p.read_text()))


# ---------------------------------------------------------------------------
# Stage commands; each takes a per-seed config and the output root
# ---------------------------------------------------------------------------

def stage_gen_data(cfg: RunConfig, out: Path) -> dict:
    root = seed_dir(out, cfg.seed)
    bench = make_bench(cfg)
    digest = bench.gold.digest()
    write_dataset(bench.train, DatasetManifest(cfg.data.dim, len(bench.train), "train", cfg.seed, digest), root / "data" / "train")
    write_candidates(bench.test, root / "data" / "test", cfg.seed, digest)
    (root / "data" / "gold.json").write_text(json.dumps(bench.gold.to_json(), sort_keys=True) + "\n")
    report = {
        "stage": "gen-data", "seed": cfg.seed, "dim": cfg.data.dim, "train_pairs": len(bench.train),
        "test_prompts": int(bench.test.candidates.shape[0]), "candidates_per_prompt": bench.test.n,
        "gold_spec_digest": digest, "config": asdict(cfg.data),
    }
    return write_report(root / "reports" / "gen-data.json", report, ("train_pairs", "gold_spec_digest"))


def stage_train_vae(cfg: RunConfig, out: Path) -> dict:
    root = seed_dir(out, cfg.seed)
    train = load_train(root)
    if train.dim != cfg.data.dim:
        raise ConfigError(f"data.dim: config says {cfg.data.dim}, training data has dim {train.dim}")
    params, hist = train_vae(train, cfg.vae)
    save_params(params, root / "vae" / "vae", {"seed": cfg.seed, "config": asdict(cfg.vae)})
    report = {
        "stage": "train-vae", "seed": cfg.seed, "pairs": len(train), "parameters": params.num_parameters(),
        "loss": hist.loss, "recon": hist.recon, "kl": hist.kl, "w2": hist.w2,
        "train_reconstruction_error": reconstruction_error(params, train), "config": asdict(cfg.vae),
    }
    return write_report(root / "reports" / "train-vae.json", report, ("loss", "recon"))


def _synth_name(method: str, k: int) -> str:
    return f"{method}-{k}x"


def stage_synth(cfg: RunConfig, out: Path, method: str = "lens", k: int | None = None) -> dict:
    root = seed_dir(out, cfg.seed)
    train = load_train(root)
    k = k or cfg.synthesis.k_aug
    syn = replace(cfg.synthesis, k_aug=k, top_k=cfg.synthesis.top_k if k == cfg.synthesis.k_aug else None)
    if method == "lens":
        vae = load_params(_require(root / "vae" / "vae", "trained VAE", "lensforge train-vae", ".json"))
        if vae.dim != train.dim:
            raise ConfigError(f"VAE dim {vae.dim} does not match training data dim {train.dim}")
        aug = lens_augment(vae, train, syn)
    else:
        aug = baseline_augment(train, method, syn)
    name = _synth_name(method, k)
    write_dataset(aug, DatasetManifest(aug.dim, len(aug), "train", cfg.seed), root / "synth" / name)
    gold = load_gold(root)
    order = ordering_preservation(gold, train, aug)
    counts = {}
    for t in aug.provenance:
        key = "/".join(t)
        counts[key] = counts.get(key, 0) + 1
    report = {
        "stage": "synth", "seed": cfg.seed, "name": name, "method": method, "k_aug": k,
        "pairs": len(aug), "provenance_counts": counts, "ordering": order.to_json(), "config": asdict(syn),
    }
    return write_report(root / "reports" / f"synth-{name}.json", report, ("pairs", "ordering"))


def _training_set(root: Path, name: str):
    if name == "original":
        return load_train(root)
    return read_dataset(_require(root / "synth" / name, f"synthetic set {name!r}", "lensforge synth"))


def stage_train_rm(cfg: RunConfig, out: Path, data: str = "original") -> dict:
    root = seed_dir(out, cfg.seed)
    pairs = _training_set(root, data)
    if pairs.dim != cfg.data.dim:
        raise ConfigError(f"data.dim: config says {cfg.data.dim}, {data} has dim {pairs.dim}")
    head, hist = train_reward(pairs, cfg.reward)
    save_head(head, root / "rm" / data, {"seed": cfg.seed, "data": data})
    report = {
        "stage": "train-rm", "seed": cfg.seed, "data": data, "pairs": len(pairs),
        "train_loss": hist.train_loss, "val_loss": hist.val_loss, "best_epoch": hist.best_epoch,
        "stopped_early": hist.stopped_early, "config": asdict(cfg.reward),
    }
    return write_report(root / "reports" / f"train-rm-{data}.json", report, ("val_loss",))


def stage_eval_bon(cfg: RunConfig, out: Path, heads=None) -> dict:
    root = seed_dir(out, cfg.seed)
    test = read_candidates(_require(root / "data" / "test", "test candidates", "lensforge gen-data"))
    gold = load_gold(root)
    if heads is None:
        heads = sorted(p.stem for p in (root / "rm").glob("*.json")) if (root / "rm").exists() else []
    if not heads:
        raise MissingArtifact(f"no reward heads under {root / 'rm'} (run `lensforge train-rm` first)")
    rows = {}
    for name in heads:
        head = load_head(_require(root / "rm" / name, f"reward head {name!r}", "lensforge train-rm", ".json"))
        if head.dim != test.candidates.shape[2]:
            raise ConfigError(f"head {name} has dim {head.dim}, test candidates have dim {test.candidates.shape[2]}")
        rows[name] = best_of_n(head, test, gold, Rng(cfg.seed).spawn(K_EVAL)).to_json()
    report = {"stage": "eval-bon", "seed": cfg.seed, "heads": rows}
    return write_report(root / "reports" / "eval-bon.json", report, ("heads",))


def paired_comparison(per_seed: list[dict], key=lambda r: r) -> dict:
    """Seed-mean differences and sign counts between every pair of heads."""
    names = sorted(per_seed[0])
    out = {}
    for a in names:
        for b in names:
            if a >= b:
                continue
            d = np.array([r[a] - r[b] for r in per_seed])
            out[f"{a} vs {b}"] = {
                "mean_diff": float(d.mean()), "wins": int((d > 0).sum()),
                "losses": int((d < 0).sum()), "seeds": len(d), "sign_test_p": sign_test_p(d),
            }
    return out


def sign_test_p(diffs) -> float:
    """One-sided exact binomial p-value for P(diff > 0) > 1/2, ties dropped."""
    diffs = np.asarray(diffs)
    n = int((diffs != 0).sum())
    wins = int((diffs > 0).sum())
    if n == 0:
        return 1.0
    return float(sum(math.comb(n, i) for i in range(wins, n + 1)) / 2 ** n)


# ---------------------------------------------------------------------------
# Whole-run commands
# ---------------------------------------------------------------------------

def cmd_verify_theory(cfg: RunConfig, out: Path, jobs: int, inject_p: float | None = None) -> dict:
    cfg.validate()
    seeds = cfg.eval.seeds
    rows = map_seeds(run_theory_seed, cfg, seeds, jobs)
    if inject_p is not None:
        for r in rows:
            r["eps_rec_curve"] = [(n, float(n) ** (-inject_p)) for n, _ in r["eps_rec_curve"]]
    margin = run_margin_checks(cfg.for_seed(seeds[0]))
    rep = fit_theory(cfg, rows, margin).to_json()
    rep["per_seed"] = rows
    rep["seeds"] = list(seeds)
    write_csv(out / "theory" / "eps_rec.csv", ["N", "eps_rec"], rep["eps_rec_curve"])
    write_csv(out / "theory" / "zeta.csv", ["N", "zeta", "zeta_aug"], rep["zeta_curve"])
    required = ("C1", "p", "B0", "N0", "t_delta", "eps_rec_curve", "ordering_preservation",
                "gap_original", "gap_synthetic", "w1_coupling_bound", "w1_exact")
    return write_report(out / "theory" / "theory.json", rep, required)


def _ablation_point(args):
    cfg, axis, value = args
    if axis == "gamma":
        cfg = replace(cfg, vae=replace(cfg.vae, gamma=float(value)))
    elif axis == "beta":
        cfg = replace(cfg, vae=replace(cfg.vae, beta=float(value)))
    elif axis == "sigma":
        cfg = replace(cfg, synthesis=replace(cfg.synthesis, sigma_noise2=float(value)))
    elif axis == "k":
        cfg = replace(cfg, synthesis=replace(cfg.synthesis, k_aug=int(value), top_k=None))
    elif axis == "N":
        cfg = replace(cfg, data=replace(cfg.data, num_prompts=int(value)))
    elif axis == "sharing":
        cfg = replace(cfg, vae=replace(cfg.vae, sharing=str(value)))
    cfg.validate()
    bench = make_bench(cfg)
    vae, hist = train_vae(bench.train, cfg.vae)
    if axis == "mix":
        sets = augmented_sets(cfg, vae, bench.train)
        name = str(value)
        pairs = sets[name]
    else:
        name = f"lens-{cfg.synthesis.k_aug}x"
        pairs = lens_augment(vae, bench.train, cfg.synthesis)
    head, _ = train_reward(pairs, cfg.reward)
    bon = best_of_n(head, bench.test, bench.gold, Rng(cfg.seed).spawn(K_EVAL))
    order = ordering_preservation(bench.gold, bench.train, pairs)
    return {
        "axis": axis, "value": value, "seed": cfg.seed, "variant": name, "pairs": len(pairs),
        "bon_gold_reward": bon.mean_gold_reward_of_selected, "random_pick": bon.random_pick_baseline,
        "oracle": bon.oracle_ceiling, "ordering_preservation": order.fraction,
        "vae_final_recon": hist.recon[-1],
    }


def cmd_ablate(cfg: RunConfig, out: Path, jobs: int, axis: str, grid=None) -> dict:
    if axis not in ABLATION_GRIDS:
        raise ConfigError(f"unknown ablation axis {axis!r}; expected one of {sorted(ABLATION_GRIDS)}")
    cfg.validate()
    grid = grid if grid else ABLATION_GRIDS[axis]
    tasks = [(cfg.for_seed(s), axis, v) for v in grid for s in cfg.eval.seeds]
    if jobs <= 1:
        rows = [_ablation_point(t) for t in tasks]
    else:
        from concurrent.futures import ProcessPoolExecutor
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            rows = list(pool.map(_ablation_point, tasks))
    rows.sort(key=lambda r: (grid.index(r["value"]), r["seed"]))
    header = list(rows[0])
    write_csv(out / "ablate" / f"{axis}.csv", header, [[r[h] for h in header] for r in rows])
    summary = {}
    for v in grid:
        vals = [r["bon_gold_reward"] for r in rows if r["value"] == v]
        summary[str(v)] = {"mean_bon_gold_reward": float(np.mean(vals)), "seeds": len(vals)}
    return write_report(out / "ablate" / f"{axis}.json", {"axis": axis, "grid": list(grid), "rows": rows, "summary": summary}, ("rows",))


def main_results(cfg: RunConfig, out: Path, jobs: int) -> dict:
    """BoN table for every augmentation variant over the configured seeds."""
    cfg.validate()
    runs = map_seeds(run_bon, cfg, cfg.eval.seeds, jobs)
    per_seed = [{v: r["variants"][v]["bon"]["mean_gold_reward_of_selected"] for v in BON_VARIANTS} for r in runs]
    means = {v: float(np.mean([p[v] for p in per_seed])) for v in BON_VARIANTS}
    rows = [[r["seed"], v, r["variants"][v]["pairs"], r["variants"][v]["bon"]["mean_gold_reward_of_selected"],
             r["variants"][v]["bon"]["random_pick_baseline"], r["variants"][v]["bon"]["oracle_ceiling"]]
            for r in runs for v in BON_VARIANTS]
    write_csv(out / "report" / "bon.csv", ["seed", "variant", "pairs", "bon_gold_reward", "random_pick", "oracle"], rows)
    report = {
        "seeds": list(cfg.eval.seeds), "runs": runs, "seed_means": means,
        "comparisons": paired_comparison(per_seed),
        "ordering_preservation": float(np.mean([r["ordering"]["fraction"] for r in runs])),
        "ordering_preservation_high_noise": float(np.mean([r["ordering_high_noise"]["fraction"] for r in runs])),
        "config": cfg.to_dict(),
    }
    return write_report(out / "report" / "report.json", report, ("seed_means", "comparisons"))


# ---------------------------------------------------------------------------
# Argument parsing
# ---------------------------------------------------------------------------

def _load_config(args) -> RunConfig:
    cfg = RunConfig.load(args.config) if args.config else RunConfig()
    if args.seed is not None:
        cfg = replace(cfg, seed=args.seed, eval=replace(cfg.eval, seeds=[args.seed]))
    cfg.validate()
    return cfg


def _out_dir(args, cfg: RunConfig) -> Path:
    out = Path(args.out or cfg.output_dir)
    try:
        out.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise OSError(f"output directory {out} is not writable: {exc}") from exc
    if not os.access(out, os.W_OK):
        raise OSError(f"output directory {out} is not writable")
    return out


def _per_seed(fn, cfg: RunConfig, out: Path, jobs: int, **kw) -> list[dict]:
    cfgs = [cfg.for_seed(s) for s in cfg.eval.seeds]
    if jobs <= 1 or len(cfgs) == 1:
        return [fn(c, out, **kw) for c in cfgs]
    from concurrent.futures import ProcessPoolExecutor
    with ProcessPoolExecutor(max_workers=jobs) as pool:
        futs = [pool.submit(fn, c, out, **kw) for c in cfgs]
        return [f.result() for f in futs]


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="JSON run config (defaults apply for missing fields)")
    common.add_argument("--seed", type=int, help="run a single seed instead of eval.seeds")
    common.add_argument("--out", help="output directory (default: config output_dir)")
    common.add_argument("--jobs", type=int, default=1, help="worker processes for seed/grid fan-out")

    p = argparse.ArgumentParser(prog="lensforge", description="Latent-space preference synthesis for reward models.")
    p.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = p.add_subparsers(dest="command", required=True)
    sub.add_parser("gen-data", parents=[common], help="write benchmark train/test splits and gold spec")
    sub.add_parser("train-vae", parents=[common], help="train the preference VAE")
    s = sub.add_parser("synth", parents=[common], help="synthesize an augmented pair set")
    s.add_argument("--method", choices=["lens", "gaussian", "direct"], default="lens")
    s.add_argument("--k", type=int, help="augmentation multiplier (default synthesis.k_aug)")
    s = sub.add_parser("train-rm", parents=[common], help="train a reward head")
    s.add_argument("--data", default="original", help="'original' or a synth set name such as lens-4x")
    s = sub.add_parser("eval-bon", parents=[common], help="best-of-n evaluation of trained heads")
    s.add_argument("--heads", nargs="+", help="head names (default: all under rm/)")
    s = sub.add_parser("verify-theory", parents=[common], help="sweeps and fits for the theory report")
    s.add_argument("--inject-power-law", type=float, metavar="P",
                   help="test mode: replace measured reconstruction errors by N^-P")
    s = sub.add_parser("ablate", parents=[common], help="one-axis ablation")
    s.add_argument("--axis", required=True, help=f"one of {', '.join(ABLATION_GRIDS)}")
    s.add_argument("--grid", nargs="+", help="grid values (default: the standard grid for the axis)")
    sub.add_parser("report", parents=[common], help="main BoN table over all variants and seeds")
    return p


def _parse_grid(axis: str, values):
    if values is None:
        return None
    if axis in ("mix", "sharing"):
        return list(values)
    conv = int if axis in ("k", "N") else float
    try:
        return [conv(v) for v in values]
    except ValueError as exc:
        raise ConfigError(f"grid: {exc}") from exc


def run(argv=None) -> int:
    args = build_parser().parse_args(argv)
    cfg = _load_config(args)
    out = _out_dir(args, cfg)
    jobs = max(1, args.jobs)
    cmd = args.command
    if cmd == "gen-data":
        reps = _per_seed(stage_gen_data, cfg, out, jobs)
        for r in reps:
            print(f"seed {r['seed']}: {r['train_pairs']} train pairs, {r['test_prompts']} test prompts x "
                  f"{r['candidates_per_prompt']} candidates, dim {r['dim']}, gold {r['gold_spec_digest']}")
    elif cmd == "train-vae":
        for r in _per_seed(stage_train_vae, cfg, out, jobs):
            print(f"seed {r['seed']}: final loss {r['loss'][-1]:.4f} recon {r['recon'][-1]:.4f}")
    elif cmd == "synth":
        for r in _per_seed(stage_synth, cfg, out, jobs, method=args.method, k=args.k):
            print(f"seed {r['seed']}: {r['name']} {r['pairs']} pairs, ordering {r['ordering']['fraction']:.3f}")
    elif cmd == "train-rm":
        for r in _per_seed(stage_train_rm, cfg, out, jobs, data=args.data):
            print(f"seed {r['seed']}: {r['data']} best epoch {r['best_epoch']} val loss {min(r['val_loss']):.4f}")
    elif cmd == "eval-bon":
        reps = _per_seed(stage_eval_bon, cfg, out, jobs, heads=args.heads)
        per_seed = [{k: v["mean_gold_reward_of_selected"] for k, v in r["heads"].items()} for r in reps]
        names = sorted(per_seed[0])
        if any(sorted(p) != names for p in per_seed):
            raise MissingArtifact("seeds disagree on the set of trained heads")
        summary = {
            "seeds": [r["seed"] for r in reps],
            "rows": [{"seed": r["seed"], **p} for r, p in zip(reps, per_seed)],
            "seed_means": {n: float(np.mean([p[n] for p in per_seed])) for n in names},
            "comparisons": paired_comparison(per_seed),
        }
        write_report(out / "eval-bon.json", summary, ("rows", "comparisons"))
        for n in names:
            print(f"{n:16s} mean gold reward of selected {summary['seed_means'][n]:.4f}")
    elif cmd == "verify-theory":
        rep = cmd_verify_theory(cfg, out, jobs, args.inject_power_law)
        n0 = f"{rep['N0']:.2f}" if rep["N0"] is not None else rep["N0_status"]
        print(f"p {rep['p']:.4f} C1 {rep['C1']:.4f} B0 {rep['B0']:.4f} N0 {n0} t_delta {rep['t_delta']:.4f}")
    elif cmd == "ablate":
        rep = cmd_ablate(cfg, out, jobs, args.axis, _parse_grid(args.axis, args.grid))
        for v, s in rep["summary"].items():
            print(f"{args.axis}={v}: mean BoN gold reward {s['mean_bon_gold_reward']:.4f}")
    elif cmd == "report":
        rep = main_results(cfg, out, jobs)
        for v, m in rep["seed_means"].items():
            print(f"{v:16s} {m:.4f}")
    return EXIT_OK


def main(argv=None) -> int:
    level = os.environ.get("LENSFORGE_LOG", "warn").lower()
    levels = {"error": logging.ERROR, "warn": logging.WARNING, "warning": logging.WARNING,
              "info": logging.INFO, "debug": logging.DEBUG}
    logging.basicConfig(level=levels.get(level, logging.WARNING), format="%(levelname)s %(name)s: %(message)s")
    try:
        return run(argv)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (OSError, FormatError) as exc:
        print(f"i/o error: {exc}", file=sys.stderr)
        return EXIT_IO
    except (ArithmeticError, DomainError) as exc:
        print(f"numeric error: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except Exception as exc:  # noqa: BLE001 - last-resort exit code
        log.debug("unhandled", exc_info=True)
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_ERROR


if __name__ == "__main__":
    sys.exit(main())
