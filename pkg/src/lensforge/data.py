"""Preference-embedding datasets, their on-disk format, and the synthetic benchmark.

On disk a split is two files: ``<name>.manifest.json`` and ``<name>.bin``.  The
blob is little-endian float32, row-major, one record per pair laid out as
``e_plus`` followed by ``e_minus``.  JSONL records of the form
``{"prompt_id": int, "e_plus": [...], "e_minus": [...]}`` are accepted on ingest.
"""

from __future__ import annotations

import hashlib
import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .numkit import Rng

DTYPE = "f32le"


class FormatError(ValueError):
    """Raised for malformed dataset files; carries the offending record index."""

    def __init__(self, message: str, record: int | None = None):
        self.record = record
        if record is not None:
            message = f"record {record}: {message}"
        super().__init__(message)


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class PreferencePair:
    prompt_id: int
    e_plus: np.ndarray
    e_minus: np.ndarray


@dataclass
class PairSet:
    """Column-oriented collection of preference pairs.

    ``provenance`` is optional and holds, per pair, the origin tags of the
    positive and negative embeddings (``"original"`` or ``"synthetic"``).
    ``members`` optionally records which pool entry each side came from.
    """

    prompt_ids: np.ndarray
    e_plus: np.ndarray
    e_minus: np.ndarray
    provenance: list[tuple[str, str]] | None = None
    members: np.ndarray | None = None

    def __post_init__(self):
        self.prompt_ids = np.asarray(self.prompt_ids, dtype=np.int64)
        self.e_plus = np.atleast_2d(np.asarray(self.e_plus, dtype=np.float64))
        self.e_minus = np.atleast_2d(np.asarray(self.e_minus, dtype=np.float64))
        if self.e_plus.shape != self.e_minus.shape:
            raise FormatError(f"e_plus {self.e_plus.shape} and e_minus {self.e_minus.shape} disagree")
        if self.prompt_ids.shape != (self.e_plus.shape[0],):
            raise FormatError("prompt_ids length does not match embedding count")

    def __len__(self) -> int:
        return self.e_plus.shape[0]

    def __getitem__(self, i: int) -> PreferencePair:
        return PreferencePair(int(self.prompt_ids[i]), self.e_plus[i], self.e_minus[i])

    def __iter__(self):
        return (self[i] for i in range(len(self)))

    @property
    def dim(self) -> int:
        return self.e_plus.shape[1]

    def subset(self, idx) -> "PairSet":
        idx = np.asarray(idx, dtype=np.int64)
        prov = [self.provenance[i] for i in idx] if self.provenance is not None else None
        members = self.members[idx] if self.members is not None else None
        return PairSet(self.prompt_ids[idx], self.e_plus[idx], self.e_minus[idx], prov, members)

    def embeddings(self) -> np.ndarray:
        """All embeddings stacked, positives first."""
        return np.concatenate([self.e_plus, self.e_minus], axis=0)

    @classmethod
    def from_pairs(cls, pairs) -> "PairSet":
        pairs = list(pairs)
        return cls(
            [p.prompt_id for p in pairs],
            np.stack([p.e_plus for p in pairs]),
            np.stack([p.e_minus for p in pairs]),
        )

    @classmethod
    def concat(cls, sets) -> "PairSet":
        sets = list(sets)
        prov = None
        if all(s.provenance is not None for s in sets):
            prov = [t for s in sets for t in s.provenance]
        return cls(
            np.concatenate([s.prompt_ids for s in sets]),
            np.concatenate([s.e_plus for s in sets]),
            np.concatenate([s.e_minus for s in sets]),
            prov,
        )


@dataclass
class CandidateSets:
    """Test prompts with all their candidate embeddings, shape (prompts, n, d)."""

    prompt_ids: np.ndarray
    candidates: np.ndarray

    @property
    def n(self) -> int:
        return self.candidates.shape[1]


# ---------------------------------------------------------------------------
# Gold reward
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class GoldRewardSpec:
    """Frozen two-layer tanh MLP standing in for a held-out gold reward model.

    Weights are never stored; they are re-derived from ``seed``.  Inputs are
    divided by ``input_scale`` first, so rescaled embeddings see the same
    function.
    """

    seed: int
    dim: int
    hidden: int = 32
    with_bias: bool = True
    input_scale: float = 1.0

    def __post_init__(self):
        if self.dim < 1 or self.hidden < 1:
            raise ConfigError("gold reward dim and hidden must be >= 1")
        if not self.input_scale > 0:
            raise ConfigError("gold reward input_scale must be > 0")

    @property
    def weights(self) -> dict[str, np.ndarray]:
        cached = _GOLD_CACHE.get(self)
        if cached is None:
            rng = Rng(self.seed).spawn(0x601D)
            w1 = rng.normal_like((self.dim, self.hidden)) / math.sqrt(self.dim)
            b1 = rng.normal_like((self.hidden,)) / math.sqrt(self.dim)
            w2 = rng.normal_like((self.hidden,)) / math.sqrt(self.hidden)
            b2 = float(rng.normal(1)[0]) / math.sqrt(self.hidden)
            if not self.with_bias:
                b1 = np.zeros_like(b1)
                b2 = 0.0
            cached = _GOLD_CACHE[self] = {"w1": w1, "b1": b1, "w2": w2, "b2": np.float64(b2)}
        return cached

    def digest(self) -> str:
        return hashlib.sha256(json.dumps(self.to_json(), sort_keys=True).encode()).hexdigest()[:16]

    def to_json(self) -> dict:
        return asdict(self)

    @classmethod
    def from_json(cls, obj: dict) -> "GoldRewardSpec":
        return cls(**obj)


_GOLD_CACHE: dict[GoldRewardSpec, dict[str, np.ndarray]] = {}


def gold_reward(gold: GoldRewardSpec, e: np.ndarray) -> np.ndarray | float:
    """Gold score of one embedding (returns float) or a batch (returns 1-d array)."""
    e = np.asarray(e, dtype=np.float64)
    if e.shape[-1] != gold.dim:
        raise ConfigError(f"gold reward expects dim {gold.dim}, got {e.shape[-1]}")
    w = gold.weights
    out = np.tanh((e / gold.input_scale) @ w["w1"] + w["b1"]) @ w["w2"] + w["b2"]
    return float(out) if e.ndim == 1 else out


# ---------------------------------------------------------------------------
# Synthetic benchmark
# ---------------------------------------------------------------------------

@dataclass
class SyntheticBenchConfig:
    dim: int = 64
    num_prompts: int = 1000
    num_test_prompts: int = 2000
    candidates_per_prompt: int = 16
    cluster_scale: float = 1.0
    response_scale: float = 0.5
    label_temperature: float = 0.0
    # multiplies every embedding; pair with GoldRewardSpec.input_scale
    embedding_scale: float = 4.0
    # 0 means full-rank isotropic embeddings
    intrinsic_dim: int = 16

    def validate(self) -> None:
        if self.dim < 1:
            raise ConfigError("dim: must be >= 1")
        if self.num_prompts < 1:
            raise ConfigError("num_prompts: must be >= 1")
        if self.num_test_prompts < 0:
            raise ConfigError("num_test_prompts: must be >= 0")
        if self.candidates_per_prompt < 2:
            raise ConfigError("candidates_per_prompt: must be >= 2")
        if self.cluster_scale <= 0:
            raise ConfigError("cluster_scale: must be > 0")
        if self.response_scale <= 0:
            raise ConfigError("response_scale: must be > 0")
        if self.embedding_scale <= 0:
            raise ConfigError("embedding_scale: must be > 0")
        if self.label_temperature < 0:
            raise ConfigError("label_temperature: must be >= 0")
        if not 0 <= self.intrinsic_dim <= self.dim:
            raise ConfigError("intrinsic_dim: must be in [0, dim]")


def benchmark_mixing(cfg: SyntheticBenchConfig, rng: Rng) -> np.ndarray:
    """Map from the ``intrinsic_dim`` latent space into ``dim`` dimensions.

    Columns are orthogonal and scaled by sqrt(dim / intrinsic_dim), which keeps
    the expected squared norm equal to the full-rank case.
    """
    d = cfg.dim
    k = cfg.intrinsic_dim or d
    if k == d:
        return cfg.embedding_scale * np.eye(d)
    q, _ = np.linalg.qr(rng.normal_like((d, k)))
    return q.T * (cfg.embedding_scale * math.sqrt(d / k))


def sample_pairs(
    cfg: SyntheticBenchConfig, gold: GoldRewardSpec, mixing: np.ndarray, n: int, rng: Rng, first_id: int = 0
) -> PairSet:
    """One gold-labelled pair of responses for each of ``n`` fresh prompts."""
    k = mixing.shape[0]
    centers = cfg.cluster_scale * rng.normal_like((n, k))
    a = (centers + cfg.response_scale * rng.normal_like((n, k))) @ mixing
    b = (centers + cfg.response_scale * rng.normal_like((n, k))) @ mixing
    gap = gold_reward(gold, a) - gold_reward(gold, b)
    if cfg.label_temperature > 0:
        p_a = 0.5 * (1.0 + np.tanh(0.5 * gap / cfg.label_temperature))
        a_wins = rng.uniform(n) < p_a
    else:
        a_wins = gap > 0
    e_plus = np.where(a_wins[:, None], a, b)
    e_minus = np.where(a_wins[:, None], b, a)
    return PairSet(np.arange(first_id, first_id + n), e_plus, e_minus)


def sample_candidates(cfg: SyntheticBenchConfig, mixing: np.ndarray, m: int, rng: Rng, first_id: int = 0) -> CandidateSets:
    k, c = mixing.shape[0], cfg.candidates_per_prompt
    centers = cfg.cluster_scale * rng.normal_like((m, k))
    cands = (centers[:, None, :] + cfg.response_scale * rng.normal_like((m, c, k))) @ mixing
    return CandidateSets(np.arange(first_id, first_id + m), cands)


def generate_benchmark(
    cfg: SyntheticBenchConfig, gold: GoldRewardSpec, rng: Rng
) -> tuple[PairSet, CandidateSets]:
    """Clustered-Gaussian prompts; one gold-labelled pair per training prompt.

    Prompt centers and responses are drawn in an ``intrinsic_dim``-dimensional
    space and carried into ``dim`` dimensions by ``benchmark_mixing``.  The
    mixing map, training pairs and test candidates use separate child streams
    (keys 0, 1, 2), so the test set does not depend on ``num_prompts``.

    Training prompts get ids ``0..num_prompts-1`` and test prompts continue the
    numbering, so the two splits never share a prompt.
    """
    cfg.validate()
    if gold.dim != cfg.dim:
        raise ConfigError(f"gold dim {gold.dim} != benchmark dim {cfg.dim}")
    mixing = benchmark_mixing(cfg, rng.spawn(0))
    train = sample_pairs(cfg, gold, mixing, cfg.num_prompts, rng.spawn(1))
    test = sample_candidates(cfg, mixing, cfg.num_test_prompts, rng.spawn(2), first_id=cfg.num_prompts)
    return train, test


# ---------------------------------------------------------------------------
# File I/O
# ---------------------------------------------------------------------------

@dataclass
class DatasetManifest:
    dim: int
    count: int
    split: str = "train"
    seed: int = 0
    gold_spec_digest: str = ""
    dtype: str = DTYPE
    provenance: list[list[str]] | None = field(default=None)

    def validate(self) -> None:
        if self.dim < 1:
            raise FormatError("manifest dim must be >= 1")
        if self.count < 0:
            raise FormatError("manifest count must be >= 0")
        if self.dtype != DTYPE:
            raise FormatError(f"unsupported dtype {self.dtype!r}")
        if self.split not in ("train", "test"):
            raise FormatError(f"unknown split {self.split!r}")
        if self.provenance is not None and len(self.provenance) != self.count:
            raise FormatError("provenance length does not match count")


def _paths(path) -> tuple[Path, Path]:
    p = Path(path)
    stem = p.name
    for suffix in (".manifest.json", ".bin"):
        if stem.endswith(suffix):
            stem = stem[: -len(suffix)]
    return p.with_name(stem + ".manifest.json"), p.with_name(stem + ".bin")


def write_dataset(pairs: PairSet, manifest: DatasetManifest, path) -> None:
    if manifest.count != len(pairs) or manifest.dim != pairs.dim:
        raise FormatError(
            f"manifest says {manifest.count}x{manifest.dim}, pairs are {len(pairs)}x{pairs.dim}"
        )
    bad = ~(np.isfinite(pairs.e_plus).all(axis=1) & np.isfinite(pairs.e_minus).all(axis=1))
    if bad.any():
        raise FormatError("non-finite embedding", int(np.argmax(bad)))
    if pairs.provenance is not None and manifest.provenance is None:
        manifest.provenance = [list(t) for t in pairs.provenance]
    manifest.validate()
    mpath, bpath = _paths(path)
    mpath.parent.mkdir(parents=True, exist_ok=True)
    blob = np.concatenate([pairs.e_plus, pairs.e_minus], axis=1).astype("<f4")
    bpath.write_bytes(blob.tobytes())
    body = asdict(manifest)
    body["prompt_ids"] = [int(i) for i in pairs.prompt_ids]
    mpath.write_text(json.dumps(body, sort_keys=True) + "\n")


def read_manifest(path) -> tuple[DatasetManifest, list[int] | None]:
    mpath, _ = _paths(path)
    body = json.loads(Path(mpath).read_text())
    prompt_ids = body.pop("prompt_ids", None)
    manifest = DatasetManifest(**body)
    manifest.validate()
    return manifest, prompt_ids


def read_dataset(path) -> PairSet:
    manifest, prompt_ids = read_manifest(path)
    _, bpath = _paths(path)
    raw = Path(bpath).read_bytes()
    record_bytes = 2 * manifest.dim * 4
    expected = manifest.count * record_bytes
    if len(raw) != expected:
        if manifest.count and len(raw) % manifest.count == 0:
            # every record has the wrong width, so the first one is already bad
            record = 0
        else:
            record = len(raw) // record_bytes
        raise FormatError(f"blob has {len(raw)} bytes, expected {expected}", record)
    blob = np.frombuffer(raw, dtype="<f4").astype(np.float64).reshape(manifest.count, 2 * manifest.dim)
    bad = ~np.isfinite(blob).all(axis=1)
    if bad.any():
        raise FormatError("non-finite embedding", int(np.argmax(bad)))
    if prompt_ids is None:
        prompt_ids = list(range(manifest.count))
    if len(prompt_ids) != manifest.count:
        raise FormatError("prompt_ids length does not match count")
    prov = [tuple(t) for t in manifest.provenance] if manifest.provenance is not None else None
    d = manifest.dim
    return PairSet(prompt_ids, blob[:, :d], blob[:, d:], prov)


def read_jsonl(path, dim: int | None = None) -> PairSet:
    """Ingest externally produced embeddings, validating every record."""
    ids, plus, minus = [], [], []
    with open(path) as fh:
        for i, line in enumerate(fh):
            if not line.strip():
                continue
            rec = json.loads(line)
            ep = np.asarray(rec["e_plus"], dtype=np.float64)
            em = np.asarray(rec["e_minus"], dtype=np.float64)
            if dim is None:
                dim = ep.size
            if ep.shape != (dim,) or em.shape != (dim,):
                raise FormatError(f"expected dim {dim}, got {ep.size} and {em.size}", i)
            if not (np.isfinite(ep).all() and np.isfinite(em).all()):
                raise FormatError("non-finite embedding", i)
            ids.append(int(rec["prompt_id"]))
            plus.append(ep)
            minus.append(em)
    if not ids:
        raise FormatError("no records in JSONL file")
    return PairSet(ids, np.stack(plus), np.stack(minus))


def write_jsonl(pairs: PairSet, path) -> None:
    with open(path, "w") as fh:
        for p in pairs:
            fh.write(json.dumps({"prompt_id": p.prompt_id, "e_plus": p.e_plus.tolist(), "e_minus": p.e_minus.tolist()}) + "\n")


def write_candidates(test: CandidateSets, path, seed: int = 0, gold_digest: str = "") -> None:
    """Test candidates: ``<name>.bin`` holds (prompts, n, d) f32le; manifest alongside."""
    mpath, bpath = _paths(path)
    mpath.parent.mkdir(parents=True, exist_ok=True)
    bpath.write_bytes(test.candidates.astype("<f4").tobytes())
    m, n, d = test.candidates.shape
    body = {
        "dim": d, "count": m, "candidates_per_prompt": n, "split": "test", "dtype": DTYPE,
        "seed": seed, "gold_spec_digest": gold_digest, "prompt_ids": [int(i) for i in test.prompt_ids],
    }
    mpath.write_text(json.dumps(body, sort_keys=True) + "\n")


def read_candidates(path) -> CandidateSets:
    mpath, bpath = _paths(path)
    body = json.loads(Path(mpath).read_text())
    m, n, d = body["count"], body["candidates_per_prompt"], body["dim"]
    raw = Path(bpath).read_bytes()
    if len(raw) != m * n * d * 4:
        raise FormatError(f"blob has {len(raw)} bytes, expected {m * n * d * 4}")
    cands = np.frombuffer(raw, dtype="<f4").astype(np.float64).reshape(m, n, d)
    return CandidateSets(np.asarray(body["prompt_ids"], dtype=np.int64), cands)
