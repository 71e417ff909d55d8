"""Embedding-MLP reward head trained with the Bradley-Terry pairwise loss."""

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

PARAM_NAMES = ("b1", "b2", "w1", "w2")


@dataclass
class RewardHead:
    """``r(e) = w2 . relu(e @ w1 + b1) + b2``."""

    w1: np.ndarray
    b1: np.ndarray
    w2: np.ndarray
    b2: np.ndarray

    @property
    def dim(self) -> int:
        return self.w1.shape[0]

    @property
    def hidden(self) -> int:
        return self.w1.shape[1]

    @classmethod
    def init(cls, dim: int, rng: Rng, hidden: int = 256) -> "RewardHead":
        def uniform(shape, fan_in):
            bound = 1.0 / math.sqrt(fan_in)
            return ((2.0 * rng.uniform(int(np.prod(shape))) - 1.0) * bound).reshape(shape)

        return cls(
            uniform((dim, hidden), dim), uniform((hidden,), dim),
            uniform((hidden,), hidden), uniform((), hidden),
        )

    def __call__(self, e) -> np.ndarray | float:
        e = np.asarray(e, dtype=np.float64)
        if e.shape[-1] != self.dim:
            raise ShapeError(f"reward head expects dim {self.dim}, got {e.shape[-1]}")
        out = np.maximum(e @ self.w1 + self.b1, 0.0) @ self.w2 + self.b2
        return float(out) if np.ndim(out) == 0 else out

    def params(self) -> dict[str, np.ndarray]:
        return {k: getattr(self, k) for k in PARAM_NAMES}

    def vector(self) -> np.ndarray:
        return np.concatenate([np.ravel(getattr(self, k)) for k in PARAM_NAMES])

    def with_vector(self, v: np.ndarray) -> "RewardHead":
        parts, i = {}, 0
        for k in PARAM_NAMES:
            w = np.asarray(getattr(self, k))
            parts[k] = np.array(v[i:i + w.size]).reshape(w.shape)
            i += w.size
        return RewardHead(**parts)

    def copy(self) -> "RewardHead":
        return RewardHead(self.w1.copy(), self.b1.copy(), self.w2.copy(), np.array(self.b2, dtype=np.float64))


def softplus(x: np.ndarray) -> np.ndarray:
    return np.logaddexp(0.0, x)


def sigmoid(x: np.ndarray) -> np.ndarray:
    return 0.5 * (1.0 + np.tanh(0.5 * x))


def bt_loss(head: RewardHead, e_plus, e_minus):
    """Mean of -log sigmoid(r(e+) - r(e-)) in softplus form, with gradients.

    Accepts single embeddings or batches. Returns ``(loss, grads)``.
    """
    ep = np.atleast_2d(np.asarray(e_plus, dtype=np.float64))
    em = np.atleast_2d(np.asarray(e_minus, dtype=np.float64))
    if ep.shape != em.shape or ep.shape[1] != head.dim:
        raise ShapeError(f"bt_loss got {ep.shape} and {em.shape} for a dim-{head.dim} head")
    n = ep.shape[0]
    pre_p = ep @ head.w1 + head.b1
    pre_m = em @ head.w1 + head.b1
    act_p, act_m = np.maximum(pre_p, 0.0), np.maximum(pre_m, 0.0)
    margin = (act_p - act_m) @ head.w2
    loss = float(np.mean(softplus(-margin)))
    if not math.isfinite(loss):
        raise NumericError("non-finite Bradley-Terry loss")

    d_margin = -sigmoid(-margin) / n
    d_act_p = np.outer(d_margin, head.w2)
    d_pre_p = d_act_p * (pre_p > 0)
    d_pre_m = -d_act_p * (pre_m > 0)
    grads = {
        "w1": ep.T @ d_pre_p + em.T @ d_pre_m,
        "b1": d_pre_p.sum(axis=0) + d_pre_m.sum(axis=0),
        "w2": (act_p - act_m).T @ d_margin,
        # the bias cancels in the margin
        "b2": np.zeros(()),
    }
    return loss, grads


def pair_accuracy(head: RewardHead, pairs: PairSet) -> float:
    return float(np.mean(head(pairs.e_plus) > head(pairs.e_minus)))


def mean_bt_loss(head: RewardHead, pairs: PairSet) -> float:
    margin = head(pairs.e_plus) - head(pairs.e_minus)
    return float(np.mean(softplus(-np.atleast_1d(margin))))


@dataclass
class RewardTrainConfig:
    lr: float = 1e-4
    max_epochs: int = 20
    patience: int = 5
    batch: int = 128
    validation_fraction: float = 0.1
    hidden: int = 256
    seed: int = 0

    def validate(self) -> None:
        if self.max_epochs < 1:
            raise ConfigError("max_epochs: must be >= 1")
        if not 1 <= self.patience <= self.max_epochs:
            raise ConfigError("patience: must be in [1, max_epochs]")
        if not 0 < self.validation_fraction < 1:
            raise ConfigError("validation_fraction: must be in (0, 1)")
        if self.batch < 1:
            raise ConfigError("batch: must be >= 1")
        if self.lr <= 0:
            raise ConfigError("lr: must be > 0")


@dataclass
class RewardHistory:
    train_loss: list[float] = field(default_factory=list)
    val_loss: list[float] = field(default_factory=list)
    best_epoch: int = -1
    stopped_early: bool = False


def train_reward(pairs: PairSet, cfg: RewardTrainConfig) -> tuple[RewardHead, RewardHistory]:
    """Adam on the BT loss with early stopping on validation BT loss.

    Returns the checkpoint with the best validation loss.
    """
    cfg.validate()
    n = len(pairs)
    if n < 2:
        raise ValueError("train_reward needs at least 2 pairs")
    root = Rng(cfg.seed)
    order = root.spawn(1).permutation(n)
    n_val = min(n - 1, max(1, int(round(cfg.validation_fraction * n))))
    val, train = pairs.subset(order[:n_val]), pairs.subset(order[n_val:])
    head = RewardHead.init(pairs.dim, root.spawn(2), cfg.hidden)
    shuffle_rng = root.spawn(3)
    opt = Adam(lr=cfg.lr)
    hist = RewardHistory()
    best, best_loss, bad_epochs = head.copy(), mean_bt_loss(head, val), 0
    weights = head.params()
    m = len(train)
    for epoch in range(cfg.max_epochs):
        perm = shuffle_rng.permutation(m)
        total = 0.0
        for start in range(0, m, cfg.batch):
            idx = perm[start:start + cfg.batch]
            head = RewardHead(**weights)
            try:
                loss, grads = bt_loss(head, train.e_plus[idx], train.e_minus[idx])
            except NumericError as exc:
                raise NumericError(f"reward training diverged at epoch {epoch}: {exc}") from exc
            opt.step(weights, grads)
            total += loss * len(idx)
        head = RewardHead(**weights)
        val_loss = mean_bt_loss(head, val)
        hist.train_loss.append(total / m)
        hist.val_loss.append(val_loss)
        log.debug("reward epoch %d train %.5f val %.5f", epoch, total / m, val_loss)
        if val_loss < best_loss:
            best, best_loss, bad_epochs = head.copy(), val_loss, 0
            hist.best_epoch = epoch
        else:
            bad_epochs += 1
            if bad_epochs >= cfg.patience:
                hist.stopped_early = epoch + 1 < cfg.max_epochs
                break
    return best, hist


def estimation_error(head: RewardHead, test_pairs: PairSet, reference: RewardHead) -> float:
    """Mean BT loss of ``head`` minus that of ``reference`` on the same pairs."""
    if len(test_pairs) == 0:
        raise ValueError("estimation_error needs a nonempty test set")
    if head.dim != reference.dim:
        raise ShapeError("head and reference disagree on embedding dim")
    return mean_bt_loss(head, test_pairs) - mean_bt_loss(reference, test_pairs)


def save_head(head: RewardHead, path, extra: dict | None = None) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    header = {"kind": "reward_head", "dim": head.dim, "hidden": head.hidden, **(extra or {})}
    path.with_suffix(".json").write_text(json.dumps(header, sort_keys=True) + "\n")
    path.with_suffix(".bin").write_bytes(head.vector().astype("<f4").tobytes())


def load_head(path) -> RewardHead:
    path = Path(path)
    header = json.loads(path.with_suffix(".json").read_text())
    if header.get("kind") != "reward_head":
        raise FormatError(f"{path} is not a reward head checkpoint")
    d, h = header["dim"], header["hidden"]
    blob = np.frombuffer(path.with_suffix(".bin").read_bytes(), dtype="<f4").astype(np.float64)
    expected = d * h + 2 * h + 1
    if blob.size != expected:
        raise FormatError(f"reward blob has {blob.size} floats, expected {expected}")
    template = RewardHead(np.zeros((d, h)), np.zeros(h), np.zeros(h), np.zeros(()))
    return template.with_vector(blob)


def config_dict(cfg: RewardTrainConfig) -> dict:
    return asdict(cfg)
