"""Episodic N-way K-shot evaluation on frozen embeddings."""

from __future__ import annotations

import csv
import io
import json
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace
from typing import Callable, Optional, Sequence

import numpy as np

from .data import LabeledDataset
from .errors import ArgumentError, NormalizationError, SamplingError
from .model import ModelBundle
from .transforms import TransformFamily

CI_Z = 1.96
ABLATION_FAMILIES = ("none", "Rot4", "HS4", "VS4", "HS16", "VS16", "Rot32", "Rot256", "Rot1024")


@dataclass
class Episode:
    classes: np.ndarray  # dataset class ids, position = episode label
    support: np.ndarray  # dataset indices, N*K
    support_labels: np.ndarray
    query: np.ndarray  # dataset indices, N*Q
    query_labels: np.ndarray


def sample_episode(ds: LabeledDataset, split: str, N: int, K: int, Q: int, rng: np.random.Generator) -> Episode:
    pool = ds.classes(split)
    if len(pool) < N:
        raise SamplingError(f"split {split!r} has {len(pool)} classes, {N}-way episodes need {N - len(pool)} more")
    short = {c: len(ds.indices_of(c)) for c in pool if len(ds.indices_of(c)) < K + Q}
    if short:
        c, n = next(iter(short.items()))
        raise SamplingError(f"class {c} has {n} images but K+Q={K + Q} are needed ({K + Q - n} short)")
    classes = rng.choice(pool, size=N, replace=False)
    sup, sup_y, qry, qry_y = [], [], [], []
    for label, c in enumerate(classes):
        picked = rng.choice(ds.indices_of(c), size=K + Q, replace=False)
        sup.append(picked[:K])
        qry.append(picked[K:])
        sup_y.append(np.full(K, label))
        qry_y.append(np.full(Q, label))
    return Episode(np.asarray(classes), np.concatenate(sup), np.concatenate(sup_y), np.concatenate(qry), np.concatenate(qry_y))


# ----------------------------------------------------------------------
# heads
# ----------------------------------------------------------------------


def l2_normalize(x: np.ndarray, strict: bool = False) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    norms = np.linalg.norm(x, axis=1, keepdims=True)
    if strict and np.any(norms == 0):
        raise NormalizationError(f"{int(np.sum(norms == 0))} feature rows have zero norm")
    return x / np.maximum(norms, 1e-12)


@dataclass
class LogisticHead:
    W: np.ndarray  # (d, N)
    b: np.ndarray
    normalize: bool = True

    def logits(self, feats: np.ndarray) -> np.ndarray:
        x = l2_normalize(feats) if self.normalize else np.asarray(feats, dtype=np.float64)
        return x @ self.W + self.b

    def predict(self, feats: np.ndarray) -> np.ndarray:
        return self.logits(feats).argmax(1)


def fit_logistic_head(
    feats: np.ndarray,
    labels: Sequence[int],
    num_classes: Optional[int] = None,
    *,
    l2: float = 0.01,
    lr: float = 1.0,
    iters: int = 300,
    normalize: bool = True,
) -> LogisticHead:
    """Multinomial logistic regression by full-batch gradient descent from zero.

    Minimizes mean cross-entropy plus ``l2 * sum(W**2)`` (bias unpenalized).
    """
    y = np.asarray(labels, dtype=np.int64)
    n_cls = int(y.max()) + 1 if num_classes is None else num_classes
    x = l2_normalize(feats) if normalize else np.asarray(feats, dtype=np.float64)
    n, d = x.shape
    onehot = np.eye(n_cls)[y]
    W = np.zeros((d, n_cls))
    b = np.zeros(n_cls)
    for _ in range(iters):
        z = x @ W + b
        z -= z.max(1, keepdims=True)
        p = np.exp(z)
        p /= p.sum(1, keepdims=True)
        r = (p - onehot) / n
        W -= lr * (x.T @ r + 2 * l2 * W)
        b -= lr * r.sum(0)
    return LogisticHead(W, b, normalize)


def cosine_classify(support: np.ndarray, labels: Sequence[int], query: np.ndarray, tau: float = 10.0) -> np.ndarray:
    """Nearest class prototype (mean support embedding) by scaled cosine similarity."""
    if not tau > 0:
        raise ArgumentError(f"tau must be positive, got {tau}")
    y = np.asarray(labels, dtype=np.int64)
    s = l2_normalize(support, strict=True)
    q = l2_normalize(query, strict=True)
    protos = np.stack([s[y == c].mean(0) for c in range(int(y.max()) + 1)])
    protos = l2_normalize(protos, strict=True)
    return (tau * (q @ protos.T)).argmax(1)


# ----------------------------------------------------------------------
# reports
# ----------------------------------------------------------------------


@dataclass
class EvalReport:
    accuracies: list[float]
    config: dict = field(default_factory=dict)

    @property
    def mean(self) -> float:
        return float(np.mean(self.accuracies))

    @property
    def std(self) -> float:
        # population standard deviation
        return float(np.std(self.accuracies))

    @property
    def half_width(self) -> float:
        return CI_Z * self.std / np.sqrt(len(self.accuracies))

    def to_dict(self) -> dict:
        return {
            "mean": self.mean,
            "half_width": self.half_width,
            "episodes": len(self.accuracies),
            "accuracies": list(self.accuracies),
            "config": self.config,
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True, indent=2)

    def summary(self) -> str:
        return f"{100 * self.mean:.2f} +- {100 * self.half_width:.2f}"


def _threads() -> int:
    raw = os.environ.get("CRAT_THREADS", "1")
    try:
        return max(1, int(raw))
    except ValueError:
        raise ArgumentError(f"CRAT_THREADS must be an integer, got {raw!r}") from None


def evaluate_features(
    feats: np.ndarray,
    ds: LabeledDataset,
    split: str = "novel",
    N: int = 5,
    K: int = 1,
    Q: int = 15,
    episodes: int = 600,
    head: str = "logistic",
    seed: int = 0,
    threads: Optional[int] = None,
) -> EvalReport:
    """Score episodes against a precomputed (len(ds), d) feature table."""
    if head not in ("logistic", "cosine"):
        raise ArgumentError(f"unknown head {head!r}; expected 'logistic' or 'cosine'")
    streams = np.random.SeedSequence(seed).spawn(episodes)

    def one(ss: np.random.SeedSequence) -> float:
        ep = sample_episode(ds, split, N, K, Q, np.random.default_rng(ss))
        if head == "logistic":
            pred = fit_logistic_head(feats[ep.support], ep.support_labels, N).predict(feats[ep.query])
        else:
            pred = cosine_classify(feats[ep.support], ep.support_labels, feats[ep.query])
        return float(np.mean(pred == ep.query_labels))

    workers = threads or _threads()
    if workers > 1:
        with ThreadPoolExecutor(workers) as pool:
            accs = list(pool.map(one, streams))
    else:
        accs = [one(ss) for ss in streams]
    config = {"split": split, "N": N, "K": K, "Q": Q, "episodes": episodes, "head": head, "seed": seed}
    return EvalReport(accs, config)


def embed_dataset(model: ModelBundle, ds: LabeledDataset, split: str = "novel") -> np.ndarray:
    """Eval-mode embeddings in a table indexed by dataset position (other splits left zero)."""
    idx = ds.indices(split)
    table = np.zeros((len(ds), model.config.embed_dim), dtype=np.float32)
    table[idx] = model.without_heads().embed(ds.images[idx])
    return table


def evaluate(
    model: ModelBundle,
    ds: LabeledDataset,
    split: str = "novel",
    N: int = 5,
    K: int = 1,
    Q: int = 15,
    episodes: int = 600,
    head: str = "logistic",
    seed: int = 0,
    threads: Optional[int] = None,
) -> EvalReport:
    """Embed with E only (training heads discarded), then run seeded episodes."""
    feats = embed_dataset(model, ds, split)
    return evaluate_features(feats, ds, split, N, K, Q, episodes, head, seed, threads)


# ----------------------------------------------------------------------
# ablation
# ----------------------------------------------------------------------


@dataclass
class AblationRow:
    family: str
    classes: int
    m: int
    one_shot: EvalReport
    five_shot: EvalReport
    per_seed: list[dict] = field(default_factory=list)

    def to_dict(self) -> dict:
        return {
            "family": self.family,
            "classes": self.classes,
            "m": self.m,
            "one_shot": self.one_shot.mean,
            "one_shot_hw": self.one_shot.half_width,
            "five_shot": self.five_shot.mean,
            "five_shot_hw": self.five_shot.half_width,
            "per_seed": self.per_seed,
        }


def family_train_config(base, family: str):
    """The training config for one ablation row; ``none`` is a lambda=0 run without a rotation head."""
    if family == "none":
        return replace(base, family=None, lam=0.0, m=None)
    return replace(base, family=TransformFamily.parse(family).tag, m=None)


def ablate_families(
    config,
    ds: LabeledDataset,
    seeds: Sequence[int] = (0,),
    families: Sequence[str] = ABLATION_FAMILIES,
    episodes: int = 600,
    Q: int = 15,
    eval_seed: int = 0,
    train_fn: Optional[Callable] = None,
    progress: Optional[Callable[[str], None]] = None,
) -> list[AblationRow]:
    """Train one model per (family, seed) under the same budget and evaluate 1- and 5-shot.

    ``train_fn(train_config, dataset) -> ModelBundle`` defaults to phase-1
    training; callers can pass a caching wrapper.
    """
    from .train import train_phase1

    def default_train(cfg, data):
        return train_phase1(cfg, data).model

    train_fn = train_fn or default_train
    rows = []
    for fam in families:
        cfg0 = family_train_config(config, fam)
        one, five, per_seed = [], [], []
        for seed in seeds:
            cfg = replace(cfg0, seed=seed)
            model = train_fn(cfg, ds)
            feats = embed_dataset(model, ds, "novel")
            r1 = evaluate_features(feats, ds, "novel", 5, 1, Q, episodes, seed=eval_seed)
            r5 = evaluate_features(feats, ds, "novel", 5, 5, Q, episodes, seed=eval_seed)
            one += r1.accuracies
            five += r5.accuracies
            per_seed.append({"seed": seed, "one_shot": r1.mean, "five_shot": r5.mean})
            if progress is not None:
                progress(f"{fam} seed {seed}: 1-shot {r1.summary()}  5-shot {r5.summary()}")
        classes = 0 if fam == "none" else TransformFamily.parse(fam).cardinality
        ecfg = {"split": "novel", "N": 5, "Q": Q, "episodes": episodes, "seed": eval_seed, "train_seeds": list(seeds)}
        rows.append(
            AblationRow(
                family=fam,
                classes=classes,
                m=cfg0.replication,
                one_shot=EvalReport(one, {**ecfg, "K": 1}),
                five_shot=EvalReport(five, {**ecfg, "K": 5}),
                per_seed=per_seed,
            )
        )
    return rows


CSV_FIELDS = ("family", "classes", "m", "one_shot", "one_shot_hw", "five_shot", "five_shot_hw")


def ablation_csv(rows: Sequence[AblationRow]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(CSV_FIELDS)
    for row in rows:
        d = row.to_dict()
        w.writerow([d[k] if isinstance(d[k], (str, int)) else f"{d[k]:.6f}" for k in CSV_FIELDS])
    return buf.getvalue()
