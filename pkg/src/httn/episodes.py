"""Episodic few-shot machinery: sampling, prototypes, Euclidean matching,
cross-entropy and multi-episode evaluation."""
from __future__ import annotations

import csv
import json
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field

import numpy as np

from . import tensor as tc
from .errors import CapacityError, ConfigError, DimensionError
from .tensor import Tensor


@dataclass
class Episode:
    way: int
    shot: int
    queries: int
    support: list
    support_labels: np.ndarray
    query: list
    query_labels: np.ndarray
    classes: list = field(default_factory=list)
    seed: int | None = None


def sample_episode(manifest, N: int, K: int, Q: int, rng: np.random.Generator, seed: int | None = None) -> Episode:
    """Draw N classes, then K support and Q query samples per class, all
    without replacement. Episode label j refers to the j-th drawn class."""
    if min(N, K) < 1 or Q < 0:
        raise ConfigError(f"invalid episode shape N={N} K={K} Q={Q}")
    groups = manifest.by_class()
    eligible = [c for c in sorted(groups) if len(groups[c]) >= K + Q]
    if len(eligible) < N:
        raise CapacityError(
            f"need {N} classes with >= {K + Q} samples, manifest has {len(eligible)} "
            f"(deficit {N - len(eligible)})"
        )
    chosen = rng.choice(len(eligible), size=N, replace=False)
    support, query, s_lab, q_lab, classes = [], [], [], [], []
    for j, ci in enumerate(chosen):
        c = eligible[ci]
        classes.append(c)
        pool = groups[c]
        pick = rng.choice(len(pool), size=K + Q, replace=False)
        support += [pool[i] for i in pick[:K]]
        query += [pool[i] for i in pick[K:]]
        s_lab += [j] * K
        q_lab += [j] * Q
    return Episode(N, K, Q, support, np.array(s_lab), query, np.array(q_lab), classes, seed)


def prototypes(Z, labels, N: int | None = None):
    """Per-class mean of support representations; returns [N, C].

    Works on Tensors (differentiable) and on plain arrays.
    """
    labels = np.asarray(labels, dtype=np.int64)
    N = int(labels.max()) + 1 if N is None else N
    counts = np.bincount(labels, minlength=N)
    if (counts == 0).any():
        raise ConfigError(f"classes {np.flatnonzero(counts == 0).tolist()} have no support samples")
    dtype = Z.dtype if isinstance(Z, (Tensor, np.ndarray)) else np.float64
    avg = np.zeros((N, len(labels)), dtype=dtype)
    avg[labels, np.arange(len(labels))] = 1.0
    avg /= counts[:, None]
    if isinstance(Z, Tensor):
        return tc.matmul(Tensor(avg), Z)
    return avg @ np.asarray(Z)


def match(queries, protos):
    """Logits = negative squared Euclidean distance, shape [Nq, N]."""
    if queries.shape[-1] != protos.shape[-1]:
        raise DimensionError(f"query dim {queries.shape} does not match prototypes {protos.shape}")
    if isinstance(queries, Tensor) or isinstance(protos, Tensor):
        q = tc.reshape(tc.as_tensor(queries), (queries.shape[0], 1, queries.shape[1]))
        p = tc.reshape(tc.as_tensor(protos), (1,) + tuple(protos.shape))
        d = q - p
        return tc.reduce_sum(d * d, axes=-1) * -1.0
    d = np.asarray(queries)[:, None, :] - np.asarray(protos)[None, :, :]
    return -(d * d).sum(axis=-1)


def predict(logits) -> np.ndarray:
    # np.argmax returns the first maximum: ties go to the lowest class index
    data = logits.data if isinstance(logits, Tensor) else np.asarray(logits)
    return np.argmax(data, axis=1)


def episode_loss(logits: Tensor, labels) -> Tensor:
    return tc.cross_entropy(tc.as_tensor(logits), labels)


@dataclass
class EvalReport:
    episodes: int
    mean_accuracy: float
    ci95: float
    accuracies: list

    def to_json(self, path) -> None:
        with open(path, "w") as fh:
            json.dump(asdict(self), fh, indent=2)

    def to_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["episode", "accuracy"])
            for i, a in enumerate(self.accuracies):
                w.writerow([i, repr(float(a))])


def ci95(accuracies) -> float:
    acc = np.asarray(accuracies, dtype=np.float64)
    return float(1.96 * acc.std() / math.sqrt(len(acc)))


def report_from(accuracies) -> EvalReport:
    acc = [float(a) for a in accuracies]
    return EvalReport(len(acc), float(np.mean(acc)), ci95(acc), acc)


def episode_seed(seed: int, index: int) -> int:
    return int(seed) ^ int(index)


def embed_manifest(model, manifest, features: dict | None = None, batch: int = 64) -> dict:
    """Eval-mode embedding of every sample, keyed by sample id."""
    features = features if features is not None else manifest.load_all()
    ids = [s.sample_id for s in manifest.samples]
    out = {}
    with tc.no_grad():
        for i in range(0, len(ids), batch):
            chunk = ids[i:i + batch]
            Z = model.embed(np.stack([features[k] for k in chunk]), train=False)
            Z = Z.data if isinstance(Z, Tensor) else np.asarray(Z)
            out.update(zip(chunk, Z))
    return out


def evaluate(model, manifest, episodes: int, N: int = 5, K: int = 5, Q: int = 5, seed: int = 0,
             features: dict | None = None, workers: int = 1) -> EvalReport:
    """Mean query accuracy (percent) over ``episodes`` episodes.

    Episode i is drawn with seed ``seed ^ i``. Since eval-mode embeddings
    do not depend on batch composition, each sample is embedded once.
    """
    emb = embed_manifest(model, manifest, features)

    def run(i: int) -> float:
        s = episode_seed(seed, i)
        ep = sample_episode(manifest, N, K, Q, np.random.default_rng(s), seed=s)
        Zs = np.stack([emb[r.sample_id] for r in ep.support])
        Zq = np.stack([emb[r.sample_id] for r in ep.query])
        pred = predict(match(Zq, prototypes(Zs, ep.support_labels, N)))
        return 100.0 * float(np.mean(pred == ep.query_labels))

    if workers > 1:
        with ThreadPoolExecutor(workers) as pool:
            accs = list(pool.map(run, range(episodes)))
    else:
        accs = [run(i) for i in range(episodes)]
    return report_from(accs)
