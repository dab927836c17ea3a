"""Episodic fine-tuning: SGD with momentum, cosine learning-rate decay,
frozen-backbone checks and checkpoint files."""
from __future__ import annotations

import csv
import hashlib
import json
import logging
import math
import struct
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import tensor as tc
from .episodes import episode_loss, match, predict, prototypes, sample_episode
from .errors import ConfigError, FormatError, InvariantViolation
from .model import HTTN, ModelConfig

log = logging.getLogger(__name__)

CKPT_MAGIC = b"HTCK"
CKPT_VERSION = 1


@dataclass
class TrainConfig:
    epochs: int = 40
    episodes_per_epoch: int = 100
    base_lr: float = 1e-2
    momentum: float = 0.9
    weight_decay: float = 1e-4
    seed: int = 0
    N: int = 5
    K: int = 5
    Q: int = 5

    def validate(self) -> "TrainConfig":
        if self.epochs < 1:
            raise ConfigError(f"epochs must be >= 1, got {self.epochs}")
        if self.episodes_per_epoch < 1:
            raise ConfigError("episodes_per_epoch must be >= 1")
        if not self.base_lr >= 0:
            raise ConfigError(f"base_lr must be non-negative, got {self.base_lr}")
        return self


def config_hash(model_cfg: ModelConfig, train_cfg: TrainConfig | None = None) -> str:
    blob = {"model": asdict(model_cfg), "train": asdict(train_cfg) if train_cfg else None}
    return hashlib.sha256(json.dumps(blob, sort_keys=True).encode()).hexdigest()


def cosine_lr(step: int, total_steps: int, base_lr: float) -> float:
    if not 0 <= step <= total_steps:
        raise ConfigError(f"step {step} outside 0..{total_steps}")
    if step == total_steps:
        return 0.0
    return base_lr * 0.5 * (1.0 + math.cos(math.pi * step / total_steps))


def sgd_step(params: dict, lr: float, momentum: float = 0.0, weight_decay: float = 0.0,
             velocity: dict | None = None) -> dict:
    """In-place SGD on ``params`` (name -> Tensor, using ``.grad``).

    v <- momentum * v + grad + wd * param; param <- param - lr * v.
    Returns the velocity dict for the next call.
    """
    velocity = {} if velocity is None else velocity
    for name, p in params.items():
        g = p.grad
        if g is None:
            g = np.zeros_like(p.data)
        elif not np.isfinite(g).all():
            raise InvariantViolation(f"non-finite gradient for parameter {name!r}")
        if g.shape != p.shape:
            raise ConfigError(f"gradient shape {g.shape} does not match parameter {name!r} {p.shape}")
        d = g + weight_decay * p.data if weight_decay else g
        v = velocity.get(name)
        v = d if v is None else momentum * v + d
        velocity[name] = v
        p.data = (p.data - lr * v).astype(p.dtype)
    return velocity


def count_trainable(model: HTTN) -> int:
    return sum(t.size for t in model.trainable().values())


def episode_batch(ep, features: dict) -> np.ndarray:
    return np.stack([features[r.sample_id] for r in ep.support + ep.query])


def episode_forward(model: HTTN, ep, features: dict, train: bool = True):
    """Loss and logits for one episode, all videos in one batch."""
    Z = model.embed(episode_batch(ep, features), train=train)
    n_s = len(ep.support)
    Zs = tc.index(Z, slice(0, n_s))
    Zq = tc.index(Z, slice(n_s, None))
    logits = match(Zq, prototypes(Zs, ep.support_labels, ep.way))
    return episode_loss(logits, ep.query_labels), logits


# ----------------------------------------------------------------------------
# checkpoints
# ----------------------------------------------------------------------------

@dataclass
class CheckpointBundle:
    tensors: dict
    config_hash: str
    epoch: int
    rng_state: dict
    extra: dict = field(default_factory=dict)

    @classmethod
    def from_model(cls, model: HTTN, cfg_hash: str, epoch: int, rng: np.random.Generator, extra=None):
        tensors = {k: t.data.copy() for k, t in model.trainable().items()}
        tensors.update({k: v.copy() for k, v in model.buffers().items()})
        return cls(tensors, cfg_hash, epoch, rng.bit_generator.state, dict(extra or {}))

    def apply(self, model: HTTN) -> None:
        params, buffers = model.trainable(), model.buffers()
        missing = (set(params) | set(buffers)) - set(self.tensors)
        if missing:
            raise FormatError(f"checkpoint lacks tensors {sorted(missing)}")
        for name, arr in self.tensors.items():
            if name in params:
                if params[name].shape != arr.shape:
                    raise FormatError(f"shape mismatch for {name}: {arr.shape} vs {params[name].shape}")
                params[name].data = arr.astype(model.dtype)
            elif name in buffers:
                buffers[name][...] = arr
            else:
                raise FormatError(f"checkpoint tensor {name!r} has no home in the model")

    def save(self, path) -> None:
        entries, payload, offset = [], [], 0
        for name, arr in self.tensors.items():
            blob = np.ascontiguousarray(arr, dtype="<f4").tobytes()
            entries.append({"name": name, "shape": list(arr.shape), "offset": offset, "nbytes": len(blob)})
            payload.append(blob)
            offset += len(blob)
        header = json.dumps({
            "config_hash": self.config_hash, "epoch": self.epoch, "rng_state": self.rng_state,
            "extra": self.extra, "tensors": entries,
        }).encode()
        with open(path, "wb") as fh:
            fh.write(struct.pack("<4sII", CKPT_MAGIC, CKPT_VERSION, len(header)))
            fh.write(header)
            for blob in payload:
                fh.write(blob)

    @classmethod
    def load(cls, path) -> "CheckpointBundle":
        raw = Path(path).read_bytes()
        if len(raw) < 12:
            raise FormatError(f"{path}: truncated checkpoint", offset=len(raw))
        magic, version, hlen = struct.unpack_from("<4sII", raw)
        if magic != CKPT_MAGIC:
            raise FormatError(f"{path}: bad magic {magic!r}", offset=0)
        if version != CKPT_VERSION:
            raise FormatError(f"{path}: unsupported checkpoint version {version}", offset=4)
        try:
            header = json.loads(raw[12:12 + hlen])
        except (json.JSONDecodeError, UnicodeDecodeError):
            raise FormatError(f"{path}: corrupt header", offset=12) from None
        base = 12 + hlen
        tensors = {}
        for e in header["tensors"]:
            start = base + e["offset"]
            if start + e["nbytes"] > len(raw):
                raise FormatError(f"{path}: payload for {e['name']} truncated", offset=len(raw))
            arr = np.frombuffer(raw, dtype="<f4", count=e["nbytes"] // 4, offset=start)
            tensors[e["name"]] = arr.reshape(e["shape"]).astype(np.float32)
        return cls(tensors, header["config_hash"], header["epoch"], header["rng_state"], header.get("extra", {}))


# ----------------------------------------------------------------------------
# training loop
# ----------------------------------------------------------------------------

@dataclass
class TrainResult:
    checkpoint: CheckpointBundle
    metrics: list  # dicts: epoch, step, lr, loss, acc
    wall_time: float = 0.0
    peak_bytes: int = 0

    def write_metrics(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.DictWriter(fh, fieldnames=["epoch", "step", "lr", "loss", "acc"])
            w.writeheader()
            for row in self.metrics:
                w.writerow({k: repr(v) if isinstance(v, float) else v for k, v in row.items()})


def graph_bytes(loss) -> int:
    """Bytes held by every recorded activation reachable from ``loss``."""
    graph = tc.GradGraph.from_output(loss)
    seen, total = set(), 0
    for node in graph.nodes:
        for t in node.inputs:
            if id(t) not in seen:
                seen.add(id(t))
                total += t.data.nbytes
    return total + loss.data.nbytes


def train(cfg: TrainConfig, manifest, model: HTTN, features: dict | None = None,
          out_dir=None, progress=None) -> TrainResult:
    cfg.validate()
    if manifest.split != "base":
        log.warning("training on a %r split manifest", manifest.split)
    features = features if features is not None else manifest.load_all()
    params = model.trainable()
    cfg_hash = config_hash(model.cfg, cfg)
    frozen_ref = model.frozen_digest()
    rng = np.random.default_rng(cfg.seed)
    total = cfg.epochs * cfg.episodes_per_epoch
    velocity: dict = {}
    metrics = []
    peak = 0
    out_dir = Path(out_dir) if out_dir is not None else None
    t0 = time.perf_counter()
    step = 0
    bundle = CheckpointBundle.from_model(model, cfg_hash, 0, rng)
    for epoch in range(1, cfg.epochs + 1):
        for _ in range(cfg.episodes_per_epoch):
            ep = sample_episode(manifest, cfg.N, cfg.K, cfg.Q, rng)
            lr = cosine_lr(step, total, cfg.base_lr)
            acc = float("nan")
            if params:
                model.zero_grad()
                loss, logits = episode_forward(model, ep, features, train=True)
                if step == 0:
                    peak = graph_bytes(loss) + sum(t.data.nbytes for t in params.values())
                loss.backward()
                sgd_step(params, lr, cfg.momentum, cfg.weight_decay, velocity)
            else:
                with tc.no_grad():
                    loss, logits = episode_forward(model, ep, features, train=True)
            acc = 100.0 * float(np.mean(predict(logits) == ep.query_labels))
            step += 1
            metrics.append({"epoch": epoch, "step": step, "lr": lr, "loss": loss.item(), "acc": acc})
        if model.frozen_digest() != frozen_ref:
            raise InvariantViolation(f"frozen backbone weights changed during epoch {epoch}")
        bundle = CheckpointBundle.from_model(model, cfg_hash, epoch, rng)
        if out_dir is not None:
            bundle.save(out_dir / f"checkpoint_epoch{epoch:03d}.htck")
        recent = metrics[-cfg.episodes_per_epoch:]
        ep_loss = float(np.mean([m["loss"] for m in recent]))
        ep_acc = float(np.mean([m["acc"] for m in recent]))
        log.info("epoch %d/%d loss %.4f acc %.2f", epoch, cfg.epochs, ep_loss, ep_acc)
        if progress is not None:
            progress(epoch, ep_loss, ep_acc)
    result = TrainResult(bundle, metrics, time.perf_counter() - t0, peak)
    if out_dir is not None:
        bundle.save(out_dir / "checkpoint.htck")
        result.write_metrics(out_dir / "metrics.csv")
    return result
