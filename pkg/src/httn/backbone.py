"""Frozen token features: HTF files, JSONL manifests, a seeded ViT-style stub
and the synthetic temporal-order dataset generator."""
from __future__ import annotations

import itertools
import json
import math
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from . import tensor as tc
from .errors import ConfigError, FormatError
from .tensor import Tensor

HTF_MAGIC = b"HTF1"
HTF_HEADER = struct.Struct("<4sIIIB3x")
_HTF_DTYPES = {0: np.dtype("<f4")}


# ----------------------------------------------------------------------------
# HTF feature files
# ----------------------------------------------------------------------------

def save_features(path, features: np.ndarray) -> None:
    features = np.asarray(features)
    if features.ndim != 3:
        raise ConfigError(f"feature map must be T x M x C, got shape {features.shape}")
    if not np.isfinite(features).all():
        raise FormatError("refusing to write non-finite features")
    T, M, C = features.shape
    payload = np.ascontiguousarray(features, dtype="<f4").tobytes()
    with open(path, "wb") as fh:
        fh.write(HTF_HEADER.pack(HTF_MAGIC, T, M, C, 0))
        fh.write(payload)


def load_features(path) -> np.ndarray:
    """Read an HTF1 file into a float32 array of shape (T, M, C)."""
    raw = Path(path).read_bytes()
    if len(raw) < HTF_HEADER.size:
        raise FormatError(f"{path}: truncated header, {len(raw)} bytes", offset=len(raw))
    magic, T, M, C, code = HTF_HEADER.unpack_from(raw)
    if magic != HTF_MAGIC:
        raise FormatError(f"{path}: bad magic {magic!r}", offset=0)
    if code not in _HTF_DTYPES:
        raise FormatError(f"{path}: unsupported dtype code {code}", offset=16)
    if min(T, M, C) < 1:
        raise FormatError(f"{path}: zero-sized dimension T={T} M={M} C={C}", offset=4)
    dtype = _HTF_DTYPES[code]
    expected = HTF_HEADER.size + T * M * C * dtype.itemsize
    if len(raw) != expected:
        raise FormatError(
            f"{path}: payload length mismatch, header declares {expected} bytes, file has {len(raw)}",
            offset=min(len(raw), expected),
        )
    data = np.frombuffer(raw, dtype=dtype, offset=HTF_HEADER.size).reshape(T, M, C)
    bad = np.flatnonzero(~np.isfinite(data.reshape(-1)))
    if bad.size:
        raise FormatError(f"{path}: non-finite value", offset=HTF_HEADER.size + int(bad[0]) * dtype.itemsize)
    return data.astype(np.float32)


# ----------------------------------------------------------------------------
# manifests
# ----------------------------------------------------------------------------

@dataclass(frozen=True)
class SampleRecord:
    sample_id: str
    label: int
    path: str | None = None
    seed: int | None = None


@dataclass
class Manifest:
    classes: int
    split: str
    samples: list
    root: Path = field(default_factory=Path)

    def by_class(self) -> dict:
        out: dict[int, list] = {c: [] for c in range(self.classes)}
        for s in self.samples:
            out[s.label].append(s)
        return out

    def resolve(self, sample: SampleRecord) -> Path:
        p = Path(sample.path)
        return p if p.is_absolute() else self.root / p

    def load_all(self) -> dict:
        return {s.sample_id: load_features(self.resolve(s)) for s in self.samples}


def write_manifest(path, manifest: Manifest) -> None:
    with open(path, "w") as fh:
        fh.write(json.dumps({"classes": manifest.classes, "split": manifest.split}) + "\n")
        for s in manifest.samples:
            fh.write(json.dumps({"id": s.sample_id, "label": s.label, "path": s.path}) + "\n")


def read_manifest(path) -> Manifest:
    path = Path(path)
    lines = [ln for ln in path.read_text().splitlines() if ln.strip()]
    if not lines:
        raise FormatError(f"{path}: empty manifest", offset=0)
    header = None
    samples = []
    seen = set()
    for lineno, line in enumerate(lines, 1):
        try:
            obj = json.loads(line)
        except json.JSONDecodeError as exc:
            raise FormatError(f"{path}: invalid JSON ({exc.msg})", offset=lineno) from None
        if "classes" in obj:
            if header is not None:
                raise FormatError(f"{path}: duplicate header line", offset=lineno)
            if obj.get("split") not in ("base", "novel"):
                raise FormatError(f"{path}: split must be 'base' or 'novel'", offset=lineno)
            header = obj
            continue
        try:
            rec = SampleRecord(str(obj["id"]), int(obj["label"]), str(obj["path"]))
        except (KeyError, TypeError, ValueError):
            raise FormatError(f"{path}: sample line needs id/label/path", offset=lineno) from None
        if rec.sample_id in seen:
            raise FormatError(f"{path}: duplicate sample id {rec.sample_id!r}", offset=lineno)
        seen.add(rec.sample_id)
        samples.append(rec)
    if header is None:
        raise FormatError(f"{path}: missing header line with 'classes' and 'split'", offset=1)
    n_cls = int(header["classes"])
    for s in samples:
        if not 0 <= s.label < n_cls:
            raise FormatError(f"{path}: label {s.label} of {s.sample_id!r} outside 0..{n_cls - 1}")
    return Manifest(classes=n_cls, split=header["split"], samples=samples, root=path.parent)


# ----------------------------------------------------------------------------
# frozen stub encoder
# ----------------------------------------------------------------------------

def _uniform_fan_in(rng: np.random.Generator, shape, fan_in: int, dtype) -> np.ndarray:
    bound = 1.0 / math.sqrt(fan_in)
    return rng.uniform(-bound, bound, size=shape).astype(dtype)


class FrozenBlock:
    """Pre-norm transformer block with one attention head and MLP ratio 2.

    Attention mixes the M tokens of a frame only, so the block is
    equivariant to frame permutations. All weights are constants.
    """

    def __init__(self, channels: int, index: int, rng: np.random.Generator, dtype=np.float32):
        C, H = channels, 2 * channels
        self.index = index
        self.channels = channels
        self.weights = {}
        for name in ("q", "k", "v", "o"):
            self.weights[f"w{name}"] = _uniform_fan_in(rng, (C, C), C, dtype)
            self.weights[f"b{name}"] = _uniform_fan_in(rng, (C,), C, dtype)
        self.weights["w1"] = _uniform_fan_in(rng, (C, H), C, dtype)
        self.weights["b1"] = _uniform_fan_in(rng, (H,), C, dtype)
        self.weights["w2"] = _uniform_fan_in(rng, (H, C), H, dtype)
        self.weights["b2"] = _uniform_fan_in(rng, (C,), H, dtype)
        for i in (1, 2):
            self.weights[f"ln{i}_g"] = np.ones(C, dtype=dtype)
            self.weights[f"ln{i}_b"] = np.zeros(C, dtype=dtype)
        self.params = {k: Tensor(v, requires_grad=False, name=f"block{index}.{k}") for k, v in self.weights.items()}
        # (input, output) of the most recent constant-input call
        self._last = None

    def num_params(self) -> int:
        return sum(v.size for v in self.weights.values())

    def __call__(self, x: Tensor) -> Tensor:
        if not (x.requires_grad and tc.grad_enabled()):
            last = self._last
            if last is not None and last[0].shape == x.shape and np.array_equal(last[0], x.data):
                return Tensor(last[1])
            out = self._forward_array(x.data)
            self._last = (x.data.copy(), out)
            return Tensor(out)
        p = self.params
        h = tc.layer_norm(x) * p["ln1_g"] + p["ln1_b"]
        q = h @ p["wq"] + p["bq"]
        k = h @ p["wk"] + p["bk"]
        v = h @ p["wv"] + p["bv"]
        scores = tc.matmul(q, tc.transpose(k, tuple(range(k.ndim - 2)) + (k.ndim - 1, k.ndim - 2)))
        attn = tc.softmax(scores * (1.0 / math.sqrt(self.channels)), axis=-1)
        x = x + (attn @ v) @ p["wo"] + p["bo"]
        h = tc.layer_norm(x) * p["ln2_g"] + p["ln2_b"]
        h = tc.relu(h @ p["w1"] + p["b1"]) @ p["w2"] + p["b2"]
        return x + h

    def _forward_array(self, x: np.ndarray) -> np.ndarray:
        # same arithmetic as __call__, without graph bookkeeping
        w = self.weights
        shape = x.shape
        C = shape[-1]
        x = x.reshape(-1, C)
        h = _layer_norm(x) * w["ln1_g"] + w["ln1_b"]
        q = (h @ w["wq"] + w["bq"]).reshape(shape)
        k = (h @ w["wk"] + w["bk"]).reshape(shape)
        v = (h @ w["wv"] + w["bv"]).reshape(shape)
        s = (q @ np.swapaxes(k, -1, -2)) * (1.0 / math.sqrt(self.channels))
        s = np.exp(s - s.max(axis=-1, keepdims=True))
        attn = s / s.sum(axis=-1, keepdims=True)
        x = x + (attn @ v).reshape(-1, C) @ w["wo"] + w["bo"]
        h = _layer_norm(x) * w["ln2_g"] + w["ln2_b"]
        h = np.maximum(h @ w["w1"] + w["b1"], 0) @ w["w2"] + w["b2"]
        out = (x + h).reshape(shape)
        tc.check_finite(out, f"block{self.index}")
        return out


def _layer_norm(x: np.ndarray, eps: float = 1e-5) -> np.ndarray:
    mu = x.mean(axis=-1, keepdims=True)
    var = x.var(axis=-1, keepdims=True)
    return ((x - mu) * (1.0 / np.sqrt(var + eps))).astype(x.dtype)


def build_blocks(channels: int, depth: int, seed: int, dtype=np.float32) -> list:
    rng = np.random.default_rng(seed)
    return [FrozenBlock(channels, i, rng, dtype) for i in range(depth)]


def stub_forward(frames, blocks: Sequence[FrozenBlock], adapters: Sequence | None = None) -> Tensor:
    """Run the frozen blocks; adapter i recalibrates the output of block
    ``len(blocks) - len(adapters) + i`` and feeds the next block."""
    adapters = list(adapters or [])
    if len(adapters) > len(blocks):
        raise ConfigError(f"{len(adapters)} adapters cannot attach to {len(blocks)} blocks")
    x = frames if isinstance(frames, Tensor) else Tensor(frames)
    first = len(blocks) - len(adapters)
    for i, block in enumerate(blocks):
        x = block(x)
        if i >= first:
            x = adapters[i - first](x)
    return x


# ----------------------------------------------------------------------------
# synthetic temporal-order task
# ----------------------------------------------------------------------------

@dataclass
class SynthSpec:
    """Frame prototypes shared by every class; each class is an ordering of them.

    ``pattern`` is "permutation" (distinct orderings of a balanced multiset
    of ``num_prototypes`` frames) or "alternating" (two classes: x,y,x,y,...
    and y,x,y,x,...). Class ``c`` of a manifest uses ordering
    ``first_class + c`` so disjoint splits can share prototypes.
    """

    classes: int = 10
    T: int = 8
    M: int = 8
    C: int = 24
    num_prototypes: int = 4
    pattern: str = "permutation"
    sigma: float = 0.1
    first_class: int = 0
    pattern_seed: int = 0

    def prototypes(self) -> np.ndarray:
        rng = np.random.default_rng([self.pattern_seed, 0x5EED])
        n = 2 if self.pattern == "alternating" else self.num_prototypes
        return rng.standard_normal((n, self.M, self.C)).astype(np.float32)

    def orders(self) -> np.ndarray:
        total = self.first_class + self.classes
        if self.pattern == "alternating":
            if total > 2:
                raise ConfigError("the alternating pattern defines exactly two classes")
            base = np.arange(self.T) % 2
            return np.stack([base, 1 - base])[self.first_class:total]
        if self.pattern != "permutation":
            raise ConfigError(f"unknown synth pattern {self.pattern!r}")
        if self.T % self.num_prototypes:
            raise ConfigError(f"T={self.T} must be a multiple of num_prototypes={self.num_prototypes}")
        base = np.repeat(np.arange(self.num_prototypes), self.T // self.num_prototypes)
        rng = np.random.default_rng([self.pattern_seed, 0x0D3])
        found, seen = [], set()
        limit = math.factorial(self.T)
        for _ in range(50 * total + 1000):
            perm = tuple(rng.permutation(base))
            if perm not in seen:
                seen.add(perm)
                found.append(perm)
                if len(found) == total:
                    break
            if len(seen) >= limit:
                break
        if len(found) < total:
            raise ConfigError(f"cannot draw {total} distinct orderings of {self.T} frames")
        return np.array(found[self.first_class:total])


def synth_features(spec: SynthSpec, class_id: int, seed: int) -> np.ndarray:
    """One T x M x C video of class ``class_id``: ordered prototypes plus noise."""
    if not 0 <= class_id < spec.classes:
        raise ConfigError(f"unknown class id {class_id}; spec declares {spec.classes} classes")
    order = spec.orders()[class_id]
    x = spec.prototypes()[order]
    if spec.sigma > 0:
        rng = np.random.default_rng(seed)
        x = x + spec.sigma * rng.standard_normal(x.shape).astype(np.float32)
    return x.astype(np.float32)


def synth_dataset(spec: SynthSpec, per_class: int, seed: int) -> list:
    """[(SampleRecord, features)] with per-sample seeds derived from ``seed``."""
    orders = spec.orders()
    protos = spec.prototypes()
    out = []
    for c, i in itertools.product(range(spec.classes), range(per_class)):
        sample_seed = int(np.random.SeedSequence([seed, c, i]).generate_state(1)[0])
        x = protos[orders[c]]
        if spec.sigma > 0:
            rng = np.random.default_rng(sample_seed)
            x = x + spec.sigma * rng.standard_normal(x.shape).astype(np.float32)
        rec = SampleRecord(f"c{c:03d}_s{i:04d}", c, f"c{c:03d}_s{i:04d}.htf", sample_seed)
        out.append((rec, x.astype(np.float32)))
    return out
