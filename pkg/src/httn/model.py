"""HTTN assembly: frozen stub blocks, optional adapters on the last L blocks,
and a moment head selected by ``moment_mode``."""
from __future__ import annotations

import dataclasses
import hashlib
from dataclasses import dataclass

import numpy as np

from . import tensor as tc
from .backbone import build_blocks, stub_forward
from .errors import ConfigError
from .gtmt import GtmtParams, elstc, fuse, gtmt_param_count, moment1
from .taa import AdapterParams, TemporalAdapter, taa_param_count
from .tensor import Tensor

MOMENT_MODES = ("GAP", "TCov", "ELSTC", "GTMT")
ADAPTER_MODES = ("none", "TAA")


@dataclass
class ModelConfig:
    T: int = 8
    M: int = 49
    C: int = 384
    depth: int = 4
    L: int = 2
    rho: int = 4
    k_t: int = 3
    share_down: bool = True
    G: int = 4
    tau: int = 6
    k_c: int = 3
    C_M: int = 64
    moment_mode: str = "GTMT"
    adapter_mode: str = "TAA"
    backbone_seed: int = 0

    def validate(self) -> "ModelConfig":
        if self.moment_mode not in MOMENT_MODES:
            raise ConfigError(f"moment_mode must be one of {MOMENT_MODES}, got {self.moment_mode!r}")
        if self.adapter_mode not in ADAPTER_MODES:
            raise ConfigError(f"adapter_mode must be one of {ADAPTER_MODES}, got {self.adapter_mode!r}")
        for name in ("T", "M", "C", "rho", "k_t", "G", "tau", "k_c", "C_M"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be >= 1")
        if self.depth < 0 or self.L < 0:
            raise ConfigError("depth and L must be non-negative")
        if self.adapter_mode == "TAA" and self.L > self.depth:
            raise ConfigError(f"L={self.L} adapters exceed depth={self.depth} blocks")
        if self.adapter_mode == "TAA" and self.L and self.C % self.rho:
            raise ConfigError(f"C={self.C} not divisible by rho={self.rho}")
        if self.moment_mode != "GAP":
            if self.C % self.tau:
                raise ConfigError(f"C={self.C} not divisible by tau={self.tau}")
            if self.T % self.group_count:
                raise ConfigError(f"G={self.group_count} must divide T={self.T}")
        return self

    @property
    def adapters(self) -> int:
        return self.L if self.adapter_mode == "TAA" else 0

    @property
    def group_count(self) -> int:
        # TCov is the ungrouped covariance over all frames
        return 1 if self.moment_mode == "TCov" else self.G

    def closed_form_trainable(self) -> int:
        n = self.adapters * taa_param_count(self.C, self.rho, self.k_t, self.share_down)
        if self.moment_mode != "GAP":
            n += gtmt_param_count(self.C, self.tau, self.group_count, self.k_c, self.C_M)
        return n

    def digest(self) -> str:
        blob = repr(sorted(dataclasses.asdict(self).items())).encode()
        return hashlib.sha256(blob).hexdigest()[:16]


class HTTN:
    def __init__(self, cfg: ModelConfig, seed: int = 0, dtype=np.float32):
        self.cfg = cfg.validate()
        self.dtype = np.dtype(dtype)
        self.blocks = build_blocks(cfg.C, cfg.depth, cfg.backbone_seed, dtype)
        rng = np.random.default_rng(seed)
        self.adapters = [
            TemporalAdapter(AdapterParams.init(cfg.C, cfg.rho, cfg.k_t, cfg.share_down, rng, dtype, prefix=f"taa{i}"))
            for i in range(cfg.adapters)
        ]
        self.head = None
        if cfg.moment_mode != "GAP":
            self.head = GtmtParams.init(cfg.T, cfg.C, cfg.tau, cfg.group_count, cfg.k_c, cfg.C_M, rng, dtype)

    def features(self, x) -> Tensor:
        """Token features after the frozen blocks and adapters."""
        x = x if isinstance(x, Tensor) else Tensor(np.asarray(x, dtype=self.dtype))
        return stub_forward(x, self.blocks, self.adapters)

    def embed(self, x, train: bool = False) -> Tensor:
        """[..., T, M, C] token features -> [..., C] video representation."""
        X = self.features(x)
        mode = self.cfg.moment_mode
        M1 = moment1(X)
        if mode == "GAP":
            return M1
        M2 = elstc(X, self.head, train)
        return fuse(M2, M1 if mode == "GTMT" else None, self.head.H_w, self.head.H_b).Z

    def trainable(self) -> dict:
        out = {}
        for i, a in enumerate(self.adapters):
            out.update({f"taa{i}.{k}": v for k, v in a.params.tensors().items()})
        if self.head is not None:
            out.update({f"gtmt.{k}": v for k, v in self.head.tensors().items()})
        return out

    def buffers(self) -> dict:
        return {} if self.head is None else {f"gtmt.{k}": v for k, v in self.head.buffers().items()}

    def frozen(self) -> dict:
        return {t.name: t for b in self.blocks for t in b.params.values()}

    def frozen_digest(self) -> str:
        h = hashlib.sha256()
        for name, t in sorted(self.frozen().items()):
            h.update(name.encode())
            h.update(np.ascontiguousarray(t.data).tobytes())
        return h.hexdigest()

    def num_frozen(self) -> int:
        return sum(t.size for t in self.frozen().values())

    def zero_grad(self) -> None:
        for t in self.trainable().values():
            t.grad = None
