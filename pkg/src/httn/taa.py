"""Temporal-aware adapter: per-frame scale and bias recalibration."""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import tensor as tc
from .errors import ConfigError, DimensionError
from .tensor import Tensor


@dataclass
class AdapterParams:
    W_down_shared: Tensor
    b_down_shared: Tensor
    W_up_gamma: Tensor
    b_up_gamma: Tensor
    W_up_beta: Tensor
    b_up_beta: Tensor
    rho: int = 4
    k_t: int = 3
    share_down: bool = True
    # only populated when share_down is False
    W_down_beta: Tensor | None = None
    b_down_beta: Tensor | None = None

    @classmethod
    def init(cls, C: int, rho: int = 4, k_t: int = 3, share_down: bool = True,
             rng: np.random.Generator | None = None, dtype=np.float32, prefix: str = "taa") -> "AdapterParams":
        """Down convs: uniform fan-in. Up convs: zeros, so F' = 0.5 * F at start."""
        if C % rho:
            raise ConfigError(f"channels C={C} not divisible by reduction ratio rho={rho}")
        if k_t % 2 == 0:
            raise ConfigError(f"temporal kernel must be odd, got k_t={k_t}")
        rng = rng if rng is not None else np.random.default_rng(0)
        r = C // rho
        bound = 1.0 / math.sqrt(C * k_t)

        def down(tag):
            w = Tensor(rng.uniform(-bound, bound, (r, C, k_t)).astype(dtype), requires_grad=True, name=f"{prefix}.W_down_{tag}")
            b = Tensor(rng.uniform(-bound, bound, (r,)).astype(dtype), requires_grad=True, name=f"{prefix}.b_down_{tag}")
            return w, b

        def zeros(shape, name):
            return Tensor(np.zeros(shape, dtype=dtype), requires_grad=True, name=f"{prefix}.{name}")

        wd, bd = down("shared" if share_down else "gamma")
        extra = {}
        if not share_down:
            extra["W_down_beta"], extra["b_down_beta"] = down("beta")
        return cls(
            W_down_shared=wd, b_down_shared=bd,
            W_up_gamma=zeros((C, r, k_t), "W_up_gamma"), b_up_gamma=zeros((C,), "b_up_gamma"),
            W_up_beta=zeros((C, r, k_t), "W_up_beta"), b_up_beta=zeros((C,), "b_up_beta"),
            rho=rho, k_t=k_t, share_down=share_down, **extra,
        )

    @property
    def channels(self) -> int:
        return self.W_down_shared.shape[1]

    def tensors(self) -> dict:
        names = ["W_down_shared", "b_down_shared", "W_up_gamma", "b_up_gamma", "W_up_beta", "b_up_beta"]
        if not self.share_down:
            names += ["W_down_beta", "b_down_beta"]
        return {n: getattr(self, n) for n in names}

    def num_params(self) -> int:
        return sum(t.size for t in self.tensors().values())


def pool_temporal(F: Tensor) -> Tensor:
    """Average over tokens: [..., T, M, C] -> [..., T, C]."""
    return tc.reduce_mean(F, axes=F.ndim - 2)


def _check(F_hat: Tensor, p: AdapterParams) -> None:
    if F_hat.shape[-1] != p.channels:
        raise DimensionError(f"pooled features {F_hat.shape} do not match adapter channels {p.channels}")


def make_gamma(F_hat: Tensor, p: AdapterParams) -> Tensor:
    # ReLU on the reduced activation, sigmoid on the restored one
    _check(F_hat, p)
    h = tc.relu(tc.temporal_conv1d(F_hat, p.W_down_shared, p.b_down_shared))
    return tc.sigmoid(tc.temporal_conv1d(h, p.W_up_gamma, p.b_up_gamma))


def make_beta(F_hat: Tensor, p: AdapterParams) -> Tensor:
    _check(F_hat, p)
    if p.share_down:
        w, b = p.W_down_shared, p.b_down_shared
    else:
        w, b = p.W_down_beta, p.b_down_beta
    h = tc.relu(tc.temporal_conv1d(F_hat, w, b))
    return tc.temporal_conv1d(h, p.W_up_beta, p.b_up_beta)


def recalibrate(F: Tensor, gamma, beta) -> Tensor:
    """F'[t, m, c] = gamma[t, c] * F[t, m, c] + beta[t, c]."""
    gamma, beta = tc.as_tensor(gamma, F.dtype), tc.as_tensor(beta, F.dtype)
    expand = lambda v: tc.reshape(v, v.shape[:-1] + (1, v.shape[-1]))
    return F * expand(gamma) + expand(beta)


def taa_param_count(C: int, rho: int = 4, k_t: int = 3, share_down: bool = True) -> int:
    if C % rho:
        raise ConfigError(f"channels C={C} not divisible by reduction ratio rho={rho}")
    r = C // rho
    count = k_t * C * r + r + 2 * (k_t * r * C + C)
    if not share_down:
        count += k_t * C * r + r
    return count


class TemporalAdapter:
    def __init__(self, params: AdapterParams):
        self.params = params

    def __call__(self, F: Tensor) -> Tensor:
        F_hat = pool_temporal(F)
        return recalibrate(F, make_gamma(F_hat, self.params), make_beta(F_hat, self.params))
