"""Temporal moment head: mean (first moment) plus grouped long-short temporal
covariance (second moment), aggregated by a small conv stack and fused.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import tensor as tc
from .errors import ConfigError, DimensionError
from .tensor import RunningStats, Tensor, conv_output_size

AGG_MID_CHANNELS = 8


@dataclass(frozen=True)
class AggGeometry:
    in_size: int
    out_size: int
    k_c: int
    stride1: int
    pad1: int
    stride2: int
    pad2: int

    @property
    def mid_size(self) -> int:
        return conv_output_size(self.in_size, self.k_c, self.stride1, self.pad1)


def solve_aggregator(in_size: int, out_size: int, k_c: int = 3) -> AggGeometry:
    """Find strides/paddings so two k_c x k_c convs map in_size -> out_size.

    Padding is searched in {0, ..., k_c - 1} with "same" padding tried
    first; fewer total downsampling and earlier downsampling win ties.
    """
    pads = [(k_c - 1) // 2] + [p for p in range(k_c) if p != (k_c - 1) // 2]
    strides = sorted(
        ((s1, s2) for s1 in range(1, in_size + 1) for s2 in range(1, in_size + 1)),
        key=lambda s: (s[0] * s[1], -s[0]),
    )
    tried = 0
    for s1, s2 in strides:
        for p1 in pads:
            if in_size + 2 * p1 < k_c:
                continue
            mid = conv_output_size(in_size, k_c, s1, p1)
            if mid < 1:
                continue
            for p2 in pads:
                tried += 1
                if mid + 2 * p2 < k_c:
                    continue
                if conv_output_size(mid, k_c, s2, p2) == out_size:
                    return AggGeometry(in_size, out_size, k_c, s1, p1, s2, p2)
    raise ConfigError(
        f"no stride/padding pair maps {in_size}x{in_size} to {out_size}x{out_size} with two "
        f"{k_c}x{k_c} convs (tried {tried} candidates: strides 1..{in_size}, paddings 0..{k_c - 1})"
    )


def elstc_dims(T: int, C: int, tau: int, G: int) -> tuple[int, int, int]:
    """(frames per group, per-group covariance dimension, group count)."""
    if T % G:
        raise ConfigError(f"G={G} must divide T={T}")
    if C % tau:
        raise ConfigError(f"tau={tau} must divide C={C}")
    t_prime = T // G
    return t_prime, (t_prime * C // tau) ** 2, G


@dataclass
class GtmtParams:
    K_w: Tensor
    K_b: Tensor
    agg_w1: Tensor
    bn1_gamma: Tensor
    bn1_beta: Tensor
    agg_w2: Tensor
    bn2_gamma: Tensor
    bn2_beta: Tensor
    H_w: Tensor
    H_b: Tensor
    geometry: AggGeometry
    G: int = 4
    tau: int = 6
    bn1: RunningStats = field(default=None)
    bn2: RunningStats = field(default=None)

    @classmethod
    def init(cls, T: int, C: int, tau: int = 6, G: int = 4, k_c: int = 3, C_M: int = 64,
             rng: np.random.Generator | None = None, dtype=np.float32, mid: int = AGG_MID_CHANNELS,
             prefix: str = "gtmt") -> "GtmtParams":
        t_prime, dim, _ = elstc_dims(T, C, tau, G)
        geom = solve_aggregator(t_prime * C // tau, C_M, k_c)
        rng = rng if rng is not None else np.random.default_rng(0)
        d = C // tau

        def uni(shape, fan_in, name):
            b = 1.0 / math.sqrt(fan_in)
            return Tensor(rng.uniform(-b, b, shape).astype(dtype), requires_grad=True, name=f"{prefix}.{name}")

        def const(shape, v, name):
            return Tensor(np.full(shape, v, dtype=dtype), requires_grad=True, name=f"{prefix}.{name}")

        return cls(
            K_w=uni((C, d), C, "K_w"), K_b=uni((d,), C, "K_b"),
            agg_w1=uni((mid, G, k_c, k_c), G * k_c * k_c, "agg_w1"),
            bn1_gamma=const((mid,), 1.0, "bn1_gamma"), bn1_beta=const((mid,), 0.0, "bn1_beta"),
            agg_w2=uni((1, mid, k_c, k_c), mid * k_c * k_c, "agg_w2"),
            bn2_gamma=const((1,), 1.0, "bn2_gamma"), bn2_beta=const((1,), 0.0, "bn2_beta"),
            H_w=uni((C_M * C_M, C), C_M * C_M, "H_w"), H_b=const((C,), 0.0, "H_b"),
            geometry=geom, G=G, tau=tau,
            bn1=RunningStats.fresh(mid, dtype), bn2=RunningStats.fresh(1, dtype),
        )

    @property
    def C_M(self) -> int:
        return self.geometry.out_size

    def tensors(self) -> dict:
        names = ["K_w", "K_b", "agg_w1", "bn1_gamma", "bn1_beta", "agg_w2", "bn2_gamma", "bn2_beta", "H_w", "H_b"]
        return {n: getattr(self, n) for n in names}

    def buffers(self) -> dict:
        return {"bn1_mean": self.bn1.mean, "bn1_var": self.bn1.var, "bn2_mean": self.bn2.mean, "bn2_var": self.bn2.var}

    def num_params(self) -> int:
        return sum(t.size for t in self.tensors().values())


def gtmt_param_count(C: int, tau: int = 6, G: int = 4, k_c: int = 3, C_M: int = 64, mid: int = AGG_MID_CHANNELS) -> int:
    d = C // tau
    return (C * d + d) + (mid * G * k_c * k_c + 2 * mid) + (mid * k_c * k_c + 2) + (C_M * C_M * C + C)


@dataclass
class GroupCovariance:
    Y: Tensor  # [..., T'd, T'd]
    frames: int
    channels: int

    def block(self, t: int, t2: int) -> np.ndarray:
        d = self.channels
        return self.Y.data[..., t * d:(t + 1) * d, t2 * d:(t2 + 1) * d]


@dataclass
class VideoRepresentation:
    Z: Tensor
    M1: Tensor
    M2: Tensor | None


def moment1(X: Tensor) -> Tensor:
    """Mean over frames and tokens: [..., T, M, C] -> [..., C]."""
    return tc.reduce_mean(X, axes=(X.ndim - 3, X.ndim - 2))


def split_groups(X: Tensor, G: int) -> list:
    """Strided partition: group e holds frames e, e+G, e+2G, ..."""
    T = X.shape[-3]
    if G < 1 or T % G:
        raise ConfigError(f"G={G} must divide T={T}")
    lead = (slice(None),) * (X.ndim - 3)
    return [tc.index(X, lead + (slice(e, None, G),)) for e in range(G)]


def reduce_channels(X: Tensor, K_w: Tensor, K_b: Tensor | None = None) -> Tensor:
    if X.shape[-1] != K_w.shape[0]:
        raise DimensionError(f"features {X.shape} do not match reduction map {K_w.shape}")
    out = X @ K_w
    return out if K_b is None else out + K_b


def _token_gram(Xt: Tensor) -> Tensor:
    """[..., T', M, d] -> (1/M) A^T A with A[..., m, (t, i)] = Xt[..., t, m, i]."""
    *lead, tp, M, d = Xt.shape
    nl = len(lead)
    A = tc.transpose(Xt, tuple(range(nl)) + (nl + 1, nl, nl + 2))
    A = tc.reshape(A, tuple(lead) + (M, tp * d))
    At = tc.transpose(A, tuple(range(nl)) + (nl + 1, nl))
    return (At @ A) * (1.0 / M)


def lstc(Xg: Tensor, K_w: Tensor | None = None, K_b: Tensor | None = None) -> GroupCovariance:
    """Long-short temporal covariance of one group.

    With ``K_w`` None the input is taken as already reduced.
    """
    Xt = Xg if K_w is None else reduce_channels(Xg, K_w, K_b)
    return GroupCovariance(_token_gram(Xt), frames=Xt.shape[-3], channels=Xt.shape[-1])


def grouped_covariances(X: Tensor, G: int, K_w: Tensor, K_b: Tensor | None = None) -> Tensor:
    """All G group covariances at once, stacked channels-last: [..., S, S, G]."""
    *lead, T, M, C = X.shape
    if T % G:
        raise ConfigError(f"G={G} must divide T={T}")
    Xt = reduce_channels(X, K_w, K_b)
    d = Xt.shape[-1]
    nl = len(lead)
    # t = j * G + e  ->  [..., j, e, M, d] -> [..., e, j, M, d]
    Xt = tc.reshape(Xt, tuple(lead) + (T // G, G, M, d))
    Xt = tc.transpose(Xt, tuple(range(nl)) + (nl + 1, nl, nl + 2, nl + 3))
    Y = _token_gram(Xt)  # [..., G, S, S]
    return tc.transpose(Y, tuple(range(nl)) + (nl + 1, nl + 2, nl))


def aggregate(Ys, params: GtmtParams, train: bool) -> Tensor:
    """conv-BN-ReLU twice; [..., S, S, G] (or a list of G [..., S, S]) -> [..., C_M, C_M]."""
    if isinstance(Ys, (list, tuple)):
        shapes = {y.shape for y in Ys}
        if len(shapes) != 1:
            raise DimensionError(f"group covariances differ in shape: {sorted(shapes)}")
        Ys = tc.stack(list(Ys), axis=-1)
    g = params.geometry
    if Ys.shape[-3] != g.in_size or Ys.shape[-1] != params.agg_w1.shape[1]:
        raise DimensionError(f"aggregator built for {g.in_size}x{g.in_size}x{params.agg_w1.shape[1]}, got {Ys.shape}")
    h = tc.conv2d(Ys, params.agg_w1, stride=g.stride1, padding=g.pad1)
    h = tc.relu(tc.batch_norm(h, params.bn1_gamma, params.bn1_beta, params.bn1, train))
    h = tc.conv2d(h, params.agg_w2, stride=g.stride2, padding=g.pad2)
    h = tc.relu(tc.batch_norm(h, params.bn2_gamma, params.bn2_beta, params.bn2, train))
    return tc.reshape(h, h.shape[:-3] + (g.out_size, g.out_size))


def elstc(X: Tensor, params: GtmtParams, train: bool) -> Tensor:
    return aggregate(grouped_covariances(X, params.G, params.K_w, params.K_b), params, train)


def fuse(M2: Tensor, M1: Tensor | None, H_w: Tensor, H_b: Tensor | None = None) -> VideoRepresentation:
    """Z = H(vec(M2)) + M1."""
    flat = tc.reshape(M2, M2.shape[:-2] + (M2.shape[-2] * M2.shape[-1],))
    if flat.shape[-1] != H_w.shape[0]:
        raise DimensionError(f"vec(M2) has length {flat.shape[-1]}, projection expects {H_w.shape[0]}")
    proj = flat @ H_w
    if H_b is not None:
        proj = proj + H_b
    if M1 is None:
        return VideoRepresentation(proj, M1, M2)
    if M1.shape[-1] != proj.shape[-1]:
        raise DimensionError(f"projected M2 has {proj.shape[-1]} channels, M1 has {M1.shape[-1]}")
    return VideoRepresentation(proj + M1, M1, M2)


def tcov_oracle(X, K_w, K_b=None, cap: int = 1 << 24) -> np.ndarray:
    """Ungrouped temporal covariance over all frames, in plain numpy.

    Returns [..., T*d, T*d]. Refuses outputs with more than ``cap`` entries
    per video.
    """
    X = X.data if isinstance(X, Tensor) else np.asarray(X)
    K_w = K_w.data if isinstance(K_w, Tensor) else np.asarray(K_w)
    *lead, T, M, C = X.shape
    d = K_w.shape[1]
    if (T * d) ** 2 > cap:
        raise MemoryError(f"full temporal covariance needs {(T * d) ** 2} entries, cap is {cap}")
    Xt = X @ K_w
    if K_b is not None:
        Xt = Xt + (K_b.data if isinstance(K_b, Tensor) else K_b)
    A = np.swapaxes(Xt, -3, -2).reshape(tuple(lead) + (M, T * d))
    return (np.swapaxes(A, -1, -2) @ A) * (1.0 / M)
