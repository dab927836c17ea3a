"""Finite-difference audit of the full HTTN episode loss."""
from __future__ import annotations

import time

import numpy as np

from . import tensor as tc
from .backbone import SynthSpec, synth_dataset
from .episodes import sample_episode
from .errors import ConfigError
from .model import HTTN, ModelConfig
from .trainer import episode_forward

# parameters whose gradient passes through a train-mode batch norm
_BN_PATH = ("taa", "gtmt.K_", "gtmt.agg_w1", "gtmt.bn1_", "gtmt.agg_w2")


def run_gradcheck(gcfg, seed: int = 0):
    """Returns (GradCheckReport, seconds). ``gcfg`` is a GradcheckConfig."""
    if gcfg.C > 32 or gcfg.M > 8:
        raise ConfigError(f"gradcheck is limited to C <= 32 and M <= 8, got C={gcfg.C} M={gcfg.M}")
    mcfg = ModelConfig(
        T=gcfg.T, M=gcfg.M, C=gcfg.C, depth=gcfg.depth, L=gcfg.L, G=gcfg.G, tau=gcfg.tau,
        C_M=gcfg.C_M, moment_mode="GTMT", adapter_mode="TAA", backbone_seed=seed,
    )
    model = HTTN(mcfg, seed=seed, dtype=np.float64)
    rng = np.random.default_rng(seed)
    # up-convs start at zero; perturb so the gamma/beta paths carry gradient signal
    for name, t in model.trainable().items():
        if "W_up" in name or "b_up" in name:
            t.data = rng.uniform(-0.3, 0.3, t.shape)
        elif "bn" in name:
            t.data = t.data + rng.uniform(-0.2, 0.2, t.shape)
    spec = SynthSpec(classes=gcfg.N, T=gcfg.T, M=gcfg.M, C=gcfg.C, sigma=0.5, pattern_seed=seed)
    data = synth_dataset(spec, gcfg.K + gcfg.Q, seed)
    features = {r.sample_id: x.astype(np.float64) for r, x in data}

    class _M:
        def by_class(self):
            out = {}
            for r, _ in data:
                out.setdefault(r.label, []).append(r)
            return out

    ep = sample_episode(_M(), gcfg.N, gcfg.K, gcfg.Q, rng)
    params = model.trainable()
    tol = {n: (gcfg.bn_tol if n.startswith(_BN_PATH) else gcfg.tol) for n in params}

    def loss():
        return episode_forward(model, ep, features, train=True)[0]

    t0 = time.perf_counter()
    if gcfg.inject_bug:
        with tc.inject_backward_bug(gcfg.inject_bug):
            report = tc.grad_check(loss, params, eps=gcfg.eps, tol=tol)
    else:
        report = tc.grad_check(loss, params, eps=gcfg.eps, tol=tol)
    return report, time.perf_counter() - t0
