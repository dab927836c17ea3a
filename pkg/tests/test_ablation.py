import dataclasses

import pytest

from httn.ablation import COLUMNS, expand_grid, run_ablation
from httn.config import EvalConfig
from httn.errors import ConfigError
from httn.model import ModelConfig
from httn.trainer import TrainConfig

BASE = ModelConfig()


def test_tab4a_grid_has_four_cells():
    cells = expand_grid({"moment_mode": ["GAP", "GTMT"], "adapter_mode": ["none", "TAA"]}, BASE)
    assert [(c.moment_mode, c.adapter_mode) for c in cells] == [
        ("GAP", "none"), ("GAP", "TAA"), ("GTMT", "none"), ("GTMT", "TAA")]


def test_l_sweep_has_five_cells_and_deepens_backbone():
    cells = expand_grid({"L": [0, 1, 2, 3, 4]}, BASE)
    assert [c.L for c in cells] == [0, 1, 2, 3, 4]
    assert all(c.depth >= c.L for c in cells)


def test_g_sweep_dims_dry_run():
    cells = expand_grid({"G": [1, 2, 4, 8]}, BASE)
    rows = run_ablation(cells, TrainConfig(), EvalConfig(), dry_run=True)
    assert [r["cov_dim"] for r in rows] == [262144, 65536, 16384, 4096]
    assert list(rows[0]) == COLUMNS
    assert all(r["accuracy"] == "" for r in rows)


@pytest.mark.parametrize("axes", [{"G": [3]}, {"L": [5]}, {"moment_mode": ["GAPP"]}, {"bogus": [1]},
                                  {"G": []}, {"share_down": [1]}, {}])
def test_invalid_axes_rejected_before_running(axes):
    with pytest.raises(ConfigError):
        expand_grid(axes, BASE)


def test_invalid_combination_rejected_up_front():
    # G=8 cannot divide T=4: fails during expansion, before any cell trains
    with pytest.raises(ConfigError):
        expand_grid({"G": [4, 8]}, dataclasses.replace(BASE, T=4))


def test_small_real_run(toy_base, toy_novel):
    tm, tf = toy_base
    em, ef = toy_novel
    base = ModelConfig(T=8, M=8, C=24, depth=2, C_M=4)
    cells = expand_grid({"moment_mode": ["GAP", "GTMT"]}, base)
    rows = run_ablation(cells, TrainConfig(epochs=1, episodes_per_epoch=2), EvalConfig(episodes=20), tm, em,
                        train_features=tf, eval_features=ef)
    assert [r["cell"] for r in rows] == [0, 1]
    assert all(0 <= r["accuracy"] <= 100 and r["wall_time_s"] > 0 for r in rows)
    assert rows[0]["trainable_params"] < rows[1]["trainable_params"]
    assert rows[1]["peak_memory_bytes"] > 0
