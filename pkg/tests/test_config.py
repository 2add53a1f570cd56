import pytest

from gazehoi import config
from gazehoi.errors import ConfigError
from gazehoi.model import ModelConfig


def test_defaults_are_the_published_settings():
    run = config.RunConfig()
    m, t = run.model, run.train
    assert (m.window, m.n_temporal, m.n_spatial, m.heads, m.gaze_mode) == (6, 3, 1, 8, "cross")
    assert (m.d_human, m.d_object, m.d_relation, m.d_mask, m.semantic_dim) == (512, 512, 256, 256, 200)
    assert (t.epochs, t.loss.kind, t.loss.gamma, t.loss.beta) == (25, "cb_focal", 0.5, 0.9999)
    o = t.optim
    assert (o.lr_init, o.lr_peak, o.warmup_epochs, o.decay, o.weight_decay) == (1e-8, 1e-4, 3, 0.1, 1e-2)
    assert (run.eval.k, run.eval.threshold) == (5, 0.3)
    assert len(run.eval.thresholds) == 19


def test_roundtrip():
    run = config.loads('seed = 4\npreset = "desk"\n[model]\nwindow = 4\n'
                       '[train]\nepochs = 3\n[train.optim]\nlr_peak = 0.001\n'
                       '[ablate]\ngaze_mode = ["none", "cross"]\n')
    assert run.model.window == 4 and run.model.d_human == ModelConfig.desk().d_human
    again = config.loads(run.dumps())
    assert again.to_dict() == run.to_dict()
    assert again.train.optim.lr_peak == 1e-3


@pytest.mark.parametrize("text", [
    "colour = 1",
    "[model]\nwidth = 3",
    "[train]\nsteps = 3",
    "[train.loss]\nalpha = 1",
    "[train.optim]\nmomentum = 0.5",
    "[eval]\nk = 0",
    "[data]\nval_fraction = 1.5",
    '[ablate]\nlayers = [1, 2]',
    'preset = "huge"',
    "seed = -1",
    "[model\n",
])
def test_rejects_bad_config(text):
    with pytest.raises(ConfigError):
        config.loads(text)


def test_ablation_grid_cardinality():
    run = config.loads('preset = "desk"')
    grid = config.ablation_grid(run, {"window": [2, 4, 6, 8]})
    assert [cfg.model.window for _, cfg in grid] == [2, 4, 6, 8]
    grid = config.ablation_grid(run, {"gaze_mode": ["none", "concat", "cross"], "flip": [True, False]})
    assert len(grid) == 6
    assert {(p["gaze_mode"], c.model.gaze_mode) for p, c in grid} == {
        ("none", "none"), ("concat", "concat"), ("cross", "cross")}
    for axis, val in [("loss", "bce"), ("sampling", "single"), ("window_mode", "framewise"),
                      ("global_token", False), ("pe_mode", "learned"), ("weight_decay", 0.0)]:
        config.with_override(run, axis, val)
    with pytest.raises(ConfigError):
        config.with_override(run, "gaze_mode", "sideways")
