import pytest

from ctxalign.config import ConfigFileError, load_config


FULL_CONFIG = """
[model]
task = forecast
mode = fsca
n_parts = 2
pruned = true
input_len = 96
horizon = 24
patch_size = 16
patch_stride = 8
normalize = true
layers = 2
width = 64
heads = 4
insertion_positions = 0, 2
freeze_policy = freeze_attention_and_ffn
max_seq_len = 512

[data]
source = synth
kind = sine_mix
length = 2000
channels = 1
noise = 0.1
data_seed = 0
window_stride = 8
train_frac = 0.7
val_frac = 0.1
test_frac = 0.2
seasonality = 1

[train]
lr0 = 1e-4
beta1 = 0.9
beta2 = 0.999
eps = 1e-8
t_max = 20
eta_min = 1e-8
batch_size = 32
patience = 5
max_epochs = 10
seed = 0
loss = mse
optimizer = adam
"""


def test_full_config_roundtrip(tmp_path):
    p = tmp_path / "cfg.ini"
    p.write_text(FULL_CONFIG)
    mcfg, dcfg, tcfg = load_config(p)
    assert mcfg.mode == "fsca" and mcfg.n_parts == 2
    assert mcfg.backbone.layers == 2
    assert mcfg.backbone.insertion_positions == (0, 2)
    assert dcfg.fractions == (0.7, 0.1, 0.2)
    assert tcfg.betas == (0.9, 0.999)
    assert tcfg.t_max == 20 and tcfg.eta_min == 1e-8


def test_defaults_from_empty_file(tmp_path):
    p = tmp_path / "cfg.ini"
    p.write_text("[model]\n")
    mcfg, dcfg, tcfg = load_config(p)
    assert mcfg.task == "forecast"
    assert tcfg.lr0 == 1e-4
    assert dcfg.source == "synth"


def test_layers_default_insertions(tmp_path):
    p = tmp_path / "cfg.ini"
    p.write_text("[model]\nlayers = 3\nwidth = 8\nheads = 2\n")
    mcfg, _, _ = load_config(p)
    assert mcfg.backbone.insertion_positions == (0, 3)


def test_unknown_key_rejected(tmp_path):
    p = tmp_path / "cfg.ini"
    p.write_text("[model]\nlayerz = 4\n")
    with pytest.raises(ConfigFileError, match="layerz"))  # noqa: intentional? no
