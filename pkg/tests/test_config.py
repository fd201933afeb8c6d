import subprocess
import sys

import pytest

from matrn.config import (TrainConfig, baseline_of, desk_config, dump_config, load_config, paper_config,
                          parse_config_text)
from matrn.errors import ConfigError


def test_dump_parse_roundtrip():
    for cfg in (desk_config(), paper_config(), desk_config(backbone_widths=(8, 8, 16, 64), keep_prob=0.3)):
        assert parse_config_text(dump_config(cfg)) == cfg


def test_dict_roundtrip():
    cfg = paper_config()
    assert TrainConfig.from_dict(cfg.to_dict()) == cfg


def test_unknown_key_rejected():
    with pytest.raises(ConfigError):
        parse_config_text("[model]\nwidth = 3\n")
    with pytest.raises(ConfigError):
        TrainConfig.from_dict({"nope": 1})


@pytest.mark.parametrize("text", ["[model\nd_model = 8", "d_model = 8\n", "[model]\nd_model = eight\n",
                                  "[model]\nvision_transformer = maybe\n"])
def test_malformed_rejected(text):
    with pytest.raises(ConfigError):
        parse_config_text(text)


@pytest.mark.parametrize("bad", [dict(iterations=0), dict(fe_variant="x"), dict(heads=3),
                                 dict(img_w=30), dict(keep_prob=1.5), dict(mask_k=10_000),
                                 dict(backbone_widths=(1, 2, 3)), dict(precision="f16")])
def test_validation(bad):
    with pytest.raises(ConfigError):
        desk_config(**bad)


def test_effective_k_and_decay():
    cfg = desk_config()
    assert cfg.num_visual == 64 and cfg.effective_k == 3
    assert cfg.effective_decay_epoch == 18
    assert desk_config(mask_k=5).effective_k == 5


def test_preset_file(tmp_path):
    p = tmp_path / "c.cfg"
    p.write_text("preset = paper\n[fusion]\nfe_variant = none\n")
    cfg = load_config(p)
    assert cfg.d_model == 512 and cfg.fe_variant == "none"
    p.write_text("preset = huge\n")
    with pytest.raises(ConfigError):
        load_config(p)
    with pytest.raises(ConfigError):
        load_config(tmp_path / "missing.cfg")


def test_baseline_disables_fusion():
    b = baseline_of(paper_config())
    assert (b.fe_variant, b.ses_mode, b.mask_mode) == ("none", "none", "none")


def test_config_determines_manifest_across_processes(tmp_path):
    p = tmp_path / "c.cfg"
    p.write_text(dump_config(desk_config(d_model=32, backbone_widths=(8, 16, 32, 32), unet_channels=8)))
    code = ("import sys; from matrn.config import load_config; from matrn.model import MATRN; "
            "m = MATRN(load_config(sys.argv[1])); "
            "print(sorted((k, v.shape) for k, v in m.state_dict().items()))")
    outs = [subprocess.run([sys.executable, "-c", code, str(p)], capture_output=True, text=True,
                           check=True).stdout for _ in range(2)]
    assert outs[0] == outs[1] and outs[0].count("(") > 10
