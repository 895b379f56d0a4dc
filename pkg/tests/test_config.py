import pytest

from diffref3d.boxes import ConfigError
from diffref3d.config import TrainConfig, dump_train_config, load_train_config, to_flat, train_config_from_flat


def test_flat_roundtrip(tmp_path):
    cfg = train_config_from_flat({"epochs": 3, "diffusion.snr": 4, "ham.d": 16, "loss.theta_reg": 0.6})
    assert cfg.diffusion.snr == 4.0 and isinstance(cfg.diffusion.snr, float)
    assert cfg.ham.d == 16 and cfg.ham.s_hidden == 64
    path = tmp_path / "cfg.yaml"
    dump_train_config(cfg, path)
    assert load_train_config(path) == cfg
    assert train_config_from_flat(to_flat(cfg)) == cfg


def test_yaml_file(tmp_path):
    path = tmp_path / "c.yaml"
    path.write_text("epochs: 2\nenable_tt: false\nproposals.copies: 3\n")
    cfg = load_train_config(path)
    assert cfg.epochs == 2 and not cfg.enable_tt and cfg.proposals.copies == 3
    path.write_text("")
    assert load_train_config(path) == TrainConfig()


@pytest.mark.parametrize(
    "flat,needle",
    [
        ({"epoch": 3}, "epoch"),
        ({"diffusion.snrr": 2}, "diffusion.snrr"),
        ({"nonsense.key": 1}, "nonsense.key"),
        ({"diffusion": 1}, "diffusion"),
        ({"epochs": "ten"}, "epochs"),
        ({"enable_ham": 1}, "enable_ham"),
        ({"diffusion.snr": -1}, "diffusion"),
        ({"epochs": 0}, "epochs"),
    ],
)
def test_errors_name_the_key(flat, needle):
    with pytest.raises(ConfigError, match=needle.replace(".", r"\.")):
        train_config_from_flat(flat)


def test_non_mapping_file(tmp_path):
    path = tmp_path / "c.yaml"
    path.write_text("- 1\n- 2\n")
    with pytest.raises(ConfigError):
        load_train_config(path)
