import pytest

from magnet import config
from magnet.errors import ConfigError


def test_defaults_cover_every_module_section():
    d = config.defaults()
    for prefix in ("vq.", "vq_train.", "dfot.", "dfot_train.", "sample.", "data.", "eval."):
        assert any(k.startswith(prefix) for k in d)
    assert "dfot.d_z" not in d
    assert list(d) == sorted(d)


def test_loads_comments_and_types():
    cfg = config.loads("# header\nvq.hidden = 16   # inline\n\ndfot_train.lr=1e-3\nsample.snap = no\n"
                       "sample.strategy = predict\n")
    assert cfg["vq.hidden"] == 16 and cfg["dfot_train.lr"] == 1e-3
    assert cfg["sample.snap"] is False and cfg["sample.strategy"] == "predict"
    assert cfg.vq().hidden == 16
    assert cfg.dfot(d_z=8).d_z == 8


@pytest.mark.parametrize("text,where", [
    ("vq.hiden = 3\n", "line 1"),
    ("seed = 0\nvq.hidden = big\n", "line 2"),
    ("seed 3\n", "line 1"),
    ("sample.snap = maybe\n", "line 1"),
    ("dfot.d_z = 8\n", "line 1"),
])
def test_bad_lines_are_rejected(text, where):
    with pytest.raises(ConfigError, match=where):
        config.loads(text)


def test_dump_roundtrip_and_layering(tmp_path):
    cfg = config.loads("vq.hidden = 16\nsample.w = 2.5\n")
    again = config.loads(cfg.dumps())
    assert again.values == cfg.values
    path = tmp_path / "over.conf"
    path.write_text("sample.w = 0.0\n")
    layered = config.load(path, base=cfg)
    assert layered["vq.hidden"] == 16 and layered["sample.w"] == 0.0
    assert cfg["sample.w"] == 2.5


def test_shipped_configs_parse():
    from pathlib import Path
    root = Path(__file__).resolve().parents[1] / "configs"
    files = sorted(root.glob("*.conf"))
    assert files
    for f in files:
        config.load(f)
