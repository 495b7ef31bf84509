import filecmp

import pytest

from magnet import cli
from magnet import dataset as ds
from magnet import metrics

TINY = """\
vq.hidden = 16
vq.d_vq = 8
vq.codebook_size = 8
vq_train.steps = 3
vq_train.batch_size = 2
vq_train.window = 16
dfot.d_model = 16
dfot.layers = 1
dfot.heads = 2
dfot.d_emb = 8
dfot_train.steps = 3
dfot_train.batch_size = 2
sample.steps = 3
"""


@pytest.fixture
def runs(tmp_path, monkeypatch):
    monkeypatch.setenv("MAGNET_RUN_DIR", str(tmp_path / "runs"))
    conf = tmp_path / "tiny.conf"
    conf.write_text(TINY)
    return tmp_path / "runs", str(conf)


@pytest.fixture
def trained(runs):
    root, conf = runs
    assert cli.main(["gen-data", "orbit", "--P", "2", "--seed", "7", "--n-train", "2", "--n-val", "1",
                     "--name", "data"]) == 0
    assert cli.main(["train-vqvae", "--config", conf, "--data", str(root / "data"), "--name", "vq"]) == 0
    assert cli.main(["train-dfot", "--config", conf, "--data", str(root / "data"),
                     "--vqvae", str(root / "vq" / "vqvae.ckpt"), "--name", "dfot"]) == 0
    return root, conf


def test_gen_data_is_reproducible(runs):
    root, _ = runs
    args = ["gen-data", "orbit", "--P", "2", "--seed", "7", "--n-train", "2"]
    assert cli.main(args + ["--name", "a"]) == 0
    assert cli.main(args + ["--name", "b"]) == 0
    names = sorted(p.name for p in (root / "a").iterdir())
    assert names == ["config.resolved", "train_000.motion", "train_001.motion"]
    for n in names:
        assert filecmp.cmp(root / "a" / n, root / "b" / n, shallow=False)
    assert "seed = 7" in (root / "a" / "config.resolved").read_text()


def test_usage_errors_name_the_flag(runs, capsys, tmp_path):
    _, conf = runs
    assert cli.main(["sample", "--config", conf, "--strategy", "inpaint", "--dfot", str(tmp_path / "x.ckpt")]) == 1
    assert "--dfot" in capsys.readouterr().err
    assert cli.main(["sample", "--strategy", "bogus"]) == 1
    assert "--strategy" in capsys.readouterr().err
    assert cli.main([]) == 1
    assert cli.main(["gen-data", "--set", "vq.nope=1"]) == 2
    assert "vq.nope" in capsys.readouterr().err
    assert cli.main(["train-vqvae", "--data", str(tmp_path / "missing")]) == 1
    assert "--data" in capsys.readouterr().err


def test_runtime_failure_exit_code(runs, tmp_path, capsys):
    bad = tmp_path / "bad.ckpt"
    bad.write_text("not a checkpoint\n")
    assert cli.main(["sample", "--dfot", str(bad), "--strategy", "joint", "--set", "sample.history=0"]) == 2
    assert "magnet:" in capsys.readouterr().err


def test_pipeline_end_to_end(trained, capsys, tmp_path):
    root, conf = trained
    dfot = str(root / "dfot" / "dfot.ckpt")
    vq = str(root / "vq" / "vqvae.ckpt")
    cond = str(root / "data" / "val_000.motion")
    for d in ("vq", "dfot"):
        assert (root / d / "config.resolved").is_file() and (root / d / "history.txt").is_file()

    # conditioning is missing for inpainting
    assert cli.main(["sample", "--config", conf, "--dfot", dfot, "--vqvae", vq, "--strategy", "inpaint"]) == 1
    assert "--conditioning" in capsys.readouterr().err
    assert cli.main(["sample", "--config", conf, "--dfot", dfot, "--vqvae", vq, "--tt-offset", "1.5",
                     "--conditioning", cond]) == 1
    assert "--tt-offset" in capsys.readouterr().err

    before = (root / "data" / "val_000.motion").read_bytes()
    assert cli.main(["sample", "--config", conf, "--dfot", dfot, "--vqvae", vq, "--strategy", "inpaint",
                     "--conditioning", cond, "--samples", "2", "--plot", "--guidance", "hg", "--name", "s"]) == 0
    assert (root / "data" / "val_000.motion").read_bytes() == before
    out = root / "s"
    assert sorted(p.name for p in out.iterdir()) == ["config.resolved", "sample_c000_s00.motion",
                                                     "sample_c000_s00.png", "sample_c000_s01.motion",
                                                     "sample_c000_s01.png"]
    motion = ds.load(out / "sample_c000_s00.motion")
    assert motion.P == 2 and motion.T == 64

    for strategy in ("predict", "joint", "agentic-sync", "agentic-async", "inbetween", "control", "ultralong"):
        extra = ["--set", "sample.total=4"] if strategy == "ultralong" else []
        assert cli.main(["sample", "--config", conf, "--dfot", dfot, "--vqvae", vq, "--strategy", strategy,
                         "--conditioning", cond, "--name", f"s_{strategy}"] + extra) == 0, strategy
    capsys.readouterr()

    assert cli.main(["evaluate", "--config", conf, "--generated", str(out), "--real", str(root / "data"),
                     "--reference", cond, "--name", "ev"]) == 0
    printed = capsys.readouterr().out
    report = metrics.parse_report((root / "ev" / "report.txt").read_text())
    assert printed == (root / "ev" / "report.txt").read_text()
    for key in ("FD", "MI", "FS", "IP", "DIV", "MPJPE", "MPJVE"):
        assert key in report

    # several conditions evaluated against a directory of references
    train0 = str(root / "data" / "train_000.motion")
    assert cli.main(["sample", "--config", conf, "--dfot", dfot, "--vqvae", vq, "--strategy", "predict",
                     "--conditioning", train0, "--conditioning", cond, "--samples", "2", "--name", "multi"]) == 0
    assert sorted(p.stem for p in (root / "multi").glob("*.motion")) == [
        "sample_c000_s00", "sample_c000_s01", "sample_c001_s00", "sample_c001_s01"]
    refs = tmp_path / "refs"
    refs.mkdir()
    (refs / "a.motion").write_bytes((root / "data" / "train_000.motion").read_bytes())
    (refs / "b.motion").write_bytes((root / "data" / "val_000.motion").read_bytes())
    assert cli.main(["evaluate", "--generated", str(root / "multi"), "--real", str(root / "data"),
                     "--reference", str(refs), "--name", "ev2"]) == 0
    assert "MPJPE" in metrics.parse_report((root / "ev2" / "report.txt").read_text())
    assert cli.main(["evaluate", "--generated", str(root / "multi"), "--real", str(root / "data"),
                     "--reference", cond]) == 1
    assert "--reference" in capsys.readouterr().err

    assert cli.main(["bench", "--config", conf, "--dfot", dfot, "--vqvae", vq, "--strategy", "joint",
                     "--set", "sample.history=0", "--repeats", "1", "--name", "b"]) == 0
    text = (root / "b" / "bench.txt").read_text()
    fields = dict(line.split("=", 1) for line in text.splitlines())
    assert float(fields["frames_per_second"]) > 0 and len(fields["config_hash"]) == 12


def test_raw_feature_pipeline(runs):
    root, conf = runs
    assert cli.main(["gen-data", "--n-train", "2", "--name", "data"]) == 0
    assert cli.main(["train-dfot", "--config", conf, "--set", "dfot.raw_features=true",
                     "--data", str(root / "data"), "--name", "raw"]) == 0
    assert cli.main(["sample", "--config", conf, "--dfot", str(root / "raw" / "dfot.ckpt"), "--strategy", "joint",
                     "--set", "sample.history=0", "--name", "rs"]) == 0
    assert (root / "rs" / "sample_c000_s00.motion").is_file()
