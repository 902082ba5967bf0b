import numpy as np
import pytest

from cocktail import checkpoint, io
from cocktail.cli import main, shuffled_order
from cocktail.config import RunConfig
from cocktail.synthdata import generate_scene

from test_train import TINY


@pytest.fixture(scope="module")
def run(tmp_path_factory):
    root = tmp_path_factory.mktemp("run")
    cfg = RunConfig(**TINY, out=str(root / "out"))
    cfg.write(root / "run.cfg")
    args = ["--config", str(root / "run.cfg")]
    for cmd in ("synth", "pretrain", "train-control"):
        assert main([cmd] + args) == 0
    return root, args


def test_synth_outputs(run):
    root, args = run
    out = root / "out"
    assert (out / "train.txt").read_text().splitlines()[0] == "split=train count=24"
    assert len((out / "eval.txt").read_text().splitlines()) == 5
    assert len(list((out / "previews").glob("*.ppm"))) == 2
    first = (out / "train.txt").read_bytes()
    assert main(["synth"] + args) == 0
    assert (out / "train.txt").read_bytes() == first


def test_synth_rejects_zero_count(tmp_path):
    (tmp_path / "c.cfg").write_text("n_train = 0\n")
    assert main(["synth", "--config", str(tmp_path / "c.cfg"), "--out", str(tmp_path)]) == 2


def test_missing_inputs(tmp_path):
    assert main(["pretrain", "--out", str(tmp_path / "none")]) == 2
    assert main(["train-control", "--out", str(tmp_path / "none")]) == 2


def test_sample_deterministic_and_neutral(run, tmp_path):
    root, args = run
    scene = next(generate_scene(s) for s in range(50) if generate_scene(s).keypoints is not None)
    io.write_bundle(tmp_path / "b", scene.bundle)
    common = ["sample"] + args + ["--prompt", scene.prompt, "--bundle", str(tmp_path / "b")]
    assert main(common + ["--name", "a.ppm"]) == 0
    assert main(common + ["--name", "b.ppm"]) == 0
    assert main(common + ["--name", "c.ppm", "--omega", "0"]) == 0
    out = root / "out"
    assert (out / "a.ppm").read_bytes() == (out / "b.ppm").read_bytes() == (out / "c.ppm").read_bytes()


def test_sample_with_regions_and_dump(run, tmp_path):
    root, args = run
    region = np.zeros((32, 32), dtype=np.float32)
    region[:16] = 1
    io.write_pgm(tmp_path / "m.pgm", region)
    (tmp_path / "r.txt").write_text("token=0 polarity=pos mask=m.pgm\n")
    dump = tmp_path / "attn.cktl"
    assert main(["sample"] + args + ["--prompt", "a red circle on a gray background", "--regions",
                                     str(tmp_path / "r.txt"), "--substitute", "1", "--dump-attn", str(dump)]) == 0
    maps = checkpoint.load(dump)
    assert "step00.backbone.enc1" in maps
    assert main(["inspect-attn"] + args + [str(dump), "--token", "0"]) == 0


def test_sample_rejects_unknown_words(run):
    _, args = run
    assert main(["sample"] + args + ["--prompt", "a plaid circle"]) == 2


def test_eval_report_deterministic(run):
    root, args = run
    assert main(["eval"] + args) == 0
    first = (root / "out" / "eval_report.txt").read_bytes()
    assert main(["eval"] + args) == 0
    assert (root / "out" / "eval_report.txt").read_bytes() == first
    text = first.decode()
    for arm in ("matched", "shuffled", "ceiling"):
        assert f"{arm}.count=4" in text
    assert "ceiling.miou=1.000000" in text


def test_shuffled_order_is_derangement():
    for n in (2, 3, 64):
        order = shuffled_order(n)
        assert sorted(order) == list(range(n))
        assert (order != np.arange(n)).all()
