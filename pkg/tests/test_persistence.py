import struct

import numpy as np
import pytest

from cocktail import checkpoint, io
from cocktail.backbone import UNet
from cocktail.config import RunConfig
from cocktail.errors import CheckpointError, ContractError
from cocktail.guidance import RegionSpec
from cocktail.synthdata import ModalityBundle, generate_scene


def test_cktl_layout():
    blob = checkpoint.dumps({"a": np.array([1.5], np.float32)})
    assert blob[:4] == b"CKTL"
    assert struct.unpack("<II", blob[4:12]) == (1, 1)
    assert struct.unpack("<I", blob[12:16]) == (1,)
    assert blob[16:17] == b"a"
    assert struct.unpack("<IQ", blob[17:29]) == (1, 1)
    assert struct.unpack("<f", blob[29:]) == (1.5,)


def test_roundtrip_bit_exact(tmp_path):
    unet = UNet(seed=2)
    tensors = checkpoint.prefixed(unet, "backbone")
    checkpoint.save(tmp_path / "m.cktl", tensors)
    back = checkpoint.load(tmp_path / "m.cktl")
    assert list(back) == list(tensors)
    for k in tensors:
        assert back[k].tobytes() == tensors[k].tobytes()
    assert checkpoint.dumps(back) == checkpoint.dumps(tensors)
    u2 = UNet(seed=9)
    u2.load_state_dict(checkpoint.strip(back, "backbone"))
    for (_, a), (_, b) in zip(unet.named_parameters(), u2.named_parameters()):
        assert a.data.tobytes() == b.data.tobytes()


def test_scalar_and_empty_tensors():
    t = {"s": np.array(3.0, np.float32), "e": np.zeros((0, 2), np.float32)}
    back = checkpoint.loads(checkpoint.dumps(t))
    assert back["s"].shape == () and back["e"].shape == (0, 2)


def test_rejects_bad_files():
    good = checkpoint.dumps({"a": np.ones(2, np.float32)})
    with pytest.raises(CheckpointError, match="magic"):
        checkpoint.loads(b"XXXX" + good[4:])
    with pytest.raises(CheckpointError, match="version"):
        checkpoint.loads(good[:4] + struct.pack("<I", 2) + good[8:])
    with pytest.raises(CheckpointError):
        checkpoint.loads(good[:-3])
    with pytest.raises(CheckpointError):
        checkpoint.loads(good + b"\0")


def test_pixmap_roundtrip(tmp_path):
    img = np.random.default_rng(0).integers(0, 256, (3, 5, 7)).astype(np.float32) / 255
    io.write_ppm(tmp_path / "a.ppm", img)
    np.testing.assert_array_equal(io.read_ppm(tmp_path / "a.ppm"), img)
    g = np.random.default_rng(1).integers(0, 256, (4, 6)).astype(np.float32) / 255
    io.write_pgm(tmp_path / "a.pgm", g)
    np.testing.assert_array_equal(io.read_pgm(tmp_path / "a.pgm"), g)


def test_bundle_directory_roundtrip(tmp_path):
    scene = next(generate_scene(s) for s in range(50) if generate_scene(s).keypoints is not None)
    io.write_bundle(tmp_path / "b", scene.bundle)
    back = io.read_bundle(tmp_path / "b")
    np.testing.assert_array_equal(back.sketch, scene.bundle.sketch)
    np.testing.assert_array_equal(back.segmentation, scene.bundle.segmentation)
    np.testing.assert_allclose(back.keypoints, scene.bundle.keypoints, atol=1 / 255)
    partial = scene.bundle.with_presence([[True, False, False]])
    io.write_bundle(tmp_path / "p", partial)
    back = io.read_bundle(tmp_path / "p")
    assert back.presence.tolist() == [[True, False, False]]


def test_region_file_roundtrip(tmp_path):
    region = np.zeros((32, 32), dtype=bool)
    region[4:12, 8:20] = True
    specs = [RegionSpec(1, region), RegionSpec(2, region, positive=False)]
    io.write_regions(tmp_path / "r.txt", specs)
    back = io.read_regions(tmp_path / "r.txt")
    assert [(s.token, s.positive) for s in back] == [(1, True), (2, False)]
    np.testing.assert_array_equal(back[0].region, region)
    (tmp_path / "bad.txt").write_text("token=1 polarity=maybe mask=region0.pgm\n")
    with pytest.raises(ContractError):
        io.read_regions(tmp_path / "bad.txt")


def test_config_roundtrip():
    cfg = RunConfig(seed=5, widths=(8, 16, 16, 16), lr=1.25e-3, out="x/y")
    assert RunConfig.parse(cfg.render()) == cfg
    assert RunConfig.parse(RunConfig().render()) == RunConfig()


def test_config_defaults():
    cfg = RunConfig()
    assert (cfg.pretrain_steps, cfg.control_steps, cfg.batch_size) == (2000, 3000, 16)
    assert (cfg.steps, cfg.cfg_scale, cfg.omega_prime, cfg.lr) == (50, 9.0, 1.0, 3e-4)


def test_config_rejects():
    with pytest.raises(ContractError, match="unknown key"):
        RunConfig.parse("colour = red\n")
    with pytest.raises(ContractError):
        RunConfig.parse("n_train = 0\n")
    with pytest.raises(ContractError):
        RunConfig.parse("lr = fast\n")
