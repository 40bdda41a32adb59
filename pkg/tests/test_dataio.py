import struct
import zlib

import numpy as np
import pytest

from tubelet import dataio, datasim
from tubelet import model as mdl
from tubelet import trainer as tr
from tubelet.errors import (BadMagicError, ConfigError, CRCMismatchError, ExtentOverflowError,
                            FormatError, TruncatedFileError)


@pytest.fixture(scope="module")
def dataset():
    return datasim.make_dataset(1, 5, 20, 20, clouds=6, T=4).subset([0, 1, 2])


@pytest.fixture(scope="module")
def checkpoint(tmp_path_factory):
    data = datasim.make_dataset(1, 5, 20, 20, clouds=6, T=4)
    cfg = mdl.ModelConfig.for_variant("smts-vivit", T=4, H=20, W=20, d_e=8, depth=1, heads=2, ff_dim=16)
    res = tr.train(data, cfg, tr.TrainConfig(epochs=1, batch_size=2), progress=None)
    path = tmp_path_factory.mktemp("ck") / "c.tblt"
    dataio.save_checkpoint(str(path), cfg, tr.TrainConfig(epochs=1, batch_size=2), res)
    return path, cfg, res


def test_container_round_trip(dataset, tmp_path):
    path = tmp_path / "d.rstk"
    dataio.write_container(path, dataset)
    back = dataio.read_container(path)
    assert back.digest() == dataset.digest()
    assert back.mask.dtype == np.float32 and set(np.unique(back.mask)) <= {0.0, 1.0}


def test_container_without_sar(dataset, tmp_path):
    no_sar = datasim.Dataset(dataset.msi_clouded, None, dataset.mask, dataset.target)
    dataio.write_container(tmp_path / "n.rstk", no_sar)
    back = dataio.read_container(tmp_path / "n.rstk")
    assert back.sar is None and back.digest() == no_sar.digest()


def test_empty_container(tmp_path):
    empty = datasim.Dataset(np.zeros((0, 4, 11, 5, 5), np.float32), None,
                            np.zeros((0, 4, 5, 5), np.float32), np.zeros((0, 4, 11, 5, 5), np.float32))
    dataio.write_container(tmp_path / "e.rstk", empty)
    assert len(dataio.read_container(tmp_path / "e.rstk")) == 0


def test_container_header_layout(dataset, tmp_path):
    raw = dataio.encode_container(dataset)
    assert raw[:4] == b"RSTK"
    assert struct.unpack("<HI", raw[4:10]) == (1, 3)
    (entries,) = struct.unpack("<H", raw[10:12])
    assert entries == 4
    (n,) = struct.unpack("<H", raw[12:14])
    assert raw[14:14 + n] == b"msi_clouded"
    rank = raw[14 + n]
    assert rank == 4
    assert struct.unpack("<4I", raw[15 + n:31 + n]) == (4, 11, 20, 20)
    assert struct.unpack("<I", raw[-4:])[0] == zlib.crc32(raw[:-4])


def test_sidecar_restores_seeds(dataset, tmp_path):
    path = str(tmp_path / "d.rstk")
    dataio.write_container(path, dataset)
    dataio.write_sidecar(path, dataset)
    back = dataio.load_dataset(path)
    assert back.sample_seeds == dataset.sample_seeds
    assert back.meta["clouds"] == 6


def corrupt(path, tmp_path, fn):
    raw = bytearray(open(path, "rb").read())
    out = tmp_path / "bad.bin"
    out.write_bytes(bytes(fn(raw)))
    return out


def test_distinct_container_errors(dataset, tmp_path):
    path = tmp_path / "d.rstk"
    dataio.write_container(path, dataset)

    def flip(raw):
        raw[200] ^= 0xFF
        return raw

    def magic(raw):
        raw[0:4] = b"XXXX"
        return raw

    with pytest.raises(CRCMismatchError):
        dataio.read_container(corrupt(path, tmp_path, flip))
    with pytest.raises(BadMagicError):
        dataio.read_container(corrupt(path, tmp_path, magic))
    with pytest.raises(TruncatedFileError):
        dataio.read_container(corrupt(path, tmp_path, lambda r: r[:3]))
    with pytest.raises(TruncatedFileError):
        dataio.read_container(corrupt(path, tmp_path, lambda r: r[:40]))


def test_extent_overflow(tmp_path):
    parts = [b"RSTK", struct.pack("<HI", 1, 1), struct.pack("<H", 1)]
    name = b"target"
    parts += [struct.pack("<H", len(name)), name, struct.pack("<B", 2), struct.pack("<2I", 100000, 100000)]
    body = b"".join(parts) + b"\0" * 16
    (tmp_path / "o.rstk").write_bytes(body + struct.pack("<I", zlib.crc32(body)))
    with pytest.raises(ExtentOverflowError):
        dataio.read_container(tmp_path / "o.rstk")


def test_error_types_are_distinct():
    kinds = {TruncatedFileError, BadMagicError, CRCMismatchError, ExtentOverflowError}
    assert len(kinds) == 4 and all(issubclass(k, FormatError) for k in kinds)


def test_checkpoint_round_trip(checkpoint):
    path, cfg, res = checkpoint
    ck = dataio.load_checkpoint(str(path))
    assert ck.model_config == cfg and ck.epoch == 1 and ck.losses == res.losses
    assert list(ck.params) == list(mdl.param_shapes(cfg))
    for k in res.params:
        assert ck.params[k].data.tobytes() == res.params[k].data.tobytes()
        assert ck.state.m[k].tobytes() == res.state.m[k].tobytes()
        assert ck.state.v[k].tobytes() == res.state.v[k].tobytes()
    assert ck.state.step == res.state.step
    again = dataio.encode_checkpoint(ck.model_config, ck.train_config, dataio.as_train_result(ck), ck.loss_config)
    assert again == open(path, "rb").read()


def test_checkpoint_single_byte_flip_detected(checkpoint, tmp_path):
    path = checkpoint[0]
    size = len(open(path, "rb").read())
    for pos in (6, size // 3, size // 2, size - 5):
        def flip(raw, pos=pos):
            raw[pos] ^= 0x01
            return raw
        with pytest.raises(FormatError):
            dataio.load_checkpoint(str(corrupt(path, tmp_path, flip)))
    # Inside a float payload the structure still parses, so only the CRC can catch it.
    def flip_payload(raw):
        raw[size - 9] ^= 0x01
        return raw
    with pytest.raises(CRCMismatchError):
        dataio.load_checkpoint(str(corrupt(path, tmp_path, flip_payload)))


def test_checkpoint_missing_parameter(checkpoint, tmp_path):
    path, cfg, res = checkpoint
    params = dict(res.params)
    params.pop("dec.norm.gain")
    state = tr.OptimizerState({k: res.state.m[k] for k in params}, {k: res.state.v[k] for k in params}, 1)
    dataio.save_checkpoint(tmp_path / "m.tblt", cfg, tr.TrainConfig(), tr.TrainResult(params, state, [1.0], [], 1))
    with pytest.raises(FormatError, match="dec.norm.gain"):
        dataio.load_checkpoint(tmp_path / "m.tblt")


# -- PNG -------------------------------------------------------------------

def test_black_frame(tmp_path):
    dataio.write_png(np.zeros((11, 6, 7)), (3, 2, 1), tmp_path / "z.png")
    img = dataio.read_png(tmp_path / "z.png")
    assert img.shape == (6, 7, 3) and not img.any()


def test_natural_colour_channel_order(tmp_path):
    frame = np.zeros((11, 2, 2))
    frame[3], frame[2], frame[1] = 1.0, 0.5, 0.25  # B4 red, B3 green, B2 blue
    frame[0] = 2.0  # clamped, unused
    dataio.write_png(frame, dataio.NATURAL_COLOR, tmp_path / "n.png")
    img = dataio.read_png(tmp_path / "n.png")
    assert tuple(img[0, 0]) == (255, 128, 64)


def test_clamping_and_bad_band(tmp_path):
    frame = np.full((3, 2, 2), 1.7)
    frame[1] = -0.3
    assert tuple(dataio.to_rgb8(frame, (0, 1, 2))[0, 0]) == (255, 0, 255)
    with pytest.raises(ConfigError):
        dataio.write_png(frame, (0, 1, 3), tmp_path / "x.png")


def test_error_map_ramp(tmp_path):
    dataio.write_error_png(np.zeros((4, 4)), tmp_path / "w.png")
    assert np.all(dataio.read_png(tmp_path / "w.png") == 255)
    rgb = dataio.error_rgb8(np.array([[-1.0, 0.0, 1.0]]), limit=1.0)
    assert tuple(rgb[0, 0]) == (0, 0, 255)
    assert tuple(rgb[0, 1]) == (255, 255, 255)
    assert tuple(rgb[0, 2]) == (255, 0, 0)
