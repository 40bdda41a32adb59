"""Binary dataset containers, checkpoints, and PNG rendering.

Both binary formats are little-endian and end with a CRC32 of every
preceding byte. A tensor entry is encoded as::

    u16 name length | UTF-8 name | u8 rank | u32 extent * rank | f32 payload

Container (``RSTK``)::

    magic | u16 version | u32 samples | per sample: u16 entries, entries... | u32 crc

Checkpoint (``TBLT``)::

    magic | u16 version | u32 json length | JSON | u32 entries | entries... | u32 crc
"""
import json
import math
import os
import struct
import zlib
from collections import OrderedDict
from dataclasses import dataclass, field

import numpy as np
from PIL import Image

from . import model as mdl
from . import tensor as tn
from .datasim import Dataset
from .errors import (BadMagicError, ConfigError, CRCMismatchError, ExtentOverflowError,
                     FormatError, TruncatedFileError)
from .objectives import LossConfig
from .trainer import OptimizerState, TrainConfig, TrainResult

CONTAINER_MAGIC = b"RSTK"
CHECKPOINT_MAGIC = b"TBLT"
FORMAT_VERSION = 1
SAMPLE_ENTRIES = ("msi_clouded", "sar", "mask", "target")
MAX_PAYLOAD = 1 << 34


# -- low-level encoding ----------------------------------------------------

def _encode_entry(out, name, array):
    raw = name.encode("utf-8")
    arr = np.ascontiguousarray(array, dtype="<f4")
    out.append(struct.pack("<H", len(raw)))
    out.append(raw)
    out.append(struct.pack("<B", arr.ndim))
    out.append(struct.pack(f"<{arr.ndim}I", *arr.shape))
    out.append(arr.tobytes())


def _finish(parts):
    body = b"".join(parts)
    return body + struct.pack("<I", zlib.crc32(body) & 0xFFFFFFFF)


class _Reader:
    def __init__(self, buf, end):
        self.buf = buf
        self.pos = 0
        self.end = end

    def take(self, n, what):
        if self.pos + n > self.end:
            raise TruncatedFileError(f"file truncated while reading {what} at byte {self.pos}")
        chunk = self.buf[self.pos:self.pos + n]
        self.pos += n
        return chunk

    def unpack(self, fmt, what):
        size = struct.calcsize(fmt)
        return struct.unpack(fmt, self.take(size, what))

    def entry(self):
        (n,) = self.unpack("<H", "entry name length")
        try:
            name = self.take(n, "entry name").decode("utf-8")
        except UnicodeDecodeError as exc:
            raise FormatError(f"entry name is not valid UTF-8 at byte {self.pos}") from exc
        (rank,) = self.unpack("<B", f"rank of {name!r}")
        extents = self.unpack(f"<{rank}I", f"extents of {name!r}")
        nbytes = 4 * math.prod(extents)
        if nbytes > MAX_PAYLOAD or self.pos + nbytes > self.end:
            raise ExtentOverflowError(
                f"entry {name!r} declares extents {extents} ({nbytes} bytes) beyond the "
                f"{self.end - self.pos} bytes remaining"
            )
        data = np.frombuffer(self.take(nbytes, name), dtype="<f4").reshape(extents)
        return name, data.astype(np.float32)


def _open(path, magic):
    with open(path, "rb") as fh:
        buf = fh.read()
    if len(buf) < len(magic) + 2:
        raise TruncatedFileError(f"{path}: {len(buf)} bytes is too short for a header")
    if buf[:4] != magic:
        raise BadMagicError(f"{path}: expected magic {magic!r}, found {buf[:4]!r}")
    if len(buf) < 10:
        raise TruncatedFileError(f"{path}: {len(buf)} bytes is too short for a header")
    reader = _Reader(buf, len(buf) - 4)
    reader.pos = 4
    (version,) = reader.unpack("<H", "version")
    if version != FORMAT_VERSION:
        raise FormatError(f"{path}: unsupported format version {version}")
    return buf, reader


def _verify(buf, reader, path):
    if reader.pos != reader.end:
        raise FormatError(f"{path}: {reader.end - reader.pos} unexpected bytes before the CRC")
    (stored,) = struct.unpack("<I", buf[-4:])
    actual = zlib.crc32(buf[:-4]) & 0xFFFFFFFF
    if stored != actual:
        raise CRCMismatchError(f"{path}: CRC mismatch (stored {stored:#010x}, computed {actual:#010x})")


def _atomic_write(path, payload):
    tmp = f"{path}.tmp"
    with open(tmp, "wb") as fh:
        fh.write(payload)
    os.replace(tmp, path)


# -- dataset container -----------------------------------------------------

def encode_container(dataset):
    n = 0 if dataset is None else len(dataset)
    parts = [CONTAINER_MAGIC, struct.pack("<HI", FORMAT_VERSION, n)]
    for i in range(n):
        entries = [(k, getattr(dataset, k)) for k in SAMPLE_ENTRIES if getattr(dataset, k) is not None]
        parts.append(struct.pack("<H", len(entries)))
        for name, arr in entries:
            _encode_entry(parts, name, arr[i])
    return _finish(parts)


def write_container(path, dataset):
    _atomic_write(path, encode_container(dataset))


def read_container(path):
    """Decode a dataset container. An empty container yields an empty Dataset."""
    buf, r = _open(path, CONTAINER_MAGIC)
    (count,) = r.unpack("<I", "sample count")
    samples = []
    for s in range(count):
        (n_entries,) = r.unpack("<H", f"entry count of sample {s}")
        entries = {}
        for _ in range(n_entries):
            name, data = r.entry()
            if name in entries:
                raise FormatError(f"{path}: duplicate entry {name!r} in sample {s}")
            entries[name] = data
        missing = {"msi_clouded", "mask", "target"} - set(entries)
        if missing:
            raise FormatError(f"{path}: sample {s} lacks entries {sorted(missing)}")
        samples.append(entries)
    _verify(buf, r, path)
    if not samples:
        empty = np.zeros((0, 0, 0, 0, 0), dtype=np.float32)
        return Dataset(empty, None, np.zeros((0, 0, 0, 0), dtype=np.float32), empty.copy())
    has_sar = ["sar" in e for e in samples]
    if any(has_sar) and not all(has_sar):
        raise FormatError(f"{path}: SAR present in some samples but not others")

    def stack(key):
        return np.stack([e[key] for e in samples])

    return Dataset(stack("msi_clouded"), stack("sar") if all(has_sar) else None,
                   stack("mask"), stack("target"))


def write_sidecar(path, dataset):
    meta = dict(dataset.meta, sample_seeds=[int(s) for s in dataset.sample_seeds],
                n_train=int(dataset.n_train), n_val=int(len(dataset) - dataset.n_train),
                digest=dataset.digest())
    with open(f"{path}.json", "w", encoding="utf-8") as fh:
        json.dump(meta, fh, indent=2)
    return meta


def load_dataset(path):
    """Container plus its JSON sidecar (generation parameters and sample seeds), if present."""
    ds = read_container(path)
    side = f"{path}.json"
    if os.path.exists(side):
        with open(side, encoding="utf-8") as fh:
            meta = json.load(fh)
        ds.sample_seeds = list(meta.pop("sample_seeds", []))
        ds.meta = meta
    return ds


# -- checkpoints -----------------------------------------------------------

@dataclass
class Checkpoint:
    model_config: mdl.ModelConfig
    train_config: TrainConfig
    loss_config: LossConfig
    params: OrderedDict
    state: OptimizerState
    epoch: int = 0
    losses: list = field(default_factory=list)
    val_log: list = field(default_factory=list)
    extra: dict = field(default_factory=dict)


def encode_checkpoint(model_config, train_config, result, loss_config=LossConfig(), extra=None):
    blob = {
        "model": model_config.to_dict(),
        "train": train_config.to_dict(),
        "loss": {"scales": list(loss_config.scales), "w_mse": loss_config.w_mse,
                 "w_sam": loss_config.w_sam, "sam_epsilon": loss_config.sam_epsilon},
        "epoch": result.epoch,
        "step": result.state.step,
        "losses": list(result.losses),
        "val_log": list(result.val_log),
        "extra": extra or {},
    }
    raw = json.dumps(blob, sort_keys=True).encode("utf-8")
    entries = [(k, p.data) for k, p in result.params.items()]
    entries += [(f"adam.m.{k}", v) for k, v in result.state.m.items()]
    entries += [(f"adam.v.{k}", v) for k, v in result.state.v.items()]
    parts = [CHECKPOINT_MAGIC, struct.pack("<HI", FORMAT_VERSION, len(raw)), raw,
             struct.pack("<I", len(entries))]
    for name, arr in entries:
        _encode_entry(parts, name, arr)
    return _finish(parts)


def save_checkpoint(path, model_config, train_config, result, loss_config=LossConfig(), extra=None):
    _atomic_write(path, encode_checkpoint(model_config, train_config, result, loss_config, extra))


def load_checkpoint(path):
    buf, r = _open(path, CHECKPOINT_MAGIC)
    (n,) = r.unpack("<I", "config length")
    try:
        blob = json.loads(r.take(n, "config JSON").decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        # A damaged blob is usually a flipped byte; report the CRC if that is the cause.
        _check_crc_only(buf, path)
        raise FormatError(f"{path}: config blob is not valid JSON") from exc
    (count,) = r.unpack("<I", "entry count")
    tensors = OrderedDict()
    for _ in range(count):
        name, data = r.entry()
        if name in tensors:
            raise FormatError(f"{path}: duplicate entry {name!r}")
        tensors[name] = data
    _verify(buf, r, path)
    try:
        mc = mdl.ModelConfig(**blob["model"])
        tc = TrainConfig(**blob["train"])
        lc = LossConfig(**blob["loss"])
    except (TypeError, KeyError, ConfigError) as exc:
        raise FormatError(f"{path}: checkpoint config is invalid: {exc}") from exc
    shapes = mdl.param_shapes(mc)
    params, m, v = OrderedDict(), {}, {}
    for name, shape in shapes.items():
        if name not in tensors:
            raise FormatError(f"{path}: parameter {name!r} missing")
        if tensors[name].shape != shape:
            raise FormatError(f"{path}: parameter {name!r} has shape {tensors[name].shape}, expected {shape}")
        params[name] = tn.parameter(tensors.pop(name), name=name)
        m[name] = tensors.pop(f"adam.m.{name}", np.zeros(shape, np.float32))
        v[name] = tensors.pop(f"adam.v.{name}", np.zeros(shape, np.float32))
    if tensors:
        raise FormatError(f"{path}: unexpected entries {sorted(tensors)[:5]}")
    state = OptimizerState(m, v, int(blob["step"]))
    return Checkpoint(mc, tc, lc, params, state, int(blob["epoch"]), list(blob["losses"]),
                      list(blob["val_log"]), blob.get("extra", {}))


def _check_crc_only(buf, path):
    (stored,) = struct.unpack("<I", buf[-4:])
    if stored != zlib.crc32(buf[:-4]) & 0xFFFFFFFF:
        raise CRCMismatchError(f"{path}: CRC mismatch")


def as_train_result(ckpt):
    return TrainResult(ckpt.params, ckpt.state, list(ckpt.losses), list(ckpt.val_log), ckpt.epoch)


# -- PNG -------------------------------------------------------------------

NATURAL_COLOR = (3, 2, 1)


def check_bands(band_triple, channels):
    if len(band_triple) != 3:
        raise ConfigError(f"expected three band indices, got {len(band_triple)}")
    for b in band_triple:
        if not 0 <= b < channels:
            raise ConfigError(f"band index {b} out of range for a {channels}-channel frame")


def to_rgb8(frame, band_triple=NATURAL_COLOR, gain=1.0):
    frame = np.asarray(frame)
    check_bands(band_triple, frame.shape[0])
    rgb = np.stack([frame[b] for b in band_triple], axis=-1) * gain
    return np.round(np.clip(rgb, 0.0, 1.0) * 255.0).astype(np.uint8)


def write_png(frame, band_triple, path, gain=1.0):
    """Render three bands of a (C, H, W) frame on [0, 1] as an 8-bit RGB PNG."""
    Image.fromarray(to_rgb8(frame, band_triple, gain), mode="RGB").save(path)


def error_rgb8(error, limit=None):
    """Diverging ramp: blue for negative, white at zero, red for positive."""
    e = np.asarray(error, dtype=np.float64)
    if limit is None:
        limit = float(np.abs(e).max())
    x = np.clip(e / limit, -1.0, 1.0) if limit > 0 else np.zeros_like(e)
    fade = 1.0 - np.abs(x)
    r = np.where(x < 0, fade, 1.0)
    b = np.where(x > 0, fade, 1.0)
    rgb = np.stack([r, fade, b], axis=-1)
    return np.round(rgb * 255.0).astype(np.uint8)


def write_error_png(error, path, limit=None):
    Image.fromarray(error_rgb8(error, limit), mode="RGB").save(path)


def read_png(path):
    with Image.open(path) as im:
        return np.asarray(im.convert("RGB"))
