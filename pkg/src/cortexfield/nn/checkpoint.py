"""Versioned binary checkpoints.

Layout (little-endian)::

    b"CFCKPT1\\n"
    u32 header length, UTF-8 JSON header (configs, digest, dtype, step)
    u32 block count
    per block: u16 name length, name, u8 ndim, u32 * ndim shape,
               u8 dtype code (0 float32, 1 float64), raw payload
    u32 CRC-32 of everything above
"""
from __future__ import annotations

import json
import struct
import zlib
from pathlib import Path

import numpy as np

from ..errors import CorruptCheckpoint, IoError, VersionMismatch
from ..volume import TemplateSpace
from .decoder import DecoderConfig
from .encoder import EncoderConfig
from .model import FieldModel
from .train import Adam

MAGIC = b"CFCKPT1\n"
_DTYPES = {0: np.dtype("<f4"), 1: np.dtype("<f8")}
_CODES = {np.dtype("float32"): 0, np.dtype("float64"): 1}


def save_checkpoint(model: FieldModel, path, optimizer: Adam | None = None, extra: dict | None = None) -> None:
    header = {
        "config": model.config_dict(),
        "digest": model.config_digest(),
        "dtype": model.dtype.name,
        "seed": model.seed,
        "mode": "train" if model.training else "eval",
        "optimizer": None if optimizer is None else {
            "lr": optimizer.lr, "betas": list(optimizer.betas), "eps": optimizer.eps,
            "weight_decay": optimizer.weight_decay},
        "extra": extra or {},
    }
    blocks = {f"param.{k}": v for k, v in model.parameters().items()}
    blocks.update({f"buffer.{k}": v for k, v in model.buffers().items()})
    if optimizer is not None:
        blocks.update({f"adam.{k}": v for k, v in optimizer.state().items()})
    out = bytearray(MAGIC)
    hjson = json.dumps(header, sort_keys=True).encode()
    out += struct.pack("<I", len(hjson)) + hjson
    out += struct.pack("<I", len(blocks))
    for name, arr in blocks.items():
        arr = np.asarray(arr)
        code = _CODES[arr.dtype]
        bname = name.encode()
        out += struct.pack("<H", len(bname)) + bname
        out += struct.pack("<B", arr.ndim) + struct.pack(f"<{arr.ndim}I", *arr.shape)
        out += struct.pack("<B", code)
        out += np.ascontiguousarray(arr, dtype=_DTYPES[code]).tobytes()
    out += struct.pack("<I", zlib.crc32(bytes(out)))
    try:
        Path(path).write_bytes(bytes(out))
    except OSError as exc:
        raise IoError(str(exc)) from exc


class _Reader:
    def __init__(self, blob: bytes):
        self.blob, self.pos = blob, 0

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.blob):
            raise CorruptCheckpoint("checkpoint truncated")
        chunk = self.blob[self.pos:self.pos + n]
        self.pos += n
        return chunk

    def unpack(self, fmt: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))


def read_checkpoint(path) -> tuple[dict, dict]:
    """Raw ``(header, blocks)`` after integrity checks."""
    try:
        blob = Path(path).read_bytes()
    except OSError as exc:
        raise IoError(str(exc)) from exc
    if not blob.startswith(MAGIC):
        if blob.startswith(b"CFCKPT"):
            raise VersionMismatch(f"unsupported checkpoint version {blob[:7]!r}")
        raise CorruptCheckpoint("not a checkpoint file")
    if len(blob) < len(MAGIC) + 12:
        raise CorruptCheckpoint("checkpoint truncated")
    (crc,) = struct.unpack("<I", blob[-4:])
    if zlib.crc32(blob[:-4]) != crc:
        raise CorruptCheckpoint("checksum mismatch (truncated or corrupted file)")
    r = _Reader(blob[:-4])
    r.take(len(MAGIC))
    (hlen,) = r.unpack("<I")
    try:
        header = json.loads(r.take(hlen))
    except ValueError as exc:
        raise CorruptCheckpoint(f"bad header: {exc}") from exc
    (count,) = r.unpack("<I")
    blocks = {}
    for _ in range(count):
        (nlen,) = r.unpack("<H")
        name = r.take(nlen).decode()
        (ndim,) = r.unpack("<B")
        shape = r.unpack(f"<{ndim}I") if ndim else ()
        (code,) = r.unpack("<B")
        if code not in _DTYPES:
            raise CorruptCheckpoint(f"unknown dtype code {code}")
        dt = _DTYPES[code]
        size = int(np.prod(shape)) * dt.itemsize
        blocks[name] = np.frombuffer(r.take(size), dtype=dt).reshape(shape).copy()
    return header, blocks


def model_from_config(config: dict, dtype="float32", seed: int = 0) -> FieldModel:
    enc = config["encoder"]
    enc = EncoderConfig(levels=tuple(enc["levels"]), global_dim=enc["global_dim"], input_size=enc["input_size"],
                        global_pool=enc["global_pool"], hypercolumns=enc["hypercolumns"])
    dec = DecoderConfig(**config["decoder"])
    t = config["template"]
    template = TemplateSpace(tuple(t["bbox_min"]), tuple(t["bbox_max"]), t["name"])
    return FieldModel(enc, dec, template, seed=seed, dtype=np.dtype(dtype))


def load_checkpoint(path, expected: FieldModel | None = None) -> tuple[FieldModel, Adam | None, dict]:
    """Rebuild the model (and optimizer, if saved) from a checkpoint.

    With ``expected``, the checkpoint's configuration digest must match the
    expected model's, otherwise ``VersionMismatch`` is raised.
    """
    header, blocks = read_checkpoint(path)
    if expected is not None and header.get("digest") != expected.config_digest():
        raise VersionMismatch(f"checkpoint config {header.get('digest')} != expected {expected.config_digest()}")
    try:
        model = model_from_config(header["config"], header["dtype"], header.get("seed", 0))
    except (KeyError, TypeError, ValueError) as exc:
        raise CorruptCheckpoint(f"bad config: {exc}") from exc
    if model.config_digest() != header.get("digest"):
        raise VersionMismatch("configuration digest does not match its configuration")
    expected_names = {f"param.{k}" for k in model.parameters()} | {f"buffer.{k}" for k in model.buffers()}
    missing = expected_names - set(blocks)
    if missing:
        raise VersionMismatch(f"checkpoint lacks tensors: {sorted(missing)[:3]}")
    for name in expected_names:
        try:
            model.set_tensor(name.split(".", 1)[1], blocks[name])
        except Exception as exc:
            raise VersionMismatch(f"{name}: {exc}") from exc
    if header.get("mode") == "eval":
        model.eval()
    optimizer = None
    if header.get("optimizer"):
        o = header["optimizer"]
        optimizer = Adam(o["lr"], tuple(o["betas"]), o["eps"], o["weight_decay"])
        optimizer.load_state({k[5:]: v.astype(model.dtype) if k != "adam.t" else v
                              for k, v in blocks.items() if k.startswith("adam.")})
    return model, optimizer, header.get("extra", {})
