"""Quantization of trained weights, the SNW1 weight file, and ROM hex images.

SNW1 layout (all scalars little-endian)::

    magic       4s   b"SNW1"
    version     u16  1
    int_bits    u8   16
    frac_bits   u8   16
    n_layers    u16  3
    per layer:
      tag       4s   b"CNV1" | b"CNV2" | b"DNS1"
      ndim      u8
      dims      u32 * ndim        weight shape
      n_bias    u32
      n_values  u32               must equal prod(dims) + n_bias
      raw       i32 * n_values    Q16.16 words, weights row-major then biases
      real      f64 * n_values    the float values the words came from

ROM hex files hold one 8-digit uppercase two's-complement word per line.
Lines starting with ``//`` are comments.
"""

from __future__ import annotations

import os
import struct
import tempfile
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import fixedpoint as fxp
from . import netcore as nc

MAGIC = b"SNW1"
VERSION = 1
LAYER_TAGS = (b"CNV1", b"CNV2", b"DNS1")
ROM_FILES = ("conv1.mem", "conv2.mem", "dense_w.mem", "dense_b.mem")


class WeightFileError(ValueError):
    pass


class BadMagicError(WeightFileError):
    pass


class VersionMismatchError(WeightFileError):
    pass


class CountMismatchError(WeightFileError):
    pass


class TruncatedFileError(WeightFileError):
    pass


class HexFormatError(ValueError):
    pass


@dataclass
class QuantizedParams(nc.NetworkParams):
    """NetworkParams whose arrays hold raw Q16.16 words (int64)."""

    saturated: int = 0

    domain = nc.FIXED

    @classmethod
    def from_vector(cls, vec, saturated: int = 0) -> "QuantizedParams":
        p = nc.NetworkParams.from_vector(np.asarray(vec, dtype=np.int64))
        return cls(p.conv1, p.conv2, p.dense, saturated)

    def bit_equal(self, other: "QuantizedParams") -> bool:
        return np.array_equal(self.to_vector(), other.to_vector())


def quantize_params(params: nc.NetworkParams) -> QuantizedParams:
    vec = params.to_vector().astype(np.float64)
    raw = fxp.vfrom_real(vec)
    saturated = int(np.sum((raw == fxp.RAW_MAX) | (raw == fxp.RAW_MIN)))
    return QuantizedParams.from_vector(raw, saturated)


def dequantize_params(qparams: QuantizedParams) -> nc.NetworkParams:
    return nc.NetworkParams.from_vector(fxp.vto_real(qparams.to_vector()))


def atomic_write(path: Path, data: bytes | str) -> None:
    """Write via a sibling temp file so a failure never leaves partial output."""
    path = Path(path)
    mode = "wb" if isinstance(data, bytes) else "w"
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.")
    try:
        with os.fdopen(fd, mode) as fh:
            fh.write(data)
        os.replace(tmp, path)
    except BaseException:
        os.unlink(tmp)
        raise


def _layer_arrays(params: nc.NetworkParams):
    return [
        (params.conv1.kernel, params.conv1.bias.reshape(1)),
        (params.conv2.kernel, params.conv2.bias.reshape(1)),
        (params.dense.weights, params.dense.biases),
    ]


def encode_weight_file(params: nc.NetworkParams, qparams: QuantizedParams) -> bytes:
    out = bytearray(struct.pack("<4sHBBH", MAGIC, VERSION, fxp.INT_BITS, fxp.FRAC_BITS, 3))
    for tag, (w, b), (qw, qb) in zip(LAYER_TAGS, _layer_arrays(params), _layer_arrays(qparams)):
        real = np.concatenate([np.ravel(w), np.ravel(b)]).astype("<f8")
        raw = np.concatenate([np.ravel(qw), np.ravel(qb)]).astype("<i4")
        out += struct.pack("<4sB", tag, w.ndim)
        out += struct.pack(f"<{w.ndim}I", *w.shape)
        out += struct.pack("<II", b.size, real.size)
        out += raw.tobytes() + real.tobytes()
    return bytes(out)


def write_weight_file(params: nc.NetworkParams, qparams: QuantizedParams, path) -> None:
    atomic_write(Path(path), encode_weight_file(params, qparams))


class _Reader:
    def __init__(self, data: bytes):
        self.data = data
        self.pos = 0

    def take(self, fmt: str):
        size = struct.calcsize(fmt)
        if self.pos + size > len(self.data):
            raise TruncatedFileError(f"weight file ends at byte {len(self.data)}, needed {self.pos + size}")
        vals = struct.unpack_from(fmt, self.data, self.pos)
        self.pos += size
        return vals

    def array(self, dtype: str, count: int) -> np.ndarray:
        size = np.dtype(dtype).itemsize * count
        if self.pos + size > len(self.data):
            raise TruncatedFileError(f"weight file ends at byte {len(self.data)}, needed {self.pos + size}")
        arr = np.frombuffer(self.data, dtype=dtype, count=count, offset=self.pos)
        self.pos += size
        return arr


_EXPECTED = {b"CNV1": ((2, 2), 1), b"CNV2": ((2, 2), 1), b"DNS1": ((nc.CLASSES, nc.FLAT), nc.CLASSES)}


def decode_weight_file(data: bytes) -> tuple[nc.NetworkParams, QuantizedParams]:
    rd = _Reader(data)
    magic, version, int_bits, frac_bits, n_layers = rd.take("<4sHBBH")
    if magic != MAGIC:
        raise BadMagicError(f"bad weight-file magic {magic!r}")
    if version != VERSION:
        raise VersionMismatchError(f"weight-file version {version}, reader supports {VERSION}")
    if (int_bits, frac_bits) != (fxp.INT_BITS, fxp.FRAC_BITS):
        raise VersionMismatchError(f"file is Q{int_bits}.{frac_bits}, engine is Q16.16")
    if n_layers != len(LAYER_TAGS):
        raise CountMismatchError(f"expected 3 layer records, header says {n_layers}")
    reals, raws = [], []
    for want_tag in LAYER_TAGS:
        tag, ndim = rd.take("<4sB")
        if tag != want_tag:
            raise WeightFileError(f"expected layer {want_tag!r}, found {tag!r}")
        dims = rd.take(f"<{ndim}I")
        n_bias, n_values = rd.take("<II")
        if int(np.prod(dims)) + n_bias != n_values:
            raise CountMismatchError(
                f"layer {tag!r}: dims {dims} + {n_bias} biases do not match {n_values} stored values")
        if (tuple(dims), n_bias) != _EXPECTED[tag]:
            raise CountMismatchError(f"layer {tag!r} has shape {dims}+{n_bias}, expected {_EXPECTED[tag]}")
        raws.append(rd.array("<i4", n_values).astype(np.int64))
        reals.append(rd.array("<f8", n_values).astype(np.float64))
    if rd.pos != len(data):
        raise CountMismatchError(f"{len(data) - rd.pos} trailing bytes after last layer")
    params = nc.NetworkParams.from_vector(np.concatenate(reals))
    raw = np.concatenate(raws)
    sat = int(np.sum((raw == fxp.RAW_MAX) | (raw == fxp.RAW_MIN)))
    return params, QuantizedParams.from_vector(raw, sat)


def read_weight_file(path) -> tuple[nc.NetworkParams, QuantizedParams]:
    return decode_weight_file(Path(path).read_bytes())


def _hex_lines(raws) -> list[str]:
    return [f"{fxp.to_bits(int(r)):08X}" for r in np.ravel(raws)]


def rom_images(qparams: QuantizedParams) -> dict[str, str]:
    """Text of each ROM file, keyed by file name."""
    head = "// smallnet Q16.16 two's-complement words, one per line\n"
    bodies = {
        "conv1.mem": ("// kernel k00 k01 k10 k11, then bias\n",
                      np.append(qparams.conv1.kernel.ravel(), qparams.conv1.bias)),
        "conv2.mem": ("// kernel k00 k01 k10 k11, then bias\n",
                      np.append(qparams.conv2.kernel.ravel(), qparams.conv2.bias)),
        "dense_w.mem": ("// 10x49 output-major: line 49*o + i holds weight(o, i); "
                        "i = 7*row + col of the pooled map\n", qparams.dense.weights),
        "dense_b.mem": ("// bias of output 0..9\n", qparams.dense.biases),
    }
    return {name: head + note + "\n".join(_hex_lines(vals)) + "\n"
            for name, (note, vals) in bodies.items()}


def emit_rom_hex(qparams: QuantizedParams, directory) -> dict[str, int]:
    """Write the four ROM images; returns value-line counts per file."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    counts = {}
    for name, text in rom_images(qparams).items():
        atomic_write(directory / name, text)
        counts[name] = sum(1 for ln in text.splitlines() if ln and not ln.startswith("//"))
    return counts


def parse_hex_words(text: str) -> np.ndarray:
    words = []
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.strip()
        if not line or line.startswith("//"):
            continue
        if len(line) != 8 or any(c not in "0123456789ABCDEFabcdef" for c in line):
            raise HexFormatError(f"line {lineno}: {line!r} is not an 8-digit hex word")
        words.append(fxp.from_bits(int(line, 16)))
    return np.asarray(words, dtype=np.int64)


def read_rom_hex(directory) -> QuantizedParams:
    directory = Path(directory)
    parts = [parse_hex_words((directory / name).read_text()) for name in ROM_FILES]
    sizes = [p.size for p in parts]
    if sizes != [5, 5, nc.CLASSES * nc.FLAT, nc.CLASSES]:
        raise HexFormatError(f"ROM word counts {sizes}, expected [5, 5, 490, 10]")
    return QuantizedParams.from_vector(np.concatenate(parts))
