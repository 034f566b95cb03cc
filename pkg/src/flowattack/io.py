"""Bit-exact file formats and flow visualization.

Flow files: the float32 'PIEH' format and 16-bit PNG fields storing
64 * value + 2^15 with a validity channel. Images: binary P6 PPM and
8/16-bit grayscale/RGB PNG through a minimal built-in codec (the stock
imaging libraries cannot write 16-bit RGB reliably, and the byte-exact
roundtrip guarantees here are easier to keep without them). Everything is
little-endian on disk where a choice exists, regardless of host.
"""

from __future__ import annotations

import os
import struct
import zlib

import numpy as np

from .core import FlowField, Image, Perturbation, PerturbMode

__all__ = [
    "FormatError", "read_flo", "write_flo", "read_kitti_flow", "write_kitti_flow",
    "read_flow_any", "read_image", "write_image_png", "flow_to_color",
    "perturbation_to_image", "write_perturbation", "read_perturbation",
    "atomic_write_bytes",
]


class FormatError(ValueError):
    """File content does not match its declared format."""


FLO_MAGIC = 202021.25
_PNG_SIG = b"\x89PNG\r\n\x1a\n"


def atomic_write_bytes(path, data: bytes):
    """Write via a sibling temp file + rename, so readers never see a
    partial file."""
    path = os.fspath(path)
    tmp = path + ".tmp"
    with open(tmp, "wb") as fh:
        fh.write(data)
    os.replace(tmp, path)


# ---------------------------------------------------------------------------
# .flo
# ---------------------------------------------------------------------------

def write_flo(path, flow: FlowField):
    data = np.asarray(flow.data if isinstance(flow, FlowField) else flow,
                      dtype=np.float64)
    if not np.all(np.isfinite(data)):
        raise ValueError("refusing to write non-finite flow")
    height, width = data.shape[1:]
    interleaved = np.empty((height, width, 2), dtype="<f4")
    interleaved[..., 0] = data[0]
    interleaved[..., 1] = data[1]
    payload = struct.pack("<fii", FLO_MAGIC, width, height) + interleaved.tobytes()
    atomic_write_bytes(path, payload)


def read_flo(path) -> FlowField:
    with open(path, "rb") as fh:
        raw = fh.read()
    if len(raw) < 12:
        raise FormatError(f"{path}: truncated flow file header")
    magic, width, height = struct.unpack("<fii", raw[:12])
    if np.float32(magic) != np.float32(FLO_MAGIC):
        raise FormatError(f"{path}: bad flow file magic {magic!r}")
    if width <= 0 or height <= 0:
        raise FormatError(f"{path}: invalid dimensions {width}x{height}")
    expected = 12 + 8 * width * height
    if len(raw) < expected:
        raise FormatError(f"{path}: truncated flow payload "
                         f"({len(raw)} bytes, expected {expected})")
    interleaved = np.frombuffer(raw[12:expected], dtype="<f4").reshape(
        height, width, 2)
    return FlowField(np.stack([interleaved[..., 0], interleaved[..., 1]]).astype(
        np.float64))


# ---------------------------------------------------------------------------
# minimal PNG codec: color types 0 (gray) and 2 (RGB), depths 8 and 16
# ---------------------------------------------------------------------------

def _png_chunk(kind: bytes, data: bytes) -> bytes:
    return (struct.pack(">I", len(data)) + kind + data
            + struct.pack(">I", zlib.crc32(kind + data) & 0xFFFFFFFF))


def _png_encode(samples: np.ndarray, bit_depth: int) -> bytes:
    """samples: (M, N) or (M, N, 3) unsigned ints already within depth."""
    if bit_depth not in (8, 16):
        raise ValueError("bit depth must be 8 or 16")
    if samples.ndim == 2:
        color_type, channels = 0, 1
        rows = samples[:, :, None]
    elif samples.ndim == 3 and samples.shape[2] == 3:
        color_type, channels = 2, 3
        rows = samples
    else:
        raise ValueError(f"unsupported sample shape {samples.shape}")
    height, width = rows.shape[:2]
    dtype = ">u2" if bit_depth == 16 else "u1"
    body = rows.astype(dtype).tobytes()
    stride = width * channels * (bit_depth // 8)
    raw = bytearray()
    for r in range(height):
        raw.append(0)  # filter type None on every scanline
        raw += body[r * stride:(r + 1) * stride]
    ihdr = struct.pack(">IIBBBBB", width, height, bit_depth, color_type, 0, 0, 0)
    return (_PNG_SIG + _png_chunk(b"IHDR", ihdr)
            + _png_chunk(b"IDAT", zlib.compress(bytes(raw)))
            + _png_chunk(b"IEND", b""))


def _paeth(a, b, c):
    p = a.astype(np.int32) + b - c
    pa = np.abs(p - a)
    pb = np.abs(p - b)
    pc = np.abs(p - c)
    out = np.where((pa <= pb) & (pa <= pc), a, np.where(pb <= pc, b, c))
    return out.astype(np.uint8)


def _png_decode(raw: bytes):
    """Returns (samples, bit_depth) with samples (M, N) or (M, N, 3)."""
    if not raw.startswith(_PNG_SIG):
        raise FormatError("not a PNG stream")
    pos = len(_PNG_SIG)
    ihdr = None
    idat = bytearray()
    while pos + 8 <= len(raw):
        length, kind = struct.unpack(">I4s", raw[pos:pos + 8])
        data = raw[pos + 8:pos + 8 + length]
        if len(data) < length:
            raise FormatError("truncated PNG chunk")
        pos += 12 + length
        if kind == b"IHDR":
            ihdr = struct.unpack(">IIBBBBB", data)
        elif kind == b"IDAT":
            idat += data
        elif kind == b"IEND":
            break
    if ihdr is None or not idat:
        raise FormatError("PNG missing IHDR or IDAT")
    width, height, depth, color_type, comp, filt, interlace = ihdr
    if comp != 0 or filt != 0 or interlace != 0:
        raise FormatError("unsupported PNG compression/filter/interlace mode")
    if depth not in (8, 16) or color_type not in (0, 2):
        raise FormatError(f"unsupported PNG depth {depth} / color type {color_type} "
                         "(only 8/16-bit grayscale or RGB)")
    channels = 1 if color_type == 0 else 3
    bpp = channels * (depth // 8)
    stride = width * bpp
    try:
        decompressed = zlib.decompress(bytes(idat))
    except zlib.error as exc:
        raise FormatError(f"corrupt PNG stream: {exc}") from exc
    flat = np.frombuffer(decompressed, dtype=np.uint8)
    if flat.size != height * (stride + 1):
        raise FormatError("corrupt PNG pixel stream")
    flat = flat.reshape(height, stride + 1)
    out = np.zeros((height, stride), dtype=np.uint8)
    prior = np.zeros(stride, dtype=np.uint8)
    for r in range(height):
        ftype = flat[r, 0]
        line = flat[r, 1:].copy()
        if ftype == 0:
            pass
        elif ftype == 2:  # Up
            line = (line.astype(np.int32) + prior) % 256
        elif ftype in (1, 3, 4):  # Sub / Average / Paeth need left-to-right
            rec = np.zeros(stride, dtype=np.uint8)
            for i in range(stride):
                left = rec[i - bpp] if i >= bpp else np.uint8(0)
                up = prior[i]
                ul = prior[i - bpp] if i >= bpp else np.uint8(0)
                if ftype == 1:
                    pred = int(left)
                elif ftype == 3:
                    pred = (int(left) + int(up)) // 2
                else:
                    pred = int(_paeth(np.uint8(left), np.uint8(up), np.uint8(ul)))
                rec[i] = (int(line[i]) + pred) % 256
            line = rec
        else:
            raise FormatError(f"unknown PNG filter type {ftype}")
        out[r] = line
        prior = out[r]
    if depth == 16:
        samples = out.reshape(height, width, channels, 2)
        values = (samples[..., 0].astype(np.uint16) << 8) | samples[..., 1]
    else:
        values = out.reshape(height, width, channels).astype(np.uint16)
    return (values[:, :, 0] if channels == 1 else values), depth


# ---------------------------------------------------------------------------
# KITTI-style 16-bit flow PNG
# ---------------------------------------------------------------------------

def write_kitti_flow(path, flow: FlowField, mask: np.ndarray | None = None):
    """Store flow as 16-bit RGB: 64 * value + 2^15 in the first two
    channels, validity (1/0) in the third. Invalid pixels store zero flow."""
    data = np.asarray(flow.data if isinstance(flow, FlowField) else flow,
                      dtype=np.float64)
    height, width = data.shape[1:]
    if mask is None:
        mask = np.ones((height, width), dtype=bool)
    mask = np.asarray(mask, dtype=bool)
    stored = np.rint(64.0 * data + 2.0 ** 15)
    if stored.min() < 0 or stored.max() > 65535:
        raise ValueError("flow magnitude exceeds the 16-bit storable range")
    stored = stored.astype(np.uint16)
    stored[:, ~mask] = 2 ** 15
    rgb = np.zeros((height, width, 3), dtype=np.uint16)
    rgb[..., 0] = stored[0]
    rgb[..., 1] = stored[1]
    rgb[..., 2] = mask.astype(np.uint16)
    atomic_write_bytes(path, _png_encode(rgb, 16))


def read_kitti_flow(path) -> tuple[FlowField, np.ndarray]:
    with open(path, "rb") as fh:
        samples, depth = _png_decode(fh.read())
    if depth != 16 or samples.ndim != 3:
        raise FormatError(f"{path}: flow PNG must be 16-bit, 3-channel")
    mask = samples[..., 2] > 0
    u = (samples[..., 0].astype(np.float64) - 2.0 ** 15) / 64.0
    v = (samples[..., 1].astype(np.float64) - 2.0 ** 15) / 64.0
    u[~mask] = 0.0
    v[~mask] = 0.0
    return FlowField(np.stack([u, v])), mask


def read_flow_any(path) -> tuple[FlowField, np.ndarray | None]:
    """Dispatch on content: .flo files or 16-bit flow PNGs. Returns the
    field plus a validity mask when the format carries one."""
    with open(path, "rb") as fh:
        head = fh.read(8)
    if head.startswith(_PNG_SIG):
        return read_kitti_flow(path)
    return read_flo(path), None


# ---------------------------------------------------------------------------
# images
# ---------------------------------------------------------------------------

def read_image(path) -> Image:
    """Binary P6 PPM (8-bit) or 8/16-bit grayscale/RGB PNG, scaled to
    [0, 1] by the format's maximum code value."""
    with open(path, "rb") as fh:
        raw = fh.read()
    if raw.startswith(_PNG_SIG):
        samples, depth = _png_decode(raw)
        scale = float(2 ** depth - 1)
        if samples.ndim == 2:
            return Image(samples[None].astype(np.float64) / scale)
        return Image(np.moveaxis(samples, 2, 0).astype(np.float64) / scale)
    if raw.startswith(b"P6"):
        return _read_ppm(raw, path)
    raise FormatError(f"{path}: unsupported image format")


def _read_ppm(raw: bytes, path) -> Image:
    pos = 2
    fields = []
    while len(fields) < 3:
        while pos < len(raw) and raw[pos:pos + 1].isspace():
            pos += 1
        if raw[pos:pos + 1] == b"#":
            while pos < len(raw) and raw[pos] != 0x0A:
                pos += 1
            continue
        start = pos
        while pos < len(raw) and not raw[pos:pos + 1].isspace():
            pos += 1
        token = raw[start:pos]
        if not token.isdigit():
            raise FormatError(f"{path}: malformed PPM header")
        fields.append(int(token))
    pos += 1  # single whitespace after maxval
    width, height, maxval = fields
    if not (0 < maxval < 256):
        raise FormatError(f"{path}: only 8-bit P6 supported (maxval {maxval})")
    need = width * height * 3
    body = raw[pos:pos + need]
    if len(body) < need:
        raise FormatError(f"{path}: truncated PPM pixel data")
    pixels = np.frombuffer(body, dtype=np.uint8).reshape(height, width, 3)
    return Image(np.moveaxis(pixels, 2, 0).astype(np.float64) / maxval)


def write_image_png(path, image, bit_depth: int = 8):
    """Quantize an Image (or (C, M, N) array in [0, 1]) to a PNG."""
    data = image.data if isinstance(image, Image) else np.asarray(image,
                                                                  dtype=np.float64)
    if data.ndim != 3 or data.shape[0] not in (1, 3):
        raise ValueError("image must have 1 or 3 channels")
    top = 2 ** bit_depth - 1
    q = np.rint(np.clip(data, 0.0, 1.0) * top).astype(np.uint16)
    samples = q[0] if data.shape[0] == 1 else np.moveaxis(q, 0, 2)
    atomic_write_bytes(path, _png_encode(samples, bit_depth))


# ---------------------------------------------------------------------------
# visualization
# ---------------------------------------------------------------------------

def _make_color_wheel() -> np.ndarray:
    """The 55-bin wheel used across flow tooling: red-yellow-green-cyan-
    blue-magenta-red with uneven, perceptually tuned segment lengths."""
    ry, yg, gc, cb, bm, mr = 15, 6, 4, 11, 13, 6
    ncols = ry + yg + gc + cb + bm + mr
    wheel = np.zeros((ncols, 3))
    col = 0
    wheel[col:col + ry, 0] = 1.0
    wheel[col:col + ry, 1] = np.arange(ry) / ry
    col += ry
    wheel[col:col + yg, 0] = 1.0 - np.arange(yg) / yg
    wheel[col:col + yg, 1] = 1.0
    col += yg
    wheel[col:col + gc, 1] = 1.0
    wheel[col:col + gc, 2] = np.arange(gc) / gc
    col += gc
    wheel[col:col + cb, 1] = 1.0 - np.arange(cb) / cb
    wheel[col:col + cb, 2] = 1.0
    col += cb
    wheel[col:col + bm, 2] = 1.0
    wheel[col:col + bm, 0] = np.arange(bm) / bm
    col += bm
    wheel[col:col + mr, 2] = 1.0 - np.arange(mr) / mr
    wheel[col:col + mr, 0] = 1.0
    return wheel


_WHEEL = _make_color_wheel()


def flow_to_color(flow, max_magnitude: float | None = None) -> Image:
    """Standard flow color coding: hue encodes direction, distance from
    white encodes magnitude relative to `max_magnitude` (99th percentile
    when unset). Zero flow renders pure white."""
    data = flow.data if isinstance(flow, FlowField) else np.asarray(flow,
                                                                    dtype=np.float64)
    u, v = data[0], data[1]
    rad = np.sqrt(u * u + v * v)
    if max_magnitude is None:
        max_magnitude = float(np.percentile(rad, 99.0))
    sat = np.clip(rad / max(max_magnitude, 1e-12), 0.0, 1.0)
    ncols = _WHEEL.shape[0]
    angle = np.arctan2(-v, -u) / np.pi
    fk = (angle + 1.0) / 2.0 * (ncols - 1)
    k0 = np.floor(fk).astype(int) % ncols
    k1 = (k0 + 1) % ncols
    frac = fk - np.floor(fk)
    out = np.empty((3,) + u.shape)
    for ch in range(3):
        col = (1 - frac) * _WHEEL[k0, ch] + frac * _WHEEL[k1, ch]
        out[ch] = 1.0 - sat * (1.0 - col)
    return Image(out)


def write_perturbation(path, p: Perturbation):
    """Raw perturbation container (.npz): exact float64 fields plus mode."""
    arrays = {"mode": np.array(p.mode.value), "first": p.first}
    if p.second is not None:
        arrays["second"] = p.second
    with open(os.fspath(path) + ".tmp", "wb") as fh:
        np.savez(fh, **arrays)
    os.replace(os.fspath(path) + ".tmp", path)


def read_perturbation(path) -> Perturbation:
    with np.load(path) as bundle:
        mode = PerturbMode(str(bundle["mode"]))
        first = bundle["first"]
        second = bundle["second"] if "second" in bundle else None
    return Perturbation(mode, first, second)


def perturbation_to_image(p: Perturbation) -> list[Image]:
    """Min-max normalize each field to [0, 1] for display; a constant
    field renders mid-gray. Disjoint perturbations yield two images."""
    images = []
    fields = [p.first] if p.mode == PerturbMode.JOINT else [p.first, p.second]
    for d in fields:
        lo = float(d.min())
        hi = float(d.max())
        if hi - lo < 1e-300:
            images.append(Image(np.full_like(d, 0.5)))
        else:
            images.append(Image((d - lo) / (hi - lo)))
    return images
