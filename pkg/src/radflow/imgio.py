"""Self-contained PNG (8-bit RGB) and PFM (float32) readers/writers.

Both writers are fully deterministic (fixed zlib settings, no ancillary
chunks, no timestamps), which is what makes rendered artifacts bit-stable
across reruns. The PNG reader only supports what the writer emits:
8-bit RGB, non-interlaced.
"""

from __future__ import annotations

import struct
import zlib
from pathlib import Path

import numpy as np


class ImageIOError(Exception):
    pass


# -- PNG -----------------------------------------------------------------------


def _png_chunk(tag: bytes, payload: bytes) -> bytes:
    return (
        struct.pack(">I", len(payload))
        + tag
        + payload
        + struct.pack(">I", zlib.crc32(tag + payload) & 0xFFFFFFFF)
    )


def write_png(path: str | Path, rgb: np.ndarray) -> None:
    """Write an (H, W, 3) uint8 or float-in-[0,1] array as RGB PNG."""
    rgb = np.asarray(rgb)
    if rgb.ndim != 3 or rgb.shape[2] != 3:
        raise ImageIOError(f"expected (H, W, 3) image, got {rgb.shape}")
    if rgb.dtype != np.uint8:
        rgb = quantize_u8(rgb)
    h, w, _ = rgb.shape
    header = struct.pack(">IIBBBBB", w, h, 8, 2, 0, 0, 0)  # 8-bit, color type 2
    raw = b"".join(b"\x00" + rgb[i].tobytes() for i in range(h))  # filter 0 rows
    payload = zlib.compress(raw, 6)
    data = (
        b"\x89PNG\r\n\x1a\n"
        + _png_chunk(b"IHDR", header)
        + _png_chunk(b"IDAT", payload)
        + _png_chunk(b"IEND", b"")
    )
    Path(path).write_bytes(data)


def read_png(path: str | Path) -> np.ndarray:
    """Read an 8-bit RGB PNG written by `write_png` (filters 0-4 supported)."""
    buf = Path(path).read_bytes()
    if buf[:8] != b"\x89PNG\r\n\x1a\n":
        raise ImageIOError(f"{path}: not a PNG file")
    off = 8
    width = height = None
    idat = b""
    while off < len(buf):
        (length,) = struct.unpack_from(">I", buf, off)
        tag = buf[off + 4 : off + 8]
        payload = buf[off + 8 : off + 8 + length]
        off += 12 + length
        if tag == b"IHDR":
            width, height, depth, ctype, _, _, interlace = struct.unpack(">IIBBBBB", payload)
            if depth != 8 or ctype != 2 or interlace != 0:
                raise ImageIOError(f"{path}: unsupported PNG variant (need 8-bit RGB)")
        elif tag == b"IDAT":
            idat += payload
        elif tag == b"IEND":
            break
    if width is None:
        raise ImageIOError(f"{path}: missing IHDR")
    raw = zlib.decompress(idat)
    stride = width * 3
    if len(raw) != height * (stride + 1):
        raise ImageIOError(f"{path}: truncated PNG data")
    out = np.empty((height, stride), dtype=np.uint8)
    prev = np.zeros(stride, dtype=np.uint8)
    pos = 0
    for y in range(height):
        filt = raw[pos]
        row = np.frombuffer(raw, dtype=np.uint8, count=stride, offset=pos + 1).copy()
        pos += stride + 1
        if filt == 0:
            pass
        elif filt == 2:  # up
            row += prev
        elif filt in (1, 3, 4):  # sub / average / paeth need sequential passes
            rec = row.astype(np.int32)
            pr = prev.astype(np.int32)
            for i in range(stride):
                left = rec[i - 3] if i >= 3 else 0
                up = pr[i]
                ul = pr[i - 3] if i >= 3 else 0
                if filt == 1:
                    rec[i] = (rec[i] + left) & 0xFF
                elif filt == 3:
                    rec[i] = (rec[i] + (left + up) // 2) & 0xFF
                else:
                    p = left + up - ul
                    pa, pb, pc = abs(p - left), abs(p - up), abs(p - ul)
                    pred = left if pa <= pb and pa <= pc else (up if pb <= pc else ul)
                    rec[i] = (rec[i] + pred) & 0xFF
            row = rec.astype(np.uint8)
        else:
            raise ImageIOError(f"{path}: unknown PNG filter {filt}")
        out[y] = row
        prev = out[y]
    return out.reshape(height, width, 3)


def quantize_u8(img: np.ndarray) -> np.ndarray:
    """[0,1] floats -> uint8 by round-half-away, the dataset quantization."""
    return np.clip(np.rint(np.asarray(img) * 255.0), 0, 255).astype(np.uint8)


def u8_to_float(img: np.ndarray) -> np.ndarray:
    return np.asarray(img, dtype=np.float64) / 255.0


# -- PFM -----------------------------------------------------------------------


def write_pfm(path: str | Path, data: np.ndarray) -> None:
    """Write a (H, W) float array as grayscale PFM, little-endian, bottom-up."""
    data = np.asarray(data, dtype=np.float32)
    if data.ndim != 2:
        raise ImageIOError(f"expected (H, W) array, got {data.shape}")
    h, w = data.shape
    header = f"Pf\n{w} {h}\n-1.0\n".encode("ascii")
    Path(path).write_bytes(header + data[::-1].astype("<f4").tobytes())


def read_pfm(path: str | Path) -> np.ndarray:
    buf = Path(path).read_bytes()
    parts = buf.split(b"\n", 3)
    if len(parts) < 4 or parts[0] not in (b"Pf", b"PF"):
        raise ImageIOError(f"{path}: not a PFM file")
    if parts[0] == b"PF":
        raise ImageIOError(f"{path}: color PFM unsupported (expected grayscale)")
    try:
        w, h = (int(v) for v in parts[1].split())
        scale = float(parts[2])
    except ValueError as e:
        raise ImageIOError(f"{path}: malformed PFM header") from e
    dtype = "<f4" if scale < 0 else ">f4"
    expected = w * h * 4
    if len(parts[3]) < expected:
        raise ImageIOError(f"{path}: truncated PFM payload")
    data = np.frombuffer(parts[3][:expected], dtype=dtype).reshape(h, w)
    return data[::-1].astype(np.float64)


# -- heat maps -------------------------------------------------------------------

# coarse viridis-style anchors, linearly interpolated to 256 entries
_VIRIDIS_ANCHORS = np.array(
    [
        (0.267004, 0.004874, 0.329415),
        (0.282623, 0.140926, 0.457517),
        (0.253935, 0.265254, 0.529983),
        (0.206756, 0.371758, 0.553117),
        (0.163625, 0.471133, 0.558148),
        (0.127568, 0.566949, 0.550556),
        (0.134692, 0.658636, 0.517649),
        (0.266941, 0.748751, 0.440573),
        (0.477504, 0.821444, 0.318195),
        (0.741388, 0.873449, 0.149561),
        (0.993248, 0.906157, 0.143936),
    ]
)


def colormap(values: np.ndarray, vmin: float | None = None, vmax: float | None = None):
    """Map scalars to viridis-style RGB floats; returns (rgb, vmin, vmax)."""
    values = np.asarray(values, dtype=np.float64)
    vmin = float(values.min()) if vmin is None else vmin
    vmax = float(values.max()) if vmax is None else vmax
    span = vmax - vmin
    t = np.zeros_like(values) if span == 0 else np.clip((values - vmin) / span, 0.0, 1.0)
    pos = t * (len(_VIRIDIS_ANCHORS) - 1)
    i0 = np.floor(pos).astype(int)
    i1 = np.minimum(i0 + 1, len(_VIRIDIS_ANCHORS) - 1)
    frac = (pos - i0)[..., None]
    rgb = _VIRIDIS_ANCHORS[i0] * (1 - frac) + _VIRIDIS_ANCHORS[i1] * frac
    return rgb, vmin, vmax


def write_heatmap(path: str | Path, values: np.ndarray) -> tuple[float, float]:
    """Write a scalar map as a viridis PNG; returns the (vmin, vmax) used."""
    rgb, vmin, vmax = colormap(values)
    write_png(path, rgb)
    return vmin, vmax
