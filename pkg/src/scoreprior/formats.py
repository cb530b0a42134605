"""On-disk formats: SPARR1 arrays, PGM images, key=value configs, measurement files."""

from __future__ import annotations

import struct
from pathlib import Path

import numpy as np

from scoreprior.errors import ConfigError
from scoreprior.inverse import (
    LinearForwardModel,
    denoise_model,
    lowfreq_dft_model,
    sparsefreq_model,
)

ARRAY_MAGIC = b"SPARR1"
MEAS_MAGIC = b"SPMEAS1\n"


def write_array(path, arr) -> None:
    """``SPARR1 | u8 rank | u64 dims... | f64 payload`` (little-endian, C order)."""
    a = np.asarray(arr, dtype="<f8", order="C")
    with open(path, "wb") as fh:
        fh.write(_array_bytes(a))


def _array_bytes(a) -> bytes:
    head = ARRAY_MAGIC + struct.pack("<B", a.ndim) + struct.pack(f"<{a.ndim}Q", *a.shape)
    return head + a.tobytes()


def _parse_array(blob: bytes, off: int = 0, name="array"):
    if blob[off : off + 6] != ARRAY_MAGIC:
        raise ValueError(f"{name}: not an SPARR1 array")
    off += 6
    (rank,) = struct.unpack_from("<B", blob, off)
    off += 1
    dims = struct.unpack_from(f"<{rank}Q", blob, off)
    off += 8 * rank
    count = int(np.prod(dims, dtype=np.int64)) if rank else 1
    if len(blob) < off + 8 * count:
        raise ValueError(f"{name}: truncated payload")
    return np.frombuffer(blob, "<f8", count, off).reshape(dims).copy()


def read_array(path) -> np.ndarray:
    return _parse_array(Path(path).read_bytes(), name=str(path))


def write_pgm(path, img) -> None:
    """Binary 8-bit PGM; values in [0, 1] map linearly to [0, 255], clamped."""
    a = np.asarray(img, dtype=np.float64)
    if a.ndim != 2:
        raise ConfigError("PGM needs a 2D image")
    px = np.clip(np.rint(a * 255.0), 0, 255).astype(np.uint8)
    with open(path, "wb") as fh:
        fh.write(f"P5\n{a.shape[1]} {a.shape[0]}\n255\n".encode())
        fh.write(px.tobytes())


def read_pgm(path) -> np.ndarray:
    blob = Path(path).read_bytes()
    tokens, off = [], 0
    while len(tokens) < 4:
        while blob[off : off + 1].isspace():
            off += 1
        if blob[off : off + 1] == b"#":
            off = blob.index(b"\n", off) + 1
            continue
        end = off
        while not blob[end : end + 1].isspace():
            end += 1
        tokens.append(blob[off:end])
        off = end
    if tokens[0] != b"P5":
        raise ValueError(f"{path}: not a binary PGM")
    w, h, maxval = (int(t) for t in tokens[1:])
    off += 1
    px = np.frombuffer(blob, np.uint8, w * h, off).reshape(h, w)
    return px.astype(np.float64) / maxval


def read_config(path) -> dict:
    """Flat ``key = value`` file; ``#`` starts a comment."""
    out = {}
    for lineno, raw in enumerate(Path(path).read_text().splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{path}:{lineno}: expected key=value")
        k, v = line.split("=", 1)
        out[k.strip()] = v.strip()
    return out


def _freqs_text(freqs) -> str:
    return ";".join(f"{k}:{l}" for k, l in freqs)


def _parse_freqs(text: str):
    return [tuple(int(p) for p in item.split(":")) for item in text.split(";") if item]


def write_measurement(path, model: LinearForwardModel, seed: int | None = None) -> None:
    """Text header of key=value lines ending in ``end``, then the y array."""
    if model.y is None:
        raise ConfigError("model has no measurement to write")
    meta = dict(model.meta)
    header = {"forward": model.kind, "noise_sigma": repr(float(model.noise_sigma))}
    for key in ("dim", "side", "fraction", "sigma", "convention"):
        if key in meta:
            header[key] = str(meta[key])
    if "freqs" in meta:
        header["freqs"] = _freqs_text(meta["freqs"])
    if seed is not None:
        header["seed"] = str(seed)
    text = "".join(f"{k}={v}\n" for k, v in header.items()) + "end\n"
    with open(path, "wb") as fh:
        fh.write(MEAS_MAGIC + text.encode())
        fh.write(_array_bytes(np.ascontiguousarray(model.y, dtype="<f8")))


def read_measurement(path) -> tuple[LinearForwardModel, dict]:
    """Rebuild the forward model from the header and attach y."""
    blob = Path(path).read_bytes()
    if not blob.startswith(MEAS_MAGIC):
        raise ValueError(f"{path}: not a measurement file")
    end = blob.index(b"end\n", len(MEAS_MAGIC))
    header = {}
    for line in blob[len(MEAS_MAGIC) : end].decode().splitlines():
        k, v = line.split("=", 1)
        header[k] = v
    y = _parse_array(blob, end + 4, str(path))
    kind = header["forward"]
    if kind == "denoise":
        model = denoise_model(int(header["dim"]), float(header["sigma"]))
    elif kind == "lowfreq":
        model = lowfreq_dft_model(
            int(header["side"]), float(header["fraction"]), float(header["sigma"]), header["convention"]
        )
    elif kind == "sparsefreq":
        model = sparsefreq_model(
            int(header["side"]), _parse_freqs(header["freqs"]), float(header["sigma"]), header["convention"]
        )
    else:
        raise ValueError(f"{path}: unknown forward model {kind!r}")
    return model.with_measurement(y), header
