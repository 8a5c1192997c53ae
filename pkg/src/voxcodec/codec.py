"""Bitstream container and component coders.

Byte layout (all little-endian) is documented in ``docs/bitstream.md``.
"""

from __future__ import annotations

import lzma
import struct
from dataclasses import dataclass, field

import numpy as np

from . import _kernels as K
from .entropy import (
    SYMBOL_MAX, SYMBOL_MIN, ImplicitEntropyModel, grid_to_volumes, volumes_to_grid,
)
from .field import FeatureGrid, FieldFrame, OccupancyGrid
from .rangecoder import UNIFORM16, RangeCoderError, range_decode, range_encode
from .render import RenderMLP

FRAME_MAGIC = b"VXF1"
SEQ_MAGIC = b"VXCS"
VERSION = 1
FILE_EXTENSION = ".vxc"

FLAG_INHERIT_MLP = 1


class CodecError(ValueError):
    """Undecodable or inconsistent bitstream."""


_ERRORS = {
    K.ERR_ALPHABET: "integer outside the coding alphabet",
    K.ERR_DIVERGED: "entropy model produced non-finite parameters",
    K.ERR_TRUNCATED: "truncated grid payload",
    K.ERR_CORRUPT: "corrupt grid payload",
}


def _weights(model: ImplicitEntropyModel):
    return [np.ascontiguousarray(t, dtype=np.float64) for t in model.tensors()]


def _prev_arg(prev, shape):
    if prev is None:
        return np.zeros((1, 1, 1, 1), dtype=np.int64), False
    prev = np.ascontiguousarray(prev, dtype=np.int64)
    if prev.shape != tuple(shape):
        raise CodecError(f"previous tensor shape {prev.shape} != {tuple(shape)}")
    return prev, True


# ---------------------------------------------------------------- grids


def encode_grid(volumes, model: ImplicitEntropyModel, prev=None) -> bytes:
    """Range-code an integer tensor ``(C, Z, Y, X)`` voxel by voxel in raster order."""
    vols = np.ascontiguousarray(volumes, dtype=np.int64)
    if vols.ndim != 4:
        raise CodecError("expected a (C, Z, Y, X) integer tensor")
    if vols.size and (vols.min() < SYMBOL_MIN or vols.max() > SYMBOL_MAX):
        raise CodecError(_ERRORS[K.ERR_ALPHABET])
    prev_arr, has_prev = _prev_arg(prev, vols.shape)
    out, status = K.encode_volumes(vols, prev_arr, has_prev, *_weights(model))
    if status != K.OK:
        raise CodecError(_ERRORS[status])
    return out.tobytes()


def decode_grid(data: bytes, shape, model: ImplicitEntropyModel, prev=None) -> np.ndarray:
    prev_arr, has_prev = _prev_arg(prev, shape)
    buf = np.frombuffer(data, dtype=np.uint8)
    vols, status = K.decode_volumes(buf, np.asarray(shape, dtype=np.int64), prev_arr, has_prev,
                                    *_weights(model))
    if status != K.OK:
        raise CodecError(_ERRORS[status])
    return vols


def grid_params(volumes, model: ImplicitEntropyModel, prev=None):
    """Discretised Laplace parameters the coder uses for every voxel."""
    vols = np.ascontiguousarray(volumes, dtype=np.int64)
    prev_arr, has_prev = _prev_arg(prev, vols.shape)
    mu, b, ok = K.volume_params(vols, prev_arr, has_prev, *_weights(model))
    if not ok:
        raise CodecError(_ERRORS[K.ERR_DIVERGED])
    return mu, b


def estimate_grid_bits(volumes, model: ImplicitEntropyModel, prev=None) -> float:
    """Ideal code length in bits with hard integers and discretised parameters."""
    from .entropy import LaplaceParams, rate_bits
    mu, b = grid_params(volumes, model, prev)
    return float(rate_bits(np.asarray(volumes, dtype=np.float64).ravel(), LaplaceParams(mu, b)).sum())


# ---------------------------------------------------------------- occupancy


def encode_occupancy(occ: OccupancyGrid) -> bytes:
    """Dims, then the bit-packed cells compressed with LZMA."""
    return struct.pack("<3H", *occ.dims) + lzma.compress(occ.pack(), format=lzma.FORMAT_ALONE)


def decode_occupancy(data: bytes, aabb) -> OccupancyGrid:
    if len(data) < 6:
        raise CodecError("occupancy section too short")
    dims = struct.unpack_from("<3H", data)
    try:
        packed = lzma.decompress(data[6:], format=lzma.FORMAT_ALONE)
        return OccupancyGrid.unpack(packed, dims, aabb)
    except (lzma.LZMAError, ValueError, EOFError) as exc:
        raise CodecError(f"bad occupancy section: {exc}") from exc


# ---------------------------------------------------------------- MLP parameters


def quantize_tensor(w):
    """Symmetric 16-bit quantisation; returns ``(ints, scale)`` with a float32 scale."""
    w = np.asarray(w, dtype=np.float64)
    peak = float(np.max(np.abs(w))) if w.size else 0.0
    scale = float(np.float32(peak / 32767.0)) if peak > 0 else 1.0
    x = w / scale
    ints = np.sign(x) * np.floor(np.abs(x) + 0.5)
    return np.clip(ints, -32767, 32767).astype(np.int64), scale


def encode_params(tensors) -> bytes:
    """Quantise each tensor to int16 and range-code the integers with a flat table."""
    head = [struct.pack("<B", len(tensors))]
    symbols = []
    for t in tensors:
        t = np.asarray(t)
        if not np.all(np.isfinite(t)):
            raise CodecError("cannot code non-finite parameters")
        ints, scale = quantize_tensor(t)
        head.append(struct.pack(f"<B{t.ndim}Hf", t.ndim, *t.shape, scale))
        symbols.extend(ints.ravel().tolist())
    return b"".join(head) + range_encode(symbols, UNIFORM16)


def decode_params(data: bytes) -> list[np.ndarray]:
    try:
        (n,) = struct.unpack_from("<B", data)
        pos = 1
        specs = []
        for _ in range(n):
            (ndim,) = struct.unpack_from("<B", data, pos)
            *shape, scale = struct.unpack_from(f"<{ndim}Hf", data, pos + 1)
            pos += 1 + 2 * ndim + 4
            specs.append((tuple(shape), float(scale)))
        count = sum(int(np.prod(s)) for s, _ in specs)
        ints = np.array(range_decode(data[pos:], UNIFORM16, count), dtype=np.float64)
    except (struct.error, RangeCoderError) as exc:
        raise CodecError(f"bad parameter section: {exc}") from exc
    out, at = [], 0
    for shape, scale in specs:
        size = int(np.prod(shape))
        out.append(ints[at:at + size].reshape(shape) * scale)
        at += size
    return out


def roundtrip_params(tensors) -> list[np.ndarray]:
    """What a decoder will see for these parameters."""
    return decode_params(encode_params(tensors))


# ---------------------------------------------------------------- frames


@dataclass
class FrameHeader:
    frame_index: int
    frame_type: str
    group_id: int
    aabb: np.ndarray
    grid_dims: list[tuple[int, int, int]]
    channels: list[int]
    qsteps: list[float]
    occupancy_len: int = 0
    mlp_len: int = 0
    entropy_len: int = 0
    grid_lens: list[int] = field(default_factory=list)
    inherit_mlp: bool = False

    _FIXED = "<4sBBBBII6fH"

    @property
    def n_grids(self) -> int:
        return len(self.grid_dims)

    @property
    def header_len(self) -> int:
        return struct.calcsize(self._FIXED) + self.n_grids * 12 + 12 + 4 * self.n_grids

    @property
    def frame_len(self) -> int:
        return self.header_len + self.occupancy_len + self.mlp_len + self.entropy_len + sum(self.grid_lens)

    def pack(self) -> bytes:
        flags = FLAG_INHERIT_MLP if self.inherit_mlp else 0
        out = [struct.pack(self._FIXED, FRAME_MAGIC, VERSION, 0 if self.frame_type == "I" else 1,
                           flags, self.n_grids, self.frame_index, self.group_id,
                           *np.asarray(self.aabb, dtype=np.float64).ravel(), self.header_len)]
        for dims, ch, q in zip(self.grid_dims, self.channels, self.qsteps):
            out.append(struct.pack("<4Hf", *dims, ch, q))
        out.append(struct.pack("<3I", self.occupancy_len, self.mlp_len, self.entropy_len))
        out.append(struct.pack(f"<{self.n_grids}I", *self.grid_lens))
        return b"".join(out)

    @classmethod
    def unpack(cls, data: bytes, offset: int = 0) -> "FrameHeader":
        try:
            magic, version, ftype, flags, n_grids, index, group, *rest = struct.unpack_from(cls._FIXED, data, offset)
        except struct.error as exc:
            raise CodecError("truncated frame header") from exc
        if magic != FRAME_MAGIC:
            raise CodecError(f"bad frame magic {magic!r}")
        if version != VERSION:
            raise CodecError(f"unsupported frame version {version}")
        if ftype not in (0, 1):
            raise CodecError(f"bad frame type {ftype}")
        aabb, header_len = np.array(rest[:6], dtype=np.float64).reshape(2, 3), rest[6]
        pos = offset + struct.calcsize(cls._FIXED)
        try:
            dims, chans, qs = [], [], []
            for _ in range(n_grids):
                nx, ny, nz, ch, q = struct.unpack_from("<4Hf", data, pos)
                dims.append((nx, ny, nz))
                chans.append(ch)
                qs.append(q)
                pos += 12
            occ_len, mlp_len, ent_len = struct.unpack_from("<3I", data, pos)
            grid_lens = list(struct.unpack_from(f"<{n_grids}I", data, pos + 12))
        except struct.error as exc:
            raise CodecError("truncated frame header") from exc
        hdr = cls(index, "I" if ftype == 0 else "P", group, aabb, dims, chans, qs,
                  occ_len, mlp_len, ent_len, grid_lens, bool(flags & FLAG_INHERIT_MLP))
        if hdr.header_len != header_len:
            raise CodecError("frame header length mismatch")
        if hdr.frame_type == "P" and not hdr.inherit_mlp:
            raise CodecError("P-frame must inherit the group's rendering MLP")
        return hdr


@dataclass
class CodedFrame:
    """Everything the encoder serialises for one frame (already decoder-exact)."""

    frame_index: int
    frame_type: str
    group_id: int
    aabb: np.ndarray
    qsteps: np.ndarray
    volumes: list[np.ndarray]
    occupancy: OccupancyGrid
    entropy_model: ImplicitEntropyModel
    render_mlp: RenderMLP | None = None


@dataclass
class DecodedFrame:
    header: FrameHeader
    frame: FieldFrame          # absolute reconstruction
    volumes: list[np.ndarray]  # coded integers
    occupancy: OccupancyGrid
    render_mlp: RenderMLP
    entropy_model: ImplicitEntropyModel

    @property
    def section_bytes(self) -> dict:
        h = self.header
        return {"header": h.header_len, "occupancy": h.occupancy_len, "mlp": h.mlp_len,
                "entropy": h.entropy_len, "grids": sum(h.grid_lens), "total": h.frame_len}


@dataclass
class DecodeBuffer:
    """Previous frame's decoder-exact reconstruction plus the group's MLP."""

    recon: list[np.ndarray] | None = None
    volumes: list[np.ndarray] | None = None
    render_mlp: RenderMLP | None = None
    group_id: int = -1
    frame_index: int = -1

    @property
    def empty(self) -> bool:
        return self.recon is None

    def push(self, decoded: DecodedFrame):
        self.recon = [g.values for g in decoded.frame.grids]
        self.volumes = decoded.volumes
        self.render_mlp = decoded.render_mlp
        self.group_id = decoded.header.group_id
        self.frame_index = decoded.header.frame_index


def reconstruct(volumes, qsteps, prev_recon=None) -> list[np.ndarray]:
    """Dequantise coded integers; P-frames add the previous reconstruction."""
    out = []
    for n, (vols, q) in enumerate(zip(volumes, qsteps)):
        deq = volumes_to_grid(vols).astype(np.float64) * float(q)
        out.append(deq if prev_recon is None else prev_recon[n] + deq)
    return out


def encode_frame(frame: CodedFrame, buffer: DecodeBuffer | None = None) -> bytes:
    """Header, occupancy, rendering MLP (I only), entropy model, then grids."""
    prev = None
    if frame.frame_type == "P":
        if buffer is None or buffer.empty:
            raise CodecError("P-frame needs the previous frame in the decode buffer")
        prev = buffer.volumes
    elif frame.render_mlp is None:
        raise CodecError("I-frame needs a rendering MLP")
    occ = encode_occupancy(frame.occupancy)
    mlp = encode_params(frame.render_mlp.tensors()) if frame.frame_type == "I" else b""
    ent = encode_params(frame.entropy_model.tensors())
    grids = [encode_grid(v, frame.entropy_model, None if prev is None else prev[n])
             for n, v in enumerate(frame.volumes)]
    hdr = FrameHeader(
        frame.frame_index, frame.frame_type, frame.group_id, frame.aabb,
        [tuple(int(d) for d in v.shape[:0:-1]) for v in frame.volumes],
        [int(v.shape[0]) for v in frame.volumes],
        [float(np.float32(q)) for q in frame.qsteps],
        len(occ), len(mlp), len(ent), [len(g) for g in grids],
        inherit_mlp=frame.frame_type == "P",
    )
    return hdr.pack() + occ + mlp + ent + b"".join(grids)


def decode_frame(data: bytes, buffer: DecodeBuffer | None = None, offset: int = 0) -> DecodedFrame:
    """Decode one frame starting at ``offset``; nothing is returned on any error."""
    hdr = FrameHeader.unpack(data, offset)
    if offset + hdr.frame_len > len(data):
        raise CodecError(f"frame {hdr.frame_index} truncated: need {hdr.frame_len} bytes, "
                         f"have {len(data) - offset}")
    if hdr.frame_type == "P" and (buffer is None or buffer.empty):
        raise CodecError("P-frame cannot be decoded without the previous frame")
    pos = offset + hdr.header_len

    def take(n):
        nonlocal pos
        chunk = data[pos:pos + n]
        pos += n
        return chunk

    occ = decode_occupancy(take(hdr.occupancy_len), hdr.aabb)
    if hdr.frame_type == "I":
        if hdr.mlp_len == 0:
            raise CodecError("I-frame without rendering MLP")
        mlp = RenderMLP.from_tensors(decode_params(take(hdr.mlp_len)))
    else:
        take(hdr.mlp_len)
        mlp = buffer.render_mlp
    model = ImplicitEntropyModel.from_tensors(decode_params(take(hdr.entropy_len)))
    prev = buffer.volumes if hdr.frame_type == "P" else None
    volumes = []
    for n, (dims, ch, glen) in enumerate(zip(hdr.grid_dims, hdr.channels, hdr.grid_lens)):
        shape = (ch, dims[2], dims[1], dims[0])
        volumes.append(decode_grid(take(glen), shape, model, None if prev is None else prev[n]))
    recon = reconstruct(volumes, hdr.qsteps, None if prev is None else buffer.recon)
    grids = [FeatureGrid(v, hdr.aabb) for v in recon]
    frame = FieldFrame(grids[0], grids[1:], np.array(hdr.qsteps), hdr.frame_type, hdr.frame_index)
    return DecodedFrame(hdr, frame, volumes, occ, mlp, model)


# ---------------------------------------------------------------- sequence container


@dataclass
class SequenceHeader:
    n_frames: int
    group_size: int
    render_step: float
    background: tuple[float, float, float]

    _FMT = "<4sBBIIf3f"

    def pack(self) -> bytes:
        return struct.pack(self._FMT, SEQ_MAGIC, VERSION, 0, self.n_frames, self.group_size,
                           self.render_step, *self.background)

    @classmethod
    def unpack(cls, data: bytes) -> "SequenceHeader":
        try:
            magic, version, _, n, g, step, *bg = struct.unpack_from(cls._FMT, data)
        except struct.error as exc:
            raise CodecError("truncated sequence header") from exc
        if magic != SEQ_MAGIC:
            raise CodecError(f"bad sequence magic {magic!r}")
        if version != VERSION:
            raise CodecError(f"unsupported sequence version {version}")
        return cls(n, g, step, tuple(bg))

    @classmethod
    def size(cls) -> int:
        return struct.calcsize(cls._FMT)


def write_sequence(header: SequenceHeader, frames: list[bytes]) -> bytes:
    if len(frames) != header.n_frames:
        raise ValueError("frame count does not match header")
    return header.pack() + b"".join(frames)


def iter_frames(data: bytes):
    """Yield ``(header, DecodedFrame)`` for every frame of a sequence stream."""
    seq = SequenceHeader.unpack(data)
    pos = SequenceHeader.size()
    buffer = DecodeBuffer()
    for _ in range(seq.n_frames):
        decoded = decode_frame(data, buffer, pos)
        pos += decoded.header.frame_len
        buffer.push(decoded)
        yield seq, decoded
    if pos != len(data):
        raise CodecError(f"{len(data) - pos} trailing bytes after last frame")


def decode_sequence(data: bytes):
    frames = [f for _, f in iter_frames(data)]
    return SequenceHeader.unpack(data), frames


def frame_volumes(frame: FieldFrame) -> list[np.ndarray]:
    return [grid_to_volumes(g.values) for g in frame.grids]
