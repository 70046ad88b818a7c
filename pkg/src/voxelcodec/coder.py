"""Range coder, probability quantization and the "VCNB" bitstream container.

The entropy coder is a 32-bit byte-oriented range coder with carry counting;
the range register stays in [2^24, 2^32), keeping the truncation loss under
0.006 bits per symbol. Probabilities are quantized to 16-bit frequencies on
both sides from identical model outputs, so model determinism alone keeps
encoder and decoder in sync; no tables travel in the stream.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass

import numpy as np

from . import entropy as em
from . import octree as oct
from .nn import fnv1a64
from .pointcloud import NormalizationParams, PointCloud, normalize

MAGIC = b"VCNB"
VERSION = 1
MODE_STATIC = 0
MODE_DYNAMIC = 1
FLAG_POSES = 1

TOTAL_FREQ = 1 << 16
_MASK32 = 0xFFFFFFFF
_RC_TOP = 1 << 24


class DecodeError(ValueError):
    pass


# ---------------------------------------------------------------------------
# probability -> 16-bit frequency table


@dataclass
class FrequencyTable:
    freq: np.ndarray   # (255,) int64, every entry >= 1, sums to 65536
    cum: np.ndarray    # (256,) int64 prefix sums, cum[0] = 0

    @property
    def total(self):
        return TOTAL_FREQ


def quantize_distribution(p) -> FrequencyTable:
    """Largest-remainder apportionment of 65536 units with a floor of 1.

    Ties break toward the lower symbol index; the floor deficit is taken from
    the largest entries. Re-quantizing freq/65536 reproduces freq exactly.
    """
    freq = _quantize_rows(np.asarray(p, dtype=np.float64)[None, :])[0]
    cum = np.zeros(em.ALPHABET + 1, dtype=np.int64)
    np.cumsum(freq, out=cum[1:])
    return FrequencyTable(freq, cum)


def _quantize_rows(p: np.ndarray) -> np.ndarray:
    """Vectorized quantizer: (n, 255) probabilities -> (n, 255) integer frequencies."""
    p = p / p.sum(axis=1, keepdims=True)
    scaled = p * float(TOTAL_FREQ)
    base = np.floor(scaled).astype(np.int64)
    rem = scaled - base
    leftover = TOTAL_FREQ - base.sum(axis=1)
    order = np.argsort(-rem, axis=1, kind="stable")
    add = np.arange(p.shape[1])[None, :] < leftover[:, None]
    bump = np.zeros_like(base)
    np.put_along_axis(bump, order, add.astype(np.int64), axis=1)
    base += bump
    # raise zeros to 1, taking the excess from the largest entries
    deficits = (base == 0).sum(axis=1)
    for r in np.nonzero(deficits)[0]:
        row = base[r]
        row[row == 0] = 1
        need = int(deficits[r])
        while need > 0:
            i = int(np.argmax(row))
            take = min(need, int(row[i]) - 1)
            row[i] -= take
            need -= take
    return base


def quantize_level(probs: np.ndarray):
    """Batch tables for one depth level -> (freq (n,255), cum (n,256))."""
    freq = _quantize_rows(probs)
    cum = np.zeros((freq.shape[0], em.ALPHABET + 1), dtype=np.int64)
    np.cumsum(freq, axis=1, out=cum[:, 1:])
    return freq, cum


# ---------------------------------------------------------------------------
# range coder


class RangeEncoder:
    def __init__(self):
        self._low = 0
        self._range = _MASK32
        self._cache = 0
        self._pending = 1
        self._out = bytearray()

    def _shift_low(self):
        if self._low < 0xFF000000 or self._low > _MASK32:
            carry = self._low >> 32
            self._out.append((self._cache + carry) & 0xFF)
            for _ in range(self._pending - 1):
                self._out.append((0xFF + carry) & 0xFF)
            self._pending = 0
            self._cache = (self._low >> 24) & 0xFF
        self._pending += 1
        self._low = (self._low << 8) & _MASK32

    def encode(self, cum: int, freq: int, total: int = TOTAL_FREQ):
        r = self._range // total
        self._low += r * cum
        self._range = r * freq
        while self._range < _RC_TOP:
            self._range = (self._range << 8) & _MASK32
            self._shift_low()

    def finish(self) -> bytes:
        for _ in range(5):
            self._shift_low()
        return bytes(self._out)


class RangeDecoder:
    def __init__(self, data: bytes):
        self._data = data
        self._pos = 0
        self._range = _MASK32
        self._code = 0
        self._byte()          # leading cache byte, always zero
        for _ in range(4):
            self._code = ((self._code << 8) | self._byte()) & _MASK32
        self._r = 0

    def _byte(self) -> int:
        if self._pos >= len(self._data):
            raise DecodeError("range-coded payload exhausted")
        b = self._data[self._pos]
        self._pos += 1
        return b

    def decode_target(self, total: int = TOTAL_FREQ) -> int:
        self._r = self._range // total
        return min(self._code // self._r, total - 1)

    def consume(self, cum: int, freq: int):
        self._code -= self._r * cum
        self._range = self._r * freq
        while self._range < _RC_TOP:
            self._code = ((self._code << 8) | self._byte()) & _MASK32
            self._range = (self._range << 8) & _MASK32


def rc_encode(symbols, table_for, on_symbol=None) -> bytes:
    """Encode integer symbols 1..255; table_for(i) supplies the i-th FrequencyTable.

    The supplier must be reproducible on the decoder from previously decoded
    symbols alone. on_symbol(i, s) fires after each symbol (adaptive updates).
    """
    enc = RangeEncoder()
    for i, s in enumerate(symbols):
        table = table_for(i)
        idx = int(s) - 1
        enc.encode(int(table.cum[idx]), int(table.freq[idx]))
        if on_symbol is not None:
            on_symbol(i, int(s))
    return enc.finish()


def rc_decode(data: bytes, count: int, table_for, on_symbol=None) -> list:
    dec = RangeDecoder(data)
    out = []
    for i in range(count):
        table = table_for(i)
        target = dec.decode_target()
        idx = int(np.searchsorted(table.cum, target, side="right")) - 1
        dec.consume(int(table.cum[idx]), int(table.freq[idx]))
        s = idx + 1
        out.append(s)
        if on_symbol is not None:
            on_symbol(i, s)
    return out


# ---------------------------------------------------------------------------
# bitstream container


@dataclass
class BitstreamHeader:
    mode: int
    norm: NormalizationParams
    max_depth: int
    trunc_depth: int
    point_count: int
    model_kind: int
    model_hash: int
    frame_point_counts: list | None = None   # dynamic only
    poses: list | None = None                # dynamic only, 3x4 row-major each

    def pack(self) -> bytes:
        flags = FLAG_POSES if self.poses is not None else 0
        out = bytearray()
        out += MAGIC
        out += struct.pack("<BBB", VERSION, self.mode, flags)
        out += struct.pack("<3f", *self.norm.origin.astype(np.float32))
        out += struct.pack("<f", np.float32(self.norm.edge))
        out += struct.pack("<BBIBQ", self.max_depth, self.trunc_depth,
                           self.point_count, self.model_kind, self.model_hash)
        if self.mode == MODE_DYNAMIC:
            counts = self.frame_point_counts or []
            out += struct.pack("<H", len(counts))
            out += struct.pack(f"<{len(counts)}I", *counts)
            if self.poses is not None:
                if len(self.poses) != len(counts):
                    raise ValueError("pose count must match frame count")
                for pose in self.poses:
                    out += struct.pack("<12f", *np.asarray(pose, dtype=np.float32).reshape(12))
        out += struct.pack("<Q", fnv1a64(bytes(out)))
        return bytes(out)

    @classmethod
    def unpack(cls, data: bytes):
        """Parse and verify; returns (header, payload_offset)."""
        try:
            return cls._unpack(data)
        except struct.error as exc:
            raise DecodeError(f"header truncated or corrupt: {exc}") from exc

    @classmethod
    def _unpack(cls, data: bytes):
        if len(data) < 4 or data[:4] != MAGIC:
            raise DecodeError("bad magic: not a bitstream")
        pos = 4
        version, mode, flags = struct.unpack_from("<BBB", data, pos)
        pos += 3
        if version != VERSION:
            raise DecodeError(f"unsupported bitstream version {version}")
        if mode not in (MODE_STATIC, MODE_DYNAMIC):
            raise DecodeError(f"unknown mode {mode}")
        origin = struct.unpack_from("<3f", data, pos)
        pos += 12
        (edge,) = struct.unpack_from("<f", data, pos)
        pos += 4
        max_depth, trunc_depth, point_count, model_kind, model_hash = \
            struct.unpack_from("<BBIBQ", data, pos)
        pos += 15
        frame_counts = None
        poses = None
        if mode == MODE_DYNAMIC:
            (n_frames,) = struct.unpack_from("<H", data, pos)
            pos += 2
            frame_counts = list(struct.unpack_from(f"<{n_frames}I", data, pos))
            pos += 4 * n_frames
            if flags & FLAG_POSES:
                poses = []
                for _ in range(n_frames):
                    poses.append(np.array(struct.unpack_from("<12f", data, pos),
                                          dtype=np.float64).reshape(3, 4))
                    pos += 48
        (stored,) = struct.unpack_from("<Q", data, pos)
        if fnv1a64(data[:pos]) != stored:
            raise DecodeError("header corrupt (hash mismatch)")
        pos += 8
        if not (1 <= trunc_depth <= max_depth <= oct.MAX_DEPTH):
            raise DecodeError(f"bad depths in header: trunc {trunc_depth}, max {max_depth}")
        header = cls(mode, NormalizationParams(np.array(origin, dtype=np.float64), float(edge)),
                     max_depth, trunc_depth, point_count, model_kind, model_hash,
                     frame_counts, poses)
        return header, pos


def _check_model(header: BitstreamHeader, model: em.EntropyModel):
    if model.kind_code != header.model_kind:
        raise DecodeError(f"bitstream was coded with model kind "
                          f"{em.KIND_NAMES.get(header.model_kind, header.model_kind)}, "
                          f"got {model.kind}")
    if model.content_hash() != header.model_hash:
        raise DecodeError("model hash mismatch: refusing to decode with different weights")


def _code_level(ctx, symbols, model, enc_or_dec, decoding):
    """Code or decode all symbols of one depth level in canonical order.

    Returns the decoded symbol array when decoding.
    """
    n = len(ctx)
    probs = model.level_probabilities(ctx)
    if probs is not None and probs.ndim == 1:
        probs = np.broadcast_to(probs, (n, em.ALPHABET))
    if probs is not None:
        freq, cum = quantize_level(probs)
    out = np.zeros(n, dtype=np.uint8) if decoding else None
    for i in range(n):
        if probs is None:
            table = quantize_distribution(model.node_probability(ctx, i))
            f_row, c_row = table.freq, table.cum
        else:
            f_row, c_row = freq[i], cum[i]
        if decoding:
            target = enc_or_dec.decode_target()
            idx = int(np.searchsorted(c_row, target, side="right")) - 1
            enc_or_dec.consume(int(c_row[idx]), int(f_row[idx]))
            s = idx + 1
            out[i] = s
        else:
            s = int(symbols[i])
            enc_or_dec.encode(int(c_row[s - 1]), int(f_row[s - 1]))
        model.observe(ctx, i, int(s))
    return out


def encode_cloud(cloud: PointCloud, depth: int, trunc_depth: int,
                 model: em.EntropyModel) -> bytes:
    """Normalize, build the octree at `depth`, and code symbols below `trunc_depth`."""
    if len(cloud) == 0:
        raise ValueError("cannot encode an empty cloud")
    if not 1 <= trunc_depth <= depth:
        raise ValueError(f"trunc_depth {trunc_depth} out of range [1, {depth}]")
    if isinstance(model, em.DynamicContextModel):
        raise ValueError("dynamic models code sequences; use encode_sequence")
    norm_cloud, params = normalize(cloud)
    tree = oct.build(norm_cloud, depth).truncate(trunc_depth)
    header = BitstreamHeader(MODE_STATIC, params, depth, trunc_depth, len(cloud),
                             model.kind_code, model.content_hash())
    enc = RangeEncoder()
    model.begin_stream()
    for k in range(trunc_depth):
        ctx = em.make_level_context(k, depth, tree.levels[k],
                                    prev_cells=tree.levels[k - 1] if k else None,
                                    prev_symbols=tree.symbols[k - 1] if k else None)
        _code_level(ctx, tree.symbols[k], model, enc, decoding=False)
    return header.pack() + enc.finish()


def decode_cloud(data: bytes, model: em.EntropyModel, refine_params=None,
                 return_tree=False):
    """Rebuild the octree level by level and reconstruct (optionally refined) centers."""
    header, pos = BitstreamHeader.unpack(data)
    if header.mode != MODE_STATIC:
        raise DecodeError("not a static bitstream; use decode_sequence")
    _check_model(header, model)
    dec = RangeDecoder(data[pos:])
    model.begin_stream()
    levels = [np.zeros((1, 3), dtype=np.int64)]
    symbols = []
    for k in range(header.trunc_depth):
        ctx = em.make_level_context(k, header.max_depth, levels[k],
                                    prev_cells=levels[k - 1] if k else None,
                                    prev_symbols=symbols[k - 1] if k else None)
        sym = _code_level(ctx, None, model, dec, decoding=True)
        if sym.min() < 1:
            raise DecodeError(f"decoded an impossible zero symbol at depth {k}")
        symbols.append(sym)
        levels.append(oct._expand_children(levels[k], sym, k))
    tree = oct.Octree(header.trunc_depth, levels, symbols)
    if refine_params is not None:
        from .refine import refine_apply
        cloud = refine_apply(tree, refine_params, header.norm)
    else:
        cloud = oct.reconstruct_centers(tree, header.norm)
    if return_tree:
        return cloud, tree, header
    return cloud


def payload_size(data: bytes) -> int:
    """Coded payload bytes (bitstream minus header)."""
    _, pos = BitstreamHeader.unpack(data)
    return len(data) - pos


def coded_bpp(data: bytes) -> float:
    header, pos = BitstreamHeader.unpack(data)
    return 8.0 * (len(data) - pos) / header.point_count
