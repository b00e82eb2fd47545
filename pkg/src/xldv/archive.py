"""Binary serialization: feature archives and model checkpoints.

Feature archive (``FARC``): magic ``FARC``, u16 version=1, then per record
u16 id-length, UTF-8 id, u32 T, u32 D, T*D little-endian float32 row-major,
u32 CRC32 of the record bytes preceding the checksum. The id field packs the
record metadata tab-separated:
``utterance_id TAB speaker_id TAB language_id TAB frame_shift_ms TAB frame_length_ms``.

Checkpoint container (``NNCK``): magic ``NNCK``, u16 version=1, u32 header
length, UTF-8 JSON header (layer specs / model metadata), u32 tensor count,
then per tensor u16 name-length, name, u8 dtype code (0=f32, 1=f64), u8 ndim,
ndim u32 dims, little-endian row-major payload; u32 CRC32 trailer over all
bytes after the version field.
"""

import json
import struct
import zlib

import numpy as np

from .errors import FormatError, InvalidArgumentError
from .frontend import FeatureMatrix

FARC_MAGIC = b"FARC"
FARC_VERSION = 1
NNCK_MAGIC = b"NNCK"
NNCK_VERSION = 1

_DTYPE_CODES = {0: np.dtype("<f4"), 1: np.dtype("<f8")}
_DTYPE_TO_CODE = {np.dtype(np.float32): 0, np.dtype(np.float64): 1}


def _pack_id(feat: FeatureMatrix) -> bytes:
    parts = (
        feat.utterance_id,
        feat.speaker_id,
        feat.language_id,
        repr(float(feat.frame_shift_ms)),
        repr(float(feat.frame_length_ms)),
    )
    return "\t".join(parts).encode("utf-8")


def _unpack_id(raw: bytes, offset):
    parts = raw.decode("utf-8").split("\t")
    if len(parts) != 5:
        raise FormatError("archive record id has wrong field count", offset=offset)
    return parts[0], parts[1], parts[2], float(parts[3]), float(parts[4])


def _record_bytes(feat: FeatureMatrix) -> bytes:
    ident = _pack_id(feat)
    t, d = feat.data.shape
    body = (
        struct.pack("<H", len(ident))
        + ident
        + struct.pack("<II", t, d)
        + np.ascontiguousarray(feat.data, dtype="<f4").tobytes()
    )
    return body + struct.pack("<I", zlib.crc32(body) & 0xFFFFFFFF)


def archive_write(feats, path):
    """Write an iterable of FeatureMatrix records; ids must be unique."""
    seen = set()
    with open(path, "wb") as fh:
        fh.write(FARC_MAGIC + struct.pack("<H", FARC_VERSION))
        for feat in feats:
            if feat.utterance_id in seen:
                raise InvalidArgumentError(f"duplicate archive id {feat.utterance_id!r}")
            seen.add(feat.utterance_id)
            fh.write(_record_bytes(feat))


def archive_stream(path):
    """Yield FeatureMatrix records one at a time (streaming read)."""
    with open(path, "rb") as fh:
        head = fh.read(6)
        if len(head) < 6 or head[:4] != FARC_MAGIC:
            raise FormatError("not a feature archive (bad magic)", offset=0)
        (version,) = struct.unpack("<H", head[4:6])
        if version != FARC_VERSION:
            raise FormatError(f"unsupported archive version {version}", offset=4)
        seen = set()
        while True:
            rec_start = fh.tell()
            raw_len = fh.read(2)
            if not raw_len:
                return
            if len(raw_len) < 2:
                raise FormatError("truncated record header", offset=rec_start)
            (id_len,) = struct.unpack("<H", raw_len)
            ident = fh.read(id_len)
            if len(ident) < id_len:
                raise FormatError("truncated record id", offset=rec_start)
            utt_id, spk_id, lang_id, shift, length = _unpack_id(ident, rec_start)
            dims = fh.read(8)
            if len(dims) < 8:
                raise FormatError("truncated record dims", offset=rec_start, record=utt_id)
            t, d = struct.unpack("<II", dims)
            payload = fh.read(4 * t * d)
            if len(payload) < 4 * t * d:
                raise FormatError("truncated record payload", offset=rec_start, record=utt_id)
            crc_raw = fh.read(4)
            if len(crc_raw) < 4:
                raise FormatError("truncated record checksum", offset=rec_start, record=utt_id)
            (crc_stored,) = struct.unpack("<I", crc_raw)
            body = raw_len + ident + dims + payload
            if zlib.crc32(body) & 0xFFFFFFFF != crc_stored:
                raise FormatError("record checksum mismatch", offset=rec_start, record=utt_id)
            if utt_id in seen:
                raise FormatError("duplicate record id", offset=rec_start, record=utt_id)
            seen.add(utt_id)
            data = np.frombuffer(payload, dtype="<f4").reshape(t, d).astype(np.float64)
            yield FeatureMatrix(utt_id, spk_id, lang_id, data, shift, length)


def archive_read(path):
    """Read a whole archive into a list of FeatureMatrix records."""
    return list(archive_stream(path))


def archive_read_dict(path):
    """Read an archive keyed by utterance id."""
    return {feat.utterance_id: feat for feat in archive_stream(path)}


def save_checkpoint(path, header: dict, tensors: dict):
    """Write a checkpoint container with a JSON header and named tensors."""
    header_bytes = json.dumps(header, sort_keys=True, separators=(",", ":")).encode("utf-8")
    body = struct.pack("<I", len(header_bytes)) + header_bytes
    body += struct.pack("<I", len(tensors))
    for name, tensor in tensors.items():
        arr = np.ascontiguousarray(tensor)
        if arr.dtype not in _DTYPE_TO_CODE:
            arr = arr.astype(np.float64)
        code = _DTYPE_TO_CODE[arr.dtype]
        name_bytes = name.encode("utf-8")
        body += struct.pack("<H", len(name_bytes)) + name_bytes
        body += struct.pack("<BB", code, arr.ndim)
        body += struct.pack(f"<{arr.ndim}I", *arr.shape) if arr.ndim else b""
        body += arr.astype(_DTYPE_CODES[code], copy=False).tobytes()
    with open(path, "wb") as fh:
        fh.write(NNCK_MAGIC + struct.pack("<H", NNCK_VERSION))
        fh.write(body)
        fh.write(struct.pack("<I", zlib.crc32(body) & 0xFFFFFFFF))


def load_checkpoint(path):
    """Read a checkpoint container; returns (header dict, name -> ndarray)."""
    with open(path, "rb") as fh:
        blob = fh.read()
    if len(blob) < 10 or blob[:4] != NNCK_MAGIC:
        raise FormatError("not a checkpoint container (bad magic)", offset=0)
    (version,) = struct.unpack("<H", blob[4:6])
    if version != NNCK_VERSION:
        raise FormatError(f"unsupported checkpoint version {version}", offset=4)
    body, crc_raw = blob[6:-4], blob[-4:]
    (crc_stored,) = struct.unpack("<I", crc_raw)
    if zlib.crc32(body) & 0xFFFFFFFF != crc_stored:
        raise FormatError("checkpoint checksum mismatch", offset=len(blob) - 4)
    pos = 0

    def take(n, what):
        nonlocal pos
        if pos + n > len(body):
            raise FormatError(f"truncated checkpoint ({what})", offset=6 + pos)
        out = body[pos : pos + n]
        pos += n
        return out

    (header_len,) = struct.unpack("<I", take(4, "header length"))
    header = json.loads(take(header_len, "header").decode("utf-8"))
    (n_tensors,) = struct.unpack("<I", take(4, "tensor count"))
    tensors = {}
    for _ in range(n_tensors):
        (name_len,) = struct.unpack("<H", take(2, "tensor name length"))
        name = take(name_len, "tensor name").decode("utf-8")
        code, ndim = struct.unpack("<BB", take(2, "tensor dtype/ndim"))
        if code not in _DTYPE_CODES:
            raise FormatError(f"unknown tensor dtype code {code}", offset=6 + pos, record=name)
        shape = struct.unpack(f"<{ndim}I", take(4 * ndim, "tensor shape")) if ndim else ()
        count = int(np.prod(shape, dtype=np.int64)) if ndim else 1
        payload = take(count * _DTYPE_CODES[code].itemsize, "tensor payload")
        tensors[name] = np.frombuffer(payload, dtype=_DTYPE_CODES[code]).reshape(shape).copy()
    return header, tensors
