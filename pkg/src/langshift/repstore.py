"""Binary storage of per-layer token representations and sentence pooling.

Container layout (version 1, all integers little-endian)::

    offset 0   4 bytes   magic b"SHFC"
    offset 4   u16       format version
    offset 6   u64       length H of the JSON header in bytes
    offset 14  H bytes   UTF-8 JSON header
    offset 14+H          payload: raw blocks, each C-contiguous

The header always carries ``kind``, ``meta`` and ``blocks``. Every block entry
records ``name``, ``dtype`` (numpy string, ``<f8`` or ``<i8``), ``shape``,
``offset`` (relative to the payload start) and ``nbytes``, plus any extra keys
the writer attached. Activation dumps add ``language``, ``layer`` and
``sentence_offsets`` to each block; checkpoints and corpora use the same
container with a different ``kind``.
"""

from __future__ import annotations

import enum
import json
import os
import struct
from dataclasses import dataclass, field

import numpy as np

from .errors import CorruptionError, FormatError, InvalidInputError, UnknownKeyError

MAGIC = b"SHFC"
VERSION = 1
PREAMBLE = struct.Struct("<4sHQ")
_DTYPES = {"<f8": np.float64, "<i8": np.int64}


class PoolingMethod(str, enum.Enum):
    MEAN = "mean"
    MAX = "max"
    LAST = "last"


def write_container(path, kind, meta, blocks):
    """Write named arrays to ``path``.

    ``blocks`` is a sequence of ``(name, array, extra)`` where ``extra`` is a
    JSON-serializable dict merged into the block's header entry.
    """
    entries = []
    arrays = []
    offset = 0
    for name, array, extra in blocks:
        arr = np.asarray(array)
        if arr.dtype.kind == "f":
            arr = np.ascontiguousarray(arr, dtype="<f8")
        elif arr.dtype.kind in "iub":
            arr = np.ascontiguousarray(arr, dtype="<i8")
        else:
            raise InvalidInputError(f"block {name!r} has unsupported dtype {arr.dtype}")
        entry = {"name": name, "dtype": arr.dtype.str, "shape": list(arr.shape),
                 "offset": offset, "nbytes": arr.nbytes}
        entry.update(extra or {})
        entries.append(entry)
        arrays.append(arr)
        offset += arr.nbytes
    header = json.dumps({"kind": kind, "meta": meta, "blocks": entries},
                        sort_keys=True, separators=(",", ":")).encode("utf-8")
    tmp = f"{os.fspath(path)}.tmp"
    with open(tmp, "wb") as fh:
        fh.write(PREAMBLE.pack(MAGIC, VERSION, len(header)))
        fh.write(header)
        for arr in arrays:
            fh.write(arr.tobytes(order="C"))
    os.replace(tmp, path)


def read_container(path, expected_kind=None):
    """Read a container; return ``(kind, meta, entries, arrays)`` with arrays keyed by name."""
    with open(path, "rb") as fh:
        raw = fh.read()
    if len(raw) < PREAMBLE.size:
        raise FormatError(f"{path}: file too short for the container preamble")
    magic, version, header_len = PREAMBLE.unpack_from(raw, 0)
    if magic != MAGIC:
        raise FormatError(f"{path}: bad magic {magic!r}, expected {MAGIC!r}")
    if version != VERSION:
        raise FormatError(f"{path}: unsupported format version {version}")
    header_end = PREAMBLE.size + header_len
    if len(raw) < header_end:
        raise CorruptionError(f"{path}: header truncated at byte {len(raw)}", offset=len(raw))
    try:
        header = json.loads(raw[PREAMBLE.size:header_end].decode("utf-8"))
        kind, meta, entries = header["kind"], header["meta"], header["blocks"]
    except (ValueError, KeyError) as exc:
        raise FormatError(f"{path}: malformed header ({exc})") from exc
    if expected_kind is not None and kind != expected_kind:
        raise FormatError(f"{path}: container holds {kind!r}, expected {expected_kind!r}")

    arrays = {}
    for entry in entries:
        start = header_end + entry["offset"]
        stop = start + entry["nbytes"]
        if stop > len(raw):
            label = entry.get("block_label", entry["name"])
            raise CorruptionError(
                f"{path}: block {label} truncated (needs bytes {start}..{stop}, file ends at {len(raw)})",
                offset=len(raw), block=label,
            )
        dtype = _DTYPES.get(entry["dtype"])
        if dtype is None:
            raise FormatError(f"{path}: unknown dtype {entry['dtype']!r}")
        arr = np.frombuffer(raw, dtype=entry["dtype"], count=entry["nbytes"] // 8, offset=start)
        arrays[entry["name"]] = arr.reshape(entry["shape"]).astype(dtype, copy=True)
    return kind, meta, entries, arrays


@dataclass
class ActivationDump:
    """Token representations per ``(language, layer)`` with CSR-style sentence offsets.

    ``offsets[(lang, layer)]`` has ``num_sentences + 1`` entries starting at 0 and
    ending at the token count; sentence ``i`` owns rows ``offsets[i]:offsets[i+1]``.
    Layers are numbered from 1.
    """

    model_id: str
    num_layers: int
    hidden_dim: int
    languages: list
    tokens: dict = field(default_factory=dict)
    offsets: dict = field(default_factory=dict)

    def validate(self):
        if self.num_layers < 1 or self.hidden_dim < 1:
            raise InvalidInputError("dump needs num_layers >= 1 and hidden_dim >= 1")
        expected = {(lang, layer) for lang in self.languages
                    for layer in range(1, self.num_layers + 1)}
        if set(self.tokens) != expected or set(self.offsets) != expected:
            missing = sorted(map(str, expected - set(self.tokens)))
            extra = sorted(map(str, set(self.tokens) - expected))
            raise InvalidInputError(
                f"dump blocks do not cover every language at every layer "
                f"(missing {missing}, unexpected {extra})"
            )
        for key, mat in self.tokens.items():
            mat = np.asarray(mat)
            if mat.ndim != 2 or mat.shape[1] != self.hidden_dim:
                raise InvalidInputError(f"block {key}: expected (n, {self.hidden_dim}), got {mat.shape}")
            if not np.all(np.isfinite(mat)):
                raise InvalidInputError(f"block {key}: non-finite values")
            off = np.asarray(self.offsets[key])
            if (off.ndim != 1 or len(off) < 2 or off[0] != 0 or off[-1] != mat.shape[0]
                    or np.any(np.diff(off) <= 0)):
                raise InvalidInputError(
                    f"block {key}: sentence offsets must start at 0, increase strictly "
                    f"and end at {mat.shape[0]}"
                )
        return self

    def block(self, language, layer):
        key = (language, layer)
        if key not in self.tokens:
            raise UnknownKeyError(f"no block for language {language!r} at layer {layer}")
        return self.tokens[key], self.offsets[key]

    def num_sentences(self, language, layer=1):
        return len(self.block(language, layer)[1]) - 1

    def __eq__(self, other):
        if not isinstance(other, ActivationDump):
            return NotImplemented
        if (self.model_id, self.num_layers, self.hidden_dim, list(self.languages)) != (
                other.model_id, other.num_layers, other.hidden_dim, list(other.languages)):
            return False
        if set(self.tokens) != set(other.tokens):
            return False
        return all(np.array_equal(self.tokens[k], other.tokens[k])
                   and np.array_equal(self.offsets[k], other.offsets[k]) for k in self.tokens)


def _block_name(language, layer):
    return f"{language}/{layer}"


def write_dump(dump, path):
    """Validate ``dump`` and write it as an ``activations`` container."""
    dump.validate()
    blocks = []
    for lang in dump.languages:
        for layer in range(1, dump.num_layers + 1):
            mat, off = dump.block(lang, layer)
            blocks.append((_block_name(lang, layer), np.asarray(mat, dtype=np.float64), {
                "language": lang, "layer": layer,
                "block_label": f"(language={lang!r}, layer={layer})",
                "sentence_offsets": [int(o) for o in off],
            }))
    meta = {"model_id": dump.model_id, "num_layers": dump.num_layers,
            "hidden_dim": dump.hidden_dim, "languages": list(dump.languages)}
    write_container(path, "activations", meta, blocks)


def read_dump(path):
    _, meta, entries, arrays = read_container(path, expected_kind="activations")
    dump = ActivationDump(model_id=meta["model_id"], num_layers=meta["num_layers"],
                          hidden_dim=meta["hidden_dim"], languages=list(meta["languages"]))
    for entry in entries:
        key = (entry["language"], entry["layer"])
        dump.tokens[key] = arrays[entry["name"]]
        dump.offsets[key] = np.asarray(entry["sentence_offsets"], dtype=np.int64)
    return dump.validate()


def pool(tokens, method=PoolingMethod.MEAN):
    """Collapse an ``(n, d)`` token matrix into one ``d``-vector."""
    tokens = np.asarray(tokens, dtype=np.float64)
    if tokens.ndim != 2 or tokens.shape[0] < 1:
        raise InvalidInputError(f"pooling needs at least one token row, got shape {tokens.shape}")
    method = PoolingMethod(method)
    if method is PoolingMethod.MEAN:
        # centred on the first row so identical rows give that row exactly
        return tokens[0] + (tokens - tokens[0]).mean(axis=0)
    if method is PoolingMethod.MAX:
        return tokens.max(axis=0)
    return tokens[-1].copy()


def sentence_vectors(dump, language, layer, method=PoolingMethod.MEAN):
    """One pooled row per sentence of ``language`` at ``layer``."""
    mat, off = dump.block(language, layer)
    return np.stack([pool(mat[off[i]:off[i + 1]], method) for i in range(len(off) - 1)])
