"""Binary persistence for feature sets, model checkpoints and run manifests.

Feature file layout (all integers little-endian)::

    offset  size  field
    0       4     magic b"AFF1"
    4       2     format version (uint16, currently 1)
    6       1     endianness flag (0 = little-endian payload)
    7       1     flags: bit 0 = query views present
    8       8     item count B (uint64)
    16      4     family count F (uint32)
    20      4     query-view width Q (uint32, 0 when absent)
    24      12*F  per family: kind (uint32, 0 global / 1 local), dim, vector count
    ...     8*B   item ids (int64)
    ...     8*B   labels (int64)
    ...     4*B*W float32 payload, item-major; within an item the families
                  follow in header order, each row-major (W = sum of widths)
    ...     4*B*Q float32 query views, item-major (only when flagged)
    end-4   4     CRC-32 of every preceding byte

Checkpoints use magic b"AFFC": version, a length-prefixed JSON header holding
the architecture tag, metadata and a tensor table (name, dtype code, shape,
byte offset), then the raw little-endian tensor bytes and the same CRC-32
footer.
"""
from __future__ import annotations

import json
import struct
import zlib
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import __version__
from .errors import ChecksumError, FormatError, SchemaError
from .features import GLOBAL, LOCAL, FeatureSet

FEATURE_MAGIC = b"AFF1"
CHECKPOINT_MAGIC = b"AFFC"
VERSION = 1
_KIND_CODE = {GLOBAL: 0, LOCAL: 1}
_HEAD = struct.Struct("<4sHBBQII")
_FAMILY = struct.Struct("<III")
_DTYPES = {"f4": np.dtype("<f4"), "f8": np.dtype("<f8"), "i8": np.dtype("<i8")}


def _crc(data):
    return zlib.crc32(data) & 0xFFFFFFFF


def _as_set(items):
    if isinstance(items, FeatureSet):
        if len(items) == 0:
            raise SchemaError("cannot write an empty feature set")
        return items
    return FeatureSet.from_bundles(items)


def encode_features(items):
    """Serialize a ``FeatureSet`` (or a homogeneous list of bundles) to bytes."""
    fs = _as_set(items)
    n = len(fs)
    qv = fs.query_views
    q_dim = 0 if qv is None else qv.shape[1]
    schema = fs.schema
    parts = [_HEAD.pack(FEATURE_MAGIC, VERSION, 0, int(qv is not None), n, len(schema), q_dim)]
    parts += [_FAMILY.pack(_KIND_CODE[f.kind], f.dim, f.count) for f in schema]
    parts.append(fs.ids.astype("<i8").tobytes())
    parts.append(fs.labels.astype("<i8").tobytes())
    parts.append(np.ascontiguousarray(fs.flat(), dtype="<f4").tobytes())
    if qv is not None:
        parts.append(np.ascontiguousarray(qv, dtype="<f4").tobytes())
    body = b"".join(parts)
    return body + struct.pack("<I", _crc(body))


def decode_features(data):
    data = bytes(data)
    if len(data) < _HEAD.size + 4:
        raise FormatError("file too short for a feature header", len(data))
    magic, version, endian, flags, n, n_fam, q_dim = _HEAD.unpack_from(data, 0)
    if magic != FEATURE_MAGIC:
        raise FormatError(f"bad magic {magic!r}", 0)
    if version != VERSION:
        raise FormatError(f"unsupported feature format version {version}", 4)
    if endian != 0:
        raise FormatError("only little-endian payloads are supported", 6)
    pos = _HEAD.size
    fams = []
    for i in range(n_fam):
        if pos + _FAMILY.size > len(data) - 4:
            raise FormatError("truncated family table", pos)
        kind, dim, count = _FAMILY.unpack_from(data, pos)
        if kind not in (0, 1) or dim < 1 or count < 1 or (kind == 0 and count != 1):
            raise FormatError(f"invalid descriptor for family {i}", pos)
        fams.append((GLOBAL if kind == 0 else LOCAL, dim, count))
        pos += _FAMILY.size
    width = sum(d * c for _, d, c in fams)
    has_q = bool(flags & 1)
    expected = pos + 16 * n + 4 * n * width + (4 * n * q_dim if has_q else 0) + 4
    if len(data) != expected:
        raise FormatError(f"declared sizes need {expected} bytes, file has {len(data)}",
                          min(len(data), expected))
    stored = struct.unpack_from("<I", data, len(data) - 4)[0]
    if stored != _crc(data[:-4]):
        raise ChecksumError("CRC-32 mismatch", len(data) - 4)
    ids = np.frombuffer(data, "<i8", n, pos).astype(np.int64)
    pos += 8 * n
    labels = np.frombuffer(data, "<i8", n, pos).astype(np.int64)
    pos += 8 * n
    flat = np.frombuffer(data, "<f4", n * width, pos).reshape(n, width).astype(np.float32)
    pos += 4 * n * width
    qv = None
    if has_q:
        qv = np.frombuffer(data, "<f4", n * q_dim, pos).reshape(n, q_dim).astype(np.float32)
    globals_, locals_ = [], []
    col = 0
    for kind, dim, count in fams:
        block = flat[:, col:col + dim * count]
        col += dim * count
        if kind == GLOBAL:
            globals_.append(np.ascontiguousarray(block))
        else:
            locals_.append(np.ascontiguousarray(block.reshape(n, count, dim)))
    return FeatureSet(globals_, locals_, ids, labels, qv)


def write_features(items, path):
    """Write ``items`` to ``path``; returns the CRC-32 footer value."""
    data = encode_features(items)
    Path(path).write_bytes(data)
    return struct.unpack("<I", data[-4:])[0]


def read_features(path):
    """Read a feature file back as a ``FeatureSet``."""
    return decode_features(Path(path).read_bytes())


def read_bundles(path):
    return read_features(path).bundles()


def encode_checkpoint(params, arch, meta=None):
    table, blobs, offset = [], [], 0
    for name in sorted(params):
        a = np.asarray(params[name])
        code = {"f": f"f{a.dtype.itemsize}", "i": "i8"}.get(a.dtype.kind)
        if code not in _DTYPES:
            raise SchemaError(f"tensor {name!r} has unsupported dtype {a.dtype}")
        raw = np.ascontiguousarray(a, dtype=_DTYPES[code]).tobytes()
        table.append({"name": name, "dtype": code, "shape": list(a.shape), "offset": offset})
        blobs.append(raw)
        offset += len(raw)
    header = json.dumps({"arch": arch, "meta": meta or {}, "tensors": table},
                        sort_keys=True, separators=(",", ":")).encode()
    body = CHECKPOINT_MAGIC + struct.pack("<HI", VERSION, len(header)) + header + b"".join(blobs)
    return body + struct.pack("<I", _crc(body))


def decode_checkpoint(data):
    data = bytes(data)
    if len(data) < 14:
        raise FormatError("file too short for a checkpoint header", len(data))
    if data[:4] != CHECKPOINT_MAGIC:
        raise FormatError(f"bad magic {data[:4]!r}", 0)
    version, hlen = struct.unpack_from("<HI", data, 4)
    if version != VERSION:
        raise FormatError(f"unsupported checkpoint version {version}", 4)
    start = 10 + hlen
    if start + 4 > len(data):
        raise FormatError("truncated checkpoint header", len(data))
    if struct.unpack_from("<I", data, len(data) - 4)[0] != _crc(data[:-4]):
        raise ChecksumError("CRC-32 mismatch", len(data) - 4)
    try:
        header = json.loads(data[10:start])
    except ValueError:
        raise FormatError("checkpoint header is not valid JSON", 10) from None
    payload = sum(_DTYPES[t["dtype"]].itemsize * int(np.prod(t["shape"], dtype=np.int64))
                  for t in header["tensors"])
    if len(data) != start + payload + 4:
        raise FormatError(f"declared tensors need {start + payload + 4} bytes, file has {len(data)}",
                          min(len(data), start + payload))
    params = {}
    for t in header["tensors"]:
        dt = _DTYPES[t["dtype"]]
        count = int(np.prod(t["shape"], dtype=np.int64))
        arr = np.frombuffer(data, dt, count, start + t["offset"]).reshape(t["shape"])
        params[t["name"]] = arr.astype(dt.newbyteorder("="))
    return params, header["arch"], header["meta"]


def checkpoint(params, path, arch, meta=None):
    """Write a shape-tagged checkpoint; returns its CRC-32."""
    data = encode_checkpoint(params, arch, meta)
    Path(path).write_bytes(data)
    return struct.unpack("<I", data[-4:])[0]


def restore(path, expect=None, arch=None):
    """Load ``(params, arch, meta)``.

    ``expect`` (a params dict of a freshly built model) and ``arch`` guard
    against loading into the wrong architecture: names, shapes and the arch
    tag must all agree, otherwise ``SchemaError``.
    """
    params, tag, meta = decode_checkpoint(Path(path).read_bytes())
    if arch is not None and tag != arch:
        raise SchemaError(f"checkpoint holds a {tag!r} model, expected {arch!r}")
    if expect is not None:
        restore_check(params, expect)
    return params, tag, meta


@dataclass
class RunManifest:
    """What produced a directory of artifacts. Timestamps and timings live here only."""

    command: str
    config: dict = field(default_factory=dict)
    seeds: list = field(default_factory=list)
    dataset_checksum: str = ""
    artifacts: dict = field(default_factory=dict)
    tool_version: str = __version__
    timing: dict = field(default_factory=dict)
    created: str = ""

    def to_json(self):
        return json.dumps(asdict(self), indent=2, sort_keys=True) + "\n"

    @classmethod
    def from_json(cls, text):
        return cls(**json.loads(text))

    def write(self, path):
        Path(path).write_text(self.to_json())

    @classmethod
    def read(cls, path):
        return cls.from_json(Path(path).read_text())



def save_model(model, head, path):
    """Checkpoint a mixer, baseline mixer or query encoder together with its head."""
    from .fusion import BaselineMixer, Mixer
    from .training import QueryEncoder

    meta = {"scale": head.scale, "margin": head.margin}
    if isinstance(model, Mixer):
        meta["schema"] = [[f.kind, f.dim, f.count] for f in model.schema]
        meta["config"] = asdict(model.config)
    elif isinstance(model, BaselineMixer):
        meta["schema"] = [[f.kind, f.dim, f.count] for f in model.schema]
        meta["dim"], meta["hidden"] = model.dim, model.hidden
    elif isinstance(model, QueryEncoder):
        meta.update(in_dim=model.in_dim, dim=model.dim, hidden=model.hidden)
    else:
        raise SchemaError(f"cannot checkpoint a {type(model).__name__}")
    params = dict(model.params)
    params["head.prototypes"] = head.prototypes
    return checkpoint(params, path, model.kind, meta)


def load_model(path, expect_kind=None):
    """Rebuild ``(model, head)`` from ``save_model`` output."""
    from .features import Family
    from .fusion import BaselineMixer, Mixer, MixerConfig
    from .training import ClassifierHead, QueryEncoder

    params, kind, meta = restore(path)
    if expect_kind is not None and kind not in ((expect_kind,) if isinstance(expect_kind, str) else expect_kind):
        raise SchemaError(f"checkpoint holds a {kind!r} model, expected {expect_kind!r}")
    dtype = params["head.prototypes"].dtype
    if kind == "transformer":
        schema = [Family(*f) for f in meta["schema"]]
        model = Mixer(schema, MixerConfig(**meta["config"]), 0, dtype)
    elif kind == "mlp":
        model = BaselineMixer([Family(*f) for f in meta["schema"]], meta["dim"], meta["hidden"], 0, dtype)
    elif kind == "encoder":
        model = QueryEncoder(meta["in_dim"], meta["dim"], meta["hidden"], 0, dtype)
    else:
        raise SchemaError(f"unknown model kind {kind!r}")
    expect = dict(model.params)
    expect["head.prototypes"] = params["head.prototypes"]
    restore_check(params, expect)
    model.params = {k: params[k] for k in model.params}
    head = ClassifierHead(params["head.prototypes"], meta["scale"], meta["margin"])
    return model, head


def restore_check(params, expect):
    if set(expect) != set(params):
        diff = sorted(set(expect) ^ set(params))
        raise SchemaError(f"checkpoint tensors differ from the model: {diff[:4]}")
    for k, v in expect.items():
        if tuple(np.shape(v)) != params[k].shape:
            raise SchemaError(f"tensor {k!r}: checkpoint shape {params[k].shape} vs model {np.shape(v)}")
