"""Binary model containers, feature archives and vector archives.

Model container layout (all integers little-endian)::

    8-byte format tag | u32 version | u32 header length | JSON header
    u32 tensor count | per tensor: u32 name length, name, u8 dtype (0=f64, 1=f32),
                        u32 ndim, u32 dims..., row-major payload

Feature archive record: ``TDSVFT01 | u32 dim | u32 frames | u32 id length | id |
f32 payload``; vector archive record: ``TDSVVEC1 | u32 id length | id | u32 dim |
f32 payload``. Each archive has a side index ``<archive>.idx`` with a
``# config-hash <hash>`` header and ``id<TAB>offset`` lines.
"""

from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np

from .gmm import DiagGmm
from .ivector import TotalVariabilityModel
from .nnet.mlp import DenseLayer, MlpNetwork
from .nnet.pca import PcaProjection
from .nnet.xvector import XvectorNetwork
from .plda import PldaModel, SphericalNorm

VERSION = 1
FEAT_MAGIC = b"TDSVFT01"
VEC_MAGIC = b"TDSVVEC1"
_DTYPES = {0: np.dtype("<f8"), 1: np.dtype("<f4")}
_CODES = {np.dtype("<f8"): 0, np.dtype("<f4"): 1}


class FormatError(ValueError):
    pass


class _Reader:
    def __init__(self, data: bytes, path):
        self.data, self.pos, self.path = data, 0, path

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.data):
            raise FormatError(f"{self.path}: truncated file")
        out = self.data[self.pos:self.pos + n]
        self.pos += n
        return out

    def u32(self) -> int:
        return struct.unpack("<I", self.take(4))[0]

    def u8(self) -> int:
        return self.take(1)[0]

    def string(self) -> str:
        return self.take(self.u32()).decode("utf-8")


def _pack_str(s: str) -> bytes:
    b = s.encode("utf-8")
    return struct.pack("<I", len(b)) + b


def write_container(path, tag: bytes, meta: dict, tensors: dict) -> None:
    if len(tag) != 8:
        raise FormatError("format tags are 8 bytes")
    header = json.dumps(meta, sort_keys=True).encode("utf-8")
    parts = [tag, struct.pack("<II", VERSION, len(header)), header,
             struct.pack("<I", len(tensors))]
    for name, arr in tensors.items():
        arr = np.asarray(arr)
        dt = arr.dtype.newbyteorder("<")
        if dt not in _CODES:
            raise FormatError(f"unsupported dtype {arr.dtype} for {name}")
        parts += [_pack_str(name), struct.pack("<BI", _CODES[dt], arr.ndim),
                  struct.pack(f"<{arr.ndim}I", *arr.shape),
                  np.ascontiguousarray(arr, dtype=dt).tobytes()]
    Path(path).write_bytes(b"".join(parts))


def read_container(path, expected_tag: bytes | None = None):
    data = Path(path).read_bytes()
    r = _Reader(data, path)
    tag = r.take(8) if len(data) >= 8 else b""
    if tag not in TAGS:
        raise FormatError(f"{path}: unknown format {tag!r}")
    if expected_tag is not None and tag != expected_tag:
        raise FormatError(f"{path}: format tag mismatch: expected {expected_tag!r}, got {tag!r}")
    version = r.u32()
    if version != VERSION:
        raise FormatError(f"{path}: version {version} not supported (expected {VERSION})")
    meta = json.loads(r.take(r.u32()).decode("utf-8"))
    tensors = {}
    for _ in range(r.u32()):
        name = r.string()
        dt = _DTYPES.get(r.u8())
        if dt is None:
            raise FormatError(f"{path}: bad dtype code for {name}")
        ndim = r.u32()
        shape = struct.unpack(f"<{ndim}I", r.take(4 * ndim))
        count = int(np.prod(shape)) if ndim else 1
        tensors[name] = np.frombuffer(r.take(count * dt.itemsize), dtype=dt).reshape(shape).copy()
    if r.pos != len(data):
        raise FormatError(f"{path}: trailing bytes")
    return tag, meta, tensors


# --- model dispatch ---------------------------------------------------------

def _layers_out(prefix, layers, tensors, dtype):
    tags = []
    for i, layer in enumerate(layers):
        tensors[f"{prefix}{i}.w"] = layer.weight.astype(dtype)
        tensors[f"{prefix}{i}.b"] = layer.bias.astype(dtype)
        tags.append(layer.activation)
    return tags


def _layers_in(prefix, tags, tensors):
    return [DenseLayer(tensors[f"{prefix}{i}.w"].astype(np.float64),
                       tensors[f"{prefix}{i}.b"].astype(np.float64), tag)
            for i, tag in enumerate(tags)]


def _encode(model):
    if isinstance(model, DiagGmm):
        return b"TDSVGMM1", {"C": model.n_components, "D": model.dim}, {
            "weights": model.weights, "means": model.means, "variances": model.variances}
    if isinstance(model, TotalVariabilityModel):
        return b"TDSVTV01", {"C": model.n_components, "D": model.feat_dim, "R": model.rank,
                             "ubm_hash": model.ubm_hash}, {
            "T": model.T, "ubm_means": model.ubm_means, "ubm_variances": model.ubm_variances}
    if isinstance(model, PldaModel):
        tensors = {"mean": model.mean, "between": model.between, "within": model.within}
        n_norm = 0
        if model.norm is not None:
            n_norm = model.norm.iterations
            for i, (m, w) in enumerate(zip(model.norm.means, model.norm.whiteners)):
                tensors[f"norm{i}.mean"] = m
                tensors[f"norm{i}.whitener"] = w
        return b"TDSVPLDA", {"R": model.dim, "norm_iterations": n_norm}, tensors
    if isinstance(model, MlpNetwork):
        tensors = {}
        hidden = _layers_out("hidden", model.hidden, tensors, np.float32)
        heads = _layers_out("head", model.heads, tensors, np.float32)
        return b"TDSVNN01", {"layers": len(hidden), "hidden": hidden, "heads": heads}, tensors
    if isinstance(model, XvectorNetwork):
        tensors = {}
        frame = _layers_out("frame", model.frame_layers, tensors, np.float32)
        seg = _layers_out("segment", model.segment_layers, tensors, np.float32)
        _layers_out("softmax", [model.head], tensors, np.float32)
        return b"TDSVXV01", {"frame": frame, "segment": seg,
                             "contexts": [list(map(int, c)) for c in model.contexts],
                             "embed_layer": model.embed_layer,
                             "embed_pre_activation": model.embed_pre_activation,
                             "var_floor": model.var_floor,
                             "classes": [str(c) for c in model.classes]}, tensors
    if isinstance(model, PcaProjection):
        return b"TDSVPCA1", {"H": model.mean.shape[0], "B": model.dim}, {
            "mean": model.mean, "basis": model.basis, "eigenvalues": model.eigenvalues}
    raise FormatError(f"cannot serialize {type(model).__name__}")


def _decode(tag, meta, t):
    if tag == b"TDSVGMM1":
        return DiagGmm(t["weights"], t["means"], t["variances"])
    if tag == b"TDSVTV01":
        return TotalVariabilityModel(t["T"], t["ubm_means"], t["ubm_variances"], meta["ubm_hash"])
    if tag == b"TDSVPLDA":
        norm = None
        if meta["norm_iterations"]:
            norm = SphericalNorm([t[f"norm{i}.mean"] for i in range(meta["norm_iterations"])],
                                 [t[f"norm{i}.whitener"] for i in range(meta["norm_iterations"])])
        return PldaModel(t["mean"], t["between"], t["within"], norm)
    if tag == b"TDSVNN01":
        return MlpNetwork(_layers_in("hidden", meta["hidden"], t), _layers_in("head", meta["heads"], t))
    if tag == b"TDSVXV01":
        return XvectorNetwork(_layers_in("frame", meta["frame"], t), meta["contexts"],
                              _layers_in("segment", meta["segment"], t),
                              _layers_in("softmax", ["softmax"], t)[0], meta["embed_layer"],
                              meta["embed_pre_activation"], meta["var_floor"], meta["classes"])
    if tag == b"TDSVPCA1":
        return PcaProjection(t["mean"], t["basis"], t["eigenvalues"])
    raise FormatError(f"unknown format {tag!r}")


TAGS = {
    b"TDSVGMM1": DiagGmm,
    b"TDSVTV01": TotalVariabilityModel,
    b"TDSVPLDA": PldaModel,
    b"TDSVNN01": MlpNetwork,
    b"TDSVXV01": XvectorNetwork,
    b"TDSVPCA1": PcaProjection,
}
_TAG_OF = {cls: tag for tag, cls in TAGS.items()}


def save_model(path, model, config_hash: str = "") -> None:
    tag, meta, tensors = _encode(model)
    meta = dict(meta, config_hash=config_hash)
    write_container(path, tag, meta, tensors)


def load_model(path, expected=None, config_hash: str | None = None):
    """Load any model container; `expected` (a class) enforces the format tag and
    `config_hash`, when given, must match the embedded producer hash."""
    tag, meta, tensors = read_container(path, _TAG_OF[expected] if expected else None)
    if config_hash is not None and meta.get("config_hash") != config_hash:
        raise FormatError(f"{path}: produced by config {meta.get('config_hash')!r}, "
                          f"expected {config_hash!r}")
    return _decode(tag, meta, tensors)


def model_config_hash(path) -> str:
    _, meta, _ = read_container(path)
    return meta.get("config_hash", "")


# --- archives ---------------------------------------------------------------

def _index_path(path) -> Path:
    return Path(str(path) + ".idx")


def _write_index(path, offsets, config_hash):
    with open(_index_path(path), "w", encoding="utf-8") as fh:
        fh.write(f"# config-hash {config_hash}\n")
        for utt, off in offsets:
            fh.write(f"{utt}\t{off}\n")


def read_index(path) -> tuple[dict, str]:
    offsets, config_hash = {}, ""
    with open(_index_path(path), encoding="utf-8") as fh:
        for line in fh:
            if line.startswith("# config-hash"):
                config_hash = line.split()[2] if len(line.split()) > 2 else ""
            elif line.strip():
                utt, off = line.rstrip("\n").split("\t")
                offsets[utt] = int(off)
    return offsets, config_hash


def write_feature_archive(path, features, config_hash: str = "") -> None:
    """Write (id, frames) pairs or FeatureMatrix objects."""
    offsets, pos = [], 0
    with open(path, "wb") as fh:
        for item in features:
            utt, frames = (item.id, item.frames) if hasattr(item, "frames") else item
            frames = np.asarray(frames, dtype="<f4")
            if frames.ndim != 2:
                raise FormatError(f"{utt}: feature matrix must be 2-D")
            T, D = frames.shape
            rec = FEAT_MAGIC + struct.pack("<II", D, T) + _pack_str(utt) + frames.tobytes()
            fh.write(rec)
            offsets.append((utt, pos))
            pos += len(rec)
    _write_index(path, offsets, config_hash)


def _read_feature_record(r: _Reader):
    if r.take(8) != FEAT_MAGIC:
        raise FormatError(f"{r.path}: bad feature record magic at {r.pos - 8}")
    D, T = struct.unpack("<II", r.take(8))
    utt = r.string()
    frames = np.frombuffer(r.take(4 * D * T), dtype="<f4").reshape(T, D)
    return utt, frames.astype(np.float64)


def read_feature_archive(path) -> dict:
    """All records, as an insertion-ordered dict id -> float64 (T, D) frames."""
    data = Path(path).read_bytes()
    r = _Reader(data, path)
    out = {}
    while r.pos < len(data):
        utt, frames = _read_feature_record(r)
        out[utt] = frames
    return out


def read_feature(path, utt_id: str) -> np.ndarray:
    """Random access to a single utterance through the side index."""
    offsets, _ = read_index(path)
    if utt_id not in offsets:
        raise KeyError(utt_id)
    with open(path, "rb") as fh:
        fh.seek(offsets[utt_id])
        head = fh.read(16)
        if head[:8] != FEAT_MAGIC:
            raise FormatError(f"{path}: bad feature record magic at {offsets[utt_id]}")
        D, T = struct.unpack("<II", head[8:16])
        (n,) = struct.unpack("<I", fh.read(4))
        fh.read(n)
        return np.frombuffer(fh.read(4 * D * T), dtype="<f4").reshape(T, D).astype(np.float64)


def write_vector_archive(path, vectors, config_hash: str = "") -> None:
    """Write (id, vector) pairs or IVector-like objects with ``.id`` and ``.w``."""
    offsets, pos = [], 0
    with open(path, "wb") as fh:
        for item in vectors:
            utt, w = (item.id, item.w) if hasattr(item, "w") else item
            w = np.asarray(w, dtype="<f4").reshape(-1)
            rec = VEC_MAGIC + _pack_str(utt) + struct.pack("<I", w.size) + w.tobytes()
            fh.write(rec)
            offsets.append((utt, pos))
            pos += len(rec)
    _write_index(path, offsets, config_hash)


def read_vector_archive(path) -> dict:
    data = Path(path).read_bytes()
    r = _Reader(data, path)
    out = {}
    while r.pos < len(data):
        if r.take(8) != VEC_MAGIC:
            raise FormatError(f"{path}: bad vector record magic at {r.pos - 8}")
        utt = r.string()
        dim = r.u32()
        out[utt] = np.frombuffer(r.take(4 * dim), dtype="<f4").astype(np.float64)
    return out


def archive_config_hash(path) -> str:
    return read_index(path)[1]
