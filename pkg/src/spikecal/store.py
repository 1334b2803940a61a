"""Model files, datasets, and the calibration cache.

Model file layout (all integers little-endian):

    bytes 0..3    magic ``SNNC``
    bytes 4..5    format version, u16 (currently 1)
    bytes 6..9    header length in bytes, u32
    then          UTF-8 header text (line oriented, see below)
    then          parameter blob, float32 little-endian

The header describes layers and where each parameter lives in the blob,
with offsets and sizes counted in float32 elements::

    format snnc-model
    input_shape 784
    classes 10
    layer 0 dense in_features 784 out_features 256
    param 0 weight shape 256 784 offset 0 size 200704
    param 0 bias shape 256 offset 200704 size 256
    layer 1 relu
    ...
    blob_size 235146

Parameter sections must tile the blob exactly (sorted, contiguous, no
overlap). The calibration cache uses the same envelope with magic ``SNNX``
and byte-addressed, per-array dtypes, since it mixes float and int arrays.
"""

from __future__ import annotations

import hashlib
import struct
from dataclasses import dataclass, field

import numpy as np

from . import nn
from .nn import LayerSpec, ModelGraph, Tensor

MODEL_MAGIC = b"SNNC"
CACHE_MAGIC = b"SNNX"
FORMAT_VERSION = 1

IDX_IMAGE_MAGIC = 0x00000803
IDX_LABEL_MAGIC = 0x00000801


class StoreError(Exception):
    """Base for every malformed-artifact error raised by this module."""


class BadMagicError(StoreError):
    pass


class UnsupportedVersionError(StoreError):
    pass


class TruncatedBlobError(StoreError):
    pass


class OffsetError(StoreError):
    pass


class HeaderError(StoreError):
    pass


class CacheMismatchError(StoreError):
    """A calibration cache reused against a model it was not built from."""


# ---------------------------------------------------------------------------
# envelope helpers

def _pack_envelope(magic: bytes, header_lines: list[str], blob: bytes) -> bytes:
    header = ("\n".join(header_lines) + "\n").encode("utf-8")
    return magic + struct.pack("<HI", FORMAT_VERSION, len(header)) + header + blob


def _unpack_envelope(data: bytes, magic: bytes) -> tuple[list[str], bytes]:
    if len(data) < 10 or data[:4] != magic:
        raise BadMagicError(
            f"expected magic {magic!r}, found {data[:4]!r}"
        )
    version, header_len = struct.unpack("<HI", data[4:10])
    if version != FORMAT_VERSION:
        raise UnsupportedVersionError(
            f"format version {version} not supported (expected {FORMAT_VERSION})"
        )
    if len(data) < 10 + header_len:
        raise TruncatedBlobError(
            f"header declares {header_len} bytes but only {len(data) - 10} remain"
        )
    header = data[10 : 10 + header_len].decode("utf-8")
    return header.splitlines(), data[10 + header_len :]


# ---------------------------------------------------------------------------
# model serialization

def _layer_struct_line(i: int, layer: LayerSpec) -> str:
    kind = layer.kind
    if kind == "dense":
        return f"layer {i} dense in_features {layer.in_features} out_features {layer.out_features}"
    if kind == "conv2d":
        kh, kw = layer.kernel
        sh, sw = layer.stride
        ph, pw = layer.padding
        return (
            f"layer {i} conv2d in_channels {layer.in_channels} out_channels {layer.out_channels} "
            f"kernel {kh} {kw} stride {sh} {sw} padding {ph} {pw}"
        )
    if kind == "avgpool2d":
        kh, kw = layer.kernel
        sh, sw = layer.stride
        return f"layer {i} avgpool2d kernel {kh} {kw} stride {sh} {sw}"
    return f"layer {i} {kind}"


def serialize_model(model: ModelGraph) -> bytes:
    model.validate()
    lines = ["format snnc-model"]
    lines.append("input_shape " + " ".join(str(d) for d in model.input_shape))
    lines.append(f"classes {model.class_count}")
    blobs: list[bytes] = []
    offset = 0
    param_lines: list[str] = []
    for i, layer in enumerate(model.layers):
        lines.append(_layer_struct_line(i, layer))
        if layer.parameterized:
            for name in ("weight", "bias"):
                arr = getattr(layer, name)
                flat = np.ascontiguousarray(arr, dtype="<f4")
                size = int(flat.size)
                shape = " ".join(str(d) for d in arr.shape)
                lines.append(f"param {i} {name} shape {shape} offset {offset} size {size}")
                blobs.append(flat.tobytes())
                offset += size
    lines.append(f"blob_size {offset}")
    return _pack_envelope(MODEL_MAGIC, lines, b"".join(blobs))


def save_model(model: ModelGraph, path) -> None:
    data = serialize_model(model)
    with open(path, "wb") as fh:
        fh.write(data)


def _parse_layer_line(tokens: list[str]) -> LayerSpec:
    kind = tokens[2]
    kv = {}
    rest = tokens[3:]
    i = 0
    while i < len(rest):
        key = rest[i]
        if key in ("kernel", "stride", "padding"):
            kv[key] = (int(rest[i + 1]), int(rest[i + 2]))
            i += 3
        else:
            kv[key] = int(rest[i + 1])
            i += 2
    if kind == "dense":
        return nn.dense(kv["in_features"], kv["out_features"])
    if kind == "conv2d":
        return nn.conv2d(
            kv["in_channels"], kv["out_channels"], kv["kernel"],
            stride=kv["stride"], padding=kv["padding"],
        )
    if kind == "avgpool2d":
        return nn.avgpool2d(kv["kernel"], kv["stride"])
    if kind == "flatten":
        return nn.flatten()
    if kind == "relu":
        return nn.relu()
    raise HeaderError(f"unknown layer kind {kind!r} in header")


def deserialize_model(data: bytes) -> ModelGraph:
    lines, blob = _unpack_envelope(data, MODEL_MAGIC)
    if not lines or lines[0] != "format snnc-model":
        raise HeaderError("missing 'format snnc-model' header line")
    input_shape: tuple[int, ...] | None = None
    classes: int | None = None
    blob_size: int | None = None
    layers: dict[int, LayerSpec] = {}
    params: list[tuple[int, str, tuple[int, ...], int, int]] = []
    for line in lines[1:]:
        tokens = line.split()
        if not tokens:
            continue
        if tokens[0] == "input_shape":
            input_shape = tuple(int(t) for t in tokens[1:])
        elif tokens[0] == "classes":
            classes = int(tokens[1])
        elif tokens[0] == "blob_size":
            blob_size = int(tokens[1])
        elif tokens[0] == "layer":
            layers[int(tokens[1])] = _parse_layer_line(tokens)
        elif tokens[0] == "param":
            idx, name = int(tokens[1]), tokens[2]
            if tokens[3] != "shape":
                raise HeaderError(f"malformed param line: {line!r}")
            off_at = tokens.index("offset")
            shape = tuple(int(t) for t in tokens[4:off_at])
            offset = int(tokens[off_at + 1])
            size = int(tokens[off_at + 3])
            params.append((idx, name, shape, offset, size))
        else:
            raise HeaderError(f"unknown header line: {line!r}")
    if input_shape is None or classes is None or blob_size is None:
        raise HeaderError("header missing input_shape, classes, or blob_size")

    actual = len(blob) // 4
    if len(blob) % 4 or actual != blob_size:
        raise TruncatedBlobError(
            f"blob declares {blob_size} float32 values ({blob_size * 4} bytes), "
            f"file carries {len(blob)} bytes"
        )
    spans = sorted((p[3], p[3] + p[4]) for p in params)
    cursor = 0
    for start, end in spans:
        if start != cursor:
            raise OffsetError(
                f"param sections must tile the blob exactly; section at {start} "
                f"but previous ended at {cursor}"
            )
        cursor = end
    if cursor != blob_size:
        raise OffsetError(
            f"param sections cover {cursor} values, blob declares {blob_size}"
        )

    ordered = [layers[i] for i in sorted(layers)]
    flat = np.frombuffer(blob, dtype="<f4")
    for idx, name, shape, offset, size in params:
        if int(np.prod(shape)) != size:
            raise HeaderError(f"param {idx} {name}: shape {shape} does not match size {size}")
        arr = flat[offset : offset + size].reshape(shape).astype(np.float32)
        setattr(ordered[idx], name, arr)
    model = ModelGraph(ordered, input_shape, classes)
    model.validate()
    return model


def load_model(path) -> ModelGraph:
    with open(path, "rb") as fh:
        return deserialize_model(fh.read())


def model_digest(model: ModelGraph) -> str:
    """Identity of architecture plus weights.

    Biases are deliberately excluded so that bias calibration (a conversion-side
    correction) does not orphan caches built against the source net. Any change
    to structure or weight values produces a new digest.
    """
    h = hashlib.sha256()
    h.update(("input_shape " + " ".join(str(d) for d in model.input_shape)).encode())
    h.update(f" classes {model.class_count} ".encode())
    for i, layer in enumerate(model.layers):
        h.update(_layer_struct_line(i, layer).encode())
        if layer.parameterized:
            h.update(np.ascontiguousarray(layer.weight, dtype="<f4").tobytes())
    return h.hexdigest()


# ---------------------------------------------------------------------------
# datasets

@dataclass
class DatasetHandle:
    """In-memory dataset: images [N, ...] float32 and integer labels [N]."""

    images: Tensor
    labels: np.ndarray
    mean: np.ndarray = field(default_factory=lambda: np.zeros(1, dtype=np.float32))
    std: np.ndarray = field(default_factory=lambda: np.ones(1, dtype=np.float32))

    def __post_init__(self):
        if len(self.images) != len(self.labels):
            raise ValueError(
                f"images ({len(self.images)}) and labels ({len(self.labels)}) disagree"
            )

    def __len__(self) -> int:
        return len(self.labels)


def _channel_stats(images: Tensor) -> tuple[np.ndarray, np.ndarray]:
    if images.ndim >= 4:
        axes = (0, *range(2, images.ndim))
        return images.mean(axis=axes), images.std(axis=axes)
    return np.array([images.mean()], dtype=np.float32), np.array([images.std()], dtype=np.float32)


def load_idx(images_path, labels_path) -> DatasetHandle:
    """Load a big-endian IDX image/label pair, scaling pixels to [0, 1].

    Images come back shaped [N, 1, rows, cols] so conv nets can consume them
    directly.
    """
    with open(images_path, "rb") as fh:
        magic, count, rows, cols = struct.unpack(">IIII", fh.read(16))
        if magic != IDX_IMAGE_MAGIC:
            raise BadMagicError(
                f"image file magic 0x{magic:08x}, expected 0x{IDX_IMAGE_MAGIC:08x}"
            )
        raw = fh.read(count * rows * cols)
    if len(raw) != count * rows * cols:
        raise TruncatedBlobError(
            f"image payload holds {len(raw)} bytes, header promises {count * rows * cols}"
        )
    images = np.frombuffer(raw, dtype=np.uint8).reshape(count, 1, rows, cols)
    images = (images.astype(np.float32) / 255.0).copy()

    with open(labels_path, "rb") as fh:
        magic, lcount = struct.unpack(">II", fh.read(8))
        if magic != IDX_LABEL_MAGIC:
            raise BadMagicError(
                f"label file magic 0x{magic:08x}, expected 0x{IDX_LABEL_MAGIC:08x}"
            )
        lraw = fh.read(lcount)
    if len(lraw) != lcount:
        raise TruncatedBlobError(
            f"label payload holds {len(lraw)} bytes, header promises {lcount}"
        )
    labels = np.frombuffer(lraw, dtype=np.uint8).astype(np.int64)
    if count != lcount:
        raise HeaderError(f"image count {count} does not match label count {lcount}")
    mean, std = _channel_stats(images)
    return DatasetHandle(images=images, labels=labels, mean=mean, std=std)


def load_csv(path, image_shape, scale: float = 1.0 / 255.0) -> DatasetHandle:
    """Load ``label,pixel,pixel,...`` rows; pixels multiplied by ``scale``."""
    table = np.loadtxt(path, delimiter=",", dtype=np.float64, ndmin=2)
    labels = table[:, 0].astype(np.int64)
    pixels = (table[:, 1:] * scale).astype(np.float32)
    expected = int(np.prod(image_shape))
    if pixels.shape[1] != expected:
        raise HeaderError(
            f"rows carry {pixels.shape[1]} pixels, image shape {tuple(image_shape)} needs {expected}"
        )
    images = pixels.reshape(len(labels), *image_shape)
    mean, std = _channel_stats(images)
    return DatasetHandle(images=images, labels=labels, mean=mean, std=std)


def _balanced_labels(n: int, classes: int, rng: np.random.Generator) -> np.ndarray:
    labels = np.arange(n, dtype=np.int64) % classes
    return labels[rng.permutation(n)]


def make_synthetic(
    kind: str,
    n: int,
    seed: int,
    *,
    classes: int = 4,
    dim=16,
    separation: float = 8.0,
    structure_seed: int | None = None,
) -> DatasetHandle:
    """Deterministic toy datasets with balanced classes (counts differ <= 1).

    ``blobs``: unit-variance Gaussian clusters whose centers sit pairwise
    about ``separation`` apart, in a flat or image-shaped feature space.
    ``rings``: concentric 2-D annuli, one radius per class; not linearly
    separable, which exercises the hidden layers.

    ``seed`` drives the sampling noise; ``structure_seed`` (default: same as
    ``seed``) pins the class geometry, so train/eval splits drawn with
    different sampling seeds but one structure seed share the same classes.
    """
    rng = np.random.default_rng(seed)
    if structure_seed is None:
        structure_seed = seed
    if kind == "blobs":
        shape = tuple(dim) if isinstance(dim, (tuple, list)) else (int(dim),)
        d = int(np.prod(shape))
        center_rng = np.random.default_rng(structure_seed)
        for _ in range(64):
            dirs = center_rng.standard_normal((classes, d))
            dirs /= np.linalg.norm(dirs, axis=1, keepdims=True)
            centers = dirs * (separation / np.sqrt(2.0))
            gaps = np.linalg.norm(centers[:, None] - centers[None, :], axis=2)
            gaps[np.diag_indices(classes)] = np.inf
            if gaps.min() >= 0.8 * separation:
                break
        labels = _balanced_labels(n, classes, rng)
        points = centers[labels] + rng.standard_normal((n, d))
        images = points.astype(np.float32).reshape(n, *shape)
    elif kind == "rings":
        labels = _balanced_labels(n, classes, rng)
        radii = 1.0 + labels.astype(np.float64)
        angle = rng.uniform(0.0, 2.0 * np.pi, size=n)
        r = radii + 0.1 * rng.standard_normal(n)
        images = np.stack([r * np.cos(angle), r * np.sin(angle)], axis=1).astype(np.float32)
    else:
        raise ValueError(f"unknown synthetic dataset kind {kind!r}")
    mean, std = _channel_stats(images)
    return DatasetHandle(images=images, labels=labels, mean=mean, std=std)


# ---------------------------------------------------------------------------
# calibration cache

@dataclass
class CalibrationCache:
    """Frozen activation snapshots for a fixed calibration subset.

    ``taps`` holds post-relu activations keyed by layer index, ``logits`` the
    source net's scores on the same inputs. ``model_digest`` pins the cache to
    the net it was built from.
    """

    model_digest: str
    seed: int
    indices: np.ndarray
    inputs: Tensor
    labels: np.ndarray
    logits: Tensor
    taps: dict[int, Tensor]

    @property
    def sample_count(self) -> int:
        return len(self.indices)

    def check_model(self, model: ModelGraph) -> None:
        digest = model_digest(model)
        if digest != self.model_digest:
            raise CacheMismatchError(
                f"cache was built for model {self.model_digest[:12]}..., "
                f"got {digest[:12]}..."
            )


def build_calibration_cache(
    model: ModelGraph, dataset: DatasetHandle, sample_count: int, seed: int
) -> CalibrationCache:
    """Sample ``sample_count`` inputs without replacement and snapshot taps."""
    n = len(dataset)
    if sample_count > n:
        raise ValueError(f"requested {sample_count} samples from a dataset of {n}")
    rng = np.random.default_rng(seed)
    indices = np.sort(rng.choice(n, size=sample_count, replace=False)).astype(np.int64)
    inputs = np.ascontiguousarray(dataset.images[indices], dtype=np.float32)
    labels = np.asarray(dataset.labels)[indices].astype(np.int64)
    logits, taps = nn.forward_with_taps(model, inputs)
    return CalibrationCache(
        model_digest=model_digest(model),
        seed=int(seed),
        indices=indices,
        inputs=inputs,
        labels=labels,
        logits=np.asarray(logits, dtype=np.float32),
        taps={i: np.asarray(t, dtype=np.float32) for i, t in taps.items()},
    )


_CACHE_DTYPES = {"f32": "<f4", "i64": "<i8"}


def save_cache(cache: CalibrationCache, path) -> None:
    arrays: list[tuple[str, str, np.ndarray]] = [
        ("indices", "i64", cache.indices),
        ("labels", "i64", cache.labels),
        ("inputs", "f32", cache.inputs),
        ("logits", "f32", cache.logits),
    ]
    for idx in sorted(cache.taps):
        arrays.append((f"tap_{idx}", "f32", cache.taps[idx]))
    lines = [
        "format snnc-cache",
        f"model_digest {cache.model_digest}",
        f"seed {cache.seed}",
        f"samples {cache.sample_count}",
    ]
    blobs: list[bytes] = []
    offset = 0
    for name, tag, arr in arrays:
        raw = np.ascontiguousarray(arr, dtype=_CACHE_DTYPES[tag]).tobytes()
        shape = " ".join(str(d) for d in arr.shape)
        lines.append(f"array {name} {tag} shape {shape} offset {offset} size {len(raw)}")
        blobs.append(raw)
        offset += len(raw)
    with open(path, "wb") as fh:
        fh.write(_pack_envelope(CACHE_MAGIC, lines, b"".join(blobs)))


def load_cache(path) -> CalibrationCache:
    with open(path, "rb") as fh:
        lines, blob = _unpack_envelope(fh.read(), CACHE_MAGIC)
    if not lines or lines[0] != "format snnc-cache":
        raise HeaderError("missing 'format snnc-cache' header line")
    meta: dict[str, str] = {}
    arrays: dict[str, np.ndarray] = {}
    for line in lines[1:]:
        tokens = line.split()
        if tokens[0] == "array":
            name, tag = tokens[1], tokens[2]
            off_at = tokens.index("offset")
            shape = tuple(int(t) for t in tokens[4:off_at])
            offset = int(tokens[off_at + 1])
            size = int(tokens[off_at + 3])
            if offset + size > len(blob):
                raise TruncatedBlobError(
                    f"array {name} wants bytes [{offset}, {offset + size}), "
                    f"blob holds {len(blob)}"
                )
            arr = np.frombuffer(blob[offset : offset + size], dtype=_CACHE_DTYPES[tag])
            arrays[name] = arr.reshape(shape).copy()
        else:
            meta[tokens[0]] = tokens[1]
    taps = {
        int(name.split("_", 1)[1]): arr.astype(np.float32)
        for name, arr in arrays.items()
        if name.startswith("tap_")
    }
    return CalibrationCache(
        model_digest=meta["model_digest"],
        seed=int(meta["seed"]),
        indices=arrays["indices"].astype(np.int64),
        labels=arrays["labels"].astype(np.int64),
        inputs=arrays["inputs"].astype(np.float32),
        logits=arrays["logits"].astype(np.float32),
        taps=taps,
    )
