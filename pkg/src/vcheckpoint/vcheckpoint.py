import json
import logging
import struct
from collections import namedtuple
from collections.abc import Mapping

import numpy as np

from vgraph import ORIGINAL_ONLY_KINDS
from vtensor import DimensionError, DType, Tensor

logger = logging.getLogger("vcheckpoint")

MAGIC = b"DCKP"
VERSION = 1
SBT_MAGIC = b"SBT1"

# magic, u32 version, u64 manifest length
_HEADER = struct.Struct("<4sIQ")
_SBT_HEADER = struct.Struct("<4sI")
_MAX_SBT_DIMS = 8


class CheckpointError(Exception):
    pass


class FormatError(CheckpointError):
    pass


class BadMagicError(FormatError):
    pass


class TruncationError(FormatError):
    pass


class DuplicateNameError(FormatError):
    pass


class UnknownDTypeError(FormatError):
    pass


class InheritanceError(CheckpointError):
    pass


class InheritanceDimensionError(InheritanceError, DimensionError):
    pass


ManifestEntry = namedtuple("ManifestEntry", ["name", "shape", "dtype", "offset"])


def _nbytes(shape, dtype):
    return int(np.prod(shape)) * dtype.itemsize


def _tensor_from_bytes(buffer, shape, dtype):
    little_endian = np.dtype(dtype.numpy_dtype).newbyteorder("<")
    array = np.frombuffer(buffer, dtype=little_endian).reshape(shape)
    return Tensor.wrap(array.astype(dtype.numpy_dtype), dtype)


def _parse_dtype(value):
    try:
        return DType(value)
    except ValueError:
        raise UnknownDTypeError("Unknown dtype {!r}".format(value))


class Checkpoint(Mapping):
    """Ordered, immutable store of named tensors.

    ``tensors`` is a mapping or an iterable of (name, Tensor) pairs; the
    order is kept in the manifest. ``metadata`` echoes the model
    configuration (variant, distilled, num_classes).
    """

    def __init__(self, tensors=(), metadata=None):
        items = tensors.items() if isinstance(tensors, Mapping) else tensors
        self._tensors = {}
        for name, tensor in items:
            if name in self._tensors:
                raise DuplicateNameError("Duplicate tensor name {!r}".format(name))
            if not isinstance(tensor, Tensor):
                raise TypeError("{!r} is not a Tensor".format(name))
            self._tensors[name] = tensor
        self.metadata = dict(metadata or {})

    def __getitem__(self, name):
        return self._tensors[name]

    def __iter__(self):
        return iter(self._tensors)

    def __len__(self):
        return len(self._tensors)

    def __repr__(self):
        return "Checkpoint({} tensors, metadata={})".format(len(self), self.metadata)

    @property
    def manifest(self):
        result = []
        offset = 0
        for name, tensor in self._tensors.items():
            result.append(ManifestEntry(name, tensor.shape, tensor.dtype, offset))
            offset += _nbytes(tensor.shape, tensor.dtype)
        return result

    @property
    def blob(self):
        return b"".join(tensor.tobytes() for tensor in self._tensors.values())

    def manifest_json(self):
        d = {
            "metadata": self.metadata,
            "tensors": [
                {
                    "name": entry.name,
                    "shape": list(entry.shape),
                    "dtype": entry.dtype.value,
                    "offset": entry.offset,
                }
                for entry in self.manifest
            ],
        }
        return json.dumps(d, sort_keys=True, separators=(",", ":"))

    def bitwise_equal(self, other):
        return (
            self.manifest == other.manifest
            and self.metadata == other.metadata
            and self.blob == other.blob
        )

    def to_bytes(self):
        manifest = self.manifest_json().encode("utf-8")
        return _HEADER.pack(MAGIC, VERSION, len(manifest)) + manifest + self.blob

    @classmethod
    def from_bytes(cls, data):
        if len(data) < _HEADER.size:
            if not data.startswith(MAGIC[: len(data)]):
                raise BadMagicError("Not a checkpoint file")
            raise TruncationError("Checkpoint header is truncated")
        magic, version, manifest_length = _HEADER.unpack_from(data)
        if magic != MAGIC:
            raise BadMagicError(
                "Bad magic {!r}; a checkpoint starts with {!r}".format(magic, MAGIC)
            )
        if version != VERSION:
            raise FormatError("Unsupported checkpoint version {}".format(version))
        start = _HEADER.size
        if len(data) < start + manifest_length:
            raise TruncationError("Checkpoint manifest is truncated")
        try:
            manifest = json.loads(data[start : start + manifest_length].decode("utf-8"))
            entries = [
                ManifestEntry(
                    e["name"], tuple(e["shape"]), _parse_dtype(e["dtype"]), e["offset"]
                )
                for e in manifest["tensors"]
            ]
            metadata = manifest["metadata"]
        except (ValueError, KeyError, TypeError) as e:
            raise FormatError("Malformed checkpoint manifest: {}".format(e))
        return cls.from_manifest(entries, data[start + manifest_length :], metadata)

    @classmethod
    def from_manifest(cls, entries, blob, metadata=None):
        """Create a checkpoint from manifest entries and the raw blob.

        The entries are checked for unique names and for byte ranges that do
        not overlap and lie within the blob.
        """
        names = set()
        end = 0
        tensors = []
        for entry in entries:
            if entry.name in names:
                raise DuplicateNameError(
                    "Duplicate tensor name {!r} in manifest".format(entry.name)
                )
            names.add(entry.name)
            if any(d < 1 for d in entry.shape) or not entry.shape:
                raise FormatError(
                    "Tensor {!r} has invalid shape {}".format(entry.name, entry.shape)
                )
            if entry.offset < end:
                raise FormatError(
                    "Tensor {!r} overlaps the previous tensor".format(entry.name)
                )
            end = entry.offset + _nbytes(entry.shape, entry.dtype)
            if end > len(blob):
                raise TruncationError(
                    "Blob is truncated: tensor {!r} needs bytes up to {} but the "
                    "blob has {}".format(entry.name, end, len(blob))
                )
            tensors.append(
                (
                    entry.name,
                    _tensor_from_bytes(
                        blob[entry.offset : end], entry.shape, entry.dtype
                    ),
                )
            )
        if end != len(blob):
            raise FormatError(
                "Blob has {} bytes after the last tensor".format(len(blob) - end)
            )
        return cls(tensors, metadata)


def save_checkpoint(ckpt, path):
    with open(path, "wb") as f:
        f.write(ckpt.to_bytes())
    logger.debug("Wrote checkpoint with {} tensors to {}".format(len(ckpt), path))


def load_checkpoint(path):
    with open(path, "rb") as f:
        return Checkpoint.from_bytes(f.read())


def sbt_bytes(tensor):
    dims = struct.pack("<{}I".format(tensor.ndim), *tensor.shape)
    return (
        _SBT_HEADER.pack(SBT_MAGIC, tensor.ndim)
        + dims
        + struct.pack("<B", tensor.dtype.code)
        + tensor.tobytes()
    )


def parse_sbt(data):
    if len(data) < _SBT_HEADER.size:
        raise TruncationError("SBT header is truncated")
    magic, ndim = _SBT_HEADER.unpack_from(data)
    if magic != SBT_MAGIC:
        raise BadMagicError(
            "Bad magic {!r}; a tensor file starts with {!r}".format(magic, SBT_MAGIC)
        )
    if not 1 <= ndim <= _MAX_SBT_DIMS:
        raise FormatError(
            "Tensor file declares {} dimensions; at most {} are supported".format(
                ndim, _MAX_SBT_DIMS
            )
        )
    offset = _SBT_HEADER.size
    if len(data) < offset + 4 * ndim + 1:
        raise TruncationError("SBT header is truncated")
    shape = struct.unpack_from("<{}I".format(ndim), data, offset)
    offset += 4 * ndim
    (code,) = struct.unpack_from("<B", data, offset)
    offset += 1
    try:
        dtype = DType.from_code(code)
    except ValueError:
        raise UnknownDTypeError("Unknown dtype code {}".format(code))
    if any(d < 1 for d in shape):
        raise FormatError("Tensor file has a zero dimension: {}".format(shape))
    expected = _nbytes(shape, dtype)
    payload = data[offset:]
    if len(payload) < expected:
        raise TruncationError(
            "Tensor data is truncated: expected {} bytes, found {}".format(
                expected, len(payload)
            )
        )
    if len(payload) > expected:
        raise FormatError(
            "Tensor file has {} bytes after the data".format(len(payload) - expected)
        )
    return _tensor_from_bytes(payload, shape, dtype)


def save_sbt(tensor, path):
    with open(path, "wb") as f:
        f.write(sbt_bytes(tensor))


def load_sbt(path):
    with open(path, "rb") as f:
        return parse_sbt(f.read())


def init_checkpoint(graph, seed, std=0.02, metadata=None):
    """Return a random checkpoint covering the parameters of graph.

    Weights, biases and token embeddings are drawn from N(0, std); LayerNorm
    gammas from 1 + N(0, std). Parameters are drawn in declaration order, so
    the result depends only on the graph and the seed.
    """
    rng = np.random.default_rng(seed)
    tensors = []
    for name, spec in graph.params.items():
        values = rng.normal(0.0, std, size=spec.shape)
        if name.endswith(".gamma"):
            values += 1.0
        tensors.append((name, Tensor(values.astype(np.float32))))
    return Checkpoint(tensors, metadata)


def _source_tensor(ckpt, source, target):
    try:
        return ckpt[source]
    except KeyError:
        raise InheritanceError(
            "Parameter {!r} needs {!r}, which is not in the checkpoint".format(
                target, source
            )
        )


def _inherit_param(ckpt, name, spec):
    directive = spec.directive
    if directive is not None and directive.action == "fill":
        return Tensor.wrap(
            np.full(spec.shape, directive.value, dtype=np.float32), DType.F32
        )
    source = name if directive is None or directive.source is None else directive.source
    tensor = _source_tensor(ckpt, source, name)
    if directive is None or directive.action == "copy":
        if tuple(tensor.shape) != tuple(spec.shape):
            raise InheritanceDimensionError(
                "{!r} has shape {} but {!r} needs {}".format(
                    source, tensor.shape, name, spec.shape
                )
            )
        return tensor
    if directive.action == "reshape":
        if tensor.size != int(np.prod(spec.shape)):
            raise InheritanceDimensionError(
                "{!r} of shape {} cannot be reshaped to {} for {!r}".format(
                    source, tensor.shape, spec.shape, name
                )
            )
        return Tensor.wrap(tensor.array.reshape(spec.shape), tensor.dtype)
    raise InheritanceError(
        "Unknown directive {!r} for parameter {!r}".format(directive.action, name)
    )


def _check_plan(lowered, plan):
    leftovers = [n.id for n in lowered.nodes if n.kind in ORIGINAL_ONLY_KINDS]
    if leftovers:
        raise InheritanceError(
            "The graph still has Linear/LayerNorm nodes {}".format(leftovers[:3])
        )
    for old_id, new_ids in plan.applied.items():
        missing = [i for i in new_ids if i not in lowered]
        if missing:
            raise InheritanceError(
                "The plan replaced {!r} with {}, which the graph lacks".format(
                    old_id, missing
                )
            )


def inherit_weights(ckpt, lowered, plan):
    """Map an original checkpoint onto the parameters of a lowered graph.

    Every parameter of the lowered graph is produced according to its
    directive: copied, reshaped exactly, or filled with a constant. No value
    is otherwise altered.
    """
    _check_plan(lowered, plan)
    tensors = [
        (name, _inherit_param(ckpt, name, spec))
        for name, spec in lowered.params.items()
    ]
    fills = sum(
        1 for spec in lowered.params.values()
        if spec.directive is not None and spec.directive.action == "fill"
    )
    logger.info(
        "Inherited {} parameters ({} synthesized constants)".format(len(tensors), fills)
    )
    return Checkpoint(tensors, ckpt.metadata)
