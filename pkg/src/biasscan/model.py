"""The fixed MNIST CNN, its loss, and checkpoint (de)serialization.

Architecture (convolutions run channels-last internally; kernels are stored
k x k x C_in x C_out and the flattened features are ordered row, column,
channel)::

    conv 5x5 (1->16, pad 2) -> relu -> maxpool 2
    conv 5x5 (16->32, pad 2) -> relu -> maxpool 2
    flatten -> dense (1568 -> 10)

Checkpoint byte layout (all integers little-endian)::

    magic     8 bytes   b"BSCKPT\\x00\\x01"
    hlen      uint32    length of the JSON header in bytes
    header    hlen      UTF-8 JSON, keys sorted
    payload   ...       float32 LE parameters, concatenated in header order

The header carries ``format_version``, ``fingerprint``, ``params`` (name and
shape per tensor), ``payload_bytes``, ``payload_crc32`` and ``metadata``.
"""

from __future__ import annotations

import json
import struct
import zlib
from collections import OrderedDict
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import tensor as T
from .tensor import DTYPE, NUM_CLASSES, Tensor

IMAGE_SHAPE = (1, 28, 28)
FINGERPRINT = (
    "cnn/v1:conv5x5(1->16,pad2)-relu-maxpool2-conv5x5(16->32,pad2)-relu-maxpool2"
    "-flatten-dense(1568->10)"
)
FORMAT_VERSION = 1
MAGIC = b"BSCKPT\x00\x01"

# (name, shape, fan_in)
_LAYOUT = (
    ("conv1.weight", (5, 5, 1, 16), 25),
    ("conv1.bias", (16,), 25),
    ("conv2.weight", (5, 5, 16, 32), 400),
    ("conv2.bias", (32,), 400),
    ("fc.weight", (10, 1568), 1568),
    ("fc.bias", (10,), 1568),
)


class CheckpointError(Exception):
    pass


class VersionMismatch(CheckpointError):
    pass


class FingerprintMismatch(CheckpointError):
    pass


class CorruptPayload(CheckpointError):
    pass


@dataclass
class CnnModel:
    params: "OrderedDict[str, np.ndarray]"
    fingerprint: str = FINGERPRINT
    metadata: dict = field(default_factory=dict)

    def copy(self) -> "CnnModel":
        return CnnModel(
            OrderedDict((k, v.copy()) for k, v in self.params.items()),
            self.fingerprint,
            dict(self.metadata),
        )

    def num_parameters(self) -> int:
        return sum(v.size for v in self.params.values())

    def forward(self, x: Tensor, params: dict[str, Tensor] | None = None) -> Tensor:
        """Logits for a batch ``x`` of shape N x 1 x 28 x 28.

        ``params`` lets the trainer pass gradient-tracking parameter tensors;
        by default the stored arrays are wrapped read-only, so only the input
        can receive gradients.
        """
        if params is None:
            params = {k: Tensor(v) for k, v in self.params.items()}
        # a single channel makes N x 1 x 28 x 28 and N x 28 x 28 x 1 the same buffer
        h = T.reshape(x, (x.shape[0], 28, 28, 1))
        h = T.conv2d(h, params["conv1.weight"], params["conv1.bias"], padding=2)
        h = T.maxpool2x2(T.relu(h))
        h = T.conv2d(h, params["conv2.weight"], params["conv2.bias"], padding=2)
        h = T.maxpool2x2(T.relu(h))
        return T.dense(T.flatten(h), params["fc.weight"], params["fc.bias"])

    __call__ = forward

    def predict(self, images: np.ndarray, batch_size: int = 500) -> np.ndarray:
        images = _as_batch(images)
        out = np.empty(len(images), dtype=np.int64)
        for i in range(0, len(images), batch_size):
            z = self.forward(Tensor(images[i:i + batch_size])).data
            out[i:i + batch_size] = z.argmax(axis=1)
        return out


def _as_batch(x) -> np.ndarray:
    arr = x.data if isinstance(x, Tensor) else np.asarray(x, dtype=DTYPE)
    if arr.shape == IMAGE_SHAPE:
        return arr[None]
    if arr.ndim != 4 or arr.shape[1:] != IMAGE_SHAPE:
        raise T.ShapeError(f"model input must be 1x28x28 or Nx1x28x28, got {arr.shape}")
    return arr


def build_cnn(seed: int = 0) -> CnnModel:
    """Fresh model with fan-in scaled uniform init in +-sqrt(1/fan_in)."""
    rng = np.random.default_rng(seed)
    params = OrderedDict()
    for name, shape, fan_in in _LAYOUT:
        bound = np.sqrt(1.0 / fan_in)
        params[name] = rng.uniform(-bound, bound, size=shape).astype(DTYPE)
    return CnnModel(params, metadata={"init_seed": int(seed)})


def logits(m: CnnModel, x) -> Tensor:
    """Logits of shape (10,) for a single image or (k, 10) for a batch.

    Differentiable with respect to ``x`` when ``x`` is a requires-grad tensor
    under an active tape.
    """
    single = (x.shape if isinstance(x, Tensor) else np.shape(x)) == IMAGE_SHAPE
    if isinstance(x, Tensor):
        if single:
            raise T.ShapeError("pass a batched 1x1x28x28 tensor when tracking gradients")
        xt = x
        _as_batch(x.data)
    else:
        xt = Tensor(_as_batch(x))
    z = m.forward(xt)
    return Tensor(z.data[0]) if single else z


def loss_J(m: CnnModel, x, y) -> Tensor:
    """Softmax cross-entropy of the model on ``x`` against category ``y``."""
    y = T._check_category(y, "y")
    xt = x if isinstance(x, Tensor) else Tensor(_as_batch(x))
    return T.softmax_cross_entropy(m.forward(xt), y, reduction="mean")


# --------------------------------------------------------------------------
# checkpoints
# --------------------------------------------------------------------------


def save_checkpoint(m: CnnModel, path, metadata: dict | None = None) -> dict:
    meta = dict(m.metadata)
    if metadata:
        meta.update(metadata)
    payload = b"".join(v.astype("<f4").tobytes() for v in m.params.values())
    header = {
        "format_version": FORMAT_VERSION,
        "fingerprint": m.fingerprint,
        "params": [{"name": k, "shape": list(v.shape)} for k, v in m.params.items()],
        "payload_bytes": len(payload),
        "payload_crc32": zlib.crc32(payload),
        "metadata": meta,
    }
    hbytes = json.dumps(header, sort_keys=True).encode("utf-8")
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_bytes(MAGIC + struct.pack("<I", len(hbytes)) + hbytes + payload)
    tmp.replace(path)
    return header


def load_checkpoint(path, expected_fingerprint: str = FINGERPRINT) -> CnnModel:
    raw = Path(path).read_bytes()
    if len(raw) < len(MAGIC) + 4 or raw[:len(MAGIC)] != MAGIC:
        raise CorruptPayload(f"{path}: not a checkpoint file (bad magic)")
    (hlen,) = struct.unpack_from("<I", raw, len(MAGIC))
    start = len(MAGIC) + 4
    try:
        header = json.loads(raw[start:start + hlen].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CorruptPayload(f"{path}: unreadable header ({exc})") from None
    if header.get("format_version") != FORMAT_VERSION:
        raise VersionMismatch(
            f"{path}: format version {header.get('format_version')} != {FORMAT_VERSION}")
    if header.get("fingerprint") != expected_fingerprint:
        raise FingerprintMismatch(
            f"{path}: architecture {header.get('fingerprint')!r} != {expected_fingerprint!r}")
    payload = raw[start + hlen:]
    if len(payload) != header["payload_bytes"]:
        raise CorruptPayload(
            f"{path}: payload has {len(payload)} bytes, header says {header['payload_bytes']}")
    if zlib.crc32(payload) != header["payload_crc32"]:
        raise CorruptPayload(f"{path}: payload checksum mismatch")
    params = OrderedDict()
    offset = 0
    for spec in header["params"]:
        shape = tuple(spec["shape"])
        count = int(np.prod(shape))
        arr = np.frombuffer(payload, dtype="<f4", count=count, offset=offset)
        params[spec["name"]] = arr.astype(DTYPE).reshape(shape)
        offset += 4 * count
    expected = [(name, shape) for name, shape, _ in _LAYOUT]
    if [(k, v.shape) for k, v in params.items()] != expected:
        raise CorruptPayload(f"{path}: parameter layout does not match the architecture")
    return CnnModel(params, header["fingerprint"], header.get("metadata", {}))
