"""
Binary checkpoint format.

Layout (all integers little-endian)::

    b"MVLT"                      magic
    u32                          format version (1)
    u32 + bytes                  model config, canonical JSON
    u32                          tensor count
    per tensor:
        u32 + bytes              name, UTF-8
        u32                      rank
        u64 * rank               dims
        f64 * prod(dims)         data, row-major
    u8                           optimizer flag (0 or 1)
    if flag:
        u64                      AdamW step counter
        per tensor, same order:  f64 first moment, then f64 second moment
    u32 + bytes                  rng state, canonical JSON
    u64                          training step

The whole file is parsed and validated before anything is returned, so a
damaged file never leaves a partially loaded model behind.
"""

import json
import logging
import os
import struct
from collections import OrderedDict
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Dict, List, Optional, Union

import numpy as np

from .config import ModelConfig
from .errors import CheckpointError, ConfigError, ContractError
from .model import MvltModel
from .optim import AdamWState
from .utils import format_file_size


logger = logging.getLogger(__name__)

MAGIC = b"MVLT"
FORMAT_VERSION = 1


@dataclass
class Checkpoint:
    model_config: ModelConfig
    tensors: "OrderedDict[str, np.ndarray]"
    optimizer: Optional[AdamWState] = None
    rng_state: Dict[str, Any] = field(default_factory=dict)
    step: int = 0

    @property
    def trained_iterations(self) -> Optional[int]:
        """The correction count K a fine-tuning run trained with, if it recorded one."""
        value = self.rng_state.get("iterations")
        if value is None:
            return None
        if isinstance(value, bool) or not isinstance(value, int) or value < 0:
            raise CheckpointError(f"stored iteration count must be a non-negative integer, got {value!r}")
        return value


def _json_bytes(data: Any) -> bytes:
    return json.dumps(data, sort_keys=True, separators=(",", ":")).encode("utf-8")


def encode_checkpoint(checkpoint: Checkpoint) -> bytes:
    parts: List[bytes] = [MAGIC, struct.pack("<I", FORMAT_VERSION)]
    config = _json_bytes(checkpoint.model_config.to_dict())
    parts += [struct.pack("<I", len(config)), config]
    parts.append(struct.pack("<I", len(checkpoint.tensors)))
    for name, array in checkpoint.tensors.items():
        encoded_name = name.encode("utf-8")
        array = np.ascontiguousarray(array, dtype="<f8")
        parts += [struct.pack("<I", len(encoded_name)), encoded_name, struct.pack("<I", array.ndim)]
        parts += [struct.pack("<Q", dim) for dim in array.shape]
        parts.append(array.tobytes())

    state = checkpoint.optimizer
    if state is None:
        parts.append(struct.pack("<B", 0))
    else:
        parts += [struct.pack("<B", 1), struct.pack("<Q", state.t)]
        for name, array in checkpoint.tensors.items():
            for moments in (state.m, state.v):
                moment = moments.get(name)
                if moment is None or moment.shape != array.shape:
                    raise ContractError(f"optimizer state for {name} is missing or has the wrong shape")
                parts.append(np.ascontiguousarray(moment, dtype="<f8").tobytes())

    rng = _json_bytes(checkpoint.rng_state)
    parts += [struct.pack("<I", len(rng)), rng, struct.pack("<Q", checkpoint.step)]
    return b"".join(parts)


class _Reader:
    def __init__(self, data: bytes):
        self.data = data
        self.offset = 0

    def take(self, n: int) -> bytes:
        end = self.offset + n
        if end > len(self.data):
            raise CheckpointError(f"checkpoint truncated at byte {self.offset} (needed {n} more)")
        chunk = self.data[self.offset:end]
        self.offset = end
        return chunk

    def unpack(self, fmt: str) -> int:
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))[0]

    def json(self) -> Any:
        raw = self.take(self.unpack("<I"))
        try:
            return json.loads(raw.decode("utf-8"))
        except ValueError as e:
            raise CheckpointError(f"corrupt JSON section in checkpoint: {e}") from e

    def array(self, shape: tuple) -> np.ndarray:
        count = int(np.prod(shape)) if shape else 1
        return np.frombuffer(self.take(8 * count), dtype="<f8").astype(np.float64).reshape(shape)


def decode_checkpoint(data: bytes) -> Checkpoint:
    reader = _Reader(data)
    if reader.take(4) != MAGIC:
        raise CheckpointError("not an MVLT checkpoint (bad magic bytes)")
    version = reader.unpack("<I")
    if version != FORMAT_VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version}; expected {FORMAT_VERSION}")
    try:
        config = ModelConfig.from_dict(reader.json())
    except ConfigError as e:
        raise CheckpointError(f"checkpoint carries an invalid model config: {e}") from e

    tensors: "OrderedDict[str, np.ndarray]" = OrderedDict()
    for _ in range(reader.unpack("<I")):
        try:
            name = reader.take(reader.unpack("<I")).decode("utf-8")
        except UnicodeDecodeError as e:
            raise CheckpointError(f"corrupt tensor name in checkpoint: {e}") from e
        rank = reader.unpack("<I")
        shape = tuple(reader.unpack("<Q") for _ in range(rank))
        if name in tensors:
            raise CheckpointError(f"duplicate tensor {name} in checkpoint")
        tensors[name] = reader.array(shape)

    optimizer = None
    flag = reader.unpack("<B")
    if flag not in (0, 1):
        raise CheckpointError(f"bad optimizer flag {flag}")
    if flag:
        optimizer = AdamWState(t=reader.unpack("<Q"))
        for name, array in tensors.items():
            optimizer.m[name] = reader.array(array.shape)
            optimizer.v[name] = reader.array(array.shape)

    rng_state = reader.json()
    step = reader.unpack("<Q")
    if reader.offset != len(data):
        raise CheckpointError(f"{len(data) - reader.offset} trailing bytes after checkpoint")
    return Checkpoint(config, tensors, optimizer, rng_state, step)


def write_checkpoint(path: Union[str, Path], checkpoint: Checkpoint) -> Path:
    """Write atomically: a temporary file is renamed into place."""
    path = Path(path)
    payload = encode_checkpoint(checkpoint)
    tmp = path.with_name(path.name + ".tmp")
    try:
        path.parent.mkdir(parents=True, exist_ok=True)
        with open(tmp, "wb") as f:
            f.write(payload)
        os.replace(tmp, path)
    except OSError as e:
        raise CheckpointError(f"cannot write checkpoint: {e}", str(path)) from e
    logger.info(f"✓ Saved checkpoint {path} ({format_file_size(len(payload))}, step {checkpoint.step})")
    return path


def save_checkpoint(path: Union[str, Path], model: MvltModel, optimizer: Optional[AdamWState] = None,
                    rng_state: Optional[Dict[str, Any]] = None, step: int = 0) -> Path:
    checkpoint = Checkpoint(
        model_config=model.config,
        tensors=OrderedDict((name, p.data.copy()) for name, p in model.store.items()),
        optimizer=optimizer,
        rng_state=dict(rng_state or {}),
        step=step,
    )
    return write_checkpoint(path, checkpoint)


def load_checkpoint(path: Union[str, Path]) -> Checkpoint:
    path = Path(path)
    try:
        data = path.read_bytes()
    except OSError as e:
        raise CheckpointError(f"cannot read checkpoint: {e}", str(path)) from e
    checkpoint = decode_checkpoint(data)
    logger.debug(f"Loaded checkpoint {path} at step {checkpoint.step}")
    return checkpoint


def restore_model(checkpoint: Checkpoint) -> MvltModel:
    """Build a model from the checkpoint's config and copy its tensors in."""
    model = MvltModel(checkpoint.model_config)
    try:
        model.store.load_arrays(checkpoint.tensors)
    except ContractError as e:
        raise CheckpointError(f"checkpoint does not match its model config: {e}") from e
    return model
