"""
Binary model checkpoints.

Layout (little-endian): magic "MAGK", version u32, header length u32, JSON
header (architecture, model config, schedule kind/T, dtype), record count u32,
then records of (name length u32, name, dtype tag u8, rank u32, dims u32 x rank,
raw values). Records hold parameters, optimizer moments, normalization
statistics and the beta table.
"""

import logging
import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Dict, Optional, Union

import numpy as np
import orjson

from services.config import ModelConfig
from services.dataio import NormStats
from services.diffusion import NoiseSchedule, schedule_from_beta
from services.errors import ConfigMismatch, CorruptCheckpoint
from services.model import ARCH_VERSION, ARCHITECTURE, MageModel

logger = logging.getLogger(__name__)

MAGIC = b"MAGK"
VERSION = 1
DTYPE_TAGS = {0: np.dtype("<f4"), 1: np.dtype("<f8"), 2: np.dtype("<i8")}
TAG_OF = {np.dtype("float32"): 0, np.dtype("float64"): 1, np.dtype("int64"): 2}
ARCH_FIELDS = ("latent_dim", "blocks", "window", "stages", "fusion")


@dataclass
class Checkpoint:
    config: ModelConfig
    stats: NormStats
    sched: NoiseSchedule
    tensors: Dict[str, np.ndarray]
    dtype: np.dtype

    def build_model(self) -> MageModel:
        model = MageModel(self.config, dtype=self.dtype)
        model.store.load_state_dict(self.tensors)
        return model


def save_checkpoint(
    path: Union[str, Path],
    model: MageModel,
    stats: NormStats,
    sched: NoiseSchedule,
) -> None:
    header = {
        "architecture": ARCHITECTURE,
        "arch_version": ARCH_VERSION,
        "model": model.config.model_dump(mode="json"),
        "schedule": {"kind": sched.kind, "T": sched.T},
        "dtype": np.dtype(model.dtype).name,
    }
    tensors = dict(model.store.state_dict())
    tensors.update(stats.to_tensors())
    tensors["schedule/beta"] = sched.beta

    head = orjson.dumps(header)
    chunks = [MAGIC, struct.pack("<II", VERSION, len(head)), head, struct.pack("<I", len(tensors))]
    for name, value in tensors.items():
        arr = np.asarray(value)
        tag = TAG_OF.get(arr.dtype)
        if tag is None:
            arr = arr.astype(np.float64)
            tag = 1
        raw_name = name.encode("utf-8")
        chunks.append(struct.pack("<I", len(raw_name)))
        chunks.append(raw_name)
        chunks.append(struct.pack("<BI", tag, arr.ndim))
        chunks.append(struct.pack(f"<{arr.ndim}I", *arr.shape))
        chunks.append(np.ascontiguousarray(arr, dtype=DTYPE_TAGS[tag]).tobytes())
    Path(path).write_bytes(b"".join(chunks))
    logger.info("saved checkpoint %s (%d records)", path, len(tensors))


class _Reader:
    def __init__(self, data: bytes):
        self.data = data
        self.pos = 0

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.data):
            raise CorruptCheckpoint("checkpoint is truncated")
        out = self.data[self.pos : self.pos + n]
        self.pos += n
        return out

    def unpack(self, fmt: str):
        size = struct.calcsize(fmt)
        return struct.unpack(fmt, self.take(size))


def load_checkpoint(path: Union[str, Path], expected: Optional[ModelConfig] = None) -> Checkpoint:
    """
    Read a checkpoint written by save_checkpoint.

    Args:
        path: checkpoint file
        expected: if given, the architecture must match it

    Raises:
        CorruptCheckpoint: unreadable, truncated or malformed file
        ConfigMismatch: architecture differs from `expected` or from this build
    """
    try:
        data = Path(path).read_bytes()
    except OSError as e:
        raise CorruptCheckpoint(f"cannot read checkpoint {path}: {e}") from e
    r = _Reader(data)
    if r.take(4) != MAGIC:
        raise CorruptCheckpoint(f"{path}: bad magic")
    version, head_len = r.unpack("<II")
    if version != VERSION:
        raise CorruptCheckpoint(f"{path}: unsupported checkpoint version {version}")
    try:
        header = orjson.loads(r.take(head_len))
        config = ModelConfig.model_validate(header["model"])
        kind = header["schedule"]["kind"]
        dtype = np.dtype(header["dtype"])
    except (orjson.JSONDecodeError, KeyError, TypeError, ValueError) as e:
        raise CorruptCheckpoint(f"{path}: malformed header: {e}") from e

    tensors: Dict[str, np.ndarray] = {}
    (count,) = r.unpack("<I")
    for _ in range(count):
        (name_len,) = r.unpack("<I")
        name = r.take(name_len).decode("utf-8", errors="replace")
        tag, rank = r.unpack("<BI")
        if tag not in DTYPE_TAGS:
            raise CorruptCheckpoint(f"{path}: unknown dtype tag {tag} for '{name}'")
        dims = r.unpack(f"<{rank}I")
        dt = DTYPE_TAGS[tag]
        n = int(np.prod(dims)) if rank else 1
        tensors[name] = np.frombuffer(r.take(n * dt.itemsize), dtype=dt).reshape(dims).copy()
    if r.pos != len(data):
        raise CorruptCheckpoint(f"{path}: {len(data) - r.pos} trailing bytes")

    if header.get("architecture") != ARCHITECTURE or header.get("arch_version") != ARCH_VERSION:
        raise ConfigMismatch(
            f"{path}: architecture {header.get('architecture')} v{header.get('arch_version')} "
            f"is not {ARCHITECTURE} v{ARCH_VERSION}"
        )
    if expected is not None:
        for field in ARCH_FIELDS:
            have, want = getattr(config, field), getattr(expected, field)
            if have != want:
                raise ConfigMismatch(f"{path}: checkpoint {field}={have} but config expects {want}")

    try:
        stats = NormStats.from_tensors(tensors)
        sched = schedule_from_beta(tensors["schedule/beta"], kind)
    except KeyError as e:
        raise CorruptCheckpoint(f"{path}: missing record {e}") from e
    missing = [k for k in MageModel(config, dtype=dtype).store.names() if f"param/{k}" not in tensors]
    if missing:
        raise CorruptCheckpoint(f"{path}: missing parameters {missing[:3]}")
    return Checkpoint(config=config, stats=stats, sched=sched, tensors=tensors, dtype=dtype)
