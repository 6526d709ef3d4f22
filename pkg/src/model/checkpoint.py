"""
Spatial Forcing Lab - Checkpoints

Binary checkpoint: magic "SFCK", u8 version, u32-length-prefixed ModelConfig
JSON, u32 blob count, then per blob a u16-length-prefixed UTF-8 name, u8 rank,
u32 dims and little-endian f64 data.
"""
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np
import structlog
from pydantic import ValidationError

from src.config import ModelConfig
from src.exceptions import FormatError
from src.model.params import VLAParams
from src.utils.binary_io import BinaryReader, BinaryWriter


logger = structlog.get_logger(__name__)


CHECKPOINT_MAGIC = b"SFCK"
CHECKPOINT_VERSION = 1
EXTRA_PREFIX = "sf/"


@dataclass
class Checkpoint:
    """Backbone parameters plus optional alignment-head state stored under ``sf/``."""
    config: ModelConfig
    params: VLAParams
    extras: dict[str, np.ndarray] = field(default_factory=dict)

    @property
    def has_projector(self) -> bool:
        return bool(self.extras)


def save_checkpoint(
    path: str | Path,
    params: VLAParams,
    extras: Optional[dict[str, np.ndarray]] = None,
) -> None:
    """
    Write parameters (and ``sf/``-prefixed extras) to ``path``.

    Args:
        path: Output file
        params: Backbone and head parameters
        extras: Alignment-head arrays; every key must start with ``sf/``
    """
    extras = extras or {}
    for name in extras:
        if not name.startswith(EXTRA_PREFIX):
            raise ValueError(f"extra blob {name!r} must use the {EXTRA_PREFIX!r} prefix")

    writer = BinaryWriter()
    writer.raw(CHECKPOINT_MAGIC)
    writer.u8(CHECKPOINT_VERSION)
    config_json = params.config.model_dump_json().encode("utf-8")
    writer.u32(len(config_json))
    writer.raw(config_json)

    blobs = {**params.state_dict(), **extras}
    writer.u32(len(blobs))
    for name, array in blobs.items():
        encoded = name.encode("utf-8")
        array = np.asarray(array, dtype=np.float64)
        writer.u16(len(encoded))
        writer.raw(encoded)
        writer.u8(array.ndim)
        for dim in array.shape:
            writer.u32(dim)
        writer.f64_array(array)

    writer.save(path)
    logger.info("Checkpoint saved", path=str(path), blobs=len(blobs), extras=len(extras))


def load_checkpoint(path: str | Path) -> Checkpoint:
    """
    Read a checkpoint written by ``save_checkpoint``.

    Raises:
        BadMagicError, VersionMismatchError, UnexpectedEOFError: Corrupt file
        FormatError: Unreadable config or parameter set
    """
    reader = BinaryReader.open(path)
    reader.expect_magic(CHECKPOINT_MAGIC)
    reader.expect_version(CHECKPOINT_VERSION)

    config_raw = reader.read(reader.u32())
    try:
        config = ModelConfig.model_validate_json(config_raw)
    except ValidationError as e:
        raise FormatError(f"invalid model config: {e.errors()[0].get('msg')}", path=str(path)) from e

    state: dict[str, np.ndarray] = {}
    extras: dict[str, np.ndarray] = {}
    for _ in range(reader.u32()):
        try:
            name = reader.read(reader.u16()).decode("utf-8")
        except UnicodeDecodeError as e:
            raise FormatError("blob name is not UTF-8", path=str(path)) from e
        shape = tuple(reader.u32() for _ in range(reader.u8()))
        array = reader.f64_array(shape)
        (extras if name.startswith(EXTRA_PREFIX) else state)[name] = array

    if reader.remaining:
        raise FormatError(f"{reader.remaining} trailing bytes", path=str(path))

    try:
        params = VLAParams.from_state_dict(config, state)
    except (KeyError, ValueError) as e:
        raise FormatError(str(e), path=str(path)) from e

    logger.info("Checkpoint loaded", path=str(path), blobs=len(state) + len(extras))
    return Checkpoint(config=config, params=params, extras=extras)
