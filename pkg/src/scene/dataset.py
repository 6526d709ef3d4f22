"""
Spatial Forcing Lab - Episode Dataset

Binary episode container: magic "SFDS", version 1, little-endian.
"""
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterator, Sequence

import structlog

from src.exceptions import DatasetMismatchError, FormatError
from src.scene.models import Difficulty, Episode, RenderOutput, Step
from src.utils.binary_io import BinaryReader, BinaryWriter


logger = structlog.get_logger(__name__)


DATASET_MAGIC = b"SFDS"
DATASET_VERSION = 1


@dataclass
class Dataset:
    """Episodes plus the header that describes them."""
    difficulty: Difficulty
    height: int
    width: int
    n_views: int
    episodes: list[Episode] = field(default_factory=list)

    def __len__(self) -> int:
        return len(self.episodes)

    def __iter__(self) -> Iterator[Episode]:
        return iter(self.episodes)

    def __getitem__(self, index: int) -> Episode:
        return self.episodes[index]

    @property
    def n_steps(self) -> int:
        return sum(len(e.steps) for e in self.episodes)


def _layout_of(episodes: Sequence[Episode]) -> tuple[int, int, int]:
    for index, episode in enumerate(episodes):
        if not episode.steps:
            raise DatasetMismatchError(f"episode {index} has no steps")
    first = episodes[0].steps[0].views
    layout = (first[0].height, first[0].width, len(first))
    for index, episode in enumerate(episodes):
        for step in episode.steps:
            views = step.views
            if (views[0].height, views[0].width, len(views)) != layout or any(
                v.depth.shape != views[0].depth.shape for v in views
            ):
                raise DatasetMismatchError(
                    f"episode {index} does not share the camera configuration {layout}"
                )
    return layout


def _write_view(writer: BinaryWriter, view: RenderOutput) -> None:
    writer.f32_array(view.image)
    writer.f32_array(view.depth)
    writer.f32_array(view.pointmap)
    writer.bits(view.mask)


def write_dataset(episodes: Sequence[Episode], path: str | Path, difficulty: Difficulty) -> None:
    """
    Serialise episodes sharing one difficulty and camera configuration.

    Args:
        episodes: Non-empty episode list
        path: Output file
        difficulty: Scene distribution the episodes were drawn from
    """
    if not episodes:
        raise DatasetMismatchError("cannot write an empty dataset")
    height, width, n_views = _layout_of(episodes)

    writer = BinaryWriter()
    writer.raw(DATASET_MAGIC)
    writer.u8(DATASET_VERSION)
    writer.u32(len(episodes))
    writer.u16(height)
    writer.u16(width)
    writer.u8(n_views)
    writer.u8(Difficulty(difficulty).code)

    for episode in episodes:
        writer.u8(len(episode.instruction_ids))
        for token in episode.instruction_ids:
            writer.u16(token)
        writer.u8(len(episode.steps))
        writer.u8(1 if episode.success else 0)
        for step in episode.steps:
            writer.f32_array(step.ee_pos)
            writer.f32_array(step.expert_action)
            for view in step.views:
                _write_view(writer, view)

    writer.save(path)
    logger.info(
        "Dataset written",
        path=str(path),
        episodes=len(episodes),
        difficulty=Difficulty(difficulty).value,
        bytes=len(writer),
    )


def _read_view(reader: BinaryReader, height: int, width: int) -> RenderOutput:
    return RenderOutput(
        image=reader.f32_array((height, width, 3)),
        depth=reader.f32_array((height, width)),
        pointmap=reader.f32_array((height, width, 3)),
        mask=reader.bits((height, width)),
    )


def read_dataset(path: str | Path) -> Dataset:
    """
    Read a dataset file.

    Raises:
        BadMagicError: Wrong leading bytes
        VersionMismatchError: Unsupported format version
        UnexpectedEOFError: File truncated mid-record
    """
    reader = BinaryReader.open(path)
    reader.expect_magic(DATASET_MAGIC)
    reader.expect_version(DATASET_VERSION)

    count = reader.u32()
    height = reader.u16()
    width = reader.u16()
    n_views = reader.u8()
    try:
        difficulty = Difficulty.from_code(reader.u8())
    except ValueError as e:
        raise FormatError(str(e), path=str(path)) from e

    episodes = []
    for _ in range(count):
        n_tokens = reader.u8()
        ids = [reader.u16() for _ in range(n_tokens)]
        n_steps = reader.u8()
        success = reader.u8() == 1
        steps = []
        for _ in range(n_steps):
            ee_pos = reader.f32_array((3,))
            action = reader.f32_array((4,))
            views = [_read_view(reader, height, width) for _ in range(n_views)]
            steps.append(Step(views=views, ee_pos=ee_pos, expert_action=action))
        episodes.append(Episode(scene=None, instruction_ids=ids, steps=steps, success=success))

    if reader.remaining:
        raise FormatError(f"{reader.remaining} trailing bytes after the last episode", path=str(path))

    logger.info("Dataset loaded", path=str(path), episodes=count, difficulty=difficulty.value)
    return Dataset(
        difficulty=difficulty,
        height=height,
        width=width,
        n_views=n_views,
        episodes=episodes,
    )
