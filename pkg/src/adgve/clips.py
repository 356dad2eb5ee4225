from __future__ import annotations

from dataclasses import dataclass

from .errors import InsufficientFrames


@dataclass(frozen=True)
class ClipRange:
    index: int
    start: int
    end: int  # exclusive
    key_frame: int

    def __len__(self) -> int:
        return self.end - self.start

    def frames(self) -> range:
        return range(self.start, self.end)


def split_clips(num_frames: int, num_clips: int = 8) -> list[ClipRange]:
    """Split ``[0, num_frames)`` into ``num_clips`` contiguous near-equal clips.

    The first ``num_frames % num_clips`` clips are one frame longer. Each key
    frame sits at offset ``len // 2`` inside its clip.
    """
    if num_clips < 1:
        raise InsufficientFrames(f"need at least one clip, got {num_clips}")
    if num_frames < num_clips:
        raise InsufficientFrames(f"{num_frames} frames cannot fill {num_clips} clips")
    base, extra = divmod(num_frames, num_clips)
    clips = []
    start = 0
    for m in range(num_clips):
        length = base + (1 if m < extra else 0)
        clips.append(ClipRange(m, start, start + length, start + length // 2))
        start += length
    return clips
