#!/usr/bin/env python3
"""
Data Bank: Expert Videos and Interaction Transitions

Containers for action-free expert videos and reward-free interaction
transitions, the UPSV on-disk container, and batch samplers that attach
history frames.

Observations are stored as 8-bit fixed point (value * 255, rounded) and
converted back to [0, 1] floats when a batch is sampled.

Usage:
    python databank.py experts.upsv     # print header fields of a dataset
"""

import hashlib
import struct
import threading
from dataclasses import dataclass, field
from functools import cached_property
from pathlib import Path
from typing import Dict, Iterator, Optional, Tuple, Union

import numpy as np
import torch

MAGIC = b'UPSV'
FORMAT_VERSION = 1
DTYPE_U8 = 0
NO_ACTION = 255

_PREAMBLE = struct.Struct('<4sBBH')
_SHAPE = struct.Struct('<IIII')
_COUNT = struct.Struct('<I')

PathLike = Union[str, Path]


class DatasetFormatError(ValueError):
    """Raised when a UPSV file does not match the container layout."""


class EmptyDatasetError(ValueError):
    """Raised when sampling from a dataset or buffer with nothing to sample."""


def to_uint8(obs: np.ndarray) -> np.ndarray:
    """Quantize [0, 1] observations to 8-bit fixed point."""
    return np.rint(np.clip(obs, 0.0, 1.0) * 255.0).astype(np.uint8)


def to_float(frames: np.ndarray, dtype: torch.dtype = torch.float32) -> torch.Tensor:
    """Convert 8-bit frames to a [0, 1] tensor."""
    return torch.from_numpy(np.ascontiguousarray(frames)).to(dtype) / 255.0


@dataclass
class VideoDataset:
    """Ordered expert frames with episode boundaries; actions only on held-out copies."""
    frames: np.ndarray
    episode_starts: np.ndarray
    meta: Dict[str, object] = field(default_factory=dict)
    actions: Optional[np.ndarray] = None

    def __post_init__(self):
        self.frames = np.asarray(self.frames, dtype=np.uint8)
        self.episode_starts = np.asarray(self.episode_starts, dtype=np.int64)
        if self.frames.ndim != 4:
            raise ValueError(f"frames must be (n, C, H, W), got shape {self.frames.shape}")
        if len(self.frames) == 0:
            raise ValueError("dataset has no frames")
        starts = self.episode_starts
        if len(starts) == 0 or starts[0] != 0:
            raise ValueError("episode_starts must begin with 0")
        if np.any(np.diff(starts) <= 0):
            raise ValueError("episode_starts must be strictly increasing")
        if np.any(self.episode_lengths < 2):
            raise ValueError("every episode must have at least 2 frames")
        if self.actions is not None:
            self.actions = np.asarray(self.actions, dtype=np.uint8)
            if self.actions.shape != (len(self.frames),):
                raise ValueError(f"actions must align with {len(self.frames)} frames")

    @property
    def n_frames(self) -> int:
        return len(self.frames)

    @property
    def obs_shape(self) -> Tuple[int, int, int]:
        return tuple(self.frames.shape[1:])

    @property
    def episode_ends(self) -> np.ndarray:
        return np.append(self.episode_starts[1:], self.n_frames)

    @property
    def episode_lengths(self) -> np.ndarray:
        return self.episode_ends - self.episode_starts

    @cached_property
    def frame_episode_start(self) -> np.ndarray:
        """Start index of the episode each frame belongs to."""
        return np.repeat(self.episode_starts, self.episode_lengths)

    @cached_property
    def valid_pair_starts(self) -> np.ndarray:
        """Indices t whose successor t+1 lies in the same episode."""
        mask = np.ones(self.n_frames, dtype=bool)
        mask[self.episode_ends - 1] = False
        return np.flatnonzero(mask).astype(np.int64)


@dataclass
class PairBatch:
    """Index-aligned (o_t, o_t1, o_hist) tensors; o_hist is oldest first."""
    o_t: torch.Tensor
    o_t1: torch.Tensor
    o_hist: torch.Tensor
    indices: np.ndarray

    def __len__(self) -> int:
        return len(self.o_t)

    def to(self, dtype: torch.dtype) -> 'PairBatch':
        return PairBatch(self.o_t.to(dtype), self.o_t1.to(dtype), self.o_hist.to(dtype), self.indices)


@dataclass
class TransitionBatch(PairBatch):
    """Pair batch with the logged ground-truth actions."""
    actions: torch.Tensor = None

    def to(self, dtype: torch.dtype) -> 'TransitionBatch':
        return TransitionBatch(self.o_t.to(dtype), self.o_t1.to(dtype), self.o_hist.to(dtype),
                               self.indices, self.actions)


def _encode(dataset: VideoDataset) -> bytes:
    n, c, h, w = dataset.frames.shape
    parts = [
        _PREAMBLE.pack(MAGIC, FORMAT_VERSION, DTYPE_U8, 0),
        _SHAPE.pack(n, c, h, w),
        _COUNT.pack(len(dataset.episode_starts)),
        dataset.episode_starts.astype('<u4').tobytes(),
        np.ascontiguousarray(dataset.frames).tobytes(),
    ]
    if dataset.actions is not None:
        parts.append(_COUNT.pack(len(dataset.actions)))
        parts.append(dataset.actions.astype(np.uint8).tobytes())
    return b''.join(parts)


def write_dataset(path: PathLike, dataset: VideoDataset) -> None:
    """Write a dataset as a UPSV container; the action block is written when actions are attached."""
    Path(path).write_bytes(_encode(dataset))


def dataset_digest(dataset: VideoDataset) -> str:
    """SHA-256 of the serialized container."""
    return hashlib.sha256(_encode(dataset)).hexdigest()


def _need(buf: bytes, offset: int, size: int, what: str) -> None:
    if len(buf) < offset + size:
        raise DatasetFormatError(
            f"Truncated file at offset {offset} reading {what}: "
            f"expected {offset + size} bytes, got {len(buf)}"
        )


def read_dataset(path: PathLike) -> VideoDataset:
    """
    Read a UPSV container.

    Args:
        path: .upsv file, or .actions companion carrying the action block

    Returns:
        VideoDataset, with actions when the file has an action block
    """
    buf = Path(path).read_bytes()
    offset = 0

    _need(buf, offset, _PREAMBLE.size, 'preamble')
    magic, version, dtype_code, reserved = _PREAMBLE.unpack_from(buf, offset)
    if magic != MAGIC:
        raise DatasetFormatError(f"Bad magic {magic!r} at offset 0, expected {MAGIC!r}")
    if version != FORMAT_VERSION:
        raise DatasetFormatError(f"Unsupported version {version} at offset 4")
    if dtype_code != DTYPE_U8:
        raise DatasetFormatError(f"Unsupported dtype code {dtype_code} at offset 5")
    if reserved != 0:
        raise DatasetFormatError(f"Reserved bytes at offset 6 must be zero, got {reserved}")
    offset += _PREAMBLE.size

    _need(buf, offset, _SHAPE.size, 'shape')
    n, c, h, w = _SHAPE.unpack_from(buf, offset)
    if n == 0:
        raise DatasetFormatError(f"Header at offset {offset} declares zero frames")
    offset += _SHAPE.size

    _need(buf, offset, _COUNT.size, 'episode count')
    (n_episodes,) = _COUNT.unpack_from(buf, offset)
    offset += _COUNT.size
    _need(buf, offset, 4 * n_episodes, 'episode starts')
    starts = np.frombuffer(buf, dtype='<u4', count=n_episodes, offset=offset).astype(np.int64)
    offset += 4 * n_episodes

    frame_bytes = n * c * h * w
    _need(buf, offset, frame_bytes, 'frames')
    frames = np.frombuffer(buf, dtype=np.uint8, count=frame_bytes, offset=offset).reshape(n, c, h, w)
    offset += frame_bytes

    actions = None
    if offset < len(buf):
        _need(buf, offset, _COUNT.size, 'action count')
        (n_actions,) = _COUNT.unpack_from(buf, offset)
        offset += _COUNT.size
        if n_actions != n:
            raise DatasetFormatError(
                f"Action block at offset {offset - _COUNT.size} has {n_actions} records, expected {n}"
            )
        _need(buf, offset, n_actions, 'actions')
        actions = np.frombuffer(buf, dtype=np.uint8, count=n_actions, offset=offset).copy()
        offset += n_actions
    if offset != len(buf):
        raise DatasetFormatError(f"Trailing bytes after offset {offset}: file has {len(buf)} bytes")

    try:
        return VideoDataset(frames=frames.copy(), episode_starts=starts,
                            meta={'source': str(path)}, actions=actions)
    except ValueError as exc:
        raise DatasetFormatError(f"Invalid dataset in {path}: {exc}") from exc


def _history(frames: np.ndarray, episode_start: np.ndarray, idx: np.ndarray, k: int) -> np.ndarray:
    n = len(idx)
    hist = np.zeros((n, k) + frames.shape[1:], dtype=np.uint8)
    for j in range(k):
        src = idx - (k - j)
        ok = src >= episode_start[idx]
        hist[ok, j] = frames[src[ok]]
    return hist


def _pair_batch(dataset: VideoDataset, idx: np.ndarray, k: int) -> PairBatch:
    frames = dataset.frames
    return PairBatch(
        o_t=to_float(frames[idx]),
        o_t1=to_float(frames[idx + 1]),
        o_hist=to_float(_history(frames, dataset.frame_episode_start, idx, k)),
        indices=idx,
    )


def sample_pairs(dataset: VideoDataset, n: int, k: int, rng: np.random.Generator) -> PairBatch:
    """
    Sample within-episode observation pairs uniformly.

    Args:
        dataset: Expert videos
        n: Batch size
        k: History length; history before the episode start is zero-padded
        rng: Numpy generator

    Returns:
        PairBatch of n pairs
    """
    valid = dataset.valid_pair_starts
    if len(valid) == 0:
        raise EmptyDatasetError("dataset has no valid observation pairs")
    if n < 1:
        raise ValueError(f"batch size must be >= 1, got {n}")
    idx = valid[rng.integers(len(valid), size=n)]
    return _pair_batch(dataset, idx, k)


def sample_observations(dataset: VideoDataset, n: int, rng: np.random.Generator) -> torch.Tensor:
    """Sample single frames uniformly."""
    if n < 1:
        raise ValueError(f"batch size must be >= 1, got {n}")
    idx = rng.integers(dataset.n_frames, size=n)
    return to_float(dataset.frames[idx])


def iter_pairs(dataset: VideoDataset, batch_size: int, k: int) -> Iterator[PairBatch]:
    """Iterate over every valid pair in order."""
    valid = dataset.valid_pair_starts
    for start in range(0, len(valid), batch_size):
        yield _pair_batch(dataset, valid[start:start + batch_size], k)


class InteractionBuffer:
    """
    Ring buffer of (o_t, a_t, o_t1, episode_id) records with history frames.

    One writer appends while samplers read; every sampler reads the size once
    per call so it works on a consistent prefix.
    """

    def __init__(self, capacity: int, obs_shape: Tuple[int, int, int], history: int = 1,
                 n_actions: int = 5):
        if capacity < 1:
            raise ValueError(f"capacity must be >= 1, got {capacity}")
        self.capacity = capacity
        self.obs_shape = tuple(obs_shape)
        self.history = history
        self.n_actions = n_actions
        self.obs = np.zeros((capacity,) + self.obs_shape, dtype=np.uint8)
        self.next_obs = np.zeros_like(self.obs)
        self.hist = np.zeros((capacity, history) + self.obs_shape, dtype=np.uint8)
        self.actions = np.zeros(capacity, dtype=np.uint8)
        self.episode_ids = np.zeros(capacity, dtype=np.int64)
        self.size = 0
        self._cursor = 0
        self._lock = threading.Lock()

    def __len__(self) -> int:
        return self.size

    def add(self, o_t: np.ndarray, action: int, o_t1: np.ndarray, episode_id: int,
            o_hist: Optional[np.ndarray] = None) -> None:
        """Append one transition, evicting the oldest record when full."""
        if not 0 <= int(action) < self.n_actions:
            raise ValueError(f"action must be in [0, {self.n_actions}), got {action}")
        with self._lock:
            i = self._cursor
            self.obs[i] = to_uint8(o_t)
            self.next_obs[i] = to_uint8(o_t1)
            if o_hist is None:
                self.hist[i] = 0
            else:
                self.hist[i] = to_uint8(o_hist)
            self.actions[i] = action
            self.episode_ids[i] = episode_id
            self._cursor = (i + 1) % self.capacity
            self.size = min(self.size + 1, self.capacity)

    def batch(self, idx: np.ndarray) -> TransitionBatch:
        return TransitionBatch(
            o_t=to_float(self.obs[idx]),
            o_t1=to_float(self.next_obs[idx]),
            o_hist=to_float(self.hist[idx]),
            indices=idx,
            actions=torch.from_numpy(self.actions[idx].astype(np.int64)),
        )


def sample_transitions(buffer: InteractionBuffer, m: int, rng: np.random.Generator) -> TransitionBatch:
    """Sample logged transitions uniformly from the buffer."""
    size = buffer.size
    if size == 0:
        raise EmptyDatasetError("interaction buffer is empty")
    if m < 1:
        raise ValueError(f"batch size must be >= 1, got {m}")
    return buffer.batch(rng.integers(size, size=m))


def iter_transitions(buffer: InteractionBuffer, batch_size: int) -> Iterator[TransitionBatch]:
    """Iterate over every stored transition in slot order."""
    size = buffer.size
    for start in range(0, size, batch_size):
        yield buffer.batch(np.arange(start, min(start + batch_size, size)))


if __name__ == '__main__':
    import sys

    for arg in sys.argv[1:]:
        ds = read_dataset(arg)
        lengths = ds.episode_lengths
        print(f"{arg}: {ds.n_frames} frames, shape {ds.obs_shape}, {len(lengths)} episodes")
        print(f"  episode length min/mean/max: {lengths.min()}/{lengths.mean():.1f}/{lengths.max()}")
        print(f"  actions attached: {ds.actions is not None}")
