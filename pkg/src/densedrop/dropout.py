"""Bernoulli masks for dense-block dropout.

Masks use inverted scaling: a surviving unit carries ``1/p`` at train time and
evaluation is the identity. A mask covers one consumer's input, which is a
concatenation of source segments; each segment has its own survival
probability.

Randomness comes from :class:`MaskRNG`, a Philox counter-based generator.
Streams for a (block, consumer, step) triple are derived from the master seed,
so masks for different consumers never share draws and replaying a step
reproduces its masks bit for bit.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass
from typing import List, Optional, Sequence, Tuple

import numpy as np

from densedrop import ops
from densedrop.tensor import ShapeError, Tensor


class Granularity(enum.Enum):
    UNIT = "unit"
    CHANNEL = "channel"
    LAYER = "layer"


class DropoutMode(enum.Enum):
    NONE = "none"
    STANDARD = "standard"
    PRE = "pre"


@dataclass(frozen=True)
class Segment:
    """Channels ``[start, stop)`` of a consumer input, produced by layer ``source``."""

    source: int
    start: int
    stop: int

    @property
    def width(self) -> int:
        return self.stop - self.start


def segments_from_widths(widths: Sequence[int], first_source: int = 0) -> List[Segment]:
    segs, start = [], 0
    for i, w in enumerate(widths):
        segs.append(Segment(first_source + i, start, start + w))
        start += w
    return segs


def validate_segments(segments: Sequence[Segment], channels: int) -> None:
    if not segments:
        raise ShapeError("segment list is empty")
    expected_start = 0
    prev_source = None
    for seg in segments:
        if seg.start != expected_start or seg.stop <= seg.start:
            raise ShapeError(f"segments must tile channels contiguously, got {list(segments)}")
        if prev_source is not None and seg.source <= prev_source:
            raise ShapeError("segment sources must be strictly increasing")
        prev_source = seg.source
        expected_start = seg.stop
    if expected_start != channels:
        raise ShapeError(f"segments cover {expected_start} channels, tensor has {channels}")


@dataclass
class SegmentedInput:
    tensor: Tensor
    segments: List[Segment]

    def __post_init__(self):
        validate_segments(self.segments, self.tensor.shape[1])
        if self.segments[0].source != 0:
            raise ShapeError("the first segment must come from the block input (source 0)")


class MaskRNG:
    """Counter-based mask generator.

    ``draws`` counts Bernoulli units consumed through this object and every
    stream derived from it, so callers can assert that nothing was sampled.
    """

    def __init__(self, seed: int, path: Tuple[int, ...] = (), root: Optional["MaskRNG"] = None):
        self.seed = int(seed)
        self.path = tuple(int(v) for v in path)
        self._root = root
        self.draws = 0
        key = np.random.SeedSequence([self.seed, len(self.path), *self.path]).generate_state(2, np.uint64)
        self._gen = np.random.Generator(np.random.Philox(key=key))

    def stream(self, *path: int) -> "MaskRNG":
        """Independent generator for ``path`` (e.g. block, consumer, step)."""
        return MaskRNG(self.seed, self.path + path, root=self._root or self)

    def uniform(self, shape) -> np.ndarray:
        out = self._gen.random(shape)
        n = int(np.prod(shape))
        self.draws += n
        if self._root is not None:
            self._root.draws += n
        return out

    @property
    def record(self) -> Tuple[int, Tuple[int, ...], int]:
        return (self.seed, self.path, self.draws)


@dataclass
class MaskTensor:
    """One sampled realization of a consumer's mask.

    ``factors`` has shape (N, C, H, W) for unit-wise masks and (N, C, 1, 1) for
    channel- and layer-wise ones; :attr:`values` broadcasts it to the target.
    """

    factors: np.ndarray
    shape: Tuple[int, ...]
    granularity: Granularity
    segments: List[Segment]
    probs: List[float]
    rng_record: Optional[tuple] = None

    @property
    def values(self) -> np.ndarray:
        return np.broadcast_to(self.factors, self.shape)


def _check_probs(probs: Sequence[float], segments: Sequence[Segment]) -> None:
    if len(probs) != len(segments):
        raise ValueError(f"{len(probs)} probabilities for {len(segments)} segments")
    for p in probs:
        if not 0.0 < p <= 1.0:
            raise ValueError(f"survival probability {p} outside (0, 1]")


def sample_mask(
    shape: Sequence[int],
    segments: Sequence[Segment],
    probs: Sequence[float],
    granularity: Granularity,
    rng: MaskRNG,
    dtype=np.float32,
) -> MaskTensor:
    shape = tuple(int(s) for s in shape)
    if len(shape) != 4:
        raise ShapeError(f"mask shape must be NCHW, got {shape}")
    validate_segments(segments, shape[1])
    _check_probs(probs, segments)
    n, c, h, w = shape
    start = rng.record

    per_channel = np.empty(c, dtype=np.float64)
    for seg, p in zip(segments, probs):
        per_channel[seg.start : seg.stop] = p

    if granularity is Granularity.UNIT:
        keep = rng.uniform((n, c, h, w)) < per_channel[None, :, None, None]
        p_full = per_channel[None, :, None, None]
    elif granularity is Granularity.CHANNEL:
        keep = rng.uniform((n, c, 1, 1)) < per_channel[None, :, None, None]
        p_full = per_channel[None, :, None, None]
    else:
        seg_keep = rng.uniform((n, len(segments))) < np.asarray(probs)[None, :]
        widths = [seg.width for seg in segments]
        keep = np.repeat(seg_keep, widths, axis=1)[:, :, None, None]
        p_full = per_channel[None, :, None, None]

    factors = np.where(keep, 1.0 / p_full, 0.0).astype(dtype)
    return MaskTensor(factors, shape, granularity, list(segments), [float(p) for p in probs], start)


def apply_mask(x: Tensor, mask: MaskTensor, train: bool) -> Tensor:
    if tuple(x.shape) != tuple(mask.shape):
        raise ShapeError(f"mask for {mask.shape} applied to tensor of shape {x.shape}")
    if not train:
        return x
    return ops.scale(x, mask.factors.astype(x.dtype, copy=False))


def mask_family(
    consumers: Sequence[Tuple[Sequence[int], Sequence[Segment], Sequence[float]]],
    granularity: Granularity,
    rng: MaskRNG,
    dtype=np.float32,
) -> List[MaskTensor]:
    """Masks for several consumers of the same sources.

    ``consumers`` lists (shape, segments, probs) triples. Consumer ``j`` draws
    from ``rng.stream(j)``, so masks are independent across consumers.
    """
    masks = []
    ref = None
    for j, (shape, segments, probs) in enumerate(consumers):
        prefix = [(s.source, s.width) for s in segments]
        if ref is not None:
            shorter, longer = (prefix, ref) if len(prefix) <= len(ref) else (ref, prefix)
            if longer[: len(shorter)] != shorter:
                raise ShapeError("consumers disagree on the source segment structure")
        if ref is None or len(prefix) > len(ref):
            ref = prefix
        masks.append(sample_mask(shape, segments, probs, granularity, rng.stream(j), dtype=dtype))
    return masks
