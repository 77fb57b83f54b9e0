"""DenseNet and DenseNet-BC graphs with selectable dropout wiring.

A model is three dense blocks separated by transitions, preceded by a 3x3 stem
convolution and followed by BN, ReLU, global pooling and a linear classifier.

Dropout wiring per block (``n`` composite layers, sources ``0..n``):

* ``STANDARD``: each layer output is masked once and the masked tensor is
  what every later consumer concatenates. The block input is never masked.
* ``PRE``: the unmasked outputs are concatenated and consumer ``j`` (layer
  ``j`` or, for ``j = n + 1``, the block output) multiplies its own copy by an
  independent mask before use.
"""

from __future__ import annotations

import json
import struct
from collections import OrderedDict
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Callable, Dict, List, Optional, Sequence, Tuple

import numpy as np

from densedrop import ops
from densedrop.dropout import (
    DropoutMode,
    Granularity,
    MaskRNG,
    MaskTensor,
    apply_mask,
    mask_family,
    sample_mask,
    segments_from_widths,
    Segment,
)
from densedrop.ops import BatchNormState
from densedrop.schedules import ScheduleKind, ScheduleMatrix, build_schedule
from densedrop.tensor import ShapeError, Tensor, UsageError


class ConfigError(ValueError):
    pass


PLAIN = "plain"
BC = "bc"


def _nearest_valid(depth: int, period: int) -> int:
    n = max(1, round((depth - 4) / period))
    return period * n + 4


@dataclass(frozen=True)
class ModelConfig:
    variant: str = BC
    depth: int = 22
    growth_rate: int = 12
    num_classes: int = 10
    dropout: DropoutMode = DropoutMode.NONE
    granularity: Granularity = Granularity.CHANNEL
    schedule: ScheduleKind = ScheduleKind.UNIFORM
    uniform_p: float = 0.5
    compression: Optional[float] = None
    stem_channels: Optional[int] = None

    def __post_init__(self):
        if self.variant not in (PLAIN, BC):
            raise ConfigError(f"unknown variant {self.variant!r}; expected 'plain' or 'bc'")
        period = 3 if self.variant == PLAIN else 6
        form = "3n+4" if self.variant == PLAIN else "6n+4"
        if self.depth < period + 4 or (self.depth - 4) % period:
            raise ConfigError(
                f"depth {self.depth} is not {form} for variant {self.variant!r}; "
                f"closest valid depth is {_nearest_valid(self.depth, period)}"
            )
        if self.growth_rate < 1:
            raise ConfigError("growth rate must be positive")
        if self.num_classes < 2:
            raise ConfigError("need at least two classes")
        if not 0.0 < self.uniform_p <= 1.0:
            raise ConfigError(f"uniform_p {self.uniform_p} outside (0, 1]")
        if self.compression is not None and not 0.0 < self.compression <= 1.0:
            raise ConfigError(f"compression {self.compression} outside (0, 1]")

    @property
    def layers_per_block(self) -> int:
        period = 3 if self.variant == PLAIN else 6
        return (self.depth - 4) // period

    @property
    def theta(self) -> float:
        if self.compression is not None:
            return self.compression
        return 0.5 if self.variant == BC else 1.0

    @property
    def stem_width(self) -> int:
        if self.stem_channels is not None:
            return self.stem_channels
        return 2 * self.growth_rate if self.variant == BC else 16

    def to_dict(self) -> dict:
        d = asdict(self)
        d["dropout"] = self.dropout.value
        d["granularity"] = self.granularity.value
        d["schedule"] = self.schedule.value
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        d = dict(d)
        d["dropout"] = DropoutMode(d["dropout"])
        d["granularity"] = Granularity(d["granularity"])
        d["schedule"] = ScheduleKind(d["schedule"])
        return cls(**d)


# A mask provider returns one mask per spec for a block. Specs are
# (shape, segments, probs) triples, one per consumer.
MaskSpec = Tuple[Tuple[int, ...], List[Segment], List[float]]


class StepMasks:
    """Fresh masks for training step ``step``, drawn from ``rng``."""

    def __init__(self, rng: MaskRNG, step: int, dtype=np.float32):
        self.rng, self.step, self.dtype = rng, step, dtype

    def __call__(self, block: int, specs: Sequence[MaskSpec], granularity: Granularity, shared: bool):
        base = self.rng.stream(self.step, block)
        if shared:
            return mask_family(specs, granularity, base, dtype=self.dtype)
        return [
            sample_mask(shape, segs, probs, granularity, base.stream(j), dtype=self.dtype)
            for j, (shape, segs, probs) in enumerate(specs)
        ]


class FixedMasks:
    """Injects caller-supplied masks: ``{block: [factors per consumer]}``.

    Factors may be full NCHW arrays or anything broadcastable to the consumer
    shape. Blocks without an entry get all-ones masks.
    """

    def __init__(self, factors: Dict[int, Sequence[np.ndarray]]):
        self.factors = factors

    def __call__(self, block, specs, granularity, shared):
        given = self.factors.get(block)
        out = []
        for j, (shape, segs, probs) in enumerate(specs):
            f = np.ones((1, 1, 1, 1)) if given is None else np.asarray(given[j])
            out.append(MaskTensor(f, tuple(shape), granularity, list(segs), list(probs)))
        return out


class DenseNet:
    def __init__(self, config: ModelConfig, seed: int = 0, dtype=np.float32):
        self.config = config
        self.dtype = np.dtype(dtype)
        self.params: "OrderedDict[str, Tensor]" = OrderedDict()
        self.bn: "OrderedDict[str, BatchNormState]" = OrderedDict()
        self.schedules: List[ScheduleMatrix] = []
        self._rng = np.random.default_rng(seed)
        self._build()

    # -- construction -------------------------------------------------
    def _conv(self, name: str, out_ch: int, in_ch: int, k: int) -> None:
        std = np.sqrt(2.0 / (in_ch * k * k))
        w = self._rng.normal(0.0, std, size=(out_ch, in_ch, k, k)).astype(self.dtype)
        self.params[f"{name}.weight"] = Tensor(w, requires_grad=True, name=f"{name}.weight")

    def _norm(self, name: str, channels: int) -> None:
        state = BatchNormState.create(channels, self.dtype)
        state.gamma.name, state.beta.name = f"{name}.gamma", f"{name}.beta"
        self.bn[name] = state
        self.params[f"{name}.gamma"] = state.gamma
        self.params[f"{name}.beta"] = state.beta

    def _build(self) -> None:
        cfg = self.config
        k, n = cfg.growth_rate, cfg.layers_per_block
        width = cfg.stem_width
        self._conv("stem.conv", width, 3, 3)
        self.block_widths = []
        for b in range(1, 4):
            self.block_widths.append(width)
            for l in range(1, n + 1):
                c_in = width + (l - 1) * k
                prefix = f"block{b}.layer{l}"
                self._norm(f"{prefix}.bn1", c_in)
                if cfg.variant == BC:
                    self._conv(f"{prefix}.conv1", 4 * k, c_in, 1)
                    self._norm(f"{prefix}.bn2", 4 * k)
                    self._conv(f"{prefix}.conv2", k, 4 * k, 3)
                else:
                    self._conv(f"{prefix}.conv1", k, c_in, 3)
            width += n * k
            if b < 3:
                out = int(np.floor(cfg.theta * width))
                self._norm(f"trans{b}.bn", width)
                self._conv(f"trans{b}.conv", out, width, 1)
                width = out
            self.schedules.append(build_schedule(cfg.schedule, n, cfg.uniform_p))
        self._norm("head.bn", width)
        bound = 1.0 / np.sqrt(width)
        w = self._rng.uniform(-bound, bound, size=(cfg.num_classes, width)).astype(self.dtype)
        bias = self._rng.uniform(-bound, bound, size=cfg.num_classes).astype(self.dtype)
        self.params["head.fc.weight"] = Tensor(w, requires_grad=True, name="head.fc.weight")
        self.params["head.fc.bias"] = Tensor(bias, requires_grad=True, name="head.fc.bias")
        self.final_width = width

    # -- forward ------------------------------------------------------
    def _composite(self, prefix: str, x: Tensor, train: bool) -> Tensor:
        p = self.params
        h = ops.relu(ops.batchnorm(x, self.bn[f"{prefix}.bn1"], train))
        if self.config.variant == BC:
            h = ops.conv2d(h, p[f"{prefix}.conv1.weight"])
            h = ops.relu(ops.batchnorm(h, self.bn[f"{prefix}.bn2"], train))
            return ops.conv2d(h, p[f"{prefix}.conv2.weight"], padding=1)
        return ops.conv2d(h, p[f"{prefix}.conv1.weight"], padding=1)

    def block_specs(self, block: int, batch: int, hw: Tuple[int, int]) -> List[MaskSpec]:
        """Mask specs for every mask site of ``block`` (1-based) in this model's mode."""
        cfg = self.config
        k, n = cfg.growth_rate, cfg.layers_per_block
        c_in = self.block_widths[block - 1]
        sched = self.schedules[block - 1]
        h, w = hw
        if cfg.dropout is DropoutMode.PRE:
            specs = []
            for j in range(1, n + 2):
                widths = [c_in] + [k] * (j - 1)
                specs.append(((batch, sum(widths), h, w), segments_from_widths(widths), sched.consumer_probs(j)))
            return specs
        if cfg.dropout is DropoutMode.STANDARD:
            return [((batch, k, h, w), [Segment(l, 0, k)], [sched.prob(l, l + 1)]) for l in range(1, n + 1)]
        return []

    def dense_block(
        self,
        block: int,
        x0: Tensor,
        train: bool,
        masks: Optional[Callable] = None,
        trace: Optional[dict] = None,
    ) -> Tensor:
        cfg = self.config
        k, n = cfg.growth_rate, cfg.layers_per_block
        mode = cfg.dropout if train else DropoutMode.NONE
        c_in = x0.shape[1]
        if c_in != self.block_widths[block - 1]:
            raise ShapeError(f"block {block} expects {self.block_widths[block - 1]} input channels, got {c_in}")
        block_masks: List[MaskTensor] = []
        if mode is not DropoutMode.NONE:
            if masks is None:
                raise UsageError("training with dropout needs a mask provider")
            specs = self.block_specs(block, x0.shape[0], x0.shape[2:])
            block_masks = masks(block, specs, cfg.granularity, mode is DropoutMode.PRE)

        features = [x0]
        for j in range(1, n + 1):
            inp = ops.concat(features)
            if inp.shape[1] != c_in + (j - 1) * k:
                raise ShapeError(f"layer {j} of block {block} got {inp.shape[1]} channels")
            if mode is DropoutMode.PRE:
                inp = apply_mask(inp, block_masks[j - 1], train=True)
            if trace is not None:
                trace[(block, j)] = inp
            out = self._composite(f"block{block}.layer{j}", inp, train)
            if mode is DropoutMode.STANDARD:
                out = apply_mask(out, block_masks[j - 1], train=True)
            features.append(out)
        out = ops.concat(features)
        if mode is DropoutMode.PRE:
            out = apply_mask(out, block_masks[n], train=True)
        if trace is not None:
            trace[(block, n + 1)] = out
        return out

    def forward(
        self,
        x,
        train: bool = False,
        masks: Optional[Callable] = None,
        trace: Optional[dict] = None,
    ) -> Tensor:
        if not isinstance(x, Tensor):
            x = Tensor(np.asarray(x, dtype=self.dtype))
        if x.ndim != 4 or x.shape[1] != 3:
            raise ShapeError(f"expected an N x 3 x H x W batch, got {x.shape}")
        p = self.params
        h = ops.conv2d(x, p["stem.conv.weight"], padding=1)
        for b in range(1, 4):
            h = self.dense_block(b, h, train, masks, trace)
            if b < 3:
                h = ops.relu(ops.batchnorm(h, self.bn[f"trans{b}.bn"], train))
                h = ops.avgpool2x2(ops.conv2d(h, p[f"trans{b}.conv.weight"]))
        h = ops.relu(ops.batchnorm(h, self.bn["head.bn"], train))
        return ops.linear(ops.global_avgpool(h), p["head.fc.weight"], p["head.fc.bias"])

    __call__ = forward

    # -- bookkeeping --------------------------------------------------
    def state_arrays(self) -> "OrderedDict[str, np.ndarray]":
        out = OrderedDict()
        for name, t in self.params.items():
            out[name] = t.data
        for name, st in self.bn.items():
            out[f"{name}.running_mean"] = st.running_mean
            out[f"{name}.running_var"] = st.running_var
        return out

    def load_arrays(self, arrays: Dict[str, np.ndarray]) -> None:
        mine = self.state_arrays()
        missing = set(mine) - set(arrays)
        extra = set(arrays) - set(mine)
        if missing or extra:
            raise ShapeError(f"checkpoint mismatch: missing {sorted(missing)}, unexpected {sorted(extra)}")
        for name, arr in arrays.items():
            if mine[name].shape != arr.shape:
                raise ShapeError(f"{name}: checkpoint shape {arr.shape}, model shape {mine[name].shape}")
            mine[name][...] = arr

    def decayed(self, name: str) -> bool:
        """Whether weight decay applies to a parameter (not to BN gamma/beta)."""
        return not (name.endswith(".gamma") or name.endswith(".beta"))


def build_model(config: ModelConfig, seed: int = 0, dtype=np.float32) -> DenseNet:
    return DenseNet(config, seed=seed, dtype=dtype)


def count_params(model: DenseNet) -> int:
    return int(sum(t.size for t in model.params.values()))


@dataclass(frozen=True)
class MaskSite:
    block: int
    source: int
    consumer: Optional[int]  # None: the masked output feeds every later consumer
    prob: float
    granularity: Granularity


def mask_attachment_plan(config: ModelConfig) -> List[MaskSite]:
    n = config.layers_per_block
    sched = build_schedule(config.schedule, n, config.uniform_p)
    sites = []
    for b in range(1, 4):
        if config.dropout is DropoutMode.PRE:
            for j in range(1, n + 2):
                for i in range(j):
                    sites.append(MaskSite(b, i, j, sched.prob(i, j), config.granularity))
        elif config.dropout is DropoutMode.STANDARD:
            for l in range(1, n + 1):
                sites.append(MaskSite(b, l, None, sched.prob(l, l + 1), config.granularity))
    return sites


def format_plan(config: ModelConfig, sites: Sequence[MaskSite]) -> str:
    n = config.layers_per_block
    lines = [
        f"# {config.variant}-{config.depth} k={config.growth_rate} dropout={config.dropout.value} "
        f"granularity={config.granularity.value} schedule={config.schedule.value} layers/block={n}"
    ]
    if not sites:
        lines.append("(no mask sites)")
    for s in sites:
        consumer = "all-later" if s.consumer is None else str(s.consumer)
        if s.consumer == n + 1:
            consumer += " (block output)"
        lines.append(f"block={s.block} source={s.source} consumer={consumer} p={s.prob:.6g} granularity={s.granularity.value}")
    return "\n".join(lines)


_MAGIC = b"DDCKPT1\n"


def save_checkpoint(path, model: DenseNet, meta: Optional[dict] = None) -> None:
    """Write named tensors as little-endian raw values behind a JSON header.

    Output bytes depend only on the model state and ``meta``.
    """
    entries, blobs, offset = [], [], 0
    for name, arr in model.state_arrays().items():
        le = np.ascontiguousarray(arr).astype(arr.dtype.newbyteorder("<"), copy=False)
        raw = le.tobytes()
        entries.append({"name": name, "shape": list(arr.shape), "dtype": le.dtype.str, "offset": offset, "nbytes": len(raw)})
        blobs.append(raw)
        offset += len(raw)
    header = {
        "config": model.config.to_dict(),
        "dtype": model.dtype.str,
        "meta": meta or {},
        "tensors": entries,
    }
    head = json.dumps(header, sort_keys=True).encode()
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_suffix(path.suffix + ".tmp")
    with open(tmp, "wb") as fh:
        fh.write(_MAGIC)
        fh.write(struct.pack("<Q", len(head)))
        fh.write(head)
        for raw in blobs:
            fh.write(raw)
    tmp.replace(path)


def read_checkpoint(path) -> Tuple[dict, "OrderedDict[str, np.ndarray]"]:
    data = Path(path).read_bytes()
    if not data.startswith(_MAGIC):
        raise ValueError(f"{path} is not a densedrop checkpoint")
    (hlen,) = struct.unpack_from("<Q", data, len(_MAGIC))
    start = len(_MAGIC) + 8
    header = json.loads(data[start : start + hlen])
    body = start + hlen
    arrays = OrderedDict()
    for e in header["tensors"]:
        lo = body + e["offset"]
        arr = np.frombuffer(data, dtype=np.dtype(e["dtype"]), count=int(np.prod(e["shape"], dtype=np.int64)), offset=lo)
        arrays[e["name"]] = arr.reshape(e["shape"]).copy()
    return header, arrays


def load_checkpoint(path) -> Tuple[DenseNet, dict]:
    header, arrays = read_checkpoint(path)
    model = DenseNet(ModelConfig.from_dict(header["config"]), dtype=np.dtype(header["dtype"]))
    model.load_arrays(arrays)
    return model, header["meta"]
