"""Training loop, optimizer and per-epoch metric logging.

A run directory holds:

``config.ini``      the fully resolved configuration
``metrics.jsonl``   one record per epoch: epoch, train_loss, train_err, test_err, lr
``timing.jsonl``    wall-clock seconds per epoch (kept apart so metrics are reproducible)
``last.ckpt``       state after the most recent finished epoch
``epoch{e}.ckpt``   state at the last epoch before each learning-rate drop
``final.ckpt``      state after the final epoch
"""

from __future__ import annotations

import json
import logging
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, Iterable, List, Mapping, Optional, Tuple

import numpy as np

from densedrop import ops
from densedrop.config import ExperimentConfig
from densedrop.data import AugmentPolicy, Dataset, batches, load_cifar, stratified_subset
from densedrop.dropout import MaskRNG
from densedrop.models import DenseNet, StepMasks, build_model, save_checkpoint
from densedrop.tensor import NumericError, Tensor, UsageError, backward

log = logging.getLogger(__name__)

# Seed-sequence tags for the independent random streams of a run.
_INIT, _SHUFFLE = 1, 2
EVAL_BATCH = 200


@dataclass
class OptimizerState:
    lr: float
    momentum: float = 0.9
    weight_decay: float = 1e-4
    buffers: Dict[str, np.ndarray] = field(default_factory=dict)

    def __post_init__(self):
        if self.lr <= 0:
            raise ValueError("learning rate must be positive")


def sgd_step(
    params: Mapping[str, Tensor],
    grads: Mapping[str, np.ndarray],
    state: OptimizerState,
    no_decay: Iterable[str] = (),
) -> None:
    """In-place momentum SGD.

    buffer <- momentum * buffer + grad + weight_decay * param
    param  <- param - lr * buffer
    """
    skip = set(no_decay)
    for name, p in params.items():
        g = grads.get(name)
        if g is None:
            g = np.zeros_like(p.data)
        if g.shape != p.shape:
            raise ValueError(f"{name}: gradient shape {g.shape} != parameter shape {p.shape}")
        if not np.isfinite(g).all():
            bad = int((~np.isfinite(g)).sum())
            raise NumericError(f"non-finite gradient for {name} ({bad} of {g.size} entries)")
        step = g.astype(p.dtype, copy=True)
        if state.weight_decay and name not in skip:
            step += p.dtype.type(state.weight_decay) * p.data
        buf = state.buffers.get(name)
        if buf is not None:
            step += p.dtype.type(state.momentum) * buf
        state.buffers[name] = step
        p.data -= p.dtype.type(state.lr) * step


def lr_schedule(epoch: int, total: int, base: float) -> float:
    """Piecewise-constant rate; the epochs at 50% and 75% already use the reduced rate."""
    if not 1 <= epoch <= total:
        raise ValueError(f"epoch {epoch} outside 1..{total}")
    if 2 * epoch < total:
        return base
    if 4 * epoch < 3 * total:
        return base / 10
    return base / 100


@dataclass
class MetricRecord:
    epoch: int
    train_loss: float
    train_err: float
    test_err: float
    lr: float
    seconds: float = 0.0

    def line(self) -> str:
        """Reproducible JSON line; wall-clock time is deliberately excluded."""
        d = {"epoch": self.epoch, "train_loss": self.train_loss, "train_err": self.train_err,
             "test_err": self.test_err, "lr": self.lr}
        return json.dumps(d)


@dataclass
class RunResult:
    out: Path
    records: List[MetricRecord]
    checkpoint: Path

    @property
    def final_test_err(self) -> float:
        return self.records[-1].test_err

    @property
    def final_train_err(self) -> float:
        return self.records[-1].train_err


def evaluate(model: DenseNet, ds: Dataset, policy: AugmentPolicy, batch_size: int = EVAL_BATCH) -> Tuple[float, float]:
    """Eval-mode (error %, mean loss) over ``ds``."""
    wrong, loss_sum = 0, 0.0
    for x, y in batches(ds, batch_size, None, policy, train=False, dtype=model.dtype):
        logits = model(x, train=False)
        loss_sum += float(ops.softmax_cross_entropy(logits, y).data) * len(y)
        wrong += int((logits.data.argmax(axis=1) != y).sum())
    return 100.0 * wrong / len(ds), loss_sum / len(ds)


def load_data(config: ExperimentConfig) -> Tuple[Dataset, Dataset]:
    return (
        load_cifar(config.data_dir, config.data_variant, "train"),
        load_cifar(config.data_dir, config.data_variant, "test"),
    )


def prepare_data(config: ExperimentConfig, train: Dataset, test: Dataset) -> Tuple[Dataset, Dataset, AugmentPolicy]:
    # Normalization comes from the full training split, before subsetting.
    policy = AugmentPolicy.from_dataset(train)
    if not config.augment:
        policy = AugmentPolicy(policy.mean, policy.std, flip_prob=0.0, pad=0)
    if config.subset_size is not None:
        train = stratified_subset(train, config.subset_size, config.data_seed)
    if config.test_subset_size is not None:
        test = stratified_subset(test, config.test_subset_size, config.data_seed + 1)
    return train, test, policy


def checkpoint_meta(config: ExperimentConfig, policy: AugmentPolicy, epoch: int) -> dict:
    return {"epoch": epoch, "seed": config.seed, "mean": list(policy.mean), "std": list(policy.std)}


def run_experiment(
    config: ExperimentConfig,
    data: Optional[Tuple[Dataset, Dataset]] = None,
    out: Optional[Path] = None,
) -> RunResult:
    """Train ``config`` to completion and write the run directory.

    ``data`` supplies (train, test) splits directly instead of reading
    ``config.data_dir``.
    """
    out = Path(out or config.out)
    out.mkdir(parents=True, exist_ok=True)
    (out / "config.ini").write_text(config.to_text())
    train, test = data if data is not None else load_data(config)
    train, test, policy = prepare_data(config, train, test)

    dtype = np.dtype(config.dtype)
    init_seed = int(np.random.SeedSequence([config.seed, _INIT]).generate_state(1)[0])
    data_rng = np.random.default_rng(np.random.SeedSequence([config.seed, _SHUFFLE]))
    mask_rng = MaskRNG(config.seed)
    model = build_model(config.model, seed=init_seed, dtype=dtype)
    no_decay = [name for name in model.params if not model.decayed(name)]
    opt = OptimizerState(config.lr, config.momentum, config.weight_decay)

    metrics_path, timing_path = out / "metrics.jsonl", out / "timing.jsonl"
    metrics_path.write_text("")
    timing_path.write_text("")
    records: List[MetricRecord] = []
    step = 0
    for epoch in range(1, config.epochs + 1):
        t0 = time.perf_counter()
        opt.lr = lr_schedule(epoch, config.epochs, config.lr)
        seen, wrong, loss_sum = 0, 0, 0.0
        for x, y in batches(train, config.batch_size, data_rng, policy, train=True, dtype=dtype):
            try:
                logits = model(x, train=True, masks=StepMasks(mask_rng, step, dtype))
                loss = ops.softmax_cross_entropy(logits, y)
                grads = backward(loss, model.params.values())
                sgd_step(model.params, {n: grads[p] for n, p in model.params.items()}, opt, no_decay)
            except NumericError as exc:
                raise NumericError(
                    f"run aborted at epoch {epoch}, step {step}: {exc}; last good state in {out / 'last.ckpt'}"
                ) from exc
            for p in model.params.values():
                p.grad = None
            step += 1
            seen += len(y)
            loss_sum += float(loss.data) * len(y)
            wrong += int((logits.data.argmax(axis=1) != y).sum())

        draws_before = mask_rng.draws
        test_err, _ = evaluate(model, test, policy)
        if mask_rng.draws != draws_before:
            raise UsageError("evaluation sampled dropout masks")

        rec = MetricRecord(epoch, loss_sum / seen, 100.0 * wrong / seen, test_err, opt.lr, time.perf_counter() - t0)
        records.append(rec)
        with open(metrics_path, "a") as fh:
            fh.write(rec.line() + "\n")
        with open(timing_path, "a") as fh:
            fh.write(json.dumps({"epoch": epoch, "seconds": rec.seconds}) + "\n")
        log.info(
            "epoch %d/%d lr=%g loss=%.4f train_err=%.2f test_err=%.2f (%.1fs)",
            epoch, config.epochs, rec.lr, rec.train_loss, rec.train_err, rec.test_err, rec.seconds,
        )
        meta = checkpoint_meta(config, policy, epoch)
        save_checkpoint(out / "last.ckpt", model, meta)
        if epoch < config.epochs and lr_schedule(epoch + 1, config.epochs, config.lr) != opt.lr:
            save_checkpoint(out / f"epoch{epoch}.ckpt", model, meta)

    final = out / "final.ckpt"
    save_checkpoint(final, model, checkpoint_meta(config, policy, config.epochs))
    return RunResult(out, records, final)


def read_metrics(run_dir) -> List[MetricRecord]:
    run_dir = Path(run_dir)
    seconds = {}
    timing = run_dir / "timing.jsonl"
    if timing.exists():
        for line in timing.read_text().splitlines():
            if line.strip():
                t = json.loads(line)
                seconds[t["epoch"]] = t["seconds"]
    out = []
    for line in (run_dir / "metrics.jsonl").read_text().splitlines():
        if line.strip():
            d = json.loads(line)
            out.append(MetricRecord(seconds=seconds.get(d["epoch"], float("nan")), **d))
    return out
