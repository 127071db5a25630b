"""Two-phase training: per-stage parallel training, then penetrating fine-tuning.

Phase 1 treats the stages as independent: each one learns to undo a single
2x degradation between adjacent pyramid levels (stage 1 at the deepest,
lowest-resolution level), so all stages can train concurrently. Phase 2
walks the cascade from the second stage to the last: at step s, stage s is
frozen, the lowest-resolution input is pushed through stages 1..s, and the
loss at that output updates the upstream stages. All randomness (init,
shuffling) derives from the schedule seed.
"""

from __future__ import annotations

import hashlib
import json
import math
import time
from dataclasses import dataclass
from pathlib import Path
from typing import List, Optional, Sequence

import torch
from torch import Tensor

from .cascade import Cascade, save_checkpoint, super_resolve
from .data import PatchPair
from .losses import LossWeights, total_loss
from .metrics import psnr, ssim
from .model import DPNet, DPNetConfig, init_dpnet

# Fine-tuning starts one decade below the parallel-phase initial rate; small
# enough to keep the frozen-stage coupling stable, large enough to actually
# close the stage-composition gap within a few epochs.
FINETUNE_LR_SCALE = 0.1


@dataclass(frozen=True)
class TrainingSchedule:
    """Optimizer hyperparameters and epoch budget for both phases."""

    beta1: float = 0.9
    beta2: float = 0.999
    initial_lr: float = 1e-3
    decay_factor: float = 0.1
    decay_every: int = 20
    epochs_parallel: int = 50
    epochs_finetune: int = 5
    batch_size: int = 16
    seed: int = 0

    def validate(self) -> None:
        if not 0.0 < self.beta1 < 1.0 or not 0.0 < self.beta2 < 1.0:
            raise ValueError(f"beta1/beta2 must lie in (0,1), got {self.beta1}, {self.beta2}")
        if self.initial_lr <= 0:
            raise ValueError(f"initial_lr must be > 0, got {self.initial_lr}")
        if self.decay_factor <= 0:
            raise ValueError(f"decay_factor must be > 0, got {self.decay_factor}")
        if self.decay_every < 1:
            raise ValueError(f"decay_every must be >= 1, got {self.decay_every}")
        if self.batch_size < 1:
            raise ValueError(f"batch_size must be >= 1, got {self.batch_size}")
        if self.epochs_parallel < 0 or self.epochs_finetune < 0:
            raise ValueError("epoch counts must be >= 0")


def lr_at_epoch(schedule: TrainingSchedule, epoch: int) -> float:
    """Step decay: initial_lr * decay_factor ** floor(epoch / decay_every)."""
    if epoch < 0:
        raise ValueError(f"epoch must be >= 0, got {epoch}")
    return schedule.initial_lr * schedule.decay_factor ** (epoch // schedule.decay_every)


def set_frozen(net: DPNet, frozen: bool) -> None:
    """Freeze or thaw every parameter of a net.

    Frozen nets receive no optimizer updates and no batch-norm statistic
    updates (they ignore train-mode switches until thawed).
    """
    net.frozen = bool(frozen)
    for p in net.parameters():
        p.requires_grad_(not frozen)
    if frozen:
        net.eval()


class TrainingLog:
    """Append-only per-epoch records, persisted as line-delimited JSON."""

    def __init__(self, records: Optional[List[dict]] = None):
        self.records: List[dict] = list(records or [])

    def append(self, **fields) -> None:
        self.records.append(fields)

    def save(self, path) -> None:
        with open(path, "w", encoding="utf-8") as fh:
            for rec in self.records:
                fh.write(json.dumps(rec) + "\n")

    @classmethod
    def load(cls, path) -> "TrainingLog":
        with open(path, encoding="utf-8") as fh:
            return cls([json.loads(line) for line in fh if line.strip()])

    def fingerprint(self) -> str:
        """Digest of everything except wall-clock timings, for determinism checks."""
        scrubbed = [
            {k: v for k, v in rec.items() if k != "wall_time"} for rec in self.records
        ]
        payload = json.dumps(scrubbed, sort_keys=True).encode()
        return hashlib.sha256(payload).hexdigest()


def derive_seed(base: int, tag: str, index: int = 0) -> int:
    """Stable per-purpose seed so stages stay independent of each other."""
    digest = hashlib.blake2b(f"{base}:{tag}:{index}".encode(), digest_size=8).digest()
    return int.from_bytes(digest, "little") & 0x7FFF_FFFF_FFFF_FFFF


def _uniform_depth(dataset: Sequence[PatchPair], needed: int) -> int:
    """Validate a nonempty dataset with one shared pyramid depth >= needed."""
    if not dataset:
        raise ValueError("dataset is empty")
    depths = {pair.depth for pair in dataset}
    if len(depths) > 1:
        raise ValueError(f"dataset mixes pyramid depths {sorted(depths)}")
    depth = depths.pop()
    if depth < needed:
        raise ValueError(f"dataset pyramid depth is {depth}, need at least {needed}")
    return depth


def _stack_level(dataset: Sequence[PatchPair], indices: Sequence[int], level: int) -> Tensor:
    tensors = [dataset[i].level(level) for i in indices]
    shapes = {tuple(t.shape) for t in tensors}
    if len(shapes) > 1:
        raise ValueError(f"cannot batch mixed patch shapes at level {level}: {sorted(shapes)}")
    return torch.stack(tensors)


def _batches(n: int, batch_size: int, generator: torch.Generator):
    order = torch.randperm(n, generator=generator).tolist()
    for start in range(0, n, batch_size):
        yield order[start:start + batch_size]


def _set_lr(optimizer: torch.optim.Optimizer, lr: float) -> None:
    for group in optimizer.param_groups:
        group["lr"] = lr


def _validate_stage(net: DPNet, dataset: Sequence[PatchPair], in_level: int) -> tuple:
    """Mean PSNR/SSIM of one stage mapping in_level -> in_level-1 on a hold-out set."""
    psnrs, ssims = [], []
    with torch.no_grad():
        was_training = net.training
        net.eval()
        try:
            for pair in dataset:
                sr = net(pair.level(in_level))
                psnrs.append(psnr(sr, pair.level(in_level - 1)))
                ssims.append(ssim(sr, pair.level(in_level - 1)))
        finally:
            net.train(was_training)
    return sum(psnrs) / len(psnrs), sum(ssims) / len(ssims)


def validate_cascade(cascade: Cascade, dataset: Sequence[PatchPair]) -> tuple:
    """Mean full-cascade PSNR/SSIM from the deepest pyramid level upward."""
    n = len(cascade.stages)
    depth = _uniform_depth(dataset, n)
    psnrs, ssims = [], []
    for pair in dataset:
        sr = super_resolve(cascade, pair.level(depth))
        psnrs.append(psnr(sr, pair.level(depth - n)))
        ssims.append(ssim(sr, pair.level(depth - n)))
    return sum(psnrs) / len(psnrs), sum(ssims) / len(ssims)


def train_parallel(
    dataset: Sequence[PatchPair],
    configs: Sequence[DPNetConfig],
    schedule: TrainingSchedule,
    weights: LossWeights,
    feature_extractor=None,
    edge_network=None,
    edge_threshold: float = 0.5,
    val_dataset: Optional[Sequence[PatchPair]] = None,
    log: Optional[TrainingLog] = None,
    checkpoint_dir=None,
    device: str = "cpu",
) -> List[DPNet]:
    """Phase 1: train one net per stage on adjacent pyramid levels.

    Stage 1 consumes the deepest pyramid level: with depth-D pyramids, stage
    s maps level D-s+1 to level D-s, so the final stage regresses the HR
    image when D equals the stage count. The stages share nothing (data
    pairing, init, and shuffling are all per-stage), so the per-stage
    parameter streams are independent of how many stages train in one call.
    Returns the best-validation-PSNR state of each stage (final state when
    no validation set is given).
    """
    schedule.validate()
    weights.validate()
    n_stages = len(configs)
    if n_stages == 0:
        raise ValueError("need at least one stage config")
    depth = _uniform_depth(dataset, n_stages)
    if val_dataset:
        _uniform_depth(val_dataset, n_stages)
    nets: List[DPNet] = []
    for stage in range(1, n_stages + 1):
        net = init_dpnet(configs[stage - 1], derive_seed(schedule.seed, "init", stage))
        net.to(device)
        nets.append(
            _train_single_stage(
                net, stage, depth - stage + 1, dataset, schedule, weights,
                feature_extractor, edge_network, edge_threshold,
                val_dataset, log, checkpoint_dir, device,
            )
        )
    return nets


def _train_single_stage(
    net: DPNet,
    stage: int,
    in_level: int,
    dataset: Sequence[PatchPair],
    schedule: TrainingSchedule,
    weights: LossWeights,
    feature_extractor,
    edge_network,
    edge_threshold: float,
    val_dataset,
    log: Optional[TrainingLog],
    checkpoint_dir,
    device: str,
) -> DPNet:
    gen = torch.Generator().manual_seed(derive_seed(schedule.seed, "shuffle", stage))
    optimizer = torch.optim.Adam(
        net.parameters(), lr=schedule.initial_lr, betas=(schedule.beta1, schedule.beta2)
    )
    best_psnr = -math.inf
    best_state = None
    for epoch in range(schedule.epochs_parallel):
        t0 = time.perf_counter()
        lr = lr_at_epoch(schedule, epoch)
        _set_lr(optimizer, lr)
        net.train()
        sums = {"pixel": 0.0, "perceptual": 0.0, "edge": 0.0, "total": 0.0}
        n_batches = 0
        for batch_idx in _batches(len(dataset), schedule.batch_size, gen):
            inputs = _stack_level(dataset, batch_idx, in_level).to(device)
            targets = _stack_level(dataset, batch_idx, in_level - 1).to(device)
            optimizer.zero_grad()
            sr = net(inputs)
            breakdown = total_loss(
                sr, targets, weights, feature_extractor, edge_network, edge_threshold
            )
            breakdown.total.backward()
            optimizer.step()
            for key, value in breakdown.as_floats().items():
                sums[key] += value
            n_batches += 1
        record = {
            "phase": "parallel",
            "stage": stage,
            "epoch": epoch,
            "lr": lr,
            "loss_pixel": sums["pixel"] / n_batches,
            "loss_perceptual": sums["perceptual"] / n_batches,
            "loss_edge": sums["edge"] / n_batches,
            "loss_total": sums["total"] / n_batches,
        }
        if val_dataset:
            val_psnr, val_ssim = _validate_stage(net, val_dataset, in_level)
            record["val_psnr"] = val_psnr
            record["val_ssim"] = val_ssim
            if val_psnr > best_psnr:
                best_psnr = val_psnr
                best_state = {k: v.detach().clone() for k, v in net.state_dict().items()}
        record["wall_time"] = time.perf_counter() - t0
        if log is not None:
            log.append(**record)
        if checkpoint_dir is not None:
            ckpt_dir = Path(checkpoint_dir)
            ckpt_dir.mkdir(parents=True, exist_ok=True)
            save_checkpoint(
                Cascade([net], metadata={"phase": "parallel", "stage": stage, "epoch": epoch}),
                ckpt_dir / f"stage{stage}_last.ckpt",
            )
    if best_state is not None:
        net.load_state_dict(best_state)
        if checkpoint_dir is not None:
            save_checkpoint(
                Cascade([net], metadata={"phase": "parallel", "stage": stage,
                                         "val_psnr": best_psnr}),
                Path(checkpoint_dir) / f"stage{stage}_best.ckpt",
            )
    return net


def finetune_cascade(
    cascade: Cascade,
    dataset: Sequence[PatchPair],
    schedule: TrainingSchedule,
    weights: LossWeights,
    feature_extractor=None,
    edge_network=None,
    edge_threshold: float = 0.5,
    val_dataset: Optional[Sequence[PatchPair]] = None,
    log: Optional[TrainingLog] = None,
    device: str = "cpu",
) -> Cascade:
    """Phase 2: sequential fine-tuning steps from the second stage to the last.

    At step s, stage s is frozen, the deepest pyramid level runs through
    stages 1..s, and the loss at that output (against the pyramid level
    matching its resolution) updates stages 1..s-1. The stages are modified
    in place; all stages are left thawed afterwards.
    """
    schedule.validate()
    weights.validate()
    n = len(cascade.stages)
    depth = _uniform_depth(dataset, n)
    if val_dataset:
        _uniform_depth(val_dataset, n)
    for net in cascade.stages:
        net.to(device)
    for step in range(2, n + 1):
        for i, net in enumerate(cascade.stages, start=1):
            set_frozen(net, i == step)
        trainable = cascade.stages[: step - 1]
        params = [p for net in trainable for p in net.parameters()]
        optimizer = torch.optim.Adam(
            params,
            lr=schedule.initial_lr * FINETUNE_LR_SCALE,
            betas=(schedule.beta1, schedule.beta2),
        )
        gen = torch.Generator().manual_seed(derive_seed(schedule.seed, "finetune", step))
        best_psnr = -math.inf
        best_states = None
        for epoch in range(schedule.epochs_finetune):
            t0 = time.perf_counter()
            lr = lr_at_epoch(schedule, epoch) * FINETUNE_LR_SCALE
            _set_lr(optimizer, lr)
            for net in trainable:
                net.train()
            sums = {"pixel": 0.0, "perceptual": 0.0, "edge": 0.0, "total": 0.0}
            n_batches = 0
            for batch_idx in _batches(len(dataset), schedule.batch_size, gen):
                inputs = _stack_level(dataset, batch_idx, depth).to(device)
                targets = _stack_level(dataset, batch_idx, depth - step).to(device)
                optimizer.zero_grad()
                out = inputs
                for net in cascade.stages[:step]:
                    out = net(out)
                breakdown = total_loss(
                    out, targets, weights, feature_extractor, edge_network, edge_threshold
                )
                breakdown.total.backward()
                optimizer.step()
                for key, value in breakdown.as_floats().items():
                    sums[key] += value
                n_batches += 1
            record = {
                "phase": "finetune",
                "stage": step,
                "epoch": epoch,
                "lr": lr,
                "loss_pixel": sums["pixel"] / n_batches,
                "loss_perceptual": sums["perceptual"] / n_batches,
                "loss_edge": sums["edge"] / n_batches,
                "loss_total": sums["total"] / n_batches,
            }
            if val_dataset:
                val_psnr, val_ssim = validate_cascade(cascade, val_dataset)
                record["val_psnr"] = val_psnr
                record["val_ssim"] = val_ssim
                if val_psnr > best_psnr:
                    best_psnr = val_psnr
                    best_states = [
                        {k: v.detach().clone() for k, v in net.state_dict().items()}
                        for net in trainable
                    ]
            record["wall_time"] = time.perf_counter() - t0
            if log is not None:
                log.append(**record)
        if best_states is not None:
            for net, state in zip(trainable, best_states):
                net.load_state_dict(state)
    for net in cascade.stages:
        set_frozen(net, False)
    cascade.metadata.setdefault("phases", []).append("finetune")
    return cascade
