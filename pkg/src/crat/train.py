"""Phase-1 multi-task training and phase-2 self-distillation.

Every random draw is keyed by position rather than by a running generator:
the epoch shuffle comes from ``default_rng([seed, 1, epoch])`` and the
transform classes of a step from ``default_rng([seed, 2, epoch, step])``.
A checkpoint therefore only has to store ``(seed, epoch, step)`` to resume a
run that matches the uninterrupted one step for step.
"""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Callable, Optional

import numpy as np

from .autodiff import SGD, Tensor, cross_entropy, kl_divergence, no_grad
from .data import LabeledDataset, default_m, make_replicated_batch
from .errors import ArgumentError, CheckpointError, NonFiniteError, TrainingDiverged
from .model import Checkpoint, ModelBundle, ModelConfig
from .transforms import TransformFamily

_STREAM_SHUFFLE, _STREAM_CLASSES = 1, 2


@dataclass(frozen=True)
class TrainConfig:
    lam: float = 1.0
    alpha: float = 0.5
    beta: float = 1.0
    lr: float = 0.05
    momentum: float = 0.9
    weight_decay: float = 5e-4
    epochs: int = 30
    batch_size: int = 16
    m: Optional[int] = None  # None: 5 for small families, 1 for Rot256/Rot1024
    family: Optional[str] = "VS16"
    distill_generations: int = 1
    seed: int = 0
    lr_decay_at: float = 0.75
    lr_decay: float = 0.1

    def __post_init__(self):
        if self.lam < 0 or self.alpha < 0 or self.beta < 0:
            raise ArgumentError(f"loss weights must be non-negative (lam={self.lam}, alpha={self.alpha}, beta={self.beta})")
        if self.epochs < 1 or self.batch_size < 1 or self.distill_generations < 1:
            raise ArgumentError("epochs, batch_size and distill_generations must be positive")
        if self.family is not None:
            object.__setattr__(self, "family", TransformFamily.parse(self.family).tag)
        if self.m is not None:
            limit = 1 if self.family is None else TransformFamily.parse(self.family).cardinality
            if not 1 <= self.m <= limit:
                raise ArgumentError(f"m={self.m} outside [1, {limit}] for family {self.family}")

    @property
    def replication(self) -> int:
        return default_m(self.family) if self.m is None else self.m

    def lr_at(self, epoch: int) -> float:
        return self.lr * (self.lr_decay if epoch >= int(self.lr_decay_at * self.epochs) else 1.0)

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        return cls(**d)


# ----------------------------------------------------------------------
# losses
# ----------------------------------------------------------------------


def crat_loss(comp_logits: Tensor, rot_labels) -> Tensor:
    return cross_entropy(comp_logits, rot_labels)


def phase1_loss(sup_logits: Tensor, y, comp_logits: Optional[Tensor], y_r, lam: float) -> Tensor:
    """Supervised CE plus ``lam`` times the rotation CE.

    With ``lam == 0`` (or no rotation head) the auxiliary term is not built
    at all, so the graph is exactly the supervised-only one.
    """
    sup = cross_entropy(sup_logits, y)
    if lam == 0 or comp_logits is None:
        return sup
    return sup + lam * crat_loss(comp_logits, y_r)


def phase2_loss(
    sup_logits: Tensor,
    comp_logits: Optional[Tensor],
    teacher_sup_logits,
    y,
    y_r,
    alpha: float,
    beta: float,
    lam: float,
) -> Tensor:
    """``alpha * phase1 + beta * KL(teacher || student)`` on the supervised logits."""
    total = phase1_loss(sup_logits, y, comp_logits, y_r, lam)
    if alpha != 1:
        total = alpha * total
    if beta == 0:
        return total
    return total + beta * kl_divergence(sup_logits, teacher_sup_logits)


# ----------------------------------------------------------------------
# trainer
# ----------------------------------------------------------------------


def model_config_for(config: TrainConfig, dataset: LabeledDataset, widths=(32, 64, 128, 128)) -> ModelConfig:
    c, h, _ = dataset.image_shape
    return ModelConfig(
        in_channels=c,
        image_size=h,
        widths=tuple(widths),
        num_base_classes=len(dataset.classes("base")),
        family=config.family,
    )


_ACC_KEYS = ("sup_loss", "aux_loss", "kl_loss", "sup_correct", "rot_correct", "count", "steps")


class Trainer:
    """Resumable SGD loop for either phase.

    ``teacher`` switches on phase 2.  The teacher runs with batch statistics
    and no running-stat update, exactly like the student's own forward pass,
    so a teacher identical to the student yields a KL of zero.
    """

    def __init__(
        self,
        config: TrainConfig,
        dataset: LabeledDataset,
        model: Optional[ModelBundle] = None,
        teacher: Optional[ModelBundle] = None,
        phase: str = "phase1",
        widths=(32, 64, 128, 128),
    ):
        self.config = config
        self.dataset = dataset
        self.model = model if model is not None else ModelBundle(model_config_for(config, dataset, widths), config.seed)
        if teacher is not None and teacher.config != self.model.config:
            raise CheckpointError(
                f"teacher architecture {teacher.config.to_dict()} does not match student {self.model.config.to_dict()}"
            )
        self.teacher = teacher
        self.phase = phase
        self.base = dataset.indices("base")
        if len(self.base) < config.batch_size:
            raise ArgumentError(f"only {len(self.base)} base images for batch size {config.batch_size}")
        self.steps_per_epoch = len(self.base) // config.batch_size
        self.optimizer = SGD(self.model.params, config.lr, config.momentum, config.weight_decay)
        self.epoch = 0
        self.step = 0
        self.log: list[dict] = []
        self.step_losses: list[float] = []
        self._acc = dict.fromkeys(_ACC_KEYS, 0.0)
        self._order: Optional[np.ndarray] = None
        self.last_good: Optional[Checkpoint] = None

    # -- state ------------------------------------------------------------
    @property
    def done(self) -> bool:
        return self.epoch >= self.config.epochs

    def checkpoint(self) -> Checkpoint:
        return Checkpoint(
            model=self.model.copy(),
            phase=self.phase,
            config=self.config.to_dict(),
            rng_state={"seed": self.config.seed, "epoch": self.epoch, "step": self.step},
            velocity={k: v.copy() for k, v in self.optimizer.velocity.items()},
            extra={"log": list(self.log), "epoch_acc": dict(self._acc)},
        )

    @classmethod
    def resume(cls, ckpt: Checkpoint, dataset: LabeledDataset, teacher: Optional[ModelBundle] = None) -> "Trainer":
        config = TrainConfig.from_dict(ckpt.config)
        trainer = cls(config, dataset, model=ckpt.model.copy(), teacher=teacher, phase=ckpt.phase)
        if ckpt.rng_state.get("seed") != config.seed:
            raise CheckpointError("checkpoint data-stream seed does not match its config")
        trainer.epoch = int(ckpt.rng_state["epoch"])
        trainer.step = int(ckpt.rng_state["step"])
        trainer.optimizer.velocity = {k: v.copy() for k, v in ckpt.velocity.items()}
        trainer.log = list(ckpt.extra.get("log", []))
        trainer._acc = {k: float(v) for k, v in ckpt.extra.get("epoch_acc", trainer._acc).items()}
        return trainer

    # -- data -------------------------------------------------------------
    def _epoch_order(self) -> np.ndarray:
        if self._order is None or self._order_epoch != self.epoch:
            rng = np.random.default_rng([self.config.seed, _STREAM_SHUFFLE, self.epoch])
            self._order = rng.permutation(self.base)
            self._order_epoch = self.epoch
        return self._order

    def batch(self, epoch: Optional[int] = None, step: Optional[int] = None):
        epoch = self.epoch if epoch is None else epoch
        step = self.step if step is None else step
        saved = self.epoch
        self.epoch = epoch
        order = self._epoch_order()
        self.epoch = saved
        B = self.config.batch_size
        idx = order[step * B : (step + 1) * B]
        rng = np.random.default_rng([self.config.seed, _STREAM_CLASSES, epoch, step])
        return make_replicated_batch(self.dataset, idx, self.config.family, self.config.replication, rng)

    # -- one step ---------------------------------------------------------
    def train_step(self) -> dict:
        cfg = self.config
        batch = self.batch()
        x = Tensor(batch.images)
        feats = self.model.forward_features(x, "train")
        sup_logits = self.model.forward_sup(feats)
        use_aux = self.model.has_comp_head and cfg.lam != 0
        comp_logits = self.model.forward_comp(feats) if use_aux else None

        teacher_logits = None
        if self.teacher is not None:
            with no_grad():
                teacher_logits = self.teacher.forward_sup(self.teacher.forward_features(x, "batch"))
            loss = phase2_loss(
                sup_logits, comp_logits, teacher_logits, batch.sup_labels, batch.rot_labels, cfg.alpha, cfg.beta, cfg.lam
            )
        else:
            loss = phase1_loss(sup_logits, batch.sup_labels, comp_logits, batch.rot_labels, cfg.lam)

        value = loss.item()
        if not math.isfinite(value):
            raise TrainingDiverged(f"loss became {value} at epoch {self.epoch} step {self.step}", self.last_good)
        self.optimizer.lr = cfg.lr_at(self.epoch)
        self.optimizer.zero_grad()
        loss.backward()
        try:
            self.optimizer.step()
        except NonFiniteError as exc:
            raise TrainingDiverged(f"{exc} at epoch {self.epoch} step {self.step}", self.last_good) from exc

        parts = self._parts(batch, sup_logits, comp_logits, teacher_logits)
        parts["loss"] = value
        self.step_losses.append(value)
        for k in ("sup_loss", "aux_loss", "kl_loss"):
            self._acc[k] += parts[k]
        self._acc["sup_correct"] += parts["sup_correct"]
        self._acc["rot_correct"] += parts["rot_correct"]
        self._acc["count"] += len(batch)
        self._acc["steps"] += 1

        self.step += 1
        if self.step == self.steps_per_epoch:
            self._close_epoch()
        return parts

    def _parts(self, batch, sup_logits, comp_logits, teacher_logits) -> dict:
        with no_grad():
            sup = cross_entropy(sup_logits, batch.sup_labels).item()
            aux = crat_loss(comp_logits, batch.rot_labels).item() if comp_logits is not None else 0.0
            kl = kl_divergence(sup_logits, teacher_logits).item() if teacher_logits is not None else 0.0
        rot_correct = int(np.sum(comp_logits.data.argmax(1) == batch.rot_labels)) if comp_logits is not None else 0
        return {
            "sup_loss": sup,
            "aux_loss": aux,
            "kl_loss": kl,
            "sup_correct": int(np.sum(sup_logits.data.argmax(1) == batch.sup_labels)),
            "rot_correct": rot_correct,
        }

    def _close_epoch(self) -> None:
        a = self._acc
        steps, count = max(a["steps"], 1), max(a["count"], 1)
        self.log.append(
            {
                "epoch": self.epoch,
                "sup_loss": a["sup_loss"] / steps,
                "aux_loss": a["aux_loss"] / steps,
                "kl_loss": a["kl_loss"] / steps,
                "sup_acc": a["sup_correct"] / count,
                "rot_acc": a["rot_correct"] / count,
                "lr": self.config.lr_at(self.epoch),
            }
        )
        self._acc = dict.fromkeys(_ACC_KEYS, 0.0)
        self.epoch += 1
        self.step = 0
        self.last_good = self.checkpoint()

    def run(self, max_steps: Optional[int] = None, on_epoch: Optional[Callable[[dict], None]] = None) -> "Trainer":
        """Train until done, or for at most ``max_steps`` further steps."""
        taken = 0
        while not self.done and (max_steps is None or taken < max_steps):
            epochs_before = len(self.log)
            self.train_step()
            taken += 1
            if on_epoch is not None and len(self.log) > epochs_before:
                on_epoch(self.log[-1])
        return self


def write_log(log: list[dict], path) -> None:
    Path(path).write_text("".join(json.dumps(rec, sort_keys=True) + "\n" for rec in log))


def train_phase1(config: TrainConfig, dataset: LabeledDataset, widths=(32, 64, 128, 128), on_epoch=None) -> Checkpoint:
    if not dataset.classes("base"):
        raise ArgumentError("dataset has no base classes")
    trainer = Trainer(config, dataset, phase="phase1", widths=widths).run(on_epoch=on_epoch)
    return trainer.checkpoint()


def distill_phase2(
    config: TrainConfig, dataset: LabeledDataset, teacher: Checkpoint, on_epoch=None
) -> tuple[Checkpoint, list[list[dict]]]:
    """Run ``distill_generations`` rounds; each student becomes the next teacher.

    Students start from the same seeded initialization as a phase-1 run, so
    with ``beta=0, alpha=1`` a generation reproduces phase 1 exactly.
    Returns the final student and the per-generation epoch logs.
    """
    current = teacher.model
    logs = []
    ckpt = teacher
    for gen in range(1, config.distill_generations + 1):
        student = ModelBundle(current.config, config.seed)
        trainer = Trainer(config, dataset, model=student, teacher=current, phase=f"phase2-gen{gen}")
        trainer.run(on_epoch=on_epoch)
        ckpt = trainer.checkpoint()
        logs.append(trainer.log)
        current = ckpt.model
    return ckpt, logs


def rotation_accuracy(model: ModelBundle, dataset: LabeledDataset, family, split: str = "base", batch_size: int = 128) -> float:
    """Eval-mode rotation-head accuracy over every image under every class of ``family``."""
    from .transforms import all_classes, apply

    fam = TransformFamily.parse(family)
    idx = dataset.indices(split)
    correct = total = 0
    with no_grad():
        for cls in all_classes(fam):
            imgs = np.stack([apply(cls, dataset.images[i]) for i in idx])
            for s in range(0, len(imgs), batch_size):
                feats = model.forward_features(Tensor(imgs[s : s + batch_size]), "eval")
                pred = model.forward_comp(feats).data.argmax(1)
                correct += int(np.sum(pred == cls.index))
                total += len(pred)
    return correct / total
