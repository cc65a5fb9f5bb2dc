"""Supervised AAM-softmax training, DINO self-distillation and fine-tuning from a DINO checkpoint."""

from __future__ import annotations

import contextlib
import copy
import logging
import math
import warnings
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np
import torch

from .audio import LabeledUtterance, augment, make_views, random_crop
from .checkpoint import Checkpoint
from .config import RunConfig
from .head import ClassifierHead
from .losses import DinoCenter, aam_softmax_loss, dino_loss, entropy, sharpen, update_teacher
from .model import DinoNetwork, RawNet3, build_dino_network
from .numerics import AdamState, ContractError, NumericalError, SgdrSchedule, adam_step

log = logging.getLogger(__name__)


class CollapseWarning(RuntimeWarning):
    pass


@dataclass
class TrainResult:
    checkpoint: Checkpoint
    encoder: RawNet3
    step_losses: list[float] = field(default_factory=list)
    epoch_losses: list[float] = field(default_factory=list)
    lrs: list[float] = field(default_factory=list)
    epoch_entropy: list[float] = field(default_factory=list)
    collapsed: bool = False
    uniform: bool = False


class TraceLog:
    """``step loss lr [entropy]`` lines appended to a plain-text file."""

    def __init__(self, path: str | Path | None, interval: int = 10):
        self.path = Path(path) if path else None
        self.interval = max(1, interval)

    def write(self, step: int, loss: float, lr: float, ent: float | None = None) -> None:
        if self.path is None or step % self.interval:
            return
        line = f"{step} {loss:.6f} {lr:.8g}"
        if ent is not None:
            line += f" {ent:.6f}"
        with self.path.open("a") as f:
            f.write(line + "\n")


def seed_everything(seed: int) -> np.random.Generator:
    torch.manual_seed(seed)
    return np.random.default_rng(seed)


def _batches(n: int, batch_size: int, rng: np.random.Generator) -> list[np.ndarray]:
    order = rng.permutation(n)
    out = [order[i : i + batch_size] for i in range(0, n, batch_size)]
    # train-mode batch norm needs two samples per channel
    if len(out) > 1 and out[-1].size < 2:
        out[-2] = np.concatenate([out[-2], out[-1]])
        out.pop()
    return out


def _stack(waves) -> torch.Tensor:
    return torch.from_numpy(np.stack([w.samples for w in waves]).astype(np.float32))


def _check_finite(loss: torch.Tensor, step: int, epoch: int, lr: float) -> None:
    if not torch.isfinite(loss):
        raise NumericalError(f"non-finite loss {loss.item()} at step {step} (epoch {epoch}, lr {lr:.3g})")


def _label_space(corpus: Sequence[LabeledUtterance]) -> int:
    if any(u.speaker_id is None for u in corpus):
        raise ContractError("supervised training needs every utterance labelled")
    labels = sorted({u.speaker_id for u in corpus})
    if len(labels) < 2:
        raise ContractError("supervised training needs at least 2 speakers")
    if labels != list(range(len(labels))):
        raise ContractError("speaker ids must form a contiguous 0..S-1 range")
    return len(labels)


def train_supervised(
    corpus: Sequence[LabeledUtterance],
    cfg: RunConfig,
    seed: int | None = None,
    init: Checkpoint | None = None,
    log_path: str | Path | None = None,
    flow: str = "supervised",
) -> TrainResult:
    """Closed-set speaker classification with AAM-softmax; the classifier is dropped afterwards."""
    seed = cfg.seed if seed is None else seed
    n_speakers = _label_space(corpus)
    sc = cfg.supervised
    rng = seed_everything(seed)
    encoder = RawNet3(cfg.frontend, cfg.model)
    if init is not None:
        dino_prefix = f"{sc.init_network}.encoder"
        prefix = dino_prefix if init.has_prefix(dino_prefix) else "encoder"
        init.load_into(prefix, encoder)
    head = ClassifierHead(encoder.embed_dim, n_speakers)
    params = [p for p in list(encoder.parameters()) + list(head.parameters()) if p.requires_grad]
    state = AdamState.for_params(params)
    aam = cfg.aam
    trace = TraceLog(log_path, cfg.get("run.log_interval"))

    labels = np.array([u.speaker_id for u in corpus])
    steps_per_epoch = len(_batches(len(corpus), sc.batch_size, np.random.default_rng(0)))
    sched = SgdrSchedule(sc.lr_max, sc.lr_min, max(1, sc.restart_epochs * steps_per_epoch))
    result = TrainResult(Checkpoint(), encoder)
    step = 0
    encoder.train()
    for epoch in range(sc.epochs):
        losses = []
        for idx in _batches(len(corpus), sc.batch_size, rng):
            waves = [augment(random_crop(corpus[i].waveform, sc.crop_seconds, rng), cfg.augment, rng) for i in idx]
            x = _stack(waves)
            y = torch.from_numpy(labels[idx]).long()
            lr = sched(step)
            loss = aam_softmax_loss(encoder(x), y, head.weight, aam)
            _check_finite(loss, step, epoch, lr)
            grads = torch.autograd.grad(loss, params, allow_unused=True)
            adam_step(params, grads, state, lr, sc.weight_decay)
            losses.append(loss.item())
            result.lrs.append(lr)
            trace.write(step, losses[-1], lr)
            step += 1
        result.step_losses.extend(losses)
        result.epoch_losses.append(float(np.mean(losses)))
        log.info("%s epoch %d loss %.4f", flow, epoch, result.epoch_losses[-1])

    ckpt = result.checkpoint
    ckpt.add_module("encoder", encoder)
    ckpt.add_module("classifier", head)
    ckpt.config = cfg.flat()
    ckpt.meta = {"flow": flow, "seed": str(seed), "step": str(step), "speakers": str(n_speakers)}
    encoder.eval()
    return result


def finetune(
    ckpt: Checkpoint,
    corpus: Sequence[LabeledUtterance],
    cfg: RunConfig,
    seed: int | None = None,
    log_path: str | Path | None = None,
) -> TrainResult:
    """Supervised training initialised from a DINO checkpoint encoder, the teacher unless ``supervised.init_network`` says student."""
    return train_supervised(corpus, cfg, seed, init=ckpt, log_path=log_path, flow="finetune")


@dataclass
class DinoTrainState:
    student: DinoNetwork
    teacher: DinoNetwork
    center: DinoCenter
    optimizer: AdamState
    step: int = 0

    @classmethod
    def create(cls, cfg: RunConfig) -> "DinoTrainState":
        student = build_dino_network(cfg.frontend, cfg.model, cfg.dino_head)
        teacher = copy.deepcopy(student)
        teacher.requires_grad_(False)
        teacher.eval()
        params = [p for p in student.parameters() if p.requires_grad]
        return cls(student, teacher, DinoCenter(cfg.dino_head.out_dim), AdamState.for_params(params))


@contextlib.contextmanager
def batch_stats(module: torch.nn.Module):
    """Batch-norm layers normalise with batch statistics; running buffers are left untouched."""
    bns = [m for m in module.modules() if isinstance(m, torch.nn.modules.batchnorm._BatchNorm)]
    saved = [(m.training, m.track_running_stats) for m in bns]
    for m in bns:
        m.train()
        m.track_running_stats = False
    try:
        yield
    finally:
        for m, (training, track) in zip(bns, saved):
            m.training = training
            m.track_running_stats = track


def train_dino(
    corpus: Sequence[LabeledUtterance],
    cfg: RunConfig,
    seed: int | None = None,
    state: DinoTrainState | None = None,
    log_path: str | Path | None = None,
) -> TrainResult:
    """Label-free self-distillation: an EMA teacher on the global views supervises the student on all views."""
    if not corpus:
        raise ContractError("DINO training needs a non-empty corpus")
    seed = cfg.seed if seed is None else seed
    rng = seed_everything(seed)
    state = state or DinoTrainState.create(cfg)
    dc, tc, views = cfg.dino, cfg.dino_train, cfg.views
    student, teacher, center = state.student, state.teacher, state.center
    params = [p for p in student.parameters() if p.requires_grad]
    trace = TraceLog(log_path, cfg.get("run.log_interval"))
    k = cfg.dino_head.out_dim
    steps_per_epoch = len(_batches(len(corpus), tc.batch_size, np.random.default_rng(0)))
    total = tc.epochs * steps_per_epoch
    sched = SgdrSchedule(tc.lr_max, tc.lr_min, max(1, tc.restart_epochs * steps_per_epoch))
    # the EMA teacher is the network evaluated and fine-tuned by default
    result = TrainResult(Checkpoint(), teacher.encoder)

    student.train()
    teacher.eval()
    for epoch in range(tc.epochs):
        losses, ents = [], []
        for idx in _batches(len(corpus), tc.batch_size, rng):
            sets = [make_views(corpus[i].waveform, views, rng) for i in idx]
            globals_ = [_stack([s.globals[g] for s in sets]) for g in range(2)]
            locals_ = [_stack([s.locals[j] for s in sets]) for j in range(views.n_local)]
            b = len(idx)
            step = state.step
            lr = sched(step)
            tau_t = dc.teacher_temp(step, total)

            bn_ctx = batch_stats(teacher) if dc.teacher_batch_stats else contextlib.nullcontext()
            with torch.no_grad(), bn_ctx:
                t_out = teacher(torch.cat(globals_))
                t_probs = sharpen(t_out, tau_t, center.c).split(b)
            s_glob = student(torch.cat(globals_)).split(b)
            s_loc = student(torch.cat(locals_)).split(b) if locals_ else ()
            loss = dino_loss(t_probs, list(s_glob) + list(s_loc), dc.tau_s)
            _check_finite(loss, step, epoch, lr)
            grads = torch.autograd.grad(loss, params, allow_unused=True)
            if any(p.grad is not None for p in teacher.parameters()):
                raise ContractError("gradient reached teacher parameters")
            adam_step(params, grads, state.optimizer, lr, tc.weight_decay)
            update_teacher(teacher, student, dc.teacher_momentum)
            center.update(t_out, dc.center_momentum)
            state.step += 1

            ent = float(entropy(torch.cat(t_probs)).mean())
            losses.append(loss.item())
            ents.append(ent)
            result.lrs.append(lr)
            trace.write(step, losses[-1], lr, ent)
        result.step_losses.extend(losses)
        result.epoch_losses.append(float(np.mean(losses)))
        result.epoch_entropy.append(float(np.mean(ents)))
        _collapse_check(result, epoch, k, tc.collapse_ratio)
        log.info("dino epoch %d loss %.4f entropy %.4f", epoch, result.epoch_losses[-1], result.epoch_entropy[-1])

    ckpt = result.checkpoint
    ckpt.add_module("student", student)
    ckpt.add_module("teacher", teacher)
    ckpt.add_module("center", center)
    ckpt.config = cfg.flat()
    ckpt.meta = {"flow": "dino", "seed": str(seed), "step": str(state.step)}
    student.eval()
    return result


def _collapse_check(result: TrainResult, epoch: int, k: int, ratio: float) -> None:
    """Flag an epoch whose mean teacher entropy sits near either end of [0, ln K]."""
    ent = result.epoch_entropy[-1]
    ln_k = math.log(k)
    if ent < ratio * ln_k:
        result.collapsed = True
        warnings.warn(
            f"DINO collapse: epoch {epoch} teacher entropy {ent:.4f} < {ratio} * ln K ({ratio * ln_k:.4f})",
            CollapseWarning,
            stacklevel=3,
        )
    elif ent > (1.0 - ratio * 1e-2) * ln_k:
        result.uniform = True
        warnings.warn(
            f"DINO collapse to uniform: epoch {epoch} teacher entropy {ent:.4f} ~ ln K ({ln_k:.4f})",
            CollapseWarning,
            stacklevel=3,
        )
