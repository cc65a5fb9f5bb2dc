"""Embedding extraction, cosine trial scoring, EER and minDCF."""

from __future__ import annotations

import os
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np
import torch

from .audio import LabeledUtterance, Waveform
from .checkpoint import Checkpoint
from .config import RunConfig
from .model import RawNet3
from .numerics import ContractError, NumericalError


@dataclass(frozen=True)
class TrialPair:
    label: int
    enroll: str
    test: str


@dataclass
class ScoreSet:
    labels: np.ndarray
    scores: np.ndarray

    def __post_init__(self):
        self.labels = np.asarray(self.labels, dtype=int)
        self.scores = np.asarray(self.scores, dtype=float)
        if self.labels.shape != self.scores.shape:
            raise ContractError("labels and scores must align")

    @property
    def targets(self) -> np.ndarray:
        return self.scores[self.labels == 1]

    @property
    def nontargets(self) -> np.ndarray:
        return self.scores[self.labels == 0]

    def validate(self) -> None:
        if self.targets.size == 0 or self.nontargets.size == 0:
            raise ContractError("a score set needs at least one target and one non-target trial")


def _error_rates(s: ScoreSet) -> tuple[np.ndarray, np.ndarray]:
    """Miss and false-alarm rates at thresholds ``-inf``, every distinct score, ``+inf``.

    Miss is ``P(target < t)``, false alarm ``P(nontarget >= t)``.
    """
    s.validate()
    tar = np.sort(s.targets)
    non = np.sort(s.nontargets)
    thresholds = np.concatenate([[-np.inf], np.unique(s.scores), [np.inf]])
    p_miss = np.searchsorted(tar, thresholds, side="left") / tar.size
    p_fa = 1.0 - np.searchsorted(non, thresholds, side="left") / non.size
    return p_miss, p_fa


def eer_from_rates(p_miss: np.ndarray, p_fa: np.ndarray) -> float:
    """Equal error rate with linear interpolation between the bracketing operating points."""
    d = p_miss - p_fa  # non-decreasing in the threshold
    i = int(np.searchsorted(d, 0.0, side="left"))
    if i < d.size and d[i] == 0.0:
        return float(p_miss[i])
    lo, hi = i - 1, i
    alpha = d[lo] / (d[lo] - d[hi])
    return float(p_miss[lo] + alpha * (p_miss[hi] - p_miss[lo]))


def compute_eer(s: ScoreSet) -> float:
    """EER in percent."""
    p_miss, p_fa = _error_rates(s)
    return 100.0 * eer_from_rates(p_miss, p_fa)


def compute_min_dcf(s: ScoreSet, p_target: float = 0.05, c_miss: float = 1.0, c_fa: float = 1.0) -> float:
    """Minimum detection cost, normalised by the best decision that ignores the scores."""
    p_miss, p_fa = _error_rates(s)
    dcf = c_miss * p_target * p_miss + c_fa * (1.0 - p_target) * p_fa
    return float(dcf.min() / min(c_miss * p_target, c_fa * (1.0 - p_target)))


def cosine_score(e1, e2) -> float:
    a = np.asarray(e1, dtype=np.float64).ravel()
    b = np.asarray(e2, dtype=np.float64).ravel()
    na, nb = np.linalg.norm(a), np.linalg.norm(b)
    if na == 0 or nb == 0:
        raise NumericalError("cosine_score: zero-norm embedding")
    return float(a @ b / (na * nb))


# --------------------------------------------------------------------------- models


def encoder_from_checkpoint(ckpt: Checkpoint) -> RawNet3:
    cfg = RunConfig().update(ckpt.config)
    model = RawNet3(cfg.frontend, cfg.model)
    # DINO checkpoints hold two encoders; pick the one fine-tuning would start from
    dino_prefix = f"{cfg.supervised.init_network}.encoder"
    prefix = dino_prefix if ckpt.has_prefix(dino_prefix) else "encoder"
    ckpt.load_into(prefix, model)
    model.eval()
    return model


@torch.no_grad()
def extract_embedding(model: RawNet3 | Checkpoint, w: Waveform) -> np.ndarray:
    """Full-utterance embedding in inference mode."""
    if isinstance(model, Checkpoint):
        model = encoder_from_checkpoint(model)
    need = model.min_samples()
    if len(w) < need:
        raise ContractError(f"utterance has {len(w)} samples; at least {need} are required")
    was_training = model.training
    model.eval()
    x = torch.from_numpy(w.samples.astype(np.float32))[None]
    e = model(x)[0].double().numpy()
    model.train(was_training)
    return e


def embed_corpus(model: RawNet3, utts: Sequence[LabeledUtterance]) -> dict[str, np.ndarray]:
    return {u.path: extract_embedding(model, u.waveform) for u in utts}


def score_trials(embeddings: dict[str, np.ndarray], trials: Iterable[TrialPair]) -> ScoreSet:
    trials = list(trials)
    scores = [cosine_score(embeddings[t.enroll], embeddings[t.test]) for t in trials]
    return ScoreSet([t.label for t in trials], scores)


def make_trials(
    utts: Sequence[LabeledUtterance], n_target: int, n_nontarget: int, rng: np.random.Generator
) -> list[TrialPair]:
    """Random same-speaker and different-speaker pairs without repeats."""
    by_spk: dict[int, list[str]] = {}
    for u in utts:
        by_spk.setdefault(u.speaker_id, []).append(u.path)
    spks = sorted(by_spk)
    tar = [(a, b) for s in spks for i, a in enumerate(by_spk[s]) for b in by_spk[s][i + 1 :]]
    non = [
        (a, b)
        for i, s in enumerate(spks)
        for t in spks[i + 1 :]
        for a in by_spk[s]
        for b in by_spk[t]
    ]
    pick_t = rng.choice(len(tar), size=min(n_target, len(tar)), replace=False)
    pick_n = rng.choice(len(non), size=min(n_nontarget, len(non)), replace=False)
    trials = [TrialPair(1, *tar[i]) for i in sorted(pick_t)] + [TrialPair(0, *non[i]) for i in sorted(pick_n)]
    return trials


def evaluate(model: RawNet3, utts: Sequence[LabeledUtterance], trials: Sequence[TrialPair]) -> tuple[float, float]:
    """(EER %, minDCF) of ``model`` on a trial list over ``utts``."""
    s = score_trials(embed_corpus(model, utts), trials)
    return compute_eer(s), compute_min_dcf(s)


# --------------------------------------------------------------------------- files


def read_trials(path: str | os.PathLike) -> list[TrialPair]:
    out = []
    for lineno, line in enumerate(Path(path).read_text().splitlines(), 1):
        if not line.strip():
            continue
        parts = line.split(" ")
        if len(parts) != 3 or parts[0] not in ("0", "1"):
            raise ContractError(f"{path}:{lineno}: expected '<1|0> <enroll> <test>'")
        out.append(TrialPair(int(parts[0]), parts[1], parts[2]))
    return out


def write_trials(path: str | os.PathLike, trials: Iterable[TrialPair]) -> None:
    Path(path).write_text("".join(f"{t.label} {t.enroll} {t.test}\n" for t in trials))


def write_scores(path: str | os.PathLike, trials: Sequence[TrialPair], scores: Sequence[float]) -> None:
    Path(path).write_text("".join(f"{t.enroll} {t.test} {s:.6f}\n" for t, s in zip(trials, scores)))


def read_scores(path: str | os.PathLike) -> dict[tuple[str, str], float]:
    out = {}
    for lineno, line in enumerate(Path(path).read_text().splitlines(), 1):
        if not line.strip():
            continue
        parts = line.split(" ")
        if len(parts) != 3:
            raise ContractError(f"{path}:{lineno}: expected '<enroll> <test> <score>'")
        out[(parts[0], parts[1])] = float(parts[2])
    return out


def scoreset_from_files(trials_path, scores_path) -> ScoreSet:
    trials = read_trials(trials_path)
    scores = read_scores(scores_path)
    missing = [t for t in trials if (t.enroll, t.test) not in scores]
    if missing:
        raise ContractError(f"{len(missing)} trials have no score, e.g. {missing[0].enroll} {missing[0].test}")
    return ScoreSet([t.label for t in trials], [scores[(t.enroll, t.test)] for t in trials])
