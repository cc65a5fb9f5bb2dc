import math
import warnings

import numpy as np
import pytest
import torch
import torch.nn as nn

from rawnet3.audio import synth_corpus
from rawnet3.checkpoint import Checkpoint
from rawnet3.config import RunConfig
from rawnet3.evaluation import extract_embedding
from rawnet3.losses import update_teacher
from rawnet3.numerics import ContractError, NumericalError, SgdrSchedule
from rawnet3.training import (
    CollapseWarning,
    DinoTrainState,
    TraceLog,
    _batches,
    batch_stats,
    finetune,
    train_dino,
    train_supervised,
)

TINY = {
    "frontend.n_filters": "8",
    "frontend.kernel_len": "63",
    "frontend.stride": "16",
    "model.channels": "16",
    "model.out_channels": "24",
    "model.scale": "4",
    "model.afms_ratio": "4",
    "model.attn_bottleneck": "8",
    "model.embed_dim": "8",
    "dino_head.hidden": "16",
    "dino_head.bottleneck": "8",
    "dino_head.out_dim": "32",
    "supervised.epochs": "2",
    "supervised.batch_size": "4",
    "supervised.crop_seconds": "0.5",
    "supervised.restart_epochs": "1",
    "dino_train.epochs": "2",
    "dino_train.batch_size": "4",
    "views.global_seconds": "0.6",
    "views.local_seconds": "0.3",
    "views.n_local": "2",
}


def tiny_cfg(**extra):
    cfg = RunConfig.from_profile("desk").update(TINY)
    return cfg.update({k.replace("__", "."): str(v) for k, v in extra.items()})


@pytest.fixture(scope="module")
def labeled():
    return synth_corpus(3, 4, 1.0, 5)


@pytest.fixture(scope="module")
def unlabeled():
    return synth_corpus(4, 2, 1.0, 6, labeled=False)


def test_batches_cover_and_merge_singletons():
    rng = np.random.default_rng(0)
    parts = _batches(9, 4, rng)
    assert [p.size for p in parts] == [4, 5]
    assert sorted(np.concatenate(parts).tolist()) == list(range(9))
    assert [p.size for p in _batches(8, 4, rng)] == [4, 4]


def test_supervised_deterministic_and_lr_trace(labeled, tmp_path):
    cfg = tiny_cfg()
    a = train_supervised(labeled, cfg, seed=3, log_path=tmp_path / "a.log")
    b = train_supervised(labeled, cfg, seed=3)
    assert a.step_losses == b.step_losses
    assert a.checkpoint.to_bytes() == b.checkpoint.to_bytes()
    steps = len(a.step_losses)
    assert steps == 2 * 3
    sched = SgdrSchedule(1e-3, 5e-6, 3)
    assert a.lrs == [sched(i) for i in range(steps)]
    lines = (tmp_path / "a.log").read_text().splitlines()
    assert lines[0].split()[0] == "0" and len(lines[0].split()) == 3
    assert a.checkpoint.meta["flow"] == "supervised"
    assert a.checkpoint.tensors["classifier.weight"].shape == (3, 8)


def test_supervised_rejects_bad_corpora(labeled, unlabeled):
    one = [u for u in labeled if u.speaker_id == 0]
    with pytest.raises(ContractError, match="2 speakers"):
        train_supervised(one, tiny_cfg())
    with pytest.raises(ContractError, match="labelled"):
        train_supervised(unlabeled, tiny_cfg())


def test_supervised_non_finite_aborts(labeled):
    cfg = tiny_cfg(supervised__lr_max=1e30, supervised__lr_min=1e29, supervised__epochs=3)
    with pytest.raises(NumericalError, match="step"):
        train_supervised(labeled, cfg, seed=0)


def test_supervised_loss_decreases():
    corpus = synth_corpus(4, 4, 1.0, 8)
    cfg = tiny_cfg(supervised__epochs=5, supervised__restart_epochs=5)
    res = train_supervised(corpus, cfg, seed=0)
    assert res.epoch_losses[-1] < res.epoch_losses[0]


def test_finetune_zero_epochs_keeps_embeddings(labeled, unlabeled):
    cfg = tiny_cfg()
    dino = train_dino(unlabeled, cfg, seed=1)
    ft = finetune(dino.checkpoint, labeled, tiny_cfg(supervised__epochs=0), seed=2)
    dino.encoder.eval()
    w = labeled[0].waveform
    np.testing.assert_array_equal(extract_embedding(ft.encoder, w), extract_embedding(dino.encoder, w))
    assert ft.checkpoint.meta["flow"] == "finetune"
    assert ft.checkpoint.tensors["classifier.weight"].shape == (3, 8)


@pytest.mark.parametrize("network", ["teacher", "student"])
def test_finetune_init_network(labeled, unlabeled, network):
    cfg = tiny_cfg(dino__teacher_momentum=0.5)
    dino = train_dino(unlabeled, cfg, seed=1)
    ft = finetune(dino.checkpoint, labeled, tiny_cfg(supervised__epochs=0, supervised__init_network=network))
    other = "student" if network == "teacher" else "teacher"
    differs = False
    for name, t in ft.checkpoint.tensors.items():
        if name.startswith("encoder."):
            np.testing.assert_array_equal(t, dino.checkpoint.tensors[f"{network}.{name}"], err_msg=name)
            differs |= not np.array_equal(t, dino.checkpoint.tensors[f"{other}.{name}"])
    assert differs
    with pytest.raises(Exception, match="init_network"):
        tiny_cfg(supervised__init_network="both").supervised


def test_finetune_architecture_mismatch(labeled, unlabeled):
    dino = train_dino(unlabeled, tiny_cfg(dino_train__epochs=1), seed=1)
    with pytest.raises(Exception, match="architecture mismatch"):
        finetune(dino.checkpoint, labeled, tiny_cfg(model__channels=32), seed=0)


def test_dino_flow(unlabeled, tmp_path):
    cfg = tiny_cfg()
    res = train_dino(unlabeled, cfg, seed=4, log_path=tmp_path / "d.log")
    again = train_dino(unlabeled, cfg, seed=4)
    assert res.step_losses == again.step_losses
    assert len(res.epoch_entropy) == 2
    assert all(0 <= e <= math.log(32) + 1e-6 for e in res.epoch_entropy)
    ck = res.checkpoint
    assert ck.has_prefix("student.encoder") and ck.has_prefix("teacher.head") and "center.c" in ck.tensors
    lines = (tmp_path / "d.log").read_text().splitlines()
    assert len(lines[0].split()) == 4
    assert ck.to_bytes() == Checkpoint.from_bytes(ck.to_bytes()).to_bytes()


def test_dino_teacher_never_gets_gradients(unlabeled):
    cfg = tiny_cfg(dino_train__epochs=1)
    state = DinoTrainState.create(cfg)
    train_dino(unlabeled, cfg, seed=0, state=state)
    assert all(p.grad is None and not p.requires_grad for p in state.teacher.parameters())
    assert not state.teacher.training
    assert state.step == 2


def test_dino_teacher_is_ema_of_student(unlabeled):
    cfg = tiny_cfg(dino_train__epochs=1, dino__teacher_momentum=0.0)
    state = DinoTrainState.create(cfg)
    train_dino(unlabeled, cfg, seed=0, state=state)
    for (n, t), s in zip(state.teacher.named_parameters(), state.student.parameters()):
        torch.testing.assert_close(t, s, rtol=0, atol=0, msg=n)


def test_ema_teacher_is_convex_combination_of_history():
    # scalar model: teacher after n steps equals the closed-form weighted history
    lam = 0.9
    t = nn.Linear(1, 1, bias=False, dtype=torch.float64)
    s = nn.Linear(1, 1, bias=False, dtype=torch.float64)
    with torch.no_grad():
        t.weight.fill_(0.5)
    history = []
    for i in range(30):
        with torch.no_grad():
            s.weight.fill_(math.sin(i))
        history.append(math.sin(i))
        update_teacher(t, s, lam)
    n = len(history)
    weights = [(1 - lam) * lam ** (n - 1 - i) for i in range(n)] + [lam**n]
    values = history + [0.5]
    assert math.isclose(sum(weights), 1.0, rel_tol=1e-12)
    assert t.weight.item() == pytest.approx(sum(w * v for w, v in zip(weights, values)), abs=1e-12)


def test_batch_stats_context_leaves_buffers_alone():
    bn = nn.BatchNorm1d(3).eval()
    x = torch.randn(8, 3) * 5 + 2
    before = bn.running_mean.clone()
    with batch_stats(bn):
        y = bn(x)
    assert not bn.training and bn.track_running_stats
    torch.testing.assert_close(bn.running_mean, before, rtol=0, atol=0)
    torch.testing.assert_close(y.mean(0), torch.zeros(3), atol=1e-5, rtol=0)


def test_collapse_warning_on_sharpened_collapse(unlabeled):
    # a huge last layer with a tiny teacher temperature forces one-hot teacher outputs
    cfg = tiny_cfg(dino_train__epochs=1, dino__tau_t=1e-4)
    state = DinoTrainState.create(cfg)
    with torch.no_grad():
        state.teacher.head.last.weight.mul_(1e3)
    with pytest.warns(CollapseWarning, match="collapse"):
        res = train_dino(unlabeled, cfg, seed=0, state=state)
    assert res.collapsed


def test_uniform_collapse_warning(unlabeled):
    cfg = tiny_cfg(dino_train__epochs=1, dino__tau_t=10.0, dino__tau_s=10.0)
    with pytest.warns(CollapseWarning, match="uniform"):
        res = train_dino(unlabeled, cfg, seed=0)
    assert res.uniform and not res.collapsed


def test_healthy_run_does_not_warn(unlabeled):
    with warnings.catch_warnings():
        warnings.simplefilter("error", CollapseWarning)
        train_dino(unlabeled, tiny_cfg(dino_train__epochs=1), seed=0)


def test_trace_log_interval(tmp_path):
    log = TraceLog(tmp_path / "t.log", interval=2)
    for i in range(5):
        log.write(i, 1.0 / (i + 1), 1e-3)
    assert [l.split()[0] for l in (tmp_path / "t.log").read_text().splitlines()] == ["0", "2", "4"]
    TraceLog(None).write(0, 1.0, 1.0)


def test_empty_dino_corpus():
    with pytest.raises(ContractError):
        train_dino([], tiny_cfg())
