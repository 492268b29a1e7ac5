import csv
import math

import pytest
import torch

from conftest import finite_difference_check, random_batch, tiny_model
from deskllm.config import EngineConfig, TrainConfig
from deskllm.training import (
    Batch,
    TrainingDiverged,
    build_optimizer,
    lr_at,
    masked_cross_entropy,
    pack_documents,
    pretrain_batches,
    sft_batch,
    train,
    train_step,
)

A, B, C, D, E = 1, 2, 3, 4, 9


def test_pack_hand_example():
    rows = list(pack_documents([[A, B], [C, D]], 3, E, seed=None))
    assert rows == [[A, B, E]]


def test_pack_exact_context_doc():
    assert list(pack_documents([[A, B, C]], 3, E, seed=None)) == [[A, B, C]]


def test_pack_empty_and_determinism():
    assert list(pack_documents([], 4, E)) == []
    docs = [[i] * (i + 1) for i in range(20)]
    assert list(pack_documents(docs, 5, E, seed=3)) == list(pack_documents(docs, 5, E, seed=3))
    assert list(pack_documents(docs, 5, E, seed=3)) != list(pack_documents(docs, 5, E, seed=4))


def test_pretrain_batches_shapes():
    tc = TrainConfig(batch_size=2, context=4)
    b = next(pretrain_batches([list(range(1, 30))], tc, 0))
    assert b.inputs.shape == (2, 4) and torch.equal(b.inputs[:, 1:], b.targets[:, :-1])
    assert b.loss_mask.sum() == 8


def test_lr_schedule_endpoints():
    tc = TrainConfig(peak_lr=3e-4, warmup_steps=100, total_steps=1000)
    assert lr_at(0, tc) == 0.0
    assert lr_at(100, tc) == 3e-4
    assert lr_at(1000, tc) == 0.1 * 3e-4
    assert lr_at(50, tc) == 1.5e-4
    lrs = [lr_at(s, tc) for s in range(100, 1001)]
    assert all(x >= y for x, y in zip(lrs, lrs[1:]))


def test_peak_lr_parses_from_config():
    cfg = EngineConfig.from_dict({"model": {"vocab_size": 100, "hidden": 16, "n_heads": 2, "n_layers": 1,
                                            "train_context": 8}, "train": {"peak_lr": 3.0e-4}})
    assert cfg.train.peak_lr == 3.0e-4


def test_cross_entropy_uniform_is_ln_v():
    logits = torch.zeros(5, 7, 50, dtype=torch.float64)
    t = torch.randint(0, 50, (5, 7))
    loss, nll = masked_cross_entropy(logits, t, torch.ones(5, 7))
    assert abs(loss.item() - math.log(50)) < 1e-14
    assert nll.shape == (5, 7)


def test_cross_entropy_subset_and_masked_gradient():
    g = torch.Generator().manual_seed(0)
    logits = torch.randn(2, 10, 30, dtype=torch.float64, generator=g, requires_grad=True)
    t = torch.randint(0, 30, (2, 10), generator=g)
    mask = torch.zeros(2, 10)
    mask[:, ::2] = 1
    loss, _ = masked_cross_entropy(logits, t, mask)
    kept, _ = masked_cross_entropy(logits[:, ::2], t[:, ::2], torch.ones(2, 5))
    assert abs(loss.item() - kept.item()) < 1e-12
    loss.backward()
    assert torch.all(logits.grad[:, 1::2] == 0)
    with pytest.raises(ValueError):
        masked_cross_entropy(logits, t, torch.zeros(2, 10))


def test_masked_targets_do_not_affect_gradients():
    model = tiny_model()
    b = random_batch(61)
    grads = []
    for targets in (b.targets, torch.where(b.loss_mask.bool(), b.targets, (b.targets + 7) % 61)):
        model.zero_grad()
        loss, _ = masked_cross_entropy(model(b.inputs), targets, b.loss_mask)
        loss.backward()
        grads.append([p.grad.clone() for p in model.parameters()])
    assert all(torch.equal(x, y) for x, y in zip(*grads))


def test_finite_difference_gradients():
    model = tiny_model()
    worst, seen = finite_difference_check(model, random_batch(61), n_params=200)
    assert seen == {n for n, _ in model.named_parameters()}
    assert worst < 1e-4


def test_weight_decay_groups():
    model = tiny_model()
    opt = build_optimizer(model, TrainConfig())
    decayed, exempt = opt.param_groups
    assert decayed["weight_decay"] == 0.1 and exempt["weight_decay"] == 0.0
    assert all(p.dim() == 2 for p in decayed["params"])
    assert len(exempt["params"]) == sum(1 for p in model.parameters() if p.dim() == 1)


def test_overfit_single_batch():
    model = tiny_model("fp32", hidden=32, n_heads=2)
    b = random_batch(61, batch=2, length=16, masked=False)
    tc = TrainConfig(peak_lr=1e-2, warmup_steps=10, total_steps=200, weight_decay=0.0)
    hist = train(model, iter([b] * 200), tc, log_every=0)
    assert hist[-1]["loss"] < 0.1 * hist[0]["loss"]


def test_clip_inactive_matches_unclipped():
    b = random_batch(61)
    out = []
    for clip in (math.inf, 1e6):
        model = tiny_model()
        tc = TrainConfig(grad_clip=clip, warmup_steps=1, total_steps=5)
        opt = build_optimizer(model, tc)
        for s in range(4):
            train_step(model, b, opt, tc, s)
        out.append([p.detach().clone() for p in model.parameters()])
    assert all(torch.equal(x, y) for x, y in zip(*out))


def test_determinism_fp64(tmp_path):
    runs = []
    for k in range(2):
        model = tiny_model()
        tc = TrainConfig(batch_size=2, context=8, warmup_steps=2, total_steps=6)
        docs = [list(range(i, i + 15)) for i in range(0, 40, 3)]
        path = tmp_path / f"m{k}.csv"
        hist = train(model, pretrain_batches(docs, tc, 60, seed=1), tc, metrics_path=path, log_every=0)
        runs.append([h["loss"] for h in hist])
    assert runs[0] == runs[1]
    rows = list(csv.DictReader(open(tmp_path / "m0.csv")))
    assert list(rows[0]) == ["step", "loss", "lr", "grad_norm"] and len(rows) == 6


def test_non_finite_loss_aborts():
    model = tiny_model()
    with torch.no_grad():
        model.output_projection.fill_(float("nan"))
    tc = TrainConfig(total_steps=1, warmup_steps=1)
    with pytest.raises(TrainingDiverged, match="step 0"):
        train_step(model, random_batch(61), build_optimizer(model, tc), tc, 0)


def test_sft_batch_shift_and_padding():
    from deskllm.chatml import MaskedStream
    s = MaskedStream((5, 6, 7, 8), (0, 0, 1, 1))
    b = sft_batch([s], 5, pad_id=0)
    assert b.inputs.tolist() == [[5, 6, 7, 8, 0]]
    assert b.targets.tolist() == [[6, 7, 8, 0, 0]]
    assert b.loss_mask.tolist() == [[0, 1, 1, 0, 0]]
    with pytest.raises(ValueError):
        Batch(torch.zeros(1, 3, dtype=torch.long), torch.zeros(1, 2, dtype=torch.long), torch.ones(1, 3))
