import math

import numpy as np
import pytest
import torch

from semunit.checkpoint import load_checkpoint
from semunit.model import SEMANTIC_PREFIXES, ModelConfig
from semunit.training import (
    TrainConfig,
    build_model,
    cross_entropy,
    evaluate_loss,
    lr_at,
    make_batches,
    model_to_checkpoint,
    train,
)
from semunit.wpe import SpanSet

SMALL = dict(d_model=16, d_ffn=32, enc_layers=1, dec_layers=1, heads=2, dropout=0.1)


def toy_examples(n=12, seed=0):
    rng = np.random.default_rng(seed)
    out = []
    for _ in range(n):
        L = int(rng.integers(2, 7))
        src = rng.integers(4, 20, size=L).tolist()
        tgt = [4 + (s * 7) % 16 for s in reversed(src)]
        a = int(rng.integers(0, L - 1))
        out.append((src, tgt, SpanSet.from_multi([(a, a + 2)], L)))
    return out


def model_config(mode="token+semantic"):
    return ModelConfig(20, 20, input_mode=mode, **SMALL)


def test_lr_schedule():
    assert lr_at(100, 1e-3, 100) == 1e-3
    assert lr_at(50, 1e-3, 100) == 5e-4
    assert lr_at(400, 1e-3, 100) == 5e-4
    values = [lr_at(s, 1.0, 10) for s in range(1, 40)]
    assert values.index(max(values)) == 9
    assert all(a < b for a, b in zip(values[:9], values[1:10]))
    assert all(a > b for a, b in zip(values[9:], values[10:]))
    with pytest.raises(ValueError):
        lr_at(0, 1.0, 10)


def test_uniform_predictor_loss():
    V, T = 7, 5
    logits = torch.zeros(1, T, V, dtype=torch.float64)
    targets = torch.tensor([[4, 5, 6, 1, 0]])
    assert abs(float(cross_entropy(logits, targets)) - 4 * math.log(V)) < 1e-12


def test_correct_one_hot_predictor_has_zero_loss():
    logits = torch.full((1, 3, 6), -1e4, dtype=torch.float64)
    targets = torch.tensor([[4, 5, 2]])
    logits[0, torch.arange(3), targets[0]] = 0.0
    assert float(cross_entropy(logits, targets)) == 0.0


def test_two_class_hand_case():
    logits = torch.log(torch.tensor([[[0.25, 0.75]] * 3], dtype=torch.float64))
    targets = torch.tensor([[0, 0, 0]])
    ce = cross_entropy(logits, targets, pad_id=-1, reduction="mean")
    assert abs(float(ce) + math.log(0.25)) < 1e-12


def test_loss_matches_independent_recount():
    torch.manual_seed(0)
    logits = torch.randn(2, 4, 9, dtype=torch.float64)
    targets = torch.tensor([[4, 5, 6, 2], [7, 2, 0, 0]])
    total = 0.0
    for b in range(2):
        for t in range(4):
            y = int(targets[b, t])
            if y == 0:
                continue
            row = logits[b, t].tolist()
            z = math.log(sum(math.exp(v) for v in row))
            total += z - row[y]
    assert abs(float(cross_entropy(logits, targets)) - total) < 1e-6


def test_label_smoothing_mixes_in_uniform():
    logits = torch.log(torch.tensor([[[0.5, 0.25, 0.25]]], dtype=torch.float64))
    targets = torch.tensor([[0]])
    eps = 0.1
    expect = (1 - eps) * -math.log(0.5) + eps * -(math.log(0.5) + 2 * math.log(0.25)) / 3
    assert abs(float(cross_entropy(logits, targets, pad_id=-1, smoothing=eps)) - expect) < 1e-12


def test_all_pad_targets_raise():
    with pytest.raises(ValueError):
        cross_entropy(torch.zeros(1, 2, 3), torch.zeros(1, 2, dtype=torch.long))


def test_batches_respect_token_budget():
    ex = toy_examples(30)
    batches = make_batches(ex, 24, list(range(30)))
    assert sorted(i for b in batches for i in b.indices) == list(range(30))
    for b in batches:
        assert b.src.numel() <= 24 or len(b.indices) == 1
        assert b.tgt_in.numel() <= 24 or len(b.indices) == 1


def test_first_step_loss_is_near_log_vocab(tmp_path):
    cfg = model_config()
    res = train(cfg, TrainConfig(max_steps=1, epochs=1, max_tokens=10_000), toy_examples(), tmp_path)
    assert abs(res.losses[0] - math.log(cfg.tgt_vocab)) < 0.5


def test_training_is_deterministic(tmp_path):
    tc = TrainConfig(seed=3, epochs=2, max_tokens=30, warmup=5)
    a = train(model_config(), tc, toy_examples(), tmp_path / "a")
    b = train(model_config(), tc, toy_examples(), tmp_path / "b")
    assert a.losses == b.losses
    assert [p.read_bytes() for p in a.checkpoints] == [p.read_bytes() for p in b.checkpoints]


def test_resume_matches_uninterrupted_run(tmp_path):
    ex = toy_examples()
    tc = TrainConfig(seed=2, epochs=3, max_tokens=30, warmup=5)
    full = train(model_config(), tc, ex, tmp_path / "full")
    first = full.checkpoints[0]
    resumed = train(model_config(), tc, ex, tmp_path / "resumed", resume=first)
    done = load_checkpoint(first).step
    assert resumed.losses == full.losses[done:]
    assert resumed.checkpoints[-1].read_bytes() == full.checkpoints[-1].read_bytes()


def test_pretrain_finetune_loads_shared_weights(tmp_path):
    ex = toy_examples()
    pre = train(model_config("token-only"), TrainConfig(epochs=1, max_tokens=30), ex, tmp_path / "pre")
    init = load_checkpoint(pre.checkpoints[-1])
    ft = train(model_config(), TrainConfig(seed=5, epochs=0), ex, tmp_path / "ft", init=init)
    fresh = build_model(model_config(), seed=5)
    for name, p in ft.model.named_parameters():
        if name.startswith(SEMANTIC_PREFIXES):
            assert torch.equal(p, dict(fresh.named_parameters())[name])
        else:
            assert p.detach().numpy().tobytes() == init.arrays[name].tobytes()


def test_init_with_other_architecture_is_rejected(tmp_path):
    other = ModelConfig(20, 20, **{**SMALL, "d_ffn": 64})
    ckpt = model_to_checkpoint(build_model(other, 1), {"step": 0})
    with pytest.raises(ValueError, match="d_ffn"):
        train(model_config(), TrainConfig(epochs=0), toy_examples(), tmp_path, init=ckpt)


def test_keep_last_prunes_old_checkpoints(tmp_path):
    res = train(model_config(), TrainConfig(epochs=4, max_tokens=30), toy_examples(), tmp_path, keep_last=2)
    assert len(res.checkpoints) == 2
    assert sorted(tmp_path.glob("*.ckpt")) == res.checkpoints


def test_overfits_a_small_corpus(tmp_path):
    ex = toy_examples(8)
    cfg = ModelConfig(20, 20, input_mode="token+semantic", **{**SMALL, "dropout": 0.0})
    res = train(cfg, TrainConfig(epochs=150, max_tokens=1000, lr=3e-3, warmup=20, save_every=1000),
                ex, tmp_path)
    assert evaluate_loss(res.model, ex) < 0.1
