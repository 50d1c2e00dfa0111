import io
import json
from collections import Counter

import numpy as np
import pytest

from epcformer.autograd import Tape, parameter
from epcformer.data import generate_dataset
from epcformer.losses import NonFiniteLossError, total_loss
from epcformer.model import EPCFormer
from epcformer.training import (MODES, AdamW, TrainConfig, compute_losses, loss_weights, modality_dropout,
                                sample_training_items, train, train_step)

from oracles import TINY


@pytest.fixture(scope="module")
def dataset():
    return generate_dataset(TINY.data, seed=5)


def test_dropout_marginal():
    rng = np.random.default_rng(0)
    counts = Counter(modality_dropout(None, rng) for _ in range(30_000))
    assert set(counts) == set(MODES)
    for m in MODES:
        assert abs(counts[m] / 30_000 - 1 / 3) <= 0.01


def test_dropout_reproducible():
    a = [modality_dropout(None, np.random.default_rng(7)) for _ in range(1)]
    r1, r2 = np.random.default_rng(9), np.random.default_rng(9)
    assert [modality_dropout(None, r1) for _ in range(50)] == [modality_dropout(None, r2) for _ in range(50)]
    assert a[0] in MODES


def test_items_follow_mode(dataset):
    items = sample_training_items(dataset, 6, 2, np.random.default_rng(1))
    for it in items:
        assert (it.text is not None) == (it.mode in ("text_only", "both"))
        assert (it.audio is not None) == (it.mode in ("audio_only", "both"))
    # both frames of a scene share the expression and differ in time
    for a, b in zip(items[::2], items[1::2]):
        assert (a.sample, a.text, a.audio) == (b.sample, b.text, b.audio) and a.frame < b.frame
    fixed = sample_training_items(dataset, 4, 2, np.random.default_rng(1), "audio_only")
    assert all(it.text is None and it.audio is not None for it in fixed)


def test_paired_expressions_share_semantic_class(dataset):
    items = sample_training_items(dataset, 8, 1, np.random.default_rng(2), "both")
    for it in items:
        s = dataset[it.sample]
        sem = {e.semantic_id for e in s.expressions if e.tokens in (it.text, it.audio)}
        assert len(sem) == 1 and next(iter(sem)) // 3 == it.referred


def test_zero_learning_rate_leaves_parameters(dataset):
    model = EPCFormer(TINY.updated(lr=0.0))
    before = {k: p.data.copy() for k, p in model.parameters().items()}
    train(model, dataset[:-TINY.heldout], steps=2)
    for k, p in model.parameters().items():
        np.testing.assert_array_equal(p.data, before[k])


@pytest.mark.parametrize("seed", [0, 1, 2])
def test_one_step_descends_at_small_lr(dataset, seed):
    cfg = TINY.updated(lr=1e-4, seed=seed)
    model = EPCFormer(cfg)
    rng = np.random.default_rng(seed)
    items = sample_training_items(dataset, 2, 2, rng)
    from epcformer.alignment import build_alignment_batch
    align = build_alignment_batch(dataset, 4, rng)
    _, matchings, _ = compute_losses(model, dataset, items, rng, True, None, align)

    def loss_value():
        parts, _, _ = compute_losses(model, dataset, items, rng, True, matchings, align)
        return total_loss(parts, loss_weights(cfg))

    model.zero_grad()
    with Tape() as tape:
        loss = loss_value()
    tape.backward(loss)
    opt = AdamW(model.parameters(), cfg.lr, cfg.weight_decay, clip=cfg.grad_clip)
    opt.step()
    assert loss_value().item() < loss.item()


def test_adamw_matches_reference_update():
    rng = np.random.default_rng(3)
    w, b = parameter(rng.normal(size=(3, 2))), parameter(rng.normal(size=2))
    g_w, g_b = rng.normal(size=(3, 2)), rng.normal(size=2)
    w0, b0 = w.data.copy(), b.data.copy()
    w.grad[...], b.grad[...] = g_w, g_b
    lr, wd = 0.01, 0.1
    norm = AdamW({"w": w, "b": b}, lr, wd, clip=1.0).step()
    total = np.sqrt((g_w ** 2).sum() + (g_b ** 2).sum())
    assert norm == pytest.approx(total, rel=1e-12)
    f = min(1.0, 1.0 / total)
    for p, p0, g, decay in ((w, w0, g_w, True), (b, b0, g_b, False)):
        gc = g * f
        m_hat, v_hat = gc, gc * gc  # bias-corrected first step
        expected = p0 * (1 - lr * wd if decay else 1.0) - lr * m_hat / (np.sqrt(v_hat) + 1e-8)
        np.testing.assert_allclose(p.data, expected, rtol=1e-12, atol=1e-15)


def test_train_is_deterministic_and_logs(dataset):
    logs = []
    params = []
    for _ in range(2):
        model = EPCFormer(TINY.updated(lr=1e-3))
        stream = io.StringIO()
        train(model, dataset[:-TINY.heldout], steps=3, log_stream=stream)
        logs.append(stream.getvalue())
        params.append({k: p.data.tobytes() for k, p in model.parameters().items()})
    assert logs[0] == logs[1] and params[0] == params[1]
    records = [json.loads(line) for line in logs[0].splitlines()]
    assert [r["step"] for r in records] == [0, 1, 2]
    for r in records:
        assert {"total", "ref", "box", "mask", "modes"} <= set(r)
        for k in ("ref", "box", "mask", "emb", "expr"):
            if k in r:
                assert r[k] >= 0.0


def test_expression_loss_only_in_mix_mode(dataset):
    rec_mix = train_step(EPCFormer(TINY), AdamW(EPCFormer(TINY).parameters(), 0.0), dataset,
                         np.random.default_rng(0), mode="mix")
    model = EPCFormer(TINY)
    rec_text = train_step(model, AdamW(model.parameters(), 0.0), dataset, np.random.default_rng(0), mode="text")
    assert "expr" in rec_mix and "expr" not in rec_text
    assert set(rec_text["modes"]) == {"text_only"}


def test_non_finite_loss_aborts(dataset):
    model = EPCFormer(TINY)
    model.head.box_w2.data[...] = np.nan
    with pytest.raises(NonFiniteLossError, match="step 0"):
        train_step(model, AdamW(model.parameters(), 1e-3), dataset, np.random.default_rng(0))


def test_train_config():
    c = TrainConfig.from_config(TINY)
    assert (c.lr, c.batch_size, c.frames_per_sample) == (TINY.lr, TINY.batch_size, TINY.train_frames)
    with pytest.raises(ValueError):
        TrainConfig(lr=-1.0)
    with pytest.raises(ValueError):
        train(EPCFormer(TINY), [], mode="video")
