from __future__ import annotations

from dataclasses import replace

import numpy as np
import pytest

from trinet import network as nn
from trinet.data import Dataset, encode_dataset, stratified_split
from trinet.synth import GeneratorConfig, generate
from trinet.text import UNK, EmbeddingTable
from trinet.training import (
    TrainConfig, TrainingDiverged, embedding_matrix, predict_batch, predict_records, train,
)

TINY = nn.ModelConfig(
    note_length=8, embed_dim=3, conv_channels=(2, 2, 2, 2), conv_kernel=(2, 1, 1, 1),
    pool_width=(1, 2, 1, 1), mlp_widths=(4, 3, 2), head_width=3, dropout_rates=(0.0,) * 6,
)


@pytest.fixture(scope="module")
def splits():
    ds = generate(GeneratorConfig(n=300, condition="uti", prevalence=0.2, seed=4))
    return stratified_split(ds, seed=4)


def test_lr_zero_leaves_params_at_init(splits):
    tr, va, _ = splits
    t0 = TrainConfig(epochs=1, lr=0.0, seed=1)
    p1, *_ = train(tr, va, TINY, t0)
    p3, curve, *_ = train(tr, va, TINY, replace(t0, epochs=3))
    assert all(np.array_equal(p1[k], p3[k]) for k in p1)
    assert len(curve) == 3 and curve.train_loss[0] == curve.train_loss[2]


def test_single_step_matches_hand_computed_sgd(splits):
    tr, va, _ = splits
    base = TrainConfig(epochs=1, batch_size=10_000, lr=0.0, use_smote=False, seed=2, weight_decay=1e-3)
    init, _, spec, mcfg = train(tr, va, TINY, base)
    lr = 0.05
    stepped, *_ = train(tr, va, TINY, replace(base, lr=lr))

    numeric, tokens, labels = encode_dataset(tr, spec)
    w_pos = (labels == 0).sum() / (labels == 1).sum()
    _, cache = nn.forward_batch(tokens, numeric, init, mcfg, "train", np.random.default_rng(0))
    grads = nn.backward(cache, labels, w_pos, 1.0, mcfg)
    for name in init:
        expected = init[name] - lr * (grads[name] + 1e-3 * init[name])
        assert np.allclose(stepped[name], expected, rtol=1e-10, atol=1e-13), name


def test_training_is_deterministic(splits):
    tr, va, _ = splits
    cfg = TrainConfig(epochs=2, lr=1e-3, seed=5, smote_k=3)
    a, ca, *_ = train(tr, va, replace(TINY, dropout_rates=(0.3,) * 6), cfg)
    b, cb, *_ = train(tr, va, replace(TINY, dropout_rates=(0.3,) * 6), cfg)
    assert all(np.array_equal(a[k], b[k]) for k in a) and ca == cb
    c, *_ = train(tr, va, TINY, replace(cfg, seed=6))
    assert not np.array_equal(a["out.weight"], c["out.weight"])


def test_curve_and_one_epoch(splits):
    tr, va, _ = splits
    _, curve, spec, mcfg = train(tr, va, TINY, TrainConfig(epochs=1, lr=1e-3))
    assert len(curve) == 1 and len(list(curve.rows())) == 1
    assert all(np.isfinite(v) for row in curve.rows() for v in row)
    assert mcfg.vocab_size == spec.vocab_size and mcfg.numeric_dim == spec.numeric_width


def test_learning_reduces_loss(splits):
    tr, va, _ = splits
    _, curve, *_ = train(tr, va, TINY, TrainConfig(epochs=15, lr=3e-2, seed=1))
    assert curve.train_loss[-1] < 0.5 * curve.train_loss[0]


@pytest.mark.filterwarnings("ignore::RuntimeWarning")
def test_divergence_reports_epoch(splits):
    tr, va, _ = splits
    with pytest.raises(TrainingDiverged, match="epoch 1"):
        train(tr, va, TINY, TrainConfig(epochs=3, lr=1e200, momentum=0.0))


def test_early_stopping(splits):
    tr, va, _ = splits
    _, curve, *_ = train(tr, va, TINY, TrainConfig(epochs=50, lr=0.0, patience=2))
    assert len(curve) == 3


def test_class_weight_modes(splits):
    tr, va, _ = splits
    # with no SMOTE and lr=0 the curve loss reflects the weighting alone
    losses = {}
    for mode in ("ratio", "none", "explicit"):
        cfg = TrainConfig(epochs=1, lr=0.0, class_weight_mode=mode, pos_weight=2.0, use_smote=False)
        losses[mode] = train(tr, va, TINY, cfg)[1].train_loss[0]
    assert losses["none"] < losses["explicit"] < losses["ratio"]
    with pytest.raises(ValueError):
        TrainConfig(class_weight_mode="bogus")


def test_config_validation():
    for bad in (dict(epochs=0), dict(batch_size=0), dict(lr=-1.0), dict(momentum=1.0)):
        with pytest.raises(ValueError):
            TrainConfig(**bad)
    assert TrainConfig.from_dict(TrainConfig(seed=3).to_dict()) == TrainConfig(seed=3)
    assert TrainConfig.desk(seed=2).seed == 2 and TrainConfig.desk().epochs <= 200


def test_supplied_embeddings_are_used(splits):
    tr, va, _ = splits
    _, _, spec, _ = train(tr, va, TINY, TrainConfig(epochs=1, lr=0.0))
    tok = spec.token_vocab[1]
    table = EmbeddingTable((UNK, tok), np.array([[0.0, 0, 0], [1.0, 2.0, 3.0]]))
    emb = embedding_matrix(spec, table, 3, seed=0)
    assert emb[1].tolist() == [1.0, 2.0, 3.0] and not emb[0].any()
    params, *_ = train(tr, va, TINY, TrainConfig(epochs=1, lr=0.0), embeddings=table)
    assert params["embedding"][1].tolist() == [1.0, 2.0, 3.0]
    with pytest.raises(ValueError):
        embedding_matrix(spec, table, 4, seed=0)


def test_predict_batch_contract(splits):
    tr, va, te = splits
    params, _, spec, mcfg = train(tr, va, TINY, TrainConfig(epochs=1, lr=1e-3))
    assert predict_batch(Dataset("uti", ()), params, spec, mcfg) == []
    rec = te.records[0]
    same = predict_batch(Dataset("uti", (rec,) * 4), params, spec, mcfg)
    assert len(set(same)) == 1
    probs = predict_batch(te, params, spec, mcfg)
    perm = np.random.default_rng(0).permutation(len(te))
    permuted = predict_batch(te.subset(perm), params, spec, mcfg)
    assert permuted == [probs[i] for i in perm]
    assert predict_records([lr.record for lr in te.records], params, spec, mcfg) == probs
    bad = dict(params, embedding=params["embedding"][:-1])
    with pytest.raises(ValueError, match="vocabulary mismatch"):
        predict_batch(te, bad, spec, mcfg)
