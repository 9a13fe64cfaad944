"""Mini-batch SGD training loop and batch inference."""

from __future__ import annotations

import logging
from dataclasses import asdict, dataclass, field

import numpy as np

from . import network as nn
from .data import (
    Dataset, EncoderSpec, class_weights, encode_dataset, encode_records, fit_encoder, smote,
)
from .text import EmbeddingTable, synth_embeddings

log = logging.getLogger(__name__)

EVAL_BATCH = 2048
DESK_PRESET = {"epochs": 40, "lr": 3e-4}


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 200
    batch_size: int = 32
    lr: float = 1e-5
    momentum: float = 0.9
    weight_decay: float = 1e-7
    seed: int = 0
    use_smote: bool = True
    smote_k: int = 15
    smote_ratio: float = 1.0
    class_weight_mode: str = "ratio"  # ratio | none | explicit
    pos_weight: float = 1.0  # used when class_weight_mode == "explicit"
    patience: int | None = None

    def __post_init__(self):
        if self.epochs < 1:
            raise ValueError("epochs must be >= 1")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if self.lr < 0:
            raise ValueError("lr must be non-negative")
        if not 0 <= self.momentum < 1:
            raise ValueError("momentum must be in [0, 1)")
        if self.class_weight_mode not in ("ratio", "none", "explicit"):
            raise ValueError(f"unknown class_weight_mode {self.class_weight_mode!r}")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> TrainConfig:
        return cls(**d)

    @classmethod
    def desk(cls, **overrides) -> TrainConfig:
        """Short schedule that fits a single-CPU budget: fewer epochs, larger step."""
        return cls(**{**DESK_PRESET, **overrides})


@dataclass
class TrainingCurve:
    train_loss: list[float] = field(default_factory=list)
    train_acc: list[float] = field(default_factory=list)
    val_loss: list[float] = field(default_factory=list)
    val_acc: list[float] = field(default_factory=list)

    def __len__(self):
        return len(self.train_loss)

    def rows(self):
        for i in range(len(self)):
            yield i + 1, self.train_loss[i], self.train_acc[i], self.val_loss[i], self.val_acc[i]


class TrainingDiverged(FloatingPointError):
    def __init__(self, epoch: int, detail: str = ""):
        super().__init__(f"training diverged at epoch {epoch}" + (f": {detail}" if detail else ""))
        self.epoch = epoch


def resolve_class_weights(train: Dataset, tconfig: TrainConfig) -> tuple[float, float]:
    if tconfig.class_weight_mode == "ratio":
        return class_weights(train)
    if tconfig.class_weight_mode == "explicit":
        return tconfig.pos_weight, 1.0
    return 1.0, 1.0


def embedding_matrix(spec: EncoderSpec, table: EmbeddingTable | None, d: int, seed: int) -> np.ndarray:
    """Rows for the encoder vocabulary; tokens absent from ``table`` get synthetic vectors."""
    fallback = synth_embeddings(spec.token_vocab, d, seed).vectors
    if table is None:
        return fallback
    if table.d != d:
        raise ValueError(f"embedding table has d={table.d}, model expects {d}")
    index = table.lookup()
    out = fallback.copy()
    for i, tok in enumerate(spec.token_vocab):
        j = index.get(tok)
        if j is not None:
            out[i] = table.vectors[j]
    out[0] = 0.0
    return out


def evaluate(tokens, numeric, labels, params, mconfig, w_pos, w_neg) -> tuple[float, float]:
    """Mean weighted loss and accuracy at threshold 0.5 (no L2 term)."""
    probs = infer(tokens, numeric, params, mconfig)
    loss = float(np.mean(nn.weighted_bce(probs, labels, w_pos, w_neg)))
    acc = float(np.mean((probs >= 0.5) == (labels == 1)))
    return loss, acc


def infer(tokens, numeric, params, mconfig) -> np.ndarray:
    out = np.empty(len(tokens))
    for start in range(0, len(tokens), EVAL_BATCH):
        sl = slice(start, start + EVAL_BATCH)
        out[sl], _ = nn.forward_batch(tokens[sl], numeric[sl], params, mconfig, "infer")
    return out


def train(
    train_ds: Dataset,
    val_ds: Dataset,
    mconfig: nn.ModelConfig,
    tconfig: TrainConfig,
    embeddings: EmbeddingTable | None = None,
    progress=None,
):
    """Fit the encoder on ``train_ds`` and train the network.

    Returns ``(params, curve, encoder_spec, model_config)``; the returned
    model config has the vocabulary and numeric widths filled in.
    ``progress`` is an optional callback ``(epoch, curve)``.
    """
    spec = fit_encoder(train_ds, mconfig.note_length)
    mconfig = mconfig.with_data(spec.vocab_size, spec.numeric_width)
    w_pos, w_neg = resolve_class_weights(train_ds, tconfig)

    seeds = np.random.SeedSequence(tconfig.seed).spawn(4)
    init_rng, smote_seed, shuffle_rng, dropout_rng = (
        np.random.default_rng(seeds[0]),
        int(seeds[1].generate_state(1)[0]),
        np.random.default_rng(seeds[2]),
        np.random.default_rng(seeds[3]),
    )

    num_tr, tok_tr, y_tr = encode_dataset(train_ds, spec)
    num_va, tok_va, y_va = encode_dataset(val_ds, spec)
    n_val = len(y_va)
    if tconfig.use_smote:
        num_fit, tok_fit, y_fit = smote(
            num_tr, tok_tr, y_tr, spec.n_continuous,
            target_ratio=tconfig.smote_ratio, k=tconfig.smote_k, seed=smote_seed,
        )
    else:
        num_fit, tok_fit, y_fit = num_tr, tok_tr, y_tr
    y_fit = y_fit.astype(float)
    log.info(
        "training on %d rows (%d positive), w_pos=%.3f, %d parameters",
        len(y_fit), int(y_fit.sum()), w_pos, mconfig.n_params(),
    )

    emb = embedding_matrix(spec, embeddings, mconfig.embed_dim, tconfig.seed)
    params = nn.init_params(mconfig, init_rng, emb)
    state = nn.OptimizerState(tconfig.lr, tconfig.momentum, tconfig.weight_decay)
    curve = TrainingCurve()
    best_val, stale = np.inf, 0

    for epoch in range(1, tconfig.epochs + 1):
        order = shuffle_rng.permutation(len(y_fit))
        for start in range(0, len(order), tconfig.batch_size):
            idx = order[start : start + tconfig.batch_size]
            try:
                _, cache = nn.forward_batch(tok_fit[idx], num_fit[idx], params, mconfig, "train", dropout_rng)
                grads = nn.backward(cache, y_fit[idx], w_pos, w_neg, mconfig)
                params, state = nn.sgd_step(params, grads, state)
            except FloatingPointError as exc:
                raise TrainingDiverged(epoch, str(exc)) from exc

        tr_loss, tr_acc = evaluate(tok_tr, num_tr, y_tr, params, mconfig, w_pos, w_neg)
        va_loss, va_acc = evaluate(tok_va, num_va, y_va, params, mconfig, w_pos, w_neg)
        if not (np.isfinite(tr_loss) and np.isfinite(va_loss)):
            raise TrainingDiverged(epoch, "non-finite loss")
        assert len(y_va) == n_val
        curve.train_loss.append(tr_loss)
        curve.train_acc.append(tr_acc)
        curve.val_loss.append(va_loss)
        curve.val_acc.append(va_acc)
        if progress is not None:
            progress(epoch, curve)

        if tconfig.patience is not None:
            if va_loss < best_val:
                best_val, stale = va_loss, 0
            else:
                stale += 1
                if stale >= tconfig.patience:
                    log.info("early stop at epoch %d", epoch)
                    break
    return params, curve, spec, mconfig


def predict_records(records, params, spec: EncoderSpec, mconfig: nn.ModelConfig) -> list[float]:
    """Inference-mode probabilities for unlabeled records, in input order."""
    if params["embedding"].shape[0] != spec.vocab_size:
        raise ValueError(
            f"vocabulary mismatch: model has {params['embedding'].shape[0]} rows, "
            f"encoder has {spec.vocab_size} tokens"
        )
    if len(records) == 0:
        return []
    numeric, tokens = encode_records(records, spec)
    return infer(tokens, numeric, params, mconfig).tolist()


def predict_batch(ds: Dataset, params, spec: EncoderSpec, mconfig: nn.ModelConfig) -> list[float]:
    """Inference-mode probabilities, in dataset order."""
    return predict_records([lr.record for lr in ds.records], params, spec, mconfig)
