"""Two-branch TriNet network with hand-written forward and backward passes.

Text branch: embedding lookup, then four conv -> ReLU -> max-pool stages,
then flatten. Numeric branch: three dense ReLU layers. The two are
concatenated into a dense ReLU head followed by one sigmoid unit.

Activations are kept channels-last, ``(batch, time, channels)``; the
flattened text features are ordered position-major.
"""

from __future__ import annotations

import base64
import hashlib
import json
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

ModelParams = dict  # name -> np.ndarray
Gradients = dict

LOGIT_CLAMP = 30.0
PROB_EPS = 1e-12
N_DROPOUT_SITES = 6
# dropout sites: after text stage 2, after text stage 4, after each of the
# three numeric layers, after the head
_TEXT_DROPOUT_AFTER = {1: 0, 3: 1}


@dataclass(frozen=True)
class ModelConfig:
    note_length: int = 48
    embed_dim: int = 16
    conv_channels: tuple[int, ...] = (16, 16, 32, 32)
    conv_kernel: tuple[int, ...] = (3, 3, 3, 3)
    pool_width: tuple[int, ...] = (2, 2, 2, 2)
    l2_lambda: float = 1e-4
    dropout_rates: tuple[float, ...] = (0.3,) * N_DROPOUT_SITES
    mlp_widths: tuple[int, ...] = (64, 32, 16)
    head_width: int = 32
    # filled in from the fitted encoder
    vocab_size: int = 0
    numeric_dim: int = 0

    def __post_init__(self):
        for name in ("conv_channels", "conv_kernel", "pool_width", "dropout_rates", "mlp_widths"):
            object.__setattr__(self, name, tuple(getattr(self, name)))
        if len(self.conv_channels) != 4 or len(self.conv_kernel) != 4 or len(self.pool_width) != 4:
            raise ValueError("the text branch has exactly 4 conv/pool stages")
        if len(self.mlp_widths) != 3:
            raise ValueError("the numeric branch has exactly 3 dense layers")
        if len(self.dropout_rates) != N_DROPOUT_SITES:
            raise ValueError(f"expected {N_DROPOUT_SITES} dropout rates")
        if not all(0 <= r < 1 for r in self.dropout_rates):
            raise ValueError("dropout rates must lie in [0, 1)")
        widths = (
            self.note_length, self.embed_dim, self.head_width,
            *self.conv_channels, *self.conv_kernel, *self.pool_width, *self.mlp_widths,
        )
        if min(widths) < 1:
            raise ValueError("all widths must be >= 1")
        if self.l2_lambda < 0:
            raise ValueError("l2_lambda must be non-negative")
        self.stage_lengths()

    def stage_lengths(self) -> list[int]:
        """Sequence length after each conv+pool stage."""
        t, out = self.note_length, []
        for w, p in zip(self.conv_kernel, self.pool_width):
            if t < w or t - w + 1 < p:
                raise ValueError(
                    f"note_length {self.note_length} too short for the conv/pool stack"
                )
            t = (t - w + 1) // p
            out.append(t)
        return out

    @property
    def text_features(self) -> int:
        return self.stage_lengths()[-1] * self.conv_channels[-1]

    def with_data(self, vocab_size: int, numeric_dim: int) -> ModelConfig:
        return replace(self, vocab_size=vocab_size, numeric_dim=numeric_dim)

    def param_shapes(self) -> dict[str, tuple[int, ...]]:
        if self.vocab_size < 1 or self.numeric_dim < 1:
            raise ValueError("vocab_size and numeric_dim must be set (see with_data)")
        shapes = {"embedding": (self.vocab_size, self.embed_dim)}
        c_in = self.embed_dim
        for i, (c, w) in enumerate(zip(self.conv_channels, self.conv_kernel), 1):
            shapes[f"conv{i}.kernel"] = (c, c_in, w)
            shapes[f"conv{i}.bias"] = (c,)
            c_in = c
        n_in = self.numeric_dim
        for i, n in enumerate(self.mlp_widths, 1):
            shapes[f"mlp{i}.weight"] = (n_in, n)
            shapes[f"mlp{i}.bias"] = (n,)
            n_in = n
        shapes["head.weight"] = (self.text_features + self.mlp_widths[-1], self.head_width)
        shapes["head.bias"] = (self.head_width,)
        shapes["out.weight"] = (self.head_width,)
        shapes["out.bias"] = (1,)
        return shapes

    def n_params(self) -> int:
        return sum(int(np.prod(s)) for s in self.param_shapes().values())

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> ModelConfig:
        return cls(**d)


def init_params(config: ModelConfig, rng: np.random.Generator, embeddings=None) -> ModelParams:
    """He-normal weights, zero biases. ``embeddings`` (vocab x d) seeds the embedding matrix."""
    params = {}
    for name, shape in config.param_shapes().items():
        if name == "embedding":
            if embeddings is None:
                emb = rng.standard_normal(shape) * 0.1
            else:
                emb = np.array(embeddings, dtype=float)
                if emb.shape != shape:
                    raise ValueError(f"embedding shape {emb.shape} != {shape}")
            emb[0] = 0.0
            params[name] = emb
        elif name.endswith("bias"):
            params[name] = np.zeros(shape)
        else:
            fan_in = int(np.prod(shape[1:])) if name.startswith("conv") else shape[0]
            params[name] = rng.standard_normal(shape) * np.sqrt(2.0 / fan_in)
    return params


def zeros_like(params: ModelParams) -> ModelParams:
    return {k: np.zeros_like(v) for k, v in params.items()}


# --------------------------------------------------------------------------
# primitive layers (channels-last, batched)


def _conv_forward(x, kernel, bias):
    """x: (B, T, C_in); kernel: (C_out, C_in, W). Returns (out, im2col matrix)."""
    b, t, c_in = x.shape
    c_out, _, w = kernel.shape
    if t < w:
        raise ValueError(f"conv1d input length {t} shorter than kernel width {w}")
    t_out = t - w + 1
    col = sliding_window_view(x, w, axis=1).reshape(b, t_out, c_in * w)
    kmat = kernel.transpose(1, 2, 0).reshape(c_in * w, c_out)
    return col @ kmat + bias, col


def _conv_backward(dout, col, kernel, t_in):
    b, t_out, c_out = dout.shape
    _, c_in, w = kernel.shape
    dkmat = col.reshape(-1, c_in * w).T @ dout.reshape(-1, c_out)
    dkernel = dkmat.reshape(c_in, w, c_out).transpose(2, 0, 1)
    dbias = dout.sum(axis=(0, 1))
    # input gradient as a full correlation with the flipped kernel
    padded = np.zeros((b, t_out + 2 * (w - 1), c_out))
    padded[:, w - 1 : w - 1 + t_out] = dout
    dcol = sliding_window_view(padded, w, axis=1).reshape(b, t_in, c_out * w)
    kflip = kernel[:, :, ::-1].transpose(0, 2, 1).reshape(c_out * w, c_in)
    return dcol @ kflip, dkernel, dbias


def _pool_forward(x, width):
    b, t, c = x.shape
    if t < width:
        raise ValueError(f"maxpool1d input length {t} shorter than width {width}")
    n = t // width
    win = x[:, : n * width, :].reshape(b, n, width, c)
    out = win[:, :, 0, :]
    arg = np.zeros((b, n, c), dtype=np.int16)
    for j in range(1, width):
        # strict > keeps the lowest index on ties
        cand = win[:, :, j, :]
        better = cand > out
        out = np.where(better, cand, out)
        arg = np.where(better, np.int16(j), arg)
    return np.ascontiguousarray(out), arg


def _pool_backward(dout, arg, width, t_in):
    b, n, c = dout.shape
    dx = np.zeros((b, t_in, c))
    dwin = np.reshape(dx[:, : n * width, :], (b, n, width, c), copy=False)
    for j in range(width):
        dwin[:, :, j, :] = np.where(arg == j, dout, 0.0)
    return dx


def conv1d(x, kernel, bias) -> np.ndarray:
    """Valid cross-correlation of a ``C_in x T`` input with a ``C_out x C_in x W`` kernel."""
    x = np.asarray(x, dtype=float)
    out, _ = _conv_forward(x.T[None], np.asarray(kernel, dtype=float), np.asarray(bias, dtype=float))
    return out[0].T


def maxpool1d(x, width: int) -> tuple[np.ndarray, np.ndarray]:
    """Non-overlapping max pooling of a ``C x T`` input; returns (pooled, argmax offsets)."""
    x = np.asarray(x, dtype=float)
    out, arg = _pool_forward(x.T[None], width)
    return out[0].T, arg[0].T


def sigmoid(z):
    return 1.0 / (1.0 + np.exp(-z))


def weighted_bce(p, y, w_pos: float = 1.0, w_neg: float = 1.0):
    """Class-weighted binary cross-entropy (elementwise)."""
    p = np.clip(p, PROB_EPS, 1.0 - PROB_EPS)
    return -(w_pos * y * np.log(p) + w_neg * (1 - y) * np.log(1.0 - p))


def _dropout(h, rate, rng, masks, key):
    if rate <= 0:
        return h
    mask = (rng.random(h.shape) >= rate) / (1.0 - rate)
    masks[key] = mask
    return h * mask


# --------------------------------------------------------------------------
# forward / backward


def forward_batch(tokens, numeric, params: ModelParams, config: ModelConfig, mode="infer", rng=None):
    """Batched forward pass. Returns ``(probabilities, cache)``."""
    if mode not in ("train", "infer"):
        raise ValueError(f"mode must be 'train' or 'infer', got {mode!r}")
    tokens = np.asarray(tokens)
    numeric = np.asarray(numeric, dtype=float)
    if tokens.ndim != 2 or tokens.shape[1] != config.note_length:
        raise ValueError(f"tokens must be (batch, {config.note_length}), got {tokens.shape}")
    if numeric.ndim != 2 or numeric.shape[1] != config.numeric_dim or numeric.shape[0] != tokens.shape[0]:
        raise ValueError(f"numeric must be (batch, {config.numeric_dim}), got {numeric.shape}")
    emb = params["embedding"]
    if tokens.size and (tokens.min() < 0 or tokens.max() >= emb.shape[0]):
        raise ValueError("token index outside the embedding vocabulary")
    train = mode == "train"
    if train and rng is None:
        raise ValueError("train mode needs an rng for dropout")
    rates = config.dropout_rates
    masks: dict = {}
    cache = {"tokens": tokens, "masks": masks, "stages": [], "params": params}

    x = emb[tokens]
    for i in range(4):
        z, col = _conv_forward(x, params[f"conv{i + 1}.kernel"], params[f"conv{i + 1}.bias"])
        a = np.maximum(z, 0.0)
        pooled, arg = _pool_forward(a, config.pool_width[i])
        cache["stages"].append((x.shape[1], col, z > 0, arg, a.shape[1]))
        x = pooled
        if train and i in _TEXT_DROPOUT_AFTER:
            x = _dropout(x, rates[_TEXT_DROPOUT_AFTER[i]], rng, masks, _TEXT_DROPOUT_AFTER[i])
    cache["text_shape"] = x.shape
    flat = x.reshape(x.shape[0], -1)

    h = numeric
    dense = []
    for i in range(3):
        z = h @ params[f"mlp{i + 1}.weight"] + params[f"mlp{i + 1}.bias"]
        dense.append((h, z > 0))
        h = np.maximum(z, 0.0)
        if train:
            h = _dropout(h, rates[2 + i], rng, masks, 2 + i)
    cache["dense"] = dense

    cat = np.concatenate([flat, h], axis=1)
    z = cat @ params["head.weight"] + params["head.bias"]
    hh = np.maximum(z, 0.0)
    if train:
        hh = _dropout(hh, rates[5], rng, masks, 5)
    cache["head"] = (cat, z > 0, hh)

    logit = hh @ params["out.weight"] + params["out.bias"]
    if not np.all(np.isfinite(logit)):
        raise FloatingPointError("numeric overflow")
    cache["unclamped"] = np.abs(logit) < LOGIT_CLAMP
    p = sigmoid(np.clip(logit, -LOGIT_CLAMP, LOGIT_CLAMP))
    cache["p"] = p
    return p, cache


def forward(fv, params: ModelParams, config: ModelConfig, mode="infer", rng=None):
    """Single-record forward pass on a FeatureVector; returns ``(p, cache)``."""
    p, cache = forward_batch(fv.tokens[None, :], fv.numeric[None, :], params, config, mode, rng)
    return float(p[0]), cache


def l2_penalty(params: ModelParams, config: ModelConfig) -> float:
    return config.l2_lambda * float(
        np.sum(params["conv1.kernel"] ** 2) + np.sum(params["conv2.kernel"] ** 2)
    )


def objective(p, y, w_pos, w_neg, params, config) -> float:
    """Batch-mean weighted BCE plus the L2 penalty on conv layers 1 and 2."""
    return float(np.mean(weighted_bce(p, np.asarray(y), w_pos, w_neg))) + l2_penalty(params, config)


def backward(cache, y, w_pos: float, w_neg: float, config: ModelConfig) -> Gradients:
    """Gradients of :func:`objective` for the batch held in ``cache``.

    The parameters are the ones the cached forward pass ran with.
    """
    params = cache["params"]
    y = np.asarray(y, dtype=float).reshape(-1)
    p = cache["p"]
    if y.shape != p.shape:
        raise ValueError(f"labels shape {y.shape} does not match batch {p.shape}")
    if params["head.weight"].shape != config.param_shapes()["head.weight"]:
        raise ValueError("cache does not match the model configuration")
    masks = cache["masks"]
    b = p.shape[0]
    grads = {}

    dlogit = (w_neg * (1.0 - y) * p - w_pos * y * (1.0 - p)) / b
    dlogit = dlogit * cache["unclamped"]

    cat, head_on, hh = cache["head"]
    grads["out.weight"] = hh.T @ dlogit
    grads["out.bias"] = np.array([dlogit.sum()])
    dh = np.outer(dlogit, params["out.weight"])
    if 5 in masks:
        dh = dh * masks[5]
    dz = dh * head_on
    grads["head.weight"] = cat.T @ dz
    grads["head.bias"] = dz.sum(axis=0)
    dcat = dz @ params["head.weight"].T

    n_text = int(np.prod(cache["text_shape"][1:]))
    dflat, dh = dcat[:, :n_text], dcat[:, n_text:]

    for i in (2, 1, 0):
        if 2 + i in masks:
            dh = dh * masks[2 + i]
        h_in, on = cache["dense"][i]
        dz = dh * on
        grads[f"mlp{i + 1}.weight"] = h_in.T @ dz
        grads[f"mlp{i + 1}.bias"] = dz.sum(axis=0)
        dh = dz @ params[f"mlp{i + 1}.weight"].T

    dx = dflat.reshape(cache["text_shape"])
    for i in (3, 2, 1, 0):
        site = _TEXT_DROPOUT_AFTER.get(i)
        if site is not None and site in masks:
            dx = dx * masks[site]
        t_in, col, on, arg, t_conv = cache["stages"][i]
        da = _pool_backward(dx, arg, config.pool_width[i], t_conv)
        dz = da * on
        dx, dk, db = _conv_backward(dz, col, params[f"conv{i + 1}.kernel"], t_in)
        if i < 2:
            dk = dk + 2.0 * config.l2_lambda * params[f"conv{i + 1}.kernel"]
        grads[f"conv{i + 1}.kernel"] = dk
        grads[f"conv{i + 1}.bias"] = db

    v, d = params["embedding"].shape
    flat_idx = (cache["tokens"].reshape(-1, 1) * d + np.arange(d)).ravel()
    demb = np.bincount(flat_idx, weights=dx.ravel(), minlength=v * d).reshape(v, d)
    demb[0] = 0.0  # padding/UNK row stays frozen
    grads["embedding"] = demb
    return grads


# --------------------------------------------------------------------------
# optimizer


@dataclass
class OptimizerState:
    lr: float = 1e-5
    momentum: float = 0.9
    weight_decay: float = 1e-7
    velocity: dict = field(default_factory=dict)


def sgd_step(params: ModelParams, grads: Gradients, state: OptimizerState):
    """SGD with momentum and coupled weight decay. Returns new ``(params, state)``."""
    if grads.keys() != params.keys():
        raise ValueError("gradients do not match parameters")
    new_params, new_vel = {}, {}
    for name, w in params.items():
        g = grads[name]
        if g.shape != w.shape:
            raise ValueError(f"gradient shape mismatch for {name}: {g.shape} vs {w.shape}")
        v = state.velocity.get(name)
        step = g + state.weight_decay * w
        v = step if v is None else state.momentum * v + step
        updated = w - state.lr * v
        if not np.all(np.isfinite(updated)):
            raise FloatingPointError(f"non-finite update in {name}")
        new_params[name] = updated
        new_vel[name] = v
    return new_params, OptimizerState(state.lr, state.momentum, state.weight_decay, new_vel)


# --------------------------------------------------------------------------
# checkpoints


def vocab_hash(vocab) -> str:
    return hashlib.sha256("\n".join(vocab).encode("utf-8")).hexdigest()


def _encode_tensor(a: np.ndarray) -> dict:
    a = np.ascontiguousarray(a, dtype="<f8")
    return {"shape": list(a.shape), "data": base64.b64encode(a.tobytes()).decode("ascii")}


def _decode_tensor(d: dict) -> np.ndarray:
    raw = base64.b64decode(d["data"])
    return np.frombuffer(raw, dtype="<f8").reshape(d["shape"]).astype(float)


def save_checkpoint(path, params: ModelParams, config: ModelConfig, vocab, metadata=None) -> None:
    """Write config, vocab hash, metadata and all tensors (little-endian float64) as JSON."""
    doc = {
        "format": "trinet-checkpoint/1",
        "model_config": config.to_dict(),
        "vocab_hash": vocab_hash(vocab),
        "metadata": metadata or {},
        "tensors": {name: _encode_tensor(params[name]) for name in config.param_shapes()},
    }
    Path(path).write_text(json.dumps(doc, indent=1) + "\n", encoding="utf-8")


def load_checkpoint(path):
    """Returns ``(params, config, vocab_hash, metadata)``."""
    doc = json.loads(Path(path).read_text(encoding="utf-8"))
    if doc.get("format") != "trinet-checkpoint/1":
        raise ValueError(f"{path}: not a trinet checkpoint")
    config = ModelConfig.from_dict(doc["model_config"])
    params = {name: _decode_tensor(t) for name, t in doc["tensors"].items()}
    for name, shape in config.param_shapes().items():
        if name not in params or params[name].shape != tuple(shape):
            raise ValueError(f"{path}: tensor {name} missing or misshapen")
    return params, config, doc["vocab_hash"], doc["metadata"]
