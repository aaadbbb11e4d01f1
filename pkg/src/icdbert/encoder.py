"""BERT-style bidirectional encoder with a multi-label classification head.

Everything is plain numpy: the forward pass keeps the intermediates it needs
and :func:`backward` returns exact gradients for every parameter tensor.

Parameters live in an ordered ``dict`` of named arrays. Dense weights are
stored ``(in, out)`` and applied as ``x @ W + b``, except the classifier,
which is ``(num_labels, hidden)`` and applied as ``pooled @ W.T + b``.
"""

from __future__ import annotations

import hashlib
import math
from dataclasses import asdict, dataclass, field, replace
from typing import Dict

import numpy as np
from scipy.special import erf, expit

Parameters = Dict[str, np.ndarray]

MASK_BIAS = -1e4
_INV_SQRT2 = 1.0 / math.sqrt(2.0)
_INV_SQRT_2PI = 1.0 / math.sqrt(2.0 * math.pi)


class NumericError(FloatingPointError):
    pass


@dataclass(frozen=True)
class ModelConfig:
    vocab_size: int = 200
    hidden: int = 64
    layers: int = 2
    heads: int = 4
    ff_dim: int = 128
    max_len: int = 64
    num_labels: int = 20
    dropout: float = 0.1
    type_vocab_size: int = 2
    layer_norm_eps: float = 1e-12
    init_std: float = 0.02

    def __post_init__(self):
        if self.hidden % self.heads:
            raise ValueError(f"hidden size {self.hidden} is not divisible by {self.heads} heads")
        if not 0.0 <= self.dropout < 1.0:
            raise ValueError("dropout must lie in [0, 1)")
        if self.num_labels < 1:
            raise ValueError("num_labels must be >= 1")
        for name in ("vocab_size", "hidden", "layers", "heads", "ff_dim", "max_len"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be >= 1")

    @property
    def head_dim(self) -> int:
        return self.hidden // self.heads

    @classmethod
    def preset(cls, name: str, **overrides) -> "ModelConfig":
        try:
            base = PRESETS[name]
        except KeyError:
            raise ValueError(f"unknown preset {name!r}; choose from {sorted(PRESETS)}") from None
        return cls(**{**base, **overrides})

    def to_dict(self) -> dict:
        return asdict(self)

    def with_labels(self, num_labels: int) -> "ModelConfig":
        return replace(self, num_labels=num_labels)


PRESETS = {
    # Narrow model trained from scratch: a wider init than BERT's 0.02 gets
    # stacked projections out of the near-zero saddle within a few hundred steps.
    "desk": dict(vocab_size=200, hidden=64, layers=2, heads=4, ff_dim=128, max_len=64, init_std=0.1),
    # bert-base-uncased dimensions
    "paper": dict(vocab_size=30522, hidden=768, layers=12, heads=12, ff_dim=3072, max_len=512),
}


def parameter_shapes(config: ModelConfig) -> dict[str, tuple[int, ...]]:
    H, F = config.hidden, config.ff_dim
    shapes = {
        "embeddings.token": (config.vocab_size, H),
        "embeddings.position": (config.max_len, H),
        "embeddings.segment": (config.type_vocab_size, H),
        "embeddings.norm.scale": (H,),
        "embeddings.norm.shift": (H,),
    }
    for i in range(config.layers):
        p = f"layer.{i}."
        for proj in ("query", "key", "value", "output"):
            shapes[p + f"attention.{proj}.weight"] = (H, H)
            shapes[p + f"attention.{proj}.bias"] = (H,)
        shapes[p + "attention.norm.scale"] = (H,)
        shapes[p + "attention.norm.shift"] = (H,)
        shapes[p + "ffn.intermediate.weight"] = (H, F)
        shapes[p + "ffn.intermediate.bias"] = (F,)
        shapes[p + "ffn.output.weight"] = (F, H)
        shapes[p + "ffn.output.bias"] = (H,)
        shapes[p + "ffn.norm.scale"] = (H,)
        shapes[p + "ffn.norm.shift"] = (H,)
    shapes["pooler.weight"] = (H, H)
    shapes["pooler.bias"] = (H,)
    shapes["classifier.weight"] = (config.num_labels, H)
    shapes["classifier.bias"] = (config.num_labels,)
    return shapes


def parameter_count(config: ModelConfig) -> int:
    return sum(math.prod(shape) for shape in parameter_shapes(config).values())


def init_parameters(config: ModelConfig, seed: int, dtype=np.float64) -> Parameters:
    """Weights ~ N(0, init_std^2); biases and norm shifts 0; norm scales 1."""
    rng = np.random.default_rng(seed)
    params: Parameters = {}
    for name, shape in parameter_shapes(config).items():
        if name.endswith(".scale"):
            params[name] = np.ones(shape, dtype=dtype)
        elif name.endswith((".bias", ".shift")):
            params[name] = np.zeros(shape, dtype=dtype)
        else:
            params[name] = rng.normal(0.0, config.init_std, size=shape).astype(dtype)
    return params


# ---------------------------------------------------------------------------
# Elementwise pieces
# ---------------------------------------------------------------------------

def gelu(x):
    """Exact GELU, ``0.5 * x * (1 + erf(x / sqrt(2)))``."""
    return 0.5 * x * (1.0 + erf(np.asarray(x) * _INV_SQRT2))


def gelu_grad(x):
    x = np.asarray(x)
    return 0.5 * (1.0 + erf(x * _INV_SQRT2)) + x * _INV_SQRT_2PI * np.exp(-0.5 * x * x)


def layer_norm(v, scale, shift, eps: float = 1e-12):
    """Normalize over the last axis with the population variance."""
    return _layer_norm_forward(np.asarray(v, dtype=np.float64), scale, shift, eps)[0]


def _layer_norm_forward(x, scale, shift, eps):
    mean = x.mean(axis=-1, keepdims=True)
    centered = x - mean
    inv_std = 1.0 / np.sqrt((centered * centered).mean(axis=-1, keepdims=True) + eps)
    xhat = centered * inv_std
    return xhat * scale + shift, (xhat, inv_std, scale)


def _layer_norm_backward(dy, cache):
    xhat, inv_std, scale = cache
    axes = tuple(range(dy.ndim - 1))
    dscale = (dy * xhat).sum(axis=axes)
    dshift = dy.sum(axis=axes)
    dxhat = dy * scale
    dx = inv_std * (
        dxhat
        - dxhat.mean(axis=-1, keepdims=True)
        - xhat * (dxhat * xhat).mean(axis=-1, keepdims=True)
    )
    return dx, dscale, dshift


def _softmax(scores):
    shifted = scores - scores.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=-1, keepdims=True)


def bce_with_logits(logits, targets) -> float:
    """Mean of ``max(z, 0) - z*y + log(1 + exp(-|z|))`` over every cell."""
    z = np.asarray(logits, dtype=np.float64)
    y = np.asarray(targets, dtype=np.float64)
    if z.shape != y.shape:
        raise ValueError(f"logits {z.shape} and targets {y.shape} differ in shape")
    return float(np.mean(np.maximum(z, 0.0) - z * y + np.log1p(np.exp(-np.abs(z)))))


def bce_with_logits_grad(logits, targets):
    z = np.asarray(logits, dtype=np.float64)
    return (expit(z) - targets) / z.size


# ---------------------------------------------------------------------------
# Dropout
# ---------------------------------------------------------------------------

class Dropout:
    """Counter-based dropout masks.

    The mask for a site is a pure function of ``(seed, step, site)`` drawn
    from a Philox generator, so a forward pass can be replayed exactly.
    """

    def __init__(self, rate: float, seed: int, step: int):
        self.rate = rate
        self.seed = seed
        self.step = step

    def mask(self, site: str, shape) -> np.ndarray | None:
        if self.rate == 0.0:
            return None
        digest = hashlib.sha256(f"{self.seed}/{self.step}/{site}".encode()).digest()
        rng = np.random.Generator(np.random.Philox(key=int.from_bytes(digest[:16], "little")))
        keep = rng.random(shape) >= self.rate
        return keep / (1.0 - self.rate)


def _apply(x, mask):
    return x if mask is None else x * mask


# ---------------------------------------------------------------------------
# Forward
# ---------------------------------------------------------------------------

@dataclass
class ForwardActivation:
    """Outputs of one forward pass.

    ``hidden_states[0]`` is the embedding output and ``hidden_states[i + 1]``
    the output of layer ``i``; ``attention[i]`` has shape
    ``(batch, heads, seq, seq)``.
    """

    hidden_states: list[np.ndarray]
    attention: list[np.ndarray]
    pooled: np.ndarray | None = None
    logits: np.ndarray | None = None
    _caches: dict = field(default_factory=dict, repr=False)


def _check_finite(x, where: str) -> None:
    if not np.all(np.isfinite(x)):
        raise NumericError(f"non-finite values in {where}")


def embed_inputs(
    input_ids, segment_ids, params: Parameters, config: ModelConfig, dropout: Dropout | None = None
):
    """Sum token, position and segment rows, then layer-normalize."""
    ids = np.asarray(input_ids)
    if ids.ndim == 1:
        ids = ids[None, :]
    segs = np.zeros_like(ids) if segment_ids is None else np.asarray(segment_ids).reshape(ids.shape)
    B, L = ids.shape
    if ids.min(initial=0) < 0 or ids.max(initial=0) >= config.vocab_size:
        raise IndexError(f"token id outside [0, {config.vocab_size})")
    if L > config.max_len:
        raise IndexError(f"sequence length {L} exceeds max_len {config.max_len}")
    if segs.min(initial=0) < 0 or segs.max(initial=0) >= config.type_vocab_size:
        raise IndexError("segment id out of range")
    summed = (
        params["embeddings.token"][ids]
        + params["embeddings.position"][:L][None, :, :]
        + params["embeddings.segment"][segs]
    )
    normed, ln_cache = _layer_norm_forward(
        summed, params["embeddings.norm.scale"], params["embeddings.norm.shift"], config.layer_norm_eps
    )
    mask = dropout.mask("embeddings", normed.shape) if dropout else None
    out = _apply(normed, mask)
    _check_finite(out, "embeddings")
    return out, {"ids": ids, "segs": segs, "summed": summed, "ln": ln_cache, "drop": mask}


def _split_heads(x, heads):
    B, L, H = x.shape
    return x.reshape(B, L, heads, H // heads).transpose(0, 2, 1, 3)


def _merge_heads(x):
    B, A, L, d = x.shape
    return x.transpose(0, 2, 1, 3).reshape(B, L, A * d)


def _layer_forward(x, mask_bias, params, config, i, dropout):
    p = f"layer.{i}."
    A = config.heads
    scale = 1.0 / math.sqrt(config.head_dim)
    q = _split_heads(x @ params[p + "attention.query.weight"] + params[p + "attention.query.bias"], A)
    k = _split_heads(x @ params[p + "attention.key.weight"] + params[p + "attention.key.bias"], A)
    v = _split_heads(x @ params[p + "attention.value.weight"] + params[p + "attention.value.bias"], A)
    probs = _softmax(q @ k.transpose(0, 1, 3, 2) * scale + mask_bias)
    m_probs = dropout.mask(f"layer{i}/attention_probs", probs.shape) if dropout else None
    probs_d = _apply(probs, m_probs)
    context = _merge_heads(probs_d @ v)
    attn = context @ params[p + "attention.output.weight"] + params[p + "attention.output.bias"]
    m_attn = dropout.mask(f"layer{i}/attention_output", attn.shape) if dropout else None
    h1, ln1 = _layer_norm_forward(
        x + _apply(attn, m_attn),
        params[p + "attention.norm.scale"],
        params[p + "attention.norm.shift"],
        config.layer_norm_eps,
    )
    u = h1 @ params[p + "ffn.intermediate.weight"] + params[p + "ffn.intermediate.bias"]
    f = gelu(u)
    g = f @ params[p + "ffn.output.weight"] + params[p + "ffn.output.bias"]
    m_ffn = dropout.mask(f"layer{i}/ffn_output", g.shape) if dropout else None
    out, ln2 = _layer_norm_forward(
        h1 + _apply(g, m_ffn),
        params[p + "ffn.norm.scale"],
        params[p + "ffn.norm.shift"],
        config.layer_norm_eps,
    )
    _check_finite(out, f"layer {i}")
    cache = dict(
        x=x, q=q, k=k, v=v, probs=probs, probs_d=probs_d, m_probs=m_probs, context=context,
        m_attn=m_attn, h1=h1, ln1=ln1, u=u, f=f, m_ffn=m_ffn, ln2=ln2, scale=scale,
    )
    return out, probs, cache


def encoder_forward(
    states, attention_mask, params: Parameters, config: ModelConfig, dropout: Dropout | None = None
) -> ForwardActivation:
    """Run every transformer block; ``dropout=None`` is eval mode."""
    mask = np.asarray(attention_mask, dtype=np.float64).reshape(states.shape[:2])
    mask_bias = ((1.0 - mask) * MASK_BIAS)[:, None, None, :]
    hidden = [states]
    attention = []
    layer_caches = []
    x = states
    for i in range(config.layers):
        x, probs, cache = _layer_forward(x, mask_bias, params, config, i, dropout)
        hidden.append(x)
        attention.append(probs)
        layer_caches.append(cache)
    return ForwardActivation(hidden, attention, _caches={"layers": layer_caches})


def classify(activation: ForwardActivation, params: Parameters, dropout: Dropout | None = None):
    """Tanh pooler over the [CLS] state, then the linear label head. Returns logits."""
    cls_state = activation.hidden_states[-1][:, 0, :]
    pooled = np.tanh(cls_state @ params["pooler.weight"] + params["pooler.bias"])
    m_pool = dropout.mask("pooled", pooled.shape) if dropout else None
    logits = _apply(pooled, m_pool) @ params["classifier.weight"].T + params["classifier.bias"]
    _check_finite(logits, "classifier")
    activation.pooled = pooled
    activation.logits = logits
    activation._caches["head"] = {"cls": cls_state, "pooled_d": _apply(pooled, m_pool), "m_pool": m_pool}
    return logits


def forward(
    params: Parameters,
    config: ModelConfig,
    input_ids,
    attention_mask,
    segment_ids=None,
    dropout: Dropout | None = None,
) -> ForwardActivation:
    states, emb_cache = embed_inputs(input_ids, segment_ids, params, config, dropout)
    activation = encoder_forward(states, attention_mask, params, config, dropout)
    activation._caches["embeddings"] = emb_cache
    classify(activation, params, dropout)
    return activation


def predict_proba(params, config, input_ids, attention_mask, segment_ids=None, batch_size: int = 64):
    """Eval-mode sigmoid probabilities, batched to bound memory."""
    out = []
    for start in range(0, len(input_ids), batch_size):
        sl = slice(start, start + batch_size)
        act = forward(
            params, config, input_ids[sl], attention_mask[sl],
            None if segment_ids is None else segment_ids[sl],
        )
        out.append(expit(act.logits))
    if not out:
        return np.zeros((0, config.num_labels))
    return np.concatenate(out)


# ---------------------------------------------------------------------------
# Backward
# ---------------------------------------------------------------------------

def _dense_grads(x, dy):
    """Weight and bias gradients of ``y = x @ W + b`` over all leading axes."""
    x2 = x.reshape(-1, x.shape[-1])
    dy2 = dy.reshape(-1, dy.shape[-1])
    return x2.T @ dy2, dy2.sum(axis=0)


def _layer_backward(dout, cache, params, i, grads):
    p = f"layer.{i}."
    dz2, grads[p + "ffn.norm.scale"], grads[p + "ffn.norm.shift"] = _layer_norm_backward(dout, cache["ln2"])
    dg = _apply(dz2, cache["m_ffn"])
    grads[p + "ffn.output.weight"], grads[p + "ffn.output.bias"] = _dense_grads(cache["f"], dg)
    du = (dg @ params[p + "ffn.output.weight"].T) * gelu_grad(cache["u"])
    grads[p + "ffn.intermediate.weight"], grads[p + "ffn.intermediate.bias"] = _dense_grads(cache["h1"], du)
    dh1 = dz2 + du @ params[p + "ffn.intermediate.weight"].T

    dz1, grads[p + "attention.norm.scale"], grads[p + "attention.norm.shift"] = _layer_norm_backward(
        dh1, cache["ln1"]
    )
    dattn = _apply(dz1, cache["m_attn"])
    grads[p + "attention.output.weight"], grads[p + "attention.output.bias"] = _dense_grads(
        cache["context"], dattn
    )
    dcontext = _split_heads(dattn @ params[p + "attention.output.weight"].T, cache["q"].shape[1])
    dprobs_d = dcontext @ cache["v"].transpose(0, 1, 3, 2)
    dv = cache["probs_d"].transpose(0, 1, 3, 2) @ dcontext
    dprobs = _apply(dprobs_d, cache["m_probs"])
    probs = cache["probs"]
    dscores = probs * (dprobs - (dprobs * probs).sum(axis=-1, keepdims=True)) * cache["scale"]
    dq = dscores @ cache["k"]
    dk = dscores.transpose(0, 1, 3, 2) @ cache["q"]

    x = cache["x"]
    dx = dz1
    for proj, d in (("query", dq), ("key", dk), ("value", dv)):
        d = _merge_heads(d)
        grads[p + f"attention.{proj}.weight"], grads[p + f"attention.{proj}.bias"] = _dense_grads(x, d)
        dx = dx + d @ params[p + f"attention.{proj}.weight"].T
    return dx


def backward(activation: ForwardActivation, dlogits, params: Parameters, config: ModelConfig) -> Parameters:
    """Gradients of a scalar loss w.r.t. every parameter, given ``dloss/dlogits``."""
    grads: Parameters = {}
    head = activation._caches["head"]
    dlogits = np.asarray(dlogits, dtype=np.float64)
    grads["classifier.weight"] = dlogits.T @ head["pooled_d"]
    grads["classifier.bias"] = dlogits.sum(axis=0)
    dpooled = _apply(dlogits @ params["classifier.weight"], head["m_pool"])
    dpz = dpooled * (1.0 - activation.pooled**2)
    grads["pooler.weight"], grads["pooler.bias"] = _dense_grads(head["cls"], dpz)

    last = activation.hidden_states[-1]
    dx = np.zeros_like(last)
    dx[:, 0, :] = dpz @ params["pooler.weight"].T
    for i in reversed(range(config.layers)):
        dx = _layer_backward(dx, activation._caches["layers"][i], params, i, grads)

    emb = activation._caches["embeddings"]
    dnormed = _apply(dx, emb["drop"])
    dsummed, grads["embeddings.norm.scale"], grads["embeddings.norm.shift"] = _layer_norm_backward(
        dnormed, emb["ln"]
    )
    H = config.hidden
    flat = dsummed.reshape(-1, H)
    dtok = np.zeros_like(params["embeddings.token"])
    np.add.at(dtok, emb["ids"].ravel(), flat)
    dseg = np.zeros_like(params["embeddings.segment"])
    np.add.at(dseg, emb["segs"].ravel(), flat)
    dpos = np.zeros_like(params["embeddings.position"])
    L = dsummed.shape[1]
    dpos[:L] = dsummed.sum(axis=0)
    grads["embeddings.token"] = dtok
    grads["embeddings.position"] = dpos
    grads["embeddings.segment"] = dseg

    ordered = {name: grads[name] for name in params}
    # Walk in backprop order so the error names the first tensor affected.
    for name, g in reversed(ordered.items()):
        if g.shape != params[name].shape:
            raise AssertionError(f"gradient for {name} has shape {g.shape}, expected {params[name].shape}")
        if not np.all(np.isfinite(g)):
            raise NumericError(f"non-finite gradient for {name}")
    return ordered


def compute_gradients(
    params: Parameters,
    config: ModelConfig,
    input_ids,
    attention_mask,
    targets,
    segment_ids=None,
    dropout: Dropout | None = None,
) -> tuple[float, Parameters, ForwardActivation]:
    """Mean BCE-with-logits loss and its gradient for every parameter tensor."""
    activation = forward(params, config, input_ids, attention_mask, segment_ids, dropout)
    targets = np.asarray(targets, dtype=np.float64)
    loss = bce_with_logits(activation.logits, targets)
    grads = backward(activation, bce_with_logits_grad(activation.logits, targets), params, config)
    return loss, grads, activation
