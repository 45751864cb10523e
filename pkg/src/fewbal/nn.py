"""Small feed-forward core with hand-written reverse-mode gradients.

Everything runs in float64. Layers cache their forward inputs, so each
backward call must follow the forward call that produced the value being
differentiated. Losses come in single-example form (loss and gradient for
one logit vector) and batched form (mean over rows).
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from typing import Iterable, Literal, Sequence

import numpy as np

from fewbal.errors import DataFormatError, InvalidSpecError, UsageError

NORM_FLOOR = 1e-12  # norm clamp for cosine similarity
COSINE_SCALE = 10.0  # default multiplier on cosine logits


@dataclass
class ParamTensor:
    """A named trainable array and its gradient accumulator."""

    name: str
    values: np.ndarray
    grad: np.ndarray = field(init=False)

    def __post_init__(self) -> None:
        self.values = np.asarray(self.values, dtype=np.float64)
        self.grad = np.zeros_like(self.values)

    def zero_grad(self) -> None:
        self.grad[...] = 0.0

    def copy(self, name: str | None = None) -> "ParamTensor":
        return ParamTensor(name or self.name, self.values.copy())


@dataclass(frozen=True)
class EncoderConfig:
    """Dense-stack shape: input -> hidden widths -> embedding."""

    input_dim: int
    hidden: tuple[int, ...] = (64,)
    embed_dim: int = 32
    activation: Literal["relu"] = "relu"

    def __post_init__(self) -> None:
        if self.input_dim < 1 or self.embed_dim < 1:
            raise InvalidSpecError("input_dim and embed_dim must be positive")
        if any(h < 1 for h in self.hidden):
            raise InvalidSpecError(f"hidden widths must be positive, got {self.hidden}")
        if self.activation != "relu":
            raise InvalidSpecError(f"unsupported activation {self.activation!r}")


@dataclass(frozen=True)
class LossConfig:
    """Which loss the inner loop / meta loss uses."""

    kind: Literal["ce", "weighted_ce", "focal"] = "ce"
    focal_gamma: float = 2.0
    focal_alpha: float = 1.0

    def __post_init__(self) -> None:
        if self.kind not in ("ce", "weighted_ce", "focal"):
            raise InvalidSpecError(f"unknown loss kind {self.kind!r}")
        if self.focal_gamma < 0:
            raise InvalidSpecError("focal_gamma must be non-negative")


def he_init(rng: np.random.Generator, fan_in: int, shape: tuple[int, ...]) -> np.ndarray:
    """He-style normal init, std sqrt(2 / fan_in)."""
    return rng.normal(0.0, np.sqrt(2.0 / fan_in), size=shape)


class Dense:
    """y = x @ w + b with cached input for the backward pass."""

    def __init__(self, w: ParamTensor, b: ParamTensor):
        self.w = w
        self.b = b
        self._x: np.ndarray | None = None

    @classmethod
    def create(cls, name: str, fan_in: int, fan_out: int, rng: np.random.Generator) -> "Dense":
        w = ParamTensor(f"{name}.w", he_init(rng, fan_in, (fan_in, fan_out)))
        b = ParamTensor(f"{name}.b", np.zeros(fan_out))
        return cls(w, b)

    @classmethod
    def identity(cls, name: str, dim: int) -> "Dense":
        return cls(ParamTensor(f"{name}.w", np.eye(dim)), ParamTensor(f"{name}.b", np.zeros(dim)))

    def forward(self, x: np.ndarray) -> np.ndarray:
        x = np.asarray(x, dtype=np.float64)
        self._x = x
        return x @ self.w.values + self.b.values

    def backward(self, dy: np.ndarray) -> np.ndarray:
        if self._x is None:
            raise UsageError("Dense.backward called before forward")
        self.w.grad += self._x.T @ dy
        self.b.grad += dy.sum(axis=0)
        return dy @ self.w.values.T

    def params(self) -> list[ParamTensor]:
        return [self.w, self.b]

    def clone(self) -> "Dense":
        return Dense(self.w.copy(), self.b.copy())


class Relu:
    def __init__(self) -> None:
        self._mask: np.ndarray | None = None

    def forward(self, x: np.ndarray) -> np.ndarray:
        self._mask = x > 0
        return np.where(self._mask, x, 0.0)

    def backward(self, dy: np.ndarray) -> np.ndarray:
        if self._mask is None:
            raise UsageError("Relu.backward called before forward")
        return np.where(self._mask, dy, 0.0)


class Encoder:
    """Dense/ReLU stack mapping features to embeddings.

    With no hidden layers this is a single dense map; initialized to the
    identity (square case) it passes inputs through unchanged, which the
    tests lean on.
    """

    def __init__(self, cfg: EncoderConfig, rng: np.random.Generator | None = None,
                 layers: list[Dense] | None = None):
        self.cfg = cfg
        if layers is not None:
            self.layers = layers
        else:
            if rng is None:
                raise UsageError("Encoder needs either an rng or prebuilt layers")
            widths = [cfg.input_dim, *cfg.hidden, cfg.embed_dim]
            self.layers = [
                Dense.create(f"enc{i}", widths[i], widths[i + 1], rng)
                for i in range(len(widths) - 1)
            ]
        self._relus = [Relu() for _ in self.layers[:-1]]

    @classmethod
    def identity(cls, dim: int) -> "Encoder":
        cfg = EncoderConfig(input_dim=dim, hidden=(), embed_dim=dim)
        return cls(cfg, layers=[Dense.identity("enc0", dim)])

    def forward(self, x: np.ndarray) -> np.ndarray:
        h = np.asarray(x, dtype=np.float64)
        if h.ndim != 2:
            raise UsageError(f"Encoder.forward expects a 2-d batch, got shape {h.shape}")
        for i, layer in enumerate(self.layers):
            h = layer.forward(h)
            if i < len(self.layers) - 1:
                h = self._relus[i].forward(h)
        return h

    def backward(self, d_embed: np.ndarray) -> np.ndarray:
        d = d_embed
        for i in reversed(range(len(self.layers))):
            if i < len(self.layers) - 1:
                d = self._relus[i].backward(d)
            d = self.layers[i].backward(d)
        return d

    def params(self) -> list[ParamTensor]:
        return [p for layer in self.layers for p in layer.params()]

    def zero_grad(self) -> None:
        for p in self.params():
            p.zero_grad()

    def clone(self) -> "Encoder":
        return Encoder(self.cfg, layers=[layer.clone() for layer in self.layers])


def encode(encoder: Encoder, x: np.ndarray) -> np.ndarray:
    """Embed one vector or a batch; 1-d input gives 1-d output."""
    arr = np.asarray(x, dtype=np.float64)
    if arr.ndim == 1:
        return encoder.forward(arr[None, :])[0]
    return encoder.forward(arr)


class LinearHead:
    """Plain affine classification head."""

    def __init__(self, dense: Dense):
        self.dense = dense

    @classmethod
    def create(cls, embed_dim: int, way: int, rng: np.random.Generator,
               name: str = "head") -> "LinearHead":
        return cls(Dense.create(name, embed_dim, way, rng))

    @classmethod
    def from_values(cls, w: np.ndarray, b: np.ndarray, name: str = "head") -> "LinearHead":
        return cls(Dense(ParamTensor(f"{name}.w", w), ParamTensor(f"{name}.b", b)))

    def forward(self, e: np.ndarray) -> np.ndarray:
        return self.dense.forward(e)

    def backward(self, dlogits: np.ndarray) -> np.ndarray:
        return self.dense.backward(dlogits)

    def params(self) -> list[ParamTensor]:
        return self.dense.params()

    def zero_grad(self) -> None:
        for p in self.params():
            p.zero_grad()

    def clone(self) -> "LinearHead":
        return LinearHead(self.dense.clone())


def cosine_logits(e: np.ndarray, w: np.ndarray, scale: float = COSINE_SCALE) -> np.ndarray:
    """scale * cosine(e_row, w_row) for every embedding/weight-row pair.

    Norms are clamped from below so zero vectors give zero similarity
    instead of NaN.
    """
    e = np.asarray(e, dtype=np.float64)
    w = np.asarray(w, dtype=np.float64)
    e_norm = np.maximum(np.linalg.norm(e, axis=-1, keepdims=True), NORM_FLOOR)
    w_norm = np.maximum(np.linalg.norm(w, axis=-1, keepdims=True), NORM_FLOOR)
    return scale * ((e @ w.T) / (e_norm * w_norm.T))


def cosine_logits_backward(
    e: np.ndarray, w: np.ndarray, dlogits: np.ndarray, scale: float = COSINE_SCALE
) -> tuple[np.ndarray, np.ndarray]:
    """Gradients of cosine_logits wrt embeddings and weight rows.

    Where a norm sits at the clamp floor the vector is treated as constant
    in its own norm, which matches the forward expression.
    """
    e = np.asarray(e, dtype=np.float64)
    w = np.asarray(w, dtype=np.float64)
    e_raw = np.linalg.norm(e, axis=-1, keepdims=True)
    w_raw = np.linalg.norm(w, axis=-1, keepdims=True)
    e_norm = np.maximum(e_raw, NORM_FLOOR)
    w_norm = np.maximum(w_raw, NORM_FLOOR)
    e_hat = e / e_norm
    w_hat = w / w_norm
    cos = e_hat @ w_hat.T
    g = scale * dlogits
    # d cos / d e = (w_hat - cos * e_hat) / |e|, and symmetrically for w.
    de = (g @ w_hat - (g * cos).sum(axis=1, keepdims=True) * e_hat) / e_norm
    dw = (g.T @ e_hat - (g * cos).sum(axis=0)[:, None] * w_hat) / w_norm
    # Clamped rows: the norm is constant, so the projection term drops.
    de = np.where(e_raw >= NORM_FLOOR, de, (g @ w_hat) / e_norm)
    dw = np.where(w_raw >= NORM_FLOOR, dw, (g.T @ e_hat) / w_norm)
    return de, dw


class CosineHead:
    """Classification head scoring by scaled cosine to one row per class."""

    def __init__(self, w: ParamTensor, scale: float = COSINE_SCALE):
        self.w = w
        self.scale = scale
        self._e: np.ndarray | None = None

    @classmethod
    def create(cls, embed_dim: int, way: int, rng: np.random.Generator,
               scale: float = COSINE_SCALE, name: str = "head") -> "CosineHead":
        return cls(ParamTensor(f"{name}.w", he_init(rng, embed_dim, (way, embed_dim))), scale)

    def forward(self, e: np.ndarray) -> np.ndarray:
        self._e = np.asarray(e, dtype=np.float64)
        return cosine_logits(self._e, self.w.values, self.scale)

    def backward(self, dlogits: np.ndarray) -> np.ndarray:
        if self._e is None:
            raise UsageError("CosineHead.backward called before forward")
        de, dw = cosine_logits_backward(self._e, self.w.values, dlogits, self.scale)
        self.w.grad += dw
        return de

    def normalize_rows(self) -> None:
        """Rescale every class row to unit norm (kept after each update)."""
        norms = np.maximum(np.linalg.norm(self.w.values, axis=1, keepdims=True), NORM_FLOOR)
        self.w.values /= norms

    def params(self) -> list[ParamTensor]:
        return [self.w]

    def zero_grad(self) -> None:
        self.w.zero_grad()

    def clone(self) -> "CosineHead":
        return CosineHead(self.w.copy(), self.scale)


# ---------------------------------------------------------------------------
# Losses. Single-example forms return the loss and its gradient wrt the
# logit vector; batched forms return the mean loss and the gradient of that
# mean wrt the logit matrix.


def log_softmax(logits: np.ndarray) -> np.ndarray:
    z = logits - logits.max(axis=-1, keepdims=True)
    return z - np.log(np.exp(z).sum(axis=-1, keepdims=True))


def softmax(logits: np.ndarray) -> np.ndarray:
    return np.exp(log_softmax(logits))


def class_weights(counts: Sequence[int]) -> np.ndarray:
    """Inverse-frequency class weights, normalized to mean one.

    w_c = total / (way * count_c). Balanced counts give exactly 1.0 per
    class, so the weighted loss collapses onto the plain one.
    """
    arr = np.asarray(counts, dtype=np.float64)
    if np.any(arr <= 0):
        raise InvalidSpecError(f"class counts must be positive, got {counts}")
    return arr.sum() / (len(arr) * arr)


def ce_loss(logits: np.ndarray, label: int) -> tuple[float, np.ndarray]:
    """Cross entropy of one logit vector against an integer label."""
    logp = log_softmax(np.asarray(logits, dtype=np.float64))
    loss = -logp[label]
    grad = np.exp(logp)
    grad[label] -= 1.0
    return float(loss), grad


def weighted_ce_loss(
    logits: np.ndarray, label: int, counts: Sequence[int]
) -> tuple[float, np.ndarray]:
    """Cross entropy scaled by the label's inverse-frequency weight."""
    w = class_weights(counts)[label]
    loss, grad = ce_loss(logits, label)
    return w * loss, w * grad


def focal_loss(
    logits: np.ndarray, label: int, gamma: float = 2.0, alpha: float = 1.0
) -> tuple[float, np.ndarray]:
    """Focal loss: alpha * (1 - p_label)^gamma * ce.

    gamma = 0 and alpha = 1 reproduce plain cross entropy. The gradient is
    f'(ce) * (softmax - onehot) where f is the focal reshaping of the
    cross-entropy value.
    """
    logp = log_softmax(np.asarray(logits, dtype=np.float64))
    ce = -logp[label]
    loss, fprime = _focal_terms(np.asarray([ce]), gamma, alpha)
    grad = np.exp(logp)
    grad[label] -= 1.0
    return float(loss[0]), fprime[0] * grad


def _focal_terms(ce: np.ndarray, gamma: float, alpha: float) -> tuple[np.ndarray, np.ndarray]:
    """Per-sample focal loss values and d(loss)/d(ce)."""
    p = np.exp(-ce)
    one_minus = -np.expm1(-ce)  # 1 - p, accurate near p = 1
    factor = one_minus**gamma
    loss = alpha * factor * ce
    with np.errstate(divide="ignore", invalid="ignore"):
        rim = gamma * one_minus ** (gamma - 1.0) * p * ce
    rim = np.where(one_minus > 0.0, rim, 0.0)
    fprime = alpha * (rim + factor)
    return loss, fprime


def batch_loss(
    logits: np.ndarray,
    labels: np.ndarray,
    cfg: LossConfig | None = None,
    counts: Sequence[int] | None = None,
) -> tuple[float, np.ndarray]:
    """Mean loss over rows and its gradient wrt the logit matrix.

    cfg selects plain, weighted, or focal cross entropy; counts feeds the
    weighted variant (the support shot counts, by convention).
    """
    cfg = cfg or LossConfig()
    logits = np.asarray(logits, dtype=np.float64)
    labels = np.asarray(labels)
    n = len(labels)
    logp = log_softmax(logits)
    ce = -logp[np.arange(n), labels]
    grad = np.exp(logp)
    grad[np.arange(n), labels] -= 1.0
    if cfg.kind == "ce":
        scale = np.ones(n)
    elif cfg.kind == "weighted_ce":
        if counts is None:
            raise InvalidSpecError("weighted_ce needs per-class counts")
        scale = class_weights(counts)[labels]
    else:
        loss_vec, fprime = _focal_terms(ce, cfg.focal_gamma, cfg.focal_alpha)
        return float(loss_vec.mean()), fprime[:, None] * grad / n
    return float((scale * ce).mean()), scale[:, None] * grad / n


# ---------------------------------------------------------------------------
# Optimizers.


def sgd_step(params: Iterable[ParamTensor], lr: float) -> None:
    """In-place gradient descent step using each tensor's stored grad."""
    for p in params:
        p.values -= lr * p.grad


class Adam:
    """Standard Adam with bias correction; state keyed per tensor identity."""

    def __init__(self, params: Sequence[ParamTensor], beta1: float = 0.9,
                 beta2: float = 0.999, eps: float = 1e-8):
        self.params = list(params)
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.t = 0
        self.m = [np.zeros_like(p.values) for p in self.params]
        self.v = [np.zeros_like(p.values) for p in self.params]

    def step(self, lr: float) -> None:
        self.t += 1
        b1c = 1.0 - self.beta1**self.t
        b2c = 1.0 - self.beta2**self.t
        for p, m, v in zip(self.params, self.m, self.v):
            m *= self.beta1
            m += (1.0 - self.beta1) * p.grad
            v *= self.beta2
            v += (1.0 - self.beta2) * p.grad**2
            p.values -= lr * (m / b1c) / (np.sqrt(v / b2c) + self.eps)


# ---------------------------------------------------------------------------
# Checkpoint io: named tensors, exact float64 round-trip via float hex.


def save_params(path: str, params: Sequence[ParamTensor], meta: dict | None = None) -> None:
    """Write named tensors (and a JSON meta line) in a text format.

    Values are float hex, so loading reproduces them bit for bit.
    """
    with open(path, "w") as fh:
        fh.write("fewbal-checkpoint v1\n")
        fh.write("meta " + json.dumps(meta or {}, sort_keys=True) + "\n")
        for p in params:
            head = ["param", p.name, str(p.values.ndim)] + [str(d) for d in p.values.shape]
            fh.write(" ".join(head) + "\n")
            flat = " ".join(float(v).hex() for v in p.values.ravel())
            fh.write(flat + "\n")


def load_params(path: str) -> tuple[dict, dict[str, np.ndarray]]:
    """Read a checkpoint back as (meta, name -> array)."""
    with open(path) as fh:
        lines = fh.read().splitlines()
    if not lines or lines[0] != "fewbal-checkpoint v1":
        raise DataFormatError(f"{path}: not a fewbal checkpoint")
    if len(lines) < 2 or not lines[1].startswith("meta "):
        raise DataFormatError(f"{path}: missing meta line")
    meta = json.loads(lines[1][len("meta "):])
    arrays: dict[str, np.ndarray] = {}
    i = 2
    while i < len(lines):
        if not lines[i].strip():
            i += 1
            continue
        head = lines[i].split()
        if head[0] != "param" or len(head) < 3:
            raise DataFormatError(f"{path}:{i + 1}: expected a param header")
        name = head[1]
        ndim = int(head[2])
        shape = tuple(int(d) for d in head[3 : 3 + ndim])
        if len(shape) != ndim:
            raise DataFormatError(f"{path}:{i + 1}: shape arity mismatch")
        values = np.array([float.fromhex(v) for v in lines[i + 1].split()], dtype=np.float64)
        expected = int(np.prod(shape)) if shape else 1
        if values.size != expected:
            raise DataFormatError(
                f"{path}:{i + 2}: expected {expected} values for {name}, got {values.size}"
            )
        arrays[name] = values.reshape(shape)
        i += 2
    return meta, arrays
