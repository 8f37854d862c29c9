"""Flat-parameter MLP classifier with hand-written gradients.

The network is split into a feature extractor (all hidden layers) and a
linear classifier head.  Parameters live in one float64 vector laid out
layer by layer as ``[W_0.ravel(), b_0, W_1.ravel(), b_1, ...]`` with
``W_i`` of shape ``(out, in)``; ``split_index`` marks where the head begins.
"""
from __future__ import annotations

import zlib
from dataclasses import dataclass

import numpy as np

from .errors import CapabilityError, ShapeError, ValidationError

ACTIVATIONS = ("tanh", "softplus", "relu", "linear")
SMOOTH_ACTIVATIONS = frozenset({"tanh", "softplus", "linear"})
LOSSES = ("ce", "margin")

_STREAMS = {"data": 0, "init": 1, "rma": 2, "attack": 3, "batch": 4, "aug": 5}


def rng_for(seed: int, stream: str) -> np.random.Generator:
    """Independent generator for a named substream of ``seed``.

    Known stream names map to fixed keys; anything else is keyed by its
    CRC32 so the mapping never depends on Python's hash randomization.
    """
    key = _STREAMS.get(stream)
    if key is None:
        key = zlib.crc32(stream.encode("utf-8")) + 1024
    return np.random.Generator(np.random.PCG64(np.random.SeedSequence([int(seed), key])))


@dataclass(frozen=True)
class Arch:
    input_dim: int
    hidden: tuple[int, ...]
    n_classes: int
    activation: str = "tanh"

    def __post_init__(self):
        object.__setattr__(self, "hidden", tuple(int(h) for h in self.hidden))
        if self.activation not in ACTIVATIONS:
            raise ValidationError(f"unknown activation {self.activation!r}")
        if self.input_dim < 1 or self.n_classes < 2 or any(h < 1 for h in self.hidden):
            raise ValidationError(f"invalid architecture {self}")

    @property
    def dims(self) -> tuple[int, ...]:
        return (self.input_dim, *self.hidden, self.n_classes)

    @property
    def feature_dim(self) -> int:
        return self.hidden[-1] if self.hidden else self.input_dim

    @property
    def n_params(self) -> int:
        d = self.dims
        return sum(d[i + 1] * d[i] + d[i + 1] for i in range(len(d) - 1))

    @property
    def split_index(self) -> int:
        d = self.dims
        return sum(d[i + 1] * d[i] + d[i + 1] for i in range(len(d) - 2))

    @property
    def smooth(self) -> bool:
        return self.activation in SMOOTH_ACTIVATIONS


class Model:
    """Classifier ``T(F(x))`` backed by a flat parameter vector."""

    def __init__(self, arch: Arch, params=None):
        self.arch = arch
        if params is None:
            params = np.zeros(arch.n_params)
        params = np.array(params, dtype=np.float64)
        if params.shape != (arch.n_params,):
            raise ShapeError(f"expected {arch.n_params} parameters, got shape {params.shape}")
        self.params = params

    @property
    def split_index(self) -> int:
        return self.arch.split_index

    @property
    def feature_params(self) -> np.ndarray:
        return self.params[: self.split_index]

    @property
    def head_params(self) -> np.ndarray:
        return self.params[self.split_index :]

    def layers(self, params=None):
        """(W, b) views into ``params`` (defaults to the model's own)."""
        p = self.params if params is None else params
        d = self.arch.dims
        out, off = [], 0
        for i in range(len(d) - 1):
            n_w = d[i + 1] * d[i]
            w = p[off : off + n_w].reshape(d[i + 1], d[i])
            off += n_w
            b = p[off : off + d[i + 1]]
            off += d[i + 1]
            out.append((w, b))
        return out

    def __repr__(self):
        return f"Model({self.arch}, n_params={self.arch.n_params})"


def init_model(arch: Arch, rng: np.random.Generator) -> Model:
    """Glorot-uniform weights, zero biases."""
    model = Model(arch)
    for w, b in model.layers():
        fan_out, fan_in = w.shape
        limit = np.sqrt(6.0 / (fan_in + fan_out))
        w[...] = rng.uniform(-limit, limit, size=w.shape)
        b[...] = 0.0
    return model


def linear_head(n_in: int, n_classes: int, rng: np.random.Generator | None = None) -> Model:
    """A head-only model (no hidden layers), e.g. the auxiliary MDD classifier."""
    arch = Arch(n_in, (), n_classes, "linear")
    return init_model(arch, rng) if rng is not None else Model(arch)


def clone_model(src: Model) -> Model:
    return Model(src.arch, src.params.copy())


# ---------------------------------------------------------------- activations

def _activate(name, a):
    if name == "tanh":
        return np.tanh(a)
    if name == "softplus":
        return np.logaddexp(0.0, a)
    if name == "relu":
        return np.maximum(a, 0.0)
    return a


def _activation_slope(name, a, h):
    if name == "tanh":
        return 1.0 - h * h
    if name == "softplus":
        return 0.5 * (1.0 + np.tanh(0.5 * a))
    if name == "relu":
        return (a > 0).astype(a.dtype)
    return np.ones_like(a)


# ---------------------------------------------------------------- forward/backward

def _as_batch(model, x):
    x = np.asarray(x, dtype=np.float64)
    single = x.ndim == 1
    if single:
        x = x[None, :]
    if x.ndim != 2 or x.shape[1] != model.arch.input_dim:
        raise ShapeError(f"input of shape {np.shape(x)} does not match input_dim={model.arch.input_dim}")
    return x, single


def _forward(model, x, params=None):
    """Return (hs, pres): hs[0]=x, hs[n_hidden]=features, hs[-1]=logits."""
    arch = model.arch
    n_hidden = len(arch.hidden)
    hs, pres = [x], []
    h = x
    for i, (w, b) in enumerate(model.layers(params)):
        a = h @ w.T + b
        pres.append(a)
        h = _activate(arch.activation, a) if i < n_hidden else a
        hs.append(h)
    return hs, pres


def _backward(model, hs, pres, dz, dfeat=None, need_input=False, params=None):
    """Reverse pass from logit gradients ``dz`` (B, C).

    ``dfeat`` is an extra gradient injected at the feature layer.  Returns the
    parameter gradient summed over rows and, if requested, the input gradient.
    """
    arch = model.arch
    n_hidden = len(arch.hidden)
    layers = model.layers(params)
    grads = np.empty(arch.n_params)
    glayers = model.layers(grads)
    delta = dz
    dx = None
    for i in reversed(range(len(layers))):
        gw, gb = glayers[i]
        gw[...] = delta.T @ hs[i]
        gb[...] = delta.sum(axis=0)
        if i == 0 and not need_input:
            break
        dh = delta @ layers[i][0]
        if i == n_hidden and dfeat is not None:
            dh = dh + dfeat
        if i == 0:
            dx = dh
            break
        delta = dh * _activation_slope(arch.activation, pres[i - 1], hs[i])
    return grads, dx


def _jvp_params(model, hs, pres, direction, params=None):
    """Directional derivative of the logits along a parameter direction."""
    arch = model.arch
    n_hidden = len(arch.hidden)
    dlayers = model.layers(direction)
    dh = None
    for i, (w, _) in enumerate(model.layers(params)):
        dw, db = dlayers[i]
        da = hs[i] @ dw.T + db
        if dh is not None:
            da = da + dh @ w.T
        dh = da * _activation_slope(arch.activation, pres[i], hs[i + 1]) if i < n_hidden else da
    return dh


def forward_features(model: Model, x) -> np.ndarray:
    xb, single = _as_batch(model, x)
    hs, _ = _forward(model, xb)
    f = hs[len(model.arch.hidden)]
    return f[0] if single else f


def forward_logits(model: Model, x) -> np.ndarray:
    xb, single = _as_batch(model, x)
    hs, _ = _forward(model, xb)
    return hs[-1][0] if single else hs[-1]


def predict(model: Model, x) -> np.ndarray:
    """Hard labels; ties go to the lowest class index."""
    return np.argmax(forward_logits(model, x), axis=-1)


# ---------------------------------------------------------------- losses

def softmax(z) -> np.ndarray:
    z = np.asarray(z, dtype=np.float64)
    e = np.exp(z - z.max(axis=-1, keepdims=True))
    return e / e.sum(axis=-1, keepdims=True)


def log_softmax(z) -> np.ndarray:
    z = np.asarray(z, dtype=np.float64)
    m = z.max(axis=-1, keepdims=True)
    return z - m - np.log(np.exp(z - m).sum(axis=-1, keepdims=True))


def _is_hard(target, logits):
    t = np.asarray(target)
    return np.issubdtype(t.dtype, np.integer) and t.ndim == logits.ndim - 1


def _check_target(target, logits):
    """Normalize ``target`` against 2-D ``logits``; returns (array, is_hard)."""
    n, c = logits.shape
    t = np.asarray(target)
    if _is_hard(t, logits):
        t = t.reshape(n)
        if t.size and (t.min() < 0 or t.max() >= c):
            raise ValidationError(f"hard labels must lie in 0..{c - 1}")
        return t, True
    t = np.asarray(t, dtype=np.float64).reshape(n, c) if t.size == n * c else None
    if t is None:
        raise ShapeError(f"target of shape {np.shape(target)} incompatible with logits {logits.shape}")
    if np.any(np.abs(t.sum(axis=1) - 1.0) > 1e-9) or np.any(t < 0):
        raise ValidationError("soft targets must be non-negative and sum to 1 within 1e-9")
    return t, False


def _loss_terms(logits, target, loss="ce", kappa=0.0):
    """Per-row losses and their gradients with respect to the logits."""
    t, hard = _check_target(target, logits)
    n = logits.shape[0]
    rows = np.arange(n)
    if loss == "ce":
        logp = log_softmax(logits)
        p = np.exp(logp)
        if hard:
            values = -logp[rows, t]
            dz = p.copy()
            dz[rows, t] -= 1.0
        else:
            values = -(t * logp).sum(axis=1)
            dz = p * t.sum(axis=1, keepdims=True) - t
        return values, dz
    if loss == "margin":
        if not hard:
            raise ValidationError("margin loss needs hard labels")
        others = logits.copy()
        others[rows, t] = -np.inf
        rival = np.argmax(others, axis=1)
        margin = logits[rows, t] - logits[rows, rival]
        # attacker maximizes -max(margin, -kappa); flat once misclassified
        values = -np.maximum(margin, -kappa)
        active = margin > -kappa
        dz = np.zeros_like(logits)
        dz[rows[active], t[active]] = -1.0
        dz[rows[active], rival[active]] = 1.0
        return values, dz
    raise ValidationError(f"unknown loss {loss!r}; expected one of {LOSSES}")


def loss_ce(logits, target) -> float:
    """Cross-entropy against a hard label or a soft distribution (batch mean)."""
    z = np.asarray(logits, dtype=np.float64)
    zb = z[None, :] if z.ndim == 1 else z
    t = np.asarray(target)
    if z.ndim == 1:
        t = t[None] if t.ndim == 0 or not np.issubdtype(t.dtype, np.integer) else t.reshape(1)
    values, _ = _loss_terms(zb, t, "ce")
    return float(values.mean())


def entropy(p) -> np.ndarray:
    p = np.asarray(p, dtype=np.float64)
    with np.errstate(divide="ignore", invalid="ignore"):
        return -np.where(p > 0, p * np.log(p), 0.0).sum(axis=-1)


# ---------------------------------------------------------------- gradients

def loss_and_grad_params(model: Model, x, target, loss="ce"):
    """Mean batch loss and its gradient with respect to ``model.params``."""
    xb, _ = _as_batch(model, x)
    hs, pres = _forward(model, xb)
    values, dz = _loss_terms(hs[-1], target, loss)
    n = xb.shape[0]
    grads, _ = _backward(model, hs, pres, dz / n)
    return float(values.mean()), grads


def grad_params(model: Model, x, target, loss="ce") -> np.ndarray:
    return loss_and_grad_params(model, x, target, loss)[1]


def grad_input(model: Model, x, target, loss="ce") -> np.ndarray:
    """Per-example gradient of the loss with respect to each input row."""
    xb, single = _as_batch(model, x)
    hs, pres = _forward(model, xb)
    _, dz = _loss_terms(hs[-1], target, loss)
    _, dx = _backward(model, hs, pres, dz, need_input=True)
    return dx[0] if single else dx


def logits_jvp(model: Model, x, direction) -> np.ndarray:
    """d logits / d params applied to ``direction`` (forward mode)."""
    xb, _ = _as_batch(model, x)
    direction = np.asarray(direction, dtype=np.float64)
    if direction.shape != model.params.shape:
        raise ShapeError("direction must match the parameter vector")
    hs, pres = _forward(model, xb)
    return _jvp_params(model, hs, pres, direction)


def logits_vjp(model: Model, x, dz, dfeat=None) -> np.ndarray:
    """Parameter gradient of ``sum(dz * logits) + sum(dfeat * features)``."""
    xb, _ = _as_batch(model, x)
    hs, pres = _forward(model, xb)
    grads, _ = _backward(model, hs, pres, np.asarray(dz, dtype=np.float64), dfeat=dfeat)
    return grads


def head_of(model: Model) -> Model:
    """Copy of the classifier head as a standalone model over features."""
    return Model(Arch(model.arch.feature_dim, (), model.arch.n_classes, "linear"), model.head_params.copy())


def require_smooth(model: Model, what: str, hint: str = ""):
    if not model.arch.smooth:
        raise CapabilityError(
            f"{what} needs a smooth activation; {model.arch.activation!r} is not differentiable everywhere{hint}"
        )
