"""Embedding + MLP click-through-rate model with manual backpropagation.

Parameters live in a single flat float64 vector (:class:`ParamVector`) so that
multi-domain strategies can add, scale and interpolate whole models.  Named
blocks (embedding tables, dense weights, biases) are views into that vector.
"""

from dataclasses import dataclass, field
from functools import cached_property

import numpy as np

from .errors import BatchIndexError, DivergenceError, LayoutError

ACTIVATIONS = ("relu", "tanh")


@dataclass(frozen=True)
class ModelSpec:
    num_users: int
    num_items: int
    embed_dim: int = 16
    hidden: tuple = (64, 32)
    activation: str = "relu"
    seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, "hidden", tuple(int(h) for h in self.hidden))
        if not self.hidden:
            raise ValueError("hidden must contain at least one layer")
        if any(h < 1 for h in self.hidden):
            raise ValueError(f"hidden widths must be >= 1, got {self.hidden}")
        if self.embed_dim < 1:
            raise ValueError("embed_dim must be >= 1")
        if self.num_users < 1 or self.num_items < 1:
            raise ValueError("num_users and num_items must be >= 1")
        if self.activation not in ACTIVATIONS:
            raise ValueError(f"activation must be one of {ACTIVATIONS}")

    @cached_property
    def layout(self):
        d = self.embed_dim
        blocks = [("user_emb", (self.num_users, d)), ("item_emb", (self.num_items, d))]
        fan_in = 2 * d
        for i, width in enumerate(self.hidden):
            blocks.append((f"dense{i}.W", (fan_in, width)))
            blocks.append((f"dense{i}.b", (width,)))
            fan_in = width
        blocks.append(("out.W", (fan_in,)))
        blocks.append(("out.b", (1,)))
        return Layout(tuple(blocks))

    def to_dict(self):
        return {
            "num_users": self.num_users,
            "num_items": self.num_items,
            "embed_dim": self.embed_dim,
            "hidden": list(self.hidden),
            "activation": self.activation,
            "seed": self.seed,
        }


@dataclass(frozen=True)
class Layout:
    """Ordered mapping from block name to shape, with derived flat offsets."""

    blocks: tuple
    offsets: dict = field(init=False, compare=False, repr=False, hash=False)
    size: int = field(init=False, compare=False, repr=False, hash=False)

    def __post_init__(self):
        offsets = {}
        start = 0
        for name, shape in self.blocks:
            n = int(np.prod(shape))
            offsets[name] = (slice(start, start + n), tuple(shape))
            start += n
        object.__setattr__(self, "offsets", offsets)
        object.__setattr__(self, "size", start)

    @classmethod
    def flat(cls, dim, name="theta"):
        return cls(((name, (int(dim),)),))

    @property
    def names(self):
        return [name for name, _ in self.blocks]

    def slice(self, name):
        return self.offsets[name][0]


class ParamVector:
    """A flat parameter vector with a block layout.

    Arithmetic returns new vectors; nothing here mutates its operands.
    """

    __slots__ = ("values", "layout")

    def __init__(self, values, layout):
        values = np.asarray(values, dtype=np.float64)
        if values.shape != (layout.size,):
            raise LayoutError(f"values have shape {values.shape}, layout needs ({layout.size},)")
        self.values = values
        self.layout = layout

    @classmethod
    def zeros(cls, layout):
        return cls(np.zeros(layout.size), layout)

    def zeros_like(self):
        return ParamVector(np.zeros_like(self.values), self.layout)

    def copy(self):
        return ParamVector(self.values.copy(), self.layout)

    def block(self, name):
        sl, shape = self.layout.offsets[name]
        return self.values[sl].reshape(shape)

    def _check(self, other):
        if not isinstance(other, ParamVector):
            raise TypeError(f"expected ParamVector, got {type(other).__name__}")
        if other.layout is not self.layout and other.layout != self.layout:
            raise LayoutError("parameter layouts differ")

    def __add__(self, other):
        self._check(other)
        return ParamVector(self.values + other.values, self.layout)

    def __sub__(self, other):
        self._check(other)
        return ParamVector(self.values - other.values, self.layout)

    def __mul__(self, scalar):
        return ParamVector(self.values * float(scalar), self.layout)

    __rmul__ = __mul__

    def __neg__(self):
        return ParamVector(-self.values, self.layout)

    def axpy(self, a, x):
        """Return ``self + a * x``."""
        self._check(x)
        return ParamVector(self.values + float(a) * x.values, self.layout)

    def dot(self, other):
        self._check(other)
        return float(self.values @ other.values)

    def norm(self):
        return float(np.linalg.norm(self.values))

    def bitwise_equal(self, other):
        return self.layout == other.layout and np.array_equal(
            self.values.view(np.uint64), other.values.view(np.uint64)
        )

    def __repr__(self):
        return f"ParamVector(size={self.layout.size}, norm={self.norm():.6g})"


def combine(shared, specific):
    """Per-domain inference parameters: elementwise ``shared + specific``."""
    return shared + specific


@dataclass(frozen=True)
class Batch:
    user_ids: np.ndarray
    item_ids: np.ndarray
    labels: np.ndarray
    domain_ids: np.ndarray = None

    def __post_init__(self):
        for name in ("user_ids", "item_ids"):
            object.__setattr__(self, name, np.asarray(getattr(self, name), dtype=np.int64))
        object.__setattr__(self, "labels", np.asarray(self.labels, dtype=np.float64))
        n = len(self.labels)
        if n < 1 or len(self.user_ids) != n or len(self.item_ids) != n:
            raise ValueError("user_ids, item_ids and labels must share one length >= 1")
        if self.domain_ids is not None:
            object.__setattr__(self, "domain_ids", np.asarray(self.domain_ids, dtype=np.int64))

    def __len__(self):
        return len(self.labels)


def init_params(spec, rng_seed=None):
    """Fan-in scaled uniform weights, zero biases.  Deterministic per seed."""
    seed = spec.seed if rng_seed is None else rng_seed
    rng = np.random.default_rng(seed)
    layout = spec.layout
    p = ParamVector.zeros(layout)
    gain = 6.0 if spec.activation == "relu" else 3.0
    for name, shape in layout.blocks:
        if name.endswith(".b"):
            continue
        if name.endswith("_emb"):
            # each embedding coordinate feeds the first dense layer directly
            limit = np.sqrt(3.0 / spec.embed_dim)
        elif name == "out.W":
            limit = np.sqrt(3.0 / shape[0])
        else:
            limit = np.sqrt(gain / shape[0])
        p.block(name)[...] = rng.uniform(-limit, limit, size=shape)
    return p


def _check_batch(spec, batch):
    u, v = batch.user_ids, batch.item_ids
    if u.min() < 0 or u.max() >= spec.num_users:
        raise BatchIndexError(f"user id out of range [0, {spec.num_users})")
    if v.min() < 0 or v.max() >= spec.num_items:
        raise BatchIndexError(f"item id out of range [0, {spec.num_items})")


def _activate(spec, z):
    if spec.activation == "relu":
        return np.maximum(z, 0.0)
    return np.tanh(z)


def _activation_grad(spec, z, a):
    if spec.activation == "relu":
        return (z > 0).astype(np.float64)
    return 1.0 - a * a


def _forward(spec, params, batch):
    _check_batch(spec, batch)
    x = np.concatenate(
        [params.block("user_emb")[batch.user_ids], params.block("item_emb")[batch.item_ids]], axis=1
    )
    pre, acts = [], [x]
    a = x
    for i in range(len(spec.hidden)):
        z = a @ params.block(f"dense{i}.W") + params.block(f"dense{i}.b")
        a = _activate(spec, z)
        pre.append(z)
        acts.append(a)
    logits = a @ params.block("out.W") + params.block("out.b")[0]
    return logits, pre, acts


def _sigmoid(z):
    return np.exp(-np.logaddexp(0.0, -z))


def forward(spec, params, batch):
    """Click probabilities for every sample in ``batch``."""
    logits, _, _ = _forward(spec, params, batch)
    return _sigmoid(logits)


def loss_and_grad(spec, params, batch, sample_weight=None):
    """Mean binary cross-entropy over ``batch`` and its exact gradient.

    ``sample_weight`` scales each sample's loss term (the mean still divides by
    the batch size).  Embedding rows not referenced by the batch get zero
    gradient.
    """
    logits, pre, acts = _forward(spec, params, batch)
    y = batch.labels
    m = len(y)
    per_sample = np.logaddexp(0.0, logits) - y * logits
    dlogit = _sigmoid(logits) - y
    if sample_weight is not None:
        per_sample = per_sample * sample_weight
        dlogit = dlogit * sample_weight
    loss = float(per_sample.sum() / m)
    dlogit = dlogit / m
    if not np.isfinite(loss):
        raise DivergenceError("non-finite loss")

    grad = ParamVector.zeros(params.layout)
    grad.block("out.W")[...] = acts[-1].T @ dlogit
    grad.block("out.b")[0] = dlogit.sum()
    da = np.outer(dlogit, params.block("out.W"))
    for i in reversed(range(len(spec.hidden))):
        dz = da * _activation_grad(spec, pre[i], acts[i + 1])
        grad.block(f"dense{i}.W")[...] = acts[i].T @ dz
        grad.block(f"dense{i}.b")[...] = dz.sum(axis=0)
        da = dz @ params.block(f"dense{i}.W").T
    d = spec.embed_dim
    np.add.at(grad.block("user_emb"), batch.user_ids, da[:, :d])
    np.add.at(grad.block("item_emb"), batch.item_ids, da[:, d:])
    if not np.all(np.isfinite(grad.values)):
        raise DivergenceError("non-finite gradient")
    return loss, grad


def loss(spec, params, batch, sample_weight=None):
    logits, _, _ = _forward(spec, params, batch)
    per_sample = np.logaddexp(0.0, logits) - batch.labels * logits
    if sample_weight is not None:
        per_sample = per_sample * sample_weight
    return float(per_sample.sum() / len(batch))


def fd_hvp(grad_fn, params, v, eps=1e-4):
    """Central finite-difference Hessian-vector product of ``grad_fn`` at ``params``.

    ``grad_fn`` maps a ParamVector to a gradient ParamVector.
    """
    if eps <= 0:
        raise ValueError("eps must be positive")
    if v.norm() == 0.0:
        raise ValueError("direction vector must be non-zero")
    g_plus = grad_fn(params.axpy(eps, v))
    g_minus = grad_fn(params.axpy(-eps, v))
    out = (g_plus - g_minus) * (1.0 / (2.0 * eps))
    if not np.all(np.isfinite(out.values)):
        raise DivergenceError("non-finite Hessian-vector product")
    return out


def hvp(spec, params, batch, v, eps=1e-4):
    return fd_hvp(lambda p: loss_and_grad(spec, p, batch)[1], params, v, eps)
