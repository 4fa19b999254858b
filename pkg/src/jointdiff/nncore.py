"""Dense-tensor numerics with hand-written reverse-mode gradients.

Exactly the layers the token denoiser needs: embedding, affine, layer
normalization, masked multi-head attention, a GELU MLP, and softmax
cross-entropy, plus an Adam optimizer and a finite-difference gradient
checker. Arrays are plain numpy ndarrays; f32 is the working precision,
f64 is used for oracle-grade checks.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from jointdiff.errors import ConfigError, ContractError, InputError

# Additive pre-softmax penalty for inadmissible attention pairs. Large enough
# that exp() underflows to exactly 0.0, so masked weights are bit-exact zeros.
NEG_MASK = -1.0e9

DTYPES = {"f32": np.float32, "f64": np.float64}


def resolve_dtype(dtype) -> np.dtype:
    if isinstance(dtype, str):
        try:
            return np.dtype(DTYPES[dtype])
        except KeyError:
            raise InputError(f"unknown dtype {dtype!r}; expected one of {sorted(DTYPES)}")
    return np.dtype(dtype)


# ---------------------------------------------------------------------------
# Parameters and optimizer


class Parameter:
    """A named tensor with a gradient accumulator of identical shape."""

    __slots__ = ("name", "value", "grad")

    def __init__(self, name: str, value: np.ndarray):
        self.name = name
        self.value = value
        self.grad = np.zeros_like(value)

    @property
    def shape(self):
        return self.value.shape


class ParamStore:
    """Ordered, uniquely named parameter map with shared dtype."""

    def __init__(self, dtype="f32"):
        self.dtype = resolve_dtype(dtype)
        self._params: dict[str, Parameter] = {}

    def add(self, name: str, value: np.ndarray) -> Parameter:
        if name in self._params:
            raise ContractError(f"duplicate parameter name {name!r}")
        p = Parameter(name, np.ascontiguousarray(value, dtype=self.dtype))
        self._params[name] = p
        return p

    def __getitem__(self, name: str) -> Parameter:
        return self._params[name]

    def __contains__(self, name: str) -> bool:
        return name in self._params

    def __iter__(self):
        return iter(self._params.values())

    def names(self) -> list[str]:
        return list(self._params)

    def zero_grads(self) -> None:
        for p in self._params.values():
            p.grad[...] = 0

    def num_scalars(self) -> int:
        return sum(p.value.size for p in self._params.values())

    def state_arrays(self) -> dict[str, np.ndarray]:
        return {name: p.value for name, p in self._params.items()}

    def load_state(self, arrays: dict[str, np.ndarray]) -> None:
        missing = set(self._params) - set(arrays)
        extra = set(arrays) - set(self._params)
        if missing or extra:
            raise ContractError(f"parameter set mismatch: missing={sorted(missing)} extra={sorted(extra)}")
        for name, p in self._params.items():
            a = arrays[name]
            if tuple(a.shape) != tuple(p.value.shape):
                raise ContractError(f"shape mismatch for {name}: {a.shape} vs {p.value.shape}")
            p.value[...] = a.astype(self.dtype)


class Adam:
    """Adam with bias correction; lr 3e-4, betas (0.9, 0.95), no weight decay."""

    def __init__(self, store: ParamStore, lr: float = 3e-4, betas=(0.9, 0.95), eps: float = 1e-8):
        self.store = store
        self.lr = lr
        self.beta1, self.beta2 = betas
        self.eps = eps
        self.t = 0
        self.m = {p.name: np.zeros_like(p.value) for p in store}
        self.v = {p.name: np.zeros_like(p.value) for p in store}

    def step(self) -> None:
        self.t += 1
        b1, b2 = self.beta1, self.beta2
        c1 = 1.0 - b1 ** self.t
        c2 = 1.0 - b2 ** self.t
        for p in self.store:
            g = p.grad
            m = self.m[p.name]
            v = self.v[p.name]
            m *= b1
            m += (1 - b1) * g
            v *= b2
            v += (1 - b2) * np.square(g)
            p.value -= self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)

    def state_arrays(self) -> dict[str, np.ndarray]:
        out = {}
        for name in self.m:
            out[f"adam.m.{name}"] = self.m[name]
            out[f"adam.v.{name}"] = self.v[name]
        return out

    def load_state(self, arrays: dict[str, np.ndarray], t: int) -> None:
        self.t = t
        for name in self.m:
            self.m[name][...] = arrays[f"adam.m.{name}"]
            self.v[name][...] = arrays[f"adam.v.{name}"]


def init_uniform(rng: np.random.Generator, shape, fan_in: int, dtype) -> np.ndarray:
    """Scaled-uniform init in (-1/sqrt(fan_in), +1/sqrt(fan_in))."""
    bound = 1.0 / math.sqrt(max(1, fan_in))
    return rng.uniform(-bound, bound, size=shape).astype(dtype)


# ---------------------------------------------------------------------------
# Functional pieces


def softmax(x: np.ndarray, axis: int = -1) -> np.ndarray:
    shifted = x - np.max(x, axis=axis, keepdims=True)
    e = np.exp(shifted)
    return e / np.sum(e, axis=axis, keepdims=True)


def softmax_inplace(x: np.ndarray) -> np.ndarray:
    """Row softmax over the last axis, overwriting x (hot attention path)."""
    x -= np.max(x, axis=-1, keepdims=True)
    np.exp(x, out=x)
    x /= np.sum(x, axis=-1, keepdims=True)
    return x


def log_softmax(x: np.ndarray, axis: int = -1) -> np.ndarray:
    shifted = x - np.max(x, axis=axis, keepdims=True)
    return shifted - np.log(np.sum(np.exp(shifted), axis=axis, keepdims=True))


def masked_attention(
    q: np.ndarray, k: np.ndarray, v: np.ndarray, admissible: np.ndarray
) -> np.ndarray:
    """Scaled dot-product attention restricted to admissible (query, key) pairs.

    q: (..., Lq, d), k/v: (..., Lk, d), admissible: bool (Lq, Lk) broadcast
    over leading axes. Inadmissible pairs get an additive -1e9 before the
    softmax, which underflows to an exactly-zero weight. A query row with no
    admissible key has no well-defined output and raises ConfigError.
    """
    admissible = np.asarray(admissible, dtype=bool)
    if not admissible.any(axis=-1).all():
        bad = np.argwhere(~admissible.any(axis=-1))
        raise ConfigError(f"attention row(s) with no admissible key: {bad[:4].tolist()}")
    d = q.shape[-1]
    scores = q @ np.swapaxes(k, -1, -2) / np.asarray(math.sqrt(d), dtype=q.dtype)
    scores = scores + np.where(admissible, 0.0, NEG_MASK).astype(q.dtype)
    weights = softmax(scores, axis=-1)
    return weights @ v


def attention_weights(q, k, admissible) -> np.ndarray:
    """The softmax weight matrix of masked_attention (for invariant tests)."""
    d = q.shape[-1]
    scores = q @ np.swapaxes(k, -1, -2) / np.asarray(math.sqrt(d), dtype=q.dtype)
    scores = scores + np.where(np.asarray(admissible, bool), 0.0, NEG_MASK).astype(q.dtype)
    return softmax(scores, axis=-1)


def softmax_cross_entropy(
    logits: np.ndarray, targets: np.ndarray, weights: np.ndarray
) -> tuple[float, np.ndarray]:
    """Weighted token-level cross-entropy and its logit gradient.

    logits: (N, V); targets: (N,) int ids; weights: (N,) >= 0. Positions with
    weight 0 contribute nothing to either loss or gradient. Returns
    (sum_i w_i * -log softmax(logits_i)[targets_i], dL/dlogits).
    """
    logits = np.asarray(logits)
    targets = np.asarray(targets, dtype=np.int64)
    weights = np.asarray(weights, dtype=logits.dtype)
    if np.any(weights < 0):
        raise InputError("cross-entropy weights must be >= 0")
    n, v = logits.shape
    live = weights > 0
    if np.any((targets[live] < 0) | (targets[live] >= v)):
        raise InputError(f"target id outside logit width {v}")
    logp = log_softmax(logits, axis=-1)
    idx = np.arange(n)
    # clip dead targets into range so the gather is safe; their weight is 0
    safe_t = np.where(live, targets, 0)
    loss = float(-(weights * logp[idx, safe_t]).sum())
    dlogits = softmax(logits, axis=-1)
    dlogits[idx[live], safe_t[live]] -= 1.0
    dlogits *= weights[:, None]
    dlogits[~live] = 0.0
    return loss, dlogits


def relu(x: np.ndarray) -> np.ndarray:
    return np.maximum(x, 0.0)


def relu_grad_inplace(dy: np.ndarray, activated: np.ndarray) -> np.ndarray:
    """dy masked by the activation pattern, written into dy."""
    dy *= activated > 0
    return dy


# ---------------------------------------------------------------------------
# Layers (forward caches what backward needs; backward accumulates into .grad)


LN_EPS = 1e-5


class LayerNorm:
    def __init__(self, store: ParamStore, name: str, dim: int):
        dt = store.dtype
        self.g = store.add(f"{name}.g", np.ones(dim, dtype=dt))
        self.b = store.add(f"{name}.b", np.zeros(dim, dtype=dt))

    def forward(self, x: np.ndarray):
        mu = x.mean(axis=-1, keepdims=True)
        xc = x - mu
        var = np.mean(xc * xc, axis=-1, keepdims=True)
        inv = 1.0 / np.sqrt(var + LN_EPS)
        xhat = xc * inv
        return xhat * self.g.value + self.b.value, (xhat, inv)

    def infer(self, x: np.ndarray) -> np.ndarray:
        return self.forward(x)[0]

    def backward(self, dy: np.ndarray, cache) -> np.ndarray:
        xhat, inv = cache
        d = xhat.shape[-1]
        self.g.grad += (dy * xhat).reshape(-1, d).sum(axis=0)
        self.b.grad += dy.reshape(-1, d).sum(axis=0)
        dxhat = dy * self.g.value
        m1 = dxhat.mean(axis=-1, keepdims=True)
        m2 = (dxhat * xhat).mean(axis=-1, keepdims=True)
        return inv * (dxhat - m1 - xhat * m2)


class Affine:
    def __init__(self, store: ParamStore, name: str, d_in: int, d_out: int, rng: np.random.Generator):
        dt = store.dtype
        self.w = store.add(f"{name}.w", init_uniform(rng, (d_in, d_out), d_in, dt))
        self.b = store.add(f"{name}.b", np.zeros(d_out, dtype=dt))

    def forward(self, x: np.ndarray) -> np.ndarray:
        d_in, d_out = self.w.shape
        # flatten leading axes so BLAS sees one big GEMM
        y = x.reshape(-1, d_in) @ self.w.value + self.b.value
        return y.reshape(*x.shape[:-1], d_out)

    def backward(self, dy: np.ndarray, x: np.ndarray) -> np.ndarray:
        d_in, d_out = self.w.shape
        dy2 = dy.reshape(-1, d_out)
        x2 = x.reshape(-1, d_in)
        self.w.grad += x2.T @ dy2
        self.b.grad += dy2.sum(axis=0)
        return (dy2 @ self.w.value.T).reshape(x.shape)


class Embedding:
    """Token embedding table, optionally reused as a tied output head."""

    def __init__(self, store: ParamStore, name: str, vocab: int, dim: int, rng: np.random.Generator):
        self.table = store.add(name, init_uniform(rng, (vocab, dim), dim, store.dtype))
        self.vocab = vocab
        self.dim = dim

    def forward(self, ids: np.ndarray) -> np.ndarray:
        return self.table.value[ids]

    def backward(self, ids: np.ndarray, dy: np.ndarray) -> None:
        onehot = np.zeros((ids.size, self.vocab), dtype=dy.dtype)
        onehot[np.arange(ids.size), ids.reshape(-1)] = 1.0
        self.table.grad += onehot.T @ dy.reshape(-1, self.dim)

    def head_forward(self, h: np.ndarray) -> np.ndarray:
        return h @ self.table.value.T

    def head_backward(self, dlogits: np.ndarray, h: np.ndarray) -> np.ndarray:
        self.table.grad += dlogits.reshape(-1, self.vocab).T @ h.reshape(-1, self.dim)
        return dlogits @ self.table.value


class MultiHeadAttention:
    """Self-attention over an admissibility mask, with an optional external
    key/value prefix for incremental inference."""

    def __init__(self, store: ParamStore, name: str, dim: int, heads: int, rng: np.random.Generator):
        if dim % heads != 0:
            raise ConfigError(f"width {dim} not divisible by heads {heads}")
        self.dim = dim
        self.heads = heads
        self.head_dim = dim // heads
        self.wqkv = Affine(store, f"{name}.qkv", dim, 3 * dim, rng)
        self.wo = Affine(store, f"{name}.out", dim, dim, rng)

    def _split(self, x: np.ndarray) -> np.ndarray:
        # (..., L, D) -> (..., H, L, hd)
        new = x.reshape(*x.shape[:-1], self.heads, self.head_dim)
        return np.swapaxes(new, -3, -2)

    def _merge(self, x: np.ndarray) -> np.ndarray:
        back = np.swapaxes(x, -3, -2)
        return back.reshape(*back.shape[:-2], self.dim)

    def forward(self, x: np.ndarray, mask_bias: np.ndarray):
        """x: (B, L, D); mask_bias: (L, L) additive (0 / NEG_MASK)."""
        qkv = self.wqkv.forward(x)
        q, k, v = np.split(qkv, 3, axis=-1)
        qh = np.ascontiguousarray(self._split(q))
        kh = np.ascontiguousarray(self._split(k))
        vh = np.ascontiguousarray(self._split(v))
        scale = np.asarray(1.0 / math.sqrt(self.head_dim), dtype=x.dtype)
        scores = (qh * scale) @ np.swapaxes(kh, -1, -2)
        scores += mask_bias
        w = softmax_inplace(scores)
        ctx = self._merge(w @ vh)
        y = self.wo.forward(ctx)
        return y, (x, qh, kh, vh, w, ctx)

    def backward(self, dy: np.ndarray, cache) -> np.ndarray:
        x, qh, kh, vh, w, ctx = cache
        dctx = self.wo.backward(dy, ctx)
        dctx_h = np.ascontiguousarray(self._split(dctx))
        dw = dctx_h @ np.swapaxes(vh, -1, -2)
        dvh = np.swapaxes(w, -1, -2) @ dctx_h
        # softmax grad in place: ds = w * (dw - rowsum(dw * w))
        rowsum = np.einsum("...ij,...ij->...i", dw, w)[..., None]
        dw -= rowsum
        dw *= w
        ds = dw
        scale = np.asarray(1.0 / math.sqrt(self.head_dim), dtype=dy.dtype)
        dqh = (ds @ kh) * scale
        dkh = np.swapaxes(ds, -1, -2) @ (qh * scale)
        dqkv = np.concatenate([self._merge(dqh), self._merge(dkh), self._merge(dvh)], axis=-1)
        return self.wqkv.backward(dqkv, x)

    def infer(self, x: np.ndarray, mask_bias: np.ndarray, k_prefix=None, v_prefix=None):
        """x: (S, D) new rows; optional prefix K/V: (H, P, hd). mask_bias rows
        must cover the concatenated key axis. Returns (y, k_new, v_new)."""
        qkv = self.wqkv.forward(x)
        q, k, v = np.split(qkv, 3, axis=-1)
        qh = self._split(q)  # (H, S, hd)
        kh = self._split(k)
        vh = self._split(v)
        k_all = kh if k_prefix is None else np.concatenate([k_prefix, kh], axis=-2)
        v_all = vh if v_prefix is None else np.concatenate([v_prefix, vh], axis=-2)
        scale = np.asarray(1.0 / math.sqrt(self.head_dim), dtype=x.dtype)
        scores = (qh * scale) @ np.swapaxes(k_all, -1, -2) + mask_bias
        w = softmax(scores, axis=-1)
        y = self.wo.forward(self._merge(w @ v_all))
        return y, kh, vh


class Mlp:
    """Two affine maps around a ReLU."""

    def __init__(self, store: ParamStore, name: str, dim: int, hidden: int, rng: np.random.Generator):
        self.up = Affine(store, f"{name}.up", dim, hidden, rng)
        self.down = Affine(store, f"{name}.down", hidden, dim, rng)

    def forward(self, x: np.ndarray):
        a = relu(self.up.forward(x))
        return self.down.forward(a), (x, a)

    def infer(self, x: np.ndarray) -> np.ndarray:
        return self.down.forward(relu(self.up.forward(x)))

    def backward(self, dy: np.ndarray, cache) -> np.ndarray:
        x, a = cache
        da = self.down.backward(dy, a)
        du = relu_grad_inplace(da, a)
        return self.up.backward(du, x)


# ---------------------------------------------------------------------------
# Gradient checking


@dataclass
class GradCheckEntry:
    param: str
    index: int
    analytic: float
    numeric: float
    rel_err: float


@dataclass
class GradCheckReport:
    max_rel_err: float
    worst: GradCheckEntry | None
    entries: list[GradCheckEntry] = field(repr=False, default_factory=list)

    def failures(self, threshold: float) -> list[GradCheckEntry]:
        return [e for e in self.entries if e.rel_err >= threshold]


def grad_check(
    loss_fn: Callable[[], float],
    store: ParamStore,
    *,
    rng: np.random.Generator,
    num_coords: int = 64,
    epsilon: float = 1e-5,
    denom_floor: float = 1e-8,
    fd_loss_fn: Callable[[], float] | None = None,
    fd_store: ParamStore | None = None,
    grad_override: Callable[[str, int], float] | None = None,
) -> GradCheckReport:
    """Compare analytic gradients against central finite differences.

    loss_fn evaluates the model and populates store gradients; it is called
    once for the analytic pass. Finite differences call loss_fn twice per
    sampled coordinate, unless (fd_loss_fn, fd_store) supply an f64 twin of
    the model: for f32 models the differences must be taken in f64, since an
    f32 loss cannot resolve them. epsilon must lie in [1e-6, 1e-3] (the
    central-difference sweet spot in f64). The reported error is
    |a - n| / max(|a| + |n|, denom_floor): the floor keeps coordinates whose
    true gradient is essentially zero from dominating the report.
    grad_override lets tests inject a corrupted analytic value.
    """
    if not (1e-6 <= epsilon <= 1e-3):
        raise InputError(f"epsilon {epsilon} outside [1e-6, 1e-3]")
    if (fd_loss_fn is None) != (fd_store is None):
        raise InputError("fd_loss_fn and fd_store must be supplied together")
    store.zero_grads()
    base = loss_fn()
    if not math.isfinite(base):
        raise ConfigError("non-finite loss in analytic pass")
    analytic = {p.name: p.grad.copy() for p in store}
    eval_fn = fd_loss_fn if fd_loss_fn is not None else loss_fn
    eval_store = fd_store if fd_store is not None else store

    names = store.names()
    sizes = np.array([store[n].value.size for n in names])
    total = int(sizes.sum())
    count = min(num_coords, total)
    flat_choice = rng.choice(total, size=count, replace=False)
    bounds = np.cumsum(sizes)

    entries = []
    for flat in sorted(flat_choice.tolist()):
        pi = int(np.searchsorted(bounds, flat, side="right"))
        offset = flat - (0 if pi == 0 else int(bounds[pi - 1]))
        name = names[pi]
        value = eval_store[name].value.reshape(-1)
        old = float(value[offset])
        value[offset] = old + epsilon
        f_plus = eval_fn()
        value[offset] = old - epsilon
        f_minus = eval_fn()
        value[offset] = old
        if not (math.isfinite(f_plus) and math.isfinite(f_minus)):
            raise ConfigError(f"non-finite loss while perturbing {name}[{offset}]")
        numeric = (f_plus - f_minus) / (2 * epsilon)
        a = float(analytic[name].reshape(-1)[offset])
        if grad_override is not None:
            forced = grad_override(name, offset)
            if forced is not None:
                a = forced
        rel = abs(a - numeric) / max(abs(a) + abs(numeric), denom_floor)
        entries.append(GradCheckEntry(name, offset, a, numeric, rel))
    worst = max(entries, key=lambda e: e.rel_err) if entries else None
    return GradCheckReport(worst.rel_err if worst else 0.0, worst, entries)
