"""The toy transformer: attention-scheme masks, shifted prediction head,
prefix key/value caching, and the binary checkpoint format.

Prediction is *shifted*: the logits scored against the token at position p
come from the hidden state at position p-1, preserving next-token structure
while the attention mask decides how much bidirectional context feeds each
hidden state. Position 0 is never a prediction target.

Attention schemes over the unified sequence layout:

    hybrid          text causal within itself; current-image block
                    bidirectional within itself and sees all text; the
                    future-image block is bidirectional within itself and
                    sees the whole prompt; the action block is bidirectional
                    within itself and sees prompt + future image. No
                    information flows backward (image never sees actions,
                    prompt never sees either diffused block).
    causal          admissible(i, j) iff j <= i.
    bidirectional   like hybrid, but the future-image and action blocks are
                    mutually fully visible.

Outer padding (past the assembled length) attends only to itself and is
attended by nothing.
"""

from __future__ import annotations

import io
import json
import os
import struct
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from jointdiff.errors import ConfigError, ContractError, FormatError, InputError
from jointdiff.nncore import (
    NEG_MASK,
    Adam,
    Embedding,
    LayerNorm,
    Mlp,
    MultiHeadAttention,
    ParamStore,
    init_uniform,
    resolve_dtype,
)
from jointdiff.tokenspace import SequenceLayout, VocabLayout

ATTENTION_SCHEMES = ("hybrid", "causal", "bidirectional")


@dataclass(frozen=True)
class ModelConfig:
    layers: int = 4
    heads: int = 4
    width: int = 96
    scheme: str = "hybrid"
    tied_head: bool = True
    init_seed: int = 0
    dtype: str = "f32"

    def __post_init__(self):
        if self.width % self.heads != 0:
            raise ConfigError(f"width {self.width} not divisible by heads {self.heads}")
        if self.scheme not in ATTENTION_SCHEMES:
            raise InputError(f"scheme must be one of {ATTENTION_SCHEMES}")

    def to_json(self) -> dict:
        return {
            "layers": self.layers,
            "heads": self.heads,
            "width": self.width,
            "scheme": self.scheme,
            "tied_head": self.tied_head,
            "init_seed": self.init_seed,
            "dtype": self.dtype,
        }

    @classmethod
    def from_json(cls, obj: dict) -> "ModelConfig":
        return cls(**obj)


@dataclass
class HybridMask:
    """Boolean (query, key) admissibility matrix plus its additive bias."""

    admissible: np.ndarray
    seq: SequenceLayout
    scheme: str
    bias: np.ndarray = field(init=False)

    def __post_init__(self):
        if not self.admissible.any(axis=-1).all():
            raise ConfigError("attention mask has a row with no admissible key")
        self.bias = np.where(self.admissible, 0.0, NEG_MASK).astype(np.float32)

    def bias_as(self, dtype) -> np.ndarray:
        return self.bias.astype(resolve_dtype(dtype), copy=False)


def build_mask(scheme: str, seq: SequenceLayout, context_len: int | None = None) -> HybridMask:
    """Admissibility matrix for one sequence shape under one scheme."""
    if scheme not in ATTENTION_SCHEMES:
        raise InputError(f"scheme must be one of {ATTENTION_SCHEMES}")
    n = seq.context_len if context_len is None else context_len
    if n < seq.assembled_len:
        raise InputError(f"context {n} shorter than assembled length {seq.assembled_len}")

    adm = np.zeros((n, n), dtype=bool)
    if scheme == "causal":
        adm = np.tril(np.ones((n, n), dtype=bool))
        return HybridMask(adm, seq, scheme)

    t = seq.text_len
    c0, c1 = seq.cur_block
    f0, f1 = seq.fut_block
    a0, a1 = seq.act_block
    if not (0 <= t <= c0 <= c1 <= f0 <= f1 <= a0 <= a1 <= n):
        raise InputError("overlapping or mis-ordered segments")

    # text: causal within text, sees nothing later
    adm[:t, :t] = np.tril(np.ones((t, t), dtype=bool))
    # current image block: bidirectional within, sees all text
    adm[c0:c1, :t] = True
    adm[c0:c1, c0:c1] = True
    # future image block: bidirectional within, sees the whole prompt
    if f1 > f0:
        adm[f0:f1, :c1] = True
        adm[f0:f1, f0:f1] = True
    # action block: bidirectional within, sees prompt and future image
    adm[a0:a1, :c1] = True
    adm[a0:a1, f0:f1] = True
    adm[a0:a1, a0:a1] = True
    if scheme == "bidirectional" and f1 > f0:
        adm[f0:f1, a0:a1] = True
    # outer padding: self only
    for p in range(a1, n):
        adm[p, p] = True
    return HybridMask(adm, seq, scheme)


class PrefixCache:
    """Per-layer keys/values for the clean prompt positions of one sequence."""

    def __init__(self, prompt_ids: np.ndarray, ks: list[np.ndarray], vs: list[np.ndarray]):
        self.prompt_ids = prompt_ids
        self.ks = ks
        self.vs = vs

    @property
    def prompt_len(self) -> int:
        return len(self.prompt_ids)


class TransformerModel:
    """Pre-LN transformer over the unified token space."""

    def __init__(self, cfg: ModelConfig, vocab_size: int, context_len: int):
        self.cfg = cfg
        self.vocab_size = vocab_size
        self.context_len = context_len
        self.store = ParamStore(cfg.dtype)
        rng = np.random.default_rng(np.random.SeedSequence([cfg.init_seed, 0xD1F]))
        d = cfg.width
        self.tok = Embedding(self.store, "tok_emb", vocab_size, d, rng)
        self.pos = self.store.add("pos_emb", init_uniform(rng, (context_len, d), d, self.store.dtype))
        self.blocks = []
        for i in range(cfg.layers):
            blk = {
                "ln1": LayerNorm(self.store, f"blk{i}.ln1", d),
                "attn": MultiHeadAttention(self.store, f"blk{i}.attn", d, cfg.heads, rng),
                "ln2": LayerNorm(self.store, f"blk{i}.ln2", d),
                "mlp": Mlp(self.store, f"blk{i}.mlp", d, 4 * d, rng),
            }
            self.blocks.append(blk)
        self.ln_f = LayerNorm(self.store, "ln_f", d)
        self.head = None
        if not cfg.tied_head:
            self.head = self.store.add("head.w", init_uniform(rng, (d, vocab_size), d, self.store.dtype))

    # -- training path ------------------------------------------------------

    def forward_train(self, ids: np.ndarray, mask: HybridMask):
        """ids: (B, L) -> logits (B, L, V); caches activations for backward."""
        B, L = ids.shape
        if L != self.context_len:
            raise ContractError(f"sequence length {L} != context {self.context_len}")
        bias = mask.bias_as(self.store.dtype)
        x = self.tok.forward(ids) + self.pos.value[:L]
        caches = []
        for blk in self.blocks:
            xn, c_ln1 = blk["ln1"].forward(x)
            ya, c_att = blk["attn"].forward(xn, bias)
            x = x + ya
            xn2, c_ln2 = blk["ln2"].forward(x)
            ym, c_mlp = blk["mlp"].forward(xn2)
            x = x + ym
            caches.append((c_ln1, c_att, c_ln2, c_mlp))
        h, c_lnf = self.ln_f.forward(x)
        if self.head is not None:
            logits = h @ self.head.value
        else:
            logits = self.tok.head_forward(h)
        self._cache = (ids, caches, c_lnf, h)
        return logits

    def backward(self, dlogits: np.ndarray) -> None:
        ids, caches, c_lnf, h = self._cache
        if self.head is not None:
            d, v = self.head.shape
            self.head.grad += h.reshape(-1, d).T @ dlogits.reshape(-1, v)
            dh = dlogits @ self.head.value.T
        else:
            dh = self.tok.head_backward(dlogits, h)
        dx = self.ln_f.backward(dh, c_lnf)
        for blk, cache in zip(reversed(self.blocks), reversed(caches)):
            c_ln1, c_att, c_ln2, c_mlp = cache
            dxn2 = blk["mlp"].backward(dx, c_mlp)
            dx = dx + blk["ln2"].backward(dxn2, c_ln2)
            dxn = blk["attn"].backward(dx, c_att)
            dx = dx + blk["ln1"].backward(dxn, c_ln1)
        self.tok.backward(ids, dx)
        L = ids.shape[1]
        self.pos.grad[:L] += dx.sum(axis=0)
        self._cache = None

    # -- inference path (incremental, cache-friendly) -----------------------

    def session(self, mask: HybridMask) -> "KVSession":
        return KVSession(self, mask)

    def prefill(self, prompt_ids: np.ndarray, mask: HybridMask) -> PrefixCache:
        """Compute and freeze K/V for the clean prompt prefix.

        Valid because prompt positions attend only within the prompt under
        every scheme, so their keys/values never change during decoding.
        """
        sess = KVSession(self, mask)
        sess.extend(np.asarray(prompt_ids, dtype=np.int64))
        ks = [k.copy() for k in sess.ks_view()]
        vs = [v.copy() for v in sess.vs_view()]
        return PrefixCache(np.asarray(prompt_ids, dtype=np.int64).copy(), ks, vs)


class KVSession:
    """Growable per-layer K/V buffers over one sequence.

    extend() appends token rows and returns their output logits; truncate()
    rolls the length back (used to rewind to the cached prompt between
    denoising steps). Seeding from a PrefixCache skips prompt recomputation.
    """

    def __init__(self, model: TransformerModel, mask: HybridMask, prefix: PrefixCache | None = None):
        self.model = model
        self.mask = mask
        m = model.cfg
        hd = m.width // m.heads
        dt = model.store.dtype
        L = model.context_len
        self._k = [np.zeros((m.heads, L, hd), dtype=dt) for _ in range(m.layers)]
        self._v = [np.zeros((m.heads, L, hd), dtype=dt) for _ in range(m.layers)]
        self.len = 0
        if prefix is not None:
            p = prefix.prompt_len
            for i in range(m.layers):
                self._k[i][:, :p] = prefix.ks[i]
                self._v[i][:, :p] = prefix.vs[i]
            self.len = p
            self.prompt_ids = prefix.prompt_ids
        else:
            self.prompt_ids = None

    def ks_view(self):
        return [k[:, : self.len] for k in self._k]

    def vs_view(self):
        return [v[:, : self.len] for v in self._v]

    def truncate(self, n: int) -> None:
        if n > self.len:
            raise ContractError(f"cannot truncate forward ({n} > {self.len})")
        self.len = n

    def extend(self, ids: np.ndarray) -> np.ndarray:
        """Append ids at positions [len, len+S); return their logits (S, V)."""
        model = self.model
        ids = np.asarray(ids, dtype=np.int64)
        S = ids.shape[0]
        start, end = self.len, self.len + S
        if end > model.context_len:
            raise ContractError(f"session overflow: {end} > context {model.context_len}")
        bias = self.mask.bias_as(model.store.dtype)
        x = model.tok.forward(ids) + model.pos.value[start:end]
        rows = bias[start:end, :end]
        for i, blk in enumerate(model.blocks):
            xn = blk["ln1"].infer(x)
            k_pre = self._k[i][:, :start] if start else None
            v_pre = self._v[i][:, :start] if start else None
            ya, k_new, v_new = blk["attn"].infer(xn, rows, k_pre, v_pre)
            self._k[i][:, start:end] = k_new
            self._v[i][:, start:end] = v_new
            x = x + ya
            x = x + blk["mlp"].infer(blk["ln2"].infer(x))
        h = model.ln_f.infer(x)
        self.len = end
        if model.head is not None:
            return h @ model.head.value
        return model.tok.head_forward(h)


class SuffixScorer:
    """Logit provider for decoders over one assembled sequence.

    Each call scores the current suffix tokens and returns hidden-state
    logits for suffix rows; the prediction for absolute position p is row
    p-1. With use_cache the clean prompt is prefilled once and reused; the
    uncached path recomputes the full sequence every call and must agree.
    """

    def __init__(
        self,
        model: TransformerModel,
        mask: HybridMask,
        prompt_ids: np.ndarray,
        use_cache: bool = True,
    ):
        self.model = model
        self.mask = mask
        self.prompt_ids = np.asarray(prompt_ids, dtype=np.int64)
        self.prompt_len = len(self.prompt_ids)
        self.use_cache = use_cache
        self.forward_calls = 0
        if use_cache:
            self._prefix = model.prefill(self.prompt_ids, mask)
            self._session = KVSession(model, mask, self._prefix)
        else:
            self._prefix = None
            self._session = KVSession(model, mask)

    def check_prompt(self, full_ids: np.ndarray) -> None:
        if self._prefix is not None and not np.array_equal(
            full_ids[: self.prompt_len], self._prefix.prompt_ids
        ):
            raise ContractError("sequence prompt does not match the cached prompt")

    def suffix_logits(self, full_ids: np.ndarray) -> np.ndarray:
        """Logits (suffix_len, V) for hidden rows prompt_len-1+1 .. end."""
        self.check_prompt(full_ids)
        self.forward_calls += 1
        if self.use_cache:
            self._session.truncate(self.prompt_len)
            return self._session.extend(full_ids[self.prompt_len :])
        self._session.truncate(0)
        logits = self._session.extend(full_ids)
        return logits[self.prompt_len :]

    def step_session(self) -> KVSession:
        """Fresh incremental session seeded with the cached prompt (AR use)."""
        if self._prefix is not None:
            return KVSession(self.model, self.mask, self._prefix)
        return KVSession(self.model, self.mask)


# ---------------------------------------------------------------------------
# Checkpoint format: magic, version, JSON header, named little-endian tensors


CKPT_MAGIC = b"JDCK"
CKPT_VERSION = 1
_DTYPE_CODES = {np.dtype(np.float32): 0, np.dtype(np.float64): 1, np.dtype(np.int64): 2}
_CODE_DTYPES = {v: k for k, v in _DTYPE_CODES.items()}


def save_checkpoint(path: str, header: dict, arrays: dict[str, np.ndarray]) -> None:
    hdr = json.dumps(header, sort_keys=True, separators=(",", ":")).encode("utf-8")
    tmp = f"{path}.tmp.{os.getpid()}"
    with io.open(tmp, "wb") as f:
        f.write(CKPT_MAGIC)
        f.write(struct.pack("<II", CKPT_VERSION, len(hdr)))
        f.write(hdr)
        f.write(struct.pack("<I", len(arrays)))
        for name, arr in arrays.items():
            a = np.ascontiguousarray(arr)
            if a.dtype not in _DTYPE_CODES:
                a = a.astype(np.float32)
            nb = name.encode("utf-8")
            f.write(struct.pack("<H", len(nb)))
            f.write(nb)
            f.write(struct.pack("<BB", _DTYPE_CODES[a.dtype], a.ndim))
            f.write(struct.pack(f"<{a.ndim}I", *a.shape))
            little = a.astype(a.dtype.newbyteorder("<"), copy=False)
            f.write(little.tobytes())
    os.replace(tmp, path)


def load_checkpoint(path: str) -> tuple[dict, dict[str, np.ndarray]]:
    try:
        with io.open(path, "rb") as f:
            magic = f.read(4)
            if magic != CKPT_MAGIC:
                raise FormatError(f"{path}: bad magic {magic!r}, expected {CKPT_MAGIC!r}")
            version, hlen = struct.unpack("<II", f.read(8))
            if version != CKPT_VERSION:
                raise FormatError(f"{path}: checkpoint version {version} unsupported (expected {CKPT_VERSION})")
            try:
                header = json.loads(f.read(hlen).decode("utf-8"))
            except (UnicodeDecodeError, json.JSONDecodeError) as e:
                raise FormatError(f"{path}: corrupt header ({e})")
            (count,) = struct.unpack("<I", f.read(4))
            arrays = {}
            for _ in range(count):
                (nlen,) = struct.unpack("<H", f.read(2))
                name = f.read(nlen).decode("utf-8")
                code, ndim = struct.unpack("<BB", f.read(2))
                shape = struct.unpack(f"<{ndim}I", f.read(4 * ndim))
                if code not in _CODE_DTYPES:
                    raise FormatError(f"{path}: unknown dtype code {code} for tensor {name}")
                dt = _CODE_DTYPES[code].newbyteorder("<")
                n_bytes = int(np.prod(shape)) * dt.itemsize
                buf = f.read(n_bytes)
                if len(buf) != n_bytes:
                    raise FormatError(f"{path}: truncated tensor payload for {name}")
                arrays[name] = np.frombuffer(buf, dtype=dt).reshape(shape).astype(_CODE_DTYPES[code])
    except struct.error as e:
        raise FormatError(f"{path}: truncated or corrupt checkpoint ({e})")
    return header, arrays


def save_model(
    path: str,
    model: TransformerModel,
    layout: VocabLayout,
    seq: SequenceLayout,
    meta: dict | None = None,
    optimizer: Adam | None = None,
) -> None:
    header = {
        "model": model.cfg.to_json(),
        "layout": layout.to_json(),
        "sequence": seq.to_json(),
        "vocab_size": model.vocab_size,
        "context_len": model.context_len,
        "meta": meta or {},
    }
    arrays = dict(model.store.state_arrays())
    if optimizer is not None:
        arrays.update(optimizer.state_arrays())
        header["optimizer"] = {"t": optimizer.t, "lr": optimizer.lr, "betas": [optimizer.beta1, optimizer.beta2]}
    save_checkpoint(path, header, arrays)


def load_model(path: str):
    """Returns (model, layout, seq, header, arrays)."""
    header, arrays = load_checkpoint(path)
    cfg = ModelConfig.from_json(header["model"])
    layout = VocabLayout.from_json(header["layout"])
    seq = SequenceLayout.from_json(header["sequence"])
    model = TransformerModel(cfg, header["vocab_size"], header["context_len"])
    model.store.load_state({k: v for k, v in arrays.items() if not k.startswith("adam.")})
    return model, layout, seq, header, arrays
