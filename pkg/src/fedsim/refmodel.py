"""Compact token classifier with hand-written reverse-mode gradients.

Architecture: embedding lookup -> mean pool over non-PAD tokens -> a stack of
residual feed-forward blocks ``x <- x + W2 @ relu(W1 @ x + b1) + b2`` -> linear
head.  Everything is float64 and deterministic; gradients are exact (verified
against central finite differences in the test suite), so there is no autograd
dependency.

Parameters live in a :class:`ParamSet`, an ordered mapping of named float64
arrays plus a hot mask.  The canonical segment order (flat layout version 1)
is: ``embedding``, per-block ``W1, b1, W2, b2``, ``head.W``, ``head.b``, then
adapter segments in attach order.  Only hot segments participate in training
updates; cold gradients are returned as exact zeros.

Loss hooks: ``loss_and_grad`` accepts a sequence of hook objects that add
penalty terms.  A hook declares ``kind = "param"`` and implements
``param_term(hot_vector) -> (loss, grad_vector)``, or ``kind = "repr"`` and
implements ``repr_term(batch, rep) -> (loss, d_rep)``.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import numkit
from .corpus import PAD_ID
from .errors import ConfigError, DimensionError, InputError, StateError

CHECKPOINT_MAGIC = b"FSIM"
CHECKPOINT_VERSION = 1


@dataclass(frozen=True)
class ModelConfig:
    vocab_size: int
    embed_dim: int
    n_blocks: int
    hidden_dim: int
    n_classes: int = 2
    max_len: int = 256
    seed: int = 0

    def __post_init__(self):
        if self.vocab_size < 2:
            raise ConfigError(f"vocab_size must be >= 2, got {self.vocab_size}")
        for name in ("embed_dim", "n_blocks", "hidden_dim", "max_len"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be >= 1, got {getattr(self, name)}")
        if self.n_classes < 2:
            raise ConfigError(f"n_classes must be >= 2, got {self.n_classes}")


def param_count(config: ModelConfig) -> int:
    """Backbone parameter count (no adapters)."""
    d, h = config.embed_dim, config.hidden_dim
    per_block = h * d + h + d * h + d
    return (
        config.vocab_size * d
        + config.n_blocks * per_block
        + d * config.n_classes
        + config.n_classes
    )


@dataclass
class Batch:
    """Padded token-id rows plus optional labels.

    ``token_ids`` is (B, L) with PAD (=0) filling the tail of each row.
    """

    token_ids: np.ndarray
    labels: np.ndarray | None = None


def make_batch(sequences, labels, max_len: int) -> Batch:
    """Pad variable-length id sequences to ``max_len``."""
    n = len(sequences)
    ids = np.zeros((n, max_len), dtype=np.int64)
    for i, seq in enumerate(sequences):
        if len(seq) > max_len:
            raise InputError(f"sequence {i} longer than max_len {max_len}")
        ids[i, : len(seq)] = seq
    lab = None if labels is None else np.asarray(labels, dtype=np.int64)
    return Batch(token_ids=ids, labels=lab)


class ParamSet:
    """Ordered, named float64 parameter segments with a hot mask."""

    def __init__(self, config: ModelConfig, tensors: dict, hot: dict, scheme=None):
        self.config = config
        self.tensors = {k: np.asarray(v, dtype=np.float64) for k, v in tensors.items()}
        self.hot = dict(hot)
        self.scheme = scheme
        if set(self.hot) != set(self.tensors):
            raise StateError("hot mask does not match tensor names")

    # -- layout ------------------------------------------------------------

    @property
    def names(self) -> list[str]:
        return list(self.tensors)

    @property
    def scheme_kind(self) -> str:
        if self.scheme is None:
            return "full"
        return self.scheme.kind

    def segment_arrays(self) -> list[np.ndarray]:
        return [self.tensors[n] for n in self.tensors]

    def replace_segments(self, arrays) -> "ParamSet":
        names = self.names
        if len(arrays) != len(names):
            raise DimensionError(
                f"expected {len(names)} segments, got {len(arrays)}"
            )
        tensors = {}
        for n, a in zip(names, arrays):
            a = np.asarray(a, dtype=np.float64)
            if a.shape != self.tensors[n].shape:
                raise DimensionError(
                    f"segment {n}: shape {a.shape} != {self.tensors[n].shape}"
                )
            tensors[n] = a.copy()
        return ParamSet(self.config, tensors, self.hot, self.scheme)

    def clone(self) -> "ParamSet":
        return ParamSet(
            self.config,
            {k: v.copy() for k, v in self.tensors.items()},
            self.hot,
            self.scheme,
        )

    # -- sizes and flat views ------------------------------------------------

    @property
    def n_params(self) -> int:
        return sum(t.size for t in self.tensors.values())

    def hot_names(self) -> list[str]:
        return [n for n in self.tensors if self.hot[n]]

    @property
    def hot_size(self) -> int:
        return sum(self.tensors[n].size for n in self.hot_names())

    def flatten(self) -> np.ndarray:
        return numkit.flatten(self)

    def hot_vector(self) -> np.ndarray:
        names = self.hot_names()
        if not names:
            return np.zeros(0, dtype=np.float64)
        return np.concatenate([self.tensors[n].ravel() for n in names])

    def set_hot_vector(self, vec) -> None:
        vec = numkit.as_vector(vec)
        if vec.shape[0] != self.hot_size:
            raise DimensionError(
                f"hot vector length {vec.shape[0]} != hot size {self.hot_size}"
            )
        offset = 0
        for n in self.hot_names():
            t = self.tensors[n]
            self.tensors[n] = vec[offset:offset + t.size].reshape(t.shape).copy()
            offset += t.size

    def zero_grads(self) -> dict:
        return {n: np.zeros_like(t) for n, t in self.tensors.items()}


def init(config: ModelConfig) -> ParamSet:
    """Fresh backbone parameters.

    Weights are uniform(-s, s) with ``s = 1 / sqrt(fan_in)`` (the embedding
    uses its row dimension as fan-in); biases start at zero.  Draw order is
    the canonical segment order, so a seed pins every value.
    """
    rng = np.random.default_rng(np.random.SeedSequence(config.seed, spawn_key=(31,)))
    d, h = config.embed_dim, config.hidden_dim

    def u(shape, fan_in):
        s = 1.0 / np.sqrt(fan_in)
        return rng.uniform(-s, s, size=shape)

    tensors: dict[str, np.ndarray] = {}
    tensors["embedding"] = u((config.vocab_size, d), d)
    for l in range(config.n_blocks):
        tensors[f"blocks.{l}.W1"] = u((h, d), d)
        tensors[f"blocks.{l}.b1"] = np.zeros(h)
        tensors[f"blocks.{l}.W2"] = u((d, h), h)
        tensors[f"blocks.{l}.b2"] = np.zeros(d)
    tensors["head.W"] = u((config.n_classes, d), d)
    tensors["head.b"] = np.zeros(config.n_classes)
    hot = {n: True for n in tensors}
    return ParamSet(config, tensors, hot, scheme=None)


# --- forward ----------------------------------------------------------------


def _validate_batch(params: ParamSet, batch: Batch) -> None:
    ids = batch.token_ids
    if ids.ndim != 2:
        raise InputError(f"token_ids must be 2-D, got shape {ids.shape}")
    if ids.size == 0:
        raise InputError("empty batch")
    if ids.min() < 0 or ids.max() >= params.config.vocab_size:
        raise InputError(
            f"token id out of range [0, {params.config.vocab_size})"
        )


def _effective_block_weights(params: ParamSet, l: int):
    """Base or adapter-augmented (W1, W2) for block ``l`` plus adapter cache."""
    t = params.tensors
    W1, W2 = t[f"blocks.{l}.W1"], t[f"blocks.{l}.W2"]
    kind = params.scheme_kind
    if kind == "lora":
        c = params.scheme.effective_alpha / params.scheme.rank
        extras = {"c": c}
        for w in ("W1", "W2"):
            A, Bm = t[f"lora.{l}.{w}.A"], t[f"lora.{l}.{w}.B"]
            extras[w] = (A, Bm)
        W1e = W1 + extras["c"] * (extras["W1"][0] @ extras["W1"][1])
        W2e = W2 + extras["c"] * (extras["W2"][0] @ extras["W2"][1])
        return W1e, W2e, extras
    if kind == "loha":
        c = params.scheme.effective_alpha / params.scheme.rank
        extras = {"c": c}
        for w in ("W1", "W2"):
            A1, B1 = t[f"loha.{l}.{w}.A1"], t[f"loha.{l}.{w}.B1"]
            A2, B2 = t[f"loha.{l}.{w}.A2"], t[f"loha.{l}.{w}.B2"]
            M1, M2 = A1 @ B1, A2 @ B2
            extras[w] = (A1, B1, A2, B2, M1, M2)
        W1e = W1 + extras["c"] * (extras["W1"][4] * extras["W1"][5])
        W2e = W2 + extras["c"] * (extras["W2"][4] * extras["W2"][5])
        return W1e, W2e, extras
    return W1, W2, None


def _forward_cached(params: ParamSet, batch: Batch):
    _validate_batch(params, batch)
    t = params.tensors
    cfg = params.config
    kind = params.scheme_kind
    ids = batch.token_ids

    mask = ids != PAD_ID
    counts = mask.sum(axis=1)
    if (counts == 0).any():
        raise InputError("sample with no non-PAD tokens")

    emb = t["embedding"][ids] * mask[..., None]
    s = emb.sum(axis=1)

    prompt_cache = None
    if kind == "ptv1":
        P = t["prompt.tokens"]
        Wm1, bm1 = t["prompt.mlp.W1"], t["prompt.mlp.b1"]
        Wm2, bm2 = t["prompt.mlp.W2"], t["prompt.mlp.b2"]
        Hpre = P @ Wm1.T + bm1
        H = np.maximum(Hpre, 0.0)
        Q = H @ Wm2.T + bm2
        q = Q.sum(axis=0)
        denom = (counts + P.shape[0]).astype(np.float64)
        x = (s + q) / denom[:, None]
        prompt_cache = {"P": P, "Hpre": Hpre, "H": H}
    else:
        denom = counts.astype(np.float64)
        x = s / denom[:, None]

    blocks = []
    for l in range(cfg.n_blocks):
        u = x + t[f"prefix.{l}"] if kind == "ptv2" else x
        W1e, W2e, extras = _effective_block_weights(params, l)
        h = u @ W1e.T + t[f"blocks.{l}.b1"]
        a = np.maximum(h, 0.0)
        if kind == "ia3":
            ell = t[f"ia3.{l}"]
            g = a * ell
        else:
            ell = None
            g = a
        x = u + g @ W2e.T + t[f"blocks.{l}.b2"]
        blocks.append(
            {"u": u, "relu_mask": h > 0.0, "a": a, "g": g,
             "W1e": W1e, "W2e": W2e, "ell": ell, "extras": extras}
        )

    rep = x
    logits = rep @ t["head.W"].T + t["head.b"]
    cache = {
        "ids": ids, "mask": mask, "denom": denom,
        "prompt": prompt_cache, "blocks": blocks, "rep": rep,
    }
    return logits, rep, cache


def forward(params: ParamSet, batch: Batch):
    """Return (logits, representation) for a batch."""
    logits, rep, _ = _forward_cached(params, batch)
    return logits, rep


def predict(params: ParamSet, batch: Batch) -> np.ndarray:
    """Argmax class per sample; ties resolve to the lower class index."""
    logits, _ = forward(params, batch)
    return np.argmax(logits, axis=1)


# --- loss and gradients -------------------------------------------------------


def _backward(params: ParamSet, cache: dict, dlogits: np.ndarray,
              dz_extra: np.ndarray | None) -> dict:
    t = params.tensors
    cfg = params.config
    kind = params.scheme_kind
    grads = params.zero_grads()

    rep = cache["rep"]
    grads["head.W"] += dlogits.T @ rep
    grads["head.b"] += dlogits.sum(axis=0)
    dX = dlogits @ t["head.W"]
    if dz_extra is not None:
        dX = dX + dz_extra

    for l in reversed(range(cfg.n_blocks)):
        blk = cache["blocks"][l]
        u, g = blk["u"], blk["g"]
        dW2e = dX.T @ g
        grads[f"blocks.{l}.b2"] += dX.sum(axis=0)
        dG = dX @ blk["W2e"]
        du = dX.copy()
        if kind == "ia3":
            grads[f"ia3.{l}"] += (dG * blk["a"]).sum(axis=0)
            da = dG * blk["ell"]
        else:
            da = dG
        dh = da * blk["relu_mask"]
        dW1e = dh.T @ u
        grads[f"blocks.{l}.b1"] += dh.sum(axis=0)
        du += dh @ blk["W1e"]
        if kind == "ptv2":
            grads[f"prefix.{l}"] += du.sum(axis=0)

        extras = blk["extras"]
        if kind == "lora":
            c = extras["c"]
            for w, dWe in (("W1", dW1e), ("W2", dW2e)):
                A, Bm = extras[w]
                grads[f"lora.{l}.{w}.A"] += c * dWe @ Bm.T
                grads[f"lora.{l}.{w}.B"] += c * A.T @ dWe
        elif kind == "loha":
            c = extras["c"]
            for w, dWe in (("W1", dW1e), ("W2", dW2e)):
                A1, B1, A2, B2, M1, M2 = extras[w]
                dM1 = c * dWe * M2
                dM2 = c * dWe * M1
                grads[f"loha.{l}.{w}.A1"] += dM1 @ B1.T
                grads[f"loha.{l}.{w}.B1"] += A1.T @ dM1
                grads[f"loha.{l}.{w}.A2"] += dM2 @ B2.T
                grads[f"loha.{l}.{w}.B2"] += A2.T @ dM2
        grads[f"blocks.{l}.W1"] += dW1e
        grads[f"blocks.{l}.W2"] += dW2e
        dX = du

    denom = cache["denom"]
    dS = dX / denom[:, None]
    contrib = dS[:, None, :] * cache["mask"][..., None]
    d = cfg.embed_dim
    np.add.at(
        grads["embedding"],
        cache["ids"].reshape(-1),
        contrib.reshape(-1, d),
    )

    if kind == "ptv1":
        pc = cache["prompt"]
        m = pc["P"].shape[0]
        dq = dS.sum(axis=0)
        dQ = np.tile(dq, (m, 1))
        grads["prompt.mlp.b2"] += dQ.sum(axis=0)
        grads["prompt.mlp.W2"] += dQ.T @ pc["H"]
        dH = dQ @ t["prompt.mlp.W2"]
        dHpre = dH * (pc["Hpre"] > 0.0)
        grads["prompt.mlp.b1"] += dHpre.sum(axis=0)
        grads["prompt.mlp.W1"] += dHpre.T @ pc["P"]
        grads["prompt.tokens"] += dHpre @ t["prompt.mlp.W1"]

    return grads


def hot_grad_vector(params: ParamSet, grads: dict) -> np.ndarray:
    names = params.hot_names()
    if not names:
        return np.zeros(0, dtype=np.float64)
    return np.concatenate([grads[n].ravel() for n in names])


def _scatter_flat_into_grads(params: ParamSet, grads: dict, flat: np.ndarray) -> None:
    offset = 0
    for n in params.hot_names():
        size = params.tensors[n].size
        grads[n] += flat[offset:offset + size].reshape(params.tensors[n].shape)
        offset += size
    if offset != flat.shape[0]:
        raise DimensionError(
            f"hook gradient length {flat.shape[0]} != hot size {offset}"
        )


def loss_and_grad(params: ParamSet, batch: Batch, hooks=()):
    """Mean cross-entropy (plus hook terms) and exact gradients.

    Returns ``(loss, grads)`` where ``grads`` maps every segment name to an
    array of its shape; cold segments are exactly zero.
    """
    if batch.labels is None:
        raise InputError("loss_and_grad needs labels")
    labels = np.asarray(batch.labels, dtype=np.int64)
    if labels.ndim != 1 or labels.shape[0] != batch.token_ids.shape[0]:
        raise InputError("labels do not match batch size")
    if labels.min() < 0 or labels.max() >= params.config.n_classes:
        raise InputError("label out of range")

    logits, rep, cache = _forward_cached(params, batch)
    n = logits.shape[0]
    zmax = logits.max(axis=1, keepdims=True)
    lse = zmax[:, 0] + np.log(np.exp(logits - zmax).sum(axis=1))
    loss = float(np.mean(lse - logits[np.arange(n), labels]))
    probs = np.exp(logits - lse[:, None])
    dlogits = probs.copy()
    dlogits[np.arange(n), labels] -= 1.0
    dlogits /= n

    dz_extra = None
    for hook in hooks:
        if getattr(hook, "kind", None) == "repr":
            extra, dz = hook.repr_term(batch, rep)
            loss += float(extra)
            dz_extra = dz if dz_extra is None else dz_extra + dz

    grads = _backward(params, cache, dlogits, dz_extra)
    for name in params.tensors:
        if not params.hot[name]:
            grads[name][:] = 0.0

    for hook in hooks:
        if getattr(hook, "kind", None) == "param":
            extra, gflat = hook.param_term(params.hot_vector())
            loss += float(extra)
            _scatter_flat_into_grads(params, grads, np.asarray(gflat, dtype=np.float64))

    return loss, grads


# --- checkpoints ---------------------------------------------------------------
#
# Binary layout (little-endian): magic "FSIM", u16 format version, u16 flat
# layout version, u64 value count, then count float64 values in canonical
# flat order.  Shapes come from the template ParamSet at load time.


def save_params(params: ParamSet, path) -> None:
    flat = params.flatten()
    header = struct.pack(
        "<4sHHQ", CHECKPOINT_MAGIC, CHECKPOINT_VERSION,
        numkit.FLAT_LAYOUT_VERSION, flat.shape[0],
    )
    with Path(path).open("wb") as fh:
        fh.write(header)
        fh.write(flat.astype("<f8").tobytes())


def load_params(path, like: ParamSet) -> ParamSet:
    raw = Path(path).read_bytes()
    if len(raw) < 16 or raw[:4] != CHECKPOINT_MAGIC:
        raise StateError(f"not a parameter checkpoint: {path}")
    magic, version, layout, count = struct.unpack("<4sHHQ", raw[:16])
    if version != CHECKPOINT_VERSION or layout != numkit.FLAT_LAYOUT_VERSION:
        raise StateError(
            f"unsupported checkpoint version {version}/{layout} in {path}"
        )
    flat = np.frombuffer(raw[16:], dtype="<f8")
    if flat.shape[0] != count:
        raise StateError(f"truncated checkpoint: {path}")
    return numkit.unflatten(flat.astype(np.float64), like)
