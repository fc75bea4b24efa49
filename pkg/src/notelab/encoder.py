"""Small pre-layernorm transformer encoder with mean pooling, layer freezing,
and bit-exact checkpoint persistence."""

from __future__ import annotations

import dataclasses
import hashlib
import json
import math
from dataclasses import dataclass, field

import numpy as np

from .errors import ContractError, CorruptCheckpointError, UnsupportedVersionError
from .nn import (
    Tensor,
    add,
    dropout,
    embedding,
    gelu,
    layernorm,
    matmul,
    mul,
    reshape,
    softmax,
    sum_,
    transpose,
)

CHECKPOINT_VERSION = 1
_MASK_NEG = -1e9


@dataclass
class EncoderConfig:
    layers: int = 4
    heads: int = 4
    d_model: int = 128
    d_ff: int = 512
    max_len: int = 128
    vocab_size: int = 2000
    dropout: float = 0.0
    seed: int = 0

    def __post_init__(self):
        if self.layers < 1 or self.heads < 1:
            raise ContractError("layers and heads must be >= 1")
        if self.d_model % self.heads != 0:
            raise ContractError(
                f"d_model {self.d_model} not divisible by heads {self.heads}"
            )
        if not 1 <= self.max_len <= 512:
            raise ContractError("max_len must lie in [1, 512]")
        if not 0.0 <= self.dropout < 1.0:
            raise ContractError("dropout must lie in [0, 1)")

    def to_json(self) -> dict:
        return dataclasses.asdict(self)

    @classmethod
    def from_json(cls, obj: dict) -> "EncoderConfig":
        return cls(**obj)


def init_params(cfg: EncoderConfig) -> dict[str, Tensor]:
    """Named parameter tensors, normal(0, 0.02) weights and standard norms."""
    rng = np.random.default_rng(cfg.seed)
    params: dict[str, Tensor] = {}

    def w(name, shape):
        params[name] = Tensor(rng.normal(0.0, 0.02, size=shape), requires_grad=True, name=name)

    def zeros(name, shape):
        params[name] = Tensor(np.zeros(shape), requires_grad=True, name=name)

    def ones(name, shape):
        params[name] = Tensor(np.ones(shape), requires_grad=True, name=name)

    d = cfg.d_model
    w("tok_emb", (cfg.vocab_size, d))
    w("pos_emb", (cfg.max_len, d))
    for i in range(cfg.layers):
        p = f"layers.{i}"
        ones(f"{p}.ln1.g", (d,))
        zeros(f"{p}.ln1.b", (d,))
        for nm in ("wq", "wk", "wv", "wo"):
            w(f"{p}.{nm}", (d, d))
        for nm in ("bq", "bk", "bv", "bo"):
            zeros(f"{p}.{nm}", (d,))
        ones(f"{p}.ln2.g", (d,))
        zeros(f"{p}.ln2.b", (d,))
        w(f"{p}.w1", (d, cfg.d_ff))
        zeros(f"{p}.b1", (cfg.d_ff,))
        w(f"{p}.w2", (cfg.d_ff, d))
        zeros(f"{p}.b2", (d,))
    ones("final_ln.g", (d,))
    zeros("final_ln.b", (d,))
    return params


def encode(
    params: dict[str, Tensor],
    cfg: EncoderConfig,
    token_ids: np.ndarray,
    pad_mask: np.ndarray,
    train: bool = False,
    rng: np.random.Generator | None = None,
) -> Tensor:
    """Hidden states (batch, seq, d_model); padded keys are masked out of attention."""
    token_ids = np.asarray(token_ids)
    dtype = params["tok_emb"].data.dtype
    pad_mask = np.asarray(pad_mask, dtype=dtype)
    B, T = token_ids.shape
    if T > cfg.max_len:
        raise ContractError(f"sequence length {T} exceeds max_len {cfg.max_len}")
    if pad_mask.shape != (B, T):
        raise ContractError(f"pad mask shape {pad_mask.shape} != ids shape {(B, T)}")
    p_drop = cfg.dropout if train else 0.0
    if p_drop > 0 and rng is None:
        raise ContractError("training-mode dropout requires an rng")

    H, hd = cfg.heads, cfg.d_model // cfg.heads
    scale = 1.0 / math.sqrt(hd)
    mask_add = ((1.0 - pad_mask) * dtype.type(_MASK_NEG))[:, None, None, :]

    x = add(embedding(params["tok_emb"], token_ids), embedding(params["pos_emb"], np.arange(T)))
    for i in range(cfg.layers):
        p = f"layers.{i}"
        h = layernorm(x, params[f"{p}.ln1.g"], params[f"{p}.ln1.b"])
        q = add(matmul(h, params[f"{p}.wq"]), params[f"{p}.bq"])
        k = add(matmul(h, params[f"{p}.wk"]), params[f"{p}.bk"])
        v = add(matmul(h, params[f"{p}.wv"]), params[f"{p}.bv"])
        q = transpose(reshape(q, (B, T, H, hd)), (0, 2, 1, 3))
        k = transpose(reshape(k, (B, T, H, hd)), (0, 2, 1, 3))
        v = transpose(reshape(v, (B, T, H, hd)), (0, 2, 1, 3))
        scores = add(mul(matmul(q, transpose(k, (0, 1, 3, 2))), scale), mask_add)
        attn = softmax(scores)
        if p_drop > 0:
            attn = dropout(attn, p_drop, rng)
        ctx = reshape(transpose(matmul(attn, v), (0, 2, 1, 3)), (B, T, cfg.d_model))
        proj = add(matmul(ctx, params[f"{p}.wo"]), params[f"{p}.bo"])
        if p_drop > 0:
            proj = dropout(proj, p_drop, rng)
        x = add(x, proj)

        h2 = layernorm(x, params[f"{p}.ln2.g"], params[f"{p}.ln2.b"])
        f = gelu(add(matmul(h2, params[f"{p}.w1"]), params[f"{p}.b1"]))
        f = add(matmul(f, params[f"{p}.w2"]), params[f"{p}.b2"])
        if p_drop > 0:
            f = dropout(f, p_drop, rng)
        x = add(x, f)

    return layernorm(x, params["final_ln.g"], params["final_ln.b"])


def pool(hidden: Tensor, pad_mask: np.ndarray) -> Tensor:
    """Mean of non-pad token states: one embedding row per document."""
    pad_mask = np.asarray(pad_mask, dtype=hidden.data.dtype)
    counts = pad_mask.sum(axis=1)
    if (counts == 0).any():
        row = int(np.argmax(counts == 0))
        raise ContractError(f"pool: row {row} has no non-pad tokens")
    summed = sum_(mul(hidden, pad_mask[:, :, None]), axis=1)
    return mul(summed, (1.0 / counts)[:, None].astype(hidden.data.dtype))


def pad_batch(sequences: list[list[int]], pad_id: int = 0) -> tuple[np.ndarray, np.ndarray]:
    """Right-pad id sequences; returns (ids, mask) with mask 1.0 at real tokens."""
    if not sequences:
        raise ContractError("pad_batch: empty batch")
    T = max(len(s) for s in sequences)
    ids = np.full((len(sequences), T), pad_id, dtype=np.int64)
    mask = np.zeros((len(sequences), T), dtype=np.float64)
    for i, s in enumerate(sequences):
        ids[i, : len(s)] = s
        mask[i, : len(s)] = 1.0
    return ids, mask


# -- freezing --------------------------------------------------------------------


@dataclass(frozen=True)
class FreezeSpec:
    """Frozen prefix: embeddings plus the first k layers, or the whole encoder."""

    prefix: int | None = None  # None means the entire encoder

    @classmethod
    def all(cls) -> "FreezeSpec":
        return cls(None)

    @classmethod
    def none(cls) -> "FreezeSpec":
        return cls(0)

    @classmethod
    def parse(cls, text: str) -> "FreezeSpec":
        t = text.strip().lower()
        if t == "all":
            return cls.all()
        if t == "none":
            return cls.none()
        return cls(int(t))

    @property
    def is_all(self) -> bool:
        return self.prefix is None

    def describe(self) -> str:
        return "all" if self.is_all else str(self.prefix)


def apply_freeze(
    params: dict[str, Tensor], spec: FreezeSpec, n_layers: int
) -> dict[str, Tensor]:
    """Mark frozen parameters non-trainable; returns the trainable subset."""
    if not spec.is_all and not 0 <= spec.prefix <= n_layers:
        raise ContractError(f"freeze prefix {spec.prefix} outside [0, {n_layers}]")
    frozen_all = spec.is_all or spec.prefix == n_layers
    trainable: dict[str, Tensor] = {}
    for name, p in params.items():
        if frozen_all:
            freeze = True
        elif name in ("tok_emb", "pos_emb"):
            freeze = spec.prefix > 0
        elif name.startswith("layers."):
            freeze = int(name.split(".")[1]) < spec.prefix
        else:  # final layernorm behaves like the top of the stack
            freeze = False
        p.requires_grad = not freeze
        if not freeze:
            trainable[name] = p
    return trainable


def params_digest(params: dict[str, Tensor]) -> str:
    """SHA-256 over parameter bytes in name order; detects any drift."""
    h = hashlib.sha256()
    for name in sorted(params):
        h.update(name.encode())
        h.update(params[name].data.tobytes())
    return h.hexdigest()


# -- checkpoints -------------------------------------------------------------------


@dataclass
class Checkpoint:
    config: EncoderConfig
    params: dict[str, Tensor]
    heads: dict[str, Tensor] = field(default_factory=dict)
    metadata: dict = field(default_factory=dict)


def save_checkpoint(
    path,
    config: EncoderConfig,
    params: dict[str, Tensor],
    heads: dict[str, Tensor] | None = None,
    metadata: dict | None = None,
) -> None:
    """JSON header line + concatenated little-endian float32 payload."""
    heads = heads or {}
    manifest = []
    chunks = []
    offset = 0
    for group, tensors in (("encoder", params), ("head", heads)):
        for name in sorted(tensors):
            arr = np.ascontiguousarray(tensors[name].data, dtype="<f4")
            manifest.append(
                {"group": group, "name": name, "shape": list(arr.shape), "offset": offset}
            )
            chunks.append(arr.tobytes())
            offset += arr.nbytes
    payload = b"".join(chunks)
    header = {
        "format_version": CHECKPOINT_VERSION,
        "config": config.to_json(),
        "manifest": manifest,
        "digest": hashlib.sha256(payload).hexdigest(),
        "metadata": metadata or {},
    }
    with open(path, "wb") as f:
        f.write(json.dumps(header, sort_keys=True).encode("utf-8"))
        f.write(b"\n")
        f.write(payload)


def load_checkpoint(path) -> Checkpoint:
    with open(path, "rb") as f:
        header_line = f.readline()
        payload = f.read()
    try:
        header = json.loads(header_line.decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as e:
        raise CorruptCheckpointError(f"{path}: unreadable header: {e}") from e
    version = header.get("format_version")
    if version != CHECKPOINT_VERSION:
        raise UnsupportedVersionError(
            f"{path}: format version {version!r} not supported (expected {CHECKPOINT_VERSION})"
        )
    if hashlib.sha256(payload).hexdigest() != header["digest"]:
        raise CorruptCheckpointError(f"{path}: payload digest mismatch")
    config = EncoderConfig.from_json(header["config"])
    params: dict[str, Tensor] = {}
    heads: dict[str, Tensor] = {}
    for entry in header["manifest"]:
        shape = tuple(entry["shape"])
        n = int(np.prod(shape)) if shape else 1
        start = entry["offset"]
        end = start + 4 * n
        if end > len(payload):
            raise CorruptCheckpointError(f"{path}: payload truncated at {entry['name']!r}")
        arr = np.frombuffer(payload[start:end], dtype="<f4").reshape(shape)
        t = Tensor(arr.copy(), requires_grad=True, name=entry["name"])
        (params if entry["group"] == "encoder" else heads)[entry["name"]] = t
    return Checkpoint(config=config, params=params, heads=heads, metadata=header["metadata"])
