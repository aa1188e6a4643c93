"""Causal location embedding model over hierarchical tokens.

The input embedding sums one table per hierarchy level with a fixed sinusoidal
positional table and a learned transform of log absolute time. A stack of
pre-norm masked decoder blocks produces, at each position t, a vector that
depends only on positions <= t. Per-level prediction heads map that vector to
next-location logits; in "chained" mode each level past the first also sees a
gradient-stopped one-hot of the previous level's own argmax prediction, so
coarse predictions steer fine ones without leaking gradients backwards.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .optim import Adam
from .pipeline import Trajectory
from .tensor import Tensor
from .vocab import PAD_ID

CHECKPOINT_MAGIC = b"GSQ1"
CHECKPOINT_VERSION = 1

HEAD_CHAINED = "chained"
HEAD_INDEPENDENT = "independent"


class CheckpointError(ValueError):
    """Corrupt, truncated, or layout-incompatible checkpoint file."""


class TrainingDiverged(RuntimeError):
    """Loss went non-finite; carries the epoch/step where it happened."""


@dataclass
class ModelConfig:
    level_sizes: list[int]  # tokens per level, specials included
    hidden: int = 256
    layers: int = 6
    heads: int = 8
    attn_dropout: float = 0.1
    max_seq_len: int = 32
    head_mode: str = HEAD_CHAINED

    def __post_init__(self):
        if not self.level_sizes or any(s < 1 for s in self.level_sizes):
            raise ValueError(f"bad level sizes {self.level_sizes}")
        if self.hidden % self.heads != 0:
            raise ValueError(f"hidden {self.hidden} not divisible by heads {self.heads}")
        if self.head_mode not in (HEAD_CHAINED, HEAD_INDEPENDENT):
            raise ValueError(f"unknown head mode {self.head_mode!r}")

    @property
    def levels(self) -> int:
        return len(self.level_sizes)

    def head_input_width(self, level: int) -> int:
        """W for level 1, W + |L^{h-1}| above it when heads are chained."""
        if level > 1 and self.head_mode == HEAD_CHAINED:
            return self.hidden + self.level_sizes[level - 2]
        return self.hidden

    def to_json(self) -> dict:
        return {
            "level_sizes": list(self.level_sizes),
            "hidden": self.hidden,
            "layers": self.layers,
            "heads": self.heads,
            "attn_dropout": self.attn_dropout,
            "max_seq_len": self.max_seq_len,
            "head_mode": self.head_mode,
        }

    @classmethod
    def from_json(cls, doc: dict) -> "ModelConfig":
        return cls(**doc)


@dataclass
class TrainConfig:
    epochs: int = 10
    batch_size: int = 32
    lr: float = 1e-3
    betas: tuple[float, float] = (0.9, 0.999)
    eps: float = 1e-8
    weight_decay: float = 1e-2
    warmup_steps: int = 10000
    seed: int = 0


def _param_layout(config: ModelConfig) -> list[tuple[str, tuple[int, ...]]]:
    """Ordered (name, shape) pairs; checkpoint payloads follow this order."""
    w = config.hidden
    layout: list[tuple[str, tuple[int, ...]]] = []
    for h, size in enumerate(config.level_sizes, start=1):
        layout.append((f"embed.h{h}", (size, w)))
    layout.append(("temporal.w", (1, w)))
    layout.append(("temporal.b", (w,)))
    for i in range(config.layers):
        for proj in ("wq", "wk", "wv", "wo"):
            layout.append((f"layer{i}.attn.{proj}", (w, w)))
        for proj in ("bq", "bk", "bv", "bo"):
            layout.append((f"layer{i}.attn.{proj}", (w,)))
        layout.append((f"layer{i}.ln1.g", (w,)))
        layout.append((f"layer{i}.ln1.b", (w,)))
        layout.append((f"layer{i}.ff.w1", (w, 4 * w)))
        layout.append((f"layer{i}.ff.b1", (4 * w,)))
        layout.append((f"layer{i}.ff.w2", (4 * w, w)))
        layout.append((f"layer{i}.ff.b2", (w,)))
        layout.append((f"layer{i}.ln2.g", (w,)))
        layout.append((f"layer{i}.ln2.b", (w,)))
    if config.layers > 0:
        # pre-norm stacks need a closing norm to bound the residual stream
        layout.append(("final_ln.g", (w,)))
        layout.append(("final_ln.b", (w,)))
    for h, size in enumerate(config.level_sizes, start=1):
        layout.append((f"head.h{h}.w1", (config.head_input_width(h), w)))
        layout.append((f"head.h{h}.b1", (w,)))
        layout.append((f"head.h{h}.w2", (w, size)))
        layout.append((f"head.h{h}.b2", (size,)))
    return layout


class ModelState:
    """Named trainable tensors plus the config that shaped them."""

    def __init__(self, config: ModelConfig, params: dict[str, Tensor]):
        self.config = config
        self.params = params

    @classmethod
    def init(cls, config: ModelConfig, seed: int = 0, dtype=np.float32) -> "ModelState":
        """Matrices ~ N(0, 0.02), biases zero, norm gains one."""
        rng = np.random.default_rng(seed)
        params: dict[str, Tensor] = {}
        for name, shape in _param_layout(config):
            if name.endswith(".g"):
                data = np.ones(shape, dtype=dtype)
            elif len(shape) == 1:
                data = np.zeros(shape, dtype=dtype)
            else:
                data = rng.normal(0.0, 0.02, size=shape).astype(dtype)
            params[name] = Tensor(data, requires_grad=True)
        return cls(config, params)

    def __getitem__(self, name: str) -> Tensor:
        return self.params[name]

    def param_count(self) -> int:
        return sum(int(p.data.size) for p in self.params.values())

    @property
    def dtype(self):
        return self.params["temporal.w"].data.dtype


# ---------------------------------------------------------------------------
# batching
# ---------------------------------------------------------------------------

@dataclass
class Batch:
    ids: np.ndarray        # [B, T1, H] int64, SOS at 0, PAD-right
    timestamps: np.ndarray  # [B, T1] float64, PAD positions hold 1
    keep: np.ndarray       # [B, T1] bool, True at SOS and real positions


def make_batch(trajs: list[Trajectory], levels: int) -> Batch:
    lengths = [len(t.ids) for t in trajs]
    t1 = max(lengths)
    b = len(trajs)
    ids = np.full((b, t1, levels), PAD_ID, dtype=np.int64)
    ts = np.ones((b, t1), dtype=np.float64)
    keep = np.zeros((b, t1), dtype=bool)
    for i, traj in enumerate(trajs):
        n = len(traj.ids)
        ids[i, :n] = np.asarray(traj.ids, dtype=np.int64)
        ts[i, :n] = np.asarray(traj.timestamps, dtype=np.float64)
        keep[i, :n] = True
    return Batch(ids=ids, timestamps=ts, keep=keep)


# ---------------------------------------------------------------------------
# forward pieces
# ---------------------------------------------------------------------------

def positional_encoding(n_positions: int, width: int, dtype=np.float32) -> np.ndarray:
    """Fixed sinusoidal table: sin on even dims, cos on odd, base 10000."""
    pos = np.arange(n_positions, dtype=np.float64)[:, None]
    dim = np.arange(width, dtype=np.float64)[None, :]
    angle = pos / np.power(10000.0, (dim - dim % 2) / width)
    table = np.where(dim % 2 == 0, np.sin(angle), np.cos(angle))
    return table.astype(dtype)


def temporal_encoding(timestamps: np.ndarray, state: ModelState) -> Tensor:
    """ReLU-affine transform of log absolute time, one vector per position."""
    if np.any(timestamps <= 0):
        raise ValueError("timestamps must be positive for the log transform")
    logt = np.log(timestamps.astype(np.float64)).astype(state.dtype)[..., None]
    return T.relu(T.add(T.matmul(Tensor(logt), state["temporal.w"]), state["temporal.b"]))


def embed_sequence(batch: Batch, state: ModelState) -> Tensor:
    """Sum of per-level token embeddings + positional table + time transform."""
    cfg = state.config
    x = T.embedding_lookup(state["embed.h1"], batch.ids[:, :, 0])
    for h in range(2, cfg.levels + 1):
        x = T.add(x, T.embedding_lookup(state[f"embed.h{h}"], batch.ids[:, :, h - 1]))
    pe = positional_encoding(batch.ids.shape[1], cfg.hidden, dtype=state.dtype)
    x = T.add(x, Tensor(pe))
    return T.add(x, temporal_encoding(batch.timestamps, state))


def decoder_forward(
    x: Tensor,
    keep: np.ndarray,
    state: ModelState,
    rng: np.random.Generator | None = None,
    training: bool = False,
) -> Tensor:
    """Pre-norm masked self-attention blocks; output t sees inputs <= t only."""
    cfg = state.config
    b, t1, w = x.data.shape
    hd = w // cfg.heads
    causal = np.tril(np.ones((t1, t1), dtype=bool))
    attend = causal[None, None, :, :] & keep[:, None, None, :]

    def split_heads(t: Tensor) -> Tensor:
        return T.swapaxes(T.reshape(t, (b, t1, cfg.heads, hd)), 1, 2)

    for i in range(cfg.layers):
        pre = lambda s: state[f"layer{i}.{s}"]
        h = T.layer_norm(x, pre("ln1.g"), pre("ln1.b"))
        q = split_heads(T.add(T.matmul(h, pre("attn.wq")), pre("attn.bq")))
        k = split_heads(T.add(T.matmul(h, pre("attn.wk")), pre("attn.bk")))
        v = split_heads(T.add(T.matmul(h, pre("attn.wv")), pre("attn.bv")))
        ctx = T.scaled_dot_product_attention(
            q, k, v, attend, dropout_p=cfg.attn_dropout, rng=rng, training=training
        )
        ctx = T.reshape(T.swapaxes(ctx, 1, 2), (b, t1, w))
        x = T.add(x, T.add(T.matmul(ctx, pre("attn.wo")), pre("attn.bo")))
        h2 = T.layer_norm(x, pre("ln2.g"), pre("ln2.b"))
        f = T.relu(T.add(T.matmul(h2, pre("ff.w1")), pre("ff.b1")))
        x = T.add(x, T.add(T.matmul(f, pre("ff.w2")), pre("ff.b2")))
    if cfg.layers > 0:
        x = T.layer_norm(x, state["final_ln.g"], state["final_ln.b"])
    return x


def one_hot(indices: np.ndarray, depth: int, dtype) -> np.ndarray:
    out = np.zeros(indices.shape + (depth,), dtype=dtype)
    np.put_along_axis(out, indices[..., None], 1.0, axis=-1)
    return out


def head_forward(state: ModelState, level: int, features: Tensor) -> Tensor:
    """Two affine layers with a ReLU between them."""
    z = T.relu(T.add(T.matmul(features, state[f"head.h{level}.w1"]), state[f"head.h{level}.b1"]))
    return T.add(T.matmul(z, state[f"head.h{level}.w2"]), state[f"head.h{level}.b2"])


def prediction_logits(outputs: Tensor, state: ModelState) -> list[Tensor]:
    """Per-level next-location logits at every position.

    In chained mode, level h > 1 consumes the decoder output concatenated
    with a one-hot of level h-1's own argmax (lowest index on ties), built
    outside the graph so no gradient crosses levels through it.
    """
    cfg = state.config
    logits = [head_forward(state, 1, outputs)]
    for h in range(2, cfg.levels + 1):
        if cfg.head_mode == HEAD_CHAINED:
            prev = np.argmax(logits[-1].data, axis=-1)
            hot = Tensor(one_hot(prev, cfg.level_sizes[h - 2], state.dtype))
            features = T.concat([outputs, hot], axis=-1)
        else:
            features = outputs
        logits.append(head_forward(state, h, features))
    return logits


def sequence_loss(level_logits: list[Tensor], ids: np.ndarray) -> Tensor:
    """Sum over levels of mean next-token cross-entropy, PAD targets ignored.

    Position t is scored against the ids at t+1; the final position has no
    target and the padded tail's targets are PAD, so both drop out.
    """
    b, t1, levels = ids.shape
    total = None
    for h in range(1, levels + 1):
        lg = level_logits[h - 1]
        trimmed = T.reshape(lg[:, : t1 - 1, :], (b * (t1 - 1), lg.data.shape[-1]))
        targets = ids[:, 1:, h - 1].reshape(-1)
        ce = T.cross_entropy(trimmed, targets, ignore_id=PAD_ID)
        total = ce if total is None else T.add(total, ce)
    return total


def forward_loss(
    batch: Batch,
    state: ModelState,
    rng: np.random.Generator | None = None,
    training: bool = False,
) -> Tensor:
    x = embed_sequence(batch, state)
    out = decoder_forward(x, batch.keep, state, rng=rng, training=training)
    return sequence_loss(prediction_logits(out, state), batch.ids)


# ---------------------------------------------------------------------------
# pre-training
# ---------------------------------------------------------------------------

def pretrain(
    trajs: list[Trajectory], config: ModelConfig, train: TrainConfig
) -> tuple[ModelState, list[float]]:
    """Self-supervised next-location training; returns per-epoch mean loss."""
    if not trajs:
        raise ValueError("empty pre-training set")
    state = ModelState.init(config, seed=train.seed)
    opt = Adam(
        state.params,
        lr=train.lr,
        betas=train.betas,
        eps=train.eps,
        weight_decay=train.weight_decay,
        warmup_steps=train.warmup_steps,
    )
    rng = np.random.default_rng(train.seed)
    order = np.arange(len(trajs))
    curve = []
    for epoch in range(train.epochs):
        rng.shuffle(order)
        epoch_losses = []
        for start in range(0, len(order), train.batch_size):
            chunk = [trajs[i] for i in order[start : start + train.batch_size]]
            batch = make_batch(chunk, config.levels)
            loss = forward_loss(batch, state, rng=rng, training=True)
            if not np.isfinite(loss.data):
                raise TrainingDiverged(
                    f"non-finite loss at epoch {epoch}, step {start // train.batch_size}"
                )
            opt.zero_grad()
            loss.backward()
            opt.step()
            epoch_losses.append(float(loss.data))
        curve.append(float(np.mean(epoch_losses)))
    return state, curve


# ---------------------------------------------------------------------------
# checkpoint container
# ---------------------------------------------------------------------------

_DTYPE_CODES = {np.dtype(np.float32): "<f4", np.dtype(np.float64): "<f8"}


def save_tensors(path, tensors: dict[str, Tensor], meta: dict):
    """Binary container: magic, version, manifest JSON, then raw payloads."""
    manifest = {
        "meta": meta,
        "tensors": [
            {"name": k, "shape": list(t.data.shape), "dtype": _DTYPE_CODES[t.data.dtype]}
            for k, t in tensors.items()
        ],
    }
    blob = json.dumps(manifest).encode("utf-8")
    with open(path, "wb") as f:
        f.write(CHECKPOINT_MAGIC)
        f.write(struct.pack("<I", CHECKPOINT_VERSION))
        f.write(struct.pack("<Q", len(blob)))
        f.write(blob)
        for t in tensors.values():
            f.write(np.ascontiguousarray(t.data).astype(t.data.dtype.newbyteorder("<")).tobytes())


def load_tensors(path) -> tuple[dict, dict[str, Tensor]]:
    with open(path, "rb") as f:
        raw = f.read()
    if len(raw) < 16 or raw[:4] != CHECKPOINT_MAGIC:
        raise CheckpointError(f"{path}: not a checkpoint (bad magic)")
    (version,) = struct.unpack_from("<I", raw, 4)
    if version != CHECKPOINT_VERSION:
        raise CheckpointError(f"{path}: unsupported version {version}")
    (mlen,) = struct.unpack_from("<Q", raw, 8)
    if 16 + mlen > len(raw):
        raise CheckpointError(f"{path}: truncated manifest")
    try:
        manifest = json.loads(raw[16 : 16 + mlen].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as e:
        raise CheckpointError(f"{path}: corrupt manifest: {e}") from None
    offset = 16 + mlen
    tensors: dict[str, Tensor] = {}
    for entry in manifest["tensors"]:
        dtype = np.dtype(entry["dtype"])
        shape = tuple(entry["shape"])
        nbytes = dtype.itemsize * int(np.prod(shape, dtype=np.int64)) if shape else dtype.itemsize
        if offset + nbytes > len(raw):
            raise CheckpointError(f"{path}: truncated payload for tensor '{entry['name']}'")
        data = np.frombuffer(raw, dtype=dtype, count=int(np.prod(shape, dtype=np.int64)), offset=offset)
        tensors[entry["name"]] = Tensor(data.reshape(shape).copy(), requires_grad=True)
        offset += nbytes
    if offset != len(raw):
        raise CheckpointError(f"{path}: {len(raw) - offset} trailing bytes after payloads")
    return manifest["meta"], tensors


def save_checkpoint(state: ModelState, path):
    save_tensors(path, state.params, {"kind": "model", "config": state.config.to_json()})


def load_checkpoint(path, config: ModelConfig | None = None) -> ModelState:
    """Load a model; with `config` given, verify the layout matches it."""
    meta, tensors = load_tensors(path)
    if meta.get("kind") != "model":
        raise CheckpointError(f"{path}: not a model checkpoint")
    stored = ModelConfig.from_json(meta["config"])
    target = config if config is not None else stored
    for name, shape in _param_layout(target):
        if name not in tensors:
            raise CheckpointError(f"{path}: missing tensor '{name}' for target config")
        if tuple(tensors[name].data.shape) != shape:
            raise CheckpointError(
                f"{path}: tensor '{name}' has shape {tuple(tensors[name].data.shape)}, "
                f"config wants {shape}"
            )
    extra = set(tensors) - {name for name, _ in _param_layout(target)}
    if extra:
        raise CheckpointError(f"{path}: unexpected tensors {sorted(extra)}")
    return ModelState(target, tensors)
