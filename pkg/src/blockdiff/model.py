"""Small pre-norm transformer with pluggable attention visibility."""

from __future__ import annotations

import json
import struct
from dataclasses import asdict, dataclass, replace
from pathlib import Path

import numpy as np

from . import tensor as T
from .tensor import Tensor

PARAMETRIZATIONS = ("shifted", "unshifted")
MASK_KINDS = ("causal", "bidirectional", "block_causal")


@dataclass(frozen=True)
class ModelConfig:
    vocab_size: int
    d_model: int = 128
    n_layers: int = 2
    n_heads: int = 4
    max_len: int = 256
    parametrization: str = "unshifted"
    d_ff: int | None = None
    init_std: float = 0.02
    dtype: str = "float32"
    mask_id: int | None = None

    def __post_init__(self):
        if self.d_model % self.n_heads:
            raise ValueError(f"d_model={self.d_model} not divisible by n_heads={self.n_heads}")
        if self.parametrization not in PARAMETRIZATIONS:
            raise ValueError(f"unknown parametrization {self.parametrization!r}")
        if self.dtype not in ("float32", "float64"):
            raise ValueError(f"unsupported dtype {self.dtype!r}")
        if self.vocab_size < 2 or self.n_layers < 1 or self.max_len < 1:
            raise ValueError("vocab_size >= 2, n_layers >= 1, max_len >= 1 required")

    @property
    def ffn_width(self) -> int:
        return self.d_ff or 4 * self.d_model

    @property
    def mask_token(self) -> int:
        return self.vocab_size - 1 if self.mask_id is None else self.mask_id

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass(frozen=True)
class AttentionMaskSpec:
    """Which positions may attend to which.

    With ``segment_ids`` and ``packed_visible=False`` attention is further
    restricted to the same packed segment; by default packed samples are
    mutually visible.
    """

    kind: str
    block_size: int | None = None
    segment_ids: np.ndarray | None = None
    packed_visible: bool = True


def block_visibility(block_ids) -> np.ndarray:
    """Position i sees j iff ``block_ids[j] <= block_ids[i]``."""
    ids = np.asarray(block_ids)
    return ids[None, :] <= ids[:, None]


def build_attention_mask(spec: AttentionMaskSpec, seq_len: int) -> np.ndarray:
    if spec.kind not in MASK_KINDS:
        raise ValueError(f"unknown mask kind {spec.kind!r}")
    pos = np.arange(seq_len)
    if spec.kind == "causal":
        allow = block_visibility(pos)
    elif spec.kind == "bidirectional":
        allow = np.ones((seq_len, seq_len), dtype=bool)
    else:
        if spec.block_size is None or spec.block_size <= 0:
            raise ValueError(f"block_causal mask needs block_size >= 1, got {spec.block_size}")
        allow = block_visibility(pos // spec.block_size)
    if spec.segment_ids is not None and not spec.packed_visible:
        seg = np.asarray(spec.segment_ids)
        if seg.shape[-1] != seq_len:
            raise ValueError("segment_ids length does not match seq_len")
        same = seg[..., :, None] == seg[..., None, :]
        allow = allow & same
    return allow


class Transformer:
    """Parameters plus forward evaluation.

    ``params`` maps names to leaf tensors; the output head is tied to the
    token embedding table.
    """

    def __init__(self, config: ModelConfig, params: dict[str, Tensor]):
        self.config = config
        self.params = params

    @property
    def dtype(self):
        return np.dtype(self.config.dtype)

    def with_parametrization(self, parametrization: str) -> "Transformer":
        """A view sharing the same parameters under another head convention."""
        return Transformer(replace(self.config, parametrization=parametrization), self.params)

    def copy(self) -> "Transformer":
        """Independent parameter copy (training one leaves the other untouched)."""
        return Transformer(self.config, {k: Tensor(p.data.copy(), requires_grad=True) for k, p in self.params.items()})

    def arrays(self) -> dict[str, np.ndarray]:
        return {k: p.data for k, p in self.params.items()}

    def forward(self, tokens, mask, positions=None) -> Tensor:
        """Logits for every position.

        ``tokens`` is ``(T,)`` or ``(batch, T)``; ``mask`` is an
        :class:`AttentionMaskSpec` or a boolean visibility matrix of shape
        ``(T, T)`` or ``(batch, T, T)``.
        """
        cfg = self.config
        tokens = np.asarray(tokens)
        single = tokens.ndim == 1
        if single:
            tokens = tokens[None]
        B, L = tokens.shape
        if L > cfg.max_len:
            raise ValueError(f"sequence length {L} exceeds max_len {cfg.max_len}")
        if tokens.size and (tokens.min() < 0 or tokens.max() >= cfg.vocab_size):
            raise ValueError(f"token id outside [0, {cfg.vocab_size})")
        allow = build_attention_mask(mask, L) if isinstance(mask, AttentionMaskSpec) else np.asarray(mask, bool)
        if allow.shape[-2:] != (L, L):
            raise ValueError(f"visibility matrix {allow.shape} does not match length {L}")
        if not np.diagonal(allow, axis1=-2, axis2=-1).all():
            raise ValueError("visibility matrix must be reflexive")
        allow = allow[None, None] if allow.ndim == 2 else allow[:, None]
        if positions is None:
            positions = np.broadcast_to(np.arange(L), (B, L))
        else:
            positions = np.broadcast_to(np.asarray(positions), (B, L))

        p = self.params
        H = cfg.n_heads
        dh = cfg.d_model // H
        h = T.embedding(p["tok_emb"], tokens) + T.embedding(p["pos_emb"], positions)
        for i in range(cfg.n_layers):
            pre = f"layers.{i}."
            a = T.rms_norm(h, p[pre + "norm1"])
            q = _heads(T.linear(a, p[pre + "wq"]), H, dh)
            k = _heads(T.linear(a, p[pre + "wk"]), H, dh)
            v = _heads(T.linear(a, p[pre + "wv"]), H, dh)
            scores = T.scale(T.matmul(q, T.transpose(k, -1, -2)), 1.0 / np.sqrt(dh))
            att = T.masked_softmax_rows(scores, allow)
            o = T.reshape(T.transpose(T.matmul(att, v), 1, 2), (B, L, cfg.d_model))
            h = h + T.linear(o, p[pre + "wo"])
            f = T.rms_norm(h, p[pre + "norm2"])
            f = T.gelu(T.add_bias(T.linear(f, p[pre + "w1"]), p[pre + "b1"]))
            h = h + T.add_bias(T.linear(f, p[pre + "w2"]), p[pre + "b2"])
        h = T.rms_norm(h, p["final_norm"])
        logits = T.add_bias(T.linear(h, T.transpose(p["tok_emb"], 0, 1)), p["out_bias"])
        return logits[0] if single else logits

    def logits_np(self, tokens, mask, positions=None) -> np.ndarray:
        """Forward outside any tape (inference)."""
        with T.no_grad():
            return self.forward(tokens, mask, positions).data

    def next_token_logits(self, seq) -> np.ndarray:
        return self.logits_np(np.asarray(seq), AttentionMaskSpec("causal"))[-1]


def _heads(x: Tensor, H: int, dh: int) -> Tensor:
    B, L, _ = x.shape
    return T.transpose(T.reshape(x, (B, L, H, dh)), 1, 2)


def param_shapes(config: ModelConfig) -> dict[str, tuple[int, ...]]:
    d, f = config.d_model, config.ffn_width
    shapes = {
        "tok_emb": (config.vocab_size, d),
        "pos_emb": (config.max_len, d),
    }
    for i in range(config.n_layers):
        pre = f"layers.{i}."
        shapes.update({
            pre + "norm1": (d,),
            pre + "wq": (d, d),
            pre + "wk": (d, d),
            pre + "wv": (d, d),
            pre + "wo": (d, d),
            pre + "norm2": (d,),
            pre + "w1": (d, f),
            pre + "b1": (f,),
            pre + "w2": (f, d),
            pre + "b2": (d,),
        })
    shapes["final_norm"] = (d,)
    shapes["out_bias"] = (config.vocab_size,)
    return shapes


def init_params(config: ModelConfig, seed: int) -> Transformer:
    """Scaled-normal weights, unit norm gains, zero biases; deterministic in ``seed``."""
    rng = np.random.default_rng(seed)
    dtype = np.dtype(config.dtype)
    params = {}
    for name, shape in param_shapes(config).items():
        leaf = name.rsplit(".", 1)[-1]
        if leaf.startswith("norm") or leaf == "final_norm":
            arr = np.ones(shape)
        elif leaf.startswith("b") or leaf == "out_bias":
            arr = np.zeros(shape)
        else:
            arr = rng.normal(0.0, config.init_std, size=shape)
        params[name] = Tensor(arr.astype(dtype), requires_grad=True)
    return Transformer(config, params)


def from_arrays(config: ModelConfig, arrays: dict[str, np.ndarray]) -> Transformer:
    expected = param_shapes(config)
    if set(arrays) != set(expected):
        missing = set(expected) ^ set(arrays)
        raise ValueError(f"parameter names do not match config: {sorted(missing)}")
    params = {}
    for name, shape in expected.items():
        arr = np.asarray(arrays[name])
        if arr.shape != shape:
            raise ValueError(f"{name}: shape {arr.shape}, expected {shape}")
        params[name] = Tensor(arr.astype(config.dtype, copy=True), requires_grad=True)
    return Transformer(config, params)


class MaskQueryAR:
    """Next-token view of an unshifted model.

    The logits for ``x[i+1]`` are read at a mask token appended after
    ``x[:i+1]`` under causal visibility, one forward per prefix. Used to check
    that single-token block diffusion and autoregressive decoding consume the
    same conditionals.
    """

    def __init__(self, model: Transformer):
        if model.config.parametrization != "unshifted":
            raise ValueError("MaskQueryAR wraps an unshifted model")
        self.model = model
        self.config = replace(model.config, parametrization="shifted")

    def forward(self, tokens, mask=None, positions=None) -> Tensor:
        if mask is not None and not (isinstance(mask, AttentionMaskSpec) and mask.kind == "causal"):
            raise ValueError("MaskQueryAR only supports causal visibility")
        tokens = np.asarray(tokens)
        single = tokens.ndim == 1
        if single:
            tokens = tokens[None]
        B, L = tokens.shape
        mask_id = self.model.config.mask_token
        rows = []
        for i in range(L):
            seq = np.concatenate([tokens[:, : i + 1], np.full((B, 1), mask_id)], axis=1)
            logits = self.model.forward(seq, AttentionMaskSpec("causal"))
            rows.append(logits[:, i + 1 : i + 2])
        out = T.concat(rows, axis=1)
        return out[0] if single else out

    def logits_np(self, tokens, mask=None, positions=None) -> np.ndarray:
        with T.no_grad():
            return self.forward(tokens, mask, positions).data

    def next_token_logits(self, seq) -> np.ndarray:
        seq = np.append(np.asarray(seq), self.model.config.mask_token)
        return self.model.logits_np(seq, AttentionMaskSpec("causal"))[-1]


# ---------------------------------------------------------------- checkpoints

MAGIC = b"SDC1"
FORMAT_VERSION = 1
_DTYPE_TAGS = {np.dtype("<f4"): 0, np.dtype("<f8"): 1, np.dtype("u1"): 2, np.dtype("<i8"): 3}
_TAG_DTYPES = {v: k for k, v in _DTYPE_TAGS.items()}
META_KEY = "__meta__"


def save_checkpoint(path, arrays: dict[str, np.ndarray], meta: dict | None = None) -> None:
    """Write a tensor table: magic, version, count, then per tensor
    ``u32 name_len, name, u8 dtype, u32 rank, u64 dims..., raw LE bytes``."""
    table = {k: (v.data if isinstance(v, Tensor) else np.asarray(v)) for k, v in arrays.items()}
    if meta is not None:
        table[META_KEY] = np.frombuffer(json.dumps(meta, sort_keys=True).encode(), dtype=np.uint8)
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<II", FORMAT_VERSION, len(table)))
        for name in sorted(table):
            arr = table[name]
            le = arr.dtype.newbyteorder("<") if arr.dtype.itemsize > 1 else arr.dtype
            if le not in _DTYPE_TAGS:
                raise TypeError(f"{name}: unsupported dtype {arr.dtype}")
            raw = np.ascontiguousarray(arr, dtype=le).tobytes()
            enc = name.encode()
            fh.write(struct.pack("<I", len(enc)))
            fh.write(enc)
            fh.write(struct.pack("<BI", _DTYPE_TAGS[le], arr.ndim))
            fh.write(struct.pack(f"<{arr.ndim}Q", *arr.shape))
            fh.write(raw)


def load_checkpoint(path) -> tuple[dict[str, np.ndarray], dict | None]:
    buf = Path(path).read_bytes()
    if buf[:4] != MAGIC:
        raise ValueError(f"{path}: not an SDC1 checkpoint")
    version, count = struct.unpack_from("<II", buf, 4)
    if version != FORMAT_VERSION:
        raise ValueError(f"{path}: unsupported format version {version}")
    off = 12
    arrays = {}
    for _ in range(count):
        (n,) = struct.unpack_from("<I", buf, off)
        off += 4
        name = buf[off : off + n].decode()
        off += n
        tag, rank = struct.unpack_from("<BI", buf, off)
        off += 5
        dims = struct.unpack_from(f"<{rank}Q", buf, off)
        off += 8 * rank
        dtype = _TAG_DTYPES[tag]
        nbytes = int(np.prod(dims, dtype=np.int64)) * dtype.itemsize
        arrays[name] = np.frombuffer(buf, dtype=dtype, count=nbytes // dtype.itemsize, offset=off).reshape(dims).copy()
        off += nbytes
    meta = None
    if META_KEY in arrays:
        meta = json.loads(arrays.pop(META_KEY).tobytes().decode())
    return arrays, meta


def save_model(path, model: Transformer, extra: dict | None = None) -> None:
    meta = {"model": model.config.to_dict(), **(extra or {})}
    save_checkpoint(path, model.params, meta)


def load_model(path) -> tuple[Transformer, dict]:
    arrays, meta = load_checkpoint(path)
    if not meta or "model" not in meta:
        raise ValueError(f"{path}: checkpoint carries no model config")
    config = ModelConfig(**meta["model"])
    return from_arrays(config, arrays), meta
