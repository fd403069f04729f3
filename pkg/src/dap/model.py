"""Shared dual encoder, representation-translation head and TLM head.

Layout conventions
------------------
* Token ids exclude the CLS token; ``encode`` prepends CLS internally.
* Pre-norm transformer blocks; the encoder ends with a final layer norm, the
  RTL head does not (its last block output goes straight into the vocabulary
  projection).
* The vocabulary projection is the transposed token table when
  ``tie_vocab_head`` is set, otherwise a separate ``head.W`` of shape d x V.
"""

from __future__ import annotations

import json
import struct
import warnings
import zlib
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import numcore as nc
from .numcore import ShapeError, Tensor

PAD, CLS, MASK = 0, 1, 2
N_SPECIAL = 3

_NEG = -1e30
_MAGIC = b"DAPCKPT1"


class ConfigError(ValueError):
    pass


class IntegrityError(ValueError):
    def __init__(self, msg: str, offset: int):
        super().__init__(f"{msg} (at byte offset {offset})")
        self.offset = offset


@dataclass
class EncoderConfig:
    L: int = 2
    d: int = 64
    n_heads: int = 4
    d_ff: int = 128
    V: int = 603
    S_max: int = 16
    K: int = 2
    n_langs: int = 3
    tie_vocab_head: bool = True
    seed: int = 0
    ln_eps: float = 1e-5
    final_ln: bool = True
    # initial gain of the final norm: keeps raw CLS dot products small enough at
    # init that the in-batch softmax starts near uniform
    final_ln_gain: float = 0.5

    def validate(self) -> None:
        for name in ("d", "n_heads", "d_ff", "V", "S_max", "K", "n_langs"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be >= 1, got {getattr(self, name)}")
        if self.L < 0:
            raise ConfigError(f"L must be >= 0, got {self.L}")
        if self.d % self.n_heads:
            raise ConfigError(f"d={self.d} not divisible by n_heads={self.n_heads}")
        if self.V <= N_SPECIAL:
            raise ConfigError(f"V={self.V} leaves no room beyond the special tokens")
        if self.K > self.L:
            warnings.warn(f"RTL head deeper than encoder (K={self.K} > L={self.L})", stacklevel=2)

    @property
    def pos_rows(self) -> int:
        # room for the concatenated TLM input and the RTL concatenation
        return 2 * self.S_max


@dataclass
class ModelParams:
    config: EncoderConfig
    tensors: dict[str, Tensor] = field(default_factory=dict)

    def __getitem__(self, name: str) -> Tensor:
        return self.tensors[name]

    def names(self) -> list[str]:
        return list(self.tensors)

    def values(self) -> list[Tensor]:
        return list(self.tensors.values())

    def n_params(self) -> int:
        return int(sum(t.data.size for t in self.tensors.values()))

    def zero_grad(self) -> None:
        for t in self.tensors.values():
            t.grad = None

    def requires_grad_(self, flag: bool = True) -> "ModelParams":
        for t in self.tensors.values():
            t.requires_grad = flag
        return self

    def copy(self) -> "ModelParams":
        return ModelParams(self.config, {k: Tensor(v.data.copy(), v.requires_grad) for k, v in self.tensors.items()})

    def vocab_matrix(self) -> Tensor:
        if self.config.tie_vocab_head:
            return nc.transpose(self.tensors["tok_emb"])
        return self.tensors["head.W"]


@dataclass
class EncodedBatch:
    cls: Tensor  # B x d
    tokens: Tensor  # B x S x d, CLS excluded
    pad_mask: np.ndarray  # B x S, True on padding
    hidden: Tensor  # B x (S+1) x d, CLS at position 0


# ---------------------------------------------------------------- parameters


def param_shapes(config: EncoderConfig) -> dict[str, tuple[int, ...]]:
    d, f = config.d, config.d_ff
    shapes: dict[str, tuple[int, ...]] = {
        "tok_emb": (config.V, d),
        "pos_emb": (config.pos_rows, d),
        "rtl_pos_emb": (config.pos_rows, d),
        "lang_emb": (config.n_langs, d),
    }

    def block(prefix: str) -> None:
        shapes.update({
            f"{prefix}.ln1.g": (d,), f"{prefix}.ln1.b": (d,),
            f"{prefix}.attn.Wq": (d, d), f"{prefix}.attn.bq": (d,),
            f"{prefix}.attn.Wk": (d, d), f"{prefix}.attn.bk": (d,),
            f"{prefix}.attn.Wv": (d, d), f"{prefix}.attn.bv": (d,),
            f"{prefix}.attn.Wo": (d, d), f"{prefix}.attn.bo": (d,),
            f"{prefix}.ln2.g": (d,), f"{prefix}.ln2.b": (d,),
            f"{prefix}.ffn.W1": (d, f), f"{prefix}.ffn.b1": (f,),
            f"{prefix}.ffn.W2": (f, d), f"{prefix}.ffn.b2": (d,),
        })

    for i in range(config.L):
        block(f"enc.{i}")
    if config.final_ln:
        shapes["enc.ln_f.g"] = (d,)
        shapes["enc.ln_f.b"] = (d,)
    for i in range(config.K):
        block(f"rtl.{i}")
    if not config.tie_vocab_head:
        shapes["head.W"] = (d, config.V)
    return shapes


def is_layer_norm(name: str) -> bool:
    return ".ln" in name


def is_bias(name: str) -> bool:
    return name.rsplit(".", 1)[-1].startswith("b") and not is_layer_norm(name)


def is_embedding(name: str) -> bool:
    return name.endswith("_emb")


def _truncated_normal(rng: np.random.Generator, shape, std: float = 0.02) -> np.ndarray:
    out = rng.standard_normal(shape)
    bad = np.abs(out) > 2.0
    while bad.any():
        out[bad] = rng.standard_normal(int(bad.sum()))
        bad = np.abs(out) > 2.0
    return out * std


def init_params(config: EncoderConfig) -> ModelParams:
    config.validate()
    rng = np.random.default_rng(config.seed)
    tensors = {}
    for name, shape in param_shapes(config).items():
        if name == "enc.ln_f.g":
            data = np.full(shape, config.final_ln_gain)
        elif is_layer_norm(name):
            data = np.ones(shape) if name.endswith(".g") else np.zeros(shape)
        elif is_bias(name):
            data = np.zeros(shape)
        else:
            data = _truncated_normal(rng, shape)
        tensors[name] = Tensor(data, requires_grad=True)
    return ModelParams(config, tensors)


# ---------------------------------------------------------------- blocks


def _attention(p: ModelParams, prefix: str, x: Tensor, key_pad: np.ndarray) -> Tensor:
    n, s, d = x.shape
    h = p.config.n_heads
    dh = d // h

    def heads(t: Tensor) -> Tensor:
        return nc.transpose(nc.reshape(t, (n, s, h, dh)), (0, 2, 1, 3))

    q = heads(nc.add(nc.matmul(x, p[f"{prefix}.attn.Wq"]), p[f"{prefix}.attn.bq"]))
    k = heads(nc.add(nc.matmul(x, p[f"{prefix}.attn.Wk"]), p[f"{prefix}.attn.bk"]))
    v = heads(nc.add(nc.matmul(x, p[f"{prefix}.attn.Wv"]), p[f"{prefix}.attn.bv"]))
    scores = nc.scale(nc.matmul(q, nc.transpose(k, (0, 1, 3, 2))), 1.0 / np.sqrt(dh))
    bias = np.where(key_pad, _NEG, 0.0)[:, None, None, :]
    att = nc.softmax(nc.add(scores, bias), axis=-1)
    ctx = nc.reshape(nc.transpose(nc.matmul(att, v), (0, 2, 1, 3)), (n, s, d))
    return nc.add(nc.matmul(ctx, p[f"{prefix}.attn.Wo"]), p[f"{prefix}.attn.bo"])


def block_forward(p: ModelParams, prefix: str, x: Tensor, key_pad: np.ndarray) -> Tensor:
    eps = p.config.ln_eps
    a = nc.layer_norm(x, p[f"{prefix}.ln1.g"], p[f"{prefix}.ln1.b"], eps)
    x = nc.add(x, _attention(p, prefix, a, key_pad))
    f = nc.layer_norm(x, p[f"{prefix}.ln2.g"], p[f"{prefix}.ln2.b"], eps)
    f = nc.gelu(nc.add(nc.matmul(f, p[f"{prefix}.ffn.W1"]), p[f"{prefix}.ffn.b1"]))
    f = nc.add(nc.matmul(f, p[f"{prefix}.ffn.W2"]), p[f"{prefix}.ffn.b2"])
    return nc.add(x, f)


def _run_encoder(p: ModelParams, ids: np.ndarray, pad: np.ndarray) -> Tensor:
    """ids already carry CLS at position 0; returns the residual stream after the last block."""
    s = ids.shape[1]
    x = nc.add(nc.gather(p["tok_emb"], ids), nc.gather(p["pos_emb"], np.arange(s)))
    for i in range(p.config.L):
        x = block_forward(p, f"enc.{i}", x, pad)
    if p.config.final_ln:
        x = nc.layer_norm(x, p["enc.ln_f.g"], p["enc.ln_f.b"], p.config.ln_eps)
    return x


def _check_ids(p: ModelParams, ids: np.ndarray) -> None:
    if ids.size and (ids.min() < 0 or ids.max() >= p.config.V):
        raise nc.ContractError(f"token id outside [0, {p.config.V})")


def encode(p: ModelParams, token_ids, pad_mask=None) -> EncodedBatch:
    """Prepend CLS, run the encoder; ``pad_mask`` defaults to ``token_ids == PAD``."""
    ids = np.asarray(token_ids, dtype=np.int64)
    if ids.ndim != 2:
        raise ShapeError(f"token_ids must be B x S, got {ids.shape}")
    b, s = ids.shape
    if s > p.config.S_max - 1:
        raise nc.ContractError(f"sequence length {s} exceeds S_max-1={p.config.S_max - 1}; truncate first")
    _check_ids(p, ids)
    pad = ids == PAD if pad_mask is None else np.asarray(pad_mask, dtype=bool)
    full_ids = np.concatenate([np.full((b, 1), CLS), ids], axis=1)
    full_pad = np.concatenate([np.zeros((b, 1), dtype=bool), pad], axis=1)
    h = _run_encoder(p, full_ids, full_pad)
    cls = nc.index(h, (slice(None), 0))
    tokens = nc.index(h, (slice(None), slice(1, None)))
    return EncodedBatch(cls=cls, tokens=tokens, pad_mask=pad, hidden=h)


def _flat_positions(lengths_or_sets, offsets, width: int) -> np.ndarray:
    return np.concatenate([b * width + off + np.asarray(ps, dtype=np.int64)
                           for b, (ps, off) in enumerate(zip(lengths_or_sets, offsets))])


def rtl_forward(
    p: ModelParams,
    source_tokens: Tensor,
    source_lengths,
    target_lengths,
    recon_positions,
    leaked_target: Tensor | None = None,
    lang_ids=None,
) -> Tensor:
    """Reconstruct target tokens from CLS-free source representations.

    Builds ``[h_1..h_Sx, slot_1..slot_Sy]`` per example, where a slot is the
    MASK embedding at reconstruction positions and the leaked target
    representation elsewhere. Positions are indexed from 0 over the real
    concatenated length; ``lang_ids`` (one per example, or None) adds a
    language embedding at every position. Returns vocabulary logits for the
    reconstruction positions only, flattened in (example, position) order:
    shape (sum_b |recon_b|) x V.
    """
    cfg = p.config
    src = nc.as_tensor(source_tokens)
    b, sx_pad, d = src.shape
    sx = np.asarray(source_lengths, dtype=np.int64)
    sy = np.asarray(target_lengths, dtype=np.int64)
    sy_pad = int(sy.max())
    recon = [np.asarray(sorted(set(int(i) for i in r)), dtype=np.int64) for r in recon_positions]
    if len(recon) != b or len(sx) != b or len(sy) != b:
        raise ShapeError("per-example arguments disagree with batch size")
    slot_is_mask = np.zeros((b, sy_pad), dtype=bool)
    for i, r in enumerate(recon):
        if r.size == 0:
            raise nc.ContractError(f"example {i}: empty reconstruction set")
        if r.min() < 0 or r.max() >= sy[i]:
            raise nc.ContractError(f"example {i}: reconstruction positions outside [0, {sy[i]})")
        slot_is_mask[i, r] = True
    real_slot = np.arange(sy_pad)[None, :] < sy[:, None]
    mask_row = nc.gather(p["tok_emb"], np.array([MASK]))  # 1 x d
    if (real_slot & ~slot_is_mask).any():
        if leaked_target is None:
            raise nc.ContractError("leaked_target required when some target positions are not reconstructed")
        leaked = nc.as_tensor(leaked_target)
        if leaked.shape[1] < sy_pad:
            raise ShapeError(f"leaked_target length {leaked.shape[1]} < target length {sy_pad}")
        if leaked.shape[1] > sy_pad:
            leaked = nc.index(leaked, (slice(None), slice(0, sy_pad)))
        slots = nc.where(slot_is_mask[:, :, None], nc.reshape(mask_row, (1, 1, d)), leaked)
    else:
        slots = nc.add(nc.reshape(mask_row, (1, 1, d)), np.zeros((b, sy_pad, d)))

    x = nc.concat([src, slots], axis=1)
    pos = np.concatenate([np.broadcast_to(np.arange(sx_pad), (b, sx_pad)), sx[:, None] + np.arange(sy_pad)[None, :]], axis=1)
    pos = np.minimum(pos, cfg.pos_rows - 1)
    x = nc.add(x, nc.gather(p["rtl_pos_emb"], pos))
    if lang_ids is not None:
        lang = np.asarray(lang_ids, dtype=np.int64)
        x = nc.add(x, nc.reshape(nc.gather(p["lang_emb"], lang), (b, 1, d)))
    key_pad = np.concatenate([np.arange(sx_pad)[None, :] >= sx[:, None], ~real_slot], axis=1)
    for i in range(cfg.K):
        x = block_forward(p, f"rtl.{i}", x, key_pad)
    width = sx_pad + sy_pad
    flat = _flat_positions(recon, [sx_pad] * b, width)
    picked = nc.gather(nc.reshape(x, (b * width, d)), flat)
    return nc.matmul(picked, p.vocab_matrix())


def tlm_forward(p: ModelParams, concat_ids, masked_positions) -> Tensor:
    """One encoder pass over ``[CLS] m(x) m(y)`` (CLS included in ``concat_ids``).

    ``masked_positions`` holds, per example, indices into the concatenated row.
    Returns logits flattened in (example, position) order.
    """
    ids = np.asarray(concat_ids, dtype=np.int64)
    b, s = ids.shape
    if s > p.config.pos_rows:
        raise nc.ContractError(f"concatenated length {s} exceeds {p.config.pos_rows}")
    if len(masked_positions) != b or any(len(m) == 0 for m in masked_positions):
        raise nc.ContractError("every example needs at least one masked position")
    _check_ids(p, ids)
    pad = ids == PAD
    h = _run_encoder(p, ids, pad)
    flat = _flat_positions(masked_positions, [0] * b, s)
    picked = nc.gather(nc.reshape(h, (b * s, p.config.d)), flat)
    return nc.matmul(picked, p.vocab_matrix())


# ---------------------------------------------------------------- checkpoints


def _u32(n: int) -> bytes:
    return struct.pack("<I", n)


def checkpoint_bytes(p: ModelParams, config: EncoderConfig | None = None) -> bytes:
    config = config or p.config
    cfg_json = json.dumps(asdict(config), sort_keys=True).encode("utf-8")
    parts = [_u32(len(cfg_json)), cfg_json]
    for name, t in p.tensors.items():
        raw = name.encode("utf-8")
        parts += [_u32(len(raw)), raw, _u32(t.data.ndim)]
        parts += [struct.pack("<Q", n) for n in t.data.shape]
        parts.append(np.ascontiguousarray(t.data, dtype="<f8").tobytes())
    body = b"".join(parts)
    return _MAGIC + body + _u32(zlib.crc32(body))


def save_checkpoint(p: ModelParams, config: EncoderConfig | None, path) -> None:
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_bytes(checkpoint_bytes(p, config))
    tmp.replace(path)


def _parse(buf: bytes) -> tuple[EncoderConfig, dict[str, np.ndarray]]:
    if len(buf) < len(_MAGIC) + 8:
        raise IntegrityError("file too short", len(buf))
    if buf[: len(_MAGIC)] != _MAGIC:
        raise IntegrityError("bad magic", 0)
    end = len(buf) - 4
    pos = len(_MAGIC)

    def take(n: int) -> bytes:
        nonlocal pos
        if pos + n > end:
            raise IntegrityError(f"truncated record needing {n} bytes", pos)
        out = buf[pos : pos + n]
        pos += n
        return out

    try:
        n = struct.unpack("<I", take(4))[0]
        at = pos
        cfg_raw = take(n)
        try:
            config = EncoderConfig(**json.loads(cfg_raw.decode("utf-8")))
        except (ValueError, TypeError) as exc:
            raise IntegrityError(f"unreadable config: {exc}", at) from None
        tensors: dict[str, np.ndarray] = {}
        while pos < end:
            name = take(struct.unpack("<I", take(4))[0]).decode("utf-8", errors="strict")
            rank = struct.unpack("<I", take(4))[0]
            if rank > 8:
                raise IntegrityError(f"implausible rank {rank}", pos - 4)
            dims = tuple(struct.unpack("<Q", take(8))[0] for _ in range(rank))
            count = int(np.prod(dims)) if dims else 1
            tensors[name] = np.frombuffer(take(8 * count), dtype="<f8").astype(np.float64).reshape(dims)
    except UnicodeDecodeError:
        raise IntegrityError("undecodable tensor name", pos) from None
    stored = struct.unpack("<I", buf[end:])[0]
    if zlib.crc32(buf[len(_MAGIC) : end]) != stored:
        raise IntegrityError("CRC32 mismatch", end)
    return config, tensors


def load_checkpoint(path, expected: EncoderConfig | None = None) -> tuple[ModelParams, EncoderConfig]:
    config, arrays = _parse(Path(path).read_bytes())
    want = param_shapes(config)
    if set(want) != set(arrays):
        raise ShapeError(f"tensor names differ from config: {sorted(set(want) ^ set(arrays))}")
    for name, shape in want.items():
        if arrays[name].shape != shape:
            raise ShapeError(f"{name}: stored {arrays[name].shape}, config implies {shape}")
    if expected is not None:
        other = param_shapes(expected)
        if other != want:
            raise ShapeError("checkpoint shapes do not match the expected config")
    tensors = {name: Tensor(arrays[name], requires_grad=True) for name in want}
    return ModelParams(config, tensors), config
