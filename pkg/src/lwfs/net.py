"""Acoustic model: conv frontend, bidirectional LSTM trunk, per-task heads.

Parameters live in named collections — "shared" for the trunk and one
collection per head — with a per-collection trainable flag the optimizer
honors. Heads map the trunk's output (2 * hidden_dim after direction concat)
to their vocab via linear + log-softmax.
"""

from __future__ import annotations

import copy
import hashlib
import json
import struct
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor

BLANK_SYMBOL = "<blank>"
SHARED = "shared"

_MAGIC = b"LWFS"
_VERSION = 1


class CheckpointError(RuntimeError):
    """Checkpoint file unreadable, truncated, or from another format version."""


@dataclass(frozen=True)
class Vocab:
    """Ordered symbol table with blank fixed at index 0.

    ``lang_tags`` aligns with ``symbols``; the blank carries None, every
    other symbol one of "A", "B", "shared".
    """

    symbols: tuple[str, ...]
    lang_tags: tuple[str | None, ...]

    def __post_init__(self):
        if not self.symbols or self.symbols[0] != BLANK_SYMBOL:
            raise ValueError(f"vocab must start with the blank symbol {BLANK_SYMBOL!r}")
        if len(set(self.symbols)) != len(self.symbols):
            raise ValueError("vocab symbols must be unique")
        if len(self.lang_tags) != len(self.symbols):
            raise ValueError("lang_tags must align with symbols")
        if self.lang_tags[0] is not None:
            raise ValueError("blank carries no language tag")
        bad = [t for t in self.lang_tags[1:] if t not in ("A", "B", "shared")]
        if bad:
            raise ValueError(f"invalid language tags: {bad}")

    @classmethod
    def build(cls, tagged_symbols) -> "Vocab":
        """From (symbol, tag) pairs, blank prepended."""
        syms = [BLANK_SYMBOL] + [s for s, _ in tagged_symbols]
        tags = [None] + [t for _, t in tagged_symbols]
        return cls(tuple(syms), tuple(tags))

    def __len__(self) -> int:
        return len(self.symbols)

    def index(self, symbol: str) -> int:
        try:
            return self.symbols.index(symbol)
        except ValueError:
            raise ValueError(f"symbol {symbol!r} not in vocab") from None

    def encode(self, tokens) -> list[int]:
        return [self.index(t) for t in tokens]

    def decode(self, indices) -> list[str]:
        return [self.symbols[i] for i in indices]

    def to_json(self) -> dict:
        return {"symbols": list(self.symbols), "lang_tags": list(self.lang_tags)}

    @classmethod
    def from_json(cls, obj) -> "Vocab":
        return cls(tuple(obj["symbols"]), tuple(obj["lang_tags"]))


@dataclass
class ModelConfig:
    input_dim: int
    conv_layers: int = 2
    conv_kernel: int = 3
    conv_channels: int = 16
    conv_stride: int = 1
    recurrent_layers: int = 2
    hidden_dim: int = 32
    heads: tuple = ()  # (head_id, Vocab) pairs applied at build time

    def __post_init__(self):
        if self.input_dim < 1:
            raise ValueError("input_dim must be >= 1")
        if self.conv_layers < 1 or self.recurrent_layers < 1:
            raise ValueError("conv_layers and recurrent_layers must be >= 1")
        if self.hidden_dim < 1 or self.conv_channels < 1:
            raise ValueError("hidden_dim and conv_channels must be >= 1")
        if self.conv_kernel < 1 or self.conv_kernel % 2 == 0:
            raise ValueError("conv_kernel must be odd and >= 1 (same padding)")
        if self.conv_stride < 1:
            raise ValueError("conv_stride must be >= 1")

    @property
    def trunk_out(self) -> int:
        return 2 * self.hidden_dim

    def output_length(self, t0: int) -> int:
        """Frames after the conv stack (== t0 at stride 1)."""
        t = t0
        for _ in range(self.conv_layers):
            t = ad.conv1d_output_length(t, self.conv_kernel, self.conv_stride)
        return t

    def to_json(self) -> dict:
        return {
            "input_dim": self.input_dim, "conv_layers": self.conv_layers,
            "conv_kernel": self.conv_kernel, "conv_channels": self.conv_channels,
            "conv_stride": self.conv_stride, "recurrent_layers": self.recurrent_layers,
            "hidden_dim": self.hidden_dim,
        }

    @classmethod
    def from_json(cls, obj) -> "ModelConfig":
        return cls(**obj)


@dataclass
class Model:
    cfg: ModelConfig
    shared: dict[str, Tensor]
    heads: dict[str, dict[str, Tensor]]
    vocabs: dict[str, Vocab]
    trainable: dict[str, bool] = field(default_factory=dict)

    def collections(self) -> dict[str, dict[str, Tensor]]:
        out = {SHARED: self.shared}
        out.update(self.heads)
        return out

    def head_ids(self) -> list[str]:
        return list(self.heads)

    def parameters(self):
        for params in self.collections().values():
            yield from params.values()


def _uniform(rng, fan_in: int, shape) -> np.ndarray:
    bound = 1.0 / np.sqrt(fan_in)
    return rng.uniform(-bound, bound, size=shape)


def _init_shared(cfg: ModelConfig, rng) -> dict[str, Tensor]:
    params: dict[str, Tensor] = {}

    def put(name, arr):
        params[name] = Tensor(arr, name=name, trainable=True)

    cin = cfg.input_dim
    for i in range(cfg.conv_layers):
        put(f"conv{i}_w", _uniform(rng, cfg.conv_kernel * cin, (cfg.conv_kernel, cin, cfg.conv_channels)))
        put(f"conv{i}_b", np.zeros(cfg.conv_channels))
        cin = cfg.conv_channels
    in_dim = cfg.conv_channels
    for layer in range(cfg.recurrent_layers):
        for d in ("fwd", "bwd"):
            h = cfg.hidden_dim
            put(f"lstm{layer}_{d}_wx", _uniform(rng, in_dim, (in_dim, 4 * h)))
            put(f"lstm{layer}_{d}_wh", _uniform(rng, h, (h, 4 * h)))
            put(f"lstm{layer}_{d}_b", np.zeros(4 * h))
        in_dim = cfg.trunk_out
    return params


def _init_head(cfg: ModelConfig, head_id: str, vocab: Vocab, rng) -> dict[str, Tensor]:
    w = Tensor(_uniform(rng, cfg.trunk_out, (cfg.trunk_out, len(vocab))),
               name=f"head_{head_id}_w", trainable=True)
    b = Tensor(np.zeros(len(vocab)), name=f"head_{head_id}_b", trainable=True)
    return {"w": w, "b": b}


def build_model(cfg: ModelConfig, seed: int) -> Model:
    rng = np.random.default_rng([int(seed), 11])
    shared = _init_shared(cfg, rng)
    model = Model(cfg=cfg, shared=shared, heads={}, vocabs={}, trainable={SHARED: True})
    for head_id, vocab in cfg.heads:
        model.heads[head_id] = _init_head(cfg, head_id, vocab, rng)
        model.vocabs[head_id] = vocab
        model.trainable[head_id] = True
    return model


def add_head(model: Model, head_id: str, vocab: Vocab, seed: int) -> Model:
    if head_id in model.heads or head_id == SHARED:
        raise ValueError(f"collection id {head_id!r} already in use")
    rng = np.random.default_rng([int(seed), 13])
    model.heads[head_id] = _init_head(model.cfg, head_id, vocab, rng)
    model.vocabs[head_id] = vocab
    model.trainable[head_id] = True
    return model


def set_trainable(model: Model, collection_ids, flag: bool) -> None:
    ids = [collection_ids] if isinstance(collection_ids, str) else list(collection_ids)
    known = model.collections()
    for cid in ids:
        if cid not in known:
            raise ValueError(f"unknown parameter collection {cid!r}")
    for cid in ids:
        model.trainable[cid] = bool(flag)


def clone(model: Model) -> Model:
    return copy.deepcopy(model)


# -- forward -------------------------------------------------------------

def _lstm_direction(wx: Tensor, wh: Tensor, b: Tensor, steps: list[Tensor],
                    mask: np.ndarray | None, reverse: bool) -> list[Tensor]:
    """One direction over pre-sliced (B, 1, C) steps; returns per-step (B, 1, H).

    ``mask`` is (B, T) with 1 on valid frames. Masked frames keep the carried
    state, which makes right-padded batches match unpadded runs exactly.
    """
    T = len(steps)
    B = steps[0].data.shape[0]
    H = wh.data.shape[0]
    h = ad.constant(np.zeros((B, 1, H)))
    c = ad.constant(np.zeros((B, 1, H)))
    outs: list[Tensor] = [None] * T  # type: ignore[list-item]
    order = range(T - 1, -1, -1) if reverse else range(T)
    for t in order:
        pre = ad.add(ad.add(ad.matmul(steps[t], wx), ad.matmul(h, wh)), b)
        gi = ad.sigmoid(ad.slice_axis(pre, 2, 0, H))
        gf = ad.sigmoid(ad.slice_axis(pre, 2, H, 2 * H))
        gg = ad.tanh(ad.slice_axis(pre, 2, 2 * H, 3 * H))
        go = ad.sigmoid(ad.slice_axis(pre, 2, 3 * H, 4 * H))
        c_new = ad.add(ad.mul(gf, c), ad.mul(gi, gg))
        h_new = ad.mul(go, ad.tanh(c_new))
        if mask is not None:
            m = ad.constant(mask[:, t].reshape(B, 1, 1))
            keep = ad.constant(1.0 - mask[:, t].reshape(B, 1, 1))
            c = ad.add(ad.mul(m, c_new), ad.mul(keep, c))
            h = ad.add(ad.mul(m, h_new), ad.mul(keep, h))
        else:
            c, h = c_new, h_new
        outs[t] = h
    return outs


def _length_mask(lens: np.ndarray, t: int) -> np.ndarray:
    return (np.arange(t)[None, :] < lens[:, None]).astype(np.float64)


def _trunk(model: Model, x: Tensor, in_lens: np.ndarray | None) -> Tensor:
    """Conv stack then BLSTM stack; (B, T0, F) -> (B, T', 2 * hidden).

    With ``in_lens`` given, rows beyond each utterance's valid length are
    zeroed after every conv layer and held constant through the LSTMs, so a
    right-padded batch computes exactly what unpadded runs would.
    """
    cfg = model.cfg
    h = x
    lens = in_lens
    for i in range(cfg.conv_layers):
        h = ad.tanh(ad.conv1d(h, model.shared[f"conv{i}_w"],
                              model.shared[f"conv{i}_b"], stride=cfg.conv_stride))
        if lens is not None:
            lens = np.array([ad.conv1d_output_length(int(n), cfg.conv_kernel, cfg.conv_stride)
                             for n in lens], dtype=np.int64)
            h = ad.mul(h, ad.constant(_length_mask(lens, h.data.shape[1])[:, :, None]))
    mask = None if lens is None else _length_mask(lens, h.data.shape[1])
    for layer in range(cfg.recurrent_layers):
        T = h.data.shape[1]
        steps = [ad.slice_axis(h, 1, t, t + 1) for t in range(T)]
        fwd = _lstm_direction(model.shared[f"lstm{layer}_fwd_wx"],
                              model.shared[f"lstm{layer}_fwd_wh"],
                              model.shared[f"lstm{layer}_fwd_b"], steps, mask, False)
        bwd = _lstm_direction(model.shared[f"lstm{layer}_bwd_wx"],
                              model.shared[f"lstm{layer}_bwd_wh"],
                              model.shared[f"lstm{layer}_bwd_b"], steps, mask, True)
        h = ad.concat([ad.concat([fwd[t], bwd[t]], 2) for t in range(T)], 1)
    return h


def head_logits(model: Model, head_id: str, trunk: Tensor) -> Tensor:
    if head_id not in model.heads:
        raise ValueError(f"unknown head {head_id!r}")
    head = model.heads[head_id]
    return ad.add(ad.matmul(trunk, head["w"]), head["b"])


def forward_logprobs(model: Model, feats_batch: list[np.ndarray],
                     head_ids) -> tuple[dict[str, Tensor], np.ndarray]:
    """Batched forward to log-posteriors for one or more heads.

    Utterances are right-padded with zeros; LSTM masking keeps padded rows
    from contaminating valid ones. Returns ({head_id: (B, T', V) log-probs},
    per-utterance valid output lengths).
    """
    if not feats_batch:
        raise ValueError("empty batch")
    cfg = model.cfg
    if isinstance(head_ids, str):
        head_ids = [head_ids]
    for hid in head_ids:
        if hid not in model.heads:
            raise ValueError(f"unknown head {hid!r}")
    feats_batch = [np.asarray(f, dtype=np.float64) for f in feats_batch]
    for f in feats_batch:
        if f.ndim != 2 or f.shape[1] != cfg.input_dim:
            raise ValueError(
                f"features must be (T, {cfg.input_dim}), got {f.shape}")
    B = len(feats_batch)
    in_lens = np.array([f.shape[0] for f in feats_batch], dtype=np.int64)
    out_lens = np.array([cfg.output_length(int(n)) for n in in_lens], dtype=np.int64)
    if np.any(out_lens < 1):
        raise ValueError("an utterance is too short for the conv stack")
    x = np.zeros((B, int(in_lens.max()), cfg.input_dim))
    for i, f in enumerate(feats_batch):
        x[i, : f.shape[0]] = f
    trunk = _trunk(model, ad.constant(x), in_lens if B > 1 else None)
    return {hid: ad.log_softmax(head_logits(model, hid, trunk)) for hid in head_ids}, out_lens


def forward_posteriors(model: Model, feats: np.ndarray, head_id: str) -> np.ndarray:
    """Frame posteriors (T', V) for a single utterance."""
    feats = np.asarray(feats, dtype=np.float64)
    lps, _ = forward_logprobs(model, [feats], head_id)
    return np.exp(lps[head_id].data[0])


# -- integrity -----------------------------------------------------------

def collection_checksum(model: Model, collection_id: str) -> str:
    cols = model.collections()
    if collection_id not in cols:
        raise ValueError(f"unknown parameter collection {collection_id!r}")
    h = hashlib.sha256()
    for name in sorted(cols[collection_id]):
        p = cols[collection_id][name]
        h.update(name.encode())
        h.update(str(p.data.shape).encode())
        h.update(np.ascontiguousarray(p.data).tobytes())
    return h.hexdigest()


def model_checksum(model: Model) -> str:
    h = hashlib.sha256()
    for cid in sorted(model.collections()):
        h.update(cid.encode())
        h.update(collection_checksum(model, cid).encode())
    return h.hexdigest()


def audit_partition(model: Model) -> dict:
    """Verify every parameter sits in exactly one collection; report counts."""
    seen: dict[int, str] = {}
    counts: dict[str, int] = {}
    for cid, params in model.collections().items():
        counts[cid] = len(params)
        for name, p in params.items():
            if id(p) in seen:
                raise ValueError(
                    f"parameter {name!r} appears in both {seen[id(p)]!r} and {cid!r}")
            seen[id(p)] = cid
    total = sum(counts.values())
    if total != len(seen):
        raise ValueError("parameter partition is not exhaustive")
    return {"collections": counts, "total_params": total}


# -- checkpoint I/O --------------------------------------------------------

def save_checkpoint(model: Model, path) -> None:
    cols = model.collections()
    table = []
    payload = bytearray()
    for cid in sorted(cols):
        for name in sorted(cols[cid]):
            arr = np.ascontiguousarray(cols[cid][name].data, dtype="<f8")
            table.append({"collection": cid, "name": name, "shape": list(arr.shape)})
            payload += arr.tobytes()
    meta = {
        "config": model.cfg.to_json(),
        "heads": sorted(model.heads),
        "vocabs": {hid: v.to_json() for hid, v in model.vocabs.items()},
        "trainable": {cid: bool(model.trainable.get(cid, True)) for cid in cols},
        "params": table,
    }
    meta_bytes = json.dumps(meta, sort_keys=True).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(_MAGIC)
        fh.write(struct.pack("<II", _VERSION, len(meta_bytes)))
        fh.write(meta_bytes)
        fh.write(bytes(payload))


def load_checkpoint(path) -> Model:
    with open(path, "rb") as fh:
        blob = fh.read()
    if blob[:4] != _MAGIC:
        raise CheckpointError(f"{path}: bad magic bytes, not a checkpoint")
    if len(blob) < 12:
        raise CheckpointError(f"{path}: truncated header")
    version, meta_len = struct.unpack("<II", blob[4:12])
    if version != _VERSION:
        raise CheckpointError(f"{path}: format version {version}, expected {_VERSION}")
    if len(blob) < 12 + meta_len:
        raise CheckpointError(f"{path}: truncated metadata block")
    try:
        meta = json.loads(blob[12:12 + meta_len])
    except json.JSONDecodeError as e:
        raise CheckpointError(f"{path}: metadata is not valid JSON ({e})") from None
    expect = sum(int(np.prod(p["shape"])) for p in meta["params"]) * 8
    body = blob[12 + meta_len:]
    if len(body) != expect:
        raise CheckpointError(
            f"{path}: payload is {len(body)} bytes, parameter table needs {expect}")
    cfg = ModelConfig.from_json(meta["config"])
    vocabs = {hid: Vocab.from_json(v) for hid, v in meta["vocabs"].items()}
    model = Model(cfg=cfg, shared={}, heads={hid: {} for hid in meta["heads"]},
                  vocabs=vocabs, trainable={})
    off = 0
    for entry in meta["params"]:
        shape = tuple(entry["shape"])
        n = int(np.prod(shape)) * 8
        arr = np.frombuffer(body[off:off + n], dtype="<f8").reshape(shape).copy()
        off += n
        if entry["collection"] == SHARED:
            t = Tensor(arr, name=entry["name"], trainable=True)
            model.shared[entry["name"]] = t
        else:
            key = _head_key(entry["name"])
            t = Tensor(arr, name=f"head_{entry['collection']}_{key}", trainable=True)
            model.heads[entry["collection"]][key] = t
    for cid, flag in meta["trainable"].items():
        model.trainable[cid] = bool(flag)
    for hid in model.heads:
        if set(model.heads[hid]) != {"w", "b"}:
            raise CheckpointError(f"{path}: head {hid!r} parameter set incomplete")
        if hid not in model.vocabs:
            raise CheckpointError(f"{path}: head {hid!r} has no vocab block")
    return model


def _head_key(param_name: str) -> str:
    return "w" if param_name == "w" or param_name.endswith("_w") else "b"
