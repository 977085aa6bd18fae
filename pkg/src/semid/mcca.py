"""Multi-codebook cross-attention ranking model (numpy forward pass).

Every history item is represented in several streams:

* semantic streams (``textual``, ``audio``, ``joint``): the sum over layers of
  per-layer code embeddings,
* the collaborative stream (``item``): a plain item-ID embedding.

Each stream's sequence is pooled by an unnormalised feed-forward attention
scorer applied to ``[e_j, q]``. In the full model the query for every
semantic stream is the target's joint embedding; the item stream uses the
target's ID embedding. The pooled vectors, the target ID embedding and the
target joint embedding are concatenated and fed to a ReLU MLP.

Layout variants (``ModelConfig.variant``):

========  ===================  ============  ==============
variant   history streams      query         target extras
========  ===================  ============  ==============
mcca      textual,audio,joint  joint         joint
wo_msc    joint                joint         joint
wo_mjc    textual,audio        own stream    none
din_sid   textual              own stream    textual
id_only   none                 n/a           none
========  ===================  ============  ==============

Padding occupies leading history positions and is masked to exactly zero
weight; padded positions look up row 0 of the item table and code 0 of each
semantic table.
"""

from __future__ import annotations

import hashlib
import json
import struct
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np
from scipy.special import expit

from .data import DataFormatError, Sample

VARIANTS = ("mcca", "wo_msc", "wo_mjc", "din_sid", "id_only")
ABLATIONS = {"none": "mcca", "w/o MSC": "wo_msc", "w/o MJC": "wo_mjc"}
MP_MAGIC = b"SMCP"
MP_VERSION = 1


@dataclass(frozen=True)
class ModelConfig:
    dim: int = 64
    max_len: int = 20
    hidden: int = 32
    mlp: tuple[int, ...] = (128, 64)
    variant: str = "mcca"
    # (stream, k, n_layers) for every semantic stream the bundle provides
    codebooks: tuple[tuple[str, int, int], ...] = ()

    def __post_init__(self):
        if self.variant not in VARIANTS:
            raise ValueError(f"unknown variant {self.variant!r}")
        object.__setattr__(self, "mlp", tuple(self.mlp))
        object.__setattr__(self, "codebooks", tuple(tuple(c) for c in self.codebooks))
        have = {c[0] for c in self.codebooks}
        need = set(self.history_streams) | set(self.target_streams)
        if self.query_mode == "joint":
            need.add("joint")
        if not need <= have:
            raise ValueError(f"variant {self.variant} needs streams {sorted(need - have)}")

    @property
    def available(self) -> tuple[str, ...]:
        return tuple(c[0] for c in self.codebooks)

    @property
    def history_streams(self) -> tuple[str, ...]:
        specific = tuple(s for s in ("textual", "audio") if s in self.available)
        return {
            "mcca": specific + ("joint",),
            "wo_msc": ("joint",),
            "wo_mjc": specific,
            "din_sid": ("textual",),
            "id_only": (),
        }[self.variant]

    @property
    def query_mode(self) -> str:
        return "joint" if self.variant in ("mcca", "wo_msc") else "own"

    @property
    def target_streams(self) -> tuple[str, ...]:
        return {"mcca": ("joint",), "wo_msc": ("joint",), "din_sid": ("textual",)}.get(self.variant, ())

    @property
    def table_streams(self) -> tuple[str, ...]:
        used = set(self.history_streams) | set(self.target_streams)
        if self.query_mode == "joint" and self.history_streams:
            used.add("joint")
        return tuple(s for s in self.available if s in used)

    @property
    def head_input(self) -> int:
        return self.dim * (len(self.history_streams) + 2 + len(self.target_streams))

    def layers_of(self, stream: str) -> tuple[int, int]:
        for s, k, l in self.codebooks:
            if s == stream:
                return k, l
        raise KeyError(stream)


@dataclass
class ModelParams:
    config: ModelConfig
    item_ids: np.ndarray  # item_ids[r] owns row r + 1 of the item table
    tensors: dict[str, np.ndarray] = field(default_factory=dict)

    def copy(self) -> "ModelParams":
        return ModelParams(self.config, self.item_ids.copy(), {k: v.copy() for k, v in self.tensors.items()})

    def zeros_like(self) -> dict[str, np.ndarray]:
        return {k: np.zeros_like(v) for k, v in self.tensors.items()}


def param_shapes(cfg: ModelConfig, n_items: int) -> dict[str, tuple[int, ...]]:
    """Tensor names and shapes in declaration order."""
    d, H = cfg.dim, cfg.hidden
    shapes: dict[str, tuple[int, ...]] = {}
    for s in cfg.table_streams:
        k, l = cfg.layers_of(s)
        for j in range(l):
            shapes[f"sid.{s}.{j}"] = (k, d)
    shapes["item"] = (n_items + 1, d)
    for s in cfg.history_streams + ("item",):
        shapes[f"att.{s}.w1"] = (2 * d, H)
        shapes[f"att.{s}.b1"] = (H,)
        shapes[f"att.{s}.w2"] = (H,)
        shapes[f"att.{s}.b2"] = (1,)
    widths = (cfg.head_input,) + cfg.mlp + (1,)
    for i, (a, b) in enumerate(zip(widths, widths[1:]), 1):
        shapes[f"mlp.w{i}"] = (a, b)
        shapes[f"mlp.b{i}"] = (b,)
    return shapes


def init_params(cfg: ModelConfig, item_ids: Sequence[int], seed: int = 0) -> ModelParams:
    """Embeddings ~ U(-0.01, 0.01); dense weights Glorot-uniform; biases zero.

    Values are rounded to float32 so a checkpoint round trip is exact.
    """
    rng = np.random.default_rng(seed)
    ids = np.asarray(sorted(int(i) for i in item_ids), dtype=np.int64)
    tensors = {}
    for name, shape in param_shapes(cfg, len(ids)).items():
        if name.startswith("sid.") or name == "item":
            v = rng.uniform(-0.01, 0.01, shape)
        elif name.rsplit(".", 1)[1].startswith("b"):
            v = np.zeros(shape)
        else:
            fan_in, fan_out = shape[0], (shape[1] if len(shape) > 1 else 1)
            lim = np.sqrt(6.0 / (fan_in + fan_out))
            v = rng.uniform(-lim, lim, shape)
        tensors[name] = v.astype(np.float32).astype(np.float64)
    tensors["item"][0] = 0.0
    return ModelParams(cfg, ids, tensors)


class ItemIndex:
    """Maps item ids to item-table rows and per-stream code rows.

    Row 0 is padding everywhere; its codes are all zero.
    """

    def __init__(self, item_ids: np.ndarray, tables: dict):
        self.item_ids = np.asarray(item_ids, dtype=np.int64)
        self.row = {int(i): r + 1 for r, i in enumerate(self.item_ids)}
        self.codes: dict[str, np.ndarray] = {}
        for stream, table in tables.items():
            lookup = table.as_dict() if hasattr(table, "as_dict") else table
            n_layers = len(next(iter(lookup.values())))
            arr = np.zeros((len(self.item_ids) + 1, n_layers), dtype=np.int64)
            for i, r in self.row.items():
                if i in lookup:
                    arr[r] = lookup[i]
                else:
                    arr[r] = -1  # flagged, rejected on use
            self.codes[stream] = arr

    @classmethod
    def from_bundle(cls, params: ModelParams, bundle) -> "ItemIndex":
        return cls(params.item_ids, {s: bundle.tables[s] for s in params.config.table_streams})

    def rows_of(self, items: Sequence[int]) -> list[int]:
        out = []
        for i in items:
            r = self.row.get(int(i))
            if r is None:
                raise DataFormatError("missing_item", f"item {i} is not in the model vocabulary")
            out.append(r)
        return out

    def check_codes(self, rows: np.ndarray) -> None:
        for s, arr in self.codes.items():
            bad = rows[(arr[rows] < 0).any(axis=-1)]
            if bad.size:
                item = int(self.item_ids[int(bad.flat[0]) - 1])
                raise DataFormatError("missing_codes", f"item {item} has no {s} semantic IDs")


@dataclass
class Batch:
    rows: np.ndarray  # (B, L) item rows, 0 = padding (leading)
    mask: np.ndarray  # (B, L) 1.0 for real history positions
    target: np.ndarray  # (B,) item rows
    labels: np.ndarray  # (B,) float

    def __len__(self) -> int:
        return int(self.target.shape[0])

    def take(self, idx) -> "Batch":
        return Batch(self.rows[idx], self.mask[idx], self.target[idx], self.labels[idx])


def encode_samples(samples: Sequence[Sample], index: ItemIndex, max_len: int) -> Batch:
    B = len(samples)
    rows = np.zeros((B, max_len), dtype=np.int64)
    mask = np.zeros((B, max_len))
    target = np.asarray(index.rows_of([s.target_item for s in samples]), dtype=np.int64)
    for b, s in enumerate(samples):
        hist = s.history[-max_len:]
        if hist:
            rows[b, max_len - len(hist):] = index.rows_of(hist)
            mask[b, max_len - len(hist):] = 1.0
    labels = np.asarray([s.label for s in samples], dtype=np.float64)
    index.check_codes(np.concatenate([rows[mask > 0], target]))
    return Batch(rows, mask, target, labels)


# -- forward -----------------------------------------------------------------

def relu(x):
    return np.maximum(x, 0.0)


def embed_codes(codes: np.ndarray, tables: Sequence[np.ndarray]) -> np.ndarray:
    """Sum over layers of ``tables[j][codes[..., j]]``."""
    if codes.shape[-1] != len(tables):
        raise ValueError(f"expected {len(tables)} codes, got {codes.shape[-1]}")
    out = tables[0][codes[..., 0]]
    for j in range(1, len(tables)):
        out = out + tables[j][codes[..., j]]
    return out


def embed_item(codes: Sequence[int], tables: Sequence[np.ndarray]) -> np.ndarray:
    c = np.asarray(codes, dtype=np.int64)
    for j, t in enumerate(tables):
        if not 0 <= c[j] < t.shape[0]:
            raise ValueError(f"code {c[j]} out of range at layer {j}")
    return embed_codes(c, tables)


def attention_score(e, q, net: dict[str, np.ndarray]):
    """Unnormalised weight ``w2 . relu(W1 [e, q] + b1) + b2`` (broadcasts over leading dims)."""
    x = np.concatenate([e, np.broadcast_to(q, np.shape(e))], axis=-1)
    return relu(x @ net["w1"] + net["b1"]) @ net["w2"] + net["b2"][0]


def interest_vector(seq, history_len: int, q, net) -> np.ndarray:
    """Attention-weighted sum over the last ``history_len`` of ``seq`` (leading padding)."""
    seq = np.asarray(seq, dtype=np.float64)
    L = seq.shape[0]
    mask = (np.arange(L) >= L - history_len).astype(np.float64)
    s = attention_score(seq, q, net) * mask
    return s @ seq


def _net(params: ModelParams, stream: str) -> dict[str, np.ndarray]:
    t = params.tensors
    return {n: t[f"att.{stream}.{n}"] for n in ("w1", "b1", "w2", "b2")}


def _attend(seq, q, mask, net):
    B, L, d = seq.shape
    x = np.concatenate([seq, np.broadcast_to(q[:, None, :], (B, L, d))], axis=-1)
    a = x @ net["w1"] + net["b1"]
    r = relu(a)
    s = r @ net["w2"] + net["b2"][0]
    w = s * mask
    h = np.einsum("bl,bld->bd", w, seq)
    return h, {"x": x, "a": a, "r": r, "s": s, "w": w}


def forward_batch(batch: Batch, params: ModelParams, index: ItemIndex) -> tuple[np.ndarray, dict]:
    """Logits for a batch plus the trace needed by :func:`trainer.backward`."""
    cfg, t = params.config, params.tensors
    tr: dict = {"seq": {}, "tgt": {}, "att": {}, "h": {}}

    def tables(s):
        return [t[f"sid.{s}.{j}"] for j in range(cfg.layers_of(s)[1])]

    for s in cfg.table_streams:
        codes = index.codes[s]
        tr["tgt"][s] = embed_codes(codes[batch.target], tables(s))
        if s in cfg.history_streams:
            tr["seq"][s] = embed_codes(codes[batch.rows], tables(s))

    parts = []
    for s in cfg.history_streams:
        q = tr["tgt"]["joint"] if cfg.query_mode == "joint" else tr["tgt"][s]
        h, cache = _attend(tr["seq"][s], q, batch.mask, _net(params, s))
        tr["att"][s], tr["h"][s] = cache, h
        parts.append(h)

    seq_r = t["item"][batch.rows]
    tgt_r = t["item"][batch.target]
    h_r, cache = _attend(seq_r, tgt_r, batch.mask, _net(params, "item"))
    tr["seq"]["item"], tr["tgt"]["item"] = seq_r, tgt_r
    tr["att"]["item"], tr["h"]["item"] = cache, h_r
    parts += [h_r, tgt_r] + [tr["tgt"][s] for s in cfg.target_streams]

    z = np.concatenate(parts, axis=1)
    acts = [z]
    pre = []
    n_dense = len(cfg.mlp) + 1
    for i in range(1, n_dense + 1):
        a = acts[-1] @ t[f"mlp.w{i}"] + t[f"mlp.b{i}"]
        pre.append(a)
        if i < n_dense:
            acts.append(relu(a))
    logits = pre[-1][:, 0]
    tr.update(batch=batch, acts=acts, pre=pre, logits=logits)
    return logits, tr


def forward(sample: Sample, bundle, params: ModelParams, index: ItemIndex | None = None) -> tuple[float, dict]:
    """Single-sample forward pass; ``bundle`` supplies the semantic IDs."""
    index = index or ItemIndex.from_bundle(params, bundle)
    batch = encode_samples([sample], index, params.config.max_len)
    logits, trace = forward_batch(batch, params, index)
    return float(logits[0]), trace


def predict(params: ModelParams, batch: Batch, index: ItemIndex, chunk: int = 2048) -> np.ndarray:
    from .parallel import map_chunks

    parts = map_chunks(
        lambda s, e: forward_batch(batch.take(slice(s, e)), params, index)[0], len(batch), chunk
    )
    return np.concatenate(parts) if parts else np.zeros(0)


def sigmoid(x):
    return expit(x)


# -- checkpoint --------------------------------------------------------------

def checkpoint_bytes(params: ModelParams) -> bytes:
    cfg = asdict(params.config)
    block = json.dumps(
        {"config": cfg, "item_ids": [int(i) for i in params.item_ids]},
        sort_keys=True, separators=(",", ":"),
    ).encode("utf-8")
    out = bytearray(MP_MAGIC + struct.pack("<II", MP_VERSION, len(block)) + block)
    out += struct.pack("<I", len(params.tensors))
    for name, v in params.tensors.items():
        nb = name.encode("utf-8")
        out += struct.pack("<H", len(nb)) + nb + struct.pack("<B", v.ndim)
        out += struct.pack(f"<{v.ndim}I", *v.shape)
        out += v.astype("<f4").tobytes()
    return bytes(out) + hashlib.sha256(out).digest()


def save_params(params: ModelParams, path: str | Path) -> None:
    Path(path).write_bytes(checkpoint_bytes(params))


def load_params(path: str | Path) -> ModelParams:
    raw = Path(path).read_bytes()
    payload, digest = raw[:-32], raw[-32:]
    if len(raw) < 44 or hashlib.sha256(payload).digest() != digest:
        raise DataFormatError("checksum", "checkpoint checksum mismatch")
    if payload[:4] != MP_MAGIC:
        raise DataFormatError("bad_header", "not a checkpoint file")
    version, n = struct.unpack_from("<II", payload, 4)
    if version != MP_VERSION:
        raise DataFormatError("bad_header", f"unsupported checkpoint version {version}")
    off = 12
    meta = json.loads(payload[off:off + n].decode("utf-8"))
    off += n
    (count,) = struct.unpack_from("<I", payload, off)
    off += 4
    tensors = {}
    for _ in range(count):
        (ln,) = struct.unpack_from("<H", payload, off)
        name = payload[off + 2:off + 2 + ln].decode("utf-8")
        off += 2 + ln
        (ndim,) = struct.unpack_from("<B", payload, off)
        shape = struct.unpack_from(f"<{ndim}I", payload, off + 1)
        off += 1 + 4 * ndim
        size = int(np.prod(shape))
        tensors[name] = np.frombuffer(payload, "<f4", size, off).reshape(shape).astype(np.float64)
        off += 4 * size
    cfg = meta["config"]
    cfg["mlp"] = tuple(cfg["mlp"])
    cfg["codebooks"] = tuple(tuple(c) for c in cfg["codebooks"])
    return ModelParams(ModelConfig(**cfg), np.asarray(meta["item_ids"], dtype=np.int64), tensors)
