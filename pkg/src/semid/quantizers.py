"""K-means based quantizers that map embeddings to layered semantic IDs.

Four methods share one :class:`Codebook` container:

* ``VQ``   one K-means codebook over the full vector.
* ``PQ``   independent codebooks over ``M`` contiguous segments.
* ``RQ``   each layer clusters the residual left by the previous layers.
* ``PSRQ`` like RQ, but layers >= 2 cluster ``[residual, prefix]`` where the
  prefix is the cumulative reconstruction so far. Centroids at those layers
  have width ``2d``; only their first ``d`` coordinates are subtracted from
  the residual.

Centroids are rounded to float32 as soon as they are fitted, and all codes
and residuals are computed from the rounded values, so a codebook written to
disk and read back assigns exactly the same codes.
"""

from __future__ import annotations

import hashlib
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .data import DataFormatError, EmbeddingMatrix
from .kmeans import Centroids, kmeans_fit, nearest

METHODS = ("VQ", "PQ", "RQ", "PSRQ")
CB_MAGIC = b"SCBK"
CB_VERSION = 1


@dataclass(frozen=True)
class Codebook:
    method: str
    k: int
    input_dim: int
    layers: tuple[Centroids, ...]

    @property
    def n_layers(self) -> int:
        return len(self.layers)

    @property
    def layer_dims(self) -> tuple[int, ...]:
        return tuple(c.dim for c in self.layers)

    def validate(self) -> None:
        d, dims = self.input_dim, self.layer_dims
        if self.method not in METHODS:
            raise ValueError(f"unknown method {self.method!r}")
        if self.method in ("VQ", "RQ") and any(x != d for x in dims):
            raise ValueError(f"{self.method} layers must all have dim {d}")
        if self.method == "VQ" and len(dims) != 1:
            raise ValueError("VQ has exactly one layer")
        if self.method == "PSRQ" and (dims[0] != d or any(x != 2 * d for x in dims[1:])):
            raise ValueError("PSRQ layer 1 must have dim d and later layers 2d")
        if self.method == "PQ" and (sum(dims) != d or len(set(dims)) != 1):
            raise ValueError("PQ segments must split d evenly")
        if any(c.k != self.k for c in self.layers):
            raise ValueError("every layer must have k centroids")


@dataclass(frozen=True)
class SemanticIdTable:
    method: str
    item_ids: np.ndarray
    codes: np.ndarray  # (n_items, n_layers) int64

    def __len__(self) -> int:
        return int(self.item_ids.shape[0])

    def as_dict(self) -> dict[int, tuple[int, ...]]:
        return {int(i): tuple(int(c) for c in row) for i, row in zip(self.item_ids, self.codes)}


def _freeze(c: Centroids) -> np.ndarray:
    return c.values.astype(np.float32).astype(np.float64)


def _fit_layer(points: np.ndarray, k: int, seed: int, max_iters: int, tol: float) -> tuple[Centroids, np.ndarray]:
    values = _freeze(kmeans_fit(points, k, seed=seed, max_iters=max_iters, tol=tol))
    codes, d2 = nearest(points, values)
    return Centroids(values, float(d2.sum())), codes


def _x(X: EmbeddingMatrix | np.ndarray) -> np.ndarray:
    vals = X.values if isinstance(X, EmbeddingMatrix) else X
    return np.asarray(vals, dtype=np.float64)


def _ids(X) -> np.ndarray:
    if isinstance(X, EmbeddingMatrix):
        return X.item_ids
    return np.arange(np.asarray(X).shape[0], dtype=np.int64)


def vq_fit(X, k: int, seed: int = 0, *, max_iters: int = 100, tol: float = 1e-6) -> Codebook:
    x = _x(X)
    layer, _ = _fit_layer(x, k, seed, max_iters, tol)
    return Codebook("VQ", k, x.shape[1], (layer,))


def pq_fit(X, k: int, M: int = 4, seed: int = 0, *, max_iters: int = 100, tol: float = 1e-6) -> Codebook:
    x = _x(X)
    d = x.shape[1]
    if M < 1 or d % M:
        raise ValueError(f"invalid segmentation: dim {d} is not divisible by M={M}")
    w = d // M
    layers = tuple(
        _fit_layer(x[:, m * w:(m + 1) * w], k, seed + m, max_iters, tol)[0] for m in range(M)
    )
    return Codebook("PQ", k, d, layers)


def rq_fit(X, k: int, l: int = 3, seed: int = 0, *, max_iters: int = 100, tol: float = 1e-6) -> Codebook:
    if l < 1:
        raise ValueError("l must be >= 1")
    residual = _x(X).copy()
    layers = []
    for j in range(l):
        layer, codes = _fit_layer(residual, k, seed + j, max_iters, tol)
        residual = residual - layer.values[codes]
        layers.append(layer)
    return Codebook("RQ", k, residual.shape[1], tuple(layers))


def psrq_fit(X, k: int, l: int = 3, seed: int = 0, *, max_iters: int = 100, tol: float = 1e-6) -> Codebook:
    if l < 1:
        raise ValueError("l must be >= 1")
    x = _x(X)
    d = x.shape[1]
    layer, codes = _fit_layer(x, k, seed, max_iters, tol)
    residual = x - layer.values[codes]
    layers = [layer]
    for j in range(1, l):
        query = np.hstack([residual, x - residual])
        layer, codes = _fit_layer(query, k, seed + j, max_iters, tol)
        residual = residual - layer.values[codes, :d]
        layers.append(layer)
    return Codebook("PSRQ", k, d, tuple(layers))


def fit(method: str, X, k: int, l: int = 3, seed: int = 0, M: int = 4, **kw) -> Codebook:
    """Dispatch on ``method``; ``l`` is ignored by VQ and PQ (PQ uses ``M``)."""
    if method == "VQ":
        return vq_fit(X, k, seed, **kw)
    if method == "PQ":
        return pq_fit(X, k, M, seed, **kw)
    if method == "RQ":
        return rq_fit(X, k, l, seed, **kw)
    if method == "PSRQ":
        return psrq_fit(X, k, l, seed, **kw)
    raise ValueError(f"unknown method {method!r}")


def _encode(x: np.ndarray, cb: Codebook, n_layers: int | None = None) -> tuple[np.ndarray, np.ndarray]:
    """Codes and final residual of ``x`` using the first ``n_layers`` layers."""
    if x.shape[1] != cb.input_dim:
        raise ValueError(f"dimension mismatch: input dim {x.shape[1]}, codebook expects {cb.input_dim}")
    layers = cb.layers[: cb.n_layers if n_layers is None else n_layers]
    d = cb.input_dim
    codes = np.zeros((x.shape[0], len(layers)), dtype=np.int64)
    if cb.method == "PQ":
        recon = np.zeros_like(x)
        w = cb.layers[0].dim
        for m, layer in enumerate(layers):
            seg = slice(m * w, (m + 1) * w)
            codes[:, m] = nearest(x[:, seg], layer.values)[0]
            recon[:, seg] = layer.values[codes[:, m]]
        return codes, x - recon
    residual = x.copy()
    for j, layer in enumerate(layers):
        if cb.method == "PSRQ" and j > 0:
            codes[:, j] = nearest(np.hstack([residual, x - residual]), layer.values)[0]
            residual = residual - layer.values[codes[:, j], :d]
        else:
            codes[:, j] = nearest(residual, layer.values)[0]
            residual = residual - layer.values[codes[:, j]]
    return codes, residual


def assign(X, cb: Codebook) -> SemanticIdTable:
    """Replay the fit-time recursion with frozen centroids.

    Works for any items, including ones not seen during fitting.
    """
    codes, _ = _encode(_x(X), cb)
    return SemanticIdTable(cb.method, _ids(X).copy(), codes)


def reconstruct(codes: SemanticIdTable, cb: Codebook) -> np.ndarray:
    c = np.asarray(codes.codes)
    if c.shape[1] != cb.n_layers:
        raise ValueError(f"expected {cb.n_layers} codes per item, got {c.shape[1]}")
    if c.size and (c.min() < 0 or c.max() >= cb.k):
        raise ValueError(f"code out of range [0, {cb.k})")
    d = cb.input_dim
    if cb.method == "PQ":
        out = np.hstack([layer.values[c[:, m]] for m, layer in enumerate(cb.layers)])
    else:
        out = np.zeros((c.shape[0], d))
        for j, layer in enumerate(cb.layers):
            out += layer.values[c[:, j], :d]
    return out


def recon_error(X, cb: Codebook) -> list[float]:
    """Mean squared reconstruction error (per-item squared norm) after each layer.

    For PQ, segments beyond the current one count as unreconstructed.
    """
    x = _x(X)
    errs = []
    for j in range(1, cb.n_layers + 1):
        _, residual = _encode(x, cb, j)
        errs.append(float((residual ** 2).sum(axis=1).mean()))
    return errs


# -- file formats -----------------------------------------------------------

_CB_HEADER = struct.Struct("<4sIBIII")


def codebook_bytes(cb: Codebook) -> bytes:
    cb.validate()
    payload = bytearray(
        _CB_HEADER.pack(CB_MAGIC, CB_VERSION, METHODS.index(cb.method), cb.k, cb.n_layers, cb.input_dim)
    )
    payload += struct.pack(f"<{cb.n_layers}I", *cb.layer_dims)
    for layer in cb.layers:
        payload += layer.values.astype("<f4").tobytes()
    return bytes(payload) + hashlib.sha256(payload).digest()


def save_codebook(cb: Codebook, path: str | Path) -> None:
    Path(path).write_bytes(codebook_bytes(cb))


def load_codebook(path: str | Path) -> Codebook:
    raw = Path(path).read_bytes()
    if len(raw) < _CB_HEADER.size + 32:
        raise DataFormatError("bad_header", "codebook file too short")
    payload, digest = raw[:-32], raw[-32:]
    if hashlib.sha256(payload).digest() != digest:
        raise DataFormatError("checksum", "codebook checksum mismatch")
    magic, version, method, k, l, d = _CB_HEADER.unpack_from(payload)
    if magic != CB_MAGIC or version != CB_VERSION or method >= len(METHODS):
        raise DataFormatError("bad_header", "not a codebook file")
    off = _CB_HEADER.size
    dims = struct.unpack_from(f"<{l}I", payload, off)
    off += 4 * l
    layers = []
    for dim in dims:
        vals = np.frombuffer(payload, dtype="<f4", count=k * dim, offset=off).reshape(k, dim)
        off += 4 * k * dim
        layers.append(Centroids(vals.astype(np.float64), None))
    if off != len(payload):
        raise DataFormatError("bad_payload", "codebook payload size mismatch")
    cb = Codebook(METHODS[method], k, d, tuple(layers))
    cb.validate()
    return cb


def save_table(table: SemanticIdTable, path: str | Path) -> None:
    n_layers = table.codes.shape[1]
    with open(path, "w", encoding="utf-8", newline="\n") as f:
        f.write(f"# method={table.method}\n")
        f.write("item_id\t" + "\t".join(f"code_{j + 1}" for j in range(n_layers)) + "\n")
        for i, row in zip(table.item_ids, table.codes):
            f.write(f"{int(i)}\t" + "\t".join(str(int(c)) for c in row) + "\n")


def load_table(path: str | Path) -> SemanticIdTable:
    method, ids, rows = "unknown", [], []
    with open(path, encoding="utf-8") as f:
        for line in f:
            line = line.rstrip("\n")
            if line.startswith("# method="):
                method = line.split("=", 1)[1]
            elif line.startswith("item_id") or not line:
                continue
            else:
                parts = [int(p) for p in line.split("\t")]
                ids.append(parts[0])
                rows.append(parts[1:])
    codes = np.asarray(rows, dtype=np.int64).reshape(len(ids), -1)
    return SemanticIdTable(method, np.asarray(ids, dtype=np.int64), codes)
