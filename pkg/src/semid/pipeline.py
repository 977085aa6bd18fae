"""Per-modality and modal-joint quantization into a semantic-ID bundle."""

from __future__ import annotations

import hashlib
import json
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import quantizers
from .data import DataFormatError, EmbeddingMatrix
from .parallel import get_threads
from .quantizers import Codebook, SemanticIdTable

STREAMS = ("textual", "audio", "joint")


@dataclass(frozen=True)
class QuantizeConfig:
    method: str = "PSRQ"
    k: int = 64
    l: int = 3
    M: int = 4
    seed: int = 0
    normalize: bool = True
    max_iters: int = 100
    tol: float = 1e-6

    def stream_seed(self, stream: str) -> int:
        # one seed for every stream keeps a single-modality joint stream
        # identical to the modality it copies
        return self.seed


def config_hash(obj) -> str:
    """SHA-256 of the canonical (sorted-key) JSON encoding of ``obj``."""
    blob = json.dumps(obj, sort_keys=True, separators=(",", ":"), default=str)
    return hashlib.sha256(blob.encode("utf-8")).hexdigest()


@dataclass
class SemanticBundle:
    tables: dict[str, SemanticIdTable]
    codebooks: dict[str, Codebook]
    config: QuantizeConfig
    missing_items: list[int] = field(default_factory=list)

    @property
    def streams(self) -> tuple[str, ...]:
        return tuple(s for s in STREAMS if s in self.tables)

    @property
    def item_ids(self) -> np.ndarray:
        return next(iter(self.tables.values())).item_ids

    @property
    def hash(self) -> str:
        return config_hash(asdict(self.config))


def _l2_rows(v: np.ndarray) -> np.ndarray:
    norm = np.linalg.norm(v, axis=1, keepdims=True)
    return np.divide(v, norm, out=np.zeros_like(v), where=norm > 0)


def build_joint(*mats: EmbeddingMatrix, normalize: bool = True) -> EmbeddingMatrix:
    """Row-wise concatenation of modality matrices, in the first matrix's item order.

    With ``normalize`` every modality row is scaled to unit L2 norm first, so
    no modality dominates by scale. A single matrix is returned unchanged
    (relabelled as ``joint``).
    """
    if not mats:
        raise ValueError("need at least one modality")
    ref = mats[0]
    if len(mats) == 1:
        return EmbeddingMatrix("joint", ref.item_ids, ref.values)
    ref_set = set(ref.item_ids.tolist())
    parts = []
    for m in mats:
        if set(m.item_ids.tolist()) != ref_set:
            raise DataFormatError(
                "item_set_mismatch", f"{m.modality} items differ from {ref.modality} items"
            )
        v = m.reorder(ref.item_ids).values.astype(np.float64)
        parts.append(_l2_rows(v) if normalize else v)
    return EmbeddingMatrix("joint", ref.item_ids, np.hstack(parts))


def _quantize(x: EmbeddingMatrix, cfg: QuantizeConfig, stream: str) -> tuple[Codebook, SemanticIdTable]:
    cb = quantizers.fit(
        cfg.method, x, cfg.k, cfg.l, cfg.stream_seed(stream), cfg.M,
        max_iters=cfg.max_iters, tol=cfg.tol,
    )
    return cb, quantizers.assign(x, cb)


def quantize_all(
    Xt: EmbeddingMatrix,
    Xa: EmbeddingMatrix | None = None,
    config: QuantizeConfig = QuantizeConfig(),
    streams: tuple[str, ...] = STREAMS,
) -> SemanticBundle:
    """Fit and assign one codebook per stream.

    ``streams`` restricts which of textual/audio/joint are produced; audio is
    skipped when ``Xa`` is None. The stream fits run concurrently when more
    than one thread is configured; each is deterministic on its own.
    """
    mats: dict[str, EmbeddingMatrix] = {}
    if "textual" in streams:
        mats["textual"] = Xt
    if Xa is not None:
        if set(Xa.item_ids.tolist()) != set(Xt.item_ids.tolist()):
            raise DataFormatError("item_set_mismatch", "audio items differ from textual items")
        Xa = Xa.reorder(Xt.item_ids)
        if "audio" in streams:
            mats["audio"] = Xa
    if "joint" in streams:
        mats["joint"] = build_joint(Xt, *([Xa] if Xa is not None else []), normalize=config.normalize)

    names = list(mats)
    if get_threads() > 1 and len(names) > 1:
        with ThreadPoolExecutor(max_workers=min(get_threads(), len(names))) as ex:
            results = list(ex.map(lambda s: _quantize(mats[s], config, s), names))
    else:
        results = [_quantize(mats[s], config, s) for s in names]
    return SemanticBundle(
        tables={s: r[1] for s, r in zip(names, results)},
        codebooks={s: r[0] for s, r in zip(names, results)},
        config=config,
    )


def save_bundle(bundle: SemanticBundle, out_dir: str | Path) -> Path:
    """Write codebooks, tables and ``manifest.json``; returns the manifest path.

    File names carry the first 12 hex digits of the quantizer config hash.
    """
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    h = bundle.hash
    streams = {}
    for s in bundle.streams:
        cb_name, tb_name = f"{s}-{h[:12]}.scbk", f"{s}-{h[:12]}.tsv"
        quantizers.save_codebook(bundle.codebooks[s], out / cb_name)
        quantizers.save_table(bundle.tables[s], out / tb_name)
        cfg = bundle.config
        streams[s] = {
            "codebook": cb_name,
            "table": tb_name,
            "method": bundle.codebooks[s].method,
            "k": cfg.k,
            "l": bundle.codebooks[s].n_layers,
            "seed": cfg.stream_seed(s),
        }
    manifest = {
        "config": asdict(bundle.config),
        "config_hash": h,
        "normalize": bundle.config.normalize,
        "streams": streams,
        "missing_items": sorted(int(i) for i in bundle.missing_items),
    }
    path = out / "manifest.json"
    path.write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    return path


def load_bundle(manifest_path: str | Path) -> SemanticBundle:
    path = Path(manifest_path)
    manifest = json.loads(path.read_text(encoding="utf-8"))
    tables, codebooks = {}, {}
    for s, entry in manifest["streams"].items():
        codebooks[s] = quantizers.load_codebook(path.parent / entry["codebook"])
        tables[s] = quantizers.load_table(path.parent / entry["table"])
    return SemanticBundle(
        tables, codebooks, QuantizeConfig(**manifest["config"]), manifest.get("missing_items", [])
    )
