"""Named method variants for the comparison tables, and helpers to run them.

==========  ===========================================  =========
row         semantic IDs                                 model
==========  ===========================================  =========
ID-only     none                                         id_only
+PQ/+VQ/..  textual stream only, quantized by that method din_sid
PSRQ+MCCA   PSRQ on textual, audio and joint              mcca
w/o MSC     same bundle                                   wo_msc
w/o MJC     same bundle                                   wo_mjc
==========  ===========================================  =========
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace

from .data import EmbeddingMatrix, InteractionDataset, build_samples, cold_items_among
from .mcca import ItemIndex, ModelConfig, ModelParams, encode_samples, init_params
from .metrics import REPORT_ROWS, Metrics, evaluate
from .pipeline import QuantizeConfig, SemanticBundle, quantize_all
from .trainer import TrainConfig, train

VARIANT_SPECS: dict[str, tuple[str | None, tuple[str, ...], str]] = {
    # row: (quantizer method, streams, model variant)
    "ID-only": (None, (), "id_only"),
    "+PQ": ("PQ", ("textual",), "din_sid"),
    "+VQ": ("VQ", ("textual",), "din_sid"),
    "+RQ": ("RQ", ("textual",), "din_sid"),
    "+PSRQ": ("PSRQ", ("textual",), "din_sid"),
    "PSRQ+MCCA": ("PSRQ", ("textual", "audio", "joint"), "mcca"),
    "w/o MSC": ("PSRQ", ("textual", "audio", "joint"), "wo_msc"),
    "w/o MJC": ("PSRQ", ("textual", "audio", "joint"), "wo_mjc"),
}


@dataclass(frozen=True)
class ModelSettings:
    dim: int = 64
    max_len: int = 20
    hidden: int = 32
    mlp: tuple[int, ...] = (128, 64)


@dataclass(frozen=True)
class ExperimentConfig:
    quantize: QuantizeConfig = QuantizeConfig()
    model: ModelSettings = ModelSettings()
    train: TrainConfig = TrainConfig()
    cold_threshold: int = 30
    model_seed: int = 0


def model_config(bundle: SemanticBundle | None, settings: ModelSettings, variant: str) -> ModelConfig:
    cbs = ()
    if bundle is not None:
        cbs = tuple((s, bundle.codebooks[s].k, bundle.codebooks[s].n_layers) for s in bundle.streams)
    return ModelConfig(settings.dim, settings.max_len, settings.hidden, settings.mlp, variant, cbs)


def make_index(params: ModelParams, bundle: SemanticBundle | None) -> ItemIndex:
    if bundle is None:
        return ItemIndex(params.item_ids, {})
    return ItemIndex.from_bundle(params, bundle)


@dataclass
class Prepared:
    """Samples and catalogue shared by every variant of one sweep."""

    Xt: EmbeddingMatrix
    Xa: EmbeddingMatrix | None
    train_samples: list
    test_samples: list
    cold_items: set[int]
    bundles: dict = field(default_factory=dict)

    def bundle(self, method: str | None, streams: tuple[str, ...], qcfg: QuantizeConfig):
        if method is None:
            return None
        key = (method, streams)
        if key not in self.bundles:
            self.bundles[key] = quantize_all(
                self.Xt, self.Xa if "audio" in streams or "joint" in streams else None,
                replace(qcfg, method=method), streams=streams,
            )
        return self.bundles[key]


def prepare(Xt, Xa, train_ds: InteractionDataset, test_ds: InteractionDataset,
            max_len: int, cold_threshold: int) -> Prepared:
    catalog = set(Xt.item_ids.tolist())
    keep = lambda s: s.target_item in catalog and all(i in catalog for i in s.history)  # noqa: E731
    train_samples = [s for s in build_samples(train_ds, max_len) if keep(s)]
    test_samples = [s for s in build_samples(test_ds, max_len, prior=train_ds) if keep(s)]
    cold = cold_items_among(train_ds, catalog, cold_threshold)
    return Prepared(Xt, Xa, train_samples, test_samples, cold)


def run_variant(name: str, prep: Prepared, cfg: ExperimentConfig):
    """Train and evaluate one row; returns ``(metrics, params, loss_log, bundle)``."""
    method, streams, variant = VARIANT_SPECS[name]
    bundle = prep.bundle(method, streams, cfg.quantize)
    mcfg = model_config(bundle, cfg.model, variant)
    params = init_params(mcfg, prep.Xt.item_ids, cfg.model_seed)
    index = make_index(params, bundle)
    trained, log = train(params, prep.train_samples, index, cfg.train)
    test = encode_samples(prep.test_samples, index, mcfg.max_len)
    metrics, _ = evaluate(trained, test, index, prep.cold_items)
    return metrics, trained, log, bundle


def sweep(prep: Prepared, cfg: ExperimentConfig, rows=REPORT_ROWS) -> dict[str, Metrics]:
    return {name: run_variant(name, prep, cfg)[0] for name in rows}
