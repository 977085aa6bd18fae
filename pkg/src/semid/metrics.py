"""All-AUC, Cold-AUC and Logloss, plus table-shaped reports."""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np
from scipy.stats import rankdata

from .mcca import Batch, ItemIndex, ModelParams, predict
from .trainer import bce_loss

REPORT_ROWS = ("ID-only", "+PQ", "+VQ", "+RQ", "+PSRQ", "PSRQ+MCCA", "w/o MSC", "w/o MJC")
REPORT_COLUMNS = ("All AUC", "Cold AUC", "Logloss")


class UndefinedAUC(ValueError):
    pass


def auc(scores, labels) -> float:
    """Mann-Whitney AUC with average ranks for tied scores."""
    s = np.asarray(scores, dtype=np.float64).reshape(-1)
    y = np.asarray(labels).reshape(-1)
    if s.shape != y.shape:
        raise ValueError("scores and labels differ in length")
    pos = y == 1
    n1 = int(pos.sum())
    n0 = y.size - n1
    if n1 == 0 or n0 == 0:
        raise UndefinedAUC("undefined AUC: need at least one positive and one negative")
    ranks = rankdata(s, method="average")
    return float((ranks[pos].sum() - n1 * (n1 + 1) / 2.0) / (n1 * n0))


def permutation_pvalue(scores, labels, n_perm: int = 999, seed: int = 0) -> float:
    """One-sided p-value of the observed AUC against label shuffles.

    Returns ``(1 + #{perm AUC >= observed}) / (1 + n_perm)``.
    """
    s = np.asarray(scores, dtype=np.float64)
    y = np.asarray(labels)
    ranks = rankdata(s, method="average")
    n1 = int((y == 1).sum())
    n0 = y.size - n1
    base = n1 * (n1 + 1) / 2.0

    def _auc(lab):
        return (ranks[lab == 1].sum() - base) / (n1 * n0)

    observed = _auc(y)
    rng = np.random.default_rng(seed)
    hits = sum(_auc(rng.permutation(y)) >= observed for _ in range(n_perm))
    return (1 + hits) / (1 + n_perm)


@dataclass(frozen=True)
class Metrics:
    all_auc: float | None
    cold_auc: float | None
    logloss: float
    n: int
    n_cold: int
    config_hash: str = ""

    def to_json(self) -> str:
        return json.dumps(asdict(self), sort_keys=True, indent=2) + "\n"


def _maybe_auc(scores, labels):
    try:
        return auc(scores, labels)
    except UndefinedAUC:
        return None


def evaluate(
    params: ModelParams,
    batch: Batch,
    index: ItemIndex,
    cold_items: set[int],
    config_hash: str = "",
) -> tuple[Metrics, np.ndarray]:
    """Score ``batch`` and compute metrics; also returns the logits.

    Cold AUC covers samples whose target is in ``cold_items``. A subset with
    a single label class gets ``None`` instead of a number.
    """
    logits = predict(params, batch, index)
    target_ids = index.item_ids[batch.target - 1]
    cold = np.isin(target_ids, np.fromiter(cold_items, dtype=np.int64, count=len(cold_items)))
    m = Metrics(
        all_auc=_maybe_auc(logits, batch.labels),
        cold_auc=_maybe_auc(logits[cold], batch.labels[cold]) if cold.any() else None,
        logloss=bce_loss(logits, batch.labels),
        n=len(batch),
        n_cold=int(cold.sum()),
        config_hash=config_hash,
    )
    return m, logits


def save_metrics(metrics: Metrics, path: str | Path) -> None:
    Path(path).write_text(metrics.to_json(), encoding="utf-8")


def load_metrics(path: str | Path) -> Metrics:
    return Metrics(**json.loads(Path(path).read_text(encoding="utf-8")))


def _cell(v) -> str:
    return "n/a" if v is None else f"{v:.4f}"


def report(results: Mapping[str, Metrics], rows: Sequence[str] = REPORT_ROWS) -> tuple[str, str]:
    """Markdown and TSV tables, rows in ``rows`` order (missing variants skipped)."""
    present = [r for r in rows if r in results]
    present += [r for r in results if r not in rows]
    if not present:
        raise ValueError("no evaluated variants to report")
    md = ["| Method | " + " | ".join(REPORT_COLUMNS) + " |",
          "|---|" + "---|" * len(REPORT_COLUMNS)]
    tsv = ["Method\t" + "\t".join(REPORT_COLUMNS)]
    for name in present:
        m = results[name]
        cells = [_cell(m.all_auc), _cell(m.cold_auc), _cell(m.logloss)]
        md.append(f"| {name} | " + " | ".join(cells) + " |")
        tsv.append(name + "\t" + "\t".join(cells))
    return "\n".join(md) + "\n", "\n".join(tsv) + "\n"
