"""Seeded synthetic catalogues with planted genre and modality structure.

Every item has a textual genre and an audio style. Textual embeddings are a
per-genre prototype plus Gaussian noise; audio embeddings likewise per style.
A user's affinity for an item mixes their genre taste and their style taste
with a per-user modality weight, and labels are Bernoulli draws from a
logistic model of that affinity.

A ``cold_fraction`` of the catalogue is "new": those items are shown in the
test period and only a handful of times in the train period, so their train
interaction count stays below the cold threshold.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .data import EmbeddingMatrix, Event, InteractionDataset, save_embeddings, save_interactions


@dataclass(frozen=True)
class SynthConfig:
    n_users: int = 2000
    n_items: int = 500
    n_genres: int = 8
    dim: int = 16
    noise: float = 0.3
    events_per_user: int = 24
    test_fraction: float = 0.25  # share of each user's timeline held out
    cold_fraction: float = 0.2
    cold_train_max: int = 5  # train exposures allowed per cold item
    style_match: float = 0.5  # P(audio style == genre)
    temperature: float = 0.3
    seed: int = 0

    def __post_init__(self):
        for name in ("n_users", "n_items", "n_genres", "dim", "events_per_user"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be positive")
        if not 0 <= self.cold_fraction < 1:
            raise ValueError("cold_fraction must be in [0, 1)")
        if self.noise < 0 or self.temperature <= 0:
            raise ValueError("noise must be >= 0 and temperature > 0")


@dataclass
class SynthData:
    textual: EmbeddingMatrix
    audio: EmbeddingMatrix
    train: InteractionDataset
    test: InteractionDataset
    genres: np.ndarray  # (n_items,) textual genre, aligned with item ids
    styles: np.ndarray  # (n_items,) audio style
    cold_items: set[int]
    affinity: dict[tuple[int, int], float]  # (user, item) -> Bayes score, for events only


def _prototypes(rng, G, d):
    p = rng.normal(size=(G, d))
    return p / np.linalg.norm(p, axis=1, keepdims=True)


def generate(config: SynthConfig = SynthConfig()) -> SynthData:
    cfg = config
    rng = np.random.default_rng(cfg.seed)
    G, n = cfg.n_genres, cfg.n_items
    item_ids = np.arange(n, dtype=np.int64)

    genres = np.arange(n) % G
    rng.shuffle(genres)
    styles = np.where(rng.random(n) < cfg.style_match, genres, rng.integers(G, size=n))
    proto_t = _prototypes(rng, G, cfg.dim)
    proto_a = _prototypes(rng, G, cfg.dim)
    Xt = proto_t[genres] + cfg.noise * rng.normal(size=(n, cfg.dim)) / np.sqrt(cfg.dim)
    Xa = proto_a[styles] + cfg.noise * rng.normal(size=(n, cfg.dim)) / np.sqrt(cfg.dim)

    n_cold = int(round(cfg.cold_fraction * n))
    cold = np.sort(rng.choice(n, size=n_cold, replace=False)) if n_cold else np.zeros(0, dtype=np.int64)
    is_cold = np.zeros(n, dtype=bool)
    is_cold[cold] = True
    warm_pool = item_ids[~is_cold]

    # taste: one favourite genre and style per user, plus noise
    taste_g = rng.normal(0.0, 0.5, size=(cfg.n_users, G))
    taste_g[np.arange(cfg.n_users), rng.integers(G, size=cfg.n_users)] += 2.0
    taste_s = rng.normal(0.0, 0.5, size=(cfg.n_users, G))
    taste_s[np.arange(cfg.n_users), rng.integers(G, size=cfg.n_users)] += 2.0
    mix = rng.beta(2.0, 2.0, size=cfg.n_users)  # weight on the textual side

    T = cfg.events_per_user
    n_test = max(1, int(round(cfg.test_fraction * T)))
    cold_budget = {int(i): cfg.cold_train_max for i in cold}
    p_cold_test = cfg.cold_fraction
    train_ev, test_ev, affinity = [], [], {}
    for u in range(cfg.n_users):
        for t in range(T):
            in_test = t >= T - n_test
            if n_cold and in_test and rng.random() < p_cold_test:
                i = int(rng.choice(cold))
            elif n_cold and not in_test and rng.random() < p_cold_test / 10:
                # rare early exposure of a new item, capped per item
                i = int(rng.choice(cold))
                if cold_budget[i] == 0:
                    i = int(rng.choice(warm_pool))
                else:
                    cold_budget[i] -= 1
            else:
                i = int(rng.choice(warm_pool))
            a = mix[u] * taste_g[u, genres[i]] + (1 - mix[u]) * taste_s[u, styles[i]]
            y = int(rng.random() < 1.0 / (1.0 + np.exp(-(a - 1.0) / cfg.temperature)))
            ev = Event(u, i, t, y)
            affinity[(u, i)] = float(a)
            (test_ev if in_test else train_ev).append(ev)

    return SynthData(
        textual=EmbeddingMatrix("textual", item_ids, Xt),
        audio=EmbeddingMatrix("audio", item_ids, Xa),
        train=InteractionDataset(train_ev, "train"),
        test=InteractionDataset(test_ev, "test"),
        genres=genres,
        styles=styles,
        cold_items={int(i) for i in cold},
        affinity=affinity,
    )


def write(data: SynthData, out_dir: str | Path) -> dict[str, Path]:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    paths = {
        "textual": out / "textual.semb",
        "audio": out / "audio.semb",
        "train": out / "train.tsv",
        "test": out / "test.tsv",
        "genres": out / "genres.tsv",
    }
    save_embeddings(data.textual, paths["textual"])
    save_embeddings(data.audio, paths["audio"])
    save_interactions(data.train, paths["train"])
    save_interactions(data.test, paths["test"])
    with open(paths["genres"], "w", encoding="utf-8", newline="\n") as f:
        f.write("item_id\tgenre\tstyle\tplanted_cold\n")
        for i, g, s in zip(data.textual.item_ids, data.genres, data.styles):
            f.write(f"{int(i)}\t{int(g)}\t{int(s)}\t{int(int(i) in data.cold_items)}\n")
    return paths


def purity(codes, labels) -> float:
    """Majority-label purity of the partition induced by ``codes``.

    ``sum over clusters of (largest label count) / n``.
    """
    codes = np.asarray(codes).reshape(-1)
    labels = np.asarray(labels).reshape(-1)
    if codes.shape != labels.shape or codes.size == 0:
        raise ValueError("codes and labels must be non-empty and aligned")
    total = 0
    for c in np.unique(codes):
        total += np.bincount(np.unique(labels, return_inverse=True)[1][codes == c]).max()
    return total / codes.size


def two_genre_instance(n_per: int = 10, offset: float = 10.0, spread: float = 1.0,
                       jitter: float = 0.05, seed: int = 0) -> tuple[np.ndarray, np.ndarray]:
    """2-D points where plain residual clustering mixes genres at layer 2.

    Genre ``g`` sits at ``(+/-offset, 0)``; within each genre, items split
    into two sub-groups at ``y = +/-spread``. Residuals after a 2-centroid
    first layer look the same in both genres, so a second residual layer
    groups by sub-group (mixing genres), while clustering residuals together
    with the prefix groups by genre.
    """
    rng = np.random.default_rng(seed)
    pts, lab = [], []
    for g, cx in enumerate((-offset, offset)):
        for cy in (-spread, spread):
            pts.append(np.column_stack([np.full(n_per, cx), np.full(n_per, cy)])
                       + jitter * rng.normal(size=(n_per, 2)))
            lab += [g] * n_per
    return np.vstack(pts).astype(np.float32), np.asarray(lab)
