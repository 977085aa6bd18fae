"""Loss, hand-written reverse pass, Adam, and the training loop."""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .mcca import (
    Batch,
    ItemIndex,
    ModelConfig,
    ModelParams,
    encode_samples,
    forward_batch,
    init_params,
    sigmoid,
)


def bce_loss(logits, labels) -> float:
    """Mean binary cross-entropy on logits, in the overflow-free form.

    ``max(z, 0) - z*y + log1p(exp(-|z|))``, summed with :func:`math.fsum`
    so the result does not depend on sample order.
    """
    z = np.asarray(logits, dtype=np.float64).reshape(-1)
    y = np.asarray(labels, dtype=np.float64).reshape(-1)
    if z.shape != y.shape:
        raise ValueError("logits and labels differ in length")
    if z.size == 0:
        raise ValueError("empty batch")
    per = np.maximum(z, 0) - z * y + np.log1p(np.exp(-np.abs(z)))
    return math.fsum(per) / z.size


def _attend_back(dh, seq, mask, cache, net, grads, stream):
    d = seq.shape[-1]
    dw = np.einsum("bd,bld->bl", dh, seq)
    dseq = cache["w"][..., None] * dh[:, None, :]
    ds = dw * mask
    grads[f"att.{stream}.w2"] += np.einsum("blh,bl->h", cache["r"], ds)
    grads[f"att.{stream}.b2"] += ds.sum()
    da = ds[..., None] * net["w2"] * (cache["a"] > 0)
    grads[f"att.{stream}.w1"] += np.einsum("bli,blh->ih", cache["x"], da)
    grads[f"att.{stream}.b1"] += da.sum(axis=(0, 1))
    dx = da @ net["w1"].T
    dseq += dx[..., :d]
    return dseq, dx[..., d:].sum(axis=1)


def _scatter_codes(grads, stream, codes, de, n_layers):
    flat_codes = codes.reshape(-1, n_layers)
    flat = de.reshape(-1, de.shape[-1])
    for j in range(n_layers):
        np.add.at(grads[f"sid.{stream}.{j}"], flat_codes[:, j], flat)


def backward(trace: dict, params: ModelParams, index: ItemIndex, dlogits: np.ndarray | None = None) -> dict[str, np.ndarray]:
    """Gradients of the mean batch BCE loss w.r.t. every tensor.

    ``dlogits`` overrides the upstream gradient (defaults to the BCE
    derivative ``(sigmoid(z) - y) / B``). Tensors the variant does not use
    receive zeros; padding positions contribute nothing anywhere.
    """
    cfg, t = params.config, params.tensors
    batch: Batch = trace["batch"]
    B = len(batch)
    grads = params.zeros_like()
    if dlogits is None:
        dlogits = (sigmoid(trace["logits"]) - batch.labels) / B

    acts, pre = trace["acts"], trace["pre"]
    n_dense = len(pre)
    da = dlogits[:, None]
    for i in range(n_dense, 0, -1):
        grads[f"mlp.w{i}"] += acts[i - 1].T @ da
        grads[f"mlp.b{i}"] += da.sum(axis=0)
        dact = da @ t[f"mlp.w{i}"].T
        if i > 1:
            da = dact * (pre[i - 2] > 0)
    dz = dact

    d = cfg.dim
    chunks = list(cfg.history_streams) + ["item", "item_target"] + [f"tgt:{s}" for s in cfg.target_streams]
    dparts = {name: dz[:, n * d:(n + 1) * d] for n, name in enumerate(chunks)}

    dseq: dict[str, np.ndarray] = {}
    dtgt: dict[str, np.ndarray] = {s: np.zeros((B, d)) for s in cfg.table_streams}
    dtgt_item = dparts["item_target"].copy()
    for s in cfg.target_streams:
        dtgt[s] += dparts[f"tgt:{s}"]

    for s in cfg.history_streams + ("item",):
        net = {n: t[f"att.{s}.{n}"] for n in ("w1", "b1", "w2", "b2")}
        ds, dq = _attend_back(dparts[s], trace["seq"][s], batch.mask, trace["att"][s], net, grads, s)
        dseq[s] = ds
        if s == "item":
            dtgt_item += dq
        elif cfg.query_mode == "joint":
            dtgt["joint"] += dq
        else:
            dtgt[s] += dq

    mask = batch.mask[..., None]
    for s in cfg.table_streams:
        n_layers = cfg.layers_of(s)[1]
        codes = index.codes[s]
        if s in dseq:
            _scatter_codes(grads, s, codes[batch.rows], dseq[s] * mask, n_layers)
        _scatter_codes(grads, s, codes[batch.target], dtgt[s], n_layers)
    np.add.at(grads["item"], batch.rows.reshape(-1), (dseq["item"] * mask).reshape(-1, d))
    np.add.at(grads["item"], batch.target, dtgt_item)
    return grads


def loss_and_grads(params: ModelParams, batch: Batch, index: ItemIndex) -> tuple[float, dict[str, np.ndarray]]:
    logits, trace = forward_batch(batch, params, index)
    return bce_loss(logits, batch.labels), backward(trace, params, index)


@dataclass
class AdamState:
    lr: float = 5e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    weight_decay: float = 0.0
    step: int = 0
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)


class NonFiniteGradient(FloatingPointError):
    pass


def adam_step(params: ModelParams, grads: dict[str, np.ndarray], state: AdamState) -> None:
    """One bias-corrected Adam update, in place."""
    for name, g in grads.items():
        if not np.isfinite(g).all():
            bad = np.argwhere(~np.isfinite(g))[0]
            raise NonFiniteGradient(
                f"non-finite gradient in {name} at {tuple(int(i) for i in bad)} (step {state.step + 1})"
            )
    state.step += 1
    bc1 = 1.0 - state.beta1 ** state.step
    bc2 = 1.0 - state.beta2 ** state.step
    for name, p in params.tensors.items():
        g = grads[name]
        if g.shape != p.shape:
            raise ValueError(f"gradient shape {g.shape} != parameter shape {p.shape} for {name}")
        if state.weight_decay:
            g = g + state.weight_decay * p
        if name not in state.m:
            state.m[name] = np.zeros_like(p)
            state.v[name] = np.zeros_like(p)
        m, v = state.m[name], state.v[name]
        m *= state.beta1
        m += (1.0 - state.beta1) * g
        v *= state.beta2
        v += (1.0 - state.beta2) * (g * g)
        p -= state.lr * (m / bc1) / (np.sqrt(v / bc2) + state.eps)


@dataclass(frozen=True)
class TrainConfig:
    lr: float = 5e-4
    batch_size: int = 64
    epochs: int = 1
    seed: int = 0
    log_every: int = 10
    weight_decay: float = 0.0


def train(
    params: ModelParams,
    samples: Sequence,
    index: ItemIndex,
    config: TrainConfig = TrainConfig(),
) -> tuple[ModelParams, list[tuple[int, float]]]:
    """Minibatch Adam over seeded shuffles of ``samples``.

    Returns the trained parameters (rounded to float32, as checkpointed) and
    a ``(step, batch loss)`` log taken every ``log_every`` steps and at the
    final step.
    """
    params = params.copy()
    batch_all = samples if isinstance(samples, Batch) else encode_samples(samples, index, params.config.max_len)
    rng = np.random.default_rng(config.seed)
    state = AdamState(lr=config.lr, weight_decay=config.weight_decay)
    log: list[tuple[int, float]] = []
    n = len(batch_all)
    step = 0
    total = config.epochs * math.ceil(n / config.batch_size)
    for _ in range(config.epochs):
        order = rng.permutation(n)
        for s in range(0, n, config.batch_size):
            batch = batch_all.take(order[s:s + config.batch_size])
            loss, grads = loss_and_grads(params, batch, index)
            adam_step(params, grads, state)
            step += 1
            if step == 1 or step % config.log_every == 0 or step == total:
                log.append((step, loss))
    for v in params.tensors.values():
        v[...] = v.astype(np.float32)
    return params, log


def save_loss_log(log, path) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as f:
        f.write("step,loss\n")
        for step, loss in log:
            f.write(f"{step},{loss:.17g}\n")


# -- gradient check ------------------------------------------------------------

@dataclass
class GradCheckResult:
    variant: str
    max_rel_error: float
    worst: tuple[str, tuple[int, ...]]
    n_checked: int
    kink_crossings: int  # perturbations that flipped some ReLU; must be 0

    @property
    def passed(self) -> bool:
        return self.kink_crossings == 0 and self.max_rel_error < 1e-4


def _relu_signs(trace) -> list[np.ndarray]:
    return [a > 0 for a in trace["pre"][:-1]] + [c["a"] > 0 for c in trace["att"].values()]


def _place_biases(params: ModelParams, index: ItemIndex, batch: Batch, rng, margin: float) -> None:
    # Put every ReLU pre-activation at least `margin` away from zero, on a
    # random side, so that central differences never straddle a kink.
    cfg, t = params.config, params.tensors

    def place(name, pre_with_bias):
        v = (pre_with_bias - t[name]).reshape(-1, t[name].shape[0])
        on = rng.random(v.shape[1]) < 0.7
        t[name][...] = np.where(on, margin - v.min(axis=0), -margin - v.max(axis=0))

    _, tr = forward_batch(batch, params, index)
    for s in cfg.history_streams + ("item",):
        place(f"att.{s}.b1", tr["att"][s]["a"])
    for i in range(1, len(cfg.mlp) + 1):
        _, tr = forward_batch(batch, params, index)
        place(f"mlp.b{i}", tr["pre"][i - 1])


def toy_problem(variant: str = "mcca", seed: int = 0, n_items: int = 6, batch: int = 4,
                scale: float = 0.25, margin: float = 0.1):
    """Tiny model (d'=4, L=3, l=2, k=4) with random codes, histories and params.

    Weights and embeddings are redrawn from N(0, scale^2); hidden biases are
    then placed so every ReLU input is at least ``margin`` from zero.
    """
    from .data import Sample

    rng = np.random.default_rng(seed)
    k, l, L = 4, 2, 3
    items = np.arange(10, 10 + n_items)
    tables = {s: {int(i): tuple(int(c) for c in rng.integers(k, size=l)) for i in items}
              for s in ("textual", "audio", "joint")}
    cfg = ModelConfig(dim=4, max_len=L, hidden=32, variant=variant,
                      codebooks=tuple((s, k, l) for s in tables))
    params = init_params(cfg, items, seed)
    for v in params.tensors.values():
        v[...] = rng.normal(0.0, scale, v.shape)
    index = ItemIndex(params.item_ids, {s: tables[s] for s in cfg.table_streams})
    samples = []
    for b in range(batch):
        hl = b % (L + 1)
        hist = tuple(int(i) for i in rng.choice(items, size=hl))
        samples.append(Sample(b, hist, int(rng.choice(items)), int(b % 2)))
    enc = encode_samples(samples, index, L)
    _place_biases(params, index, enc, rng, margin)
    return params, index, enc


def gradient_check(variant: str = "mcca", seed: int = 0, delta: float = 1e-3, floor: float = 1e-6) -> GradCheckResult:
    """Compare :func:`backward` with central differences over every parameter.

    Relative error is ``|a - n| / max(|a|, |n|, floor)``; the floor keeps
    round-off on near-zero gradients from counting as relative error.
    """
    params, index, batch = toy_problem(variant, seed)
    logits, trace = forward_batch(batch, params, index)
    grads = backward(trace, params, index)
    base = _relu_signs(trace)

    def probe():
        z, tr = forward_batch(batch, params, index)
        flipped = any((a != b).any() for a, b in zip(base, _relu_signs(tr)))
        return bce_loss(z, batch.labels), flipped

    worst, where, count, kinks = 0.0, ("", (0,)), 0, 0
    for name, p in params.tensors.items():
        flat = p.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + delta
            up, f1 = probe()
            flat[i] = orig - delta
            down, f2 = probe()
            flat[i] = orig
            kinks += f1 or f2
            num = (up - down) / (2 * delta)
            ana = grads[name].reshape(-1)[i]
            rel = abs(ana - num) / max(abs(ana), abs(num), floor)
            count += 1
            if rel > worst:
                worst, where = rel, (name, np.unravel_index(i, p.shape))
    return GradCheckResult(variant, float(worst), (where[0], tuple(int(x) for x in where[1])), count, int(kinks))
