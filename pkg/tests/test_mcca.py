from dataclasses import replace

import numpy as np
import pytest

from semid.data import DataFormatError, Sample
from semid.mcca import (
    ItemIndex,
    ModelConfig,
    attention_score,
    checkpoint_bytes,
    embed_item,
    encode_samples,
    forward,
    forward_batch,
    init_params,
    interest_vector,
    load_params,
    param_shapes,
    save_params,
    sigmoid,
)

STREAMS = ("textual", "audio", "joint")
ITEMS = [3, 5, 8, 13, 21, 34]


def tiny(variant="mcca", seed=0, scale=0.5, max_len=3):
    """d'=4, L=3, l=2, k=4 model with random codes and non-trivial params."""
    rng = np.random.default_rng(seed)
    cbs = () if variant == "id_only" else tuple((s, 4, 2) for s in STREAMS)
    cfg = ModelConfig(dim=4, max_len=max_len, hidden=3, mlp=(5, 4), variant=variant, codebooks=cbs)
    params = init_params(cfg, ITEMS, seed)
    for v in params.tensors.values():
        v[...] = rng.normal(scale=scale, size=v.shape)
    tables = {s: {i: tuple(rng.integers(0, 4, size=2)) for i in ITEMS} for s in STREAMS}
    index = ItemIndex(params.item_ids, {s: tables[s] for s in cfg.table_streams})
    return cfg, params, index, tables


def scalar_forward(sample, params, tables):
    """Loop-by-loop recomputation of one logit with dense one-hot lookups."""
    cfg, t = params.config, params.tensors
    d = cfg.dim
    row_of = {int(i): r + 1 for r, i in enumerate(params.item_ids)}

    def onehot_embed(stream, item):
        v = [0.0] * d
        for j in range(cfg.layers_of(stream)[1]):
            table = t[f"sid.{stream}.{j}"]
            onehot = [1.0 if c == tables[stream][item][j] else 0.0 for c in range(table.shape[0])]
            for a in range(d):
                v[a] += sum(onehot[c] * table[c, a] for c in range(table.shape[0]))
        return v

    def score(e, q, stream):
        x = list(e) + list(q)
        w1, b1 = t[f"att.{stream}.w1"], t[f"att.{stream}.b1"]
        w2, b2 = t[f"att.{stream}.w2"], t[f"att.{stream}.b2"]
        total = b2[0]
        for h in range(w1.shape[1]):
            pre = b1[h] + sum(x[i] * w1[i, h] for i in range(len(x)))
            total += w2[h] * max(pre, 0.0)
        return total

    def pool(seq, q, stream):
        out = [0.0] * d
        for e in seq:
            s = score(e, q, stream)
            for a in range(d):
                out[a] += s * e[a]
        return out

    hist = list(sample.history)[-cfg.max_len:]
    tgt = sample.target_item
    parts = []
    for s in cfg.history_streams:
        q = onehot_embed("joint", tgt) if cfg.query_mode == "joint" else onehot_embed(s, tgt)
        parts += pool([onehot_embed(s, i) for i in hist], q, s)
    e_r = list(t["item"][row_of[tgt]])
    parts += pool([list(t["item"][row_of[i]]) for i in hist], e_r, "item")
    parts += e_r
    for s in cfg.target_streams:
        parts += onehot_embed(s, tgt)

    act = parts
    n = len(cfg.mlp) + 1
    for layer in range(1, n + 1):
        w, b = t[f"mlp.w{layer}"], t[f"mlp.b{layer}"]
        nxt = [b[o] + sum(act[i] * w[i, o] for i in range(len(act))) for o in range(w.shape[1])]
        act = [max(v, 0.0) for v in nxt] if layer < n else nxt
    return act[0]


def test_embed_item_cases():
    rng = np.random.default_rng(0)
    one = [rng.normal(size=(4, 3))]
    assert np.array_equal(embed_item([2], one), one[0][2])
    zeros = [np.zeros((4, 3))] * 3
    assert np.array_equal(embed_item([1, 2, 3], zeros), np.zeros(3))
    tabs = [rng.normal(size=(5, 3)) for _ in range(3)]
    codes = [4, 0, 2]
    dense = sum(np.eye(5)[c] @ t for c, t in zip(codes, tabs))
    assert np.allclose(embed_item(codes, tabs), dense, rtol=0, atol=1e-15)
    with pytest.raises(ValueError):
        embed_item([5, 0, 0], tabs)


def test_attention_score_by_hand():
    zero = {"w1": np.zeros((4, 2)), "b1": np.zeros(2), "w2": np.zeros(2), "b2": np.zeros(1)}
    assert attention_score(np.ones(2), np.ones(2), zero) == 0.0
    net = {"w1": np.array([[1.0], [1.0]]), "b1": np.array([-1.0]), "w2": np.array([2.0]), "b2": np.array([0.5])}
    # relu(2 + 3 - 1) * 2 + 0.5
    assert attention_score(np.array([2.0]), np.array([3.0]), net) == 8.5
    assert attention_score(np.array([-2.0]), np.array([1.0]), net) == 0.5


def test_interest_vector_cases():
    rng = np.random.default_rng(1)
    net = {"w1": rng.normal(size=(6, 4)), "b1": rng.normal(size=4), "w2": rng.normal(size=4), "b2": rng.normal(size=1)}
    seq, q = rng.normal(size=(5, 3)), rng.normal(size=3)
    assert np.array_equal(interest_vector(seq, 0, q, net), np.zeros(3))
    s_last = attention_score(seq[-1], q, net)
    assert np.allclose(interest_vector(seq, 1, q, net), s_last * seq[-1], rtol=0, atol=1e-15)
    expect = np.zeros(3)
    for j in range(2, 5):
        expect += attention_score(seq[j], q, net) * seq[j]
    assert np.abs(interest_vector(seq, 3, q, net) - expect).max() <= 1e-12


def test_scores_are_elementwise():
    rng = np.random.default_rng(2)
    net = {"w1": rng.normal(size=(4, 3)), "b1": rng.normal(size=3), "w2": rng.normal(size=3), "b2": rng.normal(size=1)}
    e = rng.normal(size=2)
    seq = np.stack([e, rng.normal(size=2), e])
    s = attention_score(seq, np.ones(2), net)
    assert s[0] == s[2]
    swapped = attention_score(seq[[2, 1, 0]], np.ones(2), net)
    assert np.array_equal(swapped, s[[2, 1, 0]])
    assert s[0] == pytest.approx(attention_score(e, np.ones(2), net), rel=1e-14)


def test_param_shapes_follow_variant():
    cfg, *_ = tiny("mcca")
    shapes = param_shapes(cfg, 6)
    assert shapes["item"] == (7, 4)
    assert shapes["mlp.w1"] == (6 * 4, 5) and shapes["mlp.w3"] == (4, 1)
    assert shapes["att.joint.w1"] == (8, 3)
    assert param_shapes(tiny("wo_msc")[0], 6)["mlp.w1"][0] == 4 * 4
    wo_mjc = param_shapes(tiny("wo_mjc")[0], 6)
    assert wo_mjc["mlp.w1"][0] == 4 * 4 and "sid.joint.0" not in wo_mjc
    assert param_shapes(tiny("id_only")[0], 6)["mlp.w1"][0] == 8


def test_init_is_seeded_and_pads_zero():
    cfg, *_ = tiny()
    a, b = init_params(cfg, ITEMS, 7), init_params(cfg, ITEMS, 7)
    assert all(a.tensors[k].tobytes() == b.tensors[k].tobytes() for k in a.tensors)
    assert np.all(a.tensors["item"][0] == 0)
    assert np.abs(a.tensors["sid.joint.0"]).max() <= 0.01
    assert np.all(a.tensors["mlp.b1"] == 0)


def test_zero_params_give_half():
    cfg, params, index, _ = tiny()
    for v in params.tensors.values():
        v[...] = 0.0
    logit, _ = forward(Sample(0, (3, 5), 8, 1, 0), None, params, index)
    assert logit == 0.0 and sigmoid(logit) == 0.5


@pytest.mark.parametrize("variant", ["mcca", "wo_msc", "wo_mjc", "din_sid", "id_only"])
@pytest.mark.parametrize("history", [(), (5,), (3, 21, 34), (8, 8, 13, 5)])
def test_logit_matches_scalar_oracle(variant, history):
    cfg, params, index, tables = tiny(variant, seed=len(history))
    sample = Sample(0, history, 13, 1, 0)
    logit, _ = forward(sample, None, params, index)
    assert logit == pytest.approx(scalar_forward(sample, params, tables), rel=1e-12, abs=1e-12)


def test_empty_history_depends_only_on_target():
    cfg, params, index, _ = tiny()
    sample = Sample(0, (), 13, 1, 0)
    before, _ = forward(sample, None, params, index)
    other = params.copy()
    other.tensors["item"][1:4] += 5.0  # rows of items 3, 5, 8
    for name in other.tensors:
        if name.startswith("att."):
            other.tensors[name] += 1.0
    after, _ = forward(sample, None, other, index)
    assert before == after


def test_padding_never_changes_logit():
    cfg, params, index, _ = tiny(max_len=3)
    long_cfg = replace(cfg, max_len=7)
    long_params = replace(params, config=long_cfg)
    for hist in [(), (5,), (3, 5, 8)]:
        s = Sample(0, hist, 21, 0, 0)
        a, _ = forward(s, None, params, index)
        b, _ = forward(s, None, long_params, index)
        assert a == b


def _dyadic(params, seed):
    # params on a coarse binary grid make every sum exact, so reordering
    # terms cannot change a single bit
    rng = np.random.default_rng(seed)
    for v in params.tensors.values():
        v[...] = rng.integers(-8, 9, size=v.shape) / 8.0


@pytest.mark.parametrize("variant", ["mcca", "wo_msc", "wo_mjc"])
def test_history_permutation_invariance(variant):
    cfg, params, index, _ = tiny(variant, max_len=4)
    _dyadic(params, 3)
    base, _ = forward(Sample(0, (3, 5, 8, 21), 13, 1, 0), None, params, index)
    for perm in [(21, 8, 5, 3), (5, 3, 21, 8), (8, 21, 3, 5)]:
        got, _ = forward(Sample(0, perm, 13, 1, 0), None, params, index)
        assert got == base
    _, params, index, _ = tiny(variant, max_len=4, seed=9)
    a, _ = forward(Sample(0, (3, 5, 8, 21), 13, 1, 0), None, params, index)
    b, _ = forward(Sample(0, (21, 3, 8, 5), 13, 1, 0), None, params, index)
    assert a == pytest.approx(b, rel=1e-13, abs=1e-15)


def test_shared_query_isolates_streams():
    cfg, params, index, _ = tiny("mcca")
    batch = encode_samples([Sample(0, (3, 5, 8), 13, 1, 0)], index, 3)
    _, tr = forward_batch(batch, params, index)
    other = params.copy()
    other.tensors["sid.textual.0"] += 1.0
    other.tensors["sid.textual.1"] -= 0.5
    _, tr2 = forward_batch(batch, other, index)
    assert np.array_equal(tr["h"]["audio"], tr2["h"]["audio"])
    assert np.array_equal(tr["h"]["joint"], tr2["h"]["joint"])
    assert not np.array_equal(tr["h"]["textual"], tr2["h"]["textual"])


def test_sigmoid_bounds():
    _, params, index, _ = tiny(scale=3.0)
    for hist in [(), (3, 5, 8)]:
        logit, _ = forward(Sample(0, hist, 34, 1, 0), None, params, index)
        assert 0.0 < sigmoid(logit) < 1.0


def test_missing_codes_name_the_item():
    cfg, params, index, tables = tiny()
    partial = {s: {i: c for i, c in tables[s].items() if i != 21} for s in cfg.table_streams}
    idx = ItemIndex(params.item_ids, partial)
    with pytest.raises(DataFormatError, match="item 21"):
        encode_samples([Sample(0, (3, 21), 5, 1, 0)], idx, 3)
    with pytest.raises(DataFormatError, match="item 999"):
        encode_samples([Sample(0, (), 999, 1, 0)], idx, 3)


def test_checkpoint_round_trip(tmp_path):
    cfg, params, index, _ = tiny()
    params.tensors = {k: v.astype(np.float32).astype(np.float64) for k, v in params.tensors.items()}
    path = tmp_path / "p.smcp"
    save_params(params, path)
    back = load_params(path)
    assert back.config == cfg
    assert back.item_ids.tolist() == sorted(ITEMS)
    assert list(back.tensors) == list(params.tensors)
    for k in params.tensors:
        assert back.tensors[k].tobytes() == params.tensors[k].tobytes()
    assert checkpoint_bytes(back) == path.read_bytes()
    raw = bytearray(path.read_bytes())
    assert raw[:4] == b"SMCP"
    raw[-40] ^= 1
    path.write_bytes(bytes(raw))
    with pytest.raises(DataFormatError):
        load_params(path)
