import struct

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from semid.data import (
    DataFormatError,
    EmbeddingMatrix,
    Event,
    InteractionDataset,
    build_samples,
    cold_items_among,
    load_embeddings,
    load_interactions,
    mark_cold_items,
    save_embeddings,
    save_interactions,
)


def _matrix(n=3, d=4, seed=0, modality="textual"):
    rng = np.random.default_rng(seed)
    return EmbeddingMatrix(modality, np.arange(100, 100 + n), rng.normal(size=(n, d)))


def test_embedding_round_trip_is_bit_exact(tmp_path):
    m = _matrix()
    p = tmp_path / "x.semb"
    save_embeddings(m, p)
    back = load_embeddings(p)
    assert back.modality == "textual"
    assert back.values.shape == (3, 4)
    assert back.values.tobytes() == m.values.tobytes()
    assert back.item_ids.tolist() == m.item_ids.tolist()
    save_embeddings(back, tmp_path / "y.semb")
    assert (tmp_path / "y.semb").read_bytes() == p.read_bytes()


def test_embedding_header_layout(tmp_path):
    p = tmp_path / "x.semb"
    save_embeddings(_matrix(n=2, d=3, modality="audio"), p)
    raw = p.read_bytes()
    assert raw[:4] == b"SEMB"
    version, mod, n, d = struct.unpack_from("<IBQI", raw, 4)
    assert (version, mod, n, d) == (1, 1, 2, 3)
    assert len(raw) == 21 + 8 * 2 + 4 * 6


def test_row_count_mismatch(tmp_path):
    p = tmp_path / "x.semb"
    save_embeddings(_matrix(n=3, d=4), p)
    raw = bytearray(p.read_bytes())
    struct.pack_into("<Q", raw, 9, 4)  # header claims 4 rows
    p.write_bytes(bytes(raw) + b"\0" * 8)  # ids for 4 rows, floats for 3
    with pytest.raises(DataFormatError, match="row count mismatch") as e:
        load_embeddings(p)
    assert e.value.code == "row_count_mismatch"


def test_dimension_mismatch(tmp_path):
    p = tmp_path / "x.semb"
    save_embeddings(_matrix(n=3, d=4), p)
    p.write_bytes(p.read_bytes() + b"\0\0\0\0")
    with pytest.raises(DataFormatError) as e:
        load_embeddings(p)
    assert e.value.code == "dim_mismatch"


def test_malformed_header(tmp_path):
    p = tmp_path / "x.semb"
    p.write_bytes(b"NOPE" + b"\0" * 40)
    with pytest.raises(DataFormatError) as e:
        load_embeddings(p)
    assert e.value.code == "bad_header"


def test_non_finite_value_reports_position(tmp_path):
    m = _matrix()
    vals = m.values.copy()
    vals[1, 2] = np.nan
    p = tmp_path / "x.semb"
    with open(p, "wb") as f:
        f.write(struct.pack("<4sIBQI", b"SEMB", 1, 0, 3, 4))
        f.write(m.item_ids.astype("<u8").tobytes())
        f.write(vals.astype("<f4").tobytes())
    with pytest.raises(DataFormatError, match=r"non-finite value at \(1,2\)") as e:
        load_embeddings(p)
    assert e.value.code == "non_finite"


def test_duplicate_item_ids_rejected():
    with pytest.raises(DataFormatError):
        EmbeddingMatrix("textual", [1, 1], np.zeros((2, 2)))


def test_interaction_round_trip(tmp_path):
    ds = InteractionDataset([Event(2, 5, 3, 1), Event(1, 7, 9, 0), Event(1, 8, 1, 1)])
    p = tmp_path / "log.tsv"
    save_interactions(ds, p)
    back = load_interactions(p)
    assert back.events == ds.events
    assert [(e.user_id, e.timestamp) for e in back.events] == [(1, 1), (1, 9), (2, 3)]
    save_interactions(back, tmp_path / "again.tsv")
    assert (tmp_path / "again.tsv").read_bytes() == p.read_bytes()


def test_interactions_without_header(tmp_path):
    p = tmp_path / "log.tsv"
    p.write_text("1\t2\t3\t1\n1\t4\t5\t0\n", encoding="utf-8")
    assert len(load_interactions(p)) == 2


def test_bad_label_rejected():
    with pytest.raises(DataFormatError):
        InteractionDataset([Event(1, 1, 1, 2)])


def test_history_excludes_negatives_and_future():
    ds = InteractionDataset([Event(0, 1, 1, 1), Event(0, 2, 2, 1), Event(0, 3, 3, 0)])
    samples = build_samples(ds, 20)
    assert [s.history for s in samples] == [(), (1,), (1, 2)]
    last = samples[-1]
    assert last.label == 0 and last.history_len == 2 and last.target_item == 3


def test_first_event_has_empty_history():
    s = build_samples(InteractionDataset([Event(4, 9, 0, 1)]), 5)[0]
    assert s.history_len == 0


def _naive_history(events, user, ts, L):
    """Re-scan the raw log: positives of ``user`` strictly before ``ts``."""
    prior = [(e.timestamp, e.item_id) for e in events if e.user_id == user and e.label == 1 and e.timestamp < ts]
    prior.sort()
    return tuple(i for _, i in prior)[-L:] if prior else ()


def test_truncation_matches_rescan_oracle():
    events = [Event(0, 100 + t, t, 1) for t in range(25)] + [Event(0, 999, 30, 0)]
    s = build_samples(InteractionDataset(events), 20)[-1]
    assert s.history == _naive_history(events, 0, 30, 20)
    assert s.history == tuple(range(105, 125))


@settings(max_examples=50, deadline=None)
@given(st.lists(st.tuples(st.integers(0, 3), st.integers(0, 9), st.booleans()), min_size=1, max_size=40),
       st.integers(1, 6), st.randoms(use_true_random=False))
def test_build_samples_matches_oracle_and_ignores_input_order(rows, L, rnd):
    # distinct timestamps so that input order cannot matter
    events = [Event(u, i, t, int(y)) for t, (u, i, y) in enumerate(rows)]
    shuffled = events[:]
    rnd.shuffle(shuffled)
    a = build_samples(InteractionDataset(events), L)
    b = build_samples(InteractionDataset(shuffled), L)
    assert a == b
    for s in a:
        assert s.history == _naive_history(events, s.user_id, s.timestamp, L)
        assert s.history_len <= L


def test_prior_positives_feed_test_history():
    train = InteractionDataset([Event(0, 1, 1, 1), Event(0, 2, 2, 0)])
    test = InteractionDataset([Event(0, 3, 5, 1), Event(0, 4, 6, 1)], split="test")
    samples = build_samples(test, 20, prior=train)
    assert [s.history for s in samples] == [(1,), (1, 3)]


def test_same_timestamp_not_in_history():
    ds = InteractionDataset([Event(0, 1, 5, 1), Event(0, 2, 5, 1)])
    assert [s.history for s in build_samples(ds, 3)] == [(), ()]


def test_cold_threshold_is_strict():
    ev = [Event(u, 1, u, 1) for u in range(29)] + [Event(u, 2, u, 1) for u in range(30)]
    ds = InteractionDataset(ev)
    assert mark_cold_items(ds, 30) == {1}
    assert mark_cold_items(InteractionDataset([]), 30) == set()
    assert cold_items_among(ds, [1, 2, 3], 30) == {1, 3}
