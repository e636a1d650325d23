import filecmp
import json
from collections import Counter

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from caperec.data import (
    HEADER,
    OOV,
    PAD,
    ContextBatch,
    Interaction,
    SyntheticSpec,
    Vocabulary,
    encode,
    format_csv,
    generate_synthetic,
    make_batches,
    negative_sample,
    parse_csv_dataset,
    parse_csv_text,
    prefetch,
    split_by_user,
    write_csv,
    write_synthetic,
)
from caperec.errors import ParseError, SamplingError, SpecError

SMALL = dict(n_users=60, n_items=40, n_intents=4, context_length_range=(5, 12), segment_length_range=(2, 4))


def small(**kw):
    return SyntheticSpec(**dict(SMALL, **kw))


def toy(n=5, length=3):
    return [Interaction(u, list(range(10, 10 + length)), [1] * length, 20 + u, 2, u % 2) for u in range(n)]


class TestSynthetic:
    def test_same_seed_same_bytes(self, tmp_path):
        a = write_synthetic(small(seed=3), tmp_path / "a")
        b = write_synthetic(small(seed=3), tmp_path / "b")
        assert filecmp.cmp(a, b, shallow=False)
        assert filecmp.cmp(tmp_path / "a" / "spec.json", tmp_path / "b" / "spec.json", shallow=False)

    def test_different_seed_differs(self):
        a = format_csv(generate_synthetic(small(seed=1)).interactions)
        b = format_csv(generate_synthetic(small(seed=2)).interactions)
        assert a != b

    def test_one_positive_one_negative_per_user(self):
        ds = generate_synthetic(small())
        labels = Counter((it.user_id, it.label) for it in ds.interactions)
        assert set(labels.values()) == {1}
        assert len(labels) == 2 * SMALL["n_users"]
        assert np.mean([it.label for it in ds.interactions]) == 0.5

    def test_targets_follow_the_latest_segment(self):
        for noise in (0.0, 0.5):
            ds = generate_synthetic(small(noise_rate=noise))
            pos = [ds.item_intent[it.target_item] == r for it, r in zip(ds.interactions, ds.recent_intent) if it.label]
            neg = [ds.item_intent[it.target_item] == r for it, r in zip(ds.interactions, ds.recent_intent) if not it.label]
            assert np.mean(pos) == 1.0
            assert np.mean(neg) == 0.0

    def test_without_noise_last_item_reveals_intent(self):
        ds = generate_synthetic(small(noise_rate=0.0))
        assert all(ds.item_intent[it.item_ids[-1]] == r for it, r in zip(ds.interactions, ds.recent_intent))

    def test_single_intent_control(self):
        ds = generate_synthetic(small(n_intents=1, items_per_intent=None))
        assert set(ds.item_intent.values()) == {0}
        assert {it.target_category for it in ds.interactions} == {1}

    def test_lengths_and_categories(self):
        spec = small()
        ds = generate_synthetic(spec)
        for it in ds.interactions:
            assert spec.context_length_range[0] <= len(it.item_ids) <= spec.context_length_range[1]
            assert it.category_ids == [ds.item_intent[x] + 1 for x in it.item_ids]

    def test_intents_partition_items(self):
        spec = small()
        ds = generate_synthetic(spec)
        assert len(ds.item_intent) == spec.n_intents * spec.items_per_intent
        assert Counter(ds.item_intent.values()) == {k: spec.items_per_intent for k in range(spec.n_intents)}

    @pytest.mark.parametrize(
        "kw",
        [dict(items_per_intent=0), dict(n_intents=0), dict(items_per_intent=50), dict(segment_length_range=(3, 2)),
         dict(context_length_range=(0, 4)), dict(noise_rate=1.0), dict(positive_rule="random")],
    )
    def test_infeasible_spec(self, kw):
        with pytest.raises(SpecError):
            generate_synthetic(small(**kw))

    def test_sidecar_records_spec(self, tmp_path):
        spec = small(seed=9)
        write_synthetic(spec, tmp_path)
        raw = json.loads((tmp_path / "spec.json").read_text())
        assert SyntheticSpec(**raw) == spec


class TestCsv:
    def test_empty_file(self, tmp_path):
        p = tmp_path / "empty.csv"
        p.write_text("")
        assert parse_csv_dataset(p) == []

    def test_header_only(self):
        assert parse_csv_text(",".join(HEADER) + "\n") == []

    def test_round_trip(self, tmp_path):
        rows = [Interaction(7, [3, 4, 5], [1, 1, 2], 6, 2, 1)]
        p = tmp_path / "d.csv"
        write_csv(p, rows)
        assert parse_csv_dataset(p) == rows
        text = p.read_bytes()
        assert b"\r" not in text
        assert text.splitlines()[1] == b"7,3 4 5,1 1 2,6,2,1"

    def test_parse_serialize_parse_identity(self):
        text = format_csv(generate_synthetic(small()).interactions)
        assert format_csv(parse_csv_text(text)) == text

    def test_truncation_keeps_suffix(self):
        hist = list(range(1000, 1150))
        row = Interaction(0, hist, [5] * 150, 1, 5, 0)
        parsed = parse_csv_text(format_csv([row]), n_max=100)[0]
        assert parsed.item_ids == hist[50:]
        assert parsed.category_ids == [5] * 100
        assert len(parsed.item_ids) == 100

    @pytest.mark.parametrize(
        "line, msg",
        [
            ("1,2 3,4,5,6,1", "item_seq has 2 ids"),
            ("1,2 x,4 4,5,6,1", "not an integer"),
            ("1,2 3,4 4,5,6,2", "label must be 0 or 1"),
            ("1,2 3,4 4,5,6", "expected 6 columns"),
            ("1,,,5,6,1", "empty"),
            ("1,2 2,4 5,5,6,1", "category"),
        ],
    )
    def test_malformed_row_reports_line(self, line, msg):
        text = ",".join(HEADER) + "\n1,7 8,1 1,9,1,0\n" + line + "\n"
        with pytest.raises(ParseError, match=msg) as info:
            parse_csv_text(text)
        assert info.value.line == 3
        assert str(info.value).startswith("line 3:")

    def test_bad_header(self):
        with pytest.raises(ParseError, match="line 1"):
            parse_csv_text("user,items\n")


class TestVocabulary:
    def test_reserved_ids(self):
        v = Vocabulary.fit(toy())
        assert PAD not in v.items.values() and OOV not in v.items.values()
        assert v.item(999_999) == OOV
        assert v.n_items == len(v.items) + 2

    def test_round_trip(self):
        v = Vocabulary.fit(toy())
        w = Vocabulary.from_dict(json.loads(json.dumps(v.to_dict())))
        assert w.items == v.items and w.cats == v.cats

    def test_encoded_ids_in_range(self):
        rows = generate_synthetic(small()).interactions
        v = Vocabulary.fit(rows[:50])
        enc = encode(rows, v, 12)
        for b in make_batches(enc, 16, shuffle_seed=0):
            assert b.items.max() < v.n_items and b.cats.max() < v.n_cats
            assert np.all(b.items[b.mask] != PAD)
            assert np.all(b.items[~b.mask] == PAD)


class TestBatches:
    def test_sizes(self):
        enc = encode(toy(5), Vocabulary.fit(toy(5)), 4)
        assert [len(b) for b in make_batches(enc, 2)] == [2, 2, 1]

    def test_same_seed_same_order(self):
        enc = encode(toy(9), Vocabulary.fit(toy(9)), 4)
        a = [b.user_ids.tolist() for b in make_batches(enc, 2, shuffle_seed=5)]
        b = [b.user_ids.tolist() for b in make_batches(enc, 2, shuffle_seed=5)]
        c = [b.user_ids.tolist() for b in make_batches(enc, 2, shuffle_seed=6)]
        assert a == b and a != c

    @settings(max_examples=30, deadline=None)
    @given(st.integers(1, 40), st.integers(1, 12), st.integers(0, 2**32))
    def test_batches_partition_the_data(self, n, bs, seed):
        rows = toy(n)
        enc = encode(rows, Vocabulary.fit(rows), 4)
        seen = np.concatenate([b.user_ids for b in make_batches(enc, bs, shuffle_seed=seed)])
        assert sorted(seen.tolist()) == list(range(n))

    def test_mask(self):
        b = ContextBatch(items=np.array([[3, 4, 0], [5, 0, 0]]), cats=np.zeros((2, 3), int), lengths=np.array([2, 1]),
                         target_items=np.zeros(2, int), target_cats=np.zeros(2, int), labels=np.zeros(2),
                         user_ids=np.arange(2))
        assert b.mask.tolist() == [[True, True, False], [True, False, False]]

    def test_prefetch_preserves_order(self):
        enc = encode(toy(11), Vocabulary.fit(toy(11)), 4)
        direct = [b.user_ids.tolist() for b in make_batches(enc, 3, shuffle_seed=1)]
        ahead = [b.user_ids.tolist() for b in prefetch(make_batches(enc, 3, shuffle_seed=1), maxsize=1)]
        assert direct == ahead

    def test_prefetch_reraises(self):
        def boom():
            yield 1
            raise RuntimeError("worker failed")

        with pytest.raises(RuntimeError, match="worker failed"):
            list(prefetch(boom()))


class TestSplit:
    def test_user_level_and_fractions(self):
        rows = generate_synthetic(small(n_users=100)).interactions
        parts = split_by_user(rows, seed=0)
        users = [{it.user_id for it in p} for p in parts]
        assert [len(u) for u in users] == [80, 10, 10]
        assert not (users[0] & users[1] or users[0] & users[2] or users[1] & users[2])
        assert sum(len(p) for p in parts) == len(rows)


class TestNegativeSampling:
    def test_forced(self):
        for seed in range(20):
            assert negative_sample([1, 2, 3, 4], range(1, 6), 1, seed=seed).tolist() == [5]

    def test_same_seed(self):
        a = negative_sample([1], range(100), 10, seed=4)
        assert np.array_equal(a, negative_sample([1], range(100), 10, seed=4))

    def test_monte_carlo(self):
        rng = np.random.default_rng(0)
        history = [2, 3, 5, 7]
        counts = Counter()
        for _ in range(10_000):
            s = negative_sample(history, range(1, 11), 3, rng=rng)
            assert not set(s.tolist()) & set(history)
            assert len(set(s.tolist())) == 3
            counts.update(s.tolist())
        # 6 eligible items, each chosen with probability 1/2 per draw of 3
        assert set(counts) == {1, 4, 6, 8, 9, 10}
        freq = np.array(list(counts.values())) / 10_000
        assert np.max(np.abs(freq - 0.5)) < 0.03

    def test_pool_too_small(self):
        with pytest.raises(SamplingError):
            negative_sample([1, 2, 3], range(1, 5), 2, seed=0)
