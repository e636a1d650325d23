"""Datasets: synthetic intent-segmented histories, CSV I/O, vocabularies, batching.

CSV schema (UTF-8, LF line endings)::

    user_id,item_seq,cat_seq,target_item,target_cat,label
    7,12 40 40 3,2 5 5 1,40,5,1

Sequences are space-separated raw ids in chronological order (oldest first).
Encoded ids reserve 0 for padding and 1 for out-of-vocabulary items.
"""

import csv
import io
import json
import os
import queue
import threading
from dataclasses import asdict, dataclass, field

import numpy as np

from .errors import ParseError, SamplingError, SpecError
from .seeding import rng_for

PAD = 0
OOV = 1
HEADER = ["user_id", "item_seq", "cat_seq", "target_item", "target_cat", "label"]


@dataclass
class Interaction:
    user_id: int
    item_ids: list
    category_ids: list
    target_item: int
    target_category: int
    label: int


# ---------------------------------------------------------------- synthetic data


@dataclass
class SyntheticSpec:
    """Users browse in intent segments; the clicked target follows the latest segment.

    ``noise_rate`` swaps each history item for a uniformly random item with that
    probability, so the last item alone does not reveal the current intent.
    With ``hard_negatives`` the negative target is drawn from an intent that
    already appears earlier in the history whenever one exists.
    """

    n_users: int = 2000
    n_items: int = 500
    n_intents: int = 10
    items_per_intent: int | None = None
    segment_length_range: tuple = (4, 10)
    context_length_range: tuple = (10, 30)
    noise_rate: float = 0.5
    hard_negatives: bool = True
    positive_rule: str = "recent_segment"
    seed: int = 0

    def __post_init__(self):
        self.segment_length_range = tuple(self.segment_length_range)
        self.context_length_range = tuple(self.context_length_range)
        if self.items_per_intent is None and self.n_intents > 0:
            self.items_per_intent = self.n_items // self.n_intents

    def validate(self):
        errs = []
        if self.n_users < 1:
            errs.append(f"n_users={self.n_users} must be >= 1")
        if self.n_intents < 1:
            errs.append(f"n_intents={self.n_intents} must be >= 1")
        if not self.items_per_intent or self.items_per_intent < 1:
            errs.append(f"items_per_intent={self.items_per_intent} must be >= 1")
        elif self.n_intents * self.items_per_intent > self.n_items:
            errs.append(
                f"n_intents * items_per_intent = {self.n_intents * self.items_per_intent}"
                f" exceeds n_items={self.n_items}"
            )
        for name in ("segment_length_range", "context_length_range"):
            lo, hi = getattr(self, name)
            if not 1 <= lo <= hi:
                errs.append(f"{name}=({lo}, {hi}) must satisfy 1 <= lo <= hi")
        if not 0.0 <= self.noise_rate < 1.0:
            errs.append(f"noise_rate={self.noise_rate} must lie in [0, 1)")
        if self.positive_rule != "recent_segment":
            errs.append(f"positive_rule={self.positive_rule!r}; only 'recent_segment' is supported")
        if errs:
            raise SpecError("infeasible synthetic spec: " + "; ".join(errs))
        return self

    def to_dict(self):
        d = asdict(self)
        d["segment_length_range"] = list(self.segment_length_range)
        d["context_length_range"] = list(self.context_length_range)
        return d


@dataclass
class SyntheticDataset:
    interactions: list
    recent_intent: list  # per interaction: intent of the latest segment
    item_intent: dict = field(default_factory=dict)  # raw item id -> intent


def _intent_items(spec, intent):
    start = intent * spec.items_per_intent + 1
    return np.arange(start, start + spec.items_per_intent)


def generate_synthetic(spec):
    """Deterministic dataset with one positive and one negative example per user."""
    spec.validate()
    rng = rng_for(spec.seed, "data")
    item_intent = {}
    for k in range(spec.n_intents):
        for item in _intent_items(spec, k):
            item_intent[int(item)] = k
    all_items = np.array(sorted(item_intent))

    def category(item):
        return item_intent[item] + 1

    interactions, recent = [], []
    seg_lo, seg_hi = spec.segment_length_range
    ctx_lo, ctx_hi = spec.context_length_range
    for user in range(spec.n_users):
        length = int(rng.integers(ctx_lo, ctx_hi + 1))
        items, intents = [], []
        intent = -1
        while len(items) < length:
            choices = [k for k in range(spec.n_intents) if k != intent] or [intent]
            intent = int(rng.choice(choices))
            seg = int(rng.integers(seg_lo, seg_hi + 1))
            pool = _intent_items(spec, intent)
            items.extend(int(x) for x in rng.choice(pool, size=seg))
            intents.extend([intent] * seg)
        items, intents = items[:length], intents[:length]
        noise = rng.random(length) < spec.noise_rate
        for j in np.flatnonzero(noise):
            items[j] = int(rng.choice(all_items))
        last = intents[-1]

        pos_item = int(rng.choice(_intent_items(spec, last)))
        if spec.n_intents == 1:
            neg_intent = last
        else:
            seen = sorted({k for k in intents if k != last})
            others = seen if spec.hard_negatives and seen else [k for k in range(spec.n_intents) if k != last]
            neg_intent = int(rng.choice(others))
        neg_item = int(rng.choice(_intent_items(spec, neg_intent)))
        cats = [category(x) for x in items]
        for target, label in ((pos_item, 1), (neg_item, 0)):
            interactions.append(Interaction(user, list(items), list(cats), target, category(target), label))
            recent.append(last)
    return SyntheticDataset(interactions=interactions, recent_intent=recent, item_intent=item_intent)


def write_synthetic(spec, out_dir):
    """Write ``data.csv`` plus a ``spec.json`` sidecar; returns the CSV path."""
    os.makedirs(out_dir, exist_ok=True)
    ds = generate_synthetic(spec)
    path = os.path.join(out_dir, "data.csv")
    write_csv(path, ds.interactions)
    with open(os.path.join(out_dir, "spec.json"), "w", encoding="utf-8", newline="\n") as fh:
        json.dump(spec.to_dict(), fh, indent=2, sort_keys=True)
        fh.write("\n")
    return path


# ---------------------------------------------------------------- CSV


def format_csv(interactions):
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(HEADER)
    for it in interactions:
        writer.writerow([
            it.user_id,
            " ".join(str(x) for x in it.item_ids),
            " ".join(str(x) for x in it.category_ids),
            it.target_item,
            it.target_category,
            it.label,
        ])
    return buf.getvalue()


def write_csv(path, interactions):
    with open(path, "w", encoding="utf-8", newline="") as fh:
        fh.write(format_csv(interactions))


def _int(value, what, line):
    try:
        return int(value)
    except ValueError:
        raise ParseError(f"{what} is not an integer: {value!r}", line) from None


def _seq(value, what, line):
    parts = value.split()
    if not parts:
        raise ParseError(f"{what} is empty", line)
    return [_int(x, what, line) for x in parts]


def parse_csv_text(text, n_max=100):
    interactions = []
    item_cat = {}
    reader = csv.reader(io.StringIO(text))
    for lineno, row in enumerate(reader, start=1):
        if lineno == 1:
            if row != HEADER:
                raise ParseError(f"expected header {','.join(HEADER)}, got {','.join(row)}", 1)
            continue
        if not row:
            continue
        if len(row) != len(HEADER):
            raise ParseError(f"expected {len(HEADER)} columns, got {len(row)}", lineno)
        user, items, cats, target, tcat, label = row
        items = _seq(items, "item_seq", lineno)
        cats = _seq(cats, "cat_seq", lineno)
        if len(items) != len(cats):
            raise ParseError(f"item_seq has {len(items)} ids but cat_seq has {len(cats)}", lineno)
        label = _int(label, "label", lineno)
        if label not in (0, 1):
            raise ParseError(f"label must be 0 or 1, got {label}", lineno)
        target, tcat = _int(target, "target_item", lineno), _int(tcat, "target_cat", lineno)
        for item, cat in zip(items + [target], cats + [tcat]):
            known = item_cat.setdefault(item, cat)
            if known != cat:
                raise ParseError(f"item {item} has category {cat} but earlier {known}", lineno)
        interactions.append(
            Interaction(_int(user, "user_id", lineno), items[-n_max:], cats[-n_max:], target, tcat, label)
        )
    return interactions


def parse_csv_dataset(path, n_max=100):
    """Read and validate a dataset; histories keep only their most recent ``n_max`` items."""
    with open(path, encoding="utf-8", newline="") as fh:
        return parse_csv_text(fh.read(), n_max)


# ---------------------------------------------------------------- vocabulary & batching


class Vocabulary:
    """Dense ids for raw item/category ids; 0 is padding, 1 is OOV."""

    def __init__(self, items=(), cats=()):
        self.items = {int(x): i + 2 for i, x in enumerate(sorted(set(items)))}
        self.cats = {int(x): i + 2 for i, x in enumerate(sorted(set(cats)))}

    @classmethod
    def fit(cls, interactions):
        items, cats = set(), set()
        for it in interactions:
            items.update(it.item_ids)
            items.add(it.target_item)
            cats.update(it.category_ids)
            cats.add(it.target_category)
        return cls(items, cats)

    @property
    def n_items(self):
        return len(self.items) + 2

    @property
    def n_cats(self):
        return len(self.cats) + 2

    def item(self, raw):
        return self.items.get(raw, OOV)

    def cat(self, raw):
        return self.cats.get(raw, OOV)

    def to_dict(self):
        return {"items": sorted(self.items), "cats": sorted(self.cats)}

    @classmethod
    def from_dict(cls, raw):
        return cls(raw["items"], raw["cats"])


@dataclass
class EncodedData:
    items: np.ndarray
    cats: np.ndarray
    lengths: np.ndarray
    target_items: np.ndarray
    target_cats: np.ndarray
    labels: np.ndarray
    user_ids: np.ndarray

    def __len__(self):
        return len(self.labels)

    def subset(self, idx):
        return EncodedData(*(getattr(self, f)[idx] for f in self.__dataclass_fields__))


def encode(interactions, vocab, n_max):
    n = len(interactions)
    items = np.zeros((n, n_max), dtype=np.int64)
    cats = np.zeros((n, n_max), dtype=np.int64)
    lengths = np.zeros(n, dtype=np.int64)
    for i, it in enumerate(interactions):
        hist = it.item_ids[-n_max:]
        hcat = it.category_ids[-n_max:]
        lengths[i] = len(hist)
        items[i, : len(hist)] = [vocab.item(x) for x in hist]
        cats[i, : len(hist)] = [vocab.cat(x) for x in hcat]
    return EncodedData(
        items=items,
        cats=cats,
        lengths=lengths,
        target_items=np.array([vocab.item(it.target_item) for it in interactions], dtype=np.int64),
        target_cats=np.array([vocab.cat(it.target_category) for it in interactions], dtype=np.int64),
        labels=np.array([it.label for it in interactions], dtype=np.float64),
        user_ids=np.array([it.user_id for it in interactions], dtype=np.int64),
    )


@dataclass
class ContextBatch:
    items: np.ndarray
    cats: np.ndarray
    lengths: np.ndarray
    target_items: np.ndarray
    target_cats: np.ndarray
    labels: np.ndarray
    user_ids: np.ndarray

    @property
    def mask(self):
        return np.arange(self.items.shape[1])[None, :] < self.lengths[:, None]

    def __len__(self):
        return len(self.labels)

    @classmethod
    def from_encoded(cls, data, idx=None):
        sub = data if idx is None else data.subset(idx)
        return cls(**{f: getattr(sub, f) for f in EncodedData.__dataclass_fields__})


def make_batches(data, batch_size, shuffle_seed=None):
    """Yield padded :class:`ContextBatch` objects; the last partial batch is kept."""
    order = np.arange(len(data))
    if shuffle_seed is not None:
        order = rng_for(shuffle_seed, "shuffle").permutation(len(data))
    for start in range(0, len(data), batch_size):
        yield ContextBatch.from_encoded(data, order[start:start + batch_size])


def prefetch(iterable, maxsize=2):
    """Produce items on a worker thread through a bounded queue, preserving order."""
    q = queue.Queue(maxsize=maxsize)
    done = object()

    def work():
        try:
            for item in iterable:
                q.put(item)
        except BaseException as exc:  # noqa: BLE001 - re-raised on the consumer side
            q.put(exc)
        q.put(done)

    threading.Thread(target=work, daemon=True).start()
    while True:
        item = q.get()
        if item is done:
            return
        if isinstance(item, BaseException):
            raise item
        yield item


def split_by_user(interactions, fractions=(0.8, 0.1, 0.1), seed=0):
    """User-level train/valid/test split; all examples of a user land in one split."""
    users = sorted({it.user_id for it in interactions})
    perm = rng_for(seed, "split").permutation(len(users))
    n_train = int(round(fractions[0] * len(users)))
    n_valid = int(round(fractions[1] * len(users)))
    bucket = {}
    for rank, idx in enumerate(perm):
        bucket[users[idx]] = 0 if rank < n_train else 1 if rank < n_train + n_valid else 2
    parts = ([], [], [])
    for it in interactions:
        parts[bucket[it.user_id]].append(it)
    return parts


def negative_sample(history, vocab, k, seed=None, rng=None):
    """``k`` distinct items from ``vocab`` outside ``history``, uniformly without replacement."""
    excluded = set(int(x) for x in history)
    pool = np.array(sorted(int(x) for x in set(vocab) if int(x) not in excluded), dtype=np.int64)
    if k > len(pool):
        raise SamplingError(f"requested {k} negatives but only {len(pool)} items are outside the history")
    if rng is None:
        rng = rng_for(0 if seed is None else seed, "sampling")
    return rng.choice(pool, size=k, replace=False)
