"""Interaction-log ingestion, activity filtering, and leave-one-out splits."""

import logging
from dataclasses import dataclass, field

import numpy as np

from .errors import DataError

log = logging.getLogger(__name__)

MAX_PREFIX_LEN = 50


@dataclass(frozen=True)
class InteractionRecord:
    user: str
    item: str
    timestamp: int


@dataclass(frozen=True)
class Example:
    prefix: tuple
    target: int


class Vocabulary:
    """Bijection between item ids and dense indices in [0, m)."""

    def __init__(self, ids):
        self.ids = list(ids)
        self.index = {item: ix for ix, item in enumerate(self.ids)}
        if len(self.index) != len(self.ids):
            raise DataError("duplicate item id in vocabulary")

    def __len__(self):
        return len(self.ids)

    def save(self, path):
        with open(path, "w") as fh:
            for item in self.ids:
                fh.write(item + "\n")

    @classmethod
    def load(cls, path):
        with open(path) as fh:
            return cls([line.rstrip("\n") for line in fh if line != "\n"])


@dataclass
class SplitDataset:
    train: list
    validation: list
    test: list
    vocab: Vocabulary
    item_train_counts: np.ndarray
    num_users: int
    skipped_users: int = 0
    titles: list = field(default_factory=list)

    @property
    def num_items(self):
        return len(self.vocab)


def ingest(path, catalog_path=None):
    """Read a tab-separated interaction log and optional item-title catalog.

    Returns records sorted per user by timestamp (stable on ties) and the
    catalog as an id -> title dict.
    """
    records = []
    try:
        fh = open(path)
    except FileNotFoundError:
        raise DataError(f"interaction log not found: {path}") from None
    with fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.rstrip("\n")
            if not line:
                continue
            parts = line.split("\t")
            if len(parts) != 3:
                raise DataError(
                    f"{path}:{lineno}: expected user<TAB>item<TAB>timestamp, got {len(parts)} fields"
                )
            user, item, ts = parts
            if not user or not item:
                raise DataError(f"{path}:{lineno}: empty user or item id")
            try:
                ts = int(ts)
            except ValueError:
                raise DataError(f"{path}:{lineno}: timestamp is not an integer") from None
            if ts < 0:
                raise DataError(f"{path}:{lineno}: negative timestamp")
            records.append(InteractionRecord(user, item, ts))
    records.sort(key=lambda r: (r.user, r.timestamp))  # stable: file order on ties

    catalog = {}
    if catalog_path is not None:
        try:
            fh = open(catalog_path)
        except FileNotFoundError:
            raise DataError(f"catalog not found: {catalog_path}") from None
        with fh:
            for lineno, line in enumerate(fh, start=1):
                line = line.rstrip("\n")
                if not line:
                    continue
                parts = line.split("\t")
                if len(parts) != 2:
                    raise DataError(
                        f"{catalog_path}:{lineno}: expected item<TAB>title"
                    )
                catalog[parts[0]] = parts[1]
    return records, catalog


def filter_inactive(records, min_count=5):
    """Drop users and items with fewer than ``min_count`` interactions.

    Run to a fixpoint: removing an item can push a user under the threshold
    and vice versa.
    """
    if min_count < 1:
        raise DataError(f"min_count must be >= 1, got {min_count}")
    current = list(records)
    while True:
        user_counts = {}
        item_counts = {}
        for r in current:
            user_counts[r.user] = user_counts.get(r.user, 0) + 1
            item_counts[r.item] = item_counts.get(r.item, 0) + 1
        kept = [
            r
            for r in current
            if user_counts[r.user] >= min_count and item_counts[r.item] >= min_count
        ]
        if len(kept) == len(current):
            break
        current = kept
    if not current:
        raise DataError(
            f"no interactions survive filtering at min_count={min_count}; lower the threshold"
        )
    return current


def _user_sequences(records):
    """Per-user ordered item lists, users sorted by id for determinism."""
    seqs = {}
    for r in records:
        seqs.setdefault(r.user, []).append(r.item)
    return {user: seqs[user] for user in sorted(seqs)}


def split_leave_one_out(records, max_prefix_len=MAX_PREFIX_LEN):
    """Per user: last item is the test target, second-to-last the validation
    target, and every prefix of the remainder is a training example.

    Users with fewer than 3 interactions are excluded with a counted warning.
    Prefixes keep at most the ``max_prefix_len`` most recent items.
    """
    seqs = _user_sequences(records)
    vocab = Vocabulary(sorted({r.item for r in records}))
    train, validation, test = [], [], []
    skipped = 0
    counts = np.zeros(len(vocab), dtype=np.int64)
    for user, items in seqs.items():
        if len(items) < 3:
            skipped += 1
            continue
        seq = [vocab.index[item] for item in items]
        n = len(seq)
        test.append(Example(tuple(seq[: n - 1][-max_prefix_len:]), seq[n - 1]))
        validation.append(Example(tuple(seq[: n - 2][-max_prefix_len:]), seq[n - 2]))
        for k in range(1, n - 2):
            train.append(Example(tuple(seq[:k][-max_prefix_len:]), seq[k]))
        for ix in seq[: n - 2]:
            counts[ix] += 1
    if skipped:
        log.warning("excluded %d users with fewer than 3 interactions", skipped)
    if not test:
        raise DataError("no user has the 3 interactions needed for a split")
    return SplitDataset(
        train=train,
        validation=validation,
        test=test,
        vocab=vocab,
        item_train_counts=counts,
        num_users=len(seqs) - skipped,
        skipped_users=skipped,
    )


def titles_for_vocab(catalog, vocab):
    """Per-index title list; missing titles fall back to "item <index>"."""
    return [
        catalog.get(item) or f"item {ix}" for ix, item in enumerate(vocab.ids)
    ]


def dataset_stats(records):
    """Summary in the usual corpus-table schema.

    Sparsity is 1 - actions / (users * items).
    """
    users = {r.user for r in records}
    items = {r.item for r in records}
    actions = len(records)
    if not users:
        raise DataError("no records to summarize")
    return {
        "users": len(users),
        "items": len(items),
        "actions": actions,
        "avg_length": actions / len(users),
        "sparsity": 1.0 - actions / (len(users) * len(items)),
    }


def save_split(ds, splits_path, vocab_path, titles_path, manifest_path):
    ds.vocab.save(vocab_path)
    with open(titles_path, "w") as fh:
        for ix, title in enumerate(ds.titles):
            fh.write(f"{ix}\t{title}\n")
    with open(splits_path, "w") as fh:
        for name, examples in (
            ("train", ds.train),
            ("validation", ds.validation),
            ("test", ds.test),
        ):
            for ex in examples:
                prefix = ",".join(str(i) for i in ex.prefix)
                fh.write(f"{name}\t{ex.target}\t{prefix}\n")
        for ix, c in enumerate(ds.item_train_counts):
            fh.write(f"itemcount\t{ix}\t{int(c)}\n")
        fh.write(f"users\t{ds.num_users}\t{ds.skipped_users}\n")
    with open(manifest_path, "w") as fh:
        fh.write(f"items {len(ds.vocab)}\n")
        fh.write(f"users {ds.num_users}\n")
        fh.write(f"train {len(ds.train)}\n")
        fh.write(f"validation {len(ds.validation)}\n")
        fh.write(f"test {len(ds.test)}\n")


def load_split(splits_path, vocab_path, titles_path):
    vocab = Vocabulary.load(vocab_path)
    titles = [None] * len(vocab)
    with open(titles_path) as fh:
        for line in fh:
            ix, title = line.rstrip("\n").split("\t", 1)
            titles[int(ix)] = title
    splits = {"train": [], "validation": [], "test": []}
    counts = np.zeros(len(vocab), dtype=np.int64)
    num_users = skipped = 0
    with open(splits_path) as fh:
        for line in fh:
            kind, a, b = line.rstrip("\n").split("\t")
            if kind == "itemcount":
                counts[int(a)] = int(b)
            elif kind == "users":
                num_users, skipped = int(a), int(b)
            else:
                prefix = tuple(int(x) for x in b.split(",")) if b else ()
                splits[kind].append(Example(prefix, int(a)))
    return SplitDataset(
        train=splits["train"],
        validation=splits["validation"],
        test=splits["test"],
        vocab=vocab,
        item_train_counts=counts,
        num_users=num_users,
        skipped_users=skipped,
        titles=titles,
    )
