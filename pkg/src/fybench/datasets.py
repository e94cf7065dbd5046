"""Interaction data: loading, k-core filtering, per-user splits, synthetic data."""

import json
import logging
import struct
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from .errors import DataError, DomainError

log = logging.getLogger(__name__)

TRAIN, VALID, TEST = 0, 1, 2
SPLITS = {"train": TRAIN, "valid": VALID, "test": TEST}
_MAGIC = b"FYBI"


@dataclass
class InteractionSet:
    """Positive (user, item, weight) triples with a split tag per triple."""

    users: np.ndarray
    items: np.ndarray
    weights: np.ndarray
    n_users: int
    n_items: int
    split: np.ndarray = None
    user_ids: list = field(default_factory=list)
    item_ids: list = field(default_factory=list)

    def __post_init__(self):
        self.users = np.asarray(self.users, dtype=np.int64)
        self.items = np.asarray(self.items, dtype=np.int64)
        self.weights = np.asarray(self.weights, dtype=np.float64)
        if self.split is None:
            self.split = np.zeros(self.users.size, dtype=np.int64)
        self.split = np.asarray(self.split, dtype=np.int64)
        if not self.user_ids:
            self.user_ids = [str(u) for u in range(self.n_users)]
        if not self.item_ids:
            self.item_ids = [str(i) for i in range(self.n_items)]

    def __len__(self):
        return int(self.users.size)

    def select(self, split):
        m = self.split == SPLITS.get(split, split)
        return self.users[m], self.items[m]

    def items_by_user(self, split):
        u, i = self.select(split)
        order = np.lexsort((i, u))
        u, i = u[order], i[order]
        bounds = np.searchsorted(u, np.arange(self.n_users + 1))
        return [i[bounds[k]: bounds[k + 1]] for k in range(self.n_users)]

    def item_counts(self, split="train"):
        _, i = self.select(split)
        return np.bincount(i, minlength=self.n_items)

    def save(self, path):
        """Binary cache: magic, JSON header, little-endian u32 (user, item,
        split) triples, f64 weights; id maps go to ``<path>.users.tsv`` and
        ``<path>.items.tsv``."""
        path = Path(path)
        header = json.dumps({"n": len(self), "n_users": self.n_users,
                             "n_items": self.n_items}, sort_keys=True).encode()
        triples = np.stack([self.users, self.items, self.split], axis=1).astype("<u4")
        with open(path, "wb") as fh:
            fh.write(_MAGIC + struct.pack("<I", len(header)) + header)
            fh.write(triples.tobytes())
            fh.write(self.weights.astype("<f8").tobytes())
        for suffix, ids in (("users", self.user_ids), ("items", self.item_ids)):
            with open(f"{path}.{suffix}.tsv", "w") as fh:
                fh.writelines(f"{raw}\t{idx}\n" for idx, raw in enumerate(ids))

    @classmethod
    def load(cls, path):
        path = Path(path)
        raw = path.read_bytes()
        if raw[:4] != _MAGIC:
            raise DataError(f"{path} is not an interaction cache")
        (hlen,) = struct.unpack("<I", raw[4:8])
        header = json.loads(raw[8: 8 + hlen])
        n = header["n"]
        off = 8 + hlen
        triples = np.frombuffer(raw, dtype="<u4", count=3 * n, offset=off).reshape(n, 3)
        weights = np.frombuffer(raw, dtype="<f8", count=n, offset=off + 12 * n)
        ids = {}
        for suffix in ("users", "items"):
            lines = Path(f"{path}.{suffix}.tsv").read_text().splitlines()
            ids[suffix] = [ln.split("\t")[0] for ln in lines]
        return cls(triples[:, 0].astype(np.int64), triples[:, 1].astype(np.int64),
                   weights.copy(), header["n_users"], header["n_items"],
                   triples[:, 2].astype(np.int64), ids["users"], ids["items"])


def _detect_delimiter(line):
    for d in ("\t", "::", ","):
        if d in line:
            return d
    return None


def load_tsv(path, threshold=3.0):
    """Read ``user, item, rating[, timestamp]`` rows; ratings ``>= threshold``
    become positives.

    Tab and comma delimiters are detected from the first data row (the
    ``::`` separator of MovieLens dumps is accepted too). A repeated
    (user, item) pair keeps its last rating. Raw ids are remapped to dense
    indices in order of first appearance among kept rows.
    """
    rows = {}
    duplicates = 0
    delim = None
    with open(path) as fh:
        for lineno, line in enumerate(fh, 1):
            line = line.strip()
            if not line or line.startswith("#"):
                continue
            if delim is None:
                delim = _detect_delimiter(line)
                if delim is None:
                    raise DataError(f"{path}:{lineno}: no tab or comma delimiter")
            parts = [p.strip() for p in line.split(delim)]
            if len(parts) < 3:
                raise DataError(f"{path}:{lineno}: expected at least 3 fields")
            try:
                rating = float(parts[2])
            except ValueError:
                if lineno == 1:
                    continue  # header row
                raise DataError(f"{path}:{lineno}: rating {parts[2]!r} is not a number") from None
            key = (parts[0], parts[1])
            if key in rows:
                duplicates += 1
                del rows[key]
            rows[key] = rating
    if duplicates:
        log.warning("%d duplicate (user, item) rows; last rating kept", duplicates)
    user_ix, item_ix = {}, {}
    users, items, weights = [], [], []
    for (u, i), r in rows.items():
        if r < threshold:
            continue
        users.append(user_ix.setdefault(u, len(user_ix)))
        items.append(item_ix.setdefault(i, len(item_ix)))
        weights.append(r)
    if not users:
        raise DataError(f"{path}: no interactions at or above threshold {threshold}")
    data = InteractionSet(users, items, weights, len(user_ix), len(item_ix),
                          user_ids=list(user_ix), item_ids=list(item_ix))
    data.duplicates = duplicates
    return data


def _remap(data, keep):
    users, items = data.users[keep], data.items[keep]
    uu, u_new = np.unique(users, return_inverse=True)
    ii, i_new = np.unique(items, return_inverse=True)
    return InteractionSet(u_new, i_new, data.weights[keep], uu.size, ii.size,
                          data.split[keep], [data.user_ids[u] for u in uu],
                          [data.item_ids[i] for i in ii])


def k_core_filter(data, k):
    """Drop users and items with fewer than ``k`` interactions until nothing
    changes, then re-index densely."""
    if k < 1:
        raise DomainError("k must be >= 1")
    keep = np.ones(len(data), dtype=bool)
    while True:
        uc = np.bincount(data.users[keep], minlength=data.n_users)
        ic = np.bincount(data.items[keep], minlength=data.n_items)
        new = keep & (uc[data.users] >= k) & (ic[data.items] >= k)
        if new.sum() == keep.sum():
            break
        keep = new
    if not keep.any():
        raise DomainError(f"{k}-core of the data is empty")
    return _remap(data, keep)


def split_per_user(data, ratios=(0.8, 0.1, 0.1), seed=0):
    """Seeded per-user split into train/valid/test.

    Validation and test get ``max(1, floor(ratio * n))`` items each when the
    user has at least 3 interactions; the remainder goes to train. Users with
    fewer than 3 interactions are train-only.
    """
    if len(ratios) != 3 or abs(sum(ratios) - 1.0) > 1e-9:
        raise DomainError("ratios must be three fractions summing to 1")
    split = np.zeros(len(data), dtype=np.int64)
    order = np.argsort(data.users, kind="stable")
    bounds = np.searchsorted(data.users[order], np.arange(data.n_users + 1))
    short = 0
    for u in range(data.n_users):
        idx = order[bounds[u]: bounds[u + 1]]
        n = idx.size
        if n < 3:
            short += n > 0
            continue
        idx = idx[np.random.default_rng([5, seed, u]).permutation(n)]
        n_valid = max(1, int(np.floor(ratios[1] * n)))
        n_test = max(1, int(np.floor(ratios[2] * n)))
        split[idx[n - n_valid - n_test: n - n_test]] = VALID
        split[idx[n - n_test:]] = TEST
    if short:
        log.warning("%d users with fewer than 3 interactions kept train-only", short)
    return replace(data, split=split)


def synth_planted(n_users, n_items, d, temperature, interactions_per_user, seed):
    """Planted low-rank data.

    Factors are drawn from ``N(0, 1/d)``; each user's items are sampled without
    replacement from ``softmax(temperature * u V^T)`` (Gumbel top-k).

    Returns:
      ``(InteractionSet, (U, V))``.
    """
    if min(n_users, n_items, d, interactions_per_user) <= 0 or temperature < 0:
        raise DomainError("synth_planted parameters must be positive")
    if interactions_per_user >= n_items:
        raise DomainError("interactions_per_user must be smaller than n_items")
    rng = np.random.default_rng([4, seed])
    U = rng.standard_normal((n_users, d)) / np.sqrt(d)
    V = rng.standard_normal((n_items, d)) / np.sqrt(d)
    logits = temperature * (U @ V.T)
    g = rng.gumbel(size=logits.shape)
    top = np.argsort(-(logits + g), axis=1, kind="stable")[:, :interactions_per_user]
    users = np.repeat(np.arange(n_users), interactions_per_user)
    items = top.reshape(-1)
    data = InteractionSet(users, items, np.ones(users.size), n_users, n_items)
    return data, (U, V)
