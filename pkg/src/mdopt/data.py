"""Multi-domain interaction datasets: model, synthetic generator, splits, CSV I/O.

A dataset is a list of domains, each holding parallel arrays of
``(user, item, label, split)``.  Users and items share one global id space so
the same user can appear in several domains.
"""

import csv
import math
from dataclasses import dataclass, replace
from importlib import resources
from pathlib import Path

import numpy as np

from .errors import DataError

SPLITS = ("train", "val", "test")
SPLIT_CODE = {name: code for code, name in enumerate(SPLITS)}
HEADER = ["domain_id", "user_id", "item_id", "label", "split"]
META_HEADER = ["domain_id", "n_pos", "n_neg", "ctr_ratio"]


@dataclass(eq=False)
class DomainData:
    domain_id: int
    users: np.ndarray
    items: np.ndarray
    labels: np.ndarray
    split: np.ndarray = None

    def __post_init__(self):
        self.users = np.asarray(self.users, dtype=np.int64)
        self.items = np.asarray(self.items, dtype=np.int64)
        self.labels = np.asarray(self.labels, dtype=np.int8)
        if self.split is None:
            self.split = np.zeros(len(self.labels), dtype=np.int8)
        self.split = np.asarray(self.split, dtype=np.int8)
        n = len(self.labels)
        if not (len(self.users) == len(self.items) == len(self.split) == n):
            raise DataError(f"domain {self.domain_id}: column lengths differ")

    def __len__(self):
        return len(self.labels)

    @property
    def n_pos(self):
        return int(self.labels.sum())

    @property
    def n_neg(self):
        return len(self) - self.n_pos

    def indices(self, split):
        return np.flatnonzero(self.split == SPLIT_CODE[split])

    def subset(self, idx, split=None):
        return DomainData(
            self.domain_id,
            self.users[idx],
            self.items[idx],
            self.labels[idx],
            self.split[idx] if split is None else np.full(len(idx), SPLIT_CODE[split], np.int8),
        )

    def __eq__(self, other):
        if not isinstance(other, DomainData):
            return NotImplemented
        return self.domain_id == other.domain_id and all(
            np.array_equal(getattr(self, f), getattr(other, f))
            for f in ("users", "items", "labels", "split")
        )


@dataclass(eq=False)
class MultiDomainDataset:
    domains: list
    num_users: int
    num_items: int

    def __post_init__(self):
        ids = [d.domain_id for d in self.domains]
        if ids != list(range(len(ids))):
            raise DataError(f"domain ids must be dense 0..n-1, got {ids}")
        for d in self.domains:
            if len(d) and (d.users.min() < 0 or d.users.max() >= self.num_users):
                raise DataError(f"domain {d.domain_id}: user id outside [0, {self.num_users})")
            if len(d) and (d.items.min() < 0 or d.items.max() >= self.num_items):
                raise DataError(f"domain {d.domain_id}: item id outside [0, {self.num_items})")

    @property
    def n_domains(self):
        return len(self.domains)

    def __len__(self):
        return sum(len(d) for d in self.domains)

    def __eq__(self, other):
        if not isinstance(other, MultiDomainDataset):
            return NotImplemented
        return (
            self.num_users == other.num_users
            and self.num_items == other.num_items
            and self.domains == other.domains
        )


def ctr_ratio(domain):
    """#positives / #negatives."""
    n_neg = domain.n_neg
    if n_neg == 0:
        raise DataError(f"domain {domain.domain_id} has no negative samples")
    return domain.n_pos / n_neg


def ctr_ratio_from_counts(n_pos, n_neg):
    if n_neg <= 0:
        raise DataError("ctr ratio needs at least one negative sample")
    return n_pos / n_neg


@dataclass(frozen=True)
class SyntheticSpec:
    """Settings for :func:`generate`.

    ``samples_per_domain`` is the approximate number of labelled rows in each
    domain; the exact positive/negative counts follow from the domain's drawn
    CTR ratio.  ``negative_sampling`` is ``"per_user"`` (negatives drawn from
    each user's unlabelled items) or ``"global"`` (from all unlabelled pairs).
    """

    n_domains: int = 6
    users_per_domain: int = 400
    items_per_domain: int = 300
    overlap_fraction: float = 0.5
    conflict_strength: float = 0.8
    ctr_ratio_range: tuple = (0.2, 0.5)
    latent_dim: int = 8
    samples_per_domain: int = 10000
    negative_sampling: str = "per_user"
    seed: int = 0

    def __post_init__(self):
        lo, hi = self.ctr_ratio_range
        object.__setattr__(self, "ctr_ratio_range", (float(lo), float(hi)))
        if not 0 < lo <= hi:
            raise DataError(f"ctr_ratio_range must satisfy 0 < lo <= hi, got {(lo, hi)}")
        if not 0.0 <= self.overlap_fraction <= 1.0:
            raise DataError("overlap_fraction must be in [0, 1]")
        if not 0.0 <= self.conflict_strength <= 1.0:
            raise DataError("conflict_strength must be in [0, 1]")
        if min(self.n_domains, self.users_per_domain, self.items_per_domain, self.latent_dim) < 1:
            raise DataError("domain, user, item and latent counts must be >= 1")
        if self.negative_sampling not in ("per_user", "global"):
            raise DataError(f"unknown negative_sampling {self.negative_sampling!r}")


def conflict6(seed=0):
    """The bundled 6-domain conflict benchmark (~60k rows)."""
    return SyntheticSpec(n_domains=6, conflict_strength=0.8, seed=seed)


def _entity_ids(n_domains, per_domain, overlap, rng):
    """Per-domain id arrays: a common core plus domain-private ids."""
    core = int(round(overlap * per_domain))
    private = per_domain - core
    ids = []
    for d in range(n_domains):
        own = core + d * private + np.arange(private)
        ids.append(np.concatenate([np.arange(core), own]))
    return ids, core + n_domains * private


def _split_counts(total, parts, rng):
    """Spread ``total`` over ``parts`` bins as evenly as possible, random remainder."""
    counts = np.full(parts, total // parts, dtype=np.int64)
    counts[rng.permutation(parts)[: total % parts]] += 1
    return counts


def _label_counts(samples, ratio, lo, hi):
    n_pos = max(1, int(round(samples * ratio / (1.0 + ratio))))
    n_neg = int(round(n_pos / ratio))
    # keep the realised ratio inside [lo, hi] despite rounding
    n_neg = min(max(n_neg, math.ceil(n_pos / hi)), math.floor(n_pos / lo))
    if n_neg < 1:
        raise DataError("ctr ratio range leaves no room for negative samples")
    return n_pos, n_neg


def generate(spec):
    """Sample a multi-domain click dataset with controllable cross-domain conflict.

    Domain ``d`` scores pairs with ``sigmoid(x_u^T M_d z_v)`` where
    ``M_d = (1 - c) * M_shared + c * M_private_d``.  The top-scoring pairs are
    positives; negatives are drawn uniformly from the remaining pairs so the
    domain hits its CTR ratio, drawn uniformly from ``ctr_ratio_range``.
    """
    rng = np.random.default_rng(spec.seed)
    user_sets, num_users = _entity_ids(spec.n_domains, spec.users_per_domain, spec.overlap_fraction, rng)
    item_sets, num_items = _entity_ids(spec.n_domains, spec.items_per_domain, spec.overlap_fraction, rng)
    k = spec.latent_dim
    x = rng.normal(0.0, 1.0 / np.sqrt(k), size=(num_users, k))
    z = rng.normal(0.0, 1.0 / np.sqrt(k), size=(num_items, k))
    m_shared = rng.normal(size=(k, k))
    lo, hi = spec.ctr_ratio_range
    c = spec.conflict_strength

    domains = []
    for d in range(spec.n_domains):
        m_d = (1.0 - c) * m_shared + c * rng.normal(size=(k, k))
        ratio = rng.uniform(lo, hi)
        n_pos, n_neg = _label_counts(spec.samples_per_domain, ratio, lo, hi)
        users, items = user_sets[d], item_sets[d]
        n_u, n_i = len(users), len(items)
        if n_pos + n_neg > n_u * n_i:
            raise DataError(
                f"domain {d}: {n_pos + n_neg} samples requested but only {n_u * n_i} user-item pairs exist"
            )
        logits = x[users] @ m_d @ z[items].T
        scores = 1.0 / (1.0 + np.exp(-logits))
        if spec.negative_sampling == "per_user":
            pos_per_user = _split_counts(n_pos, n_u, rng)
            neg_per_user = _split_counts(n_neg, n_u, rng)
            if np.any(pos_per_user + neg_per_user > n_i):
                raise DataError(f"domain {d}: a user needs more samples than there are items")
            rows_u, rows_i, rows_y = [], [], []
            for r in range(n_u):
                ranked = np.argsort(-scores[r], kind="stable")
                p, q = pos_per_user[r], neg_per_user[r]
                neg = rng.choice(ranked[p:], size=q, replace=False)
                rows_u.append(np.full(p + q, users[r]))
                rows_i.append(items[np.concatenate([ranked[:p], neg])])
                rows_y.append(np.r_[np.ones(p), np.zeros(q)])
            u_arr, i_arr, y_arr = map(np.concatenate, (rows_u, rows_i, rows_y))
        else:
            flat = np.argsort(-scores.ravel(), kind="stable")
            neg = rng.choice(flat[n_pos:], size=n_neg, replace=False)
            chosen = np.concatenate([flat[:n_pos], neg])
            u_arr = users[chosen // n_i]
            i_arr = items[chosen % n_i]
            y_arr = np.r_[np.ones(n_pos), np.zeros(n_neg)]
        order = rng.permutation(len(y_arr))
        domains.append(DomainData(d, u_arr[order], i_arr[order], y_arr[order]))
    # trailing ids that never received a sample are dropped so that the counts
    # survive a save/load round trip
    num_users = max(int(dom.users.max()) for dom in domains) + 1
    num_items = max(int(dom.items.max()) for dom in domains) + 1
    return MultiDomainDataset(domains, num_users, num_items)


def split(dataset, fractions=(0.8, 0.1, 0.1), seed=0):
    """Stratified-by-label random train/val/test split of every domain."""
    fractions = tuple(float(f) for f in fractions)
    if len(fractions) != 3 or any(f < 0 for f in fractions) or abs(sum(fractions) - 1.0) > 1e-9:
        raise DataError(f"split fractions must be three non-negative numbers summing to 1, got {fractions}")
    rng = np.random.default_rng(seed)
    out = []
    for dom in dataset.domains:
        if len(dom) < 3:
            raise DataError(f"domain {dom.domain_id} has fewer than 3 samples")
        codes = np.empty(len(dom), dtype=np.int8)
        for label in (0, 1):
            idx = rng.permutation(np.flatnonzero(dom.labels == label))
            n_train = int(round(fractions[0] * len(idx)))
            n_val = min(int(round(fractions[1] * len(idx))), len(idx) - n_train)
            codes[idx[:n_train]] = 0
            codes[idx[n_train : n_train + n_val]] = 1
            codes[idx[n_train + n_val :]] = 2
        out.append(replace(dom, split=codes))
    return MultiDomainDataset(out, dataset.num_users, dataset.num_items)


def metadata_path(path):
    path = Path(path)
    return path.with_name(path.stem + ".meta.csv")


def save(dataset, path, with_metadata=True):
    path = Path(path)
    with path.open("w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(HEADER)
        for dom in dataset.domains:
            for u, v, y, s in zip(dom.users, dom.items, dom.labels, dom.split):
                writer.writerow((dom.domain_id, int(u), int(v), int(y), SPLITS[s]))
    if with_metadata:
        save_metadata(dataset, metadata_path(path))
    return path


def save_metadata(dataset, path):
    with Path(path).open("w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(META_HEADER)
        for dom in dataset.domains:
            ratio = ctr_ratio(dom) if dom.n_neg else float("inf")
            writer.writerow((dom.domain_id, dom.n_pos, dom.n_neg, repr(ratio)))


def load_metadata(path):
    """Rows of ``(domain_id, n_pos, n_neg, ctr_ratio)``; extra columns are kept as strings."""
    rows = []
    with Path(path).open(newline="", encoding="utf-8") as fh:
        reader = csv.DictReader(fh)
        missing = set(META_HEADER) - set(reader.fieldnames or [])
        if missing:
            raise DataError(f"metadata header is missing {sorted(missing)}", line=1)
        for lineno, row in enumerate(reader, start=2):
            try:
                row["domain_id"] = int(row["domain_id"])
                row["n_pos"] = int(row["n_pos"])
                row["n_neg"] = int(row["n_neg"])
                row["ctr_ratio"] = float(row["ctr_ratio"])
            except ValueError as exc:
                raise DataError(str(exc), line=lineno) from None
            rows.append(row)
    return rows


def _parse_int(text, what, lineno, lo=0, hi=None):
    try:
        value = int(text)
    except ValueError:
        raise DataError(f"{what} {text!r} is not an integer", line=lineno) from None
    if value < lo or (hi is not None and value >= hi):
        bound = f"[{lo}, {hi})" if hi is not None else f">= {lo}"
        raise DataError(f"{what} {value} out of range {bound}", line=lineno)
    return value


def load(path, num_users=None, num_items=None):
    """Read a dataset CSV written by :func:`save` (or any file in that format).

    Without explicit ``num_users``/``num_items`` the counts are taken as the
    largest id seen plus one.
    """
    per_domain = {}
    with Path(path).open(newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header != HEADER:
            raise DataError(f"expected header {','.join(HEADER)}", line=1)
        for lineno, row in enumerate(reader, start=2):
            if not row:
                continue
            if len(row) != len(HEADER):
                raise DataError(f"expected {len(HEADER)} fields, got {len(row)}", line=lineno)
            d = _parse_int(row[0], "domain_id", lineno)
            u = _parse_int(row[1], "user_id", lineno, hi=num_users)
            v = _parse_int(row[2], "item_id", lineno, hi=num_items)
            y = _parse_int(row[3], "label", lineno, hi=2)
            if row[4] not in SPLIT_CODE:
                raise DataError(f"split {row[4]!r} not one of {SPLITS}", line=lineno)
            per_domain.setdefault(d, []).append((u, v, y, SPLIT_CODE[row[4]]))
    if not per_domain:
        raise DataError(f"{path}: dataset has no rows")
    if sorted(per_domain) != list(range(len(per_domain))):
        raise DataError(f"domain ids must be dense 0..n-1, got {sorted(per_domain)}")
    domains = []
    for d in range(len(per_domain)):
        arr = np.asarray(per_domain[d], dtype=np.int64)
        domains.append(DomainData(d, arr[:, 0], arr[:, 1], arr[:, 2], arr[:, 3]))
    max_u = max(int(dom.users.max()) for dom in domains) + 1
    max_i = max(int(dom.items.max()) for dom in domains) + 1
    return MultiDomainDataset(
        domains,
        max_u if num_users is None else num_users,
        max_i if num_items is None else num_items,
    )


def domain_table(dataset):
    """Per-domain statistics rows: domain_id, samples, percentage, n_pos, n_neg, ctr_ratio."""
    total = len(dataset)
    rows = []
    for dom in dataset.domains:
        rows.append(
            {
                "domain_id": dom.domain_id,
                "samples": len(dom),
                "percentage": 100.0 * len(dom) / total if total else 0.0,
                "n_pos": dom.n_pos,
                "n_neg": dom.n_neg,
                "ctr_ratio": ctr_ratio(dom),
            }
        )
    return rows


def amazon6_metadata():
    """Per-domain counts of the public six-category Amazon benchmark.

    Positive/negative counts are reconstructed from the published sample
    totals and CTR ratios; the ``name`` column holds the category.
    """
    res = resources.files("mdopt") / "resources" / "amazon6.meta.csv"
    with resources.as_file(res) as path:
        return load_metadata(path)
