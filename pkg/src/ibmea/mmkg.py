"""Multi-modal knowledge graphs: data model, file I/O, raw features, synthetic tasks.

On-disk layout of one MMKG directory::

    triples.txt   "head relation tail" per line
    attrs.txt     "entity attribute" per line (repeats allowed)
    images.bin    row-major float32 blob
    images.json   {"dim": d_v, "entities": [ids in blob row order]}
    meta.json     {"n_entities", "relation_vocab_size", "attribute_vocab_size"}

``meta.json`` is optional on load; without it sizes are inferred from the
largest id seen.
"""

from __future__ import annotations

import json
import logging
import os
from collections import Counter
from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np
import scipy.sparse as sp

from .errors import ConfigError, ParseError, ValidationError

logger = logging.getLogger(__name__)

TRIPLES_FILE = "triples.txt"
ATTRS_FILE = "attrs.txt"
IMAGES_FILE = "images.bin"
IMAGES_INDEX_FILE = "images.json"
META_FILE = "meta.json"


@dataclass(frozen=True, eq=False)
class MMKG:
    n_entities: int
    triples: np.ndarray  # (m, 3) int64: head, relation, tail
    attributes: dict  # entity -> sorted tuple of attribute ids (multiset)
    image_features: dict  # entity -> float32 vector (d_v,)
    relation_vocab_size: int
    attribute_vocab_size: int

    def __post_init__(self):
        triples = np.asarray(self.triples, dtype=np.int64).reshape(-1, 3)
        object.__setattr__(self, "triples", triples)
        attrs = {int(e): tuple(sorted(int(a) for a in v)) for e, v in self.attributes.items() if len(v)}
        object.__setattr__(self, "attributes", attrs)
        imgs = {int(e): np.asarray(v, dtype=np.float32) for e, v in self.image_features.items()}
        object.__setattr__(self, "image_features", imgs)
        self.validate()

    @property
    def entity_ids(self):
        return range(self.n_entities)

    @property
    def image_dim(self):
        if not self.image_features:
            return None
        return next(iter(self.image_features.values())).shape[0]

    def validate(self):
        n = self.n_entities
        if n < 0:
            raise ValidationError(f"negative entity count {n}")
        t = self.triples
        if len(t):
            if t[:, [0, 2]].min() < 0 or t[:, [0, 2]].max() >= n:
                raise ValidationError(f"triple entity id outside [0, {n})")
            if t[:, 1].min() < 0 or t[:, 1].max() >= self.relation_vocab_size:
                raise ValidationError(f"relation id outside [0, {self.relation_vocab_size})")
        for e, attrs in self.attributes.items():
            if not 0 <= e < n:
                raise ValidationError(f"attribute entity {e} outside [0, {n})")
            if attrs[0] < 0 or attrs[-1] >= self.attribute_vocab_size:
                raise ValidationError(f"attribute id on entity {e} outside [0, {self.attribute_vocab_size})")
        dims = {v.shape for v in self.image_features.values()}
        if len(dims) > 1:
            raise ValidationError(f"image feature dimensions disagree: {sorted(dims)}")
        for e, v in self.image_features.items():
            if not 0 <= e < n:
                raise ValidationError(f"image entity {e} outside [0, {n})")
            if v.ndim != 1 or not np.all(np.isfinite(v)):
                raise ValidationError(f"image feature of entity {e} is not a finite vector")

    def __eq__(self, other):
        if not isinstance(other, MMKG):
            return NotImplemented
        if (self.n_entities, self.relation_vocab_size, self.attribute_vocab_size) != (
            other.n_entities,
            other.relation_vocab_size,
            other.attribute_vocab_size,
        ):
            return False
        if not np.array_equal(self.triples, other.triples):
            return False
        if self.attributes != other.attributes:
            return False
        if self.image_features.keys() != other.image_features.keys():
            return False
        return all(np.array_equal(v, other.image_features[e]) for e, v in self.image_features.items())

    __hash__ = None


@dataclass(frozen=True, eq=False)
class AlignmentTask:
    kg1: MMKG
    kg2: MMKG
    train_pairs: np.ndarray  # (k, 2) int64
    test_pairs: np.ndarray
    seed_ratio: float

    def __post_init__(self):
        object.__setattr__(self, "train_pairs", np.asarray(self.train_pairs, dtype=np.int64).reshape(-1, 2))
        object.__setattr__(self, "test_pairs", np.asarray(self.test_pairs, dtype=np.int64).reshape(-1, 2))
        self.validate()

    def validate(self):
        for name, pairs in (("train", self.train_pairs), ("test", self.test_pairs)):
            if len(pairs) == 0:
                continue
            if pairs[:, 0].min() < 0 or pairs[:, 0].max() >= self.kg1.n_entities:
                raise ValidationError(f"{name} pair references an entity outside kg1")
            if pairs[:, 1].min() < 0 or pairs[:, 1].max() >= self.kg2.n_entities:
                raise ValidationError(f"{name} pair references an entity outside kg2")
            for side in (0, 1):
                if len(np.unique(pairs[:, side])) != len(pairs):
                    raise ValidationError(f"an entity appears twice on side {side + 1} of the {name} split")
        train = set(map(tuple, self.train_pairs.tolist()))
        if train & set(map(tuple, self.test_pairs.tolist())):
            raise ValidationError("train and test pairs overlap")
        total = len(self.train_pairs) + len(self.test_pairs)
        if total and abs(len(self.train_pairs) - self.seed_ratio * total) > 1:
            raise ValidationError(
                f"{len(self.train_pairs)} train pairs of {total} disagrees with seed_ratio {self.seed_ratio}"
            )

    def __eq__(self, other):
        if not isinstance(other, AlignmentTask):
            return NotImplemented
        return (
            self.kg1 == other.kg1
            and self.kg2 == other.kg2
            and np.array_equal(self.train_pairs, other.train_pairs)
            and np.array_equal(self.test_pairs, other.test_pairs)
            and self.seed_ratio == other.seed_ratio
        )

    __hash__ = None


@dataclass(frozen=True, eq=False)
class RawModalFeatures:
    x_g: np.ndarray  # (n, d_g)
    x_v: np.ndarray  # (n, d_v)
    x_a: np.ndarray  # (n, d_a) counts
    x_r: np.ndarray  # (n, d_r) counts
    adjacency: sp.csr_matrix  # (n, n) symmetric, unit diagonal

    @property
    def n_entities(self):
        return self.x_g.shape[0]

    def modality(self, m):
        return {"g": self.x_g, "v": self.x_v, "a": self.x_a, "r": self.x_r}[m]

    def replace(self, **changes):
        return replace(self, **changes)


@dataclass(frozen=True)
class NoiseSpec:
    edge_drop: float = 0.0
    attr_flip: float = 0.0
    image_noise: float = 0.0

    def __post_init__(self):
        for name in ("edge_drop", "attr_flip", "image_noise"):
            v = getattr(self, name)
            if not 0.0 <= v <= 1.0:
                raise ConfigError(f"noise.{name}={v} outside [0, 1]")


# ---------------------------------------------------------------------------
# file I/O


def _read_int_rows(path, width):
    rows = []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            tokens = line.split()
            if not tokens:
                continue
            if len(tokens) != width:
                raise ParseError(path, lineno, f"expected {width} integers, got {len(tokens)} tokens")
            try:
                values = [int(tok) for tok in tokens]
            except ValueError:
                raise ParseError(path, lineno, f"non-integer token in {line.strip()!r}") from None
            if min(values) < 0:
                raise ParseError(path, lineno, "negative id")
            rows.append(values)
    return np.asarray(rows, dtype=np.int64).reshape(-1, width)


def _read_images(path):
    path = Path(path)
    index_path = path.with_suffix(".json")
    with open(index_path, encoding="utf-8") as fh:
        try:
            index = json.load(fh)
        except json.JSONDecodeError as exc:
            raise ParseError(index_path, exc.lineno, exc.msg) from None
    dim, ids = index.get("dim"), index.get("entities")
    if not isinstance(dim, int) or dim <= 0 or not isinstance(ids, list):
        raise ValidationError(f"{index_path}: sidecar needs a positive integer 'dim' and an 'entities' list")
    blob = np.fromfile(path, dtype="<f4")
    if blob.size != dim * len(ids):
        raise ValidationError(
            f"{path}: blob holds {blob.size} floats, sidecar declares {len(ids)} rows of dim {dim}"
        )
    if len(set(ids)) != len(ids):
        raise ValidationError(f"{index_path}: duplicate entity ids")
    matrix = blob.reshape(len(ids), dim).astype(np.float32)
    return {int(e): matrix[i] for i, e in enumerate(ids)}


def load_mmkg(triples_path, attrs_path=None, img_feats_path=None, meta_path=None):
    """Read an MMKG from its triples/attributes/image files.

    Entities that only occur in the attribute or image files are still
    registered. Missing optional files mean "no attributes" / "no images".
    """
    triples = _read_int_rows(triples_path, 3)
    attr_rows = _read_int_rows(attrs_path, 2) if attrs_path and os.path.exists(attrs_path) else np.zeros((0, 2), np.int64)
    images = _read_images(img_feats_path) if img_feats_path and os.path.exists(img_feats_path) else {}

    max_entity = -1
    if len(triples):
        max_entity = max(max_entity, int(triples[:, [0, 2]].max()))
    if len(attr_rows):
        max_entity = max(max_entity, int(attr_rows[:, 0].max()))
    if images:
        max_entity = max(max_entity, max(images))
    n = max_entity + 1
    n_rel = int(triples[:, 1].max()) + 1 if len(triples) else 0
    n_attr = int(attr_rows[:, 1].max()) + 1 if len(attr_rows) else 0
    if meta_path and os.path.exists(meta_path):
        with open(meta_path, encoding="utf-8") as fh:
            meta = json.load(fh)
        n = meta.get("n_entities", n)
        n_rel = meta.get("relation_vocab_size", n_rel)
        n_attr = meta.get("attribute_vocab_size", n_attr)

    attributes = {}
    for e, a in attr_rows.tolist():
        attributes.setdefault(e, []).append(a)
    return MMKG(
        n_entities=n,
        triples=triples,
        attributes=attributes,
        image_features=images,
        relation_vocab_size=n_rel,
        attribute_vocab_size=n_attr,
    )


def load_mmkg_dir(directory):
    d = Path(directory)
    return load_mmkg(d / TRIPLES_FILE, d / ATTRS_FILE, d / IMAGES_FILE, d / META_FILE)


def save_mmkg(kg, directory):
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    with open(d / TRIPLES_FILE, "w", encoding="utf-8") as fh:
        fh.writelines(f"{h} {r} {t}\n" for h, r, t in kg.triples.tolist())
    with open(d / ATTRS_FILE, "w", encoding="utf-8") as fh:
        for e in sorted(kg.attributes):
            fh.writelines(f"{e} {a}\n" for a in kg.attributes[e])
    ids = sorted(kg.image_features)
    if ids:
        np.stack([kg.image_features[e] for e in ids]).astype("<f4").tofile(d / IMAGES_FILE)
        with open(d / IMAGES_INDEX_FILE, "w", encoding="utf-8") as fh:
            json.dump({"dim": kg.image_dim, "entities": ids}, fh)
    with open(d / META_FILE, "w", encoding="utf-8") as fh:
        json.dump(
            {
                "n_entities": kg.n_entities,
                "relation_vocab_size": kg.relation_vocab_size,
                "attribute_vocab_size": kg.attribute_vocab_size,
            },
            fh,
        )


def read_pairs(path):
    return _read_int_rows(path, 2)


def write_pairs(pairs, path):
    with open(path, "w", encoding="utf-8") as fh:
        fh.writelines(f"{a} {b}\n" for a, b in np.asarray(pairs).tolist())


def save_task(task, directory):
    d = Path(directory)
    save_mmkg(task.kg1, d / "kg1")
    save_mmkg(task.kg2, d / "kg2")
    write_pairs(task.train_pairs, d / "train_pairs.txt")
    write_pairs(task.test_pairs, d / "test_pairs.txt")
    with open(d / "task.json", "w", encoding="utf-8") as fh:
        json.dump({"seed_ratio": task.seed_ratio}, fh)


def load_task(directory):
    d = Path(directory)
    if not (d / "task.json").exists():
        raise FileNotFoundError(f"{d} holds no task.json")
    with open(d / "task.json", encoding="utf-8") as fh:
        meta = json.load(fh)
    return AlignmentTask(
        kg1=load_mmkg_dir(d / "kg1"),
        kg2=load_mmkg_dir(d / "kg2"),
        train_pairs=read_pairs(d / "train_pairs.txt"),
        test_pairs=read_pairs(d / "test_pairs.txt"),
        seed_ratio=float(meta["seed_ratio"]),
    )


# ---------------------------------------------------------------------------
# raw features


def frequency_vocabulary(counts, size):
    """Top-``size`` items by count, ties broken by ascending id -> column map."""
    ranked = sorted(counts.items(), key=lambda kv: (-kv[1], kv[0]))[:size]
    return {item: col for col, (item, _) in enumerate(ranked)}


def attribute_counts(kg):
    c = Counter()
    for attrs in kg.attributes.values():
        c.update(attrs)
    return c


def relation_counts(kg):
    # every triple adds one head and one tail incidence, so triple counts rank identically
    return Counter(kg.triples[:, 1].tolist())


def adjacency_matrix(kg):
    n = kg.n_entities
    h, t = kg.triples[:, 0], kg.triples[:, 2]
    rows = np.concatenate([h, t, np.arange(n)])
    cols = np.concatenate([t, h, np.arange(n)])
    adj = sp.coo_matrix((np.ones(len(rows), np.float32), (rows, cols)), shape=(n, n)).tocsr()
    adj.data[:] = 1.0
    return adj


def impute_images(kg, adjacency=None):
    """Fill missing image vectors by breadth-first neighbour averaging.

    Each round, every still-missing entity with at least one filled neighbour
    takes the mean of those neighbours (as filled at the start of the round).
    Entities never reached get zeros. Returns an (n, d_v) float32 matrix.
    """
    n, dim = kg.n_entities, kg.image_dim or 0
    out = np.zeros((n, dim), np.float32)
    have = np.zeros(n, dtype=bool)
    for e, v in kg.image_features.items():
        out[e] = v
        have[e] = True
    if dim == 0 or have.all():
        return out
    adj = adjacency_matrix(kg) if adjacency is None else adjacency
    adj = adj.tolil()
    adj.setdiag(0)
    adj = adj.tocsr()
    adj.eliminate_zeros()
    adj.data[:] = 1.0
    while True:
        missing = ~have
        n_filled = adj[missing] @ have.astype(np.float32)
        reach = n_filled > 0
        if not reach.any():
            break
        idx = np.flatnonzero(missing)[reach]
        sums = adj[idx] @ (out * have[:, None])
        out[idx] = sums / n_filled[reach][:, None]
        have[idx] = True
    return out


def bag_features(kg, attr_vocab, rel_vocab):
    n = kg.n_entities
    x_a = np.zeros((n, len(attr_vocab)), np.float32)
    for e, attrs in kg.attributes.items():
        for a in attrs:
            col = attr_vocab.get(a)
            if col is not None:
                x_a[e, col] += 1
    x_r = np.zeros((n, len(rel_vocab)), np.float32)
    for h, r, t in kg.triples.tolist():
        col = rel_vocab.get(r)
        if col is not None:
            x_r[h, col] += 1
            x_r[t, col] += 1
    return x_a, x_r


def init_node_features(n, d_g, rng_seed):
    rng = np.random.default_rng(rng_seed)
    return (rng.standard_normal((n, d_g)) / np.sqrt(d_g)).astype(np.float32)


def build_raw_features(kg, d_g, rng_seed, d_a=1000, d_r=1000, attr_vocab=None, rel_vocab=None, d_v=None):
    """Raw per-modality inputs for one KG.

    Vocabularies default to this KG's own frequency ranking; pass shared ones
    (see :func:`build_task_features`) so both KGs use the same columns.
    """
    if d_g <= 0:
        raise ConfigError(f"d_g must be positive, got {d_g}")
    if attr_vocab is None:
        attr_vocab = frequency_vocabulary(attribute_counts(kg), d_a)
    if rel_vocab is None:
        rel_vocab = frequency_vocabulary(relation_counts(kg), d_r)
    adj = adjacency_matrix(kg)
    x_v = impute_images(kg, adj)
    if x_v.shape[1] == 0 and d_v:
        x_v = np.zeros((kg.n_entities, d_v), np.float32)
    x_a, x_r = bag_features(kg, attr_vocab, rel_vocab)
    return RawModalFeatures(
        x_g=init_node_features(kg.n_entities, d_g, rng_seed), x_v=x_v, x_a=x_a, x_r=x_r, adjacency=adj
    )


def build_task_features(task, d_g, rng_seed, d_a=1000, d_r=1000):
    """Raw features for both KGs with a vocabulary ranked over their union."""
    attr_vocab = frequency_vocabulary(attribute_counts(task.kg1) + attribute_counts(task.kg2), d_a)
    rel_vocab = frequency_vocabulary(relation_counts(task.kg1) + relation_counts(task.kg2), d_r)
    seeds = np.random.SeedSequence(rng_seed).spawn(2)
    d_v = task.kg1.image_dim or task.kg2.image_dim
    return tuple(
        build_raw_features(kg, d_g, int(s.generate_state(1)[0]), attr_vocab=attr_vocab, rel_vocab=rel_vocab, d_v=d_v)
        for kg, s in zip((task.kg1, task.kg2), seeds)
    )


# ---------------------------------------------------------------------------
# synthetic tasks


def split_pairs(pairs, seed_ratio, rng):
    pairs = np.asarray(pairs, dtype=np.int64)
    n_train = int(round(seed_ratio * len(pairs)))
    if n_train == 0 or n_train == len(pairs):
        raise ConfigError(
            f"seed_ratio={seed_ratio} over {len(pairs)} pairs leaves {n_train} train / {len(pairs) - n_train} test"
        )
    order = rng.permutation(len(pairs))
    train = pairs[np.sort(order[:n_train])]
    test = pairs[np.sort(order[n_train:])]
    return train, test


def _unit_rows(rng, n, d):
    x = rng.standard_normal((n, d))
    return x / np.linalg.norm(x, axis=1, keepdims=True)


def generate_synthetic_task(
    n_entities,
    n_relations,
    n_attributes,
    d_v,
    edge_prob,
    noise=None,
    seed_ratio=0.3,
    rng_seed=0,
    attrs_per_entity=4,
    image_coverage=1.0,
):
    """Random MMKG plus a permuted, perturbed copy; gold pairs are the permutation.

    ``noise.image_noise`` = λ mixes each kg2 image as (1-λ)·feat + λ·ε with ε a
    fresh unit vector.
    """
    noise = noise or NoiseSpec()
    if n_entities < 2:
        raise ConfigError("need at least 2 entities")
    if not 0.0 < seed_ratio < 1.0:
        raise ConfigError(f"seed_ratio={seed_ratio} outside (0, 1)")
    if not 0.0 <= edge_prob <= 1.0:
        raise ConfigError(f"edge_prob={edge_prob} outside [0, 1]")
    if n_relations < 1 or n_attributes < 1 or d_v < 1:
        raise ConfigError("n_relations, n_attributes and d_v must be positive")
    rng = np.random.default_rng(rng_seed)
    n = n_entities

    iu, ju = np.triu_indices(n, k=1)
    keep = rng.random(len(iu)) < edge_prob
    heads, tails = iu[keep], ju[keep]
    flip = rng.random(len(heads)) < 0.5
    heads, tails = np.where(flip, tails, heads), np.where(flip, heads, tails)
    rels = rng.integers(0, n_relations, len(heads))
    triples1 = np.stack([heads, rels, tails], axis=1)

    n_attr = 1 + rng.poisson(max(attrs_per_entity - 1, 0), n)
    attrs1 = {e: rng.integers(0, n_attributes, k).tolist() for e, k in enumerate(n_attr)}

    imaged = np.flatnonzero(rng.random(n) < image_coverage)
    feats = _unit_rows(rng, n, d_v).astype(np.float32)
    images1 = {int(e): feats[e] for e in imaged}

    kg1 = MMKG(n, triples1, attrs1, images1, n_relations, n_attributes)

    perm = rng.permutation(n)  # kg1 entity e -> kg2 entity perm[e]
    kept = triples1[rng.random(len(triples1)) >= noise.edge_drop]
    triples2 = np.stack([perm[kept[:, 0]], kept[:, 1], perm[kept[:, 2]]], axis=1)
    triples2 = triples2[np.lexsort(triples2.T[::-1])]

    attrs2 = {}
    for e, attrs in attrs1.items():
        attrs = np.asarray(attrs)
        resample = rng.random(len(attrs)) < noise.attr_flip
        attrs = np.where(resample, rng.integers(0, n_attributes, len(attrs)), attrs)
        attrs2[int(perm[e])] = attrs.tolist()

    lam = noise.image_noise
    eps = _unit_rows(rng, n, d_v).astype(np.float32)
    images2 = {int(perm[e]): ((1 - lam) * feats[e] + lam * eps[e]).astype(np.float32) for e in imaged}

    kg2 = MMKG(n, triples2, attrs2, images2, n_relations, n_attributes)
    gold = np.stack([np.arange(n), perm], axis=1)
    train, test = split_pairs(gold, seed_ratio, rng)
    return AlignmentTask(kg1, kg2, train, test, seed_ratio)
