"""Multilingual graph data model: language KGs, alignment pairs and the fused graph.

Entities keep a dense local id inside their language KG and a dense global id
in the fused graph; global ids are assigned by concatenating languages in
order. Relation ids are shared across languages, and the alignment relation
always takes the last id.
"""
from dataclasses import dataclass, field

import numpy as np

from .errors import DuplicatePairError, InputDataError

ALIGN_LABEL = "r_align"

SEED = "seed"
GENERATED = "generated"
MASKED_OUT = "masked-out"


@dataclass(frozen=True)
class EntityRef:
    language: str
    local_id: int
    global_id: int


@dataclass(frozen=True)
class RelationRef:
    id: int
    is_align: bool = False


@dataclass(frozen=True)
class AlignmentPair:
    lang_a: str
    local_a: int
    lang_b: str
    local_b: int
    provenance: str = SEED

    def key(self):
        """Order-independent identity of the pair (provenance ignored)."""
        a, b = (self.lang_a, self.local_a), (self.lang_b, self.local_b)
        return (a, b) if a <= b else (b, a)


@dataclass(frozen=True)
class CandidatePair:
    left: EntityRef
    right: EntityRef
    csls: float
    sim: float

    def __post_init__(self):
        if self.left.language == self.right.language:
            raise InputDataError(f"candidate pair within one language: {self}")

    def to_alignment(self):
        return AlignmentPair(self.left.language, self.left.local_id,
                             self.right.language, self.right.local_id, GENERATED)


def _as_triples(arr):
    arr = np.asarray(arr, dtype=np.int64)
    if arr.size == 0:
        return np.zeros((0, 3), dtype=np.int64)
    if arr.ndim != 2 or arr.shape[1] != 3:
        raise InputDataError(f"triples must have shape (n, 3), got {arr.shape}")
    return arr


def _readonly(arr):
    arr.flags.writeable = False
    return arr


@dataclass(frozen=True, eq=False)
class LanguageKG:
    """One language-specific KG. Triples are (head_local, relation_id, tail_local)."""

    language: str
    entities: tuple
    relations: tuple  # unified relation vocabulary shared by every language
    train: np.ndarray
    valid: np.ndarray = field(default_factory=lambda: np.zeros((0, 3), dtype=np.int64))
    test: np.ndarray = field(default_factory=lambda: np.zeros((0, 3), dtype=np.int64))

    def __post_init__(self):
        for split in ("train", "valid", "test"):
            arr = _readonly(_as_triples(getattr(self, split)).copy())
            object.__setattr__(self, split, arr)
            if len(arr):
                if arr[:, [0, 2]].min() < 0 or arr[:, [0, 2]].max() >= len(self.entities):
                    raise InputDataError(f"{self.language}/{split}: entity id out of range")
                if arr[:, 1].min() < 0 or arr[:, 1].max() >= len(self.relations):
                    raise InputDataError(f"{self.language}/{split}: relation id out of range")
        seen = {}
        for split in ("train", "valid", "test"):
            for t in map(tuple, getattr(self, split).tolist()):
                if t in seen and seen[t] != split:
                    raise InputDataError(f"{self.language}: triple {t} in both {seen[t]} and {split}")
                seen[t] = split

    @property
    def num_entities(self):
        return len(self.entities)

    @property
    def relation_ids(self):
        used = np.concatenate([self.train[:, 1], self.valid[:, 1], self.test[:, 1]])
        return frozenset(used.tolist())

    def all_triples(self):
        return np.concatenate([self.train, self.valid, self.test])


def split_triples(triples, ratios=(0.6, 0.3, 0.1), rng=None):
    """Shuffle and split triples into train/valid/test.

    Valid and test sizes are rounded to the nearest integer; the remainder goes
    to train.
    """
    triples = _as_triples(triples)
    if len(triples) == 0:
        raise InputDataError("cannot split an empty triple list")
    if len(ratios) != 3 or min(ratios) < 0 or abs(sum(ratios) - 1.0) > 1e-9:
        raise InputDataError(f"split ratios must be three non-negative fractions summing to 1, got {ratios}")
    rng = np.random.default_rng(rng)
    n = len(triples)
    n_valid = int(np.floor(ratios[1] * n + 0.5))
    n_test = int(np.floor(ratios[2] * n + 0.5))
    if n_valid + n_test > n:
        n_test = n - n_valid
    order = rng.permutation(n)
    shuffled = triples[order]
    n_train = n - n_valid - n_test
    return shuffled[:n_train], shuffled[n_train:n_train + n_valid], shuffled[n_train + n_valid:]


def message_edges(facts):
    """(src, dst, rel) arrays of the bidirectional neighborhood.

    A neighborhood is a set of (neighbor, relation) entries, so the two
    directed align facts of a pair (or a symmetric pair of local facts)
    yield one message per direction, not two.
    """
    f = np.asarray(facts, dtype=np.int64).reshape(-1, 3)
    e = np.concatenate([f[:, [0, 2, 1]], f[:, [2, 0, 1]]])
    if len(e):
        e = np.unique(e, axis=0)
    return e[:, 0].copy(), e[:, 1].copy(), e[:, 2].copy()


class FusedKG:
    """All language KGs plus two directed alignment facts per active pair.

    Immutable after construction. ``facts`` holds global (head, relation, tail)
    rows: first every language's train triples in language order, then the
    alignment facts in pair order.
    """

    def __init__(self, kgs, pairs=(), skipped=0):
        kgs = tuple(kgs)
        if not kgs:
            raise InputDataError("need at least one language KG")
        langs = [kg.language for kg in kgs]
        if len(set(langs)) != len(langs):
            raise InputDataError(f"duplicate language ids: {langs}")
        rel_vocab = kgs[0].relations
        for kg in kgs[1:]:
            if tuple(kg.relations) != tuple(rel_vocab):
                raise InputDataError("all language KGs must share one relation vocabulary")
        if ALIGN_LABEL in rel_vocab:
            raise InputDataError(f"{ALIGN_LABEL!r} is reserved and may not appear in triple files")

        self.kgs = kgs
        self.languages = tuple(langs)
        self.lang_index = {l: i for i, l in enumerate(langs)}
        sizes = np.array([kg.num_entities for kg in kgs], dtype=np.int64)
        self.offsets = np.concatenate([[0], np.cumsum(sizes)])
        self.num_entities = int(self.offsets[-1])
        self.relation_labels = tuple(rel_vocab) + (ALIGN_LABEL,)
        self.align_id = len(rel_vocab)
        self.num_relations = len(self.relation_labels)
        self.lang_of = _readonly(np.repeat(np.arange(len(kgs)), sizes))
        self.skipped = skipped

        seen = set()
        checked = []
        for p in pairs:
            for lang, local in ((p.lang_a, p.local_a), (p.lang_b, p.local_b)):
                if lang not in self.lang_index or not 0 <= local < kgs[self.lang_index[lang]].num_entities:
                    raise InputDataError(f"alignment pair references unknown entity ({lang}, {local}): {p}")
            if p.lang_a == p.lang_b:
                raise InputDataError(f"alignment pair within one language: {p}")
            if p.key() in seen:
                raise DuplicatePairError(f"duplicate alignment pair: {p}")
            seen.add(p.key())
            checked.append(p)
        self.pairs = tuple(checked)
        self._pair_keys = frozenset(seen)

        local = []
        for i, kg in enumerate(kgs):
            tr = kg.train.copy()
            tr[:, 0] += self.offsets[i]
            tr[:, 2] += self.offsets[i]
            local.append(tr)
        self.num_local_facts = int(sum(len(t) for t in local))
        if self.pairs:
            ga = np.array([self.global_id(p.lang_a, p.local_a) for p in self.pairs], dtype=np.int64)
            gb = np.array([self.global_id(p.lang_b, p.local_b) for p in self.pairs], dtype=np.int64)
            r = np.full(len(ga), self.align_id, dtype=np.int64)
            align = np.empty((2 * len(ga), 3), dtype=np.int64)
            align[0::2] = np.stack([ga, r, gb], axis=1)
            align[1::2] = np.stack([gb, r, ga], axis=1)
            local.append(align)
        self.facts = _readonly(np.concatenate(local) if local else np.zeros((0, 3), dtype=np.int64))
        self._build_adjacency()

    def _build_adjacency(self):
        f = self.facts
        n_f = len(f)
        # entry per (fact, endpoint): the neighbor is the other endpoint
        owner = np.concatenate([f[:, 2], f[:, 0]])
        nbr = np.concatenate([f[:, 0], f[:, 2]])
        rel = np.concatenate([f[:, 1], f[:, 1]])
        direction = np.concatenate([np.zeros(n_f, np.int8), np.ones(n_f, np.int8)])  # 0: in, 1: out
        fact = np.concatenate([np.arange(n_f), np.arange(n_f)])
        order = np.argsort(owner, kind="stable")
        self.adj_ptr = _readonly(np.concatenate([[0], np.cumsum(np.bincount(owner, minlength=self.num_entities))]))
        self.adj_nbr = _readonly(nbr[order])
        self.adj_rel = _readonly(rel[order])
        self.adj_dir = _readonly(direction[order])
        self.adj_fact = _readonly(fact[order])

    # --- lookups ---------------------------------------------------------

    def global_id(self, language, local_id):
        return int(self.offsets[self.lang_index[language]] + local_id)

    def entity(self, global_id):
        li = int(self.lang_of[global_id])
        return EntityRef(self.languages[li], int(global_id - self.offsets[li]), int(global_id))

    def relation(self, rel_id):
        if not 0 <= rel_id < self.num_relations:
            raise InputDataError(f"unknown relation id {rel_id}")
        return RelationRef(int(rel_id), rel_id == self.align_id)

    def language_range(self, language):
        i = self.lang_index[language] if isinstance(language, str) else language
        return int(self.offsets[i]), int(self.offsets[i + 1])

    def has_pair(self, pair):
        return pair.key() in self._pair_keys

    def neighbors(self, global_id):
        """(neighbor, relation, direction) entries; direction is 'in' or 'out'."""
        s, e = self.adj_ptr[global_id], self.adj_ptr[global_id + 1]
        return [(int(n), int(r), "out" if d else "in")
                for n, r, d in zip(self.adj_nbr[s:e], self.adj_rel[s:e], self.adj_dir[s:e])]

    def message_edges(self):
        return message_edges(self.facts)

    @property
    def num_facts(self):
        return len(self.facts)

    def pair_global_ids(self, pairs=None):
        pairs = self.pairs if pairs is None else pairs
        if not pairs:
            return np.zeros((0, 2), dtype=np.int64)
        return np.array([[self.global_id(p.lang_a, p.local_a), self.global_id(p.lang_b, p.local_b)]
                         for p in pairs], dtype=np.int64)

    def __repr__(self):
        return (f"FusedKG(languages={self.languages}, entities={self.num_entities}, "
                f"facts={self.num_facts}, pairs={len(self.pairs)})")


def build_fused(kgs, pairs=()):
    return FusedKG(kgs, pairs)


class MaskedView:
    """A fused graph with the alignment facts of some pairs hidden."""

    def __init__(self, base, masked_pairs):
        self.base = base
        self.masked_pairs = tuple(masked_pairs)
        keep = np.ones(base.num_facts, dtype=bool)
        index = {p.key(): i for i, p in enumerate(base.pairs)}
        for p in self.masked_pairs:
            i = index[p.key()]
            keep[base.num_local_facts + 2 * i] = False
            keep[base.num_local_facts + 2 * i + 1] = False
        self.surviving = _readonly(np.flatnonzero(keep))
        self.facts = _readonly(base.facts[self.surviving])
        self._keep = keep

    def neighbors(self, global_id):
        s, e = self.base.adj_ptr[global_id], self.base.adj_ptr[global_id + 1]
        b = self.base
        return [(int(b.adj_nbr[i]), int(b.adj_rel[i]), "out" if b.adj_dir[i] else "in")
                for i in range(s, e) if self._keep[b.adj_fact[i]]]

    def __getattr__(self, name):
        # delegate entity/relation tables to the base graph
        return getattr(self.base, name)

    @property
    def num_facts(self):
        return len(self.facts)

    def message_edges(self):
        return message_edges(self.facts)


def mask_alignment(fused, ratio, rng=None):
    """Hide ``round(ratio * |pairs|)`` alignment pairs chosen uniformly without replacement."""
    if not 0.0 <= ratio <= 1.0:
        raise InputDataError(f"mask ratio must be in [0, 1], got {ratio}")
    rng = np.random.default_rng(rng)
    n = len(fused.pairs)
    k = int(np.floor(ratio * n + 0.5))
    chosen = np.sort(rng.choice(n, size=k, replace=False)) if k else np.zeros(0, dtype=np.int64)
    return MaskedView(fused, [fused.pairs[i] for i in chosen])


def augment_with_pairs(fused, new_pairs):
    """Return a new fused graph with extra generated alignment pairs.

    Pairs already present (or repeated within ``new_pairs``) are skipped; the
    count is available as ``result.skipped``.
    """
    pairs = list(fused.pairs)
    keys = set(p.key() for p in pairs)
    skipped = 0
    for c in new_pairs:
        p = c.to_alignment() if isinstance(c, CandidatePair) else c
        if p.lang_a == p.lang_b:
            raise InputDataError(f"generated pair within one language: {p}")
        if p.key() in keys:
            skipped += 1
            continue
        keys.add(p.key())
        if p.provenance != GENERATED:
            p = AlignmentPair(p.lang_a, p.local_a, p.lang_b, p.local_b, GENERATED)
        pairs.append(p)
    return FusedKG(fused.kgs, pairs, skipped=skipped)


class SubgraphSample:
    """A k-hop sample of a fused graph, re-indexed locally.

    ``global_ids[i]`` is the fused id of local entity ``i``; seeds come first.
    """

    def __init__(self, base, seeds, global_ids, fact_index):
        self.base = base
        self.seeds = np.asarray(seeds, dtype=np.int64)
        self.global_ids = _readonly(np.asarray(global_ids, dtype=np.int64))
        self.fact_index = _readonly(np.asarray(fact_index, dtype=np.int64))
        local = {g: i for i, g in enumerate(self.global_ids.tolist())}
        gf = base.facts[self.fact_index]
        self.global_facts = _readonly(gf)
        if len(gf):
            lf = np.stack([np.array([local[h] for h in gf[:, 0].tolist()]), gf[:, 1],
                           np.array([local[t] for t in gf[:, 2].tolist()])], axis=1)
        else:
            lf = np.zeros((0, 3), dtype=np.int64)
        self.facts = _readonly(lf.astype(np.int64))
        self.num_entities = len(self.global_ids)
        self.num_relations = base.num_relations
        self.lang_of = base.lang_of[self.global_ids]
        self._local = local

    def local_id(self, global_id):
        return self._local[int(global_id)]

    def message_edges(self):
        return message_edges(self.facts)


def sample_khop(fused, seeds, k, fanout=None, rng=None):
    """Breadth-first k-hop sample.

    Every entity reached in fewer than ``k`` hops is expanded: up to ``fanout``
    of its adjacency entries (all of them when ``fanout`` is None) are kept,
    sampled uniformly without replacement. With ``fanout=None`` the sample
    holds every fact a k-layer encoder needs to embed the seeds exactly.
    """
    if k < 1:
        raise InputDataError(f"k must be >= 1, got {k}")
    if fanout is not None and fanout < 1:
        raise InputDataError(f"fanout must be >= 1, got {fanout}")
    rng = np.random.default_rng(rng)
    seeds = list(dict.fromkeys(int(s) for s in seeds))
    if not seeds:
        return SubgraphSample(fused, [], [], [])
    base = fused.base if isinstance(fused, MaskedView) else fused
    if isinstance(fused, MaskedView):
        alive = np.zeros(base.num_facts, dtype=bool)
        alive[fused.surviving] = True
    else:
        alive = None
    order = list(seeds)
    visited = set(seeds)
    facts = set()
    frontier = seeds
    for _ in range(k):
        nxt = []
        for e in sorted(frontier):
            s, t = base.adj_ptr[e], base.adj_ptr[e + 1]
            entries = np.arange(s, t)
            if alive is not None:
                entries = entries[alive[base.adj_fact[entries]]]
            if fanout is not None and len(entries) > fanout:
                entries = np.sort(rng.choice(entries, size=fanout, replace=False))
            for j in entries:
                facts.add(int(base.adj_fact[j]))
                n = int(base.adj_nbr[j])
                if n not in visited:
                    visited.add(n)
                    order.append(n)
                    nxt.append(n)
        frontier = nxt
    return SubgraphSample(base, seeds, order, sorted(facts))
