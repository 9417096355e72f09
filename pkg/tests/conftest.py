import numpy as np
import pytest

from mkgc.kg import AlignmentPair, LanguageKG
from mkgc.synthetic import SyntheticSpec, generate_synthetic

RELS = ("r0", "r1", "r2")


def make_kg(lang, n, train, valid=(), test=(), relations=RELS):
    ents = tuple(f"{lang}_e{i}" for i in range(n))
    return LanguageKG(lang, ents, relations, np.array(train, dtype=np.int64).reshape(-1, 3),
                      np.array(valid, dtype=np.int64).reshape(-1, 3), np.array(test, dtype=np.int64).reshape(-1, 3))


def random_kgs(rng, n_langs=2, max_entities=8, max_triples=10, relations=RELS):
    kgs = []
    for i in range(n_langs):
        n = int(rng.integers(2, max_entities + 1))
        m = int(rng.integers(1, max_triples + 1))
        tr = {(int(rng.integers(n)), int(rng.integers(len(relations))), int(rng.integers(n))) for _ in range(m)}
        kgs.append(make_kg(f"L{i}", n, sorted(tr), relations=relations))
    return kgs


def random_pairs(rng, kgs, count):
    pairs, seen = [], set()
    for _ in range(count * 5):
        if len(pairs) == count:
            break
        i, j = rng.choice(len(kgs), size=2, replace=False)
        a, b = kgs[i], kgs[j]
        p = AlignmentPair(a.language, int(rng.integers(a.num_entities)), b.language, int(rng.integers(b.num_entities)))
        if p.key() not in seen:
            seen.add(p.key())
            pairs.append(p)
    return pairs


@pytest.fixture
def two_kgs():
    en = make_kg("en", 4, [(0, 0, 1), (1, 1, 2), (2, 0, 3)], valid=[(0, 1, 3)], test=[(3, 2, 0)])
    de = make_kg("de", 3, [(0, 0, 1), (1, 2, 2)], valid=[(2, 0, 0)])
    return en, de


@pytest.fixture(scope="session")
def small_synthetic():
    spec = SyntheticSpec(languages=2, base_entities=40, base_relations=4, base_triples=200,
                         coverage=(1.0, 0.6), seed_alignment_ratio=0.4, text_dim=8)
    return generate_synthetic(spec, 3)
