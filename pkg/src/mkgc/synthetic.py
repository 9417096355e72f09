"""Desk-scale synthetic multilingual KGs.

A latent KG is sampled from a translational model (each relation moves an
entity's latent position by a fixed offset; the tail is one of the nearest
entities to the translated point), so held-out triples are partly predictable
from structure. Each language keeps an independent random fraction of the
latent triples, renames its entities, and optionally corrupts some tails.
"""
from dataclasses import dataclass, field

import numpy as np

from .errors import InputDataError
from .kg import AlignmentPair, LanguageKG, split_triples


@dataclass
class SyntheticSpec:
    languages: int = 2
    base_entities: int = 200
    base_relations: int = 10
    base_triples: int = 2000
    coverage: tuple = (1.0, 0.6)
    seed_alignment_ratio: float = 0.4
    noise_ratio: float = 0.0
    latent_dim: int = 8
    tail_pool: int = 3
    split: tuple = (0.6, 0.3, 0.1)
    text_dim: int = 0
    text_noise: float = 0.5
    language_names: tuple = field(default_factory=tuple)

    def names(self):
        if self.language_names:
            if len(self.language_names) != self.languages:
                raise InputDataError("language_names must have one entry per language")
            return tuple(self.language_names)
        return tuple(f"L{i}" for i in range(self.languages))


@dataclass
class SyntheticData:
    kgs: list
    seed_pairs: list
    truth_pairs: list
    text: dict = None  # language -> (n_entities, text_dim) array, row = local id
    latent_ids: dict = None  # language -> array mapping local id -> latent entity


def _latent_triples(spec, rng):
    n, R = spec.base_entities, spec.base_relations
    pos = rng.normal(size=(n, spec.latent_dim))
    offsets = rng.normal(size=(R, spec.latent_dim))
    pool = min(spec.tail_pool, n - 1)
    triples = set()
    attempts = 0
    while len(triples) < spec.base_triples and attempts < 20 * spec.base_triples:
        attempts += 1
        h = int(rng.integers(n))
        r = int(rng.integers(R))
        d = np.linalg.norm(pos - (pos[h] + offsets[r]), axis=1)
        d[h] = np.inf
        near = np.argsort(d, kind="stable")[:pool]
        t = int(near[rng.integers(len(near))])
        triples.add((h, r, t))
    return np.array(sorted(triples), dtype=np.int64)


def generate_synthetic(spec, rng=None):
    """Sample a latent KG and derive ``spec.languages`` inconsistent language KGs."""
    rng = np.random.default_rng(rng)
    if len(spec.coverage) != spec.languages:
        raise InputDataError(f"need one coverage fraction per language, got {spec.coverage}")
    if any(not 0.0 < c <= 1.0 for c in spec.coverage):
        raise InputDataError(f"coverage fractions must be in (0, 1], got {spec.coverage}")
    if not 0.0 <= spec.seed_alignment_ratio <= 1.0:
        raise InputDataError("seed_alignment_ratio must be in [0, 1]")
    if not 0.0 <= spec.noise_ratio <= 1.0:
        raise InputDataError("noise_ratio must be in [0, 1]")
    if spec.base_entities < 2 or spec.base_relations < 1 or spec.base_triples < 1:
        raise InputDataError("latent KG needs >= 2 entities, >= 1 relation and >= 1 triple")

    latent = _latent_triples(spec, rng)
    names = spec.names()
    relations = tuple(f"r{j}" for j in range(spec.base_relations))
    text_base = rng.normal(size=(spec.base_entities, spec.text_dim)) if spec.text_dim else None

    kgs, latent_ids, text = [], {}, {}
    for lang, cov in zip(names, spec.coverage):
        k = int(np.floor(cov * len(latent) + 0.5))
        if k == 0:
            raise InputDataError(f"coverage {cov} leaves language {lang} without triples")
        picked = latent[np.sort(rng.choice(len(latent), size=k, replace=False))]
        ents = np.unique(picked[:, [0, 2]])
        # rename: random local order so ids carry no cross-language signal
        ents = ents[rng.permutation(len(ents))]
        to_local = {int(e): i for i, e in enumerate(ents)}
        local = np.stack([np.array([to_local[h] for h in picked[:, 0]]), picked[:, 1],
                          np.array([to_local[t] for t in picked[:, 2]])], axis=1)
        n_noise = int(np.floor(spec.noise_ratio * len(local) + 0.5))
        if n_noise:
            rows = rng.choice(len(local), size=n_noise, replace=False)
            local[rows, 2] = rng.integers(len(ents), size=n_noise)
        local = np.unique(local, axis=0)
        local = local[rng.permutation(len(local))]
        if len(local) < 3:
            raise InputDataError(f"language {lang} ends up with fewer than 3 triples")
        train, valid, test = split_triples(local, spec.split, rng)
        labels = tuple(f"{lang}_e{i}" for i in range(len(ents)))
        kgs.append(LanguageKG(lang, labels, relations, train, valid, test))
        latent_ids[lang] = ents
        if text_base is not None:
            text[lang] = text_base[ents] + spec.text_noise * rng.normal(size=(len(ents), spec.text_dim))

    truth = []
    for i in range(len(names)):
        for j in range(i + 1, len(names)):
            li, lj = names[i], names[j]
            pos_j = {int(e): k for k, e in enumerate(latent_ids[lj])}
            for a, e in enumerate(latent_ids[li]):
                b = pos_j.get(int(e))
                if b is not None:
                    truth.append(AlignmentPair(li, a, lj, b))
    n_seed = int(np.floor(spec.seed_alignment_ratio * len(truth) + 0.5))
    seed_idx = np.sort(rng.choice(len(truth), size=n_seed, replace=False)) if n_seed else []
    seeds = [truth[i] for i in seed_idx]
    return SyntheticData(kgs, seeds, truth, text or None, latent_ids)


def stats_table(kgs, seed_pairs=()):
    """Per-language entity/relation/triple counts, one line per language."""
    lines = [f"{'lang':<8}{'#entity':>10}{'#relation':>11}{'#triple':>10}"]
    for kg in kgs:
        n = len(kg.train) + len(kg.valid) + len(kg.test)
        lines.append(f"{kg.language:<8}{kg.num_entities:>10}{len(kg.relation_ids):>11}{n:>10}")
    lines.append(f"seed alignment pairs: {len(seed_pairs)}")
    return "\n".join(lines)
