"""TransE decoder, negative sampling, margin-ranking loss and filtered ranking metrics."""
import json
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from . import diffmath as dm
from .errors import InputDataError
from .kg import EntityRef
from .parallel import worker_count

PREDICT_TAIL = "predict-tail"
PREDICT_HEAD = "predict-head"


class DecoderParams:
    """TransE relation vectors for every non-alignment relation, plus the margin."""

    def __init__(self, relations, margin=0.3):
        if margin <= 0:
            raise InputDataError(f"margin must be positive, got {margin}")
        self.relations = relations
        self.margin = margin

    @classmethod
    def init(cls, num_relations, dim, rng, margin=0.3, init_std=0.02):
        rng = np.random.default_rng(rng)
        return cls(rng.normal(0.0, init_std, size=(num_relations, dim)), margin)

    def vector(self, rel):
        if not 0 <= rel < len(self.relations):
            raise InputDataError(f"relation {rel} has no decoder embedding (alignment is never scored)")
        return self.relations[rel]


def _distance(diff):
    # one reduction for single triples and candidate batches, so equal scores compare equal
    return np.sqrt(np.sum(diff * diff, axis=-1))


def triple_score(e_h, rel, e_t, decoder):
    """Negated translation distance: higher means more plausible."""
    return -float(_distance(e_h + decoder.vector(rel) - e_t))


# --- negatives --------------------------------------------------------------

class NegativeSampler:
    """Corrupts triples within their own language KG, avoiding known train triples.

    ``ranges[i]`` is the (start, stop) global id range of language ``i``;
    ``known`` is a set of global train triples.
    """

    max_retries = 100

    def __init__(self, ranges, known):
        self.ranges = ranges
        self.known = known
        self.exhausted = 0

    def corrupt(self, triple, lang, rng):
        start, stop = self.ranges[lang]
        if stop - start < 2:
            raise InputDataError(f"language {lang} has fewer than 2 entities; cannot corrupt")
        h, r, t = triple
        cand = None
        for _ in range(self.max_retries):
            e = int(rng.integers(start, stop))
            cand = (e, r, t) if rng.random() < 0.5 else (h, r, e)
            if cand not in self.known:
                return cand
        self.exhausted += 1
        return cand

    def corrupt_batch(self, triples, langs, rng):
        return np.array([self.corrupt(tuple(t), l, rng) for t, l in zip(triples.tolist(), langs)],
                        dtype=np.int64).reshape(-1, 3)


def negative_sample(triple, kg, rng, known=None):
    """Corrupt a local triple of ``kg`` (head or tail with probability 1/2)."""
    known = set(map(tuple, kg.train.tolist())) if known is None else known
    sampler = NegativeSampler([(0, kg.num_entities)], known)
    return sampler.corrupt(tuple(int(x) for x in triple), 0, np.random.default_rng(rng))


# --- loss -------------------------------------------------------------------

def score_rows(ent, rel, heads, rels, tails):
    """Recorded TransE scores for index arrays into ``ent`` / ``rel`` -> (n, 1)."""
    diff = dm.sub(dm.add(dm.gather_rows(ent, heads), dm.gather_rows(rel, rels)), dm.gather_rows(ent, tails))
    return dm.scale(dm.row_l2(diff), -1.0)


def margin_loss(ent, rel, pos, neg, margin):
    """Sum over rows of [f(neg) - f(pos) + margin]_+ ; ``pos``/``neg`` index rows of ``ent``."""
    pos = np.asarray(pos, dtype=np.int64).reshape(-1, 3)
    neg = np.asarray(neg, dtype=np.int64).reshape(-1, 3)
    if len(pos) != len(neg):
        raise InputDataError("positives and negatives must pair up row by row")
    sp = score_rows(ent, rel, pos[:, 0], pos[:, 1], pos[:, 2])
    sn = score_rows(ent, rel, neg[:, 0], neg[:, 1], neg[:, 2])
    return dm.sum_all(dm.hinge(dm.sub(sn, sp), margin))


def kgc_loss(batch, embeddings, decoder_rel, margin, sampler, langs, rng, negatives_per_positive=1):
    """Eq.-style hinge loss over ``batch`` with freshly drawn negatives.

    ``embeddings`` and ``decoder_rel`` are recorded values; batch rows index
    ``embeddings`` rows directly.
    """
    batch = np.asarray(batch, dtype=np.int64).reshape(-1, 3)
    pos = np.repeat(batch, negatives_per_positive, axis=0)
    neg = sampler.corrupt_batch(pos, np.repeat(langs, negatives_per_positive), rng)
    return margin_loss(embeddings, decoder_rel, pos, neg, margin)


# --- ranking ----------------------------------------------------------------

@dataclass(frozen=True)
class Query:
    head: EntityRef
    relation: int
    direction: str = PREDICT_TAIL


class FilterIndex:
    """Known answers per (entity, relation) for both prediction directions (global ids)."""

    def __init__(self, triples):
        self.tails = {}
        self.heads = {}
        for h, r, t in np.asarray(triples, dtype=np.int64).reshape(-1, 3).tolist():
            self.tails.setdefault((h, r), set()).add(t)
            self.heads.setdefault((t, r), set()).add(h)

    def known(self, anchor, rel, direction):
        table = self.tails if direction == PREDICT_TAIL else self.heads
        return table.get((anchor, rel), ())


def _scores(emb, rel_vec, anchor, candidates, direction):
    if direction == PREDICT_TAIL:
        return -_distance(emb[anchor] + rel_vec - emb[candidates])
    # same operation order as triple_score, so ties stay ties
    return -_distance(emb[candidates] + rel_vec - emb[anchor])


def rank_query(anchor, rel, answer, emb, decoder, filters, candidates, direction=PREDICT_TAIL):
    """Filtered rank of ``answer`` among ``candidates`` (global ids).

    Candidates that form another known triple with the query are dropped;
    rank = 1 + number of remaining candidates scoring strictly higher.
    """
    candidates = np.asarray(candidates, dtype=np.int64)
    pos = np.flatnonzero(candidates == answer)
    if len(pos) == 0:
        raise InputDataError(f"true answer {answer} is not among the candidates")
    scores = _scores(emb, decoder.vector(rel), anchor, candidates, direction)
    true_score = scores[pos[0]]
    keep = np.ones(len(candidates), dtype=bool)
    known = filters.known(anchor, rel, direction)
    if known:
        keep &= ~np.isin(candidates, np.fromiter(known, dtype=np.int64))
    keep[pos] = False
    return int(1 + np.count_nonzero(scores[keep] > true_score))


@dataclass
class Metrics:
    mrr: float
    hits1: float
    hits10: float
    n: int
    per_language: dict = field(default_factory=dict)

    @classmethod
    def from_ranks(cls, ranks):
        ranks = np.asarray(ranks, dtype=np.float64)
        if len(ranks) == 0:
            return cls(0.0, 0.0, 0.0, 0)
        return cls(float(np.mean(1.0 / ranks)), float(np.mean(ranks <= 1)),
                   float(np.mean(ranks <= 10)), int(len(ranks)))

    def macro(self):
        """Unweighted mean over languages (falls back to the pooled numbers)."""
        if not self.per_language:
            return self
        vals = list(self.per_language.values())
        return Metrics(float(np.mean([m.mrr for m in vals])), float(np.mean([m.hits1 for m in vals])),
                       float(np.mean([m.hits10 for m in vals])), int(sum(m.n for m in vals)))

    def to_json_dict(self):
        out = {lang: _row(m) for lang, m in self.per_language.items()}
        out["macro_avg"] = _row(self.macro())
        return out

    def to_json(self):
        return json.dumps(self.to_json_dict(), sort_keys=True, indent=2)

    def table(self):
        langs = list(self.per_language)
        head = f"{'':<8}" + "".join(f"{l:>26}" for l in langs + ["macro_avg"])
        sub = f"{'':<8}" + "".join(f"{'H@1':>8}{'H@10':>9}{'MRR':>9}" for _ in langs + ["avg"])
        cells = [self.per_language[l] for l in langs] + [self.macro()]
        row = f"{'model':<8}" + "".join(f"{100 * m.hits1:>8.4f}{100 * m.hits10:>9.4f}{100 * m.mrr:>9.4f}"
                                          for m in cells)
        return "\n".join([head, sub, row])


def _row(m):
    return {"mrr": round(m.mrr, 10), "hits1": round(m.hits1, 10), "hits10": round(m.hits10, 10), "n": m.n}


def metrics_from_json(text):
    data = json.loads(text)
    per = {k: Metrics(v["mrr"], v["hits1"], v["hits10"], v["n"]) for k, v in data.items() if k != "macro_avg"}
    pooled = Metrics(0.0, 0.0, 0.0, sum(m.n for m in per.values()), per)
    return pooled


def rank_all(triples, emb, decoder, filters, fused, direction=PREDICT_TAIL):
    """Filtered ranks of the answer entity for every global triple (per-language candidates)."""
    triples = np.asarray(triples, dtype=np.int64).reshape(-1, 3)

    def work(chunk):
        out = []
        for h, r, t in chunk.tolist():
            anchor, answer = (h, t) if direction == PREDICT_TAIL else (t, h)
            start, stop = fused.language_range(int(fused.lang_of[answer]))
            out.append(rank_query(anchor, r, answer, emb, decoder, filters, np.arange(start, stop), direction))
        return out

    workers = worker_count()
    if workers <= 1 or len(triples) < 256:
        return np.array(work(triples), dtype=np.int64)
    chunks = np.array_split(triples, workers)
    with ThreadPoolExecutor(workers) as pool:
        parts = list(pool.map(work, chunks))
    return np.concatenate([np.asarray(p, dtype=np.int64) for p in parts])


def evaluate(triples, emb, decoder, filters, fused):
    """Predict-tail filtered MRR / Hits@1 / Hits@10 with a per-language breakdown."""
    triples = np.asarray(triples, dtype=np.int64).reshape(-1, 3)
    if len(triples) == 0:
        raise InputDataError("cannot evaluate an empty test set")
    ranks = rank_all(triples, emb, decoder, filters, fused)
    langs = fused.lang_of[triples[:, 0]]
    pooled = Metrics.from_ranks(ranks)
    for i, lang in enumerate(fused.languages):
        sel = langs == i
        if sel.any():
            pooled.per_language[lang] = Metrics.from_ranks(ranks[sel])
    return pooled
