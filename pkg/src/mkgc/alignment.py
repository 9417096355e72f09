"""New alignment pair generation (CSLS mutual nearest neighbours) and the masked alignment loss."""
import json
from dataclasses import dataclass

import numpy as np

from . import diffmath as dm
from .errors import InputDataError
from .kg import CandidatePair  # noqa: F401  (re-exported)
from .kgc import Metrics


class TextEmbeddingStore:
    """Precomputed text vectors by global entity id; uncovered rows are marked absent."""

    def __init__(self, vectors, covered):
        self.vectors = np.asarray(vectors, dtype=np.float64)
        self.covered = np.asarray(covered, dtype=bool)
        if self.vectors.shape[0] != self.covered.shape[0]:
            raise InputDataError("text vectors and coverage bitmap disagree in length")

    @property
    def dim(self):
        return self.vectors.shape[1]

    @classmethod
    def from_language_arrays(cls, fused, per_language):
        dim = next(iter(per_language.values())).shape[1]
        vecs = np.zeros((fused.num_entities, dim))
        cov = np.zeros(fused.num_entities, dtype=bool)
        for lang, arr in per_language.items():
            start, stop = fused.language_range(lang)
            if arr.shape != (stop - start, dim):
                raise InputDataError(f"text vectors for {lang} have shape {arr.shape}, expected {(stop - start, dim)}")
            vecs[start:stop] = arr
            cov[start:stop] = True
        return cls(vecs, cov)


@dataclass
class SimilarityConfig:
    K: int = 10
    use_text: bool = True
    use_structure: bool = True

    def __post_init__(self):
        if self.K < 1:
            raise InputDataError("CSLS neighbour count K must be >= 1")
        if not (self.use_text or self.use_structure):
            raise InputDataError("enable at least one of use_text / use_structure")


def _cos(a, b):
    na, nb = np.linalg.norm(a), np.linalg.norm(b)
    if na == 0 or nb == 0:
        raise InputDataError("cosine similarity of a zero vector")
    return float(a @ b / (na * nb))


def pair_similarity(e_i, e_j, structural, text, cfg):
    """max of the cosines of every enabled source that covers both entities."""
    sims = []
    if cfg.use_structure and structural is not None:
        sims.append(_cos(structural[e_i], structural[e_j]))
    if cfg.use_text and text is not None and text.covered[e_i] and text.covered[e_j]:
        sims.append(_cos(text.vectors[e_i], text.vectors[e_j]))
    if not sims:
        raise InputDataError(f"no similarity source covers entities {e_i} and {e_j}")
    return max(sims)


def _normalized(x):
    n = np.linalg.norm(x, axis=1, keepdims=True)
    return x / np.where(n > 0, n, 1.0)


def similarity_matrix(rows, cols, structural, text, cfg):
    """Dense sim matrix between global id arrays ``rows`` and ``cols``."""
    rows = np.asarray(rows, dtype=np.int64)
    cols = np.asarray(cols, dtype=np.int64)
    out = np.full((len(rows), len(cols)), -np.inf)
    if cfg.use_structure and structural is not None:
        s = np.asarray(structural)
        out = np.maximum(out, _normalized(s[rows]) @ _normalized(s[cols]).T)
    if cfg.use_text and text is not None:
        t = _normalized(text.vectors[rows]) @ _normalized(text.vectors[cols]).T
        both = text.covered[rows][:, None] & text.covered[cols][None, :]
        out = np.maximum(out, np.where(both, t, -np.inf))
    if np.isneginf(out).any():
        raise InputDataError("some entity pairs are not covered by any similarity source")
    return out


def local_scaling(sims, K):
    """Mean of each row's K largest entries (all entries when a row is shorter than K)."""
    sims = np.asarray(sims, dtype=np.float64)
    k = min(K, sims.shape[1])
    if k == 0:
        return np.zeros(sims.shape[0])
    top = -np.partition(-sims, k - 1, axis=1)[:, :k]
    return top.mean(axis=1)


def csls_matrix(sims, K):
    """2 sim(i, j) - s(i) - s(j); each local scaling looks into the other language."""
    sims = np.asarray(sims, dtype=np.float64)
    return 2 * sims - local_scaling(sims, K)[:, None] - local_scaling(sims.T, K)[None, :]


def csls(i, j, sims, K):
    return float(csls_matrix(sims, K)[i, j])


def mutual_nearest(scores):
    """(row, col) pairs that are each other's argmax; ties go to the smallest index."""
    scores = np.asarray(scores)
    if scores.size == 0:
        return []
    best_col = np.argmax(scores, axis=1)
    best_row = np.argmax(scores, axis=0)
    return [(int(r), int(c)) for r, c in enumerate(best_col) if best_row[c] == r]


def propose_pairs(fused, lang_i, lang_j, structural, text, cfg, existing=()):
    """CSLS mutual-nearest-neighbour pairs between two languages, minus existing pairs."""
    si, ei = fused.language_range(lang_i)
    sj, ej = fused.language_range(lang_j)
    if ei == si or ej == sj:
        raise InputDataError("both language KGs must be nonempty")
    sims = similarity_matrix(np.arange(si, ei), np.arange(sj, ej), structural, text, cfg)
    scores = csls_matrix(sims, cfg.K)
    existing = set(existing)
    out = []
    for r, c in mutual_nearest(scores):
        a, b = fused.entity(si + r), fused.entity(sj + c)
        key = tuple(sorted([(a.language, a.local_id), (b.language, b.local_id)]))
        if key in existing:
            continue
        out.append(CandidatePair(a, b, float(scores[r, c]), float(sims[r, c])))
    return out


def propose_all(fused, structural, text, cfg, existing=()):
    existing = set(existing)
    out = []
    langs = fused.languages
    for i in range(len(langs)):
        for j in range(i + 1, len(langs)):
            out.extend(propose_pairs(fused, langs[i], langs[j], structural, text, cfg, existing))
    return out


# --- masked alignment loss -------------------------------------------------------

class PairCorrupter:
    """Replaces one side of a pair with a random entity of that side's language.

    Negatives that coincide with a known alignment pair are redrawn (bounded).
    """

    max_retries = 100

    def __init__(self, fused, aligned_keys):
        self.fused = fused
        self.aligned = aligned_keys  # set of frozenset({gid_a, gid_b})
        self.skipped = 0

    def corrupt(self, a, b, rng):
        side = int(rng.integers(2))
        keep, repl = (a, b) if side else (b, a)
        start, stop = self.fused.language_range(int(self.fused.lang_of[repl]))
        if stop - start < 2:
            self.skipped += 1
            return None
        cand = None
        for _ in range(self.max_retries):
            e = int(rng.integers(start, stop))
            if e == repl:
                continue
            cand = (keep, e) if side else (e, keep)
            if frozenset(cand) not in self.aligned:
                return cand
        return cand


def sample_pair_negatives(pairs, corrupter, rng, negatives_per_positive=1):
    """Repeat each positive ``negatives_per_positive`` times next to a corrupted copy."""
    pos, neg = [], []
    for a, b in np.asarray(pairs, dtype=np.int64).reshape(-1, 2).tolist():
        for _ in range(negatives_per_positive):
            c = corrupter.corrupt(a, b, rng)
            if c is not None:
                pos.append((a, b))
                neg.append(c)
    return np.array(pos, dtype=np.int64).reshape(-1, 2), np.array(neg, dtype=np.int64).reshape(-1, 2)


def pair_margin_loss(emb, pos, neg, margin):
    """Sum of [||a - b|| - ||a' - b'|| + margin]_+ ; rows index the recorded ``emb``."""
    if len(pos) == 0:
        return emb.rec.const(np.zeros((1, 1)))
    dp = dm.row_l2(dm.sub(dm.gather_rows(emb, pos[:, 0]), dm.gather_rows(emb, pos[:, 1])))
    dn = dm.row_l2(dm.sub(dm.gather_rows(emb, neg[:, 0]), dm.gather_rows(emb, neg[:, 1])))
    return dm.sum_all(dm.hinge(dm.sub(dp, dn), margin))


def alignment_loss(pairs, emb, margin, corrupter, rng, negatives_per_positive=1):
    """Masked-alignment hinge loss over positive pairs given as rows of ``emb``."""
    pairs = np.asarray(pairs, dtype=np.int64).reshape(-1, 2)
    if len(pairs) == 0:
        raise InputDataError("alignment loss needs at least one positive pair")
    pos, neg = sample_pair_negatives(pairs, corrupter, rng, negatives_per_positive)
    return pair_margin_loss(emb, pos, neg, margin)


def recovery_report(fused, masked_pairs, structural, text, cfg):
    """Rank each masked pair's right entity among its language by CSLS from the left entity."""
    if not masked_pairs:
        return Metrics(0.0, 0.0, 0.0, 0)
    ranks = []
    by_lang = {}
    for p in masked_pairs:
        by_lang.setdefault((p.lang_a, p.lang_b), []).append(p)
    for (la, lb), ps in sorted(by_lang.items()):
        sa, ea = fused.language_range(la)
        sb, eb = fused.language_range(lb)
        sims = similarity_matrix(np.arange(sa, ea), np.arange(sb, eb), structural, text, cfg)
        scores = csls_matrix(sims, cfg.K)
        for p in ps:
            row = scores[p.local_a]
            ranks.append(1 + int(np.count_nonzero(row > row[p.local_b])))
    return Metrics.from_ranks(ranks)


# --- file formats -----------------------------------------------------------------

def load_text_embeddings(path, fused, labels):
    """Read JSON-lines ``{"lang", "entity", "vec"}`` records into a store.

    ``labels[lang]`` maps entity label -> local id. Unknown entities are ignored.
    """
    vecs = None
    covered = np.zeros(fused.num_entities, dtype=bool)
    dim = None
    with open(path, encoding="utf-8") as f:
        for lineno, line in enumerate(f, 1):
            line = line.strip()
            if not line:
                continue
            try:
                rec = json.loads(line)
                lang, ent, vec = rec["lang"], rec["entity"], rec["vec"]
            except (ValueError, KeyError) as e:
                raise InputDataError(f"{path}:{lineno}: bad text-embedding record ({e})") from None
            if dim is None:
                dim = len(vec)
                vecs = np.zeros((fused.num_entities, dim))
            elif len(vec) != dim:
                raise InputDataError(f"{path}:{lineno}: vector dimension {len(vec)} != {dim}")
            if lang not in fused.lang_index or ent not in labels.get(lang, {}):
                continue
            g = fused.global_id(lang, labels[lang][ent])
            vecs[g] = vec
            covered[g] = True
    if vecs is None:
        raise InputDataError(f"{path}: no text-embedding records")
    return TextEmbeddingStore(vecs, covered)


def write_text_embeddings(path, kgs, per_language):
    with open(path, "w", encoding="utf-8") as f:
        for kg in kgs:
            arr = per_language.get(kg.language)
            if arr is None:
                continue
            for label, vec in zip(kg.entities, arr):
                f.write(json.dumps({"lang": kg.language, "entity": label, "vec": [float(x) for x in vec]}) + "\n")


def append_pair_report(path, fused, pairs, epoch):
    with open(path, "a", encoding="utf-8") as f:
        for c in pairs:
            la, lb = c.left.language, c.right.language
            ea = fused.kgs[fused.lang_index[la]].entities[c.left.local_id]
            eb = fused.kgs[fused.lang_index[lb]].entities[c.right.local_id]
            f.write(f"{la}\t{ea}\t{lb}\t{eb}\t{c.csls:.4f}\t{c.sim:.4f}\t{epoch}\n")
