"""Alternating training: masked alignment step, new pair generation, completion step.

Each epoch runs, in order:

1. alignment step: mask a fraction of the seed pairs, encode the masked graph
   with the alignment encoder and minimize the masked-recovery hinge loss at
   learning rate ``lam * lr``;
2. pair generation: encode the seed graph with the alignment encoder, propose
   CSLS mutual nearest neighbours across every language pair and add them to
   the graph the completion encoder sees;
3. completion step: minimize the TransE margin loss at learning rate ``lr``
   over shuffled train triples of all languages.

Ablation modes switch steps off (see ``MODES``).
"""
import copy
import dataclasses
import json
import time
from dataclasses import dataclass, field

import numpy as np

from . import diffmath as dm
from .alignment import (PairCorrupter, SimilarityConfig, TextEmbeddingStore, pair_margin_loss,
                        propose_all, recovery_report, sample_pair_negatives)
from .encoder import encode, forward, init_encoder, register
from .errors import InputDataError, NumericError
from .kg import AlignmentPair, GENERATED, augment_with_pairs, build_fused, mask_alignment, sample_khop
from .kgc import DecoderParams, FilterIndex, Metrics, NegativeSampler, evaluate, margin_loss

MODES = ("full", "no-ssl", "no-npg", "r-gnn", "plain-gnn")
SSL_MODES = ("full", "no-npg")
NPG_MODES = ("full", "no-ssl")
PAIR_POLICIES = ("regenerate", "accumulate")
TEXT_INIT = ("none", "align", "all")  # which encoders start from projected text vectors


@dataclass
class TrainConfig:
    dim: int = 256
    layers: int = 2
    lr: float = 0.005
    batch_size: int = 512
    margin: float = 0.3
    align_margin: float = 1.0
    lam: float = 1.0
    epochs: int = 50
    patience: int = 10
    mask_ratio: float = 0.3
    csls_k: int = 10
    negatives_per_positive: int = 1
    pair_policy: str = "regenerate"
    mode: str = "full"
    share_encoders: bool = False
    seed: int = 0
    slope: float = 0.1
    init_std: float = 0.02
    fanout: int = None
    use_text: bool = True
    text_init: str = "all"
    eval_every: int = 1

    def __post_init__(self):
        self.validate()

    def validate(self):
        if self.mode not in MODES:
            raise InputDataError(f"unknown mode {self.mode!r}; expected one of {MODES}")
        if self.pair_policy not in PAIR_POLICIES:
            raise InputDataError(f"unknown pair_policy {self.pair_policy!r}")
        for name in ("lr", "margin", "align_margin", "lam"):
            if not getattr(self, name) > 0:
                raise InputDataError(f"{name} must be positive")
        for name in ("dim", "layers", "batch_size", "epochs", "csls_k", "negatives_per_positive", "eval_every"):
            if getattr(self, name) < 1:
                raise InputDataError(f"{name} must be >= 1")
        if not 0.0 <= self.mask_ratio <= 1.0:
            raise InputDataError("mask_ratio must be in [0, 1]")
        if self.text_init not in TEXT_INIT:
            raise InputDataError(f"text_init must be one of {TEXT_INIT}")

    def to_dict(self):
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, d):
        names = {f.name for f in dataclasses.fields(cls)}
        unknown = set(d) - names
        if unknown:
            raise InputDataError(f"unknown config keys: {sorted(unknown)}")
        return cls(**d)


class TrainingData:
    """Everything the trainer reads: language KGs, seed pairs, fused graphs and lookup tables."""

    def __init__(self, kgs, seed_pairs, text=None, truth_pairs=None):
        self.kgs = list(kgs)
        self.seed_pairs = list(seed_pairs)
        self.fused = build_fused(self.kgs, self.seed_pairs)
        self.plain = build_fused(self.kgs, [])
        f = self.fused
        if isinstance(text, dict):
            text = TextEmbeddingStore.from_language_arrays(f, text)
        self.text = text
        self.train = f.facts[: f.num_local_facts]
        self.train_lang = f.lang_of[self.train[:, 0]]
        self.valid = self._globalize("valid")
        self.test = self._globalize("test")
        self.filters = FilterIndex(np.concatenate([self.train, self.valid, self.test]))
        ranges = [f.language_range(i) for i in range(len(f.languages))]
        self.sampler = NegativeSampler(ranges, set(map(tuple, self.train.tolist())))
        self.seed_ids = f.pair_global_ids()
        self.seed_keys = {frozenset(p) for p in self.seed_ids.tolist()}
        self.truth_keys = None
        if truth_pairs is not None:
            self.truth_keys = {p.key() for p in truth_pairs}

    def _globalize(self, split):
        parts = []
        for i, kg in enumerate(self.kgs):
            arr = getattr(kg, split).copy()
            arr[:, 0] += self.fused.offsets[i]
            arr[:, 2] += self.fused.offsets[i]
            parts.append(arr)
        return np.concatenate(parts)


@dataclass
class EpochReport:
    epoch: int
    jk: float = 0.0
    ja: float = 0.0
    jk_steps: int = 0
    ja_steps: int = 0
    lr_kgc: float = 0.0
    lr_align: float = 0.0
    masked: int = 0
    npg_called: bool = False
    pairs_proposed: int = 0
    pairs_accepted: int = 0
    pair_precision: float = None
    align_edges: int = 0
    recovery: dict = None
    valid: dict = None
    negative_fallbacks: int = 0
    wall_time: float = 0.0

    def to_dict(self):
        return dataclasses.asdict(self)

    def comparable(self):
        """The report without wall time (the only nondeterministic field)."""
        d = self.to_dict()
        d.pop("wall_time")
        return d


class ModelState:
    def __init__(self, cfg, params_k, params_a, decoder, rng):
        self.cfg = cfg
        self.params_k = params_k
        self.params_a = params_a
        self.decoder = decoder
        self.adam_k = dm.AdamState()
        self.adam_a = dm.AdamState()
        self.epoch = 0
        self.generated = []
        self.proposals = []  # CandidatePairs of the latest generation step
        self.rng = rng
        self.best_score = -np.inf
        self.best_epoch = 0
        self.bad_epochs = 0

    @property
    def shared(self):
        return self.params_a is self.params_k

    def kgc_store(self):
        store = {"gk." + k: v for k, v in self.params_k.tensors.items()}
        store["dec.relations"] = self.decoder.relations
        return store

    def align_prefix(self):
        return "gk." if self.shared else "ga."

    def align_store(self):
        return {self.align_prefix() + k: v for k, v in self.params_a.tensors.items()}


def init_state(data, cfg):
    rng = np.random.default_rng(cfg.seed)
    f = data.fused
    has_text = data.text is not None
    relation_aware = cfg.mode != "plain-gnn"

    def make(with_text):
        text, mask = (data.text.vectors, data.text.covered) if with_text else (None, None)
        return init_encoder(f.num_entities, f.num_relations, cfg.dim, cfg.layers, rng, cfg.slope,
                            relation_aware, text, mask, cfg.init_std, f.relation_labels)

    params_k = make(has_text and (cfg.text_init == "all" or (cfg.share_encoders and cfg.text_init == "align")))
    params_a = params_k if cfg.share_encoders else make(has_text and cfg.text_init != "none")
    decoder = DecoderParams.init(f.num_relations - 1, cfg.dim, rng, cfg.margin, cfg.init_std)
    return ModelState(cfg, params_k, params_a, decoder, rng)


def _check_finite(value, step):
    if not np.isfinite(value):
        raise NumericError(f"non-finite loss in {step} step")


def _lookup(global_ids, n):
    lut = np.full(n, -1, dtype=np.int64)
    lut[global_ids] = np.arange(len(global_ids))
    return lut


def _align_steps(state, data, graph, positives, cfg, report, corrupter, params, store_fn, prefix):
    rng = state.rng
    lr = cfg.lam * cfg.lr
    report.lr_align = lr
    total = 0.0
    order = rng.permutation(len(positives))
    for s in range(0, len(order), cfg.batch_size):
        batch = positives[order[s:s + cfg.batch_size]]
        pos, neg = sample_pair_negatives(batch, corrupter, rng, cfg.negatives_per_positive)
        if len(pos) == 0:
            continue
        ents = np.unique(np.concatenate([pos.ravel(), neg.ravel()]))
        sub = sample_khop(graph, ents, cfg.layers, cfg.fanout, rng)
        lut = _lookup(sub.global_ids, data.fused.num_entities)
        rec = dm.Recording()
        h = forward(rec, register(rec, params, prefix), sub, params)
        loss = pair_margin_loss(h, lut[pos], lut[neg], cfg.align_margin)
        _check_finite(loss.item(), "alignment")
        grads = dm.backward(loss)
        dm.adam_step(state.adam_a, store_fn(), grads, lr)
        total += loss.item()
        report.ja_steps += 1
    return total


def _kgc_steps(state, data, graph, cfg, report):
    rng = state.rng
    params = state.params_k
    report.lr_kgc = cfg.lr
    total = 0.0
    fallbacks_before = data.sampler.exhausted
    order = rng.permutation(len(data.train))
    store = state.kgc_store()
    for s in range(0, len(order), cfg.batch_size):
        idx = order[s:s + cfg.batch_size]
        pos = np.repeat(data.train[idx], cfg.negatives_per_positive, axis=0)
        langs = np.repeat(data.train_lang[idx], cfg.negatives_per_positive)
        neg = data.sampler.corrupt_batch(pos, langs, rng)
        ents = np.unique(np.concatenate([pos[:, [0, 2]].ravel(), neg[:, [0, 2]].ravel()]))
        sub = sample_khop(graph, ents, cfg.layers, cfg.fanout, rng)
        lut = _lookup(sub.global_ids, data.fused.num_entities)
        rec = dm.Recording()
        h = forward(rec, register(rec, params, "gk."), sub, params)
        rel = rec.param("dec.relations", state.decoder.relations)
        lp = np.stack([lut[pos[:, 0]], pos[:, 1], lut[pos[:, 2]]], axis=1)
        ln = np.stack([lut[neg[:, 0]], neg[:, 1], lut[neg[:, 2]]], axis=1)
        loss = margin_loss(h, rel, lp, ln, cfg.margin)
        _check_finite(loss.item(), "completion")
        grads = dm.backward(loss)
        dm.adam_step(state.adam_k, store, grads, cfg.lr)
        total += loss.item()
        report.jk_steps += 1
    report.negative_fallbacks = data.sampler.exhausted - fallbacks_before
    return total / max(len(data.train) * cfg.negatives_per_positive, 1)


def _similarity_cfg(cfg, data):
    return SimilarityConfig(K=cfg.csls_k, use_text=cfg.use_text and data.text is not None, use_structure=True)


def completion_graph(state, data):
    """The graph the completion encoder runs on in the current state."""
    cfg = state.cfg
    if cfg.mode == "plain-gnn":
        return data.plain
    if state.generated:
        return augment_with_pairs(data.fused, state.generated)
    return data.fused


def train_epoch(state, data, cfg=None):
    """One epoch of the alternating schedule; returns its report."""
    cfg = cfg or state.cfg
    t0 = time.perf_counter()
    rng = state.rng
    report = EpochReport(epoch=state.epoch + 1)

    # (1) alignment
    if cfg.mode in SSL_MODES and data.fused.pairs:
        view = mask_alignment(data.fused, cfg.mask_ratio, rng)
        report.masked = len(view.masked_pairs)
        if view.masked_pairs:
            positives = data.fused.pair_global_ids(view.masked_pairs)
            corrupter = PairCorrupter(data.fused, data.seed_keys)
            ja = _align_steps(state, data, view, positives, cfg, report, corrupter, state.params_a,
                              state.align_store, state.align_prefix())
            report.ja = ja / max(len(positives) * cfg.negatives_per_positive, 1)
            _check_finite(report.ja, "alignment")
            structural = encode(view, state.params_a).vectors
            rec = recovery_report(data.fused, view.masked_pairs, structural, None,
                                  SimilarityConfig(K=cfg.csls_k, use_text=False))
            report.recovery = {"hits1": rec.hits1, "hits10": rec.hits10, "mrr": rec.mrr, "n": rec.n}
    elif cfg.mode == "plain-gnn" and len(data.seed_ids):
        corrupter = PairCorrupter(data.fused, data.seed_keys)
        ja = _align_steps(state, data, data.plain, data.seed_ids, cfg, report, corrupter, state.params_k,
                          lambda: {"gk." + k: v for k, v in state.params_k.tensors.items()}, "gk.")
        report.ja = ja / max(len(data.seed_ids) * cfg.negatives_per_positive, 1)

    # (2) new pair generation
    if cfg.mode in NPG_MODES:
        report.npg_called = True
        structural = encode(data.fused, state.params_a).vectors
        existing = {p.key() for p in data.fused.pairs}
        if cfg.pair_policy == "accumulate":
            existing |= {p.key() for p in state.generated}
        proposals = propose_all(data.fused, structural, data.text, _similarity_cfg(cfg, data), existing)
        state.proposals = proposals
        new = [c.to_alignment() for c in proposals]
        state.generated = (state.generated + new) if cfg.pair_policy == "accumulate" else new
        report.pairs_proposed = len(proposals)
        report.pairs_accepted = len(state.generated)
        if data.truth_keys is not None and state.generated:
            hits = sum(p.key() in data.truth_keys for p in state.generated)
            report.pair_precision = hits / len(state.generated)

    # (3) completion
    graph = completion_graph(state, data)
    report.align_edges = int(np.count_nonzero(graph.facts[:, 1] == data.fused.align_id))
    report.jk = _kgc_steps(state, data, graph, cfg, report)
    _check_finite(report.jk, "completion")

    state.epoch += 1
    if state.epoch % cfg.eval_every == 0:
        m = evaluate_state(state, data, "valid")
        report.valid = m.to_json_dict()
    report.wall_time = time.perf_counter() - t0
    return report


def evaluate_state(state, data, split="test"):
    triples = {"valid": data.valid, "test": data.test, "train": data.train}[split]
    emb = encode(completion_graph(state, data), state.params_k).vectors
    return evaluate(triples, emb, state.decoder, data.filters, data.fused)


def snapshot(state):
    """Deep copy of the state (the random generator included)."""
    return copy.deepcopy(state)


def train(data, cfg, state=None, on_epoch=None, epochs=None, best=None):
    """Train until ``cfg.epochs`` (or ``epochs`` more) or until validation MRR stops improving.

    Returns (best state by macro-average validation MRR, list of EpochReport).
    When resuming, pass the previous best snapshot as ``best``.
    """
    state = state or init_state(data, cfg)
    target = cfg.epochs if epochs is None else state.epoch + epochs
    if state.bad_epochs >= cfg.patience:
        target = state.epoch
    best = snapshot(state) if best is None else best
    reports = []
    while state.epoch < target:
        rep = train_epoch(state, data, cfg)
        reports.append(rep)
        if rep.valid is not None:
            score = rep.valid["macro_avg"]["mrr"]
            if score > state.best_score:
                state.best_score = score
                state.best_epoch = state.epoch
                state.bad_epochs = 0
                best = snapshot(state)
            else:
                state.bad_epochs += 1
        if on_epoch is not None:
            on_epoch(state, rep)
        if state.bad_epochs >= cfg.patience:
            break
    return best, reports


def alignment_as_loss(pairs, embeddings, margin, corrupter, rng, negatives_per_positive=1):
    """Hinge loss pulling every given pair together (the plain-GNN baseline's alignment term)."""
    pos, neg = sample_pair_negatives(pairs, corrupter, rng, negatives_per_positive)
    return pair_margin_loss(embeddings, pos, neg, margin)


def run_ablation(data, base_cfg, modes=("plain-gnn", "r-gnn", "no-ssl", "full")):
    """Train each mode with the same seed; returns mode -> test Metrics."""
    out = {}
    for mode in modes:
        cfg = dataclasses.replace(base_cfg, mode=mode)
        best, _ = train(data, cfg)
        out[mode] = evaluate_state(best, data, "test")
    return out


ABLATION_LABELS = {"plain-gnn": "GNN", "r-gnn": "R-GNN", "no-ssl": "R-GNN + NPG",
                   "no-npg": "R-GNN + SSL", "full": "R-GNN + NPG + SSL"}


def ablation_table(results):
    lines = [f"{'variant':<20}{'H@1':>9}{'H@10':>9}{'MRR':>9}"]
    for mode, m in results.items():
        a = m.macro()
        lines.append(f"{ABLATION_LABELS.get(mode, mode):<20}{100 * a.hits1:>9.4f}{100 * a.hits10:>9.4f}"
                     f"{100 * a.mrr:>9.4f}")
    return "\n".join(lines)


# --- checkpoints -----------------------------------------------------------------------

def save_checkpoint(state, path):
    tensors = dict(state.params_k.checkpoint_tensors("gk."))
    if not state.shared:
        tensors.update(state.params_a.checkpoint_tensors("ga."))
    tensors["dec.relations"] = state.decoder.relations
    for tag, adam in (("adam_k", state.adam_k), ("adam_a", state.adam_a)):
        for name in adam.m:
            tensors[f"{tag}.m.{name}"] = adam.m[name]
            tensors[f"{tag}.v.{name}"] = adam.v[name]
    meta = {
        "config": state.cfg.to_dict(),
        "epoch": state.epoch,
        "adam_k_step": state.adam_k.step,
        "adam_a_step": state.adam_a.step,
        "generated": [[p.lang_a, p.local_a, p.lang_b, p.local_b] for p in state.generated],
        "rng": state.rng.bit_generator.state,
        "best_score": None if not np.isfinite(state.best_score) else state.best_score,
        "best_epoch": state.best_epoch,
        "bad_epochs": state.bad_epochs,
    }
    dm.save_tensors(path, tensors, meta)


def load_checkpoint(path, data):
    tensors, meta = dm.load_tensors(path)
    cfg = TrainConfig.from_dict(meta["config"])
    state = init_state(data, cfg)
    state.params_k.load_checkpoint_tensors(tensors, "gk.")
    if not state.shared:
        state.params_a.load_checkpoint_tensors(tensors, "ga.")
    state.decoder.relations = tensors["dec.relations"].copy()
    for tag, adam in (("adam_k", state.adam_k), ("adam_a", state.adam_a)):
        for key, arr in tensors.items():
            if key.startswith(tag + ".m."):
                adam.m[key[len(tag) + 3:]] = arr.copy()
            elif key.startswith(tag + ".v."):
                adam.v[key[len(tag) + 3:]] = arr.copy()
    state.adam_k.step = meta["adam_k_step"]
    state.adam_a.step = meta["adam_a_step"]
    state.epoch = meta["epoch"]
    state.generated = [AlignmentPair(a, int(i), b, int(j), GENERATED) for a, i, b, j in meta["generated"]]
    state.rng.bit_generator.state = meta["rng"]
    state.best_score = -np.inf if meta["best_score"] is None else meta["best_score"]
    state.best_epoch = meta["best_epoch"]
    state.bad_epochs = meta["bad_epochs"]
    return state


def reports_to_jsonl(path, reports):
    with open(path, "a", encoding="utf-8") as f:
        for r in reports:
            f.write(json.dumps(r.to_dict(), sort_keys=True) + "\n")
