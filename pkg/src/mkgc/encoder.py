"""Relation-aware attention GNN over a fused multilingual graph.

Per layer, every fact sends a message along both of its directions:

    msg   = Wv @ concat(h_src, r)
    logit = (Wk @ msg) . (Wq @ h_dst) / sqrt(d) * beta_r
    h_dst <- h_dst + leaky_relu(sum_softmax(logit) * msg)

Entities without neighbors keep their input (residual only).
"""
import numpy as np

from . import diffmath as dm
from .errors import InputDataError, ShapeError


class EncoderParams:
    """Tensors of one encoder instance, keyed by short names.

    ``entities`` (N, d) base vectors (added to the projected text when
    ``text_proj`` (d_text, d) is present),
    ``relations`` (R, d) and ``beta`` (R, 1) when relation-aware, and
    ``layer{l}.Wv`` (d, 2d), ``layer{l}.Wk`` / ``layer{l}.Wq`` (d, d).
    """

    def __init__(self, tensors, layers, dim, slope=0.1, relation_aware=True,
                 text=None, text_mask=None, relation_labels=None):
        self.tensors = tensors
        self.layers = layers
        self.dim = dim
        self.slope = slope
        self.relation_aware = relation_aware
        self.text = text
        self.text_mask = text_mask
        self.relation_labels = relation_labels
        self._check()

    def _check(self):
        d = self.dim
        t = self.tensors
        for l in range(self.layers):
            for name, shape in ((f"layer{l}.Wv", (d, 2 * d)), (f"layer{l}.Wk", (d, d)),
                                (f"layer{l}.Wq", (d, d))):
                if t[name].shape != shape:
                    raise ShapeError(name, t[name].shape, shape)
        if t["entities"].shape[1] != d:
            raise ShapeError("entities", t["entities"].shape)
        if self.relation_aware:
            if t["relations"].shape[1] != d or t["beta"].shape != (t["relations"].shape[0], 1):
                raise ShapeError("relations/beta", t["relations"].shape, t["beta"].shape)
        if self.text is not None and t["text_proj"].shape != (self.text.shape[1], d):
            raise ShapeError("text_proj", t["text_proj"].shape)

    @property
    def num_relations(self):
        return self.tensors["relations"].shape[0] if self.relation_aware else None

    def copy(self):
        return EncoderParams({k: v.copy() for k, v in self.tensors.items()}, self.layers, self.dim,
                             self.slope, self.relation_aware, self.text, self.text_mask,
                             self.relation_labels)

    def checkpoint_tensors(self, prefix=""):
        """Tensors for the checkpoint manifest; beta is split into one entry per relation."""
        out = {}
        for name, arr in self.tensors.items():
            if name == "beta" and self.relation_labels is not None:
                for i, label in enumerate(self.relation_labels):
                    out[f"{prefix}beta.{label}"] = arr[i:i + 1]
            else:
                out[prefix + name] = arr
        return out

    def load_checkpoint_tensors(self, tensors, prefix=""):
        for name in list(self.tensors):
            if name == "beta" and self.relation_labels is not None:
                self.tensors[name] = np.concatenate(
                    [tensors[f"{prefix}beta.{label}"] for label in self.relation_labels]).copy()
            else:
                self.tensors[name] = tensors[prefix + name].copy()
        self._check()


def init_encoder(num_entities, num_relations, dim, layers, rng, slope=0.1, relation_aware=True,
                 text=None, text_mask=None, init_std=0.02, relation_labels=None):
    rng = np.random.default_rng(rng)
    t = {"entities": rng.normal(0.0, init_std, size=(num_entities, dim))}
    if text is not None:
        text = np.asarray(text, dtype=np.float64)
        if text.shape[0] != num_entities:
            raise ShapeError("text", text.shape, (num_entities,))
        t["text_proj"] = rng.normal(0.0, 1.0 / np.sqrt(text.shape[1]), size=(text.shape[1], dim))
        if text_mask is None:
            text_mask = np.ones(num_entities, dtype=bool)
    if relation_aware:
        t["relations"] = rng.normal(0.0, init_std, size=(num_relations, dim))
        t["beta"] = np.ones((num_relations, 1))
    for l in range(layers):
        t[f"layer{l}.Wv"] = rng.normal(0.0, 1.0 / np.sqrt(2 * dim), size=(dim, 2 * dim))
        t[f"layer{l}.Wk"] = rng.normal(0.0, 1.0 / np.sqrt(dim), size=(dim, dim))
        t[f"layer{l}.Wq"] = rng.normal(0.0, 1.0 / np.sqrt(dim), size=(dim, dim))
    return EncoderParams(t, layers, dim, slope, relation_aware, text, text_mask, relation_labels)


def register(rec, params, prefix=""):
    """Register every tensor as a recording parameter; returns short-name -> leaf."""
    return {k: rec.param(prefix + k, v) for k, v in params.tensors.items()}


# --- single-entity reference operations -------------------------------------

def _rel_vector(params, rel):
    if not params.relation_aware:
        return np.zeros(params.dim)
    if not 0 <= rel < params.num_relations:
        raise InputDataError(f"unknown relation id {rel}")
    return params.tensors["relations"][rel]


def _beta(params, rel):
    return float(params.tensors["beta"][rel, 0]) if params.relation_aware else 1.0


def message(h_i, rel, layer, params):
    if not 0 <= layer < params.layers:
        raise InputDataError(f"layer {layer} out of range for a {params.layers}-layer encoder")
    return params.tensors[f"layer{layer}.Wv"] @ np.concatenate([h_i, _rel_vector(params, rel)])


def attention_logit(msg_i, h_j, rel, layer, params):
    k = params.tensors[f"layer{layer}.Wk"] @ msg_i
    q = params.tensors[f"layer{layer}.Wq"] @ h_j
    return float(k @ q) / np.sqrt(params.dim) * _beta(params, rel)


def attention_weights(entity, neighborhood, layer, params, h):
    """Softmax weights of ``entity``'s (neighbor, relation) entries given layer input ``h``."""
    if not neighborhood:
        return []
    logits = np.array([attention_logit(message(h[n], r, layer, params), h[entity], r, layer, params)
                       for n, r in neighborhood])
    ex = np.exp(logits - logits.max())
    return list(ex / ex.sum())


# --- vectorized forward --------------------------------------------------------

def initial_vectors(rec, leaves, params, ids=None):
    ent = leaves["entities"]
    if ids is not None:
        ent = dm.gather_rows(ent, ids)
    if params.text is None:
        return ent
    text = params.text if ids is None else params.text[ids]
    mask = (params.text_mask if ids is None else params.text_mask[ids]).astype(np.float64)[:, None]
    proj = dm.matmul(rec.const(text), leaves["text_proj"])
    if not mask.all():
        proj = dm.mul(rec.const(mask), proj)
    # projected text plus a free per-entity offset (the offset alone when text is missing)
    return dm.add(proj, ent)


def layer_forward(rec, leaves, h, edges, layer, params, n):
    """One message-passing layer; returns (new h, per-edge attention weights)."""
    src, dst, rel = edges
    d = params.dim
    hs = dm.gather_rows(h, src)
    if params.relation_aware:
        rv = dm.gather_rows(leaves["relations"], rel)
    else:
        rv = rec.const(np.zeros((len(src), d)))
    msg = dm.matmul(dm.concat_cols(hs, rv), dm.transpose(leaves[f"layer{layer}.Wv"]))
    keys = dm.matmul(msg, dm.transpose(leaves[f"layer{layer}.Wk"]))
    queries = dm.gather_rows(dm.matmul(h, dm.transpose(leaves[f"layer{layer}.Wq"])), dst)
    logits = dm.scale(dm.row_dot(keys, queries), 1.0 / np.sqrt(d))
    if params.relation_aware:
        logits = dm.mul(logits, dm.gather_rows(leaves["beta"], rel))
    att = dm.segment_softmax(logits, dst, n)
    agg = dm.scatter_add_rows(dm.mul(att, msg), dst, n)
    return dm.add(h, dm.leaky_relu(agg, params.slope)), att


def forward(rec, leaves, graph, params, return_attention=False):
    """Encode every entity of ``graph`` (fused graph, masked view or subgraph sample)."""
    ids = getattr(graph, "global_ids", None)
    n = graph.num_entities
    h = initial_vectors(rec, leaves, params, ids)
    if h.shape[0] != n:
        raise ShapeError("encoder input", h.shape, (n, params.dim))
    edges = graph.message_edges()
    atts = []
    for l in range(params.layers):
        h, att = layer_forward(rec, leaves, h, edges, l, params, n)
        atts.append(att.data[:, 0])
    return (h, atts) if return_attention else h


class ContextEmbeddings:
    """Top-layer vectors; row ``i`` belongs to entity ``ids[i]``."""

    def __init__(self, vectors, ids=None):
        self.vectors = vectors
        self.ids = np.arange(len(vectors)) if ids is None else np.asarray(ids)

    def __getitem__(self, entity):
        return self.vectors[entity]

    def __len__(self):
        return len(self.vectors)


def encode(graph, params):
    rec = dm.Recording()
    h = forward(rec, {k: rec.const(v) for k, v in params.tensors.items()}, graph, params)
    return ContextEmbeddings(h.data, getattr(graph, "global_ids", None))


def attention_report(graph, params):
    """Language x language matrix of normalized average top-layer attention.

    Row = receiving entity's language, column = the language the attention
    mass comes from. Rows without any entity that has neighbors put all mass
    on themselves.
    """
    rec = dm.Recording()
    _, atts = forward(rec, {k: rec.const(v) for k, v in params.tensors.items()}, graph, params,
                      return_attention=True)
    src, dst, _ = graph.message_edges()
    n_lang = len(graph.languages)
    lang = graph.lang_of
    per_entity = np.zeros((graph.num_entities, n_lang))
    if len(src):
        np.add.at(per_entity, (dst, lang[src]), atts[-1])
    has_nbr = np.zeros(graph.num_entities, dtype=bool)
    has_nbr[dst] = True
    out = np.zeros((n_lang, n_lang))
    for i in range(n_lang):
        rows = has_nbr & (lang == i)
        if rows.any():
            out[i] = per_entity[rows].mean(axis=0)
            out[i] /= out[i].sum()
        else:
            out[i, i] = 1.0
    return out
