import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from mkgc import diffmath as dm
from mkgc.encoder import (EncoderParams, attention_logit, attention_report, attention_weights, encode,
                          forward, init_encoder, message)
from mkgc.errors import InputDataError
from mkgc.kg import AlignmentPair, build_fused, sample_khop
from mkgc.kgc import margin_loss

from conftest import make_kg, random_kgs, random_pairs


def leaky(x, slope):
    return np.where(x > 0, x, slope * x)


def reference_encode(fused, params):
    """Entity-by-entity forward with the scalar reference ops; returns (h, weights per layer)."""
    h = params.tensors["entities"].copy()
    if params.text is not None:
        h = h + (params.text * params.text_mask[:, None]) @ params.tensors["text_proj"]
    all_weights = []
    for l in range(params.layers):
        out = h.copy()
        layer_w = {}
        for j in range(fused.num_entities):
            nb = sorted({(n, r) for n, r, _ in fused.neighbors(j)})
            if not nb:
                continue
            w = attention_weights(j, nb, l, params, h)
            layer_w[j] = list(zip(nb, w))
            agg = sum(wi * message(h[n], r, l, params) for (n, r), wi in zip(nb, w))
            out[j] = h[j] + leaky(agg, params.slope)
        h = out
        all_weights.append(layer_w)
    return h, all_weights


def toy_params(d, n_rel, layers=1, entities=None, beta=None):
    t = {"entities": np.zeros((1, d)) if entities is None else np.asarray(entities, dtype=float),
         "relations": np.zeros((n_rel, d)),
         "beta": np.ones((n_rel, 1)) if beta is None else np.asarray(beta, dtype=float).reshape(-1, 1)}
    for l in range(layers):
        t[f"layer{l}.Wv"] = np.hstack([np.eye(d), np.zeros((d, d))])
        t[f"layer{l}.Wk"] = np.eye(d)
        t[f"layer{l}.Wq"] = np.eye(d)
    return EncoderParams(t, layers, d)


def random_graph(seed, n_langs=2):
    rng = np.random.default_rng(seed)
    kgs = random_kgs(rng, n_langs=n_langs)
    return build_fused(kgs, random_pairs(rng, kgs, int(rng.integers(0, 4)))), rng


# --- scalar reference ops ----------------------------------------------------------------

def test_zero_wv_gives_zero_message():
    p = toy_params(3, 2)
    p.tensors["layer0.Wv"][:] = 0.0
    assert not message(np.array([1.0, 2.0, 3.0]), 1, 0, p).any()


def test_identity_block_message_is_input():
    p = toy_params(3, 2)
    p.tensors["relations"][:] = 7.0
    h = np.array([1.0, -2.0, 0.5])
    np.testing.assert_array_equal(message(h, 1, 0, p), h)


def test_message_matches_dense_product():
    rng = np.random.default_rng(0)
    p = init_encoder(3, 2, 4, 1, rng)
    p.tensors["relations"] = rng.normal(size=(2, 4))
    h = rng.normal(size=4)
    expected = [sum(p.tensors["layer0.Wv"][i, k] * np.concatenate([h, p.tensors["relations"][1]])[k]
                    for k in range(8)) for i in range(4)]
    np.testing.assert_allclose(message(h, 1, 0, p), expected, rtol=1e-14)


def test_message_rejects_unknown_relation_and_layer():
    p = toy_params(2, 2)
    with pytest.raises(InputDataError):
        message(np.ones(2), 5, 0, p)
    with pytest.raises(InputDataError):
        message(np.ones(2), 0, 1, p)


def test_logit_zero_beta_annihilates():
    p = toy_params(3, 1, beta=[0.0])
    assert attention_logit(np.array([9.0, 1, 1]), np.array([4.0, 4, 4]), 0, 0, p) == 0.0


def test_logit_orthogonal_is_zero():
    p = toy_params(2, 1)
    assert attention_logit(np.array([1.0, 0.0]), np.array([0.0, 3.0]), 0, 0, p) == 0.0


def test_logit_hand_computed_d4_beta2():
    p = toy_params(4, 1, beta=[2.0])
    p.tensors["layer0.Wk"] = np.diag([1.0, 2.0, 0.0, 1.0])
    msg = np.array([1.0, 1.0, 5.0, -1.0])
    hj = np.array([2.0, 0.5, 3.0, 1.0])
    # Wk msg = (1, 2, 0, -1); . hj = 2 + 1 + 0 - 1 = 2; / sqrt(4) * 2 = 2
    assert attention_logit(msg, hj, 0, 0, p) == pytest.approx(2.0, abs=1e-15)


def test_weights_single_and_symmetric():
    p = toy_params(1, 1)
    h = np.array([[1.0], [0.3], [0.3]])
    assert attention_weights(0, [(1, 0)], 0, p, h) == [1.0]
    np.testing.assert_allclose(attention_weights(0, [(1, 0), (2, 0)], 0, p, h), [0.5, 0.5])


def test_weights_closed_form_sevenths():
    # d = 1 with identity transforms: logit = h_neighbor * h_entity
    p = toy_params(1, 1)
    h = np.array([[1.0], [0.0], [np.log(2)], [np.log(4)]])
    w = attention_weights(0, [(1, 0), (2, 0), (3, 0)], 0, p, h)
    np.testing.assert_allclose(w, [1 / 7, 2 / 7, 4 / 7], rtol=1e-12)


def test_empty_neighborhood_has_no_weights():
    assert attention_weights(0, [], 0, toy_params(1, 1), np.ones((1, 1))) == []


# --- vectorized forward --------------------------------------------------------------------

@settings(max_examples=25, deadline=None)
@given(st.integers(0, 10_000), st.booleans())
def test_vectorized_forward_matches_reference(seed, with_text):
    fused, rng = random_graph(seed)
    text = rng.normal(size=(fused.num_entities, 3)) if with_text else None
    mask = rng.random(fused.num_entities) < 0.7 if with_text else None
    p = init_encoder(fused.num_entities, fused.num_relations, 4, 2, rng, init_std=0.5, text=text, text_mask=mask)
    p.tensors["beta"] = rng.uniform(0.5, 2.0, size=(fused.num_relations, 1))
    expected, _ = reference_encode(fused, p)
    np.testing.assert_allclose(encode(fused, p).vectors, expected, rtol=1e-10, atol=1e-12)


def test_plain_mode_ignores_relations():
    fused, rng = random_graph(4)
    p = init_encoder(fused.num_entities, fused.num_relations, 4, 2, rng, relation_aware=False, init_std=0.5)
    assert "beta" not in p.tensors and "relations" not in p.tensors
    expected, _ = reference_encode(fused, p)
    np.testing.assert_allclose(encode(fused, p).vectors, expected, rtol=1e-10, atol=1e-12)


@settings(max_examples=50, deadline=None)
@given(st.integers(0, 10_000))
def test_attention_sums_to_one_and_isolated_keep_input(seed):
    rng = np.random.default_rng(seed)
    n = int(rng.integers(2, 101))
    m = int(rng.integers(1, 2 * n))
    rels = tuple(f"r{i}" for i in range(5))
    tr = sorted({(int(rng.integers(n)), int(rng.integers(5)), int(rng.integers(n))) for _ in range(m)})
    fused = build_fused([make_kg("en", n, tr, relations=rels)], [])
    p = init_encoder(n, fused.num_relations, 4, 2, rng, init_std=1.0)
    rec = dm.Recording()
    h, atts = forward(rec, {k: rec.const(v) for k, v in p.tensors.items()}, fused, p, return_attention=True)
    _, dst, _ = fused.message_edges()
    for a in atts:
        sums = np.bincount(dst, weights=a, minlength=n)
        has = np.bincount(dst, minlength=n) > 0
        np.testing.assert_allclose(sums[has], 1.0, atol=1e-9)
    isolated = np.bincount(dst, minlength=n) == 0
    np.testing.assert_array_equal(h.data[isolated], p.tensors["entities"][isolated])


def test_residual_guarantee_with_zero_wv():
    fused, rng = random_graph(7)
    text = rng.normal(size=(fused.num_entities, 3))
    p = init_encoder(fused.num_entities, fused.num_relations, 4, 2, rng, text=text)
    for l in range(p.layers):
        p.tensors[f"layer{l}.Wv"][:] = 0.0
    h0 = text @ p.tensors["text_proj"] + p.tensors["entities"]
    np.testing.assert_array_equal(encode(fused, p).vectors, h0)


@settings(max_examples=20, deadline=None)
@given(st.integers(0, 10_000))
def test_permutation_equivariance(seed):
    fused, rng = random_graph(seed)
    p = init_encoder(fused.num_entities, fused.num_relations, 4, 2, rng, init_std=0.5)
    perms = [rng.permutation(kg.num_entities) for kg in fused.kgs]   # old local id -> new local id
    kgs2, pairs2 = [], []
    for kg, perm in zip(fused.kgs, perms):
        tr = kg.train.copy()
        tr[:, 0], tr[:, 2] = perm[tr[:, 0]], perm[tr[:, 2]]
        kgs2.append(make_kg(kg.language, kg.num_entities, tr, relations=kg.relations))
    index = {kg.language: i for i, kg in enumerate(fused.kgs)}
    for q in fused.pairs:
        pairs2.append(AlignmentPair(q.lang_a, int(perms[index[q.lang_a]][q.local_a]),
                                    q.lang_b, int(perms[index[q.lang_b]][q.local_b])))
    fused2 = build_fused(kgs2, pairs2)
    gperm = np.concatenate([fused.offsets[i] + perm for i, perm in enumerate(perms)])
    p2 = p.copy()
    p2.tensors["entities"] = np.empty_like(p.tensors["entities"])
    p2.tensors["entities"][gperm] = p.tensors["entities"]
    out, out2 = encode(fused, p).vectors, encode(fused2, p2).vectors
    np.testing.assert_allclose(out2[gperm], out, rtol=1e-10, atol=1e-12)


def test_subgraph_encoding_uses_global_rows():
    fused, rng = random_graph(11)
    p = init_encoder(fused.num_entities, fused.num_relations, 4, 1, rng, init_std=0.5)
    s = sample_khop(fused, [0], k=1)
    emb = encode(s, p)
    assert list(emb.ids) == list(s.global_ids)
    # a 1-layer encoding of the 1-hop sample equals the full encoding at the seed
    np.testing.assert_allclose(emb[s.local_id(0)], encode(fused, p).vectors[0], rtol=1e-12)


def test_eq2_loss_gradients_for_every_encoder_tensor():
    en = make_kg("en", 5, [(0, 0, 1), (1, 1, 2), (3, 2, 4), (2, 0, 4)])
    de = make_kg("de", 4, [(0, 0, 1), (2, 1, 3)])
    fused = build_fused([en, de], [AlignmentPair("en", 0, "de", 0), AlignmentPair("en", 3, "de", 2)])
    rng = np.random.default_rng(3)
    text = rng.normal(size=(fused.num_entities, 3))
    p = init_encoder(fused.num_entities, fused.num_relations, 3, 2, rng, init_std=0.5, text=text)
    p.tensors["beta"] = rng.uniform(0.5, 1.5, size=p.tensors["beta"].shape)
    dec = rng.normal(size=(fused.num_relations - 1, 3))
    pos = fused.facts[fused.facts[:, 1] != fused.align_id]
    neg = pos.copy()
    neg[:, 2] = (neg[:, 2] + 1) % fused.num_entities

    def loss(rec, leaves):
        h = forward(rec, leaves, fused, p)
        return margin_loss(h, leaves["dec"], pos, neg, margin=10.0)   # every hinge active

    params = dict(p.tensors, dec=dec)
    report = dm.finite_diff_check(loss, params, h=1e-6)
    assert set(report.per_param) == set(params)
    assert report.max_rel_error <= 1e-4, report.per_param


# --- attention report -------------------------------------------------------------------------

def test_report_identity_without_alignment():
    en = make_kg("en", 4, [(0, 0, 1), (2, 1, 3)])
    de = make_kg("de", 3, [(0, 0, 1)])
    fused = build_fused([en, de], [])
    p = init_encoder(fused.num_entities, fused.num_relations, 4, 2, 0, init_std=0.5)
    np.testing.assert_allclose(attention_report(fused, p), np.eye(2))


def test_report_equal_logits_split_evenly():
    # en0 has one local (en1) and one cross-lingual (de0) neighbor; Wk = 0 makes every logit 0.
    # en0 contributes (0.5, 0.5), en1 (1, 0); de0 hears only en0.
    en = make_kg("en", 2, [(0, 0, 1)])
    de = make_kg("de", 1, [])
    fused = build_fused([en, de], [AlignmentPair("en", 0, "de", 0)])
    p = init_encoder(fused.num_entities, fused.num_relations, 3, 1, 0, init_std=0.5)
    p.tensors["layer0.Wk"][:] = 0.0
    rep = attention_report(fused, p)
    np.testing.assert_allclose(rep, [[0.75, 0.25], [1.0, 0.0]], atol=1e-15)


def enumerate_report(fused, p):
    _, weights = reference_encode(fused, p)
    n_lang = len(fused.languages)
    rows = [[] for _ in range(n_lang)]
    for j, entries in weights[-1].items():
        b = np.zeros(n_lang)
        for (nbr, _), w in entries:
            b[fused.lang_of[nbr]] += w
        rows[fused.lang_of[j]].append(b)
    out = np.eye(n_lang)
    for i, r in enumerate(rows):
        if r:
            m = np.mean(r, axis=0)
            out[i] = m / m.sum()
    return out


@pytest.mark.parametrize("seed", range(5))
def test_report_matches_enumeration_with_hand_set_beta(seed):
    fused, rng = random_graph(100 + seed, n_langs=3)
    p = init_encoder(fused.num_entities, fused.num_relations, 4, 2, rng, init_std=0.7)
    p.tensors["beta"][:, 0] = [0.5, 1.0, 2.0, 3.0][: fused.num_relations]
    np.testing.assert_allclose(attention_report(fused, p), enumerate_report(fused, p), rtol=1e-10)


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 10_000), st.floats(0.0, 3.0), st.floats(0.01, 3.0))
def test_cross_lingual_mass_grows_with_align_beta(seed, beta, delta):
    # holds when raw align logits are non-negative: one layer, identity transforms, h0 >= 0
    fused, rng = random_graph(seed, n_langs=3)
    p = toy_params(3, fused.num_relations, entities=rng.uniform(0, 1, size=(fused.num_entities, 3)))
    p.tensors["beta"][:, 0] = rng.uniform(0.2, 2.0, size=fused.num_relations)
    p.tensors["beta"][fused.align_id] = beta
    low = attention_report(fused, p)
    p.tensors["beta"][fused.align_id] = beta + delta
    high = attention_report(fused, p)
    cross = lambda m: m.sum(axis=1) - np.diag(m)
    assert (cross(high) >= cross(low) - 1e-12).all()
