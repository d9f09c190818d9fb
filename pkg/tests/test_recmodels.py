"""Model forwards against straight-line oracles; local training contracts."""

import numpy as np
import pytest

from fedvisrec import autodiff as ad
from fedvisrec import recmodels as rm
from fedvisrec.dataio import InteractionRecord
from fedvisrec.errors import EmptyLocalData

LN2 = 0.6931471805599453


def toy_public(kind, num_items=4, feature_dim=6, seed=0):
    return rm.init_public_params(num_items, kind, feature_dim, seed)


def toy_features(num_items=4, feature_dim=6, seed=1):
    return np.random.default_rng(seed).normal(0, 1, size=(num_items, feature_dim))


def toy_client(user_id=0, pairs=((0, 1), (1, 0), (2, 1)), seed=2):
    recs = [InteractionRecord(user_id, i, r) for i, r in pairs]
    u = rm.init_user_embedding(seed, user_id)
    return rm.ClientState.build(user_id, u, recs)


def _np_sigmoid(x):
    return 1.0 / (1.0 + np.exp(-x))


def oracle_vncf(u, v, f, public):
    """Independent straight-line reimplementation of the visual forward."""
    x = np.concatenate([u, v, public.visual_map @ f])
    h1 = np.maximum(x @ public.w1 + public.b1, 0.0)
    h2 = h1 @ public.w2 + public.b2
    return _np_sigmoid(h2 @ public.head)


def test_zero_head_gives_half():
    public = toy_public("vncf")
    public.head = np.zeros_like(public.head)
    feats = toy_features()
    client = toy_client()
    scores = rm.predict_scores(public, "vncf", client.user_emb, client.pos_items, feats)
    assert np.all(scores == 0.5)


def test_forward_deterministic():
    public = toy_public("vncf")
    feats = toy_features()
    client = toy_client()
    a = rm.predict_scores(public, "vncf", client.user_emb, client.pos_items, feats)
    b = rm.predict_scores(public, "vncf", client.user_emb, client.pos_items, feats)
    assert a.tobytes() == b.tobytes()


def test_vncf_matches_duplicate_implementation():
    public = toy_public("vncf", num_items=2)
    feats = toy_features(num_items=2)
    for user in range(2):
        client = toy_client(user_id=user, pairs=((0, 1), (1, 0)), seed=3)
        scores = rm.predict_scores(public, "vncf", client.user_emb, client.pos_items, feats)
        for j in range(2):
            expect = oracle_vncf(client.user_emb, public.item_emb[j], feats[j], public)
            assert abs(scores[j] - expect) < 1e-12


def test_tape_forward_equals_fast_path():
    feats = toy_features()
    client = toy_client()
    for kind in rm.MODEL_KINDS:
        public = toy_public(kind)
        f = feats if rm.is_visual(kind) else None
        graph = ad.Graph()
        leaves = rm._param_leaves(graph, public, kind)
        u = graph.leaf(client.user_emb)
        tape = rm.score_items(u, [0, 1, 2, 3], leaves, kind, f, client.pos_items)
        fast = rm.predict_scores(public, kind, client.user_emb, client.pos_items, f)
        assert np.allclose(tape.data, fast, atol=1e-14), kind


def test_lightvgcn_single_edge_closed_form():
    public = toy_public("lightvgcn", num_items=1)
    feats = toy_features(num_items=1)
    client = toy_client(pairs=((0, 1),))
    graph = ad.Graph()
    leaves = rm._param_leaves(graph, public, "lightvgcn")
    u = graph.leaf(client.user_emb)
    u_final, v_rows = rm._propagate(u, np.array([0]), leaves, ad.constant(feats),
                                    client.pos_items, visual=True)
    expect_u = client.user_emb + public.item_emb[0] + public.visual_map @ feats[0]
    assert np.allclose(u_final.data, expect_u, atol=1e-12)
    expect_v = public.item_emb[0] + client.user_emb  # deg 1 on both sides
    assert np.allclose(v_rows.data[0], expect_v, atol=1e-12)


def test_lightvgcn_no_edges_keeps_layer0():
    public = toy_public("lightvgcn")
    feats = toy_features()
    client = toy_client(pairs=((0, 0), (1, 0)))  # negatives only: no graph edges
    assert client.pos_items == ()
    scores = rm.predict_scores(public, "lightvgcn", client.user_emb, (), feats)
    # With no propagation the forward collapses to the vncf formula.
    plain = rm.predict_scores(public, "vncf", client.user_emb, (), feats)
    assert np.allclose(scores, plain, atol=1e-15)


def test_lightvgcn_degree_normalization():
    public = toy_public("lightvgcn", num_items=8)
    feats = toy_features(num_items=8)
    u = rm.init_user_embedding(5, 0)

    def layer1(pos_items):
        graph = ad.Graph()
        leaves = rm._param_leaves(graph, public, "lightvgcn")
        ut = graph.leaf(u)
        u_final, _ = rm._propagate(ut, np.array([0]), leaves, ad.constant(feats),
                                   pos_items, visual=True)
        return u_final.data - u

    per_item = {i: layer1((i,)) for i in (0, 1, 2, 3)}
    combined = layer1((0, 1))
    # Doubling the degree scales each neighbor's term by 1/sqrt(2).
    assert np.allclose(combined, (per_item[0] + per_item[1]) / np.sqrt(2), atol=1e-12)


def test_propagation_permutation_invariant_bitwise():
    public = toy_public("lightvgcn", num_items=6)
    feats = toy_features(num_items=6)
    u = rm.init_user_embedding(6, 1)

    def run(pos_items):
        return rm.predict_scores(public, "lightvgcn", u, pos_items, feats)

    assert run((0, 3, 5)).tobytes() == run((5, 0, 3)).tobytes()


def test_local_loss_zero_head_is_ln2_per_record():
    public = toy_public("vncf")
    public.head = np.zeros_like(public.head)
    feats = toy_features()
    client = toy_client()
    graph, loss, _ = rm.local_loss_graph(client, public, "vncf", feats)
    assert abs(loss.item() - len(client.records) * LN2) < 1e-12


def test_local_loss_requires_records():
    public = toy_public("ncf")
    client = rm.ClientState(user_id=0, user_emb=np.zeros(32), records=[], pos_items=())
    with pytest.raises(EmptyLocalData):
        rm.local_loss_graph(client, public, "ncf")


@pytest.mark.parametrize("kind", rm.MODEL_KINDS)
def test_local_loss_gradients_match_finite_differences(kind):
    from fedvisrec.gradcheck import check_model_loss

    result = check_model_loss(kind, seed=3, coords_per_param=0)
    assert result.passed, result


def test_local_train_zero_epochs_is_noop():
    public = toy_public("vncf")
    feats = toy_features()
    client = toy_client()
    new_u, upload = rm.local_train(client, public, "vncf", lr=0.001, epoch=1,
                                   features=feats, local_epochs=0)
    assert np.array_equal(new_u, client.user_emb)
    assert all(np.all(v == 0.0) for v in upload.item_rows.values())
    assert all(np.all(v == 0.0) for v in upload.dense.values())


def test_local_train_single_pass_equals_backward():
    public = toy_public("vncf")
    feats = toy_features()
    client = toy_client()
    _, upload = rm.local_train(client, public, "vncf", lr=0.001, epoch=1,
                               features=feats, local_epochs=1)
    graph, loss, leaves = rm.local_loss_graph(client, public, "vncf", feats)
    grads = ad.backward(graph, loss)
    for i, row in upload.item_rows.items():
        assert np.array_equal(row, grads[leaves["item_emb"]][i])
    for k, v in upload.dense.items():
        assert np.array_equal(v, grads[leaves[k]])


def test_local_train_untouched_item_rows_are_zero():
    public = toy_public("vncf", num_items=4)
    feats = toy_features()
    client = toy_client(pairs=((0, 1), (2, 0)))
    graph, loss, leaves = rm.local_loss_graph(client, public, "vncf", feats)
    grads = ad.backward(graph, loss)
    assert np.all(grads[leaves["item_emb"]][1] == 0.0)
    assert np.all(grads[leaves["item_emb"]][3] == 0.0)
    _, upload = rm.local_train(client, public, "vncf", lr=0.001, epoch=0, features=feats)
    assert set(upload.item_rows) == {0, 2}


def test_local_train_never_mutates_public():
    public = toy_public("lightvgcn")
    feats = toy_features()
    before = public.fingerprint()
    rm.local_train(toy_client(), public, "lightvgcn", lr=0.001, epoch=0,
                   features=feats, local_epochs=3)
    assert public.fingerprint() == before


def test_ncf_equals_vncf_with_zeroed_visual_path():
    # Shared non-visual slice + zero visual features and map: identical scores.
    ncf = toy_public("ncf")
    vncf = toy_public("vncf")
    vncf.w1 = np.vstack([ncf.w1, np.zeros((rm.EMBED_DIM, rm.HIDDEN_DIM))])
    for name in ("b1", "w2", "b2", "head"):
        setattr(vncf, name, getattr(ncf, name))
    vncf.item_emb = ncf.item_emb
    vncf.visual_map = np.zeros_like(vncf.visual_map)
    feats = np.zeros((4, 6))
    client = toy_client()
    a = rm.predict_scores(ncf, "ncf", client.user_emb, client.pos_items)
    b = rm.predict_scores(vncf, "vncf", client.user_emb, client.pos_items, feats)
    assert np.array_equal(a, b)


def test_top_k_tie_break_ascending_id():
    scores = np.array([0.5, 0.9, 0.9, 0.1, 0.9])
    assert rm.top_k_items(scores, 3).tolist() == [1, 2, 4]
    assert rm.top_k_items(scores, 2, exclude=(1,)).tolist() == [2, 4]
    assert rm.top_k_items(scores, 2, candidate_ids=np.array([0, 3, 4])).tolist() == [4, 0]
