"""Recommendation models and local client training.

Four model kinds share one prediction head: score = sigmoid(h . FFN(x)).
``ncf``/``vncf`` feed x = [user, item(, mapped visual feature)]; the graph
variants ``lightgcn``/``lightvgcn`` first propagate one layer of the
client's local bipartite graph into the user/item embeddings and (for the
visual kind) inject mapped visual features during propagation as well.

Public parameters (item embeddings, visual map, FFN, head) are shared
through the server; the user embedding is private and never leaves the
client.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .errors import EmptyLocalData, ShapeMismatch, UnknownItem
from .optim import sgd_apply
from .seeding import rng_for

EMBED_DIM = 32
HIDDEN_DIM = 32
OUT_DIM = 16

MODEL_KINDS = ("ncf", "vncf", "lightgcn", "lightvgcn")
DENSE_KEYS = ("visual_map", "w1", "b1", "w2", "b2", "head")


def is_visual(kind):
    return kind in ("vncf", "lightvgcn")


def is_graph(kind):
    return kind in ("lightgcn", "lightvgcn")


def input_dim(kind):
    return 3 * EMBED_DIM if is_visual(kind) else 2 * EMBED_DIM


@dataclass
class PublicParams:
    """Server-held shared parameters."""

    item_emb: np.ndarray          # (num_items, 32)
    visual_map: np.ndarray | None  # (32, feature_dim), None for plain kinds
    w1: np.ndarray                # (input_dim, 32)
    b1: np.ndarray                # (32,)
    w2: np.ndarray                # (32, 16)
    b2: np.ndarray                # (16,)
    head: np.ndarray              # (16,)

    @property
    def num_items(self):
        return self.item_emb.shape[0]

    def dense(self):
        out = {"w1": self.w1, "b1": self.b1, "w2": self.w2, "b2": self.b2,
               "head": self.head}
        if self.visual_map is not None:
            out["visual_map"] = self.visual_map
        return out

    def arrays(self):
        yield self.item_emb
        yield from self.dense().values()

    def fingerprint(self):
        import hashlib
        h = hashlib.sha256()
        for arr in self.arrays():
            h.update(arr.tobytes())
        return h.hexdigest()


def init_public_params(num_items, kind, feature_dim, seed):
    rng = rng_for(seed, "public-params")
    item_emb = rng.normal(0.0, 0.01, size=(num_items, EMBED_DIM))
    # Scaled so mapped visual features start commensurate with embeddings;
    # a louder visual channel drowns the collaborative signal entirely.
    visual_map = rng.normal(0.0, 0.01, size=(EMBED_DIM, feature_dim)) if is_visual(kind) else None
    d_in = input_dim(kind)
    w1 = rng.normal(0.0, np.sqrt(2.0 / (d_in + HIDDEN_DIM)), size=(d_in, HIDDEN_DIM))
    w2 = rng.normal(0.0, np.sqrt(2.0 / (HIDDEN_DIM + OUT_DIM)), size=(HIDDEN_DIM, OUT_DIM))
    head = rng.normal(0.0, 0.1, size=OUT_DIM)
    return PublicParams(item_emb=item_emb, visual_map=visual_map, w1=w1,
                        b1=np.zeros(HIDDEN_DIM), w2=w2, b2=np.zeros(OUT_DIM), head=head)


def init_user_embedding(seed, user_id):
    return rng_for(seed, "user-emb", user_id).normal(0.0, 0.01, size=EMBED_DIM)


@dataclass
class ClientState:
    """One user's private embedding plus their local training records."""

    user_id: int
    user_emb: np.ndarray
    records: list = field(default_factory=list)   # (item_id, rating) training pairs
    pos_items: tuple = ()                         # sorted positive item ids

    @classmethod
    def build(cls, user_id, user_emb, interaction_records):
        pairs = [(r.item_id, r.rating) for r in interaction_records]
        pos = tuple(sorted(i for i, r in pairs if r == 1))
        return cls(user_id=user_id, user_emb=np.asarray(user_emb, dtype=np.float64),
                   records=pairs, pos_items=pos)


@dataclass
class GradientUpload:
    """One round's message from a client: public-parameter gradients only.

    ``item_rows`` is sparse by item row; all other gradients are dense.
    """

    client_id: int
    epoch: int
    item_rows: dict                # item_id -> (32,) gradient row
    dense: dict                    # name -> gradient array

    def validate(self, num_items):
        for idx, row in self.item_rows.items():
            if not 0 <= idx < num_items:
                raise UnknownItem(f"gradient row for item {idx}")
            if not np.all(np.isfinite(row)):
                raise ShapeMismatch(f"non-finite gradient row for item {idx}")
        for name, arr in self.dense.items():
            if not np.all(np.isfinite(arr)):
                raise ShapeMismatch(f"non-finite gradient for {name}")


# --- tape-graph forward passes ---

def _param_leaves(graph, public, kind):
    leaves = {
        "item_emb": graph.leaf(public.item_emb, name="item_emb"),
        "w1": graph.leaf(public.w1, name="w1"),
        "b1": graph.leaf(public.b1, name="b1"),
        "w2": graph.leaf(public.w2, name="w2"),
        "b2": graph.leaf(public.b2, name="b2"),
        "head": graph.leaf(public.head, name="head"),
    }
    if is_visual(kind):
        leaves["visual_map"] = graph.leaf(public.visual_map, name="visual_map")
    return leaves


def ffn_scores(x, leaves):
    h1 = ad.relu(ad.add_bias(ad.matmul(x, leaves["w1"]), leaves["b1"]))
    h2 = ad.add_bias(ad.matmul(h1, leaves["w2"]), leaves["b2"])
    logits = ad.matmul(h2, ad.reshape(leaves["head"], (OUT_DIM, 1)))
    return ad.sigmoid(ad.reshape(logits, (x.data.shape[0],)))


def score_items(u_vec, item_ids, leaves, kind, features, pos_items):
    """Predicted preferences for ``item_ids`` as a tape tensor.

    ``u_vec`` is a length-32 tensor (leaf or derived); ``features`` is a
    constant (num_items, feature_dim) array for visual kinds.  For graph
    kinds the one-layer local propagation is part of the tape.
    """
    ids = np.asarray(item_ids, dtype=np.int64)
    n = len(ids)
    visual = is_visual(kind)
    feats = ad.constant(features) if visual else None

    if is_graph(kind):
        u_final, v_rows = _propagate(u_vec, ids, leaves, feats, pos_items, visual)
    else:
        u_final, v_rows = u_vec, ad.gather_rows(leaves["item_emb"], ids)

    parts = [ad.broadcast_rows(u_final, n), v_rows]
    if visual:
        parts.append(ad.matmul(ad.gather_rows(feats, ids), ad.transpose(leaves["visual_map"])))
    return ffn_scores(ad.concat(parts, axis=1), leaves)


def _propagate(u_vec, ids, leaves, feats, pos_items, visual):
    """One propagation layer on the client's local bipartite graph.

    Locally each neighbor item has degree 1, so the symmetric normalization
    reduces to 1/sqrt(deg(user)).  Neighbors are visited in ascending item
    id, which makes the summation order (and the bits) permutation-proof.
    """
    pos = np.asarray(sorted(pos_items), dtype=np.int64)
    n = len(ids)
    if len(pos) == 0:
        return u_vec, ad.gather_rows(leaves["item_emb"], ids)
    inv = 1.0 / np.sqrt(len(pos))

    neigh = ad.gather_rows(leaves["item_emb"], pos)
    if visual:
        neigh = ad.add(neigh, ad.matmul(ad.gather_rows(feats, pos),
                                        ad.transpose(leaves["visual_map"])))
    ones = ad.constant(np.ones((1, len(pos))))
    u_layer1 = ad.reshape(ad.scale(ad.matmul(ones, neigh), inv), (EMBED_DIM,))
    u_final = ad.add(u_vec, u_layer1)

    v_rows = ad.gather_rows(leaves["item_emb"], ids)
    pos_set = set(int(p) for p in pos)
    mask = np.zeros((n, EMBED_DIM))
    mask[[k for k, i in enumerate(ids) if int(i) in pos_set]] = 1.0
    v_layer1 = ad.mul(ad.broadcast_rows(ad.scale(u_vec, inv), n), ad.constant(mask))
    return u_final, ad.add(v_rows, v_layer1)


def local_loss_graph(client, public, kind, features=None):
    """Binary cross-entropy over the client's local records, on a tape.

    Returns (graph, loss, leaves) where ``leaves`` includes the private
    ``user_emb`` plus every public parameter.
    """
    if not client.records:
        raise EmptyLocalData(f"user {client.user_id}")
    graph = ad.Graph()
    leaves = _param_leaves(graph, public, kind)
    leaves["user_emb"] = graph.leaf(client.user_emb, name="user_emb")
    ids = [i for i, _ in client.records]
    labels = ad.constant(np.array([r for _, r in client.records], dtype=np.float64))
    preds = score_items(leaves["user_emb"], ids, leaves, kind, features, client.pos_items)
    return graph, ad.bce_loss(preds, labels), leaves


def local_train(client, public, kind, lr, epoch, features=None, local_epochs=1):
    """Run ``local_epochs`` passes; upload accumulated public gradients.

    The private embedding moves by plain SGD each pass; public gradients
    are evaluated at the round's fixed public snapshot and summed.  Only
    item rows the client actually touched appear in the upload.
    """
    u = client.user_emb
    touched = sorted(set(i for i, _ in client.records))
    item_rows = {i: np.zeros(EMBED_DIM) for i in touched}
    dense = {k: np.zeros_like(v) for k, v in public.dense().items()
             if k != "visual_map" or is_visual(kind)}

    for _ in range(local_epochs):
        work = ClientState(client.user_id, u, client.records, client.pos_items)
        graph, loss, leaves = local_loss_graph(work, public, kind, features)
        grads = ad.backward(graph, loss)
        for i in touched:
            item_rows[i] += grads[leaves["item_emb"]][i]
        for k in dense:
            dense[k] += grads[leaves[k]]
        u = sgd_apply(u, grads[leaves["user_emb"]], lr)

    upload = GradientUpload(client_id=client.user_id, epoch=epoch,
                            item_rows=item_rows, dense=dense)
    return u, upload


# --- fast numpy prediction path (no tape; used for ranking/metrics) ---

def predict_scores(public, kind, user_emb, pos_items, features=None, item_ids=None):
    """Scores for ``item_ids`` (default: every item) as a plain array.

    Mirrors the tape forward exactly; a test pins the equality.
    """
    ids = np.arange(public.num_items) if item_ids is None else np.asarray(item_ids)
    u = np.asarray(user_emb, dtype=np.float64)
    v = public.item_emb[ids]

    if is_graph(kind):
        pos = np.asarray(sorted(pos_items), dtype=np.int64)
        if len(pos):
            inv = 1.0 / np.sqrt(len(pos))
            neigh = public.item_emb[pos]
            if is_visual(kind):
                neigh = neigh + features[pos] @ public.visual_map.T
            u_final = u + inv * neigh.sum(axis=0)
            member = np.isin(ids, pos)
            v = v + np.where(member[:, None], inv * u, 0.0)
        else:
            u_final = u
    else:
        u_final = u

    parts = [np.broadcast_to(u_final, (len(ids), EMBED_DIM)), v]
    if is_visual(kind):
        parts.append(features[ids] @ public.visual_map.T)
    x = np.concatenate(parts, axis=1)
    h1 = np.maximum(x @ public.w1 + public.b1, 0.0)
    logits = (h1 @ public.w2 + public.b2) @ public.head
    z = np.exp(-np.abs(logits))
    return np.where(logits >= 0, 1.0 / (1.0 + z), z / (1.0 + z))


def top_k_items(scores, k, candidate_ids=None, exclude=()):
    """Top-k item ids by score, ties broken by ascending item id.

    ``scores`` is indexed by item id.  ``candidate_ids`` restricts the pool;
    ``exclude`` removes ids from it.
    """
    if candidate_ids is None:
        candidate_ids = np.arange(len(scores))
    pool = np.asarray(candidate_ids)
    if len(exclude):
        pool = pool[~np.isin(pool, np.asarray(list(exclude)))]
    vals = scores[pool]
    order = np.lexsort((pool, -vals))
    return pool[order[:k]]
