"""Metric oracles: brute-force enumeration and hand-computed kernels."""

import math

import numpy as np
import pytest

from fedvisrec import dataio, metrics
from fedvisrec import recmodels as rm
from fedvisrec.dataio import InteractionRecord
from fedvisrec.errors import MissingSplit, NoEligibleUsers


def build_clients(num_users, num_items, pos_by_user, seed=0):
    clients = []
    for u in range(num_users):
        recs = [InteractionRecord(u, i, 1) for i in pos_by_user.get(u, [])]
        clients.append(rm.ClientState.build(u, rm.init_user_embedding(seed, u), recs))
    return clients


def brute_force_er(public, clients, targets, k, kind):
    """Independent enumeration with python sorting (no shared top-k code)."""
    rates = []
    for t in targets:
        exposed, eligible = 0, 0
        for c in clients:
            if t in c.pos_items:
                continue
            eligible += 1
            scores = rm.predict_scores(public, kind, c.user_emb, c.pos_items)
            ranked = sorted((i for i in range(public.num_items) if i not in c.pos_items),
                            key=lambda i: (-scores[i], i))
            if t in ranked[:k]:
                exposed += 1
        rates.append(exposed / eligible)
    return sum(rates) / len(rates)


def brute_force_ndcg(public, clients, split, k, kind):
    total = 0.0
    for c in clients:
        held = split.held_out[c.user_id]
        scores = rm.predict_scores(public, kind, c.user_emb, c.pos_items)
        ranked = sorted(split.candidates[c.user_id].tolist(),
                        key=lambda i: (-scores[i], i))
        gain = 0.0
        if held in ranked[:k]:
            gain = 1.0 / math.log2(ranked.index(held) + 2)
        total += gain
    return total / len(clients)


@pytest.mark.parametrize("seed", range(50))
def test_er_and_ndcg_match_brute_force(seed):
    rng = np.random.default_rng(seed)
    num_users = int(rng.integers(2, 11))
    num_items = int(rng.integers(4, 11))
    public = rm.init_public_params(num_items, "ncf", 0, seed)
    public.head = rng.normal(0, 1.0, size=rm.OUT_DIM)  # spread the scores

    pos_by_user = {}
    for u in range(num_users):
        n = int(rng.integers(2, max(3, num_items // 2 + 1)))
        pos_by_user[u] = sorted(int(i) for i in rng.choice(num_items, n, replace=False))
    clients = build_clients(num_users, num_items, pos_by_user, seed)
    records = [InteractionRecord(u, i, 1) for u, items in pos_by_user.items()
               for i in items]

    targets = [int(rng.integers(num_items))]
    if all(targets[0] in v for v in pos_by_user.values()):
        pos_by_user[0] = [i for i in pos_by_user[0] if i != targets[0]][:2] or [
            (targets[0] + 1) % num_items]
        clients = build_clients(num_users, num_items, pos_by_user, seed)

    er, _ = metrics.exposure_rate_at_k(public, clients, targets, 5, "ncf")
    assert abs(er - brute_force_er(public, clients, targets, 5, "ncf")) < 1e-12

    split = dataio.make_eval_split(records, num_items, seed)
    ndcg = metrics.ndcg_at_k(public, clients, split, 5, "ncf")
    assert abs(ndcg - brute_force_ndcg(public, clients, split, 5, "ncf")) < 1e-12


def rig_public(num_items, item_values):
    """A model whose logit for item j is exactly relu(item_values[j]).

    Routes item-embedding coordinate 0 through one hidden unit straight to
    the head, zeroing everything else.
    """
    public = rm.init_public_params(num_items, "ncf", 0, 1)
    emb = np.zeros_like(public.item_emb)
    emb[:, 0] = item_values
    public.item_emb = emb
    w1 = np.zeros_like(public.w1)
    w1[rm.EMBED_DIM, 0] = 1.0  # item slice starts after the user slice
    public.w1 = w1
    w2 = np.zeros_like(public.w2)
    w2[0, 0] = 1.0
    public.w2 = w2
    public.b1 = np.zeros_like(public.b1)
    public.b2 = np.zeros_like(public.b2)
    head = np.zeros_like(public.head)
    head[0] = 1.0
    public.head = head
    return public


def test_er_extremes():
    values = np.array([0.1, 0.2, 0.3, 0.4, 0.5, 3.0])
    public = rig_public(6, values)
    clients = build_clients(3, 6, {0: [0], 1: [1], 2: [2]})
    er, _ = metrics.exposure_rate_at_k(public, clients, [5], 1, "ncf")
    assert er == 1.0  # item 5 beats everything for every eligible user
    values[5] = -3.0  # relu(-3) = 0: strictly below every other item
    public = rig_public(6, values)
    er, _ = metrics.exposure_rate_at_k(public, clients, [5], 1, "ncf")
    assert er == 0.0


def test_er_two_thirds():
    # 3 eligible users, 2 exposed, single target.
    public = rm.init_public_params(4, "ncf", 0, 2)
    clients = build_clients(3, 4, {0: [0], 1: [0], 2: [0]}, seed=3)
    target = 3
    k = 1
    exposed = 0
    for c in clients:
        scores = rm.predict_scores(public, "ncf", c.user_emb, c.pos_items)
        ranked = sorted((i for i in range(4) if i not in c.pos_items),
                        key=lambda i: (-scores[i], i))
        exposed += ranked[0] == target
    er, _ = metrics.exposure_rate_at_k(public, clients, [target], k, "ncf")
    assert er == exposed / 3


def test_er_no_eligible_users():
    public = rm.init_public_params(3, "ncf", 0, 1)
    clients = build_clients(2, 3, {0: [0], 1: [0]})
    with pytest.raises(NoEligibleUsers):
        metrics.exposure_rate_at_k(public, clients, [0], 2, "ncf")


def test_ndcg_rank_positions():
    records = [InteractionRecord(0, i, 1) for i in (0, 1)]
    split = dataio.make_eval_split(records, 25, seed=1)
    held = split.held_out[0]
    clients = build_clients(1, 25, {0: [i for i in (0, 1) if i != held]})

    values = np.full(25, 0.1)
    values[held] = 3.0
    assert metrics.ndcg_at_k(public := rig_public(25, values), clients, split, 20, "ncf") == 1.0

    # Held-out item second behind one stronger candidate: 1/log2(3).
    stronger = next(i for i in split.candidates[0] if i != held)
    values[stronger] = 5.0
    ndcg = metrics.ndcg_at_k(rig_public(25, values), clients, split, 20, "ncf")
    assert ndcg == pytest.approx(1.0 / np.log2(3), abs=1e-15)
    assert ndcg == pytest.approx(0.6309297535714574, abs=1e-12)

    # Twenty candidates strictly above the held-out item: outside top-20.
    values = np.full(25, 3.0)
    values[held] = 0.1
    assert metrics.ndcg_at_k(rig_public(25, values), clients, split, 20, "ncf") == 0.0


def test_ndcg_requires_split():
    public = rm.init_public_params(3, "ncf", 0, 1)
    with pytest.raises(MissingSplit):
        metrics.ndcg_at_k(public, [], None, 20, "ncf")


def test_blur_constant_image_is_zero():
    img = np.full((16, 16, 3), 37)
    assert metrics.blur_variance(img) == 0.0


def test_blur_impulse_matches_hand_convolution():
    img = np.zeros((5, 5, 3))
    img[2, 2, :] = 90.0  # grayscale value 90 at center
    # Hand convolution of the 3x3 Laplacian over the 3x3 valid region:
    # responses are 90*kernel flipped onto each position.
    responses = []
    kernel = metrics.LAPLACIAN
    gray = img.mean(axis=2)
    for r in range(3):
        for c in range(3):
            acc = 0.0
            for i in range(3):
                for j in range(3):
                    acc += kernel[i, j] * gray[r + i, c + j]
            responses.append(acc)
    expect = np.var(responses)
    assert expect > 0
    assert metrics.blur_variance(img) == pytest.approx(expect, abs=1e-12)


def test_catalog_stddev_identical_images_is_zero():
    img = dataio.synth_item_image(1, 0)
    assert metrics.catalog_blur_stddev([img, img, img]) < 1e-12
