"""Ranking metrics and image-quality statistics.

Top-k lists everywhere break score ties by ascending item id — the same
rule the models use — so the exposure metric and the attack's notion of
"recommended" agree.
"""

from __future__ import annotations

import numpy as np

from . import recmodels as rm
from .errors import MissingSplit, NoEligibleUsers


def exposure_rate_at_k(public, clients, targets, k, kind, features=None,
                       interacted=None):
    """Mean over targets of the exposed fraction of eligible users.

    A user is eligible for a target they never positively interacted with
    (``interacted`` maps user -> full positive item set; defaults to the
    clients' training positives).  Exposed means the target appears in the
    user's top-k among items outside their training positives.
    """
    per_target = {int(t): 0 for t in targets}
    eligible = {int(t): 0 for t in targets}
    for client in clients:
        known_pos = interacted.get(client.user_id, set()) if interacted \
            else set(client.pos_items)
        scores = rm.predict_scores(public, kind, client.user_emb,
                                   client.pos_items, features)
        top = set(int(i) for i in
                  rm.top_k_items(scores, k, exclude=set(client.pos_items)))
        for t in per_target:
            if t in known_pos:
                continue
            eligible[t] += 1
            if t in top:
                per_target[t] += 1
    rates = {}
    for t in per_target:
        if eligible[t] == 0:
            raise NoEligibleUsers(f"target {t} was interacted by every user")
        rates[t] = per_target[t] / eligible[t]
    return float(np.mean(list(rates.values()))), rates


def ndcg_at_k(public, clients, split, k, kind, features=None):
    """Leave-one-out NDCG: gain 1/log2(rank+1) for the held-out item.

    The candidate pool per user is their split candidate set; the ideal DCG
    for a single relevant item is 1, so per-user NDCG is the discounted
    gain itself.
    """
    if split is None or not split.held_out:
        raise MissingSplit("no evaluation split available")
    total = 0.0
    count = 0
    for client in clients:
        held = split.held_out.get(client.user_id)
        if held is None:
            continue
        candidates = split.candidates[client.user_id]
        scores = rm.predict_scores(public, kind, client.user_emb,
                                   client.pos_items, features)
        top = rm.top_k_items(scores, k, candidate_ids=candidates)
        gain = 0.0
        for rank, item in enumerate(top, start=1):
            if int(item) == held:
                gain = 1.0 / np.log2(rank + 1)
                break
        total += gain
        count += 1
    if count == 0:
        raise MissingSplit("split covers no evaluated user")
    return float(total / count)


# --- Laplacian blur statistics ---

LAPLACIAN = np.array([[0.0, 1.0, 0.0],
                      [1.0, -4.0, 1.0],
                      [0.0, 1.0, 0.0]])


def blur_variance(pixels):
    """Variance of the 3x3 Laplacian response over the grayscale image."""
    gray = np.asarray(pixels, dtype=np.float64).mean(axis=2)
    h, w = gray.shape
    resp = np.zeros((h - 2, w - 2))
    for i in range(3):
        for j in range(3):
            resp += LAPLACIAN[i, j] * gray[i:i + h - 2, j:j + w - 2]
    return float(resp.var())


def catalog_blur_stddev(images):
    return float(np.std([blur_variance(img.pixels) for img in images]))
