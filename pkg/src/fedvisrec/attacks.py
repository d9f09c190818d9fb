"""Poisoning attacks promoting cold target items.

Four attacker roles, all sharing the same surrogate objective (push each
target's predicted score above the scores of the attacker-side top-k):

* gradient poisoning (``psmu``): synthetic malicious users upload crafted
  public-parameter gradients, item rows masked to the targets;
* image poisoning (``psmuv``): the target items' image provider uploads an
  epsilon-bounded perturbed product image, re-derived from the pristine
  image every epoch;
* combined (``psmu_pp``): both at once, sharing one synthetic cohort;
* ``popularity``: a feature-matching baseline that pushes the target image
  toward the mean feature of popular items.

Attacks compute against immutable public snapshots and never touch benign
client state.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from . import recmodels as rm
from . import vision
from .dataio import quantize_to_asset
from .errors import NotTargetOwner
from .optim import adam_init, adam_step
from .seeding import rng_for

SYNTH_POS_COUNT = 30
NEG_RATIO = 4
FIT_STEPS = 20
PGD_STEPS = 10
ATTACK_K = 5


@dataclass
class TargetSet:
    item_ids: list

    @classmethod
    def pick(cls, catalog, count=1):
        return cls(item_ids=catalog.least_popular(count))


@dataclass
class SyntheticUser:
    member_id: int
    emb: np.ndarray
    pos_items: tuple
    records: list
    fit_losses: tuple = ()


@dataclass
class PerturbationState:
    """Latest perturbation per target, on the 0..255 pixel scale."""

    epsilon: float
    deltas: dict = field(default_factory=dict)   # target -> delta array
    losses: dict = field(default_factory=dict)   # target -> (original, adversarial)


def cohort_size(xi, num_benign_users):
    return max(1, round(xi * num_benign_users))


def fit_synthetic_user(public, kind, features, num_items, seed, epoch, member_id,
                       fit_steps=FIT_STEPS, avoid=()):
    """Fresh interaction sample and embedding fit against frozen params.

    The positive set is resampled every epoch, so a small cohort stands in
    for many distinct users over time.  ``avoid`` keeps the target items out
    of the sample: at catalog sizes of a few hundred a uniform draw would
    regularly swallow the target and void that member's attack round.
    """
    rng = rng_for(seed, "synth-pos", epoch, member_id)
    candidates = np.setdiff1d(np.arange(num_items), np.asarray(list(avoid), dtype=np.int64))
    count = min(SYNTH_POS_COUNT, len(candidates))
    pos = sorted(int(i) for i in rng.choice(candidates, count, replace=False))
    pool = np.setdiff1d(candidates, np.asarray(pos))
    negs = rng.choice(pool, size=min(NEG_RATIO * len(pos), len(pool)), replace=False)
    records = [(i, 1) for i in pos] + [(int(i), 0) for i in negs]

    emb = rng_for(seed, "synth-init", epoch, member_id).normal(0.0, 0.01, rm.EMBED_DIM)
    state = adam_init(emb)
    losses = []
    client = rm.ClientState(user_id=-1, user_emb=emb, records=records,
                            pos_items=tuple(pos))
    for _ in range(fit_steps):
        client.user_emb = emb
        graph, loss, leaves = rm.local_loss_graph(client, public, kind, features)
        losses.append(loss.item())
        emb, state = adam_step(emb, ad.backward(graph, loss)[leaves["user_emb"]], state)
    client.user_emb = emb
    graph, loss, _ = rm.local_loss_graph(client, public, kind, features)
    losses.append(loss.item())
    return SyntheticUser(member_id=member_id, emb=emb, pos_items=tuple(pos),
                         records=records, fit_losses=tuple(losses))


class SyntheticCohort:
    """The malicious user pool; refit (with fresh interactions) per epoch."""

    def __init__(self, count, seed, base_client_id, fit_steps=FIT_STEPS, avoid=()):
        self.count = count
        self.seed = seed
        self.base_client_id = base_client_id
        self.fit_steps = fit_steps
        self.avoid = tuple(avoid)

    def refit(self, epoch, public, kind, features, num_items):
        return [fit_synthetic_user(public, kind, features, num_items, self.seed,
                                   epoch, m, self.fit_steps, avoid=self.avoid)
                for m in range(self.count)]


def _rival_items(user, scores, targets, k):
    """The user's current top-k among non-target, non-interacted items."""
    exclude = set(int(t) for t in targets) | set(user.pos_items)
    return rm.top_k_items(scores, k, exclude=exclude)


def _pair_indices(ids, rivals, active_targets):
    pos_of = {int(item): idx for idx, item in enumerate(ids)}
    idx_r, idx_t = [], []
    for t in active_targets:
        for j in rivals:
            idx_r.append(pos_of[int(j)])
            idx_t.append(pos_of[int(t)])
    return idx_r, idx_t


def _pair_loss(score_vec, idx_r, idx_t):
    n = score_vec.data.shape[0]
    col = ad.reshape(score_vec, (n, 1))
    diff = ad.sub(ad.gather_rows(col, idx_r), ad.gather_rows(col, idx_t))
    return ad.sum_all(ad.sigmoid(diff))


def attack_loss(users, public, kind, features, targets, k=ATTACK_K):
    """Current value of the surrogate objective (no tape)."""
    total = 0.0
    for user in users:
        scores = rm.predict_scores(public, kind, user.emb, user.pos_items, features)
        rivals = _rival_items(user, scores, targets, k)
        active = [t for t in targets if t not in user.pos_items]
        for t in active:
            total += float(np.sum(_np_sigmoid(scores[rivals] - scores[t])))
    return total


def _np_sigmoid(x):
    z = np.exp(-np.abs(x))
    return np.where(np.asarray(x) >= 0, 1.0 / (1.0 + z), z / (1.0 + z))


class GradientPoisonAttack:
    """Synthetic users upload poisoned gradients of the surrogate loss.

    Each malicious client locally optimizes a copy of the public parameters
    against the surrogate loss (target item rows plus the shared weights)
    and uploads the accumulated update scaled back by the server's learning
    rate, so plain-sum aggregation lands on the attacker's optimum.  Item
    rows outside the target set never leave the client.
    """

    name = "psmu"

    def __init__(self, targets, cohort, k=ATTACK_K, opt_steps=20, opt_lr=0.001,
                 server_lr=0.001):
        self.targets = [int(t) for t in targets]
        self.cohort = cohort
        self.k = k
        self.opt_steps = opt_steps
        self.opt_lr = opt_lr
        self.server_lr = server_lr
        self.users = []

    def begin_round(self, epoch, server):
        self.users = self.cohort.refit(epoch, server.public, server.kind,
                                       server.features, server.public.num_items)

    def image_uploads(self, epoch, server):
        return []

    def gradient_uploads(self, epoch, server):
        uploads = []
        for user in self.users:
            uploads.append(self._poisoned_upload(user, epoch, server))
        return uploads

    def _loss_grads(self, user, public, kind, features):
        """Surrogate loss and its gradients at the given parameters."""
        scores = rm.predict_scores(public, kind, user.emb, user.pos_items, features)
        rivals = _rival_items(user, scores, self.targets, self.k)
        active = [t for t in self.targets if t not in user.pos_items]
        graph = ad.Graph()
        leaves = rm._param_leaves(graph, public, kind)
        ids = [int(j) for j in rivals] + [int(t) for t in active]
        score_vec = rm.score_items(ad.constant(user.emb), ids, leaves, kind,
                                   features, user.pos_items)
        idx_r, idx_t = _pair_indices(ids, rivals, active)
        grads = ad.backward(graph, _pair_loss(score_vec, idx_r, idx_t))
        return leaves, grads

    def _poisoned_upload(self, user, epoch, server):
        kind, features = server.kind, server.features
        received = server.public
        work = rm.PublicParams(item_emb=received.item_emb, visual_map=received.visual_map,
                               w1=received.w1, b1=received.b1, w2=received.w2,
                               b2=received.b2, head=received.head)
        dense_names = [n for n in work.dense()]
        states = {n: adam_init(work.dense()[n], lr=self.opt_lr) for n in dense_names}
        row_states = {t: adam_init(work.item_emb[t], lr=self.opt_lr)
                      for t in self.targets}

        for _ in range(self.opt_steps):
            leaves, grads = self._loss_grads(user, work, kind, features)
            item_emb = work.item_emb.copy()
            for t in self.targets:
                item_emb[t], row_states[t] = adam_step(
                    item_emb[t], grads[leaves["item_emb"]][t], row_states[t])
            updated = {"item_emb": item_emb}
            for n in dense_names:
                updated[n], states[n] = adam_step(work.dense()[n],
                                                  grads[leaves[n]], states[n])
            work = rm.PublicParams(item_emb=updated["item_emb"],
                                   visual_map=updated.get("visual_map"),
                                   w1=updated["w1"], b1=updated["b1"],
                                   w2=updated["w2"], b2=updated["b2"],
                                   head=updated["head"])

        item_rows = {t: (received.item_emb[t] - work.item_emb[t]) / self.server_lr
                     for t in self.targets}
        dense = {n: (received.dense()[n] - work.dense()[n]) / self.server_lr
                 for n in dense_names}
        return rm.GradientUpload(client_id=self.cohort.base_client_id + user.member_id,
                                 epoch=epoch, item_rows=item_rows, dense=dense)


def _mapped_feature_rows(ids, public, features, target_id, target_feat):
    """(n, 32) mapped visual rows; the target's row rides the tape."""
    visual_const = features @ public.visual_map.T
    rows = []
    e_const = ad.constant(public.visual_map)
    for i in ids:
        if int(i) == int(target_id):
            col = ad.reshape(target_feat, (features.shape[1], 1))
            rows.append(ad.transpose(ad.matmul(e_const, col)))
        else:
            rows.append(ad.constant(visual_const[int(i)][None, :]))
    return ad.concat(rows, axis=0)


def _image_scores(user, ids, public, kind, features, target_id, target_feat):
    """Scores for ``ids`` with only the target's image on the tape."""
    n = len(ids)
    u = ad.constant(user.emb)
    pos = np.asarray(sorted(user.pos_items), dtype=np.int64)

    if rm.is_graph(kind) and len(pos):
        inv = 1.0 / np.sqrt(len(pos))
        neigh = ad.add(ad.constant(public.item_emb[pos]),
                       _mapped_feature_rows(pos, public, features, target_id, target_feat))
        ones = ad.constant(np.ones((1, len(pos))))
        u_final = ad.add(u, ad.reshape(ad.scale(ad.matmul(ones, neigh), inv),
                                       (rm.EMBED_DIM,)))
        member = np.isin(np.asarray(ids), pos)
        v_rows = ad.constant(public.item_emb[np.asarray(ids)] +
                             np.where(member[:, None], inv * user.emb, 0.0))
    else:
        u_final = u
        v_rows = ad.constant(public.item_emb[np.asarray(ids)])

    x = ad.concat([ad.broadcast_rows(u_final, n), v_rows,
                   _mapped_feature_rows(ids, public, features, target_id, target_feat)],
                  axis=1)
    params = {name: ad.constant(arr) for name, arr in public.dense().items()}
    return rm.ffn_scores(x, params)


def _pgd(x0, epsilon_pixels, steps, loss_and_grad):
    """Sign-step projected descent in normalized [-1, 1] space.

    ``loss_and_grad`` maps an image to (loss value, gradient).  Keeps the
    best iterate, with the unperturbed image as the fallback, so the
    returned perturbation never increases the loss.
    """
    eps = epsilon_pixels / 127.5
    step = (epsilon_pixels / 4.0) / 127.5
    best_loss, _ = loss_and_grad(x0)
    best = np.zeros_like(x0)
    delta = np.zeros_like(x0)
    for _ in range(steps):
        loss, grad = loss_and_grad(np.clip(x0 + delta, -1.0, 1.0))
        delta = delta - step * np.sign(grad)
        delta = np.clip(delta, -eps, eps)
        delta = np.clip(x0 + delta, -1.0, 1.0) - x0
        loss = loss_and_grad(np.clip(x0 + delta, -1.0, 1.0))[0]
        if loss < best_loss:
            best_loss, best = loss, delta.copy()
    return best, best_loss


class ImagePoisonAttack:
    """The target items' image provider uploads bounded perturbations."""

    name = "psmuv"

    def __init__(self, targets, cohort, pristine_images, extractor, epsilon,
                 pgd_steps=PGD_STEPS, k=ATTACK_K):
        self.targets = [int(t) for t in targets]
        for t in self.targets:
            if t not in pristine_images:
                raise NotTargetOwner(f"provider does not own item {t}")
        self.cohort = cohort
        self.pristine = {t: pristine_images[t] for t in self.targets}
        self.extractor = extractor
        self.state = PerturbationState(epsilon=float(epsilon))
        self.pgd_steps = pgd_steps
        self.k = k
        self.users = []
        self.shared_users = False

    def begin_round(self, epoch, server):
        if not self.shared_users:
            self.users = self.cohort.refit(epoch, server.public, server.kind,
                                           server.features, server.public.num_items)

    def gradient_uploads(self, epoch, server):
        return []

    def image_uploads(self, epoch, server):
        uploads = []
        for target in self.targets:
            uploads.append((target, self._perturbed_asset(target, epoch, server)))
        return uploads

    def _perturbed_asset(self, target, epoch, server):
        public, kind, features = server.public, server.kind, server.features
        x0 = vision.image_to_chw(self.pristine[target].normalized)

        # Rival lists are fixed per epoch (they do not depend on the image).
        per_user = []
        for user in self.users:
            scores = rm.predict_scores(public, kind, user.emb, user.pos_items, features)
            if target in user.pos_items:
                continue
            per_user.append((user, _rival_items(user, scores, self.targets, self.k)))

        def loss_and_grad(x):
            graph = ad.Graph()
            leaf = graph.leaf(x)
            feat = vision.extract(self.extractor, leaf)
            terms = []
            for user, rivals in per_user:
                ids = [int(j) for j in rivals] + [target]
                vec = _image_scores(user, ids, public, kind, features, target, feat)
                idx_r = list(range(len(rivals)))
                idx_t = [len(rivals)] * len(rivals)
                terms.append(_pair_loss(vec, idx_r, idx_t))
            if not terms:
                return 0.0, np.zeros_like(x)
            loss = terms[0]
            for extra in terms[1:]:
                loss = ad.add(loss, extra)
            return loss.item(), ad.backward(graph, loss)[leaf]

        delta, adv_loss = _pgd(x0, self.state.epsilon, self.pgd_steps, loss_and_grad)
        asset = quantize_to_asset(vision.chw_to_hwc(x0 + delta), target,
                                  f"provider-{target}", epoch, adversarial=True)
        self.state.deltas[target] = (asset.pixels - self.pristine[target].pixels).copy()
        self.state.losses[target] = (loss_and_grad(x0)[0], adv_loss)
        return asset


class CombinedAttack:
    """Model and image poisoning sharing one synthetic cohort per epoch."""

    name = "psmu_pp"

    def __init__(self, gradient_leg, image_leg):
        self.gradient_leg = gradient_leg
        self.image_leg = image_leg
        self.image_leg.shared_users = True

    @property
    def targets(self):
        return self.gradient_leg.targets

    def begin_round(self, epoch, server):
        self.gradient_leg.begin_round(epoch, server)
        self.image_leg.users = self.gradient_leg.users

    def image_uploads(self, epoch, server):
        return self.image_leg.image_uploads(epoch, server)

    def gradient_uploads(self, epoch, server):
        return self.gradient_leg.gradient_uploads(epoch, server)


class PopularityAttack:
    """Push target images toward the mean feature of the most popular items."""

    name = "popularity"

    def __init__(self, targets, pristine_images, extractor, epsilon, popularity,
                 top_p=10, pgd_steps=PGD_STEPS):
        self.targets = [int(t) for t in targets]
        for t in self.targets:
            if t not in pristine_images:
                raise NotTargetOwner(f"provider does not own item {t}")
        self.pristine = {t: pristine_images[t] for t in self.targets}
        self.extractor = extractor
        self.state = PerturbationState(epsilon=float(epsilon))
        self.popularity = np.asarray(popularity)
        self.top_p = top_p
        self.pgd_steps = pgd_steps

    def begin_round(self, epoch, server):
        pass

    def gradient_uploads(self, epoch, server):
        return []

    def image_uploads(self, epoch, server):
        order = np.lexsort((np.arange(len(self.popularity)), -self.popularity))
        popular = order[:self.top_p]
        mean_feat = ad.constant(server.features[popular].mean(axis=0))
        uploads = []
        for target in self.targets:
            x0 = vision.image_to_chw(self.pristine[target].normalized)

            def loss_and_grad(x):
                graph = ad.Graph()
                leaf = graph.leaf(x)
                feat = vision.extract(self.extractor, leaf)
                loss = ad.sum_all(ad.square(ad.sub(feat, mean_feat)))
                return loss.item(), ad.backward(graph, loss)[leaf]

            delta, _ = _pgd(x0, self.state.epsilon, self.pgd_steps, loss_and_grad)
            asset = quantize_to_asset(vision.chw_to_hwc(x0 + delta), target,
                                      f"provider-{target}", epoch, adversarial=True)
            self.state.deltas[target] = (asset.pixels - self.pristine[target].pixels).copy()
            uploads.append((target, asset))
        return uploads
