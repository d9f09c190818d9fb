"""Federated round engine: registry updates, sampling, training, aggregation.

Each round: pending image uploads are applied (the defense, when enabled,
purifies and screens them on the way in), a client fraction is sampled,
clients train locally against an immutable snapshot and upload public
gradients, malicious uploads join in when an attack is active, everything
is aggregated in ascending client id, and metrics are evaluated.

The server never holds private embeddings or raw local datasets; clients
live outside ``ServerState`` and hand over gradients only.
"""

from __future__ import annotations

import io
import os
import struct
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from . import metrics as mt
from . import optim
from . import recmodels as rm
from . import vision
from .errors import DimensionMismatch, DivergedRun, StaleUpload, UnknownItem
from .seeding import rng_for

CHECKPOINT_MAGIC = b"FRG1"


@dataclass
class RoundReport:
    epoch: int
    participants: list
    er: float
    er_per_target: dict
    ndcg: float
    wall_time: float


@dataclass
class ImageAuditRow:
    """One registry upload: deviation from the pristine image, plus the
    uploaded asset itself (kept for the constraint audit and PPM dumps)."""

    epoch: int
    item_id: int
    provider_id: str
    linf: float
    asset: object = None


@dataclass
class ServerState:
    public: rm.PublicParams
    kind: str
    lr: float
    optimizer: str = "hybrid"                          # hybrid | adam | sgd
    epoch: int = 0
    registry: dict = field(default_factory=dict)       # item_id -> ImageAsset
    features: np.ndarray | None = None                 # cached extractor outputs
    extractor: object = None
    defense: object = None                             # .screen(asset, epoch) or None
    adam_states: dict = field(default_factory=dict)
    pristine: dict = field(default_factory=dict)       # original uploads, audit only
    detection_log: list = field(default_factory=list)  # (epoch, item, sim, rho, verdict)
    image_audit: list = field(default_factory=list)    # (epoch, item, provider, linf)


def make_server(public, kind, lr, images=None, extractor=None, defense=None,
                optimizer="hybrid"):
    """Initialize the server and register the initial item images."""
    server = ServerState(public=public, kind=kind, lr=lr, optimizer=optimizer,
                         extractor=extractor, defense=defense)
    if rm.is_visual(kind):
        if extractor is None or images is None:
            raise DimensionMismatch("visual models need an extractor and images")
        server.features = np.zeros((public.num_items, extractor.output_dim))
        batch = sorted(images.items())
        server.pristine = {i: asset for i, asset in batch}
        if defense is not None and hasattr(defense, "screen_batch"):
            screened = defense.screen_batch([a for _, a in batch], epoch=0)
            for (item_id, _), (asset, row) in zip(batch, screened):
                server.registry[item_id] = asset
                if row is not None:
                    server.detection_log.append(row)
                server.features[item_id] = vision.extract_array(
                    extractor, vision.image_to_chw(asset.normalized))
        else:
            for item_id, asset in batch:
                register_image(server, item_id, asset)
    return server


def register_image(server, item_id, asset):
    """Apply one image upload: audit, (optionally) purify+detect, cache."""
    if not 0 <= item_id < server.public.num_items:
        raise UnknownItem(f"item {item_id}")
    expected = server.extractor.image_size
    if asset.pixels.shape != (expected, expected, 3):
        raise DimensionMismatch(
            f"image for item {item_id} is {asset.pixels.shape}, expected {expected}px")

    original = server.pristine.get(item_id)
    if original is None:
        server.pristine[item_id] = asset
        linf = 0.0
    else:
        linf = float(np.max(np.abs(asset.pixels - original.pixels)))
    server.image_audit.append(ImageAuditRow(epoch=server.epoch, item_id=item_id,
                                            provider_id=asset.provider_id,
                                            linf=linf, asset=asset))

    if server.defense is not None:
        asset, row = server.defense.screen(asset, epoch=server.epoch)
        if row is not None:
            server.detection_log.append(row)
    server.registry[item_id] = asset
    server.features[item_id] = vision.extract_array(
        server.extractor, vision.image_to_chw(asset.normalized))


def sample_clients(num_clients, fraction, seed, epoch):
    """Uniform sample without replacement, sorted ascending.

    Count convention: max(1, floor(fraction * num_clients)).
    """
    count = max(1, int(np.floor(fraction * num_clients)))
    count = min(count, num_clients)
    if count == num_clients:
        return list(range(num_clients))
    rng = rng_for(seed, "client-sample", epoch)
    return sorted(int(i) for i in rng.choice(num_clients, size=count, replace=False))


def sum_uploads(public, uploads):
    """Validated gradient totals, summed in ascending client id."""
    item_grad = np.zeros_like(public.item_emb)
    dense_grad = {k: np.zeros_like(v) for k, v in public.dense().items()}
    for up in sorted(uploads, key=lambda u: u.client_id):
        for row, grad in sorted(up.item_rows.items()):
            item_grad[row] += grad
        for name, grad in up.dense.items():
            dense_grad[name] += grad
    return item_grad, dense_grad


def _check_uploads(server, uploads):
    for up in uploads:
        if up.epoch != server.epoch:
            raise StaleUpload(f"upload from epoch {up.epoch} during {server.epoch}")
        up.validate(server.public.num_items)


def aggregate(server, uploads):
    """Plain-SGD aggregation: P <- P - lr * sum(uploads)."""
    _check_uploads(server, uploads)
    public = server.public
    item_grad, dense_grad = sum_uploads(public, uploads)
    dense = {k: public.dense()[k] - server.lr * g for k, g in dense_grad.items()}
    return rm.PublicParams(item_emb=public.item_emb - server.lr * item_grad,
                           visual_map=dense.get("visual_map"),
                           w1=dense["w1"], b1=dense["b1"],
                           w2=dense["w2"], b2=dense["b2"], head=dense["head"])


def apply_uploads(server, uploads):
    """One server optimization step over the round's summed gradients.

    ``sgd``: the plain aggregation rule for every parameter.
    ``adam``: a bias-corrected Adam step for every parameter.
    ``hybrid`` (default): item-embedding rows follow the plain summed-SGD
    rule (their per-round gradient mass is sparse and small, and row
    magnitude is exactly what poisoning exploits), while the shared dense
    parameters, whose full-participation gradient sums are far too large
    for a fixed step at desk scale, take Adam steps.
    """
    if server.optimizer == "sgd":
        return aggregate(server, uploads)
    _check_uploads(server, uploads)
    public = server.public
    item_grad, dense_grad = sum_uploads(public, uploads)
    if not server.adam_states:
        if server.optimizer == "adam":
            server.adam_states["item_emb"] = optim.adam_init(public.item_emb,
                                                             lr=server.lr)
        for name, arr in public.dense().items():
            server.adam_states[name] = optim.adam_init(arr, lr=server.lr)
    if server.optimizer == "adam":
        item_emb, server.adam_states["item_emb"] = optim.adam_step(
            public.item_emb, item_grad, server.adam_states["item_emb"])
    else:
        item_emb = public.item_emb - server.lr * item_grad
    dense = {}
    for name, arr in public.dense().items():
        dense[name], server.adam_states[name] = optim.adam_step(
            arr, dense_grad[name], server.adam_states[name])
    return rm.PublicParams(item_emb=item_emb,
                           visual_map=dense.get("visual_map"),
                           w1=dense["w1"], b1=dense["b1"],
                           w2=dense["w2"], b2=dense["b2"], head=dense["head"])


def _train_clients(clients, ids, server, local_epochs):
    snapshot = server.public
    features = server.features

    def work(i):
        return rm.local_train(clients[i], snapshot, server.kind, server.lr,
                              server.epoch, features=features,
                              local_epochs=local_epochs)

    threads = int(os.environ.get("FRG_THREADS", "1"))
    if threads > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            results = list(pool.map(work, ids))
    else:
        results = [work(i) for i in ids]
    uploads = []
    for i, (new_u, upload) in zip(ids, results):
        clients[i].user_emb = new_u
        uploads.append(upload)
    return uploads


def run_experiment(server, clients, split, targets, epochs, seed,
                   fraction=1.0, local_epochs=1, attack=None,
                   attack_start_epoch=8, er_k=5, ndcg_k=20, interacted=None):
    """The full training loop; returns one ``RoundReport`` per epoch.

    The attack (when given) becomes active strictly after
    ``attack_start_epoch`` completed benign epochs: with T == start_epoch no
    attack round executes.
    """
    reports = []
    for epoch in range(1, epochs + 1):
        t0 = time.perf_counter()
        server.epoch = epoch
        attacking = attack is not None and epoch > attack_start_epoch
        if attacking:
            attack.begin_round(epoch, server)
            for item_id, asset in attack.image_uploads(epoch, server):
                register_image(server, item_id, asset)

        ids = sample_clients(len(clients), fraction, seed, epoch)
        uploads = _train_clients(clients, ids, server, local_epochs)
        if attacking:
            uploads.extend(attack.gradient_uploads(epoch, server))

        server.public = apply_uploads(server, uploads)
        if not all(np.all(np.isfinite(a)) for a in server.public.arrays()):
            raise DivergedRun(epoch)

        er, per_target = mt.exposure_rate_at_k(
            server.public, clients, targets, er_k, server.kind,
            features=server.features, interacted=interacted)
        ndcg = mt.ndcg_at_k(server.public, clients, split, ndcg_k,
                            server.kind, features=server.features)
        reports.append(RoundReport(epoch=epoch, participants=ids, er=er,
                                   er_per_target=per_target, ndcg=ndcg,
                                   wall_time=time.perf_counter() - t0))
    return reports


# --- emission ---

def rounds_csv(reports, attack_name, defense_on, seed):
    """Per-round CSV; per-target columns appear only with multiple targets."""
    targets = sorted(reports[0].er_per_target) if reports else []
    header = "epoch,er_at_5,ndcg_at_20,attack,defense,seed"
    if len(targets) > 1:
        header += "," + ",".join(f"er_target_{t}" for t in targets)
    lines = [header]
    flag = "on" if defense_on else "off"
    for r in reports:
        row = f"{r.epoch},{float(r.er)!r},{float(r.ndcg)!r},{attack_name},{flag},{seed}"
        if len(targets) > 1:
            row += "," + ",".join(repr(float(r.er_per_target[t])) for t in targets)
        lines.append(row)
    return "\n".join(lines) + "\n"


def detection_csv(detection_log):
    lines = ["item_id,similarity,rho,verdict,epoch"]
    for epoch, item_id, sim, rho, verdict in detection_log:
        lines.append(f"{item_id},{float(sim)!r},{float(rho)!r},{verdict},{epoch}")
    return "\n".join(lines) + "\n"


def save_checkpoint(public):
    """Flat binary dump: magic, dims, then row-major float64 arrays."""
    buf = io.BytesIO()
    buf.write(CHECKPOINT_MAGIC)
    feature_dim = 0 if public.visual_map is None else public.visual_map.shape[1]
    buf.write(struct.pack("<4q", public.num_items, rm.EMBED_DIM, feature_dim,
                          public.w1.shape[0]))
    buf.write(public.item_emb.tobytes())
    if public.visual_map is not None:
        buf.write(public.visual_map.tobytes())
    for name in ("w1", "b1", "w2", "b2", "head"):
        buf.write(getattr(public, name).tobytes())
    return buf.getvalue()


def load_checkpoint(data):
    buf = io.BytesIO(data)
    if buf.read(4) != CHECKPOINT_MAGIC:
        raise DimensionMismatch("not a public-parameter checkpoint")
    num_items, embed, feature_dim, d_in = struct.unpack("<4q", buf.read(32))
    if embed != rm.EMBED_DIM:
        raise DimensionMismatch(f"checkpoint embedding dim {embed}")

    def read(shape):
        n = int(np.prod(shape))
        return np.frombuffer(buf.read(8 * n), dtype=np.float64).reshape(shape).copy()

    item_emb = read((num_items, embed))
    visual_map = read((embed, feature_dim)) if feature_dim else None
    return rm.PublicParams(item_emb=item_emb, visual_map=visual_map,
                           w1=read((d_in, rm.HIDDEN_DIM)), b1=read(rm.HIDDEN_DIM),
                           w2=read((rm.HIDDEN_DIM, rm.OUT_DIM)), b2=read(rm.OUT_DIM),
                           head=read(rm.OUT_DIM))
