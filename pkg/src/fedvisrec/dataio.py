"""Interaction and image ingestion, synthetic worlds, and evaluation splits.

File formats: interactions are UTF-8 ``user<TAB>item<TAB>rating`` lines;
images are binary PPM (P6, maxval 255).  Synthetic worlds emit the exact
same shapes so every downstream path is format-uniform.
"""

from __future__ import annotations

import io
from dataclasses import dataclass, field

import numpy as np

from .errors import (DimensionMismatch, DuplicateInteraction, EmptyDataset,
                     InfeasibleDensity, InsufficientNegatives, MalformedLine,
                     TooFewPositives, UnsupportedFormat)
from .seeding import rng_for


@dataclass(frozen=True)
class InteractionRecord:
    user_id: int
    item_id: int
    rating: int  # binary


@dataclass
class Catalog:
    num_users: int
    num_items: int
    popularity: np.ndarray  # per-item count of positive records

    def least_popular(self, count=1):
        """Item ids with minimum popularity; ties broken by ascending id."""
        order = np.lexsort((np.arange(self.num_items), self.popularity))
        return [int(i) for i in order[:count]]


@dataclass
class ImageAsset:
    """An item's visual description on the 0..255 integer grid.

    ``ground_truth_adversarial`` is test-only metadata and never read by
    the recommender or the defense.
    """

    item_id: int
    pixels: np.ndarray  # (H, W, 3) uint8-valued integers
    provider_id: str = "catalog"
    uploaded_epoch: int = 0
    ground_truth_adversarial: bool = False

    @property
    def normalized(self):
        """Float view in [-1, 1]: pixel / 127.5 - 1, exactly."""
        return self.pixels.astype(np.float64) / 127.5 - 1.0


def quantize_to_asset(normalized, item_id, provider_id, epoch, adversarial=False):
    """Clip a [-1, 1] float image back onto the 0..255 grid."""
    pixels = np.clip(np.rint((np.clip(normalized, -1.0, 1.0) + 1.0) * 127.5), 0, 255)
    return ImageAsset(item_id=item_id, pixels=pixels.astype(np.int64),
                      provider_id=provider_id, uploaded_epoch=epoch,
                      ground_truth_adversarial=adversarial)


def build_catalog(num_users, num_items, records):
    popularity = np.zeros(num_items, dtype=np.int64)
    for rec in records:
        if rec.rating == 1:
            popularity[rec.item_id] += 1
    return Catalog(num_users=num_users, num_items=num_items, popularity=popularity)


def load_interactions(path):
    """Parse ``user\\titem\\trating`` lines; any positive raw rating -> 1.

    Raw ids are remapped densely in order of first appearance.
    """
    users, items = {}, {}
    seen = set()
    records = []
    with open(path, "r", encoding="utf-8") as fh:
        for line_no, line in enumerate(fh, start=1):
            line = line.rstrip("\n")
            if not line:
                continue
            parts = line.split("\t")
            if len(parts) != 3:
                raise MalformedLine(line_no, "expected user<TAB>item<TAB>rating")
            try:
                raw_u, raw_i, raw_r = parts[0], parts[1], float(parts[2])
            except ValueError:
                raise MalformedLine(line_no, "rating is not a number")
            u = users.setdefault(raw_u, len(users))
            i = items.setdefault(raw_i, len(items))
            if (u, i) in seen:
                raise DuplicateInteraction(f"duplicate pair at line {line_no}")
            seen.add((u, i))
            records.append(InteractionRecord(u, i, 1 if raw_r > 0 else 0))
    if not records:
        raise EmptyDataset(str(path))
    catalog = build_catalog(len(users), len(items), records)
    return catalog, records


def sample_negatives(records, ratio, seed, exclude=None, num_items=None):
    """Augment positives with ``ratio`` never-interacted items each, rating 0.

    Negatives are distinct per user (the at-most-one-record-per-pair
    invariant), drawn uniformly from the user's non-interacted pool.
    ``exclude`` maps user -> extra item ids that must never be sampled
    (e.g. held-out evaluation positives).
    """
    if ratio < 1:
        raise ValueError("ratio must be >= 1")
    if num_items is None:
        num_items = 1 + max(r.item_id for r in records)
    by_user = {}
    for rec in records:
        if rec.rating == 1:
            by_user.setdefault(rec.user_id, []).append(rec.item_id)

    out = []
    for user in sorted(by_user):
        positives = sorted(by_user[user])
        banned = set(positives)
        if exclude and user in exclude:
            banned.update(exclude[user])
        pool = np.array([i for i in range(num_items) if i not in banned], dtype=np.int64)
        need = ratio * len(positives)
        if len(pool) < need:
            raise InsufficientNegatives(
                f"user {user}: needs {need} negatives, only {len(pool)} items never interacted")
        rng = rng_for(seed, "negatives", user)
        chosen = rng.choice(pool, size=need, replace=False)
        out.extend(InteractionRecord(user, i, 1) for i in positives)
        out.extend(InteractionRecord(user, int(i), 0) for i in chosen)
    return out


# --- PPM images ---

def save_ppm(asset, path):
    with open(path, "wb") as fh:
        fh.write(ppm_bytes(asset))


def ppm_bytes(asset):
    h, w, c = asset.pixels.shape
    if c != 3:
        raise DimensionMismatch("PPM requires 3 channels")
    header = f"P6\n{w} {h}\n255\n".encode("ascii")
    return header + asset.pixels.astype(np.uint8).tobytes()


def load_ppm(path, item_id=0, expected_size=None):
    with open(path, "rb") as fh:
        return parse_ppm(fh.read(), item_id=item_id, expected_size=expected_size)


def parse_ppm(data, item_id=0, expected_size=None):
    """Binary P6 with maxval 255 only."""
    stream = io.BytesIO(data)

    def token():
        # Skip whitespace and '#' comments between header fields.
        out = b""
        while True:
            ch = stream.read(1)
            if not ch:
                raise UnsupportedFormat("truncated PPM header")
            if ch == b"#":
                while ch not in (b"\n", b""):
                    ch = stream.read(1)
                continue
            if ch.isspace():
                if out:
                    return out
                continue
            out += ch

    magic = token()
    if magic != b"P6":
        raise UnsupportedFormat(f"not a binary PPM: magic {magic!r}")
    width, height, maxval = int(token()), int(token()), int(token())
    if maxval != 255:
        raise UnsupportedFormat(f"maxval {maxval} unsupported (only 255)")
    raw = stream.read(width * height * 3)
    if len(raw) != width * height * 3:
        raise UnsupportedFormat("truncated PPM payload")
    pixels = np.frombuffer(raw, dtype=np.uint8).reshape(height, width, 3).astype(np.int64)
    if expected_size is not None and (height, width) != tuple(expected_size):
        raise DimensionMismatch(f"image is {height}x{width}, expected {expected_size}")
    return ImageAsset(item_id=item_id, pixels=pixels)


# --- synthetic worlds ---

@dataclass
class World:
    catalog: Catalog
    records: list          # positive interactions only
    images: dict           # item_id -> ImageAsset
    image_size: int = 16


def _smooth_field(rng, size, sharpness):
    """A random mixture of 2-D cosines; ``sharpness`` scales frequencies."""
    ys, xs = np.meshgrid(np.arange(size), np.arange(size), indexing="ij")
    img = np.zeros((size, size, 3))
    for c in range(3):
        acc = np.zeros((size, size))
        for _ in range(4):
            fy, fx = rng.uniform(0.2, 1.0 + 3.0 * sharpness, size=2)
            phase = rng.uniform(0, 2 * np.pi)
            amp = rng.uniform(0.3, 1.0)
            acc += amp * np.cos(2 * np.pi * (fy * ys + fx * xs) / size + phase)
        img[:, :, c] = acc
    lo, hi = img.min(), img.max()
    scaled = (img - lo) / (hi - lo) if hi > lo else np.full_like(img, 0.5)
    return np.rint(scaled * 255).astype(np.int64)


def synth_item_image(seed, item_id, size=16):
    rng = rng_for(seed, "image", item_id)
    sharpness = rng.uniform(0.0, 1.0) ** 2  # heterogeneous frequency content
    return ImageAsset(item_id=item_id, pixels=_smooth_field(rng, size, sharpness))


def synth_world(seed, num_users, num_items, density, popularity_exponent=1.2,
                image_size=16, min_positives=5):
    """Deterministic desk-scale world with power-law item popularity.

    ``density`` sets the expected positives per user (density * num_items),
    floored at ``min_positives``.  Item images are seeded smooth color
    fields with heterogeneous sharpness.
    """
    if not 0.0 < density <= 1.0:
        raise InfeasibleDensity(f"density {density} outside (0, 1]")
    if num_items < min_positives:
        raise InfeasibleDensity(
            f"{num_items} items cannot give each user {min_positives} positives")
    avg_positives = density * num_items

    rng = rng_for(seed, "world")
    # Popularity weights over a random item permutation, so item id carries
    # no popularity information.
    ranks = rng.permutation(num_items) + 1
    weights = ranks.astype(np.float64) ** (-popularity_exponent)
    weights /= weights.sum()

    records = []
    for user in range(num_users):
        n = int(np.clip(round(rng.normal(avg_positives, 0.25 * avg_positives)),
                        min_positives, num_items))
        chosen = rng.choice(num_items, size=n, replace=False, p=weights)
        records.extend(InteractionRecord(user, int(i), 1) for i in sorted(chosen))

    catalog = build_catalog(num_users, num_items, records)
    images = {i: synth_item_image(seed, i, image_size) for i in range(num_items)}
    return World(catalog=catalog, records=records, images=images, image_size=image_size)


def synth_clean_images(seed, count, size=16, tag="calibration"):
    """Extra clean images disjoint from any catalog (same generator family)."""
    out = []
    for idx in range(count):
        rng = rng_for(seed, tag, idx)
        sharpness = rng.uniform(0.0, 1.0) ** 2
        out.append(ImageAsset(item_id=-1 - idx, pixels=_smooth_field(rng, size, sharpness)))
    return out


# --- evaluation split ---

@dataclass
class EvalSplit:
    held_out: dict   # user_id -> held-out positive item
    candidates: dict = field(default_factory=dict)  # user_id -> sorted non-training items


def make_eval_split(records, num_items, seed):
    """Leave-one-out: one random positive held out per user.

    Candidate set per user is every item outside their training positives
    (the held-out item included).
    """
    by_user = {}
    for rec in records:
        if rec.rating == 1:
            by_user.setdefault(rec.user_id, []).append(rec.item_id)
    held_out, candidates = {}, {}
    for user in sorted(by_user):
        positives = sorted(by_user[user])
        if len(positives) < 2:
            raise TooFewPositives(user)
        rng = rng_for(seed, "split", user)
        held = int(positives[rng.integers(len(positives))])
        held_out[user] = held
        training = set(positives) - {held}
        candidates[user] = np.array(
            [i for i in range(num_items) if i not in training], dtype=np.int64)
    return EvalSplit(held_out=held_out, candidates=candidates)


def training_records(records, split, num_items, ratio, seed):
    """Positives minus held-out, plus 1:ratio sampled negatives."""
    train_pos = [r for r in records
                 if r.rating == 1 and split.held_out.get(r.user_id) != r.item_id]
    exclude = {u: {h} for u, h in split.held_out.items()}
    return sample_negatives(train_pos, ratio, seed, exclude=exclude, num_items=num_items)
