"""Experiment assembly and execution on top of the round engine.

Builds the world, clients, attack, and defense from an
``ExperimentConfig``, runs the federated loop, and emits the result
artifacts (per-round CSV, detection log, checkpoint, plot script, and the
adversarial-image audit).
"""

from __future__ import annotations

import os
from dataclasses import dataclass, field

from . import attacks as atk
from . import dataio, defense, fedsim
from . import recmodels as rm
from . import vision
from .config import ExperimentConfig
from .errors import ConfigParseError
from .seeding import child_seed


@dataclass
class RunResult:
    config: ExperimentConfig
    reports: list
    targets: list
    rounds_csv: str
    detection_csv: str | None
    checkpoint: bytes
    plots_script: str
    image_audit: list
    rho: float | None = None
    denoiser_losses: list = field(default_factory=list)

    @property
    def peak_er(self):
        return max(r.er for r in self.reports) if self.reports else 0.0

    @property
    def final_ndcg(self):
        return self.reports[-1].ndcg if self.reports else 0.0


@dataclass
class PreparedWorld:
    """World plus derived training structures, reusable across runs."""

    world: dataio.World
    split: dataio.EvalSplit
    train_records: list
    interacted: dict


def build_world(cfg):
    if cfg.source == "synth":
        world = dataio.synth_world(cfg.seed, cfg.num_users, cfg.num_items,
                                   cfg.density, cfg.popularity_exponent,
                                   cfg.image_size)
    else:
        catalog, records = dataio.load_interactions(cfg.interactions_path)
        images = {}
        if cfg.visual:
            for item in range(catalog.num_items):
                path = os.path.join(cfg.images_dir, f"{item}.ppm")
                if os.path.exists(path):
                    images[item] = dataio.load_ppm(
                        path, item_id=item,
                        expected_size=(cfg.image_size, cfg.image_size))
                else:
                    # full image coverage is required in-scope: synthesize
                    # a deterministic stand-in for missing files
                    images[item] = dataio.synth_item_image(cfg.seed, item,
                                                           cfg.image_size)
        world = dataio.World(catalog=catalog, records=records, images=images,
                             image_size=cfg.image_size)
    return world


def prepare_world(cfg, world=None):
    world = world or build_world(cfg)
    split = dataio.make_eval_split(world.records, world.catalog.num_items, cfg.seed)
    train = dataio.training_records(world.records, split,
                                    world.catalog.num_items,
                                    cfg.negative_ratio, cfg.seed)
    interacted = {}
    for rec in world.records:
        if rec.rating == 1:
            interacted.setdefault(rec.user_id, set()).add(rec.item_id)
    return PreparedWorld(world=world, split=split, train_records=train,
                         interacted=interacted)


def build_clients(cfg, prepared):
    by_user = {}
    for rec in prepared.train_records:
        by_user.setdefault(rec.user_id, []).append(rec)
    clients = []
    for user in range(prepared.world.catalog.num_users):
        clients.append(rm.ClientState.build(
            user, rm.init_user_embedding(cfg.seed, user), by_user.get(user, [])))
    return clients


def build_defense(cfg, prepared, extractor, denoiser=None):
    """Denoiser training plus rho calibration, all seed-derived."""
    schedule = defense.build_schedule(steps=cfg.diffusion_steps)
    losses = []
    if denoiser is None:
        images = [vision.image_to_chw(prepared.world.images[i].normalized)
                  for i in sorted(prepared.world.images)]
        denoiser, losses = defense.train_denoiser(
            images, schedule, steps=cfg.denoiser_train_steps,
            seed=child_seed(cfg.seed, "denoiser"))
    rho = cfg.rho
    if rho is None:
        clean = dataio.synth_clean_images(child_seed(cfg.seed, "calibration"),
                                          cfg.calibration_images, cfg.image_size)
        calib = defense.calibrate_rho(denoiser, schedule, clean, extractor,
                                      cfg.guidance,
                                      seed=child_seed(cfg.seed, "calibration-rho"))
        rho = calib.rho
    runtime = defense.DefenseRuntime(denoiser, schedule, extractor, rho,
                                     cfg.guidance,
                                     seed=child_seed(cfg.seed, "defense"))
    return runtime, rho, losses


def build_attack(cfg, prepared, targets, extractor):
    if cfg.attack == "none":
        return None
    num_users = prepared.world.catalog.num_users
    cohort = atk.SyntheticCohort(count=atk.cohort_size(cfg.xi, num_users),
                                 seed=child_seed(cfg.seed, "attack"),
                                 base_client_id=num_users,
                                 fit_steps=cfg.fit_steps, avoid=targets)
    if cfg.attack == "psmu":
        return atk.GradientPoisonAttack(targets, cohort, k=cfg.exposure_k,
                                        opt_steps=cfg.attack_opt_steps,
                                        server_lr=cfg.learning_rate)
    if cfg.attack == "psmuv":
        return atk.ImagePoisonAttack(targets, cohort, prepared.world.images,
                                     extractor, cfg.epsilon,
                                     pgd_steps=cfg.pgd_steps, k=cfg.exposure_k)
    if cfg.attack == "psmu_pp":
        gradient_leg = atk.GradientPoisonAttack(targets, cohort, k=cfg.exposure_k,
                                                opt_steps=cfg.attack_opt_steps,
                                                server_lr=cfg.learning_rate)
        image_leg = atk.ImagePoisonAttack(targets, cohort, prepared.world.images,
                                          extractor, cfg.epsilon,
                                          pgd_steps=cfg.pgd_steps, k=cfg.exposure_k)
        return atk.CombinedAttack(gradient_leg, image_leg)
    if cfg.attack == "popularity":
        return atk.PopularityAttack(targets, prepared.world.images, extractor,
                                    cfg.epsilon,
                                    prepared.world.catalog.popularity,
                                    top_p=cfg.top_p, pgd_steps=cfg.pgd_steps)
    raise ConfigParseError(f"unknown attack kind {cfg.attack!r}")


def run(cfg, prepared=None, denoiser=None):
    """One full experiment.  Everything derives from cfg.seed."""
    cfg.validate()
    prepared = prepared or prepare_world(cfg)
    clients = build_clients(cfg, prepared)
    targets = prepared.world.catalog.least_popular(cfg.num_targets)

    extractor = None
    if cfg.visual:
        extractor = vision.Extractor(cfg.extractor_seed, cfg.feature_dim,
                                     cfg.image_size)

    runtime, rho, den_losses = None, None, []
    if cfg.defense:
        if not cfg.visual:
            raise ConfigParseError("the defense applies to visual models only")
        runtime, rho, den_losses = build_defense(cfg, prepared, extractor, denoiser)

    public = rm.init_public_params(prepared.world.catalog.num_items, cfg.model,
                                   cfg.feature_dim, cfg.seed)
    server = fedsim.make_server(public, cfg.model, cfg.learning_rate,
                                images=prepared.world.images if cfg.visual else None,
                                extractor=extractor, defense=runtime,
                                optimizer=cfg.server_optimizer)
    attack = build_attack(cfg, prepared, targets, extractor)

    reports = fedsim.run_experiment(
        server, clients, prepared.split, targets, cfg.global_epochs, cfg.seed,
        fraction=cfg.client_fraction, local_epochs=cfg.local_epochs,
        attack=attack, attack_start_epoch=cfg.start_epoch,
        er_k=cfg.exposure_k, ndcg_k=cfg.ndcg_k, interacted=prepared.interacted)

    detection = fedsim.detection_csv(server.detection_log) if cfg.defense else None
    return RunResult(config=cfg, reports=reports, targets=targets,
                     rounds_csv=fedsim.rounds_csv(reports, cfg.attack,
                                                  cfg.defense, cfg.seed),
                     detection_csv=detection,
                     checkpoint=fedsim.save_checkpoint(server.public),
                     plots_script=plots_script(cfg),
                     image_audit=server.image_audit, rho=rho,
                     denoiser_losses=den_losses)


def plots_script(cfg):
    """gnuplot script for the emitted rounds.csv."""
    return (
        "set datafile separator ','\n"
        "set key autotitle columnhead\n"
        "set xlabel 'epoch'\n"
        "set terminal pngcairo size 900,400\n"
        "set output 'rounds.png'\n"
        f"set title 'model={cfg.model} attack={cfg.attack} "
        f"defense={'on' if cfg.defense else 'off'} seed={cfg.seed}'\n"
        "plot 'rounds.csv' using 1:2 with linespoints title 'ER@5', \\\n"
        "     'rounds.csv' using 1:3 with linespoints title 'NDCG@20'\n"
    )


def write_outputs(result, out_dir):
    """Materialize run artifacts under out_dir (audit images included)."""
    os.makedirs(out_dir, exist_ok=True)
    with open(os.path.join(out_dir, "rounds.csv"), "w", encoding="utf-8") as fh:
        fh.write(result.rounds_csv)
    if result.detection_csv is not None:
        with open(os.path.join(out_dir, "detection.csv"), "w", encoding="utf-8") as fh:
            fh.write(result.detection_csv)
    with open(os.path.join(out_dir, "checkpoint.frg"), "wb") as fh:
        fh.write(result.checkpoint)
    with open(os.path.join(out_dir, "plots.gp"), "w", encoding="utf-8") as fh:
        fh.write(result.plots_script)

    adversarial = [row for row in result.image_audit
                   if row.asset is not None and row.asset.ground_truth_adversarial]
    if adversarial:
        audit_dir = os.path.join(out_dir, "audit")
        os.makedirs(audit_dir, exist_ok=True)
        lines = []
        for row in adversarial:
            name = f"item{row.item_id}_epoch{row.epoch}.ppm"
            dataio.save_ppm(row.asset, os.path.join(audit_dir, name))
            lines.append(f"{row.item_id} {row.epoch} {row.linf!r}")
        with open(os.path.join(audit_dir, "manifest.txt"), "w", encoding="utf-8") as fh:
            fh.write("\n".join(lines) + "\n")


def attack_eval_sweep(cfg, epsilons=None, xis=None, prepared=None):
    """Sweep epsilon (with/without defense) or xi; returns (rows, csv text).

    The epsilon sweep mirrors the defense-effectiveness grid: each cell is
    (peak ER without defense, peak ER with defense).  The xi sweep reports
    peak ER of the gradient-poisoning attack per malicious-user fraction.
    """
    if (epsilons is None) == (xis is None):
        raise ConfigParseError("sweep needs exactly one of epsilons or xis")
    prepared = prepared or prepare_world(cfg)
    rows = []
    if epsilons is not None:
        denoiser = None
        header = ["model"] + [f"eps_{_fmt(e)}" for e in epsilons]
        cells = [cfg.model]
        for eps in epsilons:
            plain_cfg = _clone(cfg, attack=cfg.attack if cfg.attack != "none"
                               else "psmu_pp", epsilon=float(eps), defense=False)
            plain = run(plain_cfg, prepared=prepared)
            defended_cfg = _clone(plain_cfg, defense=True)
            if denoiser is None and defended_cfg.defense:
                # reuse one denoiser across the sweep (it only depends on
                # the world and seed, not on epsilon)
                runtime_losses = build_defense(
                    defended_cfg, prepared,
                    vision.Extractor(cfg.extractor_seed, cfg.feature_dim,
                                     cfg.image_size))
                denoiser = runtime_losses[0].denoiser
            defended = run(defended_cfg, prepared=prepared, denoiser=denoiser)
            cells.append(f"({plain.peak_er!r}, {defended.peak_er!r})")
            rows.append({"epsilon": float(eps), "no_defense": plain.peak_er,
                         "with_defense": defended.peak_er})
        csv_text = ",".join(header) + "\n" + ",".join(str(c) for c in cells) + "\n"
    else:
        header = ["model"] + [f"xi_{_fmt(x)}" for x in xis]
        cells = [cfg.model]
        for xi in xis:
            swept = _clone(cfg, attack="psmu" if cfg.attack == "none" else cfg.attack,
                           xi=float(xi), defense=False)
            res = run(swept, prepared=prepared)
            cells.append(repr(res.peak_er))
            rows.append({"xi": float(xi), "peak_er": res.peak_er})
        csv_text = ",".join(header) + "\n" + ",".join(str(c) for c in cells) + "\n"
    return rows, csv_text


def _fmt(x):
    return str(int(x)) if float(x) == int(x) else str(x).replace(".", "p")


def _clone(cfg, **overrides):
    from dataclasses import replace
    return replace(cfg, **overrides).validate()
