"""Phase-two student training under the min-max objective.

The student minimizes cross-entropy plus weighted robustness terms (fresh
discriminator perturbations and the curriculum-stage dataset) plus weighted
input-gradient alignment to the frozen teacher. The discriminator ascends the
robust loss, choosing which saliency-eligible points to drop and which
directions to push the survivors.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import tensorgraph as tg
from .errors import ConfigError, DataError, SeverityError
from .models import Discriminator, PointClassifier
from .optim import Adam
from .perturb import (
    DEFAULT_LAMBDA_BIAS,
    CurriculumSchedule,
    PerturbationSpec,
    add_noise,
    drop_points,
    noise_rows,
    schedule_at,
)
from .pointcloud import MIN_CLOUD_POINTS, Dataset, PointCloud
from .saliency import (
    SaliencyMap,
    batch_input_gradients,
    cluster_saliency,
    input_gradient,
    rank_scores,
    saliency_scores,
)
from .seeding import derive_seed, make_rng

PERTURB_MODES = ("none", "static", "curriculum")


@dataclass
class StageBudget:
    """Severity delivered to the discriminator for one curriculum stage."""

    fraction: float   # saliency-eligible share of points
    sigma: float      # Gaussian std for the noise component
    alpha: float      # drop share of the whole cloud


@dataclass
class LossBreakdown:
    l_ce: float
    l_robust: float
    l_diff: float
    l_curr_robust: float
    l_curr_diff: float
    total: float
    beta: float
    gamma: float

    def reconstruct(self) -> float:
        return (
            self.l_ce
            + self.beta * (self.l_robust + self.l_curr_robust)
            + self.gamma * (self.l_diff + self.l_curr_diff)
        )


@dataclass
class CloudBatch:
    points: np.ndarray   # (B * n_points) x 3
    labels: np.ndarray   # B
    n_points: int

    @classmethod
    def from_clouds(cls, clouds) -> "CloudBatch":
        sizes = {c.n for c in clouds}
        if len(sizes) != 1:
            raise ConfigError(f"batch clouds must share a size, got {sorted(sizes)}")
        return cls(
            points=np.concatenate([c.points for c in clouds], axis=0),
            labels=np.array([c.label for c in clouds], dtype=np.int64),
            n_points=clouds[0].n,
        )

    @property
    def size(self) -> int:
        return self.labels.shape[0]


@dataclass
class TrainRecord:
    stage: int
    iteration: int
    breakdown: LossBreakdown
    probe_clean: float
    probe_noise: float
    probe_drop: float


@dataclass
class TrainReport:
    records: list = field(default_factory=list)
    stage_budgets: list = field(default_factory=list)  # (stage, StageBudget)

    TSV_HEADER = (
        "stage\titer\tl_ce\tl_robust\tl_diff\tl_curr_robust\tl_curr_diff\ttotal"
        "\tprobe_clean\tprobe_noise\tprobe_drop"
    )

    def to_tsv(self) -> str:
        lines = [self.TSV_HEADER]
        for r in self.records:
            b = r.breakdown
            lines.append(
                f"{r.stage}\t{r.iteration}\t{b.l_ce!r}\t{b.l_robust!r}\t{b.l_diff!r}"
                f"\t{b.l_curr_robust!r}\t{b.l_curr_diff!r}\t{b.total!r}"
                f"\t{r.probe_clean!r}\t{r.probe_noise!r}\t{r.probe_drop!r}"
            )
        return "\n".join(lines) + "\n"


@dataclass
class StudentTrainConfig:
    stages: int = 8
    epochs_per_stage: int = 1
    batch_size: int = 32
    lr: float = 0.01
    beta: float = 1.0
    gamma: float = 0.02
    sigma0: float = 0.02
    delta_sigma: float = 0.02
    frac_start: float = 0.9
    frac_end: float = 0.5
    drop_share: float = 0.6
    lambda_bias: float = DEFAULT_LAMBDA_BIAS
    disc_lr: float = 0.1
    lr_decay: float = 0.3  # final-stage lr multiplier (linear over stages)
    perturb_mode: str = "curriculum"
    use_teacher: bool = True
    probe_size: int = 24
    cluster_k: int = 0  # >0 aggregates saliency into k spatial clusters
    warm_start: bool = False  # initialize the student from the teacher weights

    def __post_init__(self):
        if self.perturb_mode not in PERTURB_MODES:
            raise ConfigError(f"perturb_mode must be one of {PERTURB_MODES}")
        if not 0.0 <= self.drop_share < 1.0:
            raise ConfigError(f"drop_share must be in [0, 1), got {self.drop_share}")
        if not 0.0 <= self.lambda_bias <= 1.0:
            raise ConfigError(f"lambda_bias must be in [0, 1], got {self.lambda_bias}")

    @property
    def total_epochs(self) -> int:
        return self.stages * self.epochs_per_stage

    def static_sigma(self) -> float:
        # schedule-mean severity: the compute-matched ablation of the ordering
        return self.sigma0 + (self.stages - 1) * self.delta_sigma / 2.0


# -- discriminator-driven perturbation ---------------------------------------


def _eligible_count(fraction: float, n: int) -> int:
    return max(math.ceil(fraction * n - 1e-9), 0)


def _disc_drop_choice(drop_logits: np.ndarray, smap: SaliencyMap, eligible: np.ndarray,
                      n_drop: int) -> np.ndarray:
    """Points the discriminator removes, deterministically from its logits.

    With cluster saliency the choice is region-level: whole clusters ranked
    by mean logit, the last one trimmed by per-point logit. Otherwise the
    top-n_drop individual logits win (ties to the lower point index).
    """
    if smap.cluster_ids is None:
        order = np.lexsort((eligible, -drop_logits[eligible]))
        return eligible[order[:n_drop]]
    elig_mask = np.zeros(drop_logits.shape[0], dtype=bool)
    elig_mask[eligible] = True
    clusters = sorted(set(smap.cluster_ids[eligible].tolist()))
    means = {c: drop_logits[(smap.cluster_ids == c) & elig_mask].mean() for c in clusters}
    dropped: list = []
    for c in sorted(clusters, key=lambda c: (-means[c], c)):
        members = np.nonzero((smap.cluster_ids == c) & elig_mask)[0]
        remaining = n_drop - len(dropped)
        if remaining <= 0:
            break
        if members.size <= remaining:
            dropped.extend(members.tolist())
        else:
            order = np.lexsort((members, -drop_logits[members]))
            dropped.extend(members[order[:remaining]].tolist())
    return np.array(dropped[:n_drop], dtype=np.int64)


def _stage_plan(drop_logits: np.ndarray, smap: SaliencyMap, budget: StageBudget, n: int):
    """(kept_rows ascending, noise rows in the kept frame) for one cloud."""
    eligible = smap.ranking[: _eligible_count(budget.fraction, n)]
    n_drop = min(int(budget.alpha * n + 0.5), eligible.size)
    if n - n_drop < MIN_CLOUD_POINTS:
        raise SeverityError(
            f"budget drops {n_drop} of {n} points, fewer than {MIN_CLOUD_POINTS} remain"
        )
    keep = np.ones(n, dtype=bool)
    if n_drop:
        keep[_disc_drop_choice(drop_logits, smap, eligible, n_drop)] = False
    kept_rows = np.nonzero(keep)[0]
    noise_mask = np.zeros(n, dtype=bool)
    noise_mask[eligible] = True
    noise_mask &= keep
    noise_rows_kept = np.nonzero(noise_mask[kept_rows])[0]
    return kept_rows, noise_rows_kept


def discriminator_perturb(
    disc: Discriminator,
    cloud: PointCloud,
    smap: SaliencyMap,
    budget: StageBudget,
    rng: np.random.Generator,
    lambda_bias: float = DEFAULT_LAMBDA_BIAS,
):
    """Let the discriminator choose drops and noise directions for one cloud.

    Returns (PerturbationSpec actually applied, perturbed cloud). The drop
    mask is the top-alpha of the drop logits restricted to the stage's
    saliency-eligible set; noise hits the remaining eligible points along the
    emitted directions (isotropic fallback when every direction is zero).
    """
    n = cloud.n
    if budget.alpha == 0.0 and budget.sigma == 0.0:
        return PerturbationSpec(), cloud
    feats = np.concatenate([cloud.points, smap.scores[:, None]], axis=1)
    drop_logits, dirs = disc.forward_values(feats)
    kept_rows, noise_kept = _stage_plan(drop_logits, smap, budget, n)
    survivors = cloud.points[kept_rows]
    bias = np.zeros((kept_rows.size, 3))
    bias[noise_kept] = dirs[kept_rows[noise_kept]]
    if not np.any(np.linalg.norm(bias, axis=1) > 0):
        bias_field = None  # untrained or silent discriminator: isotropic noise
    else:
        bias_field = bias
    spec = PerturbationSpec(
        drop_fraction=budget.alpha, sigma=budget.sigma, targeted=True, bias=bias_field
    )
    pts = noise_rows(
        survivors, noise_kept, budget.sigma, rng, bias=bias_field, lambda_bias=lambda_bias
    )
    return spec, cloud.with_points(pts)


def _perturbed_batch_node(disc, batch_clouds, smaps, budget, rng, lambda_bias):
    """Graph of the disc-perturbed batch: constant base + directional term.

    The drop choice is discrete (no gradient); the noise direction term keeps
    the graph differentiable in the discriminator parameters.
    """
    feats = np.concatenate(
        [
            np.concatenate([c.points for c in batch_clouds], axis=0),
            np.concatenate([m.scores for m in smaps])[:, None],
        ],
        axis=1,
    )
    feats_t = tg.constant(feats)
    drop_logits_node, dirs_node = disc.forward(feats_t)
    drop_logits = drop_logits_node.data[:, 0]

    n = batch_clouds[0].n
    kept_all, noise_mask_all, labels = [], [], []
    for i, (cloud, smap) in enumerate(zip(batch_clouds, smaps)):
        kept, noise_kept = _stage_plan(drop_logits[i * n : (i + 1) * n], smap, budget, n)
        kept_all.append(kept + i * n)
        mask = np.zeros(kept.size, dtype=bool)
        mask[noise_kept] = True
        noise_mask_all.append(mask)
        labels.append(cloud.label)
    kept_global = np.concatenate(kept_all)
    noise_mask = np.concatenate(noise_mask_all)
    n_surv = kept_all[0].size

    base = np.concatenate([c.points for c in batch_clouds], axis=0)[kept_global]
    lam = lambda_bias
    g = rng.standard_normal((int(noise_mask.sum()), 3))
    base[noise_mask] = base[noise_mask] + budget.sigma * math.sqrt(1.0 - lam * lam) * g

    surv_dirs = tg.select_rows(dirs_node, kept_global)
    masked = surv_dirs * tg.constant(noise_mask[:, None] * np.ones((1, 3)))
    x_node = tg.constant(base) + masked.scale(budget.sigma * lam)
    return x_node, np.array(labels, dtype=np.int64), n_surv


def discriminator_step(
    disc: Discriminator,
    student: PointClassifier,
    batch_clouds,
    smaps,
    budget: StageBudget,
    lr: float,
    rng: np.random.Generator,
    lambda_bias: float = DEFAULT_LAMBDA_BIAS,
) -> float:
    """One gradient-ascent step on the robust loss w.r.t. the discriminator.

    The student is frozen (its gradient buffers are cleared afterwards).
    Returns the robust-loss value at the sampled perturbation.
    """
    x_node, labels, n_surv = _perturbed_batch_node(
        disc, batch_clouds, smaps, budget, rng, lambda_bias
    )
    logits = student.forward_logits(x_node, n_surv)
    l_rob = tg.softmax_cross_entropy(logits, labels)
    disc.zero_grad()
    student.zero_grad()
    l_rob.backward()
    if not np.isfinite(float(l_rob.data)):
        raise DataError("non-finite robust loss in discriminator step")
    disc.ascent_step(lr)
    disc.zero_grad()
    student.zero_grad()
    return float(l_rob.data)


def robust_loss_value(
    disc, student, batch_clouds, smaps, budget, rng, lambda_bias=DEFAULT_LAMBDA_BIAS
) -> float:
    """Forward-only estimate of the robust loss under a given noise stream."""
    x_node, labels, n_surv = _perturbed_batch_node(
        disc, batch_clouds, smaps, budget, rng, lambda_bias
    )
    logits = student.forward_logits(x_node, n_surv)
    return float(tg.softmax_cross_entropy(logits, labels).data)


# -- losses -------------------------------------------------------------------


def gradient_alignment_loss(student, teacher, cloud: PointCloud, target: int) -> float:
    """Squared Frobenius norm of the student-teacher input-gradient gap."""
    gs = input_gradient(student, cloud, target)
    gt = input_gradient(teacher, cloud, target)
    return float(((gs - gt) ** 2).sum())


def _teacher_input_grads(teacher, batch: CloudBatch) -> np.ndarray:
    x = tg.Tensor(batch.points, requires_grad=True)
    logits = teacher.forward_logits(x, batch.n_points)
    tg.gather_labels(logits, batch.labels).sum().backward()
    g = np.array(x.grad)
    teacher.zero_grad()
    return g


def _alignment_node(student, teacher, batch: CloudBatch, cache: dict) -> tg.Tensor:
    """Batch-mean alignment loss, differentiable in the student parameters.

    The teacher gradient is a constant target; the student input gradient is
    rebuilt from the cached forward with frozen relu masks and pool routing,
    so its value matches the true gradient while staying first-order.
    """
    target = tg.constant(_teacher_input_grads(teacher, batch))
    gs = student.input_gradient_graph(cache, batch.labels)
    diff = gs - target
    return (diff * diff).sum().scale(1.0 / batch.size)


def student_loss(
    student: PointClassifier,
    teacher,
    clean: CloudBatch,
    adv: CloudBatch,
    curr: CloudBatch,
    beta: float,
    gamma: float,
):
    """All five objective terms; returns (LossBreakdown, total graph node)."""
    logits_clean, cache_clean = student.forward_cached(clean.points, clean.n_points)
    l_ce = tg.softmax_cross_entropy(logits_clean, clean.labels)
    if adv is clean:
        l_robust = tg.softmax_cross_entropy(logits_clean, clean.labels)
    else:
        logits_adv, _ = student.forward_cached(adv.points, adv.n_points)
        l_robust = tg.softmax_cross_entropy(logits_adv, adv.labels)
    if curr is clean:
        logits_curr, cache_curr = logits_clean, cache_clean
    else:
        logits_curr, cache_curr = student.forward_cached(curr.points, curr.n_points)
    l_curr_robust = tg.softmax_cross_entropy(logits_curr, curr.labels)
    if teacher is not None:
        l_diff = _alignment_node(student, teacher, clean, cache_clean)
        if curr is clean:
            l_curr_diff = l_diff
        else:
            l_curr_diff = _alignment_node(student, teacher, curr, cache_curr)
    else:
        l_diff = tg.constant(0.0)
        l_curr_diff = tg.constant(0.0)
    total = l_ce + (l_robust + l_curr_robust).scale(beta) + (l_diff + l_curr_diff).scale(gamma)
    breakdown = LossBreakdown(
        l_ce=float(l_ce.data),
        l_robust=float(l_robust.data),
        l_diff=float(l_diff.data),
        l_curr_robust=float(l_curr_robust.data),
        l_curr_diff=float(l_curr_diff.data),
        total=float(total.data),
        beta=beta,
        gamma=gamma,
    )
    return breakdown, total


# -- closed-loop training ------------------------------------------------------


def _random_saliency_maps(clouds, rng) -> dict:
    """Uniform point-granular stand-in maps when no teacher is available.

    Deliberately not clustered: with random scores there is no region signal
    to aggregate, and point granularity spreads the noise exposure over the
    whole cloud across epochs.
    """
    maps = {}
    for cloud in clouds:
        scores = rng.uniform(0.0, 1.0, cloud.n)
        maps[cloud.id] = SaliencyMap(scores=scores, ranking=rank_scores(scores))
    return maps


def teacher_saliency_maps(teacher, clouds, cluster_k: int = 0, seed: int = 0,
                          chunk: int = 64) -> dict:
    """Per-cloud teacher saliency; cluster_k > 0 adds region structure.

    Scores and ranking stay point-granular so noise targeting covers the
    cloud; the cluster fields give the drop machinery its region-level
    units (whole-cluster gaps). cluster_saliency's score-replacing mode
    remains available separately for pure region-level targeting.
    """
    grads = batch_input_gradients(teacher, clouds, chunk=chunk)
    maps = {}
    for cloud, g in zip(clouds, grads):
        smap = saliency_scores(g)
        if cluster_k:
            clustered = cluster_saliency(cloud, smap, min(cluster_k, cloud.n),
                                         seed=derive_seed(seed, "cluster", cloud.id))
            smap = SaliencyMap(
                scores=smap.scores,
                ranking=smap.ranking,
                cluster_ids=clustered.cluster_ids,
                cluster_scores=clustered.cluster_scores,
            )
        maps[cloud.id] = smap
    return maps


def _probe_sets(val_clouds, probe_size: int, seed: int):
    probe = val_clouds[: min(probe_size, len(val_clouds))]
    noise_spec = PerturbationSpec(sigma=0.1)
    drop_spec = PerturbationSpec(drop_fraction=0.5, spatial=True)
    rng_noise = make_rng(seed, "probe", "noise")
    rng_drop = make_rng(seed, "probe", "drop")
    clean = CloudBatch.from_clouds(probe)
    noised = CloudBatch.from_clouds([add_noise(c, noise_spec, rng_noise) for c in probe])
    dropped = CloudBatch.from_clouds([drop_points(c, drop_spec, None, rng_drop) for c in probe])
    return clean, noised, dropped


def _accuracy(model, batch: CloudBatch) -> float:
    preds = model.predict(batch.points, batch.n_points)
    return float((preds == batch.labels).mean() * 100.0)


def _stage_schedule(cfg: StudentTrainConfig):
    """(stage index, StageBudget, epochs) triples realizing the variant."""
    if cfg.stages == 0:
        return []
    if cfg.perturb_mode == "curriculum":
        sched = CurriculumSchedule(
            cfg.stages, cfg.sigma0, cfg.delta_sigma, cfg.frac_start, cfg.frac_end
        )
        return [
            (t, StageBudget(*schedule_at(sched, t), alpha=None), cfg.epochs_per_stage)
            for t in range(cfg.stages)
        ]
    if cfg.perturb_mode == "static":
        return [(0, StageBudget(cfg.frac_start, cfg.static_sigma(), alpha=None), cfg.total_epochs)]
    return [(0, StageBudget(0.0, 0.0, alpha=0.0), cfg.total_epochs)]


def closed_loop_train(
    dataset: Dataset,
    teacher,
    cfg: StudentTrainConfig,
    seed: int,
):
    """Train a student through the staged min-max loop; returns (student, report).

    Per stage: saliency maps guide the discriminator's perturbation of the
    training clouds into the stage dataset; each student step minimizes the
    five-term objective and is interleaved 1:1 with a discriminator ascent
    step; the schedule then advances (fraction down, sigma up).
    """
    if cfg.use_teacher and teacher is None:
        raise ConfigError("use_teacher is set but no teacher was provided")
    train = dataset.clouds_in("train")
    val = dataset.clouds_in("val")
    if not train or not val:
        raise ConfigError("dataset needs nonempty train and val splits")

    if cfg.warm_start and teacher is not None:
        student = teacher.copy()
    else:
        student = PointClassifier(dataset.n_classes, seed=derive_seed(seed, "student-init"))
    use_disc = cfg.perturb_mode != "none"
    disc = Discriminator(seed=derive_seed(seed, "disc-init")) if use_disc else None
    optimizer = Adam(student.parameters(), lr=cfg.lr)

    probe_clean, probe_noise, probe_drop = _probe_sets(val, cfg.probe_size, seed)
    report = TrainReport()

    iteration = 0
    schedule = _stage_schedule(cfg)
    n_stages = len(schedule)
    for stage, budget, epochs in schedule:
        if budget.alpha is None:
            budget = StageBudget(budget.fraction, budget.sigma, cfg.drop_share * budget.fraction)
        report.stage_budgets.append((stage, budget))
        if n_stages > 1:
            # later stages refine rather than overwrite earlier skills
            optimizer.lr = cfg.lr * (1.0 - (1.0 - cfg.lr_decay) * stage / (n_stages - 1))

        if use_disc:
            if cfg.use_teacher:
                # saliency of the stage's (noised) data, row-aligned with the
                # originals; the gradient field shifts with sigma_t, so the
                # eligible sets vary across stages as the loop intends
                rng_maps = make_rng(seed, "stage-maps", stage)
                if budget.sigma > 0:
                    noise_spec = PerturbationSpec(sigma=budget.sigma)
                    view = [add_noise(c, noise_spec, rng_maps) for c in train]
                else:
                    view = train
                stage_maps = teacher_saliency_maps(
                    teacher, view, cluster_k=cfg.cluster_k,
                    seed=derive_seed(seed, "stage-maps", stage),
                )
                stage_maps = {
                    orig.id: stage_maps[v.id] for orig, v in zip(train, view)
                }
            else:
                stage_maps = _random_saliency_maps(
                    train, make_rng(seed, "random-maps", stage)
                )
            rng_stage = make_rng(seed, "stage-data", stage)
            curr_clouds = [
                discriminator_perturb(
                    disc, c, stage_maps[c.id], budget, rng_stage, cfg.lambda_bias
                )[1]
                for c in train
            ]
        else:
            stage_maps = None
            curr_clouds = list(train)

        for epoch in range(epochs):
            rng_epoch = make_rng(seed, "epoch", stage, epoch)
            if use_disc and not cfg.use_teacher:
                # without a teacher the targeting is random; fresh draws per
                # epoch keep the perturbed regions from freezing in place
                stage_maps = _random_saliency_maps(
                    train, make_rng(seed, "random-maps", stage, epoch)
                )
            order = rng_epoch.permutation(len(train))
            for start in range(0, len(train), cfg.batch_size):
                idx = order[start : start + cfg.batch_size]
                if idx.size < 2:
                    continue  # degenerate tail batch
                batch_clouds = [train[i] for i in idx]
                clean = CloudBatch.from_clouds(batch_clouds)
                if use_disc:
                    batch_maps = [stage_maps[c.id] for c in batch_clouds]
                    adv_clouds = [
                        discriminator_perturb(
                            disc, c, m, budget, rng_epoch, cfg.lambda_bias
                        )[1]
                        for c, m in zip(batch_clouds, batch_maps)
                    ]
                    adv = CloudBatch.from_clouds(adv_clouds)
                    curr = CloudBatch.from_clouds([curr_clouds[i] for i in idx])
                else:
                    adv = clean
                    curr = clean

                breakdown, total = student_loss(
                    student,
                    teacher if cfg.use_teacher else None,
                    clean,
                    adv,
                    curr,
                    cfg.beta,
                    cfg.gamma,
                )
                if not np.isfinite(breakdown.total):
                    raise DataError(
                        f"non-finite loss at stage {stage} iteration {iteration}: {breakdown}"
                    )
                student.zero_grad()
                total.backward()
                optimizer.step()
                student.zero_grad()

                if use_disc:
                    discriminator_step(
                        disc,
                        student,
                        batch_clouds,
                        batch_maps,
                        budget,
                        cfg.disc_lr,
                        rng_epoch,
                        cfg.lambda_bias,
                    )

                report.records.append(
                    TrainRecord(
                        stage=stage,
                        iteration=iteration,
                        breakdown=breakdown,
                        probe_clean=_accuracy(student, probe_clean),
                        probe_noise=_accuracy(student, probe_noise),
                        probe_drop=_accuracy(student, probe_drop),
                    )
                )
                iteration += 1
    return student, report
