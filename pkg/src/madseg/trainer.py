"""Training loop: batch synthesis, routing, optimization, convergence.

Each step assembles a half-normal / half-simulated batch, routes every
simulated sample to a supervised target (clearly anomalous or degenerate) or
to the pseudo-labeling committee, and takes one Adam step on the composite
objective.  The two earliest encoder stages are excluded from optimization
so the memory bank stays commensurable with fresh encodings; the labeling
committee is refitted on a schedule from freshly simulated pools.

All randomness is drawn from named, seed-derived streams, making runs with
equal seeds byte-identical.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
import torch

from . import dataio
from .anomaly_sim import SimConfig, simulate
from .checkpoint import Checkpoint
from .errors import ConfigurationError, NumericError, ParameterError
from .losses import (
    LossReport,
    LossWeights,
    bce_pseudo_logits,
    bce_scores_logits,
    make_report,
    seg_term_logits,
    total_term,
)
from .memory import MemoryBank, build_memory
from .network import (
    DefectModel,
    NetworkConfig,
    build_model,
    images_to_batch,
)
from .pseudolabel import (
    LABEL_UNKNOWN,
    PseudoLabeler,
    build_labeler,
    random_projection,
)

# Sub-stream tags for seed derivation; every consumer of randomness gets its
# own stream so reordering one stage cannot silently shift another.
_STREAM_MEMORY = 1
_STREAM_BATCH = 2
_STREAM_ITEM = 3
_STREAM_LABELER = 4


@dataclass
class TrainConfig:
    """Every knob of one training run."""

    steps: int = 500
    batch_size: int = 8
    lr0: float = 0.003
    warmup_steps: int = 50
    image_size: int = 256
    base_width: int = 32
    memory_n: int = 30
    refresh_memory_every: int = 0  # 0 = build once, never refresh
    occ_count: int = 2  # committee size K
    occ_components: int = 3  # mixture components per scorer
    occ_fit_includes_sim: bool = True
    negative_against_upper: bool = False
    labeler_refresh_every: int = 50
    labeler_pool: int = 48
    labeled_fraction: float = 0.2
    projection_dim: int = 16
    plateau_window: int = 25
    plateau_patience: int = 5
    plateau_min_delta: float = 1e-3
    seed: int = 0
    use_msff: bool = True
    use_attention: bool = True
    use_ca: bool = False
    image_score: str = "max"
    perturb: bool = True
    perturb_sigma: tuple[float, float] = dataio.DEFAULT_SIGMA_RANGE
    perturb_contrast: tuple[float, float] = dataio.DEFAULT_CONTRAST_RANGE
    loss: LossWeights = field(default_factory=LossWeights)
    sim: SimConfig = field(default_factory=SimConfig)

    def validate(self) -> None:
        if self.steps < 1:
            raise ConfigurationError(f"steps must be >= 1, got {self.steps}")
        if self.batch_size < 2 or self.batch_size % 2 != 0:
            raise ConfigurationError(
                f"batch_size must be even and >= 2, got {self.batch_size}"
            )
        if self.lr0 <= 0:
            raise ConfigurationError(f"lr0 must be > 0, got {self.lr0}")
        if not (0 <= self.warmup_steps < self.steps):
            raise ConfigurationError(
                f"warmup_steps must lie in [0, steps), got {self.warmup_steps} "
                f"with steps={self.steps}"
            )
        if self.memory_n < 1:
            raise ConfigurationError(
                f"memory_n must be >= 1, got {self.memory_n}"
            )
        if self.refresh_memory_every < 0:
            raise ConfigurationError(
                f"refresh_memory_every must be >= 0, got {self.refresh_memory_every}"
            )
        if self.occ_count < 1:
            raise ConfigurationError(
                f"occ_count must be >= 1, got {self.occ_count}"
            )
        if self.occ_components < 1:
            raise ConfigurationError(
                f"occ_components must be >= 1, got {self.occ_components}"
            )
        if self.labeler_refresh_every < 1:
            raise ConfigurationError(
                f"labeler_refresh_every must be >= 1, got {self.labeler_refresh_every}"
            )
        if self.labeler_pool < 2 * self.occ_count + 2:
            raise ConfigurationError(
                f"labeler_pool must be >= {2 * self.occ_count + 2}, "
                f"got {self.labeler_pool}"
            )
        if not (0.0 < self.labeled_fraction < 1.0):
            raise ConfigurationError(
                f"labeled_fraction must lie in (0, 1), got {self.labeled_fraction}"
            )
        if self.projection_dim < 1:
            raise ConfigurationError(
                f"projection_dim must be >= 1, got {self.projection_dim}"
            )
        if self.plateau_window < 1:
            raise ConfigurationError(
                f"plateau_window must be >= 1, got {self.plateau_window}"
            )
        if self.plateau_patience < 1:
            raise ConfigurationError(
                f"plateau_patience must be >= 1, got {self.plateau_patience}"
            )
        if self.plateau_min_delta < 0:
            raise ConfigurationError(
                f"plateau_min_delta must be >= 0, got {self.plateau_min_delta}"
            )
        lo, hi = self.perturb_sigma
        if not (0 <= lo <= hi):
            raise ConfigurationError(
                f"perturb_sigma must satisfy 0 <= lo <= hi, got {self.perturb_sigma}"
            )
        lo, hi = self.perturb_contrast
        if not (0 < lo <= hi):
            raise ConfigurationError(
                f"perturb_contrast must satisfy 0 < lo <= hi, got {self.perturb_contrast}"
            )
        self.loss.validate()
        self.sim.validate()
        self.network_config().validate()

    def network_config(self) -> NetworkConfig:
        return NetworkConfig(
            image_size=self.image_size,
            base_width=self.base_width,
            use_msff=self.use_msff,
            use_attention=self.use_attention,
            use_ca=self.use_ca,
            image_score=self.image_score,
        )


def lr_schedule(step: int, cfg: TrainConfig) -> float:
    """Learning rate at an optimizer step: linear warmup, then half-cosine.

    Warmup climbs from lr0/warmup_steps at step 0 to lr0 at the warmup
    boundary; the cosine branch starts at lr0 there and reaches exactly 0 at
    ``steps``.  The two branches agree at the boundary.
    """
    if step < 0:
        raise ParameterError(f"step must be >= 0, got {step}")
    w = cfg.warmup_steps
    if w > 0 and step < w:
        start = cfg.lr0 / w
        return start + (cfg.lr0 - start) * (step / w)
    span = cfg.steps - w
    frac = min(1.0, (step - w) / span)
    return cfg.lr0 * 0.5 * (1.0 + math.cos(math.pi * frac))


def should_stop(window_means: list[float], patience: int, min_delta: float) -> bool:
    """Plateau rule over non-overlapping loss-window means.

    The run stops once the best seen mean has gone ``patience`` consecutive
    windows without improving by at least ``min_delta`` (an improvement of
    exactly ``min_delta`` counts as improvement and continues the run).
    """
    best = math.inf
    stalls = 0
    for mean in window_means:
        if best - mean >= min_delta:
            stalls = 0
        else:
            stalls += 1
            if stalls >= patience:
                return True
        best = min(best, mean)
    return False


@dataclass
class BatchItem:
    """One training sample after synthesis and perturbation."""

    image: np.ndarray  # (H, W, 3) float32
    mask: np.ndarray  # (H, W) uint8
    is_simulated: bool
    degenerate: bool = False
    mask_area: int = 0


def assemble_batch(
    normals: list[np.ndarray],
    cfg: TrainConfig,
    texture_pool: list[np.ndarray],
    step: int,
) -> list[BatchItem]:
    """Half defect-free, half simulated items for one step (seed-derived)."""
    step_rng = np.random.default_rng([cfg.seed, _STREAM_BATCH, step])
    half = cfg.batch_size // 2
    replace = len(normals) < half
    normal_idx = step_rng.choice(len(normals), size=half, replace=replace)
    source_idx = step_rng.choice(len(normals), size=half, replace=replace)

    items: list[BatchItem] = []
    for slot, idx in enumerate(normal_idx):
        rng = np.random.default_rng([cfg.seed, _STREAM_ITEM, step, slot])
        img = _maybe_perturb(normals[int(idx)], cfg, rng)
        items.append(
            BatchItem(
                image=img,
                mask=np.zeros(img.shape[:2], dtype=np.uint8),
                is_simulated=False,
            )
        )
    for slot, idx in enumerate(source_idx, start=half):
        rng = np.random.default_rng([cfg.seed, _STREAM_ITEM, step, slot])
        img = _maybe_perturb(normals[int(idx)], cfg, rng)
        sample = simulate(img, cfg.sim, texture_pool, rng)
        items.append(
            BatchItem(
                image=sample.image,
                mask=sample.mask,
                is_simulated=True,
                degenerate=sample.degenerate,
                mask_area=int(sample.mask.sum()),
            )
        )
    return items


def _maybe_perturb(
    img: np.ndarray, cfg: TrainConfig, rng: np.random.Generator
) -> np.ndarray:
    if not cfg.perturb:
        return img
    sigma = float(rng.uniform(*cfg.perturb_sigma))
    contrast = float(rng.uniform(*cfg.perturb_contrast))
    return dataio.perturb(img, sigma, contrast, rng)


@dataclass
class LabelerState:
    """The committee plus the area rule that routes obvious positives."""

    labeler: PseudoLabeler
    area_threshold: float
    audit_rows: list[tuple] = field(default_factory=list)


def refresh_labeler(
    model: DefectModel,
    normals: list[np.ndarray],
    cfg: TrainConfig,
    texture_pool: list[np.ndarray],
    projector: np.ndarray,
    step: int,
) -> LabelerState:
    """Draw a fresh simulated pool and refit the labeling committee.

    Non-degenerate pool samples are ranked by mask area; the largest
    ``labeled_fraction`` become the labeled-anomalous set (held out from the
    committee's training pool), and the smallest area among them becomes the
    threshold that routes big-mask training samples straight to supervised
    positives.  Labeled normals are encodings of (perturbed) defect-free
    images.
    """
    rng = np.random.default_rng([cfg.seed, _STREAM_LABELER, step])
    pool: list[tuple[np.ndarray, int, bool]] = []
    source_idx = rng.choice(
        len(normals), size=cfg.labeler_pool, replace=len(normals) < cfg.labeler_pool
    )
    for idx in source_idx:
        img = _maybe_perturb(normals[int(idx)], cfg, rng)
        sample = simulate(img, cfg.sim, texture_pool, rng)
        pool.append((sample.image, int(sample.mask.sum()), sample.degenerate))

    n_normal_feats = min(len(normals), max(8, cfg.labeler_pool // 2))
    normal_idx = rng.choice(
        len(normals), size=n_normal_feats, replace=len(normals) < n_normal_feats
    )
    normal_imgs = [
        _maybe_perturb(normals[int(i)], cfg, rng) for i in normal_idx
    ]

    sim_latents = _encode_latents(model, [p[0] for p in pool])
    normal_latents = _encode_latents(model, normal_imgs)

    usable = [i for i, p in enumerate(pool) if not p[2] and p[1] > 0]
    if not usable:
        raise ConfigurationError(
            "anomaly simulation produced no non-empty masks; check the "
            "foreground/threshold settings"
        )
    by_area = sorted(usable, key=lambda i: (-pool[i][1], i))
    n_pos = max(1, int(round(cfg.labeled_fraction * len(usable))))
    if n_pos >= len(usable):
        n_pos = len(usable) - 1 or 1
    pos_ids = by_area[:n_pos]
    rest_ids = [i for i in range(len(pool)) if i not in set(pos_ids)]
    rest_ids = [i for i in rest_ids if not pool[i][2]]
    if not rest_ids:
        raise ConfigurationError(
            "simulated pool too small to split into labeled and unlabeled parts"
        )
    area_threshold = float(min(pool[i][1] for i in pos_ids))

    em_cap = min(100, 10 + cfg.labeler_pool // 10)
    labeler = build_labeler(
        labeled_anomalous=sim_latents[pos_ids],
        labeled_normal=normal_latents,
        sim_features=sim_latents[rest_ids],
        k=cfg.occ_count,
        rng=rng,
        projector=projector,
        components=cfg.occ_components,
        max_iter=em_cap,
        fit_includes_sim=cfg.occ_fit_includes_sim,
        negative_against_upper=cfg.negative_against_upper,
    )

    audit: list[tuple] = []
    scores = labeler.score_matrix(sim_latents[rest_ids])
    labels = labeler.label_many(sim_latents[rest_ids])
    for row, (i, lab) in enumerate(zip(rest_ids, labels)):
        audit.append((step, i, *[float(s) for s in scores[row]], int(lab)))
    return LabelerState(
        labeler=labeler, area_threshold=area_threshold, audit_rows=audit
    )


def _encode_latents(model: DefectModel, images: list[np.ndarray]) -> np.ndarray:
    """Pooled latents of a list of images, chunked, without gradients."""
    out = []
    with torch.no_grad():
        for lo in range(0, len(images), 16):
            batch = images_to_batch(images[lo : lo + 16])
            _, r = model.encode(batch)
            out.append(r.cpu().numpy().astype(np.float64))
    return np.concatenate(out, axis=0)


def train_step(
    model: DefectModel,
    bank: MemoryBank,
    labeler_state: LabelerState,
    optimizer: torch.optim.Optimizer,
    batch: list[BatchItem],
    cfg: TrainConfig,
    lr: float,
    step: int,
) -> LossReport:
    """One optimization step on an assembled batch."""
    for group in optimizer.param_groups:
        group["lr"] = lr

    x = images_to_batch([item.image for item in batch])
    target = torch.from_numpy(
        np.stack([item.mask for item in batch]).astype(np.float32)
    ).unsqueeze(1)

    result = model.forward_batch(x, bank)
    l1, focal, seg = seg_term_logits(target, result.seg_logits, cfg.loss)

    labeled_idx: list[int] = []
    labeled_y: list[float] = []
    pseudo_idx: list[int] = []
    for i, item in enumerate(batch):
        if not item.is_simulated:
            labeled_idx.append(i)
            labeled_y.append(0.0)
        elif item.degenerate:
            labeled_idx.append(i)
            labeled_y.append(0.0)
        elif item.mask_area >= labeler_state.area_threshold:
            labeled_idx.append(i)
            labeled_y.append(1.0)
        else:
            pseudo_idx.append(i)

    ql = result.q_logits
    bce_l = bce_scores_logits(
        ql[labeled_idx],
        torch.tensor(labeled_y, dtype=ql.dtype),
    )
    if pseudo_idx:
        feats = result.r[pseudo_idx].detach().cpu().numpy().astype(np.float64)
        pseudo_labels = labeler_state.labeler.label_many(feats)
    else:
        pseudo_labels = np.zeros(0, dtype=np.int64)
    bce_u = bce_pseudo_logits(
        ql[pseudo_idx], torch.from_numpy(pseudo_labels)
    )
    total = total_term(seg, bce_l, bce_u)

    for name, value in (
        ("l1", l1),
        ("focal", focal),
        ("seg", seg),
        ("bce_labeled", bce_l),
        ("bce_pseudo", bce_u),
        ("total", total),
    ):
        scalar = float(value.detach())
        if not math.isfinite(scalar):
            raise NumericError(
                f"non-finite {name} loss ({scalar}) at step {step}"
            )

    optimizer.zero_grad()
    total.backward()
    optimizer.step()

    n_unknown = int((pseudo_labels == LABEL_UNKNOWN).sum())
    return make_report(
        l1, focal, seg, bce_l, bce_u, total,
        n_pseudo_used=int(pseudo_labels.size) - n_unknown,
        n_pseudo_unknown=n_unknown,
    )


@dataclass
class TrainResult:
    """Everything a finished run hands back."""

    model: DefectModel
    bank: MemoryBank
    labeler_state: LabelerState
    projector: np.ndarray
    log_rows: list[dict]
    steps_run: int
    stopped_early: bool
    final_report: LossReport
    labeler_audit: list[tuple]


def train(
    cfg: TrainConfig,
    dataset: dataio.DatasetIndex | list[np.ndarray],
    texture_pool: list[np.ndarray] | None = None,
    progress=None,
) -> TrainResult:
    """Run the full training procedure.

    ``dataset`` is either an indexed directory tree (training images are
    loaded at ``cfg.image_size``) or a pre-loaded list of normal images.
    ``progress`` is an optional callable receiving one line per step.
    """
    cfg.validate()
    texture_pool = texture_pool or []

    if isinstance(dataset, dataio.DatasetIndex):
        normals = [
            dataio.load_image(p, cfg.image_size) for p in dataset.train_normals
        ]
    else:
        normals = list(dataset)
    if not normals:
        raise ConfigurationError("no training images available")
    if len(normals) < cfg.memory_n:
        raise ConfigurationError(
            f"memory_n={cfg.memory_n} exceeds the {len(normals)} training images"
        )
    for img in normals:
        if img.shape[:2] != (cfg.image_size, cfg.image_size):
            raise ParameterError(
                f"training image shape {img.shape[:2]} does not match "
                f"image_size {cfg.image_size}"
            )

    model = build_model(cfg.network_config(), cfg.seed)
    frozen_before = model.frozen_snapshot()
    memory_rng = np.random.default_rng([cfg.seed, _STREAM_MEMORY])
    bank = build_memory(normals, model, cfg.memory_n, memory_rng)
    projector = random_projection(
        cfg.network_config().latent_dim,
        cfg.projection_dim,
        np.random.default_rng([cfg.seed, _STREAM_LABELER]),
    )
    optimizer = torch.optim.Adam(
        model.trainable_parameters(),
        lr=cfg.lr0,
        betas=(0.9, 0.999),
        eps=1e-8,
        weight_decay=0.0,
    )

    labeler_state: LabelerState | None = None
    log_rows: list[dict] = []
    audit: list[tuple] = []
    totals: list[float] = []
    window_means: list[float] = []
    stopped_early = False
    report: LossReport | None = None
    steps_run = 0

    for step in range(cfg.steps):
        if (
            cfg.refresh_memory_every > 0
            and step > 0
            and step % cfg.refresh_memory_every == 0
        ):
            bank = build_memory(
                normals,
                model,
                cfg.memory_n,
                np.random.default_rng([cfg.seed, _STREAM_MEMORY, step]),
            )
        if step % cfg.labeler_refresh_every == 0 or labeler_state is None:
            labeler_state = refresh_labeler(
                model, normals, cfg, texture_pool, projector, step
            )
            audit.extend(labeler_state.audit_rows)

        lr = lr_schedule(step, cfg)
        batch = assemble_batch(normals, cfg, texture_pool, step)
        report = train_step(
            model, bank, labeler_state, optimizer, batch, cfg, lr, step
        )
        steps_run = step + 1
        row = {"step": step, "lr": lr}
        row.update(
            {
                "l1": report.l1,
                "focal": report.focal,
                "seg": report.seg,
                "bce_labeled": report.bce_labeled,
                "bce_pseudo": report.bce_pseudo,
                "total": report.total,
                "n_pseudo_used": report.n_pseudo_used,
                "n_pseudo_unknown": report.n_pseudo_unknown,
            }
        )
        log_rows.append(row)
        if progress is not None:
            progress(
                f"step {step + 1}/{cfg.steps} lr={lr:.6f} "
                f"total={report.total:.6f} seg={report.seg:.6f} "
                f"pseudo={report.n_pseudo_used}/{report.n_pseudo_used + report.n_pseudo_unknown}"
            )

        totals.append(report.total)
        if len(totals) % cfg.plateau_window == 0:
            window_means.append(
                float(np.mean(totals[-cfg.plateau_window :]))
            )
            if should_stop(
                window_means, cfg.plateau_patience, cfg.plateau_min_delta
            ):
                stopped_early = True
                break

    frozen_after = model.frozen_snapshot()
    for before, after in zip(frozen_before, frozen_after):
        if not torch.equal(before, after):
            raise NumericError(
                "frozen encoder stages changed during training; "
                "optimizer partitioning is broken"
            )

    assert labeler_state is not None and report is not None
    return TrainResult(
        model=model,
        bank=bank,
        labeler_state=labeler_state,
        projector=projector,
        log_rows=log_rows,
        steps_run=steps_run,
        stopped_early=stopped_early,
        final_report=report,
        labeler_audit=audit,
    )


# --------------------------------------------------------------------------
# Log serialization and checkpoint assembly
# --------------------------------------------------------------------------
LOG_COLUMNS = (
    "step",
    "lr",
    "l1",
    "focal",
    "seg",
    "bce_labeled",
    "bce_pseudo",
    "total",
    "n_pseudo_used",
    "n_pseudo_unknown",
)


def log_csv_bytes(log_rows: list[dict]) -> bytes:
    """Deterministic CSV encoding of the training log."""
    lines = [",".join(LOG_COLUMNS)]
    for row in log_rows:
        cells = []
        for col in LOG_COLUMNS:
            value = row[col]
            cells.append(repr(value) if isinstance(value, float) else str(value))
        lines.append(",".join(cells))
    return ("\n".join(lines) + "\n").encode("utf-8")


def to_checkpoint(
    result: TrainResult, config_dict: dict, log_digest: str = ""
) -> Checkpoint:
    """Pack a finished run into a checkpoint object."""
    arrays: dict[str, np.ndarray] = {}
    for key, value in result.model.state_dict().items():
        arrays[f"model/{key}"] = value.detach().cpu().numpy()
    arrays["memory/f1"] = result.bank.f1.cpu().numpy()
    arrays["memory/f2"] = result.bank.f2.cpu().numpy()
    arrays["memory/f3"] = result.bank.f3.cpu().numpy()
    labeler = result.labeler_state.labeler
    for k, scorer in enumerate(labeler.scorers):
        arrays[f"labeler/scorer{k}/weights"] = scorer.weights
        arrays[f"labeler/scorer{k}/means"] = scorer.means
        arrays[f"labeler/scorer{k}/variances"] = scorer.variances
    arrays["labeler/upper"] = labeler.upper
    arrays["labeler/lower"] = labeler.lower
    arrays["labeler/projector"] = labeler.projector
    arrays["labeler/area_threshold"] = np.array(
        result.labeler_state.area_threshold, dtype=np.float64
    )
    return Checkpoint(
        step=result.steps_run,
        config=config_dict,
        arrays=arrays,
        log_digest=log_digest,
    )


def restore_state(
    ckpt: Checkpoint, cfg: TrainConfig
) -> tuple[DefectModel, MemoryBank, LabelerState]:
    """Rebuild model, memory bank, and labeler from a checkpoint."""
    from .errors import CheckpointError
    from .pseudolabel import MixtureScorer

    model = build_model(cfg.network_config(), cfg.seed)
    state = {}
    for key, arr in ckpt.arrays.items():
        if key.startswith("model/"):
            state[key[len("model/") :]] = torch.from_numpy(arr.copy())
    try:
        model.load_state_dict(state)
        bank = MemoryBank(
            f1=torch.from_numpy(ckpt.arrays["memory/f1"].copy()),
            f2=torch.from_numpy(ckpt.arrays["memory/f2"].copy()),
            f3=torch.from_numpy(ckpt.arrays["memory/f3"].copy()),
        )
        scorers = []
        for k in range(cfg.occ_count):
            scorers.append(
                MixtureScorer(
                    weights=ckpt.arrays[f"labeler/scorer{k}/weights"],
                    means=ckpt.arrays[f"labeler/scorer{k}/means"],
                    variances=ckpt.arrays[f"labeler/scorer{k}/variances"],
                )
            )
        labeler = PseudoLabeler(
            scorers=scorers,
            upper=ckpt.arrays["labeler/upper"],
            lower=ckpt.arrays["labeler/lower"],
            projector=ckpt.arrays["labeler/projector"],
            negative_against_upper=cfg.negative_against_upper,
        )
        area_threshold = float(ckpt.arrays["labeler/area_threshold"])
    except (KeyError, RuntimeError) as exc:
        raise CheckpointError(f"checkpoint does not match config: {exc}") from exc
    model.eval()
    return model, bank, LabelerState(labeler=labeler, area_threshold=area_threshold)
