"""Command implementations shared by the HTTP service and (through it) the CLI.

Each function consumes and produces the pydantic models from
:mod:`madseg.service.schemas`, so the FastAPI endpoints and any other caller
get identical behavior.
"""

from __future__ import annotations

import base64
import csv
import hashlib
import io
from pathlib import Path

import numpy as np
from PIL import Image as PILImage

from . import checkpoint as checkpoint_mod
from . import config as config_mod
from . import dataio, evaluation, synthetic, trainer
from .anomaly_sim import simulate
from .errors import ConfigurationError, ImageFileError, ParameterError
from .service import schemas

#: Seed sub-stream for standalone sample generation (distinct from training).
_STREAM_CLI_SIM = 7

ABLATION_VARIANTS = ("baseline", "no_msff", "no_attention", "with_ca")


def _apply_ablation(rc: config_mod.RunConfig, which: str) -> None:
    if which == "baseline":
        return
    if which == "no_msff":
        rc.set("train", "use_msff", False)
    elif which == "no_attention":
        rc.set("train", "use_attention", False)
    elif which == "with_ca":
        rc.set("train", "use_ca", True)
    else:
        raise ConfigurationError(
            f"unknown ablation {which!r}; expected one of {ABLATION_VARIANTS}"
        )


def load_texture_pool(texture_dir: str, image_size: int) -> list[np.ndarray]:
    """Load every image in a directory (sorted); empty path gives an empty pool."""
    if not texture_dir:
        return []
    d = Path(texture_dir)
    if not d.is_dir():
        raise ConfigurationError(f"texture directory not found: {d}")
    paths = sorted(
        p
        for p in d.iterdir()
        if p.is_file() and p.suffix.lower() in dataio.IMAGE_EXTENSIONS
    )
    return [dataio.load_image(p, image_size) for p in paths]


def run_simulate(req: schemas.SimulateRequest) -> schemas.SimulateResponse:
    """Generate (image, mask) pairs plus a manifest CSV."""
    rc = config_mod.parse_file(req.config)
    if req.seed is not None:
        rc.set("train", "seed", req.seed)
    rc.require_dataset()
    cfg = rc.train_config()
    index = dataio.load_dataset(rc.dataset_root, rc.category)
    sources = [dataio.load_image(p, cfg.image_size) for p in index.train_normals]
    pool = load_texture_pool(rc.texture_dir, cfg.image_size)

    out_dir = Path(req.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    manifest = out_dir / "manifest.csv"
    with open(manifest, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(
            ["index", "image", "mask", "delta", "noise_kind", "degenerate"]
        )
        for i in range(req.count):
            rng = np.random.default_rng([cfg.seed, _STREAM_CLI_SIM, i])
            src = sources[int(rng.integers(0, len(sources)))]
            sample = simulate(src, cfg.sim, pool, rng)
            img_name = f"{i:04d}_image.png"
            mask_name = f"{i:04d}_mask.png"
            dataio.save_image(sample.image, out_dir / img_name)
            dataio.save_mask(sample.mask, out_dir / mask_name)
            writer.writerow(
                [
                    i,
                    img_name,
                    mask_name,
                    repr(sample.delta),
                    sample.noise_kind,
                    int(sample.degenerate),
                ]
            )
    return schemas.SimulateResponse(
        out_dir=str(out_dir), manifest=str(manifest), pairs=req.count
    )


def run_train(req: schemas.TrainRequest) -> schemas.TrainResponse:
    """Train a model and write checkpoint + training log."""
    rc = config_mod.parse_file(req.config)
    if req.seed is not None:
        rc.set("train", "seed", req.seed)
    if req.refresh_every is not None:
        rc.set("train", "labeler_refresh_every", req.refresh_every)
    if req.ablate is not None:
        _apply_ablation(rc, req.ablate)
    rc.require_dataset()
    cfg = rc.train_config()
    index = dataio.load_dataset(rc.dataset_root, rc.category)
    pool = load_texture_pool(rc.texture_dir, cfg.image_size)

    progress = None if req.quiet else print
    result = trainer.train(cfg, index, pool, progress=progress)

    log_path = Path(req.log) if req.log else Path(str(req.out) + ".log.csv")
    log_path.parent.mkdir(parents=True, exist_ok=True)
    log_bytes = trainer.log_csv_bytes(result.log_rows)
    log_path.write_bytes(log_bytes)
    digest = hashlib.sha256(log_bytes).hexdigest()

    if req.labeler_csv:
        _write_labeler_csv(result, Path(req.labeler_csv), cfg.occ_count)

    out = Path(req.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    ckpt = trainer.to_checkpoint(result, rc.to_flat(), log_digest=digest)
    checkpoint_mod.save(ckpt, out)

    fin = result.final_report
    return schemas.TrainResponse(
        checkpoint=str(out),
        log=str(log_path),
        steps_run=result.steps_run,
        stopped_early=result.stopped_early,
        final=schemas.FinalLosses(
            l1=fin.l1,
            focal=fin.focal,
            seg=fin.seg,
            bce_labeled=fin.bce_labeled,
            bce_pseudo=fin.bce_pseudo,
            total=fin.total,
            n_pseudo_used=fin.n_pseudo_used,
            n_pseudo_unknown=fin.n_pseudo_unknown,
        ),
    )


def _write_labeler_csv(
    result: trainer.TrainResult, path: Path, k: int
) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(
            ["refresh_step", "pool_index"]
            + [f"score_{i}" for i in range(k)]
            + ["label"]
        )
        for row in result.labeler_audit:
            writer.writerow(list(row))


def _restore_from_checkpoint(path: str):
    ckpt = checkpoint_mod.load(path)
    rc = config_mod.from_flat(ckpt.config)
    cfg = rc.train_config()
    model, bank, labeler_state = trainer.restore_state(ckpt, cfg)
    return ckpt, rc, cfg, model, bank, labeler_state


def run_eval(req: schemas.EvalRequest) -> schemas.EvalResponse:
    """Score a test split with a trained checkpoint."""
    _, rc_ckpt, cfg, model, bank, _ = _restore_from_checkpoint(req.checkpoint)
    rc_data = config_mod.parse_file(req.config) if req.config else rc_ckpt
    rc_data.require_dataset()
    index = dataio.load_dataset(rc_data.dataset_root, rc_data.category)

    out_dir = Path(req.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    want_heatmaps = (
        req.heatmaps if req.heatmaps is not None else rc_data.eval_heatmaps()
    )
    want_pixel = (
        req.pixel_metrics
        if req.pixel_metrics is not None
        else rc_data.eval_pixel_metrics()
    )
    heatmap_dir = out_dir / "heatmaps" if want_heatmaps else None
    result = evaluation.evaluate(
        model,
        bank,
        index,
        cfg.image_size,
        heatmap_dir=heatmap_dir,
        pixel_metrics=want_pixel,
    )
    scores_csv = out_dir / "scores.csv"
    evaluation.write_records_csv(result, scores_csv)
    n_heatmaps = len(list(heatmap_dir.glob("*.png"))) if heatmap_dir else 0
    return schemas.EvalResponse(
        category=result.category,
        auroc=result.auroc,
        pixel_auroc=result.pixel_auroc,
        n_normal=result.n_normal,
        n_anomalous=result.n_anomalous,
        scores_csv=str(scores_csv),
        heatmap_dir=str(heatmap_dir) if heatmap_dir else None,
        n_heatmaps=n_heatmaps,
    )


def run_ablate(req: schemas.AblateRequest) -> schemas.AblateResponse:
    """Train + evaluate architecture variants and tabulate their AUROCs."""
    if req.which == "all":
        variants = list(ABLATION_VARIANTS)
    elif req.which in ABLATION_VARIANTS:
        variants = [req.which]
    else:
        raise ConfigurationError(
            f"unknown ablation {req.which!r}; expected 'all' or one of "
            f"{ABLATION_VARIANTS}"
        )
    out_dir = Path(req.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    rows: list[schemas.AblateRow] = []
    for variant in variants:
        ckpt_path = out_dir / f"{variant}.ckpt"
        train_resp = run_train(
            schemas.TrainRequest(
                config=req.config,
                out=str(ckpt_path),
                seed=req.seed,
                ablate=variant,
                quiet=req.quiet,
            )
        )
        eval_resp = run_eval(
            schemas.EvalRequest(
                checkpoint=train_resp.checkpoint,
                out_dir=str(out_dir / variant),
                heatmaps=False,
            )
        )
        rows.append(
            schemas.AblateRow(
                variant=variant,
                auroc=eval_resp.auroc,
                steps_run=train_resp.steps_run,
            )
        )
    table = evaluation.results_table([(r.variant, r.auroc) for r in rows])
    csv_path = out_dir / "ablation.csv"
    evaluation.write_results_csv([(r.variant, r.auroc) for r in rows], csv_path)
    return schemas.AblateResponse(rows=rows, table=table, csv=str(csv_path))


def _decode_image_b64(blob: str, image_size: int) -> np.ndarray:
    try:
        raw = base64.b64decode(blob, validate=True)
    except Exception as exc:  # malformed base64
        raise ParameterError(f"invalid base64 image payload: {exc}") from exc
    try:
        with PILImage.open(io.BytesIO(raw)) as im:
            im = im.convert("RGB")
            if im.size != (image_size, image_size):
                im = im.resize((image_size, image_size), PILImage.BILINEAR)
            return np.asarray(im, dtype=np.float32) / 255.0
    except (OSError, ValueError) as exc:
        raise ImageFileError(f"cannot decode image payload: {exc}") from exc


def run_score(req: schemas.ScoreRequest) -> schemas.ScoreResponse:
    """Score a single image with a trained checkpoint."""
    _, _, cfg, model, bank, _ = _restore_from_checkpoint(req.checkpoint)
    if (req.image_path is None) == (req.image_b64 is None):
        raise ParameterError(
            "provide exactly one of image_path or image_b64"
        )
    if req.image_path is not None:
        img = dataio.load_image(req.image_path, cfg.image_size)
    else:
        img = _decode_image_b64(req.image_b64, cfg.image_size)
    seg, image_score, latent_score = model.forward(img, bank)
    heatmap_out = None
    if req.heatmap_out:
        out = Path(req.heatmap_out)
        out.parent.mkdir(parents=True, exist_ok=True)
        dataio.export_heatmap(np.clip(seg, 0.0, 1.0), out)
        heatmap_out = str(out)
    return schemas.ScoreResponse(
        image_score=image_score,
        latent_score=latent_score,
        heatmap_out=heatmap_out,
    )


def run_synth(req: schemas.SynthRequest) -> schemas.SynthResponse:
    """Write the procedural demo corpus."""
    spec = synthetic.CorpusSpec(
        category=req.category,
        size=req.size,
        n_train=req.n_train,
        n_test_normal=req.n_test_normal,
        n_test_anomalous=req.n_test_anomalous,
        seed=req.seed,
    )
    category_dir = synthetic.build_corpus(req.out_dir, spec)
    return schemas.SynthResponse(
        category_dir=str(category_dir),
        texture_dir=str(Path(req.out_dir) / "textures"),
    )
