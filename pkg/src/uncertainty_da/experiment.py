"""Config-driven experiments: datasets, training with per-epoch metrics,
evaluation of checkpoints and feature export."""
from __future__ import annotations

import csv
import logging
from pathlib import Path

import numpy as np

from .adaptation import summarize
from .config import ExperimentConfig
from .data import (
    DataError,
    DomainDataset,
    ShiftSpec,
    apply_shift,
    gen_blobs,
    gen_two_moons,
    load_idx,
    read_dataset_csv,
    write_dataset_csv,
)
from .estimator import UncertaintyDomainAdapter
from .models import check_specs, default_specs
from .rng import stream_seed

log = logging.getLogger(__name__)

METRICS_COLUMNS = (
    "epoch", "l_c", "l_adv", "l_u", "lambda_adv", "source_mean_u", "target_mean_u",
    "source_acc", "target_acc", "survivor_frac_s", "survivor_frac_t",
)
EVAL_COLUMNS = ("domain", "n", "accuracy", "mean_uncertainty")
CHECKPOINT_NAME = "model.ckpt"
METRICS_NAME = "metrics.csv"


def shift_spec(cfg: ExperimentConfig) -> ShiftSpec:
    return ShiftSpec(
        rotation_deg=cfg["dataset.rotation_deg"],
        translation=cfg["dataset.translation"],
        noise_sigma=cfg["dataset.target_noise"],
        dropped_classes=cfg["dataset.dropped_classes"],
        extra_noise_classes=cfg["dataset.extra_noise_classes"],
        class_prior=cfg["dataset.class_prior"],
    )


def build_domains(cfg: ExperimentConfig) -> tuple[DomainDataset, DomainDataset]:
    """Source and target datasets described by the ``dataset`` block.

    Generated data draws from the ``data-gen`` stream of ``train.seed``.  The
    target is the same generator draw passed through the shift, so an identity
    shift with equal sizes reproduces the source exactly.
    """
    kind = cfg["dataset.kind"]
    seed = cfg["train.seed"]
    if kind in ("two_moons", "blobs"):
        gen_seed = stream_seed(seed, "data-gen")
        if kind == "two_moons":
            source = gen_two_moons(cfg["dataset.n_source"], cfg["dataset.noise"], gen_seed)
            base = gen_two_moons(cfg["dataset.n_target"], cfg["dataset.noise"], gen_seed)
        else:
            args = (cfg["dataset.n_classes"], cfg["dataset.dim"], cfg["dataset.separation"])
            source = gen_blobs(cfg["dataset.n_source"], *args, seed=gen_seed)
            base = gen_blobs(cfg["dataset.n_target"], *args, seed=gen_seed)
        target = apply_shift(base, shift_spec(cfg), stream_seed(seed, "data-gen/shift"))
        return source, target.as_domain("target")
    if kind == "csv":
        parts = read_dataset_csv(cfg.path("dataset.source_csv"))
        if cfg["dataset.target_csv"] is not None:
            parts += read_dataset_csv(cfg.path("dataset.target_csv"))
        by_domain = {p.domain: p for p in parts}
        if set(by_domain) != {"source", "target"}:
            raise DataError("CSV input must provide both source and target rows")
        c = max(p.n_classes for p in parts)
        return tuple(DomainDataset(p.features, p.labels, p.domain, c)
                     for p in (by_domain["source"], by_domain["target"]))
    source = load_idx(cfg.path("dataset.source_images"), cfg.path("dataset.source_labels"),
                      cfg["dataset.source_limit"], "source")
    target = load_idx(cfg.path("dataset.target_images"), cfg.path("dataset.target_labels"),
                      cfg["dataset.target_limit"], "target")
    return source, target


def make_estimator(cfg: ExperimentConfig) -> UncertaintyDomainAdapter:
    m = cfg.section("method")
    t = cfg.section("train")
    return UncertaintyDomainAdapter(
        mode=m["mode"],
        uncertainty_metric=m["uncertainty_metric"],
        n_mc_passes=m["T"],
        temperature=m["tau"],
        classifier_temperature=m["tau_c"],
        uncertainty_threshold=m["t_u"],
        gamma=m["gamma"],
        lambda_u_ratio=m["lambda_u_ratio"],
        discrepancy_q=m["discrepancy_q"],
        lu_through_classifier=m["lu_through_classifier"],
        dropout_p=cfg["model.dropout_p"],
        feature_layers=cfg["model.feature_layers"],
        discriminator_layers=cfg["model.discriminator_layers"],
        discriminator_dropout=cfg["model.discriminator_dropout"],
        epochs=t["epochs"],
        batch_size=t["batch_size"],
        learning_rate=t["lr"],
        momentum=t["momentum"],
        weight_decay=t["weight_decay"],
        random_state=t["seed"],
        standardize=cfg.standardize,
    )


def _write_csv(path, columns, rows) -> None:
    with open(path, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(columns)
        for row in rows:
            w.writerow([_fmt(v) for v in row])


def _fmt(v):
    if isinstance(v, (float, np.floating)):
        return repr(float(v))
    return v


def domain_metrics(est: UncertaintyDomainAdapter, source: DomainDataset,
                   target: DomainDataset) -> dict:
    """MC accuracy and mean uncertainty on both full domains."""
    return {"source": est.evaluate(source.features, source.labels),
            "target": est.evaluate(target.features, target.labels)}


def run_train(cfg: ExperimentConfig, out_dir) -> dict:
    """Train, writing ``metrics.csv`` (one row per epoch) and ``model.ckpt``.

    Target labels are used for reporting only.  Returns the final row.
    """
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    source, target = build_domains(cfg)
    est = make_estimator(cfg)
    rows = []

    def record(epoch, reports):
        s = summarize(reports)
        dm = domain_metrics(est, source, target)
        row = {
            "epoch": epoch + 1,
            "l_c": s["l_c"],
            "l_adv": s["l_adv"],
            "l_u": s["l_u"],
            "lambda_adv": s["lambda_adv"],
            "source_mean_u": dm["source"]["mean_uncertainty"],
            "target_mean_u": dm["target"]["mean_uncertainty"],
            "source_acc": dm["source"]["accuracy"],
            "target_acc": dm["target"]["accuracy"],
            "survivor_frac_s": s["survivor_frac_s"],
            "survivor_frac_t": s["survivor_frac_t"],
        }
        rows.append(row)
        log.info("epoch %d  l_c=%.4f  target_acc=%.4f  gap_u=%.4f", epoch + 1, row["l_c"],
                 row["target_acc"], abs(row["source_mean_u"] - row["target_mean_u"]))

    n_classes = max(source.n_classes, target.n_classes)
    train_target = target.features if cfg["method.mode"] != "source_only" else None
    est.fit(source.features, source.labels, train_target, epoch_callback=record,
            n_classes=n_classes)
    _write_csv(out / METRICS_NAME, METRICS_COLUMNS,
               ([r[c] for c in METRICS_COLUMNS] for r in rows))
    est.save(out / CHECKPOINT_NAME, meta={"config": cfg.to_text()})
    return rows[-1]


def load_checked(checkpoint, cfg: ExperimentConfig, source: DomainDataset,
                 target: DomainDataset) -> UncertaintyDomainAdapter:
    """Load a checkpoint and verify its networks match what ``cfg`` describes."""
    est = UncertaintyDomainAdapter.load(checkpoint)
    ref = make_estimator(cfg)
    n_classes = max(source.n_classes, target.n_classes)
    expected = default_specs(source.dim, n_classes, ref.uncertainty_dim(n_classes),
                             ref.feature_layers, ref.discriminator_layers, ref.dropout_p,
                             ref.discriminator_dropout)
    check_specs(expected, est.bundle_.specs)
    # evaluation settings follow the config, the trained weights the checkpoint
    est.set_params(n_mc_passes=ref.n_mc_passes, temperature=ref.temperature,
                   uncertainty_metric=ref.uncertainty_metric)
    return est


def run_eval(checkpoint, cfg: ExperimentConfig, out_path=None) -> dict:
    source, target = build_domains(cfg)
    est = load_checked(checkpoint, cfg, source, target)
    dm = domain_metrics(est, source, target)
    if out_path is not None:
        n_classes = len(est.classes_)
        cols = EVAL_COLUMNS + tuple(f"acc_class_{c}" for c in range(n_classes))
        rows = []
        for name, m in dm.items():
            per = m["per_class_accuracy"]
            rows.append([name, m["n"], m["accuracy"], m["mean_uncertainty"],
                         *(per.get(c, "") for c in range(n_classes))])
        _write_csv(out_path, cols, rows)
    return dm


def export_features(checkpoint, cfg: ExperimentConfig, out_path) -> int:
    """Dropout-free features plus label, domain and MC uncertainty per row."""
    source, target = build_domains(cfg)
    est = load_checked(checkpoint, cfg, source, target)
    rows = []
    for ds in (source, target):
        feats = est.transform(ds.features)
        u = est.predict_uncertainty(ds.features)
        labels = ds.labels if ds.labels is not None else np.full(len(ds), -1)
        for f, y, ui in zip(feats, labels, u):
            rows.append([*map(float, f), int(y), ds.domain, float(ui)])
    cols = [f"f{i}" for i in range(len(rows[0]) - 3)] + ["label", "domain", "uncertainty"]
    _write_csv(out_path, cols, rows)
    return len(rows)


def make_synthetic(cfg: ExperimentConfig, out_dir) -> tuple[Path, Path]:
    """Write ``source.csv`` and ``target.csv`` for the configured generator."""
    if cfg["dataset.kind"] not in ("two_moons", "blobs"):
        raise DataError("make-synthetic needs dataset.kind = two_moons or blobs")
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    source, target = build_domains(cfg)
    paths = out / "source.csv", out / "target.csv"
    write_dataset_csv(paths[0], [source])
    write_dataset_csv(paths[1], [target])
    return paths
