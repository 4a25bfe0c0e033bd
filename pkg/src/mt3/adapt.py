"""Per-image test-time adaptation and dataset-level evaluation reports."""

from __future__ import annotations

import hashlib
import json
from dataclasses import asdict, dataclass, field
from typing import Mapping, Sequence

import numpy as np

from . import autodiff as ad
from . import augment as aug
from .autodiff import NumericError
from .data import Dataset
from .losses import byol_loss
from .nn import ModelConfig, ParameterSet, classify, forward, to_nchw

REGIMES = ("baseline", "jt", "ttt", "mt", "mt3")
ADAPTING = ("ttt", "mt3")
SHORT_NAMES = {
    "brightness": "brit", "contrast": "contr", "defocus_blur": "defoc",
    "elastic_transform": "elast", "fog": "fog", "frost": "frost", "glass_blur": "glass",
    "gaussian_blur": "gauss", "gaussian-blur": "gauss", "impulse_noise": "impul",
    "impulse-noise": "impul", "jpeg_compression": "jpeg", "motion_blur": "motn",
    "pixelate": "pixel", "shot_noise": "shot", "shot-noise": "shot", "snow": "snow",
    "zoom_blur": "zoom", "gaussian_noise": "gnois", "gaussian-noise": "gnois",
}
# full-scale reference (CIFAR-10-C, severity 5, mean over 15 corruptions, 3 runs)
REFERENCE_RESULTS = {"baseline": (64.5, 0.52), "jt": (74.9, 0.70), "ttt": (74.4, 0.74),
                   "mt": (72.7, 0.57), "mt3": (76.6, 0.33)}


@dataclass(frozen=True)
class AdaptConfig:
    steps: int = 1
    lr: float = 0.1
    batch: int = 32  # augmented pairs per test image
    clip_norm: float | None = 10.0
    seed: int = 0
    track_loss: bool = True

    def __post_init__(self):
        if self.steps < 1 or self.batch < 1:
            raise ValueError("steps and batch must be >= 1")
        if self.lr < 0:
            raise ValueError("lr must be non-negative")

    @classmethod
    def for_regime(cls, regime: str, **overrides) -> "AdaptConfig":
        base = {"lr": 0.01} if regime == "ttt" else {}
        return cls(**{**base, **overrides})


@dataclass
class AdaptTrace:
    loss_before: list = field(default_factory=list)
    loss_after: float | None = None
    grad_norm: list = field(default_factory=list)
    failed: bool = False
    error: str | None = None


def _views(x_test: np.ndarray, rng: np.random.Generator, batch: int,
           sample_cfg: aug.SampleAugConfig) -> tuple[np.ndarray, np.ndarray]:
    a, at = [], []
    for _ in range(batch):
        v1, v2, _ = aug.sample_augment(x_test, rng, sample_cfg)
        a.append(v1)
        at.append(v2)
    return to_nchw(np.stack(a)), to_nchw(np.stack(at))


def _mean_byol(params, va, vb, z, z_t, cfg) -> ad.Tensor:
    r = forward(params, np.concatenate([va, vb]), cfg).r
    k = len(va)
    return ad.reduce_mean(byol_loss(r[:k], r[k:], z, z_t))


def adapt_one(x_test: np.ndarray, theta: ParameterSet, model_cfg: ModelConfig,
              cfg: AdaptConfig = AdaptConfig(), rng: np.random.Generator | None = None,
              sample_cfg: aug.SampleAugConfig = aug.SampleAugConfig()):
    """Adapt ``theta`` to a single (H, W, 3) test image and classify it.

    Runs ``cfg.steps`` plain SGD steps on the mean BYOL loss over
    ``cfg.batch`` augmented pairs, with projections from the frozen
    ``theta``. Returns ``(prediction, phi, trace)``; on a non-finite
    gradient the un-adapted prediction is returned and the trace is flagged.
    """
    if rng is None:
        rng = np.random.default_rng(cfg.seed)
    names = theta.adaptable()
    phi = theta.leaves(requires_grad=False)
    phi = phi.replace({n: ad.Tensor(phi[n].data, requires_grad=True, name=n) for n in names})
    trace = AdaptTrace()
    try:
        for step in range(cfg.steps):
            va, vb = _views(x_test, rng, cfg.batch, sample_cfg)
            k = len(va)
            if step == 0:
                # phi == theta here, so a single pass yields both roles
                out = forward(phi, np.concatenate([va, vb]), model_cfg)
                z = out.z.detach()
                z_a, z_b = z[:k], z[k:]
                loss = ad.reduce_mean(byol_loss(out.r[:k], out.r[k:], z_a, z_b))
            else:
                with ad.no_grad():
                    z = forward(theta, np.concatenate([va, vb]), model_cfg).z
                z_a, z_b = z[:k], z[k:]
                loss = _mean_byol(phi, va, vb, z_a, z_b, model_cfg)
            grads = ad.grad_map(loss, phi, names)
            norm = float(ad.global_norm(grads).data)
            if cfg.clip_norm is not None:
                grads, norm, _ = ad.clip_by_global_norm(grads, cfg.clip_norm)
            with ad.no_grad():
                new = ad.sgd_step(phi, grads, cfg.lr, names)
            if not all(np.all(np.isfinite(new[n].data)) for n in names):
                raise NumericError("adapted parameters are not finite")
            phi = phi.replace({n: ad.Tensor(new[n].data, requires_grad=True, name=n) for n in names})
            trace.loss_before.append(float(loss.data))
            trace.grad_norm.append(norm)
        if cfg.track_loss:
            with ad.no_grad():
                trace.loss_after = float(_mean_byol(phi, va, vb, z_a, z_b, model_cfg).data)
    except NumericError as exc:
        trace.failed, trace.error = True, str(exc)
        phi = theta
    with ad.no_grad():
        logits = classify(phi, to_nchw(x_test[None]), model_cfg)
    pred = int(np.argmax(logits.data[0]))
    return pred, phi.leaves(requires_grad=False), trace


def predict(params: ParameterSet, x_test: np.ndarray, model_cfg: ModelConfig) -> int:
    """Un-adapted class prediction for one (H, W, 3) image."""
    with ad.no_grad():
        logits = classify(params, to_nchw(x_test[None]), model_cfg)
    return int(np.argmax(logits.data[0]))


# ---------------------------------------------------------------------------
# evaluation


def check_regime(regime: str, params: ParameterSet):
    if regime not in REGIMES:
        raise ValueError(f"unknown regime {regime!r}; choose from {REGIMES}")
    needed = {"f", "h"} | ({"p", "q"} if regime in ADAPTING else set())
    missing = sorted(needed - params.present_groups())
    if missing:
        raise ValueError(f"regime {regime!r} needs parameter groups {missing} "
                         f"missing from the checkpoint")


def config_hash(obj) -> str:
    return hashlib.sha256(json.dumps(obj, sort_keys=True, default=str).encode()).hexdigest()[:16]


def evaluate(ds: Dataset, params: ParameterSet, model_cfg: ModelConfig, regime: str,
             cfg: AdaptConfig | None = None, metadata: Mapping | None = None,
             sample_cfg: aug.SampleAugConfig = aug.SampleAugConfig(),
             ids: Sequence[int] | None = None) -> dict:
    """Accuracy of ``regime`` on ``ds``; one record per image.

    Forward-only regimes (baseline, jt, mt) classify each image under the
    checkpoint. ``ttt`` and ``mt3`` adapt from the same frozen checkpoint
    for every image, with augmentation randomness keyed by (seed, id); ``ids``
    default to dataset positions.
    """
    check_regime(regime, params)
    cfg = cfg or AdaptConfig.for_regime(regime)
    records = []
    ids = range(len(ds)) if ids is None else [int(i) for i in ids]
    if len(ids) != len(ds):
        raise ValueError(f"{len(ids)} ids for {len(ds)} images")
    for j, i in enumerate(ids):
        x, y = ds.images[j], int(ds.labels[j])
        pre = predict(params, x, model_cfg)
        rec = {"index": i, "label": y, "pre": pre, "post": pre}
        if regime in ADAPTING:
            rng = np.random.default_rng([cfg.seed, i])
            post, _, trace = adapt_one(x, params, model_cfg, cfg, rng, sample_cfg)
            rec.update(post=post, loss_before=trace.loss_before[0] if trace.loss_before else None,
                       loss_after=trace.loss_after, failed=trace.failed)
        records.append(rec)
    n = max(len(records), 1)
    pre_acc = sum(r["pre"] == r["label"] for r in records) / n
    post_acc = sum(r["post"] == r["label"] for r in records) / n
    meta = {"regime": regime, "dataset": ds.name, "provenance": dict(ds.provenance),
            "adapt_config": asdict(cfg), "config_hash": config_hash(asdict(cfg))}
    meta.update(metadata or {})
    return {"name": ds.name, "regime": regime, "n": len(records),
            "accuracy": post_acc if regime in ADAPTING else pre_acc,
            "pre_accuracy": pre_acc, "post_accuracy": post_acc,
            "records": records, "metadata": meta}


def evaluate_suite(datasets: Mapping[str, Dataset], params: ParameterSet, model_cfg: ModelConfig,
                   regime: str, cfg: AdaptConfig | None = None, clean: Dataset | None = None,
                   metadata: Mapping | None = None) -> dict:
    """Evaluate every corruption plus the average row (clean set if none given)."""
    rows = {name: evaluate(ds, params, model_cfg, regime, cfg, metadata)
            for name, ds in datasets.items()}
    report = {"regime": regime, "corruptions": rows, "metadata": dict(metadata or {})}
    if clean is not None or not rows:
        if clean is None:
            raise ValueError("no corruption datasets and no clean set to evaluate")
        report["clean"] = evaluate(clean, params, model_cfg, regime, cfg, metadata)
    if rows:
        for key in ("accuracy", "pre_accuracy", "post_accuracy"):
            report["avg_" + key] = float(np.mean([r[key] for r in rows.values()]))
    return report


def report_consistent(row: dict) -> bool:
    recs = row["records"]
    if len(recs) != row["n"]:
        return False
    pre = np.mean([r["pre"] == r["label"] for r in recs]) if recs else 0.0
    post = np.mean([r["post"] == r["label"] for r in recs]) if recs else 0.0
    return bool(np.isclose(pre, row["pre_accuracy"]) and np.isclose(post, row["post_accuracy"]))


def render_table(reports: Mapping[str, dict], reference: bool = True) -> str:
    """Plain-text table: one row per corruption, one column per regime, avg last."""
    regimes = list(reports)
    names = []
    for rep in reports.values():
        for n in rep.get("corruptions", {}):
            if n not in names:
                names.append(n)
    head = f"{'':8s}" + "".join(f"{r:>9s}" for r in regimes)
    lines = [head, "-" * len(head)]
    for n in names:
        cells = []
        for r in regimes:
            row = reports[r].get("corruptions", {}).get(n)
            cells.append(f"{100 * row['accuracy']:9.1f}" if row else f"{'-':>9s}")
        lines.append(f"{SHORT_NAMES.get(n, n)[:8]:8s}" + "".join(cells))
    if any("clean" in rep for rep in reports.values()):
        cells = [f"{100 * reports[r]['clean']['accuracy']:9.1f}" if "clean" in reports[r]
                 else f"{'-':>9s}" for r in regimes]
        lines.append(f"{'clean':8s}" + "".join(cells))
    if names:
        lines.append("-" * len(head))
        cells = [f"{100 * reports[r]['avg_accuracy']:9.1f}" if "avg_accuracy" in reports[r]
                 else f"{'-':>9s}" for r in regimes]
        lines.append(f"{'avg.':8s}" + "".join(cells))
    if reference:
        refs = ", ".join(f"{r} {m} +- {s}" for r, (m, s) in REFERENCE_RESULTS.items())
        lines.append("")
        lines.append(f"full-scale CIFAR-10-C severity-5 reference avg.: {refs}")
    return "\n".join(lines)


def plot_series(report: dict) -> dict[str, str]:
    """CSV strings for external plotting: per-image adaptation losses and the
    pre/post accuracy bars per corruption."""
    loss_rows = ["corruption,index,loss_before,loss_after"]
    bar_rows = ["corruption,pre_accuracy,post_accuracy"]
    for name, row in report.get("corruptions", {}).items():
        bar_rows.append(f"{name},{row['pre_accuracy']:.6f},{row['post_accuracy']:.6f}")
        for r in row["records"]:
            if r.get("loss_before") is not None:
                loss_rows.append(f"{name},{r['index']},{r['loss_before']:.8g},{r['loss_after']:.8g}")
    return {"adapt_loss.csv": "\n".join(loss_rows) + "\n",
            "accuracy_bars.csv": "\n".join(bar_rows) + "\n"}
