"""Downstream classification/segmentation experiments on real, synthetic and hybrid data.

Every run uses stratified k-fold splits of the real manifest. The held-out
fold is always real data; the training side is built per condition:

* ``real``: the real training folds
* ``synth``: synthetic records, as many as the real training folds hold
* ``hybrid``: half real, half synthetic at that same total

Architectures come from a registry so desk-scale reference models and
full-size backbones share one code path.
"""

from __future__ import annotations

import logging
from dataclasses import asdict, dataclass, field, replace
from typing import Callable, Mapping, Optional, Sequence

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from .data import (
    AugmentationConfig,
    DatasetManifest,
    assemble_hybrid,
    augment_pair,
    augment_seed,
    resize_sample,
    stratified_kfold,
)
from .metrics.classification import classification_report, confusion_matrix
from .metrics.report import MetricReport, ReportError, key_columns, metric_columns, render_markdown
from .metrics.segmentation import MaskPair, segmentation_scores
from .train import MaskPrediction, dice_loss

log = logging.getLogger(__name__)

CONDITIONS = ("real", "synth", "hybrid")
TABLE2_LABELS = {"real": "Real only", "synth": "Synth only", "hybrid": "50%Real+50%Synth"}
TABLE3_LABELS = {"real": "Real", "synth": "Synth", "hybrid": "Hybrid"}


class HarnessConfigError(ValueError):
    pass


class LabelMappingError(ValueError):
    def __init__(self, unmapped: Sequence[str]):
        super().__init__(f"external categories have no mapping onto the training labels: {sorted(unmapped)}")
        self.unmapped = sorted(unmapped)


class LeakageError(RuntimeError):
    pass


# ---------------------------------------------------------------- registry


class ArchitectureRegistry:
    """name -> (task, constructor(n_out, input_size) -> nn.Module)."""

    def __init__(self):
        self._entries: dict[str, tuple[str, Callable[[int, int], nn.Module]]] = {}

    def register(self, name: str, task: str, ctor: Callable[[int, int], nn.Module]) -> None:
        if task not in ("classification", "segmentation"):
            raise ValueError(f"unknown task {task!r}")
        self._entries[name] = (task, ctor)

    def __contains__(self, name: str) -> bool:
        return name in self._entries

    def names(self, task: Optional[str] = None) -> list[str]:
        return sorted(n for n, (t, _) in self._entries.items() if task is None or t == task)

    def build(self, name: str, task: str, n_out: int, input_size: int) -> nn.Module:
        if name not in self._entries:
            raise HarnessConfigError(f"unknown architecture {name!r}; registered: {self.names(task)}")
        t, ctor = self._entries[name]
        if t != task:
            raise HarnessConfigError(f"architecture {name!r} is a {t} model, not {task}")
        return ctor(n_out, input_size)


class TinyCNN(nn.Module):
    """Small reference classifier: three conv stages and a linear head."""

    def __init__(self, n_classes: int, width: int = 16):
        super().__init__()
        chans = [3, width, 2 * width, 4 * width]
        layers = []
        for a, b in zip(chans[:-1], chans[1:]):
            layers += [nn.Conv2d(a, b, 3, padding=1), nn.BatchNorm2d(b), nn.ReLU(inplace=True), nn.MaxPool2d(2)]
        self.features = nn.Sequential(*layers)
        self.head = nn.Linear(chans[-1], n_classes)

    def forward(self, x):
        return self.head(self.features(x).mean(dim=(2, 3)))


def _block(a: int, b: int) -> nn.Sequential:
    return nn.Sequential(
        nn.Conv2d(a, b, 3, padding=1), nn.BatchNorm2d(b), nn.ReLU(inplace=True),
        nn.Conv2d(b, b, 3, padding=1), nn.BatchNorm2d(b), nn.ReLU(inplace=True),
    )


class TinyEncoderDecoder(nn.Module):
    """Two-level U-shaped segmenter returning (N, 1, H, W) mask logits."""

    def __init__(self, n_out: int = 1, width: int = 16):
        super().__init__()
        self.enc1 = _block(3, width)
        self.enc2 = _block(width, 2 * width)
        self.mid = _block(2 * width, 4 * width)
        self.up2 = nn.ConvTranspose2d(4 * width, 2 * width, 2, stride=2)
        self.dec2 = _block(4 * width, 2 * width)
        self.up1 = nn.ConvTranspose2d(2 * width, width, 2, stride=2)
        self.dec1 = _block(2 * width, width)
        self.out = nn.Conv2d(width, n_out, 1)

    def forward(self, x):
        e1 = self.enc1(x)
        e2 = self.enc2(F.max_pool2d(e1, 2))
        m = self.mid(F.max_pool2d(e2, 2))
        d2 = self.dec2(torch.cat([self.up2(m), e2], dim=1))
        d1 = self.dec1(torch.cat([self.up1(d2), e1], dim=1))
        return self.out(d1)


def _torchvision(name: str):
    def ctor(n_out: int, input_size: int) -> nn.Module:
        try:
            import torchvision.models as tvm
        except ImportError as exc:
            raise HarnessConfigError(f"{name} needs torchvision") from exc
        return getattr(tvm, name)(num_classes=n_out)

    return ctor


def default_registry() -> ArchitectureRegistry:
    reg = ArchitectureRegistry()
    reg.register("tiny-cnn", "classification", lambda n, s: TinyCNN(n))
    reg.register("tiny-unet", "segmentation", lambda n, s: TinyEncoderDecoder(1))
    for name in ("densenet121", "resnet34", "squeezenet1_1", "swin_t"):
        reg.register(name, "classification", _torchvision(name))
    return reg


REGISTRY = default_registry()


# ------------------------------------------------------------------ config

_TASK_DEFAULTS = {
    "classification": dict(input_size=224, batch_size=32, epochs=50, lr=1e-4),
    "segmentation": dict(input_size=512, batch_size=8, epochs=20, lr=1e-3),
}


@dataclass(frozen=True)
class ExperimentConfig:
    task: str
    architecture: str
    condition: str = "real"
    input_size: int = 224
    batch_size: int = 32
    epochs: int = 50
    lr: float = 1e-4
    folds: int = 5
    seed: int = 0
    augment: bool = True
    # optional fixed normalization; None means train-split mean/std
    mean: Optional[tuple[float, float, float]] = None
    std: Optional[tuple[float, float, float]] = None

    def __post_init__(self):
        if self.task not in _TASK_DEFAULTS:
            raise HarnessConfigError(f"task must be classification or segmentation, got {self.task!r}")
        if self.condition not in CONDITIONS:
            raise HarnessConfigError(f"condition must be one of {CONDITIONS}, got {self.condition!r}")
        for k in ("input_size", "batch_size", "epochs", "folds"):
            if getattr(self, k) < 1:
                raise HarnessConfigError(f"{k} must be positive")
        if self.folds < 2:
            raise HarnessConfigError("folds must be at least 2")
        if self.lr <= 0:
            raise HarnessConfigError("lr must be positive")

    @classmethod
    def for_task(cls, task: str, architecture: str, **overrides) -> "ExperimentConfig":
        """Task defaults (224/32/50/1e-4 for classification, 512/8/20/1e-3 for segmentation)."""
        if task not in _TASK_DEFAULTS:
            raise HarnessConfigError(f"unknown task {task!r}")
        return cls(task=task, architecture=architecture, **{**_TASK_DEFAULTS[task], **overrides})

    def to_dict(self) -> dict:
        return asdict(self)


# ---------------------------------------------------------------- datasets


def training_manifest(
    condition: str, real_train: DatasetManifest, synth: Optional[DatasetManifest], seed: int
) -> DatasetManifest:
    total = len(real_train)
    if condition == "real":
        return real_train
    if synth is None or len(synth) == 0:
        raise HarnessConfigError(f"condition {condition!r} needs a synthetic manifest")
    frac = 0.0 if condition == "synth" else 0.5
    return assemble_hybrid(real_train, synth, frac, total, seed)


def audit_leakage(train: DatasetManifest, test: DatasetManifest) -> set:
    """Identifiers present in both splits; must be empty."""
    return set(train.ids()) & set(test.ids())


@dataclass
class ArrayData:
    x: np.ndarray  # (N, 3, S, S) float32 in [0, 1]
    mask: np.ndarray  # (N, S, S) uint8
    y: np.ndarray  # (N,) int64
    ids: list


def load_arrays(m: DatasetManifest, size: int, label_index: Optional[Mapping[str, int]] = None) -> ArrayData:
    index = label_index or {c: i for i, c in enumerate(m.label_set)}
    xs, ms, ys = [], [], []
    for i in range(len(m)):
        s = m.load_sample(i)
        if s.size != (size, size):
            s = resize_sample(s, (size, size))
        xs.append(s.rgb.transpose(2, 0, 1))
        ms.append(s.mask)
        ys.append(index[m.records[i].category])
    return ArrayData(np.stack(xs).astype(np.float32), np.stack(ms).astype(np.uint8), np.asarray(ys, np.int64), m.ids())


def _augment_all(d: ArrayData, seed: int, epoch: int, cfg: AugmentationConfig) -> tuple[np.ndarray, np.ndarray]:
    from .data import FourChannelSample

    xs, ms = [], []
    for i in range(len(d.y)):
        s = augment_pair(FourChannelSample(d.x[i].transpose(1, 2, 0), d.mask[i]), cfg, augment_seed(seed, epoch, i))
        xs.append(s.rgb.transpose(2, 0, 1))
        ms.append(s.mask)
    return np.stack(xs), np.stack(ms)


@dataclass
class TrainedModel:
    model: nn.Module
    mean: np.ndarray
    std: np.ndarray
    label_set: tuple
    task: str
    fold: int = 0


def _normalize(x: np.ndarray, mean, std) -> torch.Tensor:
    return torch.from_numpy((x - np.asarray(mean, np.float32)[:, None, None]) / np.asarray(std, np.float32)[:, None, None])


def _fit(cfg: ExperimentConfig, d: ArrayData, n_classes: int, fold: int, label_set, registry) -> TrainedModel:
    torch.manual_seed(cfg.seed * 1000 + fold)
    n_out = n_classes if cfg.task == "classification" else 1
    model = registry.build(cfg.architecture, cfg.task, n_out, cfg.input_size)
    if cfg.mean is not None and cfg.std is not None:
        mean, std = np.asarray(cfg.mean, np.float32), np.asarray(cfg.std, np.float32)
    else:
        mean = d.x.mean(axis=(0, 2, 3)).astype(np.float32)
        std = np.maximum(d.x.std(axis=(0, 2, 3)), 1e-3).astype(np.float32)
    opt = torch.optim.Adam(model.parameters(), lr=cfg.lr)
    aug = AugmentationConfig.default_training()
    n = len(d.y)
    model.train()
    for epoch in range(cfg.epochs):
        x, mk = _augment_all(d, cfg.seed + fold, epoch, aug) if cfg.augment else (d.x, d.mask)
        order = np.random.default_rng([cfg.seed, fold, epoch]).permutation(n)
        for s in range(0, n, cfg.batch_size):
            idx = order[s : s + cfg.batch_size]
            if len(idx) < 2 and n >= 2:
                continue  # batch norm needs more than one sample
            xb = _normalize(x[idx], mean, std)
            out = model(xb)
            if cfg.task == "classification":
                loss = F.cross_entropy(out, torch.from_numpy(d.y[idx]))
            else:
                target = torch.from_numpy(mk[idx].astype(np.float32))
                loss = dice_loss(MaskPrediction(out[:, 0], target))
            opt.zero_grad()
            loss.backward()
            opt.step()
    model.eval()
    return TrainedModel(model, mean, std, tuple(label_set), cfg.task, fold)


@torch.no_grad()
def _predict(tm: TrainedModel, x: np.ndarray, batch: int = 64) -> np.ndarray:
    outs = [tm.model(_normalize(x[s : s + batch], tm.mean, tm.std)) for s in range(0, len(x), batch)]
    out = torch.cat(outs).numpy()
    if tm.task == "classification":
        return out.argmax(axis=1)
    return (out[:, 0] >= 0).astype(np.uint8)


def evaluate_classifier(tm: TrainedModel, d: ArrayData) -> dict:
    cm = confusion_matrix(_predict(tm, d.x), d.y, len(tm.label_set))
    return classification_report(cm)


def evaluate_segmenter(tm: TrainedModel, d: ArrayData) -> dict:
    preds = _predict(tm, d.x)
    scores = [segmentation_scores(MaskPair(p, t)) for p, t in zip(preds, d.mask)]
    out = {"dice": float(np.mean([s["dice"] for s in scores])), "iou": float(np.mean([s["iou"] for s in scores]))}
    for k in ("asd", "hd"):
        vals = [s[k] for s in scores if s[k] is not None]
        out[k] = float(np.mean(vals)) if vals else None
        out[f"{k}_undefined"] = len(scores) - len(vals)
    return out


# ------------------------------------------------------------------- runs

_CLS_METRICS = {"Accuracy": "accuracy", "Sensitivity": "sensitivity", "Precision": "precision", "F1score": "f1"}
_SEG_METRICS = {"Dice": "dice", "IoU": "iou", "ASD": "asd", "HD": "hd"}
# ratios are reported as percentages, distances in pixels
_PERCENT = {"accuracy", "sensitivity", "precision", "f1", "dice", "iou"}


@dataclass
class ExperimentResult:
    report: MetricReport
    models: list[TrainedModel]
    fold_metrics: list[dict]
    folds: list[tuple[DatasetManifest, DatasetManifest]] = field(default_factory=list)


def _aggregate(fold_metrics: list[dict], names: Mapping[str, str]) -> tuple[dict, dict, dict]:
    means, stds, undefined = {}, {}, {}
    for col, key in names.items():
        vals = [fm[key] for fm in fold_metrics if fm.get(key) is not None]
        scale = 100.0 if key in _PERCENT else 1.0
        means[col] = float(np.mean(vals)) * scale if vals else None
        stds[col] = float(np.std(vals)) * scale if vals else None
        n_undef = sum(fm.get(f"{key}_undefined", 0) for fm in fold_metrics)
        if n_undef:
            undefined[col] = int(n_undef)
    return means, stds, undefined


def _run(cfg: ExperimentConfig, manifests: Mapping[str, DatasetManifest], registry) -> ExperimentResult:
    if cfg.architecture not in registry:
        raise HarnessConfigError(f"unknown architecture {cfg.architecture!r}")
    real = manifests.get("real")
    if real is None or len(real) == 0:
        raise HarnessConfigError("a real manifest is required; test folds are always real")
    synth = manifests.get("synth")
    label_set = real.label_set
    index = {c: i for i, c in enumerate(label_set)}
    folds = stratified_kfold(real, cfg.folds, cfg.seed)
    models, fold_metrics, splits = [], [], []
    for f, (real_train, test) in enumerate(folds):
        train = training_manifest(cfg.condition, real_train, synth, cfg.seed + f)
        leaked = audit_leakage(train, test)
        if leaked:
            raise LeakageError(f"fold {f}: {len(leaked)} test identifiers appear in training data")
        if any(r.source != "real" for r in test.records):
            raise LeakageError(f"fold {f}: test split contains synthetic records")
        d_train = load_arrays(train, cfg.input_size, index)
        d_test = load_arrays(test, cfg.input_size, index)
        tm = _fit(cfg, d_train, len(label_set), f, label_set, registry)
        fm = evaluate_classifier(tm, d_test) if cfg.task == "classification" else evaluate_segmenter(tm, d_test)
        fm["n_train"], fm["n_test"] = len(train), len(test)
        log.info("%s/%s fold %d: %s", cfg.architecture, cfg.condition, f, {k: v for k, v in fm.items() if k != "per_class"})
        models.append(tm)
        fold_metrics.append(fm)
        splits.append((train, test))
    names = _CLS_METRICS if cfg.task == "classification" else _SEG_METRICS
    means, stds, undefined = _aggregate(fold_metrics, names)
    kind = "table2_cls" if cfg.task == "classification" else "table2_seg"
    row = {"Models": cfg.architecture, "Train Dataset": TABLE2_LABELS[cfg.condition], **means}
    report = MetricReport(
        kind,
        [row],
        datasets={k: {"n": len(v), "label_set": list(v.label_set)} for k, v in manifests.items() if v is not None},
        config=cfg.to_dict(),
        extra={"std": stds, "folds": [{k: v for k, v in fm.items() if k != "per_class"} for fm in fold_metrics]},
        undefined=undefined,
    )
    return ExperimentResult(report, models, fold_metrics, splits)


def run_classification(cfg: ExperimentConfig, manifests: Mapping[str, DatasetManifest], registry=None) -> ExperimentResult:
    """k-fold training and evaluation; ``result.report`` has one table2 row."""
    if cfg.task != "classification":
        raise HarnessConfigError("run_classification needs a classification config")
    return _run(cfg, manifests, registry or REGISTRY)


def run_segmentation(cfg: ExperimentConfig, manifests: Mapping[str, DatasetManifest], registry=None) -> ExperimentResult:
    """k-fold Dice-loss training; ASD/HD of empty predictions are counted, not averaged."""
    if cfg.task != "segmentation":
        raise HarnessConfigError("run_segmentation needs a segmentation config")
    return _run(cfg, manifests, registry or REGISTRY)


def map_labels(external: DatasetManifest, label_set: Sequence[str], mapping: Optional[Mapping[str, str]] = None) -> DatasetManifest:
    """Rewrite external categories onto the training label set."""
    mapping = dict(mapping) if mapping is not None else {c: c for c in external.label_set}
    present = {r.category for r in external.records}
    unmapped = [c for c in present if mapping.get(c) not in set(label_set)]
    if unmapped:
        raise LabelMappingError(unmapped)
    records = tuple(replace(r, category=mapping[r.category]) for r in external.records)
    return DatasetManifest(records, tuple(label_set), external.root)


def run_robustness(
    cfg: ExperimentConfig,
    external: DatasetManifest,
    trained: ExperimentResult | Sequence[TrainedModel],
    mapping: Optional[Mapping[str, str]] = None,
) -> MetricReport:
    """Evaluate already-trained fold models on an external set; one table3 row."""
    models = trained.models if isinstance(trained, ExperimentResult) else list(trained)
    if not models:
        raise HarnessConfigError("no trained models to evaluate")
    label_set = models[0].label_set
    ext = map_labels(external, label_set, mapping)
    d = load_arrays(ext, cfg.input_size, {c: i for i, c in enumerate(label_set)})
    if cfg.task == "classification":
        fold_metrics = [evaluate_classifier(tm, d) for tm in models]
        means, stds, undefined = _aggregate(fold_metrics, _CLS_METRICS)
        kind = "table3_cls"
    else:
        fold_metrics = [evaluate_segmenter(tm, d) for tm in models]
        means, stds, undefined = _aggregate(fold_metrics, {"Dice": "dice", "IoU": "iou"})
        kind = "table3_seg"
    row = {"Models": cfg.architecture, "Dataset": TABLE3_LABELS[cfg.condition], **means}
    return MetricReport(
        kind,
        [row],
        datasets={"external": {"n": len(ext), "root": str(ext.root)}},
        config=cfg.to_dict(),
        extra={"std": stds, "models": len(models)},
        undefined=undefined,
    )


# -------------------------------------------------------------- comparison


@dataclass
class Comparison:
    report: MetricReport
    deltas: list[dict]
    baseline: str

    def render(self) -> str:
        """Markdown table with the best condition per metric in bold, then deltas."""
        metrics = metric_columns(self.report.kind)
        key = key_columns(self.report.kind)
        lines = [render_markdown(self.report), "", f"Deltas vs {self.baseline}:", ""]
        lines.append("| " + " | ".join((*key, *metrics)) + " |")
        lines.append("|" + "|".join("---" for _ in (*key, *metrics)) + "|")
        for d in self.deltas:
            cells = [str(d[k]) for k in key] + ["n/a" if d[m] is None else f"{d[m]:+.3f}" for m in metrics]
            lines.append("| " + " | ".join(cells) + " |")
        return "\n".join(lines)


def compare_conditions(reports: Sequence[MetricReport], baseline: Optional[str] = None) -> Comparison:
    """Stack same-kind reports and compute per-metric deltas.

    Rows are compared against the baseline condition of the same model
    (the first row of each model group when ``baseline`` is None).
    """
    if len(reports) < 2:
        raise ValueError("need at least two reports to compare")
    kind = reports[0].kind
    if any(r.kind != kind for r in reports):
        raise ValueError("reports have different metric sets")
    keys = key_columns(kind)
    metrics = metric_columns(kind)
    rows = [row for r in reports for row in r.rows]
    model_col, cond_col = (keys[0], keys[1]) if len(keys) == 2 else (None, keys[0])
    groups: dict = {}
    for row in rows:
        groups.setdefault(row[model_col] if model_col else "", []).append(row)
    deltas = []
    base_name = baseline
    for g, grows in groups.items():
        base = next((r for r in grows if baseline is None or r[cond_col] == baseline), None)
        if base is None:
            raise ValueError(f"baseline condition {baseline!r} missing for {g!r}")
        base_name = base_name or base[cond_col]
        for r in grows:
            d = {k: r[k] for k in keys}
            for m in metrics:
                d[m] = None if r[m] is None or base[m] is None else float(r[m]) - float(base[m])
            deltas.append(d)
    try:
        merged = MetricReport(kind, rows, config=reports[0].config, extra={"n_reports": len(reports)})
    except ReportError as exc:
        raise ValueError(str(exc)) from None
    return Comparison(merged, deltas, str(base_name))
