"""End-to-end workflows: identification, exclude-and-retrain, data debugging.

Every random draw comes from a stream derived from the config's root seed and
a stage name (see :mod:`dyndetect.seeding`), so a run is a pure function of
its config.
"""

from __future__ import annotations

import contextlib
import csv
import json
import logging
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from dyndetect.detector import (
    FINETUNE_LR,
    DetectorModel,
    DetectorTrainConfig,
    baseline_score,
    fine_tune,
    score,
    train_detector,
)
from dyndetect.dynamics import DynamicsTable, LabeledDataset, read_dataset, read_dynamics, write_dataset, write_dynamics
from dyndetect.errors import ConfigError, InvalidArgumentError
from dyndetect.metrics import EvalReport, evaluate, reports_to_csv
from dyndetect.noise import NoiseSpec, contaminate_twice, inject
from dyndetect.reftrain import ClassifierModel, TrainConfig, evaluate_classifier, make_blobs, train_classifier
from dyndetect.seeding import derive_seed

log = logging.getLogger(__name__)


# -------------------------------------------------------------------------- config


@dataclass
class BlobSpec:
    num_classes: int = 10
    per_class: int = 200
    dim: int = 16
    separation: float = 4.0
    label_overlap_fraction: float = 0.0


@dataclass
class RunSpec:
    """One dataset, its noise, and the reference training that yields its dynamics.

    Either ``blobs`` (synthesize and train) or ``dynamics`` (path to an
    existing dynamics file) must be set.
    """

    blobs: BlobSpec | None = field(default_factory=BlobSpec)
    noise: dict | None = field(default_factory=lambda: {"kind": "symmetric", "ratio": 0.3})
    underlying: dict | None = None
    train: TrainConfig = field(default_factory=TrainConfig)
    dynamics: str | None = None

    @classmethod
    def from_dict(cls, d: dict) -> "RunSpec":
        blobs = d.get("blobs", {} if "dynamics" not in d else None)
        return cls(
            blobs=None if blobs is None else BlobSpec(**blobs),
            noise=d.get("noise", {"kind": "symmetric", "ratio": 0.3}),
            underlying=d.get("underlying"),
            train=TrainConfig.from_dict(d.get("train", {})),
            dynamics=d.get("dynamics"),
        )

    def to_dict(self) -> dict:
        d = {
            "blobs": None if self.blobs is None else asdict(self.blobs),
            "noise": self.noise,
            "underlying": self.underlying,
            "train": self.train.to_dict(),
            "dynamics": self.dynamics,
        }
        return {k: v for k, v in d.items() if v is not None}


@dataclass
class DebugPlan:
    fraction: float = 0.1
    correction_mode: str = "oracle"

    def __post_init__(self):
        if not 0.0 < self.fraction <= 1.0:
            raise ConfigError("debug fraction must be in (0, 1]")
        if self.correction_mode not in ("oracle", "pseudo_label"):
            raise ConfigError("correction_mode must be 'oracle' or 'pseudo_label'")


@dataclass
class PipelineConfig:
    seed: int = 0
    source: RunSpec = field(default_factory=RunSpec)
    target: RunSpec = field(default_factory=lambda: RunSpec(noise={"kind": "symmetric", "ratio": 0.4}))
    detector: DetectorTrainConfig = field(default_factory=DetectorTrainConfig)
    detector_path: str | None = None
    finetune: bool = False
    finetune_config: DetectorTrainConfig = field(default_factory=lambda: DetectorTrainConfig(learning_rate=FINETUNE_LR))
    threshold: float = 0.5
    top_k_percent: float | None = None
    debug: DebugPlan = field(default_factory=DebugPlan)
    out: str = "runs/default"

    def __post_init__(self):
        self.validate()

    def validate(self) -> None:
        for role in ("source", "target"):
            spec = getattr(self, role)
            if spec.blobs is None and spec.dynamics is None:
                raise ConfigError(f"{role}: either blobs or dynamics is required")
            if spec.dynamics is not None and not Path(spec.dynamics).exists():
                raise ConfigError(f"{role}: dynamics file {spec.dynamics} does not exist")
            for key in ("noise", "underlying"):
                if getattr(spec, key) is not None:
                    try:
                        NoiseSpec.from_dict(getattr(spec, key))
                    except (KeyError, ValueError, TypeError) as exc:
                        raise ConfigError(f"{role}.{key}: {exc}") from None
        if self.detector_path is not None and not Path(self.detector_path).exists():
            raise ConfigError(f"detector checkpoint {self.detector_path} does not exist")
        if self.top_k_percent is not None and not 0.0 <= self.top_k_percent <= 100.0:
            raise ConfigError("top_k_percent must be in [0, 100]")

    @classmethod
    def from_dict(cls, d: dict) -> "PipelineConfig":
        try:
            return cls(
                seed=int(d.get("seed", 0)),
                source=RunSpec.from_dict(d.get("source", {})),
                target=RunSpec.from_dict(d.get("target", {"noise": {"kind": "symmetric", "ratio": 0.4}})),
                detector=DetectorTrainConfig.from_dict(d.get("detector", {})),
                detector_path=d.get("detector_path"),
                finetune=bool(d.get("finetune", False)),
                finetune_config=DetectorTrainConfig.from_dict({"learning_rate": FINETUNE_LR, **d.get("finetune_config", {})}),
                threshold=float(d.get("threshold", 0.5)),
                top_k_percent=d.get("top_k_percent"),
                debug=DebugPlan(**d.get("debug", {})),
                out=d.get("out", "runs/default"),
            )
        except (TypeError, ValueError, KeyError) as exc:
            if isinstance(exc, ConfigError):
                raise
            raise ConfigError(f"invalid pipeline config: {exc}") from None

    @classmethod
    def load(cls, path) -> "PipelineConfig":
        try:
            with open(path, encoding="utf-8") as fh:
                return cls.from_dict(json.load(fh))
        except (OSError, json.JSONDecodeError) as exc:
            raise ConfigError(f"cannot read config {path}: {exc}") from None

    def to_dict(self) -> dict:
        return {
            "seed": self.seed,
            "source": self.source.to_dict(),
            "target": self.target.to_dict(),
            "detector": self.detector.to_dict(),
            "detector_path": self.detector_path,
            "finetune": self.finetune,
            "finetune_config": self.finetune_config.to_dict(),
            "threshold": self.threshold,
            "top_k_percent": self.top_k_percent,
            "debug": asdict(self.debug),
            "out": self.out,
        }


# -------------------------------------------------------------------------- stages


@contextlib.contextmanager
def stage(name: str):
    """Tag any exception escaping the block with the stage that raised it."""
    log.info("stage %s", name)
    try:
        yield
    except Exception as exc:
        if not hasattr(exc, "stage"):
            exc.stage = name
        raise


@dataclass
class RunArtifacts:
    table: DynamicsTable
    train: LabeledDataset | None = None
    test: LabeledDataset | None = None
    model: ClassifierModel | None = None
    noise: NoiseSpec | None = None


def _noise_spec(raw: dict | None, root: int, stage_name: str) -> NoiseSpec | None:
    if raw is None:
        return None
    raw = dict(raw)
    raw.setdefault("seed", derive_seed(root, stage_name))
    return NoiseSpec.from_dict(raw)


def corrupt_dataset(clean: LabeledDataset, spec: RunSpec, root: int, role: str) -> tuple[LabeledDataset, NoiseSpec | None]:
    synthesized = _noise_spec(spec.noise, root, f"{role}/noise")
    underlying = _noise_spec(spec.underlying, root, f"{role}/underlying")
    if synthesized is None:
        return clean, None
    if underlying is not None:
        return contaminate_twice(clean, underlying, synthesized), synthesized
    return inject(clean, synthesized), synthesized


def prepare_run(spec: RunSpec, root: int, role: str, out_dir: Path | None = None) -> RunArtifacts:
    """Synthesize, corrupt and train (or load dynamics) for one side of the pipeline."""
    if spec.dynamics is not None:
        with stage(f"{role}/load-dynamics"):
            return RunArtifacts(read_dynamics(spec.dynamics))

    with stage(f"{role}/synth"):
        b = spec.blobs
        train, test = make_blobs(
            b.num_classes, b.per_class, b.dim, b.separation, b.label_overlap_fraction, seed=derive_seed(root, f"{role}/blobs")
        )
    with stage(f"{role}/corrupt"):
        noisy, noise = corrupt_dataset(train, spec, root, role)
        if out_dir is not None:
            write_dataset(noisy, out_dir / role / "train.csv")
            write_dataset(test, out_dir / role / "test.csv")
    with stage(f"{role}/train-ref"):
        cfg = TrainConfig.from_dict({**spec.train.to_dict(), "seed": derive_seed(root, f"{role}/train")})
        model, table = train_classifier(noisy, cfg)
        if out_dir is not None:
            model.save(out_dir / role / "model.json")
            write_dynamics(table, out_dir / role / "dynamics.csv")
    return RunArtifacts(table, noisy, test, model, noise)


def write_scores(scores, path, flags=None) -> None:
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["sample_id", "score"] + (["flag"] if flags is not None else []))
        for i, s in enumerate(scores):
            writer.writerow([i, repr(float(s))] + ([int(flags[i])] if flags is not None else []))


def read_scores(path) -> np.ndarray:
    with open(path, newline="", encoding="utf-8") as fh:
        rows = list(csv.DictReader(fh))
    return np.array([float(r["score"]) for r in rows])


@dataclass
class IdentificationResult:
    detector: DetectorModel
    source: RunArtifacts
    target: RunArtifacts
    scores: np.ndarray
    baseline: np.ndarray
    report: EvalReport | None
    baseline_report: EvalReport | None
    finetuned: DetectorModel | None = None
    finetuned_scores: np.ndarray | None = None
    finetuned_report: EvalReport | None = None


def run_identification(
    config: PipelineConfig,
    detector: DetectorModel | None = None,
    source: RunArtifacts | None = None,
    target: RunArtifacts | None = None,
    write: bool = True,
) -> IdentificationResult:
    """Corrupt, train the reference model, train the detector, score and evaluate the target.

    Pre-built ``detector``/``source``/``target`` skip their stages. With
    ``write`` every intermediate artifact goes under ``config.out``.
    """
    out = Path(config.out) if write else None
    root = config.seed
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
        (out / "config.json").write_text(json.dumps(config.to_dict(), indent=2, sort_keys=True) + "\n", encoding="utf-8")

    if detector is None and config.detector_path is not None:
        with stage("load-detector"):
            detector = DetectorModel.load(config.detector_path)
    if detector is None:
        if source is None:
            source = prepare_run(config.source, root, "source", out)
        with stage("train-detector"):
            cfg = DetectorTrainConfig.from_dict({**config.detector.to_dict(), "seed": derive_seed(root, "detector")})
            detector = train_detector(source.table, cfg)
    if out is not None:
        detector.save(out / "detector.json")

    if target is None:
        target = prepare_run(config.target, root, "target", out)

    with stage("score"):
        scores = score(detector, target.table)
        base = baseline_score(target.table)
        if out is not None:
            write_scores(scores, out / "scores.csv", target.table.flags)
            write_scores(base, out / "baseline_scores.csv", target.table.flags)

    finetuned = ft_scores = None
    if config.finetune:
        with stage("finetune"):
            cfg = DetectorTrainConfig.from_dict({**config.finetune_config.to_dict(), "seed": derive_seed(root, "finetune")})
            finetuned = fine_tune(detector, target.table, cfg)
            ft_scores = score(finetuned, target.table)
            if out is not None:
                finetuned.save(out / "detector_finetuned.json")
                write_scores(ft_scores, out / "scores_finetuned.csv", target.table.flags)

    report = base_report = ft_report = None
    if target.table.flags is not None:
        with stage("eval"):
            kind = target.noise.kind if target.noise else ""
            ratio = target.noise.ratio if target.noise else None
            report = evaluate(scores, target.table.flags, "detector", kind, ratio)
            base_report = evaluate(base, target.table.flags, "baseline", kind, ratio)
            reports = [report, base_report]
            if ft_scores is not None:
                ft_report = evaluate(ft_scores, target.table.flags, "detector_finetuned", kind, ratio)
                reports.append(ft_report)
            if out is not None:
                reports_to_csv(reports, out / "report.csv")
    return IdentificationResult(detector, source, target, scores, base, report, base_report, finetuned, ft_scores, ft_report)


# --------------------------------------------------------------- exclude / retrain


def select_suspects(scores, threshold: float = 0.5, top_k_percent: float | None = None) -> np.ndarray:
    """Boolean mask of samples predicted mislabeled: ``score > threshold``, or the top-k% by score."""
    scores = np.asarray(scores, dtype=np.float64)
    if top_k_percent is None:
        return scores > threshold
    k = math.floor(len(scores) * top_k_percent / 100.0)
    mask = np.zeros(len(scores), dtype=bool)
    if k:
        mask[np.argsort(-scores, kind="mergesort")[:k]] = True
    return mask


def _shrunk_batch(config: TrainConfig, n_full: int, n_kept: int) -> int:
    return max(1, int(round(config.batch_size * n_kept / n_full)))


def _train_arm(dataset: LabeledDataset, base: TrainConfig, n_full: int, seed: int) -> ClassifierModel:
    cfg = TrainConfig.from_dict({**base.to_dict(), "seed": seed, "batch_size": _shrunk_batch(base, n_full, len(dataset))})
    model, _ = train_classifier(dataset, cfg)
    return model


def _check_classes(dataset: LabeledDataset, keep: np.ndarray, arm: str) -> None:
    present = np.bincount(dataset.labels[keep], minlength=dataset.num_classes)
    empty = np.flatnonzero(present == 0)
    if empty.size:
        raise InvalidArgumentError(f"{arm} arm: exclusion removes every sample of class {int(empty[0])}")


@dataclass
class RetrainResult:
    standard_acc: float
    cleaned_acc: float
    oracle_acc: float | None
    excluded: np.ndarray
    n_standard: int
    n_cleaned: int
    models: dict[str, ClassifierModel]

    def row(self) -> dict:
        return {
            "standard_acc": f"{self.standard_acc:.6f}",
            "cleaned_acc": f"{self.cleaned_acc:.6f}",
            "oracle_acc": "" if self.oracle_acc is None else f"{self.oracle_acc:.6f}",
            "n_standard": self.n_standard,
            "n_cleaned": self.n_cleaned,
            "n_excluded": int(self.excluded.sum()),
        }


def exclude_and_retrain(
    train: LabeledDataset,
    test: LabeledDataset,
    scores,
    train_config: TrainConfig,
    threshold: float = 0.5,
    top_k_percent: float | None = None,
    seed: int = 0,
) -> RetrainResult:
    """Test accuracy of three arms: all noisy data, data minus predicted mislabels, data minus true mislabels.

    All arms share one training seed; the batch size of the reduced arms
    shrinks in proportion to their size.
    """
    scores = np.asarray(scores, dtype=np.float64)
    if scores.shape != (len(train),):
        raise InvalidArgumentError("one score per training sample required")
    excluded = select_suspects(scores, threshold, top_k_percent)
    keep = ~excluded
    _check_classes(train, keep, "cleaned")
    n = len(train)

    models = {"standard": _train_arm(train, train_config, n, seed)}
    models["cleaned"] = _train_arm(train.subset(np.flatnonzero(keep)), train_config, n, seed)
    oracle_acc = None
    if train.flags is not None:
        oracle_keep = train.flags == 0
        _check_classes(train, oracle_keep, "oracle")
        models["oracle"] = _train_arm(train.subset(np.flatnonzero(oracle_keep)), train_config, n, seed)
        oracle_acc = evaluate_classifier(models["oracle"], test)
    return RetrainResult(
        standard_acc=evaluate_classifier(models["standard"], test),
        cleaned_acc=evaluate_classifier(models["cleaned"], test),
        oracle_acc=oracle_acc,
        excluded=excluded,
        n_standard=n,
        n_cleaned=int(keep.sum()),
        models=models,
    )


# -------------------------------------------------------------------- debugging


@dataclass
class DebugResult:
    corrected: LabeledDataset
    selected: np.ndarray
    debugged_acc: float
    undebugged_acc: float

    def row(self) -> dict:
        return {
            "undebugged_acc": f"{self.undebugged_acc:.6f}",
            "debugged_acc": f"{self.debugged_acc:.6f}",
            "n_selected": int(self.selected.sum()),
        }


def correct_labels(
    train: LabeledDataset, scores, plan: DebugPlan, pseudo_model: ClassifierModel | None = None
) -> tuple[LabeledDataset, np.ndarray]:
    """Relabel the top ``plan.fraction`` samples by score; others are untouched."""
    selected = select_suspects(scores, top_k_percent=100.0 * plan.fraction)
    labels = train.labels.copy()
    if plan.correction_mode == "oracle":
        if train.true_labels is None:
            raise InvalidArgumentError("oracle correction needs true labels")
        labels[selected] = train.true_labels[selected]
    else:
        if pseudo_model is None:
            raise InvalidArgumentError("pseudo_label correction needs a model retrained after exclusion")
        labels[selected] = pseudo_model.predict(train.features[selected])
    flags = None if train.true_labels is None else (labels != train.true_labels).astype(np.int64)
    corrected = LabeledDataset(train.features, labels, train.num_classes, train.true_labels, flags, train.underlying_flags)
    return corrected, selected


def debug_dataset(
    train: LabeledDataset,
    test: LabeledDataset,
    scores,
    plan: DebugPlan,
    train_config: TrainConfig,
    seed: int = 0,
    pseudo_model: ClassifierModel | None = None,
    undebugged_model: ClassifierModel | None = None,
) -> DebugResult:
    corrected, selected = correct_labels(train, scores, plan, pseudo_model)
    n = len(train)
    if undebugged_model is None:
        undebugged_model = _train_arm(train, train_config, n, seed)
    debugged_model = _train_arm(corrected, train_config, n, seed)
    return DebugResult(
        corrected=corrected,
        selected=selected,
        debugged_acc=evaluate_classifier(debugged_model, test),
        undebugged_acc=evaluate_classifier(undebugged_model, test),
    )


def _require_raw(target: RunArtifacts):
    if target.train is None or target.test is None:
        raise ConfigError("exclude-and-retrain and debugging need a synthesized target (blobs), not a dynamics file")


def run_exclude_retrain(config: PipelineConfig, ident: IdentificationResult | None = None, write: bool = True) -> RetrainResult:
    ident = ident or run_identification(config, write=write)
    _require_raw(ident.target)
    with stage("exclude-retrain"):
        result = exclude_and_retrain(
            ident.target.train,
            ident.target.test,
            ident.scores,
            config.target.train,
            config.threshold,
            config.top_k_percent,
            seed=derive_seed(config.seed, "retrain"),
        )
    if write:
        _write_row(Path(config.out) / "exclude_retrain.csv", result.row())
    return result


def run_debug(config: PipelineConfig, ident: IdentificationResult | None = None, write: bool = True) -> DebugResult:
    ident = ident or run_identification(config, write=write)
    _require_raw(ident.target)
    seed = derive_seed(config.seed, "retrain")
    pseudo = None
    if config.debug.correction_mode == "pseudo_label":
        retrained = run_exclude_retrain(config, ident, write=write)
        pseudo = retrained.models["cleaned"]
    with stage("debug"):
        result = debug_dataset(ident.target.train, ident.target.test, ident.scores, config.debug, config.target.train, seed, pseudo)
    if write:
        out = Path(config.out)
        _write_row(out / "debug.csv", result.row())
        write_dataset(result.corrected, out / "target" / "train_debugged.csv")
    return result


def _write_row(path: Path, row: dict) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.DictWriter(fh, fieldnames=list(row), lineterminator="\n")
        writer.writeheader()
        writer.writerow(row)


def load_run(directory, role: str) -> RunArtifacts:
    """Reload a side of a previous run from its written artifacts."""
    d = Path(directory) / role
    return RunArtifacts(
        table=read_dynamics(d / "dynamics.csv"),
        train=read_dataset(d / "train.csv"),
        test=read_dataset(d / "test.csv"),
        model=ClassifierModel.load(d / "model.json"),
    )
