"""Stage runner and self-evolving lifecycle.

A stage classifies a replayable stream with one frozen model, feeding every
prediction to the drift scoreboard and the silver harvester. Evolution
(fully fine-tuning on the stage's silver pool) only ever happens between
stages.
"""

from __future__ import annotations

import hashlib
import json
import logging
from dataclasses import dataclass, field
from enum import Enum
from pathlib import Path

import numpy as np

from .checkpoint import save_checkpoint
from .classifier import (
    ConfidenceVector,
    Hyperparams,
    ModelCheckpoint,
    evaluate,
    fine_tune,
    predict_proba,
)
from .drift import DriftScoreboard, DriftVerdict, JudgmentConfig, ThresholdLadder
from .flows import FeatureVector, LabelDict
from .metrics import Metrics
from .silver import LaidaConfig, SilverPool, harvest, pool_add, pool_split, save_pool

log = logging.getLogger(__name__)

TABLE_ROWS = (
    ("training_f1", "Training F1-score"),
    ("testing_f1", "Testing F1-score"),
    ("next_stage_f1", "F1-score of Next-stage Samples"),
    ("final_f1", "F1-score of Final Samples"),
    ("final_silver_rate", "Silver Sample Percentage in Final Samples"),
)


class EvolutionError(ValueError):
    pass


class EvolutionMode(str, Enum):
    FORCED = "forced"
    VERDICT = "verdict"


@dataclass(frozen=True)
class StageConfig:
    stage_id: int
    evolution_mode: EvolutionMode = EvolutionMode.FORCED
    laida: LaidaConfig = LaidaConfig()
    judgment: JudgmentConfig = JudgmentConfig()
    hyper: Hyperparams = Hyperparams()
    ladder: ThresholdLadder = ThresholdLadder()
    train_fraction: float = 0.8


@dataclass
class StageStream:
    """Features of one stage in arrival order, with optional ground truth
    and timestamps (seconds)."""

    features: np.ndarray
    labels: np.ndarray | None = None
    ts: np.ndarray | None = None
    true_lens: np.ndarray | None = None

    def __post_init__(self):
        if not isinstance(self.features, np.ndarray):
            rows = [np.asarray(r, dtype=np.float64) for r in self.features]
            for i, r in enumerate(rows):
                if r.shape != rows[0].shape:
                    raise EvolutionError(f"item {i} has shape {r.shape}, item 0 has {rows[0].shape}")
            self.features = np.stack(rows) if rows else np.zeros((0, 0))
        self.features = np.asarray(self.features, dtype=np.float64)
        n = self.features.shape[0]
        if self.labels is not None:
            self.labels = np.asarray(self.labels, dtype=np.int64)
        if self.ts is None:
            self.ts = np.arange(n, dtype=np.float64)
        if self.true_lens is None:
            nz = self.features != 0
            self.true_lens = np.where(nz.any(axis=1), self.features.shape[1] - np.argmax(nz[:, ::-1], axis=1), 0)

    def __len__(self):
        return self.features.shape[0]

    def subset(self, idx) -> "StageStream":
        return StageStream(
            self.features[idx],
            None if self.labels is None else self.labels[idx],
            self.ts[idx],
            self.true_lens[idx],
        )


@dataclass
class EvolutionRecord:
    fired: bool
    reason: str
    model_version_out: str
    lineage_level: int
    warning: str | None = None
    silver_train_size: int = 0
    silver_test_size: int = 0
    silver_train_metrics: Metrics | None = None
    silver_test_metrics: Metrics | None = None
    forgetting_metrics: Metrics | None = None

    def to_dict(self) -> dict:
        return {
            "fired": self.fired,
            "reason": self.reason,
            "model_version_out": self.model_version_out,
            "lineage_level": self.lineage_level,
            "warning": self.warning,
            "silver_train_size": self.silver_train_size,
            "silver_test_size": self.silver_test_size,
            "silver_train_metrics": _opt_metrics(self.silver_train_metrics),
            "silver_test_metrics": _opt_metrics(self.silver_test_metrics),
            "forgetting_metrics": _opt_metrics(self.forgetting_metrics),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "EvolutionRecord":
        return cls(
            d["fired"], d["reason"], d["model_version_out"], d["lineage_level"], d.get("warning"),
            d["silver_train_size"], d["silver_test_size"],
            _metrics_or_none(d["silver_train_metrics"]),
            _metrics_or_none(d["silver_test_metrics"]),
            _metrics_or_none(d["forgetting_metrics"]),
        )


def _opt_metrics(m: Metrics | None):
    return None if m is None else m.to_dict()


def _metrics_or_none(d):
    return None if d is None else Metrics.from_dict(d)


@dataclass
class StageReport:
    stage_id: int
    model_version_in: str
    model_version_out: str
    n_classified: int
    silver_count: int
    silver_rate: float
    verdict: DriftVerdict
    silver_per_class: dict[int, int] = field(default_factory=dict)
    metrics_labeled: Metrics | None = None
    forgetting_metrics: Metrics | None = None
    evolution: EvolutionRecord | None = None
    scoreboard: dict | None = None

    def to_dict(self) -> dict:
        return {
            "stage_id": self.stage_id,
            "model_version_in": self.model_version_in,
            "model_version_out": self.model_version_out,
            "n_classified": self.n_classified,
            "silver_count": self.silver_count,
            "silver_rate": self.silver_rate,
            "silver_per_class": {str(k): v for k, v in sorted(self.silver_per_class.items())},
            "verdict": self.verdict.to_dict(),
            "metrics_labeled": _opt_metrics(self.metrics_labeled),
            "forgetting_metrics": _opt_metrics(self.forgetting_metrics),
            "evolution": None if self.evolution is None else self.evolution.to_dict(),
            "scoreboard": self.scoreboard,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "StageReport":
        return cls(
            d["stage_id"], d["model_version_in"], d["model_version_out"], d["n_classified"],
            d["silver_count"], d["silver_rate"], DriftVerdict.from_dict(d["verdict"]),
            {int(k): v for k, v in d.get("silver_per_class", {}).items()},
            _metrics_or_none(d.get("metrics_labeled")),
            _metrics_or_none(d.get("forgetting_metrics")),
            None if d.get("evolution") is None else EvolutionRecord.from_dict(d["evolution"]),
            d.get("scoreboard"),
        )

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n"


def _param_digest(model: ModelCheckpoint) -> bytes:
    return hashlib.sha256(model.parameters.tobytes()).digest()


def run_stage(
    model: ModelCheckpoint,
    stream: StageStream,
    cfg: StageConfig,
    board: DriftScoreboard | None = None,
) -> tuple[StageReport, SilverPool, DriftScoreboard]:
    """Classify every stream item with a frozen model.

    Predictions are batched; scoreboard updates and silver appends happen
    strictly in stream order.
    """
    if len(stream) == 0:
        raise EvolutionError(f"stage {cfg.stage_id}: empty stream")
    if stream.features.ndim != 2 or stream.features.shape[1] != model.arch.seq_len:
        # rows share one width, so the first item is the first offender
        raise EvolutionError(
            f"stage {cfg.stage_id}: item 0 has {stream.features.shape[-1]} features, "
            f"model expects {model.arch.seq_len}"
        )
    if stream.labels is not None and (stream.labels.min() < 0 or stream.labels.max() >= model.num_classes):
        raise EvolutionError(f"stage {cfg.stage_id}: labels outside the model's {model.num_classes} classes")
    if board is None:
        board = DriftScoreboard(model.num_classes, cfg.ladder, cfg.judgment)
    before = _param_digest(model)

    probs = predict_proba(model, stream.features)
    pool = SilverPool(cfg.stage_id)
    for i in range(len(stream)):
        conf = ConfidenceVector.from_probs(probs[i])
        ts = float(stream.ts[i])
        board.observe(conf.argmax, min(max(conf.max_prob, 0.0), 1.0), ts)
        fv = FeatureVector(stream.features[i], int(stream.true_lens[i]))
        sample = harvest(conf, fv, cfg.laida, cfg.stage_id, model.version_id, ts)
        if sample is not None:
            pool_add(pool, sample)

    if _param_digest(model) != before:
        raise AssertionError("model parameters changed during a stage")

    metrics = None
    if stream.labels is not None:
        from .metrics import metrics_from_predictions

        metrics = metrics_from_predictions(stream.labels, probs.argmax(axis=1), model.num_classes)
    report = StageReport(
        stage_id=cfg.stage_id,
        model_version_in=model.version_id,
        model_version_out=model.version_id,
        n_classified=len(stream),
        silver_count=len(pool),
        silver_rate=len(pool) / len(stream),
        verdict=board.model_verdict(),
        silver_per_class={k: pool.count(k) for k in range(model.num_classes)},
        metrics_labeled=metrics,
        scoreboard=board.export(),
    )
    return report, pool, board


def should_evolve(cfg: StageConfig, verdict: DriftVerdict) -> tuple[bool, str]:
    if cfg.evolution_mode == EvolutionMode.FORCED:
        return True, "forced"
    if verdict.severe_classes:
        return True, f"severe drift on classes {verdict.severe_classes}"
    if verdict.model_drifted:
        return True, f"model drift ({verdict.drifted_fraction:.2f} of classes)"
    return False, "no drift verdict"


def evolve(
    model: ModelCheckpoint,
    pool: SilverPool,
    cfg: StageConfig,
    initial_test: tuple[np.ndarray, np.ndarray] | None = None,
    board: DriftScoreboard | None = None,
    reason: str = "forced",
    ts: float | None = None,
) -> tuple[ModelCheckpoint, EvolutionRecord]:
    """Fully fine-tune on the 80% silver split and score the result on the
    20% split and, when given, on the initial test set."""
    if len(pool) == 0:
        msg = f"stage {cfg.stage_id}: silver pool is empty, evolution skipped"
        log.warning(msg)
        return model, EvolutionRecord(False, reason, model.version_id, model.lineage_level, warning=msg)
    train, test = pool_split(pool, cfg.train_fraction, cfg.hyper.seed)
    X_tr = np.stack([s.features.values for s in train])
    y_tr = np.array([s.pseudo_label for s in train], dtype=np.int64)
    new = fine_tune(model, X_tr, y_tr, cfg.hyper, ts=ts)
    record = EvolutionRecord(
        True, reason, new.version_id, new.lineage_level,
        silver_train_size=len(train), silver_test_size=len(test),
        silver_train_metrics=evaluate(new, X_tr, y_tr),
    )
    if test:
        X_te = np.stack([s.features.values for s in test])
        y_te = np.array([s.pseudo_label for s in test], dtype=np.int64)
        record.silver_test_metrics = evaluate(new, X_te, y_te)
    if initial_test is not None:
        record.forgetting_metrics = evaluate(new, *initial_test)
    if board is not None:
        board.reset_all()
    return new, record


def compare_models(models: list[ModelCheckpoint], eval_sets: list[tuple[np.ndarray, np.ndarray]]) -> list[list[Metrics]]:
    """Each model (row) on each labelled set (column)."""
    return [[evaluate(m, X, y) for X, y in eval_sets] for m in models]


@dataclass
class LifecycleResult:
    reports: list[StageReport]
    models: list[ModelCheckpoint]
    pools: list[SilverPool]
    table: dict[str, list[float | None]]


class RunLayout:
    """``<root>/{checkpoints,pools,reports,scoreboards}``."""

    def __init__(self, root):
        self.root = Path(root)

    def create(self) -> "RunLayout":
        for sub in ("checkpoints", "pools", "reports", "scoreboards"):
            (self.root / sub).mkdir(parents=True, exist_ok=True)
        return self

    def checkpoint(self, model: ModelCheckpoint) -> Path:
        return self.root / "checkpoints" / f"{model.version_id}.devo"

    def pool(self, stage_id: int) -> Path:
        return self.root / "pools" / f"stage_{stage_id}.ndjson"

    def report(self, stage_id: int) -> Path:
        return self.root / "reports" / f"stage_{stage_id}.json"

    def scoreboard(self, stage_id: int) -> Path:
        return self.root / "scoreboards" / f"stage_{stage_id}.json"

    @property
    def summary(self) -> Path:
        return self.root / "reports" / "lifecycle.json"

    def report_paths(self) -> list[Path]:
        paths = (self.root / "reports").glob("stage_*.json")
        return sorted(paths, key=lambda p: int(p.stem.split("_")[1]))


def run_lifecycle(
    initial_model: ModelCheckpoint,
    stages: list[tuple[StageStream, StageConfig]],
    initial_test: tuple[np.ndarray, np.ndarray] | None = None,
    initial_train: tuple[np.ndarray, np.ndarray] | None = None,
    run_dir=None,
    evolve_final: bool = False,
) -> LifecycleResult:
    """Run stages in order, evolving at each boundary when the stage's mode
    or verdict calls for it.

    The last stage is classification only unless ``evolve_final`` is set, so
    three stages yield at most two evolutions. With ``run_dir`` every
    checkpoint, pool, scoreboard and report is written there.
    """
    if not stages:
        raise EvolutionError("lifecycle needs at least one stage")
    ids = [cfg.stage_id for _, cfg in stages]
    if len(set(ids)) != len(ids):
        raise EvolutionError(f"duplicate stage ids {ids}")
    layout = RunLayout(run_dir).create() if run_dir is not None else None
    labels = LabelDict(initial_model.label_dict) if initial_model.label_dict else None
    names = labels.names if labels is not None else None
    if layout is not None:
        save_checkpoint(initial_model, layout.checkpoint(initial_model))
        if labels is not None:
            labels.save(layout.root / "checkpoints" / "labels.json")

    model = initial_model
    models = [initial_model]
    board = None
    reports, pools = [], []
    for idx, (stream, cfg) in enumerate(stages):
        if board is None or board.judgment != cfg.judgment or board.ladder != cfg.ladder:
            board = DriftScoreboard(model.num_classes, cfg.ladder, cfg.judgment)
        report, pool, board = run_stage(model, stream, cfg, board)
        is_final = idx == len(stages) - 1
        fire, reason = should_evolve(cfg, report.verdict)
        if fire and (not is_final or evolve_final):
            stage_end = float(stream.ts[-1])
            model, record = evolve(model, pool, cfg, initial_test, board, reason, ts=stage_end)
            report.evolution = record
            report.model_version_out = model.version_id
            report.forgetting_metrics = record.forgetting_metrics
            if record.fired:
                models.append(model)
                if layout is not None:
                    save_checkpoint(model, layout.checkpoint(model))
        elif fire:
            report.evolution = EvolutionRecord(False, "final stage", model.version_id, model.lineage_level)
        reports.append(report)
        pools.append(pool)
        if layout is not None:
            save_pool(pool, layout.pool(cfg.stage_id), names)
            layout.scoreboard(cfg.stage_id).write_text(json.dumps(report.scoreboard, indent=2, sort_keys=True) + "\n")
            layout.report(cfg.stage_id).write_text(report.to_json())

    table = lifecycle_table(reports, models, stages, initial_test, initial_train)
    if layout is not None:
        layout.summary.write_text(json.dumps({
            "models": [m.version_id for m in models],
            "lineage": [m.lineage_level for m in models],
            "table": table,
        }, indent=2, sort_keys=True) + "\n")
    return LifecycleResult(reports, models, pools, table)


def lifecycle_table(
    reports: list[StageReport],
    models: list[ModelCheckpoint],
    stages: list[tuple[StageStream, StageConfig]],
    initial_test=None,
    initial_train=None,
) -> dict[str, list[float | None]]:
    """Per-model rows in the layout of the staged comparison table.

    Columns follow lineage (initial, level-1, ...). Evolved models report
    training/testing F1 on their own silver split; next-stage F1 is the
    incoming model's score on the following non-final stage; final-stage
    F1 and silver rate come from re-running every model on the last stage.
    """
    n = len(models)
    table: dict[str, list[float | None]] = {key: [None] * n for key, _ in TABLE_ROWS}
    if initial_train is not None:
        table["training_f1"][0] = evaluate(models[0], *initial_train).macro_f1
    if initial_test is not None:
        table["testing_f1"][0] = evaluate(models[0], *initial_test).macro_f1
    index = {m.version_id: i for i, m in enumerate(models)}
    for rep in reports:
        ev = rep.evolution
        if ev is not None and ev.fired and ev.model_version_out in index:
            j = index[ev.model_version_out]
            table["training_f1"][j] = ev.silver_train_metrics.macro_f1
            if ev.silver_test_metrics is not None:
                table["testing_f1"][j] = ev.silver_test_metrics.macro_f1
    for rep in reports[:-1]:
        if rep.metrics_labeled is not None and rep.model_version_in in index:
            table["next_stage_f1"][index[rep.model_version_in]] = rep.metrics_labeled.macro_f1
    final_stream, final_cfg = stages[-1]
    for j, m in enumerate(models):
        probs = predict_proba(m, final_stream.features)
        table["final_silver_rate"][j] = float(np.mean(probs.max(axis=1) > final_cfg.laida.confidence_threshold))
        if final_stream.labels is not None:
            table["final_f1"][j] = evaluate(m, final_stream.features, final_stream.labels).macro_f1
    return table


def column_names(models_lineage: list[int]) -> list[str]:
    return ["Initial trained" if lv == 0 else f"Level-{lv} fine-tuned" for lv in models_lineage]


def render_table(summary: dict) -> str:
    cols = column_names(summary["lineage"])
    label_w = max(len(label) for _, label in TABLE_ROWS)
    col_w = max(max(len(c) for c in cols), 8)
    lines = [" " * label_w + " | " + " | ".join(c.rjust(col_w) for c in cols)]
    lines.append("-" * len(lines[0]))
    for key, label in TABLE_ROWS:
        cells = []
        for v in summary["table"][key]:
            if v is None:
                cells.append("N/A".rjust(col_w))
            elif key == "final_silver_rate":
                cells.append(f"{100 * v:.2f}%".rjust(col_w))
            else:
                cells.append(f"{v:.4f}".rjust(col_w))
        lines.append(label.ljust(label_w) + " | " + " | ".join(cells))
    return "\n".join(lines) + "\n"
