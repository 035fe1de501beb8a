"""Windowed multi-threshold accumulation drift scoring.

Each prediction is scored against a ladder of confidence thresholds (the
lower the confidence, the larger the score) and charged to the predicted
class. Per class, the scores of the last ``window_size`` predictions are
summed and compared with two judgment thresholds.
"""

from __future__ import annotations

import copy
from collections import deque
from dataclasses import asdict, dataclass, field
from enum import IntEnum


class DriftConfigError(ValueError):
    pass


class UnknownClassError(KeyError):
    pass


class DriftLevel(IntEnum):
    NONE = 0
    MILD = 1
    SEVERE = 2

    def __str__(self):
        return self.name.capitalize()


@dataclass(frozen=True)
class ThresholdLadder:
    """Rungs as (confidence threshold, score), thresholds descending."""

    rungs: tuple[tuple[float, int], ...] = ((0.9, 1), (0.7, 2), (0.5, 3))

    def __post_init__(self):
        rungs = tuple((float(t), int(s)) for t, s in self.rungs)
        object.__setattr__(self, "rungs", rungs)
        if not rungs:
            raise DriftConfigError("ladder needs at least one rung")
        for t, s in rungs:
            if not 0.0 < t < 1.0:
                raise DriftConfigError(f"rung threshold {t} outside (0, 1)")
            if s < 1:
                raise DriftConfigError(f"rung score {s} must be positive")
        for (t0, s0), (t1, s1) in zip(rungs, rungs[1:]):
            if not t1 < t0:
                raise DriftConfigError("rung thresholds must be strictly descending")
            if not s1 > s0:
                raise DriftConfigError("rung scores must be strictly ascending")

    def score(self, confidence: float) -> int:
        """Score of the lowest rung the confidence is still below; 0 if it
        clears the top rung."""
        result = 0
        for threshold, score in self.rungs:
            if confidence < threshold:
                result = score
            else:
                break
        return result


@dataclass(frozen=True)
class JudgmentConfig:
    window_size: int = 200
    mild_threshold: int = 60
    severe_threshold: int = 150
    model_drift_fraction: float = 0.5

    def __post_init__(self):
        if self.window_size < 1:
            raise DriftConfigError("window_size must be >= 1")
        if not 0 < self.mild_threshold < self.severe_threshold:
            raise DriftConfigError("need 0 < mild_threshold < severe_threshold")
        if not 0.0 < self.model_drift_fraction <= 1.0:
            raise DriftConfigError("model_drift_fraction must lie in (0, 1]")

    def level(self, score_sum: int) -> DriftLevel:
        if score_sum >= self.severe_threshold:
            return DriftLevel.SEVERE
        if score_sum >= self.mild_threshold:
            return DriftLevel.MILD
        return DriftLevel.NONE


@dataclass
class ClassWindow:
    window_log: deque
    score_sum: int = 0
    observed: int = 0


@dataclass
class DriftVerdict:
    per_class: dict[int, DriftLevel]
    model_drifted: bool
    drifted_fraction: float
    no_data: list[int] = field(default_factory=list)

    @property
    def severe_classes(self) -> list[int]:
        return [k for k, lv in self.per_class.items() if lv == DriftLevel.SEVERE]

    def should_evolve(self) -> bool:
        return self.model_drifted or bool(self.severe_classes)

    def to_dict(self) -> dict:
        return {
            "per_class": {str(k): str(v) for k, v in self.per_class.items()},
            "model_drifted": self.model_drifted,
            "drifted_fraction": self.drifted_fraction,
            "no_data": list(self.no_data),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "DriftVerdict":
        return cls(
            {int(k): DriftLevel[v.upper()] for k, v in d["per_class"].items()},
            d["model_drifted"], d["drifted_fraction"], list(d.get("no_data", [])),
        )


class DriftScoreboard:
    """Per-class ring buffers of (ts, score) with running sums.

    Memory is bounded by ``num_classes * window_size`` entries. Zero scores
    occupy window slots like any other.
    """

    def __init__(self, num_classes: int, ladder: ThresholdLadder = ThresholdLadder(),
                 judgment: JudgmentConfig = JudgmentConfig()):
        self.ladder = ladder
        self.judgment = judgment
        self.per_class = {k: ClassWindow(deque(maxlen=judgment.window_size)) for k in range(num_classes)}

    def _window(self, class_id) -> ClassWindow:
        try:
            return self.per_class[class_id]
        except KeyError:
            raise UnknownClassError(class_id) from None

    def observe(self, class_id: int, max_confidence: float, ts: float = 0.0) -> "DriftScoreboard":
        if not 0.0 <= max_confidence <= 1.0:
            raise ValueError(f"confidence {max_confidence} outside [0, 1]")
        win = self._window(class_id)
        score = self.ladder.score(max_confidence)
        if len(win.window_log) == win.window_log.maxlen:
            win.score_sum -= win.window_log[0][1]
        win.window_log.append((ts, score))
        win.score_sum += score
        win.observed += 1
        return self

    def reset_class(self, class_id: int) -> "DriftScoreboard":
        win = self._window(class_id)
        win.window_log.clear()
        win.score_sum = 0
        win.observed = 0
        return self

    def reset_all(self) -> "DriftScoreboard":
        for k in self.per_class:
            self.reset_class(k)
        return self

    def has_data(self, class_id: int) -> bool:
        return bool(self._window(class_id).window_log)

    def class_verdict(self, class_id: int) -> DriftLevel:
        win = self._window(class_id)
        if not win.window_log:
            return DriftLevel.NONE
        return self.judgment.level(win.score_sum)

    def model_verdict(self) -> DriftVerdict:
        levels, no_data = {}, []
        for k in self.per_class:
            levels[k] = self.class_verdict(k)
            if not self.has_data(k):
                no_data.append(k)
        observed = len(levels) - len(no_data)
        drifted = sum(1 for k, lv in levels.items() if lv >= DriftLevel.MILD)
        fraction = drifted / observed if observed else 0.0
        return DriftVerdict(levels, fraction >= self.judgment.model_drift_fraction, fraction, no_data)

    def snapshot(self) -> "DriftScoreboard":
        return copy.deepcopy(self)

    def export(self) -> dict:
        return {
            "classes": {
                str(k): {
                    "score_sum": w.score_sum,
                    "window_len": len(w.window_log),
                    "level": str(self.class_verdict(k)),
                }
                for k, w in self.per_class.items()
            },
            "config": {
                "ladder": [list(r) for r in self.ladder.rungs],
                "judgment": asdict(self.judgment),
            },
        }
