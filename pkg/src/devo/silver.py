"""Silver-sample harvesting under the Laida (3-sigma) confidence cutoff."""

from __future__ import annotations

import json
import math
import os
from collections import Counter
from dataclasses import dataclass, field

import numpy as np

from .classifier import ConfidenceVector
from .flows import DEFAULT_NORM_DIVISOR, FeatureVector

DEFAULT_CONFIDENCE_THRESHOLD = 0.997


class SilverPoolError(ValueError):
    pass


@dataclass(frozen=True)
class LaidaConfig:
    confidence_threshold: float = DEFAULT_CONFIDENCE_THRESHOLD
    sigma_level: float = 3.0

    def __post_init__(self):
        if not 0.0 < self.confidence_threshold < 1.0:
            raise ValueError("confidence_threshold must lie strictly between 0 and 1")


@dataclass
class SilverSample:
    features: FeatureVector
    pseudo_label: int
    confidence: float
    harvested_ts: float
    stage_id: int
    model_version: str


@dataclass
class SilverPool:
    stage_id: int
    samples: list[SilverSample] = field(default_factory=list)
    per_class_counts: Counter = field(default_factory=Counter)

    def __len__(self):
        return len(self.samples)

    def count(self, class_id: int) -> int:
        return self.per_class_counts.get(class_id, 0)

    def arrays(self) -> tuple[np.ndarray, np.ndarray]:
        if not self.samples:
            return np.zeros((0, 0)), np.zeros(0, dtype=np.int64)
        X = np.stack([s.features.values for s in self.samples])
        y = np.array([s.pseudo_label for s in self.samples], dtype=np.int64)
        return X, y


def harvest(
    conf: ConfidenceVector,
    features: FeatureVector,
    cfg: LaidaConfig,
    stage_id: int,
    model_version: str,
    ts: float,
) -> SilverSample | None:
    """A prediction becomes a silver sample only when its top confidence is
    strictly higher than the threshold."""
    if conf.max_prob > cfg.confidence_threshold:
        return SilverSample(features, conf.argmax, conf.max_prob, ts, stage_id, model_version)
    return None


def pool_add(pool: SilverPool, sample: SilverSample) -> SilverPool:
    if sample.stage_id != pool.stage_id:
        raise SilverPoolError(f"sample from stage {sample.stage_id} added to stage {pool.stage_id} pool")
    pool.samples.append(sample)
    pool.per_class_counts[sample.pseudo_label] += 1
    return pool


def _allocate(sizes: dict[int, int], fraction: float) -> dict[int, int]:
    """Per-class train counts: largest-remainder apportionment of
    round(fraction * total), then each class of size >= 2 is kept with at
    least one sample on each side and a singleton goes to train."""
    total = sum(sizes.values())
    target_total = math.floor(fraction * total + 0.5)
    exact = {k: fraction * n for k, n in sizes.items()}
    alloc = {k: math.floor(v) for k, v in exact.items()}
    spare = target_total - sum(alloc.values())
    for k in sorted(sizes, key=lambda k: (-(exact[k] - alloc[k]), k))[:max(spare, 0)]:
        alloc[k] += 1
    for k, n in sizes.items():
        if n == 1:
            alloc[k] = 1
        elif n >= 2:
            alloc[k] = min(max(alloc[k], 1), n - 1)
    return alloc


def stratified_split(labels, train_fraction: float = 0.8, seed: int = 0) -> tuple[np.ndarray, np.ndarray]:
    """Stratified random split of positions ``0..len(labels)-1``.

    Returns sorted (train, test) index arrays. Classes are permuted in
    ascending class order from one seeded generator.
    """
    if not 0.0 < train_fraction < 1.0:
        raise ValueError("train_fraction must lie strictly between 0 and 1")
    labels = np.asarray(labels, dtype=np.int64)
    classes = np.unique(labels)
    members = {int(k): np.flatnonzero(labels == k) for k in classes}
    alloc = _allocate({k: len(v) for k, v in members.items()}, train_fraction)
    rng = np.random.default_rng(seed)
    train, test = [], []
    for k in sorted(members):
        perm = members[k][rng.permutation(len(members[k]))]
        train.append(perm[:alloc[k]])
        test.append(perm[alloc[k]:])
    empty = np.zeros(0, dtype=np.int64)
    return np.sort(np.concatenate(train or [empty])), np.sort(np.concatenate(test or [empty]))


def pool_split(pool: SilverPool, train_fraction: float = 0.8, seed: int = 0) -> tuple[list[SilverSample], list[SilverSample]]:
    if not pool.samples:
        raise SilverPoolError("cannot split an empty pool")
    train, test = stratified_split([s.pseudo_label for s in pool.samples], train_fraction, seed)
    return [pool.samples[i] for i in train], [pool.samples[i] for i in test]


def silver_rate(pool: SilverPool, total_classified: int) -> float:
    if total_classified < len(pool):
        raise ValueError("total_classified smaller than pool size")
    if total_classified == 0:
        return 0.0
    return len(pool) / total_classified


def sample_to_json(s: SilverSample, label_names: list[str] | None = None,
                   norm_divisor: float = DEFAULT_NORM_DIVISOR) -> str:
    """One pool line in the dataset schema. Byte lengths are recovered from
    the normalized features, which reproduces the features exactly."""
    lengths = [int(round(v * norm_divisor)) for v in s.features.values[:s.features.true_len]]
    obj: dict = {"lengths": lengths}
    if label_names is not None:
        obj["label"] = label_names[s.pseudo_label]
    obj.update({
        "ts": s.harvested_ts,
        "seq_len": int(s.features.values.shape[0]),
        "stage_id": s.stage_id,
        "pseudo_label": s.pseudo_label,
        "confidence": s.confidence,
        "model_version": s.model_version,
    })
    return json.dumps(obj, separators=(",", ":"))


def save_pool(pool: SilverPool, path, label_names: list[str] | None = None,
              norm_divisor: float = DEFAULT_NORM_DIVISOR) -> None:
    tmp = f"{path}.tmp"
    with open(tmp, "w", encoding="utf-8", newline="\n") as fh:
        for s in pool.samples:
            fh.write(sample_to_json(s, label_names, norm_divisor) + "\n")
    os.replace(tmp, path)


def load_pool(path, stage_id: int | None = None, norm_divisor: float = DEFAULT_NORM_DIVISOR) -> SilverPool:
    pool = None
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            if not line.strip():
                continue
            try:
                obj = json.loads(line)
                lengths = np.asarray(obj["lengths"], dtype=np.float64)
                values = np.zeros(int(obj["seq_len"]))
                values[:len(lengths)] = np.clip(lengths / norm_divisor, -1.0, 1.0)
                sample = SilverSample(
                    FeatureVector(values, len(lengths)),
                    int(obj["pseudo_label"]), float(obj["confidence"]), float(obj["ts"]),
                    int(obj["stage_id"]), obj["model_version"],
                )
            except (KeyError, TypeError, ValueError) as exc:
                raise SilverPoolError(f"{path}: line {lineno}: {exc}") from None
            if pool is None:
                pool = SilverPool(sample.stage_id if stage_id is None else stage_id)
            pool_add(pool, sample)
    if pool is None:
        pool = SilverPool(0 if stage_id is None else stage_id)
    return pool
