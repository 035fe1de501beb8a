"""Markov-Gaussian packet-length sequence generator with per-stage drift.

Each class walks a Markov chain over length bands; a state emits a
Gaussian payload size rounded to whole bytes, clamped to [40, 1500] and
signed by the state's direction. An optional per-flow offset, shared by
all packets of a flow, models variation across users and content.

Drift is cumulative: stage k shifts the drifting state means by
``k * mean_shift_bytes`` and blends the transition matrix toward uniform
k times.
"""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field
from fractions import Fraction
from pathlib import Path

import numpy as np

from .flows import FlowKey, FlowRecord, LabelDict, Transport

MIN_BYTES = 40
MAX_BYTES = 1500
STAGE_SPAN_S = 86_400

SIX_APP_INITIAL_COUNTS = (4585, 125, 1965, 4425, 47828, 2925)
SIX_APP_NAMES = ("Bilibili", "Douyin", "MGTV", "Youku", "QQ Music", "IQiYi")


class SimConfigError(ValueError):
    pass


@dataclass(frozen=True)
class StateEmission:
    mean: float
    std: float
    direction: int = 1


@dataclass(frozen=True)
class DriftRule:
    """Per-stage change of a class. ``states`` limits the mean shift to the
    listed states (None shifts every state), e.g. content bands that change
    with an app update while control packets keep their sizes."""

    mean_shift_bytes: float = 0.0
    transition_noise: float = 0.0
    states: tuple[int, ...] | None = None

    def __post_init__(self):
        if self.states is not None:
            object.__setattr__(self, "states", tuple(int(i) for i in self.states))


@dataclass
class SimClassSpec:
    class_id: int
    emission: list[StateEmission]
    transition: list[list[float]]
    seq_len_range: tuple[int, int] = (24, 40)
    drift: DriftRule = DriftRule()
    name: str | None = None
    start_state: int = 0
    flow_jitter_bytes: float = 0.0

    @property
    def n_states(self) -> int:
        return len(self.emission)

    def validate(self) -> None:
        n = self.n_states
        if n < 1:
            raise SimConfigError(f"class {self.class_id}: needs at least one state")
        t = np.asarray(self.transition, dtype=np.float64)
        if t.shape != (n, n):
            raise SimConfigError(f"class {self.class_id}: transition matrix must be {n}x{n}")
        if (t < 0).any() or np.abs(t.sum(axis=1) - 1.0).max() > 1e-9:
            raise SimConfigError(f"class {self.class_id}: transition rows must be non-negative and sum to 1")
        for e in self.emission:
            if not e.std > 0:
                raise SimConfigError(f"class {self.class_id}: emission std must be > 0")
            if e.direction not in (1, -1):
                raise SimConfigError(f"class {self.class_id}: direction must be +1 or -1")
        lo, hi = self.seq_len_range
        if not 1 <= lo <= hi:
            raise SimConfigError(f"class {self.class_id}: need 1 <= min <= max sequence length")
        if not 0.0 <= self.drift.transition_noise <= 1.0:
            raise SimConfigError(f"class {self.class_id}: transition_noise must lie in [0, 1]")
        if self.drift.states is not None and any(not 0 <= i < n for i in self.drift.states):
            raise SimConfigError(f"class {self.class_id}: drift states must index existing states")
        if not 0 <= self.start_state < n:
            raise SimConfigError(f"class {self.class_id}: start_state out of range")
        if self.flow_jitter_bytes < 0:
            raise SimConfigError(f"class {self.class_id}: flow_jitter_bytes must be >= 0")

    def at_stage(self, k: int) -> "SimClassSpec":
        keep = (1.0 - self.drift.transition_noise) ** k
        t = keep * np.asarray(self.transition) + (1.0 - keep) / self.n_states
        shift = k * self.drift.mean_shift_bytes
        moved = range(self.n_states) if self.drift.states is None else self.drift.states
        emission = [StateEmission(e.mean + (shift if i in moved else 0.0), e.std, e.direction)
                    for i, e in enumerate(self.emission)]
        return SimClassSpec(self.class_id, emission, t.tolist(), self.seq_len_range,
                            self.drift, self.name, self.start_state, self.flow_jitter_bytes)


@dataclass
class SimConfig:
    classes: list[SimClassSpec]
    samples_per_class_per_stage: int | list[int] = 300
    n_stages: int = 3
    seed: int = 0
    salt_stages: bool = True

    def counts(self) -> list[int]:
        s = self.samples_per_class_per_stage
        counts = [int(s)] * len(self.classes) if isinstance(s, int) else [int(v) for v in s]
        if len(counts) != len(self.classes):
            raise SimConfigError("need one sample count per class")
        return counts

    def validate(self) -> None:
        if len(self.classes) < 2:
            raise SimConfigError("need at least two classes")
        if self.n_stages < 1:
            raise SimConfigError("need at least one stage")
        ids = [c.class_id for c in self.classes]
        if sorted(ids) != list(range(len(ids))):
            raise SimConfigError("class ids must be 0..n-1")
        for c in self.classes:
            c.validate()
        if any(n < 2 for n in self.counts()):
            raise SimConfigError("every class needs at least 2 samples per stage")

    def label_dict(self) -> LabelDict:
        return LabelDict({class_name(c): c.class_id for c in self.classes})

    def to_dict(self) -> dict:
        return {
            "seed": self.seed,
            "n_stages": self.n_stages,
            "salt_stages": self.salt_stages,
            "samples_per_class_per_stage": self.samples_per_class_per_stage,
            "classes": [
                {
                    "class_id": c.class_id,
                    "name": c.name,
                    "emission": [asdict(e) for e in c.emission],
                    "transition": [list(map(float, row)) for row in c.transition],
                    "seq_len_range": list(c.seq_len_range),
                    "drift": {
                        "mean_shift_bytes": c.drift.mean_shift_bytes,
                        "transition_noise": c.drift.transition_noise,
                        "states": None if c.drift.states is None else list(c.drift.states),
                    },
                    "start_state": c.start_state,
                    "flow_jitter_bytes": c.flow_jitter_bytes,
                }
                for c in self.classes
            ],
        }

    @classmethod
    def from_dict(cls, d: dict) -> "SimConfig":
        try:
            classes = [
                SimClassSpec(
                    class_id=int(c["class_id"]),
                    emission=[StateEmission(float(e["mean"]), float(e["std"]), int(e.get("direction", 1)))
                              for e in c["emission"]],
                    transition=[[float(v) for v in row] for row in c["transition"]],
                    seq_len_range=tuple(c.get("seq_len_range", (24, 40))),
                    drift=DriftRule(**c.get("drift", {})),
                    name=c.get("name"),
                    start_state=int(c.get("start_state", 0)),
                    flow_jitter_bytes=float(c.get("flow_jitter_bytes", 0.0)),
                )
                for c in d["classes"]
            ]
            cfg = cls(classes, d.get("samples_per_class_per_stage", 300), int(d.get("n_stages", 3)),
                      int(d.get("seed", 0)), bool(d.get("salt_stages", True)))
        except (KeyError, TypeError) as exc:
            raise SimConfigError(f"malformed sim config: {exc}") from None
        cfg.validate()
        return cfg

    @classmethod
    def load(cls, path) -> "SimConfig":
        return cls.from_dict(json.loads(Path(path).read_text()))

    def save(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=2) + "\n")


def class_name(spec: SimClassSpec) -> str:
    return spec.name or f"app{spec.class_id}"


def _walk(spec: SimClassSpec, n: int, rng: np.random.Generator) -> list[list[int]]:
    lo, hi = spec.seq_len_range
    lengths = rng.integers(lo, hi + 1, size=n)
    steps = int(lengths.max())
    cum = np.cumsum(np.asarray(spec.transition), axis=1)
    cum[:, -1] = 1.0
    means = np.array([e.mean for e in spec.emission])
    stds = np.array([e.std for e in spec.emission])
    signs = np.array([e.direction for e in spec.emission])
    states = np.empty((n, steps), dtype=np.int64)
    states[:, 0] = spec.start_state
    u = rng.random((n, steps))
    for t in range(1, steps):
        row = cum[states[:, t - 1]]
        states[:, t] = np.minimum((u[:, t:t + 1] > row).sum(axis=1), spec.n_states - 1)
    noise = rng.standard_normal((n, steps))
    offset = spec.flow_jitter_bytes * rng.standard_normal((n, 1))
    sizes = np.clip(np.rint(means[states] + offset + stds[states] * noise), MIN_BYTES, MAX_BYTES).astype(np.int64)
    signed = sizes * signs[states]
    return [signed[i, :lengths[i]].tolist() for i in range(n)]


def gen_stage(cfg: SimConfig, stage_k: int) -> list[FlowRecord]:
    """All labelled flows of one stage, interleaved in a seeded order with
    increasing timestamps."""
    cfg.validate()
    if not 0 <= stage_k < cfg.n_stages:
        raise SimConfigError(f"stage {stage_k} outside [0, {cfg.n_stages})")
    salt = stage_k if cfg.salt_stages else 0
    flows: list[tuple[int, list[int]]] = []
    for spec, n in zip(cfg.classes, cfg.counts()):
        rng = np.random.default_rng(np.random.SeedSequence([cfg.seed, salt, spec.class_id]))
        flows.extend((spec.class_id, seq) for seq in _walk(spec.at_stage(stage_k), n, rng))
    order = np.random.default_rng(np.random.SeedSequence([cfg.seed, salt, len(cfg.classes)])).permutation(len(flows))
    base_us = stage_k * STAGE_SPAN_S * 1_000_000
    records = []
    for pos, i in enumerate(order):
        label, seq = flows[i]
        key, _ = FlowKey.canonical(f"10.{label}.{(i >> 8) & 255}.{i & 255}", 40000 + i % 20000,
                                   f"192.0.2.{label + 1}", 443, Transport.TCP)
        ts = base_us + pos * 1_000_000
        records.append(FlowRecord(key, ts, ts, seq, label, client_is_src=key.src_addr.startswith("10.")))
    return records


def imbalance_profile(profile: str = "uniform", n_classes: int = 6, scale=1, per_class: int = 100) -> list[int]:
    """Per-class sample counts.

    ``"table2"`` scales the six-application initial-training counts
    (rounding half up); ``"uniform"`` gives ``per_class`` to each of
    ``n_classes``.
    """
    if profile == "uniform":
        counts = [per_class] * n_classes
    elif profile == "table2":
        s = Fraction(scale).limit_denominator(1_000_000) if not isinstance(scale, Fraction) else scale
        counts = [math.floor(c * s + Fraction(1, 2)) for c in SIX_APP_INITIAL_COUNTS]
    else:
        raise SimConfigError(f"unknown profile {profile!r}")
    if any(c < 2 for c in counts):
        raise SimConfigError(f"profile gives a class fewer than 2 samples: {counts}")
    return counts


def separated_preset(seed: int = 0, per_class: int = 600, n_classes: int = 6, drift_classes=(),
                     shift_sd: float = 1.5, std: float = 30.0, gap_sd: float = 6.0, n_stages: int = 3) -> SimConfig:
    """Single-band classes spaced ``gap_sd`` standard deviations apart.

    Each class in ``drift_classes`` moves by ``shift_sd`` standard
    deviations per stage, so a gap of 6 puts it halfway to its neighbour
    at stage 2.
    """
    classes = [
        SimClassSpec(c, [StateEmission(100 + gap_sd * std * c, std, 1)], [[1.0]], (16, 32),
                     DriftRule(shift_sd * std if c in drift_classes else 0.0))
        for c in range(n_classes)
    ]
    return SimConfig(classes, per_class, n_stages, seed)


def two_cue_preset(seed: int = 0, per_class: int = 300, n_classes: int = 6, drift_classes=(0, 2, 4),
                   shift_sd: float = 2.0, std: float = 30.0, content_gap_sd: float = 6.0,
                   control_gap_bytes: float = 90.0, to_control: float = 0.3, to_content: float = 0.4,
                   n_stages: int = 3) -> SimConfig:
    """Classes with a drifting content band and a stable control band.

    Uplink content packets separate the classes widely but move by
    ``shift_sd`` standard deviations per stage on ``drift_classes``.
    Downlink control packets keep their sizes, a weaker cue that still
    identifies the class after the content band has moved.
    """
    trans = [[1 - to_control, to_control], [to_content, 1 - to_content]]
    classes = [
        SimClassSpec(c, [StateEmission(100 + content_gap_sd * std * c, std, 1),
                         StateEmission(100 + control_gap_bytes * c, std, -1)],
                     trans, (16, 32), DriftRule(shift_sd * std if c in drift_classes else 0.0, states=[0]))
        for c in range(n_classes)
    ]
    return SimConfig(classes, per_class, n_stages, seed)


PRESETS = {"separated": separated_preset, "two-cue": two_cue_preset}
