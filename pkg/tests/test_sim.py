import numpy as np
import pytest

from devo import flows
from devo.classifier import Arch, Hyperparams, evaluate, init_model, train
from devo.silver import stratified_split
from devo.sim import (
    DriftRule,
    SimClassSpec,
    SimConfig,
    SimConfigError,
    StateEmission,
    gen_stage,
    imbalance_profile,
    separated_preset,
    two_cue_preset,
)


def line_config(shift=0.0, noise=0.0, seed=0, per=80, salt=True, sd=30.0, gap=6.0):
    classes = [
        SimClassSpec(c, [StateEmission(100 + gap * sd * c, sd, 1), StateEmission(300 + gap * sd * c, sd, -1)],
                     [[0.5, 0.5], [0.5, 0.5]], (8, 16), DriftRule(shift, noise))
        for c in range(4)
    ]
    return SimConfig(classes, per, 4, seed, salt)


def magnitudes(records):
    return np.abs(np.concatenate([r.signed_lengths for r in records]))


def ks_statistic(a, b):
    """Two-sample KS distance from the empirical CDFs."""
    grid = np.union1d(a, b)
    fa = np.searchsorted(np.sort(a), grid, side="right") / len(a)
    fb = np.searchsorted(np.sort(b), grid, side="right") / len(b)
    return float(np.abs(fa - fb).max())


def test_same_inputs_same_dataset():
    cfg = line_config(shift=40, seed=3)
    a, b = gen_stage(cfg, 2), gen_stage(cfg, 2)
    assert [(r.signed_lengths, r.label, r.first_ts) for r in a] == [(r.signed_lengths, r.label, r.first_ts) for r in b]


def test_zero_drift_unsalted_stages_identical():
    cfg = line_config(salt=False)
    assert [r.signed_lengths for r in gen_stage(cfg, 0)] == [r.signed_lengths for r in gen_stage(cfg, 3)]


def test_zero_drift_salted_stages_differ_only_in_samples():
    cfg = line_config()
    s0, s1 = gen_stage(cfg, 0), gen_stage(cfg, 1)
    assert [r.signed_lengths for r in s0] != [r.signed_lengths for r in s1]
    assert abs(magnitudes(s0).mean() - magnitudes(s1).mean()) < 10


def test_records_are_valid_and_labelled():
    cfg = line_config(shift=500)
    recs = gen_stage(cfg, 3)
    assert len(recs) == 4 * 80
    for r in recs:
        assert 8 <= len(r.signed_lengths) <= 16
        assert all(40 <= abs(v) <= 1500 for v in r.signed_lengths)
    assert sorted(set(r.label for r in recs)) == [0, 1, 2, 3]
    ts = [r.first_ts for r in recs]
    assert ts == sorted(ts) and ts[0] >= 3 * 86_400 * 1_000_000


def test_mean_shift_moves_mean_by_shift():
    # single-state classes far from the clamp, so the shift is visible in full
    classes = [SimClassSpec(c, [StateEmission(300 + 200 * c, 40, 1)], [[1.0]], (10, 20), DriftRule(200.0))
               for c in range(2)]
    cfg = SimConfig(classes, 400, 2, seed=5)
    m0, m1 = magnitudes(gen_stage(cfg, 0)), magnitudes(gen_stage(cfg, 1))
    sem = np.sqrt(m0.var(ddof=1) / len(m0) + m1.var(ddof=1) / len(m1))
    assert abs((m1.mean() - m0.mean()) - 200) <= 3 * sem


def test_drift_limited_to_listed_states():
    spec = SimClassSpec(0, [StateEmission(300, 20, 1), StateEmission(200, 20, -1)], [[0.5, 0.5], [0.5, 0.5]],
                        drift=DriftRule(50.0, states=[0]))
    assert [e.mean for e in spec.at_stage(2).emission] == [400, 200]
    cfg = SimConfig([spec, SimClassSpec(1, [StateEmission(900, 20)], [[1.0]])], 200, 3, seed=1)
    recs = [r for r in gen_stage(cfg, 2) if r.label == 0]
    down = np.concatenate([[v for v in r.signed_lengths if v < 0] for r in recs])
    up = np.concatenate([[v for v in r.signed_lengths if v > 0] for r in recs])
    assert abs(-down.mean() - 200) < 5 and abs(up.mean() - 400) < 5
    assert SimConfig.from_dict(cfg.to_dict()).classes[0].drift.states == (0,)
    with pytest.raises(SimConfigError, match="drift states"):
        SimClassSpec(2, [StateEmission(1, 1)], [[1.0]], drift=DriftRule(1.0, states=[3])).validate()


def test_transition_noise_blends_toward_uniform():
    spec = SimClassSpec(0, [StateEmission(100, 10), StateEmission(900, 10)], [[1.0, 0.0], [0.0, 1.0]],
                        drift=DriftRule(0.0, 0.5))
    assert np.allclose(spec.at_stage(0).transition, [[1, 0], [0, 1]])
    assert np.allclose(spec.at_stage(1).transition, [[0.75, 0.25], [0.25, 0.75]])
    assert np.allclose(spec.at_stage(2).transition, [[0.625, 0.375], [0.375, 0.625]])


def test_ks_distance_grows_with_stage():
    for seed in range(10):
        cfg = line_config(shift=25, seed=seed)
        base = magnitudes(gen_stage(cfg, 0))
        ks = [ks_statistic(base, magnitudes(gen_stage(cfg, k))) for k in range(1, 4)]
        assert ks[0] <= ks[1] <= ks[2], (seed, ks)


@pytest.mark.parametrize("mutate, message", [
    (lambda c: c.classes[0].transition.__setitem__(0, [0.7, 0.2]), "sum to 1"),
    (lambda c: c.classes[1].emission.__setitem__(0, StateEmission(100, 0.0)), "std"),
    (lambda c: setattr(c.classes[2], "seq_len_range", (9, 3)), "min"),
    (lambda c: setattr(c, "classes", c.classes[:1]), "two classes"),
    (lambda c: setattr(c, "n_stages", 0), "stage"),
])
def test_invalid_config_rejected(mutate, message):
    cfg = line_config()
    mutate(cfg)
    with pytest.raises(SimConfigError, match=message):
        gen_stage(cfg, 0)


def test_stage_out_of_range():
    with pytest.raises(SimConfigError):
        gen_stage(line_config(), 4)


def test_config_json_round_trip(tmp_path):
    cfg = line_config(shift=12.5, noise=0.1, seed=9)
    cfg.save(tmp_path / "sim.json")
    back = SimConfig.load(tmp_path / "sim.json")
    assert back.to_dict() == cfg.to_dict()
    assert [r.signed_lengths for r in gen_stage(back, 1)] == [r.signed_lengths for r in gen_stage(cfg, 1)]


def test_ndjson_export_round_trip(tmp_path):
    cfg = line_config(per=10)
    recs = gen_stage(cfg, 1)
    flows.write_ndjson(recs, tmp_path / "s.ndjson", cfg.label_dict())
    back, labels = flows.load_ndjson(tmp_path / "s.ndjson", cfg.label_dict())
    assert [(r.signed_lengths, r.label) for r in back] == [(r.signed_lengths, r.label) for r in recs]


def test_table2_profile_scaled():
    assert imbalance_profile("table2", scale=1 / 50) == [92, 3, 39, 89, 957, 59]


def test_uniform_profile():
    assert imbalance_profile("uniform", n_classes=6, per_class=100) == [100] * 6


def test_profile_too_small():
    with pytest.raises(SimConfigError):
        imbalance_profile("table2", scale=1 / 1000)


def test_well_separated_classes_are_learnable():
    cfg = line_config(per=150, seed=2)
    recs = gen_stage(cfg, 0)
    X = flows.feature_matrix(recs, seq_len=16)
    y = np.array([r.label for r in recs])
    tr, te = stratified_split(y, 0.8, seed=0)
    m = train(init_model(4, Arch(16, 16), seed=0), X[tr], y[tr], Hyperparams(epochs=20, batch_size=25, seed=0))
    assert evaluate(m, X[te], y[te]).macro_f1 >= 0.95


def test_two_cue_preset_moves_only_content_band():
    cfg = two_cue_preset(seed=1, per_class=50)
    spec = cfg.classes[2]
    assert [e.mean for e in spec.at_stage(2).emission] == [e.mean + d for e, d in zip(spec.emission, [120, 0])]
    assert cfg.classes[1].at_stage(2).emission == cfg.classes[1].emission


def test_separated_preset_drift_classes():
    cfg = separated_preset(drift_classes=(0, 2, 4))
    assert [c.drift.mean_shift_bytes for c in cfg.classes] == [45, 0, 45, 0, 45, 0]
    assert SimConfig.from_dict(cfg.to_dict()).to_dict() == cfg.to_dict()
