import itertools

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from adaptive_zoom.gate_labels import (
    GateSample,
    ResolutionTrajectory,
    consistency_filter,
    emit_gate_samples,
    evaluate_trajectory,
    read_gate_samples,
    write_gate_samples,
)
from adaptive_zoom.scenes import SceneParams, gen_scene, judge, readable_at


def oracle_reader(scene, budget):
    """Answers correctly exactly when pooling to ``budget`` keeps the digits."""
    return scene.answer_tokens() if readable_at(scene, budget) else []


def rule_accepts(bits):
    return all(a <= b for a, b in zip(bits, bits[1:])) and len(set(bits)) == 2


def test_trajectory_finest_only():
    scene = gen_scene(3, SceneParams(critical_budget=256))
    traj = evaluate_trajectory(oracle_reader, scene, (16, 64, 256), judge)
    assert traj.correctness == (0, 0, 1)
    assert consistency_filter(traj)


def test_trajectory_trivially_readable():
    scene = gen_scene(4, SceneParams(critical_budget=16))
    traj = evaluate_trajectory(oracle_reader, scene, (16, 64, 256), judge)
    assert traj.correctness == (1, 1, 1)
    assert not consistency_filter(traj)


def test_trajectory_deterministic():
    scene = gen_scene(9, SceneParams(critical_budget=64))
    a = evaluate_trajectory(oracle_reader, scene, (16, 64, 256), judge)
    b = evaluate_trajectory(oracle_reader, gen_scene(9, SceneParams(critical_budget=64)), (16, 64, 256), judge)
    assert a == b and a.correctness == (0, 1, 1)


def test_trajectory_validation():
    scene = gen_scene(0)
    with pytest.raises(ValueError):
        evaluate_trajectory(oracle_reader, scene, (64, 16, 256), judge)
    with pytest.raises(ValueError):
        ResolutionTrajectory((16,), (1,))
    with pytest.raises(ValueError):
        ResolutionTrajectory((16, 64), (1,))
    with pytest.raises(ValueError):
        ResolutionTrajectory((16, 16), (0, 1))
    with pytest.raises(ValueError):
        ResolutionTrajectory((16, 64), (0, 2))


@pytest.mark.parametrize("bits,accepted", [((0, 0, 1), True), ((1, 0, 1), False), ((1, 1, 1), False), ((0, 0, 0), False)])
def test_filter_examples(bits, accepted):
    assert consistency_filter(ResolutionTrajectory((16, 64, 256), bits)) is accepted


def test_filter_enumeration_k4():
    accepted = {
        "".join(map(str, bits))
        for bits in itertools.product((0, 1), repeat=4)
        if consistency_filter(ResolutionTrajectory((1, 2, 3, 4), bits))
    }
    assert accepted == {"0001", "0011", "0111"}


@pytest.mark.parametrize("k", [2, 3, 4, 5])
def test_filter_matches_rule(k):
    for bits in itertools.product((0, 1), repeat=k):
        assert consistency_filter(ResolutionTrajectory(tuple(range(1, k + 1)), bits)) == rule_accepts(bits)


def test_emit_labels_follow_correctness():
    traj = ResolutionTrajectory((16, 64, 256), (0, 0, 1))
    samples = emit_gate_samples(traj, 60, seed=0, scene_id=5, query_id=1)
    by_res = {s.resolution: s.label for s in samples}
    assert by_res == {16: 1, 64: 1, 256: 0}
    assert all(s.scene_id == 5 and s.query_id == 1 for s in samples)


def test_emit_balance_over_two_point_trajectory():
    samples = emit_gate_samples(ResolutionTrajectory((16, 64), (0, 1)), 1000, seed=7)
    assert 0.45 <= np.mean([s.label for s in samples]) <= 0.55


def test_emit_errors():
    traj = ResolutionTrajectory((16, 64), (0, 1))
    with pytest.raises(ValueError):
        emit_gate_samples(traj, 0, seed=0)
    with pytest.raises(ValueError):
        emit_gate_samples(ResolutionTrajectory((16, 64), (1, 1)), 3, seed=0)


def test_emit_deterministic_for_seed():
    traj = ResolutionTrajectory((16, 64, 256), (0, 1, 1))
    assert emit_gate_samples(traj, 10, seed=3) == emit_gate_samples(traj, 10, seed=3)


@given(k=st.integers(2, 6), cut=st.integers(1, 5), draws=st.integers(1, 20), seed=st.integers(0, 10_000))
def test_label_consistency(k, cut, draws, seed):
    cut = min(cut, k - 1)
    traj = ResolutionTrajectory(tuple(2**i for i in range(k)), tuple([0] * cut + [1] * (k - cut)))
    assert consistency_filter(traj)
    # an accepted trajectory offers both label values
    assert {1 - c for c in traj.correctness} == {0, 1}
    for s in emit_gate_samples(traj, draws, seed):
        assert s.label + traj.correct_at(s.resolution) == 1


def test_sample_file_round_trip(tmp_path):
    samples = [GateSample(1, 0, 16, 1), GateSample(2, 0, 256, 0)]
    write_gate_samples(samples, tmp_path / "g.csv")
    assert (tmp_path / "g.csv").read_text().splitlines()[0] == "scene_id,query_id,resolution,label"
    assert read_gate_samples(tmp_path / "g.csv") == samples
