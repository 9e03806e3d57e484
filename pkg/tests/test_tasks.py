from __future__ import annotations

import csv
import json

import numpy as np
import pytest

from affkp import labels as L
from affkp.errors import ConfigError
from affkp.instances import AffordanceInstance
from affkp.synth import SynthConfig
from affkp.tasks import (CSV_COLUMNS, SimConfig, TaskOutcome, corrupt_wrap_width, oracle_predictor, run_campaign,
                         simulate_task, task_scene, write_campaign)

CFG = SynthConfig()


@pytest.mark.parametrize("task", [1, 2, 3, 4])
def test_oracle_succeeds(task):
    for seed in range(3):
        scene = task_scene(task, CFG, seed)
        out = simulate_task(task, scene, scene.instances)
        assert out.success and out.failure == "none", out.diagnostics


def test_double_wrap_width_is_grasp_failure():
    scene = task_scene(4, CFG, 0)
    out = simulate_task(4, scene, corrupt_wrap_width(scene.instances, 2.0))
    assert out.failure == "grasp"


def _shift(instances, label, vec):
    out = []
    for inst in instances:
        kp = inst.keypoints + vec if inst.affordance == label else inst.keypoints
        out.append(AffordanceInstance(inst.id, inst.affordance, inst.point_indices, kp))
    return out


def test_task1_contain_displacement_flips_at_cavity_edge():
    scene = task_scene(1, CFG, 2)
    u = scene.camera.world_to_camera([[1.0, 0, 0]])[0] - scene.camera.world_to_camera([[0.0, 0, 0]])[0]

    def offset(s):
        o = simulate_task(1, scene, _shift(scene.instances, L.CONTAIN, s * u))
        return o, o.diagnostics["drop_offset"] - o.diagnostics["cavity_radius"]

    lo, hi = 0.0, 0.2
    assert offset(lo)[1] < 0 < offset(hi)[1]
    for _ in range(40):
        mid = (lo + hi) / 2
        lo, hi = (mid, hi) if offset(mid)[1] < 0 else (lo, mid)
    inside, _ = offset(lo - 1e-3)
    outside, _ = offset(hi + 1e-3)
    assert inside.success
    assert outside.failure == "execution"


@pytest.mark.parametrize("task,label", [(1, L.CONTAIN), (2, L.CUT), (3, L.SCOOP), (4, L.WRAP_GRASP)])
def test_missing_affordance_is_planning_failure(task, label):
    scene = task_scene(task, CFG, 0)
    out = simulate_task(task, scene, [i for i in scene.instances if i.affordance != label])
    assert out.failure == "planning" and not out.success


def test_grasp_failure_when_grasp_far_away():
    scene = task_scene(2, CFG, 0)
    out = simulate_task(2, scene, _shift(scene.instances, L.GRASP, np.array([0.2, 0.0, 0.0])))
    assert out.failure == "grasp"


def test_outcome_invariant():
    with pytest.raises(ValueError):
        TaskOutcome(1, True, "grasp")


def test_campaign_deterministic_and_rows(tmp_path):
    a = run_campaign(4, 4, range(4), oracle_predictor, CFG)
    b = run_campaign(4, 4, range(4), oracle_predictor, CFG)
    assert a.row() == b.row() == {"Task": 4, "#Trials": 4, "#Failure": 0, "#Planning Failure": 0,
                                  "#Grasp Failure": 0, "#Execution Failure": 0}
    bad = run_campaign(4, 4, range(4), oracle_predictor, CFG,
                       corrupt=lambda p: corrupt_wrap_width(p, 2.0))
    row = bad.row()
    assert row["#Failure"] == row["#Planning Failure"] + row["#Grasp Failure"] + row["#Execution Failure"] == 4
    write_campaign(tmp_path, [a, bad])
    rows = list(csv.DictReader(open(tmp_path / "campaign.csv")))
    assert list(rows[0]) == CSV_COLUMNS and len(rows) == 2
    trials = [json.loads(x) for x in (tmp_path / "trials.jsonl").read_text().splitlines()]
    assert len(trials) == 8 and trials[0]["diagnostics"]["seed"] == 0


def test_campaign_needs_enough_seeds():
    with pytest.raises(ConfigError):
        run_campaign(1, 3, [0], oracle_predictor, CFG)


def test_sim_config_validation():
    with pytest.raises(ConfigError):
        SimConfig(stroke=0.0)
    with pytest.raises(ConfigError):
        simulate_task(5, None, [])
