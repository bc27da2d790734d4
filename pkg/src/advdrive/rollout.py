"""Closed-loop simulation: render, act, step, score."""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field as dc_field, replace
from typing import List, Optional, Sequence, Tuple

import numpy as np

from .field import RigidTransform, VoxelField
from .paths import ReferencePath, cte, l_turn_path, square_loop_path, straight_path
from .policy import PolicyNet, policy_forward, to_observation
from .render import QuadConfig, RenderOutput, render_frame, render_opaque_frame
from .rig import CameraRig
from .vehicle import DynamicsParams, VehicleState, dynamics_step

__all__ = [
    "ReferencePath", "cte", "straight_path", "l_turn_path", "square_loop_path",
    "RolloutConfig", "Trajectory", "Scenario", "RolloutDivergence",
    "sense", "rollout_closed_loop", "total_cte", "write_trajectory_csv", "read_trajectory_csv",
]

SENSOR_MODES = ("volumetric", "opaque")


class RolloutDivergence(RuntimeError):
    def __init__(self, step: int, message: str):
        super().__init__(f"step {step}: {message}")
        self.step = step


@dataclass(frozen=True)
class RolloutConfig:
    horizon: int = 60
    rig: CameraRig = CameraRig()
    quad: QuadConfig = QuadConfig()
    initial_state: Tuple[float, float, float] = (0.0, 0.0, 0.0)
    # "volumetric" composites fields (surrogate); "opaque" inserts objects by
    # depth test into a color+depth frame (deployment).
    sensor: str = "volumetric"
    goal: int = -1
    seed: int = 0

    def __post_init__(self):
        if self.horizon < 1:
            raise ValueError("horizon must be >= 1")
        if self.sensor not in SENSOR_MODES:
            raise ValueError(f"sensor must be one of {SENSOR_MODES}")


@dataclass
class Trajectory:
    states: List[VehicleState]
    controls: List[float]
    costs: List[float]                      # CTE(x_t) for t = 0..T
    frames: Optional[List[np.ndarray]] = None

    def __post_init__(self):
        if len(self.states) != len(self.controls) + 1 or len(self.costs) != len(self.states):
            raise ValueError("trajectory lengths are inconsistent")

    @property
    def horizon(self) -> int:
        return len(self.controls)

    def state_array(self) -> np.ndarray:
        return np.array(self.states, dtype=np.float64)


@dataclass
class Scenario:
    """Everything a rollout needs besides the attackable objects."""

    scene: Optional[VoxelField]
    path: ReferencePath
    policy: PolicyNet
    dynamics: DynamicsParams = DynamicsParams()
    cfg: RolloutConfig = RolloutConfig()

    def with_initial_state(self, state) -> "Scenario":
        return replace(self, cfg=replace(self.cfg, initial_state=tuple(float(v) for v in state)))

    def with_sensor(self, sensor: str, scene: Optional[VoxelField] = None) -> "Scenario":
        return replace(self, scene=self.scene if scene is None else scene, cfg=replace(self.cfg, sensor=sensor))


Placement = Tuple[VoxelField, RigidTransform]


def render_view(scenario: Scenario, objects: Sequence[Placement], state, retain: bool = False) -> RenderOutput:
    cam = scenario.cfg.rig.camera(state)
    if scenario.cfg.sensor == "opaque":
        if retain:
            raise ValueError("opaque frames are not differentiable")
        return render_opaque_frame(scenario.scene, objects, cam, scenario.cfg.quad)
    return render_frame(scenario.scene, objects, cam, scenario.cfg.quad, retain=retain)


def goal_vector(net: PolicyNet, goal: int):
    if not net.goal_dim:
        return None
    if not 0 <= goal < net.goal_dim:
        raise ValueError(f"goal id {goal} outside 0..{net.goal_dim - 1}")
    return np.eye(net.goal_dim)[goal]


def sense(scenario: Scenario, objects: Sequence[Placement], state) -> np.ndarray:
    """Policy observation at ``state``."""
    img = render_view(scenario, objects, state).color
    return to_observation(img, scenario.policy.input_shape)


def rollout_closed_loop(scenario: Scenario, objects: Sequence[Placement] = (),
                        keep_frames: bool = False, camera_states=None) -> Tuple[Trajectory, float]:
    """Run the policy in closed loop for ``cfg.horizon`` steps.

    Returns the trajectory and ``J = -sum_t CTE(x_t)`` over t = 0..T.

    ``camera_states`` pins the camera of step t to ``camera_states[t]``
    instead of the current state. Pinning to a reference trajectory gives the
    stop-gradient functional whose derivative the adjoint computes exactly.
    """
    cfg = scenario.cfg
    goal = goal_vector(scenario.policy, cfg.goal)
    x = VehicleState(*cfg.initial_state)
    states, controls, costs = [x], [], [cte(x, scenario.path)[0]]
    frames = [] if keep_frames else None
    for t in range(cfg.horizon):
        obs = sense(scenario, objects, x if camera_states is None else camera_states[t])
        if keep_frames:
            frames.append(obs)
        u = policy_forward(scenario.policy, obs, goal)
        if not math.isfinite(u):
            raise RolloutDivergence(t, f"non-finite control {u}")
        x = dynamics_step(x, u, scenario.dynamics)
        if not all(math.isfinite(v) for v in x):
            raise RolloutDivergence(t + 1, f"non-finite state {tuple(x)}")
        states.append(x)
        controls.append(u)
        costs.append(cte(x, scenario.path)[0])
    traj = Trajectory(states, controls, costs, frames)
    return traj, -float(sum(costs))


def total_cte(traj: Trajectory, path: Optional[ReferencePath] = None) -> float:
    """Sum of per-state CTE; recomputed from the states when ``path`` is given."""
    if path is None:
        return float(sum(traj.costs))
    return float(sum(cte(s, path)[0] for s in traj.states))


def replay(traj: Trajectory, dynamics: DynamicsParams) -> List[VehicleState]:
    states = [traj.states[0]]
    for u in traj.controls:
        states.append(dynamics_step(states[-1], u, dynamics))
    return states


def write_trajectory_csv(path, traj: Trajectory) -> None:
    with open(path, "w", newline="") as fh:
        wr = csv.writer(fh)
        wr.writerow(["t", "x", "y", "heading", "u", "cte"])
        for t, (s, c) in enumerate(zip(traj.states, traj.costs)):
            u = f"{traj.controls[t]:.9g}" if t < len(traj.controls) else ""
            wr.writerow([t, f"{s.x:.9g}", f"{s.y:.9g}", f"{s.heading:.9g}", u, f"{c:.9g}"])


def read_trajectory_csv(path) -> Trajectory:
    states, controls, costs = [], [], []
    with open(path, newline="") as fh:
        for row in csv.DictReader(fh):
            states.append(VehicleState(float(row["x"]), float(row["y"]), float(row["heading"])))
            if row["u"]:
                controls.append(float(row["u"]))
            costs.append(float(row["cte"]))
    return Trajectory(states, controls, costs)
