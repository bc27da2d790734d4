"""Texture and pose attacks on inserted objects.

The objective reported everywhere is total CTE (larger is a stronger attack);
gradients come from the adjoint of ``J = -total CTE`` and Adam minimizes J.
"""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field as dc_field
from pathlib import Path
from typing import List, Optional, Sequence, Tuple

import numpy as np

from .adjoint import ParamGradient, objective_gradient
from .field import RigidTransform, VoxelField, save_field
from .rollout import (Placement, RolloutDivergence, Scenario, Trajectory, rollout_closed_loop,
                      write_trajectory_csv)

BETA1, BETA2, ADAM_EPS = 0.9, 0.999, 1e-8


@dataclass(frozen=True)
class AttackConfig:
    iterations: int = 50
    lr: float = 0.1
    random_std: float = 5.0
    n_initial_poses: int = 1
    initial_pose_std: float = 0.1
    init_std: float = 0.1   # spread of the gradient attack's starting texture
    seed: int = 0

    def __post_init__(self):
        if self.iterations < 1:
            raise ValueError("iterations must be >= 1")
        if not self.lr > 0:
            raise ValueError("learning rate must be positive")
        if self.random_std < 0 or self.initial_pose_std < 0 or self.init_std < 0:
            raise ValueError("standard deviations must be non-negative")
        if self.n_initial_poses < 1:
            raise ValueError("n_initial_poses must be >= 1")


@dataclass
class OptimizerState:
    m: List[np.ndarray]
    v: List[np.ndarray]
    step: int = 0

    @classmethod
    def zeros_like(cls, params: Sequence[np.ndarray]) -> "OptimizerState":
        return cls([np.zeros_like(p) for p in params], [np.zeros_like(p) for p in params])


def adam_step(state: OptimizerState, params: Sequence[np.ndarray], grads: Sequence[np.ndarray],
              lr: float) -> List[np.ndarray]:
    """One bias-corrected Adam step (descent). Updates ``state`` in place."""
    if len(params) != len(grads) or len(params) != len(state.m):
        raise ValueError("parameter, gradient and moment lists differ in length")
    state.step += 1
    c1 = 1.0 - BETA1 ** state.step
    c2 = 1.0 - BETA2 ** state.step
    out = []
    for k, (p, g) in enumerate(zip(params, grads)):
        if p.shape != g.shape or p.shape != state.m[k].shape:
            raise ValueError(f"shape mismatch in slot {k}")
        state.m[k] = BETA1 * state.m[k] + (1.0 - BETA1) * g
        state.v[k] = BETA2 * state.v[k] + (1.0 - BETA2) * g * g
        out.append(p - lr * (state.m[k] / c1) / (np.sqrt(state.v[k] / c2) + ADAM_EPS))
    return out


@dataclass
class AttackResult:
    method: str
    best_params: List[np.ndarray]
    best_objective: float
    history: List[float]            # objective of every counted evaluation
    best_history: List[float]       # running best of ``history``
    baseline: float                 # no objects inserted
    baseline_traj: Trajectory
    best_traj: Trajectory
    n_evaluations: int
    n_probe_evaluations: int = 0
    lr_reductions: int = 0
    aborted: bool = False
    events: List[str] = dc_field(default_factory=list)
    best_poses: Optional[List[np.ndarray]] = None

    def placements(self, objects: Sequence[Placement]) -> List[Placement]:
        xfs = [xf for _, xf in objects]
        if self.best_poses is not None:
            xfs = [RigidTransform.from_pose(p) for p in self.best_poses]
        return [(obj.with_color_params(p), xf) for (obj, _), p, xf in zip(objects, self.best_params, xfs)]


def with_colors(objects: Sequence[Placement], params: Sequence[np.ndarray]) -> List[Placement]:
    return [(obj.with_color_params(p), xf) for (obj, xf), p in zip(objects, params)]


def initial_states(scenario: Scenario, cfg: AttackConfig) -> List[Tuple[float, float, float]]:
    """Nominal start plus ``n_initial_poses - 1`` Gaussian-perturbed starts (x, y)."""
    x0 = tuple(scenario.cfg.initial_state)
    rng = np.random.default_rng([cfg.seed, 7])
    out = [x0]
    for _ in range(cfg.n_initial_poses - 1):
        dx, dy = rng.normal(0.0, cfg.initial_pose_std, 2)
        out.append((x0[0] + dx, x0[1] + dy, x0[2]))
    return out


def evaluate(scenario: Scenario, objects: Sequence[Placement], starts) -> Tuple[float, Trajectory]:
    """Mean total CTE over ``starts``; trajectory of the first start."""
    vals, first = [], None
    for s in starts:
        traj, j = rollout_closed_loop(scenario.with_initial_state(s), objects)
        vals.append(-j)
        first = first or traj
    return float(np.mean(vals)), first


def baseline(scenario: Scenario, starts) -> Tuple[float, Trajectory]:
    return evaluate(scenario, [], starts)


def _running_best(history: Sequence[float]) -> List[float]:
    return list(np.maximum.accumulate(np.asarray(history))) if history else []


def gradient_attack(scenario: Scenario, objects: Sequence[Placement], cfg: AttackConfig) -> AttackResult:
    """Adam on object color parameters using adjoint gradients.

    One forward rollout per start is evaluated per iteration, so the budget is
    ``iterations * n_initial_poses`` rollouts.
    """
    starts = initial_states(scenario, cfg)
    base, base_traj = baseline(scenario, starts)
    rng = np.random.default_rng([cfg.seed, 1])
    params = [obj.color_params + rng.normal(0.0, cfg.init_std, obj.color_params.shape) for obj, _ in objects]
    opt = OptimizerState.zeros_like(params)
    lr = cfg.lr
    history, events = [], []
    best, best_params, best_traj = -math.inf, None, None
    reductions, aborted, evals = 0, False, 0
    prev = None
    for it in range(cfg.iterations):
        placed = with_colors(objects, params)
        try:
            total, grad, traj0 = 0.0, None, None
            for s in starts:
                traj, j, g = objective_gradient(scenario.with_initial_state(s), placed)
                total += -j
                grad = g if grad is None else grad + g
                traj0 = traj0 or traj
            evals += len(starts)
        except (RolloutDivergence, FloatingPointError) as exc:
            evals += len(starts)
            events.append(f"iteration {it}: {exc}")
            if reductions or prev is None:
                aborted = True
                events.append("aborting after repeated divergence")
                break
            reductions += 1
            lr *= 0.5
            params, opt = prev
            continue
        obj_val = total / len(starts)
        history.append(obj_val)
        if obj_val > best:
            best, best_params, best_traj = obj_val, [p.copy() for p in params], traj0
        prev = ([p.copy() for p in params], OptimizerState([m.copy() for m in opt.m], [v.copy() for v in opt.v], opt.step))
        if it < cfg.iterations - 1:
            params = adam_step(opt, params, grad.scaled(1.0 / len(starts)).grads, lr)
    if best_params is None:
        best_params, best_traj, best = [p.copy() for p in params], base_traj, base
    return AttackResult("gradient", best_params, best, history, _running_best(history), base, base_traj,
                        best_traj, evals, 0, reductions, aborted, events)


def random_search_attack(scenario: Scenario, objects: Sequence[Placement], cfg: AttackConfig) -> AttackResult:
    """Best of ``iterations`` i.i.d. N(0, random_std^2) color parameter draws."""
    starts = initial_states(scenario, cfg)
    base, base_traj = baseline(scenario, starts)
    rng = np.random.default_rng([cfg.seed, 2])
    history, events = [], []
    best, best_params, best_traj = -math.inf, None, None
    evals = 0
    for it in range(cfg.iterations):
        params = [rng.normal(0.0, 1.0, obj.color_params.shape) * cfg.random_std for obj, _ in objects]
        evals += len(starts)
        try:
            val, traj = evaluate(scenario, with_colors(objects, params), starts)
        except RolloutDivergence as exc:
            events.append(f"sample {it}: {exc}")
            continue
        history.append(val)
        if val > best:
            best, best_params, best_traj = val, params, traj
    if best_params is None:
        best_params, best_traj, best = [np.zeros_like(o.color_params) for o, _ in objects], base_traj, base
    return AttackResult("random", best_params, best, history, _running_best(history), base, base_traj,
                        best_traj, evals, 0, 0, False, events)


# --- pose -----------------------------------------------------------------

POSE_NAMES = ("tx", "ty", "tz", "roll", "pitch", "yaw", "log_scale")


@dataclass(frozen=True)
class PoseBounds:
    """Box over ``(tx, ty, tz, roll, pitch, yaw, log_scale)``."""

    lo: Tuple[float, ...]
    hi: Tuple[float, ...]

    def __post_init__(self):
        lo, hi = np.asarray(self.lo, float), np.asarray(self.hi, float)
        if lo.shape != (7,) or hi.shape != (7,):
            raise ValueError("pose bounds need 7 entries")
        if np.any(lo > hi) or not (np.all(np.isfinite(lo)) and np.all(np.isfinite(hi))):
            raise ValueError("pose bounds must be finite with lo <= hi")

    @classmethod
    def around(cls, xf: RigidTransform, dxy: float, yaw_range: float) -> "PoseBounds":
        """Translation box of half-width ``dxy`` in the ground plane and a yaw interval."""
        p = pose_of(xf)
        lo, hi = p.copy(), p.copy()
        lo[:2] -= dxy
        hi[:2] += dxy
        lo[5] -= yaw_range
        hi[5] += yaw_range
        return cls(tuple(lo), tuple(hi))

    def project(self, p) -> np.ndarray:
        return np.clip(p, self.lo, self.hi)

    def free(self) -> np.ndarray:
        return np.nonzero(np.asarray(self.hi) > np.asarray(self.lo))[0]


def pose_of(xf: RigidTransform) -> np.ndarray:
    r = xf.rotation
    pitch = math.asin(-max(-1.0, min(1.0, r[2, 0])))
    roll = math.atan2(r[2, 1], r[2, 2])
    yaw = math.atan2(r[1, 0], r[0, 0])
    return np.array([*xf.translation, roll, pitch, yaw, math.log(xf.scale)])


@dataclass(frozen=True)
class PoseAttackConfig:
    starts: int = 5
    steps: int = 10
    pose_lr: float = 0.05
    pose_eps: Tuple[float, ...] = (0.02, 0.02, 0.02, 0.02, 0.02, 0.02, 0.02)
    texture: AttackConfig = AttackConfig()
    target: int = 0   # index of the object whose pose is searched


def multistart_pose_attack(scenario: Scenario, objects: Sequence[Placement], bounds: PoseBounds,
                           cfg: PoseAttackConfig = PoseAttackConfig()) -> AttackResult:
    """Uniform pose seeds refined by FD pose ascent interleaved with color Adam.

    Counted evaluations: ``starts * steps`` objective rollouts. The central
    difference probes are tallied separately in ``n_probe_evaluations``.
    """
    tcfg = cfg.texture
    starts = initial_states(scenario, tcfg)
    base, base_traj = baseline(scenario, starts)
    rng = np.random.default_rng([tcfg.seed, 3])
    lo, hi = np.asarray(bounds.lo), np.asarray(bounds.hi)
    free = bounds.free()
    eps = np.asarray(cfg.pose_eps, dtype=np.float64)
    history, events = [], []
    best, best_params, best_pose, best_traj = -math.inf, None, None, None
    evals = probes = 0

    def placed_with(params, pose):
        out = with_colors(objects, params)
        out[cfg.target] = (out[cfg.target][0], RigidTransform.from_pose(pose))
        return out

    for k in range(cfg.starts):
        pose = lo + rng.uniform(0.0, 1.0, 7) * (hi - lo)
        params = [obj.color_params + rng.normal(0.0, tcfg.init_std, obj.color_params.shape) for obj, _ in objects]
        opt = OptimizerState.zeros_like(params)
        popt = OptimizerState.zeros_like([pose])
        for step in range(cfg.steps):
            placed = placed_with(params, pose)
            try:
                total, grad = 0.0, None
                traj0 = None
                for s in starts:
                    traj, j, g = objective_gradient(scenario.with_initial_state(s), placed)
                    total += -j
                    grad = g if grad is None else grad + g
                    traj0 = traj0 or traj
            except (RolloutDivergence, FloatingPointError) as exc:
                evals += 1
                events.append(f"start {k} step {step}: {exc}")
                break
            evals += 1
            val = total / len(starts)
            history.append(val)
            if val > best:
                best, best_params, best_pose, best_traj = val, [p.copy() for p in params], pose.copy(), traj0
            if step == cfg.steps - 1:
                break
            # Central differences of total CTE over the free pose coordinates.
            gpose = np.zeros(7)
            for i in free:
                e = np.zeros(7)
                e[i] = eps[i]
                fp = evaluate(scenario, placed_with(params, bounds.project(pose + e)), starts)[0]
                fm = evaluate(scenario, placed_with(params, bounds.project(pose - e)), starts)[0]
                probes += 2
                gpose[i] = (fp - fm) / (2 * eps[i])
            # Ascent on CTE is descent on -CTE.
            pose = bounds.project(adam_step(popt, [pose], [-gpose], cfg.pose_lr)[0])
            params = adam_step(opt, params, grad.scaled(1.0 / len(starts)).grads, tcfg.lr)
    if best_params is None:
        best_params = [o.color_params.copy() for o, _ in objects]
        best_pose, best_traj, best = pose_of(objects[cfg.target][1]), base_traj, base
    poses = [pose_of(xf) for _, xf in objects]
    poses[cfg.target] = best_pose
    return AttackResult("pose", best_params, best, history, _running_best(history), base, base_traj,
                        best_traj, evals, probes, 0, False, events, poses)


# --- persistence ----------------------------------------------------------

def write_attack_manifest(out_dir, result: AttackResult, objects: Sequence[Placement], config: dict) -> Path:
    """Save best fields and trajectories plus a JSON manifest; returns its path."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    field_paths = []
    for k, placed in enumerate(result.placements(objects)):
        p = out / f"object{k}.vxf"
        save_field(p, placed[0])
        # Float64 copy so re-evaluation reproduces the reported objective exactly.
        np.save(out / f"object{k}_color.npy", placed[0].color_params)
        field_paths.append(p.name)
    write_trajectory_csv(out / "best_traj.csv", result.best_traj)
    write_trajectory_csv(out / "baseline_traj.csv", result.baseline_traj)
    manifest = {
        "config": config,
        "method": result.method,
        "baseline": result.baseline,
        "best_objective": result.best_objective,
        "n_evaluations": result.n_evaluations,
        "n_probe_evaluations": result.n_probe_evaluations,
        "lr_reductions": result.lr_reductions,
        "aborted": result.aborted,
        "events": result.events,
        "iterations": [{"i": i, "objective": h, "best": b}
                       for i, (h, b) in enumerate(zip(result.history, result.best_history))],
        "fields": field_paths,
        "poses": None if result.best_poses is None else [list(map(float, p)) for p in result.best_poses],
        "trajectories": {"best": "best_traj.csv", "baseline": "baseline_traj.csv"},
    }
    path = out / "manifest.json"
    path.write_text(json.dumps(manifest, indent=1, sort_keys=True))
    return path
