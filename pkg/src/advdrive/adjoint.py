"""Adjoint gradient of the episode objective w.r.t. object color parameters.

Only the vehicle state (3 floats per step) is stored from the forward pass.
The backward pass re-renders one frame at a time, so peak memory does not
grow with the horizon.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable, List, Optional, Sequence

import numpy as np

from .paths import ReferencePath, cte
from .policy import observation_vjp, policy_input_grad, to_observation
from .render import render_vjp_color
from .rollout import Placement, Scenario, Trajectory, goal_vector, render_view
from .vehicle import DynamicsParams, dynamics_jacobians


@dataclass
class AdjointState:
    lambdas: List[np.ndarray]  # lambdas[t - 1] is lambda_t, t = 1..T

    def at(self, t: int) -> np.ndarray:
        if not 1 <= t <= len(self.lambdas):
            raise IndexError(f"lambda_{t} undefined for T = {len(self.lambdas)}")
        return self.lambdas[t - 1]


@dataclass
class ParamGradient:
    """Gradient of ``J = -total CTE`` per object color-parameter array."""

    grads: List[np.ndarray]

    def __neg__(self) -> "ParamGradient":
        return ParamGradient([-g for g in self.grads])

    def __add__(self, other: "ParamGradient") -> "ParamGradient":
        return ParamGradient([a + b for a, b in zip(self.grads, other.grads)])

    def scaled(self, s: float) -> "ParamGradient":
        return ParamGradient([s * g for g in self.grads])

    def flat(self) -> np.ndarray:
        return np.concatenate([g.ravel() for g in self.grads]) if self.grads else np.zeros(0)


def adjoint_backward(traj: Trajectory, dynamics: DynamicsParams, path: ReferencePath) -> AdjointState:
    """Costates of the discrete adjoint recursion.

    With ``C = -CTE``: ``lambda_T = dCTE/dx_T`` and
    ``lambda_t = dCTE/dx_t + A_t^T lambda_{t+1}`` where ``A_t`` is the
    dynamics Jacobian at step t. The render/policy path contributes no state
    Jacobian (camera pose is a stop-gradient input).
    """
    T = traj.horizon
    lambdas: List[Optional[np.ndarray]] = [None] * T
    lam = cte(traj.states[T], path)[1]
    lambdas[T - 1] = lam
    for t in range(T - 1, 0, -1):
        a, _ = dynamics_jacobians(traj.states[t], traj.controls[t], dynamics)
        lam = cte(traj.states[t], path)[1] + a.T @ lam
        if not np.all(np.isfinite(lam)):
            raise FloatingPointError(f"non-finite adjoint at step {t}")
        lambdas[t - 1] = lam
    return AdjointState(lambdas)


def control_sensitivities(traj: Trajectory, adj: AdjointState, dynamics: DynamicsParams) -> np.ndarray:
    """``s_t = lambda_{t+1} . df/du|_t`` for t = 0..T-1 (d total CTE / d u_t)."""
    s = np.empty(traj.horizon)
    for t in range(traj.horizon):
        _, b = dynamics_jacobians(traj.states[t], traj.controls[t], dynamics)
        s[t] = adj.at(t + 1) @ b
    return s


def assemble_param_gradient(traj: Trajectory, adj: AdjointState, scenario: Scenario,
                            objects: Sequence[Placement]) -> ParamGradient:
    """``grad_theta J`` by re-rendering each step and chaining VJPs.

    Per step: control sensitivity ``s_t``, then the policy's input cotangent
    seeded with ``s_t``, then the renderer's color VJP. The sum is the
    gradient of total CTE; ``J`` carries the opposite sign.
    """
    if scenario.cfg.sensor != "volumetric":
        raise ValueError("gradients need the volumetric sensor")
    if len(adj.lambdas) != traj.horizon:
        raise ValueError("adjoint does not belong to this trajectory")
    net = scenario.policy
    goal = goal_vector(net, scenario.cfg.goal)
    total = [np.zeros_like(obj.color_params) for obj, _ in objects]
    s = control_sensitivities(traj, adj, scenario.dynamics)
    for t in range(traj.horizon):
        if s[t] == 0.0 or not objects:
            continue
        frame = render_view(scenario, objects, traj.states[t], retain=True)
        if all(tr.ray_ids.size == 0 for tr in frame.state.traces):
            continue
        obs = to_observation(frame.color, net.input_shape)
        g_obs = policy_input_grad(net, obs, goal, seed=s[t])
        g_img = observation_vjp(g_obs, net.input_shape)
        for k, g in enumerate(render_vjp_color(frame.state, g_img)):
            if g.shape != total[k].shape:
                raise ValueError(f"object {k} gradient shape {g.shape} != {total[k].shape}")
            total[k] += g
        del frame
    for k, g in enumerate(total):
        if not np.all(np.isfinite(g)):
            raise FloatingPointError(f"non-finite gradient for object {k}")
    return ParamGradient([-g for g in total])


def objective_gradient(scenario: Scenario, objects: Sequence[Placement]):
    """Forward rollout plus adjoint backward: ``(traj, J, grad_theta J)``."""
    from .rollout import rollout_closed_loop

    traj, j = rollout_closed_loop(scenario, objects)
    adj = adjoint_backward(traj, scenario.dynamics, scenario.path)
    return traj, j, assemble_param_gradient(traj, adj, scenario, objects)


# --- finite-difference harness ---------------------------------------------

@dataclass
class FDProbe:
    index: int
    analytic: float
    numeric: float

    @property
    def rel_error(self) -> float:
        den = max(abs(self.analytic), abs(self.numeric))
        return 0.0 if den == 0.0 else abs(self.analytic - self.numeric) / den


def finite_difference_probes(loss: Callable[[np.ndarray], float], params, grad, n_probe: int = 20,
                             eps: float = 1e-4, seed: int = 0, candidates=None) -> List[FDProbe]:
    """Central differences at ``n_probe`` random coordinates of flat ``params``.

    ``candidates`` optionally restricts the coordinates sampled from.
    """
    if eps <= 0:
        raise ValueError("eps must be positive")
    p = np.array(params, dtype=np.float64).ravel()
    g = np.asarray(grad, dtype=np.float64).ravel()
    pool = np.arange(p.size) if candidates is None else np.asarray(candidates)
    rng = np.random.default_rng(seed)
    picks = rng.choice(pool, size=min(n_probe, pool.size), replace=False)
    out = []
    for i in picks:
        old = p[i]
        p[i] = old + eps
        fp = loss(p.copy())
        p[i] = old - eps
        fm = loss(p.copy())
        p[i] = old
        out.append(FDProbe(int(i), float(g[i]), (fp - fm) / (2 * eps)))
    return out


def finite_difference_check(loss, params, grad, n_probe: int = 20, eps: float = 1e-4, seed: int = 0,
                            candidates=None) -> float:
    """Worst relative error between analytic and central-difference gradients."""
    probes = finite_difference_probes(loss, params, grad, n_probe, eps, seed, candidates)
    return max((pr.rel_error for pr in probes), default=0.0)


def flatten_params(arrays: Sequence[np.ndarray]) -> np.ndarray:
    return np.concatenate([np.asarray(a).ravel() for a in arrays]) if arrays else np.zeros(0)


def unflatten_params(flat, like: Sequence[np.ndarray]) -> List[np.ndarray]:
    out, pos = [], 0
    for a in like:
        out.append(np.asarray(flat[pos:pos + a.size], dtype=np.float64).reshape(a.shape))
        pos += a.size
    if pos != len(flat):
        raise ValueError("flat parameter vector has the wrong length")
    return out
