"""Image-to-steering policy, expert controller and behavior cloning.

The network is fully connected on a flattened grayscale image, optionally
concatenated with a one-hot goal. Hidden layers use tanh and the output is
squashed to ``steering_limit * tanh(.)``. Reverse mode is written out by hand.
"""

from __future__ import annotations

import csv
import math
import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, List, Optional, Sequence, Tuple

import numpy as np

from .paths import ReferencePath
from .vehicle import VehicleState, wrap_angle

LUMA = np.array([0.299, 0.587, 0.114])
_MAGIC = b"PNET"
_VERSION = 1


@dataclass
class PolicyNet:
    sizes: List[int]
    weights: List[np.ndarray]
    biases: List[np.ndarray]
    input_shape: Tuple[int, int, int]
    goal_dim: int = 0
    steering_limit: float = 2.0

    def __post_init__(self):
        h, w, c = self.input_shape
        if self.sizes[0] != h * w * c + self.goal_dim:
            raise ValueError("first layer size must equal the flattened input length")
        if self.sizes[-1] != 1:
            raise ValueError("the output layer must have size 1")
        for k, (wk, bk) in enumerate(zip(self.weights, self.biases)):
            if wk.shape != (self.sizes[k + 1], self.sizes[k]) or bk.shape != (self.sizes[k + 1],):
                raise ValueError(f"layer {k} shape does not chain with sizes {self.sizes}")
        if not all(np.all(np.isfinite(p)) for p in self.weights + self.biases):
            raise ValueError("non-finite policy parameters")

    @classmethod
    def init(cls, input_shape=(32, 32, 1), hidden=(64, 32), goal_dim=0, steering_limit=2.0, seed=0):
        h, w, c = input_shape
        sizes = [h * w * c + goal_dim, *hidden, 1]
        rng = np.random.default_rng(seed)
        weights = [rng.normal(0.0, 1.0 / math.sqrt(sizes[k]), (sizes[k + 1], sizes[k])) for k in range(len(sizes) - 1)]
        biases = [np.zeros(sizes[k + 1]) for k in range(len(sizes) - 1)]
        return cls(sizes, weights, biases, tuple(input_shape), goal_dim, steering_limit)

    @classmethod
    def zeros(cls, input_shape=(32, 32, 1), hidden=(64, 32), goal_dim=0, steering_limit=2.0):
        net = cls.init(input_shape, hidden, goal_dim, steering_limit)
        net.weights = [np.zeros_like(w) for w in net.weights]
        return net

    def params(self) -> List[np.ndarray]:
        return [p for pair in zip(self.weights, self.biases) for p in pair]

    def copy(self) -> "PolicyNet":
        return PolicyNet(list(self.sizes), [w.copy() for w in self.weights], [b.copy() for b in self.biases],
                         self.input_shape, self.goal_dim, self.steering_limit)

    def quantized(self) -> "PolicyNet":
        q = lambda a: a.astype(np.float32).astype(np.float64)
        return PolicyNet(list(self.sizes), [q(w) for w in self.weights], [q(b) for b in self.biases],
                         self.input_shape, self.goal_dim, float(np.float32(self.steering_limit)))


def to_observation(image, input_shape) -> np.ndarray:
    """Rendered RGB (H, W, 3) to the policy's (H, W, C) input."""
    img = np.asarray(image, dtype=np.float64)
    if input_shape[2] == 1:
        return (img @ LUMA)[..., None]
    return img


def observation_vjp(grad_obs, input_shape) -> np.ndarray:
    g = np.asarray(grad_obs, dtype=np.float64)
    if input_shape[2] == 1:
        return g[..., 0][..., None] * LUMA
    return g


def _inputs(net: PolicyNet, obs, goal) -> np.ndarray:
    obs = np.asarray(obs, dtype=np.float64)
    if obs.shape[-3:] != tuple(net.input_shape):
        raise ValueError(f"observation shape {obs.shape} does not match input spec {net.input_shape}")
    lead = obs.shape[:-3]
    x = obs.reshape(lead + (-1,))
    if net.goal_dim:
        if goal is None:
            raise ValueError("this policy expects a goal one-hot")
        g = np.broadcast_to(np.asarray(goal, dtype=np.float64), lead + (net.goal_dim,))
        x = np.concatenate([x, g], axis=-1)
    elif goal is not None and np.size(goal):
        raise ValueError("this policy takes no goal input")
    return x


def _forward(net: PolicyNet, x: np.ndarray):
    acts = [x]
    h = x
    for k, (w, b) in enumerate(zip(net.weights, net.biases)):
        z = h @ w.T + b
        h = np.tanh(z)
        acts.append(h)
    return acts


def policy_forward(net: PolicyNet, obs, goal=None) -> float:
    acts = _forward(net, _inputs(net, obs, goal))
    return float(net.steering_limit * acts[-1][0])


def policy_forward_batch(net: PolicyNet, obs, goal=None) -> np.ndarray:
    acts = _forward(net, _inputs(net, obs, goal))
    return net.steering_limit * acts[-1][..., 0]


def policy_input_grad(net: PolicyNet, obs, goal=None, seed: float = 1.0) -> np.ndarray:
    """``seed * du/d(obs)`` with the shape of ``obs``."""
    acts = _forward(net, _inputs(net, obs, goal))
    g = np.array([seed * net.steering_limit])
    for k in range(len(net.weights) - 1, -1, -1):
        g = (g * (1.0 - acts[k + 1] ** 2)) @ net.weights[k]
    n_img = int(np.prod(net.input_shape))
    return g[:n_img].reshape(net.input_shape)


def _backward_batch(net: PolicyNet, acts, g_out):
    """Parameter gradients for per-sample output cotangents ``g_out`` (B,)."""
    g = (g_out * net.steering_limit)[:, None]
    gw, gb = [None] * len(net.weights), [None] * len(net.weights)
    for k in range(len(net.weights) - 1, -1, -1):
        gz = g * (1.0 - acts[k + 1] ** 2)
        gw[k] = gz.T @ acts[k]
        gb[k] = gz.sum(axis=0)
        g = gz @ net.weights[k]
    return gw, gb


# --- expert ---------------------------------------------------------------

@dataclass(frozen=True)
class ExpertConfig:
    lookahead: float = 0.6
    gain: float = 3.0
    steering_limit: float = 2.0

    def __post_init__(self):
        if not (self.lookahead > 0 and self.gain > 0 and self.steering_limit > 0):
            raise ValueError("expert lookahead, gain and steering limit must be positive")


def expert_control(state, path: ReferencePath, cfg: ExpertConfig = ExpertConfig()) -> float:
    """Pure pursuit on the ground-truth state: steer toward the path point
    ``lookahead`` meters past the closest point."""
    x, y, th = float(state[0]), float(state[1]), float(state[2])
    _, arc, _ = path.project((x, y))
    target = path.point_at(arc + cfg.lookahead)
    if not path.closed and arc + cfg.lookahead > path.length:
        # Extend the last segment so the target never collapses onto the end.
        target = path.waypoints[-1] + (arc + cfg.lookahead - path.length) * path.tangent_at(path.length)
    bearing = wrap_angle(math.atan2(target[1] - y, target[0] - x) - th)
    u = cfg.gain * bearing
    return float(min(max(u, -cfg.steering_limit), cfg.steering_limit))


# --- data -----------------------------------------------------------------

@dataclass
class ImitationDataset:
    observations: np.ndarray  # (N, H, W, C)
    goals: np.ndarray         # (N,) int, -1 for none
    labels: np.ndarray        # (N,)
    states: Optional[np.ndarray] = None  # (N, 3)

    def __len__(self):
        return self.labels.shape[0]

    def split(self, val_fraction: float, seed: int = 0):
        rng = np.random.default_rng(seed)
        perm = rng.permutation(len(self))
        n_val = int(round(val_fraction * len(self)))
        return self.subset(perm[n_val:]), self.subset(perm[:n_val])

    def subset(self, idx) -> "ImitationDataset":
        return ImitationDataset(self.observations[idx], self.goals[idx], self.labels[idx],
                                None if self.states is None else self.states[idx])

    @staticmethod
    def concatenate(parts: Sequence["ImitationDataset"]) -> "ImitationDataset":
        states = None
        if all(p.states is not None for p in parts):
            states = np.concatenate([p.states for p in parts])
        return ImitationDataset(np.concatenate([p.observations for p in parts]),
                                np.concatenate([p.goals for p in parts]),
                                np.concatenate([p.labels for p in parts]), states)

    def goal_onehots(self, goal_dim: int) -> Optional[np.ndarray]:
        if not goal_dim:
            return None
        return np.eye(goal_dim)[self.goals]


def sample_states(path: ReferencePath, n: int, lateral_std: float, heading_std: float,
                  rng: np.random.Generator) -> np.ndarray:
    """States scattered around the reference: uniform arc length, Gaussian
    lateral and heading offsets relative to the local tangent."""
    arcs = rng.uniform(0.0, path.length, n)
    lat = rng.normal(0.0, 1.0, n) * lateral_std
    head = rng.normal(0.0, 1.0, n) * heading_std
    out = np.empty((n, 3))
    for i in range(n):
        p = path.point_at(arcs[i])
        t = path.tangent_at(arcs[i])
        normal = np.array([-t[1], t[0]])
        q = p + lat[i] * normal
        out[i] = q[0], q[1], wrap_angle(math.atan2(t[1], t[0]) + head[i])
    return out


def generate_dataset(sensors: Sequence[Callable], path: ReferencePath, expert: ExpertConfig,
                     n: int, lateral_std: float = 0.15, heading_std: float = 0.15,
                     seed: int = 0, goal: int = -1, states=None) -> ImitationDataset:
    """Render ``n`` expert-labelled observations per sensor.

    Each sensor maps a state to a policy observation. The same sampled states
    are used for every sensor.
    """
    if n < 1:
        raise ValueError("n must be >= 1")
    rng = np.random.default_rng(seed)
    if states is None:
        states = sample_states(path, n, lateral_std, heading_std, rng)
    labels = np.array([expert_control(s, path, expert) for s in states])
    obs, lab, st = [], [], []
    for sensor in sensors:
        obs.append(np.stack([sensor(s) for s in states]))
        lab.append(labels)
        st.append(states)
    obs = np.concatenate(obs)
    return ImitationDataset(obs, np.full(obs.shape[0], goal, dtype=np.int64), np.concatenate(lab),
                            np.concatenate(st))


# --- training -------------------------------------------------------------

@dataclass
class TrainResult:
    net: PolicyNet
    loss_history: List[float]
    val_history: List[float]


def mse(net: PolicyNet, data: ImitationDataset) -> float:
    if len(data) == 0:
        return float("nan")
    pred = policy_forward_batch(net, data.observations, data.goal_onehots(net.goal_dim))
    return float(np.mean((pred - data.labels) ** 2))


def train_policy_bc(data: ImitationDataset, net: PolicyNet, epochs: int = 60, lr: float = 1e-3,
                    batch_size: int = 64, noise_std: float = 0.02, seed: int = 0,
                    val_data: Optional[ImitationDataset] = None) -> TrainResult:
    """Minimize mean squared steering error with Adam.

    Gaussian pixel noise of ``noise_std`` is added to each minibatch.
    ``loss_history[0]`` is the training loss at initialization.
    """
    if len(data) == 0:
        raise ValueError("empty dataset")
    net = net.copy()
    rng = np.random.default_rng(seed)
    goals = data.goal_onehots(net.goal_dim)
    params = net.params()
    m = [np.zeros_like(p) for p in params]
    v = [np.zeros_like(p) for p in params]
    b1, b2, eps = 0.9, 0.999, 1e-8
    step = 0
    history = [mse(net, data)]
    val_history = [mse(net, val_data)] if val_data is not None else []
    n = len(data)
    for _ in range(epochs):
        perm = rng.permutation(n)
        for start in range(0, n, batch_size):
            idx = perm[start:start + batch_size]
            obs = data.observations[idx]
            if noise_std > 0:
                obs = obs + rng.normal(0.0, noise_std, obs.shape)
            x = _inputs(net, obs, None if goals is None else goals[idx])
            acts = _forward(net, x)
            pred = net.steering_limit * acts[-1][:, 0]
            g_out = 2.0 * (pred - data.labels[idx]) / len(idx)
            gw, gb = _backward_batch(net, acts, g_out)
            grads = [g for pair in zip(gw, gb) for g in pair]
            step += 1
            for k, (p, g) in enumerate(zip(params, grads)):
                m[k] = b1 * m[k] + (1 - b1) * g
                v[k] = b2 * v[k] + (1 - b2) * g * g
                mhat = m[k] / (1 - b1 ** step)
                vhat = v[k] / (1 - b2 ** step)
                p -= lr * mhat / (np.sqrt(vhat) + eps)
        history.append(mse(net, data))
        if val_data is not None:
            val_history.append(mse(net, val_data))
    return TrainResult(net, history, val_history)


# --- files ----------------------------------------------------------------

def save_policy(path, net: PolicyNet) -> None:
    h, w, c = net.input_shape
    header = struct.pack("<4sII", _MAGIC, _VERSION, len(net.sizes))
    header += struct.pack(f"<{len(net.sizes)}I", *net.sizes)
    header += struct.pack("<4If", h, w, c, net.goal_dim, net.steering_limit)
    body = b"".join(p.astype("<f4").tobytes() for p in net.params())
    Path(path).write_bytes(header + body)


def load_policy(path) -> PolicyNet:
    data = Path(path).read_bytes()
    magic, version, n = struct.unpack_from("<4sII", data)
    if magic != _MAGIC or version != _VERSION:
        raise ValueError(f"{path}: not a policy snapshot")
    off = 12
    sizes = list(struct.unpack_from(f"<{n}I", data, off))
    off += 4 * n
    h, w, c, goal_dim, limit = struct.unpack_from("<4If", data, off)
    off += 20
    body = np.frombuffer(data, dtype="<f4", offset=off).astype(np.float64)
    weights, biases, pos = [], [], 0
    for k in range(n - 1):
        nw = sizes[k + 1] * sizes[k]
        weights.append(body[pos:pos + nw].reshape(sizes[k + 1], sizes[k]))
        pos += nw
        biases.append(body[pos:pos + sizes[k + 1]].copy())
        pos += sizes[k + 1]
    if pos != body.size:
        raise ValueError(f"{path}: parameter count mismatch")
    return PolicyNet(sizes, weights, biases, (h, w, c), goal_dim, float(limit))


def save_dataset(directory, data: ImitationDataset) -> None:
    """PPM image per record plus ``index.csv`` of (filename, goal, steering)."""
    from .render import write_ppm

    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    with open(d / "index.csv", "w", newline="") as fh:
        wr = csv.writer(fh)
        wr.writerow(["filename", "goal", "steering"])
        for i in range(len(data)):
            name = f"{i:06d}.ppm"
            write_ppm(d / name, data.observations[i][..., 0] if data.observations.shape[-1] == 1
                      else data.observations[i])
            wr.writerow([name, int(data.goals[i]), repr(float(data.labels[i]))])


def load_dataset(directory, channels: int = 1) -> ImitationDataset:
    from .render import read_ppm

    d = Path(directory)
    obs, goals, labels = [], [], []
    with open(d / "index.csv", newline="") as fh:
        for row in csv.DictReader(fh):
            img = read_ppm(d / row["filename"])
            obs.append(img[..., :1] if channels == 1 else img)
            goals.append(int(row["goal"]))
            labels.append(float(row["steering"]))
    return ImitationDataset(np.stack(obs), np.array(goals, dtype=np.int64), np.array(labels))
