"""Acceptance criteria, one test each, with a PASS/FAIL line per criterion.

Criteria 5 through 9 read the default run directory (``runs/default`` or
``$ADVDRIVE_RUN``). It is regenerated when missing or stale relative to
``configs/default.cfg``; that takes roughly a quarter of an hour on one core.
"""

import json
import math
import os
import time
import tracemalloc
from dataclasses import replace
from pathlib import Path

import numpy as np
import pytest
import torch

from advdrive.adjoint import (adjoint_backward, assemble_param_gradient, finite_difference_probes,
                              flatten_params, objective_gradient, unflatten_params)
from advdrive.attack import gradient_attack, random_search_attack
from advdrive.config import load_scene_config
from advdrive.field import Aabb, VoxelField, inverse_softplus
from advdrive.pipeline import STAGES, Workspace, run_pipeline
from advdrive.recon import heldout_psnr, load_posed_images
from advdrive.render import composite_layers, composite_pixel, march_field
from advdrive.rollout import rollout_closed_loop, total_cte
from conftest import record_criterion, tiny_scenario, visible_box
from torch_oracle import torch_total_cte

ROOT = Path(__file__).resolve().parents[1]
CONFIG = ROOT / "configs" / "default.cfg"


@pytest.fixture(scope="module")
def default_run():
    cfg = load_scene_config(CONFIG)
    out = Path(os.environ.get("ADVDRIVE_RUN", ROOT / "runs" / "default"))
    man = out / "manifest.json"
    fresh = (man.exists() and (out / "retrain.json").exists()
             and json.loads(man.read_text())["config_hash"] == cfg.hash())
    if not fresh:
        run_pipeline(cfg, STAGES, out=out)
    return cfg, out


def place(objects, params):
    return [(o.with_color_params(p), xf) for (o, xf), p in zip(objects, params)]


# 1 -----------------------------------------------------------------------

def test_criterion_1_gradient_matches_fd(small_scene):
    t0 = time.perf_counter()
    rng = np.random.default_rng(11)
    sc = tiny_scenario(small_scene, horizon=5, image=16, samples=32)
    objects = visible_box(rng, res=4)
    traj, _, grad = objective_gradient(sc, objects)
    like = [o.color_params for o, _ in objects]
    g = grad.flat()

    def pinned(flat):
        return rollout_closed_loop(sc, place(objects, unflatten_params(flat, like)), camera_states=traj.states)[1]

    def free(flat):
        return rollout_closed_loop(sc, place(objects, unflatten_params(flat, like)))[1]

    # probe coordinates the objective actually depends on
    cand = np.nonzero(np.abs(g) >= 1e-4 * np.abs(g).max())[0]
    probes = finite_difference_probes(pinned, flatten_params(like), g, 20, 1e-4, seed=0, candidates=cand)
    worst = max(p.rel_error for p in probes)
    elapsed = time.perf_counter() - t0
    loose = finite_difference_probes(free, flatten_params(like), g, 20, 1e-4, seed=0, candidates=cand)
    info = max(p.rel_error for p in loose)
    ok = worst < 1e-3 and len(probes) >= 20 and elapsed <= 120
    record_criterion(1, ok, f"max rel err {worst:.2e} over {len(probes)} probes in {elapsed:.1f}s "
                            f"(free-camera FD, informational: {info:.2e})")
    assert ok


# 2 -----------------------------------------------------------------------

def test_criterion_2_adjoint_equals_unroll(small_scene):
    rng = np.random.default_rng(12)
    sc = tiny_scenario(small_scene, horizon=3, image=8, samples=16, compiled=False)
    # CTE is not differentiable where it vanishes, so start just off the path
    sc = sc.with_initial_state((0.0, 0.05, 0.1))
    objects = visible_box(rng, res=4)
    traj, j, grad = objective_gradient(sc, objects)
    thetas = [torch.tensor(o.color_params, requires_grad=True) for o, _ in objects]
    total = torch_total_cte(sc, objects, thetas, traj.states)
    total.backward()
    oracle = -np.concatenate([t.grad.numpy().ravel() for t in thetas])
    rel = float(np.max(np.abs(grad.flat() - oracle)) / np.max(np.abs(oracle)))
    ok = rel <= 1e-8 and abs(float(total.detach()) + j) <= 1e-10 * abs(j)
    record_criterion(2, ok, f"max |adjoint - unroll| / max |unroll| = {rel:.2e}")
    assert ok


# 3 -----------------------------------------------------------------------

def backward_peak(scen, objects):
    traj, _ = rollout_closed_loop(scen, objects)
    adj = adjoint_backward(traj, scen.dynamics, scen.path)
    assemble_param_gradient(traj, adj, scen, objects)
    tracemalloc.start()
    tracemalloc.reset_peak()
    assemble_param_gradient(traj, adj, scen, objects)
    peak = tracemalloc.get_traced_memory()[1]
    tracemalloc.stop()
    return peak


def test_criterion_3_constant_memory(small_scene):
    objects = visible_box(np.random.default_rng(13), position=(1.0, 0.0, 0.25))
    p10 = backward_peak(tiny_scenario(small_scene, horizon=10), objects)
    p100 = backward_peak(tiny_scenario(small_scene, horizon=100), objects)
    ratio = p100 / p10
    ok = ratio <= 1.3
    record_criterion(3, ok, f"peak backward memory T=100 / T=10 = {ratio:.3f} ({p100 / 1e6:.2f} MB)")
    assert ok


# 4 -----------------------------------------------------------------------

def test_criterion_4_renderer_physics():
    errs = []
    for sigma in (0.25, 1.0, 4.0):
        f = VoxelField.constant((2, 2, 2), Aabb([0, -1, -1], [1.0, 1, 1]), density=float(inverse_softplus(sigma)))
        r = march_field(f, [[0, 0, 0]], [[1, 0, 0]], 256, 0.0, 1.0)
        errs.append(abs(r.alpha[0] - (1 - math.exp(-sigma))))
    cases = [
        # (entries, expected color, alpha, depth)
        ([((0, 0, 0), 1.0, 2.0), ((1, 0, 0), 0.5, 1.0)], (0.5, 0, 0), 1.0, 1.0),
        ([((0.2, 0.3, 0.4), 0.7, 3.0), ((1, 1, 1), 0.0, 0.0)], (0.2, 0.3, 0.4), 0.7, 3.0),
        ([((0.2, 0.3, 0.4), 0.9, 3.0), ((0.9, 0.1, 0.5), 1.0, 1.0)], (0.9, 0.1, 0.5), 1.0, 1.0),
    ]
    comp = 0.0
    for ents, col, a, z in cases:
        c1, a1, z1 = composite_pixel(ents)
        comp = max(comp, float(np.max(np.abs(np.asarray(c1) - col))), abs(a1 - a), abs(z1 - z))
        pm = np.stack([np.asarray(e[0], float) * e[1] for e in ents])[:, None, :]
        c2, a2, z2, _ = composite_layers(pm, np.array([[e[1]] for e in ents]), np.array([[e[2]] for e in ents]))
        comp = max(comp, float(np.max(np.abs(c2[0] - np.asarray(col) * a))), abs(a2[0] - a), abs(z2[0] - z))
    ok = max(errs) < 1e-3 and comp <= 1e-12
    record_criterion(4, ok, f"slab alpha err {max(errs):.2e} (256 samples); compositing err {comp:.1e}")
    assert ok


# 5 -----------------------------------------------------------------------

def attack_manifest(out, seed, method):
    return json.loads((out / "attacks" / f"seed{seed}" / method / "manifest.json").read_text())


def test_criterion_5_attack_ordering(default_run):
    cfg, out = default_run
    seeds = cfg.seeds()
    grad = [attack_manifest(out, s, "gradient") for s in seeds]
    rand = [attack_manifest(out, s, "random") for s in seeds]
    base = grad[0]["baseline"]
    g = np.mean([m["best_objective"] for m in grad])
    r = np.mean([m["best_objective"] for m in rand])
    budgets = {m["n_evaluations"] for m in grad + rand}
    # wall time: one seed of both methods, re-run now, scaled to all seeds
    ws = Workspace(cfg, out)
    scen, objects = ws.scenario("volumetric"), ws.objects()
    t0 = time.perf_counter()
    again_g = gradient_attack(scen, objects, cfg.attack_config(seeds[0]))
    again_r = random_search_attack(scen, objects, cfg.attack_config(seeds[0]))
    elapsed = (time.perf_counter() - t0) * len(seeds)
    assert again_g.best_objective == grad[0]["best_objective"]
    assert again_r.best_objective == rand[0]["best_objective"]
    ok = g >= 1.5 * base and g >= 1.3 * r and budgets == {cfg["attack"]["iterations"]} and elapsed <= 1800
    record_criterion(5, ok, f"surrogate unperturbed {base:.3f}, random {r:.3f}, gradient {g:.3f} "
                            f"(x{g / base:.2f} over unperturbed, x{g / r:.2f} over random; budget {budgets}); "
                            f"est. attack time {elapsed / 60:.1f} min")
    assert ok


# 6 -----------------------------------------------------------------------

def test_criterion_6_transfer(default_run):
    cfg, out = default_run
    ws = Workspace(cfg, out)
    seeds = cfg.seeds()
    dep = ws.scenario("opaque")
    objects = ws.objects()
    base = total_cte(rollout_closed_loop(dep)[0])
    grad = [total_cte(rollout_closed_loop(dep, place(objects, ws.attack_params(s, "gradient")))[0]) for s in seeds]
    rand = [total_cte(rollout_closed_loop(dep, place(objects, ws.attack_params(s, "random")))[0]) for s in seeds]
    stored = json.loads((out / "transfer.json").read_text())
    assert stored["unperturbed"] == base
    hits = sum(v >= 1.2 * base for v in grad)
    rand_ratio = np.mean(rand) / base
    ok = hits >= 4 and rand_ratio <= 1.2
    per = ", ".join(f"{v / base:.2f}" for v in rand)
    record_criterion(6, ok, f"deployment unperturbed {base:.3f}; gradient >= 1.2x on {hits}/{len(seeds)} seeds "
                            f"(mean x{np.mean(grad) / base:.2f}); random mean x{rand_ratio:.3f} (per seed {per})")
    assert ok


# 7 -----------------------------------------------------------------------

def test_criterion_7_surrogate_fidelity(default_run):
    cfg, out = default_run
    ws = Workspace(cfg, out)
    held = load_posed_images(out / "capture" / "heldout")
    p = heldout_psnr(ws.surrogate(), held, cfg.quad())
    sur = total_cte(rollout_closed_loop(ws.scenario("volumetric"))[0])
    dep = total_cte(rollout_closed_loop(ws.scenario("opaque"))[0])
    gap = abs(sur - dep) / dep
    ok = p >= 25.0 and gap <= 0.25
    record_criterion(7, ok, f"held-out PSNR {p:.2f} dB; unperturbed CTE surrogate {sur:.3f} vs deployment "
                            f"{dep:.3f} (gap {100 * gap:.1f}%)")
    assert ok


# 8 -----------------------------------------------------------------------

def test_criterion_8_policy_competence(default_run):
    cfg, out = default_run
    ws = Workspace(cfg, out)
    width = cfg["scene"]["track_width"]
    path = ws.path()
    step = cfg["rollout"]["speed"] * cfg["rollout"]["dt"]
    # enough steps to reach the end of the reference path
    lap = math.ceil(path.length / step) + 1
    parts, ok = [], True
    for sensor, name in (("opaque", "deployment"), ("volumetric", "surrogate")):
        sc = ws.scenario(sensor)
        sc = replace(sc, cfg=replace(sc.cfg, horizon=lap))
        traj, j = rollout_closed_loop(sc)
        mean = -j / len(traj.states)
        arc = float(path.project(traj.states[-1][:2])[1])
        done = arc >= path.length - step
        ok &= done and mean <= 0.05 * width
        parts.append(f"{name} mean CTE {mean:.4f} ({100 * mean / width:.2f}% of width), end arc "
                     f"{arc:.2f}/{path.length:.2f}")
    record_criterion(8, ok, "; ".join(parts))
    assert ok


# 9 -----------------------------------------------------------------------

def test_criterion_9_retraining(default_run):
    cfg, out = default_run
    info = json.loads((out / "retrain.json").read_text())
    seeds = cfg.seeds()
    before = np.mean([attack_manifest(out, s, "gradient")["best_objective"] for s in seeds])
    after = info["mean_after"]
    red = 1 - after / before
    ok = red >= 0.30
    record_criterion(9, ok, f"attacked CTE {before:.3f} -> {after:.3f} after fine-tuning "
                            f"({100 * red:.1f}% reduction)", soft=True)
    if not ok:
        pytest.xfail("soft criterion: retraining reduction below 30%")


# 10 ----------------------------------------------------------------------

def test_criterion_10_determinism(default_run, tmp_path):
    cfg, out = default_run
    t0 = time.perf_counter()
    run_pipeline(cfg, STAGES, out=tmp_path)
    elapsed = time.perf_counter() - t0
    a = sorted(str(p.relative_to(out)) for p in out.rglob("*") if p.is_file())
    b = sorted(str(p.relative_to(tmp_path)) for p in tmp_path.rglob("*") if p.is_file())
    differ = [rel for rel in a if rel in b
              and (out / rel).read_bytes() != (tmp_path / rel).read_bytes()]
    same_set = set(a) == set(b)
    ok = same_set and not differ
    record_criterion(10, ok, f"second full run ({elapsed / 60:.1f} min): {len(a)} files, "
                             f"{len(differ)} differ{(' e.g. ' + differ[0]) if differ else ''}")
    assert ok
