"""Stage orchestration with file artifacts.

Every stage reads its inputs from the run directory and writes its outputs
there, so stages can run separately (resume) or together with identical
results.
"""

from __future__ import annotations

import json
import logging
import math
import platform
from concurrent.futures import ProcessPoolExecutor
from dataclasses import replace
from pathlib import Path
from typing import Callable, Dict, Iterable, List, Optional, Sequence

import numpy as np

from . import __version__
from .attack import (AttackConfig, AttackResult, gradient_attack, random_search_attack,
                     write_attack_manifest)
from .config import SceneConfig, dump_config
from .field import load_field, save_field
from .plotting import bar_table, loss_curves, overhead_plot
from .policy import (ImitationDataset, PolicyNet, expert_control, generate_dataset, load_policy,
                     sample_states, save_policy, train_policy_bc, to_observation)
from .recon import (capture_posed_images, fit_field, heldout_psnr, load_posed_images,
                    save_posed_images)
from .render import render_frame, render_opaque_frame, write_ppm
from .rollout import (Placement, Scenario, Trajectory, read_trajectory_csv, rollout_closed_loop,
                      total_cte, write_trajectory_csv)
from .scenes import build_deployment_scene, make_path, random_distractors

log = logging.getLogger("advdrive")

STAGES = ("build", "capture", "fit", "train", "attack", "transfer", "evaluate", "export", "retrain")
DEFAULT_STAGES = STAGES[:7]
METHODS = ("gradient", "random")
COLUMNS = ("deployment-unperturbed", "surrogate-random", "surrogate-gradient",
           "deployment-random", "deployment-gradient")


class MissingArtifact(RuntimeError):
    def __init__(self, path: Path, stage: str):
        super().__init__(f"missing {path}; run stage '{stage}' first")
        self.stage = stage


def _dump(path: Path, obj) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(obj, indent=1, sort_keys=True) + "\n")


class Workspace:
    def __init__(self, cfg: SceneConfig, out: Optional[Path] = None):
        self.cfg = cfg
        self.root = Path(out if out is not None else cfg["run"]["out"])
        self.root.mkdir(parents=True, exist_ok=True)

    def p(self, *parts) -> Path:
        return self.root.joinpath(*parts)

    def need(self, rel: str, stage: str) -> Path:
        path = self.p(rel)
        if not path.exists():
            raise MissingArtifact(path, stage)
        return path

    # --- loaders ---
    def deployment(self):
        return load_field(self.need("deployment.vxf", "build"))

    def surrogate(self):
        return load_field(self.need("surrogate.vxf", "fit"))

    def policy(self, name: str = "policy.pnet", stage: str = "train") -> PolicyNet:
        return load_policy(self.need(name, stage))

    def path(self):
        return make_path(self.cfg.deployment_spec())

    def objects(self) -> List[Placement]:
        return [(o.build(self.cfg.base_dir), o.transform()) for o in self.cfg.objects]

    def scenario(self, sensor: str, policy: Optional[PolicyNet] = None) -> Scenario:
        scene = self.surrogate() if sensor == "volumetric" else self.deployment()
        return Scenario(scene, self.path(), policy or self.policy(), self.cfg.dynamics(),
                        self.cfg.rollout_config(sensor))

    def attack_dir(self, seed: int, method: str) -> Path:
        return self.p("attacks", f"seed{seed}", method)

    def attack_params(self, seed: int, method: str) -> List[np.ndarray]:
        d = self.attack_dir(seed, method)
        self.need(str((d / "manifest.json").relative_to(self.root)), "attack")
        return [np.load(d / f"object{k}_color.npy") for k in range(len(self.cfg.objects))]


# --- stages ---------------------------------------------------------------

def stage_build(ws: Workspace) -> dict:
    scene = build_deployment_scene(ws.cfg.deployment_spec())
    save_field(ws.p("deployment.vxf"), scene.field)
    info = {"resolution": list(scene.field.resolution), "path_length": scene.path.length}
    _dump(ws.p("build.json"), info)
    return info


def stage_capture(ws: Workspace) -> dict:
    from .scenes import DeploymentScene

    field = ws.deployment()
    scene = DeploymentScene(field, ws.path(), ws.cfg.deployment_spec())
    c = ws.cfg["capture"]
    quad = replace(ws.cfg.quad(), scene_samples=max(64, ws.cfg.quad().scene_samples))
    rig = ws.cfg.rig()
    train = capture_posed_images(scene, c["n_images"], ws.cfg.capture_spec(), rig, quad)
    held = capture_posed_images(scene, c["n_heldout"], ws.cfg.capture_spec(heldout=True), rig, quad)
    save_posed_images(ws.p("capture", "train"), train)
    save_posed_images(ws.p("capture", "heldout"), held)
    info = {"n_train": len(train), "n_heldout": len(held)}
    _dump(ws.p("capture.json"), info)
    return info


def stage_fit(ws: Workspace) -> dict:
    train = load_posed_images(ws.need("capture/train", "capture"))
    held = load_posed_images(ws.need("capture/heldout", "capture"))
    bounds = ws.deployment().bounds
    res = fit_field(train, bounds, ws.cfg.fit_config())
    save_field(ws.p("surrogate.vxf"), res.field)
    sur = ws.surrogate()
    quad = ws.cfg.quad()
    info = {"loss_history": res.loss_history,
            "train_psnr": heldout_psnr(sur, train, quad),
            "heldout_psnr": heldout_psnr(sur, held, quad)}
    _dump(ws.p("fit.json"), info)
    loss_curves(ws.p("fit_loss.png"), {"photometric MSE": res.loss_history})
    return info


def _sensor(scenario: Scenario, objects=()):
    from .rollout import sense

    return lambda s: sense(scenario, objects, s)


def _distractor_sensor(scenario: Scenario, p: dict, seed):
    """Sensor that inserts a fresh random distractor set for every call."""
    from .rollout import sense

    rng = np.random.default_rng(seed)

    def f(state):
        objs = random_distractors(scenario.path, rng, p["distractor_max"], prob=p["distractor_prob"],
                                  texture_prob=p["distractor_texture_prob"], texture_std=p["distractor_texture_std"])
        return sense(scenario, objs, state)

    return f


def lap_metrics(scenario: Scenario, objects=()) -> dict:
    traj, j = rollout_closed_loop(scenario, objects)
    return {"total_cte": -j, "mean_cte": -j / len(traj.states),
            "final_arc": float(scenario.path.project(traj.states[-1][:2])[1])}


def training_data(ws: Workspace, policy_shape) -> ImitationDataset:
    p = ws.cfg["policy"]
    path = ws.path()
    probe = PolicyNet.init(policy_shape, tuple(p["hidden"]), steering_limit=p["steering_limit"])
    dep = ws.scenario("opaque", probe)
    sur = ws.scenario("volumetric", probe)
    sensors = [_distractor_sensor(dep, p, [p["seed"], 21]), _distractor_sensor(sur, p, [p["seed"], 22])]
    return generate_dataset(sensors, path, ws.cfg.expert(), p["n_states"],
                            p["lateral_std"], p["heading_std"], seed=p["seed"])


def stage_train(ws: Workspace) -> dict:
    p = ws.cfg["policy"]
    w, h = ws.cfg["rollout"]["image"]
    shape = (h, w, 1)
    data = training_data(ws, shape)
    tr, va = data.split(0.1, seed=p["seed"])
    net = PolicyNet.init(shape, tuple(p["hidden"]), steering_limit=p["steering_limit"], seed=p["seed"])
    res = train_policy_bc(tr, net, p["epochs"], p["lr"], p["batch_size"], p["noise_std"], p["seed"], va)
    save_policy(ws.p("policy.pnet"), res.net)
    pol = ws.policy()
    info = {"loss_history": res.loss_history, "val_history": res.val_history,
            "saturated_fraction": _saturation(pol, data),
            "deployment": lap_metrics(ws.scenario("opaque", pol)),
            "surrogate": lap_metrics(ws.scenario("volumetric", pol))}
    _dump(ws.p("train.json"), info)
    loss_curves(ws.p("train_loss.png"), {"train": res.loss_history, "held-out": res.val_history})
    return info


def _saturation(net: PolicyNet, data: ImitationDataset) -> float:
    from .policy import policy_forward_batch

    u = policy_forward_batch(net, data.observations)
    return float(np.mean(np.abs(u) >= 0.95 * net.steering_limit))


def _attack_job(args):
    cfg, out, seed, method = args
    ws = Workspace(cfg, out)
    scen = ws.scenario("volumetric")
    objects = ws.objects()
    acfg = cfg.attack_config(seed)
    fn = gradient_attack if method == "gradient" else random_search_attack
    res = fn(scen, objects, acfg)
    write_attack_manifest(ws.attack_dir(seed, method), res, objects,
                          {"seed": seed, "method": method, "attack": dict(cfg["attack"]), "config_hash": cfg.hash()})
    return seed, method, res.best_objective, res.baseline


def _fan_out(fn, jobs: Iterable, n_jobs: int):
    jobs = list(jobs)
    if n_jobs <= 1 or len(jobs) <= 1:
        return [fn(j) for j in jobs]
    with ProcessPoolExecutor(max_workers=n_jobs) as ex:
        return list(ex.map(fn, jobs))


def stage_attack(ws: Workspace, seeds: Sequence[int], methods=METHODS, jobs: int = 1) -> dict:
    ws.surrogate(), ws.policy()
    out = _fan_out(_attack_job, [(ws.cfg, ws.root, s, m) for s in seeds for m in methods], jobs)
    return {f"seed{s}/{m}": {"best": b, "baseline": base} for s, m, b, base in out}


def transfer_eval(ws: Workspace, params: Sequence[np.ndarray], policy: Optional[PolicyNet] = None,
                  sensor: str = "opaque") -> Trajectory:
    scen = ws.scenario(sensor, policy)
    objects = [(o.with_color_params(p), xf) for (o, xf), p in zip(ws.objects(), params)]
    return rollout_closed_loop(scen, objects)[0]


def stage_transfer(ws: Workspace, seeds: Sequence[int]) -> dict:
    base_traj = rollout_closed_loop(ws.scenario("opaque"))[0]
    ws.p("transfer").mkdir(exist_ok=True)
    write_trajectory_csv(ws.p("transfer", "unperturbed.csv"), base_traj)
    info = {"unperturbed": total_cte(base_traj), "seeds": {}}
    for s in seeds:
        row = {}
        for m in METHODS:
            try:
                params = ws.attack_params(s, m)
            except MissingArtifact:
                continue
            traj = transfer_eval(ws, params)
            write_trajectory_csv(ws.p("transfer", f"seed{s}_{m}.csv"), traj)
            row[m] = total_cte(traj)
        info["seeds"][str(s)] = row
    _dump(ws.p("transfer.json"), info)
    return info


def _mean_std(vals: Sequence[float]):
    if not vals:
        return float("nan"), float("nan"), 0
    a = np.asarray(vals, dtype=np.float64)
    return float(a.mean()), float(a.std()), len(vals)


def evaluate_matrix(ws: Workspace, seeds: Sequence[int]) -> dict:
    """Five-column total CTE table plus per-seed cells; gaps are explicit."""
    tr = json.loads(ws.need("transfer.json", "transfer").read_text())
    cells: Dict[str, List[float]] = {c: [] for c in COLUMNS}
    per_seed = {}
    sur_base = []
    for s in seeds:
        row = {}
        for m in METHODS:
            mp = ws.attack_dir(s, m) / "manifest.json"
            if mp.exists():
                man = json.loads(mp.read_text())
                row[f"surrogate-{m}"] = man["best_objective"]
                cells[f"surrogate-{m}"].append(man["best_objective"])
                sur_base.append(man["baseline"])
            dep = tr["seeds"].get(str(s), {}).get(m)
            if dep is not None:
                row[f"deployment-{m}"] = dep
                cells[f"deployment-{m}"].append(dep)
        per_seed[str(s)] = row
    cells["deployment-unperturbed"] = [tr["unperturbed"]]
    table = {}
    for c in COLUMNS:
        mean, std, n = _mean_std(cells[c])
        table[c] = {"mean": mean, "std": std, "n": n}
    su = _mean_std(sur_base)
    return {"columns": list(COLUMNS), "table": table, "per_seed": per_seed,
            "surrogate-unperturbed": su[0], "missing": [c for c in COLUMNS if table[c]["n"] == 0]}


def format_table(mat: dict) -> str:
    head = "scenario," + ",".join(mat["columns"])
    cells = []
    for c in mat["columns"]:
        t = mat["table"][c]
        cells.append("" if t["n"] == 0 else f"{t['mean']:.4f} +- {t['std']:.4f}")
    return head + "\n" + "default," + ",".join(cells) + "\n"


def stage_evaluate(ws: Workspace, seeds: Sequence[int]) -> dict:
    mat = evaluate_matrix(ws, seeds)
    ws.p("metrics.csv").write_text(format_table(mat))
    _dump(ws.p("metrics.json"), mat)
    t = mat["table"]
    bar_table(ws.p("metrics.png"), COLUMNS, [t[c]["mean"] for c in COLUMNS], [t[c]["std"] for c in COLUMNS],
              "total cross-track error")
    return mat


def export_frames(traj: Trajectory, renderer: Callable, out_dir, path=None, objects_xy=(), bounds=None) -> dict:
    """First-person PPM per step plus ``overhead.png``; returns trace endpoints."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    for t in range(traj.horizon):
        write_ppm(out / f"frame{t:04d}.ppm", renderer(traj.states[t]))
    ends = {}
    if path is not None:
        ends = overhead_plot(out / "overhead.png", path, {"vehicle": traj.state_array()[:, :2]}, objects_xy, bounds)
    return ends


def stage_export(ws: Workspace, seeds: Sequence[int]) -> dict:
    dep = ws.scenario("opaque")
    objects = ws.objects()
    out = {}
    s = seeds[0]
    for m in METHODS:
        try:
            params = ws.attack_params(s, m)
        except MissingArtifact:
            continue
        placed = [(o.with_color_params(p), xf) for (o, xf), p in zip(objects, params)]
        traj = rollout_closed_loop(dep, placed)[0]
        cam = dep.cfg.rig.camera
        render = lambda st, pl=placed: render_opaque_frame(dep.scene, pl, cam(st), dep.cfg.quad).color
        ends = export_frames(traj, render, ws.p("frames", f"seed{s}_{m}"), dep.path,
                             [xf.translation for _, xf in objects], dep.scene.bounds)
        out[m] = {"frames": traj.horizon, "end": [float(v) for v in ends["vehicle"][1]]}
    return out


def stage_retrain(ws: Workspace, seeds: Sequence[int]) -> dict:
    """Fine-tune on expert labels collected under the stored gradient attacks,
    then replay those attacks against the new policy in the surrogate."""
    r = ws.cfg["retrain"]
    p = ws.cfg["policy"]
    pol = ws.policy()
    sur = ws.scenario("volumetric", pol)
    objects = ws.objects()
    expert = ws.cfg.expert()
    parts = [training_data(ws, pol.input_shape)]
    rng = np.random.default_rng([p["seed"], 11])
    attacked = {}
    for s in seeds:
        params = ws.attack_params(s, "gradient")
        placed = [(o.with_color_params(q), xf) for (o, xf), q in zip(objects, params)]
        traj = rollout_closed_loop(sur, placed)[0]
        attacked[s] = (placed, total_cte(traj))
        # Recovery states around the path plus states on the attacked trajectory.
        base = sample_states(sur.path, r["n_states"], r["lateral_std"], p["heading_std"], rng)
        states = np.vstack([base, traj.state_array()])
        parts.append(generate_dataset([_sensor(sur, placed)], sur.path, expert, len(states), seed=s, states=states))
    data = ImitationDataset.concatenate(parts)
    res = train_policy_bc(data, pol, r["epochs"], r["lr"], p["batch_size"], p["noise_std"], p["seed"])
    save_policy(ws.p("policy_retrained.pnet"), res.net)
    new = ws.policy("policy_retrained.pnet", "retrain")
    sur_new = ws.scenario("volumetric", new)
    info = {"seeds": {}, "clean": lap_metrics(sur_new)}
    for s, (placed, before) in attacked.items():
        after = total_cte(rollout_closed_loop(sur_new, placed)[0])
        info["seeds"][str(s)] = {"before": before, "after": after}
    b = [v["before"] for v in info["seeds"].values()]
    a = [v["after"] for v in info["seeds"].values()]
    info["mean_before"], info["mean_after"] = float(np.mean(b)), float(np.mean(a))
    _dump(ws.p("retrain.json"), info)
    return info


# --- driver ---------------------------------------------------------------

def run_manifest(ws: Workspace, seeds: Sequence[int]) -> dict:
    mat = json.loads(ws.need("metrics.json", "evaluate").read_text())
    own = ws.p("manifest.json")
    artifacts = sorted(str(p.relative_to(ws.root)) for p in ws.root.rglob("*") if p.is_file() and p != own)
    return {
        "config_hash": ws.cfg.hash(),
        "seed": ws.cfg["run"]["seed"],
        "seeds": list(seeds),
        "versions": {"advdrive": __version__, "numpy": np.__version__, "python": platform.python_version()},
        "artifacts": artifacts,
        "metrics": mat["table"],
        "surrogate_unperturbed": mat["surrogate-unperturbed"],
    }


def run_pipeline(cfg: SceneConfig, stages: Sequence[str] = DEFAULT_STAGES, out=None, seeds=None,
                 jobs: Optional[int] = None) -> dict:
    unknown = [s for s in stages if s not in STAGES]
    if unknown:
        raise ValueError(f"unknown stages {unknown}; choose from {STAGES}")
    ws = Workspace(cfg, out)
    seeds = list(seeds) if seeds is not None else cfg.seeds()
    jobs = jobs or cfg["run"]["jobs"]
    ws.p("config.txt").write_text(dump_config(cfg))
    results = {}
    for st in STAGES:
        if st not in stages:
            continue
        log.info("stage %s", st)
        if st == "build":
            results[st] = stage_build(ws)
        elif st == "capture":
            results[st] = stage_capture(ws)
        elif st == "fit":
            results[st] = stage_fit(ws)
        elif st == "train":
            results[st] = stage_train(ws)
        elif st == "attack":
            results[st] = stage_attack(ws, seeds, jobs=jobs)
        elif st == "transfer":
            results[st] = stage_transfer(ws, seeds)
        elif st == "evaluate":
            results[st] = stage_evaluate(ws, seeds)
        elif st == "export":
            results[st] = stage_export(ws, seeds)
        elif st == "retrain":
            results[st] = stage_retrain(ws, seeds)
    manifest = None
    if ws.p("metrics.json").exists():
        manifest = run_manifest(ws, seeds)
        _dump(ws.p("manifest.json"), manifest)
    return {"manifest": manifest, "stages": results, "out": str(ws.root)}
