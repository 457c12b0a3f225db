"""Command-line entry point: ``evfield <subcommand> ...``.

Exit codes: 0 success, 1 usage error, 2 data error.  Errors go to stderr as
``evfield: error[usage]: ...`` or ``evfield: error[data]: ...``.  Every
command that writes files also writes ``<first output>.manifest.json``.
"""
from __future__ import annotations

import argparse
import hashlib
import json
import os
import sys
import time
from dataclasses import asdict, dataclass, field

import numpy as np

from . import __version__, build_hash
from . import events as ev_io
from . import losses as L
from .cmax import fit_global_flow, global_flow_problem, iwe_variance_report, warp
from .fit import FitConfig, FitError, Supervision, fit_latent
from .kinematics import Camera, ModelError, Pose, forward_kinematics, load_model
from .motion_field import slerp_baseline
from .serialize import WeightFormatError, save_field
from .synth import MotionScript, generate, noise
from .voxel import voxelize, write_grid, write_pgm

EXIT_OK, EXIT_USAGE, EXIT_DATA = 0, 1, 2


class UsageError(Exception):
    pass


class DataError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.prog}: {message}")


def sha256_file(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for block in iter(lambda: fh.read(1 << 20), b""):
            h.update(block)
    return h.hexdigest()


@dataclass
class RunManifest:
    subcommand: str
    flags: dict
    inputs: dict
    version: str
    wall_clock_s: float
    seed: int
    outputs: list = field(default_factory=list)

    def write(self, path) -> None:
        with open(path, "w") as fh:
            json.dump(asdict(self), fh, indent=1, sort_keys=True)


def verify_manifest(path) -> bool:
    """True when every recorded input hash matches the file on disk."""
    with open(path) as fh:
        m = json.load(fh)
    return all(os.path.exists(p) and sha256_file(p) == h for p, h in m["inputs"].items())


def _json_default(o):
    if isinstance(o, np.ndarray):
        return o.tolist()
    if isinstance(o, (np.floating, np.integer)):
        return o.item()
    return str(o)


def _write_json(obj, path):
    with open(path, "w") as fh:
        json.dump(obj, fh, indent=1, default=_json_default)


def _load_events(path, width=None, height=None):
    if not os.path.exists(path):
        raise DataError(f"no such file: {path}")
    with open(path, "rb") as fh:
        head = fh.read(4)
    if head == ev_io.MAGIC:
        return ev_io.load(path)
    with open(path) as fh:
        text = fh.read()
    res = ev_io.sniff_resolution(text)
    if res is None:
        if width is None or height is None:
            raise UsageError("text events without a '# resolution' header need --width and --height")
        res = (width, height)
    return ev_io.parse_text(text, *res)


def _load_model(name):
    if not os.path.exists(name) and name not in ("bar", "chain6", "humanoid16"):
        raise DataError(f"no such model file or template: {name}")
    return load_model(name)


def _load_camera(path, fallback=None):
    if path is None:
        return fallback or Camera.default()
    with open(path) as fh:
        return Camera.from_dict(json.load(fh))


def load_trajectory(path):
    """Pose trajectory JSON ``{"times": [...], "local": ..., "root_rot": ..., "root_t": ...}``."""
    with open(path) as fh:
        d = json.load(fh)
    return np.asarray(d["times"], dtype=np.float64), Pose.from_dict(d)


def save_trajectory(path, times, poses: Pose):
    d = {"times": np.asarray(times).tolist()}
    d.update(poses.to_dict())
    _write_json(d, path)


def _hash_inputs(paths):
    return {p: sha256_file(p) for p in paths if p is not None and os.path.isfile(p)}


# -- subcommands ---------------------------------------------------------------

def cmd_convert(args):
    stream = _load_events(args.input, args.width, args.height)
    ev_io.save(stream, args.output)
    return [args.input], [args.output]


def cmd_info(args):
    s = _load_events(args.events, args.width, args.height)
    span = s.t_end - s.t_start
    info = {"count": len(s), "width": s.width, "height": s.height, "t_span_us": int(span),
            "rate_eps": (len(s) / (span * 1e-6)) if span > 0 else 0.0}
    print(json.dumps(info))
    return [args.events], []


def cmd_voxelize(args):
    s = _load_events(args.events, args.width, args.height)
    grid = voxelize(s, args.bins, args.t0, args.t1, threads=args.threads)
    write_grid(grid, args.out)
    outs = [args.out]
    if args.pgm_dir:
        os.makedirs(args.pgm_dir, exist_ok=True)
        for b in range(grid.bins):
            p = os.path.join(args.pgm_dir, f"bin{b:02d}.pgm")
            write_pgm(grid.values[b], p)
            outs.append(p)
    return [args.events], outs


def cmd_synth(args):
    model = _load_model(args.model)
    script = MotionScript.load(args.script, model.n_joints)
    if args.seed is not None:
        script.seed = args.seed
    cam = _load_camera(args.camera, script.camera)
    out = generate(model, cam, script, samples_per_edge=args.samples_per_edge, dt_sim=args.dt_sim,
                   gt_rate=args.gt_rate, n_windows=args.n_windows)
    stream = out.events
    if args.noise_rate > 0:
        stream = noise(stream, args.noise_rate, seed=script.seed)
    ev_io.save(stream, args.out)
    outs = [args.out]
    if args.gt:
        L.write_joints_csv(L.JointSet(out.gt_joints, None, out.gt_times), args.gt)
        outs.append(args.gt)
    if args.poses:
        save_trajectory(args.poses, out.gt_times, out.gt_poses)
        outs.append(args.poses)
    if args.init:
        _write_json(out.gt_poses[0].to_dict(), args.init)
        outs.append(args.init)
    return [args.model, args.script, args.camera], outs


def _fit_config(args) -> FitConfig:
    w = L.LossWeights(ori=args.lambda_ori, t=args.lambda_t, j3d=args.lambda_3d, j2d=args.lambda_2d,
                      flow=args.lambda_flow, c=args.lambda_c, z=args.lambda_z)
    return FitConfig(weights=w, lr=args.lr, beta1=args.beta1, beta2=args.beta2, eps=args.eps,
                     max_iters=args.max_iters, tol=args.tol, tol_window=args.tol_window,
                     n_windows=args.n_windows, mode=args.mode, clip_norm=args.clip_norm,
                     seed=args.seed or 0, fd_step=args.fd_step, radius=args.radius, threads=args.threads,
                     d_local=args.d_local, d_global=args.d_global, n_freqs=args.n_freqs,
                     hidden=tuple(args.hidden), skips=tuple(args.skips), gmp_hidden=tuple(args.gmp_hidden),
                     n_steps=args.n_steps)


def cmd_fit(args):
    model = _load_model(args.model)
    cam = _load_camera(args.camera)
    stream = _load_events(args.events) if args.events else None
    with open(args.init) as fh:
        init = Pose.from_dict(json.load(fh))
    sup = None
    if args.gt:
        js = L.read_joints_csv(args.gt)
        if js.times is None:
            raise DataError("ground-truth joints need a t_s column")
        if js.n_joints != model.n_joints:
            raise DataError("ground-truth joint count differs from the model")
        poses = None
        if args.gt_poses:
            _, poses = load_trajectory(args.gt_poses)
        sup = Supervision(js.times, js, poses)
    cfg = _fit_config(args)
    report = fit_latent(stream, model, cam, init, sup, cfg, duration=args.duration)
    save_field(report.field, args.out)
    _write_json(report.to_dict(), args.report)
    outs = [args.out, args.report]
    if args.pred:
        times = sup.times if sup is not None else np.linspace(0.0, report.field.duration, 100)
        L.write_joints_csv(L.JointSet(report.field.joints(times), None, times), args.pred)
        outs.append(args.pred)
    return [args.events, args.model, args.init, args.gt, args.gt_poses, args.camera], outs


def cmd_compensate(args):
    s = _load_events(args.events, args.width, args.height)
    os.makedirs(args.out_dir, exist_ok=True)
    res = fit_global_flow(s, args.n_windows, search=args.search, iters=args.iters, threads=args.threads)
    prob = global_flow_problem(s, 1, threads=args.threads)
    before = warp(prob.windows[0].events, prob.displacements(np.zeros(2))[0], threads=args.threads)
    after = warp(prob.windows[0].events, prob.displacements(res.flow * args.n_windows)[0],
                 threads=args.threads)
    rb, ra = iwe_variance_report(before), iwe_variance_report(after)
    paths = [os.path.join(args.out_dir, n) for n in ("before.pgm", "after.pgm", "compensate.json")]
    write_pgm(before.image.total, paths[0])
    write_pgm(after.image.total, paths[1])
    _write_json({"var_before": rb["objective"], "var_after": ra["objective"], "flow_px_per_window": res.flow,
                 "n_windows": args.n_windows, "before": rb, "after": ra}, paths[2])
    return [args.events], paths


def cmd_eval(args):
    pred = L.read_joints_csv(args.pred)
    gt = L.read_joints_csv(args.gt)
    if pred.n_joints != gt.n_joints or pred.n_frames != gt.n_frames:
        raise DataError("prediction and ground truth differ in frames or joints")
    if args.head_len is not None:
        head = args.head_len
    else:
        model = _load_model(args.model)
        head = model.head_length()
        if head is None:
            raise DataError("model defines no head/neck joints; pass --head-len")
    res = L.evaluate(pred, gt, head)
    print(json.dumps(res))
    outs = []
    if args.out:
        _write_json(res, args.out)
        outs.append(args.out)
    return [args.pred, args.gt, args.model], outs


def slerp_gap(model, times, poses: Pose, stride: int):
    """Per-time gap (m) between strided-keyframe slerp and the dense trajectory.

    Returns ``(mean_gap_per_time, max_gap_per_time)`` over joints.
    """
    n = len(times)
    if stride < 1:
        raise ValueError("stride must be >= 1")
    if stride >= n:
        raise ValueError(f"stride {stride} >= trajectory length {n}")
    keys = list(range(0, n, stride))
    if keys[-1] != n - 1:
        keys.append(n - 1)
    gt = forward_kinematics(model, poses).positions
    interp = np.empty_like(gt)
    for a, b in zip(keys[:-1], keys[1:]):
        seg = slice(a, b + 1)
        p = slerp_baseline(poses[a], poses[b], times[a], times[b], times[seg])
        interp[seg] = forward_kinematics(model, p).positions
    err = np.linalg.norm(interp - gt, axis=-1)
    return err.mean(axis=1), err.max(axis=1)


def cmd_slerp_gap(args):
    model = _load_model(args.model)
    times, poses = load_trajectory(args.traj)
    if poses.n_joints != model.n_joints:
        raise DataError("trajectory joint count differs from the model")
    try:
        mean_gap, max_gap = slerp_gap(model, times, poses, args.stride)
    except ValueError as exc:
        raise DataError(str(exc)) from exc
    with open(args.out, "w") as fh:
        fh.write("t_s,gap_mm,max_joint_gap_mm\n")
        for t, g, m in zip(times, mean_gap, max_gap):
            fh.write(f"{float(t)!r},{1000.0 * float(g)!r},{1000.0 * float(m)!r}\n")
    summary = {"mean": 1000.0 * float(mean_gap.mean()), "max": 1000.0 * float(max_gap.max())}
    print(json.dumps(summary))
    outs = [args.out]
    if args.json:
        _write_json(summary, args.json)
        outs.append(args.json)
    return [args.traj, args.model], outs


# -- parser --------------------------------------------------------------------

def _version_string():
    return f"evfield {__version__}+{build_hash()}"


def build_parser() -> argparse.ArgumentParser:
    common = _Parser(add_help=False)
    common.add_argument("--threads", type=int, default=1, help="cap on internal worker threads")
    common.add_argument("--seed", type=int, default=None, help="seed for every random choice")
    res = _Parser(add_help=False)
    res.add_argument("--width", type=int, help="sensor width for headerless text events")
    res.add_argument("--height", type=int, help="sensor height for headerless text events")

    p = _Parser(prog="evfield", description="Continuous-time motion fields from event streams.")
    p.add_argument("--version", action="version", version=_version_string())
    sub = p.add_subparsers(dest="command", parser_class=_Parser)

    s = sub.add_parser("convert", parents=[common, res], help="text <-> binary event conversion")
    s.add_argument("input")
    s.add_argument("output", help="'.csv'/'.txt' writes text, anything else binary")
    s.set_defaults(func=cmd_convert)

    s = sub.add_parser("info", parents=[common, res], help="stream summary as JSON")
    s.add_argument("events")
    s.set_defaults(func=cmd_info)

    s = sub.add_parser("voxelize", parents=[common, res], help="event volume to flat binary (+PGM)")
    s.add_argument("events")
    s.add_argument("--bins", type=int, default=8)
    s.add_argument("--t0", type=int, default=None, help="start time, microseconds")
    s.add_argument("--t1", type=int, default=None, help="end time, microseconds")
    s.add_argument("--out", required=True)
    s.add_argument("--pgm-dir", default=None, help="write one PGM preview per bin")
    s.set_defaults(func=cmd_voxelize)

    s = sub.add_parser("synth", parents=[common], help="render a motion script into events")
    s.add_argument("--model", required=True, help="model JSON or builtin template name")
    s.add_argument("--script", required=True)
    s.add_argument("--camera", default=None, help="camera JSON (default: script camera or 240x180)")
    s.add_argument("--out", required=True)
    s.add_argument("--gt", default=None, help="ground-truth joints CSV")
    s.add_argument("--poses", default=None, help="ground-truth pose trajectory JSON")
    s.add_argument("--init", default=None, help="initial pose JSON")
    s.add_argument("--samples-per-edge", type=int, default=32)
    s.add_argument("--dt-sim", type=float, default=1e-4)
    s.add_argument("--gt-rate", type=float, default=100.0)
    s.add_argument("--n-windows", type=int, default=4)
    s.add_argument("--noise-rate", type=float, default=0.0, help="background events per pixel per second")
    s.set_defaults(func=cmd_synth)

    s = sub.add_parser("fit", parents=[common], help="fit a motion field")
    s.add_argument("--events", default=None)
    s.add_argument("--model", required=True)
    s.add_argument("--init", required=True, help="initial pose JSON")
    s.add_argument("--gt", default=None, help="ground-truth joints CSV with t_s column")
    s.add_argument("--gt-poses", default=None, help="ground-truth pose trajectory JSON")
    s.add_argument("--camera", default=None)
    s.add_argument("--out", required=True, help="weight file")
    s.add_argument("--report", required=True, help="report JSON")
    s.add_argument("--pred", default=None, help="predicted joints CSV at the ground-truth times")
    s.add_argument("--duration", type=float, default=None)
    d = FitConfig()
    s.add_argument("--mode", default=d.mode, choices=["latent-only", "latent+gmp", "decoder-pretrain"])
    for flag, val in (("lr", d.lr), ("beta1", d.beta1), ("beta2", d.beta2), ("eps", d.eps),
                      ("tol", d.tol), ("clip-norm", d.clip_norm), ("fd-step", d.fd_step),
                      ("radius", d.radius)):
        s.add_argument(f"--{flag}", type=float, default=val)
    for flag, val in (("max-iters", d.max_iters), ("tol-window", d.tol_window), ("n-windows", d.n_windows),
                      ("d-local", d.d_local), ("d-global", d.d_global), ("n-freqs", d.n_freqs),
                      ("n-steps", d.n_steps)):
        s.add_argument(f"--{flag}", type=int, default=val)
    s.add_argument("--hidden", type=int, nargs="+", default=list(d.hidden))
    s.add_argument("--skips", type=int, nargs="*", default=list(d.skips), help="hidden layers fed the input again")
    s.add_argument("--gmp-hidden", type=int, nargs="+", default=list(d.gmp_hidden))
    for name, val in d.weights.as_dict().items():
        flag = {"j3d": "3d", "j2d": "2d"}.get(name, name)
        s.add_argument(f"--lambda-{flag}", type=float, default=val)
    s.set_defaults(func=cmd_fit)

    s = sub.add_parser("compensate", parents=[common, res], help="global-flow motion compensation")
    s.add_argument("events")
    s.add_argument("--out-dir", required=True)
    s.add_argument("--n-windows", type=int, default=4)
    s.add_argument("--search", type=float, default=8.0, help="flow search radius, px per window")
    s.add_argument("--iters", type=int, default=100)
    s.set_defaults(func=cmd_compensate)

    s = sub.add_parser("eval", parents=[common], help="pose metrics between two joint CSVs")
    s.add_argument("pred")
    s.add_argument("gt")
    g = s.add_mutually_exclusive_group(required=True)
    g.add_argument("--model", default=None, help="model supplying the head length")
    g.add_argument("--head-len", type=float, default=None, help="head length in meters")
    s.add_argument("--out", default=None)
    s.set_defaults(func=cmd_eval)

    s = sub.add_parser("slerp-gap", parents=[common], help="keyframe slerp vs dense trajectory gap")
    s.add_argument("--traj", required=True, help="pose trajectory JSON")
    s.add_argument("--model", required=True)
    s.add_argument("--stride", type=int, required=True)
    s.add_argument("--out", required=True, help="per-time gap CSV")
    s.add_argument("--json", default=None, help="also write the summary JSON here")
    s.set_defaults(func=cmd_slerp_gap)
    return p


def main(argv=None) -> int:
    argv = sys.argv[1:] if argv is None else list(argv)
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        if args.command is None:
            raise UsageError("evfield: a subcommand is required (see --help)")
        if args.threads < 1:
            raise UsageError("--threads must be >= 1")
        if args.seed is not None:
            np.random.seed(args.seed)
        t0 = time.perf_counter()
        inputs, outputs = args.func(args)
        if outputs:
            flags = {k: v for k, v in vars(args).items() if k != "func"}
            RunManifest(args.command, flags, _hash_inputs(inputs), _version_string(),
                        time.perf_counter() - t0, args.seed if args.seed is not None else 0,
                        list(outputs)).write(f"{outputs[0]}.manifest.json")
        return EXIT_OK
    except SystemExit as exc:  # --help / --version
        return int(exc.code or 0)
    except UsageError as exc:
        print(f"evfield: error[usage]: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (DataError, FitError, ev_io.EventFormatError, ev_io.EventValidationError, ModelError, WeightFormatError,
            FileNotFoundError, IsADirectoryError, json.JSONDecodeError, KeyError, ValueError) as exc:
        print(f"evfield: error[data]: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
