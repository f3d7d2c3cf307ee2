"""Command-line entry point.

Exit codes: 0 success, 1 invalid configuration or arguments, 2 I/O failure,
3 numerical failure. Failures also print one ``fullstab-error {...}`` JSON
line on stderr.
"""
from __future__ import annotations

import argparse
import dataclasses
import json
import logging
import sys
import time
from pathlib import Path

import numpy as np

from .coarse import write_trajectory
from .config import ConfigError, PipelineConfig, load_config
from .flow import pair_flows, write_flo
from .geom import Frame, FrameTruth
from .imageio import read_frames, write_frames, write_mask, write_confidence
from .outpaint import DELTA_D_STRICT

log = logging.getLogger("fullstab")

EXIT_OK, EXIT_CONFIG, EXIT_IO, EXIT_NUMERIC = 0, 1, 2, 3


class CommandError(Exception):
    def __init__(self, code: int, kind: str, message: str):
        super().__init__(message)
        self.code, self.kind = code, kind


# --------------------------------------------------------------------------
# input / output helpers

def _save_truth(path: Path, frames) -> None:
    if not frames or any(f.truth is None for f in frames):
        return
    arrays = {}
    for k, f in enumerate(frames):
        arrays[f"coords_{k:05d}"] = f.truth.base_coords().astype(np.float64)
        arrays[f"movers_{k:05d}"] = f.truth.movers
        arrays[f"homography_{k:05d}"] = f.truth.homography
    np.savez_compressed(path, **arrays)


def _attach_truth(path: Path, frames) -> None:
    with np.load(path) as z:
        for k, f in enumerate(frames):
            key = f"coords_{k:05d}"
            if key not in z:
                return
            f.truth = FrameTruth(z[f"homography_{k:05d}"], z[f"movers_{k:05d}"], z[key])


def load_input(path, use_stable: bool = False) -> list[Frame]:
    """Frames from a synthetic clip directory or a plain/stage output directory."""
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"input not found: {path}")
    if (path / "gt.txt").exists():
        from .synth import load_clip
        clip = load_clip(path)
        frames = clip.stable_frames if use_stable or not clip.unstable_frames else clip.unstable_frames
        return frames
    frame_dir = path / "frames" if (path / "frames").is_dir() else path
    valid_dir = path / "valid" if (path / "valid").is_dir() else None
    frames = read_frames(frame_dir, valid_dir)
    if (path / "truth.npz").exists():
        _attach_truth(path / "truth.npz", frames)
    return frames


def write_output(out: Path, frames, cfg: PipelineConfig) -> None:
    out.mkdir(parents=True, exist_ok=True)
    write_frames(out / "frames", frames, out / "valid")
    _save_truth(out / "truth.npz", frames)
    cfg.write(out / "config.ini")


def _check_provider(frames, cfg: PipelineConfig) -> None:
    if cfg.pipeline.provider == "oracle" and any(f.truth is None for f in frames):
        raise ConfigError("the oracle flow provider needs ground-truth geometry; "
                          "use a synthetic clip directory or --provider classical")


def _need_out(args):
    if not args.out:
        raise ConfigError(f"{args.command} needs --out")
    return Path(args.out)


def _report(inputs, result_frames, st=None, cfg=None):
    from .metrics import MetricsReport, cropping_series, distortion_series, stability_score
    crop = cropping_series(inputs, result_frames)
    if st is not None:
        dist = distortion_series(transforms=st.transforms())
    else:
        dist = distortion_series(inputs, result_frames)
    d_ok = [d for d in dist if d == d]
    stab = float("nan")
    if len(result_frames) >= 32 and cfg is not None:
        try:
            stab = stability_score(result_frames, cfg.provider, cfg.workers)
        except (ValueError, np.linalg.LinAlgError) as exc:
            log.warning("stability score unavailable: %s", exc)
    return MetricsReport(float(np.mean(crop)), min(d_ok) if d_ok else float("nan"), stab,
                         crop, dist)


# --------------------------------------------------------------------------
# commands

def cmd_synth(args, cfg: PipelineConfig) -> None:
    from .synth import make_clip, save_clip
    out = _need_out(args)
    sc = cfg.synth
    if args.frames:
        sc = dataclasses.replace(sc, n_frames=args.frames)
    clip = make_clip(sc, jitter=not args.no_jitter)
    out.mkdir(parents=True, exist_ok=True)
    save_clip(clip, out)
    dataclasses.replace(cfg, synth=sc).write(out / "config.ini")
    print(f"wrote {len(clip)} frames to {out}")


def cmd_flow(args, cfg: PipelineConfig) -> None:
    out = _need_out(args)
    frames = load_input(args.input, args.stable)
    _check_provider(frames, cfg)
    ys, cs = pair_flows(frames, cfg.provider, cfg.workers)
    (out / "flows").mkdir(parents=True, exist_ok=True)
    for k, (y, c) in enumerate(zip(ys, cs)):
        write_flo(y, out / "flows" / f"{k:05d}.flo")
        write_confidence(out / "flows" / f"{k:05d}_conf", c)
    cfg.write(out / "config.ini")
    print(f"wrote {len(ys)} flow fields to {out / 'flows'}")


def _write_stabilize_artifacts(out: Path, st, frames, cfg) -> None:
    write_output(out, st.frames, cfg)
    for sub in ("flows", "warps", "masks"):
        (out / sub).mkdir(parents=True, exist_ok=True)
    for k, (y, m) in enumerate(zip(st.flows, st.masks)):
        write_flo(y, out / "flows" / f"{k:05d}.flo")
        write_mask(out / "masks" / f"{k:05d}.pgm", m)
    for k, w in enumerate(st.fields):
        write_flo(w, out / "warps" / f"{k:05d}.flo")
    write_trajectory(out / "trajectory.txt", st.trajectory)
    rep = _report(frames, st.frames, st, cfg)
    rep.write_csv(out / "metrics.csv")
    (out / "report.txt").write_text(rep.as_text())
    with open(out / "timings.txt", "w") as fh:
        for k, v in st.timings.items():
            fh.write(f"{k} {v:.6f}\n")


def cmd_stabilize(args, cfg: PipelineConfig) -> None:
    from .pipeline import stabilize
    out = _need_out(args)
    frames = load_input(args.input, args.stable)
    _check_provider(frames, cfg)
    st = stabilize(frames, cfg)
    _write_stabilize_artifacts(out, st, frames, cfg)
    print(f"stabilized {len(frames)} frames into {out}")


def _write_outpaint_logs(out: Path, logs) -> None:
    with open(out / "fusion.txt", "w") as fh:
        fh.write("# target neighbor a_s a_u s_ratio a_o accepted\n")
        for e in logs:
            for r in e.rows:
                fh.write(f"{e.target} {r[0]} {r[1]:.0f} {r[2]:.0f} {r[3]:.6f} {r[4]:.0f} "
                         f"{int(r[5])}\n")


def cmd_outpaint(args, cfg: PipelineConfig) -> None:
    from .metrics import cropping_ratio
    from .pipeline import outpaint_video
    out = _need_out(args)
    frames = load_input(args.input, args.stable)
    _check_provider(frames, cfg)
    result, logs = outpaint_video(frames, cfg)
    write_output(out, result, cfg)
    _write_outpaint_logs(out, logs)
    cr = cropping_ratio(frames, result)
    (out / "report.txt").write_text(f"cropping_ratio {cr:.6f}\n")
    print(f"rendered {len(result)} full frames into {out}; cropping_ratio {cr:.6f}")


def cmd_eval(args, cfg: PipelineConfig) -> None:
    if not args.reference:
        raise ConfigError("eval needs --reference (the unprocessed input)")
    inputs = load_input(args.reference, args.stable)
    outputs = load_input(args.input)
    if len(inputs) != len(outputs):
        raise ConfigError(f"{len(inputs)} reference frames but {len(outputs)} output frames")
    _check_provider(outputs, cfg)
    rep = _report(inputs, outputs, None, cfg)
    text = rep.as_text()
    if args.out:
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        rep.write_csv(out / "metrics.csv")
        (out / "report.txt").write_text(text)
    print(text, end="")


def cmd_fixpoint(args, cfg: PipelineConfig) -> None:
    from .harness import fixed_point_run, write_svg_plot
    out = _need_out(args)
    frames = load_input(args.input, args.stable)
    _check_provider(frames, cfg)
    iters = args.iters or cfg.pipeline.fixpoint_iters
    trace = fixed_point_run(frames, iters, cfg)
    out.mkdir(parents=True, exist_ok=True)
    trace.write_csv(out / "trace.csv")
    write_svg_plot(out / "trace_flow.svg", trace.flow_magnitude, "masked mean flow",
                   "pixels")
    write_svg_plot(out / "trace_translation.svg", [d[2] for d in trace.pose_deltas],
                   "alignment translation", "pixels")
    cfg.write(out / "config.ini")
    for r in trace.rows():
        print(" ".join([str(r[0])] + [f"{v:.6g}" for v in r[1:]]))


def cmd_pipeline(args, cfg: PipelineConfig) -> None:
    from .metrics import cropping_ratio
    from .pipeline import run_pipeline
    out = _need_out(args)
    frames = load_input(args.input, args.stable)
    _check_provider(frames, cfg)
    t0 = time.perf_counter()
    res = run_pipeline(frames, cfg)
    total = time.perf_counter() - t0
    _write_stabilize_artifacts(out / "stabilized", res.stabilized, frames, cfg)
    write_output(out, res.frames, cfg)
    _write_outpaint_logs(out, res.outpaint_logs)
    rep = _report(frames, res.frames, res.stabilized, cfg)
    rep.cropping_ratio = cropping_ratio(frames, res.frames)
    rep.write_csv(out / "metrics.csv")
    (out / "report.txt").write_text(rep.as_text())
    n = len(frames)
    with open(out / "timings.txt", "w") as fh:
        for k, v in res.timings.items():
            fh.write(f"{k} {v:.6f} {1000 * v / n:.2f}ms/frame\n")
        fh.write(f"total {total:.6f}\n")
    print(rep.as_text(), end="")


COMMANDS = {
    "synth": cmd_synth, "flow": cmd_flow, "stabilize": cmd_stabilize, "outpaint": cmd_outpaint,
    "eval": cmd_eval, "fixpoint": cmd_fixpoint, "pipeline": cmd_pipeline,
}


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="sectioned key = value config file")
    common.add_argument("--seed", type=int, help="override the random seed")
    common.add_argument("--workers", type=int, help="worker threads")
    common.add_argument("--provider", choices=("oracle", "classical"), help="flow provider")
    common.add_argument("--literal-alg3", action="store_true",
                        help="strict fusion gates (S > eta_r, delta_D 0.2)")
    common.add_argument("-v", "--verbose", action="store_true")

    p = argparse.ArgumentParser(prog="fullstab", description="Full-frame video stabilization.")
    sub = p.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        sp = sub.add_parser(name, parents=[common])
        sp.add_argument("--out", help="output directory")
        if name != "synth":
            sp.add_argument("input", help="frame directory, stage output or synthetic clip")
            sp.add_argument("--stable", action="store_true",
                            help="use the stable frames of a synthetic clip")
        if name == "synth":
            sp.add_argument("--frames", type=int, help="number of frames")
            sp.add_argument("--no-jitter", action="store_true", help="write the stable clip only")
        if name == "eval":
            sp.add_argument("--reference", help="input frames the output was made from")
        if name == "fixpoint":
            sp.add_argument("--iters", type=int, help="number of re-stabilization passes")
    return p


def resolve_config(args) -> PipelineConfig:
    cfg = load_config(args.config) if args.config else PipelineConfig()
    if args.seed is not None:
        cfg = cfg.replace("synth", seed=args.seed).replace("pipeline", seed=args.seed)
    if args.workers is not None:
        cfg = cfg.replace("pipeline", workers=args.workers)
    if args.provider is not None:
        cfg = cfg.replace("pipeline", provider=args.provider)
    if args.literal_alg3:
        cfg = cfg.replace("outpaint", literal_alg3=True, delta_d=DELTA_D_STRICT)
    return cfg


def _fail(code: int, kind: str, message: str) -> int:
    print("fullstab-error " + json.dumps({"code": code, "kind": kind, "message": message}),
          file=sys.stderr)
    return code


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        if exc.code in (0, None):
            return EXIT_OK
        return _fail(EXIT_CONFIG, "usage", "invalid command line")
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = resolve_config(args)
    except FileNotFoundError as exc:
        return _fail(EXIT_IO, "io", str(exc))
    except (ConfigError, ValueError, TypeError) as exc:
        return _fail(EXIT_CONFIG, "config", str(exc))
    try:
        COMMANDS[args.command](args, cfg)
    except ConfigError as exc:
        return _fail(EXIT_CONFIG, "config", str(exc))
    except OSError as exc:
        return _fail(EXIT_IO, "io", str(exc))
    except (np.linalg.LinAlgError, FloatingPointError, ArithmeticError) as exc:
        return _fail(EXIT_NUMERIC, "numeric", str(exc))
    except ValueError as exc:
        return _fail(EXIT_CONFIG, "invalid-input", str(exc))
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
