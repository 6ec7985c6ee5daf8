"""``emohead4d`` command line.

Exit codes: 0 success, 2 invalid input, 3 stage-order error, 4 I/O error.
``EMOHEAD4D_THREADS`` caps the number of rasterizer threads.
"""
from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from pathlib import Path

EXIT_OK, EXIT_INVALID, EXIT_STAGE, EXIT_IO = 0, 2, 3, 4


def _parser():
    p = argparse.ArgumentParser(prog="emohead4d", description="Emotion-controllable 3D talking head pipeline.")
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="TOML or JSON run configuration")
    common.add_argument("--seed", type=int, help="overrides the config seed")
    common.add_argument("--out", help="output directory")
    common.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen-data", parents=[common], help="generate a synthetic multi-view dataset")
    g.add_argument("--emotions", help='comma-separated classes (e.g. "neutral,happy_strong") or "all"')
    g.add_argument("--clips-per-emotion", type=int)
    g.add_argument("--duration", type=float)
    g.add_argument("--size", type=int, help="square image size in pixels")

    t = sub.add_parser("train", parents=[common], help="train one stage")
    t.add_argument("--stage", required=True, choices=["s2g", "canonical", "dynamic"])
    t.add_argument("--data", required=True, help="dataset root")
    t.add_argument("--iterations", type=int)
    t.add_argument("--no-emotion", action="store_true")
    t.add_argument("--no-featurenet", action="store_true")
    t.add_argument("--force", action="store_true", help="retrain even if the stage is up to date")

    s = sub.add_parser("synth", parents=[common], help="audio + emotion timeline -> rendered frames")
    s.add_argument("--run", required=True, help="run directory with all three checkpoints")
    s.add_argument("--audio", required=True)
    s.add_argument("--emotions", help="emotion class spec or timeline JSON file (default neutral)")
    s.add_argument("--path", help="camera path JSON (default -90..+90 sweep over the clip)")
    s.add_argument("--cameras", help="cameras.json to render from a fixed calibrated camera instead")
    s.add_argument("--camera-index", type=int, default=5)
    s.add_argument("--fps", type=float)

    e = sub.add_parser("eval", parents=[common], help="score synthesized frames against a ground-truth clip")
    e.add_argument("--pred", required=True, help="directory written by synth")
    e.add_argument("--data", required=True, help="ground-truth clip directory")
    e.add_argument("--camera-index", type=int)

    r = sub.add_parser("render-path", parents=[common], help="free-view render of the canonical head")
    r.add_argument("--run", required=True)
    r.add_argument("--path", help="camera path JSON (default -90..+90 sweep)")
    r.add_argument("--frames", type=int, default=50)
    r.add_argument("--fps", type=float)

    v = sub.add_parser("validate", parents=[common], help="check a dataset and print a JSON report")
    v.add_argument("--data", required=True)
    return p


def _config(args, overrides=None):
    from .config import load_config
    over = overrides or {}
    if args.seed is not None:
        over["seed"] = args.seed
    return load_config(args.config, over)


def _emotion_list(spec):
    from .emotion import all_classes, class_name, parse_class
    if spec.strip().lower() == "all":
        return [class_name(c) for c in all_classes()]
    return [class_name(parse_class(s)) for s in spec.split(",") if s.strip()]


def cmd_gen_data(args):
    from .datagen import HeadModelConfig, SyntheticRig, generate_dataset, split_dataset, validate_dataset
    over = {"data": {}}
    if args.emotions:
        over["data"]["emotions"] = _emotion_list(args.emotions)
    if args.clips_per_emotion is not None:
        over["data"]["clips_per_emotion"] = args.clips_per_emotion
    if args.duration is not None:
        over["data"]["duration"] = args.duration
    if args.size is not None:
        over["data"]["width"] = over["data"]["height"] = args.size
    cfg = _config(args, over)
    d = cfg.data
    out = Path(args.out or "data")
    rig = SyntheticRig(n_cameras=d.n_cameras, width=d.width, height=d.height)
    head = HeadModelConfig(proxy_levels=d.proxy_levels, n_otf_proxy=d.n_otf_proxy)
    names = generate_dataset(out, _emotion_list(",".join(d.emotions)), d.duration, d.fps, cfg.seed, rig, head,
                             d.clips_per_emotion)
    if len(names) >= 5:
        split = split_dataset(names, tuple(d.split_ratio), cfg.seed)
    else:
        split = {"train": sorted(names), "test": [], "ratio": list(d.split_ratio), "seed": cfg.seed}
    (out / "split.json").write_text(json.dumps(split, indent=1))
    cfg.save(out / "config.resolved.json")
    report = validate_dataset(out)
    print(json.dumps({"clips": len(names), "train": len(split["train"]), "test": len(split["test"]),
                      "valid": report["ok"]}))
    return EXIT_OK if report["ok"] else EXIT_INVALID


def cmd_train(args):
    from .pipeline import run_stage
    over = {}
    if args.no_emotion:
        over["no_emotion"] = True
    if args.no_featurenet:
        over["no_featurenet"] = True
    if args.iterations is not None:
        over[args.stage] = {"iterations": args.iterations} if args.stage == "s2g" else \
            {"train": {"iterations": args.iterations}}
    cfg = _config(args, over)
    ckpt = run_stage(args.stage, args.data, args.out or "run", cfg, force=args.force)
    print(str(ckpt))
    return EXIT_OK


def _save_frames(frames, out, meta):
    from .rasterizer import save_png
    out = Path(out)
    out.mkdir(parents=True, exist_ok=True)
    names = []
    for t, fr in enumerate(frames):
        name = f"{t:06d}.png"
        save_png(fr, out / name)
        names.append(name)
    meta = dict(meta, frames=names, n_frames=len(names),
                alpha_coverage=[float((fr.alpha > 0).mean()) for fr in frames])
    (out / "index.json").write_text(json.dumps(meta, indent=1))
    return meta


def cmd_synth(args):
    from .config import CameraPath
    from .datagen import load_cameras
    from .pipeline import load_models, synthesize_from_wav
    cfg = _config(args).resolved()
    fps = args.fps or cfg.synth.fps
    models = load_models(args.run)
    cameras = None
    if args.cameras:
        cameras = [load_cameras(args.cameras)[args.camera_index]]
    path = CameraPath.load(args.path) if args.path else (CameraPath(cfg.synth.path) if cfg.synth.path else None)
    frames, geom, timeline, cams = synthesize_from_wav(models, args.audio, args.emotions, cameras, path, fps,
                                                       cfg.background)
    out = Path(args.out or "synth")
    geom.save(out / "geometry.bin")
    meta = _save_frames(frames, out, {"audio": str(args.audio), "fps": fps, "seed": cfg.seed,
                                      "emotions": timeline.to_segments(),
                                      "cameras": [c.to_dict() for c in cams]})
    cfg.save(out / "config.resolved.json")
    print(json.dumps({"frames": meta["n_frames"], "out": str(out)}))
    return EXIT_OK


def cmd_eval(args):
    from .datagen import load_clip
    from .geometry import GeometrySequence
    from .metrics import MetricReport, lmd, project_landmarks, psnr, ssim
    from .rasterizer import load_png
    from .core import InvalidInputError
    cfg = _config(args)
    pred = Path(args.pred)
    index = json.loads((pred / "index.json").read_text())
    clip = load_clip(args.data)
    k = cfg.eval_camera if args.camera_index is None else args.camera_index
    cam = clip.cameras[k]
    n = index["n_frames"]
    if n != clip.n_frames:
        raise InvalidInputError(f"{n} synthesized frames vs {clip.n_frames} ground-truth frames")
    geom = GeometrySequence.load(pred / "geometry.bin")
    if geom.n_frames != n:
        raise InvalidInputError(f"geometry has {geom.n_frames} frames, {n} images")
    rep = MetricReport()
    for t, name in enumerate(index["frames"]):
        img = load_png(pred / name)
        gt = clip.image(k, t)
        rep.add(psnr(img, gt), ssim(img, gt),
                lmd(project_landmarks(cam, geom.vertices[t], clip.landmarks),
                    project_landmarks(cam, clip.geometry.vertices[t], clip.landmarks)))
    out = Path(args.out or pred)
    out.mkdir(parents=True, exist_ok=True)
    rep.save_json(out / "report.json")
    rep.save_csv(out / "report.csv")
    result = rep.aggregate()
    result.update(frames=rep.n_frames, camera=k)
    print(json.dumps(result))
    return EXIT_OK


def cmd_render_path(args):
    from .config import CameraPath
    from .g2a import load_canonical
    from .pipeline import default_sweep, path_cameras
    from .rasterizer import render
    from .datagen import SyntheticRig
    cfg = _config(args).resolved()
    fps = args.fps or cfg.synth.fps
    run = Path(args.run)
    if not (run / "canonical.ckpt").exists():
        from .pipeline import StageOrderError
        raise StageOrderError("render-path", str(run / "canonical.ckpt"))
    head, meta = load_canonical(run / "canonical.ckpt")
    rig = SyntheticRig(**{k: tuple(v) if isinstance(v, list) else v for k, v in meta["rig"].items()})
    path = CameraPath.load(args.path) if args.path else default_sweep(args.frames, fps)
    cams = path_cameras(path, args.frames, fps, rig)
    frames = [render(head.cloud, c, cfg.background) for c in cams]
    out = Path(args.out or "render_path")
    meta = _save_frames(frames, out, {"fps": fps, "path": path.to_list(), "cameras": [c.to_dict() for c in cams]})
    cfg.save(out / "config.resolved.json")
    print(json.dumps({"frames": meta["n_frames"], "out": str(out)}))
    return EXIT_OK


def cmd_validate(args):
    from .datagen import validate_dataset
    report = validate_dataset(args.data)
    text = json.dumps(report, indent=1)
    if args.out:
        Path(args.out).parent.mkdir(parents=True, exist_ok=True)
        Path(args.out).write_text(text)
    print(text)
    return EXIT_OK if report["ok"] else EXIT_INVALID


COMMANDS = {"gen-data": cmd_gen_data, "train": cmd_train, "synth": cmd_synth, "eval": cmd_eval,
            "render-path": cmd_render_path, "validate": cmd_validate}


def main(argv=None):
    args = _parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    threads = os.environ.get("EMOHEAD4D_THREADS")
    if threads:
        from ._kernels import set_threads
        set_threads(int(threads))
    from .core import InvalidInputError
    from .pipeline import StageOrderError
    try:
        return COMMANDS[args.command](args)
    except StageOrderError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_STAGE
    except (InvalidInputError, ValueError, KeyError) as exc:
        # ingestion, configuration and format problems all derive from ValueError
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INVALID
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_IO


if __name__ == "__main__":
    sys.exit(main())
