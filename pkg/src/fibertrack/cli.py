"""Command-line entry point: ``fibertrack {synth,run,detect,eval,render}``."""

from __future__ import annotations

import argparse
import colorsys
import dataclasses
import logging
import os
import sys
from concurrent.futures import ThreadPoolExecutor
from contextlib import contextmanager
from pathlib import Path

import cv2
import numpy as np
import yaml

from . import detector as det
from . import evaluation, loop, synthgen
from .core import FormatError, group_by_frame, read_detections, read_tracks, write_detections, write_tracks
from .initializer import HoughParams, InitConfig
from .segmentation import EmMpmParams
from .tracker import TrackerConfig

log = logging.getLogger("fibertrack")

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_INTERNAL = 0, 1, 2, 3
ENV_OUT_DIR = "FIBERTRACK_OUT_DIR"
ENV_THREADS = "FIBERTRACK_THREADS"


class UsageError(Exception):
    pass


@dataclasses.dataclass
class EvalConfig:
    iou_threshold: float = 0.5
    hit_threshold: float = 20.0
    restrict_to_gt: bool = False


SECTIONS = {
    "synth": synthgen.SynthConfig,
    "init": InitConfig,
    "detector": det.DetectorConfig,
    "tracker": TrackerConfig,
    "loop": None,
    "evaluation": EvalConfig,
}
LOOP_KEYS = ("beta", "refine_nms", "max_iterations", "convergence_epsilon", "drop_trailing_timeout_predictions", "seed")
NESTED = {"init": {"hough": HoughParams, "emmpm": EmMpmParams}}


def _dc_defaults(cls):
    out = {}
    for f in dataclasses.fields(cls):
        if f.default is not dataclasses.MISSING:
            v = f.default
        else:
            v = f.default_factory()
        if dataclasses.is_dataclass(v):
            v = dataclasses.asdict(v)
        elif isinstance(v, tuple):
            v = list(v)
        out[f.name] = v
    return out


def default_config() -> dict:
    cfg = {}
    for name, cls in SECTIONS.items():
        if cls is None:
            lc = loop.LoopConfig()
            cfg[name] = {k: getattr(lc, k) for k in LOOP_KEYS}
        else:
            cfg[name] = _dc_defaults(cls)
    return cfg


def _merge(base: dict, override: dict, where: str) -> dict:
    out = dict(base)
    for key, value in override.items():
        if key not in base:
            raise UsageError(f"unknown config key {where}{key!r}")
        if isinstance(base[key], dict):
            if not isinstance(value, dict):
                raise UsageError(f"config key {where}{key!r} must be a mapping")
            out[key] = _merge(base[key], value, f"{where}{key}.")
        else:
            out[key] = value
    return out


def load_config(path=None) -> dict:
    cfg = default_config()
    if path is None:
        return cfg
    try:
        data = yaml.safe_load(Path(path).read_text()) or {}
    except OSError as exc:
        raise UsageError(f"cannot read config {path}: {exc}") from exc
    except yaml.YAMLError as exc:
        raise UsageError(f"{path}: invalid YAML: {exc}") from exc
    if not isinstance(data, dict):
        raise UsageError(f"{path}: top level must be a mapping")
    return _merge(cfg, data, "")


def _tuples(cls, values: dict) -> dict:
    out = dict(values)
    for f in dataclasses.fields(cls):
        if isinstance(out.get(f.name), list):
            out[f.name] = tuple(out[f.name])
    return out


def build_synth_config(cfg) -> synthgen.SynthConfig:
    return synthgen.SynthConfig(**_tuples(synthgen.SynthConfig, cfg["synth"]))


def build_loop_config(cfg) -> loop.LoopConfig:
    return loop.LoopConfig(
        detector=det.DetectorConfig(**cfg["detector"]),
        tracker=TrackerConfig(**cfg["tracker"]),
        init=InitConfig(**cfg["init"]),
        **cfg["loop"],
    )


def _set(cfg, dotted, value):
    if value is None:
        return
    node = cfg
    *parents, leaf = dotted.split(".")
    for p in parents:
        node = node[p]
    node[leaf] = value


def _threads(args) -> int:
    n = args.threads
    if n is None and os.environ.get(ENV_THREADS):
        try:
            n = int(os.environ[ENV_THREADS])
        except ValueError as exc:
            raise UsageError(f"{ENV_THREADS} must be an integer") from exc
    if n is None:
        n = os.cpu_count() or 1
    if n < 1:
        raise UsageError("--threads must be >= 1")
    return n


@contextmanager
def _mapper(threads: int):
    if threads == 1:
        yield map
        return
    with ThreadPoolExecutor(max_workers=threads) as pool:
        # Executor.map yields results in submission order
        yield pool.map


def _out_dir(args) -> Path:
    out = args.out or os.environ.get(ENV_OUT_DIR)
    if not out:
        raise UsageError(f"an output directory is required (--out or {ENV_OUT_DIR})")
    path = Path(out)
    path.mkdir(parents=True, exist_ok=True)
    return path


def _echo_config(cfg, out: Path):
    (out / "config.resolved.yaml").write_text(yaml.safe_dump(cfg, sort_keys=True))


# ---------------------------------------------------------------------------


def cmd_synth(args) -> int:
    cfg = load_config(args.config)
    _set(cfg, "synth.rng_seed", args.seed)
    _set(cfg, "synth.num_frames", args.frames)
    _set(cfg, "synth.num_fibers", args.fibers)
    _set(cfg, "synth.degradation_frame_fraction", args.degraded_fraction)
    _set(cfg, "synth.width", args.size)
    _set(cfg, "synth.height", args.size)
    out = _out_dir(args)
    sc = build_synth_config(cfg)
    with _mapper(_threads(args)) as map_fn:
        ds = synthgen.generate(sc, map_fn=map_fn)
    synthgen.export(ds, out)
    _echo_config(cfg, out)
    print(f"frames: {ds.num_frames}")
    print(f"size: {sc.width}x{sc.height}")
    print(f"fibers: {sc.num_fibers}")
    print(f"degraded frames: {sum(ds.degraded_flags)}")
    print(f"written to: {out}")
    return EXIT_OK


def cmd_run(args) -> int:
    cfg = load_config(args.config)
    _set(cfg, "loop.seed", args.seed)
    _set(cfg, "loop.max_iterations", args.max_iterations)
    _set(cfg, "loop.beta", args.beta)
    _set(cfg, "init.method", args.init_method)
    out = _out_dir(args)
    lc = build_loop_config(cfg)
    ds = synthgen.load(args.dataset)
    _echo_config(cfg, out)
    print(f"fibertrack run: alpha={lc.tracker.alpha} beta={lc.beta} init={lc.init.method} "
          f"refine_nms={lc.resolved_refine_nms} max_iterations={lc.max_iterations} "
          f"epsilon={lc.convergence_epsilon}")
    with _mapper(_threads(args)) as map_fn:
        res = loop.run_algorithm1(ds, lc, out_dir=out, map_fn=map_fn)
    write_detections(out / "detections.txt", [d for f in res.detections for d in f])
    write_tracks(out / "tracks.txt", res.tracks)
    if res.model is not None:
        det.save_model(res.model, out / "model.bin")
    rows = [r.curve_row() for r in res.reports]
    (out / "curves.tsv").write_text(evaluation.format_curves(rows))
    last = res.reports[-1]
    summary = [
        f"iterations: {last.iteration}",
        f"converged: {str(res.converged).lower()}",
        f"final_gp_delta: {last.gp_delta if last.gp_delta is not None else 'none'}",
        f"drop_trailing_timeout_predictions: {str(lc.drop_trailing_timeout_predictions).lower()}",
    ]
    (out / "final_report").write_text("\n".join(summary) + "\n\n" + last.format())
    print("\n".join(summary))
    for r in res.reports:
        if r.detection is not None:
            print(f"iter {r.iteration}: F={r.detection.f_measure:.4f}"
                  + (f" MOTA={r.tracking.mota:.4f}" if r.tracking else ""))
    return EXIT_OK


def _load_images(paths):
    images = []
    for p in paths:
        p = Path(p)
        if p.is_dir():
            images.extend(synthgen.load(p).frames)
            continue
        img = cv2.imread(str(p), cv2.IMREAD_GRAYSCALE)
        if img is None:
            raise FormatError(f"{p}: cannot read image")
        images.append(img)
    return images


def cmd_detect(args) -> int:
    model = det.load_model(args.model)
    images = _load_images(args.images)
    out = _out_dir(args)
    with _mapper(_threads(args)) as map_fn:
        dets = loop.detect_single_images(model, images, map_fn)
    write_detections(out / "detections.txt", [d for f in dets for d in f])
    print(f"images: {len(images)}")
    print(f"detections: {sum(map(len, dets))}")
    return EXIT_OK


def _read_any(path):
    """Detection or track file, decided by the field count of the first record."""
    with open(path) as fh:
        for line in fh:
            s = line.strip()
            if s and not s.startswith("#"):
                n = len(s.split(","))
                break
        else:
            return [], False
    if n == 7:
        return read_tracks(path), True
    return read_detections(path), False


def cmd_eval(args) -> int:
    cfg = load_config(args.config)
    _set(cfg, "evaluation.iou_threshold", args.iou)
    _set(cfg, "evaluation.hit_threshold", args.hit_threshold)
    if args.restrict_to_gt:
        cfg["evaluation"]["restrict_to_gt"] = True
    ec = EvalConfig(**cfg["evaluation"])
    pred, pred_tracks = _read_any(args.pred)
    gt, gt_tracks = _read_any(args.gt)
    if args.mode == "detection":
        pd = [d for _, d in pred] if pred_tracks else pred
        gd = [d for _, d in gt] if gt_tracks else gt
        n = args.num_frames or 1 + max([d.frame_index for d in pd + gd], default=-1)
        m = evaluation.detection_metrics(group_by_frame(pd, n), group_by_frame(gd, n), ec.iou_threshold)
        text = evaluation.format_detection_report(m)
    else:
        if not (pred_tracks and gt_tracks):
            raise FormatError("tracking mode needs track files (track_id,frame,x1,y1,x2,y2,score)")
        m = evaluation.mot_metrics(pred, gt, ec.hit_threshold, ec.restrict_to_gt)
        text = evaluation.format_mot_report(m)
    sys.stdout.write(text)
    out = args.out or os.environ.get(ENV_OUT_DIR)
    if out:
        Path(out).mkdir(parents=True, exist_ok=True)
        (Path(out) / f"eval_{args.mode}.txt").write_text(text)
    return EXIT_OK


GREEN, RED, BLUE = (0, 200, 0), (0, 0, 255), (255, 0, 0)


def track_color(track_id: int):
    h = (track_id * 0.618033988749895) % 1.0
    r, g, b = colorsys.hsv_to_rgb(h, 0.9, 1.0)
    return int(255 * b), int(255 * g), int(255 * r)


def _draw(img, box, color):
    p1 = (int(round(box.x1)), int(round(box.y1)))
    p2 = (int(round(box.x2)) - 1, int(round(box.y2)) - 1)
    cv2.rectangle(img, p1, p2, color, 1)


def render_frames(frames, pred, pred_ids=None, gt=None, iou_threshold=0.5):
    """BGR overlays; with ``gt`` unmatched predictions are red and misses blue."""
    out = []
    n = len(frames)
    by_frame = group_by_frame(pred, n)
    ids = {}
    if pred_ids is not None:
        for tid, d in pred_ids:
            ids[id(d)] = tid
    gt_frames = group_by_frame(gt, n) if gt is not None else None
    for t, frame in enumerate(frames):
        img = cv2.cvtColor(np.asarray(frame, dtype=np.uint8), cv2.COLOR_GRAY2BGR)
        dets = by_frame[t]
        if gt_frames is not None:
            pairs = evaluation.match_frame(dets, gt_frames[t], iou_threshold)
            hit_d = {i for i, _ in pairs}
            hit_g = {j for _, j in pairs}
            for i, d in enumerate(dets):
                _draw(img, d.box, GREEN if i in hit_d else RED)
            for j, g in enumerate(gt_frames[t]):
                if j not in hit_g:
                    _draw(img, g.box, BLUE)
        else:
            for d in dets:
                _draw(img, d.box, track_color(ids[id(d)]) if id(d) in ids else GREEN)
        out.append(img)
    return out


def cmd_render(args) -> int:
    ds = synthgen.load(args.dataset)
    out = _out_dir(args)
    pred, is_tracks = _read_any(args.pred)
    records = pred if is_tracks else None
    dets = [d for _, d in pred] if is_tracks else pred
    gt = None
    if args.compare:
        if args.gt:
            g, g_tracks = _read_any(args.gt)
            gt = [d for _, d in g] if g_tracks else g
        elif ds.has_gt:
            gt = [d for _, d in ds.gt_records()]
        else:
            raise FormatError("compare mode needs ground truth (--gt or a dataset with gt.txt)")
    for t, img in enumerate(render_frames(ds.frames, dets, records, gt)):
        cv2.imwrite(str(out / f"frame_{t:04d}.png"), img)
    print(f"rendered {ds.num_frames} frames to {out}")
    return EXIT_OK


# ---------------------------------------------------------------------------


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="fibertrack", description="Unsupervised fiber detection and tracking on image sequences.")
    p.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    def common(sp, threads=True):
        sp.add_argument("--config", help="YAML config file")
        sp.add_argument("--out", help=f"output directory (env {ENV_OUT_DIR})")
        if threads:
            sp.add_argument("--threads", type=int, help=f"worker threads (env {ENV_THREADS}; default: all cores)")

    sp = sub.add_parser("synth", help="generate a synthetic sequence with ground truth")
    common(sp)
    sp.add_argument("--seed", type=int)
    sp.add_argument("--frames", type=int)
    sp.add_argument("--fibers", type=int)
    sp.add_argument("--size", type=int, help="square image side in pixels")
    sp.add_argument("--degraded-fraction", type=float)
    sp.set_defaults(func=cmd_synth)

    sp = sub.add_parser("run", help="run the self-training detection/tracking loop")
    common(sp)
    sp.add_argument("dataset", help="dataset directory (frames + optional gt.txt)")
    sp.add_argument("--seed", type=int)
    sp.add_argument("--max-iterations", type=int)
    sp.add_argument("--beta", type=int)
    sp.add_argument("--init-method", choices=["emmpmh", "proposals"])
    sp.set_defaults(func=cmd_run)

    sp = sub.add_parser("detect", help="detect fibers on single images with a saved model")
    common(sp)
    sp.add_argument("--model", required=True)
    sp.add_argument("images", nargs="+", help="image files or dataset directories")
    sp.set_defaults(func=cmd_detect)

    sp = sub.add_parser("eval", help="score predictions against ground truth")
    common(sp, threads=False)
    sp.add_argument("pred")
    sp.add_argument("gt")
    sp.add_argument("--mode", choices=["detection", "tracking"], default="detection")
    sp.add_argument("--iou", type=float)
    sp.add_argument("--hit-threshold", type=float)
    sp.add_argument("--restrict-to-gt", action="store_true")
    sp.add_argument("--num-frames", type=int)
    sp.set_defaults(func=cmd_eval)

    sp = sub.add_parser("render", help="draw detections or tracks over the frames")
    common(sp, threads=False)
    sp.add_argument("dataset")
    sp.add_argument("pred", help="detection or track file")
    sp.add_argument("--compare", action="store_true", help="mark false positives and misses against ground truth")
    sp.add_argument("--gt", help="ground-truth file (default: the dataset's gt.txt)")
    sp.set_defaults(func=cmd_render)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except UsageError as exc:
        print(f"fibertrack: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (FormatError, OSError, ValueError, det.ModelVersionError) as exc:
        print(f"fibertrack: data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except loop.LoopError as exc:
        print(f"fibertrack: {exc}", file=sys.stderr)
        return EXIT_INTERNAL
    except Exception as exc:  # pragma: no cover - last-resort guard
        log.exception("internal error")
        print(f"fibertrack: internal error: {exc}", file=sys.stderr)
        return EXIT_INTERNAL


if __name__ == "__main__":
    sys.exit(main())
