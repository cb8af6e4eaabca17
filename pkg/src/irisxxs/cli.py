"""Command-line front end: ``irisxxs <command> ...``.

Exit codes (stable):

    0  success
    2  bad input: arguments, unreadable/malformed files, unwritable output
    3  training diverged
    4  no eyes found
    5  iris radius below the minimum (subject too far from the camera)
    6  degenerate geometry (circle fit or eye boxes undefined)
    7  template unusable (joint mask too small)
    8  configuration error (missing weights, bad config file)
    9  any other failure
"""
from __future__ import annotations

import argparse
import csv
import io
import math
import sys
from pathlib import Path

from . import calibration, codec
from .data import PipelineConfig, load_config, load_manifest, write_corpus
from .errors import InputError, IrisError, IrisTooSmall, NotFound
from .imaging import load_image, save_image, save_mask
from .metrics import benchmark, fnmr_at_fmr
from .synth import SceneParams
from .unet import UnetXxsConfig, build_control_net, build_unet_xxs, model_info, segment

EXIT_OK, EXIT_OTHER = 0, 9
LOCALIZATION_COLUMNS = ("image_path", "px", "py", "pr", "ix", "iy", "ir", "method", "confidence")


def _write_text(path, text):
    p = Path(path)
    try:
        p.parent.mkdir(parents=True, exist_ok=True)
        p.write_text(text, encoding="utf-8")
    except OSError as exc:
        raise InputError(f"cannot write {p}: {exc}") from None


def _csv_text(header, rows, seed=None):
    buf = io.StringIO()
    if seed is not None:
        buf.write(f"# seed={seed}\n")
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    w.writerows(rows)
    return buf.getvalue()


def _pipeline(args):
    from .pipeline import Pipeline

    cfg = load_config(args.config)
    if getattr(args, "threshold", None) is not None:
        cfg.threshold = args.threshold
    return Pipeline.from_config(cfg)


# -- commands -------------------------------------------------------------------------

def cmd_synth(args):
    params = SceneParams(iris_radius=args.iris_radius, noise_sigma=args.noise, gaze=args.gaze,
                         jitter=args.jitter, dilation_jitter=args.dilation_jitter, eye_spacing=args.eye_spacing)
    m = write_corpus(args.out, args.identities, args.samples, params, occlusion_max=args.occlusion,
                     seed=args.seed, eye_side=args.eye_side, radius_jitter=args.radius_jitter)
    print(f"wrote {len(m)} scenes to {args.out}")
    return EXIT_OK


def cmd_train(args):
    from .training import format_log, train_task

    manifest = load_manifest(args.manifest)

    def show(e):
        print(f"epoch {e.epoch}: loss {e.loss:.4f} val_iou {e.val_iou:.4f} ({e.seconds:.1f} s)", flush=True)

    model, log = train_task(args.task, manifest, args.epochs, args.lr, seed=args.seed,
                            val_fraction=args.val_fraction, negatives=args.negatives,
                            rotations=args.rotations, max_angle=args.max_angle, flips=args.flips,
                            batch_size=args.batch_size,
                            callback=show)
    out = Path(args.out)
    try:
        out.parent.mkdir(parents=True, exist_ok=True)
        model.save(out)
    except OSError as exc:
        raise InputError(f"cannot write {out}: {exc}") from None
    _write_text(args.log or out.with_suffix(".log.csv"), format_log(log, args.seed))
    print(f"parameters: {model.param_count}")
    return EXIT_OK


def _template_path(stem, side):
    p = Path(stem)
    suffix = p.suffix or ".irt"
    return p.with_name(f"{p.stem if p.suffix else p.name}_{side}{suffix}")


def _save_template(template, path):
    try:
        path.parent.mkdir(parents=True, exist_ok=True)
        codec.save_template(template, path)
    except OSError as exc:
        raise InputError(f"cannot write {path}: {exc}") from None


def _write_debug(frame, image, out_dir, seed):
    d = Path(out_dir)
    try:
        d.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise InputError(f"cannot write {d}: {exc}") from None
    note = f"seed={seed}"
    save_image(image, d / "input.pgm", note)
    save_mask(frame.eye_mask, d / "eye_mask.pgm", note)
    rows = []
    for e in frame.eyes:
        save_image(e.crop, d / f"crop_{e.side}.pgm", note)
        if e.mask is not None:
            save_mask(e.mask, d / f"iris_mask_{e.side}.pgm", note)
        if e.sheet is not None:
            save_image(e.sheet.values * 255, d / f"sheet_{e.side}.pgm", note)
        if e.template is not None:
            save_mask(e.template.code.reshape(-1, codec.COLS), d / f"code_{e.side}.pgm", note)
            codec.save_template(e.template, d / f"template_{e.side}.irt")
        loc = e.localization
        b = e.box
        rows.append([e.side, b.x0, b.y0, b.width, b.height,
                     *(f"{v:.4f}" for v in (loc.pupil.astuple() if loc else (math.nan,) * 3)),
                     *(f"{v:.4f}" for v in (loc.iris.astuple() if loc else (math.nan,) * 3)),
                     loc.method if loc else "", e.error or ""])
    header = ["side", "box_x", "box_y", "box_w", "box_h", "pupil_x", "pupil_y", "pupil_r",
              "iris_x", "iris_y", "iris_r", "method", "error"]
    _write_text(d / "eyes.csv", _csv_text(header, rows, seed))


def cmd_run(args):
    pipe = _pipeline(args)
    cfg = pipe.config
    if args.crop:
        crop = load_image(args.crop)
        res = pipe.process_crop(crop, args.side, args.subject)
        _check_radius([res], cfg)
        path = _template_path(args.out_template, args.side)
        _save_template(res.template, path)
        print(f"{args.side}: iris r={res.localization.iris.r:.2f} px -> {path}")
        return EXIT_OK
    image = load_image(args.image)
    frame = pipe.process(image, args.subject)
    if args.out_debug:
        _write_debug(frame, image, args.out_debug, cfg.seed)
    _check_radius(frame.eyes, cfg)
    written = 0
    for e in frame.eyes:
        if e.template is None:
            print(f"{e.side}: failed: {e.error}", file=sys.stderr)
            continue
        path = _template_path(args.out_template, e.side)
        _save_template(e.template, path)
        written += 1
        print(f"{e.side}: iris r={e.localization.iris.r:.2f} px ({e.localization.method}) -> {path}")
    if written == 0:
        first = next((e.exc for e in frame.eyes if e.exc is not None), None)
        raise first if first is not None else NotFound("no eyes found")
    return EXIT_OK


def _check_radius(eyes, cfg: PipelineConfig):
    floor = calibration.min_radius_threshold(cfg)
    for e in eyes:
        if e.localization is not None and e.localization.iris.r < floor:
            raise IrisTooSmall(f"{e.side} iris radius {e.localization.iris.r:.1f} px is below {floor:g} px: "
                               f"too far from the camera")


def cmd_match(args):
    if len(args.template) != 2:
        raise InputError("match needs exactly two --template arguments")
    a, b = (codec.load_template(p) for p in args.template)
    hd = codec.hamming_distance(a, b, args.max_shift)
    thr = args.threshold if args.threshold is not None else load_config(args.config).match_threshold
    print(f"hd: {hd:.6f}")
    print(f"threshold: {thr:g}")
    print(f"decision: {'MATCH' if hd <= thr else 'NON-MATCH'}")
    return EXIT_OK


def cmd_evaluate(args):
    from .pipeline import evaluate

    pipe = _pipeline(args)
    manifest = load_manifest(args.manifest)
    ev = evaluate(pipe, manifest, width=args.width, workers=args.workers, max_shift=args.max_shift)
    ev.scores.require(2)
    seed = pipe.config.seed
    out = Path(args.report)
    report = [f"# seed={seed}"] + ev.report()
    _write_text(out / "report.txt", "\n".join(report) + "\n")
    _write_text(out / "scores.csv", _csv_text(["path_a", "path_b", "mated", "hd"],
                                               [[a, b, int(m), "" if math.isnan(s) else f"{s:.6f}"]
                                                for a, b, m, s in ev.pairs], seed))
    _write_text(out / "det.csv", _csv_text(["threshold", "fmr", "fnmr"],
                                            [[f"{t:.6f}", f"{f:.6f}", f"{n:.6f}"] for t, f, n in ev.det()], seed))
    ops = fnmr_at_fmr(ev.scores)
    _write_text(out / "fnmr_at_fmr.csv", _csv_text(["fmr_target", "fnmr", "threshold", "flag"],
                                                    [[o.target, f"{o.fnmr:.6f}", f"{o.threshold:.6f}", o.flag]
                                                     for o in ops], seed))
    _write_text(out / "localization.csv", _csv_text(LOCALIZATION_COLUMNS, ev.localization_rows(), seed))
    if ev.failures:
        _write_text(out / "failures.csv", _csv_text(["path", "reason"], sorted(ev.failures.items()), seed))
    print("\n".join(report[1:]))
    return EXIT_OK


def _limit_threads():
    try:
        from threadpoolctl import threadpool_limits
    except ImportError:  # pragma: no cover
        return None
    return threadpool_limits(1)


def cmd_benchmark(args):
    manifest = load_manifest(args.manifest)
    images = [load_image(manifest.resolve(r)) for r in list(manifest)[:max(1, args.frames)]]
    stage = args.stage
    if stage in ("find_eyes", "segment_iris", "control"):
        task = "find_eyes" if stage == "find_eyes" else "segment_iris"
        cfg = UnetXxsConfig.for_task(task)
        model = build_control_net(cfg) if stage == "control" else build_unet_xxs(cfg)
        if args.config:
            cfg_file = load_config(args.config)
            weights = cfg_file.find_eyes_weights if task == "find_eyes" else cfg_file.segment_iris_weights
            if stage != "control" and weights:
                model.load(weights)

        def fn(img):
            return segment(model, img)
    else:
        pipe = _pipeline(args)

        def fn(img):
            try:
                return pipe.process(img)
            except IrisError:
                return None
    limit = _limit_threads()
    try:
        rep = benchmark(fn, images, warmup=args.warmup, iterations=args.iterations, stage=stage)
    finally:
        if limit is not None:
            limit.unregister()
    lines = rep.lines()
    if stage in ("find_eyes", "segment_iris", "control"):
        lines.append(f"parameters: {model.param_count}")
    if args.out:
        _write_text(args.out, "\n".join(lines) + "\n")
    print("\n".join(lines))
    return EXIT_OK


def _pair(text, what):
    try:
        a, b = text.split(":")
        return float(a), float(b)
    except ValueError:
        raise InputError(f"{what} must look like A:B, got {text!r}") from None


def cmd_calibrate_sweep(args):
    pipe = _pipeline(args)
    manifest = load_manifest(args.manifest)
    try:
        widths = [int(w) for w in args.widths.split(",")]
    except ValueError:
        raise InputError(f"widths must be comma-separated integers, got {args.widths!r}") from None
    rows = calibration.resolution_sweep(pipe, manifest, widths, workers=args.workers)
    calibration.write_sweep_csv(rows, args.out, f"seed={pipe.config.seed}")
    for r in rows:
        print(",".join(str(v) for v in r.csv_row()))
    return EXIT_OK


def cmd_calibrate_distance(args):
    samples = [_pair(p, "--point") for p in args.point or []]
    if args.samples:
        text = Path(args.samples).read_text(encoding="utf-8")
        for n, line in enumerate(text.splitlines(), start=1):
            line = line.split("#", 1)[0].strip()
            if not line or line.startswith("distance"):
                continue
            try:
                d, r = (float(v) for v in line.split(",")[:2])
            except ValueError:
                raise InputError(f"{args.samples} line {n}: expected distance_cm,radius_px") from None
            samples.append((d, r))
    model = calibration.fit_radius_model(samples)
    floor = args.min_radius if args.min_radius is not None else calibration.DEFAULT_MIN_RADIUS
    lines = model.lines() + [f"min_iris_radius_px: {floor:g}",
                             f"max_distance_cm: {model.invert(floor):.4g}"]
    if args.out:
        _write_text(args.out, "\n".join(lines) + "\n")
    print("\n".join(lines))
    return EXIT_OK


def _interval(text):
    parts = text.split(":")
    if len(parts) not in (2, 3):
        raise InputError(f"--interval must look like LO:HI[:label], got {text!r}")

    def bound(v, default):
        v = v.strip()
        if v == "":
            return default
        try:
            return float(v)
        except ValueError:
            raise InputError(f"bad interval bound {v!r}") from None

    return calibration.DistanceInterval(bound(parts[0], -math.inf), bound(parts[1], math.inf),
                                        parts[2] if len(parts) == 3 else "")


def cmd_calibrate_interval(args):
    criteria = [_interval(t) for t in args.interval] if args.interval else list(calibration.REFERENCE_CRITERIA)
    lines = calibration.interval_report(criteria)
    if args.out:
        _write_text(args.out, "\n".join(lines) + "\n")
    print("\n".join(lines))
    return EXIT_OK


def cmd_calibrate_snr(args):
    rows = calibration.snr_by_distance(load_manifest(args.manifest))
    text = _csv_text(["distance_cm", "mean_snr", "images"], [[f"{d:g}", f"{s:.4f}", n] for d, s, n in rows])
    if args.out:
        _write_text(args.out, text)
    print(text, end="")
    return EXIT_OK


def cmd_calibrate_gaze(args):
    ratio = calibration.gaze_aperture_ratio([_pair(e, "--eye") for e in args.eye])
    cfg = load_config(args.config)
    print(f"dy_dx_ratio: {ratio:.4f}")
    print(f"occluded: {'yes' if ratio < cfg.occlusion_ratio else 'no'} (threshold {cfg.occlusion_ratio:g})")
    return EXIT_OK


def cmd_model_info(args):
    cfg = UnetXxsConfig.for_task(args.task)
    model = build_control_net(cfg) if args.control else build_unet_xxs(cfg)
    print("\n".join(model_info(model)))
    return EXIT_OK


# -- parser ------------------------------------------------------------------------------

def build_parser():
    p = argparse.ArgumentParser(prog="irisxxs", description="Lightweight iris recognition pipeline.")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("synth", help="render a synthetic two-eye corpus")
    s.add_argument("--identities", type=int, required=True)
    s.add_argument("--samples", type=int, required=True)
    s.add_argument("--out", required=True)
    s.add_argument("--noise", type=float, default=10.0)
    s.add_argument("--occlusion", type=float, default=0.2, help="max upper-lid occlusion per sample")
    s.add_argument("--iris-radius", type=float, default=50.0)
    s.add_argument("--radius-jitter", type=float, default=0.0, help="per-sample iris radius spread (fraction)")
    s.add_argument("--eye-spacing", type=float, default=8.0)
    s.add_argument("--gaze", type=float, default=0.1)
    s.add_argument("--jitter", type=float, default=10.0)
    s.add_argument("--dilation-jitter", type=float, default=0.05)
    s.add_argument("--eye-side", choices=("left", "right"), default="right")
    s.add_argument("--seed", type=int, required=True)
    s.set_defaults(func=cmd_synth)

    s = sub.add_parser("train", help="train one task model")
    s.add_argument("--task", choices=("find_eyes", "segment_iris"), required=True)
    s.add_argument("--manifest", required=True)
    s.add_argument("--epochs", type=int, required=True)
    s.add_argument("--lr", type=float, required=True)
    s.add_argument("--seed", type=int, required=True)
    s.add_argument("--out", required=True)
    s.add_argument("--log")
    s.add_argument("--val-fraction", type=float, default=0.2)
    s.add_argument("--negatives", type=float, default=0.1)
    s.add_argument("--rotations", type=int, default=0)
    s.add_argument("--max-angle", type=float, default=15.0)
    s.add_argument("--flips", action="store_true", help="add left-right mirrored copies")
    s.add_argument("--batch-size", type=int, default=8)
    s.set_defaults(func=cmd_train)

    s = sub.add_parser("run", help="image -> per-eye templates")
    src = s.add_mutually_exclusive_group(required=True)
    src.add_argument("--image")
    src.add_argument("--crop", help="re-run the iris stages on a saved periocular crop")
    s.add_argument("--side", choices=("left", "right"), default="right")
    s.add_argument("--config")
    s.add_argument("--out-template", required=True, help="path stem; _left/_right is appended")
    s.add_argument("--out-debug")
    s.add_argument("--subject", default="")
    s.add_argument("--threshold", type=float)
    s.set_defaults(func=cmd_run)

    s = sub.add_parser("match", help="compare two templates")
    s.add_argument("--template", action="append", required=True)
    s.add_argument("--max-shift", type=int, default=0)
    s.add_argument("--threshold", type=float)
    s.add_argument("--config")
    s.set_defaults(func=cmd_match)

    s = sub.add_parser("evaluate", help="all-pairs evaluation over a manifest")
    s.add_argument("--manifest", required=True)
    s.add_argument("--config")
    s.add_argument("--report", required=True)
    s.add_argument("--workers", type=int, default=None)
    s.add_argument("--width", type=int)
    s.add_argument("--max-shift", type=int)
    s.add_argument("--threshold", type=float)
    s.set_defaults(func=cmd_evaluate)

    s = sub.add_parser("benchmark", help="per-frame timing of one stage, single-threaded")
    s.add_argument("--stage", choices=("find_eyes", "segment_iris", "control", "pipeline"), required=True)
    s.add_argument("--manifest", required=True)
    s.add_argument("--config")
    s.add_argument("--frames", type=int, default=10)
    s.add_argument("--iterations", type=int, default=20)
    s.add_argument("--warmup", type=int, default=2)
    s.add_argument("--out")
    s.set_defaults(func=cmd_benchmark)

    s = sub.add_parser("calibrate", help="sensor calibration analyses")
    cal = s.add_subparsers(dest="analysis", required=True)
    c = cal.add_parser("sweep", help="EER/d' against image width")
    c.add_argument("--manifest", required=True)
    c.add_argument("--config")
    c.add_argument("--widths", required=True, help="descending, comma-separated")
    c.add_argument("--out", required=True)
    c.add_argument("--workers", type=int, default=None)
    c.set_defaults(func=cmd_calibrate_sweep)
    c = cal.add_parser("distance", help="fit r = k/d and report the usable distance")
    c.add_argument("--point", action="append", help="DISTANCE_CM:RADIUS_PX")
    c.add_argument("--samples", help="CSV of distance_cm,radius_px")
    c.add_argument("--min-radius", type=float)
    c.add_argument("--out")
    c.set_defaults(func=cmd_calibrate_distance)
    c = cal.add_parser("interval", help="intersect capture-distance intervals")
    c.add_argument("--interval", action="append", help="LO:HI[:label], empty bound = unbounded")
    c.add_argument("--out")
    c.set_defaults(func=cmd_calibrate_interval)
    c = cal.add_parser("snr", help="SNR per capture distance")
    c.add_argument("--manifest", required=True)
    c.add_argument("--out")
    c.set_defaults(func=cmd_calibrate_snr)
    c = cal.add_parser("gaze", help="mean Dy/Dx over eyes")
    c.add_argument("--eye", action="append", required=True, help="DX:DY")
    c.add_argument("--config")
    c.set_defaults(func=cmd_calibrate_gaze)

    s = sub.add_parser("model-info", help="layer table and parameter count")
    s.add_argument("--task", choices=("find_eyes", "segment_iris"), default="segment_iris")
    s.add_argument("--control", action="store_true", help="the 4x-parameter comparison network")
    s.set_defaults(func=cmd_model_info)
    return p


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    if getattr(args, "workers", 0) is None:
        import os
        args.workers = os.cpu_count() or 1
    try:
        return args.func(args)
    except IrisError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return exc.exit_code
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return InputError.exit_code
    except Exception as exc:  # noqa: BLE001
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_OTHER


if __name__ == "__main__":
    sys.exit(main())
