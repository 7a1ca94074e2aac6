"""Command-line surface: PSV dumping, synthesis, training, evaluation,
benchmarking, and the non-learned reference synthesizer.

Exit codes: 0 ok, 1 runtime failure, 2 usage/parse errors.
"""

import argparse
import csv
import json
import os
import sys
import time

import numpy as np


def _add_common(p):
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--threads", type=int, default=0, help="cap BLAS threads (0 = leave as-is)")
    p.add_argument("--deterministic", action="store_true",
                   help="pin thread count to 1 for bit-identical reruns")


def build_parser():
    ap = argparse.ArgumentParser(prog="sweepsynth")
    sub = ap.add_subparsers(dest="cmd", required=True)

    p = sub.add_parser("psv", help="dump warped planes and a manifest")
    p.add_argument("--left", required=True)
    p.add_argument("--right", required=True)
    p.add_argument("--extra", action="append", default=[])
    p.add_argument("--cameras", required=True)
    p.add_argument("--target-index", type=int, required=True)
    p.add_argument("--planes", type=int, default=19)
    p.add_argument("--dmin", type=float, default=1.0)
    p.add_argument("--dmax", type=float, default=100.0)
    p.add_argument("--width", type=int, default=0, help="image width (0 = from input image)")
    p.add_argument("--height", type=int, default=0)
    p.add_argument("--out", required=True)
    _add_common(p)

    p = sub.add_parser("synth", help="synthesize a novel view with a trained model")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--config", required=True)
    p.add_argument("--inputs", nargs="+", required=True)
    p.add_argument("--cameras", required=True)
    p.add_argument("--source-indices", type=int, nargs="+", default=None)
    p.add_argument("--target-pose", required=True,
                   help="camera-file index, or 12 comma-separated floats (row-major 3x4 [R|t])")
    p.add_argument("--mixed-scale", action="store_true")
    p.add_argument("--out", required=True)
    _add_common(p)

    p = sub.add_parser("train", help="train on a dataset directory")
    p.add_argument("--config", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    _add_common(p)

    p = sub.add_parser("eval", help="PSNR/SSIM over prediction/target pairs")
    p.add_argument("--pred-dir")
    p.add_argument("--truth-dir")
    p.add_argument("--checkpoint")
    p.add_argument("--config")
    p.add_argument("--data")
    p.add_argument("--out", required=True)
    _add_common(p)

    p = sub.add_parser("hardwired", help="non-learned plane-selection synthesis")
    p.add_argument("--inputs", nargs=2, required=True)
    p.add_argument("--cameras", required=True)
    p.add_argument("--source-indices", type=int, nargs=2, default=None)
    p.add_argument("--target-pose", required=True)
    p.add_argument("--planes", type=int, default=19)
    p.add_argument("--dmin", type=float, default=1.0)
    p.add_argument("--dmax", type=float, default=100.0)
    p.add_argument("--patch", type=int, default=5)
    p.add_argument("--out", required=True)
    _add_common(p)

    p = sub.add_parser("bench", help="PSV build / forward timing report")
    p.add_argument("--resolution", default="960x540")
    p.add_argument("--planes", type=int, default=19)
    p.add_argument("--views", type=int, default=2)
    p.add_argument("--iters", type=int, default=5)
    p.add_argument("--forward", action="store_true", help="also time the full network forward")
    p.add_argument("--out", required=True)
    _add_common(p)
    return ap


def _apply_threads(args):
    n = 1 if args.deterministic and not args.threads else args.threads
    if n:
        try:
            import threadpoolctl

            threadpoolctl.threadpool_limits(limits=n)
        except Exception:
            for var in ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS"):
                os.environ[var] = str(n)


def _load_cameras(path, width, height):
    from .training import parse_realestate_cameras

    _, items = parse_realestate_cameras(path, width, height)
    return [cam for _, cam in items]


def _target_camera(spec, cams, example):
    from .geometry import Camera, RigidPose

    if "," in spec:
        vals = [float(v) for v in spec.split(",")]
        if len(vals) != 12:
            raise ValueError(f"--target-pose needs 12 floats, got {len(vals)}")
        m = np.array(vals).reshape(3, 4)
        return Camera(intrinsics=example.intrinsics, pose=RigidPose(m[:, :3], m[:, 3]))
    return cams[int(spec)]


def cmd_psv(args):
    from .imgio import load_image, save_image
    from .psv import build_psv, sample_depths

    images = [load_image(args.left), load_image(args.right)]
    images += [load_image(p) for p in args.extra]
    h, w = images[0].shape[:2]
    if args.width:
        w = args.width
    if args.height:
        h = args.height
    cams = _load_cameras(args.cameras, w, h)
    if len(cams) < len(images) + 1:
        raise ValueError(f"camera file has {len(cams)} poses, need {len(images) + 1}")
    tgt = cams[args.target_index]
    srcs = [c for i, c in enumerate(cams) if i != args.target_index][: len(images)]
    sampling = sample_depths(args.planes, args.dmin, args.dmax)
    vol = build_psv(images, srcs, tgt, sampling)
    os.makedirs(args.out, exist_ok=True)
    manifest_path = os.path.join(args.out, "manifest.jsonl")
    with open(manifest_path, "w") as mf:
        for vi in range(vol.n_views):
            for pi, depth in enumerate(sampling.depths):
                name = f"psv_src{vi + 1}_plane{pi}_d{depth:.4f}.png"
                save_image(
                    os.path.join(args.out, name),
                    vol.planes[vi * vol.n_planes + pi].transpose(1, 2, 0),
                )
                cam = vol.sources[vi]
                mf.write(json.dumps({
                    "file": name, "source": vi + 1, "plane": pi, "depth": float(depth),
                    "fx": cam.intrinsics.fx, "fy": cam.intrinsics.fy,
                    "cx": cam.intrinsics.cx, "cy": cam.intrinsics.cy,
                }) + "\n")
    print(f"wrote {vol.planes.shape[0]} planes to {args.out}")
    return 0


def _load_model(config_path, checkpoint_path):
    from .network import Model, load_model_config

    variant, seed = load_model_config(config_path)
    model = Model(variant, seed=seed)
    model.load(checkpoint_path)
    return model


def cmd_synth(args):
    from .imgio import load_image, save_image
    from .network import mixed_scale_forward, model_forward
    from .psv import build_psv

    model = _load_model(args.config, args.checkpoint)
    variant = model.variant
    images = [load_image(p) for p in args.inputs]
    h, w = images[0].shape[:2]
    cams = _load_cameras(args.cameras, w, h)
    if args.source_indices:
        srcs = [cams[i] for i in args.source_indices]
    else:
        srcs = cams[: len(images)]
    tgt = _target_camera(args.target_pose, cams, srcs[0])
    sampling = variant.depth_sampling()
    vol = build_psv(images, srcs, tgt, sampling)
    if args.mixed_scale:
        from .geometry import Camera

        half_imgs = [img[::2, ::2] for img in images]
        half_srcs = [
            Camera(intrinsics=c.intrinsics.scaled(0.5), pose=c.pose) for c in srcs
        ]
        half_tgt = Camera(intrinsics=tgt.intrinsics.scaled(0.5), pose=tgt.pose)
        # the half PSV is built from half-resolution inputs and intrinsics
        half_vol = build_psv(half_imgs, half_srcs, half_tgt, sampling)
        out = mixed_scale_forward(model, vol, half_vol)
    else:
        out = model_forward(model, vol)
    os.makedirs(os.path.dirname(os.path.abspath(args.out)), exist_ok=True)
    save_image(args.out, out)
    print(f"wrote {args.out}")
    return 0


def cmd_train(args):
    from .network import Model, load_model_config, save_model_config
    from .training import (LossConfig, TrainConfig, make_synthetic_dataset,
                           save_training_state, train_loop)

    from .network import parse_kv_file

    kv = parse_kv_file(args.config)
    variant, seed = load_model_config(args.config)
    os.makedirs(args.out, exist_ok=True)

    cfg = TrainConfig(
        lr=float(kv.get("lr", 1e-4)),
        beta1=float(kv.get("beta1", 0.4)),
        beta2=float(kv.get("beta2", 0.9)),
        batch_size=int(kv.get("batch_size", 2)),
        max_steps=int(kv.get("max_steps", 500)),
        seed=args.seed if args.seed else int(kv.get("seed", 0)),
        val_interval=int(kv.get("val_interval", 100)),
        patience=int(kv.get("patience", 0)),
        target_train_psnr=float(kv.get("target_train_psnr", 0)),
        dataset_fraction=float(kv.get("dataset_fraction", 1.0)),
        loss=LossConfig(
            lambda_l1=float(kv.get("lambda_l1", 1.0)),
            lambda_perc=float(kv.get("lambda_perc", 1.0)),
        ),
    )

    if args.data == "synthetic" or kv.get("dataset", "") == "synthetic":
        width = int(kv.get("width", 128))
        height = int(kv.get("height", 72))
        n_train = int(kv.get("n_train", 10))
        n_val = int(kv.get("n_val", 3))
        data = make_synthetic_dataset(n_train + n_val, width, height, seed=cfg.seed,
                                      n_views=variant.n_views)
        train_set, val_set = data[:n_train], data[n_train:]
    else:
        train_set, val_set = _load_triplet_dataset(args.data, kv, variant)

    model = Model(variant, seed=seed)
    result, adam = train_loop(
        model, train_set, val_set, cfg, trace_path=os.path.join(args.out, "trace.csv")
    )
    save_training_state(os.path.join(args.out, "model.ckpt"), model, adam)
    save_model_config(os.path.join(args.out, "model.cfg"), variant, seed)
    print(f"stopped after {result.steps_run} steps ({result.stop_reason}); "
          f"best val PSNR {result.best_val_psnr:.2f}")
    return 0


def _load_triplet_dataset(data_dir, kv, variant):
    from .training import TrainingTriplet, load_sequence_dir, sample_triplet_indices

    width = int(kv.get("width", 512))
    height = int(kv.get("height", 288))
    n_per_seq = int(kv.get("triplets_per_sequence", 4))
    rng = np.random.default_rng(int(kv.get("seed", 0)))
    triplets = []
    for name in sorted(os.listdir(data_dir)):
        seq = os.path.join(data_dir, name)
        if not os.path.isdir(seq):
            continue
        _, cams, frames = load_sequence_dir(seq, width, height)
        for _ in range(n_per_seq):
            i1, i2, t, mode = sample_triplet_indices(len(frames), rng)
            idxs = [i1, i2]
            if variant.n_views == 3:
                extra = max(0, i1 - 4) if i1 >= 4 else min(len(frames) - 1, i2 + 4)
                idxs.append(extra)
            triplets.append(TrainingTriplet(
                images=[frames[i] for i in idxs],
                cameras=[cams[i][1] if isinstance(cams[i], tuple) else cams[i] for i in idxs],
                target_image=frames[t],
                target_camera=cams[t][1] if isinstance(cams[t], tuple) else cams[t],
                mode=mode, indices=(i1, i2, t),
            ))
    n_val = max(1, len(triplets) // 10)
    return triplets[n_val:], triplets[:n_val]


def cmd_eval(args):
    from .imgio import load_image
    from .metrics import psnr, ssim

    rows = []
    if args.pred_dir:
        names = sorted(
            f for f in os.listdir(args.truth_dir) if f.lower().endswith(".png")
        )
        for name in names:
            a = load_image(os.path.join(args.pred_dir, name))
            b = load_image(os.path.join(args.truth_dir, name))
            rows.append((name, psnr(a, b), ssim(a, b)))
    else:
        if not (args.checkpoint and args.config and args.data):
            raise ValueError("eval needs either --pred-dir/--truth-dir or "
                             "--checkpoint/--config/--data")
        rows = _eval_checkpoint(args)
    os.makedirs(os.path.dirname(os.path.abspath(args.out)), exist_ok=True)
    with open(args.out, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["image_id", "psnr", "ssim"])
        for name, p, s in rows:
            w.writerow([name, f"{p:.6f}", f"{s:.6f}"])
        if rows:
            w.writerow(["mean",
                        f"{np.mean([r[1] for r in rows]):.6f}",
                        f"{np.mean([r[2] for r in rows]):.6f}"])
    print(f"wrote {args.out} ({len(rows)} images)")
    return 0


def _eval_checkpoint(args):
    from .metrics import psnr, ssim
    from .network import model_forward, parse_kv_file
    from .psv import build_psv

    model = _load_model(args.config, args.checkpoint)
    kv = parse_kv_file(args.config)
    train_set, val_set = _load_triplet_dataset(args.data, kv, model.variant)
    sampling = model.variant.depth_sampling()
    rows = []
    for i, t in enumerate(val_set + train_set):
        vol = build_psv(t.images, t.cameras, t.target_camera, sampling)
        pred = model_forward(model, vol)
        rows.append((f"triplet{i:04d}", psnr(pred, t.target_image), ssim(pred, t.target_image)))
    return rows


def cmd_hardwired(args):
    from .imgio import load_image, save_image
    from .psv import build_psv, hardwired_synthesize, sample_depths

    images = [load_image(p) for p in args.inputs]
    h, w = images[0].shape[:2]
    cams = _load_cameras(args.cameras, w, h)
    srcs = [cams[i] for i in args.source_indices] if args.source_indices else cams[:2]
    tgt = _target_camera(args.target_pose, cams, srcs[0])
    sampling = sample_depths(args.planes, args.dmin, args.dmax)
    vol = build_psv(images, srcs, tgt, sampling)
    out, _ = hardwired_synthesize(vol, patch=args.patch)
    os.makedirs(os.path.dirname(os.path.abspath(args.out)), exist_ok=True)
    save_image(args.out, out)
    print(f"wrote {args.out}")
    return 0


def cmd_bench(args):
    from .network import Model, ModelVariant, model_forward
    from .psv import build_psv, sample_depths
    from .training import make_synthetic_dataset

    w, h = (int(v) for v in args.resolution.split("x"))
    trip = make_synthetic_dataset(1, w, h, seed=args.seed, n_views=args.views)[0]
    sampling = sample_depths(args.planes, 1.0, 100.0)
    # steady-state timing: warm-up build, then rewrite the same volume
    vol = build_psv(trip.images, trip.cameras, trip.target_camera, sampling)
    build_times = []
    for _ in range(args.iters):
        t0 = time.perf_counter()
        vol = build_psv(trip.images, trip.cameras, trip.target_camera, sampling, out=vol)
        build_times.append((time.perf_counter() - t0) * 1e3)
    rows = [("psv_build_ms", np.mean(build_times), np.percentile(build_times, 50),
             np.percentile(build_times, 95))]
    fwd_times = []
    if args.forward:
        variant = ModelVariant("bench", args.planes, args.views, True, 1.0, 100.0)
        model = Model(variant, seed=args.seed)
        for _ in range(max(1, args.iters // 2)):
            t0 = time.perf_counter()
            model_forward(model, vol)
            fwd_times.append((time.perf_counter() - t0) * 1e3)
        rows.append(("forward_ms", np.mean(fwd_times), np.percentile(fwd_times, 50),
                     np.percentile(fwd_times, 95)))
    os.makedirs(os.path.dirname(os.path.abspath(args.out)), exist_ok=True)
    with open(args.out, "w", newline="") as fh:
        cw = csv.writer(fh)
        cw.writerow(["metric", "mean_ms", "p50_ms", "p95_ms"])
        for row in rows:
            cw.writerow([row[0]] + [f"{v:.3f}" for v in row[1:]])
    # reference line: published GPU PSV generation time at 540p is 1.5 ms
    print(f"psv build @{args.resolution} N={args.planes} K={args.views}: "
          f"mean {np.mean(build_times):.1f} ms over {args.iters} iters "
          f"(GPU reference 1.5 ms @540p)")
    return 0


def main(argv=None):
    ap = build_parser()
    args = ap.parse_args(argv)
    _apply_threads(args)
    np.random.seed(args.seed)
    handlers = {
        "psv": cmd_psv,
        "synth": cmd_synth,
        "train": cmd_train,
        "eval": cmd_eval,
        "hardwired": cmd_hardwired,
        "bench": cmd_bench,
    }
    try:
        return handlers[args.cmd](args)
    except Exception as e:  # noqa: BLE001 - CLI boundary
        print(f"error: {e}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
