"""Training machinery: losses, Adam, frame samplers, camera-file
ingestion, an analytic synthetic-scene generator, and the training loop.

The perceptual term uses a frozen, seeded random-weight feature pyramid
(conv3x3 + ReLU + 2x2 mean pool per stage) instead of a pretrained
classifier backbone, keeping the artifact dependency-free; only the
absolute loss scale differs, the loss shape and gradients are exercised
identically.
"""

import csv
import os
from dataclasses import dataclass, field

import numpy as np

from . import metrics as metricsmod
from . import psv as psvmod
from .checkpoint import load_arrays, save_arrays
from .geometry import Camera, Intrinsics, RigidPose, nearest_rotation
from .network import psv_net_inputs
from .ops import Conv2d, avg_pool2
from .tensor import (
    NonFiniteGradient,
    ShapeMismatch,
    Tensor,
    add,
    mean_abs_diff,
    mul,
    no_grad,
    relu,
)


class SequenceTooShort(ValueError):
    pass


class MalformedLine(ValueError):
    def __init__(self, line_no, why):
        super().__init__(f"line {line_no}: {why}")
        self.line_no = line_no


class NonOrthonormalRotation(ValueError):
    pass


class NonFiniteLoss(FloatingPointError):
    pass


# -- losses -------------------------------------------------------------


def l1_loss(pred, target):
    """Mean absolute difference, differentiable."""
    return mean_abs_diff(pred, target)


@dataclass
class LossConfig:
    lambda_l1: float = 1.0
    lambda_perc: float = 1.0
    n_layers: int = 5
    layer_weights: tuple = ()

    def __post_init__(self):
        if self.lambda_l1 + self.lambda_perc <= 0:
            raise ValueError("at least one loss weight must be positive")
        if not self.layer_weights:
            self.layer_weights = tuple([1.0 / self.n_layers] * self.n_layers)
        if len(self.layer_weights) != self.n_layers:
            raise ValueError("need one weight per feature layer")
        if any(w < 0 for w in self.layer_weights):
            raise ValueError("layer weights must be nonnegative")


class FeaturePyramid:
    """Frozen seeded conv feature stack used by the perceptual loss.

    Each of the L stages is a 3x3 convolution, ReLU, and 2x2 mean pool;
    the weights are fixed at construction and never trained, so the
    perceptual term only shapes gradients of the images feeding it.
    """

    WIDTHS = (8, 16, 32, 32, 32)

    def __init__(self, n_layers=5, seed=1234):
        rng = np.random.default_rng(np.random.SeedSequence(entropy=seed))
        self.convs = []
        cin = 3
        for i in range(n_layers):
            cout = self.WIDTHS[min(i, len(self.WIDTHS) - 1)]
            conv = Conv2d(cin, cout, 3, padding=1, rng=rng)
            conv.weight.requires_grad = False
            conv.bias.requires_grad = False
            self.convs.append(conv)
            cin = cout

    def features(self, x):
        feats = []
        h = x
        for conv in self.convs:
            h = avg_pool2(relu(conv(h)))
            feats.append(h)
        return feats


def perceptual_loss(pred, target, pyramid, cfg):
    """Weighted, size-normalized L1 distance between feature activations."""
    if pred.shape != target.shape:
        raise ShapeMismatch(f"perceptual_loss: {pred.shape} vs {target.shape}")
    fp = pyramid.features(pred)
    with no_grad():
        ft = pyramid.features(target)
    loss = None
    for w, a, b in zip(cfg.layer_weights, fp, ft):
        term = mul(mean_abs_diff(a, b.detach()), float(w))
        loss = term if loss is None else add(loss, term)
    return loss


def total_loss(pred, target, cfg, pyramid=None):
    """lambda_1 * L1 + lambda_p * perceptual.  Returns (loss Tensor,
    l1 value, perceptual value)."""
    l1 = l1_loss(pred, target)
    l1_val = l1.item()
    if cfg.lambda_perc > 0:
        if pyramid is None:
            raise ValueError("perceptual term enabled but no feature pyramid given")
        perc = perceptual_loss(pred, target, pyramid, cfg)
        perc_val = perc.item()
        loss = add(mul(l1, cfg.lambda_l1), mul(perc, cfg.lambda_perc))
    else:
        perc_val = 0.0
        loss = mul(l1, cfg.lambda_l1)
    return loss, l1_val, perc_val


# -- optimizer ------------------------------------------------------------


class Adam:
    """Adam with bias correction; moments are stored per parameter."""

    def __init__(self, params, lr=1e-4, beta1=0.4, beta2=0.9, eps=1e-8):
        self.params = list(params)
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.t = 0
        self.m = [np.zeros_like(p.data) for p in self.params]
        self.v = [np.zeros_like(p.data) for p in self.params]

    def step(self):
        self.t += 1
        b1, b2 = self.beta1, self.beta2
        c1 = 1.0 - b1 ** self.t
        c2 = 1.0 - b2 ** self.t
        for i, p in enumerate(self.params):
            g = p.grad
            if g is None:
                continue
            if not np.all(np.isfinite(g)):
                raise NonFiniteGradient(f"parameter {i} has non-finite gradient")
            m = self.m[i]
            v = self.v[i]
            m += (1.0 - b1) * (g - m)
            v += (1.0 - b2) * (g * g - v)
            p.data -= (self.lr / c1) * m / (np.sqrt(v / c2) + self.eps)
            p.grad = None

    def state_arrays(self, names):
        out = {}
        for name, m, v in zip(names, self.m, self.v):
            out[f"opt.m.{name}"] = m
            out[f"opt.v.{name}"] = v
        out["opt.step"] = np.array([self.t], dtype=np.float32)
        return out

    def load_state(self, arrays, names):
        for i, name in enumerate(names):
            self.m[i] = np.ascontiguousarray(arrays[f"opt.m.{name}"], dtype=np.float32)
            self.v[i] = np.ascontiguousarray(arrays[f"opt.v.{name}"], dtype=np.float32)
        self.t = int(arrays["opt.step"][0])


def adam_step(state, grads=None):
    """Apply one update; thin alias so the optimizer is callable in the
    functional style as well."""
    state.step()
    return state.params


# -- triplet sampling -----------------------------------------------------


@dataclass
class TrainingTriplet:
    images: list  # K source images (H, W, 3) float32
    cameras: list  # K source Cameras
    target_image: np.ndarray
    target_camera: Camera
    mode: str = "interp"
    indices: tuple = ()


def sample_interp_triplet(seq_len, rng):
    """Pick target, source before at dt1, source after at dt2, with
    dt1, dt2 uniform integers in [4, 13]."""
    pairs = [
        (d1, d2) for d1 in range(4, 14) for d2 in range(4, 14) if d1 + d2 + 1 <= seq_len
    ]
    if not pairs:
        raise SequenceTooShort(f"{seq_len} frames cannot host an interpolation triplet")
    d1, d2 = pairs[rng.integers(len(pairs))]
    t = int(rng.integers(d1, seq_len - d2))
    return t - d1, t + d2, t, "interp"


def sample_extrap_triplet(seq_len, rng):
    """Inputs d1 in [3, 5] apart, target d2 in [5, 7] frames after the
    first input, outside the pair."""
    pairs = [(d1, d2) for d1 in range(3, 6) for d2 in range(5, 8) if d2 + 1 <= seq_len]
    if not pairs:
        raise SequenceTooShort(f"{seq_len} frames cannot host an extrapolation triplet")
    d1, d2 = pairs[rng.integers(len(pairs))]
    s = int(rng.integers(0, seq_len - d2))
    return s, s + d1, s + d2, "extrap"


def sample_triplet_indices(seq_len, rng, extrap_ratio=0.8):
    """Extrapolation/interpolation mixing at the given ratio."""
    if rng.random() < extrap_ratio:
        return sample_extrap_triplet(seq_len, rng)
    return sample_interp_triplet(seq_len, rng)


# -- camera trajectory files ----------------------------------------------


def parse_realestate_cameras(path_or_text, width, height):
    """Parse a camera trajectory file.

    Line 1 is the source video URL; every following line holds 19
    numeric fields: timestamp_us, fx fy cx cy (normalized), k1 k2, and a
    row-major 3x4 world-to-camera [R|t].  Intrinsics are scaled by the
    caller-supplied pixel size.  Returns (url, [(timestamp, Camera)]).
    """
    if isinstance(path_or_text, (str, os.PathLike)) and os.path.exists(path_or_text):
        with open(path_or_text) as fh:
            text = fh.read()
    else:
        text = path_or_text if isinstance(path_or_text, str) else path_or_text.read()
    lines = text.splitlines()
    if not lines:
        raise MalformedLine(1, "empty camera file")
    url = lines[0].strip()
    out = []
    for idx, raw in enumerate(lines[1:], start=2):
        if not raw.strip():
            continue
        fields = raw.split()
        if len(fields) != 19:
            raise MalformedLine(idx, f"expected 19 numeric fields, got {len(fields)}")
        try:
            vals = [float(f) for f in fields]
        except ValueError as e:
            raise MalformedLine(idx, str(e)) from e
        ts = int(vals[0])
        fx, fy, cx, cy = vals[1:5]
        pose = np.array(vals[7:19], dtype=np.float64).reshape(3, 4)
        r = pose[:, :3]
        err = np.max(np.abs(r @ r.T - np.eye(3)))
        if err > 1e-3:
            raise NonOrthonormalRotation(f"line {idx}: rotation off by {err:.2e}")
        if err > 1e-9:
            r = nearest_rotation(r)
        cam = Camera(
            intrinsics=Intrinsics(
                fx=fx * width, fy=fy * height, cx=cx * width, cy=cy * height,
                width=width, height=height,
            ),
            pose=RigidPose(r, pose[:, 3]),
        )
        out.append((ts, cam))
    return url, out


def write_realestate_cameras(path, url, items, width, height):
    """Serialize cameras back to the trajectory text format."""
    rows = [url]
    for ts, cam in items:
        i = cam.intrinsics
        vals = [i.fx / width, i.fy / height, i.cx / width, i.cy / height, 0.0, 0.0]
        vals += list(cam.pose.rotation[0]) + [cam.pose.translation[0]]
        vals += list(cam.pose.rotation[1]) + [cam.pose.translation[1]]
        vals += list(cam.pose.rotation[2]) + [cam.pose.translation[2]]
        rows.append(" ".join([str(int(ts))] + [repr(float(v)) for v in vals]))
    text = "\n".join(rows) + "\n"
    if path is None:
        return text
    with open(path, "w") as fh:
        fh.write(text)
    return text


# -- synthetic scenes -------------------------------------------------------


@dataclass(frozen=True)
class ScenePlane:
    depth: float  # world z of the fronto-parallel rectangle
    x0: float
    x1: float
    y0: float
    y1: float
    seed: int
    base_color: tuple = (0.5, 0.5, 0.5)
    noise_cells: int = 24
    noise_amp: float = 0.35


@dataclass(frozen=True)
class SyntheticScene:
    planes: tuple  # ScenePlane, any order; z-buffer resolves overlap

    @staticmethod
    def random(rng, n_planes=2, d_range=(1.2, 8.0), extent=3.0):
        planes = []
        lo, hi = d_range
        depths = np.sort(rng.uniform(lo, hi, size=n_planes))[::-1]
        for i, d in enumerate(depths):
            half = extent * d * 0.5 if i == 0 else extent * d * rng.uniform(0.15, 0.35)
            cx = 0.0 if i == 0 else rng.uniform(-0.5, 0.5) * d
            cy = 0.0 if i == 0 else rng.uniform(-0.3, 0.3) * d
            planes.append(
                ScenePlane(
                    depth=float(d),
                    x0=cx - half, x1=cx + half, y0=cy - half, y1=cy + half,
                    seed=int(rng.integers(1 << 31)),
                    base_color=tuple(rng.uniform(0.3, 0.7, size=3)),
                )
            )
        return SyntheticScene(planes=tuple(planes))


def _plane_texture_grid(plane):
    rng = np.random.default_rng(np.random.SeedSequence(entropy=plane.seed))
    n = plane.noise_cells
    coarse = rng.standard_normal((n // 3 + 2, n // 3 + 2, 3))
    fine = rng.standard_normal((n + 1, n + 1, 3))
    return coarse, fine


def _smooth_grid_sample(grid, u, v):
    """Value-noise lookup with smoothstep-eased cell interpolation; the
    C1 continuity keeps cross-view resampling error well below 1e-3."""
    gh, gw = grid.shape[:2]
    x = np.clip(u * (gw - 1), 0, gw - 1)
    y = np.clip(v * (gh - 1), 0, gh - 1)
    x0 = np.minimum(x.astype(np.int64), gw - 2)
    y0 = np.minimum(y.astype(np.int64), gh - 2)
    fx = (x - x0)[..., None]
    fy = (y - y0)[..., None]
    fx = fx * fx * (3.0 - 2.0 * fx)
    fy = fy * fy * (3.0 - 2.0 * fy)
    c00 = grid[y0, x0]
    c01 = grid[y0, x0 + 1]
    c10 = grid[y0 + 1, x0]
    c11 = grid[y0 + 1, x0 + 1]
    return (c00 * (1 - fx) + c01 * fx) * (1 - fy) + (c10 * (1 - fx) + c11 * fx) * fy


def _plane_color(plane, px, py):
    """Procedural texture sampled in normalized rectangle coordinates so
    every camera sees the same surface pattern."""
    u = (px - plane.x0) / (plane.x1 - plane.x0)
    v = (py - plane.y0) / (plane.y1 - plane.y0)
    coarse, fine = _plane_texture_grid(plane)
    val = 0.7 * _smooth_grid_sample(coarse, u, v) + 0.3 * _smooth_grid_sample(fine, u, v)
    color = np.asarray(plane.base_color) + plane.noise_amp * val
    return np.clip(color, 0.02, 0.98)


def render_synthetic(scene, cam):
    """Z-buffered pinhole render.  Returns (image (H, W, 3) float32 in
    [0, 1], depth (H, W) float32 camera-frame z, +inf where empty)."""
    h, w = cam.height, cam.width
    intr = cam.intrinsics
    us, vs = np.meshgrid(np.arange(w, dtype=np.float64), np.arange(h, dtype=np.float64))
    rays_cam = np.stack(
        [(us - intr.cx) / intr.fx, (vs - intr.cy) / intr.fy, np.ones_like(us)], axis=-1
    )
    rot = cam.pose.rotation
    center = cam.pose.center
    rays_world = rays_cam @ rot  # R^T applied row-wise
    img = np.zeros((h, w, 3), dtype=np.float64)
    zbuf = np.full((h, w), np.inf, dtype=np.float64)
    for plane in scene.planes:
        dz = rays_world[..., 2]
        with np.errstate(divide="ignore", invalid="ignore"):
            t = (plane.depth - center[2]) / dz
        px = center[0] + t * rays_world[..., 0]
        py = center[1] + t * rays_world[..., 1]
        zcam = t * 1.0  # rays_cam z == 1, so camera depth equals t
        hit = (
            np.isfinite(t)
            & (t > 1e-6)
            & (px >= plane.x0)
            & (px <= plane.x1)
            & (py >= plane.y0)
            & (py <= plane.y1)
            & (zcam < zbuf)
        )
        if not hit.any():
            continue
        color = _plane_color(plane, px[hit], py[hit])
        img[hit] = color
        zbuf[hit] = zcam[hit]
    return img.astype(np.float32), zbuf.astype(np.float32)


def _look_offset_pose(position, yaw=0.0, pitch=0.0):
    """World-to-camera pose for a camera at ``position`` looking roughly
    down +z with small yaw/pitch angles (radians)."""
    cy_, sy = np.cos(yaw), np.sin(yaw)
    cp, sp = np.cos(pitch), np.sin(pitch)
    ry = np.array([[cy_, 0, sy], [0, 1, 0], [-sy, 0, cy_]])
    rx = np.array([[1, 0, 0], [0, cp, -sp], [0, sp, cp]])
    r_cam_to_world = ry @ rx
    r = r_cam_to_world.T
    return RigidPose(r, -r @ np.asarray(position, dtype=np.float64))


def make_camera(width, height, position, yaw=0.0, pitch=0.0, f_scale=0.9):
    intr = Intrinsics(
        fx=f_scale * width, fy=f_scale * width,
        cx=(width - 1) / 2.0, cy=(height - 1) / 2.0,
        width=width, height=height,
    )
    return Camera(intrinsics=intr, pose=_look_offset_pose(position, yaw, pitch))


def make_synthetic_dataset(
    n_triplets,
    width,
    height,
    seed=0,
    n_views=2,
    baseline=0.10,
    d_range=(1.3, 7.0),
    scene_planes=2,
):
    """Desk-scale supervised dataset: interpolation-style triplets of an
    analytic scene rendered from a small stereo-like rig."""
    rng = np.random.default_rng(np.random.SeedSequence(entropy=seed))
    triplets = []
    for _ in range(n_triplets):
        scene = SyntheticScene.random(rng, n_planes=scene_planes, d_range=d_range)
        jitter = lambda s: rng.uniform(-s, s)
        y0 = jitter(0.02)
        cams = []
        if n_views == 2:
            xs = (-baseline / 2, baseline / 2)
        else:
            xs = (-baseline / 2, baseline / 2, baseline)
        for x in xs:
            cams.append(
                make_camera(width, height, (x, y0 + jitter(0.01), jitter(0.01)),
                            yaw=jitter(0.01), pitch=jitter(0.01))
            )
        alpha = rng.uniform(0.25, 0.75)
        tx = (1 - alpha) * xs[0] + alpha * xs[1]
        tgt = make_camera(width, height, (tx, y0 + jitter(0.01), jitter(0.01)),
                          yaw=jitter(0.01), pitch=jitter(0.01))
        images = [render_synthetic(scene, c)[0] for c in cams]
        timg, _ = render_synthetic(scene, tgt)
        triplets.append(
            TrainingTriplet(
                images=images, cameras=cams, target_image=timg, target_camera=tgt,
                mode="interp",
            )
        )
    return triplets


# -- training loop -----------------------------------------------------------


@dataclass
class TrainConfig:
    lr: float = 1e-4
    beta1: float = 0.4
    beta2: float = 0.9
    eps: float = 1e-8
    batch_size: int = 2
    max_steps: int = 1000
    seed: int = 0
    loss: LossConfig = field(default_factory=LossConfig)
    val_interval: int = 100
    patience: int = 0  # validations without improvement before stop; 0 = off
    target_train_psnr: float = 0.0  # stop once train PSNR exceeds; 0 = off
    train_eval_interval: int = 100
    dataset_fraction: float = 1.0
    perc_seed: int = 1234


@dataclass
class TrainResult:
    trace: list
    steps_run: int
    stop_reason: str
    best_val_psnr: float
    final_train_psnr: float


def _psv_cache_entry(triplet, sampling):
    vol = psvmod.build_psv(
        triplet.images, triplet.cameras, triplet.target_camera, sampling
    )
    pm, gray = psv_net_inputs(vol)
    target = psvmod.normalize_for_net(triplet.target_image.transpose(2, 0, 1)[None])
    return pm, gray, target


def _batch_rng(seed, step):
    return np.random.default_rng(np.random.SeedSequence(entropy=seed, spawn_key=(step,)))


def train_loop(model, train_triplets, val_triplets, cfg, trace_path=None, resume_from=None):
    """End-to-end optimization: build PSVs, forward, loss, backward, Adam.

    The per-step batch is a pure function of (seed, step), so training
    is replayable and resumable to bit-identical losses.
    """
    variant = model.variant
    sampling = variant.depth_sampling()
    n_used = max(1, int(round(len(train_triplets) * cfg.dataset_fraction)))
    used = train_triplets[:n_used]
    cache = [_psv_cache_entry(t, sampling) for t in used]
    val_cache = [(t, _psv_cache_entry(t, sampling)) for t in val_triplets]
    pyramid = FeaturePyramid(cfg.loss.n_layers, seed=cfg.perc_seed) if cfg.loss.lambda_perc > 0 else None

    names = [n for n, _ in model.named_params()]
    adam = Adam(model.params(), lr=cfg.lr, beta1=cfg.beta1, beta2=cfg.beta2, eps=cfg.eps)
    start_step = 0
    if resume_from:
        arrays = load_arrays(resume_from)
        model.load_state(arrays)
        adam.load_state(arrays, names)
        start_step = adam.t

    trace = []
    best_val = -np.inf
    bad_vals = 0
    final_train_psnr = 0.0
    stop_reason = "max_steps"

    def eval_psnr(entries):
        vals_psnr, vals_ssim, vals_l1 = [], [], []
        with no_grad():
            for pm, gray, target in entries:
                out = model.forward(Tensor(pm), Tensor(gray), training=False)
                pred = psvmod.denormalize(out.data)
                truth = psvmod.denormalize(target)
                vals_psnr.append(metricsmod.psnr(pred, truth))
                vals_ssim.append(metricsmod.ssim(pred[0].transpose(1, 2, 0), truth[0].transpose(1, 2, 0)))
                vals_l1.append(float(np.abs(pred - truth).mean()))
        return float(np.mean(vals_psnr)), float(np.mean(vals_ssim)), float(np.mean(vals_l1))

    step = start_step
    for step in range(start_step + 1, cfg.max_steps + 1):
        rng = _batch_rng(cfg.seed, step)
        idx = rng.choice(len(cache), size=cfg.batch_size, replace=len(cache) < cfg.batch_size)
        pm = np.concatenate([cache[i][0] for i in idx], axis=0)
        gray = np.concatenate([cache[i][1] for i in idx], axis=0)
        target = np.concatenate([cache[i][2] for i in idx], axis=0)

        out = model.forward(Tensor(pm), Tensor(gray), training=True)
        loss, l1_val, perc_val = total_loss(out, Tensor(target), cfg.loss, pyramid)
        total_val = loss.item()
        if not np.isfinite(total_val):
            raise NonFiniteLoss(
                f"step {step}: total={total_val} l1={l1_val} perceptual={perc_val}"
            )
        loss.backward()
        adam.step()

        row = {"step": step, "l1": l1_val, "perceptual": perc_val, "total": total_val,
               "val_psnr": "", "val_ssim": ""}

        if val_cache and cfg.val_interval and step % cfg.val_interval == 0:
            vp, vs, _ = eval_psnr([e for _, e in val_cache])
            row["val_psnr"] = vp
            row["val_ssim"] = vs
            if vp > best_val + 1e-9:
                best_val = vp
                bad_vals = 0
            else:
                bad_vals += 1
                if cfg.patience and bad_vals >= cfg.patience:
                    trace.append(row)
                    stop_reason = "early_stop"
                    break
        trace.append(row)

        if cfg.target_train_psnr and step % cfg.train_eval_interval == 0:
            tp, _, _ = eval_psnr(cache)
            final_train_psnr = tp
            if tp > cfg.target_train_psnr:
                stop_reason = "target_psnr"
                break

    if trace_path:
        write_trace(trace_path, trace)
    return TrainResult(
        trace=trace,
        steps_run=step,
        stop_reason=stop_reason,
        best_val_psnr=best_val,
        final_train_psnr=final_train_psnr,
    ), adam


def write_trace(path, trace):
    with open(path, "w", newline="") as fh:
        writer = csv.DictWriter(
            fh, fieldnames=["step", "l1", "perceptual", "total", "val_psnr", "val_ssim"]
        )
        writer.writeheader()
        for row in trace:
            writer.writerow(row)


def save_training_state(path, model, adam):
    arrays = model.state_arrays()
    arrays.update(adam.state_arrays([n for n, _ in model.named_params()]))
    save_arrays(path, arrays)


# -- dataset directory layout -------------------------------------------------


def load_sequence_dir(seq_dir, width, height):
    """A sequence directory holds cameras.txt plus frames/%06d.png."""
    from .imgio import load_image

    url, cams = parse_realestate_cameras(os.path.join(seq_dir, "cameras.txt"), width, height)
    frames = []
    for i in range(len(cams)):
        frames.append(load_image(os.path.join(seq_dir, "frames", f"{i:06d}.png")))
    return url, cams, frames
