"""End-to-end orchestration: configuration, training loops, dubbing and
evaluation over synthetic-dataset directories.

Run-directory layout produced here:
  train:  <out>/stage1.npz | stage2.npz, <out>/stage{1,2}_loss.txt
  dub:    <out>/frames/%05d.png, <out>/landmarks.npz, <out>/manifest.json,
          optional <out>/pncc/%05d.npz (geometry dumps for invariant checks)
  eval:   <out>/eval/report.txt plus per-metric trace files
"""

from __future__ import annotations

import dataclasses
import hashlib
import json
import os

import numpy as np
import torch

from . import refselect
from .audio_style import cached_audio_features, read_wav_mono16k
from .checkpoints import load_checkpoint, restore_module, restore_optimizer, \
    rng_from_state, save_checkpoint
from .errors import DataError, NumericsError, UsageError
from .eval_metrics import EXTERNAL_METRIC_NAMES, EvalReport, MetricEntry, \
    external_metric_adapter, has_metric_adapter, lmd, psnr, ssim, style_sim
from .geometry_fit import CoeffTimeline, FitOptions, init_coeffs, load_landmarks, \
    load_timeline, optimize_coeffs, save_landmarks, save_timeline, LandmarkTrack
from .geometry_gen import Stage1Model, build_target_geometry, merge_lower_upper, \
    stage1_loss
from .morphable_model import MorphableModel, load_model, make_toy_model, \
    pose_and_project, render_pncc_with_coverage, save_model, synthesize_vertices
from .renderer import FaceRenderer, lip_mask, stage2_loss
from .synth_data import load_dataset_meta, load_speaker_frames, png_to_frame, \
    frame_to_png

PIPELINE_VERSION = "0.1.0"
MANIFEST_FORMAT_VERSION = 1


# ---------------------------------------------------------------------------
# configuration


@dataclasses.dataclass
class PipelineConfig:
    """Flat pipeline configuration. Serialized as `key = value` text; every
    key is documented by its field here and unknown keys are rejected."""

    dim: int = 128                # audio/style feature width D
    channels: int = 64            # renderer latent channels C
    n_alpha: int = 8
    n_beta: int = 8
    n_vertices: int = 200         # toy face vertex count L (rows x 10 grid)
    image_h: int = 256
    image_w: int = 256
    fps: float = 25.0
    n_face_train: int = 5
    n_lip_train: int = 5
    n_face_infer: int = 5
    n_lip_infer: int = 25
    fit_iters: int = 200
    fit_step: float = 1e-2
    fit_lambda: float = 0.2
    fit_w_reg: float = 1e-3
    stage1_epochs: int = 200
    stage1_lr: float = 1e-3
    stage2_epochs: int = 300
    stage2_lr: float = 1e-3
    stage2_batch: int = 8
    stage2_target_psnr: float = 0.0   # > 0 enables early stop on train PSNR
    stage2_eval_every: int = 10
    n_self: int = 4
    conv_width: int = 64
    seed: int = 0
    precision: str = "float32"    # float32 | float64 (fixed-precision mode)

    def __post_init__(self):
        if self.precision not in ("float32", "float64"):
            raise UsageError(f"precision must be float32 or float64, "
                             f"got {self.precision!r}")
        if self.image_h % 4 or self.image_w % 4:
            raise UsageError("image sides must be divisible by 4")

    @staticmethod
    def toy() -> "PipelineConfig":
        return PipelineConfig(channels=32, image_h=64, image_w=64)

    def torch_dtype(self):
        return torch.float64 if self.precision == "float64" else torch.float32

    def fit_options(self) -> FitOptions:
        return FitOptions(iters=self.fit_iters, step=self.fit_step,
                          lam=self.fit_lambda, w_reg=self.fit_w_reg)

    def serialize(self) -> str:
        lines = ["# visualdub config v1"]
        for field in dataclasses.fields(self):
            lines.append(f"{field.name} = {getattr(self, field.name)!r}")
        return "\n".join(lines) + "\n"

    def save(self, path):
        with open(path, "w") as fh:
            fh.write(self.serialize())


def parse_config(text: str) -> PipelineConfig:
    """Parse flat `key = value` config text. Unknown keys are errors."""
    fields = {f.name: f.type for f in dataclasses.fields(PipelineConfig)}
    values = {}
    for lineno, line in enumerate(text.splitlines(), start=1):
        stripped = line.strip()
        if not stripped or stripped.startswith("#"):
            continue
        if "=" not in stripped:
            raise UsageError(f"config line {lineno}: expected 'key = value'")
        key, _, raw = stripped.partition("=")
        key = key.strip()
        raw = raw.strip()
        if key not in fields:
            raise UsageError(f"config line {lineno}: unknown key {key!r}")
        kind = fields[key]
        try:
            if kind in ("int", int):
                values[key] = int(raw)
            elif kind in ("float", float):
                values[key] = float(raw)
            else:
                values[key] = raw.strip("'\"")
        except ValueError as exc:
            raise UsageError(f"config line {lineno}: bad value for {key}: {exc}") \
                from exc
    return PipelineConfig(**values)


def load_config(path) -> PipelineConfig:
    try:
        with open(path) as fh:
            return parse_config(fh.read())
    except OSError as exc:
        raise DataError(f"cannot read config {path}: {exc}") from exc


def toy_model_from_config(config: PipelineConfig) -> MorphableModel:
    if config.n_vertices % 10:
        raise UsageError("n_vertices must be a multiple of 10 (rows x 10 grid)")
    return make_toy_model(seed=config.seed, n_rows=config.n_vertices // 10,
                          n_cols=10, n_alpha=config.n_alpha, n_beta=config.n_beta)


def _apply_precision(config: PipelineConfig):
    # fixed-precision mode: float64 plus a single compute thread, so repeated
    # and resumed runs reduce in exactly the same order
    if config.precision == "float64":
        torch.set_num_threads(1)


def file_digest(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


# ---------------------------------------------------------------------------
# dataset access helpers


def _speaker_paths(speaker_dir):
    paths = {
        "audio": os.path.join(speaker_dir, "audio.wav"),
        "coeffs": os.path.join(speaker_dir, "coeffs.npz"),
        "landmarks": os.path.join(speaker_dir, "landmarks.npz"),
        "frames": os.path.join(speaker_dir, "frames"),
    }
    return paths


def find_model_file(directory):
    """model.npz in the directory or its parent (dataset root)."""
    for cand in (os.path.join(directory, "model.npz"),
                 os.path.join(os.path.dirname(os.path.normpath(directory)),
                              "model.npz")):
        if os.path.exists(cand):
            return cand
    raise DataError(f"no model.npz found beside {directory}")


def dataset_speaker_dirs(dataset_dir):
    meta = load_dataset_meta(dataset_dir)
    return [os.path.join(dataset_dir, name) for name in meta["speakers"]], meta


def _gt_vertex_seq(model: MorphableModel, timeline: CoeffTimeline) -> np.ndarray:
    """(T, L, 3) canonical expression vertices of a timeline (no pose)."""
    flat = (model.mean_shape[None]
            + timeline.alpha @ model.shape_basis.T
            + timeline.beta @ model.expr_basis.T)
    return flat.reshape(len(timeline), model.n_vertices, 3)


# ---------------------------------------------------------------------------
# stage 1 training


def train_stage1(config: PipelineConfig, dataset_dir, out_dir, resume=None):
    """Train the audio-to-geometry path on every speaker of a dataset.

    Returns a summary dict with the checkpoint path and the loss trace.
    """
    _apply_precision(config)
    os.makedirs(out_dir, exist_ok=True)
    speaker_dirs, meta = dataset_speaker_dirs(dataset_dir)
    model = load_model(find_model_file(dataset_dir))
    dtype = config.torch_dtype()

    speakers = []
    for sdir in speaker_dirs:
        paths = _speaker_paths(sdir)
        timeline = load_timeline(paths["coeffs"])
        waveform = read_wav_mono16k(paths["audio"])
        gt = torch.as_tensor(_gt_vertex_seq(model, timeline), dtype=dtype)
        speakers.append({
            "timeline": timeline,
            "waveform": waveform,
            "gt": gt,
            "mean_alpha": timeline.mean_alpha,
        })

    torch.manual_seed(config.seed)
    net = Stage1Model(config.dim, model.n_vertices, config.n_self,
                      config.conv_width).to(dtype)
    optimizer = torch.optim.Adam(net.parameters(), lr=config.stage1_lr)
    rng = np.random.default_rng(config.seed + 1)
    start_epoch = 0
    trace = []
    if resume is not None:
        ckpt_meta, params, opt_arrays = load_checkpoint(resume)
        if ckpt_meta["stage"] != "stage1":
            raise DataError(f"{resume} is not a stage-1 checkpoint")
        restore_module(net, params)
        restore_optimizer(optimizer, opt_arrays, ckpt_meta["opt_scalars"])
        rng = rng_from_state(ckpt_meta["rng_state"])
        start_epoch = ckpt_meta["epoch"]
        trace = list(ckpt_meta["extra"].get("loss_trace", []))

    for epoch in range(start_epoch, config.stage1_epochs):
        order = rng.permutation(len(speakers))
        epoch_losses = []
        for sp_idx in order:
            sp = speakers[sp_idx]
            optimizer.zero_grad()
            pred = net.geometry_from_audio(
                sp["waveform"], model, sp["mean_alpha"],
                sp["timeline"].beta, fps=config.fps)
            gt = sp["gt"]
            if pred.shape[0] != gt.shape[0]:
                raise DataError(
                    f"audio/frame count mismatch: {pred.shape[0]} feature rows "
                    f"vs {gt.shape[0]} frames")
            loss = stage1_loss(pred, gt, model)
            value = float(loss.item())
            if not np.isfinite(value):
                raise NumericsError(f"non-finite stage-1 loss at epoch {epoch}")
            loss.backward()
            optimizer.step()
            epoch_losses.append(value)
        trace.append(float(np.mean(epoch_losses)))

    ckpt_path = os.path.join(out_dir, "stage1.npz")
    save_checkpoint(
        ckpt_path, net, {**net.config(), "fps": config.fps}, stage="stage1",
        epoch=config.stage1_epochs, optimizer=optimizer, rng=rng,
        extra={"loss_trace": trace})
    with open(os.path.join(out_dir, "stage1_loss.txt"), "w") as fh:
        for epoch, value in enumerate(trace):
            fh.write(f"{epoch} {value!r}\n")
    return {"checkpoint": ckpt_path, "loss_trace": trace}


# ---------------------------------------------------------------------------
# stage 2 training


def _precompute_speaker_render_data(model, sdir, config, h, w):
    paths = _speaker_paths(sdir)
    timeline = load_timeline(paths["coeffs"])
    frames = load_speaker_frames(sdir, expected=len(timeline))
    if frames.shape[2] != h or frames.shape[3] != w:
        raise DataError(f"{sdir}: frames are {frames.shape[2]}x{frames.shape[3]}, "
                        f"config wants {h}x{w}")
    verts_seq = _gt_vertex_seq(model, timeline)
    poses = [timeline.pose(t) for t in range(len(timeline))]
    pncc = build_target_geometry(verts_seq, poses, model, h, w)
    masks = np.stack([lip_mask(p, model) for p in pncc])
    return {"timeline": timeline, "frames": frames, "pncc": pncc, "masks": masks}


def train_stage2(config: PipelineConfig, dataset_dir, out_dir, resume=None):
    """Teacher-mode renderer training: geometry images come from the dataset's
    own coefficients, never from stage-1 weights."""
    _apply_precision(config)
    os.makedirs(out_dir, exist_ok=True)
    h, w = config.image_h, config.image_w
    speaker_dirs, _ = dataset_speaker_dirs(dataset_dir)
    model = load_model(find_model_file(dataset_dir))
    dtype = config.torch_dtype()
    speakers = [_precompute_speaker_render_data(model, sdir, config, h, w)
                for sdir in speaker_dirs]

    torch.manual_seed(config.seed + 2)
    net = FaceRenderer(config.channels, h, w).to(dtype)
    optimizer = torch.optim.Adam(net.parameters(), lr=config.stage2_lr)
    rng = np.random.default_rng(config.seed + 3)
    start_epoch = 0
    trace = []
    if resume is not None:
        ckpt_meta, params, opt_arrays = load_checkpoint(resume)
        if ckpt_meta["stage"] != "stage2":
            raise DataError(f"{resume} is not a stage-2 checkpoint")
        restore_module(net, params)
        restore_optimizer(optimizer, opt_arrays, ckpt_meta["opt_scalars"])
        rng = rng_from_state(ckpt_meta["rng_state"])
        start_epoch = ckpt_meta["epoch"]
        trace = [tuple(v) for v in ckpt_meta["extra"].get("loss_trace", [])]

    def tensors_for(sp, idx_list):
        return (torch.as_tensor(sp["pncc"][idx_list], dtype=dtype),
                torch.as_tensor(sp["frames"][idx_list], dtype=dtype))

    def train_psnr():
        values = []
        with torch.no_grad():
            for sp in speakers:
                t_total = len(sp["timeline"])
                for i in range(t_total):
                    refset = refselect.ReferenceSet(
                        tuple(refselect.inference_face_indices(
                            i + 1, t_total, config.n_face_train)),
                        tuple(range(1, min(config.n_lip_train, t_total) + 1)))
                    pred = _render_one(net, model, sp, i, refset, dtype)
                    values.append(psnr(pred.numpy(), sp["frames"][i]))
        return float(np.mean(values))

    def _render_one(net, model, sp, i, refset, dtype):
        face_idx = [j - 1 for j in refset.face_indices]
        lip_idx = [j - 1 for j in refset.lip_indices]
        face_pncc, face_frames = tensors_for(sp, face_idx)
        lip_pncc, lip_frames = tensors_for(sp, lip_idx)
        return net.render_frame(model, torch.as_tensor(sp["pncc"][i], dtype=dtype),
                                face_pncc, face_frames, lip_pncc, lip_frames)

    stopped_early = False
    epoch = start_epoch
    for epoch in range(start_epoch, config.stage2_epochs):
        epoch_losses = []
        for sp in speakers:
            t_total = len(sp["timeline"])
            order = rng.permutation(t_total)
            for b0 in range(0, t_total, max(config.stage2_batch, 1)):
                batch = order[b0:b0 + max(config.stage2_batch, 1)]
                optimizer.zero_grad()
                losses = []
                for i in batch:
                    refset = refselect.training_strategy(
                        int(i) + 1, t_total, config.n_face_train,
                        config.n_lip_train, rng)
                    pred = _render_one(net, model, sp, int(i), refset, dtype)
                    gt = torch.as_tensor(sp["frames"][int(i)], dtype=dtype)
                    losses.append(stage2_loss(pred, gt))
                loss = torch.stack(losses).mean()
                value = float(loss.item())
                if not np.isfinite(value):
                    raise NumericsError(f"non-finite stage-2 loss at epoch {epoch}")
                loss.backward()
                optimizer.step()
                epoch_losses.append(value)
        mean_loss = float(np.mean(epoch_losses))
        entry = [epoch, mean_loss, float("nan")]
        if config.stage2_target_psnr > 0 and \
                (epoch + 1) % max(config.stage2_eval_every, 1) == 0:
            current = train_psnr()
            entry[2] = current
            if current >= config.stage2_target_psnr:
                trace.append(tuple(entry))
                stopped_early = True
                break
        trace.append(tuple(entry))
    final_epoch = epoch + 1 if (stopped_early or config.stage2_epochs > start_epoch) \
        else start_epoch

    ckpt_path = os.path.join(out_dir, "stage2.npz")
    save_checkpoint(
        ckpt_path, net, net.config(), stage="stage2", epoch=final_epoch,
        optimizer=optimizer, rng=rng,
        extra={"loss_trace": [list(v) for v in trace],
               "stopped_early": stopped_early})
    with open(os.path.join(out_dir, "stage2_loss.txt"), "w") as fh:
        for ep, value, ps in trace:
            fh.write(f"{ep} {value!r} {ps!r}\n")
    return {"checkpoint": ckpt_path, "loss_trace": trace,
            "stopped_early": stopped_early}


# ---------------------------------------------------------------------------
# geometry fitting entry


def fit_geometry(config: PipelineConfig, speaker_dir, out_path, init_from="heuristic"):
    """Fit a coefficient timeline to a speaker's landmark track.

    init_from: 'heuristic' (similarity alignment) or a coefficient file path.
    Writes the fitted timeline and a loss trace next to it."""
    _apply_precision(config)
    model = load_model(find_model_file(speaker_dir))
    paths = _speaker_paths(speaker_dir)
    if not os.path.exists(paths["landmarks"]):
        raise DataError(f"{speaker_dir} has no landmarks.npz")
    track = load_landmarks(paths["landmarks"])
    if init_from == "heuristic":
        init = init_coeffs(track, model, fps=config.fps)
    else:
        init = init_coeffs(init_from, fps=config.fps)
    fitted, trace = optimize_coeffs(init, track, model, config.fit_options())
    save_timeline(out_path, fitted)
    trace_path = os.path.splitext(out_path)[0] + "_trace.txt"
    with open(trace_path, "w") as fh:
        for it, value in enumerate(trace):
            fh.write(f"{it} {value!r}\n")
    return fitted, trace


# ---------------------------------------------------------------------------
# dubbing


def pingpong_index(t: int, t_ref: int) -> int:
    """0-based ping-pong looping of reference frames."""
    if t_ref == 1:
        return 0
    period = 2 * (t_ref - 1)
    m = t % period
    return m if m < t_ref else period - m


def select_refs(frame_index: int, timeline: CoeffTimeline, model: MorphableModel,
                mode: str = "inference", config: PipelineConfig = None, seed=0):
    """Reference selection for one 1-based frame of a timeline."""
    config = config or PipelineConfig.toy()
    t_total = len(timeline)
    if mode == "training":
        return refselect.training_strategy(frame_index, t_total,
                                           config.n_face_train,
                                           config.n_lip_train, seed)
    if mode != "inference":
        raise UsageError(f"unknown selection mode {mode!r}")
    canon = _gt_vertex_seq(model, timeline)
    return refselect.inference_strategy(frame_index, canon, model,
                                        config.n_face_infer, config.n_lip_infer)


def dub(config: PipelineConfig, reference_dir, audio_path, stage1_ckpt,
        stage2_ckpt, out_dir, fit: bool = False, dump_pncc: bool = False):
    """Render the reference speaker mouthing the target audio.

    reference_dir: a speaker directory (frames/, coeffs.npz or landmarks.npz,
    audio.wav). The reference is ping-pong looped when the audio is longer
    than the clip and truncated when it is shorter. Returns the manifest dict.
    """
    _apply_precision(config)
    os.makedirs(os.path.join(out_dir, "frames"), exist_ok=True)
    h, w = config.image_h, config.image_w
    dtype = config.torch_dtype()
    model = load_model(find_model_file(reference_dir))
    paths = _speaker_paths(reference_dir)

    if fit:
        fitted_path = os.path.join(out_dir, "fitted_coeffs.npz")
        timeline, _ = fit_geometry(config, reference_dir, fitted_path)
    else:
        if not os.path.exists(paths["coeffs"]):
            raise DataError(f"{reference_dir} has no coeffs.npz and fitting is "
                            f"disabled; pass fit=True or provide coefficients")
        timeline = load_timeline(paths["coeffs"])

    ref_frames = load_speaker_frames(reference_dir, expected=len(timeline))
    if ref_frames.shape[2] != h or ref_frames.shape[3] != w:
        raise DataError(f"reference frames are {ref_frames.shape[2]}x"
                        f"{ref_frames.shape[3]}, config wants {h}x{w}")
    t_ref = len(timeline)

    waveform = read_wav_mono16k(audio_path)
    t_out = int(np.floor(waveform.shape[0] / 16000.0 * config.fps + 0.5))
    if t_out < 1:
        raise DataError("target audio is shorter than one frame")

    # stage 1: stylized audio -> lower-face geometry
    meta1, params1, _ = load_checkpoint(stage1_ckpt)
    if meta1["stage"] != "stage1":
        raise DataError(f"{stage1_ckpt} is not a stage-1 checkpoint")
    net1 = Stage1Model.from_config(meta1["config"]).to(dtype)
    restore_module(net1, params1)
    net1.eval()
    if net1.n_vertices != model.n_vertices:
        raise DataError("stage-1 checkpoint was trained for a different model")
    cache_dir = os.path.join(out_dir, "cache")
    with torch.no_grad():
        features = cached_audio_features(cache_dir, waveform, config.fps,
                                         net1.audio_encoder)
        pred_verts = net1.geometry_from_audio(
            waveform, model, timeline.mean_alpha, timeline.beta,
            fps=config.fps, audio_features=features.to(dtype))
    pred_verts = pred_verts.numpy().astype(np.float64)

    # stage 2 renderer
    meta2, params2, _ = load_checkpoint(stage2_ckpt)
    if meta2["stage"] != "stage2":
        raise DataError(f"{stage2_ckpt} is not a stage-2 checkpoint")
    net2 = FaceRenderer.from_config(meta2["config"]).to(dtype)
    restore_module(net2, params2)
    net2.eval()
    if (net2.h, net2.w) != (h, w):
        raise DataError(f"stage-2 checkpoint renders {net2.h}x{net2.w}, "
                        f"config wants {h}x{w}")

    # reference geometry: canonical expression vertices and geometry images
    ref_canon = _gt_vertex_seq(model, timeline)
    ref_pncc = np.zeros((t_ref, 3, h, w))
    for t in range(t_ref):
        pose = timeline.pose(t)
        posed, _ = pose_and_project(ref_canon[t], pose, h, w)
        pncc_map, _ = render_pncc_with_coverage(posed, ref_canon[t], model, h, w,
                                                scale=pose.scale)
        ref_pncc[t] = pncc_map
    lip_ids = refselect.inference_lip_indices(
        refselect.lip_argsort(ref_canon, model), config.n_lip_infer)

    frame_hashes = []
    pred_landmarks = np.zeros((t_out, model.landmark_indices.shape[0], 2))
    if dump_pncc:
        os.makedirs(os.path.join(out_dir, "pncc"), exist_ok=True)
    with torch.no_grad():
        for t in range(t_out):
            r = pingpong_index(t, t_ref)
            merged = merge_lower_upper(pred_verts[t], ref_canon[r], model)
            pose = timeline.pose(r)
            posed, points = pose_and_project(merged, pose, h, w)
            pncc_map, coverage = render_pncc_with_coverage(
                posed, merged, model, h, w, scale=pose.scale)
            pred_landmarks[t] = points[model.landmark_indices]
            face_ids = refselect.inference_face_indices(r + 1, t_ref,
                                                        config.n_face_infer)
            face_idx = [j - 1 for j in face_ids]
            lip_idx = [j - 1 for j in lip_ids]
            frame = net2.render_frame(
                model,
                torch.as_tensor(pncc_map, dtype=dtype),
                torch.as_tensor(ref_pncc[face_idx], dtype=dtype),
                torch.as_tensor(ref_frames[face_idx], dtype=dtype),
                torch.as_tensor(ref_pncc[lip_idx], dtype=dtype),
                torch.as_tensor(ref_frames[lip_idx], dtype=dtype))
            out_path = os.path.join(out_dir, "frames", f"{t:05d}.png")
            frame_to_png(out_path, frame.numpy())
            frame_hashes.append(file_digest(out_path))
            if dump_pncc:
                np.savez(os.path.join(out_dir, "pncc", f"{t:05d}.npz"),
                         pncc=pncc_map, coverage=coverage)

    save_landmarks(os.path.join(out_dir, "landmarks.npz"),
                   LandmarkTrack(pred_landmarks, h, w))
    manifest = {
        "format_version": MANIFEST_FORMAT_VERSION,
        "pipeline_version": PIPELINE_VERSION,
        "config": config.serialize(),
        "seed": config.seed,
        "inputs": {
            "audio": file_digest(audio_path),
            "stage1_checkpoint": file_digest(stage1_ckpt),
            "stage2_checkpoint": file_digest(stage2_ckpt),
            "reference_coeffs": file_digest(paths["coeffs"])
            if os.path.exists(paths["coeffs"]) else None,
        },
        "reference_frames": t_ref,
        "output_frames": t_out,
        "frame_hashes": frame_hashes,
    }
    with open(os.path.join(out_dir, "manifest.json"), "w") as fh:
        json.dump(manifest, fh, indent=2)
    return manifest


# ---------------------------------------------------------------------------
# evaluation


def _load_frame_dir(directory):
    frames_dir = os.path.join(directory, "frames")
    if not os.path.isdir(frames_dir):
        raise DataError(f"{directory} has no frames/ subdirectory")
    names = sorted(n for n in os.listdir(frames_dir) if n.endswith(".png"))
    if not names:
        raise DataError(f"{frames_dir} holds no PNG frames")
    return np.stack([png_to_frame(os.path.join(frames_dir, n)) for n in names])


def evaluate(config: PipelineConfig, pred_dir, gt_dir, out_dir=None,
             style_encoder_fn=None):
    """Compare a prediction directory against ground truth.

    PSNR/SSIM run on the frame pairs; the landmark metric runs when both
    directories carry landmark tracks; the style metric runs when both carry
    coefficient files and a style embedding callable is supplied. External
    metrics (fid, csim, sync_score, lpips) run only through registered
    adapters; otherwise their rows read "skipped". Returns the EvalReport.
    """
    out_dir = out_dir or os.path.join(pred_dir, "eval")
    os.makedirs(out_dir, exist_ok=True)
    pred_frames = _load_frame_dir(pred_dir)
    gt_frames = _load_frame_dir(gt_dir)
    if pred_frames.shape != gt_frames.shape:
        raise DataError(f"frame sets differ: {pred_frames.shape} vs "
                        f"{gt_frames.shape}")

    entries = {}

    psnr_values = [psnr(p, g) for p, g in zip(pred_frames, gt_frames)]
    trace = os.path.join(out_dir, "psnr_trace.txt")
    _write_trace(trace, psnr_values)
    entries["psnr"] = MetricEntry(
        value=float(np.mean(psnr_values)), status="ok",
        normalization="10*log10(1/MSE) on [0,1] frames, capped at 100 dB",
        trace_path=trace)

    ssim_values = [ssim(p, g) for p, g in zip(pred_frames, gt_frames)]
    trace = os.path.join(out_dir, "ssim_trace.txt")
    _write_trace(trace, ssim_values)
    entries["ssim"] = MetricEntry(
        value=float(np.mean(ssim_values)), status="ok",
        normalization="11x11 Gaussian window (sigma 1.5), channel-mean grayscale",
        trace_path=trace)

    entries["lmd"] = _lmd_entry(pred_dir, gt_dir, out_dir)
    entries["style_sim"] = _style_entry(pred_dir, gt_dir, style_encoder_fn)

    for name in EXTERNAL_METRIC_NAMES:
        if not has_metric_adapter(name):
            entries[name] = MetricEntry(status="skipped",
                                        normalization="external adapter",
                                        detail="no adapter registered")
            continue
        try:
            value = float(external_metric_adapter(name)(pred_frames, gt_frames))
            entries[name] = MetricEntry(value=value, status="ok",
                                        normalization="external adapter")
        except Exception as exc:  # adapter failure must not kill the run
            entries[name] = MetricEntry(status="failed",
                                        normalization="external adapter",
                                        detail=f"{type(exc).__name__}: {exc}")

    report = EvalReport(entries=entries, metadata={
        "pred_dir": str(pred_dir), "gt_dir": str(gt_dir),
        "frames": str(pred_frames.shape[0]),
    })
    report.save(os.path.join(out_dir, "report.txt"))
    return report


def _write_trace(path, values):
    with open(path, "w") as fh:
        for i, v in enumerate(values):
            fh.write(f"{i} {v!r}\n")


def _lmd_entry(pred_dir, gt_dir, out_dir):
    pred_path = os.path.join(pred_dir, "landmarks.npz")
    gt_path = os.path.join(gt_dir, "landmarks.npz")
    if not (os.path.exists(pred_path) and os.path.exists(gt_path)):
        return MetricEntry(status="skipped",
                           normalization="inter-ocular distance",
                           detail="landmark tracks missing on one side")
    pred = load_landmarks(pred_path)
    gt = load_landmarks(gt_path)
    t = min(len(pred), len(gt))
    pred_pts, gt_pts = pred.points[:t], gt.points[:t]
    inter_ocular = float(np.linalg.norm(gt_pts[:, 0] - gt_pts[:, 1], axis=1).mean())
    if inter_ocular > 1e-9:
        scale, norm_name = inter_ocular, "inter-ocular distance (slots 0-1)"
    else:
        scale, norm_name = float(gt.image_w), "face-crop width (fallback)"
    subset = None
    try:
        model = load_model(find_model_file(gt_dir))
        lip_set = set(model.lip_region_indices.tolist())
        subset = [k for k, vid in enumerate(model.landmark_indices.tolist())
                  if vid in lip_set]
    except DataError:
        subset = None  # no model file: use every landmark
    value = lmd(pred_pts, gt_pts, scale, landmark_subset=subset or None)
    return MetricEntry(value=value, status="ok",
                       normalization=norm_name
                       + ("" if subset else "; all landmarks"),
                       detail=f"{len(subset) if subset else pred_pts.shape[1]} "
                              f"landmarks over {t} frames")


def _style_entry(pred_dir, gt_dir, style_encoder_fn):
    pred_path = os.path.join(pred_dir, "coeffs.npz")
    gt_path = os.path.join(gt_dir, "coeffs.npz")
    if not (os.path.exists(pred_path) and os.path.exists(gt_path)):
        return MetricEntry(status="skipped",
                           normalization="cosine of style embeddings",
                           detail="coefficient files missing on one side")
    if style_encoder_fn is None:
        return MetricEntry(status="skipped",
                           normalization="cosine of style embeddings",
                           detail="no style embedding path supplied")
    a = load_timeline(pred_path).beta
    b = load_timeline(gt_path).beta
    value = style_sim(a, b, style_encoder_fn)
    return MetricEntry(value=value, status="ok",
                       normalization="cosine of style embeddings")


def style_fn_from_checkpoint(stage1_ckpt, model: MorphableModel, dtype=torch.float64):
    """The trained style path as a (T, n_beta) -> embedding callable."""
    from .audio_style import extract_style

    meta, params, _ = load_checkpoint(stage1_ckpt)
    if meta["stage"] != "stage1":
        raise DataError(f"{stage1_ckpt} is not a stage-1 checkpoint")
    net = Stage1Model.from_config(meta["config"]).to(dtype)
    restore_module(net, params)
    net.eval()

    def embed(beta_seq):
        with torch.no_grad():
            return extract_style(beta_seq, model, net.style_encoder).numpy()
    return embed
