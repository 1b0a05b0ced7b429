"""Synthetic audio-visual speaker generator.

Each speaker is a textured toy face whose jaw opening follows the amplitude
envelope of a generated tone, so audio and mouth geometry are causally
linked the way the rest of the pipeline expects. Speaker *identity* (style
directions, base face, carrier pitch, palette colors) derives from the
non-seed spec fields; the seed varies the clip (phases, drift), which is
what makes several clips of one speaker possible.
"""

from __future__ import annotations

import dataclasses
import hashlib
import json
import os

import numpy as np
from PIL import Image

from .audio_style import write_wav_mono16k
from .errors import DataError
from .geometry_fit import CoeffTimeline, LandmarkTrack, save_landmarks, save_timeline
from .morphable_model import MorphableModel, pose_and_project, rasterize_attributes, \
    save_model, synthesize_vertices

DATASET_FORMAT_VERSION = 1
SAMPLE_RATE = 16000

_PALETTES = [
    # (skin, lip, background)
    ((0.85, 0.70, 0.58), (0.75, 0.32, 0.30), (0.16, 0.18, 0.22)),
    ((0.62, 0.46, 0.36), (0.55, 0.22, 0.24), (0.10, 0.22, 0.16)),
    ((0.93, 0.80, 0.70), (0.80, 0.42, 0.40), (0.24, 0.12, 0.20)),
    ((0.72, 0.58, 0.48), (0.62, 0.28, 0.26), (0.08, 0.10, 0.26)),
]


@dataclasses.dataclass(frozen=True)
class SyntheticSpeakerSpec:
    """Generator parameters for one synthetic clip.

    seed: clip-level randomness (phases, drift noise). amplitude: expression
    scale (> 0). jaw_hz: jaw-motion frequency. palette: texture palette id.
    pose_drift: magnitude of the slow head motion.
    """

    seed: int
    amplitude: float = 1.0
    jaw_hz: float = 2.0
    palette: int = 0
    pose_drift: float = 0.05

    def __post_init__(self):
        if self.amplitude <= 0:
            raise ValueError(f"amplitude must be > 0, got {self.amplitude}")
        if self.jaw_hz <= 0:
            raise ValueError(f"jaw_hz must be > 0, got {self.jaw_hz}")
        if self.pose_drift < 0:
            raise ValueError("pose_drift must be >= 0")

    def identity_key(self) -> str:
        """Speaker identity: everything but the clip seed."""
        return f"amp={self.amplitude!r}_jaw={self.jaw_hz!r}_pal={self.palette}"

    def identity_rng(self, stream: int = 0) -> np.random.Generator:
        digest = hashlib.sha256(f"{self.identity_key()}#{stream}".encode()).digest()
        return np.random.default_rng(int.from_bytes(digest[:8], "little"))


def _speaker_identity(spec: SyntheticSpeakerSpec, model: MorphableModel):
    """Deterministic per-speaker parameters shared by all clips of a speaker."""
    rng = spec.identity_rng()
    alpha = rng.normal(0.0, 0.5, model.n_alpha)
    n_style = model.n_beta - 1
    u1 = rng.normal(size=n_style)
    u1 /= np.linalg.norm(u1)
    u2 = rng.normal(size=n_style)
    u2 -= (u2 @ u1) * u1
    u2 /= np.linalg.norm(u2)
    style_freqs = rng.uniform(0.6, 1.6, 2)
    carrier_hz = rng.uniform(150.0, 280.0)
    return {"alpha": alpha, "u1": u1, "u2": u2, "style_freqs": style_freqs,
            "carrier_hz": carrier_hz}


def _round_half_up(x):
    return int(np.floor(x + 0.5))


def speaker_motion(spec: SyntheticSpeakerSpec, model: MorphableModel,
                   duration_s: float, fps: float = 25.0, image_hw=(64, 64)):
    """Coefficient timeline + audio samples for one clip (no rendering).

    Returns (CoeffTimeline, samples float64 in [-1, 1]).
    """
    ident = _speaker_identity(spec, model)
    rng = np.random.default_rng(spec.seed)
    h, w = image_hw
    t_frames = _round_half_up(duration_s * fps)
    if t_frames < 1:
        raise ValueError("duration too short for a single frame")
    tau = np.arange(t_frames) / fps

    jaw_phase = rng.uniform(0, 2 * np.pi)
    slow_phase = rng.uniform(0, 2 * np.pi)
    env_fn = lambda t: (0.5 - 0.5 * np.cos(2 * np.pi * spec.jaw_hz * t + jaw_phase)) \
        * (0.75 + 0.25 * np.sin(2 * np.pi * 0.3 * t + slow_phase))
    beta = np.zeros((t_frames, model.n_beta))
    beta[:, 0] = spec.amplitude * env_fn(tau)
    ph1, ph2 = rng.uniform(0, 2 * np.pi, 2)
    f1, f2 = ident["style_freqs"]
    style = (0.45 * np.sin(2 * np.pi * f1 * tau + ph1)[:, None] * ident["u1"]
             + 0.25 * np.sin(2 * np.pi * f2 * tau + ph2)[:, None] * ident["u2"])
    beta[:, 1:] = spec.amplitude * style

    alpha = np.tile(ident["alpha"], (t_frames, 1))

    drift_phases = rng.uniform(0, 2 * np.pi, 7)
    drift_freqs = rng.uniform(0.05, 0.25, 7)
    drift = np.stack([np.sin(2 * np.pi * f * tau + p)
                      for f, p in zip(drift_freqs, drift_phases)], axis=1)
    rotation = spec.pose_drift * drift[:, :3] * np.array([0.6, 1.0, 0.4])
    translation = spec.pose_drift * 0.6 * drift[:, 3:6]
    base_scale = 0.38 * min(h, w)
    scale = base_scale * (1.0 + 0.04 * spec.pose_drift * drift[:, 6])

    timeline = CoeffTimeline(alpha, beta, rotation, translation, scale, fps)

    n_samples = _round_half_up(duration_s * SAMPLE_RATE)
    ts = np.arange(n_samples) / SAMPLE_RATE
    samples = 0.8 * env_fn(ts) * np.sin(2 * np.pi * ident["carrier_hz"] * ts)
    return timeline, samples


def vertex_colors(spec: SyntheticSpeakerSpec, model: MorphableModel):
    """Per-vertex base colors for a speaker: skin shading, lip tint, eye dots,
    plus light speaker-specific texture noise."""
    skin, lip, _ = _PALETTES[spec.palette % len(_PALETTES)]
    verts = model.mean_shape.reshape(-1, 3)
    z_span = max(float(np.ptp(verts[:, 2])), 1e-9)
    shade = 0.85 + 0.3 * (verts[:, 2] - verts[:, 2].min()) / z_span
    colors = np.array(skin)[None] * shade[:, None]
    colors[model.lip_region_indices] = lip
    eye_slots = model.landmark_indices[:2]
    colors[eye_slots] = (0.12, 0.10, 0.10)
    noise = spec.identity_rng(stream=1).normal(0.0, 0.02, colors.shape)
    return np.clip(colors + noise, 0.0, 1.0)


def render_textured_frame(verts, pose, colors, model: MorphableModel, h, w,
                          background):
    posed, points = pose_and_project(verts, pose, h, w)
    image, coverage = rasterize_attributes(points, posed[:, 2], colors,
                                           model.topology, h, w)
    out = np.where(coverage[None], image, np.asarray(background)[:, None, None])
    return np.clip(out, 0.0, 1.0)


def frame_to_png(path, frame):
    """frame: (3, H, W) floats in [0, 1] -> 8-bit RGB PNG."""
    arr = np.clip(np.asarray(frame), 0.0, 1.0)
    img = (arr * 255.0 + 0.5).astype(np.uint8).transpose(1, 2, 0)
    Image.fromarray(img, "RGB").save(path)


def png_to_frame(path):
    try:
        img = Image.open(path).convert("RGB")
    except (OSError, ValueError) as exc:
        raise DataError(f"cannot read frame {path}: {exc}") from exc
    return np.asarray(img, dtype=np.float64).transpose(2, 0, 1) / 255.0


def synth_dataset(specs, duration_s: float, out_dir, model: MorphableModel,
                  fps: float = 25.0, image_hw=(64, 64)):
    """Write a synthetic dataset: one directory per spec with audio.wav,
    frames/%05d.png, coeffs.npz, landmarks.npz and spec.json, plus the model
    file and dataset.json at the root. Fully determined by the specs."""
    h, w = image_hw
    os.makedirs(out_dir, exist_ok=True)
    save_model(os.path.join(out_dir, "model.npz"), model)
    speaker_dirs = []
    for idx, spec in enumerate(specs):
        sdir = os.path.join(out_dir, f"speaker_{idx:02d}")
        os.makedirs(os.path.join(sdir, "frames"), exist_ok=True)
        timeline, samples = speaker_motion(spec, model, duration_s, fps, image_hw)
        write_wav_mono16k(os.path.join(sdir, "audio.wav"), samples)
        save_timeline(os.path.join(sdir, "coeffs.npz"), timeline)
        colors = vertex_colors(spec, model)
        background = np.array(_PALETTES[spec.palette % len(_PALETTES)][2])
        lm_points = np.zeros((len(timeline), model.landmark_indices.shape[0], 2))
        for t in range(len(timeline)):
            verts = synthesize_vertices(model, timeline.alpha[t], timeline.beta[t])
            pose = timeline.pose(t)
            frame = render_textured_frame(verts, pose, colors, model, h, w, background)
            frame_to_png(os.path.join(sdir, "frames", f"{t:05d}.png"), frame)
            _, points = pose_and_project(verts, pose, h, w)
            lm_points[t] = points[model.landmark_indices]
        save_landmarks(os.path.join(sdir, "landmarks.npz"),
                       LandmarkTrack(lm_points, h, w))
        with open(os.path.join(sdir, "spec.json"), "w") as fh:
            json.dump({**dataclasses.asdict(spec),
                       "identity": spec.identity_key()}, fh, indent=2)
        speaker_dirs.append(os.path.basename(sdir))
    meta = {
        "format_version": DATASET_FORMAT_VERSION,
        "fps": fps,
        "duration_s": duration_s,
        "image_h": h,
        "image_w": w,
        "speakers": speaker_dirs,
    }
    with open(os.path.join(out_dir, "dataset.json"), "w") as fh:
        json.dump(meta, fh, indent=2)
    return meta


def load_dataset_meta(dataset_dir):
    path = os.path.join(dataset_dir, "dataset.json")
    try:
        with open(path) as fh:
            meta = json.load(fh)
    except (OSError, ValueError) as exc:
        raise DataError(f"cannot read dataset metadata {path}: {exc}") from exc
    if meta.get("format_version") != DATASET_FORMAT_VERSION:
        raise DataError(f"{path}: unsupported dataset format_version")
    return meta


def load_speaker_frames(speaker_dir, expected=None):
    frames_dir = os.path.join(speaker_dir, "frames")
    if not os.path.isdir(frames_dir):
        raise DataError(f"missing frames directory {frames_dir}")
    names = sorted(n for n in os.listdir(frames_dir) if n.endswith(".png"))
    if expected is not None and len(names) != expected:
        raise DataError(f"{frames_dir}: found {len(names)} frames, expected {expected}")
    return np.stack([png_to_frame(os.path.join(frames_dir, n)) for n in names])
