"""Reconstruction and style metrics plus the evaluation report container.

Every metric states its normalization in the report so numbers are
comparable across runs. Heavyweight perceptual/identity/sync metrics are
adapter slots: absent adapters mark their rows "skipped", raising adapters
mark them "failed", and the evaluation run continues either way.
"""

from __future__ import annotations

import dataclasses

import numpy as np
from scipy.signal import convolve2d

EXTERNAL_METRIC_NAMES = ("fid", "csim", "sync_score", "lpips")
_EXTERNAL_REGISTRY = {}


def _check_pair(a, b):
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ValueError(f"frame shapes differ: {a.shape} vs {b.shape}")
    for name, arr in (("first", a), ("second", b)):
        if arr.min() < -1e-6 or arr.max() > 1 + 1e-6:
            raise ValueError(f"{name} frame has values outside [0, 1]")
    return a, b


def psnr(a, b) -> float:
    """Peak signal-to-noise ratio in dB for [0, 1] frames, capped at 100."""
    a, b = _check_pair(a, b)
    mse = float(((a - b) ** 2).mean())
    if mse == 0.0:
        return 100.0
    return float(min(100.0, 10.0 * np.log10(1.0 / mse)))


def _gaussian_window(size=11, sigma=1.5):
    half = (size - 1) / 2.0
    x = np.arange(size) - half
    g = np.exp(-(x ** 2) / (2 * sigma ** 2))
    return g / g.sum()


def ssim(a, b, window_size: int = 11, sigma: float = 1.5,
         k1: float = 0.01, k2: float = 0.03) -> float:
    """Structural similarity with an 11x11 Gaussian window on [0, 1] frames.

    Color frames ((3, H, W) or (H, W, 3)) are reduced to grayscale by the
    channel mean. Frames smaller than the window are rejected.
    """
    a, b = _check_pair(a, b)

    def to_gray(x):
        if x.ndim == 2:
            return x
        if x.ndim == 3 and x.shape[0] == 3:
            return x.mean(axis=0)
        if x.ndim == 3 and x.shape[2] == 3:
            return x.mean(axis=2)
        raise ValueError(f"cannot interpret frame shape {x.shape}")
    ga, gb = to_gray(a), to_gray(b)
    if min(ga.shape) < window_size:
        raise ValueError(f"frame {ga.shape} smaller than the {window_size}x"
                         f"{window_size} window")
    w = _gaussian_window(window_size, sigma)
    kernel = np.outer(w, w)
    conv = lambda x: convolve2d(x, kernel, mode="valid")
    mu_a, mu_b = conv(ga), conv(gb)
    var_a = conv(ga * ga) - mu_a ** 2
    var_b = conv(gb * gb) - mu_b ** 2
    cov = conv(ga * gb) - mu_a * mu_b
    c1, c2 = k1 ** 2, k2 ** 2  # dynamic range is 1
    num = (2 * mu_a * mu_b + c1) * (2 * cov + c2)
    den = (mu_a ** 2 + mu_b ** 2 + c1) * (var_a + var_b + c2)
    return float((num / den).mean())


def lmd(pred_landmarks, gt_landmarks, norm_scale: float, landmark_subset=None) -> float:
    """Mean landmark distance, normalized by norm_scale (inter-ocular distance
    in this pipeline, face-crop width as fallback).

    pred/gt: (T, K, 2); landmark_subset optionally restricts to given slots
    (the lip set, when the caller has one).
    """
    pred = np.asarray(pred_landmarks, dtype=np.float64)
    gt = np.asarray(gt_landmarks, dtype=np.float64)
    if pred.shape != gt.shape or pred.ndim != 3 or pred.shape[2] != 2:
        raise ValueError("landmark arrays must be matching (T, K, 2)")
    if not np.isfinite(norm_scale) or norm_scale <= 0:
        raise ValueError(f"norm_scale must be positive, got {norm_scale}")
    if landmark_subset is not None:
        idx = np.asarray(landmark_subset, dtype=np.int64)
        pred, gt = pred[:, idx], gt[:, idx]
    dists = np.linalg.norm(pred - gt, axis=-1)
    return float(dists.mean() / norm_scale)


def style_sim(beta_seq_a, beta_seq_b, style_fn) -> float:
    """Cosine similarity of the style embeddings of two expression sequences.

    style_fn maps a (T, n_beta) sequence to an embedding vector; the package
    default is the trained style path (extract_style under frozen weights),
    and any external embedding can be swapped in through this callable.
    """
    ea = np.asarray(style_fn(beta_seq_a), dtype=np.float64).reshape(-1)
    eb = np.asarray(style_fn(beta_seq_b), dtype=np.float64).reshape(-1)
    na, nb = np.linalg.norm(ea), np.linalg.norm(eb)
    if na < 1e-12 or nb < 1e-12:
        raise ValueError("zero-norm style embedding")
    return float(ea @ eb / (na * nb))


def register_metric(name: str, fn):
    """Register an external metric adapter: fn(pred_frames, gt_frames) -> float."""
    _EXTERNAL_REGISTRY[name] = fn


def unregister_metric(name: str):
    _EXTERNAL_REGISTRY.pop(name, None)


def external_metric_adapter(name: str):
    """The registered adapter callable for `name`; KeyError when unknown."""
    if name not in _EXTERNAL_REGISTRY:
        raise KeyError(f"no adapter registered for metric {name!r}")
    return _EXTERNAL_REGISTRY[name]


def has_metric_adapter(name: str) -> bool:
    return name in _EXTERNAL_REGISTRY


@dataclasses.dataclass
class MetricEntry:
    value: float = None
    status: str = "ok"  # ok | skipped | failed
    normalization: str = ""
    trace_path: str = ""
    detail: str = ""


@dataclasses.dataclass
class EvalReport:
    """Evaluation results: one MetricEntry per metric plus free-form metadata."""

    entries: dict
    metadata: dict = dataclasses.field(default_factory=dict)

    def to_text(self) -> str:
        lines = ["# visualdub evaluation report v1"]
        for key in sorted(self.metadata):
            lines.append(f"meta.{key} = {self.metadata[key]}")
        for name in sorted(self.entries):
            e = self.entries[name]
            value = "nan" if e.value is None else repr(float(e.value))
            lines.append(f"{name}.value = {value}")
            lines.append(f"{name}.status = {e.status}")
            lines.append(f"{name}.normalization = {e.normalization}")
            lines.append(f"{name}.trace = {e.trace_path}")
            if e.detail:
                lines.append(f"{name}.detail = {e.detail}")
        return "\n".join(lines) + "\n"

    def save(self, path):
        with open(path, "w") as fh:
            fh.write(self.to_text())


def parse_report(path) -> EvalReport:
    """Parse a report file back into an EvalReport (also the schema check)."""
    entries = {}
    metadata = {}
    with open(path) as fh:
        lines = fh.read().splitlines()
    if not lines or not lines[0].startswith("# visualdub evaluation report"):
        raise ValueError(f"{path} is not an evaluation report")
    for lineno, line in enumerate(lines[1:], start=2):
        if not line.strip():
            continue
        if " = " not in line:
            raise ValueError(f"{path}:{lineno}: expected 'key = value'")
        key, value = line.split(" = ", 1)
        if key.startswith("meta."):
            metadata[key[5:]] = value
            continue
        if "." not in key:
            raise ValueError(f"{path}:{lineno}: metric keys look like name.field")
        name, field = key.rsplit(".", 1)
        entry = entries.setdefault(name, MetricEntry())
        if field == "value":
            entry.value = None if value == "nan" else float(value)
        elif field == "status":
            if value not in ("ok", "skipped", "failed"):
                raise ValueError(f"{path}:{lineno}: bad status {value!r}")
            entry.status = value
        elif field == "normalization":
            entry.normalization = value
        elif field == "trace":
            entry.trace_path = value
        elif field == "detail":
            entry.detail = value
        else:
            raise ValueError(f"{path}:{lineno}: unknown field {field!r}")
    return EvalReport(entries=entries, metadata=metadata)
