"""Per-frame coefficient timelines and landmark-based geometry fitting.

The fitting objective is a temporal one: first differences of projected
landmarks must match the observed track, second differences of pose and
expression stay small, and a weak prior keeps coefficients near their
initialization. Optimization is Adam on torch tensors; everything here
runs in float64.
"""

from __future__ import annotations

import dataclasses

import numpy as np
import torch

from .errors import DataError, NumericsError
from .morphable_model import MorphableModel, PoseParams

COEFF_FORMAT_VERSION = 1
LANDMARK_FORMAT_VERSION = 1


@dataclasses.dataclass
class CoeffTimeline:
    """Per-frame morphable coefficients and poses.

    alpha: (T, n_alpha), beta: (T, n_beta), rotation: (T, 3) Euler radians,
    translation: (T, 3), scale: (T,) all float64.
    """

    alpha: np.ndarray
    beta: np.ndarray
    rotation: np.ndarray
    translation: np.ndarray
    scale: np.ndarray
    fps: float = 25.0

    def __post_init__(self):
        self.alpha = np.asarray(self.alpha, dtype=np.float64)
        self.beta = np.asarray(self.beta, dtype=np.float64)
        self.rotation = np.asarray(self.rotation, dtype=np.float64)
        self.translation = np.asarray(self.translation, dtype=np.float64)
        self.scale = np.asarray(self.scale, dtype=np.float64).reshape(-1)
        self.fps = float(self.fps)
        t = self.alpha.shape[0]
        if t < 1:
            raise ValueError("timeline needs at least one frame")
        if self.beta.shape[0] != t or self.rotation.shape != (t, 3) \
                or self.translation.shape != (t, 3) or self.scale.shape != (t,):
            raise ValueError("timeline arrays disagree on the frame count")
        if (self.scale <= 0).any():
            raise ValueError("all scales must be > 0")

    def __len__(self):
        return self.alpha.shape[0]

    @property
    def mean_alpha(self):
        return self.alpha.mean(axis=0)

    def pose(self, t: int) -> PoseParams:
        return PoseParams(self.rotation[t], self.translation[t], float(self.scale[t]))

    def pose_vector(self):
        """(T, 7) array [rotation, translation, scale] used by the losses."""
        return np.concatenate([self.rotation, self.translation, self.scale[:, None]], axis=1)

    def copy(self):
        return CoeffTimeline(self.alpha.copy(), self.beta.copy(), self.rotation.copy(),
                             self.translation.copy(), self.scale.copy(), self.fps)


@dataclasses.dataclass
class LandmarkTrack:
    """Observed 2D landmarks: points (T, K, 2) pixel coords in an image of
    size (image_h, image_w)."""

    points: np.ndarray
    image_h: int
    image_w: int

    def __post_init__(self):
        self.points = np.asarray(self.points, dtype=np.float64)
        if self.points.ndim != 3 or self.points.shape[2] != 2:
            raise ValueError("points must be (T, K, 2)")
        self.image_h = int(self.image_h)
        self.image_w = int(self.image_w)
        if self.image_h <= 0 or self.image_w <= 0:
            raise ValueError("image size must be positive")

    def __len__(self):
        return self.points.shape[0]


# ---------------------------------------------------------------------------
# file containers


def save_timeline(path, timeline: CoeffTimeline):
    """Coefficient file: one record per frame (frame_index, alpha, beta, pose)
    stored columnar in an npz with an n_alpha/n_beta/T/fps header."""
    t = len(timeline)
    np.savez(
        path,
        format_version=np.int64(COEFF_FORMAT_VERSION),
        n_alpha=np.int64(timeline.alpha.shape[1]),
        n_beta=np.int64(timeline.beta.shape[1]),
        num_frames=np.int64(t),
        fps=np.float64(timeline.fps),
        frame_index=np.arange(t, dtype=np.int64),
        alpha=timeline.alpha,
        beta=timeline.beta,
        rotation=timeline.rotation,
        translation=timeline.translation,
        scale=timeline.scale,
    )


def load_timeline(path) -> CoeffTimeline:
    try:
        data = np.load(path)
    except (OSError, ValueError) as exc:
        raise DataError(f"cannot read coefficient file {path}: {exc}") from exc
    required = ["format_version", "n_alpha", "n_beta", "num_frames", "fps",
                "alpha", "beta", "rotation", "translation", "scale"]
    missing = [k for k in required if k not in data]
    if missing:
        raise DataError(f"coefficient file {path} is missing keys {missing}")
    if int(data["format_version"]) != COEFF_FORMAT_VERSION:
        raise DataError(f"coefficient file {path}: unsupported format_version "
                        f"{int(data['format_version'])}")
    t = int(data["num_frames"])
    alpha, beta = data["alpha"], data["beta"]
    if alpha.shape != (t, int(data["n_alpha"])) or beta.shape != (t, int(data["n_beta"])):
        raise DataError(f"coefficient file {path}: header disagrees with array shapes")
    try:
        return CoeffTimeline(alpha, beta, data["rotation"], data["translation"],
                             data["scale"], float(data["fps"]))
    except ValueError as exc:
        raise DataError(f"coefficient file {path} is inconsistent: {exc}") from exc


def save_landmarks(path, track: LandmarkTrack):
    np.savez(
        path,
        format_version=np.int64(LANDMARK_FORMAT_VERSION),
        num_frames=np.int64(len(track)),
        num_points=np.int64(track.points.shape[1]),
        image_h=np.int64(track.image_h),
        image_w=np.int64(track.image_w),
        points=track.points,
    )


def load_landmarks(path) -> LandmarkTrack:
    try:
        data = np.load(path)
    except (OSError, ValueError) as exc:
        raise DataError(f"cannot read landmark file {path}: {exc}") from exc
    required = ["format_version", "num_frames", "num_points", "image_h", "image_w", "points"]
    missing = [k for k in required if k not in data]
    if missing:
        raise DataError(f"landmark file {path} is missing keys {missing}")
    if int(data["format_version"]) != LANDMARK_FORMAT_VERSION:
        raise DataError(f"landmark file {path}: unsupported format_version")
    pts = data["points"]
    if pts.shape[:2] != (int(data["num_frames"]), int(data["num_points"])):
        raise DataError(f"landmark file {path}: header disagrees with array shape")
    return LandmarkTrack(pts, int(data["image_h"]), int(data["image_w"]))


# ---------------------------------------------------------------------------
# initialization


def _pos_fit(mean_landmarks, observed, h, w):
    """Pose from orthography and scaling: fit scale/rotation/translation of the
    mean-shape landmarks to one frame of observed pixels."""
    center = np.array([w / 2.0, h / 2.0])
    p = observed - observed.mean(axis=0)
    m = mean_landmarks - mean_landmarks.mean(axis=0)
    # least squares (2x3) scaled-rotation: p ~= m @ a.T
    a, *_ = np.linalg.lstsq(m, p, rcond=None)
    a = a.T
    r1, r2 = a[0], a[1]
    n1, n2 = np.linalg.norm(r1), np.linalg.norm(r2)
    if n1 < 1e-12 or n2 < 1e-12:
        return 1.0, np.zeros(3), np.zeros(3)
    scale = 0.5 * (n1 + n2)
    r1 = r1 / n1
    r2 = r2 - (r2 @ r1) * r1
    r2 = r2 / np.linalg.norm(r2)
    r3 = np.cross(r1, r2)
    rot = np.stack([r1, r2, r3])
    # Euler angles for R = Rz @ Ry @ Rx
    ay = np.arcsin(np.clip(-rot[2, 0], -1.0, 1.0))
    ax = np.arctan2(rot[2, 1], rot[2, 2])
    az = np.arctan2(rot[1, 0], rot[0, 0])
    t_xy = (observed.mean(axis=0) - center) / scale - (rot @ mean_landmarks.mean(axis=0))[:2]
    translation = np.array([t_xy[0], t_xy[1], 0.0])  # t_z unobservable here
    return scale, np.array([ax, ay, az]), translation


def init_coeffs(source, model: MorphableModel = None, fps: float = 25.0) -> CoeffTimeline:
    """Initial coefficient timeline.

    source: a coefficient file path (loaded as-is) or a LandmarkTrack. The
    landmark path needs `model`: alpha and beta start at zero and each frame's
    pose comes from a similarity alignment of the mean-shape landmarks.
    """
    if isinstance(source, (str, bytes)) or hasattr(source, "__fspath__"):
        return load_timeline(source)
    if not isinstance(source, LandmarkTrack):
        raise ValueError("source must be a coefficient file path or a LandmarkTrack")
    if model is None:
        raise ValueError("heuristic initialization needs the morphable model")
    track = source
    if track.points.shape[1] != model.landmark_indices.shape[0]:
        raise ValueError(
            f"track has {track.points.shape[1]} landmarks, model defines "
            f"{model.landmark_indices.shape[0]}")
    t = len(track)
    mean_lm = model.mean_shape.reshape(-1, 3)[model.landmark_indices]
    rotation = np.zeros((t, 3))
    translation = np.zeros((t, 3))
    scale = np.ones(t)
    for i in range(t):
        s, r, tr = _pos_fit(mean_lm, track.points[i], track.image_h, track.image_w)
        scale[i], rotation[i], translation[i] = s, r, tr
    return CoeffTimeline(
        alpha=np.zeros((t, model.n_alpha)),
        beta=np.zeros((t, model.n_beta)),
        rotation=rotation,
        translation=translation,
        scale=scale,
        fps=fps,
    )


# ---------------------------------------------------------------------------
# losses (torch core, numpy-friendly wrappers)


def _l2(x, dim=-1):
    """Euclidean norm with a zero subgradient at the origin."""
    sq = (x * x).sum(dim)
    positive = sq > 0
    safe = torch.where(positive, sq, torch.ones_like(sq))
    return torch.where(positive, torch.sqrt(safe), torch.zeros_like(sq))


def _laplacian(x):
    return x[:-2] - 2.0 * x[1:-1] + x[2:]


def tempo_loss_points(pred_landmarks, gt_landmarks, pose_vec, beta, lam: float = 0.2):
    """Temporal fitting loss on landmark tracks.

    pred_landmarks/gt_landmarks: (T, K, 2); pose_vec: (T, 7); beta: (T, n_beta).
    Sum over landmarks/frames of || delta_pred - delta_gt ||_2 plus
    lam * sum over interior frames of (||lap(pose)||_2 + ||lap(beta)||_2).
    Accepts torch tensors (differentiable) or numpy arrays.
    """
    if lam < 0:
        raise ValueError("lam must be >= 0")
    was_numpy = not torch.is_tensor(pred_landmarks)
    as_t = lambda a: torch.as_tensor(a, dtype=torch.float64)
    kp, kp_gt = map(as_t, (pred_landmarks, gt_landmarks))
    pv, bt = map(as_t, (pose_vec, beta))
    if kp.shape != kp_gt.shape or kp.ndim != 3:
        raise ValueError("landmark tracks must share a (T, K, 2) shape")
    if pv.shape[0] != kp.shape[0] or bt.shape[0] != kp.shape[0]:
        raise ValueError("pose/beta frame counts must match the landmark track")
    loss = kp.new_zeros(())
    if kp.shape[0] >= 2:
        delta = (kp[1:] - kp[:-1]) - (kp_gt[1:] - kp_gt[:-1])
        loss = loss + _l2(delta, dim=-1).sum()
    if kp.shape[0] >= 3:
        loss = loss + lam * (_l2(_laplacian(pv), dim=-1).sum()
                             + _l2(_laplacian(bt), dim=-1).sum())
    return float(loss.item()) if was_numpy else loss


class _LandmarkProjector:
    """Torch-side landmark synthesis + weak-perspective projection."""

    def __init__(self, model: MorphableModel, h: int, w: int, dtype=torch.float64):
        idx = model.landmark_indices
        rows = (idx[:, None] * 3 + np.arange(3)[None, :]).reshape(-1)
        self.mean = torch.as_tensor(model.mean_shape[rows].reshape(-1, 3), dtype=dtype)
        self.shape_basis = torch.as_tensor(model.shape_basis[rows], dtype=dtype)
        self.expr_basis = torch.as_tensor(model.expr_basis[rows], dtype=dtype)
        self.center = torch.tensor([w / 2.0, h / 2.0], dtype=dtype)
        self.k = idx.shape[0]

    def __call__(self, alpha, beta, rotation, translation, scale):
        """alpha (T, n_a), beta (T, n_b), rotation (T, 3), translation (T, 3),
        scale (T,) -> landmark pixels (T, K, 2)."""
        t = alpha.shape[0]
        flat = (alpha @ self.shape_basis.T) + (beta @ self.expr_basis.T)
        verts = self.mean[None] + flat.reshape(t, self.k, 3)
        rot = euler_matrices_torch(rotation)
        posed = torch.einsum("tij,tkj->tki", rot, verts) + translation[:, None, :]
        return scale[:, None, None] * posed[..., :2] + self.center


def euler_matrices_torch(angles):
    """Batched R = Rz @ Ry @ Rx from (T, 3) Euler angles, differentiable."""
    ax, ay, az = angles[:, 0], angles[:, 1], angles[:, 2]
    ca, sa = torch.cos(ax), torch.sin(ax)
    cb, sb = torch.cos(ay), torch.sin(ay)
    cc, sc = torch.cos(az), torch.sin(az)
    row0 = torch.stack([cc * cb, cc * sb * sa - sc * ca, cc * sb * ca + sc * sa], dim=1)
    row1 = torch.stack([sc * cb, sc * sb * sa + cc * ca, sc * sb * ca - cc * sa], dim=1)
    row2 = torch.stack([-sb, cb * sa, cb * ca], dim=1)
    return torch.stack([row0, row1, row2], dim=1)


def tempo_loss(timeline: CoeffTimeline, track: LandmarkTrack, model: MorphableModel,
               lam: float = 0.2) -> float:
    """Temporal loss of a timeline against an observed landmark track."""
    if len(timeline) != len(track):
        raise ValueError("timeline and track frame counts differ")
    proj = _LandmarkProjector(model, track.image_h, track.image_w)
    as_t = lambda a: torch.as_tensor(a, dtype=torch.float64)
    kp = proj(as_t(timeline.alpha), as_t(timeline.beta), as_t(timeline.rotation),
              as_t(timeline.translation), as_t(timeline.scale))
    return float(tempo_loss_points(kp, as_t(track.points), as_t(timeline.pose_vector()),
                                   as_t(timeline.beta), lam).item())


def reg_loss(timeline: CoeffTimeline, init: CoeffTimeline) -> float:
    """Prior distance to the initialization: per-frame ||alpha_t - mean(alpha_init)||
    + ||beta_t - beta_init_t|| + ||pose_t - pose_init_t||, summed over frames."""
    return float(_reg_loss_torch(
        torch.as_tensor(timeline.alpha), torch.as_tensor(timeline.beta),
        torch.as_tensor(timeline.pose_vector()),
        torch.as_tensor(init.mean_alpha), torch.as_tensor(init.beta),
        torch.as_tensor(init.pose_vector())).item())


def _reg_loss_torch(alpha, beta, pose_vec, init_mean_alpha, init_beta, init_pose_vec):
    if alpha.shape[0] != init_beta.shape[0] or beta.shape != init_beta.shape \
            or pose_vec.shape != init_pose_vec.shape:
        raise ValueError("timeline and init disagree on shapes")
    return (_l2(alpha - init_mean_alpha[None], dim=-1).sum()
            + _l2(beta - init_beta, dim=-1).sum()
            + _l2(pose_vec - init_pose_vec, dim=-1).sum())


@dataclasses.dataclass
class FitOptions:
    iters: int = 200
    step: float = 1e-2
    lam: float = 0.2
    w_reg: float = 1e-3

    def __post_init__(self):
        if self.iters < 0:
            raise ValueError("iters must be >= 0")
        if self.lam < 0:
            raise ValueError("lam must be >= 0")
        if self.w_reg < 0:
            raise ValueError("w_reg must be >= 0")


def optimize_coeffs(init: CoeffTimeline, track: LandmarkTrack, model: MorphableModel,
                    opts: FitOptions = None):
    """Refine a timeline against a landmark track with Adam.

    Minimizes tempo + w_reg * reg starting from `init`. Returns
    (refined CoeffTimeline, per-iteration loss trace). iters=0 or step=0
    returns the init unchanged (empty/flat trace).
    """
    opts = opts or FitOptions()
    if len(init) != len(track):
        raise ValueError("init and track frame counts differ")
    if opts.iters == 0:
        return init.copy(), np.zeros(0)
    proj = _LandmarkProjector(model, track.image_h, track.image_w)
    gt = torch.as_tensor(track.points, dtype=torch.float64)
    params = {
        "alpha": torch.tensor(init.alpha, dtype=torch.float64, requires_grad=True),
        "beta": torch.tensor(init.beta, dtype=torch.float64, requires_grad=True),
        "rotation": torch.tensor(init.rotation, dtype=torch.float64, requires_grad=True),
        "translation": torch.tensor(init.translation, dtype=torch.float64, requires_grad=True),
        "scale": torch.tensor(init.scale, dtype=torch.float64, requires_grad=True),
    }
    init_mean_alpha = torch.as_tensor(init.mean_alpha)
    init_beta = torch.as_tensor(init.beta)
    init_pose = torch.as_tensor(init.pose_vector())
    optimizer = torch.optim.Adam(params.values(), lr=opts.step)
    trace = np.zeros(opts.iters)
    for it in range(opts.iters):
        optimizer.zero_grad()
        kp = proj(params["alpha"], params["beta"], params["rotation"],
                  params["translation"], params["scale"])
        pose_vec = torch.cat([params["rotation"], params["translation"],
                              params["scale"][:, None]], dim=1)
        loss = tempo_loss_points(kp, gt, pose_vec, params["beta"], opts.lam)
        loss = loss + opts.w_reg * _reg_loss_torch(
            params["alpha"], params["beta"], pose_vec,
            init_mean_alpha, init_beta, init_pose)
        value = float(loss.item())
        if not np.isfinite(value):
            raise NumericsError(f"non-finite fitting loss {value} at iteration {it}")
        trace[it] = value
        loss.backward()
        optimizer.step()
    with torch.no_grad():
        scale = params["scale"].numpy().copy()
        if (scale <= 0).any():
            raise NumericsError("fitting drove a frame scale non-positive; "
                                "lower the step size")
        out = CoeffTimeline(
            params["alpha"].numpy().copy(), params["beta"].numpy().copy(),
            params["rotation"].numpy().copy(), params["translation"].numpy().copy(),
            scale, init.fps)
    return out, trace
