"""Linear morphable face model, weak-perspective posing and PNCC rasterization.

Conventions used across the package:
  * vertices are (L, 3) float64 arrays in canonical units; x grows to the
    image right, y grows toward the chin, z grows toward the camera
  * flat layout of a vertex array is [x0, y0, z0, x1, y1, z1, ...]
  * pixel (row i, col j) is sampled at its center (x = j + 0.5, y = i + 0.5)
  * projection of a posed point is (scale * x + W/2, scale * y + H/2);
    larger posed z is nearer the camera
"""

from __future__ import annotations

import dataclasses
import json

import numpy as np

from .errors import DataError

MODEL_FORMAT_VERSION = 1


def euler_matrix(angles):
    """Rotation matrix R = Rz @ Ry @ Rx for intrinsic angles (ax, ay, az)."""
    ax, ay, az = [float(a) for a in angles]
    ca, sa = np.cos(ax), np.sin(ax)
    cb, sb = np.cos(ay), np.sin(ay)
    cc, sc = np.cos(az), np.sin(az)
    rx = np.array([[1, 0, 0], [0, ca, -sa], [0, sa, ca]])
    ry = np.array([[cb, 0, sb], [0, 1, 0], [-sb, 0, cb]])
    rz = np.array([[cc, -sc, 0], [sc, cc, 0], [0, 0, 1]])
    return rz @ ry @ rx


@dataclasses.dataclass(frozen=True)
class PoseParams:
    """Weak-perspective pose: rotation (Euler, radians), translation, scale."""

    rotation: np.ndarray
    translation: np.ndarray
    scale: float = 1.0

    def __post_init__(self):
        rot = np.asarray(self.rotation, dtype=np.float64).reshape(3)
        tra = np.asarray(self.translation, dtype=np.float64).reshape(3)
        object.__setattr__(self, "rotation", rot)
        object.__setattr__(self, "translation", tra)
        object.__setattr__(self, "scale", float(self.scale))
        if not (np.isfinite(rot).all() and np.isfinite(tra).all() and np.isfinite(self.scale)):
            raise ValueError("pose parameters must be finite")
        if self.scale <= 0:
            raise ValueError(f"pose scale must be > 0, got {self.scale}")

    def matrix(self):
        return euler_matrix(self.rotation)

    @staticmethod
    def identity():
        return PoseParams(np.zeros(3), np.zeros(3), 1.0)


@dataclasses.dataclass
class MorphableModel:
    """Linear 3D face model plus the index sets the pipeline needs.

    mean_shape: (3L,) flat mean vertices, centered at the origin.
    shape_basis: (3L, n_alpha) identity modes.
    expr_basis: (3L, n_beta) expression modes; column 0 is the jaw-open mode
        for models built by make_toy_model.
    topology: (F, 3) int vertex indices per triangle.
    landmark_indices: (K,) vertex ids of the sparse landmark set; slots 0 and 1
        are the left/right eye centers (used for inter-ocular normalization).
    lower_face_indices / upper_face_indices: disjoint partition of [0, L).
    lip_region_indices: subset of lower_face_indices around the mouth.
    inner_lip_pair: (2,) vertex ids (upper inner lip, lower inner lip).
    """

    mean_shape: np.ndarray
    shape_basis: np.ndarray
    expr_basis: np.ndarray
    topology: np.ndarray
    landmark_indices: np.ndarray
    lower_face_indices: np.ndarray
    upper_face_indices: np.ndarray
    lip_region_indices: np.ndarray
    inner_lip_pair: np.ndarray

    def __post_init__(self):
        self.mean_shape = np.asarray(self.mean_shape, dtype=np.float64).reshape(-1)
        self.shape_basis = np.asarray(self.shape_basis, dtype=np.float64)
        self.expr_basis = np.asarray(self.expr_basis, dtype=np.float64)
        self.topology = np.asarray(self.topology, dtype=np.int64)
        for name in ("landmark_indices", "lower_face_indices", "upper_face_indices",
                     "lip_region_indices", "inner_lip_pair"):
            setattr(self, name, np.asarray(getattr(self, name), dtype=np.int64).reshape(-1))
        self.validate()

    def validate(self):
        three_l = self.mean_shape.shape[0]
        if three_l % 3 != 0 or three_l == 0:
            raise ValueError(f"mean_shape length must be a positive multiple of 3, got {three_l}")
        n = self.n_vertices
        if self.shape_basis.shape[0] != three_l or self.shape_basis.ndim != 2:
            raise ValueError("shape_basis must be (3L, n_alpha)")
        if self.expr_basis.shape[0] != three_l or self.expr_basis.ndim != 2:
            raise ValueError("expr_basis must be (3L, n_beta)")
        if self.topology.ndim != 2 or self.topology.shape[1] != 3:
            raise ValueError("topology must be (F, 3)")
        for name in ("topology", "landmark_indices", "lower_face_indices",
                     "upper_face_indices", "lip_region_indices", "inner_lip_pair"):
            idx = getattr(self, name)
            if idx.size and (idx.min() < 0 or idx.max() >= n):
                raise ValueError(f"{name} contains out-of-range vertex ids")
        lower = set(self.lower_face_indices.tolist())
        upper = set(self.upper_face_indices.tolist())
        if lower & upper:
            raise ValueError("lower/upper face index sets overlap")
        if lower | upper != set(range(n)):
            raise ValueError("lower/upper face index sets must partition the vertex set")
        if not set(self.lip_region_indices.tolist()) <= lower:
            raise ValueError("lip region must lie inside the lower face")
        if self.inner_lip_pair.shape != (2,):
            raise ValueError("inner_lip_pair must hold exactly two vertex ids")
        centroid = self.mean_shape.reshape(n, 3).mean(axis=0)
        if np.abs(centroid).max() > 1e-6:
            raise ValueError("mean_shape must be centered at the origin")

    @property
    def n_vertices(self) -> int:
        return self.mean_shape.shape[0] // 3

    @property
    def n_alpha(self) -> int:
        return self.shape_basis.shape[1]

    @property
    def n_beta(self) -> int:
        return self.expr_basis.shape[1]

    def canonical_bounds(self):
        """Per-axis (min, max) of the mean shape; the PNCC normalization box."""
        verts = self.mean_shape.reshape(-1, 3)
        return verts.min(axis=0), verts.max(axis=0)

    def normalize_canonical(self, verts):
        """Map canonical coordinates into [0, 1]^3 using the mean-shape box."""
        lo, hi = self.canonical_bounds()
        span = np.where(hi - lo < 1e-12, 1.0, hi - lo)
        ncc = (np.asarray(verts, dtype=np.float64) - lo) / span
        return np.clip(ncc, 0.0, 1.0)


def synthesize_vertices(model: MorphableModel, alpha, beta):
    """Vertices of the linear model: mean + shape_basis@alpha + expr_basis@beta.

    alpha: (n_alpha,), beta: (n_beta,). Returns (L, 3) float64.
    """
    alpha = np.asarray(alpha, dtype=np.float64).reshape(-1)
    beta = np.asarray(beta, dtype=np.float64).reshape(-1)
    if alpha.shape[0] != model.n_alpha:
        raise ValueError(f"alpha has {alpha.shape[0]} entries, model expects {model.n_alpha}")
    if beta.shape[0] != model.n_beta:
        raise ValueError(f"beta has {beta.shape[0]} entries, model expects {model.n_beta}")
    flat = model.mean_shape + model.shape_basis @ alpha + model.expr_basis @ beta
    return flat.reshape(-1, 3)


def project_points(posed_xy, scale, h, w):
    """Pixel coordinates of posed xy: scale * xy + image center."""
    center = np.array([w / 2.0, h / 2.0])
    return scale * np.asarray(posed_xy, dtype=np.float64) + center


def pose_and_project(verts, pose: PoseParams, h: int, w: int):
    """Apply a rigid pose and the weak-perspective pixel mapping.

    Returns (posed (L, 3) canonical units, points (L, 2) pixel coords).
    """
    verts = np.asarray(verts, dtype=np.float64)
    if verts.ndim != 2 or verts.shape[1] != 3:
        raise ValueError("verts must be (L, 3)")
    posed = verts @ pose.matrix().T + pose.translation
    points = project_points(posed[:, :2], pose.scale, h, w)
    return posed, points


def rasterize_attributes(points, depth, attrs, triangles, h, w, background=0.0):
    """Z-buffered barycentric rasterization of per-vertex attributes.

    points: (L, 2) pixel coords; depth: (L,), larger is nearer; attrs: (L, A).
    Degenerate triangles (|2*area| < 1e-12) are skipped. A strictly nearer
    triangle replaces the buffer, so on exactly equal depth the earlier
    triangle in `triangles` keeps the pixel.

    Returns (image (A, h, w), coverage (h, w) bool). Uncovered pixels hold
    `background` exactly.
    """
    points = np.asarray(points, dtype=np.float64)
    depth = np.asarray(depth, dtype=np.float64)
    attrs = np.asarray(attrs, dtype=np.float64)
    if attrs.ndim == 1:
        attrs = attrs[:, None]
    n_attr = attrs.shape[1]
    image = np.full((n_attr, h, w), background, dtype=np.float64)
    zbuf = np.full((h, w), -np.inf)
    coverage = np.zeros((h, w), dtype=bool)

    for tri in triangles:
        p0, p1, p2 = points[tri[0]], points[tri[1]], points[tri[2]]
        if not np.isfinite([p0, p1, p2]).all():
            continue
        area2 = (p1[0] - p0[0]) * (p2[1] - p0[1]) - (p1[1] - p0[1]) * (p2[0] - p0[0])
        if abs(area2) < 1e-12:
            continue
        xs = (p0[0], p1[0], p2[0])
        ys = (p0[1], p1[1], p2[1])
        # pixel centers are at integer + 0.5
        x0 = max(int(np.ceil(min(xs) - 0.5)), 0)
        x1 = min(int(np.floor(max(xs) - 0.5)), w - 1)
        y0 = max(int(np.ceil(min(ys) - 0.5)), 0)
        y1 = min(int(np.floor(max(ys) - 0.5)), h - 1)
        if x0 > x1 or y0 > y1:
            continue
        px = np.arange(x0, x1 + 1) + 0.5
        py = np.arange(y0, y1 + 1) + 0.5
        gx, gy = np.meshgrid(px, py)
        l0 = ((p2[0] - p1[0]) * (gy - p1[1]) - (p2[1] - p1[1]) * (gx - p1[0])) / area2
        l1 = ((p0[0] - p2[0]) * (gy - p2[1]) - (p0[1] - p2[1]) * (gx - p2[0])) / area2
        l2 = 1.0 - l0 - l1
        inside = (l0 >= -1e-9) & (l1 >= -1e-9) & (l2 >= -1e-9)
        if not inside.any():
            continue
        z = l0 * depth[tri[0]] + l1 * depth[tri[1]] + l2 * depth[tri[2]]
        zwin = zbuf[y0:y1 + 1, x0:x1 + 1]
        win = inside & (z > zwin)
        if not win.any():
            continue
        zwin[win] = z[win]
        vals = (l0[win][:, None] * attrs[tri[0]]
                + l1[win][:, None] * attrs[tri[1]]
                + l2[win][:, None] * attrs[tri[2]])
        imwin = image[:, y0:y1 + 1, x0:x1 + 1]
        imwin[:, win] = vals.T
        coverage[y0:y1 + 1, x0:x1 + 1][win] = True
    return image, coverage


def render_pncc(posed, canonical, model: MorphableModel, h: int, w: int, scale: float = 1.0):
    """Rasterize normalized canonical coordinates at the posed projection.

    posed: (L, 3) rigidly posed vertices; canonical: (L, 3) the same mesh
    before posing (expression included). Covered pixels hold the canonical
    coordinates normalized by the mean-shape bounding box; background is
    exactly (0, 0, 0). Returns (3, h, w) in [0, 1].
    """
    posed = np.asarray(posed, dtype=np.float64)
    canonical = np.asarray(canonical, dtype=np.float64)
    if posed.shape != (model.n_vertices, 3) or canonical.shape != (model.n_vertices, 3):
        raise ValueError("posed/canonical must be (L, 3) for this model")
    ncc = model.normalize_canonical(canonical)
    points = project_points(posed[:, :2], scale, h, w)
    image, _ = rasterize_attributes(points, posed[:, 2], ncc, model.topology, h, w)
    return np.clip(image, 0.0, 1.0)


def render_pncc_with_coverage(posed, canonical, model, h, w, scale=1.0):
    """render_pncc that also returns the coverage mask (used by invariant checks)."""
    ncc = model.normalize_canonical(canonical)
    points = project_points(np.asarray(posed, dtype=np.float64)[:, :2], scale, h, w)
    image, coverage = rasterize_attributes(points, np.asarray(posed)[:, 2], ncc,
                                           model.topology, h, w)
    return np.clip(image, 0.0, 1.0), coverage


def mouth_opening_size(verts, model: MorphableModel) -> float:
    """Euclidean distance between the inner-lip vertex pair on canonical verts.

    Pose-free by construction: measure on canonical (unposed) vertices.
    """
    verts = np.asarray(verts, dtype=np.float64)
    a, b = model.inner_lip_pair
    return float(np.linalg.norm(verts[a] - verts[b]))


# ---------------------------------------------------------------------------
# toy model generator


def _smooth_field(rng, grid_xy, envelope, rms):
    """Random smooth per-vertex displacement field, rms-scaled."""
    x, y = grid_xy[:, 0], grid_xy[:, 1]
    disp = np.zeros((grid_xy.shape[0], 3))
    for axis in range(3):
        f = np.zeros_like(x)
        for _ in range(3):
            kx, ky = rng.uniform(0.5, 3.0, size=2)
            phx, phy = rng.uniform(0, 2 * np.pi, size=2)
            f = f + rng.normal() * np.sin(kx * x + phx) * np.cos(ky * y + phy)
        disp[:, axis] = f
    disp *= envelope[:, None]
    scale = np.sqrt((disp ** 2).mean())
    if scale > 1e-12:
        disp *= rms / scale
    return disp


def make_toy_model(seed: int = 0, n_rows: int = 20, n_cols: int = 10,
                   n_alpha: int = 8, n_beta: int = 8) -> MorphableModel:
    """Deterministic synthetic face model on an n_rows x n_cols dome grid.

    Vertex ids are row-major (id = row * n_cols + col). Rows run from the
    forehead (y = -0.95) to the chin (y = +0.95). Expression column 0 is a
    jaw-open mode that only moves vertices below the mouth line; the other
    columns are smooth random modes weighted toward the upper/middle face.
    """
    if n_rows < 8 or n_cols < 6:
        raise ValueError("toy model needs at least an 8x6 grid")
    rng = np.random.default_rng(seed)
    ys = np.linspace(-0.95, 0.95, n_rows)
    us = np.linspace(-1.0, 1.0, n_cols)
    verts = np.zeros((n_rows * n_cols, 3))
    for i, y in enumerate(ys):
        half_w = 0.8 * np.sqrt(max(1.0 - (y / 1.05) ** 2, 0.05))
        for j, u in enumerate(us):
            x = u * half_w
            dome = 1.0 - (x / 0.9) ** 2 - (y / 1.1) ** 2
            z = 0.55 * np.sqrt(max(dome, 0.0))
            z += 0.18 * np.exp(-((x ** 2) + (y - 0.1) ** 2) / 0.02)  # nose
            verts[i * n_cols + j] = (x, y, z)
    verts -= verts.mean(axis=0)

    tris = []
    for i in range(n_rows - 1):
        for j in range(n_cols - 1):
            a = i * n_cols + j
            b = i * n_cols + j + 1
            c = (i + 1) * n_cols + j
            d = (i + 1) * n_cols + j + 1
            tris.append((a, c, b))
            tris.append((b, c, d))
    topology = np.array(tris, dtype=np.int64)

    # index sets keyed off vertex y after centering
    y_v = verts[:, 1]
    lower = np.where(y_v > 0.30)[0]
    upper = np.where(y_v <= 0.30)[0]

    def vid(row, col):
        return row * n_cols + col

    # mouth rows: pick the two rows whose y is closest to 0.45 and 0.55
    row_upper_lip = int(np.argmin(np.abs(ys - 0.45)))
    row_lower_lip = int(np.argmin(np.abs(ys - 0.55)))
    mid_cols = range(n_cols // 2 - 2, n_cols // 2 + 2)
    lip_region = np.array(sorted(vid(r, c) for r in (row_upper_lip, row_lower_lip)
                                 for c in mid_cols), dtype=np.int64)
    inner_lip_pair = np.array([vid(row_upper_lip, n_cols // 2),
                               vid(row_lower_lip, n_cols // 2)], dtype=np.int64)
    if not set(lip_region.tolist()) <= set(lower.tolist()):
        raise ValueError("toy grid too coarse: lip rows fell above the mouth line")

    if row_upper_lip == row_lower_lip:
        raise ValueError("toy grid too coarse to separate the inner lip rows")
    row_eye = int(np.argmin(np.abs(ys - (-0.35))))
    row_brow = max(row_eye - 2, 0)
    row_nose0 = int(np.argmin(np.abs(ys - (-0.05))))
    # 68 landmarks on the default 20x10 grid; coarser grids dedupe to fewer
    landmark_ids = [vid(row_eye, 2), vid(row_eye, n_cols - 3)]  # slots 0/1: eye centers
    for r in range(1, n_rows - 1, 2):  # face outline
        landmark_ids.append(vid(r, 0))
        landmark_ids.append(vid(r, n_cols - 1))
    landmark_ids.extend(vid(n_rows - 1, c) for c in range(1, n_cols - 1, 2))  # chin line
    landmark_ids.extend(vid(0, c) for c in (2, n_cols // 2 - 1, n_cols // 2, n_cols - 3))
    landmark_ids.extend(vid(row_brow, c) for c in range(1, n_cols - 1, 2))  # brows
    landmark_ids.extend(vid(row_eye, c) for c in (1, 3, n_cols - 4, n_cols - 2))
    for r in (row_nose0, row_nose0 + 1, row_nose0 + 2):  # nose bridge and base
        landmark_ids.extend(vid(r, c) for c in (n_cols // 2 - 1, n_cols // 2))
    landmark_ids.extend([vid(row_nose0 + 2, n_cols // 2 - 2),  # nose wings
                         vid(row_nose0 + 2, n_cols // 2 + 1)])
    cheek_rows = (min(row_nose0 - 1, n_rows - 1), min(row_nose0 + 2, n_rows - 1))
    landmark_ids.extend(vid(r, c) for r in cheek_rows for c in (1, n_cols - 2))
    mouth_rows = sorted({row_upper_lip, row_lower_lip, row_upper_lip - 1, row_lower_lip + 1})
    for r in mouth_rows:  # mouth ring, includes the lip region
        landmark_ids.extend(vid(r, c) for c in range(n_cols // 2 - 2, n_cols // 2 + 2))
    for r in (row_upper_lip, row_lower_lip):  # mouth corners
        landmark_ids.extend([vid(r, n_cols // 2 - 3), vid(r, n_cols // 2 + 2)])
    seen = set()
    landmark_indices = np.array([v for v in landmark_ids
                                 if not (v in seen or seen.add(v))], dtype=np.int64)

    grid_xy = verts[:, :2]

    # identity modes: smooth fields over the whole face
    shape_cols = []
    for _ in range(n_alpha):
        shape_cols.append(_smooth_field(rng, grid_xy, np.ones(len(verts)), 0.035).reshape(-1))
    shape_basis = np.stack(shape_cols, axis=1)

    # expression 0: jaw opening, hinged at the mouth line
    jaw = np.zeros((len(verts), 3))
    hinge = np.maximum(0.0, y_v - 0.40)
    jaw[:, 1] = 0.8 * hinge
    jaw[:, 2] = -0.25 * hinge
    expr_cols = [jaw.reshape(-1)]
    upper_env = np.exp(-((y_v + 0.25) / 0.45) ** 2)  # mid/upper-face weighting
    for _ in range(n_beta - 1):
        expr_cols.append(_smooth_field(rng, grid_xy, upper_env, 0.04).reshape(-1))
    expr_basis = np.stack(expr_cols, axis=1)

    return MorphableModel(
        mean_shape=verts.reshape(-1),
        shape_basis=shape_basis,
        expr_basis=expr_basis,
        topology=topology,
        landmark_indices=landmark_indices,
        lower_face_indices=lower,
        upper_face_indices=upper,
        lip_region_indices=lip_region,
        inner_lip_pair=inner_lip_pair,
    )


# ---------------------------------------------------------------------------
# model file container (npz with a version field)


def save_model(path, model: MorphableModel):
    """Write the model to an npz container. Keys are the field names plus
    format_version; see load_model for the reverse."""
    np.savez(
        path,
        format_version=np.int64(MODEL_FORMAT_VERSION),
        mean_shape=model.mean_shape,
        shape_basis=model.shape_basis,
        expr_basis=model.expr_basis,
        topology=model.topology,
        landmark_indices=model.landmark_indices,
        lower_face_indices=model.lower_face_indices,
        upper_face_indices=model.upper_face_indices,
        lip_region_indices=model.lip_region_indices,
        inner_lip_pair=model.inner_lip_pair,
    )


def load_model(path) -> MorphableModel:
    try:
        data = np.load(path)
    except (OSError, ValueError) as exc:
        raise DataError(f"cannot read model file {path}: {exc}") from exc
    required = ["format_version", "mean_shape", "shape_basis", "expr_basis", "topology",
                "landmark_indices", "lower_face_indices", "upper_face_indices",
                "lip_region_indices", "inner_lip_pair"]
    missing = [k for k in required if k not in data]
    if missing:
        raise DataError(f"model file {path} is missing keys {missing}")
    version = int(data["format_version"])
    if version != MODEL_FORMAT_VERSION:
        raise DataError(f"model file {path} has format_version {version}, "
                        f"expected {MODEL_FORMAT_VERSION}")
    try:
        return MorphableModel(**{k: data[k] for k in required[1:]})
    except ValueError as exc:
        raise DataError(f"model file {path} is inconsistent: {exc}") from exc
