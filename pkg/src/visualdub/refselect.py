"""Reference frame selection for the texture renderer.

All frame indices here are 1-based and live in [1, T]; callers subtract 1
when indexing arrays. Training-time selection is stochastic (seeded);
inference-time selection is fully deterministic.
"""

from __future__ import annotations

import dataclasses

import numpy as np

from .morphable_model import MorphableModel, mouth_opening_size


def round_half_up(x):
    """Round to the nearest integer, halves away from zero-wards (0.5 -> 1)."""
    return int(np.floor(x + 0.5))


@dataclasses.dataclass(frozen=True)
class ReferenceSet:
    """Selected reference frame ids: face_indices sorted ascending, lip_indices
    in selection order. Both 1-based."""

    face_indices: tuple
    lip_indices: tuple

    def __post_init__(self):
        object.__setattr__(self, "face_indices", tuple(int(i) for i in self.face_indices))
        object.__setattr__(self, "lip_indices", tuple(int(i) for i in self.lip_indices))
        if list(self.face_indices) != sorted(self.face_indices):
            raise ValueError("face_indices must be sorted ascending")
        for idx in self.face_indices + self.lip_indices:
            if idx < 1:
                raise ValueError(f"reference index {idx} is not 1-based")


def _nudge_dedupe(values, t_total):
    """Resolve duplicate rounded indices by moving each duplicate to the nearest
    unused index in [1, t_total] (ties prefer the smaller index). Duplicates are
    kept only when every index is already used."""
    used = set()
    out = []
    for v in values:
        v = int(min(max(v, 1), t_total))
        if v not in used:
            used.add(v)
            out.append(v)
            continue
        best = None
        for dist in range(1, t_total):
            for cand in (v - dist, v + dist):
                if 1 <= cand <= t_total and cand not in used:
                    best = cand
                    break
            if best is not None:
                break
        if best is None:
            out.append(v)  # t_total < len(values): nothing unused remains
        else:
            used.add(best)
            out.append(best)
    return out


def training_face_indices(frame_index: int, num_frames: int, n_face: int = 5):
    """Evenly spaced face references from the window [i - 2*N_f, i + 2*N_f]."""
    if not (1 <= frame_index <= num_frames):
        raise ValueError(f"frame_index {frame_index} outside [1, {num_frames}]")
    if n_face < 1:
        raise ValueError("n_face must be >= 1")
    low = max(1, frame_index - 2 * n_face)
    high = min(num_frames, frame_index + 2 * n_face)
    raw = np.linspace(low, high, n_face)
    rounded = [round_half_up(v) for v in raw]
    return sorted(_nudge_dedupe(rounded, num_frames))


def training_lip_indices(num_frames: int, n_lip: int, rng: np.random.Generator):
    """Uniform random lip references; without replacement when T >= N_l."""
    if num_frames >= n_lip:
        picks = rng.choice(num_frames, size=n_lip, replace=False)
    else:
        picks = rng.integers(0, num_frames, size=n_lip)
    return [int(p) + 1 for p in picks]


def training_strategy(frame_index: int, num_frames: int, n_face: int = 5,
                      n_lip: int = 5, seed=0) -> ReferenceSet:
    """Reference selection used while training the renderer.

    seed: int seed or a numpy Generator (reused across calls by the trainer
    so successive steps draw fresh lip sets).
    """
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    face = training_face_indices(frame_index, num_frames, n_face)
    lip = training_lip_indices(num_frames, n_lip, rng)
    return ReferenceSet(face_indices=tuple(face), lip_indices=tuple(lip))


def inference_face_indices(frame_index: int, num_frames: int, n_face: int = 5):
    """N_f consecutive frames centered on i, shifted to stay inside [1, T]."""
    if not (1 <= frame_index <= num_frames):
        raise ValueError(f"frame_index {frame_index} outside [1, {num_frames}]")
    if n_face < 1:
        raise ValueError("n_face must be >= 1")
    if num_frames < n_face:
        return list(range(1, num_frames + 1))
    start = frame_index - n_face // 2
    start = min(max(start, 1), num_frames - n_face + 1)
    return list(range(start, start + n_face))


def mouth_openings(canon_vertices_seq, model: MorphableModel) -> np.ndarray:
    """Per-frame inner-lip distance over a (T, L, 3) canonical vertex sequence."""
    seq = np.asarray(canon_vertices_seq, dtype=np.float64)
    if seq.ndim != 3 or seq.shape[1] != model.n_vertices or seq.shape[2] != 3:
        raise ValueError("canon_vertices_seq must be (T, L, 3) for this model")
    return np.array([mouth_opening_size(v, model) for v in seq])


def lip_argsort(canon_vertices_seq, model: MorphableModel):
    """Frame ids (1-based) stably sorted by mouth opening, ascending."""
    openings = mouth_openings(canon_vertices_seq, model)
    order = np.argsort(openings, kind="stable")
    return [int(i) + 1 for i in order]


def inference_lip_indices(sorted_frame_ids, n_lip: int = 25):
    """Pick round(linspace(1, T, N_l)) positions into the opening-sorted order,
    deduplicated preserving order. Independent of the target frame."""
    t_total = len(sorted_frame_ids)
    if t_total == 0:
        raise ValueError("empty frame sequence")
    if n_lip < 1:
        raise ValueError("n_lip must be >= 1")
    positions = [round_half_up(v) for v in np.linspace(1, t_total, n_lip)]
    out = []
    seen = set()
    for pos in positions:
        frame = sorted_frame_ids[min(max(pos, 1), t_total) - 1]
        if frame not in seen:
            seen.add(frame)
            out.append(frame)
    return out


def inference_strategy(frame_index: int, canon_vertices_seq, model: MorphableModel,
                       n_face: int = 5, n_lip: int = 25) -> ReferenceSet:
    """Deterministic reference selection for dubbing.

    Face references: a consecutive window around the target frame. Lip
    references: frames covering the whole range of mouth openings, shared by
    every target frame of the sequence.
    """
    num_frames = len(canon_vertices_seq)
    face = inference_face_indices(frame_index, num_frames, n_face)
    lip = inference_lip_indices(lip_argsort(canon_vertices_seq, model), n_lip)
    return ReferenceSet(face_indices=tuple(face), lip_indices=tuple(lip))
