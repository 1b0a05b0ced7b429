"""Stage 1: stylized audio features to lower-face vertex sequences.

The generator cross-attends the audio timeline onto the speaker's template
code, refines with a small self-attention stack, and decodes per-frame
vertex offsets from the template. Only the lower face is taken from the
generator; the upper face always passes through from fitted geometry.
"""

from __future__ import annotations

import numpy as np
import torch
from torch import nn
import torch.nn.functional as F

from .audio_style import AttentionLayer, AudioEncoder, StyleEncoder, extract_style, \
    inject_style
from .morphable_model import MorphableModel, pose_and_project, render_pncc, \
    synthesize_vertices


class GeometryGenerator(nn.Module):
    """Audio-feature sequence -> per-frame vertices as offsets from a template.

    forward(audio_features (T, D), template_code (D,), template_vertices (L, 3))
    returns (T, L, 3). The cross-attention block keeps a plain residual (no
    norm) so its single-key behavior stays closed-form; each self-attention
    block is residual + LayerNorm.
    """

    def __init__(self, dim: int, n_vertices: int, n_self: int = 4):
        super().__init__()
        self.dim = dim
        self.n_vertices = n_vertices
        self.cross = AttentionLayer(dim)
        self.self_layers = nn.ModuleList(AttentionLayer(dim) for _ in range(n_self))
        self.self_norms = nn.ModuleList(nn.LayerNorm(dim) for _ in range(n_self))
        self.dec_fc1 = nn.Linear(dim, 2 * dim)
        self.dec_fc2 = nn.Linear(2 * dim, 3 * n_vertices)
        # start near the template: tiny initial offsets
        with torch.no_grad():
            self.dec_fc2.weight.mul_(0.01)
            self.dec_fc2.bias.zero_()

    def forward(self, audio_features, template_code, template_vertices):
        if audio_features.ndim != 2 or audio_features.shape[1] != self.dim:
            raise ValueError(f"audio_features must be (T, {self.dim})")
        tmp = template_code.reshape(1, self.dim)
        x = audio_features + self.cross(audio_features, tmp, tmp)
        for layer, norm in zip(self.self_layers, self.self_norms):
            x = norm(x + layer(x, x, x))
        offsets = self.dec_fc2(F.gelu(self.dec_fc1(x)))
        t = offsets.shape[0]
        verts = torch.as_tensor(template_vertices, dtype=offsets.dtype)
        if verts.shape != (self.n_vertices, 3):
            raise ValueError(f"template_vertices must be ({self.n_vertices}, 3)")
        return verts[None] + offsets.reshape(t, self.n_vertices, 3)


def generate_target_vertices(audio_features, template_code, template_vertices,
                             generator: GeometryGenerator):
    """Functional wrapper over GeometryGenerator.forward."""
    return generator(audio_features, template_code, template_vertices)


def merge_lower_upper(vtx_generated, vtx_reference, model: MorphableModel):
    """Composite vertices: lower face from the generator, upper face from the
    reference geometry. Upper-face rows are copied through bitwise."""
    gen = np.asarray(vtx_generated, dtype=np.float64)
    ref = np.asarray(vtx_reference, dtype=np.float64)
    if gen.shape != ref.shape:
        raise ValueError("generated and reference vertices must share a shape")
    if gen.shape[-2] != model.n_vertices or gen.shape[-1] != 3:
        raise ValueError("vertex arrays must be (..., L, 3) for this model")
    out = np.empty_like(ref)
    out[..., model.upper_face_indices, :] = ref[..., model.upper_face_indices, :]
    out[..., model.lower_face_indices, :] = gen[..., model.lower_face_indices, :]
    return out


def build_target_geometry(merged_seq, poses, model: MorphableModel, h: int, w: int):
    """Render one geometry image per frame of a merged vertex sequence.

    merged_seq: (T, L, 3) canonical vertices; poses: sequence of PoseParams.
    Returns (T, 3, h, w).
    """
    merged_seq = np.asarray(merged_seq, dtype=np.float64)
    if merged_seq.ndim != 3 or len(poses) != merged_seq.shape[0]:
        raise ValueError("merged_seq must be (T, L, 3) with one pose per frame")
    maps = np.zeros((merged_seq.shape[0], 3, h, w))
    for t, (verts, pose) in enumerate(zip(merged_seq, poses)):
        posed, _ = pose_and_project(verts, pose, h, w)
        maps[t] = render_pncc(posed, verts, model, h, w, scale=pose.scale)
    return maps


def stage1_loss(pred_seq, gt_seq, model: MorphableModel, delta_weight: float = 0.1):
    """Lower-face reconstruction loss.

    Mean squared error over lower-face coordinates, plus delta_weight times
    the mean squared error of their frame-to-frame deltas against the target
    deltas. pred_seq/gt_seq: (T, L, 3), torch tensors or numpy arrays.
    """
    was_numpy = not torch.is_tensor(pred_seq)
    pred = torch.as_tensor(pred_seq, dtype=torch.float64) if was_numpy else pred_seq
    gt = torch.as_tensor(gt_seq, dtype=pred.dtype)
    if pred.shape != gt.shape or pred.ndim != 3 or pred.shape[2] != 3:
        raise ValueError("pred/gt must be matching (T, L, 3) arrays")
    if pred.shape[1] != model.n_vertices:
        raise ValueError("vertex count does not match the model")
    low = torch.as_tensor(np.asarray(model.lower_face_indices))
    pred_low = pred[:, low, :]
    gt_low = gt[:, low, :]
    loss = ((pred_low - gt_low) ** 2).mean()
    if pred.shape[0] >= 2:
        dp = pred_low[1:] - pred_low[:-1]
        dg = gt_low[1:] - gt_low[:-1]
        loss = loss + delta_weight * ((dp - dg) ** 2).mean()
    return float(loss.item()) if was_numpy else loss


class Stage1Model(nn.Module):
    """The full trainable audio-to-geometry path: audio encoder, shared vertex
    encoder + style head, style-injection attention and the generator."""

    def __init__(self, dim: int, n_vertices: int, n_self: int = 4,
                 conv_width: int = 64):
        super().__init__()
        self.audio_encoder = AudioEncoder(dim, conv_width=conv_width)
        self.style_encoder = StyleEncoder(n_vertices, dim)
        self.inject_attn = AttentionLayer(dim)
        self.generator = GeometryGenerator(dim, n_vertices, n_self)
        self.dim = dim
        self.n_vertices = n_vertices

    def template(self, model: MorphableModel, mean_alpha):
        """Template vertices and code for a speaker's mean identity."""
        verts = synthesize_vertices(model, mean_alpha, np.zeros(model.n_beta))
        code = self.style_encoder.vertex_encoder(verts)
        return verts, code

    def geometry_from_audio(self, waveform, model: MorphableModel, mean_alpha,
                            beta_style_seq, fps: float = 25.0,
                            audio_features=None):
        """Generate a (T, L, 3) vertex sequence for a waveform.

        beta_style_seq: expression coefficients of the style reference clip.
        audio_features overrides the encoder output when supplied (cached
        features at inference time).
        """
        if audio_features is None:
            audio_features = self.audio_encoder(waveform, 16000, fps)
        style = extract_style(beta_style_seq, model, self.style_encoder)
        stylized = inject_style(style, audio_features, self.inject_attn)
        template_vertices, template_code = self.template(model, mean_alpha)
        return self.generator(stylized, template_code, template_vertices)

    def config(self):
        return {
            "dim": self.dim,
            "n_vertices": self.n_vertices,
            "n_self": len(self.generator.self_layers),
            "conv_width": self.audio_encoder.convs[0].out_channels,
        }

    @staticmethod
    def from_config(cfg) -> "Stage1Model":
        return Stage1Model(int(cfg["dim"]), int(cfg["n_vertices"]),
                           int(cfg["n_self"]), int(cfg["conv_width"]))
