"""Stage 2: dual-attention texture rendering from geometry images.

Geometry latents act as queries/keys, texture latents as values; a lip
branch restricted to lip-bearing reference positions and a face branch over
everything are blended by the target's lip mask.
"""

from __future__ import annotations

import numpy as np
import torch
from torch import nn
import torch.nn.functional as F

from .audio_style import AttentionLayer
from .morphable_model import MorphableModel

LIP_KEEP_THRESHOLD = 0.05


def lip_mask(pncc, model: MorphableModel, margin: float = 0.1):
    """Soft lip mask at quarter resolution, derived from a geometry image.

    A full-resolution pixel counts as lip when it is covered (non-background)
    and its normalized-coordinate color falls inside the model's lip-region
    bounding box, padded by `margin` to absorb expression travel. 4x4 area
    averaging gives a (1, H/4, W/4) mask in [0, 1].
    """
    arr = pncc.detach().cpu().numpy() if torch.is_tensor(pncc) else np.asarray(pncc)
    if arr.ndim != 3 or arr.shape[0] != 3:
        raise ValueError("pncc must be (3, H, W)")
    h, w = arr.shape[1:]
    if h % 4 or w % 4:
        raise ValueError("geometry image sides must be divisible by 4")
    lip_ncc = model.normalize_canonical(
        model.mean_shape.reshape(-1, 3)[model.lip_region_indices])
    lo = np.maximum(lip_ncc.min(axis=0) - margin, 0.0)
    hi = np.minimum(lip_ncc.max(axis=0) + margin, 1.0)
    covered = (arr > 0).any(axis=0)
    in_box = np.ones((h, w), dtype=bool)
    for c in range(3):
        in_box &= (arr[c] >= lo[c]) & (arr[c] <= hi[c])
    full = (covered & in_box).astype(np.float64)
    pooled = full.reshape(h // 4, 4, w // 4, 4).mean(axis=(1, 3))
    return np.clip(pooled, 0.0, 1.0)[None]


def flatten_latent(latent):
    """(C, h, w) -> (h*w, C), row-major over (row, col)."""
    c, h, w = latent.shape
    return latent.reshape(c, h * w).T


def unflatten_latent(rows, h, w):
    """(h*w, C) -> (C, h, w)."""
    return rows.T.reshape(-1, h, w)


def flatten_qkv(target_geom_latent, ref_geom_latents, ref_tex_latents, pos=None):
    """Build attention inputs from latent maps.

    target_geom_latent: (C, h, w); ref_geom_latents/ref_tex_latents: (N, C, h, w).
    The positional table `pos` ((h*w, C) or None) is added to the query rows
    and to every reference's key rows at the same spatial position; values
    carry no positional term. Returns (Q (hw, C), K (N*hw, C), V (N*hw, C)).
    """
    if ref_geom_latents.shape != ref_tex_latents.shape:
        raise ValueError("reference geometry/texture latents must align")
    if ref_geom_latents.ndim != 4 or ref_geom_latents.shape[0] == 0:
        raise ValueError("need at least one reference latent")
    n, c, h, w = ref_geom_latents.shape
    q = flatten_latent(target_geom_latent)
    k = ref_geom_latents.permute(0, 2, 3, 1).reshape(n * h * w, c)
    v = ref_tex_latents.permute(0, 2, 3, 1).reshape(n * h * w, c)
    if pos is not None:
        if pos.shape != (h * w, c):
            raise ValueError(f"positional table must be ({h * w}, {c})")
        q = q + pos
        k = k + pos.repeat(n, 1)
    return q, k, v


class FaceRenderer(nn.Module):
    """Geometry/texture encoders, dual attention and the upsampling decoder.

    Built for a fixed image size (h, w); latents live at (h/4, w/4). The
    geometry encoder is shared between the target and the references.
    """

    def __init__(self, channels: int = 64, h: int = 256, w: int = 256):
        super().__init__()
        if h % 4 or w % 4:
            raise ValueError("image sides must be divisible by 4")
        self.channels = channels
        self.h, self.w = h, w
        self.lh, self.lw = h // 4, w // 4
        n_pos = self.lh * self.lw
        self.geo_conv1 = nn.Conv2d(3, channels, 4, stride=2, padding=1)
        self.geo_conv2 = nn.Conv2d(channels, channels, 4, stride=2, padding=1)
        self.tex_conv1 = nn.Conv2d(3, channels, 4, stride=2, padding=1)
        self.tex_conv2 = nn.Conv2d(channels, channels, 4, stride=2, padding=1)
        self.lip_attn = AttentionLayer(channels, n_positions=n_pos)
        self.face_attn = AttentionLayer(channels, n_positions=n_pos)
        self.dec_conv1 = nn.ConvTranspose2d(channels + 3, channels, 4, stride=2, padding=1)
        self.dec_conv2 = nn.ConvTranspose2d(channels, 3, 4, stride=2, padding=1)

    def _check_images(self, images):
        if images.ndim == 3:
            images = images[None]
        if images.ndim != 4 or images.shape[1] != 3 \
                or images.shape[2] != self.h or images.shape[3] != self.w:
            raise ValueError(f"expected (N, 3, {self.h}, {self.w}) images, "
                             f"got {tuple(images.shape)}")
        return images

    def encode_geometry(self, pncc_maps):
        """(N, 3, H, W) or (3, H, W) geometry images -> (N, C, H/4, W/4)."""
        x = self._check_images(torch.as_tensor(pncc_maps, dtype=self.dtype()))
        return self.geo_conv2(F.gelu(self.geo_conv1(x)))

    def encode_texture(self, frames):
        """(N, 3, H, W) or (3, H, W) RGB frames in [0, 1] -> (N, C, H/4, W/4)."""
        x = self._check_images(torch.as_tensor(frames, dtype=self.dtype()))
        return self.tex_conv2(F.gelu(self.tex_conv1(x)))

    def dtype(self):
        return self.geo_conv1.weight.dtype

    def dual_attention(self, target_geom_latent, face_geom, face_tex,
                       lip_geom, lip_tex, mask, lip_ref_masks=None):
        """Blend lip- and face-branch attention outputs by the target lip mask.

        target_geom_latent: (C, h, w); face_geom/face_tex: (N_f, C, h, w);
        lip_geom/lip_tex: (N_l, C, h, w); mask: (1, h, w) in [0, 1].
        lip_ref_masks: optional (N_l, 1, h, w) masks of the lip references;
        when given, lip-branch key/value rows are cropped to positions whose
        mask value exceeds LIP_KEEP_THRESHOLD (falling back to all rows if
        that would leave none).
        """
        c, h, w = target_geom_latent.shape
        mask = torch.as_tensor(mask, dtype=target_geom_latent.dtype)
        if mask.shape != (1, h, w):
            raise ValueError(f"mask must be (1, {h}, {w})")
        qf, kf, vf = flatten_qkv(target_geom_latent, face_geom, face_tex,
                                 self.face_attn.pos)
        face_out = self.face_attn(qf, kf, vf)
        ql, kl, vl = flatten_qkv(target_geom_latent, lip_geom, lip_tex,
                                 self.lip_attn.pos)
        if lip_ref_masks is not None:
            keep = torch.as_tensor(lip_ref_masks).reshape(-1) > LIP_KEEP_THRESHOLD
            if keep.shape[0] != kl.shape[0]:
                raise ValueError("lip_ref_masks does not match the lip references")
            if bool(keep.any()):
                kl, vl = kl[keep], vl[keep]
        lip_out = self.lip_attn(ql, kl, vl)
        lip_map = unflatten_latent(lip_out, h, w)
        face_map = unflatten_latent(face_out, h, w)
        return lip_map * mask + face_map * (1.0 - mask)

    def decode_texture(self, latent, target_pncc):
        """Latent (C, h, w) plus the full-res geometry image -> RGB in [0, 1].

        The geometry image is bilinearly downsampled and concatenated onto the
        latent before two 2x upsampling stages; a sigmoid squashes the output.
        """
        g = torch.as_tensor(target_pncc, dtype=self.dtype())
        if g.shape != (3, self.h, self.w):
            raise ValueError(f"target_pncc must be (3, {self.h}, {self.w})")
        g_small = F.interpolate(g[None], size=(latent.shape[1], latent.shape[2]),
                                mode="bilinear", align_corners=False)[0]
        x = torch.cat([latent, g_small], dim=0)[None]
        x = F.gelu(self.dec_conv1(x))
        return torch.sigmoid(self.dec_conv2(x))[0]

    def render_frame(self, model: MorphableModel, target_pncc, face_ref_pnccs,
                     face_ref_frames, lip_ref_pnccs, lip_ref_frames):
        """Full stage-2 forward pass for one target frame.

        target_pncc: (3, H, W); face/lip reference stacks: (N, 3, H, W) geometry
        images with matching RGB frames. Returns an RGB (3, H, W) tensor.
        """
        target_pncc_t = torch.as_tensor(target_pncc, dtype=self.dtype())
        mask = torch.as_tensor(self._latent_mask(target_pncc, model),
                               dtype=self.dtype())
        lip_masks = torch.stack([
            torch.as_tensor(self._latent_mask(p, model), dtype=self.dtype())
            for p in lip_ref_pnccs])
        geo_batch = torch.cat([
            self._check_images(torch.as_tensor(target_pncc_t)),
            self._check_images(torch.as_tensor(face_ref_pnccs, dtype=self.dtype())),
            self._check_images(torch.as_tensor(lip_ref_pnccs, dtype=self.dtype())),
        ])
        geo_latents = self.encode_geometry(geo_batch)
        n_face = len(face_ref_pnccs)
        target_latent = geo_latents[0]
        face_geom = geo_latents[1:1 + n_face]
        lip_geom = geo_latents[1 + n_face:]
        tex_batch = torch.cat([
            self._check_images(torch.as_tensor(face_ref_frames, dtype=self.dtype())),
            self._check_images(torch.as_tensor(lip_ref_frames, dtype=self.dtype())),
        ])
        tex_latents = self.encode_texture(tex_batch)
        face_tex = tex_latents[:n_face]
        lip_tex = tex_latents[n_face:]
        latent = self.dual_attention(target_latent, face_geom, face_tex,
                                     lip_geom, lip_tex, mask, lip_masks)
        return self.decode_texture(latent, target_pncc_t)

    def _latent_mask(self, pncc, model):
        return lip_mask(pncc, model)

    def config(self):
        return {"channels": self.channels, "h": self.h, "w": self.w}

    @staticmethod
    def from_config(cfg) -> "FaceRenderer":
        return FaceRenderer(int(cfg["channels"]), int(cfg["h"]), int(cfg["w"]))


def stage2_loss(pred, gt, perceptual=None):
    """Mean absolute error, plus a pluggable perceptual term when supplied.

    perceptual: optional callable (pred, gt) -> scalar tensor; disabled by
    default.
    """
    pred_t = pred if torch.is_tensor(pred) else torch.as_tensor(pred, dtype=torch.float64)
    gt_t = torch.as_tensor(gt, dtype=pred_t.dtype)
    if pred_t.shape != gt_t.shape:
        raise ValueError("pred and gt must share a shape")
    loss = (pred_t - gt_t).abs().mean()
    if perceptual is not None:
        loss = loss + perceptual(pred_t, gt_t)
    return float(loss.item()) if not torch.is_tensor(pred) else loss
