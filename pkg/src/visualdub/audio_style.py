"""Audio feature encoding, speaking-style embeddings and style injection.

The attention primitive here (softmax(Q K^T / sqrt(D)) V) is the single
formula every attention block in the package routes through.
"""

from __future__ import annotations

import hashlib
import math
import os

import numpy as np
import torch
from torch import nn
import torch.nn.functional as F

from .errors import DataError
from .morphable_model import MorphableModel


def attention_core(q, k, v, return_weights: bool = False):
    """Scaled dot-product attention: softmax(q @ k.T / sqrt(D)) @ v.

    q: (m, D), k: (n, D), v: (n, Dv), n >= 1. Returns (m, Dv); with
    return_weights=True also the (m, n) row-stochastic weight matrix.
    """
    if q.ndim != 2 or k.ndim != 2 or v.ndim != 2:
        raise ValueError("attention_core expects 2-D q, k, v")
    if k.shape[0] == 0 or v.shape[0] == 0:
        raise ValueError("attention_core needs at least one key/value row")
    if q.shape[1] != k.shape[1]:
        raise ValueError(f"q dim {q.shape[1]} != k dim {k.shape[1]}")
    if k.shape[0] != v.shape[0]:
        raise ValueError("k and v must have the same number of rows")
    scores = q @ k.T / math.sqrt(q.shape[1])
    weights = torch.softmax(scores, dim=-1)
    out = weights @ v
    return (out, weights) if return_weights else out


class AttentionLayer(nn.Module):
    """Q/K/V/output projections around attention_core, optionally with a
    learnable positional embedding table (one row per spatial position,
    shared by queries and keys)."""

    def __init__(self, dim: int, n_positions: int = None):
        super().__init__()
        self.dim = dim
        self.proj_q = nn.Linear(dim, dim)
        self.proj_k = nn.Linear(dim, dim)
        self.proj_v = nn.Linear(dim, dim)
        self.proj_o = nn.Linear(dim, dim)
        if n_positions is not None:
            self.pos = nn.Parameter(torch.zeros(n_positions, dim))
            nn.init.normal_(self.pos, std=0.02)
        else:
            self.pos = None

    def forward(self, q_in, k_in, v_in):
        return self.proj_o(attention_core(self.proj_q(q_in), self.proj_k(k_in),
                                          self.proj_v(v_in)))


def _sinusoid_table(length, dim, dtype):
    pos = torch.arange(length, dtype=dtype)[:, None]
    idx = torch.arange(dim // 2, dtype=dtype)[None, :]
    angle = pos / torch.pow(torch.tensor(10000.0, dtype=dtype), 2 * idx / dim)
    table = torch.zeros(length, dim, dtype=dtype)
    table[:, 0::2] = torch.sin(angle)
    table[:, 1::2] = torch.cos(angle[:, : dim - dim // 2])
    return table


class AudioEncoder(nn.Module):
    """Waveform (16 kHz mono) to per-video-frame features (T, D).

    A 4-layer strided conv stack brings the signal to ~50 Hz, two
    self-attention encoder layers mix context, and a final linear layer is
    followed by temporal interpolation to exactly round(duration * fps) rows.
    """

    STRIDES = (5, 4, 4, 4)
    KERNELS = (10, 8, 8, 8)

    def __init__(self, dim: int = 128, conv_width: int = 64, n_layers: int = 2):
        super().__init__()
        if dim % 2 != 0:
            raise ValueError("feature dim must be even")
        convs = []
        in_ch = 1
        for k, s in zip(self.KERNELS, self.STRIDES):
            convs.append(nn.Conv1d(in_ch, conv_width, kernel_size=k, stride=s))
            in_ch = conv_width
        self.convs = nn.ModuleList(convs)
        self.proj_in = nn.Linear(conv_width, dim)
        self.attn_layers = nn.ModuleList(AttentionLayer(dim) for _ in range(n_layers))
        self.norms1 = nn.ModuleList(nn.LayerNorm(dim) for _ in range(n_layers))
        self.ffns = nn.ModuleList(
            nn.Sequential(nn.Linear(dim, 2 * dim), nn.GELU(), nn.Linear(2 * dim, dim))
            for _ in range(n_layers))
        self.norms2 = nn.ModuleList(nn.LayerNorm(dim) for _ in range(n_layers))
        self.proj_out = nn.Linear(dim, dim)
        self.dim = dim

    def min_samples(self):
        n = 1
        for k, s in zip(reversed(self.KERNELS), reversed(self.STRIDES)):
            n = (n - 1) * s + k
        return n

    def forward(self, waveform, sample_rate: int = 16000, fps: float = 25.0):
        """waveform: 1-D float array/tensor of samples at 16 kHz."""
        if sample_rate != 16000:
            raise ValueError(f"audio must be 16 kHz, got {sample_rate}")
        dtype = next(self.parameters()).dtype
        x = torch.as_tensor(waveform, dtype=dtype).reshape(-1)
        if x.numel() == 0:
            raise ValueError("empty waveform")
        n_frames = int(np.floor(x.numel() / sample_rate * fps + 0.5))
        if n_frames < 1 or x.numel() < self.min_samples():
            raise ValueError(
                f"waveform too short: {x.numel()} samples "
                f"(need >= {self.min_samples()} and >= half a frame)")
        h = x[None, None, :]
        for conv in self.convs:
            h = F.gelu(conv(h))
        h = h[0].T  # (T50, conv_width)
        h = self.proj_in(h)
        h = h + _sinusoid_table(h.shape[0], self.dim, h.dtype)
        for attn, n1, ffn, n2 in zip(self.attn_layers, self.norms1, self.ffns, self.norms2):
            h = n1(h + attn(h, h, h))
            h = n2(h + ffn(h))
        h = self.proj_out(h)
        if h.shape[0] == 1:
            return h.expand(n_frames, -1).clone()
        resampled = F.interpolate(h.T[None], size=n_frames, mode="linear",
                                  align_corners=True)
        return resampled[0].T


def encode_audio(encoder: AudioEncoder, waveform, sample_rate: int = 16000,
                 fps: float = 25.0):
    """Functional wrapper over AudioEncoder.forward."""
    return encoder(waveform, sample_rate, fps)


class VertexEncoder(nn.Module):
    """Flattened vertices (3L) -> a D-dimensional code. Zero biases map the
    zero input to the zero code (the GELU is odd at the origin)."""

    def __init__(self, n_vertices: int, dim: int):
        super().__init__()
        self.n_vertices = n_vertices
        self.fc1 = nn.Linear(3 * n_vertices, dim)
        self.fc2 = nn.Linear(dim, dim)

    def forward(self, verts):
        dtype = self.fc1.weight.dtype
        v = torch.as_tensor(verts, dtype=dtype)
        single = v.ndim == 1 or (v.ndim == 2 and v.shape[0] == self.n_vertices
                                 and v.shape[1] == 3)
        flat = v.reshape(1, -1) if single else v.reshape(v.shape[0], -1)
        if flat.shape[1] != 3 * self.n_vertices:
            raise ValueError(f"expected {3 * self.n_vertices} coords per frame, "
                             f"got {flat.shape[1]}")
        out = self.fc2(F.gelu(self.fc1(flat)))
        return out[0] if single else out


def encode_vertex(encoder: VertexEncoder, verts):
    return encoder(verts)


class StyleEncoder(nn.Module):
    """Vertex encoder plus the statistics head that turns an expression
    sequence into one style vector."""

    def __init__(self, n_vertices: int, dim: int):
        super().__init__()
        self.vertex_encoder = VertexEncoder(n_vertices, dim)
        self.style_head = nn.Linear(2 * dim, dim)
        self.dim = dim


def _ordered_mean(x):
    # order-canonical reduction: sorting per dimension makes the sum, and so
    # the embedding, bitwise invariant to temporal permutations of the input
    return torch.sort(x, dim=0).values.mean(dim=0)


def extract_style(beta_seq, model: MorphableModel, encoder: StyleEncoder):
    """Style embedding of an expression-coefficient sequence.

    beta_seq: (T, n_beta), T >= 2. Each frame becomes expression-only
    vertices (alpha = 0, no pose), is encoded, and the temporal mean and
    population standard deviation of the codes feed the style head.
    Returns a (D,) tensor; exactly invariant to temporal permutation.
    """
    dtype = encoder.style_head.weight.dtype
    beta = torch.as_tensor(beta_seq, dtype=dtype)
    if beta.ndim != 2:
        raise ValueError("beta_seq must be (T, n_beta)")
    if beta.shape[0] < 2:
        raise ValueError("style extraction needs at least 2 frames")
    if beta.shape[1] != model.n_beta:
        raise ValueError(f"beta dim {beta.shape[1]} != model n_beta {model.n_beta}")
    mean = torch.as_tensor(model.mean_shape, dtype=dtype)
    expr = torch.as_tensor(model.expr_basis, dtype=dtype)
    verts = mean[None] + beta @ expr.T  # (T, 3L), expression-only geometry
    codes = encoder.vertex_encoder(verts)
    mu = _ordered_mean(codes)
    var = _ordered_mean((codes - mu[None]) ** 2)
    sigma = torch.sqrt(var)  # population convention; exact so constant input -> 0
    return encoder.style_head(torch.cat([mu, sigma]))


def inject_style(style, audio_features, layer: AttentionLayer):
    """Blend a style vector into audio features.

    The style vector queries the audio sequence (keys and values), and the
    resulting single row is broadcast-added to every frame:
    out_t = a_t + proj_o(attend(style -> audio)).
    """
    if audio_features.ndim != 2:
        raise ValueError("audio_features must be (T, D)")
    s = style.reshape(1, -1)
    if s.shape[1] != audio_features.shape[1]:
        raise ValueError("style and audio feature dims differ")
    correction = layer(s, audio_features, audio_features)  # (1, D)
    return audio_features + correction


def fit_style_encoder(beta_seqs_by_speaker, model: MorphableModel,
                      encoder: StyleEncoder, steps: int = 200, lr: float = 1e-2):
    """Small deterministic contrastive fit: pull same-speaker style embeddings
    together (cosine), push different speakers apart. Full-batch, no sampling,
    so the result depends only on the initial weights. Returns the loss trace."""
    labels = []
    seqs = []
    for speaker_id, seqs_for_speaker in enumerate(beta_seqs_by_speaker):
        for seq in seqs_for_speaker:
            labels.append(speaker_id)
            seqs.append(np.asarray(seq))
    if len(set(labels)) < 2:
        raise ValueError("need at least two speakers to fit the style encoder")
    labels = np.array(labels)
    optimizer = torch.optim.Adam(encoder.parameters(), lr=lr)
    same = torch.as_tensor(labels[:, None] == labels[None, :])
    eye = torch.eye(len(labels), dtype=torch.bool)
    trace = np.zeros(steps)
    for step in range(steps):
        optimizer.zero_grad()
        emb = torch.stack([extract_style(s, model, encoder) for s in seqs])
        emb = emb / (emb.norm(dim=1, keepdim=True) + 1e-8)
        cos = emb @ emb.T
        intra = cos[same & ~eye].mean()
        inter = cos[~same].mean()
        loss = inter - intra
        trace[step] = float(loss.item())
        loss.backward()
        optimizer.step()
    return trace


# ---------------------------------------------------------------------------
# WAV ingestion and the audio feature cache


def read_wav_mono16k(path):
    """Load a 16 kHz 16-bit mono PCM WAV as float64 samples in [-1, 1]."""
    from scipy.io import wavfile

    try:
        rate, data = wavfile.read(path)
    except (OSError, ValueError) as exc:
        raise DataError(f"cannot read WAV {path}: {exc}") from exc
    if rate != 16000:
        raise DataError(f"{path}: sample rate {rate}, expected 16000")
    if data.ndim != 1:
        raise DataError(f"{path}: expected mono audio, got shape {data.shape}")
    if data.dtype != np.int16:
        raise DataError(f"{path}: expected 16-bit PCM, got dtype {data.dtype}")
    return data.astype(np.float64) / 32768.0


def write_wav_mono16k(path, samples):
    from scipy.io import wavfile

    clipped = np.clip(np.asarray(samples, dtype=np.float64), -1.0, 1.0)
    wavfile.write(path, 16000, (clipped * 32767.0).astype(np.int16))


def weights_digest(module: nn.Module) -> str:
    h = hashlib.sha256()
    for name, p in sorted(module.state_dict().items()):
        h.update(name.encode())
        h.update(np.ascontiguousarray(p.detach().cpu().numpy()).tobytes())
    return h.hexdigest()


def feature_cache_key(waveform, fps: float, encoder: AudioEncoder) -> str:
    """Cache key: audio content x frame rate x encoder weights."""
    h = hashlib.sha256()
    h.update(np.ascontiguousarray(np.asarray(waveform, dtype=np.float64)).tobytes())
    h.update(f"fps={fps!r}".encode())
    h.update(weights_digest(encoder).encode())
    return h.hexdigest()


def cached_audio_features(cache_dir, waveform, fps: float, encoder: AudioEncoder):
    """Memoized encode_audio: features are stored per (audio, fps, weights) key."""
    key = feature_cache_key(waveform, fps, encoder)
    path = os.path.join(cache_dir, f"audio_features_{key}.npz")
    if os.path.exists(path):
        return torch.as_tensor(np.load(path)["features"])
    with torch.no_grad():
        features = encoder(waveform, 16000, fps)
    os.makedirs(cache_dir, exist_ok=True)
    np.savez(path, features=features.numpy(), key=key)
    return features
