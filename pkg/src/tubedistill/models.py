"""Tubelet-tokenized transformer encoder, shallow reconstruction decoder, and the
classification / projection heads, plus the versioned checkpoint container.

All parameters are plain torch tensors; forward passes are deterministic
functions of (params, inputs, mask). The encoder only ever sees visible tokens
(the decoder alone receives mask tokens), and pooling is the arithmetic mean
over the visible output tokens.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Iterable, Mapping, Sequence

import numpy as np
import torch
from torch import nn

from .errors import ConfigurationError, NumericError
from .masking import TokenGrid, TubeMask
from .synth import Clip, Modality, ModalitySpec
from .util import derive_rng
from .validation import require

CHECKPOINT_MAGIC = b"TDBUNDLE1\n"
CHECKPOINT_VERSION = "1"


@dataclass(frozen=True)
class EncoderConfig:
    embed_dim: int = 64
    depth: int = 4
    num_heads: int = 4
    mlp_ratio: float = 4.0
    tubelet_size: int = 2
    decoder_depth: int = 1

    def __post_init__(self) -> None:
        if self.embed_dim % self.num_heads != 0:
            raise ConfigurationError(
                f"embed_dim={self.embed_dim} not divisible by num_heads={self.num_heads}"
            )
        if min(self.embed_dim, self.depth, self.num_heads, self.tubelet_size, self.decoder_depth) < 1:
            raise ConfigurationError(f"invalid encoder config: {self}")


def _trunc_normal(rng: np.random.Generator, shape: tuple[int, ...], std: float) -> np.ndarray:
    """Truncated normal at +-2 std via resampling; deterministic given rng."""
    out = rng.normal(0.0, std, size=shape)
    bad = np.abs(out) > 2.0 * std
    while bad.any():
        out[bad] = rng.normal(0.0, std, size=int(bad.sum()))
        bad = np.abs(out) > 2.0 * std
    return out


def init_parameters(module: nn.Module, rng: np.random.Generator, std: float = 0.02) -> None:
    """Seeded init: truncated normal (std 0.02) for weight matrices, ones for
    norm scales, zeros for biases. Walks parameters in definition order."""
    with torch.no_grad():
        for name, p in module.named_parameters():
            if p.ndim == 1:
                if name.endswith("weight"):
                    p.fill_(1.0)
                else:
                    p.zero_()
            else:
                p.copy_(torch.from_numpy(_trunc_normal(rng, tuple(p.shape), std)).to(p.dtype))


def tokenize_frames(frames: np.ndarray, patch_size: int, tubelet_size: int) -> np.ndarray:
    """Flatten a clip into non-overlapping tubelet patches, canonical order.

    Token order is slice-major then spatial row-major; within a token the patch
    is flattened as (tubelet frame, row, col, channel). Returns (I, patch_volume).
    """
    t, h, w, c = frames.shape
    require(t % tubelet_size == 0, f"T={t} not divisible by tubelet={tubelet_size}")
    require(h % patch_size == 0 and w % patch_size == 0, f"{h}x{w} not divisible by patch={patch_size}")
    t2, gh, gw = t // tubelet_size, h // patch_size, w // patch_size
    x = frames.reshape(t2, tubelet_size, gh, patch_size, gw, patch_size, c)
    x = x.transpose(0, 2, 4, 1, 3, 5, 6)
    return np.ascontiguousarray(x).reshape(t2 * gh * gw, tubelet_size * patch_size * patch_size * c)


def tokenize(clip: Clip, tubelet_size: int) -> np.ndarray:
    return tokenize_frames(clip.frames, clip.modality.patch_size, tubelet_size)


def patch_volume(spec: ModalitySpec, tubelet_size: int) -> int:
    return spec.patch_size * spec.patch_size * tubelet_size * spec.channels


class SelfAttention(nn.Module):
    def __init__(self, dim: int, num_heads: int) -> None:
        super().__init__()
        self.num_heads = num_heads
        self.head_dim = dim // num_heads
        self.qkv = nn.Linear(dim, 3 * dim)
        self.proj = nn.Linear(dim, dim)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        b, n, d = x.shape
        qkv = self.qkv(x).reshape(b, n, 3, self.num_heads, self.head_dim).permute(2, 0, 3, 1, 4)
        q, k, v = qkv[0], qkv[1], qkv[2]
        attn = (q @ k.transpose(-2, -1)) / math.sqrt(self.head_dim)
        attn = attn.softmax(dim=-1)
        out = (attn @ v).transpose(1, 2).reshape(b, n, d)
        return self.proj(out)


class TransformerBlock(nn.Module):
    def __init__(self, dim: int, num_heads: int, mlp_ratio: float) -> None:
        super().__init__()
        hidden = int(dim * mlp_ratio)
        self.norm1 = nn.LayerNorm(dim)
        self.attn = SelfAttention(dim, num_heads)
        self.norm2 = nn.LayerNorm(dim)
        self.fc1 = nn.Linear(dim, hidden)
        self.fc2 = nn.Linear(hidden, dim)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        x = x + self.attn(self.norm1(x))
        return x + self.fc2(torch.nn.functional.gelu(self.fc1(self.norm2(x))))


class VideoEncoder(nn.Module):
    """Encoder over visible tokens only; positional rows selected by token index."""

    def __init__(self, config: EncoderConfig, modality: ModalitySpec, frames: int) -> None:
        super().__init__()
        self.config = config
        self.modality = modality
        self.frames = frames
        self.grid = TokenGrid.for_video(
            frames, config.tubelet_size, modality.height, modality.width, modality.patch_size
        )
        self.patch_volume = patch_volume(modality, config.tubelet_size)
        self.patch_embed = nn.Linear(self.patch_volume, config.embed_dim)
        self.pos_embed = nn.Parameter(torch.zeros(self.grid.total_tokens, config.embed_dim))
        self.blocks = nn.ModuleList(
            TransformerBlock(config.embed_dim, config.num_heads, config.mlp_ratio)
            for _ in range(config.depth)
        )
        self.norm = nn.LayerNorm(config.embed_dim)

    @property
    def dtype(self) -> torch.dtype:
        return self.pos_embed.dtype

    def forward(self, patches: torch.Tensor, position_ids: torch.Tensor) -> torch.Tensor:
        """patches: (B, N, patch_volume); position_ids: (N,) or (B, N) token indices."""
        require(patches.shape[-1] == self.patch_volume, "patch volume mismatch")
        x = self.patch_embed(patches) + self.pos_embed[position_ids]
        for block in self.blocks:
            x = block(x)
        return self.norm(x)

    def pooled(self, clips, masks) -> torch.Tensor:
        """Mean-pooled visible-token features for a batch of clips; (B, embed_dim)."""
        _, pooled = encode_batch(self, clips, masks)
        return pooled


class VideoDecoder(nn.Module):
    """Shallow decoder: encoder outputs at visible positions, a shared learned
    mask token elsewhere, then per-token patch-pixel predictions for the masked
    positions only."""

    def __init__(self, config: EncoderConfig, modality: ModalitySpec, frames: int) -> None:
        super().__init__()
        self.config = config
        self.modality = modality
        self.grid = TokenGrid.for_video(
            frames, config.tubelet_size, modality.height, modality.width, modality.patch_size
        )
        self.patch_volume = patch_volume(modality, config.tubelet_size)
        d = config.embed_dim
        self.mask_token = nn.Parameter(torch.zeros(1, 1, d))
        self.pos_embed = nn.Parameter(torch.zeros(self.grid.total_tokens, d))
        self.blocks = nn.ModuleList(
            TransformerBlock(d, config.num_heads, config.mlp_ratio) for _ in range(config.decoder_depth)
        )
        self.norm = nn.LayerNorm(d)
        self.head = nn.Linear(d, self.patch_volume)


class ClassifierHead(nn.Module):
    def __init__(self, embed_dim: int, n_classes: int) -> None:
        super().__init__()
        self.linear = nn.Linear(embed_dim, n_classes)

    def forward(self, pooled: torch.Tensor) -> torch.Tensor:
        return self.linear(pooled)


class ProjectionHead(nn.Module):
    """Two-layer perceptron mapping student features into a teacher feature space."""

    def __init__(self, embed_dim: int) -> None:
        super().__init__()
        self.fc1 = nn.Linear(embed_dim, 2 * embed_dim)
        self.fc2 = nn.Linear(2 * embed_dim, embed_dim)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return self.fc2(torch.nn.functional.gelu(self.fc1(x)))


def clips_to_array(clips) -> np.ndarray:
    """Stack Clip objects / raw frame arrays into one (B, T, H, W, C) array."""
    if isinstance(clips, np.ndarray):
        return clips if clips.ndim == 5 else clips[None]
    if isinstance(clips, Clip):
        return clips.frames[None]
    arrays = [c.frames if isinstance(c, Clip) else np.asarray(c) for c in clips]
    return np.stack(arrays, axis=0)


def _gather_visible(tokens: np.ndarray, masks: Sequence[TubeMask]) -> tuple[np.ndarray, np.ndarray]:
    """Per-sample visible rows; all masks must share the same visible count."""
    counts = {m.n_visible for m in masks}
    require(len(counts) == 1, "masks in a batch must share the visible count")
    visible = np.stack([tokens[i][m.visible_indices] for i, m in enumerate(masks)], axis=0)
    positions = np.stack([m.visible_indices for m in masks], axis=0)
    return visible, positions


def _as_mask_list(masks, batch: int) -> list[TubeMask]:
    if isinstance(masks, TubeMask):
        return [masks] * batch
    masks = list(masks)
    require(len(masks) == batch, f"got {len(masks)} masks for batch of {batch}")
    return masks


def encode_batch(encoder: VideoEncoder, clips, masks) -> tuple[torch.Tensor, torch.Tensor]:
    """Tokenize, mask, and encode a batch of clips.

    Returns (tokens (B, I_vis, d), pooled (B, d)); masks may differ per sample as
    long as they share the encoder grid and the visible count.
    """
    frames = clips_to_array(clips)
    b = frames.shape[0]
    mask_list = _as_mask_list(masks, b)
    for m in mask_list:
        require(m.grid == encoder.grid, f"mask grid {m.grid} does not match encoder grid {encoder.grid}")
    patch_tokens = np.stack(
        [tokenize_frames(frames[i], encoder.modality.patch_size, encoder.config.tubelet_size) for i in range(b)]
    )
    visible, positions = _gather_visible(patch_tokens, mask_list)
    vis_t = torch.from_numpy(visible).to(encoder.dtype)
    pos_t = torch.from_numpy(positions)
    tokens = encoder(vis_t, pos_t)
    return tokens, tokens.mean(dim=-2)


def encode(encoder: VideoEncoder, clip: Clip, mask: TubeMask) -> tuple[torch.Tensor, torch.Tensor]:
    """Single-clip encode: (visible tokens (I_vis, d), pooled (d,))."""
    tokens, pooled = encode_batch(encoder, clip, mask)
    return tokens[0], pooled[0]


def classify(head: ClassifierHead, pooled: torch.Tensor) -> torch.Tensor:
    require(pooled.shape[-1] == head.linear.in_features, "pooled feature dim does not match classifier")
    return head(pooled)


def decode_batch(decoder: VideoDecoder, encoded: torch.Tensor, masks) -> torch.Tensor:
    """Predict patch pixels for the masked positions; (B, I_masked, patch_volume)."""
    b = encoded.shape[0]
    mask_list = _as_mask_list(masks, b)
    for m in mask_list:
        require(m.grid == decoder.grid, "mask grid does not match decoder grid")
        require(m.n_visible == encoded.shape[1], "encoded token count does not match mask")
    n_masked = mask_list[0].grid.total_tokens - mask_list[0].n_visible
    if n_masked == 0:
        return encoded.new_zeros((b, 0, decoder.patch_volume))
    total = decoder.grid.total_tokens
    d = encoded.shape[-1]
    full = decoder.mask_token.to(encoded.dtype).expand(b, total, d).clone()
    batch_idx = torch.arange(b).unsqueeze(1)
    vis_idx = torch.from_numpy(np.stack([m.visible_indices for m in mask_list]))
    full[batch_idx, vis_idx] = encoded
    x = full + decoder.pos_embed.unsqueeze(0)
    for block in decoder.blocks:
        x = block(x)
    x = decoder.norm(x)
    masked_idx = torch.from_numpy(np.stack([m.masked_indices for m in mask_list]))
    return decoder.head(x[batch_idx, masked_idx])


def reconstruct(decoder: VideoDecoder, encoded_tokens: torch.Tensor, mask: TubeMask) -> torch.Tensor:
    """Single-clip reconstruction: predictions for masked positions (I_masked, pv)."""
    return decode_batch(decoder, encoded_tokens.unsqueeze(0), mask)[0]


def gradients(
    loss_fn: Callable[[], torch.Tensor],
    params: Sequence[torch.Tensor],
) -> list[torch.Tensor]:
    """Reverse-mode gradients of a scalar loss w.r.t. params; unused parameters
    get exact zeros. Raises NumericError on a non-finite loss."""
    loss = loss_fn()
    if loss.ndim != 0:
        raise ConfigurationError("loss_fn must return a scalar")
    if not torch.isfinite(loss):
        raise NumericError(f"non-finite loss: {loss.item()!r}")
    grads = torch.autograd.grad(loss, list(params), allow_unused=True)
    return [g if g is not None else torch.zeros_like(p) for g, p in zip(grads, params)]


@dataclass
class ModalityModel:
    encoder: VideoEncoder
    decoder: VideoDecoder
    classifier: ClassifierHead

    def modules(self) -> list[nn.Module]:
        return [self.encoder, self.decoder, self.classifier]

    def parameters(self) -> list[torch.Tensor]:
        return [p for m in self.modules() for p in m.parameters()]


@dataclass
class ModelBundle:
    """Checkpointable unit: per-modality teacher triples plus the optional student
    encoder and projection heads produced by the distillation stage."""

    encoder_config: EncoderConfig
    modality_specs: Mapping[Modality, ModalitySpec]
    frames: int
    n_classes: int
    teachers: dict[Modality, ModalityModel]
    student: VideoEncoder | None = None
    projections: dict[Modality, ProjectionHead] | None = None
    version: str = CHECKPOINT_VERSION

    def named_components(self) -> list[tuple[str, nn.Module]]:
        items: list[tuple[str, nn.Module]] = []
        for modality in sorted(self.teachers, key=lambda m: m.value):
            model = self.teachers[modality]
            items.append((f"teacher.{modality.value}.encoder", model.encoder))
            items.append((f"teacher.{modality.value}.decoder", model.decoder))
            items.append((f"teacher.{modality.value}.classifier", model.classifier))
        if self.student is not None:
            items.append(("student.encoder", self.student))
        if self.projections is not None:
            for modality in sorted(self.projections, key=lambda m: m.value):
                items.append((f"projection.{modality.value}", self.projections[modality]))
        return items

    def parameter_bytes(self) -> bytes:
        """Concatenated raw parameter bytes; used for frozen-teacher hashing."""
        chunks = []
        for _, module in self.named_components():
            for _, p in module.named_parameters():
                chunks.append(p.detach().cpu().numpy().tobytes())
        return b"".join(chunks)


def init_modality_model(
    config: EncoderConfig,
    modality: ModalitySpec,
    frames: int,
    n_classes: int,
    seed: int,
    dtype: torch.dtype = torch.float64,
) -> ModalityModel:
    encoder = VideoEncoder(config, modality, frames).to(dtype)
    decoder = VideoDecoder(config, modality, frames).to(dtype)
    classifier = ClassifierHead(config.embed_dim, n_classes).to(dtype)
    init_parameters(encoder, derive_rng(seed, "encoder", modality.kind.value))
    init_parameters(decoder, derive_rng(seed, "decoder", modality.kind.value))
    init_parameters(classifier, derive_rng(seed, "classifier", modality.kind.value))
    return ModalityModel(encoder, decoder, classifier)


def init_bundle(
    config: EncoderConfig,
    modality_specs: Mapping[Modality, ModalitySpec],
    frames: int,
    n_classes: int,
    seed: int,
    dtype: torch.dtype = torch.float64,
) -> ModelBundle:
    teachers = {
        modality: init_modality_model(config, spec, frames, n_classes, seed, dtype)
        for modality, spec in modality_specs.items()
    }
    return ModelBundle(
        encoder_config=config,
        modality_specs=dict(modality_specs),
        frames=frames,
        n_classes=n_classes,
        teachers=teachers,
    )


_DTYPE_NAMES = {torch.float32: "float32", torch.float64: "float64"}
_NAMES_DTYPE = {v: k for k, v in _DTYPE_NAMES.items()}
_NP_DTYPES = {"float32": np.float32, "float64": np.float64}


def bundle_dtype(bundle: ModelBundle) -> torch.dtype:
    return next(iter(bundle.teachers.values())).encoder.dtype if bundle.teachers else bundle.student.dtype


def save_bundle(bundle: ModelBundle, path: str | Path) -> None:
    """Versioned container: JSON header (config + named tensor shapes) followed by
    raw little-endian tensor bytes. Byte-deterministic for identical bundles."""
    tensors: list[dict] = []
    blobs: list[bytes] = []
    for comp_name, module in bundle.named_components():
        for p_name, p in module.named_parameters():
            arr = p.detach().cpu().numpy()
            tensors.append(
                {
                    "name": f"{comp_name}.{p_name}",
                    "shape": list(arr.shape),
                    "dtype": str(arr.dtype),
                }
            )
            blobs.append(arr.tobytes())
    header = {
        "version": bundle.version,
        "encoder_config": {
            "embed_dim": bundle.encoder_config.embed_dim,
            "depth": bundle.encoder_config.depth,
            "num_heads": bundle.encoder_config.num_heads,
            "mlp_ratio": bundle.encoder_config.mlp_ratio,
            "tubelet_size": bundle.encoder_config.tubelet_size,
            "decoder_depth": bundle.encoder_config.decoder_depth,
        },
        "modalities": {
            m.value: [s.height, s.width, s.channels, s.patch_size]
            for m, s in sorted(bundle.modality_specs.items(), key=lambda kv: kv[0].value)
        },
        "frames": bundle.frames,
        "n_classes": bundle.n_classes,
        "dtype": _DTYPE_NAMES[bundle_dtype(bundle)],
        "teacher_modalities": sorted(m.value for m in bundle.teachers),
        "has_student": bundle.student is not None,
        "projection_modalities": sorted(m.value for m in (bundle.projections or {})),
        "tensors": tensors,
    }
    header_bytes = json.dumps(header, sort_keys=True).encode("utf-8")
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("wb") as f:
        f.write(CHECKPOINT_MAGIC)
        f.write(len(header_bytes).to_bytes(8, "little"))
        f.write(header_bytes)
        for blob in blobs:
            f.write(blob)


def load_bundle(path: str | Path) -> ModelBundle:
    raw = Path(path).read_bytes()
    if not raw.startswith(CHECKPOINT_MAGIC):
        raise ConfigurationError(f"{path} is not a model checkpoint")
    off = len(CHECKPOINT_MAGIC)
    header_len = int.from_bytes(raw[off : off + 8], "little")
    off += 8
    header = json.loads(raw[off : off + header_len].decode("utf-8"))
    off += header_len
    if header["version"] != CHECKPOINT_VERSION:
        raise ConfigurationError(f"unsupported checkpoint version {header['version']!r}")

    cfg = EncoderConfig(**header["encoder_config"])
    specs = {
        Modality(name): ModalitySpec(Modality(name), h, w, c, p)
        for name, (h, w, c, p) in header["modalities"].items()
    }
    dtype = _NAMES_DTYPE[header["dtype"]]
    frames, n_classes = header["frames"], header["n_classes"]

    teachers = {}
    for name in header["teacher_modalities"]:
        modality = Modality(name)
        spec = specs[modality]
        teachers[modality] = ModalityModel(
            VideoEncoder(cfg, spec, frames).to(dtype),
            VideoDecoder(cfg, spec, frames).to(dtype),
            ClassifierHead(cfg.embed_dim, n_classes).to(dtype),
        )
    student = VideoEncoder(cfg, specs[Modality.RGB], frames).to(dtype) if header["has_student"] else None
    projections = (
        {Modality(name): ProjectionHead(cfg.embed_dim).to(dtype) for name in header["projection_modalities"]}
        if header["projection_modalities"]
        else None
    )
    bundle = ModelBundle(
        encoder_config=cfg,
        modality_specs=specs,
        frames=frames,
        n_classes=n_classes,
        teachers=teachers,
        student=student,
        projections=projections,
        version=header["version"],
    )

    params = {
        f"{comp}.{p_name}": p
        for comp, module in bundle.named_components()
        for p_name, p in module.named_parameters()
    }
    with torch.no_grad():
        for entry in header["tensors"]:
            np_dtype = _NP_DTYPES[entry["dtype"]]
            count = int(np.prod(entry["shape"])) if entry["shape"] else 1
            nbytes = count * np.dtype(np_dtype).itemsize
            arr = np.frombuffer(raw[off : off + nbytes], dtype=np_dtype).reshape(entry["shape"]).copy()
            off += nbytes
            params[entry["name"]].copy_(torch.from_numpy(arr))
    return bundle
