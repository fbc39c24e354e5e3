"""Tube tokenization, random masking, the siamese encoder pair, decoders,
projection/prediction heads, EMA updates, and checkpoint serialization.

Checkpoint file layout (little-endian), magic b"CMVC", version 1:

    magic    4 bytes
    version  u32
    count    u32
    entries  per entry: name_len u16, name utf-8, dtype u8
             (0=f32, 1=f64, 2=u32, 3=u64, 4=i64), ndim u8, dims u32 * ndim
    payload  raw array bytes in entry order

Model weights are f32; integer entries carry optimizer step and the
state needed to resume a run deterministically.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import autodiff as ad
from . import nn
from .autodiff import Tensor

CHECKPOINT_MAGIC = b"CMVC"
CHECKPOINT_VERSION = 1

_INIT_STREAM = 0x1A17  # seed-sequence salt for weight init


@dataclass
class ModelConfig:
    d_model: int = 96
    depth: int = 4
    num_heads: int = 4
    mlp_ratio: int = 4
    proj_dim: int = 64
    decoder_width: int = 64
    decoder_depth: int = 2
    decoder_heads: int = 4
    feature_decoder_depth: int = 1
    use_feature_decoder: bool = False
    tube_size: int = 2
    patch_size: int = 8


@dataclass
class TokenSequence:
    """Flattened tube tokens plus their fixed positional embeddings."""

    tokens: np.ndarray  # (N, D_in) float32
    positions: np.ndarray  # (N, d_model) float32
    grid: tuple[int, int, int]  # (N_t, N_h, N_w)


@dataclass
class MaskPlan:
    visible: np.ndarray  # sorted int64 indices
    masked: np.ndarray  # sorted int64 indices
    ratio: float


def token_grid(frames: int, height: int, width: int, tube_size: int, patch_size: int):
    if frames % tube_size != 0:
        raise ValueError(f"clip frames {frames} not divisible by tube size {tube_size}")
    if height % patch_size != 0 or width % patch_size != 0:
        raise ValueError(
            f"frame {height}x{width} not divisible by patch size {patch_size}"
        )
    return frames // tube_size, height // patch_size, width // patch_size


def _axis_sincos(positions: np.ndarray, dim: int) -> np.ndarray:
    half = dim // 2
    freqs = 1.0 / (10000.0 ** (np.arange(half, dtype=np.float64) / half))
    args = positions[:, None] * freqs[None, :]
    return np.concatenate([np.sin(args), np.cos(args)], axis=1)


def sincos_positions(grid: tuple[int, int, int], d_model: int) -> np.ndarray:
    """Fixed sinusoidal embeddings over the (t, h, w) token grid.

    Each axis gets d_model // 6 sin/cos frequency pairs; any remainder
    columns are zero so the width matches exactly.
    """
    if d_model < 6:
        raise ValueError(f"d_model must be at least 6 for 3-axis sincos, got {d_model}")
    n_t, n_h, n_w = grid
    per_axis = 2 * (d_model // 6)
    tt, hh, ww = np.meshgrid(np.arange(n_t), np.arange(n_h), np.arange(n_w), indexing="ij")
    parts = [
        _axis_sincos(tt.reshape(-1).astype(np.float64), per_axis),
        _axis_sincos(hh.reshape(-1).astype(np.float64), per_axis),
        _axis_sincos(ww.reshape(-1).astype(np.float64), per_axis),
    ]
    out = np.concatenate(parts, axis=1)
    pad = d_model - out.shape[1]
    if pad:
        out = np.concatenate([out, np.zeros((out.shape[0], pad))], axis=1)
    return out.astype(np.float32)


_TUBE_PERM = (0, 3, 5, 1, 2, 4, 6)  # (N_t, tube, C, N_h, p, N_w, p) -> (N_t, N_h, N_w, tube, C, p, p)


def tubify(clip: np.ndarray, tube_size: int, patch_size: int, d_model: int) -> TokenSequence:
    """Split a (T, C, H, W) clip into tube tokens in (t, h, w) raster order."""
    frames, channels, height, width = clip.shape
    grid = token_grid(frames, height, width, tube_size, patch_size)
    n_t, n_h, n_w = grid
    d_in = tube_size * channels * patch_size * patch_size
    blocks = clip.reshape(n_t, tube_size, channels, n_h, patch_size, n_w, patch_size)
    tokens = blocks.transpose(_TUBE_PERM).reshape(n_t * n_h * n_w, d_in)
    return TokenSequence(
        tokens=np.ascontiguousarray(tokens, dtype=np.float32),
        positions=sincos_positions(grid, d_model),
        grid=grid,
    )


def detokenize(
    tokens: np.ndarray, grid: tuple[int, int, int], channels: int, tube_size: int, patch_size: int
) -> np.ndarray:
    """Exact inverse of ``tubify`` back to (T, C, H, W)."""
    n_t, n_h, n_w = grid
    blocks = tokens.reshape(n_t, n_h, n_w, tube_size, channels, patch_size, patch_size)
    inverse = tuple(np.argsort(_TUBE_PERM))
    return np.ascontiguousarray(
        blocks.transpose(inverse).reshape(
            n_t * tube_size, channels, n_h * patch_size, n_w * patch_size
        )
    )


def random_tube_mask(num_tokens: int, ratio: float, rng: np.random.Generator) -> MaskPlan:
    """Uniformly random mask over exactly floor(ratio * N) tokens."""
    if not 0.0 <= ratio < 1.0:
        raise ValueError(f"mask ratio must be in [0, 1), got {ratio}")
    if num_tokens < 1:
        raise ValueError(f"need at least one token, got {num_tokens}")
    count = int(np.floor(ratio * num_tokens))
    perm = rng.permutation(num_tokens)
    return MaskPlan(
        visible=np.sort(perm[count:]).astype(np.int64),
        masked=np.sort(perm[:count]).astype(np.int64),
        ratio=ratio,
    )


class SequenceEncoder(nn.Module):
    """Tube projection + transformer blocks + final norm (the ViT trunk)."""

    def __init__(self, d_in: int, cfg: ModelConfig, rng: np.random.Generator):
        self.embed = nn.Linear(d_in, cfg.d_model, rng)
        self.blocks = [
            nn.Block(cfg.d_model, cfg.num_heads, cfg.mlp_ratio, rng) for _ in range(cfg.depth)
        ]
        self.norm = nn.LayerNorm(cfg.d_model)

    def __call__(self, tokens: Tensor, positions: Tensor) -> Tensor:
        x = self.embed(tokens) + positions
        for block in self.blocks:
            x = block(x)
        return self.norm(x)


class PixelDecoder(nn.Module):
    """Shallow transformer mapping assembled tokens back to pixel space.

    Re-adds fixed sinusoidal positions at decoder width so every row keeps
    direct spatial addressing regardless of what the encoder preserved.
    """

    def __init__(self, d_in: int, grid: tuple[int, int, int], cfg: ModelConfig, rng: np.random.Generator):
        self.embed = nn.Linear(cfg.d_model, cfg.decoder_width, rng)
        self.positions = sincos_positions(grid, cfg.decoder_width)
        self.blocks = [
            nn.Block(cfg.decoder_width, cfg.decoder_heads, cfg.mlp_ratio, rng)
            for _ in range(cfg.decoder_depth)
        ]
        self.norm = nn.LayerNorm(cfg.decoder_width)
        self.head = nn.Linear(cfg.decoder_width, d_in, rng)

    def __call__(self, x: Tensor) -> Tensor:
        x = self.embed(x) + Tensor(self.positions)
        for block in self.blocks:
            x = block(x)
        return self.head(self.norm(x))


class FeatureDecoder(nn.Module):
    """Optional shallow decoder over the assembled sequence (no final norm,
    so zeroed residual branches make it an exact identity)."""

    def __init__(self, cfg: ModelConfig, rng: np.random.Generator):
        self.blocks = [
            nn.Block(cfg.d_model, cfg.num_heads, cfg.mlp_ratio, rng)
            for _ in range(cfg.feature_decoder_depth)
        ]

    def __call__(self, x: Tensor) -> Tensor:
        for block in self.blocks:
            x = block(x)
        return x


class ProjectionHead(nn.Module):
    def __init__(self, d_in: int, d_out: int, rng: np.random.Generator):
        self.fc1 = nn.Linear(d_in, 2 * d_out, rng)
        self.fc2 = nn.Linear(2 * d_out, d_out, rng)

    def __call__(self, x: Tensor) -> Tensor:
        return self.fc2(ad.gelu(self.fc1(x)))


class VideoModel(nn.Module):
    """The full siamese model: gradient-trained online branch, EMA target
    branch, decoders, heads, and the optional finetuning classifier."""

    def __init__(
        self,
        cfg: ModelConfig,
        clip_frames: int,
        channels: int,
        height: int,
        width: int,
        seed: int,
    ):
        self.cfg = cfg
        self.channels = channels
        self.grid = token_grid(clip_frames, height, width, cfg.tube_size, cfg.patch_size)
        self.num_tokens = int(np.prod(self.grid))
        self.d_in = cfg.tube_size * channels * cfg.patch_size * cfg.patch_size
        self.positions = sincos_positions(self.grid, cfg.d_model)  # plain array, not learned

        rng = np.random.default_rng(np.random.SeedSequence(entropy=seed, spawn_key=(_INIT_STREAM,)))
        self.online_encoder = SequenceEncoder(self.d_in, cfg, rng)
        self.pixel_decoder = PixelDecoder(self.d_in, self.grid, cfg, rng)
        self.feature_decoder = FeatureDecoder(cfg, rng) if cfg.use_feature_decoder else None
        self.mask_token = nn.parameter(rng, (1, 1, cfg.d_model))
        self.online_projection = ProjectionHead(cfg.d_model, cfg.proj_dim, rng)
        self.online_prediction = ProjectionHead(cfg.proj_dim, cfg.proj_dim, rng)
        self.classifier: nn.Linear | None = None

        # Target branch: identical architecture and initialization, frozen.
        self.target_encoder = SequenceEncoder(self.d_in, cfg, rng)
        self.target_projection = ProjectionHead(cfg.d_model, cfg.proj_dim, rng)
        _copy_parameters(self.online_encoder, self.target_encoder)
        _copy_parameters(self.online_projection, self.target_projection)
        for _, param in self.target_encoder.named_parameters():
            param.requires_grad = False
        for _, param in self.target_projection.named_parameters():
            param.requires_grad = False

    # -- forward pieces ----------------------------------------------------

    def _positions_for(self, index: np.ndarray) -> Tensor:
        return Tensor(self.positions[index])

    def encode_online(self, visible_tokens: np.ndarray, visible_index: np.ndarray) -> Tensor:
        """Embed only the visible tokens of the masked view: (B, K, d_model)."""
        return self.online_encoder(Tensor(visible_tokens), self._positions_for(visible_index))

    def encode_target(self, tokens: np.ndarray) -> Tensor:
        """Mean-pooled target features over the full sequence; never recorded."""
        batch = tokens.shape[0]
        positions = Tensor(np.broadcast_to(self.positions, (batch, *self.positions.shape)))
        with ad.no_grad():
            encoded = self.target_encoder(Tensor(tokens), positions)
            return ad.mean(encoded, axis=1)

    def assemble_full_sequence(
        self, visible_embeddings: Tensor, visible_index: np.ndarray, masked_index: np.ndarray
    ) -> Tensor:
        """Restore raster order: encoder outputs at visible positions, a
        learned mask token plus that position's embedding elsewhere."""
        batch, num_visible, _ = visible_embeddings.shape
        num_masked = masked_index.shape[1]
        total = num_visible + num_masked
        masked_rows = self.mask_token + self._positions_for(masked_index)
        stacked = ad.concatenate([visible_embeddings, masked_rows], axis=1)
        restore = np.empty((batch, total), dtype=np.int64)
        rows = np.arange(batch)[:, None]
        restore[rows, visible_index] = np.arange(num_visible)[None, :]
        restore[rows, masked_index] = num_visible + np.arange(num_masked)[None, :]
        return ad.gather(stacked, restore)

    def pixel_decode_full(self, full_sequence: Tensor) -> Tensor:
        """Per-token pixel predictions for every position: (B, N, d_in)."""
        return self.pixel_decoder(full_sequence)

    def pixel_decode(self, full_sequence: Tensor, masked_index: np.ndarray) -> Tensor:
        """Predictions restricted to masked positions: (B, M, d_in)."""
        return ad.gather(self.pixel_decode_full(full_sequence), masked_index)

    def contrastive_feature(
        self,
        visible_embeddings: Tensor,
        visible_index: np.ndarray,
        masked_index: np.ndarray,
    ) -> Tensor:
        """Online feature for the contrastive branch: mean of the visible
        embeddings by default, or the feature decoder's mean output over the
        assembled sequence when that decoder is enabled."""
        if self.feature_decoder is None:
            return ad.mean(visible_embeddings, axis=1)
        full = self.assemble_full_sequence(visible_embeddings, visible_index, masked_index)
        return ad.mean(self.feature_decoder(full), axis=1)

    def project_predict(self, pooled: Tensor, branch: str) -> Tensor:
        if branch == "online":
            return self.online_prediction(self.online_projection(pooled))
        if branch == "target":
            with ad.no_grad():
                return self.target_projection(pooled)
        raise ValueError(f"branch must be 'online' or 'target', got {branch!r}")

    # -- finetuning ----------------------------------------------------------

    def add_classifier(self, num_classes: int, seed: int) -> None:
        rng = np.random.default_rng(np.random.SeedSequence(entropy=seed, spawn_key=(_INIT_STREAM, 1)))
        self.classifier = nn.Linear(self.cfg.d_model, num_classes, rng)

    def classify(self, tokens: np.ndarray) -> Tensor:
        """Logits from the full (unmasked) online encoder, mean-pooled."""
        if self.classifier is None:
            raise RuntimeError("classifier head not initialized; call add_classifier first")
        batch = tokens.shape[0]
        positions = Tensor(np.broadcast_to(self.positions, (batch, *self.positions.shape)))
        encoded = self.online_encoder(Tensor(tokens), positions)
        return self.classifier(ad.mean(encoded, axis=1))

    # -- parameter movement ----------------------------------------------------

    def ema_pairs(self) -> list[tuple[Tensor, Tensor]]:
        pairs = list(
            zip(self.online_encoder.parameters(), self.target_encoder.parameters())
        ) + list(zip(self.online_projection.parameters(), self.target_projection.parameters()))
        for online, target in pairs:
            if online.shape != target.shape:
                raise ValueError(
                    f"ema pair shape mismatch: {online.shape} vs {target.shape}"
                )
        return pairs

    def ema_update(self, momentum: float) -> None:
        """target <- m * target + (1 - m) * online, elementwise."""
        if not 0.0 <= momentum <= 1.0:
            raise ValueError(f"momentum must be in [0, 1], got {momentum}")
        for online, target in self.ema_pairs():
            target.data = momentum * target.data + (1.0 - momentum) * online.data

    def trainable_parameters(self) -> list[tuple[str, Tensor]]:
        return [(name, p) for name, p in self.named_parameters() if p.requires_grad]


def _copy_parameters(source: nn.Module, dest: nn.Module) -> None:
    src, dst = source.named_parameters(), dest.named_parameters()
    for (src_name, src_p), (dst_name, dst_p) in zip(src, dst, strict=True):
        if src_p.shape != dst_p.shape:
            raise ValueError(f"copy mismatch: {src_name}{src_p.shape} vs {dst_name}{dst_p.shape}")
        dst_p.data = src_p.data.copy()


# -- checkpoint serialization ---------------------------------------------------

_DTYPE_CODES = {
    np.dtype("<f4"): 0,
    np.dtype("<f8"): 1,
    np.dtype("<u4"): 2,
    np.dtype("<u8"): 3,
    np.dtype("<i8"): 4,
}
_CODE_DTYPES = {v: k for k, v in _DTYPE_CODES.items()}


def save_checkpoint(path: str | Path, entries: list[tuple[str, np.ndarray]]) -> Path:
    """Write named arrays with a manifest; identical inputs give identical bytes."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(struct.pack("<I", CHECKPOINT_VERSION))
        fh.write(struct.pack("<I", len(entries)))
        for name, array in entries:
            dtype = np.dtype(array.dtype).newbyteorder("<")
            if dtype not in _DTYPE_CODES:
                raise TypeError(f"checkpoint entry {name!r}: unsupported dtype {array.dtype}")
            encoded = name.encode("utf-8")
            fh.write(struct.pack("<H", len(encoded)))
            fh.write(encoded)
            fh.write(struct.pack("<BB", _DTYPE_CODES[dtype], array.ndim))
            fh.write(struct.pack(f"<{array.ndim}I", *array.shape))
        for _, array in entries:
            fh.write(np.ascontiguousarray(array).astype(array.dtype.newbyteorder("<")).tobytes())
    return path


def load_checkpoint(path: str | Path) -> dict[str, np.ndarray]:
    with open(path, "rb") as fh:
        magic = fh.read(4)
        if magic != CHECKPOINT_MAGIC:
            raise ValueError(f"{path}: not a checkpoint file (magic {magic!r})")
        (version,) = struct.unpack("<I", fh.read(4))
        if version != CHECKPOINT_VERSION:
            raise ValueError(f"{path}: unsupported checkpoint version {version}")
        (count,) = struct.unpack("<I", fh.read(4))
        manifest = []
        for _ in range(count):
            (name_len,) = struct.unpack("<H", fh.read(2))
            name = fh.read(name_len).decode("utf-8")
            code, ndim = struct.unpack("<BB", fh.read(2))
            shape = struct.unpack(f"<{ndim}I", fh.read(4 * ndim))
            manifest.append((name, _CODE_DTYPES[code], shape))
        out: dict[str, np.ndarray] = {}
        for name, dtype, shape in manifest:
            n_bytes = int(np.prod(shape, dtype=np.int64)) * dtype.itemsize if shape else dtype.itemsize
            out[name] = np.frombuffer(fh.read(n_bytes), dtype=dtype).reshape(shape).copy()
    return out


def model_state(model: VideoModel) -> list[tuple[str, np.ndarray]]:
    return [(f"param.{name}", p.data) for name, p in model.named_parameters()]


def load_model_state(model: VideoModel, arrays: dict[str, np.ndarray]) -> None:
    for name, param in model.named_parameters():
        key = f"param.{name}"
        if key not in arrays:
            raise KeyError(f"checkpoint missing parameter {name!r}")
        stored = arrays[key]
        if stored.shape != param.shape:
            raise ValueError(
                f"checkpoint parameter {name!r} has shape {stored.shape}, expected {param.shape}"
            )
        param.data = stored.astype(param.data.dtype, copy=True)
