"""Patch-feature extraction backbones.

Two interchangeable backbones sit behind the same interface:

* ``FoundationBackbone`` wraps a frozen ViT (DINOv2 family), collects
  patch tokens from configured intermediate layers plus the final layer,
  concatenates them along the feature axis, and applies a trainable
  linear projection back to ``output_dim``.
* ``ToyBackbone`` computes per-tile color statistics plus positional
  channels and applies a fixed seeded random projection. It needs no
  weights and is a pure function of pixel values and seed, so tests and
  toy training run fully offline.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch
import torch.nn.functional as F
from PIL import Image
from torch import Tensor, nn

from .manifest import select_top_views
from .types import DoppelError, ObjectInstance, ViewCrop

IMAGENET_MEAN = (0.485, 0.456, 0.406)
IMAGENET_STD = (0.229, 0.224, 0.225)


class DecodeError(DoppelError):
    """An image file could not be read or decoded."""


class ShapeError(DoppelError):
    """Tensor dimensions do not match the configured geometry."""


class WeightsUnavailableError(DoppelError):
    """Pretrained foundation weights could not be loaded."""


@dataclass(frozen=True)
class BackboneConfig:
    """Geometry and feature settings shared by both backbone kinds."""

    kind: str = "toy"
    intermediate_layers: tuple[int, ...] = (1, 3, 5, 8)
    output_dim: int = 384
    input_size: int = 224
    patch_size: int = 14
    projection_seed: int = 0
    pixel_mean: tuple[float, float, float] | None = None
    pixel_std: tuple[float, float, float] | None = None

    def __post_init__(self):
        if self.kind not in ("foundation", "toy"):
            raise ValueError(f"kind must be 'foundation' or 'toy', got {self.kind!r}")
        if self.output_dim <= 0:
            raise ValueError("output_dim must be positive")
        layers = tuple(self.intermediate_layers)
        if any(b <= a for a, b in zip(layers, layers[1:])):
            raise ValueError("intermediate_layers must be strictly increasing")
        if self.input_size % self.patch_size != 0:
            raise ValueError(
                f"input_size {self.input_size} not divisible by patch_size "
                f"{self.patch_size}"
            )

    @property
    def grid(self) -> int:
        return self.input_size // self.patch_size

    @property
    def mean(self) -> tuple[float, float, float]:
        if self.pixel_mean is not None:
            return self.pixel_mean
        return IMAGENET_MEAN if self.kind == "foundation" else (0.0, 0.0, 0.0)

    @property
    def std(self) -> tuple[float, float, float]:
        if self.pixel_std is not None:
            return self.pixel_std
        return IMAGENET_STD if self.kind == "foundation" else (1.0, 1.0, 1.0)

    @classmethod
    def toy(cls, input_size: int = 64, patch_size: int = 16, output_dim: int = 96,
            projection_seed: int = 0) -> "BackboneConfig":
        return cls(
            kind="toy",
            input_size=input_size,
            patch_size=patch_size,
            output_dim=output_dim,
            projection_seed=projection_seed,
        )


@dataclass
class PatchFeatureTensor:
    """Per-view grid of patch feature vectors, flattened row-major."""

    patches: Tensor  # (N_p, feature_dim)
    grid_shape: tuple[int, int]

    def __post_init__(self):
        rows, cols = self.grid_shape
        if self.patches.ndim != 2 or self.patches.shape[0] != rows * cols:
            raise ShapeError(
                f"patches {tuple(self.patches.shape)} do not fill grid "
                f"{self.grid_shape}"
            )
        if not torch.isfinite(self.patches).all():
            raise ShapeError("non-finite values in patch features")

    @property
    def n_patches(self) -> int:
        return self.patches.shape[0]

    @property
    def feature_dim(self) -> int:
        return self.patches.shape[1]


def pad_to_square(
    image: np.ndarray, mask: np.ndarray
) -> tuple[np.ndarray, np.ndarray]:
    """Center-pad image (zeros) and mask (zeros) to a square canvas."""
    h, w = image.shape[:2]
    side = max(h, w)
    top, left = (side - h) // 2, (side - w) // 2
    out_img = np.zeros((side, side, 3), dtype=image.dtype)
    out_img[top : top + h, left : left + w] = image
    out_msk = np.zeros((side, side), dtype=mask.dtype)
    out_msk[top : top + h, left : left + w] = mask
    return out_img, out_msk


def preprocess_arrays(
    image: np.ndarray, mask: np.ndarray, cfg: BackboneConfig
) -> tuple[Tensor, Tensor]:
    """Pad to square, resize to input_size, normalize. Returns (image, mask).

    image: (H, W, 3) uint8; mask: (H, W) with nonzero = foreground.
    Background pixels outside the mask are retained.
    """
    if image.shape[:2] != mask.shape[:2]:
        raise ShapeError(
            f"mask {mask.shape[:2]} does not match image {image.shape[:2]}"
        )
    image, mask = pad_to_square(image, (mask > 0).astype(np.uint8))
    size = (cfg.input_size, cfg.input_size)
    img = Image.fromarray(image).resize(size, Image.BILINEAR)
    msk = Image.fromarray(mask * 255).resize(size, Image.NEAREST)
    x = torch.from_numpy(np.asarray(img, dtype=np.float32) / 255.0)
    x = x.permute(2, 0, 1)
    mean = torch.tensor(cfg.mean, dtype=torch.float32).view(3, 1, 1)
    std = torch.tensor(cfg.std, dtype=torch.float32).view(3, 1, 1)
    x = (x - mean) / std
    m = torch.from_numpy(np.asarray(msk) > 127)
    return x, m


def load_crop(crop: ViewCrop) -> tuple[np.ndarray, np.ndarray]:
    """Read a crop and its mask from disk as numpy arrays."""
    try:
        image = np.asarray(Image.open(crop.image_ref).convert("RGB"))
        mask = np.asarray(Image.open(crop.mask_ref).convert("L"))
    except (OSError, SyntaxError) as e:
        raise DecodeError(f"cannot decode crop {crop.image_ref}: {e}") from None
    return image, mask


def preprocess(crop: ViewCrop, cfg: BackboneConfig) -> tuple[Tensor, Tensor]:
    """Load a crop from disk and normalize it for the backbone."""
    image, mask = load_crop(crop)
    return preprocess_arrays(image, mask, cfg)


class ToyBackbone(nn.Module):
    """Deterministic tile-statistics backbone with a fixed random projection.

    Per tile: mean RGB (3 channels) plus the tile's row/col position
    scaled to [-1, 1] (2 channels), projected to output_dim with a
    seeded, frozen random matrix.
    """

    RAW_CHANNELS = 5

    def __init__(self, cfg: BackboneConfig):
        super().__init__()
        self.cfg = cfg
        rng = np.random.default_rng(cfg.projection_seed)
        proj = rng.standard_normal((self.RAW_CHANNELS, cfg.output_dim))
        proj /= np.sqrt(self.RAW_CHANNELS)
        self.register_buffer("projection", torch.tensor(proj, dtype=torch.float32))
        g = cfg.grid
        if g > 1:
            coords = torch.linspace(-1.0, 1.0, g)
        else:
            coords = torch.zeros(1)
        rows = coords.repeat_interleave(g)
        cols = coords.repeat(g)
        self.register_buffer("positions", torch.stack([rows, cols], dim=1))

    @property
    def grid_shape(self) -> tuple[int, int]:
        return (self.cfg.grid, self.cfg.grid)

    def tile_statistics(self, images: Tensor) -> Tensor:
        """(B, 3, S, S) -> (B, N_p, 5) raw per-tile features."""
        b, c, s, _ = images.shape
        if s != self.cfg.input_size or c != 3:
            raise ShapeError(
                f"expected (B, 3, {self.cfg.input_size}, {self.cfg.input_size}), "
                f"got {tuple(images.shape)}"
            )
        g, p = self.cfg.grid, self.cfg.patch_size
        tiles = images.reshape(b, 3, g, p, g, p).mean(dim=(3, 5))  # (B, 3, g, g)
        colors = tiles.permute(0, 2, 3, 1).reshape(b, g * g, 3)
        pos = self.positions.unsqueeze(0).expand(b, -1, -1)
        return torch.cat([colors, pos], dim=2)

    def forward(self, images: Tensor) -> Tensor:
        """(B, 3, S, S) -> (B, N_p, output_dim)."""
        with torch.no_grad():
            return self.tile_statistics(images) @ self.projection

    def last_layer_features(self, images: Tensor) -> Tensor:
        """Raw feature baseline input; same as the projected output here."""
        return self.forward(images)

    def extract_patches(self, image: Tensor) -> PatchFeatureTensor:
        out = self.forward(image.unsqueeze(0))[0]
        return PatchFeatureTensor(out, self.grid_shape)

    def weights_checksum(self) -> float:
        return float(self.projection.abs().sum())


class FoundationBackbone(nn.Module):
    """Frozen ViT feature extractor with a trainable multi-layer projection.

    The wrapped model must follow the HF DINOv2 interface: calling it with
    ``output_hidden_states=True`` yields per-block hidden states with a
    leading CLS token. Intermediate layer indices are 1-based block
    outputs (``hidden_states[0]`` is the embedding output).
    """

    def __init__(self, cfg: BackboneConfig, vit: nn.Module):
        super().__init__()
        if cfg.kind != "foundation":
            raise ValueError("FoundationBackbone requires kind='foundation'")
        self.cfg = cfg
        n_layers = int(vit.config.num_hidden_layers)
        if max(cfg.intermediate_layers) > n_layers:
            raise ValueError(
                f"intermediate layer {max(cfg.intermediate_layers)} exceeds "
                f"model depth {n_layers}"
            )
        if int(vit.config.patch_size) != cfg.patch_size:
            raise ValueError(
                f"config patch_size {cfg.patch_size} != model patch size "
                f"{vit.config.patch_size}"
            )
        self.vit = vit
        self.vit.requires_grad_(False)
        self.vit.eval()
        hidden = int(vit.config.hidden_size)
        concat_dim = hidden * (len(cfg.intermediate_layers) + 1)
        self.projection = nn.Linear(concat_dim, cfg.output_dim)

    @classmethod
    def pretrained(
        cls, cfg: BackboneConfig, model_name: str = "facebook/dinov2-small"
    ) -> "FoundationBackbone":
        try:
            from transformers import AutoModel

            vit = AutoModel.from_pretrained(model_name)
        except Exception as e:
            raise WeightsUnavailableError(
                f"cannot load {model_name!r} (offline?): {e}"
            ) from None
        return cls(cfg, vit)

    @classmethod
    def random_init(
        cls,
        cfg: BackboneConfig,
        seed: int = 0,
        hidden_size: int = 32,
        num_layers: int = 9,
        num_heads: int = 4,
    ) -> "FoundationBackbone":
        """Small randomly initialized ViT for offline tests of this adapter."""
        from transformers import Dinov2Config, Dinov2Model

        torch.manual_seed(seed)
        vit = Dinov2Model(
            Dinov2Config(
                hidden_size=hidden_size,
                num_hidden_layers=num_layers,
                num_attention_heads=num_heads,
                intermediate_size=hidden_size * 2,
                patch_size=cfg.patch_size,
                image_size=cfg.input_size,
            )
        )
        return cls(cfg, vit)

    def train(self, mode: bool = True):
        super().train(mode)
        self.vit.eval()  # frozen contract: backbone never leaves eval mode
        return self

    @property
    def grid_shape(self) -> tuple[int, int]:
        return (self.cfg.grid, self.cfg.grid)

    def _check_size(self, images: Tensor):
        if images.ndim != 4 or images.shape[1] != 3 or (
            images.shape[2] != self.cfg.input_size
            or images.shape[3] != self.cfg.input_size
        ):
            raise ShapeError(
                f"expected (B, 3, {self.cfg.input_size}, {self.cfg.input_size}), "
                f"got {tuple(images.shape)}"
            )

    def forward(self, images: Tensor) -> Tensor:
        """(B, 3, S, S) -> (B, N_p, output_dim)."""
        self._check_size(images)
        with torch.no_grad():
            out = self.vit(images, output_hidden_states=True)
        states = [out.hidden_states[i] for i in self.cfg.intermediate_layers]
        states.append(out.last_hidden_state)
        tokens = torch.cat(states, dim=-1)[:, 1:, :]  # drop CLS
        return self.projection(tokens)

    def last_layer_features(self, images: Tensor) -> Tensor:
        """Final-layer patch tokens without the trained projection."""
        self._check_size(images)
        with torch.no_grad():
            out = self.vit(images)
        return out.last_hidden_state[:, 1:, :]

    def extract_patches(self, image: Tensor) -> PatchFeatureTensor:
        out = self.forward(image.unsqueeze(0))[0]
        return PatchFeatureTensor(out, self.grid_shape)

    def weights_checksum(self) -> float:
        with torch.no_grad():
            return float(sum(p.abs().sum() for p in self.vit.parameters()))


Backbone = ToyBackbone | FoundationBackbone


def build_backbone(cfg: BackboneConfig, vit: nn.Module | None = None) -> Backbone:
    if cfg.kind == "toy":
        return ToyBackbone(cfg)
    if vit is not None:
        return FoundationBackbone(cfg, vit)
    return FoundationBackbone.pretrained(cfg)


def extract_patches(image: Tensor, backbone: Backbone) -> PatchFeatureTensor:
    """Run one normalized image through a backbone."""
    return backbone.extract_patches(image)


def pooled_last_layer(
    obj: ObjectInstance, backbone: Backbone, k: int
) -> Tensor:
    """Mean-pool last-layer patch features of the top-k views into one vector."""
    views = select_top_views(obj, k)
    images = torch.stack(
        [preprocess(v, backbone.cfg)[0] for v in views]
    )
    feats = backbone.last_layer_features(images)  # (V, N_p, D)
    return feats.mean(dim=(0, 1))


def raw_feature_similarity(
    a: ObjectInstance, b: ObjectInstance, backbone: Backbone, k: int = 5
) -> float:
    """Training-free baseline: clamped cosine of pooled last-layer features."""
    va = pooled_last_layer(a, backbone, k)
    vb = pooled_last_layer(b, backbone, k)
    cos = F.cosine_similarity(va.unsqueeze(0), vb.unsqueeze(0)).item()
    return float(min(1.0, max(0.0, cos)))
