from __future__ import annotations

import dataclasses
from dataclasses import dataclass

__all__ = ["ViTConfig", "PRESETS", "REFERENCE_PARAMS", "preset_model", "count_params"]


@dataclass(frozen=True)
class ViTConfig:
    """Shape of a ViT encoder + multi-label head.

    ``mlp_layers`` counts the hidden ``mlp_size``-wide linear maps of each
    encoder MLP block; a final linear map projects back to ``model_dim``.
    ``image_width`` defaults to ``image_size`` (square input).

    ``input_mode="gaf"`` scores each content's GAF image separately
    (``n_classes == 1``); ``"matrix"`` feeds the whole count history as one
    image and predicts every content at once.
    """

    n_layers: int = 1
    model_dim: int = 32
    n_heads: int = 8
    mlp_layers: int = 1
    mlp_size: int = 256
    patch_size: int = 5
    image_size: int = 25
    n_classes: int = 1
    image_width: int | None = None
    layer_norm_eps: float = 1e-6
    init_std: float = 0.02
    input_mode: str = "gaf"
    gaf_scale: str = "sample"

    def __post_init__(self):
        for name in ("n_layers", "model_dim", "n_heads", "mlp_layers", "mlp_size",
                     "patch_size", "image_size", "n_classes"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be >= 1")
        if self.input_mode not in ("gaf", "matrix"):
            raise ValueError(f"input_mode must be 'gaf' or 'matrix', got {self.input_mode!r}")
        if self.model_dim % self.n_heads:
            raise ValueError(
                f"model_dim {self.model_dim} is not divisible by n_heads {self.n_heads} "
                "(head dimension must be model_dim / n_heads)"
            )
        if self.image_size % self.patch_size or self.width % self.patch_size:
            raise ValueError(
                f"image {self.image_size}x{self.width} is not divisible into "
                f"{self.patch_size}x{self.patch_size} patches"
            )

    @property
    def width(self) -> int:
        return self.image_width if self.image_width is not None else self.image_size

    @property
    def head_dim(self) -> int:
        return self.model_dim // self.n_heads

    @property
    def n_patches(self) -> int:
        return (self.image_size // self.patch_size) * (self.width // self.patch_size)

    def replace(self, **changes) -> "ViTConfig":
        return dataclasses.replace(self, **changes)

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "ViTConfig":
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown ViTConfig keys: {sorted(unknown)}")
        return cls(**d)


# preset variants: (layers, model dim, MLP layers, MLP size, heads)
PRESETS = {
    1: (1, 32, 1, 256, 8),
    2: (1, 64, 1, 256, 8),
    3: (1, 128, 1, 256, 8),
    4: (2, 128, 1, 256, 8),
    5: (1, 128, 2, 256, 8),
    6: (1, 128, 3, 256, 6),
    7: (1, 128, 3, 256, 8),
    8: (1, 128, 3, 256, 10),
    9: (1, 128, 1, 512, 8),
}

# published parameter counts for the presets; ours differ (head width)
REFERENCE_PARAMS = {
    1: 887_140, 2: 1_822_055, 3: 3_913_063, 4: 4_506_983, 5: 3_978_852,
    6: 3_912_807, 7: 4_044_644, 8: 4_176_487, 9: 7_215_719,
}


def preset_model(model_id: int, **overrides) -> ViTConfig:
    """Preset variant ``model_id`` (1..9) with 25x25 input and 5x5 patches.

    Variants whose head count does not divide the model dimension (6 and 8)
    cannot be built and raise ``ValueError``.
    """
    if model_id not in PRESETS:
        raise ValueError(f"model id must be in 1..9, got {model_id}")
    layers, dim, mlp_layers, mlp_size, heads = PRESETS[model_id]
    if dim % heads:
        raise ValueError(
            f"model {model_id} is not constructible: d={dim} is not divisible by "
            f"h={heads}, so the head dimension d/h is not an integer"
        )
    params = dict(n_layers=layers, model_dim=dim, mlp_layers=mlp_layers, mlp_size=mlp_size, n_heads=heads)
    params.update(overrides)
    return ViTConfig(**params)


def count_params(config: ViTConfig) -> int:
    d, s2 = config.model_dim, config.patch_size**2
    n = config.n_patches
    total = s2 * d + (n + 1) * d + d  # patch projection, position embeddings, class token
    mlp_widths = [d] + [config.mlp_size] * config.mlp_layers + [d]
    mlp = sum(a * b + b for a, b in zip(mlp_widths[:-1], mlp_widths[1:]))
    per_layer = 3 * d * d + d * d + 4 * d + mlp  # QKV for all heads, W^MSA, two layer norms
    total += config.n_layers * per_layer
    total += 2 * d + d * config.n_classes + config.n_classes  # head layer norm + linear
    return total
