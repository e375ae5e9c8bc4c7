"""Architecture configuration shared by the live model and the cost model."""

from __future__ import annotations

import dataclasses
import json
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path

from .asa import AsaSchedule
from .errors import ConfigError

COMPRESSION_MODES = ("none", "two_branch", "2x", "4x", "stacked_2x")
PR_MODES = ("off", "recon_only", "compressed_only", "both")
MODULATION_MODES = ("adaln", "adaln_single", "adaln_affine")
VARIANTS = ("mmdit_dual_stream", "dit_single_stream")


@dataclass(frozen=True)
class ModelConfig:
    width: int = 192
    head_count: int = 6
    block_groups: tuple[int, int, int] = (1, 4, 1)
    ffn_multiplier: int = 3
    asa_schedule: AsaSchedule = field(default_factory=lambda: AsaSchedule.from_pairs([(1, 1), (4, 1), (2, 2)]))
    compression: str = "two_branch"
    use_skip: bool = True
    compress_hidden: int | None = None  # default width // 2
    recon_hidden: int | None = None  # default width // 2
    fuse_hidden: int | None = None  # default width
    position_reinforcement: str = "recon_only"
    modulation_mode: str = "adaln_affine"
    variant: str = "mmdit_dual_stream"
    patch_size: int = 4
    in_channels: int = 3
    out_channels: int | None = None
    image_size: tuple[int, int] = (32, 32)
    num_classes: int = 18
    context_width: int | None = None
    vocab_hash_size: int = 0
    freq_dim: int = 256
    norm_eps: float = 1e-6
    name: str = "micro"

    def __post_init__(self):
        self.validate()

    # -- derived quantities ---------------------------------------------------

    @property
    def head_dim(self) -> int:
        return self.width // self.head_count

    @property
    def depth(self) -> int:
        return sum(self.block_groups)

    @property
    def compression_enabled(self) -> bool:
        return self.compression != "none"

    @property
    def grid(self) -> tuple[int, int]:
        return self.image_size[0] // self.patch_size, self.image_size[1] // self.patch_size

    @property
    def tokens(self) -> int:
        h, w = self.grid
        return h * w

    @property
    def patch_dim(self) -> int:
        return self.in_channels * self.patch_size ** 2

    @property
    def out_dim(self) -> int:
        return (self.out_channels or self.in_channels) * self.patch_size ** 2

    @property
    def ctx_width(self) -> int:
        return self.context_width or self.width

    @property
    def dual_stream(self) -> bool:
        return self.variant == "mmdit_dual_stream"

    @property
    def branch_ratios(self) -> tuple[int, ...]:
        return {"two_branch": (2, 4), "2x": (2,), "4x": (4,), "stacked_2x": (2,), "none": ()}[self.compression]

    @property
    def hidden_compress(self) -> int:
        return self.compress_hidden or self.width // 2

    @property
    def hidden_recon(self) -> int:
        return self.recon_hidden or self.width // 2

    @property
    def hidden_fuse(self) -> int:
        return self.fuse_hidden or self.width

    def block_stages(self, grid: tuple[int, int] | None = None) -> list[tuple[str, int, int]]:
        """``(stage_name, height, width)`` of the token grid seen by every block, in order.

        For ``two_branch``/``2x``/``4x`` the middle stage is the joint compressed
        sequence, reported as ``(name, length, 1)``.
        """
        h, w = grid or self.grid
        n1, n2, n3 = self.block_groups
        if not self.compression_enabled:
            return [("full", h, w)] * self.depth
        stages = [("full", h, w)] * n1
        if self.compression == "stacked_2x":
            outer = n2 // 4
            inner = n2 - 2 * outer
            stages += [("half", h // 2, w // 2)] * outer
            stages += [("quarter", h // 4, w // 4)] * inner
            stages += [("half", h // 2, w // 2)] * outer
        else:
            joint = sum((h // r) * (w // r) for r in self.branch_ratios)
            stages += [("compressed", joint, 1)] * n2
        stages += [("full", h, w)] * n3
        return stages

    # -- validation -----------------------------------------------------------

    def validate(self, grid: tuple[int, int] | None = None) -> None:
        if self.width < 1 or self.head_count < 1 or self.width % self.head_count:
            raise ConfigError(f"width {self.width} must equal head_count ({self.head_count}) x head_dim")
        if len(self.block_groups) != 3 or min(self.block_groups) < 0 or self.depth < 1:
            raise ConfigError(f"block_groups must be three non-negative counts with a positive sum, got {self.block_groups}")
        for label, value, allowed in (
            ("compression", self.compression, COMPRESSION_MODES),
            ("position_reinforcement", self.position_reinforcement, PR_MODES),
            ("modulation_mode", self.modulation_mode, MODULATION_MODES),
            ("variant", self.variant, VARIANTS),
        ):
            if value not in allowed:
                raise ConfigError(f"{label} must be one of {allowed}, got {value!r}")
        if self.width % 4:
            raise ConfigError(f"width {self.width} must be divisible by 4 for the 2D positional table")
        if self.image_size[0] % self.patch_size or self.image_size[1] % self.patch_size:
            raise ConfigError(f"image size {self.image_size} is not divisible by patch size {self.patch_size}")
        h, w = grid or self.grid
        if self.compression_enabled:
            factor = 4
            if h % factor or w % factor:
                raise ConfigError(f"token grid {h}x{w} must be divisible by {factor} when compression is enabled")
        for i, (stage, a, b) in enumerate(self.block_stages((h, w))):
            length = a * b
            pattern = self.asa_schedule.pattern_for(i)
            if length % (pattern.region_num * pattern.chunk_size):
                raise ConfigError(
                    f"block {i} ({stage} stage): ASA pattern {pattern} does not divide "
                    f"L={length} (s={pattern.region_num}, n={pattern.chunk_size})"
                )
        if self.variant == "dit_single_stream" and self.num_classes < 1:
            raise ConfigError("single-stream variant is class-conditional and needs num_classes >= 1")

    # -- serialization --------------------------------------------------------

    def to_dict(self) -> dict:
        out = dataclasses.asdict(self)
        out["asa_schedule"] = self.asa_schedule.to_pairs()
        out["block_groups"] = list(self.block_groups)
        out["image_size"] = list(self.image_size)
        return out

    @classmethod
    def from_dict(cls, data: dict) -> ModelConfig:
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = sorted(set(data) - known)
        if unknown:
            raise ConfigError(f"unknown model config keys: {unknown}")
        kwargs = dict(data)
        if "asa_schedule" in kwargs:
            kwargs["asa_schedule"] = AsaSchedule.from_pairs(kwargs["asa_schedule"])
        for key in ("block_groups", "image_size"):
            if key in kwargs:
                kwargs[key] = tuple(int(v) for v in kwargs[key])
        return cls(**kwargs)

    def replace(self, **changes) -> ModelConfig:
        return dataclasses.replace(self, **changes)


def micro() -> ModelConfig:
    """Desk-scale class-conditional model trained in the smoke tests (32x32 RGB, 8x8 tokens)."""
    return ModelConfig()


def dit_l2() -> ModelConfig:
    """Plain DiT-L/2 baseline at 256px with an 8x latent (16x16 tokens)."""
    return ModelConfig(
        width=1024,
        head_count=16,
        block_groups=(4, 16, 4),
        ffn_multiplier=4,
        asa_schedule=AsaSchedule.full(),
        compression="none",
        position_reinforcement="off",
        modulation_mode="adaln",
        variant="dit_single_stream",
        patch_size=2,
        in_channels=4,
        image_size=(32, 32),
        num_classes=1000,
        name="dit_l2",
    )


def two_branch() -> ModelConfig:
    """DiT-L/2 with multi-path compression, position reinforcement and AdaLN-affine."""
    return dit_l2().replace(
        compression="two_branch",
        position_reinforcement="recon_only",
        modulation_mode="adaln_affine",
        name="two_branch",
    )


def emmdit_512() -> ModelConfig:
    """Text-to-image configuration: 24 blocks, 24 heads x 32 channels, 32x tokenizer at 512px."""
    return ModelConfig(
        width=768,
        head_count=24,
        block_groups=(4, 16, 4),
        ffn_multiplier=3,
        asa_schedule=AsaSchedule.from_pairs([(1, 1), (4, 1), (4, 4)]),
        compression="two_branch",
        position_reinforcement="recon_only",
        modulation_mode="adaln_affine",
        variant="mmdit_dual_stream",
        patch_size=1,
        in_channels=32,
        image_size=(16, 16),
        num_classes=0,
        vocab_hash_size=4096,
        name="emmdit_512",
    )


PRESETS = {"micro": micro, "dit_l2": dit_l2, "two_branch": two_branch, "emmdit_512": emmdit_512}


def read_config_document(path_or_name: str) -> dict | None:
    """JSON document from a file path or a bundled config name; None if neither exists."""
    path = Path(path_or_name)
    if path.exists():
        return json.loads(path.read_text())
    stem = path.name[:-5] if path.name.endswith(".json") else path.name
    bundled = resources.files("emmdit.configs") / f"{stem}.json"
    if bundled.is_file():
        return json.loads(bundled.read_text())
    return None


def load_config(path_or_name: str) -> ModelConfig:
    """Load a model config from a JSON file, a bundled config file name, or a preset name.

    A JSON document with a ``"model"`` section (an experiment config) is accepted too;
    that section may itself name a preset or file.
    """
    data = read_config_document(path_or_name)
    if data is None:
        stem = Path(path_or_name).name.removesuffix(".json")
        if stem in PRESETS:
            return PRESETS[stem]()
        raise ConfigError(f"no config file or preset named {path_or_name!r}")
    if "model" in data:
        data = data["model"]
        if isinstance(data, str):
            return load_config(data)
    return ModelConfig.from_dict(data)
