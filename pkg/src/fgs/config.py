"""Flat key=value configuration shared by the config file and the CLI.

Every key in CONFIG_SCHEMA is readable from a config file line `key = value`
(with `#` comments) and from a CLI flag `--key value`; CLI values override
the file, which overrides the defaults.
"""

from .densify import DensifyConfig
from .optimize import LossWeights, OptimizeConfig
from .tracking import TrackConfig

# key -> (type, default, help); bool keys become store_true flags
CONFIG_SCHEMA = {
    "threads": (str, "single", "execution mode: single or parallel"),
    "seed": (int, 0, "rng seed for keyframe sampling and synthetic scenes"),
    "iterations": (int, 3, "map-optimization iterations per keyframe"),
    "keyframe_overlap": (float, 0.95, "overlap below this starts a tracking keyframe"),
    "mapping_stride": (int, 3, "frames after a tracking keyframe before a mapping-only one"),
    "prune_every": (int, 10, "prune the dense map every this many tracking keyframes"),
    "voxel_size": (float, 0.05, "tracking cloud downsample voxel (m)"),
    "knn": (int, 10, "neighbours for tracked-cloud covariances"),
    "max_corr_dist": (float, 0.3, "gicp correspondence cutoff (m)"),
    "gicp_iterations": (int, 30, "gicp iteration cap"),
    "step_tolerance": (float, 1e-6, "gicp convergence step norm"),
    "min_correspondences": (int, 10, "gicp divergence threshold"),
    "overlap_dist": (float, 0.1, "point-to-map distance counted as overlap (m)"),
    "cutoff_d0": (float, 0.0, "high-pass cutoff; 0 picks min(H,W)/16"),
    "spacing_high": (int, 2, "spawn lattice stride in high-frequency regions (px)"),
    "spacing_low": (int, 8, "spawn lattice stride in low-frequency regions (px)"),
    "opacity_threshold": (float, 0.9, "rendered opacity below this is insufficient"),
    "depth_diff_threshold": (float, 0.1, "frame-closer-than-render margin (m)"),
    "color_diff_threshold": (float, 0.1, "mean-channel L1 for color mismatch"),
    "alpha_h": (float, 1.0, "high-frequency spawn radius factor"),
    "alpha_l": (float, 6.0, "low-frequency spawn radius factor"),
    "densify_mode": (str, "adaptive", "spawn sizing: adaptive, dense, or sparse"),
    "prune_scale_max": (float, 0.5, "prune gaussians larger than this (m)"),
    "prune_opacity_min": (float, 0.05, "prune gaussians fainter than this"),
    "lr_position": (float, 1e-4, "position learning rate (times scene extent)"),
    "lr_scale": (float, 5e-3, "log-scale learning rate"),
    "lr_rotation": (float, 1e-3, "quaternion learning rate"),
    "lr_opacity": (float, 0.2, "opacity-logit learning rate"),
    "lr_color": (float, 2.5e-3, "color learning rate"),
    "lambda_color": (float, 0.8, "color L1 weight (SSIM gets 1 - this)"),
    "lambda_depth": (float, 0.5, "depth L1 weight"),
    "lambda_reg": (float, 0.01, "scale-regularization weight"),
    "scale_epsilon": (float, 1e-4, "regularizer target for the third scale (m)"),
    "keyframe_strategy": (str, "combined", "optimizer views: combined, covisible, or random"),
    "debug_masks": (bool, False, "dump per-keyframe mask PNGs under out/masks"),
}


class PipelineConfig:
    """Resolved run configuration; one attribute per CONFIG_SCHEMA key plus
    the dataset/source plumbing the `run` command fills in."""

    def __init__(self, **overrides):
        self.dataset = overrides.pop("dataset", "")
        self.format = overrides.pop("format", "tum")
        self.out = overrides.pop("out", "")
        for key, (_, default, _help) in CONFIG_SCHEMA.items():
            setattr(self, key, overrides.pop(key, default))
        if overrides:
            raise ValueError(f"unknown config keys: {sorted(overrides)}")
        if self.mapping_stride < 1:
            raise ValueError("mapping_stride must be >= 1")
        if self.threads not in ("single", "parallel"):
            raise ValueError("threads must be 'single' or 'parallel'")
        if self.format not in ("tum", "synthetic"):
            raise ValueError("format must be 'tum' or 'synthetic'")
        if self.densify_mode not in ("adaptive", "dense", "sparse"):
            raise ValueError("densify_mode must be adaptive, dense, or sparse")
        if self.keyframe_strategy not in ("combined", "covisible", "random"):
            raise ValueError("keyframe_strategy must be combined, covisible, or random")

    def track_config(self) -> TrackConfig:
        return TrackConfig(
            voxel_size=self.voxel_size,
            knn=self.knn,
            max_corr_dist=self.max_corr_dist,
            max_iterations=self.gicp_iterations,
            step_tolerance=self.step_tolerance,
            min_correspondences=self.min_correspondences,
            overlap_dist=self.overlap_dist,
        )

    def densify_config(self) -> DensifyConfig:
        return DensifyConfig(
            opacity_threshold=self.opacity_threshold,
            depth_diff_threshold=self.depth_diff_threshold,
            color_diff_threshold=self.color_diff_threshold,
            alpha_h=self.alpha_h,
            alpha_l=self.alpha_l,
            prune_scale_max=self.prune_scale_max,
            prune_opacity_min=self.prune_opacity_min,
            mode=self.densify_mode,
        )

    def optimize_config(self) -> OptimizeConfig:
        return OptimizeConfig(
            lr_position=self.lr_position,
            lr_scale=self.lr_scale,
            lr_rotation=self.lr_rotation,
            lr_opacity=self.lr_opacity,
            lr_color=self.lr_color,
            scale_epsilon=self.scale_epsilon,
            weights=LossWeights(color=self.lambda_color, depth=self.lambda_depth,
                                reg=self.lambda_reg),
        )


def coerce(key: str, raw: str):
    """Parse one raw string per the schema type for `key`."""
    if key not in CONFIG_SCHEMA:
        raise ValueError(f"unknown config key {key!r}")
    typ = CONFIG_SCHEMA[key][0]
    if typ is bool:
        low = raw.strip().lower()
        if low in ("1", "true", "yes", "on"):
            return True
        if low in ("0", "false", "no", "off"):
            return False
        raise ValueError(f"{key}: expected a boolean, got {raw!r}")
    try:
        return typ(raw)
    except ValueError as exc:
        raise ValueError(f"{key}: {exc}") from exc


def read_config_file(path) -> dict:
    """Parse `key = value` lines ('#' starts a comment) into typed values."""
    values = {}
    with open(path) as f:
        for lineno, line in enumerate(f, start=1):
            line = line.split("#", 1)[0].strip()
            if not line:
                continue
            key, sep, raw = line.partition("=")
            if not sep:
                raise ValueError(f"{path}:{lineno}: expected 'key = value'")
            values[key.strip()] = coerce(key.strip(), raw.strip())
    return values


def add_schema_flags(parser) -> None:
    """Mirror every schema key as a --key CLI flag (None = not provided)."""
    for key, (typ, default, help_text) in CONFIG_SCHEMA.items():
        flag = "--" + key.replace("_", "-")
        if typ is bool:
            parser.add_argument(flag, dest=key, action="store_true",
                                default=None, help=help_text)
        else:
            parser.add_argument(flag, dest=key, type=typ, default=None,
                                metavar=typ.__name__.upper(),
                                help=f"{help_text} (default {default})")


def resolve(file_values: dict, cli_values: dict) -> dict:
    """Defaults <- config file <- explicit CLI flags."""
    merged = dict(file_values)
    for key, value in cli_values.items():
        if value is not None:
            merged[key] = value
    return merged
