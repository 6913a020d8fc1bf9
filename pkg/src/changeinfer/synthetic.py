"""Seeded synthetic static-camera sequences: textured background, moving boxes, noise."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ConfigError
from .tensor_core import DTYPE


@dataclass
class SyntheticConfig:
    height: int = 128
    width: int = 128
    channels: int = 3
    n_frames: int = 20
    n_objects: int = 1
    object_size: tuple[int, int] = (8, 8)     # (rows, cols)
    velocity: tuple[int, int] = (1, 0)        # (dx, dy) in pixels per frame
    noise_std: float = 0.0
    seed: int = 0

    def __post_init__(self):
        if np.isscalar(self.object_size):
            self.object_size = (int(self.object_size), int(self.object_size))
        self.object_size = tuple(int(v) for v in self.object_size)
        self.velocity = tuple(int(v) for v in self.velocity)
        oh, ow = self.object_size
        if self.height < 1 or self.width < 1 or self.channels < 1:
            raise ConfigError(f"invalid frame geometry {self.channels}x{self.height}x{self.width}")
        if self.n_frames < 1 or self.n_objects < 0:
            raise ConfigError("n_frames must be >= 1 and n_objects >= 0")
        if self.n_objects and not (1 <= oh <= self.height and 1 <= ow <= self.width):
            raise ConfigError(f"object {oh}x{ow} does not fit in a {self.height}x{self.width} frame")
        if self.noise_std < 0:
            raise ConfigError("noise_std must be >= 0")


def _bounce(p0: int, v: int, t: int, span: int) -> int:
    """Position after ``t`` steps moving at ``v`` inside ``[0, span]`` with reflection."""
    if span == 0:
        return 0
    x = (p0 + v * t) % (2 * span)
    return x if x <= span else 2 * span - x


def gen_synthetic(cfg: SyntheticConfig) -> list[np.ndarray]:
    """Frames of shape ``(channels, height, width)`` in [0, 1] (before noise)."""
    rng = np.random.default_rng(cfg.seed)
    c, h, w = cfg.channels, cfg.height, cfg.width
    # Blocky low-frequency texture plus fine grain, so the background is not flat.
    coarse = rng.uniform(0.2, 0.8, (c, -(-h // 8), -(-w // 8)))
    background = np.kron(coarse, np.ones((8, 8)))[:, :h, :w] + rng.uniform(-0.05, 0.05, (c, h, w))
    background = background.astype(DTYPE)

    oh, ow = cfg.object_size
    objects = []
    for _ in range(cfg.n_objects):
        color = rng.uniform(0.0, 1.0, c).astype(DTYPE)
        y0 = int(rng.integers(0, h - oh + 1))
        x0 = int(rng.integers(0, w - ow + 1))
        objects.append((color, y0, x0))

    noise_rng = np.random.default_rng([cfg.seed, 1])
    dx, dy = cfg.velocity
    frames = []
    for t in range(cfg.n_frames):
        f = background.copy()
        for color, y0, x0 in objects:
            y = _bounce(y0, dy, t, h - oh)
            x = _bounce(x0, dx, t, w - ow)
            f[:, y:y + oh, x:x + ow] = color[:, None, None]
        if cfg.noise_std > 0:
            f += (cfg.noise_std * noise_rng.standard_normal(f.shape)).astype(DTYPE)
        frames.append(f)
    return frames


def object_coverage(cfg: SyntheticConfig) -> float:
    """Upper bound on the fraction of pixels covered by objects in one frame."""
    oh, ow = cfg.object_size
    return cfg.n_objects * oh * ow / (cfg.height * cfg.width)
