"""Procedural micro visual-QA task: a glyph hidden in a noisy canvas.

The construction makes zooming genuinely necessary. Glyph bitmaps are built
from 2x2 quads that each light exactly half their cells, and glyphs are
placed on a lattice that keeps every quad inside one averaging block of the
low-resolution observation. Block averages therefore depend only on how many
quads a block covers, never on which symbol was drawn: the observation
reveals where the glyph is but provably nothing about which one it is, while
a correctly aimed crop shows the full cell pattern.
"""

from __future__ import annotations

import enum
import json
import string
from dataclasses import dataclass
from functools import lru_cache
from pathlib import Path

import numpy as np

from .errors import ConfigError
from .raster import Raster, area_downsample, downsize_long_side, read_pgm, resize_nearest, write_pgm
from .reward import AnswerKey
from .zoomtool import Keypoint, ZoomConfig, crop_window_origin, zoom

QUESTION_TEXT = "What symbol is hidden in the image?"
BG_MEAN = 0.35
GLYPH_LATTICE = 4  # keeps every 2x2 quad inside a single averaging block
EASY_SCALE = 3
_PATTERN_SEED = 62003


class Difficulty(enum.Enum):
    REQUIRES_ZOOM = "requires_zoom"
    SOLVABLE_WITHOUT_ZOOM = "solvable_without_zoom"


@dataclass(frozen=True)
class EnvConfig:
    canvas_size: int = 64
    obs_size: int = 16
    glyph_size: int = 6
    alphabet_size: int = 8
    noise_std: float = 0.1
    rng_seed: int = 0
    easy_fraction: float = 0.0

    @property
    def block_factor(self) -> int:
        return self.canvas_size // self.obs_size

    def validate(self) -> None:
        if self.obs_size < 1 or self.canvas_size % self.obs_size != 0:
            raise ConfigError("obs_size must divide canvas_size")
        if self.glyph_size < 2 or self.glyph_size % 2 != 0:
            raise ConfigError("glyph_size must be an even integer >= 2")
        if self.glyph_size * EASY_SCALE > self.canvas_size:
            raise ConfigError("glyph (at its enlarged scale) must fit inside the canvas")
        if not 2 <= self.alphabet_size <= len(string.ascii_uppercase):
            raise ConfigError("alphabet_size must lie in [2, 26]")
        if self.noise_std < 0:
            raise ConfigError("noise_std must be >= 0")
        if not 0.0 <= self.easy_fraction <= 1.0:
            raise ConfigError("easy_fraction must lie in [0, 1]")


def symbol_names(k: int) -> tuple[str, ...]:
    return tuple(string.ascii_uppercase[:k])


@lru_cache(maxsize=8)
def glyph_patterns(k: int, glyph_size: int = 6) -> np.ndarray:
    """(k, glyph_size, glyph_size) binary bitmaps. Every 2x2 quad lights
    exactly 2 of its 4 cells (so all patterns share every possible block
    sum), and pairwise Hamming distance is at least size^2 / 3, which keeps
    nearest-pattern decoding of a clean crop unambiguous."""
    quads = glyph_size // 2
    min_distance = glyph_size * glyph_size // 3
    rng = np.random.default_rng(_PATTERN_SEED)
    patterns: list[np.ndarray] = []
    for _ in range(200_000):
        if len(patterns) == k:
            break
        pattern = np.zeros((glyph_size, glyph_size), dtype=np.int64)
        for qy in range(quads):
            for qx in range(quads):
                for cell in rng.choice(4, size=2, replace=False):
                    pattern[qy * 2 + cell // 2, qx * 2 + cell % 2] = 1
        if all(int(np.sum(pattern != prior)) >= min_distance for prior in patterns):
            patterns.append(pattern)
    if len(patterns) < k:
        raise ConfigError(f"could not find {k} patterns with pairwise distance {min_distance}")
    return np.stack(patterns)


@dataclass(frozen=True)
class SyntheticSample:
    sample_id: int
    canvas: Raster
    glyph_symbol: str
    glyph_center: Keypoint
    question: str
    answer_key: AnswerKey
    difficulty: Difficulty

    @property
    def glyph_scale(self) -> int:
        return EASY_SCALE if self.difficulty is Difficulty.SOLVABLE_WITHOUT_ZOOM else 1


def _glyph_extent(cfg: EnvConfig, difficulty: Difficulty) -> int:
    scale = EASY_SCALE if difficulty is Difficulty.SOLVABLE_WITHOUT_ZOOM else 1
    return cfg.glyph_size * scale


def glyph_top_left(sample: SyntheticSample, cfg: EnvConfig) -> tuple[int, int]:
    half = _glyph_extent(cfg, sample.difficulty) // 2
    return (sample.glyph_center.x - half, sample.glyph_center.y - half)


def _stamp(canvas: np.ndarray, pattern: np.ndarray, top_left: tuple[int, int], scale: int) -> None:
    block = np.kron(pattern, np.ones((scale, scale))).astype(np.float64)
    x, y = top_left
    canvas[y : y + block.shape[0], x : x + block.shape[1]] = block


def _decode_bitmap(bitmap: np.ndarray, patterns: np.ndarray) -> int:
    distances = np.sum(patterns != bitmap.round().astype(np.int64), axis=(1, 2))
    return int(np.argmin(distances))


def generate(cfg: EnvConfig, n: int) -> list[SyntheticSample]:
    """Deterministic in (cfg, n); each sample draws from its own seeded
    stream, so generation parallelizes by index without changing output."""
    cfg.validate()
    if n < 1:
        raise ValueError("n must be >= 1")
    patterns = glyph_patterns(cfg.alphabet_size, cfg.glyph_size)
    names = symbol_names(cfg.alphabet_size)
    samples: list[SyntheticSample] = []
    for i in range(n):
        rng = np.random.default_rng([cfg.rng_seed, i])
        easy = bool(rng.random() < cfg.easy_fraction)
        difficulty = Difficulty.SOLVABLE_WITHOUT_ZOOM if easy else Difficulty.REQUIRES_ZOOM
        extent = _glyph_extent(cfg, difficulty)
        positions = np.arange(0, cfg.canvas_size - extent + 1, GLYPH_LATTICE)
        tx = int(rng.choice(positions))
        ty = int(rng.choice(positions))
        sym = int(rng.integers(cfg.alphabet_size))
        pixels = np.clip(
            rng.normal(BG_MEAN, cfg.noise_std, (cfg.canvas_size, cfg.canvas_size)), 0.0, 1.0
        )
        scale = EASY_SCALE if easy else 1
        _stamp(pixels, patterns[sym], (tx, ty), scale)
        clean = np.kron(patterns[sym], np.ones((scale, scale)))
        recovered = _decode_bitmap(area_downsample(Raster(clean), scale).pixels, patterns)
        if recovered != sym:
            raise ConfigError("pattern alphabet failed its rendering self-check")
        samples.append(
            SyntheticSample(
                sample_id=i,
                canvas=Raster(pixels),
                glyph_symbol=names[sym],
                glyph_center=Keypoint(tx + extent // 2, ty + extent // 2),
                question=QUESTION_TEXT,
                answer_key=AnswerKey.of(names[sym]),
                difficulty=difficulty,
            )
        )
    return samples


def observe(sample: SyntheticSample, cfg: EnvConfig) -> Raster:
    """Low-resolution view of the canvas (an area average)."""
    return downsize_long_side(sample.canvas, cfg.obs_size)


# --- oracle decoders (calibration only; the policy never sees these) ---


class OracleDecoder(enum.Enum):
    GLOBAL_ONLY = "global_only"
    ZOOM_AT_TRUTH = "zoom_at_truth"


def _expected_canvas(sample: SyntheticSample, cfg: EnvConfig, symbol_idx: int) -> np.ndarray:
    pixels = np.full((cfg.canvas_size, cfg.canvas_size), BG_MEAN)
    patterns = glyph_patterns(cfg.alphabet_size, cfg.glyph_size)
    _stamp(pixels, patterns[symbol_idx], glyph_top_left(sample, cfg), sample.glyph_scale)
    return pixels


def expected_observation(sample: SyntheticSample, cfg: EnvConfig, symbol_idx: int) -> np.ndarray:
    return area_downsample(Raster(_expected_canvas(sample, cfg, symbol_idx)), cfg.block_factor).pixels


def expected_window(
    sample: SyntheticSample, cfg: EnvConfig, crop_size: int, symbol_idx: int
) -> np.ndarray:
    ox, oy = crop_window_origin(
        cfg.canvas_size, cfg.canvas_size, sample.glyph_center, crop_size
    )
    w = min(crop_size, cfg.canvas_size)
    return _expected_canvas(sample, cfg, symbol_idx)[oy : oy + w, ox : ox + w]


def decode_global_only(sample: SyntheticSample, cfg: EnvConfig) -> str:
    """Template match on the observation, with the glyph location and scale
    given to the decoder; the symbol templates of zoom-requiring samples are
    identical by construction, so template matching cannot beat chance."""
    obs = observe(sample, cfg).pixels
    f = cfg.block_factor
    tx, ty = glyph_top_left(sample, cfg)
    extent = _glyph_extent(cfg, sample.difficulty)
    r0, r1 = ty // f, -(-(ty + extent) // f)
    c0, c1 = tx // f, -(-(tx + extent) // f)
    patch = obs[r0:r1, c0:c1]
    errors = [
        float(np.sum((patch - expected_observation(sample, cfg, k)[r0:r1, c0:c1]) ** 2))
        for k in range(cfg.alphabet_size)
    ]
    return symbol_names(cfg.alphabet_size)[int(np.argmin(errors))]


def decode_zoom_at_truth(
    sample: SyntheticSample, cfg: EnvConfig, zoom_cfg: ZoomConfig
) -> str:
    """Template match on the zoom crop centered at the true glyph center."""
    crop = zoom(sample.canvas, sample.glyph_center, zoom_cfg)
    w = min(zoom_cfg.crop_size, cfg.canvas_size)
    window = resize_nearest(crop, w, w).pixels
    errors = [
        float(np.sum((window - expected_window(sample, cfg, zoom_cfg.crop_size, k)) ** 2))
        for k in range(cfg.alphabet_size)
    ]
    return symbol_names(cfg.alphabet_size)[int(np.argmin(errors))]


def oracle_answer_rate(
    samples: list[SyntheticSample],
    decoder: OracleDecoder,
    cfg: EnvConfig,
    zoom_cfg: ZoomConfig | None = None,
) -> float:
    if len(samples) < 100:
        raise ValueError("need at least 100 samples for a stable oracle rate")
    if decoder is OracleDecoder.ZOOM_AT_TRUTH:
        zc = zoom_cfg or ZoomConfig(output_size=(cfg.canvas_size, cfg.canvas_size))
        hits = sum(decode_zoom_at_truth(s, cfg, zc) == s.glyph_symbol for s in samples)
    else:
        hits = sum(decode_global_only(s, cfg) == s.glyph_symbol for s in samples)
    return hits / len(samples)


# --- dataset files ---


def save_dataset(
    path: str | Path,
    samples: list[SyntheticSample],
    canvas_format: str = "inline",
) -> None:
    """JSON Lines, one sample per line. `inline` stores the canvas as a
    quantized intensity list; `pgm` writes sibling .pgm files and references
    them by relative path."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    if canvas_format not in ("inline", "pgm"):
        raise ConfigError(f"unknown canvas format {canvas_format!r}")
    pgm_dir = path.with_suffix(".pgm.d")
    if canvas_format == "pgm":
        pgm_dir.mkdir(parents=True, exist_ok=True)
    with path.open("w", encoding="utf-8") as fh:
        for s in samples:
            row: dict = {
                "sample_id": s.sample_id,
                "width": s.canvas.width,
                "height": s.canvas.height,
                "glyph_symbol": s.glyph_symbol,
                "glyph_center": [s.glyph_center.x, s.glyph_center.y],
                "question": s.question,
                "difficulty": s.difficulty.value,
            }
            if canvas_format == "inline":
                row["canvas"] = [int(v) for v in s.canvas.quantized().ravel()]
            else:
                pgm_path = pgm_dir / f"sample_{s.sample_id:06d}.pgm"
                write_pgm(pgm_path, s.canvas)
                row["canvas_pgm"] = str(pgm_path.relative_to(path.parent))
            fh.write(json.dumps(row, separators=(",", ":")) + "\n")


def load_dataset(path: str | Path) -> list[SyntheticSample]:
    path = Path(path)
    samples: list[SyntheticSample] = []
    for line in path.read_text(encoding="utf-8").splitlines():
        if not line.strip():
            continue
        row = json.loads(line)
        if "canvas" in row:
            canvas = Raster.from_quantized(row["canvas"], row["width"], row["height"])
        else:
            canvas = read_pgm(path.parent / row["canvas_pgm"])
        samples.append(
            SyntheticSample(
                sample_id=row["sample_id"],
                canvas=canvas,
                glyph_symbol=row["glyph_symbol"],
                glyph_center=Keypoint(*row["glyph_center"]),
                question=row["question"],
                answer_key=AnswerKey.of(row["glyph_symbol"]),
                difficulty=Difficulty(row["difficulty"]),
            )
        )
    return samples
