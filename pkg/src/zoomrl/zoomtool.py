"""Keypoint zoom tool: crop-and-upscale geometry plus the call adapter.

The tool takes a pixel keypoint, extracts a fixed square window centered
there (translated inward when the keypoint sits near a border), and
nearest-neighbor resizes the window to a configured output size. Upscaling
the crop to the source image's own size is what lets a fixed-rate perceiver
see the window's full detail; shrinking `output_size` back to the window
size disables that and is the degraded mode the evaluation ablation uses.
"""

from __future__ import annotations

import enum
import re
from dataclasses import dataclass
from typing import NamedTuple

from .errors import OutOfBoundsError
from .protocol import (
    Speaker,
    ToolCall,
    ToolCallStatus,
    ToolRegistry,
    ToolSpec,
    ArgSpec,
    Turn,
    parse_turn,
)
from .raster import Raster, resize_nearest

TOOL_NAME = "zoom"
RESULT_IMAGE_PLACEHOLDER = "[image]"
TOOL_ERROR_TEXT = "error: invalid tool call"

_KEYPOINT_RE = re.compile(r"^\s*\(?\s*([+-]?\d+)\s*,\s*([+-]?\d+)\s*\)?\s*$")


@dataclass(frozen=True)
class Keypoint:
    x: int
    y: int


def parse_keypoint(text: str) -> Keypoint | None:
    """Lenient read of the `x,y` wire form (optional spaces and parentheses)."""
    m = _KEYPOINT_RE.match(text)
    if m is None:
        return None
    return Keypoint(int(m.group(1)), int(m.group(2)))


class ZoomSource(enum.Enum):
    DOWNSIZED = "downsized"
    ORIGINAL = "original"


@dataclass(frozen=True)
class ZoomConfig:
    crop_size: int = 16
    output_size: tuple[int, int] = (64, 64)
    source: ZoomSource = ZoomSource.DOWNSIZED

    def __post_init__(self) -> None:
        if self.crop_size < 1:
            raise ValueError("crop_size must be >= 1")
        if self.output_size[0] < 1 or self.output_size[1] < 1:
            raise ValueError("output_size must be positive")


def zoom(img: Raster, kp: Keypoint, cfg: ZoomConfig) -> Raster:
    """Extract the crop window centered at `kp` and resize it to
    cfg.output_size. The window is clamped to lie fully inside the image, so
    output dimensions hold for every keypoint including corners."""
    if not (0 <= kp.x < img.width and 0 <= kp.y < img.height):
        raise OutOfBoundsError(
            f"keypoint ({kp.x},{kp.y}) outside {img.width}x{img.height} image"
        )
    w = min(cfg.crop_size, img.width, img.height)
    ox = min(max(kp.x - w // 2, 0), img.width - w)
    oy = min(max(kp.y - w // 2, 0), img.height - w)
    window = Raster(img.pixels[oy : oy + w, ox : ox + w])
    out_w, out_h = cfg.output_size
    if (window.width, window.height) == (out_w, out_h):
        return window
    return resize_nearest(window, out_w, out_h)


def crop_window_origin(img_w: int, img_h: int, kp: Keypoint, crop_size: int) -> tuple[int, int]:
    """Top-left corner of the (clamped) crop window; shared with the oracle
    decoders so geometry is defined in exactly one place."""
    w = min(crop_size, img_w, img_h)
    return (min(max(kp.x - w // 2, 0), img_w - w), min(max(kp.y - w // 2, 0), img_h - w))


class EpisodeImages(NamedTuple):
    """Image pair a tool call may target. The synthetic task has no separate
    higher-resolution source, so both slots usually hold the same canvas; the
    selection logic still honors the configured source."""

    original: Raster
    downsized: Raster


def zoom_tool_spec() -> ToolSpec:
    return ToolSpec(
        name=TOOL_NAME,
        description=(
            "returns a crop of the image centered at a pixel keypoint, "
            "resized for a closer look"
        ),
        args=(
            ArgSpec(
                name="keypoint",
                check=lambda text: parse_keypoint(text) is not None,
            ),
        ),
    )


def default_registry() -> ToolRegistry:
    registry = ToolRegistry()
    registry.register(zoom_tool_spec())
    return registry


@dataclass(frozen=True)
class ToolResultPayload:
    ok: bool
    crop: Raster | None
    result_turn: Turn
    status: ToolCallStatus
    error: str | None = None


def _result_turn(body: str) -> Turn:
    return parse_turn(f"<result>\n{body}\n</result>", Speaker.TOOL_RESULT)


def zoom_tool_adapter(
    call: ToolCall, episode_images: EpisodeImages, cfg: ZoomConfig
) -> ToolResultPayload:
    """Execute a parsed zoom call. Every failure mode (bad parse, malformed
    keypoint text, out-of-bounds coordinates) becomes a failed payload with
    an error result turn; the caller counts it against the tool reward."""
    if not call.ok:
        return ToolResultPayload(
            ok=False,
            crop=None,
            result_turn=_result_turn(TOOL_ERROR_TEXT),
            status=call.status,
            error=f"call rejected at parse time ({call.status.value})",
        )
    kp = parse_keypoint(call.args.get("keypoint", ""))
    if kp is None:
        return ToolResultPayload(
            ok=False,
            crop=None,
            result_turn=_result_turn(TOOL_ERROR_TEXT),
            status=ToolCallStatus.BAD_ARGS,
            error="malformed keypoint",
        )
    source = (
        episode_images.original if cfg.source is ZoomSource.ORIGINAL else episode_images.downsized
    )
    try:
        crop = zoom(source, kp, cfg)
    except OutOfBoundsError as exc:
        return ToolResultPayload(
            ok=False,
            crop=None,
            result_turn=_result_turn(TOOL_ERROR_TEXT),
            status=ToolCallStatus.BAD_ARGS,
            error=str(exc),
        )
    return ToolResultPayload(
        ok=True,
        crop=crop,
        result_turn=_result_turn(RESULT_IMAGE_PLACEHOLDER),
        status=ToolCallStatus.PARSED_VALID,
    )
