"""Feature tracks, a minimal corner tracker, and semantic filtering.

The built-in tracker is deliberately simple: min-eigenvalue corner scores with
non-maximum suppression, patch-SSD matching inside a bounded search window,
quadratic subpixel refinement, and rejection of matches whose flow deviates
from the local median. Externally produced tracks can be ingested from a text
file instead.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy import ndimage


class ParseError(Exception):
    """Malformed track file; carries the offending line number."""

    def __init__(self, message: str, line: int):
        super().__init__(f"line {line}: {message}")
        self.line = line


class SemanticLabel(enum.Enum):
    INFRASTRUCTURE = "infrastructure"
    VEGETATION = "vegetation"
    DYNAMIC = "dynamic"
    UNKNOWN = "unknown"


@dataclass
class Observation:
    frame_id: int
    pixel: np.ndarray
    depth: object | None = None  # DepthEstimate, attached by the pipeline


@dataclass
class FeatureTrack:
    """A feature observed over consecutive frames.

    Frame ids are strictly increasing; at most one observation per frame.
    """

    track_id: int
    observations: list[Observation] = field(default_factory=list)
    semantic_label: SemanticLabel = SemanticLabel.UNKNOWN

    def add(self, frame_id: int, pixel, depth=None):
        if self.observations and frame_id <= self.observations[-1].frame_id:
            raise ValueError(
                f"track {self.track_id}: frame {frame_id} not after "
                f"{self.observations[-1].frame_id}"
            )
        self.observations.append(Observation(frame_id, np.asarray(pixel, dtype=float), depth))

    def frame_ids(self) -> list[int]:
        return [o.frame_id for o in self.observations]

    def observation_at(self, frame_id: int) -> Observation | None:
        for o in self.observations:
            if o.frame_id == frame_id:
                return o
        return None

    def __len__(self) -> int:
        return len(self.observations)


@dataclass(frozen=True)
class ClassTable:
    """Maps label-image class ids to semantic roles (Cityscapes by default)."""

    dynamic: frozenset = frozenset({11, 12, 13, 14, 15, 16, 17, 18})
    vegetation: frozenset = frozenset({8})
    ground: frozenset = frozenset({0, 1, 9})


@dataclass
class SemanticImage:
    """Per-pixel class ids for one frame plus the class table.

    Derived masks are cached; the label grid is treated as immutable.
    """

    labels: np.ndarray  # (h, w) integer class ids
    classes: ClassTable = field(default_factory=ClassTable)

    def __post_init__(self):
        self._masks: dict = {}

    def _mask(self, name: str, ids) -> np.ndarray:
        if name not in self._masks:
            self._masks[name] = np.isin(self.labels, list(ids))
        return self._masks[name]

    def dynamic_mask(self) -> np.ndarray:
        return self._mask("dynamic", self.classes.dynamic)

    def vegetation_mask(self) -> np.ndarray:
        return self._mask("vegetation", self.classes.vegetation)

    def ground_mask(self) -> np.ndarray:
        return self._mask("ground", self.classes.ground)

    def eroded_dynamic_mask(self, kernel: int) -> np.ndarray:
        key = ("eroded", kernel)
        if key not in self._masks:
            self._masks[key] = erode_mask(self.dynamic_mask(), kernel)
        return self._masks[key]


@dataclass
class TrackerConfig:
    max_corners: int = 400
    quality_level: float = 0.01
    nms_radius: int = 7
    patch_radius: int = 4
    search_radius: int = 12
    flow_outlier_threshold: float = 4.0
    erosion_kernel: int = 21


# ------------------------------------------------------------------ tracking


def corner_score(image: np.ndarray) -> np.ndarray:
    """Min-eigenvalue (Shi-Tomasi style) corner response."""
    img = np.asarray(image, dtype=float)
    gx = ndimage.sobel(img, axis=1, mode="nearest")
    gy = ndimage.sobel(img, axis=0, mode="nearest")
    sxx = ndimage.uniform_filter(gx * gx, size=5, mode="nearest")
    syy = ndimage.uniform_filter(gy * gy, size=5, mode="nearest")
    sxy = ndimage.uniform_filter(gx * gy, size=5, mode="nearest")
    half_trace = 0.5 * (sxx + syy)
    root = np.sqrt(np.maximum(0.25 * (sxx - syy) ** 2 + sxy**2, 0.0))
    return half_trace - root


def detect_corners(image: np.ndarray, cfg: TrackerConfig) -> np.ndarray:
    """(n, 2) corner pixels, strongest first, after non-maximum suppression."""
    score = corner_score(image)
    radius = cfg.nms_radius
    local_max = ndimage.maximum_filter(score, size=2 * radius + 1, mode="nearest")
    threshold = cfg.quality_level * float(score.max()) if score.max() > 0 else np.inf
    border = cfg.patch_radius + 1
    candidates = (score >= local_max) & (score > threshold)
    candidates[:border, :] = candidates[-border:, :] = False
    candidates[:, :border] = candidates[:, -border:] = False
    vs, us = np.nonzero(candidates)
    if len(us) == 0:
        return np.zeros((0, 2))
    order = np.argsort(score[vs, us])[::-1][: cfg.max_corners]
    return np.column_stack([us[order], vs[order]]).astype(float)


def _subpixel_offset(ssd: np.ndarray, best: tuple[int, int]) -> np.ndarray:
    """Quadratic fit over the 3x3 SSD neighborhood of the best offset."""
    i, j = best
    offset = np.zeros(2)
    if ssd[i, j] <= 1e-12:  # exact match; the parabola vertex would drift
        return offset
    if 0 < i < ssd.shape[0] - 1:
        a, b, c = ssd[i - 1, j], ssd[i, j], ssd[i + 1, j]
        denom = a - 2 * b + c
        if denom > 1e-12:
            offset[1] = np.clip(0.5 * (a - c) / denom, -0.5, 0.5)
    if 0 < j < ssd.shape[1] - 1:
        a, b, c = ssd[i, j - 1], ssd[i, j], ssd[i, j + 1]
        denom = a - 2 * b + c
        if denom > 1e-12:
            offset[0] = np.clip(0.5 * (a - c) / denom, -0.5, 0.5)
    return offset


def track_features(
    prev_image: np.ndarray,
    next_image: np.ndarray,
    prev_points: np.ndarray,
    cfg: TrackerConfig,
) -> list[tuple[np.ndarray, np.ndarray]]:
    """Match points from prev_image into next_image.

    Returns (prev_pixel, next_pixel) pairs for the survivors of SSD matching
    and median-flow outlier rejection. Empty input or no valid matches give an
    empty list.
    """
    prev_image = np.asarray(prev_image, dtype=float)
    next_image = np.asarray(next_image, dtype=float)
    if prev_image.shape != next_image.shape:
        raise ValueError("images must have the same size")
    prev_points = np.asarray(prev_points, dtype=float).reshape(-1, 2)
    if len(prev_points) == 0:
        return []
    h, w = next_image.shape
    pr, sr = cfg.patch_radius, cfg.search_radius
    raw: list[tuple[np.ndarray, np.ndarray]] = []
    for point in prev_points:
        u, v = int(round(point[0])), int(round(point[1]))
        if not (pr <= u < w - pr and pr <= v < h - pr):
            continue
        patch = prev_image[v - pr : v + pr + 1, u - pr : u + pr + 1]
        u0, u1 = max(pr, u - sr), min(w - pr - 1, u + sr)
        v0, v1 = max(pr, v - sr), min(h - pr - 1, v + sr)
        if u1 < u0 or v1 < v0:
            continue
        region = next_image[v0 - pr : v1 + pr + 1, u0 - pr : u1 + pr + 1]
        windows = np.lib.stride_tricks.sliding_window_view(region, patch.shape)
        ssd = ((windows - patch) ** 2).sum(axis=(2, 3))
        best = np.unravel_index(int(np.argmin(ssd)), ssd.shape)
        match = np.array([u0 + best[1], v0 + best[0]], dtype=float)
        match += _subpixel_offset(ssd, best)
        raw.append((point.copy(), match))
    if not raw:
        return []
    flows = np.array([m - p for p, m in raw])
    median = np.median(flows, axis=0)
    keep = np.linalg.norm(flows - median, axis=1) <= cfg.flow_outlier_threshold
    return [pair for pair, ok in zip(raw, keep) if ok]


# ----------------------------------------------------------------- track IO


def ingest_tracks(path: str | Path) -> list[FeatureTrack]:
    """Read tracks from text: one observation per line, `track_id frame_id u v`.

    Observations may arrive in any order; they are sorted by frame id per
    track. A duplicate frame id within a track raises ParseError with the
    offending line number.
    """
    tracks: dict[int, FeatureTrack] = {}
    seen: dict[int, set[int]] = {}
    with open(path) as handle:
        for line_no, line in enumerate(handle, start=1):
            text = line.strip()
            if not text or text.startswith("#"):
                continue
            parts = text.split()
            if len(parts) != 4:
                raise ParseError(f"expected 4 fields, got {len(parts)}", line_no)
            try:
                track_id, frame_id = int(parts[0]), int(parts[1])
                u, v = float(parts[2]), float(parts[3])
            except ValueError as exc:
                raise ParseError(str(exc), line_no) from None
            if track_id not in tracks:
                tracks[track_id] = FeatureTrack(track_id)
                seen[track_id] = set()
            if frame_id in seen[track_id]:
                raise ParseError(
                    f"duplicate frame {frame_id} in track {track_id}", line_no
                )
            seen[track_id].add(frame_id)
            tracks[track_id].observations.append(
                Observation(frame_id, np.array([u, v]))
            )
    for track in tracks.values():
        track.observations.sort(key=lambda o: o.frame_id)
    return [tracks[k] for k in sorted(tracks)]


def write_tracks(tracks: list[FeatureTrack], path: str | Path) -> None:
    with open(path, "w") as handle:
        for track in tracks:
            for obs in track.observations:
                handle.write(
                    f"{track.track_id} {obs.frame_id} "
                    f"{obs.pixel[0]:.6f} {obs.pixel[1]:.6f}\n"
                )


# ----------------------------------------------------------- semantic filter


def erode_mask(mask: np.ndarray, kernel: int) -> np.ndarray:
    """Binary erosion with a square structuring element; outside counts as
    background, so borders erode."""
    if kernel <= 1:
        return mask.copy()
    structure = np.ones((kernel, kernel), dtype=bool)
    return ndimage.binary_erosion(mask, structure=structure, border_value=0)


def semantic_filter(
    track: FeatureTrack, labels: SemanticImage, erosion_kernel: int = 21
) -> SemanticLabel:
    """Label a track from the newest observation's semantic neighborhood.

    The dynamic-class mask is eroded with a square kernel so object borders do
    not vote; the 3x3 neighborhood of the newest feature point then votes.
    A dynamic majority (ties included) marks the track Dynamic; otherwise a
    vegetation majority marks it Vegetation, else Infrastructure. The label is
    stored on the track and returned.
    """
    if not track.observations:
        return track.semantic_label
    eroded_dynamic = labels.eroded_dynamic_mask(erosion_kernel)
    vegetation = labels.vegetation_mask()
    h, w = labels.labels.shape
    pixel = track.observations[-1].pixel
    u, v = int(round(pixel[0])), int(round(pixel[1]))
    u0, u1 = max(0, u - 1), min(w, u + 2)
    v0, v1 = max(0, v - 1), min(h, v + 2)
    window_dyn = eroded_dynamic[v0:v1, u0:u1]
    window_veg = vegetation[v0:v1, u0:u1]
    total = window_dyn.size
    if total == 0:
        label = SemanticLabel.UNKNOWN
    elif int(window_dyn.sum()) * 2 >= total:
        label = SemanticLabel.DYNAMIC
    elif int(window_veg.sum()) * 2 > total:
        label = SemanticLabel.VEGETATION
    else:
        label = SemanticLabel.INFRASTRUCTURE
    track.semantic_label = label
    return label
