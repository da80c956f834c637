"""Patient records, segmentation, resizing, augmentation and synthetic videos."""

from __future__ import annotations

import hashlib
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy import ndimage

from . import io as tio

PLANES = ("head", "abdomen", "femur")
WEIGHT_RANGE = (2085.0, 4995.0)
DATASET_MANIFEST = "manifest.txt"


class DatasetError(ValueError):
    pass


@dataclass
class VideoTensor:
    frames: np.ndarray  # [T, 1, H, W] in [0, 1]
    plane: str = "unknown"

    def __post_init__(self):
        self.frames = np.asarray(self.frames, dtype=np.float32)
        if self.frames.ndim != 4 or self.frames.shape[1] != 1 or self.frames.shape[0] < 1:
            raise DatasetError(f"video frames must be [T>=1, 1, H, W], got {self.frames.shape}")

    @property
    def num_frames(self) -> int:
        return self.frames.shape[0]


@dataclass
class PatientRecord:
    patient_id: str
    birth_weight_g: float
    videos: list[VideoTensor] = field(default_factory=list)

    def __post_init__(self):
        if not self.birth_weight_g > 0:
            raise DatasetError(f"patient {self.patient_id}: birth weight must be positive, got {self.birth_weight_g}")
        if not self.videos:
            raise DatasetError(f"patient {self.patient_id}: at least one video required")


@dataclass
class Segment:
    frames: np.ndarray  # [seg_len, 1, h, w]
    patient_id: str
    video_index: int
    segment_index: int


# -- geometry ----------------------------------------------------------------

def _bilinear_resize(img: np.ndarray, out_h: int, out_w: int) -> np.ndarray:
    """Half-pixel-centre bilinear resize of a 2-D array."""
    h, w = img.shape
    if (h, w) == (out_h, out_w):
        return img.copy()
    ys = np.clip((np.arange(out_h) + 0.5) * (h / out_h) - 0.5, 0, h - 1)
    xs = np.clip((np.arange(out_w) + 0.5) * (w / out_w) - 0.5, 0, w - 1)
    y0 = np.floor(ys).astype(int)
    x0 = np.floor(xs).astype(int)
    y1 = np.minimum(y0 + 1, h - 1)
    x1 = np.minimum(x0 + 1, w - 1)
    fy = (ys - y0)[:, None]
    fx = (xs - x0)[None, :]
    top = img[y0][:, x0] * (1 - fx) + img[y0][:, x1] * fx
    bot = img[y1][:, x0] * (1 - fx) + img[y1][:, x1] * fx
    return top * (1 - fy) + bot * fy


def padded_layout(src: tuple[int, int], target: tuple[int, int]) -> tuple[int, int, int, int]:
    """Return ``(content_h, content_w, pad_top, pad_left)`` for an aspect-preserving fit."""
    h, w = src
    th, tw = target
    scale = min(th / h, tw / w)
    ch = min(th, max(1, int(round(h * scale))))
    cw = min(tw, max(1, int(round(w * scale))))
    return ch, cw, (th - ch) // 2, (tw - cw) // 2


def resize_with_padding(frame: np.ndarray, target: tuple[int, int] = (64, 64)) -> np.ndarray:
    """Scale ``frame[1,H,W]`` by ``min(h/H, w/W)`` and zero-pad to ``[1,h,w]``.

    Padding is split evenly; an odd remainder goes to the bottom/right.
    """
    frame = np.asarray(frame, dtype=np.float32)
    if frame.ndim != 3 or frame.shape[0] != 1:
        raise DatasetError(f"frame must be [1,H,W], got {frame.shape}")
    ch, cw, top, left = padded_layout(frame.shape[1:], target)
    out = np.zeros((1, *target), dtype=np.float32)
    out[0, top : top + ch, left : left + cw] = _bilinear_resize(frame[0].astype(np.float64), ch, cw)
    return out


def resize_video(video: VideoTensor, target: tuple[int, int]) -> VideoTensor:
    if video.frames.shape[2:] == tuple(target):
        return video
    frames = np.stack([resize_with_padding(f, target) for f in video.frames])
    return VideoTensor(frames, video.plane)


def segment_video(video: VideoTensor, seg_len: int = 16, patient_id: str = "", video_index: int = 0) -> list[Segment]:
    """Non-overlapping ``seg_len``-frame segments; a shorter tail is dropped."""
    if seg_len < 1:
        raise ValueError("seg_len must be >= 1")
    n = video.num_frames // seg_len
    return [
        Segment(video.frames[i * seg_len : (i + 1) * seg_len].copy(), patient_id, video_index, i)
        for i in range(n)
    ]


def patient_segments(patient: PatientRecord, seg_len: int, target: tuple[int, int]) -> list[Segment]:
    """Resize every video of ``patient`` to ``target`` then segment it."""
    out: list[Segment] = []
    for vi, video in enumerate(patient.videos):
        out.extend(segment_video(resize_video(video, target), seg_len, patient.patient_id, vi))
    return out


# -- augmentation ------------------------------------------------------------

@dataclass
class AugmentPolicy:
    enabled: bool = True
    rotate_deg: float = 25.0
    brightness: float = 0.2
    contrast: float = 0.2
    flip_p: float = 0.5
    quant_levels: tuple[int, ...] = (32, 64, 128)
    blur_p: float = 0.5
    blur_sigma_max: float = 1.0

    @classmethod
    def disabled(cls) -> "AugmentPolicy":
        return cls(enabled=False)

    @classmethod
    def only_flip(cls, p: float = 1.0) -> "AugmentPolicy":
        return cls(rotate_deg=0.0, brightness=0.0, contrast=0.0, flip_p=p, quant_levels=(), blur_p=0.0)


def derive_seed(*parts) -> int:
    """Stable 63-bit seed from arbitrary parts (independent of PYTHONHASHSEED)."""
    digest = hashlib.sha256("\x1f".join(map(str, parts)).encode()).digest()
    return int.from_bytes(digest[:8], "little") >> 1


def hflip(frames: np.ndarray) -> np.ndarray:
    return frames[..., ::-1].copy()


def augment(frames: np.ndarray, seed: int, policy: AugmentPolicy) -> np.ndarray:
    """Augment one segment ``[T,1,H,W]``; parameters are sampled once per segment.

    Order: rotation, brightness/contrast, horizontal flip, intensity
    quantization (compression surrogate), Gaussian blur.  Output is clipped
    to [0, 1].
    """
    if not policy.enabled:
        return frames
    rng = np.random.default_rng(seed)
    # draw every parameter up front so toggling one step leaves the others unchanged
    angle = rng.uniform(-policy.rotate_deg, policy.rotate_deg)
    b = rng.uniform(-policy.brightness, policy.brightness)
    c = rng.uniform(1 - policy.contrast, 1 + policy.contrast)
    flip = rng.random() < policy.flip_p
    levels = int(rng.choice(policy.quant_levels)) if policy.quant_levels else 0
    blur = rng.random() < policy.blur_p
    sigma = rng.uniform(0, policy.blur_sigma_max)

    x = frames.astype(np.float32)
    if policy.rotate_deg > 0:
        x = ndimage.rotate(x, angle, axes=(3, 2), reshape=False, order=1, mode="constant", cval=0.0)
    if policy.brightness > 0 or policy.contrast > 0:
        x = c * (x - 0.5) + 0.5 + b
    x = np.clip(x, 0.0, 1.0)
    if flip:
        x = hflip(x)
    if levels:
        x = np.round(x * (levels - 1)) / (levels - 1)
    if blur and sigma > 0:
        x = ndimage.gaussian_filter(x, sigma=(0, 0, sigma, sigma), mode="constant")
    return np.clip(x, 0.0, 1.0).astype(np.float32)


# -- synthetic data ----------------------------------------------------------

@dataclass
class SyntheticConfig:
    """Moving-ellipse videos whose mean radius is affine in birth weight.

    ``radius(w) = r_min + (w - w_min) / (w_max - w_min) * (r_max - r_min)``;
    the ellipse semi-axes are ``radius * (1 + ecc)`` and ``radius * (1 - ecc)``.
    """

    num_patients: int = 15
    videos_per_patient: int = 3
    frames_per_video: int = 32
    frame_size: tuple[int, int] = (32, 32)
    noise_sigma: float = 0.01
    seed: int = 0
    weight_range: tuple[float, float] = WEIGHT_RANGE
    radius_range: tuple[float, float] = (4.0, 11.0)
    eccentricity: float = 0.15
    jitter: float = 2.0
    foreground: float = 0.8
    background: float = 0.1

    def __post_init__(self):
        lo, hi = self.weight_range
        self.weight_range = (max(float(lo), WEIGHT_RANGE[0]), min(float(hi), WEIGHT_RANGE[1]))
        if self.weight_range[0] >= self.weight_range[1]:
            raise DatasetError(f"empty weight range {self.weight_range}")
        self.frame_size = tuple(int(s) for s in self.frame_size)  # type: ignore[assignment]

    def radius_for_weight(self, weight: float) -> float:
        (w0, w1), (r0, r1) = self.weight_range, self.radius_range
        return r0 + (weight - w0) / (w1 - w0) * (r1 - r0)


def render_ellipse(size: tuple[int, int], center: tuple[float, float], axes: tuple[float, float], fg: float, bg: float) -> np.ndarray:
    h, w = size
    yy, xx = np.mgrid[0:h, 0:w].astype(np.float64) + 0.5
    inside = ((xx - center[1]) / axes[1]) ** 2 + ((yy - center[0]) / axes[0]) ** 2 <= 1.0
    return np.where(inside, fg, bg)


def generate_synthetic_dataset(config: SyntheticConfig) -> list[PatientRecord]:
    rng = np.random.default_rng(config.seed)
    h, w = config.frame_size
    records = []
    for pi in range(config.num_patients):
        weight = float(rng.uniform(*config.weight_range))
        radius = config.radius_for_weight(weight)
        axes = (radius * (1 + config.eccentricity), radius * (1 - config.eccentricity))
        videos = []
        for vi in range(config.videos_per_patient):
            frames = np.empty((config.frames_per_video, 1, h, w), dtype=np.float32)
            for t in range(config.frames_per_video):
                cy = h / 2 + rng.uniform(-config.jitter, config.jitter)
                cx = w / 2 + rng.uniform(-config.jitter, config.jitter)
                img = render_ellipse((h, w), (cy, cx), axes, config.foreground, config.background)
                if config.noise_sigma > 0:
                    img = img + rng.normal(0, config.noise_sigma, img.shape)
                frames[t, 0] = np.clip(img, 0, 1)
            videos.append(VideoTensor(frames, PLANES[vi % len(PLANES)]))
        records.append(PatientRecord(f"P{pi:03d}", weight, videos))
    return records


def foreground_radius(video: VideoTensor, ecc: float, threshold: float = 0.5) -> float:
    """Mean-radius estimate from the mean thresholded area over frames."""
    area = float((video.frames > threshold).sum(axis=(1, 2, 3)).mean())
    return math.sqrt(area / (math.pi * (1 - ecc * ecc)))


# -- dataset directories -----------------------------------------------------

def manifest_lines(records: list[PatientRecord]) -> list[str]:
    lines = []
    for r in records:
        files = [f"{v.plane}=videos/{r.patient_id}_{i}.bnt" for i, v in enumerate(r.videos)]
        lines.append("\t".join([r.patient_id, repr(float(r.birth_weight_g)), *files]))
    return lines


def write_dataset(path, records: list[PatientRecord]) -> None:
    path = Path(path)
    (path / "videos").mkdir(parents=True, exist_ok=True)
    for r in records:
        for i, v in enumerate(r.videos):
            tio.write_tensor(path / "videos" / f"{r.patient_id}_{i}.bnt", v.frames)
    (path / DATASET_MANIFEST).write_text("\n".join(manifest_lines(records)) + "\n")


def read_dataset(path) -> list[PatientRecord]:
    path = Path(path)
    manifest = path / DATASET_MANIFEST
    if not manifest.is_file():
        raise DatasetError(f"{manifest}: dataset manifest not found")
    records = []
    seen = set()
    for lineno, line in enumerate(manifest.read_text().splitlines(), 1):
        if not line.strip():
            continue
        fields = line.split("\t")
        if len(fields) < 3:
            raise DatasetError(f"{manifest}:{lineno}: expected patient_id, weight_g and video files")
        pid, weight_s, *files = fields
        if pid in seen:
            raise DatasetError(f"{manifest}:{lineno}: duplicate patient id {pid!r}")
        seen.add(pid)
        try:
            weight = float(weight_s)
        except ValueError:
            raise DatasetError(f"{manifest}:{lineno}: weight {weight_s!r} is not a number") from None
        if not weight > 0:
            raise DatasetError(f"{manifest}:{lineno}: weight must be positive, got {weight_s}")
        videos = []
        for entry in files:
            plane, _, rel = entry.rpartition("=")
            frames = tio.read_tensor(path / rel)
            if frames.ndim != 4 or frames.shape[1] != 1:
                raise DatasetError(f"{path / rel}: video tensor must be [T,1,H,W], got {frames.shape}")
            videos.append(VideoTensor(frames, plane or "unknown"))
        records.append(PatientRecord(pid, weight, videos))
    return records
