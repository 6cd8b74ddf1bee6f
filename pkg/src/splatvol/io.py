"""Persistence: dataset manifests, binary volume / distance-field files,
splat-viewer PLY export, PNG images, fit configs, and the metrics log.

Dataset manifests follow the NeRF-synthetic dialect: one ``transforms.json``
with a global ``camera_angle_x`` and per-frame camera-to-world matrices in
the OpenGL convention (camera looks down -z, y up).  On load the basis is
converted to the renderer's convention (x right, y down, +z forward) by
negating the y and z columns, and fx is derived from the field of view.

Volume files ("GVOL") store a fixed header followed by ``N^3`` records of
14 little-endian float32 channels in the order offset(3), log_scale(3),
rotation(4), opacity_logit(1), color(3), then ``N^3`` active-flag bytes.
Distance-field files ("GGDF") share the header with a single float32 value
channel.  Both roundtrip byte-exactly and contain no timestamps.

PNGs are 8-bit sRGB on disk and linearized on load.
"""

from __future__ import annotations

import dataclasses
import json
import math
import struct
from pathlib import Path

import numpy as np
from PIL import Image

from .errors import (BadMagicError, ConfigError, DatasetError, TruncatedFileError,
                     VersionMismatchError, VolumeFormatError)
from .fitting import FitConfig, IterationMetrics, LearningRates
from .gdf import GDFVolume
from .losses import LossWeights
from .model import (Bounds, Camera, GaussianVolume, ViewSet, default_bounds,
                    volume_from_channels)

FORMAT_VERSION = 1
_VOLUME_MAGIC = b"GVOL"
_GDF_MAGIC = b"GGDF"
_HEADER = struct.Struct("<4sII6f")

PLY_PROPERTIES = ("x", "y", "z", "f_dc_0", "f_dc_1", "f_dc_2", "opacity",
                  "scale_0", "scale_1", "scale_2", "rot_0", "rot_1", "rot_2", "rot_3")


# ---------------------------------------------------------------------------
# images

def srgb_encode(linear: np.ndarray) -> np.ndarray:
    linear = np.clip(linear, 0.0, 1.0)
    return np.where(linear <= 0.0031308,
                    12.92 * linear,
                    1.055 * np.power(linear, 1.0 / 2.4) - 0.055)


def srgb_decode(encoded: np.ndarray) -> np.ndarray:
    return np.where(encoded <= 0.04045,
                    encoded / 12.92,
                    np.power((encoded + 0.055) / 1.055, 2.4))


def save_image(path, rgb: np.ndarray) -> None:
    """Write linear radiance as an 8-bit sRGB PNG."""
    data = np.round(srgb_encode(np.asarray(rgb, dtype=np.float64)) * 255.0)
    Image.fromarray(data.astype(np.uint8), mode="RGB").save(Path(path))


def load_image(path) -> np.ndarray:
    """Read a PNG back into linear radiance in [0, 1]."""
    with Image.open(Path(path)) as img:
        data = np.asarray(img.convert("RGB"), dtype=np.float64) / 255.0
    return srgb_decode(data)


# ---------------------------------------------------------------------------
# dataset manifests

# Column flips between the OpenGL camera basis and the renderer's.
_GL_FLIP = np.diag([1.0, -1.0, -1.0])


def write_dataset(path, dataset: ViewSet, image_dir: str = "images") -> Path:
    """Write images plus a transforms.json manifest; returns the manifest path."""
    root = Path(path)
    (root / image_dir).mkdir(parents=True, exist_ok=True)
    cam0 = dataset.cameras[0]
    for cam in dataset.cameras:
        if (cam.width, cam.height, cam.fx) != (cam0.width, cam0.height, cam0.fx):
            raise DatasetError("manifest format requires shared intrinsics across views")
    frames = []
    for i, (cam, img) in enumerate(zip(dataset.cameras, dataset.images)):
        rel = f"{image_dir}/r_{i:03d}.png"
        save_image(root / rel, img)
        c2w = np.eye(4)
        c2w[:3, :3] = cam.rotation.T @ _GL_FLIP
        c2w[:3, 3] = cam.camera_center()
        frames.append({"file_path": rel, "transform_matrix": c2w.tolist()})
    manifest = {
        "camera_angle_x": 2.0 * math.atan(cam0.width / (2.0 * cam0.fx)),
        "width": cam0.width,
        "height": cam0.height,
        "background_color": dataset.background.tolist(),
        "bounds": {"lo": dataset.bounds.lo.tolist(), "hi": dataset.bounds.hi.tolist()},
        "frames": frames,
    }
    out = root / "transforms.json"
    out.write_text(json.dumps(manifest, indent=2))
    return out


def _orthonormalized(rot: np.ndarray, frame: int) -> np.ndarray:
    err = np.abs(rot @ rot.T - np.eye(3)).max()
    if err > 1e-4:
        raise DatasetError(f"frame {frame}: rotation block off-orthonormal by {err:.2e}")
    u, _, vt = np.linalg.svd(rot)
    return u @ vt


def load_dataset(path) -> ViewSet:
    """Load a transforms.json dataset (path may be the file or its directory)."""
    path = Path(path)
    manifest_path = path / "transforms.json" if path.is_dir() else path
    if not manifest_path.exists():
        raise DatasetError(f"manifest not found: {manifest_path}")
    try:
        manifest = json.loads(manifest_path.read_text())
    except json.JSONDecodeError as exc:
        raise DatasetError(f"malformed manifest {manifest_path}: {exc}") from exc
    root = manifest_path.parent

    if "camera_angle_x" not in manifest:
        raise DatasetError(f"{manifest_path}: missing field 'camera_angle_x'")
    angle = float(manifest["camera_angle_x"])
    frames = manifest.get("frames")
    if frames is None:
        raise DatasetError(f"{manifest_path}: missing field 'frames'")
    if len(frames) == 0:
        raise ConfigError(f"{manifest_path}: dataset declares no frames")

    background = np.asarray(manifest.get("background_color", [1.0, 1.0, 1.0]), dtype=np.float64)
    if "bounds" in manifest:
        bounds = Bounds(lo=manifest["bounds"]["lo"], hi=manifest["bounds"]["hi"])
    else:
        bounds = default_bounds()

    cameras: list[Camera] = []
    images: list[np.ndarray] = []
    width = manifest.get("width")
    height = manifest.get("height")
    for i, frame in enumerate(frames):
        if "file_path" not in frame:
            raise DatasetError(f"{manifest_path}: frame {i} missing field 'file_path'")
        if "transform_matrix" not in frame:
            raise DatasetError(f"{manifest_path}: frame {i} missing field 'transform_matrix'")
        rel = str(frame["file_path"])
        img_path = root / rel
        if img_path.suffix == "":
            img_path = img_path.with_suffix(".png")
        if not img_path.exists():
            raise DatasetError(f"{manifest_path}: frame {i} image missing: {img_path}")
        img = load_image(img_path)
        if width is None:
            height, width = img.shape[0], img.shape[1]
        if img.shape != (height, width, 3):
            raise DatasetError(
                f"{manifest_path}: frame {i} image is {img.shape[1]}x{img.shape[0]}, "
                f"expected {width}x{height}")
        c2w = np.asarray(frame["transform_matrix"], dtype=np.float64)
        if c2w.shape != (4, 4):
            raise DatasetError(f"{manifest_path}: frame {i} transform_matrix is not 4x4")
        rot_c2w = _orthonormalized(c2w[:3, :3] @ _GL_FLIP, i)
        rot = rot_c2w.T
        fx = 0.5 * width / math.tan(0.5 * angle)
        cameras.append(Camera(
            width=int(width), height=int(height), fx=fx, fy=fx,
            cx=width / 2.0, cy=height / 2.0,
            rotation=rot, translation=-rot @ c2w[:3, 3],
        ))
        images.append(img)
    return ViewSet(cameras=cameras, images=images, background=background, bounds=bounds)


# ---------------------------------------------------------------------------
# binary volume formats

def _pack_header(magic: bytes, resolution: int, bounds: Bounds) -> bytes:
    return _HEADER.pack(magic, FORMAT_VERSION, resolution,
                        *bounds.lo.astype(np.float32), *bounds.hi.astype(np.float32))


def _unpack_header(blob: bytes, magic: bytes, path) -> tuple[int, Bounds]:
    if len(blob) < 4 or blob[:4] != magic:
        raise BadMagicError(f"{path}: expected magic {magic!r}, got {blob[:4]!r}")
    if len(blob) < _HEADER.size:
        raise TruncatedFileError(f"{path}: header truncated at {len(blob)} bytes")
    _, version, resolution, *box = _HEADER.unpack_from(blob)
    if version != FORMAT_VERSION:
        raise VersionMismatchError(f"{path}: format version {version}, expected {FORMAT_VERSION}")
    return resolution, Bounds(lo=box[:3], hi=box[3:])


def save_volume(volume: GaussianVolume, path) -> None:
    payload = volume.channel_matrix().astype("<f4").tobytes()
    flags = volume.active_mask.astype(np.uint8).tobytes()
    Path(path).write_bytes(_pack_header(_VOLUME_MAGIC, volume.resolution, volume.bounds)
                           + payload + flags)


def load_volume(path) -> GaussianVolume:
    blob = Path(path).read_bytes()
    resolution, bounds = _unpack_header(blob, _VOLUME_MAGIC, path)
    k = resolution ** 3
    expected = _HEADER.size + k * 14 * 4 + k
    if len(blob) < expected:
        raise TruncatedFileError(f"{path}: {len(blob)} bytes, expected {expected}")
    if len(blob) > expected:
        raise VolumeFormatError(f"{path}: {len(blob) - expected} trailing bytes")
    channels = np.frombuffer(blob, dtype="<f4", count=k * 14,
                             offset=_HEADER.size).reshape(k, 14)
    flags = np.frombuffer(blob, dtype=np.uint8, count=k,
                          offset=_HEADER.size + k * 14 * 4)
    return volume_from_channels(resolution, bounds, channels, flags.astype(bool))


def save_gdf(gdf: GDFVolume, path) -> None:
    payload = gdf.values.astype("<f4").tobytes()
    Path(path).write_bytes(_pack_header(_GDF_MAGIC, gdf.resolution, gdf.bounds) + payload)


def load_gdf(path) -> GDFVolume:
    blob = Path(path).read_bytes()
    resolution, bounds = _unpack_header(blob, _GDF_MAGIC, path)
    k = resolution ** 3
    expected = _HEADER.size + k * 4
    if len(blob) < expected:
        raise TruncatedFileError(f"{path}: {len(blob)} bytes, expected {expected}")
    if len(blob) > expected:
        raise VolumeFormatError(f"{path}: {len(blob) - expected} trailing bytes")
    values = np.frombuffer(blob, dtype="<f4", count=k, offset=_HEADER.size)
    return GDFVolume(resolution=resolution, bounds=bounds, values=values.astype(np.float64))


# ---------------------------------------------------------------------------
# splat-viewer export

def export_ply(volume: GaussianVolume, path, opacity_floor: float = 0.0) -> int:
    """Binary little-endian PLY in the de-facto splat-viewer vertex layout;
    active points below the opacity floor are left out.  Returns the count."""
    keep = volume.active_mask & (volume.activated_opacities() >= opacity_floor)
    count = int(np.count_nonzero(keep))
    header = ["ply", "format binary_little_endian 1.0", f"element vertex {count}"]
    header += [f"property float {name}" for name in PLY_PROPERTIES]
    header.append("end_header")
    rows = np.empty((count, len(PLY_PROPERTIES)), dtype="<f4")
    rows[:, 0:3] = volume.centers()[keep].astype(np.float32)
    rows[:, 3:6] = volume.colors[keep]
    rows[:, 6] = volume.opacity_logits[keep]
    rows[:, 7:10] = volume.log_scales[keep]
    rows[:, 10:14] = volume.rotations[keep]
    Path(path).write_bytes("\n".join(header).encode("ascii") + b"\n" + rows.tobytes())
    return count


# ---------------------------------------------------------------------------
# metrics log and fit configs

def format_metrics_line(m: IterationMetrics) -> str:
    return f"{m.iteration} {m.loss:.8e} {m.psnr:.4f} {m.active_count}"


def write_metrics_log(path, metrics) -> None:
    lines = [format_metrics_line(m) for m in metrics]
    Path(path).write_text("\n".join(lines) + ("\n" if lines else ""))


def load_fit_config(path) -> FitConfig:
    """Build a FitConfig from a JSON file; unknown keys are rejected."""
    try:
        raw = json.loads(Path(path).read_text())
    except json.JSONDecodeError as exc:
        raise ConfigError(f"malformed config {path}: {exc}") from exc
    if not isinstance(raw, dict):
        raise ConfigError(f"config {path} must contain a JSON object")
    kwargs = dict(raw)
    lr = kwargs.pop("lr", None)
    weights = kwargs.pop("weights", None)
    allowed = {f.name for f in dataclasses.fields(FitConfig)} - {"lr", "weights", "render_options"}
    unknown = set(kwargs) - allowed
    if unknown:
        raise ConfigError(f"config {path}: unknown keys {sorted(unknown)}")
    try:
        if lr is not None:
            kwargs["lr"] = LearningRates(**lr)
        if weights is not None:
            kwargs["weights"] = LossWeights(**weights)
        return FitConfig(**kwargs)
    except TypeError as exc:
        raise ConfigError(f"config {path}: {exc}") from exc


def fit_config_to_dict(cfg: FitConfig) -> dict:
    out = dataclasses.asdict(cfg)
    del out["render_options"]
    return out
