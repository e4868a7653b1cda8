"""Serialization: compressed model files, scene manifests, images, metrics.

Model file layout (little-endian, magic "CGS1", version 1):

    magic        4 bytes  b"CGS1"
    version      u32
    sh_degree    u32
    N            u64
    live_sh      u32
    live_sr      u32
    positions    float32[N*3]
    opacity      float32[N]
    g2sh         int32[N]      (re-indexed against the packed rows)
    g2sr         int32[N]
    sh_rows      float32[live_sh * sh_dim]
    sr_rows      float32[live_sr * 7]

Only live rows are stored, in ascending original index order; refcounts are
recovered by counting on load. Split lineage and the iteration counter are
training-transient and not persisted.

The scene manifest is line oriented; floats are written with repr() so a
save/load cycle is bit exact. See save_manifest for the grammar.
"""

from __future__ import annotations

import io
import os
import struct
from dataclasses import dataclass, field

import numpy as np
from PIL import Image

from .camera import Camera, ring_cameras
from .model import Codebook, GaussianArrays, ModelState, sh_dim
from .render import rasterize_forward

MAGIC = b"CGS1"
VERSION = 1

CSV_HEADER = "iteration,kind,codebook,attempts,accepts,live_sh,live_sr,recon,total,psnr"


class ModelFormatError(ValueError):
    pass


def _compaction(book) -> tuple[np.ndarray, np.ndarray]:
    """(live_row_indices, old->new remap array) for dense packing."""
    live = book.live_indices()
    remap = np.full(book.capacity, -1, dtype=np.int32)
    remap[live] = np.arange(len(live), dtype=np.int32)
    return live, remap


def serialize_model(state: ModelState) -> bytes:
    """Canonical byte serialization; freed rows are compacted out."""
    g = state.gaussians
    n = g.count
    live_sh, remap_sh = _compaction(state.sh)
    live_sr, remap_sr = _compaction(state.sr)
    buf = io.BytesIO()
    buf.write(MAGIC)
    buf.write(struct.pack("<IIQII", VERSION, state.sh_degree, n,
                          len(live_sh), len(live_sr)))
    buf.write(np.ascontiguousarray(g.positions, dtype="<f4").tobytes())
    buf.write(np.ascontiguousarray(g.opacity_logits, dtype="<f4").tobytes())
    buf.write(np.ascontiguousarray(remap_sh[g.g2sh], dtype="<i4").tobytes())
    buf.write(np.ascontiguousarray(remap_sr[g.g2sr], dtype="<i4").tobytes())
    buf.write(np.ascontiguousarray(state.sh.rows[live_sh], dtype="<f4").tobytes())
    buf.write(np.ascontiguousarray(state.sr.rows[live_sr], dtype="<f4").tobytes())
    return buf.getvalue()


def save_model(state: ModelState, path) -> None:
    with open(path, "wb") as f:
        f.write(serialize_model(state))


def _take(data: bytes, offset: int, nbytes: int, section: str) -> tuple[bytes, int]:
    if offset + nbytes > len(data):
        raise ModelFormatError(
            f"truncated model file in section '{section}' at byte {offset}: "
            f"need {nbytes} bytes, have {len(data) - offset}")
    return data[offset:offset + nbytes], offset + nbytes


def deserialize_model(data: bytes) -> ModelState:
    chunk, off = _take(data, 0, 4, "magic")
    if chunk != MAGIC:
        raise ModelFormatError(f"bad magic {chunk!r} at byte 0, expected {MAGIC!r}")
    chunk, off = _take(data, off, struct.calcsize("<IIQII"), "header")
    version, degree, n, live_sh, live_sr = struct.unpack("<IIQII", chunk)
    if version != VERSION:
        raise ModelFormatError(f"unsupported version {version} at byte 4")
    dim = sh_dim(degree)

    def read_array(off, dtype, count, shape, section):
        nbytes = np.dtype(dtype).itemsize * count
        chunk, off2 = _take(data, off, nbytes, section)
        return np.frombuffer(chunk, dtype=dtype).reshape(shape).copy(), off2

    positions, off = read_array(off, "<f4", n * 3, (n, 3), "positions")
    logits, off = read_array(off, "<f4", n, (n,), "opacity")
    g2sh, off = read_array(off, "<i4", n, (n,), "g2sh")
    g2sr, off = read_array(off, "<i4", n, (n,), "g2sr")
    sh_rows, off = read_array(off, "<f4", live_sh * dim, (live_sh, dim), "sh_rows")
    sr_rows, off = read_array(off, "<f4", live_sr * 7, (live_sr, 7), "sr_rows")
    if off != len(data):
        raise ModelFormatError(f"{len(data) - off} trailing bytes at byte {off}")
    if n and (live_sh == 0 or live_sr == 0):
        raise ModelFormatError("nonzero N with an empty codebook")
    for name, idx, count in (("g2sh", g2sh, live_sh), ("g2sr", g2sr, live_sr)):
        if n and (idx.min() < 0 or idx.max() >= count):
            raise ModelFormatError(f"{name} index out of range")

    sh = Codebook(sh_rows)
    sr = Codebook(sr_rows)
    sh.refcount[:] = np.bincount(g2sh, minlength=live_sh)
    sr.refcount[:] = np.bincount(g2sr, minlength=live_sr)
    if np.any(sh.refcount == 0) or np.any(sr.refcount == 0):
        raise ModelFormatError("stored codebook contains unreferenced rows")
    arrays = GaussianArrays(positions=positions, opacity_logits=logits,
                            g2sh=g2sh, g2sr=g2sr)
    return ModelState(gaussians=arrays, sh=sh, sr=sr)


def load_model(path) -> ModelState:
    with open(path, "rb") as f:
        return deserialize_model(f.read())


# ---------------------------------------------------------------------------
# Images

def save_png(path, image: np.ndarray) -> None:
    """Store a float image in [0, 1] as 8-bit RGB PNG."""
    arr = np.asarray(image, dtype=np.float64)
    u8 = np.clip(np.rint(arr * 255.0), 0, 255).astype(np.uint8)
    Image.fromarray(u8, mode="RGB").save(path, format="PNG")


def load_png(path) -> np.ndarray:
    """Load an 8-bit RGB PNG as float64 in [0, 1]."""
    with Image.open(path) as im:
        return np.asarray(im.convert("RGB"), dtype=np.float64) / 255.0


def quantize8(image: np.ndarray) -> np.ndarray:
    """Round a float image onto the 8-bit grid (the PNG round trip)."""
    return np.clip(np.rint(np.asarray(image, dtype=np.float64) * 255.0), 0, 255) / 255.0


# ---------------------------------------------------------------------------
# Scene manifests

@dataclass
class ViewSpec:
    camera: Camera
    image_path: str  # relative to the manifest file
    split: str = "train"


@dataclass
class SceneManifest:
    views: list = field(default_factory=list)


def save_manifest(manifest: SceneManifest, path) -> None:
    """Write the line-oriented manifest grammar:

        contrags-scene 1
        view
        image <relative path>
        size <width> <height>
        intrinsics <fx> <fy> <cx> <cy>
        rotation <r00> <r01> ... <r22>
        translation <tx> <ty> <tz>
        split <train|eval>
        end
    """
    lines = ["contrags-scene 1"]
    for v in manifest.views:
        c = v.camera
        lines.append("view")
        lines.append(f"image {v.image_path}")
        lines.append(f"size {c.width} {c.height}")
        lines.append("intrinsics " + " ".join(repr(float(x)) for x in (c.fx, c.fy, c.cx, c.cy)))
        lines.append("rotation " + " ".join(repr(float(x)) for x in c.rotation.ravel()))
        lines.append("translation " + " ".join(repr(float(x)) for x in c.translation))
        lines.append(f"split {v.split}")
        lines.append("end")
    with open(path, "w") as f:
        f.write("\n".join(lines) + "\n")


def load_manifest(path) -> SceneManifest:
    with open(path) as f:
        lines = [ln.strip() for ln in f if ln.strip()]
    if not lines or lines[0] != "contrags-scene 1":
        raise ValueError(f"{path}: not a contrags scene manifest")
    views = []
    fields = {}
    for ln in lines[1:]:
        key, _, rest = ln.partition(" ")
        if key == "view":
            fields = {}
        elif key == "end":
            w, h = (int(x) for x in fields["size"].split())
            fx, fy, cx, cy = (float(x) for x in fields["intrinsics"].split())
            rot = np.array([float(x) for x in fields["rotation"].split()]).reshape(3, 3)
            trans = np.array([float(x) for x in fields["translation"].split()])
            views.append(ViewSpec(
                camera=Camera(rotation=rot, translation=trans, fx=fx, fy=fy,
                              cx=cx, cy=cy, width=w, height=h),
                image_path=fields["image"],
                split=fields.get("split", "train")))
        elif key in ("image", "size", "intrinsics", "rotation", "translation", "split"):
            fields[key] = rest
        else:
            raise ValueError(f"{path}: unknown manifest line {ln!r}")
    return SceneManifest(views=views)


def load_scene(manifest_path) -> tuple[SceneManifest, list]:
    """Load a manifest and its images as (Camera, float image) view pairs."""
    manifest = load_manifest(manifest_path)
    base = os.path.dirname(os.path.abspath(manifest_path))
    views = []
    for v in manifest.views:
        img_path = os.path.join(base, v.image_path)
        if not os.path.exists(img_path):
            raise ValueError(f"manifest references missing image {img_path}")
        img = load_png(img_path)
        if img.shape[:2] != (v.camera.height, v.camera.width):
            raise ValueError(f"{img_path}: image size {img.shape[:2]} does not match "
                             f"declared {(v.camera.height, v.camera.width)}")
        views.append((v.camera, img))
    return manifest, views


# ---------------------------------------------------------------------------
# Synthetic scenes

def synth_scene(num_gaussians: int, num_views: int, image_size: int,
                sh_degree: int, shared_rows: int, seed: int):
    """Random ground-truth scene with exactly `shared_rows` rows per codebook.

    Gaussians are assigned to rows round robin, cameras sit on a ring looking
    at the box center, and ground-truth images are rendered with the module
    renderer. Returns (state, manifest, images); image paths in the manifest
    are filled in but nothing is written to disk.
    """
    if shared_rows > num_gaussians or shared_rows < 1:
        raise ValueError("shared_rows must be in 1..num_gaussians")
    rng = np.random.default_rng(seed)
    dim = sh_dim(sh_degree)

    positions = rng.uniform(-1.0, 1.0, size=(num_gaussians, 3)).astype(np.float32)
    opacities = rng.uniform(0.35, 0.9, size=num_gaussians)
    logits = np.log(opacities / (1.0 - opacities)).astype(np.float32)

    sh_rows = np.zeros((shared_rows, dim), dtype=np.float32)
    sh_rows[:, 0:3] = rng.uniform(-1.2, 1.2, size=(shared_rows, 3))
    if dim > 3:
        sh_rows[:, 3:] = rng.uniform(-0.25, 0.25, size=(shared_rows, dim - 3))

    sr_rows = np.zeros((shared_rows, 7), dtype=np.float32)
    sr_rows[:, 0:3] = np.log(rng.uniform(0.08, 0.25, size=(shared_rows, 3)))
    quats = rng.normal(size=(shared_rows, 4))
    sr_rows[:, 3:7] = quats / np.linalg.norm(quats, axis=1, keepdims=True)

    assign = (np.arange(num_gaussians) % shared_rows).astype(np.int32)
    sh = Codebook(sh_rows)
    sr = Codebook(sr_rows)
    sh.refcount[:] = np.bincount(assign, minlength=shared_rows)
    sr.refcount[:] = np.bincount(assign, minlength=shared_rows)
    state = ModelState(
        gaussians=GaussianArrays(positions=positions, opacity_logits=logits,
                                 g2sh=assign.copy(), g2sr=assign.copy()),
        sh=sh, sr=sr, rng_seed=seed)

    cams = ring_cameras(num_views, center=(0.0, 0.0, 0.0), radius=3.0, height=0.8,
                        fx=0.8 * image_size, width=image_size, height_px=image_size)
    images = [rasterize_forward(state, cam).image for cam in cams]
    manifest = SceneManifest(views=[
        ViewSpec(camera=cam, image_path=f"view_{k:03d}.png", split="train")
        for k, cam in enumerate(cams)])
    return state, manifest, images


def write_scene(out_dir, state: ModelState, manifest: SceneManifest, images: list) -> None:
    """Write ground-truth PNGs, the manifest and the ground-truth model."""
    os.makedirs(out_dir, exist_ok=True)
    for view, img in zip(manifest.views, images):
        save_png(os.path.join(out_dir, view.image_path), img)
    save_manifest(manifest, os.path.join(out_dir, "scene.txt"))
    save_model(state, os.path.join(out_dir, "ground_truth.cgs"))


# ---------------------------------------------------------------------------
# Metrics CSV

def _csv_float(v) -> str:
    v = float(v)
    return repr(v) if np.isfinite(v) else "nan"


def write_metrics_csv(records, path) -> None:
    """Fixed-schema CSV: one row per transition record."""
    with open(path, "w") as f:
        f.write(CSV_HEADER + "\n")
        for r in records:
            f.write(",".join([
                str(r.iteration), r.kind, r.codebook,
                str(r.attempts), str(r.accepts),
                str(r.live_sh), str(r.live_sr),
                _csv_float(r.recon), _csv_float(r.total), _csv_float(r.psnr),
            ]) + "\n")
