"""Dataset layout, checkpoints and plain file formats (PNG, PLY, OBJ, raw floats)."""
from __future__ import annotations

import json
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from PIL import Image

from .decoder import DecoderMlp
from .grid import SparseGrid
from .render import Camera

CHECKPOINT_MAGIC = b"PSRFCKPT"
CHECKPOINT_VERSION = 1
RAW_MAGIC = b"PSRAW1\n"


class DatasetError(ValueError):
    pass


class PoseError(DatasetError):
    pass


class CheckpointError(ValueError):
    pass


# ---------------------------------------------------------------- images
def read_png(path) -> np.ndarray:
    """RGB image as float64 in [0, 1], ``[H, W, 3]``."""
    with Image.open(path) as im:
        return np.asarray(im.convert("RGB"), dtype=np.float64) / 255.0


def read_mask(path) -> np.ndarray:
    with Image.open(path) as im:
        return np.asarray(im.convert("L")) > 127


def to_uint8(img) -> np.ndarray:
    return np.round(np.clip(np.asarray(img, dtype=np.float64), 0.0, 1.0) * 255.0).astype(np.uint8)


def write_png(path, img) -> None:
    arr = np.asarray(img)
    if arr.dtype == bool:
        arr = arr.astype(np.uint8) * 255
    elif arr.dtype != np.uint8:
        arr = to_uint8(arr)
    Image.fromarray(arr).save(path)


def write_raw(path, img) -> None:
    """Float planes: magic, ``H W C`` line, then little-endian f32 channel planes."""
    a = np.asarray(img, dtype=np.float64)
    if a.ndim == 2:
        a = a[..., None]
    h, w, c = a.shape
    with open(path, "wb") as fh:
        fh.write(RAW_MAGIC)
        fh.write(f"{h} {w} {c}\n".encode())
        fh.write(np.ascontiguousarray(a.transpose(2, 0, 1)).astype("<f4").tobytes())


def read_raw(path) -> np.ndarray:
    with open(path, "rb") as fh:
        if fh.read(len(RAW_MAGIC)) != RAW_MAGIC:
            raise ValueError(f"{path}: not a raw float dump")
        h, w, c = (int(x) for x in fh.readline().split())
        data = np.frombuffer(fh.read(), dtype="<f4")
    if data.size != h * w * c:
        raise ValueError(f"{path}: truncated raw float dump")
    return data.reshape(c, h, w).transpose(1, 2, 0).astype(np.float64)


# ---------------------------------------------------------------- dataset
@dataclass
class Dataset:
    cameras: list
    images: list
    masks: list
    points_gt: np.ndarray | None = None

    def __len__(self) -> int:
        return len(self.cameras)

    def downsampled(self, divisor: int) -> "Dataset":
        if divisor == 1:
            return self
        imgs, masks = [], []
        for im, m in zip(self.images, self.masks):
            h, w = im.shape[0] // divisor, im.shape[1] // divisor
            crop = im[:h * divisor, :w * divisor]
            imgs.append(crop.reshape(h, divisor, w, divisor, 3).mean(axis=(1, 3)))
            mc = m[:h * divisor, :w * divisor].astype(np.float64)
            masks.append(mc.reshape(h, divisor, w, divisor).mean(axis=(1, 3)) >= 0.5)
        return Dataset([c.scaled(divisor) for c in self.cameras], imgs, masks, self.points_gt)


def format_camera(cam: Camera) -> str:
    vals = [cam.fx, cam.fy, cam.cx, cam.cy]
    pose = " ".join(repr(float(x)) for x in cam.pose.reshape(-1))
    return (f"{cam.camera_id} " + " ".join(repr(float(v)) for v in vals)
            + f" {cam.width} {cam.height} {pose}")


def parse_cameras(text: str) -> list:
    cams = []
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        parts = line.split()
        if len(parts) != 19:
            raise DatasetError(f"cameras.txt line {lineno}: expected 19 fields, got {len(parts)}")
        cid = int(parts[0])
        fx, fy, cx, cy = (float(x) for x in parts[1:5])
        w, h = int(parts[5]), int(parts[6])
        pose = np.array([float(x) for x in parts[7:19]]).reshape(3, 4)
        cams.append(Camera(fx, fy, cx, cy, w, h, pose, cid))
    return cams


def save_dataset(ds: Dataset, root) -> Path:
    root = Path(root)
    (root / "images").mkdir(parents=True, exist_ok=True)
    (root / "masks").mkdir(parents=True, exist_ok=True)
    lines = ["# id fx fy cx cy width height pose(3x4 world-from-camera, row-major)"]
    for cam, img, m in zip(ds.cameras, ds.images, ds.masks):
        lines.append(format_camera(cam))
        write_png(root / "images" / f"{cam.camera_id}.png", img)
        write_png(root / "masks" / f"{cam.camera_id}.png", np.asarray(m, bool))
    (root / "cameras.txt").write_text("\n".join(lines) + "\n")
    if ds.points_gt is not None:
        write_ply(root / "points_gt.ply", ds.points_gt)
    return root


def load_dataset(root, pose_tol: float = 1e-4) -> Dataset:
    root = Path(root)
    cam_file = root / "cameras.txt"
    if not cam_file.exists():
        raise DatasetError(f"missing {cam_file}")
    cams = parse_cameras(cam_file.read_text())
    if not cams:
        raise DatasetError(f"{cam_file} lists no cameras")
    images, masks = [], []
    for cam in cams:
        try:
            cam.validate(pose_tol)
        except ValueError as exc:
            raise PoseError(str(exc)) from None
        ip = root / "images" / f"{cam.camera_id}.png"
        mp = root / "masks" / f"{cam.camera_id}.png"
        for p in (ip, mp):
            if not p.exists():
                raise DatasetError(f"missing {p}")
        img, m = read_png(ip), read_mask(mp)
        if img.shape[:2] != (cam.height, cam.width) or m.shape != img.shape[:2]:
            raise DatasetError(f"camera {cam.camera_id}: image/mask size does not match "
                               f"{cam.width}x{cam.height}")
        images.append(img)
        masks.append(m)
    pts = None
    if (root / "points_gt.ply").exists():
        pts, _ = read_ply(root / "points_gt.ply")
    return Dataset(cams, images, masks, pts)


# ---------------------------------------------------------------- meshes
def write_ply(path, vertices, faces=None) -> None:
    v = np.asarray(vertices, dtype=np.float64)
    f = None if faces is None else np.asarray(faces, dtype=np.int64)
    head = ["ply", "format ascii 1.0", f"element vertex {len(v)}",
            "property float x", "property float y", "property float z"]
    if f is not None:
        head += [f"element face {len(f)}", "property list uchar int vertex_indices"]
    head.append("end_header")
    with open(path, "w") as fh:
        fh.write("\n".join(head) + "\n")
        np.savetxt(fh, v, fmt="%.9g")
        if f is not None and len(f):
            np.savetxt(fh, np.hstack([np.full((len(f), 1), 3), f]), fmt="%d")


def read_ply(path):
    """ASCII PLY reader for the vertex/face subset written by :func:`write_ply`."""
    with open(path) as fh:
        if fh.readline().strip() != "ply":
            raise ValueError(f"{path}: not a PLY file")
        nv = nf = 0
        for line in fh:
            parts = line.split()
            if parts[:2] == ["element", "vertex"]:
                nv = int(parts[2])
            elif parts[:2] == ["element", "face"]:
                nf = int(parts[2])
            elif parts and parts[0] == "end_header":
                break
        verts = np.array([[float(x) for x in fh.readline().split()[:3]] for _ in range(nv)]).reshape(nv, 3)
        faces = np.array([[int(x) for x in fh.readline().split()[1:4]] for _ in range(nf)],
                         dtype=np.int64).reshape(nf, 3)
    return verts, faces


def write_obj(path, vertices, faces) -> None:
    with open(path, "w") as fh:
        for p in np.asarray(vertices):
            fh.write(f"v {p[0]:.9g} {p[1]:.9g} {p[2]:.9g}\n")
        for f in np.asarray(faces) + 1:
            fh.write(f"f {f[0]} {f[1]} {f[2]}\n")


# ---------------------------------------------------------------- checkpoints
_GRID_TENSORS = ("tile_coords", "sdf_raw", "planes", "probe_coords", "probe_ids", "probes", "fill_sign")
_MLP_TENSORS = ("W1", "b1", "W2", "b2", "W3", "b3", "camera_bias")


def _dtype_code(a: np.ndarray) -> str:
    return a.dtype.newbyteorder("<").str


def save_checkpoint(path, grid: SparseGrid, mlp: DecoderMlp, meta: dict | None = None) -> None:
    """Binary checkpoint: magic, version, JSON header, little-endian tensors."""
    tensors = {f"grid.{k}": getattr(grid, k) for k in _GRID_TENSORS}
    for k in _MLP_TENSORS:
        v = getattr(mlp, k)
        if v is not None:
            tensors[f"mlp.{k}"] = v
    table, blobs, offset = [], [], 0
    for name, arr in tensors.items():
        a = np.ascontiguousarray(arr)
        a = a.astype(a.dtype.newbyteorder("<"), copy=False)
        raw = a.tobytes()
        table.append({"name": name, "dtype": _dtype_code(a), "shape": list(a.shape),
                      "offset": offset, "nbytes": len(raw)})
        blobs.append(raw)
        offset += len(raw)
    header = {
        "grid": {"bbox_min": [float(x) for x in grid.bbox_min], "voxel_size": float(grid.voxel_size),
                 "resolution": list(grid.resolution), "lod": int(grid.lod),
                 "far_voxels": float(grid.far_voxels)},
        "meta": meta or {},
        "tensors": table,
    }
    hb = json.dumps(header, sort_keys=True).encode()
    with open(path, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(struct.pack("<II", CHECKPOINT_VERSION, len(hb)))
        fh.write(hb)
        fh.write(struct.pack("<Q", offset))
        for raw in blobs:
            fh.write(raw)


def load_checkpoint(path):
    """Returns ``(grid, mlp, meta)``."""
    data = Path(path).read_bytes()
    n = len(CHECKPOINT_MAGIC)
    if len(data) < n + 8 or data[:n] != CHECKPOINT_MAGIC:
        raise CheckpointError(f"{path}: bad magic or truncated header")
    version, hlen = struct.unpack_from("<II", data, n)
    if version != CHECKPOINT_VERSION:
        raise CheckpointError(f"{path}: checkpoint version {version}, expected {CHECKPOINT_VERSION}")
    pos = n + 8
    if len(data) < pos + hlen + 8:
        raise CheckpointError(f"{path}: truncated header")
    try:
        header = json.loads(data[pos:pos + hlen])
    except ValueError as exc:
        raise CheckpointError(f"{path}: corrupt header ({exc})") from None
    pos += hlen
    (payload,) = struct.unpack_from("<Q", data, pos)
    pos += 8
    if len(data) != pos + payload:
        raise CheckpointError(f"{path}: payload is {len(data) - pos} bytes, header says {payload}")
    arrays = {}
    for t in header["tensors"]:
        start = pos + t["offset"]
        buf = data[start:start + t["nbytes"]]
        arrays[t["name"]] = np.frombuffer(buf, dtype=np.dtype(t["dtype"])).reshape(t["shape"]).copy()
    g = header["grid"]
    dt = arrays["grid.sdf_raw"].dtype
    native = dt.newbyteorder("=")
    grid = SparseGrid(bbox_min=np.array(g["bbox_min"]), voxel_size=g["voxel_size"],
                      resolution=tuple(g["resolution"]),
                      tile_coords=arrays["grid.tile_coords"],
                      sdf_raw=arrays["grid.sdf_raw"].astype(native),
                      planes=arrays["grid.planes"].astype(native),
                      probe_coords=arrays["grid.probe_coords"],
                      probe_ids=arrays["grid.probe_ids"],
                      probes=arrays["grid.probes"].astype(native),
                      fill_sign=arrays["grid.fill_sign"], lod=g["lod"],
                      far_voxels=g["far_voxels"])
    mlp = DecoderMlp(*(arrays[f"mlp.{k}"].astype(native) for k in _MLP_TENSORS[:6]),
                     arrays.get("mlp.camera_bias"))
    if mlp.camera_bias is not None:
        mlp.camera_bias = mlp.camera_bias.astype(native)
    return grid, mlp, header["meta"]


def checkpoint_tensors(grid: SparseGrid, mlp: DecoderMlp) -> dict:
    out = {f"grid.{k}": getattr(grid, k) for k in _GRID_TENSORS}
    out.update({f"mlp.{k}": getattr(mlp, k) for k in _MLP_TENSORS if getattr(mlp, k) is not None})
    return out


def write_metrics(path, metrics: dict) -> None:
    Path(path).write_text(json.dumps(metrics, indent=2, sort_keys=True) + "\n")


def format_metrics(metrics: dict) -> str:
    return "\n".join(f"{k}={v:.6g}" if isinstance(v, float) else f"{k}={v}"
                     for k, v in metrics.items())
