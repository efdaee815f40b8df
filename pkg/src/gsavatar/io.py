"""On-disk formats: checkpoints, meshes, poses, maps, configs, and images.

All binary formats are little-endian with short magic headers and record the
RNG seed that produced them. Text formats are whitespace/`key = value` based
with `#` comments.
"""
from __future__ import annotations

import hashlib
import struct
from pathlib import Path

import numpy as np
from PIL import Image

from .errors import ConfigurationError, ContractError
from .gaussians import Gaussians
from .kinematics import Pose, Skeleton
from .posepca import PcaModel
from .predictor import LinearGaussianPredictor

_GAUSS_MAGIC = b"GSAV"
_MAP_MAGIC = b"GMAP"
_PCA_MAGIC = b"GPCA"
_PRED_MAGIC = b"GPRD"


def content_hash(data) -> str:
    """sha256 hex digest of bytes or a file's contents."""
    h = hashlib.sha256()
    if isinstance(data, (bytes, bytearray)):
        h.update(data)
    else:
        h.update(Path(data).read_bytes())
    return h.hexdigest()


def _read_exact(f, n: int) -> bytes:
    buf = f.read(n)
    if len(buf) != n:
        raise ContractError("unexpected end of file")
    return buf


# ---------------------------------------------------------------------------
# Gaussian checkpoints: 14 float32 per record
# position(3) quaternion wxyz(4) log_scale(3) opacity_logit(1) color(3)


def write_gaussians(path, gaussians: Gaussians, seed: int = 0):
    records = gaussians.as_records().astype("<f4")
    with open(path, "wb") as f:
        f.write(_GAUSS_MAGIC)
        f.write(struct.pack("<IQQ", 1, len(gaussians), seed))
        f.write(records.tobytes())


def read_gaussians(path) -> tuple[Gaussians, int]:
    with open(path, "rb") as f:
        if _read_exact(f, 4) != _GAUSS_MAGIC:
            raise ContractError(f"{path}: not a gaussian checkpoint")
        version, count, seed = struct.unpack("<IQQ", _read_exact(f, 20))
        if version != 1:
            raise ContractError(f"{path}: unsupported checkpoint version {version}")
        data = np.frombuffer(_read_exact(f, count * 14 * 4), dtype="<f4")
    records = data.reshape(count, 14).astype(np.float64)
    return Gaussians.from_records(records), seed


# ---------------------------------------------------------------------------
# Template mesh + sidecars


def write_mesh(path, vertices: np.ndarray, faces: np.ndarray):
    with open(path, "w") as f:
        f.write("# triangle mesh\n")
        for v in np.asarray(vertices, dtype=float):
            f.write(f"v {v[0]:.9g} {v[1]:.9g} {v[2]:.9g}\n")
        for tri in np.asarray(faces, dtype=np.int64):
            f.write(f"f {tri[0] + 1} {tri[1] + 1} {tri[2] + 1}\n")


def read_mesh(path) -> tuple[np.ndarray, np.ndarray]:
    verts, faces = [], []
    for line in Path(path).read_text().splitlines():
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        parts = line.split()
        if parts[0] == "v":
            verts.append([float(x) for x in parts[1:4]])
        elif parts[0] == "f":
            idx = [int(p.split("/")[0]) - 1 for p in parts[1:4]]
            faces.append(idx)
    if not verts or not faces:
        raise ContractError(f"{path}: mesh has no vertices or faces")
    return np.asarray(verts, dtype=float), np.asarray(faces, dtype=np.int64)


def write_vertex_weights(path, weights: np.ndarray):
    """One line per vertex: joint:weight pairs for the nonzero entries."""
    weights = np.asarray(weights, dtype=float)
    with open(path, "w") as f:
        f.write("# per-vertex skinning weights: joint:weight pairs\n")
        for row in weights:
            nz = np.nonzero(row > 0)[0]
            f.write(" ".join(f"{j}:{row[j]:.9g}" for j in nz) + "\n")


def read_vertex_weights(path, n_joints: int) -> np.ndarray:
    rows = []
    for line in Path(path).read_text().splitlines():
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        row = np.zeros(n_joints)
        for pair in line.split():
            j, w = pair.split(":")
            j = int(j)
            if not 0 <= j < n_joints:
                raise ContractError(f"{path}: joint index {j} out of range")
            row[j] = float(w)
        s = row.sum()
        if s <= 0:
            raise ContractError(f"{path}: a vertex has no weights")
        rows.append(row / s)
    return np.asarray(rows)


def write_skeleton(path, skeleton: Skeleton):
    names = skeleton.names or tuple(f"joint{i}" for i in range(skeleton.n_joints))
    with open(path, "w") as f:
        f.write("# joint tree: parent offset_x offset_y offset_z name\n")
        for j in range(skeleton.n_joints):
            o = skeleton.offsets[j]
            f.write(f"{skeleton.parents[j]} {o[0]:.9g} {o[1]:.9g} {o[2]:.9g} {names[j]}\n")


def read_skeleton(path) -> Skeleton:
    parents, offsets, names = [], [], []
    for line in Path(path).read_text().splitlines():
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        parts = line.split()
        parents.append(int(parts[0]))
        offsets.append([float(x) for x in parts[1:4]])
        names.append(parts[4] if len(parts) > 4 else f"joint{len(names)}")
    return Skeleton(np.asarray(parents), np.asarray(offsets), tuple(names))


# ---------------------------------------------------------------------------
# Pose sequences: one frame per line, 3J joint axis-angle floats, optionally
# followed by 6 global floats (rotation, then translation)


def write_pose_sequence(path, poses: list, with_global: bool = True):
    with open(path, "w") as f:
        f.write("# one frame per line: 3J joint axis-angle values")
        f.write(" + 6 global (rot, trans)\n" if with_global else "\n")
        for p in poses:
            vals = p.flat(with_global=with_global)
            f.write(" ".join(f"{x:.9g}" for x in vals) + "\n")


def read_pose_sequence(path, n_joints: int) -> list:
    poses = []
    for line in Path(path).read_text().splitlines():
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        vals = np.asarray([float(x) for x in line.split()])
        if vals.shape[0] == 3 * n_joints:
            poses.append(Pose(vals.reshape(n_joints, 3)))
        elif vals.shape[0] == 3 * n_joints + 6:
            poses.append(
                Pose(
                    vals[: 3 * n_joints].reshape(n_joints, 3),
                    global_rotation=vals[-6:-3],
                    global_translation=vals[-3:],
                )
            )
        else:
            raise ContractError(
                f"{path}: frame has {vals.shape[0]} values, expected "
                f"{3 * n_joints} or {3 * n_joints + 6}"
            )
    return poses


# ---------------------------------------------------------------------------
# Map binaries and PNG previews


def write_map(path, data: np.ndarray):
    data = np.asarray(data)
    if data.ndim != 3:
        raise ContractError("map data must be (H, W, C)")
    H, W, C = data.shape
    with open(path, "wb") as f:
        f.write(_MAP_MAGIC)
        f.write(struct.pack("<III", H, W, C))
        f.write(data.astype("<f4").tobytes())


def read_map(path) -> np.ndarray:
    with open(path, "rb") as f:
        if _read_exact(f, 4) != _MAP_MAGIC:
            raise ContractError(f"{path}: not a map file")
        H, W, C = struct.unpack("<III", _read_exact(f, 12))
        data = np.frombuffer(_read_exact(f, H * W * C * 4), dtype="<f4")
    return data.reshape(H, W, C).astype(np.float64)


def write_png(path, image: np.ndarray):
    """Float image in [0, 1] (clipped) or uint8, (H, W) or (H, W, 3)."""
    arr = np.asarray(image)
    if arr.dtype != np.uint8:
        arr = (np.clip(arr, 0.0, 1.0) * 255.0 + 0.5).astype(np.uint8)
    Image.fromarray(arr).save(path)


def read_png(path) -> np.ndarray:
    """Returns (H, W, 3) uint8."""
    img = Image.open(path).convert("RGB")
    return np.asarray(img)


def write_map_preview(path, data: np.ndarray, mask: np.ndarray | None = None):
    """Normalize the first three channels to [0, 1] for a quick-look PNG."""
    data = np.asarray(data, dtype=float)
    C = data.shape[2]
    img = data[..., : min(3, C)]
    if img.shape[2] == 1:
        img = np.repeat(img, 3, axis=2)
    elif img.shape[2] == 2:
        img = np.concatenate([img, np.zeros_like(img[..., :1])], axis=2)
    sel = mask if mask is not None else np.ones(img.shape[:2], dtype=bool)
    if sel.any():
        lo = img[sel].min(axis=0)
        hi = img[sel].max(axis=0)
        span = np.where(hi - lo < 1e-12, 1.0, hi - lo)
        img = (img - lo) / span
    img = np.where(sel[..., None], img, 0.0)
    write_png(path, img)


# ---------------------------------------------------------------------------
# PCA model checkpoint


def write_pca(path, model: PcaModel, n_frames: int = 0, seed: int = 0):
    M = model.valid_indices.shape[0]
    with open(path, "wb") as f:
        f.write(_PCA_MAGIC)
        f.write(
            struct.pack(
                "<IIQIIQ", 1, model.resolution, M, model.n_components, n_frames, seed
            )
        )
        f.write(model.mean.astype("<f4").tobytes())
        f.write(model.components.astype("<f4").tobytes())
        f.write(model.sigmas.astype("<f4").tobytes())
        f.write(model.valid_indices.astype("<i8").tobytes())


def read_pca(path) -> tuple[PcaModel, int, int]:
    """Returns (model, n_frames, seed)."""
    with open(path, "rb") as f:
        if _read_exact(f, 4) != _PCA_MAGIC:
            raise ContractError(f"{path}: not a PCA checkpoint")
        version, resolution, M, N, T, seed = struct.unpack("<IIQIIQ", _read_exact(f, 32))
        if version != 1:
            raise ContractError(f"{path}: unsupported PCA version {version}")
        D = 3 * M
        mean = np.frombuffer(_read_exact(f, D * 4), dtype="<f4").astype(np.float64)
        comps = np.frombuffer(_read_exact(f, D * N * 4), dtype="<f4").astype(np.float64)
        sig = np.frombuffer(_read_exact(f, N * 4), dtype="<f4").astype(np.float64)
        vidx = np.frombuffer(_read_exact(f, M * 8), dtype="<i8").astype(np.int64)
    model = PcaModel(
        mean=mean,
        components=comps.reshape(D, N),
        sigmas=sig,
        valid_indices=vidx,
        resolution=resolution,
    )
    return model, T, seed


# ---------------------------------------------------------------------------
# Predictor checkpoint


def write_predictor(path, predictor: LinearGaussianPredictor, seed: int = 0):
    th = (predictor.template_hash or "0" * 64).encode("ascii")
    ph = (predictor.pca_hash or "0" * 64).encode("ascii")
    if len(th) != 64 or len(ph) != 64:
        raise ContractError("hashes must be 64-char hex strings")
    with open(path, "wb") as f:
        f.write(_PRED_MAGIC)
        f.write(struct.pack("<IQIQ", 1, predictor.n_pixels, predictor.n_components, seed))
        f.write(th)
        f.write(ph)
        f.write(predictor.base.astype("<f4").tobytes())
        f.write(predictor.coeff_beta.astype("<f4").tobytes())
        f.write(predictor.coeff_view.astype("<f4").tobytes())


def read_predictor(path) -> tuple[LinearGaussianPredictor, int]:
    with open(path, "rb") as f:
        if _read_exact(f, 4) != _PRED_MAGIC:
            raise ContractError(f"{path}: not a predictor checkpoint")
        version, P, N, seed = struct.unpack("<IQIQ", _read_exact(f, 24))
        if version != 1:
            raise ContractError(f"{path}: unsupported predictor version {version}")
        th = _read_exact(f, 64).decode("ascii")
        ph = _read_exact(f, 64).decode("ascii")
        base = np.frombuffer(_read_exact(f, P * 14 * 4), dtype="<f4").reshape(P, 14)
        cb = np.frombuffer(_read_exact(f, P * 14 * N * 4), dtype="<f4").reshape(P, 14, N)
        cv = np.frombuffer(_read_exact(f, P * 9 * 4), dtype="<f4").reshape(P, 3, 3)
    pred = LinearGaussianPredictor(
        base=base.copy(), coeff_beta=cb.copy(), coeff_view=cv.copy(),
        template_hash=th, pca_hash=ph,
    )
    return pred, seed


# ---------------------------------------------------------------------------
# Loss curve CSV


def write_loss_csv(path, history: list, seed: int):
    with open(path, "w") as f:
        f.write(f"# seed={seed}\n")
        f.write("iteration,l1,reg,total,psnr\n")
        for i, r in enumerate(history):
            f.write(f"{i},{r.l1:.8g},{r.reg:.8g},{r.total:.8g},{r.psnr:.6g}\n")


def read_loss_csv(path) -> np.ndarray:
    """Returns (iters, 5) array of iteration, l1, reg, total, psnr."""
    rows = []
    for line in Path(path).read_text().splitlines():
        if line.startswith("#") or line.startswith("iteration") or not line.strip():
            continue
        rows.append([float(x) for x in line.split(",")])
    return np.asarray(rows)


# ---------------------------------------------------------------------------
# key = value config files


def parse_config_text(text: str) -> dict:
    """Flat `key = value` pairs; # starts a comment; values become bool, int,
    float, or str (first parse that succeeds)."""
    out: dict = {}
    for ln, line in enumerate(text.splitlines(), start=1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigurationError(f"line {ln}: expected key = value")
        key, val = (s.strip() for s in line.split("=", 1))
        if not key:
            raise ConfigurationError(f"line {ln}: empty key")
        low = val.lower()
        if low in ("true", "false"):
            out[key] = low == "true"
            continue
        try:
            out[key] = int(val)
            continue
        except ValueError:
            pass
        try:
            out[key] = float(val)
            continue
        except ValueError:
            pass
        out[key] = val
    return out


def read_config(path) -> dict:
    return parse_config_text(Path(path).read_text())


def write_config(path, values: dict):
    with open(path, "w") as f:
        for k, v in values.items():
            f.write(f"{k} = {v}\n")


# ---------------------------------------------------------------------------
# Camera list: one camera per line
# fx fy cx cy width height r00..r22 tx ty tz


def write_cameras(path, cameras: list):
    with open(path, "w") as f:
        f.write("# fx fy cx cy width height r00..r22 (row major) tx ty tz\n")
        for c in cameras:
            R = c.rotation.reshape(-1)
            t = c.translation
            vals = [c.fx, c.fy, c.cx, c.cy, c.width, c.height, *R, *t]
            f.write(" ".join(f"{v:.9g}" for v in vals) + "\n")


def read_cameras(path) -> list:
    from .cameras import PerspectiveCamera

    cams = []
    for line in Path(path).read_text().splitlines():
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        v = [float(x) for x in line.split()]
        if len(v) != 18:
            raise ContractError(f"{path}: camera line needs 18 values, got {len(v)}")
        cams.append(
            PerspectiveCamera(
                rotation=np.asarray(v[6:15]).reshape(3, 3),
                translation=np.asarray(v[15:18]),
                fx=v[0], fy=v[1], cx=v[2], cy=v[3],
                width=int(v[4]), height=int(v[5]),
            )
        )
    return cams
