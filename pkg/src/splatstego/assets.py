"""On-disk formats: Gaussian PLY, transforms manifests, PNG images, decoder checkpoints."""
from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np
from PIL import Image

from .camera import DEFAULT_FAR, DEFAULT_NEAR, Camera
from .errors import (
    CheckpointCorruptError,
    CheckpointVersionError,
    ImageFormatError,
    ManifestError,
    PlyHeaderError,
    PlyPropertyMismatchError,
    PlyTruncatedError,
)
from .nn import ConvStack
from .scene import GaussianCloud

# --------------------------------------------------------------------------
# PLY

_PLY_TYPES = {
    "float": "<f4", "float32": "<f4", "double": "<f8", "float64": "<f8",
    "uchar": "u1", "uint8": "u1", "char": "i1", "int8": "i1",
    "short": "<i2", "int16": "<i2", "ushort": "<u2", "uint16": "<u2",
    "int": "<i4", "int32": "<i4", "uint": "<u4", "uint32": "<u4",
}


def _property_names(mode, M, n_coeffs):
    names = ["x", "y", "z"]
    if mode == "feature":
        names += [f"f_feat_{i}" for i in range(M)]
    else:
        n_rest = 3 * (n_coeffs - 1)
        names += [f"f_dc_{i}" for i in range(3)] + [f"f_rest_{i}" for i in range(n_rest)]
        if mode == "sh-double":
            names += [f"f_dc_{i}_h2" for i in range(3)] + [f"f_rest_{i}_h2" for i in range(n_rest)]
    names += ["opacity", "scale_0", "scale_1", "scale_2", "rot_0", "rot_1", "rot_2", "rot_3"]
    return names


def _sh_to_columns(coeffs):
    # (N, K, 3) -> dc (N, 3), rest channel-major (N, 3*(K-1))
    dc = coeffs[:, 0, :]
    rest = np.transpose(coeffs[:, 1:, :], (0, 2, 1)).reshape(len(coeffs), -1)
    return dc, rest


def _columns_to_sh(dc, rest):
    n = len(dc)
    rest = rest.reshape(n, 3, -1).transpose(0, 2, 1)
    return np.concatenate([dc[:, None, :], rest], axis=1)


def write_ply(cloud: GaussianCloud, path):
    n = len(cloud)
    if cloud.mode == "feature":
        M = cloud.features.shape[1]
        n_coeffs = 0
        blocks = [cloud.features]
    else:
        n_coeffs = cloud.features.shape[1]
        M = 3 * n_coeffs
        dc, rest = _sh_to_columns(cloud.features[:, :, :3])
        blocks = [dc, rest]
        if cloud.mode == "sh-double":
            dc2, rest2 = _sh_to_columns(cloud.features[:, :, 3:6])
            blocks += [dc2, rest2]
    names = _property_names(cloud.mode, M, n_coeffs)
    data = np.concatenate(
        [cloud.means] + blocks + [cloud.opacity_logits[:, None], cloud.log_scales, cloud.quats],
        axis=1,
    ).astype("<f4")
    assert data.shape[1] == len(names)
    header = [
        "ply",
        "format binary_little_endian 1.0",
        f"comment gshider_mode={cloud.mode}",
        f"comment gshider_M={M}",
        f"comment gshider_extent={float(np.float32(cloud.extent))!r}",
        f"element vertex {n}",
    ]
    header += [f"property float {name}" for name in names]
    header.append("end_header")
    with open(path, "wb") as f:
        f.write(("\n".join(header) + "\n").encode("ascii"))
        f.write(np.ascontiguousarray(data).tobytes())


def _read_header(f):
    lines = []
    first = f.readline()
    if first.strip() != b"ply":
        raise PlyHeaderError("missing 'ply' magic line")
    while True:
        line = f.readline()
        if not line:
            raise PlyHeaderError("header is not terminated by end_header")
        try:
            text = line.decode("ascii").strip()
        except UnicodeDecodeError as exc:
            raise PlyHeaderError("non-ASCII header line") from exc
        if text == "end_header":
            return lines
        lines.append(text)
        if len(lines) > 10000:
            raise PlyHeaderError("header too long")


def read_ply_table(path):
    """Parse a binary little-endian (or ASCII) PLY vertex element.

    Returns (comments: dict, structured array).
    """
    with open(path, "rb") as f:
        lines = _read_header(f)
        fmt = None
        comments = {}
        count = None
        props = []
        in_vertex = False
        for text in lines:
            parts = text.split()
            if not parts:
                continue
            if parts[0] == "format":
                if len(parts) != 3:
                    raise PlyHeaderError(f"bad format line {text!r}")
                fmt = parts[1]
            elif parts[0] == "comment":
                body = text[len("comment"):].strip()
                if "=" in body:
                    k, v = body.split("=", 1)
                    comments[k.strip()] = v.strip()
            elif parts[0] == "element":
                if len(parts) != 3:
                    raise PlyHeaderError(f"bad element line {text!r}")
                in_vertex = parts[1] == "vertex"
                if in_vertex:
                    try:
                        count = int(parts[2])
                    except ValueError as exc:
                        raise PlyHeaderError(f"bad vertex count {parts[2]!r}") from exc
                    if count < 0:
                        raise PlyHeaderError("negative vertex count")
                elif count is None:
                    raise PlyHeaderError("elements before vertex are not supported")
            elif parts[0] == "property":
                if not in_vertex:
                    continue
                if len(parts) != 3 or parts[1] == "list":
                    raise PlyHeaderError(f"unsupported property line {text!r}")
                if parts[1] not in _PLY_TYPES:
                    raise PlyHeaderError(f"unknown property type {parts[1]!r}")
                props.append((parts[2], _PLY_TYPES[parts[1]]))
            elif parts[0] in ("obj_info",):
                continue
            else:
                raise PlyHeaderError(f"unexpected header line {text!r}")
        if fmt not in ("binary_little_endian", "ascii"):
            raise PlyHeaderError(f"unsupported PLY format {fmt!r}")
        if count is None:
            raise PlyHeaderError("no vertex element")
        names = [p[0] for p in props]
        if len(set(names)) != len(names):
            raise PlyHeaderError("duplicate property names")
        dtype = np.dtype(props)
        if fmt == "ascii":
            rows = f.read().decode("ascii", errors="replace").split("\n")
            rows = [r.split() for r in rows if r.strip()]
            if len(rows) < count:
                raise PlyTruncatedError(f"expected {count} vertices, found {len(rows)}")
            arr = np.zeros(count, dtype=dtype)
            try:
                for i in range(count):
                    for (name, _), val in zip(props, rows[i]):
                        arr[name][i] = float(val)
            except ValueError as exc:
                raise PlyTruncatedError("malformed ASCII vertex row") from exc
            return comments, arr
        body = f.read(count * dtype.itemsize)
        if len(body) < count * dtype.itemsize:
            raise PlyTruncatedError(
                f"body holds {len(body)} bytes, header promises {count * dtype.itemsize}"
            )
        return comments, np.frombuffer(body, dtype=dtype).copy()


def read_ply(path) -> GaussianCloud:
    comments, arr = read_ply_table(path)
    mode = comments.get("gshider_mode")
    if mode not in ("feature", "sh", "sh-double"):
        raise PlyHeaderError(f"missing or unknown gshider_mode comment: {mode!r}")
    try:
        M = int(comments["gshider_M"])
    except (KeyError, ValueError) as exc:
        raise PlyHeaderError("missing or malformed gshider_M comment") from exc
    extent = float(comments.get("gshider_extent", 1.0))
    names = list(arr.dtype.names or ())
    if mode == "feature":
        found = sum(1 for n in names if n.startswith("f_feat_"))
        if found != M:
            raise PlyPropertyMismatchError(f"header says M={M} but file has {found} feature columns")
        n_coeffs = 0
    else:
        if M % 3:
            raise PlyPropertyMismatchError("SH coefficient count must be a multiple of 3")
        n_coeffs = M // 3
    expected = _property_names(mode, M, n_coeffs)
    if names != expected:
        raise PlyPropertyMismatchError("property list does not match the declared layout")
    for name in names:
        if arr.dtype[name] != np.dtype("<f4"):
            raise PlyPropertyMismatchError(f"property {name} is not float32")

    def cols(prefix_names):
        return np.stack([arr[n].astype(np.float64) for n in prefix_names], axis=1) if prefix_names \
            else np.zeros((len(arr), 0))

    means = cols(["x", "y", "z"])
    if mode == "feature":
        features = cols([f"f_feat_{i}" for i in range(M)])
    else:
        n_rest = 3 * (n_coeffs - 1)
        features = _columns_to_sh(cols([f"f_dc_{i}" for i in range(3)]),
                                  cols([f"f_rest_{i}" for i in range(n_rest)]))
        if mode == "sh-double":
            second = _columns_to_sh(cols([f"f_dc_{i}_h2" for i in range(3)]),
                                    cols([f"f_rest_{i}_h2" for i in range(n_rest)]))
            features = np.concatenate([features, second], axis=2)
    return GaussianCloud(
        means=means,
        quats=cols([f"rot_{i}" for i in range(4)]),
        log_scales=cols([f"scale_{i}" for i in range(3)]),
        opacity_logits=arr["opacity"].astype(np.float64),
        features=features,
        mode=mode,
        extent=extent,
    )


def write_point_ply(points, colors, path):
    """Seed-point PLY: float xyz plus uchar rgb."""
    n = len(points)
    dtype = np.dtype([("x", "<f4"), ("y", "<f4"), ("z", "<f4"),
                      ("red", "u1"), ("green", "u1"), ("blue", "u1")])
    arr = np.zeros(n, dtype=dtype)
    for i, k in enumerate("xyz"):
        arr[k] = points[:, i]
    rgb = np.clip(np.floor(np.asarray(colors) * 255 + 0.5), 0, 255).astype(np.uint8)
    for i, k in enumerate(("red", "green", "blue")):
        arr[k] = rgb[:, i]
    header = ["ply", "format binary_little_endian 1.0", f"element vertex {n}",
              "property float x", "property float y", "property float z",
              "property uchar red", "property uchar green", "property uchar blue", "end_header"]
    with open(path, "wb") as f:
        f.write(("\n".join(header) + "\n").encode("ascii"))
        f.write(arr.tobytes())


def read_point_ply(path):
    """Return an (N, 6) array of xyz + rgb in [0, 1] (rgb 0.5 if absent)."""
    _, arr = read_ply_table(path)
    names = arr.dtype.names or ()
    if not all(k in names for k in "xyz"):
        raise PlyPropertyMismatchError("seed point file lacks x/y/z")
    xyz = np.stack([arr[k].astype(np.float64) for k in "xyz"], axis=1)
    if all(k in names for k in ("red", "green", "blue")):
        rgb = np.stack([arr[k].astype(np.float64) for k in ("red", "green", "blue")], axis=1) / 255.0
    else:
        rgb = np.full_like(xyz, 0.5)
    return np.concatenate([xyz, rgb], axis=1)


# --------------------------------------------------------------------------
# images


def load_image(path):
    path = Path(path)
    if not path.exists():
        raise ImageFormatError(f"image not found: {path}")
    with Image.open(path) as im:
        if im.mode != "RGB":
            raise ImageFormatError(f"{path}: expected an 8-bit RGB image, got mode {im.mode}")
        arr = np.asarray(im, dtype=np.uint8)
    return arr.astype(np.float64) / 255.0


def to_uint8(img):
    img = np.clip(np.asarray(img, dtype=np.float64), 0.0, 1.0)
    return np.floor(img * 255.0 + 0.5).astype(np.uint8)


def save_image(img, path):
    img = np.asarray(img)
    if img.ndim != 3 or img.shape[2] != 3:
        raise ImageFormatError(f"save_image expects (H, W, 3), got {img.shape}")
    Image.fromarray(to_uint8(img), mode="RGB").save(path, format="PNG")


# --------------------------------------------------------------------------
# manifests


def _check_rotation(c2w, where):
    R = c2w[:3, :3]
    if np.max(np.abs(R @ R.T - np.eye(3))) > 1e-6:
        raise ManifestError(f"{where}: rotation block is not orthonormal")


def read_manifest(path):
    """Parse a transforms manifest.

    Returns a dict with ``cameras``, ``images`` (original views), ``hidden``
    (per-view list of L hidden images, or None), ``hidden_image`` and
    ``designated_view`` for image hiding, and ``seed_points`` (or None).
    """
    path = Path(path)
    try:
        meta = json.loads(path.read_text())
    except FileNotFoundError as exc:
        raise ManifestError(f"manifest not found: {path}") from exc
    except json.JSONDecodeError as exc:
        raise ManifestError(f"manifest is not valid JSON: {exc}") from exc
    base = path.parent
    try:
        W = int(meta["w"])
        H = int(meta["h"])
        if "fl_x" in meta:
            fx = float(meta["fl_x"])
            fy = float(meta.get("fl_y", fx))
        else:
            fx = 0.5 * W / np.tan(0.5 * float(meta["camera_angle_x"]))
            fy = fx
        cx = float(meta.get("cx", (W - 1) / 2))
        cy = float(meta.get("cy", (H - 1) / 2))
        near = float(meta.get("near", DEFAULT_NEAR))
        far = float(meta.get("far", DEFAULT_FAR))
        frames = meta["frames"]
    except (KeyError, TypeError, ValueError) as exc:
        raise ManifestError(f"manifest is missing intrinsics or frames: {exc}") from exc
    if not frames:
        raise ManifestError("manifest has no frames")
    cameras, images, hidden = [], [], []
    n_hidden = None
    for i, fr in enumerate(frames):
        try:
            c2w = np.asarray(fr["transform_matrix"], dtype=np.float64)
        except (KeyError, TypeError, ValueError) as exc:
            raise ManifestError(f"frame {i}: bad transform_matrix") from exc
        if c2w.shape != (4, 4):
            raise ManifestError(f"frame {i}: transform_matrix must be 4x4")
        _check_rotation(c2w, f"frame {i}")
        R = c2w[:3, :3]
        # re-orthonormalise so the camera passes its stricter 1e-9 check
        U, _, Vt = np.linalg.svd(R)
        c2w[:3, :3] = U @ Vt
        cameras.append(Camera.from_camera_to_world(c2w, W, H, fx, fy, cx, cy, near=near, far=far))
        if "file_path" not in fr:
            raise ManifestError(f"frame {i}: missing file_path")
        images.append(_load_checked(base / fr["file_path"], H, W))
        hp = fr.get("hidden_paths", [fr["hidden_path"]] if "hidden_path" in fr else [])
        if n_hidden is None:
            n_hidden = len(hp)
        elif len(hp) != n_hidden:
            raise ManifestError(
                f"frame {i} lists {len(hp)} hidden images, earlier frames list {n_hidden}"
            )
        hidden.append([_load_checked(base / p, H, W) for p in hp])
    hidden_image = None
    designated = meta.get("designated_view")
    if "hidden_image" in meta:
        if designated is None or not 0 <= int(designated) < len(frames):
            raise ManifestError("hidden_image needs a valid designated_view index")
        hidden_image = _load_checked(base / meta["hidden_image"], H, W)
        designated = int(designated)
    seed_points = None
    if "seed_points" in meta:
        sp = base / meta["seed_points"]
        if not sp.exists():
            raise ManifestError(f"seed point file not found: {sp}")
        seed_points = read_point_ply(sp)
    return {
        "cameras": cameras,
        "images": images,
        "hidden": hidden if n_hidden else None,
        "hidden_image": hidden_image,
        "designated_view": designated,
        "seed_points": seed_points,
    }


def _load_checked(p, H, W):
    if not Path(p).exists():
        raise ManifestError(f"referenced file does not exist: {p}")
    img = load_image(p)
    if img.shape[:2] != (H, W):
        raise ManifestError(f"{p}: size {img.shape[:2]} does not match camera {(H, W)}")
    return img


def write_manifest(path, cameras, image_paths, hidden_paths=None, hidden_image=None,
                   designated_view=None, seed_points=None):
    cam0 = cameras[0]
    meta = {
        "w": cam0.width, "h": cam0.height, "fl_x": cam0.fx, "fl_y": cam0.fy,
        "cx": cam0.cx, "cy": cam0.cy, "near": cam0.near, "far": cam0.far,
        "convention": "camera-to-world; view +z forward, +x right, +y down",
        "frames": [],
    }
    for i, cam in enumerate(cameras):
        fr = {"file_path": str(image_paths[i]), "transform_matrix": cam.camera_to_world.tolist()}
        if hidden_paths is not None:
            fr["hidden_paths"] = [str(p) for p in hidden_paths[i]]
        meta["frames"].append(fr)
    if hidden_image is not None:
        meta["hidden_image"] = str(hidden_image)
        meta["designated_view"] = int(designated_view)
    if seed_points is not None:
        meta["seed_points"] = str(seed_points)
    Path(path).write_text(json.dumps(meta, indent=1))


# --------------------------------------------------------------------------
# checkpoints

MAGIC = b"SPSTCKPT"
VERSION = 1


def write_checkpoint(stack: ConvStack, path, config=None, seed=None):
    """Serialise a conv stack: magic, version, JSON header, float32 tensors."""
    header = {
        "topology": stack.topology,
        "output": stack.output,
        "config": config or {},
        "seed": seed,
    }
    hb = json.dumps(header, sort_keys=True).encode("utf-8")
    payload = b"".join(
        np.ascontiguousarray(a, dtype="<f4").tobytes()
        for w, b in zip(stack.weights, stack.biases)
        for a in (w, b)
    )
    with open(path, "wb") as f:
        f.write(MAGIC)
        f.write(struct.pack("<II", VERSION, len(hb)))
        f.write(hb)
        f.write(struct.pack("<Q", len(payload)))
        f.write(payload)


def read_checkpoint(path, with_header=False):
    data = Path(path).read_bytes()
    if len(data) < len(MAGIC) + 8 or data[: len(MAGIC)] != MAGIC:
        raise CheckpointCorruptError("not a checkpoint file (bad magic)")
    off = len(MAGIC)
    version, hlen = struct.unpack_from("<II", data, off)
    off += 8
    if version != VERSION:
        raise CheckpointVersionError(f"checkpoint version {version}, reader supports {VERSION}")
    if off + hlen + 8 > len(data):
        raise CheckpointCorruptError("truncated checkpoint header")
    try:
        header = json.loads(data[off:off + hlen].decode("utf-8"))
        topo = [int(c) for c in header["topology"]]
        output = header["output"]
    except (ValueError, KeyError, TypeError, UnicodeDecodeError) as exc:
        raise CheckpointCorruptError("unreadable checkpoint header") from exc
    off += hlen
    (plen,) = struct.unpack_from("<Q", data, off)
    off += 8
    expected = sum(9 * a * b + b for a, b in zip(topo[:-1], topo[1:])) * 4
    if plen != expected or len(data) - off != expected or len(topo) < 2:
        raise CheckpointCorruptError(
            f"payload is {len(data) - off} bytes, topology needs {expected}"
        )
    flat = np.frombuffer(data, dtype="<f4", offset=off).astype(np.float32)
    weights, biases = [], []
    pos = 0
    for a, b in zip(topo[:-1], topo[1:]):
        weights.append(flat[pos:pos + 9 * a * b].reshape(3, 3, a, b).copy())
        pos += 9 * a * b
        biases.append(flat[pos:pos + b].copy())
        pos += b
    try:
        stack = ConvStack(weights, biases, output)
    except ValueError as exc:
        raise CheckpointCorruptError(str(exc)) from exc
    return (stack, header) if with_header else stack
