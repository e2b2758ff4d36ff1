"""Triangle meshes, a deterministic software rasterizer, and the mesh-side file formats.

The rasterizer is a plain z-buffer with perspective-correct interpolation,
chosen over a GPU pipeline for determinism and testability. Meshes coming out
of surface reconstruction are not reliably oriented, so back faces are kept
and shading is double-sided.
"""

from __future__ import annotations

import enum
import struct
from dataclasses import dataclass, field

import numpy as np

from .geom import NEAR_PLANE, CameraIntrinsics, Pose


class MeshError(ValueError):
    """Raised for malformed mesh files; messages carry the byte offset of the defect."""


@dataclass(frozen=True)
class TriangleMesh:
    vertices: np.ndarray                    # (N, 3) float64, meters
    triangles: np.ndarray                   # (M, 3) int32 vertex indices
    vertex_colors: np.ndarray | None = None  # (N, 3) RGB in [0, 1]
    vertex_ao: np.ndarray | None = None      # (N,) in [0, 1]

    def __post_init__(self):
        v = np.ascontiguousarray(np.asarray(self.vertices, dtype=np.float64).reshape(-1, 3))
        t = np.ascontiguousarray(np.asarray(self.triangles, dtype=np.int64).reshape(-1, 3))
        if t.size and (t.min() < 0 or t.max() >= len(v)):
            raise MeshError(f"triangle index out of range (vertex count {len(v)})")
        object.__setattr__(self, "vertices", v)
        object.__setattr__(self, "triangles", t)
        for name in ("vertex_colors", "vertex_ao"):
            a = getattr(self, name)
            if a is not None:
                a = np.asarray(a, dtype=np.float64)
                expect = (len(v), 3) if name == "vertex_colors" else (len(v),)
                if a.shape != expect:
                    raise MeshError(f"{name} has shape {a.shape}, expected {expect}")
                object.__setattr__(self, name, a)

    @property
    def num_vertices(self) -> int:
        return len(self.vertices)

    @property
    def num_triangles(self) -> int:
        return len(self.triangles)


@dataclass(frozen=True)
class DepthMap:
    """Per-pixel camera-frame depth in meters; 0.0 marks pixels covered by no surface."""

    width: int
    height: int
    values: np.ndarray  # (height, width) float32, row-major

    INVALID = 0.0

    def __post_init__(self):
        v = np.ascontiguousarray(np.asarray(self.values, dtype=np.float32))
        if v.shape != (self.height, self.width):
            raise ValueError(f"depth grid shape {v.shape} does not match {self.height}x{self.width}")
        object.__setattr__(self, "values", v)


class RenderStyle(enum.Enum):
    DEPTH_ONLY = "depth"
    COLORED = "colored"
    TRICOLOR = "tricolor"
    AMBIENT_OCCLUSION = "ao"

    @staticmethod
    def parse(name: str) -> "RenderStyle":
        for style in RenderStyle:
            if style.value == name:
                return style
        raise ValueError(f"unknown render style {name!r}; choose from "
                         f"{[s.value for s in RenderStyle]}")


@dataclass(frozen=True)
class TricolorLights:
    """Three directional lights fixed to the camera frame for raw-geometry shading.

    One slightly blue light points along the camera's vertical axis; two
    slightly yellow lights lie in the camera's horizontal plane at +112 and
    -129 degrees from the positive optical axis. Exact tints and weights are
    free parameters; these defaults keep the blue/yellow split mild.
    """

    blue_tint: tuple[float, float, float] = (0.85, 0.85, 1.0)
    blue_weight: float = 1.0
    yellow_tint: tuple[float, float, float] = (1.0, 1.0, 0.85)
    yellow_weight: float = 0.7
    yellow_angles_deg: tuple[float, float] = (112.0, -129.0)

    def directions_and_colors(self) -> tuple[np.ndarray, np.ndarray]:
        dirs = [np.array([0.0, 1.0, 0.0])]
        cols = [self.blue_weight * np.asarray(self.blue_tint)]
        for ang in self.yellow_angles_deg:
            a = np.radians(ang)
            dirs.append(np.array([np.sin(a), 0.0, np.cos(a)]))
            cols.append(self.yellow_weight * np.asarray(self.yellow_tint))
        return np.stack(dirs), np.stack(cols)


DEFAULT_LIGHTS = TricolorLights()


# ---------------------------------------------------------------------------
# PLY parsing

_PLY_TYPES = {
    "char": "i1", "int8": "i1", "uchar": "u1", "uint8": "u1",
    "short": "i2", "int16": "i2", "ushort": "u2", "uint16": "u2",
    "int": "i4", "int32": "i4", "uint": "u4", "uint32": "u4",
    "float": "f4", "float32": "f4", "double": "f8", "float64": "f8",
}


def _parse_ply_header(data: bytes):
    if not data.startswith(b"ply"):
        raise MeshError("not a PLY file: missing 'ply' magic at byte 0")
    offset = 0
    fmt = None
    elements = []  # (name, count, [(kind, dtype(s), prop_name)])
    while True:
        end = data.find(b"\n", offset)
        if end < 0:
            raise MeshError(f"unterminated PLY header at byte {offset}")
        line = data[offset:end].strip().decode("ascii", errors="replace")
        line_offset = offset
        offset = end + 1
        tokens = line.split()
        if not tokens or tokens[0] == "comment" or tokens[0] == "obj_info" or tokens[0] == "ply":
            continue
        if tokens[0] == "format":
            if len(tokens) < 2 or tokens[1] not in ("ascii", "binary_little_endian"):
                raise MeshError(f"unsupported PLY format {line!r} at byte {line_offset}")
            fmt = tokens[1]
        elif tokens[0] == "element":
            if len(tokens) != 3:
                raise MeshError(f"malformed element line {line!r} at byte {line_offset}")
            try:
                count = int(tokens[2])
            except ValueError:
                raise MeshError(f"bad element count in {line!r} at byte {line_offset}") from None
            elements.append((tokens[1], count, []))
        elif tokens[0] == "property":
            if not elements:
                raise MeshError(f"property before any element at byte {line_offset}")
            props = elements[-1][2]
            if len(tokens) >= 2 and tokens[1] == "list":
                if len(tokens) != 5 or tokens[2] not in _PLY_TYPES or tokens[3] not in _PLY_TYPES:
                    raise MeshError(f"malformed list property {line!r} at byte {line_offset}")
                props.append(("list", (_PLY_TYPES[tokens[2]], _PLY_TYPES[tokens[3]]), tokens[4]))
            else:
                if len(tokens) != 3 or tokens[1] not in _PLY_TYPES:
                    raise MeshError(f"malformed property {line!r} at byte {line_offset}")
                props.append(("scalar", _PLY_TYPES[tokens[1]], tokens[2]))
        elif tokens[0] == "end_header":
            if fmt is None:
                raise MeshError(f"PLY header ended without a format line (byte {line_offset})")
            return fmt, elements, offset
        else:
            raise MeshError(f"unrecognized header line {line!r} at byte {line_offset}")


def _ascii_rows(data: bytes, start: int, count: int, what: str):
    """Yield (tokens, line_offset) for `count` non-empty lines starting at byte `start`."""
    offset = start
    produced = 0
    n = len(data)
    while produced < count:
        if offset >= n:
            raise MeshError(f"truncated PLY payload: expected {count} {what} rows, "
                            f"got {produced} (byte {offset})")
        end = data.find(b"\n", offset)
        if end < 0:
            end = n
        line = data[offset:end].strip()
        if line:
            yield line.split(), offset
            produced += 1
        offset = end + 1
    yield None, offset  # sentinel carrying the final offset


def _fan_triangulate(faces: list[tuple[np.ndarray, int]], n_vertices: int) -> np.ndarray:
    tris = []
    for idx, off in faces:
        if len(idx) < 3:
            raise MeshError(f"face with {len(idx)} vertices at byte {off}")
        if idx.min() < 0 or idx.max() >= n_vertices:
            raise MeshError(f"face vertex index {int(idx.max())} out of range "
                            f"(vertex count {n_vertices}) at byte {off}")
        for k in range(1, len(idx) - 1):
            tris.append((idx[0], idx[k], idx[k + 1]))
    return np.asarray(tris, dtype=np.int64).reshape(-1, 3)


def load_mesh(path) -> TriangleMesh:
    """Load an ASCII or binary little-endian PLY mesh.

    Reads x/y/z positions, optional red/green/blue vertex colors (uchar scaled
    to [0, 1], float kept as-is) and an optional per-vertex 'ao' or 'quality'
    float treated as an ambient-occlusion value. Quad and larger faces are
    fan-triangulated. Malformed input raises MeshError with a byte offset.
    """
    data = open(path, "rb").read()
    fmt, elements, offset = _parse_ply_header(data)

    vertex_data: dict[str, np.ndarray] = {}
    faces: list[tuple[np.ndarray, int]] = []
    n_vertices = 0

    for name, count, props in elements:
        if fmt == "ascii":
            offset = _read_ascii_element(data, offset, name, count, props, vertex_data, faces)
        else:
            offset = _read_binary_element(data, offset, name, count, props, vertex_data, faces)
        if name == "vertex":
            n_vertices = count

    for coord in ("x", "y", "z"):
        if coord not in vertex_data:
            raise MeshError(f"PLY vertex element lacks '{coord}' property")
    vertices = np.stack([vertex_data["x"], vertex_data["y"], vertex_data["z"]], axis=1)

    colors = None
    if all(c in vertex_data for c in ("red", "green", "blue")):
        colors = np.stack([vertex_data["red"], vertex_data["green"], vertex_data["blue"]], axis=1)
        if vertex_data.get("_color_is_uchar", False):
            colors = colors / 255.0
    ao = None
    for key in ("ao", "quality"):
        if key in vertex_data:
            ao = vertex_data[key]
            break

    triangles = _fan_triangulate(faces, n_vertices)
    return TriangleMesh(vertices, triangles, vertex_colors=colors, vertex_ao=ao)


def _read_ascii_element(data, offset, name, count, props, vertex_data, faces):
    has_list = any(kind == "list" for kind, _, _ in props)
    if name == "vertex" and not has_list:
        scalars = [p[2] for p in props]
        rows = np.empty((count, len(scalars)))
        gen = _ascii_rows(data, offset, count, name)
        i = 0
        for tokens, off in gen:
            if tokens is None:
                offset = off
                break
            if len(tokens) < len(scalars):
                raise MeshError(f"vertex row has {len(tokens)} values, expected "
                                f"{len(scalars)} at byte {off}")
            try:
                rows[i] = [float(t) for t in tokens[: len(scalars)]]
            except ValueError:
                raise MeshError(f"non-numeric vertex value at byte {off}") from None
            i += 1
        for j, pname in enumerate(scalars):
            vertex_data[pname] = rows[:, j]
        if any(p[0] == "scalar" and p[1] == "u1" and p[2] == "red" for p in props):
            vertex_data["_color_is_uchar"] = True
        return offset
    # generic row walk (faces and anything else)
    gen = _ascii_rows(data, offset, count, name)
    for tokens, off in gen:
        if tokens is None:
            return off
        pos = 0
        for kind, _, pname in props:
            if kind == "scalar":
                if pos >= len(tokens):
                    raise MeshError(f"truncated {name} row at byte {off}")
                pos += 1
            else:
                if pos >= len(tokens):
                    raise MeshError(f"truncated {name} row at byte {off}")
                try:
                    k = int(tokens[pos])
                    items = np.array([int(t) for t in tokens[pos + 1: pos + 1 + k]], dtype=np.int64)
                except ValueError:
                    raise MeshError(f"non-integer face index at byte {off}") from None
                if len(items) != k:
                    raise MeshError(f"face lists {k} indices but row has "
                                    f"{len(items)} at byte {off}")
                pos += 1 + k
                if name == "face" and pname in ("vertex_indices", "vertex_index"):
                    faces.append((items, off))
    return offset


def _read_binary_element(data, offset, name, count, props, vertex_data, faces):
    has_list = any(kind == "list" for kind, _, _ in props)
    if not has_list:
        dtype = np.dtype([(p[2], "<" + p[1]) for p in props])
        end = offset + dtype.itemsize * count
        if end > len(data):
            raise MeshError(f"truncated PLY payload: element '{name}' needs "
                            f"{dtype.itemsize * count} bytes at byte {offset}, "
                            f"file has {len(data) - offset}")
        if name == "vertex":
            arr = np.frombuffer(data, dtype=dtype, count=count, offset=offset)
            for kind, dt, pname in props:
                vertex_data[pname] = arr[pname].astype(np.float64)
                if pname == "red" and dt == "u1":
                    vertex_data["_color_is_uchar"] = True
        return end
    if len(props) == 1 and props[0][0] == "list":
        # uniform-count fast path, falling back to a per-face walk on mixed sizes
        cnt_dt = np.dtype("<" + props[0][1][0])
        idx_dt = np.dtype("<" + props[0][1][1])
        if count == 0:
            return offset
        if offset + cnt_dt.itemsize > len(data):
            raise MeshError(f"truncated PLY payload in element '{name}' at byte {offset}")
        first = int(np.frombuffer(data, dtype=cnt_dt, count=1, offset=offset)[0])
        stride = cnt_dt.itemsize + first * idx_dt.itemsize
        uniform_end = offset + stride * count
        if first >= 3 and uniform_end <= len(data):
            rec = np.dtype([("n", cnt_dt), ("idx", idx_dt, (first,))])
            arr = np.frombuffer(data, dtype=rec, count=count, offset=offset)
            if np.all(arr["n"] == first):
                if name == "face":
                    idx = arr["idx"].astype(np.int64)
                    for i in range(count):
                        faces.append((idx[i], offset + i * stride))
                return uniform_end
        return _walk_binary_lists(data, offset, name, count, cnt_dt, idx_dt, faces)
    # mixed scalar/list properties: per-instance walk
    pos = offset
    for _ in range(count):
        for kind, dt, pname in props:
            if kind == "scalar":
                pos += np.dtype(dt).itemsize
            else:
                cnt_dt = np.dtype("<" + dt[0])
                idx_dt = np.dtype("<" + dt[1])
                if pos + cnt_dt.itemsize > len(data):
                    raise MeshError(f"truncated PLY payload in element '{name}' at byte {pos}")
                k = int(np.frombuffer(data, dtype=cnt_dt, count=1, offset=pos)[0])
                row_off = pos
                pos += cnt_dt.itemsize
                if pos + k * idx_dt.itemsize > len(data):
                    raise MeshError(f"truncated PLY payload in element '{name}' at byte {pos}")
                items = np.frombuffer(data, dtype=idx_dt, count=k, offset=pos).astype(np.int64)
                pos += k * idx_dt.itemsize
                if name == "face" and pname in ("vertex_indices", "vertex_index"):
                    faces.append((items, row_off))
        if pos > len(data):
            raise MeshError(f"truncated PLY payload in element '{name}' at byte {pos}")
    return pos


def _walk_binary_lists(data, offset, name, count, cnt_dt, idx_dt, faces):
    pos = offset
    for _ in range(count):
        if pos + cnt_dt.itemsize > len(data):
            raise MeshError(f"truncated PLY payload in element '{name}' at byte {pos}")
        k = int(np.frombuffer(data, dtype=cnt_dt, count=1, offset=pos)[0])
        row_off = pos
        pos += cnt_dt.itemsize
        if pos + k * idx_dt.itemsize > len(data):
            raise MeshError(f"truncated PLY payload in element '{name}' at byte {pos}")
        items = np.frombuffer(data, dtype=idx_dt, count=k, offset=pos).astype(np.int64)
        pos += k * idx_dt.itemsize
        if name == "face":
            faces.append((items, row_off))
    return pos


def save_mesh(mesh: TriangleMesh, path) -> None:
    """Write a binary little-endian PLY with double positions and any optional attributes."""
    with open(path, "wb") as f:
        lines = ["ply", "format binary_little_endian 1.0",
                 f"element vertex {mesh.num_vertices}",
                 "property double x", "property double y", "property double z"]
        if mesh.vertex_colors is not None:
            lines += ["property uchar red", "property uchar green", "property uchar blue"]
        if mesh.vertex_ao is not None:
            lines += ["property float ao"]
        lines += [f"element face {mesh.num_triangles}",
                  "property list uchar int vertex_indices", "end_header"]
        f.write(("\n".join(lines) + "\n").encode("ascii"))
        fields = [("x", "<f8"), ("y", "<f8"), ("z", "<f8")]
        if mesh.vertex_colors is not None:
            fields += [("red", "u1"), ("green", "u1"), ("blue", "u1")]
        if mesh.vertex_ao is not None:
            fields += [("ao", "<f4")]
        rec = np.zeros(mesh.num_vertices, dtype=np.dtype(fields))
        rec["x"], rec["y"], rec["z"] = mesh.vertices.T
        if mesh.vertex_colors is not None:
            rgb = np.clip(np.round(mesh.vertex_colors * 255.0), 0, 255).astype(np.uint8)
            rec["red"], rec["green"], rec["blue"] = rgb.T
        if mesh.vertex_ao is not None:
            rec["ao"] = mesh.vertex_ao.astype(np.float32)
        f.write(rec.tobytes())
        frec = np.zeros(mesh.num_triangles, dtype=np.dtype([("n", "u1"), ("idx", "<i4", (3,))]))
        frec["n"] = 3
        frec["idx"] = mesh.triangles.astype(np.int32)
        f.write(frec.tobytes())


# ---------------------------------------------------------------------------
# Rasterization

def _clip_near(tri_cam: np.ndarray, attrs: np.ndarray | None, near: float):
    """Clip one camera-space triangle against z >= near.

    Returns (vertices (k, 3), attrs (k, C) or None) with k in {0, 3, 4}.
    New vertices get linearly interpolated attributes.
    """
    inside = tri_cam[:, 2] > near
    if inside.all():
        return tri_cam, attrs
    if not inside.any():
        return tri_cam[:0], None if attrs is None else attrs[:0]
    verts, outs = [], []
    for i in range(3):
        j = (i + 1) % 3
        a, b = tri_cam[i], tri_cam[j]
        if inside[i]:
            verts.append(a)
            outs.append(None if attrs is None else attrs[i])
        if inside[i] != inside[j]:
            t = (near - a[2]) / (b[2] - a[2])
            verts.append(a + t * (b - a))
            outs.append(None if attrs is None else attrs[i] + t * (attrs[j] - attrs[i]))
    v = np.asarray(verts)
    return v, None if attrs is None else np.asarray(outs)


def _rasterize(mesh: TriangleMesh, pose: Pose, cam: CameraIntrinsics,
               vertex_attrs: np.ndarray | None = None,
               face_attrs_fn=None) -> tuple[np.ndarray, np.ndarray | None]:
    """Core z-buffer loop shared by depth and image rendering.

    vertex_attrs: (N, C) per-vertex channels, perspective-correct interpolated.
    face_attrs_fn: callable(face camera-space vertices (3, 3)) -> (C,) flat value.
    Exactly one attribute source may be given; with neither, only depth is
    produced. Returns (depth (H, W) float64 with 0.0 invalid, attr image or None).
    """
    h, w = cam.height, cam.width
    depth = np.zeros((h, w))
    channels = None
    img = None
    if vertex_attrs is not None:
        channels = vertex_attrs.shape[1]
    elif face_attrs_fn is not None:
        channels = 3
    if channels is not None:
        img = np.zeros((h, w, channels))

    cam_pts = pose.transform(mesh.vertices)
    fx, fy, cx, cy = cam.fx, cam.fy, cam.cx, cam.cy

    for tri in mesh.triangles:
        tri_cam = cam_pts[tri]
        if tri_cam[:, 2].max() <= NEAR_PLANE:
            continue
        attrs = None
        if vertex_attrs is not None:
            attrs = vertex_attrs[tri]
        elif face_attrs_fn is not None:
            flat = face_attrs_fn(tri_cam)
            attrs = np.broadcast_to(flat, (3, len(flat)))
        poly, pattrs = _clip_near(tri_cam, attrs, NEAR_PLANE)
        if len(poly) < 3:
            continue
        for k in range(1, len(poly) - 1):
            pts = poly[[0, k, k + 1]]
            pa = None if pattrs is None else pattrs[[0, k, k + 1]]
            _raster_triangle(depth, img, pts, pa, fx, fy, cx, cy, w, h)
    return depth, img


def _raster_triangle(depth, img, pts, attrs, fx, fy, cx, cy, w, h):
    z = pts[:, 2]
    u = fx * pts[:, 0] / z + cx
    v = fy * pts[:, 1] / z + cy
    area = (u[1] - u[0]) * (v[2] - v[0]) - (v[1] - v[0]) * (u[2] - u[0])
    if area == 0.0 or not np.isfinite(area):
        return
    x0 = max(int(np.ceil(u.min() - 0.5)), 0)
    x1 = min(int(np.floor(u.max() - 0.5)), w - 1)
    y0 = max(int(np.ceil(v.min() - 0.5)), 0)
    y1 = min(int(np.floor(v.max() - 0.5)), h - 1)
    if x1 < x0 or y1 < y0:
        return
    xs = np.arange(x0, x1 + 1) + 0.5
    ys = (np.arange(y0, y1 + 1) + 0.5)[:, None]
    w0 = (u[2] - u[1]) * (ys - v[1]) - (v[2] - v[1]) * (xs - u[1])
    w1 = (u[0] - u[2]) * (ys - v[2]) - (v[0] - v[2]) * (xs - u[2])
    w2 = (u[1] - u[0]) * (ys - v[0]) - (v[1] - v[0]) * (xs - u[0])
    if area > 0:
        inside = (w0 >= 0) & (w1 >= 0) & (w2 >= 0)
    else:
        inside = (w0 <= 0) & (w1 <= 0) & (w2 <= 0)
    if not inside.any():
        return
    l0, l1, l2 = w0 / area, w1 / area, w2 / area
    inv_z = l0 / z[0] + l1 / z[1] + l2 / z[2]
    with np.errstate(divide="ignore", invalid="ignore"):
        zp = 1.0 / inv_z
    window = depth[y0:y1 + 1, x0:x1 + 1]
    update = inside & (zp > NEAR_PLANE) & ((window <= 0.0) | (zp < window))
    if not update.any():
        return
    window[update] = zp[update]
    if img is not None:
        # perspective-correct: interpolate attr/z, then multiply back by z
        num = (l0[..., None] * attrs[0] / z[0]
               + l1[..., None] * attrs[1] / z[1]
               + l2[..., None] * attrs[2] / z[2])
        vals = num * zp[..., None]
        img[y0:y1 + 1, x0:x1 + 1][update] = vals[update]


def render_depth(mesh: TriangleMesh, pose: Pose, cam: CameraIntrinsics) -> DepthMap:
    """Rasterize the mesh into a depth map; uncovered pixels carry the invalid marker."""
    depth, _ = _rasterize(mesh, pose, cam)
    return DepthMap(cam.width, cam.height, depth.astype(np.float32))


def render_image(mesh: TriangleMesh, pose: Pose, cam: CameraIntrinsics,
                 style: RenderStyle, lights: TricolorLights = DEFAULT_LIGHTS) -> np.ndarray:
    """Render an (H, W, 3) float RGB image in [0, 1]; background pixels are black."""
    if style == RenderStyle.DEPTH_ONLY:
        raise ValueError("DEPTH_ONLY produces no image; use render_depth")
    if style == RenderStyle.COLORED:
        if mesh.vertex_colors is None:
            raise ValueError("colored rendering needs vertex_colors on the mesh")
        _, img = _rasterize(mesh, pose, cam, vertex_attrs=mesh.vertex_colors)
    elif style == RenderStyle.AMBIENT_OCCLUSION:
        if mesh.vertex_ao is None:
            raise ValueError("ambient-occlusion rendering needs vertex_ao on the mesh")
        _, gray = _rasterize(mesh, pose, cam, vertex_attrs=mesh.vertex_ao[:, None])
        img = np.repeat(gray, 3, axis=2)
    elif style == RenderStyle.TRICOLOR:
        dirs, cols = lights.directions_and_colors()

        def shade(tri_cam: np.ndarray) -> np.ndarray:
            n = np.cross(tri_cam[1] - tri_cam[0], tri_cam[2] - tri_cam[0])
            norm = np.linalg.norm(n)
            if norm == 0.0:
                return np.zeros(3)
            n = n / norm
            # double-sided: surface orientation from reconstruction is unreliable
            return np.clip(np.abs(dirs @ n) @ cols, 0.0, 1.0)

        _, img = _rasterize(mesh, pose, cam, face_attrs_fn=shade)
    else:
        raise ValueError(f"unhandled style {style}")
    return np.clip(img, 0.0, 1.0)


def lookup_depth(dm: DepthMap, p: np.ndarray) -> float | None:
    """Depth of the pixel containing p, or None outside the image or on an invalid pixel."""
    ix = int(np.floor(p[0]))
    iy = int(np.floor(p[1]))
    if ix < 0 or iy < 0 or ix >= dm.width or iy >= dm.height:
        return None
    d = float(dm.values[iy, ix])
    if d <= DepthMap.INVALID:
        return None
    return d


def lookup_depth_many(dm: DepthMap, pts: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Vectorized lookup_depth: returns ((N,) float32 depths, (N,) validity)."""
    pts = np.atleast_2d(pts)
    ix = np.floor(pts[:, 0]).astype(np.int64)
    iy = np.floor(pts[:, 1]).astype(np.int64)
    inb = (ix >= 0) & (iy >= 0) & (ix < dm.width) & (iy < dm.height)
    depths = np.zeros(len(pts), dtype=np.float32)
    depths[inb] = dm.values[iy[inb], ix[inb]]
    return depths, inb & (depths > DepthMap.INVALID)


# ---------------------------------------------------------------------------
# Depth-map and image files

_DMAP_MAGIC = b"DMAP"


def save_dmap(dm: DepthMap, path) -> None:
    """16-byte header (magic, u32 width, u32 height, f32 scale) + row-major f32 LE values."""
    with open(path, "wb") as f:
        f.write(_DMAP_MAGIC)
        f.write(struct.pack("<IIf", dm.width, dm.height, 1.0))
        f.write(dm.values.astype("<f4").tobytes())


def load_dmap(path) -> DepthMap:
    data = open(path, "rb").read()
    if len(data) < 16 or data[:4] != _DMAP_MAGIC:
        raise ValueError(f"{path}: not a DMAP file")
    width, height, scale = struct.unpack("<IIf", data[4:16])
    expect = 16 + 4 * width * height
    if len(data) < expect:
        raise ValueError(f"{path}: truncated DMAP payload ({len(data)} < {expect} bytes)")
    values = np.frombuffer(data, dtype="<f4", count=width * height, offset=16)
    return DepthMap(width, height, values.reshape(height, width) * np.float32(scale))


def save_ppm(image: np.ndarray, path) -> None:
    """Write a float RGB image in [0, 1] as binary PPM (P6)."""
    img8 = np.clip(np.round(image * 255.0), 0, 255).astype(np.uint8)
    h, w, _ = img8.shape
    with open(path, "wb") as f:
        f.write(f"P6\n{w} {h}\n255\n".encode("ascii"))
        f.write(img8.tobytes())


def load_ppm(path) -> np.ndarray:
    """Read a binary PPM (P6) into a float RGB array in [0, 1]."""
    data = open(path, "rb").read()
    if not data.startswith(b"P6"):
        raise ValueError(f"{path}: not a P6 PPM")
    fields, offset = [], 2
    while len(fields) < 3:
        while offset < len(data) and data[offset:offset + 1].isspace():
            offset += 1
        if data[offset:offset + 1] == b"#":
            offset = data.find(b"\n", offset) + 1
            continue
        end = offset
        while end < len(data) and not data[end:end + 1].isspace():
            end += 1
        fields.append(int(data[offset:end]))
        offset = end
    offset += 1  # single whitespace after maxval
    w, h, maxval = fields
    img = np.frombuffer(data, dtype=np.uint8, count=w * h * 3, offset=offset)
    return img.reshape(h, w, 3).astype(np.float64) / maxval
