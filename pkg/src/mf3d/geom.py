"""Core 3D types, rigid transforms, and PLY input/output.

Everything downstream segments a flat point set; meshes and Gaussian-splat
checkpoints reduce to one via `mesh_vertices_as_points` / `load_model`.
PLY is the sole model format: ASCII or binary little-endian, vertex
properties x,y,z (float32) with optional colors, normals and SH DC terms.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import FormatError, PlyParseError, UsageError

log = logging.getLogger(__name__)

# Standard 3DGS DC-term scale: RGB = 0.5 + SH_C0 * f_dc.
SH_C0 = 0.28209479177387814

OTHER_GRAY = (128, 128, 128)


def _as_f64(a, name, shape1):
    arr = np.asarray(a, dtype=np.float64)
    if arr.ndim != 2 or arr.shape[1] != shape1:
        raise ValueError(f"{name} must have shape (N, {shape1}), got {arr.shape}")
    return arr


@dataclass(frozen=True)
class PointSet:
    """P point positions in model units (meters), optional colors/normals."""

    positions: np.ndarray
    colors: np.ndarray | None = None
    normals: np.ndarray | None = None

    def __post_init__(self):
        pos = _as_f64(self.positions, "positions", 3)
        if pos.shape[0] < 1:
            raise ValueError("point set needs at least one point")
        if not np.isfinite(pos).all():
            raise ValueError("positions must be finite")
        object.__setattr__(self, "positions", pos)
        if self.colors is not None:
            col = _as_f64(self.colors, "colors", 3)
            if col.shape[0] != pos.shape[0]:
                raise ValueError("colors length must equal point count")
            if col.min() < 0.0 or col.max() > 1.0:
                raise ValueError("colors must lie in [0, 1]")
            object.__setattr__(self, "colors", col)
        if self.normals is not None:
            nrm = _as_f64(self.normals, "normals", 3)
            if nrm.shape[0] != pos.shape[0]:
                raise ValueError("normals length must equal point count")
            if np.abs(np.linalg.norm(nrm, axis=1) - 1.0).max() > 1e-4:
                raise ValueError("normals must have unit norm (tol 1e-4)")
            object.__setattr__(self, "normals", nrm)

    def __len__(self):
        return self.positions.shape[0]


@dataclass(frozen=True)
class TriMesh:
    """Triangle mesh; faces index into `vertices`."""

    vertices: np.ndarray
    faces: np.ndarray
    vertex_colors: np.ndarray | None = None

    def __post_init__(self):
        verts = _as_f64(self.vertices, "vertices", 3)
        faces = np.asarray(self.faces, dtype=np.int64)
        if faces.ndim != 2 or faces.shape[1] != 3:
            raise ValueError(f"faces must have shape (F, 3), got {faces.shape}")
        if faces.size and (faces.min() < 0 or faces.max() >= verts.shape[0]):
            raise ValueError("face index out of range")
        degen = (
            (faces[:, 0] == faces[:, 1])
            | (faces[:, 1] == faces[:, 2])
            | (faces[:, 0] == faces[:, 2])
        )
        if degen.any():
            raise ValueError(f"{int(degen.sum())} degenerate faces (repeated indices)")
        object.__setattr__(self, "vertices", verts)
        object.__setattr__(self, "faces", faces)
        if self.vertex_colors is not None:
            col = _as_f64(self.vertex_colors, "vertex_colors", 3)
            if col.shape[0] != verts.shape[0]:
                raise ValueError("vertex_colors length must equal vertex count")
            object.__setattr__(self, "vertex_colors", col)


@dataclass(frozen=True)
class RigidTransform:
    """Rotation + translation; rotation orthonormal with det +1 (tol 1e-6)."""

    rotation: np.ndarray
    translation: np.ndarray

    def __post_init__(self):
        rot = np.asarray(self.rotation, dtype=np.float64)
        trans = np.asarray(self.translation, dtype=np.float64).reshape(3)
        if rot.shape != (3, 3):
            raise ValueError(f"rotation must be 3x3, got {rot.shape}")
        err = np.abs(rot @ rot.T - np.eye(3)).max()
        if err > 1e-6:
            raise ValueError(f"rotation not orthonormal (max deviation {err:.2e})")
        if np.linalg.det(rot) < 0:
            raise ValueError("rotation has negative determinant (reflection)")
        object.__setattr__(self, "rotation", rot)
        object.__setattr__(self, "translation", trans)

    @classmethod
    def identity(cls):
        return cls(np.eye(3), np.zeros(3))

    def apply(self, points):
        """Apply to an (N,3) array or a single 3-vector."""
        pts = np.asarray(points, dtype=np.float64)
        return pts @ self.rotation.T + self.translation

    def inverse(self):
        rt = self.rotation.T
        return RigidTransform(rt, -rt @ self.translation)

    def compose(self, other):
        """self after other: (self.compose(other)).apply(p) == self.apply(other.apply(p))."""
        return RigidTransform(
            self.rotation @ other.rotation,
            self.rotation @ other.translation + self.translation,
        )


def compose(b: RigidTransform, a: RigidTransform) -> RigidTransform:
    """Transform equivalent to applying a first, then b."""
    return b.compose(a)


def apply_transform(points: PointSet, xf: RigidTransform) -> PointSet:
    """Map every position p to R.p + t; normals are rotated only."""
    normals = None
    if points.normals is not None:
        normals = points.normals @ xf.rotation.T
    return PointSet(xf.apply(points.positions), colors=points.colors, normals=normals)


def mesh_vertices_as_points(mesh: TriMesh) -> PointSet:
    """The mesh's vertex set, colors carried over."""
    return PointSet(mesh.vertices.copy(), colors=mesh.vertex_colors)


def color_float_to_u8(colors: np.ndarray) -> np.ndarray:
    """[0,1] floats to bytes, round half up."""
    return np.clip(np.floor(np.asarray(colors) * 255.0 + 0.5), 0, 255).astype(np.uint8)


def color_u8_to_float(colors: np.ndarray) -> np.ndarray:
    return np.asarray(colors, dtype=np.float64) / 255.0


# ---------------------------------------------------------------------------
# PLY parsing

_PLY_TYPES = {
    "char": "i1", "int8": "i1",
    "uchar": "u1", "uint8": "u1",
    "short": "i2", "int16": "i2",
    "ushort": "u2", "uint16": "u2",
    "int": "i4", "int32": "i4",
    "uint": "u4", "uint32": "u4",
    "float": "f4", "float32": "f4",
    "double": "f8", "float64": "f8",
}


@dataclass
class _PlyProperty:
    name: str
    dtype: str            # numpy dtype code, little-endian applied on read
    list_count_dtype: str | None = None  # set for list properties


@dataclass
class _PlyElement:
    name: str
    count: int
    properties: list[_PlyProperty] = field(default_factory=list)


def _parse_ply_header(fh):
    """Returns (format, elements, data_start_offset). Raises PlyParseError."""
    line_no = 1
    magic = fh.readline()
    if magic.strip() != b"ply":
        raise PlyParseError("not a PLY file (missing 'ply' magic)", line_no)
    fmt = None
    elements: list[_PlyElement] = []
    while True:
        line_no += 1
        raw = fh.readline()
        if not raw:
            raise PlyParseError("unexpected end of header", line_no)
        tokens = raw.decode("ascii", errors="replace").split()
        if not tokens or tokens[0] == "comment" or tokens[0] == "obj_info":
            continue
        if tokens[0] == "format":
            if len(tokens) != 3:
                raise PlyParseError("malformed format line", line_no)
            if tokens[1] == "ascii":
                fmt = "ascii"
            elif tokens[1] == "binary_little_endian":
                fmt = "binary"
            else:
                raise FormatError(f"unsupported PLY format '{tokens[1]}'")
        elif tokens[0] == "element":
            if len(tokens) != 3:
                raise PlyParseError("malformed element line", line_no)
            try:
                count = int(tokens[2])
            except ValueError:
                raise PlyParseError(f"bad element count '{tokens[2]}'", line_no)
            elements.append(_PlyElement(tokens[1], count))
        elif tokens[0] == "property":
            if not elements:
                raise PlyParseError("property before any element", line_no)
            if len(tokens) >= 2 and tokens[1] == "list":
                if len(tokens) != 5:
                    raise PlyParseError("malformed list property", line_no)
                cnt_t, item_t, name = tokens[2], tokens[3], tokens[4]
                if cnt_t not in _PLY_TYPES or item_t not in _PLY_TYPES:
                    raise FormatError(f"unsupported PLY property type in '{raw.decode().strip()}'")
                elements[-1].properties.append(
                    _PlyProperty(name, _PLY_TYPES[item_t], _PLY_TYPES[cnt_t])
                )
            else:
                if len(tokens) != 3:
                    raise PlyParseError("malformed property line", line_no)
                if tokens[1] not in _PLY_TYPES:
                    raise FormatError(f"unsupported PLY property type '{tokens[1]}'")
                elements[-1].properties.append(_PlyProperty(tokens[2], _PLY_TYPES[tokens[1]]))
        elif tokens[0] == "end_header":
            break
        else:
            raise PlyParseError(f"unknown header keyword '{tokens[0]}'", line_no)
    if fmt is None:
        raise PlyParseError("header missing format line", line_no)
    return fmt, elements


def _read_element_ascii(lines, start, elem):
    """Reads elem.count rows; returns (columns dict, list columns dict, next line index)."""
    scalars = {p.name: [] for p in elem.properties if p.list_count_dtype is None}
    lists = {p.name: [] for p in elem.properties if p.list_count_dtype is not None}
    idx = start
    for _ in range(elem.count):
        if idx >= len(lines):
            raise PlyParseError(f"element '{elem.name}' truncated", idx + 1)
        tokens = lines[idx].split()
        pos = 0
        for p in elem.properties:
            try:
                if p.list_count_dtype is None:
                    scalars[p.name].append(tokens[pos])
                    pos += 1
                else:
                    n = int(tokens[pos])
                    lists[p.name].append(tokens[pos + 1 : pos + 1 + n])
                    pos += 1 + n
            except (IndexError, ValueError):
                raise PlyParseError(f"bad row for element '{elem.name}'", idx + 1)
        idx += 1
    cols = {}
    for p in elem.properties:
        if p.list_count_dtype is None:
            try:
                cols[p.name] = np.asarray(scalars[p.name], dtype="<" + p.dtype)
            except ValueError:
                raise PlyParseError(f"non-numeric value in property '{p.name}'")
    return cols, lists, idx


def _read_element_binary(buf, offset, elem):
    """Returns (columns dict, list columns dict, new offset)."""
    has_list = any(p.list_count_dtype is not None for p in elem.properties)
    if not has_list:
        dtype = np.dtype([(p.name, "<" + p.dtype) for p in elem.properties])
        end = offset + dtype.itemsize * elem.count
        if end > len(buf):
            raise FormatError(f"element '{elem.name}' truncated: need {end - offset} bytes")
        rows = np.frombuffer(buf, dtype=dtype, count=elem.count, offset=offset)
        return {p.name: rows[p.name] for p in elem.properties}, {}, end

    # Fast path: a single list property with a uniform count (the usual face layout).
    if len(elem.properties) == 1 and elem.count > 0:
        p = elem.properties[0]
        cnt_dt = np.dtype("<" + p.list_count_dtype)
        item_dt = np.dtype("<" + p.dtype)
        n0 = int(np.frombuffer(buf, dtype=cnt_dt, count=1, offset=offset)[0])
        stride = cnt_dt.itemsize + n0 * item_dt.itemsize
        end = offset + stride * elem.count
        if end <= len(buf):
            raw = np.frombuffer(buf, dtype=np.uint8, count=stride * elem.count, offset=offset)
            raw = raw.reshape(elem.count, stride)
            counts = raw[:, : cnt_dt.itemsize].copy().view(cnt_dt).reshape(-1)
            if (counts == n0).all():
                items = raw[:, cnt_dt.itemsize :].copy().view(item_dt)
                return {}, {p.name: list(items.reshape(elem.count, n0))}, end

    # General row-by-row walk.
    cols = {p.name: [] for p in elem.properties if p.list_count_dtype is None}
    lists = {p.name: [] for p in elem.properties if p.list_count_dtype is not None}
    for _ in range(elem.count):
        for p in elem.properties:
            if p.list_count_dtype is None:
                dt = np.dtype("<" + p.dtype)
                if offset + dt.itemsize > len(buf):
                    raise FormatError(f"element '{elem.name}' truncated")
                cols[p.name].append(np.frombuffer(buf, dt, 1, offset)[0])
                offset += dt.itemsize
            else:
                cnt_dt = np.dtype("<" + p.list_count_dtype)
                item_dt = np.dtype("<" + p.dtype)
                if offset + cnt_dt.itemsize > len(buf):
                    raise FormatError(f"element '{elem.name}' truncated")
                n = int(np.frombuffer(buf, cnt_dt, 1, offset)[0])
                offset += cnt_dt.itemsize
                if offset + n * item_dt.itemsize > len(buf):
                    raise FormatError(f"element '{elem.name}' truncated")
                lists[p.name].append(np.frombuffer(buf, item_dt, n, offset))
                offset += n * item_dt.itemsize
    cols = {k: np.asarray(v) for k, v in cols.items()}
    return cols, lists, offset


def _read_ply(path):
    """Returns (vertex columns, face index lists)."""
    with open(path, "rb") as fh:
        fmt, elements = _parse_ply_header(fh)
        body = fh.read()

    vertex_cols = {}
    face_lists = []
    if fmt == "ascii":
        lines = body.decode("ascii", errors="replace").splitlines()
        idx = 0
        for elem in elements:
            cols, lists, idx = _read_element_ascii(lines, idx, elem)
            if elem.name == "vertex":
                vertex_cols = cols
            elif elem.name == "face":
                face_lists = _pick_face_lists(lists)
    else:
        offset = 0
        for elem in elements:
            cols, lists, offset = _read_element_binary(body, offset, elem)
            if elem.name == "vertex":
                vertex_cols = cols
            elif elem.name == "face":
                face_lists = _pick_face_lists(lists)
    return vertex_cols, face_lists


def _pick_face_lists(lists):
    for name in ("vertex_indices", "vertex_index"):
        if name in lists:
            return lists[name]
    if lists:
        return next(iter(lists.values()))
    return []


def _faces_from_lists(face_lists):
    """Fan-triangulates polygons; drops degenerate faces with a logged count."""
    tris = []
    dropped = 0
    for poly in face_lists:
        idx = np.asarray(poly, dtype=np.int64)
        if idx.size < 3:
            dropped += 1
            continue
        for k in range(1, idx.size - 1):
            a, b, c = int(idx[0]), int(idx[k]), int(idx[k + 1])
            if a == b or b == c or a == c:
                dropped += 1
                continue
            tris.append((a, b, c))
    if dropped:
        log.warning("dropped %d degenerate faces at load", dropped)
    if not tris:
        return np.zeros((0, 3), dtype=np.int64)
    return np.asarray(tris, dtype=np.int64)


def _vertex_positions(cols):
    for name in ("x", "y", "z"):
        if name not in cols:
            raise FormatError(f"vertex element missing property '{name}'")
    return np.stack(
        [cols["x"].astype(np.float64), cols["y"].astype(np.float64), cols["z"].astype(np.float64)],
        axis=1,
    )


def _vertex_colors(cols):
    if all(n in cols for n in ("red", "green", "blue")):
        rgb = np.stack([cols["red"], cols["green"], cols["blue"]], axis=1)
        return color_u8_to_float(rgb)
    return None


def _vertex_normals(cols):
    if all(n in cols for n in ("nx", "ny", "nz")):
        nrm = np.stack([cols["nx"], cols["ny"], cols["nz"]], axis=1).astype(np.float64)
        norms = np.linalg.norm(nrm, axis=1, keepdims=True)
        # Scan normals are rarely exactly unit; renormalize, dropping zero-length rows.
        if (norms == 0).any():
            return None
        return nrm / norms
    return None


def load_model(path, kind: str = "auto"):
    """Loads a PLY model.

    kind: 'auto' returns a TriMesh when face elements are present, else a
    PointSet; 'mesh' requires faces; 'points' ignores faces; 'gaussians'
    reads splat centers and decodes the SH DC term into colors.
    """
    path = Path(path)
    if kind not in ("auto", "mesh", "points", "gaussians"):
        raise UsageError(f"unknown model kind '{kind}'")
    if not path.exists():
        raise UsageError(f"model file not found: {path}")
    cols, face_lists = _read_ply(path)
    positions = _vertex_positions(cols)

    if kind == "gaussians":
        dc = [f"f_dc_{i}" for i in range(3)]
        if not all(n in cols for n in dc):
            raise FormatError("kind=gaussians requires f_dc_0..2 vertex properties")
        fdc = np.stack([cols[n] for n in dc], axis=1).astype(np.float64)
        colors = np.clip(0.5 + SH_C0 * fdc, 0.0, 1.0)
        return PointSet(positions, colors=colors)

    colors = _vertex_colors(cols)
    normals = _vertex_normals(cols)
    has_faces = len(face_lists) > 0

    if kind == "mesh" or (kind == "auto" and has_faces):
        if not has_faces:
            raise FormatError("kind=mesh but the file has no face element")
        faces = _faces_from_lists(face_lists)
        return TriMesh(positions, faces, vertex_colors=colors)
    return PointSet(positions, colors=colors, normals=normals)


def _ascii_f32(v):
    # 9 significant digits round-trip any float32.
    return f"{np.float32(v):.9g}"


def save_model(model, path, labels=None, palette=None, binary: bool = True) -> None:
    """Writes a PLY file; binary little-endian by default.

    When `labels` is given, vertex colors are replaced by palette colors;
    the label value len(palette) is the reserved 'other' class and renders
    gray (128,128,128).
    """
    if isinstance(model, TriMesh):
        positions = model.vertices
        faces = model.faces
        colors = model.vertex_colors
        normals = None
    elif isinstance(model, PointSet):
        positions = model.positions
        faces = None
        colors = model.colors
        normals = model.normals
    else:
        raise TypeError(f"cannot save object of type {type(model).__name__}")

    color_u8 = None
    if labels is not None:
        if palette is None:
            raise ValueError("labels given without a palette")
        labels = np.asarray(labels, dtype=np.int64)
        palette = np.asarray(palette)
        if palette.ndim != 2 or palette.shape[1] != 3:
            raise ValueError("palette must be (K, 3)")
        if labels.shape[0] != positions.shape[0]:
            raise ValueError("labels length must equal point count")
        k = palette.shape[0]
        if labels.min() < 0 or labels.max() > k:
            raise ValueError(f"label out of range: palette has {k} classes (+{k} = other)")
        if palette.dtype != np.uint8:
            palette = color_float_to_u8(palette)
        full = np.concatenate([palette, np.array([OTHER_GRAY], dtype=np.uint8)], axis=0)
        color_u8 = full[labels]
    elif colors is not None:
        color_u8 = color_float_to_u8(colors)

    write_ply(path, positions, faces=faces, colors_u8=color_u8, normals=normals, binary=binary)


def write_ply(path, positions, faces=None, colors_u8=None, normals=None, binary=True):
    """Low-level PLY writer over raw arrays; allows zero-point files."""
    positions = np.asarray(positions, dtype=np.float64)
    n = positions.shape[0]
    header = ["ply"]
    header.append("format binary_little_endian 1.0" if binary else "format ascii 1.0")
    header.append(f"element vertex {n}")
    header += ["property float x", "property float y", "property float z"]
    if colors_u8 is not None:
        header += ["property uchar red", "property uchar green", "property uchar blue"]
    if normals is not None:
        header += ["property float nx", "property float ny", "property float nz"]
    if faces is not None:
        header.append(f"element face {len(faces)}")
        header.append("property list uchar int vertex_indices")
    header.append("end_header")

    with open(path, "wb") as fh:
        fh.write(("\n".join(header) + "\n").encode("ascii"))
        if binary:
            fields = [("x", "<f4"), ("y", "<f4"), ("z", "<f4")]
            if colors_u8 is not None:
                fields += [("red", "u1"), ("green", "u1"), ("blue", "u1")]
            if normals is not None:
                fields += [("nx", "<f4"), ("ny", "<f4"), ("nz", "<f4")]
            rows = np.zeros(n, dtype=np.dtype(fields))
            rows["x"], rows["y"], rows["z"] = (positions[:, i].astype(np.float32) for i in range(3))
            if colors_u8 is not None:
                rows["red"], rows["green"], rows["blue"] = (colors_u8[:, i] for i in range(3))
            if normals is not None:
                nf = np.asarray(normals, dtype=np.float32)
                rows["nx"], rows["ny"], rows["nz"] = (nf[:, i] for i in range(3))
            fh.write(rows.tobytes())
            if faces is not None:
                f = np.asarray(faces, dtype=np.int32)
                frows = np.zeros(len(f), dtype=np.dtype([("n", "u1"), ("idx", "<i4", (3,))]))
                frows["n"] = 3
                frows["idx"] = f
                fh.write(frows.tobytes())
        else:
            lines = []
            for i in range(n):
                parts = [_ascii_f32(v) for v in positions[i]]
                if colors_u8 is not None:
                    parts += [str(int(v)) for v in colors_u8[i]]
                if normals is not None:
                    parts += [_ascii_f32(v) for v in normals[i]]
                lines.append(" ".join(parts))
            if faces is not None:
                for f in np.asarray(faces, dtype=np.int64):
                    lines.append("3 " + " ".join(str(int(v)) for v in f))
            fh.write(("\n".join(lines) + ("\n" if lines else "")).encode("ascii"))


def default_palette(k: int) -> np.ndarray:
    """K visually distinct colors as uint8 rows; stable for a given K."""
    base = np.array(
        [
            (230, 25, 75), (60, 180, 75), (0, 130, 200), (255, 225, 25),
            (245, 130, 48), (145, 30, 180), (70, 240, 240), (240, 50, 230),
            (210, 245, 60), (250, 190, 212), (0, 128, 128), (220, 190, 255),
            (170, 110, 40), (255, 250, 200), (128, 0, 0), (170, 255, 195),
        ],
        dtype=np.uint8,
    )
    if k <= len(base):
        return base[:k].copy()
    rng = np.random.default_rng(0)
    extra = rng.integers(0, 256, size=(k - len(base), 3), dtype=np.uint8)
    return np.concatenate([base, extra], axis=0)
