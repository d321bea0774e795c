"""Triangle meshes with per-corner U-V coordinates, distortion analysis and
U-V relaxation.

U-V space and world space share units: a uv distance of 1 corresponds to one
scene unit (meter) on an undistorted surface. Texel ``(row, col)`` of an
``H x W`` map has its center at ``u = (col + 0.5) / W``, ``v = (row + 0.5) / H``.
"""

from __future__ import annotations

import os
from collections import defaultdict, deque
from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp
from scipy.sparse.linalg import factorized

AREA_EPS = 1e-12

DEFAULT_ALBEDO = (0.6, 0.6, 0.6)


class MeshError(ValueError):
    """Invalid mesh content."""


class MeshParseError(MeshError):
    def __init__(self, path, line: int, message: str):
        self.path = str(path)
        self.line = line
        super().__init__(f"{path}:{line}: {message}")


class DegenerateFaceError(MeshError):
    def __init__(self, faces, kind: str = "3D"):
        self.faces = [int(f) for f in faces]
        super().__init__(f"degenerate {kind} face(s): {self.faces}")


class PatchTopologyError(MeshError):
    pass


class AtlasFitError(MeshError):
    pass


@dataclass(frozen=True, eq=False)
class Mesh:
    """Immutable triangle mesh.

    ``uv`` has shape ``(F, 3, 2)`` (one coordinate per face corner); rows of
    non-textured faces are ignored. ``albedo`` is the diffuse fallback used
    when a face is not textured.
    """

    vertices: np.ndarray
    faces: np.ndarray
    uv: np.ndarray
    textured: np.ndarray
    albedo: np.ndarray
    specular: np.ndarray
    shininess: np.ndarray
    _cache: dict = field(default_factory=dict, repr=False, compare=False)

    def __post_init__(self):
        for name in ("vertices", "faces", "uv", "textured", "albedo", "specular", "shininess"):
            arr = getattr(self, name)
            arr.setflags(write=False)

    @property
    def n_faces(self) -> int:
        return len(self.faces)

    @property
    def n_vertices(self) -> int:
        return len(self.vertices)

    def corners(self) -> np.ndarray:
        """World positions of face corners, shape (F, 3, 3)."""
        return self.vertices[self.faces]

    def face_areas(self) -> np.ndarray:
        p = self.corners()
        return 0.5 * np.linalg.norm(np.cross(p[:, 1] - p[:, 0], p[:, 2] - p[:, 0]), axis=1)

    def face_normals(self) -> np.ndarray:
        p = self.corners()
        n = np.cross(p[:, 1] - p[:, 0], p[:, 2] - p[:, 0])
        return n / np.linalg.norm(n, axis=1, keepdims=True)

    def replace(self, **changes) -> "Mesh":
        fields = dict(
            vertices=self.vertices, faces=self.faces, uv=self.uv, textured=self.textured,
            albedo=self.albedo, specular=self.specular, shininess=self.shininess,
        )
        fields.update(changes)
        return make_mesh(**fields)


def make_mesh(vertices, faces, uv=None, textured=None, albedo=None, specular=None,
              shininess=None, validate: bool = True) -> Mesh:
    """Build a :class:`Mesh` from array-likes, filling material defaults."""
    vertices = np.array(vertices, dtype=np.float64).reshape(-1, 3)
    faces = np.array(faces, dtype=np.int64).reshape(-1, 3)
    n = len(faces)
    uv = np.zeros((n, 3, 2)) if uv is None else np.array(uv, dtype=np.float64).reshape(n, 3, 2)
    textured = np.zeros(n, bool) if textured is None else np.array(textured, dtype=bool).reshape(n)
    if albedo is None:
        albedo = np.tile(DEFAULT_ALBEDO, (n, 1))
    albedo = np.broadcast_to(np.asarray(albedo, dtype=np.float64), (n, 3)).copy()
    specular = np.broadcast_to(np.asarray(0.0 if specular is None else specular, float), (n,)).copy()
    shininess = np.broadcast_to(np.asarray(16.0 if shininess is None else shininess, float), (n,)).copy()
    mesh = Mesh(vertices, faces, uv, textured, albedo, specular, shininess)
    if validate:
        validate_mesh(mesh)
    return mesh


def validate_mesh(mesh: Mesh, overlap_resolution: int = 256) -> None:
    if len(mesh.faces) and (mesh.faces.min() < 0 or mesh.faces.max() >= len(mesh.vertices)):
        raise MeshError("face index out of range")
    tex_uv = mesh.uv[mesh.textured]
    if tex_uv.size and (tex_uv.min() < 0.0 or tex_uv.max() > 1.0):
        raise MeshError("uv coordinate outside [0, 1]")
    bad = np.flatnonzero(mesh.face_areas() <= AREA_EPS) if len(mesh.faces) else []
    if len(bad):
        raise DegenerateFaceError(bad)
    if mesh.textured.any():
        check_patch_overlap(mesh, overlap_resolution, overlap_resolution)


# ---------------------------------------------------------------------------
# Wavefront I/O

def _parse_mtl(path):
    materials = {}
    current = None
    with open(path, encoding="utf-8") as fh:
        for lineno, raw in enumerate(fh, 1):
            parts = raw.split("#", 1)[0].split()
            if not parts:
                continue
            key, args = parts[0], parts[1:]
            try:
                if key == "newmtl":
                    current = materials.setdefault(args[0], {})
                elif current is None:
                    continue
                elif key == "Kd":
                    current["albedo"] = tuple(float(a) for a in args[:3])
                elif key == "Ks":
                    current["specular"] = float(np.mean([float(a) for a in args[:3]]))
                elif key == "Ns":
                    current["shininess"] = float(args[0])
            except (ValueError, IndexError) as exc:
                raise MeshParseError(path, lineno, f"bad material record: {exc}") from None
    return materials


def load_mesh(path) -> Mesh:
    """Parse a triangulated Wavefront OBJ file (``v``/``vt``/``f`` records).

    Faces given without texture indices are flagged as non-textured.
    ``mtllib``/``usemtl`` supply per-face ``Kd``, ``Ks`` and ``Ns``.
    """
    path = os.fspath(path)
    verts, uvs = [], []
    faces, face_uv_idx, face_mtl = [], [], []
    materials = {}
    mtl = None
    with open(path, encoding="utf-8") as fh:
        for lineno, raw in enumerate(fh, 1):
            parts = raw.split("#", 1)[0].split()
            if not parts:
                continue
            key, args = parts[0], parts[1:]
            try:
                if key == "v":
                    if len(args) < 3:
                        raise ValueError("vertex needs 3 coordinates")
                    verts.append([float(a) for a in args[:3]])
                elif key == "vt":
                    if len(args) < 2:
                        raise ValueError("texture coordinate needs 2 values")
                    u, v = float(args[0]), float(args[1])
                    if not (0.0 <= u <= 1.0 and 0.0 <= v <= 1.0):
                        raise ValueError(f"uv ({u}, {v}) outside [0, 1]")
                    uvs.append([u, v])
                elif key == "f":
                    if len(args) != 3:
                        raise ValueError(f"only triangles are supported, got {len(args)} corners")
                    vi, ti = [], []
                    for tok in args:
                        comps = tok.split("/")
                        vi.append(_resolve_index(int(comps[0]), len(verts)))
                        ti.append(_resolve_index(int(comps[1]), len(uvs))
                                  if len(comps) > 1 and comps[1] else None)
                    if any(t is None for t in ti) and not all(t is None for t in ti):
                        raise ValueError("face mixes corners with and without uv")
                    faces.append(vi)
                    face_uv_idx.append(None if ti[0] is None else ti)
                    face_mtl.append(mtl)
                elif key == "mtllib":
                    mtl_path = os.path.join(os.path.dirname(path), " ".join(args))
                    materials.update(_parse_mtl(mtl_path))
                elif key == "usemtl":
                    mtl = args[0] if args else None
            except (ValueError, IndexError) as exc:
                raise MeshParseError(path, lineno, str(exc)) from None

    n = len(faces)
    uv = np.zeros((n, 3, 2))
    textured = np.zeros(n, bool)
    albedo = np.tile(DEFAULT_ALBEDO, (n, 1))
    specular = np.zeros(n)
    shininess = np.full(n, 16.0)
    for i, (ti, name) in enumerate(zip(face_uv_idx, face_mtl)):
        if ti is not None:
            uv[i] = [uvs[t] for t in ti]
            textured[i] = True
        m = materials.get(name, {})
        albedo[i] = m.get("albedo", DEFAULT_ALBEDO)
        specular[i] = m.get("specular", 0.0)
        shininess[i] = m.get("shininess", 16.0)
    return make_mesh(verts if verts else np.zeros((0, 3)), faces if faces else np.zeros((0, 3)),
                     uv, textured, albedo, specular, shininess)


def _resolve_index(idx: int, count: int) -> int:
    if idx > 0:
        res = idx - 1
    elif idx < 0:
        res = count + idx
    else:
        raise ValueError("index 0 is invalid in OBJ")
    if not 0 <= res < count:
        raise ValueError(f"index {idx} references an undefined element")
    return res


def save_mesh(mesh: Mesh, path) -> None:
    """Write ``mesh`` as OBJ plus a sibling ``.mtl`` holding per-face materials."""
    path = os.fspath(path)
    base = os.path.splitext(path)[0]
    mtl_path = base + ".mtl"
    keys = {}
    face_key = []
    for i in range(mesh.n_faces):
        key = (tuple(np.round(mesh.albedo[i], 6)), round(float(mesh.specular[i]), 6),
               round(float(mesh.shininess[i]), 6))
        face_key.append(keys.setdefault(key, f"mat{len(keys)}"))
    with open(mtl_path, "w", encoding="utf-8") as fh:
        for key, name in keys.items():
            kd, ks, ns = key
            fh.write(f"newmtl {name}\nKd {kd[0]:.6f} {kd[1]:.6f} {kd[2]:.6f}\n"
                     f"Ks {ks:.6f} {ks:.6f} {ks:.6f}\nNs {ns:.6f}\n\n")
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(f"mtllib {os.path.basename(mtl_path)}\n")
        for v in mesh.vertices:
            fh.write(f"v {v[0]:.9f} {v[1]:.9f} {v[2]:.9f}\n")
        uv_index = {}
        lines = []
        for i in range(mesh.n_faces):
            if not mesh.textured[i]:
                continue
            for c in range(3):
                key = (float(mesh.uv[i, c, 0]), float(mesh.uv[i, c, 1]))
                if key not in uv_index:
                    uv_index[key] = len(uv_index) + 1
                    lines.append(f"vt {key[0]:.9f} {key[1]:.9f}\n")
        fh.writelines(lines)
        current = None
        for i, f in enumerate(mesh.faces):
            if face_key[i] != current:
                current = face_key[i]
                fh.write(f"usemtl {current}\n")
            if mesh.textured[i]:
                t = [uv_index[(float(mesh.uv[i, c, 0]), float(mesh.uv[i, c, 1]))] for c in range(3)]
                fh.write(f"f {f[0]+1}/{t[0]} {f[1]+1}/{t[1]} {f[2]+1}/{t[2]}\n")
            else:
                fh.write(f"f {f[0]+1} {f[1]+1} {f[2]+1}\n")


# ---------------------------------------------------------------------------
# Distortion

@dataclass(frozen=True)
class DistortionReport:
    faces: np.ndarray           # indices of textured faces
    per_face_sigmas: np.ndarray  # (n, 2), sigma1 >= sigma2
    energy: float
    stretched_count: int
    compressed_count: int
    tol: float


def _jacobians(p: np.ndarray, q: np.ndarray):
    """uv -> world Jacobians for corner arrays p (n,3,3) and q (n,3,2)."""
    e = np.stack([p[:, 1] - p[:, 0], p[:, 2] - p[:, 0]], axis=2)  # (n,3,2)
    u = np.stack([q[:, 1] - q[:, 0], q[:, 2] - q[:, 0]], axis=2)  # (n,2,2)
    det = u[:, 0, 0] * u[:, 1, 1] - u[:, 0, 1] * u[:, 1, 0]
    return e, u, det


def _sigmas_from_jacobian(j: np.ndarray) -> np.ndarray:
    g = np.einsum("nki,nkj->nij", j, j)
    a, b, c = g[:, 0, 0], g[:, 0, 1], g[:, 1, 1]
    mean = 0.5 * (a + c)
    rad = np.sqrt(0.25 * (a - c) ** 2 + b * b)
    s1 = np.sqrt(mean + rad)
    s2 = np.sqrt(np.maximum(mean - rad, 0.0))
    return np.stack([s1, s2], axis=1)


def _face_sigmas(p, q):
    e, u, det = _jacobians(p, q)
    bad = np.abs(det) * 0.5 < AREA_EPS
    if bad.any():
        return None, bad
    j = e @ np.linalg.inv(u)
    return _sigmas_from_jacobian(j), bad


def face_singular_values(mesh: Mesh, face: int) -> tuple[float, float]:
    """Singular values of the linear map from the face's uv triangle onto its
    world triangle."""
    p = mesh.corners()[face][None]
    q = mesh.uv[face][None]
    if mesh.face_areas()[face] <= AREA_EPS:
        raise DegenerateFaceError([face])
    sig, bad = _face_sigmas(p, q)
    if sig is None:
        raise DegenerateFaceError([face], kind="uv")
    return float(sig[0, 0]), float(sig[0, 1])


def distortion_energy(mesh: Mesh, tol: float = 0.1) -> DistortionReport:
    """Area-weighted squared deviation of the singular values from 1, summed
    over textured faces."""
    idx = np.flatnonzero(mesh.textured)
    if len(idx) == 0:
        return DistortionReport(idx, np.zeros((0, 2)), 0.0, 0, 0, tol)
    sig, bad = _face_sigmas(mesh.corners()[idx], mesh.uv[idx])
    if sig is None:
        raise DegenerateFaceError(idx[bad], kind="uv")
    area = mesh.face_areas()[idx]
    energy = float(np.sum(area * ((sig[:, 0] - 1.0) ** 2 + (sig[:, 1] - 1.0) ** 2)))
    return DistortionReport(
        faces=idx,
        per_face_sigmas=sig,
        energy=energy,
        stretched_count=int(np.sum(sig[:, 0] > 1.0 + tol)),
        compressed_count=int(np.sum(sig[:, 1] < 1.0 - tol)),
        tol=tol,
    )


# ---------------------------------------------------------------------------
# Patches

def uv_patches(mesh: Mesh) -> np.ndarray:
    """Label connected textured patches; -1 for non-textured faces.

    Two textured faces are connected when they share a world edge whose uv
    coordinates agree on both sides.
    """
    labels = np.full(mesh.n_faces, -1, dtype=np.int64)
    edge_faces = defaultdict(list)
    for f in np.flatnonzero(mesh.textured):
        for c in range(3):
            a, b = mesh.faces[f, c], mesh.faces[f, (c + 1) % 3]
            ua, ub = tuple(mesh.uv[f, c]), tuple(mesh.uv[f, (c + 1) % 3])
            key = ((a, ua), (b, ub)) if a < b else ((b, ub), (a, ua))
            edge_faces[key].append(f)
    adj = defaultdict(list)
    for fs in edge_faces.values():
        for i in range(len(fs)):
            for j in range(i + 1, len(fs)):
                adj[fs[i]].append(fs[j])
                adj[fs[j]].append(fs[i])
    next_label = 0
    for f in np.flatnonzero(mesh.textured):
        if labels[f] >= 0:
            continue
        labels[f] = next_label
        queue = deque([f])
        while queue:
            g = queue.popleft()
            for h in adj[g]:
                if labels[h] < 0:
                    labels[h] = next_label
                    queue.append(h)
        next_label += 1
    return labels


def _texel_centers(width, height, u0, u1, v0, v1):
    c0 = max(int(np.floor(u0 * width - 0.5)), 0)
    c1 = min(int(np.ceil(u1 * width - 0.5)), width - 1)
    r0 = max(int(np.floor(v0 * height - 0.5)), 0)
    r1 = min(int(np.ceil(v1 * height - 0.5)), height - 1)
    cols = np.arange(c0, c1 + 1)
    rows = np.arange(r0, r1 + 1)
    return rows, cols


def _cover_triangle(q: np.ndarray, width: int, height: int):
    """Texel (rows, cols) whose centers lie inside uv triangle ``q`` (edges included)."""
    rows, cols = _texel_centers(width, height, q[:, 0].min(), q[:, 0].max(),
                                q[:, 1].min(), q[:, 1].max())
    if len(rows) == 0 or len(cols) == 0:
        return None
    pu = (cols + 0.5) / width
    pv = (rows + 0.5) / height
    pu, pv = np.meshgrid(pu, pv)
    w = []
    for k in range(3):
        a, b = q[k], q[(k + 1) % 3]
        w.append((b[0] - a[0]) * (pv - a[1]) - (b[1] - a[1]) * (pu - a[0]))
    inside = ((w[0] >= 0) & (w[1] >= 0) & (w[2] >= 0)) | ((w[0] <= 0) & (w[1] <= 0) & (w[2] <= 0))
    rr, cc = np.nonzero(inside)
    return rows[rr], cols[cc]


def _uv_area(q):
    return 0.5 * abs((q[1, 0] - q[0, 0]) * (q[2, 1] - q[0, 1]) - (q[1, 1] - q[0, 1]) * (q[2, 0] - q[0, 0]))


def check_patch_overlap(mesh: Mesh, width: int, height: int) -> None:
    labels = uv_patches(mesh)
    owner = np.full((height, width), -1, dtype=np.int64)
    for f in np.flatnonzero(mesh.textured):
        if _uv_area(mesh.uv[f]) < AREA_EPS:
            continue
        hit = _cover_triangle(mesh.uv[f], width, height)
        if hit is None:
            continue
        rr, cc = hit
        prev = owner[rr, cc]
        clash = (prev >= 0) & (prev != labels[f])
        if clash.any():
            raise MeshError(f"uv patches {int(prev[clash][0])} and {int(labels[f])} overlap "
                            f"at texel {(int(rr[clash][0]), int(cc[clash][0]))}")
        owner[rr, cc] = labels[f]


def bake_texel_mask(mesh: Mesh, width: int, height: int) -> np.ndarray:
    """Boolean ``(height, width)`` grid: True where a texel center lies inside a
    textured face's uv triangle."""
    if width < 1 or height < 1:
        raise ValueError("texel mask dimensions must be positive")
    key = ("texel_mask", width, height)
    cached = mesh._cache.get(key)
    if cached is not None:
        return cached.copy()
    mask = np.zeros((height, width), dtype=bool)
    for f in np.flatnonzero(mesh.textured):
        if _uv_area(mesh.uv[f]) < AREA_EPS:
            continue
        hit = _cover_triangle(mesh.uv[f], width, height)
        if hit is not None:
            mask[hit] = True
    mesh._cache[key] = mask
    return mask.copy()


def distortion_heatmap(mesh: Mesh, width: int, height: int, tol: float = 0.1) -> np.ndarray:
    """RGB map of per-face distortion in uv space: gray when undistorted,
    purple for stretching, red for compression."""
    report = distortion_energy(mesh, tol)
    img = np.ones((height, width, 3))
    gray = np.array([0.55, 0.55, 0.55])
    purple = np.array([0.55, 0.1, 0.75])
    red = np.array([0.85, 0.1, 0.1])
    for f, (s1, s2) in zip(report.faces, report.per_face_sigmas):
        stretch = min(max(np.log(s1), 0.0) / np.log(2.0), 1.0)
        squash = min(max(-np.log(max(s2, 1e-9)), 0.0) / np.log(2.0), 1.0)
        if stretch >= squash:
            color = gray + (purple - gray) * stretch
        else:
            color = gray + (red - gray) * squash
        if _uv_area(mesh.uv[f]) < AREA_EPS:
            continue
        hit = _cover_triangle(mesh.uv[f], width, height)
        if hit is not None:
            img[hit] = color
    return img


# ---------------------------------------------------------------------------
# U-V relaxation

@dataclass
class _Patch:
    faces: np.ndarray        # mesh face indices
    corner_vid: np.ndarray   # (n,3) local vertex ids
    world: np.ndarray        # (n,3,3)
    area: np.ndarray
    n_local: int
    local_to_corner: list    # local id -> (face, corner) first occurrence


def _extract_patch(mesh: Mesh, seed_face: int) -> _Patch:
    if not mesh.textured[seed_face]:
        raise PatchTopologyError(f"seed face {seed_face} is not textured")
    labels = uv_patches(mesh)
    faces = np.flatnonzero(labels == labels[seed_face])
    ids = {}
    corner_vid = np.empty((len(faces), 3), dtype=np.int64)
    first = []
    for i, f in enumerate(faces):
        for c in range(3):
            key = (int(mesh.faces[f, c]), tuple(mesh.uv[f, c]))
            if key not in ids:
                ids[key] = len(ids)
                first.append((f, c))
            corner_vid[i, c] = ids[key]
    world = mesh.corners()[faces]
    area = mesh.face_areas()[faces]
    patch = _Patch(faces, corner_vid, world, area, len(ids), first)
    _check_disk(patch)
    return patch


def _check_disk(patch: _Patch) -> None:
    edge_count = defaultdict(int)
    for tri in patch.corner_vid:
        for c in range(3):
            a, b = tri[c], tri[(c + 1) % 3]
            edge_count[(min(a, b), max(a, b))] += 1
    advice = "; cut a seam manually so the patch becomes a topological disk"
    if any(n > 2 for n in edge_count.values()):
        raise PatchTopologyError("non-manifold edge in patch" + advice)
    boundary = [e for e, n in edge_count.items() if n == 1]
    euler = patch.n_local - len(edge_count) + len(patch.faces)
    if euler != 1 or not boundary:
        raise PatchTopologyError(f"patch is not a disk (Euler characteristic {euler})" + advice)
    nbr = defaultdict(list)
    for a, b in boundary:
        nbr[a].append(b)
        nbr[b].append(a)
    if any(len(v) != 2 for v in nbr.values()):
        raise PatchTopologyError("patch boundary is not a simple loop" + advice)
    start = boundary[0][0]
    prev, cur, steps = None, start, 0
    while True:
        nxt = nbr[cur][0] if nbr[cur][0] != prev else nbr[cur][1]
        prev, cur = cur, nxt
        steps += 1
        if cur == start:
            break
    if steps != len(boundary):
        raise PatchTopologyError("patch has several boundary loops" + advice)


def _local_frames(world: np.ndarray, orient: float) -> np.ndarray:
    """Isometric 2D coordinates (n,3,2) of each world triangle, oriented with sign ``orient``."""
    e1 = world[:, 1] - world[:, 0]
    e2 = world[:, 2] - world[:, 0]
    l1 = np.linalg.norm(e1, axis=1)
    x2 = np.einsum("ij,ij->i", e1, e2) / l1
    y2 = np.linalg.norm(np.cross(e1, e2), axis=1) / l1
    out = np.zeros((len(world), 3, 2))
    out[:, 1, 0] = l1
    out[:, 2, 0] = x2
    out[:, 2, 1] = orient * y2
    return out


def _signed_uv_area(q):
    return 0.5 * ((q[:, 1, 0] - q[:, 0, 0]) * (q[:, 2, 1] - q[:, 0, 1])
                  - (q[:, 1, 1] - q[:, 0, 1]) * (q[:, 2, 0] - q[:, 0, 0]))


class _PatchEnergy:
    def __init__(self, patch: _Patch, orient: float):
        self.patch = patch
        self.orient = orient
        self.e = np.stack([patch.world[:, 1] - patch.world[:, 0],
                           patch.world[:, 2] - patch.world[:, 0]], axis=2)

    def valid(self, x: np.ndarray) -> bool:
        q = x[self.patch.corner_vid]
        s = _signed_uv_area(q) * self.orient
        return bool(np.all(s > AREA_EPS))

    def value(self, x: np.ndarray) -> float:
        q = x[self.patch.corner_vid]
        u = np.stack([q[:, 1] - q[:, 0], q[:, 2] - q[:, 0]], axis=2)
        j = self.e @ np.linalg.inv(u)
        sig = _sigmas_from_jacobian(j)
        return float(np.sum(self.patch.area * ((sig[:, 0] - 1) ** 2 + (sig[:, 1] - 1) ** 2)))

    def grad(self, x: np.ndarray) -> np.ndarray:
        # E_f = A (|J|_F^2 - 2 |J|_* + 2), J = E U^-1, dE/dU = -J^T G U^-T
        q = x[self.patch.corner_vid]
        u = np.stack([q[:, 1] - q[:, 0], q[:, 2] - q[:, 0]], axis=2)
        uinv = np.linalg.inv(u)
        j = self.e @ uinv
        left, _, right = np.linalg.svd(j, full_matrices=False)
        g = 2.0 * (j - left @ right) * self.patch.area[:, None, None]
        du = -np.einsum("nki,nkj,nlj->nil", j, g, uinv)
        out = np.zeros_like(x)
        vid = self.patch.corner_vid
        np.add.at(out, vid[:, 1], du[:, :, 0])
        np.add.at(out, vid[:, 2], du[:, :, 1])
        np.add.at(out, vid[:, 0], -du[:, :, 0] - du[:, :, 1])
        return out


def _bfs_unfold(patch: _Patch, seed_local: int, orient: float) -> np.ndarray:
    """Lay faces flat one by one, walking outward from the seed face."""
    n = len(patch.faces)
    vid = patch.corner_vid
    x = np.full((patch.n_local, 2), np.nan)
    placed = np.zeros(patch.n_local, bool)
    flat = _local_frames(patch.world[seed_local][None], orient)[0]
    flat -= flat.mean(axis=0)
    x[vid[seed_local]] = flat
    placed[vid[seed_local]] = True
    edge_faces = defaultdict(list)
    for i in range(n):
        for c in range(3):
            a, b = vid[i, c], vid[i, (c + 1) % 3]
            edge_faces[(min(a, b), max(a, b))].append(i)
    seen = np.zeros(n, bool)
    seen[seed_local] = True
    queue = deque([seed_local])
    while queue:
        f = queue.popleft()
        for c in range(3):
            a, b = vid[f, c], vid[f, (c + 1) % 3]
            for g in edge_faces[(min(a, b), max(a, b))]:
                if seen[g]:
                    continue
                seen[g] = True
                queue.append(g)
                corners = list(vid[g])
                k = next(i for i in range(3) if corners[i] not in (a, b))
                cv = corners[k]
                if placed[cv]:
                    continue
                ia, ib = corners.index(a), corners.index(b)
                pa, pb, pc = patch.world[g, ia], patch.world[g, ib], patch.world[g, k]
                d3 = pb - pa
                l3 = np.linalg.norm(d3)
                along = np.dot(pc - pa, d3) / l3
                perp = np.linalg.norm(pc - pa - along * d3 / l3)
                d2 = x[b] - x[a]
                l2 = np.linalg.norm(d2)
                s = l2 / l3
                dhat = d2 / l2
                nhat = np.array([-dhat[1], dhat[0]])
                best = None
                for sign in (1.0, -1.0):
                    cand = x[a] + s * (along * dhat + sign * perp * nhat)
                    tri = np.empty((1, 3, 2))
                    tri[0, ia], tri[0, ib], tri[0, k] = x[a], x[b], cand
                    if _signed_uv_area(tri)[0] * orient > 0:
                        best = cand
                x[cv] = best if best is not None else x[a] + s * (along * dhat + perp * nhat)
                placed[cv] = True
    return x


class _ArapSolver:
    """Least-squares fit of patch uv to per-face rotated isometric copies."""

    def __init__(self, patch: _Patch, flat: np.ndarray):
        n = len(patch.faces)
        self.patch = patch
        self.flat = flat
        vid = patch.corner_vid
        rows, cols, vals = [], [], []
        self.edges = []
        r = 0
        for i in range(n):
            w = np.sqrt(patch.area[i])
            for c in range(3):
                a, b = vid[i, c], vid[i, (c + 1) % 3]
                rows += [r, r]
                cols += [b, a]
                vals += [w, -w]
                self.edges.append((i, c, (c + 1) % 3, w))
                r += 1
        a_mat = sp.csr_matrix((vals, (rows, cols)), shape=(r, patch.n_local))
        # pin vertex 0 to remove the translation gauge
        self.free = np.arange(1, patch.n_local)
        self.a_free = a_mat[:, self.free].tocsc()
        self.a_pin = a_mat[:, [0]].toarray()[:, 0]
        self.solve = factorized((self.a_free.T @ self.a_free).tocsc())
        e = np.array(self.edges, dtype=object)
        self.e_face = e[:, 0].astype(np.int64)
        self.e_a = e[:, 1].astype(np.int64)
        self.e_b = e[:, 2].astype(np.int64)
        self.e_w = e[:, 3].astype(np.float64)

    def step(self, x: np.ndarray) -> np.ndarray:
        vid = self.patch.corner_vid
        q = x[vid]
        pc = self.flat - self.flat.mean(axis=1, keepdims=True)
        qc = q - q.mean(axis=1, keepdims=True)
        cov = np.einsum("nki,nkj->nij", qc, pc)
        u, _, vt = np.linalg.svd(cov)
        d = np.sign(np.linalg.det(u @ vt))
        u[:, :, 1] *= d[:, None]
        rot = u @ vt
        target = np.einsum("nij,nj->ni", rot[self.e_face],
                           self.flat[self.e_face, self.e_b] - self.flat[self.e_face, self.e_a])
        rhs = target * self.e_w[:, None] - self.a_pin[:, None] * x[0][None, :]
        out = x.copy()
        for k in range(2):
            out[self.free, k] = self.solve(self.a_free.T @ rhs[:, k])
        return out


def _fit_into_rect(x: np.ndarray, rect) -> np.ndarray:
    u0, v0, u1, v1 = rect
    rw, rh = u1 - u0, v1 - v0
    best = None
    for deg in np.arange(0.0, 180.0, 1.0):
        t = np.deg2rad(deg)
        rot = np.array([[np.cos(t), -np.sin(t)], [np.sin(t), np.cos(t)]])
        y = x @ rot.T
        lo, hi = y.min(axis=0), y.max(axis=0)
        margin = min(rw - (hi[0] - lo[0]), rh - (hi[1] - lo[1]))
        if best is None or margin > best[0] + 1e-12:
            best = (margin, y, lo, hi)
        if deg == 0.0 and margin >= 0:
            break  # keep the current orientation whenever it already fits
    margin, y, lo, hi = best
    if margin < 0:
        raise AtlasFitError(f"relaxed patch ({hi[0]-lo[0]:.4f} x {hi[1]-lo[1]:.4f}) does not fit "
                            f"its atlas rectangle ({rw:.4f} x {rh:.4f})")
    center = np.array([(u0 + u1) / 2, (v0 + v1) / 2])
    y = y - (lo + hi) / 2 + center
    return np.clip(y, 0.0, 1.0)


def relax_uv(mesh: Mesh, seed_face: int, iterations: int, rect=(0.0, 0.0, 1.0, 1.0),
             trace: list | None = None) -> Mesh:
    """Reduce U-V distortion of the textured patch containing ``seed_face``.

    The patch is unfolded outward from the seed face, then relaxed by
    alternating per-face rotation fits with a global least-squares placement;
    every move is accepted only if it does not raise the distortion energy
    (step halving otherwise), with plain gradient steps as a fallback. The
    result is rigidly placed inside ``rect = (u0, v0, u1, v1)``.

    If ``trace`` is given, the mesh energy after each iteration is appended.
    """
    if iterations < 0:
        raise ValueError("iterations must be >= 0")
    patch = _extract_patch(mesh, seed_face)
    seed_local = int(np.flatnonzero(patch.faces == seed_face)[0])
    q_in = mesh.uv[patch.faces]
    orient = 1.0 if _signed_uv_area(q_in[seed_local][None])[0] >= 0 else -1.0

    x_in = np.empty((patch.n_local, 2))
    for lid, (f, c) in enumerate(patch.local_to_corner):
        x_in[lid] = mesh.uv[f, c]
    energy = _PatchEnergy(patch, orient)
    other = distortion_energy(mesh).energy - (energy.value(x_in) if energy.valid(x_in) else 0.0)

    candidates = []
    if energy.valid(x_in):
        candidates.append((energy.value(x_in), 0, x_in))
    x_bfs = _bfs_unfold(patch, seed_local, orient)
    if np.all(np.isfinite(x_bfs)) and energy.valid(x_bfs):
        candidates.append((energy.value(x_bfs), 1, x_bfs))
    if not candidates:
        raise PatchTopologyError("no fold-free starting layout for the patch")
    e_cur, _, x = min(candidates, key=lambda t: (t[0], t[1]))
    x = x.copy()

    flat = _local_frames(patch.world, orient)
    arap = _ArapSolver(patch, flat) if patch.n_local > 1 else None
    gd_step = 1e-3
    for _ in range(iterations):
        accepted = False
        if arap is not None:
            prop = arap.step(x)
            alpha = 1.0
            for _ in range(12):
                cand = x + alpha * (prop - x)
                if energy.valid(cand):
                    e_new = energy.value(cand)
                    if e_new <= e_cur:
                        if e_new < e_cur:
                            x, e_cur, accepted = cand, e_new, True
                        break
                alpha *= 0.5
        if not accepted:
            g = energy.grad(x)
            gnorm = np.abs(g).max()
            if gnorm > 0:
                step = gd_step
                for _ in range(30):
                    cand = x - step * g / gnorm
                    if energy.valid(cand):
                        e_new = energy.value(cand)
                        if e_new < e_cur:
                            x, e_cur = cand, e_new
                            gd_step = step * 1.5
                            break
                    step *= 0.5
        if trace is not None:
            trace.append(other + e_cur)

    placed = _fit_into_rect(x, rect)
    new_uv = mesh.uv.copy()
    new_uv[patch.faces] = placed[patch.corner_vid]
    return mesh.replace(uv=new_uv)
