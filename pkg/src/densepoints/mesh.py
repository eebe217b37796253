"""Triangle meshes: OBJ ingestion, primitive shapes and uniform surface sampling."""

from __future__ import annotations

import hashlib
from dataclasses import dataclass

import numpy as np

from ._validation import ContractViolation, DegenerateMeshError, MeshIndexError, ParseError

SAMPLE_CHUNK = 65536

# OBJ statements that carry nothing we use.
_IGNORED = {"vt", "vn", "vp", "o", "g", "s", "usemtl", "mtllib", "l", "p"}


@dataclass(frozen=True, eq=False)
class TriangleMesh:
    vertices: np.ndarray
    triangles: np.ndarray

    def __post_init__(self):
        v = np.asarray(self.vertices, dtype=np.float64).reshape(-1, 3)
        f = np.asarray(self.triangles, dtype=np.int64).reshape(-1, 3)
        if not np.all(np.isfinite(v)):
            raise ContractViolation("mesh vertices must be finite")
        if len(f) and (f.min() < 0 or f.max() >= len(v)):
            raise MeshIndexError("triangle index out of range")
        if np.any((f[:, 0] == f[:, 1]) | (f[:, 1] == f[:, 2]) | (f[:, 0] == f[:, 2])):
            raise ContractViolation("triangles must reference three distinct vertices")
        object.__setattr__(self, "vertices", v)
        object.__setattr__(self, "triangles", f)

    def triangle_areas(self):
        a, b, c = (self.vertices[self.triangles[:, i]] for i in range(3))
        return 0.5 * np.linalg.norm(np.cross(b - a, c - a), axis=1)

    @property
    def degenerate(self):
        """Boolean flag per triangle: zero area."""
        return self.triangle_areas() == 0.0

    def digest(self):
        h = hashlib.sha256()
        h.update(np.ascontiguousarray(self.vertices, dtype="<f8").tobytes())
        h.update(np.ascontiguousarray(self.triangles, dtype="<i8").tobytes())
        return h.hexdigest()


@dataclass(frozen=True, eq=False)
class SurfaceSamples:
    points: np.ndarray
    digest: str
    seed: int


def load_obj(stream):
    """Parse the ``v x y z`` / ``f i j k ...`` subset of Wavefront OBJ.

    Polygons with more than three corners are fan-triangulated around their
    first corner.  ``f`` tokens of the form ``i/j/k`` use the vertex index.
    """
    if isinstance(stream, str):
        stream = stream.splitlines()
    vertices = []
    faces = []
    face_lines = []
    for lineno, raw in enumerate(stream, start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        key, *rest = line.split()
        if key == "v":
            if len(rest) not in (3, 4):
                raise ParseError("vertex needs 3 coordinates", line=lineno)
            try:
                vertices.append([float(x) for x in rest[:3]])
            except ValueError:
                raise ParseError(f"bad vertex coordinate in {raw.strip()!r}", line=lineno) from None
        elif key == "f":
            if len(rest) < 3:
                raise ParseError("face needs at least 3 vertices", line=lineno)
            try:
                idx = [int(tok.split("/", 1)[0]) for tok in rest]
            except ValueError:
                raise ParseError(f"bad face index in {raw.strip()!r}", line=lineno) from None
            if len(set(idx)) != len(idx):
                raise ParseError("face repeats a vertex", line=lineno)
            for j in range(1, len(idx) - 1):
                faces.append((idx[0], idx[j], idx[j + 1]))
                face_lines.append(lineno)
        elif key in _IGNORED:
            continue
        else:
            raise ParseError(f"unsupported statement {key!r}", line=lineno)

    n = len(vertices)
    for face, lineno in zip(faces, face_lines):
        for i in face:
            if not 1 <= i <= n:
                raise MeshIndexError(f"vertex index {i} out of range (have {n})", line=lineno)
    tri = np.asarray(faces, dtype=np.int64).reshape(-1, 3) - 1
    return TriangleMesh(np.asarray(vertices, dtype=np.float64).reshape(-1, 3), tri)


def surface_area(mesh):
    return float(mesh.triangle_areas().sum())


def densify(mesh, count, seed):
    """Draw ``count`` uniform samples from the mesh surface.

    Triangles are picked with probability proportional to area through a
    cumulative-area table; the point inside is placed with folded uniform
    barycentric coordinates.  Samples are generated in fixed-size chunks
    whose generator is seeded with ``seed ^ chunk_index``.
    """
    if count <= 0:
        raise ContractViolation("count must be positive")
    areas = mesh.triangle_areas()
    cum = np.cumsum(areas)
    total = cum[-1] if len(cum) else 0.0
    if not total > 0:
        raise DegenerateMeshError("mesh has zero surface area")

    verts, tris = mesh.vertices, mesh.triangles
    out = np.empty((count, 3))
    for chunk, start in enumerate(range(0, count, SAMPLE_CHUNK)):
        n = min(SAMPLE_CHUNK, count - start)
        rng = np.random.default_rng(seed ^ chunk)
        # (0, total] so that side="left" never selects a zero-area triangle
        r = (1.0 - rng.random(n)) * total
        face = np.minimum(np.searchsorted(cum, r, side="left"), len(cum) - 1)
        uv = rng.random((n, 2))
        fold = uv.sum(axis=1) > 1.0
        uv[fold] = 1.0 - uv[fold]
        a, b, c = (verts[tris[face, i]] for i in range(3))
        out[start : start + n] = a + uv[:, :1] * (b - a) + uv[:, 1:] * (c - a)
    return SurfaceSamples(out, mesh.digest(), int(seed))


def unit_cube(size=1.0):
    """Axis-aligned cube of edge ``size`` centered at the origin, 12 triangles."""
    h = size / 2.0
    v = np.array(
        [[x, y, z] for x in (-h, h) for y in (-h, h) for z in (-h, h)], dtype=np.float64
    )
    # vertex index = 4*ix + 2*iy + iz
    quads = [
        (0, 1, 3, 2),  # x = -h
        (4, 6, 7, 5),  # x = +h
        (0, 4, 5, 1),  # y = -h
        (2, 3, 7, 6),  # y = +h
        (0, 2, 6, 4),  # z = -h
        (1, 5, 7, 3),  # z = +h
    ]
    tris = []
    for a, b, c, d in quads:
        tris += [(a, b, c), (a, c, d)]
    return TriangleMesh(v, np.array(tris))


def icosphere(subdivisions=3, radius=1.0):
    """Icosahedron refined ``subdivisions`` times with vertices pushed to the sphere."""
    t = (1.0 + 5.0**0.5) / 2.0
    verts = [
        (-1, t, 0), (1, t, 0), (-1, -t, 0), (1, -t, 0),
        (0, -1, t), (0, 1, t), (0, -1, -t), (0, 1, -t),
        (t, 0, -1), (t, 0, 1), (-t, 0, -1), (-t, 0, 1),
    ]
    faces = [
        (0, 11, 5), (0, 5, 1), (0, 1, 7), (0, 7, 10), (0, 10, 11),
        (1, 5, 9), (5, 11, 4), (11, 10, 2), (10, 7, 6), (7, 1, 8),
        (3, 9, 4), (3, 4, 2), (3, 2, 6), (3, 6, 8), (3, 8, 9),
        (4, 9, 5), (2, 4, 11), (6, 2, 10), (8, 6, 7), (9, 8, 1),
    ]
    verts = [np.array(p, dtype=np.float64) / np.linalg.norm(p) for p in verts]
    for _ in range(subdivisions):
        cache = {}

        def midpoint(i, j):
            key = (min(i, j), max(i, j))
            if key not in cache:
                m = verts[i] + verts[j]
                verts.append(m / np.linalg.norm(m))
                cache[key] = len(verts) - 1
            return cache[key]

        refined = []
        for a, b, c in faces:
            ab, bc, ca = midpoint(a, b), midpoint(b, c), midpoint(c, a)
            refined += [(a, ab, ca), (b, bc, ab), (c, ca, bc), (ab, bc, ca)]
        faces = refined
    return TriangleMesh(np.array(verts) * radius, np.array(faces))
