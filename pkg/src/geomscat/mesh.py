"""Closed triangle meshes: loading, synthesis, symmetries, and signal pullback.

A mesh here is always a closed (watertight), connected 2-manifold surface;
validation enforces this because the FEM operators downstream divide by
triangle areas and assume every edge has exactly two incident faces.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.sparse import coo_matrix, csr_matrix
from scipy.sparse.csgraph import connected_components
from scipy.spatial import cKDTree


class MeshError(ValueError):
    """Raised when a mesh violates a structural invariant."""


DEGENERATE_AREA_FACTOR = 1e-12  # faces below this fraction of the mean area are rejected


@dataclass(frozen=True)
class TriangleMesh:
    """Immutable triangle mesh with ``(n_v, 3)`` vertices and ``(n_f, 3)`` faces.

    Construction only checks array shapes; call :func:`validate` (all
    generators and loaders in this module do) to enforce the closed-manifold
    invariants.
    """

    vertices: np.ndarray
    faces: np.ndarray
    name: str = ""

    def __post_init__(self):
        v = np.ascontiguousarray(np.asarray(self.vertices, dtype=np.float64))
        f = np.ascontiguousarray(np.asarray(self.faces, dtype=np.int64))
        if v.ndim != 2 or v.shape[1] != 3:
            raise MeshError(f"vertices must be (n_v, 3), got {v.shape}")
        if f.ndim != 2 or f.shape[1] != 3:
            raise MeshError(f"faces must be (n_f, 3), got {f.shape}")
        object.__setattr__(self, "vertices", v)
        object.__setattr__(self, "faces", f)

    @property
    def n_vertices(self) -> int:
        return self.vertices.shape[0]

    @property
    def n_faces(self) -> int:
        return self.faces.shape[0]

    def face_areas(self) -> np.ndarray:
        a, b, c = (self.vertices[self.faces[:, k]] for k in range(3))
        return 0.5 * np.linalg.norm(np.cross(b - a, c - a), axis=1)

    def surface_area(self) -> float:
        return float(self.face_areas().sum())

    def edges(self) -> np.ndarray:
        """Unique undirected edges as a sorted (n_e, 2) index array."""
        e = np.vstack([self.faces[:, [0, 1]], self.faces[:, [1, 2]], self.faces[:, [2, 0]]])
        e.sort(axis=1)
        return np.unique(e, axis=0)

    def edge_lengths(self) -> np.ndarray:
        e = self.edges()
        return np.linalg.norm(self.vertices[e[:, 0]] - self.vertices[e[:, 1]], axis=1)

    def validation_report(self) -> list[str]:
        """Line-oriented report of violated invariants; empty means valid."""
        problems = []
        f = self.faces
        if f.size and (f.min() < 0 or f.max() >= self.n_vertices):
            problems.append("face index out of range [0, n_v)")
            return problems  # further checks would index out of bounds
        if not np.isfinite(self.vertices).all():
            problems.append("non-finite vertex coordinate")
            return problems
        if (f[:, 0] == f[:, 1]).any() or (f[:, 1] == f[:, 2]).any() or (f[:, 0] == f[:, 2]).any():
            problems.append("face with repeated vertex index")
            return problems
        areas = self.face_areas()
        if self.n_faces:
            bad = np.nonzero(areas < DEGENERATE_AREA_FACTOR * areas.mean())[0]
            if bad.size:
                problems.append(f"degenerate face(s) with ~zero area: {bad[:8].tolist()}")
        e = np.vstack([f[:, [0, 1]], f[:, [1, 2]], f[:, [2, 0]]])
        e.sort(axis=1)
        uniq, counts = np.unique(e, axis=0, return_counts=True)
        if (counts == 1).any():
            problems.append(f"boundary edge (shared by 1 face): {uniq[counts == 1][:4].tolist()}")
        if (counts > 2).any():
            problems.append(f"non-manifold edge (shared by >2 faces): {uniq[counts > 2][:4].tolist()}")
        adj = coo_matrix(
            (np.ones(len(e)), (e[:, 0], e[:, 1])), shape=(self.n_vertices, self.n_vertices)
        )
        n_comp, _ = connected_components(adj + adj.T, directed=False)
        if n_comp != 1:
            problems.append(f"mesh has {n_comp} connected components, expected 1")
        return problems

    def validate(self) -> "TriangleMesh":
        problems = self.validation_report()
        if problems:
            raise MeshError(f"invalid mesh '{self.name}': " + "; ".join(problems))
        return self

    def transformed(self, rotation: np.ndarray | None = None,
                    translation: np.ndarray | None = None,
                    name: str | None = None) -> "TriangleMesh":
        """Rigidly transformed copy (vertex and face order preserved)."""
        v = self.vertices
        if rotation is not None:
            v = v @ np.asarray(rotation, dtype=np.float64).T
        if translation is not None:
            v = v + np.asarray(translation, dtype=np.float64)
        return TriangleMesh(v, self.faces, self.name if name is None else name)


# ---------------------------------------------------------------------------
# OFF interchange

def load_off(path) -> TriangleMesh:
    """Read an ASCII OFF file into a validated :class:`TriangleMesh`.

    Only triangle faces are accepted; comment lines (``#``) and blank lines
    are skipped. Vertex order is preserved from the file.
    """
    with open(path, "r") as fh:
        tokens = []
        for line in fh:
            line = line.split("#", 1)[0].strip()
            if line:
                tokens.extend(line.split())
    if not tokens or tokens[0] != "OFF":
        raise MeshError(f"{path}: missing OFF header")
    try:
        n_v, n_f = int(tokens[1]), int(tokens[2])
        int(tokens[3])  # edge count, ignored
    except (IndexError, ValueError) as exc:
        raise MeshError(f"{path}: malformed counts line") from exc
    pos = 4
    if len(tokens) < pos + 3 * n_v:
        raise MeshError(f"{path}: unexpected end of vertex data")
    try:
        vertices = np.array(tokens[pos:pos + 3 * n_v], dtype=np.float64).reshape(n_v, 3)
    except ValueError as exc:
        raise MeshError(f"{path}: non-numeric vertex coordinate") from exc
    pos += 3 * n_v
    faces = np.empty((n_f, 3), dtype=np.int64)
    for i in range(n_f):
        if pos >= len(tokens):
            raise MeshError(f"{path}: unexpected end of face data")
        arity = int(tokens[pos])
        if arity != 3:
            raise MeshError(f"{path}: non-triangle face (arity {arity}) at face {i}")
        faces[i] = [int(t) for t in tokens[pos + 1:pos + 4]]
        pos += 4
    name = str(path).rsplit("/", 1)[-1].rsplit(".", 1)[0]
    return TriangleMesh(vertices, faces, name).validate()


def save_off(mesh: TriangleMesh, path) -> None:
    """Write an ASCII OFF file with 17 significant digits per coordinate."""
    with open(path, "w") as fh:
        fh.write("OFF\n")
        fh.write(f"{mesh.n_vertices} {mesh.n_faces} 0\n")
        for v in mesh.vertices:
            fh.write(f"{v[0]:.17g} {v[1]:.17g} {v[2]:.17g}\n")
        for f in mesh.faces:
            fh.write(f"3 {f[0]} {f[1]} {f[2]}\n")


# ---------------------------------------------------------------------------
# Generators

def icosphere(subdivisions: int, radius: float = 1.0) -> TriangleMesh:
    """Icosahedron subdivided ``subdivisions`` times, projected to a sphere.

    Vertex count is ``10 * 4**subdivisions + 2``.
    """
    if not 0 <= subdivisions <= 7:
        raise ValueError("subdivisions must be in [0, 7]")
    if radius <= 0:
        raise ValueError("radius must be positive")
    phi = (1.0 + np.sqrt(5.0)) / 2.0
    verts = np.array([
        [-1, phi, 0], [1, phi, 0], [-1, -phi, 0], [1, -phi, 0],
        [0, -1, phi], [0, 1, phi], [0, -1, -phi], [0, 1, -phi],
        [phi, 0, -1], [phi, 0, 1], [-phi, 0, -1], [-phi, 0, 1],
    ], dtype=np.float64)
    faces = np.array([
        [0, 11, 5], [0, 5, 1], [0, 1, 7], [0, 7, 10], [0, 10, 11],
        [1, 5, 9], [5, 11, 4], [11, 10, 2], [10, 7, 6], [7, 1, 8],
        [3, 9, 4], [3, 4, 2], [3, 2, 6], [3, 6, 8], [3, 8, 9],
        [4, 9, 5], [2, 4, 11], [6, 2, 10], [8, 6, 7], [9, 8, 1],
    ], dtype=np.int64)
    verts = list(verts / np.linalg.norm(verts[0]))
    for _ in range(subdivisions):
        midpoint: dict[tuple[int, int], int] = {}

        def mid(i, j):
            key = (i, j) if i < j else (j, i)
            if key not in midpoint:
                m = verts[i] + verts[j]
                verts.append(m / np.linalg.norm(m))
                midpoint[key] = len(verts) - 1
            return midpoint[key]

        new_faces = []
        for a, b, c in faces:
            ab, bc, ca = mid(a, b), mid(b, c), mid(c, a)
            new_faces.extend([[a, ab, ca], [b, bc, ab], [c, ca, bc], [ab, bc, ca]])
        faces = np.array(new_faces, dtype=np.int64)
    v = np.array(verts)
    v *= radius / np.linalg.norm(v, axis=1, keepdims=True)
    return TriangleMesh(v, faces, f"icosphere{subdivisions}").validate()


def torus(n_major: int, n_minor: int, R: float, r: float) -> TriangleMesh:
    """Torus of revolution sampled on an ``n_major x n_minor`` grid.

    Each grid quad is split into two triangles; the result is closed and
    connected with ``n_major * n_minor`` vertices.
    """
    if n_major < 3 or n_minor < 3:
        raise ValueError("n_major and n_minor must be >= 3")
    if not 0 < r < R:
        raise ValueError("need 0 < r < R")
    theta = 2.0 * np.pi * np.arange(n_major) / n_major
    phi = 2.0 * np.pi * np.arange(n_minor) / n_minor
    T, P = np.meshgrid(theta, phi, indexing="ij")
    ring = R + r * np.cos(P)
    v = np.stack([ring * np.cos(T), ring * np.sin(T), r * np.sin(P)], axis=-1).reshape(-1, 3)
    faces = []
    for i in range(n_major):
        for j in range(n_minor):
            a = i * n_minor + j
            b = ((i + 1) % n_major) * n_minor + j
            c = ((i + 1) % n_major) * n_minor + (j + 1) % n_minor
            d = i * n_minor + (j + 1) % n_minor
            faces.append([a, b, c])
            faces.append([a, c, d])
    return TriangleMesh(v, np.array(faces, dtype=np.int64), f"torus{n_major}x{n_minor}").validate()


def tetrahedron(edge: float = 1.0) -> TriangleMesh:
    """Regular tetrahedron with the given edge length (smallest closed mesh)."""
    v = np.array([[1, 1, 1], [1, -1, -1], [-1, 1, -1], [-1, -1, 1]], dtype=np.float64)
    v *= edge / np.sqrt(8.0)  # vertex pairs are at distance sqrt(8) in the unit cube frame
    f = np.array([[0, 1, 2], [0, 3, 1], [0, 2, 3], [1, 3, 2]], dtype=np.int64)
    return TriangleMesh(v, f, "tetrahedron").validate()


# ---------------------------------------------------------------------------
# Discrete isometries

@dataclass(frozen=True)
class VertexPermutation:
    """Bijection on vertex indices representing an exact discrete isometry.

    ``mapping[i]`` is the vertex that vertex ``i`` is carried to.
    """

    mapping: np.ndarray

    def __post_init__(self):
        m = np.asarray(self.mapping, dtype=np.int64)
        if np.sort(m).tolist() != list(range(len(m))):
            raise ValueError("mapping is not a permutation")
        object.__setattr__(self, "mapping", m)

    def __len__(self) -> int:
        return len(self.mapping)

    def inverse(self) -> "VertexPermutation":
        inv = np.empty_like(self.mapping)
        inv[self.mapping] = np.arange(len(self.mapping))
        return VertexPermutation(inv)

    def apply(self, signal: np.ndarray) -> np.ndarray:
        """Transport a vertex signal: output at ``mapping[i]`` is ``signal[i]``.

        This realizes the operator f -> f o zeta^{-1} for the isometry zeta
        the permutation represents. Works on (n_v,) or (n_v, m) arrays.
        """
        out = np.empty_like(np.asarray(signal, dtype=np.float64))
        out[self.mapping] = signal
        return out

    def is_identity(self) -> bool:
        return bool((self.mapping == np.arange(len(self.mapping))).all())

    def preserves_edge_lengths(self, mesh: TriangleMesh, tol: float = 1e-9) -> bool:
        e = mesh.edges()
        orig = np.linalg.norm(mesh.vertices[e[:, 0]] - mesh.vertices[e[:, 1]], axis=1)
        m = self.mapping
        mapped = np.linalg.norm(mesh.vertices[m[e[:, 0]]] - mesh.vertices[m[e[:, 1]]], axis=1)
        return bool(np.max(np.abs(orig - mapped)) <= tol * max(1.0, orig.max()))


def _orthonormal_frame(a: np.ndarray, b: np.ndarray) -> np.ndarray | None:
    u1 = a / np.linalg.norm(a)
    b_perp = b - (b @ u1) * u1
    n = np.linalg.norm(b_perp)
    if n < 1e-12 * np.linalg.norm(b):
        return None
    u2 = b_perp / n
    return np.column_stack([u1, u2, np.cross(u1, u2)])


def symmetry_permutations(mesh: TriangleMesh, tolerance: float = 1e-6) -> list[VertexPermutation]:
    """All vertex permutations induced by rotations mapping the vertex set to itself.

    Candidate rotations are built by aligning an anchor vertex pair with every
    compatible pair (point-set registration); a candidate is kept when it maps
    every vertex onto a vertex within ``tolerance`` and maps the face set to
    itself. The identity is always included. Only proper rotations
    (determinant +1) about the vertex centroid are searched.
    """
    X = mesh.vertices - mesh.vertices.mean(axis=0)
    n = len(X)
    r = np.linalg.norm(X, axis=1)
    scale = float(r.max())
    tree = cKDTree(X)
    face_set = {tuple(sorted(f)) for f in mesh.faces.tolist()}

    i0 = int(np.argmax(r))
    cross0 = np.linalg.norm(np.cross(X[i0], X), axis=1)
    i1 = int(np.argmax(cross0))
    frame0 = _orthonormal_frame(X[i0], X[i1])
    found: dict[tuple, VertexPermutation] = {}
    identity = VertexPermutation(np.arange(n))
    found[tuple(identity.mapping)] = identity
    if frame0 is None:
        return list(found.values())

    d01 = X[i0] @ X[i1]
    cand0 = np.nonzero(np.abs(r - r[i0]) <= tolerance)[0]
    pair_tol = max(tolerance * scale * 4.0, 1e-12)
    for c0 in cand0:
        dots = X @ X[c0]
        cand1 = np.nonzero((np.abs(r - r[i1]) <= tolerance) & (np.abs(dots - d01) <= pair_tol))[0]
        for c1 in cand1:
            frame = _orthonormal_frame(X[c0], X[c1])
            if frame is None:
                continue
            rot = frame @ frame0.T
            if abs(np.linalg.det(rot) - 1.0) > 1e-6:
                continue
            dist, idx = tree.query(X @ rot.T, k=1)
            if dist.max() > tolerance * max(1.0, scale):
                continue
            if len(np.unique(idx)) != n:
                continue
            mapped_faces = {tuple(sorted(t)) for t in idx[mesh.faces].tolist()}
            if mapped_faces != face_set:
                continue
            found.setdefault(tuple(idx), VertexPermutation(idx))
    return list(found.values())


# ---------------------------------------------------------------------------
# Pullback of signals under warps (V_zeta for non-permutation diffeomorphisms)

def _closest_points_on_faces(points: np.ndarray, tri: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Closest point on each triangle for each query point.

    Returns (closest, bary) with shapes (n_q, n_f, 3); vectorized version of
    the classic region-based point/triangle test.
    """
    a, b, c = tri[:, 0], tri[:, 1], tri[:, 2]
    ab = b - a
    ac = c - a
    p = points[:, None, :]
    ap = p - a[None, :, :]
    d1 = np.einsum("fk,qfk->qf", ab, ap)
    d2 = np.einsum("fk,qfk->qf", ac, ap)
    bp = p - b[None, :, :]
    d3 = np.einsum("fk,qfk->qf", ab, bp)
    d4 = np.einsum("fk,qfk->qf", ac, bp)
    cp = p - c[None, :, :]
    d5 = np.einsum("fk,qfk->qf", ab, cp)
    d6 = np.einsum("fk,qfk->qf", ac, cp)

    va = d3 * d6 - d5 * d4
    vb = d5 * d2 - d1 * d6
    vc = d1 * d4 - d3 * d2
    denom_ab = d1 - d3
    denom_ac = d2 - d6
    denom_bc = (d4 - d3) + (d5 - d6)
    with np.errstate(divide="ignore", invalid="ignore"):
        v_ab = np.where(denom_ab != 0, d1 / denom_ab, 0.0)
        w_ac = np.where(denom_ac != 0, d2 / denom_ac, 0.0)
        w_bc = np.where(denom_bc != 0, (d4 - d3) / denom_bc, 0.0)
        denom_in = va + vb + vc
        v_in = np.where(denom_in != 0, vb / denom_in, 0.0)
        w_in = np.where(denom_in != 0, vc / denom_in, 0.0)

    n_q, n_f = d1.shape
    u = np.empty((n_q, n_f))
    v = np.empty((n_q, n_f))
    # interior case by default
    u[:] = 1.0 - v_in - w_in
    v[:] = v_in
    w = 1.0 - u - v
    # edge BC region
    m = (va <= 0) & ((d4 - d3) >= 0) & ((d5 - d6) >= 0)
    u[m], v[m], w[m] = 0.0, (1.0 - w_bc)[m], w_bc[m]
    # edge AC region
    m = (vb <= 0) & (d2 >= 0) & (d6 <= 0)
    u[m], v[m], w[m] = (1.0 - w_ac)[m], 0.0, w_ac[m]
    # edge AB region
    m = (vc <= 0) & (d1 >= 0) & (d3 <= 0)
    u[m], v[m], w[m] = (1.0 - v_ab)[m], v_ab[m], 0.0
    # vertex regions
    m = (d1 <= 0) & (d2 <= 0)
    u[m], v[m], w[m] = 1.0, 0.0, 0.0
    m = (d3 >= 0) & (d4 <= d3)
    u[m], v[m], w[m] = 0.0, 1.0, 0.0
    m = (d6 >= 0) & (d5 <= d6)
    u[m], v[m], w[m] = 0.0, 0.0, 1.0

    bary = np.stack([u, v, w], axis=-1)
    closest = np.einsum("qfj,fjk->qfk", bary, tri)
    return closest, bary


def pullback_matrix(mesh: TriangleMesh, points: np.ndarray,
                    chunk: int = 256) -> tuple[csr_matrix, np.ndarray]:
    """Sparse interpolation operator sampling vertex signals at 3D points.

    Each query point is projected to its closest point on the surface
    (ties between equidistant faces break toward the lowest face index) and
    the row holds the barycentric weights in that face. Returns the operator
    and the per-point projection distances.
    """
    points = np.atleast_2d(np.asarray(points, dtype=np.float64))
    tri = mesh.vertices[mesh.faces]
    rows, cols, vals = [], [], []
    dists = np.empty(len(points))
    for start in range(0, len(points), chunk):
        blk = points[start:start + chunk]
        closest, bary = _closest_points_on_faces(blk, tri)
        d2 = ((blk[:, None, :] - closest) ** 2).sum(axis=-1)
        best = np.argmin(d2, axis=1)
        sel = np.arange(len(blk))
        dists[start:start + len(blk)] = np.sqrt(d2[sel, best])
        weights = bary[sel, best]
        face_idx = mesh.faces[best]
        rows.append(np.repeat(np.arange(start, start + len(blk)), 3))
        cols.append(face_idx.ravel())
        vals.append(weights.ravel())
    P = coo_matrix(
        (np.concatenate(vals), (np.concatenate(rows), np.concatenate(cols))),
        shape=(len(points), mesh.n_vertices),
    ).tocsr()
    P.sum_duplicates()
    return P, dists


def pullback(mesh: TriangleMesh, signal: np.ndarray, warp: np.ndarray,
             max_distance: float | None = None) -> np.ndarray:
    """Sample ``signal`` at the warped vertex locations ``warp``.

    ``warp[i]`` is the point at which the output value for vertex ``i`` is
    taken, so passing ``warp = zeta^{-1}(vertices)`` realizes the deformation
    operator f -> f o zeta^{-1}. Exact when warp maps vertices to vertices;
    otherwise barycentric interpolation inside the closest face.
    """
    warp = np.asarray(warp, dtype=np.float64)
    if warp.shape != (mesh.n_vertices, 3):
        raise ValueError(f"warp must be (n_v, 3), got {warp.shape}")
    if max_distance is None:
        ext = mesh.vertices.max(axis=0) - mesh.vertices.min(axis=0)
        max_distance = 0.1 * float(np.linalg.norm(ext))
    P, dists = pullback_matrix(mesh, warp)
    bad = np.nonzero(dists > max_distance)[0]
    if bad.size:
        raise MeshError(
            f"warp points too far from surface (>{max_distance:g}) at indices {bad[:10].tolist()}"
        )
    return P @ np.asarray(signal, dtype=np.float64)


# ---------------------------------------------------------------------------
# Warp families used by the stability probes

def rotation_about_axis(axis: np.ndarray, angle: float) -> np.ndarray:
    """Rotation matrix about ``axis`` by ``angle`` (Rodrigues)."""
    u = np.asarray(axis, dtype=np.float64)
    u = u / np.linalg.norm(u)
    K = np.array([[0, -u[2], u[1]], [u[2], 0, -u[0]], [-u[1], u[0], 0]])
    return np.eye(3) + np.sin(angle) * K + (1 - np.cos(angle)) * (K @ K)


def latitude_twist(points: np.ndarray, amplitude: float) -> np.ndarray:
    """Twist about the z axis with latitude-dependent angle ``amplitude * z``.

    Preserves z, so the map is exactly invertible by negating the amplitude;
    it is a genuine non-isometric diffeomorphism of a sphere for amplitude != 0.
    """
    p = np.asarray(points, dtype=np.float64)
    ang = amplitude * p[:, 2]
    ca, sa = np.cos(ang), np.sin(ang)
    out = p.copy()
    out[:, 0] = ca * p[:, 0] - sa * p[:, 1]
    out[:, 1] = sa * p[:, 0] + ca * p[:, 1]
    return out
