"""FEM discretization of the Laplace-Beltrami operator and its eigenbasis.

The surface Laplacian is discretized with cotangent stiffness weights and a
barycentric lumped (diagonal) mass matrix; the generalized eigenproblem
S phi = lambda M phi then yields the discrete Fourier modes of the surface.
All inner products, norms, and integrals are mass-weighted:

    <f, g> = f^T M g        ||f||_2 = <f, f>^(1/2)
    ||f||_1 = sum_i M_ii |f_i|      fhat(k) = phi_k^T M f
"""

from __future__ import annotations

import struct
from dataclasses import dataclass

import numpy as np
import scipy.linalg
import scipy.sparse as sp
import scipy.sparse.linalg as spla

from .mesh import TriangleMesh

DENSE_SOLVE_LIMIT = 4096  # above this vertex count the Lanczos path is used
COT_LIMIT = 1e8


class CacheFormatError(ValueError):
    """Raised when a basis cache file is malformed."""


class EigensolverError(RuntimeError):
    """Raised when the eigensolver fails to converge or produces bad residuals."""


def cotangent_stiffness(mesh: TriangleMesh) -> sp.csr_matrix:
    """Cotangent stiffness matrix (symmetric PSD, zero row sums).

    The off-diagonal entry for edge (i, j) is -(cot a + cot b)/2 over the two
    angles opposite the edge; diagonals make each row sum to zero.
    """
    tri = mesh.faces
    v = mesh.vertices
    rows, cols, vals = [], [], []
    for corner in range(3):
        i = tri[:, (corner + 1) % 3]
        j = tri[:, (corner + 2) % 3]
        o = tri[:, corner]
        u1 = v[i] - v[o]
        u2 = v[j] - v[o]
        cross = np.linalg.norm(np.cross(u1, u2), axis=1)
        dot = np.einsum("ij,ij->i", u1, u2)
        with np.errstate(divide="ignore"):
            cot = dot / cross
        bad = np.nonzero(~np.isfinite(cot) | (np.abs(cot) > COT_LIMIT))[0]
        if bad.size:
            raise ValueError(f"near-degenerate angle in face {int(bad[0])} (|cot| > {COT_LIMIT:g})")
        w = 0.5 * cot
        rows.extend([i, j, i, j])
        cols.extend([j, i, i, j])
        vals.extend([-w, -w, w, w])
    n = mesh.n_vertices
    S = sp.coo_matrix(
        (np.concatenate(vals), (np.concatenate(rows), np.concatenate(cols))), shape=(n, n)
    ).tocsr()
    S.sum_duplicates()
    return S


def lumped_mass(mesh: TriangleMesh) -> np.ndarray:
    """Diagonal of the barycentric lumped mass matrix (vertex areas).

    Each vertex receives one third of the area of every incident triangle, so
    the entries sum to the total surface area.
    """
    areas = mesh.face_areas()
    diag = np.zeros(mesh.n_vertices)
    np.add.at(diag, mesh.faces.ravel(), np.repeat(areas / 3.0, 3))
    if (diag <= 0).any():
        raise ValueError("lumped mass has non-positive entries (isolated vertex?)")
    return diag


@dataclass(frozen=True)
class SpectralBasis:
    """The K smallest generalized eigenpairs of the discrete Laplacian.

    ``eigenvectors[:, k]`` discretizes the k-th eigenfunction; columns are
    M-orthonormal and eigenvalues ascend with ``eigenvalues[0] == 0`` for a
    connected mesh.
    """

    eigenvalues: np.ndarray
    eigenvectors: np.ndarray
    mass: np.ndarray
    mesh_name: str = ""

    def __post_init__(self):
        object.__setattr__(self, "eigenvalues", np.asarray(self.eigenvalues, dtype=np.float64))
        object.__setattr__(self, "eigenvectors",
                           np.ascontiguousarray(self.eigenvectors, dtype=np.float64))
        object.__setattr__(self, "mass", np.asarray(self.mass, dtype=np.float64))

    @property
    def n_vertices(self) -> int:
        return self.eigenvectors.shape[0]

    @property
    def n_modes(self) -> int:
        return self.eigenvectors.shape[1]

    def truncate(self, K: int) -> "SpectralBasis":
        """Basis restricted to the K smallest eigenpairs (no recomputation)."""
        if not 1 <= K <= self.n_modes:
            raise ValueError(f"K must be in [1, {self.n_modes}]")
        return SpectralBasis(self.eigenvalues[:K], self.eigenvectors[:, :K],
                             self.mass, self.mesh_name)


def _fix_signs(vecs: np.ndarray) -> np.ndarray:
    idx = np.argmax(np.abs(vecs), axis=0)
    signs = np.sign(vecs[idx, np.arange(vecs.shape[1])])
    signs[signs == 0] = 1.0
    return vecs * signs


def eigenbasis(S: sp.spmatrix, M: np.ndarray, K: int, mesh_name: str = "") -> SpectralBasis:
    """Solve S phi = lambda M phi for the K smallest eigenpairs.

    The diagonal mass makes the similarity B = M^(-1/2) S M^(-1/2) exact, so
    a symmetric solver applies: dense up to ``DENSE_SOLVE_LIMIT`` vertices,
    shift-invert Lanczos above. Eigenvector signs are fixed so each column's
    largest-magnitude entry is positive, and near-zero eigenvalues are
    clamped to exactly zero.
    """
    n = len(M)
    if not 1 <= K <= n:
        raise ValueError(f"K must be in [1, {n}], got {K}")
    d = 1.0 / np.sqrt(M)
    if n <= DENSE_SOLVE_LIMIT:
        B = (S.toarray() * d[None, :]) * d[:, None]
        B = 0.5 * (B + B.T)
        w, V = scipy.linalg.eigh(B, subset_by_index=[0, K - 1])
    else:
        Bs = sp.diags(d) @ S @ sp.diags(d)
        try:
            w, V = spla.eigsh(Bs.tocsc(), k=K, sigma=0, which="LM")
        except spla.ArpackNoConvergence as exc:
            raise EigensolverError(f"Lanczos failed to converge: {exc}") from exc
        order = np.argsort(w)
        w, V = w[order], V[:, order]
    lam_scale = max(1.0, float(np.abs(w).max()))
    if w[0] < -1e-8 * lam_scale:
        raise EigensolverError(
            f"negative eigenvalue {w[0]:g} exceeds tolerance; min Rayleigh residual "
            f"{float(w[0] / lam_scale):g}"
        )
    w = np.maximum(w, 0.0)
    phi = _fix_signs(d[:, None] * V)
    basis = SpectralBasis(w, phi, M, mesh_name)
    resid = S @ phi - (M[:, None] * phi) * w[None, :]
    rel = np.linalg.norm(resid, axis=0) / np.maximum(np.linalg.norm(M[:, None] * phi, axis=0), 1e-30)
    worst = float(rel.max() / max(1.0, lam_scale))
    if worst > 1e-6:
        raise EigensolverError(f"eigenpair residual {worst:g} exceeds 1e-6")
    return basis


# ---------------------------------------------------------------------------
# Mass-weighted analysis and synthesis

def fourier(basis: SpectralBasis, f: np.ndarray) -> np.ndarray:
    """Fourier coefficients fhat(k) = phi_k^T M f; batched over trailing axes."""
    f = np.asarray(f, dtype=np.float64)
    return basis.eigenvectors.T @ (basis.mass[:, None] * f if f.ndim == 2
                                   else basis.mass * f)


def synthesize(basis: SpectralBasis, coeffs: np.ndarray) -> np.ndarray:
    """Inverse transform: sum_k coeffs[k] phi_k; batched over trailing axes."""
    coeffs = np.asarray(coeffs, dtype=np.float64)
    if coeffs.shape[0] != basis.n_modes:
        raise ValueError(f"expected {basis.n_modes} coefficients, got {coeffs.shape[0]}")
    return basis.eigenvectors @ coeffs


def integrate(mass: np.ndarray, f: np.ndarray) -> float | np.ndarray:
    """Surface integral of a vertex function (mass-weighted sum)."""
    out = np.asarray(f, dtype=np.float64).T @ mass
    return float(out) if np.ndim(out) == 0 else out.T


def lp_norm(mass: np.ndarray, f: np.ndarray, p: int = 2) -> float | np.ndarray:
    """Mass-weighted L1 or L2 norm of a vertex function (batched over axis 1)."""
    f = np.asarray(f, dtype=np.float64)
    if p == 1:
        out = np.abs(f).T @ mass
    elif p == 2:
        out = np.sqrt((f * f).T @ mass)
    else:
        raise ValueError("p must be 1 or 2")
    return float(out) if np.ndim(out) == 0 else out.T


def inner(mass: np.ndarray, f: np.ndarray, g: np.ndarray) -> float:
    return float(np.asarray(f) @ (mass * np.asarray(g)))


# ---------------------------------------------------------------------------
# Binary basis cache ("GSB1")

_MAGIC = b"GSB1"


def save_basis(basis: SpectralBasis, path) -> None:
    """Write the GSB1 cache: magic, u64 n_v, u64 K, then f64 arrays
    (mass diag, eigenvalues, eigenvectors column-major), all little-endian."""
    with open(path, "wb") as fh:
        fh.write(_MAGIC)
        fh.write(struct.pack("<QQ", basis.n_vertices, basis.n_modes))
        fh.write(basis.mass.astype("<f8").tobytes())
        fh.write(basis.eigenvalues.astype("<f8").tobytes())
        fh.write(np.asfortranarray(basis.eigenvectors).astype("<f8").tobytes(order="F"))


def load_basis(path, mesh_name: str = "") -> SpectralBasis:
    with open(path, "rb") as fh:
        blob = fh.read()
    if blob[:4] != _MAGIC:
        raise CacheFormatError(f"{path}: bad magic {blob[:4]!r}, expected {_MAGIC!r}")
    n_v, K = struct.unpack("<QQ", blob[4:20])
    expected = 20 + 8 * (n_v + K + n_v * K)
    if len(blob) != expected:
        raise CacheFormatError(f"{path}: size {len(blob)} != expected {expected} for n_v={n_v} K={K}")
    off = 20
    mass = np.frombuffer(blob, dtype="<f8", count=n_v, offset=off).copy()
    off += 8 * n_v
    lam = np.frombuffer(blob, dtype="<f8", count=K, offset=off).copy()
    off += 8 * K
    vecs = np.frombuffer(blob, dtype="<f8", count=n_v * K, offset=off).reshape((n_v, K), order="F")
    return SpectralBasis(lam, vecs.copy(), mass, mesh_name)
