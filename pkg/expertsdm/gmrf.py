"""Sparse precision matrices, Cholesky factors and GMRF densities.

The barrier precision is the lumped-mass finite-element discretization of
the two-region SPDE: water triangles carry range r, land triangles carry
r_b = fraction * r. The BYM precision is tau_u R + tau_v I over a
neighbor graph.
"""

import re
import logging
from collections import OrderedDict
import numpy as np
import scipy.linalg
from scipy import sparse

from expertsdm.exceptions import InputError, NotPositiveDefinite
from expertsdm.util import float_text

try:
    from sksparse.cholmod import cholesky as _cholmod_cholesky
    from sksparse.cholmod import CholmodNotPositiveDefiniteError
    HAVE_CHOLMOD = True
except ImportError:
    HAVE_CHOLMOD = False

JITTER = 1e-10
JITTER_MAX = 1e-6
BARRIER_CACHE_SIZE = 32


class BarrierHyper():

    def __init__(self, sigma_phi, range_r, barrier_fraction=0.2):
        if not sigma_phi > 0:
            raise InputError(f"Barrier sigma must be positive, got {sigma_phi}")
        if not range_r > 0:
            raise InputError(f"Barrier range must be positive, got {range_r}")
        if not 0 < barrier_fraction < 1:
            raise InputError(f"Barrier fraction must lie in (0, 1), got {barrier_fraction}")
        self.sigma_phi = float(sigma_phi)
        self.range_r = float(range_r)
        self.barrier_fraction = float(barrier_fraction)

    def __repr__(self):
        return (f"BarrierHyper(sigma_phi={self.sigma_phi:.4g}, range_r={self.range_r:.4g}, "
                f"barrier_fraction={self.barrier_fraction:.4g})")


class BymHyper():

    def __init__(self, tau_u, tau_v):
        if not tau_u >= 0:
            raise InputError(f"BYM tau_u cannot be negative, got {tau_u}")
        if not tau_v > 0:
            raise InputError(f"BYM tau_v must be positive, got {tau_v}")
        self.tau_u = float(tau_u)
        self.tau_v = float(tau_v)

    def __repr__(self):
        return f"BymHyper(tau_u={self.tau_u:.4g}, tau_v={self.tau_v:.4g})"


_MINOR_RE = re.compile(r"(\d+)-th leading minor")

class Factor():
    """Cholesky factor Q + jitter*I = L L^T.

    Uses CHOLMOD when scikit-sparse is installed and dense LAPACK otherwise.
    """

    def __init__(self, Q, jitter=JITTER, jitter_max=JITTER_MAX):
        Q = sparse.csc_matrix(Q)
        n = Q.shape[0]
        if Q.shape != (n, n):
            raise InputError(f"Precision must be square, got shape {Q.shape}")
        self.dim = n
        diag = Q.diagonal()
        scale = float(np.max(np.abs(diag))) if n else 1.0
        if not np.isfinite(scale):
            raise NotPositiveDefinite("Precision has non-finite diagonal")
        scale = scale or 1.0

        levels = [jitter]
        step = jitter if jitter > 0 else JITTER
        while step < jitter_max:
            step = min(step * 10, jitter_max)
            levels.append(step)

        last = None
        for level in levels:
            shift = level * scale
            try:
                self._factorize(Q, shift)
            except NotPositiveDefinite as ex:
                last = ex
                logging.debug(f"Cholesky failed with jitter {shift:.3g}: {ex}")
                continue
            self.jitter = shift
            if level > jitter:
                logging.debug(f"Cholesky succeeded with jitter {shift:.3g}")
            return
        raise last

    def _factorize(self, Q, shift):
        n = self.dim
        shifted = Q + shift * sparse.identity(n, format="csc") if shift else Q
        if HAVE_CHOLMOD:
            try:
                self._chol = _cholmod_cholesky(sparse.csc_matrix(shifted))
            except CholmodNotPositiveDefiniteError as ex:
                raise NotPositiveDefinite(f"Precision is not positive definite: {ex}",
                                          getattr(ex, "column", None)) from ex
            self._L = None
        else:
            try:
                self._L = scipy.linalg.cholesky(shifted.toarray(), lower=True)
            except ValueError as ex:
                raise NotPositiveDefinite(f"Precision has non-finite entries: {ex}") from ex
            except np.linalg.LinAlgError as ex:
                m = _MINOR_RE.search(str(ex))
                minor = int(m.group(1)) if m else None
                raise NotPositiveDefinite(f"Precision is not positive definite (leading minor {minor})",
                                          minor) from ex
            self._chol = None

    def solve(self, b):
        b = np.asarray(b, dtype=float)
        if self._chol is not None:
            return self._chol(b)
        return scipy.linalg.cho_solve((self._L, True), b)

    def logdet(self):
        if self._chol is not None:
            return float(self._chol.logdet())
        return 2.0 * float(np.sum(np.log(np.diag(self._L))))

    def inv_diag(self):
        """Diagonal of the inverse."""
        if self._chol is not None:
            return np.asarray(self._chol.inv().diagonal()).ravel()
        Linv = scipy.linalg.solve_triangular(self._L, np.eye(self.dim), lower=True)
        return np.sum(Linv * Linv, axis=0)

    def quad_diag(self, B, chunk=512):
        """diag(B Q^-1 B^T) for a sparse row operator B."""
        B = sparse.csr_matrix(B)
        out = np.zeros(B.shape[0])
        for start in range(0, B.shape[0], chunk):
            rows = B[start:start + chunk]
            X = self.solve(rows.T.toarray())
            out[start:start + chunk] = np.einsum("ij,ji->i", rows.toarray(), X)
        return out

    def sample(self, z):
        """Map standard normal columns z to draws from N(0, Q^-1)."""
        z = np.asarray(z, dtype=float)
        if self._chol is not None:
            w = self._chol.solve_Lt(z, use_LDLt_decomposition=False)
            return self._chol.apply_Pt(w)
        return scipy.linalg.solve_triangular(self._L.T, z, lower=False)

def factorize(Q, jitter=JITTER, jitter_max=JITTER_MAX):
    return Factor(Q, jitter=jitter, jitter_max=jitter_max)

def bym_precision(graph, hyper):
    """Q = tau_u R + tau_v I, R the graph Laplacian."""
    n = graph.n_vertices
    R = sparse.diags(graph.degrees().astype(float)) - graph.adjacency_matrix()
    Q = hyper.tau_u * R + hyper.tau_v * sparse.identity(n)
    return sparse.csc_matrix(Q)

def fem_matrices(mesh):
    """Lumped mass and stiffness split by subdomain.

    Returns (c_water, c_land, G_water, G_land); the c are vectors of
    lumped vertex masses, the G are sparse stiffness matrices.
    """
    cache = mesh.cache()
    if "fem" in cache:
        return cache["fem"]
    n = mesh.n_vertices()
    t = mesh.triangles
    p = mesh.vertices[t]
    area = mesh.areas()
    # edge opposite each local vertex
    e = np.stack([p[:, 2] - p[:, 1], p[:, 0] - p[:, 2], p[:, 1] - p[:, 0]], axis=1)
    local = np.einsum("tik,tjk->tij", e, e) / (4.0 * area)[:, None, None]
    rows = np.repeat(t, 3, axis=1)
    cols = np.tile(t, (1, 3))

    out = []
    water = mesh.is_water()
    for mask in (water, ~water):
        c = np.bincount(t[mask].ravel(), weights=np.repeat(area[mask] / 3.0, 3), minlength=n)
        out.append(c)
    for mask in (water, ~water):
        G = sparse.csr_matrix((local[mask].ravel(), (rows[mask].ravel(), cols[mask].ravel())),
                              shape=(n, n))
        out.append(G)
    cache["fem"] = tuple(out)
    return cache["fem"]

def _barrier_unit_precision(mesh, range_r, barrier_fraction):
    c_w, c_l, G_w, G_l = fem_matrices(mesh)
    r_b = barrier_fraction * range_r
    c = c_w + c_l
    K = sparse.diags(c) + (range_r ** 2 / 8.0) * G_w + (r_b ** 2 / 8.0) * G_l
    d = (np.pi / 2.0) * (range_r ** 2 * c_w + r_b ** 2 * c_l)
    Q = K @ sparse.diags(1.0 / d) @ K
    Q = 0.5 * (Q + Q.T)
    return sparse.csc_matrix(Q)

def _barrier_variance_scale(mesh, Q_unit, hyper, jitter, jitter_max):
    """Median unit-model variance over water-interior vertices, memoized on
    the mesh per (range, fraction) with least-recently-used eviction."""
    scales = mesh.cache().setdefault("barrier_variance", OrderedDict())
    key = (hyper.range_r, hyper.barrier_fraction)
    if key in scales:
        scales.move_to_end(key)
        return scales[key]
    variance = factorize(Q_unit, jitter=jitter, jitter_max=jitter_max).inv_diag()
    interior = mesh.water_interior_vertices()
    if interior.size == 0:
        interior = np.unique(mesh.triangles[mesh.is_water()])
    scales[key] = float(np.median(variance[interior]))
    logging.debug(f"barrier variance scale at range {hyper.range_r:.4g}: {scales[key]:.4g}")
    while len(scales) > BARRIER_CACHE_SIZE:
        scales.popitem(last=False)
    return scales[key]

def barrier_precision(mesh, hyper, jitter=JITTER, jitter_max=JITTER_MAX):
    """Barrier-model precision scaled to marginal sd sigma_phi.

    The median of diag(Q^-1) over water-interior vertices is matched to
    sigma_phi**2. The unit-variance scale depends only on the range and
    fraction; the last BARRIER_CACHE_SIZE of them are memoized on the mesh.
    """
    if not np.any(mesh.is_water()):
        raise InputError("Barrier precision needs at least one water triangle")
    Q_unit = _barrier_unit_precision(mesh, hyper.range_r, hyper.barrier_fraction)
    scale = _barrier_variance_scale(mesh, Q_unit, hyper, jitter, jitter_max)
    return sparse.csc_matrix(Q_unit * (scale / hyper.sigma_phi ** 2))

def gmrf_logpdf(x, Q, jitter=JITTER, jitter_max=JITTER_MAX):
    """Log density of N(0, Q^-1) at x."""
    x = np.asarray(x, dtype=float).ravel()
    if x.size != Q.shape[0]:
        raise InputError(f"Vector of length {x.size} does not match precision of dimension {Q.shape[0]}")
    factor = factorize(Q, jitter=jitter, jitter_max=jitter_max)
    quad = float(x @ (Q @ x))
    return -0.5 * x.size * np.log(2 * np.pi) + 0.5 * factor.logdet() - 0.5 * quad

def gmrf_sample(Q, n, seed, jitter=JITTER, jitter_max=JITTER_MAX):
    """n draws from N(0, Q^-1) as an (n, dim) array."""
    factor = factorize(Q, jitter=jitter, jitter_max=jitter_max)
    rng = np.random.default_rng(seed)
    z = rng.standard_normal((Q.shape[0], int(n)))
    return np.asarray(factor.sample(z)).T

def format_precision(Q):
    upper = sparse.triu(sparse.coo_matrix(Q)).tocoo()
    order = np.lexsort((upper.col, upper.row))
    lines = [str(Q.shape[0])]
    lines.extend(f"{upper.row[k]} {upper.col[k]} {float_text(upper.data[k])}" for k in order)
    return "\n".join(lines) + "\n"

def write_precision(path, Q):
    try:
        with open(path, "w", encoding="utf-8") as f:
            f.write(format_precision(Q))
    except OSError as ex:
        raise InputError(f"Unable to write precision {path}: {ex.strerror}") from ex

def read_precision(path):
    try:
        with open(path, encoding="utf-8") as f:
            lines = [line for line in f.read().splitlines() if line.strip()]
    except OSError as ex:
        raise InputError(f"Unable to read precision {path}: {ex.strerror}") from ex
    if not lines:
        raise InputError(f"{path}: empty precision file")
    try:
        n = int(lines[0])
        entries = [line.split() for line in lines[1:]]
        rows = np.array([int(e[0]) for e in entries], dtype=np.int64)
        cols = np.array([int(e[1]) for e in entries], dtype=np.int64)
        vals = np.array([float(e[2]) for e in entries])
    except (ValueError, IndexError) as ex:
        raise InputError(f"{path}: malformed precision entry, {ex}") from ex
    if np.any(rows > cols):
        raise InputError(f"{path}: entries must come from the upper triangle")
    upper = sparse.csc_matrix((vals, (rows, cols)), shape=(n, n))
    return sparse.csc_matrix(upper + sparse.triu(upper, k=1).T)
