"""Triangular meshes over raster domains and the projection algebra.

A mesh carries a water/land label per triangle. Survey points and raster
cells reach mesh vertices through sparse barycentric projection matrices
(rows = points, columns = vertices); the row-normalized transpose carries
raster values back onto the vertices.
"""

import logging
import numpy as np
import shapely
import triangle
from scipy import sparse
from scipy.spatial import cKDTree
from shapely.geometry import Polygon, box
from shapely.ops import unary_union

from expertsdm.exceptions import InputError
from expertsdm.util import float_text, data_digest

WATER = 0
LAND = 1
_LABELS = {WATER: "water", LAND: "land"}
_LABEL_CODES = {"water": WATER, "land": LAND}

# barycentric weights at or below this are treated as zero
BARY_TOL = 1e-12


class Mesh():

    def __init__(self, vertices, triangles, subdomain=None,
                 forced_vertex=None, forced_displacement=None):
        vertices = np.array(vertices, dtype=float).reshape(-1, 2)
        triangles = np.array(triangles, dtype=np.int64).reshape(-1, 3)
        n = vertices.shape[0]
        if triangles.size and (triangles.min() < 0 or triangles.max() >= n):
            raise InputError("Mesh triangle refers to a vertex that does not exist")
        if subdomain is None:
            subdomain = np.full(triangles.shape[0], WATER, dtype=np.int8)
        subdomain = np.array(subdomain, dtype=np.int8).reshape(-1)
        if subdomain.shape[0] != triangles.shape[0]:
            raise InputError("Mesh needs exactly one subdomain label per triangle")

        area = _signed_areas(vertices, triangles)
        flip = area < 0
        if np.any(flip):
            triangles[flip] = triangles[flip][:, [0, 2, 1]]
            area = np.abs(area)
        scale = max(np.ptp(vertices[:, 0]) if n else 0.0, np.ptp(vertices[:, 1]) if n else 0.0, 1.0)
        if np.any(area <= 1e-14 * scale * scale):
            raise InputError("Mesh contains degenerate triangles")

        for a in (vertices, triangles, subdomain, area):
            a.setflags(write=False)
        self.vertices = vertices
        self.triangles = triangles
        self.subdomain = subdomain
        self._areas = area
        self.forced_vertex = (np.array(forced_vertex, dtype=np.int64)
                              if forced_vertex is not None else np.zeros(0, dtype=np.int64))
        self.forced_displacement = (np.array(forced_displacement, dtype=float)
                                    if forced_displacement is not None else np.zeros(0))
        self._cache = {}

    def __repr__(self):
        return (f"Mesh(vertices={self.n_vertices()}, triangles={self.n_triangles()}, "
                f"land={int(np.count_nonzero(self.subdomain == LAND))})")

    def n_vertices(self):
        return self.vertices.shape[0]

    def n_triangles(self):
        return self.triangles.shape[0]

    def areas(self):
        return self._areas

    def centroids(self):
        return self.vertices[self.triangles].mean(axis=1)

    def is_water(self):
        return self.subdomain == WATER

    def edges(self):
        if "edges" not in self._cache:
            t = self.triangles
            pairs = np.vstack([t[:, [0, 1]], t[:, [1, 2]], t[:, [2, 0]]])
            pairs.sort(axis=1)
            uniq, counts = np.unique(pairs, axis=0, return_counts=True)
            self._cache["edges"] = uniq
            self._cache["boundary_edges"] = uniq[counts == 1]
        return self._cache["edges"]

    def boundary_edges(self):
        self.edges()
        return self._cache["boundary_edges"]

    def edge_lengths(self):
        e = self.edges()
        return np.linalg.norm(self.vertices[e[:, 0]] - self.vertices[e[:, 1]], axis=1)

    def water_interior_vertices(self):
        """Vertices off the mesh boundary whose incident triangles are all water."""
        n = self.n_vertices()
        touches_land = np.zeros(n, dtype=bool)
        touches_land[self.triangles[~self.is_water()].ravel()] = True
        on_boundary = np.zeros(n, dtype=bool)
        on_boundary[self.boundary_edges().ravel()] = True
        used = np.zeros(n, dtype=bool)
        used[self.triangles.ravel()] = True
        return np.flatnonzero(used & ~touches_land & ~on_boundary)

    def cache(self):
        # per-mesh memo used by the precision builders
        return self._cache

    def digest(self):
        if "digest" not in self._cache:
            self._cache["digest"] = data_digest(self.vertices.tolist(),
                                                self.triangles.tolist(),
                                                self.subdomain.tolist())
        return self._cache["digest"]


class NeighborGraph():

    def __init__(self, n_vertices, edges):
        edges = np.array(edges, dtype=np.int64).reshape(-1, 2)
        if np.any(edges[:, 0] == edges[:, 1]):
            raise InputError("Neighbor graph cannot contain self-loops")
        edges = np.sort(edges, axis=1)
        edges = np.unique(edges, axis=0)
        if edges.size and (edges.min() < 0 or edges.max() >= n_vertices):
            raise InputError("Neighbor graph edge refers to a missing vertex")
        edges.setflags(write=False)
        self.n_vertices = int(n_vertices)
        self.edges = edges

    def __repr__(self):
        return f"NeighborGraph(vertices={self.n_vertices}, edges={self.edges.shape[0]})"

    def degrees(self):
        return np.bincount(self.edges.ravel(), minlength=self.n_vertices)

    def adjacency_matrix(self):
        n = self.n_vertices
        e = self.edges
        data = np.ones(2 * e.shape[0])
        rows = np.concatenate([e[:, 0], e[:, 1]])
        cols = np.concatenate([e[:, 1], e[:, 0]])
        return sparse.csr_matrix((data, (rows, cols)), shape=(n, n))


def _signed_areas(vertices, triangles):
    if triangles.shape[0] == 0:
        return np.zeros(0)
    p = vertices[triangles]
    return 0.5 * ((p[:, 1, 0] - p[:, 0, 0]) * (p[:, 2, 1] - p[:, 0, 1]) -
                  (p[:, 2, 0] - p[:, 0, 0]) * (p[:, 1, 1] - p[:, 0, 1]))

def _polygonal(geom):
    # make_valid and clipping can leave stray lines and points behind
    parts = [g for g in shapely.get_parts(geom) if g.geom_type in ("Polygon", "MultiPolygon")]
    land = unary_union(parts) if parts else Polygon()
    shapely.prepare(land)
    return land

def barrier_geometry(polygons, clip=None):
    """Union of the polygons as one repaired shapely geometry, optionally
    clipped to the (x0, y0, x1, y1) bounds."""
    parts = [shapely.make_valid(Polygon(np.asarray(p, dtype=float).reshape(-1, 2))) for p in polygons]
    land = _polygonal(unary_union(parts)) if parts else Polygon()
    if clip is not None and not land.is_empty:
        land = _polygonal(land.intersection(box(*clip)))
    return land

def points_in_polygons(points, polygons):
    """Membership in the union of the polygons; boundaries count as inside."""
    points = np.atleast_2d(np.asarray(points, dtype=float)).reshape(-1, 2)
    if len(polygons) == 0:
        return np.zeros(points.shape[0], dtype=bool)
    return shapely.intersects_xy(barrier_geometry(polygons), points[:, 0], points[:, 1])

def points_in_polygon(points, polygon):
    return points_in_polygons(points, [polygon])

def _lattice(bounds, spacing, margin):
    x0, y0, x1, y1 = bounds
    dy = spacing * np.sqrt(3) / 2
    ys = np.arange(y0 + margin, y1 - margin + 1e-9 * spacing, dy)
    rows = []
    for (k, y) in enumerate(ys):
        shift = 0.5 * spacing if k % 2 else 0.0
        xs = np.arange(x0 + margin + shift, x1 - margin + 1e-9 * spacing, spacing)
        rows.append(np.column_stack([xs, np.full(xs.shape, y)]))
    if not rows:
        return np.zeros((0, 2))
    return np.vstack(rows)

def _inside_box(points, bounds, pad=0.0):
    x0, y0, x1, y1 = bounds
    return ((points[:, 0] >= x0 - pad) & (points[:, 0] <= x1 + pad) &
            (points[:, 1] >= y0 - pad) & (points[:, 1] <= y1 + pad))

def _merge_points(points, cutoff):
    """Greedy cutoff merge in priority order; returns kept indices and, for
    every candidate, the kept candidate it collapsed into."""
    n = points.shape[0]
    merged_into = np.full(n, -1, dtype=np.int64)
    if cutoff <= 0:
        return np.arange(n), np.arange(n)
    tree = cKDTree(points)
    kept = []
    for i in range(n):
        if merged_into[i] >= 0:
            continue
        merged_into[i] = i
        kept.append(i)
        for j in tree.query_ball_point(points[i], cutoff * (1 - 1e-12)):
            if j > i and merged_into[j] < 0:
                merged_into[j] = i
    return np.array(kept, dtype=np.int64), merged_into

def _outlines(rings, land, inner, max_edge_inner, max_edge_outer):
    """Noded outline vertices and segments, ring vertices first.

    The box rings and the land boundary are unioned so that every crossing
    or shared stretch becomes a common vertex, then split so no segment is
    longer than the edge length of the zone it lies in.
    """
    lines = list(rings)
    if not land.is_empty:
        lines.append(land.boundary)
    index = {}
    vertices = []
    segments = []
    for part in shapely.get_parts(unary_union(lines)):
        midpoint = np.array(part.interpolate(0.5, normalized=True).coords[0])
        inner_zone = _inside_box(midpoint[None, :], inner, pad=1e-9 * max_edge_inner)[0]
        part = shapely.segmentize(part, max_edge_inner if inner_zone else max_edge_outer)
        ids = []
        for (x, y) in part.coords:
            key = (float(x), float(y))
            if key not in index:
                index[key] = len(vertices)
                vertices.append(key)
            ids.append(index[key])
        segments.extend((a, b) for (a, b) in zip(ids[:-1], ids[1:]) if a != b)
    vertices = np.array(vertices, dtype=float).reshape(-1, 2)
    segments = np.array(segments, dtype=np.int64).reshape(-1, 2)

    ring_lines = unary_union(list(rings))
    tol = 1e-9 * max_edge_inner
    on_ring = shapely.distance(ring_lines, shapely.points(vertices)) <= tol
    order = np.concatenate([np.flatnonzero(on_ring), np.flatnonzero(~on_ring)])
    rank = np.empty_like(order)
    rank[order] = np.arange(order.size)
    return vertices[order], rank[segments]

def build_mesh(domain, barriers=(), max_edge_inner=None, max_edge_outer=None,
               cutoff=0.0, offset_inner=0.0, offset_outer=0.0, forced_points=None):
    """Constrained Delaunay mesh over the raster extent grown by the two
    offset rings.

    The box rings and the barrier outlines (clipped to the outer box) are
    segments of the triangulation, so no triangle straddles a coastline.
    Points are seeded in priority order (outline vertices, forced points,
    then equilateral lattices at the inner and outer edge lengths) and
    merged greedily so no two retained points are closer than `cutoff`.
    No further points are inserted. Triangles whose centroid lies in a
    barrier polygon are labeled land.
    """
    x0, y0, x1, y1 = domain.extent()
    if not (x1 - x0) * (y1 - y0) > 0:
        raise InputError("Mesh domain has zero area")
    if max_edge_inner is None:
        max_edge_inner = min(x1 - x0, y1 - y0)
    if max_edge_outer is None:
        max_edge_outer = max_edge_inner
    if not 0 < max_edge_inner <= max_edge_outer:
        raise InputError(f"Need 0 < max_edge_inner <= max_edge_outer, got {max_edge_inner}, {max_edge_outer}")
    if not 0 <= cutoff < max_edge_inner:
        raise InputError(f"Need 0 <= cutoff < max_edge_inner, got cutoff {cutoff}")
    if offset_inner < 0 or offset_outer < 0:
        raise InputError("Mesh offsets cannot be negative")

    inner = (x0 - offset_inner, y0 - offset_inner, x1 + offset_inner, y1 + offset_inner)
    outer = (inner[0] - offset_outer, inner[1] - offset_outer,
             inner[2] + offset_outer, inner[3] + offset_outer)

    forced = (np.zeros((0, 2)) if forced_points is None
              else np.asarray(forced_points, dtype=float).reshape(-1, 2))
    if forced.size and not np.all(_inside_box(forced, outer, pad=1e-9 * max_edge_inner)):
        bad = forced[~_inside_box(forced, outer, pad=1e-9 * max_edge_inner)][0]
        raise InputError(f"Forced point {bad.tolist()} lies outside the extended mesh domain")

    rings = [box(*inner).exterior]
    if offset_outer > 0:
        rings.append(box(*outer).exterior)
    land = barrier_geometry(barriers, clip=outer)
    outline, outline_segments = _outlines(rings, land, inner, max_edge_inner, max_edge_outer)

    chunks = [outline, forced, _lattice(inner, max_edge_inner, 0.3 * max_edge_inner)]
    if offset_outer > 0:
        ring = _lattice(outer, max_edge_outer, 0.3 * max_edge_outer)
        chunks.append(ring[~_inside_box(ring, inner, pad=0.5 * max_edge_inner)])
    candidates = np.vstack(chunks)
    first_forced = outline.shape[0]

    kept, merged_into = _merge_points(candidates, cutoff)
    points = candidates[kept]
    position = np.full(candidates.shape[0], -1, dtype=np.int64)
    position[kept] = np.arange(kept.size)
    segments = np.sort(position[merged_into[outline_segments]], axis=1)
    segments = np.unique(segments[segments[:, 0] != segments[:, 1]], axis=0)
    logging.debug(f"build_mesh: {candidates.shape[0]} candidate points, {kept.size} kept, "
                  f"{segments.shape[0]} constraint segments")

    result = triangle.triangulate({"vertices": np.ascontiguousarray(points),
                                  "segments": segments.astype(np.int32)}, "pzQ")
    simplices = np.array(result["triangles"], dtype=np.int64).reshape(-1, 3)
    all_vertices = np.array(result["vertices"], dtype=float).reshape(-1, 2)
    if all_vertices.shape[0] > points.shape[0]:
        logging.warning(f"build_mesh: {all_vertices.shape[0] - points.shape[0]} vertices added "
                        f"where constraint segments cross")
    used = np.unique(simplices)
    if used.size != all_vertices.shape[0]:
        logging.warning(f"build_mesh: {all_vertices.shape[0] - used.size} points left out of the triangulation")
    remap = np.full(all_vertices.shape[0], -1, dtype=np.int64)
    remap[used] = np.arange(used.size)
    vertices = all_vertices[used]
    simplices = remap[simplices]

    labels = np.full(simplices.shape[0], WATER, dtype=np.int8)
    if not land.is_empty:
        centroids = vertices[simplices].mean(axis=1)
        labels[shapely.contains_xy(land, centroids[:, 0], centroids[:, 1])] = LAND

    # map forced points to the vertices they ended up on
    forced_vertex = np.zeros(forced.shape[0], dtype=np.int64)
    forced_displacement = np.zeros(forced.shape[0])
    tree = None
    for i in range(forced.shape[0]):
        v = remap[position[merged_into[first_forced + i]]]
        if v < 0:
            if tree is None:
                tree = cKDTree(vertices)
            _, v = tree.query(forced[i])
        forced_vertex[i] = v
        forced_displacement[i] = np.linalg.norm(vertices[v] - forced[i])
    moved = np.count_nonzero(forced_displacement > 0)
    if moved:
        logging.info(f"build_mesh: {moved} forced points merged within cutoff, "
                     f"largest displacement {forced_displacement.max():.3g}")

    mesh = Mesh(vertices, simplices, labels, forced_vertex, forced_displacement)
    logging.debug(f"build_mesh: {mesh}")
    return mesh

def build_uniform_mesh(domain, edge):
    """Regular equilateral-style triangulation with near-constant edges.

    Even rows span the domain exactly; odd rows are shifted half a column and
    stick out half an edge on both sides, so the union of strips covers the
    whole rectangle. Every triangle is labeled water.
    """
    x0, y0, x1, y1 = domain.extent()
    width = x1 - x0
    height = y1 - y0
    if not edge > 0:
        raise InputError(f"Uniform mesh edge must be positive, got {edge}")
    if not edge < min(width, height):
        raise InputError(f"Uniform mesh edge {edge} is not smaller than the domain extent")

    nx = max(1, int(round(width / edge)))
    ny = max(1, int(round(height / (edge * np.sqrt(3) / 2))))
    dx = width / nx
    dy = height / ny

    rows = []
    vertices = []
    for k in range(ny + 1):
        if k % 2 == 0:
            xs = x0 + dx * np.arange(nx + 1)
        else:
            xs = x0 - dx / 2 + dx * np.arange(nx + 2)
        start = len(vertices)
        vertices.extend((x, y0 + k * dy) for x in xs)
        rows.append((start, xs))

    triangles = []
    for k in range(ny):
        (lo_start, lo_xs) = rows[k]
        (up_start, up_xs) = rows[k + 1]
        i = j = 0
        while i < len(lo_xs) - 1 or j < len(up_xs) - 1:
            if j == len(up_xs) - 1 or (i < len(lo_xs) - 1 and lo_xs[i + 1] <= up_xs[j + 1]):
                triangles.append((lo_start + i, lo_start + i + 1, up_start + j))
                i += 1
            else:
                triangles.append((lo_start + i, up_start + j + 1, up_start + j))
                j += 1

    mesh = Mesh(np.array(vertices), np.array(triangles))
    logging.debug(f"build_uniform_mesh: {mesh}, dx={dx:.4g}, dy={dy:.4g}")
    return mesh

def projection_matrix(mesh, points):
    """Barycentric projection from mesh vertices to points.

    Points on shared edges go to the lowest-index containing triangle; the
    mesh boundary is inclusive. Points outside every triangle get an empty
    row.
    """
    points = np.atleast_2d(np.asarray(points, dtype=float)).reshape(-1, 2)
    k = points.shape[0]
    n = mesh.n_vertices()
    m = mesh.n_triangles()
    if k == 0 or m == 0:
        return sparse.csr_matrix((k, n))

    p = mesh.vertices[mesh.triangles]
    a = p[:, 0, :]
    t = np.stack([p[:, 1, :] - a, p[:, 2, :] - a], axis=2)
    tinv = np.linalg.inv(t)

    rows, cols, vals = [], [], []
    chunk = max(1, 2000000 // m)
    for start in range(0, k, chunk):
        q = points[start:start + chunk]
        d = q[:, None, :] - a[None, :, :]
        l23 = np.einsum("mij,kmj->kmi", tinv, d)
        l1 = 1.0 - l23[..., 0] - l23[..., 1]
        bary = np.concatenate([l1[..., None], l23], axis=2)
        inside = np.all(bary >= -BARY_TOL, axis=2)
        found = np.any(inside, axis=1)
        first = np.argmax(inside, axis=1)
        for (ix, ok) in enumerate(found):
            if not ok:
                continue
            tri = first[ix]
            w = bary[ix, tri]
            keep = w > BARY_TOL
            w = w[keep] / w[keep].sum()
            rows.extend([start + ix] * int(keep.sum()))
            cols.extend(mesh.triangles[tri][keep].tolist())
            vals.extend(w.tolist())
    A = sparse.csr_matrix((vals, (rows, cols)), shape=(k, n))
    logging.debug(f"projection_matrix: {k} points, {k - int(np.count_nonzero(A.getnnz(axis=1)))} outside the mesh")
    return A

def reverse_projection(A):
    """Row-normalized transpose: the raster-to-vertex averaging operator."""
    At = sparse.csr_matrix(A.T)
    At.eliminate_zeros()
    sums = np.asarray(At.sum(axis=1)).ravel()
    scale = np.zeros_like(sums)
    nonzero = sums > 0
    scale[nonzero] = 1.0 / sums[nonzero]
    out = sparse.diags(scale) @ At
    return sparse.csr_matrix(out)

def round_half_up(x):
    return np.floor(np.asarray(x, dtype=float) + 0.5)

def project_to_mesh(A_tilde, raster_values, categorical=False):
    """Carry raster values to mesh vertices.

    Missing (NaN) cells drop out of each vertex average and the remaining
    weights are renormalized; a vertex with no contributing cell is missing.
    Categorical values are rounded half up after averaging.
    """
    v = np.asarray(raster_values, dtype=float).ravel()
    if v.size != A_tilde.shape[1]:
        raise InputError(f"Raster has {v.size} cells but the projection expects {A_tilde.shape[1]}")
    present = ~np.isnan(v)
    num = A_tilde @ np.where(present, v, 0.0)
    den = A_tilde @ present.astype(float)
    out = np.full(A_tilde.shape[0], np.nan)
    ok = den > BARY_TOL
    out[ok] = num[ok] / den[ok]
    if categorical:
        out[ok] = np.clip(round_half_up(out[ok]), 1, 4)
    return out

def adjacency(mesh):
    return NeighborGraph(mesh.n_vertices(), mesh.edges())

def read_polygons(path):
    polygons = []
    current = []
    try:
        with open(path, encoding="utf-8") as f:
            lines = f.read().splitlines()
    except OSError as ex:
        raise InputError(f"Unable to read polygons {path}: {ex.strerror}") from ex
    for (ix, line) in enumerate(lines, start=1):
        parts = line.split()
        if not parts:
            if current:
                polygons.append(np.array(current))
                current = []
            continue
        if len(parts) != 2:
            raise InputError(f"{path}:{ix}: expected 'x y', got '{line}'")
        try:
            current.append((float(parts[0]), float(parts[1])))
        except ValueError as ex:
            raise InputError(f"{path}:{ix}: {ex}") from ex
    if current:
        polygons.append(np.array(current))
    for (ix, poly) in enumerate(polygons):
        if poly.shape[0] < 3:
            raise InputError(f"{path}: polygon {ix+1} has fewer than three vertices")
    return polygons

def format_polygons(polygons):
    blocks = []
    for poly in polygons:
        blocks.append("\n".join(f"{float_text(x)} {float_text(y)}" for (x, y) in poly))
    return "\n\n".join(blocks) + ("\n" if blocks else "")

def write_polygons(path, polygons):
    try:
        with open(path, "w", encoding="utf-8") as f:
            f.write(format_polygons(polygons))
    except OSError as ex:
        raise InputError(f"Unable to write polygons {path}: {ex.strerror}") from ex

def write_mesh(path, mesh):
    lines = ["VERTICES"]
    lines.extend(f"{float_text(x)} {float_text(y)}" for (x, y) in mesh.vertices)
    lines.append("TRIANGLES")
    lines.extend(f"{i} {j} {k} {_LABELS[int(label)]}"
                 for ((i, j, k), label) in zip(mesh.triangles, mesh.subdomain))
    try:
        with open(path, "w", encoding="utf-8") as f:
            f.write("\n".join(lines) + "\n")
    except OSError as ex:
        raise InputError(f"Unable to write mesh {path}: {ex.strerror}") from ex

def read_mesh(path):
    try:
        with open(path, encoding="utf-8") as f:
            lines = f.read().splitlines()
    except OSError as ex:
        raise InputError(f"Unable to read mesh {path}: {ex.strerror}") from ex
    section = None
    vertices, triangles, labels = [], [], []
    for (ix, line) in enumerate(lines, start=1):
        parts = line.split()
        if not parts:
            continue
        if parts[0] in ("VERTICES", "TRIANGLES"):
            section = parts[0]
            continue
        try:
            if section == "VERTICES":
                vertices.append((float(parts[0]), float(parts[1])))
            elif section == "TRIANGLES":
                triangles.append((int(parts[0]), int(parts[1]), int(parts[2])))
                labels.append(_LABEL_CODES[parts[3]])
            else:
                raise InputError(f"{path}:{ix}: data before any section header")
        except (ValueError, IndexError, KeyError) as ex:
            raise InputError(f"{path}:{ix}: malformed mesh line '{line}'") from ex
    return Mesh(np.array(vertices), np.array(triangles), np.array(labels))
