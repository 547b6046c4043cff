"""Simplicial 2D meshes: topology, boundary labels, partitions, and layer extensions.

Meshes are triangle-only, matching, and immutable after construction. All
set-geometric machinery used by the domain-splitting integrator lives here:
non-overlapping partitions, layered cell extensions, interface strips, and
pairwise overlaps.
"""

from __future__ import annotations

import warnings
from collections import deque
from dataclasses import dataclass

import numpy as np

from .errors import LayoutError, MeshError, MshParseError, UnsupportedElementError

# boundary_label codes
INTERIOR = 0
DIRICHLET = 1
NEUMANN = 2


def _as_index_array(values) -> np.ndarray:
    arr = np.asarray(values, dtype=np.int64).ravel()
    return np.unique(arr)


class CellSet:
    """Sorted, duplicate-free set of cell indices into a mesh."""

    __slots__ = ("indices",)

    def __init__(self, indices):
        self.indices = _as_index_array(indices)
        self.indices.flags.writeable = False

    def __len__(self) -> int:
        return len(self.indices)

    def __iter__(self):
        return iter(self.indices)

    def __repr__(self):
        return f"CellSet({len(self.indices)} cells)"

    def mask(self, n_cells: int) -> np.ndarray:
        m = np.zeros(n_cells, dtype=bool)
        m[self.indices] = True
        return m

    def contains(self, cells) -> np.ndarray:
        if len(self.indices) == 0:
            return np.zeros(np.shape(cells), bool)
        pos = np.clip(np.searchsorted(self.indices, cells), 0, len(self.indices) - 1)
        return np.asarray(self.indices[pos] == cells)

    def positions(self, cells) -> np.ndarray:
        """Positions of global cell indices inside this (sorted) set."""
        pos = np.searchsorted(self.indices, cells)
        if np.any(pos >= len(self.indices)) or np.any(self.indices[np.minimum(pos, len(self.indices) - 1)] != cells):
            raise LayoutError("cell not contained in CellSet")
        return pos

    def union(self, other: "CellSet") -> "CellSet":
        return CellSet(np.union1d(self.indices, other.indices))

    def intersect(self, other: "CellSet") -> "CellSet":
        return CellSet(np.intersect1d(self.indices, other.indices))

    def difference(self, other: "CellSet") -> "CellSet":
        return CellSet(np.setdiff1d(self.indices, other.indices))

    def __eq__(self, other):
        return isinstance(other, CellSet) and np.array_equal(self.indices, other.indices)

    __hash__ = None


class Mesh:
    """Matching simplicial 2D mesh with face connectivity and per-cell wave speed.

    Faces are the unique edges of the triangulation, ordered lexicographically
    by their sorted vertex pair. ``face_cells[:, 0]`` holds the lower incident
    cell index; the second entry is -1 for boundary faces. Face normals point
    from the lower-index cell to the higher (outward on the boundary).
    """

    def __init__(self, vertices, cells, kappa=None, cell_tags=None, face_tags_by_edge=None):
        vertices = np.asarray(vertices, dtype=np.float64)
        cells = np.asarray(cells, dtype=np.int64)
        if vertices.ndim != 2 or vertices.shape[1] != 2:
            raise MeshError("vertices must be an (n, 2) array")
        if cells.ndim != 2 or cells.shape[1] != 3:
            raise MeshError("cells must be an (n, 3) array of vertex triples")
        if cells.size and (cells.min() < 0 or cells.max() >= len(vertices)):
            raise MeshError("cell vertex index out of range")
        self.vertices = vertices
        self.cells = cells
        self.n_cells = len(cells)
        self.n_vertices = len(vertices)

        if kappa is None:
            kappa = np.ones(self.n_cells)
        self.kappa = np.asarray(kappa, dtype=np.float64)
        if self.kappa.shape != (self.n_cells,):
            raise MeshError("kappa must hold one value per cell")
        if np.any(self.kappa <= 0):
            raise MeshError("kappa must be positive on every cell")

        self.cell_tags = (
            np.zeros(self.n_cells, dtype=np.int64)
            if cell_tags is None
            else np.asarray(cell_tags, dtype=np.int64)
        )

        self._build_faces()
        self._build_geometry()

        self.face_tags = np.full(self.n_faces, -1, dtype=np.int64)
        if face_tags_by_edge:
            key_to_face = {tuple(fv): f for f, fv in enumerate(self.face_vertices)}
            for edge, tag in face_tags_by_edge.items():
                key = tuple(sorted(edge))
                f = key_to_face.get(key)
                if f is None:
                    raise MeshError(f"tagged edge {edge} is not a mesh face")
                self.face_tags[f] = tag

        self.boundary_label = np.where(self.face_cells[:, 1] < 0, NEUMANN, INTERIOR).astype(np.int8)
        self._freeze()

    # -- construction ------------------------------------------------------

    def _build_faces(self):
        c = self.cells
        edges = np.concatenate([c[:, [0, 1]], c[:, [1, 2]], c[:, [2, 0]]], axis=0)
        edges_sorted = np.sort(edges, axis=1)
        # occurrence i belongs to cell i % n_cells, local edge i // n_cells
        uniq, inverse = np.unique(edges_sorted, axis=0, return_inverse=True)
        inverse = inverse.ravel()
        self.n_faces = len(uniq)
        self.face_vertices = uniq

        counts = np.bincount(inverse, minlength=self.n_faces)
        if counts.max(initial=0) > 2:
            raise MeshError("non-manifold edge: more than two incident cells")

        occ_cell = np.tile(np.arange(self.n_cells), 3)
        # group by face, cells ascending within each group
        order = np.lexsort((occ_cell, inverse))
        starts = np.zeros(self.n_faces + 1, dtype=np.int64)
        np.cumsum(counts, out=starts[1:])
        face_cells = np.full((self.n_faces, 2), -1, dtype=np.int64)
        grouped = occ_cell[order]
        face_cells[:, 0] = grouped[starts[:-1]]
        two = counts == 2
        face_cells[two, 1] = grouped[starts[:-1][two] + 1]
        self.face_cells = face_cells

        c2f = np.empty((self.n_cells, 3), dtype=np.int64)
        occ_local = np.repeat(np.arange(3), self.n_cells)
        c2f[occ_cell, occ_local] = inverse
        self.cell_to_faces = c2f

        # vertex -> incident cells (CSR layout)
        vc_counts = np.bincount(c.ravel(), minlength=self.n_vertices)
        v_offsets = np.zeros(self.n_vertices + 1, dtype=np.int64)
        np.cumsum(vc_counts, out=v_offsets[1:])
        occ_vertex = c.ravel()
        occ_vcell = np.repeat(np.arange(self.n_cells), 3)
        vorder = np.argsort(occ_vertex, kind="stable")
        self._vertex_cells = occ_vcell[vorder]
        self._vertex_offsets = v_offsets

    def _build_geometry(self):
        v = self.vertices
        c = self.cells
        p0, p1, p2 = v[c[:, 0]], v[c[:, 1]], v[c[:, 2]]
        e01 = np.linalg.norm(p1 - p0, axis=1)
        e12 = np.linalg.norm(p2 - p1, axis=1)
        e20 = np.linalg.norm(p0 - p2, axis=1)
        self.h_K = np.maximum(np.maximum(e01, e12), e20)
        det = (p1[:, 0] - p0[:, 0]) * (p2[:, 1] - p0[:, 1]) - (p1[:, 1] - p0[:, 1]) * (
            p2[:, 0] - p0[:, 0]
        )
        if np.any(det == 0):
            raise MeshError("degenerate (zero-area) cell")
        self.cell_areas = 0.5 * np.abs(det)
        self.cell_centroids = (p0 + p1 + p2) / 3.0

        fv = self.face_vertices
        q0, q1 = v[fv[:, 0]], v[fv[:, 1]]
        t = q1 - q0
        self.h_F = np.linalg.norm(t, axis=1)
        if np.any(self.h_F == 0):
            raise MeshError("zero-length face")
        self.face_midpoints = 0.5 * (q0 + q1)
        normals = np.stack([t[:, 1], -t[:, 0]], axis=1) / self.h_F[:, None]
        owner_centroid = self.cell_centroids[self.face_cells[:, 0]]
        flip = np.einsum("ij,ij->i", normals, self.face_midpoints - owner_centroid) < 0
        normals[flip] *= -1.0
        self.face_normals = normals

    def _freeze(self):
        for name in (
            "vertices", "cells", "kappa", "cell_tags", "face_vertices", "face_cells",
            "cell_to_faces", "h_K", "cell_areas", "cell_centroids", "h_F",
            "face_midpoints", "face_normals", "face_tags", "boundary_label",
        ):
            getattr(self, name).flags.writeable = False

    # -- queries -----------------------------------------------------------

    @property
    def h_max(self) -> float:
        return float(self.h_K.max())

    @property
    def interior_faces(self) -> np.ndarray:
        return np.flatnonzero(self.face_cells[:, 1] >= 0)

    @property
    def boundary_faces(self) -> np.ndarray:
        return np.flatnonzero(self.face_cells[:, 1] < 0)

    def faces_with_label(self, label: int) -> np.ndarray:
        return np.flatnonzero(self.boundary_label == label)

    def vertex_cells(self, vertex: int) -> np.ndarray:
        o = self._vertex_offsets
        return self._vertex_cells[o[vertex]:o[vertex + 1]]

    def all_cells(self) -> CellSet:
        return CellSet(np.arange(self.n_cells))

    def cell_vertices_coords(self, cell: int) -> np.ndarray:
        return self.vertices[self.cells[cell]]

    def _replace(self, *, boundary_label=None, kappa=None) -> "Mesh":
        """Shallow copy with one attribute swapped (meshes are immutable)."""
        clone = object.__new__(Mesh)
        clone.__dict__.update(self.__dict__)
        if boundary_label is not None:
            clone.boundary_label = np.asarray(boundary_label, dtype=np.int8)
            clone.boundary_label.flags.writeable = False
        if kappa is not None:
            kappa = np.asarray(kappa, dtype=np.float64)
            if kappa.shape != (self.n_cells,) or np.any(kappa <= 0):
                raise MeshError("kappa must be positive with one value per cell")
            clone.kappa = kappa
            clone.kappa.flags.writeable = False
        return clone

    def with_kappa(self, kappa) -> "Mesh":
        """New mesh with the given per-cell kappa (array or callable of x, y).

        Callables are sampled at cell centroids; the mesh must be matched to
        any discontinuities of the coefficient for this to be exact.
        """
        if callable(kappa):
            warnings.warn(
                "kappa sampled at cell centroids; ensure the mesh is matched to kappa",
                stacklevel=2,
            )
            xc, yc = self.cell_centroids[:, 0], self.cell_centroids[:, 1]
            kappa = np.asarray(kappa(xc, yc), dtype=np.float64) * np.ones(self.n_cells)
        return self._replace(kappa=kappa)

    def check_kappa_bounds(self, alpha: float, beta: float):
        if not (0 < alpha <= self.kappa.min() and self.kappa.max() <= beta):
            raise MeshError(f"kappa outside [{alpha}, {beta}]")


@dataclass(frozen=True, eq=False)
class SubdomainLayout:
    """Owner partition plus all derived overlap machinery.

    Subdomain ids run 1..n_subdomains. ``overlapped[i]`` is the l-layer
    extension of owner set i, ``interfaces[i]`` the faces of its boundary
    interior to the global domain, ``prediction[i]`` the strip of cells
    touching that interface (on both sides), and ``pairwise[(i, j)]`` the
    nonempty cell overlaps for i < j.
    """

    owner: np.ndarray
    layers: int
    ids: tuple
    owned: dict
    overlapped: dict
    interfaces: dict
    interface_dirichlet: dict
    prediction: dict
    pairwise: dict
    delta: float

    @property
    def n_subdomains(self) -> int:
        return len(self.ids)

    def neighbors(self, i: int):
        out = []
        for (a, b) in self.pairwise:
            if a == i:
                out.append(b)
            elif b == i:
                out.append(a)
        return sorted(out)


# -- mesh builders ----------------------------------------------------------


def build_structured_mesh(nx: int, ny: int, extent=(0.0, 0.0, 1.0, 1.0)) -> Mesh:
    """Uniform triangulation of a rectangle: each grid square split along its
    bottom-left/top-right diagonal."""
    if nx < 1 or ny < 1:
        raise MeshError("nx and ny must be at least 1")
    x0, y0, x1, y1 = map(float, extent)
    if not (x1 > x0 and y1 > y0):
        raise MeshError("degenerate extent: need x1 > x0 and y1 > y0")
    xs = np.linspace(x0, x1, nx + 1)
    ys = np.linspace(y0, y1, ny + 1)
    X, Y = np.meshgrid(xs, ys)
    vertices = np.stack([X.ravel(), Y.ravel()], axis=1)

    def vid(i, j):
        return j * (nx + 1) + i

    cells = []
    for j in range(ny):
        for i in range(nx):
            bl, br = vid(i, j), vid(i + 1, j)
            tr, tl = vid(i + 1, j + 1), vid(i, j + 1)
            cells.append((bl, br, tr))
            cells.append((bl, tr, tl))
    return Mesh(vertices, np.array(cells, dtype=np.int64))


def classify_boundary(mesh: Mesh, dirichlet_predicate) -> Mesh:
    """Label every boundary face: predicate true at the midpoint -> Dirichlet."""
    labels = mesh.boundary_label.copy()
    bnd = mesh.boundary_faces
    mids = mesh.face_midpoints[bnd]
    hit = np.asarray(dirichlet_predicate(mids[:, 0], mids[:, 1]), dtype=bool)
    hit = np.broadcast_to(hit, (len(bnd),))
    labels[bnd] = np.where(hit, DIRICHLET, NEUMANN)
    return mesh._replace(boundary_label=labels)


# -- set machinery -----------------------------------------------------------


def extend_cells(mesh: Mesh, base: CellSet, layers: int) -> CellSet:
    """Extend a cell set by ``layers`` rings of closure-touching cells
    (face- or vertex-adjacent)."""
    if layers < 0:
        raise LayoutError("layers must be nonnegative")
    current = base.indices
    if len(current) and (current[0] < 0 or current[-1] >= mesh.n_cells):
        raise LayoutError("base cell index out of range")
    for _ in range(layers):
        if len(current) == mesh.n_cells or len(current) == 0:
            break
        verts = np.unique(mesh.cells[current].ravel())
        o = mesh._vertex_offsets
        chunks = [mesh._vertex_cells[o[v]:o[v + 1]] for v in verts]
        touching = np.unique(np.concatenate(chunks)) if chunks else current
        current = np.union1d(current, touching)
    return CellSet(current)


def interface_cells(mesh: Mesh, faces) -> CellSet:
    """All cells whose closure intersects the closure of a face in the set."""
    faces = np.asarray(faces, dtype=np.int64).ravel()
    if len(faces) == 0:
        return CellSet(np.empty(0, dtype=np.int64))
    if faces.min() < 0 or faces.max() >= mesh.n_faces:
        raise LayoutError("face index out of range")
    verts = np.unique(mesh.face_vertices[faces].ravel())
    o = mesh._vertex_offsets
    chunks = [mesh._vertex_cells[o[v]:o[v + 1]] for v in verts]
    return CellSet(np.unique(np.concatenate(chunks)))


def cellset_interior_faces(mesh: Mesh, cells: CellSet) -> np.ndarray:
    """Faces whose two incident cells both lie in the set."""
    m = cells.mask(mesh.n_cells)
    fc = mesh.face_cells
    ok = (fc[:, 1] >= 0) & m[fc[:, 0]] & m[np.where(fc[:, 1] >= 0, fc[:, 1], 0)]
    return np.flatnonzero(ok)


def cellset_cut_faces(mesh: Mesh, cells: CellSet) -> np.ndarray:
    """Interior mesh faces with exactly one incident cell in the set."""
    m = cells.mask(mesh.n_cells)
    fc = mesh.face_cells
    interior = fc[:, 1] >= 0
    inside = m[fc[:, 0]].astype(np.int8) + np.where(interior, m[np.where(interior, fc[:, 1], 0)], False)
    return np.flatnonzero(interior & (inside == 1))


def cellset_domain_boundary_faces(mesh: Mesh, cells: CellSet, label=None) -> np.ndarray:
    """Global boundary faces incident to the set, optionally filtered by label."""
    m = cells.mask(mesh.n_cells)
    fc = mesh.face_cells
    ok = (fc[:, 1] < 0) & m[fc[:, 0]]
    if label is not None:
        ok &= mesh.boundary_label == label
    return np.flatnonzero(ok)


# -- partitioning -------------------------------------------------------------


def partition_cells(mesh: Mesh, count: int, seed: int = 0) -> np.ndarray:
    """Greedy BFS partition into ``count`` parts, seeded and rebalanced.

    Returns an owner array with subdomain ids 1..count. Deterministic for a
    fixed seed; parts are grown face-neighbor-first from spread-out seed
    cells, smallest part first, then rebalanced to within 20% of the mean.
    """
    if count < 1:
        raise LayoutError("subdomain count must be positive")
    if count > mesh.n_cells:
        raise LayoutError("more subdomains than cells")
    n = mesh.n_cells
    if count == 1:
        return np.ones(n, dtype=np.int64)

    rng = np.random.default_rng(seed)
    centroids = mesh.cell_centroids
    seeds = [int(rng.integers(n))]
    d = np.linalg.norm(centroids - centroids[seeds[0]], axis=1)
    for _ in range(count - 1):
        nxt = int(np.argmax(d))
        seeds.append(nxt)
        d = np.minimum(d, np.linalg.norm(centroids - centroids[nxt], axis=1))

    fc = mesh.face_cells
    c2f = mesh.cell_to_faces
    owner = np.zeros(n, dtype=np.int64)
    sizes = np.zeros(count + 1, dtype=np.int64)
    frontiers = [deque() for _ in range(count + 1)]

    def neighbors(cell):
        out = []
        for f in c2f[cell]:
            a, b = fc[f]
            if b >= 0:
                out.append(b if a == cell else a)
        return sorted(out)

    for p, s in enumerate(seeds, start=1):
        if owner[s] != 0:  # duplicate seed on tiny meshes: take lowest free cell
            s = int(np.flatnonzero(owner == 0)[0])
        owner[s] = p
        sizes[p] = 1
        frontiers[p].extend(neighbors(s))

    assigned = count
    while assigned < n:
        best, best_size = 0, None
        for p in range(1, count + 1):
            if frontiers[p] and (best_size is None or sizes[p] < best_size):
                best, best_size = p, sizes[p]
        if best == 0:
            # disconnected leftovers: restart growth of the smallest part
            cell = int(np.flatnonzero(owner == 0)[0])
            p = int(np.argmin(sizes[1:])) + 1
            owner[cell] = p
            sizes[p] += 1
            assigned += 1
            frontiers[p].extend(neighbors(cell))
            continue
        q = frontiers[best]
        claimed = False
        while q:
            cell = q.popleft()
            if owner[cell] == 0:
                owner[cell] = best
                sizes[best] += 1
                assigned += 1
                q.extend(nb for nb in neighbors(cell) if owner[nb] == 0)
                claimed = True
                break
        if not claimed:
            continue

    _rebalance(owner, sizes, count, fc, c2f, n)
    return owner


def _rebalance(owner, sizes, count, fc, c2f, n):
    target = n / count
    for _ in range(2 * n):
        big = int(np.argmax(sizes[1:])) + 1
        if sizes[big] <= 1.2 * target:
            break
        moved = False
        # boundary cells of the big part, lowest index first
        for cell in np.flatnonzero(owner == big):
            others = set()
            for f in c2f[cell]:
                a, b = fc[f]
                if b >= 0:
                    nb = b if a == cell else a
                    if owner[nb] != big:
                        others.add(owner[nb])
            if not others:
                continue
            dest = min(others, key=lambda p: (sizes[p], p))
            if sizes[dest] < sizes[big] - 1:
                owner[cell] = dest
                sizes[big] -= 1
                sizes[dest] += 1
                moved = True
                break
        if not moved:
            break


def build_layout(mesh: Mesh, owner, layers: int) -> SubdomainLayout:
    """Derive the full overlap machinery from a non-overlapping owner map."""
    owner = np.asarray(owner, dtype=np.int64)
    if owner.shape != (mesh.n_cells,):
        raise LayoutError("owner map must assign every cell")
    if layers < 1:
        raise LayoutError("layers must be at least 1")
    n_sub = int(owner.max(initial=0))
    if owner.min(initial=1) < 1:
        raise LayoutError("owner ids must be 1-based and cover all cells")
    ids = tuple(range(1, n_sub + 1))
    owned, overlapped, interfaces, interface_dirichlet, prediction = {}, {}, {}, {}, {}
    for i in ids:
        own = CellSet(np.flatnonzero(owner == i))
        if len(own) == 0:
            raise LayoutError(f"subdomain {i} owns no cells")
        ov = extend_cells(mesh, own, layers)
        if len(ov) == mesh.n_cells and n_sub > 1:
            warnings.warn(
                f"subdomain {i}: extension covers the whole mesh; "
                "splitting degenerates to the global method",
                stacklevel=2,
            )
        owned[i] = own
        overlapped[i] = ov
        gamma = cellset_cut_faces(mesh, ov)
        interfaces[i] = gamma
        interface_dirichlet[i] = cellset_domain_boundary_faces(mesh, ov, DIRICHLET)
        prediction[i] = interface_cells(mesh, gamma)

    pairwise = {}
    for a in ids:
        for b in ids:
            if a < b:
                s = overlapped[a].intersect(overlapped[b])
                if len(s):
                    pairwise[(a, b)] = s

    delta = _overlap_width(mesh, owned, interfaces, ids)
    return SubdomainLayout(
        owner=owner, layers=layers, ids=ids, owned=owned, overlapped=overlapped,
        interfaces=interfaces, interface_dirichlet=interface_dirichlet,
        prediction=prediction, pairwise=pairwise, delta=delta,
    )


def _overlap_width(mesh, owned, interfaces, ids):
    """Minimal distance from any subdomain interface to its owner region."""
    from scipy.spatial import cKDTree

    delta = np.inf
    for i in ids:
        gamma = interfaces[i]
        if len(gamma) == 0:
            continue
        inner = cellset_cut_faces(mesh, owned[i])
        if len(inner) == 0:
            continue
        pts = mesh.vertices[np.unique(mesh.face_vertices[inner].ravel())]
        tree = cKDTree(pts)
        dist, _ = tree.query(mesh.face_midpoints[gamma])
        delta = min(delta, float(dist.min()))
    return delta


# -- MSH 2.2 ASCII I/O --------------------------------------------------------

_TRIANGLE = 2
_LINE = 1
_POINT = 15


def read_msh(path, kappa_by_tag=None, dirichlet_tags=()) -> Mesh:
    """Read an MSH version 2 ASCII file with 2D triangle elements.

    Physical surface tags select per-cell kappa through ``kappa_by_tag``;
    physical line tags in ``dirichlet_tags`` mark Dirichlet boundary faces
    (other tagged or untagged boundary faces are Neumann).
    """
    with open(path, "r", encoding="ascii") as fh:
        lines = fh.read().splitlines()

    def fail(msg, ln):
        raise MshParseError(msg, line=ln + 1)

    idx = 0
    nodes = {}
    triangles = []
    tri_tags = []
    line_tags = {}
    seen_nodes = seen_elements = False
    n = len(lines)
    while idx < n:
        tok = lines[idx].strip()
        if tok == "$MeshFormat":
            if idx + 1 >= n:
                fail("truncated $MeshFormat", idx)
            parts = lines[idx + 1].split()
            if not parts or not parts[0].startswith("2"):
                fail(f"unsupported MSH version {parts[0] if parts else '?'}", idx + 1)
            idx += 2
        elif tok == "$Nodes":
            seen_nodes = True
            try:
                count = int(lines[idx + 1])
            except (IndexError, ValueError):
                fail("bad node count", idx + 1)
            for j in range(count):
                ln = idx + 2 + j
                try:
                    parts = lines[ln].split()
                    nodes[int(parts[0])] = (float(parts[1]), float(parts[2]))
                except (IndexError, ValueError):
                    fail("bad node line", ln)
            idx += 2 + count
        elif tok == "$Elements":
            seen_elements = True
            try:
                count = int(lines[idx + 1])
            except (IndexError, ValueError):
                fail("bad element count", idx + 1)
            for j in range(count):
                ln = idx + 2 + j
                try:
                    parts = [int(p) for p in lines[ln].split()]
                    etype, ntags = parts[1], parts[2]
                    tags = parts[3:3 + ntags]
                    conn = parts[3 + ntags:]
                except (IndexError, ValueError):
                    fail("bad element line", ln)
                phys = tags[0] if tags else 0
                if etype == _TRIANGLE:
                    if len(conn) != 3:
                        fail("triangle with wrong node count", ln)
                    triangles.append(conn)
                    tri_tags.append(phys)
                elif etype == _LINE:
                    if len(conn) != 2:
                        fail("line with wrong node count", ln)
                    line_tags[tuple(sorted(conn))] = phys
                elif etype == _POINT:
                    continue
                else:
                    raise UnsupportedElementError(
                        f"unsupported element type {etype} at line {ln + 1}; "
                        "only 2-node lines and 3-node triangles are handled"
                    )
            idx += 2 + count
        else:
            idx += 1
    if not seen_nodes or not seen_elements:
        raise MshParseError("missing $Nodes or $Elements section")
    if not triangles:
        raise MshParseError("no triangles in file")

    node_ids = sorted(nodes)
    remap = {nid: k for k, nid in enumerate(node_ids)}
    vertices = np.array([nodes[nid] for nid in node_ids])
    cells = np.array([[remap[a] for a in tri] for tri in triangles], dtype=np.int64)
    tags = np.array(tri_tags, dtype=np.int64)

    kappa = np.ones(len(cells))
    if kappa_by_tag:
        for tag, value in kappa_by_tag.items():
            kappa[tags == tag] = value

    edge_tags = {
        (remap[a], remap[b]): t
        for (a, b), t in line_tags.items()
        if a in remap and b in remap
    }
    mesh = Mesh(vertices, cells, kappa=kappa, cell_tags=tags, face_tags_by_edge=edge_tags)

    if dirichlet_tags:
        labels = mesh.boundary_label.copy()
        bnd = mesh.boundary_faces
        is_d = np.isin(mesh.face_tags[bnd], list(dirichlet_tags))
        labels[bnd] = np.where(is_d, DIRICHLET, NEUMANN)
        mesh = mesh._replace(boundary_label=labels)
    return mesh


def write_msh(mesh: Mesh, path):
    """Write an MSH 2.2 ASCII file: triangles with their cell tags, plus line
    elements for boundary faces (tagged faces keep their tag; untagged ones
    get 1 for Dirichlet, 2 for Neumann)."""
    out = ["$MeshFormat", "2.2 0 8", "$EndMeshFormat", "$Nodes", str(mesh.n_vertices)]
    for i, (x, y) in enumerate(mesh.vertices, start=1):
        out.append(f"{i} {float(x)!r} {float(y)!r} 0")
    out.append("$EndNodes")
    bnd = mesh.boundary_faces
    out.append("$Elements")
    out.append(str(mesh.n_cells + len(bnd)))
    eid = 1
    for f in bnd:
        tag = mesh.face_tags[f]
        if tag < 0:
            tag = 1 if mesh.boundary_label[f] == DIRICHLET else 2
        a, b = mesh.face_vertices[f] + 1
        out.append(f"{eid} {_LINE} 2 {tag} {tag} {a} {b}")
        eid += 1
    for c in range(mesh.n_cells):
        t = mesh.cell_tags[c]
        a, b, d = mesh.cells[c] + 1
        out.append(f"{eid} {_TRIANGLE} 2 {t} {t} {a} {b} {d}")
        eid += 1
    out.append("$EndElements")
    with open(path, "w", encoding="ascii") as fh:
        fh.write("\n".join(out) + "\n")


# -- uniform refinement -------------------------------------------------------


def refine_uniform(mesh: Mesh):
    """Split every triangle into four; returns (refined mesh, parent cell map).

    Children inherit kappa and cell tags; boundary labels and face tags carry
    over to the two halves of each parent boundary face.
    """
    nv = mesh.n_vertices
    mid = mesh.face_midpoints
    vertices = np.concatenate([mesh.vertices, mid], axis=0)
    c = mesh.cells
    f01 = nv + mesh.cell_to_faces[:, 0]
    f12 = nv + mesh.cell_to_faces[:, 1]
    f20 = nv + mesh.cell_to_faces[:, 2]
    kids = np.empty((4 * mesh.n_cells, 3), dtype=np.int64)
    kids[0::4] = np.stack([c[:, 0], f01, f20], axis=1)
    kids[1::4] = np.stack([f01, c[:, 1], f12], axis=1)
    kids[2::4] = np.stack([f20, f12, c[:, 2]], axis=1)
    kids[3::4] = np.stack([f01, f12, f20], axis=1)
    parents = np.repeat(np.arange(mesh.n_cells), 4)

    fine = Mesh(
        vertices, kids,
        kappa=mesh.kappa[parents],
        cell_tags=mesh.cell_tags[parents],
    )
    # transfer boundary labels/tags: each parent boundary face (a, b) with
    # midpoint m splits into child faces (a, m) and (m, b)
    labels = fine.boundary_label.copy()
    tags = fine.face_tags.copy()
    child_key = {tuple(fv): f for f, fv in enumerate(fine.face_vertices)}
    for f in mesh.boundary_faces:
        a, b = mesh.face_vertices[f]
        m = nv + f
        for key in (tuple(sorted((a, m))), tuple(sorted((m, b)))):
            cf = child_key[key]
            labels[cf] = mesh.boundary_label[f]
            tags[cf] = mesh.face_tags[f]
    fine = fine._replace(boundary_label=labels)
    tags.flags.writeable = False
    fine.face_tags = tags
    return fine, parents
