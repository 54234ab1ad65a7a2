"""Triangle meshes: I/O, differential quantities, augmentation with anchor tracking."""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field
from functools import cached_property
from pathlib import Path

import numpy as np
from scipy import sparse
from scipy.sparse import csgraph
from scipy.spatial.transform import Rotation

from .binio import atomic_write

logger = logging.getLogger(__name__)

# relative tolerance used when breaking near-ties by lower index
TIE_RTOL = 1e-9


class MeshError(ValueError):
    """Raised for malformed mesh input or invalid mesh operations."""


def _readonly(a):
    a = np.ascontiguousarray(a)
    a.setflags(write=False)
    return a


@dataclass(frozen=True, eq=False)
class TriMesh:
    """Immutable triangle mesh.

    Parameters
    ----------
    vertices : (n, 3) float array
    faces : (m, 3) int array of vertex indices
    """

    vertices: np.ndarray
    faces: np.ndarray

    def __post_init__(self):
        v = np.asarray(self.vertices, dtype=np.float64)
        f = np.asarray(self.faces, dtype=np.int64)
        if v.ndim != 2 or v.shape[1] != 3:
            raise MeshError("vertices must have shape (n, 3)")
        if f.size == 0:
            f = f.reshape(0, 3)
        if f.ndim != 2 or f.shape[1] != 3:
            raise MeshError("faces must have shape (m, 3)")
        if len(v) == 0:
            raise MeshError("empty mesh")
        if f.size and (f.min() < 0 or f.max() >= len(v)):
            raise MeshError("face index out of range")
        if np.any((f[:, 0] == f[:, 1]) | (f[:, 1] == f[:, 2]) | (f[:, 0] == f[:, 2])):
            raise MeshError("degenerate face (repeated vertex index)")
        object.__setattr__(self, "vertices", _readonly(v))
        object.__setattr__(self, "faces", _readonly(f))

    @property
    def n_vertices(self) -> int:
        return len(self.vertices)

    @property
    def n_faces(self) -> int:
        return len(self.faces)

    @cached_property
    def edges(self) -> np.ndarray:
        """Unique undirected edges (i < j), lexicographically sorted."""
        f = self.faces
        e = np.concatenate([f[:, [0, 1]], f[:, [1, 2]], f[:, [2, 0]]])
        e.sort(axis=1)
        return _readonly(np.unique(e, axis=0))

    @cached_property
    def edge_lengths(self) -> np.ndarray:
        e = self.edges
        return _readonly(np.linalg.norm(self.vertices[e[:, 0]] - self.vertices[e[:, 1]], axis=1))

    @cached_property
    def face_areas(self) -> np.ndarray:
        v = self.vertices
        f = self.faces
        cr = np.cross(v[f[:, 1]] - v[f[:, 0]], v[f[:, 2]] - v[f[:, 0]])
        return _readonly(0.5 * np.linalg.norm(cr, axis=1))

    @property
    def total_area(self) -> float:
        return float(self.face_areas.sum())

    @cached_property
    def vertex_area(self) -> np.ndarray:
        return _readonly(vertex_areas(self))

    @cached_property
    def curvature(self) -> np.ndarray:
        return _readonly(mean_curvature_magnitude(self))

    @cached_property
    def adjacency(self) -> sparse.csr_matrix:
        """Symmetric edge-graph adjacency weighted by Euclidean edge length."""
        e = self.edges
        n = self.n_vertices
        w = self.edge_lengths
        a = sparse.coo_matrix(
            (np.concatenate([w, w]), (np.concatenate([e[:, 0], e[:, 1]]), np.concatenate([e[:, 1], e[:, 0]]))),
            shape=(n, n),
        )
        return a.tocsr()

    @cached_property
    def n_components(self) -> int:
        """Connected components of the face-edge graph (isolated vertices count)."""
        n, _ = csgraph.connected_components(self.adjacency, directed=False)
        return int(n)

    @cached_property
    def boundary_vertices(self) -> np.ndarray:
        """Boolean mask of vertices on a boundary edge (edge with one incident face)."""
        f = self.faces
        e = np.concatenate([f[:, [0, 1]], f[:, [1, 2]], f[:, [2, 0]]])
        e.sort(axis=1)
        uniq, counts = np.unique(e, axis=0, return_counts=True)
        mask = np.zeros(self.n_vertices, dtype=bool)
        b = uniq[counts == 1]
        mask[b.ravel()] = True
        return _readonly(mask)

    def with_vertices(self, vertices) -> "TriMesh":
        return TriMesh(vertices, self.faces)


# ---------------------------------------------------------------------------
# differential quantities


def vertex_areas(mesh: TriMesh) -> np.ndarray:
    """One-third of the summed area of incident faces, per vertex.

    Isolated vertices get area 0. The values partition the total area exactly
    (up to floating point summation order).
    """
    a = np.zeros(mesh.n_vertices)
    third = mesh.face_areas / 3.0
    for k in range(3):
        np.add.at(a, mesh.faces[:, k], third)
    return a


def _cotangents(mesh: TriMesh):
    """Cotangent of the angle at each corner, shape (m, 3); corner k is opposite edge (k+1, k+2)."""
    v = mesh.vertices
    f = mesh.faces
    cots = np.zeros(f.shape)
    for k in range(3):
        a = v[f[:, k]]
        b = v[f[:, (k + 1) % 3]]
        c = v[f[:, (k + 2) % 3]]
        u = b - a
        w = c - a
        dot = np.einsum("ij,ij->i", u, w)
        cr = np.linalg.norm(np.cross(u, w), axis=1)
        with np.errstate(divide="ignore", invalid="ignore"):
            cots[:, k] = np.where(cr > 0, dot / cr, 0.0)
    return cots


def mean_curvature_magnitude(mesh: TriMesh, return_degenerate: bool = False):
    """Per-vertex mean curvature magnitude from the cotangent Laplacian.

    ``|kappa[v]| = || 1/2 sum_j (cot a_vj + cot b_vj) (x_v - x_j) || / (2 A[v])``
    with ``A`` the one-third vertex area. Boundary vertices copy the value of the
    nearest (edge-graph) interior vertex. Vertices with zero one-ring area get 0
    and are counted as degenerate.

    Returns
    -------
    kappa : (n,) array
    n_degenerate : int, only if ``return_degenerate``
    """
    v = mesh.vertices
    f = mesh.faces
    n = mesh.n_vertices
    cots = _cotangents(mesh)
    hn = np.zeros((n, 3))
    for k in range(3):
        i = f[:, (k + 1) % 3]
        j = f[:, (k + 2) % 3]
        w = 0.5 * cots[:, k][:, None]
        d = v[i] - v[j]
        np.add.at(hn, i, w * d)
        np.add.at(hn, j, -w * d)
    area = mesh.vertex_area
    incident = np.zeros(n, dtype=bool)
    incident[f.ravel()] = True
    degenerate = incident & ~(area > 0)
    with np.errstate(divide="ignore", invalid="ignore"):
        kappa = np.where(area > 0, np.linalg.norm(hn, axis=1) / (2.0 * area), 0.0)
    n_degenerate = int(degenerate.sum())
    if n_degenerate:
        logger.warning("curvature: %d vertices with zero one-ring area", n_degenerate)

    boundary = mesh.boundary_vertices
    interior = np.flatnonzero(incident & ~boundary)
    if boundary.any():
        if len(interior) == 0:
            kappa[boundary] = 0.0
        else:
            _, _, src = csgraph.dijkstra(
                mesh.adjacency, directed=False, indices=interior, min_only=True, return_predecessors=True
            )
            bidx = np.flatnonzero(boundary)
            nearest = src[bidx]
            ok = nearest >= 0
            kappa[bidx[ok]] = kappa[nearest[ok]]
            kappa[bidx[~ok]] = 0.0
    if return_degenerate:
        return kappa, n_degenerate
    return kappa


def surface_frame(mesh: TriMesh):
    """Chirality-aware canonical frame from exact surface moments.

    Axes are the principal directions of the area-weighted second moment,
    ordered by decreasing variance. The two axes with the largest normalised
    third moment get the sign making that moment positive; the remaining axis
    completes a right-handed frame, so mirror images get opposite coordinates.

    Returns
    -------
    centroid : (3,) array
    axes : (3, 3) array, rows are the frame axes
    """
    v = mesh.vertices
    f = mesh.faces
    T = mesh.face_areas
    a, b, c = v[f[:, 0]], v[f[:, 1]], v[f[:, 2]]
    total = T.sum()
    centroid = (T[:, None] * (a + b + c) / 3.0).sum(0) / total
    a, b, c = a - centroid, b - centroid, c - centroid
    s = a + b + c
    second = np.einsum("f,fi,fj->ij", T / 12.0, s, s)
    for p in (a, b, c):
        second += np.einsum("f,fi,fj->ij", T / 12.0, p, p)
    second /= total
    evals, evecs = np.linalg.eigh(second)
    order = np.argsort(evals)[::-1]
    evals = evals[order]
    axes = evecs[:, order].T.copy()

    # integral of (e . x)^3 over each triangle is T/10 * h3(fa, fb, fc)
    third = np.zeros(3)
    for k in range(3):
        fa, fb, fc = a @ axes[k], b @ axes[k], c @ axes[k]
        h3 = (
            fa**3 + fb**3 + fc**3
            + fa * fa * (fb + fc) + fb * fb * (fa + fc) + fc * fc * (fa + fb)
            + fa * fb * fc
        )
        third[k] = (T / 10.0 * h3).sum() / total
    skew = third / np.maximum(evals, 1e-300) ** 1.5
    mag = np.round(np.abs(skew), 9)
    free = int(np.lexsort((np.arange(3), mag))[0])
    for k in range(3):
        if k != free and skew[k] < 0:
            axes[k] = -axes[k]
    i, j = (free + 1) % 3, (free + 2) % 3
    axes[free] = np.cross(axes[i], axes[j])
    return centroid, axes


# ---------------------------------------------------------------------------
# I/O


def load_mesh(path) -> TriMesh:
    """Read a Wavefront OBJ or ASCII PLY triangle mesh."""
    path = Path(path)
    try:
        text = path.read_text()
    except OSError as exc:
        raise MeshError(f"cannot read {path}: {exc}") from exc
    if text.startswith("ply"):
        v, f = _parse_ply(text)
    else:
        v, f = _parse_obj(text)
    if len(v) == 0 or len(f) == 0:
        raise MeshError(f"empty mesh in {path}")
    mesh = TriMesh(np.array(v, dtype=np.float64), np.array(f, dtype=np.int64))
    if mesh.n_components != 1:
        logger.warning("%s: edge graph has %d connected components", path, mesh.n_components)
    return mesh


def _parse_obj(text):
    verts, faces = [], []
    for lineno, line in enumerate(text.splitlines(), start=1):
        parts = line.split()
        if not parts or parts[0].startswith("#"):
            continue
        try:
            if parts[0] == "v":
                verts.append([float(x) for x in parts[1:4]])
                if len(parts) < 4:
                    raise ValueError("vertex needs 3 coordinates")
            elif parts[0] == "f":
                idx = [int(p.split("/")[0]) for p in parts[1:]]
                if len(idx) != 3:
                    raise MeshError(f"non-triangular face at line {lineno}")
                faces.append([i - 1 if i > 0 else len(verts) + i for i in idx])
        except MeshError:
            raise
        except ValueError as exc:
            raise MeshError(f"parse error at line {lineno}: {exc}") from exc
    return verts, faces


def _parse_ply(text):
    lines = text.splitlines()
    n_vert = n_face = None
    vprops = []
    current = None
    body_start = None
    for lineno, line in enumerate(lines, start=1):
        parts = line.split()
        if not parts:
            continue
        if parts[0] == "format" and parts[1] != "ascii":
            raise MeshError(f"only ASCII PLY is supported (line {lineno})")
        if parts[0] == "element":
            current = parts[1]
            if current == "vertex":
                n_vert = int(parts[2])
            elif current == "face":
                n_face = int(parts[2])
        elif parts[0] == "property" and current == "vertex":
            vprops.append(parts[-1])
        elif parts[0] == "end_header":
            body_start = lineno
            break
    if body_start is None or n_vert is None or n_face is None:
        raise MeshError("malformed PLY header")
    try:
        xyz = [vprops.index(c) for c in "xyz"]
    except ValueError as exc:
        raise MeshError("PLY vertex element lacks x/y/z") from exc
    verts, faces = [], []
    lineno = body_start
    body = lines[body_start:]
    if len(body) < n_vert + n_face:
        raise MeshError(f"PLY body truncated at line {body_start + len(body)}")
    for k in range(n_vert):
        lineno = body_start + k + 1
        try:
            vals = body[k].split()
            verts.append([float(vals[i]) for i in xyz])
        except (ValueError, IndexError) as exc:
            raise MeshError(f"parse error at line {lineno}: {exc}") from exc
    for k in range(n_face):
        lineno = body_start + n_vert + k + 1
        try:
            vals = [int(x) for x in body[n_vert + k].split()]
        except ValueError as exc:
            raise MeshError(f"parse error at line {lineno}: {exc}") from exc
        if not vals or vals[0] != 3 or len(vals) < 4:
            raise MeshError(f"non-triangular face at line {lineno}")
        faces.append(vals[1:4])
    return verts, faces


def _fmt(v) -> str:
    # shortest repr that round-trips a float64 exactly
    return " ".join(repr(float(x)) for x in v)


def save_obj(mesh: TriMesh, path) -> None:
    lines = [f"v {_fmt(v)}\n" for v in mesh.vertices]
    lines += [f"f {a} {b} {c}\n" for a, b, c in (mesh.faces + 1).tolist()]
    atomic_write(path, "".join(lines).encode())


def save_ply(mesh: TriMesh, path, colors=None) -> None:
    """Write ASCII PLY, optionally with per-vertex uint8 RGB colors."""
    head = ["ply\nformat ascii 1.0\n", f"element vertex {mesh.n_vertices}\n"]
    head.append("property double x\nproperty double y\nproperty double z\n")
    if colors is not None:
        colors = np.asarray(colors)
        if colors.shape != (mesh.n_vertices, 3):
            raise MeshError("colors must be an (n, 3) array")
        head.append("property uchar red\nproperty uchar green\nproperty uchar blue\n")
    head.append(f"element face {mesh.n_faces}\n")
    head.append("property list uchar int vertex_indices\nend_header\n")
    if colors is None:
        body = [f"{_fmt(v)}\n" for v in mesh.vertices]
    else:
        body = [f"{_fmt(v)} {r} {g} {b}\n" for v, (r, g, b) in zip(mesh.vertices, colors.astype(int).tolist())]
    body += [f"3 {a} {b} {c}\n" for a, b, c in mesh.faces.tolist()]
    atomic_write(path, "".join(head + body).encode())


def load_labels(path) -> np.ndarray:
    try:
        lines = Path(path).read_text().split()
        return np.array([int(x) for x in lines], dtype=np.int64)
    except (OSError, ValueError) as exc:
        raise MeshError(f"cannot read labels from {path}: {exc}") from exc


def save_labels(labels, path) -> None:
    atomic_write(path, "".join(f"{int(x)}\n" for x in labels).encode())


# ---------------------------------------------------------------------------
# augmentation


STEP_KINDS = ("midpoint_subdivide", "cluster_decimate", "rotate")


@dataclass
class AugmentSpec:
    """Ordered augmentation steps plus the seed driving every random choice.

    Steps are dicts ``{"op": "midpoint_subdivide"}``,
    ``{"op": "cluster_decimate", "target_vertex_count": n}`` or ``{"op": "rotate"}``.
    """

    steps: list = field(default_factory=list)
    seed: int = 0

    def __post_init__(self):
        steps = []
        for s in self.steps:
            if isinstance(s, str):
                s = {"op": s}
            s = dict(s)
            op = s.get("op")
            if op not in STEP_KINDS:
                raise MeshError(f"unknown augmentation step {op!r}")
            if op == "cluster_decimate":
                if int(s.get("target_vertex_count", 0)) < 4:
                    raise MeshError("decimation target must be at least 4 vertices")
                s["target_vertex_count"] = int(s["target_vertex_count"])
            steps.append(s)
        self.steps = steps
        self.seed = int(self.seed)

    def to_dict(self) -> dict:
        return {"seed": self.seed, "steps": [dict(s) for s in self.steps]}

    @classmethod
    def from_dict(cls, d: dict) -> "AugmentSpec":
        unknown = set(d) - {"seed", "steps"}
        if unknown:
            raise MeshError(f"unknown AugmentSpec keys: {sorted(unknown)}")
        return cls(steps=list(d.get("steps", [])), seed=d.get("seed", 0))

    def dumps(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True)

    @classmethod
    def loads(cls, s: str) -> "AugmentSpec":
        return cls.from_dict(json.loads(s))


@dataclass
class AnchorMap:
    """Back-traced anchors ``h`` from augmented to template vertices."""

    h: np.ndarray
    labels_aug: np.ndarray
    labels_tmp: np.ndarray
    chain: list
    seed: int

    def to_dict(self) -> dict:
        return {
            "h": [int(x) for x in self.h],
            "labels_aug": [int(x) for x in self.labels_aug],
            "labels_tmp": [int(x) for x in self.labels_tmp],
            "chain": self.chain,
            "seed": self.seed,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "AnchorMap":
        return cls(
            h=np.asarray(d["h"], dtype=np.int64),
            labels_aug=np.asarray(d["labels_aug"], dtype=np.int64),
            labels_tmp=np.asarray(d["labels_tmp"], dtype=np.int64),
            chain=list(d["chain"]),
            seed=int(d["seed"]),
        )

    def save(self, path) -> None:
        atomic_write(path, json.dumps(self.to_dict(), sort_keys=True).encode())

    @classmethod
    def load(cls, path) -> "AnchorMap":
        return cls.from_dict(json.loads(Path(path).read_text()))

    @property
    def spec(self) -> AugmentSpec:
        return AugmentSpec(steps=self.chain, seed=self.seed)


def random_rotation(rng: np.random.Generator) -> np.ndarray:
    r = Rotation.random(random_state=rng).as_matrix()
    if abs(np.linalg.det(r) - 1.0) > 1e-9 or np.abs(r @ r.T - np.eye(3)).max() > 1e-9:
        raise MeshError("rotation matrix not orthonormal")
    return r


def _subdivide(verts, faces, h, tmp_frame, template_vertices):
    """Midpoint subdivision; each new vertex inherits the anchor of its nearer parent."""
    n = len(verts)
    e = np.concatenate([faces[:, [0, 1]], faces[:, [1, 2]], faces[:, [2, 0]]])
    e.sort(axis=1)
    uniq, inv = np.unique(e, axis=0, return_inverse=True)
    inv = inv.ravel()
    new_v = 0.5 * (verts[uniq[:, 0]] + verts[uniq[:, 1]])
    new_tf = 0.5 * (tmp_frame[uniq[:, 0]] + tmp_frame[uniq[:, 1]])
    ha, hb = h[uniq[:, 0]], h[uniq[:, 1]]
    da = np.linalg.norm(new_tf - template_vertices[ha], axis=1)
    db = np.linalg.norm(new_tf - template_vertices[hb], axis=1)
    scale = np.maximum(np.maximum(da, db), 1e-300)
    near_a = (da - db) / scale < -TIE_RTOL
    near_b = (db - da) / scale < -TIE_RTOL
    tie = ~near_a & ~near_b
    new_h = np.where(near_a, ha, hb)
    new_h = np.where(tie, np.minimum(ha, hb), new_h)

    m = len(faces)
    e01, e12, e20 = inv[:m] + n, inv[m:2 * m] + n, inv[2 * m:] + n
    a, b, c = faces[:, 0], faces[:, 1], faces[:, 2]
    new_faces = np.concatenate(
        [
            np.stack([a, e01, e20], 1),
            np.stack([e01, b, e12], 1),
            np.stack([e20, e12, c], 1),
            np.stack([e01, e12, e20], 1),
        ]
    )
    return (
        np.concatenate([verts, new_v]),
        new_faces,
        np.concatenate([h, new_h]),
        np.concatenate([tmp_frame, new_tf]),
    )


def _cluster(verts, cell):
    lo = verts.min(0)
    keys = np.floor((verts - lo) / cell).astype(np.int64)
    _, labels = np.unique(keys, axis=0, return_inverse=True)
    return labels.ravel()


def _decimate(verts, faces, h, tmp_frame, target):
    """Uniform grid vertex clustering; representative is the max-area vertex of each cell."""
    n = len(verts)
    if target < 4:
        raise MeshError("decimation target must be at least 4 vertices")
    if target >= n:
        return verts, faces, h, tmp_frame
    extent = float(np.ptp(verts, axis=0).max())
    lo, hi = np.log(extent * 1e-6), np.log(extent * 2.0)
    best = None
    for _ in range(60):
        mid = 0.5 * (lo + hi)
        labels = _cluster(verts, np.exp(mid))
        k = labels.max() + 1
        if k > target:
            lo = mid
        else:
            if best is None or k > best[0]:
                best = (k, labels)
            hi = mid
        if best is not None and best[0] == target:
            break
    labels = best[1]
    area = vertex_areas(TriMesh(verts, faces))
    k = labels.max() + 1
    # representative: max area, ties to lower index
    order = np.lexsort((np.arange(n), -area, labels))
    first = np.ones(n, dtype=bool)
    first[1:] = labels[order][1:] != labels[order][:-1]
    rep = np.empty(k, dtype=np.int64)
    rep[labels[order][first]] = order[first]

    nf = labels[faces]
    keep = (nf[:, 0] != nf[:, 1]) & (nf[:, 1] != nf[:, 2]) & (nf[:, 0] != nf[:, 2])
    nf = nf[keep]
    canon = np.sort(nf, axis=1)
    _, first_f = np.unique(canon, axis=0, return_index=True)
    nf = nf[np.sort(first_f)]
    used = np.zeros(k, dtype=bool)
    used[nf.ravel()] = True
    remap = -np.ones(k, dtype=np.int64)
    remap[used] = np.arange(used.sum())
    rep = rep[used]
    return verts[rep], remap[nf], h[rep], tmp_frame[rep]


def augment(template: TriMesh, labels_tmp, spec: AugmentSpec):
    """Apply ``spec`` to ``template`` tracking anchors back to template vertices.

    Returns
    -------
    mesh : TriMesh
    anchors : AnchorMap
    """
    labels_tmp = np.asarray(labels_tmp, dtype=np.int64)
    if len(labels_tmp) != template.n_vertices:
        raise MeshError("labels must cover every template vertex")
    verts = np.array(template.vertices)
    faces = np.array(template.faces)
    h = np.arange(template.n_vertices)
    # positions expressed in the template frame (rotations undone)
    tmp_frame = verts.copy()
    rot_total = np.eye(3)
    for k, step in enumerate(spec.steps):
        op = step["op"]
        if op == "midpoint_subdivide":
            verts, faces, h, tmp_frame = _subdivide(verts, faces, h, tmp_frame, template.vertices)
        elif op == "cluster_decimate":
            verts, faces, h, tmp_frame = _decimate(verts, faces, h, tmp_frame, step["target_vertex_count"])
        elif op == "rotate":
            rng = np.random.default_rng([spec.seed, k])
            r = random_rotation(rng)
            verts = verts @ r.T
            rot_total = r @ rot_total
    mesh = TriMesh(verts, faces)
    if mesh.n_components != 1:
        raise MeshError(f"augmented mesh is disconnected ({mesh.n_components} components)")
    anchors = AnchorMap(
        h=h.astype(np.int64),
        labels_aug=labels_tmp[h],
        labels_tmp=labels_tmp,
        chain=[dict(s) for s in spec.steps],
        seed=spec.seed,
    )
    return mesh, anchors


def replay(template: TriMesh, anchors: AnchorMap):
    """Re-run the recorded chain; reproduces the augmented mesh bit-exactly."""
    return augment(template, anchors.labels_tmp, anchors.spec)


# ---------------------------------------------------------------------------
# sampling


def argmax_lowest(values, rtol: float = TIE_RTOL) -> int:
    """Index of the maximum, treating values within ``rtol`` of it as ties (lowest index wins)."""
    values = np.asarray(values)
    m = values.max()
    thresh = m - rtol * max(abs(m), 1e-300)
    return int(np.flatnonzero(values >= thresh)[0])


def fps(mesh: TriMesh, dists, n_centers: int) -> np.ndarray:
    """Furthest-point sampling of ``n_centers`` vertices.

    The first center is the vertex of maximal area. ``dists`` must provide
    ``row(i)`` returning distances from vertex ``i`` to every vertex.
    """
    n = mesh.n_vertices
    if not 1 <= n_centers <= n:
        raise MeshError(f"cannot sample {n_centers} centers from {n} vertices")
    centers = [argmax_lowest(mesh.vertex_area)]
    mind = np.array(dists.row(centers[0]), dtype=np.float64)
    for _ in range(1, n_centers):
        cand = mind.copy()
        cand[centers] = -np.inf
        c = argmax_lowest(cand)
        centers.append(c)
        mind = np.minimum(mind, dists.row(c))
    return np.array(centers, dtype=np.int64)
