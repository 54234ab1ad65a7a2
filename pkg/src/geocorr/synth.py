"""Synthetic articulated humanoids with part labels.

The body is a smooth union of labelled capsules meshed with marching cubes at
rest pose. Posed variants keep the template connectivity: every vertex follows
the rigid transform of its part (blended across joints), so ground-truth
correspondence to the template is the identity.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass, field, fields

import numpy as np
from scipy import sparse
from scipy.sparse import csgraph
from scipy.spatial.transform import Rotation
from skimage.measure import marching_cubes

from .mesh import MeshError, TriMesh

PART_NAMES = ["torso", "head", "left_arm", "right_arm", "left_leg", "right_leg"]
SYM_PAIRS = [(2, 3), (4, 5)]

# name: (label, parent, joint, end, radius)
# +x is the body's left, +y up, +z front
_BONES = {
    "torso": (0, None, (0.0, -0.05, 0.0), (0.0, 0.45, 0.0), 0.17),
    "head": (1, "torso", (0.0, 0.55, 0.0), (0.0, 0.78, 0.02), 0.12),
    "nose": (1, "head", (0.0, 0.66, 0.08), (0.0, 0.64, 0.15), 0.035),
    "left_upper_arm": (2, "torso", (0.16, 0.40, 0.0), (0.42, 0.22, 0.0), 0.055),
    "left_forearm": (2, "left_upper_arm", (0.42, 0.22, 0.0), (0.62, 0.05, 0.06), 0.045),
    "right_upper_arm": (3, "torso", (-0.16, 0.40, 0.0), (-0.42, 0.22, 0.0), 0.055),
    "right_forearm": (3, "right_upper_arm", (-0.42, 0.22, 0.0), (-0.62, 0.05, 0.06), 0.045),
    "left_thigh": (4, "torso", (0.09, -0.10, 0.0), (0.12, -0.55, 0.02), 0.075),
    "left_shin": (4, "left_thigh", (0.12, -0.55, 0.02), (0.13, -0.95, 0.0), 0.06),
    "left_foot": (4, "left_shin", (0.13, -0.97, 0.0), (0.14, -1.0, 0.16), 0.045),
    "right_thigh": (5, "torso", (-0.09, -0.10, 0.0), (-0.12, -0.55, 0.02), 0.075),
    "right_shin": (5, "right_thigh", (-0.12, -0.55, 0.02), (-0.13, -0.95, 0.0), 0.06),
    "right_foot": (5, "right_shin", (-0.13, -0.97, 0.0), (-0.14, -1.0, 0.16), 0.045),
}

# joints that may be posed, with max rotation angle (radians) per axis
_POSABLE = {
    "head": 0.3,
    "left_upper_arm": 0.6,
    "left_forearm": 0.6,
    "right_upper_arm": 0.6,
    "right_forearm": 0.6,
    "left_thigh": 0.35,
    "left_shin": 0.4,
    "right_thigh": 0.35,
    "right_shin": 0.4,
}


@dataclass
class SynthSpec:
    """Generator settings. ``resolution`` is the marching-cubes cell size in model units."""

    resolution: float = 0.05
    smooth: float = 0.04
    pose_scale: float = 1.0
    variants: int = 2
    seed: int = 0
    sym_pairs: list = field(default_factory=lambda: [list(p) for p in SYM_PAIRS])

    @classmethod
    def from_dict(cls, d: dict) -> "SynthSpec":
        unknown = set(d) - {f.name for f in fields(cls)}
        if unknown:
            raise ValueError(f"unknown synth spec keys: {sorted(unknown)}")
        return cls(**d)

    def to_dict(self) -> dict:
        return asdict(self)


def _segment_distance(p, a, b):
    ab = b - a
    t = np.clip(((p - a) @ ab) / (ab @ ab), 0.0, 1.0)
    return np.linalg.norm(p - (a + t[:, None] * ab), axis=1)


def _bone_sdf(p):
    names = list(_BONES)
    d = np.stack(
        [_segment_distance(p, np.array(_BONES[k][2]), np.array(_BONES[k][3])) - _BONES[k][4] for k in names], axis=1
    )
    return names, d


def _smooth_union(d, k):
    # log-sum-exp smooth minimum
    return -k * np.log(np.exp(-(d - d.min(1, keepdims=True)) / k).sum(1)) + d.min(1)


def humanoid_template(spec: SynthSpec | None = None):
    """Mesh the rest-pose humanoid.

    Returns
    -------
    mesh : TriMesh
    labels : (n,) int array of part labels (see ``PART_NAMES``)
    bone : (n,) int array, index of the nearest bone per vertex (for posing)
    """
    spec = spec or SynthSpec()
    h = spec.resolution
    lo = np.array([-0.8, -1.15, -0.3])
    hi = np.array([0.8, 0.95, 0.35])
    shape = np.ceil((hi - lo) / h).astype(int) + 1
    axes = [lo[k] + h * np.arange(shape[k]) for k in range(3)]
    grid = np.stack(np.meshgrid(*axes, indexing="ij"), -1).reshape(-1, 3)
    _, d = _bone_sdf(grid)
    sdf = _smooth_union(d, spec.smooth).reshape(shape)
    # keep samples away from the iso-level so no crossing lands next to a grid
    # corner; such crossings produce sliver triangles with exploding cotangents
    delta = 0.1 * h
    sdf = np.where(np.abs(sdf) < delta, np.where(sdf < 0, -delta, delta), sdf)
    verts, faces, _, _ = marching_cubes(sdf, level=0.0, spacing=(h, h, h), method="lewiner")
    verts = verts + lo
    mesh = _clean(verts, faces)
    names, d = _bone_sdf(mesh.vertices)
    bone = np.argmin(d, axis=1)
    labels = np.array([_BONES[names[b]][0] for b in bone], dtype=np.int64)
    return mesh, labels, bone


def _clean(verts, faces) -> TriMesh:
    """Merge coincident vertices, drop degenerate and duplicate faces, keep the largest component."""
    n = len(verts)
    e = np.concatenate([faces[:, [0, 1]], faces[:, [1, 2]], faces[:, [2, 0]]])
    short = e[np.linalg.norm(verts[e[:, 0]] - verts[e[:, 1]], axis=1) < 1e-12]
    g = sparse.coo_matrix((np.ones(len(short)), (short[:, 0], short[:, 1])), shape=(n, n))
    _, cluster = csgraph.connected_components(g, directed=False)
    counts = np.bincount(cluster)
    merged = np.zeros((counts.size, 3))
    np.add.at(merged, cluster, verts)
    verts = merged / counts[:, None]
    faces = cluster[faces]
    ok = (faces[:, 0] != faces[:, 1]) & (faces[:, 1] != faces[:, 2]) & (faces[:, 0] != faces[:, 2])
    faces = faces[ok]
    v = verts
    area = 0.5 * np.linalg.norm(np.cross(v[faces[:, 1]] - v[faces[:, 0]], v[faces[:, 2]] - v[faces[:, 0]]), axis=1)
    faces = faces[area > 1e-12]
    _, first_f = np.unique(np.sort(faces, axis=1), axis=0, return_index=True)
    faces = faces[np.sort(first_f)]
    used = np.zeros(len(verts), dtype=bool)
    used[faces.ravel()] = True
    remap = -np.ones(len(verts), dtype=np.int64)
    remap[used] = np.arange(used.sum())
    mesh = TriMesh(verts[used], remap[faces])
    ncomp, comp = csgraph.connected_components(mesh.adjacency, directed=False)
    if ncomp == 1:
        return mesh
    keep = comp == np.argmax(np.bincount(comp))
    remap = -np.ones(mesh.n_vertices, dtype=np.int64)
    remap[keep] = np.arange(keep.sum())
    f = remap[mesh.faces]
    return TriMesh(mesh.vertices[keep], f[(f >= 0).all(1)])


def _bone_transforms(angles: dict):
    """World rigid transforms (R, t) per bone from local joint rotations."""
    out = {}
    for name, (_, parent, joint, _, _) in _BONES.items():
        r_local = Rotation.from_rotvec(angles.get(name, np.zeros(3))).as_matrix()
        j = np.array(joint)
        if parent is None:
            r_par, t_par = np.eye(3), np.zeros(3)
        else:
            r_par, t_par = out[parent]
        # rotate about the joint in the rest frame, then apply the parent transform
        r = r_par @ r_local
        t = r_par @ (j - r_local @ j) + t_par
        out[name] = (r, t)
    return out


def random_pose(rng: np.random.Generator, scale: float = 1.0) -> dict:
    return {k: rng.uniform(-1, 1, 3) * lim * scale for k, lim in _POSABLE.items()}


def pose_mesh(mesh: TriMesh, bone, angles: dict, blend: float = 0.06) -> TriMesh:
    """Pose rest-pose vertices by blended per-bone rigid transforms.

    Each vertex is skinned to its nearest bone and, within ``blend`` of that
    bone's joint, linearly mixed with the parent bone transform.
    """
    names = list(_BONES)
    tr = _bone_transforms(angles)
    v = mesh.vertices
    out = np.empty_like(v)
    for b, name in enumerate(names):
        sel = bone == b
        if not sel.any():
            continue
        r, t = tr[name]
        p = v[sel]
        moved = p @ r.T + t
        parent = _BONES[name][1]
        if parent is not None:
            rp, tp = tr[parent]
            moved_p = p @ rp.T + tp
            dj = np.linalg.norm(p - np.array(_BONES[name][2]), axis=1)
            w = np.clip(0.5 + 0.5 * dj / blend, 0.5, 1.0)[:, None]
            moved = w * moved + (1 - w) * moved_p
        out[sel] = moved
    return mesh.with_vertices(out)


def check_humanoid(mesh: TriMesh, labels) -> None:
    if mesh.n_components != 1:
        raise MeshError(f"humanoid has {mesh.n_components} components")
    if len(labels) != mesh.n_vertices:
        raise MeshError("unlabelled vertices")
    missing = set(range(len(PART_NAMES))) - set(np.unique(labels).tolist())
    if missing:
        raise MeshError(f"parts without vertices: {sorted(missing)}")
