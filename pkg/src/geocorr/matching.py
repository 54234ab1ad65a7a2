"""Nearest-neighbour correspondence retrieval and evaluation metrics."""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .binio import atomic_write
from .mesh import TIE_RTOL


@dataclass(eq=False)
class Correspondence:
    map: np.ndarray  # target index per source vertex
    score: np.ndarray  # cosine similarity of the chosen match

    def save(self, path) -> None:
        lines = (f"{i} {int(j)} {float(s)!r}\n" for i, (j, s) in enumerate(zip(self.map, self.score)))
        atomic_write(path, "".join(lines).encode())

    @classmethod
    def load(cls, path) -> "Correspondence":
        data = np.loadtxt(path, ndmin=2)
        src = data[:, 0].astype(np.int64)
        if not np.array_equal(src, np.arange(len(src))):
            raise ValueError("correspondence file must list source indices 0..n-1 in order")
        return cls(map=data[:, 1].astype(np.int64), score=data[:, 2])


def retrieve(src, tgt, chunk: int = 4096) -> Correspondence:
    """Per-source argmax of cosine similarity over target descriptors (ties to the lower index)."""
    zs = np.asarray(src.z, dtype=np.float32)
    zt = np.asarray(tgt.z, dtype=np.float32)
    if zs.shape[1] != zt.shape[1]:
        raise ValueError(f"descriptor dimensions differ: {zs.shape[1]} vs {zt.shape[1]}")
    out = np.empty(len(zs), dtype=np.int64)
    score = np.empty(len(zs))
    for s in range(0, len(zs), chunk):
        sim = zs[s : s + chunk] @ zt.T
        j = np.argmax(sim, axis=1)
        out[s : s + chunk] = j
        score[s : s + chunk] = sim[np.arange(len(j)), j]
    return Correspondence(map=out, score=np.clip(score, -1.0, 1.0))


def pairwise_geodesic(geo, a, b) -> np.ndarray:
    """``d(a[i], b[i])`` for index arrays, fetching one distance row per unique ``b``."""
    a = np.asarray(a, dtype=np.int64)
    b = np.asarray(b, dtype=np.int64)
    ub, inv = np.unique(b, return_inverse=True)
    out = np.empty(len(a))
    block = 512
    for s in range(0, len(ub), block):
        rows = geo.rows(ub[s : s + block])
        sel = (inv >= s) & (inv < s + block)
        out[sel] = rows[inv[sel] - s, a[sel]]
    return out


def per_vertex_error(pred, gt, tgt_mesh, tgt_geo) -> np.ndarray:
    """Geodesic error per source vertex in units of sqrt(total target area)."""
    pmap = pred.map if isinstance(pred, Correspondence) else np.asarray(pred)
    gt = np.asarray(gt, dtype=np.int64)
    n = tgt_mesh.n_vertices
    if len(gt) != len(pmap):
        raise ValueError("ground truth must cover every source vertex")
    if gt.min(initial=0) < 0 or gt.max(initial=0) >= n:
        raise ValueError("ground-truth index out of range")
    return pairwise_geodesic(tgt_geo, pmap, gt) / np.sqrt(tgt_mesh.total_area)


def mean_geodesic_error(pred, gt, tgt_mesh, tgt_geo) -> float:
    """Mean geodesic error as a percentage of sqrt(total target area)."""
    return float(100.0 * per_vertex_error(pred, gt, tgt_mesh, tgt_geo).mean())


def local_pairs(geo, n: int, k: int, scale: float = 1.0):
    """(vertex, neighbour, distance) for the ``k`` geodesically nearest neighbours, self excluded."""
    if k >= n:
        raise ValueError(f"K={k} must be smaller than the vertex count {n}")
    src, dst, dist = [], [], []
    block = 512
    for s in range(0, n, block):
        rows = np.asarray(geo.rows(np.arange(s, min(s + block, n))), dtype=np.float64)
        ids = np.arange(s, s + len(rows))
        rows_ex = rows.copy()
        rows_ex[np.arange(len(rows)), ids] = np.inf
        q = np.round(rows_ex / (TIE_RTOL * scale))
        order = np.argsort(q, axis=1, kind="stable")[:, :k]
        src.append(np.repeat(ids, k))
        dst.append(order.ravel())
        dist.append(np.take_along_axis(rows, order, 1).ravel())
    return np.concatenate(src), np.concatenate(dst), np.concatenate(dist)


def pearson_local(desc, geo, k: int = 50) -> float:
    """Pearson correlation between cosine similarity and geodesic distance over K-nearest pairs."""
    z = np.asarray(desc.z, dtype=np.float64)
    src, dst, dist = local_pairs(geo, len(z), k)
    sim = np.einsum("ij,ij->i", z[src], z[dst])
    if np.std(sim) == 0 or np.std(dist) == 0:
        raise ValueError("degenerate correlation: zero variance")
    return float(np.corrcoef(sim, dist)[0, 1])


def label_transfer(corr: Correspondence, tgt_labels) -> np.ndarray:
    return np.asarray(tgt_labels)[corr.map]


def flip_rate(corr: Correspondence, src_labels, tgt_labels, sym_pairs, directed: bool = False) -> float:
    """Fraction of vertices in a symmetric part matched into its mirror part.

    With ``directed`` only the first part of each pair (the left side) is counted.
    """
    src_labels = np.asarray(src_labels)
    got = np.asarray(tgt_labels)[corr.map]
    flipped = total = 0
    for p, q in sym_pairs:
        for a, b in ((p, q),) if directed else ((p, q), (q, p)):
            sel = src_labels == a
            total += sel.sum()
            flipped += (got[sel] == b).sum()
    return float(flipped / total) if total else 0.0


def load_gt(path) -> np.ndarray:
    """Ground truth text file: line ``i`` holds the target vertex for source vertex ``i``."""
    return np.array([int(x) for x in Path(path).read_text().split()], dtype=np.int64)


def save_gt(gt, path) -> None:
    atomic_write(path, "".join(f"{int(x)}\n" for x in gt).encode())


def error_colors(err, cap: float = 0.3) -> np.ndarray:
    """Linear blue-to-red uint8 RGB colors for errors clipped to ``[0, cap]``."""
    t = np.clip(np.asarray(err, dtype=np.float64) / cap, 0.0, 1.0)
    rgb = np.stack([t, np.zeros_like(t), 1.0 - t], axis=1)
    return np.rint(255 * rgb).astype(np.uint8)
