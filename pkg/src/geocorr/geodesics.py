"""Geodesic distances on the weighted mesh edge graph (Dijkstra).

Graph distances overestimate true surface geodesics by a bounded stretch
factor; downstream code only uses distances relative to sqrt(total area).
"""

from __future__ import annotations

from collections import OrderedDict
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy.sparse import csgraph

from .binio import FormatError, atomic_write, pack_header, unpack_header
from .mesh import TriMesh

SENTINEL = np.finfo(np.float64).max
DENSE_CAP = 20_000
_MAGIC = b"GEOM"


class DisconnectedMeshError(RuntimeError):
    """Some vertex is unreachable; ``distances`` holds the row with sentinels."""

    def __init__(self, msg, distances=None):
        super().__init__(msg)
        self.distances = distances


def _dijkstra(mesh: TriMesh, sources) -> np.ndarray:
    d = csgraph.dijkstra(mesh.adjacency, directed=False, indices=np.asarray(sources))
    return np.atleast_2d(d)


def single_source(mesh: TriMesh, src: int, strict: bool = True) -> np.ndarray:
    """Shortest edge-graph distances from ``src`` to every vertex.

    Unreachable vertices get ``SENTINEL``. With ``strict`` (default) that
    raises :class:`DisconnectedMeshError` carrying the row.
    """
    if not 0 <= src < mesh.n_vertices:
        raise IndexError(f"source {src} out of range")
    d = _dijkstra(mesh, [src])[0]
    bad = ~np.isfinite(d)
    if bad.any():
        d[bad] = SENTINEL
        if strict:
            raise DisconnectedMeshError(f"{int(bad.sum())} vertices unreachable from {src}", d)
    return d


@dataclass(frozen=True, eq=False)
class GeoMatrix:
    """Dense symmetric all-pairs distance matrix."""

    d: np.ndarray

    @property
    def n(self) -> int:
        return self.d.shape[0]

    def row(self, i: int) -> np.ndarray:
        return self.d[i]

    def rows(self, idx) -> np.ndarray:
        return self.d[np.asarray(idx)]

    def to_bytes(self) -> bytes:
        return pack_header(_MAGIC, self.n) + self.d.astype("<f4").tobytes()

    @classmethod
    def from_bytes(cls, buf: bytes) -> "GeoMatrix":
        (n,), off = unpack_header(buf, _MAGIC, 1)
        if len(buf) != off + 4 * n * n:
            raise FormatError("GeoMatrix payload size mismatch")
        d = np.frombuffer(buf, dtype="<f4", offset=off).reshape(n, n).astype(np.float32)
        return cls(d)

    def save(self, path) -> None:
        atomic_write(path, self.to_bytes())

    @classmethod
    def load(cls, path) -> "GeoMatrix":
        return cls.from_bytes(Path(path).read_bytes())


def all_pairs(mesh: TriMesh, workers: int = 1, chunk: int = 256) -> GeoMatrix:
    """All-pairs distances; rows are computed independently so any worker count gives the same bits."""
    n = mesh.n_vertices
    chunks = [np.arange(s, min(s + chunk, n)) for s in range(0, n, chunk)]
    if workers > 1:
        with ThreadPoolExecutor(workers) as ex:
            parts = list(ex.map(lambda c: _dijkstra(mesh, c), chunks))
    else:
        parts = [_dijkstra(mesh, c) for c in chunks]
    d = np.concatenate(parts)
    if not np.isfinite(d).all():
        d[~np.isfinite(d)] = SENTINEL
        raise DisconnectedMeshError("mesh edge graph is disconnected", d)
    # opposite-direction path sums can differ in the last ulp
    return GeoMatrix(np.minimum(d, d.T))


class Geodesics:
    """Geodesic provider for one mesh.

    Meshes up to ``dense_cap`` vertices get a lazily computed dense matrix;
    larger meshes answer per-row queries through an LRU cache.
    """

    def __init__(self, mesh: TriMesh, dense_cap: int = DENSE_CAP, cache_rows: int = 512, workers: int = 1):
        self.mesh = mesh
        self.dense_cap = dense_cap
        self.cache_rows = cache_rows
        self.workers = workers
        self._dense = None
        self._cache = OrderedDict()

    @property
    def n(self) -> int:
        return self.mesh.n_vertices

    @property
    def dense(self) -> bool:
        return self.n <= self.dense_cap

    def matrix(self) -> GeoMatrix:
        if not self.dense:
            raise MemoryError(f"{self.n} vertices exceeds dense cap {self.dense_cap}")
        if self._dense is None:
            self._dense = all_pairs(self.mesh, workers=self.workers)
        return self._dense

    def rows(self, idx) -> np.ndarray:
        idx = np.atleast_1d(np.asarray(idx, dtype=np.int64))
        if self._dense is not None:
            return self._dense.d[idx]
        missing = [int(i) for i in dict.fromkeys(idx.tolist()) if i not in self._cache]
        if missing:
            d = _dijkstra(self.mesh, missing)
            if not np.isfinite(d).all():
                raise DisconnectedMeshError("mesh edge graph is disconnected")
            for i, r in zip(missing, d):
                r.setflags(write=False)
                self._cache[i] = r
        out = np.stack([self._cache[int(i)] for i in idx])
        for i in idx.tolist():
            self._cache.move_to_end(i)
        while len(self._cache) > max(self.cache_rows, len(idx)):
            self._cache.popitem(last=False)
        return out

    def row(self, i: int) -> np.ndarray:
        return self.rows([i])[0]


class EuclideanDistances:
    """Straight-line distances with the same interface as :class:`Geodesics`."""

    def __init__(self, mesh: TriMesh):
        self.mesh = mesh

    @property
    def n(self) -> int:
        return self.mesh.n_vertices

    def rows(self, idx) -> np.ndarray:
        v = self.mesh.vertices
        idx = np.atleast_1d(np.asarray(idx, dtype=np.int64))
        return np.linalg.norm(v[None, :, :] - v[idx][:, None, :], axis=2)

    def row(self, i: int) -> np.ndarray:
        return self.rows([i])[0]
