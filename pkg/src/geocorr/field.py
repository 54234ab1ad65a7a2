"""Canonical geodesic correspondence field on the template.

Each template vertex ``i`` gets a sparse distribution over its geodesic
neighbourhood: a Gaussian in geodesic distance, optionally weighted by
``1 + |curvature|`` and restricted to vertices sharing the part label of ``i``.
Neighbourhood sizes adapt to local vertex density. The field is built once and
indexed through anchors for every augmented mesh.
"""

from __future__ import annotations

import logging
import struct
from dataclasses import asdict, dataclass, fields
from pathlib import Path

import numpy as np
from scipy import sparse

from .binio import FormatError, atomic_write, pack_header, unpack_header

logger = logging.getLogger(__name__)

_MAGIC = b"GFLD"


class FieldError(ValueError):
    pass


@dataclass
class FieldConfig:
    sigma_rel: float = 0.05  # kernel width as a fraction of sqrt(total area)
    k_base: int = 32
    k_min: int = 8
    k_max: int = 50
    alpha: float = 0.5
    rho_clip: tuple = (0.25, 4.0)
    eps: float = 1e-8
    use_curvature: bool = True
    use_part_mask: bool = True

    def __post_init__(self):
        self.rho_clip = tuple(float(x) for x in self.rho_clip)
        if not 0 < self.k_min <= self.k_base <= self.k_max:
            raise FieldError("need 0 < k_min <= k_base <= k_max")
        if self.sigma_rel <= 0 or self.eps <= 0:
            raise FieldError("sigma_rel and eps must be positive")
        lo, hi = self.rho_clip
        if not 0 < lo <= hi:
            raise FieldError("rho_clip must satisfy 0 < lo <= hi")

    @classmethod
    def from_dict(cls, d: dict) -> "FieldConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise FieldError(f"unknown field config keys: {sorted(unknown)}")
        return cls(**d)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["rho_clip"] = list(self.rho_clip)
        return d


def density(areas, eps: float, rho_clip=(0.25, 4.0)) -> np.ndarray:
    """``rho_i = a_med / (A[i] + eps)`` clipped to ``rho_clip``."""
    areas = np.asarray(areas, dtype=np.float64)
    a_med = np.median(areas)
    rho = a_med / (areas + eps)
    return np.clip(rho, *rho_clip)


def adaptive_k(rho, cfg: FieldConfig) -> np.ndarray:
    """``K_i = clip(round(k_base * rho_i**alpha), k_min, k_max)``."""
    k = np.rint(cfg.k_base * np.asarray(rho, dtype=np.float64) ** cfg.alpha)
    return np.clip(k, cfg.k_min, cfg.k_max).astype(np.int64)


def base_kernel(dist_row, center: int, k: int, sigma: float):
    """Top-``k`` geodesic neighbours of ``center`` (itself included) with Gaussian weights.

    Ties in distance go to the lower vertex index. Returned entries are ordered
    by increasing distance.
    """
    dist_row = np.asarray(dist_row, dtype=np.float64)
    order = np.argsort(dist_row, kind="stable")[:k]
    if center not in order:
        # only when k is smaller than the number of zero-distance duplicates
        order = np.concatenate([[center], order[: k - 1]])
    w = np.exp(-(dist_row[order] ** 2) / sigma**2)
    return order.astype(np.int64), w


def modulate(idx, weights, curvature, labels, center: int, cfg: FieldConfig):
    """Curvature weighting and same-part masking of one kernel row.

    Returns ``(idx, weights, degenerate)``; ``degenerate`` is set when only the
    self entry survives masking (the row falls back to self-only).
    """
    idx = np.asarray(idx)
    w = np.asarray(weights, dtype=np.float64).copy()
    if cfg.use_curvature:
        w = w * (1.0 + np.abs(np.asarray(curvature)[idx]))
    if cfg.use_part_mask:
        labels = np.asarray(labels)
        w = np.where(labels[idx] == labels[center], w, 0.0)
    had_others = bool((idx != center).any())
    keep = w > 0
    idx, w = idx[keep], w[keep]
    degenerate = had_others and not (idx != center).any()
    if center not in idx:
        degenerate = True
    if degenerate:
        idx = np.array([center], dtype=np.int64)
        w = np.ones(1)
    return idx, w, degenerate


@dataclass(eq=False)
class GeodesicField:
    """Row-normalised sparse field stored CSR-style.

    ``weights`` are float32 so the binary round trip is exact.
    """

    indptr: np.ndarray
    indices: np.ndarray
    weights: np.ndarray
    k: np.ndarray
    k_max: int
    degenerate_rows: int = 0

    @property
    def n(self) -> int:
        return len(self.indptr) - 1

    def row(self, i: int):
        s, e = self.indptr[i], self.indptr[i + 1]
        return self.indices[s:e], self.weights[s:e]

    def to_sparse(self) -> sparse.csr_matrix:
        return sparse.csr_matrix(
            (self.weights.astype(np.float64), self.indices, self.indptr), shape=(self.n, self.n)
        )

    def to_bytes(self) -> bytes:
        out = [pack_header(_MAGIC, self.n, self.k_max)]
        for i in range(self.n):
            idx, w = self.row(i)
            rec = np.empty(len(idx), dtype=[("i", "<u4"), ("w", "<f4")])
            rec["i"] = idx
            rec["w"] = w
            out.append(struct.pack("<I", len(idx)))
            out.append(rec.tobytes())
        return b"".join(out)

    @classmethod
    def from_bytes(cls, buf: bytes) -> "GeodesicField":
        (n, k_max), off = unpack_header(buf, _MAGIC, 2)
        indptr = np.zeros(n + 1, dtype=np.int64)
        idx_parts, w_parts = [], []
        rec_t = np.dtype([("i", "<u4"), ("w", "<f4")])
        for i in range(n):
            if off + 4 > len(buf):
                raise FormatError("truncated field file")
            (cnt,) = struct.unpack_from("<I", buf, off)
            off += 4
            if off + cnt * rec_t.itemsize > len(buf):
                raise FormatError("truncated field file")
            rec = np.frombuffer(buf, dtype=rec_t, count=cnt, offset=off)
            off += cnt * rec_t.itemsize
            idx_parts.append(rec["i"].astype(np.int64))
            w_parts.append(rec["w"].astype(np.float32))
            indptr[i + 1] = indptr[i] + cnt
        if off != len(buf):
            raise FormatError("trailing bytes in field file")
        return cls(
            indptr=indptr,
            indices=np.concatenate(idx_parts) if idx_parts else np.zeros(0, np.int64),
            weights=np.concatenate(w_parts) if w_parts else np.zeros(0, np.float32),
            k=np.diff(indptr),
            k_max=int(k_max),
        )

    def save(self, path) -> None:
        atomic_write(path, self.to_bytes())

    @classmethod
    def load(cls, path) -> "GeodesicField":
        return cls.from_bytes(Path(path).read_bytes())


def build_field(template, labels, geo, cfg: FieldConfig | None = None) -> GeodesicField:
    """Construct the normalised field on ``template``.

    Parameters
    ----------
    template : TriMesh
    labels : per-vertex part labels
    geo : object with ``rows(idx)`` (a :class:`GeoMatrix` or :class:`Geodesics`)
    cfg : FieldConfig
    """
    cfg = cfg or FieldConfig()
    n = template.n_vertices
    labels = np.asarray(labels)
    if len(labels) != n:
        raise FieldError("labels must cover every template vertex")
    if cfg.k_max > n:
        raise FieldError(f"k_max={cfg.k_max} exceeds vertex count {n}")
    sigma = cfg.sigma_rel * np.sqrt(template.total_area)
    rho = density(template.vertex_area, cfg.eps, cfg.rho_clip)
    ks = adaptive_k(rho, cfg)
    curv = template.curvature
    indptr = np.zeros(n + 1, dtype=np.int64)
    idx_parts, w_parts = [], []
    n_degenerate = 0
    block = 256
    for s in range(0, n, block):
        rows = geo.rows(np.arange(s, min(s + block, n)))
        for off, drow in enumerate(rows):
            i = s + off
            idx, w = base_kernel(drow, i, int(ks[i]), sigma)
            idx, w, deg = modulate(idx, w, curv, labels, i, cfg)
            n_degenerate += deg
            w = w / w.sum()
            idx_parts.append(idx)
            w_parts.append(w.astype(np.float32))
            indptr[i + 1] = indptr[i] + len(idx)
    if n_degenerate:
        logger.warning("field: %d rows fell back to self-only", n_degenerate)
    return GeodesicField(
        indptr=indptr,
        indices=np.concatenate(idx_parts),
        weights=np.concatenate(w_parts),
        k=ks,
        k_max=cfg.k_max,
        degenerate_rows=n_degenerate,
    )


def hard_anchor_field(n: int) -> GeodesicField:
    """One-hot rows (each vertex corresponds only to itself)."""
    return GeodesicField(
        indptr=np.arange(n + 1, dtype=np.int64),
        indices=np.arange(n, dtype=np.int64),
        weights=np.ones(n, dtype=np.float32),
        k=np.ones(n, dtype=np.int64),
        k_max=1,
    )


class AugmentedField:
    """Read-only view of template rows indexed through anchors ``h``.

    ``row(i)`` returns slices of the canonical arrays; nothing is copied.
    """

    def __init__(self, field: GeodesicField, h):
        h = np.asarray(h, dtype=np.int64)
        if h.size and (h.min() < 0 or h.max() >= field.n):
            raise FieldError("anchor index out of range for the template field")
        self.field = field
        self.h = h

    def __len__(self) -> int:
        return len(self.h)

    def row(self, i: int):
        return self.field.row(int(self.h[i]))

    def to_sparse(self) -> sparse.csr_matrix:
        """Dense-row gather as a (n_aug, n_template) CSR matrix."""
        return self.field.to_sparse()[self.h]


def field_for_augmented(field: GeodesicField, anchors) -> AugmentedField:
    h = anchors.h if hasattr(anchors, "h") else anchors
    return AugmentedField(field, h)
