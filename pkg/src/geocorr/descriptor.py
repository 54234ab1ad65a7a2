"""Per-vertex descriptors from geodesic patches.

Pipeline: furthest-point patch centers and geodesic TopM grouping, a patch
feature encoder with softmax-weighted taps, a global encoding of the
center-center distance vector, fusion of both, and inverse-distance
ungrouping back to vertices followed by unit normalisation.
"""

from __future__ import annotations

import json
import struct
from dataclasses import asdict, dataclass, fields
from pathlib import Path

import numpy as np
import torch
from torch import nn

from .binio import FormatError, atomic_write, pack_header, unpack_header
from .geodesics import EuclideanDistances, Geodesics
from .mesh import TIE_RTOL, MeshError, TriMesh, fps, surface_frame

N_MEMBER_FEATURES = 7
N_PATCH_FEATURES = 4


class NumericalError(RuntimeError):
    pass


@dataclass
class DescriptorConfig:
    n_patches: int = 64
    patch_size: int = 32
    k_ungroup: int = 3
    p: float = 2.0
    eps: float = 1e-8
    d_sem: int = 64
    d_geo: int = 32
    d_out: int = 64
    n_parts: int = 6
    hidden: int = 128
    n_taps: int = 3
    geo_hidden: int = 64
    fuse_hidden: int = 128
    grouping: str = "geodesic"  # "euclidean" disables geodesic grouping/ungrouping
    geo_encoding: bool = True  # False feeds a zero global geodesic embedding
    in_dim: int = 0  # 0 selects the intrinsic provider's size
    seed: int = 0

    def __post_init__(self):
        if self.grouping not in ("geodesic", "euclidean"):
            raise ValueError(f"unknown grouping {self.grouping!r}")
        if self.n_taps < 1 or self.k_ungroup < 1:
            raise ValueError("n_taps and k_ungroup must be >= 1")

    @property
    def input_dim(self) -> int:
        return self.in_dim or self.patch_size * N_MEMBER_FEATURES + N_PATCH_FEATURES

    @classmethod
    def from_dict(cls, d: dict) -> "DescriptorConfig":
        unknown = set(d) - {f.name for f in fields(cls)}
        if unknown:
            raise ValueError(f"unknown descriptor config keys: {sorted(unknown)}")
        return cls(**d)

    def to_dict(self) -> dict:
        return asdict(self)


# ---------------------------------------------------------------------------
# grouping


@dataclass(eq=False)
class PatchSet:
    centers: np.ndarray  # (N,)
    members: np.ndarray  # (N, M), ascending distance to the center
    member_dist: np.ndarray  # (N, M)
    center_geo: np.ndarray  # (N, N)
    v2c: np.ndarray  # (n, k) nearest centers per vertex (positions into ``centers``)
    v2c_dist: np.ndarray  # (n, k)
    center_rows: np.ndarray  # (N, n) distances from each center


def _tie_order(d, scale, axis=1):
    """Stable ascending order where values closer than TIE_RTOL*scale count as equal."""
    q = np.round(np.asarray(d) / (TIE_RTOL * scale))
    return np.argsort(q, axis=axis, kind="stable")


def group(mesh: TriMesh, geo, n_patches: int, patch_size: int, k: int) -> PatchSet:
    """Geodesic patches around furthest-point centers.

    ``geo`` provides ``row``/``rows``; pass :class:`EuclideanDistances` for the
    Euclidean fallback.
    """
    n = mesh.n_vertices
    if n_patches > n or patch_size > n:
        raise MeshError(f"n_patches={n_patches}, patch_size={patch_size} exceed vertex count {n}")
    if k < 1:
        raise MeshError("k must be >= 1")
    scale = np.sqrt(mesh.total_area)
    centers = fps(mesh, geo, n_patches)
    rows = np.asarray(geo.rows(centers), dtype=np.float64)
    order = _tie_order(rows, scale)[:, :patch_size]
    member_dist = np.take_along_axis(rows, order, 1)
    cg = rows[:, centers]
    cg = np.minimum(cg, cg.T)
    np.fill_diagonal(cg, 0.0)
    kk = min(k, n_patches)
    v_order = _tie_order(rows.T, scale)[:, :kk]
    v_dist = np.take_along_axis(rows.T, v_order, 1)
    return PatchSet(
        centers=centers,
        members=order,
        member_dist=member_dist,
        center_geo=cg,
        v2c=v_order,
        v2c_dist=v_dist,
        center_rows=rows,
    )


def ungroup_weights(patches: PatchSet, n_patches: int, k: int, p: float, eps: float) -> np.ndarray:
    """Dense (n, N) row-stochastic interpolation matrix with ``w = 1/(d**p + eps)``."""
    n = patches.v2c.shape[0]
    k = min(k, patches.v2c.shape[1])
    idx = patches.v2c[:, :k]
    w = 1.0 / (patches.v2c_dist[:, :k] ** p + eps)
    w = w / w.sum(1, keepdims=True)
    out = np.zeros((n, n_patches))
    np.put_along_axis(out, idx, w, 1)
    return out


def ungroup(patch_emb, patches: PatchSet, k: int = 3, p: float = 2.0, eps: float = 1e-8):
    """Interpolate patch embeddings to vertices from the ``k`` nearest centers."""
    n_patches = len(patches.centers)
    if patch_emb.shape[0] != n_patches:
        raise ValueError(f"expected {n_patches} patch rows, got {patch_emb.shape[0]}")
    w = ungroup_weights(patches, n_patches, k, p, eps)
    if isinstance(patch_emb, torch.Tensor):
        return torch.as_tensor(w, dtype=patch_emb.dtype) @ patch_emb
    return w @ np.asarray(patch_emb)


def geodesic_vector(patches: PatchSet, total_area: float) -> np.ndarray:
    """Upper triangle (i < j, row-major) of the center distance matrix over sqrt(area)."""
    iu = np.triu_indices(len(patches.centers), 1)
    return patches.center_geo[iu] / np.sqrt(total_area)


# ---------------------------------------------------------------------------
# feature providers


def intrinsic_patch_features(mesh: TriMesh, patches: PatchSet) -> np.ndarray:
    """Rigid- and scale-invariant per-patch inputs.

    Per member (distance order): geodesic and chord distance to the center,
    relative area, log curvature, and the offset from the center in the
    chirality-aware surface frame. Per patch: center position in that frame and
    mean geodesic distance from the center to the surface.
    """
    n = mesh.n_vertices
    total = mesh.total_area
    s = np.sqrt(total)
    n_patches, m = patches.members.shape
    r0 = np.sqrt(m * total / (n * np.pi))
    centroid, axes = surface_frame(mesh)
    v = mesh.vertices
    c = v[patches.centers]
    mem = patches.members
    offs = (v[mem] - c[:, None, :]) @ axes.T
    chord = np.linalg.norm(v[mem] - c[:, None, :], axis=2)
    area = mesh.vertex_area[mem] * n / total
    curv = np.log1p(mesh.curvature[mem] * s) / 4.0
    per_member = np.stack(
        [patches.member_dist / r0, chord / r0, area, curv, offs[..., 0] / r0, offs[..., 1] / r0, offs[..., 2] / r0],
        axis=2,
    )
    pos = 2.0 * ((c - centroid) @ axes.T) / s
    ecc = (patches.center_rows * mesh.vertex_area[None, :]).sum(1) / total / s
    per_patch = np.concatenate([pos, ecc[:, None]], axis=1)
    return np.concatenate([per_member.reshape(n_patches, -1), per_patch], axis=1)


class ExternalFeatures:
    """Per-vertex features loaded from a descriptor-format file; patches read their center rows."""

    def __init__(self, z):
        self.z = np.asarray(z, dtype=np.float32)

    @classmethod
    def load(cls, path) -> "ExternalFeatures":
        return cls(DescriptorSet.load(path, normalize=False).z)

    @property
    def dim(self) -> int:
        return self.z.shape[1]

    def __call__(self, mesh: TriMesh, patches: PatchSet) -> np.ndarray:
        if len(self.z) != mesh.n_vertices:
            raise ValueError("external features do not match the mesh vertex count")
        return self.z[patches.centers].astype(np.float64)


# ---------------------------------------------------------------------------
# network


def _init_linear(layer: nn.Linear, rng: np.random.Generator) -> None:
    fan_out, fan_in = layer.weight.shape
    lim = np.sqrt(6.0 / (fan_in + fan_out))
    with torch.no_grad():
        layer.weight.copy_(torch.from_numpy(rng.uniform(-lim, lim, size=(fan_out, fan_in))))
        layer.bias.zero_()


class PatchEncoder(nn.Module):
    """MLP over patch inputs with a projection per tap and learned tap weights."""

    def __init__(self, in_dim, hidden, d_sem, n_taps):
        super().__init__()
        self.layers = nn.ModuleList([nn.Linear(in_dim if i == 0 else hidden, hidden) for i in range(n_taps)])
        self.taps = nn.ModuleList([nn.Linear(hidden, d_sem) for _ in range(n_taps)])
        self.layer_weights = nn.Parameter(torch.zeros(n_taps))

    def tap_outputs(self, x):
        outs = []
        h = x
        for layer, tap in zip(self.layers, self.taps):
            h = nn.functional.gelu(layer(h))
            outs.append(tap(h))
        return outs

    def forward(self, x):
        outs = self.tap_outputs(x)
        alpha = torch.softmax(self.layer_weights, 0)
        return sum(a * o for a, o in zip(alpha, outs))


class DescriptorNet(nn.Module):
    def __init__(self, cfg: DescriptorConfig | None = None):
        super().__init__()
        cfg = cfg or DescriptorConfig()
        self.cfg = cfg
        n_pairs = cfg.n_patches * (cfg.n_patches - 1) // 2
        self.patch_encoder = PatchEncoder(cfg.input_dim, cfg.hidden, cfg.d_sem, cfg.n_taps)
        self.geo_encoder = nn.Sequential(nn.Linear(n_pairs, cfg.geo_hidden), nn.GELU(), nn.Linear(cfg.geo_hidden, cfg.d_geo))
        self.fusion = nn.Sequential(
            nn.Linear(cfg.d_sem + cfg.d_geo, cfg.fuse_hidden), nn.GELU(), nn.Linear(cfg.fuse_hidden, cfg.d_out)
        )
        self.part_head = nn.Linear(cfg.d_out, cfg.n_parts)
        rng = np.random.default_rng(cfg.seed)
        for mod in self.modules():
            if isinstance(mod, nn.Linear):
                _init_linear(mod, rng)

    @property
    def dtype(self):
        return self.part_head.weight.dtype

    def encode_geodesic(self, v_geo):
        v = torch.as_tensor(np.asarray(v_geo) if not isinstance(v_geo, torch.Tensor) else v_geo, dtype=self.dtype)
        expected = self.geo_encoder[0].in_features
        if v.shape[-1] != expected:
            raise ValueError(f"v_geo has length {v.shape[-1]}, encoder expects {expected}")
        return self.geo_encoder(v)

    def run(self, inputs: "MeshInputs"):
        """Forward pass on precomputed mesh inputs.

        Returns ``(z_hat, logits, z)``: unit descriptors, part logits, and the
        pre-normalisation vertex features, all as tensors.
        """
        cfg = self.cfg
        x = torch.as_tensor(inputs.patch_x, dtype=self.dtype)
        if x.shape != (cfg.n_patches, cfg.input_dim):
            raise ValueError(f"patch inputs have shape {tuple(x.shape)}, expected ({cfg.n_patches}, {cfg.input_dim})")
        f_sem = _check(self.patch_encoder(x), "patch_encoder")
        if cfg.geo_encoding:
            g = _check(self.encode_geodesic(inputs.v_geo), "geo_encoder")
        else:
            g = torch.zeros(cfg.d_geo, dtype=self.dtype)
        zg = _check(self.fusion(torch.cat([f_sem, g.expand(cfg.n_patches, -1)], 1)), "fusion")
        z = _check(torch.as_tensor(inputs.ungroup_w, dtype=self.dtype) @ zg, "ungroup")
        logits = _check(self.part_head(z), "part_head")
        z_hat = _check(z / z.norm(dim=1, keepdim=True), "normalize")
        return z_hat, logits, z


def _check(t, stage):
    if not torch.isfinite(t).all():
        raise NumericalError(f"non-finite values after stage {stage!r}")
    return t


@dataclass(eq=False)
class MeshInputs:
    """Everything the network needs from one mesh; independent of parameters."""

    patches: PatchSet
    patch_x: np.ndarray
    v_geo: np.ndarray
    ungroup_w: np.ndarray


def prepare_inputs(mesh: TriMesh, geo, cfg: DescriptorConfig, provider=None) -> MeshInputs:
    geo = geo if geo is not None else Geodesics(mesh)
    if cfg.grouping == "euclidean":
        patches = group(mesh, EuclideanDistances(mesh), cfg.n_patches, cfg.patch_size, cfg.k_ungroup)
        cg = geo.rows(patches.centers)[:, patches.centers]
        cg = np.minimum(cg, cg.T)
        np.fill_diagonal(cg, 0.0)
        patches.center_geo = cg
    else:
        patches = group(mesh, geo, cfg.n_patches, cfg.patch_size, cfg.k_ungroup)
    x = provider(mesh, patches) if provider is not None else intrinsic_patch_features(mesh, patches)
    return MeshInputs(
        patches=patches,
        patch_x=x,
        v_geo=geodesic_vector(patches, mesh.total_area),
        ungroup_w=ungroup_weights(patches, cfg.n_patches, cfg.k_ungroup, cfg.p, cfg.eps),
    )


def forward(mesh: TriMesh, geo, net: DescriptorNet, provider=None):
    """Descriptors and part logits for ``mesh``.

    Returns
    -------
    DescriptorSet, (n, C) float array of part logits
    """
    inputs = prepare_inputs(mesh, geo, net.cfg, provider)
    with torch.no_grad():
        z_hat, logits, _ = net.run(inputs)
    return DescriptorSet(z_hat.detach().cpu().numpy().astype(np.float32)), logits.numpy()


# ---------------------------------------------------------------------------
# descriptor sets and files

_DESC_MAGIC = b"DESC"
_CKPT_MAGIC = b"GCKP"


@dataclass(eq=False)
class DescriptorSet:
    z: np.ndarray  # (n, dim) float32, unit rows

    def __post_init__(self):
        self.z = np.ascontiguousarray(self.z, dtype=np.float32)

    @classmethod
    def from_raw(cls, z) -> "DescriptorSet":
        z = np.asarray(z, dtype=np.float64)
        return cls(z / np.linalg.norm(z, axis=1, keepdims=True))

    @property
    def n(self) -> int:
        return self.z.shape[0]

    @property
    def dim(self) -> int:
        return self.z.shape[1]

    def to_bytes(self) -> bytes:
        return pack_header(_DESC_MAGIC, self.n, self.dim) + self.z.astype("<f4").tobytes()

    @classmethod
    def from_bytes(cls, buf: bytes) -> "DescriptorSet":
        (n, dim), off = unpack_header(buf, _DESC_MAGIC, 2)
        if len(buf) != off + 4 * n * dim:
            raise FormatError("descriptor payload size mismatch")
        return cls(np.frombuffer(buf, dtype="<f4", offset=off).reshape(n, dim))

    def save(self, path) -> None:
        atomic_write(path, self.to_bytes())

    @classmethod
    def load(cls, path, normalize: bool = False) -> "DescriptorSet":
        d = cls.from_bytes(Path(path).read_bytes())
        return cls.from_raw(d.z) if normalize else d


def tensors_to_bytes(tensors: dict, meta: dict | None = None) -> bytes:
    """Checkpoint layout: header (count, meta length, meta JSON), then per tensor
    name length, name, rank, dims, f32 data."""
    meta_b = json.dumps(meta or {}, sort_keys=True).encode()
    out = [pack_header(_CKPT_MAGIC, len(tensors), len(meta_b)), meta_b]
    for name, t in tensors.items():
        a = t.detach().cpu().numpy() if isinstance(t, torch.Tensor) else np.asarray(t)
        nb = name.encode()
        out.append(struct.pack("<I", len(nb)))
        out.append(nb)
        out.append(struct.pack(f"<I{a.ndim}I", a.ndim, *a.shape))
        out.append(a.astype("<f4").tobytes())
    return b"".join(out)


def tensors_from_bytes(buf: bytes):
    (count, meta_len), off = unpack_header(buf, _CKPT_MAGIC, 2)
    meta = json.loads(buf[off : off + meta_len].decode())
    off += meta_len
    tensors = {}
    for _ in range(count):
        (ln,) = struct.unpack_from("<I", buf, off)
        off += 4
        name = buf[off : off + ln].decode()
        off += ln
        (rank,) = struct.unpack_from("<I", buf, off)
        off += 4
        shape = struct.unpack_from(f"<{rank}I", buf, off)
        off += 4 * rank
        size = int(np.prod(shape)) if rank else 1
        tensors[name] = np.frombuffer(buf, dtype="<f4", count=size, offset=off).reshape(shape).astype(np.float32)
        off += 4 * size
    if off != len(buf):
        raise FormatError("trailing bytes in checkpoint")
    return tensors, meta


def save_net(net: DescriptorNet, path, extra: dict | None = None) -> None:
    tensors = dict(net.state_dict())
    tensors.update(extra or {})
    atomic_write(path, tensors_to_bytes(tensors, {"descriptor": net.cfg.to_dict()}))


def load_net(path):
    """Returns ``(net, extra_tensors)``; extra tensors are those not owned by the net."""
    tensors, meta = tensors_from_bytes(Path(path).read_bytes())
    net = DescriptorNet(DescriptorConfig.from_dict(meta["descriptor"]))
    own = net.state_dict()
    missing = set(own) - set(tensors)
    if missing:
        raise FormatError(f"checkpoint lacks tensors {sorted(missing)}")
    net.load_state_dict({k: torch.from_numpy(tensors[k].copy()) for k in own})
    extra = {k: v for k, v in tensors.items() if k not in own}
    return net, extra
