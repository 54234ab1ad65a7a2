"""Desk-scale overfit experiment shared by the scripts and the acceptance suite.

One synthetic template, four augmentations (rotation, subdivision, decimation
and a mix), 50 epochs of 4 pairs = 200 optimizer steps.
"""

from __future__ import annotations

import time
from dataclasses import asdict, dataclass
from dataclasses import field as dc_field

import numpy as np

from .descriptor import DescriptorConfig, DescriptorNet, forward
from .field import FieldConfig, build_field
from .geodesics import Geodesics
from .matching import flip_rate, label_transfer, mean_geodesic_error, pearson_local, retrieve
from .mesh import AugmentSpec, augment
from .synth import SYM_PAIRS, SynthSpec, humanoid_template
from .training import TrainConfig, sym_mask, train

MA_WINDOW = 8  # two epochs of four pairs


@dataclass
class OverfitConfig:
    resolution: float = 0.1  # 294-vertex template
    descriptor: dict = dc_field(default_factory=lambda: {"patch_size": 16})
    field_cfg: dict = dc_field(default_factory=dict)
    train: dict = dc_field(
        default_factory=lambda: {
            "total_epochs": 50,
            "warmup_epochs": 5,
            "transition_epochs": 10,
            "tau": 0.002,
            "lr": 3e-3,
        }
    )

    def to_dict(self) -> dict:
        return asdict(self)


def augment_specs(n: int) -> list:
    """The four augmentation chains used for overfitting a template of ``n`` vertices."""
    return [
        AugmentSpec(["rotate"], seed=1),
        AugmentSpec(["midpoint_subdivide", "rotate"], seed=2),
        AugmentSpec([{"op": "cluster_decimate", "target_vertex_count": int(0.6 * n)}, "rotate"], seed=3),
        AugmentSpec(
            ["midpoint_subdivide", {"op": "cluster_decimate", "target_vertex_count": int(1.5 * n)}, "rotate"],
            seed=4,
        ),
    ]


@dataclass(eq=False)
class OverfitData:
    template: object
    labels: np.ndarray
    geo: Geodesics
    field: object
    dataset: list  # [(mesh, AnchorMap)]


def overfit_data(cfg: OverfitConfig | None = None) -> OverfitData:
    cfg = cfg or OverfitConfig()
    tmp, labels, _ = humanoid_template(SynthSpec(resolution=cfg.resolution))
    geo = Geodesics(tmp)
    fld = build_field(tmp, labels, geo.matrix(), FieldConfig.from_dict(cfg.field_cfg))
    dataset = [augment(tmp, labels, s) for s in augment_specs(tmp.n_vertices)]
    return OverfitData(tmp, labels, geo, fld, dataset)


def soft_drop(trace, warmup_steps: int, window: int = MA_WINDOW) -> tuple:
    """Moving average of L_soft at the end of warm-up, at the end of training, and the relative drop."""
    ls = np.array([r["l_soft"] for r in trace])
    start = ls[max(warmup_steps - window, 0) : max(warmup_steps, 1)].mean()
    end = ls[-window:].mean()
    return float(start), float(end), float(1.0 - end / start)


def evaluate(net, data: OverfitData, sym_pairs=SYM_PAIRS) -> dict:
    """Augmented-to-template matching metrics, one entry per augmentation."""
    d_tmp, _ = forward(data.template, data.geo, net)
    errs, accs, flips, left_flips, msims = [], [], [], [], []
    for mesh, anchors in data.dataset:
        d_aug, _ = forward(mesh, Geodesics(mesh), net)
        corr = retrieve(d_aug, d_tmp)
        errs.append(mean_geodesic_error(corr, anchors.h, data.template, data.geo))
        accs.append(float((label_transfer(corr, data.labels) == anchors.labels_aug).mean()))
        flips.append(flip_rate(corr, anchors.labels_aug, data.labels, sym_pairs))
        left_flips.append(flip_rate(corr, anchors.labels_aug, data.labels, sym_pairs, directed=True))
        a = d_aug.z.astype(np.float64) @ d_tmp.z.T.astype(np.float64)
        msims.append(float(a[sym_mask(anchors.labels_aug, data.labels, sym_pairs)].mean()))
    return {
        "error": errs,
        "accuracy": accs,
        "flip_rate": flips,
        "left_flip_rate": left_flips,
        "masked_similarity": msims,
        "mean_error": float(np.mean(errs)),
        "mean_accuracy": float(np.mean(accs)),
        "mean_flip_rate": float(np.mean(flips)),
        "mean_left_flip_rate": float(np.mean(left_flips)),
        "mean_masked_similarity": float(np.mean(msims)),
        "pearson": pearson_local(d_tmp, data.geo, k=50),
    }


def run_overfit(cfg: OverfitConfig | None = None, data: OverfitData | None = None, **train_overrides) -> dict:
    """Train from scratch and evaluate. ``train_overrides`` patch the training config."""
    cfg = cfg or OverfitConfig()
    data = data or overfit_data(cfg)
    tcfg = TrainConfig.from_dict({**cfg.train, **train_overrides})
    net = DescriptorNet(DescriptorConfig.from_dict(cfg.descriptor))
    t0 = time.perf_counter()
    net, trace = train(data.template, data.labels, data.dataset, data.field, tcfg, net=net, template_geo=data.geo)
    seconds = time.perf_counter() - t0
    start, end, drop = soft_drop(trace, tcfg.warmup_epochs * len(data.dataset))
    out = evaluate(net, data, tcfg.sym_pairs)
    out.update(
        net=net,
        trace=trace,
        train_seconds=seconds,
        steps=len(trace),
        soft_start=start,
        soft_end=end,
        soft_drop=drop,
    )
    return out
