"""Losses, gradients, AdamW updates, curriculum and the training loop."""

from __future__ import annotations

import csv
import hashlib
import io
import logging
import math
from dataclasses import asdict, dataclass, field, fields

import numpy as np
import torch
from scipy import sparse

from .binio import atomic_write
from .descriptor import DescriptorNet, MeshInputs, NumericalError, prepare_inputs, tensors_to_bytes
from .field import AugmentedField, GeodesicField, field_for_augmented, hard_anchor_field
from .geodesics import Geodesics

logger = logging.getLogger(__name__)

TRACE_COLUMNS = ["step", "epoch", "l_soft", "l_part", "l_sym", "total", "lambda_part", "lambda_soft"]


class TrainingDiverged(NumericalError):
    pass


@dataclass
class TrainConfig:
    tau: float = 0.07
    lambda_soft: float = 0.3  # final contrastive weight
    lambda_part: float = 0.6  # final part weight
    lambda_sym: float = 0.3
    lambda_part_warmup: float = 1.0
    label_smoothing: float = 0.1
    warmup_epochs: int = 1
    transition_epochs: int = 8
    total_epochs: int = 13
    lr: float = 1e-3
    weight_decay: float = 1e-2
    beta1: float = 0.9
    beta2: float = 0.999
    opt_eps: float = 1e-8
    seed: int = 0
    sym_pairs: list = field(default_factory=lambda: [[2, 3], [4, 5]])
    use_field: bool = True  # False: one-hot hard-anchor targets
    contrastive: str = "infonce"  # "mse" regresses similarities onto the field
    max_template_columns: int = 0  # >0 subsamples softmax columns above this template size
    shuffle: bool = True

    def __post_init__(self):
        if self.tau <= 0:
            raise ValueError("tau must be positive")
        if min(self.lambda_soft, self.lambda_part, self.lambda_sym, self.lambda_part_warmup) < 0:
            raise ValueError("loss weights must be non-negative")
        if not 0 <= self.label_smoothing < 1:
            raise ValueError("label_smoothing must be in [0, 1)")
        if self.warmup_epochs + self.transition_epochs > self.total_epochs and self.total_epochs > 0:
            raise ValueError("warmup + transition epochs exceed total epochs")
        if self.contrastive not in ("infonce", "mse"):
            raise ValueError(f"unknown contrastive mode {self.contrastive!r}")
        self.sym_pairs = [sorted(int(x) for x in p) for p in self.sym_pairs]

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        unknown = set(d) - {f.name for f in fields(cls)}
        if unknown:
            raise ValueError(f"unknown train config keys: {sorted(unknown)}")
        return cls(**d)

    def to_dict(self) -> dict:
        return asdict(self)


# ---------------------------------------------------------------------------
# losses


def _t(x, dtype=torch.float64):
    if isinstance(x, torch.Tensor):
        return x
    return torch.as_tensor(np.asarray(x), dtype=dtype)


def similarity(z_aug, z_tmp):
    """Cosine similarity matrix for unit-norm descriptor rows."""
    return _t(z_aug) @ _t(z_tmp).T


def _targets(rows, shape):
    """(row index, col index, weight) triplets of a field-row matrix."""
    if isinstance(rows, AugmentedField):
        rows = rows.to_sparse()
    if sparse.issparse(rows):
        coo = rows.tocoo()
        return coo.row, coo.col, coo.data
    dense = rows.detach().numpy() if isinstance(rows, torch.Tensor) else np.asarray(rows)
    if dense.shape != shape:
        raise ValueError(f"field rows have shape {dense.shape}, expected {shape}")
    r, c = np.nonzero(dense)
    return r, c, dense[r, c]


def soft_infonce(a, rows, tau: float, columns=None):
    """Field-weighted InfoNCE.

    ``-1/n_aug * sum_iv S[i,v] * log softmax_v(a[i] / tau)[v]``. ``rows`` is a
    sparse (n_aug, n_tmp) matrix, an :class:`AugmentedField` or a dense array.
    ``columns`` optionally restricts the softmax denominator to a column subset
    (which must contain every target column).
    """
    a = _t(a)
    if not torch.isfinite(a).all():
        raise NumericalError("non-finite similarity matrix")
    r, c, w = _targets(rows, tuple(a.shape))
    logits = a / tau
    if columns is not None:
        cols = torch.as_tensor(np.asarray(columns))
        sub = logits[:, cols]
    else:
        sub = logits
    m = sub.max(dim=1, keepdim=True).values.detach()
    lse = m.squeeze(1) + torch.log(torch.exp(sub - m).sum(1))
    r_t = torch.as_tensor(r, dtype=torch.long)
    c_t = torch.as_tensor(c, dtype=torch.long)
    w_t = torch.as_tensor(w, dtype=a.dtype)
    logp = logits[r_t, c_t] - lse[r_t]
    return -(w_t * logp).sum() / a.shape[0]


def mse_regression(a, rows):
    """Ablation replacing the contrastive term: squared error between similarities and field rows."""
    a = _t(a)
    r, c, w = _targets(rows, tuple(a.shape))
    target = torch.zeros_like(a)
    target[torch.as_tensor(r, dtype=torch.long), torch.as_tensor(c, dtype=torch.long)] = torch.as_tensor(w, dtype=a.dtype)
    return ((a - target) ** 2).sum() / a.shape[0]


def smoothed_ce(logits, labels, smoothing: float):
    logits = _t(logits)
    labels = torch.as_tensor(np.asarray(labels), dtype=torch.long)
    n_cls = logits.shape[1]
    if labels.numel() and (labels.min() < 0 or labels.max() >= n_cls):
        raise ValueError(f"labels out of range [0, {n_cls})")
    logp = torch.log_softmax(logits, dim=1)
    nll = -logp.gather(1, labels[:, None]).squeeze(1)
    uniform = -logp.mean(1)
    return ((1 - smoothing) * nll + smoothing * uniform).mean()


def part_loss(p_aug, p_tmp, labels_aug, labels_tmp, smoothing: float = 0.0):
    return 0.5 * (smoothed_ce(p_aug, labels_aug, smoothing) + smoothed_ce(p_tmp, labels_tmp, smoothing))


def sym_mask(labels_aug, labels_tmp, sym_pairs) -> np.ndarray:
    """Boolean (n_aug, n_tmp) mask of pairs whose labels form a declared symmetric pair."""
    la = np.asarray(labels_aug)[:, None]
    lt = np.asarray(labels_tmp)[None, :]
    m = np.zeros((la.shape[0], lt.shape[1]), dtype=bool)
    for p, q in sym_pairs:
        m |= ((la == p) & (lt == q)) | ((la == q) & (lt == p))
    return m


def sym_loss(a, mask):
    a = _t(a)
    mask = _t(mask, dtype=a.dtype).to(a.dtype)
    if tuple(mask.shape) != tuple(a.shape):
        raise ValueError(f"mask shape {tuple(mask.shape)} does not match similarity shape {tuple(a.shape)}")
    return (mask * a).sum() / a.shape[0]


def total_loss(l_soft, l_part, l_sym, weights):
    """``weights`` = (lambda_soft, lambda_part, lambda_sym); zero weights drop their term exactly."""
    out = 0.0
    for w, l in zip(weights, (l_soft, l_part, l_sym)):
        if w != 0:
            out = out + w * l
    return out


# ---------------------------------------------------------------------------
# curriculum and optimizer


def curriculum(epoch: float, cfg: TrainConfig):
    """``(lambda_part, lambda_soft)`` at a (possibly fractional) epoch.

    Warm-up trains the part loss alone; the transition blends to the final
    weights along ``(1 - cos(pi t)) / 2``.
    """
    if not 0 <= epoch < cfg.total_epochs:
        raise ValueError(f"epoch {epoch} outside [0, {cfg.total_epochs})")
    start = (cfg.lambda_part_warmup, 0.0)
    end = (cfg.lambda_part, cfg.lambda_soft)
    if epoch < cfg.warmup_epochs:
        return start
    if cfg.transition_epochs == 0 or epoch >= cfg.warmup_epochs + cfg.transition_epochs:
        return end
    t = (epoch - cfg.warmup_epochs) / cfg.transition_epochs
    s = 0.5 * (1.0 - math.cos(math.pi * t))
    return (start[0] + (end[0] - start[0]) * s, start[1] + (end[1] - start[1]) * s)


def adamw_state(params: dict) -> dict:
    return {
        "m": {k: torch.zeros_like(p) for k, p in params.items()},
        "v": {k: torch.zeros_like(p) for k, p in params.items()},
    }


def adamw_step(params: dict, grads: dict, state: dict, cfg: TrainConfig, step_index: int) -> None:
    """In-place AdamW update (decoupled weight decay, bias correction); ``step_index`` starts at 1."""
    b1, b2 = cfg.beta1, cfg.beta2
    c1 = 1.0 - b1**step_index
    c2 = 1.0 - b2**step_index
    with torch.no_grad():
        for k, p in params.items():
            g = grads[k]
            m, v = state["m"][k], state["v"][k]
            if g.shape != p.shape or m.shape != p.shape or v.shape != p.shape:
                raise ValueError(f"shape mismatch for {k}")
            p.mul_(1.0 - cfg.lr * cfg.weight_decay)
            m.mul_(b1).add_(g, alpha=1 - b1)
            v.mul_(b2).addcmul_(g, g, value=1 - b2)
            p.sub_(cfg.lr * (m / c1) / ((v / c2).sqrt() + cfg.opt_eps))


# ---------------------------------------------------------------------------
# pairs, gradients, training


@dataclass(eq=False)
class Pair:
    """One (template, augmented) training example with precomputed inputs."""

    tmp: MeshInputs
    aug: MeshInputs
    rows: sparse.csr_matrix  # (n_aug, n_tmp) field rows
    labels_aug: np.ndarray
    labels_tmp: np.ndarray
    mask: torch.Tensor  # (n_aug, n_tmp) symmetric-pair mask


def make_pair(tmp_inputs, aug_mesh, anchors, fld: GeodesicField, net_cfg, cfg: TrainConfig, aug_geo=None) -> Pair:
    if not cfg.use_field:
        fld = hard_anchor_field(fld.n)
    rows = field_for_augmented(fld, anchors).to_sparse()
    aug_inputs = prepare_inputs(aug_mesh, aug_geo or Geodesics(aug_mesh), net_cfg)
    mask = sym_mask(anchors.labels_aug, anchors.labels_tmp, cfg.sym_pairs)
    return Pair(
        tmp=tmp_inputs,
        aug=aug_inputs,
        rows=rows,
        labels_aug=np.asarray(anchors.labels_aug),
        labels_tmp=np.asarray(anchors.labels_tmp),
        mask=torch.as_tensor(mask),
    )


def pair_losses(net: DescriptorNet, pair: Pair, cfg: TrainConfig, columns=None):
    """Returns ``(l_soft, l_part, l_sym, A)`` as tensors."""
    z_t, p_t, _ = net.run(pair.tmp)
    z_a, p_a, _ = net.run(pair.aug)
    a = z_a @ z_t.T
    if cfg.contrastive == "infonce":
        l_soft = soft_infonce(a, pair.rows, cfg.tau, columns=columns)
    else:
        l_soft = mse_regression(a, pair.rows)
    l_part = part_loss(p_a, p_t, pair.labels_aug, pair.labels_tmp, cfg.label_smoothing)
    l_sym = sym_loss(a, pair.mask)
    return l_soft, l_part, l_sym, a


def _batch_loss(net, pairs, cfg, weights):
    tot = 0.0
    parts = np.zeros(3)
    for pair in pairs:
        l_soft, l_part, l_sym, _ = pair_losses(net, pair, cfg)
        tot = tot + total_loss(l_soft, l_part, l_sym, weights)
        parts += [_scalar(l_soft), _scalar(l_part), _scalar(l_sym)]
    return tot / len(pairs), parts / len(pairs)


def gradients(net: DescriptorNet, pairs, cfg: TrainConfig, weights=None):
    """Reverse-mode gradients of the (pair-averaged) total loss for every parameter.

    Returns
    -------
    grads : dict name -> tensor
    loss : float
    """
    if isinstance(pairs, Pair):
        pairs = [pairs]
    weights = weights if weights is not None else (cfg.lambda_soft, cfg.lambda_part, cfg.lambda_sym)
    params = dict(net.named_parameters())
    loss, _ = _batch_loss(net, pairs, cfg, weights)
    if not isinstance(loss, torch.Tensor):
        return {k: torch.zeros_like(p) for k, p in params.items()}, float(loss)
    gs = torch.autograd.grad(loss, list(params.values()), allow_unused=True)
    out = {}
    for (k, p), g in zip(params.items(), gs):
        g = torch.zeros_like(p) if g is None else g
        if not torch.isfinite(g).all():
            raise NumericalError(f"non-finite gradient in {k}")
        out[k] = g
    return out, _scalar(loss)


def _scalar(x) -> float:
    return float(x.detach()) if isinstance(x, torch.Tensor) else float(x)


def trace_csv(trace) -> str:
    buf = io.StringIO()
    w = csv.DictWriter(buf, fieldnames=TRACE_COLUMNS, lineterminator="\n")
    w.writeheader()
    for row in trace:
        w.writerow({k: (repr(row[k]) if isinstance(row[k], float) else row[k]) for k in TRACE_COLUMNS})
    return buf.getvalue()


def trace_hash(trace) -> str:
    return hashlib.sha256(trace_csv(trace).encode()).hexdigest()


def checkpoint_bytes(net: DescriptorNet, state: dict | None, step: int) -> bytes:
    tensors = dict(net.state_dict())
    if state is not None:
        for k in state["m"]:
            tensors[f"adamw.m.{k}"] = state["m"][k]
            tensors[f"adamw.v.{k}"] = state["v"][k]
        tensors["adamw.step"] = torch.tensor([float(step)])
    return tensors_to_bytes(tensors, {"descriptor": net.cfg.to_dict()})


def train(
    template,
    labels_tmp,
    dataset,
    fld: GeodesicField,
    cfg: TrainConfig,
    net: DescriptorNet | None = None,
    template_geo=None,
    checkpoint_path=None,
    checkpoint_every: int = 0,
    pairs=None,
):
    """Train ``net`` on (augmented mesh, AnchorMap) pairs against the template.

    Returns
    -------
    net : DescriptorNet
    trace : list of dicts with ``TRACE_COLUMNS``
    """
    if not dataset and pairs is None:
        raise ValueError("empty dataset")
    net = net or DescriptorNet()
    template_geo = template_geo or Geodesics(template)
    if pairs is None:
        tmp_inputs = prepare_inputs(template, template_geo, net.cfg)
        pairs = [make_pair(tmp_inputs, m, a, fld, net.cfg, cfg) for m, a in dataset]
    params = dict(net.named_parameters())
    state = adamw_state(params)
    rng = np.random.default_rng(cfg.seed)
    trace = []
    step = 0
    n = len(pairs)
    n_tmp = pairs[0].tmp.ungroup_w.shape[0]
    subsample = cfg.max_template_columns and n_tmp > cfg.max_template_columns
    for epoch in range(cfg.total_epochs):
        order = rng.permutation(n) if cfg.shuffle else np.arange(n)
        for j, k in enumerate(order):
            pair = pairs[k]
            e = epoch + j / n
            lam_part, lam_soft = curriculum(e, cfg)
            weights = (lam_soft, lam_part, cfg.lambda_sym)
            columns = None
            if subsample:
                support = np.unique(pair.rows.indices)
                extra = rng.choice(n_tmp, cfg.max_template_columns, replace=False)
                columns = np.union1d(support, extra)
            l_soft, l_part, l_sym, _ = pair_losses(net, pair, cfg, columns=columns)
            loss = total_loss(l_soft, l_part, l_sym, weights)
            step += 1
            vals = [_scalar(l_soft), _scalar(l_part), _scalar(l_sym), _scalar(loss)]
            if not all(np.isfinite(vals)):
                raise TrainingDiverged(f"loss became non-finite at step {step}")
            if isinstance(loss, torch.Tensor) and loss.requires_grad:
                gs = torch.autograd.grad(loss, list(params.values()), allow_unused=True)
                grads = {}
                for (name, p), g in zip(params.items(), gs):
                    g = torch.zeros_like(p) if g is None else g
                    if not torch.isfinite(g).all():
                        raise TrainingDiverged(f"non-finite gradient in {name} at step {step}")
                    grads[name] = g
                adamw_step(params, grads, state, cfg, step)
            trace.append(
                {
                    "step": step,
                    "epoch": epoch,
                    "l_soft": vals[0],
                    "l_part": vals[1],
                    "l_sym": vals[2],
                    "total": vals[3],
                    "lambda_part": lam_part,
                    "lambda_soft": lam_soft,
                }
            )
            if checkpoint_path and checkpoint_every and step % checkpoint_every == 0:
                atomic_write(checkpoint_path, checkpoint_bytes(net, state, step))
    if checkpoint_path:
        atomic_write(checkpoint_path, checkpoint_bytes(net, state, step))
    return net, trace
