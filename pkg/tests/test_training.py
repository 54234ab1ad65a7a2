import math

import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy import sparse

from geocorr.descriptor import DescriptorConfig, DescriptorNet, NumericalError, prepare_inputs, tensors_from_bytes
from geocorr.field import FieldConfig, build_field
from geocorr.geodesics import Geodesics
from geocorr.mesh import AugmentSpec, augment
from geocorr.training import (
    TrainConfig,
    adamw_state,
    adamw_step,
    checkpoint_bytes,
    curriculum,
    gradients,
    make_pair,
    mse_regression,
    pair_losses,
    part_loss,
    soft_infonce,
    sym_loss,
    sym_mask,
    total_loss,
    trace_hash,
    train,
)
from oracles import central_difference, infonce_np, smoothed_ce_np, sym_np

TINY = dict(n_patches=8, patch_size=8, hidden=16, d_sem=16, d_geo=8, d_out=16, geo_hidden=16, fuse_hidden=16)


def _val(x):
    return x.item() if isinstance(x, torch.Tensor) else float(x)


# ---------------------------------------------------------------------------
# contrastive term


def test_uniform_similarity_gives_log_n():
    s = sparse.csr_matrix(np.array([[0.5, 0.5, 0, 0], [0, 0.2, 0.3, 0.5]]))
    assert abs(_val(soft_infonce(np.zeros((2, 4)), s, 0.07)) - math.log(4)) < 1e-12


def test_saturated_one_hot():
    a = np.zeros((3, 5))
    a[np.arange(3), [1, 4, 0]] = 50.0
    s = sparse.csr_matrix((np.ones(3), ([0, 1, 2], [1, 4, 0])), shape=(3, 5))
    assert _val(soft_infonce(a, s, 1.0)) < 1e-6


def test_two_by_two_closed_form():
    v = _val(soft_infonce(np.eye(2), np.eye(2), 1.0))
    assert v == pytest.approx(-math.log(math.e / (math.e + 1)), abs=1e-12)
    assert v == pytest.approx(0.3133, abs=1e-4)


@settings(max_examples=30, deadline=None)
@given(seed=st.integers(0, 10_000), tau=st.floats(0.01, 2.0), shift=st.floats(-5, 5))
def test_infonce_matches_oracle_and_is_shift_invariant(seed, tau, shift):
    rng = np.random.default_rng(seed)
    a = np.tanh(rng.normal(size=(6, 9)))
    s = rng.uniform(size=(6, 9)) * (rng.uniform(size=(6, 9)) < 0.4)
    s[np.arange(6), rng.integers(0, 9, 6)] += 0.1
    s /= s.sum(1, keepdims=True)
    loss = _val(soft_infonce(a, sparse.csr_matrix(s), tau))
    assert loss == pytest.approx(infonce_np(a, s, tau), rel=1e-10, abs=1e-12)
    c = shift + rng.normal(size=(6, 1))
    assert abs(_val(soft_infonce(a + c, sparse.csr_matrix(s), tau)) - loss) <= 1e-9 * max(1.0, abs(loss))
    ent = -np.where(s > 0, s * np.log(np.where(s > 0, s, 1)), 0).sum(1).mean()
    assert loss >= ent - 1e-6


def test_column_subset_denominator():
    rng = np.random.default_rng(0)
    a = rng.normal(size=(3, 6))
    s = np.zeros((3, 6))
    s[:, 1] = 1.0
    cols = [0, 1, 3]
    assert _val(soft_infonce(a, s, 0.5, columns=cols)) == pytest.approx(infonce_np(a[:, cols], s[:, cols], 0.5))


def test_non_finite_similarity_rejected():
    a = np.zeros((2, 2))
    a[0, 0] = np.nan
    with pytest.raises(NumericalError):
        soft_infonce(a, np.eye(2), 1.0)


def test_mse_ablation_value():
    a = np.array([[0.5, -0.5], [0.0, 1.0]])
    s = np.array([[1.0, 0.0], [0.25, 0.75]])
    assert _val(mse_regression(a, s)) == pytest.approx(((a - s) ** 2).sum() / 2)


# ---------------------------------------------------------------------------
# part and symmetry terms


def test_part_loss_uniform_logits():
    lab = np.array([0, 3, 5, 1])
    assert _val(part_loss(np.zeros((4, 6)), np.zeros((2, 6)), lab, lab[:2])) == pytest.approx(math.log(6), abs=1e-12)


def test_part_loss_saturated():
    lab = np.array([0, 2, 1])
    logits = np.zeros((3, 3))
    logits[np.arange(3), lab] = 50.0
    assert _val(part_loss(logits, logits, lab, lab)) < 1e-6


def test_full_smoothing_two_classes():
    logits = np.array([[2.0, 0.0]])
    v = _val(part_loss(logits, logits, [0], [1], smoothing=1.0))
    assert v == pytest.approx(1.1269, abs=1e-4)


@settings(max_examples=20, deadline=None)
@given(seed=st.integers(0, 10_000), eps=st.floats(0.0, 0.9))
def test_smoothed_ce_matches_oracle(seed, eps):
    rng = np.random.default_rng(seed)
    la, lt = rng.integers(0, 6, 7), rng.integers(0, 6, 5)
    pa, pt = rng.normal(size=(7, 6)) * 3, rng.normal(size=(5, 6)) * 3
    expected = 0.5 * (smoothed_ce_np(pa, la, eps) + smoothed_ce_np(pt, lt, eps))
    assert _val(part_loss(pa, pt, la, lt, eps)) == pytest.approx(expected, rel=1e-10)


def test_part_labels_out_of_range():
    with pytest.raises(ValueError):
        part_loss(np.zeros((1, 3)), np.zeros((1, 3)), [3], [0])


def test_sym_loss_cases():
    assert _val(sym_loss(np.ones((3, 4)), np.zeros((3, 4), bool))) == 0.0
    a = np.zeros((2, 2))
    a[1, 0] = 0.8
    m = np.zeros((2, 2), bool)
    m[1, 0] = True
    assert _val(sym_loss(a, m)) == pytest.approx(0.4, abs=1e-12)
    assert _val(sym_loss(-np.ones((5, 7)), np.ones((5, 7), bool))) == pytest.approx(-7.0)


def test_sym_mask_matches_pairs():
    m = sym_mask([2, 3, 0, 4], [3, 2, 5, 4], [[2, 3], [4, 5]])
    expected = np.array([[1, 0, 0, 0], [0, 1, 0, 0], [0, 0, 0, 0], [0, 0, 1, 0]], bool)
    assert np.array_equal(m, expected)
    a = np.random.default_rng(0).normal(size=(4, 4))
    assert _val(sym_loss(a, m)) == pytest.approx(sym_np(a, m))


def test_total_loss():
    assert total_loss(1.0, 1.0, 1.0, (0.3, 0.6, 0.3)) == pytest.approx(1.2)
    assert total_loss(2.5, float("nan"), float("inf"), (1, 0, 0)) == 2.5
    assert total_loss(1.0, 2.0, 3.0, (0, 1, 0)) == 2.0


# ---------------------------------------------------------------------------
# curriculum and optimiser


def test_curriculum_endpoints():
    cfg = TrainConfig()
    assert curriculum(0, cfg) == (1.0, 0.0)
    assert curriculum(cfg.warmup_epochs + cfg.transition_epochs, cfg) == (0.6, 0.3)
    mid = curriculum(cfg.warmup_epochs + cfg.transition_epochs / 2, cfg)
    assert mid[0] == pytest.approx(0.8, abs=1e-12) and mid[1] == pytest.approx(0.15, abs=1e-12)
    with pytest.raises(ValueError):
        curriculum(cfg.total_epochs, cfg)


def test_curriculum_continuity():
    cfg = TrainConfig()
    for b in (cfg.warmup_epochs, cfg.warmup_epochs + cfg.transition_epochs):
        lo, hi = curriculum(b - 1e-9, cfg), curriculum(b, cfg)
        assert np.allclose(lo, hi, atol=1e-6)


def _adam(lr, wd, g, p0):
    p = {"w": torch.tensor(p0, dtype=torch.float64)}
    state = adamw_state(p)
    adamw_step(p, {"w": torch.tensor(g, dtype=torch.float64)}, state, TrainConfig(lr=lr, weight_decay=wd), 1)
    return p["w"]


def test_adamw_zero_grad_no_decay():
    assert torch.equal(_adam(0.1, 0.0, [0.0, 0.0], [1.5, -2.0]), torch.tensor([1.5, -2.0], dtype=torch.float64))


def test_adamw_pure_decay():
    assert torch.equal(_adam(0.1, 0.5, [0.0], [2.0]), torch.tensor([2.0 * (1 - 0.1 * 0.5)], dtype=torch.float64))


def test_adamw_first_step():
    assert float(_adam(0.1, 0.0, [1.0], [0.0])[0]) == pytest.approx(-0.1, rel=1e-6)


def test_config_validation():
    with pytest.raises(ValueError):
        TrainConfig(tau=0)
    with pytest.raises(ValueError):
        TrainConfig(contrastive="triplet")
    with pytest.raises(ValueError):
        TrainConfig.from_dict({"learning_rate": 1})


# ---------------------------------------------------------------------------
# gradients and training


@pytest.fixture(scope="module")
def pair_setup(humanoid):
    mesh, labels, _ = humanoid
    geo = Geodesics(mesh)
    fld = build_field(mesh, labels, geo.matrix(), FieldConfig())
    cfg = TrainConfig(total_epochs=3, warmup_epochs=1, transition_epochs=1)
    dcfg = DescriptorConfig(**TINY)
    tmp_inputs = prepare_inputs(mesh, geo, dcfg)
    specs = [AugmentSpec(["midpoint_subdivide", "rotate"], seed=1), AugmentSpec([{"op": "cluster_decimate", "target_vertex_count": 100}], seed=2)]
    data = [augment(mesh, labels, s) for s in specs]
    pairs = [make_pair(tmp_inputs, m, a, fld, dcfg, cfg) for m, a in data]
    return mesh, labels, geo, fld, cfg, dcfg, data, pairs


def test_finite_difference_gradients(pair_setup):
    *_, cfg, dcfg, _, pairs = pair_setup
    net = DescriptorNet(dcfg).double()
    weights = (0.3, 0.6, 0.3)
    grads, _ = gradients(net, pairs[1], cfg, weights)
    params = dict(net.named_parameters())
    rng = np.random.default_rng(0)

    def loss():
        with torch.no_grad():
            l_soft, l_part, l_sym, _ = pair_losses(net, pairs[1], cfg)
            return _val(total_loss(l_soft, l_part, l_sym, weights))

    names = list(params)
    for _ in range(20):
        name = names[rng.integers(len(names))]
        flat = params[name].data.view(-1)
        j = int(rng.integers(flat.numel()))
        fd = central_difference(loss, flat, j, h=1e-4)
        an = float(grads[name].view(-1)[j])
        assert abs(an - fd) / max(1.0, abs(an)) < 1e-4, name


def test_zero_weights_give_zero_gradients(pair_setup):
    *_, cfg, dcfg, _, pairs = pair_setup
    grads, loss = gradients(DescriptorNet(dcfg), pairs, cfg, (0, 0, 0))
    assert loss == 0.0
    assert all(torch.count_nonzero(g) == 0 for g in grads.values())


def test_duplicated_batch_same_gradients(pair_setup):
    *_, cfg, dcfg, _, pairs = pair_setup
    net = DescriptorNet(dcfg).double()
    g1, _ = gradients(net, pairs, cfg)
    g2, _ = gradients(net, pairs + pairs, cfg)
    for k in g1:
        assert torch.allclose(g1[k], g2[k], atol=1e-7, rtol=0)


def test_zero_epochs_leave_net_unchanged(pair_setup):
    mesh, labels, geo, fld, _, dcfg, data, pairs = pair_setup
    net = DescriptorNet(dcfg)
    before = {k: v.clone() for k, v in net.state_dict().items()}
    net, trace = train(mesh, labels, data, fld, TrainConfig(total_epochs=0, warmup_epochs=0, transition_epochs=0), net=net, pairs=pairs)
    assert trace == []
    assert all(torch.equal(before[k], v) for k, v in net.state_dict().items())


def test_training_is_deterministic(pair_setup, tmp_path):
    mesh, labels, geo, fld, cfg, dcfg, data, pairs = pair_setup
    runs = []
    for r in range(2):
        ck = tmp_path / f"c{r}.gckp"
        net, trace = train(mesh, labels, data, fld, cfg, net=DescriptorNet(dcfg), pairs=pairs, checkpoint_path=ck, checkpoint_every=2)
        runs.append((net, trace, ck.read_bytes()))
    (n1, t1, c1), (n2, t2, c2) = runs
    assert trace_hash(t1) == trace_hash(t2)
    assert c1 == c2
    assert all(torch.equal(a, b) for a, b in zip(n1.state_dict().values(), n2.state_dict().values()))
    tensors, meta = tensors_from_bytes(c1)
    assert tensors["adamw.step"][0] == len(t1)
    assert meta["descriptor"] == dcfg.to_dict()
    assert len(t1) == cfg.total_epochs * len(pairs)
    assert t1[0]["lambda_soft"] == 0.0


def test_checkpoint_bytes_round_trip(pair_setup):
    *_, dcfg, _, _ = pair_setup
    net = DescriptorNet(dcfg)
    buf = checkpoint_bytes(net, adamw_state(dict(net.named_parameters())), 5)
    tensors, meta = tensors_from_bytes(buf)
    from geocorr.descriptor import tensors_to_bytes

    assert tensors_to_bytes(tensors, meta) == buf


def test_hard_anchor_ablation_changes_targets(pair_setup):
    mesh, labels, geo, fld, cfg, dcfg, data, _ = pair_setup
    tmp_inputs = prepare_inputs(mesh, geo, dcfg)
    m, a = data[0]
    soft = make_pair(tmp_inputs, m, a, fld, dcfg, cfg)
    hard = make_pair(tmp_inputs, m, a, fld, dcfg, TrainConfig(use_field=False))
    assert hard.rows.nnz == m.n_vertices
    assert soft.rows.nnz > hard.rows.nnz
