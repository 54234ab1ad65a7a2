import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from geocorr.binio import FormatError
from geocorr.descriptor import (
    DescriptorConfig,
    DescriptorNet,
    DescriptorSet,
    ExternalFeatures,
    NumericalError,
    PatchSet,
    forward,
    geodesic_vector,
    group,
    load_net,
    prepare_inputs,
    save_net,
    ungroup,
    ungroup_weights,
)
from geocorr.geodesics import Geodesics, all_pairs
from geocorr.mesh import AugmentSpec, augment
from meshes import random_patch, strip

SMALL = dict(n_patches=16, patch_size=8, hidden=32, d_sem=16, d_geo=8, d_out=16, geo_hidden=16, fuse_hidden=32)


def _patchset(v2c, v2c_dist, n_centers):
    n = len(v2c)
    z = np.zeros((n_centers, 1))
    return PatchSet(
        centers=np.arange(n_centers),
        members=z.astype(int),
        member_dist=z,
        center_geo=np.zeros((n_centers, n_centers)),
        v2c=np.asarray(v2c),
        v2c_dist=np.asarray(v2c_dist, dtype=float),
        center_rows=np.zeros((n_centers, n)),
    )


# ---------------------------------------------------------------------------
# grouping


def test_single_patch_covers_mesh():
    m = random_patch(30, 1)
    p = group(m, all_pairs(m), 1, m.n_vertices, 1)
    assert sorted(p.members[0]) == list(range(m.n_vertices))


def test_strip_membership_matches_brute_force():
    m = strip(12)
    d = all_pairs(m).d
    p = group(m, all_pairs(m), 2, 8, 1)
    for c, mem in zip(p.centers, p.members):
        # brute force: the 8 smallest distances, ties broken by index
        ranked = sorted(range(m.n_vertices), key=lambda v: (round(d[c, v], 9), v))[:8]
        assert list(mem) == ranked


@pytest.mark.parametrize("seed", range(3))
def test_center_is_own_first_member(seed):
    m = random_patch(60, seed)
    p = group(m, all_pairs(m), 10, 6, 3)
    assert np.array_equal(p.members[:, 0], p.centers)
    assert np.all(p.member_dist[:, 0] == 0)


def test_group_rejects_oversized_request():
    m = random_patch(10, 0)
    with pytest.raises(ValueError):
        group(m, all_pairs(m), 11, 4, 1)


# ---------------------------------------------------------------------------
# ungrouping


def test_k1_copies_nearest_center():
    p = _patchset([[1, 0], [0, 1], [1, 0]], [[0.3, 0.9], [0.2, 0.5], [0.0, 2.0]], 2)
    emb = np.array([[1.0, 2.0], [3.0, 4.0]])
    for pp, eps in [(1.0, 1e-8), (3.0, 0.5)]:
        assert np.array_equal(ungroup(emb, p, k=1, p=pp, eps=eps), emb[[1, 0, 1]])


def test_coincident_center_dominates():
    p = _patchset([[0, 1]], [[0.0, 1.0]], 2)
    emb = np.array([[1.0, -1.0], [5.0, 7.0]])
    out = ungroup(emb, p, k=2, p=2, eps=1e-8)
    assert np.abs(out[0] - emb[0]).max() < 1e-6


@settings(max_examples=30, deadline=None)
@given(seed=st.integers(0, 10_000), k=st.integers(1, 4))
def test_ungroup_is_convex(seed, k):
    rng = np.random.default_rng(seed)
    n, c = 20, 6
    v2c = np.array([rng.permutation(c)[:4] for _ in range(n)])
    dist = np.sort(rng.uniform(0, 2, (n, 4)), axis=1)
    p = _patchset(v2c, dist, c)
    emb = rng.normal(size=(c, 5))
    out = ungroup(emb, p, k=k)
    for i in range(n):
        sel = emb[v2c[i, :k]]
        assert np.all(out[i] >= sel.min(0) - 1e-12) and np.all(out[i] <= sel.max(0) + 1e-12)
    u = rng.normal(size=5)
    assert np.allclose(ungroup(np.tile(u, (c, 1)), p, k=k), u, atol=1e-12)
    w = ungroup_weights(p, c, k, 2.0, 1e-8)
    assert np.allclose(w.sum(1), 1.0)


def test_ungroup_torch_matches_numpy():
    p = _patchset([[0, 1], [1, 0]], [[0.1, 0.4], [0.2, 0.3]], 2)
    emb = np.array([[1.0, 0.0], [0.0, 1.0]])
    assert np.allclose(ungroup(torch.tensor(emb), p, k=2).numpy(), ungroup(emb, p, k=2))


# ---------------------------------------------------------------------------
# global geodesic vector


def _cg_patchset(cg):
    n = len(cg)
    p = _patchset(np.zeros((1, 1), int), np.zeros((1, 1)), n)
    p.center_geo = np.asarray(cg, dtype=float)
    return p


def test_geodesic_vector_two_centers():
    assert geodesic_vector(_cg_patchset([[0, 3.0], [3.0, 0]]), 4.0).shape == (1,)


def test_geodesic_vector_normalised():
    s = np.sqrt(2.5)
    cg = np.array([[0, 1, 2], [1, 0, 3], [2, 3, 0]]) * s
    assert np.allclose(geodesic_vector(_cg_patchset(cg), 2.5), [1, 2, 3])


def test_geodesic_vector_permutation():
    rng = np.random.default_rng(0)
    a = rng.uniform(1, 2, (5, 5))
    cg = np.triu(a, 1) + np.triu(a, 1).T
    perm = rng.permutation(5)
    v = geodesic_vector(_cg_patchset(cg), 1.0)
    vp = geodesic_vector(_cg_patchset(cg[np.ix_(perm, perm)]), 1.0)
    iu = np.triu_indices(5, 1)
    # entry (a, b) of the permuted matrix is entry (perm[a], perm[b]) of the original
    lookup = {(min(i, j), max(i, j)): x for i, j, x in zip(*iu, v)}
    expected = [lookup[(min(perm[i], perm[j]), max(perm[i], perm[j]))] for i, j in zip(*iu)]
    assert np.array_equal(vp, expected)


# ---------------------------------------------------------------------------
# network


def test_geo_encoder_zero_input_gives_final_bias():
    net = DescriptorNet(DescriptorConfig(**SMALL)).double()
    last = net.geo_encoder[2]
    with torch.no_grad():
        last.weight.zero_()
        last.bias.copy_(torch.arange(last.bias.numel(), dtype=torch.float64))
    n_pairs = net.geo_encoder[0].in_features
    out = net.encode_geodesic(np.zeros(n_pairs))
    assert torch.equal(out, last.bias)


def test_geo_encoder_deterministic_and_finite():
    net = DescriptorNet(DescriptorConfig(**SMALL))
    n_pairs = net.geo_encoder[0].in_features
    v = np.random.default_rng(1).uniform(0, 2, n_pairs)
    assert torch.equal(net.encode_geodesic(v), net.encode_geodesic(v))
    for seed in range(1000):
        v = np.random.default_rng(seed).uniform(0, 3, n_pairs)
        assert torch.isfinite(net.encode_geodesic(v)).all()
    with pytest.raises(ValueError):
        net.encode_geodesic(np.zeros(n_pairs + 1))


def test_tap_weights_select_single_layer():
    net = DescriptorNet(DescriptorConfig(**SMALL)).double()
    enc = net.patch_encoder
    x = torch.randn(4, net.cfg.input_dim, dtype=torch.float64)
    taps = enc.tap_outputs(x)
    alpha = torch.softmax(enc.layer_weights, 0)
    assert torch.all(alpha >= 0) and abs(alpha.sum().item() - 1) < 1e-12
    for j in range(len(taps)):
        with torch.no_grad():
            enc.layer_weights.fill_(-20.0)
            enc.layer_weights[j] = 20.0
        assert (enc(x) - taps[j]).abs().max() < 1e-5


def test_init_is_seeded():
    a = DescriptorNet(DescriptorConfig(**SMALL, seed=3))
    b = DescriptorNet(DescriptorConfig(**SMALL, seed=3))
    c = DescriptorNet(DescriptorConfig(**SMALL, seed=4))
    for (k, x), y, z in zip(a.state_dict().items(), b.state_dict().values(), c.state_dict().values()):
        assert torch.equal(x, y)
    assert not all(torch.equal(x, z) for x, z in zip(a.state_dict().values(), c.state_dict().values()))


def test_config_rejects_unknown_keys():
    with pytest.raises(ValueError):
        DescriptorConfig.from_dict({"width": 3})
    with pytest.raises(ValueError):
        DescriptorConfig(grouping="spectral")


# ---------------------------------------------------------------------------
# forward pass and invariances


@pytest.fixture(scope="module")
def small_net():
    return DescriptorNet(DescriptorConfig(**SMALL))


def test_forward_unit_norm_and_deterministic(humanoid, small_net):
    mesh = humanoid[0]
    d1, logits = forward(mesh, Geodesics(mesh), small_net)
    d2, _ = forward(mesh, Geodesics(mesh), small_net)
    assert np.abs(np.linalg.norm(d1.z, axis=1) - 1).max() < 1e-6
    assert np.array_equal(d1.z, d2.z)
    assert logits.shape == (mesh.n_vertices, 6)


@pytest.mark.parametrize("seed", [7, 8])
def test_rigid_and_scale_invariance(humanoid, small_net, seed):
    mesh, labels, _ = humanoid
    base, _ = forward(mesh, Geodesics(mesh), small_net)
    rot, _ = augment(mesh, labels, AugmentSpec(["rotate"], seed=seed))
    moved = rot.with_vertices(2.0 * rot.vertices + np.array([0.3, -1.0, 4.0]))
    for m in (rot, moved, mesh.with_vertices(mesh.vertices * 2.0)):
        d, _ = forward(m, Geodesics(m), small_net)
        assert np.abs(d.z - base.z).max() <= 1e-5


def test_ablation_switches_change_inputs(humanoid, small_net):
    mesh = humanoid[0]
    geo = Geodesics(mesh)
    cfg = DescriptorConfig(**SMALL)
    eu = DescriptorConfig(**SMALL, grouping="euclidean")
    a = prepare_inputs(mesh, geo, cfg)
    b = prepare_inputs(mesh, geo, eu)
    assert not np.array_equal(a.patch_x, b.patch_x)
    net = DescriptorNet(DescriptorConfig(**SMALL, geo_encoding=False))
    net.load_state_dict(small_net.state_dict())
    z0, _, _ = small_net.run(a)
    z1, _, _ = net.run(a)
    assert not torch.equal(z0, z1)


def test_external_features(humanoid):
    mesh = humanoid[0]
    feats = np.random.default_rng(0).normal(size=(mesh.n_vertices, 5)).astype(np.float32)
    provider = ExternalFeatures(feats)
    net = DescriptorNet(DescriptorConfig(**SMALL, in_dim=provider.dim))
    d, _ = forward(mesh, Geodesics(mesh), net, provider=provider)
    assert d.z.shape == (mesh.n_vertices, 16)
    with pytest.raises(ValueError):
        ExternalFeatures(feats[:-1])(mesh, prepare_inputs(mesh, None, net.cfg).patches)


def test_non_finite_input_names_stage(humanoid, small_net):
    inputs = prepare_inputs(humanoid[0], None, small_net.cfg)
    inputs.patch_x = inputs.patch_x.copy()
    inputs.patch_x[0, 0] = np.nan
    with pytest.raises(NumericalError, match="patch_encoder"):
        small_net.run(inputs)


# ---------------------------------------------------------------------------
# files


def test_descriptor_set_round_trip(tmp_path):
    d = DescriptorSet.from_raw(np.random.default_rng(0).normal(size=(7, 4)))
    buf = d.to_bytes()
    assert DescriptorSet.from_bytes(buf).to_bytes() == buf
    d.save(tmp_path / "d.desc")
    assert np.array_equal(DescriptorSet.load(tmp_path / "d.desc").z, d.z)
    with pytest.raises(FormatError):
        DescriptorSet.from_bytes(buf[:-1])


def test_checkpoint_round_trip(tmp_path, small_net):
    save_net(small_net, tmp_path / "m.gckp")
    buf = (tmp_path / "m.gckp").read_bytes()
    net, extra = load_net(tmp_path / "m.gckp")
    assert extra == {}
    assert net.cfg == small_net.cfg
    for a, b in zip(net.state_dict().values(), small_net.state_dict().values()):
        assert torch.equal(a, b)
    save_net(net, tmp_path / "n.gckp")
    assert (tmp_path / "n.gckp").read_bytes() == buf
    with pytest.raises(FormatError):
        (tmp_path / "bad.gckp").write_bytes(buf + b"\0")
        load_net(tmp_path / "bad.gckp")
