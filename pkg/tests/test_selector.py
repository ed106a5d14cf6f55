import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from oracles import (attend_oracle, select_oracle, softmax_rows_oracle, spatial_volumes_oracle,
                     temporal_volumes_oracle, trunk_oracle, upsample_oracle)
from svmix import tensor as tt
from svmix.errors import ConfigError, ContractError, ParameterError
from svmix.gradcheck import numeric_grad, relative_error
from svmix.recognizer import Recognizer, RecognizerConfig
from svmix.selector import (FeatureGrid, Kind, SelectorParams, VolumeSelector, VolumeSet, attend,
                            embed_lambda, encode, partition_spatial, partition_temporal, permute_grid,
                            select, upsample)
from svmix.tensor import Tensor


def grid(values, factors=(1, 1, 1)):
    return FeatureGrid(Tensor(np.asarray(values, dtype=np.float64)), factors)


def params_from(rng, c, d_k, scale=1.0):
    return SelectorParams(Tensor(rng.normal(0, scale, (c, d_k)), requires_grad=True),
                          Tensor(rng.normal(0, scale, (c, d_k)), requires_grad=True),
                          Tensor(rng.normal(0, scale, (c, 1)), requires_grad=True))


def volume_set(values, kind=Kind.SPATIAL):
    values = np.asarray(values, dtype=np.float64)
    G, N, _ = values.shape
    shape = (G, 1, 1, N) if kind is Kind.SPATIAL else (G, N, 1, 1)
    return VolumeSet(Tensor(values), kind, shape)


def tiny_teacher(T=2, H=4, W=4, C=1, widths=(3,), strides=(2,), seed=0, norm=True):
    cfg = RecognizerConfig(frames=T, height=H, width=W, channels=C, num_classes=2, widths=widths,
                           strides=strides, norm=norm, head_init="he")
    return Recognizer.create(cfg, np.random.default_rng(seed))


# -- encode ------------------------------------------------------------------

def test_encode_is_deterministic_and_detached():
    teacher = tiny_teacher()
    x = np.random.default_rng(1).random((2, 2, 4, 4, 1))
    a, b = encode(x, teacher), encode(x, teacher)
    assert np.array_equal(a.values.data, b.values.data)
    assert not a.values.requires_grad
    assert a.factors == (1, 2, 2)


def test_encode_matches_loop_trunk():
    teacher = tiny_teacher(widths=(3, 2), strides=(2, 1))
    x = np.random.default_rng(2).random((2, 2, 4, 4, 1))
    want = trunk_oracle(x, {k: v.data for k, v in teacher.params.items()}, (2, 1))
    assert np.max(np.abs(encode(x, teacher).values.data - want)) < 1e-12


def test_encode_zero_video_is_batch_independent():
    teacher = tiny_teacher(norm=False)
    with_bias = {k: (v.data + 0.3 if k.endswith(".b") else v.data) for k, v in teacher.params.items()}
    teacher.load_state_dict(with_bias)
    z1 = encode(np.zeros((1, 2, 4, 4, 1)), teacher).values.data
    z3 = encode(np.zeros((3, 2, 4, 4, 1)), teacher).values.data
    assert np.all(z3 == z1[0])
    # bias only, so each output frame has uniform interior response
    assert np.all(z1 > 0)


def test_encode_grid_dims_match_declared_feature_shape():
    cfg = RecognizerConfig(frames=8, height=32, width=32, widths=(4, 4), strides=(2, 2))
    teacher = Recognizer.create(cfg, np.random.default_rng(0))
    z = encode(np.zeros((1, 8, 32, 32, 1)), teacher)
    assert z.shape[1:] == cfg.feature_shape
    assert z.factors == (1, 4, 4)


# -- partitions -----------------------------------------------------------------

def test_spatial_partition_relocates_cells_exactly():
    z = np.arange(1 * 2 * 2 * 2 * 3, dtype=float).reshape(1, 2, 2, 2, 3)
    v = partition_spatial(grid(z))
    assert v.volumes.shape == (2, 4, 3)
    assert np.array_equal(v.volumes.data, np.array(spatial_volumes_oracle(z)))
    for g in range(2):
        for n in range(4):
            (b, t, h, w), = v.cells(g, n)
            assert np.array_equal(v.volumes.data[g, n], z[b, t, h, w])


def test_spatial_partition_is_a_bijection():
    z = np.random.default_rng(0).random((2, 3, 2, 2, 4))
    v = partition_spatial(grid(z))
    cells = [c for g in range(v.groups) for n in range(v.count) for c in v.cells(g, n)]
    assert len(cells) == len(set(cells)) == 2 * 3 * 2 * 2
    assert np.array_equal(np.sort(v.volumes.data.ravel()), np.sort(z.ravel()))


def test_spatial_partition_follows_timestamp_permutation():
    z = np.random.default_rng(1).random((1, 3, 2, 2, 2))
    perm = [2, 0, 1]
    a = partition_spatial(grid(z)).volumes.data
    b = partition_spatial(grid(z[:, perm])).volumes.data
    assert np.array_equal(b, a[perm])


def test_temporal_partition_hand_example():
    z = np.zeros((1, 2, 2, 2, 1))
    z[0, 0, :, :, 0] = [[1, 2], [3, 4]]
    z[0, 1] = 7.0
    v = partition_temporal(grid(z))
    assert v.volumes.shape == (1, 2, 1)
    assert v.volumes.data[0, 0, 0] == 2.5
    assert v.volumes.data[0, 1, 0] == 7.0
    assert v.cells(0, 1) == [(0, 1, 0, 0), (0, 1, 0, 1), (0, 1, 1, 0), (0, 1, 1, 1)]


def test_temporal_partition_matches_loop_mean():
    z = np.random.default_rng(3).random((2, 3, 2, 3, 4))
    got = partition_temporal(grid(z)).volumes.data
    assert np.max(np.abs(got - np.array(temporal_volumes_oracle(z)))) < 1e-14


def test_temporal_partition_gradient():
    z = Tensor(np.random.default_rng(4).random((1, 2, 2, 2, 2)), requires_grad=True)
    w = np.random.default_rng(5).random((1, 2, 2))

    def loss():
        return tt.tsum(partition_temporal(FeatureGrid(z, (1, 1, 1))).volumes * Tensor(w))

    z.grad = None
    loss().backward()
    assert relative_error(z.grad, numeric_grad(lambda: loss().data, z)) < 1e-7


# -- lambda embedding ---------------------------------------------------------

def test_embed_lambda_appends_constant_channel():
    v = volume_set(np.random.default_rng(0).random((2, 3, 4)))
    vi = embed_lambda(v, 0.35, "i")
    vj = embed_lambda(v, 0.35, "j")
    assert vi.volumes.shape == (2, 3, 5)
    assert np.array_equal(vi.volumes.data[..., :4], v.volumes.data)
    assert np.all(vi.volumes.data[..., 4] == 0.35)
    assert np.all(vj.volumes.data[..., 4] == 1.0 - 0.35)


def test_embed_lambda_half_is_symmetric():
    v = volume_set(np.ones((1, 2, 2)))
    assert np.array_equal(embed_lambda(v, 0.5, "i").volumes.data, embed_lambda(v, 0.5, "j").volumes.data)


def test_embed_lambda_per_sample_values_follow_groups():
    z = np.zeros((2, 3, 1, 1, 1))
    v = partition_spatial(grid(z))
    e = embed_lambda(v, np.array([0.2, 0.7]), "i").volumes.data[..., -1]
    assert np.array_equal(e[:3], np.full((3, 1), 0.2))
    assert np.array_equal(e[3:], np.full((3, 1), 0.7))


@pytest.mark.parametrize("lam", [0.0, 1.0, -0.1, 1.5])
def test_embed_lambda_rejects_out_of_range(lam):
    with pytest.raises(ParameterError):
        embed_lambda(volume_set(np.ones((1, 2, 2))), lam, "i")


# -- attention ---------------------------------------------------------------

def test_attend_zero_value_projection_gives_half():
    rng = np.random.default_rng(0)
    p = params_from(rng, 3, 2)
    p.w_v.data[:] = 0.0
    out = attend(volume_set(rng.random((2, 4, 3))), volume_set(rng.random((2, 4, 3))), p)
    assert np.all(out.data == 0.5)


def test_attend_single_volume_scalar_case():
    # one volume: softmax weight 1, so the mask is 1 - sigmoid(v_j . w_v)
    vi, vj = np.array([[[0.3, -1.2]]]), np.array([[[2.0, 0.5]]])
    p = SelectorParams(Tensor(np.array([[1.0], [2.0]])), Tensor(np.array([[0.5], [-1.0]])),
                       Tensor(np.array([[0.7], [-0.4]])))
    r = 2.0 * 0.7 + 0.5 * -0.4
    want = 1.0 - 1.0 / (1.0 + np.exp(-r))
    got = attend(volume_set(vi), volume_set(vj), p).data
    assert abs(got[0, 0] - want) < 1e-15


def test_attend_two_volume_hand_case():
    vi = np.array([[[1.0, 0.0], [0.0, 1.0]]])
    vj = np.array([[[1.0, 1.0], [2.0, 0.0]]])
    eye = np.eye(2)
    p = SelectorParams(Tensor(eye), Tensor(eye), Tensor(np.array([[1.0], [-1.0]])))
    # scores q.k / sqrt(2): row0 = [1, 2]/sqrt2, row1 = [1, 0]/sqrt2; values = [0, 2]
    s = np.array([[1.0, 2.0], [1.0, 0.0]]) / np.sqrt(2.0)
    a = np.exp(s) / np.exp(s).sum(axis=1, keepdims=True)
    r = a @ np.array([0.0, 2.0])
    want = 1.0 / (1.0 + np.exp(r))
    assert np.max(np.abs(attend(volume_set(vi), volume_set(vj), p).data[0] - want)) < 1e-15


@pytest.mark.parametrize("seed", range(10))
def test_attend_matches_straight_line_oracle(seed):
    rng = np.random.default_rng(seed)
    G, N, C, d_k = 3, int(rng.integers(1, 5)), int(rng.integers(1, 4)), int(rng.integers(1, 5))
    vi, vj = rng.normal(size=(G, N, C)), rng.normal(size=(G, N, C))
    p = params_from(rng, C, d_k)
    got = attend(volume_set(vi), volume_set(vj), p).data
    args = (p.w_q.data.tolist(), p.w_k.data.tolist(), p.w_v.data.tolist())
    want = np.array([attend_oracle(vi[g].tolist(), vj[g].tolist(), *args) for g in range(G)])
    assert np.max(np.abs(got - want)) < 1e-12


def test_attention_rows_are_distributions():
    rng = np.random.default_rng(9)
    vi, vj = rng.normal(size=(4, 3)), rng.normal(size=(4, 3))
    rows = np.array(softmax_rows_oracle(vi.tolist(), vj.tolist(), rng.normal(size=(3, 2)).tolist(),
                                        rng.normal(size=(3, 2)).tolist()))
    assert np.allclose(rows.sum(axis=1), 1.0, atol=1e-12) and np.all(rows >= 0)


def test_attend_rejects_mismatched_sets():
    rng = np.random.default_rng(0)
    p = params_from(rng, 2, 2)
    a = volume_set(rng.random((1, 3, 2)))
    with pytest.raises(ContractError):
        attend(a, volume_set(rng.random((1, 3, 2)), Kind.TEMPORAL), p)
    with pytest.raises(ContractError):
        attend(a, volume_set(rng.random((1, 2, 2))), p)
    with pytest.raises(ContractError):
        attend(volume_set(rng.random((1, 3, 3))), volume_set(rng.random((1, 3, 3))), p)


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 2 ** 31 - 1), st.floats(0.5, 20.0))
def test_attend_output_strictly_inside_unit_interval(seed, scale):
    rng = np.random.default_rng(seed)
    p = params_from(rng, 3, 2, scale=scale)
    out = attend(volume_set(rng.normal(size=(2, 3, 3))), volume_set(rng.normal(size=(2, 3, 3))), p).data
    assert np.all(out >= 0.0) and np.all(out <= 1.0)
    assert np.all(np.isfinite(out))


# -- upsampling -------------------------------------------------------------

def test_upsample_identity_when_grid_matches():
    raw = Tensor(np.random.default_rng(0).random((2, 6)))
    out = upsample(raw, Kind.SPATIAL, (1, 2, 2, 3), (2, 2, 3))
    assert np.array_equal(out.data, raw.data.reshape(1, 2, 2, 3))


def test_upsample_temporal_two_values():
    out = upsample(Tensor(np.array([[0.2, 0.9]])), Kind.TEMPORAL, (1, 2, 3, 3), (4, 2, 2)).data
    assert out.shape == (1, 4, 2, 2)
    assert np.all(out[0, :2] == 0.2) and np.all(out[0, 2:] == 0.9)


def test_upsample_spatial_blocks():
    raw = np.array([[0.1, 0.2, 0.3, 0.4]])
    out = upsample(Tensor(raw), Kind.SPATIAL, (1, 1, 2, 2), (1, 4, 4)).data
    assert np.array_equal(out[0, 0, :2, :2], np.full((2, 2), 0.1))
    assert np.array_equal(out[0, 0, 2:, 2:], np.full((2, 2), 0.4))
    assert np.array_equal(out, upsample_oracle(raw, "spatial", (1, 1, 2, 2), (1, 4, 4)))


def test_upsample_rejects_non_integer_factor():
    with pytest.raises(ConfigError):
        upsample(Tensor(np.ones((1, 4))), Kind.SPATIAL, (1, 1, 2, 2), (1, 5, 4))


def test_trilinear_upsample_stays_in_range_and_temporal_constancy():
    rng = np.random.default_rng(0)
    raw = Tensor(rng.random((2, 4)))
    s = upsample(raw, Kind.SPATIAL, (1, 2, 2, 2), (4, 8, 8), mode="trilinear").data
    assert s.min() >= raw.data.min() - 1e-15 and s.max() <= raw.data.max() + 1e-15
    t = upsample(Tensor(rng.random((1, 2))), Kind.TEMPORAL, (1, 2, 4, 4), (4, 8, 8), mode="trilinear").data
    assert np.all(np.ptp(t.reshape(1, 4, -1), axis=2) == 0)


# -- composed selection -------------------------------------------------------

@pytest.mark.parametrize("kind", ["spatial", "temporal"])
def test_select_matches_chained_stage_oracles(kind):
    rng = np.random.default_rng(11)
    teacher = tiny_teacher(seed=3)
    x_i, x_j = rng.random((2, 2, 4, 4, 1)), rng.random((2, 2, 4, 4, 1))
    lam = np.array([0.3, 0.6])
    p = params_from(rng, 4, 3)
    mask = select(x_i, x_j, lam, kind, p, teacher)
    raw_params = {k: v.data for k, v in teacher.params.items()}
    z_i, z_j = trunk_oracle(x_i, raw_params, (2,)), trunk_oracle(x_j, raw_params, (2,))
    want = select_oracle(z_i, z_j, lam, kind, p.w_q.data.tolist(), p.w_k.data.tolist(),
                         p.w_v.data.tolist(), (2, 4, 4))
    assert np.max(np.abs(mask.weights.data - want)) < 1e-12
    assert mask.kind == kind and np.array_equal(mask.lam, lam)


def test_select_self_mix_is_valid_mask():
    teacher = tiny_teacher()
    x = np.random.default_rng(0).random((1, 2, 4, 4, 1))
    sel = VolumeSelector.create(3, 4, np.random.default_rng(1))
    for kind in Kind:
        m = select(x, x, 0.5, kind, sel, teacher).weights.data
        assert m.shape == (1, 2, 4, 4) and np.all((m > 0) & (m < 1))


def test_temporal_mask_constant_within_frames():
    teacher = tiny_teacher(T=4, H=8, W=8, widths=(3,), strides=(2,))
    rng = np.random.default_rng(2)
    sel = VolumeSelector.create(3, 4, rng)
    m = select(rng.random((3, 4, 8, 8, 1)), rng.random((3, 4, 8, 8, 1)), 0.4, "temporal", sel, teacher)
    spread = m.weights.data.reshape(3, 4, -1)
    assert np.all(spread.max(axis=2) - spread.min(axis=2) == 0.0)


def test_spatial_mask_is_local_to_its_timestamp():
    rng = np.random.default_rng(3)
    sel = VolumeSelector.create(3, 4, rng)
    z_i, z_j = rng.random((1, 3, 2, 2, 3)), rng.random((1, 3, 2, 2, 3))
    base = sel.mask_from_features(grid(z_i), grid(z_j), 0.5, "spatial", (3, 2, 2)).weights.data
    z_j2 = z_j.copy()
    z_j2[0, 1] += rng.normal(size=(2, 2, 3))
    moved = sel.mask_from_features(grid(z_i), grid(z_j2), 0.5, "spatial", (3, 2, 2)).weights.data
    assert np.array_equal(base[0, [0, 2]], moved[0, [0, 2]])
    assert not np.array_equal(base[0, 1], moved[0, 1])


def test_masks_are_permutation_equivariant_over_the_batch():
    rng = np.random.default_rng(4)
    sel = VolumeSelector.create(2, 3, rng)
    z_i, z_j = grid(rng.random((4, 2, 2, 2, 2))), grid(rng.random((4, 2, 2, 2, 2)))
    lam = np.array([0.1, 0.4, 0.6, 0.9])
    perm = np.array([2, 0, 3, 1])
    for kind in Kind:
        a = sel.mask_from_features(z_i, z_j, lam, kind, (2, 2, 2)).weights.data
        b = sel.mask_from_features(permute_grid(z_i, perm), permute_grid(z_j, perm), lam[perm], kind,
                                   (2, 2, 2)).weights.data
        assert np.array_equal(b, a[perm])


@pytest.mark.parametrize("seed", range(20))
def test_selector_parameter_gradients(seed):
    rng = np.random.default_rng(seed)
    sel = VolumeSelector.create(2, 3, rng)
    for p in sel.parameters():
        p.data = rng.normal(size=p.shape)
    z_i, z_j = grid(rng.random((2, 2, 2, 2, 2))), grid(rng.random((2, 2, 2, 2, 2)))
    kind = Kind.SPATIAL if seed % 2 else Kind.TEMPORAL
    w = Tensor(rng.random((2, 2, 2, 2)))

    def loss():
        return tt.tsum(sel.mask_from_features(z_i, z_j, 0.3, kind, (2, 2, 2)).weights * w)

    for p in sel.parameters():
        p.grad = None
    loss().backward()
    for p in sel.parameters():
        # entries that vanish analytically show only finite-difference noise (~1e-11)
        assert np.allclose(p.grad, numeric_grad(lambda: loss().data, p), rtol=1e-6, atol=1e-9)


def test_shared_parameters_are_one_storage():
    sel = VolumeSelector.create(4, 2, np.random.default_rng(0))
    assert sel.shared and len(sel.parameters()) == 3
    assert sel.params[Kind.SPATIAL].w_q is sel.params[Kind.TEMPORAL].w_q
    assert set(sel.state_dict()) == {"shared.w_q", "shared.w_k", "shared.w_v"}
    split = VolumeSelector.create(4, 2, np.random.default_rng(0), share_params=False)
    assert not split.shared and len(split.parameters()) == 6


def test_selector_state_round_trip():
    a = VolumeSelector.create(4, 2, np.random.default_rng(0), share_params=False)
    b = VolumeSelector.create(4, 2, np.random.default_rng(1), share_params=False)
    b.load_state_dict(a.state_dict())
    for k, v in a.state_dict().items():
        assert np.array_equal(b.state_dict()[k], v)
    with pytest.raises(ConfigError):
        VolumeSelector.create(4, 2, np.random.default_rng(0)).load_state_dict(a.state_dict())


def test_selector_without_embedding_has_feature_width_inputs():
    sel = VolumeSelector.create(5, 2, np.random.default_rng(0), embed=False)
    assert sel.params[Kind.SPATIAL].in_dim == 5
    z = grid(np.random.default_rng(1).random((1, 2, 2, 2, 5)))
    assert sel.mask_from_features(z, z, 0.5, "spatial", (2, 2, 2)).weights.shape == (1, 2, 2, 2)
