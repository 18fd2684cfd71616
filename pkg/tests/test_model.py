import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from nestlab import diffcore as dc
from nestlab.errors import ConfigError, ShapeError
from nestlab.model import ArchConfig, ExpertNet, MultiExpert, ensemble_logits

from gradcheck import numeric_grad, rel_error

SMALL = ArchConfig(feature_dim=3, hidden_dims=(5, 4), num_classes=4)


def test_zero_network_gives_zero_logits():
    net = ExpertNet(SMALL, seed=1)
    for w, b in net.layers:
        w.values[:] = 0.0
        b.values[:] = 0.0
    out = net.forward(np.random.default_rng(0).normal(size=(6, 3)))
    np.testing.assert_array_equal(out.values, np.zeros((6, 4)))


def test_single_identity_layer_passes_inputs_through():
    net = ExpertNet(ArchConfig(feature_dim=4, hidden_dims=(), num_classes=4))
    (w, b), = net.layers
    w.values = np.eye(4)
    b.values = np.zeros(4)
    x = np.random.default_rng(1).normal(size=(5, 4))
    np.testing.assert_array_equal(net.forward(x).values, x)


def test_forward_gradient_matches_finite_differences():
    net = ExpertNet(SMALL, seed=3)
    x = np.random.default_rng(2).normal(size=(5, 3))
    dc.zero_grad(net.parameters())
    dc.backward(dc.reduce_sum(net.forward(x)))
    for p in net.parameters():
        def f(v, p=p):
            saved = p.values
            p.values = v
            out = net.predict(x).sum()
            p.values = saved
            return out

        assert rel_error(p.grad, numeric_grad(f, p.values)) < 1e-4


def test_forward_shape_mismatch():
    with pytest.raises(ShapeError):
        ExpertNet(SMALL).forward(np.ones((2, 5)))


def test_output_width_and_parameter_count():
    a, b = ExpertNet(SMALL, 1), ExpertNet(SMALL, 2)
    assert a.layers[-1][0].shape[1] == 4
    assert a.num_parameters() == b.num_parameters() == 3 * 5 + 5 + 5 * 4 + 4 + 4 * 4 + 4


def test_init_is_deterministic_and_bounded():
    a, b = ExpertNet(SMALL, 9), ExpertNet(SMALL, 9)
    for (wa, ba), (wb, bb) in zip(a.layers, b.layers):
        assert wa.values.tobytes() == wb.values.tobytes()
        bound = 1 / np.sqrt(wa.shape[0])
        assert np.abs(wa.values).max() <= bound and np.abs(ba.values).max() <= bound


def test_predict_matches_forward():
    net = ExpertNet(SMALL, 4)
    x = np.random.default_rng(5).normal(size=(7, 3))
    np.testing.assert_array_equal(net.predict(x), net.forward(x).values)


def test_forward_all_degenerate_grid():
    model = MultiExpert(SMALL, [7])
    x = np.random.default_rng(0).normal(size=(3, 3))
    grid = model.forward_all([x])
    assert len(grid) == 1 and len(grid[0]) == 1
    np.testing.assert_array_equal(grid[0][0].values, model.experts[0].forward(x).values)


def test_forward_all_identical_experts_agree():
    model = MultiExpert(SMALL, [1, 2])
    for (wa, ba), (wb, bb) in zip(model.experts[0].layers, model.experts[1].layers):
        wb.values = wa.values.copy()
        bb.values = ba.values.copy()
    rng = np.random.default_rng(1)
    grid = model.forward_all([rng.normal(size=(2, 3)) for _ in range(3)])
    for t in range(3):
        np.testing.assert_array_equal(grid[0][t].values, grid[1][t].values)


def test_forward_all_grid_shapes():
    grid = MultiExpert(SMALL, [1, 2]).forward_all([np.ones((5, 3)), np.zeros((5, 3))])
    assert [[g.shape for g in row] for row in grid] == [[(5, 4)] * 2] * 2


def test_forward_all_errors():
    model = MultiExpert(SMALL, [1, 2])
    with pytest.raises(ConfigError):
        model.forward_all([])
    with pytest.raises(ShapeError):
        model.forward_all([np.ones((2, 3)), np.ones((3, 3))])


def test_forward_stacked_matches_grid():
    model = MultiExpert(SMALL, [1, 2])
    views = np.random.default_rng(2).normal(size=(3, 4, 3))
    stacked = model.forward_stacked(views).values
    grid = model.forward_all(list(views))
    for k in range(2):
        for t in range(3):
            np.testing.assert_allclose(stacked[k, t], grid[k][t].values, rtol=0, atol=1e-14)


def test_distinct_seeds_required():
    with pytest.raises(ConfigError):
        MultiExpert(SMALL, [3, 3])


def test_built_experts_differ():
    model = MultiExpert.build(SMALL, 3, base_seed=4)
    flat = [np.concatenate([p.values.ravel() for p in e.parameters()]) for e in model.experts]
    for i in range(3):
        for j in range(i + 1, 3):
            assert not np.array_equal(flat[i], flat[j])


def test_ensemble_identity_for_one_expert():
    z = dc.Tensor([[1.0, -2.0]])
    np.testing.assert_array_equal(ensemble_logits([z]).values, z.values)


def test_ensemble_hand_arithmetic():
    out = ensemble_logits([dc.Tensor([[1.0, 0.0]]), dc.Tensor([[0.0, 2.0]])])
    np.testing.assert_array_equal(out.values, [[0.5, 1.0]])


def test_ensemble_of_equals():
    z = dc.Tensor([[0.3, 0.7, -1.0]])
    np.testing.assert_allclose(ensemble_logits([z, z, z]).values, z.values, rtol=1e-15)


def test_ensemble_shape_mismatch():
    with pytest.raises(ShapeError):
        ensemble_logits([dc.Tensor(np.ones((1, 2))), dc.Tensor(np.ones((1, 3)))])


@settings(max_examples=30, deadline=None)
@given(st.permutations([0, 1, 2]))
def test_expert_permutation_symmetry(perm):
    model = MultiExpert(SMALL, [11, 12, 13])
    swapped = MultiExpert(SMALL, [[11, 12, 13][i] for i in perm])
    x = np.random.default_rng(0).normal(size=(4, 3))
    a, b = model.predict(x), swapped.predict(x)
    np.testing.assert_array_equal(b, a[list(perm)])
    ea = ensemble_logits([dc.Tensor(z) for z in a]).values
    eb = ensemble_logits([dc.Tensor(z) for z in b]).values
    np.testing.assert_allclose(ea, eb, rtol=1e-14)


def test_checkpoint_round_trip(tmp_path):
    model = MultiExpert.build(SMALL, 2, base_seed=8)
    path = tmp_path / "ckpt.json"
    model.save(path)
    loaded = MultiExpert.load(path)
    assert loaded.arch == model.arch and loaded.seeds == model.seeds
    x = np.random.default_rng(3).normal(size=(5, 3))
    np.testing.assert_array_equal(loaded.predict(x), model.predict(x))
