import numpy as np
import pytest

from elder import autodiff as ad
from elder import network as nw
from elder.errors import ConfigError, FormatError, ShapeError


def hand_count(c0, k=3, blocks=2):
    # 2 scales: C0 and C1 = 2 C0
    c1 = 2 * c0
    head = c0 * k * k + c0
    tail = c0 * k * k + 1
    block = lambda c: 2 * (c * c * k * k + c)  # noqa: E731
    down = c1 * c0 * k * k + c1
    up = c0 * c1 * k * k + c0
    return head + tail + blocks * (2 * block(c0) + block(c1)) + down + up


def test_parameter_count_base8_two_scales():
    arch = nw.ArchConfig(num_scales=2, residual_blocks_per_scale=2, base_channels=8)
    assert hand_count(8) == 16433
    assert nw.parameter_count(arch) == 16433
    assert nw.build_network(arch, 0).num_parameters() == 16433


def test_parameter_count_matches_shapes():
    arch = nw.ArchConfig(num_scales=3, residual_blocks_per_scale=1, base_channels=4, kernel_size=5)
    assert nw.parameter_count(arch) == sum(int(np.prod(s)) for s in nw.parameter_shapes(arch).values())


def test_build_is_deterministic(tiny_arch):
    assert nw.build_network(tiny_arch, 5) == nw.build_network(tiny_arch, 5)


def test_seed_changes_weights(tiny_arch):
    assert nw.build_network(tiny_arch, 0) != nw.build_network(tiny_arch, 1)


def test_biases_start_at_zero(tiny_arch):
    w = nw.build_network(tiny_arch, 3)
    assert all(np.all(p == 0) for n, p in w.params.items() if n.endswith(".b"))


@pytest.mark.parametrize("bad", [
    dict(num_scales=0), dict(residual_blocks_per_scale=0), dict(base_channels=0), dict(kernel_size=4)])
def test_invalid_arch_rejected(bad):
    with pytest.raises(ConfigError):
        nw.build_network(nw.ArchConfig(**bad), 0)


def test_zero_weights_give_identity(tiny_arch, rng):
    x = rng.random((8, 8))
    np.testing.assert_array_equal(nw.zero_network(tiny_arch).apply(x), x)


@pytest.mark.parametrize("shape", [(16, 16), (32, 32), (3, 16, 16)])
def test_shape_preserved(shape, rng):
    w = nw.build_network(nw.ArchConfig(base_channels=2), 0)
    assert w.apply(rng.random(shape)).shape == shape


def test_indivisible_extent_rejected(tiny_weights):
    with pytest.raises(ShapeError):
        tiny_weights.apply(np.zeros((9, 8)))


def test_apply_matches_tape_replay(tiny_weights, rng):
    x = rng.random((8, 8))
    tape, xv, _, out = nw.trace(tiny_weights, x)
    tape.outputs = [out]
    assert np.array_equal(tape.replay()[0], tiny_weights.apply(x))


def test_batch_matches_single_images(tiny_weights, rng):
    xs = rng.random((3, 8, 8))
    batch = tiny_weights.apply(xs)
    for i in range(3):
        np.testing.assert_allclose(batch[i], tiny_weights.apply(xs[i]), atol=1e-14)


def test_zero_cotangent_gives_zero_gradients(tiny_weights, rng):
    x = rng.random((8, 8))
    assert np.all(nw.vjp_input(tiny_weights, x, np.zeros((8, 8))) == 0)
    assert all(np.all(g == 0) for g in nw.vjp_weights(tiny_weights, x, np.zeros((8, 8))).values())


def test_vjp_input_matches_finite_differences(tiny_weights, rng):
    x, v = rng.random((8, 8)), rng.standard_normal((8, 8))
    g = nw.vjp_input(tiny_weights, x, v)
    fd = ad.finite_difference_gradient(lambda z: np.sum(v * tiny_weights.apply(z)), x, 1e-5)
    assert np.linalg.norm(g - fd) / np.linalg.norm(fd) <= 1e-4


def test_vjp_weights_matches_finite_differences(tiny_weights, rng):
    x, v = rng.random((8, 8)), rng.standard_normal((8, 8))
    grads = nw.vjp_weights(tiny_weights, x, v)
    for name in ("head.w", "down0.b", "tail.w"):
        p = tiny_weights.params[name]

        def f(q, name=name):
            params = dict(tiny_weights.params)
            params[name] = q
            return np.sum(v * tiny_weights.replace(params).apply(x))

        fd = ad.finite_difference_gradient(f, p, 1e-5)
        assert np.linalg.norm(grads[name] - fd) / np.linalg.norm(fd) <= 1e-4


def test_directional_derivative(tiny_weights, rng):
    x, v, u = rng.random((8, 8)), rng.standard_normal((8, 8)), rng.standard_normal((8, 8))
    g = nw.vjp_input(tiny_weights, x, v)
    h = 1e-5
    fd = (np.sum(v * tiny_weights.apply(x + h * u)) - np.sum(v * tiny_weights.apply(x - h * u))) / (2 * h)
    assert abs(np.sum(g * u) - fd) / abs(fd) <= 1e-4


def test_vjp_shape_mismatch(tiny_weights):
    with pytest.raises(ShapeError):
        nw.vjp_input(tiny_weights, np.zeros((8, 8)), np.zeros((4, 4)))


def test_flat_round_trip(tiny_weights):
    assert tiny_weights.from_flat(tiny_weights.flat()) == tiny_weights


def test_save_load_round_trip(tmp_path, tiny_weights):
    path = tmp_path / "w.eldr"
    nw.save_weights(tiny_weights, path)
    back = nw.load_weights(path)
    assert back == tiny_weights and back.arch == tiny_weights.arch
    assert path.read_bytes()[:4] == b"ELDR"


def test_tampered_extent_is_format_error(tmp_path, tiny_weights):
    path = tmp_path / "w.eldr"
    nw.save_weights(tiny_weights, path)
    blob = path.read_bytes().replace(b"param head.w 2 1 3 3", b"param head.w 2 1 3 4", 1)
    path.write_bytes(blob)
    with pytest.raises(FormatError):
        nw.load_weights(path)


def test_truncated_payload_is_format_error(tmp_path, tiny_weights):
    path = tmp_path / "w.eldr"
    nw.save_weights(tiny_weights, path)
    path.write_bytes(path.read_bytes()[:-8])
    with pytest.raises(FormatError):
        nw.load_weights(path)


def test_bad_magic_is_format_error(tmp_path):
    path = tmp_path / "w.eldr"
    path.write_bytes(b"NOPE" + bytes(20))
    with pytest.raises(FormatError):
        nw.load_weights(path)


def test_different_arch_is_shape_error(tmp_path, tiny_weights):
    path = tmp_path / "w.eldr"
    nw.save_weights(tiny_weights, path)
    with pytest.raises(ShapeError):
        nw.load_weights(path, nw.ArchConfig(num_scales=2, residual_blocks_per_scale=1, base_channels=4))


def test_replace_rejects_wrong_shapes(tiny_weights):
    params = dict(tiny_weights.params)
    params["head.w"] = np.zeros((3, 1, 3, 3))
    with pytest.raises(ShapeError):
        tiny_weights.replace(params)
