import numpy as np
import pytest
from numpy.testing import assert_array_equal

from scratch_tickets.initializers import (
    InitError,
    InitMethod,
    InitSpec,
    draw_weight,
    frozen_weights,
    initial_scores,
    initialize,
)
from scratch_tickets.masking import Pattern, group_shape
from scratch_tickets.nets import desk_cnn, fans
from scratch_tickets.prng import Prng

SPEC = desk_cnn((1, 8, 8), 3, width=2)


def test_same_initspec_same_weights():
    first = initialize(SPEC, InitSpec("kaiming_normal", 5))
    second = initialize(SPEC, InitSpec("kaiming_normal", 5))
    other = initialize(SPEC, InitSpec("kaiming_normal", 6))
    for name in first:
        assert_array_equal(first[name], second[name])
        assert not np.array_equal(first[name], other[name])


def test_signed_kaiming_constant_magnitude():
    weights = initialize(SPEC, InitSpec(InitMethod.SIGNED_KAIMING_CONSTANT, 0))
    for name, array in weights.items():
        fan_in, _ = fans(array.shape)
        np.testing.assert_allclose(np.abs(array), np.sqrt(2.0 / fan_in))


def test_kaiming_uniform_bound():
    weights = initialize(SPEC, InitSpec(InitMethod.KAIMING_UNIFORM, 0))
    for array in weights.values():
        fan_in, _ = fans(array.shape)
        assert np.abs(array).max() <= np.sqrt(6.0 / fan_in)


def test_xavier_normal_scale():
    weights = initialize(desk_cnn(), InitSpec(InitMethod.XAVIER_NORMAL, 0))
    array = weights["conv3"]
    fan_in, fan_out = fans(array.shape)
    assert array.std() == pytest.approx(np.sqrt(2.0 / (fan_in + fan_out)), rel=0.05)


def test_kaiming_normal_std_for_fan_in_50():
    samples = draw_weight(InitMethod.KAIMING_NORMAL, (2000, 50), Prng(0).split("kaiming"))
    assert samples.size == 100_000
    standard_error = 0.2 / np.sqrt(2 * samples.size)
    assert abs(samples.std() - 0.2) <= 3 * standard_error
    assert abs(samples.mean()) <= 3 * 0.2 / np.sqrt(samples.size)


def test_frozen_weights_are_cached_and_read_only():
    init = InitSpec("kaiming_uniform", 3)
    first = frozen_weights(SPEC, init)
    assert frozen_weights(SPEC, init) is first
    with pytest.raises(ValueError):
        first["conv1"][0, 0, 0, 0] = 1.0

    assert frozen_weights(desk_cnn((1, 8, 8), 3, width=4), init)["conv1"].shape == (4, 1, 3, 3)


def test_single_precision_weights():
    weights = frozen_weights(SPEC, InitSpec("kaiming_normal", 1), np.float32)
    assert all(array.dtype == np.float32 for array in weights.values())


def test_initspec_validation():
    with pytest.raises(ValueError):
        InitSpec("orthogonal", 0)

    with pytest.raises(InitError, match="64 bits"):
        InitSpec("kaiming_normal", -1)

    assert InitSpec.from_dict({"method": "xavier_normal", "seed": 4}) == InitSpec(InitMethod.XAVIER_NORMAL, 4)


@pytest.mark.parametrize("pattern", list(Pattern))
def test_scores_follow_group_shapes(pattern):
    scores = initial_scores(SPEC, pattern, Prng(0))
    for name, shape in SPEC.weight_shapes().items():
        assert scores[name].shape == group_shape(pattern, shape)
