import numpy as np
import pytest
from numpy.testing import assert_allclose, assert_array_equal

from conftest import fixed_network
from scratch_tickets.adversary import (
    AttackError,
    adversarial_loss,
    ensemble_perturb,
    ensemble_probabilities,
    eot_perturb,
    input_gradient,
    perturb,
    project,
    step,
)
from scratch_tickets.config import AttackConfig, ConfigError, Norm
from scratch_tickets import functional as F
from scratch_tickets.functional import cross_entropy
from scratch_tickets.initializers import InitSpec, frozen_weights, initial_scores
from scratch_tickets.nets import Network
from scratch_tickets.prng import Prng
from scratch_tickets.tensor import Tensor, no_grad

X = np.array([[0.5, 0.5], [0.7, 0.2], [0.3, 0.9], [0.05, 0.95]])
Y = np.array([0, 0, 1, 1])


def test_null_attack_returns_inputs(diagonal_network):
    for name in ("fgsm", "pgd10", "pgd10_rs", "l2pgd5"):
        cfg = AttackConfig.named(name, 0.0)
        assert_array_equal(perturb(diagonal_network.classifier(), X, Y, cfg, Prng(0)), X)


def test_fgsm_takes_one_signed_step(diagonal_network):
    cfg = AttackConfig.named("fgsm", 0.1)
    x_adv = perturb(diagonal_network.classifier(), X[:1], Y[:1], cfg)
    assert_allclose(x_adv, [[0.4, 0.6]])


def test_linf_ball_and_bounds(diagonal_network):
    cfg = AttackConfig.named("pgd20_rs", 0.1)
    x_adv = perturb(diagonal_network.classifier(), X, Y, cfg, Prng(1))
    assert np.abs(x_adv - X).max() <= 0.1 + 1e-12
    assert x_adv.min() >= 0.0
    assert x_adv.max() <= 1.0


def test_l2_ball(diagonal_network):
    cfg = AttackConfig.named("l2pgd10_rs", 0.2)
    x_adv = perturb(diagonal_network.classifier(), X, Y, cfg, Prng(2))
    assert cfg.norm == Norm.L2
    assert np.linalg.norm(x_adv - X, axis=1).max() <= 0.2 + 1e-9


def test_pgd_increases_loss(diagonal_network):
    classifier = diagonal_network.classifier()
    with no_grad():
        clean = cross_entropy(classifier(Tensor(X)), Y).item()
    assert adversarial_loss(classifier, X, Y, AttackConfig.named("pgd10", 0.1)) > clean


def test_random_starts_do_not_depend_on_batching(diagonal_network):
    classifier = diagonal_network.classifier()
    cfg = AttackConfig.named("pgd5_rs", 0.1)
    whole = perturb(classifier, X, Y, cfg, Prng(3), indices=range(4))
    halves = np.concatenate(
        [
            perturb(classifier, X[:2], Y[:2], cfg, Prng(3), indices=[0, 1]),
            perturb(classifier, X[2:], Y[2:], cfg, Prng(3), indices=[2, 3]),
        ]
    )
    assert_array_equal(whole, halves)


def test_attack_errors(diagonal_network):
    classifier = diagonal_network.classifier()
    with pytest.raises(AttackError, match="needs a Prng"):
        perturb(classifier, X, Y, AttackConfig.named("fgsm_rs", 0.1))

    with pytest.raises(AttackError, match="Labels"):
        perturb(classifier, X, np.array([0, 1, 2, 0]), AttackConfig.named("fgsm", 0.1))

    with pytest.raises(AttackError, match="outside bounds"):
        perturb(classifier, X + 1.0, Y, AttackConfig.named("fgsm", 0.1))

    with pytest.raises(AttackError, match="at least one ticket"):
        eot_perturb([], X, Y, AttackConfig.named("fgsm", 0.1))


def test_attack_config_validation():
    with pytest.raises(ConfigError, match="epsilon"):
        AttackConfig(Norm.LINF, -0.1, 0.01, 1)

    with pytest.raises(ConfigError, match="steps"):
        AttackConfig(Norm.LINF, 0.1, 0.01, 0)

    with pytest.raises(ConfigError, match="bounds"):
        AttackConfig(Norm.LINF, 0.1, 0.01, 1, bounds=(1.0, 0.0))


def test_single_ticket_ensemble_matches_plain_attack(diagonal_network):
    classifier = diagonal_network.classifier()
    cfg = AttackConfig.named("pgd10", 0.1)
    plain = perturb(classifier, X, Y, cfg)
    assert_allclose(ensemble_perturb([classifier], X, Y, cfg), plain, atol=1e-12)
    assert_allclose(eot_perturb([classifier, classifier], X, Y, cfg), plain, atol=1e-12)


def test_ensemble_probabilities_are_a_distribution(diagonal_network):
    other = fixed_network(np.array([[0.5, 2.0], [1.0, -1.0]]))
    probs = ensemble_probabilities([diagonal_network.classifier(), other.classifier()], X)
    assert probs.shape == (4, 2)
    assert_allclose(probs.sum(axis=1), 1.0)


def test_input_gradient_matches_hand_derivation(diagonal_network):
    grad = input_gradient(diagonal_network.classifier(), X[:1], Y[:1])
    assert_allclose(grad, [[-1.0, 1.0]])


def test_step_and_project_edge_cases():
    cfg = AttackConfig.named("pgd1", 0.1, alpha=0.05)
    delta = np.array([[0.02, -0.03]])
    assert_array_equal(step(delta, np.zeros((1, 2)), cfg), delta)
    assert_allclose(project(np.array([[0.5, -0.5]]), cfg), [[0.1, -0.1]])

    l2 = AttackConfig.named("l2pgd1", 1.0)
    assert_array_equal(project(np.zeros((1, 2)), l2), np.zeros((1, 2)))
    assert_allclose(np.linalg.norm(project(np.array([[3.0, 4.0]]), l2)), 1.0)


def test_attack_does_not_touch_scores(toy_dataset, mlp_spec):
    weights = frozen_weights(mlp_spec, InitSpec("kaiming_normal", 0))
    network = Network(mlp_spec, weights, initial_scores(mlp_spec, "element", Prng(0)), 0.5)
    split = toy_dataset.test.head(8)
    perturb(network.classifier(train=True), split.x, split.y, AttackConfig.named("pgd3", 0.1))
    assert all(tensor.grad is None for tensor in network.trainable_tensors())


def _random_attack(prng: Prng) -> AttackConfig:
    lo = prng.split("lo").uniform(-1.0, 0.5, ())
    hi = lo + prng.split("width").uniform(0.1, 2.0, ())
    return AttackConfig(
        Norm.L2 if prng.split("norm").integer(2) else Norm.LINF,
        epsilon=prng.split("eps").uniform(0.0, 0.5, ()),
        alpha=prng.split("alpha").uniform(0.01, 0.5, ()),
        steps=1 + prng.split("steps").integer(5),
        random_start=bool(prng.split("rs").integer(2)),
        bounds=(lo, hi),
    )


def test_randomized_attacks_stay_in_ball_and_bounds():
    checked = 0
    for case in range(2000):
        prng = Prng(case).split("attack-contract")
        cfg = _random_attack(prng)
        features, classes = 1 + prng.split("features").integer(6), 2 + prng.split("classes").integer(3)
        weights = Tensor(prng.split("w").normal(2.0, (classes, features)))
        x = prng.split("x").uniform(cfg.bounds[0], cfg.bounds[1], (5, features))
        y = np.array([prng.split("y", i).integer(classes) for i in range(5)])

        x_adv = perturb(lambda inputs: F.linear(inputs, weights), x, y, cfg, prng.split("run"))
        delta = x_adv - x
        if cfg.norm == Norm.LINF:
            assert np.abs(delta).max() <= cfg.epsilon + 1e-6, case
        else:
            assert np.linalg.norm(delta, axis=1).max() <= cfg.epsilon + 1e-6, case
        assert x_adv.min() >= cfg.bounds[0] and x_adv.max() <= cfg.bounds[1], case
        checked += len(x)

    assert checked == 10_000


LINEAR_WEIGHTS = np.array([[0.8, -1.5, 0.3], [-0.4, 0.5, 1.1]])
LINEAR_X = np.array([[0.5, 0.5, 0.5], [0.3, 0.7, 0.4], [0.6, 0.25, 0.8]])
LINEAR_Y = np.array([0, 1, 0])


def _worst_case_loss(norm: Norm, epsilon: float) -> float:
    """CE of the two-class linear model at its exact worst-case inputs."""
    direction = LINEAR_WEIGHTS[1] - LINEAR_WEIGHTS[0]
    signs = np.where(LINEAR_Y == 0, 1.0, -1.0)
    margins = signs * (LINEAR_X @ direction)
    if norm == Norm.LINF:
        margins += epsilon * np.abs(direction).sum()
    else:
        margins += epsilon * np.linalg.norm(direction)
    return float(np.mean(np.logaddexp(0.0, margins)))


@pytest.mark.parametrize("name", ["pgd20", "pgd20_rs", "l2pgd10"])
def test_pgd_reaches_linear_worst_case(name):
    network = fixed_network(LINEAR_WEIGHTS)
    cfg = AttackConfig.named(name, 0.1)
    loss = adversarial_loss(network.classifier(), LINEAR_X, LINEAR_Y, cfg, Prng(4))
    assert loss == pytest.approx(_worst_case_loss(cfg.norm, 0.1), abs=1e-6)

    if cfg.norm == Norm.LINF:
        direction = LINEAR_WEIGHTS[1] - LINEAR_WEIGHTS[0]
        signs = np.where(LINEAR_Y == 0, 1.0, -1.0)[:, None]
        expected = LINEAR_X + 0.1 * signs * np.sign(direction)
        assert_allclose(perturb(network.classifier(), LINEAR_X, LINEAR_Y, cfg, Prng(4)), expected, atol=1e-12)
