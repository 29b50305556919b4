import numpy as np
import pytest

from conftest import mnist_root, slow_enabled
from scratch_tickets.config import AttackConfig, SearchSchedule
from scratch_tickets.datasets import load_dataset
from scratch_tickets.evaluate import evaluate, feature_distance, transfer_matrix
from scratch_tickets.initializers import InitSpec
from scratch_tickets.masking import Pattern
from scratch_tickets.nets import desk_cnn
from scratch_tickets.prng import Prng
from scratch_tickets.r2s import R2SPolicy, r2s_evaluate
from scratch_tickets.search import random_mask_ticket, search_rst, search_rtt, ticket_accuracy, train_dense

pytestmark = [
    pytest.mark.slow,
    pytest.mark.skipif(not slow_enabled(), reason="set RST_RUN_SLOW=1 to run"),
    pytest.mark.skipif(not (mnist_root() / "mnist").exists(), reason="MNIST files not found"),
]

INIT = InitSpec("signed_kaiming_constant", 0)
SEARCH_ATTACK = AttackConfig.named("fgsm_rs", 0.1)
EVAL_ATTACK = AttackConfig.named("pgd10", 0.1)
SCHEDULE = SearchSchedule(epochs=3, milestones=(), batch_size=64)


@pytest.fixture(scope="module")
def mnist():
    return load_dataset("mnist", mnist_root(), train_limit=2048, test_limit=512)


@pytest.fixture(scope="module")
def spec(mnist):
    return desk_cnn(mnist.input_shape, mnist.num_classes)


@pytest.fixture(scope="module")
def tickets(mnist, spec):
    return {
        ratio: search_rst(spec, INIT, mnist, ratio, Pattern.ELEMENT, SEARCH_ATTACK, SCHEDULE, Prng(0))
        for ratio in (0.05, 0.1, 0.2)
    }


@pytest.fixture(scope="module")
def adversarial_dense(mnist, spec):
    return train_dense(spec, INIT, mnist, "adversarial", SEARCH_ATTACK, SCHEDULE, Prng(1))


def test_searched_ticket_beats_a_random_mask(mnist, spec, tickets):
    baseline = random_mask_ticket(spec, INIT, 0.1, Pattern.ELEMENT, Prng(0), mnist.train)

    searched = evaluate(tickets[0.1].to_network(), mnist.test)
    random = evaluate(baseline.to_network(), mnist.test)
    assert searched.natural_acc > 0.3
    assert searched.natural_acc > random.natural_acc


def test_natural_training_fits_a_small_subset(mnist, spec):
    subset = mnist.subset(train_limit=100)
    schedule = SearchSchedule(epochs=50, lr=0.05, milestones=(), batch_size=20)
    dense = train_dense(spec, INIT, subset, "natural", None, schedule, Prng(2))
    assert ticket_accuracy(dense, subset.train) >= 0.95


def test_tickets_transfer_poorly_to_each_other(mnist, tickets):
    networks = [tickets[0.05].to_network(), tickets[0.2].to_network()]
    matrix = transfer_matrix(networks, mnist.test, EVAL_ATTACK)
    diagonal = np.diag(matrix).mean()
    off_diagonal = matrix[~np.eye(2, dtype=bool)].mean()
    assert off_diagonal > diagonal


def test_random_switch_beats_every_single_ticket(mnist, tickets):
    candidates = [tickets[ratio] for ratio in sorted(tickets)]
    report = r2s_evaluate(R2SPolicy(candidates), mnist.test, EVAL_ATTACK, mode="exact")
    singles = [evaluate(ticket.to_network(), mnist.test, EVAL_ATTACK).robust_acc for ticket in candidates]
    assert report.robust_acc > max(singles)


def test_natural_features_drift_more_than_adversarial_ones(mnist, spec, adversarial_dense):
    natural = train_dense(spec, INIT, mnist, "natural", None, SCHEDULE, Prng(1))
    split = mnist.test.head(256)
    natural_gap = feature_distance(natural.to_network(), split, 0.1, Prng(3))
    adversarial_gap = feature_distance(adversarial_dense.to_network(), split, 0.1, Prng(3))
    assert natural_gap > adversarial_gap


def test_adversarial_rtt_is_at_least_as_robust_as_rst(mnist, tickets, adversarial_dense):
    rtt = search_rtt(adversarial_dense, mnist, 0.1, Pattern.ELEMENT, SEARCH_ATTACK, SCHEDULE, Prng(0))
    rtt_robust = evaluate(rtt.to_network(), mnist.test, EVAL_ATTACK).robust_acc
    rst_robust = evaluate(tickets[0.1].to_network(), mnist.test, EVAL_ATTACK).robust_acc
    assert rtt_robust >= rst_robust
