"""Score search (RST, RTT), dense training and ticket fine-tuning."""
import itertools
import logging
import math
from typing import Callable, Dict, List, Optional, Tuple

import numpy as np

from .adversary import adversarial_loss, perturb
from .checkpoint import Provenance, TicketCheckpoint
from .config import AttackConfig, ConfigError, SearchSchedule
from .datasets import Dataset, Split
from .file_hash import get_array_hash
from .functional import cross_entropy
from .initializers import InitSpec, draw_weight, frozen_weights, initial_scores, initialize
from .masking import MaskError, Pattern, binarize_topk, group_shape, keep_count
from .nets import Network, NetworkSpec, NormState
from .optim import SGD
from .prng import Prng
from .tensor import get_default_dtype, no_grad
from .util import accuracy, batch_slices

_LOGGER = logging.getLogger(__name__)

StepCallback = Callable[[int, int, float, Network], None]

_ORACLE_LIMIT = 200_000


class NonFiniteLossError(RuntimeError):
    def __init__(self, epoch: int, batch: int, loss: float):
        super().__init__(f"Non-finite loss {loss} at epoch {epoch}, batch {batch}")
        self.epoch = epoch
        self.batch = batch


class TicketMismatchError(ValueError):
    pass


def fit(
    network: Network,
    split: Split,
    attack_cfg: Optional[AttackConfig],
    sched: SearchSchedule,
    prng: Prng,
    label: str = "search",
    on_step: Optional[StepCallback] = None,
) -> float:
    """Minibatch SGD over the network's trainable tensors.

    Each batch is replaced by its adversarial version when `attack_cfg` is
    given; the attack runs in train mode without touching norm statistics.
    Returns the mean loss of the last epoch.
    """
    optimizer = SGD(network.trainable_tensors(), sched)
    mean_loss = float("nan")
    for epoch in range(sched.epochs):
        lr = optimizer.set_epoch(epoch)
        order = prng.split("epoch", epoch).permutation(len(split))
        losses: List[float] = []
        correct = 0
        for batch, (start, stop) in enumerate(batch_slices(len(split), sched.batch_size)):
            indices = order[start:stop]
            x, y = split.x[indices], split.y[indices]
            if attack_cfg is not None:
                attacker = network.classifier(train=True, update_stats=False)
                x = perturb(attacker, x, y, attack_cfg, prng.split("attack", epoch, batch))

            optimizer.zero_grad()
            logits = network.forward(x, train=True)
            loss = cross_entropy(logits, y)
            value = loss.item()
            if not np.isfinite(value):
                raise NonFiniteLossError(epoch, batch, value)

            loss.backward()
            optimizer.step()

            losses.append(value)
            correct += int((logits.data.argmax(axis=1) == y).sum())
            _LOGGER.debug("%s epoch=%s batch=%s loss=%.4f", label, epoch, batch, value)
            if on_step is not None:
                on_step(epoch, batch, value, network)

        mean_loss = float(np.mean(losses)) if losses else float("nan")
        _LOGGER.info(
            "%s epoch %s/%s lr=%.4g loss=%.4f train_acc=%.4f",
            label,
            epoch + 1,
            sched.epochs,
            lr,
            mean_loss,
            correct / max(1, len(split)),
        )

    return mean_loss


def _assert_frozen(before: str, weights: Dict[str, np.ndarray], label: str) -> None:
    after = get_array_hash(weights)
    if after != before:
        raise RuntimeError(f"{label} modified frozen weights ({before[:12]} -> {after[:12]})")


# -----------------------------------------------------------------------------


def search_rst(
    spec: NetworkSpec,
    init: InitSpec,
    dataset: Dataset,
    ratio: float,
    pattern: Pattern,
    attack_cfg: Optional[AttackConfig],
    sched: SearchSchedule,
    prng: Prng,
    on_step: Optional[StepCallback] = None,
    dtype=None,
) -> TicketCheckpoint:
    """Adversarial score search over frozen random weights."""
    dtype = dtype or get_default_dtype()
    weights = frozen_weights(spec, init, dtype)
    before = get_array_hash(weights)
    scores = initial_scores(spec, pattern, prng.split("scores"), dtype)
    network = Network(spec, weights, scores, ratio, pattern)

    _LOGGER.info(
        "Searching %s ticket: %s init=%s ratio=%s attack=%s",
        Pattern(pattern).value,
        spec.spec_id,
        init.method.value,
        ratio,
        attack_cfg.label if attack_cfg else "none",
    )
    fit(network, dataset.train, attack_cfg, sched, prng.split("search"), "rst", on_step)
    _assert_frozen(before, weights, "search_rst")

    return TicketCheckpoint(
        spec.spec_id, init, ratio, pattern, Provenance.RST, network.masks(), network.norm_stats()
    )


def train_dense(
    spec: NetworkSpec,
    init: InitSpec,
    dataset: Dataset,
    mode: str,
    attack_cfg: Optional[AttackConfig],
    sched: SearchSchedule,
    prng: Prng,
    on_step: Optional[StepCallback] = None,
    dtype=None,
) -> TicketCheckpoint:
    """Natural or adversarial training of every weight from `init`."""
    if mode not in ("natural", "adversarial"):
        raise ConfigError(f"Unknown training mode '{mode}'")

    if mode == "adversarial" and attack_cfg is None:
        raise ConfigError("Adversarial training needs an attack config")

    dtype = dtype or get_default_dtype()
    weights = initialize(spec, init, dtype=dtype)
    masks = {name: np.ones(shape, dtype=bool) for name, shape in spec.weight_shapes().items()}
    network = Network(
        spec, weights, _zero_scores(masks, dtype), 1.0, Pattern.ELEMENT, masks=masks, trainable_theta=True
    )

    _LOGGER.info("Training %s dense %s", mode, spec.spec_id)
    fit(
        network,
        dataset.train,
        attack_cfg if mode == "adversarial" else None,
        sched,
        prng.split("train"),
        f"{mode}-train",
        on_step,
    )

    provenance = Provenance.ADVERSARIAL_DENSE if mode == "adversarial" else Provenance.NATURAL_DENSE
    return TicketCheckpoint(
        spec.spec_id,
        init,
        1.0,
        Pattern.ELEMENT,
        provenance,
        masks,
        network.norm_stats(),
        weights={name: array.copy() for name, array in network.weights().items()},
    )


def search_rtt(
    trained: TicketCheckpoint,
    dataset: Dataset,
    ratio: float,
    pattern: Pattern,
    attack_cfg: Optional[AttackConfig],
    sched: SearchSchedule,
    prng: Prng,
    reinit_head: bool = False,
    on_step: Optional[StepCallback] = None,
    dtype=None,
) -> TicketCheckpoint:
    """Score search over the weights of a trained dense checkpoint.

    With `reinit_head`, a source trained on a task with a different class
    count gets a freshly drawn final linear layer.
    """
    if not trained.provenance.is_dense or trained.weights is None:
        raise TicketMismatchError(
            f"RTT source must be a dense checkpoint with weights, got {trained.provenance.value}"
        )

    dtype = dtype or get_default_dtype()
    spec = trained.spec
    if tuple(spec.input_shape) != dataset.input_shape:
        raise TicketMismatchError(f"Source expects inputs {spec.input_shape}, dataset has {dataset.input_shape}")

    weights = {name: np.array(array, dtype=dtype) for name, array in trained.weights.items()}
    if spec.num_classes != dataset.num_classes:
        if not reinit_head:
            raise TicketMismatchError(
                f"Source has {spec.num_classes} classes, dataset has {dataset.num_classes}; "
                "set reinit_head to replace the final layer"
            )

        spec = spec.with_classes(dataset.num_classes)
        head = spec.head_name()
        shape = spec.weight_shapes()[head]
        head_prng = Prng(trained.init.seed).split("head", dataset.num_classes)
        weights[head] = draw_weight(trained.init.method, shape, head_prng).astype(dtype)
        _LOGGER.info("Reinitialized head %s to %s classes", head, dataset.num_classes)

    for array in weights.values():
        array.flags.writeable = False

    before = get_array_hash(weights)
    scores = initial_scores(spec, pattern, prng.split("scores"), dtype)
    # norm layers sit in the body, so the trained statistics survive a new head
    network = Network(spec, weights, scores, ratio, pattern, norm_stats=trained.norm_stats or None)
    fit(network, dataset.train, attack_cfg, sched, prng.split("search"), "rtt", on_step)
    _assert_frozen(before, weights, "search_rtt")

    provenance = (
        Provenance.ADVERSARIAL_RTT
        if trained.provenance == Provenance.ADVERSARIAL_DENSE
        else Provenance.NATURAL_RTT
    )
    return TicketCheckpoint(
        spec.spec_id,
        trained.init,
        ratio,
        pattern,
        provenance,
        network.masks(),
        network.norm_stats(),
        weights=dict(weights),
    )


def finetune_ticket(
    ticket: TicketCheckpoint,
    mode: str,
    dataset: Dataset,
    attack_cfg: Optional[AttackConfig],
    sched: SearchSchedule,
    prng: Prng,
    on_step: Optional[StepCallback] = None,
    dtype=None,
) -> TicketCheckpoint:
    """Adversarially train the surviving weights of a fixed-mask ticket.

    inherit starts from the ticket's weights and norm statistics; reinit
    redraws every weight with the ticket's init method and a fresh seed.
    """
    if mode not in ("inherit", "reinit"):
        raise ConfigError(f"Unknown fine-tuning mode '{mode}'")

    dtype = dtype or get_default_dtype()
    spec = ticket.spec
    if mode == "inherit":
        init = ticket.init
        weights = ticket.frozen_weights(dtype)
        norm_stats: Optional[Dict[str, NormState]] = ticket.norm_stats or None
        provenance = Provenance.FINETUNED_INHERIT
    else:
        init = InitSpec(ticket.init.method, prng.split("reinit").integer(1 << 62))
        weights = initialize(spec, init, dtype=dtype)
        norm_stats = None
        provenance = Provenance.FINETUNED_REINIT

    network = Network(
        spec,
        weights,
        _zero_scores(ticket.masks, dtype),
        ticket.ratio,
        ticket.pattern,
        masks=ticket.masks,
        norm_stats=norm_stats,
        trainable_theta=True,
    )
    _LOGGER.info("Fine-tuning %s ticket (%s, ratio=%s)", mode, ticket.provenance.value, ticket.ratio)
    fit(network, dataset.train, attack_cfg, sched, prng.split("finetune"), f"finetune-{mode}", on_step)

    effective = {name: np.array(param.effective_array()) for name, param in network.params.items()}
    return TicketCheckpoint(
        spec.spec_id,
        init,
        ticket.ratio,
        ticket.pattern,
        provenance,
        ticket.masks,
        network.norm_stats(),
        weights=effective,
    )


def _zero_scores(masks: Dict[str, np.ndarray], dtype) -> Dict[str, np.ndarray]:
    return {name: np.zeros(mask.shape, dtype=dtype) for name, mask in masks.items()}


# -----------------------------------------------------------------------------
# Baselines and oracles


def random_mask_ticket(
    spec: NetworkSpec,
    init: InitSpec,
    ratio: float,
    pattern: Pattern,
    prng: Prng,
    calibration: Optional[Split] = None,
    batch_size: int = 128,
    dtype=None,
) -> TicketCheckpoint:
    """A uniformly random k-subset per layer; norm statistics are estimated on
    `calibration` when given."""
    dtype = dtype or get_default_dtype()
    masks = {
        name: binarize_topk(prng.split(name).uniform(0.0, 1.0, group_shape(pattern, shape)), ratio, pattern, shape)
        for name, shape in spec.weight_shapes().items()
    }
    network = Network(
        spec, frozen_weights(spec, init, dtype), _zero_scores(masks, dtype), ratio, pattern, masks=masks
    )
    if calibration is not None:
        with no_grad():
            for start, stop in batch_slices(len(calibration), batch_size):
                network.forward(calibration.x[start:stop], train=True)

    return TicketCheckpoint(
        spec.spec_id, init, ratio, pattern, Provenance.RANDOM_MASK, masks, network.norm_stats()
    )


def robust_loss(
    network: Network,
    split: Split,
    attack_cfg: Optional[AttackConfig],
    prng: Optional[Prng] = None,
) -> float:
    """Mean cross-entropy on adversarial inputs (clean inputs without an attack)."""
    classifier = network.classifier()
    if attack_cfg is None:
        with no_grad():
            return cross_entropy(classifier(split.x), split.y).item()
    return adversarial_loss(classifier, split.x, split.y, attack_cfg, prng)


def exhaustive_mask_search(
    spec: NetworkSpec,
    weights: Dict[str, np.ndarray],
    split: Split,
    ratio: float,
    attack_cfg: Optional[AttackConfig],
    prng: Optional[Prng] = None,
) -> List[Tuple[float, Dict[str, np.ndarray]]]:
    """Every element mask at `ratio`, ranked by robust loss (best first).

    Each layer keeps k = keep_count(ratio, layer size) weights; the search
    space is the product of the per-layer C(N, k) choices.
    """
    shapes = spec.weight_shapes()
    sizes = [int(np.prod(shape)) for shape in shapes.values()]
    total = 1
    for size in sizes:
        total *= math.comb(size, keep_count(ratio, size))

    if total > _ORACLE_LIMIT:
        raise MaskError(f"{total} candidate masks exceed the enumeration limit {_ORACLE_LIMIT}")

    choices = [list(itertools.combinations(range(size), keep_count(ratio, size))) for size in sizes]

    ranked: List[Tuple[float, Dict[str, np.ndarray]]] = []
    for combination in itertools.product(*choices):
        masks = {}
        for (name, shape), kept in zip(shapes.items(), combination):
            mask = np.zeros(int(np.prod(shape)), dtype=bool)
            mask[list(kept)] = True
            masks[name] = mask.reshape(shape)

        network = Network(spec, weights, _zero_scores(masks, np.float64), ratio, Pattern.ELEMENT, masks=masks)
        # every candidate sees the same random starts
        stream = None if prng is None else prng.split("oracle")
        ranked.append((robust_loss(network, split, attack_cfg, stream), masks))

    ranked.sort(key=lambda item: item[0])
    _LOGGER.debug("Enumerated %s masks; best robust loss %.6f", len(ranked), ranked[0][0])
    return ranked


def ticket_accuracy(checkpoint: TicketCheckpoint, split: Split, dtype=None) -> float:
    """Clean top-1 accuracy of a stored ticket."""
    network = checkpoint.to_network(dtype or get_default_dtype())
    return accuracy(network.predict(split.x), split.y)
