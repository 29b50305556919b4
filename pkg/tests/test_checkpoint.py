import struct
import zlib

import numpy as np
import pytest
from numpy.testing import assert_array_equal

from scratch_tickets.checkpoint import CheckpointError, Provenance, TicketCheckpoint, load_checkpoint, save_checkpoint
from scratch_tickets.initializers import InitSpec, initialize
from scratch_tickets.masking import Pattern, binarize_topk, group_shape
from scratch_tickets.nets import NormState, desk_cnn, toy_mlp
from scratch_tickets.prng import Prng

INIT = InitSpec("signed_kaiming_constant", 12345678901234)


def _ticket(spec, ratio=0.3, pattern=Pattern.ELEMENT, **kwargs) -> TicketCheckpoint:
    masks = {
        name: binarize_topk(Prng(1).split(name).uniform(0, 1, group_shape(pattern, shape)), ratio, pattern, shape)
        for name, shape in spec.weight_shapes().items()
    }
    return TicketCheckpoint(spec.spec_id, INIT, ratio, pattern, Provenance.RST, masks, **kwargs)


def test_round_trip_masks_and_identity():
    ticket = _ticket(toy_mlp((2,), 2), metrics={"robust_acc": 0.25})
    restored = TicketCheckpoint.from_bytes(ticket.to_bytes())

    assert restored.spec_id == ticket.spec_id
    assert restored.init == INIT
    assert restored.ratio == 0.3
    assert restored.pattern == Pattern.ELEMENT
    assert restored.provenance == Provenance.RST
    assert restored.weights is None
    assert restored.metrics == {"robust_acc": 0.25}
    for name, mask in ticket.masks.items():
        assert_array_equal(restored.masks[name], mask)
    assert restored.popcounts() == ticket.popcounts()


def test_round_trip_structured_masks_and_norm_stats():
    spec = desk_cnn((1, 8, 8), 3)
    norms = {
        name: NormState(channels, Prng(2).split(name).normal(1.0, channels), np.full(channels, 0.5))
        for name, channels in spec.norm_channels().items()
    }
    ticket = _ticket(spec, 0.1, Pattern.CHANNEL, norm_stats=norms)
    restored = TicketCheckpoint.from_bytes(ticket.to_bytes())

    assert restored.masks["conv2"].shape == (64, 1, 1, 1)
    for name, state in norms.items():
        assert_array_equal(restored.norm_stats[name].running_mean, state.running_mean)
        assert_array_equal(restored.norm_stats[name].running_var, state.running_var)


@pytest.mark.parametrize("dtype", [np.float64, np.float32])
def test_weight_payload_round_trip(dtype):
    spec = toy_mlp((2,), 2)
    weights = {name: array.astype(dtype) for name, array in initialize(spec, InitSpec("kaiming_normal", 1)).items()}
    ticket = _ticket(spec, weights=weights)
    ticket.provenance = Provenance.ADVERSARIAL_RTT
    restored = TicketCheckpoint.from_bytes(ticket.to_bytes())

    assert restored.provenance == Provenance.ADVERSARIAL_RTT
    for name, array in weights.items():
        assert restored.weights[name].dtype == dtype
        assert_array_equal(restored.weights[name], array)


def test_serialization_is_deterministic():
    ticket = _ticket(toy_mlp((2,), 2))
    assert ticket.to_bytes() == _ticket(toy_mlp((2,), 2)).to_bytes()
    assert ticket.to_bytes()[:4] == b"RSTK"


def test_reconstructed_ticket_predicts_identically(toy_dataset):
    spec = toy_mlp((2,), 2)
    ticket = _ticket(spec, 0.5)
    restored = TicketCheckpoint.from_bytes(ticket.to_bytes())
    x = toy_dataset.test.x
    assert_array_equal(restored.to_network().predict(x), ticket.to_network().predict(x))


def test_corrupt_files_rejected():
    data = _ticket(toy_mlp((2,), 2)).to_bytes()

    with pytest.raises(CheckpointError, match="Bad magic"):
        TicketCheckpoint.from_bytes(b"XXXX" + data[4:])

    flipped = bytearray(data)
    flipped[20] ^= 0xFF
    with pytest.raises(CheckpointError, match="CRC mismatch"):
        TicketCheckpoint.from_bytes(bytes(flipped))

    with pytest.raises(CheckpointError):
        TicketCheckpoint.from_bytes(data[:-10])

    with pytest.raises(CheckpointError, match="too short"):
        TicketCheckpoint.from_bytes(b"RSTK")


def test_unsupported_version():
    data = _ticket(toy_mlp((2,), 2)).to_bytes()
    body = data[:4] + struct.pack("<H", 99) + data[6:-4]
    with pytest.raises(CheckpointError, match="Unsupported version 99") as info:
        TicketCheckpoint.from_bytes(body + struct.pack("<I", zlib.crc32(body)))
    assert info.value.offset == 4


def test_mask_layers_must_match_spec():
    ticket = _ticket(toy_mlp((2,), 2))
    del ticket.masks["fc2"]
    with pytest.raises(CheckpointError, match="Mask layers"):
        ticket.validate()


def test_save_and_load(tmp_path):
    ticket = _ticket(toy_mlp((2,), 2))
    path = save_checkpoint(ticket, tmp_path / "nested" / "ticket.rstk")
    assert load_checkpoint(path).popcounts() == ticket.popcounts()

    path.write_bytes(b"RSTK" + path.read_bytes()[4:-1])
    with pytest.raises(CheckpointError, match="ticket.rstk"):
        load_checkpoint(path)


def test_dense_provenance_flags():
    assert Provenance.NATURAL_DENSE.is_dense
    assert Provenance.ADVERSARIAL_DENSE.is_dense
    assert not Provenance.RST.is_dense


def test_non_default_width_survives_a_file_round_trip(tmp_path):
    spec = desk_cnn((1, 8, 8), 3, width=2)
    weights = initialize(spec, INIT)
    ticket = _ticket(spec, 1.0, weights=weights)
    restored = load_checkpoint(save_checkpoint(ticket, tmp_path / "narrow.rstk"))

    assert restored.spec == spec
    network = restored.to_network()
    assert network.params["conv1"].theta.shape == (2, 1, 3, 3)
