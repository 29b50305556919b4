"""Ticket checkpoints: the persistent identity of an RST, RTT or dense model.

Binary layout, little-endian throughout:

    magic "RSTK" | version u16
    spec id (u16 length + utf-8)
    init method u8 | init seed u64
    ratio f64 | pattern u8 | provenance u8
    mask count u16, then per layer: name, ndim u8, dims u32..., packed bits
    norm count u16, then per layer: name, channels u32, mean f64..., var f64...
    weight flag u8, then per layer: name, dtype u8, ndim u8, dims u32..., raw values
    metric count u16, then per metric: name, value f64
    crc32 u32 of everything above

Mask bits are row-major over the score (group) shape, packed with
bitorder="little".
"""
import logging
import struct
import zlib
from dataclasses import dataclass, field
from enum import Enum
from pathlib import Path
from typing import Dict, List, Optional, Tuple, Union

import numpy as np

from .const import CHECKPOINT_MAGIC, CHECKPOINT_VERSION
from .initializers import InitMethod, InitSpec, frozen_weights
from .masking import Pattern, group_shape
from .nets import Network, NetworkSpec, NormState, spec_from_id

_LOGGER = logging.getLogger(__name__)

_METHODS: List[InitMethod] = list(InitMethod)
_PATTERNS: List[Pattern] = list(Pattern)
_DTYPES: List[np.dtype] = [np.dtype("<f8"), np.dtype("<f4")]


class CheckpointError(ValueError):
    def __init__(self, message: str, offset: int = 0):
        super().__init__(f"{message} (at byte offset {offset})")
        self.message = message
        self.offset = offset


class Provenance(str, Enum):
    RST = "RST"
    NATURAL_RTT = "NaturalRTT"
    ADVERSARIAL_RTT = "AdversarialRTT"
    FINETUNED_INHERIT = "FinetunedInherit"
    FINETUNED_REINIT = "FinetunedReinit"
    NATURAL_DENSE = "NaturalDense"
    ADVERSARIAL_DENSE = "AdversarialDense"
    RANDOM_MASK = "RandomMask"

    @property
    def is_dense(self) -> bool:
        return self in (Provenance.NATURAL_DENSE, Provenance.ADVERSARIAL_DENSE)


_PROVENANCES: List[Provenance] = list(Provenance)


@dataclass
class TicketCheckpoint:
    spec_id: str
    init: InitSpec
    ratio: float
    pattern: Pattern
    provenance: Provenance
    masks: Dict[str, np.ndarray]
    """Boolean group masks, one per maskable layer, in forward order"""

    norm_stats: Dict[str, NormState] = field(default_factory=dict)
    weights: Optional[Dict[str, np.ndarray]] = None
    """Dense weight payload; None when weights come from `init`"""

    metrics: Dict[str, float] = field(default_factory=dict)

    def __post_init__(self):
        self.pattern = Pattern(self.pattern)
        self.provenance = Provenance(self.provenance)
        self.ratio = float(self.ratio)
        self.masks = {name: np.asarray(mask, dtype=bool) for name, mask in self.masks.items()}

    @property
    def spec(self) -> NetworkSpec:
        return spec_from_id(self.spec_id)

    def frozen_weights(self, dtype=np.float64) -> Dict[str, np.ndarray]:
        """The weights under the masks: the payload, else the InitSpec reconstruction."""
        if self.weights is not None:
            return {
                name: array if array.dtype == np.dtype(dtype) else array.astype(dtype)
                for name, array in self.weights.items()
            }
        return frozen_weights(self.spec, self.init, dtype)

    def to_network(
        self,
        dtype=np.float64,
        spec: Optional[NetworkSpec] = None,
        weights: Optional[Dict[str, np.ndarray]] = None,
    ) -> Network:
        """Fixed-mask network over the ticket's weights (or the given shared ones)."""
        spec = spec or self.spec
        weights = weights if weights is not None else self.frozen_weights(dtype)
        scores = {name: np.zeros(mask.shape, dtype=dtype) for name, mask in self.masks.items()}
        return Network(
            spec,
            weights,
            scores,
            self.ratio,
            self.pattern,
            masks=self.masks,
            norm_stats=self.norm_stats or None,
        )

    def popcounts(self) -> Dict[str, int]:
        return {name: int(mask.sum()) for name, mask in self.masks.items()}

    # -------------------------------------------------------------------------

    def to_bytes(self) -> bytes:
        writer = _Writer()
        writer.raw(CHECKPOINT_MAGIC)
        writer.pack("<H", CHECKPOINT_VERSION)
        writer.text(self.spec_id)
        writer.pack("<BQ", _METHODS.index(self.init.method), self.init.seed)
        writer.pack("<dBB", self.ratio, _PATTERNS.index(self.pattern), _PROVENANCES.index(self.provenance))

        writer.pack("<H", len(self.masks))
        for name, mask in self.masks.items():
            writer.text(name)
            writer.shape(mask.shape)
            writer.raw(np.packbits(mask.reshape(-1), bitorder="little").tobytes())

        writer.pack("<H", len(self.norm_stats))
        for name, state in self.norm_stats.items():
            writer.text(name)
            writer.pack("<I", len(state.running_mean))
            writer.raw(state.running_mean.astype("<f8").tobytes())
            writer.raw(state.running_var.astype("<f8").tobytes())

        writer.pack("<B", 0 if self.weights is None else 1)
        if self.weights is not None:
            writer.pack("<H", len(self.weights))
            for name, array in self.weights.items():
                dtype = np.dtype(array.dtype).newbyteorder("<")
                if dtype not in _DTYPES:
                    raise CheckpointError(f"Unsupported weight dtype {array.dtype} for {name}", writer.size)
                writer.text(name)
                writer.pack("<B", _DTYPES.index(dtype))
                writer.shape(array.shape)
                writer.raw(np.ascontiguousarray(array, dtype=dtype).tobytes())

        writer.pack("<H", len(self.metrics))
        for name, value in self.metrics.items():
            writer.text(name)
            writer.pack("<d", value)

        body = writer.getvalue()
        return body + struct.pack("<I", zlib.crc32(body))

    @staticmethod
    def from_bytes(data: bytes) -> "TicketCheckpoint":
        if len(data) < len(CHECKPOINT_MAGIC) + 6:
            raise CheckpointError(f"File too short: {len(data)} bytes", 0)

        if data[: len(CHECKPOINT_MAGIC)] != CHECKPOINT_MAGIC:
            raise CheckpointError(f"Bad magic {data[:4]!r}, expected {CHECKPOINT_MAGIC!r}", 0)

        body, (stored_crc,) = data[:-4], struct.unpack("<I", data[-4:])
        actual_crc = zlib.crc32(body)
        if actual_crc != stored_crc:
            raise CheckpointError(
                f"CRC mismatch: stored {stored_crc:08x}, computed {actual_crc:08x}", len(body)
            )

        reader = _Reader(body, len(CHECKPOINT_MAGIC))
        (version,) = reader.unpack("<H")
        if version != CHECKPOINT_VERSION:
            raise CheckpointError(f"Unsupported version {version}", reader.offset - 2)

        spec_id = reader.text()
        method_index, seed = reader.unpack("<BQ")
        ratio, pattern_index, provenance_index = reader.unpack("<dBB")
        init = InitSpec(reader.lookup(_METHODS, method_index, "init method"), seed)
        pattern = reader.lookup(_PATTERNS, pattern_index, "pattern")
        provenance = reader.lookup(_PROVENANCES, provenance_index, "provenance")

        masks: Dict[str, np.ndarray] = {}
        for _ in range(reader.unpack("<H")[0]):
            name = reader.text()
            shape = reader.shape()
            count = int(np.prod(shape))
            packed = np.frombuffer(reader.take((count + 7) // 8), dtype=np.uint8)
            bits = np.unpackbits(packed, count=count, bitorder="little")
            masks[name] = bits.astype(bool).reshape(shape)

        norm_stats: Dict[str, NormState] = {}
        for _ in range(reader.unpack("<H")[0]):
            name = reader.text()
            (channels,) = reader.unpack("<I")
            mean = np.frombuffer(reader.take(8 * channels), dtype="<f8")
            var = np.frombuffer(reader.take(8 * channels), dtype="<f8")
            norm_stats[name] = NormState(channels, mean, var)

        weights: Optional[Dict[str, np.ndarray]] = None
        if reader.unpack("<B")[0]:
            weights = {}
            for _ in range(reader.unpack("<H")[0]):
                name = reader.text()
                dtype = reader.lookup(_DTYPES, reader.unpack("<B")[0], "weight dtype")
                shape = reader.shape()
                raw = reader.take(int(np.prod(shape)) * dtype.itemsize)
                weights[name] = np.frombuffer(raw, dtype=dtype).astype(dtype.newbyteorder("=")).reshape(shape)

        metrics: Dict[str, float] = {}
        for _ in range(reader.unpack("<H")[0]):
            name = reader.text()
            metrics[name] = reader.unpack("<d")[0]

        if reader.offset != len(body):
            raise CheckpointError(f"{len(body) - reader.offset} trailing bytes", reader.offset)

        checkpoint = TicketCheckpoint(
            spec_id, init, ratio, pattern, provenance, masks, norm_stats, weights, metrics
        )
        checkpoint.validate()
        return checkpoint

    def validate(self) -> None:
        """Masks (and any payload) must match the network spec's layers."""
        shapes = self.spec.weight_shapes()
        if list(self.masks) != list(shapes):
            raise CheckpointError(f"Mask layers {list(self.masks)} != spec layers {list(shapes)}")

        for name, weight_shape in shapes.items():
            expected = group_shape(self.pattern, weight_shape)
            if self.masks[name].shape != expected:
                raise CheckpointError(f"Mask {name} has shape {self.masks[name].shape}, expected {expected}")
            if self.weights is not None and self.weights[name].shape != weight_shape:
                raise CheckpointError(f"Weight {name} has shape {self.weights[name].shape}, expected {weight_shape}")

    def save(self, path: Union[str, Path]) -> Path:
        path = Path(path)
        if path.exists():
            _LOGGER.warning("Overwriting checkpoint %s", path)

        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_bytes(self.to_bytes())
        _LOGGER.debug("Wrote %s", path)
        return path

    @staticmethod
    def load(path: Union[str, Path]) -> "TicketCheckpoint":
        path = Path(path)
        try:
            return TicketCheckpoint.from_bytes(path.read_bytes())
        except CheckpointError as err:
            raise CheckpointError(f"{path}: {err.message}", err.offset) from err


def save_checkpoint(checkpoint: TicketCheckpoint, path: Union[str, Path]) -> Path:
    return checkpoint.save(path)


def load_checkpoint(path: Union[str, Path]) -> TicketCheckpoint:
    return TicketCheckpoint.load(path)


# -----------------------------------------------------------------------------


class _Writer:
    def __init__(self):
        self._parts: List[bytes] = []
        self.size = 0

    def raw(self, data: bytes) -> None:
        self._parts.append(data)
        self.size += len(data)

    def pack(self, fmt: str, *values) -> None:
        self.raw(struct.pack(fmt, *values))

    def text(self, value: str) -> None:
        encoded = value.encode("utf-8")
        self.pack("<H", len(encoded))
        self.raw(encoded)

    def shape(self, shape: Tuple[int, ...]) -> None:
        self.pack("<B", len(shape))
        self.pack(f"<{len(shape)}I", *shape)

    def getvalue(self) -> bytes:
        return b"".join(self._parts)


class _Reader:
    def __init__(self, data: bytes, offset: int = 0):
        self.data = data
        self.offset = offset

    def take(self, count: int) -> bytes:
        if self.offset + count > len(self.data):
            raise CheckpointError(
                f"Truncated: need {count} bytes, {len(self.data) - self.offset} left", self.offset
            )
        chunk = self.data[self.offset : self.offset + count]
        self.offset += count
        return chunk

    def unpack(self, fmt: str) -> Tuple:
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))

    def text(self) -> str:
        (length,) = self.unpack("<H")
        start = self.offset
        try:
            return self.take(length).decode("utf-8")
        except UnicodeDecodeError as err:
            raise CheckpointError(f"Invalid utf-8 string: {err}", start) from err

    def shape(self) -> Tuple[int, ...]:
        (ndim,) = self.unpack("<B")
        return tuple(self.unpack(f"<{ndim}I"))

    def lookup(self, table: List, index: int, label: str):
        if index >= len(table):
            raise CheckpointError(f"Unknown {label} code {index}", self.offset - 1)
        return table[index]
