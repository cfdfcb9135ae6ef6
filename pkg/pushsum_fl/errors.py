from __future__ import annotations

from pathlib import Path
from typing import Optional


class PushSumFLError(Exception):
    """Base class for every error raised by the simulator."""


# -------------------- numerics --------------------


class DimensionMismatchError(PushSumFLError, ValueError):
    def __init__(self, left: int, right: int, what: str = "vector") -> None:
        self.left = int(left)
        self.right = int(right)
        super().__init__(f"{what} dimension mismatch: {self.left} != {self.right}")


class NonFiniteError(PushSumFLError, ValueError):
    def __init__(self, where: str, index: Optional[int] = None) -> None:
        self.where = where
        self.index = index
        at = f" at coordinate {index}" if index is not None else ""
        super().__init__(f"non-finite value in {where}{at}")


# -------------------- data --------------------


class EmptyDatasetError(PushSumFLError, ValueError):
    pass


class IdxFormatError(PushSumFLError, ValueError):
    def __init__(self, path: Path, msg: str) -> None:
        self.path = Path(path)
        super().__init__(f"{self.path}: {msg}")


class BadMagicError(IdxFormatError):
    def __init__(self, path: Path, expected: int, got: int) -> None:
        self.expected = expected
        self.got = got
        super().__init__(path, f"bad magic 0x{got:08x}, expected 0x{expected:08x}")


class TruncatedFileError(IdxFormatError):
    def __init__(self, path: Path, expected: int, got: int) -> None:
        self.expected = expected
        self.got = got
        super().__init__(path, f"truncated: need {expected} bytes, found {got}")


class CountMismatchError(IdxFormatError):
    def __init__(self, path: Path, images: int, labels: int) -> None:
        self.images = images
        self.labels = labels
        super().__init__(path, f"{images} images but {labels} labels")


class EmptyBatchError(EmptyDatasetError):
    pass


class PartitionError(PushSumFLError, RuntimeError):
    pass


# -------------------- topology / protocol --------------------


class TopologyError(PushSumFLError, ValueError):
    pass


class ProtocolCorruptionError(PushSumFLError, RuntimeError):
    def __init__(self, msg: str, client: Optional[int] = None) -> None:
        self.client = client
        super().__init__(msg)


class PushSumUnderflowError(PushSumFLError, RuntimeError):
    def __init__(self, round_idx: int, client: int, w: float) -> None:
        self.round = round_idx
        self.client = client
        self.w = w
        super().__init__(
            f"round {round_idx}: push-sum weight of client {client} fell to {w:.3e}"
        )


class InvariantViolationError(PushSumFLError, RuntimeError):
    def __init__(self, round_idx: int, name: str, residual: float) -> None:
        self.round = round_idx
        self.name = name
        self.residual = residual
        super().__init__(f"round {round_idx}: {name} violated (residual {residual:.3e})")


# -------------------- io --------------------


class MetricsOrderError(PushSumFLError, ValueError):
    def __init__(self, expected: int, got: int) -> None:
        self.expected = expected
        self.got = got
        super().__init__(f"out-of-order metrics: expected round {expected}, got {got}")


class ManifestExistsError(PushSumFLError, FileExistsError):
    pass


class StorageError(PushSumFLError, OSError):
    def __init__(self, path: Path, msg: str) -> None:
        self.path = Path(path)
        super().__init__(f"{self.path}: {msg}")
