"""Dense float64 linear algebra and deterministic randomness.

Every matrix in the library is a 2-D ``torch.float64`` tensor. The helpers here keep
the shape checks and the determinism contract in one place; the arithmetic itself is
torch's.
"""

import struct
from typing import BinaryIO

import numpy as np
import torch

type Matrix = torch.Tensor

DTYPE = torch.float64
MATRIX_MAGIC = b"DLQM"


class Rng:
    """Seeded counter-based random stream.

    Wraps numpy's Philox4x64-10 bit generator keyed directly with the seed (no seed
    sequence hashing), so the raw stream is fixed by the published algorithm and is the
    same on every platform. One instance per owner; use distinct seeds for concurrent
    consumers.
    """

    def __init__(self, seed: int):
        self.seed = seed
        self._bitgen = np.random.Philox(key=seed & 0xFFFFFFFFFFFFFFFF)
        self._gen = np.random.Generator(self._bitgen)

    def next_u64(self, n: int = 1) -> list[int]:
        """Return the next ``n`` raw 64-bit outputs."""
        return [int(v) for v in self._bitgen.random_raw(n)]

    def uniform(self, size: int | tuple[int, ...] | None = None) -> np.ndarray | float:
        """Uniform samples in [0, 1)."""
        return self._gen.random(size)

    def normal(self, size: int | tuple[int, ...], std: float = 1.0) -> Matrix:
        return torch.from_numpy(self._gen.normal(0.0, std, size)).to(DTYPE)

    def integers(self, low: int, high: int, size: int | None = None) -> np.ndarray | int:
        """Integers in [low, high)."""
        return self._gen.integers(low, high, size)

    def choice(self, n: int, k: int) -> list[int]:
        """``k`` distinct indices from ``range(n)`` in draw order."""
        return [int(i) for i in self._gen.choice(n, size=k, replace=False)]

    def spawn(self, offset: int) -> "Rng":
        """Independent stream for a sub-task, derived from this seed."""
        return Rng(self.seed * 1_000_003 + offset)


def as_matrix(data) -> Matrix:
    m = torch.as_tensor(data, dtype=DTYPE)
    if m.dim() != 2:
        raise ValueError(f"expected a 2-D matrix, got shape {tuple(m.shape)}")
    return m


def identity(n: int) -> Matrix:
    return torch.eye(n, dtype=DTYPE)


def matmul(a: Matrix, b: Matrix) -> Matrix:
    """Matrix product ``a @ b``.

    The product runs through BLAS, whose reduction order depends on the torch thread
    count. Results are bitwise reproducible once the count is fixed, which
    ``get_config()`` does.

    Raises:
        ValueError: If ``a.cols != b.rows``.
    """
    if a.dim() != 2 or b.dim() != 2 or a.shape[1] != b.shape[0]:
        raise ValueError(
            f"matmul shape mismatch: {tuple(a.shape)} x {tuple(b.shape)}"
        )
    return torch.matmul(a, b)


def transpose(m: Matrix) -> Matrix:
    return m.transpose(0, 1).contiguous()


def hadamard(a: Matrix, b: Matrix) -> Matrix:
    if a.shape != b.shape:
        raise ValueError(
            f"elementwise shape mismatch: {tuple(a.shape)} vs {tuple(b.shape)}"
        )
    return a * b


def frobenius_norm(m: Matrix) -> float:
    return float(torch.linalg.matrix_norm(m, ord="fro")) if m.numel() else 0.0


def softmax_rows(m: Matrix) -> Matrix:
    """Row-wise softmax with max subtraction."""
    shifted = m - m.max(dim=-1, keepdim=True).values
    e = torch.exp(shifted)
    return e / e.sum(dim=-1, keepdim=True)


def argmax_row(m: Matrix) -> torch.Tensor:
    """Index of the row maximum; the lowest index wins ties."""
    # torch.argmax does not document its tie rule, so resolve it explicitly
    is_max = m == m.max(dim=-1, keepdim=True).values
    cols = torch.arange(m.shape[-1]).expand_as(m)
    return torch.where(is_max, cols, m.shape[-1]).min(dim=-1).values


def gather_rows(m: Matrix, index: torch.Tensor) -> Matrix:
    return m.index_select(0, index.to(torch.long))


def scatter_rows(m: Matrix, index: torch.Tensor, rows: Matrix) -> Matrix:
    """Copy of ``m`` with ``rows`` written at ``index``."""
    if rows.shape[0] != index.numel() or rows.shape[1:] != m.shape[1:]:
        raise ValueError(
            f"scatter shape mismatch: rows {tuple(rows.shape)} into {tuple(m.shape)} "
            f"at {index.numel()} indices"
        )
    out = m.clone()
    out[index.to(torch.long)] = rows
    return out


def cholesky_inverse(h: Matrix, damp: float) -> Matrix:
    """Inverse of ``h + damp * mean(diag(h)) * I`` through its Cholesky factor.

    Raises:
        ValueError: If ``h`` is not square and symmetric within 1e-8 relative to its
            largest entry.
        RuntimeError: If the damped matrix is not positive definite.
    """
    if h.dim() != 2 or h.shape[0] != h.shape[1]:
        raise ValueError(f"cholesky_inverse needs a square matrix, got {tuple(h.shape)}")
    tol = 1e-8 * max(1.0, float(h.abs().max())) if h.numel() else 1e-8
    if not torch.allclose(h, h.T, rtol=0.0, atol=tol):
        raise ValueError("cholesky_inverse needs a symmetric matrix (tolerance 1e-8)")
    n = h.shape[0]
    damped = h + damp * torch.mean(torch.diag(h)) * torch.eye(n, dtype=h.dtype)
    factor, info = torch.linalg.cholesky_ex(damped)
    if int(info) != 0:
        raise RuntimeError(
            f"matrix is not positive definite after damping (damp={damp}); "
            "raise damp and retry"
        )
    inv = torch.cholesky_inverse(factor)
    return 0.5 * (inv + inv.T)


def write_matrix(f: BinaryIO, m: Matrix) -> None:
    """Write ``m`` as ``DLQM | u32 rows | u32 cols | f64 data`` (little-endian)."""
    rows, cols = m.shape
    f.write(MATRIX_MAGIC)
    f.write(struct.pack("<II", rows, cols))
    f.write(m.detach().cpu().numpy().astype("<f8").tobytes())


def read_exact(f: BinaryIO, n: int) -> bytes:
    data = f.read(n)
    if len(data) != n:
        raise ValueError(f"truncated file: wanted {n} bytes, got {len(data)}")
    return data


def read_matrix(f: BinaryIO) -> Matrix:
    magic = read_exact(f, 4)
    if magic != MATRIX_MAGIC:
        raise ValueError(f"bad matrix magic {magic!r}")
    rows, cols = struct.unpack("<II", read_exact(f, 8))
    data = np.frombuffer(read_exact(f, 8 * rows * cols), dtype="<f8")
    return torch.from_numpy(data.copy()).reshape(rows, cols).to(DTYPE)
