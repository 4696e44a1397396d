"""Low-rank adapter state and its calculus.

An adapter is an additive update ``scaling * B @ A`` on top of a frozen base
weight. Initialization slices an orthonormal QR basis of the pre-trained
weight, so every client starts inside one shared column subspace.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .linalg import RankError, ShapeError, slice_cols, slice_rows, thin_qr

DEFAULT_LORA_ALPHA = 16.0


@dataclass
class LoraAdapter:
    """Factor pair B (d x r) / A (r x k) plus rank and forward scaling."""

    b_factor: np.ndarray
    a_factor: np.ndarray
    rank: int
    scaling: float = 1.0

    def __post_init__(self):
        d, rb = self.b_factor.shape
        ra, k = self.a_factor.shape
        if rb != self.rank or ra != self.rank:
            raise ShapeError(
                f"factor shapes {self.b_factor.shape} / {self.a_factor.shape} "
                f"do not match rank {self.rank}"
            )
        if self.rank > min(d, k):
            raise RankError(f"rank {self.rank} exceeds min{(d, k)}")
        if not self.scaling > 0:
            raise ValueError(f"scaling must be positive, got {self.scaling}")

    @property
    def shape(self) -> tuple[int, int]:
        return self.b_factor.shape[0], self.a_factor.shape[1]

    def copy(self) -> "LoraAdapter":
        return LoraAdapter(self.b_factor.copy(), self.a_factor.copy(), self.rank, self.scaling)


@dataclass
class BaseWeight:
    """Frozen base carried by a client plus the untouched pre-trained weight.

    ``frozen`` is never mutated by training; ``origin`` is kept only for
    diagnostics (subspace checks against the pre-trained starting point).
    """

    frozen: np.ndarray
    origin: np.ndarray

    def __post_init__(self):
        if self.frozen.shape != self.origin.shape:
            raise ShapeError(
                f"frozen {self.frozen.shape} and origin {self.origin.shape} differ"
            )


def qr_orthogonal_init(
    theta0: np.ndarray,
    client_rank: int,
    base_rank: int,
    scaling: float | None = None,
) -> tuple[BaseWeight, LoraAdapter]:
    """Initialize an adapter from the QR factors of the pre-trained weight.

    The adapter holds the leading ``client_rank`` columns of Q / rows of R.
    The frozen base subtracts the leading ``base_rank`` component, where
    ``base_rank`` is the federation-wide server rank: with a single shared
    subtraction rank every client ends up with an identical frozen base, which
    cross-client aggregation relies on. With ``client_rank == base_rank`` and
    ``scaling == 1`` the effective weight reproduces ``theta0`` exactly.

    ``scaling`` defaults to ``DEFAULT_LORA_ALPHA / client_rank``.
    """
    d, k = theta0.shape
    if not 0 < client_rank <= base_rank <= min(d, k):
        raise RankError(
            f"need 0 < client_rank <= base_rank <= min(d, k); "
            f"got client_rank={client_rank}, base_rank={base_rank}, shape={(d, k)}"
        )
    q, r = thin_qr(theta0)
    b = slice_cols(q, client_rank)
    a = slice_rows(r, client_rank)
    frozen = theta0 - slice_cols(q, base_rank) @ slice_rows(r, base_rank)
    if scaling is None:
        scaling = DEFAULT_LORA_ALPHA / client_rank
    return BaseWeight(frozen=frozen, origin=theta0.copy()), LoraAdapter(b, a, client_rank, scaling)


def effective_weight(base: BaseWeight, adapter: LoraAdapter) -> np.ndarray:
    if adapter.shape != base.frozen.shape:
        raise ShapeError(
            f"adapter produces {adapter.shape}, base is {base.frozen.shape}"
        )
    return base.frozen + adapter.scaling * (adapter.b_factor @ adapter.a_factor)


def factor_gradients(
    adapter: LoraAdapter, weight_grad: np.ndarray
) -> tuple[np.ndarray, np.ndarray]:
    """Chain rule from a full-weight gradient to factor gradients.

    With W = frozen + scaling * B @ A:
    dL/dB = scaling * dL/dW @ A.T and dL/dA = scaling * B.T @ dL/dW.
    """
    if weight_grad.shape != adapter.shape:
        raise ShapeError(
            f"weight gradient {weight_grad.shape} does not match adapter {adapter.shape}"
        )
    grad_b = adapter.scaling * (weight_grad @ adapter.a_factor.T)
    grad_a = adapter.scaling * (adapter.b_factor.T @ weight_grad)
    return grad_b, grad_a
