"""Server-side fusion of client adapters.

The exact route concatenates factors so the block product equals the weighted
sum of per-client updates, then compresses with thin QR and slices to the
server rank. Baseline aggregators (factor averaging, zero padding, the raw
stack) are kept for comparison; factor averaging is biased by construction,
which is the point.

Sample-count weights and each adapter's forward scaling are folded into the
A-side blocks, so every aggregate below is expressed in true weight units.
Clients are always processed in ascending client id, making results
independent of arrival order.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .adapter import LoraAdapter
from .linalg import RankError, ShapeError, frobenius_norm, slice_cols, slice_rows, thin_qr


class RankCompatibilityError(RankError):
    """A homogeneous-rank baseline was fed heterogeneous ranks."""


@dataclass
class ClientUpdate:
    """One client's upload: trained adapter, sample count, optional control deltas."""

    client_id: int
    adapter: LoraAdapter
    sample_count: int
    control_deltas: tuple[np.ndarray, np.ndarray] | None = None

    def __post_init__(self):
        if self.sample_count < 1:
            raise ValueError(f"sample_count must be >= 1, got {self.sample_count}")


@dataclass
class AggregationResult:
    """QR factors of the aggregated update plus the server-rank slices.

    ``delta_exact`` keeps the pre-truncation update for diagnostics; a real
    deployment would drop it, the simulator wants it for error accounting.
    """

    q: np.ndarray
    r: np.ndarray
    server_adapter: LoraAdapter
    truncation_error: float
    delta_exact: np.ndarray = field(repr=False)


def _sorted_updates(updates: list[ClientUpdate]) -> tuple[list[ClientUpdate], np.ndarray]:
    if not updates:
        raise ValueError("cannot aggregate an empty update list")
    ordered = sorted(updates, key=lambda u: u.client_id)
    shape = ordered[0].adapter.shape
    for u in ordered:
        if u.adapter.shape != shape:
            raise ShapeError(
                f"client {u.client_id} update has shape {u.adapter.shape}, expected {shape}"
            )
    counts = np.array([u.sample_count for u in ordered], dtype=np.float64)
    return ordered, counts / counts.sum()


def concat_reconstruct(updates: list[ClientUpdate]) -> np.ndarray:
    """Exact weighted-sum update via block concatenation.

    Stacking B factors side by side and weight-scaled A factors on top of each
    other makes the single block product equal sum_k p_k * s_k * B_k A_k, so
    heterogeneous ranks fuse without averaging bias.
    """
    ordered, weights = _sorted_updates(updates)
    b_concat = np.hstack([u.adapter.b_factor for u in ordered])
    a_concat = np.vstack(
        [w * u.adapter.scaling * u.adapter.a_factor for u, w in zip(ordered, weights)]
    )
    return b_concat @ a_concat


def qr_compress(delta: np.ndarray, server_rank: int) -> AggregationResult:
    """Thin-QR compression of an aggregated update to the server rank.

    The discarded trailing block of R measures the truncation exactly:
    ||delta - B_s A_s||_F equals ||R[r_s:, :]||_F, which is re-verified on
    every call.
    """
    d, k = delta.shape
    if not 1 <= server_rank <= min(d, k):
        raise RankError(f"server rank {server_rank} out of range for shape {(d, k)}")
    q, r = thin_qr(delta)
    b_s = slice_cols(q, server_rank)
    a_s = slice_rows(r, server_rank)
    truncation_error = frobenius_norm(r[server_rank:, :])
    residual = frobenius_norm(delta - b_s @ a_s)
    if abs(residual - truncation_error) > 1e-9 * (1.0 + frobenius_norm(delta)):
        raise ArithmeticError(
            f"truncation identity violated: residual {residual!r} vs "
            f"trailing-block norm {truncation_error!r}"
        )
    return AggregationResult(
        q=q,
        r=r,
        server_adapter=LoraAdapter(b_s, a_s, server_rank, scaling=1.0),
        truncation_error=truncation_error,
        delta_exact=delta.copy(),
    )


def personalize(result: AggregationResult, client_rank: int) -> LoraAdapter:
    """Leading-slice factors for one client; stays inside the global subspace."""
    if client_rank > min(result.q.shape[1], result.r.shape[0]):
        raise RankError(
            f"client rank {client_rank} exceeds available rank {result.q.shape[1]}"
        )
    b = slice_cols(result.q, client_rank)
    a = slice_rows(result.r, client_rank)
    return LoraAdapter(b, a, client_rank, scaling=1.0)


def apply_global(
    theta0: np.ndarray, result: AggregationResult, global_scale: float = 1.0
) -> np.ndarray:
    adapter = result.server_adapter
    if adapter.shape != theta0.shape:
        raise ShapeError(f"update {adapter.shape} does not match weight {theta0.shape}")
    return theta0 + global_scale * (adapter.b_factor @ adapter.a_factor)


def baseline_factor_average(updates: list[ClientUpdate]) -> np.ndarray:
    """Biased factor-averaging aggregate: (sum p_k B_k)(sum p_k s_k A_k).

    Requires homogeneous ranks; the averaged-product bias relative to
    sum p_k s_k B_k A_k persists even then.
    """
    ordered, weights = _sorted_updates(updates)
    ranks = {u.adapter.rank for u in ordered}
    if len(ranks) > 1:
        raise RankCompatibilityError(
            f"rank-incompatible baseline: factor averaging needs equal ranks, got {sorted(ranks)}"
        )
    b_mean = sum(w * u.adapter.b_factor for u, w in zip(ordered, weights))
    a_mean = sum(w * u.adapter.scaling * u.adapter.a_factor for u, w in zip(ordered, weights))
    return b_mean @ a_mean


def baseline_zero_pad(updates: list[ClientUpdate], target_rank: int) -> np.ndarray:
    """Zero-pad factors to a common rank, then factor-average.

    Reduces to plain factor averaging when ranks are already homogeneous.
    """
    ordered, weights = _sorted_updates(updates)
    max_rank = max(u.adapter.rank for u in ordered)
    if target_rank < max_rank:
        raise RankError(f"target rank {target_rank} below largest client rank {max_rank}")
    d, k = ordered[0].adapter.shape
    b_mean = np.zeros((d, target_rank))
    a_mean = np.zeros((target_rank, k))
    for u, w in zip(ordered, weights):
        r = u.adapter.rank
        b_mean[:, :r] += w * u.adapter.b_factor
        a_mean[:r, :] += w * u.adapter.scaling * u.adapter.a_factor
    return b_mean @ a_mean


def baseline_full_stack(updates: list[ClientUpdate]) -> tuple[np.ndarray, np.ndarray]:
    """Unreduced concatenation (rank sum_k r_k) whose product is the exact update."""
    ordered, weights = _sorted_updates(updates)
    b_stack = np.hstack([u.adapter.b_factor for u in ordered])
    a_stack = np.vstack(
        [w * u.adapter.scaling * u.adapter.a_factor for u, w in zip(ordered, weights)]
    )
    return b_stack, a_stack
