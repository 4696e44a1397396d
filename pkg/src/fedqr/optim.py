"""AdamW plus the rank-aware control-variate machinery.

The optimizer is standard decoupled-weight-decay AdamW with bias correction.
Control variates follow the drift-correction recipe: clients correct raw
gradients by (global control - local control), refresh their local control to
the latest epoch-mean gradient, and the server folds the average delta into
the global control. Controls for heterogeneous ranks are stored at the server
rank and moved between ranks by leading-slice / zero-pad embeddings.
"""

from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np

from .linalg import RankError, ShapeError


class NonFiniteGradientError(FloatingPointError):
    """A gradient contained NaN or Inf; the training round must halt."""


@dataclass
class AdamWState:
    """Moment estimates and hyperparameters for one parameter matrix."""

    m: np.ndarray
    v: np.ndarray
    step: int = 0
    lr: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    weight_decay: float = 0.0


def fresh_adamw_state(
    shape: tuple[int, int],
    lr: float = 1e-4,
    beta1: float = 0.9,
    beta2: float = 0.999,
    eps: float = 1e-8,
    weight_decay: float = 0.0,
) -> AdamWState:
    return AdamWState(
        m=np.zeros(shape),
        v=np.zeros(shape),
        step=0,
        lr=lr,
        beta1=beta1,
        beta2=beta2,
        eps=eps,
        weight_decay=weight_decay,
    )


def adamw_step(
    param: np.ndarray, grad: np.ndarray, state: AdamWState
) -> tuple[np.ndarray, AdamWState]:
    """One AdamW update; returns the new parameter and advanced state.

    param <- param - lr * (m_hat / (sqrt(v_hat) + eps) + weight_decay * param)
    with bias-corrected m_hat, v_hat.
    """
    if param.shape != grad.shape or param.shape != state.m.shape:
        raise ShapeError(
            f"param {param.shape}, grad {grad.shape} and state {state.m.shape} must agree"
        )
    if not np.all(np.isfinite(grad)):
        raise NonFiniteGradientError("gradient contains NaN or Inf")
    step = state.step + 1
    m = state.beta1 * state.m + (1.0 - state.beta1) * grad
    v = state.beta2 * state.v + (1.0 - state.beta2) * np.square(grad)
    m_hat = m / (1.0 - state.beta1**step)
    v_hat = v / (1.0 - state.beta2**step)
    new_param = param - state.lr * (
        m_hat / (np.sqrt(v_hat) + state.eps) + state.weight_decay * param
    )
    return new_param, replace(state, m=m, v=v, step=step)


@dataclass
class ControlVariates:
    """Control pair for the A factor (r_ref x k) and the B factor (d x r_ref)."""

    c_a: np.ndarray
    c_b: np.ndarray
    r_ref: int

    def __post_init__(self):
        if self.c_a.shape[0] != self.r_ref or self.c_b.shape[1] != self.r_ref:
            raise ShapeError(
                f"controls {self.c_a.shape} / {self.c_b.shape} do not match rank {self.r_ref}"
            )

    def copy(self) -> "ControlVariates":
        return ControlVariates(self.c_a.copy(), self.c_b.copy(), self.r_ref)


def zero_controls(d: int, k: int, r_ref: int) -> ControlVariates:
    return ControlVariates(c_a=np.zeros((r_ref, k)), c_b=np.zeros((d, r_ref)), r_ref=r_ref)


def corrected_gradient(
    raw: np.ndarray, global_c: np.ndarray, local_c: np.ndarray
) -> np.ndarray:
    """raw + (global control - local control); the drift-corrected gradient."""
    if raw.shape != global_c.shape or raw.shape != local_c.shape:
        raise ShapeError(
            f"gradient {raw.shape} and controls {global_c.shape} / {local_c.shape} must agree"
        )
    return raw + (global_c - local_c)


def local_control_update(
    last_raw_grad: np.ndarray, local_c: np.ndarray
) -> tuple[np.ndarray, np.ndarray]:
    """Returns (delta, new local control) = (grad - control, grad)."""
    if last_raw_grad.shape != local_c.shape:
        raise ShapeError(
            f"gradient {last_raw_grad.shape} vs control {local_c.shape}"
        )
    return last_raw_grad - local_c, last_raw_grad.copy()


def server_control_aggregate(global_c: np.ndarray, deltas: list[np.ndarray]) -> np.ndarray:
    """Fold the unweighted mean of client deltas into the global control."""
    if not deltas:
        raise ValueError("cannot aggregate an empty list of control deltas")
    for delta in deltas:
        if delta.shape != global_c.shape:
            raise ShapeError(
                f"delta {delta.shape} does not match global control {global_c.shape}"
            )
    total = np.zeros_like(global_c)
    for delta in deltas:
        total = total + delta
    return global_c + total / len(deltas)


def slice_controls(
    controls: ControlVariates, client_rank: int
) -> tuple[np.ndarray, np.ndarray]:
    """Leading-slice broadcast of stored controls down to a client rank."""
    if client_rank > controls.r_ref:
        raise RankError(f"client rank {client_rank} exceeds stored rank {controls.r_ref}")
    return controls.c_a[:client_rank, :].copy(), controls.c_b[:, :client_rank].copy()


def pad_delta(delta: np.ndarray, target_rank: int, axis: int = 0) -> np.ndarray:
    """Zero-pad a rank-r_k delta along ``axis`` up to ``target_rank``.

    A-side deltas (r x k) pad trailing rows (axis 0); B-side deltas (d x r)
    pad trailing columns (axis 1).
    """
    if axis not in (0, 1):
        raise ValueError("axis must be 0 or 1")
    rank = delta.shape[axis]
    if rank > target_rank:
        raise RankError(f"delta rank {rank} exceeds target {target_rank}")
    pad = [(0, 0), (0, 0)]
    pad[axis] = (0, target_rank - rank)
    return np.pad(delta, pad)
