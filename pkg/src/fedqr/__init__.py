"""Federated low-rank fine-tuning simulator with QR-based aggregation.

Library layout:

* ``linalg``      dense kernels: matmul, thin QR, norms, subspace residuals
* ``adapter``     low-rank adapter pairs, QR-orthonormal initialization
* ``model``       toy softmax classifier carrying the adapter
* ``data``        synthetic blobs and Dirichlet non-IID partitioning
* ``optim``       AdamW plus control-variate drift correction
* ``aggregation`` concatenated-QR fusion and baseline aggregators
* ``federation``  round orchestration, metrics, communication accounting
* ``config``      experiment specs, presets, metrics serialization
* ``verify``      named property suites behind the acceptance criteria
"""

from .adapter import (
    BaseWeight,
    LoraAdapter,
    effective_weight,
    factor_gradients,
    qr_orthogonal_init,
)
from .aggregation import (
    AggregationResult,
    ClientUpdate,
    apply_global,
    baseline_factor_average,
    baseline_full_stack,
    baseline_zero_pad,
    concat_reconstruct,
    personalize,
    qr_compress,
)
from .config import (
    DataParams,
    ExperimentSpec,
    parse_config,
    preset_spec,
    serialize_spec,
)
from .data import (
    Dataset,
    PartitionPlan,
    dirichlet_partition,
    generate_blobs,
    read_dataset,
    write_dataset,
)
from .federation import (
    ClientState,
    FederationConfig,
    RoundContext,
    RoundMetrics,
    ServerState,
    account_communication,
    init_federation,
    run_federation,
    run_round,
)
from .linalg import (
    frobenius_norm,
    matmul,
    slice_cols,
    slice_rows,
    subspace_residual,
    thin_qr,
)
from .model import Batch, ToyModel, evaluate, forward_loss
from .optim import (
    AdamWState,
    ControlVariates,
    adamw_step,
    corrected_gradient,
    local_control_update,
    pad_delta,
    server_control_aggregate,
    slice_controls,
)

__version__ = "0.1.0"
