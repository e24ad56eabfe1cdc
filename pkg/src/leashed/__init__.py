"""Lock-free and lock-based parallel SGD with full execution telemetry."""

from .atomics import AtomicBool, AtomicInt, AtomicRef
from .data import Dataset, load_mnist_idx, sample_batch, synthetic_blobs, write_mnist_idx
from .dynamics import (
    DynamicsParams,
    fixed_point,
    n_t_closed,
    n_t_recurrence,
    rates,
    simulate_events,
)
from .harness import (
    RunReport,
    read_reports,
    report_from_result,
    run_experiment,
    staleness_windows,
    sweep,
    write_report,
)
from .nn import (
    Conv2D,
    Dense,
    MaxPool,
    Network,
    NetworkSpec,
    build_network,
    cnn_spec,
    forward,
    loss_and_gradient,
    mean_loss,
    mlp_spec,
    param_count,
    tiny_spec,
)
from .optimizers import (
    LeashedProbe,
    OptimizerConfig,
    RunResult,
    UpdateRecord,
    run,
    run_async_lock,
    run_hogwild,
    run_leashed,
    run_seq,
)
from .param_vector import ParameterVector, PayloadPool, VersionSlot

__version__ = "0.1.0"
