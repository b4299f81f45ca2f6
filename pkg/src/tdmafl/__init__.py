"""Asynchronous federated learning over a slotted TDMA channel.

Slot-exact scheduling simulation, stale-gradient SGD, heterogeneous data
provisioning, and the empirical verification layer for the timing and
convergence claims, plus a CLI experiment runner.
"""

from .errors import (
    ConfigError,
    DataError,
    IdxParseError,
    NumericsError,
    SamplingError,
)
from .timing import (
    DelayChoice,
    SystemConfig,
    TimingProfile,
    compute_tau_asyn,
    compute_tau_comm,
    compute_tau_comp,
    idfl_staleness,
    optimal_intentional_delay,
    profile,
    staleness_closed_form,
)
from .simulator import (
    DeviceState,
    RunMetrics,
    SimResult,
    StalenessRecord,
    TimelineEvent,
    average_round_duration,
    measured_staleness,
    run_timeline,
    select_transmitters,
    steady_round_duration,
)
from .learner import (
    GlobalState,
    LocalGradient,
    SgdLearner,
    aggregate,
    global_loss,
    global_update,
    local_update,
)
from .tasks import (
    MlpTask,
    QuadraticTask,
    SoftmaxRegressionTask,
    Task,
    make_quadratic,
)
from .data import (
    DatasetShard,
    LabeledDataset,
    load_cifar10_batches,
    load_idx_dataset,
    load_idx_images,
    load_idx_labels,
    make_clustered_dataset,
    partition_iid,
    partition_single_label,
    shard_arrays,
    write_idx_images,
    write_idx_labels,
)

__version__ = "0.1.0"
