"""Energy-aware federated edge learning simulator.

Workers train a shared classifier under a hard per-round deadline; a
confidence filter shrinks each worker's workload after the first local epoch,
and a per-worker optimizer splits the deadline between computation and upload
to minimize round energy.  Everything is deterministic given a seed.
"""
__version__ = "0.1.0"

from .channel import BeamState, ChannelRealization, beam_and_gain, sample_channel, uplink_rate
from .federation import (
    ExperimentState,
    RoundConfig,
    RoundRecord,
    WorkerProfile,
    WorkerRoundStats,
    partition_iid,
    partition_noniid,
    run_experiment,
    run_round,
    select_workers,
)
from .io_cli import (
    ConfigError,
    ExperimentConfig,
    MetricsRow,
    cli_main,
    generate_synthetic,
    load_config,
    load_mnist_idx,
    run_from_config,
    write_metrics,
)
from .learning import (
    FilterDecision,
    LabeledDataset,
    ModelParameters,
    aggregate,
    cross_entropy_loss,
    evaluate,
    filter_samples,
    forward,
    init_model,
    local_round,
    output_gradient,
    sgd_epoch,
)
from .numerics import (
    GOLDEN_SHRINK,
    Interval,
    SingularMatrixError,
    golden_section_min,
    lambert_w0,
    max_generalized_eigvec,
)
from .resource_optimizer import (
    DeviceBounds,
    InfeasibleBandwidthError,
    InfeasibleDeadlineError,
    InfeasibleError,
    InfeasiblePowerError,
    ResourcePlan,
    Workload,
    computation_energy,
    computation_time,
    effective_cycles,
    minimize_round_energy,
    optimal_bandwidth,
    required_power,
    upload_energy,
    upload_time_bounds,
)
