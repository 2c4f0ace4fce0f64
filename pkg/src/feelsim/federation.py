"""Round orchestration: partitioning, scheduling, training, energy accounting.

A round proceeds as: sample the scheduled workers, draw their uplink channels,
run local training (full first epoch, confidence filter, remaining epochs on
the surviving samples), beamform against the co-scheduled interferers, split
the bandwidth, plan each worker's compute/upload operating point, charge
energy budgets, and aggregate the updates that made it back in time.

Every random draw comes from a stream keyed by (seed, domain, trial, worker,
round), so per-worker work is order-independent and can run on a thread pool
without changing a single bit of the output.
"""
from __future__ import annotations

import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, replace

import numpy as np

from .channel import beam_and_gain, sample_channel, uplink_rate
from .learning import (
    LabeledDataset,
    ModelParameters,
    aggregate,
    evaluate,
    init_model,
    local_round,
    param_bits,
)
from .resource_optimizer import (
    DeviceBounds,
    InfeasibleBandwidthError,
    InfeasibleError,
    ResourcePlan,
    Workload,
    minimize_round_energy,
    optimal_bandwidth,
)
from .streams import (
    DOMAIN_CHANNEL,
    DOMAIN_DEADLINE,
    DOMAIN_INIT,
    DOMAIN_SELECT,
    DOMAIN_TRAIN,
    substream,
)

BANDWIDTH_MODES = ("equal", "adaptive")
CHANNEL_MODES = ("block", "static")


@dataclass
class WorkerProfile:
    """One edge device: its data shard, hardware envelope, and placement."""

    worker_id: int
    dataset: LabeledDataset
    bounds: DeviceBounds
    distance_m: float
    los_angle: float
    remaining_energy_j: float = math.inf


@dataclass(frozen=True)
class RoundConfig:
    """Operational knobs shared by every round of an experiment."""

    select_fraction: float
    threshold: float
    epochs: int
    batch_size: int
    learning_rate: float
    bandwidth_hz: float
    noise_power_w: float
    cycles_per_sample: float
    antennas: int = 4
    pathloss_exp: float = 3.2
    rician_k_db: float = 8.0
    deadline_s: float | None = None  # None -> derived from the fleet, see default_deadline
    bandwidth_mode: str = "equal"
    channel_mode: str = "block"

    def __post_init__(self) -> None:
        if not 0.0 < self.select_fraction <= 1.0:
            raise ValueError(f"select_fraction must be in (0, 1], got {self.select_fraction}")
        if not 0.0 <= self.threshold <= 1.0:
            raise ValueError(f"threshold must be in [0, 1], got {self.threshold}")
        if self.epochs < 1 or self.batch_size < 1:
            raise ValueError("epochs and batch_size must be >= 1")
        if self.learning_rate <= 0.0:
            raise ValueError(f"learning_rate must be positive, got {self.learning_rate}")
        if self.bandwidth_hz <= 0.0 or self.noise_power_w <= 0.0:
            raise ValueError("bandwidth and noise power must be positive")
        if self.cycles_per_sample <= 0.0:
            raise ValueError(f"cycles_per_sample must be positive, got {self.cycles_per_sample}")
        if self.antennas < 1:
            raise ValueError(f"antennas must be >= 1, got {self.antennas}")
        if self.deadline_s is not None and self.deadline_s <= 0.0:
            raise ValueError(f"deadline must be positive, got {self.deadline_s}")
        if self.bandwidth_mode not in BANDWIDTH_MODES:
            raise ValueError(f"bandwidth_mode must be one of {BANDWIDTH_MODES}")
        if self.channel_mode not in CHANNEL_MODES:
            raise ValueError(f"channel_mode must be one of {CHANNEL_MODES}")


@dataclass(frozen=True)
class WorkerRoundStats:
    """What one scheduled worker did in one round."""

    worker_id: int
    kappa: int  # samples the confidence filter dropped
    e_cmp_j: float
    e_up_j: float
    t_cmp_s: float
    t_up_s: float
    f_cmp_hz: float
    p_up_w: float
    bandwidth_share: float  # fraction of the total bandwidth
    feasible: bool  # True when the update was delivered and charged in full
    remaining_energy_j: float


@dataclass(frozen=True)
class RoundRecord:
    """Global view of one round."""

    round_index: int
    test_loss: float
    test_accuracy: float
    inst_energy_j: float
    cum_energy_j: float
    excluded_fraction: float
    n_updates: int
    worker_stats: tuple[WorkerRoundStats, ...]


@dataclass
class ExperimentState:
    """Mutable state threaded through the rounds of one trial."""

    model: ModelParameters
    workers: list[WorkerProfile]
    test_data: LabeledDataset
    seed: int
    trial: int = 0
    cumulative_energy_j: float = 0.0


def partition_iid(
    data: LabeledDataset, k: int, rng: np.random.Generator
) -> list[LabeledDataset]:
    """Disjoint random split into k shards whose sizes differ by at most one."""
    n = len(data)
    if not 1 <= k <= n:
        raise ValueError(f"need 1 <= k <= {n} shards, got {k}")
    perm = rng.permutation(n)
    base, extra = divmod(n, k)
    shards = []
    pos = 0
    for i in range(k):
        size = base + (1 if i < extra else 0)
        shards.append(data.take(perm[pos : pos + size]))
        pos += size
    return shards


def partition_noniid(
    data: LabeledDataset,
    k: int,
    rng: np.random.Generator,
    classes_per_worker: int = 2,
) -> list[LabeledDataset]:
    """Label-skewed split: each worker sees exactly classes_per_worker classes.

    Class identities are dealt around a shuffled cycle so every class is used
    and no worker sees the same class twice; each class's samples are split
    evenly among the workers that hold it.
    """
    n = len(data)
    if not 1 <= k <= n:
        raise ValueError(f"need 1 <= k <= {n} shards, got {k}")
    classes = np.unique(data.labels)
    c = classes.size
    if not 1 <= classes_per_worker <= c:
        raise ValueError(
            f"classes_per_worker must be in [1, {c}], got {classes_per_worker}"
        )
    order = rng.permutation(c)
    seq = [int(classes[order[i % c]]) for i in range(k * classes_per_worker)]
    per_class_slots: dict[int, int] = {}
    for cls in seq:
        per_class_slots[cls] = per_class_slots.get(cls, 0) + 1

    shard_pools: dict[int, list[np.ndarray]] = {}
    for cls in sorted(per_class_slots):
        idx = rng.permutation(np.flatnonzero(data.labels == cls))
        slots = per_class_slots[cls]
        if idx.size < slots:
            raise ValueError(
                f"class {cls} has {idx.size} samples for {slots} shard slots"
            )
        shard_pools[cls] = list(np.array_split(idx, slots))

    shards = []
    for w in range(k):
        chunks = [shard_pools[cls].pop(0) for cls in seq[w * classes_per_worker : (w + 1) * classes_per_worker]]
        shards.append(data.take(np.concatenate(chunks)))
    return shards


def select_workers(
    workers: list[WorkerProfile], fraction: float, rng: np.random.Generator
) -> list[WorkerProfile]:
    """Uniform sample of ceil(fraction * K) distinct workers, id order."""
    if not 0.0 < fraction <= 1.0:
        raise ValueError(f"fraction must be in (0, 1], got {fraction}")
    k = len(workers)
    if k == 0:
        raise ValueError("no workers to select from")
    n_sel = min(k, max(1, math.ceil(fraction * k)))
    chosen = sorted(rng.choice(k, size=n_sel, replace=False).tolist())
    return [workers[i] for i in chosen]


def default_deadline(
    workers: list[WorkerProfile], config: RoundConfig, model_bits: int, seed: int, trial: int
) -> float:
    """Round deadline giving 1.5x slack over a pessimistic straight-through pass.

    Budgeted as the slowest worker's unfiltered compute time at f_max plus the
    worst worker's upload time on an equal bandwidth share at full power,
    beamformed against the strongest co-schedulable interferers and derated by
    a 6 dB fading margin (round-time channels are fresh draws).  Uses a
    dedicated stream so the figure does not disturb (or depend on) the
    simulation's own channel draws.
    """
    if not workers:
        raise ValueError("no workers to derive a deadline from")
    n_sel = min(len(workers), max(1, math.ceil(config.select_fraction * len(workers))))
    share = config.bandwidth_hz / n_sel
    channels = []
    for p in workers:
        rng = substream(seed, DOMAIN_DEADLINE, trial, p.worker_id)
        channels.append(sample_channel(
            rng, p.distance_m, config.pathloss_exp, config.rician_k_db,
            config.antennas, p.los_angle,
        ))
    powers = [float(np.vdot(h, h).real) for h in channels]
    betas = []
    for i, h in enumerate(channels):
        others = sorted(
            (j for j in range(len(channels)) if j != i), key=lambda j: -powers[j]
        )[: n_sel - 1]
        interferers = [channels[j] for j in others]
        betas.append(beam_and_gain(h, interferers, config.noise_power_w).beta)
    beta_worst = float(min(betas)) / 4.0  # 6 dB margin for the per-round refresh
    p_max = min(p.bounds.p_max_w for p in workers)
    t_up = model_bits / uplink_rate(share, beta_worst, p_max)
    t_cmp = max(
        config.cycles_per_sample * config.epochs * len(p.dataset) / p.bounds.f_max_hz
        for p in workers
    )
    return 1.5 * (t_cmp + t_up)


def _plan_worker(
    profile: WorkerProfile,
    kappa: int,
    model_bits: int,
    config: RoundConfig,
    deadline_s: float,
    bandwidth_hz: float,
    beta: float,
) -> ResourcePlan | None:
    workload = Workload(
        dataset_size=len(profile.dataset),
        excluded_count=kappa,
        epochs=config.epochs,
        cycles_per_sample=config.cycles_per_sample,
        model_bits=model_bits,
    )
    try:
        return minimize_round_energy(workload, deadline_s, bandwidth_hz, beta, profile.bounds)
    except InfeasibleError:
        return None


def run_round(
    state: ExperimentState,
    config: RoundConfig,
    round_index: int,
    max_workers: int = 1,
) -> RoundRecord:
    """Advance the experiment by one deadline-bound communication round."""
    if config.deadline_s is None:
        raise ValueError("run_round needs a resolved deadline; see run_experiment")
    seed, trial = state.seed, state.trial
    deadline = config.deadline_s
    model_bits = param_bits(state.model.architecture)
    selected = select_workers(
        state.workers, config.select_fraction, substream(seed, DOMAIN_SELECT, trial, round_index)
    )

    def train_one(profile: WorkerProfile):
        if config.channel_mode == "static":
            ch_rng = substream(seed, DOMAIN_CHANNEL, trial, profile.worker_id)
        else:
            ch_rng = substream(seed, DOMAIN_CHANNEL, trial, profile.worker_id, round_index)
        h = sample_channel(
            ch_rng, profile.distance_m, config.pathloss_exp, config.rician_k_db,
            config.antennas, profile.los_angle,
        )
        tr_rng = substream(seed, DOMAIN_TRAIN, trial, profile.worker_id, round_index)
        local_model, decision = local_round(
            state.model, profile.dataset, config.epochs, config.batch_size,
            config.learning_rate, config.threshold, tr_rng,
        )
        return h, local_model, decision

    if max_workers > 1 and len(selected) > 1:
        with ThreadPoolExecutor(max_workers=max_workers) as pool:
            trained = list(pool.map(train_one, selected))
    else:
        trained = [train_one(p) for p in selected]

    channels = [t[0] for t in trained]
    beams = [
        beam_and_gain(channels[i], channels[:i] + channels[i + 1 :], config.noise_power_w)
        for i in range(len(selected))
    ]

    n_sel = len(selected)
    shares = [config.bandwidth_hz / n_sel] * n_sel
    plans = [
        _plan_worker(p, t[2].excluded_count, model_bits, config, deadline, s, b.beta)
        for p, t, s, b in zip(selected, trained, shares, beams)
    ]
    if config.bandwidth_mode == "adaptive":
        fractions = []
        for plan, beam, share in zip(plans, beams, shares):
            if plan is None:
                fractions.append(share / config.bandwidth_hz)
                continue
            try:
                bw = optimal_bandwidth(model_bits, plan.t_up_s, plan.p_w, beam.beta)
            except InfeasibleBandwidthError:
                bw = share
            fractions.append(bw / config.bandwidth_hz)
        total = sum(fractions)
        if total > 1.0:
            fractions = [f / total for f in fractions]
        shares = [f * config.bandwidth_hz for f in fractions]
        plans = [
            _plan_worker(p, t[2].excluded_count, model_bits, config, deadline, s, b.beta)
            for p, t, s, b in zip(selected, trained, shares, beams)
        ]

    updates: list[tuple[ModelParameters, int]] = []
    stats: list[WorkerRoundStats] = []
    inst_energy = 0.0
    total_kappa = 0
    total_data = 0
    for profile, (_, local_model, decision), plan, share in zip(selected, trained, plans, shares):
        total_kappa += decision.excluded_count
        total_data += len(profile.dataset)
        lam = share / config.bandwidth_hz
        if plan is None:
            stats.append(WorkerRoundStats(
                worker_id=profile.worker_id, kappa=decision.excluded_count,
                e_cmp_j=0.0, e_up_j=0.0, t_cmp_s=0.0, t_up_s=0.0, f_cmp_hz=0.0,
                p_up_w=0.0, bandwidth_share=lam, feasible=False,
                remaining_energy_j=profile.remaining_energy_j,
            ))
            continue
        cost = plan.e_cmp_j + plan.e_up_j
        if cost <= profile.remaining_energy_j:
            profile.remaining_energy_j -= cost
            inst_energy += cost
            updates.append((local_model, len(profile.dataset)))
            stats.append(WorkerRoundStats(
                worker_id=profile.worker_id, kappa=decision.excluded_count,
                e_cmp_j=plan.e_cmp_j, e_up_j=plan.e_up_j, t_cmp_s=plan.t_cmp_s,
                t_up_s=plan.t_up_s, f_cmp_hz=plan.f_hz, p_up_w=plan.p_w,
                bandwidth_share=lam, feasible=True,
                remaining_energy_j=profile.remaining_energy_j,
            ))
        else:
            # battery dies mid-round: the compute spend is real, the upload never runs
            charged = min(plan.e_cmp_j, profile.remaining_energy_j)
            profile.remaining_energy_j -= charged
            inst_energy += charged
            stats.append(WorkerRoundStats(
                worker_id=profile.worker_id, kappa=decision.excluded_count,
                e_cmp_j=charged, e_up_j=0.0, t_cmp_s=plan.t_cmp_s, t_up_s=0.0,
                f_cmp_hz=plan.f_hz, p_up_w=0.0, bandwidth_share=lam, feasible=False,
                remaining_energy_j=profile.remaining_energy_j,
            ))

    if updates:
        state.model = aggregate(updates)
    loss, acc = evaluate(state.model, state.test_data)
    state.cumulative_energy_j += inst_energy
    return RoundRecord(
        round_index=round_index,
        test_loss=loss,
        test_accuracy=acc,
        inst_energy_j=inst_energy,
        cum_energy_j=state.cumulative_energy_j,
        excluded_fraction=total_kappa / total_data if total_data else 0.0,
        n_updates=len(updates),
        worker_stats=tuple(stats),
    )


def run_experiment(
    workers: list[WorkerProfile],
    test_data: LabeledDataset,
    architecture: list[int],
    config: RoundConfig,
    rounds: int,
    seed: int,
    trial: int = 0,
    max_workers: int = 1,
) -> tuple[list[RoundRecord], ModelParameters]:
    """Run one trial of `rounds` sequential rounds from a fresh global model.

    A None deadline in the config is resolved once, up front, from the fleet.
    Returns the per-round records plus the final global model.
    """
    if rounds < 1:
        raise ValueError(f"rounds must be >= 1, got {rounds}")
    model = init_model(architecture, substream(seed, DOMAIN_INIT, trial))
    if config.deadline_s is None:
        bits = param_bits(model.architecture)
        config = replace(config, deadline_s=default_deadline(workers, config, bits, seed, trial))
    state = ExperimentState(
        model=model, workers=workers, test_data=test_data, seed=seed, trial=trial
    )
    records = [run_round(state, config, r, max_workers=max_workers) for r in range(1, rounds + 1)]
    return records, state.model
