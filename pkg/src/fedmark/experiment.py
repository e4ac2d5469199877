"""End-to-end experiment orchestration.

Builds the synthetic node fleet, runs the three learning stages
interleaved with the network/failure simulation, and assembles the
metrics report. Every random draw is keyed by (seed, purpose, round,
node), so results are a pure function of (config, seed) no matter how
many workers run the per-node rounds.
"""

import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from . import seeds
from .config import ExperimentConfig
from .datagen import (
    DataGenConfig,
    DataSelectionPolicy,
    SubjectProfile,
    class_distribution,
    draw_domain_shift,
    generate_subject_stream,
    make_prototypes,
    select_data,
)
from .errors import ConfigError
from .losses import MODALITIES, ContrastiveConfig, KDConfig, default_fusion_recipes
from .netsim import BandwidthTrace, SensorFailureProcess, failure_schedule, modalities_down, simulate_round
from .nn import SGDConfig
from .protocol import (
    ModelBundle,
    NodeState,
    ServerState,
    WeakStageConfig,
    aggregate_weak_updates,
    build_model_bundle,
    evaluate,
    local_unsup_round,
    local_weak_round,
    modality_wise_fedavg,
    pretrain,
    serialize_bundle,
)
from .report import MetricsReport
from .weak_labels import activity_log_from_stream, associate, load_activity_table

FAILURE_HORIZON_DAYS = 28


@dataclass
class SimNode:
    state: NodeState
    profile: SubjectProfile
    train_class_counts: np.ndarray  # ground-truth train distribution
    failures: list = field(default_factory=list)  # (sensor, down_s, up_s)


@dataclass
class World:
    cfg: ExperimentConfig
    class_names: dict
    label_map: object
    prototypes: dict
    pretrain_pool: list
    nodes: list  # SimNode
    recipes: list
    trace: BandwidthTrace


@dataclass
class ExperimentResult:
    stage_evals: dict = field(default_factory=dict)  # stage -> {node_id: EvalReport}
    stage_means: dict = field(default_factory=dict)
    round_times: dict = field(default_factory=dict)  # stage -> [seconds]
    payload_bytes: int = 0
    final_model: ModelBundle = None


def _strip_labels(stream, keep_fraction, rng):
    for s in stream:
        if s.fine_label is not None and rng.random() >= keep_fraction:
            s.fine_label = None


def build_world(cfg: ExperimentConfig) -> World:
    class_names, label_map = load_activity_table(cfg.data.class_table)
    if len(class_names) != cfg.data.n_classes:
        raise ConfigError(
            f"class table {cfg.data.class_table!r} has {len(class_names)} classes, "
            f"config says {cfg.data.n_classes}"
        )
    dims = cfg.data.modality_dims
    gen = DataGenConfig(
        n_classes=cfg.data.n_classes,
        modality_dims=dims,
        noise_sigma=cfg.data.noise_sigma,
        mean_run_samples=cfg.data.mean_run_samples,
        presence_rate=cfg.data.presence_rate,
        coarse_fraction=cfg.data.coarse_fraction,
    )
    prototypes = make_prototypes(cfg.data.n_classes, dims, seeds.rng_for(cfg.seed, seeds.PROTOTYPES))

    # server-side labeled pool: earlier participants with their own domain shifts
    pool = []
    for i in range(cfg.pretrain.subjects):
        rng = seeds.rng_for(cfg.seed, seeds.PRETRAIN, i)
        # public-dataset analog: near-clean capture conditions, so the
        # pretrained model has never seen the deployment-home shifts
        profile = SubjectProfile(
            subject_id=f"pool{i:02d}",
            group="NC",
            dirichlet_alpha=5.0,  # pool subjects cover the classes broadly
            domain_shift=draw_domain_shift(dims, rng, mixing=0.0,
                                           scale_range=(0.9, 1.1), offset_bound=0.2),
            label_fraction=1.0,
            activity_richness=cfg.data.n_classes,
        )
        stream = generate_subject_stream(
            profile, cfg.pretrain.duration_s, rng, prototypes, label_map, gen
        )
        pool.extend(s for s in stream if s.fine_label is not None)

    groups = cfg.nodes.groups
    nodes = []
    for i in range(cfg.nodes.count):
        group = groups[i % len(groups)]
        rng = seeds.rng_for(cfg.seed, seeds.SUBJECT_STREAM, i)
        profile = SubjectProfile(
            subject_id=f"node{i:02d}",
            group=group,
            dirichlet_alpha=cfg.data.dirichlet_alpha,
            domain_shift=draw_domain_shift(dims, rng, cfg.data.domain_mixing),
            label_fraction=1.0,  # generated fully labeled, stripped below
            activity_richness=cfg.nodes.richness.get(group, cfg.data.n_classes),
        )
        total = cfg.data.train_duration_s + cfg.data.test_duration_s
        stream = generate_subject_stream(profile, total, rng, prototypes, label_map, gen)
        train = [s for s in stream if s.timestamp < cfg.data.train_duration_s]
        test = [s for s in stream if s.timestamp >= cfg.data.train_duration_s]
        true_counts = class_distribution(train, cfg.data.n_classes).counts
        _strip_labels(train, cfg.data.label_fraction, seeds.rng_for(cfg.seed, seeds.SUBJECT_STREAM, i, 1))
        if cfg.data.apply_selection:
            train = select_data(train, DataSelectionPolicy(rate=cfg.data.selection_rate))
        log = activity_log_from_stream(train)
        weak = associate(log, train, label_map, cfg.weak.batch_size)
        profile.label_fraction = cfg.data.label_fraction
        state = NodeState(
            node_id=profile.subject_id,
            available_modalities=tuple(profile.available_modalities),
            unlabeled_store=train,
            weak_store=weak,
            labeled_store=[s for s in train if s.fine_label is not None],
            test_store=test,
        )
        failures = []
        if cfg.network.failures:
            proc = SensorFailureProcess.draw(MODALITIES, seeds.rng_for(cfg.seed, seeds.FAILURES, i))
            failures = failure_schedule(proc, FAILURE_HORIZON_DAYS, seeds.rng_for(cfg.seed, seeds.FAILURES, i, 1))
        nodes.append(SimNode(state, profile, true_counts, failures))

    recipes = default_fusion_recipes(cfg.model.embed_dim, seeds.rng_for(cfg.seed, seeds.MODEL_INIT, 1))
    trace = BandwidthTrace(
        horizon_s=FAILURE_HORIZON_DAYS * 86400.0,
        seed=int(seeds.rng_for(cfg.seed, seeds.TRACE).integers(2**31)),
        resolution_s=cfg.network.trace_resolution_s,
        day_base=cfg.network.day_base,
        night_base=cfg.network.night_base,
        noise_amplitude=cfg.network.noise_amplitude,
    )
    return World(cfg, class_names, label_map, prototypes, pool, nodes, recipes, trace)


def _node_map(cfg, fn, args_per_node):
    """Apply fn over nodes, possibly on a worker pool. Results come back
    keyed by node index, so worker count cannot affect anything."""
    if cfg.workers > 1:
        with ThreadPoolExecutor(max_workers=cfg.workers) as pool:
            return list(pool.map(lambda a: fn(*a), args_per_node))
    return [fn(*a) for a in args_per_node]


def _round_availability(world, t0):
    for node in world.nodes:
        down = modalities_down(node.failures, t0, t0 + 1.0)
        node.state.available_modalities = tuple(
            m for m in node.profile.available_modalities if m not in down
        )


def _eval_all(world, bundle, stage, report, result, clock):
    evals = {}
    for node in world.nodes:
        rep = evaluate(bundle, node.state.test_store, world.cfg.data.n_classes, node.train_class_counts)
        evals[node.state.node_id] = rep
        report.add(
            stage=stage, node_id=node.state.node_id, accuracy=rep.overall,
            per_class=[None if math.isnan(a) else a for a in rep.per_class],
            head_acc=rep.head_acc, tail_acc=rep.tail_acc, t_s=clock,
        )
    result.stage_evals[stage] = evals
    result.stage_means[stage] = float(np.mean([e.overall for e in evals.values()]))
    return evals


def run_stage1(world: World) -> ModelBundle:
    cfg = world.cfg
    server = ServerState(build_model_bundle(
        cfg.data.n_classes, cfg.data.modality_dims, cfg.model.embed_dim,
        cfg.model.hidden_dim, seeds.rng_for(cfg.seed, seeds.MODEL_INIT, 0),
    ))
    sgd = SGDConfig(cfg.pretrain.learning_rate, cfg.pretrain.batch_size)
    return pretrain(server, world.pretrain_pool, cfg.pretrain.epochs,
                    sgd, seeds.rng_for(cfg.seed, seeds.PRETRAIN, 1000))


def run_stage2(world: World, bundle: ModelBundle, report: MetricsReport, clock: float):
    cfg = world.cfg
    ccfg = ContrastiveConfig(cfg.unsup.temperature, world.recipes)
    sgd = SGDConfig(cfg.unsup.learning_rate, cfg.unsup.batch_size)
    current = bundle
    times = []
    for r in range(cfg.unsup.rounds):
        _round_availability(world, clock)
        args = [
            (node.state, current, cfg.unsup.local_epochs, ccfg, sgd,
             seeds.rng_for(cfg.seed, seeds.UNSUP_ROUND, r, i))
            for i, node in enumerate(world.nodes)
        ]
        updates = _node_map(cfg, local_unsup_round, args)
        live = [u for u in updates if u is not None]
        if live:
            encoders = modality_wise_fedavg(live, current.encoders)
            current = ModelBundle(encoders, current.classifier, current.version + 1)
        payload = len(serialize_bundle(current))
        compute = {
            node.state.node_id: cfg.network.compute_s_per_sample
            * len(node.state.unlabeled_store) * cfg.unsup.local_epochs
            for node, u in zip(world.nodes, updates) if u is not None
        }
        for node, u in zip(world.nodes, updates):
            report.add(stage="unsupervised_fl", round=r, node_id=node.state.node_id,
                       loss=None if u is None else u.mean_loss, t_s=clock)
        if compute:
            rr = simulate_round(compute, world.trace, payload, clock,
                                cfg.network.band_objects(), cfg.network.aggregation_s)
            clock += rr.round_s
            times.append(rr.round_s)
            report.add(stage="unsupervised_fl", round=r, round_time_s=rr.round_s, t_s=clock)
        else:
            clock += cfg.network.aggregation_s
    for node in world.nodes:
        node.state.available_modalities = tuple(node.profile.available_modalities)
    return current, clock, times


def run_stage3(world: World, bundle: ModelBundle, report: MetricsReport, clock: float,
               balanced=None):
    cfg = world.cfg
    wcfg = WeakStageConfig(
        sgd=SGDConfig(cfg.weak.learning_rate, cfg.weak.batch_size),
        kd=KDConfig(cfg.weak.kd_temperature, cfg.weak.kd_weight),
        permutation_budget=cfg.weak.permutation_budget,
        balanced=cfg.weak.balanced if balanced is None else balanced,
    )
    current = bundle
    times = []
    for r in range(cfg.weak.rounds):
        _round_availability(world, clock)
        args = [
            (node.state, current, cfg.weak.local_epochs, wcfg, cfg.data.n_classes,
             seeds.rng_for(cfg.seed, seeds.WEAK_ROUND, r, i))
            for i, node in enumerate(world.nodes)
        ]
        updates = _node_map(cfg, local_weak_round, args)
        live = [u for u in updates if u is not None]
        if live:
            current = aggregate_weak_updates(live, current)
        payload = len(serialize_bundle(current))
        compute = {
            u.node_id: cfg.network.compute_s_per_sample * u.n_weak_samples * cfg.weak.local_epochs
            for u in live
        }
        for node, u in zip(world.nodes, updates):
            report.add(stage="weak_fl", round=r, node_id=node.state.node_id,
                       loss=None if u is None else u.mean_loss, t_s=clock)
        if compute:
            rr = simulate_round(compute, world.trace, payload, clock,
                                cfg.network.band_objects(), cfg.network.aggregation_s)
            clock += rr.round_s
            times.append(rr.round_s)
            report.add(stage="weak_fl", round=r, round_time_s=rr.round_s, t_s=clock)
        else:
            clock += cfg.network.aggregation_s
    for node in world.nodes:
        node.state.available_modalities = tuple(node.profile.available_modalities)
    return current, clock, times


def run_three_stage(cfg: ExperimentConfig):
    """Full pipeline: pretrain, unsupervised FL, weak FL, with per-stage
    evaluation on every node's held-out stream. Returns
    (MetricsReport, ExperimentResult)."""
    world = build_world(cfg)
    report = MetricsReport()
    result = ExperimentResult()
    clock = cfg.network.start_time_s

    pretrained = run_stage1(world)
    _eval_all(world, pretrained, "pretrain", report, result, clock)

    bundle2, clock, t2 = run_stage2(world, pretrained, report, clock)
    if cfg.unsup.rounds:
        _eval_all(world, bundle2, "unsupervised_fl", report, result, clock)
    result.round_times["unsupervised_fl"] = t2

    bundle3, clock, t3 = run_stage3(world, bundle2, report, clock)
    if cfg.weak.rounds:
        _eval_all(world, bundle3, "weak_fl", report, result, clock)
    result.round_times["weak_fl"] = t3

    result.payload_bytes = len(serialize_bundle(bundle3))
    result.final_model = bundle3
    report.summary = {
        "seed": cfg.seed,
        "stage_accuracy": dict(result.stage_means),
        "rounds": {"unsupervised_fl": cfg.unsup.rounds, "weak_fl": cfg.weak.rounds},
        "payload_bytes": result.payload_bytes,
        "sim_time_s": clock,
    }
    return report, result


def run_supervised_baseline(cfg: ExperimentConfig, world: World = None):
    """Per-node from-scratch training on the node's own labeled samples
    only (no FL, no pretraining). Returns {node_id: accuracy}."""
    world = world or build_world(cfg)
    sgd = SGDConfig(cfg.pretrain.learning_rate, cfg.pretrain.batch_size)
    out = {}
    for i, node in enumerate(world.nodes):
        rng = seeds.rng_for(cfg.seed, seeds.BASELINE, i)
        bundle = build_model_bundle(
            cfg.data.n_classes, cfg.data.modality_dims, cfg.model.embed_dim,
            cfg.model.hidden_dim, rng,
        )
        server = ServerState(bundle)
        if node.state.labeled_store:
            trained = pretrain(server, node.state.labeled_store,
                               cfg.pretrain.baseline_epochs, sgd, rng)
        else:
            trained = bundle
        rep = evaluate(trained, node.state.test_store, cfg.data.n_classes, node.train_class_counts)
        out[node.state.node_id] = rep.overall
    return out


def staircase(cfg: ExperimentConfig):
    """The three desk-scale reference numbers: pretrained-only,
    supervised-only, and full three-stage mean accuracy over nodes."""
    world = build_world(cfg)
    report = MetricsReport()
    result = ExperimentResult()
    clock = cfg.network.start_time_s
    pretrained = run_stage1(world)
    _eval_all(world, pretrained, "pretrain", report, result, clock)
    bundle2, clock, _ = run_stage2(world, pretrained, report, clock)
    bundle3, clock, _ = run_stage3(world, bundle2, report, clock)
    _eval_all(world, bundle3, "weak_fl", report, result, clock)
    supervised = run_supervised_baseline(cfg, world)
    return {
        "pretrained_only": result.stage_means["pretrain"],
        "supervised_only": float(np.mean(list(supervised.values()))),
        "three_stage": result.stage_means["weak_fl"],
    }


def compare_weak_balancing(cfg: ExperimentConfig):
    """Shared stage-1/2 prefix, then weak FL twice: balanced CE + KD versus
    plain FedAvg (plain CE, no distillation). Reports overall and
    tail-class accuracy for both."""
    world = build_world(cfg)
    report = MetricsReport()
    clock = cfg.network.start_time_s
    pretrained = run_stage1(world)
    bundle2, clock, _ = run_stage2(world, pretrained, report, clock)

    out = {}
    for label, balanced in (("balanced", True), ("plain", False)):
        result = ExperimentResult()
        bundle3, _, _ = run_stage3(world, bundle2, MetricsReport(), clock, balanced=balanced)
        _eval_all(world, bundle3, "weak_fl", MetricsReport(), result, clock)
        evals = result.stage_evals["weak_fl"]
        tails = [e.tail_acc for e in evals.values() if e.tail_acc is not None]
        out[label] = {
            "overall": result.stage_means["weak_fl"],
            "tail": float(np.mean(tails)) if tails else math.nan,
        }
    return out
