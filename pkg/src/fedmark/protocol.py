"""Node and server state machines for three-stage federated learning.

Stage 1 trains a full model centrally on labeled data. Stage 2 runs
contrastive fusion learning on each node's unlabeled data and aggregates
encoders modality-wise, so nodes with different sensor subsets still
collaborate. Stage 3 trains the full model on weakly labeled batches with
balanced cross-entropy plus distillation against the aggregated global
model, then aggregates encoders modality-wise and the classifier by
weak-sample count.

All round functions are pure in (state, incoming model, rng): distinct
nodes can run on parallel workers and the ordered, node-id-keyed reduction
keeps results independent of worker count.
"""

from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from . import nn
from .errors import DataError, ShapeError
from .losses import (
    MODALITIES,
    ClassCounts,
    ContrastiveConfig,
    KDConfig,
    balanced_ce,
    combined_weak_stage_loss,
    contrastive_fusion_loss,
    cross_entropy,
    freeze_recipes,
    fuse_features,
    fuse_features_backward,
    kd_loss,
)
from .weak_labels import permutation_ce_loss

STAGES = ("pretrain", "unsupervised_fl", "weak_fl")


@dataclass
class ModelBundle:
    encoders: dict  # modality -> DenseNet, all sharing output dim
    classifier: nn.DenseNet
    version: int = 0

    def __post_init__(self):
        dims = {m: enc.output_dim for m, enc in self.encoders.items()}
        if len(set(dims.values())) > 1:
            raise ShapeError(f"encoders disagree on embedding dim: {dims}")

    @property
    def embed_dim(self) -> int:
        return next(iter(self.encoders.values())).output_dim

    def copy(self) -> "ModelBundle":
        return ModelBundle(
            {m: enc.copy() for m, enc in self.encoders.items()},
            self.classifier.copy(),
            self.version,
        )


def build_model_bundle(n_classes, modality_dims, embed_dim, hidden_dim, rng) -> ModelBundle:
    """Fresh seeded bundle: a 2-layer encoder per modality plus a 2-layer
    classifier over the zero-filled concatenation of all embeddings."""
    encoders = {}
    for m in MODALITIES:
        if m in modality_dims:
            encoders[m] = nn.init_net([modality_dims[m], hidden_dim, embed_dim], rng)
    classifier = nn.init_net([len(encoders) * embed_dim, hidden_dim, n_classes], rng)
    return ModelBundle(encoders, classifier, 0)


@dataclass
class NodeState:
    node_id: str
    available_modalities: tuple
    unlabeled_store: list = field(default_factory=list)
    weak_store: list = field(default_factory=list)  # list of WeakBatch
    labeled_store: list = field(default_factory=list)
    test_store: list = field(default_factory=list)
    local_model: Optional[ModelBundle] = None
    clock: float = 0.0


@dataclass
class ServerState:
    global_model: ModelBundle
    round: int = 0
    participation: list = field(default_factory=list)


@dataclass
class EncoderUpdate:
    node_id: str
    encoders: dict
    counts: dict  # modality -> sample count backing the update
    mean_loss: float = float("nan")


@dataclass
class BundleUpdate:
    node_id: str
    bundle: ModelBundle
    counts: dict
    n_weak_samples: int = 0
    mean_loss: float = float("nan")


# ---------------------------------------------------------------------------
# feature plumbing

def batch_features(samples, modality) -> np.ndarray:
    return np.stack([s.modality_data[modality] for s in samples])


def embed(encoder, x):
    """Normalized embedding plus the traces needed for backprop."""
    raw, trace = nn.forward_trace(encoder, x)
    return nn.l2_normalize(raw), raw, trace


def classification_input(embeddings, batch, embed_dim, model_modalities):
    """Concatenate embeddings over the canonical modality order, zero-filled
    for modalities the node is missing."""
    order = [m for m in MODALITIES if m in model_modalities]
    x = np.zeros((batch, len(order) * embed_dim))
    for k, m in enumerate(order):
        if m in embeddings:
            x[:, k * embed_dim:(k + 1) * embed_dim] = embeddings[m]
    return x, order


def _classifier_logits(bundle, samples, modalities, with_trace=False):
    """Forward pass to logits; optionally keep traces for backprop."""
    embeddings, raws, traces = {}, {}, {}
    for m in modalities:
        x = batch_features(samples, m)
        emb, raw, trace = embed(bundle.encoders[m], x)
        embeddings[m], raws[m], traces[m] = emb, raw, trace
    cls_in, order = classification_input(
        embeddings, len(samples), bundle.embed_dim, bundle.encoders
    )
    if with_trace:
        logits, cls_trace = nn.forward_trace(bundle.classifier, cls_in)
        return logits, (embeddings, raws, traces, cls_trace, order)
    return nn.forward(bundle.classifier, cls_in), None


def _apply_full_step(bundle, trace_pack, grad_logits, modalities, sgd_cfg):
    """Backprop grad_logits into classifier and the listed encoders, then
    take one SGD step on each. Mutates `bundle` in place."""
    _, raws, traces, cls_trace, order = trace_pack
    cls_grads, g_in = nn.backward_from_trace(bundle.classifier, cls_trace, grad_logits)
    bundle.classifier = nn.sgd_step(bundle.classifier, cls_grads, sgd_cfg)
    d = bundle.embed_dim
    for k, m in enumerate(order):
        if m not in modalities:
            continue
        g_emb = g_in[:, k * d:(k + 1) * d]
        g_raw = nn.l2_normalize_backward(raws[m], g_emb)
        enc_grads, _ = nn.backward_from_trace(bundle.encoders[m], traces[m], g_raw)
        bundle.encoders[m] = nn.sgd_step(bundle.encoders[m], enc_grads, sgd_cfg)


def _minibatches(n, batch_size, rng):
    idx = rng.permutation(n)
    for lo in range(0, n, batch_size):
        yield idx[lo:lo + batch_size]


# ---------------------------------------------------------------------------
# stage 1: centralized pre-training

def pretrain(server: ServerState, labeled_pool, epochs, sgd_cfg, rng) -> ModelBundle:
    """Supervised training of the full bundle on the server's labeled pool."""
    if not labeled_pool:
        raise DataError("pretraining needs a nonempty labeled pool")
    modalities = tuple(m for m in MODALITIES if m in server.global_model.encoders)
    for s in labeled_pool:
        if s.fine_label is None:
            raise DataError("pretraining pool must be fully labeled")
        if any(m not in s.modality_data for m in modalities):
            raise DataError("pretraining pool must cover all modalities")
    bundle = server.global_model.copy()
    labels = np.array([s.fine_label - 1 for s in labeled_pool])
    for _ in range(epochs):
        for batch_idx in _minibatches(len(labeled_pool), sgd_cfg.batch_size, rng):
            samples = [labeled_pool[i] for i in batch_idx]
            logits, pack = _classifier_logits(bundle, samples, modalities, with_trace=True)
            _, grad = cross_entropy(logits, labels[batch_idx])
            _apply_full_step(bundle, pack, grad, modalities, sgd_cfg)
    bundle.version = 0
    return bundle


# ---------------------------------------------------------------------------
# stage 2: unsupervised contrastive-fusion FL

def local_unsup_round(node: NodeState, global_model: ModelBundle, epochs,
                      ccfg: ContrastiveConfig, sgd_cfg, rng):
    """Contrastive fusion learning on the node's unlabeled store.

    Updates only the encoders for modalities the node currently has; the
    classifier is untouched. Returns None (round skipped) when the node
    lacks 2 * batch_size unlabeled samples.
    """
    store = node.unlabeled_store
    if len(store) < 2 * sgd_cfg.batch_size:
        return None
    modalities = tuple(
        m for m in MODALITIES
        if m in node.available_modalities and m in store[0].modality_data
    )
    ccfg = freeze_recipes(ccfg, modalities, rng)  # one recipe draw per round
    encoders = {m: global_model.encoders[m].copy() for m in modalities}
    losses, steps = 0.0, 0
    for _ in range(epochs):
        for batch_idx in _minibatches(len(store), sgd_cfg.batch_size, rng):
            if len(batch_idx) < 2:
                continue  # a lone sample has no negatives
            samples = [store[i] for i in batch_idx]
            embeddings, raws, traces = {}, {}, {}
            for m in modalities:
                emb, raw, trace = embed(encoders[m], batch_features(samples, m))
                embeddings[m], raws[m], traces[m] = emb, raw, trace
            fs = fuse_features(embeddings, ccfg, rng)
            loss, g_feat = contrastive_fusion_loss(fs, ccfg.temperature)
            g_emb = fuse_features_backward(fs, g_feat)
            for m in modalities:
                g_raw = nn.l2_normalize_backward(raws[m], g_emb[m])
                grads, _ = nn.backward_from_trace(encoders[m], traces[m], g_raw)
                encoders[m] = nn.sgd_step(encoders[m], grads, sgd_cfg)
            losses += loss
            steps += 1
    counts = {m: len(store) for m in modalities}
    mean_loss = losses / steps if steps else float("nan")
    return EncoderUpdate(node.node_id, encoders, counts, mean_loss)


def unsup_loss_on_store(node, bundle, ccfg, sgd_cfg, rng):
    """Mean contrastive loss over the store without training (diagnostics)."""
    store = node.unlabeled_store
    modalities = tuple(
        m for m in MODALITIES
        if m in node.available_modalities and m in store[0].modality_data
    )
    ccfg = freeze_recipes(ccfg, modalities, rng)
    total, steps = 0.0, 0
    for batch_idx in _minibatches(len(store), sgd_cfg.batch_size, rng):
        if len(batch_idx) < 2:
            continue
        samples = [store[i] for i in batch_idx]
        embeddings = {}
        for m in modalities:
            emb, _, _ = embed(bundle.encoders[m], batch_features(samples, m))
            embeddings[m] = emb
        fs = fuse_features(embeddings, ccfg, rng)
        loss, _ = contrastive_fusion_loss(fs, ccfg.temperature)
        total += loss
        steps += 1
    return total / steps if steps else float("nan")


def modality_wise_fedavg(updates, previous):
    """Sample-count-weighted FedAvg per modality encoder.

    Nodes missing a modality simply do not contribute to it; a modality no
    node submitted keeps the previous global weights. Updates are reduced
    in node-id order so the result is independent of arrival order.
    """
    if not updates:
        raise DataError("no updates to aggregate")
    ordered = sorted(updates, key=lambda u: u.node_id)
    merged = {}
    for m in previous:
        contrib = [
            (u.encoders[m], u.counts.get(m, 0))
            for u in ordered
            if m in u.encoders and u.counts.get(m, 0) > 0
        ]
        merged[m] = fedavg_nets(contrib) if contrib else previous[m].copy()
    return merged


def fedavg_nets(weighted):
    """Weighted average of structurally identical nets: sum_k (n_k/N) w_k."""
    if not weighted:
        raise DataError("no nets to average")
    total = float(sum(n for _, n in weighted))
    ref = weighted[0][0]
    layers = []
    for li, ref_layer in enumerate(ref.layers):
        w = np.zeros_like(ref_layer.weight)
        b = np.zeros_like(ref_layer.bias)
        for net, n in weighted:
            layer = net.layers[li]
            if layer.weight.shape != ref_layer.weight.shape:
                raise ShapeError("cannot average nets with different layer shapes")
            frac = n / total
            w += frac * layer.weight
            b += frac * layer.bias
        layers.append(nn.DenseLayer(w, b, ref_layer.activation))
    return nn.DenseNet(layers)


# ---------------------------------------------------------------------------
# stage 3: weakly supervised FL

@dataclass
class WeakStageConfig:
    sgd: nn.SGDConfig = field(default_factory=lambda: nn.SGDConfig(0.001, 16))
    kd: KDConfig = field(default_factory=KDConfig)
    permutation_budget: int = 32
    balanced: bool = True  # False: plain CE, no distillation (FedAvg baseline)


def weak_class_counts(weak_store, n_classes) -> ClassCounts:
    counts = np.zeros(n_classes, dtype=np.int64)
    for batch in weak_store:
        for c in batch.label_multiset:
            counts[c - 1] += 1
    return ClassCounts(counts)


def local_weak_round(node: NodeState, global_model: ModelBundle, epochs,
                     cfg: WeakStageConfig, n_classes, rng):
    """Weak-label training of encoders + classifier.

    The incoming global model is the frozen distillation teacher. Each
    batch resolves its licensed label multiset to the assignment with
    minimum cross-entropy, then steps on balanced CE + KD (or plain CE
    when `cfg.balanced` is off). Returns None if the node has no weak data.
    """
    if not node.weak_store:
        return None
    bundle = global_model.copy()
    teacher = global_model
    counts = weak_class_counts(node.weak_store, n_classes)
    losses, steps, n_samples = 0.0, 0, 0
    for _ in range(epochs):
        for batch in node.weak_store:
            modalities = tuple(
                m for m in MODALITIES
                if m in node.available_modalities and m in batch.samples[0].modality_data
            )
            if not modalities:
                continue
            logits, pack = _classifier_logits(bundle, batch.samples, modalities, with_trace=True)
            licensed = [c - 1 for c in batch.label_multiset]
            _, _, assignment = permutation_ce_loss(
                logits, licensed, cfg.permutation_budget, rng
            )
            y = np.array(assignment)
            if cfg.balanced:
                l_bce, g_bce = balanced_ce(logits, y, counts)
                t_logits, _ = _classifier_logits(teacher, batch.samples, modalities)
                l_kd, g_kd = kd_loss(logits, t_logits, cfg.kd)
                lam = cfg.kd.kd_weight
                loss = combined_weak_stage_loss(l_bce, l_kd, lam)
                grad = (1.0 - lam) * g_bce + lam * g_kd
            else:
                loss, grad = cross_entropy(logits, y)
            _apply_full_step(bundle, pack, grad, modalities, cfg.sgd)
            losses += loss
            steps += 1
            n_samples += len(batch.samples)
    bundle.version = global_model.version
    mean_loss = losses / steps if steps else float("nan")
    enc_counts = {m: n_samples for m in bundle.encoders if m in node.available_modalities}
    return BundleUpdate(node.node_id, bundle, enc_counts, n_samples, mean_loss)


def aggregate_weak_updates(updates, previous: ModelBundle) -> ModelBundle:
    """Modality-wise FedAvg of encoders plus count-weighted FedAvg of the
    classifier."""
    if not updates:
        raise DataError("no updates to aggregate")
    ordered = sorted(updates, key=lambda u: u.node_id)
    enc_updates = [EncoderUpdate(u.node_id, u.bundle.encoders, u.counts) for u in ordered]
    encoders = modality_wise_fedavg(enc_updates, previous.encoders)
    cls_contrib = [(u.bundle.classifier, u.n_weak_samples) for u in ordered if u.n_weak_samples > 0]
    classifier = fedavg_nets(cls_contrib) if cls_contrib else previous.classifier.copy()
    return ModelBundle(encoders, classifier, previous.version + 1)


# ---------------------------------------------------------------------------
# evaluation and serialization

@dataclass
class EvalReport:
    overall: float
    per_class: np.ndarray  # accuracy per class, NaN where unsupported
    support: np.ndarray
    head_classes: list
    tail_classes: list
    head_acc: Optional[float]
    tail_acc: Optional[float]
    n_samples: int


def head_tail_classes(train_counts, k=4):
    """Most/least frequent k classes in a node's training distribution
    (1-based indices; ties resolved toward lower class index)."""
    counts = np.asarray(train_counts)
    order = np.argsort(-counts, kind="stable")
    head = sorted(int(c) + 1 for c in order[:k])
    order_asc = np.argsort(counts, kind="stable")
    tail = sorted(int(c) + 1 for c in order_asc[:k])
    return head, tail


def evaluate(bundle: ModelBundle, test_samples, n_classes, train_counts) -> EvalReport:
    """Accuracy of the bundle on labeled test samples, plus per-class and
    head/tail breakdowns (head/tail defined by the training distribution)."""
    labeled = [s for s in test_samples if s.fine_label is not None]
    if not labeled:
        raise DataError("test set has no labeled samples")
    modalities = tuple(m for m in bundle.encoders if m in labeled[0].modality_data)
    logits, _ = _classifier_logits(bundle, labeled, modalities)
    pred = logits.argmax(axis=1)
    y = np.array([s.fine_label - 1 for s in labeled])
    correct = pred == y
    support = np.bincount(y, minlength=n_classes).astype(np.int64)
    per_class = np.full(n_classes, np.nan)
    for c in range(n_classes):
        if support[c]:
            per_class[c] = correct[y == c].mean()
    head, tail = head_tail_classes(train_counts)
    head_mask = np.isin(y + 1, head)
    tail_mask = np.isin(y + 1, tail)
    return EvalReport(
        overall=float(correct.mean()),
        per_class=per_class,
        support=support,
        head_classes=head,
        tail_classes=tail,
        head_acc=float(correct[head_mask].mean()) if head_mask.any() else None,
        tail_acc=float(correct[tail_mask].mean()) if tail_mask.any() else None,
        n_samples=len(labeled),
    )


def serialize_bundle(bundle: ModelBundle) -> bytes:
    """Flat little-endian float64 stream in fixed manifest order: encoders
    in canonical modality order (weight then bias per layer), classifier
    last. The byte length is the FL payload size."""
    chunks = []
    for m in MODALITIES:
        if m in bundle.encoders:
            for layer in bundle.encoders[m].layers:
                chunks.append(np.ascontiguousarray(layer.weight, "<f8").tobytes())
                chunks.append(np.ascontiguousarray(layer.bias, "<f8").tobytes())
    for layer in bundle.classifier.layers:
        chunks.append(np.ascontiguousarray(layer.weight, "<f8").tobytes())
        chunks.append(np.ascontiguousarray(layer.bias, "<f8").tobytes())
    return b"".join(chunks)


def deserialize_bundle(data: bytes, like: ModelBundle) -> ModelBundle:
    """Rebuild a bundle from `serialize_bundle` output, using `like` for the
    manifest (shapes, activations, version)."""
    out = like.copy()
    offset = 0

    def take(shape):
        nonlocal offset
        n = int(np.prod(shape))
        arr = np.frombuffer(data, "<f8", count=n, offset=offset).reshape(shape).copy()
        offset += n * 8
        return arr

    for m in MODALITIES:
        if m in out.encoders:
            for layer in out.encoders[m].layers:
                layer.weight = take(layer.weight.shape)
                layer.bias = take(layer.bias.shape)
    for layer in out.classifier.layers:
        layer.weight = take(layer.weight.shape)
        layer.bias = take(layer.bias.shape)
    if offset != len(data):
        raise ShapeError(f"payload has {len(data)} bytes, manifest consumed {offset}")
    return out
