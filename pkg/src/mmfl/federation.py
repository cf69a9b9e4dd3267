"""Federated training: broadcast, local training, aggregation, and the late-fusion baseline.

One round is broadcast -> local training on every client -> aggregation.
Local training may fan out over threads; aggregation is the barrier and
always sums updates in client-id order, so results do not depend on
scheduling. Every parameter exchange goes through the wire codec.
"""

from __future__ import annotations

import dataclasses
import logging
import math
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from .autograd import Tensor, gradients
from .data import Partition, default_modality_of
from .errors import EmptyDataset, InvalidConfig, MissingModality, ShapeMismatch, UnknownModality
from .layers import Adam, ParameterSet
from .losses import LossConfig, MetricsReport, f1_scores, local_objective
from .models import Backbone, Classifier, FusedModel, FusionLayout, ModalityId, ModelConfig, Trunk, full_fusion_inference
from .wire import LoopbackTransport, deserialize_params, serialize_params

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class FederationConfig:
    n_clients: int = 6
    modality_of: tuple[int, ...] | None = None
    rounds: int = 20
    local_epochs: int = 2
    batch_size: int = 64
    seed: int = 0
    mf: bool = True
    fw: bool = True
    mim: bool = True
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    loss: LossConfig = LossConfig()
    model: ModelConfig = ModelConfig()
    transport: str = "memory"

    def validate(self, P: int) -> None:
        if not self.mf:
            raise InvalidConfig("mf=False has no proposed-framework meaning; use the msfedavg baseline instead")
        if self.n_clients < P:
            raise InvalidConfig(f"need at least one client per modality (K={self.n_clients}, P={P})")
        if self.rounds < 0 or self.local_epochs < 0 or self.batch_size < 2:
            raise InvalidConfig("rounds and local_epochs must be >= 0 and batch_size >= 2")
        if self.transport not in ("memory", "socket"):
            raise InvalidConfig(f"unknown transport {self.transport!r}")
        mods = self.client_modalities(P)
        if len(mods) != self.n_clients or set(mods) != set(range(P)):
            raise InvalidConfig(f"modality_of {mods} must assign all {P} modalities over {self.n_clients} clients")

    def client_modalities(self, P: int) -> tuple[int, ...]:
        if self.modality_of is not None:
            return tuple(self.modality_of)
        return default_modality_of(self.n_clients, P)

    def model_config(self) -> ModelConfig:
        return dataclasses.replace(self.model, norm="bw" if self.fw else "bn")


# ---------------------------------------------------------------------------
# state
# ---------------------------------------------------------------------------


def _seed(*key: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence(list(key)))


@dataclass
class GlobalState:
    layout: FusionLayout
    model_cfg: ModelConfig
    image_size: int
    n_labels: int
    backbones: list[ParameterSet]
    classifier: ParameterSet
    round: int = 0

    def build_backbone(self, m: int) -> Backbone:
        b = Backbone(self.layout.order[m], self.image_size, self.model_cfg, seed=0)
        b.load_state_dict(self.backbones[m])
        return b

    def build_classifier(self) -> Classifier:
        c = Classifier(self.layout.fused_dim, self.n_labels, seed=0)
        c.load_state_dict(self.classifier)
        return c

    def build_trunk(self, m: int) -> Trunk:
        t = Trunk(self.model_cfg, np.random.default_rng(0))
        t.load_state_dict({k[len("trunk."):]: v for k, v in self.backbones[m].items() if k.startswith("trunk.")})
        t.requires_grad_(False)
        return t

    def materialize(self) -> FusedModel:
        return FusedModel(self.layout, [self.build_backbone(m) for m in range(self.layout.P)], self.build_classifier())


def init_global(
    cfg: FederationConfig,
    modalities: Sequence[ModalityId],
    image_size: int,
    n_labels: int,
    norm: str | None = None,
    classifier_key: int = 0,
    backbone_keys: Sequence[int] | None = None,
) -> GlobalState:
    """Seeded initialization of every modality backbone and the classifier."""
    if not modalities:
        raise InvalidConfig("need at least one modality")
    model_cfg = cfg.model_config() if norm is None else dataclasses.replace(cfg.model, norm=norm)
    layout = FusionLayout(tuple(modalities), model_cfg.feature_dim)
    keys = list(backbone_keys) if backbone_keys is not None else [m.index for m in modalities]
    backbones = [
        Backbone(m, image_size, model_cfg, seed=_seed(cfg.seed, 1, k)).state_dict()
        for m, k in zip(modalities, keys)
    ]
    classifier = Classifier(layout.fused_dim, n_labels, seed=_seed(cfg.seed, 2, classifier_key)).state_dict()
    return GlobalState(layout, model_cfg, image_size, n_labels, backbones, classifier, 0)


@dataclass
class ClientState:
    client_id: int
    modality: ModalityId
    images: np.ndarray
    labels: np.ndarray
    seed: int
    encoder: Backbone | None = None
    classifier: Classifier | None = None
    optimizer: Adam | None = None
    frozen_trunks: dict[int, Trunk] = field(default_factory=dict)

    def __len__(self) -> int:
        return len(self.images)

    def trainable(self) -> dict[str, Tensor]:
        params = {f"encoder.{k}": v for k, v in self.encoder.parameters().items()}
        params.update({f"classifier.{k}": v for k, v in self.classifier.parameters().items()})
        return params


@dataclass
class ClientUpdate:
    client_id: int
    modality: int
    encoder: ParameterSet
    classifier: ParameterSet
    n_samples: int
    loss: dict[str, float]
    epoch_losses: list[float]
    wall_ms: float = 0.0


@dataclass
class RoundRecord:
    round: int
    clients: list[dict]
    metrics: MetricsReport
    wall_ms: float


def _ship(params: ParameterSet, cfg: FederationConfig) -> ParameterSet:
    blob = serialize_params(params)
    if cfg.transport == "socket":
        link = LoopbackTransport()
        try:
            blob = link.roundtrip(blob)
        finally:
            link.close()
    return deserialize_params(blob)


# ---------------------------------------------------------------------------
# protocol steps
# ---------------------------------------------------------------------------


def broadcast(global_state: GlobalState, client: ClientState, cfg: FederationConfig = FederationConfig()) -> ClientState:
    """Load the client's modality backbone and the classifier; reset Adam.

    With MIM enabled the client also receives frozen copies of every other
    modality's trunk.
    """
    m = client.modality.index
    if not 0 <= m < global_state.layout.P:
        raise UnknownModality(f"client {client.client_id} has modality {m}, server knows {global_state.layout.P}")
    if client.encoder is None:
        client.encoder = Backbone(global_state.layout.order[m], global_state.image_size, global_state.model_cfg, seed=0)
    if client.classifier is None:
        client.classifier = Classifier(global_state.layout.fused_dim, global_state.n_labels, seed=0)
    client.encoder.load_state_dict(_ship(global_state.backbones[m], cfg))
    client.classifier.load_state_dict(_ship(global_state.classifier, cfg))
    client.optimizer = Adam(client.trainable(), lr=cfg.lr, beta1=cfg.beta1, beta2=cfg.beta2, eps=cfg.adam_eps)
    client.frozen_trunks = {}
    if cfg.mim:
        for k in range(global_state.layout.P):
            if k != m:
                trunk = Trunk(global_state.model_cfg, np.random.default_rng(0))
                shipped = _ship(global_state.backbones[k], cfg)
                trunk.load_state_dict({n[len("trunk."):]: v for n, v in shipped.items() if n.startswith("trunk.")})
                client.frozen_trunks[k] = trunk.requires_grad_(False)
    return client


def client_batches(n: int, batch_size: int, rng: np.random.Generator) -> list[np.ndarray]:
    """Shuffled, near-equal batches; none smaller than half of ``batch_size``."""
    order = rng.permutation(n)
    return np.array_split(order, max(1, math.ceil(n / batch_size)))


def local_train(client: ClientState, cfg: FederationConfig, layout: FusionLayout, round_index: int = 0) -> ClientUpdate:
    """Run E epochs of Adam on the local objective; return full parameters."""
    if len(client) == 0:
        raise EmptyDataset(f"client {client.client_id} has no data")
    t0 = time.perf_counter()
    rng = np.random.default_rng([client.seed, round_index])
    params = client.trainable()
    sums = {"total": 0.0, "ntx": 0.0, "bce": 0.0}
    steps = 0
    epoch_losses = []
    for _ in range(cfg.local_epochs):
        epoch_total, epoch_steps = 0.0, 0
        for idx in client_batches(len(client), cfg.batch_size, rng):
            loss, parts = local_objective(
                client.encoder, client.classifier, client.images[idx], client.labels[idx],
                client.modality, layout, client.frozen_trunks, cfg.loss,
            )
            client.optimizer.step(gradients(loss, params))
            for k in sums:
                sums[k] += parts[k]
            steps += 1
            epoch_total += parts["total"]
            epoch_steps += 1
        epoch_losses.append(epoch_total / epoch_steps)
    loss = {k: (v / steps if steps else 0.0) for k, v in sums.items()}
    return ClientUpdate(
        client_id=client.client_id,
        modality=client.modality.index,
        encoder=client.encoder.state_dict(),
        classifier=client.classifier.state_dict(),
        n_samples=len(client),
        loss=loss,
        epoch_losses=epoch_losses,
        wall_ms=1000 * (time.perf_counter() - t0),
    )


def weighted_mean(states: Sequence[ParameterSet], weights: Sequence[float]) -> ParameterSet:
    """Weighted mean accumulated in float64 in the given order.

    Identical inputs come back bit-for-bit: the float64 error is far below
    half a float32 ulp.
    """
    names = list(states[0])
    for s in states[1:]:
        if list(s) != names:
            raise ShapeMismatch("parameter sets have different names")
    total = float(sum(weights))
    out = {}
    for name in names:
        shape = states[0][name].shape
        acc = np.zeros(shape, dtype=np.float64)
        for s, w in zip(states, weights):
            if s[name].shape != shape:
                raise ShapeMismatch(f"{name}: {s[name].shape} vs {shape}")
            acc += (w / total) * s[name].astype(np.float64)
        if name.endswith("running_cov"):
            acc = 0.5 * (acc + acc.T)
        out[name] = acc.astype(states[0][name].dtype)
    return out


def aggregate(global_state: GlobalState, updates: Sequence[ClientUpdate]) -> GlobalState:
    """Sample-weighted FedAvg: per modality for backbones, over all clients for the classifier."""
    ups = sorted(updates, key=lambda u: u.client_id)
    P = global_state.layout.P
    backbones = []
    for m in range(P):
        mine = [u for u in ups if u.modality == m]
        if not mine:
            raise MissingModality(f"no update for modality {m}")
        backbones.append(weighted_mean([u.encoder for u in mine], [u.n_samples for u in mine]))
    classifier = weighted_mean([u.classifier for u in ups], [u.n_samples for u in ups])
    return dataclasses.replace(global_state, backbones=backbones, classifier=classifier, round=global_state.round + 1)


# ---------------------------------------------------------------------------
# orchestration
# ---------------------------------------------------------------------------


def make_clients(part: Partition, cfg: FederationConfig, modalities: Sequence[ModalityId]) -> list[ClientState]:
    clients = []
    for c in part.clients:
        seed = int(np.random.SeedSequence([cfg.seed, 3, c.client_id]).generate_state(1)[0])
        clients.append(ClientState(c.client_id, modalities[c.modality], c.images, c.labels, seed))
    return clients


def modalities_of(part: Partition) -> list[ModalityId]:
    spec = part.test.spec
    return [ModalityId(i, m.name, m.channels) for i, m in enumerate(spec.modalities)]


def _round(global_state, clients, cfg, threads):
    def work(client):
        broadcast(global_state, client, cfg)
        update = local_train(client, cfg, global_state.layout, global_state.round)
        # upload through the codec as well
        update.encoder = _ship(update.encoder, cfg)
        update.classifier = _ship(update.classifier, cfg)
        return update

    if threads > 1 and len(clients) > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            updates = list(pool.map(work, clients))
    else:
        updates = [work(c) for c in clients]
    return aggregate(global_state, updates), updates


def run_rounds(
    global_state: GlobalState,
    clients: Sequence[ClientState],
    cfg: FederationConfig,
    evaluate: Callable[[GlobalState], MetricsReport] | None = None,
    threads: int = 1,
    rounds: int | None = None,
) -> tuple[GlobalState, list[RoundRecord]]:
    records = []
    for _ in range(cfg.rounds if rounds is None else rounds):
        t0 = time.perf_counter()
        global_state, updates = _round(global_state, clients, cfg, threads)
        metrics = evaluate(global_state) if evaluate else None
        records.append(RoundRecord(
            round=global_state.round,
            clients=[_client_row(u) for u in sorted(updates, key=lambda u: u.client_id)],
            metrics=metrics,
            wall_ms=1000 * (time.perf_counter() - t0),
        ))
        logger.debug("round %d done: %s", global_state.round, metrics and metrics.macro_f1)
    return global_state, records


def _client_row(u: ClientUpdate) -> dict:
    return {"client_id": u.client_id, "loss_total": u.loss["total"], "loss_ntx": u.loss["ntx"],
            "loss_bce": u.loss["bce"], "wall_ms": u.wall_ms}


def evaluate_fused(global_state: GlobalState, test, threshold: float) -> MetricsReport:
    probs = full_fusion_inference(global_state, test.images)
    return f1_scores(probs, test.labels, threshold)


@dataclass
class ExperimentResult:
    records: list[RoundRecord]
    report: MetricsReport
    models: list[GlobalState]


def _final_losses(records: list[RoundRecord]) -> dict[str, float]:
    if not records:
        return {}
    rows = records[-1].clients
    return {k: float(np.mean([r[f"loss_{k}"] for r in rows])) for k in ("total", "ntx", "bce")}


def run_experiment(cfg: FederationConfig, part: Partition, threads: int = 1) -> ExperimentResult:
    """The proposed framework: R rounds, full-fusion evaluation after each."""
    modalities = modalities_of(part)
    cfg.validate(len(modalities))
    _check_partition(part, cfg, len(modalities))
    spec = part.test.spec
    state = init_global(cfg, modalities, spec.image_size, spec.n_labels)
    clients = make_clients(part, cfg, modalities)

    def evaluate(g):
        return evaluate_fused(g, part.test, cfg.loss.label_threshold)

    state, records = run_rounds(state, clients, cfg, evaluate, threads)
    report = records[-1].metrics if records else evaluate(state)
    report.loss = _final_losses(records)
    return ExperimentResult(records, report, [state])


def _check_partition(part: Partition, cfg: FederationConfig, P: int) -> None:
    mods = cfg.client_modalities(P)
    if len(part.clients) != cfg.n_clients:
        raise InvalidConfig(f"partition has {len(part.clients)} clients, config expects {cfg.n_clients}")
    for c in part.clients:
        if c.modality != mods[c.client_id]:
            raise InvalidConfig(f"client {c.client_id} holds modality {c.modality}, config says {mods[c.client_id]}")


# ---------------------------------------------------------------------------
# late-fusion baseline
# ---------------------------------------------------------------------------


def msfedavg_train(cfg: FederationConfig, part: Partition, threads: int = 1) -> ExperimentResult:
    """Independent FedAvg per modality; fusion happens only at inference.

    Each modality model is a backbone plus its own classifier on f features,
    trained on BCE alone with plain batch normalization.
    """
    modalities = modalities_of(part)
    P = len(modalities)
    cfg.validate(P)
    _check_partition(part, cfg, P)
    spec = part.test.spec
    base = dataclasses.replace(cfg, mim=False, fw=False)
    feds = []
    for m, mod in enumerate(modalities):
        local_mod = ModalityId(0, mod.name, mod.in_channels)
        state = init_global(base, [local_mod], spec.image_size, spec.n_labels,
                            classifier_key=m, backbone_keys=[m])
        members = [c for c in make_clients(part, base, [local_mod] * P) if part.clients[c.client_id].modality == m]
        feds.append([state, members])

    def evaluate(states):
        probs = msfedavg_infer(states, part.test.images)
        return f1_scores(probs, part.test.labels, cfg.loss.label_threshold)

    records = []
    for _ in range(cfg.rounds):
        t0 = time.perf_counter()
        rows = []
        for fed in feds:
            fed[0], updates = _round(fed[0], fed[1], base, threads)
            rows.extend(_client_row(u) for u in updates)
        states = [f[0] for f in feds]
        records.append(RoundRecord(states[0].round, sorted(rows, key=lambda r: r["client_id"]),
                                   evaluate(states), 1000 * (time.perf_counter() - t0)))
    states = [f[0] for f in feds]
    report = records[-1].metrics if records else evaluate(states)
    report.loss = _final_losses(records)
    return ExperimentResult(records, report, states)


def msfedavg_infer(models: Sequence[GlobalState], images: Sequence) -> np.ndarray:
    """Average of the per-modality sigmoid outputs."""
    if len(images) != len(models) or any(x is None for x in images):
        raise MissingModality(f"need images for all {len(models)} modalities")
    probs = [full_fusion_inference(model, [x]) for model, x in zip(models, images)]
    return np.mean(probs, axis=0)
