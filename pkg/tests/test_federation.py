import dataclasses
import math

import numpy as np
import pytest

from mmfl.autograd import gradients
from mmfl.data import DatasetSpec, ModalitySpec, generate_dataset, partition
from mmfl.errors import InvalidConfig, MissingModality
from mmfl.federation import (
    ClientState,
    ClientUpdate,
    FederationConfig,
    GlobalState,
    aggregate,
    broadcast,
    client_batches,
    init_global,
    local_train,
    modalities_of,
    msfedavg_infer,
    msfedavg_train,
    run_experiment,
    run_rounds,
    weighted_mean,
)
from mmfl.layers import Adam
from mmfl.losses import bce_loss
from mmfl.models import Backbone, Classifier, FusionLayout, ModalityId, ModelConfig, backbone_forward, classify

SMALL = dict(n_samples=480, n_groups=6)


@pytest.fixture(scope="module")
def small_part():
    return partition(generate_dataset(DatasetSpec(seed=5, **SMALL)), 6, scenario=2, seed=5)


@pytest.fixture(scope="module")
def single_part():
    spec = DatasetSpec(seed=2, modalities=(ModalitySpec("a", 2),), **SMALL)
    return partition(generate_dataset(spec), 1, scenario=1, seed=2)


def _bitwise(a, b):
    assert list(a) == list(b)
    for k in a:
        assert a[k].tobytes() == b[k].tobytes(), k


def _same_state(g1, g2):
    assert len(g1.backbones) == len(g2.backbones)
    for a, b in zip(g1.backbones, g2.backbones):
        _bitwise(a, b)
    _bitwise(g1.classifier, g2.classifier)


# -- aggregation arithmetic ------------------------------------------------------------

def _toy_state(P=1):
    mods = tuple(ModalityId(i, f"m{i}", 1) for i in range(P))
    return GlobalState(FusionLayout(mods, 2), ModelConfig(), 4, 1,
                       [{"w": np.zeros(2, np.float32)} for _ in range(P)], {"c": np.zeros(3, np.float32)})


def _update(cid, m, w, c, n):
    return ClientUpdate(cid, m, {"w": np.asarray(w, np.float32)}, {"c": np.asarray(c, np.float32)}, n, {}, [])


def test_aggregate_equal_weights_hand_value():
    g = aggregate(_toy_state(), [_update(0, 0, [0, 0], [0, 0, 0], 5), _update(1, 0, [2, 2], [2, 4, 6], 5)])
    np.testing.assert_array_equal(g.backbones[0]["w"], [1, 1])
    np.testing.assert_array_equal(g.classifier["c"], [1, 2, 3])
    assert g.round == 1


def test_aggregate_sample_weights_hand_value():
    g = aggregate(_toy_state(), [_update(0, 0, [0, 0], [0, 0, 0], 1), _update(1, 0, [4, 4], [4, 4, 4], 3)])
    np.testing.assert_array_equal(g.backbones[0]["w"], [3, 3])


def test_aggregate_backbones_per_modality_classifier_over_all():
    ups = [_update(0, 0, [1, 1], [0, 0, 0], 1), _update(1, 1, [5, 5], [6, 6, 6], 2)]
    g = aggregate(_toy_state(P=2), ups)
    np.testing.assert_array_equal(g.backbones[0]["w"], [1, 1])
    np.testing.assert_array_equal(g.backbones[1]["w"], [5, 5])
    np.testing.assert_array_equal(g.classifier["c"], [4, 4, 4])


def test_aggregate_needs_every_modality():
    with pytest.raises(MissingModality):
        aggregate(_toy_state(P=2), [_update(0, 0, [1, 1], [0, 0, 0], 1)])


def test_aggregate_is_idempotent(rng):
    for weights in ([640, 640, 640], [7, 13, 29], [1, 1000, 3]):
        w = rng.normal(size=(5, 4)).astype(np.float32)
        ups = [ClientUpdate(i, 0, {"w": w.copy()}, {"c": w[0].copy()}, n, {}, []) for i, n in enumerate(weights)]
        g = aggregate(_toy_state(), ups)
        assert g.backbones[0]["w"].tobytes() == w.tobytes()
        assert g.classifier["c"].tobytes() == w[0].tobytes()


def test_aggregate_is_permutation_invariant(rng):
    ups = [ClientUpdate(i, 0, {"w": rng.normal(size=6).astype(np.float32)}, {"c": rng.normal(size=3).astype(np.float32)},
                        int(rng.integers(1, 100)), {}, []) for i in range(5)]
    ref = aggregate(_toy_state(), ups)
    for _ in range(10):
        shuffled = [ups[i] for i in rng.permutation(5)]
        _same_state(ref, aggregate(_toy_state(), shuffled))


def test_weighted_mean_resymmetrizes_running_cov(rng):
    a = rng.normal(size=(3, 3)).astype(np.float32)
    out = weighted_mean([{"x.running_cov": a @ a.T}, {"x.running_cov": np.eye(3, dtype=np.float32)}], [1, 2])
    np.testing.assert_array_equal(out["x.running_cov"], out["x.running_cov"].T)


# -- protocol behaviour -------------------------------------------------------------

def _fresh(part, cfg):
    mods = modalities_of(part)
    spec = part.test.spec
    return init_global(cfg, mods, spec.image_size, spec.n_labels), mods


def test_broadcast_isolation(small_part):
    cfg = FederationConfig(rounds=1, local_epochs=1)
    g, mods = _fresh(small_part, cfg)
    before = [dict((k, v.copy()) for k, v in b.items()) for b in g.backbones]
    c = small_part.clients[0]
    client = broadcast(g, ClientState(0, mods[0], c.images, c.labels, seed=1), cfg)
    for p in client.encoder.parameters().values():
        p.data += 0.5
    local_train(client, cfg, g.layout)
    for a, b in zip(before, g.backbones):
        _bitwise(a, b)
    assert set(client.frozen_trunks) == {1}


def test_zero_local_epochs_keeps_global_state(small_part):
    cfg = FederationConfig(rounds=2, local_epochs=0)
    g, mods = _fresh(small_part, cfg)
    ref = run_experiment(cfg, small_part).models[0]
    _same_state(g, ref)
    assert ref.round == 2


def _identical_clients(part, mods, k, m=0):
    src = [c for c in part.clients if c.modality == m][0]
    return [ClientState(i, mods[m], src.images, src.labels, seed=99) for i in range(k)]


@pytest.mark.parametrize("k", [2, 3])
def test_identical_clients_equal_one_client(single_part, k):
    cfg = FederationConfig(n_clients=1, rounds=2, local_epochs=1)
    g, mods = _fresh(single_part, cfg)
    one, _ = run_rounds(g, _identical_clients(single_part, mods, 1), cfg)
    many, _ = run_rounds(g, _identical_clients(single_part, mods, k), cfg)
    _same_state(one, many)


def test_identical_clients_equal_one_client_two_modalities(small_part):
    cfg = FederationConfig(rounds=2, local_epochs=1)
    g, mods = _fresh(small_part, cfg)
    pair = _identical_clients(small_part, mods, 1, 0) + [
        dataclasses.replace(c, client_id=1) for c in _identical_clients(small_part, mods, 1, 1)]
    quad = _identical_clients(small_part, mods, 2, 0) + [
        dataclasses.replace(c, client_id=2 + i) for i, c in enumerate(_identical_clients(small_part, mods, 2, 1))]
    _same_state(run_rounds(g, pair, cfg)[0], run_rounds(g, quad, cfg)[0])


def test_single_client_round_equals_centralized_epoch(single_part):
    """K=1, P=1, E=1, R=1 must match plain minibatch training, bit for bit."""
    seed = 4
    cfg = FederationConfig(n_clients=1, rounds=1, local_epochs=1, seed=seed)
    fed = run_experiment(cfg, single_part).models[0]

    # the oracle: same initial weights, same shuffle, Adam over one epoch, no protocol
    data = single_part.clients[0]
    model_cfg = cfg.model_config()
    mod = ModalityId(0, "a", 2)
    enc = Backbone(mod, 4, model_cfg, seed=np.random.default_rng(np.random.SeedSequence([seed, 1, 0])))
    clf = Classifier(model_cfg.feature_dim, 5, seed=np.random.default_rng(np.random.SeedSequence([seed, 2, 0])))
    params = {f"encoder.{k}": v for k, v in enc.parameters().items()}
    params |= {f"classifier.{k}": v for k, v in clf.parameters().items()}
    opt = Adam(params)
    client_seed = int(np.random.SeedSequence([seed, 3, 0]).generate_state(1)[0])
    order = np.random.default_rng([client_seed, 0]).permutation(len(data))
    for idx in np.array_split(order, math.ceil(len(data) / cfg.batch_size)):
        feats = backbone_forward(enc, data.images[idx], "train")
        loss = bce_loss(classify(clf, feats), data.labels[idx])
        opt.step(gradients(loss, params))

    _bitwise(enc.state_dict(), fed.backbones[0])
    _bitwise(clf.state_dict(), fed.classifier)


def test_client_batches_cover_all_samples(rng):
    for n, b in [(10, 4), (640, 64), (65, 64), (3, 64)]:
        batches = client_batches(n, b, rng)
        assert sorted(np.concatenate(batches).tolist()) == list(range(n))
        assert max(len(x) for x in batches) <= b
        if n >= b:
            assert min(len(x) for x in batches) >= b // 2


def test_local_loss_decreases_over_epochs(small_part):
    drops = []
    for seed in range(5):
        cfg = FederationConfig(rounds=1, local_epochs=4, seed=seed)
        g, mods = _fresh(small_part, cfg)
        c = small_part.clients[3]
        client = broadcast(g, ClientState(3, mods[1], c.images, c.labels, seed=seed), cfg)
        u = local_train(client, cfg, g.layout)
        drops.append(u.epoch_losses[-1] < u.epoch_losses[0])
    assert np.median(drops) == 1


def test_run_is_reproducible_and_thread_independent(small_part):
    cfg = FederationConfig(rounds=2, local_epochs=1)
    a = run_experiment(cfg, small_part, threads=1)
    b = run_experiment(cfg, small_part, threads=3)
    _same_state(a.models[0], b.models[0])
    assert a.report.as_dict() == b.report.as_dict()


def test_socket_transport_matches_memory(small_part):
    cfg = FederationConfig(rounds=1, local_epochs=1)
    a = run_experiment(cfg, small_part)
    b = run_experiment(dataclasses.replace(cfg, transport="socket"), small_part)
    _same_state(a.models[0], b.models[0])


def test_records_one_per_round(small_part):
    res = run_experiment(FederationConfig(rounds=3, local_epochs=1), small_part)
    assert [r.round for r in res.records] == [1, 2, 3]
    assert [row["client_id"] for row in res.records[0].clients] == list(range(6))
    assert 0 <= res.report.macro_f1 <= 1


def test_config_validation(small_part):
    with pytest.raises(InvalidConfig):
        run_experiment(FederationConfig(mf=False), small_part)
    with pytest.raises(InvalidConfig):
        run_experiment(FederationConfig(n_clients=1), small_part)
    with pytest.raises(InvalidConfig):
        run_experiment(FederationConfig(modality_of=(0, 0, 0, 0, 0, 0)), small_part)
    with pytest.raises(InvalidConfig):
        run_experiment(FederationConfig(transport="carrier-pigeon"), small_part)


# -- baseline -----------------------------------------------------------------------

def test_msfedavg_single_modality_equals_plain_fedavg(single_part):
    cfg = FederationConfig(n_clients=1, rounds=2, local_epochs=1)
    base = msfedavg_train(cfg, single_part)
    plain = run_experiment(dataclasses.replace(cfg, fw=False, mim=False), single_part)
    _same_state(base.models[0], plain.models[0])
    assert base.report.macro_f1 == plain.report.macro_f1


def test_msfedavg_modalities_train_in_isolation(small_part):
    cfg = FederationConfig(rounds=1, local_epochs=1)
    ref = msfedavg_train(cfg, small_part)
    scrambled = dataclasses.replace(small_part, clients=[
        dataclasses.replace(c, images=c.images[::-1].copy()) if c.modality == 1 else c for c in small_part.clients])
    other = msfedavg_train(cfg, scrambled)
    _same_state(ref.models[0], other.models[0])
    with pytest.raises(AssertionError):
        _same_state(ref.models[1], other.models[1])


def test_msfedavg_uses_plain_batch_norm(small_part):
    res = msfedavg_train(FederationConfig(rounds=1, local_epochs=1), small_part)
    assert all(not any(k.endswith("running_cov") for k in m.backbones[0]) for m in res.models)


def _constant_model(prob):
    mod = ModalityId(0, "a", 2)
    g = init_global(FederationConfig(), [mod], 4, 2)
    g.classifier = {"fc.weight": np.zeros_like(g.classifier["fc.weight"]),
                    "fc.bias": np.full(2, np.log(prob / (1 - prob)), np.float32)}
    return g


def test_msfedavg_infer_averages_probabilities(rng):
    x = rng.normal(size=(3, 2, 4, 4)).astype(np.float32)
    p = msfedavg_infer([_constant_model(0.2), _constant_model(0.6)], [x, x])
    np.testing.assert_allclose(p, 0.4, atol=1e-6)
    with pytest.raises(MissingModality):
        msfedavg_infer([_constant_model(0.2), _constant_model(0.6)], [x])
