import json

import numpy as np
import pytest

from fedleak import federation as fl
from fedleak import layouts, unet

SMALL = unet.UNetConfig(image_size=16, depth=1, base_channels=2)


def client(cls, n=4, size=16, seed=0):
    ds = layouts.generate({(cls, layouts.COARSE): n}, size, seed)
    return fl.ClientDataset.from_dataset(ds)


def test_config_validation():
    with pytest.raises(ValueError):
        fl.FLConfig(lr=0)
    with pytest.raises(ValueError):
        fl.FLConfig(num_clients=0)
    with pytest.raises(ValueError):
        fl.FLConfig(mode="FedProx")


def test_client_dataset_checks():
    with pytest.raises(ValueError, match="binary"):
        fl.ClientDataset(np.zeros((1, 4, 4)), np.full((1, 4, 4), 0.5))
    with pytest.raises(ValueError):
        fl.ClientDataset(np.zeros((1, 4, 4)), np.zeros((1, 4, 5)))


def test_zero_lr_is_identity():
    w = unet.init_weights(SMALL, 0)
    assert fl.local_train(w, client(layouts.BLOB), 2, 2, 0.0, 0).equals(w)


def test_single_sample_step_is_exact_sgd():
    w = unet.init_weights(SMALL, 1)
    data = client(layouts.TRACE, n=1)
    _, g = unet.loss_and_grads(w, data.images, data.masks)
    out = fl.local_train(w, data, 1, 1, 0.05, 0)
    for k in w:
        np.testing.assert_array_equal(out[k], w[k] - 0.05 * g[k])


def test_local_train_deterministic_and_seed_dependent():
    w = unet.init_weights(SMALL, 2)
    data = client(layouts.BLOB, n=5)
    a = fl.local_train(w, data, 2, 2, 0.1, 7)
    assert a.equals(fl.local_train(w, data, 2, 2, 0.1, 7))
    assert not a.equals(fl.local_train(w, data, 2, 2, 0.1, 8))


def test_oversized_batch_is_clamped(caplog):
    w = unet.init_weights(SMALL, 0)
    data = client(layouts.BLOB, n=3)
    with caplog.at_level("INFO", logger="fedleak.federation"):
        out = fl.local_train(w, data, 1, 10, 0.1, 0)
    assert "clamped" in caplog.text
    # one full (shuffled) batch == one FedSGD step, up to summation order
    ref = fl.fedsgd_step(w, data, 0.1)
    np.testing.assert_allclose(out.flat(), ref.flat(), rtol=0, atol=1e-14)


def test_fedavg_examples():
    arch = unet.LinearConfig(image_size=2)
    mk = lambda v: unet.ModelWeights(arch, {k: np.full(s, v) for k, s in arch.param_shapes().items()})
    w = unet.init_weights(arch, 0)
    assert fl.fedavg_aggregate([w, w], [5, 5]).equals(w)
    assert fl.fedavg_aggregate([w] * 4, [1, 1, 1, 1]).equals(w)
    assert (fl.fedavg_aggregate([mk(0.0), mk(2.0)], [1, 1])["dense.weight"] == 1.0).all()
    assert (fl.fedavg_aggregate([mk(0.0), mk(4.0)], [1, 3])["dense.weight"] == 3.0).all()
    with pytest.raises(ValueError):
        fl.fedavg_aggregate([w, unet.init_weights(unet.LinearConfig(image_size=3), 0)], [1, 1])
    with pytest.raises(ValueError):
        fl.fedavg_aggregate([w], [0])


def test_zero_rounds_returns_initial():
    cfg = fl.FLConfig(num_clients=1, rounds=0)
    res = fl.run_federation(cfg, [client(layouts.BLOB)], arch=SMALL)
    assert res.final.equals(res.initial) and res.snapshots == []


def test_single_client_is_sequential_training():
    cfg = fl.FLConfig(num_clients=1, rounds=2, local_epochs=1, batch_size=2, lr=0.1, seed=4)
    data = client(layouts.TRACE)
    res = fl.run_federation(cfg, [data], arch=SMALL)
    w = res.initial
    for rnd in (1, 2):
        w = fl.local_train(w, data, 1, 2, 0.1, fl._client_rng(4, rnd, 0))
    assert res.final.equals(w)


def test_protocol_invariant_and_interception_passivity():
    cfg = fl.FLConfig(num_clients=2, rounds=3, local_epochs=1, batch_size=2, lr=0.1, snapshot_rounds=(1, 2, 3))
    data = [client(layouts.TRACE, seed=1), client(layouts.BLOB, seed=2)]
    seen = []
    res = fl.run_federation(cfg, data, arch=SMALL, intercept=seen.append)
    plain = fl.run_federation(cfg, data, arch=SMALL)
    assert res.final.equals(plain.final)
    assert len(seen) == 6 and len(res.snapshots) == 6
    by = {(s.round, s.client): s for s in seen}
    for rnd in (1, 2):
        agg = fl.fedavg_aggregate([by[rnd, 0].w_curr, by[rnd, 1].w_curr], [4, 4])
        assert by[rnd + 1, 0].w_prev.equals(agg)
        assert by[rnd + 1, 1].w_prev.equals(agg)
    view = fl.attacker_view(by[2, 1])
    assert view._fields == ("w_prev", "w_curr")
    assert view.w_prev.equals(by[2, 1].w_prev) and view.w_curr.equals(by[2, 1].w_curr)


def test_default_snapshots_are_final_round_only():
    cfg = fl.FLConfig(num_clients=2, rounds=2, local_epochs=1, batch_size=4)
    res = fl.run_federation(cfg, [client(layouts.TRACE), client(layouts.BLOB)], arch=SMALL)
    assert [(s.round, s.client) for s in res.snapshots] == [(2, 0), (2, 1)]


@pytest.mark.parametrize("seed", range(3))
def test_fedsgd_delta_recovers_full_batch_gradient(seed):
    cfg = fl.FLConfig(num_clients=1, rounds=1, mode="FedSGD", lr=0.01, seed=seed)
    data = client(layouts.BLOB, seed=seed)
    res = fl.run_federation(cfg, [data], arch=SMALL)
    snap = res.snapshots[0]
    _, g = unet.loss_and_grads(snap.w_prev, data.images, data.masks)
    for k in g:
        rec = (snap.w_prev[k] - snap.w_curr[k]) / snap.true_lr
        assert np.abs(rec - g[k]).max() <= 1e-12 * max(1.0, np.abs(g[k]).max())


def test_training_reduces_loss_on_both_clients():
    cfg = fl.FLConfig(num_clients=2, rounds=5, lr=0.1)
    data = [client(layouts.TRACE, n=6, seed=3), client(layouts.BLOB, n=6, seed=4)]
    res = fl.run_federation(cfg, data, arch=SMALL)
    initial = [fl.dataset_loss(res.initial, d) for d in data]
    assert all(f < i for f, i in zip(res.final_losses, initial))


def test_snapshot_files_round_trip_without_lr(tmp_path):
    cfg = fl.FLConfig(num_clients=2, rounds=1, local_epochs=1, batch_size=4)
    res = fl.run_federation(cfg, [client(layouts.TRACE), client(layouts.BLOB)], arch=SMALL)
    manifest = fl.save_snapshots(res.snapshots, tmp_path)
    text = manifest.read_text()
    assert "lr" not in json.loads(text)["snapshots"][0]
    back = fl.load_snapshots(manifest)
    for (rnd, cid, view), snap in zip(back, res.snapshots):
        assert (rnd, cid) == (snap.round, snap.client)
        assert view.w_prev.equals(snap.w_prev) and view.w_curr.equals(snap.w_curr)
