import numpy as np
import pytest

from segmem import backbone as bb
from segmem import fedsim
from segmem import memory as mem
from segmem import synthdata as sd
from segmem.errors import NotFrozen, ZeroParams
from segmem.optim import OptimConfig


@pytest.fixture(scope="module")
def params():
    return bb.ModelParams.initialize(0).freeze()


@pytest.fixture(scope="module")
def shard():
    return sd.generate(sd.TaskSpec(sd.RING), sd.BASE_DOMAIN, 10, seed=61)


def _clients(shard, n=4):
    return [
        fedsim.ClientState(
            client_id=f"site-{i}",
            shard=list(shard),
            val_shard=list(shard[:3]),
            local_pseudo_obs=[],
            n_samples=len(shard),
            rng_seed=100 + i,
        )
        for i in range(n)
    ]


def test_comm_report_paper_numbers():
    report = fedsim.comm_report(2_000_000, 148_630_000, 4)
    assert report.reduction_ratio == pytest.approx(74.3, abs=0.05)
    assert report.reduction_percent == pytest.approx(98.65, abs=0.01)


def test_comm_report_identity():
    report = fedsim.comm_report(1234, 1234, 4)
    assert report.reduction_ratio == 1.0
    assert report.reduction_percent == 0.0


def test_comm_report_rejects_zero():
    with pytest.raises(ZeroParams):
        fedsim.comm_report(0, 10, 4)
    with pytest.raises(ZeroParams):
        fedsim.comm_report(10, 10, 0)


def test_comm_report_own_counts(params):
    memory_params = 4 * 2 * 32 * 32
    report = fedsim.comm_report(memory_params, params.param_count())
    assert report.payload_params_memory == 8192
    assert report.payload_params_backbone == 17617
    assert report.reduction_ratio == pytest.approx(17617 / 8192, abs=0.05)


def test_aggregation_weighted_mean():
    a = [mem.PseudoObservation(np.full((32, 32), 1.0), np.full((32, 32), 3.0))]
    b = [mem.PseudoObservation(np.full((32, 32), 3.0), np.full((32, 32), 5.0))]
    out = fedsim._aggregate([a, b], np.array([0.5, 0.5]))
    assert np.allclose(out[0].image, 2.0)
    assert np.allclose(out[0].mask_logits, 4.0)


def test_fed_requires_frozen(shard):
    unfrozen = bb.ModelParams.initialize(2)
    init = mem.init_pseudo_obs(shard, 1, 0)
    with pytest.raises(NotFrozen):
        fedsim.fed_run(_clients(shard), 1, 1, unfrozen, OptimConfig(), init)


def test_one_round_equivalence_oracle(params, shard):
    """Identical shards, one full-batch step: federated average must equal
    the centralized step on the union within 1e-9."""
    clients = _clients(shard, n=4)
    init = mem.init_pseudo_obs(shard, 2, seed=0)
    cfg = OptimConfig(batch_size=1000)  # covers every shard: full batch
    reports, _ = fedsim.fed_run(clients, 1, 1, params, cfg, init)

    union = [rec for c in clients for rec in c.shard]
    central, _ = mem.optimize_pseudo_obs(params, union, [z.copy() for z in init], 1, cfg, seed=0)

    agg = fedsim._aggregate([c.local_pseudo_obs for c in clients], np.full(4, 0.25))
    for z_fed, z_central in zip(agg, central):
        assert np.max(np.abs(z_fed.image - z_central.image)) <= 1e-9
        assert np.max(np.abs(z_fed.mask_logits - z_central.mask_logits)) <= 1e-9


def test_fed_run_reports_and_bytes(params, shard):
    clients = _clients(shard, n=3)
    init = mem.init_pseudo_obs(shard, 2, seed=1)
    reports, entries = fedsim.fed_run(clients, 2, 1, params, OptimConfig(batch_size=4), init)
    assert len(reports) == 2
    expected = 3 * 2 * 2 * 32 * 32 * 4
    for rep in reports:
        assert rep.bytes_up == rep.bytes_down == expected
        assert set(rep.per_client_dice) == {c.client_id for c in clients}
        assert 0.0 <= rep.global_dice <= 1.0
    assert len(entries) == 2
    assert all(e.kind == mem.KIND_STATIC for e in entries)


def test_bytes_scale_linearly(params, shard):
    for n_clients, n_entries in ((2, 1), (4, 3)):
        clients = _clients(shard, n=n_clients)
        init = mem.init_pseudo_obs(shard, n_entries, seed=2)
        reports, _ = fedsim.fed_run(clients, 1, 1, params, OptimConfig(batch_size=4), init)
        assert reports[0].bytes_up == n_clients * n_entries * 2 * 32 * 32 * 4


def test_aggregate_is_convex_combination(params, shard):
    clients = _clients(shard, n=4)
    for i, c in enumerate(clients):
        c.n_samples = i + 1  # uneven weights
    init = mem.init_pseudo_obs(shard, 2, seed=3)
    fedsim.fed_run(clients, 1, 2, params, OptimConfig(batch_size=4), init)
    weights = np.array([c.n_samples for c in clients], dtype=float)
    weights /= weights.sum()
    agg = fedsim._aggregate([c.local_pseudo_obs for c in clients], weights)
    stack = np.stack([c.local_pseudo_obs[0].image for c in clients])
    lo, hi = stack.min(axis=0), stack.max(axis=0)
    assert np.all(agg[0].image >= lo - 1e-12)
    assert np.all(agg[0].image <= hi + 1e-12)


def test_fed_run_deterministic(params, shard):
    outs = []
    for _ in range(2):
        clients = _clients(shard, n=2)
        init = mem.init_pseudo_obs(shard, 1, seed=4)
        reports, entries = fedsim.fed_run(clients, 2, 1, params, OptimConfig(batch_size=4), init)
        outs.append((tuple(r.global_dice for r in reports), entries[0].token.copy()))
    assert outs[0][0] == outs[1][0]
    assert np.array_equal(outs[0][1], outs[1][1])


def test_make_clients_splits_shards(shard):
    clients = fedsim.make_clients([list(shard), list(shard)], seed=0, val_fraction=0.2)
    assert len(clients) == 2
    for c in clients:
        assert len(c.shard) == 8
        assert len(c.val_shard) == 2
        assert c.n_samples == 8
