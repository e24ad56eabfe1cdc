import numpy as np
import pytest

from helpers import blobs_tiny
from leashed.data import synthetic_blobs
from leashed.nn import Network, tiny_spec
from leashed.optimizers import (
    STATUS_CONVERGED,
    STATUS_CRASH,
    STATUS_DIVERGE,
    LeashedProbe,
    OptimizerConfig,
    run,
    run_async_lock,
    run_hogwild,
    run_leashed,
    run_seq,
)
from leashed.verify import (
    check_lock_freedom_witness,
    check_pool_integrity,
    check_publication_accounting,
    check_sequence_permutation,
)


@pytest.fixture(scope="module")
def dataset():
    return blobs_tiny()


@pytest.fixture(scope="module")
def network():
    return Network(tiny_spec(8, 3))


def _config(algo, **kw):
    base = dict(
        algo=algo,
        m=1,
        eta=0.05,
        batch_size=8,
        seed=42,
        time_budget=60.0,
        epsilon_list=(),
        max_updates=200,
        monitor=False,
    )
    base.update(kw)
    return OptimizerConfig(**base)


# -- configuration ---------------------------------------------------------------


def test_config_validation():
    with pytest.raises(ValueError):
        OptimizerConfig(algo="nope")
    with pytest.raises(ValueError):
        OptimizerConfig(algo="seq", m=2)
    with pytest.raises(ValueError):
        OptimizerConfig(algo="leashed", m=0)
    with pytest.raises(ValueError):
        OptimizerConfig(algo="seq", eta=0.0)
    with pytest.raises(ValueError):
        OptimizerConfig(algo="seq", epsilon_list=(1.5,))
    with pytest.raises(ValueError):
        OptimizerConfig(algo="leashed", persistence=-1)


def test_run_dispatch_checks_algo(dataset, network):
    with pytest.raises(ValueError):
        run_seq(_config("async"), network, dataset)
    with pytest.raises(ValueError):
        run_leashed(_config("seq"), network, dataset)


# -- determinism and equivalence ------------------------------------------------------


def test_seq_deterministic(dataset, network):
    cfg = _config("seq", record_trajectory=True, max_updates=100)
    a = run_seq(cfg, network, dataset)
    b = run_seq(cfg, network, dataset)
    assert a.trajectory == b.trajectory
    assert [(r.seq, r.tau_c, r.tau_s) for r in a.records] == [
        (r.seq, r.tau_c, r.tau_s) for r in b.records
    ]
    assert np.array_equal(a.final_theta, b.final_theta)


def test_seq_staleness_all_zero(dataset, network):
    result = run_seq(_config("seq"), network, dataset)
    assert all(r.tau_c == 0 and r.tau_s == 0 for r in result.records)
    assert all(r.tries == 1 and not r.abandoned for r in result.records)


def test_single_thread_equivalence_bitwise(dataset, network):
    kw = dict(record_trajectory=True, max_updates=100)
    seq = run_seq(_config("seq", **kw), network, dataset)
    async_ = run_async_lock(_config("async", **kw), network, dataset)
    leashed_variants = [
        run_leashed(_config("leashed", persistence=tp, **kw), network, dataset)
        for tp in (0, 3, None)
    ]
    assert async_.trajectory == seq.trajectory
    for variant in leashed_variants:
        assert variant.trajectory == seq.trajectory


def test_hogwild_single_thread_matches_seq(dataset, network):
    kw = dict(record_trajectory=True, max_updates=100)
    seq = run_seq(_config("seq", **kw), network, dataset)
    hog = run_hogwild(_config("hogwild", **kw), network, dataset)
    for (s_seq, s_bytes), (h_seq, h_bytes) in zip(seq.trajectory, hog.trajectory):
        assert s_seq == h_seq
        a = np.frombuffer(s_bytes, dtype=np.float32)
        b = np.frombuffer(h_bytes, dtype=np.float32)
        np.testing.assert_array_equal(a, b)
    # Interval accounting includes the thread's own update.
    assert {r.tau_c for r in hog.records} == {1}
    assert all(r.tau_s == 0 for r in hog.records)


# -- sequence completeness --------------------------------------------------------------


def test_async_sequence_gap_free(dataset, network):
    result = run_async_lock(
        _config("async", m=4, max_updates=500, switch_interval=1e-5), network, dataset
    )
    assert not check_sequence_permutation(result)
    assert result.published >= 500


def test_leashed_sequence_gap_free(dataset, network):
    result = run_leashed(
        _config("leashed", m=4, max_updates=500, switch_interval=1e-5),
        network,
        dataset,
    )
    assert not check_sequence_permutation(result)


def test_hogwild_sequence_gap_free(dataset, network):
    result = run_hogwild(
        _config("hogwild", m=4, max_updates=500, switch_interval=1e-5),
        network,
        dataset,
    )
    seqs = sorted(r.seq for r in result.records)
    assert seqs == list(range(1, len(seqs) + 1))


# -- staleness under contention ----------------------------------------------------------


def test_async_contended_staleness_positive(dataset, network):
    result = run_async_lock(
        _config("async", m=4, max_updates=2000, batch_size=2, switch_interval=1e-5),
        network,
        dataset,
    )
    taus = [r.tau_c for r in result.records]
    assert np.mean(taus) > 0
    assert all(r.tau_s == 0 for r in result.records)
    assert all(t >= 0 for t in taus)


def test_leashed_persistence_zero_has_zero_tau_s(dataset, network):
    probe = LeashedProbe()
    result = run_leashed(
        _config(
            "leashed",
            m=4,
            persistence=0,
            max_updates=2000,
            batch_size=2,
            switch_interval=1e-5,
        ),
        network,
        dataset,
        probe=probe,
    )
    published = [r for r in result.records if not r.abandoned]
    assert published
    assert all(r.tau_s == 0 for r in published)
    assert all(r.tries == 1 for r in published)
    abandoned = [r for r in result.records if r.abandoned]
    # Every failed swap at persistence 0 becomes an abandonment.
    assert len(abandoned) == len(probe.failures)
    assert all(r.seq == 0 and r.tries == 1 for r in abandoned)


def test_leashed_probe_witnesses_progress(dataset, network):
    probe = LeashedProbe()
    result = run_leashed(
        _config(
            "leashed", m=4, max_updates=2000, batch_size=2, switch_interval=1e-5
        ),
        network,
        dataset,
        probe=probe,
    )
    assert probe.failures, "expected contention in this configuration"
    assert not check_lock_freedom_witness(probe, result)
    assert not check_publication_accounting(result)
    assert not check_pool_integrity(result.pool)


def test_leashed_bounded_payloads(dataset, network):
    for m in (2, 4):
        result = run_leashed(
            _config("leashed", m=m, max_updates=1000, switch_interval=1e-5),
            network,
            dataset,
        )
        assert result.pool.peak_live_payloads <= 3 * m


# -- run classification -------------------------------------------------------------------


def test_convergence_on_easy_problem(dataset, network):
    cfg = OptimizerConfig(
        algo="seq",
        m=1,
        eta=0.05,
        batch_size=8,
        seed=1,
        time_budget=60.0,
        epsilon_list=(0.75, 0.5),
        eval_every=0.02,
    )
    result = run_seq(cfg, network, dataset)
    assert result.status == STATUS_CONVERGED
    assert 0.75 in result.eps_hits and 0.5 in result.eps_hits
    t75, _ = result.eps_hits[0.75]
    t50, _ = result.eps_hits[0.5]
    assert t75 <= t50


@pytest.mark.filterwarnings("ignore::RuntimeWarning")
def test_crash_on_numerical_blowup(dataset, network):
    cfg = OptimizerConfig(
        algo="seq",
        m=1,
        eta=1e30,
        batch_size=8,
        seed=1,
        time_budget=30.0,
        epsilon_list=(0.5,),
        max_updates=2000,
        eval_every=0.01,
    )
    result = run_seq(cfg, network, dataset)
    assert result.status == STATUS_CRASH


def test_diverge_when_budget_exhausted(dataset, network):
    cfg = OptimizerConfig(
        algo="seq",
        m=1,
        eta=1e-6,
        batch_size=8,
        seed=1,
        time_budget=60.0,
        epsilon_list=(0.01,),
        max_updates=50,
        eval_every=0.01,
    )
    result = run_seq(cfg, network, dataset)
    assert result.status == STATUS_DIVERGE


def test_monitor_progress_recorded(dataset, network):
    cfg = OptimizerConfig(
        algo="leashed",
        m=2,
        eta=0.05,
        batch_size=8,
        seed=2,
        time_budget=60.0,
        epsilon_list=(0.5,),
        eval_every=0.02,
    )
    result = run_leashed(cfg, network, dataset)
    assert result.progress
    walls = [w for (w, _, _) in result.progress]
    assert walls == sorted(walls)
    assert result.f0 > 0


def test_dispatcher_routes_all_algorithms(dataset, network):
    for algo in ("seq", "async", "hogwild", "leashed"):
        cfg = _config(algo, m=1 if algo == "seq" else 2, max_updates=50)
        result = run(cfg, network, dataset)
        assert result.published >= 50
