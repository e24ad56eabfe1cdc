import threading

import numpy as np
import pytest

from leashed.atomics import AtomicInt
from leashed.param_vector import PayloadPool, VersionSlot


@pytest.fixture
def pool():
    return PayloadPool(census=True)


def test_new_param_vector_zeroed(pool):
    pv = pool.new_param_vector(3)
    assert pv.theta.tolist() == [0.0, 0.0, 0.0]
    assert pv.t.load() == 0
    assert pv.n_rdrs.load() == 0
    assert not pv.stale_flag.load()
    assert not pv.deleted.load()


def test_new_param_vector_mlp_size(pool):
    pv = pool.new_param_vector(134_794)
    assert pv.theta.shape == (134_794,)
    assert pv.theta.dtype == np.float32


def test_zero_dimension_rejected(pool):
    with pytest.raises(ValueError):
        pool.new_param_vector(0)


def test_rand_init_deterministic(pool):
    a = pool.new_param_vector(1000)
    b = pool.new_param_vector(1000)
    a.rand_init(7)
    b.rand_init(7)
    assert np.array_equal(a.theta, b.theta)


def test_rand_init_moments(pool):
    # Standard-error bounds: mean within 4*sd/sqrt(d), sd within 5% of 0.01.
    d = 10_000
    pv = pool.new_param_vector(d)
    pv.rand_init(1)
    assert abs(float(pv.theta.mean())) < 4 * 0.01 / np.sqrt(d)
    assert abs(float(pv.theta.std()) - 0.01) < 0.05 * 0.01


def test_reader_counting(pool):
    pv = pool.new_param_vector(4)
    pv.start_reading()
    assert pv.n_rdrs.load() == 1
    pv.start_reading()
    assert pv.n_rdrs.load() == 2
    pv.stop_reading()
    pv.stop_reading()
    assert pv.n_rdrs.load() == 0


def test_concurrent_start_reading_no_lost_increment(pool):
    pv = pool.new_param_vector(4)
    per_thread = 10_000

    def reader():
        for _ in range(per_thread):
            pv.start_reading()

    ts = [threading.Thread(target=reader) for _ in range(4)]
    for t in ts:
        t.start()
    for t in ts:
        t.join()
    assert pv.n_rdrs.load() == 4 * per_thread


def test_safe_delete_guards(pool):
    pv = pool.new_param_vector(4)
    assert not pv.safe_delete()  # still latest
    pv.stale_flag.store(True)
    pv.start_reading()
    assert not pv.safe_delete()  # reader registered
    pv.stop_reading()  # last reader out performs the reclamation
    assert pv.deleted.load()
    assert pv.payload_or_none() is None
    assert pv.reclaim_count == 1
    assert not pv.safe_delete()  # reclaim-once


def test_concurrent_safe_delete_single_winner(pool):
    pv = pool.new_param_vector(4)
    pv.stale_flag.store(True)
    wins = AtomicInt()
    barrier = threading.Barrier(8)

    def attempt():
        barrier.wait()
        if pv.safe_delete():
            wins.fetch_add(1)

    ts = [threading.Thread(target=attempt) for _ in range(8)]
    for t in ts:
        t.start()
    for t in ts:
        t.join()
    assert wins.load() == 1
    assert pv.reclaim_count == 1


def test_update_arithmetic(pool):
    pv = pool.new_param_vector(2)
    pv.theta[:] = [1.0, 2.0]
    seq = pv.update(np.array([0.5, -1.0], dtype=np.float32), 0.1)
    assert seq == 1
    assert pv.t.load() == 1
    np.testing.assert_allclose(pv.theta, [0.95, 2.1], rtol=1e-6)


def test_update_zero_delta_and_zero_eta(pool):
    pv = pool.new_param_vector(3)
    pv.theta[:] = [1.0, -2.0, 3.0]
    before = pv.theta.copy()
    pv.update(np.zeros(3, dtype=np.float32), 0.5)
    assert np.array_equal(pv.theta, before)
    pv.update(np.ones(3, dtype=np.float32), 0.0)
    assert np.array_equal(pv.theta, before)
    assert pv.t.load() == 2


def test_update_length_mismatch(pool):
    pv = pool.new_param_vector(3)
    with pytest.raises(ValueError):
        pv.update(np.zeros(2, dtype=np.float32), 0.1)


def test_update_sparse_disjoint_supports_commute(pool):
    pv = pool.new_param_vector(8)
    even = np.zeros(8, dtype=np.float32)
    even[0::2] = 1.0
    odd = np.zeros(8, dtype=np.float32)
    odd[1::2] = 2.0
    rounds = 5_000
    barrier = threading.Barrier(2)

    def apply(delta):
        barrier.wait()
        for _ in range(rounds):
            pv.update_sparse(delta, 0.001)

    ts = [threading.Thread(target=apply, args=(d,)) for d in (even, odd)]
    for t in ts:
        t.start()
    for t in ts:
        t.join()
    expected = np.zeros(8, dtype=np.float32)
    for _ in range(rounds):
        expected[0::2] -= np.float32(0.001) * even[0::2]
        expected[1::2] -= np.float32(0.001) * odd[1::2]
    assert np.array_equal(pv.theta, expected)
    assert pv.t.load() == 2 * rounds


def test_acquire_latest_single_thread(pool):
    init = pool.new_param_vector(4)
    slot = VersionSlot(init)
    pv = slot.acquire_latest()
    assert pv is init
    assert pv.n_rdrs.load() == 1
    pv.stop_reading()

    nxt = pool.new_param_vector(4)
    nxt.t.store(1)
    assert slot.try_install(init, nxt)
    init.stale_flag.store(True)
    init.safe_delete()
    got = slot.acquire_latest()
    assert got is nxt
    got.stop_reading()


def test_try_install_requires_current(pool):
    a = pool.new_param_vector(2)
    b = pool.new_param_vector(2)
    c = pool.new_param_vector(2)
    slot = VersionSlot(a)
    assert not slot.try_install(b, c)
    assert slot.try_install(a, b)
    assert not slot.try_install(a, c)
    assert slot.load() is b


def test_recycled_buffers_are_reused_and_zeroed(pool):
    pv = pool.new_param_vector(16)
    buf = pv.theta
    buf[:] = 3.0
    pv.stale_flag.store(True)
    assert pv.safe_delete()
    again = pool.new_param_vector(16)
    assert again.theta is buf  # same storage back from the free list
    assert np.all(again.theta == 0.0)
    assert pool.alloc_total == 2
    assert pool.reclaim_total == 1
    assert pool.live_payloads == 1


def test_census_counters_consistent(pool):
    pvs = [pool.new_param_vector(8) for _ in range(5)]
    for pv in pvs[:3]:
        pv.stale_flag.store(True)
        pv.safe_delete()
    assert pool.live_payloads == pool.alloc_total - pool.reclaim_total == 2
    lives = [live for (_, live, _) in pool.events]
    assert lives[-1] == 2
    assert max(lives) == pool.peak_live_payloads == 5
