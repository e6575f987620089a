"""Small fixtures shared by the protocol and learning tests"""
import random

from django.conf import settings

from core import harness
from core.node import TaskConfig

TEST_CNL = {**settings.CNL, 'TEST_MODE': True, 'KEY_BITS': 512, 'TIMEOUT_SECS': 5.0}


def ring(k):
    return [(i, (i + 1) % k) for i in range(k)]


def star(k):
    return [(0, i) for i in range(1, k)]


def complete(k):
    return [(a, b) for a in range(k) for b in range(a + 1, k)]


def mesh(k, extra, seed):
    """Random connected mesh: a shuffled spanning path plus `extra` random chords"""
    rng = random.Random(seed)
    order = list(range(k))
    rng.shuffle(order)
    edges = {tuple(sorted(pair)) for pair in zip(order, order[1:])}
    chords = [pair for pair in complete(k) if pair not in edges]
    edges.update(rng.sample(chords, min(extra, len(chords))))
    return sorted(edges)


def topologies(k):
    return {'ring': ring(k), 'star': star(k), 'complete': complete(k), 'mesh': mesh(k, k // 2, seed=k)}


def cluster(k, edges, record_traffic=False):
    spec = harness.ClusterSpec(k, harness.EXPLICIT, edges)
    return harness.SimulatedCluster(spec, record_traffic=record_traffic)


def task(task_id='t1', **overrides):
    values = {'dim': 4, 'key_bits': 512, 'timeout_secs': 5.0}
    values.update(overrides)
    return TaskConfig(task_id=task_id, **values)


def plaintext_values(value):
    """Every float anywhere inside a decoded control payload"""
    if isinstance(value, float):
        return [value]
    if isinstance(value, dict):
        return [v for item in value.values() for v in plaintext_values(item)]
    if isinstance(value, (list, tuple)):
        return [v for item in value for v in plaintext_values(item)]
    return []
