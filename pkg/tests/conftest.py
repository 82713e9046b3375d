import pytest

from parvio.client import connect
from parvio.cluster import inproc_config, start_cluster


@pytest.fixture
def make_cluster(tmp_path):
    """Factory for loopback clusters that are torn down after the test."""
    made = []

    def factory(n_servers, **kw):
        cluster = start_cluster(inproc_config(n_servers, str(tmp_path), **kw))
        made.append(cluster)
        return cluster

    yield factory
    for cluster in made:
        for s in cluster.servers:
            s.stop()
        for s in cluster.servers:
            s.join(timeout=5.0)


@pytest.fixture
def cluster2(make_cluster):
    return make_cluster(2, stripe=4096)


@pytest.fixture
def session(cluster2):
    return connect(cluster2)
