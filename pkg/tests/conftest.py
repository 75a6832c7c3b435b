import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from hetrec.graph import build_graph

settings.register_profile("default", deadline=None, suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("default")


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


@pytest.fixture
def click_graph():
    """u1 -> {i1, i2}, u2 -> {i2}, u3 isolated from clicks but bought i3."""
    edges = [("u2click2i", "u1", "i1"), ("u2click2i", "u1", "i2"), ("u2click2i", "u2", "i2"),
             ("u2buy2i", "u3", "i3")]
    return build_graph(["u2click2i", "u2buy2i"], edges)


def random_bipartite(rng, n_users=6, n_items=6, n_edges=15, relations=("click",)):
    edges = []
    for _ in range(n_edges):
        r = relations[rng.integers(len(relations))]
        edges.append((f"u2{r}2i", f"u{rng.integers(n_users)}", f"i{rng.integers(n_items)}"))
    return build_graph([f"u2{r}2i" for r in relations], edges)
