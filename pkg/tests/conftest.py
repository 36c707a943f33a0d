import numpy as np
import pytest


def make_ml100k_shaped_tsv(path, n_users=942, n_items=1447, n_inter=55375, seed=0):
    """Interaction log with the exact aggregate statistics of the filtered
    MovieLens-100K benchmark: covers every user and item, unique pairs."""
    rng = np.random.default_rng(seed)
    pairs = set()
    for u in range(n_users):
        pairs.add((u, u % n_items))
    for i in range(n_items):
        pairs.add((i % n_users, i))
    while len(pairs) < n_inter:
        need = n_inter - len(pairs)
        us = rng.integers(0, n_users, size=2 * need + 16)
        its = rng.integers(0, n_items, size=2 * need + 16)
        for u, i in zip(us, its):
            pairs.add((int(u), int(i)))
            if len(pairs) == n_inter:
                break
    with open(path, "w", encoding="utf-8") as f:
        for u, i in sorted(pairs):
            f.write(f"{u + 1}\t{i + 1}\t5\t0\n")
    return path


@pytest.fixture(scope="session")
def ml100k_shaped_path(tmp_path_factory):
    path = tmp_path_factory.mktemp("ml100k") / "u.data"
    return make_ml100k_shaped_tsv(path)
