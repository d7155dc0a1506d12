import numpy as np
import pytest

import demandml as dm


@pytest.fixture
def tiny_panel():
    """3 products x 3 periods with one tabular control and 2 sim features."""
    rng = np.random.default_rng(0)
    n, periods = 3, 3
    return dm.PanelDataset(
        product_ids=("a", "b", "c"),
        q=rng.standard_normal((n, periods)),
        p=rng.standard_normal((n, periods)),
        tabular=rng.standard_normal((n, periods, 1)),
        tabular_names=("rating",),
        features=rng.standard_normal((n, 2)),
        feature_names=("sim_0", "sim_1"),
    )


def make_panel(q, p, product_ids=None):
    """Panel from explicit (N, T+1) signal arrays, no controls."""
    q = np.asarray(q, dtype=float)
    p = np.asarray(p, dtype=float)
    n = q.shape[0]
    ids = tuple(product_ids) if product_ids is not None else tuple(
        f"p{i:04d}" for i in range(n))
    return dm.PanelDataset(
        product_ids=ids,
        q=q,
        p=p,
        tabular=np.zeros((n, q.shape[1], 0)),
        tabular_names=(),
        features=np.zeros((n, 0)),
        feature_names=(),
    )
