import numpy as np
import pandas as pd
import pytest

from tripled.panel import Panel


def random_panel(rng, n_per_cell=(3, 3, 3, 3), n_periods=4, n_post=1, k=0, effect=0.0):
    """Balanced panel with arbitrary (non-structural) outcomes."""
    rows = []
    uid = 0
    times = np.arange(2000, 2000 + n_periods)
    post_start = int(times[n_periods - n_post])
    for (j, g), n in zip(((0, 0), (0, 1), (1, 0), (1, 1)), n_per_cell):
        for _ in range(n):
            mu = rng.normal()
            for t in times:
                y = mu + rng.normal() + 0.3 * (t - 2000) * (1 + j + g)
                if j and g and t >= post_start:
                    y += effect
                row = {"unit": f"u{uid:03d}", "time": int(t), "treat": j, "group": g, "outcome": y}
                for c in range(k):
                    row[f"x{c + 1}"] = rng.uniform(-1, 1)
                rows.append(row)
            uid += 1
    frame = pd.DataFrame(rows)
    return Panel.from_frame(frame, post_start=post_start, covariates=[f"x{c + 1}" for c in range(k)])


def frame_panel(records, post_start, covariates=()):
    cols = ["unit", "time", "treat", "group", "outcome", *covariates]
    return Panel.from_frame(pd.DataFrame(records, columns=cols), post_start=post_start, covariates=list(covariates))


@pytest.fixture
def rng():
    return np.random.default_rng(12345)
