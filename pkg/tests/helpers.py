import numpy as np

from maskdoor.core import CornerBox


def random_box(rng, size=64, min_side=1, cls=None, integer=False):
    if integer:
        x0, x1 = sorted(rng.choice(size + 1, 2, replace=False))
        y0, y1 = sorted(rng.choice(size + 1, 2, replace=False))
    else:
        x0, y0 = rng.uniform(0, size - min_side, 2)
        x1 = rng.uniform(x0 + min_side, size)
        y1 = rng.uniform(y0 + min_side, size)
    c = int(rng.integers(3)) if cls is None else cls
    return CornerBox(c, float(x0), float(y0), float(x1), float(y1))


# acceptance verdict lines, keyed by criterion id; printed by the conftest summary hook
ACCEPTANCE = {}
