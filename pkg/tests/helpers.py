"""Shared test utilities: finite differences and tiny synthetic setups."""

import numpy as np

FD_STEP = 1e-3
FD_RTOL = 1e-3
FD_ATOL = 1e-6      # floor for coordinates whose true gradient is ~0
FD_PASS_FRACTION = 0.99


def numeric_grad(f, x, step=FD_STEP):
    """Central differences of scalar ``f()`` w.r.t. array ``x`` (perturbed in place)."""
    g = np.zeros_like(x, dtype=np.float64)
    it = np.nditer(x, flags=["multi_index"])
    for _ in it:
        i = it.multi_index
        old = x[i]
        x[i] = old + step
        fp = f()
        x[i] = old - step
        fm = f()
        x[i] = old
        g[i] = (fp - fm) / (2 * step)
    return g


def activation_pattern(tape) -> bytes:
    """Concatenated ReLU masks and max-pool switch offsets found anywhere in a tape."""
    parts = []

    def walk(obj):
        if isinstance(obj, np.ndarray):
            if obj.dtype in (np.bool_, np.uint8):
                parts.append(obj.tobytes())
        elif isinstance(obj, (list, tuple)):
            for o in obj:
                walk(o)

    walk(tape)
    return b"".join(parts)


def piecewise_numeric_grad(f, x, step=FD_STEP):
    """Central differences of ``f() -> (loss, pattern)`` and a mask of valid coordinates.

    A coordinate is valid when the activation pattern is identical at
    ``x - step``, ``x`` and ``x + step``, i.e. the difference does not cross a
    ReLU kink or a max-pool switch.
    """
    g = np.zeros_like(x, dtype=np.float64)
    valid = np.ones(x.shape, dtype=bool)
    _, p0 = f()
    it = np.nditer(x, flags=["multi_index"])
    for _ in it:
        i = it.multi_index
        old = x[i]
        x[i] = old + step
        fp, pp = f()
        x[i] = old - step
        fm, pm = f()
        x[i] = old
        g[i] = (fp - fm) / (2 * step)
        valid[i] = pp == p0 and pm == p0
    return g, valid


def grad_agreement(analytic, numeric, rtol=FD_RTOL, atol=FD_ATOL) -> float:
    """Fraction of coordinates with |a - n| <= atol + rtol * max(|a|, |n|)."""
    a = np.asarray(analytic, np.float64).ravel()
    n = np.asarray(numeric, np.float64).ravel()
    ok = np.abs(a - n) <= atol + rtol * np.maximum(np.abs(a), np.abs(n))
    return float(ok.mean()) if ok.size else 1.0


def away_from_kinks(rng, shape, gap=2e-2):
    """Random values with no element near 0 and no two elements within ``gap``.

    Keeps ReLU and max-pool away from points where the finite difference
    would straddle a kink or a tie.
    """
    n = int(np.prod(shape))
    vals = (np.arange(n) - n / 2 + 0.5) * gap * 2.5
    vals = vals[np.abs(vals) > gap]
    while len(vals) < n:
        vals = np.append(vals, vals[-1] + gap * 2.5)
    return rng.permutation(vals[:n]).reshape(shape)


def tiny_spec(**kw):
    from tsbn.data import SyntheticSpec

    base = dict(num_classes=4, train_per_class=12, test_per_class=6, image_size=16, pretrain_classes=2,
                pretrain_per_class=12, seed=3)
    base.update(kw)
    return SyntheticSpec(**base)


def tiny_config(**over):
    """A seconds-scale experiment config: 4 classes, 2 tasks, 16px images."""
    from tsbn.config import config_from_dict

    d = {
        "name": "tiny",
        "data": {"synthetic": {"num_classes": 4, "train_per_class": 12, "test_per_class": 6, "image_size": 16,
                               "pretrain_classes": 2, "pretrain_per_class": 12, "seed": 3},
                 "num_tasks": 2},
        "pretrain": {"epochs": 1, "batch_size": 8},
        "epochs_scale": 1.0,
        "stage_a": {"epochs": 2, "batch_size": 8, "memory_batch_size": 4,
                    "sgd": {"learning_rate": 0.01, "milestones": [1]}},
        "stage_b": {"epochs": 2, "batch_size": 8, "sgd": {"learning_rate": 0.01, "milestones": [1]}},
        "memory_budget": 8,
    }
    for k, v in over.items():
        if isinstance(v, dict) and isinstance(d.get(k), dict):
            d[k] = {**d[k], **v}
        else:
            d[k] = v
    return config_from_dict(d)
