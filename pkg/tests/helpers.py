"""Shared test utilities: the tiny-model finite-difference gradient check.

Kept out of any test_* module so both the unit suite and the acceptance
suite can run the same oracle.
"""

import numpy as np

from semfield.dataset import Batch
from semfield.encoding import HashGridConfig, encode
from semfield.network import FieldModel
from semfield.training import TrainConfig, loss_and_grads

UNIT_AABB = np.array([[0.0, 0.0, 0.0], [1.0, 1.0, 1.0]])


def _clear_relu_margin(model, positions, margin: float = 0.05) -> None:
    """Shift first-layer biases so no batch pre-activation sits within
    margin of a ReLU kink.  A finite-difference step that straddles a kink
    compares slopes of different linear pieces, which is not a gradient
    check; the margin keeps every perturbed forward on one piece."""
    enc = encode(positions, model.grid)
    heads = (model.head_semantic, model.head_visual, model.head_instance)
    for head in heads:
        z = enc @ head.w1 + head.b1
        for j in range(z.shape[1]):
            vals = np.sort(z[:, j])
            shifts = [1.5 * margin - vals[0], -(1.5 * margin + vals[-1])]
            shifts += [-(lo + hi) / 2 for lo, hi in zip(vals, vals[1:])]
            best = max(shifts, key=lambda d: np.abs(vals + d).min())
            assert np.abs(vals + best).min() >= margin
            head.b1[j] += best


def tiny_setup(seed: int = 0, exclusive: bool = False):
    """Float64 model, batch, tables, and config for exact gradient checks.

    Parameters are rescaled to O(1): fresh +-1e-4 tables leave pre-norm
    outputs near zero where the normalize Jacobian is ill-conditioned
    for finite differences.
    """
    cfg = HashGridConfig(levels=2, features=2, table_log2=5, base_resolution=4)
    model = FieldModel.initialize(
        cfg,
        UNIT_AABB,
        out_semantic=5,
        out_visual=4,
        hidden=8,
        instance_classes=2,
        seed=seed,
        dtype=np.float64,
    )
    rng = np.random.default_rng([seed, 77])
    for t in model.grid.tables:
        t[...] = rng.uniform(-0.5, 0.5, size=t.shape)
    for head in (model.head_semantic, model.head_visual, model.head_instance):
        head.b1[...] = rng.uniform(-0.1, 0.1, size=head.b1.shape)
        head.b2[...] = rng.uniform(-0.1, 0.1, size=head.b2.shape)

    n = 8
    idx = np.arange(n)
    batch = Batch(
        indices=idx,
        positions=rng.uniform(0.05, 0.95, size=(n, 3)),
        label_ids=rng.integers(0, 3, size=n).astype(np.uint32),
        confidences=rng.uniform(0.2, 1.0, size=n),
        image_emb_ids=rng.integers(0, 4, size=n).astype(np.uint32),
        distances=rng.uniform(0.3, 2.0, size=n),
    )
    _clear_relu_margin(model, batch.positions)

    text = rng.normal(size=(3, 5))
    image = rng.normal(size=(4, 4))
    instance_ids = rng.integers(0, 3, size=n)
    train_cfg = TrainConfig(
        batch_size=n,
        alpha=3.0,
        distance_scale=0.7,
        exclusive_denominator=exclusive,
        seed=seed,
    )
    return model, batch, text, image, train_cfg, instance_ids


def max_gradient_rel_error(seed: int = 0, exclusive: bool = False, h: float = 1e-5) -> float:
    """Worst per-parameter-group relative error of analytic total-loss
    gradients vs central finite differences, including both
    log-temperatures.

    Per group g: ||analytic - fd||_2 / max(||analytic||_2, ||fd||_2), so a
    single near-zero-gradient coordinate cannot dominate through its own
    truncation noise while real errors in any coordinate still register.
    """
    model, batch, text, image, cfg, inst = tiny_setup(seed, exclusive)

    def value() -> float:
        report, _ = loss_and_grads(model, batch, text, image, cfg, inst)
        return report.total

    _, grads = loss_and_grads(model, batch, text, image, cfg, inst)
    worst = 0.0
    for name, param in model.parameters().items():
        flat_param = param.reshape(-1)
        flat_grad = np.asarray(grads[name], dtype=np.float64).reshape(-1)
        fd = np.empty_like(flat_grad)
        for i in range(flat_param.size):
            orig = flat_param[i]
            flat_param[i] = orig + h
            up = value()
            flat_param[i] = orig - h
            down = value()
            flat_param[i] = orig
            fd[i] = (up - down) / (2 * h)
        scale = max(np.linalg.norm(flat_grad), np.linalg.norm(fd), 1e-12)
        worst = max(worst, float(np.linalg.norm(flat_grad - fd) / scale))
    return worst
