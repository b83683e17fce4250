"""Central finite-difference verification of every differentiable operation.

Each registered check builds a scalar loss from random small inputs, runs the
tape backward, and compares the analytic gradients against central
differences (step 1e-6, double precision). The reported figure per check is

    max_i |analytic_i - numeric_i| / max(|analytic_i|, |numeric_i|, 1e-3)

i.e. a relative error with an absolute floor that keeps near-zero entries
from dividing by noise. The registry is the single source of truth for the
operation list printed by the ``grad-check`` CLI command.
"""

from __future__ import annotations

from typing import Callable

import numpy as np

from . import numerics as nm

STEP = 1e-6
OP_TOLERANCE = 1e-5
END_TO_END_TOLERANCE = 1e-4


def numeric_gradients(f: Callable[[], float], arrays: list[np.ndarray],
                      step: float = STEP) -> list[np.ndarray]:
    """Central-difference gradients of ``f`` w.r.t. arrays mutated in place."""
    grads = []
    for a in arrays:
        g = np.zeros_like(a)
        flat = a.reshape(-1)
        gflat = g.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + step
            fp = f()
            flat[i] = orig - step
            fm = f()
            flat[i] = orig
            gflat[i] = (fp - fm) / (2.0 * step)
        grads.append(g)
    return grads


def relative_error(analytic: np.ndarray, numeric: np.ndarray) -> float:
    denom = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), 1e-3)
    return float(np.max(np.abs(analytic - numeric) / denom)) if analytic.size else 0.0


def check_scalar_fn(build: Callable[[list[nm.Tensor]], nm.Tensor],
                    arrays: list[np.ndarray]) -> float:
    """Max relative error between tape gradients and central differences.

    ``build`` maps leaf tensors to a scalar loss; it is re-invoked on every
    finite-difference probe, so it must be a pure function of the arrays.
    """
    leaves = [nm.Tensor(a, requires_grad=True) for a in arrays]
    loss = build(leaves)
    nm.backward(loss)
    analytic = [np.zeros_like(a) if t.grad is None else t.grad
                for a, t in zip(arrays, leaves)]

    def f() -> float:
        return float(build([nm.Tensor(a) for a in arrays]).data)

    numeric = numeric_gradients(f, arrays)
    return max(relative_error(a, n) for a, n in zip(analytic, numeric))


def check_params_fn(loss_fn: Callable[[], nm.Tensor], store: nm.ParameterStore) -> float:
    """Compare store-parameter gradients of ``loss_fn`` against central diffs.

    ``loss_fn`` must be a pure function of the store's current parameter
    values (detached or discrete inner decisions frozen by the caller); the
    probe mutates parameter data in place.
    """
    store.zero_grad()
    loss = loss_fn()
    nm.backward(loss, store)
    names = store.names()
    analytic = [store[n].grad.copy() for n in names]
    arrays = [store[n].data for n in names]
    numeric = numeric_gradients(lambda: float(loss_fn().data), arrays)
    return max(relative_error(a, n) for a, n in zip(analytic, numeric))


def _away_from(x: np.ndarray, kinks: list[float], margin: float = 1e-3) -> np.ndarray:
    """Nudge entries off non-differentiable points so central diffs are valid."""
    for k in kinks:
        close = np.abs(x - k) < margin
        x = np.where(close, k + margin * np.where(x >= k, 1.0, -1.0) * 2.0, x)
    return x


def _check_matmul(rng) -> float:
    a = rng.normal(size=(4, 5))
    b = rng.normal(size=(5, 3))
    return check_scalar_fn(lambda ts: nm.sum_all(nm.matmul(ts[0], ts[1])), [a, b])


def _check_linear(rng) -> float:
    x = rng.normal(size=(3, 4))
    w = rng.normal(size=(4, 2))
    b = rng.normal(size=(2,))
    proj = rng.normal(size=(3, 2))
    return check_scalar_fn(
        lambda ts: nm.sum_all(nm.linear(ts[0], ts[1], ts[2]) * nm.Tensor(proj)),
        [x, w, b])


def _check_softmax_rows(rng) -> float:
    x = rng.normal(size=(4, 6)) * 2.0
    allow = rng.random(size=(4, 6)) > 0.3
    allow[:, 0] = True
    proj = rng.normal(size=(4, 6))
    return check_scalar_fn(
        lambda ts: nm.sum_all(nm.softmax_rows(ts[0], allow) * nm.Tensor(proj)), [x])


def _check_layer_norm(rng) -> float:
    x = rng.normal(size=(5, 6))
    gain = rng.normal(size=(6,)) + 1.0
    bias = rng.normal(size=(6,))
    proj = rng.normal(size=(5, 6))
    return check_scalar_fn(
        lambda ts: nm.sum_all(nm.layer_norm(ts[0], ts[1], ts[2]) * nm.Tensor(proj)),
        [x, gain, bias])


def _check_relu(rng) -> float:
    x = _away_from(rng.normal(size=(4, 4)), [0.0])
    p = rng.normal(size=(4, 4))
    return check_scalar_fn(lambda ts: nm.sum_all(nm.relu(ts[0]) * nm.Tensor(p)), [x])


def _check_sigmoid(rng) -> float:
    x = rng.normal(size=(4, 4)) * 3.0
    p = rng.normal(size=(4, 4))
    return check_scalar_fn(lambda ts: nm.sum_all(nm.sigmoid(ts[0]) * nm.Tensor(p)), [x])


def _check_softplus(rng) -> float:
    x = rng.normal(size=(4, 4)) * 3.0
    p = rng.normal(size=(4, 4))
    return check_scalar_fn(lambda ts: nm.sum_all(nm.softplus(ts[0]) * nm.Tensor(p)), [x])


def _check_exp_log(rng) -> float:
    x = rng.random(size=(3, 4)) + 0.5
    p = rng.normal(size=(3, 4))
    return check_scalar_fn(
        lambda ts: nm.sum_all(nm.log(nm.exp(ts[0]) + nm.Tensor(np.ones_like(x))) * nm.Tensor(p)),
        [x])


def _check_absolute(rng) -> float:
    x = _away_from(rng.normal(size=(4, 4)), [0.0])
    p = rng.normal(size=(4, 4))
    return check_scalar_fn(lambda ts: nm.sum_all(nm.absolute(ts[0]) * nm.Tensor(p)), [x])


def _check_clamp(rng) -> float:
    x = _away_from(rng.normal(size=(4, 4)) * 2.0, [-1.5, 1.5])
    p = rng.normal(size=(4, 4))
    return check_scalar_fn(lambda ts: nm.sum_all(nm.clamp(ts[0], -1.5, 1.5) * nm.Tensor(p)), [x])


def _check_divide(rng) -> float:
    a = rng.normal(size=(3, 4))
    b = rng.uniform(0.5, 2.0, size=(3, 4)) * np.where(rng.random((3, 4)) > 0.5, 1, -1)
    p = rng.normal(size=(3, 4))
    return check_scalar_fn(lambda ts: nm.sum_all(nm.divide(ts[0], ts[1]) * nm.Tensor(p)),
                           [a, b])


def _check_min_max(rng) -> float:
    a = rng.normal(size=(3, 4))
    b = rng.normal(size=(3, 4))
    near = np.abs(a - b) < 1e-3
    b = np.where(near, b + 5e-3, b)
    p = rng.normal(size=(3, 4))
    q = rng.normal(size=(3, 4))

    def build(ts):
        return nm.sum_all(nm.minimum(ts[0], ts[1]) * nm.Tensor(p)
                          + nm.maximum(ts[0], ts[1]) * nm.Tensor(q))

    return check_scalar_fn(build, [a, b])


def _check_giou_pairs(rng) -> float:
    from .losses import giou2d_pairs

    pred = np.stack([rng.uniform(0, 0.4, 2), rng.uniform(0.5, 1.0, 2)],
                    axis=1).reshape(1, 4)
    pred = np.repeat(pred, 3, axis=0) + rng.uniform(-0.05, 0.05, (3, 4))
    target = pred + rng.uniform(0.01, 0.15, (3, 4))  # offsets avoid min/max ties
    proj = rng.normal(size=(3, 1))
    return check_scalar_fn(
        lambda ts: nm.sum_all(giou2d_pairs(ts[0], target) * nm.Tensor(proj)), [pred])


def _check_focal(rng) -> float:
    from .losses import focal_loss

    logits = rng.normal(size=(4, 3)) * 2.0
    onehot = np.zeros((4, 3))
    onehot[rng.integers(4), rng.integers(3)] = 1.0
    return check_scalar_fn(lambda ts: focal_loss(ts[0], onehot, 0.25, 2.0, 2.0),
                           [logits])


def _check_smooth_l1(rng) -> float:
    pred = _away_from(rng.normal(size=(3, 5)) * 2.0, [])
    target = rng.normal(size=(3, 5)) * 2.0
    d = pred - target
    pred = np.where(np.abs(np.abs(d) - 1.0) < 1e-3, pred + 5e-3, pred)
    return check_scalar_fn(lambda ts: nm.smooth_l1(ts[0], ts[1]), [pred, target])


def _check_weighted_row_smooth_l1(rng) -> float:
    pred = rng.normal(size=(4, 3)) * 2.0
    target = rng.normal(size=(4, 3)) * 2.0
    d = pred - target
    pred = np.where(np.abs(np.abs(d) - 1.0) < 1e-3, pred + 5e-3, pred)
    w = rng.random(size=(4,))
    return check_scalar_fn(lambda ts: nm.weighted_row_smooth_l1(ts[0], ts[1], w), [pred, target])


def _check_gaussian_kl(rng) -> float:
    mu = rng.normal(size=(3, 4))
    log_var = rng.normal(size=(3, 4))
    return check_scalar_fn(lambda ts: nm.gaussian_kl(ts[0], ts[1]), [mu, log_var])


def _check_gather_concat_narrow(rng) -> float:
    x = rng.normal(size=(5, 3))
    y = rng.normal(size=(2, 3))
    p = rng.normal(size=(4, 3))

    def build(ts):
        cat = nm.concat_rows([ts[0], ts[1]])
        g = nm.gather_rows(cat, [0, 2, 2, 6])
        return nm.sum_all(g * nm.Tensor(p))

    return check_scalar_fn(build, [x, y])


def _check_transpose_cols(rng) -> float:
    x = rng.normal(size=(3, 5))
    p = rng.normal(size=(2, 3))

    def build(ts):
        t = nm.transpose(nm.narrow_cols(ts[0], 1, 2))
        return nm.sum_all(t * nm.Tensor(p))

    return check_scalar_fn(build, [x])


def _check_masked_attention(rng) -> float:
    from .attention import AttentionMask, AttentionParams, masked_multihead_self_attention

    s, d, h = 5, 8, 2
    q = rng.normal(size=(s, d)) * 0.5
    allow = np.eye(s, dtype=bool) | (rng.random(size=(s, s)) > 0.4)
    mask = AttentionMask(allow)
    proj = rng.normal(size=(s, d))
    weights = [rng.normal(size=(d, d)) * 0.3 for _ in range(4)]
    biases = [rng.normal(size=(d,)) * 0.1 for _ in range(4)]

    def build(ts):
        ps = AttentionParams(wq=ts[0], bq=ts[1], wk=ts[2], bk=ts[3],
                             wv=ts[4], bv=ts[5], wo=ts[6], bo=ts[7])
        out, _ = masked_multihead_self_attention(ts[8], mask, ps, h)
        return nm.sum_all(out * nm.Tensor(proj))

    ordered = [weights[0], biases[0], weights[1], biases[1],
               weights[2], biases[2], weights[3], biases[3], q]
    return check_scalar_fn(build, ordered)


def _check_box_encoder(rng) -> float:
    from .geometry import AnchorBox6D
    from .vqd import VariationalQueryGenerator

    store = nm.ParameterStore(rng_seed=11)
    gen = VariationalQueryGenerator(store, num_classes=3, width=6)
    anchors = [AnchorBox6D(0.4, 0.5, 0.1, 0.12, 0.08, 0.2),
               AnchorBox6D(0.6, 0.3, 0.05, 0.1, 0.1, 0.1)]
    tuples = [(1, 3.5, 1.6, 1.5, 0.4, 11.0), (2, 0.8, 0.7, 1.8, -0.9, 7.0)]
    pm = rng.normal(size=(2, 6))
    pv = rng.normal(size=(2, 6))

    def loss_fn():
        dist = gen.encode(anchors, tuples)
        return nm.sum_all(dist.mu * nm.Tensor(pm)) + nm.sum_all(dist.log_var * nm.Tensor(pv))

    return check_params_fn(loss_fn, store)


def _check_feature_encoder(rng) -> float:
    from .model import DetectorConfig, Detector

    cfg = DetectorConfig(groups=1, queries_per_group=2, noisy_groups=0, width=8,
                         heads=2, layers=1, feature_size=3, num_classes=2)
    det = Detector(cfg, seed=13)
    grid = rng.normal(size=(3, 3, det.input_channels))
    proj = rng.normal(size=(9, 8))

    def loss_fn():
        mem = det.encode_features(grid)
        return nm.sum_all(mem * nm.Tensor(proj))

    return check_params_fn(loss_fn, det.store)


def _check_end_to_end(rng) -> float:
    """Full training loss of a minimal detector against finite differences.

    Detached and discrete inner decisions (assignments, distillation teacher
    values, IoU weights, reparameterization noise) are captured once and
    replayed on every probe, matching what the tape differentiates.
    """
    from .model import DetectorConfig, Detector, training_loss
    from .scenes import SceneConfig, generate_scene
    from .geometry import NoiseConfig
    from .vqd import DenoisingConfig

    cfg = DetectorConfig(groups=2, queries_per_group=2, noisy_groups=1, width=8,
                         heads=2, layers=2, feature_size=4, num_classes=2)
    scene_cfg = SceneConfig(feature_size=4, num_classes=2, max_objects=1)
    scene = generate_scene(np.random.default_rng(3), scene_cfg, scene_id="chk", seed=3)
    det = Detector(cfg, seed=5)
    dn_cfg = DenoisingConfig(beta=0.1, mode="variational")
    noisy = det.draw_noisy_queries(scene, NoiseConfig(), np.random.default_rng(17))

    first = training_loss(det, scene, noisy, dn_cfg, beta_scale=1.0)
    replay = first.decisions

    def loss_fn():
        return training_loss(det, scene, noisy, dn_cfg, beta_scale=1.0, replay=replay).total

    return check_params_fn(loss_fn, det.store)


# name -> (check fn, tolerance, number of random repeats)
REGISTRY: dict[str, tuple[Callable, float, int]] = {
    "matmul": (_check_matmul, OP_TOLERANCE, 50),
    "linear": (_check_linear, OP_TOLERANCE, 50),
    "softmax_rows": (_check_softmax_rows, OP_TOLERANCE, 50),
    "layer_norm": (_check_layer_norm, OP_TOLERANCE, 50),
    "relu": (_check_relu, OP_TOLERANCE, 50),
    "sigmoid": (_check_sigmoid, OP_TOLERANCE, 50),
    "softplus": (_check_softplus, OP_TOLERANCE, 50),
    "exp_log": (_check_exp_log, OP_TOLERANCE, 50),
    "absolute": (_check_absolute, OP_TOLERANCE, 50),
    "clamp": (_check_clamp, OP_TOLERANCE, 50),
    "divide": (_check_divide, OP_TOLERANCE, 50),
    "minimum_maximum": (_check_min_max, OP_TOLERANCE, 50),
    "smooth_l1": (_check_smooth_l1, OP_TOLERANCE, 50),
    "weighted_row_smooth_l1": (_check_weighted_row_smooth_l1, OP_TOLERANCE, 50),
    "gaussian_kl": (_check_gaussian_kl, OP_TOLERANCE, 50),
    "giou2d_pairs": (_check_giou_pairs, OP_TOLERANCE, 50),
    "sigmoid_focal_loss": (_check_focal, OP_TOLERANCE, 50),
    "gather_concat_narrow": (_check_gather_concat_narrow, OP_TOLERANCE, 50),
    "transpose_narrow_cols": (_check_transpose_cols, OP_TOLERANCE, 50),
    "masked_multihead_attention": (_check_masked_attention, OP_TOLERANCE, 5),
    "noisy_box_encoder": (_check_box_encoder, OP_TOLERANCE, 5),
    "feature_encoder": (_check_feature_encoder, OP_TOLERANCE, 3),
    "end_to_end_minimal_model": (_check_end_to_end, END_TO_END_TOLERANCE, 1),
}


def run_suite(seed: int = 0, perturb: bool = False) -> list[tuple[str, float, float, bool]]:
    """Run every registered check; returns (name, max_err, tolerance, ok) rows.

    ``perturb`` is a negative-control hook: it inflates every measured error
    so the suite must fail, proving the pass/fail wiring is live.
    """
    rows = []
    for name, (fn, tol, repeats) in REGISTRY.items():
        rng = np.random.default_rng(seed + hash(name) % 100003)
        worst = 0.0
        for _ in range(repeats):
            worst = max(worst, fn(rng))
        if perturb:
            worst += 10.0 * tol
        rows.append((name, worst, tol, worst <= tol))
    return rows
