"""Binary cross-entropy, Adam, and a central-difference gradient checker."""

from dataclasses import dataclass, field

import numpy as np

from platenet.errors import ShapeError

BCE_EPSILON = 1e-7


@dataclass
class LossValue:
    loss: float
    grad: np.ndarray  # d(mean loss)/d(prediction), same shape as the predictions


def _check_labels(labels, n):
    labels = np.asarray(labels).reshape(-1)
    if labels.shape[0] != n:
        raise ShapeError(f"{n} predictions but {labels.shape[0]} labels")
    if not np.all((labels == 0) | (labels == 1)):
        raise ValueError("labels must be 0 or 1")
    return labels


def bce(predictions, labels, epsilon=BCE_EPSILON):
    """Mean binary cross-entropy of ``(N, 1)`` probabilities against ``(N,)`` labels.

    Probabilities are clamped to ``[epsilon, 1 - epsilon]``; the gradient is zero
    where the clamp is active.
    """
    p = np.asarray(predictions)
    n = p.shape[0]
    if n < 1:
        raise ValueError("bce needs at least one example")
    y = _check_labels(labels, n).astype(np.float64).reshape(-1, *([1] * (p.ndim - 1)))
    p64 = p.astype(np.float64)
    p_hat = np.clip(p64, epsilon, 1 - epsilon)
    per_example = -(y * np.log(p_hat) + (1 - y) * np.log(1 - p_hat))
    inside = (p64 > epsilon) & (p64 < 1 - epsilon)
    grad = np.where(inside, (p_hat - y) / (p_hat * (1 - p_hat)) / n, 0.0)
    return LossValue(float(per_example.mean()), grad.astype(p.dtype))


def bce_logits_grad(probabilities, labels):
    """Gradient of mean BCE with respect to the pre-sigmoid logits: ``(p - y) / N``.

    Unlike chaining :func:`bce` through the sigmoid derivative, this stays
    informative when ``p`` saturates at 0 or 1 in float32.
    """
    p = np.asarray(probabilities)
    n = p.shape[0]
    y = _check_labels(labels, n).astype(p.dtype).reshape(-1, *([1] * (p.ndim - 1)))
    return (p - y) / p.dtype.type(n)


@dataclass
class AdamState:
    learning_rate: float = 0.001
    beta1: float = 0.9
    beta2: float = 0.999
    epsilon: float = 1e-7
    t: int = 0
    m: list = field(default_factory=list)
    v: list = field(default_factory=list)


def adam_update(state, params, grads):
    """One Adam step over parallel lists of parameter and gradient arrays.

    Parameters are updated in place; ``state.t`` advances by exactly one.
    """
    if len(params) != len(grads):
        raise ShapeError(f"{len(params)} parameters but {len(grads)} gradients")
    for p, g in zip(params, grads):
        if p.shape != g.shape:
            raise ShapeError(f"parameter shape {p.shape} does not match gradient shape {g.shape}")
    if not state.m:
        state.m = [np.zeros_like(p) for p in params]
        state.v = [np.zeros_like(p) for p in params]
    elif len(state.m) != len(params):
        raise ShapeError("parameter list changed between Adam updates")
    state.t += 1
    b1, b2 = state.beta1, state.beta2
    c1 = 1 - b1 ** state.t
    c2 = 1 - b2 ** state.t
    for p, g, m, v in zip(params, grads, state.m, state.v):
        m *= b1
        m += (1 - b1) * g
        v *= b2
        v += (1 - b2) * g * g
        m_hat = m / c1
        v_hat = v / c2
        p -= (state.learning_rate * m_hat / (np.sqrt(v_hat) + state.epsilon)).astype(p.dtype)
    return params, state


class Adam:
    """Convenience wrapper binding an :class:`AdamState` to a model's parameters."""

    def __init__(self, model, learning_rate=0.001, beta1=0.9, beta2=0.999, epsilon=1e-7):
        self.model = model
        self.state = AdamState(learning_rate, beta1, beta2, epsilon)

    @property
    def t(self):
        return self.state.t

    def step(self):
        slots = list(self.model.parameters())
        params = [arr for _, _, arr in slots]
        grads = [layer.grads[key] for layer, key, _ in slots]
        adam_update(self.state, params, grads)


# ---------------------------------------------------------------- gradient check


@dataclass
class GradCheckReport:
    max_rel_error: float
    checked: int
    skipped: int
    failures: list  # (tensor label, flat index, analytic, numeric, rel error)
    tolerance: float

    @property
    def passed(self):
        return not self.failures


def relative_error(a, n, floor=1e-6):
    return abs(a - n) / max(abs(a), abs(n), floor)


def grad_check(loss_fn, params, analytic, tolerance=1e-2, h=1e-3, labels=None, indices=None,
               kink_tolerance=None):
    """Compare analytic gradients with central differences ``(f(p+h) - f(p-h)) / 2h``.

    ``loss_fn()`` evaluates the scalar loss for the current contents of the
    arrays in ``params``, which are perturbed in place and restored.
    ``analytic`` is a parallel list of gradient arrays. ``indices`` optionally
    limits each tensor to a subset of flat positions.

    With ``kink_tolerance`` set, a parameter whose one-sided differences
    disagree by more than that relative amount is treated as sitting on a
    non-differentiable point (ReLU zero, max-pool tie) and counted as skipped.
    The same happens when the central difference at ``h`` disagrees with the
    one at ``h / 2``, which catches kinks on both sides of the parameter.
    """
    labels = labels or [f"param{i}" for i in range(len(params))]
    failures, worst, checked, skipped = [], 0.0, 0, 0
    for ti, (p, a) in enumerate(zip(params, analytic)):
        flat, a_flat = p.reshape(-1), np.asarray(a).reshape(-1)
        positions = range(flat.size) if indices is None else indices[ti]
        for idx in positions:
            orig = flat[idx]
            f0 = loss_fn() if kink_tolerance is not None else None
            flat[idx] = orig + h
            fp = loss_fn()
            flat[idx] = orig - h
            fm = loss_fn()
            flat[idx] = orig
            numeric = (fp - fm) / (2 * h)
            if kink_tolerance is not None:
                flat[idx] = orig + h / 2
                fph = loss_fn()
                flat[idx] = orig - h / 2
                fmh = loss_fn()
                flat[idx] = orig
                right, left = (fp - f0) / h, (f0 - fm) / h
                if (relative_error(right, left) > kink_tolerance
                        or relative_error(numeric, (fph - fmh) / h) > kink_tolerance):
                    skipped += 1
                    continue
            err = relative_error(float(a_flat[idx]), numeric)
            checked += 1
            worst = max(worst, err)
            if err > tolerance:
                failures.append((labels[ti], int(idx), float(a_flat[idx]), float(numeric), err))
    return GradCheckReport(worst, checked, skipped, failures, tolerance)


def grad_check_model(model, x, labels=None, tolerance=1e-2, h=1e-3, numeric_dtype=None,
                     max_per_tensor=None, kink_tolerance=None, seed=0):
    """Gradient-check every parameter of ``model`` on input ``x``.

    Dropout is inactive (inference path) so the loss is deterministic. With
    ``labels`` the loss is mean BCE and the backward pass uses the fused
    sigmoid gradient; otherwise the loss is a fixed random projection
    ``sum(output * R)``. ``numeric_dtype`` evaluates the finite differences
    on a copy of the model cast to that dtype, leaving the analytic pass in
    the model's own precision. ``max_per_tensor`` samples that many positions
    per tensor instead of checking all of them.
    """
    rng = np.random.default_rng(seed)
    out = model.forward(x, training=False)
    if labels is not None:
        from_logits = model.layers[-1].activation == "sigmoid"
        grad = bce_logits_grad(out, labels) if from_logits else bce(out, labels).grad
        model.backward(grad, from_logits=from_logits)
    else:
        projection = rng.uniform(-1, 1, size=out.shape).astype(out.dtype)
        model.backward(projection)
    slots = list(model.parameters())
    analytic = [layer.grads[key].copy() for layer, key, _ in slots]
    names = [f"{layer.name}.{key}" for layer, key, _ in slots]

    target = model.astype(numeric_dtype) if numeric_dtype is not None else model
    xn = x.astype(numeric_dtype) if numeric_dtype is not None else x
    params = [arr for _, _, arr in target.parameters()]
    if labels is not None:
        def loss_fn():
            return bce(target.forward(xn, training=False), labels).loss
    else:
        proj = projection.astype(np.float64)

        def loss_fn():
            return float(np.sum(target.forward(xn, training=False).astype(np.float64) * proj))

    indices = None
    if max_per_tensor is not None:
        indices = [np.sort(rng.choice(p.size, size=min(p.size, max_per_tensor), replace=False))
                   for p in params]
    return grad_check(loss_fn, params, analytic, tolerance=tolerance, h=h, labels=names,
                      indices=indices, kink_tolerance=kink_tolerance)
