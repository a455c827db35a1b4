"""Independent reference computations used by the tests.

Nothing here calls the backprop path it is used to check.
"""

import numpy as np


def mlp_loss(params, dims, x, y, w, shift=None):
    """Summed CE loss of a ReLU MLP written out by hand; ``shift`` is added to the features."""
    a = x
    n_layers = len(dims) - 1
    for layer in range(n_layers):
        z = a @ params[2 * layer].T + params[2 * layer + 1]
        a = z if layer == n_layers - 1 else np.maximum(z, 0.0)
    if shift is not None:
        a = a + shift
    logits = a @ w
    m = logits.max(axis=1, keepdims=True)
    lse = m[:, 0] + np.log(np.exp(logits - m).sum(axis=1))
    return float(np.sum(lse - logits[np.arange(len(y)), y]))


def central_difference(fn, params, eps=1e-5):
    """Gradient of ``fn(params)`` w.r.t. every entry of every array in ``params``."""
    grads = []
    for p in params:
        g = np.zeros_like(p)
        for idx in np.ndindex(p.shape):
            orig = p[idx]
            p[idx] = orig + eps
            up = fn(params)
            p[idx] = orig - eps
            down = fn(params)
            p[idx] = orig
            g[idx] = (up - down) / (2 * eps)
        grads.append(g)
    return grads


def relative_error(analytic, numeric, floor=1e-8):
    """Largest entrywise ``|a - n| / max(|a|, |n|)``; entries where both sit below ``floor`` are skipped."""
    a = np.asarray(analytic, dtype=np.float64)
    n = np.asarray(numeric, dtype=np.float64)
    scale = np.maximum(np.abs(a), np.abs(n))
    mask = scale > floor
    if not mask.any():
        return float(np.max(np.abs(a - n), initial=0.0))
    return float(np.max(np.abs(a - n)[mask] / scale[mask]))


def nearest_center_accuracy(x, y, centers):
    correct = 0
    for xi, yi in zip(x, y):
        best, best_d = 0, np.inf
        for c, center in enumerate(centers):
            d = float(np.sum((xi - center) ** 2))
            if d < best_d:
                best, best_d = c, d
        correct += best == yi
    return correct / len(y)


def nearest_mean_agreement(features, labels, weights):
    """Loop-based nearest-class-mean vs argmax agreement."""
    classes = sorted(set(int(v) for v in labels))
    means = {c: np.mean([f for f, l in zip(features, labels) if l == c], axis=0) for c in classes}
    agree = 0
    for f in features:
        ncm = min(classes, key=lambda c: (float(np.sum((f - means[c]) ** 2)), c))
        scores = [float(f @ weights[:, c]) for c in range(weights.shape[1])]
        agree += ncm == int(np.argmax(scores))
    return agree / len(features)


def centralized_train(model_params, dims, x, y, w, order_rng, epochs, batch_size, lr, momentum, weight_decay):
    """Plain minibatch heavy-ball SGD on one dataset using only forward/backward.

    Buffers start at zero.  Returns the parameter list.
    """
    from fedetf.nn import MlpModel, backward, ce_loss_and_grad, forward

    params = [p.copy() for p in model_params]
    bufs = [np.zeros_like(p) for p in params]
    n = len(y)
    idx = np.arange(n)
    for _ in range(epochs):
        order = idx[order_rng.permutation(n)]
        for start in range(0, n, batch_size):
            chosen = order[start:start + batch_size]
            model = MlpModel(dims, tuple(params[0::2]), tuple(params[1::2]))
            _, grad_h = ce_loss_and_grad(forward(model, x[chosen]), y[chosen], w)
            grads = backward(model, x[chosen], grad_h).parameters()
            for i, g in enumerate(grads):
                bufs[i] = momentum * bufs[i] + (g + weight_decay * params[i])
                params[i] = params[i] - lr * bufs[i]
    return params
