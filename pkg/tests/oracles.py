"""Independent reference implementations used as test oracles.

Everything here is written as plain loops straight from the defining
formulas, deliberately sharing no code with the package under test.
"""

import numpy as np


def rel_error(approx, exact, floor=1e-8):
    approx = np.asarray(approx, dtype=np.float64)
    exact = np.asarray(exact, dtype=np.float64)
    scale = max(np.abs(exact).max() if exact.size else 0.0, floor)
    return float(np.abs(approx - exact).max() / scale)


def central_difference(f, x, h=1e-5):
    """Central finite-difference gradient of scalar f at array x."""
    x = np.asarray(x, dtype=np.float64)
    grad = np.zeros_like(x)
    it = np.nditer(x, flags=["multi_index"])
    while not it.finished:
        idx = it.multi_index
        old = x[idx]
        x[idx] = old + h
        up = f(x)
        x[idx] = old - h
        down = f(x)
        x[idx] = old
        grad[idx] = (up - down) / (2.0 * h)
        it.iternext()
    return grad


def cross_entropy_reference(probs, labels):
    """Mean of per-sample -log p_y, accumulated one sample at a time."""
    total = 0.0
    for i, y in enumerate(labels):
        total += -np.log(probs[i][int(y)])
    return total / len(labels)


def supcon_reference(z, labels, tau):
    """Unweighted supervised contrastive loss, direct double loop."""
    n = len(labels)
    total = 0.0
    for i in range(n):
        positives = [p for p in range(n) if p != i and labels[p] == labels[i]]
        if not positives:
            continue
        inner = 0.0
        for p in positives:
            num = np.exp(float(np.dot(z[i], z[p])) / tau)
            den = 0.0
            for k in range(n):
                if k != i:
                    den += np.exp(float(np.dot(z[i], z[k])) / tau)
            inner += np.log(num / den)
        total += -inner / len(positives)
    return total


def xdom_reference(z, labels, domains, tau, a, b, alpha_mode="numerator_scale"):
    """Pair-weighted contrastive loss, direct double loop."""
    n = len(labels)
    total = 0.0
    for i in range(n):
        positives = [p for p in range(n) if p != i and labels[p] == labels[i]]
        if not positives:
            continue
        inner = 0.0
        for p in positives:
            alpha = a if domains[p] != domains[i] else 1.0
            sim = float(np.dot(z[i], z[p]))
            if alpha_mode == "numerator_scale":
                num = alpha * np.exp(sim / tau)
            else:
                num = np.exp(alpha * sim / tau)
            den = 0.0
            for k in range(n):
                if k == i:
                    continue
                beta = b if (domains[k] == domains[i] and labels[k] != labels[i]) else 1.0
                den += beta * np.exp(float(np.dot(z[i], z[k])) / tau)
            inner += np.log(num / den)
        total += -inner / len(positives)
    return total


def fair_reference(probs, labels, linked_mask):
    """|mean CE over linked samples - mean CE over the rest|; 0 when a
    group is empty."""
    ce_linked, ce_shared = [], []
    for i, y in enumerate(labels):
        ce = -np.log(probs[i][int(y)])
        (ce_linked if linked_mask[i] else ce_shared).append(ce)
    if not ce_linked or not ce_shared:
        return 0.0
    return abs(sum(ce_linked) / len(ce_linked) - sum(ce_shared) / len(ce_shared))


def softmax_reference(logits):
    out = np.empty_like(np.asarray(logits, dtype=np.float64))
    for i, row in enumerate(logits):
        shifted = row - max(row)
        e = np.exp(shifted)
        out[i] = e / e.sum()
    return out


def random_unit_rows(rng, n, d):
    z = rng.normal(size=(n, d))
    norms = np.sqrt((z * z).sum(axis=1, keepdims=True))
    while (norms <= 1e-8).any():
        z = rng.normal(size=(n, d))
        norms = np.sqrt((z * z).sum(axis=1, keepdims=True))
    return z / norms
