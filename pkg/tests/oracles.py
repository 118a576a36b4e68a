"""Independent reference implementations used as test oracles."""

import hashlib

import numpy as np


def kappa_bruteforce(y, p, n_classes=4):
    """Cohen's kappa by explicit counting loops."""
    y = [int(v) for v in y]
    p = [int(v) for v in p]
    pairs = [(a, b) for a, b in zip(y, p) if a != 255]
    n = len(pairs)
    agree = 0
    count_y = [0] * n_classes
    count_p = [0] * n_classes
    for a, b in pairs:
        if a == b:
            agree += 1
        count_y[a] += 1
        count_p[b] += 1
    q = agree / n
    qe = sum(count_y[c] * count_p[c] for c in range(n_classes)) / (n * n)
    if qe == 1:
        return q, 1.0
    return q, (q - qe) / (1 - qe)


def conv1d_loops(x, w, b, dilation=1):
    """Same-padded conv over (T, Cin) with kernel (k, Cin, Cout), explicit loops."""
    t_len, c_in = x.shape
    k, _, c_out = w.shape
    y = np.zeros((t_len, c_out))
    for t in range(t_len):
        for o in range(c_out):
            acc = b[o]
            for j in range(k):
                src = t + (j - (k - 1) // 2) * dilation
                if 0 <= src < t_len:
                    for c in range(c_in):
                        acc += w[j, c, o] * x[src, c]
            y[t, o] = acc
    return y


def _kink_signature(tape):
    h = hashlib.sha1()
    for key in sorted(tape.cache):
        for v in tape.cache[key]:
            if isinstance(v, np.ndarray) and v.dtype == bool:
                h.update(v.tobytes())
    return h.digest()


def finite_difference_check(model, x, demo, weights_r, seed=5, eps=1e-5, min_eps=1e-9):
    """Compare analytic gradients of ``sum(probs * R)`` with central differences.

    A finite-difference step that moves any LeakyReLU or max-pool decision
    (recorded as boolean masks on the tape) straddles a kink, where the
    derivative is one-sided. Such steps are retried with a 10x smaller epsilon
    so the difference quotient stays on one linear piece.

    Returns ``(max_rel_error, worst_name, n_retries, n_checked)``.
    """

    def run():
        probs, tape = model.forward(x, demo, mode="train", seed=seed)
        return float(np.sum(probs * weights_r)), tape

    _, tape = run()
    base_sig = _kink_signature(tape)
    probs, tape = model.forward(x, demo, mode="train", seed=seed)
    grads = model.backward(tape, weights_r)
    worst, worst_name, retries, checked = 0.0, None, 0, 0
    for name, arr in model.weights.items():
        flat = arr.reshape(-1)
        g = grads[name].reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            h = eps
            while True:
                flat[i] = orig + h
                fp, tp = run()
                sp = _kink_signature(tp)
                flat[i] = orig - h
                fm, tm = run()
                sm = _kink_signature(tm)
                flat[i] = orig
                if (sp == base_sig and sm == base_sig) or h / 10 < min_eps:
                    break
                h /= 10
                retries += 1
            num = (fp - fm) / (2 * h)
            rel = abs(num - g[i]) / max(abs(num), abs(g[i]), 1e-8)
            checked += 1
            if rel > worst:
                worst, worst_name = rel, name
    return worst, worst_name, retries, checked
