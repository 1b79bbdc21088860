"""Model-level finite-difference oracle shared by unit and acceptance tests.

Perturbs the model's persistent buffers in place (restoring them afterwards)
and re-runs the full forward + composite loss, so the numeric gradient goes
through exactly the code path under test. Expert selection is a hard
decision, so instances where a perturbation could flip a selection boundary
are detected via the cumulative-mass margin and reported by
`selection_margin` for the caller to filter on.
"""

import numpy as np

from moelab.autodiff import Graph
from moelab.losses import total_loss


def model_loss(model, tokens, threshold, weights):
    g = Graph()
    res = model.forward(g, tokens, threshold=threshold)
    loss, _ = total_loss(g, res.logits, tokens.reshape(-1), res.decisions,
                         res.probs, res.raw_logits, weights)
    return g, res, loss


def selection_margin(model, tokens, threshold) -> float:
    """Smallest |cumulative mass - threshold| over all tokens, layers, prefixes."""
    g = Graph()
    res = model.forward(g, tokens, threshold=threshold)
    margin = np.inf
    for probs_t in res.probs:
        srt = np.sort(probs_t.values, axis=1)[:, ::-1]
        margin = min(margin, np.abs(np.cumsum(srt, axis=1) - threshold).min())
    return float(margin)


def model_fd_check(model, tokens, threshold, weights, param_names, h=1e-5) -> float:
    """Max relative error between backward gradients and central differences
    over every entry of the named parameters."""
    buffers = model.parameters()
    g, res, loss = model_loss(model, tokens, threshold, weights)
    g.backward(loss)
    analytic = {name: g.grad(res.params[name]) for name in param_names}

    def loss_value() -> float:
        _, _, l = model_loss(model, tokens, threshold, weights)
        return float(l.values)

    worst = 0.0
    for name in param_names:
        buf = buffers[name]
        for j in range(buf.size):
            saved = buf.flat[j]
            buf.flat[j] = saved + h
            f_plus = loss_value()
            buf.flat[j] = saved - h
            f_minus = loss_value()
            buf.flat[j] = saved
            numeric = (f_plus - f_minus) / (2.0 * h)
            a = float(analytic[name].flat[j])
            rel = abs(a - numeric) / max(abs(a), abs(numeric), 1e-8)
            worst = max(worst, rel)
    return worst
