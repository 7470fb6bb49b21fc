"""Central finite-difference check of every trainable parameter."""

import numpy as np

from stocktl import network as nn


def numeric_grad(model, name, loss_fn, step=1e-5):
    arr = model.arrays()[name]
    out = np.zeros_like(arr)
    it = np.nditer(arr, flags=["multi_index"])
    for _ in it:
        i = it.multi_index
        old = arr[i]
        arr[i] = old + step
        up = loss_fn()
        arr[i] = old - step
        down = loss_fn()
        arr[i] = old
        out[i] = (up - down) / (2 * step)
    return out


def max_relative_error(a, b):
    return float(np.max(np.abs(a - b) / np.maximum(np.abs(a) + np.abs(b), 1e-8)))


def toy_case(n_classes, n_hidden, frozen, seed=0, H=4, T=12, batch=6):
    rng = np.random.default_rng(seed)
    source = nn.init_params(H, 2, seed=seed)
    if n_hidden is None:
        model = source
        if n_classes != 2:
            model = nn.ModelState(source.encoder, nn._init_head(rng, H, n_classes, None))
    else:
        model = nn.transfer(source, n_hidden, seed + 1, n_classes)
    model.encoder_frozen = frozen
    windows = rng.normal(0, 1, (batch, T))
    labels = rng.integers(0, n_classes, batch)
    returns = rng.normal(0, 0.02, batch)
    return model, windows, labels, returns


def check(model, windows, labels, returns, loss_kind, alpha=3.0):
    """Return ``(max_rel_error, grads)`` over the trainable parameters."""
    grads = nn.backward(model, labels, returns, loss_kind, alpha, windows=windows)

    def loss_fn():
        return nn.batch_loss(model, labels, returns, loss_kind, alpha, windows=windows,
                             with_grad=False).loss

    worst = 0.0
    for name in model.trainable_names():
        num = numeric_grad(model, name, loss_fn)
        worst = max(worst, max_relative_error(grads[name], num))
    return worst, grads


CASES = [
    (n_classes, n_hidden, frozen, loss)
    for n_classes, n_hidden in ((2, None), (3, 5))
    for frozen in (False, True)
    for loss in ("CE", "R+CE")
]


def run_suite():
    worst = 0.0
    for i, (n_classes, n_hidden, frozen, loss) in enumerate(CASES):
        model, w, y, r = toy_case(n_classes, n_hidden, frozen, seed=i)
        err, grads = check(model, w, y, r, loss)
        if frozen:
            assert not any(k.startswith("lstm.") for k in grads)
        worst = max(worst, err)
    return worst
