"""Plain SGD reference trainer.

Exists only to produce desk-scale source nets for conversion experiments:
softmax cross-entropy, hand-rolled backprop, no momentum, no augmentation.
Fixed seeds give bit-identical parameters on repeat runs.
"""

from __future__ import annotations

import numpy as np

from .nn import ModelGraph, Tensor, _col2im, _im2col, softmax


class TrainingDivergedError(RuntimeError):
    """Raised when the loss stops being finite."""


def cross_entropy(logits: Tensor, labels: np.ndarray) -> float:
    shifted = logits - logits.max(axis=1, keepdims=True)
    logz = np.log(np.exp(shifted).sum(axis=1))
    picked = shifted[np.arange(len(labels)), labels]
    return float(np.mean(logz - picked))


def _forward_cached(model: ModelGraph, x: Tensor):
    cache = []
    for layer in model.layers:
        entry = {"x": x}
        if layer.kind == "conv2d":
            cols, out_hw = _im2col(x, layer.kernel, layer.stride, layer.padding)
            entry["cols"] = cols
            entry["out_hw"] = out_hw
            w2 = layer.weight.reshape(layer.out_channels, -1)
            y = np.einsum("oc,ncl->nol", w2, cols, optimize=True)
            x = y.reshape(x.shape[0], layer.out_channels, *out_hw) + layer.bias.reshape(1, -1, 1, 1)
        elif layer.kind == "dense":
            x = x @ layer.weight.T + layer.bias
        elif layer.kind == "avgpool2d":
            kh, kw = layer.kernel
            sh, sw = layer.stride
            n, c, h, w = x.shape
            ho = (h - kh) // sh + 1
            wo = (w - kw) // sw + 1
            acc = np.zeros((n, c, ho, wo), dtype=x.dtype)
            for i in range(kh):
                for j in range(kw):
                    acc += x[:, :, i : i + sh * ho : sh, j : j + sw * wo : sw]
            x = acc / (kh * kw)
        elif layer.kind == "flatten":
            x = x.reshape(x.shape[0], -1)
        elif layer.kind == "relu":
            x = np.maximum(x, 0)
        entry["y"] = x
        cache.append(entry)
    return x, cache


def _backward(model: ModelGraph, cache, dlogits: Tensor):
    grads: dict[int, tuple[Tensor, Tensor]] = {}
    dy = dlogits
    for i in range(len(model.layers) - 1, -1, -1):
        layer = model.layers[i]
        entry = cache[i]
        x = entry["x"]
        if layer.kind == "dense":
            grads[i] = (dy.T @ x, dy.sum(axis=0))
            dy = dy @ layer.weight
        elif layer.kind == "conv2d":
            n = x.shape[0]
            ho, wo = entry["out_hw"]
            dflat = dy.reshape(n, layer.out_channels, ho * wo)
            dw = np.einsum("nol,ncl->oc", dflat, entry["cols"], optimize=True)
            grads[i] = (
                dw.reshape(layer.weight.shape),
                dy.sum(axis=(0, 2, 3)),
            )
            w2 = layer.weight.reshape(layer.out_channels, -1)
            dcols = np.einsum("oc,nol->ncl", w2, dflat, optimize=True)
            dy = _col2im(dcols, x.shape, layer.kernel, layer.stride, layer.padding)
        elif layer.kind == "avgpool2d":
            kh, kw = layer.kernel
            sh, sw = layer.stride
            n, c, h, w = x.shape
            ho, wo = dy.shape[2], dy.shape[3]
            dx = np.zeros_like(x)
            spread = dy / (kh * kw)
            for a in range(kh):
                for b in range(kw):
                    dx[:, :, a : a + sh * ho : sh, b : b + sw * wo : sw] += spread
            dy = dx
        elif layer.kind == "flatten":
            dy = dy.reshape(x.shape)
        elif layer.kind == "relu":
            dy = dy * (entry["y"] > 0)
    return grads


def accuracy(model: ModelGraph, images, labels) -> float:
    from .nn import forward

    logits = forward(model, images)
    return float(np.mean(np.argmax(logits, axis=1) == np.asarray(labels)))


def train_reference(
    model: ModelGraph,
    dataset,
    epochs: int,
    lr: float,
    seed: int,
    batch_size: int = 32,
) -> ModelGraph:
    """Train a copy of ``model`` on ``dataset`` (needs .images and .labels).

    Plain mini-batch SGD with a per-epoch reshuffle drawn from ``seed``. A
    non-finite loss aborts with diagnostics rather than running to garbage.
    """
    model.validate()
    trained = model.clone()
    images = np.asarray(dataset.images, dtype=np.float32)
    labels = np.asarray(dataset.labels, dtype=np.int64)
    n = len(labels)
    rng = np.random.default_rng(seed)
    for epoch in range(int(epochs)):
        order = rng.permutation(n)
        for start in range(0, n, batch_size):
            pick = order[start : start + batch_size]
            xb, yb = images[pick], labels[pick]
            logits, cache = _forward_cached(trained, xb)
            loss = cross_entropy(logits, yb)
            if not np.isfinite(loss):
                raise TrainingDivergedError(
                    f"non-finite loss {loss} at epoch {epoch}, batch offset {start}"
                )
            probs = softmax(logits, axis=1)
            probs[np.arange(len(yb)), yb] -= 1.0
            dlogits = (probs / len(yb)).astype(np.float32)
            grads = _backward(trained, cache, dlogits)
            for idx, (dw, db) in grads.items():
                layer = trained.layers[idx]
                layer.weight -= np.float32(lr) * dw.astype(np.float32)
                layer.bias -= np.float32(lr) * db.astype(np.float32)
    return trained
