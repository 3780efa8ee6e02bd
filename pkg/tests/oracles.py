"""Independent reference implementations used to check the library.

Everything here is deliberately written with plain Python loops or direct
numpy formulas, sharing no code with the package paths under test.
"""

import math

import numpy as np


def sigmoid(x):
    return 1.0 / (1.0 + np.exp(-x))


def scalar_lanet(x, w1, b1, w2, b2):
    """Element-by-element LANet recomputation.

    Args:
        x: (B, H, W, C) array.
        w1: (C_red, C, 1, 1) first 1x1 conv weights, b1: (C_red,) or None.
        w2: (1, C_red, 1, 1) second conv weights, b2: (1,) or None.

    Returns:
        (weighted output (B,H,W,C), attention (B,H,W,1))
    """
    batch, height, width, channels = x.shape
    c_red = w1.shape[0]
    out = np.zeros_like(x)
    att = np.zeros((batch, height, width, 1))
    for b in range(batch):
        for i in range(height):
            for j in range(width):
                pixel = x[b, i, j, :]
                hidden = np.zeros(c_red)
                for r in range(c_red):
                    acc = 0.0 if b1 is None else b1[r]
                    for c in range(channels):
                        acc += w1[r, c, 0, 0] * pixel[c]
                    hidden[r] = max(acc, 0.0)
                score = 0.0 if b2 is None else b2[0]
                for r in range(c_red):
                    score += w2[0, r, 0, 0] * hidden[r]
                a = 1.0 / (1.0 + math.exp(-score))
                att[b, i, j, 0] = a
                out[b, i, j, :] = a * pixel
    return out, att


def scalar_senet(x, w1, b1, w2, b2):
    """Element-by-element SENet recomputation.

    Args:
        x: (B, H, W, C); w1: (C_red, C), w2: (C, C_red) FC weights.

    Returns:
        (weighted output (B,H,W,C), attention (B,1,1,C))
    """
    batch, height, width, channels = x.shape
    c_red = w1.shape[0]
    out = np.zeros_like(x)
    att = np.zeros((batch, 1, 1, channels))
    for b in range(batch):
        pooled = np.zeros(channels)
        for c in range(channels):
            acc = 0.0
            for i in range(height):
                for j in range(width):
                    acc += x[b, i, j, c]
            pooled[c] = acc / (height * width)
        hidden = np.zeros(c_red)
        for r in range(c_red):
            acc = 0.0 if b1 is None else b1[r]
            for c in range(channels):
                acc += w1[r, c] * pooled[c]
            hidden[r] = max(acc, 0.0)
        for c in range(channels):
            acc = 0.0 if b2 is None else b2[c]
            for r in range(c_red):
                acc += w2[c, r] * hidden[r]
            att[b, 0, 0, c] = 1.0 / (1.0 + math.exp(-acc))
        for i in range(height):
            for j in range(width):
                for c in range(channels):
                    out[b, i, j, c] = att[b, 0, 0, c] * x[b, i, j, c]
    return out, att


def scalar_conv2d(x, w, b, stride, padding):
    """Loop convolution on a (B, H, W, C_in) array with (C_out, C_in, k, k) weights."""
    batch, height, width, c_in = x.shape
    c_out, _, k, _ = w.shape
    h_out = (height + 2 * padding - k) // stride + 1
    w_out = (width + 2 * padding - k) // stride + 1
    out = np.zeros((batch, h_out, w_out, c_out))
    for bi in range(batch):
        for oi in range(h_out):
            for oj in range(w_out):
                for oc in range(c_out):
                    acc = 0.0 if b is None else b[oc]
                    for ki in range(k):
                        for kj in range(k):
                            ii = oi * stride + ki - padding
                            jj = oj * stride + kj - padding
                            if 0 <= ii < height and 0 <= jj < width:
                                for ic in range(c_in):
                                    acc += w[oc, ic, ki, kj] * x[bi, ii, jj, ic]
                    out[bi, oi, oj, oc] = acc
    return out


def _numpy_params(module):
    return {name: p.detach().double().numpy() for name, p in module.named_parameters()}


def scalar_lase(x, lase_block):
    """LASE recomputation composed from the scalar LANet/SENet oracles."""
    out = x.copy()
    if lase_block.lanet is not None:
        p = _numpy_params(lase_block.lanet)
        weighted, _ = scalar_lanet(
            x, p["compress.weight"], p.get("compress.bias"), p["collapse.weight"], p.get("collapse.bias")
        )
        out = out + weighted
    if lase_block.senet is not None:
        p = _numpy_params(lase_block.senet)
        weighted, _ = scalar_senet(
            x, p["squeeze.weight"], p.get("squeeze.bias"), p["excite.weight"], p.get("excite.bias")
        )
        out = out + weighted
    return out


def scalar_tree_forward(images, model):
    """Layer-by-layer recomputation of the whole tree model.

    Returns:
        (fatigue logits (B, 1), embeddings (B, D))
    """
    z = images.astype(np.float64)
    spec = model.backbone_spec
    for conv, stage in zip(model.root.convs, spec.stages):
        w = conv.weight.detach().double().numpy()
        b = conv.bias.detach().double().numpy() if conv.bias is not None else None
        z = scalar_conv2d(z, w, b, stage.stride, stage.kernel // 2)
        if stage.activation == "relu":
            z = np.maximum(z, 0.0)
        if stage.pool == "max2":
            bsz, h, w2, c = z.shape
            z = z[:, : h // 2 * 2, : w2 // 2 * 2, :].reshape(bsz, h // 2, 2, w2 // 2, 2, c).max(axis=(2, 4))
        elif stage.pool == "avg2":
            bsz, h, w2, c = z.shape
            z = z[:, : h // 2 * 2, : w2 // 2 * 2, :].reshape(bsz, h // 2, 2, w2 // 2, 2, c).mean(axis=(2, 4))

    def head(branch, features, normalize):
        w = branch.head.weight.detach().double().numpy()
        b = branch.head.bias.detach().double().numpy() if branch.head.bias is not None else 0.0
        flat = features.reshape(features.shape[0], -1)
        out = flat @ w.T + b
        if normalize:
            out = out / np.maximum(np.linalg.norm(out, axis=1, keepdims=True), 1e-12)
        return out

    fatigue_feat = scalar_lase(z, model.fatigue_branch.lase)
    face_feat = scalar_lase(z, model.face_branch.lase)
    return (
        head(model.fatigue_branch, fatigue_feat, normalize=False),
        head(model.face_branch, face_feat, normalize=True),
    )


def softmax_cross_entropy(logits, labels):
    """Stable per-sample softmax CE, numpy reference."""
    logits = np.asarray(logits, dtype=np.float64)
    shifted = logits - logits.max(axis=1, keepdims=True)
    log_z = np.log(np.exp(shifted).sum(axis=1)) + logits.max(axis=1)
    return log_z - logits[np.arange(len(labels)), labels]


def pair_count_auc(scores, labels):
    """O(n^2) Mann-Whitney AUC with ties counted half.

    Computed as (2 * wins + ties) / (2 * P * N), the same single division
    the trapezoid path performs, so agreement can be exact.
    """
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels)
    pos = scores[labels == 1]
    neg = scores[labels != 1]
    wins = 0
    ties = 0
    for p in pos:
        for n in neg:
            if p > n:
                wins += 1
            elif p == n:
                ties += 1
    return (2 * wins + ties) / (2 * len(pos) * len(neg))


def adam_reference_steps(p0, grad_fn, lr, beta1, beta2, eps, n_steps):
    """Hand-stepped scalar Adam trace, mirroring the documented update order."""
    p = float(p0)
    m = 0.0
    v = 0.0
    trace = []
    for t in range(1, n_steps + 1):
        g = grad_fn(p)
        m = beta1 * m + (1.0 - beta1) * g
        v = beta2 * v + (1.0 - beta2) * (g * g)
        m_hat = m / (1.0 - beta1**t)
        v_hat = v / (1.0 - beta2**t)
        p = p - lr * m_hat / (math.sqrt(v_hat) + eps)
        trace.append(p)
    return trace


def nearest_template(images, templates):
    """Classify each image by minimum Euclidean distance to a template."""
    preds = np.empty(images.shape[0], dtype=np.int64)
    flat_t = templates.reshape(templates.shape[0], -1).astype(np.float64)
    for i in range(images.shape[0]):
        d = ((images[i].reshape(-1) - flat_t) ** 2).sum(axis=1)
        preds[i] = int(d.argmin())
    return preds


def finite_difference(f, tensor, index, h=1e-4):
    """Central difference of scalar-valued ``f`` w.r.t. one tensor coordinate."""
    import torch

    flat = tensor.detach().view(-1)
    orig = float(flat[index])
    with torch.no_grad():
        flat[index] = orig + h
        up = float(f())
        flat[index] = orig - h
        down = float(f())
        flat[index] = orig
    return (up - down) / (2.0 * h)
