"""Hand-unrolled NumPy forward pass used as an independent oracle in tests.

Every operation is re-derived from its mathematical definition with plain
NumPy (explicit convolution loops, manual normalization and softmax), sharing
no code with the package. Covers eval-mode inference for the full model with
per-stage decoders; the weighted-sum ablation stand-ins are exercised
separately by behavioral tests.
"""

import numpy as np

MODALITIES = ("rgb", "flow", "audio")


def _np(t):
    return t.detach().cpu().numpy().astype(np.float64)


def linear(x, layer):
    return x @ _np(layer.weight).T + _np(layer.bias)


def relu(x):
    return np.maximum(x, 0.0)


def softmax(x, axis=-1):
    z = x - x.max(axis=axis, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=axis, keepdims=True)


def conv1d_same(x, layer):
    """Kernel-3, padding-1 temporal convolution on (B, T, d_in)."""
    w, b = _np(layer.weight), _np(layer.bias)  # (d_out, d_in, 3)
    n_batch, n_time, _ = x.shape
    xp = np.pad(x, ((0, 0), (1, 1), (0, 0)))
    out = np.zeros((n_batch, n_time, w.shape[0]))
    for k in range(w.shape[-1]):
        out += xp[:, k:k + n_time, :] @ w[:, :, k].T
    return out + b


def batchnorm_eval(x, layer):
    mean, var = _np(layer.running_mean), _np(layer.running_var)
    gamma, beta = _np(layer.weight), _np(layer.bias)
    return (x - mean) / np.sqrt(var + layer.eps) * gamma + beta


def halve_pool(x):
    """Kernel-2 stride-2 average pooling over time; a lone odd tail passes through."""
    n_pairs = x.shape[1] // 2
    pooled = 0.5 * (x[:, 0:2 * n_pairs:2] + x[:, 1:2 * n_pairs:2])
    if x.shape[1] % 2:
        pooled = np.concatenate([pooled, x[:, 2 * n_pairs:]], axis=1)
    return pooled


def conv_stage(x, stage):
    y = relu(batchnorm_eval(conv1d_same(x, stage.conv1), stage.norm1))
    y = relu(batchnorm_eval(conv1d_same(y, stage.conv2), stage.norm2))
    return halve_pool(y + x)


def regression_head(x, head):
    pooled = x.mean(axis=1)
    score = 1.0 / (1.0 + np.exp(-linear(pooled, head.linear)))
    eps = np.finfo(np.float64).eps
    return np.clip(score[..., 0], eps, 1.0 - eps)


def negated_attention(q, k, v, mask=None):
    logits = -(q @ np.swapaxes(k, -1, -2)) / np.sqrt(q.shape[-1])
    if mask is not None:
        logits = logits + mask
    weights = softmax(logits, axis=-1)
    return weights @ v, weights


def branch_forward(x, branch):
    feats = [linear(np.asarray(x, dtype=np.float64), branch.embed)]
    for stage in branch.stages:
        feats.append(conv_stage(feats[-1], stage))
    return feats, regression_head(feats[-1], branch.head)


def msfd_forward(mixed, mods, decoder):
    q = linear(mixed, decoder.w_q)[..., None, :]
    out, weights = negated_attention(q, linear(mods, decoder.w_k), linear(mods, decoder.w_v))
    return out[..., 0, :], weights[..., 0, :]


def afm_forward(mods_prev, afm):
    """Greedy (eval-mode) expert outputs, hard decisions, and additive mask."""
    transformed = np.stack(
        [relu(linear(mods_prev[..., j, :], afm.transforms[j])) for j in range(3)], axis=-2
    )
    flat = transformed.reshape(transformed.shape[:-2] + (-1,))
    cross = []
    for net in afm.fusion_nets:
        alpha = softmax(linear(relu(linear(flat, net.attention[0])), net.attention[2]))
        fused = (alpha[..., None] * transformed).sum(axis=-2)
        cross.append(conv_stage(fused, net.stage))
    cross = np.stack(cross, axis=-2)  # (B, T_i, K, d)
    if afm.variant == "free":
        return cross, None, np.zeros(cross.shape[:-1])
    pooled = np.stack([halve_pool(mods_prev[..., j, :]) for j in range(3)], axis=-2)
    logits = linear(relu(linear(pooled.reshape(pooled.shape[:-2] + (-1,)), afm.policy[0])),
                    afm.policy[2])
    probs = softmax(logits)
    hard = probs.argmax(axis=-1) + 1
    idx = np.arange(1, afm.k_experts + 1)
    if afm.variant == "ranked":
        mask = np.where(idx <= hard[..., None], 0.0, afm.xi)
    else:
        mask = np.where(idx == hard[..., None], 0.0, afm.xi)
    return cross, hard, mask


def cmfd_forward(mixed, mods, cross, mask, decoder):
    queries = np.concatenate([mixed[..., None, :], mods], axis=-2)
    out, weights = negated_attention(
        linear(queries, decoder.w_q),
        linear(cross, decoder.w_k),
        linear(cross, decoder.w_v),
        mask[..., None, :] if mask is not None else None,
    )
    return out.sum(axis=-2), weights


def pamfn_eval_forward(model, rgb, flow, audio):
    """Eval-mode score of a full fusion model, computed entirely in NumPy."""
    feats = {}
    for m, x in zip(MODALITIES, (rgb, flow, audio)):
        feats[m], _ = branch_forward(x, model.branches[m])
    mixed = np.zeros((rgb.shape[0], feats["rgb"][0].shape[1], model.config.d))
    for i in range(1, model.config.n_stages + 1):
        key = str(i)
        h = conv_stage(mixed, model.mixed_stages[i - 1])
        f = h
        mods_i = np.stack([feats[m][i] for m in MODALITIES], axis=-2)
        if key in model.msfd:
            ms, _ = msfd_forward(h, mods_i, model.msfd[key])
            f = f + ms
        if key in model.afm:
            mods_prev = np.stack([feats[m][i - 1] for m in MODALITIES], axis=-2)
            cross, _, mask = afm_forward(mods_prev, model.afm[key])
            cm, _ = cmfd_forward(h, mods_i, cross, mask, model.cmfd[key])
            f = f + cm
        mixed = f
    return regression_head(mixed, model.mixed_head)
