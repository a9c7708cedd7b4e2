"""Independent plain-numpy re-implementations used as test oracles.

Nothing here touches the tape machinery: every function is a straight
transcription of the model math with numpy arrays, so agreement between
these and the package is evidence, not tautology.
"""

import numpy as np


def np_sigmoid(x):
    return 1.0 / (1.0 + np.exp(-x))


def np_softmax(x):
    e = np.exp(x - x.max(axis=-1, keepdims=True))
    return e / e.sum(axis=-1, keepdims=True)


def delta_step_np(p, emb, h_prev, gain=None):
    d_rec = h_prev @ p.V.data.T
    d_dat = emb
    pre = p.alpha.data * d_rec * d_dat + p.beta1.data * d_rec + p.beta2.data * d_dat
    if p.fusion is not None and p.fusion.mode == "inner":
        pre = pre + gain
    z = np.tanh(pre)
    r = np_sigmoid(d_dat + p.b_r.data)
    mixed = (1.0 - r) * z + r * h_prev
    if p.fusion is not None and p.fusion.mode == "outer":
        mixed = mixed * gain
    return np.maximum(mixed, 0.0)


def gru_step_np(p, embs, h_prev, gain=None):
    e_z, e_r, e_h = embs
    z = np_sigmoid(e_z + h_prev @ p.V_z.data.T)
    r = np_sigmoid(e_r + h_prev @ p.V_r.data.T)
    cand = np.tanh(e_h + (r * h_prev) @ p.V_h.data.T)
    h = z * h_prev + (1.0 - z) * cand
    if p.fusion is not None:
        h = h * gain
    return h


def lstm_step_np(p, embs, h_prev, c_prev, gain=None):
    e_z, e_i, e_f, e_r = embs
    z = np.tanh(e_z + h_prev @ p.V_z.data.T)
    i = np_sigmoid(e_i + h_prev @ p.V_i.data.T + c_prev * p.U_i.data)
    f = np_sigmoid(e_f + h_prev @ p.V_f.data.T + c_prev * p.U_f.data)
    c = f * c_prev + i * z
    r = np_sigmoid(e_r + h_prev @ p.V_r.data.T + c * p.U_r.data)
    h = r * np.tanh(c)
    if p.fusion is not None:
        h = h * gain
    return h, c


def gain_np(model, contexts, batch):
    """Context gain as plain numpy; None for text-only models."""
    if model.config.fusion == "none":
        return None
    f = model.cell.fusion
    if contexts is None:
        base = np.zeros((batch, f.M.data.shape[0]))
    else:
        base = np.asarray(contexts, dtype=np.float64) @ f.M.data.T
    if f.use_bias:
        base = base + f.b_M.data
    return base


def forward_np(model, tokens, contexts=None):
    """Per-step distributions for every row of a token matrix."""
    p = model.cell
    arch = model.config.arch
    steps, batch = tokens.shape
    hidden = model.config.hidden
    h = np.zeros((batch, hidden))
    c = np.zeros((batch, hidden))
    gain = gain_np(model, contexts, batch)
    dists = []
    for t in range(steps):
        ids = tokens[t]
        if arch == "delta-rnn":
            h = delta_step_np(p, p.W.data[:, ids].T.astype(np.float64), h, gain)
        elif arch == "gru":
            embs = tuple(getattr(p, n).data[:, ids].T.astype(np.float64) for n in ("W_z", "W_r", "W_h"))
            h = gru_step_np(p, embs, h, gain)
        else:
            embs = tuple(getattr(p, n).data[:, ids].T.astype(np.float64)
                         for n in ("W_z", "W_i", "W_f", "W_r"))
            h, c = lstm_step_np(p, embs, h, c, gain)
        logits = h @ model.decoder.U.data.T
        if model.decoder.b_U is not None:
            logits = logits + model.decoder.b_U.data
        dists.append(np_softmax(logits))
    return dists


def sequence_nll_np(model, batch):
    """(summed masked NLL, target count) via the naive per-step loop."""
    dists = forward_np(model, batch.tokens[:-1], batch.contexts)
    total = 0.0
    for t, dist in enumerate(dists):
        target = batch.tokens[t + 1]
        m = batch.mask[t + 1]
        picked = dist[np.arange(dist.shape[0]), target]
        total -= float((np.log(picked) * m).sum())
    return total, int(batch.mask.sum())
