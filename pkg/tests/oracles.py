"""Independent reference implementations used as test oracles.

Everything here is written for clarity rather than speed: explicit loops,
no batching, and no reuse of the package's own forward or transform code.
"""
import numpy as np

S3 = np.sqrt(3.0)
# db4 analysis low-pass taps and the matching quadrature-mirror high-pass
H = np.array([1 + S3, 3 + S3, 3 - S3, 1 - S3]) / (4 * np.sqrt(2.0))
G = np.array([-H[3], H[2], -H[1], H[0]])


def filterbank_level(x):
    """One analysis level by periodic convolution and downsampling."""
    N = len(x)
    a = np.zeros(N // 2)
    d = np.zeros(N // 2)
    for n in range(N // 2):
        for k in range(4):
            a[n] += H[k] * x[(2 * n + k) % N]
            d[n] += G[k] * x[(2 * n - 2 + k) % N]
    return a, d


def filterbank_oracle(x, levels=5):
    approx, detail = [], []
    a = np.asarray(x, float)
    for _ in range(levels):
        a, d = filterbank_level(a)
        approx.append(a)
        detail.append(d)
    return approx, detail


def oracle_feature(window, pairs, eps):
    """16-dim feature of one 512-window via the filterbank oracle."""
    approx, detail = filterbank_oracle(window)
    c = np.array([a[-1] for a in reversed(approx)] + [d[-1] for d in reversed(detail)])
    r = []
    for i, j in pairs:
        den = c[j]
        den = (-1.0 if den < 0 else 1.0) * max(abs(den), eps)
        r.append(c[i] / den)
    return np.concatenate([[window[-1]], c, r])


def layer_norm(x, eps=1e-5):
    return (x - x.mean(axis=-1, keepdims=True)) / np.sqrt(x.var(axis=-1, keepdims=True) + eps)


def naive_attention(X, WQ, WK, WV, heads):
    """Per-head, per-row loops with no reshapes."""
    n, d = X.shape
    dh = d // heads
    Q, K, V = X @ WQ, X @ WK, X @ WV
    out = np.zeros((n, d))
    attn = np.zeros((heads, n, n))
    for h in range(heads):
        cols = slice(h * dh, (h + 1) * dh)
        for i in range(n):
            scores = np.array([np.dot(Q[i, cols], K[j, cols]) / np.sqrt(dh) for j in range(n)])
            e = np.exp(scores - scores.max())
            a = e / e.sum()
            attn[h, i] = a
            out[i, cols] = sum(a[j] * V[j, cols] for j in range(n))
    return out, attn


def naive_forward(X, w, cfg, n_pool_rows):
    """Dense reference: project, attend, MLP, pool over the final ``n_pool_rows`` rows."""
    P = X @ w.W_proj
    if cfg.positional_encoding:
        P = P + w.pos[-len(X):]
    if cfg.residual:
        Z = P + naive_attention(layer_norm(P), w.W_Q, w.W_K, w.W_V, cfg.num_heads)[0]
        O = np.maximum(layer_norm(Z) @ w.W_1 + w.b_1, 0) @ w.W_2 + w.b_2
        if cfg.mlp_out == cfg.d_model:
            O = O + Z
    else:
        Z = naive_attention(P, w.W_Q, w.W_K, w.W_V, cfg.num_heads)[0]
        O = np.maximum(Z @ w.W_1 + w.b_1, 0) @ w.W_2 + w.b_2
    logits = O[-n_pool_rows:].mean(axis=0) @ w.W_o + w.b_o
    if cfg.head_mode == "softmax":
        e = np.exp(logits - logits.max())
        return e / e.sum()
    return 1 / (1 + np.exp(-logits))


def offline_predictions(samples, weights, cfg, norm, mode, features):
    """Dense evaluation over a whole trace from precomputed raw features.

    Segments are the non-overlapping blocks of ``segment_len`` rows; in
    streaming mode the context of segment k is the pooled normalised rows of
    segments k-m .. k-1 (zeros before the trace starts).
    Returns (probs, end_indices).
    """
    T, m = cfg.segment_len, cfg.memory_len
    F = (np.asarray(features) - norm.mean) / norm.std
    n_seg = len(samples) // T
    pools = [F[k * T:(k + 1) * T].mean(axis=0) for k in range(n_seg)]
    out = []
    for k in range(n_seg):
        E = F[k * T:(k + 1) * T]
        if mode == "segment":
            out.append(naive_forward(E, weights, cfg, T))
            continue
        R = np.zeros((m, F.shape[1]))
        for slot in range(m):
            src = k - m + slot
            if src >= 0:
                R[slot] = pools[src]
        n_pool = T if cfg.pool_scope == "segment" else T + m
        out.append(naive_forward(np.vstack([R, E]), weights, cfg, n_pool))
    return np.array(out), np.arange(n_seg) * T + T - 1


def central_difference(f, tensors, name, h=1e-4):
    """Numerical gradient of scalar ``f(tensors)`` with respect to ``tensors[name]``."""
    base = tensors[name]
    g = np.zeros_like(base)
    it = np.nditer(base, flags=["multi_index"])
    for _ in it:
        idx = it.multi_index
        orig = base[idx]
        base[idx] = orig + h
        fp = f(tensors)
        base[idx] = orig - h
        fm = f(tensors)
        base[idx] = orig
        g[idx] = (fp - fm) / (2 * h)
    return g


def relative_error(a, b, floor=1e-8):
    """Max-norm relative error, guarded for near-zero gradients."""
    return float(np.max(np.abs(a - b)) / max(np.max(np.abs(a)), np.max(np.abs(b)), floor))
