"""Brute-force reference computations with scalar Python arithmetic.

Nothing here imports the package's numerical code; these loops are the
independent side of every oracle comparison in the suite.
"""

import math


def softmax(xs):
    m = max(xs)
    e = [math.exp(x - m) for x in xs]
    s = sum(e)
    return [v / s for v in e]


def attention_weights(q, k, scale):
    """alpha[i][j] from nested lists."""
    out = []
    for qi in q:
        scores = [scale * sum(a * b for a, b in zip(qi, kj)) for kj in k]
        out.append(softmax(scores))
    return out


def masked_renorm(weights, mask, mode):
    masked = [[w * m for w, m in zip(wr, mr)] for wr, mr in zip(weights, mask)]
    if mode == "per_pixel":
        return [[v / sum(row) for v in row] for row in masked]
    total = 0.0
    for row in masked:
        for v in row:
            total += v
    return [[v / total for v in row] for row in masked]


def weighted_sum(weights, values):
    dv = len(values[0])
    return [[sum(w[j] * values[j][c] for j in range(len(values))) for c in range(dv)] for w in weights]


def srca(q, k, v, mask, mode, scale):
    """Attention -> mask -> renormalize -> weighted sum, with the global map
    rescaled by its unmasked total so a full mask is the identity."""
    alpha = attention_weights(q, k, scale)
    w = masked_renorm(alpha, mask, mode)
    if mode == "global":
        total = sum(sum(r) for r in alpha)
        w = [[x * total for x in r] for r in w]
    return weighted_sum(w, v), w


def union(masks, h, w):
    out = [[0] * w for _ in range(h)]
    for m in masks:
        for y in range(h):
            for x in range(w):
                if m[y][x]:
                    out[y][x] = 1
    return out


def resample_block(mask, th, tw, policy):
    H, W = len(mask), len(mask[0])
    out = [[0] * tw for _ in range(th)]
    for y in range(th):
        for x in range(tw):
            if policy == "nearest":
                sy = int(((y + 0.5) * H) // th)
                sx = int(((x + 0.5) * W) // tw)
                out[y][x] = int(bool(mask[sy][sx]))
                continue
            bh, bw = H // th, W // tw
            cells = [mask[y * bh + dy][x * bw + dx] for dy in range(bh) for dx in range(bw)]
            ones = sum(1 for c in cells if c)
            if policy == "any_coverage":
                out[y][x] = int(ones > 0)
            else:
                out[y][x] = int(ones * 2 >= len(cells))
    return out


def token_pixel_matrix(h, w, num_tokens, global_idx, tagged):
    """``tagged``: list of ((first, last), mask[h][w]) already at resolution."""
    rows = []
    for y in range(h):
        for x in range(w):
            row = []
            for j in range(num_tokens):
                bit = 1 if j in global_idx else 0
                for (a, b), m in tagged:
                    if a <= j <= b and m[y][x]:
                        bit = 1
                row.append(bit)
            rows.append(row)
    return rows


def psnr(a, b, max_val):
    """``a``/``b`` flat lists of equal length."""
    se = 0.0
    for x, y in zip(a, b):
        se += (x - y) * (x - y)
    mse = se / len(a)
    if mse == 0:
        return math.inf
    return 10 * math.log10(max_val * max_val / mse)


def gaussian(n, sigma):
    c = (n - 1) / 2
    g = [math.exp(-((i - c) ** 2) / (2 * sigma * sigma)) for i in range(n)]
    s = sum(g)
    return [v / s for v in g]


def ssim(a, b, max_val, n=11, sigma=1.5, k1=0.01, k2=0.03, region=None):
    """Literal sliding-window SSIM on 2-D nested lists; ``region`` keeps windows fully inside."""
    g = gaussian(n, sigma)
    H, W = len(a), len(a[0])
    c1, c2 = (k1 * max_val) ** 2, (k2 * max_val) ** 2
    vals = []
    for y in range(H - n + 1):
        for x in range(W - n + 1):
            if region is not None and not all(region[y + i][x + j] for i in range(n) for j in range(n)):
                continue
            ma = mb = saa = sbb = sab = 0.0
            for i in range(n):
                for j in range(n):
                    wt = g[i] * g[j]
                    pa, pb = a[y + i][x + j], b[y + i][x + j]
                    ma += wt * pa
                    mb += wt * pb
                    saa += wt * pa * pa
                    sbb += wt * pb * pb
                    sab += wt * pa * pb
            va, vb, cv = saa - ma * ma, sbb - mb * mb, sab - ma * mb
            vals.append(((2 * ma * mb + c1) * (2 * cv + c2)) / ((ma * ma + mb * mb + c1) * (va + vb + c2)))
    return sum(vals) / len(vals)


def forward_reference(latent, t, tokens, weights, masks=None):
    """Pixel-by-pixel re-derivation of the toy denoiser forward pass (per-pixel renormalization).

    ``masks`` maps resolution -> nested list [pixel][token] of 0/1.
    Returns nested list [channel][y][x].
    """
    spec = weights.spec
    C, (H, W) = spec.latent_channels, spec.base_resolution
    F = spec.hidden_dim
    half = F // 2
    temb = [0.0] * F
    for i in range(half):
        f = math.exp(-math.log(10000.0) * i / max(half, 1))
        temb[i] = math.sin(t * f)
        temb[half + i] = math.cos(t * f)
    w_in = weights.input_proj.tolist()
    hid = [[[sum(latent[c][y][x] * w_in[c][f] for c in range(C)) + temb[f] for f in range(F)]
            for x in range(W)] for y in range(H)]
    tok = tokens.tolist() if hasattr(tokens, "tolist") else tokens
    N = len(tok)
    for ls, lw in zip(spec.layer_specs, weights.layers):
        h, w = ls.resolution
        bh, bw = H // h, W // w
        pooled = []
        for y in range(h):
            for x in range(w):
                acc = [0.0] * F
                for dy in range(bh):
                    for dx in range(bw):
                        for f in range(F):
                            acc[f] += hid[y * bh + dy][x * bw + dx][f]
                pooled.append([v / (bh * bw) for v in acc])
        wq, wk, wv, wo = lw.query.tolist(), lw.key.tolist(), lw.value.tolist(), lw.out.tolist()
        inner = ls.heads * ls.head_dim
        K = [[sum(tok[j][d] * wk[d][e] for d in range(len(tok[j]))) for e in range(inner)] for j in range(N)]
        V = [[sum(tok[j][d] * wv[d][e] for d in range(len(tok[j]))) for e in range(inner)] for j in range(N)]
        deltas = []
        for p, feat in enumerate(pooled):
            q = [sum(feat[f] * wq[f][e] for f in range(F)) for e in range(inner)]
            out = [0.0] * inner
            for head in range(ls.heads):
                lo, hi = head * ls.head_dim, (head + 1) * ls.head_dim
                scale = 1.0 / math.sqrt(ls.head_dim)
                alpha = softmax([scale * sum(q[e] * K[j][e] for e in range(lo, hi)) for j in range(N)])
                if masks is not None:
                    m = masks[ls.resolution][p]
                    masked = [a * mm for a, mm in zip(alpha, m)]
                    s = sum(masked)
                    alpha = [v / s for v in masked]
                for e in range(lo, hi):
                    out[e] = sum(alpha[j] * V[j][e] for j in range(N))
            deltas.append([sum(out[e] * wo[e][f] for e in range(inner)) for f in range(F)])
        for y in range(H):
            for x in range(W):
                d = deltas[(y // bh) * w + (x // bw)]
                hid[y][x] = [hid[y][x][f] + d[f] for f in range(F)]
    head = weights.noise_head.tolist()
    return [[[sum(hid[y][x][f] * head[f][c] for f in range(F)) for x in range(W)] for y in range(H)]
            for c in range(C)]


def ddim_step(x, eps, alpha, alpha_prev):
    """Single deterministic DDIM update on nested lists (any nesting depth)."""
    if isinstance(x, list):
        return [ddim_step(a, b, alpha, alpha_prev) for a, b in zip(x, eps)]
    x0 = (x - math.sqrt(1 - alpha) * eps) / math.sqrt(alpha)
    return math.sqrt(alpha_prev) * x0 + math.sqrt(1 - alpha_prev) * eps
