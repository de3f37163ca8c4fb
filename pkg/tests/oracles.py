"""Independent reference implementations used as test oracles.

Everything here is written from the textbook definitions with plain loops and
Python floats.  Nothing is imported from the package under test except config
dataclasses (read-only inputs to the parameter-count oracle).
"""

from __future__ import annotations

import math


# ---------------------------------------------------------------------------
# Tensor operators
# ---------------------------------------------------------------------------


def conv2d_loops(x, k, b, stride=1, padding=0):
    """Direct cross-correlation over nested lists / arrays; returns nested lists."""
    n, c, h, w = len(x), len(x[0]), len(x[0][0]), len(x[0][0][0])
    o, _, kh, kw = len(k), len(k[0]), len(k[0][0]), len(k[0][0][0])
    oh = (h + 2 * padding - kh) // stride + 1
    ow = (w + 2 * padding - kw) // stride + 1

    def px(ni, ci, i, j):
        i -= padding
        j -= padding
        if 0 <= i < h and 0 <= j < w:
            return float(x[ni][ci][i][j])
        return 0.0

    out = [[[[0.0] * ow for _ in range(oh)] for _ in range(o)] for _ in range(n)]
    for ni in range(n):
        for oi in range(o):
            for r in range(oh):
                for s in range(ow):
                    acc = float(b[oi])
                    for ci in range(c):
                        for a in range(kh):
                            for d in range(kw):
                                acc += float(k[oi][ci][a][d]) * px(ni, ci, r * stride + a, s * stride + d)
                    out[ni][oi][r][s] = acc
    return out


def maxpool_loops(x, window, stride):
    n, c, h, w = len(x), len(x[0]), len(x[0][0]), len(x[0][0][0])
    oh = (h - window) // stride + 1
    ow = (w - window) // stride + 1
    return [
        [
            [
                [
                    max(float(x[ni][ci][r * stride + a][s * stride + d]) for a in range(window) for d in range(window))
                    for s in range(ow)
                ]
                for r in range(oh)
            ]
            for ci in range(c)
        ]
        for ni in range(n)
    ]


def bilinear_align_corners(img, out_h, out_w):
    """Align-corners bilinear resampling of one 2-D grid (nested lists)."""
    h, w = len(img), len(img[0])

    def coord(i, n_in, n_out):
        if n_out == 1 or n_in == 1:
            return 0.0
        return i * (n_in - 1) / (n_out - 1)

    out = []
    for i in range(out_h):
        y = coord(i, h, out_h)
        y0 = min(int(math.floor(y)), h - 1)
        y1 = min(y0 + 1, h - 1)
        fy = y - y0
        row = []
        for j in range(out_w):
            xq = coord(j, w, out_w)
            x0 = min(int(math.floor(xq)), w - 1)
            x1 = min(x0 + 1, w - 1)
            fx = xq - x0
            top = (1 - fx) * float(img[y0][x0]) + fx * float(img[y0][x1])
            bot = (1 - fx) * float(img[y1][x0]) + fx * float(img[y1][x1])
            row.append((1 - fy) * top + fy * bot)
        out.append(row)
    return out


# ---------------------------------------------------------------------------
# Metrics, by definition
# ---------------------------------------------------------------------------


def _div(a, b):
    return a / b if b else 0.0


def brute_metrics(truth, pred, scores, k):
    """All eight metrics from per-sample loops; macro averages; 0/0 -> 0."""
    n = len(truth)
    prec, sens, spec, f1 = [], [], [], []
    for c in range(k):
        tp = sum(1 for t, p in zip(truth, pred) if t == c and p == c)
        fp = sum(1 for t, p in zip(truth, pred) if t != c and p == c)
        fn = sum(1 for t, p in zip(truth, pred) if t == c and p != c)
        tn = n - tp - fp - fn
        p_c, s_c = _div(tp, tp + fp), _div(tp, tp + fn)
        prec.append(p_c)
        sens.append(s_c)
        spec.append(_div(tn, tn + fp))
        f1.append(_div(2 * p_c * s_c, p_c + s_c))
    accuracy = sum(1 for t, p in zip(truth, pred) if t == p) / n

    # MCC as the Pearson correlation of the one-hot indicator matrices
    X = [[1.0 if t == c else 0.0 for c in range(k)] for t in truth]
    Y = [[1.0 if p == c else 0.0 for c in range(k)] for p in pred]
    mx = [sum(r[c] for r in X) / n for c in range(k)]
    my = [sum(r[c] for r in Y) / n for c in range(k)]
    cov_xy = sum((X[i][c] - mx[c]) * (Y[i][c] - my[c]) for i in range(n) for c in range(k))
    cov_xx = sum((X[i][c] - mx[c]) ** 2 for i in range(n) for c in range(k))
    cov_yy = sum((Y[i][c] - my[c]) ** 2 for i in range(n) for c in range(k))
    mcc = cov_xy / math.sqrt(cov_xx * cov_yy) if cov_xx > 0 and cov_yy > 0 else 0.0

    po = accuracy
    pe = sum((sum(1 for t in truth if t == c) / n) * (sum(1 for p in pred if p == c) / n) for c in range(k))
    kappa = 0.0 if pe == 1 else (po - pe) / (1 - pe)

    classes = [1] if k == 2 else list(range(k))
    aucs = []
    for c in classes:
        pos = [scores[i][c] for i in range(n) if truth[i] == c]
        neg = [scores[i][c] for i in range(n) if truth[i] != c]
        if pos and neg:
            aucs.append(pairwise_auc(pos, neg))
    return {
        "precision": sum(prec) / k,
        "sensitivity": sum(sens) / k,
        "specificity": sum(spec) / k,
        "accuracy": accuracy,
        "mcc": mcc,
        "f1": sum(f1) / k,
        "kappa": kappa,
        "auc_roc": sum(aucs) / len(aucs),
    }


def pairwise_auc(pos, neg):
    """Enumerate every (positive, negative) pair; ties count one half."""
    wins = 0.0
    for p in pos:
        for q in neg:
            wins += 1.0 if p > q else (0.5 if p == q else 0.0)
    return wins / (len(pos) * len(neg))


def binary_mcc(tp, tn, fp, fn):
    den = math.sqrt((tp + fp) * (tp + fn) * (tn + fp) * (tn + fn))
    return (tp * tn - fp * fn) / den if den else 0.0


# ---------------------------------------------------------------------------
# Adam
# ---------------------------------------------------------------------------


def adam_script(theta, grads, lr, beta1=0.9, beta2=0.999, eps=1e-8):
    """Scalar Adam recurrence; returns the trajectory of theta after each step."""
    m = v = 0.0
    out = []
    for t, g in enumerate(grads, start=1):
        m = beta1 * m + (1 - beta1) * g
        v = beta2 * v + (1 - beta2) * g * g
        m_hat = m / (1 - beta1**t)
        v_hat = v / (1 - beta2**t)
        theta = theta - lr * m_hat / (math.sqrt(v_hat) + eps)
        out.append(theta)
    return out


# ---------------------------------------------------------------------------
# Parameter count, walked from the architecture description
# ---------------------------------------------------------------------------


def conv_params(cin, cout, k):
    return cin * cout * k * k + cout


def bn_params(c):
    return 2 * c


def unit_params(cin, cout, stride):
    total = bn_params(cin) + conv_params(cin, cout, 3) + bn_params(cout) + conv_params(cout, cout, 3)
    if cin != cout or stride != 1:
        total += conv_params(cin, cout, 1)
    return total


def count_params_walk(config):
    total = conv_params(config.input_shape[0], config.stem.out_channels, config.stem.kernel)
    prev = config.stem.out_channels
    for stage in config.stages:
        c = stage.channels
        total += unit_params(prev, c, 2)
        modules = []
        modules += [unit_params(c, c, 1)] * stage.p  # pre
        modules += [unit_params(c, c, 1)] * stage.t  # trunk
        for _ in range(stage.mask_depth):
            modules += [unit_params(c, c, 1)] * stage.r  # down
            modules += [unit_params(c, c, 1)] * stage.r  # up
            modules += [unit_params(c, c, 1)]  # skip
        modules += [bn_params(c), conv_params(c, c, 1), bn_params(c), conv_params(c, c, 1)]  # mask head
        modules += [unit_params(c, c, 1)] * stage.p  # post
        total += sum(modules)
        prev = c
    total += config.tail * unit_params(prev, prev, 1)
    total += bn_params(prev)  # head batch norm
    total += prev * config.num_classes + config.num_classes
    return total
