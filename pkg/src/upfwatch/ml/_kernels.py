"""Hot loops for the classifiers, in two interchangeable flavours.

Every kernel exists as ``<name>_nb`` (numba) and ``<name>_np`` (numpy).  The
module-level names (``knn_neighbors``, ``gini_best_split``, ...) point at
whichever backend ``upfwatch._accel`` selected.  Floating-point work is
ordered identically in both flavours so their outputs compare equal with
``==``, not just ``allclose``.
"""
from types import SimpleNamespace

import numpy as np

from upfwatch._accel import USE_NUMBA, njit

NO_FEATURE = -1


def _midpoint(a, b):
    thr = (a + b) * 0.5
    if thr >= b:
        thr = a
    return thr


_midpoint_nb = njit(_midpoint)


# --------------------------------------------------------------------- KNN


@njit
def knn_neighbors_nb(queries, train, k):
    m = queries.shape[0]
    n, d = train.shape
    out = np.empty((m, k), dtype=np.int64)
    best_d = np.empty(k, dtype=np.float64)
    best_i = np.empty(k, dtype=np.int64)
    for q in range(m):
        filled = 0
        for j in range(n):
            acc = 0.0
            for f in range(d):
                diff = queries[q, f] - train[j, f]
                acc += diff * diff
            # bounded insertion; strict < keeps the lower index first on ties,
            # same as a stable sort
            if filled == k and not acc < best_d[k - 1]:
                continue
            pos = filled if filled < k else k - 1
            while pos > 0 and acc < best_d[pos - 1]:
                best_d[pos] = best_d[pos - 1]
                best_i[pos] = best_i[pos - 1]
                pos -= 1
            best_d[pos] = acc
            best_i[pos] = j
            if filled < k:
                filled += 1
        for i in range(k):
            out[q, i] = best_i[i]
    return out


def knn_neighbors_np(queries, train, k, chunk=256):
    m = queries.shape[0]
    n, d = train.shape
    out = np.empty((m, k), dtype=np.int64)
    for lo in range(0, m, chunk):
        q = queries[lo : lo + chunk]
        dist = np.zeros((q.shape[0], n))
        # feature-by-feature accumulation keeps the summation order of the loop kernel
        for f in range(d):
            diff = q[:, f, None] - train[None, :, f]
            dist += diff * diff
        out[lo : lo + chunk] = np.argsort(dist, axis=1, kind="stable")[:, :k]
    return out


# ------------------------------------------------------------- Gini split


@njit
def gini_best_split_nb(X, y, idx, features, n_classes, min_leaf):
    m = idx.shape[0]
    best_f = NO_FEATURE
    best_thr = 0.0
    best_score = -np.inf
    if m < 2:
        return best_f, best_thr, best_score
    total = np.zeros(n_classes, dtype=np.int64)
    for i in range(m):
        total[y[idx[i]]] += 1
    left = np.zeros(n_classes, dtype=np.int64)
    vals = np.empty(m, dtype=np.float64)
    for f in features:
        for i in range(m):
            vals[i] = X[idx[i], f]
        order = np.argsort(vals, kind="mergesort")
        left[:] = 0
        for i in range(m - 1):
            left[y[idx[order[i]]]] += 1
            a = vals[order[i]]
            b = vals[order[i + 1]]
            nl = i + 1
            nr = m - nl
            if nl < min_leaf or nr < min_leaf or not a < b:
                continue
            sl = 0
            sr = 0
            for c in range(n_classes):
                sl += left[c] * left[c]
                r = total[c] - left[c]
                sr += r * r
            score = float(sl) / float(nl) + float(sr) / float(nr)
            if score > best_score:
                best_score = score
                best_f = f
                best_thr = _midpoint_nb(a, b)
    return best_f, best_thr, best_score


def gini_best_split_np(X, y, idx, features, n_classes, min_leaf):
    m = idx.shape[0]
    best_f, best_thr, best_score = NO_FEATURE, 0.0, -np.inf
    if m < 2:
        return best_f, best_thr, best_score
    yi = y[idx]
    nl = np.arange(1, m, dtype=np.int64)
    nr = m - nl
    size_ok = (nl >= min_leaf) & (nr >= min_leaf)
    if not size_ok.any():
        return best_f, best_thr, best_score
    total = np.bincount(yi, minlength=n_classes).astype(np.int64)
    onehot = np.zeros((m, n_classes), dtype=np.int64)
    rows = np.arange(m)
    for f in features:
        vals = X[idx, f]
        order = np.argsort(vals, kind="stable")
        sv = vals[order]
        onehot[:] = 0
        onehot[rows, yi[order]] = 1
        cl = np.cumsum(onehot, axis=0)[:-1]
        cr = total - cl
        valid = size_ok & (sv[:-1] < sv[1:])
        if not valid.any():
            continue
        score = (cl * cl).sum(axis=1) / nl + (cr * cr).sum(axis=1) / nr
        score[~valid] = -np.inf
        i = int(np.argmax(score))
        if score[i] > best_score:
            best_score = float(score[i])
            best_f = int(f)
            best_thr = _midpoint(sv[i], sv[i + 1])
    return best_f, best_thr, best_score


# ----------------------------------------------------- second-order split


@njit
def newton_best_split_nb(X, grad, hess, idx, features, min_leaf, min_hess, reg_lambda):
    m = idx.shape[0]
    best_f = NO_FEATURE
    best_thr = 0.0
    best_score = -np.inf
    if m < 2:
        return best_f, best_thr, best_score
    vals = np.empty(m, dtype=np.float64)
    cg = np.empty(m, dtype=np.float64)
    ch = np.empty(m, dtype=np.float64)
    for f in features:
        for i in range(m):
            vals[i] = X[idx[i], f]
        order = np.argsort(vals, kind="mergesort")
        sg = 0.0
        sh = 0.0
        for i in range(m):
            sg += grad[idx[order[i]]]
            sh += hess[idx[order[i]]]
            cg[i] = sg
            ch[i] = sh
        gt = cg[m - 1]
        ht = ch[m - 1]
        for i in range(m - 1):
            a = vals[order[i]]
            b = vals[order[i + 1]]
            nl = i + 1
            if nl < min_leaf or m - nl < min_leaf or not a < b:
                continue
            gl = cg[i]
            hl = ch[i]
            gr = gt - gl
            hr = ht - hl
            if hl < min_hess or hr < min_hess:
                continue
            score = gl * gl / (hl + reg_lambda) + gr * gr / (hr + reg_lambda)
            if score > best_score:
                best_score = score
                best_f = f
                best_thr = _midpoint_nb(a, b)
    return best_f, best_thr, best_score


def newton_best_split_np(X, grad, hess, idx, features, min_leaf, min_hess, reg_lambda):
    m = idx.shape[0]
    best_f, best_thr, best_score = NO_FEATURE, 0.0, -np.inf
    if m < 2:
        return best_f, best_thr, best_score
    nl = np.arange(1, m)
    size_ok = (nl >= min_leaf) & (m - nl >= min_leaf)
    if not size_ok.any():
        return best_f, best_thr, best_score
    gi = grad[idx]
    hi = hess[idx]
    for f in features:
        vals = X[idx, f]
        order = np.argsort(vals, kind="stable")
        sv = vals[order]
        cg = np.cumsum(gi[order])
        ch = np.cumsum(hi[order])
        gl, hl = cg[:-1], ch[:-1]
        gr = cg[-1] - gl
        hr = ch[-1] - hl
        valid = size_ok & (sv[:-1] < sv[1:]) & (hl >= min_hess) & (hr >= min_hess)
        if not valid.any():
            continue
        score = gl * gl / (hl + reg_lambda) + gr * gr / (hr + reg_lambda)
        score[~valid] = -np.inf
        i = int(np.argmax(score))
        if score[i] > best_score:
            best_score = float(score[i])
            best_f = int(f)
            best_thr = _midpoint(sv[i], sv[i + 1])
    return best_f, best_thr, best_score


# ------------------------------------------------------------- traversal


@njit
def tree_apply_nb(X, feature, threshold, left, right):
    m = X.shape[0]
    out = np.empty(m, dtype=np.int64)
    for i in range(m):
        node = 0
        while left[node] >= 0:
            if X[i, feature[node]] <= threshold[node]:
                node = left[node]
            else:
                node = right[node]
        out[i] = node
    return out


def tree_apply_np(X, feature, threshold, left, right):
    m = X.shape[0]
    node = np.zeros(m, dtype=np.int64)
    rows = np.arange(m)
    active = left[node] >= 0
    while active.any():
        r = rows[active]
        n = node[active]
        go_left = X[r, feature[n]] <= threshold[n]
        node[active] = np.where(go_left, left[n], right[n])
        active = left[node] >= 0
    return node


numba_impl = SimpleNamespace(
    knn_neighbors=knn_neighbors_nb,
    gini_best_split=gini_best_split_nb,
    newton_best_split=newton_best_split_nb,
    tree_apply=tree_apply_nb,
)
numpy_impl = SimpleNamespace(
    knn_neighbors=knn_neighbors_np,
    gini_best_split=gini_best_split_np,
    newton_best_split=newton_best_split_np,
    tree_apply=tree_apply_np,
)

_active = numba_impl if USE_NUMBA else numpy_impl
knn_neighbors = _active.knn_neighbors
gini_best_split = _active.gini_best_split
newton_best_split = _active.newton_best_split
tree_apply = _active.tree_apply
