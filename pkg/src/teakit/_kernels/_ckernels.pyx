# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True, initializedcheck=False
"""Compiled versions of the hot kernels in ``_pykernels``.

Floating point operations are performed in the same order as the numpy
fallback so both backends give bit-identical results.
"""

import numpy as np
cimport numpy as cnp
from libc.math cimport log, sqrt, fabs

cnp.import_array()

BACKEND = "cython"


cdef inline Py_ssize_t _lower(const double[::1] key, double v, bint right) noexcept nogil:
    # searchsorted: right=True -> first index with key > v, else key >= v
    cdef Py_ssize_t lo = 0, hi = key.shape[0], mid
    while lo < hi:
        mid = (lo + hi) >> 1
        if (key[mid] <= v) if right else (key[mid] < v):
            lo = mid + 1
        else:
            hi = mid
    return lo


def match_sorted(const double[:, ::1] q_t, const double[:, ::1] q_z,
                 const double[:, ::1] pool_t, const double[:, ::1] pool_z,
                 const cnp.int64_t[::1] order, const double[::1] key,
                 const double[::1] omega, double nu2):
    cdef Py_ssize_t nq = q_t.shape[0], n_t = q_t.shape[1], n_z = q_z.shape[1]
    cdef Py_ssize_t i, a, lo, hi, k, q, cap, cnt, start
    cdef cnp.int64_t j
    cdef double acc, diff
    cdef bint ok
    indptr_arr = np.zeros(nq + 1, dtype=np.int64)
    cdef cnp.int64_t[::1] indptr = indptr_arr
    cap = max(nq, 16)
    buf_arr = np.empty(cap, dtype=np.int64)
    cdef cnp.int64_t[::1] buf = buf_arr
    cnt = 0
    for i in range(nq):
        lo = _lower(key, q_t[i, 0] - omega[0], True)
        hi = _lower(key, q_t[i, 0] + omega[0], False)
        start = cnt
        for a in range(lo, hi):
            j = order[a]
            ok = True
            for q in range(n_t):
                if not (fabs(pool_t[j, q] - q_t[i, q]) < omega[q]):
                    ok = False
                    break
            if not ok:
                continue
            acc = 0.0
            for k in range(n_z):
                diff = pool_z[j, k] - q_z[i, k]
                acc = acc + diff * diff
            if acc < nu2:
                if cnt == cap:
                    cap = 2 * cap
                    buf_arr = np.resize(buf_arr, cap)
                    buf = buf_arr
                buf[cnt] = j
                cnt += 1
        if cnt - start > 1:
            buf_arr[start:cnt].sort()
        indptr[i + 1] = cnt
    return indptr_arr, buf_arr[:cnt].copy()


def nearest_fallback(const double[:, ::1] q_tw, const double[:, ::1] q_z,
                     const double[:, ::1] pool_tw, const double[:, ::1] pool_z,
                     Py_ssize_t c):
    cdef Py_ssize_t nq = q_tw.shape[0], m = pool_tw.shape[0]
    cdef Py_ssize_t n_t = q_tw.shape[1], n_z = q_z.shape[1]
    cdef Py_ssize_t i, j, k, pos, best
    cdef double acc, diff, bestd
    if c > m:
        c = m
    out_arr = np.empty(nq, dtype=np.int64)
    cdef cnp.int64_t[::1] out = out_arr
    # sorted (distance, index) lists of the c nearest so far
    cdef double[::1] nd = np.empty(c, dtype=np.float64)
    cdef cnp.int64_t[::1] ni = np.empty(c, dtype=np.int64)
    cdef Py_ssize_t filled
    for i in range(nq):
        filled = 0
        for j in range(m):
            acc = 0.0
            for k in range(n_t):
                diff = pool_tw[j, k] - q_tw[i, k]
                acc = acc + diff * diff
            if filled == c and acc >= nd[c - 1]:
                continue
            pos = filled if filled < c else c - 1
            while pos > 0 and nd[pos - 1] > acc:
                if pos < c:
                    nd[pos] = nd[pos - 1]
                    ni[pos] = ni[pos - 1]
                pos -= 1
            nd[pos] = acc
            ni[pos] = j
            if filled < c:
                filled += 1
        best = -1
        bestd = 0.0
        # scan candidates in pool-index order so ties go to the lowest index
        for k in range(filled):
            j = ni[k]
            acc = 0.0
            for pos in range(n_z):
                diff = pool_z[j, pos] - q_z[i, pos]
                acc = acc + diff * diff
            if best < 0 or acc < bestd or (acc == bestd and j < best):
                best = j
                bestd = acc
        out[i] = best
    return out_arr


# ---------------------------------------------------------------- BART

cdef inline double _leaf_loglik(double n, double s, double sigma2, double tau2) noexcept nogil:
    return -0.5 * log(1.0 + n * tau2 / sigma2) + tau2 * s * s / (
        2.0 * sigma2 * (sigma2 + n * tau2))


cdef inline int _depth(Py_ssize_t k) noexcept nogil:
    cdef int d = 0
    while k > 0:
        k = (k - 1) // 2
        d += 1
    return d


def bart_sweep(const cnp.int16_t[:, ::1] xb, const double[::1] y,
               cnp.int8_t[:, ::1] status, cnp.int32_t[:, ::1] var,
               cnp.int32_t[:, ::1] cut, double[:, ::1] mu,
               cnp.int64_t[:, ::1] leaf_of, double[:, ::1] tree_fit,
               double[::1] total_fit, double sigma, double tau,
               const double[::1] logp, const double[::1] log1mp,
               int max_depth, double p_grow, double p_prune, int n_cuts,
               const double[:, ::1] U, const double[:, ::1] Z,
               cnp.int64_t[::1] counts):
    cdef Py_ssize_t n_trees = status.shape[0], n_nodes = status.shape[1]
    cdef Py_ssize_t n = y.shape[0], n_vars = xb.shape[1]
    cdef double sigma2 = sigma * sigma, tau2 = tau * tau
    cdef Py_ssize_t j, i, k, node, sib, rank
    cdef Py_ssize_t n_leaf, n_internal, n_nog, n_nog_new, parent_nog
    cdef Py_ssize_t nl, nr, onl, onr, lft, rgt, v, c
    cdef int d, move
    cdef double sl, sr, osl, osr, lr, pg, pg_new, post_var, u_move, u_node
    cdef double u_var, u_cut, u_acc, new
    cdef cnp.int64_t cur
    r_arr = np.empty(n, dtype=np.float64)
    cdef double[::1] r = r_arr
    leaves_arr = np.empty(n_nodes, dtype=np.int64)
    nogs_arr = np.empty(n_nodes, dtype=np.int64)
    cdef cnp.int64_t[::1] leaves = leaves_arr
    cdef cnp.int64_t[::1] nogs = nogs_arr
    n_in_arr = np.empty(n_nodes, dtype=np.int64)
    s_in_arr = np.empty(n_nodes, dtype=np.float64)
    cdef cnp.int64_t[::1] n_in = n_in_arr
    cdef double[::1] s_in = s_in_arr

    with nogil:
        for j in range(n_trees):
            for i in range(n):
                r[i] = y[i] - total_fit[i]
                r[i] = r[i] + tree_fit[j, i]
            n_leaf = 0
            n_internal = 0
            n_nog = 0
            for k in range(n_nodes):
                if status[j, k] == 1:
                    leaves[n_leaf] = k
                    n_leaf += 1
                elif status[j, k] == 2:
                    n_internal += 1
                    if status[j, 2 * k + 1] == 1 and status[j, 2 * k + 2] == 1:
                        nogs[n_nog] = k
                        n_nog += 1
            u_move = U[j, 0]
            u_node = U[j, 1]
            u_var = U[j, 2]
            u_cut = U[j, 3]
            u_acc = U[j, 4]
            pg = p_grow
            if n_internal == 0:
                move = 0
                pg = 1.0
            elif u_move < p_grow:
                move = 0
            elif u_move < p_grow + p_prune:
                move = 1
            else:
                move = 2

            if move == 0:
                counts[0] += 1
                node = leaves[min(<Py_ssize_t>(u_node * n_leaf), n_leaf - 1)]
                d = _depth(node)
                v = min(<Py_ssize_t>(u_var * n_vars), n_vars - 1)
                c = min(<Py_ssize_t>(u_cut * n_cuts), n_cuts - 1)
                if d < max_depth:
                    nl = 0
                    nr = 0
                    sl = 0.0
                    sr = 0.0
                    for i in range(n):
                        if leaf_of[j, i] == node:
                            if xb[i, v] <= c:
                                nl += 1
                                sl = sl + r[i]
                            else:
                                nr += 1
                                sr = sr + r[i]
                    if nl > 0 and nr > 0:
                        lr = (_leaf_loglik(nl, sl, sigma2, tau2)
                              + _leaf_loglik(nr, sr, sigma2, tau2)
                              - _leaf_loglik(nl + nr, sl + sr, sigma2, tau2))
                        lr = lr + (logp[d] + 2.0 * log1mp[d + 1] - log1mp[d])
                        parent_nog = 0
                        if node > 0:
                            sib = node + 1 if node % 2 == 1 else node - 1
                            parent_nog = 1 if status[j, sib] == 1 else 0
                        n_nog_new = n_nog + 1 - parent_nog
                        lr = lr + (log(p_prune / n_nog_new) - log(pg / n_leaf))
                        if log(u_acc) < lr:
                            counts[1] += 1
                            status[j, node] = 2
                            var[j, node] = <cnp.int32_t>v
                            cut[j, node] = <cnp.int32_t>c
                            status[j, 2 * node + 1] = 1
                            status[j, 2 * node + 2] = 1
                            for i in range(n):
                                if leaf_of[j, i] == node:
                                    if xb[i, v] <= c:
                                        leaf_of[j, i] = 2 * node + 1
                                    else:
                                        leaf_of[j, i] = 2 * node + 2
            elif move == 1:
                counts[2] += 1
                node = nogs[min(<Py_ssize_t>(u_node * n_nog), n_nog - 1)]
                d = _depth(node)
                lft = 2 * node + 1
                rgt = 2 * node + 2
                nl = 0
                nr = 0
                sl = 0.0
                sr = 0.0
                for i in range(n):
                    cur = leaf_of[j, i]
                    if cur == lft:
                        nl += 1
                        sl = sl + r[i]
                    elif cur == rgt:
                        nr += 1
                        sr = sr + r[i]
                lr = (_leaf_loglik(nl + nr, sl + sr, sigma2, tau2)
                      - _leaf_loglik(nl, sl, sigma2, tau2)
                      - _leaf_loglik(nr, sr, sigma2, tau2))
                lr = lr - (logp[d] + 2.0 * log1mp[d + 1] - log1mp[d])
                pg_new = 1.0 if n_internal == 1 else p_grow
                lr = lr + (log(pg_new / (n_leaf - 1)) - log(p_prune / n_nog))
                if log(u_acc) < lr:
                    counts[3] += 1
                    status[j, node] = 1
                    status[j, lft] = 0
                    status[j, rgt] = 0
                    for i in range(n):
                        cur = leaf_of[j, i]
                        if cur == lft or cur == rgt:
                            leaf_of[j, i] = node
            else:
                counts[4] += 1
                node = nogs[min(<Py_ssize_t>(u_node * n_nog), n_nog - 1)]
                v = min(<Py_ssize_t>(u_var * n_vars), n_vars - 1)
                c = min(<Py_ssize_t>(u_cut * n_cuts), n_cuts - 1)
                lft = 2 * node + 1
                rgt = 2 * node + 2
                nl = 0
                nr = 0
                sl = 0.0
                sr = 0.0
                onl = 0
                onr = 0
                osl = 0.0
                osr = 0.0
                for i in range(n):
                    cur = leaf_of[j, i]
                    if cur == lft or cur == rgt:
                        if xb[i, v] <= c:
                            nl += 1
                            sl = sl + r[i]
                        else:
                            nr += 1
                            sr = sr + r[i]
                        if cur == lft:
                            onl += 1
                            osl = osl + r[i]
                        else:
                            onr += 1
                            osr = osr + r[i]
                if nl > 0 and nr > 0:
                    lr = (_leaf_loglik(nl, sl, sigma2, tau2)
                          + _leaf_loglik(nr, sr, sigma2, tau2)
                          - _leaf_loglik(onl, osl, sigma2, tau2)
                          - _leaf_loglik(onr, osr, sigma2, tau2))
                    if log(u_acc) < lr:
                        counts[5] += 1
                        var[j, node] = <cnp.int32_t>v
                        cut[j, node] = <cnp.int32_t>c
                        for i in range(n):
                            cur = leaf_of[j, i]
                            if cur == lft or cur == rgt:
                                if xb[i, v] <= c:
                                    leaf_of[j, i] = lft
                                else:
                                    leaf_of[j, i] = rgt

            for k in range(n_nodes):
                n_in[k] = 0
                s_in[k] = 0.0
            for i in range(n):
                cur = leaf_of[j, i]
                n_in[cur] += 1
                s_in[cur] = s_in[cur] + r[i]
            rank = 0
            for k in range(n_nodes):
                if status[j, k] == 1:
                    post_var = 1.0 / (n_in[k] / sigma2 + 1.0 / tau2)
                    mu[j, k] = post_var * s_in[k] / sigma2 + sqrt(post_var) * Z[j, rank]
                    rank += 1
            for i in range(n):
                new = mu[j, leaf_of[j, i]]
                total_fit[i] = total_fit[i] + (new - tree_fit[j, i])
                tree_fit[j, i] = new


def export_forest(const cnp.int8_t[:, ::1] status, const cnp.int32_t[:, ::1] var,
                  const cnp.int32_t[:, ::1] cut, const double[:, ::1] mu,
                  const double[:, ::1] grid):
    cdef Py_ssize_t n_trees = status.shape[0], n_nodes = status.shape[1]
    cdef Py_ssize_t j, k, total = 0, pos, top, parent, side
    for j in range(n_trees):
        for k in range(n_nodes):
            if status[j, k] != 0:
                total += 1
    o_var_arr = np.empty(total, dtype=np.int32)
    o_cut_arr = np.zeros(total, dtype=np.float64)
    o_left_arr = np.full(total, -1, dtype=np.int64)
    o_right_arr = np.full(total, -1, dtype=np.int64)
    o_val_arr = np.zeros(total, dtype=np.float64)
    roots_arr = np.empty(n_trees, dtype=np.int64)
    cdef cnp.int32_t[::1] o_var = o_var_arr
    cdef double[::1] o_cut = o_cut_arr
    cdef cnp.int64_t[::1] o_left = o_left_arr
    cdef cnp.int64_t[::1] o_right = o_right_arr
    cdef double[::1] o_val = o_val_arr
    cdef cnp.int64_t[::1] roots = roots_arr
    stack_arr = np.empty((n_nodes + 1, 3), dtype=np.int64)
    cdef cnp.int64_t[:, ::1] stack = stack_arr
    pos = 0
    for j in range(n_trees):
        roots[j] = pos
        top = 0
        stack[0, 0] = 0
        stack[0, 1] = -1
        stack[0, 2] = 0
        top = 1
        while top > 0:
            top -= 1
            k = stack[top, 0]
            parent = stack[top, 1]
            side = stack[top, 2]
            if parent >= 0:
                if side == 0:
                    o_left[parent] = pos
                else:
                    o_right[parent] = pos
            if status[j, k] == 2:
                o_var[pos] = var[j, k]
                o_cut[pos] = grid[var[j, k], cut[j, k]]
                stack[top, 0] = 2 * k + 2
                stack[top, 1] = pos
                stack[top, 2] = 1
                stack[top + 1, 0] = 2 * k + 1
                stack[top + 1, 1] = pos
                stack[top + 1, 2] = 0
                top += 2
            else:
                o_var[pos] = -1
                o_val[pos] = mu[j, k]
            pos += 1
    return o_var_arr, o_cut_arr, o_left_arr, o_right_arr, o_val_arr, roots_arr


def forest_predict(const double[:, ::1] x, const cnp.int64_t[:, ::1] roots,
                   const cnp.int32_t[::1] var, const double[::1] cut,
                   const cnp.int64_t[::1] left, const cnp.int64_t[::1] right,
                   const double[::1] value):
    cdef Py_ssize_t n = x.shape[0], h_count = roots.shape[0], n_trees = roots.shape[1]
    cdef Py_ssize_t h, j, i
    cdef cnp.int64_t node
    cdef cnp.int32_t v
    out_arr = np.zeros((h_count, n), dtype=np.float64)
    cdef double[:, ::1] out = out_arr
    with nogil:
        for h in range(h_count):
            for j in range(n_trees):
                for i in range(n):
                    node = roots[h, j]
                    v = var[node]
                    while v >= 0:
                        if x[i, v] < cut[node]:
                            node = left[node]
                        else:
                            node = right[node]
                        v = var[node]
                    out[h, i] = out[h, i] + value[node]
    return out_arr
