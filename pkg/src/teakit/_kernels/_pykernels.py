"""Pure numpy implementations of the hot kernels.

Semantics (including the order in which random numbers are consumed) must
stay identical to ``_ckernels.pyx``; tests compare the two bit for bit.
"""

import math

import numpy as np

BACKEND = "python"


def match_sorted(q_t, q_z, pool_t, pool_z, order, key, omega, nu2):
    """Range query on the first treatment column, then box and caliper filters.

    ``order`` sorts the pool by its first treatment column, ``key`` holds
    the sorted values. Returns CSR arrays with ascending pool indices per row.
    """
    nq = q_t.shape[0]
    indptr = np.zeros(nq + 1, dtype=np.int64)
    chunks = []
    lo_all = np.searchsorted(key, q_t[:, 0] - omega[0], side="right")
    hi_all = np.searchsorted(key, q_t[:, 0] + omega[0], side="left")
    for i in range(nq):
        cand = order[lo_all[i]:hi_all[i]]
        if cand.size:
            ok = np.all(np.abs(pool_t[cand] - q_t[i]) < omega, axis=1)
            cand = cand[ok]
        if cand.size:
            d = pool_z[cand] - q_z[i]
            cand = cand[np.einsum("ij,ij->i", d, d) < nu2]
            cand = np.sort(cand)
        chunks.append(cand)
        indptr[i + 1] = indptr[i] + cand.size
    indices = np.concatenate(chunks).astype(np.int64) if chunks else np.zeros(0, np.int64)
    return indptr, indices


def nearest_fallback(q_tw, q_z, pool_tw, pool_z, c):
    """Per query: among the ``c`` pool members closest in (whitened)
    treatment space, the one closest in confounder space.

    Ties are broken by pool index in both stages.
    """
    nq = q_tw.shape[0]
    m = pool_tw.shape[0]
    c = min(c, m)
    out = np.empty(nq, dtype=np.int64)
    for i in range(nq):
        dt = pool_tw - q_tw[i]
        dt = np.einsum("ij,ij->i", dt, dt)
        near = np.lexsort((np.arange(m), dt))[:c]
        near = np.sort(near)
        dz = pool_z[near] - q_z[i]
        dz = np.einsum("ij,ij->i", dz, dz)
        out[i] = near[int(np.argmin(dz))]
    return out


# ---------------------------------------------------------------- BART

def _leaf_loglik(n, s, sigma2, tau2):
    return -0.5 * math.log(1.0 + n * tau2 / sigma2) + tau2 * s * s / (
        2.0 * sigma2 * (sigma2 + n * tau2))


def _depth(k):
    d = 0
    while k > 0:
        k = (k - 1) // 2
        d += 1
    return d


def _split_stats(labels, r):
    # bincount accumulates sequentially in index order, like the C loop
    n = np.bincount(labels, minlength=3)
    s = np.bincount(labels, weights=r, minlength=3)
    return int(n[0]), float(s[0]), int(n[1]), float(s[1])


def bart_sweep(xb, y, status, var, cut, mu, leaf_of, tree_fit, total_fit,
               sigma, tau, logp, log1mp, max_depth, p_grow, p_prune, n_cuts,
               U, Z, counts):
    """One backfitting pass over all trees. Arrays are updated in place.

    ``counts`` accumulates [grow proposed, grow accepted, prune proposed,
    prune accepted, change proposed, change accepted].
    """
    n_trees, n_nodes = status.shape
    n_vars = xb.shape[1]
    sigma2 = sigma * sigma
    tau2 = tau * tau
    r = np.empty_like(y)
    for j in range(n_trees):
        np.subtract(y, total_fit, out=r)
        r += tree_fit[j]
        st = status[j]
        lf = leaf_of[j]
        leaves = np.flatnonzero(st == 1)
        internal = np.flatnonzero(st == 2)
        n_leaf = leaves.size
        nogs = [k for k in internal if st[2 * k + 1] == 1 and st[2 * k + 2] == 1]
        n_nog = len(nogs)
        u_move, u_node, u_var, u_cut, u_acc = U[j]
        pg = p_grow
        if internal.size == 0:
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
            node = int(leaves[min(int(u_node * n_leaf), n_leaf - 1)])
            d = _depth(node)
            v = min(int(u_var * n_vars), n_vars - 1)
            c = min(int(u_cut * n_cuts), n_cuts - 1)
            if d < max_depth:
                labels = np.where(lf == node, np.where(xb[:, v] <= c, 0, 1), 2)
                nl, sl, nr, sr = _split_stats(labels, r)
                if nl > 0 and nr > 0:
                    lr = (_leaf_loglik(nl, sl, sigma2, tau2)
                          + _leaf_loglik(nr, sr, sigma2, tau2)
                          - _leaf_loglik(nl + nr, sl + sr, sigma2, tau2))
                    lr += logp[d] + 2.0 * log1mp[d + 1] - log1mp[d]
                    parent_nog = 0
                    if node > 0:
                        sib = node + 1 if node % 2 == 1 else node - 1
                        parent_nog = 1 if st[sib] == 1 else 0
                    n_nog_new = n_nog + 1 - parent_nog
                    lr += math.log(p_prune / n_nog_new) - math.log(pg / n_leaf)
                    if math.log(u_acc) < lr:
                        counts[1] += 1
                        st[node] = 2
                        var[j, node] = v
                        cut[j, node] = c
                        st[2 * node + 1] = 1
                        st[2 * node + 2] = 1
                        lf[labels == 0] = 2 * node + 1
                        lf[labels == 1] = 2 * node + 2
        elif move == 1:
            counts[2] += 1
            node = int(nogs[min(int(u_node * n_nog), n_nog - 1)])
            d = _depth(node)
            labels = np.where(lf == 2 * node + 1, 0, np.where(lf == 2 * node + 2, 1, 2))
            nl, sl, nr, sr = _split_stats(labels, r)
            lr = (_leaf_loglik(nl + nr, sl + sr, sigma2, tau2)
                  - _leaf_loglik(nl, sl, sigma2, tau2)
                  - _leaf_loglik(nr, sr, sigma2, tau2))
            lr -= logp[d] + 2.0 * log1mp[d + 1] - log1mp[d]
            pg_new = 1.0 if internal.size == 1 else p_grow
            lr += math.log(pg_new / (n_leaf - 1)) - math.log(p_prune / n_nog)
            if math.log(u_acc) < lr:
                counts[3] += 1
                st[node] = 1
                st[2 * node + 1] = 0
                st[2 * node + 2] = 0
                lf[labels < 2] = node
        else:
            counts[4] += 1
            node = int(nogs[min(int(u_node * n_nog), n_nog - 1)])
            v = min(int(u_var * n_vars), n_vars - 1)
            c = min(int(u_cut * n_cuts), n_cuts - 1)
            inside = (lf == 2 * node + 1) | (lf == 2 * node + 2)
            labels = np.where(inside, np.where(xb[:, v] <= c, 0, 1), 2)
            nl, sl, nr, sr = _split_stats(labels, r)
            if nl > 0 and nr > 0:
                old = np.where(lf == 2 * node + 1, 0, np.where(lf == 2 * node + 2, 1, 2))
                onl, osl, onr, osr = _split_stats(old, r)
                lr = (_leaf_loglik(nl, sl, sigma2, tau2)
                      + _leaf_loglik(nr, sr, sigma2, tau2)
                      - _leaf_loglik(onl, osl, sigma2, tau2)
                      - _leaf_loglik(onr, osr, sigma2, tau2))
                if math.log(u_acc) < lr:
                    counts[5] += 1
                    var[j, node] = v
                    cut[j, node] = c
                    lf[labels == 0] = 2 * node + 1
                    lf[labels == 1] = 2 * node + 2
        # Gibbs draw of the leaf means, leaves visited in heap order
        n_in = np.bincount(lf, minlength=n_nodes)
        s_in = np.bincount(lf, weights=r, minlength=n_nodes)
        leaves = np.flatnonzero(st == 1)
        for rank, k in enumerate(leaves):
            post_var = 1.0 / (n_in[k] / sigma2 + 1.0 / tau2)
            mu[j, k] = post_var * s_in[k] / sigma2 + math.sqrt(post_var) * Z[j, rank]
        new_fit = mu[j][lf]
        total_fit += new_fit - tree_fit[j]
        tree_fit[j] = new_fit


def export_forest(status, var, cut, mu, grid):
    """Compact preorder serialisation of every tree.

    Returns ``(var, cut, left, right, value, roots)``; leaves have
    ``var == -1`` and ``left == right == -1``.
    """
    out_var, out_cut, out_left, out_right, out_val = [], [], [], [], []
    roots = np.empty(status.shape[0], dtype=np.int64)
    for j in range(status.shape[0]):
        roots[j] = len(out_var)
        stack = [(0, -1, 0)]
        while stack:
            k, parent, side = stack.pop()
            pos = len(out_var)
            if parent >= 0:
                (out_left if side == 0 else out_right)[parent] = pos
            if status[j, k] == 2:
                v = int(var[j, k])
                out_var.append(v)
                out_cut.append(grid[v, cut[j, k]])
                out_left.append(-1)
                out_right.append(-1)
                out_val.append(0.0)
                stack.append((2 * k + 2, pos, 1))
                stack.append((2 * k + 1, pos, 0))
            else:
                out_var.append(-1)
                out_cut.append(0.0)
                out_left.append(-1)
                out_right.append(-1)
                out_val.append(mu[j, k])
    return (np.array(out_var, dtype=np.int32), np.array(out_cut, dtype=np.float64),
            np.array(out_left, dtype=np.int64), np.array(out_right, dtype=np.int64),
            np.array(out_val, dtype=np.float64), roots)


def forest_predict(x, roots, var, cut, left, right, value):
    """Sum-of-trees values, shape ``(H, n)``, for ``roots`` of shape ``(H, J)``."""
    n = x.shape[0]
    h_count, n_trees = roots.shape
    out = np.zeros((h_count, n))
    rows = np.arange(n)
    for h in range(h_count):
        acc = out[h]
        for j in range(n_trees):
            node = np.full(n, roots[h, j], dtype=np.int64)
            while True:
                v = var[node]
                active = v >= 0
                if not active.any():
                    break
                idx = rows[active]
                na = node[active]
                go_left = x[idx, v[active]] < cut[na]
                node[active] = np.where(go_left, left[na], right[na])
            acc += value[node]
    return out
