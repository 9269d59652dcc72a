"""Tabular MDP solvers shared by the learner and the exact oracle.

All functions operate on dense arrays: transition tensor ``P`` of shape
(S, A, S) whose masked rows sum to one, expected one-step rewards ``r_sa``
of shape (S, A), and a boolean feasibility/visitation ``mask`` of shape
(S, A).  States with no admissible action keep value 0 and action -1.
"""
from __future__ import annotations

import numpy as np


def value_iteration(P, r_sa, mask, gamma, tol=1e-9, max_iter=200_000, v0=None):
    """Discounted value iteration.

    Returns (V, policy, deltas) where ``deltas`` is the sup-norm change per
    sweep (useful for contraction diagnostics) and ``policy[s]`` is the
    argmax action index or -1 where no action is admissible.
    """
    S, A, _ = P.shape
    V = np.zeros(S) if v0 is None else np.asarray(v0, dtype=float).copy()
    deltas = []
    neg = -np.inf
    for _ in range(max_iter):
        Q = r_sa + gamma * (P @ V)
        Q = np.where(mask, Q, neg)
        newV = Q.max(axis=1)
        newV[~mask.any(axis=1)] = 0.0
        delta = float(np.max(np.abs(newV - V)))
        deltas.append(delta)
        V = newV
        if delta < tol:
            break
    Q = np.where(mask, r_sa + gamma * (P @ V), neg)
    policy = np.where(mask.any(axis=1), Q.argmax(axis=1), -1)
    return V, policy.astype(np.int64), deltas


def relative_value_iteration(P, r_sa, mask, tol=1e-10, max_iter=500_000, ref=0):
    """Average-reward relative value iteration on a (near-)unichain model.

    Returns (gain, bias, policy, converged).  The gain is bracketed by the
    span of the Bellman increment; convergence means the span fell below
    ``tol``.
    """
    S, A, _ = P.shape
    h = np.zeros(S)
    neg = -np.inf
    admissible = mask.any(axis=1)
    gain = 0.0
    converged = False
    for _ in range(max_iter):
        Q = np.where(mask, r_sa + P @ h, neg)
        Th = Q.max(axis=1)
        Th[~admissible] = h[~admissible]
        inc = Th - h
        inc_adm = inc[admissible]
        span = float(inc_adm.max() - inc_adm.min())
        gain = float(Th[ref] - h[ref])
        h = Th - Th[ref]
        if span < tol:
            converged = True
            break
    Q = np.where(mask, r_sa + P @ h, neg)
    policy = np.where(admissible, Q.argmax(axis=1), -1)
    return gain, h, policy.astype(np.int64), converged


def policy_evaluation_discounted(P_pi, r_pi, gamma):
    """Solve (I - gamma * P) V = r for a fixed policy chain (dense)."""
    S = P_pi.shape[0]
    return np.linalg.solve(np.eye(S) - gamma * P_pi, r_pi)


def stationary_gain(P_pi, r_pi, start):
    """Long-run average reward of a small dense chain started at ``start``.

    Handles several recurrent classes by exact absorption weighting.
    Returns (gain, occupation distribution).
    """
    import scipy.sparse as sp
    from scipy.sparse.csgraph import breadth_first_order, connected_components

    S = P_pi.shape[0]
    spP = sp.csr_matrix(P_pi)
    n_comp, labels = connected_components(spP, directed=True, connection="strong")
    coo = spP.tocoo()
    out_edges = np.zeros(n_comp, dtype=bool)
    leaving = labels[coo.row] != labels[coo.col]
    out_edges[np.unique(labels[coo.row[leaving]])] = True
    order = breadth_first_order(spP, start, directed=True, return_predecessors=False)
    reachable = np.zeros(S, dtype=bool)
    reachable[np.atleast_1d(order)] = True
    recurrent = ~out_edges[labels]
    comps = np.unique(labels[reachable & recurrent])
    if len(comps) == 0:
        raise ValueError("no recurrent class reachable from the start state")

    def class_dist(comp):
        members = np.flatnonzero(labels == comp)
        sub = P_pi[np.ix_(members, members)]
        m = len(members)
        A = sub.T - np.eye(m)
        A[-1, :] = 1.0
        b = np.zeros(m)
        b[-1] = 1.0
        d = np.linalg.solve(A, b)
        full = np.zeros(S)
        full[members] = np.clip(d, 0.0, None)
        return full / full.sum()

    if len(comps) == 1:
        pi = class_dist(comps[0])
    elif recurrent[start]:
        pi = class_dist(labels[start])
    else:
        t_idx = np.flatnonzero(reachable & ~recurrent)
        pos = {s: i for i, s in enumerate(t_idx)}
        Q = P_pi[np.ix_(t_idx, t_idx)]
        lhs = np.eye(len(t_idx)) - Q
        pi = np.zeros(S)
        for comp in comps:
            members = np.flatnonzero(labels == comp)
            b = P_pi[np.ix_(t_idx, members)].sum(axis=1)
            h = np.linalg.solve(lhs, b)
            a = float(h[pos[start]])
            if a > 0:
                pi = pi + a * class_dist(comp)
        pi /= pi.sum()
    return float(pi @ r_pi), pi
