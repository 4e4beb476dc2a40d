"""numba kernels for histogram split search and tree traversal."""
import numpy as np
from numba import njit


@njit(cache=True)
def node_histograms(binned, rows, row_slot, n_slots, n_bins, grad, hess):
    """Per (slot, feature, bin) sums of gradient and hessian over ``rows``."""
    n_features = binned.shape[1]
    G = np.zeros((n_slots, n_features, n_bins))
    H = np.zeros((n_slots, n_features, n_bins))
    for ii in range(rows.shape[0]):
        i = rows[ii]
        s = row_slot[ii]
        g = grad[i]
        h = hess[i]
        for f in range(n_features):
            b = binned[i, f]
            G[s, f, b] += g
            H[s, f, b] += h
    return G, H


@njit(cache=True)
def ensemble_margins(X, offsets, feature, threshold, left, right, value, tree_class, base, n_classes):
    """Raw class scores for a flattened ensemble; trees are added in stored order."""
    n = X.shape[0]
    F = np.empty((n, n_classes))
    for i in range(n):
        for k in range(n_classes):
            F[i, k] = base[k]
    for t in range(tree_class.shape[0]):
        k = tree_class[t]
        o = offsets[t]
        for i in range(n):
            node = 0
            while feature[o + node] >= 0:
                if X[i, feature[o + node]] <= threshold[o + node]:
                    node = left[o + node]
                else:
                    node = right[o + node]
            F[i, k] += value[o + node]
    return F
