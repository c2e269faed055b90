"""Classical classifiers for deep features: RBF SVM (SMO), k-NN and L-BFGS logistic regression.

All three follow the scikit-learn estimator protocol so they drop into
pipelines, ``clone`` and ``cross_val_score``. Internally everything runs in
float64.
"""

from __future__ import annotations

import itertools
import logging
from dataclasses import dataclass

import numpy as np
from sklearn.base import BaseEstimator, ClassifierMixin
from sklearn.utils.validation import check_array, check_is_fitted, check_X_y

from .errors import InputError, NumericError

logger = logging.getLogger(__name__)


def gamma_scale(features):
    """The ``gamma="scale"`` heuristic: 1 / (n_features * Var(X)) over all entries."""
    x = np.asarray(features, dtype=np.float64)
    if x.ndim != 2 or x.shape[0] < 2:
        raise InputError(f"gamma_scale needs an N x D matrix with N >= 2, got shape {x.shape}")
    var = x.var()
    if var == 0:
        raise InputError("gamma_scale is undefined for constant features (zero variance)")
    return 1.0 / (x.shape[1] * var)


def rbf_kernel(x, y, gamma):
    """exp(-gamma * ||x - y||^2) for two vectors."""
    x, y = np.asarray(x, dtype=np.float64), np.asarray(y, dtype=np.float64)
    if x.shape != y.shape:
        raise InputError(f"rbf_kernel length mismatch: {x.shape} vs {y.shape}")
    if gamma <= 0:
        raise InputError(f"gamma must be positive, got {gamma}")
    d = x - y
    return float(np.exp(-gamma * np.dot(d, d)))


def rbf_kernel_matrix(a, b, gamma):
    a, b = np.asarray(a, dtype=np.float64), np.asarray(b, dtype=np.float64)
    sq = (a * a).sum(1)[:, None] + (b * b).sum(1)[None, :] - 2.0 * a @ b.T
    return np.exp(-gamma * np.maximum(sq, 0.0))


# ---------------------------------------------------------------------------
# SMO


@dataclass
class SMOResult:
    alpha: np.ndarray
    bias: float
    n_iter: int
    kkt_gap: float
    converged: bool

    def dual_objective(self, kernel, y):
        ay = self.alpha * y
        return float(self.alpha.sum() - 0.5 * ay @ kernel @ ay)


def smo_solve(kernel, y, C, tol=1e-5, max_iter=None):
    """Solve the soft-margin SVM dual for a precomputed kernel matrix.

    Maximizes sum(a) - 1/2 sum_ij a_i a_j y_i y_j K_ij subject to
    0 <= a_i <= C and sum(a_i y_i) = 0. Pairs are chosen by the maximal
    violating index and the partner giving the largest second-order
    decrease; stops when the KKT gap m(a) - M(a) falls below ``tol``.
    """
    K = np.asarray(kernel, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    n = len(y)
    if max_iter is None:
        max_iter = max(10_000_000, 100 * n)
    tau = 1e-12
    alpha = np.zeros(n)
    grad = -np.ones(n)  # gradient of 1/2 a'Qa - e'a
    diag = np.diag(K).copy()
    it = 0
    gap = np.inf
    while it < max_iter:
        up = ((y > 0) & (alpha < C)) | ((y < 0) & (alpha > 0))
        low = ((y > 0) & (alpha > 0)) | ((y < 0) & (alpha < C))
        score = -y * grad
        if not up.any() or not low.any():
            gap = 0.0
            break
        i = int(np.flatnonzero(up)[np.argmax(score[up])])
        g_max = score[i]
        g_min = score[low].min()
        gap = g_max - g_min
        if gap < tol:
            break
        cand = low & (score < g_max)
        b = g_max - score
        a = diag[i] + diag - 2.0 * K[i]
        a = np.where(a > 0, a, tau)
        obj = np.where(cand, -(b * b) / a, np.inf)
        j = int(np.argmin(obj))
        if not np.isfinite(obj[j]):
            break

        ai_old, aj_old = alpha[i], alpha[j]
        yi, yj = y[i], y[j]
        kij = K[i, j]
        quad = max(diag[i] + diag[j] - 2.0 * kij, tau)
        if yi != yj:
            delta = (-grad[i] - grad[j]) / quad
            diff = ai_old - aj_old
            ai, aj = ai_old + delta, aj_old + delta
            if diff > 0:
                if aj < 0:
                    aj, ai = 0.0, diff
            elif ai < 0:
                ai, aj = 0.0, -diff
            if diff > 0:
                if ai > C:
                    ai, aj = C, C - diff
            elif aj > C:
                aj, ai = C, C + diff
        else:
            delta = (grad[i] - grad[j]) / quad
            total = ai_old + aj_old
            ai, aj = ai_old - delta, aj_old + delta
            if total > C:
                if ai > C:
                    ai, aj = C, total - C
            elif aj < 0:
                aj, ai = 0.0, total
            if total > C:
                if aj > C:
                    aj, ai = C, total - C
            elif ai < 0:
                ai, aj = 0.0, total
        alpha[i], alpha[j] = ai, aj
        # Q_it = y_i y_t K_it
        grad += y * (K[i] * (yi * (ai - ai_old)) + K[j] * (yj * (aj - aj_old)))
        it += 1
    else:
        logger.warning("SMO hit max_iter=%d with KKT gap %.3g", max_iter, gap)

    # intercept: average over free vectors, else midpoint of the feasible interval
    yg = y * grad
    free = (alpha > 0) & (alpha < C)
    if free.any():
        rho = yg[free].mean()
    else:
        ub_mask = ((y > 0) & (alpha >= C)) | ((y < 0) & (alpha <= 0))
        lb_mask = ((y > 0) & (alpha <= 0)) | ((y < 0) & (alpha >= C))
        ub = yg[lb_mask].min() if lb_mask.any() else np.inf
        lb = yg[ub_mask].max() if ub_mask.any() else -np.inf
        rho = 0.5 * (ub + lb) if np.isfinite(ub) and np.isfinite(lb) else 0.0
    return SMOResult(alpha=alpha, bias=-float(rho), n_iter=it, kkt_gap=float(gap), converged=gap < tol)


class SMOSupportVectorClassifier(ClassifierMixin, BaseEstimator):
    """RBF-kernel SVM trained by SMO; one-vs-one voting by default.

    Parameters
    ----------
    C : float
        Box constraint on every dual coefficient.
    gamma : float or "scale"
        RBF width; "scale" uses :func:`gamma_scale` on the training matrix.
    tol : float
        KKT gap at which each binary SMO solve stops.
    multiclass : {"ovo", "ovr"}
        Pairwise voting or one-vs-rest argmax.
    sv_threshold : float
        Dual coefficients at or below this are dropped from the support set.
    """

    def __init__(self, C=10.0, gamma="scale", tol=1e-5, multiclass="ovo", sv_threshold=1e-8):
        self.C = C
        self.gamma = gamma
        self.tol = tol
        self.multiclass = multiclass
        self.sv_threshold = sv_threshold

    def fit(self, X, y):
        X, y = check_X_y(X, y, dtype=np.float64)
        self.classes_, y_idx = np.unique(y, return_inverse=True)
        if len(self.classes_) < 2:
            raise InputError("SVM needs at least two classes")
        if self.multiclass not in ("ovo", "ovr"):
            raise InputError(f"multiclass must be 'ovo' or 'ovr', got {self.multiclass!r}")
        self.gamma_ = gamma_scale(X) if self.gamma == "scale" else float(self.gamma)
        self.n_features_in_ = X.shape[1]
        k = len(self.classes_)
        if self.multiclass == "ovo":
            problems = [(a, b) for a, b in itertools.combinations(range(k), 2)]
        else:
            problems = [(a, -1) for a in range(k)] if k > 2 else [(0, 1)]

        used = np.zeros(len(X), dtype=bool)
        raw = []
        self.binary_results_ = []
        for a, b in problems:
            rows = np.flatnonzero((y_idx == a) | (y_idx == b)) if b >= 0 else np.arange(len(X))
            yb = np.where(y_idx[rows] == a, 1.0, -1.0)
            res = smo_solve(rbf_kernel_matrix(X[rows], X[rows], self.gamma_), yb, self.C, self.tol)
            self.binary_results_.append(res)
            keep = res.alpha > self.sv_threshold
            used[rows[keep]] = True
            raw.append((rows[keep], res.alpha[keep] * yb[keep], res.bias))

        self.support_ = np.flatnonzero(used)
        self.support_vectors_ = X[self.support_]
        pos = np.full(len(X), -1)
        pos[self.support_] = np.arange(len(self.support_))
        self.dual_coef_ = np.zeros((len(problems), len(self.support_)))
        self.intercept_ = np.zeros(len(problems))
        for p, (rows, coef, bias) in enumerate(raw):
            self.dual_coef_[p, pos[rows]] = coef
            self.intercept_[p] = bias
        self.pairs_ = np.array([(a, b) for a, b in problems], dtype=np.int64)
        return self

    def decision_function(self, X):
        check_is_fitted(self, "support_vectors_")
        X = check_array(X, dtype=np.float64)
        if X.shape[1] != self.n_features_in_:
            raise InputError(f"expected {self.n_features_in_} features, got {X.shape[1]}")
        kern = rbf_kernel_matrix(X, self.support_vectors_, self.gamma_)
        return kern @ self.dual_coef_.T + self.intercept_

    def predict(self, X):
        dec = self.decision_function(X)
        k = len(self.classes_)
        if self.multiclass == "ovr" and k > 2:
            return self.classes_[dec.argmax(axis=1)]
        if k == 2:
            return self.classes_[np.where(dec[:, 0] > 0, 0, 1)]
        votes = np.zeros((len(dec), k), dtype=np.int64)
        strength = np.zeros((len(dec), k))
        rows = np.arange(len(dec))
        for p, (a, b) in enumerate(self.pairs_):
            winner = np.where(dec[:, p] > 0, a, b)
            votes[rows, winner] += 1
            strength[rows, winner] += np.abs(dec[:, p])
        top = votes == votes.max(axis=1, keepdims=True)
        # among top-voted classes the largest summed |decision| wins; argmax keeps the lowest index
        key = np.where(top, strength, -np.inf)
        return self.classes_[key.argmax(axis=1)]


# ---------------------------------------------------------------------------
# k-NN


class KNearestNeighborsClassifier(ClassifierMixin, BaseEstimator):
    """Uniform-vote k-NN under Euclidean distance.

    Distance ties go to the lower stored index, vote ties to the lowest class.
    """

    def __init__(self, n_neighbors=5, chunk_size=256):
        self.n_neighbors = n_neighbors
        self.chunk_size = chunk_size

    def fit(self, X, y):
        X, y = check_X_y(X, y, dtype=np.float64)
        self.classes_, self.y_idx_ = np.unique(y, return_inverse=True)
        if self.n_neighbors > len(X):
            raise InputError(f"k={self.n_neighbors} exceeds the {len(X)} stored rows")
        if self.n_neighbors < 1:
            raise InputError(f"k must be positive, got {self.n_neighbors}")
        self.X_ = X
        self.n_features_in_ = X.shape[1]
        return self

    def kneighbors(self, X):
        check_is_fitted(self, "X_")
        X = check_array(X, dtype=np.float64)
        if X.shape[1] != self.n_features_in_:
            raise InputError(f"expected {self.n_features_in_} features, got {X.shape[1]}")
        out = []
        for s in range(0, len(X), self.chunk_size):
            q = X[s:s + self.chunk_size]
            diff = q[:, None, :] - self.X_[None, :, :]
            dist = np.einsum("qnd,qnd->qn", diff, diff)
            out.append(np.argsort(dist, axis=1, kind="stable")[:, :self.n_neighbors])
        return np.concatenate(out, axis=0) if out else np.zeros((0, self.n_neighbors), dtype=np.int64)

    def predict(self, X):
        nbrs = self.kneighbors(X)
        k = len(self.classes_)
        labels = self.y_idx_[nbrs]
        counts = np.zeros((len(nbrs), k), dtype=np.int64)
        for col in range(labels.shape[1]):
            counts[np.arange(len(nbrs)), labels[:, col]] += 1
        return self.classes_[counts.argmax(axis=1)]


# ---------------------------------------------------------------------------
# L-BFGS logistic regression


@dataclass
class LBFGSResult:
    x: np.ndarray
    fun: float
    grad_norm: float
    n_iter: int
    converged: bool


def lbfgs_minimize(fun_grad, x0, max_iter=1000, tol=1e-5, history=10, c1=1e-4, max_backtracks=60):
    """Limited-memory BFGS with a backtracking sufficient-decrease line search.

    ``fun_grad(x) -> (f, g)``. Stops when ||g||_2 <= tol or after
    ``max_iter`` iterations.
    """
    x = np.array(x0, dtype=np.float64)
    f, g = fun_grad(x)
    if not np.isfinite(f):
        raise NumericError("non-finite objective at iteration 0")
    s_hist, y_hist, rho_hist = [], [], []
    it = 0
    gnorm = float(np.linalg.norm(g))
    while gnorm > tol and it < max_iter:
        # two-loop recursion
        q = g.copy()
        alphas = []
        for s, yv, rho in zip(reversed(s_hist), reversed(y_hist), reversed(rho_hist)):
            a = rho * (s @ q)
            q -= a * yv
            alphas.append(a)
        if s_hist:
            q *= (s_hist[-1] @ y_hist[-1]) / (y_hist[-1] @ y_hist[-1])
        else:
            q /= max(gnorm, 1.0)
        for (s, yv, rho), a in zip(zip(s_hist, y_hist, rho_hist), reversed(alphas)):
            b = rho * (yv @ q)
            q += (a - b) * s
        d = -q
        slope = g @ d
        if slope >= 0:  # not a descent direction; reset memory
            s_hist.clear(), y_hist.clear(), rho_hist.clear()
            d = -g / max(gnorm, 1.0)
            slope = g @ d

        step = 1.0
        for _ in range(max_backtracks):
            x_new = x + step * d
            f_new, g_new = fun_grad(x_new)
            if np.isfinite(f_new) and f_new <= f + c1 * step * slope:
                break
            step *= 0.5
        else:
            if not np.isfinite(f_new):
                raise NumericError(f"non-finite objective at iteration {it + 1}")
            break  # no progress possible at machine precision
        it += 1
        s_vec, y_vec = x_new - x, g_new - g
        sy = s_vec @ y_vec
        if sy > 1e-10 * np.sqrt((s_vec @ s_vec) * (y_vec @ y_vec)):
            s_hist.append(s_vec)
            y_hist.append(y_vec)
            rho_hist.append(1.0 / sy)
            if len(s_hist) > history:
                s_hist.pop(0), y_hist.pop(0), rho_hist.pop(0)
        x, f, g = x_new, f_new, g_new
        gnorm = float(np.linalg.norm(g))
    return LBFGSResult(x=x, fun=float(f), grad_norm=gnorm, n_iter=it, converged=gnorm <= tol)


def logreg_objective(params, X, Y, C):
    """Mean multinomial cross-entropy + ||W||^2 / (2 C N); bias unregularized.

    ``params`` is W (K x D) flattened followed by b (K); ``Y`` is one-hot.
    Returns ``(value, gradient)``.
    """
    n, d = X.shape
    k = Y.shape[1]
    W = params[:k * d].reshape(k, d)
    b = params[k * d:]
    z = X @ W.T + b
    z -= z.max(axis=1, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=1))
    loss = np.mean(lse - (z * Y).sum(axis=1)) + (W * W).sum() / (2 * C * n)
    p = np.exp(z - lse[:, None])
    r = (p - Y) / n
    gW = r.T @ X + W / (C * n)
    gb = r.sum(axis=0)
    return float(loss), np.concatenate([gW.ravel(), gb])


class LBFGSLogisticRegression(ClassifierMixin, BaseEstimator):
    """Multinomial logistic regression with L2 penalty, fitted by L-BFGS.

    ``n_iter_`` and ``converged_`` report whether the gradient-norm
    tolerance was reached within ``max_iter``.
    """

    def __init__(self, C=1.0, max_iter=1000, tol=1e-5, history=10):
        self.C = C
        self.max_iter = max_iter
        self.tol = tol
        self.history = history

    def fit(self, X, y):
        X, y = check_X_y(X, y, dtype=np.float64)
        self.classes_, y_idx = np.unique(y, return_inverse=True)
        k = len(self.classes_)
        if k < 2:
            raise InputError("logistic regression needs at least two classes")
        n, d = X.shape
        Y = np.zeros((n, k))
        Y[np.arange(n), y_idx] = 1.0
        res = lbfgs_minimize(lambda p: logreg_objective(p, X, Y, self.C), np.zeros(k * d + k),
                             self.max_iter, self.tol, self.history)
        self.coef_ = res.x[:k * d].reshape(k, d)
        self.intercept_ = res.x[k * d:]
        self.n_iter_ = res.n_iter
        self.converged_ = res.converged
        self.objective_ = res.fun
        self.grad_norm_ = res.grad_norm
        self.n_features_in_ = d
        if not res.converged:
            logger.warning("L-BFGS stopped at %d iterations with gradient norm %.3g", res.n_iter, res.grad_norm)
        return self

    def decision_function(self, X):
        check_is_fitted(self, "coef_")
        X = check_array(X, dtype=np.float64)
        if X.shape[1] != self.n_features_in_:
            raise InputError(f"expected {self.n_features_in_} features, got {X.shape[1]}")
        return X @ self.coef_.T + self.intercept_

    def predict_proba(self, X):
        z = self.decision_function(X)
        z -= z.max(axis=1, keepdims=True)
        e = np.exp(z)
        return e / e.sum(axis=1, keepdims=True)

    def predict(self, X):
        return self.classes_[self.decision_function(X).argmax(axis=1)]


CLASSIFIERS = {
    "svm": lambda: SMOSupportVectorClassifier(C=10.0, gamma="scale"),
    "knn": lambda: KNearestNeighborsClassifier(n_neighbors=5),
    "logreg": lambda: LBFGSLogisticRegression(C=1.0, max_iter=1000),
}


def make_classifier(which):
    try:
        return CLASSIFIERS[which]()
    except KeyError:
        raise InputError(f"unknown classifier {which!r}; expected one of {sorted(CLASSIFIERS)}") from None


def svm_train(features, labels, C=10.0, gamma="scale"):
    return SMOSupportVectorClassifier(C=C, gamma=gamma).fit(features, labels)


def svm_predict(model, features):
    return model.predict(features)


def knn_predict(model, query):
    return model.predict(np.atleast_2d(query))


def logreg_train(features, labels, C=1.0, max_iter=1000):
    return LBFGSLogisticRegression(C=C, max_iter=max_iter).fit(features, labels)
