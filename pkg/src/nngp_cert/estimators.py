"""scikit-learn style wrappers around the kernel, certificate and random-network code."""

from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator, TransformerMixin
from sklearn.utils.validation import check_array, check_is_fitted

from .arch import ArchSpec, load_arch
from .certificate import certify
from .kernel import kernel_diag, kernel_matrix, smoothness_constants
from .randnet import gradient as net_gradient
from .randnet import init_random


def _arch(spec) -> ArchSpec:
    return spec if isinstance(spec, ArchSpec) else load_arch(spec)


class NNGPKernelMap(TransformerMixin, BaseEstimator):
    """Maps rows ``x`` to ``[K(x, x_1), ..., K(x, x_m)]`` against the fitted points."""

    def __init__(self, arch=None):
        self.arch = arch

    def fit(self, X, y=None):
        self.arch_ = _arch(self.arch)
        X = check_array(X)
        if X.shape[1] != self.arch_.n_inputs:
            raise ValueError(f"expected {self.arch_.n_inputs} features, got {X.shape[1]}")
        self.X_fit_ = X
        self.n_features_in_ = X.shape[1]
        return self

    def transform(self, X):
        check_is_fitted(self, "X_fit_")
        X = check_array(X)
        return kernel_matrix(self.arch_, X, self.X_fit_)


class CertifiedRadius(TransformerMixin, BaseEstimator):
    """Certified radii per input row: columns are the l1 ball radius and the segment length."""

    def __init__(self, arch=None, delta: float = 0.1, tight: bool = False):
        self.arch = arch
        self.delta = delta
        self.tight = tight

    def fit(self, X=None, y=None):
        self.arch_ = _arch(self.arch)
        self.M_ = smoothness_constants(self.arch_).M
        self.n_features_in_ = self.arch_.n_inputs
        return self

    def transform(self, X):
        check_is_fitted(self, "arch_")
        X = check_array(X)
        if X.shape[1] != self.n_features_in_:
            raise ValueError(f"expected {self.n_features_in_} features, got {X.shape[1]}")
        out = np.empty((len(X), 2))
        for i, x in enumerate(X):
            c = certify(float(np.linalg.norm(x)), self.delta, self.M_, self.n_features_in_,
                        p_values=(1.0,), tight=self.tight)
            out[i] = (c.r_l1, c.r_segment)
        return out


class RandomReLUClassifier(BaseEstimator):
    """A single random network draw used as a fixed binary classifier ``sign(phi)``.

    ``fit`` only draws the weights; labels are ignored.
    """

    def __init__(self, arch=None, widths=(256, 256, 256), seed: int = 0):
        self.arch = arch
        self.widths = widths
        self.seed = seed

    def fit(self, X=None, y=None):
        self.arch_ = _arch(self.arch)
        self.net_ = init_random(self.arch_, list(self.widths), self.seed)
        self.n_features_in_ = self.arch_.n_inputs
        self.classes_ = np.array([-1, 1])
        return self

    def decision_function(self, X):
        check_is_fitted(self, "net_")
        X = check_array(X)
        return self.net_.decision_function(X)

    def predict(self, X):
        return np.where(self.decision_function(X) >= 0, 1, -1)

    def gradient(self, X):
        check_is_fitted(self, "net_")
        X = check_array(X)
        return np.stack([net_gradient(self.net_, x) for x in X])

    def kernel_variance(self, X):
        """Infinite-width output variance ``K(x, x)`` at each row."""
        check_is_fitted(self, "arch_")
        return kernel_diag(self.arch_, check_array(X))


__all__ = ["NNGPKernelMap", "CertifiedRadius", "RandomReLUClassifier"]
