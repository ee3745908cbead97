"""Shared test utilities: finite-difference oracles over parameter stores."""

import numpy as np

from driftrec.autodiff import ParamStore


def fd_param_gradient(loss_of_store, store: ParamStore, step: float) -> np.ndarray:
    """Central-difference gradient of a scalar loss over every parameter."""
    base = store.flatten()
    grad = np.zeros_like(base)
    probe = store.copy()
    for i in range(base.size):
        delta = np.zeros_like(base)
        delta[i] = step
        probe.unflatten(base + delta)
        hi = loss_of_store(probe)
        probe.unflatten(base - delta)
        lo = loss_of_store(probe)
        grad[i] = (hi - lo) / (2.0 * step)
    return grad


def max_rel_err(analytic: np.ndarray, numeric: np.ndarray) -> float:
    analytic = np.asarray(analytic, dtype=float).ravel()
    numeric = np.asarray(numeric, dtype=float).ravel()
    return float(np.max(np.abs(analytic - numeric) /
                        (np.abs(analytic) + np.abs(numeric) + 1e-8)))
