"""Delay embedding of a scalar series and its dominant-mode decomposition.

A window of n consecutive samples slides along the series; the windows form the
columns of the delay matrix H (constant along anti-diagonals). Column-wise time
derivatives come from finite differences, and a truncated SVD supplies the
dominant temporal modes used both for dimensionality reduction and as
pretraining targets downstream.
"""

import os
import numpy as np
from dataclasses import dataclass

from .dynsys import MeasurementSeries


@dataclass
class HankelEmbedding:
    H: np.ndarray       # (n, q), H[i, j] = y[i + j]
    Hdot: np.ndarray    # (n, q), d/dt along the column index
    tau: float
    n: int
    q: int


@dataclass
class SvdBasis:
    U_p: np.ndarray               # (n, p), orthonormal columns
    S_p: np.ndarray               # (p,), nonincreasing positive
    V_p: np.ndarray               # (q, p), orthonormal columns
    variance_captured: float

    @property
    def p(self):
        return len(self.S_p)


@dataclass
class DelayWindow:
    """Suggested embedding window plus an autocorrelation diagnostic."""

    n: int
    tau: float
    acf_first_zero_lag: int | None


def _moving_average5(y):
    kernel = np.full(5, 0.2)
    pad = np.concatenate([y[:2][::-1], y, y[-2:][::-1]])
    return np.convolve(pad, kernel, mode="valid")


def _diff_columns(H, tau):
    # centered differences on interior columns, one-sided second order at the ends
    q = H.shape[1]
    D = np.empty_like(H)
    D[:, 1:-1] = (H[:, 2:] - H[:, :-2]) / (2.0 * tau)
    D[:, 0] = (-3.0 * H[:, 0] + 4.0 * H[:, 1] - H[:, 2]) / (2.0 * tau)
    D[:, -1] = (3.0 * H[:, -1] - 4.0 * H[:, -2] + H[:, -3]) / (2.0 * tau)
    return D


def build_hankel(series, n, smooth=False):
    """Assemble the n x q delay matrix of the series, q = len - n + 1.

    smooth applies a 5-point moving average to the copy used for derivative
    estimation only; H itself always holds the raw samples.
    """
    if n < 2:
        raise ValueError("need at least 2 delays per column")
    y = np.asarray(series.values, dtype=float)
    if len(y) < n + 2:
        raise ValueError(f"series too short: need at least {n + 2} samples, got {len(y)}")
    tau = series.dt
    if tau <= 0:
        raise ValueError("series must have a positive uniform sampling interval")
    q = len(y) - n + 1
    idx = np.arange(n)[:, None] + np.arange(q)[None, :]
    H = y[idx]
    if smooth:
        Hs = _moving_average5(y)[idx]
        Hdot = _diff_columns(Hs, tau)
    else:
        Hdot = _diff_columns(H, tau)
    return HankelEmbedding(H=H, Hdot=Hdot, tau=tau, n=n, q=q)


def estimate_derivatives(embedding):
    """Column-wise time derivative of H; exact on constant and linear series."""
    if embedding.q < 3:
        raise ValueError("need q >= 3 columns to estimate derivatives")
    return _diff_columns(embedding.H, embedding.tau)


def truncated_svd(embedding, p):
    """Rank-p factorization of H with a fixed sign convention.

    Sign convention: the largest-magnitude entry of each U_p column is positive,
    so mode targets are reproducible run to run.
    """
    H = embedding.H
    if not 1 <= p <= min(H.shape):
        raise ValueError(f"p must be in [1, {min(H.shape)}], got {p}")
    U, s, Vt = np.linalg.svd(H, full_matrices=False)
    U_p = U[:, :p].copy()
    S_p = s[:p].copy()
    V_p = Vt[:p].T.copy()
    for k in range(p):
        j = np.argmax(np.abs(U_p[:, k]))
        if U_p[j, k] < 0:
            U_p[:, k] = -U_p[:, k]
            V_p[:, k] = -V_p[:, k]
    total = np.sum(s ** 2)
    vc = float(np.sum(S_p ** 2) / total) if total > 0 else 1.0
    return SvdBasis(U_p=U_p, S_p=S_p, V_p=V_p, variance_captured=vc)


def project(h, basis):
    """U_p^T h for a single n-vector or a stack of columns (n, k)."""
    h = np.asarray(h, dtype=float)
    if h.shape[0] != basis.U_p.shape[0]:
        raise ValueError(f"row dimension {h.shape[0]} != n = {basis.U_p.shape[0]}")
    return basis.U_p.T @ h


def lift(w, basis):
    """Adjoint of project: map p coordinates back to the n-dimensional window."""
    w = np.asarray(w, dtype=float)
    if w.shape[0] != basis.U_p.shape[1]:
        raise ValueError(f"row dimension {w.shape[0]} != p = {basis.U_p.shape[1]}")
    return basis.U_p @ w


def suggest_delay_window(series, target=0.1):
    """Window suggestion: n*tau near the target unfolding window, n in [8, 512].

    The first zero crossing of the autocorrelation is reported as a diagnostic
    for how fast the signal decorrelates; it does not drive the choice of n.
    """
    if len(series) < 256:
        raise ValueError(f"need at least 256 samples, got {len(series)}")
    tau = series.dt
    n = int(round(target / tau))
    n = max(8, min(512, n))
    c = series.values - np.mean(series.values)
    denom = np.dot(c, c)
    lag = None
    if denom > 0:
        for k in range(1, len(c) // 2):
            if np.dot(c[:-k], c[k:]) / denom <= 0:
                lag = k
                break
    return DelayWindow(n=n, tau=tau, acf_first_zero_lag=lag)


# On-disk form: one CSV per matrix plus a small key=value metadata text file.

def _save_matrix(M, path):
    np.savetxt(path, M, delimiter=",", fmt="%.17g")


def _load_matrix(path):
    return np.loadtxt(path, delimiter=",", ndmin=2)


def save_embedding(embedding, outdir, basis=None):
    os.makedirs(outdir, exist_ok=True)
    _save_matrix(embedding.H, os.path.join(outdir, "hankel.csv"))
    _save_matrix(embedding.Hdot, os.path.join(outdir, "hankel_dot.csv"))
    meta = {"n": embedding.n, "q": embedding.q, "tau": "%.17g" % embedding.tau}
    if basis is not None:
        _save_matrix(basis.U_p, os.path.join(outdir, "svd_u.csv"))
        _save_matrix(basis.S_p[:, None], os.path.join(outdir, "svd_s.csv"))
        _save_matrix(basis.V_p, os.path.join(outdir, "svd_v.csv"))
        meta["p"] = basis.p
        meta["variance_captured"] = "%.17g" % basis.variance_captured
    with open(os.path.join(outdir, "embedding_meta.txt"), "w") as fh:
        for k, v in meta.items():
            fh.write(f"{k}={v}\n")


def load_embedding(outdir):
    meta = {}
    with open(os.path.join(outdir, "embedding_meta.txt")) as fh:
        for line in fh:
            k, _, v = line.strip().partition("=")
            meta[k] = v
    emb = HankelEmbedding(H=_load_matrix(os.path.join(outdir, "hankel.csv")),
                          Hdot=_load_matrix(os.path.join(outdir, "hankel_dot.csv")),
                          tau=float(meta["tau"]), n=int(meta["n"]), q=int(meta["q"]))
    basis = None
    if "p" in meta:
        basis = SvdBasis(U_p=_load_matrix(os.path.join(outdir, "svd_u.csv")),
                         S_p=_load_matrix(os.path.join(outdir, "svd_s.csv")).ravel(),
                         V_p=_load_matrix(os.path.join(outdir, "svd_v.csv")),
                         variance_captured=float(meta["variance_captured"]))
    return emb, basis
