"""Candidate-function libraries and sparse regression of dynamics.

A library term is either a monomial, stored as a tuple of per-variable
exponents, or a trig term stored as ("sin", i) / ("cos", i). Monomials come
first in graded lexicographic order (the all-zero tuple is the constant), trig
terms after, so term r-indices are stable across runs and machines.
"""

import math
import warnings
from dataclasses import dataclass
from itertools import product

import numpy as np

from .dynsys import SystemDef, simulate


@dataclass(frozen=True)
class FeatureLibrary:
    dim: int
    terms: tuple
    include_constant: bool = True

    @property
    def r(self):
        return len(self.terms)


@dataclass
class SindyModel:
    library: FeatureLibrary
    Xi: np.ndarray      # (r, m)
    mask: np.ndarray    # (r, m) bool; Xi is exactly zero off the mask

    def __post_init__(self):
        self.Xi = np.asarray(self.Xi, dtype=float)
        self.mask = np.asarray(self.mask, dtype=bool)
        if self.Xi.shape != (self.library.r, self.library.dim):
            raise ValueError(f"Xi must be ({self.library.r}, {self.library.dim})")
        if self.mask.shape != self.Xi.shape:
            raise ValueError("mask shape must match Xi")
        self.Xi = np.where(self.mask, self.Xi, 0.0)

    @property
    def active_count(self):
        return int(np.sum(self.mask))


def _is_trig(term):
    return isinstance(term[0], str)


def build_library(dim, max_degree, trig=False, include_constant=True):
    """All monomials of total degree <= max_degree, optionally sin/cos per variable."""
    if dim < 1 or max_degree < 1:
        raise ValueError("dim and max_degree must be at least 1")
    monos = [e for e in product(range(max_degree + 1), repeat=dim) if sum(e) <= max_degree]
    if not include_constant:
        monos = [e for e in monos if sum(e) > 0]
    monos.sort(key=lambda e: (sum(e), tuple(-x for x in e)))
    terms = list(monos)
    if trig:
        terms += sorted(((f, i) for f in ("sin", "cos") for i in range(dim)))
    lib = FeatureLibrary(dim=dim, terms=tuple(terms), include_constant=include_constant)
    if not trig and include_constant:
        assert lib.r == math.comb(dim + max_degree, max_degree)
    return lib


def evaluate_library(lib, Z):
    """Evaluate every term row-wise: Z (q, m) or (m,) -> Theta (q, r) or (r,)."""
    Z = np.asarray(Z, dtype=float)
    single = Z.ndim == 1
    Z = np.atleast_2d(Z)
    if Z.shape[1] != lib.dim:
        raise ValueError(f"expected {lib.dim} columns, got {Z.shape[1]}")
    cols = []
    for term in lib.terms:
        if _is_trig(term):
            f, i = term
            cols.append(np.sin(Z[:, i]) if f == "sin" else np.cos(Z[:, i]))
        else:
            col = np.ones(Z.shape[0])
            for i, e in enumerate(term):
                if e:
                    col = col * Z[:, i] ** e
            cols.append(col)
    Theta = np.stack(cols, axis=1)
    return Theta[0] if single else Theta


def library_jacobian(lib, z):
    """Analytic partials of every term: z (m,) -> (r, m), or batched (q, m) -> (q, r, m)."""
    z = np.asarray(z, dtype=float)
    single = z.ndim == 1
    Z = np.atleast_2d(z)
    q = Z.shape[0]
    J = np.zeros((q, lib.r, lib.dim))
    for t, term in enumerate(lib.terms):
        if _is_trig(term):
            f, i = term
            J[:, t, i] = np.cos(Z[:, i]) if f == "sin" else -np.sin(Z[:, i])
            continue
        for j, e in enumerate(term):
            if e == 0:
                continue
            col = np.full(q, float(e))
            for i, ei in enumerate(term):
                pw = ei - 1 if i == j else ei
                if pw:
                    col = col * Z[:, i] ** pw
            J[:, t, j] = col
    return J[0] if single else J


def stlsq(Theta, Zdot, threshold, ridge=1e-6, max_iters=25, normalize=False):
    """Sequentially thresholded least squares, one regression per output dimension.

    Returns (Xi, mask). Coefficients with |xi| < threshold are zeroed and their
    columns dropped from the next solve, until the active set stops changing.
    threshold=0 is a plain (ridge) least-squares fit. With normalize, the Theta
    columns are scaled to unit norm before solving and the coefficients rescaled
    after; the threshold always tests the rescaled values.
    """
    Theta = np.asarray(Theta, dtype=float)
    Zdot = np.atleast_2d(np.asarray(Zdot, dtype=float))
    if Zdot.shape[0] != Theta.shape[0]:
        raise ValueError("Theta and Zdot row counts differ")
    q, r = Theta.shape
    m = Zdot.shape[1]
    if q < r:
        warnings.warn(f"underdetermined regression: {q} samples for {r} terms")
    scale = np.ones(r)
    if normalize:
        scale = np.linalg.norm(Theta, axis=0)
        scale[scale == 0] = 1.0
        Theta = Theta / scale
    Xi = np.zeros((r, m))
    mask = np.zeros((r, m), dtype=bool)
    for d in range(m):
        active = np.ones(r, dtype=bool)
        coefs = np.zeros(r)
        for _ in range(max_iters):
            if not np.any(active):
                break
            A = Theta[:, active]
            b = Zdot[:, d]
            if ridge > 0:
                G = A.T @ A + ridge * np.eye(A.shape[1])
                try:
                    sol = np.linalg.solve(G, A.T @ b)
                except np.linalg.LinAlgError:
                    warnings.warn("rank-deficient active set; using minimum-norm solution")
                    sol = np.linalg.lstsq(A, b, rcond=None)[0]
            else:
                sol, _, rank, _ = np.linalg.lstsq(A, b, rcond=None)
                if rank < A.shape[1]:
                    warnings.warn("rank-deficient active set; using minimum-norm solution")
            coefs = np.zeros(r)
            coefs[active] = sol / scale[active]
            keep = np.abs(coefs) >= threshold if threshold > 0 else active.copy()
            keep &= active
            if np.array_equal(keep, active):
                break
            active = keep
        coefs[~active] = 0.0
        Xi[:, d] = coefs
        mask[:, d] = active & (np.abs(coefs) > 0) if threshold > 0 else active
    return Xi, mask


def simulate_sindy(model, z0, dt, steps):
    """Integrate zdot = Theta(z) Xi with the same RK4 stepper as the benchmarks."""
    lib = model.library
    Xi = model.Xi
    rhs = lambda z, _params: evaluate_library(lib, z) @ Xi
    sys = SystemDef(name="sindy", dim=lib.dim, params=np.zeros(0), rhs=rhs)
    return simulate(sys, z0, dt, steps, burn_in=0)


def term_name(term, var_names, product_sep=" "):
    if _is_trig(term):
        f, i = term
        return f"{f}({var_names[i]})"
    parts = []
    for i, e in enumerate(term):
        if e == 1:
            parts.append(var_names[i])
        elif e > 1:
            parts.append(f"{var_names[i]}^{e}")
    return product_sep.join(parts) if parts else "1"


def term_names(lib, var_names=None):
    """Header-style names: 1, z1, z2, z1^2, z1*z2, ..."""
    if var_names is None:
        var_names = [f"z{i + 1}" for i in range(lib.dim)]
    return [term_name(t, var_names, product_sep="*") for t in lib.terms]


def _fmt_coef(c, precision):
    s = f"{c:.{precision}f}"
    if "." in s:
        s = s.rstrip("0")
        if s.endswith("."):
            s += "0"
    return s


def format_equations(model, var_names=None, precision=3):
    """Human-readable equations, one line per latent dimension, zero terms omitted."""
    lib = model.library
    if var_names is None:
        var_names = [f"z{i + 1}" for i in range(lib.dim)]
    if len(var_names) != lib.dim:
        raise ValueError("need one variable name per dimension")
    lines = []
    for d in range(lib.dim):
        pieces = []
        for t, term in enumerate(lib.terms):
            c = model.Xi[t, d]
            if not model.mask[t, d] or c == 0.0:
                continue
            name = term_name(term, var_names)
            mag = _fmt_coef(abs(c), precision)
            body = mag if name == "1" else f"{mag} {name}"
            if not pieces:
                pieces.append(body if c > 0 else f"-{body}")
            else:
                pieces.append(("+ " if c > 0 else "- ") + body)
        rhs = " ".join(pieces) if pieces else "0"
        lines.append(f"d{var_names[d]}/dt = {rhs}")
    return "\n".join(lines)


def export_coefficients(model, path, var_names=None):
    """Coefficient matrix as CSV: one header row of term names, one row per equation."""
    names = term_names(model.library, var_names)
    with open(path, "w") as fh:
        fh.write(",".join(names) + "\n")
        for d in range(model.library.dim):
            fh.write(",".join("%.17g" % v for v in model.Xi[:, d]) + "\n")


def _expand_affine_term(term, scale, offset):
    # product_i (scale_i w_i + offset_i)^{e_i} as {exponent tuple: coefficient}
    dim = len(term)
    expansion = {tuple([0] * dim): 1.0}
    for i, e in enumerate(term):
        for _ in range(e):
            new = {}
            for exps, c in expansion.items():
                up = list(exps)
                up[i] += 1
                key = tuple(up)
                new[key] = new.get(key, 0.0) + c * scale[i]
                if offset[i] != 0.0:
                    new[exps] = new.get(exps, 0.0) + c * offset[i]
            expansion = new
    return expansion


def affine_substitute(lib, Xi, scale, offset):
    """Coefficients for the affinely transformed variables.

    Given zdot = Theta(z) Xi and z = scale * w + offset (componentwise), returns
    Xi' with wdot = Theta(w) Xi'. Polynomial libraries only; the degree is
    preserved, so the same library describes both charts. Applying the map with
    (1/scale, -offset/scale) inverts it.
    """
    if any(_is_trig(t) for t in lib.terms):
        raise ValueError("affine substitution is only defined for polynomial libraries")
    scale = np.asarray(scale, dtype=float)
    offset = np.asarray(offset, dtype=float)
    if scale.shape != (lib.dim,) or offset.shape != (lib.dim,):
        raise ValueError("scale and offset must have one entry per dimension")
    index = {term: t for t, term in enumerate(lib.terms)}
    M = np.zeros((lib.r, lib.r))
    for j, term in enumerate(lib.terms):
        for exps, c in _expand_affine_term(term, scale, offset).items():
            if exps not in index:
                raise ValueError(f"library lacks the term {exps} needed by the substitution")
            M[index[exps], j] += c
    return (M @ Xi) / scale[None, :]
