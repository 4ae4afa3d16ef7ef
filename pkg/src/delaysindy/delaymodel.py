"""Joint training of a delay-coordinate autoencoder with sparse latent dynamics.

The model maps delay windows h (optionally first projected onto the dominant
SVD modes) through an encoder to latent coordinates z, fits zdot = Theta(z) Xi
in that chart, and decodes back. Six terms are optimized together:

  total = recon + l1*hdot + l2*zdot + l3*z1 + l4*cons + l5*reg

where recon is the autoencoder reconstruction, hdot/zdot tie the chain-rule
derivatives of the two maps to the fitted dynamics, z1 pins the first latent
coordinate to the measured signal, cons integrates the fitted dynamics forward
with RK4 and compares against the window's own future samples (backpropagating
through every integration stage and the encoder initial condition), and reg is
the L1 norm of the active coefficients. Periodic thresholded regression refits
swap in a fresh sparse coefficient set; between refits masked entries stay
exactly zero but may be revived by the next refit.
"""

import os
import warnings
from dataclasses import dataclass, field

import numpy as np

from .dynsys import DIVERGENCE_CAP, IntegrationDiverged, MeasurementSeries
from .hankel import SvdBasis, truncated_svd
from .neural import (
    NumericError, TangentPair, adam_update, backward, forward,
    forward_with_tangent, grads_as_params, init_adam, init_network,
    load_network, network_params, save_network, set_network_params,
)
from .sindy import (
    SindyModel, affine_substitute, build_library, evaluate_library,
    library_jacobian, stlsq,
)

# state clamp for consistency rollouts during training; generous for data on a
# standardized scale, tight enough that no polynomial library overflows a step
CONS_CLAMP = 1e3


@dataclass
class LossWeights:
    lambda1: float = 1e-4   # hdot
    lambda2: float = 1e-4   # zdot
    lambda3: float = 1.0    # z1
    lambda4: float = 1e-2   # cons
    lambda5: float = 1e-5   # reg


@dataclass
class LossBreakdown:
    recon: float
    hdot: float
    zdot: float
    z1: float
    cons: float
    reg: float
    total: float


@dataclass
class TrainConfig:
    epochs: int = 500
    batch_size: int = 128
    lr: float = 1e-3
    refit_period: int = 25
    stlsq_threshold: float = 0.1
    stlsq_ridge: float = 1e-6
    stlsq_normalize: bool = False
    rollout_steps: int = 8
    init_mode: str = "random"   # supervised | known_equation | perturbed | random
    perturb_sigma: float = 0.0
    pretrain_epochs: int = 0
    seed: int = 0
    max_columns: int | None = None  # cap on training columns (evenly subsampled)
    grad_clip: float = 10.0


@dataclass
class DelayModel:
    encoder: object
    decoder: object
    sindy: SindyModel
    basis: SvdBasis | None
    weights: LossWeights
    tau: float
    xi_trainable: bool = True

    @property
    def m(self):
        return self.sindy.library.dim

    @property
    def n(self):
        if self.basis is not None:
            return self.basis.U_p.shape[0]
        return self.decoder.layer_dims[-1]


@dataclass
class TrainReport:
    losses: list = field(default_factory=list)        # LossBreakdown per epoch
    active_terms: list = field(default_factory=list)
    sup_losses: list = field(default_factory=list)
    clamp_events: list = field(default_factory=list)
    xi_history: list = field(default_factory=list)
    aborted: bool = False
    aborted_epoch: int | None = None

    def final(self):
        return self.losses[-1] if self.losses else None

    def to_csv(self, path):
        with open(path, "w") as fh:
            fh.write("epoch,recon,hdot,zdot,z1,cons,reg,total,active_terms\n")
            for e, (bd, at) in enumerate(zip(self.losses, self.active_terms), start=1):
                vals = [bd.recon, bd.hdot, bd.zdot, bd.z1, bd.cons, bd.reg, bd.total]
                fh.write(str(e) + "," + ",".join("%.17g" % v for v in vals)
                         + f",{at}\n")


@dataclass
class EvalMetrics:
    recon_mse: float
    z1_mse: float
    active_terms: int
    pred_mse: float
    pred_horizon: int
    two_lobe_sign_changes: int
    bounded: bool


def standardize_series(series):
    """Center and scale to unit variance; returns (series, mean, std)."""
    mean = float(np.mean(series.values))
    std = float(np.std(series.values))
    if std == 0:
        raise ValueError("constant series cannot be standardized")
    out = MeasurementSeries(times=series.times.copy(),
                            values=(series.values - mean) / std,
                            source_component=series.source_component)
    return out, mean, std


def true_xi(name, params, library):
    """Exact library coefficients of a builtin system in its raw coordinates."""
    p = np.asarray(params, dtype=float)
    if name == "lorenz":
        s, r, b = p
        cols = [{(1, 0, 0): -s, (0, 1, 0): s},
                {(1, 0, 0): r, (0, 1, 0): -1.0, (1, 0, 1): -1.0},
                {(1, 1, 0): 1.0, (0, 0, 1): -b}]
    elif name == "rossler":
        a, b = p
        cols = [{(0, 1, 0): -1.0, (0, 0, 1): -1.0},
                {(1, 0, 0): 1.0, (0, 1, 0): a},
                {(0, 0, 0): a, (1, 0, 1): 1.0, (0, 0, 1): -b}]
    elif name == "lotka_volterra":
        a, b, c, d = p
        cols = [{(1, 0): a, (1, 1): b},
                {(0, 1): c, (1, 1): d}]
    else:
        raise ValueError(f"no reference coefficients for {name!r}")
    if library.dim != len(cols):
        raise ValueError(f"{name} needs a {len(cols)}-dimensional library")
    index = {term: i for i, term in enumerate(library.terms)}
    Xi = np.zeros((library.r, library.dim))
    for d, coeffs in enumerate(cols):
        for exps, val in coeffs.items():
            if exps not in index:
                raise ValueError(f"library lacks the term {exps}; raise max_degree")
            Xi[index[exps], d] = val
    return Xi


def standardized_true_xi(name, params, library, traj):
    """Reference coefficients in the per-component standardized chart.

    The chart is w_k = (x_k - mean_k) / std_k with moments taken from the
    trajectory, so the first latent coordinate lines up with the standardized
    measurement of component 0. Returns (Xi, mean, std).
    """
    mean = traj.states.mean(axis=0)
    std = traj.states.std(axis=0)
    Xi = affine_substitute(library, true_xi(name, params, library), std, mean)
    return Xi, mean, std


def assemble_model(embedding, p, m, hidden_dims=(64, 64, 64), degree=2, trig=False,
                   weights=None, activation="sigmoid", seed=0):
    """Wire encoder, decoder, library, and optional mode projection together.

    p=None skips the SVD projection and feeds raw delay windows to the encoder.
    Coefficients start at zero; pick a starting point with initialize_xi.
    """
    if m < 1:
        raise ValueError("latent dimension must be positive")
    if embedding.n <= 2 * m:
        warnings.warn(f"n={embedding.n} delays with m={m} latent dimensions is at "
                      f"or below the n > 2m unfolding guidance")
    if weights is None:
        weights = LossWeights()
    basis = truncated_svd(embedding, p) if p is not None else None
    width = p if p is not None else embedding.n
    encoder = init_network((width, *hidden_dims, m), activation=activation, seed=seed)
    decoder = init_network((m, *hidden_dims[::-1], width), activation=activation,
                           seed=seed + 1)
    library = build_library(m, degree, trig=trig)
    sindy = SindyModel(library, np.zeros((library.r, m)),
                       np.ones((library.r, m), dtype=bool))
    return DelayModel(encoder=encoder, decoder=decoder, sindy=sindy, basis=basis,
                      weights=weights, tau=embedding.tau)


def _f_vjp(lib, Xi, S, A):
    # f(S) = Theta(S) Xi; pull the adjoint A on f back to S and Xi
    Theta_S = evaluate_library(lib, S)
    gXi = Theta_S.T @ A
    J = library_jacobian(lib, S)
    a_S = np.einsum("br,brm->bm", A @ Xi.T, J)
    return a_S, gXi


def _rollout_forward(model, Z0, steps, dt, clamp):
    lib, Xi = model.sindy.library, model.sindy.Xi
    B, m = Z0.shape
    states = np.empty((steps, B, m))
    stages = []
    clamped = False
    z = Z0
    for j in range(steps):
        s1 = z
        k1 = evaluate_library(lib, s1) @ Xi
        s2 = z + (0.5 * dt) * k1
        k2 = evaluate_library(lib, s2) @ Xi
        s3 = z + (0.5 * dt) * k2
        k3 = evaluate_library(lib, s3) @ Xi
        s4 = z + dt * k3
        k4 = evaluate_library(lib, s4) @ Xi
        znew = z + (dt / 6.0) * (k1 + 2.0 * k2 + 2.0 * k3 + k4)
        if clamp is None:
            if not np.all(np.isfinite(znew)) or np.max(np.abs(znew)) > DIVERGENCE_CAP:
                raise IntegrationDiverged(j)
        else:
            if np.any(np.abs(znew) > clamp) or not np.all(np.isfinite(znew)):
                clamped = True
                znew = np.clip(np.nan_to_num(znew, nan=0.0, posinf=clamp, neginf=-clamp),
                               -clamp, clamp)
        states[j] = znew
        stages.append((s1, s2, s3, s4))
        z = znew
    return states, stages, clamped


def _rollout_backward(model, states, stages, adj_states, dt, clamp):
    lib, Xi = model.sindy.library, model.sindy.Xi
    steps = len(stages)
    adj = np.zeros_like(adj_states[0])
    grad_Xi = np.zeros_like(Xi)
    for j in reversed(range(steps)):
        adj = adj + adj_states[j]
        if clamp is not None:
            adj = adj * (np.abs(states[j]) < clamp)
        s1, s2, s3, s4 = stages[j]
        ak1 = (dt / 6.0) * adj
        ak2 = (dt / 3.0) * adj
        ak3 = (dt / 3.0) * adj
        ak4 = (dt / 6.0) * adj
        aw = adj.copy()
        a_s4, g4 = _f_vjp(lib, Xi, s4, ak4)
        aw += a_s4
        ak3 = ak3 + dt * a_s4
        a_s3, g3 = _f_vjp(lib, Xi, s3, ak3)
        aw += a_s3
        ak2 = ak2 + (0.5 * dt) * a_s3
        a_s2, g2 = _f_vjp(lib, Xi, s2, ak2)
        aw += a_s2
        ak1 = ak1 + (0.5 * dt) * a_s2
        a_s1, g1 = _f_vjp(lib, Xi, s1, ak1)
        aw += a_s1
        grad_Xi += g1 + g2 + g3 + g4
        adj = aw
    return adj, grad_Xi


def rollout_latent(model, z0, steps, dt=None, clamp=None):
    """Integrate the fitted dynamics from z0; row j is the state after step j+1.

    clamp=None raises IntegrationDiverged past the global cap; a float clamps
    states into [-clamp, clamp] instead (used inside training so one bad batch
    cannot kill a run).
    """
    dt = model.tau if dt is None else dt
    z0 = np.asarray(z0, dtype=float)
    single = z0.ndim == 1
    Z0 = np.atleast_2d(z0)
    states, _, _ = _rollout_forward(model, Z0, steps, dt, clamp)
    return states[:, 0, :] if single else states


def compute_losses(model, h, hdot, n_cons=0, want_grads=False, sup_targets=None,
                   lambda_sup=1.0, clamp=None, force_all=False):
    """All loss terms on a batch of delay windows, optionally with gradients.

    h, hdot: (B, n) batches of windows and their time derivatives. Norms are
    per-entry means so the values are comparable across window lengths. Terms
    whose weight is exactly zero are skipped and reported as 0.0 (the rollout
    dominates the cost) unless force_all is set; n_cons=0 always skips the
    rollout. sup_targets adds lambda_sup * mean((z - target)^2) to the gradient
    path; it is reported separately, never inside the breakdown.

    Returns (LossBreakdown, grads-or-None, info) where grads has per-layer
    encoder/decoder (dW, db) lists and the coefficient gradient, and info
    carries the supervised loss and a clamp flag.
    """
    h = np.atleast_2d(np.asarray(h, dtype=float))
    hdot = np.atleast_2d(np.asarray(hdot, dtype=float))
    B, n = h.shape
    lw = model.weights
    lib = model.sindy.library
    Xi = model.sindy.Xi
    mask = model.sindy.mask
    U = model.basis.U_p if model.basis is not None else None

    use_tangent = force_all or lw.lambda1 > 0 or lw.lambda2 > 0
    do_cons = n_cons >= 1 and (force_all or lw.lambda4 > 0)

    hp = h @ U if U is not None else h
    hpdot = hdot @ U if U is not None else hdot

    if use_tangent:
        enc_out, enc_cache = forward_with_tangent(model.encoder, TangentPair(hp, hpdot))
        z, zjvp = enc_out.value, enc_out.tangent
    else:
        z, enc_cache = forward(model.encoder, hp)
        zjvp = None

    Theta = evaluate_library(lib, z)
    zdot_model = Theta @ Xi if use_tangent else None

    if use_tangent:
        dec_out, dec_cache = forward_with_tangent(model.decoder, TangentPair(z, zdot_model))
        hrec_p, hdotrec_p = dec_out.value, dec_out.tangent
    else:
        hrec_p, dec_cache = forward(model.decoder, z)
        hdotrec_p = None

    hrec = hrec_p @ U.T if U is not None else hrec_p
    recon_v = float(np.mean((h - hrec) ** 2))
    z1_v = float(np.mean((h[:, 0] - z[:, 0]) ** 2))
    hdot_v = zdot_v = 0.0
    if use_tangent:
        hdotrec = hdotrec_p @ U.T if U is not None else hdotrec_p
        if force_all or lw.lambda1 > 0:
            hdot_v = float(np.mean((hdot - hdotrec) ** 2))
        if force_all or lw.lambda2 > 0:
            zdot_v = float(np.mean((zjvp - zdot_model) ** 2))

    cons_v = 0.0
    clamped = False
    roll = None
    if do_cons:
        states, stages, clamped = _rollout_forward(model, z, n_cons, model.tau, clamp)
        errs = states[:, :, 0] - h[:, 1:n_cons + 1].T
        cons_v = float(np.mean(errs ** 2))
        roll = (states, stages, errs)

    reg_v = float(np.sum(np.abs(Xi[mask])))
    sup_v = 0.0
    if sup_targets is not None:
        sup_targets = np.atleast_2d(np.asarray(sup_targets, dtype=float))
        sup_v = float(np.mean((z - sup_targets) ** 2))

    total = (recon_v + lw.lambda1 * hdot_v + lw.lambda2 * zdot_v + lw.lambda3 * z1_v
             + lw.lambda4 * cons_v + lw.lambda5 * reg_v)
    breakdown = LossBreakdown(recon=recon_v, hdot=hdot_v, zdot=zdot_v, z1=z1_v,
                              cons=cons_v, reg=reg_v, total=total)
    info = {"sup": sup_v, "clamped": clamped}
    if not want_grads:
        return breakdown, None, info

    Bn = h.size
    Bm = z.size
    adj_hrec_p = (2.0 / Bn) * (hrec - h)
    if U is not None:
        adj_hrec_p = adj_hrec_p @ U
    if use_tangent:
        adj_hdotrec_p = (lw.lambda1 * 2.0 / Bn) * (hdotrec - hdot)
        if U is not None:
            adj_hdotrec_p = adj_hdotrec_p @ U
        dz_dec, dzdot_dec, dec_grads = backward(model.decoder, dec_cache,
                                                adj_hrec_p, adj_hdotrec_p)
    else:
        dz_dec, _, dec_grads = backward(model.decoder, dec_cache, adj_hrec_p)
        dzdot_dec = None

    adj_z = dz_dec.copy()
    grad_Xi = np.zeros_like(Xi)

    if use_tangent:
        adj_zdot = dzdot_dec + (lw.lambda2 * 2.0 / Bm) * (zdot_model - zjvp)
        grad_Xi += Theta.T @ adj_zdot
        J = library_jacobian(lib, z)
        adj_z += np.einsum("br,brm->bm", adj_zdot @ Xi.T, J)
        adj_zjvp = (lw.lambda2 * 2.0 / Bm) * (zjvp - zdot_model)
    else:
        adj_zjvp = None

    adj_z[:, 0] += (lw.lambda3 * 2.0 / B) * (z[:, 0] - h[:, 0])
    if sup_targets is not None:
        adj_z += (lambda_sup * 2.0 / Bm) * (z - sup_targets)

    if do_cons:
        states, stages, errs = roll
        adj_states = np.zeros_like(states)
        adj_states[:, :, 0] = (lw.lambda4 * 2.0 / errs.size) * errs
        adj_z0, gXi_roll = _rollout_backward(model, states, stages, adj_states,
                                             model.tau, clamp)
        adj_z += adj_z0
        grad_Xi += gXi_roll

    grad_Xi += lw.lambda5 * np.sign(Xi)
    grad_Xi *= mask

    if use_tangent:
        _, _, enc_grads = backward(model.encoder, enc_cache, adj_z, adj_zjvp)
    else:
        _, _, enc_grads = backward(model.encoder, enc_cache, adj_z)

    grads = {"encoder": enc_grads, "decoder": dec_grads, "xi": grad_Xi}
    return breakdown, grads, info


def initialize_xi(model, mode, true_xi=None, sigma=0.0, seed=0):
    """Pick the coefficient starting point for one of the four training regimes.

    known_equation copies true_xi and freezes it (excluded from the optimizer,
    mask = nonzero pattern). perturbed draws Normal(true_xi, sigma), trainable.
    random and supervised draw Normal(0, 0.1); supervised additionally expects
    full-state targets at train time.
    """
    r, m = model.sindy.Xi.shape
    lib = model.sindy.library
    rng = np.random.default_rng(seed)
    if mode in ("known_equation", "perturbed"):
        if true_xi is None:
            raise ValueError(f"{mode} initialization requires true_xi")
        true_xi = np.asarray(true_xi, dtype=float)
        if true_xi.shape != (r, m):
            raise ValueError(f"true_xi must be ({r}, {m})")
    if mode == "known_equation":
        model.sindy = SindyModel(lib, true_xi.copy(), true_xi != 0)
        model.xi_trainable = False
    elif mode == "perturbed":
        model.sindy = SindyModel(lib, rng.normal(true_xi, sigma),
                                 np.ones((r, m), dtype=bool))
        model.xi_trainable = True
    elif mode in ("random", "supervised"):
        model.sindy = SindyModel(lib, rng.normal(0.0, 0.1, size=(r, m)),
                                 np.ones((r, m), dtype=bool))
        model.xi_trainable = True
    else:
        raise ValueError(f"unknown init mode {mode!r}")
    return model


def pretrain_to_svd_modes(model, embedding, epochs, lr=1e-3, batch_size=256, seed=0):
    """Warm-start the autoencoder on the dominant-mode coordinates.

    Encoder learns to map projected windows to the first m scaled temporal
    modes; decoder learns the reverse. Because the lift is orthonormal, fitting
    the decoder against projected windows has the same gradients as fitting
    against the full windows. The dynamics terms stay off during this stage.
    """
    if model.basis is None:
        raise ValueError("pretraining needs an SVD basis")
    if model.basis.p < model.m:
        raise ValueError(f"need p >= m, got p={model.basis.p}, m={model.m}")
    if epochs <= 0:
        return model
    HP = embedding.H.T @ model.basis.U_p                       # (q, p)
    V = model.basis.V_p[:, :model.m] * model.basis.S_p[:model.m]   # (q, m) targets
    q = HP.shape[0]
    rng = np.random.default_rng(seed)
    params = network_params(model.encoder) + network_params(model.decoder)
    state = init_adam(params, lr=lr)
    n_enc = 2 * len(model.encoder.weights)
    for _ in range(epochs):
        order = rng.permutation(q)
        for lo in range(0, q, batch_size):
            idx = order[lo:lo + batch_size]
            hp_b, v_b = HP[idx], V[idx]
            ze, cache_e = forward(model.encoder, hp_b)
            re = ze - v_b
            _, _, ge = backward(model.encoder, cache_e, (2.0 / re.size) * re)
            hd, cache_d = forward(model.decoder, v_b)
            rd = hd - hp_b
            _, _, gd = backward(model.decoder, cache_d, (2.0 / rd.size) * rd)
            params = network_params(model.encoder) + network_params(model.decoder)
            grads = grads_as_params(ge) + grads_as_params(gd)
            params, state = adam_update(params, grads, state)
            set_network_params(model.encoder, params[:n_enc])
            set_network_params(model.decoder, params[n_enc:])
    return model


def _snapshot(model):
    return ([W.copy() for W in model.encoder.weights],
            [b.copy() for b in model.encoder.biases],
            [W.copy() for W in model.decoder.weights],
            [b.copy() for b in model.decoder.biases],
            model.sindy.Xi.copy(), model.sindy.mask.copy())


def _restore(model, snap):
    ew, eb, dw, db, Xi, mask = snap
    model.encoder.weights = [W.copy() for W in ew]
    model.encoder.biases = [b.copy() for b in eb]
    model.decoder.weights = [W.copy() for W in dw]
    model.decoder.biases = [b.copy() for b in db]
    model.sindy = SindyModel(model.sindy.library, Xi.copy(), mask.copy())


def _encode_all(model, embedding):
    H_cols = embedding.H.T
    Hdot_cols = embedding.Hdot.T
    U = model.basis.U_p if model.basis is not None else None
    hp = H_cols @ U if U is not None else H_cols
    hpdot = Hdot_cols @ U if U is not None else Hdot_cols
    pair, _ = forward_with_tangent(model.encoder, TangentPair(hp, hpdot))
    return pair.value, pair.tangent


def _refit(model, embedding, config):
    Z, Zdot = _encode_all(model, embedding)
    Theta = evaluate_library(model.sindy.library, Z)
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")  # near-collinear latents are routine mid-training
        Xi, mask = stlsq(Theta, Zdot, threshold=config.stlsq_threshold,
                         ridge=config.stlsq_ridge, normalize=config.stlsq_normalize)
    model.sindy = SindyModel(model.sindy.library, Xi, mask)


def train(model, embedding, config, sup_targets=None, lambda_sup=1.0):
    """Minibatch Adam over the joint loss with periodic sparse refits.

    Callers choose the coefficient starting point with initialize_xi first;
    config.init_mode only controls mode-specific behavior here (the supervised
    target term). Frozen coefficients are never touched by the optimizer or the
    refits. A non-finite loss aborts and restores the last completed epoch.
    Returns (model, TrainReport).
    """
    if config.refit_period < 1:
        raise ValueError("refit_period must be >= 1")
    if not 1 <= config.rollout_steps <= embedding.n - 1:
        raise ValueError(f"rollout_steps must be in [1, {embedding.n - 1}]")
    rng = np.random.default_rng(config.seed)
    if config.pretrain_epochs > 0:
        pretrain_to_svd_modes(model, embedding, config.pretrain_epochs,
                              lr=config.lr, seed=config.seed)

    H_cols = embedding.H.T
    Hdot_cols = embedding.Hdot.T
    valid = embedding.q - config.rollout_steps
    if valid < 1:
        raise ValueError("not enough columns for the requested rollout length")
    pool = np.arange(valid)
    if config.max_columns is not None and valid > config.max_columns:
        pool = np.unique(np.linspace(0, valid - 1, config.max_columns).astype(int))

    use_sup = sup_targets is not None and config.init_mode == "supervised"
    if use_sup:
        sup_targets = np.asarray(sup_targets, dtype=float)
        if sup_targets.shape[0] < valid:
            raise ValueError("supervised targets must cover every training column")

    def params_of(model):
        ps = network_params(model.encoder) + network_params(model.decoder)
        if model.xi_trainable:
            ps = ps + [model.sindy.Xi]
        return ps

    def install(model, ps):
        ne = 2 * len(model.encoder.weights)
        nd = 2 * len(model.decoder.weights)
        set_network_params(model.encoder, ps[:ne])
        set_network_params(model.decoder, ps[ne:ne + nd])
        if model.xi_trainable:
            model.sindy = SindyModel(model.sindy.library, ps[-1], model.sindy.mask)

    state = init_adam(params_of(model), lr=config.lr)
    report = TrainReport()
    snap = _snapshot(model)

    for epoch in range(1, config.epochs + 1):
        order = rng.permutation(pool)
        batch_bds, batch_sups = [], []
        clamp_count = 0
        failed = False
        for lo in range(0, len(order), config.batch_size):
            idx = order[lo:lo + config.batch_size]
            st = sup_targets[idx] if use_sup else None
            try:
                bd, grads, info = compute_losses(
                    model, H_cols[idx], Hdot_cols[idx], n_cons=config.rollout_steps,
                    want_grads=True, sup_targets=st, lambda_sup=lambda_sup,
                    clamp=CONS_CLAMP)
            except NumericError:
                failed = True
                break
            if not np.isfinite(bd.total + info["sup"]):
                failed = True
                break
            flat = grads_as_params(grads["encoder"]) + grads_as_params(grads["decoder"])
            if model.xi_trainable:
                flat = flat + [grads["xi"]]
            norm = np.sqrt(sum(float(np.sum(g * g)) for g in flat))
            if config.grad_clip and norm > config.grad_clip:
                flat = [g * (config.grad_clip / norm) for g in flat]
            ps, state = adam_update(params_of(model), flat, state)
            install(model, ps)
            batch_bds.append(bd)
            batch_sups.append(info["sup"])
            clamp_count += bool(info["clamped"])
        if failed:
            _restore(model, snap)
            report.aborted = True
            report.aborted_epoch = epoch
            break

        avg = lambda vals: float(np.mean(vals)) if vals else 0.0
        bd = LossBreakdown(*(avg([getattr(b, f) for b in batch_bds])
                             for f in ("recon", "hdot", "zdot", "z1", "cons", "reg", "total")))
        report.losses.append(bd)
        report.active_terms.append(model.sindy.active_count)
        report.sup_losses.append(avg(batch_sups))
        report.clamp_events.append(clamp_count)
        report.xi_history.append(model.sindy.Xi.copy())

        if model.xi_trainable and epoch % config.refit_period == 0:
            _refit(model, embedding, config)
            # stale moments make no sense for freshly regressed coefficients
            if model.xi_trainable:
                state.m[-1] = np.zeros_like(model.sindy.Xi)
                state.v[-1] = np.zeros_like(model.sindy.Xi)

        snap = _snapshot(model)
    return model, report


def evaluate(model, embedding, horizon, starts=None, long_steps=10_000):
    """Reconstruction/anchoring accuracy plus forecast and attractor-shape probes.

    Forecast: encode a window, integrate `horizon` steps, compare the first
    latent coordinate against the measured future samples. Shape probe: one long
    rollout; boundedness means it never left the divergence cap, and the
    indicator counts mean-crossings of the second latent coordinate.
    """
    H_cols = embedding.H.T
    q = embedding.q
    U = model.basis.U_p if model.basis is not None else None
    hp = H_cols @ U if U is not None else H_cols
    z, _ = forward(model.encoder, hp)
    hrec_p, _ = forward(model.decoder, z)
    hrec = hrec_p @ U.T if U is not None else hrec_p
    recon_mse = float(np.mean((H_cols - hrec) ** 2))
    z1_mse = float(np.mean((H_cols[:, 0] - z[:, 0]) ** 2))

    if starts is None:
        hi = q - horizon - 1
        starts = np.unique(np.linspace(0, max(hi, 0), 8).astype(int))
    starts = np.asarray(starts, dtype=int)
    starts = starts[(starts >= 0) & (starts + horizon < q)]
    if len(starts) == 0:
        raise ValueError("no valid forecast start indices for this horizon")
    Z0 = z[starts]
    future = np.stack([H_cols[i + 1:i + horizon + 1, 0] for i in starts])  # (S, horizon)
    states, _, _ = _rollout_forward(model, Z0, horizon, model.tau, clamp=CONS_CLAMP)
    pred = states[:, :, 0].T
    pred_mse = float(np.mean((pred - future) ** 2))

    bounded = True
    sign_changes = 0
    try:
        roll = rollout_latent(model, z[q // 2], long_steps, clamp=None)
        coord = roll[:, 1] if model.m >= 2 else roll[:, 0]
        centered = coord - np.mean(coord)
        sign_changes = int(np.sum(np.diff(np.sign(centered)) != 0))
    except IntegrationDiverged:
        bounded = False
    return EvalMetrics(recon_mse=recon_mse, z1_mse=z1_mse,
                       active_terms=model.sindy.active_count,
                       pred_mse=pred_mse, pred_horizon=int(horizon),
                       two_lobe_sign_changes=sign_changes, bounded=bounded)


def save_model(model, outdir, extra=None):
    """Checkpoint: network dumps, coefficient and mask CSVs, key=value manifest."""
    os.makedirs(outdir, exist_ok=True)
    save_network(model.encoder, os.path.join(outdir, "encoder.txt"))
    save_network(model.decoder, os.path.join(outdir, "decoder.txt"))
    np.savetxt(os.path.join(outdir, "xi.csv"), model.sindy.Xi,
               delimiter=",", fmt="%.17g")
    np.savetxt(os.path.join(outdir, "mask.csv"), model.sindy.mask.astype(int),
               delimiter=",", fmt="%d")
    lib = model.sindy.library
    degree = max(sum(t) for t in lib.terms if not isinstance(t[0], str))
    trig = any(isinstance(t[0], str) for t in lib.terms)
    manifest = {
        "m": model.m, "n": model.n, "degree": degree, "trig": int(trig),
        "include_constant": int(lib.include_constant),
        "tau": "%.17g" % model.tau, "xi_trainable": int(model.xi_trainable),
        "p": "" if model.basis is None else model.basis.p,
        "lambda1": "%.17g" % model.weights.lambda1,
        "lambda2": "%.17g" % model.weights.lambda2,
        "lambda3": "%.17g" % model.weights.lambda3,
        "lambda4": "%.17g" % model.weights.lambda4,
        "lambda5": "%.17g" % model.weights.lambda5,
    }
    if extra:
        manifest.update(extra)
    with open(os.path.join(outdir, "model_manifest.txt"), "w") as fh:
        for k, v in manifest.items():
            fh.write(f"{k}={v}\n")
    if model.basis is not None:
        np.savetxt(os.path.join(outdir, "svd_u.csv"), model.basis.U_p,
                   delimiter=",", fmt="%.17g")
        np.savetxt(os.path.join(outdir, "svd_s.csv"), model.basis.S_p[:, None],
                   delimiter=",", fmt="%.17g")
        np.savetxt(os.path.join(outdir, "svd_v.csv"), model.basis.V_p,
                   delimiter=",", fmt="%.17g")
        with open(os.path.join(outdir, "svd_vc.txt"), "w") as fh:
            fh.write("%.17g\n" % model.basis.variance_captured)


def load_model(outdir):
    """Rebuild a checkpointed model; returns (model, manifest dict)."""
    manifest = {}
    with open(os.path.join(outdir, "model_manifest.txt")) as fh:
        for line in fh:
            k, _, v = line.rstrip("\n").partition("=")
            manifest[k] = v
    encoder = load_network(os.path.join(outdir, "encoder.txt"))
    decoder = load_network(os.path.join(outdir, "decoder.txt"))
    m = int(manifest["m"])
    library = build_library(m, int(manifest["degree"]), trig=bool(int(manifest["trig"])),
                            include_constant=bool(int(manifest.get("include_constant", "1"))))
    Xi = np.loadtxt(os.path.join(outdir, "xi.csv"), delimiter=",", ndmin=2)
    mask = np.loadtxt(os.path.join(outdir, "mask.csv"), delimiter=",", ndmin=2) != 0
    basis = None
    if manifest["p"]:
        basis = SvdBasis(
            U_p=np.loadtxt(os.path.join(outdir, "svd_u.csv"), delimiter=",", ndmin=2),
            S_p=np.loadtxt(os.path.join(outdir, "svd_s.csv"), delimiter=",", ndmin=2).ravel(),
            V_p=np.loadtxt(os.path.join(outdir, "svd_v.csv"), delimiter=",", ndmin=2),
            variance_captured=float(open(os.path.join(outdir, "svd_vc.txt")).read()))
    weights = LossWeights(lambda1=float(manifest["lambda1"]),
                          lambda2=float(manifest["lambda2"]),
                          lambda3=float(manifest["lambda3"]),
                          lambda4=float(manifest["lambda4"]),
                          lambda5=float(manifest["lambda5"]))
    model = DelayModel(encoder=encoder, decoder=decoder,
                       sindy=SindyModel(library, Xi, mask), basis=basis,
                       weights=weights, tau=float(manifest["tau"]),
                       xi_trainable=bool(int(manifest["xi_trainable"])))
    return model, manifest
