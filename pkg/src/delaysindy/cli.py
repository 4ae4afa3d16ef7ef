"""Command-line driver: simulate / embed / train / sweep / eval.

Every run is described by a RunConfig assembled from (in increasing priority)
dataclass defaults, a sectioned key=value config file, and command-line flags.
The assembled config is written back into the output directory as
``config_used.ini`` so any run can be replayed from its own artifacts; that
file's header comment carries the only timestamp any artifact contains.

Exit codes: 0 success, 2 usage/config error, 3 numeric divergence, 4 I/O error.
"""

import argparse
import configparser
import hashlib
import itertools
import os
import sys
import time
from dataclasses import dataclass, fields, replace

import numpy as np

from .dynsys import (DEFAULT_PARAMS, DEFAULT_X0, IntegrationDiverged,
                     MeasurementSeries, add_noise, builtin_system,
                     load_measurement, measure, save_measurement,
                     save_trajectory, simulate)
from .hankel import build_hankel, save_embedding, suggest_delay_window, truncated_svd
from .neural import NumericError
from .sindy import build_library, format_equations
from . import delaymodel as dm
from . import svgplot

WORKERS_ENV = "DELAYSINDY_WORKERS"


class UsageError(Exception):
    pass


# ---------------------------------------------------------------------------
# run configuration

@dataclass
class RunConfig:
    # data source: exactly one of system / input
    system: str = None
    params: tuple = None        # None -> builtin defaults
    x0: tuple = None
    input: str = None           # path to a measurement CSV
    dt: float = 0.002
    steps: int = 10_000
    burn_in: int = 1000
    component: int = 0
    noise_sigma: float = 0.0
    standardize: bool = True
    # embedding / library
    n: object = 50              # int or "auto"
    p: int = 10
    m: int = 3
    degree: int = 2
    trig: bool = False
    hidden: tuple = (64, 64, 64)
    # training
    init_mode: str = "random"
    epochs: int = 200
    batch_size: int = 512
    lr: float = 2e-3
    refit_period: int = 25
    stlsq_threshold: float = 0.1
    stlsq_ridge: float = 1e-6
    stlsq_normalize: bool = False
    rollout_steps: int = 8
    perturb_sigma: float = 1.0
    pretrain_epochs: int = 0
    max_columns: int = None
    grad_clip: float = 10.0
    seed: int = 0
    # loss weights
    lambda1: float = 1e-4
    lambda2: float = 1e-4
    lambda3: float = 1.0
    lambda4: float = 1e-2
    lambda5: float = 1e-5
    lambda_sup: float = 1.0
    # io
    out: str = "run_out"
    plot: bool = True
    # eval
    checkpoint: str = None
    horizon: int = 100


def _parse_bool(s):
    v = s.strip().lower()
    if v in ("true", "1", "yes", "on"):
        return True
    if v in ("false", "0", "no", "off"):
        return False
    raise UsageError(f"not a boolean: {s!r}")


def _parse_float_tuple(s):
    return tuple(float(t) for t in s.split(",") if t.strip())


def _parse_int_tuple(s):
    return tuple(int(t) for t in s.split(",") if t.strip())


def _opt(parser):
    def conv(s):
        return None if s.strip().lower() in ("", "none") else parser(s)
    return conv


def _parse_n(s):
    v = s.strip().lower()
    return "auto" if v == "auto" else int(s)


# field -> (section, string->value converter)
_FIELD_SPEC = {
    "system": ("data", _opt(str.strip)),
    "params": ("data", _opt(_parse_float_tuple)),
    "x0": ("data", _opt(_parse_float_tuple)),
    "input": ("data", _opt(str.strip)),
    "dt": ("data", float),
    "steps": ("data", int),
    "burn_in": ("data", int),
    "component": ("data", int),
    "noise_sigma": ("data", float),
    "standardize": ("data", _parse_bool),
    "n": ("embedding", _parse_n),
    "p": ("embedding", _opt(int)),
    "m": ("embedding", int),
    "degree": ("embedding", int),
    "trig": ("embedding", _parse_bool),
    "hidden": ("embedding", _parse_int_tuple),
    "init_mode": ("training", str.strip),
    "epochs": ("training", int),
    "batch_size": ("training", int),
    "lr": ("training", float),
    "refit_period": ("training", int),
    "stlsq_threshold": ("training", float),
    "stlsq_ridge": ("training", float),
    "stlsq_normalize": ("training", _parse_bool),
    "rollout_steps": ("training", int),
    "perturb_sigma": ("training", float),
    "pretrain_epochs": ("training", int),
    "max_columns": ("training", _opt(int)),
    "grad_clip": ("training", float),
    "seed": ("training", int),
    "lambda1": ("loss", float),
    "lambda2": ("loss", float),
    "lambda3": ("loss", float),
    "lambda4": ("loss", float),
    "lambda5": ("loss", float),
    "lambda_sup": ("loss", float),
    "out": ("io", str.strip),
    "plot": ("io", _parse_bool),
    "checkpoint": ("eval", _opt(str.strip)),
    "horizon": ("eval", int),
}

_SECTIONS = ("data", "embedding", "training", "loss", "io", "eval")


def _format_value(v):
    if v is None:
        return "none"
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, tuple):
        return ",".join(_format_value(x) for x in v)
    if isinstance(v, float):
        return repr(v)
    return str(v)


def read_config_file(path):
    """Flat sectioned key=value file -> {field: string}. Keys must be known."""
    cp = configparser.ConfigParser(interpolation=None)
    try:
        with open(path) as fh:
            cp.read_file(fh)
    except OSError:
        raise
    except configparser.Error as e:
        raise UsageError(f"bad config file {path}: {e}")
    raw = {}
    for sect in cp.sections():
        if sect in ("sweep", "grid"):
            continue
        for key, val in cp.items(sect):
            if key not in _FIELD_SPEC:
                raise UsageError(f"unknown config key {key!r} in [{sect}]")
            if key in raw:
                raise UsageError(f"duplicate config key {key!r}")
            raw[key] = val
    return raw


def build_run_config(file_vals=None, flag_vals=None):
    """Merge file values and flag strings over defaults; flags win."""
    cfg = RunConfig()
    merged = dict(file_vals or {})
    merged.update({k: v for k, v in (flag_vals or {}).items() if v is not None})
    for key, raw in merged.items():
        _, conv = _FIELD_SPEC[key]
        try:
            setattr(cfg, key, conv(raw))
        except UsageError:
            raise
        except (ValueError, TypeError) as e:
            raise UsageError(f"bad value for {key!r}: {raw!r} ({e})")
    return cfg


def write_config_used(cfg, path):
    lines = [f"# replay manifest, written {time.strftime('%Y-%m-%dT%H:%M:%S')}"]
    for sect in _SECTIONS:
        lines.append(f"[{sect}]")
        for f in fields(RunConfig):
            if _FIELD_SPEC[f.name][0] == sect:
                lines.append(f"{f.name} = {_format_value(getattr(cfg, f.name))}")
        lines.append("")
    with open(path, "w") as fh:
        fh.write("\n".join(lines))


# ---------------------------------------------------------------------------
# shared pipeline pieces

def _require_source(cfg, need_system=False):
    if cfg.system and cfg.input:
        raise UsageError("give either --system or --input, not both")
    if not cfg.system and not cfg.input:
        raise UsageError("one of --system or --input is required")
    if need_system and not cfg.system:
        raise UsageError("this operation needs a builtin --system source "
                         "(reference dynamics are unknown for CSV input)")


def _make_trajectory(cfg):
    sysm = builtin_system(cfg.system, cfg.params)
    x0 = np.asarray(cfg.x0 if cfg.x0 is not None else DEFAULT_X0[sysm.name], float)
    return sysm, simulate(sysm, x0, cfg.dt, cfg.steps, burn_in=cfg.burn_in)


def _load_series(cfg):
    """-> (series, trajectory or None)."""
    _require_source(cfg)
    if cfg.input:
        series = load_measurement(cfg.input)
        return series, None
    _, traj = _make_trajectory(cfg)
    series = measure(traj, cfg.component)
    if cfg.noise_sigma > 0:
        series = add_noise(series, cfg.noise_sigma, cfg.seed)
    return series, traj


def _resolve_n(cfg, series):
    if cfg.n == "auto":
        return suggest_delay_window(series).n
    n = int(cfg.n)
    if n < 2:
        raise UsageError(f"n must be >= 2, got {n}")
    if len(series) < n + 2:
        raise UsageError(f"series has {len(series)} samples; embedding with "
                         f"n={n} needs at least {n + 2}")
    return n


def _prepare(cfg):
    """Data pipeline shared by embed/train: series -> standardized embedding."""
    series, traj = _load_series(cfg)
    mean, std = 0.0, 1.0
    if cfg.standardize:
        series, mean, std = dm.standardize_series(series)
    n = _resolve_n(cfg, series)
    emb = build_hankel(series, n)
    return series, traj, emb, mean, std


def _ensure_outdir(cfg):
    os.makedirs(cfg.out, exist_ok=True)
    return cfg.out


# ---------------------------------------------------------------------------
# commands

def cmd_simulate(cfg):
    _require_source(cfg, need_system=True)
    if cfg.steps < 1:
        raise UsageError(f"steps must be >= 1, got {cfg.steps}")
    sysm, traj = _make_trajectory(cfg)
    series = measure(traj, cfg.component)
    if cfg.noise_sigma > 0:
        series = add_noise(series, cfg.noise_sigma, cfg.seed)
    out = _ensure_outdir(cfg)
    save_trajectory(traj, os.path.join(out, "trajectory.csv"))
    save_measurement(series, os.path.join(out, "measurement.csv"))
    write_config_used(cfg, os.path.join(out, "config_used.ini"))
    print(f"simulated {sysm.name} (dim {sysm.dim}): {len(series)} samples at "
          f"dt={traj.dt:g} -> {out}/trajectory.csv, measurement.csv")
    return 0


def cmd_embed(cfg):
    series, _, emb, _, _ = _prepare(cfg)
    basis = truncated_svd(emb, cfg.p) if cfg.p else None
    out = _ensure_outdir(cfg)
    save_embedding(emb, out, basis=basis)
    write_config_used(cfg, os.path.join(out, "config_used.ini"))

    sing = np.linalg.svd(emb.H, compute_uv=False)
    total = float(np.sum(sing ** 2))
    cum = np.cumsum(sing ** 2) / total
    win = suggest_delay_window(series)
    lines = [
        f"series_length = {len(series)}",
        f"tau = {emb.tau!r}",
        f"n = {emb.n}",
        f"window = {emb.n * emb.tau!r}",
        f"q = {emb.q}",
        f"suggested_n = {win.n}",
        f"acf_first_zero_lag = {win.acf_first_zero_lag}",
    ]
    if basis is not None:
        lines.append(f"p = {basis.p}")
        lines.append(f"variance_captured = {basis.variance_captured!r}")
    lines.append("")
    lines.append("rank, singular_value, cumulative_variance")
    for k in range(min(len(sing), 32)):
        lines.append(f"{k + 1}, {sing[k]:.17g}, {cum[k]:.17g}")
    with open(os.path.join(out, "embedding_report.txt"), "w") as fh:
        fh.write("\n".join(lines) + "\n")
    print(f"embedded {len(series)} samples into {emb.n}x{emb.q} delay matrix"
          + (f", p={basis.p} captures {basis.variance_captured:.4f} of variance"
             if basis else "")
          + f" -> {out}")
    return 0


def _reference_xi(cfg, library, traj):
    if traj is None:
        raise UsageError(f"init_mode={cfg.init_mode!r} needs a builtin --system "
                         "source for reference coefficients")
    params = cfg.params if cfg.params is not None else DEFAULT_PARAMS[cfg.system]
    if cfg.standardize:
        Xi, _, _ = dm.standardized_true_xi(cfg.system, params, library, traj)
        return Xi
    return dm.true_xi(cfg.system, params, library)


def _train_pipeline(cfg):
    series, traj, emb, mean, std = _prepare(cfg)
    weights = dm.LossWeights(cfg.lambda1, cfg.lambda2, cfg.lambda3,
                             cfg.lambda4, cfg.lambda5)
    model = dm.assemble_model(emb, p=cfg.p, m=cfg.m, hidden_dims=tuple(cfg.hidden),
                              degree=cfg.degree, trig=cfg.trig, weights=weights,
                              seed=cfg.seed)
    sup_targets = None
    if cfg.init_mode in ("known_equation", "perturbed"):
        Xi0 = _reference_xi(cfg, model.sindy.library, traj)
        dm.initialize_xi(model, cfg.init_mode, true_xi=Xi0,
                         sigma=cfg.perturb_sigma, seed=cfg.seed)
    elif cfg.init_mode == "supervised":
        if traj is None:
            raise UsageError("init_mode=supervised needs a builtin --system "
                             "source for full-state targets")
        if traj.states.shape[1] != cfg.m:
            raise UsageError(f"supervised targets have dim {traj.states.shape[1]} "
                             f"but m={cfg.m}")
        states = traj.states[:emb.q]
        if cfg.standardize:
            states = (states - traj.states.mean(axis=0)) / traj.states.std(axis=0)
        sup_targets = states
        dm.initialize_xi(model, "supervised", seed=cfg.seed)
    else:
        dm.initialize_xi(model, cfg.init_mode, seed=cfg.seed)

    tcfg = dm.TrainConfig(
        epochs=cfg.epochs, batch_size=cfg.batch_size, lr=cfg.lr,
        refit_period=cfg.refit_period, stlsq_threshold=cfg.stlsq_threshold,
        stlsq_ridge=cfg.stlsq_ridge, stlsq_normalize=cfg.stlsq_normalize,
        rollout_steps=cfg.rollout_steps, init_mode=cfg.init_mode,
        perturb_sigma=cfg.perturb_sigma, pretrain_epochs=cfg.pretrain_epochs,
        seed=cfg.seed, max_columns=cfg.max_columns, grad_clip=cfg.grad_clip)
    model, report = dm.train(model, emb, tcfg, sup_targets=sup_targets,
                             lambda_sup=cfg.lambda_sup)
    return model, report, emb, mean, std


def _checkpoint_extra(cfg, emb, mean, std):
    extra = {"series_mean": repr(float(mean)), "series_std": repr(float(std)),
             "standardize": _format_value(cfg.standardize),
             "component": str(cfg.component),
             "window": str(emb.n)}
    for key in ("system", "params", "x0", "input", "dt", "steps", "burn_in",
                "noise_sigma"):
        extra[key] = _format_value(getattr(cfg, key))
    return extra


def _write_equations(model, report, path):
    names = [f"z{i + 1}" for i in range(model.m)]
    final = report.final()
    lines = ["discovered dynamics in the standardized latent chart",
             f"active_terms = {int(np.sum(model.sindy.mask))}",
             f"final_total = {final.total:.6g}",
             f"final_recon = {final.recon:.6g}",
             f"final_z1 = {final.z1:.6g}",
             "",
             format_equations(model.sindy, var_names=names)]
    with open(path, "w") as fh:
        fh.write("\n".join(lines) + "\n")


def _train_plots(model, report, emb, out):
    epochs = np.arange(1, len(report.losses) + 1)
    loss_cols = [("epoch", epochs)]
    loss_series = []
    for name in ("recon", "hdot", "zdot", "z1", "cons", "reg", "total"):
        vals = np.array([getattr(b, name) for b in report.losses])
        loss_cols.append((name, vals))
        loss_series.append((name, epochs, vals))
    svgplot.line_plot(os.path.join(out, "loss_vs_epoch.svg"), loss_series,
                      title="training loss", xlabel="epoch", ylabel="loss",
                      logy=True)
    svgplot.write_plot_data(os.path.join(out, "loss_vs_epoch.csv"), loss_cols)

    hist = np.array(report.xi_history)          # (epochs, r, m)
    names = [f"z{i + 1}" for i in range(model.m)]
    coef_cols = [("epoch", epochs)]
    coef_series = []
    ever = np.any(hist != 0, axis=0)
    for i in range(hist.shape[1]):
        for j in range(hist.shape[2]):
            if not ever[i, j]:
                continue
            coef_cols.append((f"xi_{i}_{names[j]}", hist[:, i, j]))
            coef_series.append(("", epochs, hist[:, i, j]))
    svgplot.line_plot(os.path.join(out, "coefficients_vs_epoch.svg"), coef_series,
                      title="library coefficients", xlabel="epoch",
                      ylabel="coefficient")
    svgplot.write_plot_data(os.path.join(out, "coefficients_vs_epoch.csv"),
                            coef_cols)

    Z, _ = dm._encode_all(model, emb)
    steps = min(4000, emb.q - 1)
    roll = dm.rollout_latent(model, Z[0], steps, clamp=dm.CONS_CLAMP)
    if model.m >= 2:
        enc_xy = (Z[:steps, 0], Z[:steps, 1])
        rol_xy = (roll[:, 0], roll[:, 1])
        ylab = "z2"
    else:
        tgrid = np.arange(steps) * model.tau
        enc_xy = (tgrid, Z[:steps, 0])
        rol_xy = (tgrid, roll[:, 0])
        ylab = "z1"
    svgplot.line_plot(os.path.join(out, "attractor_latent.svg"),
                      [("encoded", *enc_xy), ("rollout", *rol_xy)],
                      title="latent attractor", xlabel="z1", ylabel=ylab)
    svgplot.write_plot_data(os.path.join(out, "attractor_latent.csv"),
                            [("encoded_x", enc_xy[0]), ("encoded_y", enc_xy[1]),
                             ("rollout_x", rol_xy[0]), ("rollout_y", rol_xy[1])])
    if model.basis is not None:
        W = model.basis.V_p * model.basis.S_p        # mode coordinates per column
        svgplot.line_plot(os.path.join(out, "attractor_modes.svg"),
                          [("modes", W[:steps, 0], W[:steps, 1])],
                          title="embedding modes", xlabel="mode 1", ylabel="mode 2")
        svgplot.write_plot_data(os.path.join(out, "attractor_modes.csv"),
                                [("mode1", W[:steps, 0]), ("mode2", W[:steps, 1])])


def cmd_train(cfg):
    model, report, emb, mean, std = _train_pipeline(cfg)
    out = _ensure_outdir(cfg)
    dm.save_model(model, os.path.join(out, "checkpoint"),
                  extra=_checkpoint_extra(cfg, emb, mean, std))
    report.to_csv(os.path.join(out, "report.csv"))
    _write_equations(model, report, os.path.join(out, "equations.txt"))
    write_config_used(cfg, os.path.join(out, "config_used.ini"))
    if cfg.plot:
        _train_plots(model, report, emb, out)
    final = report.final()
    print(f"trained {cfg.init_mode} model for {len(report.losses)} epochs: "
          f"total {final.total:.3e}, recon {final.recon:.3e}, z1 {final.z1:.3e}, "
          f"{int(np.sum(model.sindy.mask))} active terms -> {out}")
    if report.aborted:
        print(f"training aborted at epoch {report.aborted_epoch} "
              "(non-finite loss); artifacts hold the last finite state",
              file=sys.stderr)
        return 3
    return 0


def cmd_eval(cfg):
    if not cfg.checkpoint:
        raise UsageError("--checkpoint is required")
    if not os.path.isdir(cfg.checkpoint):
        raise FileNotFoundError(f"checkpoint not found: {cfg.checkpoint}")
    model, manifest = dm.load_model(cfg.checkpoint)

    if cfg.input:
        series = load_measurement(cfg.input)
    elif manifest.get("system", "none") != "none":
        src = build_run_config(file_vals={
            key: manifest[key] for key in
            ("system", "params", "x0", "dt", "steps", "burn_in", "noise_sigma")
            if key in manifest})
        src.component = int(manifest.get("component", "0"))
        src.seed = cfg.seed
        series, _ = _load_series(src)
    else:
        raise UsageError("checkpoint was trained on CSV input; pass --input")

    if _parse_bool(manifest.get("standardize", "true")):
        mean = float(manifest.get("series_mean", "0.0"))
        std = float(manifest.get("series_std", "1.0"))
        series = MeasurementSeries(series.times, (series.values - mean) / std,
                                   series.source_component)
    n = int(manifest.get("window", str(model.n)))
    if len(series) < n + 2:
        raise UsageError(f"series has {len(series)} samples; evaluation needs "
                         f"at least {n + 2}")
    emb = build_hankel(series, n)
    ev = dm.evaluate(model, emb, horizon=cfg.horizon)

    out = _ensure_outdir(cfg)
    lines = [f"recon_mse = {ev.recon_mse!r}",
             f"z1_mse = {ev.z1_mse!r}",
             f"active_terms = {ev.active_terms}",
             f"pred_mse = {ev.pred_mse!r}",
             f"pred_horizon = {ev.pred_horizon}",
             f"bounded = {_format_value(ev.bounded)}",
             f"two_lobe_sign_changes = {ev.two_lobe_sign_changes}"]
    with open(os.path.join(out, "metrics.txt"), "w") as fh:
        fh.write("\n".join(lines) + "\n")

    Z, _ = dm._encode_all(model, emb)
    steps = min(int(cfg.horizon) if cfg.horizon else 100, emb.q - 1)
    steps = max(steps, 2)
    roll = dm.rollout_latent(model, Z[0], steps, clamp=dm.CONS_CLAMP)
    tgrid = np.arange(1, steps + 1) * model.tau
    measured = emb.H[0, 1:steps + 1]
    svgplot.line_plot(os.path.join(out, "eval_comparison.svg"),
                      [("measured", tgrid, measured),
                       ("model", tgrid, roll[:, 0])],
                      title="one-start forecast vs measurement",
                      xlabel="time", ylabel="y (standardized)")
    svgplot.write_plot_data(os.path.join(out, "eval_comparison.csv"),
                            [("time", tgrid), ("measured", measured),
                             ("model", roll[:, 0])])
    print(f"eval: recon {ev.recon_mse:.3e}, z1 {ev.z1_mse:.3e}, pred[{ev.pred_horizon}] "
          f"{ev.pred_mse:.3e}, {ev.active_terms} active, bounded={ev.bounded} -> {out}")
    return 0


# ---------------------------------------------------------------------------
# sweep

@dataclass
class SweepSpec:
    base: RunConfig
    grid: dict              # field -> list of parsed values
    workers: int = 1
    seeds: int = 1

    def __post_init__(self):
        if not self.grid or any(len(v) == 0 for v in self.grid.values()):
            raise UsageError("sweep grid must be nonempty")
        if self.workers < 1:
            raise UsageError("workers must be >= 1")
        if self.seeds < 1:
            raise UsageError("seeds must be >= 1")


def read_sweep_spec(path, flag_vals=None):
    cp = configparser.ConfigParser(interpolation=None)
    try:
        with open(path) as fh:
            cp.read_file(fh)
    except configparser.Error as e:
        raise UsageError(f"bad sweep file {path}: {e}")
    if not cp.has_section("grid"):
        raise UsageError("sweep config needs a [grid] section")
    base = build_run_config(read_config_file(path), flag_vals)
    grid = {}
    for key, val in cp.items("grid"):
        if key not in _FIELD_SPEC:
            raise UsageError(f"unknown grid key {key!r}")
        _, conv = _FIELD_SPEC[key]
        try:
            grid[key] = [conv(tok.strip()) for tok in val.split(";") if tok.strip()]
        except (ValueError, TypeError) as e:
            raise UsageError(f"bad grid values for {key!r}: {val!r} ({e})")
    workers = 1
    seeds = 1
    if cp.has_section("sweep"):
        for key, val in cp.items("sweep"):
            if key == "workers":
                workers = int(val)
            elif key == "seeds":
                seeds = int(val)
            else:
                raise UsageError(f"unknown [sweep] key {key!r}")
    return SweepSpec(base=base, grid=grid, workers=workers, seeds=seeds)


def _cell_tag(overrides, seed):
    desc = ";".join(f"{k}={_format_value(v)}" for k, v in sorted(overrides.items()))
    h = hashlib.sha1(desc.encode()).hexdigest()[:10]
    return h, desc


def _run_sweep_cell(packed):
    """One isolated grid cell; returns a leaderboard row dict."""
    overrides, seed, out_root = packed
    tag, desc = _cell_tag(overrides, seed)
    row = {"config": tag, "seed": seed, "overrides": desc, "status": "ok",
           "active_terms": "", "pred_err": "", "recon": "", "total": "",
           "error": ""}
    try:
        cfg = replace(_run_sweep_cell.base, **overrides)
        cfg.seed = seed
        cfg.out = os.path.join(out_root, "cells", f"{tag}-s{seed}")
        cfg.plot = False
        model, report, emb, _, _ = _train_pipeline(cfg)
        os.makedirs(cfg.out, exist_ok=True)
        report.to_csv(os.path.join(cfg.out, "report.csv"))
        dm.save_model(model, os.path.join(cfg.out, "checkpoint"))
        ev = dm.evaluate(model, emb, horizon=1)
        final = report.final()
        row.update(active_terms=str(ev.active_terms),
                   pred_err="%.17g" % ev.pred_mse,
                   recon="%.17g" % final.recon,
                   total="%.17g" % final.total)
        if report.aborted:
            row.update(status="failed", error="aborted")
    except Exception as e:
        row.update(status="failed", error=type(e).__name__)
    return row


_run_sweep_cell.base = None


def _sweep_worker_init(base):
    _run_sweep_cell.base = base


def cmd_sweep(spec, out):
    keys = sorted(spec.grid)
    cells = []
    for combo in itertools.product(*(spec.grid[k] for k in keys)):
        overrides = dict(zip(keys, combo))
        for s in range(spec.seeds):
            cells.append((overrides, spec.base.seed + s, out))

    workers = spec.workers
    env_cap = os.environ.get(WORKERS_ENV)
    if env_cap:
        workers = max(1, min(workers, int(env_cap)))
    workers = min(workers, len(cells))

    _sweep_worker_init(spec.base)
    if workers == 1:
        rows = [_run_sweep_cell(c) for c in cells]
    else:
        import multiprocessing as mp
        ctx = mp.get_context("fork")
        with ctx.Pool(workers, initializer=_sweep_worker_init,
                      initargs=(spec.base,)) as pool:
            rows = pool.map(_run_sweep_cell, cells)

    def key(row):
        ok = row["status"] == "ok"
        return (not ok,
                int(row["active_terms"]) if ok else 1 << 30,
                float(row["pred_err"]) if ok else np.inf,
                row["config"], row["seed"])
    rows.sort(key=key)

    os.makedirs(out, exist_ok=True)
    cols = ("config", "seed", "status", "active_terms", "pred_err", "recon",
            "total", "error", "overrides")
    path = os.path.join(out, "leaderboard.csv")
    with open(path, "w") as fh:
        fh.write(",".join(cols) + "\n")
        for row in rows:
            fh.write(",".join(str(row[c]) for c in cols) + "\n")
    n_ok = sum(r["status"] == "ok" for r in rows)
    print(f"sweep: {len(rows)} cells ({n_ok} ok, {len(rows) - n_ok} failed), "
          f"{workers} workers -> {path}")
    return 0


# ---------------------------------------------------------------------------
# argument parsing

def _add_common(sub):
    sub.add_argument("--config", help="sectioned key=value config file")
    for f in fields(RunConfig):
        flag = "--" + f.name.replace("_", "-")
        if f.name == "init_mode":
            flag = "--mode"
        sub.add_argument(flag, dest=f.name, metavar="V", default=None)


def make_parser():
    ap = argparse.ArgumentParser(
        prog="delaysindy",
        description="discover sparse latent ODEs from a scalar measurement")
    sub = ap.add_subparsers(dest="command", required=True)
    for name, txt in (("simulate", "integrate a builtin system, write CSVs"),
                      ("embed", "build the delay embedding and its SVD"),
                      ("train", "fit the autoencoder + sparse dynamics"),
                      ("sweep", "grid of training runs, leaderboard out"),
                      ("eval", "score a checkpoint against data")):
        _add_common(sub.add_parser(name, help=txt))
    return ap


def main(argv=None):
    args = make_parser().parse_args(argv)
    flag_vals = {f.name: getattr(args, f.name) for f in fields(RunConfig)}
    try:
        if args.command == "sweep":
            if not args.config:
                raise UsageError("sweep needs --config with a [grid] section")
            spec = read_sweep_spec(args.config, flag_vals)
            out = flag_vals.get("out") or spec.base.out
            return cmd_sweep(spec, out)
        file_vals = read_config_file(args.config) if args.config else {}
        cfg = build_run_config(file_vals, flag_vals)
        handler = {"simulate": cmd_simulate, "embed": cmd_embed,
                   "train": cmd_train, "eval": cmd_eval}[args.command]
        return handler(cfg)
    except (UsageError, ValueError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 2
    except (IntegrationDiverged, NumericError) as e:
        print(f"numeric divergence: {e}", file=sys.stderr)
        return 3
    except OSError as e:
        print(f"i/o error: {e}", file=sys.stderr)
        return 4


if __name__ == "__main__":
    sys.exit(main())
