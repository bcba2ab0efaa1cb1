"""Run orchestration: dataset/model assembly, the training loop with
metrics and checkpoints, sampling, evaluation and the diagnostic battery.

Everything here is driven by a RunConfig; the CLI is a thin argparse
wrapper around these functions.
"""

from __future__ import annotations

import csv
import json
import logging
import time
from pathlib import Path

import numpy as np

from . import __version__
from . import data as datamod
from . import evaluation as ev
from . import trainer as tr
from .autodiff import Tape, Tensor
from .checkpoint import load_checkpoint, save_checkpoint
from .config import RunConfig, write_config
from .errors import ConfigError, InvalidInput
from .nets import AmortizedPosterior, Decoder, EBMPrior
from .sampler import PersistentChains, langevin_step, prior_score

log = logging.getLogger(__name__)

METRIC_COLUMNS = ["iter", "elbo_est", "recon", "kl_q_p0", "f_alpha_mean",
                  "chain_energy_mean", "lab_acc", "val_acc", "wallclock_s"]


class TrainingDiverged(RuntimeError):
    pass


# ---------------------------------------------------------------------------
# Assembly
# ---------------------------------------------------------------------------

def build_dataset(cfg: RunConfig):
    """Return (train_ds, val_ds); val_ds may be empty."""
    if cfg.kind in ("two_moons", "gauss_mixture", "pinwheel"):
        ds = datamod.make_synthetic(cfg.kind, cfg.n, noise=cfg.noise,
                                    seed=cfg.data_seed,
                                    k=cfg.k if cfg.kind == "gauss_mixture"
                                    else None)
        ds = datamod.ssl_split(ds, cfg.n_labeled, seed=cfg.data_seed)
    elif cfg.kind == "csv":
        if not cfg.csv_path or not Path(cfg.csv_path).exists():
            raise ConfigError(f"dataset file not found: {cfg.csv_path!r}")
        ds = datamod.load_csv(cfg.csv_path, cfg.label_column or None, cfg.k)
        # A fully labeled file plus an n_labeled budget means we run the
        # masking protocol ourselves; partially labeled files are taken
        # as-is.
        if cfg.n_labeled and np.all(ds.labels != datamod.MISSING) \
                and len(ds.labeled_indices) > cfg.n_labeled:
            ds = datamod.ssl_split(ds, cfg.n_labeled, seed=cfg.data_seed)
    elif cfg.kind == "unigram":
        for p in (cfg.triplet_path, cfg.vocab_path):
            if not p or not Path(p).exists():
                raise ConfigError(f"dataset file not found: {p!r}")
        ds = datamod.load_unigram(cfg.triplet_path, cfg.vocab_path,
                                  cfg.labels_path or None, k=cfg.k)
    else:
        raise ConfigError(f"unknown dataset kind {cfg.kind!r}")

    if cfg.standardize and cfg.decoder_variant == "gaussian":
        ds = datamod.standardize(ds)
    train_ds, val_ds = datamod.holdout_validation(ds, cfg.val_frac,
                                                  seed=cfg.data_seed)
    return train_ds, val_ds


def build_state(cfg: RunConfig, in_dim: int, k: int) -> tr.TrainState:
    def rng(tag):
        return np.random.default_rng(
            np.random.SeedSequence(entropy=(cfg.seed, tag)))

    prior = EBMPrior(cfg.d, k, hidden=cfg.prior_hidden, rng=rng(1))
    posterior = AmortizedPosterior(in_dim, cfg.d, hidden=cfg.enc_hidden,
                                   rng=rng(2))
    decoder = Decoder(cfg.d, in_dim, hidden=cfg.dec_hidden,
                      variant=cfg.decoder_variant, sigma2=cfg.sigma2,
                      rng=rng(3))
    tcfg = tr.TrainConfig(
        iterations=cfg.iterations, eta0=cfg.eta0, eta1=cfg.eta1,
        eta2=cfg.eta2, batch_unlabeled=cfg.batch_unlabeled,
        batch_labeled=cfg.batch_labeled, chain_count=cfg.chain_count,
        langevin_steps=cfg.langevin_steps, step_size=cfg.step_size,
        seed=cfg.seed, n_mc_label=cfg.n_mc_label, beta1=cfg.beta1,
        beta2=cfg.beta2, adam_eps=cfg.adam_eps)
    return tr.TrainState.create(tcfg, prior, posterior, decoder)


# ---------------------------------------------------------------------------
# Training loop
# ---------------------------------------------------------------------------

def _labeled_accuracy(state, ds, n_mc, seed):
    rows = ds.labeled_indices
    if len(rows) == 0:
        return ""
    _, preds = ev.classify(state.prior, state.posterior, ds.features[rows],
                           n_mc=n_mc, seed=seed)
    return f"{ev.accuracy(preds, ds.class_labels(rows)):.6f}"


def _validation_accuracy(state, val_ds, n_mc, seed):
    if val_ds is None or val_ds.n == 0 or val_ds.full_labels is None:
        return ""
    _, preds = ev.classify(state.prior, state.posterior, val_ds.features,
                           n_mc=n_mc, seed=seed)
    return f"{ev.accuracy(preds, val_ds.full_labels):.6f}"


def run_training(cfg: RunConfig, resume: str | None = None):
    """Train per config, emitting metrics CSV and checkpoints to out_dir.

    Returns the final TrainState.  Raises TrainingDiverged if parameters
    go non-finite.
    """
    out = Path(cfg.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    train_ds, val_ds = build_dataset(cfg)

    if resume:
        state = load_checkpoint(resume)
    else:
        state = build_state(cfg, train_ds.dim, train_ds.k)

    write_config(cfg, out / "config.resolved.ini")
    (out / "manifest.json").write_text(json.dumps({
        "seed": cfg.seed, "build_version": __version__,
        "iterations": cfg.iterations}, indent=2))

    stream = datamod.batches(train_ds, cfg.batch_unlabeled,
                             cfg.batch_labeled, seed=cfg.seed)
    for _ in range(state.iteration):    # replay consumed batches on resume
        next(stream)

    metrics_path = out / "metrics.csv"
    mode = "a" if resume and metrics_path.exists() else "w"
    t0 = time.monotonic()
    eval_rows = train_ds.unlabeled_indices[:min(
        200, len(train_ds.unlabeled_indices))]
    with open(metrics_path, mode, newline="") as fh:
        writer = csv.writer(fh)
        if mode == "w":
            writer.writerow(METRIC_COLUMNS)
        while state.iteration < cfg.iterations:
            x_u, x_l, y_l = next(stream)
            tr.train_step(state, x_u, x_l, y_l, threads=cfg.threads)
            if not all(np.all(np.isfinite(p.data))
                       for p in state.all_parameters()):
                raise TrainingDiverged(
                    f"non-finite parameters at iteration {state.iteration}")
            it = state.iteration
            if cfg.eval_interval and it % cfg.eval_interval == 0:
                eps = np.random.default_rng(np.random.SeedSequence(
                    entropy=(cfg.seed, 0xE7A1, it))).standard_normal(
                    (len(eval_rows), cfg.d))
                m = tr.step_metrics(state, train_ds.features[eval_rows], eps)
                row = [it, f"{m['elbo_est']:.6f}", f"{m['recon']:.6f}",
                       f"{m['kl_q_p0']:.6f}", f"{m['f_alpha_mean']:.6f}",
                       f"{m['chain_energy_mean']:.6f}",
                       _labeled_accuracy(state, train_ds, cfg.n_mc_eval,
                                         seed=cfg.seed + it),
                       _validation_accuracy(state, val_ds, cfg.n_mc_eval,
                                            seed=cfg.seed + it),
                       f"{time.monotonic() - t0:.3f}"]
                writer.writerow(row)
                fh.flush()
            if cfg.checkpoint_interval and it % cfg.checkpoint_interval == 0:
                save_checkpoint(out / f"ckpt_{it:07d}.bin", state)
    save_checkpoint(out / "ckpt_final.bin", state)
    return state


# ---------------------------------------------------------------------------
# Evaluation / sampling
# ---------------------------------------------------------------------------

def run_eval(checkpoint_path, cfg: RunConfig, n_mc: int, report_path=None,
             seed: int = 0):
    """Classify every row with a known label; returns the report dict."""
    state = load_checkpoint(checkpoint_path)
    train_ds, val_ds = build_dataset(cfg)
    labels = train_ds.full_labels
    if labels is None:
        rows = train_ds.labeled_indices
        if len(rows) == 0:
            raise InvalidInput("dataset has no labeled rows to evaluate")
        x, y = train_ds.features[rows], train_ds.class_labels(rows)
    else:
        x, y = train_ds.features, labels
    if len(x) == 0:
        raise InvalidInput("empty evaluation set")
    _, preds = ev.classify(state.prior, state.posterior, x, n_mc=n_mc,
                           seed=seed)
    overall = ev.accuracy(preds, y)
    per_class = {}
    for cls in range(train_ds.k):
        mask = y == cls
        if mask.any():
            per_class[str(cls)] = float(np.mean(preds[mask] == cls))
    report = {"accuracy": overall, "per_class_accuracy": per_class,
              "n_examples": int(len(x)), "n_mc": n_mc, "seed": seed}
    if report_path:
        Path(report_path).write_text(json.dumps(report, indent=2))
    return report


def scatter_svg(points: np.ndarray, labels, path, size: int = 480):
    """Hand-written 2-D scatter SVG (no plotting dependency)."""
    points = np.atleast_2d(points)
    colors = ["#1f77b4", "#ff7f0e", "#2ca02c", "#d62728", "#9467bd",
              "#8c564b", "#e377c2", "#7f7f7f", "#bcbd22", "#17becf"]
    if len(points):
        lo = points.min(axis=0) - 0.5
        hi = points.max(axis=0) + 0.5
    else:
        lo, hi = np.array([-1.0, -1.0]), np.array([1.0, 1.0])
    span = np.maximum(hi - lo, 1e-9)
    parts = [f'<svg xmlns="http://www.w3.org/2000/svg" width="{size}" '
             f'height="{size}" viewBox="0 0 {size} {size}">',
             f'<rect width="{size}" height="{size}" fill="white"/>']
    for p, lab in zip(points, labels):
        cx = (p[0] - lo[0]) / span[0] * size
        cy = size - (p[1] - lo[1]) / span[1] * size
        c = colors[int(lab) % len(colors)]
        parts.append(f'<circle cx="{cx:.2f}" cy="{cy:.2f}" r="3" '
                     f'fill="{c}" fill-opacity="0.7"/>')
    parts.append("</svg>")
    Path(path).write_text("\n".join(parts))


def run_sample(checkpoint_path, count: int, steps: int, step_size: float,
               out_dir, seed: int = 0):
    """Fresh Langevin chains from the reference prior, decoded to means."""
    state = load_checkpoint(checkpoint_path)
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    d = state.prior.d
    chains = PersistentChains(max(count, 1), d, seed=seed,
                              step_size=step_size, steps_per_update=steps)
    if count > 0:
        z = chains.update(state.prior, np.arange(count))
        x = state.decoder.mean(z).data
    else:
        z = np.zeros((0, d))
        x = np.zeros((0, state.decoder.out_dim))
    csv_path = out / "samples.csv"
    with open(csv_path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow([f"z{i}" for i in range(d)]
                        + [f"x{i}" for i in range(x.shape[1])])
        for zi, xi in zip(z, x):
            writer.writerow([repr(float(v)) for v in zi]
                            + [repr(float(v)) for v in xi])
    if x.shape[1] == 2 and count > 0:
        probs = state.prior.class_posterior(z).data
        scatter_svg(x, probs.argmax(axis=1), out / "samples.svg")
    return csv_path


# ---------------------------------------------------------------------------
# Diagnostics
# ---------------------------------------------------------------------------

def _diag_record(name, value, tolerance, ok):
    return {"check": name, "value": float(value),
            "tolerance": float(tolerance), "pass": bool(ok)}


def run_diagnostics(seed: int = 0, inject_fault: bool = False) -> list[dict]:
    """Built-in verification battery on small random models.

    Covers gradient checks, the score-expectation identity, unadjusted
    Langevin stationary variance, quadrature normalization, and the
    three-KL perturbation diagnostic on a 1-D toy model.
    """
    rng = np.random.default_rng(np.random.SeedSequence(entropy=(seed, 0xD1A6)))
    records = []

    # Gradient checks on the two training objectives.
    d, k, dim = 3, 4, 2
    prior = EBMPrior(d, k, hidden=12, rng=rng)
    posterior = AmortizedPosterior(dim, d, hidden=10, rng=rng)
    decoder = Decoder(d, dim, hidden=10, rng=rng)
    x = rng.standard_normal((5, dim))
    eps = rng.standard_normal((5, d))
    params = (prior.parameters() + posterior.parameters()
              + decoder.parameters())

    def unsup_loss():
        loss = tr.unsup_psi_objective(posterior, decoder, prior, x, eps)
        if inject_fault:
            # Rescale the recomputed value without touching the tape: every
            # finite difference then disagrees with the recorded gradient.
            loss.data = loss.data * 1.01
        return loss

    psi = posterior.parameters() + decoder.parameters()
    err = ev.finite_diff_check(unsup_loss, psi, seed=seed)
    records.append(_diag_record("unsup_psi_gradient", err, 1e-5, err <= 1e-5))

    y = rng.integers(0, k, size=5)
    eps_sup = rng.standard_normal((2, 5, d))

    def sup_loss():
        return tr.supervised_objective(prior, posterior, x, y, eps_sup, 2)

    err = ev.finite_diff_check(
        sup_loss, prior.parameters() + posterior.parameters(), seed=seed)
    records.append(_diag_record("supervised_gradient", err, 1e-5, err <= 1e-5))

    # Score identity: autodiff grad of the marginal energy vs the
    # softmax-weighted per-class logit gradients.
    worst = _score_identity_error(prior, rng, trials=20)
    records.append(_diag_record("score_expectation_identity", worst, 1e-10,
                                worst <= 1e-10))

    # ULA stationary variance for a standard-normal target.
    var = ula_stationary_variance(step_size=0.6, n_samples=100_000, seed=seed)
    target = 0.36 / (1.0 - (1.0 - 0.18) ** 2)
    records.append(_diag_record("ula_stationary_variance", var, 0.05,
                                abs(var - target) <= 0.05))

    # Quadrature normalization with a constant energy.
    zero_prior = EBMPrior(1, 5, hidden=8, rng=rng, zero_init=True)
    grid = ev.QuadratureGrid(dim=1)
    log_z = ev.quadrature_log_Z(zero_prior, grid)
    records.append(_diag_record("quadrature_log_z_constant_energy",
                                abs(log_z - np.log(5)), 1e-6,
                                abs(log_z - np.log(5)) <= 1e-6))

    # Perturbation KLs vanish when both phase samplers are exact.
    delta, terms = toy_divergence_perturbation(seed=seed)
    worst_kl = max(terms["kl_positive"], terms["kl_negative"])
    records.append(_diag_record("divergence_perturbation_exact_samplers",
                                worst_kl, 1e-6, abs(worst_kl) <= 1e-6))
    return records


def _score_identity_error(prior: EBMPrior, rng, trials: int = 20) -> float:
    from . import autodiff as ad

    worst = 0.0
    for _ in range(trials):
        z = rng.standard_normal(prior.d)
        direct = prior_score(prior, z) + z
        probs = prior.class_posterior(z).data
        expect = np.zeros(prior.d)
        for cls in range(prior.k):
            zt = Tensor(z[None, :], requires_grad=True)
            with Tape() as tape:
                ad.backward(tape, ad.tsum(ad.slice_cols(
                    prior.logits(zt), cls, cls + 1)))
            expect += probs[cls] * zt.grad[0]
        worst = max(worst, float(np.max(np.abs(direct - expect))))
    return worst


def ula_stationary_variance(step_size: float, n_samples: int,
                            seed: int = 0, burn_in: int = 2000) -> float:
    """Empirical long-run variance of unadjusted Langevin on N(0, 1)."""
    rng = np.random.default_rng(np.random.SeedSequence(entropy=(seed, 0x01A)))
    z = np.zeros(1)
    total = 0.0
    total_sq = 0.0
    for t in range(burn_in + n_samples):
        z = langevin_step(z, -z, step_size, rng.standard_normal(1))
        if t >= burn_in:
            total += z[0]
            total_sq += z[0] * z[0]
    mean = total / n_samples
    return total_sq / n_samples - mean * mean


def toy_divergence_perturbation(seed: int = 0):
    """1-D toy model with exact quadrature samplers on both phases."""
    rng = np.random.default_rng(np.random.SeedSequence(entropy=(seed, 0x70F)))
    prior = EBMPrior(1, 2, hidden=8, rng=rng)
    decoder = Decoder(1, 1, hidden=8, rng=rng, sigma2=0.25)
    grid = ev.QuadratureGrid(dim=1)
    points = rng.normal(0.0, 1.0, size=(16, 1))

    def log_density(x):
        return -0.5 * x[:, 0] ** 2 - 0.5 * np.log(2.0 * np.pi)

    toy = ev.ToyData(points, log_density)
    q_plus = ev.exact_posterior_density(prior, decoder, grid, points)
    q_minus = ev.exact_prior_density(prior, grid)
    return ev.divergence_perturbation(prior, decoder, q_plus, q_minus, toy,
                                      grid)
