"""Noise-generating defenders.

The generator G maps (b, r) with r ~ U[0,1]^q to noise in (-0.5, 0.5)^m;
the release is clip(summary(b) + G(b, r)). Training differentiates through
the clip with the subgradient 1 inside [0, 1] and 0 at saturation.
"""
import csv
import json
import os
from dataclasses import asdict, dataclass, field

import numpy as np
from scipy.special import expit

from .attacks import _draw, cel_loss, cel_step, lrs, lrs_grad_x
from .data import MembershipPrior, MembershipSampler
from .errors import ParameterError, TrainingError
from .mechanisms import DpParams, clip_subgradient, clip_unit, sensitivity_frequency, summary_statistics
from .neural import Mlp, MlpConfig, OptimizerState, adam_step, decay_learning_rate, save_checkpoint

MODES = ("preference", "privacy_budget", "utility_budget")


@dataclass
class DefenderConfig:
    mode: str = "preference"
    kappa: object = 1.0  # scalar or one weight per attribute
    norm_order: float = 1.0
    utility_map: object = None  # monotone map applied to the normalized norm; None = identity
    budget: float = 0.0
    penalty: float = 100.0
    hidden: tuple = (128, 128, 64)
    hidden_activation: str = "leaky_relu"
    batch_norm: bool = True  # without it the generator collapses to saturated noise that ignores r
    aux_dim: int = 100
    rounds: int = 1500
    attacker_steps: int = 5
    batch_size: int = 128
    learning_rate: float = 1e-3
    weight_decay: float = 1e-5
    decay_rate: float = 0.988
    rounds_per_epoch: int = 20
    patience: object = None  # rounds without defender-loss improvement before stopping
    seed: int = 0

    def __post_init__(self):
        if self.mode not in MODES:
            raise ParameterError(f"mode must be one of {MODES}")
        k = np.asarray(self.kappa, dtype=float)
        if (k < 0).any():
            raise ParameterError("kappa must be >= 0")
        if self.norm_order < 1:
            raise ParameterError("norm order must be >= 1")
        if self.attacker_steps < 1:
            raise ParameterError("attacker_steps must be >= 1")
        if self.mode != "preference" and self.penalty <= 0:
            raise ParameterError("budget modes need penalty > 0")
        if self.aux_dim < 0 or self.rounds < 0:
            raise ParameterError("aux_dim and rounds must be >= 0")
        self.hidden = tuple(self.hidden)

    def mlp_config(self, K, m):
        return MlpConfig((K + self.aux_dim, *self.hidden, m), self.hidden_activation, "scaled_sigmoid",
                         self.batch_norm, seed=self.seed)

    def snapshot(self):
        d = asdict(self)
        d["kappa"] = np.asarray(self.kappa).tolist()
        d["hidden"] = list(self.hidden)
        d["utility_map"] = None if self.utility_map is None else getattr(self.utility_map, "__name__", "custom")
        return d


# -- building blocks ---------------------------------------------------------------

def generator_forward(G, b, r, mode="eval"):
    """Noise G(b, r); ``b`` and ``r`` may be single vectors or row batches."""
    b, r = np.asarray(b, dtype=float), np.asarray(r, dtype=float)
    single = b.ndim == 1
    Z = np.hstack([np.atleast_2d(b), np.atleast_2d(r).reshape(len(np.atleast_2d(b)), -1)])
    if Z.shape[1] != G.input_width:
        raise ParameterError(f"generator expects {G.input_width} inputs, got {Z.shape[1]}")
    out = G.forward(Z, mode=mode)
    return out[0] if single else out


def utility_loss(x, xhat, kappa, p=1.0, utility_map=None):
    """Per-attribute normalized utility cost (averaged over rows of a batch).

    Scalar kappa: kappa * map(||x - xhat||_p / m). Vector kappa:
    sum_j kappa_j |x_j - xhat_j| / m.
    """
    delta = np.atleast_2d(np.asarray(x, dtype=float) - np.asarray(xhat, dtype=float))
    kappa = np.asarray(kappa, dtype=float)
    if (kappa < 0).any():
        raise ParameterError("kappa must be >= 0")
    m = delta.shape[1]
    if kappa.ndim == 0:
        norm = np.linalg.norm(delta, ord=p, axis=1) / m
        mapped = norm if utility_map is None else np.vectorize(utility_map)(norm)
        return float(np.mean(kappa * mapped))
    if kappa.shape != (m,):
        raise ParameterError(f"kappa vector must have length {m}")
    return float(np.mean(np.abs(delta) @ kappa) / m)


def utility_grad(x, xhat, kappa, p=1.0, utility_map=None, h=1e-6):
    """d utility_loss / d x for a batch (subgradient 0 where x = xhat)."""
    delta = np.atleast_2d(np.asarray(x, dtype=float) - np.asarray(xhat, dtype=float))
    n, m = delta.shape
    kappa = np.asarray(kappa, dtype=float)
    if kappa.ndim == 1:
        return np.sign(delta) * kappa / (m * n)
    norm = np.linalg.norm(delta, ord=p, axis=1)
    safe = np.where(norm > 0, norm, 1.0)
    dnorm = np.sign(delta) * np.abs(delta) ** (p - 1) / safe[:, None] ** (p - 1)
    dnorm[norm == 0] = 0.0
    if utility_map is None:
        outer = np.ones(n)
    else:
        u = norm / m
        outer = (np.vectorize(utility_map)(u + h) - np.vectorize(utility_map)(np.maximum(u - h, 0))) \
            / (u + h - np.maximum(u - h, 0))
    return kappa * outer[:, None] * dnorm / (m * n)


def defender_loss(mode, privacy_term, utility_term, budget=0.0, penalty=100.0):
    """Preference: privacy + utility. Budget modes add penalty * hinge(violation)."""
    w_priv, w_util = defender_loss_weights(mode, privacy_term, utility_term, budget, penalty)
    if mode == "preference":
        return privacy_term + utility_term
    if mode == "privacy_budget":
        return utility_term + penalty * max(0.0, privacy_term - budget)
    return privacy_term + penalty * max(0.0, utility_term - budget)


def defender_loss_weights(mode, privacy_term, utility_term, budget=0.0, penalty=100.0):
    """(d loss / d privacy_term, d loss / d utility_term)."""
    if mode == "preference":
        return 1.0, 1.0
    if mode == "privacy_budget":
        if penalty <= 0:
            raise ParameterError("penalty must be > 0")
        return (penalty if privacy_term > budget else 0.0), 1.0
    if mode == "utility_budget":
        if penalty <= 0:
            raise ParameterError("penalty must be > 0")
        return 1.0, (penalty if utility_term > budget else 0.0)
    raise ParameterError(f"mode must be one of {MODES}")


def _membership_source(prior):
    if isinstance(prior, MembershipPrior):
        return MembershipSampler(prior)
    return prior


def generator_release(dataset, G, aux_dim):
    """Batch release sampler for a frozen generator (eval mode)."""
    def release(B, rng):
        B = np.atleast_2d(B)
        xhat = summary_statistics(dataset, B)
        xi = generator_forward(G, B, rng.random((len(B), aux_dim)), mode="eval")
        return clip_unit(xhat + xi)
    return release


# -- the game ----------------------------------------------------------------------

@dataclass
class GameResult:
    generator: Mlp
    discriminator: Mlp
    traces: dict
    config: dict
    seed: object
    rejection_rate: float = 0.0
    stopped_round: int = None
    metrics: dict = field(default_factory=dict)

    def release(self, dataset):
        return generator_release(dataset, self.generator, self.config["defender"]["aux_dim"])


def _generator_step(G, H, dataset, B, R, def_cfg, state, privacy_fn):
    """One defender update; returns (defender loss, CEL, utility, saturated fraction)."""
    n = len(B)
    xhat = summary_statistics(dataset, B)
    xi = G.forward(np.hstack([B, R]), mode="train")
    pre = xhat + xi
    X = clip_unit(pre)
    P = H.forward(X, mode="train", update_stats=False)
    cel = cel_loss(P, B)
    priv, dpriv_dX = privacy_fn(X, P, B)
    util = utility_loss(X, xhat, def_cfg.kappa, def_cfg.norm_order, def_cfg.utility_map)
    w_priv, w_util = defender_loss_weights(def_cfg.mode, priv, util, def_cfg.budget, def_cfg.penalty)
    loss = defender_loss(def_cfg.mode, priv, util, def_cfg.budget, def_cfg.penalty)
    dX = w_priv * dpriv_dX + w_util * utility_grad(X, xhat, def_cfg.kappa, def_cfg.norm_order,
                                                   def_cfg.utility_map)
    grads, _ = G.backward(dX * clip_subgradient(pre))
    adam_step(G, grads, state)
    saturated = float(np.mean((pre <= 0) | (pre >= 1)))
    return loss, cel, util, saturated, n


def train_bngp(dataset, prior, def_cfg, att_cfg, rng, attacker_prior=None):
    """Alternate attacker CEL steps with generator steps on -CEL + utility.

    ``attacker_prior`` lets the discriminator train under a subjective prior;
    by default both players use ``prior``.
    """
    K, m = dataset.K, dataset.m
    source = _membership_source(prior)
    att_source = _membership_source(attacker_prior) if attacker_prior is not None else source
    G = Mlp(def_cfg.mlp_config(K, m))
    H = Mlp(att_cfg.mlp_config(m, K))
    sg = OptimizerState.for_net(G, learning_rate=def_cfg.learning_rate,
                                weight_decay=def_cfg.weight_decay, decay_rate=def_cfg.decay_rate)
    sh = OptimizerState.for_net(H, learning_rate=att_cfg.learning_rate,
                                weight_decay=att_cfg.weight_decay, decay_rate=att_cfg.decay_rate)
    traces = {k: [] for k in ("defender_loss", "attacker_cel", "utility_loss", "saturated")}
    q = def_cfg.aux_dim
    best, since, stopped = np.inf, 0, None

    def privacy(X, P, B):
        # privacy term = -CEL; its x-gradient flows back through the discriminator
        _, dX = H.backward((P - B) / len(B), wrt_logits=True)
        return -cel_loss(P, B), -dX

    for rnd in range(def_cfg.rounds):
        att_cel = 0.0
        for _ in range(def_cfg.attacker_steps):
            B = _draw(att_source, rng, att_cfg.batch_size).astype(float)
            xi = G.forward(np.hstack([B, rng.random((len(B), q))]), mode="train", update_stats=False)
            X = clip_unit(summary_statistics(dataset, B) + xi)
            att_cel = cel_step(H, X, B, sh)
        B = _draw(source, rng, def_cfg.batch_size).astype(float)
        loss, _, util, sat, _ = _generator_step(G, H, dataset, B, rng.random((len(B), q)), def_cfg, sg, privacy)
        if not (np.isfinite(loss) and np.isfinite(att_cel)):
            raise TrainingError("non-finite loss in the game loop", rnd)
        for key, val in zip(traces, (loss, att_cel, util, sat)):
            traces[key].append(float(val))
        if (rnd + 1) % def_cfg.rounds_per_epoch == 0:
            decay_learning_rate(sg)
            decay_learning_rate(sh)
        if def_cfg.patience:
            if loss < best - 1e-6:
                best, since = loss, 0
            else:
                since += 1
                if since >= def_cfg.patience:
                    stopped = rnd + 1
                    break
    config = {"defender": def_cfg.snapshot(), "attacker": _attack_snapshot(att_cfg)}
    return GameResult(G, H, traces, config, def_cfg.seed, getattr(source, "rejection_rate", 0.0), stopped)


def _attack_snapshot(att_cfg):
    d = asdict(att_cfg)
    d["hidden"] = list(att_cfg.hidden)
    d["subjective_prior"] = None if att_cfg.subjective_prior is None else repr(att_cfg.subjective_prior)
    return d


# -- LRT best-response defender ------------------------------------------------------

@dataclass
class LrtConfig:
    variant: str = "fixed"  # fixed | adaptive
    tau: float = 0.0
    N: int = 10
    reference: object = None  # reference genotype matrix for the adaptive variant

    def __post_init__(self):
        if self.variant not in ("fixed", "adaptive"):
            raise ParameterError("variant must be 'fixed' or 'adaptive'")
        if self.variant == "adaptive":
            if self.reference is None or len(self.reference) == 0:
                raise ParameterError("adaptive variant needs a reference panel")
            if not 1 <= self.N <= len(self.reference):
                raise ParameterError("N must lie in [1, reference size]")


@dataclass
class LrtDefenseResult:
    generator: Mlp
    traces: dict
    aux_dim: int

    def release(self, dataset):
        return generator_release(dataset, self.generator, self.aux_dim)


def lrt_surrogate_privacy(dataset, X, B, lrt_cfg):
    """Soft count of detected members, sum_k b_k sigmoid(tau - lrs_k), batch-averaged.

    Returns the value and its gradient w.r.t. X.
    """
    n = len(B)
    pbar, floor = dataset.reference_frequencies, dataset.p_floor
    L = np.atleast_2d(lrs(dataset.records, X, pbar, floor)).reshape(n, dataset.K)
    dL = lrs_grad_x(dataset.records, X, floor)  # (n, K, m)
    if lrt_cfg.variant == "fixed":
        tau = np.full(n, float(lrt_cfg.tau))
        dtau = np.zeros_like(X)
    else:
        ref = np.asarray(lrt_cfg.reference)
        Lr = np.atleast_2d(lrs(ref, X, pbar, floor)).reshape(n, len(ref))
        pick = np.argsort(Lr, axis=1)[:, : lrt_cfg.N]
        tau = np.take_along_axis(Lr, pick, axis=1).mean(axis=1)
        dLr = lrs_grad_x(ref, X, floor)
        dtau = np.take_along_axis(dLr, pick[:, :, None], axis=1).mean(axis=1)
    s = expit(np.clip(tau[:, None] - L, -700, 700))
    value = float((B * s).sum(axis=1).mean())
    w = B * s * (1 - s) / n  # (n, K)
    grad = w.sum(axis=1)[:, None] * dtau - np.einsum("nk,nkm->nm", w, dL)
    return value, grad


def train_lrt_best_response_defender(dataset, prior, def_cfg, lrt_cfg, rng):
    """Generator minimizing the sigmoid-surrogate LRT detection count plus utility."""
    K, m = dataset.K, dataset.m
    source = _membership_source(prior)
    G = Mlp(def_cfg.mlp_config(K, m))
    sg = OptimizerState.for_net(G, learning_rate=def_cfg.learning_rate,
                                weight_decay=def_cfg.weight_decay, decay_rate=def_cfg.decay_rate)
    q = def_cfg.aux_dim
    traces = {k: [] for k in ("defender_loss", "privacy_term", "utility_loss", "saturated")}
    for rnd in range(def_cfg.rounds):
        B = _draw(source, rng, def_cfg.batch_size).astype(float)
        xhat = summary_statistics(dataset, B)
        xi = G.forward(np.hstack([B, rng.random((len(B), q))]), mode="train")
        pre = xhat + xi
        X = clip_unit(pre)
        priv, dpriv = lrt_surrogate_privacy(dataset, X, B, lrt_cfg)
        util = utility_loss(X, xhat, def_cfg.kappa, def_cfg.norm_order, def_cfg.utility_map)
        w_priv, w_util = defender_loss_weights(def_cfg.mode, priv, util, def_cfg.budget, def_cfg.penalty)
        loss = defender_loss(def_cfg.mode, priv, util, def_cfg.budget, def_cfg.penalty)
        if not np.isfinite(loss):
            raise TrainingError("non-finite loss in the LRT defender", rnd)
        dX = w_priv * dpriv + w_util * utility_grad(X, xhat, def_cfg.kappa, def_cfg.norm_order,
                                                    def_cfg.utility_map)
        grads, _ = G.backward(dX * clip_subgradient(pre))
        adam_step(G, grads, sg)
        for key, val in zip(traces, (loss, priv, util, float(np.mean((pre <= 0) | (pre >= 1))))):
            traces[key].append(float(val))
        if (rnd + 1) % def_cfg.rounds_per_epoch == 0:
            decay_learning_rate(sg)
    return LrtDefenseResult(G, traces, q)


# -- DP baseline ---------------------------------------------------------------------

def calibrate_dp_epsilon(target_mean_abs_noise, m, k_dagger):
    """Laplace parameters whose scale (= mean |noise|) equals the target."""
    if not target_mean_abs_noise > 0:
        raise ParameterError("target mean |noise| must be > 0")
    sens = sensitivity_frequency(m, k_dagger)
    return DpParams(epsilon=sens / target_mean_abs_noise, delta=0.0, sensitivity=sens)


def measured_noise_scale(release_noise, kappa=None):
    """Mean |noise| over a batch, weighted by kappa when it is a vector."""
    a = np.abs(np.atleast_2d(release_noise))
    kappa = None if kappa is None else np.asarray(kappa, dtype=float)
    if kappa is None or kappa.ndim == 0:
        return float(a.mean())
    return float((a @ kappa).mean() / kappa.sum())


def sample_generator_noise(G, K, aux_dim, prior, rng, n):
    B = _draw(_membership_source(prior), rng, n).astype(float)
    return generator_forward(G, B, rng.random((n, aux_dim)), mode="eval")


# -- serialization ------------------------------------------------------------------

def save_game_result(result, directory):
    """Traces CSV, both checkpoints and a JSON config snapshot; returns the written paths."""
    os.makedirs(directory, exist_ok=True)
    paths = []
    tpath = os.path.join(directory, "traces.csv")
    keys = list(result.traces)
    with open(tpath, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["round", *keys])
        for i, row in enumerate(zip(*(result.traces[k] for k in keys))):
            w.writerow([i, *(repr(v) for v in row)])
    paths.append(tpath)
    for name, net in (("generator.npz", result.generator), ("discriminator.npz", result.discriminator)):
        p = os.path.join(directory, name)
        save_checkpoint(net, p)
        paths.append(p)
    cpath = os.path.join(directory, "game_config.json")
    with open(cpath, "w", encoding="utf-8") as fh:
        json.dump({"config": result.config, "seed": result.seed, "rejection_rate": result.rejection_rate,
                   "stopped_round": result.stopped_round}, fh, indent=2, sort_keys=True)
    paths.append(cpath)
    return paths
