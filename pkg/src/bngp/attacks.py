"""Membership-inference attackers.

A release sampler is a batch function ``release(B, rng) -> X`` mapping a
matrix of membership vectors (one per row) to a matrix of released feature
vectors. Attack functions return :class:`AttackScores`, which keep the soft
scores, the hard claims and a real-valued ranking score for ROC analysis.
"""
import csv
from dataclasses import dataclass, field

import numpy as np
from scipy.special import expit

from .data import MAX_ENUM_K, MembershipPrior, MembershipSampler, all_memberships
from .errors import CapabilityError, ContractError, ParameterError, TrainingError
from .mechanisms import perturb_output, summary_statistics
from .neural import Mlp, MlpConfig, OptimizerState, adam_step, decay_learning_rate

P_CLAMP = 1e-7


@dataclass
class AttackScores:
    soft: np.ndarray
    threshold: float = 0.5
    decisions: np.ndarray = None
    ranking: np.ndarray = None

    def __post_init__(self):
        self.soft = np.asarray(self.soft, dtype=float)
        if not np.isfinite(self.soft).all() or (self.soft < 0).any() or (self.soft > 1).any():
            raise ContractError("soft scores must lie in [0, 1]")
        if self.decisions is None:
            self.decisions = (self.soft >= self.threshold).astype(np.int8)
        if self.ranking is None:
            self.ranking = self.soft


# -- losses ---------------------------------------------------------------------

def cel_loss(p, b, p_clamp=P_CLAMP):
    """Cross-entropy of soft scores against membership (summed over k).

    For a batch of rows the per-row losses are averaged.
    """
    p = np.clip(np.asarray(getattr(p, "soft", p), dtype=float), p_clamp, 1 - p_clamp)
    b = np.asarray(b, dtype=float)
    if p.shape != b.shape:
        raise ParameterError(f"score shape {p.shape} does not match membership shape {b.shape}")
    per = -(b * np.log(p) + (1 - b) * np.log1p(-p)).sum(axis=-1)
    return float(np.mean(per))


def attacker_loss(s, b, gamma):
    """-sum_k s_k b_k + gamma sum_k s_k."""
    if not 0 < gamma <= 1:
        raise ParameterError("gamma must lie in (0, 1]")
    s = np.asarray(s, dtype=float)
    b = np.asarray(b, dtype=float)
    return float(-(s * b).sum() + gamma * s.sum())


# -- Monte Carlo BWMA -------------------------------------------------------------

def _draw(prior, rng, n):
    if isinstance(prior, MembershipSampler):
        return prior(rng, n)
    if isinstance(prior, MembershipPrior):
        return prior.sample(rng, n)
    return prior(rng, n)


@dataclass
class BwmaEstimate:
    advantage: float
    tpr: float
    fpr: float
    stderr: float


def bwma(attacker, release, prior, gamma, mc_trials, rng, threshold=None):
    """Monte Carlo estimate of (1-gamma) TPR - gamma FPR.

    ``attacker(X)`` maps a batch of releases to soft scores in [0, 1];
    claims are ``score >= threshold`` (default: gamma, the Bayes rule for
    this payoff). TPR and FPR pool claims over individuals and trials.
    """
    if mc_trials < 1:
        raise ParameterError("mc_trials must be >= 1")
    if not 0 < gamma <= 1:
        raise ParameterError("gamma must lie in (0, 1]")
    threshold = gamma if threshold is None else threshold
    B = _draw(prior, rng, mc_trials).astype(float)
    P = np.asarray(attacker(release(B, rng)), dtype=float)
    if P.shape != B.shape or not np.isfinite(P).all() or (P < 0).any() or (P > 1).any():
        raise ContractError("attacker emitted scores outside [0, 1] or of the wrong shape")
    S = (P >= threshold).astype(float)
    pos, neg = B.sum(), (1 - B).sum()
    tpr = (S * B).sum() / pos if pos else 0.0
    fpr = (S * (1 - B)).sum() / neg if neg else 0.0
    per_trial = (1 - gamma) * (S * B).sum(axis=1) * (mc_trials / pos if pos else 0.0) \
        - gamma * (S * (1 - B)).sum(axis=1) * (mc_trials / neg if neg else 0.0)
    stderr = float(per_trial.std(ddof=1) / np.sqrt(mc_trials)) if mc_trials > 1 else float("inf")
    return BwmaEstimate((1 - gamma) * tpr - gamma * fpr, float(tpr), float(fpr), stderr)


# -- release samplers ---------------------------------------------------------------

def symbol_features(mech, encoding="auto"):
    """Feature matrix with one row per output symbol of ``mech``."""
    if encoding == "auto":
        numeric = all(isinstance(s, tuple) and all(isinstance(v, (int, float)) for v in s)
                      for s in mech.output_space)
        encoding = "values" if numeric else "onehot"
    if encoding == "values":
        return np.array(mech.output_space, dtype=float)
    if encoding == "onehot":
        return np.eye(mech.n_outputs)
    raise ParameterError(f"unknown encoding {encoding!r}")


def discrete_release(mech, encoding="auto"):
    """Batch release sampler for a discrete mechanism (vectorized inverse cdf)."""
    features = symbol_features(mech, encoding)
    cdf = np.cumsum(mech.table, axis=1)
    weights = 2 ** np.arange(mech.K - 1, -1, -1)

    def release(B, rng):
        rows = cdf[np.asarray(B, dtype=int) @ weights]
        u = rng.random((len(rows), 1))
        idx = np.minimum((rows <= u).sum(axis=1), mech.n_outputs - 1)
        return features[idx]

    release.features = features
    return release


def noise_release(dataset, noise_fn=None):
    """x = clip(summary(B) + noise_fn(B, rng)); noiseless when ``noise_fn`` is None."""
    def release(B, rng):
        xhat = summary_statistics(dataset, np.atleast_2d(B))
        if noise_fn is None:
            return xhat
        return perturb_output(xhat, noise_fn(B, rng))
    return release


def laplace_release(dataset, scale):
    return noise_release(dataset, lambda B, rng: rng.laplace(0.0, scale, size=(len(B), dataset.m)))


# -- learned BGP attacker -----------------------------------------------------------

@dataclass
class AttackConfig:
    gamma: float = 0.5
    hidden: tuple = (64, 64)
    hidden_activation: str = "leaky_relu"
    batch_norm: bool = False
    steps: int = 2000
    batch_size: int = 128
    learning_rate: float = 1e-4
    weight_decay: float = 1e-5
    decay_rate: float = 0.988
    steps_per_epoch: int = 100
    seed: int = 0
    subjective_prior: object = None

    def __post_init__(self):
        if not 0 < self.gamma <= 1:
            raise ParameterError("gamma must lie in (0, 1]")
        if self.steps < 0 or self.batch_size < 1 or self.steps_per_epoch < 1:
            raise ParameterError("steps >= 0, batch_size >= 1 and steps_per_epoch >= 1 required")
        self.hidden = tuple(self.hidden)

    def mlp_config(self, input_width, K):
        return MlpConfig((input_width, *self.hidden, K), self.hidden_activation, "sigmoid",
                         self.batch_norm, seed=self.seed)


@dataclass
class BgpAttacker:
    """Trained discriminator; calling it on releases gives soft scores."""

    net: Mlp
    trace: list = field(default_factory=list)

    def __call__(self, X):
        return self.net.forward(np.atleast_2d(np.asarray(X, dtype=float)), mode="eval")

    def scores(self, x, threshold=0.5):
        return AttackScores(self(x)[0], threshold)


def cel_step(net, X, B, state=None, p_clamp=P_CLAMP):
    """One CEL minibatch step for a sigmoid-output net; returns the batch loss.

    With ``state`` None no update happens (the loss is still evaluated in
    train mode).
    """
    P = net.forward(X, mode="train", update_stats=state is not None)
    loss = cel_loss(P, B, p_clamp)
    if state is not None:
        grads, _ = net.backward((P - B) / len(B), wrt_logits=True)
        adam_step(net, grads, state)
    return loss


def train_bgp_response(release, prior, config, rng, input_width=None, net=None):
    """Fit a discriminator minimizing empirical CEL on fresh (b, x) minibatches.

    ``prior`` is the attacker's belief used to draw training memberships
    (``config.subjective_prior`` overrides it). Pass ``net`` to continue
    training an existing discriminator.
    """
    belief = config.subjective_prior or prior
    K = belief.K if hasattr(belief, "K") else belief.prior.K
    if net is None:
        if input_width is None:
            probe = release(_draw(belief, rng, 1), rng)
            input_width = probe.shape[1]
        net = Mlp(config.mlp_config(input_width, K))
    state = OptimizerState.for_net(net, learning_rate=config.learning_rate,
                                   weight_decay=config.weight_decay, decay_rate=config.decay_rate)
    trace = []
    for step in range(config.steps):
        B = _draw(belief, rng, config.batch_size).astype(float)
        loss = cel_step(net, release(B, rng), B, state)
        if not np.isfinite(loss):
            raise TrainingError("non-finite discriminator loss", step)
        trace.append(loss)
        if (step + 1) % config.steps_per_epoch == 0:
            decay_learning_rate(state)
    return BgpAttacker(net, trace)


# -- likelihood-ratio attacks ---------------------------------------------------------

def lrs(d, x, pbar, p_floor=1e-3):
    """Log-likelihood ratio statistic of genotype(s) ``d`` against release(s) ``x``.

    sum_j d_j log(pbar_j / x_j) + (1 - d_j) log((1 - pbar_j) / (1 - x_j)),
    with x and pbar clamped to [p_floor, 1 - p_floor]. ``d`` may be (m,) or
    (K, m); ``x`` may be (m,) or (n, m). The result drops singleton axes.
    """
    d = np.atleast_2d(np.asarray(d, dtype=float))
    x = np.atleast_2d(np.clip(np.asarray(x, dtype=float), p_floor, 1 - p_floor))
    pbar = np.clip(np.asarray(pbar, dtype=float), p_floor, 1 - p_floor)
    const = d @ np.log(pbar) + (1 - d) @ np.log1p(-pbar)
    out = const[None, :] - np.log(x) @ d.T - np.log1p(-x) @ (1 - d).T
    return out.squeeze() if out.size > 1 else float(out[0, 0])


def lrs_grad_x(d, x, p_floor=1e-3):
    """d lrs[n, k] / d x[n, j] for a batch; zero where x is clamped."""
    d = np.asarray(d, dtype=float)
    xc = np.clip(x, p_floor, 1 - p_floor)
    inside = (x > p_floor) & (x < 1 - p_floor)
    g = -d[None, :, :] / xc[:, None, :] + (1 - d)[None, :, :] / (1 - xc[:, None, :])
    return g * inside[:, None, :]


def fixed_lrt_attack(dataset, x, tau):
    """Claim membership iff lrs <= tau. Ranking score is -lrs."""
    stat = np.atleast_1d(lrs(dataset.records, x, dataset.reference_frequencies, dataset.p_floor))
    soft = expit(np.clip(tau - stat, -700, 700))
    return AttackScores(soft, decisions=(stat <= tau).astype(np.int8), ranking=-stat)


def adaptive_threshold(ref_lrs, N):
    """Mean of the N smallest reference LRS values."""
    ref_lrs = np.asarray(ref_lrs, dtype=float)
    if ref_lrs.size == 0:
        raise ParameterError("empty reference set")
    if not 1 <= N <= ref_lrs.size:
        raise ParameterError(f"N must lie in [1, {ref_lrs.size}]")
    return float(np.sort(ref_lrs)[:N].mean())


def adaptive_lrt_attack(dataset, x, reference, N):
    """Fixed LRT with tau set from the N lowest LRS values of a reference group.

    ``reference`` is either an index array into ``dataset.records`` or a
    matrix of reference genotypes. Returns ``(scores, tau)``.
    """
    reference = np.asarray(reference)
    if reference.size == 0:
        raise ParameterError("empty reference set")
    ref = dataset.records[reference] if reference.ndim == 1 else reference
    ref_stat = np.atleast_1d(lrs(ref, x, dataset.reference_frequencies, dataset.p_floor))
    tau = adaptive_threshold(ref_stat, N)
    return fixed_lrt_attack(dataset, x, tau), tau


def calibrate_lrt_threshold(dataset, prior, rng, trials=200, release=None):
    """Equal-error-rate tau of the fixed LRT against ``release`` (default noiseless)."""
    release = release or noise_release(dataset)
    B = _draw(prior, rng, trials)
    X = np.atleast_2d(release(B, rng))
    stat = np.reshape(lrs(dataset.records, X, dataset.reference_frequencies, dataset.p_floor), B.shape)
    mem, non = np.sort(stat[B == 1]), np.sort(stat[B == 0])
    grid = np.unique(np.concatenate([mem, non]))
    tpr = np.searchsorted(mem, grid, side="right") / mem.size
    fpr = np.searchsorted(non, grid, side="right") / non.size
    return float(grid[np.argmin(np.abs(tpr - (1 - fpr)))])


def optimal_lrt_scores(mech, prior, x):
    """P[x | b_k = 0] / P[x | b_k = 1] for every k (other bits marginalized under the prior)."""
    if mech.K > MAX_ENUM_K:
        raise CapabilityError(f"K={mech.K} exceeds the enumeration guard; use Monte Carlo")
    B = all_memberships(mech.K)
    joint = prior.pmf_table() * mech.table[:, mech.index(x)]
    w = prior.pmf_table()
    w1 = B.T.astype(float) @ w
    p1 = np.divide(B.T @ joint, w1, out=np.zeros(mech.K), where=w1 > 0)
    p0 = np.divide((1 - B).T @ joint, 1 - w1, out=np.zeros(mech.K), where=(1 - w1) > 0)
    with np.errstate(divide="ignore", invalid="ignore"):
        return np.where(p1 > 0, p0 / np.where(p1 > 0, p1, 1), np.inf)


def optimal_lrt_attack(mech, prior, x, ratio_threshold=1.0):
    """Claim iff ratio <= ratio_threshold; ranking score is -ratio."""
    ratio = optimal_lrt_scores(mech, prior, x)
    soft = 1.0 / (1.0 + ratio)
    return AttackScores(soft, decisions=(ratio <= ratio_threshold).astype(np.int8),
                        ranking=-np.minimum(ratio, 1e300))


def score_attack(d, x, pbar):
    """Centered inner product sum_j (d_j - pbar_j)(x_j - pbar_j); (K, m) d gives K scores."""
    d = np.asarray(d, dtype=float)
    pbar = np.asarray(pbar, dtype=float)
    return (d - pbar) @ (np.asarray(x, dtype=float) - pbar)


def score_attack_scores(dataset, x, threshold=0.0):
    raw = score_attack(dataset.records, x, dataset.reference_frequencies)
    return AttackScores(expit(np.clip(raw - threshold, -700, 700)),
                        decisions=(raw >= threshold).astype(np.int8), ranking=raw)


def write_attack_csv(path, scores, b):
    """Rows of (individual, soft, decision, member) for external ROC tools."""
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["individual", "soft", "decision", "member"])
        for k, (p, s, bk) in enumerate(zip(scores.soft, scores.decisions, b)):
            w.writerow([k, repr(float(p)), int(s), int(bk)])
