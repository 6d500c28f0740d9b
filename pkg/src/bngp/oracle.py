"""Exact small-instance computations by enumerating every (b, x) pair.

All logarithms are natural. Joint quantities (conditional entropy) treat
the membership vector as one variable; marginal quantities score each
individual separately, which is what a product-form attacker that emits
one probability per individual can achieve.
"""
import csv
import math
from dataclasses import dataclass
from itertools import chain, combinations

import numpy as np
from scipy.special import xlogy

from .data import MAX_ENUM_K, IndependentBernoulli, all_memberships
from .errors import CapabilityError, ContractError, ParameterError
from .mechanisms import MAX_OUTPUTS, bitflip_mechanism, composed_mechanism, quantize_postprocess

LOG_BASE = math.e
TOL = 1e-9


def _guard(mech):
    if mech.K > MAX_ENUM_K:
        raise CapabilityError(f"K={mech.K} exceeds the enumeration guard of {MAX_ENUM_K}")
    if mech.n_outputs > MAX_OUTPUTS:
        raise CapabilityError(f"{mech.n_outputs} outputs exceed the guard of {MAX_OUTPUTS}")


def joint_table(mech, prior):
    """Pr[b, x] with rows in membership order and columns in output order."""
    _guard(mech)
    if prior.K != mech.K:
        raise ParameterError("prior and mechanism disagree on K")
    return prior.pmf_table()[:, None] * mech.table


@dataclass
class PosteriorTable:
    outputs: list  # symbols with positive probability
    columns: np.ndarray  # their column indices in the mechanism's output space
    evidence: np.ndarray  # Pr[x]
    posterior: np.ndarray  # Pr[b | x], shape (2**K, len(outputs))
    marginals: np.ndarray  # Pr[b_k = 1 | x], shape (len(outputs), K)


def enumerate_posterior(mech, prior):
    joint = joint_table(mech, prior)
    evidence = joint.sum(axis=0)
    keep = np.flatnonzero(evidence > 0)
    post = joint[:, keep] / evidence[keep]
    B = all_memberships(mech.K).astype(float)
    return PosteriorTable([mech.output_space[i] for i in keep], keep, evidence[keep], post, post.T @ B)


def posterior_marginal_table(mech, prior):
    """Pr[b_k = 1 | x] for every output (prior marginals where Pr[x] = 0)."""
    joint = joint_table(mech, prior)
    evidence = joint.sum(axis=0)
    B = all_memberships(mech.K).astype(float)
    num = joint.T @ B
    out = np.tile(B.T @ prior.pmf_table(), (mech.n_outputs, 1))
    ok = evidence > 0
    out[ok] = num[ok] / evidence[ok, None]
    return out


def exact_conditional_entropy(mech, prior):
    """H(B | X) = -sum_{b,x} Pr[b, x] log Pr[b | x]."""
    joint = joint_table(mech, prior)
    evidence = joint.sum(axis=0)
    post = np.divide(joint, evidence, out=np.zeros_like(joint), where=evidence > 0)
    # max(-0.0, 0.0) keeps the sign, so add 0.0 to normalize it
    return float(max(-xlogy(joint, post).sum(), 0.0)) + 0.0


def expected_cel(mech, prior, scores, p_clamp=1e-7):
    """E[CEL] of a product-form predictor; ``scores[x, k]`` is the claimed Pr[b_k = 1 | x]."""
    joint = joint_table(mech, prior)
    scores = np.clip(np.asarray(scores, dtype=float), p_clamp, 1 - p_clamp)
    if scores.shape != (mech.n_outputs, mech.K):
        raise ParameterError(f"scores must have shape {(mech.n_outputs, mech.K)}")
    B = all_memberships(mech.K).astype(float)
    # loss[b, x] = -sum_k b_k log p_xk + (1 - b_k) log(1 - p_xk)
    loss = -(B @ np.log(scores).T + (1 - B) @ np.log1p(-scores).T)
    return float((joint * loss).sum())


def exact_marginal_cel(mech, prior):
    """Smallest expected CEL of a product-form predictor: sum_k H(B_k | X)."""
    joint = joint_table(mech, prior)
    evidence = joint.sum(axis=0)
    mu = posterior_marginal_table(mech, prior)
    h = -(xlogy(mu, mu) + xlogy(1 - mu, 1 - mu)).sum(axis=1)
    return float((evidence * h).sum())


def prior_entropy(prior):
    w = prior.pmf_table()
    return float(-xlogy(w, w).sum())


def verify_posterior_optimality(mech, prior, trials, rng, jitter=0.1):
    """Min over jittered predictors of (their CEL - the posterior predictor's CEL)."""
    mu = posterior_marginal_table(mech, prior)
    base = expected_cel(mech, prior, mu)
    margin = math.inf
    for _ in range(trials):
        noisy = np.clip(mu + rng.uniform(-jitter, jitter, size=mu.shape), 0.0, 1.0)
        margin = min(margin, expected_cel(mech, prior, noisy) - base)
    return 0.0 if trials == 0 else margin


# -- composition -------------------------------------------------------------------

@dataclass
class CompositionReport:
    joint_cel: float
    per_mech_cels: list
    residual: float
    candidate_lambda_entropy: float
    candidate_lambda_kl: float


def _output_stats(table, weights, sizes):
    q = weights @ table
    q = q / q.sum()
    h_q = float(-xlogy(q, q).sum())
    grid = q.reshape(sizes)
    prod = np.ones(1)
    for axis in range(len(sizes)):
        other = tuple(a for a in range(len(sizes)) if a != axis)
        prod = np.outer(prod, grid.sum(axis=other)).ravel()
    kl = float(np.sum(xlogy(q, q) - xlogy(q, np.where(q > 0, prod, 1.0))))
    return h_q, kl


def composition_decomposition(mechs, prior, coupling="independent"):
    joint = composed_mechanism(mechs, coupling)
    joint_cel = exact_conditional_entropy(joint, prior)
    per = [exact_conditional_entropy(m, prior) for m in mechs]
    h_q, kl = _output_stats(joint.table, prior.pmf_table(), [m.n_outputs for m in mechs])
    return CompositionReport(joint_cel, per, joint_cel - sum(per), h_q, kl)


def _reference_joint_row(rows, coupling):
    """Joint pmf over index tuples, built with plain loops."""
    if coupling == "independent":
        out = {(): 1.0}
        for row in rows:
            out = {key + (j,): p * float(pj) for key, p in out.items() for j, pj in enumerate(row)}
        return out
    points = sorted(set([0.0, 1.0] + [c for row in rows for c in np.cumsum(row).tolist()]))
    out = {}
    for lo, hi in zip(points[:-1], points[1:]):
        if hi <= lo or lo >= 1.0:
            continue
        mid = (lo + min(hi, 1.0)) / 2
        key = []
        for row in rows:
            acc, pick = 0.0, len(row) - 1
            for j, pj in enumerate(row):
                acc += float(pj)
                if mid < acc:
                    pick = j
                    break
            key.append(pick)
        out[tuple(key)] = out.get(tuple(key), 0.0) + (min(hi, 1.0) - lo)
    total = math.fsum(out.values())
    return {k: v / total for k, v in out.items()}


def _reference_conditional_entropy(rows_by_b, weights):
    """Loop-based H(B | X) over a dict-of-dicts joint, compensated sums."""
    evidence = {}
    for w, row in zip(weights, rows_by_b):
        for x, p in row.items():
            evidence.setdefault(x, []).append(w * p)
    ev = {x: math.fsum(v) for x, v in evidence.items()}
    terms = []
    for w, row in zip(weights, rows_by_b):
        for x, p in row.items():
            jp = w * p
            if jp > 0:
                terms.append(-jp * math.log(jp / ev[x]))
    return max(math.fsum(terms), 0.0)


def composition_decomposition_reference(mechs, prior, coupling="independent"):
    """Second, independently coded path for :func:`composition_decomposition`."""
    weights = [float(w) for w in prior.pmf_table()]
    n_b = len(weights)
    per = []
    for mech in mechs:
        rows = [{j: float(p) for j, p in enumerate(mech.table[i])} for i in range(n_b)]
        per.append(_reference_conditional_entropy(rows, weights))
    joint_rows = [_reference_joint_row([m.table[i] for m in mechs], coupling) for i in range(n_b)]
    joint_cel = _reference_conditional_entropy(joint_rows, weights)
    q = {}
    for w, row in zip(weights, joint_rows):
        for x, p in row.items():
            q.setdefault(x, []).append(w * p)
    q = {x: math.fsum(v) for x, v in q.items()}
    margins = [dict() for _ in mechs]
    for x, p in q.items():
        for a, j in enumerate(x):
            margins[a].setdefault(j, []).append(p)
    margins = [{j: math.fsum(v) for j, v in mg.items()} for mg in margins]
    h_q = math.fsum(-p * math.log(p) for p in q.values() if p > 0)
    kl = math.fsum(p * math.log(p / math.prod(margins[a][j] for a, j in enumerate(x)))
                   for x, p in q.items() if p > 0)
    return CompositionReport(joint_cel, per, joint_cel - math.fsum(per), h_q, kl)


# -- information inequalities ------------------------------------------------------

def verify_post_processing(mech, partition, prior):
    """(H(B | X), H(B | partition(X))); the second is never smaller."""
    before = exact_conditional_entropy(mech, prior)
    after = exact_conditional_entropy(quantize_postprocess(mech, partition), prior)
    return before, after


def verify_prior_mismatch(mech, theta, sigma, p_clamp=1e-300):
    """(CEL of the theta-posterior, CEL of the sigma-posterior), both scored under theta.

    Also returns a flag that is True when sigma's posterior is zero where
    theta puts mass (its logs were clamped).
    """
    matched = exact_conditional_entropy(mech, theta)
    joint_t = joint_table(mech, theta)
    joint_s = joint_table(mech, sigma)
    ev_s = joint_s.sum(axis=0)
    post_s = np.divide(joint_s, ev_s, out=np.zeros_like(joint_s), where=ev_s > 0)
    flagged = bool(((post_s == 0) & (joint_t > 0)).any())
    mismatched = float(-(joint_t * np.log(np.maximum(post_s, p_clamp))).sum())
    return matched, mismatched, flagged


def kl_divergence(p, q):
    p, q = np.asarray(p, dtype=float), np.asarray(q, dtype=float)
    return float(np.sum(xlogy(p, p) - xlogy(p, np.where(p > 0, q, 1.0))))


def verify_signal_refinement(mech, theta, kernel):
    """(H(B | X), H(B | X, Q)) for a signal Q ~ kernel[b] drawn independently of X given b.

    ``kernel`` has one row per membership vector and one column per signal.
    Also returns the per-(q, b) pointwise differences of refined minus base
    expected CEL, kept for inspection only.
    """
    kernel = np.asarray(kernel, dtype=float)
    if kernel.shape[0] != 2 ** mech.K or not np.allclose(kernel.sum(axis=1), 1.0, atol=1e-12):
        raise ParameterError("kernel needs one probability row per membership vector")
    base = exact_conditional_entropy(mech, theta)
    joint_bx = joint_table(mech, theta)
    joint = joint_bx[:, None, :] * kernel[:, :, None]  # (b, q, x)
    ev = joint.sum(axis=0)
    post = np.divide(joint, ev, out=np.zeros_like(joint), where=ev > 0)
    refined = float(max(-xlogy(joint, post).sum(), 0.0))
    ev_x = joint_bx.sum(axis=0)
    post_x = np.divide(joint_bx, ev_x, out=np.zeros_like(joint_bx), where=ev_x > 0)
    w = theta.pmf_table()
    # pointwise[q, b]: E_x[-log post(b|q,x) + log post(b|x) | b, q]
    logdiff = np.where(joint > 0, -np.log(np.where(post > 0, post, 1.0))
                       + np.log(np.where(post_x[:, None, :] > 0, post_x[:, None, :], 1.0)), 0.0)
    pointwise = np.einsum("bx,bqx->qb", mech.table, logdiff) * (w > 0)[None, :]
    return base, refined, pointwise


# -- differential privacy ---------------------------------------------------------

def privacy_profile_bitflip(flip_prob, epsilon):
    """Smallest delta making single-bit randomized response (epsilon, delta)-DP."""
    if not 0 <= flip_prob <= 0.5:
        raise ParameterError("flip_prob must lie in [0, 0.5]")
    if epsilon < 0:
        raise ParameterError("epsilon must be >= 0")
    if flip_prob == 0:
        return 1.0
    return max(0.0, (1 - flip_prob) - math.exp(epsilon) * flip_prob)


def privacy_profile_brute_force(p0, p1, epsilon):
    """max over events W of P1[W] - e^eps P0[W] in both directions, by listing every event."""
    p0, p1 = np.asarray(p0, dtype=float), np.asarray(p1, dtype=float)
    if p0.size > 16:
        raise CapabilityError("event search is limited to 16 outputs")
    idx = range(p0.size)
    events = chain.from_iterable(combinations(idx, r) for r in range(p0.size + 1))
    e = math.exp(epsilon)
    best = 0.0
    for W in events:
        W = list(W)
        best = max(best, p1[W].sum() - e * p0[W].sum(), p0[W].sum() - e * p1[W].sum())
    return float(best)


def dp_membership_advantage_bound(epsilon, delta):
    """(e^eps - 1 + 2 delta) / (e^eps + 1)."""
    if epsilon < 0 or not 0 <= delta <= 1:
        raise ParameterError("need epsilon >= 0 and delta in [0, 1]")
    if math.isinf(epsilon):
        return 1.0
    if epsilon > 700:
        return 1.0 - (2 - 2 * delta) * math.exp(-epsilon)
    e = math.exp(epsilon)
    return (e - 1 + 2 * delta) / (e + 1)


# -- BWMA by enumeration ------------------------------------------------------------

def _claim_counts(mech, prior, decisions):
    joint = joint_table(mech, prior)
    S = np.asarray(decisions, dtype=float)
    if S.shape != (mech.n_outputs, mech.K):
        raise ParameterError(f"decisions must have shape {(mech.n_outputs, mech.K)}")
    B = all_memberships(mech.K).astype(float)
    hits = float((joint * (B @ S.T)).sum())  # E[sum_k s_k b_k]
    claims = float((joint.sum(axis=0) * S.sum(axis=1)).sum())  # E[sum_k s_k]
    pos = float(B.sum(axis=1) @ prior.pmf_table())
    return hits, claims - hits, pos, mech.K - pos


def exact_bwma(mech, prior, decisions, gamma, normalized=True):
    """(1 - gamma) TPR - gamma FPR for a decision table ``decisions[x, k]``.

    ``normalized`` divides the expected true/false claim counts by the
    expected numbers of members/non-members; otherwise raw expected counts
    are used.
    """
    tp, fp, pos, neg = _claim_counts(mech, prior, decisions)
    if normalized:
        tp = tp / pos if pos else 0.0
        fp = fp / neg if neg else 0.0
    return (1 - gamma) * tp - gamma * fp


def exact_attacker_loss(mech, prior, decisions, gamma):
    """E[-sum_k s_k b_k + gamma sum_k s_k]."""
    tp, fp, _, _ = _claim_counts(mech, prior, decisions)
    return -tp + gamma * (tp + fp)


def bwma_loss_gap(mech, prior, decisions, gamma):
    """|E[attacker loss] + unnormalized BWMA|, zero up to rounding."""
    return abs(exact_attacker_loss(mech, prior, decisions, gamma)
               + exact_bwma(mech, prior, decisions, gamma, normalized=False))


def max_bwma(mech, prior, gamma, normalized=True):
    """Largest BWMA over all decision tables, with the maximizing table."""
    joint = joint_table(mech, prior)
    B = all_memberships(mech.K).astype(float)
    hit = joint.T @ B  # Pr[x, b_k = 1]
    miss = joint.sum(axis=0)[:, None] - hit
    pos = float(B.sum(axis=1) @ prior.pmf_table())
    neg = mech.K - pos
    a = (1 - gamma) * (hit / pos if normalized and pos else hit)
    c = gamma * (miss / neg if normalized and neg else miss)
    gain = a - c
    S = (gain >= 0).astype(np.int8)
    return float(np.maximum(gain, 0).sum()), S


# -- mechanism orderings ------------------------------------------------------------

@dataclass
class OrderingReport:
    cel_violations: int
    profile_violations: int
    bwma_violations: int
    checked_priors: int

    @property
    def passed(self):
        return self.cel_violations == self.profile_violations == self.bwma_violations == 0


def random_independent_prior(K, rng):
    return IndependentBernoulli(rng.uniform(0.05, 0.95, size=K))


def verify_bitflip_ordering(noisier, cleaner, K, n_priors, gamma_grid, epsilon_grid, rng, tol=TOL):
    """Count violations of "bitflip(noisier) is uniformly more private than bitflip(cleaner)".

    The relations checked: higher conditional entropy for every sampled
    prior; pointwise smaller privacy profile; smaller max-BWMA for every
    (prior, gamma) pair. Passing the flip probabilities in the wrong order
    yields violations rather than an error.
    """
    for f in (noisier, cleaner):
        if not 0 <= f <= 0.5:
            raise ParameterError("flip probabilities must lie in [0, 0.5]")
    A, Bm = bitflip_mechanism(noisier, K), bitflip_mechanism(cleaner, K)
    cel_bad = bwma_bad = 0
    for _ in range(n_priors):
        prior = random_independent_prior(K, rng)
        if exact_conditional_entropy(A, prior) < exact_conditional_entropy(Bm, prior) - tol:
            cel_bad += 1
        for g in gamma_grid:
            if max_bwma(A, prior, g)[0] > max_bwma(Bm, prior, g)[0] + tol:
                bwma_bad += 1
    prof_bad = sum(privacy_profile_bitflip(noisier, e) > privacy_profile_bitflip(cleaner, e) + tol
                   for e in epsilon_grid)
    return OrderingReport(cel_bad, int(prof_bad), bwma_bad, n_priors)


# -- defense comparison over a one-parameter family ----------------------------------

def defense_unaware_attacker(reference_mech, clip=0.02):
    """Attacker that keeps using the posterior of ``reference_mech`` whatever the defense."""
    def attack(mech, prior):
        mu = posterior_marginal_table(reference_mech, prior)
        return np.clip(mu, clip, 1 - clip)
    attack.name = f"unaware({reference_mech.name})"
    return attack


def linear_score_attacker(features, slope=2.0):
    """Scores sigmoid(slope * (feature - 0.5)) on a per-individual feature table."""
    features = np.asarray(features, dtype=float)

    def attack(mech, prior):
        return 1.0 / (1.0 + np.exp(-slope * (features - 0.5)))
    attack.name = f"linear(slope={slope})"
    return attack


@dataclass
class ComparisonReport:
    grid: np.ndarray
    chosen: dict  # attacker name -> chosen parameter
    true_cel: dict  # attacker name -> exact-posterior CEL at the chosen parameter
    slack: float
    passed: bool


def _monotone_direction(values):
    d = np.diff(values)
    if (d >= -TOL).all():
        return 1, None
    if (d <= TOL).all():
        return -1, None
    return 0, int(np.flatnonzero(np.sign(d) != np.sign(d[np.flatnonzero(np.abs(d) > TOL)[0]]))[0])


def verify_defense_comparison(family, grid, utility, prior, budget_mode, budget, baselines):
    """Budget-constrained grid search under the exact attacker and each baseline.

    ``family(theta)`` returns a mechanism, ``utility(theta)`` its utility
    cost. Each baseline maps (mechanism, prior) to a score table. In
    ``"utility"`` mode the defender keeps cost <= budget and maximizes the
    CEL it expects; in ``"privacy"`` mode it keeps the expected CEL >=
    budget and minimizes cost. The contract: the exact-posterior choice
    leaks no more (true CEL no lower) than any baseline choice, up to one
    grid step.
    """
    grid = np.asarray(grid, dtype=float)
    mechs = [family(t) for t in grid]
    true = np.array([exact_marginal_cel(m, prior) for m in mechs])
    cost = np.array([utility(t) for t in grid])
    for name, values in (("CEL", true), ("utility", cost)):
        direction, at = _monotone_direction(values)
        if direction == 0:
            raise ParameterError(f"family is not monotone in {name} between grid points "
                                 f"{grid[at]} and {grid[at + 1]}")
    models = {"exact": true}
    for attack in baselines:
        models[getattr(attack, "name", repr(attack))] = np.array(
            [expected_cel(m, prior, attack(m, prior)) for m in mechs])
    chosen, chosen_cel = {}, {}
    for name, perceived in models.items():
        if budget_mode == "utility":
            feasible = cost <= budget + TOL
            if not feasible.any():
                raise ParameterError("no grid point satisfies the utility budget")
            i = int(np.flatnonzero(feasible)[np.argmax(perceived[feasible])])
        elif budget_mode == "privacy":
            feasible = perceived >= budget - TOL
            if not feasible.any():
                raise ParameterError("no grid point satisfies the privacy budget")
            cand = np.flatnonzero(feasible)
            i = int(cand[np.argmin(cost[cand])])
        else:
            raise ParameterError(f"budget_mode must be 'utility' or 'privacy', got {budget_mode!r}")
        chosen[name], chosen_cel[name] = float(grid[i]), float(true[i])
    slack = float(np.abs(np.diff(true)).max()) if len(true) > 1 else 0.0
    passed = all(chosen_cel["exact"] >= v - slack - TOL for v in chosen_cel.values())
    return ComparisonReport(grid, chosen, chosen_cel, slack, passed)


# -- reports --------------------------------------------------------------------

def write_verification_csv(path, rows):
    """Rows of (instance, quantity, value, contract, passed)."""
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["instance", "quantity", "value", "contract", "passed"])
        for inst, qty, val, contract, ok in rows:
            w.writerow([inst, qty, repr(float(val)), contract, "pass" if ok else "fail"])


def require(condition, contract, instance):
    if not condition:
        raise ContractError(f"contract {contract} violated on {instance}")
