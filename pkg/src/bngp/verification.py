"""Randomized and exhaustive checks of the exact-oracle contracts.

Each check returns rows ``(instance, quantity, value, contract, passed)``;
:func:`run_verification_suite` runs them all and writes one CSV.
"""
import math
import os
from dataclasses import dataclass

import numpy as np
from scipy.special import xlogy

from .attacks import _draw
from .data import IndependentBernoulli, TablePrior
from .errors import ContractError
from .mechanisms import bitflip_mechanism, constant_mechanism, random_discrete_mechanism
from .metrics import confusion_rates
from .oracle import (TOL, bwma_loss_gap, composition_decomposition,
                     composition_decomposition_reference, defense_unaware_attacker,
                     dp_membership_advantage_bound, kl_divergence, linear_score_attacker, max_bwma,
                     privacy_profile_bitflip, privacy_profile_brute_force, random_independent_prior,
                     verify_bitflip_ordering, verify_defense_comparison, verify_posterior_optimality,
                     verify_post_processing, verify_prior_mismatch, verify_signal_refinement,
                     write_verification_csv)

GAMMAS = tuple(np.round(np.arange(1, 11) / 10, 1))


@dataclass
class VerificationGuards:
    """Instance counts and size limits for every check."""

    loss_instances: int = 20
    loss_max_k: int = 5
    loss_max_outputs: int = 8
    posterior_instances: int = 200
    posterior_jitters: int = 200
    posterior_max_k: int = 6
    postproc_instances: int = 100
    mismatch_instances: int = 100
    refinement_instances: int = 50
    composition_instances: int = 100
    ordering_priors: int = 100
    ordering_k: int = 3
    epsilon_points: int = 50
    dp_trials: int = 20000
    comparison_instances: int = 10


def _random_instance(rng, max_k, max_outputs, min_outputs=2):
    K = int(rng.integers(1, max_k + 1))
    n = int(rng.integers(min_outputs, max_outputs + 1))
    return random_discrete_mechanism(K, n, rng), K


def check_attacker_loss(guards, rng):
    """Expected attacker loss equals minus the unnormalized advantage for every decision table."""
    rows = []
    for i in range(guards.loss_instances):
        mech, K = _random_instance(rng, guards.loss_max_k, guards.loss_max_outputs)
        prior = TablePrior.random(K, rng)
        S = (rng.random((mech.n_outputs, K)) < 0.5).astype(int)
        worst = max(bwma_loss_gap(mech, prior, S, g) for g in GAMMAS)
        rows.append((f"random#{i} K={K} n={mech.n_outputs}", "max |loss + advantage|", worst,
                     "attacker-loss-equals-negative-advantage", worst < 1e-9))
    return rows


def check_posterior_minimizes_cel(guards, rng):
    rows = []
    for i in range(guards.posterior_instances):
        mech, K = _random_instance(rng, guards.posterior_max_k, 8)
        prior = random_independent_prior(K, rng)
        margin = verify_posterior_optimality(mech, prior, guards.posterior_jitters, rng)
        rows.append((f"random#{i} K={K}", "min jittered CEL - posterior CEL", margin,
                     "posterior-minimizes-cel", margin >= -TOL))
    return rows


def _random_partition(mech, rng):
    n_groups = int(rng.integers(1, mech.n_outputs + 1))
    return {s: int(rng.integers(n_groups)) for s in mech.output_space}


def check_post_processing(guards, rng):
    rows = []
    for i in range(guards.postproc_instances):
        mech, K = _random_instance(rng, 4, 8)
        prior = TablePrior.random(K, rng)
        before, after = verify_post_processing(mech, _random_partition(mech, rng), prior)
        rows.append((f"random#{i} K={K}", "H after - H before", after - before,
                     "post-processing-never-lowers-entropy", after >= before - TOL))
    return rows


def check_prior_mismatch(guards, rng):
    rows = []
    for i in range(guards.mismatch_instances):
        mech, K = _random_instance(rng, 4, 6)
        theta, sigma = TablePrior.random(K, rng), TablePrior.random(K, rng)
        matched, mismatched, _ = verify_prior_mismatch(mech, theta, sigma)
        rows.append((f"random#{i} K={K}", "mismatched - matched", mismatched - matched,
                     "wrong-prior-never-helps", mismatched >= matched - TOL))
    for i in range(max(1, guards.mismatch_instances // 10)):
        K = int(rng.integers(1, 5))
        theta, sigma = TablePrior.random(K, rng), TablePrior.random(K, rng)
        matched, mismatched, _ = verify_prior_mismatch(constant_mechanism(K, 3), theta, sigma)
        err = abs((mismatched - matched) - kl_divergence(theta.pmf_table(), sigma.pmf_table()))
        rows.append((f"uninformative#{i} K={K}", "|gap - KL|", err,
                     "uninformative-mismatch-equals-kl", err < 1e-9))
    return rows


def check_signal_refinement(guards, rng):
    rows = []
    for i in range(guards.refinement_instances):
        mech, K = _random_instance(rng, 4, 6)
        theta = TablePrior.random(K, rng)
        kernel = rng.dirichlet(np.ones(int(rng.integers(2, 5))), size=2 ** K)
        base, refined, _ = verify_signal_refinement(mech, theta, kernel)
        rows.append((f"random#{i} K={K}", "H refined - H base", refined - base,
                     "extra-signal-never-raises-entropy", refined <= base + TOL))
    return rows


def check_composition(guards, rng):
    rows = []
    for i in range(guards.composition_instances):
        coupling = "independent" if i % 2 == 0 else "shared"
        K = int(rng.integers(1, 4))
        mechs = [random_discrete_mechanism(K, int(rng.integers(2, 5)), rng) for _ in range(2)]
        prior = random_independent_prior(K, rng)
        rep = composition_decomposition(mechs, prior, coupling)
        ref = composition_decomposition_reference(mechs, prior, coupling)
        tag = f"{coupling}#{i} K={K}"
        slack = rep.joint_cel - min(rep.per_mech_cels)
        rows.append((tag, "joint H - min component H", slack,
                     "composition-never-raises-entropy", slack <= TOL))
        diff = max(abs(a - b) for a, b in zip(
            [rep.joint_cel, rep.residual, rep.candidate_lambda_entropy, rep.candidate_lambda_kl,
             *rep.per_mech_cels],
            [ref.joint_cel, ref.residual, ref.candidate_lambda_entropy, ref.candidate_lambda_kl,
             *ref.per_mech_cels]))
        rows.append((tag, "max |fast - reference|", diff, "composition-report-dual-agreement",
                     diff < 1e-10))
        # informational only: how the residual relates to the two candidate terms
        rows.append((tag, "residual", rep.residual, "composition-residual-record", True))
        rows.append((tag, "output KL to product", rep.candidate_lambda_kl, "composition-residual-record",
                     True))
    return rows


def _neighbour_rows(flip, K):
    mech = bitflip_mechanism(flip, K)
    # datasets differing only in the first individual's bit
    return mech.table[0], mech.table[2 ** (K - 1)]


def check_bitflip_ordering(guards, rng):
    eps = np.linspace(0.0, 3.0, guards.epsilon_points)
    rows = []
    for flip in (0.4, 0.2):
        p0, p1 = _neighbour_rows(flip, 2)
        worst = max(abs(privacy_profile_bitflip(flip, e) - privacy_profile_brute_force(p0, p1, e))
                    for e in eps)
        rows.append((f"bitflip({flip}) K=2", "max |closed form - event search|", worst,
                     "privacy-profile-closed-form", worst < 1e-12))
    rep = verify_bitflip_ordering(0.4, 0.2, guards.ordering_k, guards.ordering_priors, GAMMAS, eps, rng)
    inst = f"bitflip(0.4) vs bitflip(0.2) K={guards.ordering_k}"
    rows.append((inst, "entropy violations", rep.cel_violations, "noisier-bitflip-higher-entropy",
                 rep.cel_violations == 0))
    rows.append((inst, "profile violations", rep.profile_violations, "noisier-bitflip-smaller-delta",
                 rep.profile_violations == 0))
    rows.append((inst, "max-advantage violations", rep.bwma_violations,
                 "noisier-bitflip-smaller-max-advantage", rep.bwma_violations == 0))
    return rows


def dp_advantage_check(flip, epsilon, K, trials, rng):
    """(empirical advantage of the Bayes attacker, its standard error, the DP bound)."""
    mech = bitflip_mechanism(flip, K)
    prior = IndependentBernoulli.uniform(K)
    _, S = max_bwma(mech, prior, 0.5)
    B = _draw(prior, rng, trials)
    cdf = np.cumsum(mech.table, axis=1)
    rows = cdf[B @ (2 ** np.arange(K - 1, -1, -1))]
    x = np.minimum((rows <= rng.random((trials, 1))).sum(axis=1), mech.n_outputs - 1)
    tpr, fpr = confusion_rates(S[x].ravel(), B.ravel())
    n_pos, n_neg = int(B.sum()), int(B.size - B.sum())
    se = math.sqrt(tpr * (1 - tpr) / n_pos + fpr * (1 - fpr) / n_neg)
    bound = dp_membership_advantage_bound(epsilon, privacy_profile_bitflip(flip, epsilon))
    return tpr - fpr, se, bound


def check_dp_bound(guards, rng):
    rows = []
    for flip in (0.05, 0.1, 0.2, 0.3, 0.45):
        for eps in (0.0, 0.5, 1.0, 2.0, math.log((1 - flip) / flip)):
            adv, se, bound = dp_advantage_check(flip, eps, 3, guards.dp_trials, rng)
            rows.append((f"bitflip({flip}) eps={eps:.4g}", "advantage - bound", adv - bound,
                         "advantage-within-dp-bound", adv <= bound + 3 * se))
    return rows


def _bitflip_family(K):
    return lambda f: bitflip_mechanism(float(f), K)


def check_defense_comparison(guards, rng):
    rows = []
    grid = np.linspace(0.0, 0.5, 26)
    for i in range(guards.comparison_instances):
        K = int(rng.integers(1, 4))
        prior = random_independent_prior(K, rng)
        # the exact CEL of bitflip(0.5), so every privacy budget below it is feasible
        max_entropy = float(-(xlogy(prior.pi, prior.pi) + xlogy(1 - prior.pi, 1 - prior.pi)).sum())
        features = np.array(bitflip_mechanism(0.1, K).output_space, dtype=float)
        baselines = [defense_unaware_attacker(bitflip_mechanism(0.05, K)),
                     linear_score_attacker(features)]
        for mode, budget in (("utility", float(rng.uniform(0.1, 0.5))),
                             ("privacy", float(rng.uniform(0.3, 0.9)) * max_entropy)):
            rep = verify_defense_comparison(_bitflip_family(K), grid, lambda f: f, prior, mode, budget,
                                            baselines)
            gap = rep.true_cel["exact"] - min(rep.true_cel.values())
            rows.append((f"bitflip family#{i} K={K} {mode} budget={budget:.3g}",
                         "exact choice CEL - worst baseline choice CEL", gap,
                         "exact-posterior-defense-leaks-least", rep.passed))
    return rows


CHECKS = {
    "attacker-loss": check_attacker_loss,
    "posterior-cel": check_posterior_minimizes_cel,
    "post-processing": check_post_processing,
    "prior-mismatch": check_prior_mismatch,
    "signal-refinement": check_signal_refinement,
    "composition": check_composition,
    "bitflip-ordering": check_bitflip_ordering,
    "dp-bound": check_dp_bound,
    "defense-comparison": check_defense_comparison,
}


def run_verification_suite(guards=None, seed=0, out_path=None, checks=None):
    """Run every check; returns the rows. Raises ContractError naming the first failure.

    The CSV (when ``out_path`` is given) is written before raising, so the
    failing row is on disk.
    """
    guards = guards or VerificationGuards()
    rng = np.random.default_rng(seed)
    rows = []
    for fn in (checks or CHECKS).values():
        rows.extend((inst, qty, float(val), contract, bool(ok)) for inst, qty, val, contract, ok
                    in fn(guards, rng))
    if out_path is not None:
        os.makedirs(os.path.dirname(os.path.abspath(out_path)), exist_ok=True)
        write_verification_csv(out_path, rows)
    failed = [r for r in rows if not r[4]]
    if failed:
        inst, qty, val, contract, _ = failed[0]
        raise ContractError(f"contract {contract} violated on {inst} ({qty} = {val!r}); "
                            f"{len(failed)} failing rows")
    return rows

