"""Exact quantities on small discrete mechanisms, computed by enumeration.

Run with ``python3 demos/exact_oracle_tour.py``; finishes in a few seconds.
"""
import math

import numpy as np

from bngp import IndependentBernoulli, bitflip_mechanism
from bngp.mechanisms import composed_mechanism, constant_mechanism, random_discrete_mechanism
from bngp.oracle import (composition_decomposition, dp_membership_advantage_bound, enumerate_posterior,
                         exact_conditional_entropy, max_bwma, privacy_profile_bitflip, prior_entropy,
                         verify_posterior_optimality, verify_post_processing)

K = 3
prior = IndependentBernoulli.uniform(K)
print(f"prior entropy, K={K}: {prior_entropy(prior):.4f} nats (= K ln 2 = {K * math.log(2):.4f})")

# Conditional entropy of membership given the release, across flip probabilities
print("\nflip   H(B|X)   max BWMA (gamma=0.5)   delta(eps=0.5)   DP bound on TPR - FPR")
for f in (0.0, 0.1, 0.25, 0.4, 0.5):
    mech = bitflip_mechanism(f, K)
    h = exact_conditional_entropy(mech, prior)
    adv, _ = max_bwma(mech, prior, 0.5)
    delta = privacy_profile_bitflip(f, 0.5)
    print(f"{f:4.2f}  {h:7.4f}   {adv:19.4f}   {delta:14.4f}   {dp_membership_advantage_bound(0.5, delta):.4f}")

# Posterior for one bit
table = enumerate_posterior(bitflip_mechanism(0.25, 1), IndependentBernoulli.uniform(1))
print("\nK=1, flip 0.25: P(member | output) =",
      {out: round(float(p), 4) for out, p in zip(table.outputs, table.marginals[:, 0])})

# The exact posterior beats every perturbed predictor
rng = np.random.default_rng(0)
mech = random_discrete_mechanism(K, 6, rng)
print(f"\nrandom mechanism: min CEL margin over 100 jittered predictors = "
      f"{verify_posterior_optimality(mech, prior, 100, rng):.5f} (>= 0)")

# Merging output symbols can only hide information
partition = {s: i % 2 for i, s in enumerate(mech.output_space)}
before, after = verify_post_processing(mech, partition, prior)
print(f"merging 6 outputs into 2: H(B|X) {before:.4f} -> {after:.4f}")

# Releasing twice
mech = bitflip_mechanism(0.25, 2)
prior2 = IndependentBernoulli.uniform(2)
for coupling in ("independent", "shared"):
    rep = composition_decomposition([mech, mech], prior2, coupling)
    print(f"two releases, {coupling:>11} noise: joint H = {rep.joint_cel:.4f}, "
          f"single H = {rep.per_mech_cels[0]:.4f}, residual = {rep.residual:.4f}")
print("output symbols of the independent composition:", composed_mechanism([mech, mech]).n_outputs)

print(f"\nconstant release keeps the prior entropy: "
      f"{exact_conditional_entropy(constant_mechanism(K, 4), prior):.4f}")
