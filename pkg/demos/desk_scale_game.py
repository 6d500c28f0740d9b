"""Train one generative noise defense at desk scale and attack it.

Usage: ``python3 demos/desk_scale_game.py [kappa] [rounds]`` (defaults 1.5
and 400). The default run takes about half a minute on one CPU; the tuned
1500-round game used by the experiment configs takes about a minute.
"""
import sys

import numpy as np

from bngp import IndependentBernoulli, MembershipSampler, generate_synthetic_population, roc_auc
from bngp.attacks import AttackConfig, noise_release, train_bgp_response
from bngp.defense import DefenderConfig, train_bngp
from bngp.mechanisms import summary_statistics

kappa = float(sys.argv[1]) if len(sys.argv) > 1 else 1.5
rounds = int(sys.argv[2]) if len(sys.argv) > 2 else 400

dataset = generate_synthetic_population(40, 100, 0.05, 0.95, seed=1)
prior = IndependentBernoulli.uniform(dataset.K)
source = MembershipSampler(prior)

def_cfg = DefenderConfig(kappa=kappa, rounds=rounds)
disc_cfg = AttackConfig(hidden=(256, 128), learning_rate=1e-3, batch_norm=True)
game = train_bngp(dataset, prior, def_cfg, disc_cfg, np.random.default_rng(0))
trace = game.traces
print(f"kappa {kappa}: final attacker CEL {np.mean(trace['attacker_cel'][-50:]):.4f} "
      f"(K ln 2 = {dataset.K * np.log(2):.4f}), utility loss {np.mean(trace['utility_loss'][-50:]):.4f}")

eval_cfg = AttackConfig(hidden=(256, 128), learning_rate=1e-3, steps=1000)
rng = np.random.default_rng(1)
B = source(rng, 500)
for name, release in (("no defense", noise_release(dataset)), ("generative defense", game.release(dataset))):
    attacker = train_bgp_response(release, source, eval_cfg, np.random.default_rng(2))
    X = release(B, rng)
    auc = roc_auc(attacker(X).ravel(), B.ravel()).auc
    noise = np.abs(X - summary_statistics(dataset, B)).mean()
    print(f"{name:>18}: fresh attacker AUC {auc:.4f}, mean |x - xhat| {noise:.4f}")
