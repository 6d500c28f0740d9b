"""Generative noise defenses and membership-inference attacks for summary-statistic releases."""
from .data import (FixedSizeUniform, IndependentBernoulli, MembershipSampler, PopulationDataset, TablePrior,
                   generate_reference_panel, generate_synthetic_population, load_population_csv,
                   sample_membership, save_population_csv)
from .errors import (CapabilityError, ContractError, DomainError, MetricError, NumericError,
                     ParameterError, ParseError, StateError, TrainingError)
from .mechanisms import (DiscreteMechanism, DpParams, bitflip_mechanism, clip_unit, compose_mechanisms,
                         composed_mechanism, discretized_summary_mechanism, laplace_mechanism,
                         perturb_output, quantize_postprocess, sensitivity_frequency, summary_statistics)
from .metrics import membership_advantage, roc_auc

__version__ = "0.1.0"
