"""Release mechanisms.

Continuous releases (summary statistics, clipped output perturbation, the
Laplace baseline) work on plain numpy arrays. Discrete mechanisms carry an
exact conditional pmf table so the oracle module can enumerate them.
"""
from dataclasses import dataclass
from itertools import product

import numpy as np

from .data import all_memberships, membership_index
from .errors import CapabilityError, DomainError, ParameterError

MAX_OUTPUTS = 2 ** 16
EMPTY = "<empty>"


# -- continuous releases -----------------------------------------------------

def summary_statistics(dataset, b):
    """Member frequency of every attribute, x_j = sum_k b_k d_kj / sum_k b_k.

    ``b`` may be one membership vector or a batch of them (one per row).
    """
    b = np.asarray(b)
    single = b.ndim == 1
    B = np.atleast_2d(b)
    if B.shape[1] != dataset.K:
        raise ParameterError(f"membership vectors must have length {dataset.K}")
    n = B.sum(axis=1)
    if (n == 0).any():
        raise DomainError("summary statistics of an empty membership are undefined")
    x = (B @ dataset.records) / n[:, None]
    return x[0] if single else x


def clip_unit(v):
    return np.clip(v, 0.0, 1.0)


def perturb_output(stats, noise):
    """Release clip(stats + noise)."""
    stats = np.asarray(stats, dtype=float)
    noise = np.asarray(noise, dtype=float)
    if stats.shape[-1] != noise.shape[-1]:
        raise ParameterError(f"dimension mismatch: stats {stats.shape} vs noise {noise.shape}")
    return clip_unit(stats + noise)


def clip_subgradient(pre_clip):
    """1 strictly inside (0, 1), 0 where the clip saturates."""
    return ((pre_clip > 0.0) & (pre_clip < 1.0)).astype(float)


@dataclass(frozen=True)
class DpParams:
    epsilon: float
    delta: float = 0.0
    sensitivity: float = 1.0

    def __post_init__(self):
        if self.epsilon < 0:
            raise ParameterError("epsilon must be >= 0")
        if not 0 <= self.delta <= 1:
            raise ParameterError("delta must lie in [0, 1]")
        if self.sensitivity <= 0:
            raise ParameterError("sensitivity must be > 0")

    @property
    def scale(self):
        if self.epsilon == 0:
            raise ParameterError("epsilon = 0 needs an infinite Laplace scale")
        return self.sensitivity / self.epsilon


def laplace_mechanism(stats, params, rng):
    """Add i.i.d. Laplace(0, sensitivity/epsilon) noise and clip.

    Returns ``(released, noise)``; the pre-clip noise is what utility
    accounting measures.
    """
    if params.epsilon <= 0:
        raise ParameterError("the Laplace mechanism needs epsilon > 0")
    stats = np.asarray(stats, dtype=float)
    noise = rng.laplace(0.0, params.scale, size=stats.shape)
    return clip_unit(stats + noise), noise


def sensitivity_frequency(m, k_dagger):
    """Sensitivity m / K-dagger of the frequency vector."""
    if k_dagger < 1:
        raise ParameterError("k_dagger must be >= 1")
    return m / k_dagger


# -- discrete mechanisms -----------------------------------------------------

class DiscreteMechanism:
    """Finite-output mechanism with an exact conditional pmf rho(x | b).

    The pmf is stored as a table with one row per membership vector (in
    :func:`all_memberships` order) and one column per output symbol. It is
    built lazily from ``row_fn`` when first needed.
    """

    def __init__(self, K, output_space, row_fn=None, table=None, sampler=None, name="discrete"):
        self.K = K
        self.output_space = list(output_space)
        if len(self.output_space) > MAX_OUTPUTS:
            raise CapabilityError(f"{len(self.output_space)} outputs exceed the guard of {MAX_OUTPUTS}")
        self._index = {s: i for i, s in enumerate(self.output_space)}
        if len(self._index) != len(self.output_space):
            raise ParameterError("output symbols must be distinct")
        if row_fn is None and table is None:
            raise ParameterError("need a row function or a table")
        self._row_fn = row_fn
        self._table = None
        if table is not None:
            table = np.asarray(table, dtype=float)
            if table.shape != (2 ** K, len(self.output_space)):
                raise ParameterError(f"table shape {table.shape} does not match (2^K, outputs)")
            self._set_table(table)
        self._sampler = sampler
        self.name = name

    def _set_table(self, table):
        table.setflags(write=False)
        self._table = table

    @property
    def table(self):
        if self._table is None:
            B = all_memberships(self.K)
            self._set_table(np.array([self._row_fn(b) for b in B], dtype=float))
        return self._table

    @property
    def n_outputs(self):
        return len(self.output_space)

    def index(self, symbol):
        return self._index[symbol]

    def pmf_row(self, b):
        if self._table is None and self._row_fn is not None:
            return np.asarray(self._row_fn(np.asarray(b)), dtype=float)
        return self.table[membership_index(b)]

    def exact_pmf(self, symbol, b):
        return float(self.pmf_row(b)[self._index[symbol]])

    def sample(self, b, rng):
        if self._sampler is not None:
            return self._sampler(np.asarray(b), rng)
        row = self.pmf_row(b)
        return self.output_space[inverse_cdf(row, rng.random())]

    def __repr__(self):
        return f"DiscreteMechanism({self.name}, K={self.K}, outputs={self.n_outputs})"


def inverse_cdf(row, u):
    """Index i with cdf[i-1] <= u < cdf[i]."""
    cdf = np.cumsum(row)
    return min(int(np.searchsorted(cdf, u, side="right")), len(row) - 1)


def bitflip_mechanism(flip_prob, K):
    """Release b with every bit flipped independently with probability ``flip_prob``."""
    if not 0 <= flip_prob <= 0.5:
        raise ParameterError(f"flip_prob must lie in [0, 0.5], got {flip_prob}")
    B = all_memberships(K)
    outputs = [tuple(int(v) for v in row) for row in B]
    dist = (B[:, None, :] != B[None, :, :]).sum(axis=2)
    with np.errstate(divide="ignore"):
        table = flip_prob ** dist * (1 - flip_prob) ** (K - dist)

    def sampler(b, rng):
        flips = rng.random(K) < flip_prob
        return tuple(int(v) for v in np.where(flips, 1 - b, b))

    return DiscreteMechanism(K, outputs, table=table, sampler=sampler, name=f"bitflip({flip_prob})")


def constant_mechanism(K, n_outputs=1):
    """Output independent of b (uniform over ``n_outputs`` symbols)."""
    table = np.full((2 ** K, n_outputs), 1.0 / n_outputs)
    return DiscreteMechanism(K, range(n_outputs), table=table, name="constant")


def random_discrete_mechanism(K, n_outputs, rng, concentration=1.0):
    """Rows drawn from a symmetric Dirichlet; used by the randomized sweeps."""
    table = rng.dirichlet(np.full(n_outputs, concentration), size=2 ** K)
    return DiscreteMechanism(K, range(n_outputs), table=table, name="random")


def _rounded_grid_index(xhat, grid_size):
    return np.rint(np.asarray(xhat) * (grid_size - 1)).astype(int)


def discretized_summary_mechanism(dataset, grid_size, noise_pmf, shifts=None):
    """Grid analogue of output perturbation with an exactly computable pmf.

    x-hat is rounded to {0, 1/(G-1), ..., 1}; each attribute is then moved
    by an independent grid shift drawn from ``noise_pmf`` (over ``shifts``,
    centred on 0 by default) and clipped to the grid ends. The empty
    membership releases the dedicated symbol ``EMPTY``.
    """
    noise_pmf = np.asarray(noise_pmf, dtype=float)
    if grid_size < 2:
        raise ParameterError("grid_size must be >= 2")
    if noise_pmf.ndim != 1 or (noise_pmf < 0).any() or abs(noise_pmf.sum() - 1) > 1e-12:
        raise ParameterError("noise_pmf must be a probability vector")
    if shifts is None:
        shifts = np.arange(len(noise_pmf)) - (len(noise_pmf) - 1) // 2
    shifts = np.asarray(shifts, dtype=int)
    if shifts.shape != noise_pmf.shape:
        raise ParameterError("shifts and noise_pmf must have the same length")
    m = dataset.m
    if grid_size ** m + 1 > MAX_OUTPUTS:
        raise CapabilityError(f"grid_size**m = {grid_size ** m} outputs exceed the guard")
    grid = np.linspace(0.0, 1.0, grid_size)
    cells = list(product(range(grid_size), repeat=m))
    outputs = [tuple(float(grid[i]) for i in cell) for cell in cells] + [EMPTY]
    strides = grid_size ** np.arange(m - 1, -1, -1)

    def attr_pmfs(b):
        i0 = _rounded_grid_index(summary_statistics(dataset, b), grid_size)
        per = np.zeros((m, grid_size))
        for j in range(m):
            np.add.at(per[j], np.clip(i0[j] + shifts, 0, grid_size - 1), noise_pmf)
        return per

    def row_fn(b):
        row = np.zeros(len(outputs))
        if b.sum() == 0:
            row[-1] = 1.0
            return row
        joint = np.ones(1)
        for p in attr_pmfs(b):
            joint = np.outer(joint, p).ravel()
        row[:-1] = joint
        return row

    def sampler(b, rng):
        if b.sum() == 0:
            return EMPTY
        per = attr_pmfs(b)
        idx = [inverse_cdf(p, rng.random()) for p in per]
        return outputs[int(np.dot(idx, strides))]

    return DiscreteMechanism(dataset.K, outputs, row_fn=row_fn, sampler=sampler,
                             name=f"discretized(G={grid_size})")


def summary_release_mechanism(dataset, decimals=12):
    """The noiseless summary-statistic release as an enumerable mechanism."""
    B = all_memberships(dataset.K)
    symbols = [EMPTY]
    for b in B[1:]:
        symbols.append(tuple(np.round(summary_statistics(dataset, b), decimals).tolist()))
    outputs = list(dict.fromkeys(symbols))
    index = {s: i for i, s in enumerate(outputs)}
    table = np.zeros((len(B), len(outputs)))
    table[np.arange(len(B)), [index[s] for s in symbols]] = 1.0
    return DiscreteMechanism(dataset.K, outputs, table=table, name="summary")


# -- composition and post-processing ----------------------------------------

def _shared_joint_row(rows):
    """Joint pmf of components driven by one common uniform through their inverse cdfs."""
    cuts = np.unique(np.concatenate([[0.0, 1.0]] + [np.cumsum(r) for r in rows]))
    cuts = cuts[(cuts >= 0) & (cuts <= 1)]
    lengths = np.diff(cuts)
    mids = (cuts[:-1] + cuts[1:]) / 2
    keep = lengths > 0
    lengths, mids = lengths[keep], mids[keep]
    idx = [np.minimum(np.searchsorted(np.cumsum(r), mids, side="right"), len(r) - 1) for r in rows]
    sizes = [len(r) for r in rows]
    flat = np.ravel_multi_index(idx, sizes)
    joint = np.zeros(int(np.prod(sizes)))
    np.add.at(joint, flat, lengths)
    return joint / joint.sum()


def composed_mechanism(mechs, coupling="independent"):
    """Joint mechanism releasing one symbol from each component.

    ``coupling="independent"`` uses fresh randomness per component;
    ``coupling="shared"`` feeds one common uniform to every component's
    inverse cdf, so identical components always agree.
    """
    if not mechs:
        raise ParameterError("need at least one mechanism")
    K = mechs[0].K
    if any(mech.K != K for mech in mechs):
        raise ParameterError("all mechanisms must share the membership space")
    if coupling not in ("independent", "shared"):
        raise ParameterError(f"unknown coupling {coupling!r}")
    sizes = [mech.n_outputs for mech in mechs]
    if int(np.prod(sizes)) > MAX_OUTPUTS:
        raise CapabilityError("joint output space exceeds the guard")
    outputs = list(product(*[mech.output_space for mech in mechs]))
    tables = [mech.table for mech in mechs]
    if coupling == "independent":
        table = tables[0]
        for t in tables[1:]:
            table = (table[:, :, None] * t[:, None, :]).reshape(table.shape[0], -1)
    else:
        table = np.array([_shared_joint_row([t[i] for t in tables]) for i in range(2 ** K)])
    return DiscreteMechanism(K, outputs, table=table, name=f"compose[{coupling}]({len(mechs)})")


def compose_mechanisms(mechs, b, rng, coupling="independent"):
    """Sample one joint release (a tuple with one symbol per component)."""
    if coupling == "independent":
        return tuple(mech.sample(b, rng) for mech in mechs)
    if coupling == "shared":
        u = rng.random()
        return tuple(mech.output_space[inverse_cdf(mech.pmf_row(b), u)] for mech in mechs)
    raise ParameterError(f"unknown coupling {coupling!r}")


def quantize_postprocess(mech, partition):
    """Deterministic post-processing: symbol x is released as ``partition[x]``."""
    missing = [s for s in mech.output_space if s not in partition]
    if missing:
        raise ParameterError(f"partition misses {len(missing)} symbols, e.g. {missing[0]!r}")
    coarse = list(dict.fromkeys(partition[s] for s in mech.output_space))
    cidx = {c: i for i, c in enumerate(coarse)}
    merge = np.zeros((mech.n_outputs, len(coarse)))
    for i, s in enumerate(mech.output_space):
        merge[i, cidx[partition[s]]] = 1.0
    return DiscreteMechanism(mech.K, coarse, table=mech.table @ merge, name=f"post({mech.name})")
