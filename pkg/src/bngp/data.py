"""Population datasets, membership priors and dataset file I/O."""
from dataclasses import dataclass, field
from functools import lru_cache
from itertools import product
from math import comb

import numpy as np

from .errors import ParameterError, ParseError

P_FLOOR = 1e-3
MAX_ENUM_K = 12


def _frozen(a, dtype):
    a = np.array(a, dtype=dtype, copy=True)
    a.setflags(write=False)
    return a


@lru_cache(maxsize=None)
def _all_memberships(K):
    return _frozen(list(product((0, 1), repeat=K)), np.int8).reshape(2 ** K, K)


def all_memberships(K):
    """All 2**K membership vectors, row i is the binary expansion of i (first bit most significant)."""
    if K < 1 or K > MAX_ENUM_K:
        raise ParameterError(f"enumeration needs 1 <= K <= {MAX_ENUM_K}, got {K}")
    return _all_memberships(K)


def membership_index(b):
    """Row index of ``b`` inside :func:`all_memberships`."""
    idx = 0
    for bit in np.asarray(b, dtype=int):
        idx = 2 * idx + int(bit)
    return idx


@dataclass(frozen=True, eq=False)
class PopulationDataset:
    """K x m binary records plus the attacker's reference frequencies."""

    records: np.ndarray
    reference_frequencies: np.ndarray
    p_floor: float = P_FLOOR

    def __post_init__(self):
        records = np.asarray(self.records)
        if records.ndim != 2 or records.shape[0] < 1 or records.shape[1] < 1:
            raise ParameterError(f"records must be a non-empty K x m matrix, got shape {records.shape}")
        if not np.isin(records, (0, 1)).all():
            raise ParameterError("records must contain only 0/1 entries")
        pbar = np.asarray(self.reference_frequencies, dtype=float)
        if pbar.shape != (records.shape[1],):
            raise ParameterError(f"need {records.shape[1]} reference frequencies, got shape {pbar.shape}")
        if not 0 < self.p_floor < 0.5:
            raise ParameterError("p_floor must lie in (0, 0.5)")
        pbar = np.clip(pbar, self.p_floor, 1 - self.p_floor)
        object.__setattr__(self, "records", _frozen(records, np.int8))
        object.__setattr__(self, "reference_frequencies", _frozen(pbar, float))

    @property
    def population_size(self):
        return self.records.shape[0]

    @property
    def attribute_count(self):
        return self.records.shape[1]

    K = population_size
    m = attribute_count


def generate_synthetic_population(K, m, aaf_low, aaf_high, seed, p_floor=P_FLOOR):
    """Draw attribute frequencies q_j ~ U[aaf_low, aaf_high] and records d_kj ~ Bernoulli(q_j).

    The reference frequencies are the generating q_j (clamped), so the
    attacker's external knowledge is exact for synthetic data.
    """
    if K < 1 or m < 1:
        raise ParameterError("K and m must be >= 1")
    if not 0 < aaf_low <= aaf_high < 1:
        raise ParameterError(f"need 0 < aaf_low <= aaf_high < 1, got ({aaf_low}, {aaf_high})")
    rng = np.random.default_rng(seed)
    q = rng.uniform(aaf_low, aaf_high, size=m)
    records = (rng.random((K, m)) < q).astype(np.int8)
    return PopulationDataset(records, q, p_floor)


def generate_reference_panel(dataset, size, seed):
    """Records of ``size`` outsiders drawn from the dataset's reference frequencies."""
    rng = np.random.default_rng(seed)
    return (rng.random((size, dataset.m)) < dataset.reference_frequencies).astype(np.int8)


class MembershipPrior:
    """Distribution over membership vectors b in {0,1}^K."""

    K: int

    def pmf(self, b):
        raise NotImplementedError

    def sample(self, rng, size=None):
        raise NotImplementedError

    def marginals(self):
        """Pr[b_k = 1] for every k."""
        raise NotImplementedError

    def pmf_table(self):
        """pmf over :func:`all_memberships` (K <= 12)."""
        B = all_memberships(self.K)
        return np.array([self.pmf(b) for b in B])


@dataclass(frozen=True, eq=False)
class IndependentBernoulli(MembershipPrior):
    """Each individual joins independently with probability pi_k."""

    pi: np.ndarray

    def __post_init__(self):
        pi = np.atleast_1d(np.asarray(self.pi, dtype=float))
        if pi.ndim != 1 or len(pi) < 1:
            raise ParameterError("pi must be a non-empty vector")
        if ((pi < 0) | (pi > 1)).any():
            raise ParameterError("every pi_k must lie in [0, 1]")
        object.__setattr__(self, "pi", _frozen(pi, float))

    @classmethod
    def uniform(cls, K, p=0.5):
        return cls(np.full(K, p))

    @property
    def K(self):
        return len(self.pi)

    def pmf(self, b):
        b = np.asarray(b)
        if b.shape != (self.K,):
            raise ParameterError(f"membership vector must have length {self.K}")
        return float(np.prod(np.where(b == 1, self.pi, 1 - self.pi)))

    def pmf_table(self):
        B = all_memberships(self.K)
        return np.prod(np.where(B == 1, self.pi, 1 - self.pi), axis=1)

    def sample(self, rng, size=None):
        shape = (self.K,) if size is None else (size, self.K)
        return (rng.random(shape) < self.pi).astype(np.int8)

    def marginals(self):
        return self.pi.copy()


@dataclass(frozen=True, eq=False)
class FixedSizeUniform(MembershipPrior):
    """Uniform over membership vectors with exactly n ones."""

    K: int
    n: int

    def __post_init__(self):
        if not 1 <= self.n <= self.K:
            raise ParameterError(f"need 1 <= n <= K, got n={self.n}, K={self.K}")

    def pmf(self, b):
        b = np.asarray(b)
        if b.shape != (self.K,):
            raise ParameterError(f"membership vector must have length {self.K}")
        return 1.0 / comb(self.K, self.n) if int(b.sum()) == self.n else 0.0

    def pmf_table(self):
        B = all_memberships(self.K)
        return np.where(B.sum(axis=1) == self.n, 1.0 / comb(self.K, self.n), 0.0)

    def sample(self, rng, size=None):
        rows = 1 if size is None else size
        keys = rng.random((rows, self.K))
        chosen = np.argsort(keys, axis=1)[:, : self.n]
        out = np.zeros((rows, self.K), dtype=np.int8)
        np.put_along_axis(out, chosen, 1, axis=1)
        return out[0] if size is None else out

    def marginals(self):
        return np.full(self.K, self.n / self.K)


@dataclass(frozen=True, eq=False)
class TablePrior(MembershipPrior):
    """Arbitrary pmf over :func:`all_memberships` order (small K only)."""

    table: np.ndarray

    def __post_init__(self):
        t = np.asarray(self.table, dtype=float)
        K = int(round(np.log2(t.size))) if t.size else 0
        if t.ndim != 1 or K < 1 or 2 ** K != t.size or K > MAX_ENUM_K:
            raise ParameterError(f"table must have 2**K entries with 1 <= K <= {MAX_ENUM_K}")
        if (t < 0).any() or abs(t.sum() - 1) > 1e-9:
            raise ParameterError("table must be a probability vector")
        object.__setattr__(self, "table", _frozen(t / t.sum(), float))

    @classmethod
    def random(cls, K, rng, concentration=1.0):
        return cls(rng.dirichlet(np.full(2 ** K, concentration)))

    @property
    def K(self):
        return int(round(np.log2(self.table.size)))

    def pmf(self, b):
        b = np.asarray(b)
        if b.shape != (self.K,):
            raise ParameterError(f"membership vector must have length {self.K}")
        return float(self.table[membership_index(b)])

    def pmf_table(self):
        return self.table.copy()

    def sample(self, rng, size=None):
        rows = 1 if size is None else size
        idx = np.minimum(np.searchsorted(np.cumsum(self.table), rng.random(rows), side="right"),
                         self.table.size - 1)
        out = all_memberships(self.K)[idx].astype(np.int8)
        return out[0] if size is None else out

    def marginals(self):
        return all_memberships(self.K).T.astype(float) @ self.table


def sample_membership(prior, rng):
    """One membership vector drawn from ``prior``."""
    return prior.sample(rng)


@dataclass
class MembershipSampler:
    """Batch sampler that rejects empty memberships and counts the rejections."""

    prior: MembershipPrior
    drawn: int = 0
    rejected: int = 0
    _cap: int = field(default=1000, repr=False)

    def __call__(self, rng, size):
        out = self.prior.sample(rng, size)
        self.drawn += size
        for _ in range(self._cap):
            empty = out.sum(axis=1) == 0
            n_empty = int(empty.sum())
            if n_empty == 0:
                return out
            self.rejected += n_empty
            self.drawn += n_empty
            out[empty] = self.prior.sample(rng, n_empty)
        raise ParameterError("prior puts (almost) all mass on the empty membership vector")

    @property
    def rejection_rate(self):
        return self.rejected / self.drawn if self.drawn else 0.0


def load_population_csv(path, reference_rows=None, p_floor=P_FLOOR):
    """Read a dataset CSV.

    The file may start with ``#ref,`` followed by m reference frequencies.
    Without that header, ``reference_rows`` names the trailing rows that form
    a reference split: they are removed from the population and their column
    means become the reference frequencies.
    """
    with open(path, encoding="utf-8") as fh:
        lines = fh.read().split("\n")
    if lines and lines[-1] == "":
        lines.pop()
    if not lines:
        raise ParseError(f"{path}: empty file")
    pbar = None
    start = 0
    if lines[0].startswith("#ref,"):
        try:
            pbar = [float(v) for v in lines[0].split(",")[1:]]
        except ValueError as exc:
            raise ParseError(f"{path}: line 1: bad reference frequency ({exc})") from None
        start = 1
    rows = []
    width = len(pbar) if pbar is not None else None
    for lineno, line in enumerate(lines[start:], start=start + 1):
        cells = line.split(",")
        if width is None:
            width = len(cells)
        if len(cells) != width:
            raise ParseError(f"{path}: line {lineno}: expected {width} columns, found {len(cells)}")
        row = []
        for col, cell in enumerate(cells, start=1):
            if cell.strip() not in ("0", "1"):
                raise ParseError(f"{path}: line {lineno}, column {col}: expected 0 or 1, found {cell!r}")
            row.append(int(cell))
        rows.append(row)
    if not rows:
        raise ParseError(f"{path}: no record rows")
    records = np.array(rows, dtype=np.int8)
    if pbar is None:
        if not reference_rows:
            raise ParseError(f"{path}: missing '#ref,' header and no reference split given")
        if reference_rows >= len(records):
            raise ParseError(f"{path}: reference split of {reference_rows} rows leaves no population")
        pbar = records[-reference_rows:].mean(axis=0)
        records = records[:-reference_rows]
    return PopulationDataset(records, pbar, p_floor)


def save_population_csv(dataset, path):
    """Write ``dataset`` in the format read by :func:`load_population_csv`."""
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write("#ref," + ",".join(repr(float(p)) for p in dataset.reference_frequencies) + "\n")
        for row in dataset.records:
            fh.write(",".join(str(int(v)) for v in row) + "\n")
