"""Probability-vector algebra over (y, s, a) atoms.

An atom is one joint assignment of the three binary variables: the class
label y, the secondary attribute s, and the shortcut attribute a. Atoms are
indexed canonically as

    index = 4*y + 2*s + a

so a length-8 probability vector fully describes a joint distribution.
This module builds the biased training distribution, reweights it through a
grouping, and measures divergences between distributions.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import EmptyGroup, NonNormalizable, OutOfRange, SupportMismatch

__all__ = [
    "N_ATOMS",
    "Atom",
    "Distribution",
    "DivergenceReport",
    "make_distribution",
    "uniform_distribution",
    "biased_distribution",
    "kl_divergence",
    "tv_distance",
    "pinsker_bound",
    "divergence_report",
    "reweighted_distribution",
]

N_ATOMS = 8

# Input vectors may sum to 1 only approximately; accept a slack of 1e-9 and
# renormalize. Internally results stay within 1e-12 of mass 1.
_INPUT_SLACK = 1e-9
_NEG_SLACK = -1e-12


@dataclass(frozen=True)
class Atom:
    """One joint assignment of the binary variables (y, s, a)."""

    y: int
    s: int
    a: int

    @property
    def index(self) -> int:
        return 4 * self.y + 2 * self.s + self.a

    @staticmethod
    def from_index(index: int) -> "Atom":
        if not 0 <= index < N_ATOMS:
            raise OutOfRange(f"atom index {index} outside [0, {N_ATOMS})")
        return Atom(y=(index >> 2) & 1, s=(index >> 1) & 1, a=index & 1)


def atom_index(y, s, a):
    """Vectorized canonical index 4*y + 2*s + a."""
    return 4 * np.asarray(y) + 2 * np.asarray(s) + np.asarray(a)


@dataclass(frozen=True)
class Distribution:
    """A validated probability vector over atoms.

    Entries are non-negative and sum to 1 within 1e-12. Construct through
    make_distribution; the raw constructor performs no checks.
    """

    probs: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "probs", np.asarray(self.probs, dtype=float))
        self.probs.setflags(write=False)

    def __len__(self) -> int:
        return len(self.probs)

    def __getitem__(self, j):
        return self.probs[j]


@dataclass(frozen=True)
class DivergenceReport:
    kl: float
    tv: float
    pinsker_bound: float


def make_distribution(probs) -> Distribution:
    """Validate and mildly repair a probability vector.

    Entries below -1e-12 or a total mass off by more than 1e-9 are
    configuration errors, not rounding noise, and raise NonNormalizable.
    """
    p = np.asarray(probs, dtype=float)
    if p.ndim != 1 or len(p) != N_ATOMS:
        raise NonNormalizable(f"expected a vector of {N_ATOMS} atoms, got shape {p.shape}")
    if not np.all(np.isfinite(p)):
        raise NonNormalizable("non-finite entries")
    if np.any(p < _NEG_SLACK):
        raise NonNormalizable(f"negative entry {p.min():.3e} below tolerance")
    p = np.clip(p, 0.0, None)
    total = p.sum()
    if abs(total - 1.0) > _INPUT_SLACK:
        raise NonNormalizable(f"mass {total!r} deviates from 1 by more than {_INPUT_SLACK}")
    return Distribution(p / total)


def uniform_distribution(n_atoms: int = N_ATOMS) -> Distribution:
    return Distribution(np.full(n_atoms, 1.0 / n_atoms))


def biased_distribution(p_s0: float, p_s1: float) -> Distribution:
    """Joint distribution with a tunable shortcut correlation.

    p_s0 and p_s1 give the fraction of shortcut-aligned samples (y == a)
    within s=0 and s=1. The marginals P(y=1) = P(a=1) = P(s=1) = 0.5 hold
    for any setting; (0.5, 0.5) is the uniform, uncorrelated case.
    """
    for name, v in (("p_s0", p_s0), ("p_s1", p_s1)):
        if not 0.0 < v < 1.0:
            raise OutOfRange(f"{name} must lie strictly inside (0, 1), got {v}")
    p = np.empty(N_ATOMS)
    for y in (0, 1):
        for s in (0, 1):
            for a in (0, 1):
                aligned = p_s0 if s == 0 else p_s1
                frac = aligned if y == a else 1.0 - aligned
                p[4 * y + 2 * s + a] = frac / 4.0
    return Distribution(p)


def kl_divergence(p: Distribution, q: Distribution) -> float:
    """KL(p || q) = sum_j p_j ln(p_j / q_j), in nats.

    Convention 0*ln(0) = 0. Mass of p outside q's support is a
    SupportMismatch error rather than +inf, to surface configuration bugs.
    """
    pv, qv = p.probs, q.probs
    if len(pv) != len(qv):
        raise SupportMismatch(f"length mismatch {len(pv)} vs {len(qv)}")
    pos = pv > 0.0
    if np.any(qv[pos] == 0.0):
        raise SupportMismatch("p has mass where q is zero")
    return float(np.sum(pv[pos] * np.log(pv[pos] / qv[pos])))


def tv_distance(p: Distribution, q: Distribution) -> float:
    """Total variation distance 0.5 * sum |p_j - q_j|."""
    if len(p) != len(q):
        raise SupportMismatch(f"length mismatch {len(p)} vs {len(q)}")
    return float(0.5 * np.abs(p.probs - q.probs).sum())


def pinsker_bound(train_err: float, kl: float) -> float:
    """Upper bound on deployment error: train_err + sqrt(kl / 2)."""
    if not 0.0 <= train_err <= 1.0:
        raise OutOfRange(f"train_err must be in [0, 1], got {train_err}")
    if kl < 0.0:
        raise OutOfRange(f"kl must be non-negative, got {kl}")
    return train_err + float(np.sqrt(kl / 2.0))


def divergence_report(p: Distribution, q: Distribution, train_err: float = 0.0) -> DivergenceReport:
    kl = kl_divergence(p, q)
    return DivergenceReport(kl=kl, tv=tv_distance(p, q), pinsker_bound=pinsker_bound(train_err, kl))


def reweighted_distribution(p: Distribution, g, w) -> Distribution:
    """Redistribute mass across groups while preserving within-group ratios.

    g is a SoftGrouping (or bare [n_atoms x k] matrix of conditionals
    P(group | atom)); w is a weight vector on the k-simplex. The result is

        P^w[j] = sum_i w_i * m_ji / M_i,   m_ji = p_j * P(g_i | atom j),
                                           M_i  = sum_j m_ji.

    For a hard partition this reduces to scaling each group's conditional
    distribution by its weight.
    """
    assign = np.asarray(getattr(g, "assign", g), dtype=float)
    wv = np.asarray(getattr(w, "w", w), dtype=float)
    if assign.shape != (len(p), len(wv)):
        raise SupportMismatch(
            f"grouping shape {assign.shape} incompatible with {len(p)} atoms and {len(wv)} weights"
        )
    m = p.probs[:, None] * assign
    mass = m.sum(axis=0)
    dead = mass <= 0.0
    if np.any(dead & (wv > 0.0)):
        raise EmptyGroup(f"groups {np.nonzero(dead & (wv > 0.0))[0].tolist()} have weight but no mass")
    mass = np.where(dead, 1.0, mass)
    return make_distribution((m / mass) @ wv)
