"""Posterior sampling primitives: exact categorical draws, a random-walk
Metropolis-Hastings kernel, and the log-space helpers both rely on.

Everything here is stateless over a caller-owned generator, so chains for
different samples can run in parallel without sharing anything.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Optional, Union

import numpy as np

__all__ = ["logsumexp", "categorical_sample", "MhConfig", "mh_chain"]


def logsumexp(values) -> float:
    """log(sum(exp(values))) via max-shift; exact for a single element."""
    v = np.asarray(values, dtype=np.float64)
    if v.size == 0:
        raise ValueError("logsumexp of an empty sequence")
    m = np.max(v)
    if not np.isfinite(m):
        # all -inf stays -inf; a +inf or nan propagates as-is
        return float(m)
    return float(m + np.log(np.sum(np.exp(v - m))))


def categorical_sample(weights, rng: np.random.Generator, size: Optional[int] = None) -> Union[int, np.ndarray]:
    """Draw indices from a normalized probability vector by inverse CDF.

    One uniform per draw; ``size=None`` returns a single int index.
    """
    w = np.asarray(weights, dtype=np.float64)
    if np.any(w < 0.0):
        raise ValueError("categorical weights must be nonnegative")
    total = w.sum()
    if abs(total - 1.0) > 1e-9:
        raise ValueError(f"categorical weights must sum to 1, got {total!r}")
    cdf = np.cumsum(w)
    cdf[-1] = 1.0
    if size is None:
        return int(np.searchsorted(cdf, rng.random(), side="right"))
    idx = np.searchsorted(cdf, rng.random(size), side="right")
    return np.minimum(idx, len(w) - 1)


@dataclass(frozen=True)
class MhConfig:
    """Random-walk Metropolis-Hastings settings.

    ``init`` is the starting latent (a warm start from the previous
    retained sample, or a prior draw on first use).  ``burn_in`` only
    matters when collecting a batch of states.
    """

    chain_len: int
    proposal_scales: np.ndarray
    init: np.ndarray
    burn_in: int = 0

    def __post_init__(self):
        object.__setattr__(self, "proposal_scales", np.asarray(self.proposal_scales, dtype=np.float64))
        object.__setattr__(self, "init", np.asarray(self.init, dtype=np.float64))
        if self.chain_len < 1:
            raise ValueError("chain_len must be a positive integer")
        if not (0 <= self.burn_in < self.chain_len):
            raise ValueError("burn_in must lie in [0, chain_len)")
        if np.any(self.proposal_scales <= 0.0):
            raise ValueError("proposal scales must be strictly positive")
        if self.proposal_scales.shape != self.init.shape:
            raise ValueError("proposal_scales and init must have the same shape")


def mh_chain(
    log_target: Callable[[np.ndarray], float],
    config: MhConfig,
    rng: np.random.Generator,
    collect: bool = False,
):
    """Run a symmetric random-walk MH chain and return its final state.

    Proposals are z' = z + scales * standard normal, accepted with
    probability min(1, exp(log_target(z') - log_target(z))).  The proposal
    is symmetric, so its density cancels from the ratio and is never
    evaluated; the acceptance test works purely on log-target differences,
    so no raw density is ever exponentiated.  A proposal where the target
    is -inf is auto-rejected; NaN aborts.

    With ``collect=True`` also returns the array of post-burn-in states,
    one row per step.
    """
    z = config.init.copy()
    lp = float(log_target(z))
    if np.isnan(lp):
        raise ValueError("log_target is NaN at the chain start")
    if lp == -np.inf:
        raise ValueError("log_target must be finite at the chain start")

    m = config.chain_len
    steps = rng.standard_normal((m,) + z.shape) * config.proposal_scales
    log_u = np.log(rng.random(m))

    kept = np.empty((m - config.burn_in,) + z.shape) if collect else None
    for t in range(m):
        proposal = z + steps[t]
        lp_prop = float(log_target(proposal))
        if np.isnan(lp_prop):
            raise ValueError("log_target returned NaN at a proposal")
        if log_u[t] < lp_prop - lp:
            z = proposal
            lp = lp_prop
        if collect and t >= config.burn_in:
            kept[t - config.burn_in] = z
    if collect:
        return z, kept
    return z
