"""Covariance matrix adaptation evolution strategy.

Standard rank-based formulation: weighted recombination of the better
half, cumulative step-size adaptation, and rank-1 plus rank-mu
covariance updates.  Written against the ask/tell interface so fitness
evaluations can run anywhere; the full optimizer state (including the
generator state) serializes into checkpoints for bit-exact resume.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np


def default_popsize(n: int) -> int:
    """Population size 4 + floor(3 ln n) used when none is configured."""
    if n < 1:
        raise ValueError(f"dimension must be >= 1, got {n}")
    return 4 + int(np.floor(3.0 * np.log(n)))


@dataclass(frozen=True)
class StrategyConstants:
    n: int
    popsize: int
    mu: int
    weights: np.ndarray
    mueff: float
    cc: float
    cs: float
    c1: float
    cmu: float
    damps: float
    chi_n: float


def strategy_constants(n: int, popsize: int) -> StrategyConstants:
    mu = popsize // 2
    w = np.log(mu + 0.5) - np.log(np.arange(1, mu + 1))
    w = w / np.sum(w)
    mueff = float(np.sum(w) ** 2 / np.sum(w**2))
    cc = (4.0 + mueff / n) / (n + 4.0 + 2.0 * mueff / n)
    cs = (mueff + 2.0) / (n + mueff + 5.0)
    c1 = 2.0 / ((n + 1.3) ** 2 + mueff)
    cmu = min(1.0 - c1, 2.0 * (mueff - 2.0 + 1.0 / mueff) / ((n + 2.0) ** 2 + mueff))
    damps = 1.0 + 2.0 * max(0.0, np.sqrt((mueff - 1.0) / (n + 1.0)) - 1.0) + cs
    chi_n = np.sqrt(n) * (1.0 - 1.0 / (4.0 * n) + 1.0 / (21.0 * n**2))
    return StrategyConstants(n, popsize, mu, w, mueff, cc, cs, c1, cmu, damps, chi_n)


@dataclass
class CmaState:
    mean: np.ndarray
    sigma: float
    cov: np.ndarray
    p_sigma: np.ndarray
    p_c: np.ndarray
    iteration: int
    popsize: int
    rng: np.random.Generator = field(repr=False)

    @property
    def n(self) -> int:
        return self.mean.size

    def constants(self) -> StrategyConstants:
        return strategy_constants(self.n, self.popsize)


def cmaes_init(
    theta0: np.ndarray,
    sigma0: float,
    popsize: int | None = None,
    seed: int = 0,
) -> CmaState:
    """Fresh search state centered on theta0 with isotropic spread sigma0."""
    theta0 = np.asarray(theta0, dtype=float)
    if sigma0 <= 0:
        raise ValueError(f"sigma0 must be positive, got {sigma0}")
    n = theta0.size
    return CmaState(
        mean=theta0.copy(),
        sigma=float(sigma0),
        cov=np.eye(n),
        p_sigma=np.zeros(n),
        p_c=np.zeros(n),
        iteration=0,
        popsize=popsize if popsize is not None else default_popsize(n),
        rng=np.random.default_rng(seed),
    )


def _eigen(cov: np.ndarray):
    vals, vecs = np.linalg.eigh(0.5 * (cov + cov.T))
    vals = np.maximum(vals, 1e-300)
    return vals, vecs


def cmaes_ask(state: CmaState) -> list[np.ndarray]:
    """Sample popsize candidates; advances the generator state."""
    vals, vecs = _eigen(state.cov)
    z = state.rng.standard_normal((state.popsize, state.n))
    y = (vecs * np.sqrt(vals)) @ z.T  # columns: C^{1/2} z_i
    return [state.mean + state.sigma * y[:, i] for i in range(state.popsize)]


def cmaes_tell(
    state: CmaState,
    samples: list[np.ndarray],
    fitnesses,
    maximize: bool = False,
) -> CmaState:
    """Rank-based distribution update; returns the same (mutated) state."""
    fit = np.asarray(fitnesses, dtype=float)
    if len(samples) != state.popsize or fit.size != state.popsize:
        raise ValueError(
            f"need exactly {state.popsize} samples and fitnesses, "
            f"got {len(samples)} / {fit.size}"
        )
    if not np.all(np.isfinite(fit)):
        bad = int(np.flatnonzero(~np.isfinite(fit))[0])
        raise ValueError(f"non-finite fitness at sample index {bad}: {fit[bad]}")
    c = state.constants()
    order = np.argsort(-fit if maximize else fit, kind="stable")
    X = np.asarray(samples, dtype=float)[order[: c.mu]]

    xold = state.mean
    mean = c.weights @ X
    y = (mean - xold) / state.sigma

    vals, vecs = _eigen(state.cov)
    invsqrt = (vecs / np.sqrt(vals)) @ vecs.T
    state.p_sigma = (1.0 - c.cs) * state.p_sigma + np.sqrt(
        c.cs * (2.0 - c.cs) * c.mueff
    ) * (invsqrt @ y)
    expected = np.sqrt(1.0 - (1.0 - c.cs) ** (2.0 * (state.iteration + 1)))
    hsig = float(
        np.linalg.norm(state.p_sigma) / expected / c.chi_n < 1.4 + 2.0 / (state.n + 1.0)
    )
    state.p_c = (1.0 - c.cc) * state.p_c + hsig * np.sqrt(
        c.cc * (2.0 - c.cc) * c.mueff
    ) * y

    art = (X - xold) / state.sigma
    rank_mu = (art.T * c.weights) @ art
    cov = (
        (1.0 - c.c1 - c.cmu) * state.cov
        + c.c1
        * (
            np.outer(state.p_c, state.p_c)
            + (1.0 - hsig) * c.cc * (2.0 - c.cc) * state.cov
        )
        + c.cmu * rank_mu
    )
    state.cov = 0.5 * (cov + cov.T)
    state.sigma = state.sigma * float(
        np.exp((c.cs / c.damps) * (np.linalg.norm(state.p_sigma) / c.chi_n - 1.0))
    )
    state.mean = mean
    state.iteration += 1
    return state


def rng_state_to_jsonable(rng: np.random.Generator) -> dict:
    state = rng.bit_generator.state
    return {
        "bit_generator": state["bit_generator"],
        "state": {k: int(v) for k, v in state["state"].items()},
        "has_uint32": int(state["has_uint32"]),
        "uinteger": int(state["uinteger"]),
    }


def rng_from_jsonable(payload: dict) -> np.random.Generator:
    rng = np.random.default_rng(0)
    rng.bit_generator.state = {
        "bit_generator": payload["bit_generator"],
        "state": {k: int(v) for k, v in payload["state"].items()},
        "has_uint32": int(payload["has_uint32"]),
        "uinteger": int(payload["uinteger"]),
    }
    return rng
