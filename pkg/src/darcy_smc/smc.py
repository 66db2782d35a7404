"""Adaptive tempering SMC on the coefficient box [-1, 1]^D.

One round of the sampler: pick the next temperature by bisecting the
effective sample size to a target, reweight, resample when the ESS is at or
below the target, retune the mutation kernel (global scale from the last
acceptance rate, per-coordinate scales from the weighted ensemble variance,
step count from the scale), then apply that many sweeps of reflective
random-walk Metropolis with all coordinates proposed jointly per particle.
The run ends with the round that reaches temperature 1.

Misfits are cached per particle, so each round costs exactly
``n_particles * steps`` forward evaluations, all executed as batches.
Every random draw comes from a stream derived deterministically from the
master seed plus (purpose, round, particle) indices, so results do not
depend on how particle-level work is scheduled.
"""

from __future__ import annotations

import math
import time
from dataclasses import dataclass, field as dataclass_field

import numpy as np

from .field import FieldConfig, evaluate_field_batch

__all__ = [
    "DegenerateWeightsError",
    "StagnationError",
    "Ensemble",
    "SMCConfig",
    "RoundRecord",
    "RunTrace",
    "derived_rng",
    "ess",
    "next_temperature",
    "resample",
    "resample_multinomial",
    "resample_systematic",
    "proposal_scales",
    "adapt_rho",
    "adapt_steps",
    "reflect",
    "mutate",
    "run",
    "weighted_mean",
    "weighted_field_mean",
]

DELTA_PHI_FLOOR = 1e-10
STAGNATION_LIMIT = 5
VARIANCE_FLOOR = 1e-12
PRIOR_VARIANCE = 1.0 / 3.0

# Stream purposes for seed derivation.
_INIT, _RESAMPLE, _MUTATE = 0, 1, 2


class DegenerateWeightsError(ValueError):
    """All particle weights vanished."""


class StagnationError(RuntimeError):
    """Temperature stopped advancing; carries the partial trace."""

    def __init__(self, message: str, trace: "RunTrace"):
        super().__init__(message)
        self.trace = trace


def derived_rng(master_seed: int, *key: int) -> np.random.Generator:
    """Independent generator keyed on the master seed and integer indices."""
    return np.random.default_rng(np.random.SeedSequence(master_seed, spawn_key=key))


@dataclass
class Ensemble:
    """Particles with unnormalized log weights."""

    particles: np.ndarray
    log_weights: np.ndarray

    def __post_init__(self):
        self.particles = np.asarray(self.particles, dtype=float)
        self.log_weights = np.asarray(self.log_weights, dtype=float)
        if self.particles.ndim != 2 or self.particles.shape[0] < 2:
            raise ValueError("need an (M, D) particle array with M >= 2")
        if self.log_weights.shape != (self.particles.shape[0],):
            raise ValueError("log_weights must have one entry per particle")
        if np.any(np.abs(self.particles) > 1.0 + 1e-12):
            raise ValueError("particle coordinates must lie in [-1, 1]")

    @property
    def size(self) -> int:
        return self.particles.shape[0]

    @property
    def n_params(self) -> int:
        return self.particles.shape[1]

    def normalized_weights(self) -> np.ndarray:
        return _normalize_log_weights(self.log_weights)

    def ess(self) -> float:
        return ess(self.normalized_weights())


def _normalize_log_weights(log_weights: np.ndarray) -> np.ndarray:
    logw = np.asarray(log_weights, dtype=float)
    if not np.all(np.isfinite(logw)):
        finite = logw[np.isfinite(logw)]
        if finite.size == 0:
            raise DegenerateWeightsError("no particle has finite log weight")
    w = np.exp(logw - logw.max())
    total = w.sum()
    if total <= 0.0 or not np.isfinite(total):
        raise DegenerateWeightsError("weights sum to zero")
    return w / total


def ess(weights) -> float:
    """Effective sample size ``(sum w)**2 / sum w**2``; scale invariant."""
    w = np.asarray(weights, dtype=float)
    if np.any(w < 0):
        raise ValueError("weights must be nonnegative")
    total = w.sum()
    if total <= 0.0:
        raise DegenerateWeightsError("all weights are zero")
    return float(total**2 / np.sum(w**2))


def _ess_at(misfits, carried_log_weights, phi_prev, phi):
    logw = carried_log_weights - (phi - phi_prev) * misfits
    return ess(np.exp(logw - logw.max()))


def next_temperature(
    misfits,
    carried_log_weights,
    phi_prev: float,
    target_ess: float,
    bisections: int = 100,
) -> float:
    """Smallest temperature in (phi_prev, 1] whose reweighted ESS hits the target.

    If even temperature 1 keeps the ESS at or above the target, returns 1
    (final round).  Otherwise bisects; the returned endpoint has ESS at or
    just below the target, so ties resolve toward larger temperatures and a
    subsequent ``ESS <= target`` resampling test always fires.
    """
    if not phi_prev < 1.0:
        raise ValueError(f"phi_prev must be below 1, got {phi_prev}")
    misfits = np.asarray(misfits, dtype=float)
    carried = np.asarray(carried_log_weights, dtype=float)
    if _ess_at(misfits, carried, phi_prev, 1.0) >= target_ess:
        return 1.0
    lo, hi = phi_prev, 1.0
    for _ in range(bisections):
        mid = 0.5 * (lo + hi)
        if mid <= lo or mid >= hi:
            break
        if _ess_at(misfits, carried, phi_prev, mid) >= target_ess:
            lo = mid
        else:
            hi = mid
    return hi


def _resample_indices(weights: np.ndarray, rng: np.random.Generator, scheme: str):
    m = len(weights)
    if scheme == "multinomial":
        return rng.choice(m, size=m, replace=True, p=weights)
    if scheme == "systematic":
        positions = (rng.random() + np.arange(m)) / m
        return np.searchsorted(np.cumsum(weights), positions).clip(0, m - 1)
    raise ValueError(f"unknown resampling scheme: {scheme!r}")


def resample(ensemble: Ensemble, rng: np.random.Generator, scheme: str = "multinomial") -> Ensemble:
    """Replace the weighted ensemble by an equally weighted draw from it."""
    w = ensemble.normalized_weights()
    idx = _resample_indices(w, rng, scheme)
    return Ensemble(ensemble.particles[idx].copy(), np.zeros(ensemble.size))


def resample_multinomial(ensemble: Ensemble, rng: np.random.Generator) -> Ensemble:
    """M i.i.d. draws from the weighted empirical measure."""
    return resample(ensemble, rng, "multinomial")


def resample_systematic(ensemble: Ensemble, rng: np.random.Generator) -> Ensemble:
    """Stratified low-variance alternative, behind a config switch."""
    return resample(ensemble, rng, "systematic")


def proposal_scales(ensemble: Ensemble, rho: float) -> np.ndarray:
    """Per-coordinate step sizes: rho times the weighted standard deviation.

    Coordinates whose weighted variance underflows fall back to the prior
    variance 1/3 so the kernel never freezes.
    """
    w = ensemble.normalized_weights()
    mean = w @ ensemble.particles
    second = w @ ensemble.particles**2
    var = second - mean**2
    var = np.where(var < VARIANCE_FLOOR, PRIOR_VARIANCE, var)
    return rho * np.sqrt(var)


def adapt_rho(rho_prev: float, acc_prev: float) -> float:
    """Rescale the global proposal factor toward acceptance rates near 0.2."""
    if rho_prev <= 0:
        raise ValueError(f"rho must be positive, got {rho_prev}")
    if not 0.0 <= acc_prev <= 1.0:
        raise ValueError(f"acceptance rate must be in [0, 1], got {acc_prev}")
    if acc_prev > 0.3:
        return 2.0 * rho_prev
    if acc_prev < 0.15:
        return 0.5 * rho_prev
    return rho_prev


def adapt_steps(m_global: float, rho: float, bounds) -> int:
    """Sweep count ``floor(m / rho**2)`` clamped to the configured bounds."""
    lo, hi = bounds
    if not (m_global > 0 and rho > 0):
        raise ValueError("m_global and rho must be positive")
    if not 1 <= lo <= hi:
        raise ValueError(f"step bounds must satisfy 1 <= lo <= hi, got {bounds}")
    # Nudge before flooring so ratios that are integers up to rounding noise
    # (e.g. 2 / 0.2**2) land on the intended integer.
    raw = math.floor(m_global / rho**2 + 1e-9)
    return int(min(max(raw, lo), hi))


def reflect(value: float, lo: float, hi: float) -> float:
    """Fold a real into [lo, hi] by repeated reflection at the endpoints.

    Values already inside pass through bit-identically.
    """
    if not hi > lo:
        raise ValueError(f"need hi > lo, got ({lo}, {hi})")
    if lo <= value <= hi:
        return value
    period = 2.0 * (hi - lo)
    t = (value - lo) % period
    if t > hi - lo:
        t = period - t
    return lo + t


def _reflect_box(values: np.ndarray) -> np.ndarray:
    """Vectorized reflection into [-1, 1]; the interior passes through."""
    t = np.mod(values + 1.0, 4.0)
    folded = -1.0 + np.where(t > 2.0, 4.0 - t, t)
    return np.where(np.abs(values) <= 1.0, values, folded)


def mutate(
    ensemble: Ensemble,
    misfits: np.ndarray,
    phi: float,
    scales: np.ndarray,
    steps: int,
    rng,
    misfit_fn,
):
    """Apply ``steps`` sweeps of reflective random-walk Metropolis.

    Each sweep draws one joint proposal per particle (every coordinate moved
    at once, so one forward evaluation per particle per sweep) and accepts
    with probability ``min(1, exp(phi * (misfit_old - misfit_new)))``, which
    leaves the tempered posterior at temperature ``phi`` invariant.

    ``rng`` is either one generator or a sequence of per-particle
    generators; with per-particle streams the result is independent of how
    the particle loop is scheduled.

    Returns the mutated ensemble (weights untouched), the average acceptance
    fraction over all proposals, and the updated misfit cache.
    """
    if not 0.0 < phi <= 1.0:
        raise ValueError(f"phi must lie in (0, 1], got {phi}")
    if steps < 0:
        raise ValueError("steps must be nonnegative")
    particles = ensemble.particles.copy()
    misfits = np.asarray(misfits, dtype=float).copy()
    m, d = particles.shape
    per_particle = not isinstance(rng, np.random.Generator)
    if per_particle and len(rng) != m:
        raise ValueError("need one generator per particle")

    accepted = 0
    for _ in range(steps):
        if per_particle:
            noise = np.stack([g.standard_normal(d) for g in rng])
            uniforms = np.array([g.random() for g in rng])
        else:
            noise = rng.standard_normal((m, d))
            uniforms = rng.random(m)
        proposal = _reflect_box(particles + scales * noise)
        new_misfits = np.asarray(misfit_fn(proposal), dtype=float)
        log_accept = phi * (misfits - new_misfits)
        accept = np.log(uniforms) < log_accept
        particles[accept] = proposal[accept]
        misfits[accept] = new_misfits[accept]
        accepted += int(accept.sum())

    acc_rate = accepted / (m * steps) if steps > 0 else 1.0
    return Ensemble(particles, ensemble.log_weights.copy()), acc_rate, misfits


@dataclass(frozen=True)
class SMCConfig:
    """Sampler parameters: population size, ESS target and kernel tuning."""

    n_particles: int
    target_ess: float
    rho0: float = 1.0
    m_global: float = 0.2
    step_bounds: tuple = (5, 50)
    resampling: str = "multinomial"

    def __post_init__(self):
        if self.n_particles < 2:
            raise ValueError("need at least 2 particles")
        if not 1.0 <= self.target_ess <= self.n_particles:
            raise ValueError(
                f"target ESS must lie in [1, {self.n_particles}], got {self.target_ess}"
            )
        if self.rho0 <= 0 or self.m_global <= 0:
            raise ValueError("rho0 and m_global must be positive")
        lo, hi = self.step_bounds
        if not 1 <= lo <= hi:
            raise ValueError(f"invalid step bounds {self.step_bounds}")
        if self.resampling not in ("multinomial", "systematic"):
            raise ValueError(f"unknown resampling scheme {self.resampling!r}")


@dataclass(frozen=True)
class RoundRecord:
    """Diagnostics for one tempering round."""

    round_index: int
    phi: float
    ess: float
    acc_rate: float
    rho: float
    steps: int
    seconds: float
    delta_phi_raw: float
    max_misfit: float
    min_inc_log_weight: float
    resampled: bool


@dataclass
class RunTrace:
    """Per-round diagnostics; temperatures increase strictly and end at 1."""

    rounds: list = dataclass_field(default_factory=list)

    @property
    def temperatures(self) -> np.ndarray:
        return np.array([r.phi for r in self.rounds])

    def csv_rows(self):
        yield "round,phi,ess,acc_rate,rho,steps,seconds"
        for r in self.rounds:
            yield (
                f"{r.round_index},{r.phi!r},{r.ess!r},{r.acc_rate!r},"
                f"{r.rho!r},{r.steps},{r.seconds:.6f}"
            )


def run(
    misfit_fn,
    n_params: int,
    config: SMCConfig,
    seed: int,
    ladder=None,
):
    """Run the sampler from the uniform prior to the full posterior.

    Parameters
    ----------
    misfit_fn : callable
        Batched misfit: (m, n_params) coefficients -> (m,) nonnegative reals.
    n_params : int
        Coefficient dimension.
    config : SMCConfig
    seed : int
        Master seed; all streams derive from it.
    ladder : sequence of floats, optional
        Explicit increasing temperature schedule ending at 1.  When given,
        the temperature adaptation is bypassed (the resampling rule and
        kernel adaptation still apply, and the final round may resample);
        when omitted the schedule is chosen on the fly and the final
        weighted ensemble is reported without a last resampling pass.

    Returns
    -------
    (Ensemble, RunTrace)

    Notes
    -----
    In adaptive mode a target ESS equal to the particle count is rejected
    whenever misfits vary: the bisection could then only ever advance the
    temperature by a vanishing step.
    """
    adaptive = ladder is None
    if not adaptive:
        ladder = [float(p) for p in ladder]
        if not ladder or abs(ladder[-1] - 1.0) > 1e-15:
            raise ValueError("ladder must end at temperature 1")
        if any(b <= a for a, b in zip([0.0] + ladder[:-1], ladder)):
            raise ValueError("ladder must be strictly increasing from 0")

    m = config.n_particles
    particles = derived_rng(seed, _INIT).uniform(-1.0, 1.0, size=(m, n_params))
    log_weights = np.zeros(m)
    misfits = np.asarray(misfit_fn(particles), dtype=float)
    if misfits.shape != (m,):
        raise ValueError("misfit_fn must return one value per particle")
    if np.any(misfits < 0) or not np.all(np.isfinite(misfits)):
        raise ValueError("misfits must be finite and nonnegative")

    misfits_vary = float(np.ptp(misfits)) > 0.0
    if adaptive and misfits_vary and config.target_ess >= m:
        raise ValueError(
            "target_ess equal to the particle count cannot be met with "
            "varying misfits; lower target_ess"
        )

    trace = RunTrace()
    phi = 0.0
    rho = config.rho0
    acc_prev = None
    stagnant_rounds = 0
    round_index = 0

    while phi < 1.0:
        round_index += 1
        tic = time.perf_counter()

        if adaptive:
            phi_next = next_temperature(misfits, log_weights, phi, config.target_ess)
        else:
            if round_index > len(ladder):
                raise RuntimeError("ladder exhausted before reaching temperature 1")
            phi_next = ladder[round_index - 1]
        delta_raw = phi_next - phi
        if adaptive and delta_raw < DELTA_PHI_FLOOR:
            stagnant_rounds += 1
            if stagnant_rounds >= STAGNATION_LIMIT:
                raise StagnationError(
                    f"temperature advanced less than {DELTA_PHI_FLOOR} for "
                    f"{STAGNATION_LIMIT} consecutive rounds at phi={phi:.12g}",
                    trace,
                )
            phi_next = min(1.0, phi + DELTA_PHI_FLOOR)
        elif adaptive:
            stagnant_rounds = 0

        max_misfit = float(misfits.max())
        incremental = -(phi_next - phi) * misfits
        log_weights = log_weights + incremental
        # Same arithmetic as the bisection's internal evaluation, so the
        # resampling test below sees exactly the ESS the bisection achieved
        # (just below the target on non-final rounds).
        ess_now = ess(np.exp(log_weights - log_weights.max()))

        final_round = phi_next >= 1.0
        do_resample = ess_now <= config.target_ess and not (adaptive and final_round)
        if do_resample:
            w = _normalize_log_weights(log_weights)
            idx = _resample_indices(w, derived_rng(seed, _RESAMPLE, round_index), config.resampling)
            particles = particles[idx].copy()
            misfits = misfits[idx].copy()
            log_weights = np.zeros(m)

        if acc_prev is not None:
            rho = adapt_rho(rho, acc_prev)
        steps = adapt_steps(config.m_global, rho, config.step_bounds)
        scales = proposal_scales(Ensemble(particles, log_weights), rho)

        rngs = [derived_rng(seed, _MUTATE, round_index, p) for p in range(m)]
        mutated, acc_rate, misfits = mutate(
            Ensemble(particles, log_weights),
            misfits,
            phi_next,
            scales,
            steps,
            rngs,
            misfit_fn,
        )
        particles = mutated.particles
        acc_prev = acc_rate

        trace.rounds.append(
            RoundRecord(
                round_index=round_index,
                phi=phi_next,
                ess=ess_now,
                acc_rate=acc_rate,
                rho=rho,
                steps=steps,
                seconds=time.perf_counter() - tic,
                delta_phi_raw=delta_raw,
                max_misfit=max_misfit,
                min_inc_log_weight=float(incremental.min()),
                resampled=do_resample,
            )
        )
        phi = phi_next

    return Ensemble(particles, log_weights), trace


def weighted_mean(ensemble: Ensemble) -> np.ndarray:
    """Self-normalized weighted average of the coefficient vectors."""
    return ensemble.normalized_weights() @ ensemble.particles


def weighted_field_mean(ensemble: Ensemble, config: FieldConfig, points) -> np.ndarray:
    """Self-normalized weighted average of the evaluated fields."""
    fields = evaluate_field_batch(config, ensemble.particles, points)
    return ensemble.normalized_weights() @ fields
