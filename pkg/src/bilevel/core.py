"""Deterministic numerical primitives: steppers, box projection, seeded RNG.

Vectors are plain 1-D float64 numpy arrays (``RealVec``). Every operation
broadcasts over leading batch axes, so the same code path serves a single
vector of shape ``(d,)`` and a lockstep batch of shape ``(B, d)``.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import ContractViolationError, NumericError

# 1-D float64 array; batched call sites use (B, d) with identical semantics
# per row.
RealVec = np.ndarray

ADAM_BETA1 = 0.9
ADAM_BETA2 = 0.999
ADAM_EPS = 1e-8


def as_vec(x) -> RealVec:
    """Coerce to a float64 array, rejecting non-finite entries."""
    out = np.asarray(x, dtype=np.float64)
    if not np.all(np.isfinite(out)):
        raise NumericError("non-finite entries in vector")
    return out


@dataclass
class RngSeed:
    """64-bit seed; identical seeds give bit-identical streams."""

    seed: int

    def __post_init__(self):
        if not 0 <= int(self.seed) < 2**64:
            raise ContractViolationError("seed must fit in 64 unsigned bits")
        self.seed = int(self.seed)


def make_rng(*keys) -> np.random.Generator:
    """Deterministic generator from integer keys (splittable streams).

    Distinct key tuples give statistically independent streams; the same
    tuple always reproduces the same stream.
    """
    flat = [k.seed if isinstance(k, RngSeed) else int(k) for k in keys]
    return np.random.default_rng(np.random.SeedSequence(flat))


def derive_seed(*keys) -> int:
    """Stable 64-bit child seed from integer keys."""
    flat = [k.seed if isinstance(k, RngSeed) else int(k) for k in keys]
    return int(np.random.SeedSequence(flat).generate_state(1, np.uint64)[0])


def gaussian_matrix(rows: int, cols: int, seed) -> np.ndarray:
    """rows x cols matrix of i.i.d. standard normals, deterministic in seed."""
    if rows < 1 or cols < 1:
        raise ContractViolationError("gaussian_matrix needs rows, cols >= 1")
    return make_rng(seed, 0x6D61).standard_normal((rows, cols))


@dataclass(frozen=True)
class BoxBounds:
    """Uniform per-coordinate box [lo, hi]."""

    lo: float
    hi: float

    def __post_init__(self):
        if not self.lo < self.hi:
            raise ContractViolationError("box requires lo < hi")


def project_box(params: RealVec, box: BoxBounds) -> RealVec:
    """Coordinatewise clamp to the box. Idempotent."""
    return np.clip(params, box.lo, box.hi)


@dataclass
class StepperState:
    """State for one optimized variable (kind 'adam' or 'plain-gd').

    Moments match the parameter shape; ``step_count`` advances by exactly
    one per step. Plain-gd keeps the moments at zero.
    """

    kind: str
    m: np.ndarray
    s: np.ndarray
    step_count: int = 0
    beta1: float = ADAM_BETA1
    beta2: float = ADAM_BETA2
    eps_hat: float = ADAM_EPS


def make_stepper(kind: str, shape, beta1=ADAM_BETA1, beta2=ADAM_BETA2,
                 eps_hat=ADAM_EPS) -> StepperState:
    if kind not in ("adam", "plain-gd"):
        raise ContractViolationError(f"unknown stepper kind {kind!r}")
    zeros = np.zeros(shape, dtype=np.float64)
    return StepperState(kind, zeros, zeros.copy(), 0, beta1, beta2, eps_hat)


def _check_step_args(params, grad, lr):
    if params.shape != grad.shape:
        raise ContractViolationError(
            f"params shape {params.shape} != grad shape {grad.shape}")
    if not np.all(np.asarray(lr) > 0):
        raise ContractViolationError("lr must be positive")
    if not np.all(np.isfinite(grad)):
        raise NumericError("non-finite gradient passed to stepper")


def sgd_step(params: RealVec, grad: RealVec, lr: float) -> RealVec:
    """params - lr * grad."""
    _check_step_args(params, grad, lr)
    return params - lr * grad


def adam_step(state: StepperState, params: RealVec, grad: RealVec,
              lr: float) -> RealVec:
    """One Adam update with bias correction; advances ``state`` in place."""
    _check_step_args(params, grad, lr)
    if state.m.shape != params.shape:
        raise ContractViolationError(
            f"stepper state shape {state.m.shape} != params {params.shape}")
    state.step_count += 1
    t = state.step_count
    b1, b2 = state.beta1, state.beta2
    m, s = state.m, state.s
    m *= b1
    m += (1.0 - b1) * grad
    s *= b2
    s += (1.0 - b2) * grad * grad
    mhat = m / (1.0 - b1**t) if b1 != 0.0 else m
    shat = s / (1.0 - b2**t) if b2 != 0.0 else s
    return params - lr * mhat / (np.sqrt(shat) + state.eps_hat)


def stepper_step(state: StepperState, params: RealVec, grad: RealVec,
                 lr: float) -> RealVec:
    """Dispatch on state.kind; plain-gd still advances step_count."""
    if state.kind == "adam":
        return adam_step(state, params, grad, lr)
    _check_step_args(params, grad, lr)
    state.step_count += 1
    return params - lr * grad


@dataclass
class Stepper:
    """Convenience pairing of a state with its fixed learning rate."""

    state: StepperState
    lr: float

    def step(self, params, grad):
        return stepper_step(self.state, params, grad, self.lr)


def uniform_in_box(rng: np.random.Generator, dim: int,
                   box: BoxBounds) -> RealVec:
    return rng.uniform(box.lo, box.hi, size=dim)
