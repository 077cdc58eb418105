"""Reduced-order model of the walking robot's center of mass.

The ROM state is the CoM position/velocity relative to the active stance
foot.  Its dynamics are linear in a learnable weight matrix applied to a
fixed feature vector: all monomials of degree <= 2 in (y, ydot) plus the
pendular terms g * y_h / y_v, so the classic constant-height inverted
pendulum is one exact point of the parameter space.
"""

from __future__ import annotations

from dataclasses import dataclass
from itertools import combinations_with_replacement

import numpy as np

GRAVITY = 9.81


class DegenerateHeightError(ValueError):
    """CoM height relative to the stance foot entered the guarded band."""


@dataclass(frozen=True)
class RomState:
    """CoM position and velocity relative to the stance foot, in meters."""

    y: np.ndarray
    ydot: np.ndarray

    def as_vector(self) -> np.ndarray:
        return np.concatenate([self.y, self.ydot])

    @staticmethod
    def from_vector(vec: np.ndarray) -> "RomState":
        vec = np.asarray(vec, dtype=float)
        d = vec.size // 2
        return RomState(y=vec[:d].copy(), ydot=vec[d:].copy())


@dataclass(frozen=True)
class FeatureBasis:
    """Deterministic feature layout for the ROM dynamics.

    ``monomial_exponents`` has one row per monomial (graded-lex order,
    constant first) over the stacked state (y, ydot).  The pendular terms
    y_h / y_v come last, one per horizontal CoM coordinate.
    """

    dim_y: int
    monomial_exponents: np.ndarray  # (n_mono, 2*dim_y) int
    lip_terms: tuple[tuple[int, int], ...]  # (numerator idx, denominator idx) into y
    z_min: float = 0.2

    @property
    def num_features(self) -> int:
        return self.monomial_exponents.shape[0] + len(self.lip_terms)

    @property
    def vertical_index(self) -> int:
        return self.dim_y - 1

    @property
    def num_params(self) -> int:
        return self.dim_y * self.num_features


def build_feature_basis(dim_y: int, z_min: float = 0.2) -> FeatureBasis:
    """All monomials of total degree <= 2 in (y, ydot), then the pendular terms.

    Supports dim_y = 2 (planar: horizontal, vertical) and dim_y = 3
    (spatial: two horizontal coordinates, vertical last).
    """
    if dim_y not in (2, 3):
        raise ValueError(f"dim_y must be 2 or 3, got {dim_y}")
    n_var = 2 * dim_y
    rows = [np.zeros(n_var, dtype=int)]
    for i in range(n_var):  # degree 1
        e = np.zeros(n_var, dtype=int)
        e[i] = 1
        rows.append(e)
    for i, j in combinations_with_replacement(range(n_var), 2):  # degree 2
        e = np.zeros(n_var, dtype=int)
        e[i] += 1
        e[j] += 1
        rows.append(e)
    vert = dim_y - 1
    lip = tuple((h, vert) for h in range(dim_y - 1))
    return FeatureBasis(
        dim_y=dim_y,
        monomial_exponents=np.array(rows, dtype=int),
        lip_terms=lip,
        z_min=z_min,
    )


def _check_height(basis: FeatureBasis, states: np.ndarray) -> None:
    yv = states[..., basis.vertical_index]
    if np.any(np.abs(yv) < basis.z_min):
        raise DegenerateHeightError(
            f"CoM height {float(np.min(np.abs(yv))):.4f} m below guard "
            f"{basis.z_min} m; pendular feature denominator is degenerate"
        )


def features_of(basis: FeatureBasis, states: np.ndarray) -> np.ndarray:
    """Feature matrix for a batch of stacked states (..., 2*dim_y)."""
    states = np.asarray(states, dtype=float)
    _check_height(basis, states)
    mono = np.prod(states[..., None, :] ** basis.monomial_exponents, axis=-1)
    cols = [mono]
    yv = states[..., basis.vertical_index]
    for h, v in basis.lip_terms:
        cols.append((states[..., h] / states[..., v])[..., None])
    del yv
    return np.concatenate(cols, axis=-1)


def feature_jacobian_of(basis: FeatureBasis, states: np.ndarray) -> np.ndarray:
    """d(features)/d(state) for a batch of stacked states: (..., n_feat, 2*dim_y)."""
    states = np.asarray(states, dtype=float)
    _check_height(basis, states)
    E = basis.monomial_exponents
    n_var = E.shape[1]
    batch = states.shape[:-1]
    out = np.zeros(batch + (basis.num_features, n_var))
    for j in range(n_var):
        Ej = E.copy()
        Ej[:, j] -= 1
        np.maximum(Ej, 0, out=Ej)  # exponent 0 columns get coefficient 0 anyway
        out[..., : E.shape[0], j] = E[:, j] * np.prod(
            states[..., None, :] ** Ej, axis=-1
        )
    for k, (h, v) in enumerate(basis.lip_terms):
        row = E.shape[0] + k
        out[..., row, h] = 1.0 / states[..., v]
        out[..., row, v] = -states[..., h] / states[..., v] ** 2
    return out


def eval_features(basis: FeatureBasis, s: RomState) -> np.ndarray:
    """Feature vector at a single ROM state."""
    return features_of(basis, s.as_vector())


@dataclass(frozen=True)
class RomParams:
    """Learnable ROM dynamics: yddot = theta @ features(y, ydot)."""

    theta: np.ndarray  # (dim_y, num_features)
    basis: FeatureBasis
    input_dim: int = 0  # the ROM has no input of its own

    def __post_init__(self):
        expected = (self.basis.dim_y, self.basis.num_features)
        if self.theta.shape != expected:
            raise ValueError(f"theta shape {self.theta.shape} != {expected}")
        if not np.all(np.isfinite(self.theta)):
            raise ValueError("theta contains non-finite entries")

    def flatten(self) -> np.ndarray:
        return self.theta.reshape(-1).copy()

    def with_flat(self, flat: np.ndarray) -> "RomParams":
        flat = np.asarray(flat, dtype=float)
        if flat.size != self.basis.num_params:
            raise ValueError(
                f"expected {self.basis.num_params} parameters, got {flat.size}"
            )
        theta = flat.reshape(self.basis.dim_y, self.basis.num_features)
        return RomParams(theta=theta.copy(), basis=self.basis, input_dim=self.input_dim)


def unflatten(flat: np.ndarray, basis: FeatureBasis) -> RomParams:
    return RomParams(
        theta=np.asarray(flat, dtype=float).reshape(basis.dim_y, basis.num_features),
        basis=basis,
    )


def rom_accel(params: RomParams, s: RomState) -> np.ndarray:
    """CoM acceleration predicted by the model at one state, m/s^2."""
    return params.theta @ features_of(params.basis, s.as_vector())


def accel_of(params: RomParams, states: np.ndarray) -> np.ndarray:
    """Batched model acceleration for stacked states (..., 2*dim_y)."""
    return features_of(params.basis, states) @ params.theta.T


def lip_init(g: float = GRAVITY, dim_y: int = 2, z_min: float = 0.2) -> RomParams:
    """Parameters reproducing the inverted-pendulum model exactly.

    Single nonzero weight g on the pendular feature of each horizontal
    acceleration row; the vertical row is zero (no vertical CoM
    acceleration).
    """
    if g <= 0:
        raise ValueError(f"gravity must be positive, got {g}")
    basis = build_feature_basis(dim_y, z_min=z_min)
    theta = np.zeros((basis.dim_y, basis.num_features))
    n_mono = basis.monomial_exponents.shape[0]
    for k, (h, _) in enumerate(basis.lip_terms):
        theta[h, n_mono + k] = g
    return RomParams(theta=theta, basis=basis)


def com_embedding(model, x, stance_foot: np.ndarray) -> RomState:
    """ROM state of the full robot: CoM relative to the stance foot.

    ``model`` and ``x`` are the planar biped description and full state
    from :mod:`romshaper.biped`.
    """
    from . import biped

    stance_foot = np.asarray(stance_foot, dtype=float)
    y = biped.com_position(model, x.q) - stance_foot
    ydot = biped.com_jacobian(model, x.q) @ x.v
    return RomState(y=y, ydot=ydot)
