"""Spline-based hash head: B-spline bases, per-input learnable univariate
functions summed into code logits, tanh squashing, and straight-through
sign binarization."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import numerics
from .numerics import Tensor, _accumulate, _node, reshape, seeded_rng, tanh


def uniform_knots(grid_size: int = 8, degree: int = 3, grid_range: float = 2.0) -> np.ndarray:
    """Uniform knot vector over [-grid_range, grid_range], extended by
    `degree` knots on each side so the basis is a partition of unity on the
    whole domain."""
    if grid_size < 1 or degree < 0:
        raise ValueError(f"bad grid_size={grid_size} or degree={degree}")
    h = 2.0 * grid_range / grid_size
    idx = np.arange(-degree, grid_size + degree + 1, dtype=np.float64)
    return -grid_range + idx * h


def _check_knots(knots: np.ndarray, degree: int) -> None:
    knots = np.asarray(knots, dtype=np.float64)
    if knots.ndim != 1 or knots.size < degree + 2:
        raise ValueError(f"knot vector too short for degree {degree}: {knots.size} knots")
    if not np.all(np.diff(knots) > 0):
        raise ValueError("knot vector must be strictly increasing")


def bspline_basis(x, knots: np.ndarray, degree: int) -> np.ndarray:
    """Cox-de Boor basis values at x (scalar or array), clamped to the
    domain [knots[degree], knots[-degree-1]].

    Returns an array of shape x.shape + (num_basis,), num_basis =
    len(knots) - degree - 1. Values are non-negative and sum to 1 inside
    the domain.
    """
    values, _ = _basis_and_derivative(x, knots, degree, want_derivative=False)
    return values


def _basis_and_derivative(x, knots: np.ndarray, degree: int, want_derivative: bool = True):
    knots = np.asarray(knots, dtype=np.float64)
    _check_knots(knots, degree)
    xa = np.asarray(x, dtype=np.float64)
    scalar = xa.ndim == 0
    xf = np.atleast_1d(xa).reshape(-1)

    lo = knots[degree]
    hi = knots[-degree - 1]
    xf = np.clip(xf, lo, hi)

    n_int = knots.size - 1
    # Degree-0 seed: indicator of [t_j, t_{j+1}); the interval holding the
    # domain's right endpoint is closed so partition of unity survives at hi.
    b = ((xf[:, None] >= knots[None, :-1]) & (xf[:, None] < knots[None, 1:])).astype(np.float64)
    right = np.searchsorted(knots, hi, side="left") - 1
    b[xf == hi, :] = 0.0
    b[xf == hi, right] = 1.0

    prev = b
    for k in range(1, degree + 1):
        nb = n_int - k
        left_den = knots[k:k + nb] - knots[:nb]
        right_den = knots[k + 1:k + 1 + nb] - knots[1:1 + nb]
        left = (xf[:, None] - knots[None, :nb]) / left_den * prev[:, :nb]
        rightv = (knots[None, k + 1:k + 1 + nb] - xf[:, None]) / right_den * prev[:, 1:1 + nb]
        cur = left + rightv
        if k == degree and want_derivative:
            dleft = prev[:, :nb] / left_den
            dright = prev[:, 1:1 + nb] / right_den
            deriv = degree * (dleft - dright)
        prev = cur

    if degree == 0:
        deriv = np.zeros_like(prev)
    elif not want_derivative:
        deriv = None

    out_shape = xa.shape + (prev.shape[1],)
    values = prev.reshape(out_shape) if not scalar else prev.reshape(prev.shape[1])
    if deriv is None:
        return values, None
    dvals = deriv.reshape(out_shape) if not scalar else deriv.reshape(deriv.shape[1])
    return values, dvals


@dataclass
class KanLayer:
    """One spline layer mapping in_dim features to out_bits code logits.

    Each (output, input) edge carries a univariate function expressed in the
    B-spline basis; outputs sum the edge functions over inputs.
    """

    in_dim: int
    out_bits: int
    grid_size: int = 8
    degree: int = 3
    grid_range: float = 2.0
    knots: np.ndarray = field(init=False)
    coeffs: Tensor = field(init=False)

    def __post_init__(self):
        self.knots = uniform_knots(self.grid_size, self.degree, self.grid_range)
        nb = self.num_basis
        self.coeffs = Tensor(np.zeros((self.out_bits, self.in_dim, nb)), requires_grad=True)

    @property
    def num_basis(self) -> int:
        return self.grid_size + self.degree

    def init_params(self, seed: int, scale: float = 0.1) -> None:
        rng = seeded_rng(seed, 0x6B616E)  # stream tag "kan"
        self.coeffs.data[...] = rng.normal(0.0, scale, size=self.coeffs.shape)


def kan_forward(x: Tensor, layer: KanLayer) -> Tensor:
    """tanh( sum_i phi_i(x_i) ) per output bit; accepts [in_dim] or [N, in_dim].

    Differentiable in both the inputs and the spline coefficients; inputs
    outside the grid are clamped (zero input-gradient there).
    """
    single = x.data.ndim == 1
    xd = x.data.reshape(1, -1) if single else x.data
    if xd.shape[1] != layer.in_dim:
        raise ValueError(f"kan_forward: input dim {xd.shape[1]} != layer in_dim {layer.in_dim}")
    if not np.isfinite(xd).all():
        # NaN fails every knot comparison, so the basis row would silently
        # come out all-zero and hash to a finite code; refuse instead
        raise numerics.NumericError("non-finite input to spline hash head")
    tracked = numerics._grad_enabled and (x.requires_grad or layer.coeffs.requires_grad)
    basis, dbasis = _basis_and_derivative(xd, layer.knots, layer.degree,
                                          want_derivative=tracked and x.requires_grad)
    lo = layer.knots[layer.degree]
    hi = layer.knots[-layer.degree - 1]
    in_domain = (xd >= lo) & (xd <= hi)
    c = layer.coeffs
    pre = np.einsum("nib,oib->no", basis, c.data)

    def backward(g):
        if c.requires_grad:
            _accumulate(c, np.einsum("no,nib->oib", g, basis))
        if x.requires_grad:
            gx = np.einsum("no,oib,nib->ni", g, c.data, dbasis) * in_domain
            _accumulate(x, gx.reshape(x.data.shape))

    pre_t = _node(pre, (x, c), backward, "kan_spline")
    out = tanh(pre_t)
    if single:
        out = reshape(out, (layer.out_bits,))
    return out


@dataclass
class HashCode:
    """A q-bit code: the +-1 signs and the continuous tanh-squashed vector."""

    bits: int
    signs: np.ndarray
    continuous: np.ndarray

    def __post_init__(self):
        self.signs = np.asarray(self.signs, dtype=np.int8)
        self.continuous = np.asarray(self.continuous, dtype=np.float64)


def sign_with_tie(x: np.ndarray) -> np.ndarray:
    """Elementwise sign with sign(0) := +1, the global tie-break."""
    return np.where(np.asarray(x) >= 0.0, 1, -1).astype(np.int8)


def binarize_ste(continuous: Tensor) -> Tensor:
    """Forward: elementwise sign (sign(0)=+1). Backward: exact identity."""
    out = sign_with_tie(continuous.data).astype(np.float64)

    def backward(g):
        _accumulate(continuous, g)

    return _node(out, (continuous,), backward, "binarize_ste")


def make_hash_code(continuous: np.ndarray) -> HashCode:
    cont = np.asarray(continuous, dtype=np.float64)
    return HashCode(bits=cont.shape[-1], signs=sign_with_tie(cont), continuous=cont)
