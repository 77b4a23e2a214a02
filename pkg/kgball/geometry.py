"""Poincaré-ball geometry kernel.

Every operation works on float64 arrays whose last axis holds coordinates, so a
single call handles one point or a whole batch. Each differentiable operation
has a matching ``*_vjp`` function that maps an upstream gradient to gradients
of the inputs (vector-Jacobian product). Losses in :mod:`kgball.model` are
compositions of these pieces.

Conventions, for curvature ``c > 0``:

- distance: ``d(x, y) = 2/sqrt(c) * atanh(sqrt(c) * ||(-x) (+) y||)``
- Möbius addition: ``x (+) y = ((1 + 2c<x,y> + c|y|^2) x + (1 - c|x|^2) y)
  / (1 + 2c<x,y> + c^2 |x|^2 |y|^2)``
- Klein transforms: ``k = 2x / (1 + c|x|^2)`` and ``x = k / (1 + sqrt(1 - c|k|^2))``
"""

from __future__ import annotations

import logging
import threading
from abc import ABC, abstractmethod
from types import TracebackType

import numpy as np
from numpy.typing import ArrayLike

from .domain import InvalidInput

_logger = logging.getLogger(__name__)

EPS_BALL = 1e-5
EPS_ATANH = 1e-15

_local = threading.local()


class ClampCounter:
    """Counts clamping events raised inside the ``with`` block on this thread.

    >>> with ClampCounter() as clamps:
    ...     poincare_distance(x, y, 1.0)
    >>> clamps.atanh
    """

    def __init__(self) -> None:
        self.atanh = 0
        self.lorentz = 0

    def __enter__(self) -> ClampCounter:
        _active_counters().append(self)
        return self

    def __exit__(
        self,
        exc_type: type[BaseException] | None,
        exc: BaseException | None,
        tb: TracebackType | None,
    ) -> None:
        _active_counters().remove(self)

    @property
    def total(self) -> int:
        return self.atanh + self.lorentz


def _active_counters() -> list[ClampCounter]:
    if not hasattr(_local, "counters"):
        _local.counters = []
    return _local.counters


def _record(kind: str, count: int) -> None:
    if count:
        for counter in _active_counters():
            setattr(counter, kind, getattr(counter, kind) + count)


def _as_points(x: ArrayLike, name: str = "x") -> np.ndarray:
    arr = np.asarray(x, dtype=np.float64)
    if not np.all(np.isfinite(arr)):
        raise InvalidInput(f"{name} has non-finite coordinates")
    return arr


def _sq(x: np.ndarray) -> np.ndarray:
    return np.sum(x * x, axis=-1, keepdims=True)


def _dot(x: np.ndarray, y: np.ndarray) -> np.ndarray:
    return np.sum(x * y, axis=-1, keepdims=True)


def max_norm(c: float) -> float:
    """Largest norm a projected point may have."""
    return (1.0 - EPS_BALL) / np.sqrt(c)


# --- projection -------------------------------------------------------------


def project_to_ball(x: ArrayLike, c: float) -> np.ndarray:
    """Rescale points with ``c|x|^2 >= (1 - eps)^2`` onto the radius ``(1 - eps)/sqrt(c)``."""
    x = np.asarray(x, dtype=np.float64)
    norm = np.sqrt(_sq(x))
    limit = max_norm(c)
    outside = norm >= limit
    if not np.any(outside):
        return x
    return np.where(outside, x * (limit / np.maximum(norm, limit)), x)


def project_to_ball_vjp(x: np.ndarray, c: float, grad: np.ndarray) -> np.ndarray:
    norm = np.sqrt(_sq(x))
    limit = max_norm(c)
    outside = norm >= limit
    if not np.any(outside):
        return grad
    safe = np.maximum(norm, limit)
    unit = x / safe
    radial = (limit / safe) * (grad - unit * _dot(unit, grad))
    return np.where(outside, radial, grad)


# --- Möbius addition --------------------------------------------------------


def _mobius_parts(
    x: np.ndarray, y: np.ndarray, c: float
) -> tuple[np.ndarray, np.ndarray, np.ndarray, np.ndarray, np.ndarray, np.ndarray]:
    xy = _dot(x, y)
    xx = _sq(x)
    yy = _sq(y)
    a = 1.0 + 2.0 * c * xy + c * yy
    b = 1.0 - c * xx
    den = 1.0 + 2.0 * c * xy + c * c * xx * yy
    return xy, xx, yy, a, b, den


def _mobius_raw(x: np.ndarray, y: np.ndarray, c: float) -> np.ndarray:
    _, _, _, a, b, den = _mobius_parts(x, y, c)
    return (a * x + b * y) / den


def mobius_add(x: ArrayLike, y: ArrayLike, c: float) -> np.ndarray:
    """Möbius addition ``x (+)_c y``, projected back inside the ball."""
    x = _as_points(x, "x")
    y = _as_points(y, "y")
    return project_to_ball(_mobius_raw(x, y, c), c)


def _mobius_raw_vjp(
    x: np.ndarray, y: np.ndarray, c: float, g: np.ndarray
) -> tuple[np.ndarray, np.ndarray]:
    xy, xx, yy, a, b, den = _mobius_parts(x, y, c)
    z = (a * x + b * y) / den
    g_num = g / den
    g_den = -_dot(g, z) / den
    gx_num = a * g_num + 2.0 * c * _dot(g_num, x) * y - 2.0 * c * _dot(g_num, y) * x
    gy_num = b * g_num + 2.0 * c * _dot(g_num, x) * (x + y)
    gx = gx_num + g_den * (2.0 * c * y + 2.0 * c * c * yy * x)
    gy = gy_num + g_den * (2.0 * c * x + 2.0 * c * c * xx * y)
    return gx, gy


def mobius_add_vjp(
    x: np.ndarray, y: np.ndarray, c: float, grad: np.ndarray
) -> tuple[np.ndarray, np.ndarray]:
    g = project_to_ball_vjp(_mobius_raw(x, y, c), c, grad)
    return _mobius_raw_vjp(x, y, c, g)


# --- distance ---------------------------------------------------------------


def _atanh_arg(w: np.ndarray, c: float) -> tuple[np.ndarray, np.ndarray]:
    s = np.sqrt(c) * np.sqrt(_sq(w))[..., 0]
    clamped = s > 1.0 - EPS_ATANH
    _record("atanh", int(np.count_nonzero(clamped)))
    return np.minimum(s, 1.0 - EPS_ATANH), clamped


def poincare_distance(x: ArrayLike, y: ArrayLike, c: float) -> np.ndarray:
    """Geodesic distance; returns an array over the leading axes (a float for single points)."""
    x = _as_points(x, "x")
    y = _as_points(y, "y")
    w = _mobius_raw(-x, y, c)
    s, _ = _atanh_arg(w, c)
    return 2.0 / np.sqrt(c) * np.arctanh(s)


def poincare_distance_vjp(
    x: np.ndarray, y: np.ndarray, c: float, grad: np.ndarray
) -> tuple[np.ndarray, np.ndarray]:
    w = _mobius_raw(-x, y, c)
    s, clamped = _atanh_arg(w, c)
    norm = np.sqrt(_sq(w))
    scale = np.where(clamped, 0.0, np.asarray(grad) * 2.0 / (1.0 - s * s))[..., None]
    g_w = scale * np.divide(w, norm, out=np.zeros_like(w), where=norm > 0)
    g_negx, g_y = _mobius_raw_vjp(-x, y, c, g_w)
    return -g_negx, g_y


def pairwise_distance(xs: ArrayLike, ys: ArrayLike, c: float) -> np.ndarray:
    """All distances between rows of ``xs`` (n, d) and ``ys`` (m, d) as an (n, m) matrix.

    Uses ``|(-x) (+) y|^2 = |x - y|^2 / (1 - 2c<x,y> + c^2 |x|^2 |y|^2)``.
    """
    xs = _as_points(xs, "xs")
    ys = _as_points(ys, "ys")
    xy = xs @ ys.T
    xx = np.sum(xs * xs, axis=1)[:, None]
    yy = np.sum(ys * ys, axis=1)[None, :]
    diff = np.maximum(xx + yy - 2.0 * xy, 0.0)
    den = 1.0 - 2.0 * c * xy + c * c * xx * yy
    s = np.sqrt(c * diff / den)
    clamped = s > 1.0 - EPS_ATANH
    _record("atanh", int(np.count_nonzero(clamped)))
    s = np.minimum(s, 1.0 - EPS_ATANH)
    return 2.0 / np.sqrt(c) * np.arctanh(s)


# --- Klein model ------------------------------------------------------------


def ball_to_klein(x: ArrayLike, c: float) -> np.ndarray:
    x = _as_points(x, "x")
    return 2.0 * x / (1.0 + c * _sq(x))


def ball_to_klein_vjp(x: np.ndarray, c: float, grad: np.ndarray) -> np.ndarray:
    q = 1.0 + c * _sq(x)
    return 2.0 * grad / q - 4.0 * c * _dot(grad, x) * x / (q * q)


def klein_to_ball(k: ArrayLike, c: float) -> np.ndarray:
    k = _as_points(k, "k")
    s = np.sqrt(np.maximum(1.0 - c * _sq(k), 0.0))
    return k / (1.0 + s)


def klein_to_ball_vjp(k: np.ndarray, c: float, grad: np.ndarray) -> np.ndarray:
    s = np.sqrt(np.maximum(1.0 - c * _sq(k), EPS_BALL))
    return grad / (1.0 + s) + c * _dot(grad, k) * k / (s * (1.0 + s) ** 2)


def lorentz_factor(k: ArrayLike, c: float) -> np.ndarray:
    """``1 / sqrt(1 - c|k|^2)`` with the denominator clamped at ``EPS_BALL``."""
    k = _as_points(k, "k")
    return _lorentz(k, c)[0][..., 0]


def _lorentz(k: np.ndarray, c: float) -> tuple[np.ndarray, np.ndarray]:
    inner = 1.0 - c * _sq(k)
    clamped = inner < EPS_BALL
    _record("lorentz", int(np.count_nonzero(clamped)))
    return 1.0 / np.sqrt(np.maximum(inner, EPS_BALL)), clamped


# --- Einstein midpoint ------------------------------------------------------


def _check_weights(points: np.ndarray, weights: np.ndarray) -> None:
    if points.ndim < 2 or points.shape[-2] == 0:
        raise InvalidInput("einstein_midpoint needs at least one point")
    if weights.shape != points.shape[:-1]:
        raise InvalidInput(f"weights shape {weights.shape} does not match points {points.shape}")
    if not np.all(np.isfinite(weights)) or np.any(weights < 0):
        raise InvalidInput("weights must be finite and nonnegative")
    if np.any(np.sum(weights, axis=-1) <= 0):
        raise InvalidInput("weights must not be all zero")


def _midpoint_forward(
    points: np.ndarray, weights: np.ndarray, c: float
) -> tuple[np.ndarray, np.ndarray, np.ndarray, np.ndarray, np.ndarray, np.ndarray]:
    k = ball_to_klein(points, c)
    gamma, clamped = _lorentz(k, c)
    a = weights[..., None] * gamma
    total = np.sum(a, axis=-2)
    m = np.sum(a * k, axis=-2) / total
    return k, gamma, clamped, a, total, m


def einstein_midpoint(points: ArrayLike, weights: ArrayLike, c: float) -> np.ndarray:
    """Weighted Einstein midpoint of ``points`` (..., n, d) with ``weights`` (..., n).

    Points move to Klein coordinates, are averaged with weights ``w_i * gamma_i``
    and mapped back to the ball.
    """
    points = _as_points(points, "points")
    weights = np.asarray(weights, dtype=np.float64)
    _check_weights(points, weights)
    m = _midpoint_forward(points, weights, c)[-1]
    return project_to_ball(klein_to_ball(m, c), c)


def einstein_midpoint_vjp(
    points: np.ndarray, weights: np.ndarray, c: float, grad: np.ndarray
) -> tuple[np.ndarray, np.ndarray]:
    k, gamma, clamped, a, total, m = _midpoint_forward(points, weights, c)
    g = project_to_ball_vjp(klein_to_ball(m, c), c, grad)
    g_m = klein_to_ball_vjp(m, c, g)
    g_k = a * g_m[..., None, :] / total[..., None, :]
    g_a = np.sum(g_m[..., None, :] * (k - m[..., None, :]), axis=-1, keepdims=True)
    g_a = g_a / total[..., None, :]
    g_w = (g_a * gamma)[..., 0]
    g_gamma = g_a * weights[..., None]
    g_k = g_k + np.where(clamped, 0.0, g_gamma * c * gamma**3) * k
    return ball_to_klein_vjp(points, c, g_k), g_w


# --- Riemannian gradient ----------------------------------------------------


def riemannian_rescale(x: ArrayLike, euclidean_grad: ArrayLike, c: float) -> np.ndarray:
    """Scale a Euclidean gradient by the inverse metric ``((1 - c|x|^2)^2 / 4)``."""
    x = np.asarray(x, dtype=np.float64)
    return ((1.0 - c * _sq(x)) ** 2 / 4.0) * np.asarray(euclidean_grad, dtype=np.float64)


# --- spaces -----------------------------------------------------------------


class Space(ABC):
    """The geometry a model measures distances and aggregates neighbours in."""

    name: str

    @abstractmethod
    def add(self, x: np.ndarray, y: np.ndarray) -> np.ndarray: ...

    @abstractmethod
    def add_vjp(
        self, x: np.ndarray, y: np.ndarray, grad: np.ndarray
    ) -> tuple[np.ndarray, np.ndarray]: ...

    @abstractmethod
    def distance(self, x: np.ndarray, y: np.ndarray) -> np.ndarray: ...

    @abstractmethod
    def distance_vjp(
        self, x: np.ndarray, y: np.ndarray, grad: np.ndarray
    ) -> tuple[np.ndarray, np.ndarray]: ...

    @abstractmethod
    def midpoint(self, points: np.ndarray, weights: np.ndarray) -> np.ndarray: ...

    @abstractmethod
    def midpoint_vjp(
        self, points: np.ndarray, weights: np.ndarray, grad: np.ndarray
    ) -> tuple[np.ndarray, np.ndarray]: ...

    @abstractmethod
    def midpoint_weights(self, points: np.ndarray, weights: np.ndarray) -> np.ndarray:
        """Effective normalized weight of each point inside :meth:`midpoint`."""

    @abstractmethod
    def pairwise_distance(self, xs: np.ndarray, ys: np.ndarray) -> np.ndarray: ...

    @abstractmethod
    def project(self, x: np.ndarray) -> np.ndarray: ...

    @abstractmethod
    def rescale(self, x: np.ndarray, grad: np.ndarray) -> np.ndarray: ...


class PoincareBall(Space):
    name = "hyperbolic"

    def __init__(self, c: float = 1.0):
        if c <= 0:
            raise InvalidInput(f"curvature must be positive, got {c}")
        self.c = float(c)

    def add(self, x: np.ndarray, y: np.ndarray) -> np.ndarray:
        return mobius_add(x, y, self.c)

    def add_vjp(
        self, x: np.ndarray, y: np.ndarray, grad: np.ndarray
    ) -> tuple[np.ndarray, np.ndarray]:
        return mobius_add_vjp(x, y, self.c, grad)

    def distance(self, x: np.ndarray, y: np.ndarray) -> np.ndarray:
        return poincare_distance(x, y, self.c)

    def distance_vjp(
        self, x: np.ndarray, y: np.ndarray, grad: np.ndarray
    ) -> tuple[np.ndarray, np.ndarray]:
        return poincare_distance_vjp(x, y, self.c, grad)

    def midpoint(self, points: np.ndarray, weights: np.ndarray) -> np.ndarray:
        return einstein_midpoint(points, weights, self.c)

    def midpoint_vjp(
        self, points: np.ndarray, weights: np.ndarray, grad: np.ndarray
    ) -> tuple[np.ndarray, np.ndarray]:
        return einstein_midpoint_vjp(points, weights, self.c, grad)

    def midpoint_weights(self, points: np.ndarray, weights: np.ndarray) -> np.ndarray:
        a = np.asarray(weights) * lorentz_factor(ball_to_klein(points, self.c), self.c)
        return a / np.sum(a, axis=-1, keepdims=True)

    def pairwise_distance(self, xs: np.ndarray, ys: np.ndarray) -> np.ndarray:
        return pairwise_distance(xs, ys, self.c)

    def project(self, x: np.ndarray) -> np.ndarray:
        return project_to_ball(x, self.c)

    def rescale(self, x: np.ndarray, grad: np.ndarray) -> np.ndarray:
        return riemannian_rescale(x, grad, self.c)


class EuclideanSpace(Space):
    """Flat counterpart used by the ablation modes: ``+``, ``|x - y|`` and a weighted mean."""

    name = "euclidean"

    def add(self, x: np.ndarray, y: np.ndarray) -> np.ndarray:
        return _as_points(x, "x") + _as_points(y, "y")

    def add_vjp(
        self, x: np.ndarray, y: np.ndarray, grad: np.ndarray
    ) -> tuple[np.ndarray, np.ndarray]:
        return grad, grad

    def distance(self, x: np.ndarray, y: np.ndarray) -> np.ndarray:
        diff = _as_points(x, "x") - _as_points(y, "y")
        return np.sqrt(np.sum(diff * diff, axis=-1))

    def distance_vjp(
        self, x: np.ndarray, y: np.ndarray, grad: np.ndarray
    ) -> tuple[np.ndarray, np.ndarray]:
        diff = x - y
        norm = np.sqrt(_sq(diff))
        unit = np.divide(diff, norm, out=np.zeros_like(diff), where=norm > 0)
        g = np.asarray(grad)[..., None] * unit
        return g, -g

    def midpoint(self, points: np.ndarray, weights: np.ndarray) -> np.ndarray:
        points = _as_points(points, "points")
        weights = np.asarray(weights, dtype=np.float64)
        _check_weights(points, weights)
        w = weights[..., None]
        return np.sum(w * points, axis=-2) / np.sum(w, axis=-2)

    def midpoint_vjp(
        self, points: np.ndarray, weights: np.ndarray, grad: np.ndarray
    ) -> tuple[np.ndarray, np.ndarray]:
        w = weights[..., None]
        total = np.sum(w, axis=-2)
        m = np.sum(w * points, axis=-2) / total
        g_points = w * (grad / total)[..., None, :]
        g_w = np.sum(grad[..., None, :] * (points - m[..., None, :]), axis=-1) / total
        return g_points, g_w

    def midpoint_weights(self, points: np.ndarray, weights: np.ndarray) -> np.ndarray:
        w = np.asarray(weights, dtype=np.float64)
        return w / np.sum(w, axis=-1, keepdims=True)

    def pairwise_distance(self, xs: np.ndarray, ys: np.ndarray) -> np.ndarray:
        xs = _as_points(xs, "xs")
        ys = _as_points(ys, "ys")
        xx = np.sum(xs * xs, axis=1)[:, None]
        yy = np.sum(ys * ys, axis=1)[None, :]
        return np.sqrt(np.maximum(xx + yy - 2.0 * (xs @ ys.T), 0.0))

    def project(self, x: np.ndarray) -> np.ndarray:
        return np.asarray(x, dtype=np.float64)

    def rescale(self, x: np.ndarray, grad: np.ndarray) -> np.ndarray:
        return np.asarray(grad, dtype=np.float64)


def make_space(name: str, c: float) -> Space:
    if name == "hyperbolic":
        return PoincareBall(c)
    if name == "euclidean":
        return EuclideanSpace()
    raise InvalidInput(f"Unknown space: {name}")
