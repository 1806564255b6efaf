"""
Dictionary feature libraries with a pinned column order.

Polynomial: monomials by total degree ascending; within a degree, the
multisets of input indices in lexicographic order, so earlier inputs vary
slowest ([1, x0, x1, x0^2, x0*x1, x1^2] for two inputs and degree 2).
Fourier: for k = 1..n_frequencies, for each input i, sin(k*x_i) then
cos(k*x_i). Generalized: the member libraries concatenated in order.
"""

import itertools
from collections import Counter
from typing import Callable
import numpy as np
from l0_dynamics.exceptions import ShapeMismatchException
from l0_dynamics.my_types import (
    FeatureMap,
    FourierLibrarySpec,
    GeneralizedLibrarySpec,
    LibrarySpec,
    PolynomialLibrarySpec,
)

Column = Callable[[np.ndarray], np.ndarray]


def _monomial_name(combo: tuple[int, ...]) -> str:
    if not combo:
        return "1"
    powers = Counter(combo)
    return "*".join(
        f"x{i}" if e == 1 else f"x{i}^{e}" for i, e in sorted(powers.items())
    )


def _polynomial_combos(
    spec: PolynomialLibrarySpec, input_dim: int
) -> list[tuple[int, ...]]:
    combos: list[tuple[int, ...]] = [()] if spec.include_bias else []
    for degree in range(1, spec.degree + 1):
        if spec.include_interactions:
            combos.extend(
                itertools.combinations_with_replacement(range(input_dim), degree)
            )
        else:
            combos.extend((i,) * degree for i in range(input_dim))
    return combos


def _polynomial_terms(
    spec: PolynomialLibrarySpec, input_dim: int
) -> list[tuple[str, Column]]:
    return [
        (_monomial_name(combo), lambda X, c=list(combo): np.prod(X[:, c], axis=1))
        for combo in _polynomial_combos(spec, input_dim)
    ]


def _fourier_terms(
    spec: FourierLibrarySpec, input_dim: int
) -> list[tuple[str, Column]]:
    terms: list[tuple[str, Column]] = []
    for k in range(1, spec.n_frequencies + 1):
        for i in range(input_dim):
            if spec.include_sin:
                terms.append((f"sin({k}*x{i})", lambda X, k=k, i=i: np.sin(k * X[:, i])))
            if spec.include_cos:
                terms.append((f"cos({k}*x{i})", lambda X, k=k, i=i: np.cos(k * X[:, i])))
    return terms


def _terms(spec: LibrarySpec, input_dim: int) -> list[tuple[str, Column]]:
    match spec:
        case PolynomialLibrarySpec():
            return _polynomial_terms(spec, input_dim)
        case FourierLibrarySpec():
            return _fourier_terms(spec, input_dim)
        case GeneralizedLibrarySpec():
            return [
                term for member in spec.libraries for term in _terms(member, input_dim)
            ]
        case _:
            raise ValueError(f"Unknown library spec: {spec}")


def library_dim_and_names(spec: LibrarySpec, input_dim: int) -> FeatureMap:
    if input_dim < 1:
        raise ValueError(f"input_dim must be positive, got {input_dim}")
    names = [name for name, _ in _terms(spec, input_dim)]
    return FeatureMap(input_dim=input_dim, n_features=len(names), names=names)


def transform(
    spec: LibrarySpec, X: np.ndarray, input_dim: int | None = None
) -> np.ndarray:
    X = np.asarray(X, dtype=np.float64)
    if X.ndim != 2 or X.shape[1] == 0:
        raise ShapeMismatchException("(batch, input_dim)", X.shape, "library input")
    if input_dim is not None and X.shape[1] != input_dim:
        raise ShapeMismatchException(f"(batch, {input_dim})", X.shape, "library input")
    terms = _terms(spec, X.shape[1])
    if not terms:
        return np.empty((X.shape[0], 0))
    return np.column_stack([column(X) for _, column in terms])
