"""Composition of the grid-strength evaluation and the smooth regression:
the map from uncertain source reactances to fitted constraint coefficients.

Hyperparameters (band width, Gaussian scale, big-M) are resolved once on the
nominal labels and then held fixed, so the map is a pure function of the
reactances.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .network import GridModel, batch_gscr_labels
from .regression import CoefficientFit, Dataset, SmoothRegressionConfig, fit_smooth


@dataclass(frozen=True)
class CoefficientMap:
    grid: GridModel                  # carries the nominal reactances
    flags: np.ndarray                # (S, n_src)
    wind: np.ndarray                 # (S,)
    X: np.ndarray                    # (S, k) fixed design matrix
    config: SmoothRegressionConfig   # fully resolved
    param_index: tuple[int, ...]     # uncertain sources within grid.sources
    param_names: tuple[str, ...]

    @classmethod
    def from_dataset(cls, grid: GridModel, dataset: Dataset,
                     config: SmoothRegressionConfig,
                     uncertain=None) -> "CoefficientMap":
        names = grid.source_names
        if uncertain is None:
            idx = tuple(range(len(names)))
        else:
            idx = tuple(names.index(n) for n in uncertain)
        return cls(grid=grid, flags=dataset.flags, wind=dataset.wind, X=dataset.X,
                   config=config.resolve(dataset.g), param_index=idx,
                   param_names=tuple(names[i] for i in idx))

    @property
    def n_params(self) -> int:
        return len(self.param_index)

    @property
    def nominal(self) -> np.ndarray:
        """Nominal reactances of the uncertain sources."""
        return self.grid.source_reactances()[list(self.param_index)]

    def reactances(self, p) -> np.ndarray:
        full = self.grid.source_reactances()
        full[list(self.param_index)] = np.asarray(p, dtype=float)
        return full

    def labels(self, p=None) -> np.ndarray:
        react = self.reactances(p) if p is not None else None
        return batch_gscr_labels(self.grid, self.flags, self.wind, react)

    def fit_labels(self, g) -> CoefficientFit:
        return fit_smooth(self.X, g, self.config)

    def fit(self, p=None) -> CoefficientFit:
        return self.fit_labels(self.labels(p))

    def coefficients(self, p=None) -> np.ndarray:
        return self.fit(p).coefficients
