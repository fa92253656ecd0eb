"""Seeded synthetic data sets used by the CLI and the test-suite."""

from dataclasses import dataclass

import numpy as np

from .errors import InvalidArgumentError


def _rng(seed):
    if seed is None:
        raise InvalidArgumentError("a seed is required so that simulations are reproducible")
    return np.random.default_rng(int(seed))


def doppler_truth(x):
    return np.sin(4.0 / np.asarray(x, dtype=float)) + 1.5


def simulate_doppler(seed, n=1000, noise_sd=0.2):
    """``y = sin(4 / x) + 1.5 + e`` with ``x ~ U[0, 1]`` and ``e ~ N(0, noise_sd^2)``."""
    if n < 10:
        raise InvalidArgumentError("n must be at least 10")
    rng = _rng(seed)
    x = rng.uniform(0.0, 1.0, n)
    y = doppler_truth(x) + rng.normal(0.0, noise_sd, n)
    return x, y


@dataclass(frozen=True)
class PeaksTruth:
    centers: tuple
    heights: tuple
    width: float

    def intensity(self, x):
        x = np.asarray(x, dtype=float)
        base = 40.0 * np.exp(-1.2 * x) + 15.0 * x
        peaks = sum(h * np.exp(-0.5 * ((x - c) / self.width) ** 2)
                    for c, h in zip(self.centers, self.heights))
        return base + peaks


DEFAULT_PEAKS = PeaksTruth(centers=(0.18, 0.41, 0.63, 0.86), heights=(260.0, 140.0, 320.0, 90.0),
                           width=0.008)


def simulate_poisson_peaks(seed, n=2000, truth=DEFAULT_PEAKS):
    """Counts on an equally spaced grid: smooth baseline plus narrow Gaussian peaks."""
    if n < 10:
        raise InvalidArgumentError("n must be at least 10")
    rng = _rng(seed)
    x = np.linspace(0.0, 1.0, n)
    y = rng.poisson(truth.intensity(x)).astype(float)
    return x, y, truth


def population_truth(t):
    t = np.asarray(t, dtype=float)
    return np.sin(2.0 * np.pi * t) + 0.5 * t


def simulate_hierarchical(seed, subjects=30, points=50, noise_sd=0.1, groups=False):
    """Balanced panel: population curve + smooth subject deviations + noise.

    Returns
    -------
    t : (s,) array
    Y : (s, m) array
    labels : (m,) int array or None
        With ``groups=True`` the first half are controls (0) and cases (1) add
        a smooth shift to the population curve.
    """
    if subjects < 2:
        raise InvalidArgumentError("at least two subjects are needed (m > 1)")
    if points < 5:
        raise InvalidArgumentError("at least five time points are needed")
    rng = _rng(seed)
    t = np.linspace(0.0, 1.0, points)
    Y = np.empty((points, subjects))
    labels = None
    if groups:
        labels = (np.arange(subjects) >= subjects // 2).astype(int)
    for j in range(subjects):
        a, b, c = rng.normal(0.0, [0.3, 0.3, 0.2])
        phase = rng.uniform(0, 2 * np.pi)
        dev = a + b * (t - 0.5) + c * np.sin(np.pi * t + phase)
        f = population_truth(t)
        if labels is not None and labels[j] == 1:
            f = f - 0.4 * np.cos(np.pi * t)
        Y[:, j] = f + dev + rng.normal(0.0, noise_sd, points)
    return t, Y, labels
