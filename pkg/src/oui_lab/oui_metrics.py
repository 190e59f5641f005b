"""Batch-based OUI on a fixed probe batch, plus flip statistics between masks."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from oui_lab import kernels
from oui_lab.nn_core import ConfigurationError, Network, forward


@dataclass
class ActivationMask:
    """Strict-positivity bits of every hidden layer, one ``B x d_l`` bool array each."""

    layers: list[np.ndarray]

    @property
    def batch_size(self) -> int:
        return self.layers[0].shape[0]

    @property
    def layer_sizes(self) -> list[int]:
        return [m.shape[1] for m in self.layers]

    def column_counts(self) -> list[np.ndarray]:
        return [kernels.column_counts(m) for m in self.layers]


@dataclass
class OuiReport:
    per_layer: list[float]
    branch_mean: float
    s_counts: list[np.ndarray]
    p_fractions: list[np.ndarray]


def _probe_array(probe) -> np.ndarray:
    return probe.observations if hasattr(probe, "observations") else np.asarray(probe, dtype=np.float64)


def compute_mask(net: Network, probe) -> ActivationMask:
    trace = forward(net, _probe_array(probe))
    return ActivationMask([a > 0.0 for a in trace.preactivations])


def oui_from_counts(s: np.ndarray, batch_size: int) -> float:
    if batch_size < 2:
        raise ConfigurationError("OUI needs a probe batch of at least 2 samples")
    s = np.asarray(s, dtype=np.int64)
    return float(np.minimum(s, batch_size - s).sum() / (batch_size // 2) / s.shape[0])


def _check_layer(m: np.ndarray) -> None:
    if m.ndim < 2 or m.shape[-1] < 1 or m.shape[-2] < 2:
        raise ConfigurationError("mask layer must be a B x d matrix (or a stack of them) with B >= 2, d >= 1")


def oui_layer(mask_layer):
    """Count-form OUI of one ``B x d`` mask; a stack ``(..., B, d)`` gives an array of values."""
    m = np.asarray(mask_layer)
    _check_layer(m)
    if m.ndim == 2:
        return oui_from_counts(kernels.column_counts(m.astype(bool, copy=False)), m.shape[0])
    b = m.shape[-2]
    s = np.count_nonzero(m, axis=-2)
    return np.minimum(s, b - s).sum(axis=-1) / (b // 2) / m.shape[-1]


def oui_balance_form(mask_layer):
    """Mean of 1 - 2 |p_j - 1/2|; equals :func:`oui_layer` for even B and (B-1)/B times it for odd B."""
    m = np.asarray(mask_layer, dtype=bool)
    _check_layer(m)
    p = np.count_nonzero(m, axis=-2) / m.shape[-2]
    out = np.mean(1.0 - 2.0 * np.abs(p - 0.5), axis=-1)
    return float(out) if m.ndim == 2 else out


def oui_report(mask: ActivationMask) -> OuiReport:
    b = mask.batch_size
    counts = mask.column_counts()
    per_layer = [oui_from_counts(s, b) for s in counts]
    return OuiReport(per_layer, float(np.mean(per_layer)), counts, [s / b for s in counts])


def oui_branch(net: Network, probe) -> OuiReport:
    return oui_report(compute_mask(net, probe))


def _check_same_shape(prev: ActivationMask, curr: ActivationMask):
    if len(prev.layers) != len(curr.layers) or any(
        a.shape != b.shape for a, b in zip(prev.layers, curr.layers)
    ):
        raise ValueError("activation masks have different shapes")


def flip_count(prev: ActivationMask, curr: ActivationMask) -> tuple[int, int]:
    """(differing bits, total bits) over all hidden layers."""
    _check_same_shape(prev, curr)
    changed = total = 0
    for a, b in zip(prev.layers, curr.layers):
        n_mp, n_pm = kernels.transition_counts(a, b)
        changed += int(n_mp.sum() + n_pm.sum())
        total += a.size
    return changed, total


def flip_fraction(prev: ActivationMask, curr: ActivationMask) -> float:
    """Hamming fraction of (sample, unit) bits that differ, pooled over layers."""
    changed, total = flip_count(prev, curr)
    return changed / total


def unit_flip_fraction(prev: ActivationMask, curr: ActivationMask) -> float:
    """Fraction of units with at least one changed bit on the probe."""
    _check_same_shape(prev, curr)
    changed = total = 0
    for a, b in zip(prev.layers, curr.layers):
        n_mp, n_pm = kernels.transition_counts(a, b)
        changed += int(np.count_nonzero(n_mp + n_pm))
        total += a.shape[1]
    return changed / total


def pooled_flip(pairs) -> tuple[float, float]:
    """Hamming and unit-level flip fractions pooled over several (prev, curr) mask pairs."""
    bits = bit_total = units = unit_total = 0
    for prev, curr in pairs:
        _check_same_shape(prev, curr)
        for a, b in zip(prev.layers, curr.layers):
            n_mp, n_pm = kernels.transition_counts(a, b)
            per_unit = n_mp + n_pm
            bits += int(per_unit.sum())
            bit_total += a.size
            units += int(np.count_nonzero(per_unit))
            unit_total += a.shape[1]
    return bits / bit_total, units / unit_total
