"""Observer-model measurements of encoded sequences.

The observer reads one position's values in time order and, at step t,
predicts ``a^t`` from ``a^1 .. a^{t-1}``.  Its uncertainty is measured here
with a plug-in estimator pooled over all positions of a sequence: positions
sharing the same history prefix form a group, and H_t is the group-weighted
Shannon entropy (bits) of the next symbol.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .neuron import LifConfig

NEVER_FIRES = math.inf
DEFAULT_BINS = 16

# Closed-form dynamics duration is known for these schemes; "repeat" is
# the membrane-shortcut style coding that feeds the same frame every step.
DURATION_SCHEMES = ("direct", "gac", "rate", "repeat")

_TIE_TOL = 1e-9


def _membrane(x: float, n: int, cfg: LifConfig) -> float:
    # same recurrence and operation order as the neuron, before the first spike
    u = 0.0
    h = float(cfg.v_reset)
    for _ in range(n):
        u = h + x
        h = cfg.tau * u
    return u


def firing_period(x: float, cfg: LifConfig = LifConfig()):
    """First-spike time (= firing period) of a neuron driven by constant ``x``.

    ``ceil(log_tau(1 - v_th * (1 - tau) / x))``, or :data:`NEVER_FIRES` when
    ``x <= v_th * (1 - tau)``.  When the logarithm lands within 1e-9 of an
    integer the ceiling is settled by evaluating the membrane at that step,
    since a neuron reaching exactly ``v_th`` fires.
    """
    if cfg.v_reset != 0:
        raise ValueError("the closed-form period assumes a zero reset potential")
    x = float(x)
    if x <= cfg.v_th * (1.0 - cfg.tau):
        return NEVER_FIRES
    n = math.log(1.0 - cfg.v_th * (1.0 - cfg.tau) / x) / math.log(cfg.tau)
    k = round(n)
    if k >= 1 and abs(n - k) < _TIE_TOL:
        return k if _membrane(x, k, cfg) >= cfg.v_th else k + 1
    return max(1, math.ceil(n))


def firing_periods(x, cfg: LifConfig = LifConfig()) -> np.ndarray:
    """Elementwise :func:`firing_period`; never-firing entries are ``inf``."""
    x = np.asarray(x, dtype=np.float64)
    flat = np.array([firing_period(v, cfg) for v in x.ravel()], dtype=np.float64)
    return flat.reshape(x.shape)


def dynamics_duration(scheme: str, T: int, period=None) -> int:
    """Closed-form dynamics duration.

    direct: the firing period (clamped to T; a never-firing neuron counts as 1);
    gac: ``floor(T / T_d) * T_d``; rate: T; repeat: 1.
    """
    if T < 1:
        raise ValueError("T must be positive")
    if scheme == "rate":
        return T
    if scheme == "repeat":
        return 1
    if scheme not in ("direct", "gac"):
        raise ValueError(f"no closed-form dynamics duration for scheme {scheme!r}")
    if period is None:
        raise ValueError(f"{scheme} needs the direct-coding firing period")
    t_d = 1 if period == NEVER_FIRES else min(int(period), T)
    if scheme == "direct":
        return t_d
    return (T // t_d) * t_d


def duration_map(scheme: str, T: int, stem_values=None, cfg: LifConfig = LifConfig()):
    """Per-position durations and their maximum for a stem output tensor."""
    if scheme in ("rate", "repeat"):
        d = dynamics_duration(scheme, T)
        return None, d
    periods = firing_periods(stem_values, cfg)
    durations = np.vectorize(lambda p: dynamics_duration(scheme, T, p), otypes=[np.int64])(periods)
    return periods, int(durations.max()) if durations.size else 0


def quantize(data: np.ndarray, bins: int = DEFAULT_BINS, binary: bool | None = None) -> np.ndarray:
    """Integer symbols: binary data keeps its {0,1} values, real data gets uniform bins."""
    data = np.asarray(data, dtype=np.float64)
    if binary is None:
        binary = bool(np.all((data == 0) | (data == 1)))
    if binary:
        return data.astype(np.int64)
    lo, hi = float(data.min()), float(data.max())
    if hi == lo:
        return np.zeros(data.shape, dtype=np.int64)
    sym = np.floor((data - lo) / (hi - lo) * bins).astype(np.int64)
    return np.clip(sym, 0, bins - 1)


def _entropy_from_counts(joint_counts, group_of_pair, group_counts, total) -> float:
    # H = -sum_{g,s} n_gs/N * log2(n_gs / n_g)
    n_g = group_counts[group_of_pair]
    h = -np.sum(joint_counts * (np.log2(joint_counts) - np.log2(n_g))) / total
    return float(h) if h > 0 else 0.0  # also folds -0.0 into 0.0


def conditional_entropy_curve(symbols: np.ndarray) -> list[tuple[int, float]]:
    """H_t for t = 1..T from integer symbols shaped [T, positions]."""
    steps, npos = symbols.shape
    group = np.zeros(npos, dtype=np.int64)
    curve = []
    for t in range(steps):
        s = symbols[t]
        nsym = int(s.max()) + 1 if npos else 1
        key = group * nsym + s
        pairs, pair_idx, joint = np.unique(key, return_inverse=True, return_counts=True)
        pair_group = pairs // nsym
        group_counts = np.bincount(group)
        curve.append((t + 1, _entropy_from_counts(joint, pair_group, group_counts, npos)))
        group = pair_idx.ravel()  # compact ids for the extended prefix
    return curve


def empirical_entropy(seq, bins: int = DEFAULT_BINS) -> list[tuple[int, float]]:
    """Observer entropy curve ``[(t, H_t in bits), ...]`` of an encoded sequence.

    ``seq`` is an :class:`~spikecodec.coding.EncodedSequence` or an array
    [T, ...]; every non-time index is one observed position.
    """
    data = getattr(seq, "data", seq)
    data = np.asarray(data, dtype=np.float64)
    if data.ndim == 0 or data.shape[0] == 0 or data.size == 0:
        raise ValueError("empirical_entropy needs a non-empty [T, ...] sequence")
    binary = getattr(seq, "binary", None)
    symbols = quantize(data, bins, binary=binary).reshape(data.shape[0], -1)
    return conditional_entropy_curve(symbols)


def empirical_duration(curve, tol: float = 0.0) -> int:
    """Last step with entropy above ``tol`` (0 when the observer never learns anything)."""
    last = 0
    for t, h in curve:
        if h > tol:
            last = t
    return last


def firing_rate(spikes) -> float:
    """Spike count divided by (neuron count x T): the mean of a binary tensor."""
    spikes = np.asarray(spikes, dtype=np.float64)
    if spikes.size == 0:
        raise ValueError("firing_rate of an empty tensor")
    if not np.all((spikes == 0) | (spikes == 1)):
        raise ValueError("firing_rate expects a binary spike tensor")
    return float(np.count_nonzero(spikes)) / spikes.size


@dataclass
class DynamicsReport:
    scheme: str
    T: int
    dynamics_duration: int
    entropy_curve: list = field(default_factory=list)
    bins: int = DEFAULT_BINS
    period_map: np.ndarray | None = None
    empirical_duration: int | None = None

    def summary(self) -> dict:
        out = {"scheme": self.scheme, "T": self.T, "T_duration": self.dynamics_duration, "bins": self.bins}
        if self.empirical_duration is not None:
            out["T_empirical"] = self.empirical_duration
        return out

    def to_csv(self) -> str:
        lines = ["t,H_bits"] + [f"{t},{h:.12g}" for t, h in self.entropy_curve]
        return "\n".join(lines) + "\n"
