"""Confidence-gated adaptive timesteps for converted nets.

At each step the cumulative score vector (accumulated head membrane divided
by t) is turned into a confidence

    c = 1 - H(softmax(scores)) / ln(classes)

and the input exits at the first step where c clears a boundary. Boundaries
come from calibration-set entropy statistics:

    alpha_t = alpha_base + beta * exp(-(Ebar_t - Ebar_min) / delta)

so steps whose mean entropy is near the minimum demand the most confidence,
and the gate relaxes as entropy climbs away from it. ``beta = 0`` collapses to
a fixed boundary. Exits only stop accounting (spikes, energy, latency); they
never change the dynamics, so the runtime simulates the full horizon once and
applies the gate per input afterwards.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .engine import LayerSnnConfig, RunStats, layer_fanout, run_snn, spiking_layer_indices
from .nn import ModelGraph, softmax
from .store import CalibrationCache

_EPS = 1e-12

# Default tuning grid for the boundary schedule, swept when no explicit
# (alpha_base, beta, delta) is given: alpha_base trades latency against
# accuracy, beta adds the entropy-aware bump, delta is left at the scale of
# typical entropy gaps (nats).
DEFAULT_EXIT_GRID = tuple(
    (alpha_base, beta, 1.0)
    for alpha_base in (0.5, 0.6, 0.7, 0.8)
    for beta in (0.0, 0.1, 0.2)
)


def entropy(p) -> np.ndarray | float:
    """Shannon entropy in nats along the last axis; inputs are renormalized."""
    arr = np.asarray(p, dtype=np.float64)
    if arr.shape[-1] == 0:
        raise ValueError("entropy of a zero-length distribution")
    arr = np.maximum(arr, _EPS)
    arr = arr / arr.sum(axis=-1, keepdims=True)
    h = -np.sum(arr * np.log(arr), axis=-1)
    return float(h) if h.ndim == 0 else h


def confidence(scores, class_count: int, kind: str = "entropy"):
    """Exit confidence in [0, 1] from raw scores.

    ``entropy`` uses 1 - H(softmax)/ln(classes); ``max_prob`` uses the top
    softmax probability instead.
    """
    if class_count < 2:
        raise ValueError(f"confidence needs >= 2 classes, got {class_count}")
    probs = softmax(np.asarray(scores, dtype=np.float64), axis=-1)
    if kind == "max_prob":
        c = probs.max(axis=-1)
    elif kind == "entropy":
        c = 1.0 - entropy(probs) / np.log(class_count)
    else:
        raise ValueError(f"unknown confidence kind {kind!r}")
    c = np.clip(c, 0.0, 1.0)
    return float(c) if np.ndim(c) == 0 else c


@dataclass
class ExitPolicy:
    """Per-step exit boundaries derived from calibration entropy."""

    alpha_base: float
    beta: float
    delta: float
    t_max: int
    mean_entropy: np.ndarray
    confidence_kind: str = "entropy"

    def boundaries(self) -> np.ndarray:
        ebar = np.asarray(self.mean_entropy, dtype=np.float64)
        return self.alpha_base + self.beta * np.exp(-(ebar - ebar.min()) / self.delta)


def fit_exit_policy(
    model: ModelGraph,
    configs: list[LayerSnnConfig],
    cache: CalibrationCache,
    t_max: int,
    alpha_base: float = 0.7,
    beta: float = 0.2,
    delta: float = 1.0,
    *,
    membrane_init: float = 0.5,
    confidence_kind: str = "entropy",
) -> ExitPolicy:
    """Record mean cumulative-score entropy per step on the calibration set."""
    if delta <= 0:
        raise ValueError(f"delta must be positive, got {delta}")
    cache.check_model(model)
    run = run_snn(
        model, configs, cache.inputs, t_max,
        membrane_init=membrane_init, collect_steps=True,
    )
    probs = softmax(run.step_scores, axis=-1)  # [T, N, classes]
    ebar = entropy(probs).mean(axis=1)
    return ExitPolicy(
        alpha_base=float(alpha_base),
        beta=float(beta),
        delta=float(delta),
        t_max=int(t_max),
        mean_entropy=np.asarray(ebar, dtype=np.float64),
        confidence_kind=confidence_kind,
    )


@dataclass
class ExitTrace:
    """Per-input exit decisions plus run aggregates."""

    exit_t: np.ndarray
    confidence: np.ndarray
    predicted: np.ndarray
    scores: np.ndarray
    spikes_per_input: np.ndarray
    stats: RunStats
    labels: np.ndarray | None = None

    @property
    def mean_exit_t(self) -> float:
        return float(np.mean(self.exit_t))

    @property
    def accuracy(self) -> float | None:
        if self.labels is None:
            return None
        return float(np.mean(self.predicted == self.labels))


def infer_adaptive(
    model: ModelGraph,
    configs: list[LayerSnnConfig],
    policy: ExitPolicy,
    batch,
    labels=None,
    *,
    membrane_init: float = 0.5,
) -> ExitTrace:
    """Run with the exit gate; spike accounting stops at each input's exit."""
    run = run_snn(
        model, configs, batch, policy.t_max,
        membrane_init=membrane_init, collect_steps=True,
    )
    step_scores = run.step_scores  # [T, N, Y]
    t_max, n, _ = step_scores.shape
    conf = np.stack(
        [
            confidence(step_scores[t], model.class_count, policy.confidence_kind)
            for t in range(t_max)
        ]
    )
    bounds = policy.boundaries()[:, None]
    hit = conf >= bounds
    has_hit = hit.any(axis=0)
    first = hit.argmax(axis=0)
    exit_idx = np.where(has_hit, first, t_max - 1)
    exit_t = exit_idx + 1

    picker = (exit_idx, np.arange(n))
    scores = step_scores[picker]
    cum_per_layer = np.cumsum(run.step_spikes, axis=0)  # [T, L, N]
    cum_total = cum_per_layer.sum(axis=1)  # [T, N]
    spikes = cum_total[picker]

    spiking = spiking_layer_indices(model)
    layer_counts = {
        idx: int(cum_per_layer[exit_idx, pos, np.arange(n)].sum())
        for pos, idx in enumerate(spiking)
    }
    stats = RunStats(
        total_spikes=int(spikes.sum()),
        layer_spikes=layer_counts,
        layer_synops={i: c * layer_fanout(model, i) for i, c in layer_counts.items()},
        layer_residual=dict(run.stats.layer_residual),
        timesteps=int(t_max),
    )
    return ExitTrace(
        exit_t=exit_t.astype(np.int64),
        confidence=conf[picker],
        predicted=np.argmax(scores, axis=1).astype(np.int64),
        scores=scores,
        spikes_per_input=spikes.astype(np.int64),
        stats=stats,
        labels=None if labels is None else np.asarray(labels, dtype=np.int64),
    )


# ---------------------------------------------------------------------------
# persistence

def save_policy(policy: ExitPolicy, path) -> None:
    lines = [
        "format snnc-exit-policy",
        f"alpha_base {policy.alpha_base!r}",
        f"beta {policy.beta!r}",
        f"delta {policy.delta!r}",
        f"t_max {policy.t_max}",
        f"confidence_kind {policy.confidence_kind}",
    ]
    for t, value in enumerate(policy.mean_entropy, start=1):
        lines.append(f"mean_entropy t {t} value {float(value)!r}")
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("\n".join(lines) + "\n")


def load_policy(path) -> ExitPolicy:
    with open(path, "r", encoding="utf-8") as fh:
        lines = [ln.strip() for ln in fh if ln.strip()]
    if lines[0] != "format snnc-exit-policy":
        raise ValueError("not an exit policy file")
    meta: dict[str, str] = {}
    entries: list[float] = []
    for line in lines[1:]:
        tokens = line.split()
        if tokens[0] == "mean_entropy":
            entries.append(float(tokens[4]))
        else:
            meta[tokens[0]] = tokens[1]
    return ExitPolicy(
        alpha_base=float(meta["alpha_base"]),
        beta=float(meta["beta"]),
        delta=float(meta["delta"]),
        t_max=int(meta["t_max"]),
        mean_entropy=np.asarray(entries, dtype=np.float64),
        confidence_kind=meta.get("confidence_kind", "entropy"),
    )


def write_exit_trace(path, trace: ExitTrace) -> None:
    lines = ["input_index,exit_t,confidence,predicted,label"]
    labels = trace.labels
    for i in range(len(trace.exit_t)):
        label = "" if labels is None else int(labels[i])
        lines.append(
            f"{i},{int(trace.exit_t[i])},{float(trace.confidence[i])!r},"
            f"{int(trace.predicted[i])},{label}"
        )
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("\n".join(lines) + "\n")
