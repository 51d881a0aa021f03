"""Layerwise adversarial perturbations.

Two constructions, sharing one unperturbed forward pass per batch:

* supervised: r* = -eps * g / ||g||2 with g the activation gradient of the
  log-likelihood at the injection point (needs labels);
* virtual: draw a random unit direction e, nudge the activation by xi * e,
  backpropagate the KL divergence between the frozen unperturbed output
  distribution and the nudged one, and rescale that gradient to eps. This is
  a single finite-difference power-iteration step toward the KL Hessian's
  dominant eigenvector and reads no labels.

Perturbations are per sample; norms are L2 over the flattened tensor.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np

from . import model

NORM_FLOOR = 1e-12
PROB_FLOOR = 1e-12

LAYER_SELECTIONS = {
    "input": (0,),
    "bottom": (1, 2),
    "top": (3, 4),
    "all": (0, 1, 2, 3, 4),
}

MODES = ("none", "supervised_at", "virtual_at")


@dataclass
class PerturbationConfig:
    mode: str = "none"
    layers: str = "all"
    epsilon: float = 20.0
    epsilon_per_point: Optional[dict[int, float]] = None
    xi: float = 10.0
    lam: float = 1.0

    def __post_init__(self):
        if self.mode not in MODES:
            raise ValueError(f"mode must be one of {MODES}, got {self.mode!r}")
        if self.mode != "none" and self.layers not in LAYER_SELECTIONS:
            raise ValueError(
                f"layers must be one of {tuple(LAYER_SELECTIONS)}, got {self.layers!r}")
        if self.epsilon < 0:
            raise ValueError("epsilon must be non-negative")
        for m, e in (self.epsilon_per_point or {}).items():
            if m not in model.ALL_POINTS:
                raise ValueError(f"unknown injection point {m}")
            if e < 0:
                raise ValueError("per-point epsilon must be non-negative")
        if self.xi <= 0:
            raise ValueError("xi must be positive")
        if self.lam < 0:
            raise ValueError("lambda weight must be non-negative")

    @property
    def points(self) -> tuple[int, ...]:
        if self.mode == "none":
            return ()
        return LAYER_SELECTIONS[self.layers]

    def eps_for(self, point: int) -> float:
        if self.epsilon_per_point and point in self.epsilon_per_point:
            return self.epsilon_per_point[point]
        return self.epsilon


def supervised_perturbation(g: np.ndarray, eps: float) -> np.ndarray:
    """r* = -eps * g/||g||2; exactly zero when eps is 0 or the gradient is
    numerically zero (||g||2 < 1e-12)."""
    g = np.asarray(g, dtype=float)
    norm = float(np.linalg.norm(g.ravel()))
    if eps == 0.0 or norm < NORM_FLOOR:
        return np.zeros_like(g)
    return (-eps / norm) * g


def kl_divergence(p, q) -> float:
    """KL(p || q) in nats over the class simplex, log arguments floored at
    1e-12 so degenerate inputs stay finite; clamped below at exactly 0."""
    p = np.asarray(p, dtype=float)
    q = np.asarray(q, dtype=float)
    val = float(np.sum(p * np.log(np.maximum(p, PROB_FLOOR) / np.maximum(q, PROB_FLOOR))))
    return max(0.0, val)


def kl_rows(P: np.ndarray, Q: np.ndarray) -> np.ndarray:
    """Row-wise KL(P_i || Q_i) with the same floors as kl_divergence."""
    P = np.asarray(P, dtype=float)
    Q = np.asarray(Q, dtype=float)
    vals = np.sum(P * np.log(np.maximum(P, PROB_FLOOR) / np.maximum(Q, PROB_FLOOR)), axis=-1)
    return np.maximum(0.0, vals)


def unit_rows(E: np.ndarray) -> np.ndarray:
    """Normalize each sample's flattened tensor to unit L2 norm."""
    flat = E.reshape(E.shape[0], -1)
    norms = np.linalg.norm(flat, axis=1, keepdims=True)
    safe = np.where(norms < NORM_FLOOR, 1.0, norms)
    return (flat / safe).reshape(E.shape)


def scale_rows(G: np.ndarray, eps: float) -> np.ndarray:
    """Per-sample eps * g/||g||, exactly zero rows where ||g|| < 1e-12 or
    eps == 0. Negative eps flips the direction (supervised sign)."""
    flat = np.asarray(G, dtype=float).reshape(G.shape[0], -1)
    out = np.zeros_like(flat)
    if eps != 0.0:
        norms = np.linalg.norm(flat, axis=1)
        ok = norms >= NORM_FLOOR
        out[ok] = (eps / norms[ok])[:, None] * flat[ok]
    return out.reshape(G.shape)


def _as_feature_batch(batch) -> np.ndarray:
    if isinstance(batch, np.ndarray) and batch.ndim == 3:
        return np.asarray(batch, dtype=float)
    arrs = [np.asarray(getattr(s, "features", s), dtype=float) for s in batch]
    return np.stack(arrs)


def _noise_rng(seed: int, epoch: int, batch_index: int, point: int):
    # dedicated stream per (run seed, epoch, batch, point): perturbation noise
    # never touches the data-order stream
    return np.random.default_rng(
        np.random.SeedSequence([int(seed), int(epoch), int(batch_index), int(point)]))


def virtual_perturbation_tensors(net: model.Network, X: np.ndarray,
                                 config: PerturbationConfig, *,
                                 seed: int = 0, epoch: int = 0,
                                 batch_index: int = 0,
                                 base: Optional[model.ForwardCache] = None
                                 ) -> dict[int, np.ndarray]:
    """Stacked virtual perturbations, one (batch, ...) tensor per selected point.

    One power-iteration step per point: the KL gradient is evaluated at
    r = xi * e only (its value and gradient at r = 0 both vanish).
    """
    if base is None:
        base = model.forward_batch(net, X)
    p_ref = base.probs
    out: dict[int, np.ndarray] = {}
    for m in config.points:
        rng = _noise_rng(seed, epoch, batch_index, m)
        e = unit_rows(rng.standard_normal(base.xhat[m].shape))
        nudged = model.resume_forward(net, base, m, config.xi * e)
        dlogits = model.kl_dlogits(p_ref, nudged.probs)
        _, act = model.backward_batch(net, nudged, dlogits,
                                      want_param_grads=False, down_to=m)
        out[m] = scale_rows(act[m], config.eps_for(m))
    return out


def supervised_perturbation_tensors(net: model.Network, X: np.ndarray,
                                    labels: Sequence[int],
                                    config: PerturbationConfig, *,
                                    base: Optional[model.ForwardCache] = None
                                    ) -> dict[int, np.ndarray]:
    """Stacked supervised perturbations from one backward pass of the
    per-sample log-likelihood."""
    labels = list(labels)
    if any(lbl is None for lbl in labels):
        raise ValueError("supervised adversarial mode requires a label for every sample")
    if base is None:
        base = model.forward_batch(net, X)
    points = config.points
    dlogits = model.loglik_dlogits(base.probs, labels)
    _, act = model.backward_batch(net, base, dlogits,
                                  want_param_grads=False, down_to=min(points))
    return {m: scale_rows(act[m], -config.eps_for(m)) for m in points}


def compute_perturbation_tensors(net: model.Network, X: np.ndarray,
                                 labels: Optional[Sequence] = None,
                                 config: Optional[PerturbationConfig] = None, *,
                                 seed: int = 0, epoch: int = 0,
                                 batch_index: int = 0,
                                 base: Optional[model.ForwardCache] = None
                                 ) -> dict[int, np.ndarray]:
    """Mode dispatcher over the supervised and virtual constructions.

    All selected points are derived from the same unperturbed pass; the
    caller applies them simultaneously in one perturbed forward.
    """
    config = config or PerturbationConfig()
    if config.mode == "none":
        return {}
    if config.mode == "supervised_at":
        if labels is None:
            raise ValueError("supervised adversarial mode requires labels")
        return supervised_perturbation_tensors(net, X, labels, config, base=base)
    return virtual_perturbation_tensors(net, X, config, seed=seed, epoch=epoch,
                                        batch_index=batch_index, base=base)


def _unstack(tensors: dict[int, np.ndarray], n: int) -> list[model.PerturbationSet]:
    return [{m: t[i] for m, t in tensors.items()} for i in range(n)]


def virtual_perturbation(net: model.Network, batch, config: PerturbationConfig, *,
                         seed: int = 0, epoch: int = 0, batch_index: int = 0
                         ) -> list[model.PerturbationSet]:
    """Per-sample virtual (label-free) perturbation sets for a batch."""
    X = _as_feature_batch(batch)
    tensors = virtual_perturbation_tensors(net, X, config, seed=seed,
                                           epoch=epoch, batch_index=batch_index)
    return _unstack(tensors, X.shape[0])


def compute_perturbations(net: model.Network, batch, labels,
                          config: PerturbationConfig, *,
                          seed: int = 0, epoch: int = 0, batch_index: int = 0
                          ) -> list[model.PerturbationSet]:
    """Per-sample perturbation sets for a batch under the configured mode."""
    X = _as_feature_batch(batch)
    tensors = compute_perturbation_tensors(net, X, labels, config, seed=seed,
                                           epoch=epoch, batch_index=batch_index)
    return _unstack(tensors, X.shape[0])
