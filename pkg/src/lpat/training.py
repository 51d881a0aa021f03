"""End-to-end training: loss assembly, RMSProp, and the two-round schedule.

Per batch: (1) sample labeled rows (one shuffled pass per epoch) plus
unlabeled rows drawn with replacement, in proportion to the pool sizes;
(2) unperturbed forward, negative log-likelihood on the labeled rows;
(3) perturbations from that same pass (supervised or virtual); (4) one
perturbed forward with every selected point perturbed simultaneously,
giving the adversarial KL term; (5) a single combined backprop of
total = nll + lambda * lap through both passes; (6) RMSProp update.

Perturbation noise lives on its own RNG stream keyed by
(seed, epoch, batch, point), so computing perturbations never disturbs
batch composition; with lambda = 0 the adversarial term contributes exactly
nothing and the parameter trajectory matches plain training bit for bit.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from . import evaluate as eval_mod
from . import model, perturb

PROB_FLOOR = 1e-12

REPORT_MAGIC = "# lpat-train-report v1"


@dataclass
class TrainConfig:
    learning_rate: float = 0.001
    batch_size: int = 128
    epochs: int = 210
    unlabeled_frac: float = 1.0
    seed: int = 0
    hidden1: int = 128
    hidden2: int = 128
    lstm_units: int = 200

    def __post_init__(self):
        if self.learning_rate <= 0:
            raise ValueError("learning rate must be positive")
        if self.batch_size <= 0 or self.epochs <= 0:
            raise ValueError("batch size and epochs must be positive")
        if not 0.0 <= self.unlabeled_frac <= 1.0:
            raise ValueError("unlabeled_frac must lie in [0, 1]")
        if self.seed < 0:
            raise ValueError("seed must be non-negative")
        if min(self.hidden1, self.hidden2, self.lstm_units) <= 0:
            raise ValueError("layer widths must be positive")


@dataclass
class OptimizerState:
    acc: dict[str, np.ndarray]
    rho: float = 0.9
    delta: float = 1e-8


def init_optimizer(params: dict[str, np.ndarray], rho: float = 0.9,
                   delta: float = 1e-8) -> OptimizerState:
    return OptimizerState(acc={k: np.zeros_like(v) for k, v in params.items()},
                          rho=rho, delta=delta)


def rmsprop_step(params: dict[str, np.ndarray], grads: dict[str, np.ndarray],
                 state: OptimizerState, lr: float) -> None:
    """acc <- rho*acc + (1-rho)*g^2; theta <- theta - lr*g/(sqrt(acc)+delta).

    Updates params and state in place; every parameter needs a gradient entry.
    """
    for name, p in params.items():
        g = grads[name]
        a = state.acc[name]
        a *= state.rho
        a += (1.0 - state.rho) * g * g
        p -= lr * g / (np.sqrt(a) + state.delta)


@dataclass
class EpochStats:
    epoch: int
    train_loss: float
    valid_loss: float
    valid_macro_f1: float


@dataclass
class TrainReport:
    epochs: list[EpochStats] = field(default_factory=list)
    best_epoch: int = 0  # 1-based epoch number of the retained checkpoint


def nll_loss(probabilities, labels) -> float:
    """-(1/N) sum log p(label), probabilities floored at 1e-12."""
    probs = np.atleast_2d(np.asarray(probabilities, dtype=float))
    labels = list(labels)
    if len(labels) != probs.shape[0]:
        raise ValueError("one label per probability row required")
    if any(lbl is None for lbl in labels):
        raise ValueError("nll_loss is defined on labeled samples only")
    idx = np.asarray(labels, dtype=int)
    picked = probs[np.arange(probs.shape[0]), idx]
    return float(-np.mean(np.log(np.maximum(picked, PROB_FLOOR))))


def lap_loss_from_probs(p_ref: np.ndarray, p_pert: np.ndarray) -> float:
    """Mean KL between frozen reference rows and perturbed prediction rows."""
    return float(np.mean(perturb.kl_rows(p_ref, p_pert)))


def lap_loss(net: model.Network, batch, perturbations: Sequence[model.PerturbationSet]) -> float:
    """Adversarial term over labeled and unlabeled samples alike: each
    sample's perturbation set is applied simultaneously at all its points."""
    X = perturb._as_feature_batch(batch)
    base = model.forward_batch(net, X)
    points = sorted({m for ps in perturbations for m in ps})
    if not points:
        return lap_loss_from_probs(base.probs, base.probs)
    stacked = {
        m: np.stack([
            ps[m] if m in ps else np.zeros_like(base.xhat[m][i])
            for i, ps in enumerate(perturbations)
        ])
        for m in points
    }
    pert = model.forward_batch(net, X, stacked)
    return lap_loss_from_probs(base.probs, pert.probs)


def total_loss(nll: float, lap: float, lam: float) -> float:
    """L = nll + lambda * lap, nothing else."""
    return nll + lam * lap


def predict(net: model.Network, sample) -> tuple[int, np.ndarray]:
    """Class (argmax, ties to the lowest index) plus the probability vector.

    Prediction never engages the injection machinery.
    """
    feats = np.asarray(getattr(sample, "features", sample), dtype=float)
    probs = model.forward(net, feats).probs[0]
    return int(np.argmax(probs)), probs


def _stack_features(samples) -> np.ndarray:
    return np.stack([np.asarray(s.features, dtype=float) for s in samples])


def select_unlabeled(pool, frac: float, seed: int) -> list:
    """Fixed, seed-deterministic subset of floor(frac * len(pool)) samples."""
    take = int(np.floor(frac * len(pool)))
    if not take:
        return []
    order = np.random.default_rng(
        np.random.SeedSequence([seed, 2])).permutation(len(pool))
    return [pool[i] for i in order[:take]]


def _batch_layout(n_labeled: int, n_unlabeled: int, batch_size: int) -> tuple[int, int]:
    """Rows per batch drawn from each pool, proportional to pool sizes; at
    least one labeled row so the supervised loss is always defined."""
    if n_unlabeled == 0:
        return min(batch_size, n_labeled), 0
    frac = n_unlabeled / (n_labeled + n_unlabeled)
    n_u = min(int(round(batch_size * frac)), batch_size - 1)
    return batch_size - n_u, n_u


def train(dataset, train_config: TrainConfig,
          perturbation_config: Optional[perturb.PerturbationConfig] = None
          ) -> tuple[model.Network, TrainReport]:
    """Train on a DatasetSplit-shaped object (train_labeled / train_unlabeled /
    valid sample lists); returns the best-validation-macro-F1 checkpoint and
    the per-epoch report.

    With an empty validation set the final-epoch parameters are retained
    (the small-population protocol) and the validation columns read NaN.
    """
    cfg = train_config
    pcfg = perturbation_config or perturb.PerturbationConfig()
    labeled = list(dataset.train_labeled)
    if not labeled:
        raise ValueError("training requires at least one labeled sample")
    unlabeled_pool = list(dataset.train_unlabeled)
    valid = list(dataset.valid)

    unlabeled = select_unlabeled(unlabeled_pool, cfg.unlabeled_frac, cfg.seed)
    if pcfg.mode == "supervised_at" and unlabeled:
        raise ValueError(
            "supervised adversarial mode cannot train on unlabeled samples; "
            "set unlabeled_frac=0 or switch to virtual_at")

    X_l = _stack_features(labeled)
    y_l = np.array([int(s.label) for s in labeled])
    X_u = _stack_features(unlabeled) if unlabeled else None

    n = X_l.shape[2]
    net = model.init_network(n, cfg.hidden1, cfg.hidden2, cfg.lstm_units,
                             classes=eval_mod.N_CLASSES, seed=cfg.seed)
    params = net.params()
    opt = init_optimizer(params)
    rng_data = np.random.default_rng(np.random.SeedSequence([cfg.seed, 1]))

    n_l_rows, n_u_rows = _batch_layout(len(labeled), len(unlabeled), cfg.batch_size)
    report = TrainReport()
    best_f1 = -1.0
    best_net = None

    for epoch in range(1, cfg.epochs + 1):
        order = rng_data.permutation(len(labeled))
        batch_losses = []
        for b, lo in enumerate(range(0, len(labeled), n_l_rows)):
            li = order[lo:lo + n_l_rows]
            Xb = X_l[li]
            yb = y_l[li]
            n_lab = len(li)
            if n_u_rows:
                ui = rng_data.integers(0, len(unlabeled), size=n_u_rows)
                Xb = np.concatenate([Xb, X_u[ui]], axis=0)
            labels_full = list(yb) + [None] * (Xb.shape[0] - n_lab)

            cache = model.forward_batch(net, Xb)
            nll = nll_loss(cache.probs[:n_lab], yb)

            loss = nll
            tensors = {}
            if pcfg.mode != "none":
                tensors = perturb.compute_perturbation_tensors(
                    net, Xb, labels_full, pcfg,
                    seed=cfg.seed, epoch=epoch, batch_index=b, base=cache)

            dlogits = np.zeros_like(cache.probs)
            dlogits[:n_lab] = (cache.probs[:n_lab] -
                               np.eye(eval_mod.N_CLASSES)[yb]) / n_lab
            grads, _ = model.backward_batch(net, cache, dlogits)

            if tensors:
                pert_cache = model.forward_batch(net, Xb, tensors)
                lap = lap_loss_from_probs(cache.probs, pert_cache.probs)
                loss = total_loss(nll, lap, pcfg.lam)
                if pcfg.lam != 0.0:
                    dl_pert = pcfg.lam * (pert_cache.probs - cache.probs) / Xb.shape[0]
                    grads2, _ = model.backward_batch(net, pert_cache, dl_pert)
                    for k in grads:
                        grads[k] += grads2[k]

            rmsprop_step(params, grads, opt, cfg.learning_rate)
            batch_losses.append(loss)

        valid_loss = float("nan")
        valid_f1 = float("nan")
        if valid:
            valid_loss, valid_f1 = _validate(net, valid)
            if valid_f1 > best_f1:
                best_f1 = valid_f1
                best_net = net.copy()
                report.best_epoch = epoch
        report.epochs.append(EpochStats(
            epoch=epoch, train_loss=float(np.mean(batch_losses)),
            valid_loss=valid_loss, valid_macro_f1=valid_f1))

    if best_net is None:
        best_net = net
        report.best_epoch = cfg.epochs
    return best_net, report


def _validate(net: model.Network, samples) -> tuple[float, float]:
    feats = _stack_features(samples)
    labels = [int(s.label) for s in samples]
    probs = np.concatenate([
        model.forward_batch(net, feats[lo:lo + 512]).probs
        for lo in range(0, feats.shape[0], 512)
    ])
    loss = nll_loss(probs, labels)
    preds = probs.argmax(axis=1)
    rep = eval_mod.metrics_from_confusion(eval_mod.confusion_matrix(labels, preds))
    return loss, rep.macro_f1


def format_report(report: TrainReport) -> str:
    """One epoch per line: epoch, train loss, valid loss, valid macro-F1."""
    lines = [REPORT_MAGIC, "# epoch train_loss valid_loss valid_macro_f1"]
    for st in report.epochs:
        lines.append(f"{st.epoch} {st.train_loss!r} {st.valid_loss!r} {st.valid_macro_f1!r}")
    lines.append(f"# best_epoch {report.best_epoch}")
    return "\n".join(lines) + "\n"


def parse_report(text: str) -> TrainReport:
    lines = text.splitlines()
    if not lines or lines[0] != REPORT_MAGIC:
        raise ValueError("not a training report file")
    report = TrainReport()
    for ln in lines[1:]:
        if ln.startswith("# best_epoch "):
            report.best_epoch = int(ln.split()[-1])
        elif ln.startswith("#") or not ln.strip():
            continue
        else:
            e, tl, vl, vf = ln.split()
            report.epochs.append(EpochStats(int(e), float(tl), float(vl), float(vf)))
    return report
