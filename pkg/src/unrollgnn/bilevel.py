"""Bilevel training: unroll descent on an energy, read out, backpropagate.

The forward pass records every operation on an :class:`autodiff.Tape`.
Gradients with respect to the energy parameters flow through all ``L``
descent steps, through ``H0 = pi(X; W)`` when that initialization is used,
and through the prox backward rules.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .descent import DescentAlgorithm, HiddenState, step
from .energy import EnergyFamily, input_model
from .graph import HeteroGraph, LabelSet

DIVERGENCE = 1e10


class BilevelError(RuntimeError):
    pass


class TrainingDiverged(BilevelError):
    def __init__(self, msg, history):
        super().__init__(msg)
        self.history = history


@dataclass
class TrainConfig:
    epochs: int = 100
    lr: float = 0.05
    optimizer: str = "adam"      # "adam" or "gd" (gd backtracks)
    L: int = 2
    seed: int = 0
    lam_trainable: bool = False

    def __post_init__(self):
        if self.epochs < 1:
            raise BilevelError("epochs must be >= 1")
        if self.optimizer not in ("adam", "gd"):
            raise BilevelError(f"unknown outer optimizer {self.optimizer!r}")
        if self.lr <= 0 or self.L < 0:
            raise BilevelError("need lr > 0 and L >= 0")


@dataclass
class BilevelModel:
    """Energy parameters ``W`` (inside ``energy.params``), readout ``Theta``, depth ``L``."""

    energy: EnergyFamily
    algo: DescentAlgorithm
    L: int
    theta: dict
    h0: str = "pi"               # "pi" or "zeros"

    @property
    def W(self) -> dict:
        return self.energy.params

    def params(self) -> dict:
        return {**{f"W:{k}": v for k, v in self.W.items()},
                **{f"theta:{k}": v for k, v in self.theta.items()}}

    def set_params(self, flat: dict) -> "BilevelModel":
        W = {k[2:]: v for k, v in flat.items() if k.startswith("W:")}
        th = {k[6:]: v for k, v in flat.items() if k.startswith("theta:")}
        return BilevelModel(self.energy.with_params(W), self.algo, self.L, th, self.h0)


def init_model(energy: EnergyFamily, algo: DescentAlgorithm, d_x: int, d: int, c: int,
               L: int, seed: int = 0, hidden: int | None = None,
               lam_trainable: bool = False, h0: str = "pi") -> BilevelModel:
    """Random input model and readout; everything else from ``energy.params``."""
    from .energy import InputModel

    rng = np.random.default_rng(seed)
    P = dict(energy.params)
    P.update(InputModel.init(rng, d_x, d, hidden))
    if lam_trainable:
        # softplus(lam_raw) = lam at start
        P["lam_raw"] = np.array([math.log(math.expm1(energy.lam))])
    theta = {"W": rng.normal(scale=0.1, size=(d, c)), "b": np.zeros((1, c))}
    return BilevelModel(energy.with_params(P), algo, L, theta, h0)


def readout(H, theta):
    return ad.add(ad.matmul(H, theta["W"]), theta["b"])


@dataclass
class ForwardResult:
    loss: float
    H: np.ndarray
    logits: np.ndarray
    tape: ad.Tape
    loss_var: ad.Var
    leaves: dict


def unroll_on_tape(model: BilevelModel, g: HeteroGraph, X, P):
    """``H^(L)`` as a tape variable (or array when nothing is recorded)."""
    if model.h0 == "pi":
        H = input_model(X, P)
    elif model.h0 == "zeros":
        d = ad.value(model.theta["W"]).shape[0]
        H = np.zeros((g.n, d))
    else:
        raise BilevelError(f"unknown H0 option {model.h0!r}")
    S = HiddenState.zeros(model.algo, ad.value(H).shape)
    for _ in range(model.L):
        H, S = step(model.algo, model.energy, g, H, S, X, P)
    return H


def forward(model: BilevelModel, g: HeteroGraph, X: np.ndarray, Ybar: np.ndarray,
            mask: np.ndarray | None = None) -> ForwardResult:
    """Mean softmax cross-entropy of the readout over labeled rows."""
    Ybar = np.asarray(Ybar, dtype=np.float64)
    if mask is None:
        mask = Ybar.sum(axis=1) != 0
    mask = np.asarray(mask, dtype=bool)
    if not mask.any():
        raise BilevelError("no labeled nodes")
    tape = ad.Tape()
    leaves = {k: tape.leaf(v, name=k) for k, v in model.params().items()}
    P = {k[2:]: v for k, v in leaves.items() if k.startswith("W:")}
    theta = {k[6:]: v for k, v in leaves.items() if k.startswith("theta:")}
    H = unroll_on_tape(model, g, X, P)
    logits = readout(H, theta)
    loss = ad.softmax_ce(logits, Ybar * mask[:, None], mask / mask.sum())
    val = float(ad.value(loss))
    if not np.isfinite(val):
        raise BilevelError("loss is not finite")
    return ForwardResult(val, np.asarray(ad.value(H)), np.asarray(ad.value(logits)),
                         tape, loss, leaves)


def backward(fr: ForwardResult) -> dict:
    """Gradients of the loss for every parameter (zeros if unused)."""
    fr.tape.backward(fr.loss_var)
    return {k: (np.zeros_like(v.value) if v.grad is None else np.array(v.grad))
            for k, v in fr.leaves.items()}


def loss_and_grad(model, g, X, Ybar, mask=None):
    fr = forward(model, g, X, Ybar, mask)
    return fr.loss, backward(fr), fr


# ----------------------------------------------------------------------
# outer optimizers

class OuterAdam:
    def __init__(self, lr, beta1=0.9, beta2=0.999, eps=1e-8):
        self.lr, self.b1, self.b2, self.eps = lr, beta1, beta2, eps
        self.m: dict = {}
        self.v: dict = {}
        self.t = 0

    def update(self, params: dict, grads: dict) -> dict:
        self.t += 1
        out = {}
        for k, p in params.items():
            g = grads[k]
            m = self.b1 * self.m.get(k, 0.0) + (1 - self.b1) * g
            v = self.b2 * self.v.get(k, 0.0) + (1 - self.b2) * g * g
            self.m[k], self.v[k] = m, v
            mh = m / (1 - self.b1 ** self.t)
            vh = v / (1 - self.b2 ** self.t)
            out[k] = p - self.lr * mh / (np.sqrt(vh) + self.eps)
        return out


def backtracking_gd(params: dict, grads: dict, loss: float, objective, lr: float,
                    max_halvings: int = 40, strict: bool = False):
    """Halve ``lr`` until ``objective(new) <= loss`` (``<`` if strict).

    Returns ``(new_params, new_loss)``, or the inputs unchanged when no
    trial step is accepted.
    """
    for _ in range(max_halvings + 1):
        trial = {k: p - lr * grads[k] for k, p in params.items()}
        try:
            new_loss = objective(trial)
        except (BilevelError, FloatingPointError, RuntimeError):
            new_loss = np.inf
        if new_loss < loss or (not strict and new_loss == loss):
            return trial, new_loss
        lr /= 2
    return params, loss


# ----------------------------------------------------------------------
# training

def accuracy(logits: np.ndarray, labels: np.ndarray, mask: np.ndarray) -> float:
    if not mask.any():
        return float("nan")
    return float(np.mean(np.argmax(logits[mask], axis=1) == labels[mask]))


@dataclass
class TrainResult:
    model: BilevelModel
    history: list = field(default_factory=list)   # dicts: epoch, train_loss, train_acc, val_acc


def train(model: BilevelModel, g: HeteroGraph, X: np.ndarray, labels: LabelSet,
          train_mask: np.ndarray, val_mask: np.ndarray | None = None,
          cfg: TrainConfig = TrainConfig()) -> TrainResult:
    """Fit ``W`` and ``Theta``; records loss and accuracies each epoch.

    The loss and accuracies of an epoch are measured before that epoch's
    update.
    """
    train_mask = np.asarray(train_mask, dtype=bool)
    val_mask = np.zeros_like(train_mask) if val_mask is None else np.asarray(val_mask, dtype=bool)
    Ybar = labels.restrict(train_mask).masked_onehot()
    y = labels.labels
    opt = OuterAdam(cfg.lr) if cfg.optimizer == "adam" else None
    params = model.params()
    history = []

    def objective(p):
        return forward(model.set_params(p), g, X, Ybar, train_mask).loss

    for epoch in range(cfg.epochs):
        m = model.set_params(params)
        try:
            loss, grads, fr = loss_and_grad(m, g, X, Ybar, train_mask)
        except BilevelError as exc:
            raise TrainingDiverged(f"epoch {epoch}: {exc}", history) from None
        history.append({"epoch": epoch, "train_loss": loss,
                        "train_acc": accuracy(fr.logits, y, train_mask),
                        "val_acc": accuracy(fr.logits, y, val_mask)})
        if loss > DIVERGENCE:
            raise TrainingDiverged(f"epoch {epoch}: loss {loss:.3e} exceeds {DIVERGENCE:.0e}",
                                   history)
        if opt is not None:
            params = opt.update(params, grads)
        else:
            params, _ = backtracking_gd(params, grads, loss, objective, cfg.lr)
    return TrainResult(model.set_params(params), history)


def history_csv(history: list) -> str:
    lines = ["epoch,train_loss,train_acc,val_acc"]
    for h in history:
        lines.append(f"{h['epoch']},{h['train_loss']:.17g},{h['train_acc']:.17g},{h['val_acc']:.17g}")
    return "\n".join(lines) + "\n"


# ----------------------------------------------------------------------
# outlier scoring

@dataclass
class OutlierResult:
    ranking: np.ndarray        # node ids, most anomalous first
    residuals: np.ndarray      # per node, indexed by node id
    top: np.ndarray
    detect_ratio: float | None


def detect_outliers(H: np.ndarray, X: np.ndarray, W: dict, fraction: float,
                    truth: np.ndarray | None = None) -> OutlierResult:
    """Rank nodes by ``||h_v - pi(x_v; W)||``; ties go to the lower node id.

    ``detect_ratio`` is the percentage of planted outliers found among the
    top ``fraction`` of nodes.
    """
    if not 0.0 < fraction <= 1.0:
        raise BilevelError(f"fraction must be in (0, 1], got {fraction}")
    R = np.asarray(H) - np.asarray(ad.value(input_model(X, W)))
    res = np.sqrt(np.sum(R * R, axis=1))
    n = res.shape[0]
    ranking = np.lexsort((np.arange(n), -res))
    k = n if fraction == 1.0 else int(round(fraction * n))
    top = ranking[:k]
    ratio = None
    if truth is not None:
        truth = np.asarray(truth, dtype=bool)
        if truth.any():
            ratio = 100.0 * np.count_nonzero(truth[top]) / np.count_nonzero(truth)
    return OutlierResult(ranking, res, top, ratio)
