"""White-box and transfer l-inf attacks on any differentiable model.

A model is a callable mapping a ``(B, D)`` batch (array or graph tensor) to a
logits tensor. All attacks keep ``x_adv`` inside the epsilon ball around ``x``
intersected with the input box.
"""

from __future__ import annotations

from dataclasses import dataclass, replace
from typing import Callable, Sequence

import numpy as np

from . import diffgraph as dg

__all__ = [
    "AttackConfig",
    "TRAIN_ATTACK",
    "input_gradient",
    "fgsm",
    "pgd",
    "mim",
    "run_attack",
    "adv_train_step",
    "accuracy",
    "robust_accuracy",
    "transfer_eval",
    "EPS_SWEEP",
]

Model = Callable[[dg.Tensor], dg.Tensor]

# total perturbation sizes of the perturbation sweep
EPS_SWEEP = (0.01, 0.02, 0.03, 0.04, 0.05, 0.06, 0.07)


@dataclass(frozen=True)
class AttackConfig:
    kind: str = "pgd"
    epsilon: float = 8 / 255
    steps: int = 7
    step_size: float = 2 / 255
    momentum_decay: float = 1.0
    random_start: bool = True
    input_range: tuple[float, float] = (0.0, 1.0)
    seed: int = 0

    def __post_init__(self):
        if self.kind not in ("fgsm", "pgd", "mim"):
            raise ValueError(f"unknown attack {self.kind!r}")
        if self.epsilon < 0:
            raise ValueError("epsilon must be >= 0")
        if self.kind != "fgsm" and self.steps < 1:
            raise ValueError("iterative attacks need steps >= 1")


# PGD adversarial training attack: 7 steps of 2/255 inside 8/255
TRAIN_ATTACK = AttackConfig(kind="pgd", epsilon=8 / 255, steps=7, step_size=2 / 255)


def _onehot(y: np.ndarray, m: int) -> np.ndarray:
    return np.eye(m)[np.asarray(y, dtype=int)]


def input_gradient(model: Model, x: np.ndarray, y: np.ndarray) -> tuple[float, np.ndarray]:
    """Mean cross-entropy at ``x`` and its gradient w.r.t. ``x``."""
    xt = dg.parameter(x)
    logits = model(xt)
    loss = dg.softmax_cross_entropy(logits, _onehot(y, logits.shape[-1]))
    dg.backward(loss)
    return loss.item(), xt.grad


def _project(x_adv, x, eps, lo, hi):
    x_adv = np.clip(x_adv, x - eps, x + eps)
    return np.clip(x_adv, lo, hi)


def fgsm(model: Model, x: np.ndarray, y: np.ndarray, epsilon: float,
         input_range: tuple[float, float] = (0.0, 1.0)) -> np.ndarray:
    """One signed-gradient step of size ``epsilon``, clipped to the box."""
    _, g = input_gradient(model, x, y)
    return np.clip(x + epsilon * np.sign(g), *input_range)


def _start(x, cfg: AttackConfig, rng):
    lo, hi = cfg.input_range
    if not cfg.random_start or cfg.epsilon == 0:
        return x.copy()
    return np.clip(x + rng.uniform(-cfg.epsilon, cfg.epsilon, size=x.shape), lo, hi)


def pgd(model: Model, x: np.ndarray, y: np.ndarray, cfg: AttackConfig,
        rng: np.random.Generator | None = None) -> np.ndarray:
    """Projected signed-gradient ascent.

    Each step adds ``step_size * sign(grad)``, clamps to the epsilon ball,
    then clamps to ``input_range``.
    """
    rng = rng if rng is not None else np.random.default_rng(cfg.seed)
    lo, hi = cfg.input_range
    x_adv = _start(x, cfg, rng)
    for _ in range(cfg.steps):
        _, g = input_gradient(model, x_adv, y)
        x_adv = _project(x_adv + cfg.step_size * np.sign(g), x, cfg.epsilon, lo, hi)
    return x_adv


def mim(model: Model, x: np.ndarray, y: np.ndarray, cfg: AttackConfig,
        rng: np.random.Generator | None = None) -> np.ndarray:
    """Momentum iterative attack with per-example l1-normalised gradients."""
    rng = rng if rng is not None else np.random.default_rng(cfg.seed)
    lo, hi = cfg.input_range
    x_adv = _start(x, cfg, rng)
    momentum = np.zeros_like(x)
    for _ in range(cfg.steps):
        _, g = input_gradient(model, x_adv, y)
        l1 = np.abs(g).sum(axis=1, keepdims=True)
        live = l1[:, 0] > 0
        # a zero gradient leaves that example's momentum untouched
        momentum[live] = cfg.momentum_decay * momentum[live] + g[live] / l1[live]
        x_adv = _project(x_adv + cfg.step_size * np.sign(momentum), x, cfg.epsilon, lo, hi)
    return x_adv


def run_attack(model: Model, x: np.ndarray, y: np.ndarray, cfg: AttackConfig,
               rng: np.random.Generator | None = None) -> np.ndarray:
    if cfg.kind == "fgsm":
        return fgsm(model, x, y, cfg.epsilon, cfg.input_range)
    if cfg.kind == "pgd":
        return pgd(model, x, y, cfg, rng)
    return mim(model, x, y, cfg, rng)


def adv_train_step(model: Model, x: np.ndarray, y: np.ndarray, cfg: AttackConfig,
                   rng: np.random.Generator | None = None) -> dg.Tensor:
    """Cross-entropy at adversarial inputs, as a graph node for the optimiser."""
    x_adv = run_attack(model, x, y, cfg, rng) if cfg.epsilon > 0 else x
    logits = model(x_adv)
    return dg.softmax_cross_entropy(logits, _onehot(y, logits.shape[-1]))


def _predict(model: Model, x: np.ndarray, batch: int = 512) -> np.ndarray:
    return np.concatenate([np.argmax(model(x[i: i + batch]).value, axis=1) for i in range(0, len(x), batch)])


def accuracy(model: Model, x: np.ndarray, y: np.ndarray) -> float:
    return float(np.mean(_predict(model, x) == y))


def _adv_batches(model, x, y, cfg, batch):
    out = np.empty_like(x)
    for b, i in enumerate(range(0, len(x), batch)):
        rng = np.random.default_rng([cfg.seed, b])
        out[i: i + batch] = run_attack(model, x[i: i + batch], y[i: i + batch], cfg, rng)
    return out


def robust_accuracy(model: Model, x: np.ndarray, y: np.ndarray, cfg: AttackConfig,
                    epsilons: Sequence[float] = (), steps_list: Sequence[int] = (),
                    batch: int = 256) -> dict:
    """Clean and adversarial accuracy, plus optional epsilon and steps sweeps.

    ``rows`` holds one record per evaluated point in the results-CSV layout.
    """
    clean = accuracy(model, x, y)

    def point(c: AttackConfig) -> float:
        if c.epsilon == 0:
            return clean
        return accuracy(model, _adv_batches(model, x, y, c, batch), y)

    adv = point(cfg)
    rows = [_row(cfg, clean, adv)]
    eps_curve = []
    for eps in epsilons:
        c = replace(cfg, epsilon=float(eps))
        acc = point(c)
        eps_curve.append((float(eps), acc))
        rows.append(_row(c, clean, acc))
    steps_curve = []
    for steps in steps_list:
        c = replace(cfg, steps=int(steps))
        acc = point(c)
        steps_curve.append((int(steps), acc))
        rows.append(_row(c, clean, acc))
    return {"clean_acc": clean, "adv_acc": adv, "eps_curve": eps_curve,
            "steps_curve": steps_curve, "rows": rows}


def _row(cfg: AttackConfig, clean: float, adv: float) -> dict:
    return {"attack": cfg.kind, "epsilon": float(cfg.epsilon),
            "steps": 1 if cfg.kind == "fgsm" else int(cfg.steps),
            "seed": int(cfg.seed), "clean_acc": clean, "adv_acc": adv}


def transfer_eval(source: Model, target: Model, x: np.ndarray, y: np.ndarray,
                  cfg: AttackConfig, batch: int = 256) -> float:
    """Accuracy of ``target`` on adversarial examples crafted against ``source``.

    Raises:
        ValueError: if the two models disagree on input or output dimensions.
    """
    probe = x[:1]
    try:
        out_s, out_t = source(probe), target(probe)
    except ValueError as exc:
        raise ValueError(f"source and target disagree on input dimension: {exc}") from None
    if out_s.shape != out_t.shape:
        raise ValueError(f"output dimensions differ: {out_s.shape} vs {out_t.shape}")
    if cfg.epsilon == 0:
        return accuracy(target, x, y)
    return accuracy(target, _adv_batches(source, x, y, cfg, batch), y)
