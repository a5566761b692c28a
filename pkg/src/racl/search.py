"""Constrained architecture search and genotype retraining.

Weights and architecture distributions are updated alternately on the two
halves of the training set. The architecture step minimises

    L = CE + theta * c + (rho / 2) * c**2,
    c = mu + Phi^{-1}(eta) * var - ln(lambda_star),

where ``(mu, var)`` is the log-normal bound on the network Lipschitz
constant; ``theta`` follows dual ascent once per epoch.
"""

from __future__ import annotations

import dataclasses
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable

import numpy as np

from . import diffgraph as dg
from .attacks import AttackConfig, accuracy, adv_train_step, run_attack
from .dataio import (
    Dataset,
    DatasetSpec,
    HISTORY_COLUMNS,
    load_checkpoint,
    load_dataset,
    rng_from_state,
    rng_state,
    save_checkpoint,
    split_halves,
    write_csv,
)
from .lognormal import LogNormalParams, ln_cdf, normal_quantile
from .optim import SGD, Adam, clip_grad_norm, cosine_lr
from .supernet import (
    ArchDistribution,
    Genotype,
    Supernet,
    SupernetSpec,
    discretize,
    network_bound_graph,
    sample_arch,
    sampled_bound,
)

__all__ = [
    "SearchConfig",
    "AdmmState",
    "NonFiniteLoss",
    "constraint_value",
    "augmented_lagrangian",
    "dual_step",
    "SearchRun",
    "calibrate_lambda_star",
    "search_loop",
    "retrain",
    "save_model",
    "load_model",
    "build_dataset",
    "supernet_spec",
]

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class SearchConfig:
    """Every knob of a search/retrain run; flat so it maps onto a TOML file."""

    seed: int = 0
    epochs: int = 30
    batch_size: int = 128
    # supernet weights
    w_lr: float = 0.05
    w_momentum: float = 0.9
    w_weight_decay: float = 3e-4
    grad_clip: float = 5.0
    # architecture distribution
    arch_lr: float = 0.01
    arch_weight_decay: float = 1e-3
    arch_beta1: float = 0.5
    arch_beta2: float = 0.999
    init_sigma: float = 0.15
    arch_adversarial: bool = False
    # constraint
    constrained: bool = True
    rho: float = 0.001
    eta: float = 0.9
    lambda_star: float | None = None
    calibration_epochs: int = 5
    calibration_percentile: float = 25.0
    clamp_dual: bool = True
    scoring: str = "expectation"
    # search space
    n_cells: int = 4
    n_nodes: int = 6
    width: int = 16
    reduction_cells: tuple[int, ...] = (2,)
    # data
    dataset: str = "synthetic"
    data_dim: int = 16
    n_classes: int = 8
    n_train: int = 2048
    n_test: int = 1024
    data_seed: int = 0
    class_separation: float = 4.0
    data_path: str = ""
    # retraining
    retrain_epochs: int = 30
    retrain_lr: float = 0.05
    retrain_batch_size: int = 128
    attack_epsilon: float = 8 / 255
    attack_steps: int = 7
    attack_step_size: float = 2 / 255

    def __post_init__(self):
        object.__setattr__(self, "reduction_cells", tuple(self.reduction_cells))
        if not 0.0 < self.eta < 1.0:
            raise ValueError("eta must lie in (0, 1)")
        if self.rho < 0:
            raise ValueError("rho must be >= 0")
        if self.lambda_star is not None and not self.lambda_star > 0:
            raise ValueError("lambda_star must be positive")

    @classmethod
    def paper(cls, **overrides) -> "SearchConfig":
        """Paper-scale schedule: 8 cells (2 reduction), 6 nodes, 50 epochs."""
        base = dict(epochs=50, batch_size=128, w_lr=0.1, arch_lr=6e-4, n_cells=8,
                    reduction_cells=(2, 5), n_nodes=6, rho=0.001, eta=0.9)
        base.update(overrides)
        return cls(**base)

    def unconstrained(self) -> "SearchConfig":
        return dataclasses.replace(self, constrained=False)

    def train_attack(self) -> AttackConfig:
        return AttackConfig(kind="pgd", epsilon=self.attack_epsilon, steps=self.attack_steps,
                            step_size=self.attack_step_size, seed=self.seed)


def supernet_spec(cfg: SearchConfig, input_dim: int | None = None, n_classes: int | None = None) -> SupernetSpec:
    return SupernetSpec(n_cells=cfg.n_cells, n_nodes=cfg.n_nodes, width=cfg.width,
                        input_dim=input_dim or cfg.data_dim, n_classes=n_classes or cfg.n_classes,
                        reduction_cells=cfg.reduction_cells)


def build_dataset(cfg: SearchConfig) -> Dataset:
    return load_dataset(DatasetSpec(kind=cfg.dataset, D=cfg.data_dim, M=cfg.n_classes, n_train=cfg.n_train,
                                    n_test=cfg.n_test, seed=cfg.data_seed,
                                    class_separation=cfg.class_separation, path=cfg.data_path))


@dataclass
class AdmmState:
    theta: float = 0.0
    rho: float = 0.001


class NonFiniteLoss(FloatingPointError):
    """Raised when a loss or constraint value stops being finite."""


def constraint_value(bound, eta: float, lambda_star: float):
    """``c = mu + Phi^{-1}(eta) * var - ln(lambda_star)``; ``c <= 0`` is feasible.

    ``bound`` is a :class:`LogNormalParams` (returns a float) or a graph pair
    ``(mu, var)`` (returns a tensor). The zero bound gives ``-inf``.
    """
    q = normal_quantile(eta)
    if bound is None:
        return -math.inf
    if isinstance(bound, LogNormalParams):
        if bound.mu == -math.inf:
            return -math.inf
        return bound.mu + q * bound.var - math.log(lambda_star)
    mu, var = bound
    return mu + dg.scale(var, q) - math.log(lambda_star)


def augmented_lagrangian(ce, c, state: AdmmState):
    """``ce + theta * c + (rho / 2) * c**2``, in the graph when inputs are tensors."""
    if isinstance(c, dg.Tensor) or isinstance(ce, dg.Tensor):
        c = dg.constant(c)
        return ce + dg.scale(c, state.theta) + dg.scale(c * c, 0.5 * state.rho)
    return ce + state.theta * c + 0.5 * state.rho * c * c


def dual_step(state: AdmmState, c: float, clamp: bool = True) -> AdmmState:
    theta = state.theta + state.rho * c
    if clamp:
        theta = max(0.0, theta)
    return AdmmState(theta, state.rho)


def _onehot(y, m):
    return np.eye(m)[y]


class SearchRun:
    """Mutable state of one search: model, distribution, optimisers, RNG."""

    def __init__(self, cfg: SearchConfig, data: Dataset | None = None, lambda_star: float | None = None):
        self.cfg = cfg
        self.data = data if data is not None else build_dataset(cfg)
        self.spec = supernet_spec(cfg, self.data.input_dim, self.data.n_classes)
        self.net = Supernet(self.spec, seed=cfg.seed)
        self.dist = ArchDistribution.initial(self.spec, sigma=cfg.init_sigma)
        self.w_opt = SGD(self.net.parameters(), cfg.w_lr, cfg.w_momentum, cfg.w_weight_decay)
        self.a_opt = Adam(self.dist.parameters(), cfg.arch_lr, (cfg.arch_beta1, cfg.arch_beta2),
                          weight_decay=cfg.arch_weight_decay)
        self.admm = AdmmState(0.0, cfg.rho if cfg.constrained else 0.0)
        self.rng = np.random.default_rng([cfg.seed, 1])
        self.weight_idx, self.arch_idx = split_halves(len(self.data.x_train), cfg.seed)
        self.epoch = 0
        self.history: list[dict] = []
        self.lambda_star = lambda_star if lambda_star is not None else cfg.lambda_star
        self.observed_bounds: list[float] = []

    # -- single steps --------------------------------------------------

    def weight_step(self, xb: np.ndarray, yb: np.ndarray) -> float:
        """One SGD step on the cross-entropy under a fresh architecture sample."""
        sample = sample_arch(self.spec, self.dist, self.rng)
        alphas, betas = self.net.arch_tensors(sample)
        params = self.net.parameters()
        logits = self.net(xb, alphas, betas)
        loss = dg.softmax_cross_entropy(logits, _onehot(yb, self.spec.n_classes))
        if not math.isfinite(loss.item()):
            raise NonFiniteLoss(f"weight loss is {loss.item()}")
        dg.zero_grads(params)
        dg.backward(loss)
        if self.cfg.grad_clip:
            clip_grad_norm(params, self.cfg.grad_clip)
        self.w_opt.step()
        return loss.item()

    def bound(self):
        """Current ``(lambdas, C)`` from the supernet weights."""
        with np.errstate(over="ignore", invalid="ignore"):
            lam, C = self.net.lambdas(), self.net.constant_C()
        if not (np.all(np.isfinite(lam)) and math.isfinite(C) and C > 0):
            raise NonFiniteLoss(f"Lipschitz constants are degenerate (C={C})")
        return lam, C

    def arch_step(self, xb: np.ndarray, yb: np.ndarray) -> dict:
        """One Adam step on the augmented Lagrangian w.r.t. the distribution.

        Both the mean and the log-sigma gradients are taken at the pre-step
        point, i.e. each update sees the other's old value.
        """
        lam, C = self.bound()
        sample = sample_arch(self.spec, self.dist, self.rng)
        self.observed_bounds.append(sampled_bound(self.spec, sample, lam, C))
        if self.cfg.arch_adversarial:
            frozen = self.net.arch_tensors(sample)
            model = lambda x: self.net(x, *frozen)
            xb = run_attack(model, xb, yb, self.cfg.train_attack(), self.rng)
        alphas, betas = self.net.arch_tensors(sample, self.dist)
        logits = self.net(xb, alphas, betas)
        ce = dg.softmax_cross_entropy(logits, _onehot(yb, self.spec.n_classes))
        loss = ce
        c_val = math.nan
        if self.cfg.constrained:
            graph = network_bound_graph(self.spec, self.dist, lam, C)
            if graph is not None:
                c = constraint_value(graph, self.cfg.eta, self.lambda_star)
                c_val = c.item()
                loss = augmented_lagrangian(ce, c, self.admm)
        if not math.isfinite(loss.item()):
            raise NonFiniteLoss(f"architecture loss is {loss.item()}")
        params = self.dist.parameters()
        dg.zero_grads(params)
        dg.backward(loss)
        self.a_opt.step()
        return {"ce": ce.item(), "c": c_val}

    def bound_dist(self) -> LogNormalParams:
        from .supernet import network_bound_dist

        lam, C = self.bound()
        return network_bound_dist(self.spec, self.dist, lam, C)

    # -- epochs --------------------------------------------------------

    def run_epoch(self) -> dict:
        cfg = self.cfg
        bs = cfg.batch_size
        w_perm = self.rng.permutation(self.weight_idx)
        a_perm = self.rng.permutation(self.arch_idx)
        n_batches = min(len(w_perm), len(a_perm)) // bs
        x, y = self.data.x_train, self.data.y_train
        ces = []
        for b in range(n_batches):
            wi = w_perm[b * bs: (b + 1) * bs]
            ai = a_perm[b * bs: (b + 1) * bs]
            ces.append(self.weight_step(x[wi], y[wi]))
            self.arch_step(x[ai], y[ai])
        bound = self.bound_dist()
        c = constraint_value(bound, cfg.eta, self.lambda_star)
        if cfg.constrained:
            self.admm = dual_step(self.admm, c, cfg.clamp_dual)
        self.epoch += 1
        row = {
            "epoch": self.epoch,
            "ce": float(np.mean(ces)) if ces else math.nan,
            "c": float(c),
            "theta": float(self.admm.theta),
            "mu": float(bound.mu),
            "var": float(bound.var),
            "prob_bound_le_lambda": ln_cdf(bound, self.lambda_star),
        }
        if not all(math.isfinite(row[k]) for k in ("c", "theta", "mu", "var")) or (ces and not math.isfinite(row["ce"])):
            raise NonFiniteLoss(f"non-finite history row {row}")
        self.history.append(row)
        log.info("epoch %d ce=%.4f c=%.4f theta=%.5f mu=%.4f var=%.5f pr=%.3f", *[row[k] for k in HISTORY_COLUMNS])
        return row

    def genotype(self) -> Genotype:
        meta = {"seed": self.cfg.seed, "spec_hash": self.spec.digest(),
                "cell_types": [self.spec.cell_type(k) for k in range(self.spec.n_cells)],
                "widths": {"input": self.spec.input_dim, "node": self.spec.width,
                           "classes": self.spec.n_classes}}
        return discretize(self.spec, self.dist, scoring=self.cfg.scoring, confidence=self.cfg.eta, meta=meta)

    # -- checkpoints ---------------------------------------------------

    def save(self, path) -> None:
        arrays = {f"w/{n}": v for n, v in self.net.state().items()}
        arrays.update({f"arch/{n}": p.value for n, p in self.dist.named().items()})
        arrays.update({f"sgd/{i}": b for i, b in enumerate(self.w_opt.state())})
        t, m, v = self.a_opt.state()
        arrays.update({f"adam_m/{i}": a for i, a in enumerate(m)})
        arrays.update({f"adam_v/{i}": a for i, a in enumerate(v)})
        meta = {
            "kind": "search",
            "epoch": self.epoch,
            "theta": self.admm.theta,
            "rho": self.admm.rho,
            "lambda_star": self.lambda_star,
            "adam_t": t,
            "rng": rng_state(self.rng),
            "history": self.history,
            "config": _config_dict(self.cfg),
            "spec": self.spec.to_dict(),
        }
        save_checkpoint(path, arrays, meta)

    @classmethod
    def load(cls, path, data: Dataset | None = None) -> "SearchRun":
        arrays, meta = load_checkpoint(path)
        if meta["kind"] != "search":
            raise ValueError(f"{path} is a {meta['kind']} checkpoint, not a search checkpoint")
        cfg = SearchConfig(**{k: tuple(v) if isinstance(v, list) else v for k, v in meta["config"].items()})
        run = cls(cfg, data, lambda_star=meta["lambda_star"])
        run.net.load_weights({n[2:]: a for n, a in arrays.items() if n.startswith("w/")})
        run.dist = ArchDistribution.from_arrays({n[5:]: a for n, a in arrays.items() if n.startswith("arch/")})
        run.w_opt = SGD(run.net.parameters(), cfg.w_lr, cfg.w_momentum, cfg.w_weight_decay)
        run.w_opt.load([arrays[f"sgd/{i}"] for i in range(len(run.w_opt.params))])
        run.a_opt = Adam(run.dist.parameters(), cfg.arch_lr, (cfg.arch_beta1, cfg.arch_beta2),
                         weight_decay=cfg.arch_weight_decay)
        n = len(run.a_opt.params)
        run.a_opt.load(meta["adam_t"], [arrays[f"adam_m/{i}"] for i in range(n)],
                       [arrays[f"adam_v/{i}"] for i in range(n)])
        run.admm = AdmmState(meta["theta"], meta["rho"])
        run.rng = rng_from_state(meta["rng"])
        run.epoch = meta["epoch"]
        run.history = [dict(r) for r in meta["history"]]
        return run


def _config_dict(cfg: SearchConfig) -> dict:
    d = dataclasses.asdict(cfg)
    d["reduction_cells"] = list(cfg.reduction_cells)
    return d


def calibrate_lambda_star(cfg: SearchConfig, data: Dataset | None = None) -> float:
    """Percentile of sampled bounds seen during a short unconstrained run."""
    probe = dataclasses.replace(cfg, constrained=False, lambda_star=1.0)
    run = SearchRun(probe, data, lambda_star=1.0)
    for _ in range(cfg.calibration_epochs):
        run.run_epoch()
    return float(np.percentile(run.observed_bounds, cfg.calibration_percentile))


def search_loop(cfg: SearchConfig, out_dir=None, data: Dataset | None = None,
                resume: str | Path | None = None, stop_after: int | None = None):
    """Run a full search; returns ``(genotype, history, run)``.

    With ``out_dir`` a checkpoint is written after every epoch
    (``checkpoint.npz``) along with ``history.csv`` and ``genotype.json``.
    ``stop_after`` ends the loop early after that many total epochs, which
    together with ``resume`` allows split runs.
    """
    from .dataio import save_genotype

    out = Path(out_dir) if out_dir is not None else None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
    if resume is not None:
        run = SearchRun.load(resume, data)
    else:
        lam_star = cfg.lambda_star if cfg.lambda_star is not None else calibrate_lambda_star(cfg, data)
        run = SearchRun(cfg, data, lambda_star=lam_star)
    last = run.cfg.epochs if stop_after is None else min(stop_after, run.cfg.epochs)
    while run.epoch < last:
        try:
            run.run_epoch()
        except NonFiniteLoss:
            if out is not None:
                run.save(out / "diagnostic.npz")
            raise
        if out is not None:
            run.save(out / "checkpoint.npz")
            write_csv(out / "history.csv", HISTORY_COLUMNS, run.history)
    genotype = run.genotype()
    if out is not None:
        save_genotype(out / "genotype.json", genotype)
        write_csv(out / "history.csv", HISTORY_COLUMNS, run.history)
    return genotype, run.history, run


class DiscreteModel:
    """Callable wrapper around a genotype-restricted network."""

    def __init__(self, net: Supernet):
        self.net = net

    def __call__(self, x):
        return self.net(x)

    def parameters(self):
        return self.net.parameters()


def save_model(path, model: DiscreteModel, genotype: Genotype, cfg: SearchConfig,
               epoch: int, adversarial: bool) -> None:
    """Write a retrained network with everything needed to rebuild it."""
    from .dataio import genotype_to_dict

    meta = {"kind": "model", "epoch": epoch, "adversarial": adversarial,
            "genotype": genotype_to_dict(genotype), "config": _config_dict(cfg),
            "spec": model.net.spec.to_dict()}
    save_checkpoint(path, model.net.state(), meta)


def load_model(path) -> tuple[DiscreteModel, dict]:
    """Inverse of :func:`save_model`; returns ``(model, meta)``."""
    from .dataio import genotype_from_dict

    arrays, meta = load_checkpoint(path)
    if meta["kind"] != "model":
        raise ValueError(f"{path} is a {meta['kind']} checkpoint, not a model")
    spec = SupernetSpec(**meta["spec"])
    genotype = genotype_from_dict(meta["genotype"])
    net = Supernet(spec, seed=meta["config"]["seed"], genotype=genotype, weights=arrays)
    return DiscreteModel(net), meta


def retrain(genotype: Genotype, cfg: SearchConfig, adversarial: bool = False,
            data: Dataset | None = None, epochs: int | None = None,
            on_epoch: Callable[[dict], None] | None = None):
    """Train the discrete network from scratch on the full training set.

    The SGD rate follows a cosine decay from ``cfg.retrain_lr`` over the run.

    Returns ``(model, curve)`` where ``curve`` holds one row per epoch.
    """
    data = data if data is not None else build_dataset(cfg)
    spec = supernet_spec(cfg, data.input_dim, data.n_classes)
    net = Supernet(spec, seed=cfg.seed, genotype=genotype)
    model = DiscreteModel(net)
    params = net.parameters()
    opt = SGD(params, cfg.retrain_lr, cfg.w_momentum, cfg.w_weight_decay)
    rng = np.random.default_rng([cfg.seed, 2])
    attack = cfg.train_attack()
    bs = cfg.retrain_batch_size
    curve = []
    total = cfg.retrain_epochs if epochs is None else epochs
    for epoch in range(total):
        opt.lr = cosine_lr(cfg.retrain_lr, epoch, total)
        perm = rng.permutation(len(data.x_train))
        losses = []
        for b in range(len(perm) // bs):
            idx = perm[b * bs: (b + 1) * bs]
            xb, yb = data.x_train[idx], data.y_train[idx]
            if adversarial:
                loss = adv_train_step(model, xb, yb, attack, rng)
            else:
                loss = dg.softmax_cross_entropy(model(xb), _onehot(yb, spec.n_classes))
            if not math.isfinite(loss.item()):
                raise NonFiniteLoss(f"retrain loss is {loss.item()}")
            dg.zero_grads(params)
            dg.backward(loss)
            if cfg.grad_clip:
                clip_grad_norm(params, cfg.grad_clip)
            opt.step()
            losses.append(loss.item())
        row = {"epoch": epoch + 1, "loss": float(np.mean(losses)),
               "clean_acc": accuracy(model, data.x_test, data.y_test)}
        curve.append(row)
        if on_epoch is not None:
            on_epoch(row)
    return model, curve
