"""Alternating minimization: Adam steps over theta, truncated SVD over targets.

Each outer round runs an inner Adam loop on the minibatch objective with the
rank targets held fixed, then replaces every target by the best rank-``k``
approximation of the current Jacobian at its anchor point.
"""
from __future__ import annotations

import csv
import dataclasses
import json
import math
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, NamedTuple

import numpy as np

from .errors import ConvergenceError, DomainError, NonFiniteError
from .linalg import SvdFactors, svd, svd_of_product
from .losses import KAPPA_MODES, RankTargets, caeh_objective, objective_terms
from .net import AutoencoderNet, input_jacobians, jacobian, net_from_dict, net_to_dict

METHODS = ("as", "caeh")


class ConfigError(ValueError):
    def __init__(self, problems):
        super().__init__("invalid training config:\n  " + "\n  ".join(problems))
        self.problems = list(problems)


class TrainingDivergedError(NonFiniteError):
    def __init__(self, snapshot: dict):
        detail = ", ".join(f"{k}={v}" for k, v in snapshot.items())
        super().__init__("training objective", detail)
        self.snapshot = snapshot


@dataclass
class TrainConfig:
    """Hyperparameters of the alternating algorithm.

    Defaults are the full-scale values (``T = M = 1000``, ``m = 20``,
    ``gamma = 0.5``, ``sigma = 0.8``, Adam ``0.001 / 0.9 / 0.999``); desk-scale
    runs override ``T``, ``M`` and the inner-loop budget.
    """

    m: int = 20
    lam: float = 10.0
    gamma: float = 0.5
    sigma: float = 0.8
    alpha: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    T: int = 1000
    M: int = 1000
    k: int = 1
    curvature_mode: str = "kappa1"
    inner_max_epochs: int = 50
    inner_tol: float = 1e-4
    seed: int = 0
    kappa1_normalized: bool = False
    steps_per_epoch: int = 0  # 0 means ceil(N / m)
    window: int = 5
    adam_eps: float = 1e-8

    # config files and CLI flags spell ``lam`` as ``lambda``
    ALIASES = {"lambda": "lam", "kappa": "curvature_mode", "rounds": "T"}

    def problems(self, n_points=None, n=None, code_dim=None) -> list[str]:
        out = []
        if self.m < 1:
            out.append(f"m must be >= 1 (got {self.m})")
        if self.T < 1:
            out.append(f"T must be >= 1 (got {self.T})")
        if self.M < 1:
            out.append(f"M must be >= 1 (got {self.M})")
        if self.k < 0:
            out.append(f"k must be >= 0 (got {self.k})")
        for name in ("beta1", "beta2"):
            v = getattr(self, name)
            if not 0 < v < 1:
                out.append(f"{name} must lie in (0, 1) (got {v})")
        if self.alpha < 0:
            out.append(f"alpha must be >= 0 (got {self.alpha})")
        if self.lam < 0 or self.gamma < 0:
            out.append("lam and gamma must be >= 0")
        if not self.sigma > 0:
            out.append(f"sigma must be > 0 (got {self.sigma})")
        if self.curvature_mode not in KAPPA_MODES:
            out.append(f"curvature_mode must be one of {KAPPA_MODES} (got {self.curvature_mode!r})")
        if self.inner_max_epochs < 1:
            out.append("inner_max_epochs must be >= 1")
        if self.window < 1:
            out.append("window must be >= 1")
        if n_points is not None:
            if self.m > n_points:
                out.append(f"m={self.m} exceeds dataset size {n_points}")
            if self.M > n_points:
                out.append(f"M={self.M} exceeds dataset size {n_points}")
        if n is not None and code_dim is not None and self.k > min(n, code_dim):
            out.append(f"k={self.k} exceeds min(n, d) = {min(n, code_dim)}")
        return out

    def check(self, n_points=None, n=None, code_dim=None) -> "TrainConfig":
        bad = self.problems(n_points, n, code_dim)
        if bad:
            raise ConfigError(bad)
        return self

    def replace(self, **changes) -> "TrainConfig":
        return dataclasses.replace(self, **changes)

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        return cls(**{cls.ALIASES.get(k, k): v for k, v in d.items()})

    @classmethod
    def parse_items(cls, items: dict, base: "TrainConfig | None" = None) -> "TrainConfig":
        """Build a config from string values, e.g. parsed ``key = value`` lines."""
        base = base or cls()
        types = {f.name: f.type for f in dataclasses.fields(cls)}
        changes, bad = {}, []
        for raw_key, raw in items.items():
            key = cls.ALIASES.get(raw_key, raw_key)
            if key not in types:
                bad.append(f"unknown config key {raw_key!r}")
                continue
            kind = types[key]
            try:
                if kind == "bool":
                    if str(raw).lower() not in ("1", "0", "true", "false", "yes", "no"):
                        raise ValueError(raw)
                    value = str(raw).lower() in ("1", "true", "yes")
                elif kind == "int":
                    value = int(raw)
                elif kind == "float":
                    value = float(raw)
                else:
                    value = str(raw)
                    if key == "curvature_mode" and value in ("0", "1", "2"):
                        value = f"kappa{value}"
            except ValueError:
                bad.append(f"{raw_key}: cannot parse {raw!r} as {kind}")
                continue
            changes[key] = value
        if bad:
            raise ConfigError(bad)
        return dataclasses.replace(base, **changes)

    @classmethod
    def from_file(cls, path, base: "TrainConfig | None" = None) -> "TrainConfig":
        items = {}
        for lineno, line in enumerate(Path(path).read_text().splitlines(), 1):
            line = line.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise ConfigError([f"{path}:{lineno}: expected 'key = value'"])
            key, value = (s.strip() for s in line.split("=", 1))
            items[key] = value
        return cls.parse_items(items, base)

    def to_text(self) -> str:
        lines = []
        for f in dataclasses.fields(self):
            key = "lambda" if f.name == "lam" else f.name
            lines.append(f"{key} = {getattr(self, f.name)}")
        return "\n".join(lines) + "\n"


@dataclass
class AdamState:
    first_moment: np.ndarray
    second_moment: np.ndarray
    step_count: int = 0

    @classmethod
    def zeros(cls, size) -> "AdamState":
        return cls(np.zeros(size), np.zeros(size), 0)

    def to_dict(self) -> dict:
        return {"first_moment": self.first_moment.tolist(),
                "second_moment": self.second_moment.tolist(),
                "step_count": self.step_count}

    @classmethod
    def from_dict(cls, d) -> "AdamState":
        return cls(np.array(d["first_moment"], dtype=np.float64),
                   np.array(d["second_moment"], dtype=np.float64), int(d["step_count"]))


def adam_step(theta, grad, state: AdamState, alpha, beta1, beta2, eps=1e-8):
    """One bias-corrected Adam update; returns ``(theta, state)``."""
    t = state.step_count + 1
    m = beta1 * state.first_moment + (1.0 - beta1) * grad
    v = beta2 * state.second_moment + (1.0 - beta2) * grad * grad
    m_hat = m / (1.0 - beta1 ** t)
    v_hat = v / (1.0 - beta2 ** t)
    theta = theta - alpha * m_hat / (np.sqrt(v_hat) + eps)
    return theta, AdamState(m, v, t)


def _train_points(dataset) -> np.ndarray:
    pts = np.asarray(getattr(dataset, "points", dataset), dtype=np.float64)
    split = getattr(dataset, "split", None)
    if split is not None and len(split.train):
        pts = pts[split.train]
    return pts


def anchor_factors(net: AutoencoderNet, points) -> SvdFactors:
    """SVD of the autoencoder Jacobian at each row of ``points``.

    Uses the factored form ``J_d J_e`` when the code space is narrower than
    the input.
    """
    if net.code_dim < net.n:
        pair = input_jacobians(net, points)
        return svd_of_product(pair.j_decoder, pair.j_encoder)
    return svd(jacobian(net, points))


def _rank_step(net, points, anchors, k):
    pts = points[anchors]
    try:
        f = anchor_factors(net, pts)
    except ConvergenceError:
        for j, i in enumerate(anchors):
            try:
                anchor_factors(net, pts[j:j + 1])
            except ConvergenceError as e:
                raise ConvergenceError(f"SVD failed at anchor index {i}", e.iterations) from e
        raise
    b = (f.u[..., :, :k] * f.singular_values[..., None, :k]) @ f.vt[..., :k, :]
    return RankTargets(anchors, b, k), f.singular_values


def update_rank_targets(net: AutoencoderNet, dataset, anchors, k) -> RankTargets:
    """Replace every target by the truncated SVD of the Jacobian at its anchor."""
    anchors = np.asarray(anchors, dtype=np.int64)
    return _rank_step(net, _train_points(dataset), anchors, k)[0]


class InnerResult(NamedTuple):
    net: AutoencoderNet
    adam: AdamState
    epochs_used: int
    epoch_losses: list
    term_means: dict
    guard_hits: int


def window_settled(losses, window, tol) -> bool:
    """True once the last loss is within ``tol`` (relative) of the one ``window`` epochs back."""
    if len(losses) <= window:
        return False
    ref = losses[-1 - window]
    return abs(losses[-1] - ref) <= tol * max(abs(ref), 1e-300)


def _steps_per_epoch(config, n_points):
    return config.steps_per_epoch or math.ceil(n_points / config.m)


def inner_minimize(net: AutoencoderNet, dataset, targets: RankTargets | None, config: TrainConfig,
                   adam: AdamState, rng: np.random.Generator | None = None,
                   method: str = "as") -> InnerResult:
    """Adam on the minibatch objective until the epoch-mean loss settles.

    Stops when the epoch-mean loss changed by less than ``inner_tol``
    (relative) over the last ``window`` epochs, or after ``inner_max_epochs``.
    Every step draws the batch, the noise and the anchor sample from ``rng``
    in that order.
    """
    if method not in METHODS:
        raise DomainError(f"unknown method {method!r}")
    pts = _train_points(dataset)
    n_points, n = pts.shape
    rng = np.random.default_rng(config.seed) if rng is None else rng
    n_anchor = len(targets) if targets is not None else config.M
    anchor_pts = pts[targets.anchor_indices] if targets is not None else None
    steps = _steps_per_epoch(config, n_points)
    theta = net.theta
    epoch_losses, term_means, guard_hits = [], {}, 0
    epoch = 0
    for epoch in range(1, config.inner_max_epochs + 1):
        total, sums = 0.0, {}
        for step in range(steps):
            y = pts[rng.integers(0, n_points, config.m)]
            noise = rng.normal(0.0, config.sigma, size=(config.m, n))
            z = rng.integers(0, n_anchor, config.m)
            cur = net.with_theta(theta)
            if method == "as":
                res = objective_terms(
                    cur, y, targets, lam=config.lam, gamma=config.gamma,
                    mode=config.curvature_mode, noise=noise, anchor_points=anchor_pts,
                    anchor_sample=z, normalized=config.kappa1_normalized, grad=True)
            else:
                res = caeh_objective(cur, y, noise, config.gamma, grad=True)
            if not (np.isfinite(res.value) and np.all(np.isfinite(res.grad))):
                raise TrainingDivergedError({
                    "epoch": epoch, "step": step, "loss": res.value,
                    "theta_norm": float(np.linalg.norm(theta)), **(res.parts or {})})
            total += res.value
            guard_hits += res.guard_hits
            for key, val in res.parts.items():
                sums[key] = sums.get(key, 0.0) + val
            theta, adam = adam_step(theta, res.grad, adam, config.alpha, config.beta1,
                                    config.beta2, config.adam_eps)
        epoch_losses.append(total / steps)
        term_means = {key: val / steps for key, val in sums.items()}
        if window_settled(epoch_losses, config.window, config.inner_tol):
            break
    return InnerResult(net.with_theta(theta), adam, epoch, epoch_losses, term_means, guard_hits)


@dataclass
class TrainReport:
    method: str
    objective_before: list = field(default_factory=list)
    objective_after: list = field(default_factory=list)
    term_traces: dict = field(default_factory=dict)
    epochs_per_round: list = field(default_factory=list)
    anchor_spectra: list = field(default_factory=list)
    wall_clock: list = field(default_factory=list)
    kappa2_guard_hits: int = 0
    anchors: list = field(default_factory=list)
    k: int = 0

    @property
    def rounds(self) -> int:
        return len(self.objective_before)

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        d["anchor_spectra"] = [np.asarray(s).tolist() for s in self.anchor_spectra]
        return d

    @classmethod
    def from_dict(cls, d) -> "TrainReport":
        d = dict(d)
        d["anchor_spectra"] = [np.array(s) for s in d["anchor_spectra"]]
        return cls(**d)

    def deterministic_dict(self) -> dict:
        """Everything except wall-clock timings."""
        d = self.to_dict()
        d.pop("wall_clock")
        return d

    def same_trajectory(self, other: "TrainReport") -> bool:
        return self.deterministic_dict() == other.deterministic_dict()

    def excess_rank_ratio(self, k, round_index=-1) -> float:
        """Mean over anchors of ``sigma_{k+1} / sigma_1`` in the given round."""
        s = np.asarray(self.anchor_spectra[round_index])
        if k >= s.shape[1]:
            return 0.0
        return float(np.mean(s[:, k] / np.where(s[:, 0] > 0, s[:, 0], 1.0)))

    def write(self, directory) -> list[Path]:
        directory = Path(directory)
        directory.mkdir(parents=True, exist_ok=True)
        js = directory / "report.json"
        js.write_text(json.dumps(self.to_dict()) + "\n")
        rows = directory / "rounds.csv"
        terms = sorted(self.term_traces)
        with open(rows, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["round", "objective_before", "objective_after", "epochs", "wall_clock"]
                       + terms + ["excess_rank_ratio"])
            for r in range(self.rounds):
                s = np.asarray(self.anchor_spectra[r])
                tail = s[:, self.k] if self.k < s.shape[1] else np.zeros(len(s))
                ratio = tail / np.where(s[:, 0] > 0, s[:, 0], 1.0)
                w.writerow([r + 1, repr(self.objective_before[r]), repr(self.objective_after[r]),
                            self.epochs_per_round[r], f"{self.wall_clock[r]:.6f}"]
                           + [repr(self.term_traces[t][r]) for t in terms]
                           + [repr(float(ratio.mean()))])
        return [js, rows]


@dataclass
class TrainState:
    """Everything needed to resume a run between outer rounds."""

    config: TrainConfig
    method: str
    net: AutoencoderNet
    adam: AdamState
    targets: RankTargets
    rng_state: dict
    rounds_done: int
    report: TrainReport

    def to_dict(self) -> dict:
        return {
            "format": "rankae-train-state/1",
            "config": self.config.to_dict(),
            "method": self.method,
            "net": net_to_dict(self.net),
            "adam": self.adam.to_dict(),
            "anchors": self.targets.anchor_indices.tolist(),
            "targets": self.targets.matrices.tolist(),
            "k": self.targets.k,
            "rng_state": self.rng_state,
            "rounds_done": self.rounds_done,
            "report": self.report.to_dict(),
        }

    @classmethod
    def from_dict(cls, d) -> "TrainState":
        if d.get("format") != "rankae-train-state/1":
            raise DomainError(f"unrecognized state format {d.get('format')!r}")
        return cls(
            config=TrainConfig.from_dict(d["config"]),
            method=d["method"],
            net=net_from_dict(d["net"]),
            adam=AdamState.from_dict(d["adam"]),
            targets=RankTargets(d["anchors"], np.array(d["targets"], dtype=np.float64), d["k"]),
            rng_state=d["rng_state"],
            rounds_done=int(d["rounds_done"]),
            report=TrainReport.from_dict(d["report"]),
        )

    def save(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_dict()) + "\n")

    @classmethod
    def load(cls, path) -> "TrainState":
        return cls.from_dict(json.loads(Path(path).read_text()))


def _eval_noise(config, shape):
    return np.random.default_rng([config.seed, 1]).normal(0.0, config.sigma, size=shape)


def _full_objective(net, pts, targets, config, noise, method):
    if method == "caeh":
        return caeh_objective(net, pts, noise, config.gamma).value
    return objective_terms(net, pts, targets, lam=config.lam, gamma=config.gamma,
                           mode=config.curvature_mode, noise=noise,
                           anchor_points=pts[targets.anchor_indices],
                           normalized=config.kappa1_normalized).value


def start_state(dataset, net_init: AutoencoderNet, config: TrainConfig, method="as") -> TrainState:
    """Validate, draw the anchors and zero the targets."""
    if method not in METHODS:
        raise DomainError(f"unknown method {method!r}")
    pts = _train_points(dataset)
    config.check(len(pts), net_init.n, net_init.code_dim)
    rng = np.random.default_rng(config.seed)
    anchors = np.sort(rng.choice(len(pts), size=config.M, replace=False))
    targets = RankTargets.zeros(anchors, net_init.n, config.k)
    report = TrainReport(method=method, anchors=anchors.tolist(), k=config.k)
    return TrainState(config, method, net_init, AdamState.zeros(net_init.n_params), targets,
                      rng.bit_generator.state, 0, report)


def run_rounds(dataset, state: TrainState, max_rounds=None,
               on_round: Callable[[TrainState], None] | None = None) -> TrainState:
    """Advance ``state`` by up to ``max_rounds`` outer rounds (default: to ``T``)."""
    config, method = state.config, state.method
    pts = _train_points(dataset)
    rng = np.random.default_rng()
    rng.bit_generator.state = state.rng_state
    eval_noise = _eval_noise(config, pts.shape)
    net, adam, targets, report = state.net, state.adam, state.targets, state.report
    stop = config.T if max_rounds is None else min(config.T, state.rounds_done + max_rounds)
    for t in range(state.rounds_done, stop):
        tic = time.perf_counter()
        inner = inner_minimize(net, pts, targets if method == "as" else None, config, adam,
                               rng, method)
        net, adam = inner.net, inner.adam
        before = _full_objective(net, pts, targets, config, eval_noise, method)
        new_targets, spectra = _rank_step(net, pts, targets.anchor_indices, config.k)
        if method == "as":
            targets = new_targets
        after = _full_objective(net, pts, targets, config, eval_noise, method)
        report.objective_before.append(before)
        report.objective_after.append(after)
        report.epochs_per_round.append(inner.epochs_used)
        for key, val in inner.term_means.items():
            report.term_traces.setdefault(key, []).append(val)
        report.anchor_spectra.append(spectra)
        report.kappa2_guard_hits += inner.guard_hits
        report.wall_clock.append(time.perf_counter() - tic)
        state = TrainState(config, method, net, adam, targets, rng.bit_generator.state, t + 1,
                           report)
        if on_round is not None:
            on_round(state)
    return state


def train(dataset, net_init: AutoencoderNet, config: TrainConfig, method="as",
          resume: TrainState | None = None) -> tuple[AutoencoderNet, TrainReport]:
    """Run the alternating algorithm for ``config.T`` rounds.

    Targets start at zero and the ``M`` anchors are drawn once, uniformly
    without replacement, before the first round.
    """
    state = resume if resume is not None else start_state(dataset, net_init, config, method)
    state = run_rounds(dataset, state)
    return state.net, state.report


def train_cae_h_baseline(dataset, net_init: AutoencoderNet, config: TrainConfig,
                         resume: TrainState | None = None) -> tuple[AutoencoderNet, TrainReport]:
    """Contractive baseline with the same optimizer, rounds and stopping rule.

    The objective is reconstruction plus ``gamma`` times the encoder Jacobian
    norm and its noisy shift; there is no rank term and no target update.
    """
    return train(dataset, net_init, config, method="caeh", resume=resume)
