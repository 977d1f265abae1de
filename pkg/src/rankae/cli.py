"""Command-line entry point: ``rankae synth|train|eval|verify``.

Every command that is not given explicit output paths writes into a fresh run
directory ``<root>/<command>-<UTC timestamp>-seed<seed>`` and leaves a
``manifest.json`` describing what it produced. The root is ``--out-dir``,
else ``$RANKAE_OUT_DIR``, else ``./runs``.
"""
from __future__ import annotations

import argparse
import dataclasses
import itertools
import json
import os
import sys
from datetime import datetime, timezone
from pathlib import Path

import numpy as np

from . import __version__, checks
from .data import (Dataset, StiefelSpec, load_csv, make_split, sample_stiefel, save_csv,
                   stiefel_mixture, toy_halfplane)
from .errors import DomainError
from .evaluate import (KNN_SWEEP, MTC_BETAS, MtcConfig, knn_sweep, mtc_accuracy, stiefel_metrics,
                       train_mtc, write_metrics_csv)
from .net import build_autoencoder, encode, load_net, net_from_dict, save_net
from .trainer import METHODS, ConfigError, TrainConfig, TrainState, run_rounds, start_state

OUT_ENV = "RANKAE_OUT_DIR"


class CliError(Exception):
    """A user-facing failure; the message is printed and the exit status is 2."""


def _now() -> str:
    return datetime.now(timezone.utc).strftime("%Y-%m-%dT%H:%M:%SZ")


@dataclasses.dataclass
class RunManifest:
    command: str
    argv: list
    config: dict
    seeds: dict
    artifacts: list = dataclasses.field(default_factory=list)
    version: str = __version__
    started: str = dataclasses.field(default_factory=_now)
    finished: str = ""
    status: str = "running"

    def add(self, *paths) -> None:
        for p in paths:
            p = str(p)
            if p not in self.artifacts:
                self.artifacts.append(p)

    def write(self, run_dir: Path, status: str) -> Path:
        self.finished = _now()
        self.status = status
        missing = [p for p in self.artifacts if not (run_dir / p).exists() and not Path(p).exists()]
        if missing:
            raise CliError(f"manifest lists missing files: {missing}")
        path = run_dir / "manifest.json"
        path.write_text(json.dumps(dataclasses.asdict(self), indent=1) + "\n", encoding="utf-8")
        return path


def _run_dir(args, command: str, seed) -> Path:
    root = Path(args.out_dir or os.environ.get(OUT_ENV) or "runs")
    stamp = datetime.now(timezone.utc).strftime("%Y%m%dT%H%M%SZ")
    base = root / f"{command}-{stamp}-seed{seed}"
    path, i = base, 1
    while path.exists():
        path = base.with_name(f"{base.name}-{i}")
        i += 1
    path.mkdir(parents=True)
    return path


def _rel(run_dir: Path, paths) -> list[str]:
    out = []
    for p in paths:
        p = Path(p)
        try:
            out.append(str(p.relative_to(run_dir)))
        except ValueError:
            out.append(str(p))
    return out


# ---------------------------------------------------------------- synth

def cmd_synth(args) -> int:
    if args.kind == "stiefel":
        spec = StiefelSpec(args.n1, args.n2, args.n, args.delta, args.seed)
        clean, noisy = sample_stiefel(spec)
        meta = {"generator": "stiefel", **dataclasses.asdict(spec)}
        datasets = {"": noisy, ".clean": clean} if args.with_clean else {"": noisy}
    elif args.kind == "mixture":
        spec = StiefelSpec(args.n1, args.n2, args.n, args.delta, args.seed)
        ds = stiefel_mixture(spec, shifts=(0.0, args.shift))
        meta = {"generator": "stiefel-mixture", "shift": args.shift, **dataclasses.asdict(spec)}
        datasets = {"": ds}
    else:
        datasets = {"": toy_halfplane(args.n, args.seed)}
        meta = {"generator": "toy-halfplane", "N": args.n, "seed": args.seed}

    run_dir = None
    if args.out:
        target = Path(args.out)
        target.parent.mkdir(parents=True, exist_ok=True)
    else:
        run_dir = _run_dir(args, "synth", args.seed)
        target = run_dir / f"{args.kind}.csv"
    written = []
    for suffix, ds in datasets.items():
        path = target.with_name(target.stem + suffix + target.suffix) if suffix else target
        written += save_csv(ds, path, meta)
    for p in written:
        print(p)
    if run_dir is not None:
        m = RunManifest("synth", sys.argv[1:], meta, {"data": args.seed})
        m.add(*_rel(run_dir, written))
        m.write(run_dir, "ok")
    return 0


# ---------------------------------------------------------------- train

def _load_dataset(args) -> Dataset:
    path = Path(args.data)
    if not path.exists():
        raise CliError(f"dataset {path} does not exist")
    return load_csv(path, label_column=args.label_column, header=args.header)


TRAIN_FLAGS = {
    "method": None, "kappa": "curvature_mode", "k": "k", "lam": "lam", "gamma": "gamma",
    "sigma": "sigma", "rounds": "T", "M": "M", "m": "m", "alpha": "alpha", "beta1": "beta1",
    "beta2": "beta2", "seed": "seed", "inner_max_epochs": "inner_max_epochs",
    "inner_tol": "inner_tol", "steps_per_epoch": "steps_per_epoch",
}


def _train_config(args) -> TrainConfig:
    base = TrainConfig()
    if args.config:
        if not Path(args.config).exists():
            raise CliError(f"config file {args.config} does not exist")
        base = TrainConfig.from_file(args.config, base)
    items = {}
    for flag, key in TRAIN_FLAGS.items():
        value = getattr(args, flag, None)
        if key is not None and value is not None:
            items[key] = str(value)
    if args.kappa1_normalized:
        items["kappa1_normalized"] = "true"
    return TrainConfig.parse_items(items, base)


def _architecture(args, n, k, method):
    hidden = args.hidden if args.hidden is not None else 4 * n
    code = args.code_dim if args.code_dim is not None else (4 * n if method == "as" else k)
    return build_autoencoder(n, code, (hidden,), seed=args.net_seed)


def _parse_grid(text) -> dict:
    grid = {}
    for part in text.replace(" ", ";").split(";"):
        if not part.strip():
            continue
        if "=" not in part:
            raise CliError(f"grid entry {part!r} is not key=v1,v2,...")
        key, values = part.split("=", 1)
        grid[key.strip()] = [v for v in values.split(",") if v]
    if not grid:
        raise CliError("empty --grid")
    return grid


def _train_one(dataset, config, method, net, run_dir, resume=None, checkpoint_every=1):
    state_path = run_dir / "state.json"
    if resume is not None:
        state = resume
    else:
        state = start_state(dataset, net, config, method)

    def save(s):
        if checkpoint_every and s.rounds_done % checkpoint_every == 0:
            s.save(state_path)

    state = run_rounds(dataset, state, on_round=save)
    state.save(state_path)
    save_net(state.net, run_dir / "net.json")
    (run_dir / "config.txt").write_text(state.config.to_text(), encoding="utf-8")
    files = state.report.write(run_dir)
    return state, [state_path, run_dir / "net.json", run_dir / "config.txt", *files]


def cmd_train(args) -> int:
    dataset = _load_dataset(args)
    if args.resume:
        state = TrainState.load(args.resume)
        if args.rounds is not None:
            state = dataclasses.replace(state, config=state.config.replace(T=args.rounds))
        config, method = state.config, state.method
    else:
        state = None
        config = _train_config(args)
        method = args.method or "as"
    if method not in METHODS:
        raise CliError(f"--method must be one of {METHODS}")
    n = dataset.dim
    if args.resume and args.grid:
        raise CliError("--grid cannot be combined with --resume")
    grid = _parse_grid(args.grid) if args.grid else None
    cells = [{}]
    if grid:
        keys = list(grid)
        cells = [dict(zip(keys, combo)) for combo in itertools.product(*(grid[k] for k in keys))]
    # validate every configuration before any compute
    configs, problems = [], []
    for cell in cells:
        try:
            cfg = TrainConfig.parse_items(cell, config) if cell else config
        except ConfigError as e:
            problems += e.problems
            continue
        net = state.net if state else _architecture(args, n, cfg.k, method)
        problems += cfg.problems(len(dataset.part("train")), net.n, net.code_dim)
        configs.append((cell, cfg, net))
    if problems:
        raise ConfigError(sorted(set(problems)))

    run_dir = _run_dir(args, "train", config.seed)
    manifest = RunManifest("train", sys.argv[1:], config.to_dict(), {"train": config.seed, "net": args.net_seed})
    grid_rows = []
    for i, (cell, cfg, net) in enumerate(configs):
        cell_dir = run_dir if not grid else run_dir / f"cell{i:03d}"
        cell_dir.mkdir(exist_ok=True)
        st, files = _train_one(dataset, cfg, method, net, cell_dir, state, args.checkpoint_every)
        manifest.add(*_rel(run_dir, files))
        rep = st.report
        line = (f"{method} rounds={rep.rounds} objective={rep.objective_after[-1]:.6g} "
                f"excess_rank_ratio={rep.excess_rank_ratio(cfg.k):.4g}")
        print((f"[{cell}] " if cell else "") + line)
        if grid:
            row = dict(cell)
            row.update({"objective": rep.objective_after[-1], "excess_rank_ratio": rep.excess_rank_ratio(cfg.k)})
            if dataset.labels is not None:
                part = dataset.part("train")
                row["knn1_accuracy"] = knn_sweep(encode(st.net, part.points), part.labels, ks=[1])[1]
            grid_rows.append(row)
    if grid:
        manifest.add(_rel(run_dir, [write_metrics_csv(run_dir / "grid.csv", grid_rows)])[0])
    manifest.write(run_dir, "ok")
    print(run_dir)
    return 0


# ---------------------------------------------------------------- eval

def _load_model(path):
    path = Path(path)
    if not path.exists():
        raise CliError(f"checkpoint {path} does not exist")
    d = json.loads(path.read_text())
    if d.get("format") == "rankae-train-state/1":
        return net_from_dict(d["net"]), d["config"].get("k")
    return load_net(path), None


def cmd_eval(args) -> int:
    net, ckpt_k = _load_model(args.checkpoint)
    if not (args.stiefel or args.knn or args.mtc):
        raise CliError("choose at least one of --stiefel, --knn, --mtc")
    dataset = _load_dataset(args) if args.data else None
    if (args.knn or args.mtc) and (dataset is None or dataset.labels is None):
        raise CliError("--knn and --mtc need --data with a --label-column")
    run_dir = _run_dir(args, "eval", args.seed)
    name = Path(args.data).stem if args.data else "synthetic"
    rows = []
    if args.stiefel:
        try:
            n1, n2, delta = args.stiefel.split(",")
            spec = StiefelSpec(int(n1), int(n2), 1, float(delta), args.seed)
        except ValueError:
            raise CliError("--stiefel expects n1,n2,delta") from None
        m = stiefel_metrics(net, spec, args.eval_samples, args.seed)
        rows.append({"dataset": f"stiefel({n1},{n2})", "method": args.label, "metric": "stiefel", **m.as_row()})
        print(f"e1={m.e1:.6g} e2={m.e2:.6g} one_i={m.one_i:.6g} zero_i={m.zero_i:.6g}")
    if args.knn or args.mtc:
        if dataset.split is None and args.test_fraction > 0:
            dataset = make_split(dataset, (1 - args.test_fraction, 0.0, args.test_fraction), args.seed)
        train, test = dataset.part("train"), dataset.part("test")
        same = dataset.split is None or len(test) == 0
    if args.knn:
        enc_train = encode(net, train.points)
        acc = (knn_sweep(enc_train, train.labels) if same else
               knn_sweep(enc_train, train.labels, encode(net, test.points), test.labels))
        for k in KNN_SWEEP:
            rows.append({"dataset": name, "method": args.label, "metric": "knn", "K": k, "accuracy": acc[k]})
        print("knn " + " ".join(f"K={k}:{acc[k]:.4f}" for k in KNN_SWEEP))
    if args.mtc:
        k = args.k or ckpt_k
        if not k:
            raise CliError("--mtc needs --k (the tangent dimension)")
        cfg = MtcConfig(max_epochs=args.mtc_epochs, seed=args.seed)
        for beta in args.betas:
            model = train_mtc(net, train, beta, k, cfg)
            acc = mtc_accuracy(model, train if same else test)
            rows.append({"dataset": name, "method": args.label, "metric": "mtc", "beta": beta,
                         "accuracy": acc, "train_accuracy": mtc_accuracy(model, train),
                         "skipped_bases": model.skipped_bases})
            print(f"mtc beta={beta}: accuracy {acc:.4f}")
    out = write_metrics_csv(run_dir / "metrics.csv", rows)
    manifest = RunManifest("eval", sys.argv[1:], vars(args) | {"func": None}, {"eval": args.seed})
    manifest.add(out.name)
    manifest.write(run_dir, "ok")
    print(run_dir)
    return 0


# ---------------------------------------------------------------- verify

def cmd_verify(args) -> int:
    rows_extra = None
    if args.what == "sphere":
        found, q = checks.sphere_checks(args.n, args.radius)
        from .geometry import default_scales
        rows_extra = checks.quotient_rows(q, default_scales())
    elif args.what == "gradients":
        found = checks.gradient_checks(args.seed, args.nets)
    elif args.what == "eckart-young":
        found = checks.eckart_young_checks(args.trials, args.seed)
    else:
        net = _load_model(args.checkpoint)[0] if args.checkpoint else None
        found = checks.curvature_bound_checks(args.seed, args.pairs, net=net)
    for c in found:
        print(c.describe())
    ok = all(c.passed for c in found)
    if not args.no_files:
        run_dir = _run_dir(args, "verify", args.seed)
        manifest = RunManifest("verify", sys.argv[1:], {"what": args.what}, {"verify": args.seed})
        manifest.add(write_metrics_csv(run_dir / "checks.csv", [c.as_row() for c in found]).name)
        if rows_extra is not None:
            manifest.add(write_metrics_csv(run_dir / "quotients.csv", rows_extra).name)
        manifest.write(run_dir, "ok" if ok else "failed")
        print(run_dir)
    print(f"{sum(c.passed for c in found)}/{len(found)} checks passed")
    return 0 if ok else 1


# ---------------------------------------------------------------- parser

def _floats(text):
    return [float(v) for v in text.split(",") if v]


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="rankae", description=__doc__.splitlines()[0])
    p.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    p.add_argument("--out-dir", help=f"root for run directories (default ${OUT_ENV} or ./runs)")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("synth", help="generate a synthetic dataset")
    s.add_argument("kind", choices=["stiefel", "mixture", "toy"])
    s.add_argument("--n1", type=int, default=4)
    s.add_argument("--n2", type=int, default=2)
    s.add_argument("--n", type=int, default=1000, help="number of points")
    s.add_argument("--delta", type=float, default=0.05, help="noise standard deviation")
    s.add_argument("--shift", type=float, default=2.0, help="mixture: offset of the second copy")
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--with-clean", action="store_true", help="stiefel: also write the noise-free points")
    s.add_argument("--out", help="output CSV (default: inside a new run directory)")
    s.set_defaults(func=cmd_synth)

    t = sub.add_parser("train", help="train an autoencoder")
    t.add_argument("--data", required=True)
    t.add_argument("--label-column", type=int)
    t.add_argument("--header", action="store_true")
    t.add_argument("--config", help="key = value file with TrainConfig fields")
    t.add_argument("--method", choices=METHODS)
    t.add_argument("--kappa", choices=["0", "1", "2"])
    t.add_argument("--k", type=int)
    t.add_argument("--lambda", dest="lam", type=float)
    t.add_argument("--gamma", type=float)
    t.add_argument("--sigma", type=float)
    t.add_argument("--rounds", type=int, help="outer rounds T")
    t.add_argument("--M", type=int, help="number of anchor points")
    t.add_argument("--m", type=int, help="batch size")
    t.add_argument("--alpha", type=float)
    t.add_argument("--beta1", type=float)
    t.add_argument("--beta2", type=float)
    t.add_argument("--seed", type=int)
    t.add_argument("--inner-max-epochs", type=int)
    t.add_argument("--inner-tol", type=float)
    t.add_argument("--steps-per-epoch", type=int)
    t.add_argument("--kappa1-normalized", action="store_true")
    t.add_argument("--hidden", type=int, help="hidden width (default 4n)")
    t.add_argument("--code-dim", type=int, help="code width (default 4n for as, k for caeh)")
    t.add_argument("--net-seed", type=int, default=0)
    t.add_argument("--resume", help="state.json checkpoint to continue from")
    t.add_argument("--checkpoint-every", type=int, default=1, help="rounds between checkpoints (0: only at the end)")
    t.add_argument("--grid", help="sweep, e.g. 'lambda=1,10;gamma=0.1,0.5'")
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("eval", help="evaluate a trained autoencoder")
    e.add_argument("--checkpoint", required=True, help="net.json or state.json")
    e.add_argument("--data")
    e.add_argument("--label-column", type=int)
    e.add_argument("--header", action="store_true")
    e.add_argument("--stiefel", help="n1,n2,delta: Monte-Carlo manifold metrics")
    e.add_argument("--eval-samples", type=int, default=2000)
    e.add_argument("--knn", action="store_true", help="K-NN accuracy on codes for K = 1..19")
    e.add_argument("--mtc", action="store_true", help="tangent classifier accuracy per beta")
    e.add_argument("--betas", type=_floats, default=list(MTC_BETAS))
    e.add_argument("--k", type=int, help="tangent dimension for --mtc (default: from the checkpoint)")
    e.add_argument("--mtc-epochs", type=int, default=50)
    e.add_argument("--test-fraction", type=float, default=0.0,
                   help="hold out this fraction when the data has no split (0: score on the training set)")
    e.add_argument("--label", default="model", help="method name written to the metrics rows")
    e.add_argument("--seed", type=int, default=0)
    e.set_defaults(func=cmd_eval)

    v = sub.add_parser("verify", help="run numerical self-checks")
    v.add_argument("what", choices=["sphere", "gradients", "eckart-young", "curvature-bound"])
    v.add_argument("--n", type=int, default=3, help="sphere: ambient dimension")
    v.add_argument("--radius", type=float, default=1.0)
    v.add_argument("--seed", type=int, default=0)
    v.add_argument("--nets", type=int, default=5)
    v.add_argument("--trials", type=int, default=50)
    v.add_argument("--pairs", type=int, default=5)
    v.add_argument("--checkpoint", help="curvature-bound: use this net instead of random pairs")
    v.add_argument("--no-files", action="store_true", help="print results only")
    v.set_defaults(func=cmd_verify)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except ConfigError as e:
        print("invalid configuration:", file=sys.stderr)
        for problem in e.problems:
            print(f"  - {problem}", file=sys.stderr)
        return 2
    except (CliError, DomainError, OSError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
