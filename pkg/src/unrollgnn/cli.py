"""Command-line front end.

Every subcommand reads an optional ``key=value`` config file; flags given
on the command line override config entries.  Outputs go to
``output_dir`` and are written atomically.
"""

from __future__ import annotations

import argparse
import os
import sys
import tempfile
import warnings
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import bilevel, conformance, descent, energy as energy_mod, kge, lp
from .graph import (GraphError, HeteroGraph, LabelSet, build_graph, read_features, read_labels,
                    read_triplets, undirected_pairs)
from .prox import make_prox
from .synthetic import block_kg, planted_corruption, two_cluster


class ConfigError(ValueError):
    pass


def _bool(s: str) -> bool:
    low = s.strip().lower()
    if low in ("true", "1", "yes"):
        return True
    if low in ("false", "0", "no"):
        return False
    raise ValueError(f"not a boolean: {s!r}")


KEYS = {
    "energy": str, "algo": str, "prox": str, "gamma": float, "beta": float, "beta1": float,
    "beta2": float, "eps": float, "layers": int, "backtrack": _bool, "lam": float,
    "lam_trainable": _bool, "fidelity": str, "hidden": int, "dim": int, "epochs": int,
    "lr": float, "optimizer": str, "h0": str, "seed": int, "dataset_dir": str,
    "output_dir": str, "mode": str, "overparam": _bool, "score": str, "negatives": int,
    "triplets": str, "new_triplets": str, "queries": str, "k": int, "fraction": float,
    "truth": str, "trials": int,
}

DEFAULTS = {
    "prox": "auto", "beta": 0.9, "beta1": 0.9, "beta2": 0.999, "eps": 1e-8,
    "backtrack": False, "lam": 1.0, "lam_trainable": False, "fidelity": "quadratic",
    "hidden": 0, "dim": 0, "h0": "pi", "seed": 0, "output_dir": ".",
    "overparam": False, "k": 10, "trials": 3,
}

SUB_DEFAULTS = {
    "train": {"optimizer": "adam"},
    "lp": {"gamma": 0.1, "layers": 50},
    "grmlp": {"gamma": 0.1, "layers": 100},
    "kge-train": {"epochs": 50, "lr": 0.1, "optimizer": "gd", "gamma": 0.5},
    "detect-outliers": {"algo": "gd", "gamma": 0.1, "layers": 100},
}

REQUIRED = {
    "verify": (),
    "unroll": ("energy", "algo", "gamma", "layers"),
    "train": ("energy", "algo", "gamma", "layers", "epochs", "lr"),
    "lp": ("mode",),
    "grmlp": (),
    "kge-train": ("score", "negatives", "layers"),
    "kge-infer": ("new_triplets",),
    "detect-outliers": ("fraction",),
}


def parse_config_text(text: str, source: str = "<config>") -> dict:
    """Parse ``key=value`` lines; unknown keys and bad values are all reported at once."""
    cfg, errors = {}, []
    for lineno, line in enumerate(text.splitlines(), start=1):
        s = line.strip()
        if not s or s.startswith("#"):
            continue
        if "=" not in s:
            errors.append(f"{source}:{lineno}: expected key=value")
            continue
        key, val = (x.strip() for x in s.split("=", 1))
        if key not in KEYS:
            errors.append(f"{source}:{lineno}: unknown key {key!r}")
            continue
        try:
            cfg[key] = KEYS[key](val)
        except ValueError as exc:
            errors.append(f"{source}:{lineno}: bad value for {key}: {exc}")
    if errors:
        raise ConfigError("; ".join(errors))
    return cfg


def load_config(path) -> dict:
    path = Path(path)
    return parse_config_text(path.read_text(encoding="utf-8"), str(path))


def resolve(cfg: dict, subcommand: str) -> dict:
    missing = [k for k in REQUIRED[subcommand] if k not in cfg]
    if missing:
        raise ConfigError("missing required config keys: " + ", ".join(f"{k}=" for k in missing))
    return {**DEFAULTS, **SUB_DEFAULTS.get(subcommand, {}), **cfg}


# ----------------------------------------------------------------------
# files

def atomic_write(path, text: str) -> None:
    """Write to a temp file in the same directory, then rename over ``path``."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.", suffix=".tmp")
    try:
        with os.fdopen(fd, "w", encoding="utf-8", newline="\n") as fh:
            fh.write(text)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def matrix_csv(A: np.ndarray) -> str:
    return "".join(",".join(f"{x:.17g}" for x in row) + "\n" for row in np.atleast_2d(A))


@dataclass
class PlanetoidData:
    graph: HeteroGraph
    X: np.ndarray
    labels: LabelSet
    train: np.ndarray
    val: np.ndarray
    test: np.ndarray


def _read_splits(path, n):
    masks = {k: np.zeros(n, dtype=bool) for k in ("train", "val", "test")}
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            s = line.strip()
            if not s or s.startswith("#"):
                continue
            try:
                v_s, which = (x.strip() for x in s.split(","))
                v = int(v_s)
            except ValueError:
                raise GraphError(f"{path}:{lineno}: expected node_id,train|val|test") from None
            if which not in masks:
                raise GraphError(f"{path}:{lineno}: unknown split {which!r}")
            if not 0 <= v < n:
                raise GraphError(f"{path}:{lineno}: node {v} out of range for n={n}")
            masks[which][v] = True
    return masks["train"], masks["val"], masks["test"]


def load_planetoid_like(directory) -> PlanetoidData:
    """Read ``edges.tsv``, ``features.csv``, ``labels.csv`` and optional ``splits.csv``.

    Edges are treated as undirected; a file listing both directions is
    collapsed to one edge per pair.  Without ``splits.csv`` every labeled
    node is a training node.
    """
    d = Path(directory)
    X = read_features(d / "features.csv")
    n = X.shape[0]
    trip = read_triplets(d / "edges.tsv")
    bad = [t for t in trip if t.src >= n or t.dst >= n]
    if bad:
        raise GraphError(f"{d / 'edges.tsv'}: node {max(bad[0].src, bad[0].dst)} "
                         f"but features.csv has {n} rows")
    g = build_graph(undirected_pairs(trip), n, 1)
    labels = read_labels(d / "labels.csv", n)
    if (d / "splits.csv").exists():
        train, val, test = _read_splits(d / "splits.csv", n)
    else:
        warnings.warn(f"{d / 'splits.csv'} not found; using all labeled nodes for training",
                      stacklevel=2)
        train = labels.mask.copy()
        val = np.zeros(n, dtype=bool)
        test = np.zeros(n, dtype=bool)
    return PlanetoidData(g, X, labels, train, val, test)


def _dataset(cfg) -> PlanetoidData:
    if cfg.get("dataset_dir"):
        return load_planetoid_like(cfg["dataset_dir"])
    ds = two_cluster(seed=cfg["seed"])
    return PlanetoidData(ds.graph, ds.X, ds.labels, ds.train, ds.val, ds.test)


# ----------------------------------------------------------------------
# builders shared by subcommands

def build_energy(cfg, data: PlanetoidData):
    """Energy, features and prox for the node-level energies."""
    name = cfg["energy"]
    rng = np.random.default_rng(cfg["seed"])
    X = data.X
    Ybar = data.labels.restrict(data.train).masked_onehot()
    lam = cfg["lam"]
    prox_name = cfg["prox"]
    if name in ("quadratic", "huber", "logcosh", "heterophily"):
        P = {}
        d = cfg["dim"] or X.shape[1]
        if cfg["dim"] or cfg["hidden"]:
            P = energy_mod.InputModel.init(rng, X.shape[1], d, cfg["hidden"] or None)
        if name == "heterophily":
            P["C"] = np.eye(d)
            e = energy_mod.HeterophilyLinear(P, lam, cfg["fidelity"])
        else:
            e = energy_mod.make_energy(name, params=P, lam=lam)
        feats, Q = X, None
    elif name in ("lp", "grmlp"):
        e = energy_mod.make_energy(name, lam=lam)
        feats = Ybar
        Q = lp.orthonormalize(X).Q if name == "grmlp" else None
    else:
        raise ConfigError(f"energy={name} is not a node-level energy; use kge-train")
    if prox_name == "auto":
        prox_name = e.nonsmooth
    prox = make_prox(prox_name, Ybar=Ybar, mask=data.train, Q=Q)
    return e, feats, prox


def build_algo(cfg, prox) -> descent.DescentAlgorithm:
    return descent.DescentAlgorithm(cfg["algo"], cfg["gamma"], prox, cfg["beta"], cfg["beta1"],
                                    cfg["beta2"], cfg["eps"], cfg["backtrack"])


def _out(cfg, name) -> Path:
    return Path(cfg["output_dir"]) / name


# ----------------------------------------------------------------------
# subcommands; each returns (exit status, summary line)

def cmd_verify(cfg):
    threads = int(os.environ.get("UNROLLGNN_THREADS", "1") or 1)
    workers = (os.cpu_count() or 1) if threads == 0 else threads
    reports = conformance.verify_all(cfg["seed"], cfg["trials"], workers)
    atomic_write(_out(cfg, "verify_report.csv"), conformance.report_text(reports))
    failed = [r.pairing for r in reports if not r.passed]
    ok = not failed
    msg = f"verify: {len(reports)} pairings, {len(failed)} failed"
    if failed:
        msg += " (" + ", ".join(failed) + ")"
    return (0 if ok else 1), msg


def _initial_H(e, feats, cfg):
    if cfg["energy"] in ("lp", "grmlp"):
        return np.array(feats, copy=True)
    return np.asarray(energy_mod.input_model(feats, e.params), dtype=np.float64)


def cmd_unroll(cfg):
    data = _dataset(cfg)
    e, feats, prox = build_energy(cfg, data)
    algo = build_algo(cfg, prox)
    H0 = _initial_H(e, feats, cfg)
    H, traj = descent.unroll(algo, e, data.graph, H0, feats, cfg["layers"])
    atomic_write(_out(cfg, "trace.csv"), traj.to_csv())
    atomic_write(_out(cfg, "embeddings.csv"), matrix_csv(H))
    return 0, f"unroll: {cfg['layers']} steps, final energy {traj.energies[-1]:.17g}"


def cmd_train(cfg):
    data = _dataset(cfg)
    e, feats, prox = build_energy(cfg, data)
    if cfg["energy"] in ("lp", "grmlp"):
        raise ConfigError("train needs an energy with an input model")
    algo = build_algo(cfg, prox)
    d = cfg["dim"] or data.X.shape[1]
    model = bilevel.init_model(e, algo, data.X.shape[1], d, data.labels.num_classes,
                               cfg["layers"], cfg["seed"], cfg["hidden"] or None,
                               cfg["lam_trainable"], cfg["h0"])
    tc = bilevel.TrainConfig(cfg["epochs"], cfg["lr"], cfg["optimizer"], cfg["layers"],
                             cfg["seed"], cfg["lam_trainable"])
    try:
        res = bilevel.train(model, data.graph, data.X, data.labels, data.train, data.val, tc)
        history, status = res.history, 0
    except bilevel.TrainingDiverged as exc:
        history, status = exc.history, 1
    atomic_write(_out(cfg, "metrics.csv"), bilevel.history_csv(history))
    last = history[-1] if history else {"train_loss": float("nan"), "train_acc": float("nan")}
    return status, (f"train: {len(history)} epochs, loss {last['train_loss']:.17g}, "
                    f"train_acc {last['train_acc']:.17g}" + ("" if status == 0 else ", diverged"))


def _accuracy_line(pred, data):
    mask = (data.test if data.test.any() else ~data.train) & data.labels.mask
    if not mask.any():
        return float("nan")
    return float(np.mean(pred[mask] == data.labels.labels[mask]))


def _predictions_csv(pred):
    return "node_id,class_id\n" + "".join(f"{v},{int(c)}\n" for v, c in enumerate(pred))


def cmd_lp(cfg):
    data = _dataset(cfg)
    Ybar = data.labels.restrict(data.train).masked_onehot()
    c = lp.LpConfig(cfg["lam"], cfg["gamma"], cfg["layers"], cfg["mode"])
    res = lp.label_propagate(data.graph, Ybar, data.train, c)
    acc = _accuracy_line(res.pred, data)
    atomic_write(_out(cfg, "predictions.csv"), _predictions_csv(res.pred))
    print(f"accuracy={acc:.17g}")
    return 0, f"lp: mode={cfg['mode']}, {c.L} steps"


def cmd_grmlp(cfg):
    data = _dataset(cfg)
    Ybar = data.labels.restrict(data.train).masked_onehot()
    X = np.eye(data.graph.n) if cfg["overparam"] else data.X
    res = lp.gr_mlp_train(data.graph, X, Ybar, cfg["lam"], cfg["gamma"], cfg["layers"])
    pred = lp.predict(res.H_prox[-1])
    acc = _accuracy_line(pred, data)
    atomic_write(_out(cfg, "predictions.csv"), _predictions_csv(pred))
    gap = max(float(np.max(np.abs(a - b))) for a, b in zip(res.H_weight, res.H_prox))
    print(f"accuracy={acc:.17g}")
    return 0, f"grmlp: rank {res.rank}, weight/prox path gap {gap:.3e}"


def _kge_graph(cfg):
    if cfg.get("triplets"):
        trip = read_triplets(cfg["triplets"])
        n = 1 + max(max(t.src, t.dst) for t in trip)
        m = 1 + max(t.rel for t in trip)
        return build_graph(trip, n, m), trip
    kg = block_kg(seed=cfg["seed"])
    return kg.train_graph(), kg.train


def cmd_kge_train(cfg):
    g, trip = _kge_graph(cfg)
    neg = kge.build_negative_graph(g, cfg["negatives"], cfg["seed"])
    kc = kge.KgeConfig(epochs=cfg["epochs"], lr=cfg["lr"], optimizer=cfg["optimizer"],
                       L=cfg["layers"], gamma=cfg["gamma"], dim=cfg["dim"] or 8,
                       seed=cfg["seed"])
    res = kge.train_kge(neg, cfg["score"], kc)
    H = kge.embed(res.model, neg)
    out = Path(cfg["output_dir"])
    atomic_write(out / "relations.csv", matrix_csv(res.model.E))
    atomic_write(out / "nodes.csv", matrix_csv(H))
    atomic_write(out / "kge_loss.csv", "epoch,loss\n" + "".join(
        f"{i},{v:.17g}\n" for i, v in enumerate(res.history)))
    atomic_write(out / "kge_meta.txt", f"score={cfg['score']}\nnum_rel={g.m}\nlayers={cfg['layers']}\n"
                 f"gamma={kc.gamma:.17g}\n")
    atomic_write(out / "known.tsv", "".join(f"{u}\t{r}\t{v}\n" for u, r, v in trip))
    return 0, f"kge-train: {len(res.history)} epochs, loss {res.history[0]:.17g} -> {res.history[-1]:.17g}"


def cmd_kge_infer(cfg):
    out = Path(cfg["output_dir"])
    meta = dict(line.split("=", 1) for line in (out / "kge_meta.txt").read_text().split())
    E = np.loadtxt(out / "relations.csv", delimiter=",", ndmin=2)
    H_old = np.loadtxt(out / "nodes.csv", delimiter=",", ndmin=2)
    known = read_triplets(out / "known.tsv")
    new = read_triplets(cfg["new_triplets"])
    queries = read_triplets(cfg["queries"]) if cfg.get("queries") else new
    n = max([H_old.shape[0]] + [1 + max(t.src, t.dst) for t in new + queries])
    H = np.zeros((n, H_old.shape[1]))
    H[:H_old.shape[0]] = H_old
    new_nodes = np.arange(H_old.shape[0], n)
    L = cfg.get("layers", int(meta["layers"]))
    res = kge.inductive_infer(H, E, int(meta["num_rel"]), new_nodes, new, queries, L=L,
                              gamma=float(meta["gamma"]), k=cfg["k"], score=meta["score"],
                              known_triplets=known)
    atomic_write(out / "rankings.csv", kge.rankings_csv(res.ranks))
    flag = f", {res.isolated.size} isolated new nodes" if res.isolated.size else ""
    return 0, f"kge-infer: hits@{cfg['k']}={res.hits:.17g} over {len(res.ranks)} queries{flag}"


def cmd_detect_outliers(cfg):
    truth = None
    if cfg.get("dataset_dir"):
        data = load_planetoid_like(cfg["dataset_dir"])
        g, X = data.graph, data.X
    else:
        fx = planted_corruption(seed=cfg["seed"])
        g, X, truth = fx.graph, fx.X, fx.corrupted
    if cfg.get("truth"):
        truth = np.zeros(g.n, dtype=bool)
        ids = [int(s) for s in Path(cfg["truth"]).read_text().split() if not s.startswith("#")]
        truth[ids] = True
    e = energy_mod.HuberFidelity({}, cfg["lam"])
    algo = descent.DescentAlgorithm(cfg["algo"], cfg["gamma"], backtrack=cfg["backtrack"])
    H, _ = descent.unroll(algo, e, g, X, X, cfg["layers"])
    res = bilevel.detect_outliers(H, X, {}, cfg["fraction"], truth)
    atomic_write(_out(cfg, "outliers.csv"), "rank,node_id,residual\n" + "".join(
        f"{i},{v},{res.residuals[v]:.17g}\n" for i, v in enumerate(res.top)))
    ratio = "" if res.detect_ratio is None else f", detect_ratio={res.detect_ratio:.17g}"
    return 0, f"detect-outliers: {res.top.size} flagged{ratio}"


COMMANDS = {
    "verify": cmd_verify, "unroll": cmd_unroll, "train": cmd_train, "lp": cmd_lp,
    "grmlp": cmd_grmlp, "kge-train": cmd_kge_train, "kge-infer": cmd_kge_infer,
    "detect-outliers": cmd_detect_outliers,
}


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="unrollgnn", description=__doc__.splitlines()[0])
    sub = ap.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        p = sub.add_parser(name)
        p.add_argument("--config", help="key=value config file")
        p.add_argument("--output-dir", dest="output_dir")
        p.add_argument("--seed", type=int)
        p.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                       help="extra config entry (repeatable)")
        if name == "verify":
            p.add_argument("--trials", type=int)
        if name == "lp":
            p.add_argument("--mode", choices=("standard", "prox"))
        if name == "grmlp":
            p.add_argument("--overparam", action="store_const", const=True)
        if name == "kge-train":
            p.add_argument("--score", choices=("transe", "distmult"))
            p.add_argument("--negatives", type=int)
            p.add_argument("--layers", type=int)
        if name == "kge-infer":
            p.add_argument("--new-triplets", dest="new_triplets")
            p.add_argument("--k", type=int)
        if name == "detect-outliers":
            p.add_argument("--fraction", type=float)
    return ap


def run(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        cfg = load_config(args.config) if args.config else {}
        cfg.update(parse_config_text("\n".join(args.set), "--set"))
        for key, val in vars(args).items():
            if key in KEYS and val is not None:
                cfg[key] = val
        cfg = resolve(cfg, args.command)
        status, summary = COMMANDS[args.command](cfg)
    except (ConfigError, GraphError, OSError, ValueError, RuntimeError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    print(summary)
    return status


def main() -> None:
    sys.exit(run())


if __name__ == "__main__":
    main()
