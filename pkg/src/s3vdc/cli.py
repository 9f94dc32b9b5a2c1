"""Command-line interface: ``s3vdc {train,eval,select-k,generate,embed,stability}``."""
from __future__ import annotations

import argparse
import csv
import json
import logging
import sys
from pathlib import Path

import numpy as np
import torch

from . import config as cfgmod
from .core import sample_generative
from .errors import ConfigError, ContractError, IngestionError, NonFiniteLossError
from .metrics import evaluate, marginal_nll, silhouette, stability_report
from .trainer import latest_checkpoint, load_checkpoint, train

log = logging.getLogger("s3vdc")

EXIT_OK, EXIT_FAILURE, EXIT_CONFIG, EXIT_NAN = 0, 1, 2, 3


# -- programmatic entry points ---------------------------------------------------

def run_training(cfg: dict, seed=None, out=None, n_clusters=None, train_set=None):
    """Train from a validated config dict. Returns (bundle, run_dir)."""
    if train_set is None:
        train_set, _ = cfgmod.train_test(cfg)
    run_cfg = cfgmod.to_run_config(cfg, seed=seed, n_clusters=n_clusters, checkpoint_dir=out)
    bundle = train(run_cfg, train_set)
    if out is not None:
        pred, _ = bundle.model.predict(train_set.tensor())
        final = {"final_loss": bundle.history[-1]["total"],
                 "cluster_sizes": np.bincount(pred.numpy(), minlength=run_cfg.n_clusters).tolist()}
        path = Path(out) / "manifest.json"
        manifest = json.loads(path.read_text())
        manifest.update({"config_file": cfg, "final_metrics": final})
        path.write_text(json.dumps(manifest, indent=2))
    return bundle, out


def _load_run(run_dir):
    run_dir = Path(run_dir)
    manifest = json.loads((run_dir / "manifest.json").read_text())
    bundle = load_checkpoint(latest_checkpoint(run_dir))
    if manifest.get("status") != "complete" or bundle.step != bundle.config.total_steps:
        raise FileNotFoundError(f"{run_dir}: no final checkpoint (latest is step {bundle.step})")
    return manifest, bundle


def _split_for(cfg: dict, which: str):
    train_set, test_set = cfgmod.train_test(cfg)
    if which == "train":
        return train_set
    if which == "test":
        return test_set
    return cfgmod.build_dataset(cfg)


def run_eval(run_dir, split: str = "test", importance_samples: int = 128, seed: int = 0) -> dict:
    manifest, bundle = _load_run(run_dir)
    ds = _split_for(manifest["config_file"], split)
    report = evaluate(bundle.model, ds.tensor(), ds.labels, importance_samples, seed=seed)
    return report.to_dict()


def select_k(cfg: dict, k_values, seed=None, reuse_gamma: bool = False, importance_samples: int = 128,
             out=None) -> dict:
    """Train one model per cluster count and tabulate test -ln p(x)."""
    k_values = list(k_values)
    if not k_values:
        raise ContractError("empty cluster-count range")
    if min(k_values) < 2:
        raise ContractError("cluster counts must be >= 2")
    train_set, test_set = cfgmod.train_test(cfg)
    warm = None
    if reuse_gamma:
        base = cfgmod.to_run_config(cfg, seed=seed, n_clusters=k_values[0])
        warm = train(base, train_set, stop_after=base.schedule.t_gamma)
    rows = []
    for k in k_values:
        run_cfg = cfgmod.to_run_config(cfg, seed=seed, n_clusters=k,
                                       checkpoint_dir=None if out is None else Path(out) / f"C{k}")
        bundle = train(run_cfg, train_set, warm_start=warm)
        gen = torch.Generator().manual_seed(run_cfg.seed)
        nll = marginal_nll(bundle.model, test_set.tensor(), importance_samples, generator=gen)
        rows.append({"clusters": k, "neg_log_px": nll})
        log.info("C=%d  -ln p(x)=%.4f", k, nll)
    best = min(rows, key=lambda r: r["neg_log_px"])
    for r in rows:
        r["argmin"] = r is best
    return {"rows": rows, "argmin": best["clusters"], "importance_samples": importance_samples}


def run_stability(cfg: dict, seeds, importance_samples: int = 0, out=None) -> dict:
    if len(seeds) < 2:
        raise ContractError("stability needs at least 2 trials")
    train_set, test_set = cfgmod.train_test(cfg)
    reports = []
    for i, seed in enumerate(seeds):
        run_out = None if out is None else Path(out) / f"trial-{i}"
        try:
            bundle, _ = run_training(cfg, seed=seed, out=run_out, train_set=train_set)
        except NonFiniteLossError as exc:
            exc.trial = i
            raise
        report = evaluate(bundle.model, test_set.tensor(), test_set.labels, importance_samples or None,
                          seed=seed).to_dict()
        report["seed"] = seed
        reports.append(report)
    agg = stability_report(reports)
    agg["runs"] = reports
    agg["nan_aborts"] = 0
    return agg


def generate(run_dir, count: int, cluster=None, seed: int = 0):
    _, bundle = _load_run(run_dir)
    gen = torch.Generator().manual_seed(seed)
    x, clusters = sample_generative(bundle.model.prior, bundle.model.decode_mean, count, cluster, gen)
    return x.numpy(), clusters.numpy()


def embed(run_dir, split: str = "all"):
    manifest, bundle = _load_run(run_dir)
    ds = _split_for(manifest["config_file"], split)
    x = ds.tensor()
    z = bundle.model.embed(x).numpy()
    pred, conf = bundle.model.predict(x)
    return z, pred.numpy(), conf.numpy()


def project_2d(z: np.ndarray) -> np.ndarray:
    """PCA projection onto the two leading components."""
    centered = z - z.mean(0)
    if z.shape[1] == 1:
        return np.column_stack([centered[:, 0], np.zeros(len(z))])
    _, _, vt = np.linalg.svd(centered, full_matrices=False)
    return centered @ vt[:2].T


# -- argparse wiring -------------------------------------------------------------

def _parse_range(text: str):
    try:
        a, b = (int(v) for v in text.split(".."))
    except ValueError as exc:
        raise argparse.ArgumentTypeError(f"expected a..b, got {text!r}") from exc
    return list(range(a, b + 1))


def _write_json(obj, out):
    text = json.dumps(obj, indent=2)
    if out:
        Path(out).parent.mkdir(parents=True, exist_ok=True)
        Path(out).write_text(text)
    print(text)


def cmd_train(args):
    cfg = cfgmod.load(args.config)
    out = Path(args.out)
    bundle, _ = run_training(cfg, seed=args.seed, out=out)
    print(json.dumps({"run_dir": str(out), "final_step": bundle.step,
                      "final_loss": bundle.history[-1]["total"]}))
    return EXIT_OK


def cmd_eval(args):
    report = run_eval(args.run, args.split, args.importance_samples, args.seed or 0)
    _write_json(report, args.out or Path(args.run) / f"metrics-{args.split}.json")
    return EXIT_OK


def cmd_select_k(args):
    cfg = cfgmod.load(args.config)
    table = select_k(cfg, args.k_range, seed=args.seed, reuse_gamma=args.reuse_gamma,
                     importance_samples=args.importance_samples, out=args.runs)
    if not args.json:
        for r in table["rows"]:
            print(f"C={r['clusters']:>3}  -ln p(x)={r['neg_log_px']:.4f}{'  <- argmin' if r['argmin'] else ''}",
                  file=sys.stderr)
    _write_json(table, args.out)
    return EXIT_OK


def cmd_generate(args):
    x, clusters = generate(args.run, args.count, args.cluster, args.seed or 0)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    np.savez(out, samples=x, clusters=clusters)
    print(json.dumps({"out": str(out), "count": int(len(x)), "shape": list(x.shape[1:])}))
    return EXIT_OK


def cmd_embed(args):
    z, pred, conf = embed(args.run, args.split)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    proj = project_2d(z) if args.project else None
    with open(out, "w", newline="") as fh:
        w = csv.writer(fh)
        header = ["sample_id"] + [f"z{i}" for i in range(z.shape[1])] + ["cluster", "responsibility_max"]
        if proj is not None:
            header += ["p0", "p1"]
        w.writerow(header)
        for i in range(len(z)):
            row = [i, *(f"{v:.9g}" for v in z[i]), int(pred[i]), f"{conf[i]:.9g}"]
            if proj is not None:
                row += [f"{proj[i, 0]:.9g}", f"{proj[i, 1]:.9g}"]
            w.writerow(row)
    info = {"out": str(out), "rows": int(len(z))}
    if proj is not None:
        png = out.with_suffix(".png")
        _scatter(proj, pred, png)
        info["plot"] = str(png)
        if len(np.unique(pred)) > 1:
            info["projected_silhouette"] = silhouette(proj, pred)
    print(json.dumps(info))
    return EXIT_OK


def _scatter(proj, pred, path):
    import matplotlib
    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    fig, ax = plt.subplots(figsize=(6, 6))
    ax.scatter(proj[:, 0], proj[:, 1], c=pred, s=2, cmap="tab10")
    ax.set_xlabel("p0")
    ax.set_ylabel("p1")
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)


def cmd_stability(args):
    cfg = cfgmod.load(args.config)
    if args.seeds:
        seeds = [int(s) for s in args.seeds.split(",")]
    else:
        base = cfg["train"]["seed"] if args.seed is None else args.seed
        seeds = [base + i for i in range(args.trials)]
    try:
        agg = run_stability(cfg, seeds, args.importance_samples, args.runs)
    except NonFiniteLossError as exc:
        print(f"trial {getattr(exc, 'trial', '?')} aborted: {exc}", file=sys.stderr)
        return EXIT_NAN
    _write_json(agg, args.out)
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="s3vdc", description=__doc__)
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp, config=True):
        if config:
            sp.add_argument("--config", required=True)
        sp.add_argument("--seed", type=int, default=None)
        sp.add_argument("--out", default=None)

    sp = sub.add_parser("train", help="train one model")
    common(sp)
    sp.set_defaults(func=cmd_train)

    sp = sub.add_parser("eval", help="evaluate a trained run")
    common(sp, config=False)
    sp.add_argument("--run", required=True)
    sp.add_argument("--split", choices=["train", "test", "all"], default="test")
    sp.add_argument("--importance-samples", type=int, default=128)
    sp.set_defaults(func=cmd_eval)

    sp = sub.add_parser("select-k", help="sweep the number of clusters")
    common(sp)
    sp.add_argument("--k-range", type=_parse_range, required=True)
    sp.add_argument("--importance-samples", type=int, default=128)
    sp.add_argument("--reuse-gamma", action="store_true",
                    help="share the gamma-trained networks across cluster counts")
    sp.add_argument("--runs", default=None, help="directory for per-C run checkpoints")
    sp.add_argument("--json", action="store_true", help="suppress the text table")
    sp.set_defaults(func=cmd_select_k)

    sp = sub.add_parser("generate", help="sample from a trained model")
    common(sp, config=False)
    sp.add_argument("--run", required=True)
    sp.add_argument("--cluster", type=int, default=None)
    sp.add_argument("--count", type=int, required=True)
    sp.set_defaults(func=cmd_generate)

    sp = sub.add_parser("embed", help="export latent embeddings")
    common(sp, config=False)
    sp.add_argument("--run", required=True)
    sp.add_argument("--split", choices=["train", "test", "all"], default="all")
    sp.add_argument("--project", action="store_true", help="add a 2-D projection and scatter plot")
    sp.set_defaults(func=cmd_embed)

    sp = sub.add_parser("stability", help="multi-seed stability report")
    common(sp)
    sp.add_argument("--trials", type=int, default=5)
    sp.add_argument("--seeds", default=None, help="explicit comma-separated seeds")
    sp.add_argument("--importance-samples", type=int, default=0)
    sp.add_argument("--runs", default=None, help="directory for per-trial run directories")
    sp.set_defaults(func=cmd_stability)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    if args.command in ("generate", "embed") and args.out is None:
        parser.error("--out is required")
    if args.command == "train" and args.out is None:
        parser.error("--out is required")
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except NonFiniteLossError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_NAN
    except (ContractError, IngestionError, FileNotFoundError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_FAILURE


if __name__ == "__main__":
    sys.exit(main())
