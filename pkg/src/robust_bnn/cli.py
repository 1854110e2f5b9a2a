"""Command-line front end: train, certify, attack, radius, uncertainty.

Each verb reads a config (``--config``, optional), writes its outputs into
``--out-dir`` and prints the summary JSON on stdout.  Failures print one JSON
object on stderr and exit nonzero.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import os
import sys

import numpy as np

from .errors import ConfigError, NonFiniteLossError, RobustBNNError, UsageError

EXIT_USAGE = 2
EXIT_FAILURE = 1

LOG_COLUMNS = ("epoch", "loss", "accuracy", "eta", "lr")


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


def _fmt(v):
    if isinstance(v, float):
        return "" if v != v else f"{v:.17g}"
    return str(v)


def _clean(v):
    # NaN is not valid JSON
    return None if isinstance(v, float) and v != v else v


def _write_json(path, obj):
    text = json.dumps({k: _clean(v) for k, v in obj.items()}, indent=2, sort_keys=True) + "\n"
    with open(path, "w") as fh:
        fh.write(text)
    return text


def _write_rows(path, columns, rows):
    with open(path, "w", newline="") as fh:
        out = csv.writer(fh)
        out.writerow(columns)
        for row in rows:
            out.writerow([_fmt(row.get(c, float("nan"))) for c in columns])


def _setup(args):
    from .config import RunConfig, load_config

    cfg = load_config(args.config, args.seed) if args.config else RunConfig()
    if args.seed is not None and not args.config:
        cfg = cfg.with_seed(args.seed)
    os.makedirs(args.out_dir, exist_ok=True)
    return cfg


def _load(args):
    from .inference import load_posterior

    if not args.posterior:
        raise UsageError("--posterior is required")
    return load_posterior(args.posterior)


def cmd_train(args):
    from .inference import save_posterior
    from .runner import load_train_test, train

    cfg = _setup(args)
    train_set, test_set = load_train_test(cfg)
    arch, post, rows, step_losses = train(cfg, train_set, test_set)
    bad = [r for r in rows if not np.isfinite(r["loss"])]
    if bad:
        raise NonFiniteLossError(f"epoch {bad[0]['epoch']} produced no finite loss")
    path = os.path.join(args.out_dir, "posterior.bin")
    save_posterior(path, arch, post)
    _write_rows(os.path.join(args.out_dir, "train_log.csv"), LOG_COLUMNS, rows)
    _write_rows(os.path.join(args.out_dir, "train_steps.csv"), ("step", "loss"),
                [{"step": i + 1, "loss": v} for i, v in enumerate(step_losses)])
    summary = {"method": cfg.train.method, "likelihood": cfg.train.likelihood,
               "epochs": len(rows), "final_loss": rows[-1]["loss"] if rows else None,
               "final_accuracy": rows[-1]["accuracy"] if rows else None,
               "posterior": "posterior.bin", "seed": cfg.seed}
    return _write_json(os.path.join(args.out_dir, "train.json"), summary)


def _eval_setup(args):
    from .runner import draw_samples, load_test

    cfg = _setup(args)
    arch, post = _load(args)
    test = load_test(cfg, args.images, args.labels)
    if test.input_dim != arch.input_dim:
        raise UsageError(f"data has {test.input_dim} inputs, network expects {arch.input_dim}")
    samples = draw_samples(cfg, post, args.samples)
    return cfg, arch, samples, test


def _eps(args, cfg):
    eps = cfg.attack.eps if args.eps is None else args.eps
    if not eps >= 0:
        raise UsageError("epsilon must be non-negative")
    return float(eps)


def cmd_certify(args):
    from .certification import certify_batch, max_certified_radius
    from .network import write_samples
    from .runner import evaluate, input_clip

    cfg, arch, samples, test = _eval_setup(args)
    eps = _eps(args, cfg)
    summary = evaluate(cfg, arch, samples, test, eps)
    plain, _, certified = certify_batch(arch, samples, test.inputs, test.labels, eps,
                                        input_clip(cfg))
    rows = [{"index": i, "label": int(test.labels[i]), "predicted": int(np.argmax(plain[i])),
             "certified": int(certified[i])} for i in range(len(test))]
    columns = ["index", "label", "predicted", "certified"]
    if args.radius:
        radii = max_certified_radius(arch, samples, test.inputs, test.labels,
                                     cfg.certify.radius_tol, input_clip(cfg))
        for row, r in zip(rows, np.atleast_1d(radii)):
            row["radius"] = float(r)
        columns.append("radius")
    _write_rows(os.path.join(args.out_dir, "certify_points.csv"), columns, rows)
    write_samples(os.path.join(args.out_dir, "certify_samples.bin"), samples)
    return _write_json(os.path.join(args.out_dir, "certify.json"), summary)


def cmd_attack(args):
    from .attacks import pgd_attack
    from .network import predict_class
    from .runner import _ATTACK, attack_config

    cfg, arch, samples, test = _eval_setup(args)
    eps = _eps(args, cfg)
    acfg = attack_config(cfg, eps, cfg.attack.eval_steps)
    x_adv = pgd_attack(arch, samples, test.inputs, test.labels, acfg,
                       np.random.default_rng([cfg.seed, _ATTACK]))
    clean = predict_class(arch, samples, test.inputs)
    adv = predict_class(arch, samples, x_adv)
    dist = np.abs(x_adv - test.inputs).max(axis=1)
    rows = [{"index": i, "label": int(test.labels[i]), "clean_predicted": int(clean[i]),
             "adversarial_predicted": int(adv[i]), "linf_distance": float(dist[i])}
            for i in range(len(test))]
    _write_rows(os.path.join(args.out_dir, "attack_points.csv"),
                ("index", "label", "clean_predicted", "adversarial_predicted", "linf_distance"),
                rows)
    ok = (clean == test.labels)
    summary = {"accuracy": float(np.mean(ok)),
               "pgd_robust_accuracy": float(np.mean(ok & (adv == test.labels))),
               "eps": eps, "steps": acfg.steps, "N": int(len(samples)), "seed": cfg.seed}
    return _write_json(os.path.join(args.out_dir, "attack.json"), summary)


def cmd_radius(args):
    from .certification import max_certified_radius
    from .network import predict_class
    from .runner import input_clip

    cfg, arch, samples, test = _eval_setup(args)
    n = min(cfg.certify.radius_points, len(test))
    test = test.take(np.arange(n))
    tol = cfg.certify.radius_tol
    radii = np.atleast_1d(max_certified_radius(arch, samples, test.inputs, test.labels, tol,
                                               input_clip(cfg)))
    pred = predict_class(arch, samples, test.inputs)
    rows = [{"index": i, "label": int(test.labels[i]), "predicted": int(pred[i]),
             "radius": float(radii[i])} for i in range(n)]
    _write_rows(os.path.join(args.out_dir, "radius_points.csv"),
                ("index", "label", "predicted", "radius"), rows)
    summary = {"mean_radius": float(radii.mean()), "points": n, "tol": tol,
               "N": int(len(samples)), "seed": cfg.seed}
    return _write_json(os.path.join(args.out_dir, "radius.json"), summary)


def cmd_uncertainty(args):
    from .runner import load_ood
    from .uncertainty import (
        entropy_histogram, likelihood_ratio, uncertainty_table, write_histogram_csv,
        write_uncertainty_csv,
    )

    cfg, arch, samples, in_set = _eval_setup(args)
    out_set = load_ood(cfg, args.ood_images, args.ood_labels)
    summary = {"likelihood_ratio": likelihood_ratio(arch, samples, in_set, out_set),
               "N": int(len(samples)), "seed": cfg.seed, "bins": args.bins}
    for name, data in (("in", in_set), ("out", out_set)):
        table = np.atleast_2d(uncertainty_table(arch, samples, data))
        write_uncertainty_csv(os.path.join(args.out_dir, f"uncertainty_{name}.csv"), table)
        edges, counts = entropy_histogram(arch, samples, data, args.bins)
        write_histogram_csv(os.path.join(args.out_dir, f"entropy_hist_{name}.csv"), edges, counts)
        summary[f"{name}_size"] = int(len(data))
        summary[f"mean_entropy_{name}"] = float(table[:, 0].mean())
        summary[f"mean_entropy_of_mean_{name}"] = float(table[:, 1].mean())
    return _write_json(os.path.join(args.out_dir, "uncertainty.json"), summary)


COMMANDS = {"train": cmd_train, "certify": cmd_certify, "attack": cmd_attack,
            "radius": cmd_radius, "uncertainty": cmd_uncertainty}


def build_parser():
    common = _Parser(add_help=False)
    common.add_argument("--config", help="INI run configuration (defaults if omitted)")
    common.add_argument("--seed", type=int, help="overrides [run] seed")
    common.add_argument("--threads", type=int, help="cap on BLAS worker threads")
    common.add_argument("--out-dir", default=".", help="directory for all outputs")
    common.add_argument("-v", "--verbose", action="store_true")

    evalp = _Parser(add_help=False)
    evalp.add_argument("--posterior", required=True, help="posterior file from `train`")
    evalp.add_argument("--images", help="IDX images (default: config test set)")
    evalp.add_argument("--labels", help="IDX labels (default: config test set)")
    evalp.add_argument("--samples", type=int, help="weight samples N (default: config)")

    parser = _Parser(prog="robust-bnn", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)
    sub.add_parser("train", parents=[common], help="fit a posterior")
    for name in ("certify", "attack"):
        p = sub.add_parser(name, parents=[common, evalp])
        p.add_argument("--eps", type=float, help="ball radius (default: [attack] eps)")
        if name == "certify":
            p.add_argument("--radius", action="store_true",
                           help="also search each point's maximal certified radius")
    sub.add_parser("radius", parents=[common, evalp], help="maximal certified radii")
    p = sub.add_parser("uncertainty", parents=[common, evalp],
                       help="predictive entropy in vs out of distribution")
    p.add_argument("--ood-images")
    p.add_argument("--ood-labels")
    p.add_argument("--bins", type=int, default=20)
    return parser


def _error_line(exc):
    payload = {"error": type(exc).__name__, "message": str(exc)}
    if isinstance(exc, ConfigError) and exc.field:
        payload["field"] = exc.field
    return json.dumps(payload, sort_keys=True)


def main(argv=None):
    try:
        args = build_parser().parse_args(argv)
        if args.threads is not None and args.threads < 1:
            raise UsageError("--threads must be at least 1")
        logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                            format="%(levelname)s %(name)s: %(message)s")
        if args.threads is not None:
            from threadpoolctl import threadpool_limits
            with threadpool_limits(limits=args.threads):
                text = COMMANDS[args.command](args)
        else:
            text = COMMANDS[args.command](args)
    except UsageError as exc:
        print(_error_line(exc), file=sys.stderr)
        return EXIT_USAGE
    except (RobustBNNError, OSError) as exc:
        print(_error_line(exc), file=sys.stderr)
        return EXIT_FAILURE
    sys.stdout.write(text)
    return 0


if __name__ == "__main__":
    sys.exit(main())
