"""Command-line entry points, one per pipeline stage.

Each stage reads only files (config, cohort directory, checkpoint) and
writes into its own output directory, guarded by a lockfile.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import os
import sys
from contextlib import contextmanager
from dataclasses import replace

import numpy as np
import torch
from filelock import FileLock, Timeout

from . import __version__
from .checkpoint import data_fingerprint, load_checkpoint, save_checkpoint
from .config import RunConfig, load_config, parse_config
from .ehr import cold_start_subset, generate_synthetic_cohort, load_cohort, save_cohort, split_cohort
from .encoder import encode_sets
from .errors import ConfigError, DataError, MetaDrugError
from .experiments import (ModelBundle, ablation_suite, cold_start_curve,
                          evaluate_bundle, train_bundle)
from .meta import adapt_and_predict
from .peers import build_index
from .plots import plot_ablation, plot_cold_start

log = logging.getLogger("metadrug")

COHORT_FILE = "cohort.jsonl"
CHECKPOINT_FILE = "checkpoint.npz"
LOCK_FILE = ".metadrug.lock"


# ---------------------------------------------------------------------------
# helpers


@contextmanager
def _locked(lock_path):
    parent = os.path.dirname(os.path.abspath(lock_path))
    try:
        os.makedirs(parent, exist_ok=True)
    except OSError as exc:
        raise DataError(f"cannot create output directory {parent}: {exc}") from None
    lock = FileLock(lock_path, timeout=0)
    try:
        lock.acquire()
    except Timeout:
        raise MetaDrugError(f"{parent} is in use by another metadrug command") from None
    try:
        yield
    finally:
        lock.release()


def _write_text(path, text):
    tmp = f"{path}.tmp"
    try:
        with open(tmp, "w") as fh:
            fh.write(text)
        os.replace(tmp, path)
    except OSError as exc:
        raise DataError(f"cannot write {path}: {exc}") from None


def _write_json(path, obj):
    _write_text(path, json.dumps(obj, indent=2, sort_keys=True) + "\n")


def _cohort_path(data_dir):
    path = os.path.join(data_dir, COHORT_FILE)
    if not os.path.exists(path):
        raise DataError(f"no {COHORT_FILE} in {data_dir}")
    return path


def _out_dir(args, cfg: RunConfig):
    out = args.out or cfg.output.dir
    if not out:
        raise ConfigError("no output directory: pass --out or set output.dir")
    return out


def _announce(cfg: RunConfig):
    sys.stderr.write("# effective configuration\n" + cfg.to_ini())
    sys.stderr.flush()


def _load_run(cfg: RunConfig, data_dir):
    path = _cohort_path(data_dir or cfg.data.path)
    cohort = load_cohort(path)
    train, test = split_cohort(cohort, cfg.data.train_frac, cfg.data.seed)
    return path, cohort, train, test


def _bundle_from_checkpoint(ckpt_path, data_dir):
    ckpt = load_checkpoint(ckpt_path)
    cfg = parse_config(ckpt.config_ini, env={})
    path, cohort, train, test = _load_run(cfg, data_dir)
    if data_fingerprint(path, cfg.data.seed, cfg.data.train_frac) != ckpt.fingerprint:
        raise DataError(f"{path} does not match the data this checkpoint was trained on")
    if (cohort.vocab_size, cohort.num_medications) != (ckpt.params.theta["embedding"].shape[0],
                                                       ckpt.params.num_medications):
        raise DataError("checkpoint and cohort disagree on vocabulary or medication count")
    bundle = ModelBundle(ckpt.params, build_index(train), cfg.meta_config(), ckpt.uq_filter)
    return cfg, bundle, cohort, train, test


def _flags(args):
    return {"use_filter": not args.no_filter, "use_self": not args.no_self,
            "use_peer": not args.no_peer}


# ---------------------------------------------------------------------------
# commands


def cmd_generate(args):
    cfg = load_config(args.config)
    _announce(cfg)
    args.out = _out_dir(args, cfg)
    with _locked(os.path.join(args.out, LOCK_FILE)):
        cohort = generate_synthetic_cohort(cfg.generator, cfg.data.seed)
        try:
            save_cohort(cohort, os.path.join(args.out, COHORT_FILE))
        except OSError as exc:
            raise DataError(f"cannot write cohort to {args.out}: {exc}") from None
        _write_text(os.path.join(args.out, "config.ini"), cfg.to_ini())
    log.info("wrote %d patients to %s", len(cohort), args.out)
    return 0


def cmd_train(args):
    cfg = load_config(args.config)
    _announce(cfg)
    args.out = _out_dir(args, cfg)
    path, _, train, _ = _load_run(cfg, args.data)
    with _locked(os.path.join(args.out, LOCK_FILE)):
        bundle = train_bundle(train, cfg.meta_config(), cfg.model.d, cfg.uq)
        extra = {"train_patients": len(train), "version": __version__}
        save_checkpoint(os.path.join(args.out, CHECKPOINT_FILE), bundle.params, bundle.uq_filter,
                        cfg.to_ini(), data_fingerprint(path, cfg.data.seed, cfg.data.train_frac),
                        extra)
        _write_json(os.path.join(args.out, "loss_log.json"),
                    {"epoch_loss": [float(x) for x in bundle.loss_log]})
        _write_text(os.path.join(args.out, "config.ini"), cfg.to_ini())
    log.info("trained on %d patients; checkpoint in %s", len(train), args.out)
    return 0


def cmd_evaluate(args):
    cfg, bundle, _, _, test = _bundle_from_checkpoint(args.ckpt, args.data)
    flags = _flags(args)
    with _locked(os.path.join(args.out, LOCK_FILE)):
        report = evaluate_bundle(bundle, test, cfg.eval.eta, "all", **flags)
        _write_text(os.path.join(args.out, "metrics.json"), report.to_json() + "\n")
        _write_json(os.path.join(args.out, "run.json"),
                    {"config_hash": cfg.digest(), "seed": cfg.data.seed, "flags": flags,
                     "checkpoint": os.path.basename(args.ckpt)})
    print(report.to_json())
    return 0


def _percentile_arg(text):
    try:
        vals = [float(p) for p in text.split(",") if p.strip()]
    except ValueError:
        raise ConfigError(f"bad percentile list {text!r}") from None
    if not vals or any(not 0 < p <= 100 for p in vals):
        raise ConfigError("percentiles must lie in (0, 100]")
    return vals


def cmd_coldstart(args):
    cfg, bundle, _, _, test = _bundle_from_checkpoint(args.ckpt, args.data)
    percentiles = _percentile_arg(args.percentiles) if args.percentiles else cfg.eval.percentiles
    with _locked(os.path.join(args.out, LOCK_FILE)):
        reports = cold_start_curve(bundle, test, percentiles, cfg.eval.eta, **_flags(args))
        rows = [r.to_dict() for r in reports]
        json_path = os.path.join(args.out, "coldstart.json")
        _write_json(json_path, rows)
        plot_cold_start(json_path, os.path.join(args.out, "coldstart.png"))
    for r in reports:
        print(r.to_json())
    return 0


def _mean_rows(per_seed):
    out = []
    for rows in zip(*per_seed):
        row = {"subset_label": rows[0]["subset_label"], "n_patients": rows[0]["n_patients"]}
        for key in ("prauc", "f1", "jaccard", "ddi"):
            vals = np.array([r[key] for r in rows])
            row[key] = round(float(vals.mean()), 6)
            row[f"{key}_std"] = round(float(vals.std(ddof=1)), 6) if len(vals) > 1 else 0.0
        out.append(row)
    return out


def cmd_ablate(args):
    cfg = load_config(args.config)
    _announce(cfg)
    args.out = _out_dir(args, cfg)
    if args.seeds < 1:
        raise ConfigError("--seeds must be >= 1")
    with _locked(os.path.join(args.out, LOCK_FILE)):
        per_seed = []
        for k in range(args.seeds):
            run = replace(cfg, data=replace(cfg.data, seed=cfg.data.seed + k))
            _, _, train, test = _load_run(run, args.data)
            reports = ablation_suite(train, test, run.meta_config(), run.model.d, run.uq,
                                     run.eval.eta)
            per_seed.append([r.to_dict() for r in reports])
            log.info("seed %d: %s", run.data.seed,
                     ", ".join(f"{r.subset_label}={r.jaccard:.4f}" for r in reports))
        result = {"seeds": [cfg.data.seed + k for k in range(args.seeds)],
                  "per_seed": per_seed, "mean": _mean_rows(per_seed)}
        json_path = os.path.join(args.out, "ablation.json")
        _write_json(json_path, result)
        plot_ablation(json_path, os.path.join(args.out, "ablation.png"))
    for row in result["mean"]:
        print(json.dumps(row, sort_keys=True))
    return 0


def export_rows(bundle, cohort, cold_percentile=20.0):
    """(patient_id, cold flag, pre-adaptation patient embedding, adapted
    hidden representation of the last visit) per patient."""
    cold = {r.patient_id for r in cold_start_subset(cohort, cold_percentile)}
    with torch.no_grad():
        pre = encode_sets([r.all_codes() for r in cohort.patients], bundle.params.theta, "patient")
    rows = []
    for i, rec in enumerate(cohort.patients):
        _, post = adapt_and_predict(rec, bundle.params.theta, bundle.params.phi, bundle.index,
                                    bundle.meta, return_hidden=True)
        rows.append((rec.patient_id, int(rec.patient_id in cold), pre[i].numpy(), post))
    return rows


def cmd_export(args):
    _, bundle, cohort, _, _ = _bundle_from_checkpoint(args.ckpt, args.data)
    rows = export_rows(bundle, cohort, args.cold_percentile)
    d = bundle.params.d
    with _locked(f"{os.path.abspath(args.out)}.lock"):
        tmp = f"{args.out}.tmp"
        try:
            with open(tmp, "w", newline="") as fh:
                w = csv.writer(fh)
                w.writerow(["patient_id", "cold_start"] + [f"pre_{j}" for j in range(d)]
                           + [f"post_{j}" for j in range(d)])
                for pid, flag, pre, post in rows:
                    w.writerow([pid, flag] + [repr(float(x)) for x in pre]
                               + [repr(float(x)) for x in post])
            os.replace(tmp, args.out)
        except OSError as exc:
            raise DataError(f"cannot write {args.out}: {exc}") from None
    log.info("exported %d patients to %s", len(rows), args.out)
    return 0


# ---------------------------------------------------------------------------
# argument parsing


def _eval_flags(p):
    p.add_argument("--no-filter", action="store_true", help="skip uncertainty filtering")
    p.add_argument("--no-self", action="store_true", help="skip self-adaptation")
    p.add_argument("--no-peer", action="store_true", help="skip peer-adaptation")


def build_parser():
    parser = argparse.ArgumentParser(prog="metadrug",
                                     description="Meta-learned cold-start medication recommendation.")
    parser.add_argument("-v", "--verbose", action="store_true")
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("generate", help="write a synthetic cohort")
    p.add_argument("--config", required=True)
    p.add_argument("--out", help="output directory (defaults to output.dir)")
    p.set_defaults(func=cmd_generate)

    p = sub.add_parser("train", help="meta-train and fit the uncertainty filter")
    p.add_argument("--config", required=True)
    p.add_argument("--data", help="cohort directory (defaults to data.path)")
    p.add_argument("--out", help="output directory (defaults to output.dir)")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("evaluate", help="metrics on the held-out split")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    _eval_flags(p)
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("coldstart", help="metrics per code-count percentile")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--percentiles", help="comma-separated, e.g. 10,20,30,40,50")
    p.add_argument("--out", required=True)
    _eval_flags(p)
    p.set_defaults(func=cmd_coldstart)

    p = sub.add_parser("ablate", help="train and evaluate the five ablation rows")
    p.add_argument("--config", required=True)
    p.add_argument("--data", help="cohort directory (defaults to data.path)")
    p.add_argument("--out", help="output directory (defaults to output.dir)")
    p.add_argument("--seeds", type=int, default=1, help="consecutive seeds from data.seed")
    p.set_defaults(func=cmd_ablate)

    p = sub.add_parser("export-embeddings", help="per-patient embeddings as CSV")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--cold-percentile", type=float, default=20.0)
    p.set_defaults(func=cmd_export)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s", stream=sys.stderr)
    torch.use_deterministic_algorithms(True)
    try:
        return args.func(args)
    except MetaDrugError as exc:
        sys.stderr.write(f"metadrug {args.command}: {exc}\n")
        return exc.exit_code
    except (FloatingPointError, ArithmeticError, RuntimeError) as exc:
        sys.stderr.write(f"metadrug {args.command}: {exc}\n")
        return 4


if __name__ == "__main__":
    sys.exit(main())
