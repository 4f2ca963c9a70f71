"""``ffamc`` command line: generate | train | eval | histogram.

Exit codes: 0 success, 2 configuration error, 3 data error, 4 numeric failure.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys

import numpy as np
from threadpoolctl import threadpool_limits

from . import __version__
from .autodiff import CheckpointError, NumericError
from .baselines import (
    QNet,
    calibrate_lut,
    dqn_predict,
    dqn_train,
    load_qnet,
    lut_input_db,
    lut_predict,
)
from .channel import ConfigError
from .config import RunConfig
from .datastore import (
    DataError,
    generate_dataset,
    label_histogram,
    read_dataset,
    split_dataset,
    write_dataset,
    write_histogram_csv,
)
from .evalreport import compare_policies, lstm_ablation_delta, training_curves, write_histograms
from .models import TrainReport, _cfg_dict, build_model, load_model, predict_batch, train_supervised
from .phy import MCS_MIN

log = logging.getLogger("ffamc")

EXIT_OK, EXIT_CONFIG, EXIT_DATA, EXIT_NUMERIC = 0, 2, 3, 4
SUPERVISED = ("cnn_lstm", "cnn_only")


def _prepare_out(out: str, cfg: RunConfig | None) -> None:
    os.makedirs(out, exist_ok=True)
    if cfg is not None:
        with open(os.path.join(out, "config.effective"), "w") as fh:
            fh.write(cfg.render())
    with open(os.path.join(out, "VERSION"), "w") as fh:
        fh.write(f"ffamc {__version__}\n")


def _load_config(args) -> RunConfig:
    cfg = RunConfig.load(args.config) if args.config else RunConfig.defaults()
    if args.seed_override is not None:
        cfg = cfg.with_seed(args.seed_override)
    return cfg


def _splits(cfg: RunConfig, dataset_path: str):
    ds = read_dataset(dataset_path)
    if ds.manifest.t_len != cfg["model.seq_len"]:
        raise ConfigError(f"dataset T={ds.manifest.t_len} but model.seq_len={cfg['model.seq_len']}")
    tr, te = split_dataset(ds, cfg["data.train_fraction"], cfg["data.split_seed"])
    return ds, ds.to_samples(tr), ds.to_samples(te)


def cmd_generate(args) -> int:
    cfg = _load_config(args)
    ds = generate_dataset(cfg.catalog(), cfg["data.frames_per_scenario"], cfg.link(), cfg["model.seq_len"],
                          threads=args.threads, first_frame=cfg["data.first_frame"])
    _prepare_out(args.out, cfg)
    write_dataset(os.path.join(args.out, "dataset.amcd"), ds)
    with open(os.path.join(args.out, "manifest.json"), "w") as fh:
        fh.write(ds.manifest.to_json() + "\n")
    write_histogram_csv(os.path.join(args.out, "label_histogram.csv"), label_histogram(ds))
    skipped = sum(s["skipped_frames"] for s in ds.manifest.scenarios)
    log.info("wrote %d samples from %d scenarios (%d singular frames skipped)", len(ds),
             len(ds.manifest.scenarios), skipped)
    return EXIT_OK


def cmd_train(args) -> int:
    cfg = _load_config(args)
    _, train, test = _splits(cfg, args.dataset)
    _prepare_out(args.out, cfg)
    ckpt = os.path.join(args.out, "model.amcw")
    if args.model in SUPERVISED:
        model = build_model(args.model, cfg.model())
        rep = train_supervised(model, train, test, cfg.train(), log=log.info)
        model.save(ckpt)
        rep.checkpoint = ckpt
        rep.to_csv(os.path.join(args.out, "train_report.csv"))
    elif args.model == "dqn":
        qnet, curve = dqn_train(train, cfg.dqn(), log=log.info)
        qnet.save(ckpt)
        curve.to_csv(os.path.join(args.out, "train_report.csv"))
    else:
        lut = calibrate_lut(lut_input_db(train, cfg["lut.input"]), train.y + MCS_MIN)
        lut.to_csv(os.path.join(args.out, "lut.csv"))
    return EXIT_OK


def _check_descriptor(path: str, cfg: RunConfig) -> str:
    try:
        with open(f"{path}.arch.json") as fh:
            desc = json.load(fh)
    except OSError as exc:
        raise DataError(f"missing architecture descriptor for {path}") from exc
    kind = desc.get("kind")
    if kind in SUPERVISED:
        want = _cfg_dict(cfg.model())
    elif kind == "dqn":
        want = _cfg_dict(cfg.dqn())
    else:
        raise ConfigError(f"{path}: unknown model kind {kind!r}")
    if desc.get("config") != want:
        diff = sorted(k for k in want if desc.get("config", {}).get(k) != want[k])
        raise ConfigError(f"{path}: architecture descriptor disagrees with the config on {diff}")
    return kind


def cmd_eval(args) -> int:
    cfg = _load_config(args)
    ds, train, test = _splits(cfg, args.dataset)
    policies, curves = {}, {}
    for path in args.checkpoint or []:
        kind = _check_descriptor(path, cfg)
        if kind in policies:
            raise ConfigError(f"two checkpoints of kind {kind}")
        if kind == "dqn":
            qnet: QNet = load_qnet(path)
            policies[kind] = lambda s, q=qnet: dqn_predict(q, s.x)
        else:
            model = load_model(path)
            policies[kind] = lambda s, m=model: predict_batch(m, s.x)
        rep_path = os.path.join(os.path.dirname(path), "train_report.csv")
        if kind in SUPERVISED and os.path.exists(rep_path):
            curves[kind] = TrainReport.from_csv(rep_path)
    lut = calibrate_lut(lut_input_db(train, cfg["lut.input"]), train.y + MCS_MIN)
    policies["lut"] = lambda s: lut_predict(lut, lut_input_db(s, cfg["lut.input"]))
    order = [k for k in ("cnn_lstm", "cnn_only", "dqn", "lut") if k in policies]
    meta = {
        "dataset_checksum": ds.checksum(),
        "seeds": {k: cfg[k] for k in ("channel.master_seed", "data.split_seed", "model.init_seed", "train.seed",
                                      "dqn.seed")},
        "version": __version__,
    }
    report = compare_policies({k: policies[k] for k in order}, test, meta)
    if "cnn_lstm" in policies and "cnn_only" in policies:
        report.metadata["lstm_ablation"] = {
            "all": lstm_ablation_delta(report).as_dict(),
            "mobile": lstm_ablation_delta(report, "mobile").as_dict(),
        }
    _prepare_out(args.out, cfg)
    report.write(args.out)
    lut.to_csv(os.path.join(args.out, "lut.csv"))
    if curves:
        training_curves(curves, os.path.join(args.out, "training_curves.csv"))
    for name, r in report.results.items():
        log.info("%-8s accuracy %.4f (n=%d)", name, r.accuracy, r.n)
    return EXIT_OK


def cmd_histogram(args) -> int:
    ds = read_dataset(args.dataset)
    _prepare_out(args.out, _load_config(args) if args.config else None)
    if args.scenario in (None, "", "all"):
        write_histograms(ds, args.out)
    else:
        counts = label_histogram(ds, args.scenario)
        write_histogram_csv(os.path.join(args.out, f"histogram_{args.scenario}.csv"), counts)
        log.info("%s: %d samples, counts %s", args.scenario, int(counts.sum()), counts.tolist())
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="ffamc", description="Feedback-free MCS selection laboratory")
    p.add_argument("--version", action="version", version=f"ffamc {__version__}")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp, dataset=False):
        sp.add_argument("--config", help="key=value run configuration (defaults when omitted)")
        sp.add_argument("--out", required=True, help="output directory")
        sp.add_argument("--seed-override", type=int, help="replace every seed in the config")
        sp.add_argument("--threads", type=int, default=1, help="worker processes (results do not depend on it)")
        sp.add_argument("-v", "--verbose", action="store_true")
        if dataset:
            sp.add_argument("--dataset", required=True, help="AMCD dataset file")

    g = sub.add_parser("generate", help="simulate channels and write a labeled dataset")
    common(g)
    g.set_defaults(func=cmd_generate)

    t = sub.add_parser("train", help="train one policy")
    common(t, dataset=True)
    t.add_argument("--model", required=True, choices=["cnn_lstm", "cnn_only", "dqn", "lut"])
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("eval", help="compare trained policies on the test split")
    common(e, dataset=True)
    e.add_argument("--checkpoint", action="append", help="AMCW checkpoint (repeatable)")
    e.set_defaults(func=cmd_eval)

    h = sub.add_parser("histogram", help="label histogram of a dataset")
    common(h, dataset=True)
    h.add_argument("--scenario", default="all", help="scenario tag or tag part (e.g. mobile)")
    h.set_defaults(func=cmd_histogram)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.INFO, format="%(message)s",
                        stream=sys.stderr, force=True)
    if args.threads < 1:
        log.error("config error: --threads must be >= 1")
        return EXIT_CONFIG
    try:
        # one BLAS thread keeps floating-point reductions identical across machines
        with threadpool_limits(limits=1), np.errstate(over="raise", invalid="raise"):
            return args.func(args)
    except ConfigError as exc:
        log.error("config error: %s", exc)
        return EXIT_CONFIG
    except (DataError, CheckpointError, OSError) as exc:
        log.error("data error: %s", exc)
        return EXIT_DATA
    except (NumericError, FloatingPointError) as exc:
        log.error("numeric failure: %s", exc)
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())
