"""Command-line entry point: ``adageo <subcommand> [options]``.

Every run writes its outputs under ``--out`` together with ``config.ini``
(the effective configuration) and ``run.json`` (subcommand, argv, seeds).
Outputs are staged in a sibling directory and moved into place only when
the command succeeds, so a failed run leaves nothing partial behind.
"""
from __future__ import annotations

import argparse
import json
import logging
import os
import shutil
import sys
import tempfile
from pathlib import Path

logger = logging.getLogger("adageo")

SUBCOMMANDS = ("gen-data", "train-ddda", "make-pseudo", "init-centroids", "train", "ablate", "eval",
               "grad-check")


def _int_list(text: str) -> list[int]:
    try:
        return [int(s) for s in text.split(",") if s.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {text!r}") from None


def _str_list(text: str) -> list[str]:
    return [s.strip() for s in text.split(",") if s.strip()]


def build_parser() -> argparse.ArgumentParser:
    fmt = argparse.ArgumentDefaultsHelpFormatter
    parser = argparse.ArgumentParser(prog="adageo", description="Few-shot cross-domain visual place recognition.",
                                     formatter_class=fmt)
    parser.add_argument("--log-level", default="INFO", choices=["DEBUG", "INFO", "WARNING", "ERROR"],
                        help="logging verbosity")
    sub = parser.add_subparsers(dest="command", required=True, metavar="SUBCOMMAND")

    common = argparse.ArgumentParser(add_help=False, formatter_class=fmt)
    common.add_argument("--config", type=Path, default=None, help="config file (key = value sections)")
    common.add_argument("--out", type=Path, required=True, help="output directory")
    common.add_argument("--seed", type=int, default=None, help="run seed (overrides [train] seed)")

    data = argparse.ArgumentParser(add_help=False, formatter_class=fmt)
    data.add_argument("--data", type=Path, default=None,
                      help="dataset directory with manifest.csv; rendered from [data] when omitted")

    toggles = argparse.ArgumentParser(add_help=False, formatter_class=fmt)
    toggles.add_argument("--domain", default=None, help="target domain")
    toggles.add_argument("--shots", type=int, default=None, help="number of unlabeled target images")
    toggles.add_argument("--no-ddda", action="store_true", help="disable domain-driven data augmentation")
    toggles.add_argument("--no-att", action="store_true", help="disable CAM attention")
    toggles.add_argument("--no-da", action="store_true", help="disable adversarial domain adaptation")
    toggles.add_argument("--margin", type=float, default=None, help="triplet margin")
    toggles.add_argument("--lambda", dest="lam", type=float, default=None, help="gradient reversal strength")
    toggles.add_argument("--alpha", type=float, default=None, help="weight of the domain loss")

    p = sub.add_parser("gen-data", parents=[common], formatter_class=fmt,
                       help="render the synthetic multi-domain benchmark")
    p.add_argument("--places", type=int, default=None, help="number of places (overrides [data])")
    p.add_argument("--image-size", type=int, default=None, help="image side in pixels (overrides [data])")

    p = sub.add_parser("train-ddda", parents=[common, data, toggles], formatter_class=fmt,
                       help="phase 1: train the autoencoder pair on source images and target shots")

    p = sub.add_parser("make-pseudo", parents=[common, data, toggles], formatter_class=fmt,
                       help="write a dataset extended with pseudo-target queries")
    p.add_argument("--ddda", type=Path, required=True, help="checkpoint written by train-ddda")

    p = sub.add_parser("init-centroids", parents=[common, data, toggles], formatter_class=fmt,
                       help="k-means VLAD centroids from local embeddings")
    p.add_argument("--checkpoint", type=Path, default=None,
                   help="model checkpoint; a backbone is pretrained when omitted")

    p = sub.add_parser("train", parents=[common, data, toggles], formatter_class=fmt,
                       help="full two-phase training of one configuration")

    p = sub.add_parser("ablate", parents=[common, data, toggles], formatter_class=fmt,
                       help="all eight module combinations over seeds and target domains")
    p.add_argument("--seeds", type=_int_list, default=[0, 1, 2], help="comma-separated seeds")
    p.add_argument("--domains", type=_str_list, default=None, help="target domains; every target domain in the data when omitted")
    p.add_argument("--sweep-shots", type=_int_list, default=None,
                   help="also run the full configuration for each of these shot counts")

    p = sub.add_parser("eval", parents=[common, data], formatter_class=fmt,
                       help="recall@N of a trained model on the test split")
    p.add_argument("--checkpoint", type=Path, required=True, help="model checkpoint")
    p.add_argument("--domains", type=_str_list, default=None, help="target domains; every target domain in the data when omitted")
    p.add_argument("--ns", type=_int_list, default=[1, 5, 10, 20], help="recall cut-offs")

    p = sub.add_parser("grad-check", parents=[common], formatter_class=fmt,
                       help="finite-difference check of every primitive and loss")
    p.add_argument("--points", type=int, default=20, help="random points per check")
    return parser


# ---------------------------------------------------------------- helpers

def _threads() -> int:
    raw = os.environ.get("ADAGEO_THREADS", "1")
    try:
        n = int(raw)
    except ValueError:
        raise SystemExit(f"ADAGEO_THREADS must be a positive integer, got {raw!r}") from None
    if n < 1:
        raise SystemExit(f"ADAGEO_THREADS must be a positive integer, got {raw!r}")
    return n


def _run_config(args):
    from .config import RunConfig, load_config
    cfg = load_config(args.config) if args.config else RunConfig()
    over = {}
    if getattr(args, "seed", None) is not None:
        over["seed"] = args.seed
    for name in ("domain", "shots", "margin", "lam", "alpha"):
        val = getattr(args, name, None)
        if val is not None:
            over[name] = val
    if getattr(args, "no_ddda", False):
        over["ddda"] = False
    if getattr(args, "no_att", False):
        over["attention"] = False
    if getattr(args, "no_da", False):
        over["da"] = False
    return cfg.with_overrides(**over)


def _dataset(args, cfg):
    from .geodata import load_manifest, render_dataset
    if getattr(args, "data", None) is not None:
        return load_manifest(args.data)
    return render_dataset(cfg.data, cfg.data_seed)


def _model_from_checkpoint(path: Path):
    from .checkpoint import load_checkpoint
    from .model import GeoNet, NetConfig
    state, hyper = load_checkpoint(path)
    net = hyper.get("net")
    if net is None:
        raise ValueError(f"{path}: checkpoint has no network configuration")
    net = {k: tuple(v) if isinstance(v, list) else v for k, v in net.items()}
    model = GeoNet(NetConfig(**net))
    model.load_state_dict(state)
    return model


def _save_model(model, path: Path, extra: dict | None = None):
    from dataclasses import asdict
    from .checkpoint import save_checkpoint
    save_checkpoint(path, model.state_dict(), {"net": asdict(model.cfg), **(extra or {})})


def _write(path: Path, text: str):
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(text)


# ---------------------------------------------------------------- subcommands

def cmd_gen_data(args, cfg, out: Path) -> int:
    from dataclasses import replace
    from .geodata import generate_synthetic
    kw = {k: v for k, v in (("places", args.places), ("image_size", args.image_size)) if v is not None}
    if kw:
        cfg.data = replace(cfg.data, **kw)
    if args.seed is not None:
        cfg.data_seed = args.seed
    man = generate_synthetic(cfg.data, cfg.data_seed, out)
    logger.info("wrote %d images to %s", len(man.rows), out)
    return 0


def cmd_train_ddda(args, cfg, out: Path) -> int:
    from dataclasses import asdict
    from .checkpoint import save_checkpoint
    from .geodata import stack_pixels
    from .trainer import ddda_source_images, select_shots
    from .ddda import train_ddda
    t = cfg.train
    if t.shots < 1:
        raise ValueError("train-ddda needs --shots >= 1")
    ds = _dataset(args, cfg)
    shots = select_shots(ds, t.domain, t.shots, t.seed)
    pair, trace = train_ddda(stack_pixels(ddda_source_images(ds)), stack_pixels(shots), t.ddda_cfg, t.seed)
    save_checkpoint(out / "ddda.ckpt", pair.state_dict(),
                    {"ddda": asdict(t.ddda_cfg), "domain": t.domain, "seed": t.seed,
                     "shots": [im.id for im in shots]})
    rows = ["epoch," + ",".join(trace.components[0]) if trace.components else "epoch"]
    rows += [f"{i + 1}," + ",".join(f"{v:.10f}" for v in c.values()) for i, c in enumerate(trace.components)]
    _write(out / "ddda_trace.csv", "\n".join(rows) + "\n")
    return 0


def cmd_make_pseudo(args, cfg, out: Path) -> int:
    from .checkpoint import load_checkpoint
    from .ddda import AutoencoderPair, DddaConfig, generate_pseudo_target
    from .geodata import write_manifest
    state, hyper = load_checkpoint(args.ddda)
    pair = AutoencoderPair(DddaConfig(**hyper["ddda"]))
    pair.load_state_dict(state)
    domain = hyper.get("domain", cfg.train.domain)
    ds = _dataset(args, cfg)
    src = ds.queries("train") + ds.queries("val")
    pseudo = generate_pseudo_target(pair, src, domain, ds.next_id())
    write_manifest(ds.extend(pseudo.images), out)
    logger.info("added %d pseudo-%s queries", len(pseudo), domain)
    return 0


def cmd_init_centroids(args, cfg, out: Path) -> int:
    import numpy as np
    from .checkpoint import save_checkpoint
    from .geodata import DomainLabel
    from .model import init_centroids
    from .trainer import pretrain_backbone, sample_embeddings, select_shots
    t = cfg.train
    ds = _dataset(args, cfg)
    model = _model_from_checkpoint(args.checkpoint) if args.checkpoint else pretrain_backbone(ds, t)
    model.cfg.attention = t.attention
    pools = [ds.gallery("train") + ds.queries("train"),
             ds.queries("train", DomainLabel("pseudo", t.domain)) if t.ddda else [],
             select_shots(ds, t.domain, t.shots, t.seed) if t.uses_target else []]
    rng = np.random.default_rng([t.seed, 401])
    layer = init_centroids(sample_embeddings(model, pools, t.kmeans_samples, rng), t.net.clusters, t.seed)
    save_checkpoint(out / "centroids.ckpt", {"centroids": layer.centroids}, {"K": layer.K, "D": layer.D})
    model.set_centroids(layer)
    _save_model(model, out / "model.ckpt")
    return 0


def _recall_outputs(out: Path, report, label: str):
    from .evaluate import table_csv
    rows = {label: report.row(1)}
    _write(out / "recall.csv", table_csv(rows, "method"))
    _write(out / "recall.json", report.to_json() + "\n")
    for n in report.Ns:
        _write(out / f"recall_at_{n}.csv", table_csv({label: report.row(n)}, "method"))


def cmd_train(args, cfg, out: Path) -> int:
    from .evaluate import DEFAULT_NS, RecallReport, evaluate_split
    from .trainer import PipelineCache, trace_csv, train_model
    t = cfg.train
    ds = _dataset(args, cfg)
    run = train_model(t, ds, PipelineCache(ds))
    _save_model(run.phase2.model, out / "model.ckpt", {"best_epoch": run.phase2.best_epoch})
    _write(out / "trace.csv", trace_csv(run.phase2.records))
    report = RecallReport(Ns=DEFAULT_NS)
    for d in ([t.domain] if t.domain in ds.target_domains() else []):
        q = ds.queries("test", f"target:{d}")
        report.add(d, t.seed, evaluate_split(run.phase2.model, ds.gallery("test"), q), len(q))
    if report.domains:
        _recall_outputs(out, report, t.label())
    return 0


def cmd_ablate(args, cfg, out: Path) -> int:
    from dataclasses import replace
    from .trainer import run_ablation_suite, run_shot_sweep, trace_csv
    ds = _dataset(args, cfg)
    res = run_ablation_suite(cfg.train, ds, args.seeds, args.domains)
    _write(out / "ablation.csv", res.csv(1))
    _write(out / "ablation.json", json.dumps({k: json.loads(r.to_json()) for k, r in res.reports.items()},
                                             indent=2, sort_keys=True) + "\n")
    for (label, seed, dom), recs in res.traces.items():
        _write(out / "traces" / f"{label}.seed{seed}.{dom}.csv", trace_csv(recs))
    if args.sweep_shots:
        sweep = run_shot_sweep(replace(cfg.train, ddda=True, attention=True, da=True), ds, args.sweep_shots,
                               args.seeds, args.domains)
        _write(out / "fewshot.csv", sweep.csv(1))
    return 0


def cmd_eval(args, cfg, out: Path) -> int:
    from .evaluate import RecallReport, evaluate_split
    model = _model_from_checkpoint(args.checkpoint)
    ds = _dataset(args, cfg)
    domains = args.domains or ds.target_domains()
    report = RecallReport(Ns=tuple(sorted(args.ns)))
    gallery = ds.gallery("test")
    for d in domains:
        q = ds.queries("test", f"target:{d}")
        if not q:
            raise ValueError(f"no test queries for domain {d!r}")
        report.add(d, cfg.train.seed, evaluate_split(model, gallery, q, args.ns), len(q))
    _recall_outputs(out, report, args.checkpoint.stem)
    return 0


def cmd_grad_check(args, cfg, out: Path) -> int:
    from .gradsuite import grl_contract, report, run_suite
    results = run_suite(points=args.points, seed=cfg.train.seed)
    text = report(results)
    for lam, fwd, bwd in grl_contract():
        text += f"{'ok  ' if fwd and bwd else 'FAIL'} grl.contract lambda={lam} forward_exact={fwd} backward_exact={bwd}\n"
    _write(out / "gradcheck.txt", text)
    sys.stdout.write(text)
    ok = all(r.passed for r in results) and all(f and b for _, f, b in grl_contract())
    return 0 if ok else 1


COMMANDS = {"gen-data": cmd_gen_data, "train-ddda": cmd_train_ddda, "make-pseudo": cmd_make_pseudo,
            "init-centroids": cmd_init_centroids, "train": cmd_train, "ablate": cmd_ablate, "eval": cmd_eval,
            "grad-check": cmd_grad_check}


def _publish(stage: Path, out: Path):
    out.mkdir(parents=True, exist_ok=True)
    for item in sorted(stage.iterdir()):
        dest = out / item.name
        if dest.is_dir():
            shutil.rmtree(dest)
        elif dest.exists():
            dest.unlink()
        item.rename(dest)


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=args.log_level, format="%(asctime)s %(levelname)s %(name)s: %(message)s")
    threads = _threads()
    for var in ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS"):
        os.environ.setdefault(var, str(threads))

    from .config import ConfigError, dump_config
    try:
        cfg = _run_config(args)
    except ConfigError as exc:
        print(f"adageo: config error: {exc}", file=sys.stderr)
        return 2
    except ValueError as exc:
        print(f"adageo: invalid option: {exc}", file=sys.stderr)
        return 2

    out = args.out.resolve()
    out.parent.mkdir(parents=True, exist_ok=True)
    stage = Path(tempfile.mkdtemp(prefix=f".{out.name}.partial-", dir=out.parent))
    try:
        status = COMMANDS[args.command](args, cfg, stage)
        _write(stage / "config.ini", dump_config(cfg))
        meta = {"command": args.command, "argv": list(sys.argv[1:] if argv is None else argv),
                "seed": cfg.train.seed, "data_seed": cfg.data_seed, "threads": threads, "status": status}
        if hasattr(args, "seeds"):
            meta["seeds"] = args.seeds
        _write(stage / "run.json", json.dumps(meta, indent=2, sort_keys=True) + "\n")
        _publish(stage, out)
        return status
    except Exception as exc:  # noqa: BLE001 - reported and mapped to an exit status
        logger.debug("failure", exc_info=True)
        print(f"adageo {args.command}: error: {exc}", file=sys.stderr)
        return 1
    finally:
        shutil.rmtree(stage, ignore_errors=True)


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())
