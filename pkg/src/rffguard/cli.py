"""Command-line entry point (`rffguard ...`)."""
from __future__ import annotations

import argparse
import json
import logging
import sys
from dataclasses import asdict
from pathlib import Path

import numpy as np

from . import attacks as atk
from . import classifier as clf
from . import frontend as fe
from . import guard as gd
from . import harness
from . import rf_sim
from . import watermark as wmk
from .checkpoint import Checkpoint
from .config import ExperimentConfig

logger = logging.getLogger("rffguard")


def _config(path: str | None) -> ExperimentConfig:
    return ExperimentConfig.load(path) if path else ExperimentConfig()


def _feature_path(manifest: Path, split: str) -> Path:
    return manifest.parent / "features" / f"{split}.rfgf"


def load_split(manifest_path: str, split: str, frontend_cfg: fe.FrontendConfig | None = None
               ) -> tuple[np.ndarray, np.ndarray, list[str]]:
    """Grids, device ids and IQ paths for one split; uses the feature cache when present."""
    mpath = Path(manifest_path)
    manifest = rf_sim.DatasetManifest.load(mpath)
    recs = manifest.split(split) if split != "all" else manifest.records
    if not recs:
        raise ValueError(f"split {split!r} is empty in {mpath}")
    labels = np.array([r.device_id for r in recs], dtype=np.int64)
    paths = [r.path for r in recs]
    cached = _feature_path(mpath, split)
    if cached.exists():
        grids = fe.read_features(cached)
        if len(grids) == len(recs):
            return grids, labels, paths
    grids = fe.featurize_many((rf_sim.read_iq(mpath.parent / p) for p in paths), frontend_cfg)
    return grids, labels, paths


# ---------------------------------------------------------------------------
# subcommands


def cmd_simulate(a) -> int:
    cfg = _config(a.config)
    m = rf_sim.build_dataset(cfg.dataset, a.out)
    print(json.dumps(m.counts()))
    return 0


def cmd_featurize(a) -> int:
    cfg = _config(a.config)
    mpath = Path(a.manifest)
    manifest = rf_sim.DatasetManifest.load(mpath)
    (mpath.parent / "features").mkdir(exist_ok=True)
    for split in sorted(manifest.counts()):
        grids, _, _ = load_split(a.manifest, split, cfg.frontend)
        fe.write_features(_feature_path(mpath, split), grids)
        print(f"{split}: {grids.shape}")
    return 0


def cmd_train(a) -> int:
    cfg = _config(a.config)
    xtr, ytr, _ = load_split(a.manifest, "train", cfg.frontend)
    xv, yv, _ = load_split(a.manifest, "val", cfg.frontend)
    c = cfg.classifier
    key = None
    if not a.no_watermark:
        key = wmk.gen_key(c.key_seed, cfg.dataset.device_count, clf.PRESETS[c.preset].feature_dim)
        key.save(a.key)
    res = clf.train(xtr, ytr, xv, yv, cfg.dataset.device_count, preset=c.preset, wm_key=key, hyper=c.hyper,
                    wm_cfg=c.wm, epochs=c.epochs if a.epochs is None else a.epochs, seed=cfg.seed, aug=c.aug,
                    config_digest=cfg.digest())
    res.checkpoint.save(a.out)
    print(json.dumps({"best_epoch": res.best_epoch, **res.checkpoint.metrics}))
    return 0


def cmd_eval(a) -> int:
    model = clf.model_from_checkpoint(Checkpoint.load(a.ckpt))
    x, y, _ = load_split(a.manifest, a.split)
    rep = clf.evaluate(model, x, y).to_dict()
    text = json.dumps(rep, indent=2)
    if a.report:
        Path(a.report).write_text(text)
    print(json.dumps({"accuracy": rep["accuracy"], "wm_prediction_rate": rep["wm_prediction_rate"]}))
    return 0


def cmd_wm_genkey(a) -> int:
    key = wmk.gen_key(a.seed, a.classes, a.feature_dim)
    key.save(a.out)
    print(json.dumps(key.header()))
    return 0


def cmd_wm_verify(a) -> int:
    model = clf.model_from_checkpoint(Checkpoint.load(a.ckpt))
    key = wmk.WatermarkKey.load(a.key)
    pool, _, _ = load_split(a.manifest, a.split)
    probes = wmk.select_probes(key, pool, a.probes)
    if a.mode == "signature":
        res = wmk.verify_signature(model, key, probes)
    else:
        res = wmk.verify_trigger(model, key, probes, a.mode)
    print(json.dumps(asdict(res)))
    return 0 if res.passed else 1


def cmd_guard_train(a) -> int:
    cfg = _config(a.config)
    xtr, _, _ = load_split(a.manifest, "train", cfg.frontend)
    xv, _, _ = load_split(a.manifest, "val", cfg.frontend)
    gcfg = cfg.guard if a.epochs is None else gd.GuardTrainConfig(**{**asdict(cfg.guard), "max_epochs": a.epochs})
    res = gd.train_guard(xtr, xv, gcfg, config_digest=cfg.digest())
    res.checkpoint.save(a.out)
    print(json.dumps({"best_epoch": res.best_epoch, **res.checkpoint.metrics}))
    return 0


def cmd_guard_calibrate(a) -> int:
    vae = gd.vae_from_checkpoint(Checkpoint.load(a.ckpt))
    x, _, _ = load_split(a.manifest, a.split)
    calib = gd.calibrate_threshold(gd.anomaly_score(vae, x, a.alpha), a.fpr, a.alpha, min_count=a.min_count)
    Path(a.out).write_text(json.dumps(calib.to_dict(), indent=2))
    print(json.dumps({"tau": calib.tau, "achieved_fpr": calib.achieved_fpr, "count": calib.count}))
    return 0


def cmd_guard_score(a) -> int:
    vae = gd.vae_from_checkpoint(Checkpoint.load(a.ckpt))
    calib = gd.GuardCalibration(**json.loads(Path(a.calibration).read_text()))
    x, _, paths = load_split(a.manifest, a.split)
    decisions, scores = gd.guard_decision(vae, x, calib)
    out = open(a.out, "w") if a.out else sys.stdout
    for p, s, d in zip(paths, scores, decisions):
        out.write(json.dumps({"path": p, "score": float(s), "decision": d}) + "\n")
    if a.out:
        out.close()
    return 0


def cmd_attack(a) -> int:
    ckpt = Checkpoint.load(a.ckpt)
    if a.kind == "prune":
        out = atk.prune(ckpt, a.rho)
    elif a.kind == "quantize":
        out = atk.quantize(ckpt, a.bits)
    else:
        x, y, _ = load_split(a.manifest, a.split)
        out = atk.finetune(ckpt, x, y, a.epochs, a.lr, seed=a.seed)
    out.save(a.out)
    print(json.dumps(out.metrics.get("attack", {})))
    return 0


def cmd_run(a) -> int:
    cfg = _config(a.config)
    bundle = harness.run_experiment(cfg, a.out)
    print(json.dumps({"config_digest": bundle.config_digest, "timings": bundle.timings}))
    return 0


def cmd_report(a) -> int:
    d = json.loads(Path(a.metrics).read_text())
    text = harness.render_report(d)
    if a.out:
        Path(a.out).write_text(text)
    else:
        print(text)
    return 0


# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="rffguard", description="RF fingerprint classifier with watermarks and an anomaly guard")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("simulate", help="render the synthetic LoRa dataset to IQ files")
    s.add_argument("--config")
    s.add_argument("--out", required=True)
    s.set_defaults(fn=cmd_simulate)

    s = sub.add_parser("featurize", help="cache log-Mel grids for every split of a manifest")
    s.add_argument("--config")
    s.add_argument("--manifest", required=True)
    s.set_defaults(fn=cmd_featurize)

    s = sub.add_parser("train", help="train a (watermarked) classifier")
    s.add_argument("--config")
    s.add_argument("--manifest", required=True)
    s.add_argument("--out", required=True, help="checkpoint path")
    s.add_argument("--key", default="watermark.key")
    s.add_argument("--epochs", type=int)
    s.add_argument("--no-watermark", action="store_true")
    s.set_defaults(fn=cmd_train)

    s = sub.add_parser("eval", help="evaluate a classifier checkpoint")
    s.add_argument("--ckpt", required=True)
    s.add_argument("--manifest", required=True)
    s.add_argument("--split", default="test")
    s.add_argument("--report")
    s.set_defaults(fn=cmd_eval)

    wm = sub.add_parser("wm", help="watermark key management and verification")
    wsub = wm.add_subparsers(dest="wm_command", required=True)
    s = wsub.add_parser("genkey")
    s.add_argument("--seed", type=int, required=True)
    s.add_argument("--classes", type=int, default=10)
    s.add_argument("--feature-dim", type=int, default=64)
    s.add_argument("--out", required=True)
    s.set_defaults(fn=cmd_wm_genkey)
    s = wsub.add_parser("verify")
    s.add_argument("--ckpt", required=True)
    s.add_argument("--key", required=True)
    s.add_argument("--manifest", required=True)
    s.add_argument("--split", default="test")
    s.add_argument("--mode", choices=("plain", "adversarial", "sanitized", "signature"), default="plain")
    s.add_argument("--probes", type=int, default=64)
    s.set_defaults(fn=cmd_wm_verify)

    g = sub.add_parser("guard", help="ConvVAE anomaly guard")
    gsub = g.add_subparsers(dest="guard_command", required=True)
    s = gsub.add_parser("train")
    s.add_argument("--config")
    s.add_argument("--manifest", required=True)
    s.add_argument("--out", required=True)
    s.add_argument("--epochs", type=int)
    s.set_defaults(fn=cmd_guard_train)
    s = gsub.add_parser("calibrate")
    s.add_argument("--ckpt", required=True)
    s.add_argument("--manifest", required=True)
    s.add_argument("--split", default="val")
    s.add_argument("--fpr", type=float, default=0.05)
    s.add_argument("--alpha", type=float, default=0.5)
    s.add_argument("--min-count", type=int, default=200)
    s.add_argument("--out", required=True)
    s.set_defaults(fn=cmd_guard_calibrate)
    s = gsub.add_parser("score")
    s.add_argument("--ckpt", required=True)
    s.add_argument("--calibration", required=True)
    s.add_argument("--manifest", required=True)
    s.add_argument("--split", default="all")
    s.add_argument("--out")
    s.set_defaults(fn=cmd_guard_score)

    s = sub.add_parser("attack", help="tamper with a checkpoint")
    s.add_argument("kind", choices=("prune", "quantize", "finetune"))
    s.add_argument("--ckpt", required=True)
    s.add_argument("--out", required=True)
    s.add_argument("--rho", type=float, default=0.3)
    s.add_argument("--bits", type=int, default=8)
    s.add_argument("--epochs", type=int, default=3)
    s.add_argument("--lr", type=float, default=1e-4)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--manifest")
    s.add_argument("--split", default="val")
    s.set_defaults(fn=cmd_attack)

    s = sub.add_parser("run", help="full experiment from a config file")
    s.add_argument("--config")
    s.add_argument("--out")
    s.set_defaults(fn=cmd_run)

    s = sub.add_parser("report", help="render metrics.json as markdown tables")
    s.add_argument("--metrics", required=True)
    s.add_argument("--out")
    s.set_defaults(fn=cmd_report)
    return p


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(asctime)s %(name)s %(levelname)s %(message)s")
    if getattr(args, "kind", None) == "finetune" and not args.manifest:
        print("error: finetune needs --manifest", file=sys.stderr)
        return 2
    try:
        return args.fn(args)
    except harness.StageError as e:
        print(f"error: {e}", file=sys.stderr)
        return 1
    except (ValueError, FileNotFoundError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
