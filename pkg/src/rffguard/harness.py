"""End-to-end experiment: simulate, featurize, train, guard, attack, verify, report.

Every stage output is cached under ``<out_dir>/cache`` keyed by a digest of the
stage's own config plus its upstream digests, so changing one stage only
recomputes what depends on it.
"""
from __future__ import annotations

import json
import logging
import os
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
import torch

from . import attacks as atk
from . import classifier as clf
from . import frontend as fe
from . import guard as gd
from . import metrics as mt
from . import rf_sim
from . import watermark as wmk
from .checkpoint import Checkpoint
from .config import ExperimentConfig, digest_of

logger = logging.getLogger(__name__)

SPLITS = ("train", "val", "test", "unseen", "noise")
STAGES = ("featurize", "train", "guard_train", "evaluate", "verify", "guard_eval", "attacks")


class StageError(RuntimeError):
    def __init__(self, stage: str, cause: BaseException):
        super().__init__(f"stage '{stage}' failed: {type(cause).__name__}: {cause}")
        self.stage = stage


@dataclass
class Dataset:
    x: np.ndarray
    device: np.ndarray
    split: np.ndarray

    def part(self, name: str) -> tuple[np.ndarray, np.ndarray]:
        m = self.split == name
        return self.x[m], self.device[m]


@dataclass
class MetricsBundle:
    config_digest: str
    classifier: dict = field(default_factory=dict)
    watermark: dict = field(default_factory=dict)
    guard: dict = field(default_factory=dict)
    attacks: list = field(default_factory=list)
    timings: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        return asdict(self)

    def comparable(self) -> dict:
        """Everything except wall-clock timings, which no run can reproduce."""
        d = self.to_dict()
        d.pop("timings")
        return d

    def save(self, path: str | os.PathLike) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=2, sort_keys=True))

    @classmethod
    def load(cls, path: str | os.PathLike) -> "MetricsBundle":
        return cls(**json.loads(Path(path).read_text()))


# ---------------------------------------------------------------------------
# stages


def stage_data(cfg: ExperimentConfig, cache: Path) -> tuple[Dataset, str]:
    digest = digest_of({"dataset": asdict(cfg.dataset), "frontend": asdict(cfg.frontend)})
    grid_path = cache / f"features-{digest[:16]}.rfgf"
    meta_path = cache / f"features-{digest[:16]}.npz"
    if grid_path.exists() and meta_path.exists():
        meta = np.load(meta_path)
        return Dataset(fe.read_features(grid_path), meta["device"], meta["split"]), digest
    cfg.dataset.validate()
    records = rf_sim.plan_dataset(cfg.dataset)
    grids = np.stack([fe.featurize(iq, cfg.frontend).values for _, iq in rf_sim.iter_packets(cfg.dataset, records)])
    device = np.array([r.device_id for r in records], dtype=np.int64)
    split = np.array([r.split for r in records])
    fe.write_features(grid_path, grids)
    np.savez(meta_path, device=device, split=split)
    return Dataset(grids, device, split), digest


def _train_classifier(cfg: ExperimentConfig, data: Dataset, key: wmk.WatermarkKey | None,
                      wm_cfg: clf.WatermarkTrainConfig, digest: str) -> Checkpoint:
    xtr, ytr = data.part("train")
    xv, yv = data.part("val")
    c = cfg.classifier
    res = clf.train(xtr, ytr, xv, yv, cfg.dataset.device_count, preset=c.preset, wm_key=key, hyper=c.hyper,
                    wm_cfg=wm_cfg, epochs=c.epochs, seed=cfg.seed, aug=c.aug, config_digest=digest)
    res.checkpoint.metrics = {**res.checkpoint.metrics, "history": res.history}
    return res.checkpoint


def stage_classifiers(cfg: ExperimentConfig, data: Dataset, data_digest: str, cache: Path,
                      key: wmk.WatermarkKey) -> dict[str, Checkpoint]:
    c = cfg.classifier
    base = {"data": data_digest, "seed": cfg.seed, "preset": c.preset, "epochs": c.epochs,
            "hyper": asdict(c.hyper), "aug": asdict(c.aug), "key": key.header()}
    variants = {"watermarked": (key, c.wm)}
    if c.train_plain_trigger:
        variants["plain_trigger"] = (key, clf.WatermarkTrainConfig(**{**asdict(c.wm), "adversarial": False,
                                                                      "signature": False}))
    if c.train_baseline:
        variants["baseline"] = (None, c.wm)
    out = {}
    for name, (k, wm_cfg) in variants.items():
        digest = digest_of({**base, "wm": asdict(wm_cfg) if k is not None else None})
        path = cache / f"clf-{name}-{digest[:16]}.ckpt"
        if path.exists():
            out[name] = Checkpoint.load(path)
            continue
        logger.info("training classifier %s", name)
        ckpt = _train_classifier(cfg, data, k, wm_cfg, digest)
        ckpt.save(path)
        out[name] = ckpt
    return out


def stage_guard(cfg: ExperimentConfig, data: Dataset, data_digest: str, cache: Path) -> Checkpoint:
    digest = digest_of({"data": data_digest, "guard": asdict(cfg.guard)})
    path = cache / f"vae-{digest[:16]}.ckpt"
    if path.exists():
        return Checkpoint.load(path)
    res = gd.train_guard(data.part("train")[0], data.part("val")[0], cfg.guard, config_digest=digest)
    res.checkpoint.metrics = {**res.checkpoint.metrics, "history": res.history}
    res.checkpoint.save(path)
    return res.checkpoint


# ---------------------------------------------------------------------------
# evaluation helpers


def _subset(n: int, count: int, seed: int, stream: int) -> np.ndarray:
    rng = np.random.default_rng([stream, int(seed)])
    return np.sort(rng.choice(n, size=min(count, n), replace=False))


def _trigger_asr(model, key, probes) -> float:
    return float(np.mean(wmk.predict_labels(model, wmk.apply_trigger(probes, key)) == key.y_wm))


def _pool_metrics(clean: np.ndarray, anomalous: np.ndarray, calib: gd.GuardCalibration) -> dict:
    s = np.r_[clean, anomalous]
    y = np.r_[np.zeros(len(clean), bool), np.ones(len(anomalous), bool)]
    flags = gd.decide(s, calib)
    return {"auroc": mt.auroc(s, y), "ap": mt.average_precision(s, y), "count": int(len(anomalous)),
            "flag_rate": float(np.mean(gd.decide(anomalous, calib))), **mt.precision_recall_f1(flags, y)}


def _steps(steps) -> tuple:
    return tuple((m, dict(p or {})) for m, p in steps)


def run_attack(spec: dict, cfg: ExperimentConfig, data: Dataset, ckpt: Checkpoint, key: wmk.WatermarkKey,
               probes: np.ndarray, vae: gd.ConvVAE, calib: gd.GuardCalibration) -> atk.AttackReport:
    kind = spec["kind"]
    params = {k: v for k, v in spec.items() if k != "kind"}
    model = clf.model_from_checkpoint(ckpt)
    xte, yte = data.part("test")
    pre_acc = clf.evaluate(model, xte, yte).accuracy
    pre_asr = _trigger_asr(model, key, probes)
    pre_sig = wmk.verify_signature(model, key, probes).score
    rep = atk.AttackReport(kind, params, clean_acc_pre=pre_acc, asr_pre=pre_asr, signature_pre=pre_sig)
    if kind in ("prune", "quantize", "finetune"):
        if kind == "prune":
            attacked = atk.prune(ckpt, float(params.get("rho", 0.3)))
        elif kind == "quantize":
            attacked = atk.quantize(ckpt, int(params.get("bits", 8)))
        else:
            xa, ya = data.part("val")  # the attacker's own labelled data
            attacked = atk.finetune(ckpt, xa, ya, int(params.get("epochs", 3)), float(params.get("lr", 1e-4)),
                                    seed=cfg.seed)
        m2 = clf.model_from_checkpoint(attacked)
        sig = wmk.verify_signature(m2, key, probes)
        rep.clean_acc_post = clf.evaluate(m2, xte, yte).accuracy
        rep.asr_post = _trigger_asr(m2, key, probes)
        rep.signature_post = sig.score
        rep.signature_pass_post = sig.passed
    elif kind == "sanitize":
        steps = _steps(params.get("steps", wmk.DEFAULT_SANITIZE))
        trig = atk.sanitize_chain(wmk.apply_trigger(probes, key), steps, seed=cfg.seed)
        clean = atk.sanitize_chain(xte, steps, seed=cfg.seed + 1000)
        rep.asr_post = float(np.mean(wmk.predict_labels(model, trig) == key.y_wm))
        rep.clean_acc_post = clf.evaluate(model, clean, yte).accuracy
        rep.signature_post = pre_sig
        rep.signature_pass_post = pre_sig >= wmk.SIGNATURE_THRESHOLD
        rep.guard_flag_rate = float(np.mean(gd.decide(gd.anomaly_score(vae, trig, calib.alpha), calib)))
    elif kind == "evade":
        idx = _subset(len(xte), int(params.get("count", 200)), cfg.seed, 0x45564144)
        eps = float(params.get("eps", 0.25))
        adv, changed = atk.evade(model, xte[idx], yte[idx], eps, int(params.get("steps", 10)))
        adv_scores = gd.anomaly_score(vae, adv, calib.alpha)
        clean_scores = gd.anomaly_score(vae, xte, calib.alpha)
        rep.clean_acc_post = clf.evaluate(model, adv, yte[idx]).accuracy
        rep.guard_flag_rate = float(np.mean(gd.decide(adv_scores, calib)))
        rep.extra = {"success_rate": float(np.mean(changed)),
                     "guard_auroc": _pool_metrics(clean_scores, adv_scores, calib)["auroc"]}
    else:
        raise ValueError(f"unknown attack kind {kind!r}")
    return rep


# ---------------------------------------------------------------------------
# orchestration


def _timed(stage: str, timings: dict, fn, *args, **kw):
    t0 = time.perf_counter()
    try:
        out = fn(*args, **kw)
    except Exception as e:
        raise StageError(stage, e) from e
    timings[stage] = time.perf_counter() - t0
    logger.info("stage %s done in %.1fs", stage, timings[stage])
    return out


def run_experiment(cfg: ExperimentConfig, out_dir: str | os.PathLike | None = None) -> MetricsBundle:
    out = Path(out_dir or cfg.out_dir)
    cache = out / "cache"
    cache.mkdir(parents=True, exist_ok=True)
    torch.manual_seed(cfg.seed)
    digest = cfg.digest()
    cfg.save(out / "config.yaml")
    with open(out / "config.yaml", "a") as fh:
        fh.write(f"# digest: {digest}\n")
    timings: dict[str, float] = {}
    bundle = MetricsBundle(digest, timings=timings)

    data, data_digest = _timed("featurize", timings, stage_data, cfg, cache)
    key = wmk.gen_key(cfg.classifier.key_seed, cfg.dataset.device_count, clf.PRESETS[cfg.classifier.preset].feature_dim)
    key.save(out / "watermark.key")
    ckpts = _timed("train", timings, stage_classifiers, cfg, data, data_digest, cache, key)
    vae_ckpt = _timed("guard_train", timings, stage_guard, cfg, data, data_digest, cache)
    for name, ck in [*(("classifier-" + k, v) for k, v in ckpts.items()), ("guard", vae_ckpt)]:
        published = ck.copy()
        published.metrics = {**published.metrics, "stage_digest": ck.config_digest}
        published.config_digest = digest
        published.save(out / f"{name}.ckpt")

    xte, yte = data.part("test")
    probe_idx = _subset(len(xte), cfg.verify.probe_count, key.key_seed, 0x50524F42)
    probes = xte[probe_idx]
    sanitize = _steps(cfg.verify.sanitize)

    def evaluate_classifiers():
        res = {}
        for name, ck in ckpts.items():
            m = clf.model_from_checkpoint(ck)
            res[name] = {"eval": clf.evaluate(m, xte, yte).to_dict(), "best_epoch": ck.epoch,
                         "val": {k: v for k, v in ck.metrics.items() if k.startswith("val_")}}
        return res

    bundle.classifier = _timed("evaluate", timings, evaluate_classifiers)

    def verify():
        res = {}
        for name, ck in ckpts.items():
            if name == "baseline":
                continue
            m = clf.model_from_checkpoint(ck)
            entry = {}
            for mode in ("plain", "adversarial", "sanitized"):
                entry[mode] = asdict(wmk.verify_trigger(m, key, probes, mode, sanitize_steps=sanitize, seed=cfg.seed))
            entry["signature"] = asdict(wmk.verify_signature(m, key, probes))
            res[name] = entry
        m = clf.model_from_checkpoint(ckpts["watermarked"])
        wrong = [wmk.verify_signature(m, wmk.gen_key(10_000 + i, key.num_classes, key.feature_dim), probes).passed
                 for i in range(cfg.verify.wrong_keys)]
        res["wrong_key_pass_rate"] = float(np.mean(wrong)) if wrong else 0.0
        return res

    bundle.watermark = _timed("verify", timings, verify)

    vae = gd.vae_from_checkpoint(vae_ckpt)

    def guard_metrics():
        a = cfg.guard.alpha
        calib = gd.calibrate_threshold(gd.anomaly_score(vae, data.part("val")[0], a), cfg.guard.target_fpr, a)
        clean = gd.anomaly_score(vae, xte, a)
        pools = {"unseen": gd.anomaly_score(vae, data.part("unseen")[0], a),
                 "noise": gd.anomaly_score(vae, data.part("noise")[0], a)}
        pools["pooled"] = np.r_[pools["unseen"], pools["noise"]]
        pools["trigger"] = gd.anomaly_score(vae, wmk.apply_trigger(probes, key), a)
        kept = mt.keep_rate(gd.decide(clean, calib))
        hist = vae_ckpt.metrics.get("history", [])
        res = {"calibration": calib.to_dict(), "keep_rate": kept, "test_fpr": 1.0 - kept, "test_count": int(len(clean)),
               "pools": {k: _pool_metrics(clean, v, calib) for k, v in pools.items()},
               "mean_score": {"clean": float(clean.mean()), **{k: float(v.mean()) for k, v in pools.items()}},
               "best_epoch": vae_ckpt.epoch,
               "val_mse_first": hist[0]["val_mse"] if hist else None,
               "val_mse_best": hist[vae_ckpt.epoch]["val_mse"] if hist else None}
        res["auroc"] = res["pools"]["pooled"]["auroc"]
        res["ap"] = res["pools"]["pooled"]["ap"]
        return res, calib

    bundle.guard, calib = _timed("guard_eval", timings, guard_metrics)

    def attack_all():
        return [run_attack(spec, cfg, data, ckpts["watermarked"], key, probes, vae, calib).to_dict()
                for spec in cfg.attacks]

    bundle.attacks = _timed("attacks", timings, attack_all)
    bundle.save(out / "metrics.json")
    (out / "report.md").write_text(render_report(bundle))
    return bundle


# ---------------------------------------------------------------------------
# report


def _pct(x) -> str:
    return "n/a" if x is None else f"{100 * x:.2f}"


def render_report(b: MetricsBundle | dict) -> str:
    d = b.to_dict() if isinstance(b, MetricsBundle) else b
    lines = [f"# Experiment report", "", f"config digest: `{d['config_digest']}`", ""]
    g = d.get("guard") or {}
    if g:
        lines += ["## Anomaly guard (threshold at {:.0%} clean FPR)".format(g["calibration"]["target_fpr"]), "",
                  "| Model | Keep Rate(%) | AUROC | AP |", "|---|---|---|---|",
                  f"| Robust ConvVAE (KL warm-up + free-bits) | {_pct(g['keep_rate'])} | {g['auroc']:.3f} | {g['ap']:.3f} |",
                  "", "| Anomaly pool | count | AUROC | AP | flagged(%) |", "|---|---|---|---|---|"]
        order = [k for k in ("unseen", "noise", "pooled", "trigger") if k in g["pools"]]
        for name in order + sorted(set(g["pools"]) - set(order)):
            p = g["pools"][name]
            lines.append(f"| {name} | {p['count']} | {p['auroc']:.3f} | {p['ap']:.3f} | {_pct(p['flag_rate'])} |")
        lines.append("")
    c = (d.get("classifier") or {}).get("watermarked")
    if c:
        e = c["eval"]
        lines += ["## Classifier on seen devices", "",
                  "| Metric | Macro Avg. (%) | Weighted Avg. (%) | Min Class (%) | Max Class (%) |",
                  "|---|---|---|---|---|"]
        for m in ("precision", "recall", "f1"):
            lines.append(f"| {m} | {_pct(e['macro'][m])} | {_pct(e['weighted'][m])} | "
                         f"{_pct(e['min_class'][m])} | {_pct(e['max_class'][m])} |")
        lines += [f"| accuracy | {_pct(e['accuracy'])} (overall test accuracy) | | | |", ""]
    w = d.get("watermark") or {}
    if w:
        cls = d.get("classifier") or {}
        atts = {a["kind"]: a for a in d.get("attacks") or []}

        def acc(name):
            return _pct(cls[name]["eval"]["accuracy"]) if name in cls else "n/a"

        pq = [atts[k] for k in ("prune", "quantize") if k in atts]
        lines += ["## Watermarks", "",
                  "| Watermark | Clean Acc. (%) | ASR (%) | ASR after prune/quant (%) | ASR after sanitization (%) | Verification |",
                  "|---|---|---|---|---|---|"]
        if "baseline" in cls:
            lines.append(f"| None | {acc('baseline')} | n/a | n/a | n/a | n/a |")
        if "plain_trigger" in w:
            p = w["plain_trigger"]
            lines.append(f"| Trigger | {acc('plain_trigger')} | {_pct(p['plain']['score'])} | n/a | "
                         f"{_pct(p['sanitized']['score'])} | trigger query -> y_wm |")
        if "watermarked" in w:
            p = w["watermarked"]
            post = " / ".join(_pct(a["asr_post"]) for a in pq) or "n/a"
            lines.append(f"| Adversarial trigger | {acc('watermarked')} | {_pct(p['adversarial']['score'])} | {post} | "
                         f"{_pct(p['sanitized']['score'])} | perturbed trigger query |")
            sig = " / ".join(f"{a['signature_post']:.3f}" for a in pq) or "n/a"
            lines.append(f"| Signature | {acc('watermarked')} | n/a | cos {sig} | input-agnostic | "
                         f"cos {p['signature']['score']:.3f} (pass {p['signature']['passed']}) |")
        lines += ["", f"wrong-key signature pass rate: {_pct(w.get('wrong_key_pass_rate'))}%", ""]
    if d.get("attacks"):
        lines += ["## Attacks", "",
                  "| Attack | Params | Acc pre | Acc post | ASR pre | ASR post | Sig pre | Sig post | Guard flagged(%) |",
                  "|---|---|---|---|---|---|---|---|---|"]
        for a in d["attacks"]:
            sp = "n/a" if a["signature_post"] is None else f"{a['signature_post']:.3f}"
            lines.append(f"| {a['kind']} | {json.dumps(a['params'], sort_keys=True)} | {_pct(a['clean_acc_pre'])} | "
                         f"{_pct(a['clean_acc_post'])} | {_pct(a['asr_pre'])} | {_pct(a['asr_post'])} | "
                         f"{a['signature_pre']:.3f} | {sp} | {_pct(a['guard_flag_rate'])} |")
        lines.append("")
    if d.get("timings"):
        t = d["timings"]
        order = [k for k in STAGES if k in t] + sorted(set(t) - set(STAGES))
        lines += ["## Timings (s)", ""] + [f"- {k}: {t[k]:.1f}" for k in order] + [""]
    return "\n".join(lines)
