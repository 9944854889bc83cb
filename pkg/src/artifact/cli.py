"""``bvscreen``: run the pre-hoc and post-hoc pipelines stage by stage inside a run directory."""

from __future__ import annotations

import argparse
import csv
import json
import logging
import os
import sys
from pathlib import Path

import numpy as np

from . import metrics as M
from .config import ExperimentConfig
from .detect.dqn import QNetwork, read_detections_csv, train_detector, write_detections_csv
from .detect.env import BoundingVolume, EmbeddingCache, PatchEncoder, train_patch_encoder
from .grad import init_params, load_checkpoint, save_checkpoint
from .meta import fine_tune, meta_train, probabilities
from .phantom import generate_dataset, make_split, patient_ids, read_dataset, select, write_dataset
from .prehoc import Classifier, detections_for, score_breasts, train_classifier, write_scores_csv
from .saliency import eer_threshold, localize, train_saliency, write_mask

log = logging.getLogger("bvscreen")


class MissingArtifact(RuntimeError):
    pass


# -- run directory -------------------------------------------------------------------------


class Run:
    def __init__(self, out: Path, cfg: ExperimentConfig):
        self.out = out
        self.cfg = cfg
        out.mkdir(parents=True, exist_ok=True)

    def path(self, name: str) -> Path:
        return self.out / name

    def need(self, name: str, producer: str) -> Path:
        p = self.path(name)
        if not p.exists():
            raise MissingArtifact(f"missing {p}; run `bvscreen {producer} --out {self.out}` first")
        return p

    def data(self):
        self.need("data/manifest.jsonl", "gen-data")
        samples, split = read_dataset(self.path("data"))
        return {name: select(samples, getattr(split, name)) for name in ("train", "val", "test")}

    def checkpoint(self, name: str, producer: str):
        return load_checkpoint(self.need(name, producer))

    def encoder(self) -> PatchEncoder:
        spec, params = self.checkpoint("encoder.ckpt", "train-encoder")
        return PatchEncoder(spec, params)

    def detector(self) -> QNetwork:
        spec, params = self.checkpoint("detector.ckpt", "train-detector")
        return QNetwork(spec, params, params.copy())

    def write_json(self, name: str, obj) -> None:
        self.path(name).write_text(json.dumps(obj, sort_keys=True, indent=1) + "\n")

    def read_json(self, name: str, producer: str):
        return json.loads(self.need(name, producer).read_text())


def _save_config(run: Run) -> None:
    run.path("config.ini").write_text(run.cfg.to_ini())


# -- stages ---------------------------------------------------------------------------------------


def gen_data(run: Run) -> None:
    cfg = run.cfg
    seed = cfg.stage_seed("gen-data")
    pcfg = cfg.phantom()
    n = cfg["data.patients"]
    samples = generate_dataset(n, pcfg, seed)
    split = make_split(patient_ids(n), cfg["data.split"], seed)
    write_dataset(samples, run.path("data"), split, pcfg)
    log.info("wrote %d breasts (%d/%d/%d patients)", len(samples), len(split.train), len(split.val), len(split.test))


def train_encoder_stage(run: Run) -> None:
    d = run.data()
    enc, acc = train_patch_encoder(d["train"], run.cfg.encoder(), run.cfg.stage_seed("train-encoder"))
    save_checkpoint(run.path("encoder.ckpt"), enc.spec, enc.params)
    run.write_json("encoder.json", {"heldout_patch_accuracy": acc})


def train_detector_stage(run: Run) -> None:
    d = run.data()
    enc = run.encoder()
    res = train_detector(d["train"], d["val"], enc, run.cfg.detector(), run.cfg.stage_seed("train-detector"),
                         checkpoint_dir=run.out)
    save_checkpoint(run.path("detector.ckpt"), res.q.spec, res.q.params)
    with open(run.path("detector_log.csv"), "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["epoch", "epsilon", "episodes", "steps", "triggers", "good_triggers", "mean_loss"])
        for s in res.history:
            w.writerow([s.epoch, repr(s.epsilon), s.episodes, s.steps, s.triggers, s.good_triggers, repr(s.mean_loss)])
    run.write_json("detector.json", {"best_epoch": res.best_epoch, "val_tpr_at_max_fpp": res.best_score})


def _detections(run: Run, split: str, samples, q, cache) -> dict:
    path = run.path(f"detections_{split}.csv")
    dets = detections_for(samples, q, cache, max_steps=run.cfg["detector.max_steps"],
                          merge_dice=run.cfg["detector.merge_dice"])
    write_detections_csv(path, [(bid, det) for bid, ds in dets.items() for det in ds])
    return dets


def _read_detections(run: Run, split: str, samples) -> dict:
    got = read_detections_csv(run.need(f"detections_{split}.csv", "train-classifier" if split != "test" else "infer"))
    return {s.breast_id: got.get(s.breast_id, []) for s in samples}


def train_classifier_stage(run: Run) -> None:
    d = run.data()
    q = run.detector()
    cache = EmbeddingCache(run.encoder())
    dtr = _detections(run, "train", d["train"], q, cache)
    dva = _detections(run, "val", d["val"], q, cache)
    res = train_classifier(d["train"], dtr, d["val"], dva, run.cfg.classifier(), run.cfg.stage_seed("train-classifier"))
    save_checkpoint(run.path("classifier.ckpt"), res.classifier.spec, res.classifier.params)
    run.write_json("classifier.json", {"best_epoch": res.best_epoch, "val_breast_auc": res.best_auc})


def meta_train_stage(run: Run) -> None:
    d = run.data()
    mcfg = run.cfg.meta()
    spec = mcfg.net.network()
    init = init_params(spec, run.cfg.stage_seed("meta-train"))
    save_checkpoint(run.path("init.ckpt"), spec, init)
    res = meta_train(d["train"], mcfg, run.cfg.stage_seed("meta-train"), init=init, log_path=run.path("meta_log.csv"))
    save_checkpoint(run.path("meta.ckpt"), res.spec, res.params)


def fine_tune_stage(run: Run) -> None:
    d = run.data()
    spec, meta_params = run.checkpoint("meta.ckpt", "meta-train")
    _, init = run.checkpoint("init.ckpt", "meta-train")
    init.training = False
    seed = run.cfg.stage_seed("fine-tune")
    ft = fine_tune(spec, meta_params, d["train"], d["val"], run.cfg.finetune(), seed)
    scratch = fine_tune(spec, init, d["train"], d["val"], run.cfg.finetune(), seed)
    save_checkpoint(run.path("screen.ckpt"), spec, ft.params)
    save_checkpoint(run.path("scratch.ckpt"), spec, scratch.params)
    run.write_json("fine_tune.json", {
        "meta": {"best_epoch": ft.best_epoch, "val_auc": ft.best_val_auc, "history": ft.history},
        "scratch": {"best_epoch": scratch.best_epoch, "val_auc": scratch.best_val_auc, "history": scratch.history},
    })


def train_saliency_stage(run: Run) -> None:
    d = run.data()
    spec, enc = run.checkpoint("screen.ckpt", "fine-tune")
    xv = np.stack([s.volume for s in d["val"]])
    tau = eer_threshold(probabilities(spec, enc, xv), [s.malignant for s in d["val"]])
    xt = np.stack([s.volume for s in d["train"]])
    dcfg = run.cfg.saliency()
    res = train_saliency(xt, [s.malignant for s in d["train"]], spec, enc, dcfg, run.cfg.stage_seed("train-saliency"))
    save_checkpoint(run.path("saliency.ckpt"), dcfg.to_dict(), res.decoder)
    run.write_json("saliency.json", {"tau_eer": tau, "history": res.history})


def _pipelines(run: Run) -> list[str]:
    p = run.cfg["run.pipeline"]
    if p not in ("pre-hoc", "post-hoc", "both"):
        raise ValueError(f"pipeline must be pre-hoc, post-hoc or both, not {p!r}")
    return ["pre-hoc", "post-hoc"] if p == "both" else [p]


def infer_stage(run: Run) -> None:
    d = run.data()
    test = d["test"]
    pipes = _pipelines(run)
    if "pre-hoc" in pipes:
        q = run.detector()
        cache = EmbeddingCache(run.encoder())
        spec, params = run.checkpoint("classifier.ckpt", "train-classifier")
        dets = _detections(run, "test", test, q, cache)
        write_scores_csv(run.path("prehoc_scores.csv"), test, score_breasts(test, dets, Classifier(spec, params)))
    if "post-hoc" in pipes:
        spec, enc = run.checkpoint("screen.ckpt", "fine-tune")
        _, scratch = run.checkpoint("scratch.ckpt", "fine-tune")
        _, dec = run.checkpoint("saliency.ckpt", "train-saliency")
        info = run.read_json("saliency.json", "train-saliency")
        zeta, min_c = run.cfg["saliency.zeta"], run.cfg["saliency.min_component"]
        xt = np.stack([s.volume for s in test])
        write_scores_csv(run.path("scratch_scores.csv"), test,
                         dict(zip([s.breast_id for s in test], probabilities(spec, scratch, xt).tolist())))
        scores = {}
        mask_dir = run.path("masks")
        mask_dir.mkdir(exist_ok=True)
        with open(run.path("posthoc_regions.csv"), "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["breast_id", "diagnosed", "x0", "y0", "z0", "x1", "y1", "z1", "voxels", "score"])
            for s in test:
                loc = localize(s.volume, spec, enc, dec, info["tau_eer"], zeta, min_c)
                scores[s.breast_id] = loc.score
                if loc.mask is not None:
                    write_mask(mask_dir / f"{s.breast_id}.mask", loc.mask)
                    np.save(mask_dir / f"{s.breast_id}.regions.npy",
                            np.stack([r.mask for r in loc.regions]) if loc.regions else np.zeros((0, *s.volume.shape), bool))
                for r in loc.regions:
                    w.writerow([s.breast_id, int(loc.positive), *r.box, int(r.mask.sum()), repr(r.score)])
                if not loc.regions:
                    w.writerow([s.breast_id, int(loc.positive), "", "", "", "", "", "", 0, ""])
        write_scores_csv(run.path("posthoc_scores.csv"), test, scores)


def _auc_pair(rows) -> dict:
    """Breast- and patient-wise AUC from scores-CSV rows."""
    b_scores = {r[0]: r[2] for r in rows}
    b_labels = {r[0]: r[3] for r in rows}
    patient_of = {r[0]: r[1] for r in rows}
    p_scores, p_labels = M.patient_scores(b_scores, b_labels, patient_of)
    out = {"breast": M.roc_auc(list(b_scores.values()), list(b_labels.values()))}
    out["patient"] = M.roc_auc([p_scores[p] for p in p_scores], [p_labels[p] for p in p_scores])
    return out


def _read_scores(run: Run, name: str, producer: str):
    from .prehoc import read_scores_csv

    return read_scores_csv(run.need(name, producer))


def _posthoc_cases(run: Run, test) -> list[M.FrocCase]:
    diagnosed, regions = {}, {}
    mask_dir = run.path("masks")
    with open(run.need("posthoc_regions.csv", "infer"), newline="") as fh:
        for r in csv.DictReader(fh):
            diagnosed[r["breast_id"]] = r["diagnosed"] == "1"
            if r["score"]:
                regions.setdefault(r["breast_id"], []).append(float(r["score"]))
    cases: dict[str, M.FrocCase] = {}
    for s in test:
        c = cases.setdefault(s.patient_id, M.FrocCase([], [], [], [], diagnosed=False, patient_id=s.patient_id))
        c.diagnosed = c.diagnosed or diagnosed.get(s.breast_id, False)
        if s.breast_id in regions:
            comp = np.load(mask_dir / f"{s.breast_id}.regions.npy")
            c.regions += [M.Tagged(s.breast_id, m) for m in comp]
            c.scores += regions[s.breast_id]
        c.lesions += [M.Tagged(s.breast_id, m) for m in s.masks]
        c.target += [lab == 1 for lab in s.labels]
    return list(cases.values())


def _prehoc_cases(run: Run, test) -> list[M.FrocCase]:
    dets = _read_detections(run, "test", test)
    cases: dict[str, M.FrocCase] = {}
    for s in test:
        c = cases.setdefault(s.patient_id, M.FrocCase([], [], [], [], patient_id=s.patient_id))
        c.regions += [M.Tagged(s.breast_id, det.box) for det in dets[s.breast_id]]
        c.scores += [det.score for det in dets[s.breast_id]]
        c.lesions += [M.Tagged(s.breast_id, m) for m in s.masks]
        c.target += [lab == 1 for lab in s.labels]
    return list(cases.values())


def evaluate_stage(run: Run) -> None:
    d = run.data()
    test = d["test"]
    dice_min = run.cfg["eval.dice_min"]
    summary = {}
    curves_roc = {}
    for pipe in _pipelines(run):
        if pipe == "pre-hoc":
            rows = _read_scores(run, "prehoc_scores.csv", "infer")
            summary["pre-hoc"] = _auc_pair(rows)
            pts = M.froc(_prehoc_cases(run, test), dice_min=dice_min, matching=run.cfg["eval.matching"])
            M.write_froc_csv(run.path("prehoc_froc.csv"), pts)
            M.write_svg(run.path("prehoc_froc.svg"), {"pre-hoc": [(p.fpp, p.tpr) for p in pts]}, "FPP", "TPR",
                        xmax=max(4.0, run.cfg["eval.max_fpp"]), title="pre-hoc malignant lesion FROC")
            summary["pre-hoc"]["tpr_at_max_fpp"] = M.sensitivity_at(pts, run.cfg["eval.max_fpp"])
            curves_roc["pre-hoc"] = rows
        else:
            rows = _read_scores(run, "posthoc_scores.csv", "infer")
            summary["post-hoc"] = _auc_pair(rows)
            summary["scratch"] = _auc_pair(_read_scores(run, "scratch_scores.csv", "infer"))
            cases = _posthoc_cases(run, test)
            curves = {}
            for scen, tag in (("A", "A"), ("+", "plus")):
                pts = M.froc(cases, scenario=scen, dice_min=dice_min, matching=run.cfg["eval.matching"])
                M.write_froc_csv(run.path(f"posthoc_froc_{tag}.csv"), pts)
                curves[f"post-hoc ({scen})"] = [(p.fpp, p.tpr) for p in pts]
            M.write_svg(run.path("posthoc_froc.svg"), curves, "FPP", "TPR", xmax=max(4.0, run.cfg["eval.max_fpp"]),
                        title="post-hoc malignant lesion FROC")
            curves_roc["post-hoc"] = rows
    for name, rows in curves_roc.items():
        pts = M.roc_curve([r[2] for r in rows], [r[3] for r in rows])
        M.write_roc_csv(run.path(f"{name.replace('-', '')}_roc.csv"), pts)
    if curves_roc:
        M.write_svg(run.path("roc.svg"), {
            n: [(fpr, tpr) for _, tpr, fpr in M.roc_curve([r[2] for r in rows], [r[3] for r in rows])]
            for n, rows in curves_roc.items()}, "FPR", "TPR", xmax=1.0, title="breast-wise ROC")
    run.write_json("metrics.json", summary)


def evaluate_fixture(detections: Path, truth: Path, out: Path, dice_min: float = M.DICE_MIN) -> None:
    """FROC for a stored detections CSV against a box-described ground truth (JSON)."""
    spec = json.loads(Path(truth).read_text())
    dets = read_detections_csv(detections)
    cases = []
    for pid, p in sorted(spec["patients"].items()):
        c = M.FrocCase([], [], [], [], diagnosed=p.get("diagnosed", True), patient_id=pid)
        for bid in p["breasts"]:
            c.regions += [M.Tagged(bid, det.box) for det in dets.get(bid, [])]
            c.scores += [det.score for det in dets.get(bid, [])]
        for les in p["lesions"]:
            mask = BoundingVolume(*les["box"]).rasterize(tuple(spec["extent"]))
            c.lesions.append(M.Tagged(les["breast"], mask))
            c.target.append(bool(les.get("target", True)))
        cases.append(c)
    M.write_froc_csv(out, M.froc(cases, scenario=spec.get("scenario", "A"), dice_min=dice_min))


def compare_stage(run: Run) -> str:
    m = run.read_json("metrics.json", "evaluate")
    for pipe in ("pre-hoc", "post-hoc"):
        if pipe not in m:
            raise MissingArtifact(f"metrics.json lacks {pipe} results; run `bvscreen evaluate --out {run.out}` "
                                  "with pipeline = both")
    lines = ["AUC           pre-hoc  post-hoc",
             f"breast-wise   {m['pre-hoc']['breast']:.3f}    {m['post-hoc']['breast']:.3f}",
             f"patient-wise  {m['pre-hoc']['patient']:.3f}    {m['post-hoc']['patient']:.3f}"]
    with open(run.path("compare.csv"), "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["level", "pre-hoc", "post-hoc"])
        for level in ("breast", "patient"):
            w.writerow([level, repr(m["pre-hoc"][level]), repr(m["post-hoc"][level])])
    froc_curves = {"pre-hoc": [(p.fpp, p.tpr) for p in M.read_froc_csv(run.path("prehoc_froc.csv"))]}
    for tag, label in (("A", "post-hoc (A)"), ("plus", "post-hoc (+)")):
        froc_curves[label] = [(p.fpp, p.tpr) for p in M.read_froc_csv(run.path(f"posthoc_froc_{tag}.csv"))]
    M.write_svg(run.path("compare_froc.svg"), froc_curves, "FPP", "TPR", xmax=max(4.0, run.cfg["eval.max_fpp"]),
                title="malignant lesion FROC")
    table = "\n".join(lines)
    run.path("compare.txt").write_text(table + "\n")
    return table


STAGE_FUNCS = {
    "gen-data": gen_data,
    "train-encoder": train_encoder_stage,
    "train-detector": train_detector_stage,
    "train-classifier": train_classifier_stage,
    "meta-train": meta_train_stage,
    "fine-tune": fine_tune_stage,
    "train-saliency": train_saliency_stage,
    "infer": infer_stage,
    "evaluate": evaluate_stage,
}

PIPELINE_STAGES = {
    "pre-hoc": ["gen-data", "train-encoder", "train-detector", "train-classifier", "infer", "evaluate"],
    "post-hoc": ["gen-data", "meta-train", "fine-tune", "train-saliency", "infer", "evaluate"],
    "both": ["gen-data", "train-encoder", "train-detector", "train-classifier", "meta-train", "fine-tune",
             "train-saliency", "infer", "evaluate"],
}


# -- entry point ---------------------------------------------------------------------------------------


def set_deterministic() -> None:
    os.environ.setdefault("OMP_NUM_THREADS", "1")
    import torch

    torch.set_num_threads(1)
    torch.use_deterministic_algorithms(True)


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="bvscreen", description=__doc__)
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", type=Path, help="INI file; defaults to the run directory's config.ini or built-ins")
    common.add_argument("--seed", type=int, help="root seed (overrides [run] seed)")
    common.add_argument("--out", type=Path, default=Path("run"), help="run directory")
    common.add_argument("--deterministic", action="store_true", help="single-threaded, deterministic kernels")
    common.add_argument("--scale", type=float, help="network width multiplier")
    common.add_argument("--pipeline", choices=["pre-hoc", "post-hoc", "both"], help="overrides [run] pipeline")
    common.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)
    for name in [*STAGE_FUNCS, "compare", "all", "write-config"]:
        sp = sub.add_parser(name, parents=[common])
        if name == "evaluate":
            sp.add_argument("--detections", type=Path, help="evaluate a stored detections CSV instead of the run")
            sp.add_argument("--truth", type=Path, help="ground-truth JSON for --detections")
            sp.add_argument("--froc-out", type=Path, help="FROC CSV destination for --detections")
    return p


def load_config(args) -> ExperimentConfig:
    if args.config is not None:
        cfg = ExperimentConfig.load(args.config)
    elif (args.out / "config.ini").exists():
        cfg = ExperimentConfig.load(args.out / "config.ini")
    else:
        cfg = ExperimentConfig.default()
    if args.seed is not None:
        cfg = cfg.with_overrides(**{"run.seed": args.seed})
    if args.pipeline is not None:
        cfg = cfg.with_overrides(**{"run.pipeline": args.pipeline})
    if args.scale is not None:
        cfg.scale = args.scale
    return cfg


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(asctime)s %(name)s %(message)s", stream=sys.stderr)
    if args.deterministic:
        set_deterministic()
    try:
        if args.command == "evaluate" and args.detections is not None:
            if args.truth is None or args.froc_out is None:
                raise SystemExit("--detections needs --truth and --froc-out")
            evaluate_fixture(args.detections, args.truth, args.froc_out)
            return 0
        cfg = load_config(args)
        run = Run(args.out, cfg)
        if args.command == "write-config":
            _save_config(run)
            return 0
        if args.command == "compare":
            print(compare_stage(run))
            return 0
        _save_config(run)
        stages = PIPELINE_STAGES[cfg["run.pipeline"]] if args.command == "all" else [args.command]
        for st in stages:
            log.info("stage %s", st)
            STAGE_FUNCS[st](run)
        if args.command == "all" and cfg["run.pipeline"] == "both":
            print(compare_stage(run))
    except (MissingArtifact, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    return 0


if __name__ == "__main__":
    sys.exit(main())
