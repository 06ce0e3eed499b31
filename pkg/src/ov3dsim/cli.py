"""Command-line interface.

Subcommands: simulate, discover, enrich, evaluate, gradcheck, report.
"""

from __future__ import annotations

import argparse
import json
import os
import sys

import numpy as np

from .alignment import (
    DetectorLossInputs,
    LossWeights,
    contrastive_loss,
    detector_loss,
    distill_loss,
    save_loss_report,
)
from .discovery import (
    discover,
    load_data_pool,
    load_proposals,
    sample_enrichment,
)
from .metrics import (
    evaluate_detections,
    load_detections,
    load_ground_truths,
    save_report_csv,
    save_report_json,
)
from .report import generate_report
from .scene import insert_object, load_scene, save_scene
from .semantic import build_vocabulary, toy_oracle
from .simulate import SimulationConfig, run_simulation
from .synth import tag_truth_regions


def _load_config(path: str | None) -> SimulationConfig:
    return SimulationConfig.from_json(path) if path else SimulationConfig()


def _cmd_simulate(args) -> int:
    cfg = _load_config(args.config)
    if args.seed is not None:
        cfg.seed = args.seed
    if cfg.rounds < cfg.discovery.update_period:
        print(
            f"note: pool refresh period ({cfg.discovery.update_period}) exceeds "
            f"rounds ({cfg.rounds}); pools will never update. Desk-scale runs "
            "usually set discovery.update_period to 1."
        )
    state = run_simulation(cfg, args.out)
    last = state.round_logs[-1]
    agg = last.metrics["aggregates"]
    print(f"rounds: {cfg.rounds}  scenes: {cfg.num_scenes}")
    print(f"label pool: {last.label_pool_size}  data pool: {last.data_pool_size}")
    print(
        "AP_novel: {ap_novel:.4f}  AR_novel: {ar_novel:.4f}  "
        "AP_mean: {ap_mean:.4f}".format(**agg)
    )
    print(f"outputs written to {args.out}")
    return 0


def _cmd_discover(args) -> int:
    cfg = _load_config(args.config)
    scene = load_scene(args.scene)
    proposals = load_proposals(args.proposals)
    oracle = toy_oracle(
        cfg.seed,
        list(cfg.vocab.names) + ["background"],
        noise_sigma=cfg.oracle.noise_sigma,
        dim=cfg.vocab.embedding_dim,
        tag_match_iou=cfg.oracle.tag_match_iou,
    )
    vocab = build_vocabulary(cfg.vocab.names, cfg.vocab.num_base, oracle,
                             cfg.vocab.temperature)
    # The toy oracle recognizes whatever the scene document declares: every
    # annotation's region is tagged with its category.
    if scene.camera is not None and scene.image_ref is not None:
        tag_truth_regions(oracle, vocab, scene.image_ref, scene, scene.annotations)
    found = discover(scene, proposals, vocab, oracle, cfg.discovery)
    doc = [a.to_dict() | {"category_name": vocab.names[a.category]} for a in found]
    if args.out:
        with open(args.out, "w") as f:
            json.dump(doc, f, indent=2, sort_keys=True)
            f.write("\n")
    print(f"discovered {len(found)} of {len(proposals)} proposals")
    for a in found:
        print(f"  {vocab.names[a.category]:<12} conf={a.confidence:.3f} "
              f"center={np.round(a.box.center, 3).tolist()}")
    return 0


def _cmd_enrich(args) -> int:
    cfg = _load_config(args.config)
    scene = load_scene(args.scene)
    pool = load_data_pool(args.pool)
    rng = np.random.default_rng(args.seed)
    accepted = skipped = 0
    for sample in sample_enrichment(pool, args.k, rng):
        result = insert_object(scene, sample, cfg.insert, rng)
        if result.accepted:
            scene = result.scene
            accepted += 1
        else:
            skipped += 1
    save_scene(scene, args.out)
    print(f"inserted {accepted} objects ({skipped} skipped) -> {args.out}")
    return 0


def _cmd_evaluate(args) -> int:
    cfg = _load_config(args.config)
    dets = load_detections(args.dets)
    gts = load_ground_truths(args.gts)
    num_cat = len(cfg.vocab.names)
    base_mask = np.zeros(num_cat, dtype=bool)
    base_mask[: cfg.vocab.num_base] = True
    report = evaluate_detections(dets, gts, num_cat, base_mask, args.iou)
    if args.out:
        os.makedirs(args.out, exist_ok=True)
        save_report_json(os.path.join(args.out, "metrics.json"), report)
        save_report_csv(os.path.join(args.out, "metrics.csv"), report,
                        names=list(cfg.vocab.names))
        print(f"metrics written to {args.out}")
    for key, val in report.aggregates().items():
        print(f"{key}: {100.0 * val:.2f}")
    return 0


def _cmd_gradcheck(args) -> int:
    """Compare analytic loss gradients against central finite differences."""
    rng = np.random.default_rng(args.seed)
    h = 1e-5
    worst = {}

    def rel_err(analytic, fd):
        denom = max(np.abs(analytic).max(), np.abs(fd).max(), 1e-8)
        return float(np.abs(analytic - fd).max() / denom)

    n, d, c = 4, 16, 6
    errs = []
    for _ in range(args.trials):
        a = rng.standard_normal((n, d))
        b = rng.standard_normal((n, d))
        rep = distill_loss(a, b)
        fd = np.zeros_like(a)
        for idx in np.ndindex(a.shape):
            ap, am = a.copy(), a.copy()
            ap[idx] += h
            am[idx] -= h
            fd[idx] = (distill_loss(ap, b).value - distill_loss(am, b).value) / (2 * h)
        errs.append(rel_err(rep.gradients["f3d"], fd))
    worst["distill"] = max(errs)

    errs = []
    for _ in range(args.trials):
        f = rng.standard_normal((n, d))
        f /= np.linalg.norm(f, axis=1, keepdims=True)
        t = rng.standard_normal((c, d))
        t /= np.linalg.norm(t, axis=1, keepdims=True)
        labels = np.zeros((n, c))
        labels[np.arange(n), rng.integers(0, c, n)] = 1.0
        temp = 8.0
        rep = contrastive_loss(f, labels, t, temp)
        fd = np.zeros_like(f)
        for idx in np.ndindex(f.shape):
            fp, fm = f.copy(), f.copy()
            fp[idx] += h
            fm[idx] -= h
            fd[idx] = (
                contrastive_loss(fp, labels, t, temp).value
                - contrastive_loss(fm, labels, t, temp).value
            ) / (2 * h)
        errs.append(rel_err(rep.gradients["features"], fd))
    worst["contrastive"] = max(errs)

    errs = []
    grad_names = ("angle_cls_pred", "angle_res_pred", "size_pred", "center_pred",
                  "objectness_pred")
    for _ in range(args.trials):
        inputs = random_detector_inputs(rng)
        rep = detector_loss(inputs)
        for name in grad_names:
            arr = getattr(inputs, name)
            fd = np.zeros_like(arr)
            for idx in np.ndindex(arr.shape):
                ap, am = arr.copy(), arr.copy()
                ap[idx] += h
                am[idx] -= h
                setattr(inputs, name, ap)
                vp = detector_loss(inputs).value
                setattr(inputs, name, am)
                vm = detector_loss(inputs).value
                setattr(inputs, name, arr)
                fd[idx] = (vp - vm) / (2 * h)
            errs.append(rel_err(rep.gradients[name], fd))
    worst["detector"] = max(errs)

    ok = True
    for name, err in worst.items():
        status = "PASS" if err <= args.tol else "FAIL"
        ok &= err <= args.tol
        print(f"[{status}] {name}: max rel err {err:.3e} (tol {args.tol:.0e})")
    if args.dump:
        rng = np.random.default_rng(args.seed)
        save_loss_report(args.dump, detector_loss(random_detector_inputs(rng)))
    return 0 if ok else 1


def random_detector_inputs(rng: np.random.Generator) -> DetectorLossInputs:
    """Random detector-loss inputs kept away from kinks and clip bounds."""
    n, bins = 3, 12
    def distro(k):
        x = rng.uniform(0.05, 1.0, size=(n, k))
        return x / x.sum(axis=1, keepdims=True)
    def onehot(k):
        m = np.zeros((n, k))
        m[np.arange(n), rng.integers(0, k, n)] = 1.0
        return m
    res_p = rng.uniform(-2.0, 2.0, n)
    res_t = rng.uniform(-2.0, 2.0, n)
    gap = np.abs(np.abs(res_p - res_t) - 1.0) < 1e-3  # Huber kink
    res_p[gap] += 0.01
    return DetectorLossInputs(
        angle_cls_pred=distro(bins),
        angle_cls_true=onehot(bins),
        angle_res_pred=res_p,
        angle_res_true=res_t,
        size_pred=rng.uniform(0.2, 2.0, (n, 3)),
        size_true=rng.uniform(0.2, 2.0, (n, 3)),
        center_pred=rng.uniform(-3.0, 3.0, (n, 3)),
        center_true=rng.uniform(-3.0, 3.0, (n, 3)),
        objectness_pred=distro(2),
        objectness_true=onehot(2),
        weights=LossWeights(),
    )


def _cmd_report(args) -> int:
    paths = generate_report(args.logs, args.out)
    for p in paths:
        print(p)
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="ov3dsim",
        description="Open-vocabulary 3D discovery simulator: discovery, "
                    "enrichment, alignment, and evaluation over synthetic "
                    "or file-loaded point-cloud scenes.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("simulate", help="run the closed-loop simulation")
    p.add_argument("--config", help="JSON config; defaults apply when omitted")
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--seed", type=int, default=None, help="override config seed")
    p.set_defaults(func=_cmd_simulate)

    p = sub.add_parser("discover", help="run discovery over a scene file")
    p.add_argument("--scene", required=True, help="scene JSON document")
    p.add_argument("--proposals", required=True, help="proposal JSON list")
    p.add_argument("--config", help="simulation config JSON")
    p.add_argument("--out", help="write discovered annotations JSON here")
    p.set_defaults(func=_cmd_discover)

    p = sub.add_parser("enrich", help="insert sampled pool objects into a scene")
    p.add_argument("--scene", required=True, help="scene JSON document")
    p.add_argument("--pool", required=True, help="data-pool archive directory")
    p.add_argument("-k", type=int, default=5, help="objects to insert")
    p.add_argument("--out", required=True, help="output scene JSON path")
    p.add_argument("--config", help="simulation config JSON")
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=_cmd_enrich)

    p = sub.add_parser("evaluate", help="score detections against ground truth")
    p.add_argument("--dets", required=True, help="detections JSON")
    p.add_argument("--gts", required=True, help="ground-truth JSON")
    p.add_argument("--config", help="config JSON naming the vocabulary")
    p.add_argument("--iou", type=float, default=0.25)
    p.add_argument("--out", help="directory for metrics.json / metrics.csv")
    p.set_defaults(func=_cmd_evaluate)

    p = sub.add_parser("gradcheck", help="finite-difference check of loss gradients")
    p.add_argument("--trials", type=int, default=20)
    p.add_argument("--tol", type=float, default=1e-4)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--dump", help="write a sample loss/gradient JSON here")
    p.set_defaults(func=_cmd_gradcheck)

    p = sub.add_parser("report", help="tables and figures from round logs")
    p.add_argument("--logs", required=True, help="directory of round_*.json")
    p.add_argument("--out", help="output directory (defaults to --logs)")
    p.set_defaults(func=_cmd_report)

    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    return args.func(args)


if __name__ == "__main__":
    sys.exit(main())
