"""Closed-loop rounds: enrichment insertion, mock proposals, discovery,
alignment losses, pool refresh, and evaluation against hidden truth.

Everything downstream of the seed is deterministic: per-scene generators
are spawned from one SeedSequence keyed by (round, scene), pools update
serially at round boundaries, and all output files are reproducible byte
for byte.
"""

from __future__ import annotations

import json
import math
import os
from dataclasses import dataclass, field

import numpy as np

from .alignment import (
    DEFAULT_BACKGROUND_IOU,
    LossWeights,
    ReferenceBoxes2D,
    bg_match,
    contrastive_loss,
    detector_loss,
    DetectorLossInputs,
    distill_loss,
    fg_match,
    select_alignment_queries,
)
from .discovery import (
    DataPool,
    DiscoveryConfig,
    LabelPool,
    discover,
    sample_enrichment,
    save_data_pool,
    save_label_pool_snapshot,
    update_data_pool,
    update_label_pool,
)
from .errors import BehindCameraError
from .geometry import iou3d, normalize_yaw, project_box
from .metrics import (
    DetectionResult,
    GroundTruth,
    MetricsReport,
    evaluate_detections,
    save_report_csv,
)
from .scene import InsertConfig, insert_object
from .semantic import (
    DEFAULT_EMBEDDING_DIM,
    DEFAULT_TEMPERATURE,
    CategoryVocabulary,
    ToyOracle,
    build_vocabulary,
    toy_oracle,
)
from .synth import (
    DEFAULT_CATEGORY_NAMES,
    ProposalConfig,
    SceneRecord,
    WorldConfig,
    category_size_ranges,
    generate_scene,
    mock_proposals,
    tag_truth_regions,
)

BACKGROUND_NAME = "background"
ANGLE_BINS = 12


@dataclass
class AlignmentConfig:
    k_bg: float = DEFAULT_BACKGROUND_IOU
    temperature: float = DEFAULT_TEMPERATURE
    queries: int = 128
    extra_queries: int = 32
    matcher: str = "hungarian"  # or "iou"
    loss_weights: LossWeights = field(default_factory=LossWeights)


@dataclass
class VocabConfig:
    names: list[str] = field(default_factory=lambda: list(DEFAULT_CATEGORY_NAMES))
    num_base: int = 6
    embedding_dim: int = DEFAULT_EMBEDDING_DIM
    temperature: float = DEFAULT_TEMPERATURE


@dataclass
class OracleConfig:
    noise_sigma: float = 0.3
    tag_match_iou: float = 0.25


@dataclass
class SimulationConfig:
    """Every tunable of the simulator; defaults follow the cited settings."""

    seed: int = 0
    num_scenes: int = 20
    rounds: int = 50  # one full label-refresh cycle at the default cadence
    vocab: VocabConfig = field(default_factory=VocabConfig)
    world: WorldConfig = field(default_factory=WorldConfig)
    proposals: ProposalConfig = field(default_factory=ProposalConfig)
    oracle: OracleConfig = field(default_factory=OracleConfig)
    discovery: DiscoveryConfig = field(default_factory=DiscoveryConfig)
    insert: InsertConfig = field(default_factory=InsertConfig)
    alignment: AlignmentConfig = field(default_factory=AlignmentConfig)

    def to_dict(self) -> dict:
        return {
            "seed": self.seed,
            "num_scenes": self.num_scenes,
            "rounds": self.rounds,
            "vocab": vars(self.vocab) | {"names": list(self.vocab.names)},
            "world": vars(self.world),
            "proposals": vars(self.proposals),
            "oracle": vars(self.oracle),
            "discovery": vars(self.discovery),
            "insert": vars(self.insert),
            "alignment": {
                "k_bg": self.alignment.k_bg,
                "temperature": self.alignment.temperature,
                "queries": self.alignment.queries,
                "extra_queries": self.alignment.extra_queries,
                "matcher": self.alignment.matcher,
                "loss_weights": self.alignment.loss_weights.to_dict(),
            },
        }

    @classmethod
    def from_dict(cls, d: dict) -> "SimulationConfig":
        cfg = cls()
        cfg.seed = int(d.get("seed", cfg.seed))
        cfg.num_scenes = int(d.get("num_scenes", cfg.num_scenes))
        cfg.rounds = int(d.get("rounds", cfg.rounds))
        if "vocab" in d:
            cfg.vocab = VocabConfig(**d["vocab"])
        if "world" in d:
            cfg.world = WorldConfig(**d["world"])
        if "proposals" in d:
            cfg.proposals = ProposalConfig(**d["proposals"])
        if "oracle" in d:
            cfg.oracle = OracleConfig(**d["oracle"])
        if "discovery" in d:
            cfg.discovery = DiscoveryConfig(**d["discovery"])
        if "insert" in d:
            cfg.insert = InsertConfig(**d["insert"])
        if "alignment" in d:
            a = dict(d["alignment"])
            weights = a.pop("loss_weights", None)
            cfg.alignment = AlignmentConfig(**a)
            if weights:
                cfg.alignment.loss_weights = LossWeights.from_dict(weights)
        return cfg

    @classmethod
    def from_json(cls, path: str) -> "SimulationConfig":
        with open(path) as f:
            return cls.from_dict(json.load(f))

    def save_json(self, path: str) -> None:
        with open(path, "w") as f:
            json.dump(self.to_dict(), f, indent=2, sort_keys=True)
            f.write("\n")


@dataclass
class RoundLog:
    """One round's outcome, serializable for the report path."""

    round_index: int
    discovered_per_category: dict[str, int]
    label_pool_size: int
    data_pool_size: int
    inserted: int
    skipped_insertions: int
    insertion_audit: list[dict]
    losses: dict[str, float]
    metrics: dict

    def to_dict(self) -> dict:
        return {
            "round_index": self.round_index,
            "discovered_per_category": dict(sorted(self.discovered_per_category.items())),
            "label_pool_size": self.label_pool_size,
            "data_pool_size": self.data_pool_size,
            "inserted": self.inserted,
            "skipped_insertions": self.skipped_insertions,
            "insertion_audit": self.insertion_audit,
            "losses": self.losses,
            "metrics": self.metrics,
        }


class SimulationState:
    """World, pools, and the oracle for one simulation run."""

    def __init__(self, cfg: SimulationConfig):
        self.cfg = cfg
        names = list(cfg.vocab.names)
        oracle_names = names + ([BACKGROUND_NAME] if BACKGROUND_NAME not in names else [])
        self.oracle: ToyOracle = toy_oracle(
            cfg.seed,
            oracle_names,
            noise_sigma=cfg.oracle.noise_sigma,
            dim=cfg.vocab.embedding_dim,
            tag_match_iou=cfg.oracle.tag_match_iou,
        )
        self.vocab: CategoryVocabulary = build_vocabulary(
            names, cfg.vocab.num_base, self.oracle, cfg.vocab.temperature
        )
        self.size_ranges = category_size_ranges(self.vocab.size, cfg.seed)
        self.records: list[SceneRecord] = []
        for i in range(cfg.num_scenes):
            rng = _rng(cfg.seed, 0, i, tag=7)
            self.records.append(
                generate_scene(cfg.world, self.vocab, self.size_ranges, rng, f"scene{i:03d}")
            )
        self.label_pool = LabelPool(dedup_iou=cfg.discovery.dedup_iou)
        self.data_pool = DataPool()
        self.round_logs: list[RoundLog] = []

    def hidden_truths(self) -> list[GroundTruth]:
        out = []
        for rec in self.records:
            for ann in rec.hidden_novel:
                out.append(GroundTruth(rec.scene_id, ann.box, ann.category))
        return out


def _rng(seed: int, round_index: int, scene_index: int, tag: int = 0) -> np.random.Generator:
    ss = np.random.SeedSequence(seed, spawn_key=(tag, round_index, scene_index))
    return np.random.default_rng(ss)


def _alignment_text_matrix(state: SimulationState) -> tuple[np.ndarray, int]:
    """Vocabulary text rows plus a background row; returns (matrix, bg index)."""
    vocab = state.vocab
    if BACKGROUND_NAME in vocab.names:
        return vocab.text_embeddings, vocab.index(BACKGROUND_NAME)
    bg = state.oracle.text_embedding(BACKGROUND_NAME).values
    return np.vstack([vocab.text_embeddings, bg]), vocab.size


def _detector_inputs(pairs, proposals, targets, weights: LossWeights) -> DetectorLossInputs:
    """Assemble box-loss tensors for the matched proposal/target pairs."""
    n = len(pairs)
    bins = ANGLE_BINS
    width = 2.0 * math.pi / bins

    def bin_of(yaw: float) -> tuple[int, float]:
        shifted = normalize_yaw(yaw) + math.pi
        b = min(int(shifted / width), bins - 1)
        return b, shifted - (b + 0.5) * width

    acp = np.zeros((n, bins))
    act = np.zeros((n, bins))
    arp = np.zeros(n)
    art = np.zeros(n)
    sp = np.zeros((n, 3))
    st = np.zeros((n, 3))
    cp = np.zeros((n, 3))
    ct = np.zeros((n, 3))
    op = np.zeros((n, 2))
    ot = np.zeros((n, 2))
    for r, (i, j) in enumerate(pairs):
        prop, tgt = proposals[i], targets[j]
        pb, pres = bin_of(prop.box.yaw)
        tb, tres = bin_of(tgt.box.yaw)
        logits = np.full(bins, -2.0)
        logits[pb] = 2.0
        e = np.exp(logits)
        acp[r] = e / e.sum()
        act[r, tb] = 1.0
        arp[r], art[r] = pres, tres
        sp[r], st[r] = prop.box.size, tgt.box.size
        cp[r], ct[r] = prop.box.center, tgt.box.center
        p = min(max(prop.objectness, 1e-6), 1.0 - 1e-6)
        op[r] = [1.0 - p, p]
        ot[r] = [0.0, 1.0]
    return DetectorLossInputs(acp, act, arp, art, sp, st, cp, ct, op, ot, weights)


def run_round(state: SimulationState, round_index: int) -> RoundLog:
    """Process all scenes once and refresh pools at the configured cadence."""
    cfg = state.cfg
    vocab = state.vocab
    oracle = state.oracle
    text_matrix, bg_index = _alignment_text_matrix(state)
    label_dim = text_matrix.shape[0]

    discovered_counts: dict[str, int] = {}
    staged: list = []  # (scene_id, persistent anns, all found anns, aug scene)
    audit: list[dict] = []
    inserted_total = 0
    skipped = 0
    loss_sums = {"distill": 0.0, "contrastive": 0.0, "detector": 0.0}

    for scene_index, rec in enumerate(state.records):
        rng = _rng(cfg.seed, round_index + 1, scene_index, tag=1)
        aug = rec.scene.copy()
        aug.image_ref = f"{rec.scene.image_ref}/round{round_index}"

        inserted_anns = []
        for sample in sample_enrichment(state.data_pool, cfg.insert.k, rng):
            result = insert_object(aug, sample, cfg.insert, rng)
            if result.accepted:
                aug = result.scene
                inserted_anns.append(aug.annotations[-1])
                inserted_total += 1
                audit.append(
                    {
                        "scene_id": rec.scene_id,
                        "category": int(sample.category),
                        "pre_count": int(result.pre_count),
                        "attempts": int(result.attempts),
                        "num_points": int(sample.num_points),
                    }
                )
            else:
                skipped += 1

        truths = rec.all_truth() + inserted_anns
        oracle.clear_tags(aug.image_ref)
        tag_truth_regions(oracle, vocab, aug.image_ref, aug, truths)

        proposals = mock_proposals(
            aug, truths, cfg.proposals, vocab, oracle, rng, cfg.world.extent
        )
        found = discover(aug, proposals, vocab, oracle, cfg.discovery)
        for ann in found:
            name = vocab.names[ann.category]
            discovered_counts[name] = discovered_counts.get(name, 0) + 1

        # Labels over transient inserted objects would reference geometry
        # absent from the original scene, so only the rest enters the label
        # pool; extracted payloads of every discovery still feed the data
        # pool, since samples are self-contained point sets.
        persistent = [
            ann
            for ann in found
            if not inserted_anns
            or max(iou3d(ann.box, ia.box) for ia in inserted_anns) < cfg.discovery.dedup_iou
        ]
        staged.append((rec.scene_id, persistent, found, aug))

        # Alignment over this scene's proposals.
        targets = [a for a in aug.annotations if a.source == "base"]
        targets += state.label_pool.entries(rec.scene_id)
        match = fg_match(proposals, targets, strategy=cfg.alignment.matcher,
                         dedup_iou=cfg.discovery.dedup_iou)
        img_size = aug.effective_image_size()
        refs = ReferenceBoxes2D(
            aug.image_ref, [region for region, _ in rec.regions]
            + [project_box(a.box, aug.camera, img_size) for a in inserted_anns]
        )
        match.background_proposals = bg_match(
            proposals, aug.camera, img_size, refs, cfg.alignment.k_bg
        )
        match.background_proposals = [
            i for i in match.background_proposals if i not in set(match.matched_proposals())
        ]
        selected = select_alignment_queries(
            match, len(proposals), cfg.alignment.extra_queries, rng
        )

        f3d, f2d = [], []
        for i in selected:
            try:
                region = project_box(proposals[i].box, aug.camera, img_size)
            except BehindCameraError:
                continue
            f3d.append(proposals[i].feature)
            f2d.append(oracle.embed_region(aug.image_ref, region))
        if f3d:
            loss_sums["distill"] += distill_loss(f3d, f2d).value

        contrast_feats = []
        labels = []
        for i, j in match.pairs:
            row = np.zeros(label_dim)
            row[targets[j].category] = 1.0
            contrast_feats.append(proposals[i].feature)
            labels.append(row)
        for i in match.background_proposals:
            row = np.zeros(label_dim)
            row[bg_index] = 1.0
            contrast_feats.append(proposals[i].feature)
            labels.append(row)
        if contrast_feats:
            loss_sums["contrastive"] += contrastive_loss(
                contrast_feats, np.stack(labels), text_matrix, cfg.alignment.temperature
            ).value

        if match.pairs:
            loss_sums["detector"] += detector_loss(
                _detector_inputs(match.pairs, proposals, targets,
                                 cfg.alignment.loss_weights)
            ).value

    # Pool refresh at the configured cadence; off-cadence discoveries are
    # logged but not pooled, mirroring a periodic label refresh.
    if (round_index + 1) % cfg.discovery.update_period == 0:
        for scene_id, persistent, found, aug_scene in staged:
            state.label_pool = update_label_pool(state.label_pool, persistent, scene_id)
            state.data_pool = update_data_pool(state.data_pool, aug_scene, found)

    report = evaluate_pool(state)
    n_scenes = max(len(state.records), 1)
    log = RoundLog(
        round_index=round_index,
        discovered_per_category=discovered_counts,
        label_pool_size=state.label_pool.size,
        data_pool_size=state.data_pool.size,
        inserted=inserted_total,
        skipped_insertions=skipped,
        insertion_audit=audit,
        losses={k: v / n_scenes for k, v in loss_sums.items()},
        metrics=report.to_dict(),
    )
    state.round_logs.append(log)
    return log


def evaluate_pool(state: SimulationState) -> MetricsReport:
    """Score the pooled pseudo labels against hidden novel truths at IoU 0.25."""
    dets = []
    for scene_id, anns in state.label_pool.scenes.items():
        for a in anns:
            dets.append(DetectionResult(scene_id, a.box, a.category, a.confidence))
    return evaluate_detections(
        dets,
        state.hidden_truths(),
        state.vocab.size,
        state.vocab.base_mask,
        iou_thresh=0.25,
    )


def run_simulation(cfg: SimulationConfig, out_dir: str | None = None) -> SimulationState:
    """Run all rounds, optionally writing logs, snapshots, and metrics CSV."""
    state = SimulationState(cfg)
    if out_dir:
        os.makedirs(out_dir, exist_ok=True)
        cfg.save_json(os.path.join(out_dir, "run_config.json"))
    for r in range(cfg.rounds):
        log = run_round(state, r)
        if out_dir:
            with open(os.path.join(out_dir, f"round_{r:03d}.json"), "w") as f:
                json.dump(log.to_dict(), f, indent=2, sort_keys=True)
                f.write("\n")
            save_label_pool_snapshot(
                os.path.join(out_dir, f"pool_round_{r:03d}.json"), state.label_pool, r
            )
    if out_dir:
        _write_metrics_csv(state, os.path.join(out_dir, "metrics.csv"))
        save_report_csv(
            os.path.join(out_dir, "final_report.csv"),
            evaluate_pool(state),
            names=state.vocab.names,
        )
        save_data_pool(state.data_pool, os.path.join(out_dir, "data_pool"))
    return state


def _write_metrics_csv(state: SimulationState, path: str) -> None:
    import csv

    keys = ["ap_novel", "ap_base", "ap_mean", "ar_novel", "ar_base", "ar_mean",
            "f1_novel", "f1_base", "f1_mean"]
    with open(path, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(["round", "label_pool_size", "data_pool_size", "inserted",
                    "skipped_insertions", "distill", "contrastive", "detector"] + keys)
        for log in state.round_logs:
            agg = log.metrics["aggregates"]
            w.writerow(
                [log.round_index, log.label_pool_size, log.data_pool_size,
                 log.inserted, log.skipped_insertions,
                 log.losses["distill"], log.losses["contrastive"], log.losses["detector"]]
                + [agg[k] for k in keys]
            )
