"""Fully unsupervised segmentation pipeline stages and their evaluation.

The ladder of stages, each adding one component:

1. K-means with K = #classes directly on raw encoder tokens.
2. The same on tokens from a trained encoder.
3. Plus cluster-based foreground extraction: overcluster, label clusters
   fg/bg by attention precision, re-cluster foreground tokens only.
4. Plus community detection: group the foreground clusters of stage 3's
   overclustering by co-occurrence into exactly #objects communities.

Every stage outputs label maps with 0 = background and is scored by
Hungarian-matched mIoU against the ground truth.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import attention, cbfe, cluster_eval, community, tensor_io, training


@dataclass
class Dataset:
    """In-memory view of a manifest: raw features, attention, ground truth."""

    features: list[np.ndarray]           # (D, H, W) raw token grids
    attn_stacks: list[np.ndarray | None]
    object_maps: list[np.ndarray]        # 0 = background
    part_maps: list[np.ndarray]


def load_dataset(manifest: tensor_io.DatasetManifest) -> Dataset:
    features, attns, objs, parts = [], [], [], []
    for rec in manifest.records:
        features.append(manifest.load_features(rec).astype(np.float64))
        attns.append(manifest.load_attention(rec))
        mask = manifest.load_mask(rec)
        if mask is None:
            objs.append(None)
            parts.append(None)
        else:
            objs.append(mask[0].astype(np.int64))
            parts.append(mask[1].astype(np.int64) if mask.shape[0] > 1 else None)
    return Dataset(features=features, attn_stacks=attns,
                   object_maps=objs, part_maps=parts)


def embed_dataset(dataset: Dataset, params: dict[str, np.ndarray] | None,
                  use_head: bool = False) -> list[np.ndarray]:
    """Encoder embeddings of all images; raw features if params is None."""
    if params is None:
        return dataset.features
    return [training.embed_features(f.astype(np.float32), params, use_head).astype(np.float64)
            for f in dataset.features]


def hungarian_matched_miou(pred_maps: list[np.ndarray], gt_maps: list[np.ndarray],
                           n_classes: int) -> float:
    """Permutation-invariant mIoU: optimal relabeling, then mean IoU."""
    conf = np.zeros((n_classes, n_classes), dtype=np.int64)
    for pm, gm in zip(pred_maps, gt_maps):
        conf += cluster_eval.confusion_matrix(pm, gm, n_classes, n_classes)
    perm = cluster_eval.hungarian(-conf.astype(np.float64))
    score, _ = cluster_eval.miou([perm[m] for m in pred_maps], gt_maps, n_classes)
    return score


def attention_hints(dataset: Dataset) -> list[np.ndarray]:
    return [attention.foreground_mask(stack) for stack in dataset.attn_stacks]


def stage_kmeans(features: list[np.ndarray], gt_maps: list[np.ndarray],
                 n_classes: int, seed: int = 0) -> float:
    """Stages 1/2: K-means with K = #classes, Hungarian-matched mIoU."""
    maps, _ = cluster_eval.cluster_maps_for(features, n_classes, seed=seed)
    return hungarian_matched_miou([m.astype(np.int64) for m in maps], gt_maps, n_classes)


@dataclass
class CbfeArtifacts:
    cluster_maps: list[np.ndarray]
    fg_map: cbfe.ForegroundMap
    fg_masks: list[np.ndarray]


def run_cbfe(features: list[np.ndarray], hints: list[np.ndarray],
             k: int, threshold: float, seed: int = 0) -> CbfeArtifacts:
    """Overcluster the embeddings and classify each cluster fg/bg."""
    maps, _ = cluster_eval.cluster_maps_for(features, k, seed=seed)
    precisions = cbfe.cluster_precision(maps, hints, k)
    fg_map = cbfe.build_theta(precisions, threshold)
    fg_masks = [cbfe.extract_foreground(m, fg_map) for m in maps]
    return CbfeArtifacts(cluster_maps=maps, fg_map=fg_map, fg_masks=fg_masks)


def stage_cbfe(features: list[np.ndarray], artifacts: CbfeArtifacts,
               gt_maps: list[np.ndarray], n_classes: int, seed: int = 0) -> float:
    """Stage 3: background from CBFE, K-means over foreground tokens only."""
    fg_tokens = []
    for f, m in zip(features, artifacts.fg_masks):
        tok = f.reshape(f.shape[0], -1).T
        fg_tokens.append(tok[m.ravel().astype(bool)])
    points = np.concatenate(fg_tokens, axis=0)
    n_fg_classes = n_classes - 1
    result = cluster_eval.kmeans(points, n_fg_classes, n_seeds=1, seed=seed)
    preds = []
    offset = 0
    for f, m in zip(features, artifacts.fg_masks):
        pred = np.zeros(m.shape, dtype=np.int64)
        sel = m.astype(bool)
        n = int(sel.sum())
        pred[sel] = result.labels[offset:offset + n] + 1
        offset += n
        preds.append(pred)
    return hungarian_matched_miou(preds, gt_maps, n_classes)


def stage_cd(artifacts: CbfeArtifacts, gt_maps: list[np.ndarray],
             n_classes: int, edge_threshold: float = community.DEFAULT_EDGE_THRESHOLD,
             markov_time: float = community.DEFAULT_MARKOV_TIME,
             distance: int = community.DEFAULT_DISTANCE, seed: int = 0,
             ) -> tuple[float, community.Partition]:
    """Stage 4: co-occurrence communities over the foreground clusters.

    Background-labeled clusters are disconnected from the network before
    detection, so they land in the background partition; the remaining
    clusters are grouped into exactly #classes - 1 communities.
    """
    k = len(artifacts.fg_map.theta)
    graph = community.cooccurrence_graph(artifacts.cluster_maps, k, d=distance)
    weights = graph.weights.copy()
    bg = ~artifacts.fg_map.theta
    weights[bg, :] = 0.0
    weights[:, bg] = 0.0
    graph = community.filter_edges(
        community.CoocGraph(weights=weights, node_counts=graph.node_counts),
        edge_threshold,
    )
    partition = community.detect_communities(
        graph, target_m=n_classes - 1, markov_time=markov_time, seed=seed)
    merged = community.merge_by_communities(artifacts.cluster_maps, partition)
    score = hungarian_matched_miou(merged, gt_maps, n_classes)
    return score, partition


@dataclass
class LadderResult:
    raw_kmeans: float
    trained_kmeans: float
    cbfe: float
    cd: float

    def as_dict(self) -> dict[str, float]:
        return {"raw_kmeans": self.raw_kmeans, "trained_kmeans": self.trained_kmeans,
                "cbfe": self.cbfe, "cd": self.cd}


def run_ladder(dataset: Dataset, trained_params: dict[str, np.ndarray],
               overcluster_k: int, cbfe_threshold: float,
               edge_threshold: float = community.DEFAULT_EDGE_THRESHOLD,
               markov_time: float = community.DEFAULT_MARKOV_TIME,
               seed: int = 0) -> LadderResult:
    """All four unsup-seg stages on one dataset."""
    gt = dataset.object_maps
    n_classes = int(max(g.max() for g in gt)) + 1
    hints = attention_hints(dataset)
    embedded = embed_dataset(dataset, trained_params, use_head=True)
    raw_score = stage_kmeans(dataset.features, gt, n_classes, seed=seed)
    trained_score = stage_kmeans(embedded, gt, n_classes, seed=seed)
    artifacts = run_cbfe(embedded, hints, overcluster_k, cbfe_threshold, seed=seed)
    cbfe_score = stage_cbfe(embedded, artifacts, gt, n_classes, seed=seed)
    cd_score, _ = stage_cd(artifacts, gt, n_classes, edge_threshold, markov_time,
                           seed=seed)
    return LadderResult(raw_kmeans=raw_score, trained_kmeans=trained_score,
                        cbfe=cbfe_score, cd=cd_score)
