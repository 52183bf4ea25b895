"""Source pre-training and the two-phase adaptation loop.

Each adaptation iteration takes a mixed batch (half source, half target
scenes).  Phase one computes the image- and instance-level domain losses
behind gradient reversal; phase two trains the target embeddings against the
prototype-labelled cluster memories and the instance memory.  Target
instances are relabelled at the start of every ``relabel_every``-th epoch.
"""

import logging
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch
import torch.nn.functional as F

from fous import alignment, memory, prototypes
from fous.attention import NonFiniteFeature
from fous.data import box_iou
from fous.model import build_networks, detect, embed_boxes, images_to_tensor, valid_boxes
from fous.storage import append_jsonl, load_checkpoint, save_checkpoint

log = logging.getLogger(__name__)

LOG_KEYS = ("l_ins", "l_c_t", "l_c_s", "l_t_e", "l_s_e", "total")


class TrainingDiverged(RuntimeError):
    pass


@dataclass
class TrainState:
    config: object
    net: torch.nn.Module
    domain: torch.nn.Module
    optimizer: torch.optim.Optimizer
    pretrain_done: int = 0
    adapt_done: int = 0
    source_bank: prototypes.PrototypeBank = None
    random_bank: prototypes.PrototypeBank = None
    target_boxes: list = None
    source_labels: np.ndarray = None
    log: list = field(default_factory=list)

    def payload(self):
        banks = {}
        for name in ("source_bank", "random_bank"):
            bank = getattr(self, name)
            banks[name] = None if bank is None else {
                "vectors": bank.vectors, "labels": bank.labels, "kind": bank.kind, "rows": bank.rows}
        return {
            "config": self.config.to_dict(),
            "net": self.net.state_dict(),
            "domain": self.domain.state_dict(),
            "optimizer": self.optimizer.state_dict(),
            "pretrain_done": self.pretrain_done,
            "adapt_done": self.adapt_done,
            "log": self.log,
            "target_boxes": self.target_boxes,
            "source_labels": self.source_labels,
            **banks,
        }


def make_optimizer(params, config):
    o = config.optim
    return torch.optim.SGD(params, lr=o.lr, momentum=o.momentum, weight_decay=o.weight_decay)


def new_state(config):
    torch.manual_seed(config.seed)
    net, domain = build_networks(config)
    opt = make_optimizer(list(net.parameters()) + list(domain.parameters()), config)
    return TrainState(config, net, domain, opt)


def state_from_checkpoint(payload, config=None):
    from fous.config import RunConfig

    config = config or RunConfig.from_dict(payload["config"])
    state = new_state(config)
    state.net.load_state_dict(payload["net"])
    state.domain.load_state_dict(payload["domain"])
    if "optimizer" in payload:
        state.optimizer.load_state_dict(payload["optimizer"])
    state.pretrain_done = payload.get("pretrain_done", 0)
    state.adapt_done = payload.get("adapt_done", 0)
    state.log = list(payload.get("log", []))
    for name in ("source_bank", "random_bank"):
        bank = payload.get(name)
        if bank is not None:
            setattr(state, name, prototypes.PrototypeBank(bank["vectors"], bank["labels"], bank["kind"], rows=bank.get("rows")))
    state.target_boxes = payload.get("target_boxes")
    state.source_labels = payload.get("source_labels")
    return state


def label_purity(pseudo, truth):
    """Fraction of instances whose pseudo-label's majority identity is their own.

    Instances with ``truth < 0`` (background proposals) are ignored.
    """
    pseudo, truth = np.asarray(pseudo), np.asarray(truth)
    keep = truth >= 0
    pseudo, truth = pseudo[keep], truth[keep]
    if not len(truth):
        return 0.0
    correct = 0
    for lab in np.unique(pseudo):
        _, counts = np.unique(truth[pseudo == lab], return_counts=True)
        correct += counts.max()
    return float(correct / len(truth))


def _matched_ids(scene, boxes):
    if not len(boxes) or not len(scene.boxes):
        return np.full(len(boxes), -1)
    iou = box_iou(boxes, scene.boxes)
    best = iou.argmax(axis=1)
    return np.where(iou.max(axis=1) >= 0.5, scene.identities[best], -1)


def _batches(order, size):
    for start in range(0, len(order), size):
        yield order[start:start + size]


def _proposal_targets(scene):
    props = scene.proposals[valid_boxes(scene.proposals)]
    if not len(scene.boxes):
        return props, np.zeros(len(props))
    return props, (box_iou(props, scene.boxes).max(axis=1) >= 0.5).astype(np.float64)


def _det_loss(net, fmap, scenes):
    props, targets = zip(*(_proposal_targets(s) for s in scenes))
    out = net.instances(fmap, props)
    y = torch.as_tensor(np.concatenate(targets), dtype=out["logit"].dtype)
    return F.binary_cross_entropy_with_logits(out["logit"], y), out, props


def _clip(state):
    limit = state.config.optim.grad_clip
    if limit > 0:
        params = [p for g in state.optimizer.param_groups for p in g["params"]]
        torch.nn.utils.clip_grad_norm_(params, limit)


def pretrain_epoch(state, source, rng, source_memory):
    """Supervised source epoch: proposal objectness plus identity InfoNCE on ground-truth boxes."""
    cfg = state.config
    net = state.net
    net.train()
    totals = {"l_det": 0.0, "l_reid": 0.0}
    n = 0
    for idx in _batches(rng.permutation(len(source)), cfg.optim.batch_size):
        scenes = [source[i] for i in idx]
        fmap = net.features(images_to_tensor([s.image for s in scenes]))
        l_det, _, _ = _det_loss(net, fmap, scenes)
        gt = net.instances(fmap, [s.boxes for s in scenes])
        ids = np.concatenate([s.identities for s in scenes])
        l_reid = memory.cluster_contrastive_loss(gt["embedding"], source_memory, ids)
        loss = l_det + l_reid
        if not torch.isfinite(loss):
            raise TrainingDiverged("non-finite loss during pre-training")
        state.optimizer.zero_grad()
        loss.backward()
        state.optimizer.step()
        memory.momentum_update_memory(source_memory, gt["embedding"], ids)
        totals["l_det"] += l_det.item()
        totals["l_reid"] += l_reid.item()
        n += 1
    return {k: v / max(n, 1) for k, v in totals.items()}


def source_identity_features(net, source):
    feats = embed_boxes(net, source, [s.boxes for s in source])
    ids = np.concatenate([s.identities for s in source])
    return feats, ids


@dataclass
class TargetLabels:
    """Per-epoch target instance set with its pseudo-labels and memories."""

    scene_rows: list
    boxes: list
    truth: np.ndarray
    labels: prototypes.PseudoLabelSet
    memory_t: memory.ClusterMemory
    memory_s: memory.ClusterMemory
    instances: memory.InstanceMemory
    masks_t: torch.Tensor
    masks_s: torch.Tensor
    evaluations: int


def relabel_target(state, source, target):
    """Label the target instances against both prototype banks and rebuild the memories.

    The target instance set (detections above threshold) is fixed at the
    first pass.  Later passes first move each source prototype to the mean
    of the current embeddings of the instances it labelled last time, and
    re-embed the sampled random prototypes, so both banks live in the same
    embedding as the features they label.
    """
    cfg = state.config
    a = cfg.adapt
    if state.target_boxes is None:
        state.target_boxes = [b for b, _ in detect(state.net, target, a.score_threshold)]
    boxes = state.target_boxes
    feats = embed_boxes(state.net, target, boxes)
    truth = np.concatenate([_matched_ids(s, b) for s, b in zip(target, boxes)]) if target else np.zeros(0)
    scene_rows, offset = [], 0
    for b in boxes:
        scene_rows.append(np.arange(offset, offset + len(b)))
        offset += len(b)
    if len(feats) < 2:
        raise TrainingDiverged("too few target instances detected to build pseudo-labels")

    if state.source_bank is None:
        # first labelling pass: identity means of the labelled source data
        src_feats, src_ids = source_identity_features(state.net, source)
        state.source_bank = prototypes.init_source_prototypes(src_feats, src_ids)
    elif state.source_labels is not None:
        state.source_bank = prototypes.update_source_prototypes(feats, state.source_labels, state.source_bank)
    if state.random_bank is None:
        state.random_bank = prototypes.sample_random_prototypes(feats, min(a.n_random, len(feats)), cfg.seed)
    else:
        rows = state.random_bank.rows
        state.random_bank = prototypes.PrototypeBank(feats[rows], state.random_bank.labels, "random", rows=rows)

    counter = prototypes.DistanceCounter()
    labels = prototypes.label_with_banks(feats, state.source_bank, state.random_bank, counter)
    state.source_labels = labels.source_labels

    f = torch.as_tensor(feats, dtype=next(state.net.parameters()).dtype)
    inst = memory.InstanceMemory(f, a.neighbor_threshold, a.memory_momentum)
    return TargetLabels(
        scene_rows=scene_rows,
        boxes=boxes,
        truth=truth,
        labels=labels,
        memory_t=memory.init_cluster_memory(f, labels.random_labels, a.tau, a.memory_momentum),
        memory_s=memory.init_cluster_memory(f, labels.source_labels, a.tau, a.memory_momentum),
        instances=inst,
        masks_t=memory.reliable_neighbor_masks(inst.entries, a.neighbor_threshold, labels.random_labels),
        masks_s=memory.reliable_neighbor_masks(inst.entries, a.neighbor_threshold, labels.source_labels),
        evaluations=counter.evaluations,
    )


def freeze_norm_statistics(module):
    """Put every batch-norm layer in eval mode: running statistics stay fixed, affine terms still train."""
    for m in module.modules():
        if isinstance(m, torch.nn.modules.batchnorm._BatchNorm):
            m.eval()


TERM_KEYS = ("l_ins", "l_c_t", "l_c_s", "l_t_e", "l_s_e", "l_dom", "l_cons", "l_det")


def batch_losses(net, dom, a, tl, scenes, domains, reid_boxes, rows, lam):
    """Every loss term for one mixed batch (source scenes first).

    ``reid_boxes`` holds one box array per scene; ``rows`` are the
    instance-memory rows of the target boxes, in order.  Returns the term
    dict and the target embeddings.
    """
    n_src = domains.count(0)
    dtype = next(net.parameters()).dtype
    fmap = net.features(images_to_tensor([s.image for s in scenes], dtype))

    # phase 1: image- and instance-level alignment
    patch = dom.image(fmap)
    l_dom = alignment.image_domain_loss(list(patch), domains)
    props = [s.proposals[valid_boxes(s.proposals)] for s in scenes]
    inst = net.instances(fmap, props)
    det_counts = [len(p) for p in props]
    det_pred = list(torch.split(dom.instance_det(inst["det_feat"]), det_counts))
    _, src_targets = zip(*(_proposal_targets(s) for s in scenes[:n_src]))
    y = torch.as_tensor(np.concatenate(src_targets), dtype=inst["logit"].dtype)
    l_det = F.binary_cross_entropy_with_logits(inst["logit"][:sum(det_counts[:n_src])], y)

    reid = net.instances(fmap, reid_boxes)
    reid_counts = [len(b) for b in reid_boxes]
    reid_pred = list(torch.split(dom.instance_reid(reid["embedding"]), reid_counts))
    batch = alignment.DomainBatch(list(fmap), props, reid_boxes, domains)
    l_ins = alignment.instance_domain_loss(batch, det_pred, reid_pred, lam)
    l_cons = alignment.consistency_regularizer([p.mean() for p in patch], det_pred)

    # phase 2: label-flexible training on the target instances
    emb_t = reid["embedding"][sum(reid_counts[:n_src]):]
    if len(rows):
        l_c_t = memory.cluster_contrastive_loss(emb_t, tl.memory_t, tl.labels.random_labels[rows])
        l_c_s = memory.cluster_contrastive_loss(emb_t, tl.memory_s, tl.labels.source_labels[rows])
        l_t_e = memory.instance_invariance_loss(tl.instances, tl.masks_t, a.tau, queries=emb_t, indices=rows)
        l_s_e = memory.instance_invariance_loss(tl.instances, tl.masks_s, a.tau, queries=emb_t, indices=rows)
    else:
        l_c_t = l_c_s = l_t_e = l_s_e = emb_t.new_zeros(())
    terms = dict(zip(TERM_KEYS, (l_ins, l_c_t, l_c_s, l_t_e, l_s_e, l_dom, l_cons, l_det)))
    return terms, emb_t


def adapt_epoch(state, source, target, tl, source_kept, rng):
    cfg = state.config
    a = cfg.adapt
    net, dom = state.net, state.domain
    net.train()
    dom.train()
    if a.freeze_norm:
        # 4-image batches give noisy statistics; keep the pre-trained ones so
        # training-time queries live in the same space as the memory entries
        freeze_norm_statistics(net)
    lam = alignment.balance_factor(len(source), len(target))
    half = cfg.optim.batch_size // 2
    tgt_order = rng.permutation(len(target))
    src_order = rng.permutation(len(source))
    sums = dict.fromkeys(LOG_KEYS + ("l_dom", "l_cons", "l_det"), 0.0)
    n = 0
    for it, t_idx in enumerate(_batches(tgt_order, half)):
        s_idx = [src_order[(it * half + k) % len(source)] for k in range(half)]
        scenes = [source[i] for i in s_idx] + [target[i] for i in t_idx]
        domains = [0] * len(s_idx) + [1] * len(t_idx)
        rows = np.concatenate([tl.scene_rows[i] for i in t_idx])
        reid_boxes = [source_kept[i] for i in s_idx] + [tl.boxes[i] for i in t_idx]
        terms, emb_t = batch_losses(net, dom, a, tl, scenes, domains, reid_boxes, rows, lam)
        l_ins, l_c_t, l_c_s, l_t_e, l_s_e, l_dom, l_cons, l_det = (terms[k] for k in TERM_KEYS)

        try:
            total = memory.total_loss(l_ins, l_c_t, l_c_s, l_t_e, l_s_e)
        except ValueError as err:
            raise TrainingDiverged(str(err)) from None
        objective = total + l_dom + a.consistency_weight * l_cons + l_det
        if not torch.isfinite(objective):
            raise TrainingDiverged("non-finite training objective")
        state.optimizer.zero_grad()
        objective.backward()
        _clip(state)
        state.optimizer.step()

        if len(rows):
            memory.momentum_update_memory(tl.memory_t, emb_t, tl.labels.random_labels[rows])
            memory.momentum_update_memory(tl.memory_s, emb_t, tl.labels.source_labels[rows])
            tl.instances.update(rows, emb_t)

        for key, val in zip(sums, (l_ins, l_c_t, l_c_s, l_t_e, l_s_e, total, l_dom, l_cons, l_det)):
            sums[key] += float(val.detach()) if torch.is_tensor(val) else float(val)
        n += 1
    return {k: v / max(n, 1) for k, v in sums.items()}


def source_kept_boxes(state, source):
    return [b for b, _ in detect(state.net, source, state.config.adapt.score_threshold)]


def train_adaptation(config, source, target, out_dir=None, resume=None, on_epoch_end=None):
    """Pre-train on the source split, then run the adaptation epochs.

    Writes ``checkpoint.pt`` after every completed epoch and appends one JSON
    line per adaptation epoch to ``metrics.jsonl`` when ``out_dir`` is given.
    A non-finite loss raises :class:`TrainingDiverged`, leaving the last
    completed-epoch checkpoint in place.
    """
    out_dir = Path(out_dir) if out_dir is not None else None
    if resume is not None:
        payload = load_checkpoint(resume) if isinstance(resume, (str, Path)) else resume
        state = state_from_checkpoint(payload, config)
    else:
        state = new_state(config)
    a = config.adapt
    rng = np.random.default_rng(config.seed + 1000 * (state.pretrain_done + state.adapt_done))
    torch.manual_seed(config.seed + 1000 * (state.pretrain_done + state.adapt_done))

    def checkpoint():
        if out_dir is not None:
            save_checkpoint(out_dir / "checkpoint.pt", state.payload())

    if state.pretrain_done < a.pretrain_epochs:
        feats, ids = source_identity_features(state.net, source)
        src_mem = memory.init_cluster_memory(torch.as_tensor(feats, dtype=torch.float32), ids, a.tau, a.memory_momentum)
        while state.pretrain_done < a.pretrain_epochs:
            try:
                stats = pretrain_epoch(state, source, rng, src_mem)
            except NonFiniteFeature:
                raise TrainingDiverged(f"non-finite features in pre-training epoch {state.pretrain_done + 1}") from None
            state.pretrain_done += 1
            record = {"phase": "pretrain", "epoch": state.pretrain_done, **stats}
            log.info("pretrain %s", record)
            checkpoint()
            if out_dir is not None:
                append_jsonl(out_dir / "pretrain.jsonl", record)
            if on_epoch_end:
                on_epoch_end(state, record)

    tl = None
    while state.adapt_done < a.adapt_epochs:
        epoch = state.adapt_done + 1
        try:
            if tl is None or (epoch - 1) % a.relabel_every == 0:
                tl = relabel_target(state, source, target)
            kept = source_kept_boxes(state, source)
            stats = adapt_epoch(state, source, target, tl, kept, rng)
        except NonFiniteFeature:
            raise TrainingDiverged(f"non-finite features in adaptation epoch {epoch}") from None
        pur_s = label_purity(tl.labels.source_labels, tl.truth)
        pur_r = label_purity(tl.labels.random_labels, tl.truth)
        record = {
            "epoch": epoch,
            **{k: stats[k] for k in LOG_KEYS},
            "pseudo_acc": 0.5 * (pur_s + pur_r),
            "pseudo_acc_source": pur_s,
            "pseudo_acc_random": pur_r,
            "l_dom": stats["l_dom"],
            "l_cons": stats["l_cons"],
            "l_det": stats["l_det"],
            "n_instances": len(tl.truth),
            "n_source_prototypes": len(state.source_bank),
            "distance_evaluations": tl.evaluations,
            "neighbors_t": float(tl.masks_t.sum(1).float().mean()),
            "neighbors_s": float(tl.masks_s.sum(1).float().mean()),
        }
        if not all(math.isfinite(record[k]) for k in LOG_KEYS):
            raise TrainingDiverged("non-finite epoch loss")
        state.adapt_done = epoch
        state.log.append(record)
        log.info("adapt %s", record)
        checkpoint()
        if out_dir is not None:
            append_jsonl(out_dir / "metrics.jsonl", record)
        if on_epoch_end:
            on_epoch_end(state, record)
    checkpoint()
    return state
