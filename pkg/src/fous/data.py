"""Synthetic two-domain person-search scenes and their on-disk format.

Each identity is a textured rectangle (head, striped torso, legs) that keeps
its appearance across scenes.  The target domain differs by a background
distribution shift and a global colour/contrast transform scaled by
``domain_shift``.
"""

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from PIL import Image

SOURCE, TARGET = 0, 1
INDEX_FILE = "index.jsonl"


@dataclass
class SceneSample:
    image: np.ndarray
    boxes: np.ndarray
    identities: np.ndarray
    domain: int
    name: str = ""
    proposals: np.ndarray = field(default=None, repr=False)

    def __post_init__(self):
        self.boxes = np.asarray(self.boxes, dtype=np.float64).reshape(-1, 4)
        self.identities = np.asarray(self.identities, dtype=np.int64)
        h, w = self.image.shape[:2]
        if len(self.identities) != len(self.boxes):
            raise ValueError("one identity per box is required")
        b = self.boxes
        if len(b) and ((b[:, 0] < 0).any() or (b[:, 1] < 0).any() or (b[:, 2] > w).any() or (b[:, 3] > h).any()):
            raise ValueError("box outside image bounds")
        if len(b) and ((b[:, 2] <= b[:, 0]).any() or (b[:, 3] <= b[:, 1]).any()):
            raise ValueError("degenerate box")


@dataclass
class Appearance:
    head: np.ndarray
    torso: np.ndarray
    stripe: np.ndarray
    legs: np.ndarray
    stripe_period: int
    height: int
    width: int


def _random_appearances(rng, n, cfg):
    out = []
    for _ in range(n):
        out.append(Appearance(
            head=rng.uniform(60, 240, 3),
            torso=rng.uniform(0, 255, 3),
            stripe=rng.uniform(0, 255, 3),
            legs=rng.uniform(0, 255, 3),
            stripe_period=int(rng.integers(2, 7)),
            height=int(round(cfg.person_height * rng.uniform(0.9, 1.0))),
            width=int(round(cfg.person_width * rng.uniform(0.85, 1.0))),
        ))
    return out


def _render_person(app, brightness):
    h, w = app.height, app.width
    patch = np.empty((h, w, 3))
    head = max(h // 5, 2)
    legs_top = head + (h - head) // 2
    patch[:head] = app.head
    rows = np.arange(head, legs_top)
    stripes = ((rows - head) // app.stripe_period) % 2 == 1
    patch[head:legs_top] = app.torso
    patch[rows[stripes]] = app.stripe
    patch[legs_top:] = app.legs
    return patch * brightness


def _background(rng, cfg, domain, shift):
    h, w = cfg.height, cfg.width
    base = rng.uniform(70, 150, 3)
    if domain == TARGET:
        # background distribution shift: greener, darker, more textured
        base = base + shift * np.array([-25.0, 20.0, -10.0])
    grad = np.linspace(-1.0, 1.0, w)[None, :, None] * rng.uniform(-20, 20, 3)
    noise_scale = 8.0 + (6.0 * shift if domain == TARGET else 0.0)
    noise = rng.normal(0.0, noise_scale, (h, w, 3))
    return base + grad + noise


def _domain_transform(image, shift):
    contrast = 1.0 - 0.35 * shift
    tint = shift * np.array([18.0, -8.0, 22.0])
    return (image - 128.0) * contrast + 128.0 + tint


def _scene_identities(rng, n_ids, n_scenes, per_scene):
    perm = rng.permutation(n_ids)
    slots = [[perm[(s * per_scene + k) % n_ids] for k in range(per_scene)] for s in range(n_scenes)]
    order = rng.permutation(n_scenes)
    return [slots[i] for i in order]


def _place(rng, cfg, apps):
    cell_h, cell_w = cfg.person_height + 4, cfg.person_width + 4
    rows, cols = cfg.height // cell_h, cfg.width // cell_w
    if len(apps) > rows * cols:
        raise ValueError(f"scene overcrowded: {len(apps)} persons for {rows * cols} slots")
    cells = rng.choice(rows * cols, size=len(apps), replace=False)
    boxes = []
    for cell, app in zip(cells, apps):
        r, c = divmod(int(cell), cols)
        y = r * cell_h + int(rng.integers(0, cell_h - app.height + 1))
        x = c * cell_w + int(rng.integers(0, cell_w - app.width + 1))
        boxes.append((x, y, x + app.width, y + app.height))
    return boxes


def _make_split(rng, cfg, domain, appearances, id_offset, n_scenes, shift):
    scenes = []
    per_scene = min(cfg.persons_per_scene, len(appearances))
    if cfg.persons_per_scene > len(appearances):
        raise ValueError("scene overcrowded: more persons per scene than identities")
    for s, ids in enumerate(_scene_identities(rng, len(appearances), n_scenes, per_scene)):
        image = _background(rng, cfg, domain, shift)
        apps = [appearances[i] for i in ids]
        boxes = _place(rng, cfg, apps)
        for app, (x1, y1, x2, y2) in zip(apps, boxes):
            image[y1:y2, x1:x2] = _render_person(app, rng.uniform(0.9, 1.1)) + rng.normal(0, 4.0, (y2 - y1, x2 - x1, 3))
        if domain == TARGET:
            image = _domain_transform(image, shift)
        image = np.clip(np.rint(image), 0, 255).astype(np.uint8)
        prefix = "s" if domain == SOURCE else "t"
        scenes.append(SceneSample(image, boxes, np.asarray(ids) + id_offset, domain, name=f"{prefix}{s:05d}"))
    return scenes


def generate_synthetic_domain_pair(cfg, seed):
    """Build ``(source_scenes, target_scenes)`` deterministically from ``seed``.

    Source and target use disjoint identity sets drawn from the same
    appearance distribution; target ids start after the source ids.
    """
    rng = np.random.default_rng(seed)
    src_apps = _random_appearances(rng, cfg.source_identities, cfg)
    tgt_apps = _random_appearances(rng, cfg.target_identities, cfg)
    source = _make_split(rng, cfg, SOURCE, src_apps, 0, cfg.source_scenes, 0.0)
    target = _make_split(rng, cfg, TARGET, tgt_apps, cfg.source_identities, cfg.target_scenes, cfg.domain_shift)
    attach_proposals(source, cfg, seed)
    attach_proposals(target, cfg, seed + 1)
    return source, target


def box_iou(a, b):
    """IoU matrix between ``(N, 4)`` and ``(M, 4)`` boxes in ``x1, y1, x2, y2`` form."""
    a = np.asarray(a, dtype=np.float64).reshape(-1, 4)
    b = np.asarray(b, dtype=np.float64).reshape(-1, 4)
    lt = np.maximum(a[:, None, :2], b[None, :, :2])
    rb = np.minimum(a[:, None, 2:], b[None, :, 2:])
    inter = np.clip(rb - lt, 0, None).prod(axis=2)
    area_a = (a[:, 2] - a[:, 0]) * (a[:, 3] - a[:, 1])
    area_b = (b[:, 2] - b[:, 0]) * (b[:, 3] - b[:, 1])
    return inter / (area_a[:, None] + area_b[None, :] - inter)


def make_proposals(scene, rng, jitter_per_box=2, background=2, jitter=0.08):
    """Stand-in for a region proposal network.

    Returns ``jitter_per_box`` perturbed copies of every ground-truth box, each
    with IoU >= 0.6, and ``background`` boxes overlapping no person by more
    than 0.3.
    """
    h, w = scene.image.shape[:2]
    out = []
    for x1, y1, x2, y2 in scene.boxes:
        bw, bh = x2 - x1, y2 - y1
        made = 0
        while made < jitter_per_box:
            dx, dy = rng.normal(0, jitter, 2) * (bw, bh)
            sx, sy = np.exp(rng.normal(0, jitter, 2))
            cx, cy = (x1 + x2) / 2 + dx, (y1 + y2) / 2 + dy
            cand = np.array([cx - bw * sx / 2, cy - bh * sy / 2, cx + bw * sx / 2, cy + bh * sy / 2])
            cand = np.clip(cand, 0, [w, h, w, h])
            if cand[2] - cand[0] >= 4 and cand[3] - cand[1] >= 4 and box_iou(cand, [x1, y1, x2, y2])[0, 0] >= 0.6:
                out.append(cand)
                made += 1
    sizes = scene.boxes[:, 2:] - scene.boxes[:, :2] if len(scene.boxes) else np.array([[16.0, 36.0]])
    made, tries = 0, 0
    while made < background and tries < 100 * (background + 1):
        tries += 1
        bw, bh = sizes[rng.integers(len(sizes))]
        x = rng.uniform(0, w - bw)
        y = rng.uniform(0, h - bh)
        cand = np.array([x, y, x + bw, y + bh])
        if not len(scene.boxes) or box_iou(cand, scene.boxes).max() < 0.3:
            out.append(cand)
            made += 1
    return np.asarray(out, dtype=np.float64).reshape(-1, 4)


def attach_proposals(scenes, cfg, seed):
    rng = np.random.default_rng(seed)
    for scene in scenes:
        scene.proposals = make_proposals(scene, rng, cfg.jitter_per_box, cfg.background_proposals, cfg.jitter)
    return scenes


def save_split(scenes, directory):
    """Write PNG images plus a JSON-lines index (image, boxes, identities, domain)."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    lines = []
    for scene in scenes:
        fname = f"{scene.name}.png"
        Image.fromarray(scene.image).save(directory / fname)
        record = {
            "image": fname,
            "boxes": scene.boxes.tolist(),
            "identities": scene.identities.tolist(),
            "domain": int(scene.domain),
        }
        if scene.proposals is not None:
            record["proposals"] = scene.proposals.tolist()
        lines.append(json.dumps(record))
    (directory / INDEX_FILE).write_text("".join(line + "\n" for line in lines))


def load_split(directory):
    directory = Path(directory)
    index = directory / INDEX_FILE
    if not index.exists():
        raise FileNotFoundError(f"dataset not found: {index}")
    scenes = []
    for line in index.read_text().splitlines():
        if not line.strip():
            continue
        rec = json.loads(line)
        image = np.asarray(Image.open(directory / rec["image"]).convert("RGB"))
        scene = SceneSample(image, rec["boxes"], rec["identities"], rec["domain"], name=Path(rec["image"]).stem)
        if "proposals" in rec:
            scene.proposals = np.asarray(rec["proposals"], dtype=np.float64).reshape(-1, 4)
        scenes.append(scene)
    return scenes


def save_dataset(source, target, root):
    root = Path(root)
    save_split(source, root / "source")
    save_split(target, root / "target")
    return root


def load_dataset(root):
    root = Path(root)
    return load_split(root / "source"), load_split(root / "target")
