"""Synthetic datasets: rendered shape scenes and rule-labeled text.

Every sample is a pure function of (seed, index, task tag), so training can
regenerate batches on the fly and two runs with one seed see identical data.
Train and validation splits use disjoint index ranges.

Eight datasets mirror a 7-task multitask setup: two detection variants (with
and without color attributes), visual question answering, visual entailment,
and four text classification tasks (2-way and 3-way containment entailment,
duplicate detection, polarity).
"""
from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple

import json
import numpy as np

from .encoders import Vocabulary, pad_batch
from .matching import iou_pairwise

IMAGE_SIZE = 64
MAX_OBJECTS = 3
SHAPE_CLASSES = ("rectangle", "circle", "triangle")
COLOR_NAMES = ("red", "green", "blue")
COLOR_VALUES = np.array([[0.9, 0.1, 0.1], [0.1, 0.9, 0.1], [0.1, 0.1, 0.9]])

QUANTIFIERS = ("many", "few", "several", "most")
POSITIVE_WORDS = ("good", "great", "fine", "happy", "bright", "solid", "clean", "fresh")
NEGATIVE_WORDS = ("bad", "poor", "sad", "dull", "broken", "dirty", "stale", "weak")
FILLER_WORDS = ("the", "thing", "looks", "very", "quite")
NOUNS = ("box", "ball", "star", "ring", "cube", "disk", "line", "dot")
# entailment draws from a smaller universe so containment patterns recur often
ENTAIL_NOUNS = NOUNS[:6]

VQA_ANSWERS = ("0", "1", "2", "3", "yes", "no")
VE_LABELS = ("entail", "neutral", "contradict")

# fixed per-dataset stream tags feeding the seed sequence
_TAGS = {
    "detect": 11,
    "detect_attr": 12,
    "vqa": 13,
    "visual_entail": 14,
    "text_entail2": 15,
    "text_entail3": 16,
    "text_dup": 17,
    "text_polarity": 18,
}

VAL_OFFSET = 1_000_000


def build_vocabulary() -> Vocabulary:
    words: List[str] = []
    for group in (
        SHAPE_CLASSES,
        COLOR_NAMES,
        ("count", "exists", "there", "is", "are", "a"),
        QUANTIFIERS,
        POSITIVE_WORDS,
        NEGATIVE_WORDS,
        FILLER_WORDS,
        NOUNS,
    ):
        words.extend(group)
    return Vocabulary.from_words(words)


@dataclass
class SceneObject:
    class_id: int
    attribute: int
    box: np.ndarray  # normalized (cx, cy, w, h)
    color: np.ndarray  # exact rendered RGB, lets tests re-segment by color


@dataclass
class ShapeScene:
    image: np.ndarray  # (64, 64, 3) float32 in [0, 1]
    objects: List[SceneObject]

    def target(self, with_attributes: bool) -> dict:
        tgt = {
            "classes": np.array([o.class_id for o in self.objects], dtype=np.int64),
            "boxes": np.array([o.box for o in self.objects], dtype=np.float64).reshape(-1, 4),
        }
        if with_attributes:
            tgt["attributes"] = np.array([o.attribute for o in self.objects], dtype=np.int64)
        return tgt


def _rng(seed: int, index: int, tag: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence([int(seed), int(index), int(tag)]))


def _shape_mask(rng: np.random.Generator) -> Tuple[int, np.ndarray, Tuple[int, int, int, int]]:
    """Draw one shape; returns (class_id, boolean mask, pixel bbox x0,y0,x1,y1).

    Shapes are placed on the integer grid so the analytic bbox (inclusive
    pixel coordinates) is exactly the rendered one.
    """
    kind = int(rng.integers(len(SHAPE_CLASSES)))
    grid = np.zeros((IMAGE_SIZE, IMAGE_SIZE), dtype=bool)
    if kind == 0:  # rectangle
        w = int(rng.integers(14, 29))
        h = int(rng.integers(14, 29))
        x0 = int(rng.integers(1, IMAGE_SIZE - w))
        y0 = int(rng.integers(1, IMAGE_SIZE - h))
        grid[y0 : y0 + h, x0 : x0 + w] = True
        bbox = (x0, y0, x0 + w - 1, y0 + h - 1)
    elif kind == 1:  # circle
        r = int(rng.integers(7, 14))
        cx = int(rng.integers(r + 1, IMAGE_SIZE - r - 1))
        cy = int(rng.integers(r + 1, IMAGE_SIZE - r - 1))
        yy, xx = np.mgrid[0:IMAGE_SIZE, 0:IMAGE_SIZE]
        grid[(xx - cx) ** 2 + (yy - cy) ** 2 <= r * r] = True
        bbox = (cx - r, cy - r, cx + r, cy + r)
    else:  # isoceles triangle, apex up
        base = int(rng.integers(7, 13)) * 2 + 1  # odd width 15..25
        h = int(rng.integers(14, 29))
        x0 = int(rng.integers(1, IMAGE_SIZE - base))
        y0 = int(rng.integers(1, IMAGE_SIZE - h))
        cx = x0 + base // 2
        for j in range(h):
            half = (j * (base // 2)) // (h - 1)
            grid[y0 + j, cx - half : cx + half + 1] = True
        bbox = (x0, y0, x0 + base - 1, y0 + h - 1)
    return kind, grid, bbox


def _bbox_normalized(bbox: Tuple[int, int, int, int]) -> np.ndarray:
    x0, y0, x1, y1 = bbox
    w = x1 - x0 + 1
    h = y1 - y0 + 1
    return np.array([(x0 + x1 + 1) / 2 / IMAGE_SIZE, (y0 + y1 + 1) / 2 / IMAGE_SIZE, w / IMAGE_SIZE, h / IMAGE_SIZE])


def _gen_scene(rng: np.random.Generator) -> ShapeScene:
    image = np.zeros((IMAGE_SIZE, IMAGE_SIZE, 3), dtype=np.float32)
    occupied = np.zeros((IMAGE_SIZE, IMAGE_SIZE), dtype=bool)
    target_count = int(rng.integers(1, MAX_OBJECTS + 1))
    objects: List[SceneObject] = []
    attempts = 0
    while len(objects) < target_count and attempts < 60:
        attempts += 1
        class_id, mask, bbox = _shape_mask(rng)
        attribute = int(rng.integers(len(COLOR_NAMES)))
        brightness = float(rng.uniform(0.8, 1.0))
        box = _bbox_normalized(bbox)
        if (mask & occupied).any():
            continue
        if objects:
            existing = np.array([o.box for o in objects])
            if iou_pairwise(box[None, :], existing).max() > 0.15:
                continue
        color = (COLOR_VALUES[attribute] * brightness).astype(np.float32)
        image[mask] = color
        occupied |= mask
        objects.append(SceneObject(class_id, attribute, box, color))
    return ShapeScene(image, objects)


def gen_shapes_scene(seed: int, index: int, with_attributes: bool) -> ShapeScene:
    tag = _TAGS["detect_attr"] if with_attributes else _TAGS["detect"]
    return _gen_scene(_rng(seed, index, tag))


def _class_count(scene: ShapeScene, class_id: int) -> int:
    return sum(1 for o in scene.objects if o.class_id == class_id)


def _present_pairs(scene: ShapeScene) -> List[Tuple[int, int]]:
    return sorted({(o.attribute, o.class_id) for o in scene.objects})


def gen_vqa_sample(seed: int, index: int, vocab: Vocabulary) -> dict:
    rng = _rng(seed, index, _TAGS["vqa"])
    scene = _gen_scene(rng)
    if rng.random() < 0.5:
        class_id = int(rng.integers(len(SHAPE_CLASSES)))
        question = f"count {SHAPE_CLASSES[class_id]}"
        label = min(_class_count(scene, class_id), MAX_OBJECTS)
    else:
        present = _present_pairs(scene)
        want_present = rng.random() < 0.5 and present
        if want_present:
            attr, class_id = present[int(rng.integers(len(present)))]
        else:
            absent = [
                (a, c)
                for a in range(len(COLOR_NAMES))
                for c in range(len(SHAPE_CLASSES))
                if (a, c) not in present
            ]
            attr, class_id = absent[int(rng.integers(len(absent)))]
        question = f"exists {COLOR_NAMES[attr]} {SHAPE_CLASSES[class_id]}"
        label = VQA_ANSWERS.index("yes") if (attr, class_id) in present else VQA_ANSWERS.index("no")
    return {"image": scene.image, "scene": scene, "tokens": vocab.tokenize(question), "label": int(label)}


def gen_ve_sample(seed: int, index: int, vocab: Vocabulary) -> dict:
    rng = _rng(seed, index, _TAGS["visual_entail"])
    scene = _gen_scene(rng)
    present = _present_pairs(scene)
    label = int(rng.integers(3))
    if label == 0:  # entail: a present (color, class) pair
        attr, class_id = present[int(rng.integers(len(present)))]
        caption = f"there is a {COLOR_NAMES[attr]} {SHAPE_CLASSES[class_id]}"
    elif label == 1:  # neutral: present class under an unverifiable quantifier
        class_id = scene.objects[int(rng.integers(len(scene.objects)))].class_id
        quant = QUANTIFIERS[int(rng.integers(len(QUANTIFIERS)))]
        caption = f"there are {quant} {SHAPE_CLASSES[class_id]}"
    else:  # contradict: an absent (color, class) pair
        absent = [
            (a, c)
            for a in range(len(COLOR_NAMES))
            for c in range(len(SHAPE_CLASSES))
            if (a, c) not in present
        ]
        attr, class_id = absent[int(rng.integers(len(absent)))]
        caption = f"there is a {COLOR_NAMES[attr]} {SHAPE_CLASSES[class_id]}"
    return {"image": scene.image, "scene": scene, "tokens": vocab.tokenize(caption), "label": label}


def _sample_words(rng: np.random.Generator, pool: Sequence[str], count: int) -> List[str]:
    idx = rng.choice(len(pool), size=count, replace=False)
    return [pool[int(i)] for i in idx]


def gen_text_sample(seed: int, index: int, task: str, vocab: Vocabulary) -> dict:
    if task not in ("text_entail2", "text_entail3", "text_dup", "text_polarity"):
        raise KeyError(f"unknown text task {task!r}")
    rng = _rng(seed, index, _TAGS[task])
    if task == "text_polarity":
        total = 3 if rng.random() < 0.5 else 5
        n_pos = int(rng.integers(0, total + 1))
        words = _sample_words(rng, POSITIVE_WORDS, n_pos) + _sample_words(rng, NEGATIVE_WORDS, total - n_pos)
        if rng.random() < 0.5:
            words.append(FILLER_WORDS[int(rng.integers(len(FILLER_WORDS)))])
        perm = rng.permutation(len(words))
        sentence = " ".join(words[int(i)] for i in perm)
        label = 1 if n_pos > total - n_pos else 0  # 1 = positive majority
        return {"tokens": vocab.tokenize(sentence), "label": label}

    if task == "text_dup":
        # both branches emit equal-length sentences so length carries no label
        # information; negatives mix single-word edits with larger rewrites
        size = int(rng.integers(3, 6))
        first = _sample_words(rng, NOUNS, size)
        second = list(first)
        if rng.random() >= 0.5:
            edits = 1 if rng.random() < 0.5 else int(rng.integers(2, min(size, 3) + 1))
            fresh = [w for w in NOUNS if w not in first]
            positions = rng.choice(size, size=edits, replace=False)
            picks = rng.choice(len(fresh), size=edits, replace=False)
            for p, c in zip(positions, picks):
                second[int(p)] = fresh[int(c)]
        perm = rng.permutation(size)
        second = [second[int(i)] for i in perm]
        label = 1 if sorted(first) == sorted(second) else 0  # 1 = duplicate
        return {"tokens": vocab.tokenize_pair(" ".join(first), " ".join(second)), "label": label}

    # containment entailment over noun sets: premise A, fixed-length
    # hypothesis B, so hypothesis length carries no label information
    a_size = int(rng.integers(3, 5))
    a_words = _sample_words(rng, ENTAIL_NOUNS, a_size)
    rest = [w for w in ENTAIL_NOUNS if w not in a_words]
    b_size = 2
    if task == "text_entail2":
        if rng.random() < 0.5:  # B subset of A -> entail
            b_words = _sample_words(rng, a_words, b_size)
        else:
            foreign = 1 if rng.random() < 0.5 else 2
            b_words = _sample_words(rng, a_words, b_size - foreign) + _sample_words(rng, rest, foreign)
        label = 0 if set(b_words) <= set(a_words) else 1  # 0 = entail
    else:  # text_entail3: subset / partial overlap / disjoint
        relation = int(rng.integers(3))
        if relation == 0:
            b_words = _sample_words(rng, a_words, b_size)
        elif relation == 2:
            b_words = _sample_words(rng, rest, b_size)
        else:
            b_words = _sample_words(rng, a_words, 1) + _sample_words(rng, rest, 1)
        b_set, a_set = set(b_words), set(a_words)
        label = 0 if b_set <= a_set else (2 if not (b_set & a_set) else 1)
    perm = rng.permutation(len(b_words))
    b_words = [b_words[int(i)] for i in perm]
    return {"tokens": vocab.tokenize_pair(" ".join(a_words), " ".join(b_words)), "label": int(label)}


@dataclass(frozen=True)
class TaskSpec:
    name: str
    modality: str  # vision | text | vision_text
    head: str  # detection | classifier
    num_classes: int
    queries: int
    prob: float
    num_attributes: int = 0


DEFAULT_TASKS: Dict[str, TaskSpec] = {
    spec.name: spec
    for spec in (
        TaskSpec("detect", "vision", "detection", len(SHAPE_CLASSES), 12, 0.20),
        TaskSpec("detect_attr", "vision", "detection", len(SHAPE_CLASSES), 12, 0.07, num_attributes=len(COLOR_NAMES)),
        TaskSpec("vqa", "vision_text", "classifier", len(VQA_ANSWERS), 4, 0.26),
        TaskSpec("visual_entail", "vision_text", "classifier", len(VE_LABELS), 4, 0.12),
        TaskSpec("text_entail2", "text", "classifier", 2, 4, 0.10),
        TaskSpec("text_entail3", "text", "classifier", 3, 4, 0.10),
        TaskSpec("text_dup", "text", "classifier", 2, 4, 0.10),
        TaskSpec("text_polarity", "text", "classifier", 2, 4, 0.05),
    )
}


class SyntheticDataset:
    """Lazy view over one task's sample stream; val indices sit past 10^6."""

    def __init__(self, task: str, split: str, seed: int, size: int, vocab: Optional[Vocabulary] = None) -> None:
        if task not in DEFAULT_TASKS:
            raise KeyError(f"unknown task {task!r}")
        if split not in ("train", "val"):
            raise ValueError("split must be 'train' or 'val'")
        self.task = task
        self.split = split
        self.seed = seed
        self.size = size
        self.vocab = vocab or build_vocabulary()

    def __len__(self) -> int:
        return self.size

    def sample(self, index: int) -> dict:
        if self.split == "val":
            index = VAL_OFFSET + index
        task = self.task
        if task in ("detect", "detect_attr"):
            scene = gen_shapes_scene(self.seed, index, with_attributes=task == "detect_attr")
            return {
                "image": scene.image,
                "scene": scene,
                "target": scene.target(with_attributes=task == "detect_attr"),
            }
        if task == "vqa":
            return gen_vqa_sample(self.seed, index, self.vocab)
        if task == "visual_entail":
            return gen_ve_sample(self.seed, index, self.vocab)
        return gen_text_sample(self.seed, index, task, self.vocab)

    def __getitem__(self, key):
        if isinstance(key, slice):
            return [self.sample(i) for i in range(*key.indices(self.size))]
        if not 0 <= key < self.size:
            raise IndexError(key)
        return self.sample(key)


def collate_detection(samples: Sequence[dict]) -> dict:
    return {
        "images": np.stack([s["image"] for s in samples]),
        "targets": [s["target"] for s in samples],
    }


def collate_classification(samples: Sequence[dict]) -> dict:
    batch = {
        "tokens": pad_batch([s["tokens"] for s in samples]),
        "labels": np.array([s["label"] for s in samples], dtype=np.int64),
    }
    if "image" in samples[0]:
        batch["images"] = np.stack([s["image"] for s in samples])
    return batch


def resize_image(image: np.ndarray, short_side: int) -> np.ndarray:
    """Nearest-neighbor resize so the shortest side equals ``short_side``."""
    h, w = image.shape[:2]
    scale = short_side / min(h, w)
    nh, nw = int(round(h * scale)), int(round(w * scale))
    rows = np.minimum((np.arange(nh) / scale).astype(np.int64), h - 1)
    cols = np.minimum((np.arange(nw) / scale).astype(np.int64), w - 1)
    return image[rows][:, cols]


def export_dataset(dataset: SyntheticDataset, out_dir) -> Path:
    """Write images as one .npy stack plus a line-delimited annotation file."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    images = []
    lines = []
    for i in range(len(dataset)):
        sample = dataset[i]
        record: Dict[str, object] = {"index": i}
        if "image" in sample:
            images.append(sample["image"])
            record["image_row"] = len(images) - 1
        if "target" in sample:
            tgt = sample["target"]
            objects = []
            for j, (c, b) in enumerate(zip(tgt["classes"], tgt["boxes"])):
                entry = {"class": int(c), "box": [float(v) for v in b]}
                if "attributes" in tgt:
                    entry["attribute"] = int(tgt["attributes"][j])
                objects.append(entry)
            record["objects"] = objects
        if "tokens" in sample:
            record["tokens"] = [int(t) for t in sample["tokens"]]
        if "label" in sample:
            record["label"] = int(sample["label"])
        lines.append(json.dumps(record, sort_keys=True))
    if images:
        np.save(out / f"{dataset.task}_{dataset.split}_images.npy", np.stack(images))
    (out / f"{dataset.task}_{dataset.split}_annotations.jsonl").write_text("\n".join(lines) + "\n")
    return out
