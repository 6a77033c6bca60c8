"""
Synthetic two-domain detection benchmark.

Source scenes are flat-shaded geometric shapes on a dark, smoothly shaded
background. The target domain is the same generator passed through a
fog-like corruption (blur, brightening, haze blend toward gray, sensor
noise), standing in for a clear-weather -> foggy-weather adaptation task.
"""
import os
import zlib
import enum
import logging

from collections import namedtuple
from dataclasses import dataclass, field, asdict
from typing import List, Optional, Tuple

import numpy as np
import torch
from PIL import Image, ImageDraw
from scipy.ndimage import gaussian_filter
from tqdm import tqdm

from datr.utils import chunk, derive_seed, timeit
from datr.utils.box_ops import numpy_box_iou
from datr.utils.loaders import CocoAnnotationReader, write_json


logger = logging.getLogger(__name__)

DEFAULT_SHAPE_CLASSES = ('circle', 'square', 'triangle', 'cross')
MAX_PLACEMENT_TRIES = 50
BOX_TOLERANCE = 1e-6


class DomainLabel(enum.IntEnum):
    SOURCE = 0
    TARGET = 1

    @classmethod
    def parse(cls, value):
        if isinstance(value, cls):
            return value
        if isinstance(value, str):
            try:
                return cls[value.upper()]
            except KeyError:
                raise ValueError("{} is not a valid domain. "
                                 "Must be one of {}".format(value, [d.name.lower() for d in cls]))
        return cls(int(value))


@dataclass(frozen=True)
class SceneSpec:
    image_size: Tuple[int, int] = (128, 128)
    num_objects_range: Tuple[int, int] = (1, 4)
    shape_classes: Tuple[str, ...] = DEFAULT_SHAPE_CLASSES
    min_object_size: int = 16
    max_object_size: int = 40
    max_overlap_iou: float = 0.1

    def __post_init__(self):
        lo, hi = self.num_objects_range
        if lo < 1 or hi < lo:
            raise ValueError("Invalid num_objects_range: {}".format(self.num_objects_range))
        if not self.shape_classes or len(set(self.shape_classes)) != len(self.shape_classes):
            raise ValueError("shape_classes must be non-empty and duplicate-free: {}".format(
                self.shape_classes))
        unknown = set(self.shape_classes) - set(DEFAULT_SHAPE_CLASSES)
        if unknown:
            raise ValueError("{} are not drawable shapes. "
                             "Must be among {}".format(sorted(unknown), DEFAULT_SHAPE_CLASSES))
        if not 0 < self.min_object_size < self.max_object_size <= min(self.image_size):
            raise ValueError("Invalid object sizes: min={} max={} image={}".format(
                self.min_object_size, self.max_object_size, self.image_size))
        if not 0.0 <= self.max_overlap_iou <= 1.0:
            raise ValueError("Invalid max_overlap_iou: {}".format(self.max_overlap_iou))


@dataclass(frozen=True)
class DomainShiftParams:
    blur_sigma: float = 0.0
    brightness_shift: float = 0.0
    haze_alpha: float = 0.0
    noise_std: float = 0.0
    haze_gray: float = 0.7

    def __post_init__(self):
        if self.blur_sigma < 0 or self.noise_std < 0:
            raise ValueError("blur_sigma and noise_std must be >= 0: {}".format(self))
        if not -1.0 <= self.brightness_shift <= 1.0:
            raise ValueError("brightness_shift must be in [-1, 1]: {}".format(self.brightness_shift))
        if not 0.0 <= self.haze_alpha <= 1.0:
            raise ValueError("haze_alpha must be in [0, 1]: {}".format(self.haze_alpha))
        if not 0.0 <= self.haze_gray <= 1.0:
            raise ValueError("haze_gray must be in [0, 1]: {}".format(self.haze_gray))


FOG_PRESETS = {
    'none': DomainShiftParams(),
    'light': DomainShiftParams(blur_sigma=0.8, brightness_shift=0.05,
                               haze_alpha=0.35, noise_std=0.02),
    'heavy': DomainShiftParams(blur_sigma=1.5, brightness_shift=0.1,
                               haze_alpha=0.6, noise_std=0.04),
}


@dataclass
class AnnotatedImage:
    """An image with boxes in normalized (cx, cy, w, h) and category indices.

    ``scores`` is only set for pseudo-labels.
    """
    pixels: np.ndarray
    boxes: np.ndarray
    labels: np.ndarray
    domain: DomainLabel = DomainLabel.SOURCE
    scores: Optional[np.ndarray] = None

    def __post_init__(self):
        self.boxes = np.asarray(self.boxes, dtype=np.float64).reshape(-1, 4)
        self.labels = np.asarray(self.labels, dtype=np.int64).reshape(-1)
        self.domain = DomainLabel.parse(self.domain)
        if self.pixels.ndim != 3 or self.pixels.shape[2] != 3:
            raise ValueError("pixels must be HxWx3, got {}".format(self.pixels.shape))
        if len(self.boxes) != len(self.labels):
            raise ValueError("{} boxes but {} labels".format(len(self.boxes), len(self.labels)))
        if self.scores is not None:
            self.scores = np.asarray(self.scores, dtype=np.float64).reshape(-1)
            if len(self.scores) != len(self.boxes):
                raise ValueError("{} scores but {} boxes".format(len(self.scores), len(self.boxes)))
        if len(self.boxes):
            b = self.boxes
            inside = ((b[:, 0] - b[:, 2] / 2 >= -BOX_TOLERANCE) & (b[:, 0] + b[:, 2] / 2 <= 1 + BOX_TOLERANCE)
                      & (b[:, 1] - b[:, 3] / 2 >= -BOX_TOLERANCE) & (b[:, 1] + b[:, 3] / 2 <= 1 + BOX_TOLERANCE))
            if not ((b[:, 2] > 0) & (b[:, 3] > 0) & inside).all():
                raise ValueError("Boxes must lie within [0, 1] with w, h > 0: {}".format(b))

    @property
    def height(self):
        return self.pixels.shape[0]

    @property
    def width(self):
        return self.pixels.shape[1]


@dataclass
class DatasetManifest:
    root: str
    split: str
    domain: DomainLabel
    entries: List[Tuple[str, dict]]
    categories: List[str] = field(default_factory=list)
    annotation_file: Optional[str] = None

    def __post_init__(self):
        if not self.entries:
            raise ValueError("Manifest {} has no entries".format(self.annotation_file or self.root))

    def __len__(self):
        return len(self.entries)

    @property
    def num_classes(self):
        return len(self.categories)


Benchmark = namedtuple('Benchmark', 'source_train target_train source_val target_val')


def _shape_mask(shape, x0, y0, size, image_size):
    """Rasterizes one shape on its own canvas and returns the boolean mask."""
    height, width = image_size
    canvas = Image.new('L', (width, height), 0)
    draw = ImageDraw.Draw(canvas)
    x1, y1 = x0 + size - 1, y0 + size - 1
    if shape == 'circle':
        draw.ellipse([x0, y0, x1, y1], fill=255)
    elif shape == 'square':
        draw.rectangle([x0, y0, x1, y1], fill=255)
    elif shape == 'triangle':
        draw.polygon([(x0 + (size - 1) / 2.0, y0), (x0, y1), (x1, y1)], fill=255)
    elif shape == 'cross':
        t = max(2, size // 3)
        off = (size - t) // 2
        draw.rectangle([x0, y0 + off, x1, y0 + off + t - 1], fill=255)
        draw.rectangle([x0 + off, y0, x0 + off + t - 1, y1], fill=255)
    else:
        raise ValueError("{} is not a drawable shape".format(shape))
    return np.asarray(canvas) > 0


def _mask_to_box(mask):
    """Tight normalized (cx, cy, w, h) box around the set pixels of a mask."""
    height, width = mask.shape
    rows = np.flatnonzero(mask.any(axis=1))
    cols = np.flatnonzero(mask.any(axis=0))
    x, y = cols[0], rows[0]
    w, h = cols[-1] - cols[0] + 1, rows[-1] - rows[0] + 1
    return np.array([(x + w / 2.0) / width, (y + h / 2.0) / height,
                     w / float(width), h / float(height)])


def _background(rng, image_size):
    height, width = image_size
    base = rng.uniform(0.05, 0.3, size=3)
    ramp = rng.uniform(-0.1, 0.1, size=(2, 3))
    yy = np.linspace(0.0, 1.0, height)[:, None, None]
    xx = np.linspace(0.0, 1.0, width)[None, :, None]
    return np.clip(base + yy * ramp[0] + xx * ramp[1], 0.0, 1.0)


def _shape_color(rng):
    color = rng.uniform(0.4, 0.9, size=3)
    color[rng.integers(3)] = rng.uniform(0.85, 1.0)
    return color


def _place_objects(rng, spec):
    """Draws shape, size and position for each object of a scene.

    A placement is rejected when its box overlaps an earlier box by more
    than ``max_overlap_iou`` or when its mask touches an earlier mask, so
    no shape occludes another and every mask stays fully visible.

    Returns:
        list of (boolean mask, label) in painting order
    """
    height, width = spec.image_size
    occupied = np.zeros(spec.image_size, dtype=bool)
    n_objects = int(rng.integers(spec.num_objects_range[0], spec.num_objects_range[1] + 1))
    placed, boxes = [], []
    for _ in range(n_objects):
        for _ in range(MAX_PLACEMENT_TRIES):
            label = int(rng.integers(len(spec.shape_classes)))
            size = int(rng.integers(spec.min_object_size, spec.max_object_size + 1))
            x0 = int(rng.integers(0, width - size + 1))
            y0 = int(rng.integers(0, height - size + 1))
            mask = _shape_mask(spec.shape_classes[label], x0, y0, size, spec.image_size)
            box = _mask_to_box(mask)
            if occupied[mask].any():
                continue
            if boxes and numpy_box_iou(box, np.stack(boxes)).max() > spec.max_overlap_iou:
                continue
            occupied |= mask
            placed.append((mask, label))
            boxes.append(box)
            break
        else:
            logger.debug("Placement failed, keeping {} of {} objects".format(len(placed), n_objects))
            return placed
    return placed


def generate_scene(rng_seed, spec=None):
    """Draws one synthetic scene; fully determined by (rng_seed, spec).

    Objects that cannot be placed after MAX_PLACEMENT_TRIES attempts are
    dropped, so a scene may hold fewer objects than requested but never
    fewer than one.
    """
    spec = spec or SceneSpec()
    rng = np.random.default_rng(rng_seed)
    pixels = _background(rng, spec.image_size)
    objects = _place_objects(rng, spec)
    for mask, _ in objects:
        pixels[mask] = _shape_color(rng)

    return AnnotatedImage(pixels=pixels.astype(np.float32),
                          boxes=np.stack([_mask_to_box(mask) for mask, _ in objects]),
                          labels=np.array([label for _, label in objects], dtype=np.int64),
                          domain=DomainLabel.SOURCE)


def apply_domain_shift(img, params, rng_seed):
    """Fog-like corruption; geometry (boxes, labels) is never touched."""
    rng = np.random.default_rng(rng_seed)
    pixels = img.pixels.astype(np.float32, copy=True)

    if params.blur_sigma > 0:
        pixels = gaussian_filter(pixels, sigma=(params.blur_sigma, params.blur_sigma, 0), mode='nearest')
    if params.brightness_shift != 0:
        pixels = pixels + np.float32(params.brightness_shift)
    if params.haze_alpha > 0:
        alpha = np.float32(params.haze_alpha)
        pixels = (np.float32(1.0) - alpha) * pixels + alpha * np.float32(params.haze_gray)
    if params.noise_std > 0:
        pixels = pixels + rng.normal(0.0, params.noise_std, size=pixels.shape).astype(np.float32)

    return AnnotatedImage(pixels=np.clip(pixels, 0.0, 1.0).astype(np.float32),
                          boxes=img.boxes.copy(),
                          labels=img.labels.copy(),
                          domain=DomainLabel.TARGET,
                          scores=None if img.scores is None else img.scores.copy())


def _split_key(split):
    return zlib.crc32(split.encode('utf-8'))


def _coco_bbox(box, width, height):
    cx, cy, w, h = box
    return [float((cx - w / 2) * width), float((cy - h / 2) * height),
            float(w * width), float(h * height)]


def _normalized_box(bbox, width, height):
    x, y, w, h = [float(v) for v in bbox]
    box = np.array([(x + w / 2) / width, (y + h / 2) / height, w / width, h / height])
    return np.clip(box, 0.0, 1.0)


def _save_png(pixels, path):
    Image.fromarray(np.round(pixels * 255.0).astype(np.uint8)).save(path)


@timeit
def build_dataset(spec, shift_params, n_images, split, domain, out_dir, seed=0):
    """Renders ``n_images`` scenes to ``<out_dir>/<split>/<domain>/`` with a
    COCO-style ``annotations.json`` and returns the loaded manifest.
    """
    spec = spec or SceneSpec()
    domain = DomainLabel.parse(domain)
    if n_images < 1:
        raise ValueError("n_images must be >= 1, got {}".format(n_images))

    root = os.path.join(out_dir, split, domain.name.lower())
    image_dir = os.path.join(root, 'images')
    try:
        os.makedirs(image_dir, exist_ok=True)
    except OSError as e:
        raise OSError("Could not create dataset directory {}: {}".format(image_dir, e)) from e

    height, width = spec.image_size
    images, annotations = [], []
    for i in tqdm(range(n_images), desc="{}/{}".format(split, domain.name.lower())):
        img = generate_scene(derive_seed(seed, _split_key(split), int(domain), i), spec)
        if domain == DomainLabel.TARGET:
            img = apply_domain_shift(img, shift_params,
                                     derive_seed(seed, _split_key(split), int(domain), i, 1))

        file_name = os.path.join('images', '{:06d}.png'.format(i))
        path = os.path.join(root, file_name)
        try:
            _save_png(img.pixels, path)
        except OSError as e:
            raise OSError("Could not write image {}: {}".format(path, e)) from e

        images.append({'id': i, 'file_name': file_name, 'width': width, 'height': height})
        for box, label in zip(img.boxes, img.labels):
            bbox = _coco_bbox(box, width, height)
            annotations.append({'id': len(annotations), 'image_id': i,
                                'category_id': int(label), 'bbox': bbox,
                                'area': bbox[2] * bbox[3], 'iscrowd': 0})

    coco = {
        'info': {'split': split, 'domain': domain.name.lower(), 'seed': seed,
                 'domain_shift': asdict(shift_params) if domain == DomainLabel.TARGET else None},
        'images': images,
        'annotations': annotations,
        'categories': [{'id': i, 'name': name} for i, name in enumerate(spec.shape_classes)],
    }
    annotation_file = os.path.join(root, 'annotations.json')
    write_json(coco, annotation_file)
    logger.info("Wrote {} images / {} boxes to {}".format(len(images), len(annotations), root))
    return load_manifest(annotation_file)


def build_benchmark(out_dir, n_train=800, n_val=200, seed=0, fog_preset='heavy', spec=None):
    if fog_preset not in FOG_PRESETS:
        raise ValueError("{} is not a valid fog preset. "
                         "Must be one of {}".format(fog_preset, sorted(FOG_PRESETS)))
    spec = spec or SceneSpec()
    shift = FOG_PRESETS[fog_preset]
    manifests = {}
    for split, n in (('train', n_train), ('val', n_val)):
        for domain in DomainLabel:
            manifests['{}_{}'.format(domain.name.lower(), split)] = build_dataset(
                spec, shift, n, split, domain, out_dir, seed=seed)
    return Benchmark(**manifests)


def load_manifest(annotation_file):
    reader = CocoAnnotationReader(annotation_file)
    root = os.path.dirname(os.path.abspath(annotation_file))
    entries = []
    for record in reader.records():
        path = os.path.join(root, record['image']['file_name'])
        if not os.path.exists(path):
            raise FileNotFoundError("Image referenced by {} not found: {}".format(annotation_file, path))
        entries.append((path, record))
    return DatasetManifest(root=root,
                           split=reader.info.get('split', os.path.basename(os.path.dirname(root))),
                           domain=DomainLabel.parse(reader.info.get('domain', os.path.basename(root))),
                           entries=entries,
                           categories=reader.category_names(),
                           annotation_file=annotation_file)


def load_benchmark(data_dir):
    manifests = {}
    for split in ('train', 'val'):
        for domain in DomainLabel:
            name = domain.name.lower()
            manifests['{}_{}'.format(name, split)] = load_manifest(
                os.path.join(data_dir, split, name, 'annotations.json'))
    return Benchmark(**manifests)


def load_entry(manifest, index):
    """Decodes entry ``index`` of a manifest into an AnnotatedImage."""
    path, record = manifest.entries[index]
    try:
        image = record['image']
        width, height = int(image['width']), int(image['height'])
        boxes, labels = [], []
        for ann in record['annotations']:
            bbox = ann['bbox']
            if len(bbox) != 4 or bbox[2] <= 0 or bbox[3] <= 0:
                raise ValueError("invalid bbox {}".format(bbox))
            label = int(ann['category_id'])
            if not 0 <= label < manifest.num_classes:
                raise ValueError("category {} outside label space".format(label))
            boxes.append(_normalized_box(bbox, width, height))
            labels.append(label)
        pixels = np.asarray(Image.open(path).convert('RGB'), dtype=np.float32) / 255.0
        return AnnotatedImage(pixels=pixels,
                              boxes=np.stack(boxes) if boxes else np.zeros((0, 4)),
                              labels=np.array(labels, dtype=np.int64),
                              domain=manifest.domain)
    except (KeyError, TypeError, ValueError) as e:
        raise ValueError("Corrupt annotation record at entry {} ({}): {}".format(index, path, e)) from e


def load_batches(manifest, batch_size, shuffle_seed=None):
    """Yields one epoch of AnnotatedImage batches (lists).

    Every entry is yielded exactly once; the order is the manifest order
    when ``shuffle_seed`` is None and a seeded permutation otherwise.
    """
    order = np.arange(len(manifest))
    if shuffle_seed is not None:
        order = np.random.default_rng(shuffle_seed).permutation(len(manifest))
    for indices in chunk(order, batch_size):
        yield [load_entry(manifest, int(i)) for i in indices]


def augment_batch(images, targets, generator, flip_prob=0.5, jitter=0.2):
    """Student-side augmentation: horizontal flip + brightness/contrast jitter.

    Args:
        images (torch.Tensor): B x 3 x H x W in [0, 1]
        targets (list): per-image dicts with 'boxes' (cx, cy, w, h) and 'labels'
        generator (torch.Generator): source of randomness
    Returns:
        (images, targets) augmented copies
    """
    images = images.clone()
    targets = [dict(t) for t in targets]
    b = images.shape[0]
    flips = torch.rand(b, generator=generator) < flip_prob
    brightness = (torch.rand(b, generator=generator) * 2 - 1) * jitter
    contrast = 1 + (torch.rand(b, generator=generator) * 2 - 1) * jitter
    for i in range(b):
        if flips[i]:
            images[i] = images[i].flip(-1)
            boxes = targets[i]['boxes'].clone()
            if len(boxes):
                boxes[:, 0] = 1 - boxes[:, 0]
            targets[i]['boxes'] = boxes
        mean = images[i].mean()
        images[i] = (images[i] - mean) * contrast[i] + mean + brightness[i]
    return images.clamp(0, 1), targets
