import os
import json
import logging

import pandas as pd


logger = logging.getLogger(__name__)

COCO_KEYS = ('images', 'annotations', 'categories')


def read_json(file_path):
    if not os.path.exists(file_path):
        raise FileNotFoundError("Annotation file not found: {}".format(file_path))
    if os.path.getsize(file_path) == 0:
        raise ValueError("Annotation file is empty: {}".format(file_path))
    with open(file_path, 'r') as f:
        return json.load(f)


def write_json(obj, file_path, indent=None):
    try:
        os.makedirs(os.path.dirname(os.path.abspath(file_path)), exist_ok=True)
        with open(file_path, 'w') as f:
            json.dump(obj, f, indent=indent, sort_keys=True)
    except OSError as e:
        raise OSError("Could not write {}: {}".format(file_path, e)) from e


class CocoAnnotationReader():
    """Reads a COCO-style annotation file into per-image frames.

    Only the subset of COCO used by the synthetic benchmark is required:
    ``images`` (id, file_name, width, height), ``annotations``
    (id, image_id, category_id, bbox) and ``categories`` (id, name).
    """

    def __init__(self, annotation_file):
        self.annotation_file = annotation_file
        self.images_df = None
        self.annotations_df = None
        self.categories = None
        self.info = {}
        self._load()

    def _load(self):
        logger.info("Loading annotations from: {}".format(self.annotation_file))
        try:
            coco = read_json(self.annotation_file)
        except json.JSONDecodeError as e:
            raise ValueError("Malformed annotation file {}: {}".format(
                self.annotation_file, e)) from e

        missing = [k for k in COCO_KEYS if k not in coco]
        if missing:
            raise ValueError("{} is missing COCO keys: {}".format(
                self.annotation_file, missing))

        self.info = coco.get('info', {})
        self.categories = sorted(coco['categories'], key=lambda c: c['id'])
        self.images_df = pd.DataFrame(coco['images'],
                                      columns=['id', 'file_name', 'width', 'height'])
        self.annotations_df = pd.DataFrame(
            coco['annotations'],
            columns=['id', 'image_id', 'category_id', 'bbox'])
        logger.debug("{} images, {} annotations, {} categories".format(
            len(self.images_df), len(self.annotations_df), len(self.categories)))

    def category_names(self):
        return [c['name'] for c in self.categories]

    def records(self):
        """Returns one record per image, in file order:
        {'image': {...}, 'annotations': [{...}, ...]}
        """
        grouped = {image_id: frame.to_dict('records')
                   for image_id, frame in self.annotations_df.groupby('image_id', sort=False)}
        return [{'image': image,
                 'annotations': grouped.get(image['id'], [])}
                for image in self.images_df.to_dict('records')]
