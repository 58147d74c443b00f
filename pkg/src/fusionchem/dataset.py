"""Per-sample bundles of labels, images, molecules and descriptor rows."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import AlignmentError, ValidationError
from .molio import RasterSpec, rasterize


@dataclass(eq=False)
class Samples:
    """Aligned modalities for one set of samples.

    Every populated modality has exactly one entry per id, in ``ids`` order.
    ``labels`` uses 1 for the positive (RB) class and 0 for NRB.
    """

    ids: tuple
    labels: np.ndarray | None = None
    images: np.ndarray | None = None
    descriptors: object = None
    molecules: list | None = None
    sources: tuple | None = None
    raster: RasterSpec | None = None

    def __post_init__(self):
        self.ids = tuple(self.ids)
        if len(set(self.ids)) != len(self.ids):
            raise AlignmentError("duplicate sample ids")
        n = len(self.ids)
        if self.labels is not None:
            self.labels = np.asarray(self.labels, dtype=float).reshape(-1)
            if len(self.labels) != n:
                raise AlignmentError(f"{len(self.labels)} labels for {n} samples")
            if not np.all((self.labels == 0) | (self.labels == 1)):
                raise ValidationError("labels must be 0 or 1")
        if self.images is not None and len(self.images) != n:
            raise AlignmentError(f"{len(self.images)} images for {n} samples")
        if self.descriptors is not None and self.descriptors.sample_ids != self.ids:
            raise AlignmentError("descriptor rows are not aligned with sample ids")
        if self.molecules is not None and len(self.molecules) != n:
            raise AlignmentError(f"{len(self.molecules)} molecules for {n} samples")
        if self.sources is not None:
            self.sources = tuple(self.sources)

    def __len__(self):
        return len(self.ids)

    @classmethod
    def join(cls, ids, labels=None, images=None, image_ids=None, descriptors=None,
             molecules=None, sources=None, raster=None):
        """Align modalities to ``ids``.

        ``images`` are matched through ``image_ids`` and descriptor rows by
        their own ids; a missing row for any requested id is an error.
        """
        ids = tuple(ids)
        if images is not None:
            order = {sid: i for i, sid in enumerate(image_ids)}
            try:
                images = images[[order[sid] for sid in ids]]
            except KeyError as exc:
                raise AlignmentError(f"sample {exc.args[0]!r} has no image") from None
        if descriptors is not None:
            descriptors = descriptors.rows(ids)
        return cls(ids, labels, images, descriptors, molecules, sources, raster)

    def subset(self, ids):
        index = {sid: i for i, sid in enumerate(self.ids)}
        try:
            idx = [index[sid] for sid in ids]
        except KeyError as exc:
            raise AlignmentError(f"unknown sample id {exc.args[0]!r}") from None
        return Samples(
            tuple(ids),
            None if self.labels is None else self.labels[idx],
            None if self.images is None else self.images[idx],
            None if self.descriptors is None else self.descriptors.rows(ids),
            None if self.molecules is None else [self.molecules[i] for i in idx],
            None if self.sources is None else tuple(self.sources[i] for i in idx),
            self.raster,
        )


def images_from_molecules(molecules, spec):
    out = np.zeros((len(molecules),) + spec.shape, dtype=np.float32)
    for i, mol in enumerate(molecules):
        out[i] = rasterize(mol, spec).pixels
    return out
