"""Latent region space: five canonical crop locations times horizontal flip."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ConfigError, UsageError

LOCATION_NAMES = ("top-left", "top-right", "center", "down-left", "down-right")


@dataclass(frozen=True)
class Region:
    top: int
    left: int
    height: int
    width: int
    flip: bool = False

    def as_tuple(self):
        return (self.top, self.left, self.height, self.width, int(self.flip))

    @classmethod
    def from_tuple(cls, t):
        top, left, height, width, flip = t
        return cls(int(top), int(left), int(height), int(width), bool(flip))

    def fits(self, H, W):
        return (0 <= self.top <= H - self.height and 0 <= self.left <= W - self.width
                and self.height >= 1 and self.width >= 1)


@dataclass(frozen=True)
class RegionSet:
    regions: tuple
    image_hw: tuple

    def __len__(self):
        return len(self.regions)

    def __iter__(self):
        return iter(self.regions)

    def __getitem__(self, i):
        return self.regions[i]

    @property
    def patch_hw(self):
        return (self.regions[0].height, self.regions[0].width)

    def as_tuples(self):
        return [r.as_tuple() for r in self.regions]


def canonical_offsets(H, W, h, w):
    dh, dw = H - h, W - w
    return [(0, 0), (0, dw), (dh // 2, dw // 2), (dh, 0), (dh, dw)]


def canonical_grid(H, W, h, w, flips=True):
    """The five named locations, all unflipped first, then all flipped.

    Coinciding locations (e.g. patch equal to the image) are deduplicated,
    keeping the first occurrence.
    """
    if not (1 <= h <= H and 1 <= w <= W):
        raise ConfigError(f"patch {h}x{w} does not fit image {H}x{W}")
    out = []
    for flip in ((False, True) if flips else (False,)):
        for top, left in canonical_offsets(H, W, h, w):
            r = Region(top, left, h, w, flip)
            if r not in out:
                out.append(r)
    return RegionSet(tuple(out), (H, W))


def hflip(image):
    image = np.asarray(image)
    if image.ndim != 3:
        raise UsageError(f"hflip expects an (H, W, C) image, got shape {image.shape}")
    return image[:, ::-1, :].copy()


def crop(image, r):
    image = np.asarray(image)
    if image.ndim != 3:
        raise UsageError(f"crop expects an (H, W, C) image, got shape {image.shape}")
    if not r.fits(*image.shape[:2]):
        raise UsageError(f"region {r.as_tuple()} out of bounds for image {image.shape[:2]}")
    patch = image[r.top:r.top + r.height, r.left:r.left + r.width, :]
    return patch[:, ::-1, :].copy() if r.flip else patch.copy()


def crop_all(image, regions):
    """Stack every region's crop into a (|Z|, h, w, C) batch."""
    return np.stack([crop(image, r) for r in regions])


def crop_batch(images, r):
    """The same region cropped from every image of an (N, H, W, C) batch."""
    patch = images[:, r.top:r.top + r.height, r.left:r.left + r.width, :]
    return patch[:, :, ::-1, :] if r.flip else patch
