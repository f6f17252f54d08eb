"""Regenerate the bundled patch corpus from scikit-image sample photographs.

Every source image is public domain or CC0 (see the scikit-image data
docstrings).  Images are downscaled 2x by area averaging, then 32x32 patches
are cut at seeded random positions: training patches from the left 65% of
each image, test patches from the right 35%, so the two sets never overlap.

    python scripts/build_corpus.py
"""
from pathlib import Path

import cv2
import numpy as np
import skimage.data

SOURCES = ["astronaut", "coffee", "chelsea", "rocket", "retina", "horse_rgb", "camera_rgb", "coins_rgb"]
PATCH = 32
N_TRAIN = 200
N_TEST = 120
OUT = Path(__file__).resolve().parents[1] / "src" / "tweedie_inverse" / "corpus"


def load(name):
    if name.endswith("_rgb"):
        img = getattr(skimage.data, name[:-4])()
        img = (img * 255).astype(np.uint8) if img.dtype == bool else img
        img = np.repeat(img[:, :, None], 3, axis=2)
    else:
        img = getattr(skimage.data, name)()
    img = img[:, :, :3]
    h, w = img.shape[:2]
    return cv2.resize(img, (w // 2, h // 2), interpolation=cv2.INTER_AREA)


def cut(img, n, lo, hi, rng):
    h, w = img.shape[:2]
    x0, x1 = int(lo * w), int(hi * w) - PATCH
    out = []
    while len(out) < n:
        top = int(rng.integers(0, h - PATCH + 1))
        left = int(rng.integers(x0, x1 + 1))
        patch = img[top:top + PATCH, left:left + PATCH]
        if patch.std() < 4:  # skip flat background
            continue
        out.append(patch)
    return out


def main():
    rng = np.random.default_rng(20240611)
    images = [load(n) for n in SOURCES]
    for split, total, lo, hi in [("train", N_TRAIN, 0.0, 0.65), ("test", N_TEST, 0.65, 1.0)]:
        d = OUT / split
        d.mkdir(parents=True, exist_ok=True)
        for f in d.glob("*.png"):
            f.unlink()
        per = [total // len(images) + (i < total % len(images)) for i in range(len(images))]
        k = 0
        for name, img, n in zip(SOURCES, images, per):
            for patch in cut(img, n, lo, hi, rng):
                cv2.imwrite(str(d / f"{k:03d}_{name}.png"), cv2.cvtColor(patch, cv2.COLOR_RGB2BGR))
                k += 1


if __name__ == "__main__":
    main()
