"""Regenerates data/desk from the scikit-image sample images.

Each source is converted to grayscale, downscaled by 2 with area averaging,
and cut into 128x128 crops written as 8-bit binary PGM.
"""
from pathlib import Path

import numpy as np
import skimage.data as data
from skimage.color import rgb2gray, rgba2rgb
from skimage.transform import downscale_local_mean

TRAIN = {"cat": 3, "clock": 2, "moon": 2, "hubble_deep_field": 2,
         "immunohistochemistry": 3, "retina": 2, "grass": 2, "gravel": 2, "cell": 2}
TEST = {name: 1 for name in ["camera", "coffee", "rocket", "coins", "brick", "astronaut"]}
SIZE = 128


def gray(name):
    im = getattr(data, name)()
    if im.ndim == 3:
        if im.shape[2] == 4:
            im = rgba2rgb(im)
        im = rgb2gray(im)
    elif im.dtype == np.uint8:
        im = im / 255.0
    return downscale_local_mean(im.astype(np.float64), (2, 2))


def crops(im, count):
    h, w = im.shape
    ys = np.linspace(0, h - SIZE, count + 2)[1:-1] if count > 1 else [(h - SIZE) / 2]
    xs = np.linspace(0, w - SIZE, count + 2)[1:-1] if count > 1 else [(w - SIZE) / 2]
    return [im[int(y):int(y) + SIZE, int(x):int(x) + SIZE] for y, x in zip(ys, xs)]


def save(path, im):
    q = np.clip(np.rint(im * 255.0), 0, 255).astype(np.uint8)
    with open(path, "wb") as f:
        f.write(b"P5\n%d %d\n255\n" % (q.shape[1], q.shape[0]))
        f.write(q.tobytes())


def main():
    root = Path(__file__).resolve().parent.parent / "data" / "desk"
    for split, names in (("train", TRAIN), ("test", TEST)):
        out = root / split
        out.mkdir(parents=True, exist_ok=True)
        for name, count in names.items():
            for k, c in enumerate(crops(gray(name), count)):
                save(out / f"{name}_{k}.pgm", c)


if __name__ == "__main__":
    main()
