"""Regenerate the bundled 5-image mini set from scikit-image sample photos.

HR crops are deliberately not multiples of 3 so the crop rule gets exercised.
LR images are antialiased bicubic downscales of the cropped HR images.
"""

from pathlib import Path

import skimage.data

from npusr.evaluate import downscale, write_png

OUT = Path(__file__).resolve().parents[1] / "src" / "npusr" / "data" / "mini"
SOURCES = ["astronaut", "chelsea", "coffee", "rocket", "immunohistochemistry"]
H, W = 241, 242


def main():
    for i, name in enumerate(SOURCES):
        img = getattr(skimage.data, name)()[..., :3]
        y0 = (img.shape[0] - H) // 2
        x0 = (img.shape[1] - W) // 2
        hr = img[y0 : y0 + H, x0 : x0 + W]
        stem = f"{801 + i:04d}"
        write_png(OUT / "HR" / f"{stem}.png", hr)
        write_png(OUT / "LR" / f"{stem}x3.png", downscale(hr, 3))


if __name__ == "__main__":
    main()
