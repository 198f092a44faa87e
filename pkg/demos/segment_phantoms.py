"""Train the lung segmenter on phantoms and write masks for held-out ones.

    python3 demos/segment_phantoms.py [out_dir]

Takes a few minutes on one core. Writes the image, predicted mask and
difference map for each held-out phantom as PGM files.
"""

import sys
from pathlib import Path

import numpy as np

from screenpipe import dataset, imgproc, segnet

if __name__ == "__main__":
    out = Path(sys.argv[1] if len(sys.argv) > 1 else "demo_seg")
    out.mkdir(parents=True, exist_ok=True)
    phantoms = dataset.make_phantom_set(200, seed=1, size=64)
    net, hist = segnet.train_segmenter(phantoms[:160], segnet.UnetConfig(), phantoms[160:], log=print)
    scores = []
    for s in phantoms[160:]:
        mask = segnet.segment(net, s.image)
        scores.append(segnet.dice_coefficient(s.mask, mask))
        imgproc.write_pnm(out / f"{s.id}_image.pgm", s.image)
        imgproc.write_pnm(out / f"{s.id}_mask.pgm", mask)
        imgproc.write_pnm(out / f"{s.id}_diff.ppm", segnet.difference_map(s.mask, mask))
    print(f"held-out mean DSC {np.mean(scores):.4f} over {len(scores)} phantoms; files in {out}/")
