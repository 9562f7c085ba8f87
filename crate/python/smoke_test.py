#!/usr/bin/env python3
"""Smoke test for the dettransnet_py extension module.

Build the extension first:

    cargo build -p dettransnet-py            # or --release

then run this script from anywhere inside the repository:

    python3 python/smoke_test.py
"""

import json
import math
import os
import shutil
import sys
import tempfile

REPO = os.path.dirname(os.path.dirname(os.path.abspath(__file__)))


def import_extension():
    """Copy the built cdylib next to a temp dir under its import name."""
    candidates = [
        os.path.join(REPO, "target", profile, name)
        for profile in ("release", "debug")
        for name in ("libdettransnet_py.so", "dettransnet_py.so", "libdettransnet_py.dylib")
    ]
    built = [p for p in candidates if os.path.exists(p)]
    if not built:
        sys.exit("extension not built; run: cargo build -p dettransnet-py")
    staging = tempfile.mkdtemp(prefix="dettransnet_py_")
    shutil.copy(built[0], os.path.join(staging, "dettransnet_py.so"))
    sys.path.insert(0, staging)
    import dettransnet_py

    return dettransnet_py


def approx(a, b, tol=1e-9):
    return abs(a - b) <= tol


def main():
    dtn = import_extension()

    # geometry
    assert approx(dtn.iou((0, 0, 2, 2), (1, 1, 3, 3)), 1.0 / 7.0)
    assert dtn.iou((0, 0, 1, 1), (5, 5, 6, 6)) == 0.0
    assert dtn.iou((3, 4, 10, 12), (3, 4, 10, 12)) == 1.0

    kept = dtn.nms([(0, 0, 10, 10), (1, 1, 11, 11)], [0.9, 0.8], 0.5)
    assert kept == [0], kept
    kept = dtn.nms([(0, 0, 10, 10), (50, 50, 60, 60)], [0.2, 0.9], 0.5)
    assert kept == [1, 0], kept

    anchor = (8.0, 8.0, 12.0, 12.0)
    gt = (10.0, 8.0, 14.0, 12.0)
    t = dtn.encode_box(anchor, gt)
    assert approx(t[0], 0.5) and approx(t[1], 0.0)
    back = dtn.decode_box(anchor, t, 100.0, 100.0)
    assert back is not None and all(approx(x, y, 1e-6) for x, y in zip(back, gt))

    # patching: the desk profile grid
    stride, per_side, n = dtn.patch_grid(96, 16, 8)
    assert (stride, per_side, n) == (8, 11, 121)
    try:
        dtn.patch_grid(32, 8, 3)  # stride 5 does not tile 32
        sys.exit("expected ValueError for an untileable configuration")
    except ValueError:
        pass

    image = [float(i % 7) for i in range(16 * 16 * 3)]
    n, patch_len, data = dtn.extract_patches(image, 16, 3, 8, 4)
    assert (n, patch_len) == (9, 192)
    assert len(data) == n * patch_len

    # evaluation: the hand-walked 101-point case (253/303)
    ap = dtn.average_precision([True, False, True], 2)
    assert approx(ap, 253.0 / 303.0, 1e-12), ap
    assert dtn.average_precision([], 0) is None

    # dataset generation + untrained end-to-end inference
    workdir = tempfile.mkdtemp(prefix="dtn_smoke_")
    dtn.generate_synthetic(workdir, count=3, image_size=96, seed=7)
    ann_path = os.path.join(workdir, "annotations.json")
    with open(ann_path) as f:
        ann = json.load(f)
    assert len(ann["images"]) == 3
    assert {c["name"] for c in ann["categories"]} == {"rectangle", "ellipse", "triangle"}

    model = dtn.Model.desk(seed=3)
    assert model.shape_summary == (11, 122, 64)
    assert model.num_classes == 3
    image_path = os.path.join(workdir, "images", ann["images"][0]["file_name"])
    dets = model.detect(image_path, score_threshold=0.2)
    for d in dets:
        x0, y0, x1, y1 = d["bbox"]
        assert 0 <= x0 < x1 <= 96 and 0 <= y0 < y1 <= 96
        assert 0 <= d["class_id"] < 3
        assert 0.0 <= d["score"] <= 1.0

    # an untrained model scores ~0 AP but the whole pipeline must hold up
    result = model.evaluate(ann_path, os.path.join(workdir, "images"))
    assert result["num_images"] == 3
    assert result["ap"] is None or 0.0 <= result["ap"] <= 1.0
    assert not math.isnan(result["ap50"] or 0.0)

    print("smoke test: OK")


if __name__ == "__main__":
    main()
