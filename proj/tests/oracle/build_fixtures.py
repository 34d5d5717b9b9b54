#!/usr/bin/env python3
"""Writes the evaluation fixtures under tests/fixtures and their golden
reports, computed by the independent brute-force oracle in oracle.py.

Run from anywhere; outputs are committed, so this only needs rerunning when
a fixture changes.
"""

import json
import pathlib
import struct

import numpy as np

import oracle

ROOT = pathlib.Path(__file__).resolve().parent.parent / "fixtures"
NUM_CLASSES = 5


def write_ilm1(path, grid):
    h, w = grid.shape
    payload = b"ILM1" + struct.pack("<II", h, w)
    payload += struct.pack("<%dH" % (h * w), *[int(v) for v in grid.flatten()])
    path.write_bytes(payload)


def random_person(rng, h, w):
    grid = np.zeros((h, w), dtype=int)
    for _ in range(rng.integers(2, 5)):
        part = int(rng.integers(1, NUM_CLASSES))
        y0, x0 = int(rng.integers(0, h - 1)), int(rng.integers(0, w - 1))
        y1, x1 = int(rng.integers(y0 + 1, h + 1)), int(rng.integers(x0 + 1, w + 1))
        grid[y0:y1, x0:x1] = part
    return grid


def corrupt(rng, grid, rate):
    out = grid.copy()
    mask = rng.random(grid.shape) < rate
    out[mask] = rng.integers(0, NUM_CLASSES, size=int(mask.sum()))
    return out


def instance(grid, x1, y1, score=None, labelmap=None):
    h, w = grid.shape
    inst = {}
    if score is not None:
        inst["score"] = score
    inst["box"] = [x1, y1, x1 + w, y1 + h]
    inst["labelmap"] = labelmap if labelmap is not None else grid.tolist()
    return inst


def parsing_fixture():
    rng = np.random.default_rng(20240501)
    d = ROOT / "parsing"
    d.mkdir(parents=True, exist_ok=True)

    a0 = random_person(rng, 8, 6)
    a1 = random_person(rng, 7, 5)
    a1[0, 0] = 255
    b0 = random_person(rng, 9, 7)
    b0[4, 2:4] = 255
    c0 = random_person(rng, 6, 6)
    c1 = random_person(rng, 6, 8)
    c2 = random_person(rng, 5, 4)
    write_ilm1(d / "gt_a0.ilm", a0)

    gt = {"images": [
        {"id": "img_a", "width": 16, "height": 12, "instances": [
            instance(a0, 1.0, 2.0, labelmap="gt_a0.ilm"),
            instance(a1, 9.4, 3.7)]},
        {"id": "img_b", "width": 14, "height": 14, "instances": [
            instance(b0, 3.0, 2.0)]},
        {"id": "img_c", "width": 20, "height": 10, "instances": [
            instance(c0, 0.0, 1.0),
            instance(c1, 4.0, 3.0),
            instance(c2, 14.2, 4.0)]},
    ]}
    pred = {"images": [
        # Prediction order differs from ground truth on purpose.
        {"id": "img_c", "width": 20, "height": 10, "instances": [
            instance(corrupt(rng, c1, 0.12), 4.0, 3.0, 0.8),
            instance(corrupt(rng, c0, 0.05), -1.5, 1.0, 0.8),
            instance(random_person(rng, 5, 5), 13.0, 2.0, 0.35),
            instance(corrupt(rng, c2, 0.5), 14.0, 4.0, 0.6)]},
        {"id": "img_a", "width": 16, "height": 12, "instances": [
            instance(corrupt(rng, a0, 0.05), 1.0, 2.0, 0.9),
            instance(corrupt(rng, a1, 0.1), 10.3, 3.0, 0.7),
            instance(random_person(rng, 4, 4), 13.0, 9.0, 0.95)]},
        {"id": "img_b", "width": 14, "height": 14, "instances": [
            instance(corrupt(rng, b0, 0.1), 4.0, 2.0, 0.5)]},
    ]}
    empty = {"images": [{"id": img["id"], "width": img["width"],
                         "height": img["height"], "instances": []}
                        for img in gt["images"]]}
    (d / "gt.json").write_text(json.dumps(gt, indent=1) + "\n")
    (d / "pred.json").write_text(json.dumps(pred, indent=1) + "\n")
    (d / "pred_empty.json").write_text(json.dumps(empty, indent=1) + "\n")
    mismatched = {"images": pred["images"][:2]}
    (d / "pred_missing_image.json").write_text(json.dumps(mismatched, indent=1) + "\n")

    report = oracle.eval_parsing(oracle.load(d / "pred.json"),
                                 oracle.load(d / "gt.json"), NUM_CLASSES)
    golden = ROOT / "golden"
    golden.mkdir(exist_ok=True)
    (golden / "eval_parsing.json").write_text(json.dumps(report, indent=1) + "\n")


def random_points(rng, n, w, h, parts):
    pts, seen = [], set()
    while len(pts) < n:
        x, y = int(rng.integers(0, w)), int(rng.integers(0, h))
        if (x, y) in seen:
            continue
        seen.add((x, y))
        pts.append({"part": int(rng.integers(1, parts + 1)),
                    "u": float(rng.random()), "v": float(rng.random()),
                    "x": x, "y": y})
    return pts


def jitter(rng, pts, sigma, drop=0.0, part_flip=0.0, parts=2):
    out = []
    for p in pts:
        if rng.random() < drop:
            continue
        q = dict(p)
        q["u"] = float(np.clip(p["u"] + rng.normal(0, sigma), 0, 1))
        q["v"] = float(np.clip(p["v"] + rng.normal(0, sigma), 0, 1))
        if rng.random() < part_flip:
            q["part"] = int(rng.integers(1, parts + 1))
        out.append(q)
    return out


def densepose_fixture():
    rng = np.random.default_rng(7)
    d = ROOT / "densepose"
    d.mkdir(parents=True, exist_ok=True)
    sizes = {"dp_a": (20, 16), "dp_b": (18, 18), "dp_c": (24, 12)}
    gt_images, mixed_images, wrong_images = [], [], []
    for idx, (img_id, (w, h)) in enumerate(sizes.items()):
        gts = []
        for k in range(idx + 1):
            box = [float(k * 4), 0.0, float(k * 4 + 6), float(h)]
            gts.append({"box": box, "points": random_points(rng, 6, w, h, 2)})
        gt_images.append({"id": img_id, "width": w, "height": h, "instances": gts})

        mixed = []
        for k, g in enumerate(gts):
            sigma = [0.02, 0.12, 0.3][k % 3]
            mixed.append({"score": round(0.9 - 0.2 * k, 2), "box": g["box"],
                          "points": jitter(rng, g["points"], sigma, drop=0.15,
                                           part_flip=0.1)})
        mixed.append({"score": 0.5, "box": [0.0, 0.0, 4.0, 4.0],
                      "points": random_points(rng, 4, w, h, 2)})
        mixed_images.append({"id": img_id, "width": w, "height": h,
                             "instances": mixed})

        wrong = []
        for g in gts:
            far = [dict(p, part=3 - p["part"]) for p in g["points"]]
            wrong.append({"score": 0.9, "box": g["box"], "points": far})
        wrong_images.append({"id": img_id, "width": w, "height": h,
                             "instances": wrong})

    for name, images in (("gt", gt_images), ("pred_mixed", mixed_images),
                         ("pred_wrong", wrong_images)):
        (d / (name + ".json")).write_text(
            json.dumps({"images": images}, indent=1) + "\n")

    table = oracle.make_geodesic_table(parts=2, grid=4)
    (d / "geodesic.json").write_text(json.dumps(table) + "\n")

    golden = ROOT / "golden"
    golden.mkdir(exist_ok=True)
    gt = oracle.load(d / "gt.json")
    mixed = oracle.load(d / "pred_mixed.json")
    uv = oracle.eval_densepose(mixed, gt, 0.255, None)
    (golden / "eval_densepose_uv.json").write_text(json.dumps(uv, indent=1) + "\n")
    tab = oracle.eval_densepose(mixed, gt, 0.255, table)
    (golden / "eval_densepose_table.json").write_text(json.dumps(tab, indent=1) + "\n")


def scale_fixture():
    d = ROOT / "scale"
    d.mkdir(parents=True, exist_ok=True)
    doc = {"image": {"width": 40, "height": 30},
           "instances": [{"box": [0, 0, 40, 30]}]}
    (d / "full_image.json").write_text(json.dumps(doc, indent=1) + "\n")


if __name__ == "__main__":
    parsing_fixture()
    densepose_fixture()
    scale_fixture()
