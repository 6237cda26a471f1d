#!/usr/bin/env python3
# Copyright 2026 The wmcir Authors.
#
# Licensed under the Apache License, Version 2.0 (the "License");
# you may not use this file except in compliance with the License.
# You may obtain a copy of the License at
#
#      https://www.apache.org/licenses/LICENSE-2.0
#
# Unless required by applicable law or agreed to in writing, software
# distributed under the License is distributed on an "AS IS" BASIS,
# WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
# See the License for the specific language governing permissions and
# limitations under the License.
"""Builds the committed golden fixture and its expected outputs.

The expected reports come from a brute-force reference written here in plain
Python (explicit loops, full sorts), independent of the C++ engine. Run once;
the outputs under golden/ are committed and the test suites compare the CLI
against them.

    python3 tests/fixtures/make_golden.py
"""

import itertools
import json
import math
import os
import shutil
import struct

import numpy as np

HERE = os.path.dirname(os.path.abspath(__file__))
OUT = os.path.join(HERE, "golden")

N, D, R, NQ = 200, 16, 3, 20
SUBSET_SIZE = 6
SEED = 20241014
CATEGORIES = ["Dress", "Shirt", "Toptee"]


def unit(x):
    return (x / np.linalg.norm(x)).astype(np.float32)


def write_f32(path, rows):
    with open(path, "wb") as f:
        for row in rows:
            f.write(struct.pack("<%df" % len(row), *[float(v) for v in row]))


def read_f32(path, dim):
    with open(path, "rb") as f:
        raw = f.read()
    n = len(raw) // (4 * dim)
    flat = struct.unpack("<%df" % (n * dim), raw)
    return [list(flat[i * dim:(i + 1) * dim]) for i in range(n)]


def build_fixture():
    rng = np.random.default_rng(SEED)
    perm = rng.permutation(N)
    ids = ["img%03d" % p for p in perm]  # ingestion order != ID order
    images = [unit(rng.standard_normal(D)) for _ in range(N)]
    captions = [[unit(images[n] + 0.6 * rng.standard_normal(D)) for _ in range(R)] for n in range(N)]
    # Items 10 and 11 are exact duplicates: ties resolved by item ID.
    images[11] = images[10].copy()
    captions[11] = [c.copy() for c in captions[10]]

    gdir = os.path.join(OUT, "gallery")
    os.makedirs(gdir, exist_ok=True)
    with open(os.path.join(gdir, "ids.txt"), "w") as f:
        f.write("".join(i + "\n" for i in ids))
    write_f32(os.path.join(gdir, "image_vectors.f32le"), images)
    write_f32(os.path.join(gdir, "caption_vectors.f32le"), [c for cs in captions for c in cs])
    manifest = {
        "format_version": 1,
        "dataset": "golden",
        "split": "val",
        "embedder_id": "synthetic-gaussian-d16",
        "dim": D,
        "num_items": N,
        "captions_per_item": R,
        "files": {"ids": "ids.txt", "image_vectors": "image_vectors.f32le",
                  "caption_vectors": "caption_vectors.f32le"},
        "caption_texts": [["item %s caption %d" % (ids[n], r + 1) for r in range(R)] for n in range(N)],
    }
    with open(os.path.join(gdir, "manifest.json"), "w") as f:
        f.write(json.dumps(manifest, indent=2) + "\n")

    records_cirr, records_fiq, mods = [], [], []
    for q in range(NQ):
        ref = int(rng.integers(N))
        tgt = 10 if q == 0 else int(rng.integers(N))
        while tgt == ref:
            tgt = int(rng.integers(N))
        noise = 0.9 if q % 4 == 3 else 0.5
        mods.append(unit(images[tgt] - 0.4 * images[ref] + noise * rng.standard_normal(D)))
        others = [i for i in rng.permutation(N) if i not in (ref, tgt)]
        members = [tgt] + ([ref] if q % 2 == 0 else []) + others
        members = members[:SUBSET_SIZE]
        order = rng.permutation(SUBSET_SIZE)
        subset = [ids[members[i]] for i in order]
        base = {"query_id": "q%02d" % q, "reference_id": ids[ref], "target_id": ids[tgt],
                "modifier_text": "synthetic modifier %d" % q}
        records_cirr.append(dict(base, subset_ids=subset))
        records_fiq.append(dict(base, category=CATEGORIES[q % 3]))

    for name, recs in (("queries_cirr", records_cirr), ("queries_fiq", records_fiq)):
        qdir = os.path.join(OUT, name)
        os.makedirs(qdir, exist_ok=True)
        with open(os.path.join(qdir, "queries.jsonl"), "w") as f:
            for r in recs:
                f.write(json.dumps(r) + "\n")
        write_f32(os.path.join(qdir, "modifier_vectors.f32le"), mods)


# ---------------------------------------------------------------------------
# Brute-force reference, reading only the committed files.

def load_gallery():
    gdir = os.path.join(OUT, "gallery")
    with open(os.path.join(gdir, "manifest.json")) as f:
        m = json.load(f)
    with open(os.path.join(gdir, "ids.txt")) as f:
        ids = f.read().split("\n")[:-1]
    images = read_f32(os.path.join(gdir, "image_vectors.f32le"), m["dim"])
    caps = read_f32(os.path.join(gdir, "caption_vectors.f32le"), m["dim"])
    r = m["captions_per_item"]
    captions = [caps[n * r:(n + 1) * r] for n in range(len(ids))]
    return m, ids, images, captions


def load_queries(name, dim):
    qdir = os.path.join(OUT, name)
    with open(os.path.join(qdir, "queries.jsonl")) as f:
        recs = [json.loads(line) for line in f if line.strip()]
    mods = read_f32(os.path.join(qdir, "modifier_vectors.f32le"), dim)
    return recs, mods


def cosine(a, b):
    dot = 0.0
    na = 0.0
    nb = 0.0
    for x, y in zip(a, b):
        dot += x * y
        na += x * x
        nb += y * y
    c = dot / (math.sqrt(na) * math.sqrt(nb))
    return max(-1.0, min(1.0, c))


def full_scores(gallery, ref_vec, mod_vec, alpha, beta, subset):
    _, ids, images, captions = gallery
    q = [(1.0 - alpha) * v + alpha * t for v, t in zip(ref_vec, mod_vec)]
    scores = []
    for n in range(len(ids)):
        s_img = cosine(q, images[n])
        s_cap = sum(cosine(q, captions[n][r - 1]) for r in subset) / len(subset)
        scores.append((1.0 - beta) * s_img + beta * s_cap)
    return scores


def ranking(ids, scores, excluded):
    order = sorted(range(len(ids)), key=lambda n: (-scores[n], ids[n]))
    return [n for n in order if ids[n] not in excluded]


def evaluate(gallery, recs, mods, alpha, beta, subset, protocol, exclude_ref, ks, subset_ks, depth):
    _, ids, images, _ = gallery
    index = {i: n for n, i in enumerate(ids)}
    outcomes = []
    for rec, mod in zip(recs, mods):
        ref = index[rec["reference_id"]]
        scores = full_scores(gallery, images[ref], mod, alpha, beta, subset)
        excluded = {rec["reference_id"]} if exclude_ref else set()
        top = ranking(ids, scores, excluded)[:depth]
        top_ids = [ids[n] for n in top]
        trank = top_ids.index(rec["target_id"]) + 1 if rec["target_id"] in top_ids else None
        srank = None
        if "subset_ids" in rec:
            cands = [s for s in rec["subset_ids"] if s != rec["reference_id"]]
            cands.sort(key=lambda s: (-scores[index[s]], s))
            srank = cands.index(rec["target_id"]) + 1
        outcomes.append({"query_id": rec["query_id"], "target_rank": trank, "subset_rank": srank,
                         "category": rec.get("category"), "ids": top_ids})

    def recall(ranks, k):
        return sum(1 for r in ranks if r is not None and r <= k) / len(ranks)

    metrics = {}
    if protocol == "cirr":
        for k in ks:
            metrics["R@%d" % k] = recall([o["target_rank"] for o in outcomes], k)
        for k in subset_ks:
            metrics["Rsubset@%d" % k] = recall([o["subset_rank"] for o in outcomes], k)
    else:
        cats = sorted({o["category"] for o in outcomes})
        for k in ks:
            total = 0.0
            for c in cats:
                v = recall([o["target_rank"] for o in outcomes if o["category"] == c], k)
                metrics["%s/R@%d" % (c, k)] = v
                total += v
            metrics["Average/R@%d" % k] = total / len(cats)
    report = {
        "dataset": "golden/val",
        "metrics": metrics,
        "num_failed": 0,
        "num_queries": len(outcomes),
        "params": {"alpha": alpha, "beta": beta, "caption_subset": list(subset), "exclude_ids": [],
                   "exclude_reference": exclude_ref, "k": depth},
    }
    return report, outcomes


def dump(obj):
    return json.dumps(obj, indent=2, sort_keys=True) + "\n"


def shortest(v):
    s = repr(float(v))
    return s[:-2] if s.endswith(".0") else s


def write(path, text):
    os.makedirs(os.path.dirname(path), exist_ok=True)
    with open(path, "w") as f:
        f.write(text)


def main():
    if os.path.isdir(OUT):
        shutil.rmtree(OUT)
    build_fixture()
    gallery = load_gallery()
    dim = gallery[0]["dim"]
    cirr, cirr_mods = load_queries("queries_cirr", dim)
    fiq, fiq_mods = load_queries("queries_fiq", dim)
    exp = os.path.join(OUT, "expected")
    all_caps = [1, 2, 3]

    # bench, CIRR-style: reference excluded, full ks 1/5/10/50, subset ks 1/2/3.
    rep, outs = evaluate(gallery, cirr, cirr_mods, 0.8, 0.1, all_caps, "cirr", True,
                         [1, 5, 10, 50], [1, 2, 3], 50)
    write(os.path.join(exp, "bench_cirr", "report.json"), dump(rep))
    write(os.path.join(exp, "bench_cirr", "ranklists.json"), dump(outs))

    # bench, FashionIQ-style: no exclusion, ks 10/50.
    rep, outs = evaluate(gallery, fiq, fiq_mods, 0.8, 0.1, all_caps, "fiq", False, [10, 50], [], 50)
    write(os.path.join(exp, "bench_fiq", "report.json"), dump(rep))
    write(os.path.join(exp, "bench_fiq", "ranklists.json"), dump(outs))

    # grid 3x3 on the CIRR-style queries.
    alphas, betas = [0.5, 0.8, 1.0], [0.0, 0.1, 0.5]
    cells = {}
    for a in alphas:
        for b in betas:
            cells[(a, b)], _ = evaluate(gallery, cirr, cirr_mods, a, b, all_caps, "cirr", True,
                                        [1, 5, 10, 50], [1, 2, 3], 50)
    metrics = sorted(cells[(alphas[0], betas[0])]["metrics"])
    heatmaps = []
    for m in metrics:
        grid = [[cells[(a, b)]["metrics"][m] for a in alphas] for b in betas]
        csv = "beta\\alpha," + ",".join(shortest(a) for a in alphas) + "\n"
        for b, row in zip(betas, grid):
            csv += shortest(b) + "," + ",".join(shortest(v) for v in row) + "\n"
        write(os.path.join(exp, "grid_cirr", "heatmap_%s.csv" % m.replace("/", "_")), csv)
        heatmaps.append({"alphas": alphas, "betas": betas, "cells": grid, "metric": m})
    write(os.path.join(exp, "grid_cirr", "heatmaps.json"), dump(heatmaps))

    # caption ablation, every non-empty subset of {1,2,3} by size then lexicographic.
    rows = []
    for size in range(1, 4):
        for sub in itertools.combinations(all_caps, size):
            rep, _ = evaluate(gallery, cirr, cirr_mods, 0.8, 0.1, list(sub), "cirr", True,
                              [1, 5, 10, 50], [1, 2, 3], 50)
            rows.append({"caption_subset": list(sub), "report": rep})
    write(os.path.join(exp, "ablate_cirr", "ablation.json"), dump(rows))


if __name__ == "__main__":
    main()
