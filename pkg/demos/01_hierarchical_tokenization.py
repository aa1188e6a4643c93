"""Tokenize points into nested-grid tuples and measure vocabulary compression.

A location becomes one absolute coarse cell plus a relative offset per finer
level. Offsets are shared across parents, so the total token count stays far
below the number of distinct fine cells.
"""

import numpy as np

from geoseq import GridSpec, build_vocab, decode_keys, encode_point, project, tokenize

spec = GridSpec(scales=(100_000.0, 1_000.0, 100.0))  # 100 km / 1 km / 100 m

# a point in projected meters decomposes into (coarse cell, offsets...)
keys = encode_point(123_456.0, 7_890.0, spec)
print("keys for (123456 m, 7890 m):", keys)
center_x, center_y, extent = decode_keys(keys, spec)
print(f"decoded cell center: ({center_x}, {center_y}), extent {extent} m")

# lat/lon goes through an equirectangular projection first
x, y = project(39.9042, 116.4074, ref_lat=39.9)  # Beijing
print("projected meters:", (round(x), round(y)), "->", encode_point(x, y, spec))

# vocabulary compression on a realistic clustered corpus: visits concentrate
# around a few dozen centers (homes, workplaces) inside a 300 km region
rng = np.random.default_rng(0)
centers = rng.uniform(20_000, 280_000, size=(40, 2))
points = []
for cx, cy in centers:
    offsets = rng.normal(0.0, 800.0, size=(400, 2))  # ~town-sized spread
    points.extend((cx + dx, cy + dy) for dx, dy in offsets)
vocab = build_vocab(points, spec)

print("\nper-level sizes (specials included):", vocab.sizes())
print("hierarchical total (no specials):   ", vocab.total_size())
print("flat distinct fine cells:           ", vocab.flat_count)
print(f"compression: {vocab.flat_count / vocab.total_size():.1f}x fewer tokens to embed")

loc = tokenize(*points[0], vocab)
print("\nfirst corpus point tokenizes to ids", loc.ids, "from keys", loc.raw_keys)
