"""Encode and decode a single point cloud, losslessly at the symbol level.

Builds a synthetic indoor-style cloud, runs it through the codec with the two
non-neural probability models, and checks the two core guarantees: the decoded
octree matches the encoder's exactly, and every input point lies within half a
leaf-cell diagonal of some reconstructed point.
"""

import numpy as np

import voxelcodec as vc

rng = np.random.default_rng(7)

# a floor, a wall, and a scattering of clutter, in meters
floor = np.c_[rng.uniform(0, 6, 4000), rng.uniform(0, 4, 4000), np.zeros(4000)]
wall = np.c_[np.zeros(2500), rng.uniform(0, 4, 2500), rng.uniform(0, 2.6, 2500)]
clutter = rng.uniform([0, 0, 0], [6, 4, 1.2], (1500, 3))
cloud = vc.PointCloud(np.vstack([floor, wall, clutter]))
print(f"input: {len(cloud)} points")

depth, trunc = 9, 7
for model in (vc.UniformModel(), vc.AdaptiveContextModel(context_bits=12)):
    data = vc.encode_cloud(cloud, depth, trunc, model)
    decoded, tree, header = vc.decode_cloud(data, model, return_tree=True)
    bpp = vc.coded_bpp(data)
    print(f"{model.kind:>10}: {len(data):6d} bytes total, {bpp:.3f} bpp, "
          f"{tree.symbol_count()} symbols, {len(decoded)} points out")

    # symbol-lossless: decoding reproduces the truncated octree bit for bit
    norm, params = vc.normalize(cloud)
    reference = vc.build(norm, depth).truncate(trunc)
    assert all(np.array_equal(a, b) for a, b in zip(reference.levels, tree.levels))
    assert all(np.array_equal(a, b) for a, b in zip(reference.symbols, tree.symbols))

    # geometric guarantee: half the cell diagonal at the truncation depth
    from scipy.spatial import cKDTree
    bound = (np.sqrt(3) / 2) * 2.0 ** -trunc * params.edge
    worst = cKDTree(decoded.points).query(cloud.points)[0].max()
    print(f"{'':>10}  worst point error {worst:.4f} m (bound {bound:.4f} m)")

print("\nadaptive model beats the uniform baseline because occupancy symbols")
print("are highly repetitive once conditioned on the local neighbourhood.")
