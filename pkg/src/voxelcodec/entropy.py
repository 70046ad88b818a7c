"""Probability models over the 255-symbol occupancy alphabet.

Symbol values run 1..255 (a split node always has at least one occupied
child), mapped to array indices 0..254. Four model kinds share one coding
interface: per depth level the coder hands the model a LevelContext and gets
either a batch of distributions (uniform / neural) or per-node sequential
predictions (the adaptive baseline, whose counts evolve as symbols are coded).
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import nn
from .nn import Conv3D, FullyConnected, ReLU
from .octree import Octree, cell_keys
from .voxelgrid import CHILD_CROP_SIZE, VoxelGrid, child_region_crops, local_crops

ALPHABET = 255
LOG2_ALPHABET = float(np.log2(ALPHABET))

KIND_UNIFORM = 0
KIND_ADAPTIVE = 1
KIND_VOXEL_STATIC = 2
KIND_VOXEL_DYNAMIC = 3
KIND_REFINE = 4

KIND_NAMES = {KIND_UNIFORM: "uniform", KIND_ADAPTIVE: "adaptive",
              KIND_VOXEL_STATIC: "voxel-static", KIND_VOXEL_DYNAMIC: "voxel-dynamic"}
KIND_CODES = {v: k for k, v in KIND_NAMES.items()}

_NEIGHBOR_OFFSETS = np.array([[1, 0, 0], [-1, 0, 0], [0, 1, 0],
                              [0, -1, 0], [0, 0, 1], [0, 0, -1]], dtype=np.int64)


@dataclass
class LevelContext:
    """Everything a model may condition on while coding one depth level.

    All fields derive from already-decoded data: the depth-k cell list, the
    depth-(k-1) cells/symbols, and (for sequences) neighbour-frame grids.
    """

    depth: int
    max_depth: int
    cells: np.ndarray                    # (n, 3) occupied cells at this depth
    grid: VoxelGrid                      # same-depth grid of the current frame
    prev_cells: np.ndarray | None = None
    prev_symbols: np.ndarray | None = None
    grid_prev: VoxelGrid | None = None        # same depth, frame t-1
    grid_next: VoxelGrid | None = None        # same depth, frame t+1
    grid_prev_child: VoxelGrid | None = None  # depth k+1, frame t-1
    _cache: dict = field(default_factory=dict)

    def __len__(self):
        return len(self.cells)

    def node_features(self) -> np.ndarray:
        """(n, 4): normalized cube center plus fractional depth."""
        if "feat" not in self._cache:
            centers = (self.cells.astype(np.float64) + 0.5) / (1 << self.depth)
            depth_frac = np.full((len(self.cells), 1), self.depth / self.max_depth)
            self._cache["feat"] = np.concatenate([centers, depth_frac], axis=1)
        return self._cache["feat"]

    def child_indices(self) -> np.ndarray:
        if "child" not in self._cache:
            if self.depth == 0:
                self._cache["child"] = np.zeros(len(self.cells), dtype=np.int64)
            else:
                c = self.cells
                self._cache["child"] = 4 * (c[:, 0] & 1) + 2 * (c[:, 1] & 1) + (c[:, 2] & 1)
        return self._cache["child"]

    def parent_symbols(self) -> np.ndarray:
        if "psym" not in self._cache:
            if self.depth == 0 or self.prev_cells is None:
                self._cache["psym"] = np.zeros(len(self.cells), dtype=np.int64)
            else:
                pkeys = cell_keys(self.cells >> 1, self.depth - 1)
                pos = np.searchsorted(cell_keys(self.prev_cells, self.depth - 1), pkeys)
                self._cache["psym"] = self.prev_symbols[pos].astype(np.int64)
        return self._cache["psym"]

    def neighbor_bits(self) -> np.ndarray:
        """6-bit mask of face-neighbour occupancy in the same-depth grid."""
        if "neigh" not in self._cache:
            bits = np.zeros(len(self.cells), dtype=np.int64)
            for b, off in enumerate(_NEIGHBOR_OFFSETS):
                bits |= self.grid.contains(self.cells + off).astype(np.int64) << b
            self._cache["neigh"] = bits
        return self._cache["neigh"]

    def crops(self, m: int) -> np.ndarray:
        key = ("crop", m)
        if key not in self._cache:
            self._cache[key] = local_crops(self.grid, self.cells, m)
        return self._cache[key]

    def temporal_crops(self, m: int, m_child: int):
        """(prev, next, prev_child) crop batches; zeros where the frame is absent."""
        key = ("tcrop", m, m_child)
        if key not in self._cache:
            n = len(self.cells)
            prev = (local_crops(self.grid_prev, self.cells, m) if self.grid_prev is not None
                    else np.zeros((n, m, m, m), dtype=np.uint8))
            nxt = (local_crops(self.grid_next, self.cells, m) if self.grid_next is not None
                   else np.zeros((n, m, m, m), dtype=np.uint8))
            child = (child_region_crops(self.grid_prev_child, self.cells, m_child)
                     if self.grid_prev_child is not None
                     else np.zeros((n, m_child, m_child, m_child), dtype=np.uint8))
            self._cache[key] = (prev, nxt, child)
        return self._cache[key]


def make_level_context(k, max_depth, cells, prev_cells=None, prev_symbols=None,
                       grid=None, **temporal) -> LevelContext:
    if grid is None:
        grid = VoxelGrid(k, cells)
    return LevelContext(k, max_depth, np.asarray(cells, dtype=np.int64), grid,
                        prev_cells, prev_symbols, **temporal)


# ---------------------------------------------------------------------------
# model kinds


class EntropyModel:
    """Coding interface shared by all model kinds."""

    kind_code: int

    @property
    def kind(self) -> str:
        return KIND_NAMES[self.kind_code]

    def begin_stream(self):
        """Reset per-stream state. Called once per coded cloud/sequence on both sides."""

    def level_probabilities(self, ctx: LevelContext):
        """(n, 255) batch, (255,) shared row, or None to force the sequential path."""
        return None

    def node_probability(self, ctx: LevelContext, i: int) -> np.ndarray:
        raise NotImplementedError

    def observe(self, ctx: LevelContext, i: int, symbol: int):
        """Called after each coded symbol (1..255); only the adaptive model reacts."""

    def serialize(self) -> bytes:
        raise NotImplementedError

    def content_hash(self) -> int:
        return nn.model_content_hash(self.serialize())


class UniformModel(EntropyModel):
    """Every symbol equally likely; the coder sanity baseline."""

    kind_code = KIND_UNIFORM

    def level_probabilities(self, ctx):
        return np.full(ALPHABET, 1.0 / ALPHABET)

    def node_probability(self, ctx, i):
        return np.full(ALPHABET, 1.0 / ALPHABET)

    def serialize(self):
        return nn.serialize_model(self.kind_code, 0, {"kind": self.kind}, [])


_M64 = np.uint64(0xFFFFFFFFFFFFFFFF)


def _splitmix64(x: np.ndarray) -> np.ndarray:
    x = (x + np.uint64(0x9E3779B97F4A7C15)) & _M64
    x = ((x ^ (x >> np.uint64(30))) * np.uint64(0xBF58476D1CE4E5B9)) & _M64
    x = ((x ^ (x >> np.uint64(27))) * np.uint64(0x94D049BB133111EB)) & _M64
    return x ^ (x >> np.uint64(31))


class AdaptiveContextModel(EntropyModel):
    """Non-neural baseline: per-context Laplace-smoothed symbol counts.

    The context id is a B-bit splitmix64 hash of (parent symbol, child octant,
    6-neighbour occupancy). Counts start empty at begin_stream and advance by
    one after every coded symbol, identically on encoder and decoder.
    """

    kind_code = KIND_ADAPTIVE

    def __init__(self, context_bits: int = 16):
        if not 1 <= context_bits <= 16:
            raise ValueError("context_bits must be in [1, 16]")
        self.context_bits = context_bits
        self._counts: dict[int, np.ndarray] = {}
        self._totals: dict[int, int] = {}

    def begin_stream(self):
        self._counts = {}
        self._totals = {}

    def context_ids(self, ctx: LevelContext) -> np.ndarray:
        key = ("cid", self.context_bits)
        if key not in ctx._cache:
            packed = (ctx.parent_symbols()
                      | (ctx.child_indices() << 8)
                      | (ctx.neighbor_bits() << 11)).astype(np.uint64)
            mask = np.uint64((1 << self.context_bits) - 1)
            ctx._cache[key] = (_splitmix64(packed) & mask).astype(np.int64)
        return ctx._cache[key]

    def probabilities_for_id(self, cid: int) -> np.ndarray:
        counts = self._counts.get(cid)
        if counts is None:
            return np.full(ALPHABET, 1.0 / ALPHABET)
        return (counts + 1.0) / (self._totals[cid] + ALPHABET)

    def observe_id(self, cid: int, symbol: int):
        counts = self._counts.get(cid)
        if counts is None:
            counts = np.zeros(ALPHABET, dtype=np.int64)
            self._counts[cid] = counts
            self._totals[cid] = 0
        counts[symbol - 1] += 1
        self._totals[cid] += 1

    def node_probability(self, ctx, i):
        return self.probabilities_for_id(int(self.context_ids(ctx)[i]))

    def observe(self, ctx, i, symbol):
        self.observe_id(int(self.context_ids(ctx)[i]), symbol)

    def serialize(self):
        return nn.serialize_model(self.kind_code, 0,
                                  {"kind": self.kind, "context_bits": self.context_bits}, [])


def _tower_layers(m: int, channels) -> tuple:
    """Conv3D/ReLU stack sized so the spatial extent never drops below 1."""
    n_convs = min(len(channels), max(0, (m - 1) // 2))
    layers = []
    for c in channels[:n_convs]:
        layers += [Conv3D(c), ReLU()]
    return tuple(layers)


def _tower_out_dim(m: int, channels) -> int:
    n_convs = min(len(channels), max(0, (m - 1) // 2))
    if n_convs == 0:
        return m ** 3
    return channels[n_convs - 1] * (m - 2 * n_convs) ** 3


FEATURE_DIM = 4


class VoxelContextModel(EntropyModel):
    """Neural model conditioning on the same-depth M^3 crop plus node features.

    Conv tower over the crop, feature concat, then a two-layer MLP with a
    zero-initialized 255-way output so the fresh model predicts uniformly.
    """

    kind_code = KIND_VOXEL_STATIC

    def __init__(self, crop_size=9, channels=(16, 32, 64), hidden=256, seed=0,
                 tower=None, head=None):
        self.crop_size = crop_size
        self.channels = tuple(channels)
        self.hidden = hidden
        self.seed = seed
        if tower is None:
            tower = nn.init_params(_tower_layers(crop_size, channels), (1, crop_size, crop_size, crop_size), seed)
            head = nn.init_params(
                (FullyConnected(hidden), ReLU(), FullyConnected(ALPHABET)),
                (_tower_out_dim(crop_size, channels) + FEATURE_DIM,),
                seed + 1, zero_final=True)
        self.tower = tower
        self.head = head

    def _hidden_input(self, crops, feats, caches=None):
        x = crops[:, None, :, :, :].astype(np.float64)
        if self.tower.layers:
            f, cache_t = nn.forward(self.tower, x, want_cache=caches is not None)
        else:
            f, cache_t = x, None
        flat = f.reshape(len(crops), -1)
        if caches is not None:
            caches.append((cache_t, flat.shape))
        return np.concatenate([flat, feats], axis=1)

    def logits(self, crops, feats, caches=None):
        h = self._hidden_input(crops, feats, caches)
        out, cache_h = nn.forward(self.head, h, want_cache=caches is not None)
        if caches is not None:
            caches.append(cache_h)
        return out

    def predict(self, crops, feats) -> np.ndarray:
        z = self.logits(np.asarray(crops), np.asarray(feats, dtype=np.float64))
        return nn._softmax(z)

    def level_probabilities(self, ctx):
        if len(ctx) == 0:
            return np.zeros((0, ALPHABET))
        return self.predict(ctx.crops(self.crop_size), ctx.node_features())

    def node_probability(self, ctx, i):
        return self.level_probabilities(ctx)[i]

    # -- training ----------------------------------------------------------

    def _parameter_groups(self):
        return [("tower", self.tower), ("head", self.head)]

    def _batch_grads(self, crops, feats, symbols):
        caches = []
        z = self.logits(crops, feats, caches)
        targets = np.asarray(symbols, dtype=np.int64) - 1
        loss, probs = nn.softmax_cross_entropy(z, targets)
        g = nn.cross_entropy_grad(probs, targets)
        (cache_t, flat_shape), cache_h = caches
        head_grads, gh = nn.backward(self.head, cache_h, g)
        gflat = gh[:, :flat_shape[1]]
        if self.tower.layers:
            tower_grads, _ = nn.backward(self.tower, cache_t,
                                         gflat.reshape(-1, *nn.layer_shapes(self.tower.layers, (1,) + (self.crop_size,) * 3)[-1]))
        else:
            tower_grads = []
        return loss, [tower_grads, head_grads]

    def evaluate(self, dataset, batch_size=512) -> float:
        """Mean cross-entropy of the current parameters on a dataset, in nats."""
        crops, feats, symbols = dataset["crops"], dataset["features"], dataset["symbols"]
        total = 0.0
        for lo in range(0, len(symbols), batch_size):
            sel = slice(lo, lo + batch_size)
            z = self.logits(crops[sel], np.asarray(feats[sel], dtype=np.float64))
            loss, _ = nn.softmax_cross_entropy(z, np.asarray(symbols[sel], dtype=np.int64) - 1)
            total += loss * (min(len(symbols), lo + batch_size) - lo)
        return total / len(symbols)

    def train(self, dataset, epochs, batch_size=32, lr=1e-4, seed=0):
        """Minimize mean per-symbol cross-entropy; returns per-epoch mean loss (nats)."""
        crops, feats, symbols = dataset["crops"], dataset["features"], dataset["symbols"]
        if len(symbols) == 0:
            raise ValueError("empty training dataset")
        rng = np.random.Generator(np.random.Philox(seed))
        states = [nn.AdamState.for_params(p) for _, p in self._parameter_groups()]
        curve = []
        for _ in range(epochs):
            order = rng.permutation(len(symbols))
            total = 0.0
            for lo in range(0, len(order), batch_size):
                sel = order[lo:lo + batch_size]
                loss, grads = self._batch_grads(crops[sel], feats[sel], symbols[sel])
                total += loss * len(sel)
                for (name, params), grad, state in zip(self._parameter_groups(), grads, states):
                    if grad:
                        nn.adam_step(params, grad, state, lr)
            curve.append(total / len(symbols))
        return curve

    def serialize(self):
        meta = {"kind": self.kind, "crop_size": self.crop_size,
                "channels": list(self.channels), "hidden": self.hidden}
        return nn.serialize_model(self.kind_code, self.seed, meta, self._parameter_groups())

    @classmethod
    def deserialize(cls, blob: bytes):
        kind, seed, meta, groups = nn.deserialize_model(blob)
        if kind != cls.kind_code:
            raise ValueError(f"model kind {kind} is not {KIND_NAMES[cls.kind_code]}")
        named = dict(groups)
        return cls(meta["crop_size"], tuple(meta["channels"]), meta["hidden"], seed,
                   tower=named["tower"], head=named["head"])


class DynamicContextModel(EntropyModel):
    """Four-branch temporal model: separate conv towers for the current,
    previous and next frames' same-depth crops plus the previous frame's
    child-depth crop; features are concatenated before the shared MLP."""

    kind_code = KIND_VOXEL_DYNAMIC

    def __init__(self, crop_size=9, child_crop_size=CHILD_CROP_SIZE, channels=(16, 32, 64),
                 hidden=256, seed=0, towers=None, head=None):
        self.crop_size = crop_size
        self.child_crop_size = child_crop_size
        self.channels = tuple(channels)
        self.hidden = hidden
        self.seed = seed
        if towers is None:
            same = (1, crop_size, crop_size, crop_size)
            child = (1, child_crop_size, child_crop_size, child_crop_size)
            towers = [nn.init_params(_tower_layers(crop_size, channels), same, seed + i)
                      for i in range(3)]
            towers.append(nn.init_params(_tower_layers(child_crop_size, channels), child, seed + 3))
            feat = 3 * _tower_out_dim(crop_size, channels) + _tower_out_dim(child_crop_size, channels) + FEATURE_DIM
            head = nn.init_params((FullyConnected(hidden), ReLU(), FullyConnected(ALPHABET)),
                                  (feat,), seed + 4, zero_final=True)
        self.towers = towers
        self.head = head

    def _branch_crops(self, ctx: LevelContext):
        cur = ctx.crops(self.crop_size)
        prev, nxt, child = ctx.temporal_crops(self.crop_size, self.child_crop_size)
        return cur, prev, nxt, child

    def logits(self, crop_sets, feats, caches=None):
        flats = []
        for tower, crops in zip(self.towers, crop_sets):
            x = np.asarray(crops)[:, None, :, :, :].astype(np.float64)
            if tower.layers:
                f, cache = nn.forward(tower, x, want_cache=caches is not None)
            else:
                f, cache = x, None
            flat = f.reshape(len(crops), -1)
            if caches is not None:
                caches.append((cache, flat.shape))
            flats.append(flat)
        h = np.concatenate(flats + [np.asarray(feats, dtype=np.float64)], axis=1)
        out, cache_h = nn.forward(self.head, h, want_cache=caches is not None)
        if caches is not None:
            caches.append(cache_h)
        return out

    def predict(self, crop_sets, feats):
        return nn._softmax(self.logits(crop_sets, feats))

    def level_probabilities(self, ctx):
        if len(ctx) == 0:
            return np.zeros((0, ALPHABET))
        return self.predict(self._branch_crops(ctx), ctx.node_features())

    def node_probability(self, ctx, i):
        return self.level_probabilities(ctx)[i]

    def _parameter_groups(self):
        return [("tower-current", self.towers[0]), ("tower-previous", self.towers[1]),
                ("tower-next", self.towers[2]), ("tower-child", self.towers[3]),
                ("head", self.head)]

    def _batch_grads(self, crop_sets, feats, symbols):
        caches = []
        z = self.logits(crop_sets, feats, caches)
        targets = np.asarray(symbols, dtype=np.int64) - 1
        loss, probs = nn.softmax_cross_entropy(z, targets)
        g = nn.cross_entropy_grad(probs, targets)
        head_grads, gh = nn.backward(self.head, caches[-1], g)
        all_grads = []
        offset = 0
        for tower, (cache, flat_shape), crops in zip(self.towers, caches[:-1], crop_sets):
            gflat = gh[:, offset:offset + flat_shape[1]]
            offset += flat_shape[1]
            if tower.layers:
                m = crops.shape[-1]
                out_shape = nn.layer_shapes(tower.layers, (1, m, m, m))[-1]
                grads, _ = nn.backward(tower, cache, gflat.reshape(-1, *out_shape))
            else:
                grads = []
            all_grads.append(grads)
        all_grads.append(head_grads)
        return loss, all_grads

    def evaluate(self, dataset, batch_size=512) -> float:
        keys = ("crops", "crops_prev", "crops_next", "crops_child")
        symbols, feats = dataset["symbols"], dataset["features"]
        total = 0.0
        for lo in range(0, len(symbols), batch_size):
            sel = slice(lo, lo + batch_size)
            crop_sets = tuple(dataset[k][sel] for k in keys)
            z = self.logits(crop_sets, np.asarray(feats[sel], dtype=np.float64))
            loss, _ = nn.softmax_cross_entropy(z, np.asarray(symbols[sel], dtype=np.int64) - 1)
            total += loss * (min(len(symbols), lo + batch_size) - lo)
        return total / len(symbols)

    def train(self, dataset, epochs, batch_size=32, lr=1e-4, seed=0):
        keys = ("crops", "crops_prev", "crops_next", "crops_child")
        symbols, feats = dataset["symbols"], dataset["features"]
        if len(symbols) == 0:
            raise ValueError("empty training dataset")
        rng = np.random.Generator(np.random.Philox(seed))
        states = [nn.AdamState.for_params(p) for _, p in self._parameter_groups()]
        curve = []
        for _ in range(epochs):
            order = rng.permutation(len(symbols))
            total = 0.0
            for lo in range(0, len(order), batch_size):
                sel = order[lo:lo + batch_size]
                crop_sets = tuple(dataset[k][sel] for k in keys)
                loss, grads = self._batch_grads(crop_sets, feats[sel], symbols[sel])
                total += loss * len(sel)
                for (name, params), grad, state in zip(self._parameter_groups(), grads, states):
                    if grad:
                        nn.adam_step(params, grad, state, lr)
            curve.append(total / len(symbols))
        return curve

    def serialize(self):
        meta = {"kind": self.kind, "crop_size": self.crop_size,
                "child_crop_size": self.child_crop_size,
                "channels": list(self.channels), "hidden": self.hidden}
        return nn.serialize_model(self.kind_code, self.seed, meta, self._parameter_groups())

    @classmethod
    def deserialize(cls, blob: bytes):
        kind, seed, meta, groups = nn.deserialize_model(blob)
        if kind != cls.kind_code:
            raise ValueError(f"model kind {kind} is not {KIND_NAMES[cls.kind_code]}")
        named = dict(groups)
        towers = [named["tower-current"], named["tower-previous"],
                  named["tower-next"], named["tower-child"]]
        return cls(meta["crop_size"], meta["child_crop_size"], tuple(meta["channels"]),
                   meta["hidden"], seed, towers=towers, head=named["head"])


def load_entropy_model(blob: bytes) -> EntropyModel:
    kind, _, meta, _ = nn.deserialize_model(blob)
    if kind == KIND_UNIFORM:
        return UniformModel()
    if kind == KIND_ADAPTIVE:
        return AdaptiveContextModel(meta["context_bits"])
    if kind == KIND_VOXEL_STATIC:
        return VoxelContextModel.deserialize(blob)
    if kind == KIND_VOXEL_DYNAMIC:
        return DynamicContextModel.deserialize(blob)
    raise ValueError(f"unknown entropy model kind {kind}")


# ---------------------------------------------------------------------------
# datasets and rate accounting


def build_node_dataset(trees, crop_size=9):
    """Flatten octrees into (crop, feature, symbol) training samples, all depths."""
    if isinstance(trees, Octree):
        trees = [trees]
    crops, feats, symbols = [], [], []
    for tree in trees:
        for k in range(tree.max_depth):
            ctx = make_level_context(k, tree.max_depth, tree.levels[k])
            crops.append(ctx.crops(crop_size))
            feats.append(ctx.node_features())
            symbols.append(tree.symbols[k].astype(np.int64))
    return {"crops": np.concatenate(crops), "features": np.concatenate(feats),
            "symbols": np.concatenate(symbols)}


def model_code_lengths(model: EntropyModel, tree: Octree, trunc_depth=None) -> np.ndarray:
    """-log2 q for every coded symbol of one tree, in stream order.

    Resets per-stream model state first, exactly like coding a fresh bitstream.
    """
    d = trunc_depth if trunc_depth is not None else tree.max_depth
    model.begin_stream()
    out = []
    for k in range(d):
        ctx = make_level_context(k, tree.max_depth, tree.levels[k],
                                 prev_cells=tree.levels[k - 1] if k else None,
                                 prev_symbols=tree.symbols[k - 1] if k else None)
        syms = tree.symbols[k]
        probs = model.level_probabilities(ctx)
        if probs is None:
            p = np.empty(len(syms))
            for i, s in enumerate(syms):
                p[i] = model.node_probability(ctx, i)[int(s) - 1]
                model.observe(ctx, i, int(s))
        elif probs.ndim == 1:
            p = probs[syms.astype(np.int64) - 1]
        else:
            p = probs[np.arange(len(syms)), syms.astype(np.int64) - 1]
        out.append(-np.log2(p))
    return np.concatenate(out) if out else np.empty(0)


def cross_entropy_bpp(model: EntropyModel, trees, input_point_count: int, trunc_depth=None):
    """Model cross-entropy as (bits per input point, bits per symbol)."""
    if isinstance(trees, Octree):
        trees = [trees]
    bits = 0.0
    n_sym = 0
    for tree in trees:
        lengths = model_code_lengths(model, tree, trunc_depth)
        bits += float(lengths.sum())
        n_sym += len(lengths)
    bps = bits / n_sym if n_sym else 0.0
    return bits / input_point_count, bps
