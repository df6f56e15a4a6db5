"""Tree encoder, alignment network, classification head, and segmentation decoder.

The encoder follows the tree bottom-up: leaf features come from an MLP on the
point coordinates; each internal node applies the layer's shared linear map to
both children and merges them with a componentwise maximum, so the result is
invariant to child order.  Classification reads the root feature; segmentation
runs a top-down pass that merges each node's own feature (a skip connection)
with its parent's carried feature, ending in per-leaf logits.

Trees are built once per cloud on the preprocessed (unitized, optionally
pre-aligned) coordinates and cached; training-time augmentation only perturbs
the coordinates fed to the network, never the tree.  Gradients do not flow
through tree construction.
"""
from __future__ import annotations

from dataclasses import dataclass, field, replace
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from . import autodiff as ad
from .autodiff import Adam, ParamStore, Tensor
from .data import Record, Splits, pad_to_pow2
from .errors import NonFiniteLoss, NonFiniteValue, ShapeMismatch
from .geometry import PointCloud, unitize
from .kdtree import PCA_MEDIAN, KdTree, build
from .pca import prealign
from .rng import make_rng
from .sampler import sample_affine

#: Stage dimensions reported for full-scale 2048-point (depth-11) trees.
PAPER_SCALE_DIMS = (32, 64, 128, 256, 512, 512, 1024, 1024, 2048, 2048, 4096, 4096)
PAPER_SCALE_CARRY = 512

_DESK_DIMS = {
    4: (8, 16, 32, 64, 64),
    7: (8, 8, 16, 16, 32, 32, 64, 64),
}


def default_dims(depth: int) -> Tuple[int, ...]:
    """Desk-scale non-decreasing stage dimensions for a given tree depth."""
    if depth in _DESK_DIMS:
        return _DESK_DIMS[depth]
    return tuple(int(2 ** (3 + round(3 * k / max(depth, 1)))) for k in range(depth + 1))


@dataclass(frozen=True)
class ModelConfig:
    depth: int = 7
    dims: Tuple[int, ...] = ()
    carry_dim: int = 32
    num_classes: int = 3
    num_seg_classes: int = 2
    use_prealign: bool = False
    use_alignment_net: bool = False
    merge: str = "max"  # or "concat-mlp"
    leaf_hidden: int = 16
    classifier_hidden: Tuple[int, int] = (64, 32)
    align_head_hidden: int = 32
    seg_head_hidden: int = 32
    lr: float = 1e-3
    batch_size: int = 32
    epochs: int = 40
    patience: int = 10
    flip_permute_augment: bool = True
    affine_reprealign_augment: bool = False
    pad_seed: int = 0
    planar_fallback: bool = True

    def __post_init__(self):
        if self.merge not in ("max", "concat-mlp"):
            raise ValueError(f"unknown merge {self.merge!r}")
        dims = self.dims or default_dims(self.depth)
        if len(dims) != self.depth + 1:
            raise ValueError(f"need {self.depth + 1} stage dims, got {len(dims)}")
        if any(b < a for a, b in zip(dims, dims[1:])):
            raise ValueError("stage dims must be non-decreasing bottom-up")
        object.__setattr__(self, "dims", tuple(dims))

    @property
    def align_dims(self) -> Tuple[int, ...]:
        return tuple(max(4, d // 2) for d in self.dims)

    @property
    def n_points(self) -> int:
        return 1 << self.depth


def _register_encoder(store: ParamStore, rng, prefix: str, dims, config: ModelConfig):
    h = config.leaf_hidden
    store.register(f"{prefix}leaf.w1", rng.normal(size=(h, 3)) * np.sqrt(2.0 / 3.0))
    store.register(f"{prefix}leaf.b1", np.zeros(h))
    store.register(f"{prefix}leaf.w2", rng.normal(size=(dims[0], h)) * np.sqrt(2.0 / h))
    store.register(f"{prefix}leaf.b2", np.zeros(dims[0]))
    for k in range(config.depth):
        fan_in = dims[k] if config.merge == "max" else 2 * dims[k]
        store.register(f"{prefix}merge{k}.w",
                       rng.normal(size=(dims[k + 1], fan_in)) * np.sqrt(2.0 / fan_in))
        store.register(f"{prefix}merge{k}.b", np.zeros(dims[k + 1]))


def _register_std(store: ParamStore, name: str, dim: int):
    # Fixed standardization buffers: identity until calibrated on the first
    # training batch; never touched by the optimizer (they get no gradient).
    store.register(f"{name}.mean", np.zeros(dim))
    store.register(f"{name}.std", np.ones(dim))


def init_params(config: ModelConfig, seed: int) -> ParamStore:
    """Fresh parameter store; the alignment head starts as the identity map."""
    rng = make_rng(seed, 77)
    store = ParamStore()
    dims = config.dims
    _register_encoder(store, rng, "", dims, config)

    h1, h2 = config.classifier_hidden
    store.register("cls.w1", rng.normal(size=(h1, dims[-1])) * np.sqrt(2.0 / dims[-1]))
    store.register("cls.b1", np.zeros(h1))
    _register_std(store, "cls.std1", h1)
    store.register("cls.w2", rng.normal(size=(h2, h1)) * np.sqrt(2.0 / h1))
    store.register("cls.b2", np.zeros(h2))
    _register_std(store, "cls.std2", h2)
    store.register("cls.w3", rng.normal(size=(config.num_classes, h2)) * np.sqrt(1.0 / h2))
    store.register("cls.b3", np.zeros(config.num_classes))

    if config.use_alignment_net:
        adims = config.align_dims
        _register_encoder(store, rng, "align.", adims, config)
        ah = config.align_head_hidden
        store.register("align.head.w1",
                       rng.normal(size=(ah, adims[-1])) * np.sqrt(2.0 / adims[-1]))
        store.register("align.head.b1", np.zeros(ah))
        store.register("align.head.w2", np.zeros((9, ah)))
        store.register("align.head.b2", np.eye(3).reshape(-1))

    carry = config.carry_dim
    store.register("dec.proj.w", rng.normal(size=(carry, dims[-1])) * np.sqrt(1.0 / dims[-1]))
    store.register("dec.proj.b", np.zeros(carry))
    for j in range(1, config.depth + 1):
        fan_in = dims[config.depth - j] + carry
        store.register(f"dec.merge{j}.w",
                       rng.normal(size=(carry, fan_in)) * np.sqrt(2.0 / fan_in))
        store.register(f"dec.merge{j}.b", np.zeros(carry))
    sh = config.seg_head_hidden
    store.register("seg.w1", rng.normal(size=(sh, carry)) * np.sqrt(2.0 / carry))
    store.register("seg.b1", np.zeros(sh))
    _register_std(store, "seg.std1", sh)
    store.register("seg.w2", rng.normal(size=(config.num_seg_classes, sh)) * np.sqrt(1.0 / sh))
    store.register("seg.b2", np.zeros(config.num_seg_classes))
    return store


def _leaf_features(store: ParamStore, prefix: str, pts: Tensor) -> Tensor:
    h = ad.relu(ad.add_bias(ad.linear(pts, store[f"{prefix}leaf.w1"]),
                            store[f"{prefix}leaf.b1"]))
    h2 = ad.add_bias(ad.linear(h, store[f"{prefix}leaf.w2"]), store[f"{prefix}leaf.b2"])
    return ad.relu(h2)


def encode_stages(store: ParamStore, prefix: str, leaf_pts: Tensor,
                  config: ModelConfig) -> List[Tensor]:
    """Bottom-up features per tree layer.

    ``stages[k]`` holds tree layer ``depth - k`` as a (batch, 2^(depth-k),
    dims[k]) tensor whose item ordering matches the tree's left-to-right node
    order, so item 2i and 2i+1 of one stage are the children of item i of the
    next.
    """
    if leaf_pts.data.ndim != 3 or leaf_pts.data.shape[1] != config.n_points:
        raise ShapeMismatch(
            f"expected (batch, {config.n_points}, 3) leaf points, got {leaf_pts.data.shape}")
    stages = [_leaf_features(store, prefix, leaf_pts)]
    for k in range(config.depth):
        x = stages[-1]
        items = x.data.shape[1]
        left = ad.gather_items(x, np.arange(0, items, 2))
        right = ad.gather_items(x, np.arange(1, items, 2))
        if config.merge == "max":
            merged = ad.pointwise_max(_merge_dense(store, prefix, k, left),
                                      _merge_dense(store, prefix, k, right))
        else:
            merged = ad.relu(_merge_dense(store, prefix, k, ad.concat(left, right)))
        stages.append(merged)
    return stages


def _merge_dense(store: ParamStore, prefix: str, k: int, x: Tensor) -> Tensor:
    return ad.add_bias(ad.linear(x, store[f"{prefix}merge{k}.w"]),
                       store[f"{prefix}merge{k}.b"])


def root_feature(stages: List[Tensor]) -> Tensor:
    return ad.mean_items(stages[-1])  # (batch, 1, dim) -> (batch, dim)


def _std(store: ParamStore, name: str, x: Tensor) -> Tensor:
    return ad.standardize(x, store[f"{name}.mean"].data, store[f"{name}.std"].data)


def classifier_logits(store: ParamStore, root: Tensor, config: ModelConfig) -> Tensor:
    h1 = ad.relu(_std(store, "cls.std1", ad.add_bias(ad.linear(root, store["cls.w1"]),
                                                     store["cls.b1"])))
    h2 = ad.relu(_std(store, "cls.std2", ad.add_bias(ad.linear(h1, store["cls.w2"]),
                                                     store["cls.b2"])))
    return ad.add_bias(ad.linear(h2, store["cls.w3"]), store["cls.b3"])


def align_matrices(store: ParamStore, leaf_pts: Tensor, config: ModelConfig) -> Tensor:
    """Per-sample 3x3 alignment matrices (flattened), identity at init."""
    stages = encode_stages(store, "align.", leaf_pts, config)
    feat = root_feature(stages)
    h = ad.relu(ad.add_bias(ad.linear(feat, store["align.head.w1"]),
                            store["align.head.b1"]))
    return ad.add_bias(ad.linear(h, store["align.head.w2"]), store["align.head.b2"])


def network_inputs(store: ParamStore, leaf_pts: Tensor, config: ModelConfig) -> Tensor:
    if config.use_alignment_net:
        return ad.transform_points(leaf_pts, align_matrices(store, leaf_pts, config))
    return leaf_pts


def classification_logits(store: ParamStore, leaf_pts: Tensor,
                          config: ModelConfig) -> Tensor:
    x = network_inputs(store, leaf_pts, config)
    stages = encode_stages(store, "", x, config)
    return classifier_logits(store, root_feature(stages), config)


def segmentation_logits(store: ParamStore, leaf_pts: Tensor,
                        config: ModelConfig) -> Tensor:
    """Per-leaf class logits (batch, n, num_seg_classes) in leaf order."""
    x = network_inputs(store, leaf_pts, config)
    stages = encode_stages(store, "", x, config)
    carry = ad.add_bias(ad.linear(stages[-1], store["dec.proj.w"]), store["dec.proj.b"])
    for j in range(1, config.depth + 1):
        parent_rep = ad.gather_items(carry, np.repeat(np.arange(carry.data.shape[1]), 2))
        self_info = stages[config.depth - j]
        merged = ad.concat(self_info, parent_rep)
        carry = ad.relu(ad.add_bias(ad.linear(merged, store[f"dec.merge{j}.w"]),
                                    store[f"dec.merge{j}.b"]))
    h = ad.relu(_std(store, "seg.std1", ad.add_bias(ad.linear(carry, store["seg.w1"]),
                                                    store["seg.b1"])))
    return ad.add_bias(ad.linear(h, store["seg.w2"]), store["seg.b2"])


# ---------------------------------------------------------------------------
# Sample preprocessing and caching
# ---------------------------------------------------------------------------

@dataclass
class PreparedSample:
    """A cloud after padding/normalization with its cached tree layout."""

    leaf_points: np.ndarray            # (2^d, 3) in leaf order
    leaf_order: np.ndarray             # leaf slot -> point index
    label: Optional[int]
    leaf_labels: Optional[np.ndarray]  # per-leaf segmentation targets
    leaf_keep: np.ndarray              # False on padded duplicates
    n_original: int
    tree: KdTree


def prepare(record: Record, config: ModelConfig) -> PreparedSample:
    cloud = pad_to_pow2(record.cloud, config.pad_seed)
    if len(cloud) != config.n_points:
        raise ShapeMismatch(
            f"cloud pads to {len(cloud)} points but the model expects {config.n_points}")
    cloud = unitize(cloud)
    if config.use_prealign:
        cloud = prealign(cloud, planar_fallback=config.planar_fallback)
    tree = build(cloud, PCA_MEDIAN)
    order = tree.leaf_order()
    dup = (np.zeros(len(cloud), bool) if cloud.duplicated is None
           else cloud.duplicated)
    return PreparedSample(
        leaf_points=cloud.points[order],
        leaf_order=order,
        label=record.label,
        leaf_labels=None if cloud.labels is None else cloud.labels[order],
        leaf_keep=~dup[order],
        n_original=len(record.cloud),
        tree=tree,
    )


def _signed_permutation(rng) -> np.ndarray:
    perm = rng.permutation(3)
    signs = rng.choice((-1.0, 1.0), size=3)
    mat = np.zeros((3, 3))
    mat[np.arange(3), perm] = signs
    return mat


def _augment(points: np.ndarray, rng, config: ModelConfig) -> np.ndarray:
    """Coordinate-only training augmentation; the cached tree is untouched."""
    if config.affine_reprealign_augment and config.use_prealign:
        image = points @ sample_affine(rng).linear.T
        points = prealign(PointCloud(image), planar_fallback=True).points
    if config.flip_permute_augment:
        points = points @ _signed_permutation(rng).T
    return points


# ---------------------------------------------------------------------------
# Training and evaluation
# ---------------------------------------------------------------------------

@dataclass
class TrainResult:
    store: ParamStore
    config: ModelConfig
    task: str
    metrics: List[tuple]   # (epoch, split, loss, accuracy)
    best_epoch: int
    best_val_accuracy: float


def _batch_arrays(samples: Sequence[PreparedSample], task: str):
    pts = np.stack([s.leaf_points for s in samples])
    if task == "classify":
        targets = np.array([s.label for s in samples], dtype=np.int64)
    else:
        targets = np.stack([s.leaf_labels for s in samples])
    return pts, targets


def _forward_loss(store: ParamStore, pts: np.ndarray, targets: np.ndarray,
                  config: ModelConfig, task: str) -> Tuple[Tensor, Tensor]:
    x = Tensor(pts)
    logits = (classification_logits(store, x, config) if task == "classify"
              else segmentation_logits(store, x, config))
    return ad.softmax_xent(logits, targets), logits


def calibrate_standardization(store: ParamStore, samples: Sequence[PreparedSample],
                              config: ModelConfig, task: str) -> None:
    """Freeze the per-feature standardization from one batch of activations.

    Runs the forward pass with the buffers still at identity, then sets each
    site's mean/std from the observed pre-activation statistics.  Sites are
    calibrated in network order so later sites see earlier ones applied.
    """
    pts, _ = _batch_arrays(samples, task)
    x = Tensor(pts)
    inputs = network_inputs(store, x, config)
    stages = encode_stages(store, "", inputs, config)

    def set_site(name: str, pre: Tensor) -> Tensor:
        flat = pre.data.reshape(-1, pre.data.shape[-1])
        store[f"{name}.mean"].data = flat.mean(axis=0)
        store[f"{name}.std"].data = np.maximum(flat.std(axis=0), 1e-3)
        return _std(store, name, pre)

    if task == "classify":
        root = root_feature(stages)
        h1 = ad.relu(set_site("cls.std1", ad.add_bias(ad.linear(root, store["cls.w1"]),
                                                      store["cls.b1"])))
        set_site("cls.std2", ad.add_bias(ad.linear(h1, store["cls.w2"]), store["cls.b2"]))
    else:
        carry = ad.add_bias(ad.linear(stages[-1], store["dec.proj.w"]), store["dec.proj.b"])
        for j in range(1, config.depth + 1):
            parent_rep = ad.gather_items(carry, np.repeat(np.arange(carry.data.shape[1]), 2))
            merged = ad.concat(stages[config.depth - j], parent_rep)
            carry = ad.relu(ad.add_bias(ad.linear(merged, store[f"dec.merge{j}.w"]),
                                        store[f"dec.merge{j}.b"]))
        set_site("seg.std1", ad.add_bias(ad.linear(carry, store["seg.w1"]), store["seg.b1"]))


def evaluate(store: ParamStore, samples: Sequence[PreparedSample],
             config: ModelConfig, task: str) -> Tuple[float, float]:
    """(mean loss, accuracy); padded duplicates are excluded from accuracy."""
    losses = []
    correct = 0
    total = 0
    for start in range(0, len(samples), config.batch_size):
        chunk = samples[start:start + config.batch_size]
        pts, targets = _batch_arrays(chunk, task)
        loss, logits = _forward_loss(store, pts, targets, config, task)
        losses.append(float(loss.data) * len(chunk))
        pred = np.argmax(logits.data, axis=-1)
        if task == "classify":
            correct += int((pred == targets).sum())
            total += len(chunk)
        else:
            keep = np.stack([s.leaf_keep for s in chunk])
            correct += int(((pred == targets) & keep).sum())
            total += int(keep.sum())
    return sum(losses) / max(len(samples), 1), correct / max(total, 1)


def train(splits: Splits, config: ModelConfig, seed: int,
          task: str = "classify") -> TrainResult:
    """Seeded mini-batch Adam with early stopping on validation accuracy."""
    if task not in ("classify", "segment"):
        raise ValueError(f"unknown task {task!r}")
    if not splits.train:
        raise ValueError("training split is empty")
    train_samples = [prepare(r, config) for r in splits.train]
    val_samples = [prepare(r, config) for r in splits.val]

    store = init_params(config, seed)
    calibrate_standardization(store, train_samples[:config.batch_size], config, task)
    opt = Adam(store, lr=config.lr)

    metrics: List[tuple] = []
    best_val = -1.0
    best_epoch = -1
    best_values: Dict[str, np.ndarray] = store.copy_values()
    stale = 0
    for epoch in range(config.epochs):
        order = make_rng(seed, 11, epoch).permutation(len(train_samples))
        for start in range(0, len(order), config.batch_size):
            idx = order[start:start + config.batch_size]
            chunk = [train_samples[i] for i in idx]
            pts, targets = _batch_arrays(chunk, task)
            aug = np.stack([
                _augment(p, make_rng(seed, 13, epoch, int(i)), config)
                for p, i in zip(pts, idx)])
            try:
                loss, _ = _forward_loss(store, aug, targets, config, task)
                opt.zero_grad()
                ad.backward(loss)
            except NonFiniteValue as exc:
                raise NonFiniteLoss(
                    f"epoch {epoch}, batch at {start}: {exc}") from exc
            opt.step()

        train_loss, train_acc = evaluate(store, train_samples, config, task)
        val_loss, val_acc = evaluate(store, val_samples, config, task) \
            if val_samples else (train_loss, train_acc)
        metrics.append((epoch, "train", train_loss, train_acc))
        metrics.append((epoch, "val", val_loss, val_acc))
        if val_acc > best_val:
            best_val, best_epoch, stale = val_acc, epoch, 0
            best_values = store.copy_values()
        else:
            stale += 1
            if stale >= config.patience:
                break

    store.load_values(best_values)
    return TrainResult(store, config, task, metrics, best_epoch, best_val)


# ---------------------------------------------------------------------------
# Single-cloud inference surface
# ---------------------------------------------------------------------------

def encode(cloud: PointCloud, tree: KdTree, store: ParamStore,
           config: ModelConfig, prefix: str = ""):
    """All node features plus the root feature for one cloud and its tree.

    The cloud must be the one the tree was built on.  Returns (per-node
    feature dict, root feature vector).
    """
    if tree.n != config.n_points:
        raise ShapeMismatch(f"tree has {tree.n} leaves, config expects {config.n_points}")
    leaf_pts = tree.points[tree.leaf_order()][None, :, :]
    stages = encode_stages(store, prefix, Tensor(leaf_pts), config)
    values = {}
    for layer_index, nodes in enumerate(tree.layers):
        stage = stages[config.depth - layer_index]
        for slot, node in enumerate(nodes):
            values[node] = stage.data[0, slot]
    return values, stages[-1].data[0, 0]


def align(cloud: PointCloud, store: ParamStore, config: ModelConfig) -> PointCloud:
    """Apply the learned 3x3 alignment to a cloud (identity at init)."""
    sample = prepare(Record(cloud), config)
    m9 = align_matrices(store, Tensor(sample.leaf_points[None]), config)
    matrix = m9.data[0].reshape(3, 3)
    return cloud.with_points(cloud.points @ matrix.T)


def classify(cloud: PointCloud, store: ParamStore, config: ModelConfig) -> np.ndarray:
    """Log-likelihood over classes for one cloud."""
    sample = prepare(Record(cloud), config)
    logits = classification_logits(store, Tensor(sample.leaf_points[None]), config)
    return ad.log_softmax(logits.data)[0]


def segment(cloud: PointCloud, store: ParamStore, config: ModelConfig) -> np.ndarray:
    """Per-point log-likelihoods (original point order, padding dropped)."""
    sample = prepare(Record(cloud), config)
    logits = segmentation_logits(store, Tensor(sample.leaf_points[None]), config)
    logp = ad.log_softmax(logits.data)[0]
    out = np.empty((sample.leaf_points.shape[0], logp.shape[-1]))
    out[sample.leaf_order] = logp
    return out[:sample.n_original]
