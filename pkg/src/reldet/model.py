"""The predicate classification network and its training loop.

Data flow for one object pair: a three-block convolutional trunk turns the
five-channel pair image (RGB union crop + subject/object masks) into a small
feature map; a two-layer semantics network maps the one-hot category
difference vector to a compact kernel vector; that vector is tiled across the
trunk channels and applied as a per-channel 1x1 dynamic convolution, gating
the visual features top-down. Gated and raw features are concatenated and
recalibrated by a squeeze-excite style channel weighting, then a three-layer
classifier with dropout emits predicate logits.

The ablated "controlled framework" (CF) deletes the whole semantics-induced
block: trunk features go straight into the classifier, so its prediction
cannot depend on object categories.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np

from . import autodiff as ad
from .autodiff import Optimizer, Tape, Tensor
from .geometry import ScoredBox, crop_resize, five_channel_input, pair_margin, \
    rasterize_dual_masks, union_box
from .scenes import CategoryVocab, SceneAnnotation, category_difference_vector


@dataclass(frozen=True)
class ModelConfig:
    """Architecture hyperparameters; defaults are the desk-scale preset."""

    input_resolution: int = 64
    vin_channels: tuple[int, int, int] = (16, 32, 64)
    oln_hidden: int = 64
    oln_out: int = 32                     # width of the predicted kernel vector
    reduction: int = 4                    # channel-weight bottleneck ratio
    classifier_hidden: tuple[int, int] = (256, 128)
    dropout_rate: float = 0.5
    num_predicates: int = 6
    num_categories: int = 8

    def __post_init__(self):
        widths = (self.oln_hidden, self.oln_out, self.reduction,
                  *self.vin_channels, *self.classifier_hidden,
                  self.num_predicates, self.num_categories)
        if any(w <= 0 for w in widths):
            raise ValueError("all widths must be positive")
        if len(self.vin_channels) != 3:
            raise ValueError("the trunk has exactly three conv blocks")
        if len(self.classifier_hidden) != 2:
            raise ValueError("the classifier has exactly two hidden layers")
        if self.input_resolution < 8 or self.input_resolution % 8:
            raise ValueError("input resolution must be a positive multiple of 8")
        if self.trunk_channels % self.oln_out:
            raise ValueError(
                f"kernel width {self.oln_out} must divide trunk width "
                f"{self.trunk_channels} exactly")
        if (2 * self.trunk_channels) % self.reduction:
            raise ValueError("reduction must divide the concatenated channel count")
        if not 0.0 <= self.dropout_rate < 1.0:
            raise ValueError("dropout rate must lie in [0, 1)")

    @property
    def trunk_channels(self) -> int:
        return self.vin_channels[-1]

    @property
    def feature_size(self) -> int:
        return self.input_resolution // 8

    @property
    def extension_count(self) -> int:
        return self.trunk_channels // self.oln_out

    @classmethod
    def paper_scale(cls) -> "ModelConfig":
        """Full-scale preset (224px, 512-wide trunk, 300/256 semantics net).

        Provided for completeness; the desk-scale default is what the test
        suite and benchmark exercise.
        """
        return cls(input_resolution=224, vin_channels=(64, 128, 512),
                   oln_hidden=300, oln_out=256)


def init_params(config: ModelConfig, seed: int,
                ablate_sil: bool = False) -> dict[str, Tensor]:
    """Xavier-uniform weights, zero biases; deterministic per seed.

    Parameter names are stable and documented in the README; the ablated
    model owns only trunk and classifier tensors.
    """
    c1, c2, c3 = config.vin_channels
    f = config.feature_size
    h1, h2 = config.classifier_hidden
    flat_in = f * f * (c3 if ablate_sil else 2 * c3)
    shapes: list[tuple[str, tuple[int, ...], int, int]] = [
        ("vin.conv1.kernels", (3, 3, 5, c1), 9 * 5, 9 * c1),
        ("vin.conv2.kernels", (3, 3, c1, c2), 9 * c1, 9 * c2),
        ("vin.conv3.kernels", (3, 3, c2, c3), 9 * c2, 9 * c3),
    ]
    if not ablate_sil:
        cw_mid = 2 * c3 // config.reduction
        shapes += [
            ("oln.fc1.weights", (config.num_categories, config.oln_hidden),
             config.num_categories, config.oln_hidden),
            ("oln.fc2.weights", (config.oln_hidden, config.oln_out),
             config.oln_hidden, config.oln_out),
            ("cw.fc1.weights", (2 * c3, cw_mid), 2 * c3, cw_mid),
            ("cw.fc2.weights", (cw_mid, 2 * c3), cw_mid, 2 * c3),
        ]
    shapes += [
        ("clf.fc1.weights", (flat_in, h1), flat_in, h1),
        ("clf.fc2.weights", (h1, h2), h1, h2),
        ("clf.fc3.weights", (h2, config.num_predicates), h2, config.num_predicates),
    ]
    seeds = np.random.SeedSequence(seed).generate_state(len(shapes))
    params: dict[str, Tensor] = {}
    for (name, shape, fan_in, fan_out), s in zip(shapes, seeds):
        params[name] = ad.xavier_init(shape, fan_in, fan_out, int(s))
        bias_name = name.replace(".kernels", ".bias").replace(".weights", ".bias")
        params[bias_name] = Tensor(np.zeros(shape[-1]), requires_grad=True)
    return params


# ---------------------------------------------------------------------------
# forward passes


# Sub-batch extent for the trunk: keeps each chunk's conv/relu/pool
# intermediates cache-resident instead of streaming 16 MB maps through DRAM.
_VIN_CHUNK = 32


def _vin_blocks(x: Tensor, params: dict[str, Tensor]) -> Tensor:
    for i in (1, 2, 3):
        x = ad.conv2d(x, params[f"vin.conv{i}.kernels"], params[f"vin.conv{i}.bias"],
                      stride=1, padding=1)
        x = ad.relu(x)
        x = ad.maxpool2(x)
    return x


def vin_forward(x: Tensor, params: dict[str, Tensor]) -> Tensor:
    """Visual trunk: three blocks of conv3x3 (stride 1, pad 1), relu, pool2.

    Large batches whose input needs no gradient are processed in sub-batches
    and reassembled; the result is identical either way.
    """
    xd = x.data
    if xd.ndim == 4 and xd.shape[0] > _VIN_CHUNK and not x.requires_grad:
        parts = []
        for start in range(0, xd.shape[0], _VIN_CHUNK):
            piece = Tensor._wrap(np.ascontiguousarray(xd[start:start + _VIN_CHUNK]),
                                 False)
            parts.append(_vin_blocks(piece, params))
        return ad.concat_batch(parts)
    return _vin_blocks(x, params)


def oln_forward(diff: Tensor, params: dict[str, Tensor]) -> Tensor:
    """Semantics network: category difference vector -> kernel vector."""
    h = ad.relu(ad.fully_connected(diff, params["oln.fc1.weights"],
                                   params["oln.fc1.bias"]))
    return ad.fully_connected(h, params["oln.fc2.weights"], params["oln.fc2.bias"])


def extend(f_s: Tensor, n: int) -> Tensor:
    """Tile the kernel vector n times to match the trunk channel count."""
    return ad.tile_vector(f_s, n)


def dynamic_conv(f_sk: Tensor, f_v: Tensor) -> Tensor:
    """Per-channel 1x1 dynamic convolution: each trunk channel is scaled by
    its predicted kernel value."""
    return ad.scale_channels(f_v, f_sk)


def channel_weight(f_u: Tensor, params: dict[str, Tensor]) -> Tensor:
    """Squeeze-excite recalibration: pooled stats gate every channel in (0,1)."""
    s = ad.global_avg_pool(f_u)
    s = ad.relu(ad.fully_connected(s, params["cw.fc1.weights"], params["cw.fc1.bias"]))
    s = ad.sigmoid(ad.fully_connected(s, params["cw.fc2.weights"],
                                      params["cw.fc2.bias"]))
    return ad.scale_channels(f_u, s)


def sil_forward(f_v: Tensor, f_s: Tensor, params: dict[str, Tensor],
                config: ModelConfig) -> Tensor:
    """Extension, dynamic convolution, concatenation, channel weighting."""
    f_sk = extend(f_s, config.extension_count)
    f_ac = dynamic_conv(f_sk, f_v)
    f_u = ad.concat_channels(f_ac, f_v)
    return channel_weight(f_u, params)


def classifier_forward(features: Tensor, params: dict[str, Tensor],
                       config: ModelConfig, mode: str, seed: int = 0) -> Tensor:
    flat = ad.flatten_map(features)
    h = ad.relu(ad.fully_connected(flat, params["clf.fc1.weights"],
                                   params["clf.fc1.bias"]))
    h = ad.dropout(h, config.dropout_rate, mode, seed * 2)
    h = ad.relu(ad.fully_connected(h, params["clf.fc2.weights"],
                                   params["clf.fc2.bias"]))
    h = ad.dropout(h, config.dropout_rate, mode, seed * 2 + 1)
    return ad.fully_connected(h, params["clf.fc3.weights"], params["clf.fc3.bias"])


def full_forward(x: Tensor, diff: Tensor, params: dict[str, Tensor],
                 config: ModelConfig, mode: str, seed: int = 0) -> Tensor:
    f_v = vin_forward(x, params)
    f_s = oln_forward(diff, params)
    f_sil = sil_forward(f_v, f_s, params, config)
    return classifier_forward(f_sil, params, config, mode, seed)


def cf_forward(f_v: Tensor, params: dict[str, Tensor], config: ModelConfig,
               mode: str, seed: int = 0) -> Tensor:
    """Controlled framework: classify trunk features directly.

    No category information enters this path, so its output is provably
    independent of the subject/object classes.
    """
    return classifier_forward(f_v, params, config, mode, seed)


def ablated_forward(x: Tensor, params: dict[str, Tensor], config: ModelConfig,
                    mode: str, seed: int = 0) -> Tensor:
    return cf_forward(vin_forward(x, params), params, config, mode, seed)


# ---------------------------------------------------------------------------
# pair-level inference


def softmax(logits: np.ndarray) -> np.ndarray:
    e = np.exp(logits - logits.max(axis=-1, keepdims=True))
    return e / e.sum(axis=-1, keepdims=True)


def build_pair_input(image: np.ndarray, subject: ScoredBox, obj: ScoredBox,
                     resolution: int, margin_px: float = 4.0,
                     margin_frac: float = 0.05) -> np.ndarray:
    """Assemble the S x S x 5 input for one (subject, object) pair."""
    h, w = image.shape[:2]
    margin = pair_margin(subject.box, obj.box, margin_px, margin_frac)
    frame = union_box(subject.box, obj.box, margin, bounds=(float(w), float(h)))
    patch = crop_resize(image, frame, resolution)
    masks = rasterize_dual_masks(frame, subject.box, obj.box, resolution)
    return five_channel_input(patch, masks)


def predict_probs(inputs: np.ndarray, diffs: np.ndarray | None,
                  params: dict[str, Tensor], config: ModelConfig,
                  ablate_sil: bool = False) -> np.ndarray:
    """Eval-mode predicate distributions for a batch of assembled pair inputs."""
    x = Tensor._wrap(np.asarray(inputs, dtype=np.float64), False)
    if ablate_sil:
        logits = ablated_forward(x, params, config, "eval")
    else:
        d = Tensor._wrap(np.asarray(diffs, dtype=np.float64), False)
        logits = full_forward(x, d, params, config, "eval")
    return softmax(logits.data)


def predict_pairs(image: np.ndarray, pairs: list[tuple[ScoredBox, ScoredBox]],
                  params: dict[str, Tensor], config: ModelConfig,
                  ablate_sil: bool = False) -> list[tuple[np.ndarray, float]]:
    """Eval-mode predicate distributions and relation scores for many pairs.

    The relation score is subject confidence x object confidence x the top
    predicate probability.
    """
    if not pairs:
        return []
    xs = np.stack([build_pair_input(image, s, o, config.input_resolution)
                   for s, o in pairs])
    diffs = None if ablate_sil else \
        np.stack([category_difference_vector(s.category, o.category,
                                             config.num_categories)
                  for s, o in pairs])
    probs = predict_probs(xs, diffs, params, config, ablate_sil)
    return [(probs[i], pairs[i][0].score * pairs[i][1].score * float(probs[i].max()))
            for i in range(len(pairs))]


def predict_pair(image: np.ndarray, subject: ScoredBox, obj: ScoredBox,
                 params: dict[str, Tensor], config: ModelConfig,
                 ablate_sil: bool = False) -> tuple[np.ndarray, float]:
    """Distribution over predicates and the relation score for one pair."""
    return predict_pairs(image, [(subject, obj)], params, config, ablate_sil)[0]


# ---------------------------------------------------------------------------
# training


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 30
    batch_size: int = 32
    learning_rate: float = 1e-3
    optimizer: str = "adam"

    def __post_init__(self):
        if self.epochs < 0 or self.batch_size < 1:
            raise ValueError("epochs must be >= 0 and batch size >= 1")


def train_step(inputs: np.ndarray, diffs: np.ndarray | None, labels: np.ndarray,
               params: dict[str, Tensor], optimizer: Optimizer,
               config: ModelConfig, ablate_sil: bool, seed: int) -> float:
    """One optimization step over a batch; returns the mean batch loss."""
    with Tape() as tape:
        x = Tensor._wrap(np.asarray(inputs, dtype=np.float64), False)
        if ablate_sil:
            logits = ablated_forward(x, params, config, "train", seed)
        else:
            d = Tensor._wrap(np.asarray(diffs, dtype=np.float64), False)
            logits = full_forward(x, d, params, config, "train", seed)
        loss = ad.softmax_cross_entropy(logits, labels)
        optimizer.zero_grad()
        tape.backward(loss)
    optimizer.step()
    return loss.item()


def collect_relation_examples(
        scenes: list[SceneAnnotation]) -> list[tuple[int, int, int, int]]:
    """Flat (scene, subject, predicate, object) index list of all annotated
    relations; these are exactly the training pairs."""
    return [(i, s, p, o)
            for i, scene in enumerate(scenes)
            for s, p, o in scene.relations]


def assemble_examples(scenes: list[SceneAnnotation],
                      examples: list[tuple[int, int, int, int]],
                      config: ModelConfig) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Build (inputs, diff vectors, labels) arrays for a list of examples."""
    n = len(examples)
    xs = np.empty((n, config.input_resolution, config.input_resolution, 5))
    ds = np.empty((n, config.num_categories))
    ys = np.empty(n, dtype=np.int64)
    for k, (si, s, p, o) in enumerate(examples):
        scene = scenes[si]
        sub = ScoredBox(scene.objects[s].box, scene.objects[s].category, 1.0)
        obj = ScoredBox(scene.objects[o].box, scene.objects[o].category, 1.0)
        xs[k] = build_pair_input(scene.pixels, sub, obj, config.input_resolution)
        ds[k] = category_difference_vector(sub.category, obj.category,
                                           config.num_categories)
        ys[k] = p
    return xs, ds, ys


def _step_seed(master: int, step: int) -> int:
    return int(np.random.SeedSequence((master, step)).generate_state(1)[0])


def train_model(scenes: list[SceneAnnotation], vocab: CategoryVocab,
                config: ModelConfig, train_config: TrainConfig, seed: int,
                ablate_sil: bool = False,
                log: Callable[[str], None] | None = None
                ) -> tuple[dict[str, Tensor], list[float]]:
    """Train from scratch on all annotated relation pairs of the scenes.

    Deterministic per seed: initialization, epoch shuffles and dropout masks
    all derive from it. Returns the parameters and per-epoch mean losses.
    """
    if vocab.num_predicates != config.num_predicates \
            or vocab.num_objects != config.num_categories:
        raise ValueError("model config does not match the dataset vocabulary")
    params = init_params(config, seed, ablate_sil)
    optimizer = Optimizer(params, lr=train_config.learning_rate,
                          mode=train_config.optimizer)
    examples = collect_relation_examples(scenes)
    if not examples:
        raise ValueError("dataset contains no relation examples")
    shuffle_rng = np.random.default_rng(seed)
    history: list[float] = []
    step = 0
    for epoch in range(train_config.epochs):
        order = shuffle_rng.permutation(len(examples))
        total = 0.0
        for start in range(0, len(order), train_config.batch_size):
            batch = [examples[i] for i in order[start:start + train_config.batch_size]]
            xs, ds, ys = assemble_examples(scenes, batch, config)
            loss = train_step(xs, None if ablate_sil else ds, ys, params,
                              optimizer, config, ablate_sil, _step_seed(seed, step))
            total += loss * len(batch)
            step += 1
        mean = total / len(examples)
        history.append(mean)
        if log is not None:
            log(f"epoch={epoch + 1} mean_loss={mean!r} pairs={len(examples)}")
    return params, history
