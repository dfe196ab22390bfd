"""Model assembly: the composite fusion network and its two baselines.

All three variants share one convolutional trunk (conv -> LeakyReLU ->
pool per stage, then flatten and a dense stack):

* ``compnet`` ends in a dense layer of width ``n_classes * n_features``;
  that vector is reshaped row-major into one weight row per class and
  dotted with the designed-feature vector to produce class scores.
* ``concat`` appends the designed features to the first dense layer's
  activations and classifies with further dense layers.
* ``image_only`` ignores the designed features entirely.

Parameters are plain float64 arrays owned by the ``Model``; a forward
pass wraps them in tensors, optionally watched on a tape so the training
loop can pull gradients for every parameter.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace
from typing import Mapping, Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import Tape, Tensor
from .exceptions import ConfigError, DataError, ShapeError, VariantError
from .layers import (ConvParams, DenseParams, FusionShape, concat_columns,
                     conv2d, dense, fusion_weight_matrix, leaky_relu,
                     maxpool2d)

FUSION_KINDS = ("compnet", "concat", "image_only")


def conv_stack_geometry(image_shape: Sequence[int], conv_filters: Sequence[int],
                        kernel_size: int) -> list[tuple[int, int, int]]:
    """Per-stage (channels, H, W) after each conv+pool, ending at the trunk output.

    Raises ``ConfigError`` when any stage underflows or would pool odd
    spatial dims.
    """
    c, h, w = image_shape
    stages = [(c, h, w)]
    for i, f in enumerate(conv_filters):
        h2, w2 = h - kernel_size + 1, w - kernel_size + 1
        if h2 < 1 or w2 < 1:
            raise ConfigError(
                f"conv stage {i}: kernel {kernel_size} does not fit in {h}x{w}")
        if h2 % 2 or w2 % 2:
            raise ConfigError(
                f"conv stage {i}: pooling needs even dims, got {h2}x{w2}")
        c, h, w = f, h2 // 2, w2 // 2
        stages.append((c, h, w))
    return stages


@dataclass
class ModelConfig:
    """Everything needed to build one of the three variants deterministically.

    ``learned_width`` is the width of the vector entering the fusion
    reshape; it applies to the ``compnet`` variant only and must equal
    ``n_classes * n_features`` (left as ``None`` it takes that value).
    """
    image_shape: tuple[int, int, int]
    n_classes: int
    n_features: int
    conv_filters: tuple[int, ...] = (30, 30)
    kernel_size: int = 3
    dense_hidden: tuple[int, ...] = (256,)
    fusion_kind: str = "compnet"
    leaky_slope: float = 0.01
    seed: int = 0
    learned_width: int | None = None

    def __post_init__(self) -> None:
        self.image_shape = tuple(int(d) for d in self.image_shape)
        self.conv_filters = tuple(int(f) for f in self.conv_filters)
        self.dense_hidden = tuple(int(d) for d in self.dense_hidden)
        if len(self.image_shape) != 3 or min(self.image_shape) < 1:
            raise ConfigError(f"image_shape must be [C,H,W] >= 1, got {list(self.image_shape)}")
        if self.n_classes < 2:
            raise ConfigError(f"n_classes must be >= 2, got {self.n_classes}")
        if self.n_features < 1:
            raise ConfigError(f"n_features must be >= 1, got {self.n_features}")
        if not self.conv_filters or min(self.conv_filters) < 1:
            raise ConfigError(f"conv_filters must be non-empty positive, got {list(self.conv_filters)}")
        if self.kernel_size < 1:
            raise ConfigError(f"kernel_size must be >= 1, got {self.kernel_size}")
        if any(d < 1 for d in self.dense_hidden):
            raise ConfigError(f"dense_hidden widths must be >= 1, got {list(self.dense_hidden)}")
        if self.fusion_kind not in FUSION_KINDS:
            raise ConfigError(
                f"fusion_kind must be one of {list(FUSION_KINDS)}, got {self.fusion_kind!r}")
        if not 0.0 < self.leaky_slope < 1.0:
            raise ConfigError(f"leaky_slope must be in (0, 1), got {self.leaky_slope}")
        if self.fusion_kind == "compnet":
            m = self.n_classes * self.n_features
            if self.learned_width is None:
                self.learned_width = m
            elif self.learned_width != m:
                raise ConfigError(
                    f"learned_width {self.learned_width} != n_classes*n_features = {m}")
        elif self.learned_width is not None:
            raise ConfigError(
                f"learned_width applies to the compnet variant only, not {self.fusion_kind!r}")
        if self.fusion_kind == "concat" and not self.dense_hidden:
            raise ConfigError(
                "concat variant injects features after the first hidden dense "
                "layer and therefore needs a non-empty dense_hidden")
        # Raises ConfigError if the conv/pool chain is impossible.
        conv_stack_geometry(self.image_shape, self.conv_filters, self.kernel_size)

    @property
    def flat_width(self) -> int:
        c, h, w = conv_stack_geometry(
            self.image_shape, self.conv_filters, self.kernel_size)[-1]
        return c * h * w

    def to_dict(self) -> dict:
        return {
            "image_shape": list(self.image_shape),
            "n_classes": self.n_classes,
            "n_features": self.n_features,
            "conv_filters": list(self.conv_filters),
            "kernel_size": self.kernel_size,
            "dense_hidden": list(self.dense_hidden),
            "fusion_kind": self.fusion_kind,
            "leaky_slope": self.leaky_slope,
            "seed": self.seed,
            "learned_width": self.learned_width,
        }

    @classmethod
    def from_dict(cls, d: Mapping) -> "ModelConfig":
        known = {f for f in cls.__dataclass_fields__}
        extra = set(d) - known
        if extra:
            raise ConfigError(f"unknown model config keys: {sorted(extra)}")
        try:
            return cls(**{k: (tuple(v) if isinstance(v, list) else v) for k, v in d.items()})
        except TypeError as exc:
            raise ConfigError(f"bad model config: {exc}") from None


@dataclass
class Model:
    """A built network: config, layer descriptions, and named parameters."""
    config: ModelConfig
    layer_names: list[str]
    params: dict[str, np.ndarray]
    param_order: list[str] = field(default_factory=list)

    def __post_init__(self) -> None:
        if not self.param_order:
            self.param_order = list(self.params)

    @property
    def param_count(self) -> int:
        return sum(int(p.size) for p in self.params.values())

    def set_params(self, new_params: Mapping[str, np.ndarray]) -> None:
        """Replace parameter values in place (shapes must match)."""
        for name in self.param_order:
            new = np.asarray(new_params[name], dtype=np.float64)
            if new.shape != self.params[name].shape:
                raise ShapeError(
                    f"parameter {name}: shape {list(new.shape)} != "
                    f"{list(self.params[name].shape)}")
            self.params[name] = new


def _glorot_uniform(rng: np.random.Generator, shape: tuple[int, ...],
                    fan_in: int, fan_out: int) -> np.ndarray:
    s = float(np.sqrt(6.0 / (fan_in + fan_out)))
    return rng.uniform(-s, s, size=shape)


def build_model(cfg: ModelConfig) -> Model:
    """Initialize a model from the seeded scheme: uniform Glorot weights, zero biases.

    Parameter tensors are created and seeded in a fixed order (conv
    stages, then dense stack, then the output layer), so a given
    ``(config, seed)`` always yields bit-identical parameters.
    """
    rng = np.random.default_rng(cfg.seed)
    params: dict[str, np.ndarray] = {}
    names: list[str] = []

    def add_param(name: str, arr: np.ndarray) -> None:
        params[name] = arr
        names.append(name)

    layer_names: list[str] = []
    c_in = cfg.image_shape[0]
    k = cfg.kernel_size
    for i, f in enumerate(cfg.conv_filters):
        shape = (f, c_in, k, k)
        add_param(f"conv{i}.kernels",
                  _glorot_uniform(rng, shape, c_in * k * k, f * k * k))
        add_param(f"conv{i}.bias", np.zeros(f))
        layer_names += [f"conv2d({c_in}->{f}, {k}x{k})", "leaky_relu", "maxpool2d(2x2)"]
        c_in = f
    width = cfg.flat_width
    layer_names.append(f"flatten({width})")

    dense_plan: list[tuple[str, int, bool]] = []  # (name, out_width, activated)
    for i, h in enumerate(cfg.dense_hidden):
        dense_plan.append((f"dense{i}", h, True))
    if cfg.fusion_kind == "compnet":
        dense_plan.append(("out", cfg.learned_width, False))
    else:
        dense_plan.append(("out", cfg.n_classes, False))

    concat_after = "dense0" if cfg.fusion_kind == "concat" else None
    for name, out_w, activated in dense_plan:
        add_param(f"{name}.weights", _glorot_uniform(rng, (width, out_w), width, out_w))
        add_param(f"{name}.bias", np.zeros(out_w))
        layer_names.append(f"dense({width}->{out_w})")
        if activated:
            layer_names.append("leaky_relu")
        width = out_w
        if name == concat_after:
            layer_names.append(f"concat_features(+{cfg.n_features})")
            width += cfg.n_features
    if cfg.fusion_kind == "compnet":
        layer_names.append(f"reshape({cfg.n_classes}x{cfg.n_features})")
        layer_names.append("fusion_dot(designed_features)")

    return Model(config=cfg, layer_names=layer_names, params=params, param_order=names)


def _check_images(model: Model, images: Tensor) -> None:
    cfg = model.config
    if images.data.ndim != 4 or images.shape[1:] != cfg.image_shape:
        raise ShapeError(
            f"images must be [B, {', '.join(map(str, cfg.image_shape))}], "
            f"got {list(images.shape)}")
    if not np.isfinite(images.data).all():
        raise DataError("images contain non-finite values")


def _check_inputs(model: Model, images: Tensor, features: Tensor | None) -> None:
    cfg = model.config
    _check_images(model, images)
    if features is None:
        if cfg.fusion_kind != "image_only":
            raise ShapeError(f"{cfg.fusion_kind} variant requires designed features")
        return
    if features.data.ndim != 2 or features.shape != (images.shape[0], cfg.n_features):
        raise ShapeError(
            f"features must be [{images.shape[0]}, {cfg.n_features}], "
            f"got {list(features.shape)}")
    if not np.isfinite(features.data).all():
        raise DataError("features contain non-finite values")


def _trunk(model: Model, p: Mapping[str, Tensor], images: Tensor) -> Tensor:
    cfg = model.config
    x = images
    for i in range(len(cfg.conv_filters)):
        x = conv2d(x, ConvParams(p[f"conv{i}.kernels"], p[f"conv{i}.bias"]))
        x = leaky_relu(x, cfg.leaky_slope)
        x = maxpool2d(x)
    return ad.reshape(x, (x.shape[0], cfg.flat_width))


def _learned_vector(model: Model, p: Mapping[str, Tensor], images: Tensor) -> Tensor:
    """Part (a): image through the trunk and dense stack to the learned vector."""
    cfg = model.config
    x = _trunk(model, p, images)
    for i in range(len(cfg.dense_hidden)):
        x = dense(x, DenseParams(p[f"dense{i}.weights"], p[f"dense{i}.bias"]))
        x = leaky_relu(x, cfg.leaky_slope)
    return dense(x, DenseParams(p["out.weights"], p["out.bias"]))


def _graph_logits(model: Model, p: Mapping[str, Tensor], images: Tensor,
                  features: Tensor | None) -> Tensor:
    cfg = model.config
    if cfg.fusion_kind == "compnet":
        learned = _learned_vector(model, p, images)
        shape = FusionShape.of(cfg.n_classes, cfg.n_features)
        assert features is not None
        return fusion_weight_matrix(learned, shape, features)
    if cfg.fusion_kind == "concat":
        x = _trunk(model, p, images)
        x = dense(x, DenseParams(p["dense0.weights"], p["dense0.bias"]))
        x = leaky_relu(x, cfg.leaky_slope)
        assert features is not None
        x = concat_columns(x, features)
        for i in range(1, len(cfg.dense_hidden)):
            x = dense(x, DenseParams(p[f"dense{i}.weights"], p[f"dense{i}.bias"]))
            x = leaky_relu(x, cfg.leaky_slope)
        return dense(x, DenseParams(p["out.weights"], p["out.bias"]))
    # image_only
    x = _trunk(model, p, images)
    for i in range(len(cfg.dense_hidden)):
        x = dense(x, DenseParams(p[f"dense{i}.weights"], p[f"dense{i}.bias"]))
        x = leaky_relu(x, cfg.leaky_slope)
    return dense(x, DenseParams(p["out.weights"], p["out.bias"]))


def tracked_forward(model: Model, tape: Tape, images: Tensor,
                    features: Tensor | None) -> tuple[Tensor, dict[str, Tensor]]:
    """Forward pass with every parameter watched on ``tape``.

    Returns the logits and the watched parameter tensors so a training
    step can look up each parameter's gradient by node id.
    """
    _check_inputs(model, images, features)
    watched = {name: tape.watch(Tensor(model.params[name], _own=True))
               for name in model.param_order}
    return _graph_logits(model, watched, images, features), watched


def forward(model: Model, images: Tensor, features: Tensor | None) -> Tensor:
    """Logits ``[B, n_classes]`` for a batch; no gradient recording."""
    _check_inputs(model, images, features)
    plain = {name: Tensor(model.params[name], _own=True) for name in model.param_order}
    return _graph_logits(model, plain, images, features)


def predict(model: Model, images: Tensor, features: Tensor | None) -> list[int]:
    """Per-sample argmax class; ties resolve to the lowest class index."""
    logits = forward(model, images, features)
    return [int(i) for i in np.argmax(logits.data, axis=1)]


def extract_weight_matrices(model: Model, images: Tensor) -> Tensor:
    """Per-sample learned weight matrices ``[B, n_classes, n_features]``.

    Only meaningful for the ``compnet`` variant, whose logits are exactly
    these matrices applied to the designed features.
    """
    if model.config.fusion_kind != "compnet":
        raise VariantError(
            f"weight matrices exist only for the compnet variant, "
            f"not {model.config.fusion_kind!r}")
    _check_images(model, images)
    plain = {name: Tensor(model.params[name], _own=True) for name in model.param_order}
    learned = _learned_vector(model, plain, images)
    cfg = model.config
    return ad.reshape(learned, (learned.shape[0], cfg.n_classes, cfg.n_features))


@dataclass
class ImportanceReport:
    """Mean absolute fusion weight per (class, designed feature).

    ``ranking[k]`` lists feature indices for class ``k`` in descending
    importance (ties broken toward the lower index); ``rank_of[k][j]`` is
    feature ``j``'s position in that list, 0 being the most important.
    """
    importance: np.ndarray
    ranking: np.ndarray

    def __post_init__(self) -> None:
        self.importance = np.asarray(self.importance, dtype=np.float64)
        self.ranking = np.asarray(self.ranking, dtype=np.int64)
        if self.importance.shape != self.ranking.shape or self.importance.ndim != 2:
            raise ShapeError("importance and ranking must be matching rank-2 arrays")

    @property
    def n_classes(self) -> int:
        return self.importance.shape[0]

    @property
    def n_features(self) -> int:
        return self.importance.shape[1]

    @property
    def rank_of(self) -> np.ndarray:
        inv = np.empty_like(self.ranking)
        rows = np.arange(self.n_classes)[:, None]
        inv[rows, self.ranking] = np.arange(self.n_features)[None, :]
        return inv


def feature_importance(model: Model, dataset) -> ImportanceReport:
    """Mean |weight matrix| over a dataset, with per-class feature rankings."""
    if model.config.fusion_kind != "compnet":
        raise VariantError(
            f"feature importance requires the compnet variant, "
            f"not {model.config.fusion_kind!r}")
    n = len(dataset)
    if n == 0:
        raise DataError("feature importance needs a non-empty dataset")
    cfg = model.config
    total = np.zeros((cfg.n_classes, cfg.n_features))
    images = dataset.images()
    for start in range(0, n, 256):
        chunk = Tensor(images[start:start + 256], _own=True)
        total += np.abs(extract_weight_matrices(model, chunk).data).sum(axis=0)
    importance = total / n
    ranking = np.argsort(-importance, axis=1, kind="stable")
    return ImportanceReport(importance=importance, ranking=ranking)


def clone_config(cfg: ModelConfig, **overrides) -> ModelConfig:
    """New config with selected fields replaced (re-validated).

    ``learned_width`` is re-derived whenever the variant or the fusion
    dimensions change, unless the caller pins it explicitly.
    """
    if {"fusion_kind", "n_classes", "n_features"} & set(overrides):
        overrides.setdefault("learned_width", None)
    return replace(cfg, **overrides)
