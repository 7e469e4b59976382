"""Layered CNN with a frozen prefix, a trainable feature suffix and a
classifier head, all sharing one parameter store.

The feature extractor ``g`` is every layer before ``feature_end``; the head
is everything after it.  Both training branches (reference and target)
call into the same :class:`Model`, so tied weights hold by construction.
"""

from __future__ import annotations

import hashlib
from dataclasses import asdict, dataclass, field
from typing import Sequence

import numpy as np

from . import container
from .tensor import ShapeError, Tensor, add_bias, conv2d, conv_output_size, flatten, matmul, maxpool2d, no_grad, relu, transpose

CHECKPOINT_MAGIC = b"DOCCKPT\0"
LAYER_KINDS = ("conv", "relu", "maxpool", "flatten", "fc")
PARAMETERIZED = ("conv", "fc")


@dataclass(frozen=True)
class LayerSpec:
    """One layer.  ``out`` is channels for conv and width for fc."""

    kind: str
    out: int = 0
    kernel: int = 3
    stride: int = 1
    padding: int = 0

    def __post_init__(self):
        if self.kind not in LAYER_KINDS:
            raise ValueError(f"unknown layer kind {self.kind!r}")


def conv(out: int, kernel: int = 3, stride: int = 1, padding: int = 1) -> LayerSpec:
    return LayerSpec("conv", out, kernel, stride, padding)


def fc(out: int) -> LayerSpec:
    return LayerSpec("fc", out)


def desk_backbone(num_classes: int, feature_dim: int = 64, hidden: int = 128) -> list[LayerSpec]:
    """Two conv/relu/pool blocks, two fully-connected layers, linear head.

    The feature layer (output of the ``feature_dim`` fc + relu) plays the
    role of fc7 in an Alexnet-style network.
    """
    return [
        conv(8), LayerSpec("relu"), LayerSpec("maxpool", kernel=2, stride=2),
        conv(16), LayerSpec("relu"), LayerSpec("maxpool", kernel=2, stride=2),
        LayerSpec("flatten"),
        fc(hidden), LayerSpec("relu"),
        fc(feature_dim), LayerSpec("relu"),
        fc(num_classes),
    ]  # fmt: skip


class ChainError(ShapeError):
    """Raised when consecutive layer shapes do not fit together."""


def _layer_names(layers: Sequence[LayerSpec]) -> list[str]:
    counts: dict[str, int] = {}
    names = []
    for spec in layers:
        counts[spec.kind] = counts.get(spec.kind, 0) + 1
        names.append(f"{spec.kind}{counts[spec.kind]}")
    return names


def infer_shapes(layers: Sequence[LayerSpec], input_shape: Sequence[int]) -> list[tuple[int, ...]]:
    """Per-sample output shape after each layer; raises :class:`ChainError`."""
    shape = tuple(input_shape)
    shapes = []
    for name, spec in zip(_layer_names(layers), layers):
        if spec.kind == "conv":
            if len(shape) != 3:
                raise ChainError(f"{name}: conv needs a (c, h, w) input, got {shape}")
            c, h, w = shape
            try:
                shape = (
                    spec.out,
                    conv_output_size(h, spec.kernel, spec.stride, spec.padding),
                    conv_output_size(w, spec.kernel, spec.stride, spec.padding),
                )
            except ShapeError as exc:
                raise ChainError(f"{name}: {exc}") from None
        elif spec.kind == "maxpool":
            if len(shape) != 3:
                raise ChainError(f"{name}: maxpool needs a (c, h, w) input, got {shape}")
            try:
                shape = (
                    shape[0],
                    conv_output_size(shape[1], spec.kernel, spec.stride, 0),
                    conv_output_size(shape[2], spec.kernel, spec.stride, 0),
                )
            except ShapeError as exc:
                raise ChainError(f"{name}: {exc}") from None
        elif spec.kind == "flatten":
            shape = (int(np.prod(shape)),)
        elif spec.kind == "fc":
            if len(shape) != 1:
                raise ChainError(f"{name}: fc needs a flat input, got {shape} (missing flatten?)")
            shape = (spec.out,)
        if spec.kind in PARAMETERIZED and spec.out < 1:
            raise ChainError(f"{name}: output size must be positive")
        shapes.append(shape)
    return shapes


def _param_shapes(layers, input_shape) -> dict[str, tuple[tuple[int, ...], tuple[int, ...]]]:
    out = {}
    shape = tuple(input_shape)
    for name, spec, after in zip(_layer_names(layers), layers, infer_shapes(layers, input_shape)):
        if spec.kind == "conv":
            out[name] = ((spec.out, shape[0], spec.kernel, spec.kernel), (spec.out,))
        elif spec.kind == "fc":
            out[name] = ((spec.out, shape[0]), (spec.out,))
        shape = after
    return out


@dataclass
class Model:
    """Ordered layers plus the shared parameter store ``params``.

    ``feature_end`` indexes the first head layer; ``trainable`` names the
    parameterized layers updated during fine-tuning.  Everything else is
    the frozen prefix.
    """

    layers: list[LayerSpec]
    input_shape: tuple[int, ...]
    params: dict[str, tuple[Tensor, Tensor]]
    feature_end: int
    trainable: tuple[str, ...]
    seed: int = 0
    metadata: dict = field(default_factory=dict)

    @property
    def layer_names(self) -> list[str]:
        return _layer_names(self.layers)

    @property
    def num_classes(self) -> int:
        return infer_shapes(self.layers, self.input_shape)[-1][0]

    @property
    def feature_dim(self) -> int:
        return int(np.prod(infer_shapes(self.layers, self.input_shape)[self.feature_end - 1]))

    @property
    def frozen(self) -> tuple[str, ...]:
        return tuple(n for n in self.params if n not in self.trainable)

    def set_trainable(self, names: Sequence[str]) -> None:
        unknown = set(names) - set(self.params)
        if unknown:
            raise KeyError(f"no parameterized layers named {sorted(unknown)}")
        self.trainable = tuple(n for n in self.params if n in set(names))
        for name, (w, b) in self.params.items():
            w.requires_grad = b.requires_grad = name in self.trainable

    def trainable_tensors(self) -> list[Tensor]:
        return [t for name in self.trainable for t in self.params[name]]

    def zero_grad(self) -> None:
        for w, b in self.params.values():
            w.zero_grad()
            b.zero_grad()

    def state(self) -> dict[str, np.ndarray]:
        out = {}
        for name, (w, b) in self.params.items():
            out[f"{name}.weight"] = w.data
            out[f"{name}.bias"] = b.data
        return out

    def copy(self) -> "Model":
        params = {n: (Tensor(w.data, w.requires_grad), Tensor(b.data, b.requires_grad)) for n, (w, b) in self.params.items()}
        return Model(list(self.layers), self.input_shape, params, self.feature_end, self.trainable, self.seed, dict(self.metadata))

    def hash(self) -> str:
        """SHA-256 over layer table and parameter bytes."""
        h = hashlib.sha256(repr((self.layers, self.input_shape, self.feature_end)).encode())
        for key, arr in self.state().items():
            h.update(key.encode())
            h.update(np.ascontiguousarray(arr, dtype="<f8").tobytes())
        return h.hexdigest()

    def frozen_hash(self) -> str:
        h = hashlib.sha256()
        for name in self.frozen:
            for t in self.params[name]:
                h.update(np.ascontiguousarray(t.data, dtype="<f8").tobytes())
        return h.hexdigest()

    def _run(self, x: Tensor, start: int, stop: int) -> Tensor:
        names = self.layer_names
        for name, spec in zip(names[start:stop], self.layers[start:stop]):
            if spec.kind == "conv":
                w, b = self.params[name]
                x = add_bias(conv2d(x, w, spec.stride, spec.padding), b)
            elif spec.kind == "fc":
                w, b = self.params[name]
                x = add_bias(matmul(x, transpose(w)), b)
            elif spec.kind == "relu":
                x = relu(x)
            elif spec.kind == "maxpool":
                x = maxpool2d(x, spec.kernel, spec.stride)
            elif spec.kind == "flatten":
                x = flatten(x)
        return x

    def _check_input(self, x) -> Tensor:
        x = x if isinstance(x, Tensor) else Tensor(x)
        if x.shape[1:] != tuple(self.input_shape):
            raise ShapeError(f"input batch {x.shape} does not match model input {self.input_shape}")
        return x

    @property
    def trainable_start(self) -> int:
        """Index of the first layer that owns trainable parameters."""
        names = self.layer_names
        return next((i for i, n in enumerate(names) if n in self.trainable), len(names))

    def prefix(self, x) -> np.ndarray:
        """Activations after the frozen prefix; constant while fine-tuning."""
        stop = min(self.trainable_start, self.feature_end)
        with no_grad():
            return self._run(self._check_input(x), 0, stop).data

    def forward(self, x, start: int = 0) -> tuple[Tensor, Tensor]:
        """Return ``(g(x), h_c(g(x)))`` from one pass.

        With ``start > 0``, ``x`` is the activation entering layer ``start``
        (e.g. the output of :meth:`prefix`).
        """
        if start == 0:
            x = self._check_input(x)
        elif not isinstance(x, Tensor):
            x = Tensor(x)
        feats = self._run(x, start, self.feature_end)
        return feats, self._run(feats, self.feature_end, len(self.layers))

    def features(self, x) -> Tensor:
        return self._run(self._check_input(x), 0, self.feature_end)

    def logits(self, x) -> Tensor:
        return self.forward(x)[1]


def build(
    layers: Sequence[LayerSpec],
    input_shape: Sequence[int] = (1, 28, 28),
    seed: int = 0,
    feature_end: int | None = None,
    n_trainable: int = 4,
) -> Model:
    """Build a model with seeded uniform He-style (fan-in) initialization.

    ``feature_end`` defaults to the index of the last fc layer, so the head
    is exactly that layer.  The last ``n_trainable`` parameterized layers are
    trainable; the rest form the frozen prefix.
    """
    layers = list(layers)
    kinds = [s.kind for s in layers]
    if "conv" not in kinds or "fc" not in kinds:
        raise ChainError("a model needs at least one conv and one fc layer")
    shapes = _param_shapes(layers, input_shape)
    if feature_end is None:
        feature_end = max(i for i, k in enumerate(kinds) if k == "fc")
    if not 0 < feature_end < len(layers):
        raise ValueError(f"feature_end {feature_end} out of range")
    rng = np.random.default_rng(seed)
    params = {}
    for name, (wshape, bshape) in shapes.items():
        fan_in = int(np.prod(wshape[1:]))
        limit = np.sqrt(6.0 / fan_in)
        params[name] = (Tensor(rng.uniform(-limit, limit, size=wshape)), Tensor(np.zeros(bshape)))
    names = list(params)
    model = Model(layers, tuple(input_shape), params, feature_end, (), seed)
    model.set_trainable(names[max(0, len(names) - n_trainable) :])
    return model


def forward_features(model: Model, x) -> np.ndarray:
    """Feature vectors ``g(x)`` for a batch, as an ``n x k`` array."""
    with no_grad():
        f = model.features(x).data
    return f.reshape(f.shape[0], -1)


def forward_logits(model: Model, x) -> np.ndarray:
    with no_grad():
        return model.logits(x).data


# ---------------------------------------------------------------------------
# checkpoints


def _header(model: Model) -> dict:
    return {
        "layers": [asdict(s) for s in model.layers],
        "input_shape": list(model.input_shape),
        "feature_end": model.feature_end,
        "trainable": list(model.trainable),
        "seed": model.seed,
        "metadata": model.metadata,
    }


def model_to_arrays(model: Model) -> tuple[dict, dict[str, np.ndarray]]:
    return _header(model), model.state()


def model_from_arrays(header: dict, arrays: dict[str, np.ndarray]) -> Model:
    layers = [LayerSpec(**d) for d in header["layers"]]
    input_shape = tuple(header["input_shape"])
    try:
        expected = _param_shapes(layers, input_shape)
    except ChainError as exc:
        raise ShapeError(f"checkpoint layer table is inconsistent: {exc}") from None
    params = {}
    for name, (wshape, bshape) in expected.items():
        for key, shape in ((f"{name}.weight", wshape), (f"{name}.bias", bshape)):
            if key not in arrays:
                raise ShapeError(f"checkpoint is missing {key}")
            if tuple(arrays[key].shape) != shape:
                raise ShapeError(f"{key}: stored shape {arrays[key].shape} but layer table implies {shape}")
        params[name] = (Tensor(arrays[f"{name}.weight"]), Tensor(arrays[f"{name}.bias"]))
    extra = set(arrays) - {f"{n}.{p}" for n in expected for p in ("weight", "bias")}
    if extra:
        raise ShapeError(f"checkpoint has unexpected arrays {sorted(extra)}")
    model = Model(layers, input_shape, params, int(header["feature_end"]), (), int(header["seed"]), dict(header["metadata"]))
    model.set_trainable(header["trainable"])
    return model


def save(model: Model, path) -> None:
    header, arrays = model_to_arrays(model)
    container.write(path, CHECKPOINT_MAGIC, header, arrays)


def load(path) -> Model:
    header, arrays = container.read(path, CHECKPOINT_MAGIC)
    return model_from_arrays(header, arrays)
