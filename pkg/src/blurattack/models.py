"""Small trainable classifiers: a 5-layer MLP and a 3-block CNN.

Networks are ordered layer stacks with named parameter tensors, a
designated feature tap (the output of the last layer before the classifier
head), seeded deterministic initialization, plain per-sample SGD training,
and a versioned binary file format. Parameter tensors are immutable; an
SGD step rebinds the parameter map to freshly built tensors.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass

import numpy as np

from .tensor import (
    ConfigError,
    DomainError,
    ShapeError,
    Tape,
    Tensor,
    backward,
    conv2d_forward,
    dense_forward,
    mul,
    relu,
    reshape,
    softmax_cross_entropy,
)


class TrainingError(RuntimeError):
    """Training diverged (non-finite loss)."""


@dataclass
class TrainReport:
    epochs: int
    train_accuracy: float
    test_accuracy: float
    seed: int


class Network:
    """Ordered differentiable layer stack with named parameters."""

    def __init__(self, layers, params, feature_layer, input_kind, input_shape,
                 num_classes):
        self.layers = layers            # list of layer spec dicts
        self.params = params            # name -> Tensor
        self.feature_layer = feature_layer
        self.input_kind = input_kind    # "image" or "vector"
        self.input_shape = tuple(input_shape)
        self.num_classes = num_classes
        self._validate()

    def _validate(self):
        if not 0 <= self.feature_layer < len(self.layers):
            raise ConfigError(
                f"feature tap {self.feature_layer} outside {len(self.layers)} layers")

    def param_count(self) -> int:
        return sum(t.size for t in self.params.values())

    def forward(self, x: Tensor, tape: Tape | None = None, want_features: bool = False):
        """Run the stack on one sample; optionally capture every layer output.

        Image networks take [C, H, W]; vector networks take a flat [D] (or
        [1, D]) input. Returns logits of shape [1, K], plus the per-layer
        outputs when requested.
        """
        if tuple(x.shape) not in (self.input_shape, (1, *self.input_shape)):
            raise ShapeError(
                f"input shape {x.shape} does not match network input {self.input_shape}")
        h = x
        if self.input_kind == "vector" and h.ndim == 1:
            h = reshape(h, (1, -1), tape)
        captured = []
        for i, spec in enumerate(self.layers):
            kind = spec["kind"]
            if kind == "conv":
                h = conv2d_forward(h, self.params[f"layer{i}.w"],
                                   padding=spec["padding"], tape=tape)
            elif kind == "relu":
                h = relu(h, tape=tape)
            elif kind == "flatten":
                h = reshape(h, (1, -1), tape)
            elif kind == "dense":
                h = dense_forward(h, self.params[f"layer{i}.w"],
                                  self.params[f"layer{i}.b"], tape=tape)
                gain = spec.get("gain")
                if gain is not None:
                    h = mul(h, Tensor(float(gain)), tape=tape)
            else:
                raise ConfigError(f"unknown layer kind {kind!r}")
            if want_features:
                captured.append(h)
        if want_features:
            return h, captured
        return h

    def features(self, x: Tensor, tape: Tape | None = None) -> Tensor:
        """Output of the designated feature tap (deepest pre-head features)."""
        _, captured = self.forward(x, tape=tape, want_features=True)
        return captured[self.feature_layer]


def build_mlp(widths=(32, 32, 32, 32), classes: int = 2, in_dim: int = 2,
              seed: int = 0) -> Network:
    """Fully connected classifier: len(widths) hidden ReLU layers plus a head."""
    rng = np.random.default_rng(seed)
    layers = []
    params = {}
    dims = [in_dim, *widths, classes]
    i = 0
    for d_in, d_out in zip(dims[:-1], dims[1:]):
        layers.append({"kind": "dense", "in": d_in, "out": d_out})
        params[f"layer{i}.w"] = Tensor(rng.normal(size=(d_in, d_out))
                                       * np.sqrt(2.0 / d_in))
        params[f"layer{i}.b"] = Tensor(np.zeros(d_out))
        i += 1
        if d_out != classes:
            layers.append({"kind": "relu"})
            i += 1
    feature_layer = len(layers) - 2  # last hidden activation
    return Network(layers, params, feature_layer, "vector", (in_dim,), classes)


def build_toycnn(channels=(8, 12, 12), classes: int = 5, in_shape=(3, 16, 16),
                 ksize: int = 3, trunk_scale: float = 0.1, head_gain: float = 400.0,
                 seed: int = 0) -> Network:
    """Three bias-free conv+ReLU blocks and a dense head on small images.

    The tap for feature-space analysis is the last activation before the
    head, so attacks and heatmaps read [channels[-1], H, W] maps.

    The conv trunk is initialized at ``trunk_scale`` times the
    variance-preserving scale and the head applies a fixed ``head_gain``
    to its logits. Together these keep the trunk (and therefore
    input-space gradients of feature-level losses) at low amplitude --
    the regime unit-step iterative attacks assume -- without starving the
    head of gradient signal during training.
    """
    rng = np.random.default_rng(seed)
    c_in, H, W = in_shape
    layers = []
    params = {}
    i = 0
    prev = c_in
    for c_out in channels:
        layers.append({"kind": "conv", "in": prev, "out": c_out,
                       "ksize": ksize, "padding": "reflect"})
        params[f"layer{i}.w"] = Tensor(
            rng.normal(size=(c_out, prev, ksize, ksize))
            * trunk_scale * np.sqrt(2.0 / (prev * ksize * ksize)))
        i += 1
        layers.append({"kind": "relu"})
        i += 1
        prev = c_out
    feature_layer = i - 1
    layers.append({"kind": "flatten"})
    i += 1
    flat = prev * H * W
    layers.append({"kind": "dense", "in": flat, "out": classes, "gain": head_gain})
    params[f"layer{i}.w"] = Tensor(rng.normal(size=(flat, classes))
                                   * np.sqrt(2.0 / flat))
    params[f"layer{i}.b"] = Tensor(np.zeros(classes))
    return Network(layers, params, feature_layer, "image", in_shape, classes)


def accuracy(net: Network, samples) -> float:
    hits = 0
    for s in samples:
        logits = net.forward(s.input)
        if int(np.argmax(logits.data)) == s.label:
            hits += 1
    return hits / len(samples)


def train(net: Network, data, target_accuracy: float | None = None,
          max_epochs: int = 200, lr: float = 0.01, seed: int = 0,
          eval_data=None) -> TrainReport:
    """Plain per-sample SGD with a fixed learning rate and seeded shuffling.

    Stops after the first epoch whose training accuracy reaches
    ``target_accuracy`` (when given) or after ``max_epochs``, whichever
    comes first.
    """
    if not data:
        raise ValueError("training data must be nonempty")
    rng = np.random.default_rng(seed)
    names = list(net.params)
    epochs_run = 0
    train_acc = 0.0
    for epoch in range(1, max_epochs + 1):
        order = rng.permutation(len(data))
        for idx in order:
            sample = data[idx]
            tape = Tape()
            for name in names:
                tape.watch_param(name, net.params[name])
            try:
                logits = net.forward(sample.input, tape=tape)
                loss = softmax_cross_entropy(logits, [sample.label], tape=tape)
            except DomainError as err:
                raise TrainingError(f"training diverged at epoch {epoch}") from err
            if not np.isfinite(loss.data):
                raise TrainingError(f"loss diverged at epoch {epoch}")
            bundle = backward(loss, wanted=names, include_input=False)
            for name in names:
                g = bundle.param_grads[name].data
                net.params[name] = Tensor(net.params[name].data - lr * g)
        epochs_run = epoch
        try:
            train_acc = accuracy(net, data)
        except DomainError as err:
            raise TrainingError(f"training diverged at epoch {epoch}") from err
        if target_accuracy is not None and train_acc >= target_accuracy:
            break
    test_acc = accuracy(net, eval_data) if eval_data else train_acc
    return TrainReport(epochs_run, train_acc, test_acc, seed)


# ---------------------------------------------------------------------------
# persistence: magic, version, layer table, little-endian float64 blobs

_MAGIC = b"BLURNET\x00"
_VERSION = 1


def save_network(net: Network, path):
    header = {
        "layers": net.layers,
        "feature_layer": net.feature_layer,
        "input_kind": net.input_kind,
        "input_shape": list(net.input_shape),
        "num_classes": net.num_classes,
        "params": [[name, list(net.params[name].shape)] for name in net.params],
    }
    blob = json.dumps(header, sort_keys=True, separators=(",", ":")).encode()
    with open(path, "wb") as fh:
        fh.write(_MAGIC)
        fh.write(struct.pack("<H", _VERSION))
        fh.write(struct.pack("<I", len(blob)))
        fh.write(blob)
        for name in net.params:
            fh.write(net.params[name].data.astype("<f8").tobytes())


def load_network(path) -> Network:
    with open(path, "rb") as fh:
        magic = fh.read(len(_MAGIC))
        if magic != _MAGIC:
            raise ConfigError(f"{path} is not a model file")
        (version,) = struct.unpack("<H", fh.read(2))
        if version != _VERSION:
            raise ConfigError(f"unsupported model format version {version}")
        (hlen,) = struct.unpack("<I", fh.read(4))
        header = json.loads(fh.read(hlen).decode())
        params = {}
        for name, shape in header["params"]:
            n = int(np.prod(shape))
            raw = fh.read(8 * n)
            if len(raw) != 8 * n:
                raise ConfigError(f"truncated parameter blob for {name}")
            params[name] = Tensor(np.frombuffer(raw, dtype="<f8").reshape(shape))
    return Network(header["layers"], params, header["feature_layer"],
                   header["input_kind"], header["input_shape"],
                   header["num_classes"])
