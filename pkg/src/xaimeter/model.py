"""A small NHWC convolutional classifier with hand-written reverse mode.

Images enter in raw pixel units ([0, 255] for real images); the network
maps them to ``x * input_scale - input_shift`` first, and every input gradient returned here is
taken with respect to the raw-unit input.
"""
import hashlib
import json
import struct
from dataclasses import dataclass, field

import numpy as np

from . import _kernels as K
from .numeric import argmax_index, random_stream


class ShapeError(ValueError):
    pass


class CheckpointError(ValueError):
    """Unreadable or truncated checkpoint."""


class CheckpointVersionError(CheckpointError):
    pass


class TrainingDivergedError(RuntimeError):
    pass


# ------------------------------------------------------------------ layers

class Layer:
    kind = ""
    name = ""

    def param_names(self):
        return []

    def config(self):
        return {"kind": self.kind, "name": self.name}


class Dense(Layer):
    kind = "dense"

    def __init__(self, weight, bias, name="dense"):
        self.weight = np.asarray(weight, dtype=np.float64)
        self.bias = np.asarray(bias, dtype=np.float64)
        self.name = name

    def param_names(self):
        return ["weight", "bias"]

    def config(self):
        return {**super().config(), "shape": list(self.weight.shape)}

    def forward(self, x):
        if x.ndim != 2 or x.shape[1] != self.weight.shape[0]:
            raise ShapeError(f"{self.name}: expected (N, {self.weight.shape[0]}), got {x.shape}")
        return x @ self.weight + self.bias, x

    def backward(self, dout, cache, need_params, guided):
        grads = {"weight": cache.T @ dout, "bias": dout.sum(axis=0)} if need_params else None
        return dout @ self.weight.T, grads


class Conv2D(Layer):
    kind = "conv2d"

    def __init__(self, weight, bias, pad=1, name="conv"):
        self.weight = np.ascontiguousarray(weight, dtype=np.float64)  # kh, kw, C_in, C_out
        self.bias = np.asarray(bias, dtype=np.float64)
        self.pad = int(pad)
        self.name = name

    def param_names(self):
        return ["weight", "bias"]

    def config(self):
        return {**super().config(), "shape": list(self.weight.shape), "pad": self.pad}

    def forward(self, x):
        if x.ndim != 4 or x.shape[3] != self.weight.shape[2]:
            raise ShapeError(f"{self.name}: expected (N, H, W, {self.weight.shape[2]}), got {x.shape}")
        return K.conv2d_forward(x, self.weight, self.bias, self.pad), x

    def backward(self, dout, cache, need_params, guided):
        dx = K.conv2d_backward_input(self.weight, dout, cache.shape, self.pad)
        grads = None
        if need_params:
            dw, db = K.conv2d_backward_params(cache, self.weight.shape, dout, self.pad)
            grads = {"weight": dw, "bias": db}
        return dx, grads


class ReLU(Layer):
    kind = "relu"

    def __init__(self, name="relu"):
        self.name = name

    def forward(self, x):
        mask = x > 0
        return np.where(mask, x, 0.0), mask

    def backward(self, dout, mask, need_params, guided):
        if guided:
            return np.where(mask & (dout > 0), dout, 0.0), None
        return np.where(mask, dout, 0.0), None


class MaxPool2D(Layer):
    kind = "max-pool"

    def __init__(self, size=2, name="maxpool"):
        self.size = int(size)
        self.name = name

    def config(self):
        return {**super().config(), "size": self.size}

    def forward(self, x):
        if x.shape[1] % self.size or x.shape[2] % self.size:
            raise ShapeError(f"{self.name}: spatial size {x.shape[1:3]} not divisible by {self.size}")
        out, idx = K.maxpool_forward(x, self.size)
        return out, (idx, x.shape)

    def backward(self, dout, cache, need_params, guided):
        idx, shape = cache
        return K.maxpool_backward(dout, idx, shape, self.size), None


class AvgPool2D(Layer):
    kind = "avg-pool"

    def __init__(self, size=2, name="avgpool"):
        self.size = int(size)
        self.name = name

    def config(self):
        return {**super().config(), "size": self.size}

    def forward(self, x):
        n, h, w, c = x.shape
        s = self.size
        if h % s or w % s:
            raise ShapeError(f"{self.name}: spatial size {(h, w)} not divisible by {s}")
        return x.reshape(n, h // s, s, w // s, s, c).mean(axis=(2, 4)), x.shape

    def backward(self, dout, shape, need_params, guided):
        s = self.size
        dx = np.repeat(np.repeat(dout, s, axis=1), s, axis=2) / (s * s)
        return dx.reshape(shape), None


class Flatten(Layer):
    kind = "flatten"

    def __init__(self, name="flatten"):
        self.name = name

    def forward(self, x):
        return x.reshape(x.shape[0], -1), x.shape

    def backward(self, dout, shape, need_params, guided):
        return dout.reshape(shape), None


_LAYER_TYPES = {cls.kind: cls for cls in (Dense, Conv2D, ReLU, MaxPool2D, AvgPool2D, Flatten)}


# -------------------------------------------------------------- classifier

@dataclass
class Classifier:
    layers: list
    input_shape: tuple
    n_classes: int
    input_scale: float = 1.0 / 255.0
    seed: int = 0
    input_shift: float = 0.0

    def __post_init__(self):
        self.input_shape = tuple(int(d) for d in self.input_shape)
        names = [layer.name for layer in self.layers]
        if len(set(names)) != len(names):
            raise ValueError(f"layer names must be unique: {names}")

    def layer(self, name):
        for layer in self.layers:
            if layer.name == name:
                return layer
        raise KeyError(f"unknown layer id {name!r}")

    @property
    def conv_layer_names(self):
        return [layer.name for layer in self.layers if layer.kind == "conv2d"]

    def parameters(self):
        """Yield ``(layer, param_name, array)`` in checkpoint order."""
        for layer in self.layers:
            for pname in layer.param_names():
                yield layer, pname, getattr(layer, pname)

    @property
    def n_params(self):
        return sum(p.size for _, _, p in self.parameters())

    def copy(self):
        layers = []
        for layer in self.layers:
            cfg = layer.config()
            params = {p: getattr(layer, p).copy() for p in layer.param_names()}
            layers.append(_build_layer(cfg, params))
        return Classifier(layers, self.input_shape, self.n_classes, self.input_scale, self.seed,
                          self.input_shift)

    # -- forward / backward

    def _batch(self, x):
        x = np.asarray(x, dtype=np.float64)
        if x.shape == self.input_shape:
            return x[None], True
        if x.ndim == len(self.input_shape) + 1 and x.shape[1:] == self.input_shape:
            return x, False
        raise ShapeError(f"expected input of shape {self.input_shape} (optionally batched), got {x.shape}")

    def trace(self, xb):
        """Forward pass over a batch, keeping every layer cache."""
        caches = []
        outputs = []
        h = xb * self.input_scale - self.input_shift
        for layer in self.layers:
            h, cache = layer.forward(h)
            caches.append(cache)
            outputs.append(h)
        if h.ndim != 2 or h.shape[1] != self.n_classes:
            raise ShapeError(f"network output {h.shape} does not match {self.n_classes} classes")
        return h, caches, outputs

    def backward(self, caches, dlogits, guided=False, need_params=False, stop_after=None):
        """Reverse pass from ``dlogits``.

        Returns ``(d_input_raw, param_grads)``; with ``stop_after`` set to a
        layer index the walk stops once the gradient w.r.t. that layer's
        output is known, and that gradient is returned instead.
        """
        d = dlogits
        grads = {}
        for i in range(len(self.layers) - 1, -1, -1):
            if stop_after is not None and i == stop_after:
                return d, grads
            layer = self.layers[i]
            d, g = layer.backward(d, caches[i], need_params, guided)
            if g is not None:
                grads[i] = g
        return d * self.input_scale, grads

    def forward(self, x):
        xb, single = self._batch(x)
        logits = self.trace(xb)[0]
        return logits[0] if single else logits

    def predict(self, x):
        logits = self.forward(x)
        if logits.ndim == 1:
            return argmax_index(logits)
        return np.array([argmax_index(row) for row in logits])

    def checksum(self):
        return hashlib.sha256(serialize_model(self)).hexdigest()


def softmax(logits):
    z = logits - logits.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


class ClassLogitModel:
    """The scalar sub-model ``g`` of a classifier for one target class.

    ``output="logit"`` (default) exposes the raw class logit; ``"prob"``
    exposes its softmax probability.
    """

    def __init__(self, classifier, target, output="logit"):
        if not 0 <= target < classifier.n_classes:
            raise ValueError(f"target {target} outside [0, {classifier.n_classes})")
        if output not in ("logit", "prob"):
            raise ValueError(f"unknown output {output!r}")
        self.classifier = classifier
        self.target = int(target)
        self.output = output

    @property
    def input_shape(self):
        return self.classifier.input_shape

    def _value(self, logits):
        if self.output == "logit":
            return logits[:, self.target]
        return softmax(logits)[:, self.target]

    def _seed(self, logits):
        d = np.zeros_like(logits)
        if self.output == "logit":
            d[:, self.target] = 1.0
        else:
            p = softmax(logits)
            pt = p[:, self.target:self.target + 1]
            d = -pt * p
            d[:, self.target] += pt[:, 0]
        return d

    def __call__(self, x):
        xb, single = self.classifier._batch(x)
        v = self._value(self.classifier.trace(xb)[0])
        return float(v[0]) if single else v

    def value_and_grad(self, x, guided=False):
        c = self.classifier
        xb, single = c._batch(x)
        logits, caches, _ = c.trace(xb)
        dx, _ = c.backward(caches, self._seed(logits), guided=guided)
        v = self._value(logits)
        if single:
            return float(v[0]), dx[0]
        return v, dx

    def grad(self, x):
        return self.value_and_grad(x)[1]

    def guided_grad(self, x):
        return self.value_and_grad(x, guided=True)[1]

    def conv_features_and_grads(self, x, layer):
        """Activations of conv ``layer`` and the gradient of g w.r.t. them.

        Both come back as (C, h, w) for a single image, (N, C, h, w) for a
        batch.
        """
        c = self.classifier
        names = [l.name for l in c.layers]
        if layer not in names:
            raise KeyError(f"unknown layer id {layer!r}")
        idx = names.index(layer)
        if c.layers[idx].kind != "conv2d":
            raise ValueError(f"layer {layer!r} is {c.layers[idx].kind}, not conv2d")
        xb, single = c._batch(x)
        logits, caches, outputs = c.trace(xb)
        dact, _ = c.backward(caches, self._seed(logits), stop_after=idx)
        feats = outputs[idx].transpose(0, 3, 1, 2)
        grads = dact.transpose(0, 3, 1, 2)
        if single:
            return feats[0], grads[0]
        return feats, grads


def grad_input(g, x):
    return g.grad(x)


def guided_grad_input(g, x):
    return g.guided_grad(x)


def conv_features_and_grads(g, x, layer):
    return g.conv_features_and_grads(x, layer)


def forward(c, x):
    return c.forward(x)


def predict(c, x):
    return c.predict(x)


# ------------------------------------------------------------ construction

def toy_cnn(n_classes, seed=0, size=32, channels=(8, 16), pool=4):
    """conv3x3 -> relu -> maxpool2 -> conv3x3 -> relu -> avgpool -> dense.

    He-normal weights, zero biases, drawn from ``seed``.
    """
    rng = random_stream(seed, "init")
    c1, c2 = channels
    if size % 2 or (size // 2) % pool:
        raise ValueError(f"size {size} incompatible with pooling")
    w1 = rng.normal(0, np.sqrt(2.0 / 27), size=(3, 3, 3, c1))
    w2 = rng.normal(0, np.sqrt(2.0 / (9 * c1)), size=(3, 3, c1, c2))
    side = size // 2 // pool
    d_in = side * side * c2
    w3 = rng.normal(0, np.sqrt(1.0 / d_in), size=(d_in, n_classes))
    layers = [
        Conv2D(w1, np.zeros(c1), pad=1, name="conv1"),
        ReLU(name="relu1"),
        MaxPool2D(2, name="pool1"),
        Conv2D(w2, np.zeros(c2), pad=1, name="conv2"),
        ReLU(name="relu2"),
        AvgPool2D(pool, name="pool2"),
        Flatten(name="flatten"),
        Dense(w3, np.zeros(n_classes), name="fc"),
    ]
    return Classifier(layers, (size, size, 3), n_classes, seed=seed, input_shift=0.5)


def linear_classifier(weights, biases=None, input_scale=1.0):
    """Affine classifier: one dense layer over the flattened input.

    ``weights`` has shape (K, *input_shape); logit k equals
    ``input_scale * <weights[k], x> + biases[k]``.
    """
    weights = np.asarray(weights, dtype=np.float64)
    k = weights.shape[0]
    input_shape = weights.shape[1:]
    biases = np.zeros(k) if biases is None else np.asarray(biases, dtype=np.float64)
    dense = Dense(weights.reshape(k, -1).T.copy(), biases, name="fc")
    return Classifier([Flatten(name="flatten"), dense], input_shape, k, input_scale=input_scale)


# ---------------------------------------------------------------- training

@dataclass
class TrainConfig:
    epochs: int = 30
    lr: float = 0.1
    batch_size: int = 16
    seed: int = 0
    momentum: float = 0.9

    def __post_init__(self):
        if self.epochs < 0:
            raise ValueError("epochs must be >= 0")
        if self.lr <= 0:
            raise ValueError("lr must be > 0")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")


@dataclass
class TrainResult:
    classifier: Classifier
    losses: list = field(default_factory=list)
    accuracies: list = field(default_factory=list)

    @property
    def final_accuracy(self):
        return self.accuracies[-1] if self.accuracies else float("nan")


def cross_entropy(logits, labels):
    z = logits - logits.max(axis=1, keepdims=True)
    logp = z - np.log(np.exp(z).sum(axis=1, keepdims=True))
    loss = -logp[np.arange(len(labels)), labels].mean()
    d = np.exp(logp)
    d[np.arange(len(labels)), labels] -= 1.0
    return loss, d / len(labels)


def train(classifier, images, labels, cfg):
    """Mini-batch SGD (with momentum) on softmax cross-entropy.

    Returns a new classifier; the input one is left untouched.
    """
    images = np.asarray(images, dtype=np.float64)
    labels = np.asarray(labels, dtype=np.int64)
    if len(images) != len(labels) or len(images) == 0:
        raise ValueError("images and labels must be non-empty and equally long")
    if labels.min() < 0 or labels.max() >= classifier.n_classes:
        raise ValueError("labels out of range")
    model = classifier.copy()
    params = list(model.parameters())
    velocity = [np.zeros_like(p) for _, _, p in params]
    result = TrainResult(model)
    n = len(images)
    for epoch in range(cfg.epochs):
        order = random_stream(cfg.seed, "shuffle", epoch).permutation(n)
        total, correct = 0.0, 0
        for start in range(0, n, cfg.batch_size):
            batch = order[start:start + cfg.batch_size]
            logits, caches, _ = model.trace(images[batch])
            loss, dlogits = cross_entropy(logits, labels[batch])
            if not np.isfinite(loss):
                raise TrainingDivergedError(
                    f"non-finite loss {loss} at epoch {epoch}, batch starting {start}; lower the learning rate")
            _, grads = model.backward(caches, dlogits, need_params=True)
            for j, (layer, pname, p) in enumerate(params):
                i = model.layers.index(layer)
                velocity[j] = cfg.momentum * velocity[j] - cfg.lr * grads[i][pname]
                p += velocity[j]
            total += loss * len(batch)
            correct += int((logits.argmax(axis=1) == labels[batch]).sum())
        for _, pname, p in params:
            if not np.all(np.isfinite(p)):
                raise TrainingDivergedError(f"non-finite parameters after epoch {epoch}")
        result.losses.append(total / n)
        result.accuracies.append(correct / n)
    return result


def accuracy(classifier, images, labels, batch_size=256):
    labels = np.asarray(labels)
    hits = 0
    for start in range(0, len(labels), batch_size):
        logits = classifier.forward(np.asarray(images[start:start + batch_size], dtype=np.float64))
        hits += int((logits.argmax(axis=1) == labels[start:start + batch_size]).sum())
    return hits / len(labels)


# -------------------------------------------------------------- checkpoint

MAGIC = b"XAIM"
FORMAT_VERSION = 1


def _build_layer(cfg, params):
    kind = cfg["kind"]
    if kind not in _LAYER_TYPES:
        raise CheckpointError(f"unknown layer kind {kind!r}")
    name = cfg["name"]
    if kind == "dense":
        return Dense(params["weight"], params["bias"], name=name)
    if kind == "conv2d":
        return Conv2D(params["weight"], params["bias"], pad=cfg["pad"], name=name)
    if kind in ("max-pool", "avg-pool"):
        return _LAYER_TYPES[kind](cfg["size"], name=name)
    return _LAYER_TYPES[kind](name=name)


def serialize_model(c):
    header = {
        "layers": [layer.config() for layer in c.layers],
        "input_shape": list(c.input_shape),
        "n_classes": c.n_classes,
        "input_scale": c.input_scale,
        "seed": c.seed,
        "input_shift": c.input_shift,
    }
    hbytes = json.dumps(header, sort_keys=True).encode("utf-8")
    flat = [np.ascontiguousarray(p, dtype="<f8").ravel() for _, _, p in c.parameters()]
    body = np.concatenate(flat).tobytes() if flat else b""
    return MAGIC + struct.pack("<II", FORMAT_VERSION, len(hbytes)) + hbytes + body


def deserialize_model(blob):
    if len(blob) < 12 or blob[:4] != MAGIC:
        raise CheckpointError("not an XAIM checkpoint (bad magic)")
    version, hlen = struct.unpack("<II", blob[4:12])
    if version != FORMAT_VERSION:
        raise CheckpointVersionError(f"checkpoint format version {version}, expected {FORMAT_VERSION}")
    if len(blob) < 12 + hlen:
        raise CheckpointError("checkpoint truncated inside header")
    try:
        header = json.loads(blob[12:12 + hlen].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CheckpointError(f"corrupt checkpoint header: {exc}") from None
    values = blob[12 + hlen:]
    shapes = []
    for cfg in header["layers"]:
        if cfg["kind"] == "dense":
            shapes.append((cfg, {"weight": tuple(cfg["shape"]), "bias": (cfg["shape"][1],)}))
        elif cfg["kind"] == "conv2d":
            shapes.append((cfg, {"weight": tuple(cfg["shape"]), "bias": (cfg["shape"][3],)}))
        else:
            shapes.append((cfg, {}))
    expected = sum(int(np.prod(s)) for _, d in shapes for s in d.values()) * 8
    if len(values) != expected:
        raise CheckpointError(f"checkpoint body has {len(values)} bytes, expected {expected}")
    flat = np.frombuffer(values, dtype="<f8").astype(np.float64)
    layers = []
    pos = 0
    for cfg, pshapes in shapes:
        params = {}
        for pname in ("weight", "bias"):
            if pname in pshapes:
                size = int(np.prod(pshapes[pname]))
                params[pname] = flat[pos:pos + size].reshape(pshapes[pname]).copy()
                pos += size
        layers.append(_build_layer(cfg, params))
    return Classifier(layers, tuple(header["input_shape"]), header["n_classes"],
                      header["input_scale"], header.get("seed", 0), header.get("input_shift", 0.0))


def save_model(c, path):
    blob = serialize_model(c)
    with open(path, "wb") as fh:
        fh.write(blob)
    return hashlib.sha256(blob).hexdigest()


def load_model(path):
    with open(path, "rb") as fh:
        return deserialize_model(fh.read())


def file_checksum(path):
    with open(path, "rb") as fh:
        return hashlib.sha256(fh.read()).hexdigest()
