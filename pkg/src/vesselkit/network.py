"""A five-layer fully convolutional network without any down- or up-sampling.

Every layer is a same-size zero-padded convolution (cross-hair or full 3-D)
followed by an activation; the last layer is a single-channel sigmoid.  The
module also holds the plain SGD trainer, full-volume prediction and the
parameter checkpoint format.
"""

from __future__ import annotations

import csv
import io
import json
import math
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Iterable, Optional, Sequence

import numpy as np

from vesselkit import loss as losses
from vesselkit.convolution import (
    CROSSHAIR,
    FULL3D,
    MODES,
    CrossHairKernel,
    Kernel3D,
    conv_layer_backward,
    conv_layer_forward,
)
from vesselkit.metrics import confusion, pr_ratio, precision_recall_dice
from vesselkit.rng import substream
from vesselkit.volume import LabelVolume, Volume3D, extract_patches

ACTIVATIONS = ("tanh", "relu", "sigmoid", "none")
LOSSES = ("l1", "l1l2")


@dataclass(frozen=True)
class LayerSpec:
    in_channels: int
    out_channels: int
    kernel_dims: tuple[int, int, int] = (3, 3, 3)
    activation: str = "tanh"
    mode: str = CROSSHAIR
    plane_weights: tuple[float, float, float] = (1.0, 1.0, 1.0)

    def __post_init__(self):
        dims = tuple(int(d) for d in self.kernel_dims)
        if len(dims) != 3 or any(d < 1 or d % 2 == 0 for d in dims):
            raise ValueError(f"kernel dims must be three odd positive ints, got {dims}")
        if self.in_channels < 1 or self.out_channels < 1:
            raise ValueError("channel counts must be positive")
        if self.activation not in ACTIVATIONS:
            raise ValueError(f"unknown activation {self.activation!r}")
        if self.mode not in MODES:
            raise ValueError(f"unknown mode {self.mode!r}")
        object.__setattr__(self, "kernel_dims", dims)
        object.__setattr__(self, "plane_weights", tuple(float(b) for b in self.plane_weights))

    @property
    def weight_count(self) -> int:
        kx, ky, kz = self.kernel_dims
        per_pair = kx * ky * kz if self.mode == FULL3D else ky * kz + kx * kz + kx * ky
        return self.in_channels * self.out_channels * per_pair

    @property
    def init_bound(self) -> float:
        kx, ky, kz = self.kernel_dims
        return 1.0 / math.sqrt(kx * ky * kz)


@dataclass(frozen=True)
class NetworkSpec:
    layers: tuple[LayerSpec, ...]

    def __post_init__(self):
        layers = tuple(self.layers)
        if not layers:
            raise ValueError("network needs at least one layer")
        for a, b in zip(layers, layers[1:]):
            if a.out_channels != b.in_channels:
                raise ValueError(
                    f"channel chain broken: {a.out_channels} -> {b.in_channels}"
                )
        last = layers[-1]
        if last.activation != "sigmoid" or last.out_channels != 1:
            raise ValueError("last layer must be a single-channel sigmoid")
        object.__setattr__(self, "layers", layers)

    @classmethod
    def default(cls, mode: str = CROSSHAIR, in_channels: int = 1,
                hidden: str = "tanh") -> "NetworkSpec":
        """Widths 5, 10, 20, 50 with kernels 3, 5, 5, 3 and a 1x1x1 sigmoid head.

        The head is a plain 1x1x1 convolution in both modes; a cross-hair
        version of it would hold three redundant centre weights.
        """
        widths = [in_channels, 5, 10, 20, 50]
        ks = [3, 5, 5, 3]
        layers = [
            LayerSpec(widths[i], widths[i + 1], (ks[i],) * 3, hidden, mode)
            for i in range(4)
        ]
        layers.append(LayerSpec(50, 1, (1, 1, 1), "sigmoid", FULL3D))
        return cls(tuple(layers))

    @classmethod
    def compact(cls, mode: str = CROSSHAIR, in_channels: int = 1, width: int = 4,
                hidden: str = "tanh") -> "NetworkSpec":
        """Two hidden 3x3x3 layers and a sigmoid head; cheap enough for long runs."""
        return cls((
            LayerSpec(in_channels, width, (3, 3, 3), hidden, mode),
            LayerSpec(width, width, (3, 3, 3), hidden, mode),
            LayerSpec(width, 1, (1, 1, 1), "sigmoid", FULL3D),
        ))

    @property
    def in_channels(self) -> int:
        return self.layers[0].in_channels

    @property
    def receptive_radius(self) -> int:
        return sum(max(layer.kernel_dims) // 2 for layer in self.layers)

    def parameter_count(self) -> tuple[int, int]:
        """(weights, biases)."""
        return (sum(l.weight_count for l in self.layers),
                sum(l.out_channels for l in self.layers))

    def to_dict(self) -> dict:
        return {"layers": [
            {**asdict(l), "kernel_dims": list(l.kernel_dims),
             "plane_weights": list(l.plane_weights)}
            for l in self.layers
        ]}

    @classmethod
    def from_dict(cls, d: dict) -> "NetworkSpec":
        return cls(tuple(
            LayerSpec(
                int(l["in_channels"]), int(l["out_channels"]), tuple(l["kernel_dims"]),
                l["activation"], l["mode"], tuple(l.get("plane_weights", (1.0, 1.0, 1.0))),
            )
            for l in d["layers"]
        ))


@dataclass
class Parameters:
    """Per-layer kernels (leading axes ``(out, in)``) and biases."""

    kernels: list
    biases: list
    seed: Optional[int] = None

    def arrays(self) -> list[np.ndarray]:
        """All parameter arrays in checkpoint order."""
        out = []
        for k, b in zip(self.kernels, self.biases):
            out.extend(k.planes if isinstance(k, CrossHairKernel) else (k.weights,))
            out.append(b)
        return out

    def to_vector(self) -> np.ndarray:
        return np.concatenate([a.ravel() for a in self.arrays()])

    def with_arrays(self, arrays: Sequence[np.ndarray]) -> "Parameters":
        it = iter(arrays)
        kernels, biases = [], []
        for k in self.kernels:
            if isinstance(k, CrossHairKernel):
                kernels.append(CrossHairKernel(next(it), next(it), next(it), k.plane_weights))
            else:
                kernels.append(Kernel3D(next(it)))
            biases.append(next(it))
        return Parameters(kernels, biases, self.seed)

    def from_vector(self, vec: np.ndarray) -> "Parameters":
        arrays, pos = [], 0
        for a in self.arrays():
            arrays.append(np.asarray(vec[pos:pos + a.size], dtype=a.dtype).reshape(a.shape).copy())
            pos += a.size
        if pos != len(vec):
            raise ValueError(f"vector has {len(vec)} entries, parameters need {pos}")
        return self.with_arrays(arrays)

    def astype(self, dtype) -> "Parameters":
        return self.with_arrays([a.astype(dtype) for a in self.arrays()])

    def copy(self) -> "Parameters":
        return self.with_arrays([a.copy() for a in self.arrays()])

    @property
    def dtype(self):
        return self.biases[0].dtype


def _check_params(spec: NetworkSpec, params: Parameters):
    if len(params.kernels) != len(spec.layers):
        raise ValueError("parameter/spec layer count mismatch")
    for layer, k in zip(spec.layers, params.kernels):
        want = CrossHairKernel if layer.mode == CROSSHAIR else Kernel3D
        if not isinstance(k, want) or k.grid != (layer.out_channels, layer.in_channels) \
                or k.dims != layer.kernel_dims:
            raise ValueError("parameters do not match the network spec")


def init_parameters(spec: NetworkSpec, seed: int = 0, dtype=np.float32) -> Parameters:
    """Uniform weights in ``(-b, b)``, ``b = 1/sqrt(kx ky kz)``; zero biases.

    Cross-hair layers use the bound of the 3-D kernel they stand in for.
    """
    rng = substream(seed, "init")
    dtype = np.dtype(dtype)

    def draw(shape, bound):
        w = rng.uniform(-bound, bound, size=shape).astype(dtype)
        # keep the open interval after rounding to the storage dtype
        edge = np.abs(w.astype(np.float64)) >= bound
        if edge.any():
            inner = np.nextafter(dtype.type(bound), dtype.type(0))
            while float(inner) >= bound:
                inner = np.nextafter(inner, dtype.type(0))
            w[edge] = np.sign(w[edge]) * inner
        return w

    kernels, biases = [], []
    for layer in spec.layers:
        b = layer.init_bound
        grid = (layer.out_channels, layer.in_channels)
        kx, ky, kz = layer.kernel_dims
        if layer.mode == CROSSHAIR:
            kernels.append(CrossHairKernel(
                draw(grid + (ky, kz), b), draw(grid + (kx, kz), b), draw(grid + (kx, ky), b),
                layer.plane_weights,
            ))
        else:
            kernels.append(Kernel3D(draw(grid + (kx, ky, kz), b)))
        biases.append(np.zeros(layer.out_channels, dtype))
    return Parameters(kernels, biases, seed)


def zero_parameters(spec: NetworkSpec, dtype=np.float32) -> Parameters:
    params = init_parameters(spec, 0, dtype)
    return params.with_arrays([np.zeros_like(a) for a in params.arrays()])


def _activate(z: np.ndarray, kind: str) -> np.ndarray:
    if kind == "tanh":
        return np.tanh(z, out=z)
    if kind == "relu":
        return np.maximum(z, 0, out=z)
    if kind == "sigmoid":
        p = 0.5 * (1.0 + np.tanh(0.5 * z))
        return p
    return z


def _activation_grad(a: np.ndarray, kind: str) -> np.ndarray:
    if kind == "tanh":
        return 1.0 - a * a
    if kind == "relu":
        return (a > 0).astype(a.dtype)
    if kind == "sigmoid":
        return a * (1.0 - a)
    return np.ones_like(a)


def _open_unit(p: np.ndarray) -> np.ndarray:
    """Clip saturated sigmoid outputs into the open interval (0, 1)."""
    info = np.finfo(p.dtype)
    return np.clip(p, info.tiny, 1.0 - info.epsneg)


def as_channels(inputs, channels: Optional[int] = None) -> np.ndarray:
    """Stack a volume, array or list of volumes into ``(C, nx, ny, nz)``."""
    if isinstance(inputs, (Volume3D, LabelVolume)):
        arr = inputs.data[None]
    elif isinstance(inputs, (list, tuple)):
        parts = [np.asarray(getattr(v, "data", v)) for v in inputs]
        shapes = {p.shape for p in parts}
        if len(shapes) != 1:
            raise ValueError(f"input channels have different shapes: {sorted(shapes)}")
        arr = np.stack(parts)
    else:
        arr = np.asarray(inputs)
        if arr.ndim == 3:
            arr = arr[None]
    if arr.ndim != 4:
        raise ValueError(f"expected (channels, nx, ny, nz) input, got shape {arr.shape}")
    if channels is not None and arr.shape[0] != channels:
        raise ValueError(f"network expects {channels} input channels, got {arr.shape[0]}")
    return arr


def _forward_trace(spec: NetworkSpec, params: Parameters, x: np.ndarray):
    _check_params(spec, params)
    dt = params.dtype
    acts = [x.astype(dt, copy=False)]
    for layer, k, b in zip(spec.layers, params.kernels, params.biases):
        z = conv_layer_forward(acts[-1], k, b)
        acts.append(_activate(z, layer.activation))
    return acts


def forward(spec: NetworkSpec, params: Parameters, inputs) -> np.ndarray:
    """Probability map with the spatial shape of ``inputs``."""
    x = as_channels(inputs, spec.in_channels)
    acts = _forward_trace(spec, params, x)
    return _open_unit(acts[-1][0])


def _backprop(spec, params, acts, dz_last) -> Parameters:
    grads_k = [None] * len(spec.layers)
    grads_b = [None] * len(spec.layers)
    dz = dz_last[None].astype(params.dtype, copy=False)
    for idx in range(len(spec.layers) - 1, -1, -1):
        gx, gk, gb = conv_layer_backward(acts[idx], params.kernels[idx], dz, need_input_grad=idx > 0)
        grads_k[idx] = gk
        grads_b[idx] = gb
        if idx > 0:
            dz = gx * _activation_grad(acts[idx], spec.layers[idx - 1].activation)
    return Parameters(grads_k, grads_b, params.seed)


def backward_from_upstream(spec: NetworkSpec, params: Parameters, inputs, grad_probs) -> Parameters:
    """Parameter gradients of ``sum(grad_probs * forward(...))``."""
    x = as_channels(inputs, spec.in_channels)
    acts = _forward_trace(spec, params, x)
    p = acts[-1][0]
    g = np.asarray(grad_probs, dtype=np.float64)
    if g.shape != p.shape:
        raise ValueError(f"upstream shape {g.shape} != output shape {p.shape}")
    return _backprop(spec, params, acts, g * _activation_grad(p, "sigmoid"))


def backward(spec: NetworkSpec, params: Parameters, inputs, labels, loss: str = "l1l2",
             threshold: float = 0.5):
    """Exact gradients of the corrected loss (``l1l2``) or of ``l1`` alone.

    The false-prediction partition and the gammas are constants of the
    step.  The chain through the sigmoid is taken on the logits
    (``d(-log P)/dz = -(1 - P)``, ``d(-log(1-P))/dz = P``) so saturated
    outputs still get a gradient.

    Returns ``(grads, loss_value, probs)``.
    """
    if loss not in LOSSES:
        raise ValueError(f"unknown loss {loss!r}")
    x = as_channels(inputs, spec.in_channels)
    y = np.asarray(getattr(labels, "data", labels))
    if y.shape != x.shape[1:]:
        raise ValueError(f"labels shape {y.shape} != input shape {x.shape[1:]}")
    acts = _forward_trace(spec, params, x)
    p = acts[-1][0]
    probs = _open_unit(p)
    value = losses.balanced_fp_loss(probs, y, threshold)
    if loss == "l1":
        value = replace(value, total=value.l1)
    a, b, _ = losses.loss_weights(probs, y, threshold, correction=(loss == "l1l2"))
    pf = p.astype(np.float64).ravel()
    dz = (-a * (1.0 - pf) + b * pf).reshape(p.shape)
    return _backprop(spec, params, acts, dz), value, probs


def predict(spec: NetworkSpec, params: Parameters, vol, extra_channels: Optional[Iterable] = None) -> Volume3D:
    """Single full-volume pass; extra channels are stacked after ``vol``."""
    chans = [vol] + list(extra_channels or [])
    x = as_channels(chans, spec.in_channels)
    spacing = getattr(vol, "spacing", (1.0, 1.0, 1.0))
    return Volume3D(forward(spec, params, x).astype(np.float32), spacing)


# ---------------------------------------------------------------------------
# training
# ---------------------------------------------------------------------------


@dataclass
class TrainConfig:
    base_lr: float = 0.01
    decay: float = 0.99
    decay_every: int = 200
    patch_size: int = 64
    iterations: int = 1000
    loss_threshold: float = 0.5
    log_every: int = 5
    seed: int = 0
    loss: str = "l1l2"

    def __post_init__(self):
        if self.base_lr < 0 or not 0 < self.decay <= 1:
            raise ValueError("need base_lr >= 0 and decay in (0, 1]")
        if self.decay_every < 1 or self.patch_size < 1 or self.log_every < 1:
            raise ValueError("decay_every, patch_size and log_every must be positive")
        if self.iterations < 0:
            raise ValueError("iterations must be >= 0")
        if self.loss not in LOSSES:
            raise ValueError(f"unknown loss {self.loss!r}")


def lr_schedule(iteration: int, cfg: TrainConfig) -> float:
    """Step decay: ``base_lr * decay ** (iteration // decay_every)``."""
    if iteration < 0:
        raise ValueError("iteration must be >= 0")
    return cfg.base_lr * cfg.decay ** (iteration // cfg.decay_every)


@dataclass(frozen=True)
class LogEntry:
    iteration: int
    l1: float
    l2: float
    total: float
    gamma1: float
    gamma2: float
    precision: Optional[float]
    recall: Optional[float]
    pr_ratio: Optional[float]
    lr: float


@dataclass
class TrainLog:
    entries: list[LogEntry] = field(default_factory=list)

    FIELDS = ("iteration", "l1", "l2", "total", "gamma1", "gamma2",
              "precision", "recall", "pr_ratio", "lr")

    def append(self, entry: LogEntry):
        if self.entries and entry.iteration <= self.entries[-1].iteration:
            raise ValueError("log iterations must increase")
        self.entries.append(entry)

    def __len__(self):
        return len(self.entries)

    def column(self, name: str) -> list:
        return [getattr(e, name) for e in self.entries]

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(self.FIELDS)
        for e in self.entries:
            w.writerow(["" if v is None else repr(v) for v in (getattr(e, f) for f in self.FIELDS)])
        return buf.getvalue()

    @classmethod
    def from_csv(cls, text: str) -> "TrainLog":
        rows = list(csv.DictReader(io.StringIO(text)))
        log = cls()
        for r in rows:
            vals = {k: (None if r[k] == "" else float(r[k])) for k in cls.FIELDS}
            vals["iteration"] = int(vals["iteration"])
            log.append(LogEntry(**vals))
        return log


def _training_patches(dataset, size: int, channels: int):
    patches = []
    for inputs, labels in dataset:
        x = as_channels(inputs, channels)
        y = np.asarray(getattr(labels, "data", labels))
        if y.shape != x.shape[1:]:
            raise ValueError(f"labels shape {y.shape} != input shape {x.shape[1:]}")
        gx = extract_patches(x, size)
        gy = extract_patches(y, size)
        patches.extend(zip(gx.patches, gy.patches))
    return patches


def sgd_step(params: Parameters, grads: Parameters, lr: float) -> Parameters:
    """Plain SGD, no momentum and no regularization."""
    arrays = [p - np.asarray(lr, p.dtype) * g.astype(p.dtype, copy=False)
              for p, g in zip(params.arrays(), grads.arrays())]
    return params.with_arrays(arrays)


def train(spec: NetworkSpec, params: Parameters, dataset, cfg: TrainConfig, callback=None):
    """SGD over non-overlapping patches visited in a seeded shuffled order.

    ``dataset`` is a list of ``(inputs, labels)`` pairs.  One patch per step.
    Entries are logged every ``cfg.log_every`` steps and after the final
    step, using the prediction made before that step's update.
    """
    if not dataset:
        raise ValueError("empty dataset")
    _check_params(spec, params)
    patches = _training_patches(dataset, cfg.patch_size, spec.in_channels)
    rng = substream(cfg.seed, "shuffle")
    log = TrainLog()
    params = params.copy()
    order: list[int] = []
    for it in range(cfg.iterations):
        if not order:
            order = [int(i) for i in rng.permutation(len(patches))]
        x, y = patches[order.pop(0)]
        lr = lr_schedule(it, cfg)
        grads, value, probs = backward(spec, params, x, y, cfg.loss, cfg.loss_threshold)
        step = it + 1
        if step % cfg.log_every == 0 or step == cfg.iterations:
            c = confusion(probs >= cfg.loss_threshold, y)
            prec, rec, _ = precision_recall_dice(c)
            log.append(LogEntry(step, value.l1, value.l2, value.total, value.gamma1,
                                value.gamma2, prec, rec, pr_ratio(prec, rec), lr))
        if lr != 0.0:
            params = sgd_step(params, grads, lr)
        if callback is not None:
            callback(step, value, params)
    return params, log


# ---------------------------------------------------------------------------
# checkpoints
# ---------------------------------------------------------------------------


def _ckpt_paths(path) -> tuple[Path, Path]:
    p = Path(path)
    if p.suffix in (".json", ".raw"):
        p = p.with_suffix("")
    return p.with_name(p.name + ".json"), p.with_name(p.name + ".raw")


def save_checkpoint(path, spec: NetworkSpec, params: Parameters, iteration: int = 0,
                    meta: Optional[dict] = None) -> tuple[Path, Path]:
    """JSON header plus little-endian float32 payload (layer, plane, bias order)."""
    header_path, raw_path = _ckpt_paths(path)
    arrays = params.arrays()
    header = {
        "spec": spec.to_dict(),
        "seed": params.seed,
        "iteration": int(iteration),
        "dtype": "f32",
        "endianness": "little",
        "shapes": [list(a.shape) for a in arrays],
        "meta": meta or {},
    }
    payload = b"".join(np.ascontiguousarray(a, dtype="<f4").tobytes() for a in arrays)
    header_path.parent.mkdir(parents=True, exist_ok=True)
    header_path.write_text(json.dumps(header, indent=2, sort_keys=True) + "\n")
    raw_path.write_bytes(payload)
    return header_path, raw_path


def load_checkpoint(path):
    """Return ``(spec, params, header)``."""
    header_path, raw_path = _ckpt_paths(path)
    header = json.loads(header_path.read_text())
    spec = NetworkSpec.from_dict(header["spec"])
    template = zero_parameters(spec)
    shapes = [tuple(s) for s in header["shapes"]]
    if shapes != [a.shape for a in template.arrays()]:
        raise ValueError(f"{header_path}: parameter shapes do not match the spec")
    data = np.frombuffer(raw_path.read_bytes(), dtype="<f4")
    if data.size != sum(int(np.prod(s)) for s in shapes):
        raise ValueError(f"{raw_path}: payload size does not match the header")
    params = template.from_vector(data.astype(np.float32))
    params.seed = header.get("seed")
    return spec, params, header
