"""Siamese-GAP network.

One trunk of four conv blocks (2, 3, 4, 4 layers of 3x3 conv + BN + ReLU) is
applied to the lateral and the flipped medial patch. After each selected
block a global pooling layer emits a vector; the vectors are concatenated
low-to-high level, the two patches' vectors are added, and an affine head
with softmax produces KL-0 / KL-2 probabilities.
"""
from __future__ import annotations

import copy
from dataclasses import asdict, dataclass, field

import numpy as np

from . import ndkernel as nk
from .errors import ConfigError, DimensionError, UsageError
from .imaging import resize_bilinear
from .optim import kaiming_init

POSITIONS = ("P1", "P2", "P3", "P4")

# pooling-position sets compared in the GAP/GMP ablation (all include P4)
ABLATION_POSITIONS = (
    ("P4",),
    ("P1", "P4"),
    ("P2", "P4"),
    ("P3", "P4"),
    ("P1", "P2", "P4"),
    ("P1", "P2", "P3", "P4"),
)


@dataclass
class ModelConfig:
    input_size: int = 128
    in_channels: int = 1
    block_channels: tuple = (32, 64, 128, 256)
    block_depths: tuple = (2, 3, 4, 4)
    pool_mode: str = "gap"
    pool_positions: tuple = POSITIONS
    dropout_rate: float = 0.2
    num_classes: int = 2
    kernel_size: int = 3
    dtype: str = "float64"

    @classmethod
    def desk(cls, **overrides):
        """CPU-sized preset: 64 px input, a quarter of the channel widths."""
        base = dict(input_size=64, block_channels=(8, 16, 32, 64))
        base.update(overrides)
        return cls(**base)

    @classmethod
    def from_dict(cls, d):
        unknown = set(d) - set(cls.__dataclass_fields__)
        if unknown:
            raise ConfigError(f"unknown model config keys: {sorted(unknown)}")
        d = dict(d)
        for key in ("block_channels", "block_depths", "pool_positions"):
            if key in d:
                d[key] = tuple(d[key])
        return cls(**d)

    def to_dict(self):
        d = asdict(self)
        for key in ("block_channels", "block_depths", "pool_positions"):
            d[key] = list(d[key])
        return d

    def validate(self):
        if len(self.block_channels) != 4 or len(self.block_depths) != 4:
            raise ConfigError("need exactly four blocks")
        if sum(self.block_depths) != 13:
            raise ConfigError(f"block depths must sum to 13, got {sum(self.block_depths)}")
        if any(c < 1 for c in self.block_channels) or any(d < 1 for d in self.block_depths):
            raise ConfigError("block channels and depths must be positive")
        if self.pool_mode not in ("gap", "gmp"):
            raise ConfigError(f"pool_mode must be 'gap' or 'gmp', got {self.pool_mode!r}")
        bad = set(self.pool_positions) - set(POSITIONS)
        if bad:
            raise ConfigError(f"unknown pool positions {sorted(bad)}")
        if "P4" not in self.pool_positions:
            raise ConfigError("P4 must always be a pool position")
        if not 0.0 <= self.dropout_rate < 1.0:
            raise ConfigError("dropout_rate must be in [0, 1)")
        if self.num_classes != 2:
            raise ConfigError("only the binary KL-0 / KL-2 head is supported")
        if self.input_size < 8:
            raise ConfigError("input_size must be >= 8 (three stride-2 stages)")
        if self.dtype not in ("float64", "float32"):
            raise ConfigError("dtype must be float64 or float32")
        return self

    @property
    def positions(self):
        """Selected positions in canonical P1..P4 order."""
        return tuple(p for p in POSITIONS if p in self.pool_positions)

    @property
    def pooled_width(self):
        return sum(self.block_channels[POSITIONS.index(p)] for p in self.positions)


@dataclass
class ConvUnit:
    name: str
    block: int
    stride: int
    c_in: int
    c_out: int


@dataclass
class Heatmap:
    values: np.ndarray
    layer: str

    @property
    def shape(self):
        return self.values.shape


class SiameseGapModel:
    """Parameters and buffers of one Siamese-GAP network.

    Both branches call :meth:`trunk` with the same parameter tensors, so the
    sharing is structural and gradients from both passes accumulate.
    """

    def __init__(self, config: ModelConfig):
        self.config = config.validate()
        self.dtype = np.dtype(config.dtype)
        self.units: list[ConvUnit] = []
        c_in = config.in_channels
        for b, (c_out, depth) in enumerate(zip(config.block_channels, config.block_depths)):
            for layer in range(depth):
                stride = 2 if (b > 0 and layer == 0) else 1
                self.units.append(ConvUnit(f"b{b + 1}.l{layer + 1}", b, stride, c_in, c_out))
                c_in = c_out
        self.params: dict[str, nk.Tensor] = {}
        self.bn_stats: dict[str, nk.BatchNormStats] = {}
        self.input_mean = 0.0
        self.input_std = 1.0

    # ------------------------------------------------------------ structure
    @property
    def block_ends(self):
        """Name of the last conv unit in each block."""
        ends = {}
        for u in self.units:
            ends[u.block] = u.name
        return [ends[b] for b in range(4)]

    def named_buffers(self):
        out = {}
        for name, st in self.bn_stats.items():
            out[f"{name}.bn.running_mean"] = st.mean
            out[f"{name}.bn.running_var"] = st.var
        return out

    def zero_grad(self):
        for p in self.params.values():
            p.grad = None

    def param_count(self):
        return int(sum(p.size for p in self.params.values()))

    def clone(self):
        return copy.deepcopy(self)

    # --------------------------------------------------------------- forward
    def _standardize(self, x):
        x = x.data if isinstance(x, nk.Tensor) else np.asarray(x)
        x = x.astype(self.dtype, copy=False)
        if x.ndim == 2:
            x = x[None, None]
        elif x.ndim == 3:
            x = x[:, None]
        return nk.Tensor._wrap((x - self.input_mean) / self.input_std)

    def trunk(self, x, training=False, capture=None):
        """Run one branch. Returns the concatenated pooled vector [N, width].

        ``capture`` names a conv unit whose post-ReLU activation is returned
        as a second value with its gradient retained.
        """
        cfg = self.config
        pool = nk.global_average_pool if cfg.pool_mode == "gap" else nk.global_max_pool
        ends = self.block_ends
        pooled = []
        captured = None
        h = x
        for u in self.units:
            h = nk.conv2d(
                h,
                self.params[f"{u.name}.conv.weight"],
                self.params[f"{u.name}.conv.bias"],
                stride=u.stride,
                padding=cfg.kernel_size // 2,
            )
            h = nk.batch_norm(
                h,
                self.params[f"{u.name}.bn.gamma"],
                self.params[f"{u.name}.bn.beta"],
                self.bn_stats[u.name],
                training=training,
            )
            h = nk.relu(h)
            if u.name == capture:
                captured = h.retain_grad()
            if u.name == ends[u.block] and POSITIONS[u.block] in cfg.pool_positions:
                pooled.append(pool(h))
        vec = pooled[0] if len(pooled) == 1 else nk.concat(pooled, axis=1)
        if capture is not None:
            return vec, captured
        return vec

    def forward(self, lateral, medial, training=False, rng=None, capture=None):
        """Return ``(probs, logits)``; both [N, 2]."""
        a = self._standardize(lateral)
        b = self._standardize(medial)
        if a.shape != b.shape:
            raise DimensionError(f"lateral {a.shape} and medial {b.shape} differ")
        s = self.config.input_size
        if a.shape[1:] != (self.config.in_channels, s, s):
            raise DimensionError(
                f"expected patches [N, {self.config.in_channels}, {s}, {s}], got {a.shape}"
            )
        if capture is not None:
            fa, act_a = self.trunk(a, training, capture)
            fb, act_b = self.trunk(b, training, capture)
        else:
            fa = self.trunk(a, training)
            fb = self.trunk(b, training)
        fused = nk.add(fa, fb)
        if training and self.config.dropout_rate > 0:
            if rng is None:
                raise UsageError("training-mode forward with dropout needs an rng")
            fused = nk.dropout(fused, self.config.dropout_rate, rng, training=True)
        logits = nk.affine(fused, self.params["head.weight"], self.params["head.bias"])
        probs = nk.softmax(logits)
        if capture is not None:
            return probs, logits, (act_a, act_b)
        return probs, logits

    # ----------------------------------------------------------- state I/O
    def state_arrays(self):
        out = {name: p.data for name, p in self.params.items()}
        out.update(self.named_buffers())
        return out

    def load_arrays(self, arrays):
        for name, p in self.params.items():
            if name not in arrays:
                raise ConfigError(f"missing parameter {name}")
            arr = np.asarray(arrays[name], dtype=self.dtype)
            if arr.shape != p.shape:
                raise DimensionError(f"{name}: shape {arr.shape} != {p.shape}")
            p.data = arr.copy()
        for name, st in self.bn_stats.items():
            st.mean = np.asarray(arrays[f"{name}.bn.running_mean"], dtype=self.dtype).copy()
            st.var = np.asarray(arrays[f"{name}.bn.running_var"], dtype=self.dtype).copy()


def build_model(config: ModelConfig, init_seed=0):
    """Allocate and Kaiming-initialize a model (biases 0, BN gamma 1 / beta 0)."""
    model = SiameseGapModel(config)
    rng = np.random.default_rng(init_seed)
    dt = model.dtype
    k = config.kernel_size
    for u in model.units:
        fan_in = u.c_in * k * k
        model.params[f"{u.name}.conv.weight"] = nk.Tensor(
            kaiming_init((u.c_out, u.c_in, k, k), fan_in, rng, dtype=dt), requires_grad=True
        )
        model.params[f"{u.name}.conv.bias"] = nk.Tensor(np.zeros(u.c_out, dt), requires_grad=True)
        model.params[f"{u.name}.bn.gamma"] = nk.Tensor(np.ones(u.c_out, dt), requires_grad=True)
        model.params[f"{u.name}.bn.beta"] = nk.Tensor(np.zeros(u.c_out, dt), requires_grad=True)
        model.bn_stats[u.name] = nk.BatchNormStats(u.c_out, dt)
    width = config.pooled_width
    model.params["head.weight"] = nk.Tensor(
        kaiming_init((config.num_classes, width), width, rng, dtype=dt), requires_grad=True
    )
    model.params["head.bias"] = nk.Tensor(np.zeros(config.num_classes, dt), requires_grad=True)
    return model


def forward(model, lateral, medial, mode="eval", rng=None):
    if mode not in ("train", "eval"):
        raise UsageError(f"mode must be 'train' or 'eval', got {mode!r}")
    return model.forward(lateral, medial, training=(mode == "train"), rng=rng)


def param_count(model):
    return model.param_count()


def predict(model, lateral, medial, batch_size=64):
    """Eval-mode probabilities for stacked patches, in batches. Returns [N, 2] array."""
    n = len(lateral)
    out = np.empty((n, model.config.num_classes), dtype=model.dtype)
    for start in range(0, n, batch_size):
        sl = slice(start, start + batch_size)
        probs, _ = model.forward(lateral[sl], medial[sl], training=False)
        out[sl] = probs.data
    return out


def gradcam(model, lateral, medial, target_class, layer=None):
    """Grad-CAM heatmaps for one patch pair, one map per patch.

    The score is the target-class logit; channel weights are the spatial mean
    of its gradient at ``layer`` (default: last conv of block 4). Each map is
    ReLU(sum_k w_k A_k), bilinearly upsampled to the patch size and divided
    by its maximum (left at zero when identically zero).
    """
    if target_class not in (0, 1):
        raise UsageError(f"target_class must be 0 or 1, got {target_class}")
    valid = {u.name for u in model.units}
    layer = layer or model.block_ends[3]
    if layer not in valid:
        raise UsageError(f"layer {layer!r} has no spatial extent; choose one of the conv units")
    lateral = np.asarray(lateral.data if isinstance(lateral, nk.Tensor) else lateral)
    medial = np.asarray(medial.data if isinstance(medial, nk.Tensor) else medial)
    if lateral.ndim == 2:
        lateral, medial = lateral[None, None], medial[None, None]
    if lateral.shape[0] != 1:
        raise UsageError("gradcam takes a single patch pair")
    model.zero_grad()
    with nk.Tape() as tape:
        _, logits, (act_a, act_b) = model.forward(lateral, medial, training=False, capture=layer)
        score = nk.tsum(nk.gather(logits, np.array([target_class])))
    tape.backward(score)
    model.zero_grad()
    size = model.config.input_size
    maps = []
    for act in (act_a, act_b):
        A = act.data[0]
        dA = act.grad[0] if act.grad is not None else np.zeros_like(A)
        weights = dA.mean(axis=(1, 2))
        cam = np.maximum(np.tensordot(weights, A, axes=(0, 0)), 0.0)
        cam = np.maximum(resize_bilinear(cam, size, size), 0.0)
        peak = cam.max()
        cam = cam / peak if peak > 0 else np.zeros_like(cam)
        maps.append(Heatmap(values=cam, layer=layer))
    return maps[0], maps[1]
