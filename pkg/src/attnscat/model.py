"""Scattering attention network, the small convolutional baseline, and checkpoints."""
from __future__ import annotations

import io
from dataclasses import asdict, dataclass, fields

import numpy as np

from . import tensor as T
from .attention import REDUCTION, AttentionModule, AttentionOutput
from .data import TensorFileError, atomic_write_bytes, read_tensor, tensor_to_bytes
from .filterbank import build_morlet_bank
from .scattering import n_paths, path_table, scatter2d, scatter_numpy
from .tensor import Tensor

CKPT_MAGIC = "ATTNSCAT-CHECKPOINT 1"


class CheckpointError(TensorFileError):
    """Malformed or mismatched checkpoint file."""


@dataclass
class ModelConfig:
    task: str = "regression"
    C: int = 3
    H: int = 128
    W: int = 128
    J: int = 3
    L: int = 6
    r: int = REDUCTION
    pointwise_out: int = 16
    hidden: int = 8
    arch: str = "scattering"
    seed: int = 0

    def __post_init__(self):
        if self.task not in ("regression", "classification"):
            raise ValueError(f"unknown task {self.task!r}")
        if self.arch not in ("scattering", "conv"):
            raise ValueError(f"unknown architecture {self.arch!r}")
        if self.C < 1:
            raise ValueError("C must be >= 1")
        if self.arch == "scattering" and 2 ** self.J > min(self.H, self.W):
            raise ValueError(f"2**J = {2 ** self.J} exceeds min(H, W)")

    @property
    def K(self) -> int:
        return n_paths(self.J, self.L)

    def to_dict(self) -> dict[str, str]:
        return {k: str(v) for k, v in asdict(self).items()}

    @classmethod
    def from_dict(cls, d: dict[str, str]) -> "ModelConfig":
        kw = {}
        for f in fields(cls):
            if f.name in d:
                kw[f.name] = d[f.name] if f.type in ("str", str) else int(d[f.name])
        return cls(**kw)


def _uniform(rng, shape, fan_in, dtype) -> Tensor:
    bound = 1.0 / np.sqrt(fan_in)
    return Tensor(rng.uniform(-bound, bound, size=shape).astype(dtype), requires_grad=True)


def _zeros(shape, dtype) -> Tensor:
    return Tensor(np.zeros(shape, dtype=dtype), requires_grad=True)


class _Network:
    config: ModelConfig
    dtype: np.dtype

    def __init__(self):
        self.training = False

    def train(self):
        self.training = True
        return self

    def eval(self):
        self.training = False
        return self

    def named_parameters(self) -> list[tuple[str, Tensor]]:
        raise NotImplementedError

    def parameters(self) -> list[Tensor]:
        return [p for _, p in self.named_parameters()]

    def named_buffers(self) -> list[tuple[str, np.ndarray]]:
        return []

    def set_buffer(self, name: str, value: np.ndarray) -> None:
        raise KeyError(name)

    def fusion_weights(self) -> list[Tensor]:
        return []

    def after_step(self) -> None:
        """Hook run after every optimizer update."""

    def featurize(self, x: np.ndarray) -> np.ndarray:
        return np.asarray(x, dtype=self.dtype)

    def forward_features(self, feats: Tensor) -> Tensor:
        raise NotImplementedError

    def forward(self, x) -> Tensor:
        x = x if isinstance(x, Tensor) else Tensor(np.asarray(x, dtype=self.dtype))
        return self.forward_features(x)

    __call__ = forward

    def check_input(self, shape) -> None:
        cfg = self.config
        if len(shape) != 4 or tuple(shape[1:]) != (cfg.C, cfg.H, cfg.W):
            raise ValueError(f"expected input (B, {cfg.C}, {cfg.H}, {cfg.W}), got {tuple(shape)}")


class ScatteringNet(_Network):
    """Scattering front-end, one attention module per input channel, small head."""

    def __init__(self, config: ModelConfig, dtype=np.float32):
        super().__init__()
        self.config = config
        self.dtype = np.dtype(dtype)
        self.bank = build_morlet_bank(config.J, config.L, config.H, config.W)
        self.paths = path_table(config.J, config.L)
        rng = np.random.default_rng(config.seed)
        K = config.K
        self.attention = [AttentionModule(K, config.r, rng, dtype) for _ in range(config.C)]
        hs, ws = config.H // 2 ** config.J, config.W // 2 ** config.J
        ck, p = config.C * K, config.pointwise_out
        self.flat_width = p * hs * ws
        self.pw_w = _uniform(rng, (p, ck, 1, 1), ck, dtype)
        self.pw_b = _zeros((p,), dtype)
        self.fc_w = _uniform(rng, (self.flat_width, config.hidden), self.flat_width, dtype)
        self.fc_b = _zeros((config.hidden,), dtype)
        self.out_w = _uniform(rng, (config.hidden, 1), config.hidden, dtype)
        self.out_b = _zeros((1,), dtype)
        self.last_attention: list[AttentionOutput] | None = None

    def named_parameters(self):
        items = []
        for c, mod in enumerate(self.attention):
            items += [(f"attn{c}.{n}", p) for n, p in mod.params.named_parameters()]
        items += [("head.pw_w", self.pw_w), ("head.pw_b", self.pw_b), ("head.fc_w", self.fc_w),
                  ("head.fc_b", self.fc_b), ("head.out_w", self.out_w), ("head.out_b", self.out_b)]
        return items

    def named_buffers(self):
        items = []
        for c, mod in enumerate(self.attention):
            items += [(f"attn{c}.norm_mean", mod.stats.mean), (f"attn{c}.norm_var", mod.stats.var)]
        return items

    def set_buffer(self, name, value):
        prefix, field_ = name.split(".")
        stats = self.attention[int(prefix[4:])].stats
        setattr(stats, field_[5:], np.asarray(value, dtype=self.dtype))

    def fusion_weights(self):
        return [mod.params.w1 for mod in self.attention]

    def after_step(self):
        for mod in self.attention:
            mod.params.clamp_fusion()

    def featurize(self, x: np.ndarray) -> np.ndarray:
        """Scattering coefficients (B, C, K, Hs, Ws) without a graph."""
        self.check_input(np.shape(x))
        return scatter_numpy(np.asarray(x, dtype=self.dtype), self.bank)

    def scatter(self, x: Tensor) -> Tensor:
        self.check_input(x.shape)
        return scatter2d(x, self.bank).values

    def forward(self, x) -> Tensor:
        x = x if isinstance(x, Tensor) else Tensor(np.asarray(x, dtype=self.dtype))
        return self.forward_features(self.scatter(x))

    __call__ = forward

    def forward_features(self, feats: Tensor) -> Tensor:
        cfg = self.config
        B = feats.shape[0]
        if feats.ndim != 5 or feats.shape[1:3] != (cfg.C, cfg.K):
            raise ValueError(f"expected features (B, {cfg.C}, {cfg.K}, Hs, Ws), got {feats.shape}")
        outs = [mod(feats[:, c], self.training) for c, mod in enumerate(self.attention)]
        self.last_attention = outs
        u_f = T.stack([o.fused for o in outs], axis=1)  # (B, C, K, Hs, Ws)
        u_f = u_f.reshape(B, cfg.C * cfg.K, *u_f.shape[-2:])
        h = T.relu(T.conv2d(u_f, self.pw_w, self.pw_b))
        h = T.relu(T.flatten(h) @ self.fc_w + self.fc_b)
        return h @ self.out_w + self.out_b


class ConvBaseline(_Network):
    """Three 3x3 conv + ReLU + 2x2 max-pool stages (8/16/32 filters), FC 32, linear out."""

    widths = (8, 16, 32)

    def __init__(self, config: ModelConfig, dtype=np.float32):
        super().__init__()
        if config.H % 8 or config.W % 8:
            raise ValueError(f"conv baseline needs H and W divisible by 8, got {config.H}x{config.W}")
        self.config = config
        self.dtype = np.dtype(dtype)
        rng = np.random.default_rng(config.seed)
        self.conv_w, self.conv_b = [], []
        cin = config.C
        for cout in self.widths:
            self.conv_w.append(_uniform(rng, (cout, cin, 3, 3), 9 * cin, dtype))
            self.conv_b.append(_zeros((cout,), dtype))
            cin = cout
        self.flat_width = cin * (config.H // 8) * (config.W // 8)
        self.fc_w = _uniform(rng, (self.flat_width, 32), self.flat_width, dtype)
        self.fc_b = _zeros((32,), dtype)
        self.out_w = _uniform(rng, (32, 1), 32, dtype)
        self.out_b = _zeros((1,), dtype)

    def named_parameters(self):
        items = []
        for i, (w, b) in enumerate(zip(self.conv_w, self.conv_b)):
            items += [(f"conv{i}.w", w), (f"conv{i}.b", b)]
        return items + [("fc.w", self.fc_w), ("fc.b", self.fc_b), ("out.w", self.out_w), ("out.b", self.out_b)]

    def featurize(self, x):
        self.check_input(np.shape(x))
        return np.asarray(x, dtype=self.dtype)

    def forward_features(self, x: Tensor) -> Tensor:
        self.check_input(x.shape)
        h = x
        for w, b in zip(self.conv_w, self.conv_b):
            h = T.max_pool2d(T.relu(T.conv2d(h, w, b)), 2)
        h = T.relu(T.flatten(h) @ self.fc_w + self.fc_b)
        return h @ self.out_w + self.out_b


def build_model(config: ModelConfig, dtype=np.float32) -> _Network:
    return ScatteringNet(config, dtype) if config.arch == "scattering" else ConvBaseline(config, dtype)


def conv_baseline(config: ModelConfig, dtype=np.float32) -> ConvBaseline:
    return ConvBaseline(config, dtype)


def param_count(model: _Network) -> int:
    """Trainable element count (the fixed filter bank is not a parameter)."""
    return int(sum(p.data.size for p in model.parameters()))


# -- checkpoints --------------------------------------------------------------
def save_checkpoint(path, model: _Network, extra: dict[str, str] | None = None) -> None:
    """Key=value header, blank line, then every parameter and buffer as a tensor record."""
    header = {"magic": CKPT_MAGIC, **model.config.to_dict(), "dtype": model.dtype.name}
    params = model.named_parameters()
    buffers = model.named_buffers()
    header["n_params"] = str(len(params))
    header["n_buffers"] = str(len(buffers))
    header["names"] = ",".join(n for n, _ in params + buffers)
    for k, v in (extra or {}).items():
        header[f"extra.{k}"] = str(v)
    text = "".join(f"{k}={v}\n" for k, v in header.items()) + "\n"
    body = b"".join(tensor_to_bytes(np.atleast_1d(p.data)) for _, p in params)
    body += b"".join(tensor_to_bytes(np.atleast_1d(b)) for _, b in buffers)
    atomic_write_bytes(path, text.encode("utf-8") + body)


def read_checkpoint_header(fh) -> dict[str, str]:
    header = {}
    while True:
        line = fh.readline()
        if not line:
            raise CheckpointError("truncated checkpoint header")
        try:
            line = line.decode("utf-8").rstrip("\n")
        except UnicodeDecodeError:
            raise CheckpointError("not a checkpoint file")
        if line == "":
            break
        key, _, value = line.partition("=")
        header[key] = value
    if header.get("magic") != CKPT_MAGIC:
        raise CheckpointError("not a checkpoint file")
    return header


def load_checkpoint(path) -> tuple[_Network, dict[str, str]]:
    """Rebuild a model from a checkpoint; returns it with the ``extra.*`` entries."""
    with open(path, "rb") as fh:
        header = read_checkpoint_header(fh)
        try:
            config = ModelConfig.from_dict(header)
            model = build_model(config, np.dtype(header.get("dtype", "float32")))
        except (ValueError, TypeError) as exc:
            raise CheckpointError(f"bad checkpoint header: {exc}")
        params = model.named_parameters()
        if int(header["n_params"]) != len(params):
            raise CheckpointError("checkpoint parameter count does not match the architecture")
        for name, p in params:
            arr = read_tensor(fh)
            if arr.size != p.data.size:
                raise CheckpointError(f"parameter {name}: size {arr.size} != {p.data.size}")
            p.data = arr.reshape(p.shape).astype(model.dtype)
        for name, _ in model.named_buffers()[: int(header["n_buffers"])]:
            model.set_buffer(name, read_tensor(fh))
        if fh.read(1):
            raise CheckpointError("trailing bytes after the last tensor record")
    extra = {k[6:]: v for k, v in header.items() if k.startswith("extra.")}
    return model, extra


def state_dict(model: _Network) -> dict[str, np.ndarray]:
    out = {n: p.data.copy() for n, p in model.named_parameters()}
    out.update({n: np.array(b, copy=True) for n, b in model.named_buffers()})
    return out


def load_state_dict(model: _Network, state: dict[str, np.ndarray]) -> None:
    for n, p in model.named_parameters():
        p.data = state[n].copy()
    for n, _ in model.named_buffers():
        model.set_buffer(n, state[n])
