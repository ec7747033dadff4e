"""Feature extractor, supervised head, rotation head and checkpoint files.

Checkpoint layout (little-endian)::

    b"CRCK" | u32 version | u32 meta_len | meta JSON (utf-8)
    u32 record_count, then per record:
        u32 name_len | name (utf-8) | u32 ndim | u32 dims[ndim] | f32 data

Record names are prefixed ``param:``, ``buffer:`` (batchnorm running stats)
or ``velocity:`` (optimizer momentum).  The meta JSON carries the config
snapshot, the training phase tag and the data-stream position.
"""

from __future__ import annotations

import json
import struct
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from .autodiff import DTYPE, BatchNormStats, Tensor, batchnorm, conv2d, global_avg_pool, linear, maxpool2x2, relu
from .autodiff.ops import to_channels_last
from .errors import CheckpointError, DimensionError
from .transforms import TransformFamily

CKPT_MAGIC = b"CRCK"
CKPT_VERSION = 1
COMP_HIDDEN = 256

# independent init streams so that adding or dropping a head never shifts
# the random numbers drawn for the others
_STREAM_EXTRACTOR, _STREAM_SUP, _STREAM_COMP = 0, 1, 2

# pooled relu features share a large positive mean, so full-scale output
# layers start far from uniform predictions; shrink them
OUTPUT_GAIN = 0.1


@dataclass(frozen=True)
class ModelConfig:
    in_channels: int = 3
    image_size: int = 32
    widths: tuple[int, ...] = (32, 64, 128, 128)
    num_base_classes: int = 7
    family: Optional[str] = "VS16"

    @property
    def embed_dim(self) -> int:
        return self.widths[-1]

    @property
    def rotation_classes(self) -> int:
        return 0 if self.family is None else TransformFamily.parse(self.family).cardinality

    def to_dict(self) -> dict:
        d = asdict(self)
        d["widths"] = list(self.widths)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        d = dict(d)
        d["widths"] = tuple(d["widths"])
        return cls(**d)


def _he(rng: np.random.Generator, shape: Sequence[int], fan_in: int, gain: float = 1.0) -> np.ndarray:
    return (rng.standard_normal(shape) * gain * np.sqrt(2.0 / fan_in)).astype(DTYPE)


class ModelBundle:
    """Extractor E, supervised head and optional composite-rotation head.

    Parameters live in ``self.params`` (name -> Tensor); batchnorm running
    statistics live in ``self.bn`` (block index -> BatchNormStats).
    """

    def __init__(self, config: ModelConfig, seed: int = 0):
        self.config = config
        self.params: dict[str, Tensor] = {}
        self.bn: list[BatchNormStats] = []
        rng = np.random.default_rng([seed, _STREAM_EXTRACTOR])
        c_in = config.in_channels
        for b, width in enumerate(config.widths):
            self.params[f"E.{b}.conv.w"] = Tensor(_he(rng, (width, c_in, 3, 3), c_in * 9), requires_grad=True)
            self.params[f"E.{b}.bn.gamma"] = Tensor(np.ones(width), requires_grad=True)
            self.params[f"E.{b}.bn.beta"] = Tensor(np.zeros(width), requires_grad=True)
            self.bn.append(BatchNormStats.fresh(width))
            c_in = width
        d = config.embed_dim
        rng = np.random.default_rng([seed, _STREAM_SUP])
        self.params["sup.w"] = Tensor(_he(rng, (d, config.num_base_classes), d, OUTPUT_GAIN), requires_grad=True)
        self.params["sup.b"] = Tensor(np.zeros(config.num_base_classes), requires_grad=True)
        if config.family is not None:
            k = config.rotation_classes
            rng = np.random.default_rng([seed, _STREAM_COMP])
            self.params["comp.0.w"] = Tensor(_he(rng, (d, COMP_HIDDEN), d), requires_grad=True)
            self.params["comp.0.b"] = Tensor(np.zeros(COMP_HIDDEN), requires_grad=True)
            self.params["comp.1.w"] = Tensor(_he(rng, (COMP_HIDDEN, k), COMP_HIDDEN, OUTPUT_GAIN), requires_grad=True)
            self.params["comp.1.b"] = Tensor(np.zeros(k), requires_grad=True)

    # ------------------------------------------------------------------
    @property
    def has_comp_head(self) -> bool:
        return "comp.0.w" in self.params

    def parameter_count(self) -> int:
        return int(sum(p.data.size for p in self.params.values()))

    def extractor_params(self) -> dict[str, Tensor]:
        return {k: v for k, v in self.params.items() if k.startswith("E.")}

    def forward_features(self, x, mode: str = "train") -> Tensor:
        """Embed a (B, C, H, W) batch into (B, d) features."""
        x = x if isinstance(x, Tensor) else Tensor(x)
        cfg = self.config
        expect = (cfg.in_channels, cfg.image_size, cfg.image_size)
        if x.ndim != 4 or tuple(x.shape[1:]) != expect:
            raise DimensionError(f"extractor expects (B, {expect[0]}, {expect[1]}, {expect[2]}), got {x.shape}")
        p = self.params
        h = to_channels_last(x)
        for b in range(len(cfg.widths)):
            h = conv2d(h, p[f"E.{b}.conv.w"], channels_last=True)
            h = batchnorm(h, p[f"E.{b}.bn.gamma"], p[f"E.{b}.bn.beta"], self.bn[b], mode, channels_last=True)
            h = relu(h)
            if h.shape[1] % 2 == 0:
                h = maxpool2x2(h, channels_last=True)
        return global_avg_pool(h, channels_last=True)

    def forward_sup(self, feats: Tensor) -> Tensor:
        if feats.ndim != 2 or feats.shape[1] != self.config.embed_dim:
            raise DimensionError(f"supervised head expects width {self.config.embed_dim}, got {feats.shape}")
        return linear(feats, self.params["sup.w"], self.params["sup.b"])

    def forward_comp(self, feats: Tensor) -> Tensor:
        if not self.has_comp_head:
            raise DimensionError("model has no composite-rotation head")
        if feats.ndim != 2 or feats.shape[1] != self.config.embed_dim:
            raise DimensionError(f"rotation head expects width {self.config.embed_dim}, got {feats.shape}")
        p = self.params
        h = relu(linear(feats, p["comp.0.w"], p["comp.0.b"]))
        return linear(h, p["comp.1.w"], p["comp.1.b"])

    def embed(self, images: np.ndarray, batch_size: int = 128) -> np.ndarray:
        """Eval-mode features for a stack of images, without graph recording."""
        from .autodiff import no_grad

        out = []
        with no_grad():
            for s in range(0, len(images), batch_size):
                out.append(self.forward_features(Tensor(images[s : s + batch_size]), mode="eval").data)
        return np.concatenate(out, axis=0) if out else np.zeros((0, self.config.embed_dim), dtype=DTYPE)

    # ------------------------------------------------------------------
    def state_arrays(self) -> dict[str, np.ndarray]:
        """Flat name -> array map of parameters and batchnorm buffers."""
        out = {f"param:{k}": v.data for k, v in self.params.items()}
        for b, st in enumerate(self.bn):
            out[f"buffer:E.{b}.bn.running_mean"] = st.mean
            out[f"buffer:E.{b}.bn.running_var"] = st.var
        return out

    def load_state_arrays(self, arrays: dict[str, np.ndarray]) -> None:
        expected = self.state_arrays()
        missing = sorted(set(expected) - set(arrays))
        if missing:
            raise CheckpointError(f"checkpoint is missing records: {missing[:5]}")
        for name, ref in expected.items():
            arr = arrays[name]
            if arr.shape != ref.shape:
                raise CheckpointError(f"record {name!r} has shape {arr.shape}, model expects {ref.shape}")
        for name in expected:
            kind, key = name.split(":", 1)
            arr = np.asarray(arrays[name], dtype=DTYPE)
            if kind == "param":
                self.params[key].set_data(arr)
            else:
                b = int(key.split(".")[1])
                if key.endswith("running_mean"):
                    self.bn[b].mean = arr.copy()
                else:
                    self.bn[b].var = arr.copy()

    def copy(self) -> "ModelBundle":
        twin = ModelBundle.__new__(ModelBundle)
        twin.config = self.config
        twin.params = {k: Tensor(v.data, requires_grad=True) for k, v in self.params.items()}
        twin.bn = [BatchNormStats(st.mean.copy(), st.var.copy(), st.momentum, st.eps) for st in self.bn]
        return twin

    def without_heads(self) -> "ModelBundle":
        """A copy keeping only the extractor (heads are discarded after training)."""
        twin = self.copy()
        twin.params = {k: v for k, v in twin.params.items() if k.startswith("E.")}
        return twin


# ----------------------------------------------------------------------
# checkpoints
# ----------------------------------------------------------------------


@dataclass
class Checkpoint:
    model: ModelBundle
    phase: str = "phase1"
    config: dict = field(default_factory=dict)
    rng_state: dict = field(default_factory=dict)
    velocity: dict[str, np.ndarray] = field(default_factory=dict)
    extra: dict = field(default_factory=dict)


def save_checkpoint(ckpt: Checkpoint, path) -> None:
    meta = {
        "model": ckpt.model.config.to_dict(),
        "phase": ckpt.phase,
        "config": ckpt.config,
        "rng_state": ckpt.rng_state,
        "extra": ckpt.extra,
    }
    meta_bytes = json.dumps(meta, sort_keys=True).encode("utf-8")
    records = dict(ckpt.model.state_arrays())
    for k, v in ckpt.velocity.items():
        records[f"velocity:{k}"] = v
    chunks = [CKPT_MAGIC, struct.pack("<II", CKPT_VERSION, len(meta_bytes)), meta_bytes, struct.pack("<I", len(records))]
    for name, arr in records.items():
        nb = name.encode("utf-8")
        arr = np.asarray(arr, dtype="<f4")
        chunks.append(struct.pack("<I", len(nb)) + nb + struct.pack(f"<I{arr.ndim}I", arr.ndim, *arr.shape))
        chunks.append(arr.tobytes())
    Path(path).write_bytes(b"".join(chunks))


class _Reader:
    def __init__(self, buf: bytes):
        self.buf = buf
        self.pos = 0

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.buf):
            raise CheckpointError(f"checkpoint truncated at byte offset {self.pos} (needed {n} more bytes)")
        out = self.buf[self.pos : self.pos + n]
        self.pos += n
        return out

    def u32(self) -> int:
        return struct.unpack("<I", self.take(4))[0]


def load_checkpoint(path, expected: Optional[ModelConfig] = None) -> Checkpoint:
    """Read a checkpoint; with ``expected`` set, the stored architecture must match it."""
    r = _Reader(Path(path).read_bytes())
    if r.take(4) != CKPT_MAGIC:
        raise CheckpointError("bad checkpoint magic")
    version = r.u32()
    if version != CKPT_VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version}")
    meta = json.loads(r.take(r.u32()).decode("utf-8"))
    records: dict[str, np.ndarray] = {}
    for _ in range(r.u32()):
        name = r.take(r.u32()).decode("utf-8")
        ndim = r.u32()
        shape = tuple(r.u32() for _ in range(ndim))
        n = int(np.prod(shape, dtype=np.int64))
        records[name] = np.frombuffer(r.take(4 * n), dtype="<f4").reshape(shape).astype(DTYPE)
    if r.pos != len(r.buf):
        raise CheckpointError(f"trailing bytes after offset {r.pos}")

    mcfg = ModelConfig.from_dict(meta["model"])
    if expected is not None:
        _check_compatible(mcfg, expected)
    model = ModelBundle(mcfg, seed=0)
    model.load_state_arrays({k: v for k, v in records.items() if not k.startswith("velocity:")})
    velocity = {k.split(":", 1)[1]: v for k, v in records.items() if k.startswith("velocity:")}
    return Checkpoint(
        model=model,
        phase=meta.get("phase", ""),
        config=meta.get("config", {}),
        rng_state=meta.get("rng_state", {}),
        velocity=velocity,
        extra=meta.get("extra", {}),
    )


def _check_compatible(found: ModelConfig, expected: ModelConfig) -> None:
    pairs = [
        ("rotation classes", found.rotation_classes, expected.rotation_classes),
        ("widths", tuple(found.widths), tuple(expected.widths)),
        ("base classes", found.num_base_classes, expected.num_base_classes),
        ("input channels", found.in_channels, expected.in_channels),
        ("image size", found.image_size, expected.image_size),
    ]
    for what, got, want in pairs:
        if got != want:
            raise CheckpointError(f"checkpoint {what} {got} does not match configuration {want}")
