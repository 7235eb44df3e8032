"""Toy GPT-style causal transformer with dual-scale alignment hooks.

The model owns every parameter: patch embedder, prompt/label/position
tables, pre-norm residual transformer blocks (shared between the fine and
coarse sequences), per-insertion alignment-block matrices, the shared
coarse projector, and the task head.  Insertion position k means "before
block k"; position `layers` runs after the last block.

Checkpoints are a flat binary: magic ``CALN``, format version, config
digest, then named tensors as (name length, name bytes, rank, extents,
raw float64 little-endian values).
"""

from __future__ import annotations

import hashlib
import json
import math
import struct
from dataclasses import dataclass, field, asdict

import numpy as np

from . import numerics as nm
from .numerics import Tensor
from . import tsembed as te
from .tsembed import (
    CLASS_PROMPT_TEMPLATE,
    DEFAULT_FORECAST_PROMPT,
    FscaClassMode,
    FscaForecastMode,
    PatchEmbedder,
    SeriesWindow,
    VcaMode,
)
from .graphspec import GraphSpec, build_spec
from .dscagnn import (
    CoarseProjector,
    CosineWeighter,
    DscaParams,
    DualScaleState,
    FrozenWeighter,
    dsca_block,
)

CHECKPOINT_MAGIC = b"CALN"
CHECKPOINT_VERSION = 1

FREEZE_POLICIES = ("none", "freeze_attention_and_ffn")
ADJACENCY_MODES = ("cosine", "random_frozen")


class ConfigError(ValueError):
    """Invalid model/backbone configuration."""


class CheckpointError(RuntimeError):
    """Corrupt or mismatched checkpoint file."""


@dataclass(frozen=True)
class BackboneConfig:
    layers: int = 4
    width: int = 64
    heads: int = 4
    ff_mult: int = 4
    insertion_positions: tuple[int, ...] = (0, 4)
    freeze_policy: str = "freeze_attention_and_ffn"
    max_seq_len: int = 512

    def __post_init__(self):
        if self.layers < 0:
            raise ConfigError("layers must be >= 0")
        if self.width < 1 or self.heads < 1 or self.width % self.heads != 0:
            raise ConfigError("width must be a positive multiple of heads")
        pos = tuple(self.insertion_positions)
        if len(set(pos)) != len(pos) or any(p < 0 or p > self.layers for p in pos):
            raise ConfigError(
                f"insertion positions must be unique and within [0, {self.layers}]"
            )
        object.__setattr__(self, "insertion_positions", tuple(sorted(pos)))
        if self.freeze_policy not in FREEZE_POLICIES:
            raise ConfigError(f"freeze_policy must be one of {FREEZE_POLICIES}")


@dataclass(frozen=True)
class ModelConfig:
    task: str = "forecast"  # forecast | classify
    mode: str = "fsca"  # fsca | vca
    n_parts: int = 2
    pruned: bool = True
    prompt: str | None = None  # None -> task default
    input_len: int = 96
    horizon: int = 24
    n_classes: int = 2
    patch_size: int = 16
    patch_stride: int = 8
    normalize: bool = True
    backbone: BackboneConfig = field(default_factory=BackboneConfig)
    dsca_enabled: bool = True
    coarse_enabled: bool = True
    adjacency: str = "cosine"

    def __post_init__(self):
        if self.task not in ("forecast", "classify"):
            raise ConfigError(f"unknown task {self.task!r}")
        if self.mode not in ("fsca", "vca"):
            raise ConfigError(f"unknown mode {self.mode!r}")
        if self.adjacency not in ADJACENCY_MODES:
            raise ConfigError(f"adjacency must be one of {ADJACENCY_MODES}")
        if self.input_len < self.patch_size:
            raise ConfigError("input_len must be at least patch_size")
        if (self.input_len - self.patch_size) % self.patch_stride != 0:
            raise ConfigError(
                "(input_len - patch_size) must be divisible by patch_stride"
            )

    @property
    def n_patches(self) -> int:
        return (self.input_len - self.patch_size + self.patch_stride) // self.patch_stride

    def resolved_prompt(self) -> str:
        if self.prompt is not None:
            return self.prompt
        if self.task == "classify":
            return CLASS_PROMPT_TEMPLATE.format(count=self.n_classes)
        return DEFAULT_FORECAST_PROMPT

    def digest(self) -> bytes:
        payload = json.dumps(asdict(self), sort_keys=True).encode("utf-8")
        return hashlib.sha256(payload).digest()


def _uniform(rng: np.random.Generator, shape: tuple[int, ...], fan_in: int) -> np.ndarray:
    bound = 1.0 / math.sqrt(fan_in)
    return rng.uniform(-bound, bound, size=shape)


class Model:
    """End-to-end model for one fixed layout (input length, mode, prompt)."""

    def __init__(self, cfg: ModelConfig, seed: int = 0):
        self.cfg = cfg
        self.seed = seed
        bb = cfg.backbone
        m = bb.width
        self.prompt_ids = te.tokenize_prompt(cfg.resolved_prompt())

        n = cfg.n_patches
        if cfg.task == "classify" and cfg.mode == "fsca":
            self.layout = te.layout_fsca_class(n, cfg.n_classes, self.prompt_ids)
        elif cfg.mode == "fsca":
            self.layout = te.layout_fsca_forecast(n, cfg.n_parts, self.prompt_ids)
        else:
            self.layout = te.layout_vca(n, self.prompt_ids)
        if self.layout.total_len > bb.max_seq_len:
            raise ConfigError(
                f"sequence of {self.layout.total_len} tokens exceeds max_seq_len {bb.max_seq_len}"
            )
        self.spec: GraphSpec = build_spec(self.layout, pruned=cfg.pruned)

        rng = np.random.default_rng(seed)
        p: dict[str, Tensor] = {}
        self.params = p

        p["patch.weight"] = Tensor(_uniform(rng, (cfg.patch_size, m), cfg.patch_size), True)
        p["patch.bias"] = Tensor(np.zeros(m), True)
        p["prompt_table"] = Tensor(_uniform(rng, (256, m), m), True)
        if cfg.task == "classify":
            p["label_table"] = Tensor(_uniform(rng, (cfg.n_classes, m), m), True)
        p["pos_table"] = Tensor(_uniform(rng, (bb.max_seq_len, m), m), True)

        for i in range(bb.layers):
            p[f"block{i}.ln1.gain"] = Tensor(np.ones(m), True)
            p[f"block{i}.ln1.bias"] = Tensor(np.zeros(m), True)
            for nme in ("wq", "wk", "wv", "wo"):
                p[f"block{i}.attn.{nme}"] = Tensor(_uniform(rng, (m, m), m), True)
            for nme in ("bq", "bk", "bv", "bo"):
                p[f"block{i}.attn.{nme}"] = Tensor(np.zeros(m), True)
            p[f"block{i}.ln2.gain"] = Tensor(np.ones(m), True)
            p[f"block{i}.ln2.bias"] = Tensor(np.zeros(m), True)
            p[f"block{i}.mlp.w1"] = Tensor(_uniform(rng, (m, bb.ff_mult * m), m), True)
            p[f"block{i}.mlp.b1"] = Tensor(np.zeros(bb.ff_mult * m), True)
            p[f"block{i}.mlp.w2"] = Tensor(_uniform(rng, (bb.ff_mult * m, m), bb.ff_mult * m), True)
            p[f"block{i}.mlp.b2"] = Tensor(np.zeros(m), True)

        self.dsca: dict[int, DscaParams] = {}
        self.projector: CoarseProjector | None = None
        if cfg.dsca_enabled:
            for pos in bb.insertion_positions:
                p[f"dsca{pos}.w_fine"] = Tensor(_uniform(rng, (m, m), m), True)
                p[f"dsca{pos}.w_coarse"] = Tensor(_uniform(rng, (m, m), m), True)
                p[f"dsca{pos}.w_transfer"] = Tensor(_uniform(rng, (m, m), m), True)
                self.dsca[pos] = DscaParams(
                    w_fine=p[f"dsca{pos}.w_fine"],
                    w_coarse=p[f"dsca{pos}.w_coarse"],
                    w_transfer=p[f"dsca{pos}.w_transfer"],
                )
            cap = max(self.layout.part_lengths)
            mlen = self.layout.prompt_len
            p["proj.w_parts"] = Tensor(_uniform(rng, (cap * m, m), cap * m), True)
            p["proj.b_parts"] = Tensor(np.zeros(m), True)
            p["proj.w_prompt"] = Tensor(_uniform(rng, (mlen * m, m), mlen * m), True)
            p["proj.b_prompt"] = Tensor(np.zeros(m), True)
            self.projector = CoarseProjector(
                w_parts=p["proj.w_parts"],
                b_parts=p["proj.b_parts"],
                w_prompt=p["proj.w_prompt"],
                b_prompt=p["proj.b_prompt"],
                part_capacity=cap,
            )

        out_dim = cfg.horizon if cfg.task == "forecast" else cfg.n_classes
        fine_len = self.layout.total_len
        p["head.weight"] = Tensor(_uniform(rng, (fine_len * m, out_dim), fine_len * m), True)
        p["head.bias"] = Tensor(np.zeros(out_dim), True)

        if bb.freeze_policy == "freeze_attention_and_ffn":
            for name, tsr in p.items():
                if ".attn." in name or ".mlp." in name:
                    tsr.requires_grad = False

        self.embedder = PatchEmbedder(weight=p["patch.weight"], bias=p["patch.bias"])
        if cfg.adjacency == "random_frozen":
            self.weighter = FrozenWeighter("random", seed=seed)
        else:
            self.weighter = CosineWeighter()
        self._masks: dict[int, np.ndarray] = {}
        self.class_examples: list[np.ndarray] | None = None
        self.class_example_labels: list[int] | None = None

    # -- parameters ---------------------------------------------------------

    def named_parameters(self) -> dict[str, Tensor]:
        return self.params

    def trainable_parameters(self) -> dict[str, Tensor]:
        return {k: v for k, v in self.params.items() if v.requires_grad}

    def zero_grad(self) -> None:
        for t in self.params.values():
            t.zero_grad()

    # -- classification demonstration examples ------------------------------

    def set_class_examples(self, windows: list[np.ndarray], labels: list[int]) -> None:
        """Fix one demonstration window per class (order = label order)."""
        if self.cfg.task != "classify" or self.cfg.mode != "fsca":
            raise ConfigError("demonstration examples apply to few-shot classification only")
        if sorted(labels) != list(range(self.cfg.n_classes)):
            raise ConfigError("need exactly one example per class")
        by_label = {lab: np.asarray(w, dtype=np.float64) for w, lab in zip(windows, labels)}
        self.class_examples = [self._patches(by_label[c]) for c in range(self.cfg.n_classes)]
        self.class_example_labels = list(range(self.cfg.n_classes))

    # -- forward ------------------------------------------------------------

    def _patches(self, values: np.ndarray) -> np.ndarray:
        w = SeriesWindow(values)
        if self.cfg.normalize:
            w = te.instance_normalize(w)
        return te.patchify(w, self.cfg.patch_size, self.cfg.patch_stride)

    def _mask(self, length: int) -> np.ndarray:
        if length not in self._masks:
            mask = np.zeros((length, length))
            mask[np.triu_indices(length, k=1)] = -1e30
            self._masks[length] = mask
        return self._masks[length]

    def _attention(self, i: int, h: Tensor) -> Tensor:
        p = self.params
        bb = self.cfg.backbone
        dh = bb.width // bb.heads
        q = nm.add(nm.matmul(h, p[f"block{i}.attn.wq"]), p[f"block{i}.attn.bq"])
        k = nm.add(nm.matmul(h, p[f"block{i}.attn.wk"]), p[f"block{i}.attn.bk"])
        v = nm.add(nm.matmul(h, p[f"block{i}.attn.wv"]), p[f"block{i}.attn.bv"])
        mask = Tensor(self._mask(h.shape[0]))
        outs = []
        for hd in range(bb.heads):
            lo, hi = hd * dh, (hd + 1) * dh
            scores = nm.scale(
                nm.matmul(nm.slice_cols(q, lo, hi), nm.transpose(nm.slice_cols(k, lo, hi))),
                1.0 / math.sqrt(dh),
            )
            att = nm.softmax_rows(nm.add(scores, mask))
            outs.append(nm.matmul(att, nm.slice_cols(v, lo, hi)))
        cat = outs[0] if len(outs) == 1 else nm.concat_cols(outs)
        return nm.add(nm.matmul(cat, p[f"block{i}.attn.wo"]), p[f"block{i}.attn.bo"])

    def _transformer_block(self, i: int, x: Tensor) -> Tensor:
        p = self.params
        h = nm.layer_norm(x, p[f"block{i}.ln1.gain"], p[f"block{i}.ln1.bias"])
        x = nm.add(x, self._attention(i, h))
        h2 = nm.layer_norm(x, p[f"block{i}.ln2.gain"], p[f"block{i}.ln2.bias"])
        up = nm.gelu(nm.add(nm.matmul(h2, p[f"block{i}.mlp.w1"]), p[f"block{i}.mlp.b1"]))
        down = nm.add(nm.matmul(up, p[f"block{i}.mlp.w2"]), p[f"block{i}.mlp.b2"])
        return nm.add(x, down)

    def _positions(self, length: int) -> Tensor:
        return nm.gather_rows(self.params["pos_table"], np.arange(length, dtype=np.int64))

    def run_backbone(self, state: DualScaleState) -> DualScaleState:
        """Alternate alignment insertions and shared transformer blocks."""
        bb = self.cfg.backbone
        inserts = set(bb.insertion_positions) if self.cfg.dsca_enabled else set()
        for pos in range(bb.layers + 1):
            if pos in inserts:
                first = self.cfg.coarse_enabled and state.coarse is None
                state = dsca_block(
                    state,
                    self.spec,
                    self.dsca[pos],
                    layout=self.layout,
                    projector=self.projector,
                    first_insertion=first,
                    weighter=self.weighter,
                    insertion=pos,
                    coarse_enabled=self.cfg.coarse_enabled,
                )
                if first and state.coarse is not None:
                    state.coarse = nm.add(state.coarse, self._positions(state.coarse.shape[0]))
            if pos < bb.layers:
                state.fine = self._transformer_block(pos, state.fine)
                if state.coarse is not None:
                    state.coarse = self._transformer_block(pos, state.coarse)
        return state

    def _embed(self, values: np.ndarray) -> tuple[Tensor, tuple[float, float]]:
        values = np.asarray(values, dtype=np.float64)
        if values.shape != (self.cfg.input_len,):
            raise ConfigError(
                f"window of shape {values.shape} does not match input_len {self.cfg.input_len}"
            )
        window = SeriesWindow(values)
        stats = (0.0, 1.0)
        if self.cfg.normalize:
            window = te.instance_normalize(window)
            stats = window.norm_stats
        patches = te.patchify(window, self.cfg.patch_size, self.cfg.patch_stride)

        if self.cfg.task == "classify" and self.cfg.mode == "fsca":
            if self.class_examples is None:
                raise ConfigError("set_class_examples() must run before few-shot classification")
            mode = FscaClassMode(
                example_patches=tuple(self.class_examples),
                example_labels=tuple(self.class_example_labels),
            )
        elif self.cfg.mode == "fsca":
            mode = FscaForecastMode(self.cfg.n_parts)
        else:
            mode = VcaMode()
        layout, fine = te.build_sequence(
            patches,
            self.prompt_ids,
            mode,
            self.embedder,
            self.params["prompt_table"],
            self.params.get("label_table"),
        )
        if layout.roles != self.layout.roles:
            raise ConfigError("window produced a different layout than the model was built for")
        fine = nm.add(fine, self._positions(layout.total_len))
        return fine, stats

    def forecast_head(self, fine: Tensor) -> Tensor:
        m = self.cfg.backbone.width
        expected = (self.layout.total_len, m)
        if fine.shape != expected:
            raise ConfigError(f"fine state {fine.shape} drifted from layout {expected}")
        flat = nm.reshape(fine, (1, expected[0] * m))
        out = nm.add(nm.matmul(flat, self.params["head.weight"]), self.params["head.bias"])
        return nm.reshape(out, (self.cfg.horizon,))

    def classify_head(self, fine: Tensor) -> Tensor:
        m = self.cfg.backbone.width
        expected = (self.layout.total_len, m)
        if fine.shape != expected:
            raise ConfigError(f"fine state {fine.shape} drifted from layout {expected}")
        flat = nm.reshape(fine, (1, expected[0] * m))
        out = nm.add(nm.matmul(flat, self.params["head.weight"]), self.params["head.bias"])
        return nm.reshape(out, (self.cfg.n_classes,))

    def forward_forecast(self, values: np.ndarray) -> Tensor:
        """Predict the next `horizon` values on the raw (denormalized) scale."""
        fine, (mean, std) = self._embed(values)
        state = self.run_backbone(DualScaleState(fine=fine))
        pred = self.forecast_head(state.fine)
        if self.cfg.normalize:
            pred = nm.add_scalar(nm.scale(pred, std), mean)
        return pred

    def forward_classify(self, values: np.ndarray) -> Tensor:
        fine, _ = self._embed(values)
        state = self.run_backbone(DualScaleState(fine=fine))
        return self.classify_head(state.fine)

    def predict(self, values: np.ndarray) -> np.ndarray:
        with nm.no_grad():
            if self.cfg.task == "forecast":
                return self.forward_forecast(values).data.copy()
            return self.forward_classify(values).data.copy()


def compute_loss(pred: Tensor, target, kind: str) -> Tensor:
    """Scalar training loss.

    mse: mean squared error; smape: symmetric MAPE in [0, 200] with the
    denominator floored at 1e-8; ce: cross entropy of logits against an
    integer class index.
    """
    if kind == "mse":
        t = target if isinstance(target, Tensor) else Tensor(np.asarray(target, dtype=np.float64))
        d = nm.sub(pred, t)
        return nm.mean_all(nm.mul(d, d))
    if kind == "smape":
        t = target if isinstance(target, Tensor) else Tensor(np.asarray(target, dtype=np.float64))
        num = nm.abs_val(nm.sub(pred, t))
        den = nm.clamp_min(nm.add(nm.abs_val(pred), nm.abs_val(t)), 1e-8)
        return nm.scale(nm.mean_all(nm.div(num, den)), 200.0)
    if kind == "ce":
        k = int(target)
        c = pred.data.size
        if not 0 <= k < c:
            raise ConfigError(f"class index {k} out of range for {c} logits")
        row = nm.reshape(pred, (1, c))
        shift = float(row.data.max())  # run constant; cancels in the softmax
        lse = nm.add_scalar(nm.log(nm.sum_all(nm.exp(nm.add_scalar(row, -shift)))), shift)
        return nm.sub(lse, nm.sum_all(nm.slice_cols(row, k, k + 1)))
    raise ValueError(f"unknown loss kind {kind!r}")


def sample_loss(model: Model, sample, kind: str) -> Tensor:
    """Loss of one training sample: (input, target) arrays for forecasting,
    (input, class index) for classification."""
    values, target = sample
    if model.cfg.task == "forecast":
        return compute_loss(model.forward_forecast(values), target, kind)
    return compute_loss(model.forward_classify(values), target, kind)


# ---------------------------------------------------------------------------
# Checkpoints


def save_checkpoint(path, tensors: dict[str, np.ndarray], digest: bytes) -> None:
    if len(digest) != 32:
        raise CheckpointError("config digest must be 32 bytes")
    with open(path, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(struct.pack("<I", CHECKPOINT_VERSION))
        fh.write(digest)
        fh.write(struct.pack("<I", len(tensors)))
        for name, arr in tensors.items():
            arr = np.asarray(arr, dtype="<f8")  # tobytes() below emits C order
            encoded = name.encode("utf-8")
            fh.write(struct.pack("<H", len(encoded)))
            fh.write(encoded)
            fh.write(struct.pack("<B", arr.ndim))
            for extent in arr.shape:
                fh.write(struct.pack("<I", extent))
            fh.write(arr.tobytes())


def load_checkpoint(path) -> tuple[bytes, dict[str, np.ndarray]]:
    with open(path, "rb") as fh:
        if fh.read(4) != CHECKPOINT_MAGIC:
            raise CheckpointError(f"{path}: not a checkpoint file")
        (version,) = struct.unpack("<I", fh.read(4))
        if version != CHECKPOINT_VERSION:
            raise CheckpointError(f"{path}: unsupported checkpoint version {version}")
        digest = fh.read(32)
        (count,) = struct.unpack("<I", fh.read(4))
        tensors: dict[str, np.ndarray] = {}
        for _ in range(count):
            (name_len,) = struct.unpack("<H", fh.read(2))
            name = fh.read(name_len).decode("utf-8")
            (rank,) = struct.unpack("<B", fh.read(1))
            shape = tuple(struct.unpack("<I", fh.read(4))[0] for _ in range(rank))
            size = int(np.prod(shape)) if shape else 1
            data = np.frombuffer(fh.read(size * 8), dtype="<f8").reshape(shape)
            tensors[name] = np.array(data, dtype=np.float64)
    return digest, tensors


def model_state(model: Model, extra: dict[str, np.ndarray] | None = None) -> dict[str, np.ndarray]:
    state = {name: t.data.copy() for name, t in model.params.items()}
    if model.class_examples is not None:
        for k, patches in enumerate(model.class_examples):
            state[f"class_example.{k}"] = patches.copy()
    if extra:
        state.update(extra)
    return state


def load_model_state(model: Model, tensors: dict[str, np.ndarray]) -> dict[str, np.ndarray]:
    """Copy matching tensors into the model; returns the unconsumed extras."""
    extras: dict[str, np.ndarray] = {}
    examples: dict[int, np.ndarray] = {}
    for name, arr in tensors.items():
        if name in model.params:
            if model.params[name].shape != arr.shape:
                raise CheckpointError(f"tensor {name!r} shape {arr.shape} does not match model")
            model.params[name].data[...] = arr
        elif name.startswith("class_example."):
            examples[int(name.split(".", 1)[1])] = arr
        else:
            extras[name] = arr
    if examples:
        model.class_examples = [examples[k] for k in sorted(examples)]
        model.class_example_labels = list(range(len(examples)))
    return extras
