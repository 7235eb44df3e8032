"""Training loop, optimizers, evaluation protocols and the ablation runner.

Everything here is deterministic given (config, seed): batch order is
re-derived per epoch from the seed, evaluation runs under no_grad, and all
file output goes through the report writers (atomic write-temp-then-rename).
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from . import numerics as nm
from .numerics import Tensor, backward
from .backbone import (
    BackboneConfig,
    Model,
    ModelConfig,
    load_checkpoint,
    load_model_state,
    model_state,
    sample_loss,
    save_checkpoint,
)
from .data import (
    DataError,
    MultivariateSeries,
    WindowSample,
    chrono_split,
    few_shot_subset,
    load_csv,
    make_windows,
    synth_generate,
)
from .metrics import MetricReport, m4_metrics, naive2, point_metrics, accuracy
from . import report as report_io


class TrainError(RuntimeError):
    """Aborted run (non-finite gradients, impossible config)."""


@dataclass(frozen=True)
class TrainConfig:
    lr0: float = 1e-4
    betas: tuple[float, float] = (0.9, 0.999)
    eps: float = 1e-8
    t_max: int = 20
    eta_min: float = 1e-8
    batch_size: int = 32
    patience: int = 5
    max_epochs: int = 10
    seed: int = 0
    loss: str = "mse"  # mse | smape | ce
    optimizer: str = "adam"  # adam | radam

    def __post_init__(self):
        if not self.lr0 > self.eta_min >= 0:
            raise TrainError("need lr0 > eta_min >= 0")
        if self.patience < 1:
            raise TrainError("patience must be >= 1")
        if self.optimizer not in ("adam", "radam"):
            raise TrainError(f"unknown optimizer {self.optimizer!r}")
        if self.loss not in ("mse", "smape", "ce"):
            raise TrainError(f"unknown loss {self.loss!r}")


@dataclass(frozen=True)
class DataConfig:
    source: str = "synth"  # synth | csv
    path: str = ""
    kind: str = "sine_mix"
    length: int = 2000
    channels: int = 1
    noise: float = 0.1
    data_seed: int = 0
    timestamp_col: int | None = 0
    has_header: bool = True
    window_stride: int = 8
    fractions: tuple[float, float, float] = (0.7, 0.1, 0.2)
    few_shot_ratio: float = 1.0
    seasonality: int = 1
    class_period_base: float = 12.0  # classification: class c gets period base*(c+1)


def lr_schedule(epoch: int, cfg: TrainConfig) -> float:
    """Cosine annealing from lr0 to eta_min over t_max epochs, flat after."""
    if epoch < 0:
        raise TrainError("epoch must be >= 0")
    t = min(epoch, cfg.t_max)
    return cfg.eta_min + 0.5 * (cfg.lr0 - cfg.eta_min) * (1.0 + math.cos(math.pi * t / cfg.t_max))


class Adam:
    """Adam with bias correction; optionally the rectified variant that
    falls back to plain momentum while the variance estimate is untracked."""

    def __init__(self, params: dict[str, Tensor], cfg: TrainConfig):
        self.params = params
        self.cfg = cfg
        self.rectified = cfg.optimizer == "radam"
        self.m = {k: np.zeros_like(p.data) for k, p in params.items() if p.requires_grad}
        self.v = {k: np.zeros_like(p.data) for k, p in params.items() if p.requires_grad}
        self.t = 0

    def step(self, lr: float) -> None:
        b1, b2 = self.cfg.betas
        eps = self.cfg.eps
        self.t += 1
        t = self.t
        for name, p in self.params.items():
            if not p.requires_grad:
                continue
            g = p.grad if p.grad is not None else np.zeros_like(p.data)
            if not np.all(np.isfinite(g)):
                raise TrainError(f"non-finite gradient in tensor {name!r}")
            m = self.m[name]
            v = self.v[name]
            m *= b1
            m += (1.0 - b1) * g
            v *= b2
            v += (1.0 - b2) * g * g
            m_hat = m / (1.0 - b1**t)
            if not self.rectified:
                v_hat = v / (1.0 - b2**t)
                p.data -= lr * m_hat / (np.sqrt(v_hat) + eps)
                continue
            rho_inf = 2.0 / (1.0 - b2) - 1.0
            rho_t = rho_inf - 2.0 * t * b2**t / (1.0 - b2**t)
            if rho_t > 4.0:
                v_hat = np.sqrt(v / (1.0 - b2**t))
                r = math.sqrt(
                    ((rho_t - 4.0) * (rho_t - 2.0) * rho_inf)
                    / ((rho_inf - 4.0) * (rho_inf - 2.0) * rho_t)
                )
                p.data -= lr * r * m_hat / (v_hat + eps)
            else:
                p.data -= lr * m_hat

    def state_tensors(self) -> dict[str, np.ndarray]:
        state = {f"opt.m.{k}": v.copy() for k, v in self.m.items()}
        state.update({f"opt.v.{k}": v.copy() for k, v in self.v.items()})
        state["opt.t"] = np.asarray(float(self.t))
        return state

    def load_state(self, tensors: dict[str, np.ndarray]) -> None:
        for k in self.m:
            if f"opt.m.{k}" in tensors:
                self.m[k][...] = tensors[f"opt.m.{k}"]
                self.v[k][...] = tensors[f"opt.v.{k}"]
        if "opt.t" in tensors:
            self.t = int(tensors["opt.t"])


def optimizer_step(params: dict[str, Tensor], cfg: TrainConfig, state: Adam | None, lr: float) -> Adam:
    """One update; creates the optimizer state on first use."""
    if state is None:
        state = Adam(params, cfg)
    state.step(lr)
    return state


# ---------------------------------------------------------------------------
# Data assembly


def build_series(dcfg: DataConfig) -> MultivariateSeries:
    if dcfg.source == "csv":
        return load_csv(dcfg.path, has_header=dcfg.has_header, timestamp_col=dcfg.timestamp_col)
    if dcfg.source == "synth":
        return synth_generate(
            dcfg.kind,
            dcfg.length,
            seed=dcfg.data_seed,
            params={"channels": dcfg.channels, "noise": dcfg.noise},
        )
    raise DataError(f"unknown data source {dcfg.source!r}")


def forecast_splits(mcfg: ModelConfig, dcfg: DataConfig, series: MultivariateSeries | None = None):
    series = series or build_series(dcfg)
    samples = make_windows(series, mcfg.input_len, mcfg.horizon, dcfg.window_stride)
    train, val, test = chrono_split(samples, dcfg.fractions)
    if dcfg.few_shot_ratio < 1.0:
        train = few_shot_subset(train, dcfg.few_shot_ratio)
    return train, val, test


@dataclass(frozen=True)
class LabeledWindow:
    input: np.ndarray
    label: int
    origin: int


def classification_splits(mcfg: ModelConfig, dcfg: DataConfig):
    """Synthetic classification: class c is a sine mix whose base period is
    class_period_base * (c + 1); windows inherit the class label."""
    per_class: list[list[LabeledWindow]] = []
    for c in range(mcfg.n_classes):
        series = synth_generate(
            "sine_mix",
            dcfg.length,
            seed=dcfg.data_seed + c,
            params={
                "channels": 1,
                "noise": dcfg.noise,
                "periods": (dcfg.class_period_base * (c + 1), 97.0),
                "amplitudes": (1.0, 0.3),
            },
        )
        windows = make_windows(series, mcfg.input_len, 1, dcfg.window_stride)
        per_class.append([LabeledWindow(w.input, c, w.origin) for w in windows])

    def split(rows: list[LabeledWindow]):
        n = len(rows)
        c1 = int(dcfg.fractions[0] * n)
        c2 = int((dcfg.fractions[0] + dcfg.fractions[1]) * n)
        return rows[:c1], rows[c1:c2], rows[c2:]

    train: list[LabeledWindow] = []
    val: list[LabeledWindow] = []
    test: list[LabeledWindow] = []
    for rows in per_class:
        tr, va, ts = split(rows)
        if not tr or not va or not ts:
            raise DataError("classification split left an empty subset")
        train += tr
        val += va
        test += ts
    if dcfg.few_shot_ratio < 1.0:
        keep = int(np.ceil(dcfg.few_shot_ratio * len(train)))
        train = sorted(train, key=lambda r: (r.origin, r.label))[:keep]
    return train, val, test


def _as_sample(row, task: str):
    if task == "forecast":
        return (row.input, row.target)
    return (row.input, row.label)


# ---------------------------------------------------------------------------
# Evaluation


def evaluate_loss(model: Model, rows, kind: str) -> float:
    if not rows:
        raise TrainError("cannot evaluate on an empty split")
    total = 0.0
    with nm.no_grad():
        for row in rows:
            total += sample_loss(model, _as_sample(row, model.cfg.task), kind).item()
    return total / len(rows)


def evaluate_forecast(model: Model, rows, dcfg: DataConfig, loss_kind: str):
    """Per-window metrics plus aggregates; smape-trained runs get the
    percentage/scaled family, others get mse/mae."""
    per_rows = []
    horizon = model.cfg.horizon
    sq_by_step = np.zeros(horizon)
    abs_by_step = np.zeros(horizon)
    agg: dict[str, float] = {}
    use_m4 = loss_kind == "smape"
    sums = {}
    for i, row in enumerate(rows):
        pred = model.predict(row.input)
        err = row.target - pred
        sq_by_step += err**2
        abs_by_step += np.abs(err)
        mse, mae = point_metrics(row.target, pred)
        entry = {
            "index": i,
            "channel": row.channel_id,
            "origin": row.origin,
            "mse": mse,
            "mae": mae,
        }
        if use_m4:
            ref = naive2(row.input, horizon, dcfg.seasonality)
            sm, ma, owa = m4_metrics(row.target, pred, row.input, dcfg.seasonality, ref)
            entry.update({"smape": sm, "mase": ma, "owa": owa})
        per_rows.append(entry)
        for k, v in entry.items():
            if k not in ("index", "channel", "origin"):
                sums[k] = sums.get(k, 0.0) + v
    n = len(rows)
    agg = {k: v / n for k, v in sums.items()}
    report = MetricReport(
        task="forecast",
        values=agg,
        per_horizon={
            "mse": list(sq_by_step / n),
            "mae": list(abs_by_step / n),
        },
        sample_count=n,
        config_digest=model.cfg.digest().hex(),
    )
    return report, per_rows


def evaluate_classify(model: Model, rows):
    per_rows = []
    preds = []
    trues = []
    ce_sum = 0.0
    with nm.no_grad():
        for i, row in enumerate(rows):
            logits = model.predict(row.input)
            pred = int(np.argmax(logits))
            ce = sample_loss(model, (row.input, row.label), "ce").item()
            preds.append(pred)
            trues.append(row.label)
            ce_sum += ce
            per_rows.append(
                {"index": i, "origin": row.origin, "true": row.label, "pred": pred, "ce": ce}
            )
    report = MetricReport(
        task="classify",
        values={"accuracy": accuracy(preds, trues), "ce": ce_sum / len(rows)},
        sample_count=len(rows),
        config_digest=model.cfg.digest().hex(),
    )
    return report, per_rows


def last_value_baseline_mse(rows) -> float:
    """Test MSE of repeating each window's final observed value."""
    total = 0.0
    for row in rows:
        err = row.target - row.input[-1]
        total += float(np.mean(err**2))
    return total / len(rows)


# ---------------------------------------------------------------------------
# Training


@dataclass
class RunResult:
    report: MetricReport
    log_lines: list[str]
    epochs_run: int
    best_epoch: int
    best_val: float
    out_dir: Path | None
    checkpoint: Path | None
    per_window: list[dict] = field(default_factory=list)
    baseline_mse: float | None = None


def _epoch_order(seed: int, epoch: int, count: int) -> np.ndarray:
    return np.random.default_rng(seed * 1_000_003 + epoch).permutation(count)


def run_training(
    mcfg: ModelConfig,
    dcfg: DataConfig,
    tcfg: TrainConfig,
    out_dir: str | Path | None = None,
    resume: str | Path | None = None,
    run_name: str = "run",
) -> RunResult:
    if mcfg.task == "classify":
        train, val, test = classification_splits(mcfg, dcfg)
    else:
        train, val, test = forecast_splits(mcfg, dcfg)
    if not train:
        raise TrainError("empty training split")

    model = Model(mcfg, seed=tcfg.seed)
    if mcfg.task == "classify" and mcfg.mode == "fsca":
        examples: dict[int, np.ndarray] = {}
        for row in train:
            if row.label not in examples:
                examples[row.label] = row.input
        if len(examples) != mcfg.n_classes:
            raise TrainError("training split lacks an example for every class")
        model.set_class_examples(
            [examples[c] for c in range(mcfg.n_classes)], list(range(mcfg.n_classes))
        )

    opt = Adam(model.trainable_parameters(), tcfg)
    start_epoch = 0
    best_val = math.inf
    best_epoch = -1
    bad = 0
    best_state = model_state(model)
    log_lines: list[str] = []

    if resume is not None:
        digest, tensors = load_checkpoint(resume)
        if digest != mcfg.digest():
            raise TrainError("checkpoint was produced by a different model config")
        extras = load_model_state(model, tensors)
        opt.load_state(extras)
        start_epoch = int(extras.get("meta.epoch", np.asarray(0.0)))
        best_val = float(extras.get("meta.best_val", np.asarray(math.inf)))
        best_epoch = int(extras.get("meta.best_epoch", np.asarray(-1.0)))
        bad = int(extras.get("meta.bad", np.asarray(0.0)))
        best_state = {
            k[len("best.") :]: v for k, v in extras.items() if k.startswith("best.")
        } or model_state(model)

    epochs_run = start_epoch
    for epoch in range(start_epoch, tcfg.max_epochs):
        lr = lr_schedule(epoch, tcfg)
        order = _epoch_order(tcfg.seed, epoch, len(train))
        train_loss_sum = 0.0
        batch_count = 0
        for lo in range(0, len(order), tcfg.batch_size):
            batch = [train[i] for i in order[lo : lo + tcfg.batch_size]]
            losses = [sample_loss(model, _as_sample(r, mcfg.task), tcfg.loss) for r in batch]
            total = losses[0]
            for extra in losses[1:]:
                total = nm.add(total, extra)
            loss = nm.scale(total, 1.0 / len(losses))
            backward(loss)
            opt.step(lr)
            model.zero_grad()
            train_loss_sum += loss.item()
            batch_count += 1
        train_loss = train_loss_sum / max(batch_count, 1)
        val_metric = evaluate_loss(model, val, tcfg.loss)
        log_lines.append(f"{epoch}, {train_loss!r}, {val_metric!r}, {lr!r}")
        epochs_run = epoch + 1
        if val_metric < best_val:
            best_val = val_metric
            best_epoch = epoch
            best_state = model_state(model)
            bad = 0
        else:
            bad += 1
            if bad >= tcfg.patience:
                break

    load_model_state(model, best_state)

    if mcfg.task == "classify":
        report, per_window = evaluate_classify(model, test)
        baseline = None
    else:
        report, per_window = evaluate_forecast(model, test, dcfg, tcfg.loss)
        baseline = last_value_baseline_mse(test)
    report.values["val_best"] = best_val
    report.values["lr0_used"] = tcfg.lr0
    if baseline is not None:
        report.values["baseline_last_value_mse"] = baseline

    checkpoint_path = None
    out_path = None
    if out_dir is not None:
        out_path = Path(out_dir)
        out_path.mkdir(parents=True, exist_ok=True)
        checkpoint_path = out_path / "checkpoint.bin"
        extra = opt.state_tensors()
        extra["meta.epoch"] = np.asarray(float(epochs_run))
        extra["meta.best_val"] = np.asarray(best_val)
        extra["meta.best_epoch"] = np.asarray(float(best_epoch))
        extra["meta.bad"] = np.asarray(float(bad))
        extra.update({f"best.{k}": v for k, v in best_state.items()})
        save_checkpoint(checkpoint_path, model_state(model, extra=extra), mcfg.digest())
        report_io.write_run_outputs(
            out_path,
            report=report,
            per_window=per_window,
            log_lines=log_lines,
            run_name=run_name,
            train_cfg=tcfg,
            examples=_overlay_examples(model, test) if mcfg.task == "forecast" else None,
        )

    return RunResult(
        report=report,
        log_lines=log_lines,
        epochs_run=epochs_run,
        best_epoch=best_epoch,
        best_val=best_val,
        out_dir=out_path,
        checkpoint=checkpoint_path,
        per_window=per_window,
        baseline_mse=baseline,
    )


def _overlay_examples(model: Model, test_rows, count: int = 2):
    """History/target/prediction triples for the forecast overlay figure."""
    shown = []
    for row in test_rows[:count]:
        shown.append(
            {
                "input": np.asarray(row.input),
                "target": np.asarray(row.target),
                "prediction": model.predict(row.input),
            }
        )
    return shown


def evaluate_checkpoint(
    mcfg: ModelConfig,
    dcfg: DataConfig,
    tcfg: TrainConfig,
    checkpoint: str | Path,
    out_dir: str | Path | None = None,
    run_name: str = "eval",
) -> RunResult:
    """Test-set evaluation of a stored model; pairing it with a different
    data config than it was trained on gives the cross-dataset protocol
    (the model keeps its own normalization policy, windows bring their own
    per-window stats)."""
    digest, tensors = load_checkpoint(checkpoint)
    if digest != mcfg.digest():
        raise TrainError("checkpoint was produced by a different model config")
    model = Model(mcfg, seed=tcfg.seed)
    load_model_state(model, tensors)
    if mcfg.task == "classify":
        _, _, test = classification_splits(mcfg, dcfg)
        report, per_window = evaluate_classify(model, test)
        baseline = None
    else:
        _, _, test = forecast_splits(mcfg, dcfg)
        report, per_window = evaluate_forecast(model, test, dcfg, tcfg.loss)
        baseline = last_value_baseline_mse(test)
        report.values["baseline_last_value_mse"] = baseline
    out_path = None
    if out_dir is not None:
        out_path = Path(out_dir)
        out_path.mkdir(parents=True, exist_ok=True)
        report_io.write_run_outputs(
            out_path,
            report=report,
            per_window=per_window,
            log_lines=[],
            run_name=run_name,
            train_cfg=tcfg,
            examples=_overlay_examples(model, test) if mcfg.task == "forecast" else None,
        )
    return RunResult(
        report=report,
        log_lines=[],
        epochs_run=0,
        best_epoch=-1,
        best_val=math.nan,
        out_dir=out_path,
        checkpoint=Path(checkpoint),
        per_window=per_window,
        baseline_mse=baseline,
    )


# ---------------------------------------------------------------------------
# Ablations


KNOWN_VARIANTS = ("full", "no_dsca", "random_adjacency", "no_coarse")
VARIANT_GROUPS = {
    "layer_sweep": ("layers_1", "layers_2", "layers_3"),
    "insertion_sweep": ("insert_0", "insert_0-2", "insert_0-4", "insert_0-2-4", "insert_2-4"),
    "parts_sweep": ("parts_1", "parts_2", "parts_3", "parts_4"),
}
ORDERING_SLACK = 1.02  # full may trail a stripped variant by <= 2% before failing


@dataclass(frozen=True)
class AblationPlan:
    variants: tuple[str, ...]
    seeds: tuple[int, ...]

    def expanded(self) -> tuple[str, ...]:
        out: list[str] = []
        for v in self.variants:
            out.extend(VARIANT_GROUPS.get(v, (v,)))
        return tuple(out)


def variant_config(base: ModelConfig, variant: str) -> ModelConfig:
    if variant == "full":
        return base
    if variant == "no_dsca":
        return replace(base, dsca_enabled=False)
    if variant == "random_adjacency":
        return replace(base, adjacency="random_frozen")
    if variant == "no_coarse":
        return replace(base, coarse_enabled=False)
    if variant.startswith("layers_"):
        layers = int(variant.split("_", 1)[1])
        bb = replace(
            base.backbone,
            layers=layers,
            insertion_positions=(0, layers) if layers > 0 else (0,),
        )
        return replace(base, backbone=bb)
    if variant.startswith("insert_"):
        positions = tuple(int(x) for x in variant.split("_", 1)[1].split("-"))
        return replace(base, backbone=replace(base.backbone, insertion_positions=positions))
    if variant.startswith("parts_"):
        return replace(base, n_parts=int(variant.split("_", 1)[1]))
    raise TrainError(f"unknown ablation variant {variant!r}")


def run_ablation(
    plan: AblationPlan,
    mcfg: ModelConfig,
    dcfg: DataConfig,
    tcfg: TrainConfig,
    out_dir: str | Path | None = None,
) -> dict:
    """One run per (variant, seed); aggregates the primary test metric and
    flags (without failing) orderings where the full model trails a
    stripped variant by more than the 2% noise allowance."""
    if not plan.seeds:
        raise TrainError("ablation needs at least one seed")
    primary = "accuracy" if mcfg.task == "classify" else "mse"
    results: dict[str, dict] = {}
    for variant in plan.expanded():
        per_seed: dict[str, float] = {}
        errors: dict[str, str] = {}
        for seed in plan.seeds:
            try:
                cfg = variant_config(mcfg, variant)
                res = run_training(cfg, dcfg, replace(tcfg, seed=seed))
                per_seed[str(seed)] = res.report.values[primary]
            except Exception as exc:  # record, keep the other runs running
                errors[str(seed)] = f"{type(exc).__name__}: {exc}"
        entry: dict = {"per_seed": per_seed}
        if errors:
            entry["errors"] = errors
        if per_seed:
            entry["mean"] = float(np.mean(list(per_seed.values())))
        results[variant] = entry

    flags: list[str] = []
    if "full" in results and "mean" in results["full"] and mcfg.task == "forecast":
        full_mse = results["full"]["mean"]
        for other in ("no_coarse", "random_adjacency", "no_dsca"):
            if other in results and "mean" in results[other]:
                if full_mse > results[other]["mean"]:
                    flags.append(
                        f"full mean mse {full_mse:.6f} exceeds {other} "
                        f"{results[other]['mean']:.6f}"
                    )
    summary = {
        "metric": primary,
        "seeds": list(plan.seeds),
        "variants": results,
        "ordering_flags": flags,
    }
    if out_dir is not None:
        out_path = Path(out_dir)
        out_path.mkdir(parents=True, exist_ok=True)
        report_io.write_ablation_outputs(out_path, summary)
    return summary
