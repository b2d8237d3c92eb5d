"""Adam, the per-fold epoch loop, checkpointing and the cross-validation driver."""

from __future__ import annotations

import logging
from collections import OrderedDict
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np

from .architecture import Model, NetworkConfig, count_parameters, load_model, save_model
from .dataset import Case
from .losses import MetricsReport, combined_loss
from .split import DatasetSplit
from .tensor import Tensor

logger = logging.getLogger(__name__)


class TrainingDivergedError(FloatingPointError):
    def __init__(self, message: str, checkpoint: Path | None = None):
        super().__init__(message)
        self.checkpoint = checkpoint


@dataclass
class AdamState:
    m: dict[str, np.ndarray]
    v: dict[str, np.ndarray]
    t: int = 0
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    @classmethod
    def zeros_like(cls, params: Mapping[str, Tensor], **hyper) -> "AdamState":
        m = {k: np.zeros_like(p.data) for k, p in params.items()}
        v = {k: np.zeros_like(p.data) for k, p in params.items()}
        return cls(m, v, **hyper)

    def entries(self) -> dict[str, np.ndarray]:
        out = {"adam.t": np.array(float(self.t))}
        out.update({f"adam.m.{k}": a for k, a in self.m.items()})
        out.update({f"adam.v.{k}": a for k, a in self.v.items()})
        return out

    def load_entries(self, entries: Mapping[str, np.ndarray]) -> None:
        self.t = int(entries["adam.t"])
        for k in self.m:
            self.m[k] = np.array(entries[f"adam.m.{k}"], dtype=self.m[k].dtype)
            self.v[k] = np.array(entries[f"adam.v.{k}"], dtype=self.v[k].dtype)


def adam_step(params: Mapping[str, Tensor], state: AdamState) -> None:
    """One bias-corrected Adam update, in place. Parameters without a gradient are skipped."""
    grads = {}
    for name, p in params.items():
        if p.grad is None:
            continue
        if p.grad.shape != p.shape:
            raise ValueError(f"{name}: gradient shape {p.grad.shape} does not match {p.shape}")
        if not np.all(np.isfinite(p.grad)):
            raise FloatingPointError(f"non-finite gradient for parameter {name}")
        grads[name] = p.grad
    state.t += 1
    b1, b2 = state.beta1, state.beta2
    c1 = 1 - b1**state.t
    c2 = 1 - b2**state.t
    for name, g in grads.items():
        p = params[name]
        m = state.m[name] = b1 * state.m[name] + (1 - b1) * g
        v = state.v[name] = b2 * state.v[name] + (1 - b2) * (g * g)
        m_hat = m / c1
        v_hat = v / c2
        p.data = (p.data - state.lr * m_hat / (np.sqrt(v_hat) + state.eps)).astype(p.dtype, copy=False)


@dataclass
class TrainConfig:
    epochs: int = 30
    batch_size: int = 1
    seed: int = 0
    lr: float = 1e-3
    checkpoint_every: int = 0
    patience: int | None = None
    dtype: str = "float32"
    threshold: float = 0.5

    def __post_init__(self):
        if self.epochs < 1:
            raise ValueError("epochs must be >= 1")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if self.dtype not in ("float32", "float64"):
            raise ValueError(f"dtype must be float32 or float64, got {self.dtype!r}")

    @property
    def np_dtype(self):
        return np.dtype(self.dtype)


LOG_COLUMNS = ("epoch", "loss", "dice_term", "bce_term", "val_dc", "val_ji", "val_ac")


@dataclass
class TrainLog:
    rows: list[tuple] = field(default_factory=list)
    best_epoch: int = 0

    def append(self, row: tuple) -> None:
        if self.rows and row[0] <= self.rows[-1][0]:
            raise ValueError("epoch index must increase")
        if not all(np.isfinite(v) for v in row[1:]):
            raise ValueError(f"non-finite value in log row {row}")
        self.rows.append(tuple(row))

    def column(self, name: str) -> list[float]:
        i = LOG_COLUMNS.index(name)
        return [r[i] for r in self.rows]

    def to_text(self) -> str:
        lines = ["\t".join(LOG_COLUMNS)]
        for r in self.rows:
            lines.append("\t".join([str(r[0])] + [f"{v:.17g}" for v in r[1:]]))
        return "\n".join(lines) + "\n"


def _batch(cases: Sequence[Case], dtype) -> tuple[Tensor, np.ndarray]:
    x = np.stack([c.image for c in cases])[:, None]
    y = np.stack([c.mask for c in cases])[:, None]
    return Tensor(x, dtype=dtype), y.astype(dtype)


def evaluate_model(model: Model, cases: Sequence[Case], threshold: float = 0.5) -> MetricsReport:
    report = MetricsReport()
    for c in cases:
        report.add(c.case_id, c.mask, model.predict(c.image), threshold)
    return report


def _snapshot(model: Model) -> "OrderedDict[str, np.ndarray]":
    return OrderedDict((k, v.copy()) for k, v in model.state_dict().items())


def train_fold(
    model: Model,
    train_cases: Sequence[Case],
    val_cases: Sequence[Case],
    config: TrainConfig,
    checkpoint_dir=None,
    resume=None,
) -> tuple[Model, TrainLog]:
    """Train on ``train_cases`` and keep the epoch with the best validation Dice.

    The returned model carries the best-epoch weights. With ``checkpoint_dir``
    set, ``best.ckpt`` tracks the best epoch and ``epoch_XXXX.ckpt`` files are
    written every ``checkpoint_every`` epochs (model plus optimizer state).
    """
    train_ids = {c.case_id for c in train_cases}
    if train_ids & {c.case_id for c in val_cases}:
        raise ValueError("train and validation cases overlap")
    if not train_cases:
        raise ValueError("no training cases")
    dtype = config.np_dtype
    params = OrderedDict(model.named_parameters())
    state = AdamState.zeros_like(params, lr=config.lr)
    log = TrainLog()
    ckdir = Path(checkpoint_dir) if checkpoint_dir is not None else None
    if ckdir is not None:
        ckdir.mkdir(parents=True, exist_ok=True)
    start = 1
    best_dc, best_state = -1.0, None
    if resume is not None:
        start, best_dc, best_state = _resume(model, state, resume)
        params = OrderedDict(model.named_parameters())
    last_good = _snapshot(model)
    last_good_epoch = start - 1
    stale = 0

    for epoch in range(start, config.epochs + 1):
        model.train()
        rng = np.random.default_rng([config.seed, epoch])
        order = rng.permutation(len(train_cases))
        sums = np.zeros(3)
        n_batches = 0
        for b in range(0, len(order), config.batch_size):
            batch = [train_cases[i] for i in order[b:b + config.batch_size]]
            x, y = _batch(batch, dtype)
            model.zero_grad()
            try:
                loss = combined_loss(y, model(x))
                loss.total.backward()
                adam_step(params, state)
            except FloatingPointError as exc:
                model.load_state_dict(last_good)
                path = None
                if ckdir is not None:
                    path = ckdir / "last_good.ckpt"
                    save_model(path, model, {"train.epoch": np.array(float(last_good_epoch))})
                raise TrainingDivergedError(f"epoch {epoch}: {exc}", path) from exc
            sums += (float(loss.total.data), loss.dice_term, loss.bce_term)
            n_batches += 1
        val = evaluate_model(model, val_cases, config.threshold) if val_cases else None
        vdc, vji, vac = val.aggregate if val else (0.0, 0.0, 0.0)
        means = sums / n_batches
        log.append((epoch, *map(float, means), vdc, vji, vac))
        logger.info("epoch %d loss %.4f val dc %.4f", epoch, means[0], vdc)
        last_good, last_good_epoch = _snapshot(model), epoch

        if vdc > best_dc:
            best_dc, best_state, log.best_epoch, stale = vdc, _snapshot(model), epoch, 0
            if ckdir is not None:
                save_model(ckdir / "best.ckpt", model, {"train.epoch": np.array(float(epoch)),
                                                        "train.best_dc": np.array(vdc)})
        else:
            stale += 1
        if ckdir is not None and config.checkpoint_every and epoch % config.checkpoint_every == 0:
            extra = state.entries()
            extra["train.epoch"] = np.array(float(epoch))
            extra["train.best_dc"] = np.array(best_dc)
            save_model(ckdir / f"epoch_{epoch:04d}.ckpt", model, extra)
        if config.patience is not None and stale >= config.patience:
            break

    if best_state is not None:
        model.load_state_dict(best_state)
    return model, log


def _resume(model: Model, state: AdamState, path) -> tuple[int, float, "OrderedDict | None"]:
    path = Path(path)
    loaded, extra = load_model(path)
    model.load_state_dict(loaded.state_dict())
    state.load_entries(extra)
    best_state = None
    best_path = path.parent / "best.ckpt"
    if best_path.exists():
        best_model, _ = load_model(best_path)
        best_state = _snapshot(best_model)
    return int(extra["train.epoch"]) + 1, float(extra.get("train.best_dc", -1.0)), best_state


@dataclass
class CVResult:
    variant: str
    n_params: int
    logs: list[TrainLog]
    train_reports: list[MetricsReport]
    val_reports: list[MetricsReport]
    test_report: MetricsReport
    best_fold: int

    def mean_over_folds(self, reports: list[MetricsReport]) -> tuple[float, float, float]:
        arr = np.array([r.aggregate for r in reports])
        return tuple(float(v) for v in arr.mean(axis=0))

    def table_row(self) -> list[float]:
        """AC, DC, JI for train, validation and test (best-epoch fold means)."""
        row = []
        for agg in (self.mean_over_folds(self.train_reports), self.mean_over_folds(self.val_reports),
                    self.test_report.aggregate):
            dc, ji, ac = agg
            row += [ac, dc, ji]
        return row


TABLE_HEADER = ("method", "params", "train_ac", "train_dc", "train_ji",
                "val_ac", "val_dc", "val_ji", "test_ac", "test_dc", "test_ji")


def results_table(results: Sequence[CVResult]) -> str:
    """Text table shaped like the comparison table: one row per variant."""
    lines = ["# best-epoch means over folds; test uses the best-validation fold model",
             "\t".join(TABLE_HEADER)]
    for r in results:
        lines.append("\t".join([r.variant, str(r.n_params)] + [f"{v:.4f}" for v in r.table_row()]))
    return "\n".join(lines) + "\n"


def cross_validate(
    cases: Mapping[str, Case],
    split: DatasetSplit,
    net_config: NetworkConfig,
    config: TrainConfig,
    out_dir=None,
) -> CVResult:
    """Train one model per fold, then score the best-validation model on the test ids."""
    missing = [c for c in split.all_ids() if c not in cases]
    if missing:
        raise KeyError(f"split references unknown case ids: {missing[:5]}")
    out = Path(out_dir) if out_dir is not None else None
    logs, train_reports, val_reports, models = [], [], [], []
    for fold in range(split.k):
        model = Model(replace(net_config, seed=net_config.seed + fold), dtype=config.np_dtype)
        tr = [cases[c] for c in split.train_ids(fold)]
        va = [cases[c] for c in split.val_ids(fold)]
        fold_dir = out / f"fold{fold}" if out is not None else None
        model, log = train_fold(model, tr, va, replace(config, seed=config.seed + fold), fold_dir)
        logs.append(log)
        train_reports.append(evaluate_model(model, tr, config.threshold))
        val_reports.append(evaluate_model(model, va, config.threshold))
        models.append(model)
        if fold_dir is not None:
            (fold_dir / "log.tsv").write_text(log.to_text())
            (fold_dir / "val_metrics.tsv").write_text(val_reports[-1].to_text())
    best = int(np.argmax([r.aggregate[0] for r in val_reports]))
    test_report = evaluate_model(models[best], [cases[c] for c in split.test_ids], config.threshold)
    result = CVResult(net_config.variant, count_parameters(models[best]), logs, train_reports,
                      val_reports, test_report, best)
    if out is not None:
        (out / "test_metrics.tsv").write_text(test_report.to_text())
        (out / "summary.tsv").write_text(results_table([result]))
    return result
