"""Experiment harness: teacher training, distillation runs, and the
ablation protocols (component ablation, alpha/beta sweeps, confidence
split, noisy labels, teacher-size ladder, beta guidance from the logit
gap, logit-correlation differences, linear probing, timing).

Every protocol is a pure function of its configs and seeds; rerunning
reproduces all reported numbers bit-identically in single-threaded mode
(wall-clock fields excepted). Runs persist as `runs/<run_id>/record.jsonl`
(one metrics object per epoch) plus `checkpoint.json`, with per-experiment
`summary.csv` files.
"""

from __future__ import annotations

import csv
import hashlib
import json
import time
import warnings
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

import numpy as np

from . import data as data_mod
from .core import softmax
from .data import LabeledDataset, SyntheticSpec, batch_iter, gen_hierarchical_gaussians, split
from .losses import DistillConfig, distill_loss
from .nn import (
    LrSchedule,
    MlpModel,
    backward,
    check_finite,
    count_parameters,
    extract_features,
    forward,
    init_mlp,
    init_sgd,
    lr_at,
    predict_logits,
    save_checkpoint,
    sgd_step,
)

SUMMARY_COLUMNS = ("experiment", "pair", "mode", "alpha", "beta", "T", "seed",
                   "final_val_acc", "mean_coupling_weight", "wall_time_s")

# (mean logit gap, beta) reference points for gap-guided beta selection.
GAP_BETA_TABLE = ((5.36, 2.0), (6.73, 2.0), (7.24, 6.0), (8.25, 6.0), (8.40, 8.0), (8.53, 8.0))

DEFAULT_NOISE_RATIOS = (0.1, 0.2, 0.3)
DEFAULT_TEACHER_LADDER = (64, 128, 256)
DEFAULT_BETA_SWEEP = (1.0, 2.0, 4.0, 8.0)
DEFAULT_ALPHA_SWEEP = (0.0, 0.2, 0.5, 1.0, 2.0, 4.0)


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 60
    batch_size: int = 64
    base_lr: float = 0.05
    momentum: float = 0.9
    weight_decay: float = 5e-4
    decay_epochs: tuple[int, ...] = (40, 50)
    decay_factor: float = 0.1
    warmup_epochs: int = 5
    seed: int = 0
    select_best_epoch: bool = False

    def __post_init__(self):
        if self.epochs < 0:
            raise ValueError("epochs must be >= 0")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")


@dataclass(frozen=True)
class PairConfig:
    """One teacher-student benchmark: data spec, architectures, loss knobs."""

    data_spec: SyntheticSpec = SyntheticSpec()
    teacher_dims: tuple[int, ...] = (32, 256, 256, 20)
    student_dims: tuple[int, ...] = (32, 32, 20)
    train_fraction: float = 0.8
    split_seed: int = 0
    teacher_train: TrainConfig = TrainConfig(seed=0)
    student_train: TrainConfig = TrainConfig(seed=0)
    temperature: float = 4.0
    alpha: float = 1.0
    ce_weight: float = 1.0

    def __post_init__(self):
        d, c = self.data_spec.dimension, self.data_spec.class_count
        for name, dims in (("teacher_dims", self.teacher_dims), ("student_dims", self.student_dims)):
            if dims[0] != d or dims[-1] != c:
                raise ValueError(f"{name} must run {d} -> {c} for this data spec, got {dims}")

    @property
    def pair_name(self) -> str:
        t = "x".join(str(d) for d in self.teacher_dims[1:-1])
        s = "x".join(str(d) for d in self.student_dims[1:-1])
        return f"t{t}-s{s}"


def default_pair_config(seed: int = 0) -> PairConfig:
    """The desk-scale benchmark recipe used by the acceptance suite."""
    return PairConfig(student_train=TrainConfig(seed=seed))


@dataclass
class RunRecord:
    run_id: str
    kind: str  # "teacher" or "distill"
    config: dict
    seed: int
    epochs: list = field(default_factory=list)
    final: dict = field(default_factory=dict)


@dataclass
class GapReport:
    """Per-sample target-vs-best-other logit gaps and the beta they suggest."""

    mean_gap: float
    gaps: np.ndarray
    suggested_beta: float


@dataclass
class CorrelationDiff:
    mean_abs_diff: float
    max_abs_diff: float
    teacher_corr: np.ndarray
    student_corr: np.ndarray
    diff: np.ndarray


def evaluate_accuracy(model: MlpModel, dataset: LabeledDataset) -> float:
    logits = predict_logits(model, dataset.features)
    return float((logits.argmax(axis=1) == dataset.labels).mean())


def make_benchmark(pair: PairConfig) -> tuple[LabeledDataset, LabeledDataset]:
    """Generate the pair's dataset and split it into (train, validation)."""
    ds = gen_hierarchical_gaussians(pair.data_spec)
    return split(ds, pair.train_fraction, seed=pair.split_seed)


# ---------------------------------------------------------------------------
# Training loops.


def _run_id(kind: str, mode: str, config: dict, seed: int) -> str:
    digest = hashlib.sha1(json.dumps(config, sort_keys=True).encode()).hexdigest()[:8]
    return f"{kind}-{mode}-s{seed}-{digest}"


def _train(layer_dims, train_ds: LabeledDataset, val_ds: LabeledDataset, tcfg: TrainConfig,
           dcfg: DistillConfig, teacher: MlpModel | None = None,
           nckd_sample_weight=None, kind: str = "distill",
           out_dir=None) -> tuple[MlpModel, RunRecord]:
    """Shared SGD loop for teachers (mode 'ce', no teacher) and students."""
    start = time.perf_counter()
    model = init_mlp(layer_dims, seed=tcfg.seed)
    schedule = LrSchedule(tcfg.base_lr, tcfg.warmup_epochs, tuple(tcfg.decay_epochs),
                          tcfg.decay_factor)
    state = init_sgd(model, tcfg.base_lr, tcfg.momentum, tcfg.weight_decay)

    teacher_logits = None
    mean_coupling = None
    if teacher is not None:
        if teacher.class_count != train_ds.class_count:
            raise ValueError(f"teacher has {teacher.class_count} classes, dataset has "
                             f"{train_ds.class_count}")
        if teacher.input_dim != train_ds.dim:
            raise ValueError(f"teacher input dim {teacher.input_dim} != dataset dim {train_ds.dim}")
        teacher_logits = predict_logits(teacher, train_ds.features)
        mean_coupling = float(_coupling_weights(teacher_logits, train_ds.labels,
                                                dcfg.temperature).mean())

    config = {
        "layer_dims": list(layer_dims),
        "train": asdict(tcfg),
        "distill": asdict(dcfg),
        "n_train": train_ds.n_samples,
        "n_val": val_ds.n_samples,
        "class_count": train_ds.class_count,
    }
    record = RunRecord(run_id=_run_id(kind, dcfg.mode, config, tcfg.seed), kind=kind,
                       config=config, seed=tcfg.seed)

    X, y = train_ds.features, train_ds.labels
    weight_vec = None
    if nckd_sample_weight is not None:
        weight_vec = np.asarray(nckd_sample_weight, dtype=np.float64)
        if weight_vec.shape != (train_ds.n_samples,):
            raise ValueError("nckd_sample_weight must have one entry per training sample")

    best_val, best_epoch, best_params = -1.0, -1, None
    for epoch in range(tcfg.epochs):
        t0 = time.perf_counter()
        state.lr = lr_at(schedule, epoch)
        sums = {"total": 0.0, "ce": 0.0, "tckd": 0.0, "nckd": 0.0}
        for idx in batch_iter(train_ds, tcfg.batch_size, epoch_seed=tcfg.seed, epoch=epoch):
            logits, cache = forward(model, X[idx])
            out = distill_loss(
                None if teacher_logits is None else teacher_logits[idx],
                logits, y[idx], dcfg,
                nckd_sample_weight=None if weight_vec is None else weight_vec[idx],
            )
            grads_w, grads_b = backward(model, cache, out.grad_student_logits)
            sgd_step(model, grads_w, grads_b, state)
            check_finite(model, context=f"epoch {epoch}")
            w = idx.size
            sums["total"] += out.total * w
            sums["ce"] += out.per_term["ce"] * w
            sums["tckd"] += out.per_term["tckd"] * w
            sums["nckd"] += out.per_term["nckd"] * w
        n = train_ds.n_samples
        train_acc = evaluate_accuracy(model, train_ds)
        val_acc = evaluate_accuracy(model, val_ds)
        record.epochs.append({
            "epoch": epoch,
            "lr": state.lr,
            "loss_total": sums["total"] / n,
            "loss_ce": sums["ce"] / n,
            "loss_tckd": sums["tckd"] / n,
            "loss_nckd": sums["nckd"] / n,
            "train_acc": train_acc,
            "val_acc": val_acc,
            "mean_coupling_weight": mean_coupling,
            "epoch_time_s": time.perf_counter() - t0,
        })
        if val_acc > best_val:
            best_val, best_epoch = val_acc, epoch
            if tcfg.select_best_epoch:
                best_params = ([W.copy() for W in model.weights], [b.copy() for b in model.biases])
    if tcfg.select_best_epoch and best_params is not None:
        model.weights, model.biases = best_params

    gaps = _logit_gaps(predict_logits(model, X), y)
    record.final = {
        "final_train_acc": evaluate_accuracy(model, train_ds),
        "final_val_acc": evaluate_accuracy(model, val_ds),
        "best_val_acc": best_val if best_epoch >= 0 else None,
        "best_epoch": best_epoch if best_epoch >= 0 else None,
        "mean_gap": float(gaps.mean()),
        "mean_coupling_weight": mean_coupling,
        "trained_epochs": tcfg.epochs,
        "wall_time_s": time.perf_counter() - start,
    }
    if out_dir is not None:
        write_run(record, model, out_dir)
    return model, record


def train_teacher(layer_dims, train_ds, val_ds, tcfg: TrainConfig,
                  out_dir=None) -> tuple[MlpModel, RunRecord]:
    """Cross-entropy training for a teacher (or any standalone model)."""
    dcfg = DistillConfig(mode="ce", ce_weight=1.0)
    return _train(layer_dims, train_ds, val_ds, tcfg, dcfg, teacher=None,
                  kind="teacher", out_dir=out_dir)


def distill(teacher: MlpModel, student_dims, train_ds, val_ds, dcfg: DistillConfig,
            tcfg: TrainConfig, nckd_sample_weight=None,
            out_dir=None) -> tuple[MlpModel, RunRecord]:
    """Train a student against a frozen teacher with the configured loss mode."""
    return _train(student_dims, train_ds, val_ds, tcfg, dcfg, teacher=teacher,
                  nckd_sample_weight=nckd_sample_weight, kind="distill", out_dir=out_dir)


def _coupling_weights(teacher_logits: np.ndarray, targets: np.ndarray,
                      temperature: float) -> np.ndarray:
    """Teacher non-target mass (1 - p_target) per sample at temperature T."""
    p = softmax(teacher_logits, temperature)
    p = p.copy()
    p[np.arange(p.shape[0]), targets] = 0.0
    return p.sum(axis=1)


def _logit_gaps(logits: np.ndarray, targets: np.ndarray) -> np.ndarray:
    """Per-sample z_target - max(non-target z), on raw logits."""
    n = logits.shape[0]
    rows = np.arange(n)
    z_t = logits[rows, targets]
    masked = logits.copy()
    masked[rows, targets] = -np.inf
    return z_t - masked.max(axis=1)


# ---------------------------------------------------------------------------
# Beta guidance.


def suggest_beta(mean_gap: float) -> float:
    """Nearest-neighbor lookup of beta from the (gap, beta) reference table.

    Exact midpoint ties resolve to the larger beta.
    """
    g = float(mean_gap)
    if not np.isfinite(g):
        raise ValueError("mean_gap must be finite")
    best_dist, best_beta = np.inf, None
    for gap, beta in GAP_BETA_TABLE:
        dist = abs(g - gap)
        if dist < best_dist or (dist == best_dist and beta > best_beta):
            best_dist, best_beta = dist, beta
    return best_beta


def beta_gap_statistic(teacher: MlpModel, dataset: LabeledDataset) -> GapReport:
    """Mean target-vs-best-other logit gap of a teacher on a dataset.

    Gaps are measured on raw (untempered) logits. The suggested beta is
    the table lookup at the mean gap.
    """
    if dataset.class_count < 2:
        raise ValueError("gap statistic requires at least 2 classes")
    gaps = _logit_gaps(predict_logits(teacher, dataset.features), dataset.labels)
    mean_gap = float(gaps.mean())
    return GapReport(mean_gap=mean_gap, gaps=gaps, suggested_beta=suggest_beta(mean_gap))


# ---------------------------------------------------------------------------
# Protocols.


def _mode_config(pair: PairConfig, mode: str, alpha=None, beta=None,
                 per_sample_beta=False) -> DistillConfig:
    return DistillConfig(
        mode=mode,
        alpha=pair.alpha if alpha is None else alpha,
        beta=1.0 if beta is None else beta,
        temperature=pair.temperature,
        per_sample_beta=per_sample_beta,
        ce_weight=pair.ce_weight,
    )


def _student_runs(teacher, pair: PairConfig, train_ds, val_ds, dcfg, seeds,
                  nckd_sample_weight=None, out_dir=None, experiment="") -> list[RunRecord]:
    records = []
    for seed in seeds:
        tcfg = replace(pair.student_train, seed=seed)
        _, rec = distill(teacher, pair.student_dims, train_ds, val_ds, dcfg, tcfg,
                         nckd_sample_weight=nckd_sample_weight, out_dir=out_dir)
        rec.config["experiment"] = experiment
        rec.config["pair"] = pair.pair_name
        records.append(rec)
    return records


def _acc_stats(records: list[RunRecord]) -> dict:
    accs = np.array([r.final["final_val_acc"] for r in records])
    return {"mean": float(accs.mean()), "std": float(accs.std()), "accs": accs.tolist()}


def prepare_teacher(pair: PairConfig, train_ds, val_ds, out_dir=None) -> tuple[MlpModel, RunRecord]:
    return train_teacher(pair.teacher_dims, train_ds, val_ds, pair.teacher_train, out_dir=out_dir)


def ablate_components(pair: PairConfig, seeds=(0,), out_dir=None) -> dict:
    """Baseline / KD / TCKD-only / NCKD-only accuracies, mean +- std over seeds."""
    if len(seeds) < 1:
        raise ValueError("need at least one seed")
    train_ds, val_ds = make_benchmark(pair)
    teacher, teacher_rec = prepare_teacher(pair, train_ds, val_ds, out_dir=out_dir)
    rows = []
    run_rows = []
    baseline_mean = None
    for mode in ("ce", "kd", "tckd_only", "nckd_only"):
        dcfg = _mode_config(pair, mode)
        records = _student_runs(teacher, pair, train_ds, val_ds, dcfg, seeds,
                                out_dir=out_dir, experiment="ablate_components")
        stats = _acc_stats(records)
        if mode == "ce":
            baseline_mean = stats["mean"]
        rows.append({"mode": mode, **stats, "delta": stats["mean"] - baseline_mean})
        run_rows += [_summary_row("ablate_components", pair, dcfg, r) for r in records]
    result = {"teacher_val_acc": teacher_rec.final["final_val_acc"], "rows": rows}
    if out_dir is not None:
        _write_summary_csv(Path(out_dir) / "ablate_components_summary.csv", run_rows)
    return result


def sweep_beta(pair: PairConfig, betas=DEFAULT_BETA_SWEEP, alpha: float = 1.0,
               seeds=(0,), out_dir=None) -> dict:
    """Accuracy per beta, with the per-sample coupling weight as the baseline column."""
    if len(betas) < 1:
        raise ValueError("beta list must be nonempty")
    train_ds, val_ds = make_benchmark(pair)
    teacher, _ = prepare_teacher(pair, train_ds, val_ds, out_dir=out_dir)
    columns, run_rows = [], []
    cells = [("coupled", _mode_config(pair, "dkd", alpha=alpha, per_sample_beta=True))]
    cells += [(float(b), _mode_config(pair, "dkd", alpha=alpha, beta=float(b))) for b in betas]
    for label, dcfg in cells:
        records = _student_runs(teacher, pair, train_ds, val_ds, dcfg, seeds,
                                out_dir=out_dir, experiment="sweep_beta")
        columns.append({"beta": label, **_acc_stats(records)})
        run_rows += [_summary_row("sweep_beta", pair, dcfg, r) for r in records]
    if out_dir is not None:
        _write_summary_csv(Path(out_dir) / "sweep_beta_summary.csv", run_rows)
    return {"alpha": alpha, "columns": columns}


def sweep_alpha(pair: PairConfig, alphas=DEFAULT_ALPHA_SWEEP, beta: float = 8.0,
                seeds=(0,), out_dir=None) -> dict:
    """Accuracy per alpha at a fixed beta."""
    if len(alphas) < 1:
        raise ValueError("alpha list must be nonempty")
    train_ds, val_ds = make_benchmark(pair)
    teacher, _ = prepare_teacher(pair, train_ds, val_ds, out_dir=out_dir)
    columns, run_rows = [], []
    for a in alphas:
        dcfg = _mode_config(pair, "dkd", alpha=float(a), beta=beta)
        records = _student_runs(teacher, pair, train_ds, val_ds, dcfg, seeds,
                                out_dir=out_dir, experiment="sweep_alpha")
        columns.append({"alpha": float(a), **_acc_stats(records)})
        run_rows += [_summary_row("sweep_alpha", pair, dcfg, r) for r in records]
    if out_dir is not None:
        _write_summary_csv(Path(out_dir) / "sweep_alpha_summary.csv", run_rows)
    return {"beta": beta, "columns": columns}


def confidence_split_masks(teacher: MlpModel, train_ds: LabeledDataset,
                           temperature: float) -> dict[str, np.ndarray]:
    """Partition training samples by teacher target confidence at T.

    Samples are ranked by the teacher's softened target probability
    (ties broken by sample index); 'top50' holds the ceil(N/2) most
    confident samples, 'bottom50' the rest, 'both' everything.
    """
    logits = predict_logits(teacher, train_ds.features)
    from .core import softmax

    p_t = softmax(logits, temperature)[np.arange(train_ds.n_samples), train_ds.labels]
    order = np.argsort(-p_t, kind="stable")
    n_top = int(np.ceil(train_ds.n_samples / 2))
    top = np.zeros(train_ds.n_samples, dtype=bool)
    top[order[:n_top]] = True
    return {"both": np.ones(train_ds.n_samples, dtype=bool), "top50": top, "bottom50": ~top}


def confidence_split_experiment(teacher: MlpModel, train_ds, val_ds, pair: PairConfig,
                                seeds=(0,), out_dir=None) -> dict:
    """NCKD restricted to confidence subsets; cross-entropy stays on the whole set."""
    masks = confidence_split_masks(teacher, train_ds, pair.temperature)
    dcfg = _mode_config(pair, "nckd_only")
    rows, run_rows = [], []
    for name in ("both", "top50", "bottom50"):
        weight = masks[name].astype(np.float64)
        records = _student_runs(teacher, pair, train_ds, val_ds, dcfg, seeds,
                                nckd_sample_weight=weight, out_dir=out_dir,
                                experiment=f"confidence_split_{name}")
        rows.append({"subset": name, "n_samples": int(masks[name].sum()), **_acc_stats(records)})
        run_rows += [_summary_row(f"confidence_split_{name}", pair, dcfg, r) for r in records]
    if out_dir is not None:
        _write_summary_csv(Path(out_dir) / "confidence_split_summary.csv", run_rows)
    return {"rows": rows}


def noisy_label_experiment(ratios, pair: PairConfig, seeds=(0,), out_dir=None) -> dict:
    """TCKD's marginal effect under symmetric label noise.

    For each ratio the training labels are corrupted, a teacher is
    retrained on the noisy labels (keeping its best clean-validation
    epoch when ratio > 0), and students are distilled with TCKD (mode
    'kd') and without it (mode 'nckd_only'). Validation stays clean.
    Ratio 0 skips both the injection and best-epoch selection, so its
    row coincides with the standard ablation pair.
    """
    for r in ratios:
        if not 0.0 <= float(r) < 1.0:
            raise ValueError(f"noise ratios must lie in [0, 1), got {r!r}")
    base_train, val_ds = make_benchmark(pair)
    rows, run_rows = [], []
    for ratio in ratios:
        ratio = float(ratio)
        if ratio > 0.0:
            noisy_train = data_mod.inject_symmetric_noise(base_train, ratio,
                                                          seed=pair.data_spec.seed)
            teacher_cfg = replace(pair.teacher_train, select_best_epoch=True)
        else:
            noisy_train = base_train
            teacher_cfg = pair.teacher_train
        teacher, teacher_rec = train_teacher(pair.teacher_dims, noisy_train, val_ds,
                                             teacher_cfg, out_dir=out_dir)
        cell = {"ratio": ratio, "teacher_val_acc": teacher_rec.final["final_val_acc"],
                "teacher_best_epoch": teacher_rec.final["best_epoch"]}
        for label, mode in (("with_tckd", "kd"), ("without_tckd", "nckd_only")):
            dcfg = _mode_config(pair, mode)
            records = _student_runs(teacher, pair, noisy_train, val_ds, dcfg, seeds,
                                    out_dir=out_dir, experiment=f"noisy_{ratio}_{label}")
            cell[label] = _acc_stats(records)
            run_rows += [_summary_row(f"noisy_{ratio}_{label}", pair, dcfg, r) for r in records]
        cell["tckd_delta"] = cell["with_tckd"]["mean"] - cell["without_tckd"]["mean"]
        rows.append(cell)
    if out_dir is not None:
        _write_summary_csv(Path(out_dir) / "noisy_label_summary.csv", run_rows)
    return {"rows": rows}


def big_teacher_experiment(widths, pair: PairConfig, seeds=(0,), out_dir=None) -> dict:
    """KD vs DKD students across a ladder of teacher widths.

    Each rung trains a fresh teacher of hidden width w, distills one KD
    and one DKD student per seed (identical seeds and schedules), and
    reports the teacher's mean coupling weight (1 - p_target at T) over
    the training data, which quantifies how strongly classical KD
    suppresses the non-target term for that teacher.
    """
    if len(widths) < 2:
        raise ValueError("teacher ladder needs at least 2 widths")
    train_ds, val_ds = make_benchmark(pair)
    d, c = pair.data_spec.dimension, pair.data_spec.class_count
    rows, run_rows = [], []
    for w in widths:
        rung_pair = replace(pair, teacher_dims=(d, int(w), int(w), c))
        teacher, teacher_rec = prepare_teacher(rung_pair, train_ds, val_ds, out_dir=out_dir)
        coupling = _coupling_weights(predict_logits(teacher, train_ds.features),
                                     train_ds.labels, pair.temperature)
        beta = suggest_beta(beta_gap_statistic(teacher, train_ds).mean_gap)
        cell = {
            "teacher_width": int(w),
            "teacher_val_acc": teacher_rec.final["final_val_acc"],
            "mean_coupling_weight": float(coupling.mean()),
            "dkd_beta": beta,
        }
        for label, dcfg in (("kd", _mode_config(rung_pair, "kd")),
                            ("dkd", _mode_config(rung_pair, "dkd", alpha=1.0, beta=beta))):
            records = _student_runs(teacher, rung_pair, train_ds, val_ds, dcfg, seeds,
                                    out_dir=out_dir, experiment=f"big_teacher_w{w}_{label}")
            cell[label] = _acc_stats(records)
            run_rows += [_summary_row(f"big_teacher_w{w}_{label}", rung_pair, dcfg, r)
                         for r in records]
        cell["dkd_minus_kd"] = cell["dkd"]["mean"] - cell["kd"]["mean"]
        rows.append(cell)
    if out_dir is not None:
        _write_summary_csv(Path(out_dir) / "big_teacher_summary.csv", run_rows)
    return {"rows": rows}


# ---------------------------------------------------------------------------
# Diagnostics.


def logit_correlation_diff(teacher: MlpModel, student: MlpModel,
                           dataset: LabeledDataset) -> CorrelationDiff:
    """Absolute difference of the class-logit Pearson correlation matrices.

    Columns with zero variance get all-zero correlations (unit diagonal
    kept) and a warning. Smaller mean difference means the student's
    logit structure tracks the teacher's more closely.
    """
    if teacher.class_count != student.class_count:
        raise ValueError("teacher and student must share a class count")
    corr_t = _pearson_columns(predict_logits(teacher, dataset.features))
    corr_s = _pearson_columns(predict_logits(student, dataset.features))
    diff = np.abs(corr_s - corr_t)
    return CorrelationDiff(
        mean_abs_diff=float(diff.mean()),
        max_abs_diff=float(diff.max()),
        teacher_corr=corr_t,
        student_corr=corr_s,
        diff=diff,
    )


def _pearson_columns(matrix: np.ndarray) -> np.ndarray:
    centered = matrix - matrix.mean(axis=0)
    norms = np.sqrt((centered**2).sum(axis=0))
    zero = norms == 0.0
    if zero.any():
        warnings.warn(f"{int(zero.sum())} zero-variance logit column(s); correlations set to 0",
                      RuntimeWarning, stacklevel=2)
    safe = np.where(zero, 1.0, norms)
    corr = (centered / safe).T @ (centered / safe)
    corr[zero, :] = 0.0
    corr[:, zero] = 0.0
    np.fill_diagonal(corr, 1.0)
    return corr


def linear_probe(extractor: MlpModel, train_ds: LabeledDataset, tcfg: TrainConfig,
                 eval_ds: LabeledDataset | None = None) -> float:
    """Accuracy of a linear classifier trained on frozen extractor features.

    The extractor is only ever run forward; its parameters are untouched.
    """
    feats_train = extract_features(extractor, train_ds.features)
    probe_train = LabeledDataset(features=feats_train, labels=train_ds.labels,
                                 class_count=train_ds.class_count, metadata="probe")
    if eval_ds is None:
        probe_eval = probe_train
    else:
        probe_eval = LabeledDataset(features=extract_features(extractor, eval_ds.features),
                                    labels=eval_ds.labels, class_count=eval_ds.class_count,
                                    metadata="probe")
    probe_dims = (feats_train.shape[1], train_ds.class_count)
    probe, _ = train_teacher(probe_dims, probe_train, probe_eval, tcfg)
    return evaluate_accuracy(probe, probe_eval)


def default_probe_config(seed: int = 0) -> TrainConfig:
    return TrainConfig(epochs=40, batch_size=128, base_lr=0.1, momentum=0.9, weight_decay=0.0,
                       decay_epochs=(10, 20, 30), decay_factor=0.1, warmup_epochs=0, seed=seed)


def timing_harness(modes, pair: PairConfig, repetitions: int = 30,
                   batch_size: int | None = None) -> dict:
    """Mean/std wall time of one full optimization step per loss mode.

    Warmup iterations are excluded. Also reports the DKD/KD time ratio
    (when both are measured) and the count of extra trainable parameters
    each mode adds over plain cross-entropy training, which is zero for
    every logit-level mode here.
    """
    if repetitions < 10:
        raise ValueError("repetitions must be >= 10")
    bs = batch_size if batch_size is not None else pair.student_train.batch_size
    train_ds, val_ds = make_benchmark(pair)
    teacher, _ = prepare_teacher(pair, train_ds, val_ds)
    X = train_ds.features[:bs]
    y = train_ds.labels[:bs]
    teacher_logits = predict_logits(teacher, X)
    base_params = count_parameters(init_mlp(pair.student_dims, seed=0))
    results = {}
    for mode in modes:
        dcfg = _mode_config(pair, mode, beta=8.0 if mode == "dkd" else None)
        model = init_mlp(pair.student_dims, seed=0)
        state = init_sgd(model, 0.01, 0.9, 5e-4)
        times = []
        for i in range(5 + repetitions):
            t0 = time.perf_counter()
            logits, cache = forward(model, X)
            out = distill_loss(None if mode == "ce" else teacher_logits, logits, y, dcfg)
            grads_w, grads_b = backward(model, cache, out.grad_student_logits)
            sgd_step(model, grads_w, grads_b, state)
            if i >= 5:
                times.append(time.perf_counter() - t0)
        times = np.array(times)
        results[mode] = {
            "mean_s": float(times.mean()),
            "std_s": float(times.std()),
            "extra_params": count_parameters(model) - base_params,
        }
    if "kd" in results and "dkd" in results:
        results["dkd_over_kd_ratio"] = results["dkd"]["mean_s"] / results["kd"]["mean_s"]
    return results


# ---------------------------------------------------------------------------
# Persistence.


def write_run(record: RunRecord, model: MlpModel, out_dir) -> Path:
    """Persist one run: per-epoch JSONL metrics and a model checkpoint."""
    run_dir = Path(out_dir) / "runs" / record.run_id
    run_dir.mkdir(parents=True, exist_ok=True)
    with open(run_dir / "record.jsonl", "w") as f:
        for entry in record.epochs:
            f.write(json.dumps(entry) + "\n")
    save_checkpoint(model, run_dir / "checkpoint.json", rng_seed=record.seed,
                    trained_epochs=record.final.get("trained_epochs", len(record.epochs)))
    (run_dir / "final.json").write_text(json.dumps(
        {"run_id": record.run_id, "kind": record.kind, "seed": record.seed,
         "config": record.config, "final": record.final}, indent=2))
    return run_dir


def _summary_row(experiment: str, pair: PairConfig, dcfg: DistillConfig,
                 record: RunRecord) -> dict:
    return {
        "experiment": experiment,
        "pair": pair.pair_name,
        "mode": dcfg.mode,
        "alpha": dcfg.alpha,
        "beta": "coupled" if dcfg.per_sample_beta else dcfg.beta,
        "T": dcfg.temperature,
        "seed": record.seed,
        "final_val_acc": record.final["final_val_acc"],
        "mean_coupling_weight": record.final["mean_coupling_weight"],
        "wall_time_s": record.final["wall_time_s"],
    }


def _write_summary_csv(path: Path, rows: list[dict]) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as f:
        writer = csv.DictWriter(f, fieldnames=SUMMARY_COLUMNS)
        writer.writeheader()
        for row in rows:
            writer.writerow(row)
