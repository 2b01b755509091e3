"""Two-phase training: a flow teacher, then an RGB student distilled from it.

Phase 1 fits the teacher to TV-L1 flow stacks with cross-entropy.  Phase 2
freezes the teacher and trains the student on

    total = L_a + lam * Loss1

where ``L_a`` is the cross-entropy of the fused student logits and ``Loss1``
is the distance between the teacher's final feature map (Feature1) and the
student's (Feature2).  The teacher runs in eval mode outside the tape, so no
gradient can ever reach it.
"""

from __future__ import annotations

import csv
import hashlib
import time
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path
from typing import Callable, Iterable, Sequence

import numpy as np

from .checkpoint import parameter_hash
from .errors import ConfigurationError, ContractError, DataError, DivergenceError
from .flow import Tvl1Params, clip_flow_stack, stack_to_array
from .net import BackboneConfig, StudentNet, TeacherNet, build_student, build_teacher
from .synthvid import Dataset, LabeledClip
from .tensor import SGD, Tape, Tensor, _scale, add, backward, feature_distance, softmax_cross_entropy


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 30
    batch_size: int = 8
    lr: float = 0.01
    momentum: float = 0.9
    lam: float = 1.0
    seed: int = 0
    lr_decay: float = 0.1
    milestones: tuple[int, ...] = (20,)
    distance: str = "mse"

    def __post_init__(self):
        object.__setattr__(self, "milestones", tuple(int(m) for m in self.milestones))
        if self.lam < 0 or not np.isfinite(self.lam):
            raise ConfigurationError(f"lam must be a finite value >= 0, got {self.lam}")
        if self.batch_size < 2:
            raise ConfigurationError("batch_size must be >= 2 for batch norm")
        if self.epochs < 1:
            raise ConfigurationError("epochs must be >= 1")
        if self.lr <= 0 or not 0 <= self.momentum < 1:
            raise ConfigurationError("need lr > 0 and momentum in [0, 1)")

    def lr_at(self, epoch: int) -> float:
        """Learning rate for 1-based ``epoch``; decay applies after each milestone epoch."""
        return self.lr * self.lr_decay ** sum(epoch > m for m in self.milestones)


@dataclass
class LossReport:
    L_a: float
    Loss1: float
    total: float
    accuracy: float
    lam: float = 0.0


@dataclass
class EpochRecord:
    epoch: int
    L_a: float
    Loss1: float
    total: float
    train_acc: float
    val_acc: float
    seconds: float


class TrainLog:
    """Per-epoch records, optionally mirrored line by line to a CSV file."""

    COLUMNS = tuple(f.name for f in fields(EpochRecord))

    def __init__(self, path=None):
        self.records: list[EpochRecord] = []
        self.batches: list[LossReport] = []
        self.path = Path(path) if path is not None else None
        if self.path is not None:
            with open(self.path, "w", newline="") as fh:
                csv.writer(fh).writerow(self.COLUMNS)

    def append(self, rec: EpochRecord) -> None:
        self.records.append(rec)
        if self.path is not None:
            with open(self.path, "a", newline="") as fh:
                csv.writer(fh).writerow([_fmt(v) for v in asdict(rec).values()])

    def __len__(self) -> int:
        return len(self.records)

    def column(self, name: str) -> np.ndarray:
        return np.array([getattr(r, name) for r in self.records])

    def deterministic_rows(self) -> list[tuple]:
        """Records without wall time, for reproducibility comparisons."""
        return [tuple(v for k, v in asdict(r).items() if k != "seconds") for r in self.records]

    @classmethod
    def read_csv(cls, path) -> "TrainLog":
        log = cls()
        with open(path, newline="") as fh:
            for row in csv.DictReader(fh):
                log.records.append(
                    EpochRecord(int(row["epoch"]), *(float(row[c]) for c in cls.COLUMNS[1:]))
                )
        return log


def _fmt(v) -> str:
    return repr(float(v)) if isinstance(v, float) else str(v)


# ------------------------------------------------------------------- flows


class FlowSource:
    """TV-L1 flow stacks per clip, memoised and optionally cached on disk.

    Cache files are keyed by clip id, a digest of the clip's bytes and the
    solver parameter digest, so a regenerated dataset never reads stale flow.
    """

    def __init__(self, params: Tvl1Params | None = None, cache_dir=None):
        self.params = params or Tvl1Params()
        self.cache_dir = Path(cache_dir) if cache_dir is not None else None
        if self.cache_dir is not None:
            self.cache_dir.mkdir(parents=True, exist_ok=True)
        self._memo: dict[tuple[int, str], np.ndarray] = {}

    def _key(self, clip: LabeledClip) -> tuple[int, str]:
        return clip.clip_id, hashlib.sha1(clip.frames.tobytes()).hexdigest()[:12]

    def clip(self, clip: LabeledClip) -> np.ndarray:
        """``[2, T-1, H, W]`` flow stack."""
        key = self._key(clip)
        if key in self._memo:
            return self._memo[key]
        path = None
        if self.cache_dir is not None:
            path = self.cache_dir / f"{key[0]:06d}_{key[1]}_{self.params.digest()}.npy"
            if path.exists():
                arr = np.load(path)
                self._memo[key] = arr
                return arr
        arr = stack_to_array(clip_flow_stack(clip.clip, self.params))
        if path is not None:
            tmp = path.with_suffix(".tmp.npy")
            np.save(tmp, arr)
            tmp.replace(path)
        self._memo[key] = arr
        return arr

    def batch(self, clips: Sequence[LabeledClip]) -> np.ndarray:
        return np.stack([self.clip(c) for c in clips])


# ------------------------------------------------------------------ batching


def _check_splits(dataset: Dataset) -> None:
    seen: dict[int, str] = {}
    for name, idx in dataset.splits.items():
        for i in idx:
            if int(i) in seen:
                raise DataError(f"clip index {int(i)} is in both {seen[int(i)]} and {name} splits")
            seen[int(i)] = name


def _train_clips(dataset: Dataset) -> list[LabeledClip]:
    _check_splits(dataset)
    clips = dataset.subset("train") if dataset.splits else list(dataset.clips)
    if not clips:
        raise DataError("training split is empty")
    for c in clips:
        if c.frames.shape[0] < 2:
            raise DataError(f"clip {c.clip_id} has fewer than 2 frames")
    return clips


def epoch_batches(n: int, batch_size: int, seed: int, epoch: int) -> list[np.ndarray]:
    """Shuffled index batches; a trailing singleton joins the previous batch."""
    order = np.random.default_rng([seed, epoch]).permutation(n)
    batches = [order[i : i + batch_size] for i in range(0, n, batch_size)]
    if len(batches) > 1 and len(batches[-1]) < 2:
        last = batches.pop()
        batches[-1] = np.concatenate([batches[-1], last])
    return batches


def _rgb(clips: Sequence[LabeledClip]) -> np.ndarray:
    return np.stack([c.frames for c in clips]).transpose(0, 4, 1, 2, 3) / 255.0


def _labels(clips: Sequence[LabeledClip]) -> np.ndarray:
    return np.array([c.label for c in clips], dtype=np.int64)


def _accuracy(logits: np.ndarray, labels: np.ndarray) -> float:
    return float(np.mean(np.argmax(logits, axis=1) == labels))


def _check_finite(value: float, epoch: int, batch: int) -> None:
    if not np.isfinite(value):
        raise DivergenceError(epoch, batch, value)


# ------------------------------------------------------------------- phase 1


def train_teacher(
    dataset: Dataset,
    config: TrainConfig = TrainConfig(),
    net_config: BackboneConfig | None = None,
    flows: FlowSource | None = None,
    log_path=None,
    on_epoch: Callable[[EpochRecord], None] | None = None,
) -> tuple[TeacherNet, TrainLog]:
    clips = _train_clips(dataset)
    flows = flows or FlowSource()
    net_config = net_config or default_net_config(dataset)
    teacher = build_teacher(net_config, config.seed)
    opt = SGD(teacher.params, config.lr, config.momentum)
    log = TrainLog(log_path)
    val = dataset.subset("val") if dataset.splits.get("val") is not None else []

    for epoch in range(1, config.epochs + 1):
        start = time.monotonic()
        opt.lr = config.lr_at(epoch)
        sums = np.zeros(2)
        count = 0
        for b, idx in enumerate(epoch_batches(len(clips), config.batch_size, config.seed, epoch)):
            batch = [clips[i] for i in idx]
            labels = _labels(batch)
            opt.zero_grad()
            with Tape() as tape:
                logits, _ = teacher.forward(Tensor(flows.batch(batch)), train=True)
                loss = softmax_cross_entropy(logits, labels)
            _check_finite(loss.item(), epoch, b)
            backward(loss, tape)
            opt.step()
            rep = LossReport(loss.item(), 0.0, loss.item(), _accuracy(logits.data, labels))
            log.batches.append(rep)
            sums += np.array([rep.L_a, rep.accuracy]) * len(batch)
            count += len(batch)
        val_acc = evaluate(teacher, val, flows=flows).accuracy if val else float("nan")
        teacher.meta.epoch = epoch
        m = sums / count
        rec = EpochRecord(epoch, float(m[0]), 0.0, float(m[0]), float(m[1]), val_acc, time.monotonic() - start)
        log.append(rec)
        if on_epoch:
            on_epoch(rec)
    return teacher, log


# ------------------------------------------------------------------- phase 2


def distillation_objective(ce: Tensor, dist: Tensor, lam: float) -> Tensor:
    """``ce + lam * dist``; exactly ``ce`` when ``lam == 0``."""
    return add(ce, _scale(dist, lam)) if lam > 0 else ce


def compute_student_loss(
    student: StudentNet,
    teacher: TeacherNet | None,
    clips: np.ndarray,
    flows: np.ndarray | None,
    labels: np.ndarray,
    lam: float,
    distance: str = "mse",
    feature1: np.ndarray | None = None,
    train: bool = True,
) -> LossReport:
    """Forward both networks, assemble the objective and backpropagate into the student.

    ``feature1`` overrides the teacher's feature map (the teacher is then not
    run at all).  With ``lam == 0`` the distance is still reported but never
    enters the tape.
    """
    if lam < 0:
        raise ConfigurationError(f"lam must be >= 0, got {lam}")
    if feature1 is None:
        if teacher is None or flows is None:
            raise ContractError("need a teacher and flows, or an injected feature1")
        _, f1 = teacher.forward(Tensor(flows), train=False)
        feature1 = f1.data
    with Tape() as tape:
        out = student.forward(Tensor(clips), train=train)
        if tuple(feature1.shape) != out.feature2.shape:
            raise ConfigurationError(
                f"Feature1 shape {tuple(feature1.shape)} != Feature2 shape {out.feature2.shape}"
            )
        ce = softmax_cross_entropy(out.logits, labels)
        target = Tensor(feature1)
        # at lam == 0 the distance is measured on a detached copy and never taped
        dist = feature_distance(out.feature2 if lam > 0 else Tensor(out.feature2.data), target, distance)
        total = distillation_objective(ce, dist, lam)
    backward(total, tape)
    return LossReport(ce.item(), dist.item(), total.item(), _accuracy(out.logits.data, labels), lam)


def train_student(
    dataset: Dataset,
    teacher: TeacherNet,
    config: TrainConfig = TrainConfig(),
    flows: FlowSource | None = None,
    log_path=None,
    on_epoch: Callable[[EpochRecord], None] | None = None,
) -> tuple[StudentNet, TrainLog]:
    clips = _train_clips(dataset)
    flows = flows or FlowSource()
    net_config = teacher.config.for_student()
    if net_config.clip_shape != dataset.clips[0].frames.shape[:3]:
        raise ConfigurationError(
            f"teacher expects clips {net_config.clip_shape}, data has {dataset.clips[0].frames.shape[:3]}"
        )
    student = build_student(net_config, config.seed)
    student.meta.lam = config.lam
    opt = SGD(student.params, config.lr, config.momentum)
    log = TrainLog(log_path)
    val = dataset.subset("val") if dataset.splits.get("val") is not None else []
    frozen = parameter_hash(teacher)

    for epoch in range(1, config.epochs + 1):
        start = time.monotonic()
        opt.lr = config.lr_at(epoch)
        sums = np.zeros(4)
        count = 0
        for b, idx in enumerate(epoch_batches(len(clips), config.batch_size, config.seed, epoch)):
            batch = [clips[i] for i in idx]
            opt.zero_grad()
            rep = compute_student_loss(
                student, teacher, _rgb(batch), flows.batch(batch), _labels(batch), config.lam, config.distance
            )
            _check_finite(rep.total, epoch, b)
            opt.step()
            log.batches.append(rep)
            sums += np.array([rep.L_a, rep.Loss1, rep.total, rep.accuracy]) * len(batch)
            count += len(batch)
        val_acc = evaluate(student, val).accuracy if val else float("nan")
        student.meta.epoch = epoch
        m = sums / count
        rec = EpochRecord(epoch, *(float(v) for v in m), val_acc, time.monotonic() - start)
        log.append(rec)
        if on_epoch:
            on_epoch(rec)
    if parameter_hash(teacher) != frozen:
        raise ContractError("teacher parameters changed during student training")
    return student, log


@dataclass
class GridResult:
    best_lam: float
    table: dict[float, float]
    """Candidate lam -> final validation accuracy."""
    students: dict[float, StudentNet] = field(default_factory=dict, repr=False)
    logs: dict[float, TrainLog] = field(default_factory=dict, repr=False)


def grid_search_lambda(
    dataset: Dataset,
    teacher: TeacherNet,
    config: TrainConfig = TrainConfig(),
    candidates: Iterable[float] = (0.1, 1.0, 10.0, 50.0),
    flows: FlowSource | None = None,
    log_dir=None,
    on_epoch: Callable[[float, EpochRecord], None] | None = None,
) -> GridResult:
    """Train one student per candidate (shared seed) and pick the best on validation.

    Ties go to the smaller lam.
    """
    candidates = sorted({float(c) for c in candidates})
    if not candidates:
        raise ConfigurationError("need at least one lam candidate")
    _check_splits(dataset)
    if not len(dataset.splits.get("val", [])):
        raise DataError("grid search needs a non-empty validation split")
    flows = flows or FlowSource()
    result = GridResult(candidates[0], {})
    for lam in candidates:
        path = Path(log_dir) / f"student_lam{lam:g}.csv" if log_dir is not None else None
        cb = (lambda rec, lam=lam: on_epoch(lam, rec)) if on_epoch else None
        student, log = train_student(dataset, teacher, _replace_lam(config, lam), flows, path, cb)
        result.table[lam] = evaluate(student, dataset.subset("val")).accuracy
        result.students[lam] = student
        result.logs[lam] = log
    best = max(result.table.values())
    result.best_lam = min(lam for lam, acc in result.table.items() if acc == best)
    return result


def _replace_lam(config: TrainConfig, lam: float) -> TrainConfig:
    return replace(config, lam=lam)


def default_net_config(dataset: Dataset) -> BackboneConfig:
    s = dataset.spec
    return BackboneConfig(clip_shape=(s.frames, s.height, s.width), num_classes=s.num_classes)


# ---------------------------------------------------------------- evaluation


@dataclass
class EvalResult:
    accuracy: float
    per_class: dict[int, float]
    counts: dict[int, int]
    predictions: np.ndarray
    labels: np.ndarray
    probabilities: np.ndarray = field(repr=False, default=None)


def score(predictions: np.ndarray, labels: np.ndarray, probabilities: np.ndarray | None = None) -> EvalResult:
    predictions, labels = np.asarray(predictions), np.asarray(labels)
    if predictions.size == 0:
        raise DataError("cannot score an empty split")
    classes = np.unique(labels)
    per_class = {int(c): float(np.mean(predictions[labels == c] == c)) for c in classes}
    counts = {int(c): int(np.sum(labels == c)) for c in classes}
    return EvalResult(float(np.mean(predictions == labels)), per_class, counts, predictions, labels, probabilities)


def predict_proba(net, clips: Sequence[LabeledClip], flows: FlowSource | None = None, batch_size: int = 16) -> np.ndarray:
    """Softmax class probabilities, eval mode, in clip order."""
    from .tensor import softmax

    out = []
    for i in range(0, len(clips), batch_size):
        batch = clips[i : i + batch_size]
        if isinstance(net, TeacherNet):
            if flows is None:
                raise ContractError("teacher evaluation needs a flow source")
            logits, _ = net.forward(Tensor(flows.batch(batch)), train=False)
        else:
            logits = net.forward(Tensor(_rgb(batch)), train=False).logits
        out.append(softmax(logits.data))
    return np.concatenate(out)


def evaluate(net, clips: Sequence[LabeledClip], flows: FlowSource | None = None, batch_size: int = 16) -> EvalResult:
    clips = list(clips)
    if not clips:
        raise DataError("cannot evaluate on an empty split")
    proba = predict_proba(net, clips, flows, batch_size)
    return score(np.argmax(proba, axis=1), _labels(clips), proba)
