"""Subject-level folds, two-step training, confidence-gated inference and voting.

Step 1 trains the SDCT network end to end on oversampled, augmented batches.
Step 2 freezes it, keeps the training images it classifies correctly and fits
the RBF SVM on their spectral-averaged backbone features. At test time the
network's top-class probability ``tau`` decides: if ``tau > theta`` the
network's label stands, otherwise the SVM's label is used. Seven fold models
vote.
"""
from __future__ import annotations

import logging
import os
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field
from typing import Sequence

import numpy as np
from scipy import ndimage

from . import nn
from .backbone import BackboneConfig, SdctNetModel
from .data import DatasetManifest, load_images
from .metrics import score_table
from .svm import RbfSvmModel, svm_train

log = logging.getLogger(__name__)

DEFAULT_THETAS = (0.0, 0.6, 0.65, 0.7, 0.75, 0.8, 0.85, 0.9, 0.95, 1.0)


class TrainingDivergedError(RuntimeError):
    pass


class SingleClassSelectionError(RuntimeError):
    """Step 1 left only one class among the correctly classified training images."""


@dataclass(frozen=True)
class TrainConfig:
    lr: float = 0.001
    batch_size: int = 64
    epochs: int = 130
    lr_drop_epochs: tuple = (50, 100)
    lr_drop_factor: float = 10.0
    seed: int = 0
    rotation_range: tuple = (0.0, 360.0)
    shear_range: tuple = (-20.0, 20.0)
    blur_sigma_range: tuple = (0.0, 0.75)
    flip_prob: float = 0.5
    augment: bool = True
    dtype: str = "float64"
    svm_C: float = 1.0
    svm_gamma: float | str = "scale"
    svm_tol: float = 1e-3
    svm_max_passes: int = 200

    def __post_init__(self):
        for name in ("lr_drop_epochs", "rotation_range", "shear_range", "blur_sigma_range"):
            object.__setattr__(self, name, tuple(getattr(self, name)))
        if self.lr <= 0:
            raise ValueError("lr must be positive")
        if self.epochs < 1 or self.batch_size < 1:
            raise ValueError("epochs and batch_size must be >= 1")
        drops = self.lr_drop_epochs
        if any(b <= a for a, b in zip(drops, drops[1:])):
            raise ValueError("lr_drop_epochs must be strictly increasing")
        if drops and (drops[0] < 1 or drops[-1] >= self.epochs):
            raise ValueError("lr_drop_epochs must lie inside [1, epochs)")
        if self.dtype not in ("float64", "float32"):
            raise ValueError("dtype must be float64 or float32")

    def lr_at(self, epoch: int) -> float:
        """Learning rate for a 0-based epoch index."""
        drops = sum(1 for e in self.lr_drop_epochs if epoch >= e)
        return self.lr / self.lr_drop_factor**drops

    def to_dict(self) -> dict:
        return {k: list(v) if isinstance(v, tuple) else v for k, v in asdict(self).items()}

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        return cls(**d)


# Reduced schedule for the synthetic 96x96 data on a CPU.
DESK_SCALE = dict(lr=0.02, batch_size=32, epochs=4, lr_drop_epochs=(3,), dtype="float32")


# ---------------------------------------------------------------------------
# folds and sampling


@dataclass
class FoldAssignment:
    k: int
    subject_to_fold: dict[str, int]

    def fold_subjects(self, fold: int) -> set[str]:
        return {s for s, f in self.subject_to_fold.items() if f == fold}

    def fold_of(self, subject_ids: Sequence[str]) -> np.ndarray:
        return np.array([self.subject_to_fold[s] for s in subject_ids], dtype=np.int64)


def split_folds_by_subject(manifest: DatasetManifest, k: int = 7, seed: int = 0) -> FoldAssignment:
    """Fold assignment for the manifest's training subjects."""
    train = manifest.split("train")
    return split_folds(train.subject_ids(), train.labels(), k, seed)


def split_folds(subject_ids: Sequence[str], labels: Sequence[int], k: int = 7, seed: int = 0) -> FoldAssignment:
    """Greedy class-balanced assignment of whole subjects to ``k`` folds.

    Subjects are taken in descending image count (ties in seeded random
    order); each goes to the fold holding the fewest images of its class.
    """
    labels = np.asarray(labels)
    counts: dict[str, int] = {}
    label_of: dict[str, int] = {}
    for s, y in zip(subject_ids, labels):
        counts[s] = counts.get(s, 0) + 1
        if label_of.setdefault(s, int(y)) != int(y):
            raise ValueError(f"subject {s} has images of both classes")
    for cls in sorted(set(label_of.values())):
        n = sum(1 for v in label_of.values() if v == cls)
        if n < k:
            raise ValueError(f"class {cls} has {n} subjects; need at least k={k} for subject-level folds")

    rng = np.random.default_rng(seed)
    order = list(counts)
    rng.shuffle(order)
    order.sort(key=lambda s: -counts[s])  # stable: seeded order breaks ties
    per_class = {c: np.zeros(k, dtype=np.int64) for c in set(label_of.values())}
    totals = np.zeros(k, dtype=np.int64)
    mapping = {}
    for s in order:
        c = per_class[label_of[s]]
        candidates = np.flatnonzero(c == c.min())
        fold = int(candidates[np.argmin(totals[candidates])])
        mapping[s] = fold
        c[fold] += counts[s]
        totals[fold] += counts[s]
    return FoldAssignment(k, mapping)


def oversample(labels: Sequence[int], rng: np.random.Generator | int = 0) -> np.ndarray:
    """Indices with the minority class duplicated up to the majority count, shuffled."""
    rng = np.random.default_rng(rng) if not isinstance(rng, np.random.Generator) else rng
    labels = np.asarray(labels)
    idx0, idx1 = np.flatnonzero(labels == 0), np.flatnonzero(labels == 1)
    if len(idx0) == 0 or len(idx1) == 0:
        raise ValueError("oversample needs both classes present")
    minority, majority = (idx0, idx1) if len(idx0) < len(idx1) else (idx1, idx0)
    reps, rem = divmod(len(majority), len(minority))
    parts = [majority] + [minority] * reps
    if rem:
        parts.append(rng.choice(minority, size=rem, replace=False))
    out = np.concatenate(parts)
    rng.shuffle(out)
    return out


# ---------------------------------------------------------------------------
# augmentation


@dataclass(frozen=True)
class AugmentParams:
    rotation: float = 0.0  # degrees
    shear: float = 0.0  # degrees
    hflip: bool = False
    vflip: bool = False
    sigma: float = 0.0


def sample_augment(rng: np.random.Generator, config: TrainConfig = TrainConfig()) -> AugmentParams:
    return AugmentParams(
        rotation=float(rng.uniform(*config.rotation_range)),
        shear=float(rng.uniform(*config.shear_range)),
        hflip=bool(rng.random() < config.flip_prob),
        vflip=bool(rng.random() < config.flip_prob),
        sigma=float(rng.uniform(*config.blur_sigma_range)),
    )


def apply_augment(image: np.ndarray, p: AugmentParams) -> np.ndarray:
    """Rotation, shear (one bilinear resample, zero fill), flips, Gaussian blur."""
    if image.ndim != 3 or image.shape[1] != image.shape[2]:
        raise ValueError("augment expects a square [C, S, S] image")
    out = image
    if p.rotation % 360.0 != 0.0 or p.shear != 0.0:
        t = np.deg2rad(p.rotation)
        rot = np.array([[np.cos(t), -np.sin(t)], [np.sin(t), np.cos(t)]])
        shear = np.array([[1.0, 0.0], [np.tan(np.deg2rad(p.shear)), 1.0]])
        forward = shear @ rot
        inv = np.linalg.inv(forward)
        center = (np.array(image.shape[1:]) - 1) / 2.0
        offset = center - inv @ center
        out = np.stack([
            ndimage.affine_transform(ch, inv, offset=offset, order=1, mode="constant", cval=0.0) for ch in out
        ])
    if p.hflip:
        out = out[:, :, ::-1]
    if p.vflip:
        out = out[:, ::-1, :]
    if p.sigma > 0:
        out = ndimage.gaussian_filter(out, sigma=(0, p.sigma, p.sigma), truncate=3.0, mode="constant", cval=0.0)
    return np.clip(np.ascontiguousarray(out), 0.0, 255.0)


def augment(image: np.ndarray, rng: np.random.Generator, config: TrainConfig = TrainConfig()) -> np.ndarray:
    return apply_augment(image, sample_augment(rng, config))


# ---------------------------------------------------------------------------
# step 1: network training


@dataclass
class EpochStats:
    epoch: int
    lr: float
    train_loss: float
    train_acc: float
    val_loss: float
    val_acc: float


def train_step(model: SdctNetModel, images: np.ndarray, labels: np.ndarray, lr: float) -> tuple[float, np.ndarray]:
    """One SGD update on a batch; returns (loss before the update, log-probs)."""
    with nn.GradTape() as tape:
        logp = model.forward(images, training=True)
        loss = nn.nll_loss(logp, labels)
    value = loss.item()
    if not np.isfinite(value):
        raise TrainingDivergedError(f"loss became {value}; lower the learning rate")
    tape.backward(loss)
    nn.sgd_step(model.parameters(), lr)
    return value, logp.data


def evaluate(model: SdctNetModel, images: np.ndarray, labels: np.ndarray, batch_size: int = 64) -> tuple[float, float]:
    """Eval-mode (mean NLL, accuracy)."""
    if len(images) == 0:
        return float("nan"), float("nan")
    logp, _ = model.predict_outputs(images, batch_size)
    labels = np.asarray(labels)
    loss = -logp[np.arange(len(labels)), labels].mean()
    return float(loss), float((cnn_labels(logp) == labels).mean())


def train_step1(
    train_images: np.ndarray,
    train_labels: np.ndarray,
    val_images: np.ndarray | None = None,
    val_labels: np.ndarray | None = None,
    config: TrainConfig = TrainConfig(),
    backbone: BackboneConfig = BackboneConfig(input_side=96),
    seed: int | None = None,
) -> tuple[SdctNetModel, list[EpochStats]]:
    """Train the SDCT network end to end; the final epoch's weights are returned."""
    if len(train_images) == 0:
        raise ValueError("no training images")
    seed = config.seed if seed is None else seed
    init_seed, data_seed = np.random.SeedSequence(seed).generate_state(2)
    model = SdctNetModel(backbone, seed=int(init_seed), dtype=config.dtype)
    rng = np.random.default_rng(int(data_seed))
    train_labels = np.asarray(train_labels, dtype=np.int64)
    history = []
    for epoch in range(config.epochs):
        lr = config.lr_at(epoch)
        order = oversample(train_labels, rng)
        losses, correct = [], 0
        for start in range(0, len(order), config.batch_size):
            idx = order[start:start + config.batch_size]
            batch = train_images[idx]
            if config.augment:
                batch = np.stack([augment(img, rng, config) for img in batch])
            loss, logp = train_step(model, batch, train_labels[idx], lr)
            losses.append(loss * len(idx))
            correct += int((cnn_labels(logp) == train_labels[idx]).sum())
        if val_images is not None and len(val_images):
            vloss, vacc = evaluate(model, val_images, val_labels)
        else:
            vloss, vacc = float("nan"), float("nan")
        stats = EpochStats(epoch, lr, sum(losses) / len(order), correct / len(order), vloss, vacc)
        log.info("epoch %d lr %.2g loss %.4f acc %.3f val_loss %.4f val_acc %.3f", *asdict(stats).values())
        history.append(stats)
    return model, history


def cnn_labels(log_probs: np.ndarray) -> np.ndarray:
    """1 if P(cancer) > P(normal) else 0."""
    return (log_probs[:, 1] > log_probs[:, 0]).astype(np.int64)


def select_correct(model: SdctNetModel, images: np.ndarray, labels: np.ndarray, batch_size: int = 64) -> np.ndarray:
    """Indices of training images the network labels correctly (eval mode, unaugmented)."""
    logp, _ = model.predict_outputs(images, batch_size)
    return np.flatnonzero(cnn_labels(logp) == np.asarray(labels))


# ---------------------------------------------------------------------------
# step 2: auxiliary classifier


def spectral_features(model: SdctNetModel, images: np.ndarray, batch_size: int = 64) -> np.ndarray:
    return model.predict_outputs(images, batch_size)[1]


def train_step2(
    model: SdctNetModel,
    images: np.ndarray,
    labels: np.ndarray,
    selected: np.ndarray | None = None,
    config: TrainConfig = TrainConfig(),
) -> RbfSvmModel:
    """Fit the SVM on spectral-averaged features of the selected images.

    The network is only run forward; its parameters are left untouched.
    """
    labels = np.asarray(labels)
    if selected is not None:
        images, labels = images[selected], labels[selected]
    if len(set(labels.tolist())) < 2:
        raise SingleClassSelectionError(
            "the correctly classified training set holds a single class; "
            "inspect the step-1 network (it may predict one class for everything)"
        )
    return fit_auxiliary(spectral_features(model, images), labels, config)


def fit_auxiliary(features: np.ndarray, labels: np.ndarray, config: TrainConfig = TrainConfig()) -> RbfSvmModel:
    """RBF-SVM on precomputed spectral-averaged features."""
    labels = np.asarray(labels)
    if len(set(labels.tolist())) < 2:
        raise SingleClassSelectionError("auxiliary training set holds a single class")
    return svm_train(features, labels, C=config.svm_C, gamma=config.svm_gamma, tol=config.svm_tol,
                     max_passes=config.svm_max_passes)


# ---------------------------------------------------------------------------
# gated inference and voting


@dataclass
class Member:
    net: SdctNetModel
    svm: RbfSvmModel


@dataclass(frozen=True)
class GatedPrediction:
    label: int
    cnn_log_probs: tuple
    tau: float
    used_auxiliary: bool


@dataclass
class MemberOutputs:
    """Per-image network log-probabilities and SVM labels; gating reuses them for any theta."""

    log_probs: np.ndarray
    aux_labels: np.ndarray

    @property
    def tau(self) -> np.ndarray:
        return np.exp(self.log_probs).max(axis=1)

    @property
    def cnn_labels(self) -> np.ndarray:
        return cnn_labels(self.log_probs)

    def routed(self, theta: float) -> np.ndarray:
        """True where the auxiliary classifier decides (tau <= theta)."""
        _check_theta(theta)
        return ~(self.tau > theta)

    def gate(self, theta: float) -> np.ndarray:
        return np.where(self.routed(theta), self.aux_labels, self.cnn_labels)


def _check_theta(theta: float) -> None:
    if not 0.0 <= theta <= 1.0:
        raise ValueError(f"theta must lie in [0, 1], got {theta}")


def member_outputs(member: Member, images: np.ndarray, batch_size: int = 64) -> MemberOutputs:
    logp, feats = member.net.predict_outputs(images, batch_size)
    return MemberOutputs(logp, member.svm.predict(feats))


def predict_gated(member: Member, images: np.ndarray, theta: float):
    """Gated prediction for one image [3,H,W] or a list of them for a batch."""
    _check_theta(theta)
    single = images.ndim == 3
    out = member_outputs(member, images[None] if single else images)
    tau, routed, labels = out.tau, out.routed(theta), out.gate(theta)
    preds = [
        GatedPrediction(int(labels[i]), tuple(out.log_probs[i].tolist()), float(tau[i]), bool(routed[i]))
        for i in range(len(labels))
    ]
    return preds[0] if single else preds


def majority_vote(labels):
    """Mode of an odd number of binary votes; a [k, N] array votes column-wise."""
    arr = np.asarray(labels, dtype=np.int64)
    k = arr.shape[0]
    if k % 2 == 0:
        raise ValueError("majority vote needs an odd number of voters")
    if arr.size and (arr.min() < 0 or arr.max() > 1):
        raise ValueError("votes must be 0/1")
    voted = (arr.sum(axis=0) * 2 > k).astype(np.int64)
    return int(voted) if arr.ndim == 1 else voted


@dataclass
class EnsembleModel:
    members: list[Member]
    theta: float = 0.9
    backbone: BackboneConfig = field(default_factory=lambda: BackboneConfig(input_side=96))
    train_config: TrainConfig = field(default_factory=TrainConfig)

    def __post_init__(self):
        if len(self.members) % 2 == 0:
            raise ValueError("an ensemble needs an odd number of members")
        _check_theta(self.theta)

    @property
    def k(self) -> int:
        return len(self.members)

    def outputs(self, images: np.ndarray) -> list[MemberOutputs]:
        return [member_outputs(m, images) for m in self.members]

    def predict(self, images: np.ndarray, theta: float | None = None) -> np.ndarray:
        theta = self.theta if theta is None else theta
        return majority_vote(np.stack([o.gate(theta) for o in self.outputs(images)]))


# ---------------------------------------------------------------------------
# cross-validation


@dataclass
class CVResult:
    ensemble: EnsembleModel
    folds: FoldAssignment
    histories: list[list[EpochStats]]
    test_outputs: list[MemberOutputs]
    test_labels: np.ndarray

    def member_predictions(self, theta: float | None = None) -> list[np.ndarray]:
        theta = self.ensemble.theta if theta is None else theta
        return [o.gate(theta) for o in self.test_outputs]

    def voted(self, theta: float | None = None) -> np.ndarray:
        return majority_vote(np.stack(self.member_predictions(theta)))

    def report(self, theta: float | None = None) -> dict[str, dict[str, float]]:
        preds = self.member_predictions(theta)
        return score_table(preds, majority_vote(np.stack(preds)), self.test_labels)


def fold_seed(master_seed: int, fold: int) -> int:
    return int(np.random.SeedSequence([master_seed, fold]).generate_state(1)[0])


_SHARED: dict = {}


def _train_member(fold: int):
    from threadpoolctl import threadpool_limits

    d = _SHARED
    with threadpool_limits(limits=1):
        val = d["folds"] == fold
        tr = ~val
        net, hist = train_step1(
            d["images"][tr], d["labels"][tr], d["images"][val], d["labels"][val],
            d["config"], d["backbone"], seed=fold_seed(d["config"].seed, fold),
        )
        # one eval pass serves both the correct-sample selection and the SVM features
        logp, feats = net.predict_outputs(d["images"][tr])
        ytr = d["labels"][tr]
        selected = np.flatnonzero(cnn_labels(logp) == ytr)
        if len(set(ytr[selected].tolist())) < 2:
            raise SingleClassSelectionError(
                f"fold {fold}: the correctly classified training set holds a single class; "
                "inspect the step-1 network (it may predict one class for everything)"
            )
        svm = fit_auxiliary(feats[selected], ytr[selected], d["config"])
    return fold, net, svm, hist


def cross_validate(
    images: np.ndarray,
    labels: np.ndarray,
    subject_ids: Sequence[str],
    test_images: np.ndarray,
    test_labels: np.ndarray,
    config: TrainConfig = TrainConfig(),
    theta: float = 0.9,
    k: int = 7,
    backbone: BackboneConfig | None = None,
    workers: int = 1,
) -> CVResult:
    """Train ``k`` fold members on in-memory arrays and evaluate them on the test set."""
    backbone = backbone or BackboneConfig(input_side=images.shape[-1])
    labels = np.asarray(labels, dtype=np.int64)
    folds = split_folds(subject_ids, labels, k, config.seed)
    _SHARED.update(images=images, labels=labels, folds=folds.fold_of(subject_ids), config=config, backbone=backbone)
    try:
        if workers > 1:
            import multiprocessing as mp

            with ProcessPoolExecutor(max_workers=min(workers, k), mp_context=mp.get_context("fork")) as pool:
                results = list(pool.map(_train_member, range(k)))
        else:
            results = [_train_member(f) for f in range(k)]
    finally:
        _SHARED.clear()
    results.sort(key=lambda r: r[0])
    members = [Member(net, svm) for _, net, svm, _ in results]
    ensemble = EnsembleModel(members, theta, backbone, config)
    from threadpoolctl import threadpool_limits

    with threadpool_limits(limits=1):
        outputs = ensemble.outputs(test_images)
    return CVResult(ensemble, folds, [h for *_, h in results], outputs, np.asarray(test_labels, dtype=np.int64))


def run_cross_validation(
    manifest: DatasetManifest,
    config: TrainConfig = TrainConfig(),
    theta: float = 0.9,
    k: int = 7,
    backbone: BackboneConfig | None = None,
    workers: int | None = None,
) -> CVResult:
    """Load the manifest's images and run :func:`cross_validate`."""
    backbone = backbone or BackboneConfig(input_side=96)
    side = backbone.input_side
    train, test = manifest.split("train"), manifest.split("test")
    if len(test) == 0:
        raise ValueError("manifest has no test split")
    workers = workers if workers is not None else (os.cpu_count() or 1)
    return cross_validate(
        load_images(train, side), train.labels(), train.subject_ids(),
        load_images(test, side), test.labels(), config, theta, k, backbone, workers,
    )
