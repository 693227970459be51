"""Feature assembly, flip augmentation, one-vs-rest linear SVM and validation."""
from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field, replace
from pathlib import Path

import numba
import numpy as np

from .config import DEFAULT_CONFIG, Config
from .errors import BadFeature, DegenerateTrainingSet, ModelFormatError
from .labels import LABELS, Label
from .paa import particle_pixel_count
from .preprocess import RoiImage, extract_roi, locate_flask, preprocess_frame
from .raster import FLIPS, BinaryMask, Raster, read_png
from .rpa import rpa_features
from .sa import GroundTruthPattern, detect_check_pattern, grid_for_roi, superposition_ratio

FEATURE_NAMES = ("radial_curvature", "radial_minimum", "radial_mse",
                 "particle_pixel_count", "superposition_ratio")
AUGMENTATIONS = ("identity", "h", "v", "hv")
MODEL_FORMAT = "solvis-linear-svm"
MODEL_VERSION = 1


@dataclass(frozen=True)
class FeatureVector:
    radial_curvature: float
    radial_minimum: float
    radial_mse: float
    particle_pixel_count: float
    superposition_ratio: float

    def __post_init__(self):
        values = self.to_array()
        if not np.all(np.isfinite(values)):
            raise BadFeature(f"non-finite feature in {self}")
        if self.radial_mse < 0 or self.particle_pixel_count < 0:
            raise BadFeature(f"negative mse or count in {self}")
        if not 0.0 <= self.superposition_ratio <= 1.0:
            raise BadFeature(f"superposition ratio {self.superposition_ratio} outside [0, 1]")

    def to_array(self) -> np.ndarray:
        return np.array([getattr(self, n) for n in FEATURE_NAMES], dtype=np.float64)

    @classmethod
    def from_array(cls, values) -> "FeatureVector":
        values = [float(v) for v in values]
        if len(values) != len(FEATURE_NAMES):
            raise BadFeature(f"expected {len(FEATURE_NAMES)} features, got {len(values)}")
        return cls(*values)


def compose_flips(a: str, b: str) -> str:
    """Tag of applying flip ``a`` and then flip ``b``."""
    axes = {"identity": set(), "h": {"h"}, "v": {"v"}, "hv": {"h", "v"}}
    both = axes[a] ^ axes[b]
    return "".join(sorted(both)) or "identity"


def _flip_mask(mask: BinaryMask, how: str) -> BinaryMask:
    bits = mask.bits
    if "h" in how:
        bits = bits[:, ::-1]
    if "v" in how:
        bits = bits[::-1]
    return BinaryMask(bits)


@dataclass(frozen=True, eq=False)
class LabeledCase:
    """A white/check image pair with its label.

    ``truth`` is an optional ground-truth grid in crop coordinates; ``source``
    names the original case an augmented variant was derived from.
    """

    case_id: str
    white_image: Raster
    check_image: Raster
    label: Label
    scenario: str | None = None
    augmentation: str = "identity"
    features: FeatureVector | None = None
    truth: GroundTruthPattern | None = field(default=None, repr=False)
    source: str | None = None

    def __post_init__(self):
        if self.white_image is None or self.check_image is None:
            raise ValueError("a case needs both the white and the check image")
        if self.augmentation not in AUGMENTATIONS:
            raise ValueError(f"unknown augmentation {self.augmentation!r}")

    @property
    def group(self) -> str:
        return self.source or self.case_id


def augment(cases) -> list[LabeledCase]:
    """Each case plus its horizontal, vertical and double flips."""
    out = []
    for case in cases:
        for how in AUGMENTATIONS:
            if how == "identity":
                out.append(replace(case, source=case.group))
                continue
            truth = case.truth
            if truth is not None:
                truth = replace(truth, mask=_flip_mask(truth.mask, how), origin=None)
            out.append(replace(case, case_id=f"{case.case_id}-{how}",
                               white_image=FLIPS[how](case.white_image),
                               check_image=FLIPS[how](case.check_image),
                               augmentation=compose_flips(case.augmentation, how), features=None,
                               truth=truth, source=case.group))
    return out


# -- feature extraction -------------------------------------------------------------

def assemble_features(white_roi: RoiImage, check_roi: RoiImage, truth: GroundTruthPattern | None = None,
                      config: Config = DEFAULT_CONFIG) -> FeatureVector:
    a, c, mse = rpa_features(white_roi)
    count = particle_pixel_count(white_roi, config)
    if truth is None:
        truth = grid_for_roi(check_roi, config=config)
    ratio = superposition_ratio(detect_check_pattern(check_roi, config), truth)
    return FeatureVector(a, c, mse, float(count), ratio)


def extract_rois(white: Raster, check: Raster, config: Config = DEFAULT_CONFIG) -> tuple[RoiImage, RoiImage]:
    """Solution regions of a raw capture pair.

    With ``roi.share_circle`` the flask found in the white capture is reused
    for the check capture; the flask does not move between the two shots and
    the white frame has no grid edges to mislead the detector.
    """
    gray, circle = locate_flask(white, config)
    white_roi = extract_roi(gray, circle, config["roi.shrink"])
    check_roi = preprocess_frame(check, config, circle if config["roi.share_circle"] else None)
    return white_roi, check_roi


def extract_features(white: Raster, check: Raster, truth: GroundTruthPattern | None = None,
                     config: Config = DEFAULT_CONFIG) -> FeatureVector:
    """Full pipeline from a raw capture pair to the five features."""
    return assemble_features(*extract_rois(white, check, config), truth, config)


def with_features(case: LabeledCase, config: Config = DEFAULT_CONFIG) -> LabeledCase:
    if case.features is not None:
        return case
    return replace(case, features=extract_features(case.white_image, case.check_image, case.truth, config))


@dataclass(frozen=True)
class FeaturedCase:
    """What training and validation need from a case once its images are done with."""

    case_id: str
    features: FeatureVector
    label: Label
    group: str
    augmentation: str = "identity"
    scenario: str | None = None


def featurize(items, config: Config = DEFAULT_CONFIG, progress=None) -> list[FeaturedCase]:
    """Features for cases or manifest rows, loading one image pair at a time."""
    out = []
    for i, item in enumerate(items):
        if isinstance(item, FeaturedCase):
            out.append(item)
            continue
        case = item.load() if isinstance(item, ManifestRow) else item
        case = with_features(case, config)
        out.append(FeaturedCase(case.case_id, case.features, case.label, case.group,
                                case.augmentation, case.scenario))
        if progress is not None:
            progress(i + 1)
    return out


# -- linear SVM -------------------------------------------------------------------

@dataclass(frozen=True)
class SvmModel:
    """One-vs-rest linear SVM over z-scored features, rows in ``LABELS`` order."""

    mean: tuple[float, ...]
    scale: tuple[float, ...]
    weights: tuple[tuple[float, ...], ...]
    biases: tuple[float, ...]
    C: float = 1.0
    epochs: int = 200
    seed: int = 42

    def __post_init__(self):
        n = len(FEATURE_NAMES)
        if len(self.mean) != n or len(self.scale) != n:
            raise ModelFormatError("normalization needs one mean and scale per feature")
        if len(self.weights) != len(LABELS) or len(self.biases) != len(LABELS):
            raise ModelFormatError("need one weight vector and bias per class")
        if any(len(w) != n for w in self.weights):
            raise ModelFormatError("weight vectors must have one entry per feature")
        if not all(s > 0 and math.isfinite(s) for s in self.scale):
            raise ModelFormatError("normalization scales must be positive")
        flat = [*self.mean, *self.biases, *(v for w in self.weights for v in w)]
        if not all(math.isfinite(v) for v in flat):
            raise ModelFormatError("model parameters must be finite")

    def normalize(self, x: np.ndarray) -> np.ndarray:
        return (np.asarray(x, dtype=np.float64) - np.array(self.mean)) / np.array(self.scale)

    def denormalize(self, z: np.ndarray) -> np.ndarray:
        return np.asarray(z, dtype=np.float64) * np.array(self.scale) + np.array(self.mean)

    def decision(self, x: np.ndarray) -> np.ndarray:
        """Per-class scores for raw feature rows (n, 5) -> (n, 3)."""
        z = self.normalize(np.atleast_2d(x))
        return z @ np.array(self.weights).T + np.array(self.biases)

    def scaled(self, s: float) -> "SvmModel":
        return replace(self, weights=tuple(tuple(v * s for v in w) for w in self.weights),
                       biases=tuple(b * s for b in self.biases))

    def dumps(self) -> str:
        lines = [f"{MODEL_FORMAT} {MODEL_VERSION}",
                 "classes " + " ".join(label.value for label in LABELS),
                 "features " + " ".join(FEATURE_NAMES),
                 f"C {self.C!r}", f"epochs {self.epochs}", f"seed {self.seed}",
                 "mean " + " ".join(repr(v) for v in self.mean),
                 "scale " + " ".join(repr(v) for v in self.scale)]
        for label, w, b in zip(LABELS, self.weights, self.biases):
            lines.append(f"class {label.value} bias {b!r} weights " + " ".join(repr(v) for v in w))
        return "\n".join(lines) + "\n"

    @classmethod
    def loads(cls, text: str) -> "SvmModel":
        rows = [line.split() for line in text.splitlines() if line.strip() and not line.startswith("#")]
        if not rows or rows[0][:1] != [MODEL_FORMAT]:
            raise ModelFormatError(f"not a {MODEL_FORMAT} file")
        if rows[0][1:] != [str(MODEL_VERSION)]:
            raise ModelFormatError(f"unsupported model version {' '.join(rows[0][1:])}")
        head = {}
        per_class = {}
        try:
            for row in rows[1:]:
                if row[0] == "class":
                    if row[2] != "bias" or row[4] != "weights":
                        raise ModelFormatError(f"bad class line {' '.join(row)}")
                    per_class[Label.parse(row[1])] = (float(row[3]), tuple(float(v) for v in row[5:]))
                else:
                    head[row[0]] = row[1:]
            if tuple(head["classes"]) != tuple(label.value for label in LABELS):
                raise ModelFormatError(f"unexpected class list {head['classes']}")
            if tuple(head["features"]) != FEATURE_NAMES:
                raise ModelFormatError(f"unexpected feature list {head['features']}")
            return cls(mean=tuple(float(v) for v in head["mean"]),
                       scale=tuple(float(v) for v in head["scale"]),
                       weights=tuple(per_class[label][1] for label in LABELS),
                       biases=tuple(per_class[label][0] for label in LABELS),
                       C=float(head["C"][0]), epochs=int(head["epochs"][0]), seed=int(head["seed"][0]))
        except (KeyError, IndexError, ValueError) as exc:
            if isinstance(exc, ModelFormatError):
                raise
            raise ModelFormatError(f"malformed model file: {exc}") from exc

    def save(self, path: str | Path) -> None:
        Path(path).write_text(self.dumps())

    @classmethod
    def load(cls, path: str | Path) -> "SvmModel":
        return cls.loads(Path(path).read_text())


@dataclass(frozen=True)
class TrainingTrace:
    """Regularized objective of each class's averaged iterate, per epoch."""

    objective: np.ndarray  # (classes, epochs)


def _as_matrix(data) -> tuple[np.ndarray, np.ndarray]:
    xs, ys = [], []
    for f, label in data:
        xs.append(f.to_array() if isinstance(f, FeatureVector) else np.asarray(f, dtype=np.float64))
        ys.append(label.index)
    return np.array(xs, dtype=np.float64).reshape(len(xs), len(FEATURE_NAMES)), np.array(ys, dtype=np.intp)


@numba.njit(cache=True)
def _pegasos(X, y, weight, lam, order):
    """Stochastic sub-gradient descent on the L2-regularized hinge loss.

    ``X`` already carries a constant column so the bias is regularized along
    with the weights.  ``weight`` is each row's multiplicity relative to the
    mean multiplicity.  Step size 1/(lam t), projection onto the ball that must
    contain the optimum; the running average of the iterates is returned
    together with its objective after every epoch.
    """
    epochs, n = order.shape
    d = X.shape[1]
    w = np.zeros(d)
    avg = np.zeros(d)
    radius = 1.0 / math.sqrt(lam)
    trace = np.empty(epochs)
    t = 0
    for epoch in range(epochs):
        for j in range(n):
            i = order[epoch, j]
            t += 1
            eta = 1.0 / (lam * t)
            margin = y[i] * np.dot(X[i], w)
            w *= 1.0 - eta * lam
            if margin < 1.0:
                w += (eta * weight[i] * y[i]) * X[i]
            norm = math.sqrt(np.dot(w, w))
            if norm > radius:
                w *= radius / norm
            avg += (w - avg) / t
        loss = 0.0
        for i in range(n):
            loss += weight[i] * max(1.0 - y[i] * np.dot(X[i], avg), 0.0)
        trace[epoch] = 0.5 * lam * np.dot(avg, avg) + loss / n
    return avg, trace


def train_svm_traced(data, C: float = 1.0, epochs: int = 200, seed: int = 42) -> tuple[SvmModel, TrainingTrace]:
    X, y = _as_matrix(data)
    present = np.unique(y)
    if present.size < 2:
        raise DegenerateTrainingSet("training data needs at least two distinct labels")
    if X.shape[0] < 6:
        raise DegenerateTrainingSet(f"need at least 6 samples, got {X.shape[0]}")
    if not np.all(np.isfinite(X)):
        raise BadFeature("non-finite training feature")
    if not (C > 0 and epochs >= 1):
        raise ValueError(f"need C > 0 and epochs >= 1, got C={C}, epochs={epochs}")
    mean = X.mean(axis=0)
    scale = X.std(axis=0)
    scale[scale <= 1e-12] = 1.0
    # repeated rows become weights, so a uniformly duplicated set trains the same model
    first: dict[bytes, int] = {}
    counts: list[int] = []
    keep = []
    for i, key in enumerate(np.hstack([X, y[:, None].astype(np.float64)])):
        j = first.setdefault(key.tobytes(), len(keep))
        if j == len(keep):
            keep.append(i)
            counts.append(0)
        counts[j] += 1
    X, y = X[keep], y[keep]
    weight = np.array(counts, dtype=np.float64) * len(keep) / sum(counts)
    Z = np.hstack([(X - mean) / scale, np.ones((X.shape[0], 1))])
    lam = 1.0 / (C * Z.shape[0])
    rng = np.random.default_rng(seed)
    order = np.array([rng.permutation(Z.shape[0]) for _ in range(epochs)], dtype=np.int64)
    weights, biases, traces = [], [], []
    for k in range(len(LABELS)):
        target = np.where(y == k, 1.0, -1.0)
        w, trace = _pegasos(Z, target, weight, lam, order)
        weights.append(tuple(float(v) for v in w[:-1]))
        biases.append(float(w[-1]))
        traces.append(trace)
    model = SvmModel(tuple(float(v) for v in mean), tuple(float(v) for v in scale),
                     tuple(weights), tuple(biases), float(C), int(epochs), int(seed))
    return model, TrainingTrace(np.array(traces))


def train_svm(data, C: float = 1.0, epochs: int = 200, seed: int = 42) -> SvmModel:
    """Fit one binary linear SVM per class on ``(FeatureVector, Label)`` pairs."""
    return train_svm_traced(data, C, epochs, seed)[0]


def train_from_config(data, config: Config = DEFAULT_CONFIG) -> SvmModel:
    return train_svm(data, config["svm.C"], config["svm.epochs"], config["svm.seed"])


def classify(model: SvmModel, f: FeatureVector | np.ndarray) -> Label:
    x = f.to_array() if isinstance(f, FeatureVector) else np.asarray(f, dtype=np.float64)
    if x.shape != (len(FEATURE_NAMES),) or not np.all(np.isfinite(x)):
        raise BadFeature(f"cannot classify feature vector {x!r}")
    scores = model.decision(x)[0]
    # argmax returns the first maximum, which is the documented tie order
    return LABELS[int(np.argmax(scores))]


def classify_many(model: SvmModel, features) -> list[Label]:
    return [classify(model, f) for f in features]


# -- evaluation -------------------------------------------------------------------

@dataclass(frozen=True)
class ConfusionMatrix:
    counts: np.ndarray  # counts[truth, pred] in LABELS order

    @property
    def total(self) -> int:
        return int(self.counts.sum())

    @property
    def accuracy(self) -> float:
        return float(np.trace(self.counts)) / self.total if self.total else float("nan")

    def class_accuracy(self) -> dict[Label, float]:
        rows = self.counts.sum(axis=1)
        return {label: (float(self.counts[i, i]) / rows[i] if rows[i] else float("nan"))
                for i, label in enumerate(LABELS)}

    def format(self) -> str:
        width = 8
        lines = ["truth \\ pred".ljust(14) + "".join(label.value.rjust(width) for label in LABELS) + "  accuracy"]
        acc = self.class_accuracy()
        for i, label in enumerate(LABELS):
            cells = "".join(str(int(v)).rjust(width) for v in self.counts[i])
            lines.append(label.value.ljust(14) + cells + f"  {100 * acc[label]:6.2f}%")
        lines.append(f"overall {100 * self.accuracy:.2f}% of {self.total}")
        return "\n".join(lines)


def confusion_matrix(preds, truth) -> ConfusionMatrix:
    preds, truth = list(preds), list(truth)
    if len(preds) != len(truth):
        raise ValueError(f"{len(preds)} predictions for {len(truth)} labels")
    counts = np.zeros((len(LABELS), len(LABELS)), dtype=np.int64)
    for p, t in zip(preds, truth):
        counts[t.index, p.index] += 1
    return ConfusionMatrix(counts)


def fold_assignment(cases, k: int, seed: int = 0) -> list[int]:
    """Fold index per case: stratified by label, augmented variants kept with their source."""
    if k < 2:
        raise ValueError(f"need at least 2 folds, got {k}")
    groups: dict[str, Label] = {}
    for case in cases:
        if groups.setdefault(case.group, case.label) is not case.label:
            raise ValueError(f"group {case.group} mixes labels")
    rng = np.random.default_rng(seed)
    fold_of = {}
    offset = 0
    for label in LABELS:
        names = sorted(g for g, lab in groups.items() if lab is label)
        for j, i in enumerate(rng.permutation(len(names))):
            fold_of[names[i]] = (offset + j) % k
        offset += len(names)
    return [fold_of[case.group] for case in cases]


@dataclass(frozen=True)
class ValidationReport:
    mode: str  # "cv" or "in_sample"
    fold_accuracy: tuple[float, ...]
    confusion: ConfusionMatrix

    @property
    def mean_accuracy(self) -> float:
        return float(np.mean(self.fold_accuracy))


def kfold_validate(cases, k: int = 4, seed: int = 0, config: Config = DEFAULT_CONFIG) -> ValidationReport:
    cases = featurize(cases, config)
    folds = fold_assignment(cases, k, seed)
    accs = []
    counts = np.zeros((len(LABELS), len(LABELS)), dtype=np.int64)
    for fold in range(k):
        train = [(c.features, c.label) for c, f in zip(cases, folds) if f != fold]
        test = [c for c, f in zip(cases, folds) if f == fold]
        if not test:
            raise DegenerateTrainingSet(f"fold {fold} is empty")
        if len({label for _, label in train}) < 2:
            raise DegenerateTrainingSet(f"training split for fold {fold} has a single class")
        model = train_from_config(train, config)
        cm = confusion_matrix(classify_many(model, [c.features for c in test]), [c.label for c in test])
        accs.append(cm.accuracy)
        counts += cm.counts
    return ValidationReport("cv", tuple(accs), ConfusionMatrix(counts))


def in_sample_validate(cases, config: Config = DEFAULT_CONFIG) -> tuple[SvmModel, ValidationReport]:
    cases = featurize(cases, config)
    model = train_from_config([(c.features, c.label) for c in cases], config)
    cm = confusion_matrix(classify_many(model, [c.features for c in cases]), [c.label for c in cases])
    return model, ValidationReport("in_sample", (cm.accuracy,), cm)


# -- files ------------------------------------------------------------------------

MANIFEST_COLUMNS = ("case_id", "white_png", "check_png", "label", "scenario", "augmentation")


@dataclass(frozen=True)
class ManifestRow:
    """A manifest entry; images are read (and flipped) only by ``load``."""

    case_id: str
    white_png: str
    check_png: str
    label: Label
    scenario: str | None = None
    augmentation: str = "identity"
    base: Path = Path(".")
    source: str | None = None

    @property
    def group(self) -> str:
        return self.source or self.case_id

    def load(self) -> LabeledCase:
        flip = FLIPS[self.augmentation]
        return LabeledCase(self.case_id, flip(read_png(self.base / self.white_png)),
                           flip(read_png(self.base / self.check_png)), self.label, self.scenario,
                           self.augmentation, source=self.source)

    def as_dict(self) -> dict:
        return {"case_id": self.case_id, "white_png": self.white_png, "check_png": self.check_png,
                "label": self.label.value, "scenario": self.scenario or "", "augmentation": self.augmentation}


def read_manifest(path: str | Path) -> list[ManifestRow]:
    """Rows of a manifest; image paths are relative to its directory."""
    path = Path(path)
    rows = []
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        missing = set(MANIFEST_COLUMNS) - set(reader.fieldnames or ())
        if missing:
            raise ValueError(f"manifest {path} lacks columns {sorted(missing)}")
        for row in reader:
            aug = row["augmentation"] or "identity"
            if aug not in AUGMENTATIONS:
                raise ValueError(f"manifest {path}: unknown augmentation {aug!r}")
            rows.append(ManifestRow(row["case_id"], row["white_png"], row["check_png"],
                                    Label.parse(row["label"]), row["scenario"] or None, aug, path.parent))
    return rows


def augment_rows(rows) -> list[ManifestRow]:
    """Manifest-level augmentation: four rows per case, flips applied on load."""
    return [replace(r, case_id=r.case_id if how == "identity" else f"{r.case_id}-{how}",
                    augmentation=compose_flips(r.augmentation, how), source=r.group)
            for r in rows for how in AUGMENTATIONS]


def write_manifest(path: str | Path, rows) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=MANIFEST_COLUMNS)
        writer.writeheader()
        writer.writerows(rows)


def write_feature_dump(path: str | Path, cases) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["case_id", *FEATURE_NAMES, "label"])
        for case in cases:
            writer.writerow([case.case_id, *(repr(float(v)) for v in case.features.to_array()), case.label.value])


def read_feature_dump(path: str | Path) -> list[tuple[str, FeatureVector, Label]]:
    out = []
    with open(path, newline="") as fh:
        for row in csv.DictReader(fh):
            f = FeatureVector.from_array([row[n] for n in FEATURE_NAMES])
            out.append((row["case_id"], f, Label.parse(row["label"])))
    return out
