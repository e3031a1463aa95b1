"""Dataset manifests, image loading and the synthetic two-class cell generator."""
from __future__ import annotations

import csv
import logging
import warnings
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Iterable

import numpy as np
from PIL import Image

log = logging.getLogger(__name__)

MANIFEST_FIELDS = ("image_path", "label", "subject_id", "split", "fold")
SPLITS = ("train", "test")


class ManifestError(ValueError):
    pass


class ManifestIntegrityError(ManifestError):
    pass


class ImageFormatError(ValueError):
    pass


@dataclass(frozen=True)
class Record:
    image_path: str
    label: int
    subject_id: str
    split: str
    fold: int | None = None


@dataclass
class DatasetManifest:
    records: list[Record]
    root: Path = field(default_factory=Path)

    def __post_init__(self):
        self.validate()

    def __len__(self) -> int:
        return len(self.records)

    def __iter__(self):
        return iter(self.records)

    def validate(self) -> None:
        seen = set()
        split_of: dict[str, str] = {}
        label_of: dict[str, int] = {}
        for r in self.records:
            if r.label not in (0, 1):
                raise ManifestError(f"unknown label {r.label!r} for {r.image_path}")
            if r.split not in SPLITS:
                raise ManifestError(f"unknown split {r.split!r} for {r.image_path}")
            if r.image_path in seen:
                raise ManifestError(f"duplicate image path {r.image_path}")
            seen.add(r.image_path)
            if split_of.setdefault(r.subject_id, r.split) != r.split:
                raise ManifestIntegrityError(f"subject {r.subject_id} appears in both train and test")
            if label_of.setdefault(r.subject_id, r.label) != r.label:
                raise ManifestIntegrityError(f"subject {r.subject_id} carries both labels")

    def split(self, name: str) -> "DatasetManifest":
        return DatasetManifest([r for r in self.records if r.split == name], self.root)

    def subjects(self) -> dict[str, int]:
        """subject id -> label."""
        return {r.subject_id: r.label for r in self.records}

    def labels(self) -> np.ndarray:
        return np.array([r.label for r in self.records], dtype=np.int64)

    def subject_ids(self) -> list[str]:
        return [r.subject_id for r in self.records]

    def with_folds(self, subject_to_fold: dict[str, int]) -> "DatasetManifest":
        recs = [replace(r, fold=subject_to_fold.get(r.subject_id, r.fold)) if r.split == "train" else r for r in self.records]
        return DatasetManifest(recs, self.root)

    def resolve(self, r: Record) -> Path:
        p = Path(r.image_path)
        return p if p.is_absolute() else self.root / p


def load_manifest(path) -> DatasetManifest:
    """Read ``image_path,label,subject_id,split[,fold]`` CSV; paths are relative to the file."""
    path = Path(path)
    with path.open(newline="") as fh:
        reader = csv.DictReader(fh)
        header = reader.fieldnames or []
        missing = [c for c in MANIFEST_FIELDS[:4] if c not in header]
        if missing:
            raise ManifestError(f"manifest missing columns {missing}")
        records = []
        for lineno, row in enumerate(reader, start=2):
            try:
                label = int(row["label"])
            except (TypeError, ValueError):
                raise ManifestError(f"line {lineno}: unparseable label {row['label']!r}") from None
            fold_raw = (row.get("fold") or "").strip()
            records.append(
                Record(
                    image_path=row["image_path"],
                    label=label,
                    subject_id=str(row["subject_id"]),
                    split=row["split"].strip(),
                    fold=int(fold_raw) if fold_raw else None,
                )
            )
    return DatasetManifest(records, path.parent)


def save_manifest(manifest: DatasetManifest, path) -> None:
    with Path(path).open("w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(MANIFEST_FIELDS)
        for r in manifest.records:
            w.writerow([r.image_path, r.label, r.subject_id, r.split, "" if r.fold is None else r.fold])


# ---------------------------------------------------------------------------
# images


def _centroid(img: np.ndarray) -> tuple[float, float] | None:
    w = img.sum(axis=0)
    total = w.sum()
    if total <= 0:
        return None
    rows, cols = np.indices(w.shape)
    return float((rows * w).sum() / total), float((cols * w).sum() / total)


def _place(img: np.ndarray, side: int, dr: int, dc: int) -> np.ndarray:
    """Copy ``img`` [3,h,w] into a zero canvas with its pixel (0,0) at (dr, dc)."""
    _, h, w = img.shape
    canvas = np.zeros((3, side, side), dtype=img.dtype)
    r0, c0 = max(dr, 0), max(dc, 0)
    r1, c1 = min(dr + h, side), min(dc + w, side)
    if r1 > r0 and c1 > c0:
        canvas[:, r0:r1, c0:c1] = img[:, r0 - dr:r1 - dr, c0 - dc:c1 - dc]
    return canvas


def center_on_canvas(img: np.ndarray, side: int) -> np.ndarray:
    """Zero-pad (or crop) [3,h,w] to [3,side,side] with the intensity centroid of
    the non-zero pixels at pixel ``(side // 2, side // 2)``.

    The offset is refined until the placed image's own centroid rounds to the
    centre, so re-centring an already centred image is a no-op.
    """
    img = np.asarray(img, dtype=np.float64)
    _, h, w = img.shape
    mid = side // 2
    c = _centroid(img)
    if c is None:
        warnings.warn("all-zero image; centroid undefined, centring geometrically", RuntimeWarning, stacklevel=2)
        return _place(img, side, mid - h // 2, mid - w // 2)
    dr, dc = mid - int(np.floor(c[0] + 0.5)), mid - int(np.floor(c[1] + 0.5))
    for _ in range(8):
        canvas = _place(img, side, dr, dc)
        cc = _centroid(canvas)
        if cc is None:
            break
        er, ec = mid - int(np.floor(cc[0] + 0.5)), mid - int(np.floor(cc[1] + 0.5))
        if er == 0 and ec == 0:
            break
        dr, dc = dr + er, dc + ec
    return canvas


def load_image(path, target_side: int) -> np.ndarray:
    """8-bit RGB raster (PNG/BMP) -> float array [3, S, S] in [0, 255], centred."""
    path = Path(path)
    try:
        with Image.open(path) as im:
            im.load()
            mode = im.mode
            if mode in ("L", "P"):
                im = im.convert("RGB")
            elif mode == "RGBA":
                im = im.convert("RGB")
            elif mode != "RGB":
                raise ImageFormatError(f"{path}: expected 8-bit RGB, got mode {mode}")
            arr = np.asarray(im, dtype=np.uint8)
    except ImageFormatError:
        raise
    except (OSError, ValueError) as exc:
        raise OSError(f"cannot read image {path}: {exc}") from exc
    return center_on_canvas(arr.transpose(2, 0, 1).astype(np.float64), target_side)


def save_image(img: np.ndarray, path) -> None:
    """Save [3,H,W] values in [0,255] as an 8-bit PNG (or BMP by suffix)."""
    arr = np.clip(np.rint(np.asarray(img)), 0, 255).astype(np.uint8).transpose(1, 2, 0)
    Image.fromarray(arr).save(path)


def load_images(manifest: DatasetManifest, side: int) -> np.ndarray:
    out = np.empty((len(manifest), 3, side, side), dtype=np.float64)
    for i, r in enumerate(manifest.records):
        out[i] = load_image(manifest.resolve(r), side)
    return out


# ---------------------------------------------------------------------------
# synthetic data


@dataclass(frozen=True)
class SyntheticConfig:
    side: int = 96
    train_subjects_per_class: int = 14
    test_subjects_per_class: int = 4
    images_per_subject: int = 30
    texture_amplitude: float = 0.45
    texture_band: tuple = (0.12, 0.32)  # cycles per pixel
    color_jitter: float = 20.0
    intensity_range: tuple = (0.85, 1.15)
    noise_sigma: float = 1.0
    seed: int = 0

    def to_dict(self) -> dict:
        return {k: list(v) if isinstance(v, tuple) else v for k, v in asdict(self).items()}


BASE_COLOR = np.array([170.0, 110.0, 200.0])


def _band_noise(rng: np.random.Generator, side: int, band: tuple) -> np.ndarray:
    white = rng.standard_normal((side, side))
    f = np.fft.fftfreq(side)
    radius = np.hypot(f[:, None], f[None, :])
    mask = (radius >= band[0]) & (radius <= band[1])
    t = np.real(np.fft.ifft2(np.fft.fft2(white) * mask))
    return t / (t.std() + 1e-12)


def synth_cell(rng: np.random.Generator, side: int, label: int, color: np.ndarray, intensity: float,
               texture: float, band: tuple, noise_sigma: float) -> np.ndarray:
    """One [3, side, side] cell image on a black background."""
    yy, xx = np.mgrid[0:side, 0:side].astype(np.float64)
    cy, cx = side / 2 + rng.uniform(-3, 3, 2)
    ry, rx = side * rng.uniform(0.28, 0.38, 2)
    ang = rng.uniform(0, np.pi)
    u = ((yy - cy) * np.cos(ang) + (xx - cx) * np.sin(ang)) / ry
    v = (-(yy - cy) * np.sin(ang) + (xx - cx) * np.cos(ang)) / rx
    dist = np.sqrt(u**2 + v**2)
    mask = 1.0 / (1.0 + np.exp((dist - 1.0) * min(ry, rx) / 1.2))

    shade = np.ones((side, side))
    for _ in range(rng.integers(2, 4)):
        by, bx = cy + rng.uniform(-0.5, 0.5) * ry, cx + rng.uniform(-0.5, 0.5) * rx
        s = side * rng.uniform(0.08, 0.16)
        shade -= rng.uniform(0.15, 0.3) * np.exp(-((yy - by) ** 2 + (xx - bx) ** 2) / (2 * s * s))
    shade = np.clip(shade, 0.3, 1.0)
    if label == 1:
        shade = shade * (1.0 + texture * _band_noise(rng, side, band))

    img = color[:, None, None] * intensity * shade[None] * mask[None]
    img = img + noise_sigma * rng.standard_normal(img.shape) * mask[None]
    return np.clip(np.rint(img), 0, 255)


def synthesize(config: SyntheticConfig = SyntheticConfig()) -> tuple[list[Record], np.ndarray]:
    """Records (paths relative to a dataset root) and uint8-valued images [N,3,S,S].

    Every subject draws its own colour offset, intensity and texture gain, so
    images of one subject share a look that differs between subjects.
    """
    records, images = [], []
    plan = [("train", config.train_subjects_per_class), ("test", config.test_subjects_per_class)]
    sid = 0
    for split, n_subj in plan:
        for label in (0, 1):
            for s in range(n_subj):
                subj = f"{'N' if label == 0 else 'C'}{split[:2]}{s:03d}"
                rng = np.random.default_rng([config.seed, sid])
                sid += 1
                color = np.clip(BASE_COLOR + rng.uniform(-config.color_jitter, config.color_jitter, 3), 40, 250)
                intensity = rng.uniform(*config.intensity_range)
                texture = config.texture_amplitude * rng.uniform(0.7, 1.3)
                for k in range(config.images_per_subject):
                    images.append(
                        synth_cell(rng, config.side, label, color, intensity, texture, config.texture_band, config.noise_sigma)
                    )
                    records.append(Record(f"images/{subj}_{k:03d}.png", label, subj, split))
    return records, np.stack(images)


def generate_synthetic(config: SyntheticConfig, out_dir) -> DatasetManifest:
    """Write PNG images and ``manifest.csv`` under ``out_dir``."""
    out_dir = Path(out_dir)
    (out_dir / "images").mkdir(parents=True, exist_ok=True)
    records, images = synthesize(config)
    for r, img in zip(records, images):
        save_image(img, out_dir / r.image_path)
    manifest = DatasetManifest(records, out_dir)
    save_manifest(manifest, out_dir / "manifest.csv")
    return manifest


def manifest_from_arrays(records: Iterable[Record], root=".") -> DatasetManifest:
    return DatasetManifest(list(records), Path(root))
