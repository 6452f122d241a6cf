"""Frame manifests, equal-interval frame sampling and the synthetic forgery set.

A manifest is a CSV with header ``path,label,video_id,dataset_id,split``.
Relative paths are resolved against the manifest's own directory.

The synthetic generator draws smooth "faces" (a low-frequency random field
inside an oval with darker eye/mouth blobs). Every fake frame is a real frame
plus an additive high-frequency artifact patch placed inside the oval. The
shifted split changes the artifact texture and the global contrast. Artifact
boxes go to a sidecar ``artifacts_<split>.csv`` so saliency can be scored
against ground truth.
"""

from __future__ import annotations

import csv
import logging
from collections import Counter
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import numpy as np
from PIL import Image
from scipy.ndimage import gaussian_filter

from .errors import ConfigurationError, DataIntegrityError, FormatError, InvalidInputError

log = logging.getLogger(__name__)

MANIFEST_HEADER = ("path", "label", "video_id", "dataset_id", "split")
ARTIFACT_HEADER = ("path", "source_path", "x", "y", "size")


def sample_frames(frames, n):
    """Indices of ``n`` frames at equal intervals: ``floor(i * L / n)``.

    ``frames`` is either the frame list or its length ``L``. Videos with
    ``L <= n`` return every frame once.
    """
    length = frames if isinstance(frames, int) else len(frames)
    if n < 1:
        raise InvalidInputError(f"n must be >= 1, got {n}")
    if length < 1:
        raise InvalidInputError("video has no frames")
    if length <= n:
        return list(range(length))
    return [i * length // n for i in range(n)]


@dataclass(frozen=True)
class ManifestEntry:
    path: str
    label: int
    video_id: str
    dataset_id: str
    split: str


@dataclass
class Manifest:
    entries: list
    root: Path = field(default_factory=Path)

    def __len__(self):
        return len(self.entries)

    def __iter__(self):
        return iter(self.entries)

    def resolve(self, entry):
        p = Path(entry.path)
        return p if p.is_absolute() else self.root / p

    def select(self, split):
        return Manifest([e for e in self.entries if e.split == split], self.root)

    @property
    def labels(self):
        return np.array([e.label for e in self.entries], dtype=np.int64)

    def stats(self):
        by_label = Counter(e.label for e in self.entries)
        return {
            "n": len(self.entries),
            "n_real": by_label.get(0, 0),
            "n_fake": by_label.get(1, 0),
            "per_dataset": dict(Counter(e.dataset_id for e in self.entries)),
            "per_split": dict(Counter(e.split for e in self.entries)),
        }


def write_manifest(manifest, path):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(MANIFEST_HEADER)
        for e in manifest.entries:
            writer.writerow([e.path, e.label, e.video_id, e.dataset_id, e.split])


def load_manifest(path, check_files=True):
    """Read and validate a manifest; every problem is collected into one error."""
    path = Path(path)
    try:
        fh = open(path, newline="")
    except OSError as exc:
        raise FormatError(f"cannot open manifest {path}: {exc}") from exc
    problems = []
    entries = []
    seen = set()
    with fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None or tuple(h.strip() for h in header) != MANIFEST_HEADER:
            raise FormatError(f"{path}: header must be {','.join(MANIFEST_HEADER)}, got {header}")
        for lineno, row in enumerate(reader, start=2):
            if not row:
                continue
            if len(row) != len(MANIFEST_HEADER):
                problems.append(f"row {lineno}: expected {len(MANIFEST_HEADER)} fields, got {len(row)}")
                continue
            rel, label, video_id, dataset_id, split = (c.strip() for c in row)
            if label not in ("0", "1"):
                problems.append(f"row {lineno}: label must be 0 or 1, got {label!r}")
                continue
            if rel in seen:
                problems.append(f"row {lineno}: duplicate path {rel}")
                continue
            seen.add(rel)
            entries.append(ManifestEntry(rel, int(label), video_id, dataset_id, split))
    manifest = Manifest(entries, path.parent)
    if check_files:
        for e in entries:
            if not manifest.resolve(e).is_file():
                problems.append(f"missing file {e.path}")
    if problems:
        raise DataIntegrityError(f"{path}: {len(problems)} problem(s):\n  " + "\n  ".join(problems))
    log.info("loaded manifest %s: %s", path, manifest.stats())
    return manifest


def load_images(manifest):
    """Stack every image as float32 ``(N, 3, H, W)`` in [0, 1]."""
    arrays = []
    for e in manifest.entries:
        with Image.open(manifest.resolve(e)) as img:
            arrays.append(np.asarray(img.convert("RGB"), dtype=np.float32) / 255.0)
    if not arrays:
        raise InvalidInputError("manifest is empty")
    sizes = {a.shape for a in arrays}
    if len(sizes) != 1:
        raise DataIntegrityError(f"images have mixed sizes: {sorted(sizes)}")
    return np.stack(arrays).transpose(0, 3, 1, 2).copy()


# ---------------------------------------------------------------------------
# synthetic forgeries


@dataclass
class SynthConfig:
    image_size: int = 32
    n_real: int = 1000
    n_fake: int = 1000
    n_test_real: int = 250
    n_test_fake: int = 250
    n_val_real: int = 100
    n_val_fake: int = 100
    frames_per_video: int = 4
    artifact_patch_size: int = 10
    artifact_amplitude: float = 0.35
    domain_shift_strength: float = 0.5
    seed: int = 0

    def __post_init__(self):
        counts = ("n_real", "n_fake", "n_test_real", "n_test_fake", "n_val_real", "n_val_fake")
        for name in counts:
            if getattr(self, name) < 1:
                raise ConfigurationError(f"{name} must be >= 1")
        if self.image_size < 16:
            raise ConfigurationError(f"image_size must be >= 16, got {self.image_size}")
        if self.frames_per_video < 1:
            raise ConfigurationError("frames_per_video must be >= 1")
        if not 1 <= self.artifact_patch_size <= self.image_size // 3:
            raise ConfigurationError("artifact_patch_size must lie in [1, image_size // 3]")
        if self.artifact_amplitude < 0:
            raise ConfigurationError("artifact_amplitude must be >= 0")
        if not 0.0 <= self.domain_shift_strength <= 1.0:
            raise ConfigurationError("domain_shift_strength must lie in [0, 1]")

    @classmethod
    def from_dict(cls, d):
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ConfigurationError(f"unknown synth keys: {sorted(unknown)}")
        return cls(**d)


def _oval_mask(size, cx, cy, rx, ry, soft=1.0):
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float64)
    r = np.sqrt(((xx - cx) / rx) ** 2 + ((yy - cy) / ry) ** 2)
    return np.clip((1.0 - r) * min(rx, ry) / soft + 0.5, 0.0, 1.0)


def _blob(size, cx, cy, sx, sy):
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float64)
    return np.exp(-0.5 * (((xx - cx) / sx) ** 2 + ((yy - cy) / sy) ** 2))


def _smooth_field(rng, size, sigma):
    f = gaussian_filter(rng.standard_normal((size, size, 3)), sigma=(sigma, sigma, 0), mode="wrap")
    return f / (f.std() + 1e-12)


def _face(rng, size):
    """One base face (H, W, 3) in [0, 1] and its hard interior mask."""
    s = size / 32.0
    cx = size / 2 + rng.uniform(-1.5, 1.5) * s
    cy = size / 2 + rng.uniform(-1.5, 1.5) * s
    rx = rng.uniform(9.5, 11.5) * s
    ry = rng.uniform(12.0, 14.0) * s
    oval = _oval_mask(size, cx, cy, rx, ry)[..., None]
    skin = rng.uniform(0.45, 0.75) * np.array([1.0, rng.uniform(0.75, 0.9), rng.uniform(0.6, 0.8)])
    background = rng.uniform(0.1, 0.5, size=3)
    face = skin + 0.06 * _smooth_field(rng, size, 3.0 * s)
    bg = background + 0.08 * _smooth_field(rng, size, 4.0 * s)
    img = oval * face + (1.0 - oval) * bg
    eye_dy = -0.25 * ry
    eyes = _blob(size, cx - 0.4 * rx, cy + eye_dy, 1.4 * s, 1.0 * s) + _blob(size, cx + 0.4 * rx, cy + eye_dy, 1.4 * s, 1.0 * s)
    mouth = _blob(size, cx, cy + 0.45 * ry, 3.0 * s, 0.9 * s)
    img = img - 0.25 * (eyes + mouth)[..., None] * oval
    interior = _oval_mask(size, cx, cy, rx, ry, soft=1e-6) >= 1.0
    return np.clip(img, 0.0, 1.0), interior


def _artifact_texture(rng, p, shifted, shift_strength):
    """Additive zero-mean texture of shape (p, p, 3) with unit-ish scale."""
    if not shifted:
        return rng.standard_normal((p, p, 3))
    # shifted: heavier tails, partly structured (stripes) and channel-correlated
    noise = rng.laplace(size=(p, p, 1)) / np.sqrt(2.0)
    yy, xx = np.mgrid[0:p, 0:p]
    period = rng.choice([2.0, 3.0])
    stripes = np.sin(2 * np.pi * (xx + rng.uniform() * yy) / period)[..., None]
    tex = (1.0 - shift_strength) * rng.standard_normal((p, p, 3)) + shift_strength * (0.6 * noise + 0.8 * stripes)
    return tex


def _place_box(rng, interior, p):
    size = interior.shape[0]
    candidates = [
        (x, y)
        for y in range(0, size - p + 1)
        for x in range(0, size - p + 1)
        if interior[y : y + p, x : x + p].all()
    ]
    if not candidates:
        raise ConfigurationError("artifact patch does not fit inside the face oval")
    return candidates[rng.integers(len(candidates))]


def _to_uint8(img):
    return np.round(np.clip(img, 0.0, 1.0) * 255.0).astype(np.uint8)


def _render_split(rng, cfg, split, n_real, n_fake, shifted, dataset_id):
    """Returns (rows, artifact_rows, images) where images maps rel path -> uint8 array."""
    size, fpv, p = cfg.image_size, cfg.frames_per_video, cfg.artifact_patch_size
    strength = cfg.domain_shift_strength if shifted else 0.0
    rows, artifacts, images = [], [], {}
    n_videos = -(-n_real // fpv)
    real_frames = []  # (rel_path, float image, interior, video index)
    for v in range(n_videos):
        base, interior = _face(rng, size)
        if shifted:
            contrast = 1.0 - 0.45 * strength * rng.uniform(0.5, 1.0)
            brightness = 0.12 * strength * rng.uniform(-1.0, 1.0)
            base = np.clip((base - base.mean()) * contrast + base.mean() + brightness, 0.0, 1.0)
        for f in range(min(fpv, n_real - v * fpv)):
            frame = np.clip(base + 0.01 * rng.standard_normal(base.shape), 0.0, 1.0)
            rel = f"images/{split}/real/v{v:05d}_f{f:02d}.png"
            real_frames.append((rel, frame, interior, v))
            rows.append(ManifestEntry(rel, 0, f"{split}_real_{v:05d}", dataset_id, split))
            images[rel] = _to_uint8(frame)
    boxes = {}
    textures = {}
    for j in range(n_fake):
        src_rel, src, interior, v = real_frames[j % len(real_frames)]
        fake_video = j // fpv
        if fake_video not in boxes:
            boxes[fake_video] = _place_box(rng, interior, p)
            textures[fake_video] = _artifact_texture(rng, p, shifted, strength)
        x, y = boxes[fake_video]
        tex = textures[fake_video]
        amp = cfg.artifact_amplitude * (1.0 - 0.4 * strength)
        fake = src.copy()
        fake[y : y + p, x : x + p] += amp * tex
        rel = f"images/{split}/fake/v{fake_video:05d}_f{j % fpv:02d}.png"
        rows.append(ManifestEntry(rel, 1, f"{split}_fake_{fake_video:05d}", dataset_id, split))
        artifacts.append((rel, src_rel, x, y, p))
        images[rel] = _to_uint8(fake)
    return rows, artifacts, images


@dataclass
class SynthResult:
    train: Manifest
    test: Manifest
    shifted: Manifest
    paths: dict


def generate_synthetic(config: SynthConfig, out_dir):
    """Render the train (+val), in-distribution test and shifted test splits.

    Writes ``train.csv``, ``test.csv``, ``shifted.csv`` plus artifact sidecars
    under ``out_dir``. Output is a pure function of ``config``.
    """
    out_dir = Path(out_dir)
    children = np.random.SeedSequence(config.seed).spawn(4)
    plan = [
        ("train", config.n_real, config.n_fake, False, "synth", children[0]),
        ("val", config.n_val_real, config.n_val_fake, False, "synth", children[1]),
        ("test", config.n_test_real, config.n_test_fake, False, "synth", children[2]),
        ("shifted", config.n_test_real, config.n_test_fake, True, "synth_shift", children[3]),
    ]
    rendered = {}
    for split, n_real, n_fake, shifted, dataset_id, seq in plan:
        rng = np.random.default_rng(seq)
        rendered[split] = _render_split(rng, config, split, n_real, n_fake, shifted, dataset_id)

    paths = {}
    manifests = {}
    for name, splits in (("train", ("train", "val")), ("test", ("test",)), ("shifted", ("shifted",))):
        rows, arts = [], []
        for split in splits:
            r, a, imgs = rendered[split]
            rows += r
            arts += a
            for rel, arr in imgs.items():
                target = out_dir / rel
                target.parent.mkdir(parents=True, exist_ok=True)
                Image.fromarray(arr, mode="RGB").save(target, optimize=False)
        manifest = Manifest(rows, out_dir)
        write_manifest(manifest, out_dir / f"{name}.csv")
        with open(out_dir / f"artifacts_{name}.csv", "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(ARTIFACT_HEADER)
            writer.writerows(arts)
        manifests[name] = manifest
        paths[name] = out_dir / f"{name}.csv"
    with open(out_dir / "synth_config.csv", "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(("key", "value"))
        writer.writerows(asdict(config).items())
    return SynthResult(manifests["train"], manifests["test"], manifests["shifted"], paths)


def load_artifact_boxes(path):
    """Map fake image path -> (source_path, (x, y, size))."""
    out = {}
    with open(path, newline="") as fh:
        for row in csv.DictReader(fh):
            out[row["path"]] = (row["source_path"], (int(row["x"]), int(row["y"]), int(row["size"])))
    return out


def patch_variance_scores(images, patch=4, sigma=1.0):
    """Heuristic fakeness score: the largest local high-pass energy over ``patch``
    tiles. Used to confirm that the synthetic task is learnable at all."""
    imgs = np.asarray(images, dtype=np.float64)
    if imgs.ndim != 4:
        raise InvalidInputError("expected (N, C, H, W) images")
    low = gaussian_filter(imgs, sigma=(0, 0, sigma, sigma))
    hp = ((imgs - low) ** 2).sum(axis=1)
    n, h, w = hp.shape
    tiles = hp[:, : h - h % patch, : w - w % patch].reshape(n, h // patch, patch, w // patch, patch)
    energy = tiles.mean(axis=(2, 4))
    return energy.reshape(n, -1).max(axis=1)
