"""Synthetic OCT-like image/report pairs, a word-level tokenizer, and dataset loaders.

Images are single-channel B-scan caricatures: horizontal retinal bands with a
wavy tilt, Gaussian noise, and one class-specific lesion per sample. Shared
lesions (shadowing, hyperreflective spots) appear across classes with
probability ``overlap`` so that distinct classes can produce overlapping
report phrases.
"""

from __future__ import annotations

import json
import logging
import re
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np
from PIL import Image

logger = logging.getLogger(__name__)

CLS, SEP, PAD, MASK, UNK = "[CLS]", "[SEP]", "[PAD]", "[MASK]", "[UNK]"
SPECIAL_TOKENS = (CLS, SEP, PAD, MASK, UNK)

_WORD_RE = re.compile(r"[a-z0-9]+|[^\sa-z0-9]")

IMAGE_EXTENSIONS = {".png", ".jpg", ".jpeg", ".bmp", ".tif", ".tiff"}


# --------------------------------------------------------------------------
# Rendering
# --------------------------------------------------------------------------


@dataclass(frozen=True)
class Retina:
    """Geometry of a rendered background, shared with lesion renderers."""

    size: int
    top: np.ndarray  # per-column row of the inner retinal surface
    bottom: np.ndarray  # per-column row of the outer (RPE-like) boundary
    boundaries: np.ndarray  # [n_bands + 1, size] per-column band edges


def _grid(size: int) -> tuple[np.ndarray, np.ndarray]:
    yy, xx = np.mgrid[0:size, 0:size]
    return yy.astype(np.float64), xx.astype(np.float64)


def render_background(rng: np.random.Generator, size: int) -> tuple[np.ndarray, Retina]:
    n_bands = int(rng.integers(4, 7))
    top0 = rng.uniform(0.22, 0.32) * size
    thickness = rng.dirichlet(np.full(n_bands, 4.0)) * rng.uniform(0.45, 0.55) * size
    edges = top0 + np.concatenate([[0.0], np.cumsum(thickness)])

    x = np.arange(size, dtype=np.float64)
    tilt = rng.uniform(-0.12, 0.12)
    amp = rng.uniform(0.5, 2.5)
    period = rng.uniform(0.8, 1.6) * size
    phase = rng.uniform(0, 2 * np.pi)
    offset = tilt * (x - size / 2) + amp * np.sin(2 * np.pi * x / period + phase)
    boundaries = edges[:, None] + offset[None, :]

    yy, _ = _grid(size)
    band = np.zeros((size, size), dtype=np.int64)
    for k in range(n_bands + 1):
        band += (yy >= boundaries[k][None, :]).astype(np.int64)
    levels = np.concatenate([[rng.uniform(0.02, 0.08)], rng.uniform(0.25, 0.7, n_bands), [rng.uniform(0.12, 0.22)]])
    # brightest outer band mimics the RPE
    levels[n_bands] = rng.uniform(0.7, 0.85)
    img = levels[band]
    retina = Retina(size=size, top=boundaries[0], bottom=boundaries[-1], boundaries=boundaries)
    return img, retina


def _scale(retina: Retina) -> float:
    # lesion geometry is specified for 64-pixel images and scales with the size
    return retina.size / 64.0


def _column_center(rng, retina: Retina, margin: float) -> int:
    m = max(1, int(round(margin * _scale(retina))))
    return int(rng.integers(m, max(m + 1, retina.size - m)))


def _fluid(rng, img, retina):
    # hyporeflective ellipse inside the retina
    yy, xx = _grid(retina.size)
    k = _scale(retina)
    cx = _column_center(rng, retina, 10)
    a, b = rng.uniform(8, 11) * k, rng.uniform(4.5, 6) * k
    lo, hi = retina.top[cx] + b + 2 * k, retina.bottom[cx] - b - 2 * k
    cy = rng.uniform(lo, max(lo, hi))
    mask = ((xx - cx) / a) ** 2 + ((yy - cy) / b) ** 2 <= 1.0
    img[mask] = rng.uniform(0.0, 0.08)
    return mask


def _drusen(rng, img, retina):
    # bright domes raised on the inner edge of the RPE band
    yy, xx = _grid(retina.size)
    mask = np.zeros_like(img, dtype=bool)
    n = int(rng.integers(2, 4))
    s = _scale(retina)
    start = _column_center(rng, retina, 14)
    for k in range(n):
        cx = int(np.clip(start + (k * rng.uniform(9, 11) - 10) * s, 5 * s, retina.size - 6 * s))
        r = rng.uniform(4.5, 5.5) * s
        cy = retina.boundaries[-2][cx] + s
        mask |= ((xx - cx) ** 2 + (yy - cy) ** 2 <= r * r) & (yy <= cy)
    img[mask] = rng.uniform(0.9, 1.0)
    return mask


def _detachment(rng, img, retina):
    # dark dome lifting the outer boundary
    yy, xx = _grid(retina.size)
    k = _scale(retina)
    cx = _column_center(rng, retina, 12)
    w, h = rng.uniform(11, 14) * k, rng.uniform(7, 10) * k
    base = retina.bottom[cx]
    inside = (np.abs(xx - cx) / w) ** 2 + ((base - yy) / h) ** 2 <= 1.0
    mask = inside & (yy <= base)
    img[mask] = rng.uniform(0.0, 0.08)
    # displaced bright rim on top of the dome
    rim = ((np.abs(xx - cx) / (w + 1.5 * k)) ** 2 + ((base - yy) / (h + 1.5 * k)) ** 2 <= 1.0) & ~inside & (yy <= base)
    img[rim] = rng.uniform(0.8, 0.95)
    return mask | rim


def _hemorrhage(rng, img, retina):
    # irregular bright clump of overlapping disks in the inner layers
    yy, xx = _grid(retina.size)
    k = _scale(retina)
    cx = _column_center(rng, retina, 10)
    cy = retina.top[cx] + rng.uniform(4, 9) * k
    mask = np.zeros_like(img, dtype=bool)
    for _ in range(3):
        dx, dy, r = rng.uniform(-5, 5) * k, rng.uniform(-2, 2) * k, rng.uniform(3.5, 5) * k
        mask |= (xx - cx - dx) ** 2 + (yy - cy - dy) ** 2 <= r * r
    img[mask] = rng.uniform(0.9, 1.0)
    return mask


def _membrane(rng, img, retina):
    # thin bright line floating above the inner surface
    yy, xx = _grid(retina.size)
    k = _scale(retina)
    cx = _column_center(rng, retina, 16)
    half = rng.uniform(10, 14) * k
    lift = rng.uniform(2.5, 4.5) * k
    surface = retina.top[None, :] - lift
    mask = (np.abs(xx - cx) <= half) & (np.abs(yy - surface) <= max(1.0, k))
    img[mask] = rng.uniform(0.85, 1.0)
    return mask


def _atrophy(rng, img, retina):
    # hypertransmission column below the outer boundary
    yy, xx = _grid(retina.size)
    k = _scale(retina)
    cx = _column_center(rng, retina, 10)
    w = rng.uniform(3, 5) * k
    mask = (np.abs(xx - cx) <= w) & (yy >= retina.bottom[None, :]) & (yy <= retina.bottom[None, :] + 14 * k)
    img[mask] = rng.uniform(0.85, 1.0)
    return mask


def _shadow(rng, img, retina):
    yy, xx = _grid(retina.size)
    cx = _column_center(rng, retina, 6)
    w = max(0.5, rng.uniform(1.5, 2.5) * _scale(retina))
    mask = (np.abs(xx - cx) <= w) & (yy >= retina.top[None, :])
    img[mask] *= 0.35
    return mask


def _spots(rng, img, retina):
    yy, xx = _grid(retina.size)
    mask = np.zeros_like(img, dtype=bool)
    for _ in range(int(rng.integers(4, 7))):
        cx = _column_center(rng, retina, 4)
        cy = rng.uniform(retina.top[cx] + 1, retina.bottom[cx] - 1)
        mask |= (xx - cx) ** 2 + (yy - cy) ** 2 <= max(0.5, 1.5 * _scale(retina))
    img[mask] = rng.uniform(0.9, 1.0)
    return mask


@dataclass(frozen=True)
class BiomarkerSpec:
    name: str
    renderer: Callable[[np.random.Generator, np.ndarray, Retina], np.ndarray]
    phrase_templates: tuple[str, ...]


PRIMARY_BIOMARKERS: tuple[BiomarkerSpec, ...] = (
    BiomarkerSpec("fluid", _fluid, (
        "intraretinal fluid present",
        "cystoid fluid within the macula",
        "fluid pocket in the inner retina",
    )),
    BiomarkerSpec("drusen", _drusen, (
        "drusen along the rpe",
        "multiple drusen visible",
        "soft drusen beneath the retina",
    )),
    BiomarkerSpec("detachment", _detachment, (
        "pigment epithelial detachment",
        "serous detachment of the rpe",
        "dome shaped detachment noted",
    )),
    BiomarkerSpec("hemorrhage", _hemorrhage, (
        "hyperreflective hemorrhage in inner layers",
        "retinal hemorrhage seen",
        "bright hemorrhage near the surface",
    )),
    BiomarkerSpec("membrane", _membrane, (
        "epiretinal membrane on the surface",
        "thin epiretinal membrane",
        "membrane above the inner retina",
    )),
    BiomarkerSpec("atrophy", _atrophy, (
        "outer atrophy with hypertransmission",
        "geographic atrophy present",
        "atrophy below the rpe",
    )),
)

SHARED_BIOMARKERS: tuple[BiomarkerSpec, ...] = (
    BiomarkerSpec("shadow", _shadow, (
        "vessel shadow artifact",
        "shadowing across layers",
    )),
    BiomarkerSpec("spots", _spots, (
        "scattered hyperreflective foci",
        "small bright foci",
    )),
)

BIOMARKERS = {spec.name: spec for spec in PRIMARY_BIOMARKERS + SHARED_BIOMARKERS}

_OPENERS = ("oct scan shows", "findings :", "b-scan reveals", "the scan demonstrates", "report :")
_CLOSERS = ("", "", "follow up advised .", "no other findings .", "stable appearance .")


@dataclass
class PairedSample:
    image: np.ndarray  # [C, H, W] float32 in [0, 1]
    report: str
    class_label: int
    biomarkers: tuple[str, ...]
    biomarker_mask: np.ndarray | None = None  # [H, W] bool
    image_path: str | None = None


def _compose_report(rng: np.random.Generator, names: Sequence[str]) -> str:
    phrases = [BIOMARKERS[n].phrase_templates[int(rng.integers(len(BIOMARKERS[n].phrase_templates)))] for n in names]
    phrases = [phrases[i] for i in rng.permutation(len(phrases))]
    opener = _OPENERS[int(rng.integers(len(_OPENERS)))]
    closer = _CLOSERS[int(rng.integers(len(_CLOSERS)))]
    body = " and ".join(phrases) + " ."
    return " ".join(part for part in (opener, body, closer) if part)


def biomarkers_in_report(report: str) -> set[str]:
    """Recover the biomarker set from the phrases present in a report."""
    text = normalize(report)
    found = set()
    for spec in BIOMARKERS.values():
        if any(normalize(p) in text for p in spec.phrase_templates):
            found.add(spec.name)
    return found


def class_for_biomarkers(biomarkers: Sequence[str]) -> int:
    primary = [i for i, spec in enumerate(PRIMARY_BIOMARKERS) if spec.name in biomarkers]
    if len(primary) != 1:
        raise ValueError(f"expected exactly one primary biomarker, got {sorted(biomarkers)}")
    return primary[0]


def _sample(seed: int, index: int, label: int, overlap: float, image_size: int) -> PairedSample:
    rng = np.random.default_rng([seed, index])
    img, retina = render_background(rng, image_size)
    names = [PRIMARY_BIOMARKERS[label].name]
    if rng.random() < overlap:
        names.append(SHARED_BIOMARKERS[int(rng.integers(len(SHARED_BIOMARKERS)))].name)
    mask = np.zeros((image_size, image_size), dtype=bool)
    for name in names:
        mask |= BIOMARKERS[name].renderer(rng, img, retina)
    img = img + rng.normal(0.0, 0.05, img.shape)
    # quantize to 8-bit levels so in-memory and PNG copies agree exactly
    img = np.round(np.clip(img, 0.0, 1.0) * 255.0) / 255.0
    report = _compose_report(rng, names)
    return PairedSample(
        image=img[None].astype(np.float32),
        report=report,
        class_label=label,
        biomarkers=tuple(names),
        biomarker_mask=mask,
    )


def generate_corpus(n: int, num_classes: int = 4, overlap: float = 0.3, seed: int = 0,
                    image_size: int = 64) -> list[PairedSample]:
    """Generate ``n`` paired samples; a pure function of its arguments.

    Class labels are an exactly balanced, seed-shuffled assignment; each
    sample is rendered from its own RNG stream keyed on ``(seed, index)``.
    """
    if n < 1:
        raise ValueError("n must be >= 1")
    if not 2 <= num_classes <= len(PRIMARY_BIOMARKERS):
        raise ValueError(f"num_classes must be in [2, {len(PRIMARY_BIOMARKERS)}]")
    if not 0.0 <= overlap <= 1.0:
        raise ValueError(f"overlap must lie in [0, 1], got {overlap}")
    labels = np.random.default_rng(seed).permutation(np.arange(n) % num_classes)
    return [_sample(seed, i, int(labels[i]), overlap, image_size) for i in range(n)]


# --------------------------------------------------------------------------
# Tokenizer
# --------------------------------------------------------------------------


def word_tokens(text: str) -> list[str]:
    return _WORD_RE.findall(text.lower())


def normalize(text: str) -> str:
    return " ".join(word_tokens(text))


@dataclass
class Vocabulary:
    token_to_id: dict[str, int] = field(default_factory=dict)

    def __post_init__(self):
        if not self.token_to_id:
            self.token_to_id = {tok: i for i, tok in enumerate(SPECIAL_TOKENS)}
        for i, tok in enumerate(SPECIAL_TOKENS):
            if self.token_to_id.get(tok) != i:
                raise ValueError(f"special token {tok} must have id {i}")
        if len(set(self.token_to_id.values())) != len(self.token_to_id):
            raise ValueError("vocabulary map is not injective")
        self.id_to_token = {i: t for t, i in self.token_to_id.items()}

    cls_id = property(lambda self: 0)
    sep_id = property(lambda self: 1)
    pad_id = property(lambda self: 2)
    mask_id = property(lambda self: 3)
    unk_id = property(lambda self: 4)

    @property
    def special_ids(self) -> tuple[int, ...]:
        return tuple(range(len(SPECIAL_TOKENS)))

    def __len__(self) -> int:
        return len(self.token_to_id)

    def to_json(self, path: str | Path) -> None:
        Path(path).write_text(json.dumps(self.token_to_id, indent=1, sort_keys=False) + "\n")

    @classmethod
    def from_json(cls, path: str | Path) -> "Vocabulary":
        return cls(json.loads(Path(path).read_text()))


def build_vocab(reports: Sequence[str] | Sequence[PairedSample]) -> Vocabulary:
    """Corpus-derived vocabulary; words get ids in sorted order after the specials."""
    texts = [r.report if isinstance(r, PairedSample) else r for r in reports]
    words = sorted({w for t in texts for w in word_tokens(t)} - set(SPECIAL_TOKENS))
    mapping = {tok: i for i, tok in enumerate(SPECIAL_TOKENS)}
    mapping.update({w: i + len(SPECIAL_TOKENS) for i, w in enumerate(words)})
    return Vocabulary(mapping)


def tokenize(report: str, vocab: Vocabulary, max_len: int) -> tuple[np.ndarray, np.ndarray]:
    """Return ``(ids, valid)`` laid out as ``[CLS] w1 .. wk [SEP] [PAD]..``.

    ``valid`` is True on CLS, words and SEP. Truncation drops trailing words
    but always keeps CLS and SEP.
    """
    words = word_tokens(report)
    if not words:
        raise ValueError("cannot tokenize an empty report")
    if max_len < 3:
        raise ValueError("max_len must be >= 3")
    words = words[: max_len - 2]
    ids = np.full(max_len, vocab.pad_id, dtype=np.int64)
    ids[0] = vocab.cls_id
    ids[1: 1 + len(words)] = [vocab.token_to_id.get(w, vocab.unk_id) for w in words]
    ids[1 + len(words)] = vocab.sep_id
    valid = np.zeros(max_len, dtype=bool)
    valid[: len(words) + 2] = True
    return ids, valid


def tokenize_batch(reports: Sequence[str], vocab: Vocabulary, max_len: int) -> tuple[np.ndarray, np.ndarray]:
    pairs = [tokenize(r, vocab, max_len) for r in reports]
    return np.stack([p[0] for p in pairs]), np.stack([p[1] for p in pairs])


def detokenize(ids: Sequence[int], vocab: Vocabulary) -> str:
    specials = set(vocab.special_ids) - {vocab.unk_id}
    return " ".join(vocab.id_to_token[int(i)] for i in ids if int(i) not in specials)


# --------------------------------------------------------------------------
# Splits and I/O
# --------------------------------------------------------------------------


def _largest_remainder(total: int, fractions: Sequence[float]) -> list[int]:
    raw = np.asarray(fractions, dtype=np.float64) * total
    counts = np.floor(raw).astype(int)
    order = np.argsort(-(raw - counts), kind="stable")
    for k in order[: total - counts.sum()]:
        counts[k] += 1
    return counts.tolist()


def split(labels: Sequence[int], fractions: Sequence[float], seed: int) -> tuple[np.ndarray, ...]:
    """Stratified, deterministic partition of ``range(len(labels))``.

    Items are shuffled within each class and laid out by their fractional
    rank inside the class, so every prefix of the global order keeps class
    proportions to within one item. Split sizes follow largest-remainder
    rounding of ``len(labels) * fractions``.
    """
    labels = np.asarray(labels)
    fractions = np.asarray(fractions, dtype=np.float64)
    if np.any(fractions < 0) or not np.isclose(fractions.sum(), 1.0):
        raise ValueError(f"fractions must be nonnegative and sum to 1, got {fractions.tolist()}")
    rng = np.random.default_rng(seed)
    position = np.empty(len(labels), dtype=np.float64)
    for c in np.unique(labels):
        idx = np.flatnonzero(labels == c)
        idx = idx[rng.permutation(len(idx))]
        position[idx] = (np.arange(len(idx)) + 0.5) / len(idx)
    jitter = rng.permutation(len(labels))
    order = np.lexsort((jitter, position))
    sizes = _largest_remainder(len(labels), fractions)
    bounds = np.cumsum([0] + sizes)
    return tuple(np.sort(order[bounds[i]: bounds[i + 1]]) for i in range(len(sizes)))


def _to_png(array: np.ndarray, path: Path) -> None:
    data = np.round(np.clip(array, 0.0, 1.0) * 255.0).astype(np.uint8)
    Image.fromarray(data, mode="L").save(path, optimize=False)


def save_corpus(samples: Sequence[PairedSample], out_dir: str | Path, vocab: Vocabulary | None = None) -> Path:
    out = Path(out_dir)
    (out / "images").mkdir(parents=True, exist_ok=True)
    (out / "masks").mkdir(exist_ok=True)
    lines = []
    for i, s in enumerate(samples):
        rel = f"images/{i:06d}.png"
        _to_png(s.image[0], out / rel)
        record = {"report": s.report, "class_label": s.class_label, "biomarkers": list(s.biomarkers), "image": rel}
        if s.biomarker_mask is not None:
            record["mask"] = f"masks/{i:06d}.png"
            _to_png(s.biomarker_mask.astype(np.float64), out / record["mask"])
        lines.append(json.dumps(record, sort_keys=True))
    (out / "corpus.jsonl").write_text("\n".join(lines) + "\n")
    (vocab or build_vocab(samples)).to_json(out / "vocab.json")
    return out


def read_image(path: str | Path, image_size: int | None, channels: int = 1) -> np.ndarray:
    """Read an image as ``[C, H, W]`` floats; non-square inputs are center-cropped first.

    ``image_size=None`` keeps the cropped side length as is.
    """
    try:
        with Image.open(path) as im:
            im = im.convert("L" if channels == 1 else "RGB")
            w, h = im.size
            side = min(w, h)
            left, top = (w - side) // 2, (h - side) // 2
            im = im.crop((left, top, left + side, top + side))
            if image_size is not None and side != image_size:
                im = im.resize((image_size, image_size), Image.BILINEAR)
            arr = np.asarray(im, dtype=np.float32) / 255.0
    except (OSError, ValueError) as exc:
        raise ValueError(f"unreadable image {path}: {exc}") from exc
    return arr[None] if channels == 1 else arr.transpose(2, 0, 1).copy()


def load_corpus(data_dir: str | Path, image_size: int | None = None) -> list[PairedSample]:
    root = Path(data_dir)
    samples = []
    for line in (root / "corpus.jsonl").read_text().splitlines():
        if not line.strip():
            continue
        rec = json.loads(line)
        mask = None
        if rec.get("mask"):
            mask = read_image(root / rec["mask"], image_size)[0] > 0.5
        samples.append(PairedSample(
            image=read_image(root / rec["image"], image_size),
            report=rec["report"],
            class_label=int(rec["class_label"]),
            biomarkers=tuple(rec["biomarkers"]),
            biomarker_mask=mask,
            image_path=rec["image"],
        ))
    return samples


@dataclass
class LabeledImages:
    images: np.ndarray  # [N, C, H, W]
    labels: np.ndarray  # [N]
    class_names: list[str]


def load_labeled_folder(path: str | Path, image_size: int = 64, channels: int = 1) -> LabeledImages:
    """Load ``path/<class_name>/*.png``-style folders; labels follow sorted folder names."""
    root = Path(path)
    class_dirs = sorted(d for d in root.iterdir() if d.is_dir())
    if len(class_dirs) == 0:
        raise ValueError(f"no class folders under {root}")
    images, labels = [], []
    for label, d in enumerate(class_dirs):
        files = sorted(f for f in d.iterdir() if f.suffix.lower() in IMAGE_EXTENSIONS)
        if not files:
            raise ValueError(f"class folder {d} contains no images")
        for f in files:
            images.append(read_image(f, image_size, channels))
            labels.append(label)
    return LabeledImages(np.stack(images), np.asarray(labels, dtype=np.int64), [d.name for d in class_dirs])


def load_probe_dataset(path: str | Path, image_size: int = 64, channels: int = 1) -> LabeledImages:
    """Either a generated corpus directory or a labeled image folder."""
    root = Path(path)
    if (root / "corpus.jsonl").exists():
        samples = load_corpus(root, image_size)
        n_cls = max(s.class_label for s in samples) + 1
        return LabeledImages(
            np.stack([s.image for s in samples]),
            np.asarray([s.class_label for s in samples], dtype=np.int64),
            [PRIMARY_BIOMARKERS[c].name for c in range(n_cls)],
        )
    return load_labeled_folder(root, image_size, channels)
