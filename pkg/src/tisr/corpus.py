"""Synthetic toy radiographs with matching reports and finding labels.

Each of the 14 findings owns one 8x8 region of a 32x32 image and a
distinctive shape. A sample draws ``k`` findings, renders them with jitter
over a noisy background, and writes one affirmative sentence per finding,
so image, report and labels agree by construction.
"""
from __future__ import annotations

import hashlib
import logging
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .model import BOS, EOS, PAD, UNK, TokenSequence
from .rng import stream

log = logging.getLogger(__name__)

IMAGE_SIZE = 32
PATCH = 8
GRID = IMAGE_SIZE // PATCH


@dataclass(frozen=True)
class Finding:
    name: str
    phrase: str
    region: int  # patch index, row-major on the 4x4 grid
    shape: str
    intensity: float


_SHAPES = ("disk", "square", "ring", "cross", "hbar", "vbar", "diag")
_NAMES = [
    ("atelectasis", "atelectasis"),
    ("cardiomegaly", "cardiomegaly"),
    ("effusion", "pleural effusion"),
    ("infiltration", "infiltration"),
    ("mass", "mass"),
    ("nodule", "nodule"),
    ("pneumonia", "pneumonia"),
    ("pneumothorax", "pneumothorax"),
    ("consolidation", "consolidation"),
    ("edema", "edema"),
    ("emphysema", "emphysema"),
    ("fibrosis", "fibrosis"),
    ("pleural_thickening", "pleural thickening"),
    ("hernia", "hernia"),
]
_REGIONS = [0, 1, 2, 3, 4, 6, 7, 8, 9, 11, 12, 13, 14, 15]

FINDINGS: tuple[Finding, ...] = tuple(
    Finding(name, phrase, region, _SHAPES[i % len(_SHAPES)], 0.6 + 0.4 * ((i * 3) % 7) / 6)
    for i, ((name, phrase), region) in enumerate(zip(_NAMES, _REGIONS))
)
N_FINDINGS = len(FINDINGS)

OPENINGS = ("frontal and lateral views of the chest .", "single frontal view of the chest .")
POSITIVE_TEMPLATES = ("there is {} .", "{} is present .", "findings consistent with {} .")
NEGATIVE_TEMPLATE = "no {} ."
NORMAL_SENTENCE = "no acute cardiopulmonary abnormality ."
NEGATION_CUES = ("no", "without", "negative for", "free of")


@dataclass
class SamplePair:
    sample_id: str
    image: np.ndarray
    report: str
    labels: np.ndarray
    split: str = ""


@dataclass
class CorpusConfig:
    max_findings: int = 3
    negative_rate: float = 0.5
    noise: float = 0.05
    background: float = 0.1

    def finding_rate(self):
        """Marginal probability that any given finding is present."""
        return self.max_findings / 2.0 / N_FINDINGS


def _shape_mask(kind, size=5):
    yy, xx = np.mgrid[:size, :size]
    c = (size - 1) / 2
    r2 = (yy - c) ** 2 + (xx - c) ** 2
    if kind == "disk":
        return r2 <= (c + 0.5) ** 2
    if kind == "square":
        return np.ones((size, size), dtype=bool)
    if kind == "ring":
        return (r2 <= (c + 0.5) ** 2) & (r2 >= (c - 0.5) ** 2)
    if kind == "cross":
        return (yy == int(c)) | (xx == int(c))
    if kind == "hbar":
        return (yy >= int(c) - 1) & (yy <= int(c) + 1)
    if kind == "vbar":
        return (xx >= int(c) - 1) & (xx <= int(c) + 1)
    if kind == "diag":
        return np.abs(yy - xx) <= 1
    raise ValueError(f"unknown shape {kind!r}")


def render(finding_idx, cfg: CorpusConfig, rng) -> np.ndarray:
    """Image with noise background and the given findings drawn in their regions."""
    img = cfg.background + cfg.noise * rng.standard_normal((IMAGE_SIZE, IMAGE_SIZE))
    for i in finding_idx:
        f = FINDINGS[i]
        mask = _shape_mask(f.shape)
        r0 = (f.region // GRID) * PATCH + int(rng.integers(0, PATCH - mask.shape[0] + 1))
        c0 = (f.region % GRID) * PATCH + int(rng.integers(0, PATCH - mask.shape[1] + 1))
        window = img[r0 : r0 + mask.shape[0], c0 : c0 + mask.shape[1]]
        window[mask] = f.intensity
    return np.clip(img, 0.0, 1.0)


def compose_report(finding_idx, cfg: CorpusConfig, rng) -> str:
    sentences = [OPENINGS[int(rng.integers(len(OPENINGS)))]]
    if len(finding_idx) == 0:
        sentences.append(NORMAL_SENTENCE)
    for i in sorted(finding_idx):
        tpl = POSITIVE_TEMPLATES[int(rng.integers(len(POSITIVE_TEMPLATES)))]
        sentences.append(tpl.format(FINDINGS[i].phrase))
    absent = [i for i in range(N_FINDINGS) if i not in set(finding_idx)]
    if absent and rng.random() < cfg.negative_rate:
        sentences.append(NEGATIVE_TEMPLATE.format(FINDINGS[int(rng.choice(absent))].phrase))
    return " ".join(sentences)


def generate_sample(seed: int, index: int, cfg: CorpusConfig) -> SamplePair:
    rng = stream(seed, "corpus", index)
    k = int(rng.integers(0, cfg.max_findings + 1))
    chosen = sorted(int(i) for i in rng.choice(N_FINDINGS, size=k, replace=False))
    image = render(chosen, cfg, rng)
    report = compose_report(chosen, cfg, rng)
    labels = np.zeros(N_FINDINGS, dtype=np.int64)
    labels[chosen] = 1
    return SamplePair(f"s{index:06d}", image, report, labels)


def generate_dataset(seed: int, n_samples: int, max_findings: int = 3, cfg: CorpusConfig | None = None):
    """``n_samples`` pairs, each fully determined by ``(seed, index)``, with split tags."""
    if n_samples < 1:
        raise ValueError("n_samples must be >= 1")
    if not 0 <= max_findings <= N_FINDINGS:
        raise ValueError(f"max_findings must lie in [0, {N_FINDINGS}]")
    cfg = cfg or CorpusConfig(max_findings=max_findings)
    samples = [generate_sample(seed, i, cfg) for i in range(n_samples)]
    if n_samples >= 10:
        parts = split(samples)
        for tag, group in parts.items():
            for s in group:
                s.split = tag
    else:
        for s in samples:
            s.split = "train"
    return samples


def _hash_key(sample_id: str) -> str:
    return hashlib.sha256(sample_id.encode("utf-8")).hexdigest()


def split(samples):
    """Deterministic 7:1:2 partition ordered by hashed sample id."""
    n = len(samples)
    if n < 10:
        raise ValueError("split needs at least 10 samples")
    order = sorted(samples, key=lambda s: _hash_key(s.sample_id))
    n_train, n_val = (7 * n) // 10, n // 10
    return {
        "train": order[:n_train],
        "val": order[n_train : n_train + n_val],
        "test": order[n_train + n_val :],
    }


# ---------------------------------------------------------------------------
# tokens


def normalize(text: str) -> list[str]:
    return text.lower().split()


@dataclass
class Vocabulary:
    tokens: list = field(default_factory=lambda: ["<pad>", "<bos>", "<eos>", "<unk>"])

    def __post_init__(self):
        self.index = {t: i for i, t in enumerate(self.tokens)}
        if len(self.index) != len(self.tokens):
            raise ValueError("duplicate tokens in vocabulary")

    @classmethod
    def build(cls, reports):
        words = sorted({w for r in reports for w in normalize(r)})
        return cls(["<pad>", "<bos>", "<eos>", "<unk>"] + words)

    def __len__(self):
        return len(self.tokens)

    def save(self, path):
        Path(path).write_text("".join(t + "\n" for t in self.tokens))

    @classmethod
    def load(cls, path):
        return cls(Path(path).read_text().splitlines())

    def tokenize(self, text: str, n_max: int) -> TokenSequence:
        """Lowercase whitespace split, framed by BOS/EOS and padded to ``n_max``."""
        ids = [self.index.get(w, UNK) for w in normalize(text)]
        if len(ids) + 2 > n_max:
            log.warning("report of %d tokens truncated to fit N_max=%d", len(ids), n_max)
            ids = ids[: n_max - 2]
        framed = [BOS, *ids, EOS]
        row = np.full(n_max, PAD, dtype=np.int64)
        row[: len(framed)] = framed
        mask = np.zeros(n_max, dtype=np.int64)
        mask[: len(framed)] = 1
        return TokenSequence(row[None], mask[None])

    def tokenize_batch(self, texts, n_max: int) -> TokenSequence:
        seqs = [self.tokenize(t, n_max) for t in texts]
        return TokenSequence(np.concatenate([s.ids for s in seqs]), np.concatenate([s.mask for s in seqs]))

    def detokenize(self, ids) -> str:
        words = []
        ids = np.asarray(ids).reshape(-1)
        if ids.size and ids[0] == BOS:
            ids = ids[1:]
        for i in ids:
            i = int(i)
            if i in (EOS, PAD):
                break
            words.append(self.tokens[i])
        return " ".join(words)


# ---------------------------------------------------------------------------
# patches


def patchify(image, patch: int = PATCH) -> np.ndarray:
    """Row-major non-overlapping ``patch x patch`` tiles, each flattened: ``M x patch**2``."""
    image = np.asarray(image, dtype=np.float64)
    h, w = image.shape
    if h % patch or w % patch:
        raise ValueError(f"image {image.shape} not divisible into {patch}x{patch} patches")
    tiles = image.reshape(h // patch, patch, w // patch, patch).transpose(0, 2, 1, 3)
    return tiles.reshape(-1, patch * patch)


def unpatchify(patches, height=IMAGE_SIZE, width=IMAGE_SIZE, patch: int = PATCH) -> np.ndarray:
    tiles = np.asarray(patches).reshape(height // patch, width // patch, patch, patch)
    return tiles.transpose(0, 2, 1, 3).reshape(height, width)


def batch_patches(samples) -> np.ndarray:
    return np.stack([patchify(s.image) for s in samples])


# ---------------------------------------------------------------------------
# on-disk formats

IMG_MAGIC = b"TISRIMG1"


def write_image(path, image):
    image = np.asarray(image, dtype="<f8")
    h, w = image.shape
    Path(path).write_bytes(IMG_MAGIC + struct.pack("<II", w, h) + image.tobytes())


def read_image(path) -> np.ndarray:
    raw = Path(path).read_bytes()
    if raw[:8] != IMG_MAGIC:
        raise ValueError(f"{path}: bad image header")
    w, h = struct.unpack_from("<II", raw, 8)
    return np.frombuffer(raw, dtype="<f8", offset=16, count=w * h).reshape(h, w).astype(np.float64)


def write_dataset(samples, out_dir) -> Path:
    """Write ``manifest.tsv``, ``images/*.bin`` and a train-split ``vocab.txt``."""
    out = Path(out_dir)
    (out / "images").mkdir(parents=True, exist_ok=True)
    lines = []
    for s in samples:
        rel = f"images/{s.sample_id}.bin"
        write_image(out / rel, s.image)
        bits = "".join(str(int(b)) for b in s.labels)
        lines.append(f"{s.sample_id}\t{rel}\t{s.report}\t{bits}\t{s.split}\n")
    (out / "manifest.tsv").write_text("".join(lines))
    train = [s.report for s in samples if s.split == "train"] or [s.report for s in samples]
    Vocabulary.build(train).save(out / "vocab.txt")
    return out / "manifest.tsv"


def read_dataset(data_dir):
    """Load samples and vocabulary written by :func:`write_dataset`."""
    root = Path(data_dir)
    samples = []
    for line in (root / "manifest.tsv").read_text().splitlines():
        if not line.strip():
            continue
        sid, rel, report, bits, tag = line.split("\t")
        labels = np.array([int(c) for c in bits], dtype=np.int64)
        samples.append(SamplePair(sid, read_image(root / rel), report, labels, tag))
    return samples, Vocabulary.load(root / "vocab.txt")
