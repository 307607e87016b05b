"""
A tour of the synthetic chest-film corpus
=========================================

Each sample is a 32x32 image cut into a 4x4 grid of 8x8 patches. Every
finding owns one patch and has its own shape; the report mentions exactly
the findings drawn in the image.
"""
import numpy as np

from tisr.corpus import FINDINGS, Vocabulary, generate_dataset, patchify
from tisr.metrics import ce_labels

samples = generate_dataset(seed=0, n_samples=200)
s = next(x for x in samples if x.labels.sum() >= 2)
print(s.sample_id, s.split)
print(s.report)
print("findings:", [FINDINGS[k].name for k in np.flatnonzero(s.labels)])

# the labeler reads the findings back out of the text
print("labeler agrees:", np.array_equal(ce_labels(s.report), s.labels))

# coarse ASCII rendering: one character per 2x2 block
shades = " .:-=+*#%@"
for row in s.image[::2, ::2]:
    print("".join(shades[min(int(v * len(shades)), len(shades) - 1)] for v in row))

# which patches light up?
patches = patchify(s.image)
print("brightest patches:", np.argsort(patches.max(axis=1))[::-1][: s.labels.sum()])
print("finding regions:  ", [FINDINGS[k].region for k in np.flatnonzero(s.labels)])

# split sizes and vocabulary
counts = {t: sum(x.split == t for x in samples) for t in ("train", "val", "test")}
print(counts)
vocab = Vocabulary.build([x.report for x in samples if x.split == "train"])
print(len(vocab), "tokens:", " ".join(vocab.tokens[:12]), "...")
seq = vocab.tokenize(s.report, 40)
print(seq.ids[0][: seq.mask.sum()])
