"""
Memorising four reports, then looking where the decoder looks
=============================================================

Four image/report pairs, 500 Adam steps with both losses switched on.
Greedy decoding should then give back the training reports word for word.
"""
import tempfile

import numpy as np

from tisr.config import RunConfig
from tisr.corpus import FINDINGS, Vocabulary, generate_dataset
from tisr.harness import attn_dump, decode_reports, train

samples = generate_dataset(seed=0, n_samples=4)
vocab = Vocabulary.build([s.report for s in samples])

result = train(RunConfig(steps=500), samples, vocab)
for step, l_rrg, l_sr, total in result.losses[::100] + result.losses[-1:]:
    print(f"step {step:4d}  L_rrg {l_rrg:.4f}  L_sr {l_sr:.4f}  total {total:.4f}")

for s, text in zip(samples, decode_reports(result.model, samples, vocab)):
    print("same" if text == " ".join(s.report.split()) else "DIFF", "|", text)

# per-token cross-attention, averaged over heads and layers
s = next(x for x in samples if x.labels.sum())
out = tempfile.mkdtemp()
tokens, maps, files, csv_path = attn_dump(result.model, s, vocab, out)
print(f"{len(files)} heatmaps in {out}")
for tok, w in zip(tokens, maps):
    hit = [f.name for f in FINDINGS if f.phrase.split()[-1] == tok]
    if hit:
        k = [f.name for f in FINDINGS].index(hit[0])
        print(f"{tok:>14}: peak patch {int(np.argmax(w)):2d}, finding region {FINDINGS[k].region:2d}")
