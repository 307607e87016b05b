"""
A short ablation grid
=====================

The nine grid rows (four flag combinations, four single removals, and the
transformer inversion head) at a reduced budget, so it finishes in a few
minutes. Numbers at this budget are noisy; the CLI's ``ablate`` command
runs the full recipe.
"""
import tempfile
from pathlib import Path

from tisr.config import RunConfig
from tisr.corpus import Vocabulary, generate_dataset
from tisr.harness import ablate

samples = generate_dataset(seed=0, n_samples=300)
vocab = Vocabulary.build([s.report for s in samples if s.split == "train"])

out = Path(tempfile.mkdtemp())
base = RunConfig(steps=150, eval_every=0, run_id="demo")
ablate(base, samples, vocab, out_dir=out, seeds=[0])
print((out / "demo_ablation.txt").read_text())
