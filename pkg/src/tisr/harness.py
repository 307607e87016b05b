"""Training, evaluation, ablation grid and attention export."""
from __future__ import annotations

import csv
import logging
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import tensor as tt
from .config import ConfigError, RunConfig, save_run_config
from .corpus import FINDINGS, GRID, PATCH, batch_patches
from .metrics import METRIC_COLUMNS, MetricReport, evaluate_corpus
from .model import EOS, TISRModel, TokenSequence, save_checkpoint
from .optim import Adam
from .rng import stream

log = logging.getLogger(__name__)


class TrainingError(RuntimeError):
    pass


def _fmt(x: float) -> str:
    return repr(float(x))


def prepare_batch(samples, vocab, n_max):
    return batch_patches(samples), vocab.tokenize_batch([s.report for s in samples], n_max)


def by_split(samples, tag):
    return [s for s in samples if s.split == tag]


def build_model(cfg: RunConfig, vocab) -> TISRModel:
    model_cfg = cfg.replace(V=len(vocab)).model
    return TISRModel(model_cfg, seed=cfg.seed)


def decode_reports(model: TISRModel, samples, vocab, chunk=64):
    """Greedy-decode every sample (eval mode); returns detokenized strings."""
    was_training = model.training
    model.eval()
    out = []
    with tt.no_grad():
        for i in range(0, len(samples), chunk):
            part = samples[i : i + chunk]
            I = model.encode_image(batch_patches(part))
            seq = model.greedy_decode(I)
            out.extend(vocab.detokenize(row) for row in seq.ids)
    model.train(was_training)
    return out


def evaluate(model, samples, vocab, rules=None):
    """Decode ``samples`` and score against their reports: ``(MetricReport, candidates, references)``."""
    if not samples:
        raise ValueError("nothing to evaluate")
    cands = decode_reports(model, samples, vocab)
    refs = [" ".join(s.report.lower().split()) for s in samples]
    return evaluate_corpus(cands, refs, rules), cands, refs


def write_metric_csv(path, rows):
    """``rows``: iterable of (run_id, split, MetricReport)."""
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["run_id", "split", *METRIC_COLUMNS])
        for run_id, split, rep in rows:
            w.writerow([run_id, split, *(_fmt(v) for v in rep.as_dict().values())])


@dataclass
class TrainResult:
    model: TISRModel
    losses: list = field(default_factory=list)  # (step, l_rrg, l_sr, total)
    val: list = field(default_factory=list)  # (step, MetricReport)
    best_step: int | None = None
    best_state: dict | None = None
    files: dict = field(default_factory=dict)

    def load_best(self):
        if self.best_state is not None:
            self.model.load_state_dict(self.best_state)
        return self.model


def train(cfg: RunConfig, samples, vocab, out_dir=None, model=None) -> TrainResult:
    """Optimize ``L_rrg + L_sr`` with Adam over the train split.

    The validation split (when present) is decoded every ``eval_every``
    steps and the parameters with the best BLEU-4 are kept. When
    ``out_dir`` is given, config, per-step losses, validation metrics and
    both checkpoints are written there, each prefixed with the run id.
    """
    cfg.validate()
    train_set = by_split(samples, "train") or list(samples)
    val_set = by_split(samples, "val")
    B = min(cfg.batch_size, len(train_set))
    if cfg.sr_enabled and B < 2:
        raise ConfigError("contrastive loss needs at least 2 training samples per batch")
    model = model or build_model(cfg, vocab)
    model.train()
    opt = Adam(model.parameters(), lr=cfg.lr, betas=(cfg.beta1, cfg.beta2), eps=cfg.eps)
    order_rng = stream(cfg.seed, "batches")
    n_max = model.cfg.N_max

    patches_all = batch_patches(train_set)
    tokens_all = vocab.tokenize_batch([s.report for s in train_set], n_max)

    result = TrainResult(model)
    best_bleu = -1.0
    perm, cursor = order_rng.permutation(len(train_set)), 0

    def run_validation(step):
        nonlocal best_bleu
        rep, _, _ = evaluate(model, val_set, vocab)
        result.val.append((step, rep))
        if rep.bleu4 > best_bleu:
            best_bleu = rep.bleu4
            result.best_step = step
            result.best_state = model.state_dict()

    for step in range(1, cfg.steps + 1):
        if cursor + B > len(perm):
            perm, cursor = order_rng.permutation(len(train_set)), 0
        idx = np.sort(perm[cursor : cursor + B])
        cursor += B
        targets = TokenSequence(tokens_all.ids[idx], tokens_all.mask[idx])
        opt.zero_grad()
        lb = model.compute_losses(patches_all[idx], targets, cfg.use_rrg_loss, cfg.sr_enabled, cfg.sr_weight)
        vals = lb.values()
        if not np.isfinite(vals["total"]):
            ids = [train_set[i].sample_id for i in idx]
            raise TrainingError(f"non-finite loss at step {step}; batch sample ids: {ids}")
        tt.backward(lb.total)
        opt.step()
        result.losses.append((step, vals["l_rrg"], vals["l_sr"], vals["total"]))
        if val_set and cfg.eval_every and step % cfg.eval_every == 0:
            run_validation(step)
    if val_set and (not result.val or result.val[-1][0] != cfg.steps):
        run_validation(cfg.steps)
    model.eval()

    if out_dir is not None:
        _write_run(cfg, result, Path(out_dir))
    return result


def _write_run(cfg, result, out: Path):
    out.mkdir(parents=True, exist_ok=True)
    rid = cfg.run_id
    files = result.files
    files["config"] = out / f"{rid}_config.txt"
    save_run_config(cfg, files["config"])
    files["loss"] = out / f"{rid}_loss.csv"
    with open(files["loss"], "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["step", "l_rrg", "l_sr", "total"])
        for row in result.losses:
            w.writerow([row[0], *(_fmt(v) for v in row[1:])])
    files["val"] = out / f"{rid}_val.csv"
    with open(files["val"], "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["step", *METRIC_COLUMNS])
        for step, rep in result.val:
            w.writerow([step, *(_fmt(v) for v in rep.as_dict().values())])
    files["last"] = out / f"{rid}_last.ckpt"
    save_checkpoint(result.model, files["last"])
    if result.best_state is not None:
        final = result.model.state_dict()
        result.model.load_state_dict(result.best_state)
        files["best"] = out / f"{rid}_best.ckpt"
        save_checkpoint(result.model, files["best"])
        result.model.load_state_dict(final)


def write_eval(out_dir, run_id, split, report, cands, refs, sample_ids):
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    csv_path = out / f"{run_id}_{split}_metrics.csv"
    write_metric_csv(csv_path, [(run_id, split, report)])
    txt_path = out / f"{run_id}_{split}_reports.txt"
    with open(txt_path, "w") as fh:
        for sid, c, r in zip(sample_ids, cands, refs):
            fh.write(f"{sid}\n  generated: {c}\n  reference: {r}\n")
    return csv_path, txt_path


# ---------------------------------------------------------------------------
# ablation grid

ABLATIONS = (
    ("table2", "baseline", {"use_textual_inversion": False, "use_refinement": False}),
    ("table2", "refinement_only", {"use_textual_inversion": False}),
    ("table2", "inversion_only", {"use_refinement": False}),
    ("table2", "full", {}),
    ("table4", "no_refine_decoder", {"use_refine_decoder": False}),
    ("table4", "no_pseudo_words", {"use_textual_inversion": False}),
    ("table4", "no_cross_modal_interaction", {"use_cross_modal_interaction": False}),
    ("table4", "no_fusion_mlp", {"use_fusion_mlp": False}),
    ("table3", "transformer_inversion", {"inversion_variant": "transformer"}),
)

FULL_FLAGS = {
    "use_textual_inversion": True,
    "use_refinement": True,
    "use_cross_modal_interaction": True,
    "use_fusion_mlp": True,
    "use_refine_decoder": True,
    "inversion_variant": "mlp",
}


def ablation_configs(base: RunConfig, names=None):
    """(table, name, RunConfig) for each grid row, starting from the full flag set."""
    out = []
    for table, name, flags in ABLATIONS:
        if names is not None and name not in names:
            continue
        cfg = base.replace(**{**FULL_FLAGS, **flags}, run_id=f"{base.run_id}_{name}")
        out.append((table, name, cfg))
    return out


def ablate(base: RunConfig, samples, vocab, out_dir=None, seeds=None, names=None, split="test"):
    """Run the ablation grid and return ``{name: MetricReport}`` averaged over seeds.

    Writes ``<run_id>_ablation.csv`` and ``<run_id>_ablation.txt`` with a
    delta row (full minus baseline) when both rows are present.
    """
    seeds = list(seeds) if seeds is not None else [base.seed]
    eval_set = by_split(samples, split)
    rows = {}
    tables = {}
    for table, name, cfg in ablation_configs(base, names):
        reps = []
        for seed in seeds:
            res = train(cfg.replace(seed=seed), samples, vocab)
            res.load_best()
            rep, _, _ = evaluate(res.model, eval_set, vocab)
            reps.append(rep)
            log.info("ablation %s seed %d: %s", name, seed, rep)
        rows[name] = MetricReport(*np.mean([list(r.as_dict().values()) for r in reps], axis=0))
        tables[name] = table
    if out_dir is not None:
        write_ablation_table(Path(out_dir), base.run_id, rows, tables)
    return rows


def delta(improved: MetricReport, baseline: MetricReport) -> MetricReport:
    a, b = improved.as_dict(), baseline.as_dict()
    return MetricReport(**{k: a[k] - b[k] for k in a})


def write_ablation_table(out: Path, run_id, rows, tables):
    out.mkdir(parents=True, exist_ok=True)
    entries = [(tables[n], n, rep) for n, rep in rows.items()]
    if "full" in rows and "baseline" in rows:
        entries.append(("table2", "delta_full_vs_baseline", delta(rows["full"], rows["baseline"])))
    with open(out / f"{run_id}_ablation.csv", "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["table", "config", *METRIC_COLUMNS])
        for table, name, rep in entries:
            w.writerow([table, name, *(_fmt(v) for v in rep.as_dict().values())])
    short = ["B1", "B2", "B3", "B4", "MTR", "RG-L", "P", "R", "F1"]
    lines = [f"{'table':<7} {'config':<28} " + " ".join(f"{h:>7}" for h in short)]
    for table, name, rep in entries:
        sign = "+" if name.startswith("delta") else ""
        vals = " ".join(f"{v:>+7.3f}" if sign else f"{v:>7.3f}" for v in rep.as_dict().values())
        lines.append(f"{table:<7} {name:<28} {vals}")
    (out / f"{run_id}_ablation.txt").write_text("\n".join(lines) + "\n")


# ---------------------------------------------------------------------------
# attention maps


def heatmap(weights: np.ndarray) -> np.ndarray:
    """``M`` patch weights -> ``32 x 32`` map, max-normalized to [0, 1]."""
    grid = np.asarray(weights).reshape(GRID, GRID)
    up = np.kron(grid, np.ones((PATCH, PATCH)))
    top = up.max()
    return up / top if top > 0 else up


def write_pgm(path, image01):
    data = np.clip(np.round(np.asarray(image01) * 255), 0, 255).astype(np.uint8)
    h, w = data.shape
    Path(path).write_bytes(f"P5\n{w} {h}\n255\n".encode("ascii") + data.tobytes())


def read_pgm(path) -> np.ndarray:
    raw = Path(path).read_bytes()
    parts = raw.split(b"\n", 3)
    w, h = map(int, parts[1].split())
    return np.frombuffer(parts[3], dtype=np.uint8).reshape(h, w)


def token_attention(model, sample, vocab):
    """Greedy report for one sample and its per-token patch attention (``n x M``)."""
    model.eval()
    with tt.no_grad():
        I = model.encode_image(batch_patches([sample]))
        seq = model.greedy_decode(I)
        maps = model.attention_maps(I, seq)[0]
    ids = seq.ids[0, 1 : 1 + maps.shape[0]]
    n = len(ids) - int(len(ids) > 0 and ids[-1] == EOS)  # EOS is not part of the report
    tokens = [vocab.tokens[int(i)] for i in ids[:n]]
    return tokens, maps[:n]


def attn_dump(model, sample, vocab, out_dir, prefix=None):
    """One PGM heatmap per generated token plus a CSV of the raw weights."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    prefix = prefix or sample.sample_id
    tokens, maps = token_attention(model, sample, vocab)
    files = []
    for j, (tok, w) in enumerate(zip(tokens, maps)):
        safe = "".join(ch if ch.isalnum() else "_" for ch in tok)
        path = out / f"{prefix}_tok{j:02d}_{safe}.pgm"
        write_pgm(path, heatmap(w))
        files.append(path)
    csv_path = out / f"{prefix}_attention.csv"
    with open(csv_path, "w", newline="") as fh:
        wr = csv.writer(fh, lineterminator="\n")
        wr.writerow(["index", "token", *(f"patch{m}" for m in range(maps.shape[1] if len(maps) else 0))])
        for j, (tok, w) in enumerate(zip(tokens, maps)):
            wr.writerow([j, tok, *(_fmt(v) for v in w)])
    return tokens, maps, files, csv_path


def localization_rate(model, samples, vocab):
    """Fraction of correctly generated finding mentions whose peak attention hits the finding's region.

    For each sample, every generated finding phrase naming a gold-positive
    finding contributes one trial; the phrase's last token is scored.
    """
    hits = trials = 0
    last_word = {f.phrase.split()[-1]: (k, f) for k, f in enumerate(FINDINGS)}
    for s in samples:
        tokens, maps = token_attention(model, s, vocab)
        for j, tok in enumerate(tokens):
            if tok in last_word:
                k, f = last_word[tok]
                start = max((i + 1 for i in range(j) if tokens[i] == "."), default=0)
                if s.labels[k] and "no" not in tokens[start:j]:
                    trials += 1
                    hits += int(np.argmax(maps[j]) == f.region)
    return hits / trials if trials else 0.0, trials

