"""Attention-trace export and failure analysis.

Each reasoning step's word attention and spatial attention are written as
a machine-readable record plus one grayscale heatmap per step (binary PGM,
nearest-neighbor upscaled).  The failure report groups misclassified
samples into confusion cells and, for condition-transfer runs, splits
errors by whether the referent's color/shape pair was never seen under
the training condition.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import tensor as T
from .microgen import Corpus, QASample, Scene, get_condition, relation_holds
from .tensor import ContractError
from .trainer import Checkpoint, encode_corpus, model_from_checkpoint

DUMP_FORMAT = "macnet-attention v1"
HEATMAP_SCALE = 32  # nearest-neighbor upscale factor per grid cell


@dataclass
class AttentionDump:
    sample_id: str
    scene_id: str
    tokens: list
    predicted: str
    gold: str
    word_attention: np.ndarray  # [p x n_tokens]
    spatial_attention: np.ndarray  # [p x H x W]

    @property
    def steps(self) -> int:
        return self.word_attention.shape[0]


def trace_sample(checkpoint: Checkpoint, corpus: Corpus, sample: QASample) -> AttentionDump:
    """Forward one sample and capture its per-step attention distributions."""
    model, vocab = model_from_checkpoint(checkpoint)
    single = Corpus({sample.scene_id: corpus.scenes[sample.scene_id]}, [sample])
    enc = encode_corpus(single, vocab, strict=True)
    with T.no_grad():
        logits, traces = model.forward(enc.tokens, enc.lengths, enc.grids)
    n = len(sample.tokens)
    word = np.stack([t.cv[0, :n] for t in traces])
    spatial = np.stack([t.rv[0] for t in traces])
    predicted = checkpoint.answers[int(logits.data[0].argmax())]
    return AttentionDump(sample.question_id, sample.scene_id, list(sample.tokens),
                         predicted, sample.answer, word, spatial)


def heatmap_bytes(grid: np.ndarray) -> np.ndarray:
    """Affine map of one step's spatial attention to 8-bit gray.

    Per step the minimum maps to 0 and the maximum to 255; a constant
    (uniform) grid maps to mid-gray 128.  Cells are upscaled x32 with
    nearest-neighbor replication.
    """
    lo, hi = float(grid.min()), float(grid.max())
    if hi - lo < 1e-300:
        pixels = np.full(grid.shape, 128, dtype=np.uint8)
    else:
        pixels = np.round(255.0 * (grid - lo) / (hi - lo)).astype(np.uint8)
    return np.kron(pixels, np.ones((HEATMAP_SCALE, HEATMAP_SCALE), dtype=np.uint8))


def write_pgm(path, pixels: np.ndarray):
    h, w = pixels.shape
    with Path(path).open("wb") as fh:
        fh.write(f"P5\n{w} {h}\n255\n".encode("ascii"))
        fh.write(pixels.astype(np.uint8).tobytes())


def write_dump(dump: AttentionDump, out_dir) -> Path:
    """Write the record file, per-step heatmaps and the word-attention text."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    p, H, W = dump.spatial_attention.shape

    lines = [DUMP_FORMAT,
             f"sample={dump.sample_id} scene={dump.scene_id} steps={p} grid={H}x{W} "
             f"predicted={dump.predicted} gold={dump.gold}",
             "tokens=" + " ".join(dump.tokens)]
    for i in range(p):
        lines.append(f"step={i + 1} words=" +
                     " ".join(f"{v:.8f}" for v in dump.word_attention[i]))
        lines.append(f"step={i + 1} grid=" +
                     " ".join(f"{v:.8f}" for v in dump.spatial_attention[i].reshape(-1)))
    record = out_dir / f"{dump.sample_id}.attn.txt"
    record.write_text("\n".join(lines) + "\n")

    for i in range(p):
        write_pgm(out_dir / f"{dump.sample_id}.step{i + 1}.pgm",
                  heatmap_bytes(dump.spatial_attention[i]))

    words = []
    for i in range(p):
        words.append(f"step {i + 1}")
        for tok, weight in zip(dump.tokens, dump.word_attention[i]):
            words.append(f"{tok}: {weight:.4f}")
    (out_dir / f"{dump.sample_id}.words.txt").write_text("\n".join(words) + "\n")
    return record


def parse_dump(path) -> AttentionDump:
    """Read a record file back (round-trips within text precision)."""
    lines = Path(path).read_text().splitlines()
    if lines[0] != DUMP_FORMAT:
        raise ContractError(f"{path}: unrecognized dump header {lines[0]!r}")
    meta = dict(kv.split("=", 1) for kv in lines[1].split(" "))
    tokens = lines[2].split("=", 1)[1].split(" ")
    p = int(meta["steps"])
    H, W = (int(x) for x in meta["grid"].split("x"))
    word = np.zeros((p, len(tokens)))
    spatial = np.zeros((p, H, W))
    for line in lines[3:]:
        head, payload = line.split(" ", 1)
        step = int(head.split("=")[1]) - 1
        kind, values = payload.split("=", 1)
        arr = np.array([float(v) for v in values.split(" ")])
        if kind == "words":
            word[step] = arr
        else:
            spatial[step] = arr.reshape(H, W)
    return AttentionDump(meta["sample"], meta["scene"], tokens, meta["predicted"],
                         meta["gold"], word, spatial)


# -- failure analysis --------------------------------------------------


def _referent_objects(scene: Scene, sample: QASample) -> list:
    """Objects the question refers to, when uniquely determined; else []."""
    q = sample.program
    if q is None:
        return []
    try:
        if q.category == "query_attribute":
            cands = [o for o in scene.objects if q.filter.matches(o)]
            if q.relation is not None:
                refs = [o for o in scene.objects if q.filter2.matches(o)]
                if len(refs) != 1:
                    return []
                cands = [o for o in cands
                         if o is not refs[0] and relation_holds(q.relation, o, refs[0])]
            return cands if len(cands) == 1 else []
        if q.category == "compare_attribute":
            out = []
            for flt in (q.filter, q.filter2):
                refs = [o for o in scene.objects if flt.matches(o)]
                if len(refs) != 1:
                    return []
                out.append(refs[0])
            return out
    except ContractError:
        return []
    return []


@dataclass
class FailureReport:
    n: int
    accuracy: float
    cells: dict  # (category, gold, predicted) -> count
    ooc_errors: int = 0
    ooc_total: int = 0
    in_errors: int = 0
    in_total: int = 0
    train_condition: str = ""

    @property
    def total_errors(self) -> int:
        return sum(self.cells.values())

    def format(self) -> str:
        lines = [f"samples={self.n} accuracy={self.accuracy:.4f} errors={self.total_errors}"]
        for (cat, gold, pred), count in sorted(self.cells.items(),
                                               key=lambda kv: -kv[1]):
            lines.append(f"  {cat}: gold={gold} predicted={pred} count={count}")
        if self.train_condition:
            def rate(err, total):
                return f"{err}/{total} ({err / total:.3f})" if total else "0/0 (n/a)"
            lines.append(f"out-of-condition referents (vs {self.train_condition}): "
                         f"errors {rate(self.ooc_errors, self.ooc_total)}")
            lines.append(f"in-condition referents: errors {rate(self.in_errors, self.in_total)}")
        return "\n".join(lines) + "\n"


def failure_report(checkpoint: Checkpoint, corpus: Corpus,
                   train_condition: str = "") -> FailureReport:
    """Confusion cells of all misclassified samples, with an optional
    out-of-condition split.

    A sample counts as out-of-condition when its (unique) referent carries
    a color/shape pair the training condition forbids; questions without a
    unique referent fall back to whether the scene contains any forbidden
    pair.
    """
    model, vocab = model_from_checkpoint(checkpoint)
    enc = encode_corpus(corpus, vocab)
    preds = []
    with T.no_grad():
        for lo in range(0, len(enc.labels), 256):
            idx = np.arange(lo, min(lo + 256, len(enc.labels)))
            logits, _ = model.forward(enc.tokens[idx], enc.lengths[idx], enc.grids[idx])
            preds.extend(int(i) for i in logits.data.argmax(axis=1))

    cond = get_condition(train_condition) if train_condition else None
    cells = {}
    correct = 0
    ooc_err = ooc_tot = in_err = in_tot = 0
    for sample, pred_idx in zip(corpus.samples, preds):
        predicted = checkpoint.answers[pred_idx]
        ok = predicted == sample.answer
        correct += int(ok)
        if not ok:
            key = (sample.category, sample.answer, predicted)
            cells[key] = cells.get(key, 0) + 1
        if cond is not None:
            scene = corpus.scenes[sample.scene_id]
            referents = _referent_objects(scene, sample) or scene.objects
            is_ooc = any(not cond.permits(o.shape, o.color) for o in referents)
            if is_ooc:
                ooc_tot += 1
                ooc_err += int(not ok)
            else:
                in_tot += 1
                in_err += int(not ok)
    n = len(corpus.samples)
    return FailureReport(n, correct / n, cells, ooc_err, ooc_tot, in_err, in_tot,
                         train_condition)
