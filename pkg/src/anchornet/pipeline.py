"""Localize-then-classify pipeline, LIP sweeps, and adversarial evaluation."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import Tape, Tensor
from .corpus import Corpus
from .errors import InvalidArgument, VocabMismatch
from .flops import BranchStats, PipelineReport, pipeline_ratio
from .localize import (Heatmap, LipParams, area_k, covered_mask, decide_class, ensemble_predict,
                       lip, select_branch, top1_text_patch)
from .model import AnchorNetT, total_loss
from .serialization import Checkpoint, LocalizationRecord
from .stack import StackConfig


def localize_batch(model: AnchorNetT, tokens: np.ndarray, doc_ids: Sequence[int],
                   labels: Sequence[int]) -> list[LocalizationRecord]:
    """forward -> decide_class -> select_branch -> top-1 span, per document."""
    out = model.forward(tokens)
    records = []
    for n, (doc, label) in enumerate(zip(doc_ids, labels)):
        probs = [b.class_probs.data[n] for b in out.branches]
        decision = decide_class(probs)
        j = select_branch(decision.gamma, probs)
        branch = out.branches[j]
        rect = top1_text_patch(branch.class_map.data[n], decision.gamma, branch.kernel)
        records.append(LocalizationRecord(int(doc), int(label), decision.gamma, branch.kernel,
                                          (rect.left, rect.right), decision.labels, decision.confidences))
    return records


def run_localize(source: Checkpoint | AnchorNetT, corpus: Corpus, split: str = "test",
                 batch_size: int = 250, vocab: dict[str, int] | None = None) -> list[LocalizationRecord]:
    """One record per document of ``split``, in corpus order.

    A checkpoint's stored vocabulary must equal the corpus vocabulary; for a
    bare model pass ``vocab`` to get the same check.
    """
    if isinstance(source, Checkpoint):
        if source.kind != "anchornet-t":
            raise InvalidArgument(f"localization needs an anchornet-t checkpoint, got {source.kind}")
        vocab = source.vocab
        model = source.build()
    else:
        model = source
    if vocab is not None and vocab != corpus.vocab:
        raise VocabMismatch("checkpoint vocabulary differs from the corpus vocabulary")
    if model.config.vocab_size != len(corpus.vocab):
        raise VocabMismatch(f"model vocab_size {model.config.vocab_size} != corpus vocab {len(corpus.vocab)}")
    ids = corpus.indices(split)
    tokens, labels = corpus.encode(split, model.config.seq_len)
    records = []
    for start in range(0, len(ids), batch_size):
        sl = slice(start, start + batch_size)
        records += localize_batch(model, tokens[sl], ids[sl], labels[sl])
    return records


@dataclass
class DownstreamReport:
    accuracy: float
    predictions: list[int]
    cost: PipelineReport | None


def span_tokens(corpus: Corpus, record: LocalizationRecord, seq_len: int) -> np.ndarray:
    """Tokens of a record's span, taken from the padded/truncated encoding the upstream model saw."""
    encoded = corpus.encode_tokens(corpus.documents[record.doc], seq_len)
    start, end = record.span
    if not 0 <= start < end <= seq_len:
        raise InvalidArgument(f"span {record.span} outside a sequence of {seq_len}")
    return encoded[start:end]


def run_downstream(records: Sequence[LocalizationRecord], corpus: Corpus,
                   classify: Callable[[list[np.ndarray]], np.ndarray], seq_len: int,
                   stack: StackConfig | None = None) -> DownstreamReport:
    """Classify each record's span(s) and score against the record labels.

    ``classify`` maps a list of token spans to an ``[N, num_classes]`` array
    of class distributions.  Records sharing a ``doc`` are ensembled by
    summing their distributions.  With a downstream ``stack`` the report
    includes the patch-vs-full FLOPs ratio.
    """
    if not records:
        raise InvalidArgument("no localization records")
    spans = [span_tokens(corpus, r, seq_len) for r in records]
    probs = np.asarray(classify(spans), dtype=np.float64)
    if probs.shape[0] != len(records):
        raise InvalidArgument(f"classifier returned {probs.shape[0]} rows for {len(records)} spans")
    by_doc: dict[int, list[int]] = {}
    for i, r in enumerate(records):
        by_doc.setdefault(r.doc, []).append(i)
    preds, correct = [], 0
    for doc, rows in by_doc.items():
        y = ensemble_predict(probs[rows])
        preds.append(y)
        correct += y == records[rows[0]].label
    cost = None
    if stack is not None:
        stats = []
        for theta in sorted({r.theta for r in records}):
            rows = [r for r in records if r.theta == theta]
            per_doc = len(rows) / len({r.doc for r in rows})
            stats.append(BranchStats(len({r.doc for r in rows}), per_doc, (1, theta)))
        cost = pipeline_ratio(stack, (1, seq_len), stats)
    return DownstreamReport(correct / len(by_doc), preds, cost)


def model_classifier(model, batch_size: int = 500) -> Callable[[list[np.ndarray]], np.ndarray]:
    """Wrap a downstream model so spans of equal length are classified in batches."""
    def classify(spans):
        out = np.zeros((len(spans), model.config.num_classes))
        by_len: dict[int, list[int]] = {}
        for i, s in enumerate(spans):
            by_len.setdefault(len(s), []).append(i)
        for rows in by_len.values():
            for start in range(0, len(rows), batch_size):
                chunk = rows[start:start + batch_size]
                out[chunk] = model.forward(np.stack([spans[i] for i in chunk])).data
        return out
    return classify


def random_spans(records: Sequence[LocalizationRecord], seq_len: int,
                 rng: np.random.Generator) -> list[LocalizationRecord]:
    """Same span widths at uniformly random offsets (ablation baseline)."""
    out = []
    for r in records:
        width = r.span[1] - r.span[0]
        start = int(rng.integers(seq_len - width + 1))
        out.append(LocalizationRecord(r.doc, r.label, r.gamma, r.theta, (start, start + width),
                                      r.labels, r.confidences))
    return out


@dataclass(frozen=True)
class SweepRow:
    T: float
    P: float
    mean_patches: float
    covered_fraction: float


def lip_sweep(heatmaps: Sequence[Heatmap], T_values: Sequence[float], P_values: Sequence[float],
              K: int | Callable[[Heatmap], int] | None = None) -> list[SweepRow]:
    """Mean patch count and covered input fraction for every (T, P) pair.

    ``K`` is a fixed cap, a per-heatmap callable, or ``None`` for
    :func:`area_k` of the heatmap's geometry (as many as could tile the input).
    """
    if not heatmaps or not T_values or not P_values:
        raise InvalidArgument("lip_sweep needs heatmaps and non-empty T and P grids")
    rows = []
    for T in T_values:
        for P in P_values:
            counts, covers = [], []
            for hm in heatmaps:
                geo = hm.geometry
                k = K(hm) if callable(K) else K if K is not None else area_k(geo.in_size, geo.rf)
                ps = lip(hm, LipParams(k, T, P))
                counts.append(len(ps))
                covers.append(covered_mask(geo.in_size, ps).mean())
            rows.append(SweepRow(float(T), float(P), float(np.mean(counts)), float(np.mean(covers))))
    return rows


@dataclass(frozen=True)
class FgsmReport:
    epsilon: float
    clean_loss: float
    adversarial_loss: float
    clean_accuracy: float
    adversarial_accuracy: float


def _system_accuracy(output, labels) -> float:
    probs = np.stack([b.class_probs.data for b in output.branches], axis=1)
    preds = [decide_class(p).gamma for p in probs]
    return float(np.mean(np.asarray(preds) == labels))


def fgsm_eval(model: AnchorNetT, tokens: np.ndarray, labels: np.ndarray, epsilon: float,
              batch_size: int = 250) -> FgsmReport:
    """Embedding-space FGSM: perturb every embedded position by ``epsilon * sign(grad)``.

    Loss is ``total_loss``; accuracy uses the systematic class decision.
    """
    labels = np.asarray(labels, dtype=np.int64)
    if len(labels) == 0:
        raise InvalidArgument("fgsm_eval needs at least one example")
    sums = np.zeros(4)
    for start in range(0, len(labels), batch_size):
        tok, y = tokens[start:start + batch_size], labels[start:start + batch_size]
        x = Tensor(model.embed(tok).data, requires_grad=True)
        with Tape() as tape:
            clean = model.forward_embedded(x)
            loss = total_loss(clean, y, model.config)
        tape.backward(loss)
        adv = model.forward_embedded(Tensor(ad.fgsm_perturb(x, x.grad, epsilon)))
        w = len(y)
        sums += w * np.array([loss.item(), total_loss(adv, y, model.config).item(),
                              _system_accuracy(clean, y), _system_accuracy(adv, y)])
    cl, al, ca, aa = sums / len(labels)
    return FgsmReport(float(epsilon), cl, al, ca, aa)
