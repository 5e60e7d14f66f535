"""File formats, synthetic corpora, evaluation, and checkpoints.

Three plain-text formats, all line-oriented and bit-exactly serializable:

* classification data -- one instance per line,
  ``<label or ?> <feat>:<value> ...``;
* sequence data -- blank-line separated blocks, one token per line as
  tab-separated feature strings with the label (or ``?``) last;
* constraint files -- blank-line separated ``key=value`` records.

The synthetic generators sample from known log-linear truths so constraint
targets can be measured on the emitted pool rather than invented.
"""
from __future__ import annotations

import json
import warnings
from dataclasses import dataclass, field

import numpy as np

from .constraints import (ConstraintSpec, PenaltyFamily,
                          RepetitionCountFeature, SelfTransitionFeature,
                          StartLabelFeature, TokenLabelFeature,
                          WordLabelFeature)
from .data import (FeatureLayout, Instance, LabelSpace, ParamVector,
                   SequenceInstance, SparseFeatures)
from .errors import DataError, ParseError
from .models import label_scores, viterbi

CLASSIFICATION = "classification"
SEQUENCE = "sequence"

_CONSTRAINT_KEYS = ("kind", "trigger", "label", "target", "target-mode",
                    "penalty", "beta", "scope")


@dataclass
class Dataset:
    """Instances plus the interning tables that give ids meaning."""

    kind: str
    labeled: list = field(default_factory=list)
    unlabeled: list = field(default_factory=list)
    vocab: dict = field(default_factory=dict)
    label_names: list = field(default_factory=list)

    @property
    def labels(self) -> LabelSpace:
        return LabelSpace.from_names(self.label_names)

    def layout(self) -> FeatureLayout:
        return FeatureLayout(n_inputs=len(self.vocab),
                             n_labels=len(self.label_names),
                             chain=self.kind == SEQUENCE)

    def feature_id(self, name: str) -> int:
        return self.vocab.setdefault(name, len(self.vocab))

    def label_id(self, name: str) -> int:
        try:
            return self.label_names.index(name)
        except ValueError:
            self.label_names.append(name)
            return len(self.label_names) - 1


def _shell(kind, into):
    if into is None:
        return Dataset(kind)
    if into.kind != kind:
        raise DataError(f"cannot extend a {into.kind} dataset with "
                        f"{kind} data")
    return Dataset(kind, vocab=into.vocab, label_names=into.label_names)


# ---------------------------------------------------------------------------
# classification files


def parse_classification_file(path, into: Dataset | None = None) -> Dataset:
    """One instance per line: ``<label or ?> <feat>:<value> ...``.

    Passing ``into`` extends that dataset's vocabulary and label list in
    place so several files share one id space.
    """
    ds = _shell(CLASSIFICATION, into)
    with open(path, encoding="utf-8") as fh:
        for lineno, raw in enumerate(fh, start=1):
            line = raw.strip()
            if not line:
                continue
            fields = line.split()
            tag, feats = fields[0], fields[1:]
            counts: dict[int, float] = {}
            for tok in feats:
                name, sep, val = tok.rpartition(":")
                if not sep or not name:
                    raise ParseError(
                        f"{path}:{lineno}: expected feat:value, got {tok!r}")
                try:
                    v = float(val)
                except ValueError:
                    raise ParseError(
                        f"{path}:{lineno}: bad value in {tok!r}") from None
                fid = ds.feature_id(name)
                counts[fid] = counts.get(fid, 0.0) + v
            ids = np.array(sorted(counts), dtype=np.int64)
            feats_vec = SparseFeatures(ids, np.array([counts[i] for i in ids]))
            if tag == "?":
                ds.unlabeled.append(Instance(feats_vec, None))
            else:
                ds.labeled.append(Instance(feats_vec, ds.label_id(tag)))
    return ds


def write_classification_file(path, dataset: Dataset) -> None:
    """Canonical form: labeled lines first, features in id order."""
    names = _id_to_name(dataset.vocab)
    with open(path, "w", encoding="utf-8") as fh:
        for inst in list(dataset.labeled) + list(dataset.unlabeled):
            tag = ("?" if inst.label is None
                   else dataset.label_names[inst.label])
            toks = [f"{names[i]}:{v:g}" for i, v in inst.features.pairs()]
            fh.write(" ".join([tag] + toks) + "\n")


# ---------------------------------------------------------------------------
# sequence files


def parse_sequence_file(path, into: Dataset | None = None) -> Dataset:
    """Blank-line separated sequences of tab-separated token lines.

    Each token line holds feature strings with the label (or ``?``) in the
    final field.  A sequence must be fully labeled or fully unlabeled.
    """
    ds = _shell(SEQUENCE, into)
    block: list[tuple[int, list[str], str]] = []

    def flush():
        if not block:
            return
        tags = [tag for _, _, tag in block]
        if any(t == "?" for t in tags) and any(t != "?" for t in tags):
            raise ParseError(
                f"{path}:{block[0][0]}: sequence mixes labeled and "
                "unlabeled positions")
        positions = []
        for _, feats, _ in block:
            counts: dict[int, float] = {}
            for name in feats:
                fid = ds.feature_id(name)
                counts[fid] = counts.get(fid, 0.0) + 1.0
            ids = np.array(sorted(counts), dtype=np.int64)
            positions.append(
                SparseFeatures(ids, np.array([counts[i] for i in ids])))
        if tags[0] == "?":
            ds.unlabeled.append(SequenceInstance(tuple(positions)))
        else:
            labels = tuple(ds.label_id(t) for t in tags)
            ds.labeled.append(SequenceInstance(tuple(positions), labels))
        block.clear()

    with open(path, encoding="utf-8") as fh:
        for lineno, raw in enumerate(fh, start=1):
            line = raw.rstrip("\n")
            if not line.strip():
                flush()
                continue
            fields = line.split("\t")
            if len(fields) < 2:
                raise ParseError(
                    f"{path}:{lineno}: token line needs at least one "
                    "feature and a label field")
            block.append((lineno, fields[:-1], fields[-1]))
    flush()
    return ds


def write_sequence_file(path, dataset: Dataset) -> None:
    names = _id_to_name(dataset.vocab)
    with open(path, "w", encoding="utf-8") as fh:
        blocks = []
        for inst in list(dataset.labeled) + list(dataset.unlabeled):
            lines = []
            for t, feats in enumerate(inst.positions):
                toks = []
                for i, v in feats.pairs():
                    toks.extend([names[i]] * int(round(v)))
                tag = ("?" if inst.labels is None
                       else dataset.label_names[inst.labels[t]])
                lines.append("\t".join(toks + [tag]))
            blocks.append("\n".join(lines))
        fh.write("\n\n".join(blocks) + ("\n" if blocks else ""))


def _id_to_name(vocab: dict) -> list:
    names = [None] * len(vocab)
    for name, i in vocab.items():
        names[i] = name
    return names


# ---------------------------------------------------------------------------
# constraint files


def parse_constraints(path, dataset: Dataset,
                      default_beta: float = 0.01) -> list[ConstraintSpec]:
    """Blank-line separated ``key=value`` records, one constraint each.

    Constraints whose trigger never occurs in the vocabulary are dropped
    with a warning so a constraint list written for a larger corpus still
    loads against a subset.
    """
    records: list[tuple[int, dict]] = []
    current: dict = {}
    start = 1
    with open(path, encoding="utf-8") as fh:
        for lineno, raw in enumerate(fh, start=1):
            line = raw.strip()
            if not line or line.startswith("#"):
                if current:
                    records.append((start, current))
                    current = {}
                continue
            key, sep, val = line.partition("=")
            if not sep:
                raise ParseError(f"{path}:{lineno}: expected key=value")
            key = key.strip()
            if key not in _CONSTRAINT_KEYS:
                raise ParseError(f"{path}:{lineno}: unknown key {key!r}")
            if not current:
                start = lineno
            current[key] = val.strip()
    if current:
        records.append((start, current))

    specs = []
    for fid, (lineno, rec) in enumerate(records):
        specs.extend(_build_spec(fid, lineno, rec, dataset, default_beta,
                                 path))
    return specs


def _build_spec(fid, lineno, rec, dataset, default_beta, path):
    try:
        kind = rec["kind"]
        target = float(rec["target"])
    except KeyError as missing:
        raise ParseError(f"{path}:{lineno}: missing {missing}") from None
    except ValueError:
        raise ParseError(f"{path}:{lineno}: bad target "
                         f"{rec['target']!r}") from None
    mode = rec.get("target-mode", "proportion")
    scope = rec.get("scope", "per-dataset")
    beta = float(rec.get("beta", default_beta))
    penalty = PenaltyFamily(rec.get("penalty", "l2"), beta)

    def label_index():
        # constraint files may introduce labels: minimally supervised runs
        # have no labeled lines to name them first
        return dataset.label_id(rec["label"])

    if kind in ("word-label", "token-label"):
        trigger = rec.get("trigger")
        if trigger is None:
            raise ParseError(f"{path}:{lineno}: {kind} needs a trigger")
        if trigger not in dataset.vocab:
            warnings.warn(f"{path}:{lineno}: trigger {trigger!r} not in "
                          "vocabulary; constraint deactivated", stacklevel=3)
            return []
        cls = WordLabelFeature if kind == "word-label" else TokenLabelFeature
        feat = cls(fid=fid, trigger=dataset.vocab[trigger],
                   label=label_index(), scope=scope)
    elif kind == "start-label":
        feat = StartLabelFeature(fid=fid, label=label_index(), scope=scope)
    elif kind == "self-transition":
        feat = SelfTransitionFeature(fid=fid, scope=scope)
    elif kind == "repetition-count":
        feat = RepetitionCountFeature(fid=fid, scope=scope)
    else:
        raise ParseError(f"{path}:{lineno}: constraint kind {kind!r} is "
                         "not expressible in a constraint file")
    return [ConstraintSpec(feat, target, mode, penalty)]


def write_constraint_file(path, records) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for i, rec in enumerate(records):
            if i:
                fh.write("\n")
            for key in _CONSTRAINT_KEYS:
                if key in rec:
                    fh.write(f"{key}={rec[key]}\n")


# ---------------------------------------------------------------------------
# synthetic corpora


@dataclass(frozen=True)
class ClfSynthSpec:
    """A mixture of label-owned trigger words over a shared noise pool."""

    n_labels: int = 6
    n_triggers: int = 50
    n_noise: int = 30
    doc_len: int = 6
    p_hit: float = 0.35
    n_labeled: int = 0
    n_unlabeled: int = 2000
    n_test: int = 500
    beta: float = 0.01


@dataclass(frozen=True)
class ChainSynthSpec:
    """Sticky-transition chains with label-owned token triggers."""

    n_labels: int = 4
    triggers_per_label: int = 3
    n_noise: int = 10
    self_prob: float = 0.9
    p_hit: float = 0.6
    min_len: int = 4
    max_len: int = 10
    n_labeled: int = 5
    n_unlabeled: int = 40
    n_test: int = 40
    segment_unique: bool = False
    beta: float = 1.0


@dataclass
class SynthResult:
    train: Dataset
    test: Dataset
    specs: list
    records: list
    pool_gold: list


def synth_generate(task: str, params=None, seed: int = 0) -> SynthResult:
    """Sample a dataset from a known truth plus matching constraints.

    Constraint targets are measured on the emitted unlabeled pool (using
    the generator's hidden labels), so they are exactly feasible.
    """
    if task == CLASSIFICATION:
        return _synth_classification(params or ClfSynthSpec(), seed)
    if task == SEQUENCE:
        return _synth_chain(params or ChainSynthSpec(), seed)
    raise DataError(f"unknown synthesis task {task!r}")


def _synth_classification(p: ClfSynthSpec, seed: int) -> SynthResult:
    rng = np.random.default_rng(seed)
    train = Dataset(CLASSIFICATION)
    train.label_names.extend(f"L{k}" for k in range(p.n_labels))
    owners = [k % p.n_labels for k in range(p.n_triggers)]
    trig_ids = [train.feature_id(f"t{k}") for k in range(p.n_triggers)]
    noise_ids = [train.feature_id(f"n{k}") for k in range(p.n_noise)]
    by_owner = [[trig_ids[i] for i in range(p.n_triggers) if owners[i] == k]
                for k in range(p.n_labels)]

    def doc(y):
        counts: dict[int, float] = {}
        for _ in range(p.doc_len):
            if rng.random() < p.p_hit:
                fid = by_owner[y][rng.integers(len(by_owner[y]))]
            else:
                fid = noise_ids[rng.integers(p.n_noise)]
            counts[fid] = counts.get(fid, 0.0) + 1.0
        ids = np.array(sorted(counts), dtype=np.int64)
        return SparseFeatures(ids, np.array([counts[i] for i in ids]))

    for _ in range(p.n_labeled):
        y = int(rng.integers(p.n_labels))
        train.labeled.append(Instance(doc(y), y))
    pool_gold = [int(rng.integers(p.n_labels)) for _ in range(p.n_unlabeled)]
    train.unlabeled.extend(Instance(doc(y), None) for y in pool_gold)

    test = Dataset(CLASSIFICATION, vocab=train.vocab,
                   label_names=train.label_names)
    for _ in range(p.n_test):
        y = int(rng.integers(p.n_labels))
        test.labeled.append(Instance(doc(y), y))

    specs, records = [], []
    for i, fid in enumerate(trig_ids):
        hits = [g for inst, g in zip(train.unlabeled, pool_gold)
                if inst.features.get(fid) > 0]
        if not hits:
            continue
        target = sum(1 for g in hits if g == owners[i]) / len(hits)
        feat = WordLabelFeature(fid=len(specs), trigger=fid,
                                label=owners[i])
        specs.append(ConstraintSpec(feat, target, "proportion",
                                    PenaltyFamily("l2", p.beta)))
        records.append({"kind": "word-label", "trigger": f"t{i}",
                        "label": f"L{owners[i]}", "target": f"{target!r}",
                        "target-mode": "proportion", "penalty": "l2",
                        "beta": f"{p.beta!r}"})
    return SynthResult(train, test, specs, records, pool_gold)


def _chain_labels(p: ChainSynthSpec, rng) -> list[int]:
    L = int(rng.integers(p.min_len, p.max_len + 1))
    if not p.segment_unique:
        y = [int(rng.integers(p.n_labels))]
        while len(y) < L:
            if rng.random() < p.self_prob:
                y.append(y[-1])
            else:
                step = int(rng.integers(1, p.n_labels))
                y.append((y[-1] + step) % p.n_labels)
        return y
    # contiguous segments with all-distinct labels
    n_seg = int(rng.integers(1, min(p.n_labels, L) + 1))
    labels = rng.permutation(p.n_labels)[:n_seg]
    cuts = np.sort(rng.choice(np.arange(1, L), size=n_seg - 1,
                              replace=False)) if n_seg > 1 else []
    lengths = np.diff(np.r_[0, cuts, L])
    y = []
    for lab, ln in zip(labels, lengths):
        y.extend([int(lab)] * int(ln))
    return y


def _synth_chain(p: ChainSynthSpec, seed: int) -> SynthResult:
    rng = np.random.default_rng(seed)
    train = Dataset(SEQUENCE)
    train.label_names.extend(f"L{k}" for k in range(p.n_labels))
    trig = [[train.feature_id(f"t{k}_{i}")
             for i in range(p.triggers_per_label)]
            for k in range(p.n_labels)]
    noise = [train.feature_id(f"n{k}") for k in range(p.n_noise)]
    trig_owner = {fid: k for k, row in enumerate(trig) for fid in row}

    def emit(y):
        positions = []
        for lab in y:
            if rng.random() < p.p_hit:
                fid = trig[lab][rng.integers(p.triggers_per_label)]
            else:
                fid = noise[rng.integers(p.n_noise)]
            positions.append(SparseFeatures(np.array([fid]), np.ones(1)))
        return tuple(positions)

    for _ in range(p.n_labeled):
        y = _chain_labels(p, rng)
        train.labeled.append(SequenceInstance(emit(y), tuple(y)))
    pool_gold = [_chain_labels(p, rng) for _ in range(p.n_unlabeled)]
    train.unlabeled.extend(SequenceInstance(emit(y)) for y in pool_gold)

    test = Dataset(SEQUENCE, vocab=train.vocab,
                   label_names=train.label_names)
    for _ in range(p.n_test):
        y = _chain_labels(p, rng)
        test.labeled.append(SequenceInstance(emit(y), tuple(y)))

    specs, records = [], []
    # per-trigger token-label targets measured on the pool
    occur: dict[int, list[int]] = {}
    for inst, gold in zip(train.unlabeled, pool_gold):
        for t, feats in enumerate(inst.positions):
            fid = int(feats.ids[0])
            if fid in trig_owner:
                occur.setdefault(fid, []).append(gold[t])
    for k, row in enumerate(trig):
        for i, fid in enumerate(row):
            seen = occur.get(fid)
            if not seen:
                continue
            target = sum(1 for g in seen if g == k) / len(seen)
            feat = TokenLabelFeature(fid=len(specs), trigger=fid, label=k)
            specs.append(ConstraintSpec(feat, target, "proportion",
                                        PenaltyFamily("l2", p.beta)))
            records.append({"kind": "token-label", "trigger": f"t{k}_{i}",
                            "label": f"L{k}", "target": f"{target!r}",
                            "target-mode": "proportion", "penalty": "l2",
                            "beta": f"{p.beta!r}"})
    if p.segment_unique:
        feat = RepetitionCountFeature(fid=len(specs), scope="per-instance")
        specs.append(ConstraintSpec(feat, 0.0, "count",
                                    PenaltyFamily("affine")))
        records.append({"kind": "repetition-count", "target": "0.0",
                        "target-mode": "count", "penalty": "affine",
                        "scope": "per-instance"})
    else:
        trans = [(a, b) for y in pool_gold for a, b in zip(y, y[1:])]
        if trans:
            rate = sum(1 for a, b in trans if a == b) / len(trans)
            feat = SelfTransitionFeature(fid=len(specs))
            specs.append(ConstraintSpec(feat, rate, "proportion",
                                        PenaltyFamily("l2", p.beta)))
            records.append({"kind": "self-transition", "target": f"{rate!r}",
                            "target-mode": "proportion", "penalty": "l2",
                            "beta": f"{p.beta!r}"})
    return SynthResult(train, test, specs, records, pool_gold)


# ---------------------------------------------------------------------------
# decoding, votes, evaluation


def decode(lam: ParamVector, inst, labels: LabelSpace):
    """Argmax labeling; ties break toward the lower label index."""
    if isinstance(inst, SequenceInstance):
        return viterbi(lam, inst, labels)
    return int(np.argmax(label_scores(lam, inst)))


def vote_predict(specs, inst, n_labels: int):
    """Label by the constraint features alone: targets vote for labels.

    The no-model baseline: each word/token-label constraint adds its target
    times its trigger value to its label's score.
    """
    if isinstance(inst, SequenceInstance):
        out = np.zeros(len(inst), dtype=np.int64)
        for t in range(len(inst)):
            score = np.zeros(n_labels)
            for s in specs:
                if isinstance(s.feature, TokenLabelFeature) and \
                        inst.positions[t].get(s.feature.trigger) > 0:
                    score[s.feature.label] += s.target
            out[t] = int(np.argmax(score))
        return out
    score = np.zeros(n_labels)
    for s in specs:
        if isinstance(s.feature, WordLabelFeature):
            score[s.feature.label] += s.target * s.feature.trigger_value(inst)
    return int(np.argmax(score))


@dataclass
class LabelScore:
    name: str
    precision: float
    recall: float
    f1: float
    degenerate: bool = False


@dataclass
class ExperimentReport:
    """Headline metrics plus per-label detail and run bookkeeping."""

    accuracy: float
    macro_f1: float
    per_label: list
    objective_trace: list = field(default_factory=list)
    wall_clock: dict = field(default_factory=dict)

    def as_text(self) -> str:
        lines = [f"accuracy\t{self.accuracy:.6f}",
                 f"macro_f1\t{self.macro_f1:.6f}"]
        for s in self.per_label:
            lines.append(f"precision/{s.name}\t{s.precision:.6f}")
            lines.append(f"recall/{s.name}\t{s.recall:.6f}")
            lines.append(f"f1/{s.name}\t{s.f1:.6f}")
            if s.degenerate:
                lines.append(f"degenerate/{s.name}\t1")
        for phase in sorted(self.wall_clock):
            lines.append(f"seconds/{phase}\t{self.wall_clock[phase]:.3f}")
        for i, v in enumerate(self.objective_trace):
            lines.append(f"trace/{i}\t{v:.10g}")
        return "\n".join(lines) + "\n"


def report_from_pairs(gold, pred, label_names) -> ExperimentReport:
    """Metrics from parallel gold/predicted label-index arrays."""
    gold = np.asarray(gold, dtype=np.int64)
    pred = np.asarray(pred, dtype=np.int64)
    if gold.size == 0:
        raise DataError("nothing to evaluate")
    acc = float((gold == pred).mean())
    per = []
    for k, name in enumerate(label_names):
        tp = int(((gold == k) & (pred == k)).sum())
        fp = int(((gold != k) & (pred == k)).sum())
        fn = int(((gold == k) & (pred != k)).sum())
        prec = tp / (tp + fp) if tp + fp else 0.0
        rec = tp / (tp + fn) if tp + fn else 0.0
        f1 = 2 * prec * rec / (prec + rec) if prec + rec else 0.0
        per.append(LabelScore(name, prec, rec, f1,
                              degenerate=(tp + fp + fn == 0)))
    macro = float(np.mean([s.f1 for s in per]))
    return ExperimentReport(acc, macro, per)


def evaluate(lam: ParamVector, test: Dataset) -> ExperimentReport:
    """Decode the test split and score it; token-level for sequences."""
    if test.unlabeled:
        raise DataError("evaluation needs labeled instances only")
    if not test.labeled:
        raise DataError("empty test set")
    labels = test.labels
    gold, pred = [], []
    for inst in test.labeled:
        if isinstance(inst, SequenceInstance):
            gold.extend(inst.labels)
            pred.extend(decode(lam, inst, labels))
        else:
            gold.append(inst.label)
            pred.append(decode(lam, inst, labels))
    return report_from_pairs(gold, pred, test.label_names)


# ---------------------------------------------------------------------------
# checkpoints


def save_checkpoint(path, lam: ParamVector, dataset: Dataset) -> None:
    """Self-contained JSON: weights plus the interning tables."""
    blob = {"kind": dataset.kind,
            "vocab": _id_to_name(dataset.vocab),
            "labels": list(dataset.label_names),
            "weights": [float(w) for w in lam.weights]}
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(blob, fh)
        fh.write("\n")


def load_checkpoint(path):
    """Returns (weights, dataset shell) re-keyed exactly as saved."""
    with open(path, encoding="utf-8") as fh:
        blob = json.load(fh)
    ds = Dataset(blob["kind"],
                 vocab={name: i for i, name in enumerate(blob["vocab"])},
                 label_names=list(blob["labels"]))
    lam = ParamVector(np.array(blob["weights"], dtype=float), ds.layout())
    return lam, ds
