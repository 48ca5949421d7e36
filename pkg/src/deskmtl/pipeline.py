"""Text cleaning, tokenization, dataset containers and synthetic task suites.

External datasets are JSONL, one file per task, one record per line::

    {"text": "...", "label": 1}
    {"text": "...", "label": [0, 1, 1]}            # multi-label
    {"text": "...", "label": 0.37}                 # regression
    {"text": "...", "token_labels": [0, 0, 1]}     # token-level

The task manifest is JSONL too, one task per line with keys
``task_id, family, task_type, n_classes, path``.
"""

from __future__ import annotations

import json
import logging
import re
import zlib
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .encoder import CLS_ID, PAD_ID
from .tasks import FAMILIES, TaskKind, TaskSpec, TaskType

log = logging.getLogger(__name__)

MIN_CHARS = 20
_URL = re.compile(r"(?:\b[a-zA-Z][a-zA-Z0-9+.\-]*://\S*|\bwww\.\S*)")
_PUNCT = set(" .,;:!?'\"()-")
_WS = re.compile(r"\s+")
_WORD = re.compile(r"\w+")


# ---------------------------------------------------------------------------
# cleaning


def _clean_once(s: str) -> str:
    s = _URL.sub(" ", s)
    s = "".join(ch if (ch.isalnum() or ch in _PUNCT) else (" " if ch.isspace() else "")
                for ch in s)
    return _WS.sub(" ", s).strip()


def clean_text(raw: str) -> str | None:
    """Strip URLs and non-whitelisted characters, collapse whitespace.

    Returns None when fewer than 20 characters survive. The rules are
    re-applied until nothing changes, so the function is idempotent.
    """
    s = raw
    while True:
        nxt = _clean_once(s)
        if nxt == s:
            break
        s = nxt
    return s if len(s) >= MIN_CHARS else None


def dedup(texts: Iterable[str]) -> list[str]:
    """Exact-match dedup keeping first occurrences in order."""
    seen: set[str] = set()
    out = []
    for t in texts:
        if t not in seen:
            seen.add(t)
            out.append(t)
    return out


def clean_corpus(records: Iterable[dict]) -> tuple[list[dict], dict]:
    """Clean every record's text, drop short ones, then drop duplicates."""
    stats = {"input": 0, "too_short": 0, "duplicates": 0, "kept": 0}
    seen: set[str] = set()
    out = []
    for rec in records:
        stats["input"] += 1
        text = clean_text(rec.get("text", ""))
        if text is None:
            stats["too_short"] += 1
            continue
        if text in seen:
            stats["duplicates"] += 1
            continue
        seen.add(text)
        out.append({**rec, "text": text})
    stats["kept"] = len(out)
    return out, stats


# ---------------------------------------------------------------------------
# tokenization


def words(text: str) -> list[str]:
    return _WORD.findall(text.lower())


def word_id(word: str, vocab_size: int) -> int:
    return 2 + zlib.crc32(word.encode("utf-8")) % (vocab_size - 2)


def tokenize(text: str, vocab_size: int) -> list[int]:
    """CLS followed by one hashed id per lowercase word."""
    return [CLS_ID] + [word_id(w, vocab_size) for w in words(text)]


# ---------------------------------------------------------------------------
# datasets


@dataclass
class Example:
    text: str
    label: object
    task_id: str = ""


@dataclass
class TaskDataset:
    """Tokenized, padded arrays for one task."""

    task_id: str
    task_type: TaskType
    tokens: np.ndarray            # n x s, CLS at column 0, PAD=0
    lengths: np.ndarray           # n
    labels: np.ndarray            # n | n x c | n x s (token level)
    label_mask: np.ndarray | None = None   # n x s for token level

    def __len__(self) -> int:
        return int(self.tokens.shape[0])

    def batch(self, idx: np.ndarray):
        idx = np.asarray(idx)
        s = int(self.lengths[idx].max())
        tokens = self.tokens[idx, :s]
        labels = self.labels[idx]
        mask = None
        if self.task_type.kind is TaskKind.TOKEN:
            labels = labels[:, :s]
            mask = self.label_mask[idx, :s]
        return tokens, labels, mask

    @classmethod
    def from_examples(cls, task_id: str, task_type: TaskType, examples: Sequence[Example],
                      vocab_size: int, max_seq_len: int) -> "TaskDataset":
        n = len(examples)
        seqs = [tokenize(ex.text, vocab_size)[:max_seq_len] for ex in examples]
        width = max(len(s) for s in seqs)
        tokens = np.full((n, width), PAD_ID, dtype=np.int64)
        lengths = np.array([len(s) for s in seqs], dtype=np.int64)
        for i, s in enumerate(seqs):
            tokens[i, :len(s)] = s
        kind = task_type.kind
        mask = None
        if kind is TaskKind.TOKEN:
            labels = np.zeros((n, width), dtype=np.int64)
            mask = np.zeros((n, width), dtype=bool)
            for i, ex in enumerate(examples):
                lab = list(ex.label)
                if len(lab) != len(words(ex.text)):
                    raise ValueError(f"task {task_id!r} example {i}: {len(lab)} token labels "
                                     f"for {len(words(ex.text))} words")
                lab = lab[: width - 1]
                labels[i, 1:1 + len(lab)] = lab
                mask[i, 1:1 + len(lab)] = True
        elif kind is TaskKind.MULTILABEL:
            labels = np.array([list(ex.label) for ex in examples], dtype=np.int64)
        elif kind is TaskKind.REGRESSION:
            labels = np.array([float(ex.label) for ex in examples])
        else:
            labels = np.array([int(ex.label) for ex in examples], dtype=np.int64)
        return cls(task_id, task_type, tokens, lengths, labels, mask)


def read_jsonl(path) -> list[dict]:
    with open(path, encoding="utf-8") as fh:
        return [json.loads(line) for line in fh if line.strip()]


def write_jsonl(path, records: Iterable[dict]) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", encoding="utf-8") as fh:
        for r in records:
            fh.write(json.dumps(r) + "\n")


def load_examples(path, task_id: str, task_type: TaskType) -> list[Example]:
    out = []
    for rec in read_jsonl(path):
        label = rec["token_labels"] if task_type.kind is TaskKind.TOKEN else rec["label"]
        out.append(Example(rec["text"], label, task_id))
    return out


def examples_to_records(examples: Sequence[Example], task_type: TaskType) -> list[dict]:
    if task_type.kind is TaskKind.TOKEN:
        return [{"text": e.text, "token_labels": list(e.label)} for e in examples]
    return [{"text": e.text, "label": e.label} for e in examples]


# ---------------------------------------------------------------------------
# manifests


def read_task_manifest(path) -> list[TaskSpec]:
    base = Path(path).parent
    specs = []
    for rec in read_jsonl(path):
        tt = TaskType(TaskKind(rec["task_type"]), rec.get("n_classes"))
        ref = rec.get("path")
        if ref is not None and not Path(ref).is_absolute():
            ref = str(base / ref)
        specs.append(TaskSpec(rec["task_id"], rec["family"], tt, ref))
    ids = [s.task_id for s in specs]
    if len(set(ids)) != len(ids):
        raise ValueError("duplicate task_id in manifest")
    return specs


def write_task_manifest(path, specs: Sequence[TaskSpec]) -> None:
    base = Path(path).parent
    recs = []
    for s in specs:
        ref = s.dataset_ref
        if isinstance(ref, (str, Path)):
            try:
                ref = str(Path(ref).relative_to(base))
            except ValueError:
                ref = str(ref)
        else:
            ref = None
        recs.append({"task_id": s.task_id, "family": s.family, "task_type": s.task_type.kind.value,
                     "n_classes": s.task_type.n_classes, "path": ref})
    write_jsonl(path, recs)


@dataclass
class FamilyManifest:
    families: dict[str, list[str]] = field(default_factory=lambda: {f: [] for f in FAMILIES})

    def add(self, family: str, task_id: str) -> None:
        for fam, ids in self.families.items():
            if task_id in ids:
                raise ValueError(f"task {task_id!r} already belongs to {fam!r}")
        self.families.setdefault(family, []).append(task_id)

    @classmethod
    def from_specs(cls, specs: Iterable[TaskSpec]) -> "FamilyManifest":
        fm = cls()
        for s in specs:
            fm.add(s.family, s.task_id)
        return fm

    def family_of(self, task_id: str) -> str:
        for fam, ids in self.families.items():
            if task_id in ids:
                return fam
        raise KeyError(task_id)

    def transfer_families(self) -> dict[str, list[str]]:
        """Families with at least two tasks (usable for transfer runs)."""
        return {f: ids for f, ids in self.families.items() if len(ids) >= 2}

    def save(self, path) -> None:
        Path(path).write_text(json.dumps(self.families, indent=2))

    @classmethod
    def load(cls, path) -> "FamilyManifest":
        return cls(json.loads(Path(path).read_text()))


# ---------------------------------------------------------------------------
# synthetic task suites


@dataclass(frozen=True)
class SynthFamilyConfig:
    vocab: int = 1024
    lexicon_size: int = 32
    overlap: float = 0.5
    label_noise: float = 0.1
    examples_per_task: int = 2000
    seq_len: tuple[int, int] = (12, 24)
    hit_threshold: int = 3
    task_types: tuple[str, ...] = ("binary", "multiclass", "token", "regression")
    task_sizes: tuple[int, ...] | None = None

    def __post_init__(self):
        if not 0.0 <= self.overlap <= 1.0 or not 0.0 <= self.label_noise <= 1.0:
            raise ValueError("overlap and label_noise must lie in [0, 1]")
        lo, hi = self.seq_len
        if lo < 1 or hi < lo:
            raise ValueError("bad seq_len range")
        if 3 * self.hit_threshold > lo:
            raise ValueError("seq_len lower bound must be >= 3 * hit_threshold")


@dataclass
class SynthSuite:
    specs: list[TaskSpec]
    examples: dict[str, list[Example]]
    lexicons: dict[str, list[str]]

    def datasets(self, vocab_size: int, max_seq_len: int) -> dict[str, TaskDataset]:
        return {s.task_id: TaskDataset.from_examples(s.task_id, s.task_type, self.examples[s.task_id],
                                                     vocab_size, max_seq_len)
                for s in self.specs}

    def save(self, out_dir) -> Path:
        out_dir = Path(out_dir)
        specs = []
        for s in self.specs:
            path = out_dir / "data" / f"{s.task_id}.jsonl"
            write_jsonl(path, examples_to_records(self.examples[s.task_id], s.task_type))
            specs.append(TaskSpec(s.task_id, s.family, s.task_type, str(path)))
        write_task_manifest(out_dir / "tasks.jsonl", specs)
        FamilyManifest.from_specs(specs).save(out_dir / "families.json")
        (out_dir / "lexicons.json").write_text(json.dumps(self.lexicons, indent=1))
        return out_dir / "tasks.jsonl"


def word_pool(vocab_size: int, n: int) -> list[str]:
    """``n`` synthetic words whose hashed token ids are pairwise distinct."""
    if n > vocab_size - 2:
        raise ValueError(f"cannot draw {n} distinct words from vocab {vocab_size}")
    used: set[int] = set()
    out, i = [], 0
    while len(out) < n:
        w = f"w{i:05d}"
        tid = word_id(w, vocab_size)
        if tid not in used:
            used.add(tid)
            out.append(w)
        i += 1
    return out


def _type_for(name: str) -> TaskType:
    return {"binary": TaskType.binary(), "multiclass": TaskType.multiclass(3),
            "token": TaskType.token(2), "regression": TaskType.regression()}[name]


def family_name(f: int) -> str:
    return FAMILIES[f] if f < len(FAMILIES) else f"family_{f}"


def generate_synthetic(cfg: SynthFamilyConfig, families: int, tasks_per_family: int, seed: int,
                       related: Sequence[int] | None = None,
                       types: Sequence[str] | None = None) -> SynthSuite:
    """Build a suite of lexicon-driven tasks grouped into families.

    Family 0 is the anchor. Every family in ``related`` (default: all)
    reuses the first ``round(overlap * lexicon_size)`` anchor words, so
    related families overlap pairwise by that fraction; the rest of each
    lexicon is fresh. Texts mix lexicon words with background words.
    """
    rng = np.random.default_rng(seed)
    L = cfg.lexicon_size
    related = set(range(families) if related is None else related) | {0}
    shared = int(round(cfg.overlap * L))
    need = L + sum(L - (shared if f in related else 0) for f in range(1, families))
    pool_size = min(cfg.vocab - 2, max(need * 3, need + 64))
    if need >= pool_size:
        raise ValueError(f"lexicons need {need} words but vocab {cfg.vocab} is too small")
    pool = word_pool(cfg.vocab, pool_size)
    order = list(rng.permutation(pool))
    anchor = [order.pop() for _ in range(L)]
    lexicons: dict[str, list[str]] = {family_name(0): anchor}
    for f in range(1, families):
        k = shared if f in related else 0
        lexicons[family_name(f)] = anchor[:k] + [order.pop() for _ in range(L - k)]
    lex_words = {w for lex in lexicons.values() for w in lex}
    background = [w for w in pool if w not in lex_words]

    type_cycle = list(types) if types is not None else list(cfg.task_types)
    specs, data = [], {}
    t_global = 0
    for f in range(families):
        fam = family_name(f)
        lex = lexicons[fam]
        for j in range(tasks_per_family):
            kind_name = type_cycle[(f + j) % len(type_cycle)] if types is None else type_cycle[j % len(type_cycle)]
            tt = _type_for(kind_name)
            tid = f"f{f}_t{j}_{kind_name}"
            n = cfg.examples_per_task
            if cfg.task_sizes:
                n = cfg.task_sizes[t_global % len(cfg.task_sizes)]
            task_rng = np.random.default_rng([seed, f, j])
            data[tid] = [_synth_example(cfg, tt, lex, background, task_rng, tid, cfg.hit_threshold + j % 2)
                         for _ in range(n)]
            specs.append(TaskSpec(tid, fam, tt))
            t_global += 1
    return SynthSuite(specs, data, lexicons)


def _synth_example(cfg: SynthFamilyConfig, tt: TaskType, lex, background, rng, tid: str,
                   threshold: int) -> Example:
    lo, hi = cfg.seq_len
    s = int(rng.integers(lo, hi + 1))
    kind = tt.kind
    if kind is TaskKind.MULTICLASS:
        hits = int(rng.integers(0, 3 * threshold))
    elif kind is TaskKind.REGRESSION or kind is TaskKind.TOKEN:
        hits = int(rng.integers(0, s // 2 + 1))
    else:
        hits = int(rng.integers(0, 2 * threshold))
    hits = min(hits, s)
    slots = rng.permutation(s)[:hits]
    is_lex = np.zeros(s, dtype=bool)
    is_lex[slots] = True
    toks = [lex[rng.integers(len(lex))] if is_lex[i] else background[rng.integers(len(background))]
            for i in range(s)]
    noise = cfg.label_noise
    if kind is TaskKind.BINARY:
        label = int(hits >= threshold)
        if rng.random() < noise:
            label = 1 - label
    elif kind is TaskKind.MULTICLASS:
        label = min(hits // threshold, 2)
        if rng.random() < noise:
            label = int((label + rng.integers(1, 3)) % 3)
    elif kind is TaskKind.TOKEN:
        flips = rng.random(s) < noise
        label = [int(v) for v in np.where(flips, ~is_lex, is_lex)]
    else:
        label = hits / s
        if rng.random() < noise:
            label = float(rng.random())
        label = float(label)
    return Example(" ".join(toks), label, tid)


def generate_selection_suite(cfg: SynthFamilyConfig, n_sharing: int, n_disjoint: int,
                             seed: int, span: int = 1) -> tuple[TaskSpec, SynthSuite]:
    """A primary task plus candidates with known relevance.

    The primary lexicon is split into ``n_sharing`` equal chunks; sharing
    candidate ``i`` is driven by chunks ``i .. i+span-1`` (cyclically),
    disjoint candidates by fresh word sets of the same size. Every task is
    binary.
    """
    if not 1 <= span <= n_sharing:
        raise ValueError("span must lie in [1, n_sharing]")
    rng = np.random.default_rng(seed)
    chunk = cfg.lexicon_size // n_sharing
    if chunk < 1:
        raise ValueError("lexicon_size must be at least n_sharing")
    n_words = chunk * (n_sharing + n_disjoint * span)
    pool = word_pool(cfg.vocab, min(cfg.vocab - 2, max(3 * n_words, n_words + 64)))
    order = list(rng.permutation(pool))
    chunks = [[order.pop() for _ in range(chunk)] for _ in range(n_sharing)]
    chunks += [[order.pop() for _ in range(chunk * span)] for _ in range(n_disjoint)]
    used = {w for c in chunks for w in c}
    background = [w for w in pool if w not in used]
    tt = TaskType.binary()
    lexicons = {"primary": [w for c in chunks[:n_sharing] for w in c]}
    entries = [("primary", lexicons["primary"])]
    for i, c in enumerate(chunks):
        if i < n_sharing:
            name = f"share{i}"
            c = [w for j in range(span) for w in chunks[(i + j) % n_sharing]]
        else:
            name = f"disjoint{i - n_sharing}"
        lexicons[name] = c
        entries.append((name, c))
    specs, data = [], {}
    for g, (name, lex) in enumerate(entries):
        task_rng = np.random.default_rng([seed, 97, g])
        data[name] = [_synth_example(cfg, tt, lex, background, task_rng, name, cfg.hit_threshold)
                      for _ in range(cfg.examples_per_task)]
        specs.append(TaskSpec(name, family_name(0) if g <= n_sharing else family_name(1 + g), tt))
    return specs[0], SynthSuite(specs, data, lexicons)
