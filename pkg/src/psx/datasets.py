"""Synthetic task generators and corpus pointerization.

Tasks:
  * rarest-word: fixed-length sequences of distinct word ranks drawn from a
    truncated geometric unigram distribution; the label is the single
    highest-rank (least frequent) word, pointed at when it falls outside
    the shortlist.
  * copy: the target reproduces the source; a chosen fraction of positions
    holds out-of-shortlist ids that must be copied by location.
  * pointerization of text corpora: UNK pointers (count threshold),
    entity pointers (per-document integer anonymization), and the MT
    supervision heuristic (shortlist -> verbatim -> dictionary ->
    deferred attention argmax).

File formats: datasets are JSON lines
{"source": [ids], "target": [ids], "z": [...], "ptr": [...]} with ptr -1
on z=1 steps and -2 for deferred pointers; vocabularies are one token per
line (line number = id); stats are a single JSON object.
"""

from __future__ import annotations

import json
from collections import Counter
from dataclasses import dataclass, field

import numpy as np

from .pointer_head import DEFERRED_PTR, NO_PTR, StepTarget

RESERVED = ("<unk>", "<s>", "</s>")
UNK, BOS, EOS = 0, 1, 2


@dataclass
class Vocabulary:
    tokens: list[str]
    shortlist_size: int
    unk_id: int = UNK
    bos_id: int = BOS
    eos_id: int = EOS
    token_to_id: dict[str, int] = field(init=False, repr=False)

    def __post_init__(self):
        self.token_to_id = {t: i for i, t in enumerate(self.tokens)}
        if len(self.token_to_id) != len(self.tokens):
            raise ValueError("vocabulary tokens must be unique")
        if not 0 < self.shortlist_size <= len(self.tokens):
            raise ValueError("shortlist_size out of range")
        ids = {self.unk_id, self.bos_id, self.eos_id}
        if len(ids) != 3 or max(ids) >= self.shortlist_size:
            raise ValueError("reserved ids must be distinct and inside the shortlist")

    def __len__(self):
        return len(self.tokens)

    def id_of(self, token):
        return self.token_to_id.get(token, self.unk_id)

    def token_of(self, idx):
        return self.tokens[idx]

    def in_shortlist(self, token):
        idx = self.token_to_id.get(token)
        return idx is not None and idx < self.shortlist_size

    def save(self, path):
        with open(path, "w", encoding="utf-8") as f:
            for tok in self.tokens:
                f.write(tok + "\n")

    @staticmethod
    def load(path, shortlist_size=None):
        with open(path, encoding="utf-8") as f:
            tokens = [line.rstrip("\n") for line in f]
        return Vocabulary(tokens, shortlist_size or len(tokens))


def word_vocabulary(vocab_size, shortlist_size):
    """Synthetic vocabularies: token w### at id = rank. The first three ids
    nominally carry the reserved roles."""
    width = len(str(vocab_size - 1))
    tokens = [f"w{i:0{width}d}" for i in range(vocab_size)]
    return Vocabulary(tokens, shortlist_size)


@dataclass(frozen=True)
class SyntheticConfig:
    vocab_size: int = 600
    seq_len: int = 7
    rare_cutoff: int = 60
    shortlist_size: int = 540
    geometric_ratio: float = 0.99
    seed: int = 0

    def __post_init__(self):
        if self.shortlist_size + self.rare_cutoff != self.vocab_size:
            raise ValueError("shortlist_size + rare_cutoff must equal vocab_size")
        if not 1 <= self.seq_len <= self.vocab_size:
            raise ValueError("seq_len must allow distinct sampling from the vocabulary")
        if not 0.0 < self.geometric_ratio < 1.0:
            raise ValueError("geometric_ratio must lie in (0, 1)")


@dataclass
class PointerExample:
    source: list[int]
    target: list[int]
    steps: list[StepTarget]

    def __post_init__(self):
        if len(self.steps) != len(self.target):
            raise ValueError("steps must align with target")
        for st in self.steps:
            st.validate_against(len(self.source))

    def to_json(self):
        return json.dumps(
            {
                "source": list(map(int, self.source)),
                "target": list(map(int, self.target)),
                "z": [st.z for st in self.steps],
                "ptr": [
                    DEFERRED_PTR if st.deferred
                    else (st.location if st.z == 0 else NO_PTR)
                    for st in self.steps
                ],
            },
            sort_keys=True,
        )

    @staticmethod
    def from_json(line):
        obj = json.loads(line)
        steps = []
        for z, ptr, word in zip(obj["z"], obj["ptr"], obj["target"]):
            if z == 1:
                steps.append(StepTarget(1, word=int(word)))
            elif ptr == DEFERRED_PTR:
                steps.append(StepTarget(0, deferred=True))
            else:
                steps.append(StepTarget(0, location=int(ptr)))
        return PointerExample(obj["source"], obj["target"], steps)


def write_jsonl(path, examples):
    n = 0
    with open(path, "w", encoding="utf-8") as f:
        for ex in examples:
            f.write(ex.to_json() + "\n")
            n += 1
    return n


def read_jsonl(path):
    out = []
    with open(path, encoding="utf-8") as f:
        for line in f:
            line = line.strip()
            if line:
                out.append(PointerExample.from_json(line))
    return out


# ---------------------------------------------------------------------------
# Rarest-word task
# ---------------------------------------------------------------------------


def geometric_first_draw_mass(cfg: SyntheticConfig):
    """Closed-form mass of each rank on the first draw: q^r / sum q^s."""
    q = cfg.geometric_ratio
    mass = q ** np.arange(cfg.vocab_size, dtype=np.float64)
    return mass / mass.sum()


def sample_rank_batch(rng, cfg: SyntheticConfig, n):
    """n rows of seq_len distinct ranks, ordered as drawn.

    Sequential renormalized sampling without replacement with weight
    q^rank is realized with the Gumbel-top-k trick: sort
    rank*log(q) + Gumbel noise descending and keep the first seq_len.
    """
    logw = np.arange(cfg.vocab_size, dtype=np.float64) * np.log(cfg.geometric_ratio)
    keys = logw + rng.gumbel(size=(n, cfg.vocab_size))
    part = np.argpartition(-keys, cfg.seq_len - 1, axis=1)[:, : cfg.seq_len]
    order = np.take_along_axis(keys, part, axis=1).argsort(axis=1)[:, ::-1]
    return np.take_along_axis(part, order, axis=1)


def rarest_example_from_ranks(ranks, cfg: SyntheticConfig):
    """Label = the (unique) maximal rank; pointer step iff it is rare."""
    ranks = [int(r) for r in ranks]
    target = max(ranks)
    loc = ranks.index(target)
    if target >= cfg.shortlist_size:
        step = StepTarget(0, location=loc)
    else:
        step = StepTarget(1, word=target)
    return PointerExample(ranks, [target], [step])


def gen_rarest_word(cfg: SyntheticConfig, count=None):
    """Deterministic stream of rarest-word examples for cfg.seed."""
    rng = np.random.default_rng(cfg.seed)
    produced = 0
    chunk = 1024
    while count is None or produced < count:
        n = chunk if count is None else min(chunk, count - produced)
        for row in sample_rank_batch(rng, cfg, n):
            yield rarest_example_from_ranks(row, cfg)
            produced += 1


# ---------------------------------------------------------------------------
# Copy task
# ---------------------------------------------------------------------------


def gen_copy_task(vocab_size, seq_len, copy_fraction, seed, shortlist_size, count=None):
    """Target reproduces the source; round(copy_fraction * seq_len)
    positions hold out-of-shortlist ids labeled (z=0, location=position),
    the rest are shortlist ids labeled z=1. Content ids avoid the three
    reserved slots. Arguments are validated eagerly."""
    if not 0.0 <= copy_fraction <= 1.0:
        raise ValueError("copy_fraction must lie in [0, 1]")
    if shortlist_size >= vocab_size and copy_fraction > 0:
        raise ValueError("no out-of-shortlist ids available to copy")
    if shortlist_size <= len(RESERVED):
        raise ValueError("shortlist too small for reserved ids")
    if seq_len < 1:
        raise ValueError("seq_len must be >= 1")

    def generate():
        rng = np.random.default_rng(seed)
        n_copy = int(round(copy_fraction * seq_len))
        produced = 0
        while count is None or produced < count:
            words = rng.integers(len(RESERVED), shortlist_size, size=seq_len)
            positions = rng.permutation(seq_len)[:n_copy]
            words[positions] = rng.integers(shortlist_size, vocab_size, size=n_copy)
            src = [int(w) for w in words]
            copy_at = set(int(p) for p in positions)
            steps = [
                StepTarget(0, location=t) if t in copy_at
                else StepTarget(1, word=src[t])
                for t in range(seq_len)
            ]
            yield PointerExample(src, list(src), steps)
            produced += 1

    return generate()


# ---------------------------------------------------------------------------
# Corpus pointerization
# ---------------------------------------------------------------------------


def _pointer_stats(n_pointers, n_examples, n_target_tokens, extra=None):
    stats = {
        "pointers": n_pointers,
        "examples": n_examples,
        "target_tokens": n_target_tokens,
        "pointers_per_100_examples": (
            100 * n_pointers / n_examples if n_examples else 0.0
        ),
        "pointers_per_100_target_tokens": (
            100 * n_pointers / n_target_tokens if n_target_tokens else 0.0
        ),
    }
    if extra:
        stats.update(extra)
    return stats


def _build_vocab(counts, keep):
    """Reserved tokens, then retained words by descending count then text.

    Literal reserved tokens in the corpus (e.g. re-pointerizing already
    UNKed text) resolve to their reserved ids rather than new slots.
    """
    words = sorted(keep - set(RESERVED), key=lambda w: (-counts[w], w))
    return Vocabulary(list(RESERVED) + words, len(RESERVED) + len(words))


def pointerize_unk(pairs, min_count):
    """UNK-pointer annotation of (source tokens, target tokens) pairs.

    Counts are tallied separately per side; a word is UNKed on a side iff
    its count on that side falls below min_count. Every UNKed target word
    that occurs in the original source yields (z=0, first occurrence) —
    also when that source position itself became UNK. Returns
    (examples, vocabulary, stats).
    """
    if min_count < 1:
        raise ValueError("min_count must be >= 1")
    pairs = [(list(s), list(t)) for s, t in pairs]
    skipped = sum(1 for s, t in pairs if not s or not t)
    pairs = [(s, t) for s, t in pairs if s and t]
    src_counts = Counter(w for s, _ in pairs for w in s)
    tgt_counts = Counter(w for _, t in pairs for w in t)
    src_keep = {w for w, c in src_counts.items() if c >= min_count}
    tgt_keep = {w for w, c in tgt_counts.items() if c >= min_count}
    vocab = _build_vocab(src_counts + tgt_counts, src_keep | tgt_keep)

    examples = []
    n_pointers = 0
    n_tokens = 0
    for src_words, tgt_words in pairs:
        source = [
            vocab.id_of(w) if w in src_keep else vocab.unk_id for w in src_words
        ]
        target = []
        steps = []
        for w in tgt_words:
            n_tokens += 1
            if w in tgt_keep:
                wid = vocab.id_of(w)
                target.append(wid)
                steps.append(StepTarget(1, word=wid))
            elif w in src_words:
                loc = src_words.index(w)
                target.append(source[loc])
                steps.append(StepTarget(0, location=loc))
                n_pointers += 1
            else:
                target.append(vocab.unk_id)
                steps.append(StepTarget(1, word=vocab.unk_id))
        examples.append(PointerExample(source, target, steps))

    src_total = sum(src_counts.values())
    coverage = (
        sum(c for w, c in src_counts.items() if w in src_keep) / src_total
        if src_total else 0.0
    )
    stats = _pointer_stats(
        n_pointers, len(examples), n_tokens,
        {
            "vocab_size": len(vocab),
            "source_coverage": coverage,
            "skipped_pairs": skipped,
            "min_count": min_count,
        },
    )
    return examples, vocab, stats


def entity_placeholder(entity_id):
    return f"<ent_{entity_id}>"


def anonymize_entities(tokens, tags, id_map):
    """Token-level anonymization: entity tokens become <ent_k>, where k is
    assigned left to right per document and repeated entities share it."""
    if len(tokens) != len(tags):
        raise ValueError("entity tags must align with tokens")
    out = []
    ids = []
    for tok, tag in zip(tokens, tags):
        if tag:
            if tok not in id_map:
                id_map[tok] = len(id_map) + 1
            out.append(entity_placeholder(id_map[tok]))
            ids.append(id_map[tok])
        else:
            out.append(tok)
            ids.append(0)
    return out, ids


def pointerize_entities(tagged_pairs):
    """Entity-pointer annotation.

    Each element is (source tokens, source tags, target tokens, target
    tags) with 0/1 tags. Entity ids start at 1 per document (source scanned
    first, then target), repeated entities share ids, and pointers are
    created only for exact anonymized-id matches, first occurrence winning.
    Placeholders share one embedding id across documents.
    """
    docs = []
    max_id = 0
    words = Counter()
    skipped = 0
    for src_toks, src_tags, tgt_toks, tgt_tags in tagged_pairs:
        if not src_toks or not tgt_toks:
            skipped += 1
            continue
        id_map: dict[str, int] = {}
        src_anon, src_ids = anonymize_entities(src_toks, src_tags, id_map)
        tgt_anon, tgt_ids = anonymize_entities(tgt_toks, tgt_tags, id_map)
        docs.append((src_anon, src_ids, tgt_anon, tgt_ids))
        max_id = max(max_id, max(id_map.values(), default=0))
        words.update(w for w, k in zip(src_anon, src_ids) if k == 0)
        words.update(w for w, k in zip(tgt_anon, tgt_ids) if k == 0)

    placeholders = [entity_placeholder(k) for k in range(1, max_id + 1)]
    plain = sorted(set(words) - set(RESERVED) - set(placeholders),
                   key=lambda w: (-words[w], w))
    vocab = Vocabulary(
        list(RESERVED) + placeholders + plain,
        len(RESERVED) + len(placeholders) + len(plain),
    )

    examples = []
    n_pointers = 0
    n_tokens = 0
    for src_anon, src_ids, tgt_anon, tgt_ids in docs:
        source = [vocab.id_of(w) for w in src_anon]
        target = []
        steps = []
        for tok, k in zip(tgt_anon, tgt_ids):
            n_tokens += 1
            wid = vocab.id_of(tok)
            target.append(wid)
            if k > 0 and k in src_ids:
                steps.append(StepTarget(0, location=src_ids.index(k)))
                n_pointers += 1
            else:
                steps.append(StepTarget(1, word=wid))
        examples.append(PointerExample(source, target, steps))

    stats = _pointer_stats(
        n_pointers, len(examples), n_tokens,
        {
            "vocab_size": len(vocab),
            "entity_ids": max_id,
            "skipped_pairs": skipped,
        },
    )
    return examples, vocab, stats


# ---------------------------------------------------------------------------
# MT supervision heuristic
# ---------------------------------------------------------------------------


def load_dictionary(path):
    """Tab-separated target-word, source-word pairs; one sense per line."""
    senses: dict[str, list[str]] = {}
    with open(path, encoding="utf-8") as f:
        for lineno, line in enumerate(f, 1):
            line = line.rstrip("\n")
            if not line:
                continue
            parts = line.split("\t")
            if len(parts) != 2:
                raise ValueError(f"{path}:{lineno}: expected 'target<TAB>source'")
            senses.setdefault(parts[0], []).append(parts[1])
    return senses


def mt_pointer_heuristic(target_word, source_tokens, shortlist: Vocabulary,
                         dictionary=None):
    """Supervision for one target word:

    (a) shortlist word -> (z=1, id); else
    (b) verbatim in the source -> (z=0, first occurrence); else
    (c) a dictionary sense is in the source -> (z=0, first occurrence of
        the first matching sense); else
    (d) deferred: the location is the model's attention argmax, resolved
        during training.
    """
    if not source_tokens:
        raise ValueError("empty source")
    if shortlist.in_shortlist(target_word):
        return StepTarget(1, word=shortlist.id_of(target_word))
    if target_word in source_tokens:
        return StepTarget(0, location=source_tokens.index(target_word))
    for sense in (dictionary or {}).get(target_word, []):
        if sense in source_tokens:
            return StepTarget(0, location=source_tokens.index(sense))
    return StepTarget(0, deferred=True)


def pointerize_mt(pairs, min_count, dictionary):
    """Apply the MT heuristic to a parallel corpus; shortlist built from
    per-side counts like pointerize_unk."""
    if min_count < 1:
        raise ValueError("min_count must be >= 1")
    pairs = [(list(s), list(t)) for s, t in pairs]
    skipped = sum(1 for s, t in pairs if not s or not t)
    pairs = [(s, t) for s, t in pairs if s and t]
    src_counts = Counter(w for s, _ in pairs for w in s)
    tgt_counts = Counter(w for _, t in pairs for w in t)
    src_keep = {w for w, c in src_counts.items() if c >= min_count}
    tgt_keep = {w for w, c in tgt_counts.items() if c >= min_count}
    vocab = _build_vocab(src_counts + tgt_counts, src_keep | tgt_keep)

    examples = []
    n_pointers = 0
    n_deferred = 0
    n_tokens = 0
    for src_words, tgt_words in pairs:
        source = [
            vocab.id_of(w) if w in src_keep else vocab.unk_id for w in src_words
        ]
        target = []
        steps = []
        for w in tgt_words:
            n_tokens += 1
            step = mt_pointer_heuristic(w, src_words, vocab, dictionary)
            steps.append(step)
            if step.z == 0:
                n_pointers += 1
                n_deferred += int(step.deferred)
                target.append(
                    vocab.unk_id if step.deferred else source[step.location]
                )
            else:
                target.append(step.word)
        examples.append(PointerExample(source, target, steps))

    stats = _pointer_stats(
        n_pointers, len(examples), n_tokens,
        {
            "vocab_size": len(vocab),
            "deferred_pointers": n_deferred,
            "skipped_pairs": skipped,
            "min_count": min_count,
        },
    )
    return examples, vocab, stats
