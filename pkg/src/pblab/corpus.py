"""Synthetic multilingual corpora with known-informative tokens, plus JSONL ingestion.

Synthetic languages use fully disjoint surface vocabularies. Each language
owns a set of filler tokens (uninformative) and, per class, a set of signal
tokens (informative for that class in that language). Generated corpora
therefore come with exact ground truth about which tokens carry label
information, which downstream attribution analyses can be checked against.
"""

import json
from dataclasses import dataclass

from .seeds import derive_rng

TOKEN_CATEGORIES = ("signal_pos", "signal_other", "filler", "foreign")


@dataclass(frozen=True)
class Vocab:
    """Token inventory plus language/label dictionaries.

    ``token_strings`` holds the real surface tokens; the mask token is the
    single reserved id ``len(token_strings)`` and has no surface string.
    ``filler_sets``/``signal_sets`` record ground-truth token roles for
    synthetic corpora and are None for ingested data.
    """

    token_strings: tuple
    lang_names: tuple
    label_names: tuple
    filler_sets: tuple | None = None      # per language: frozenset of token ids
    signal_sets: tuple | None = None      # [language][class]: frozenset of token ids

    @property
    def size(self) -> int:
        return len(self.token_strings)

    @property
    def mask_id(self) -> int:
        return len(self.token_strings)

    @property
    def n_languages(self) -> int:
        return len(self.lang_names)

    @property
    def n_classes(self) -> int:
        return len(self.label_names)

    @property
    def has_ground_truth(self) -> bool:
        return self.filler_sets is not None and self.signal_sets is not None

    def validate(self) -> None:
        if len(set(self.token_strings)) != len(self.token_strings):
            raise ValueError("token strings must be distinct")
        if not self.has_ground_truth:
            return
        seen = set()
        groups = list(self.filler_sets) + [s for per_lang in self.signal_sets for s in per_lang]
        for group in groups:
            if self.mask_id in group:
                raise ValueError("mask id must not appear in any filler/signal set")
            if any(t >= self.size or t < 0 for t in group):
                raise ValueError("token id outside vocabulary")
            if seen & group:
                raise ValueError("filler/signal sets must be pairwise disjoint")
            seen |= group

    def to_dict(self) -> dict:
        d = {
            "tokens": list(self.token_strings),
            "mask_id": self.mask_id,
            "languages": list(self.lang_names),
            "labels": list(self.label_names),
        }
        if self.has_ground_truth:
            d["filler_sets"] = [sorted(s) for s in self.filler_sets]
            d["signal_sets"] = [[sorted(s) for s in per_lang] for per_lang in self.signal_sets]
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "Vocab":
        filler = signal = None
        if "filler_sets" in d and "signal_sets" in d:
            filler = tuple(frozenset(s) for s in d["filler_sets"])
            signal = tuple(tuple(frozenset(s) for s in per_lang) for per_lang in d["signal_sets"])
        vocab = cls(
            token_strings=tuple(d["tokens"]),
            lang_names=tuple(d["languages"]),
            label_names=tuple(str(x) for x in d["labels"]),
            filler_sets=filler,
            signal_sets=signal,
        )
        if d.get("mask_id", vocab.mask_id) != vocab.mask_id:
            raise ValueError("mask_id in file does not match token count")
        vocab.validate()
        return vocab

    def content_hash(self) -> str:
        import hashlib

        blob = json.dumps(self.to_dict(), sort_keys=True).encode("utf-8")
        return hashlib.sha256(blob).hexdigest()


@dataclass(frozen=True)
class Example:
    """One datapoint: a token-id sequence with language, label and stable id."""

    id: str
    language: int
    label: int
    tokens: tuple

    def validate(self, vocab: Vocab) -> None:
        if len(self.tokens) < 1:
            raise ValueError(f"example {self.id}: empty token sequence")
        if any(t == vocab.mask_id for t in self.tokens):
            raise ValueError(f"example {self.id}: contains the mask token")
        if any(t < 0 or t >= vocab.size for t in self.tokens):
            raise ValueError(f"example {self.id}: token id outside vocabulary")


@dataclass(frozen=True)
class CorpusSpec:
    """Parameters of the synthetic corpus generator.

    Per token position: with probability ``p_signal`` draw from the signal
    set of the example's (language, label); with probability ``p_noise``
    draw from a signal set of the same language but a different label
    (chosen uniformly); otherwise draw from the language's filler set.
    """

    n_languages: int
    n_classes: int
    n_min: int
    n_max: int
    p_signal: float
    p_noise: float = 0.0
    fillers_per_language: int = 20
    signals_per_language_class: int = 5
    seed: int = 0

    def validate(self) -> None:
        if self.n_languages < 2 or self.n_classes < 2:
            raise ValueError("need at least 2 languages and 2 classes")
        if not (1 <= self.n_min <= self.n_max):
            raise ValueError("need 1 <= n_min <= n_max")
        if not (0.0 < self.p_signal <= 1.0):
            raise ValueError("p_signal must be in (0, 1]")
        if not (0.0 <= self.p_noise < 1.0):
            raise ValueError("p_noise must be in [0, 1)")
        # Degenerate p_signal + p_noise == 1 is allowed (no filler draws).
        if self.p_signal + self.p_noise > 1.0:
            raise ValueError("p_signal + p_noise must not exceed 1")
        if self.signals_per_language_class < 1:
            raise ValueError("signal sets would be empty")
        if self.p_signal + self.p_noise < 1.0 and self.fillers_per_language < 1:
            raise ValueError("filler sets would be empty but filler draws are possible")


def build_vocab(spec: CorpusSpec) -> Vocab:
    """Vocabulary with disjoint per-language filler and per-(language,class) signal sets."""
    tokens = []
    filler_sets = []
    signal_sets = []
    for lang in range(spec.n_languages):
        start = len(tokens)
        tokens.extend(f"l{lang}_fill_{i}" for i in range(spec.fillers_per_language))
        filler_sets.append(frozenset(range(start, len(tokens))))
        per_class = []
        for c in range(spec.n_classes):
            start = len(tokens)
            tokens.extend(f"l{lang}_c{c}_sig_{i}" for i in range(spec.signals_per_language_class))
            per_class.append(frozenset(range(start, len(tokens))))
        signal_sets.append(tuple(per_class))
    vocab = Vocab(
        token_strings=tuple(tokens),
        lang_names=tuple(f"L{i}" for i in range(spec.n_languages)),
        label_names=tuple(str(c) for c in range(spec.n_classes)),
        filler_sets=tuple(filler_sets),
        signal_sets=tuple(signal_sets),
    )
    vocab.validate()
    return vocab


def generate_corpus(spec: CorpusSpec, n_examples_per_cell: int):
    """Generate exactly ``n_examples_per_cell`` examples for every (language, label) cell.

    Deterministic given ``spec.seed``; each cell draws from its own derived
    stream, so changing one cell's size never perturbs the others.

    Returns (vocab, examples).
    """
    spec.validate()
    if n_examples_per_cell < 1:
        raise ValueError("n_examples_per_cell must be >= 1")
    vocab = build_vocab(spec)
    examples = []
    for lang in range(spec.n_languages):
        fillers = sorted(vocab.filler_sets[lang])
        signals = [sorted(s) for s in vocab.signal_sets[lang]]
        for label in range(spec.n_classes):
            rng = derive_rng(spec.seed, "corpus", "cell", lang, label)
            other_labels = [c for c in range(spec.n_classes) if c != label]
            for i in range(n_examples_per_cell):
                length = int(rng.integers(spec.n_min, spec.n_max + 1))
                toks = []
                for _ in range(length):
                    u = rng.random()
                    if u < spec.p_signal:
                        toks.append(signals[label][rng.integers(len(signals[label]))])
                    elif u < spec.p_signal + spec.p_noise:
                        c = other_labels[rng.integers(len(other_labels))]
                        toks.append(signals[c][rng.integers(len(signals[c]))])
                    else:
                        toks.append(fillers[rng.integers(len(fillers))])
                examples.append(
                    Example(id=f"{lang}:{label}:{i}", language=lang, label=label, tokens=tuple(int(t) for t in toks))
                )
    return vocab, examples


def ground_truth_category(vocab: Vocab, token: int, language: int, label: int) -> str:
    """Classify a token id relative to (language, label) by set membership.

    ``signal_pos``: signal for this (language, label); ``signal_other``:
    signal for another label of the same language; ``filler``: filler of
    this language; ``foreign``: not part of this language's vocabulary.
    """
    if not vocab.has_ground_truth:
        raise ValueError("vocabulary carries no ground-truth token sets")
    if not (0 <= token < vocab.size):
        raise ValueError(f"token id {token} outside vocabulary")
    if token in vocab.signal_sets[language][label]:
        return "signal_pos"
    for c in range(vocab.n_classes):
        if c != label and token in vocab.signal_sets[language][c]:
            return "signal_other"
    if token in vocab.filler_sets[language]:
        return "filler"
    return "foreign"


def save_vocab(vocab: Vocab, path) -> None:
    with open(path, "w", encoding="utf-8") as f:
        json.dump(vocab.to_dict(), f, indent=2, sort_keys=True)
        f.write("\n")


def load_vocab(path) -> Vocab:
    with open(path, encoding="utf-8") as f:
        return Vocab.from_dict(json.load(f))


def save_jsonl(examples, vocab: Vocab, path) -> None:
    """Write examples as one JSON record per line, in surface form."""
    with open(path, "w", encoding="utf-8") as f:
        for ex in examples:
            rec = {
                "id": ex.id,
                "lang": vocab.lang_names[ex.language],
                "label": vocab.label_names[ex.label],
                "tokens": [vocab.token_strings[t] for t in ex.tokens],
            }
            f.write(json.dumps(rec) + "\n")


def load_jsonl(path, vocab: Vocab | None = None):
    """Load a JSONL dataset.

    Records: {"id": str, "lang": str, "label": str-or-int, "tokens": [str]}
    or "text" (whitespace-tokenized) instead of "tokens". Unknown fields are
    ignored. With ``vocab`` given (e.g. from a sidecar file), tokens and
    language/label names are mapped through it and unseen values are errors;
    otherwise a fresh vocabulary is built, with tokens, languages and labels
    mapped to dense ids in first-seen order and a fresh mask id appended.

    Returns (vocab, examples).
    """
    fresh = vocab is None
    if fresh:
        token_ids: dict = {}
        lang_ids: dict = {}
        label_ids: dict = {}
    else:
        token_ids = {s: i for i, s in enumerate(vocab.token_strings)}
        lang_ids = {s: i for i, s in enumerate(vocab.lang_names)}
        label_ids = {s: i for i, s in enumerate(vocab.label_names)}

    examples = []
    seen_ids = set()
    with open(path, encoding="utf-8") as f:
        for lineno, line in enumerate(f, start=1):
            line = line.strip()
            if not line:
                continue
            try:
                rec = json.loads(line)
            except json.JSONDecodeError as e:
                raise ValueError(f"{path}: line {lineno}: invalid JSON ({e.msg})") from None
            if not isinstance(rec, dict):
                raise ValueError(f"{path}: line {lineno}: record is not an object")
            for field in ("id", "lang", "label"):
                if field not in rec:
                    raise ValueError(f"{path}: line {lineno}: missing field {field!r}")
            if "tokens" in rec:
                tokens = rec["tokens"]
                if not isinstance(tokens, list) or not all(isinstance(t, str) for t in tokens):
                    raise ValueError(f"{path}: line {lineno}: 'tokens' must be a list of strings")
            elif "text" in rec:
                tokens = str(rec["text"]).split()
            else:
                raise ValueError(f"{path}: line {lineno}: need 'tokens' or 'text'")
            if not tokens:
                raise ValueError(f"{path}: line {lineno}: empty token sequence")

            ex_id = str(rec["id"])
            if ex_id in seen_ids:
                raise ValueError(f"{path}: line {lineno}: duplicate id {ex_id!r}")
            seen_ids.add(ex_id)

            lang_key = str(rec["lang"])
            label_key = str(rec["label"])
            if fresh:
                lang = lang_ids.setdefault(lang_key, len(lang_ids))
                label = label_ids.setdefault(label_key, len(label_ids))
                tok_ids = [token_ids.setdefault(t, len(token_ids)) for t in tokens]
            else:
                try:
                    lang = lang_ids[lang_key]
                except KeyError:
                    raise ValueError(f"{path}: line {lineno}: unknown language {lang_key!r}") from None
                try:
                    label = label_ids[label_key]
                except KeyError:
                    raise ValueError(f"{path}: line {lineno}: unknown label {label_key!r}") from None
                try:
                    tok_ids = [token_ids[t] for t in tokens]
                except KeyError as e:
                    raise ValueError(f"{path}: line {lineno}: unknown token {e.args[0]!r}") from None
            examples.append(Example(id=ex_id, language=lang, label=label, tokens=tuple(tok_ids)))

    if fresh:
        vocab = Vocab(
            token_strings=tuple(token_ids),
            lang_names=tuple(lang_ids),
            label_names=tuple(label_ids),
        )
    for ex in examples:
        ex.validate(vocab)
    return vocab, examples
