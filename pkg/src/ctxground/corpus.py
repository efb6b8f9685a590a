"""Tagged-caption corpus: loading, vocabulary, context extraction/removal.

Captions arrive pre-tagged (tokens with POS, dependency head/label, and
PP/VP phrase spans); no parsing happens here. The vocabulary maps surface
terms (synonyms and plurals) to canonical object classes.
"""

import json
from collections import defaultdict
from dataclasses import dataclass, field, replace

COARSE_POS = {"noun", "adj", "verb", "prep", "det", "other"}
PHRASE_KINDS = {"pp", "vp"}

# context-removal kinds
ADJ = "ADJ"
PP = "PP"
VP = "VP"


class CorpusError(ValueError):
    """Raised on malformed corpus, synonym, or category files."""


@dataclass(frozen=True)
class Token:
    text: str
    pos: str
    head: int
    deprel: str


@dataclass(frozen=True)
class TaggedCaption:
    caption_id: str
    image_id: str
    tokens: tuple
    phrases: tuple  # of (kind, (start, end))

    def __len__(self):
        return len(self.tokens)

    @property
    def texts(self):
        return [t.text for t in self.tokens]


@dataclass(frozen=True)
class VocabClass:
    name: str
    synonyms: frozenset
    is_base: bool


class Vocabulary:
    """Object-class vocabulary with synonym and plural expansion.

    ``term_index`` maps every surface term (possibly multi-word, space
    joined) to its canonical class name.
    """

    def __init__(self, classes, term_index):
        self.classes = list(classes)
        self.term_index = dict(term_index)
        self._by_name = {c.name: c for c in self.classes}
        # multi-word terms, pre-split for greedy matching
        self._multi = sorted(
            (tuple(t.split(" ")), c)
            for t, c in self.term_index.items()
            if " " in t
        )

    def __contains__(self, term):
        return term in self.term_index

    def __len__(self):
        return len(self.classes)

    def class_of(self, term):
        return self.term_index.get(term)

    def get_class(self, name):
        return self._by_name[name]

    def base_names(self):
        return [c.name for c in self.classes if c.is_base]

    def target_names(self):
        return [c.name for c in self.classes if not c.is_base]

    def terms_of(self, name):
        return sorted(t for t, c in self.term_index.items() if c == name)

    def match_spans(self, caption):
        """Greedy left-to-right vocabulary matches over caption tokens.

        Returns a list of (start, end, canonical_class). Multi-word terms
        are matched on adjacent tokens and take precedence over the
        single-token match at the same start position.
        """
        texts = caption.texts
        spans = []
        i = 0
        n = len(texts)
        while i < n:
            best = None
            for words, cls in self._multi:
                k = len(words)
                if i + k <= n and tuple(texts[i:i + k]) == words:
                    if best is None or k > best[0]:
                        best = (k, cls)
            if best is not None:
                spans.append((i, i + best[0], best[1]))
                i += best[0]
                continue
            cls = self.term_index.get(texts[i])
            if cls is not None:
                spans.append((i, i + 1, cls))
            i += 1
        return spans

    def term_token_indices(self, caption):
        """Set of token indices covered by any vocabulary term match."""
        covered = set()
        for start, end, _ in self.match_spans(caption):
            covered.update(range(start, end))
        return covered


def pluralize(term, irregular=None):
    """Rule-based English plural; last word only for multi-word terms."""
    if irregular and term in irregular:
        return irregular[term]
    head, sep, last = term.rpartition(" ")
    if irregular and last in irregular:
        return head + sep + irregular[last]
    if last.endswith(("s", "x", "z", "ch", "sh")):
        plural = last + "es"
    elif last.endswith("y") and len(last) > 1 and last[-2] not in "aeiou":
        plural = last[:-1] + "ies"
    else:
        plural = last + "s"
    return head + sep + plural


def _validate_caption(obj, line_no):
    cid = obj.get("caption_id")
    if not isinstance(cid, str) or not cid:
        raise CorpusError(f"line {line_no}: missing or empty caption_id")
    for key in ("image_id", "tokens"):
        if key not in obj:
            raise CorpusError(f"caption {cid} (line {line_no}): missing '{key}'")
    n = len(obj["tokens"])
    tokens = []
    for j, t in enumerate(obj["tokens"]):
        try:
            text = t["text"].lower()
            pos = t["pos"]
            head = int(t["head"])
            deprel = t["deprel"]
        except (KeyError, TypeError) as exc:
            raise CorpusError(
                f"caption {cid} (line {line_no}): bad token {j}: {exc}"
            ) from exc
        if not text or any(ch.isspace() for ch in text):
            raise CorpusError(
                f"caption {cid} (line {line_no}): token {j} text {text!r} "
                "is empty or contains whitespace"
            )
        if pos not in COARSE_POS:
            raise CorpusError(
                f"caption {cid} (line {line_no}): token {j} has unknown pos {pos!r}"
            )
        if not 0 <= head < n:
            raise CorpusError(
                f"caption {cid} (line {line_no}): token {j} head {head} "
                f"outside token range [0, {n})"
            )
        tokens.append(Token(text, pos, head, deprel))
    phrases = []
    for p in obj.get("phrases", []):
        kind = p.get("kind")
        if kind not in PHRASE_KINDS:
            raise CorpusError(
                f"caption {cid} (line {line_no}): unknown phrase kind {kind!r}"
            )
        start, end = p["span"]
        if not (0 <= start < end <= n):
            raise CorpusError(
                f"caption {cid} (line {line_no}): phrase span [{start}, {end}) "
                f"out of bounds for {n} tokens"
            )
        phrases.append((kind, (start, end)))
    return TaggedCaption(cid, obj["image_id"], tuple(tokens), tuple(phrases))


def load_corpus(path):
    """Load a JSON-lines corpus file, validating every line."""
    captions = []
    with open(path, encoding="utf-8") as fh:
        for line_no, line in enumerate(fh, start=1):
            line = line.strip()
            if not line:
                continue
            try:
                obj = json.loads(line)
            except json.JSONDecodeError as exc:
                raise CorpusError(f"line {line_no}: invalid JSON: {exc}") from exc
            captions.append(_validate_caption(obj, line_no))
    return captions


def caption_to_dict(caption):
    return {
        "caption_id": caption.caption_id,
        "image_id": caption.image_id,
        "tokens": [
            {"text": t.text, "pos": t.pos, "head": t.head, "deprel": t.deprel}
            for t in caption.tokens
        ],
        "phrases": [
            {"kind": kind, "span": [start, end]}
            for kind, (start, end) in caption.phrases
        ],
    }


def save_corpus(captions, path):
    with open(path, "w", encoding="utf-8") as fh:
        for cap in captions:
            fh.write(json.dumps(caption_to_dict(cap)) + "\n")


def build_vocabulary(synonym_file, base_names):
    """Build the vocabulary from a synonym file; see the README schema.

    ``synonym_file`` may be a path or an already-loaded list of entries.
    Every synonym and its plural map to the canonical class. A surface
    term claimed by two classes is an error.
    """
    if isinstance(synonym_file, list):
        entries = synonym_file
    else:
        with open(synonym_file, encoding="utf-8") as fh:
            entries = json.load(fh)
    classes = []
    term_index = {}
    for entry in entries:
        name = entry["name"].lower()
        irregular = {
            k.lower(): v.lower()
            for k, v in entry.get("irregular_plurals", {}).items()
        }
        synonyms = {s.lower() for s in entry.get("synonyms", [])}
        terms = {name} | synonyms
        terms |= {pluralize(t, irregular) for t in set(terms)}
        for term in terms:
            owner = term_index.get(term)
            if owner is not None and owner != name:
                raise CorpusError(
                    f"term {term!r} is claimed by both {owner!r} and {name!r}"
                )
            term_index[term] = name
        classes.append(VocabClass(name, frozenset(synonyms), name in base_names))
    return Vocabulary(classes, term_index)


def extract_adjectives(caption, vocab):
    """All amod edges whose head is a noun.

    Returns (adj_index, noun_index, canonical_class_or_None) triples. When
    the head noun sits inside a multi-word vocabulary match, the match's
    class is used. Tokens inside a vocabulary match are part of the noun
    itself and are never reported as adjectives.
    """
    span_of = {}
    for start, end, cls in vocab.match_spans(caption):
        for i in range(start, end):
            span_of[i] = cls
    out = []
    for j, tok in enumerate(caption.tokens):
        if tok.deprel != "amod" or j in span_of:
            continue
        head = caption.tokens[tok.head]
        if head.pos != "noun":
            continue
        out.append((j, tok.head, span_of.get(tok.head)))
    return out


def extract_phrases(caption):
    """Echo the caption's pre-annotated PP/VP spans."""
    return list(caption.phrases)


def _deletion_indices(caption, kind, vocab):
    protected = vocab.term_token_indices(caption)
    if kind == ADJ:
        return {
            j
            for j, tok in enumerate(caption.tokens)
            if tok.deprel == "amod" and tok.pos == "adj" and j not in protected
        }
    phrase_kind = kind.lower()
    doomed = set()
    for pk, (start, end) in caption.phrases:
        if pk != phrase_kind:
            continue
        span = set(range(start, end))
        if span & protected:
            continue  # phrase contains a vocabulary term: keep it
        doomed |= span
    return doomed


def remove_context(caption, kind, vocab):
    """Delete one context component (ADJ, PP, or VP) from a caption.

    Vocabulary terms are never deleted; a phrase or adjective overlapping
    a vocabulary match survives whole. Heads pointing into deleted tokens
    are re-pointed transitively to the deleted token's own head; a
    survivor whose whole head chain is deleted becomes a root.
    """
    if kind not in (ADJ, PP, VP):
        raise ValueError(f"unknown context kind {kind!r}")
    doomed = _deletion_indices(caption, kind, vocab)
    if not doomed:
        return caption
    keep = [i for i in range(len(caption.tokens)) if i not in doomed]
    new_index = {old: new for new, old in enumerate(keep)}

    def resolve_head(i):
        h = caption.tokens[i].head
        seen = set()
        while h in doomed and h not in seen:
            seen.add(h)
            h = caption.tokens[h].head
        return None if h in doomed else h

    tokens = []
    for old in keep:
        tok = caption.tokens[old]
        h = resolve_head(old)
        new_head = new_index[h] if h is not None else new_index[old]
        tokens.append(replace(tok, head=new_head))

    phrase_kind_removed = kind.lower()
    phrases = []
    for pk, (start, end) in caption.phrases:
        surviving = [new_index[i] for i in range(start, end) if i not in doomed]
        if not surviving:
            continue
        if pk == phrase_kind_removed and any(
            i in doomed for i in range(start, end)
        ):
            continue  # partially removed phrase of the removed kind: drop span
        phrases.append((pk, (surviving[0], surviving[-1] + 1)))
    return TaggedCaption(
        caption.caption_id, caption.image_id, tuple(tokens), tuple(phrases)
    )


@dataclass
class AdjNounStats:
    """(canonical noun, adjective) co-occurrence counts over a corpus."""

    counts: dict = field(default_factory=dict)

    @property
    def per_noun_adjs(self):
        out = defaultdict(list)
        for (noun, adj), c in self.counts.items():
            if c > 0:
                out[noun].append(adj)
        return {n: sorted(a) for n, a in out.items()}

    def all_adjectives(self):
        return sorted({adj for (_, adj), c in self.counts.items() if c > 0})

    def adjective_totals(self):
        totals = defaultdict(int)
        for (_, adj), c in self.counts.items():
            totals[adj] += c
        return dict(totals)


def compute_adj_noun_stats(corpus, vocab):
    """Count every (vocabulary noun, amod adjective) pair in the corpus."""
    counts = defaultdict(int)
    for caption in corpus:
        for adj_i, _, cls in extract_adjectives(caption, vocab):
            if cls is None:
                continue
            counts[(cls, caption.tokens[adj_i].text)] += 1
    return AdjNounStats(dict(counts))


def load_category_lists(path):
    with open(path, encoding="utf-8") as fh:
        lists = json.load(fh)
    missing = {"color", "age", "size", "quantity"} - set(lists)
    if missing:
        raise CorpusError(f"category file missing lists: {sorted(missing)}")
    return {k: [w.lower() for w in v] for k, v in lists.items()}


def filter_adjectives_by_category(stats, category, category_lists, min_count=10):
    """Adjectives of one category seen with vocabulary nouns > min_count times.

    ``property`` is the complement of the four explicit lists.
    """
    totals = stats.adjective_totals()
    if category == "property":
        listed = set().union(*category_lists.values()) if category_lists else set()
        pool = set(totals) - listed
    elif category in category_lists:
        pool = set(category_lists[category])
    else:
        raise CorpusError(f"unknown adjective category {category!r}")
    return {adj for adj in pool if totals.get(adj, 0) > min_count}
