"""Rule-based contextual referral decomposition of free-form queries.

A query is split into the referral subject phrase, the action verbs that
subject performs, and the remaining background tokens. From those we build
short local queries (referral phrase + one action + its object span) and the
list of global referral word positions inside the original query.

The grammar is a shallow finite-state chunker over a four-tag scheme
(NOUN, ADJ, VERB, OTHER) produced by a lexicon/suffix tagger.
"""
from __future__ import annotations

import logging
import re
from dataclasses import dataclass
from functools import lru_cache
from importlib import resources
from typing import Callable, Dict, Iterable, List, Optional, Sequence, Tuple

from .core import ContractError, QueryEmbedding

logger = logging.getLogger(__name__)

DETERMINERS = frozenset(
    "the a an this that these those his her their its my your our both each every another some "
    "one two three four five".split()
)
SUBJECT_PRONOUNS = frozenset("he she they it who what someone somebody".split())
RELATIVE_PRONOUNS = frozenset("who which that whom whose".split())
ATTRIBUTE_PREPOSITIONS = frozenset(["in", "with"])
CLAUSE_BOUNDARIES = frozenset(["and", "then", ",", ";", ".", "while", "before", "after", "!", "?"])
AUXILIARIES = frozenset("is are am was were be been being".split())
PLURAL_NOUNS = frozenset("men women people children kids".split())

_TOKEN_RE = re.compile(r"[A-Za-z0-9][A-Za-z0-9'\-]*|[^\sA-Za-z0-9]")


def tokenize(text: str) -> List[str]:
    return _TOKEN_RE.findall(text)


@dataclass(frozen=True)
class SuffixRule:
    """Tag a word ending in ``suffix``.

    When ``stem_tag`` is set the rule only fires if stripping the suffix (and
    appending ``replacement``) yields a lexicon word carrying that tag.
    """

    suffix: str
    tag: str
    stem_tag: Optional[str] = None
    replacement: str = ""
    min_stem: int = 2


DEFAULT_SUFFIX_RULES = (
    SuffixRule("ies", "VERB", "VERB", "y"),
    SuffixRule("es", "VERB", "VERB"),
    SuffixRule("s", "VERB", "VERB"),
    SuffixRule("ies", "NOUN", "NOUN", "y"),
    SuffixRule("es", "NOUN", "NOUN"),
    SuffixRule("s", "NOUN", "NOUN"),
    SuffixRule("ing", "VERB", min_stem=3),
    SuffixRule("ed", "VERB", min_stem=3),
    SuffixRule("ly", "OTHER", min_stem=3),
    SuffixRule("ful", "ADJ", min_stem=3),
    SuffixRule("ous", "ADJ", min_stem=3),
    SuffixRule("ish", "ADJ", min_stem=3),
    SuffixRule("less", "ADJ", min_stem=3),
)


class TagLexicon:
    """Word -> POS lookup with ordered suffix fallbacks and an OTHER default."""

    def __init__(self, words: Dict[str, str], suffix_rules: Sequence[SuffixRule] = DEFAULT_SUFFIX_RULES):
        self.words = {w.lower(): t for w, t in words.items()}
        self.suffix_rules = tuple(suffix_rules)

    @classmethod
    def from_file(cls, path, base: Optional["TagLexicon"] = None) -> "TagLexicon":
        """Load ``word<TAB>tag`` lines; entries override those of ``base``."""
        words = dict(base.words) if base else {}
        with open(path) as fh:
            for lineno, line in enumerate(fh, 1):
                line = line.strip()
                if not line or line.startswith("#"):
                    continue
                try:
                    word, tag = line.split("\t")
                except ValueError:
                    raise ContractError(f"{path}:{lineno}: expected word<TAB>tag") from None
                if tag not in ("NOUN", "ADJ", "VERB", "OTHER"):
                    raise ContractError(f"{path}:{lineno}: unknown tag {tag!r}")
                words[word.lower()] = tag
        return cls(words, base.suffix_rules if base else DEFAULT_SUFFIX_RULES)

    def stem_lookup(self, word: str):
        """Return ``(tag, stem)`` of the first matching rule, or ``None``."""
        for rule in self.suffix_rules:
            if not word.endswith(rule.suffix):
                continue
            stem = word[: len(word) - len(rule.suffix)]
            if len(stem) < rule.min_stem:
                continue
            if rule.stem_tag is None:
                return rule.tag, stem
            candidate = stem + rule.replacement
            if self.words.get(candidate) == rule.stem_tag:
                return rule.tag, candidate
        return None

    def tag_word(self, token: str) -> str:
        word = token.lower()
        if word in self.words:
            return self.words[word]
        hit = self.stem_lookup(word)
        return hit[0] if hit else "OTHER"

    def tag(self, tokens: Iterable[str]) -> List[str]:
        return [self.tag_word(t) for t in tokens]

    def is_third_person_verb(self, token: str) -> bool:
        word = token.lower()
        for suffix, repl in (("ies", "y"), ("es", ""), ("s", "")):
            if word.endswith(suffix) and self.words.get(word[: len(word) - len(suffix)] + repl) == "VERB":
                return True
        return False

    def is_base_verb(self, token: str) -> bool:
        return self.words.get(token.lower()) == "VERB"


@lru_cache(maxsize=1)
def default_tagger() -> TagLexicon:
    path = resources.files("tubeground") / "data" / "lexicon.tsv"
    with resources.as_file(path) as p:
        return TagLexicon.from_file(p)


def pos_tag(tokens: Sequence[str], lexicon: Optional[TagLexicon] = None) -> List[str]:
    return (lexicon or default_tagger()).tag(tokens)


# -- chunking -----------------------------------------------------------------

def _noun_phrase_end(tokens, tags, i) -> Optional[int]:
    """End of a ``det? adj* noun+`` phrase starting at ``i``, or None."""
    n = len(tokens)
    j = i
    if j < n and tokens[j].lower() in DETERMINERS:
        j += 1
    while j < n and tags[j] == "ADJ":
        j += 1
    if j >= n or tags[j] != "NOUN":
        return None
    while j < n and tags[j] == "NOUN":
        j += 1
    return j


def extract_referral(tokens: Sequence[str], tags: Sequence[str]) -> Tuple[int, int]:
    """Span ``[0, end)`` of the referral subject phrase.

    The phrase is the first noun phrase (determiner, adjectives, head nouns),
    extended over ``in``/``with`` attributes as long as each one reaches a
    head noun. A leading pronoun is taken as the whole subject.
    """
    n = len(tokens)
    if n == 0:
        raise ContractError("cannot extract a referral from an empty query")
    if tokens[0].lower() in SUBJECT_PRONOUNS:
        return (0, 1)
    end = None
    for start in range(n):
        if tokens[start] in CLAUSE_BOUNDARIES - {","}:
            break
        end = _noun_phrase_end(tokens, tags, start)
        if end is not None:
            break
    if end is None:
        logger.warning("no noun phrase in %r; using the whole query as referral", " ".join(tokens))
        return (0, n)
    return (0, _extend_attributes(tokens, tags, end))


def _extend_attributes(tokens, tags, end) -> int:
    """Grow a noun phrase over ``in``/``with`` attributes.

    An attribute either reaches a head noun ("with yellow hair") or is a bare
    adjective run ("in red").
    """
    n = len(tokens)
    while end < n and tokens[end].lower() in ATTRIBUTE_PREPOSITIONS:
        nxt = _noun_phrase_end(tokens, tags, end + 1)
        if nxt is None:
            j = end + 1
            while j < n and tags[j] == "ADJ":
                j += 1
            if j == end + 1:
                break
            nxt = j
        end = nxt
    return end


def _referral_is_plural(tokens, tags, span) -> bool:
    heads = [tokens[i].lower() for i in range(*span) if tags[i] == "NOUN"]
    if not heads:
        return False
    head = heads[0]
    return head in PLURAL_NOUNS or (head.endswith("s") and not head.endswith("ss"))


def extract_actions(tokens: Sequence[str], tags: Sequence[str], referral: Tuple[int, int],
                    lexicon: Optional[TagLexicon] = None) -> List[int]:
    """Positions of present-tense active verbs governed by the referral subject.

    Verbs are collected along the clause chain that follows the referral
    (joined by ``and``/``then``/commas or simply juxtaposed). The chain ends
    when a clause boundary is followed by a new noun-phrase subject with its
    own verb. Pronoun subjects continue the chain; relative clauses and
    participles/infinitives are skipped.
    """
    lexicon = lexicon or default_tagger()
    plural = _referral_is_plural(tokens, tags, referral)
    n = len(tokens)
    out: List[int] = []
    at_boundary = True
    in_relative = False
    i = referral[1]
    while i < n:
        word = tokens[i].lower()
        if word in CLAUSE_BOUNDARIES:
            at_boundary, in_relative = True, False
            i += 1
            continue
        if word in RELATIVE_PRONOUNS and not at_boundary:
            in_relative = True
            i += 1
            continue
        if at_boundary and word in SUBJECT_PRONOUNS:
            i += 1
            continue
        if at_boundary and tags[i] != "VERB":
            np_end = _noun_phrase_end(tokens, tags, i)
            if np_end is not None:
                np_end = _extend_attributes(tokens, tags, np_end)
            if np_end is not None and np_end < n and _is_finite_verb(tokens, np_end, lexicon, plural=True):
                break
        if tags[i] == "VERB" and not in_relative and _is_present_active(tokens, i, lexicon, plural):
            out.append(i)
        at_boundary = False
        i += 1
    if not out:
        logger.warning("no referral action verbs in %r", " ".join(tokens))
    return out


def _is_finite_verb(tokens, i, lexicon, plural) -> bool:
    return lexicon.tag_word(tokens[i]) == "VERB" and _is_present_active(tokens, i, lexicon, plural)


def _is_present_active(tokens, i, lexicon, plural) -> bool:
    word = tokens[i].lower()
    prev = tokens[i - 1].lower() if i > 0 else ""
    if prev == "to":
        return False
    if word.endswith("ing"):
        return prev in AUXILIARIES
    if lexicon.is_third_person_verb(word):
        return True
    return plural and lexicon.is_base_verb(word)


@dataclass
class DecomposedQuery:
    tokens: List[str]
    referral_span: Tuple[int, int]
    action_positions: List[int]
    background_spans: List[Tuple[int, int]]
    local_positions: List[List[int]]
    global_positions: List[int]
    max_words: int = 25

    @property
    def referral_phrase(self) -> str:
        return " ".join(self.tokens[slice(*self.referral_span)])

    @property
    def action_verbs(self) -> List[str]:
        return [self.tokens[i] for i in self.action_positions]

    @property
    def local_queries(self) -> List[str]:
        return [" ".join(self.tokens[i] for i in pos) for pos in self.local_positions]

    @property
    def background(self) -> List[str]:
        return [" ".join(self.tokens[s:e]) for s, e in self.background_spans]

    def word_positions(self) -> List[int]:
        """Original-query positions forming the ``<Q_og : Q_ol>`` word sequence."""
        seq = list(self.global_positions)
        for pos in self.local_positions:
            seq.extend(pos)
        return seq

    @property
    def is_empty(self) -> bool:
        return not self.global_positions and not self.local_positions

    def to_dict(self) -> dict:
        return {
            "tokens": list(self.tokens),
            "referral_phrase": self.referral_phrase,
            "referral_span": list(self.referral_span),
            "action_verbs": self.action_verbs,
            "action_positions": list(self.action_positions),
            "background": self.background,
            "background_spans": [list(s) for s in self.background_spans],
            "local_queries": self.local_queries,
            "global_positions": list(self.global_positions),
        }


def _background_spans(n, covered) -> List[Tuple[int, int]]:
    spans, start = [], None
    for i in range(n):
        if i in covered:
            if start is not None:
                spans.append((start, i))
                start = None
        elif start is None:
            start = i
    if start is not None:
        spans.append((start, n))
    return spans


def decompose_tokens(tokens: Sequence[str], tags: Sequence[str], lexicon: Optional[TagLexicon] = None,
                     max_words: int = 25) -> DecomposedQuery:
    tokens = list(tokens)
    tags = list(tags)
    if len(tokens) != len(tags):
        raise ContractError("tokens and tags differ in length")
    n = len(tokens)
    if n == 0:
        return DecomposedQuery([], (0, 0), [], [], [], [], max_words)
    ref = extract_referral(tokens, tags)
    actions = extract_actions(tokens, tags, ref, lexicon)
    ref_positions = list(range(*ref))

    locals_: List[List[int]] = []
    budget = max(max_words - len(ref_positions) - 1, 0)
    for a, verb in enumerate(actions):
        stop = actions[a + 1] if a + 1 < len(actions) else n
        obj = []
        for j in range(verb + 1, stop):
            if tokens[j].lower() in CLAUSE_BOUNDARIES:
                break
            obj.append(j)
        locals_.append((ref_positions + [verb] + obj[:budget])[:max_words])
    if not locals_:
        locals_ = [ref_positions[:max_words]]

    global_positions = sorted([i for i in ref_positions if tags[i] in ("NOUN", "ADJ")] + actions)
    covered = set(ref_positions) | set(actions)
    return DecomposedQuery(
        tokens=tokens,
        referral_span=ref,
        action_positions=actions,
        background_spans=_background_spans(n, covered),
        local_positions=locals_,
        global_positions=global_positions,
        max_words=max_words,
    )


def validate_decomposition(dq: DecomposedQuery) -> None:
    """Check the structural invariants; raise :class:`ContractError` on failure."""
    n = len(dq.tokens)
    s, e = dq.referral_span
    if n and not (s == 0 and 0 < e <= n):
        raise ContractError(f"referral span {dq.referral_span} is not a non-empty prefix")
    seen = list(range(s, e)) + list(dq.action_positions)
    for bs, be in dq.background_spans:
        seen.extend(range(bs, be))
    if sorted(seen) != list(range(n)):
        raise ContractError("referral, actions and background do not partition the query")
    if any(not 0 <= i < n for i in dq.global_positions):
        raise ContractError("global position out of range")
    ref = list(range(s, e))
    for pos in dq.local_positions:
        if pos[: len(ref)] != ref:
            raise ContractError("local query does not start with the referral phrase")
        if len(pos) > dq.max_words:
            raise ContractError("local query exceeds max_words")


Decomposer = Callable[[Sequence[str], Sequence[str]], DecomposedQuery]


def decompose(query, lexicon: Optional[TagLexicon] = None, adapter: Optional[Decomposer] = None,
              max_words: int = 25) -> DecomposedQuery:
    """Decompose a :class:`QueryEmbedding` (or a raw string).

    ``adapter`` may supply an external decomposer; its output is validated
    against the same invariants as the built-in rules.
    """
    if isinstance(query, str):
        tokens = tokenize(query)
        tags = pos_tag(tokens, lexicon)
    elif isinstance(query, QueryEmbedding):
        tokens, tags = query.tokens, query.pos_tags
        max_words = query.max_words
    else:
        tokens, tags = query
    if adapter is not None:
        dq = adapter(tokens, tags)
        validate_decomposition(dq)
        return dq
    return decompose_tokens(tokens, tags, lexicon, max_words)
