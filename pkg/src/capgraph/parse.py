"""Triplet extraction from sentences, class mapping, and box grounding.

Triplets come from either a chat-model parser (cached like segmentation) or a
dependency-free rule parser that pattern-matches subject-verb-object per
clause. Classes are then mapped into the target vocabulary through a shipped
synonym lexicon, through the chat model, or left untouched for open-vocabulary
runs. Grounding picks, per aligned frame, the highest-confidence detection of
the matching entity class for each role.
"""

from __future__ import annotations

import json
import re
import warnings
from collections import Counter
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple

from .core import Detection, Provenance, SegmentedSentence, Triplet, Vocabulary
from .llm import ChatClient

PARSER_MODES = ("llm", "rule")
MAPPING_MODES = ("llm", "lexicon", "none")


@dataclass
class ParseConfig:
    parser: str = "llm"
    mapping: str = "lexicon"
    lexicon_path: Optional[str] = None
    top_n_open_classes: Optional[int] = 500

    def __post_init__(self):
        if self.parser not in PARSER_MODES:
            raise ValueError(f"unknown parser {self.parser!r}")
        if self.mapping not in MAPPING_MODES:
            raise ValueError(f"unknown mapping mode {self.mapping!r}")


@dataclass
class DiscardCounters:
    """Why mapped triplets were dropped; surfaced by the stats command."""

    unparseable: int = 0
    unmapped_subject: int = 0
    unmapped_predicate: int = 0
    unmapped_object: int = 0

    def total(self) -> int:
        return (
            self.unparseable
            + self.unmapped_subject
            + self.unmapped_predicate
            + self.unmapped_object
        )

    def to_dict(self) -> dict:
        return {
            "unparseable": self.unparseable,
            "unmapped_subject": self.unmapped_subject,
            "unmapped_predicate": self.unmapped_predicate,
            "unmapped_object": self.unmapped_object,
        }


# ---------------------------------------------------------------------------
# Chat-model parser

PARSE_PROMPT_TEMPLATE = (
    "Extract the subject-predicate-object triplets that describe actions or "
    "relations in the sentence below. Reply with one triplet per line in the "
    "form <subject, predicate, object>. Reply with the word none if there is "
    "no triplet.\n"
    "\n"
    "Sentence: {sentence}"
)

_TRIPLET_LINE_RE = re.compile(r"<\s*([^,<>]+?)\s*,\s*([^,<>]+?)\s*,\s*([^,<>]+?)\s*>")


def build_parse_prompt(sentence_text: str) -> str:
    return PARSE_PROMPT_TEMPLATE.format(sentence=sentence_text)


def _llm_parse(text: str, client: ChatClient) -> List[Triplet]:
    reply = client.complete(build_parse_prompt(text))
    matches = _TRIPLET_LINE_RE.findall(reply)
    if not matches and "none" not in reply.lower():
        raise ValueError("reply contained no triplets")
    return [
        Triplet(s.strip().lower(), p.strip().lower(), o.strip().lower())
        for s, p, o in matches
    ]


# ---------------------------------------------------------------------------
# Rule parser (dependency-free subject-verb-object per clause)

_DETERMINERS = {
    "a", "an", "the", "his", "her", "their", "its", "my", "your", "our",
    "this", "that", "these", "those", "some", "any", "one", "two", "three",
}
_AUXILIARIES = {
    "is", "are", "was", "were", "be", "been", "being",
    "has", "have", "had", "does", "do", "did", "will", "would",
}
_VERB_BASES = {
    "take", "sit", "hold", "drink", "eat", "watch", "walk", "look", "stand",
    "lie", "lay", "carry", "put", "open", "close", "throw", "read", "touch",
    "wear", "run", "play", "wash", "grab", "lean", "smile", "sneeze", "pour",
    "write", "wipe", "twist", "cover", "turn", "pick", "place", "move",
    "clean", "sweep", "fold", "tidy", "vacuum", "fix", "work", "talk",
    "laugh", "snuggle", "drop", "make", "enter", "leave", "go", "come",
    "get", "give", "wave", "point", "push", "pull", "reach", "dress",
    "cook", "sleep", "wake", "jump", "dance", "knock", "step", "use",
}
_PARTICLES = {"away", "back", "down", "up", "off", "out", "over"}
_PREPOSITIONS = {
    "on", "at", "in", "from", "with", "over", "under", "behind", "above",
    "beneath", "beside", "into", "onto", "near", "around", "against",
    "across", "inside", "to",
}
_OBJECT_STOPS = {"to", "that", "which", "and", "before", "after", "then", "while", "when"}
_DOUBLED = {
    "grab", "stop", "swim", "shut", "chop", "drop", "hug", "jog", "nod",
    "pat", "plan", "rub", "skip", "slip", "step", "stir", "tap", "wrap",
}
_VOWELS = set("aeiou")


def _verb_base(token: str) -> Optional[str]:
    t = token.lower()
    candidates = [t]
    if t.endswith("ies"):
        candidates.append(t[:-3] + "y")
    if t.endswith("es"):
        candidates.append(t[:-2])
    if t.endswith("s") and not t.endswith("ss"):
        candidates.append(t[:-1])
    if t.endswith("ing"):
        stem = t[:-3]
        candidates.extend([stem, stem + "e"])
        if len(stem) >= 2 and stem[-1] == stem[-2]:
            candidates.append(stem[:-1])
        if stem.endswith("y"):
            candidates.append(stem[:-1] + "ie")
    for c in candidates:
        if c in _VERB_BASES:
            return c
    return None


def _gerund(base: str) -> str:
    if base.endswith("ie"):
        return base[:-2] + "ying"
    if base.endswith("e") and not base.endswith("ee") and base != "be":
        return base[:-1] + "ing"
    if base in _DOUBLED or (
        len(base) == 3
        and base[-1] not in _VOWELS | set("wxy")
        and base[-2] in _VOWELS
        and base[-3] not in _VOWELS
    ):
        return base + base[-1] + "ing"
    return base + "ing"


def _head_noun(tokens: List[str]) -> Optional[str]:
    words = []
    for tok in tokens:
        low = tok.lower()
        if low in _OBJECT_STOPS or low in {",", "."}:
            break
        if low == "of" and words:
            break
        if low in _DETERMINERS or low in _AUXILIARIES:
            continue
        words.append(low)
    return words[-1] if words else None


def _rule_parse_clause(tokens: List[str], inherited_subject: Optional[str]) -> Optional[Triplet]:
    verb_at = None
    base = None
    for i, tok in enumerate(tokens):
        low = tok.lower()
        if low in _AUXILIARIES:
            continue
        found = _verb_base(tok)
        if found is not None:
            verb_at, base = i, found
            break
    if verb_at is None:
        return None

    subject = _head_noun(tokens[:verb_at]) or inherited_subject
    if subject is None:
        return None

    predicate_words = [_gerund(base)]
    j = verb_at + 1
    while j < len(tokens) and tokens[j].lower() in _PARTICLES:
        predicate_words.append(tokens[j].lower())
        j += 1
    if j < len(tokens) and tokens[j].lower() in _PREPOSITIONS and tokens[j].lower() != "to":
        predicate_words.append(tokens[j].lower())
        j += 1

    obj = _head_noun(tokens[j:])
    if obj is None:
        return None
    return Triplet(subject, " ".join(predicate_words), obj)


def _rule_parse(text: str) -> List[Triplet]:
    triplets: List[Triplet] = []
    previous_subject: Optional[str] = None
    for clause in re.split(r",|;|\band\b", text):
        tokens = re.findall(r"[A-Za-z']+", clause)
        if not tokens:
            continue
        triplet = _rule_parse_clause(tokens, previous_subject)
        if triplet is not None:
            triplets.append(triplet)
            previous_subject = triplet.subject_class
    return triplets


def parse_triplets(
    sentence: SegmentedSentence,
    config: ParseConfig,
    client: Optional[ChatClient] = None,
    counters: Optional[DiscardCounters] = None,
) -> List[Triplet]:
    """Extract zero or more unlocalized triplets from one sentence.

    An unparseable chat reply degrades to an empty list with a warning.
    """
    if not sentence.text.strip():
        raise ValueError("sentence text must be non-empty")
    if config.parser == "rule":
        return _rule_parse(sentence.text)
    if client is None:
        raise ValueError("llm parser requires a client")
    try:
        return _llm_parse(sentence.text, client)
    except ValueError as e:
        warnings.warn(
            f"unparseable triplet reply for {sentence.text[:50]!r}: {e}", RuntimeWarning
        )
        if counters is not None:
            counters.unparseable += 1
        return []


# ---------------------------------------------------------------------------
# Class mapping

_WS_RE = re.compile(r"\s+")


def _normalize(name: str) -> str:
    return _WS_RE.sub(" ", name.strip().lower())


@dataclass
class SynonymLexicon:
    entity_synonyms: Dict[str, str] = field(default_factory=dict)
    action_synonyms: Dict[str, str] = field(default_factory=dict)

    @classmethod
    def bundled(cls) -> "SynonymLexicon":
        text = resources.files("capgraph.assets").joinpath("synonym_lexicon.json").read_text()
        return cls.from_dict(json.loads(text))

    @classmethod
    def load(cls, path) -> "SynonymLexicon":
        return cls.from_dict(json.loads(Path(path).read_text(encoding="utf-8")))

    @classmethod
    def from_dict(cls, d: dict) -> "SynonymLexicon":
        return cls(
            entity_synonyms={_normalize(k): v for k, v in d.get("entity_synonyms", {}).items()},
            action_synonyms={_normalize(k): v for k, v in d.get("action_synonyms", {}).items()},
        )


def _lexicon_for(config: ParseConfig) -> SynonymLexicon:
    if config.lexicon_path:
        return SynonymLexicon.load(config.lexicon_path)
    return SynonymLexicon.bundled()


MAPPING_PROMPT_TEMPLATE = (
    "Which of the following classes is semantically closest to \"{name}\"? "
    "Reply with exactly one class name from the list, or the word none if no "
    "class fits.\n"
    "\n"
    "Classes: {classes}"
)


def _map_entity(name: str, vocab: Vocabulary, lexicon: SynonymLexicon) -> Optional[str]:
    n = _normalize(name)
    if n in vocab.entity_classes:
        return n
    return lexicon.entity_synonyms.get(n)


def _map_action(name: str, vocab: Vocabulary, lexicon: SynonymLexicon) -> Optional[str]:
    n = _normalize(name)
    if n in vocab.action_classes:
        return n
    return lexicon.action_synonyms.get(n)


def _llm_map(name: str, classes: Sequence[str], client: ChatClient) -> Optional[str]:
    prompt = MAPPING_PROMPT_TEMPLATE.format(name=_normalize(name), classes=", ".join(sorted(classes)))
    reply = _normalize(client.complete(prompt))
    if reply in classes:
        return reply
    return None


def map_classes(
    triplet: Triplet,
    vocab: Vocabulary,
    config: ParseConfig,
    client: Optional[ChatClient] = None,
    counters: Optional[DiscardCounters] = None,
) -> Optional[Triplet]:
    """Map a triplet's classes into the vocabulary.

    Returns the mapped triplet, the unchanged triplet in open-vocabulary
    mode, or None when any class has no mapping (a discard, not an error).
    """
    if config.mapping == "none":
        return triplet

    if config.mapping == "lexicon":
        lexicon = _lexicon_for(config)
        subject = _map_entity(triplet.subject_class, vocab, lexicon)
        predicate = _map_action(triplet.predicate_class, vocab, lexicon)
        obj = _map_entity(triplet.object_class, vocab, lexicon)
    else:
        if client is None:
            raise ValueError("llm mapping requires a client")
        entity_classes = sorted(vocab.entity_classes)
        action_classes = sorted(vocab.action_classes)
        n = _normalize(triplet.subject_class)
        subject = n if n in vocab.entity_classes else _llm_map(n, entity_classes, client)
        n = _normalize(triplet.predicate_class)
        predicate = n if n in vocab.action_classes else _llm_map(n, action_classes, client)
        n = _normalize(triplet.object_class)
        obj = n if n in vocab.entity_classes else _llm_map(n, entity_classes, client)

    if subject is None or predicate is None or obj is None:
        if counters is not None:
            if subject is None:
                counters.unmapped_subject += 1
            if predicate is None:
                counters.unmapped_predicate += 1
            if obj is None:
                counters.unmapped_object += 1
        return None
    return Triplet(subject, predicate, obj, provenance=triplet.provenance)


def restrict_open_vocabulary(triplets: Sequence[Triplet], top_n: int) -> List[Triplet]:
    """Keep only the ``top_n`` most frequent predicate classes (ties by name)."""
    counts = Counter(t.predicate_class for t in triplets)
    ranked = sorted(counts.items(), key=lambda kv: (-kv[1], kv[0]))
    kept = {name for name, _ in ranked[:top_n]}
    return [t for t in triplets if t.predicate_class in kept]


# ---------------------------------------------------------------------------
# Grounding


def _best_detection(
    frame_detections: Sequence[Detection],
    entity_class: str,
    exclude: Optional[Detection] = None,
) -> Optional[Detection]:
    best = None
    best_key = None
    for order, det in enumerate(frame_detections):
        if det.entity_class != entity_class or det is exclude:
            continue
        key = (-det.confidence, -det.box.area, order)
        if best_key is None or key < best_key:
            best, best_key = det, key
    return best


def ground_triplets(
    triplets: Sequence[Triplet],
    aligned_frames: Optional[Tuple[int, int]],
    detections: Sequence[Detection],
) -> List[Triplet]:
    """Localize triplets on every frame of the aligned interval.

    Per frame and triplet, the subject takes the highest-confidence detection
    of its class (ties: larger box, then earlier record) and the object
    likewise; when subject and object classes coincide they must use two
    distinct detections. Frames missing either role produce nothing.
    """
    if aligned_frames is None:
        return []
    by_frame: Dict[int, List[Detection]] = {}
    for det in detections:
        by_frame.setdefault(det.frame_index, []).append(det)

    lo, hi = aligned_frames
    grounded: List[Triplet] = []
    for frame in range(lo, hi + 1):
        frame_dets = by_frame.get(frame, [])
        for t in triplets:
            subject = _best_detection(frame_dets, t.subject_class)
            if subject is None:
                continue
            exclude = subject if t.object_class == t.subject_class else None
            obj = _best_detection(frame_dets, t.object_class, exclude=exclude)
            if obj is None:
                continue
            grounded.append(
                Triplet(
                    subject_class=t.subject_class,
                    predicate_class=t.predicate_class,
                    object_class=t.object_class,
                    subject_box=subject.box,
                    object_box=obj.box,
                    frame_index=frame,
                    provenance=Provenance.CAPTION,
                )
            )
    return grounded
