"""Corpus and knowledge-graph ingestion, entity linking, training instances."""

from __future__ import annotations

import json
import random
import re
from dataclasses import dataclass, field
from pathlib import Path

UNK = "<unk>"
USER_SEP = "<user>"
SYSTEM_SEP = "<system>"
EOS = "<eos>"
ITEM_SLOT = "[ITEM]"
SPECIAL_TOKENS = [UNK, USER_SEP, SYSTEM_SEP, EOS, ITEM_SLOT]

_TOKEN_RE = re.compile(r"[a-z0-9_']+|[?.!,]")


def normalize(text: str) -> str:
    return " ".join(text.lower().split())


def tokenize(text: str) -> list[str]:
    return _TOKEN_RE.findall(normalize(text))


def _tokenize_with_spans(text: str) -> list[tuple[str, int, int]]:
    return [(m.group(0), m.start(), m.end()) for m in _TOKEN_RE.finditer(text)]


class CorpusError(ValueError):
    """Raised when a corpus or KG file fails validation."""


@dataclass(frozen=True)
class Mention:
    start_char: int
    end_char: int
    start_tok: int
    end_tok: int  # exclusive
    entity_id: int


class EntityLinker:
    """Exact-dictionary linker: case-insensitive, longest match first, left to right."""

    def __init__(self, surface_map: dict[str, int]):
        self._by_tokens: dict[tuple[str, ...], int] = {}
        for surface, eid in surface_map.items():
            key = tuple(tokenize(surface))
            if not key:
                raise CorpusError(f"entity surface {surface!r} tokenizes to nothing")
            self._by_tokens[key] = eid
        self._max_len = max((len(k) for k in self._by_tokens), default=0)

    @classmethod
    def from_names(cls, names: dict[int, str]) -> "EntityLinker":
        return cls({name: eid for eid, name in names.items()})

    def link(self, text: str) -> list[Mention]:
        norm = normalize(text)
        toks = _tokenize_with_spans(norm)
        words = [t[0] for t in toks]
        mentions: list[Mention] = []
        i = 0
        while i < len(words):
            matched = None
            for length in range(min(self._max_len, len(words) - i), 0, -1):
                eid = self._by_tokens.get(tuple(words[i : i + length]))
                if eid is not None:
                    matched = (length, eid)
                    break
            if matched is None:
                i += 1
                continue
            length, eid = matched
            mentions.append(
                Mention(toks[i][1], toks[i + length - 1][2], i, i + length, eid)
            )
            i += length
        return mentions


def link(text: str, linker: EntityLinker) -> list[tuple[tuple[int, int], int]]:
    """Char-span view of the linker output."""
    return [((m.start_char, m.end_char), m.entity_id) for m in linker.link(text)]


@dataclass
class Utterance:
    speaker: str  # "user" | "system"
    tokens: list[str]
    item_mentions: list[int]
    entity_mentions: list[int]
    mentions: list[Mention] = field(default_factory=list, repr=False)

    def text(self) -> str:
        return " ".join(self.tokens)


@dataclass
class Conversation:
    id: str
    turns: list[Utterance]


@dataclass
class DialogueCorpus:
    conversations: list[Conversation]

    def stats(self) -> dict:
        items = set()
        n_utt = 0
        for conv in self.conversations:
            for turn in conv.turns:
                n_utt += 1
                items.update(turn.item_mentions)
        return {
            "n_dialogs": len(self.conversations),
            "n_utterances": n_utt,
            "n_items_mentioned": len(items),
        }


@dataclass
class KnowledgeGraph:
    num_entities: int
    num_relations: int
    triples: list[tuple[int, int, int]]
    item_ids: list[int]

    def __post_init__(self):
        if len(self.item_ids) < 1:
            raise CorpusError("knowledge graph needs at least one item")
        seen = set()
        for h, r, t in self.triples:
            if not (0 <= h < self.num_entities and 0 <= t < self.num_entities):
                raise CorpusError(f"dangling entity id in triple {(h, r, t)}")
            if not 0 <= r < self.num_relations:
                raise CorpusError(f"relation id out of range in triple {(h, r, t)}")
            if (h, r, t) in seen:
                raise CorpusError(f"duplicate triple {(h, r, t)}")
            seen.add((h, r, t))
        for i in self.item_ids:
            if not 0 <= i < self.num_entities:
                raise CorpusError(f"item id {i} is not a valid entity id")


def load_kg(kg_path, entities_path) -> tuple[KnowledgeGraph, dict[int, str]]:
    """Read `head<TAB>relation<TAB>tail` triples plus the entity table."""
    names: dict[int, str] = {}
    item_ids: list[int] = []
    for lineno, line in enumerate(Path(entities_path).read_text().splitlines(), 1):
        if not line.strip():
            continue
        parts = line.split("\t")
        if len(parts) != 3:
            raise CorpusError(f"{entities_path}:{lineno}: expected id\\tname\\tis_item")
        eid, name, is_item = int(parts[0]), parts[1], int(parts[2])
        names[eid] = name
        if is_item:
            item_ids.append(eid)
    if sorted(names) != list(range(len(names))):
        raise CorpusError("entity ids must be contiguous from 0")

    triples = []
    max_rel = -1
    for lineno, line in enumerate(Path(kg_path).read_text().splitlines(), 1):
        if not line.strip():
            continue
        parts = line.split("\t")
        if len(parts) != 3:
            raise CorpusError(f"{kg_path}:{lineno}: expected head\\trel\\ttail")
        h, r, t = (int(p) for p in parts)
        triples.append((h, r, t))
        max_rel = max(max_rel, r)
    kg = KnowledgeGraph(
        num_entities=len(names),
        num_relations=max_rel + 1 if triples else 1,
        triples=triples,
        item_ids=sorted(item_ids),
    )
    return kg, names


def _parse_turn(raw: dict, linker: EntityLinker, item_set: set[int], where: str) -> Utterance:
    speaker = raw.get("speaker")
    if speaker not in ("user", "system"):
        raise CorpusError(f"{where}: bad speaker {speaker!r}")
    text = raw.get("text")
    if not isinstance(text, str):
        raise CorpusError(f"{where}: missing text")
    declared_items = raw.get("items", [])
    for iid in declared_items:
        if iid not in item_set:
            raise CorpusError(f"{where}: unknown item id {iid}")
    mentions = linker.link(text)
    entity_mentions = [m.entity_id for m in mentions]
    item_mentions = [m.entity_id for m in mentions if m.entity_id in item_set]
    if item_mentions != list(declared_items):
        raise CorpusError(
            f"{where}: declared items {declared_items} do not match "
            f"linked item mentions {item_mentions}"
        )
    return Utterance(
        speaker=speaker,
        tokens=tokenize(text),
        item_mentions=item_mentions,
        entity_mentions=entity_mentions,
        mentions=mentions,
    )


def load_corpus(path, linker: EntityLinker, kg: KnowledgeGraph) -> DialogueCorpus:
    item_set = set(kg.item_ids)
    conversations = []
    with open(path) as fh:
        for lineno, line in enumerate(fh, 1):
            if not line.strip():
                continue
            try:
                raw = json.loads(line)
            except json.JSONDecodeError as exc:
                raise CorpusError(f"{path}:{lineno}: invalid record: {exc}") from exc
            if "id" not in raw or "turns" not in raw or not raw["turns"]:
                raise CorpusError(f"{path}:{lineno}: record needs id and nonempty turns")
            turns = [
                _parse_turn(t, linker, item_set, f"{path}:{lineno}")
                for t in raw["turns"]
            ]
            conversations.append(Conversation(id=str(raw["id"]), turns=turns))
    return DialogueCorpus(conversations)


def save_corpus(corpus: DialogueCorpus, path) -> None:
    with open(path, "w") as fh:
        for conv in corpus.conversations:
            rec = {
                "id": conv.id,
                "turns": [
                    {"speaker": t.speaker, "text": t.text(), "items": t.item_mentions}
                    for t in conv.turns
                ],
            }
            fh.write(json.dumps(rec) + "\n")


class Vocab:
    def __init__(self, tokens: list[str]):
        self.tokens = list(tokens)
        self.index = {t: i for i, t in enumerate(self.tokens)}
        if len(self.index) != len(self.tokens):
            raise CorpusError("duplicate tokens in vocabulary")
        self.unk_id = self.index[UNK]
        self.eos_id = self.index[EOS]
        self.item_slot_id = self.index[ITEM_SLOT]
        self.user_id = self.index[USER_SEP]
        self.system_id = self.index[SYSTEM_SEP]

    def __len__(self):
        return len(self.tokens)

    def encode(self, toks: list[str]) -> list[int]:
        return [self.index.get(t, self.unk_id) for t in toks]

    def decode(self, ids: list[int]) -> list[str]:
        return [self.tokens[i] for i in ids]

    def save(self, path) -> None:
        Path(path).write_text(json.dumps(self.tokens))

    @classmethod
    def load(cls, path) -> "Vocab":
        return cls(json.loads(Path(path).read_text()))


def build_vocab(corpus: DialogueCorpus, entity_names: dict[int, str]) -> Vocab:
    seen = dict.fromkeys(SPECIAL_TOKENS)
    for name in entity_names.values():
        for tok in tokenize(name):
            seen.setdefault(tok)
    for conv in corpus.conversations:
        for turn in conv.turns:
            for tok in turn.tokens:
                seen.setdefault(tok)
    return Vocab(list(seen))


@dataclass
class TrainingInstance:
    conversation_id: str
    turn_index: int
    context_tokens: list[str]
    context_entities: list[int]
    target_response: list[str]
    target_template: list[str]
    target_items: list[int]
    target_entities: list[int]


def make_template(turn: Utterance, item_set: set[int]) -> tuple[list[str], list[int]]:
    """Replace each item-name token span in the response by the slot token."""
    template: list[str] = []
    items: list[int] = []
    pos = 0
    for m in turn.mentions:
        if m.entity_id not in item_set:
            continue
        template.extend(turn.tokens[pos : m.start_tok])
        template.append(ITEM_SLOT)
        items.append(m.entity_id)
        pos = m.end_tok
    template.extend(turn.tokens[pos:])
    return template, items


def _context_blocks(turns: list[Utterance]) -> list[tuple[list[str], list[int]]]:
    """Flatten turns into role-separated blocks; consecutive same-speaker turns merge."""
    blocks: list[tuple[list[str], list[int]]] = []
    prev_speaker = None
    for turn in turns:
        sep = USER_SEP if turn.speaker == "user" else SYSTEM_SEP
        if turn.speaker == prev_speaker:
            blocks[-1][0].extend(turn.tokens)
            blocks[-1][1].extend(turn.entity_mentions)
        else:
            blocks.append(([sep] + list(turn.tokens), list(turn.entity_mentions)))
        prev_speaker = turn.speaker
    return blocks


def _truncate_blocks(blocks, max_tokens: int):
    """Keep the most recent whole blocks that fit within max_tokens."""
    kept: list = []
    total = 0
    for block in reversed(blocks):
        if kept and total + len(block[0]) > max_tokens:
            break
        kept.append(block)
        total += len(block[0])
    kept.reverse()
    return kept


STAGES = ("fuse_pretrain", "generation", "recommendation")


def make_instances(
    corpus: DialogueCorpus,
    stage: str,
    kg: KnowledgeGraph,
    max_context_tokens: int = 256,
) -> list[TrainingInstance]:
    if stage not in STAGES:
        raise ValueError(f"unknown stage {stage!r}")
    item_set = set(kg.item_ids)
    out = []
    for conv in corpus.conversations:
        for idx, turn in enumerate(conv.turns):
            if turn.speaker != "system" or idx == 0:
                continue
            blocks = _truncate_blocks(_context_blocks(conv.turns[:idx]), max_context_tokens)
            if not blocks:
                continue
            context_tokens = [t for b in blocks for t in b[0]]
            context_entities = list(dict.fromkeys(e for b in blocks for e in b[1]))
            template, items = make_template(turn, item_set)
            inst = TrainingInstance(
                conversation_id=conv.id,
                turn_index=idx,
                context_tokens=context_tokens,
                context_entities=context_entities,
                target_response=list(turn.tokens),
                target_template=template,
                target_items=items,
                target_entities=list(dict.fromkeys(turn.entity_mentions)),
            )
            if stage == "fuse_pretrain" and not inst.target_entities:
                continue
            if stage == "recommendation" and not inst.target_items:
                continue
            out.append(inst)
    return out


def split_corpus(
    corpus: DialogueCorpus,
    ratios: tuple[float, float, float] = (0.8, 0.1, 0.1),
    seed: int = 0,
) -> dict[str, DialogueCorpus]:
    if abs(sum(ratios) - 1.0) > 1e-9:
        raise ValueError("split ratios must sum to 1")
    order = list(range(len(corpus.conversations)))
    random.Random(seed).shuffle(order)
    n = len(order)
    n_train = round(ratios[0] * n)
    n_valid = round(ratios[1] * n)
    parts = {
        "train": order[:n_train],
        "valid": order[n_train : n_train + n_valid],
        "test": order[n_train + n_valid :],
    }
    return {
        name: DialogueCorpus([corpus.conversations[i] for i in sorted(idxs)])
        for name, idxs in parts.items()
    }


def sample_conversations(
    corpus: DialogueCorpus, proportion: float, seed: int
) -> DialogueCorpus:
    """Seed-deterministic sample of whole conversations for the scarcity sweep."""
    if not 0 < proportion <= 1:
        raise ValueError("proportion must be in (0, 1]")
    n = len(corpus.conversations)
    k = max(1, round(proportion * n))
    if k >= n:
        return DialogueCorpus(list(corpus.conversations))
    idxs = sorted(random.Random(seed).sample(range(n), k))
    return DialogueCorpus([corpus.conversations[i] for i in idxs])
