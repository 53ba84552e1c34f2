"""Synthetic dialogue corpus + knowledge graph generator for desk-scale runs.

Each dialogue is grounded in one or two target items; user turns mention
attribute entities connected to the target in the KG, so the mapping from
mentioned entities to the recommended item is actually learnable.
"""

from __future__ import annotations

import json
import random
from pathlib import Path

_ADJECTIVES = [
    "silver", "crimson", "lunar", "golden", "velvet", "electric", "hidden",
    "broken", "endless", "quiet", "savage", "frozen", "burning", "midnight",
    "distant", "iron", "paper", "wild", "gentle", "solar",
]
_NOUNS = [
    "river", "garden", "empire", "signal", "harbor", "mirror", "compass",
    "tower", "orchid", "falcon", "lantern", "canyon", "archive", "voyage",
    "meadow", "circuit", "summit", "tide", "ember", "prism",
]

_USER_OPENERS = [
    "hi i am looking for a film",
    "hello can you suggest something to watch",
    "hey i want a movie recommendation",
    "good evening i need a film for tonight",
]
_USER_PREF = [
    "i really enjoy {a}",
    "something about {a} would be great",
    "i love {a} and {b}",
    "maybe {a} or perhaps {b}",
    "anything with {a} works for me",
]
_SYSTEM_ASK = [
    "do you also like {a} ?",
    "are you interested in {a} ?",
    "would {a} be fine too ?",
    "how do you feel about {a} ?",
]
_SYSTEM_REC = [
    "you should watch {item} it features {a}",
    "i recommend {item} since you like {a}",
    "try {item} it is all about {a}",
    "have you seen {item} ? it has plenty of {a}",
]
_SYSTEM_CHAT = [
    "great choice happy watching",
    "sure tell me more about what you like",
    "that sounds fun",
]
_USER_ACCEPT = [
    "thanks i will check it out",
    "sounds good thank you",
    "nice that could work",
]


def _entity_names(n_items: int, n_entities: int, rng: random.Random) -> dict[int, str]:
    names: dict[int, str] = {}
    used = set()
    for i in range(n_items):
        while True:
            name = f"{rng.choice(_ADJECTIVES)} {rng.choice(_NOUNS)} {i}"
            if name not in used:
                used.add(name)
                break
        names[i] = name
    for e in range(n_items, n_entities):
        names[e] = f"topic{e}"
    return names


def generate_dataset(
    out_dir,
    n_dialogs: int = 200,
    n_items: int = 50,
    n_entities: int = 100,
    n_relations: int = 3,
    seed: int = 0,
) -> dict:
    """Write corpus.jsonl, kg.tsv, entities.tsv and manifest.json; return the manifest."""
    if n_items < 2 or n_entities <= n_items or n_relations < 1:
        raise ValueError("need n_items >= 2, n_entities > n_items, n_relations >= 1")
    rng = random.Random(seed)
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)

    names = _entity_names(n_items, n_entities, rng)
    attrs = list(range(n_items, n_entities))

    # item -> attribute links, 2..4 per item across relations
    triples = set()
    item_attrs: dict[int, list[int]] = {}
    for item in range(n_items):
        linked = rng.sample(attrs, k=rng.randint(2, min(4, len(attrs))))
        item_attrs[item] = linked
        for a in linked:
            triples.add((item, rng.randrange(n_relations), a))
    triple_list = sorted(triples)

    conversations = []
    n_utterances = 0
    items_mentioned = set()
    for d in range(n_dialogs):
        item = rng.randrange(n_items)
        pool = item_attrs[item]
        a1 = names[rng.choice(pool)]
        a2 = names[rng.choice(pool)]
        turns = [
            {"speaker": "user", "text": rng.choice(_USER_OPENERS), "items": []},
            {
                "speaker": "user",
                "text": rng.choice(_USER_PREF).format(a=a1, b=a2),
                "items": [],
            },
        ]
        if rng.random() < 0.5:
            turns.append(
                {
                    "speaker": "system",
                    "text": rng.choice(_SYSTEM_ASK).format(a=a2),
                    "items": [],
                }
            )
            turns.append(
                {
                    "speaker": "user",
                    "text": rng.choice(_USER_PREF).format(a=a1, b=a2),
                    "items": [],
                }
            )
        turns.append(
            {
                "speaker": "system",
                "text": rng.choice(_SYSTEM_REC).format(item=names[item], a=a1),
                "items": [item],
            }
        )
        items_mentioned.add(item)
        turns.append({"speaker": "user", "text": rng.choice(_USER_ACCEPT), "items": []})
        if rng.random() < 0.3:
            turns.append(
                {"speaker": "system", "text": rng.choice(_SYSTEM_CHAT), "items": []}
            )
        n_utterances += len(turns)
        conversations.append({"id": f"dlg{d:05d}", "turns": turns})

    with open(out_dir / "corpus.jsonl", "w") as fh:
        for conv in conversations:
            fh.write(json.dumps(conv) + "\n")
    with open(out_dir / "kg.tsv", "w") as fh:
        for h, r, t in triple_list:
            fh.write(f"{h}\t{r}\t{t}\n")
    with open(out_dir / "entities.tsv", "w") as fh:
        for eid in range(n_entities):
            fh.write(f"{eid}\t{names[eid]}\t{int(eid < n_items)}\n")

    manifest = {
        "seed": seed,
        "n_dialogs": n_dialogs,
        "n_items": n_items,
        "n_entities": n_entities,
        "n_relations": n_relations,
        "n_utterances": n_utterances,
        "n_items_mentioned": len(items_mentioned),
        "n_triples": len(triple_list),
    }
    (out_dir / "manifest.json").write_text(json.dumps(manifest, indent=2))
    return manifest
