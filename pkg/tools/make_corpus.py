#!/usr/bin/env python3
"""Regenerate the bundled default corpus (src/apiq/data/corpus.txt).

Produces ~100KB of deterministic synthetic prose: simple grammar over a
fixed vocabulary, so the file is self-contained and unencumbered while
still having word- and character-level structure a byte model can learn.
"""

import random
from pathlib import Path

SUBJECTS = [
    "the miller", "a traveler", "the old gardener", "the ferryman",
    "a young scribe", "the lamplighter", "the weaver", "an astronomer",
    "the clockmaker", "a fisherman", "the baker", "the cartographer",
    "a shepherd", "the bell ringer", "the glassblower", "an apprentice",
    "the bookbinder", "a stonemason", "the harbor master", "the tailor",
]
VERBS = [
    "watched", "remembered", "repaired", "described", "carried",
    "measured", "counted", "followed", "sketched", "collected",
    "studied", "arranged", "polished", "recorded", "traded",
    "gathered", "mended", "observed", "weighed", "copied",
]
OBJECTS = [
    "the river stones", "a worn ledger", "the northern road", "the tide tables",
    "a brass compass", "the evening light", "the market stalls", "an old map",
    "the winter stores", "a bundle of letters", "the mill wheel", "the far hills",
    "a length of rope", "the garden wall", "the morning frost", "a silver coin",
    "the harvest carts", "the low clouds", "a clay lantern", "the village green",
]
PLACES = [
    "near the bridge", "beyond the orchard", "by the southern gate",
    "under the elm trees", "along the canal", "at the edge of the moor",
    "inside the granary", "behind the chapel", "beside the quay",
    "on the high pasture", "within the old walls", "past the crossroads",
]
TIMES = [
    "at dawn", "before the rain", "through the long afternoon",
    "after the festival", "in the quiet season", "during the thaw",
    "when the bells rang", "as the fog lifted", "by late autumn",
    "on market days", "under a full moon", "in the first snow",
]
CONNECTORS = ["and", "but", "while", "because", "although", "so", "then"]


def sentence(rng: random.Random) -> str:
    parts = [rng.choice(SUBJECTS), rng.choice(VERBS), rng.choice(OBJECTS)]
    if rng.random() < 0.7:
        parts.append(rng.choice(PLACES))
    if rng.random() < 0.5:
        parts.append(rng.choice(TIMES))
    text = " ".join(parts)
    if rng.random() < 0.35:
        tail = [rng.choice(CONNECTORS), rng.choice(SUBJECTS),
                rng.choice(VERBS), rng.choice(OBJECTS)]
        if rng.random() < 0.5:
            tail.append(rng.choice(TIMES))
        text = f"{text}, {' '.join(tail)}"
    return text[0].upper() + text[1:] + rng.choice([".", ".", ".", ";", "."])


def main() -> None:
    rng = random.Random(20240207)
    out = []
    size = 0
    target = 100_000
    while size < target:
        n_sent = rng.randint(3, 7)
        para = " ".join(sentence(rng) for _ in range(n_sent))
        out.append(para)
        size += len(para) + 2
    text = "\n\n".join(out) + "\n"
    path = Path(__file__).resolve().parent.parent / "src" / "apiq" / "data" / "corpus.txt"
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(text, encoding="utf-8")
    print(f"wrote {path} ({len(text.encode('utf-8'))} bytes)")


if __name__ == "__main__":
    main()
