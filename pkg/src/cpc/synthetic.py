"""Templated curated-dataset records for exercising the trainer.

Each context is five sentences about one person, each on a different
attribute.  The question asks about one attribute without sharing any word
with the matching sentence except the person's name, which every sentence
contains, so lexical overlap alone cannot pick the positive.
"""

from __future__ import annotations

import numpy as np

# (question template, sentence template, values)
ATTRIBUTES = [
    ("Which colour did {e} choose?", "{e} painted the fence {v}.", ["red", "blue", "green", "yellow", "purple", "orange"]),
    ("Where does {e} live?", "{e} resides in {v}.", ["Paris", "Lima", "Oslo", "Cairo", "Hanoi", "Quito"]),
    ("What is the occupation of {e}?", "{e} earns money as a {v}.", ["baker", "pilot", "nurse", "farmer", "lawyer", "chemist"]),
    ("Which animal does {e} keep at home?", "{e} owns a small {v}.", ["dog", "cat", "parrot", "rabbit", "turtle", "hamster"]),
    ("What does {e} like to eat?", "{e} enjoys {v} for dinner.", ["pasta", "soup", "rice", "fish", "curry", "salad"]),
    ("Which game does {e} play?", "{e} practises {v} every weekend.", ["tennis", "chess", "golf", "rugby", "hockey", "squash"]),
    ("How old is {e}?", "{e} turned {v} last spring.", ["twenty", "thirty", "forty", "fifty", "sixty", "seventy"]),
    ("Which instrument can {e} perform?", "{e} studied {v} for years.", ["violin", "piano", "flute", "cello", "drums", "guitar"]),
]

NAMES = [
    "Anna", "Boris", "Clara", "Dmitri", "Elena", "Farid", "Greta", "Hugo", "Ines", "Jonas", "Kira", "Luca",
    "Maya", "Nils", "Olga", "Pavel", "Quinn", "Rosa", "Sven", "Tara", "Umar", "Vera", "Wim", "Xena",
]


def synthetic_records(n: int = 64, seed: int = 0, M: int = 2, sentences: int = 5) -> list[dict]:
    """``n`` records in the curated-dataset JSONL schema."""
    if not 1 <= M < sentences <= len(ATTRIBUTES):
        raise ValueError("need 1 <= M < sentences <= number of attributes")
    rng = np.random.default_rng(seed)
    records = []
    for k in range(n):
        name = NAMES[int(rng.integers(len(NAMES)))]
        attrs = rng.choice(len(ATTRIBUTES), size=sentences, replace=False).tolist()
        lines, picked = [], []
        for a in attrs:
            _, tmpl, values = ATTRIBUTES[a]
            picked.append(values[int(rng.integers(len(values)))])
            lines.append(tmpl.format(e=name, v=picked[-1]))
        pos = int(rng.integers(sentences))
        others = [i for i in range(sentences) if i != pos]
        negs = sorted(rng.choice(others, size=M, replace=False).tolist())
        question = ATTRIBUTES[attrs[pos]][0].format(e=name)
        records.append(
            {
                "id": f"syn-{seed}-{k}",
                "context": " ".join(lines),
                "question": question,
                "answer": picked[pos],
                "positive": {"start_sent": pos},
                "negatives": [{"start_sent": j} for j in negs],
                "scores": {"eta": 1.0, "neg_cos": [0.0] * M, "neg_kl": [0.0] * M},
            }
        )
    return records
