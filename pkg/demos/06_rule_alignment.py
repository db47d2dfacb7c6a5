#!/usr/bin/env python3
"""The rule pipeline on hand-built linguistic examples.

Rewriting classifies every token into OBJECT / ATTRIBUTE / RELATIONSHIP
and resolves its content parent; alignment then matches lemmas against
scene-graph labels, walking attributes through their owner object and
relationships through edges incident to aligned objects.
"""

import numpy as np

from vgram.align import Similarity, align_sentence, load_rules, rewrite
from vgram.core import (
    SceneGraph,
    SGAttribute,
    SGObject,
    SGRelationship,
    Token,
)
from vgram.data import Sentence

rules = load_rules()
print(f"loaded {len(rules)} rewriting rules in "
      f"{len({r.category for r in rules})} categories")


def sentence(words, pos, heads, labels, lemmas=None):
    lemmas = lemmas or [w.lower() for w in words]
    toks = tuple(Token(i + 1, w, 0, lem)
                 for i, (w, lem) in enumerate(zip(words, lemmas)))
    return Sentence(id="demo", image_id="img", tokens=toks, pos_tags=tuple(pos),
                    heads=tuple(heads), dep_labels=tuple(labels))


# "a brown dog sitting on a table"
s = sentence(
    ["a", "brown", "dog", "sitting", "on", "a", "table"],
    ["DT", "JJ", "NN", "VBG", "IN", "DT", "NN"],
    [3, 3, 0, 3, 4, 7, 5],
    ["det", "amod", "root", "partmod", "prep", "det", "pobj"],
    lemmas=["a", "brown", "dog", "sit", "on", "a", "table"],
)
rw = rewrite(s, rules)
print("\n'a brown dog sitting on a table' rewritten:")
for tok, t, p in zip(s.tokens, rw.types, rw.parent_of):
    print(f"   {tok.surface:<8} {t.value:<12} parent -> {s.tokens[p - 1].surface}")

scene = SceneGraph(
    "img",
    (SGObject("o1", bbox=(0, 0, 100, 90), label="dog"),
     SGObject("o2", bbox=(150, 0, 300, 90), label="table")),
    (SGAttribute("a1", owner="o1", label="brown"),
     SGAttribute("a2", owner="o2", label="plain")),
    (SGRelationship("r12", src="o1", dst="o2", label="sit"),),
)

vocab = ["dog", "table", "brown", "sit", "on"]
vectors = np.eye(5)
sim = Similarity(vocab, vectors)
_, result = align_sentence(s, scene, sim, rules)
print("\nalignment:")
for t, node in sorted(result.alignment.zero.items()):
    print(f"   token {t} ({s.tokens[t - 1].surface}) -> {node}")
for arc, fa in sorted(result.alignment.first.items()):
    print(f"   arc {arc} -> {fa.relationship} endpoints {fa.endpoints}")
if result.unaligned:
    print("   unaligned tokens:", result.unaligned)
