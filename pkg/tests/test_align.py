import numpy as np
import pytest

from vgram.align import (
    Similarity,
    align_dt_sg,
    align_sentence,
    classify_types,
    load_rules,
    parse_rules,
    rewrite,
)
from vgram.core import (
    NodeType,
    SceneGraph,
    SGAttribute,
    SGObject,
    SGRelationship,
)
from vgram.data import Sentence
from vgram.core import Token


def sent(words, pos, heads, labels, sid="s0", image="img0", lemmas=None):
    lemmas = lemmas or [w.lower() for w in words]
    tokens = tuple(Token(i + 1, w, 0, lem) for i, (w, lem) in enumerate(zip(words, lemmas)))
    return Sentence(id=sid, image_id=image, tokens=tokens, pos_tags=tuple(pos),
                    heads=tuple(heads), dep_labels=tuple(labels))


@pytest.fixture(scope="module")
def rules():
    return load_rules()


@pytest.fixture()
def sim():
    vocab = ["dog", "puppy", "table", "brown", "chase", "cat"]
    vecs = np.eye(6)
    vecs[1] = np.array([0.9, 0.1, 0, 0, 0, 0])  # puppy close to dog
    return Similarity(vocab, vecs)


class TestRuleFile:
    def test_default_category_counts(self, rules):
        counts = {}
        for r in rules:
            counts[r.category] = counts.get(r.category, 0) + 1
        assert counts == {"OBJ-ATTR": 7, "REL-OBJ": 12, "OBJ-OBJ": 1,
                          "OBJ-REL": 10, "FUNCTION": 22}

    def test_unique_ids_and_order(self, rules):
        ids = [r.id for r in rules]
        assert len(ids) == len(set(ids))

    def test_parse_rejects_bad_lines(self):
        with pytest.raises(ValueError, match="5 fields"):
            parse_rules("OBJ-ATTR | amod | *")
        with pytest.raises(ValueError, match="category"):
            parse_rules("WHAT | amod | * | * | type=OBJECT")
        with pytest.raises(ValueError, match="parent"):
            parse_rules("FUNCTION | det | * | * | parent=nowhere")


class TestClassifyTypes:
    def test_brown_dog(self, rules):
        # "a brown dog": det + amod under the noun head
        s = sent(["a", "brown", "dog"], ["DT", "JJ", "NN"], [3, 3, 0],
                 ["det", "amod", "root"])
        types, directives, matched, warnings = classify_types(s, rules)
        assert types[1] is NodeType.ATTRIBUTE
        assert types[2] is NodeType.OBJECT
        assert directives == ["head", "head", "self"]
        assert not warnings

    def test_acomp_is_attribute(self, rules):
        s = sent(["the", "dog", "is", "brown"], ["DT", "NN", "VBZ", "JJ"],
                 [2, 3, 0, 3], ["det", "nsubj", "root", "acomp"])
        types, directives, _, _ = classify_types(s, rules)
        assert types[3] is NodeType.ATTRIBUTE
        assert directives[3] == "subject"

    def test_sitting_is_relationship(self, rules):
        # "drinks sitting on a table"
        s = sent(["drinks", "sitting", "on", "a", "table"],
                 ["NNS", "VBG", "IN", "DT", "NN"],
                 [0, 1, 2, 5, 3],
                 ["root", "partmod", "prep", "det", "pobj"])
        types, _, _, _ = classify_types(s, rules)
        assert types[1] is NodeType.RELATIONSHIP
        assert types[2] is NodeType.RELATIONSHIP
        assert types[0] is NodeType.OBJECT
        assert types[4] is NodeType.OBJECT

    def test_every_token_gets_a_type(self, rules):
        s = sent(["x", "mystery", "dog"], ["XX", "YY", "NN"], [3, 3, 0],
                 ["zzz", "qqq", "root"])
        types, directives, matched, warnings = classify_types(s, rules)
        assert len(types) == 3
        assert all(t is not None for t in types)
        assert warnings  # unknown labels reported


class TestParents:
    def test_determiner_points_to_noun(self, rules):
        s = sent(["a", "brown", "dog"], ["DT", "JJ", "NN"], [3, 3, 0],
                 ["det", "amod", "root"])
        rw = rewrite(s, rules)
        assert rw.parent_of == (3, 3, 3)

    def test_acomp_resolves_through_subject(self, rules):
        s = sent(["the", "dog", "is", "brown"], ["DT", "NN", "VBZ", "JJ"],
                 [2, 3, 0, 3], ["det", "nsubj", "root", "acomp"])
        rw = rewrite(s, rules)
        assert rw.parent_of[3] == 2  # brown -> dog, not the copula

    def test_parent_chase_terminates_in_one_hop(self, rules):
        s = sent(["drinks", "sitting", "on", "a", "table"],
                 ["NNS", "VBG", "IN", "DT", "NN"],
                 [0, 1, 2, 5, 3],
                 ["root", "partmod", "prep", "det", "pobj"])
        rw = rewrite(s, rules)
        for d in range(1, 6):
            p = rw.parent_of[d - 1]
            assert rw.parent_of[p - 1] == p  # idempotent after one chase

    def test_totality(self, rules):
        s = sent(["x", "of", "dog"], ["XX", "IN", "NN"], [3, 3, 0],
                 ["zzz", "prep", "root"])
        rw = rewrite(s, rules)
        assert len(rw.types) == 3
        assert all(1 <= p <= 3 for p in rw.parent_of)


def two_dog_scene():
    objects = (
        SGObject("o1", bbox=(0, 0, 10, 10), label="dog"),
        SGObject("o2", bbox=(20, 0, 30, 10), label="dog"),
        SGObject("o3", bbox=(40, 0, 50, 10), label="cat"),
    )
    attributes = (
        SGAttribute("a1", owner="o1", label="brown"),
        SGAttribute("a2", owner="o2", label="white"),
        SGAttribute("a3", owner="o3", label="plain"),
    )
    rels = (SGRelationship("r23", src="o2", dst="o3", label="chase"),)
    return SceneGraph("img0", objects, attributes, rels)


class TestAlignment:
    def test_exact_object_match(self, rules, sim):
        sg = SceneGraph("img0", (SGObject("o1", bbox=(0, 0, 1, 1), label="dog"),),
                        (SGAttribute("a1", owner="o1", label="plain"),))
        s = sent(["dog"], ["NN"], [0], ["root"])
        _, res = align_sentence(s, sg, sim, rules)
        assert res.alignment.zero[1] == "o1"

    def test_attribute_resolves_in_owner_subtree(self, rules, sim):
        sg = two_dog_scene()
        s = sent(["the", "brown", "dog"], ["DT", "JJ", "NN"], [3, 3, 0],
                 ["det", "amod", "root"])
        rw = rewrite(s, rules)
        res = align_dt_sg(s, rw, sg, sim)
        dog_node = res.alignment.zero[3]
        brown_node = res.alignment.zero[2]
        attr = sg.node(brown_node)
        assert attr.owner == dog_node
        # determiner shares the object's grounding
        assert res.alignment.zero[1] == dog_node

    def test_two_dogs_disambiguated_by_relationship(self, rules, sim):
        sg = two_dog_scene()
        s = sent(["dog", "chases", "cat"], ["NN", "VBZ", "NN"],
                 [2, 0, 2], ["nsubj", "root", "dobj"],
                 lemmas=["dog", "chase", "cat"])
        rw = rewrite(s, rules)
        res = align_dt_sg(s, rw, sg, sim)
        assert res.alignment.zero[1] == "o2"  # the dog that chases
        assert res.alignment.zero[3] == "o3"

    def test_two_dogs_tie_breaks_by_node_id(self, rules, sim):
        sg = two_dog_scene()
        s = sent(["dog"], ["NN"], [0], ["root"])
        _, res = align_sentence(s, sg, sim, rules)
        assert res.alignment.zero[1] == "o1"

    def test_relationship_token_matches_incident_edge(self, rules, sim):
        sg = two_dog_scene()
        s = sent(["dog", "chases", "cat"], ["NN", "VBZ", "NN"],
                 [2, 0, 2], ["nsubj", "root", "dobj"],
                 lemmas=["dog", "chase", "cat"])
        rw = rewrite(s, rules)
        res = align_dt_sg(s, rw, sg, sim)
        assert res.alignment.zero[2] == "r23"

    def test_first_order_arcs_map_to_relationships(self, rules, sim):
        sg = two_dog_scene()
        s = sent(["dog", "chases", "cat"], ["NN", "VBZ", "NN"],
                 [2, 0, 2], ["nsubj", "root", "dobj"])
        rw = rewrite(s, rules)
        res = align_dt_sg(s, rw, sg, sim)
        for arc, fa in res.alignment.first.items():
            rel = sg.node(fa.relationship)
            ends = {res.alignment.zero[arc[0]], res.alignment.zero[arc[1]]}
            assert ends <= {rel.src, rel.dst, rel.id}

    def test_embedding_similarity_fallback(self, rules, sim):
        sg = SceneGraph("img0", (SGObject("o1", bbox=(0, 0, 1, 1), label="dog"),),
                        (SGAttribute("a1", owner="o1", label="plain"),))
        s = sent(["puppy"], ["NN"], [0], ["root"])
        _, res = align_sentence(s, sg, sim, rules)
        assert res.alignment.zero[1] == "o1"  # cosine 0.9+ beats threshold

    def test_below_threshold_unaligned(self, rules, sim):
        sg = SceneGraph("img0", (SGObject("o1", bbox=(0, 0, 1, 1), label="cat"),),
                        (SGAttribute("a1", owner="o1", label="plain"),))
        s = sent(["table"], ["NN"], [0], ["root"])
        _, res = align_sentence(s, sg, sim, rules)
        assert 1 not in res.alignment.zero
        assert res.unaligned == [1]

    def test_unlabeled_graph_rejected(self, rules, sim):
        sg = SceneGraph("img0", (SGObject("o1", bbox=(0, 0, 1, 1)),),
                        (SGAttribute("a1", owner="o1"),))
        s = sent(["dog"], ["NN"], [0], ["root"])
        rw = rewrite(s, rules)
        with pytest.raises(ValueError, match="no labels"):
            align_dt_sg(s, rw, sg, sim)

    def test_metadata_labels_reconstruction(self, rules, sim):
        sg = two_dog_scene()
        s = sent(["dog"], ["NN"], [0], ["root"])
        _, res = align_sentence(s, sg, sim, rules)
        assert res.alignment.meta["ruleset"] == "reconstructed-defaults"
