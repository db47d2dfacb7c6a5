"""The joint vision-language structure model.

Pipeline per image-caption pair: assemble typed visual nodes from
region features, fuse token embeddings with visual context through
cross-attention, condition a neural valence-grammar decoder on the
pooled summary, and match language contexts (tokens, arcs, triples)
against visual nodes with posterior-weighted similarity scores. The
training objective mixes the tree marginal likelihood with an in-batch
contrastive matching loss.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np

import vgram.tensor as T
from vgram import chart
from vgram.core import (
    Box,
    DependencyTree,
    FirstAlignment,
    NodeType,
    SceneGraph,
    Token,
    VLAlignment,
    second_order_arcs,
    tree_to_instances,
)
from vgram.dmv_graph import BatchCharts, inside_outside
from vgram.tensor import ParameterStore, Tensor

ATTENTION_MASK = -1.0e30


@dataclass
class ModelConfig:
    """Hyperparameters; every field has a flat config-file key."""

    tag_count: int = 8
    word_dim: int = 32
    tag_dim: int = 16
    hidden_dim: int = 32
    feat_dim: int = 32
    match_dim: int = 32
    arc_hidden: int = 32
    second_hidden: int = 32
    dec_tag_dim: int = 16
    dec_hidden: int = 32
    normalize_sim: bool = True
    identity_init: bool = False
    finetune_word_emb: bool = False
    lambda_cl: float = 0.5
    second_order: bool = True
    max_train_len: int = 20
    max_parse_len: int = 60
    seed: int = 0

    def validate(self) -> None:
        if not 0.0 <= self.lambda_cl <= 1.0:
            raise ValueError(f"lambda must be in [0, 1], got {self.lambda_cl}")
        if self.identity_init:
            dims = {self.word_dim, self.hidden_dim, self.feat_dim, self.match_dim}
            if len(dims) != 1:
                raise ValueError(
                    "identity_init needs word_dim == hidden_dim == feat_dim == match_dim")


@dataclass(frozen=True)
class VisualNode:
    """One typed visual node with enough geometry to evaluate grounding."""

    id: str
    type: NodeType
    box: Optional[Box] = None
    endpoints: Optional[tuple[Box, Box]] = None
    src: Optional[str] = None
    dst: Optional[str] = None
    owner: Optional[str] = None


@dataclass
class VisualNodeSet:
    """Canonically ordered nodes plus their feature rows; ties in any
    argmax resolve to the earlier node in this order."""

    image_id: str
    nodes: list[VisualNode]
    features: Tensor  # (V, feat_dim)

    def __len__(self) -> int:
        return len(self.nodes)

    def relationship_indices(self) -> np.ndarray:
        return np.array([k for k, nd in enumerate(self.nodes)
                         if nd.type is NodeType.RELATIONSHIP], dtype=int)


@dataclass
class SentenceBatch:
    """One same-length group ready for the forward pass."""

    word_ids: np.ndarray   # (B, n)
    tag_ids: np.ndarray    # (B, n)
    node_sets: list[VisualNodeSet]
    sentence_ids: list[str]
    trees: Optional[list[DependencyTree]] = None


def _union_box(boxes: Sequence[Box]) -> Optional[Box]:
    boxes = [b for b in boxes if b is not None]
    if not boxes:
        return None
    arr = np.asarray(boxes, dtype=float)
    return (float(arr[:, 0].min()), float(arr[:, 1].min()),
            float(arr[:, 2].max()), float(arr[:, 3].max()))


class Model:
    """Parameters plus the forward computations over them."""

    def __init__(self, config: ModelConfig, vocab: Sequence[str],
                 word_vectors: np.ndarray):
        config.validate()
        if word_vectors.shape != (len(vocab), config.word_dim):
            raise ValueError(
                f"word vectors {word_vectors.shape} do not match vocab size "
                f"{len(vocab)} and word_dim {config.word_dim}")
        self.config = config
        self.vocab = {w: i + 1 for i, w in enumerate(vocab)}  # row 0 = UNK
        self.store = ParameterStore()
        self._rng = np.random.default_rng(config.seed)
        self._build(word_vectors)

    # -- parameter construction ----------------------------------------

    def _init_normal(self, scale=0.01):
        rng = self._rng
        return lambda shape: rng.normal(0.0, scale, shape)

    def _init_fan_in(self):
        rng = self._rng
        return lambda shape: T.fan_in_uniform(rng, shape)

    def _init_zeros(self):
        return lambda shape: np.zeros(shape)

    def _build(self, word_vectors: np.ndarray) -> None:
        cfg = self.config
        unk = word_vectors.mean(axis=0, keepdims=True) if len(word_vectors) else \
            np.zeros((1, cfg.word_dim))
        table = np.concatenate([unk, word_vectors], axis=0)
        get = self.store.get
        get("embed.word", table.shape, lambda s: table,
            trainable=cfg.finetune_word_emb)
        get("embed.tag", (cfg.tag_count, cfg.tag_dim), self._init_normal())

        din = cfg.word_dim + cfg.tag_dim
        if cfg.identity_init:
            eye_block = np.concatenate(
                [np.eye(cfg.word_dim), np.zeros((cfg.tag_dim, cfg.hidden_dim))])
            get("enc.in.w", (din, cfg.hidden_dim), lambda s: eye_block)
            get("enc.in.b", (cfg.hidden_dim,), self._init_zeros())
            get("enc.attn.q", (cfg.hidden_dim, cfg.hidden_dim), self._init_fan_in())
            get("enc.attn.k", (cfg.feat_dim, cfg.hidden_dim), self._init_fan_in())
            get("enc.attn.v", (cfg.feat_dim, cfg.hidden_dim), self._init_zeros())
            get("match.ctx", (cfg.hidden_dim, cfg.match_dim), lambda s: np.eye(cfg.hidden_dim))
            get("match.vis", (cfg.feat_dim, cfg.match_dim), lambda s: np.eye(cfg.feat_dim))
        else:
            get("enc.in.w", (din, cfg.hidden_dim), self._init_fan_in())
            get("enc.in.b", (cfg.hidden_dim,), self._init_zeros())
            get("enc.attn.q", (cfg.hidden_dim, cfg.hidden_dim), self._init_fan_in())
            get("enc.attn.k", (cfg.feat_dim, cfg.hidden_dim), self._init_fan_in())
            get("enc.attn.v", (cfg.feat_dim, cfg.hidden_dim), self._init_fan_in())
            get("match.ctx", (cfg.hidden_dim, cfg.match_dim), self._init_fan_in())
            get("match.vis", (cfg.feat_dim, cfg.match_dim), self._init_fan_in())

        get("vis.attr.w1", (cfg.feat_dim, cfg.feat_dim), self._init_fan_in())
        get("vis.attr.b1", (cfg.feat_dim,), self._init_zeros())
        get("vis.attr.w2", (cfg.feat_dim, cfg.feat_dim), self._init_fan_in())
        get("vis.attr.b2", (cfg.feat_dim,), self._init_zeros())
        get("vis.rel.w1", (cfg.feat_dim, cfg.feat_dim, cfg.feat_dim), self._init_normal(0.1))
        get("vis.rel.w2", (cfg.feat_dim, cfg.feat_dim), self._init_fan_in())
        get("vis.rel.b", (cfg.feat_dim,), self._init_zeros())

        get("arc.parent.w", (cfg.hidden_dim, cfg.arc_hidden), self._init_fan_in())
        get("arc.parent.b", (cfg.arc_hidden,), self._init_zeros())
        get("arc.child.w", (cfg.hidden_dim, cfg.arc_hidden), self._init_fan_in())
        get("arc.child.b", (cfg.arc_hidden,), self._init_zeros())
        get("arc.bi.w1", (cfg.arc_hidden, cfg.match_dim, cfg.arc_hidden), self._init_normal(0.1))
        get("arc.bi.w2", (cfg.arc_hidden, cfg.match_dim), self._init_fan_in())
        get("arc.bi.b", (cfg.match_dim,), self._init_zeros())

        get("second.w1", (2 * cfg.match_dim, cfg.second_hidden), self._init_fan_in())
        get("second.b1", (cfg.second_hidden,), self._init_zeros())
        get("second.w2", (cfg.second_hidden, cfg.match_dim), self._init_fan_in())
        get("second.b2", (cfg.match_dim,), self._init_zeros())

        get("dec.tag", (cfg.tag_count, cfg.dec_tag_dim), self._init_normal())
        child_in = cfg.dec_tag_dim + 2 + cfg.hidden_dim
        get("dec.child.w1", (child_in, cfg.dec_hidden), self._init_fan_in())
        get("dec.child.b1", (cfg.dec_hidden,), self._init_zeros())
        get("dec.child.w2", (cfg.dec_hidden, cfg.tag_count), self._init_fan_in())
        get("dec.child.b2", (cfg.tag_count,), self._init_zeros())
        stop_in = cfg.dec_tag_dim + 2 + 2 + cfg.hidden_dim
        get("dec.stop.w1", (stop_in, cfg.dec_hidden), self._init_fan_in())
        get("dec.stop.b1", (cfg.dec_hidden,), self._init_zeros())
        get("dec.stop.w2", (cfg.dec_hidden, 2), self._init_fan_in())
        get("dec.stop.b2", (2,), self._init_zeros())
        get("dec.root.w1", (cfg.hidden_dim, cfg.dec_hidden), self._init_fan_in())
        get("dec.root.b1", (cfg.dec_hidden,), self._init_zeros())
        get("dec.root.w2", (cfg.dec_hidden, cfg.tag_count), self._init_fan_in())
        get("dec.root.b2", (cfg.tag_count,), self._init_zeros())

    # -- vocabulary ----------------------------------------------------

    def word_id(self, word: str) -> int:
        return self.vocab.get(word, 0)

    def word_ids(self, tokens: Sequence[Token]) -> np.ndarray:
        return np.array([self.word_id(t.surface) for t in tokens], dtype=int)

    def embed_label(self, label: str) -> np.ndarray:
        return self.store["embed.word"].numpy()[self.word_id(label)]

    # -- visual side -----------------------------------------------------

    def build_visual_nodes(self, image_id: str,
                           regions: Sequence[tuple[Box, np.ndarray]]) -> VisualNodeSet:
        """Typed node set over M proposals: M objects, M attributes,
        M(M-1) ordered-pair relationships, one full-image dummy node."""
        if not regions:
            raise ValueError(f"{image_id}: empty region list")
        feats = np.stack([f for _, f in regions])
        if feats.shape[1] != self.config.feat_dim:
            raise ValueError(f"{image_id}: feature dim {feats.shape[1]} != "
                             f"configured {self.config.feat_dim}")
        boxes = [b for b, _ in regions]
        m = len(regions)
        obj = Tensor(feats)
        attr = T.mlp(obj, [(self.store["vis.attr.w1"], self.store["vis.attr.b1"]),
                           (self.store["vis.attr.w2"], self.store["vis.attr.b2"])])
        nodes = [VisualNode(f"obj:{k}", NodeType.OBJECT, box=boxes[k]) for k in range(m)]
        nodes += [VisualNode(f"attr:{k}", NodeType.ATTRIBUTE, box=boxes[k], owner=f"obj:{k}")
                  for k in range(m)]
        parts = [obj, attr]
        if m > 1:
            rel = T.biaffine_features(
                T.reshape(obj, (1, m, -1)), T.reshape(obj, (1, m, -1)),
                self.store["vis.rel.w1"], self.store["vis.rel.w2"],
                self.store["vis.rel.b"])[0]
            pair_rows, pair_cols = [], []
            for i in range(m):
                for j in range(m):
                    if i != j:
                        pair_rows.append(i)
                        pair_cols.append(j)
                        nodes.append(VisualNode(
                            f"rel:{i}:{j}", NodeType.RELATIONSHIP,
                            endpoints=(boxes[i], boxes[j]), src=f"obj:{i}", dst=f"obj:{j}"))
            parts.append(rel[np.array(pair_rows), np.array(pair_cols)])
        dummy = T.tmean(obj, axis=0, keepdims=True)
        nodes.append(VisualNode("img", NodeType.OBJECT, box=_union_box(boxes)))
        parts.append(dummy)
        return VisualNodeSet(image_id, nodes, T.concat(parts, axis=0))

    def build_visual_nodes_gold(self, sg: SceneGraph,
                                regions: Optional[Sequence[tuple[Box, np.ndarray]]] = None
                                ) -> VisualNodeSet:
        """Node set over a gold scene graph, the gold-reference regime.

        Object features come from the region file when provided (index
        aligned with the graph's object order), otherwise from the label
        embedding; attribute and relationship features always embed
        their labels.
        """
        obj_boxes = {o.id: o.bbox for o in sg.objects}
        nodes, feats = [], []
        for idx, o in enumerate(sg.objects):
            if regions is not None and idx < len(regions):
                feat = np.asarray(regions[idx][1], dtype=float)
            elif o.feature is not None:
                feat = o.feature
            else:
                feat = self.embed_label(o.label or "")
            nodes.append(VisualNode(o.id, NodeType.OBJECT, box=o.bbox))
            feats.append(feat)
        for a in sg.attributes:
            nodes.append(VisualNode(a.id, NodeType.ATTRIBUTE,
                                    box=obj_boxes.get(a.owner), owner=a.owner))
            feats.append(a.feature if a.feature is not None
                         else self.embed_label(a.label or ""))
        for r in sg.relationships:
            nodes.append(VisualNode(
                r.id, NodeType.RELATIONSHIP, src=r.src, dst=r.dst,
                endpoints=(obj_boxes.get(r.src), obj_boxes.get(r.dst))))
            feats.append(r.feature if r.feature is not None
                         else self.embed_label(r.label or ""))
        mat = np.stack(feats)
        if mat.shape[1] != self.config.feat_dim:
            raise ValueError(f"{sg.image_id}: gold feature dim {mat.shape[1]} != "
                             f"configured {self.config.feat_dim}")
        dummy = mat[:len(sg.objects)].mean(axis=0, keepdims=True)
        nodes.append(VisualNode("img", NodeType.OBJECT,
                                box=_union_box([o.bbox for o in sg.objects])))
        return VisualNodeSet(sg.image_id, nodes,
                             T.concat([Tensor(mat), Tensor(dummy)], axis=0))

    def _pad_nodes(self, node_sets: list[VisualNodeSet]
                   ) -> tuple[Tensor, np.ndarray]:
        """Stack variable-size node features, masking padded slots."""
        vmax = max(len(ns) for ns in node_sets)
        dim = self.config.feat_dim
        padded, mask = [], np.zeros((len(node_sets), 1, vmax))
        for b, ns in enumerate(node_sets):
            v = len(ns)
            if v < vmax:
                padded.append(T.concat([ns.features, Tensor(np.zeros((vmax - v, dim)))],
                                       axis=0))
                mask[b, 0, v:] = ATTENTION_MASK
            else:
                padded.append(ns.features)
        return T.stack(padded, axis=0), mask

    # -- encoder ---------------------------------------------------------

    def encode(self, word_ids: np.ndarray, tag_ids: np.ndarray,
               node_sets: list[VisualNodeSet]) -> tuple[Tensor, Tensor]:
        """Fuse token embeddings with visual context.

        Returns per-token contexts (B, n, hidden) and the mean-pooled
        joint summary (B, hidden). Each token attends over all visual
        nodes of its image; the attended value is added residually, so
        zero value projections reduce to the pure text pathway.
        """
        batch, n = word_ids.shape
        w = T.take(self.store["embed.word"], word_ids.reshape(-1))
        g = T.take(self.store["embed.tag"], tag_ids.reshape(-1))
        x = T.concat([w, g], axis=1)
        inputs = T.linear(x, self.store["enc.in.w"], self.store["enc.in.b"])
        inputs = T.reshape(inputs, (batch, n, self.config.hidden_dim))
        feats, mask = self._pad_nodes(node_sets)
        q = T.matmul(inputs, self.store["enc.attn.q"])
        k = T.matmul(feats, self.store["enc.attn.k"])
        v = T.matmul(feats, self.store["enc.attn.v"])
        attended = T.attention(q, k, v, mask)
        contexts = T.add(inputs, attended)
        summary = T.tmean(contexts, axis=1)
        return contexts, summary

    # -- decoder ---------------------------------------------------------

    def decoder_scores(self, tag_ids: np.ndarray, summary: Tensor
                       ) -> tuple[Tensor, Tensor, Tensor, Tensor]:
        """Valence-grammar score tables conditioned on the joint summary.

        Attachment scores are log child-tag probabilities given the head
        tag and arc direction; stop/continue pairs are two-way
        log-softmaxes per (head tag, direction, valence); root scores
        are log tag probabilities from the summary. Tags are observed,
        only the tree is latent.
        """
        cfg = self.config
        batch, n = tag_ids.shape
        tcount = cfg.tag_count
        if tag_ids.min() < 0 or tag_ids.max() >= tcount:
            raise ValueError("tag id out of vocabulary")
        store = self.store

        rows = batch * tcount * 2
        b_idx = np.repeat(np.arange(batch), tcount * 2)
        tag_idx = np.tile(np.repeat(np.arange(tcount), 2), batch)
        dir_onehot = np.tile(np.eye(2), (batch * tcount, 1))
        child_in = T.concat([
            T.take(store["dec.tag"], tag_idx),
            Tensor(dir_onehot),
            T.take(summary, b_idx),
        ], axis=1)
        child = T.mlp(child_in, [(store["dec.child.w1"], store["dec.child.b1"]),
                                 (store["dec.child.w2"], store["dec.child.b2"])])
        child_tbl = T.log_softmax(T.reshape(child, (batch, tcount, 2, tcount)), axis=-1)

        b_idx = np.repeat(np.arange(batch), tcount * 4)
        tag_idx = np.tile(np.repeat(np.arange(tcount), 4), batch)
        dir_onehot = np.tile(np.repeat(np.eye(2), 2, axis=0), (batch * tcount, 1))
        val_onehot = np.tile(np.eye(2), (batch * tcount * 2, 1))
        stop_in = T.concat([
            T.take(store["dec.tag"], tag_idx),
            Tensor(dir_onehot),
            Tensor(val_onehot),
            T.take(summary, b_idx),
        ], axis=1)
        stop_out = T.mlp(stop_in, [(store["dec.stop.w1"], store["dec.stop.b1"]),
                                   (store["dec.stop.w2"], store["dec.stop.b2"])])
        stop_tbl = T.log_softmax(T.reshape(stop_out, (batch, tcount, 2, 2, 2)), axis=-1)

        root_out = T.mlp(summary, [(store["dec.root.w1"], store["dec.root.b1"]),
                                   (store["dec.root.w2"], store["dec.root.b2"])])
        root_tbl = T.log_softmax(root_out, axis=-1)

        # gather per-sentence tables in chart layout
        pairs = [(h, d) for h in range(1, n + 1) for d in range(1, n + 1) if h != d]
        bb = np.arange(batch)[:, None]
        if pairs:
            h_pos = np.array([h - 1 for h, _ in pairs])
            d_pos = np.array([d - 1 for _, d in pairs])
            dirs = np.array([chart.RIGHT if d > h else chart.LEFT for h, d in pairs])
            vals = child_tbl[bb, tag_ids[:, h_pos], dirs[None, :], tag_ids[:, d_pos]]
            attach = T.put_at(vals, (bb, h_pos[None, :] + 1, d_pos[None, :] + 1),
                              (batch, n + 1, n + 1))
        else:
            attach = Tensor(np.zeros((batch, n + 1, n + 1)))

        gathered = stop_tbl[bb, tag_ids]                      # (B, n, 2, 2, 2)
        zero_head = Tensor(np.zeros((batch, 1, 2, 2)))
        stop = T.concat([zero_head, gathered[:, :, :, :, 0]], axis=1)
        cont = T.concat([zero_head, gathered[:, :, :, :, 1]], axis=1)
        root = T.concat([Tensor(np.zeros((batch, 1))), root_tbl[bb, tag_ids]], axis=1)
        return attach, stop, cont, root

    def charts(self, tag_ids: np.ndarray, summary: Tensor,
               need_posteriors: bool = True) -> BatchCharts:
        attach, stop, cont, root = self.decoder_scores(tag_ids, summary)
        return inside_outside(attach, stop, cont, root, need_posteriors)

    def sentence_scores(self, tag_ids: Sequence[int], summary: Tensor) -> chart.DmvScores:
        """Plain-numpy score tables for one sentence (Viterbi decoding)."""
        attach, stop, cont, root = self.decoder_scores(
            np.asarray(tag_ids, dtype=int)[None], summary)
        return chart.DmvScores(attach=attach.numpy()[0], stop=stop.numpy()[0],
                               cont=cont.numpy()[0], root=root.numpy()[0])

    # -- contexts and matching -------------------------------------------

    def project_contexts(self, contexts: Tensor) -> Tensor:
        return T.matmul(contexts, self.store["match.ctx"])

    def project_nodes(self, features: Tensor) -> Tensor:
        return T.matmul(features, self.store["match.vis"])

    def arc_contexts(self, contexts: Tensor) -> Tensor:
        """Pairwise arc representations (B, n, n, match_dim); entry
        [b, i, j] encodes a head i+1 -> dependent j+1 dependency."""
        parent = T.relu(T.linear(contexts, self.store["arc.parent.w"],
                                 self.store["arc.parent.b"]))
        child = T.relu(T.linear(contexts, self.store["arc.child.w"],
                                self.store["arc.child.b"]))
        return T.biaffine_features(parent, child, self.store["arc.bi.w1"],
                                   self.store["arc.bi.w2"], self.store["arc.bi.b"])

    def second_contexts(self, arc_ctx_rows: Tensor) -> Tensor:
        """Compose pairs of arc contexts (rows already gathered and
        concatenated to 2 * match_dim) through the shared composer."""
        return T.mlp(arc_ctx_rows,
                     [(self.store["second.w1"], self.store["second.b1"]),
                      (self.store["second.w2"], self.store["second.b2"])])

    def matching(self, contexts: Tensor, node_feats: Tensor,
                 posteriors: Tensor | np.ndarray
                 ) -> tuple[Tensor, Tensor, Tensor]:
        """Similarity of each context to each node, to the image, and
        the posterior-weighted image score.

        ``contexts`` (C, match_dim) and ``node_feats`` (V, match_dim)
        are L2-normalized first when ``normalize_sim`` is on.
        """
        if node_feats.shape[0] == 0:
            raise ValueError("empty visual node set")
        if self.config.normalize_sim:
            contexts = T.l2_normalize(contexts)
            node_feats = T.l2_normalize(node_feats)
        sim = T.matmul(contexts, T.swapaxes(node_feats, -1, -2))
        sim_image = T.tmax(sim, axis=-1)
        sim_plus = T.mul(sim_image, posteriors)
        return sim, sim_image, sim_plus

    # -- instance sets ----------------------------------------------------

    @staticmethod
    def _all_pairs(n: int) -> list[tuple[int, int]]:
        return [(h, d) for h in range(1, n + 1) for d in range(1, n + 1) if h != d]

    @staticmethod
    def _all_triples(n: int) -> list[tuple[tuple[int, int], tuple[int, int]]]:
        """Candidate second-order patterns as their two arcs: chains
        g->h->d and sibling pairs d1<-h->d2 (d1 < d2)."""
        triples = []
        for g in range(1, n + 1):
            for h in range(1, n + 1):
                if h == g:
                    continue
                for d in range(1, n + 1):
                    if d not in (g, h):
                        triples.append(((g, h), (h, d)))
        for h in range(1, n + 1):
            deps = [d for d in range(1, n + 1) if d != h]
            for a in range(len(deps)):
                for b in range(a + 1, len(deps)):
                    triples.append(((h, deps[a]), (h, deps[b])))
        return triples

    def batch_contexts(self, contexts: Tensor
                       ) -> tuple[Tensor, Tensor, list[tuple[int, int]],
                                  list[tuple[tuple[int, int], tuple[int, int]]]]:
        """Projected token, arc, and second-order contexts plus the
        index lists describing rows beyond the first n."""
        batch, n, _ = contexts.shape
        ctx_tok = self.project_contexts(contexts)
        arc_tbl = self.arc_contexts(contexts)
        pairs = self._all_pairs(n)
        parts = [ctx_tok]
        if pairs:
            h_idx = np.array([h - 1 for h, _ in pairs])
            d_idx = np.array([d - 1 for _, d in pairs])
            arc_rows = arc_tbl[:, h_idx, d_idx]
            parts.append(arc_rows)
        triples = self._all_triples(n) if self.config.second_order and n >= 3 else []
        if triples:
            a1h = np.array([a1[0] - 1 for a1, _ in triples])
            a1d = np.array([a1[1] - 1 for a1, _ in triples])
            a2h = np.array([a2[0] - 1 for _, a2 in triples])
            a2d = np.array([a2[1] - 1 for _, a2 in triples])
            pair_rows = T.concat([arc_tbl[:, a1h, a1d], arc_tbl[:, a2h, a2d]], axis=2)
            flat = T.reshape(pair_rows, (batch * len(triples), 2 * self.config.match_dim))
            parts.append(T.reshape(self.second_contexts(flat),
                                   (batch, len(triples), self.config.match_dim)))
        return T.concat(parts, axis=1), arc_tbl, pairs, triples

    def context_weights(self, posteriors: Tensor, n: int,
                        pairs: list[tuple[int, int]],
                        triples: list[tuple[tuple[int, int], tuple[int, int]]]
                        ) -> Tensor:
        """Structural weight per context row: 1 for tokens, the arc
        posterior for arcs, the product of the two arc posteriors for
        second-order contexts (a factored stand-in for the exact joint
        marginal, which would need a second-order chart)."""
        batch = posteriors.shape[0]
        parts = [Tensor(np.ones((batch, n)))]
        if pairs:
            h_idx = np.array([h for h, _ in pairs])
            d_idx = np.array([d for _, d in pairs])
            parts.append(posteriors[:, h_idx, d_idx])
        if triples:
            a1h = np.array([a1[0] for a1, _ in triples])
            a1d = np.array([a1[1] for a1, _ in triples])
            a2h = np.array([a2[0] for _, a2 in triples])
            a2d = np.array([a2[1] for _, a2 in triples])
            parts.append(T.mul(posteriors[:, a1h, a1d], posteriors[:, a2h, a2d]))
        return T.concat(parts, axis=1)

    # -- losses ------------------------------------------------------------

    def mle_loss(self, batch: SentenceBatch) -> Tensor:
        """Negative mean conditional log-likelihood with the tree
        marginalized by the inside pass."""
        if not batch.sentence_ids:
            raise ValueError("empty batch")
        _, summary = self.encode(batch.word_ids, batch.tag_ids, batch.node_sets)
        charts = self.charts(batch.tag_ids, summary, need_posteriors=False)
        return T.mul(T.tmean(charts.log_partition), -1.0)

    def contrastive_loss(self, batch: SentenceBatch) -> Tensor:
        if len(batch.sentence_ids) < 2:
            raise ValueError("contrastive loss needs batch size >= 2")
        contexts, summary = self.encode(batch.word_ids, batch.tag_ids, batch.node_sets)
        charts = self.charts(batch.tag_ids, summary, need_posteriors=True)
        return self._contrastive_from(batch, contexts, charts)

    def _contrastive_from(self, batch: SentenceBatch, contexts: Tensor,
                          charts: BatchCharts) -> Tensor:
        bsz, n = batch.tag_ids.shape
        ctx_all, _, pairs, triples = self.batch_contexts(contexts)
        weights = self.context_weights(charts.posteriors, n, pairs, triples)
        per_sentence = ctx_all.shape[1]
        flat_ctx = T.reshape(ctx_all, (bsz * per_sentence, self.config.match_dim))
        if self.config.normalize_sim:
            flat_ctx = T.l2_normalize(flat_ctx)
        columns = []
        for ns in batch.node_sets:
            nodes = self.project_nodes(ns.features)
            if self.config.normalize_sim:
                nodes = T.l2_normalize(nodes)
            sims = T.matmul(flat_ctx, T.swapaxes(nodes, -1, -2))
            columns.append(T.tmax(sims, axis=-1))
        sim_image = T.stack(columns, axis=1)                      # (B*C, B)
        sim_plus = T.mul(sim_image, T.reshape(weights, (bsz * per_sentence, 1)))
        log_probs = T.log_softmax(sim_plus, axis=1)
        own = np.repeat(np.arange(bsz), per_sentence)
        picked = log_probs[np.arange(bsz * per_sentence), own]
        return T.mul(T.tsum(picked), -1.0 / bsz)

    def total_loss(self, batch: SentenceBatch,
                   lambda_cl: Optional[float] = None) -> tuple[Tensor, float, float]:
        """(1 - lambda) * mle + lambda * contrastive, sharing one forward."""
        lam = self.config.lambda_cl if lambda_cl is None else lambda_cl
        if not 0.0 <= lam <= 1.0:
            raise ValueError(f"lambda must be in [0, 1], got {lam}")
        contexts, summary = self.encode(batch.word_ids, batch.tag_ids, batch.node_sets)
        charts = self.charts(batch.tag_ids, summary, need_posteriors=lam > 0.0)
        l_mle = T.mul(T.tmean(charts.log_partition), -1.0)
        if lam == 0.0:
            return l_mle, l_mle.item(), 0.0
        l_cl = self._contrastive_from(batch, contexts, charts)
        total = T.add(T.mul(l_mle, 1.0 - lam), T.mul(l_cl, lam))
        return total, l_mle.item(), l_cl.item()

    def harmonic_loss(self, batch: SentenceBatch) -> Tensor:
        """Warm-up target: expected complete-data log-likelihood under
        nearness-biased attachment posteriors, the usual remedy for the
        initialization sensitivity of valence grammars."""
        _, summary = self.encode(batch.word_ids, batch.tag_ids, batch.node_sets)
        attach, _, _, root = self.decoder_scores(batch.tag_ids, summary)
        bsz, n = batch.tag_ids.shape
        target = np.zeros((bsz, n + 1, n + 1))
        for d in range(1, n + 1):
            weights = np.zeros(n + 1)
            weights[0] = 1.0 / n
            for h in range(1, n + 1):
                if h != d:
                    weights[h] = 1.0 / abs(h - d)
            target[:, :, d] = weights / weights.sum()
        expected = T.add(T.tsum(T.mul(attach, target), axis=(1, 2)),
                         T.tsum(T.mul(root, target[:, 0, :]), axis=1))
        return T.mul(T.tmean(expected), -1.0)

    # -- inference ---------------------------------------------------------

    def parse(self, tokens: Sequence[Token], node_set: VisualNodeSet,
              sentence_id: str = "") -> tuple[DependencyTree, VLAlignment]:
        """Best tree under the decoder plus its grounding; token node
        types are read off the grounding argmax."""
        n = len(tokens)
        if n > self.config.max_parse_len:
            raise ValueError(f"sentence length {n} exceeds the inference cap "
                             f"{self.config.max_parse_len}")
        tag_ids = np.array([[t.pos for t in tokens]])
        word_ids = self.word_ids(tokens)[None]
        contexts, summary = self.encode(word_ids, tag_ids, [node_set])
        scores = self.sentence_scores([t.pos for t in tokens], summary)
        heads, _ = chart.viterbi(scores)
        alignment = self._ground_from(contexts, node_set, heads, sentence_id)
        types = tuple(
            node_set.nodes[self._node_index(node_set, alignment.zero[i])].type
            for i in range(1, n + 1))
        tree = DependencyTree(tokens=tuple(tokens), heads=tuple(heads),
                              types=types, sentence_id=sentence_id)
        return tree, alignment

    def ground(self, tokens: Sequence[Token], node_set: VisualNodeSet,
               heads: Optional[Sequence[int]] = None,
               sentence_id: str = "") -> VLAlignment:
        """Grounding for a sentence; a supplied gold tree fixes the arc
        and triple instance set, otherwise the parsed tree does."""
        tag_ids = np.array([[t.pos for t in tokens]])
        word_ids = self.word_ids(tokens)[None]
        contexts, summary = self.encode(word_ids, tag_ids, [node_set])
        if heads is None:
            scores = self.sentence_scores([t.pos for t in tokens], summary)
            heads, _ = chart.viterbi(scores)
        return self._ground_from(contexts, node_set, list(heads), sentence_id)

    @staticmethod
    def _node_index(node_set: VisualNodeSet, node_id: str) -> int:
        for k, nd in enumerate(node_set.nodes):
            if nd.id == node_id:
                return k
        raise KeyError(node_id)

    def _ground_from(self, contexts: Tensor, node_set: VisualNodeSet,
                     heads: list[int], sentence_id: str) -> VLAlignment:
        n = contexts.shape[1]
        inst = tree_to_instances(heads)
        nodes = self.project_nodes(node_set.features)
        ctx_tok = self.project_contexts(contexts)[0]
        if self.config.normalize_sim:
            nodes = T.l2_normalize(nodes)
            ctx_tok = T.l2_normalize(ctx_tok)
        sim_tok = T.matmul(ctx_tok, T.swapaxes(nodes, -1, -2)).numpy()
        zero = {t: node_set.nodes[int(np.argmax(sim_tok[t - 1]))].id
                for t in inst.zero}

        first: dict[tuple[int, int], FirstAlignment] = {}
        rel_idx = node_set.relationship_indices()
        arc_to_rel: dict[tuple[int, int], VisualNode] = {}
        if len(rel_idx) and inst.first:
            arc_tbl = self.arc_contexts(contexts)
            h_idx = np.array([h - 1 for h, _ in inst.first])
            d_idx = np.array([d - 1 for _, d in inst.first])
            arc_ctx = arc_tbl[0][h_idx, d_idx]
            if self.config.normalize_sim:
                arc_ctx = T.l2_normalize(arc_ctx)
            sim_arc = T.matmul(arc_ctx, T.swapaxes(nodes, -1, -2)).numpy()
            for row, arc in enumerate(inst.first):
                best = rel_idx[int(np.argmax(sim_arc[row][rel_idx]))]
                node = node_set.nodes[best]
                arc_to_rel[arc] = node
                first[arc] = FirstAlignment(relationship=node.id,
                                            endpoints=(node.src, node.dst))

        second: dict[tuple[int, int, int], tuple[str, str, str]] = {}
        for triple in inst.second:
            arc1, arc2 = second_order_arcs(heads, triple)
            r1, r2 = arc_to_rel.get(arc1), arc_to_rel.get(arc2)
            if r1 is None or r2 is None:
                continue
            if heads[triple[1] - 1] == triple[0]:   # chain g -> m -> y
                second[triple] = (r1.src, r1.dst, r2.dst)
            else:                                    # siblings around m
                second[triple] = (r1.dst, r1.src, r2.dst)
        return VLAlignment(sentence_id=sentence_id, zero=zero, first=first,
                           second=second)

    # -- persistence ---------------------------------------------------------

    def save(self, path: str, config_digest: str = "") -> None:
        T.save_checkpoint(path, self.store, config_digest)

    def load(self, path: str, expect_digest: Optional[str] = None) -> str:
        params, digest = T.load_checkpoint(path)
        if expect_digest is not None and digest != expect_digest:
            raise ValueError(f"checkpoint digest {digest!r} does not match "
                             f"config digest {expect_digest!r}")
        self.store.load_values(params)
        return digest
