"""Training loop: harmonic warm-up, mixed objective, per-epoch logging.

Batches group same-length sentences so the chart runs vectorized; the
in-batch images of each group serve as contrastive negatives. Updates
are serialized through one optimizer step per batch with global norm
clipping, which keeps runs bitwise reproducible for a fixed seed.
"""

from __future__ import annotations

import json
import logging
import os
import time
from dataclasses import dataclass
from typing import Callable, Optional, Sequence

import numpy as np

from vgram.core import Box
from vgram.data import Sentence
from vgram.metrics import dda_uda
from vgram.model import Model, SentenceBatch
from vgram.tensor import adam_step

log = logging.getLogger("vgram.train")


@dataclass
class TrainSettings:
    lr: float = 1e-3
    batch_size: int = 16
    epochs: int = 10
    harmonic_warmup_epochs: int = 1
    grad_clip: float = 5.0
    lambda_cl: float = 0.5
    seed: int = 0


@dataclass
class EpochStats:
    epoch: int
    mle: float
    cl: float
    dev_dda: Optional[float] = None
    dev_uda: Optional[float] = None
    seconds: float = 0.0
    phase: str = "train"

    def row(self) -> dict:
        return {"epoch": self.epoch, "phase": self.phase,
                "mle": round(self.mle, 6), "cl": round(self.cl, 6),
                "dev_dda": self.dev_dda, "dev_uda": self.dev_uda,
                "seconds": round(self.seconds, 3)}


class Trainer:
    def __init__(self, model: Model,
                 sentences: Sequence[Sentence],
                 features: dict[str, list[tuple[Box, np.ndarray]]],
                 settings: TrainSettings,
                 dev: Optional[Sequence[Sentence]] = None):
        self.model = model
        self.settings = settings
        self.features = features
        self.dev = list(dev) if dev else []
        cap = model.config.max_train_len
        usable = [s for s in sentences if len(s) <= cap]
        skipped = len(sentences) - len(usable)
        if skipped:
            log.warning("skipping %d sentences longer than %d tokens", skipped, cap)
        if not usable:
            raise ValueError("no usable training sentences")
        self.sentences = usable
        self._shuffle_rng = np.random.default_rng(settings.seed + 1)

    # -- batching -------------------------------------------------------

    def _batches(self) -> list[list[Sentence]]:
        order = self._shuffle_rng.permutation(len(self.sentences))
        buckets: dict[int, list[Sentence]] = {}
        for idx in order:
            s = self.sentences[idx]
            buckets.setdefault(len(s), []).append(s)
        batches = []
        for length in sorted(buckets):
            group = buckets[length]
            for i in range(0, len(group), self.settings.batch_size):
                batches.append(group[i:i + self.settings.batch_size])
        perm = self._shuffle_rng.permutation(len(batches))
        return [batches[i] for i in perm]

    def _assemble(self, group: list[Sentence]) -> SentenceBatch:
        node_sets = [self.model.build_visual_nodes(s.image_id,
                                                   self.features[s.image_id])
                     for s in group]
        word_ids = np.stack([self.model.word_ids(s.tokens) for s in group])
        tag_ids = np.stack([[t.pos for t in s.tokens] for s in group])
        return SentenceBatch(word_ids=word_ids, tag_ids=tag_ids,
                             node_sets=node_sets,
                             sentence_ids=[s.id for s in group],
                             trees=None)

    # -- epochs ----------------------------------------------------------

    def _step(self, loss) -> None:
        self.model.store.zero_grad()
        loss.backward()
        self.model.store.clip_gradients(self.settings.grad_clip)
        adam_step(self.model.store, lr=self.settings.lr)

    def run_epoch(self, warmup: bool = False) -> tuple[float, float]:
        mle_sum = cl_sum = 0.0
        count = 0
        for group in self._batches():
            batch = self._assemble(group)
            if warmup:
                loss = self.model.harmonic_loss(batch)
                self._step(loss)
                continue
            lam = self.settings.lambda_cl if len(group) >= 2 else 0.0
            total, mle_val, cl_val = self.model.total_loss(batch, lambda_cl=lam)
            self._step(total)
            mle_sum += mle_val * len(group)
            cl_sum += cl_val * len(group)
            count += len(group)
        if warmup or count == 0:
            return 0.0, 0.0
        return mle_sum / count, cl_sum / count

    def evaluate(self, sentences: Sequence[Sentence]) -> tuple[Optional[float], Optional[float]]:
        gold = [s.heads for s in sentences
                if s.heads is not None and len(s) <= self.model.config.max_parse_len]
        usable = [s for s in sentences
                  if s.heads is not None and len(s) <= self.model.config.max_parse_len]
        if not usable:
            return None, None
        preds = []
        for s in usable:
            ns = self.model.build_visual_nodes(s.image_id, self.features[s.image_id])
            tree, _ = self.model.parse(s.tokens, ns, sentence_id=s.id)
            preds.append(list(tree.heads))
        dda, uda = dda_uda(preds, [list(g) for g in gold])
        return dda, uda

    def train(self, out_dir: Optional[str] = None,
              config_digest: str = "",
              on_epoch: Optional[Callable[[EpochStats], None]] = None
              ) -> list[EpochStats]:
        history: list[EpochStats] = []
        log_path = os.path.join(out_dir, "train_log.jsonl") if out_dir else None
        if out_dir:
            os.makedirs(out_dir, exist_ok=True)

        def emit(stats: EpochStats) -> None:
            history.append(stats)
            line = json.dumps(stats.row())
            log.info("%s", line)
            if log_path:
                with open(log_path, "a", encoding="utf-8") as f:
                    f.write(line + "\n")
            if on_epoch:
                on_epoch(stats)

        for w in range(self.settings.harmonic_warmup_epochs):
            t0 = time.perf_counter()
            self.run_epoch(warmup=True)
            emit(EpochStats(epoch=-(w + 1), mle=0.0, cl=0.0, phase="warmup",
                            seconds=time.perf_counter() - t0))
        for epoch in range(1, self.settings.epochs + 1):
            t0 = time.perf_counter()
            mle, cl = self.run_epoch()
            dev_dda, dev_uda = self.evaluate(self.dev) if self.dev else (None, None)
            stats = EpochStats(epoch=epoch, mle=mle, cl=cl, dev_dda=dev_dda,
                               dev_uda=dev_uda, seconds=time.perf_counter() - t0)
            emit(stats)
            if out_dir:
                self.model.save(os.path.join(out_dir, f"ckpt_epoch{epoch}.bin"),
                                config_digest)
        if out_dir:
            self.model.save(os.path.join(out_dir, "ckpt_final.bin"), config_digest)
        return history
