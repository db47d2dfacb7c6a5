#!/usr/bin/env python3
"""Train the full model on a small synthetic corpus and parse with it.

Uses a scaled-down corpus so the script finishes in under a minute;
the acceptance suite runs the full-size version. Watch the dev directed
accuracy climb past the right-branching baseline as the warm-up and the
mixed objective kick in.
"""

from vgram.config import resolve, to_model_config
from vgram.data import SynthConfig, synth_generate
from vgram.metrics import dda_uda, expected_random_dda, right_branching_heads
from vgram.model import Model
from vgram.train import Trainer, TrainSettings

synth = synth_generate(SynthConfig(sentences=400, dev_sentences=60,
                                   test_sentences=60, seed=0))
cfg = resolve()
mc = to_model_config(cfg, tag_count=len(synth.tagset),
                     word_dim=synth.embeddings.shape[1],
                     feat_dim=synth.embeddings.shape[1])
model = Model(mc, synth.vocab, synth.embeddings)

gold = [list(s.heads) for s in synth.dev]
print("baselines on dev:")
print(f"   random head      {expected_random_dda(gold):.3f}")
rb = dda_uda([right_branching_heads(len(s)) for s in synth.dev], gold)[0]
print(f"   right-branching  {rb:.3f}")

settings = TrainSettings(epochs=6, lambda_cl=float(cfg["lambda"]))
trainer = Trainer(model, synth.train, synth.features, settings, dev=synth.dev)


def report(stats):
    tag = "warmup" if stats.phase == "warmup" else f"epoch {stats.epoch}"
    dev = "" if stats.dev_dda is None else \
        f" dev DDA {stats.dev_dda:.3f} UDA {stats.dev_uda:.3f}"
    print(f"   {tag}: mle {stats.mle:.3f} cl {stats.cl:.3f}{dev}")


print("\ntraining:")
trainer.train(on_epoch=report)

print("\nthree parsed test sentences (predicted vs gold heads):")
for s in synth.test[:3]:
    ns = model.build_visual_nodes(s.image_id, synth.features[s.image_id])
    tree, alignment = model.parse(s.tokens, ns, sentence_id=s.id)
    print(f"   {s.id}: pred {list(tree.heads)} gold {list(s.heads)}")

test_dda, test_uda = trainer.evaluate(synth.test)
print(f"\ntest DDA {test_dda:.3f}  UDA {test_uda:.3f}")
