"""
Training a tiny captioner with differential privacy
===================================================

A synthetic world of 16x16 images holding one or two coloured shapes, each
with a caption such as "a red square left of a blue circle". We train a small
encoder-decoder captioner with and without DP-SGD, then ask what the image
encoder learned: zero-shot classification by decoding over a label trie, and
a 10-shot linear probe on frozen encoder features.

Run:  python3 demos/toy_captioner.py   (two to three minutes on one core)
"""

import time

import numpy as np

from dpcap.accountant import solve_sigma
from dpcap.captioner import PROMPT, SynthSpec, encode, decode, generate_dataset, mean_loss, model_from_dataset_spec, train
from dpcap.dpsgd import DpSgdConfig
from dpcap.evaluate import LabelTrie, linear_probe, zeroshot_tree

spec = SynthSpec()
data = generate_dataset(spec, 2000)
held = generate_dataset(spec, 300, start=10**6)
print(data[0].caption, "|", data[1].caption)

# %%
# A reference point: with uniform next-token predictions the loss is log(vocab).

fresh = model_from_dataset_spec(spec, seed=0)
print(f"untrained held-out loss {mean_loss(fresh, held):.3f}  (log 64 = {np.log(64):.3f})")

# %%
# Non-private training
# --------------------
# Plain minibatch AdamW; private=False skips clipping and noise entirely.

t0 = time.time()
plain = model_from_dataset_spec(spec, seed=0)
train(plain, data, DpSgdConfig(sigma=0.0, B=100, N=len(data), lr=3e-3, private=False), 400)
print(f"non-private: held-out loss {mean_loss(plain, held):.3f}  ({time.time() - t0:.0f}s)")

# %%
# DP-SGD at epsilon = 8
# ---------------------
# Poisson sampling with q = 0.1 for 300 steps. The accountant picks sigma.

q, steps = 0.1, 300
sigma = solve_sigma(8.0, q, steps, 1 / len(data))
t0 = time.time()
private = model_from_dataset_spec(spec, seed=0)
res = train(private, data, DpSgdConfig(sigma=sigma, B=int(q * len(data)), N=len(data), lr=3e-3, seed=1), steps)
print(f"DP-SGD sigma={sigma:.3f} epsilon={res.manifest['epsilon']:.2f}: "
      f"held-out loss {mean_loss(private, held):.3f}  ({time.time() - t0:.0f}s)")

# %%
# Zero-shot classification
# ------------------------
# Each class label ("red square", ...) is a token path in a trie. Greedy
# decoding after the prompt "a photo of a" may only follow trie edges, so it
# always lands on exactly one label.

single = SynthSpec(two_object_prob=0.0, seed=7)
test = generate_dataset(single, 120)
labels = [(s, c) for s in single.shapes for c in single.colors]
trie = LabelTrie([encode([c, s]) for s, c in labels])
prompt = encode(list(PROMPT))
truth = [single.class_of(*p.objects[0][:2]) for p in test]
for name, model in (("untrained", fresh), ("non-private", plain), ("DP eps=8", private)):
    preds = [zeroshot_tree(model, p.image, prompt, trie) for p in test]
    print(f"{name:>12}: zero-shot accuracy {np.mean(np.equal(preds, truth)):.2f} over {len(labels)} classes")

for p in test[:4]:
    k, path = zeroshot_tree(plain, p.image, prompt, trie, return_path=True)
    print(f"   truth: {p.caption!r:<38} decoded: {decode(path)!r}")

# %%
# Linear probe
# ------------
# Mean-pooled encoder features, 10 labelled images per class, multinomial
# logistic regression. Random features already beat chance (1/12), so the
# untrained row is the baseline to compare against.

probe = generate_dataset(single, 1200)
x = np.stack([p.image for p in probe])
y = np.array([single.class_of(*p.objects[0][:2]) for p in probe])
for name, model in (("untrained", fresh), ("non-private", plain), ("DP eps=8", private)):
    acc = linear_probe(model.features(x), y, 10, reg=1e-2, num_classes=single.num_classes).accuracy
    print(f"{name:>12}: 10-shot probe accuracy {acc:.3f}")
