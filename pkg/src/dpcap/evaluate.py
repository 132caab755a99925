"""Zero-shot classification with the captioner and linear probing of its encoder."""

from __future__ import annotations

import csv
import warnings
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .captioner import BOS, EOS, CaptionBatch, CaptionPair, Captioner


@dataclass
class TrieNode:
    children: dict[int, "TrieNode"] = field(default_factory=dict)
    label: int | None = None


class LabelTrie:
    """Prefix tree over label token sequences, each terminated by EOS.

    The EOS edge ends a label, so "car" and "carpet" stay distinguishable:
    after "car" the valid continuations are EOS and "pet".
    """

    def __init__(self, label_token_lists: Sequence[Sequence[int]]):
        if not label_token_lists:
            raise ValueError("at least one label required")
        self.root = TrieNode()
        self.num_labels = len(label_token_lists)
        for label, toks in enumerate(label_token_lists):
            if EOS in toks:
                raise ValueError("label tokens must not contain EOS")
            node = self.root
            for t in list(toks) + [EOS]:
                node = node.children.setdefault(int(t), TrieNode())
            if node.label is not None:
                raise ValueError(f"labels {node.label} and {label} have identical tokens")
            node.label = label

    def node_for(self, prefix: Sequence[int]) -> TrieNode:
        node = self.root
        for t in prefix:
            node = node.children[int(t)]
        return node

    def allowed(self, prefix: Sequence[int]) -> list[int]:
        return sorted(self.node_for(prefix).children)


def _image_batch(image) -> np.ndarray:
    image = np.asarray(image, dtype=float)
    return image[None] if image.ndim == 2 else image


def zeroshot_tree(model: Captioner, image, prompt_tokens: Sequence[int], trie: LabelTrie,
                  return_path: bool = False):
    """Greedy decoding restricted to trie-valid continuations, no backtracking.

    Ties go to the lowest token id. Steps with a single valid continuation
    take it without querying the model.
    """
    z = model.encode(_image_batch(image))
    context = [BOS, *prompt_tokens]
    node, path = trie.root, []
    while True:
        allowed = sorted(node.children)
        if len(allowed) == 1:
            tok = allowed[0]
        else:
            logits = model.decode_logits(z, np.asarray([context + path]))[0, -1]
            tok = allowed[int(np.argmax(logits[allowed]))]
        path.append(tok)
        node = node.children[tok]
        if tok == EOS:
            return (node.label, path) if return_path else node.label


def label_losses(model: Captioner, image, prompt_tokens: Sequence[int],
                 label_token_lists: Sequence[Sequence[int]]) -> np.ndarray:
    """Caption loss of BOS + prompt + label + EOS for every label."""
    img = _image_batch(image)[0]
    pairs = [CaptionPair(img, (BOS, *prompt_tokens, *toks, EOS)) for toks in label_token_lists]
    return model.forward(CaptionBatch.from_pairs(pairs))


def zeroshot_loss(model: Captioner, image, prompt_tokens: Sequence[int],
                  label_token_lists: Sequence[Sequence[int]]) -> int:
    """Label whose caption has the lowest loss; ties go to the lowest label id."""
    if not label_token_lists:
        raise ValueError("at least one label required")
    return int(np.argmin(label_losses(model, image, prompt_tokens, label_token_lists)))


# -- linear probe ----------------------------------------------------------------


@dataclass
class ProbeSet:
    train_x: np.ndarray
    train_y: np.ndarray
    eval_x: np.ndarray
    eval_y: np.ndarray
    K: int


def make_probe_set(features, labels, K: int, seed: int = 0) -> ProbeSet:
    """K training examples per class (chosen with `seed`), the rest for evaluation."""
    features = np.asarray(features, dtype=float)
    labels = np.asarray(labels, dtype=int)
    if features.ndim != 2 or len(features) != len(labels):
        raise ValueError("features must be (n, d) with one label per row")
    if not np.all(np.isfinite(features)):
        raise ValueError("features contain non-finite values")
    rng = np.random.default_rng(seed)
    train = []
    for c in np.unique(labels):
        idx = np.flatnonzero(labels == c)
        if len(idx) <= K:
            raise ValueError(f"class {c} has {len(idx)} examples, need more than K={K}")
        train.extend(rng.choice(idx, K, replace=False))
    train = np.sort(np.asarray(train))
    held = np.setdiff1d(np.arange(len(labels)), train)
    return ProbeSet(features[train], labels[train], features[held], labels[held], K)


@dataclass
class LogisticFit:
    W: np.ndarray
    b: np.ndarray
    mean: np.ndarray
    std: np.ndarray
    grad_norm: float
    iterations: int
    converged: bool

    def predict(self, x) -> np.ndarray:
        z = ((np.asarray(x, dtype=float) - self.mean) / self.std) @ self.W + self.b
        return np.argmax(z, axis=1)


def _objective(W, b, x, onehot, reg):
    z = x @ W + b
    z = z - z.max(axis=1, keepdims=True)
    logp = z - np.log(np.exp(z).sum(axis=1, keepdims=True))
    n = len(x)
    f = -np.sum(onehot * logp) / n + 0.5 * reg * np.sum(W * W)
    p = np.exp(logp)
    gz = (p - onehot) / n
    return f, x.T @ gz + reg * W, gz.sum(axis=0)


def fit_logistic(x, y, num_classes: int, reg: float = 1e-3, tol: float = 1e-5,
                 max_iter: int = 10_000) -> LogisticFit:
    """L2-regularised multinomial logistic regression by gradient descent
    with backtracking (Armijo) line search on standardised features."""
    x = np.asarray(x, dtype=float)
    if not np.all(np.isfinite(x)):
        raise ValueError("features must be finite")
    mean, std = x.mean(axis=0), x.std(axis=0)
    std = np.where(std > 0, std, 1.0)
    xs = (x - mean) / std
    onehot = np.eye(num_classes)[np.asarray(y, dtype=int)]
    W = np.zeros((x.shape[1], num_classes))
    b = np.zeros(num_classes)
    f, gW, gb = _objective(W, b, xs, onehot, reg)
    t = 1.0
    gnorm = float(np.sqrt(np.sum(gW * gW) + np.sum(gb * gb)))
    it = 0
    while gnorm > tol and it < max_iter:
        it += 1
        t *= 2.0
        while True:
            W2, b2 = W - t * gW, b - t * gb
            f2, gW2, gb2 = _objective(W2, b2, xs, onehot, reg)
            if f2 <= f - 0.5 * t * gnorm**2 or t < 1e-12:
                break
            t *= 0.5
        W, b, f, gW, gb = W2, b2, f2, gW2, gb2
        gnorm = float(np.sqrt(np.sum(gW * gW) + np.sum(gb * gb)))
    converged = gnorm <= tol
    if not converged:
        warnings.warn(f"linear probe stopped after {it} iterations at gradient norm {gnorm:.3g}",
                      RuntimeWarning, stacklevel=2)
    return LogisticFit(W, b, mean, std, gnorm, it, converged)


@dataclass
class ProbeResult:
    accuracy: float
    n_eval: int
    K: int
    grad_norm: float
    converged: bool


def linear_probe(features, labels, K: int, reg: float = 1e-3, seed: int = 0, num_classes: int | None = None,
                 max_iter: int = 10_000) -> ProbeResult:
    """Top-1 accuracy of a K-shot linear classifier on the held-out split."""
    labels = np.asarray(labels, dtype=int)
    if len(np.unique(labels)) < 2:
        raise ValueError("need at least two classes")
    num_classes = int(labels.max()) + 1 if num_classes is None else num_classes
    ps = make_probe_set(features, labels, K, seed)
    fit = fit_logistic(ps.train_x, ps.train_y, num_classes, reg, max_iter=max_iter)
    acc = float(np.mean(fit.predict(ps.eval_x) == ps.eval_y))
    return ProbeResult(acc, len(ps.eval_y), K, fit.grad_norm, fit.converged)


EVAL_REPORT_HEADER = ("task", "k", "accuracy", "n_eval", "seed")


def write_eval_report(path, rows: Sequence[tuple]) -> None:
    with open(path, "w", newline="", encoding="utf-8") as f:
        w = csv.writer(f, lineterminator="\n")
        w.writerow(EVAL_REPORT_HEADER)
        for r in rows:
            if len(r) != len(EVAL_REPORT_HEADER):
                raise ValueError(f"report rows need {len(EVAL_REPORT_HEADER)} fields")
            w.writerow(r)
