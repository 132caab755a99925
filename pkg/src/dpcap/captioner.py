"""Toy encoder-decoder captioner and a procedural image-caption dataset.

The encoder embeds 4x4 RGB patches of a 16x16 image and runs pre-LN
transformer blocks; the decoder is a causal transformer whose blocks
cross-attend to the encoder output. The training loss of one pair is the
mean next-token cross-entropy under teacher forcing, so batch losses are
sums of per-example terms.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass, field, replace
from typing import Sequence

import numpy as np

from .nncore import (
    GELU,
    Embedding,
    LayerNorm,
    Linear,
    MultiHeadAttention,
    ParamStore,
    PositionalEmbedding,
    Runtime,
    iter_layers,
    softmax_cross_entropy,
    softmax_cross_entropy_backward,
)

# -- vocabulary ----------------------------------------------------------------

PAD, BOS, EOS = 0, 1, 2
_WORDS = (
    ["<pad>", "<bos>", "<eos>"]
    + "this is a photo of left right above below and the small large".split()
    + "red green blue yellow purple orange cyan white".split()
    + "square circle triangle".split()
)
VOCAB: tuple[str, ...] = tuple(_WORDS + [f"<unused{i}>" for i in range(64 - len(_WORDS))])
TOKEN_ID = {w: i for i, w in enumerate(VOCAB)}

COLOR_RGB = {
    "red": (1.0, 0.1, 0.1),
    "green": (0.1, 0.9, 0.2),
    "blue": (0.15, 0.25, 1.0),
    "yellow": (1.0, 0.95, 0.1),
    "purple": (0.6, 0.1, 0.8),
    "orange": (1.0, 0.55, 0.0),
    "cyan": (0.1, 0.9, 0.9),
    "white": (1.0, 1.0, 1.0),
}
SHAPES = ("square", "circle", "triangle")
PROMPT = ("this", "is", "a", "photo", "of", "a")


def encode(words: Sequence[str] | str) -> list[int]:
    if isinstance(words, str):
        words = words.split()
    return [TOKEN_ID[w] for w in words]


def decode(ids: Sequence[int]) -> str:
    return " ".join(VOCAB[i] for i in ids if i not in (PAD, BOS, EOS))


# -- data ----------------------------------------------------------------------


@dataclass(frozen=True)
class SynthSpec:
    image_size: int = 16
    patch_size: int = 4
    shapes: tuple[str, ...] = SHAPES
    colors: tuple[str, ...] = ("red", "green", "blue", "yellow")
    two_object_prob: float = 0.3
    noise: float = 0.05
    max_len: int = 12
    seed: int = 0

    def __post_init__(self):
        if self.image_size % self.patch_size:
            raise ValueError("image_size must be a multiple of patch_size")
        for c in self.colors:
            if c not in COLOR_RGB:
                raise ValueError(f"unknown color {c!r}")
        for s in self.shapes:
            if s not in SHAPES:
                raise ValueError(f"unknown shape {s!r}")
        if not 0 <= self.two_object_prob <= 1:
            raise ValueError("two_object_prob must lie in [0, 1]")

    @property
    def num_patches(self) -> int:
        return (self.image_size // self.patch_size) ** 2

    @property
    def patch_dim(self) -> int:
        return self.patch_size * self.patch_size * 3

    @property
    def num_classes(self) -> int:
        return len(self.shapes) * len(self.colors)

    def class_of(self, shape: str, color: str) -> int:
        return self.shapes.index(shape) * len(self.colors) + self.colors.index(color)


@dataclass(frozen=True)
class CaptionPair:
    image: np.ndarray  # (num_patches, patch_dim)
    tokens: tuple[int, ...]  # BOS ... EOS
    objects: tuple[tuple[str, str, int], ...] = field(default=())  # (shape, color, size)

    @property
    def caption(self) -> str:
        return decode(self.tokens)


def _mask(shape: str, size: int, top: int, left: int, n: int) -> np.ndarray:
    yy, xx = np.mgrid[0:n, 0:n]
    y, x = yy - top, xx - left
    inside = (y >= 0) & (y < size) & (x >= 0) & (x < size)
    if shape == "square":
        return inside
    if shape == "circle":
        c = (size - 1) / 2.0
        return inside & ((y - c) ** 2 + (x - c) ** 2 <= (size / 2.0) ** 2)
    # apex-up triangle: half-width grows by 1/2 pixel per row
    c = (size - 1) / 2.0
    return inside & (np.abs(x - c) <= (y + 1) / 2.0)


def to_patches(img: np.ndarray, patch: int) -> np.ndarray:
    n = img.shape[0]
    k = n // patch
    return img.reshape(k, patch, k, patch, 3).transpose(0, 2, 1, 3, 4).reshape(k * k, patch * patch * 3)


def render(objects, spec: SynthSpec, rng: np.random.Generator) -> np.ndarray:
    n = spec.image_size
    img = np.zeros((n, n, 3))
    regions = [(0, n)] if len(objects) == 1 else [(0, n // 2), (n // 2, n)]
    for (shape, color, size), (c0, c1) in zip(objects, regions):
        top = int(rng.integers(0, n - size + 1))
        left = int(rng.integers(c0, c1 - size + 1))
        m = _mask(shape, size, top, left, n)
        img[m] = np.asarray(COLOR_RGB[color]) * rng.uniform(0.85, 1.0)
    img += spec.noise * rng.normal(size=img.shape)
    return to_patches(img, spec.patch_size)


def generate_pair(spec: SynthSpec, index: int) -> CaptionPair:
    """Deterministic in (spec, index)."""
    rng = np.random.default_rng([spec.seed, index])
    n = spec.image_size
    if rng.random() < spec.two_object_prob:
        objs = []
        for _ in range(2):
            objs.append((spec.shapes[rng.integers(len(spec.shapes))],
                         spec.colors[rng.integers(len(spec.colors))],
                         int(rng.integers(4, n // 2))))
        (s1, c1, _), (s2, c2, _) = objs
        words = ["a", c1, s1, "left", "of", "a", c2, s2]
    else:
        shape = spec.shapes[rng.integers(len(spec.shapes))]
        color = spec.colors[rng.integers(len(spec.colors))]
        size = int(rng.integers(5, 10))
        objs = [(shape, color, size)]
        if rng.random() < 0.5:
            words = ["a", "small" if size <= 6 else "large", color, shape]
        else:
            words = list(PROMPT) + [color, shape]
    tokens = (BOS, *encode(words), EOS)
    if len(tokens) > spec.max_len:
        raise ValueError(f"caption longer than max_len={spec.max_len}")
    return CaptionPair(render(objs, spec, rng), tokens, tuple(objs))


def generate_dataset(spec: SynthSpec, n: int, start: int = 0) -> list[CaptionPair]:
    if n < 1:
        raise ValueError("n must be >= 1")
    return [generate_pair(spec, start + i) for i in range(n)]


def export_dataset(pairs: Sequence[CaptionPair], path) -> None:
    """One line per pair: image values (space separated), a tab, token ids."""
    with open(path, "w", encoding="ascii", newline="\n") as f:
        for p in pairs:
            img = " ".join(repr(float(v)) for v in p.image.ravel())
            f.write(f"{img}\t{' '.join(str(t) for t in p.tokens)}\n")


def import_dataset(path, spec: SynthSpec) -> list[CaptionPair]:
    out = []
    with open(path, encoding="ascii") as f:
        for line in f:
            img, toks = line.rstrip("\n").split("\t")
            image = np.array([float(v) for v in img.split()]).reshape(spec.num_patches, spec.patch_dim)
            out.append(CaptionPair(image, tuple(int(t) for t in toks.split())))
    return out


class CaptionBatch:
    """Padded batch of pairs."""

    def __init__(self, images: np.ndarray, tokens: np.ndarray, lengths: np.ndarray):
        self.images = np.asarray(images, dtype=float)
        self.tokens = np.asarray(tokens, dtype=int)
        self.lengths = np.asarray(lengths, dtype=int)
        if not (len(self.images) == len(self.tokens) == len(self.lengths)):
            raise ValueError("inconsistent batch sizes")
        if np.any(self.lengths < 2):
            raise ValueError("every caption needs BOS plus at least one target token")

    @classmethod
    def from_pairs(cls, pairs: Sequence[CaptionPair]) -> "CaptionBatch":
        if not pairs:
            return cls(np.zeros((0, 0, 0)), np.zeros((0, 2), dtype=int), np.zeros(0, dtype=int))
        width = max(len(p.tokens) for p in pairs)
        toks = np.full((len(pairs), width), PAD, dtype=int)
        for i, p in enumerate(pairs):
            toks[i, : len(p.tokens)] = p.tokens
        return cls(np.stack([p.image for p in pairs]), toks, [len(p.tokens) for p in pairs])

    def __len__(self):
        return len(self.lengths)

    def subset(self, idx) -> "CaptionBatch":
        idx = np.asarray(idx, dtype=int)
        return CaptionBatch(self.images[idx], self.tokens[idx], self.lengths[idx])


# -- model ---------------------------------------------------------------------


@dataclass(frozen=True)
class CaptionerConfig:
    vocab_size: int = 64
    num_patches: int = 16
    patch_dim: int = 48
    enc_width: int = 32
    enc_depth: int = 2
    dec_width: int = 32
    dec_depth: int = 2
    heads: int = 4
    mlp_ratio: int = 4
    max_len: int = 12

    def to_dict(self) -> dict:
        return asdict(self)


class _EncoderBlock:
    def __init__(self, rt, name, d, heads, hidden, rng):
        self.ln1 = LayerNorm(rt, f"{name}.ln1", d)
        self.attn = MultiHeadAttention(rt, f"{name}.attn", d, heads, rng)
        self.ln2 = LayerNorm(rt, f"{name}.ln2", d)
        self.fc1 = Linear(rt, f"{name}.fc1", d, hidden, rng)
        self.act = GELU()
        self.fc2 = Linear(rt, f"{name}.fc2", hidden, d, rng)

    def layers(self):
        return iter_layers([self.ln1, self.attn, self.ln2, self.fc1, self.fc2])

    def forward(self, x):
        h = x + self.attn.forward(self.ln1.forward(x))
        return h + self.fc2.forward(self.act.forward(self.fc1.forward(self.ln2.forward(h))))

    def backward(self, dout):
        dh = dout + self.ln2.backward(self.fc1.backward(self.act.backward(self.fc2.backward(dout))))
        return dh + self.ln1.backward(self.attn.backward(dh)[0])


class _DecoderBlock:
    def __init__(self, rt, name, d, d_enc, heads, hidden, rng):
        self.ln1 = LayerNorm(rt, f"{name}.ln1", d)
        self.self_attn = MultiHeadAttention(rt, f"{name}.self", d, heads, rng, causal=True)
        self.ln2 = LayerNorm(rt, f"{name}.ln2", d)
        self.cross_attn = MultiHeadAttention(rt, f"{name}.cross", d, heads, rng, d_src=d_enc)
        self.ln3 = LayerNorm(rt, f"{name}.ln3", d)
        self.fc1 = Linear(rt, f"{name}.fc1", d, hidden, rng)
        self.act = GELU()
        self.fc2 = Linear(rt, f"{name}.fc2", hidden, d, rng)

    def layers(self):
        return iter_layers([self.ln1, self.self_attn, self.ln2, self.cross_attn, self.ln3, self.fc1, self.fc2])

    def forward(self, x, enc):
        h1 = x + self.self_attn.forward(self.ln1.forward(x))
        h2 = h1 + self.cross_attn.forward(self.ln2.forward(h1), enc)
        return h2 + self.fc2.forward(self.act.forward(self.fc1.forward(self.ln3.forward(h2))))

    def backward(self, dout):
        dh2 = dout + self.ln3.backward(self.fc1.backward(self.act.backward(self.fc2.backward(dout))))
        dq, denc = self.cross_attn.backward(dh2)
        dh1 = dh2 + self.ln2.backward(dq)
        return dh1 + self.ln1.backward(self.self_attn.backward(dh1)[0]), denc


class Captioner:
    """Image encoder psi plus causal text decoder phi with cross-attention."""

    def __init__(self, config: CaptionerConfig = CaptionerConfig(), seed: int = 0, half: bool = False):
        self.config = config
        c = config
        rng = np.random.default_rng(seed)
        self.store = ParamStore()
        self.rt = Runtime(self.store, half=half)
        rt = self.rt
        self.patch_embed = Linear(rt, "enc.patch", c.patch_dim, c.enc_width, rng)
        self.enc_pos = PositionalEmbedding(rt, "enc.pos", c.num_patches, c.enc_width, rng)
        self.enc_blocks = [
            _EncoderBlock(rt, f"enc.{i}", c.enc_width, c.heads, c.mlp_ratio * c.enc_width, rng)
            for i in range(c.enc_depth)
        ]
        self.enc_ln = LayerNorm(rt, "enc.ln", c.enc_width)
        self.tok_embed = Embedding(rt, "dec.tok", c.vocab_size, c.dec_width, rng)
        self.dec_pos = PositionalEmbedding(rt, "dec.pos", c.max_len, c.dec_width, rng)
        self.dec_blocks = [
            _DecoderBlock(rt, f"dec.{i}", c.dec_width, c.enc_width, c.heads, c.mlp_ratio * c.dec_width, rng)
            for i in range(c.dec_depth)
        ]
        self.dec_ln = LayerNorm(rt, "dec.ln", c.dec_width)
        self.head = Linear(rt, "dec.head", c.dec_width, c.vocab_size, rng)

    def layers(self):
        out = [self.patch_embed, self.enc_pos]
        for b in self.enc_blocks:
            out += b.layers()
        out += [self.enc_ln, self.tok_embed, self.dec_pos]
        for b in self.dec_blocks:
            out += b.layers()
        return out + [self.dec_ln, self.head]

    # encoder psi
    def encode(self, images):
        images = np.asarray(images, dtype=float)
        if images.shape[1:] != (self.config.num_patches, self.config.patch_dim):
            raise ValueError(f"images must have shape (B, {self.config.num_patches}, {self.config.patch_dim})")
        h = self.enc_pos.forward(self.patch_embed.forward(images))
        for b in self.enc_blocks:
            h = b.forward(h)
        return self.enc_ln.forward(h)

    def _encode_backward(self, dz):
        dh = self.enc_ln.backward(dz)
        for b in reversed(self.enc_blocks):
            dh = b.backward(dh)
        self.patch_embed.backward(self.enc_pos.backward(dh))

    # decoder phi
    def decode_logits(self, z_img, tokens_in):
        tokens_in = np.asarray(tokens_in, dtype=int)
        h = self.dec_pos.forward(self.tok_embed.forward(tokens_in))
        for b in self.dec_blocks:
            h = b.forward(h, z_img)
        return self.head.forward(self.dec_ln.forward(h))

    def _decode_backward(self, dlogits):
        dh = self.dec_ln.backward(self.head.backward(dlogits))
        dz = 0.0
        for b in reversed(self.dec_blocks):
            dh, denc = b.backward(dh)
            dz = dz + denc
        self.tok_embed.backward(self.dec_pos.backward(dh))
        return dz

    def logits(self, images, tokens_in):
        """Next-token logits (B, T, V) for every prefix of tokens_in."""
        return self.decode_logits(self.encode(images), tokens_in)

    def features(self, images):
        """Mean-pooled encoder output, used for linear probing."""
        return self.encode(images).mean(axis=1)

    def forward(self, batch: CaptionBatch):
        """Per-example teacher-forced caption losses, shape (B,)."""
        toks = batch.tokens
        if toks.max(initial=0) >= self.config.vocab_size or toks.min(initial=0) < 0:
            raise ValueError("token id out of range")
        tokens_in, targets = toks[:, :-1], toks[:, 1:]
        mask = (np.arange(targets.shape[1])[None, :] < (batch.lengths - 1)[:, None]).astype(float)
        logits = self.logits(batch.images, tokens_in)
        losses, probs, counts = softmax_cross_entropy(logits, targets, mask)
        self._ce = (probs, targets, mask, counts)
        return losses

    def backward(self, weights):
        probs, targets, mask, counts = self._ce
        dlogits = softmax_cross_entropy_backward(probs, targets, mask, counts, np.asarray(weights, dtype=float))
        self._encode_backward(self._decode_backward(dlogits))

    def clone(self) -> "Captioner":
        m = Captioner(self.config, seed=0, half=self.rt.half)
        m.store.load(self.store.value_copy())
        return m


def caption_loss(model: Captioner, pairs: Sequence[CaptionPair] | CaptionPair) -> np.ndarray:
    """Per-pair losses (1/T) sum_t CE(z_{t+1}, phi(psi(x), z_{1:t}))."""
    if isinstance(pairs, CaptionPair):
        pairs = [pairs]
    return model.forward(CaptionBatch.from_pairs(list(pairs)))


def model_from_dataset_spec(spec: SynthSpec, seed: int = 0, **overrides) -> Captioner:
    cfg = replace(CaptionerConfig(num_patches=spec.num_patches, patch_dim=spec.patch_dim, max_len=spec.max_len),
                  **overrides)
    return Captioner(cfg, seed=seed)


# -- training ------------------------------------------------------------------


@dataclass
class TrainResult:
    model: Captioner
    losses: list[float]
    lrs: list[float]
    manifest: dict


def mean_loss(model: Captioner, pairs: Sequence[CaptionPair], chunk: int = 500) -> float:
    total = 0.0
    for i in range(0, len(pairs), chunk):
        total += float(np.sum(caption_loss(model, pairs[i : i + chunk])))
    return total / len(pairs)


def run_manifest(config, steps: int, delta: float | None, extra: dict | None = None) -> dict:
    """Manifest fields tying the trainer's (sigma, q, S) to the accountant."""
    from .accountant import MechanismParams, epsilon

    delta = 1.0 / config.N if delta is None else delta
    man = {
        "N": config.N,
        "B": config.B,
        "q": config.q,
        "sigma": config.sigma,
        "steps": steps,
        "delta": delta,
        "C": config.C,
        "seed": config.seed,
        "private": config.private,
        "dpsgd": config.to_dict(),
        "empty_batch_policy": "noise-only step",
        "batch_divisor": "expected batch size B",
    }
    if config.private and config.sigma > 0:
        spec = epsilon(MechanismParams(config.sigma, config.q, steps, delta))
        man.update(epsilon=spec.epsilon, alpha=spec.alpha, conversion=spec.conversion)
    else:
        man.update(epsilon=None, alpha=None, conversion=None)
    if extra:
        man.update(extra)
    return man


def train(model: Captioner, dataset: Sequence[CaptionPair], config, steps: int, delta: float | None = None,
          manifest_path=None, scaler=None, callback=None) -> TrainResult:
    """Run `steps` DP-SGD steps (or plain AdamW steps when config.private is False)."""
    from .dpsgd import DpSgdTrainer, write_manifest

    if config.N != len(dataset):
        raise ValueError(f"config.N={config.N} but dataset has {len(dataset)} pairs")
    manifest = run_manifest(config, steps, delta, {"model": model.config.to_dict(), "status": "running"})
    if manifest_path is not None:
        write_manifest(manifest_path, manifest)
    data = CaptionBatch.from_pairs(list(dataset))
    trainer = DpSgdTrainer(model, data, config, steps, scaler)
    losses, lrs = [], []
    for _ in range(steps):
        res = trainer.step()
        losses.append(res.mean_loss)
        lrs.append(res.lr)
        if callback is not None:
            callback(res)
    manifest["status"] = "finished"
    manifest["final_batch_loss"] = losses[-1] if losses else None
    if trainer.scaler is not None:
        manifest["loss_scale"] = trainer.scaler.scale
    if manifest_path is not None:
        write_manifest(manifest_path, manifest)
    return TrainResult(model, losses, lrs, manifest)


@dataclass
class TanRun:
    reference: list[float]
    scaled: list[float]
    reference_plan: object
    scaled_plan: object


def tan_equivalence_run(model_factory, dataset, config, steps: int, k: int, eval_pairs=None) -> TanRun:
    """Train at (B, sigma) and at (B/k, sigma/k) with the same steps and lr.

    Returns the two loss trajectories. With ``eval_pairs`` the trajectory is
    the mean loss on those pairs after every step; otherwise it is the mean
    batch loss.
    """
    from dataclasses import replace as dc_replace

    from .planner import TrainPlan, tan_scale

    plan = TrainPlan(N=config.N, B=config.B, sigma=config.sigma, steps=steps)
    scaled = tan_scale(plan, k)
    curves = []
    for p in (plan, scaled.scaled):
        cfg = dc_replace(config, B=p.B, sigma=p.sigma)
        model = model_factory()
        traj = []
        cb = None
        if eval_pairs is not None:
            cb = lambda res, m=model: traj.append(mean_loss(m, eval_pairs))
        out = train(model, dataset, cfg, steps, callback=cb)
        curves.append(traj if eval_pairs is not None else out.losses)
    return TanRun(curves[0], curves[1], plan, scaled)


def smoothed_gap(a: Sequence[float], b: Sequence[float], window: int = 20) -> float:
    """Mean absolute difference of two trajectories after a moving average."""
    a, b = np.asarray(a, float), np.asarray(b, float)
    kern = np.ones(window) / window
    sa, sb = np.convolve(a, kern, mode="valid"), np.convolve(b, kern, mode="valid")
    return float(np.mean(np.abs(sa - sb)))
