"""Unified token vocabulary and the sequence formats for task outputs.

Every task shares one flat id space laid out as contiguous ranges: four
special tokens, coordinate bins, class tokens (background last), mask
codebook ids, depth codebook ids. Instance predictions are fixed 21-token
records (4 coordinates, 1 class, 16 mask tokens) terminated by EOS; depth
maps are raster scans of the depth tokenizer's grid. Encoding appends
noise records whose mask positions are excluded from the loss, following
the detection-as-language recipe.

Everything here is pure; tokenizer models come in as arguments.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .resize import paste_box
from .tensor import Tensor

PAD = 0
EOS = 1
TASK_DEPTH = 2
TASK_INSTANCE = 3
N_SPECIALS = 4

COORD_TOKENS = 4
MASK_TOKENS = 16
TOKENS_PER_INSTANCE = COORD_TOKENS + 1 + MASK_TOKENS
MASK_GRID = 4
CROP_SIZE = 64


class DecodeError(ValueError):
    """Token sequence violates the format; carries the offending offset."""

    def __init__(self, message, offset):
        super().__init__(f"{message} (offset {offset})")
        self.offset = offset


@dataclass(frozen=True)
class Vocabulary:
    """Layout of the shared id space; ranges are contiguous and disjoint."""

    n_classes: int
    n_coord_bins: int = 2000
    k_mask: int = 128
    k_depth: int = 128

    def __post_init__(self):
        if self.n_classes < 1:
            raise ValueError(f"need at least one foreground class, got {self.n_classes}")
        if self.n_coord_bins < 2 or self.k_mask < 2 or self.k_depth < 2:
            raise ValueError("all token ranges need at least 2 entries")

    @property
    def coord_start(self):
        return N_SPECIALS

    @property
    def class_start(self):
        return self.coord_start + self.n_coord_bins

    @property
    def background(self):
        """Class token id of the background class (last class token)."""
        return self.class_start + self.n_classes

    @property
    def mask_start(self):
        return self.class_start + self.n_classes + 1

    @property
    def depth_start(self):
        return self.mask_start + self.k_mask

    @property
    def total(self):
        return self.depth_start + self.k_depth

    # token constructors ------------------------------------------------
    def coord_token(self, bin_index):
        if not 0 <= bin_index < self.n_coord_bins:
            raise ValueError(f"coordinate bin {bin_index} outside [0, {self.n_coord_bins})")
        return self.coord_start + int(bin_index)

    def class_token(self, class_id):
        if not 0 <= class_id <= self.n_classes:
            raise ValueError(f"class id {class_id} outside [0, {self.n_classes}]")
        return self.class_start + int(class_id)

    def mask_token(self, code):
        if not 0 <= code < self.k_mask:
            raise ValueError(f"mask code {code} outside [0, {self.k_mask})")
        return self.mask_start + int(code)

    def depth_token(self, code):
        if not 0 <= code < self.k_depth:
            raise ValueError(f"depth code {code} outside [0, {self.k_depth})")
        return self.depth_start + int(code)

    # range accessors ----------------------------------------------------
    @property
    def coord_range(self):
        return (self.coord_start, self.class_start)

    @property
    def class_range(self):
        """Foreground classes plus background."""
        return (self.class_start, self.mask_start)

    @property
    def mask_range(self):
        return (self.mask_start, self.depth_start)

    @property
    def depth_range(self):
        return (self.depth_start, self.total)

    def token_kind(self, token):
        """Map an id back to (range name, offset inside the range)."""
        t = int(token)
        if t < 0 or t >= self.total:
            raise ValueError(f"token {t} outside vocabulary of size {self.total}")
        if t < N_SPECIALS:
            return ("pad", "eos", "task_depth", "task_instance")[t], 0
        for name, (start, stop) in (
            ("coord", self.coord_range),
            ("class", self.class_range),
            ("mask", self.mask_range),
            ("depth", self.depth_range),
        ):
            if start <= t < stop:
                return name, t - start
        raise AssertionError("unreachable: ranges cover the id space")

    def layout(self):
        """Stable description embedded in checkpoints for compatibility checks."""
        return {
            "n_classes": self.n_classes,
            "n_coord_bins": self.n_coord_bins,
            "k_mask": self.k_mask,
            "k_depth": self.k_depth,
            "total": self.total,
        }

    @classmethod
    def from_layout(cls, layout):
        vocab = cls(
            n_classes=int(layout["n_classes"]),
            n_coord_bins=int(layout["n_coord_bins"]),
            k_mask=int(layout["k_mask"]),
            k_depth=int(layout["k_depth"]),
        )
        if "total" in layout and int(layout["total"]) != vocab.total:
            raise ValueError(
                f"vocabulary layout total {layout['total']} != computed {vocab.total}"
            )
        return vocab


@dataclass
class InstanceAnnotation:
    """One object: normalized box corners, class id, and its 64x64 mask crop."""

    box: tuple  # (x0, y0, x1, y1) in [0, 1]
    class_id: int
    mask64: np.ndarray
    is_noise: bool = False

    def full_mask(self, image_hw):
        """Paste the crop back into the box at full image resolution."""
        return paste_box(self.mask64.astype(np.uint8), self.box, image_hw).astype(bool)


@dataclass
class TokenSequence:
    ids: list
    loss_mask: list
    task: str  # "ins" | "dep"
    probs: list | None = None  # optional per-position full-vocabulary prob vectors
    truncated: bool = False  # generation hit the length cap before finishing

    def __post_init__(self):
        if len(self.ids) != len(self.loss_mask):
            raise ValueError(
                f"ids and loss_mask lengths differ: {len(self.ids)} vs {len(self.loss_mask)}"
            )
        if self.probs is not None and len(self.probs) != len(self.ids):
            raise ValueError("probs length must match ids")

    def to_json(self):
        return json.dumps(
            {"ids": [int(i) for i in self.ids],
             "loss_mask": [bool(b) for b in self.loss_mask],
             "task": self.task,
             "truncated": bool(self.truncated)},
            sort_keys=True,
        )

    @classmethod
    def from_json(cls, line):
        obj = json.loads(line)
        return cls(ids=list(obj["ids"]), loss_mask=list(obj["loss_mask"]), task=obj["task"],
                   truncated=bool(obj.get("truncated", False)))


# -- coordinate quantization --------------------------------------------------


def quantize_box(box, n_bins=2000):
    """Four bin indices via floor(coord * n_bins), top edge clamped into range."""
    bins = []
    for coord in box:
        c = float(coord)
        if c < -1e-6 or c > 1.0 + 1e-6:
            raise ValueError(f"box coordinate {c} outside [0, 1]")
        c = min(max(c, 0.0), 1.0)
        bins.append(min(int(c * n_bins), n_bins - 1))
    return bins


def dequantize_box(bins, n_bins=2000):
    """Bin centers; roundtrip error is at most 1/(2*n_bins) per coordinate."""
    return tuple((b + 0.5) / n_bins for b in bins)


# -- instance sequences --------------------------------------------------------


def build_instance_sequence(records, vocab: Vocabulary) -> TokenSequence:
    """Assemble 21-token records plus EOS from already-tokenized instances.

    Each record is (box_bins, class_id, mask_codes, is_noise). Loss mask is
    false exactly on the 16 mask positions of noise records; noise boxes and
    the background class target still receive loss.
    """
    ids, loss = [], []
    for box_bins, class_id, mask_codes, is_noise in records:
        if len(box_bins) != COORD_TOKENS:
            raise ValueError(f"expected {COORD_TOKENS} coordinate bins, got {len(box_bins)}")
        if len(mask_codes) != MASK_TOKENS:
            raise ValueError(f"expected {MASK_TOKENS} mask codes, got {len(mask_codes)}")
        ids.extend(vocab.coord_token(b) for b in box_bins)
        ids.append(vocab.class_token(class_id))
        ids.extend(vocab.mask_token(c) for c in mask_codes)
        loss.extend([True] * (COORD_TOKENS + 1))
        loss.extend([not is_noise] * MASK_TOKENS)
    ids.append(EOS)
    loss.append(True)
    return TokenSequence(ids=ids, loss_mask=loss, task="ins")


def parse_instance_sequence(ids, vocab: Vocabulary):
    """Split a terminated id list back into validated 21-token records.

    Returns (box_bins, class_id, mask_codes) triples; class_id == n_classes
    means background. Raises DecodeError naming the first bad offset.
    """
    ids = list(ids)
    try:
        end = ids.index(EOS)
    except ValueError:
        end = len(ids)
    body = ids[:end]
    if len(body) % TOKENS_PER_INSTANCE != 0:
        offset = len(body) - len(body) % TOKENS_PER_INSTANCE
        raise DecodeError(
            f"instance body length {len(body)} is not a multiple of {TOKENS_PER_INSTANCE}",
            offset,
        )
    records = []
    for start in range(0, len(body), TOKENS_PER_INSTANCE):
        rec = body[start : start + TOKENS_PER_INSTANCE]
        box_bins = []
        for j, t in enumerate(rec[:COORD_TOKENS]):
            kind, off = vocab.token_kind(t)
            if kind != "coord":
                raise DecodeError(f"expected coordinate token, found {kind}", start + j)
            box_bins.append(off)
        kind, class_id = vocab.token_kind(rec[COORD_TOKENS])
        if kind != "class":
            raise DecodeError(f"expected class token, found {kind}", start + COORD_TOKENS)
        mask_codes = []
        for j, t in enumerate(rec[COORD_TOKENS + 1 :]):
            kind, off = vocab.token_kind(t)
            if kind != "mask":
                raise DecodeError(
                    f"expected mask token, found {kind}", start + COORD_TOKENS + 1 + j
                )
            mask_codes.append(off)
        records.append((box_bins, class_id, mask_codes))
    return records


def _uniform_box(rng):
    x0, x1 = sorted(rng.uniform(0.0, 1.0, size=2))
    y0, y1 = sorted(rng.uniform(0.0, 1.0, size=2))
    return (x0, y0, x1, y1)


def _jittered_box(box, rng, scale=0.1):
    x0, y0, x1, y1 = (float(c) + rng.uniform(-scale, scale) for c in box)
    x0, x1 = sorted((min(max(x0, 0.0), 1.0), min(max(x1, 0.0), 1.0)))
    y0, y1 = sorted((min(max(y0, 0.0), 1.0), min(max(y1, 0.0), 1.0)))
    return (x0, y0, x1, y1)


def make_noise_instances(real_instances, n_noise, vocab: Vocabulary, rng):
    """Background-class padding records: half jittered real boxes, half uniform."""
    noise = []
    zero = np.zeros((CROP_SIZE, CROP_SIZE), dtype=np.uint8)
    for i in range(n_noise):
        if real_instances and i % 2 == 0:
            box = _jittered_box(real_instances[rng.integers(len(real_instances))].box, rng)
        else:
            box = _uniform_box(rng)
        noise.append(
            InstanceAnnotation(box=box, class_id=vocab.n_classes, mask64=zero.copy(),
                               is_noise=True)
        )
    return noise


def encode_instances(instances, mask_tokenizer, vocab: Vocabulary, n_noise, rng,
                     return_order=False):
    """Real instances in seeded random order, then noise records, then EOS.

    With ``return_order`` the shuffled real-instance indices come back too,
    so callers can align raw supervision targets with record positions.
    """
    order = [int(i) for i in rng.permutation(len(instances))] if instances else []
    records = []
    for i in order:
        inst = instances[i]
        bins = quantize_box(inst.box, vocab.n_coord_bins)
        codes = mask_tokenizer.tokenize(inst.mask64.astype(np.float32)).reshape(-1)
        records.append((bins, inst.class_id, [int(c) for c in codes], False))
    for noise in make_noise_instances(list(instances), n_noise, vocab, rng):
        bins = quantize_box(noise.box, vocab.n_coord_bins)
        codes = mask_tokenizer.tokenize(noise.mask64.astype(np.float32)).reshape(-1)
        records.append((bins, vocab.n_classes, [int(c) for c in codes], True))
    seq = build_instance_sequence(records, vocab)
    return (seq, order) if return_order else seq


def decode_instances(seq: TokenSequence, mask_detokenizer, vocab: Vocabulary,
                     score_threshold=0.0) -> list:
    """Parse records, drop background, rebuild each mask crop.

    With per-position probabilities attached, mask tokens are decoded softly
    through the codebook slice and a record's score is the probability mass
    its class position put on the decoded class; hard sequences score 1.
    """
    out = []
    for rec_index, (box_bins, class_id, mask_codes) in enumerate(
        parse_instance_sequence(seq.ids, vocab)
    ):
        if class_id >= vocab.n_classes:
            continue
        base = rec_index * TOKENS_PER_INSTANCE
        score = 1.0
        if seq.probs is not None and seq.probs[base + COORD_TOKENS] is not None:
            class_probs = restrict_probs(seq.probs[base + COORD_TOKENS], vocab.class_range)
            score = float(class_probs[class_id])
        if score < score_threshold:
            continue
        soft = None
        if seq.probs is not None:
            rows = seq.probs[base + COORD_TOKENS + 1 : base + TOKENS_PER_INSTANCE]
            if all(r is not None for r in rows):
                soft = np.stack([restrict_probs(r, vocab.mask_range) for r in rows])
        if soft is not None:
            recon = mask_detokenizer.detokenize_soft(
                soft.reshape(MASK_GRID, MASK_GRID, vocab.k_mask)
            )
        else:
            grid = np.asarray(mask_codes, dtype=np.int64).reshape(MASK_GRID, MASK_GRID)
            recon = mask_detokenizer.detokenize(grid)
        out.append(
            InstanceAnnotation(
                box=dequantize_box(box_bins, vocab.n_coord_bins),
                class_id=class_id,
                mask64=np.asarray(recon) >= 0.5,
            )
        )
    return out


# -- depth sequences -----------------------------------------------------------


def encode_depth(grid, vocab: Vocabulary) -> TokenSequence:
    """Raster-order flatten of a depth-token grid into the shared id space."""
    grid = np.asarray(grid)
    ids = [vocab.depth_token(int(c)) for c in grid.reshape(-1)]
    return TokenSequence(ids=ids, loss_mask=[True] * len(ids), task="dep")


def decode_depth(seq: TokenSequence, grid_hw, vocab: Vocabulary) -> np.ndarray:
    """Inverse of encode_depth; validates length and token range."""
    h, w = grid_hw
    if len(seq.ids) != h * w:
        raise DecodeError(f"depth sequence length {len(seq.ids)} != {h}*{w}", len(seq.ids))
    codes = np.empty(h * w, dtype=np.int64)
    for i, t in enumerate(seq.ids):
        kind, off = vocab.token_kind(t)
        if kind != "depth":
            raise DecodeError(f"expected depth token, found {kind}", i)
        codes[i] = off
    return codes.reshape(h, w)


def soft_depth_probs(seq: TokenSequence, grid_hw, vocab: Vocabulary) -> np.ndarray:
    """Per-position probabilities over the depth codebook, [h, w, K_depth]."""
    h, w = grid_hw
    if seq.probs is None or any(p is None for p in seq.probs):
        raise ValueError("sequence carries no per-position probabilities")
    if len(seq.probs) != h * w:
        raise DecodeError(f"depth sequence length {len(seq.probs)} != {h}*{w}", len(seq.probs))
    rows = [restrict_probs(p, vocab.depth_range) for p in seq.probs]
    return np.stack(rows).reshape(h, w, vocab.k_depth)


# -- probability restriction ---------------------------------------------------


def restrict_probs(full_probs, token_range):
    """Renormalize the slice of a full-vocabulary distribution onto a codebook.

    Rows whose slice mass falls below 1e-8 become one-hot at the slice argmax
    so the output always satisfies the soft-token contract. Accepts a Tensor
    for the differentiable path (fallback rows are constants there) or plain
    arrays; trailing axis is the vocabulary.
    """
    start, stop = token_range
    if isinstance(full_probs, Tensor):
        sl = full_probs[..., start:stop]
        mass = sl.data.sum(axis=-1, keepdims=True)
        bad = (mass < 1e-8).astype(full_probs.data.dtype)
        onehot = np.zeros_like(sl.data)
        amax = np.argmax(sl.data, axis=-1)
        np.put_along_axis(onehot, amax[..., None], 1.0, axis=-1)
        denom = T.add(T.reduce_sum(sl, axis=-1, keepdims=True), bad)
        normalized = T.mul(sl, T.power(denom, -1.0))
        return T.add(T.mul(normalized, 1.0 - bad), onehot * bad)
    full = np.asarray(full_probs, dtype=np.float64)
    sl = full[..., start:stop]
    mass = sl.sum(axis=-1, keepdims=True)
    bad = mass < 1e-8
    safe = sl / np.where(bad, 1.0, mass)
    onehot = np.zeros_like(sl)
    np.put_along_axis(onehot, np.argmax(sl, axis=-1)[..., None], 1.0, axis=-1)
    return np.where(bad, onehot, safe)
